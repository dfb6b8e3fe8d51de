//! Static plots from run directories and evaluation results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ddcl::training::TrainLog;
use image::{Rgb, RgbImage};
use plotters::prelude::*;

use crate::commands::AttentionItem;
use crate::output::{write_json, Failure, Provenance, ResultDoc};
use crate::ReportArgs;

/// Every file below `root`, sorted, skipping the report's own output.
fn walk(root: &Path, skip: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(root)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p == skip {
            continue;
        }
        if p.is_dir() {
            walk(&p, skip, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn slug(root: &Path, dir: &Path) -> String {
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let s: String = rel
        .to_string_lossy()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "run".into()
    } else {
        s
    }
}

fn plot_err(e: impl std::fmt::Display) -> Failure {
    Failure::runtime(format!("plotting failed: {e}"))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

/// Loss terms and the DVR cosine per epoch (per step when no epoch
/// records exist).
pub fn loss_curves(log: &TrainLog, title: &str, path: &Path) -> Result<(), Failure> {
    type Series = Vec<(f64, f64)>;
    let (xlabel, total, dir, ddl, cos): (&str, Series, Series, Series, Series) = if log.epochs.is_empty() {
        let x = |r: &ddcl::training::StepRecord| r.step as f64;
        (
            "step",
            log.steps.iter().map(|r| (x(r), r.total)).collect(),
            log.steps.iter().map(|r| (x(r), r.dir)).collect(),
            log.steps.iter().map(|r| (x(r), r.ddl)).collect(),
            log.steps.iter().map(|r| (x(r), r.mean_abs_cos_dvr)).collect(),
        )
    } else {
        let x = |r: &ddcl::training::EpochRecord| (r.epoch + 1) as f64;
        (
            "epoch",
            log.epochs.iter().map(|r| (x(r), r.total)).collect(),
            log.epochs.iter().map(|r| (x(r), r.dir)).collect(),
            log.epochs.iter().map(|r| (x(r), r.ddl)).collect(),
            log.epochs.iter().map(|r| (x(r), r.mean_abs_cos_dvr)).collect(),
        )
    };
    let xmax = total.iter().map(|p| p.0).fold(1.0, f64::max);
    let root = SVGBackend::new(path, (960, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let root = root.titled(title, ("sans-serif", 18)).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(480);

    let y = bounds(total.iter().chain(&dir).chain(&ddl).map(|p| p.1));
    let mut chart = ChartBuilder::on(&left)
        .caption("loss terms", ("sans-serif", 14))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..xmax, y.0..y.1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(xlabel)
        .y_desc("loss")
        .draw()
        .map_err(plot_err)?;
    for (name, series, color) in [("total", &total, BLACK), ("DIR", &dir, BLUE), ("DDL", &ddl, RED)] {
        chart
            .draw_series(LineSeries::new(series.iter().cloned(), color))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;

    let y = bounds(cos.iter().map(|p| p.1).chain([0.0]));
    let mut chart = ChartBuilder::on(&right)
        .caption("mean |cos| of DVR pairs", ("sans-serif", 14))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..xmax, y.0..y.1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(xlabel).draw().map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(cos.iter().cloned(), MAGENTA))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Distinct disentangling ratios in ascending order.
pub fn dr_ticks(docs: &[ResultDoc]) -> Vec<f64> {
    let mut drs: Vec<f64> = docs.iter().filter_map(|d| d.model.as_ref().map(|m| m.dr)).collect();
    drs.sort_by(f64::total_cmp);
    drs.dedup();
    drs
}

/// Linear-probe top-1 against the disentangling ratio, one line per part.
/// The x axis has one tick per ratio present.
pub fn dr_ablation(docs: &[ResultDoc], path: &Path) -> Result<(), Failure> {
    let ticks = dr_ticks(docs);
    let mut series: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for d in docs {
        let (Some(m), Some(t)) = (&d.model, &d.table) else { continue };
        let i = ticks.iter().position(|&x| x == m.dr).expect("tick exists");
        for (part, row) in &t.rows {
            series.entry(part.clone()).or_default().insert(i, row[0]);
        }
    }
    let y = bounds(series.values().flat_map(|s| s.values().cloned()));
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let labels = ticks.clone();
    let mut chart = ChartBuilder::on(&root)
        .caption("linear probe vs disentangling ratio", ("sans-serif", 16))
        .margin(12)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d((0..ticks.len() - 1).into_segmented(), y.0..y.1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_labels(ticks.len())
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => format!("DR={}", labels[*i]),
            _ => String::new(),
        })
        .y_desc("top-1 %")
        .draw()
        .map_err(plot_err)?;
    let palette = [BLACK, BLUE, RED, GREEN, MAGENTA];
    for (k, (part, points)) in series.iter().enumerate() {
        let color = palette[k % palette.len()];
        let pts: Vec<(SegmentValue<usize>, f64)> =
            points.iter().map(|(&i, &v)| (SegmentValue::CenterOf(i), v)).collect();
        chart
            .draw_series(LineSeries::new(pts.iter().cloned(), color))
            .map_err(plot_err)?
            .label(part.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.iter().map(|p| Circle::new(p.clone(), 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Grid with one row per image: the input followed by each heatmap.
pub fn attention_panel(items: &[AttentionItem], path: &Path) -> Result<(), Failure> {
    const SCALE: u32 = 4;
    const GAP: u32 = 4;
    let Some(first) = items.first() else {
        return Err(Failure::validation("attention result has no items"));
    };
    let size = first.size as u32;
    let cols = 1 + first.maps.len() as u32;
    let cell = size * SCALE;
    let mut img = RgbImage::from_pixel(
        cols * (cell + GAP) + GAP,
        items.len() as u32 * (cell + GAP) + GAP,
        Rgb([255, 255, 255]),
    );
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (r, item) in items.iter().enumerate() {
        let top = GAP + r as u32 * (cell + GAP);
        for y in 0..cell {
            for x in 0..cell {
                let (sy, sx) = ((y / SCALE) as usize, (x / SCALE) as usize);
                let o = (sy * item.size + sx) * 3;
                let px = Rgb([to_u8(item.input_rgb[o]), to_u8(item.input_rgb[o + 1]), to_u8(item.input_rgb[o + 2])]);
                img.put_pixel(GAP + x, top + y, px);
                for (c, map) in item.maps.values().enumerate() {
                    let v = map.get(sy, sx);
                    // Black through red to yellow.
                    let px = Rgb([to_u8(2.0 * v), to_u8(2.0 * v - 1.0), 0]);
                    img.put_pixel(GAP + (c as u32 + 1) * (cell + GAP) + x, top + y, px);
                }
            }
        }
    }
    img.save(path).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn run(args: &ReportArgs) -> Result<(), Failure> {
    if !args.results.is_dir() {
        return Err(Failure::validation(format!(
            "results directory {} does not exist",
            args.results.display()
        )));
    }
    let out = args.out.clone().unwrap_or_else(|| args.results.join("report"));
    let mut files = Vec::new();
    walk(&args.results, &out, &mut files)
        .map_err(|e| Failure::runtime(format!("cannot read {}: {e}", args.results.display())))?;

    let mut logs = Vec::new();
    let mut linear = Vec::new();
    let mut attention = Vec::new();
    for f in &files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name == TrainLog::STEPS_FILE {
            let dir = f.parent().expect("file has a parent");
            logs.push((slug(&args.results, dir), TrainLog::load(dir)?));
        } else if name.ends_with(".json") {
            let Ok(text) = fs::read_to_string(f) else { continue };
            let Ok(doc) = serde_json::from_str::<ResultDoc>(&text) else { continue };
            match doc.kind.as_str() {
                "linear" if doc.table.is_some() => linear.push(doc),
                "attention" => attention.push((f.clone(), doc)),
                _ => {}
            }
        }
    }
    if logs.is_empty() && linear.is_empty() && attention.is_empty() {
        return Err(Failure::validation(format!(
            "nothing to report in {}: expected any of {} (from pretrain), linear.json or attention.json (from eval)",
            args.results.display(),
            TrainLog::STEPS_FILE
        )));
    }

    fs::create_dir_all(&out).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", out.display())))?;
    let mut written = Vec::new();
    for (name, log) in &logs {
        let path = out.join(format!("loss-curves-{name}.svg"));
        loss_curves(log, name, &path)?;
        written.push(path);
    }
    if !linear.is_empty() {
        let path = out.join("dr-ablation.svg");
        dr_ablation(&linear, &path)?;
        written.push(path);
    }
    for (src, doc) in &attention {
        let items: Vec<AttentionItem> = serde_json::from_value(doc.details["items"].clone())
            .map_err(|e| Failure::validation(format!("{}: {e}", src.display())))?;
        let path = out.join(format!("attention-{}.png", slug(&args.results, src.parent().unwrap_or(src))));
        attention_panel(&items, &path)?;
        written.push(path);
    }
    let doc = ResultDoc {
        kind: "report".into(),
        provenance: Provenance::new(None, None, 0),
        model: None,
        eval: None,
        table: None,
        details: serde_json::json!({
            "outputs": written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect::<Vec<_>>(),
            "dr_ticks": dr_ticks(&linear),
        }),
    };
    write_json(&out.join("report.json"), &doc)?;
    log::info!("wrote {} plots to {}", written.len(), out.display());
    Ok(())
}
