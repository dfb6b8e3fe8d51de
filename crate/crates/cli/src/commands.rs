use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ddcl::augmentation::{DistortionSuite, Image, SuiteKind};
use ddcl::config::{DataSource, ExperimentConfig, Splits};
use ddcl::data::{generate_synth, SynthSpec};
use ddcl::evaluation::{
    brick_study, extract_features, knn_eval, linear_probe, robustness_sweep, transfer_probe, Table,
};
use ddcl::model::{attention_map, file_hash, Checkpoint, Heatmap, Mode, Network};
use ddcl::representation::Part;
use ddcl::training::{heldout_dvr_cosine, pretrain as run_pretrain, PretrainOptions, TrainLog, FINAL_CHECKPOINT};
use serde::{Deserialize, Serialize};

use crate::output::{write_json, write_result, Failure, ModelSummary, Provenance, ResultDoc};
use crate::{EvalArgs, EvalMode, InspectArgs, PartArg, PretrainArgs, SynthArgs, TrainModeArg};

fn part_of(p: PartArg) -> Part {
    match p {
        PartArg::Full => Part::Full,
        PartArg::Dir => Part::Dir,
        PartArg::Dvr => Part::Dvr,
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::load(path)?)
}

pub fn pretrain(args: &PretrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(mode) = args.mode {
        let mode = match mode {
            TrainModeArg::Symmetric => Mode::Symmetric,
            TrainModeArg::Asymmetric => Mode::Asymmetric,
        };
        cfg.model.mode = mode;
        cfg.training.mode = mode;
    }
    cfg.check()?;
    let Splits { train, test } = cfg.load_splits()?;
    let problems = ddcl::training::validate_setup(&cfg.model, &cfg.training, &train);
    if !problems.is_empty() {
        return Err(ddcl::Error::Config(problems).into());
    }
    let resume = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let log = TrainLog::load(&cfg.output_dir)?;
            Some((ckpt, log))
        }
        None => None,
    };

    let out = cfg.output_dir.clone();
    cfg.write_resolved(&out)?;
    log::info!(
        "pretraining {} images for {} epochs into {}",
        train.len(),
        cfg.training.epochs,
        out.display()
    );
    let run = run_pretrain(
        &cfg.model,
        &cfg.training,
        &train,
        PretrainOptions {
            out_dir: Some(out.clone()),
            resume,
        },
    )?;
    let heldout = heldout_dvr_cosine(&run.state.net, &test, &cfg.training.strategy, cfg.seed)?;
    let doc = ResultDoc {
        kind: "pretrain".into(),
        provenance: Provenance::new(
            Some(cfg.hash()),
            Some(file_hash(&out.join(FINAL_CHECKPOINT))?),
            cfg.seed,
        ),
        model: Some(ModelSummary::of(&cfg.model)),
        eval: None,
        table: None,
        details: serde_json::json!({
            "steps": run.checkpoint.meta.step,
            "epochs": cfg.training.epochs,
            "train_images": train.len(),
            "train_digest": train.digest(),
            "test_digest": test.digest(),
            "heldout_mean_abs_cos_dvr": heldout,
            "final_epoch": run.log.epochs.last(),
        }),
    };
    write_json(&out.join("run.json"), &doc)?;
    log::info!("held-out mean |cos| of the DVR pairs: {heldout:.4}");
    Ok(())
}

struct EvalContext {
    cfg: ExperimentConfig,
    checkpoint_hash: String,
    net: Network,
    splits: Splits,
    out: PathBuf,
}

fn eval_context(args: &EvalArgs) -> Result<EvalContext, Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    cfg.check()?;
    let ckpt_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(FINAL_CHECKPOINT));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    if ckpt.meta.model != cfg.model {
        return Err(Failure::validation(format!(
            "checkpoint {} was trained with a different model than the config describes",
            ckpt_path.display()
        )));
    }
    let net = ckpt.network()?;
    let splits = cfg.load_splits()?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("eval"));
    Ok(EvalContext {
        checkpoint_hash: file_hash(&ckpt_path)?,
        cfg,
        net,
        splits,
        out,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionItem {
    pub instance_id: u64,
    pub label: usize,
    /// Input image as fed to the encoder.
    pub size: usize,
    pub input_rgb: Vec<f32>,
    pub maps: BTreeMap<String, Heatmap>,
}

pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let ctx = eval_context(args)?;
    let EvalContext {
        cfg,
        checkpoint_hash,
        net,
        splits,
        out,
    } = &ctx;
    let ecfg = &cfg.eval;
    let parts: Vec<Part> = match args.part {
        Some(p) => vec![part_of(p)],
        None => Part::ALL.to_vec(),
    };
    let suites: Vec<SuiteKind> = if args.suite.is_empty() {
        SuiteKind::DISTORTED.to_vec()
    } else {
        args.suite
            .iter()
            .map(|s| SuiteKind::parse(s).ok_or_else(|| Failure::validation(format!("unknown suite '{s}'"))))
            .collect::<Result<_, _>>()?
    };
    let clean = DistortionSuite::new(SuiteKind::Identity, ecfg.suite_seed);
    let mut details = serde_json::Value::Null;

    let table = match args.mode {
        EvalMode::Linear | EvalMode::Knn => {
            let train = extract_features(net, checkpoint_hash, &splits.train, &clean, Part::Full)?;
            let test = extract_features(net, checkpoint_hash, &splits.test, &clean, Part::Full)?;
            let linear = args.mode == EvalMode::Linear;
            let (title, columns) = if linear {
                ("Linear probe on frozen features (%)", vec!["top1".into(), "top3".into()])
            } else {
                ("KNN on frozen features (top-1 %)", vec!["top1".into()])
            };
            let mut table = Table::new(title, "part", columns);
            if !linear {
                table.notes.push(format!("k = {}, cosine distance", ecfg.knn_k));
            }
            for &part in &parts {
                let tr = train.select(part, net.dir_dim())?;
                let te = test.select(part, net.dir_dim())?;
                let row = if linear {
                    let acc = linear_probe(&tr, &te, ecfg)?;
                    vec![acc.top1, acc.top3]
                } else {
                    vec![knn_eval(&tr, &te, ecfg.knn_k)?]
                };
                table.rows.push((part.label().to_string(), row));
            }
            Some(table)
        }
        EvalMode::Robustness => {
            let report = robustness_sweep(net, checkpoint_hash, &splits.train, &splits.test, &suites, &parts, ecfg)?;
            details = serde_json::json!({ "suite_seed": ecfg.suite_seed, "audits": report.audits });
            Some(report.table)
        }
        EvalMode::Brick => {
            let report = brick_study(net, checkpoint_hash, &splits.train, &splits.test, ecfg)?;
            details = serde_json::json!({ "unaltered_top1": report.unaltered, "dif_inst_pairing": report.pairing });
            Some(report.table)
        }
        EvalMode::Transfer => {
            let data = cfg
                .load_transfer()?
                .ok_or_else(|| Failure::validation("transfer needs [data.transfer] in the config"))?;
            let t = cfg.data.transfer.as_ref().expect("checked above");
            Some(transfer_probe(net, checkpoint_hash, &data, t.train_fraction, ecfg.seed, ecfg)?)
        }
        EvalMode::Attention => {
            let parts_for_maps = if args.part.is_some() { parts.clone() } else { Part::ALL.to_vec() };
            let size = cfg.model.encoder.input_size;
            let mut items = Vec::new();
            for it in splits.test.items.iter().take(args.count) {
                let x: Image = it.image.resize(size, size);
                let x = if cfg.model.encoder.in_channels == 1 { x } else { x.to_rgb() };
                let mut maps = BTreeMap::new();
                for &p in &parts_for_maps {
                    maps.insert(p.label().to_string(), attention_map(net, &x, p)?);
                }
                items.push(AttentionItem {
                    instance_id: it.instance_id,
                    label: it.label,
                    size,
                    input_rgb: x.to_rgb().data().to_vec(),
                    maps,
                });
            }
            details = serde_json::json!({ "class_names": splits.test.class_names, "items": items });
            None
        }
    };

    let mode_name = format!("{:?}", args.mode).to_lowercase();
    let stem = match args.part {
        Some(p) => format!("{mode_name}-{}", part_of(p).label()),
        None => mode_name.clone(),
    };
    let doc = ResultDoc {
        kind: mode_name,
        provenance: Provenance::new(Some(cfg.hash()), Some(checkpoint_hash.clone()), cfg.eval.seed),
        model: Some(ModelSummary::of(&cfg.model)),
        eval: Some(cfg.eval.clone()),
        table,
        details,
    };
    write_result(out, &stem, &doc)?;
    if let Some(t) = &doc.table {
        print!("{}", t.to_csv());
    }
    log::info!("wrote {}", out.join(format!("{stem}.json")).display());
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let mut spec = match &args.config {
        Some(path) => {
            let cfg = load_config(path)?;
            match cfg.data.source {
                DataSource::Synth(spec) => spec,
                _ => return Err(Failure::validation("the config's data source is not synth")),
            }
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.n_per_class {
        spec.n_per_class = n;
    }
    if let Some(size) = args.size {
        spec.size = size;
    }
    let ds = generate_synth(&spec)?;
    ds.save_image_directory(&args.out)?;
    let doc = ResultDoc {
        kind: "synth".into(),
        provenance: Provenance::new(None, None, spec.seed),
        model: None,
        eval: None,
        table: None,
        details: serde_json::json!({ "spec": spec, "images": ds.len(), "digest": ds.digest() }),
    };
    write_json(&args.out.join("synth.json"), &doc)?;
    log::info!("wrote {} images to {}", ds.len(), args.out.display());
    Ok(())
}

pub fn inspect(args: &InspectArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let net = ckpt.network()?;
    let tensors: Vec<serde_json::Value> = ckpt
        .tensors
        .iter()
        .map(|t| serde_json::json!({ "name": t.name, "role": t.role, "shape": t.shape }))
        .collect();
    let summary = serde_json::json!({
        "checkpoint_hash": file_hash(&args.checkpoint)?,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "step": ckpt.meta.step,
        "seed": ckpt.meta.seed,
        "model": ModelSummary::of(&ckpt.meta.model),
        "model_config": ckpt.meta.model,
        "training": ckpt.meta.training,
        "param_count": net.param_count(),
        "tensors": tensors,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).map_err(|e| Failure::runtime(e.to_string()))?
    );
    Ok(())
}
