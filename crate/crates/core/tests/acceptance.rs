//! Acceptance suite.  Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero when any of them fails.
//!
//! The desk-scale criteria share the pretraining runs configured by
//! `configs/desk.toml`; expect several minutes in total.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ddcl::augmentation::transforms::{elastic_displacement_field, elastic_transform};
use ddcl::augmentation::{
    apply_suite, audit_digest, make_view_pairs, AugStrategy, DistortionSuite, Image, RngStream, SuiteKind,
};
use ddcl::config::{ExperimentConfig, Splits};
use ddcl::evaluation::{
    brick_study, extract_features, knn_eval, knn_predict, linear_probe, robustness_sweep, FeatureBank, BASE_COLUMN,
    DIF_INST_COLUMN, ZERO_DVR_COLUMN,
};
use ddcl::losses::*;
use ddcl::model::{file_hash, Mode};
use ddcl::representation::{concat_batch, split_batch, Part, Representation};
use ddcl::training::{
    epoch_checkpoint_name, heldout_dvr_cosine, pretrain, PretrainOptions, PretrainRun, TrainLog, FINAL_CHECKPOINT,
};
use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Scalar-loop oracles.  Matrices are row-major `Vec<Vec<f64>>` (B rows).

type Mat = Vec<Vec<f64>>;

fn to_array(m: &Mat) -> Array2<f64> {
    let (b, d) = (m.len(), m[0].len());
    Array2::from_shape_fn((b, d), |(r, c)| m[r][c])
}

fn o_normalize(z: &Mat) -> Mat {
    let (b, d) = (z.len(), z[0].len());
    let mut out = vec![vec![0.0; d]; b];
    for c in 0..d {
        let mut mean = 0.0;
        for row in z {
            mean += row[c];
        }
        mean /= b as f64;
        let mut var = 0.0;
        for row in z {
            var += (row[c] - mean) * (row[c] - mean);
        }
        let std = (var / b as f64).sqrt();
        if std < 1e-12 {
            continue;
        }
        for r in 0..b {
            out[r][c] = (z[r][c] - mean) / std;
        }
    }
    out
}

fn o_cross(a: &Mat, b: &Mat) -> Mat {
    let (na, nb) = (o_normalize(a), o_normalize(b));
    let (rows, d) = (a.len(), a[0].len());
    let mut c = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for r in 0..rows {
                s += na[r][i] * nb[r][j];
            }
            c[i][j] = s / rows as f64;
        }
    }
    c
}

/// `(on_diag, off_diag)` with the off-diagonal weight applied.
fn o_bt(c: &Mat, lambda: f64) -> (f64, f64) {
    let mut on = 0.0;
    let mut off = 0.0;
    for (i, row) in c.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i == j {
                on += (1.0 - v) * (1.0 - v);
            } else {
                off += v * v;
            }
        }
    }
    (on, lambda * off)
}

fn o_cos(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn o_row_cos(a: &Mat, b: &Mat) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| o_cos(x, y)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn o_simsiam(p1: &Mat, p2: &Mat, z1: &Mat, z2: &Mat) -> f64 {
    -0.5 * mean(&o_row_cos(p1, z2)) - 0.5 * mean(&o_row_cos(p2, z1))
}

fn o_ddl(a: &Mat, b: &Mat, xi: f64) -> f64 {
    let d: Vec<f64> = o_row_cos(a, b).iter().map(|c| (c - xi).abs()).collect();
    mean(&d)
}

fn o_mean_abs_cos(a: &Mat, b: &Mat) -> f64 {
    let d: Vec<f64> = o_row_cos(a, b).iter().map(|c| c.abs()).collect();
    mean(&d)
}

fn random_mat(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Mat {
    (0..b).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
}

fn random_hyper(rng: &mut ChaCha8Rng) -> LossHyperparams {
    LossHyperparams {
        lambda_offdiag: rng.random_range(0.0..0.02),
        gamma: rng.random_range(0.0..2.0),
        xi: rng.random_range(0.0..1.0),
    }
}

struct Worst(f64, String);

impl Worst {
    fn new() -> Self {
        Worst(0.0, String::new())
    }

    fn see(&mut self, what: &str, got: f64, want: f64) {
        let e = (got - want).abs();
        if !(e <= self.0) {
            self.0 = if e.is_nan() { f64::INFINITY } else { e };
            self.1 = format!("{what}: got {got}, oracle {want}");
        }
    }

    fn see_mat(&mut self, what: &str, got: &Array2<f64>, want: &Mat) {
        for ((r, c), &g) in got.indexed_iter() {
            self.see(what, g, want[r][c]);
        }
    }
}

fn loss_oracles() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
    let mut w = Worst::new();
    for _ in 0..1000 {
        let b = rng.random_range(2..=16);
        let d = rng.random_range(2..=64);
        let h = random_hyper(&mut rng);
        let m: Vec<Mat> = (0..8).map(|_| random_mat(&mut rng, b, d)).collect();
        let a: Vec<Array2<f64>> = m.iter().map(to_array).collect();
        let (zi1, zi2, zv1, zv2, pi1, pi2, pv1, pv2) = (&m[0], &m[1], &m[2], &m[3], &m[4], &m[5], &m[6], &m[7]);
        let pair = |i: usize, j: usize| BranchPair::new(a[i].view(), a[j].view());

        w.see_mat("normalize_columns", &normalize_columns(a[0].view()).map_err(err)?, &o_normalize(zi1));
        let c = cross_correlation(a[0].view(), a[1].view()).map_err(err)?;
        let oc = o_cross(zi1, zi2);
        w.see_mat("cross_correlation", &c, &oc);
        let (on, off) = o_bt(&oc, h.lambda_offdiag);
        let bt = bt_loss(c.view(), &h).map_err(err)?;
        w.see("bt_loss.on_diag", bt.on_diag, on);
        w.see("bt_loss.off_diag", bt.off_diag, off);
        w.see("bt_loss.total", bt.total, on + off);
        let (btg, _) = bt_loss_grad(pair(0, 1), &h).map_err(err)?;
        w.see("bt_loss_grad value", btg.total, on + off);

        for r in 0..b {
            let got = cosine_similarity(a[2].row(r), a[3].row(r)).map_err(err)?;
            w.see("cosine_similarity", got, o_cos(&zv1[r], &zv2[r]));
        }
        let rc = row_cosines(a[2].view(), a[3].view()).map_err(err)?;
        for (g, o) in rc.iter().zip(o_row_cos(zv1, zv2)) {
            w.see("row_cosines", *g, o);
        }
        w.see(
            "batch_cosine_similarity",
            batch_cosine_similarity(a[2].view(), a[3].view()).map_err(err)?,
            mean(&o_row_cos(zv1, zv2)),
        );

        let sims = o_simsiam(pi1, pi2, zi1, zi2);
        w.see("simsiam_loss", simsiam_loss(pair(4, 5), pair(0, 1)).map_err(err)?, sims);
        w.see("simsiam_loss_grad value", simsiam_loss_grad(pair(4, 5), pair(0, 1)).map_err(err)?.0, sims);

        let dist = o_ddl(zv1, zv2, h.xi);
        w.see("ddl_distance", ddl_distance(a[2].view(), a[3].view(), h.xi).map_err(err)?, dist);
        w.see("ddl_symmetric", ddl_symmetric(pair(2, 3), &h).map_err(err)?, dist);
        w.see("ddl_symmetric_grad value", ddl_symmetric_grad(pair(2, 3), &h).map_err(err)?.0, dist);
        let ddl_a = 0.5 * o_ddl(pv1, zv2, h.xi) + 0.5 * o_ddl(pv2, zv1, h.xi);
        w.see("ddl_asymmetric", ddl_asymmetric(pair(6, 7), pair(2, 3), &h).map_err(err)?, ddl_a);
        w.see(
            "ddl_asymmetric_grad value",
            ddl_asymmetric_grad(pair(6, 7), pair(2, 3), &h).map_err(err)?.0,
            ddl_a,
        );

        let sym = total_loss_symmetric(pair(0, 1), pair(2, 3), &h).map_err(err)?;
        let (sym_g, _) = total_loss_symmetric_grad(pair(0, 1), pair(2, 3), &h).map_err(err)?;
        for r in [&sym, &sym_g] {
            w.see("total_symmetric.total", r.total, on + off + h.gamma * dist);
            w.see("total_symmetric.dir", r.dir_component, on + off);
            w.see("total_symmetric.ddl", r.ddl_component, dist);
            w.see("total_symmetric.on_diag", r.on_diag.unwrap_or(f64::NAN), on);
            w.see("total_symmetric.off_diag", r.off_diag.unwrap_or(f64::NAN), off);
            w.see("total_symmetric.mean_abs_cos_dvr", r.mean_abs_cos_dvr, o_mean_abs_cos(zv1, zv2));
        }

        let asy = total_loss_asymmetric(pair(4, 5), pair(0, 1), pair(6, 7), pair(2, 3), &h).map_err(err)?;
        let (asy_g, _) =
            total_loss_asymmetric_grad(pair(4, 5), pair(0, 1), pair(6, 7), pair(2, 3), &h).map_err(err)?;
        let mac = 0.5 * o_mean_abs_cos(pv1, zv2) + 0.5 * o_mean_abs_cos(pv2, zv1);
        for r in [&asy, &asy_g] {
            w.see("total_asymmetric.total", r.total, sims + h.gamma * ddl_a);
            w.see("total_asymmetric.dir", r.dir_component, sims);
            w.see("total_asymmetric.ddl", r.ddl_component, ddl_a);
            w.see("total_asymmetric.mean_abs_cos_dvr", r.mean_abs_cos_dvr, mac);
            ensure!(r.on_diag.is_none() && r.off_diag.is_none(), "asymmetric report carries BT terms");
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(w.0 <= 1e-10, "max abs error {:.3e} > 1e-10 ({})", w.0, w.1);
    ensure!(secs < 10.0, "took {secs:.1}s (limit 10s)");
    Ok(format!("1000 instances, max abs error {:.2e}, {secs:.2}s", w.0))
}

// ---------------------------------------------------------------------------
// Finite differences.

const FD_STEP: f64 = 1e-6;

/// Central differences of `f` with respect to every entry of `inputs[k]`
/// for each `k` in `wrt`.
fn fd_grad(inputs: &[Array2<f64>], wrt: &[usize], f: &dyn Fn(&[Array2<f64>]) -> f64) -> Vec<Array2<f64>> {
    let mut work = inputs.to_vec();
    wrt.iter()
        .map(|&k| {
            let mut g = Array2::zeros(inputs[k].dim());
            for idx in ndarray::indices(inputs[k].dim()) {
                let x0 = work[k][idx];
                work[k][idx] = x0 + FD_STEP;
                let up = f(&work);
                work[k][idx] = x0 - FD_STEP;
                let down = f(&work);
                work[k][idx] = x0;
                g[idx] = (up - down) / (2.0 * FD_STEP);
            }
            g
        })
        .collect()
}

/// `||analytic - fd|| / max(||analytic||, ||fd||)` over all blocks, or 0
/// when both gradients vanish below the finite-difference noise floor.
fn rel_error(analytic: &[&Array2<f64>], fd: &[Array2<f64>]) -> f64 {
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for (a, f) in analytic.iter().zip(fd) {
        for (x, y) in a.iter().zip(f) {
            diff += (x - y) * (x - y);
            na += x * x;
            nf += y * y;
        }
    }
    let scale = na.sqrt().max(nf.sqrt());
    if scale < 1e-8 {
        return diff.sqrt();
    }
    diff.sqrt() / scale
}

fn is_zero(a: &Array2<f64>) -> bool {
    a.iter().all(|&v| v == 0.0)
}

/// Draws `n` matrices whose row pairs `(i, j)` in `pairs` keep
/// `|cos - xi| > 1e-3`, away from the kink of the absolute value.
fn draw_off_kink(
    rng: &mut ChaCha8Rng,
    n: usize,
    b: usize,
    d: usize,
    xi: f64,
    pairs: &[(usize, usize)],
) -> Vec<Array2<f64>> {
    loop {
        let m: Vec<Array2<f64>> = (0..n).map(|_| to_array(&random_mat(rng, b, d))).collect();
        let ok = pairs.iter().all(|&(i, j)| {
            row_cosines(m[i].view(), m[j].view())
                .map(|c| c.iter().all(|c| (c - xi).abs() > 1e-3))
                .unwrap_or(false)
        });
        if ok {
            return m;
        }
    }
}

fn bp(m: &[Array2<f64>], i: usize, j: usize) -> BranchPair<'_> {
    BranchPair::new(m[i].view(), m[j].view())
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };

    for _ in 0..100 {
        let b = rng.random_range(2..=16);
        let d = rng.random_range(2..=32);
        let h = random_hyper(&mut rng);

        // bt_loss on raw projections.
        let m = draw_off_kink(&mut rng, 2, b, d, h.xi, &[]);
        let (_, g) = bt_loss_grad(bp(&m, 0, 1), &h).map_err(err)?;
        let fd = fd_grad(&m, &[0, 1], &|x| {
            bt_loss(cross_correlation(x[0].view(), x[1].view()).unwrap().view(), &h).unwrap().total
        });
        record("bt_loss", rel_error(&[&g.first, &g.second], &fd));

        // simsiam: predictions 0,1; targets 2,3.
        let m = draw_off_kink(&mut rng, 4, b, d, h.xi, &[]);
        let (_, g) = simsiam_loss_grad(bp(&m, 0, 1), bp(&m, 2, 3)).map_err(err)?;
        ensure!(is_zero(&g.target.first) && is_zero(&g.target.second), "simsiam target gradient is not zero");
        let fd = fd_grad(&m, &[0, 1], &|x| simsiam_loss(bp(x, 0, 1), bp(x, 2, 3)).unwrap());
        record("simsiam_loss", rel_error(&[&g.prediction.first, &g.prediction.second], &fd));

        // ddl_symmetric.
        let m = draw_off_kink(&mut rng, 2, b, d, h.xi, &[(0, 1)]);
        let (_, g) = ddl_symmetric_grad(bp(&m, 0, 1), &h).map_err(err)?;
        let fd = fd_grad(&m, &[0, 1], &|x| ddl_symmetric(bp(x, 0, 1), &h).unwrap());
        record("ddl_symmetric", rel_error(&[&g.first, &g.second], &fd));

        // ddl_asymmetric: predictions 0,1; targets 2,3.
        let m = draw_off_kink(&mut rng, 4, b, d, h.xi, &[(0, 3), (1, 2)]);
        let (_, g) = ddl_asymmetric_grad(bp(&m, 0, 1), bp(&m, 2, 3), &h).map_err(err)?;
        ensure!(is_zero(&g.target.first) && is_zero(&g.target.second), "ddl_asymmetric target gradient is not zero");
        let fd = fd_grad(&m, &[0, 1], &|x| ddl_asymmetric(bp(x, 0, 1), bp(x, 2, 3), &h).unwrap());
        record("ddl_asymmetric", rel_error(&[&g.prediction.first, &g.prediction.second], &fd));

        // Symmetric total: z_I 0,1; z_V 2,3 (independent widths per block).
        let d_v = rng.random_range(2..=32);
        let mut m = draw_off_kink(&mut rng, 2, b, d, h.xi, &[]);
        m.extend(draw_off_kink(&mut rng, 2, b, d_v, h.xi, &[(0, 1)]));
        let (_, g) = total_loss_symmetric_grad(bp(&m, 0, 1), bp(&m, 2, 3), &h).map_err(err)?;
        let fd = fd_grad(&m, &[0, 1, 2, 3], &|x| total_loss_symmetric(bp(x, 0, 1), bp(x, 2, 3), &h).unwrap().total);
        record(
            "total_loss_symmetric",
            rel_error(&[&g.dir.first, &g.dir.second, &g.dvr.first, &g.dvr.second], &fd),
        );

        // Asymmetric total: p_I 0,1; z_I 2,3; p_V 4,5; z_V 6,7.
        let mut m = draw_off_kink(&mut rng, 4, b, d, h.xi, &[]);
        m.extend(draw_off_kink(&mut rng, 4, b, d_v, h.xi, &[(0, 3), (1, 2)]));
        let f = |x: &[Array2<f64>]| {
            total_loss_asymmetric(bp(x, 0, 1), bp(x, 2, 3), bp(x, 4, 5), bp(x, 6, 7), &h).unwrap().total
        };
        let (_, g) = total_loss_asymmetric_grad(bp(&m, 0, 1), bp(&m, 2, 3), bp(&m, 4, 5), bp(&m, 6, 7), &h)
            .map_err(err)?;
        for t in [&g.dir.target, &g.dvr.target] {
            ensure!(is_zero(&t.first) && is_zero(&t.second), "asymmetric total target gradient is not zero");
        }
        let fd = fd_grad(&m, &[0, 1, 4, 5], &f);
        record(
            "total_loss_asymmetric",
            rel_error(
                &[&g.dir.prediction.first, &g.dir.prediction.second, &g.dvr.prediction.first, &g.dvr.prediction.second],
                &fd,
            ),
        );
    }
    let secs = started.elapsed().as_secs_f64();
    for (name, e) in &worst {
        ensure!(*e <= 1e-4, "{name}: relative error {e:.3e} > 1e-4");
    }
    ensure!(secs < 60.0, "took {secs:.1}s (limit 60s)");
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok(format!("100 instances each, stop-grad targets zero, {secs:.1}s; worst: {}", summary.join(", ")))
}

// ---------------------------------------------------------------------------
// Grouping.

fn grouping_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6209);
    let mut checked = 0;
    for dr in [0.2, 0.4, 0.6, 0.8] {
        for d in [5, 8, 10, 64, 100, 127, 512, 1000, 2048, 4095, 8192] {
            // Arbitrary bit patterns, NaN payloads included.
            let values: Vec<f32> = (0..d).map(|_| f32::from_bits(rng.random())).collect();
            let bits: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            let rep = Representation::new(values, dr).map_err(err)?;
            let (dir, dvr) = rep.split();
            ensure!(dir.len() == (dr * d as f64 + 1e-9).floor() as usize, "DIR length {} for d={d} DR={dr}", dir.len());
            let back = Representation::concat(dir, dvr, dr).map_err(err)?;
            let back_bits: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
            ensure!(back_bits == bits, "vector round trip differs at d={d} DR={dr}");

            let rows = 3;
            let batch = Array2::from_shape_fn((rows, d), |_| f32::from_bits(rng.random()));
            let (bi, bv) = split_batch(batch.view(), dr).map_err(err)?;
            let joined = concat_batch(bi, bv, dr).map_err(err)?;
            ensure!(
                joined.iter().zip(batch.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "batch round trip differs at d={d} DR={dr}"
            );
            checked += 1;
        }
    }
    Ok(format!("{checked} (DR, d) combinations bit-exact, d up to 8192"))
}

// ---------------------------------------------------------------------------
// Augmentation.

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap()
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

fn augmentation_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA06);
    let images: Vec<Image> = (0..48).map(|i| random_image(&mut rng, 40 + i % 9, 48 - i % 7)).collect();
    let refs: Vec<&Image> = images.iter().collect();

    let replay = || {
        let mut bytes = Vec::new();
        for strategy in [AugStrategy::baug(32), AugStrategy::caug(32), AugStrategy::caug_plus(32)] {
            for epoch in 0..2 {
                let streams: Vec<RngStream> =
                    (0..refs.len()).map(|i| RngStream::new(17, i as u64, 0, epoch)).collect();
                for pair in make_view_pairs(&refs, &strategy, &streams) {
                    bytes.extend(pair.first.to_le_bytes());
                    bytes.extend(pair.second.to_le_bytes());
                }
            }
        }
        let mut digests = Vec::new();
        for kind in [SuiteKind::Identity].into_iter().chain(SuiteKind::DISTORTED) {
            let suite = DistortionSuite::new(kind, 1234);
            let out: Vec<(Image, _)> = {
                use rayon::prelude::*;
                refs.par_iter()
                    .enumerate()
                    .map(|(i, x)| apply_suite(x, &suite, suite.stream_for(i as u64)))
                    .collect()
            };
            for (img, _) in &out {
                bytes.extend(img.to_le_bytes());
            }
            digests.push(audit_digest(out.iter().map(|(_, a)| a)));
        }
        (bytes, digests)
    };
    let one = in_pool(1, replay);
    let four = in_pool(4, replay);
    ensure!(one.0 == four.0, "view bytes differ between 1 and 4 workers");
    ensure!(one.1 == four.1, "suite audits differ between 1 and 4 workers");

    let mut max_ratio: f64 = 0.0;
    for i in 0..300 {
        let (h, w) = (rng.random_range(4..=72), rng.random_range(4..=72));
        let alpha = if i == 0 { 100.0 } else { rng.random_range(0.0..250.0) };
        let sigma = if i == 0 { 5.0 } else { rng.random_range(0.3..12.0) };
        let field = elastic_displacement_field(h, w, alpha, sigma, &mut rng);
        let m = field.max_magnitude();
        ensure!(m <= alpha, "displacement {m} exceeds alpha {alpha} ({h}x{w}, sigma {sigma})");
        if alpha > 0.0 {
            max_ratio = max_ratio.max(m / alpha);
        }
    }

    for _ in 0..50 {
        let (h, w) = (rng.random_range(8..=64), rng.random_range(8..=64));
        let x = random_image(&mut rng, h, w);
        let sigma = rng.random_range(0.3..12.0);
        let (y, field) = elastic_transform(&x, 0.0, sigma, &mut rng);
        ensure!(y.to_le_bytes() == x.to_le_bytes(), "alpha = 0 changed the image");
        ensure!(field.max_magnitude() == 0.0, "alpha = 0 produced a nonzero field");
    }
    Ok(format!(
        "{} replay bytes identical across 1 and 4 workers; 300 fields within alpha (max |d|/alpha {max_ratio:.4}); alpha=0 identity on 50 images",
        one.0.len()
    ))
}

// ---------------------------------------------------------------------------
// KNN.

fn oracle_cos_dist(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..a.len() {
        let (x, y) = (a[k] as f64, b[k] as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na.sqrt() * nb.sqrt())
    }
}

/// Full sort by (distance, index), then count votes; ties on the count go
/// to the smaller summed distance, then the smaller class id.
fn oracle_knn(train: &FeatureBank, q: ArrayView1<f32>, k: usize) -> usize {
    let mut all: Vec<(f64, usize)> = (0..train.len()).map(|i| (oracle_cos_dist(train.features.row(i), q), i)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut count = vec![0usize; train.num_classes];
    let mut sum = vec![0.0f64; train.num_classes];
    for &(d, i) in &all[..k] {
        count[train.labels[i]] += 1;
        sum[train.labels[i]] += d;
    }
    let mut best = None::<usize>;
    for c in 0..train.num_classes {
        if count[c] == 0 {
            continue;
        }
        best = match best {
            Some(b) if count[b] > count[c] || (count[b] == count[c] && sum[b] <= sum[c]) => Some(b),
            _ => Some(c),
        };
    }
    best.expect("k >= 1")
}

fn check_knn_bank(train: &FeatureBank, test: &FeatureBank, k: usize) -> Result<(), String> {
    let mut hits = 0;
    for (i, q) in test.features.outer_iter().enumerate() {
        let want = oracle_knn(train, q, k);
        let got = knn_predict(train, q, k);
        ensure!(got == want, "query {i}: knn_predict {got}, brute force {want} (N={}, k={k})", train.len());
        hits += (want == test.labels[i]) as usize;
    }
    let want = 100.0 * hits as f64 / test.len() as f64;
    let got = knn_eval(train, test, k).map_err(err)?;
    ensure!(got == want, "knn_eval {got} vs brute force {want}");
    Ok(())
}

fn random_bank(rng: &mut ChaCha8Rng, n: usize, width: usize, classes: usize, integer: bool) -> FeatureBank {
    let features = Array2::from_shape_fn((n, width), |_| {
        if integer {
            rng.random_range(-2i32..3) as f32
        } else {
            rng.random_range(-1.0f32..1.0)
        }
    });
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    FeatureBank::from_features(features, labels, classes).unwrap()
}

fn knn_oracle(desk: Option<&Desk>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4E4);
    let mut banks = 0;
    for case in 0..200 {
        let n = rng.random_range(1..=500);
        let width = rng.random_range(1..=16);
        let classes = rng.random_range(2..=8);
        let integer = case % 2 == 0;
        let train = random_bank(&mut rng, n, width, classes, integer);
        let test = random_bank(&mut rng, 25, width, classes, integer);
        let k = match case % 4 {
            0 => 1,
            1 => n,
            _ => rng.random_range(1..=n),
        };
        check_knn_bank(&train, &test, k)?;
        banks += 1;
    }
    let mut extra = String::new();
    if let Some(desk) = desk {
        let net = &desk.a.state.net;
        let clean = DistortionSuite::new(SuiteKind::Identity, desk.cfg.eval.suite_seed);
        let tr = extract_features(net, "", &desk.splits.train, &clean, Part::Full).map_err(err)?;
        let te = extract_features(net, "", &desk.splits.test, &clean, Part::Full).map_err(err)?;
        let n = tr.len().min(500);
        let sub = FeatureBank::from_features(
            tr.features.slice(ndarray::s![..n, ..]).to_owned(),
            tr.labels[..n].to_vec(),
            tr.num_classes,
        )
        .map_err(err)?;
        for part in Part::ALL {
            let a = sub.select(part, net.dir_dim()).map_err(err)?;
            let b = te.select(part, net.dir_dim()).map_err(err)?;
            check_knn_bank(&a, &b, desk.cfg.eval.knn_k)?;
            banks += 1;
        }
        extra = format!(", including learned features of the desk run (N={n})");
    }
    Ok(format!("{banks} banks with N <= 500 match exactly{extra}"))
}

// ---------------------------------------------------------------------------
// Desk-scale runs.

struct Desk {
    cfg: ExperimentConfig,
    splits: Splits,
    _root: tempfile::TempDir,
    a_dir: PathBuf,
    b_dir: PathBuf,
    c_dir: PathBuf,
    a: PretrainRun,
    a_secs: f64,
    control_heldout: f64,
    decomposition: Vec<(Mode, TrainLog, f64)>,
}

fn desk_config() -> Result<ExperimentConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = ExperimentConfig::load(&path).map_err(err)?;
    cfg.check().map_err(err)?;
    Ok(cfg)
}

fn run(cfg: &ExperimentConfig, train: &ddcl::data::Dataset, options: PretrainOptions) -> Result<PretrainRun, String> {
    pretrain(&cfg.model, &cfg.training, train, options).map_err(err)
}

fn desk_runs() -> Result<Desk, String> {
    let cfg = desk_config()?;
    let splits = cfg.load_splits().map_err(err)?;
    let root = tempfile::tempdir().map_err(err)?;
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| root.path().join(n)).collect();
    let opts = |dir: &Path| PretrainOptions {
        out_dir: Some(dir.to_path_buf()),
        resume: None,
    };

    eprintln!("desk: run A ({} epochs)", cfg.training.epochs);
    let started = Instant::now();
    let a = run(&cfg, &splits.train, opts(&dirs[0]))?;
    let a_secs = started.elapsed().as_secs_f64();
    eprintln!("desk: run A took {a_secs:.0}s; run B");
    run(&cfg, &splits.train, opts(&dirs[1]))?;

    let resume_epoch = cfg.training.epochs - cfg.training.checkpoint_every;
    eprintln!("desk: run C resumes from epoch {resume_epoch}");
    let ckpt = ddcl::model::Checkpoint::load(&dirs[0].join(epoch_checkpoint_name(resume_epoch))).map_err(err)?;
    let log = TrainLog::load(&dirs[0]).map_err(err)?;
    run(
        &cfg,
        &splits.train,
        PretrainOptions {
            out_dir: Some(dirs[2].clone()),
            resume: Some((ckpt, log)),
        },
    )?;

    eprintln!("desk: gamma = 0 control");
    let mut control = cfg.clone();
    control.training.loss.gamma = 0.0;
    let c = run(&control, &splits.train, PretrainOptions::default())?;
    let control_heldout =
        heldout_dvr_cosine(&c.state.net, &splits.test, &cfg.training.strategy, cfg.seed).map_err(err)?;

    let mut decomposition = Vec::new();
    for mode in [Mode::Asymmetric, Mode::Symmetric] {
        let mut short = cfg.clone();
        short.model.mode = mode;
        short.training.mode = mode;
        let spe = short.training.steps_per_epoch(splits.train.len());
        short.training.epochs = 200usize.div_ceil(spe);
        eprintln!("desk: {mode:?} decomposition run ({} steps)", short.training.epochs * spe);
        let r = run(&short, &splits.train, PretrainOptions::default())?;
        decomposition.push((mode, r.log, short.training.loss.gamma));
    }

    Ok(Desk {
        cfg,
        splits,
        _root: root,
        a_dir: dirs[0].clone(),
        b_dir: dirs[1].clone(),
        c_dir: dirs[2].clone(),
        a,
        a_secs,
        control_heldout,
        decomposition,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn decomposition_identity(desk: &Desk) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for (mode, log, gamma) in &desk.decomposition {
        ensure!(log.steps.len() >= 200, "{mode:?} run logged only {} steps", log.steps.len());
        for s in &log.steps {
            let want = s.dir + gamma * s.ddl;
            let rel = (s.total - want).abs() / s.total.abs().max(want.abs()).max(f64::MIN_POSITIVE);
            ensure!(rel <= 1e-9, "{mode:?} step {}: total {} vs dir + gamma*ddl {want}", s.step, s.total);
            worst = worst.max(rel);
        }
        lines.push(format!("{mode:?} {} steps", log.steps.len()));
    }
    Ok(format!("{}; max relative error {worst:.1e}", lines.join(", ")))
}

fn determinism(desk: &Desk) -> Outcome {
    let mut compared = Vec::new();
    let mut names = vec![FINAL_CHECKPOINT.to_string(), TrainLog::STEPS_FILE.to_string()];
    let every = desk.cfg.training.checkpoint_every;
    names.extend((1..desk.cfg.training.epochs).filter(|e| e % every == 0).map(epoch_checkpoint_name));
    for name in &names {
        ensure!(
            read(&desk.a_dir.join(name))? == read(&desk.b_dir.join(name))?,
            "{name} differs between two identical runs"
        );
        compared.push(name.clone());
    }
    for name in [FINAL_CHECKPOINT, TrainLog::STEPS_FILE] {
        ensure!(
            read(&desk.a_dir.join(name))? == read(&desk.c_dir.join(name))?,
            "{name} of the resumed run differs from the unbroken run"
        );
    }
    let a = TrainLog::load(&desk.a_dir).map_err(err)?;
    let c = TrainLog::load(&desk.c_dir).map_err(err)?;
    ensure!(a.epochs.len() == c.epochs.len(), "resumed run has {} epoch records", c.epochs.len());
    Ok(format!(
        "{} files byte-identical across replays; resumed run matches (final {})",
        compared.len(),
        &file_hash(&desk.a_dir.join(FINAL_CHECKPOINT)).map_err(err)?[..12]
    ))
}

fn disentanglement(desk: &Desk) -> Outcome {
    let t = heldout_dvr_cosine(&desk.a.state.net, &desk.splits.test, &desk.cfg.training.strategy, desk.cfg.seed)
        .map_err(err)?;
    let c = desk.control_heldout;
    let detail = format!(
        "held-out mean |cos| DVR {t:.4} (gamma=1) vs {c:.4} (gamma=0 control), run {:.0}s",
        desk.a_secs
    );
    ensure!(t < 0.15, "{detail}: treatment not below 0.15");
    ensure!(c >= 2.0 * t, "{detail}: control is not separated from the treatment");
    ensure!(desk.a_secs < 1200.0, "{detail}: over 20 minutes");
    Ok(detail)
}

fn functional_learning(desk: &Desk) -> Outcome {
    let net = &desk.a.state.net;
    let ecfg = &desk.cfg.eval;
    let clean = DistortionSuite::new(SuiteKind::Identity, ecfg.suite_seed);
    let tr = extract_features(net, "", &desk.splits.train, &clean, Part::Full).map_err(err)?;
    let te = extract_features(net, "", &desk.splits.test, &clean, Part::Full).map_err(err)?;
    let mut acc = Vec::new();
    for part in Part::ALL {
        let a = linear_probe(
            &tr.select(part, net.dir_dim()).map_err(err)?,
            &te.select(part, net.dir_dim()).map_err(err)?,
            ecfg,
        )
        .map_err(err)?;
        acc.push(a.top1);
    }
    let detail = format!("linear probe top-1: full {:.2}, DIR {:.2}, DVR {:.2}", acc[0], acc[1], acc[2]);
    ensure!(acc[0] >= 85.0, "{detail}: full below 85");
    ensure!(acc[0] >= acc[1] - 0.5, "{detail}: full trails DIR by more than 0.5");
    Ok(detail)
}

fn robustness_identity(desk: &Desk) -> Outcome {
    let net = &desk.a.state.net;
    let ecfg = &desk.cfg.eval;
    let ckpt = file_hash(&desk.a_dir.join(FINAL_CHECKPOINT)).map_err(err)?;
    let mut suites = vec![SuiteKind::Identity];
    suites.extend(SuiteKind::DISTORTED);
    let (train, test) = (&desk.splits.train, &desk.splits.test);
    let all = robustness_sweep(net, &ckpt, train, test, &suites, &Part::ALL, ecfg).map_err(err)?;
    let t = &all.table;
    let mut want_cols = vec![BASE_COLUMN.to_string()];
    want_cols.extend(suites.iter().map(|s| s.label().to_string()));
    ensure!(t.columns == want_cols, "columns {:?}", t.columns);
    for part in Part::ALL {
        let base = t.get(part.label(), BASE_COLUMN).ok_or("missing base")?;
        let id = t.get(part.label(), SuiteKind::Identity.label()).ok_or("missing Identity")?;
        ensure!(base == id, "{part}: Identity {id} != base {base}");
        for s in SuiteKind::DISTORTED {
            let v = t.get(part.label(), s.label()).ok_or(format!("missing {}", s.label()))?;
            ensure!(v.is_finite(), "{part}/{}: {v}", s.label());
        }
    }
    // Audits recomputed independently of the sweep.
    for &kind in &suites {
        let suite = DistortionSuite::new(kind, ecfg.suite_seed);
        let audits: Vec<_> =
            test.items.iter().map(|it| apply_suite(&it.image, &suite, suite.stream_for(it.instance_id)).1).collect();
        let digest = audit_digest(&audits);
        ensure!(all.audits[kind.label()] == digest, "{} audit does not replay", kind.label());
    }
    // One part at a time yields the same distortions and numbers.
    for part in Part::ALL {
        let single = robustness_sweep(net, &ckpt, train, test, &suites, &[part], ecfg).map_err(err)?;
        ensure!(single.audits == all.audits, "{part}: audits differ from the joint sweep");
        let (_, row) = &single.table.rows[0];
        let (_, joint) = t.rows.iter().find(|(r, _)| r == part.label()).ok_or("missing row")?;
        ensure!(row == joint, "{part}: {row:?} vs joint sweep {joint:?}");
    }
    let fmt: Vec<String> = t.rows.iter().map(|(r, v)| format!("{r} {:.1}/{:.1}", v[0], v[1])).collect();
    Ok(format!(
        "Identity == Base per part ({}); {} suite columns; audits replay and agree across parts",
        fmt.join(", "),
        SuiteKind::DISTORTED.len()
    ))
}

fn brick_identity(desk: &Desk) -> Outcome {
    let net = &desk.a.state.net;
    let report =
        brick_study(net, "", &desk.splits.train, &desk.splits.test, &desk.cfg.eval).map_err(err)?;
    let t = &report.table;
    let same = t.get("Orig", "Orig").ok_or("missing Orig/Orig")?;
    ensure!(same == report.unaltered, "Orig/Orig {same} != unaltered {}", report.unaltered);
    for (row, values) in &t.rows {
        for col in [DIF_INST_COLUMN, ZERO_DVR_COLUMN] {
            let v = t.get(row, col).ok_or(format!("missing {row}/{col}"))?;
            ensure!(v.is_finite() && (0.0..=100.0).contains(&v), "{row}/{col}: {v}");
        }
        ensure!(values.len() == t.columns.len(), "ragged row {row}");
    }
    let n = desk.splits.test.len();
    let p = &report.pairing;
    ensure!(p.len() == n, "pairing has {} entries for {n} items", p.len());
    let mut seen = vec![false; n];
    for (i, &j) in p.iter().enumerate() {
        ensure!(j < n && !seen[j], "pairing is not a permutation");
        ensure!(j != i, "pairing fixes item {i}");
        seen[j] = true;
    }
    Ok(format!(
        "Orig/Orig {same:.2} == unaltered; Dif.Inst {:.2}, Zero DVR {:.2}; derangement over {n} items",
        t.get("Orig", DIF_INST_COLUMN).unwrap_or(f64::NAN),
        t.get("Orig", ZERO_DVR_COLUMN).unwrap_or(f64::NAN)
    ))
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn main() {
    // Panics are reported on the criterion's FAIL line.
    std::panic::set_hook(Box::new(|_| {}));
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let report = |name: &'static str, outcome: Outcome, results: &mut Vec<(&str, Outcome)>| {
        match &outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(e) => println!("FAIL {name}: {e}"),
        }
        results.push((name, outcome));
    };

    report("loss-oracles", guarded(loss_oracles), &mut results);
    report("gradients", guarded(gradient_suite), &mut results);
    report("grouping-round-trip", guarded(grouping_round_trip), &mut results);
    report("augmentation-determinism-and-bounds", guarded(augmentation_determinism), &mut results);

    let desk = match catch_unwind(desk_runs) {
        Ok(r) => r,
        Err(_) => Err("desk pretraining panicked".into()),
    };
    let with_desk = |f: fn(&Desk) -> Outcome| match &desk {
        Ok(d) => guarded(|| f(d)),
        Err(e) => Err(format!("desk runs failed: {e}")),
    };
    report("decomposition-identity", with_desk(decomposition_identity), &mut results);
    report("determinism", with_desk(determinism), &mut results);
    report("disentanglement-dynamics", with_desk(disentanglement), &mut results);
    report("functional-learning", with_desk(functional_learning), &mut results);
    report("robustness-identity", with_desk(robustness_identity), &mut results);
    report("brick-identity", with_desk(brick_identity), &mut results);
    report("knn-oracle", guarded(|| knn_oracle(desk.as_ref().ok())), &mut results);

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
