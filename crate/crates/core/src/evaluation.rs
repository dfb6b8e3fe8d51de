//! Frozen-feature evaluation: linear probes, KNN, robustness sweeps over
//! distortion suites, the brick study and transfer probing.
//!
//! Accuracies are reported in percent.  Features always come from the
//! encoder in evaluation mode, so a bank depends only on the network, the
//! images and the suite seeds.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::transforms::{horizontal_flip, rotate};
use crate::augmentation::{apply_suite, audit_digest, DistortionSuite, Image, SuiteAudit, SuiteKind};
use crate::data::{split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::representation::{compose_brick, BrickSpec, DvrSource, Part, ReprBank, ReprRef};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_momentum: f64,
    pub probe_weight_decay: f64,
    pub probe_batch_size: usize,
    /// Standardize probe inputs with train-set statistics.
    pub standardize: bool,
    pub knn_k: usize,
    /// Seeds probe shuffling and the brick-study derangement.
    pub seed: u64,
    /// Base seed of the distortion suites.
    pub suite_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_epochs: 100,
            probe_lr: 30.0,
            probe_momentum: 0.9,
            probe_weight_decay: 0.0,
            probe_batch_size: 256,
            standardize: false,
            knn_k: 20,
            seed: 0,
            suite_seed: 1234,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.probe_epochs == 0 {
            problems.push("eval.probe_epochs must be positive".into());
        }
        if !(self.probe_lr.is_finite() && self.probe_lr > 0.0) {
            problems.push(format!("eval.probe_lr must be positive, got {}", self.probe_lr));
        }
        if !(0.0..1.0).contains(&self.probe_momentum) {
            problems.push(format!("eval.probe_momentum must lie in [0, 1), got {}", self.probe_momentum));
        }
        if !(self.probe_weight_decay.is_finite() && self.probe_weight_decay >= 0.0) {
            problems.push(format!(
                "eval.probe_weight_decay must be nonnegative, got {}",
                self.probe_weight_decay
            ));
        }
        if self.probe_batch_size == 0 {
            problems.push("eval.probe_batch_size must be positive".into());
        }
        if self.knn_k == 0 {
            problems.push("eval.knn_k must be positive".into());
        }
        problems
    }
}

/// Where a bank's features came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub suite: SuiteKind,
    pub suite_seed: u64,
    /// Digest of the per-sample distortion parameters.
    pub audit: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    /// `N × width`, rows in dataset order.
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub instance_ids: Vec<u64>,
    pub part: Part,
    pub provenance: Provenance,
}

impl FeatureBank {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    /// Columns of `part` out of a full-representation bank.
    pub fn select(&self, part: Part, dir_dim: usize) -> Result<FeatureBank> {
        if self.part != Part::Full {
            return Err(Error::InvalidInput(format!("can only select parts from a full bank, not {}", self.part)));
        }
        let cols = part.columns(self.width(), dir_dim);
        Ok(FeatureBank {
            features: self.features.slice(s![.., cols]).to_owned(),
            part,
            ..self.clone()
        })
    }

    /// Builds a bank from raw features, e.g. for tests and external data.
    pub fn from_features(features: Array2<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape(features.nrows(), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidInput(format!("label {l} out of range for {num_classes} classes")));
        }
        let n = labels.len() as u64;
        Ok(Self {
            features,
            labels,
            num_classes,
            instance_ids: (0..n).collect(),
            part: Part::Full,
            provenance: Provenance {
                checkpoint: String::new(),
                suite: SuiteKind::Identity,
                suite_seed: 0,
                audit: String::new(),
            },
        })
    }
}

/// Fixed chunk size for feature extraction; results do not depend on the
/// thread count because every chunk is processed the same way.
const EXTRACT_CHUNK: usize = 64;

fn encode_all(net: &Network, images: &[Image]) -> Result<Array2<f32>> {
    let size = net.config.encoder.input_size;
    let channels = net.config.encoder.in_channels;
    let blocks: Vec<Array2<f32>> = images
        .par_chunks(EXTRACT_CHUNK)
        .map(|chunk| {
            let prepared: Vec<Image> = chunk
                .iter()
                .map(|x| {
                    let x = x.resize(size, size);
                    if channels == 3 { x.to_rgb() } else { x }
                })
                .collect();
            let refs: Vec<&Image> = prepared.iter().collect();
            net.encode(&refs)
        })
        .collect::<Result<_>>()?;
    let views: Vec<ArrayView2<f32>> = blocks.iter().map(|b| b.view()).collect();
    if views.is_empty() {
        return Ok(Array2::zeros((0, net.dim())));
    }
    Ok(ndarray::concatenate(Axis(0), &views).expect("blocks share the width"))
}

/// Applies `suite` to every item (streams keyed by instance id), encodes the
/// results and keeps the columns of `part`.
pub fn extract_features(
    net: &Network,
    checkpoint: &str,
    data: &Dataset,
    suite: &DistortionSuite,
    part: Part,
) -> Result<FeatureBank> {
    let (images, audits): (Vec<Image>, Vec<SuiteAudit>) = data
        .items
        .par_iter()
        .map(|it| apply_suite(&it.image, suite, suite.stream_for(it.instance_id)))
        .unzip();
    let full = encode_all(net, &images)?;
    let bank = FeatureBank {
        features: full,
        labels: data.labels(),
        num_classes: data.num_classes(),
        instance_ids: data.items.iter().map(|it| it.instance_id).collect(),
        part: Part::Full,
        provenance: Provenance {
            checkpoint: checkpoint.to_string(),
            suite: suite.kind,
            suite_seed: suite.seed_base,
            audit: audit_digest(&audits),
        },
    };
    bank.select(part, net.dir_dim())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top3: f64,
}

/// Softmax regression trained on frozen features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `classes × width`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// Per-feature `(mean, std)` when inputs are standardized.
    pub standardization: Option<(Array1<f64>, Array1<f64>)>,
    pub part: Part,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

impl LinearProbe {
    pub fn fit(train: &FeatureBank, cfg: &EvalConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidInput("linear probe needs a nonempty train bank".into()));
        }
        let present = train.labels.iter().collect::<std::collections::BTreeSet<_>>().len();
        if present < 2 {
            return Err(Error::InvalidInput(format!(
                "linear probe needs at least 2 classes in the train bank, found {present}"
            )));
        }
        let x = train.features.mapv(f64::from);
        let standardization = cfg.standardize.then(|| {
            let mean = x.mean_axis(Axis(0)).expect("nonempty");
            let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
            (mean, std)
        });
        let x = match &standardization {
            Some((m, s)) => (&x - m) / s,
            None => x,
        };
        let (n, f) = x.dim();
        let c = train.num_classes;
        let mut w = Array2::<f64>::zeros((c, f));
        let mut b = Array1::<f64>::zeros(c);
        let mut vw = Array2::<f64>::zeros((c, f));
        let mut vb = Array1::<f64>::zeros(c);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut p = vec![0.0; c];
        for epoch in 0..cfg.probe_epochs {
            let lr = cfg.probe_lr * 0.5 * (1.0 + (PI * epoch as f64 / cfg.probe_epochs as f64).cos());
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.probe_batch_size) {
                let mut gw = Array2::<f64>::zeros((c, f));
                let mut gb = Array1::<f64>::zeros(c);
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let xi = x.row(i);
                    for k in 0..c {
                        p[k] = w.row(k).dot(&xi) + b[k];
                    }
                    softmax_in_place(&mut p);
                    p[train.labels[i]] -= 1.0;
                    for k in 0..c {
                        gw.row_mut(k).scaled_add(p[k] * scale, &xi);
                        gb[k] += p[k] * scale;
                    }
                }
                gw.scaled_add(cfg.probe_weight_decay, &w);
                vw = &vw * cfg.probe_momentum + &gw;
                vb = &vb * cfg.probe_momentum + &gb;
                w.scaled_add(-lr, &vw);
                b.scaled_add(-lr, &vb);
            }
        }
        Ok(Self {
            weight: w,
            bias: b,
            standardization,
            part: train.part,
        })
    }

    /// Class scores for one feature row.
    pub fn logits(&self, x: ArrayView1<f32>) -> Array1<f64> {
        let mut x = x.mapv(f64::from);
        if let Some((m, s)) = &self.standardization {
            x = (&x - m) / s;
        }
        self.weight.dot(&x) + &self.bias
    }

    /// Predicted class: highest score, ties to the lower class id.
    pub fn predict(&self, x: ArrayView1<f32>) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for k in 1..z.len() {
            if z[k] > z[best] {
                best = k;
            }
        }
        best
    }

    pub fn evaluate(&self, bank: &FeatureBank) -> Result<Accuracy> {
        if bank.width() != self.weight.ncols() {
            return Err(Error::shape(
                format!("{} feature columns", self.weight.ncols()),
                format!("{} feature columns", bank.width()),
            ));
        }
        if bank.is_empty() {
            return Err(Error::InvalidInput("cannot evaluate on an empty bank".into()));
        }
        let c = self.weight.nrows();
        let (mut hit1, mut hit3) = (0usize, 0usize);
        for (row, &label) in bank.features.outer_iter().zip(&bank.labels) {
            let z = self.logits(row);
            let mut ranked: Vec<usize> = (0..c).collect();
            ranked.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
            hit1 += (ranked[0] == label) as usize;
            hit3 += ranked.iter().take(3).any(|&k| k == label) as usize;
        }
        let n = bank.len() as f64;
        Ok(Accuracy {
            top1: 100.0 * hit1 as f64 / n,
            top3: 100.0 * hit3 as f64 / n,
        })
    }
}

pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &EvalConfig) -> Result<Accuracy> {
    if train.width() != test.width() {
        return Err(Error::shape(train.width(), test.width()));
    }
    LinearProbe::fit(train, cfg)?.evaluate(test)
}

/// `1 - cos(a, b)` in `f64`; a zero vector is at distance 1 from anything.
pub fn cosine_distance(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Majority vote over the `k` nearest train points by cosine distance.
/// Equal distances order by train index; a tied vote goes to the class
/// with the smallest summed distance, then the smaller class id.
pub fn knn_predict(train: &FeatureBank, query: ArrayView1<f32>, k: usize) -> usize {
    let mut dist: Vec<(f64, usize)> = train
        .features
        .outer_iter()
        .enumerate()
        .map(|(i, row)| (cosine_distance(row, query), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, cmp);
        dist.truncate(k);
    }
    // Fixed summation order keeps the distance tie-break reproducible.
    dist.sort_unstable_by(cmp);
    let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &(d, i) in &dist {
        let e = votes.entry(train.labels[i]).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d;
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for (&class, &(count, sum)) in &votes {
        let better = match best {
            None => true,
            Some((_, bc, bs)) => count > bc || (count == bc && sum < bs),
        };
        if better {
            best = Some((class, count, sum));
        }
    }
    best.expect("k >= 1").0
}

/// Top-1 KNN accuracy in percent.
pub fn knn_eval(train: &FeatureBank, test: &FeatureBank, k: usize) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput("KNN needs nonempty train and test banks".into()));
    }
    if k == 0 || k > train.len() {
        return Err(Error::InvalidInput(format!("k must lie in 1..={}, got {k}", train.len())));
    }
    if train.width() != test.width() {
        return Err(Error::shape(train.width(), test.width()));
    }
    let rows: Vec<ArrayView1<f32>> = test.features.outer_iter().collect();
    let hits: usize = rows
        .par_iter()
        .zip(&test.labels)
        .map(|(row, &label)| (knn_predict(train, *row, k) == label) as usize)
        .sum();
    Ok(100.0 * hits as f64 / test.len() as f64)
}

/// Rows × columns of numbers with labels, serializable to CSV and JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    /// Header of the first column.
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
    /// Free-form notes carried into the JSON document.
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(title: &str, row_header: &str, columns: Vec<String>) -> Self {
        Self {
            title: title.to_string(),
            row_header: row_header.to_string(),
            columns,
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(r, _)| r == row).map(|(_, v)| v[c])
    }

    pub fn to_csv(&self) -> String {
        let escape = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = escape(&self.row_header);
        for c in &self.columns {
            out.push(',');
            out.push_str(&escape(c));
        }
        out.push('\n');
        for (name, values) in &self.rows {
            out.push_str(&escape(name));
            for v in values {
                out.push_str(&format!(",{v:.4}"));
            }
            out.push('\n');
        }
        out
    }
}

fn clean_suite(cfg: &EvalConfig) -> DistortionSuite {
    DistortionSuite::new(SuiteKind::Identity, cfg.suite_seed)
}

/// Result of a robustness sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    /// Rows are parts; the first column is the undistorted base accuracy,
    /// followed by one column per suite.
    pub table: Table,
    /// Suite label → audit digest of the distorted test inputs.  Every part
    /// of a suite is evaluated on these same inputs.
    pub audits: BTreeMap<String, String>,
}

pub const BASE_COLUMN: &str = "Base";

/// Trains one probe per part on clean train features and evaluates it on
/// the test split under every suite.  All parts of a suite share one set of
/// distorted test images; the audit digest of each part bank is checked
/// against the suite's.
pub fn robustness_sweep(
    net: &Network,
    checkpoint: &str,
    train: &Dataset,
    test: &Dataset,
    suites: &[SuiteKind],
    parts: &[Part],
    cfg: &EvalConfig,
) -> Result<RobustnessReport> {
    let dir_dim = net.dir_dim();
    let clean_train = extract_features(net, checkpoint, train, &clean_suite(cfg), Part::Full)?;
    let clean_test = extract_features(net, checkpoint, test, &clean_suite(cfg), Part::Full)?;
    let mut columns = vec![BASE_COLUMN.to_string()];
    columns.extend(suites.iter().map(|s| s.label().to_string()));
    let mut table = Table::new("Robustness under inference-time distortions (top-1 %)", "part", columns);
    table
        .notes
        .push("probes are trained once per part on undistorted train features".into());

    let mut distorted = Vec::with_capacity(suites.len());
    let mut audits = BTreeMap::new();
    for &kind in suites {
        let bank = extract_features(net, checkpoint, test, &DistortionSuite::new(kind, cfg.suite_seed), Part::Full)?;
        audits.insert(kind.label().to_string(), bank.provenance.audit.clone());
        distorted.push(bank);
    }
    for &part in parts {
        let probe = LinearProbe::fit(&clean_train.select(part, dir_dim)?, cfg)?;
        let mut row = vec![probe.evaluate(&clean_test.select(part, dir_dim)?)?.top1];
        for bank in &distorted {
            let part_bank = bank.select(part, dir_dim)?;
            if part_bank.provenance.audit != audits[bank.provenance.suite.label()] {
                return Err(Error::InvalidInput(format!(
                    "distortions for part {part} under {} differ from the suite audit",
                    bank.provenance.suite.label()
                )));
            }
            row.push(probe.evaluate(&part_bank)?.top1);
        }
        table.rows.push((part.label().to_string(), row));
    }
    Ok(RobustnessReport { table, audits })
}

/// Fixed views of the brick study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BrickView {
    Orig,
    Flip,
    FlipRot90,
}

impl BrickView {
    pub const ALL: [BrickView; 3] = [BrickView::Orig, BrickView::Flip, BrickView::FlipRot90];

    pub fn label(&self) -> &'static str {
        match self {
            BrickView::Orig => "Orig",
            BrickView::Flip => "Flip",
            BrickView::FlipRot90 => "Flip+90°",
        }
    }

    /// Deterministic transform: identity, horizontal flip, or horizontal
    /// flip followed by a quarter turn.
    pub fn apply(&self, x: &Image) -> Image {
        match self {
            BrickView::Orig => x.clone(),
            BrickView::Flip => horizontal_flip(x),
            BrickView::FlipRot90 => rotate(&horizontal_flip(x), 90.0),
        }
    }

    fn tag(&self) -> u32 {
        *self as u32
    }
}

/// Seeded uniform cyclic permutation (Sattolo's algorithm): `p[i] != i`
/// for every `i` when `n >= 2`.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

pub const DIF_INST_COLUMN: &str = "Dif.Inst";
pub const ZERO_DVR_COLUMN: &str = "Zero DVR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrickReport {
    /// Rows: view of the DIR block.  Columns: view of the same instance's
    /// DVR block, then a different instance's DVR (same view as the row),
    /// then an all-zero DVR.
    pub table: Table,
    /// Probe accuracy on unaltered test representations.
    pub unaltered: f64,
    /// Instance pairing used for the Dif.Inst column, by test position.
    pub pairing: Vec<usize>,
}

/// Evaluates a probe trained on unaltered full representations on
/// recombined DIR/DVR bricks of the test split.
pub fn brick_study(net: &Network, checkpoint: &str, train: &Dataset, test: &Dataset, cfg: &EvalConfig) -> Result<BrickReport> {
    if test.len() < 2 {
        return Err(Error::InvalidInput("the brick study needs at least 2 test items".into()));
    }
    let clean_train = extract_features(net, checkpoint, train, &clean_suite(cfg), Part::Full)?;
    let probe = LinearProbe::fit(&clean_train, cfg)?;
    let unaltered = probe
        .evaluate(&extract_features(net, checkpoint, test, &clean_suite(cfg), Part::Full)?)?
        .top1;

    let mut bank = ReprBank::new(net.dim(), net.config.encoder.dr)?;
    for view in BrickView::ALL {
        let images: Vec<Image> = test.items.par_iter().map(|it| view.apply(&it.image)).collect();
        let feats = encode_all(net, &images)?;
        for (it, row) in test.items.iter().zip(feats.outer_iter()) {
            bank.insert(
                ReprRef {
                    instance: it.instance_id,
                    view: view.tag(),
                },
                row.to_vec(),
            )?;
        }
    }

    let pairing = derangement(test.len(), cfg.seed ^ 0xB41C);
    let mut columns: Vec<String> = BrickView::ALL.iter().map(|v| v.label().to_string()).collect();
    columns.push(DIF_INST_COLUMN.into());
    columns.push(ZERO_DVR_COLUMN.into());
    let mut table = Table::new("Brick study: DIR view (rows) joined with DVR source (columns), top-1 %", "DIR view", columns);
    table
        .notes
        .push("the probe is trained on unaltered full representations of the train split".into());

    let n = test.len();
    for row_view in BrickView::ALL {
        let mut sources: Vec<Box<dyn Fn(usize) -> DvrSource>> = BrickView::ALL
            .iter()
            .map(|&col| {
                Box::new(move |i: usize| {
                    DvrSource::Ref(ReprRef {
                        instance: test.items[i].instance_id,
                        view: col.tag(),
                    })
                }) as Box<dyn Fn(usize) -> DvrSource>
            })
            .collect();
        let pairing = &pairing;
        sources.push(Box::new(move |i: usize| {
            DvrSource::Ref(ReprRef {
                instance: test.items[pairing[i]].instance_id,
                view: row_view.tag(),
            })
        }));
        sources.push(Box::new(|_| DvrSource::Zero));

        let mut values = Vec::with_capacity(sources.len());
        for source in &sources {
            let mut feats = Array2::<f32>::zeros((n, net.dim()));
            for i in 0..n {
                let spec = BrickSpec {
                    dir_source: ReprRef {
                        instance: test.items[i].instance_id,
                        view: row_view.tag(),
                    },
                    dvr_source: source(i),
                };
                let rep = compose_brick(&spec, &bank)?;
                feats.row_mut(i).assign(&ArrayView1::from(rep.values()));
            }
            let bricks = FeatureBank::from_features(feats, test.labels(), test.num_classes())?;
            values.push(probe.evaluate(&bricks)?.top1);
        }
        table.rows.push((row_view.label().to_string(), values));
    }
    Ok(BrickReport {
        table,
        unaltered,
        pairing,
    })
}

/// Per-part probe accuracies on an external labeled dataset, split with
/// `train_fraction` under `seed`.
pub fn transfer_probe(
    net: &Network,
    checkpoint: &str,
    data: &Dataset,
    train_fraction: f64,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<Table> {
    let (train, test) = split_dataset(data, train_fraction, seed)?;
    let train_bank = extract_features(net, checkpoint, &train, &clean_suite(cfg), Part::Full)?;
    let test_bank = extract_features(net, checkpoint, &test, &clean_suite(cfg), Part::Full)?;
    let mut table = Table::new("Transfer linear probe", "part", vec!["top1".into(), "top3".into()]);
    for part in Part::ALL {
        let acc = linear_probe(
            &train_bank.select(part, net.dir_dim())?,
            &test_bank.select(part, net.dir_dim())?,
            cfg,
        )?;
        table.rows.push((part.label().to_string(), vec![acc.top1, acc.top3]));
    }
    Ok(table)
}
