//! Pretraining loop: view generation, loss dispatch, backpropagation and
//! SGD with momentum under a warm-up plus cosine learning-rate schedule.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{make_view_pairs, AugStrategy, Image, RngStream};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, BranchPair, LossHyperparams, LossReport};
use crate::model::layers::{sgd_update, Parameterized, TensorKind};
use crate::model::{
    stop_gradient, BranchGrads, Checkpoint, Mode, ModelConfig, Network, StoredTensor, TensorRole,
    TwoBranchOutput,
};

/// Batch size the base learning rate refers to; the peak rate is
/// `base_lr · batch_size / LR_REFERENCE_BATCH`.
pub const LR_REFERENCE_BATCH: f64 = 512.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup: bool,
    pub warmup_epochs: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub strategy: AugStrategy,
    pub loss: LossHyperparams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Asymmetric,
            epochs: 50,
            batch_size: 64,
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup: true,
            warmup_epochs: 5,
            checkpoint_every: 10,
            strategy: AugStrategy::caug(32),
            loss: LossHyperparams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / LR_REFERENCE_BATCH
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    pub fn schedule(&self, n: usize) -> LrSchedule {
        let spe = self.steps_per_epoch(n) as u64;
        let total = self.epochs as u64 * spe;
        let warmup = if self.warmup { self.warmup_epochs as u64 * spe } else { 0 };
        LrSchedule {
            peak: self.peak_lr(),
            warmup_steps: warmup.min(total),
            total_steps: total,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.batch_size < 2 {
            problems.push(format!("training.batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            problems.push(format!("training.base_lr must be a nonnegative real, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("training.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            problems.push(format!("training.weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        problems.extend(self.strategy.validate());
        problems.extend(self.loss.validate());
        problems
    }
}

/// Linear warm-up from 0 to `peak`, then half a cosine down to 0 at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        self.at_time(step as f64)
    }

    /// The schedule at a fractional step, for checking continuity.
    pub fn at_time(&self, t: f64) -> f64 {
        let warmup = self.warmup_steps as f64;
        if t < warmup {
            return self.peak * t / warmup;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps) as f64;
        let progress = if span == 0.0 { 1.0 } else { ((t - warmup) / span).min(1.0) };
        self.peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Learning rate at `step` for a dataset of `n` items.
pub fn lr_at(step: u64, config: &TrainConfig, n: usize) -> f64 {
    config.schedule(n).at(step)
}

/// One line of the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub dir: f64,
    pub ddl: f64,
    pub mean_abs_cos_dvr: f64,
}

impl StepRecord {
    pub fn new(step: u64, lr: f64, r: &LossReport) -> Self {
        Self {
            step,
            lr,
            total: r.total,
            dir: r.dir_component,
            ddl: r.ddl_component,
            mean_abs_cos_dvr: r.mean_abs_cos_dvr,
        }
    }
}

/// Per-epoch means.  Wall time lives here and not in the step log, which
/// stays byte-identical across replays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub dir: f64,
    pub ddl: f64,
    pub mean_abs_cos_dvr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn to_ndjson<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn from_ndjson<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

impl TrainLog {
    pub const STEPS_FILE: &'static str = "trainlog.ndjson";
    pub const EPOCHS_FILE: &'static str = "epochs.ndjson";

    pub fn steps_ndjson(&self) -> Result<String> {
        to_ndjson(&self.steps)
    }

    pub fn epochs_ndjson(&self) -> Result<String> {
        to_ndjson(&self.epochs)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, text) in [
            (Self::STEPS_FILE, self.steps_ndjson()?),
            (Self::EPOCHS_FILE, self.epochs_ndjson()?),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads both files; a missing epochs file yields no epoch records.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::STEPS_FILE);
        let steps = from_ndjson(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        let epochs = match fs::read_to_string(dir.join(Self::EPOCHS_FILE)) {
            Ok(text) => from_ndjson(&text)?,
            Err(_) => Vec::new(),
        };
        Ok(Self { steps, epochs })
    }
}

/// Network plus optimizer state.
#[derive(Clone)]
pub struct TrainState {
    pub net: Network,
    /// Momentum buffers, one per parameter tensor in named order.
    pub momentum: Vec<Vec<f32>>,
    pub step: u64,
}

const MOMENTUM_PREFIX: &str = "momentum.";

impl TrainState {
    pub fn new(net: Network) -> Self {
        let mut net = net;
        let momentum = net
            .named_tensors()
            .into_iter()
            .filter(|t| t.kind == TensorKind::Param)
            .map(|t| vec![0.0; t.tensor.value.len()])
            .collect();
        Self { net, momentum, step: 0 }
    }

    pub fn checkpoint(&mut self, config: &TrainConfig) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_network(&self.net, serde_json::to_value(config)?, self.step, config.seed);
        let params: Vec<_> = self
            .net
            .named_tensors()
            .into_iter()
            .filter(|t| t.kind == TensorKind::Param)
            .map(|t| (t.name, t.tensor.shape.clone()))
            .collect();
        for ((name, shape), buf) in params.into_iter().zip(&self.momentum) {
            ckpt.tensors.push(StoredTensor {
                name: format!("{MOMENTUM_PREFIX}{name}"),
                role: TensorRole::Optimizer,
                shape,
                data: buf.clone(),
            });
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut state = Self::new(ckpt.network()?);
        state.step = ckpt.meta.step;
        let names: Vec<String> = state
            .net
            .named_tensors()
            .into_iter()
            .filter(|t| t.kind == TensorKind::Param)
            .map(|t| t.name)
            .collect();
        let stored: Vec<&StoredTensor> = ckpt.optimizer_tensors().collect();
        if stored.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} momentum buffers, found {}",
                names.len(),
                stored.len()
            )));
        }
        for ((name, buf), t) in names.iter().zip(&mut state.momentum).zip(stored) {
            if t.name.strip_prefix(MOMENTUM_PREFIX) != Some(name.as_str()) || t.data.len() != buf.len() {
                return Err(Error::Checkpoint(format!("momentum buffer {} does not match {name}", t.name)));
            }
            buf.copy_from_slice(&t.data);
        }
        Ok(state)
    }
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

fn summarize(name: &str, a: ArrayView2<f32>, out: &mut String) {
    let bad = a.iter().filter(|v| !v.is_finite()).count();
    let finite = a.iter().filter(|v| v.is_finite());
    let (lo, hi) = finite.clone().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mean_abs = finite.map(|v| v.abs() as f64).sum::<f64>() / a.len().max(1) as f64;
    let _ = write!(out, "{name}: shape {:?}, non-finite {bad}, min {lo:e}, max {hi:e}, mean |x| {mean_abs:e}; ", a.dim());
}

fn diagnostics(out: &TwoBranchOutput, report: Option<&LossReport>, cause: &str) -> String {
    let mut s = String::new();
    for (tag, b) in [("first", &out.first), ("second", &out.second)] {
        summarize(&format!("{tag}.y"), b.y.view(), &mut s);
        summarize(&format!("{tag}.z_i"), b.z_i.view(), &mut s);
        summarize(&format!("{tag}.z_v"), b.z_v.view(), &mut s);
        if let (Some(p_i), Some(p_v)) = (&b.p_i, &b.p_v) {
            summarize(&format!("{tag}.p_i"), p_i.view(), &mut s);
            summarize(&format!("{tag}.p_v"), p_v.view(), &mut s);
        }
    }
    if let Some(r) = report {
        let _ = write!(s, "loss total {} dir {} ddl {}; ", r.total, r.dir_component, r.ddl_component);
    }
    s.push_str(cause);
    s
}

fn all_finite(out: &TwoBranchOutput) -> bool {
    [&out.first, &out.second].iter().all(|b| {
        b.y.iter().all(|v| v.is_finite())
            && b.z_i.iter().chain(b.z_v.iter()).all(|v| v.is_finite())
            && b.p_i.iter().chain(b.p_v.iter()).flatten().all(|v| v.is_finite())
    })
}

/// Loss and per-branch gradients for one forward pass.
fn loss_and_grads(out: &TwoBranchOutput, mode: Mode, h: &LossHyperparams) -> Result<(LossReport, [BranchGrads; 2])> {
    let (a, b) = (&out.first, &out.second);
    let (z1_i, z1_v, z2_i, z2_v) = (to_f64(&a.z_i), to_f64(&a.z_v), to_f64(&b.z_i), to_f64(&b.z_v));
    match mode {
        Mode::Symmetric => {
            let (report, g) = losses::total_loss_symmetric_grad(
                BranchPair::new(z1_i.view(), z2_i.view()),
                BranchPair::new(z1_v.view(), z2_v.view()),
                h,
            )?;
            let grads = [
                BranchGrads {
                    z_i: g.dir.first,
                    z_v: g.dvr.first,
                    p_i: None,
                    p_v: None,
                },
                BranchGrads {
                    z_i: g.dir.second,
                    z_v: g.dvr.second,
                    p_i: None,
                    p_v: None,
                },
            ];
            Ok((report, grads))
        }
        Mode::Asymmetric => {
            let pred = |p: &Option<Array2<f32>>| p.as_ref().map(to_f64).expect("asymmetric network has predictors");
            let (p1_i, p1_v, p2_i, p2_v) = (pred(&a.p_i), pred(&a.p_v), pred(&b.p_i), pred(&b.p_v));
            let (t1_i, t1_v) = (stop_gradient(z1_i.view()), stop_gradient(z1_v.view()));
            let (t2_i, t2_v) = (stop_gradient(z2_i.view()), stop_gradient(z2_v.view()));
            let (report, g) = losses::total_loss_asymmetric_grad(
                BranchPair::new(p1_i.view(), p2_i.view()),
                BranchPair::new(t1_i.value(), t2_i.value()),
                BranchPair::new(p1_v.view(), p2_v.view()),
                BranchPair::new(t1_v.value(), t2_v.value()),
                h,
            )?;
            let grads = [
                BranchGrads {
                    z_i: t1_i.backward(&g.dir.target.first),
                    z_v: t1_v.backward(&g.dvr.target.first),
                    p_i: Some(g.dir.prediction.first),
                    p_v: Some(g.dvr.prediction.first),
                },
                BranchGrads {
                    z_i: t2_i.backward(&g.dir.target.second),
                    z_v: t2_v.backward(&g.dvr.target.second),
                    p_i: Some(g.dir.prediction.second),
                    p_v: Some(g.dvr.prediction.second),
                },
            ];
            Ok((report, grads))
        }
    }
}

/// Draws view pairs for `batch`, runs both branches in training mode,
/// back-propagates the objective of `config.mode` and applies one SGD step
/// at `lr`.  `streams[i]` seeds the views of `batch[i]`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Image],
    streams: &[RngStream],
    config: &TrainConfig,
    lr: f64,
) -> Result<LossReport> {
    let pairs = make_view_pairs(batch, &config.strategy, streams);
    let v1: Vec<&Image> = pairs.iter().map(|p| &p.first).collect();
    let v2: Vec<&Image> = pairs.iter().map(|p| &p.second).collect();
    let (out, [c1, c2]) = state.net.forward_pair_train(&v1, &v2)?;

    let non_finite = |report: Option<&LossReport>, cause: &str| Error::NonFiniteLoss {
        step: state.step,
        lr,
        diagnostics: diagnostics(&out, report, cause),
    };
    if !all_finite(&out) {
        return Err(non_finite(None, "network outputs are not finite"));
    }
    let (report, [g1, g2]) = loss_and_grads(&out, config.mode, &config.loss)?;
    if !report.total.is_finite() {
        return Err(non_finite(Some(&report), "loss is not finite"));
    }

    state.net.zero_grad();
    state.net.backward_branch(c1, &g1);
    state.net.backward_branch(c2, &g2);
    let params = state.net.named_tensors().into_iter().filter(|t| t.kind == TensorKind::Param);
    for (t, buf) in params.zip(&mut state.momentum) {
        let p = &mut *t.tensor;
        sgd_update(
            &mut p.value,
            &p.grad,
            buf,
            lr as f32,
            config.momentum as f32,
            config.weight_decay as f32,
        );
    }
    state.step += 1;
    Ok(report)
}

/// Problems that would make `pretrain` fail, all collected up front.
pub fn validate_setup(model: &ModelConfig, config: &TrainConfig, data: &Dataset) -> Vec<String> {
    let mut problems = model.validate();
    problems.extend(config.validate());
    if model.mode != config.mode {
        problems.push(format!(
            "model mode {:?} does not match training mode {:?}",
            model.mode, config.mode
        ));
    }
    if config.strategy.output_size != model.encoder.input_size {
        problems.push(format!(
            "augmentation.output_size {} differs from encoder.input_size {}",
            config.strategy.output_size, model.encoder.input_size
        ));
    }
    let n = data.len();
    if n < 2 {
        problems.push(format!("training needs at least 2 images, the dataset has {n}"));
    } else if config.batch_size >= 2 && n % config.batch_size == 1 {
        problems.push(format!(
            "{n} images with batch_size {} leave a final batch of one, which cannot be batch-normalized",
            config.batch_size
        ));
    }
    if let Some(it) = data.items.iter().find(|it| it.image.channels() != model.encoder.in_channels) {
        problems.push(format!(
            "image {} has {} channels but encoder.in_channels is {}",
            it.instance_id,
            it.image.channels(),
            model.encoder.in_channels
        ));
    }
    problems
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Checkpoints and logs are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint; `log` holds the records written so
    /// far, and those at or beyond the checkpoint step are discarded.
    pub resume: Option<(Checkpoint, TrainLog)>,
}

pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub state: TrainState,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

/// Runs `epochs · ⌈N / B⌉` steps over `data`.  Everything is validated
/// before the first step.
pub fn pretrain(model: &ModelConfig, config: &TrainConfig, data: &Dataset, options: PretrainOptions) -> Result<PretrainRun> {
    let problems = validate_setup(model, config, data);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let spe = config.steps_per_epoch(data.len());
    let schedule = config.schedule(data.len());
    let (mut state, mut log) = match options.resume {
        Some((ckpt, mut log)) => {
            if &ckpt.meta.model != model || ckpt.meta.training != serde_json::to_value(config)? {
                return Err(Error::Checkpoint("resume checkpoint was written under a different configuration".into()));
            }
            if ckpt.meta.step % spe as u64 != 0 || ckpt.meta.step > schedule.total_steps {
                return Err(Error::Checkpoint(format!(
                    "checkpoint step {} is not an epoch boundary of this run ({spe} steps per epoch)",
                    ckpt.meta.step
                )));
            }
            log.steps.retain(|r| r.step < ckpt.meta.step);
            let done = (ckpt.meta.step / spe as u64) as usize;
            log.epochs.retain(|r| r.epoch < done);
            (TrainState::from_checkpoint(&ckpt)?, log)
        }
        None => (TrainState::new(Network::new(model, config.seed)?), TrainLog::default()),
    };
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let first_epoch = (state.step / spe as u64) as usize;
    for epoch in first_epoch..config.epochs {
        let started = Instant::now();
        let order = epoch_order(config.seed, epoch, data.len());
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Image> = chunk.iter().map(|&i| &data.items[i].image).collect();
            let streams: Vec<RngStream> = chunk
                .iter()
                .map(|&i| RngStream::new(config.seed, data.items[i].instance_id, 0, epoch as u32))
                .collect();
            let lr = schedule.at(state.step);
            let step = state.step;
            let report = train_step(&mut state, &batch, &streams, config, lr)?;
            let rec = StepRecord::new(step, lr, &report);
            for (s, v) in sums.iter_mut().zip([rec.total, rec.dir, rec.ddl, rec.mean_abs_cos_dvr]) {
                *s += v;
            }
            log.steps.push(rec);
        }
        let k = spe as f64;
        let rec = EpochRecord {
            epoch,
            steps: spe,
            total: sums[0] / k,
            dir: sums[1] / k,
            ddl: sums[2] / k,
            mean_abs_cos_dvr: sums[3] / k,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (dir {:.5}, ddl {:.5}), mean |cos| dvr {:.4}, {:.1}s",
            rec.total,
            rec.dir,
            rec.ddl,
            rec.mean_abs_cos_dvr,
            rec.wall_time_s
        );
        log.epochs.push(rec);
        if let Some(dir) = &options.out_dir {
            let last = epoch + 1 == config.epochs;
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 && !last {
                state.checkpoint(config)?.save(&dir.join(epoch_checkpoint_name(epoch + 1)))?;
                log.save(dir)?;
            }
        }
    }

    let checkpoint = state.checkpoint(config)?;
    if let Some(dir) = &options.out_dir {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
        log.save(dir)?;
    }
    Ok(PretrainRun { checkpoint, log, state })
}

/// Mean |cos| between the variant blocks of two views, in evaluation mode,
/// over fixed view draws of every item in `data`.  Symmetric networks
/// compare `z_V` with `z'_V`; asymmetric ones average `cos(p_V, z'_V)` and
/// `cos(p'_V, z_V)`, the pairs the disentangled loss acts on.
pub fn heldout_dvr_cosine(net: &Network, data: &Dataset, strategy: &AugStrategy, seed: u64) -> Result<f64> {
    const CHUNK: usize = 128;
    let mut sum = 0.0;
    for chunk in data.items.chunks(CHUNK) {
        let images: Vec<&Image> = chunk.iter().map(|it| &it.image).collect();
        let streams: Vec<RngStream> = chunk.iter().map(|it| RngStream::new(seed, it.instance_id, 0, 0)).collect();
        let pairs = make_view_pairs(&images, strategy, &streams);
        let v1: Vec<&Image> = pairs.iter().map(|p| &p.first).collect();
        let v2: Vec<&Image> = pairs.iter().map(|p| &p.second).collect();
        let out = net.forward_pair(&v1, &v2)?;
        let (a, b) = (&out.first, &out.second);
        let abs_sum = |x: &Array2<f32>, y: &Array2<f32>| -> Result<f64> {
            Ok(losses::row_cosines(to_f64(x).view(), to_f64(y).view())?.iter().map(|c| c.abs()).sum())
        };
        sum += match (&a.p_v, &b.p_v) {
            (Some(p1), Some(p2)) => 0.5 * abs_sum(p1, &b.z_v)? + 0.5 * abs_sum(p2, &a.z_v)?,
            _ => abs_sum(&a.z_v, &b.z_v)?,
        };
    }
    Ok(sum / data.len().max(1) as f64)
}
