//! Training loops for the model zoo: standard empirical-risk minimization and
//! free adversarial training, which recycles one backward pass per replay to
//! update both the parameters and a persistent input perturbation.
//!
//! Both loops shuffle with a seeded generator, validate on clean images after
//! every epoch, early-stop on validation loss with a patience window, and
//! return the best-validation snapshot. Runs are bit-reproducible for a fixed
//! seed and emit a JSON manifest plus CSV learning curves next to the
//! checkpoint.

mod optim;

pub use optim::{lr_at_step, optimizer_step, TrainState};

use std::error::Error;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::sgn;
use crate::datasets::{DataError, LabeledImageSet};
use crate::gradcore::{forward_scalar_loss, GradError, LossKind, Tensor};
use crate::zoo::{save_checkpoint, Classifier, TrainingTag, ZooError};

/// Errors from configuration, data/model mismatches, and diverging runs.
#[derive(Debug)]
pub enum TrainError {
    /// A configuration or argument is unusable.
    Invalid { detail: String },
    /// The run produced a non-finite loss, gradient, or parameter.
    Diverged { detail: String },
    Data(DataError),
    Grad(GradError),
    Zoo(ZooError),
    Io(std::io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Invalid { detail } => write!(f, "invalid training setup: {detail}"),
            TrainError::Diverged { detail } => write!(f, "training diverged: {detail}"),
            TrainError::Data(e) => write!(f, "dataset error: {e}"),
            TrainError::Grad(e) => write!(f, "gradient error: {e}"),
            TrainError::Zoo(e) => write!(f, "model error: {e}"),
            TrainError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl Error for TrainError {}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

impl From<ZooError> for TrainError {
    fn from(e: ZooError) -> Self {
        TrainError::Zoo(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

/// Non-finite tape failures during a training step mean the run diverged;
/// anything else is a genuine gradient-engine error.
fn grad_failure(err: GradError, context: &str) -> TrainError {
    match err {
        GradError::NonFinite { op, pass } => TrainError::Diverged {
            detail: format!("non-finite value in op `{op}` ({pass} pass) during {context}"),
        },
        other => TrainError::Grad(other),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "sgd-momentum")]
    SgdMomentum,
    #[serde(rename = "adam")]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// `initial_lr · decay_rate^floor(step / decay_steps)`.
    #[serde(rename = "exponential-staircase")]
    ExponentialStaircase,
    /// Linear warmup from `initial_lr` to `warmup_target` over
    /// `warmup_steps`, then cosine decay to zero over `decay_steps`.
    #[serde(rename = "cosine-with-warmup")]
    CosineWithWarmup,
}

/// Free adversarial training block: `replay` gradient reuses per batch, an
/// `epsilon` ball radius and an `step` size, all on the [0,255] pixel scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeAtConfig {
    pub replay: usize,
    pub epsilon: f64,
    pub step: f64,
}

impl FreeAtConfig {
    /// The reference setting: m = 4 replays, ε = 2, step 0.6.
    pub fn reference() -> FreeAtConfig {
        FreeAtConfig { replay: 4, epsilon: 2.0, step: 0.6 }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.replay == 0 {
            return Err(TrainError::Invalid { detail: "free-at replay count must be ≥ 1".into() });
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(TrainError::Invalid {
                detail: format!("free-at epsilon must be finite and ≥ 0, got {}", self.epsilon),
            });
        }
        if !self.step.is_finite() || self.step <= 0.0 {
            return Err(TrainError::Invalid {
                detail: format!("free-at step must be finite and > 0, got {}", self.step),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub global_clipnorm: Option<f64>,
    pub schedule: ScheduleKind,
    pub initial_lr: f64,
    #[serde(default = "default_decay_steps")]
    pub decay_steps: usize,
    #[serde(default = "default_decay_rate")]
    pub decay_rate: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub warmup_target: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Seed for minibatch shuffling; fixed seed gives bit-identical runs.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub free_at: Option<FreeAtConfig>,
}

fn default_decay_steps() -> usize {
    1000
}

fn default_decay_rate() -> f64 {
    0.1
}

fn default_patience() -> usize {
    5
}

impl TrainConfig {
    /// Reference recipe for the convolutional families: SGD with momentum
    /// 0.9, weight decay 1e-4, staircase exponential decay from 0.1 with
    /// rate 0.1 every `decay_steps` optimizer steps.
    pub fn cnn_reference(batch_size: usize, max_epochs: usize, decay_steps: usize) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            weight_decay: 1e-4,
            global_clipnorm: None,
            schedule: ScheduleKind::ExponentialStaircase,
            initial_lr: 0.1,
            decay_steps: decay_steps.max(1),
            decay_rate: 0.1,
            warmup_steps: 0,
            warmup_target: 0.0,
            batch_size,
            max_epochs,
            patience: default_patience(),
            seed: 0,
            free_at: None,
        }
    }

    /// Reference recipe for the transformer family: Adam with decoupled
    /// weight decay 0.1 and global clipnorm 1.0, cosine schedule holding
    /// 0.001 through an 8-epoch warmup, then decaying to zero.
    pub fn vit_reference(
        batch_size: usize,
        max_epochs: usize,
        steps_per_epoch: usize,
    ) -> TrainConfig {
        let steps_per_epoch = steps_per_epoch.max(1);
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            momentum: 0.0,
            weight_decay: 0.1,
            global_clipnorm: Some(1.0),
            schedule: ScheduleKind::CosineWithWarmup,
            initial_lr: 0.001,
            decay_steps: steps_per_epoch * max_epochs.saturating_sub(8).max(1),
            decay_rate: default_decay_rate(),
            warmup_steps: 8 * steps_per_epoch,
            warmup_target: 0.001,
            batch_size,
            max_epochs,
            patience: default_patience(),
            seed: 0,
            free_at: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |detail: String| Err(TrainError::Invalid { detail });
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be ≥ 1".into());
        }
        if !self.initial_lr.is_finite() || self.initial_lr < 0.0 {
            return bad(format!("initial_lr must be finite and ≥ 0, got {}", self.initial_lr));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be finite and ≥ 0, got {}", self.weight_decay));
        }
        if let Some(clip) = self.global_clipnorm {
            if !clip.is_finite() || clip <= 0.0 {
                return bad(format!("global_clipnorm must be finite and > 0, got {clip}"));
            }
        }
        if self.decay_steps == 0 {
            return bad("decay_steps must be ≥ 1".into());
        }
        match self.schedule {
            ScheduleKind::ExponentialStaircase => {
                if !self.decay_rate.is_finite() || self.decay_rate <= 0.0 {
                    return bad(format!(
                        "decay_rate must be finite and > 0, got {}",
                        self.decay_rate
                    ));
                }
            }
            ScheduleKind::CosineWithWarmup => {
                if !self.warmup_target.is_finite() || self.warmup_target < 0.0 {
                    return bad(format!(
                        "warmup_target must be finite and ≥ 0, got {}",
                        self.warmup_target
                    ));
                }
            }
        }
        if let Some(free) = &self.free_at {
            free.validate()?;
        }
        Ok(())
    }
}

/// One row of the learning curve; losses are per-sample means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// A finished training run: the best-validation model plus its history.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Classifier<f32>,
    pub curves: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Total optimizer steps taken (free adversarial training advances this
    /// `replay` times per batch).
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub best_epoch: usize,
    pub stop: bool,
}

/// Early stopping on a validation-loss history: the best epoch is the first
/// strict minimum, and the run stops once `patience` epochs have passed
/// without improvement.
pub fn early_stop(val_losses: &[f64], patience: usize) -> StopDecision {
    let mut best_epoch = 0;
    let mut best = f64::INFINITY;
    for (i, &v) in val_losses.iter().enumerate() {
        if v < best {
            best = v;
            best_epoch = i;
        }
    }
    let stop = match val_losses.len() {
        0 => false,
        n => n - 1 - best_epoch >= patience,
    };
    StopDecision { best_epoch, stop }
}

fn check_compat(
    model: &Classifier<f32>,
    set: &LabeledImageSet,
    role: &str,
) -> Result<(), TrainError> {
    if set.dims() != model.config.input {
        return Err(TrainError::Invalid {
            detail: format!(
                "{role} set images are {:?} but the model expects {:?}",
                set.dims(),
                model.config.input
            ),
        });
    }
    if set.class_count() > model.config.num_classes {
        return Err(TrainError::Invalid {
            detail: format!(
                "{role} set has {} classes but the model outputs {}",
                set.class_count(),
                model.config.num_classes
            ),
        });
    }
    Ok(())
}

/// Mean clean loss and top-1 accuracy over a set, one trace per chunk and no
/// backward passes.
fn evaluate(
    model: &Classifier<f32>,
    set: &LabeledImageSet,
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    let n = set.len();
    let classes = model.config.num_classes;
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = set.gather(&idx)?;
        let graph = forward_scalar_loss(model, &images, &labels, LossKind::SoftmaxXent, false)
            .map_err(|e| grad_failure(e, "validation"))?;
        loss_sum += f64::from(graph.loss()) * labels.len() as f64;
        let logits = graph.logits();
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits[r * classes..(r + 1) * classes];
            let mut arg = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = j;
                }
            }
            if arg == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Free-AT replays for one batch: each replay does one forward, one backward
/// that yields both the parameter gradients and the pixel gradient, one
/// optimizer step, and one ascent step on the persistent perturbation, which
/// stays inside the ε-ball intersected with [0,255]. Returns the summed
/// per-replay mean losses.
fn free_replays(
    model: &mut Classifier<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    delta: &mut [f32],
    free: &FreeAtConfig,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<f64, TrainError> {
    let base = images.data();
    debug_assert_eq!(base.len(), delta.len());
    let eps = free.epsilon as f32;
    let alpha = free.step as f32;

    // The warm-started perturbation came from different images, so re-project
    // x + δ into this batch's ball before the first forward pass.
    let mut adv: Vec<f32> = Vec::with_capacity(base.len());
    for (&x, d) in base.iter().zip(delta.iter_mut()) {
        let lo = (x - eps).max(0.0);
        let hi = (x + eps).min(255.0);
        let v = (x + *d).clamp(lo, hi);
        *d = v - x;
        adv.push(v);
    }

    let mut loss_sum = 0.0f64;
    for _ in 0..free.replay {
        let x_adv = Tensor::new(images.shape().to_vec(), adv.clone())
            .map_err(|e| grad_failure(e, "free-at replay"))?;
        let graph = forward_scalar_loss(model, &x_adv, labels, LossKind::SoftmaxXent, true)
            .map_err(|e| grad_failure(e, "free-at replay"))?;
        let loss = f64::from(graph.loss());
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                detail: format!("non-finite training loss {loss} in a free-at replay"),
            });
        }
        loss_sum += loss;
        let back = graph.backward_all().map_err(|e| grad_failure(e, "free-at replay"))?;
        let g_x = back.input_grad.ok_or_else(|| TrainError::Invalid {
            detail: "free-at replay produced no input gradient".into(),
        })?;
        optimizer_step(model.params_mut(), back.param_grads, config, state)?;
        for ((&x, d), (v, &g)) in base
            .iter()
            .zip(delta.iter_mut())
            .zip(adv.iter_mut().zip(g_x.data()))
        {
            let lo = (x - eps).max(0.0);
            let hi = (x + eps).min(255.0);
            let stepped = x + *d + alpha * sgn(g);
            let projected = stepped.clamp(lo, hi);
            *d = projected - x;
            *v = projected;
        }
    }
    Ok(loss_sum)
}

fn fit(
    mut model: Classifier<f32>,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    config: &TrainConfig,
    free: Option<FreeAtConfig>,
    tag: TrainingTag,
) -> Result<TrainRun, TrainError> {
    config.validate()?;
    check_compat(&model, train, "train")?;
    check_compat(&model, val, "validation")?;

    let replays = free.map_or(1, |f| f.replay);
    let [h, w, c] = train.dims();
    let px = h * w * c;

    let mut state = TrainState::new(model.params(), config);
    state.delta = vec![0.0; config.batch_size.min(train.len()) * px];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curves: Vec<EpochRecord> = Vec::new();
    let mut val_losses: Vec<f64> = Vec::new();
    let mut best_epoch = 0;
    let mut stopped_early = false;
    let mut best_params: Option<Vec<(String, Tensor<f32>)>> = None;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch_idx in order.chunks(config.batch_size) {
            let (images, labels) = train.gather(batch_idx)?;
            match &free {
                None => {
                    let graph =
                        forward_scalar_loss(&model, &images, &labels, LossKind::SoftmaxXent, false)
                            .map_err(|e| grad_failure(e, "a training step"))?;
                    let loss = f64::from(graph.loss());
                    if !loss.is_finite() {
                        return Err(TrainError::Diverged {
                            detail: format!("non-finite training loss {loss} at step {}", state.step),
                        });
                    }
                    loss_sum += loss * labels.len() as f64;
                    let back =
                        graph.backward_all().map_err(|e| grad_failure(e, "a training step"))?;
                    optimizer_step(model.params_mut(), back.param_grads, config, &mut state)?;
                }
                Some(f) => {
                    let bs = labels.len();
                    // The replay loop needs the optimizer slots in `state`
                    // mutably alongside the delta buffer, so lend the buffer
                    // out for the duration of the batch.
                    let mut delta = std::mem::take(&mut state.delta);
                    let sum = free_replays(
                        &mut model,
                        &images,
                        &labels,
                        &mut delta[..bs * px],
                        f,
                        config,
                        &mut state,
                    );
                    state.delta = delta;
                    loss_sum += sum? * bs as f64;
                }
            }
        }
        state.epoch = epoch + 1;
        let train_loss = loss_sum / (train.len() * replays) as f64;
        let (val_loss, val_acc) = evaluate(&model, val, config.batch_size)?;
        curves.push(EpochRecord { epoch, train_loss, val_loss, val_acc });
        val_losses.push(val_loss);

        let decision = early_stop(&val_losses, config.patience);
        if decision.best_epoch == epoch {
            best_params = Some(model.params().to_vec());
        }
        best_epoch = decision.best_epoch;
        if decision.stop {
            stopped_early = true;
            break;
        }
    }

    if let Some(best) = best_params {
        for (slot, saved) in model.params_mut().iter_mut().zip(best) {
            slot.1 = saved.1;
        }
    }
    model.tag = Some(tag);
    Ok(TrainRun { model, curves, best_epoch, stopped_early, steps: state.step })
}

/// Standard training: tags the result `ST` and rejects configs that carry a
/// free-at block.
pub fn train_standard(
    model: Classifier<f32>,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    config: &TrainConfig,
) -> Result<TrainRun, TrainError> {
    if config.free_at.is_some() {
        return Err(TrainError::Invalid {
            detail: "config has a free-at block; use train_free_at".into(),
        });
    }
    fit(model, train, val, config, None, TrainingTag::St)
}

/// Free adversarial training: tags the result `AT`. Requires a free-at block;
/// the step counter advances `replay` times per batch and the perturbation
/// buffer persists across batches and epochs.
pub fn train_free_at(
    model: Classifier<f32>,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    config: &TrainConfig,
) -> Result<TrainRun, TrainError> {
    let free = config.free_at.ok_or_else(|| TrainError::Invalid {
        detail: "train_free_at needs a free-at block in the config".into(),
    })?;
    fit(model, train, val, config, Some(free), TrainingTag::At)
}

/// Everything a run manifest records; round-trips through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub final_tag: Option<TrainingTag>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub steps: usize,
    pub curves: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub curves: PathBuf,
}

/// Writes `<name>.advz` (checkpoint), `<name>.json` (manifest), and
/// `<name>_curves.csv` into `dir`. Output bytes depend only on the run.
pub fn save_run(
    run: &TrainRun,
    config: &TrainConfig,
    dir: impl AsRef<Path>,
    name: &str,
) -> Result<RunPaths, TrainError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let paths = RunPaths {
        checkpoint: dir.join(format!("{name}.advz")),
        manifest: dir.join(format!("{name}.json")),
        curves: dir.join(format!("{name}_curves.csv")),
    };
    save_checkpoint(&run.model, &paths.checkpoint)?;

    let manifest = RunManifest {
        config: config.clone(),
        seed: config.seed,
        final_tag: run.model.tag,
        best_epoch: run.best_epoch,
        stopped_early: run.stopped_early,
        steps: run.steps,
        curves: run.curves.clone(),
    };
    let mut body = serde_json::to_vec_pretty(&manifest).map_err(|e| TrainError::Invalid {
        detail: format!("manifest serialization failed: {e}"),
    })?;
    body.push(b'\n');
    fs::write(&paths.manifest, body)?;

    let mut csv = fs::File::create(&paths.curves)?;
    writeln!(csv, "epoch,train_loss,val_loss,val_acc")?;
    for row in &run.curves {
        writeln!(csv, "{},{},{},{}", row.epoch, row.train_loss, row.val_loss, row.val_acc)?;
    }
    Ok(paths)
}
