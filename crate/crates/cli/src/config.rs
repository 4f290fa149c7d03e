//! Run configuration: one strict JSON document drives every subcommand, and
//! a single top-level seed is split into per-stage streams so stages can be
//! re-run independently without perturbing each other.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use advlab_core::attacks::{AttackSpec, AttributionScalar, BaselineSpec, PgdLoss, UpdateSign};
use advlab_core::train::TrainConfig;
use advlab_core::zoo::ModelConfig;

/// Stage counters for seed splitting. These numbers are part of the artifact
/// contract: changing them changes every derived stream.
pub const STAGE_DATASET: u64 = 0;
pub const STAGE_VAL_DATASET: u64 = 1;
pub const STAGE_MODEL_INIT: u64 = 2;
pub const STAGE_TRAIN: u64 = 3;
pub const STAGE_SAMPLE: u64 = 4;
pub const STAGE_ATTACK: u64 = 5;

/// The `stage`-th output of the SplitMix64 sequence seeded with the run
/// seed (Steele, Lea & Flood 2014 constants): independent 64-bit streams per
/// stage, cheap to recompute from the manifest alone.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed.wrapping_add(stage.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Where a labeled image set comes from. Synthetic sets draw from the
/// dataset-stage seed; file-backed kinds ignore it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetBlock {
    SynthBlobs(SynthBlobsBlock),
    Idx(IdxBlock),
    CifarBinary(CifarBinaryBlock),
    ImageSet(ImageSetBlock),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthBlobsBlock {
    pub classes: usize,
    pub per_class: usize,
    /// [height, width, channels].
    pub resolution: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxBlock {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarBinaryBlock {
    pub batches: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSetBlock {
    pub path: PathBuf,
}

/// Which generator `attack` runs. MIG with several budgets dispatches to the
/// shared-gradient multi-epsilon variant automatically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Pgd,
    Mig,
}

impl Default for AttackMethod {
    fn default() -> Self {
        AttackMethod::Mig
    }
}

/// Attack parameters. An empty block means MIG with the benchmark defaults
/// ε=16, T=20, μ=1, s=20, black baseline. `update_sign` left unset picks the
/// direction that actually attacks: loss ascent for PGD, descent against the
/// true-class attribution for MIG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackBlock {
    #[serde(default)]
    pub method: AttackMethod,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    #[serde(default)]
    pub baseline: BaselineSpec,
    #[serde(default)]
    pub update_sign: Option<UpdateSign>,
    #[serde(default)]
    pub loss: PgdLoss,
    #[serde(default)]
    pub scalar: AttributionScalar,
}

fn default_epsilons() -> Vec<f64> {
    vec![16.0]
}

fn default_steps() -> usize {
    20
}

fn default_momentum() -> f64 {
    1.0
}

fn default_ig_steps() -> usize {
    20
}

impl Default for AttackBlock {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field of the attack block has a default")
    }
}

impl AttackBlock {
    fn to_spec(&self, sign: UpdateSign) -> AttackSpec {
        AttackSpec {
            epsilons: self.epsilons.clone(),
            steps: self.steps,
            step_size: self.step_size,
            momentum: self.momentum,
            ig_steps: self.ig_steps,
            baseline: self.baseline,
            update_sign: self.update_sign.unwrap_or(sign),
            loss: self.loss,
            scalar: self.scalar,
        }
    }

    /// The spec for the configured `method`.
    pub fn spec(&self) -> AttackSpec {
        match self.method {
            AttackMethod::Pgd => self.to_spec(UpdateSign::Ascend),
            AttackMethod::Mig => self.to_spec(UpdateSign::Descend),
        }
    }

    /// PGD template for robustness sweeps, independent of `method`.
    pub fn pgd_template(&self) -> AttackSpec {
        self.to_spec(UpdateSign::Ascend)
    }

    /// MIG template for robustness sweeps, independent of `method`.
    pub fn mig_template(&self) -> AttackSpec {
        self.to_spec(UpdateSign::Descend)
    }
}

/// One checkpointed model in a benchmark role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub id: String,
    pub checkpoint: PathBuf,
}

/// Inputs for `bench build` (surrogates, k_per_class) and `bench run`
/// (benchmark_dir, targets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchBlock {
    #[serde(default = "default_k_per_class")]
    pub k_per_class: usize,
    #[serde(default)]
    pub surrogates: Vec<ModelRef>,
    #[serde(default)]
    pub benchmark_dir: Option<PathBuf>,
    #[serde(default)]
    pub targets: Vec<ModelRef>,
}

fn default_k_per_class() -> usize {
    20
}

/// Inputs for `report`: the saved matrix evaluation, optional robustness
/// reports to bundle, and optional attribution-map rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportBlock {
    /// `evaluation.json` as written by `bench run`.
    pub evaluation: PathBuf,
    /// `robustness_<id>.json` files as written by `eval`.
    #[serde(default)]
    pub robustness: Vec<PathBuf>,
    #[serde(default)]
    pub attribution: Option<AttributionBlock>,
}

/// Integrated-gradients maps for the first `count` images of the dataset,
/// rendered through the given checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionBlock {
    pub checkpoint: PathBuf,
    #[serde(default = "default_attribution_count")]
    pub count: usize,
}

fn default_attribution_count() -> usize {
    8
}

/// One fully-specified run. `(config, seed)` determines every artifact byte
/// under the single-threaded schedule; the effective config is echoed into
/// the output directory as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads for per-image attack work; 1 is the bit-exact
    /// reference schedule.
    #[serde(default = "default_threads")]
    pub threads: usize,
    /// Base name for artifacts this run writes (checkpoints, adversarial
    /// sets, attribution maps) and the model id in sweep reports.
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub dataset: Option<DatasetBlock>,
    /// Held-out set for `train`; when absent, every `holdout_every`-th image
    /// of `dataset` validates and the rest train.
    #[serde(default)]
    pub val_dataset: Option<DatasetBlock>,
    #[serde(default = "default_holdout_every")]
    pub holdout_every: usize,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Model under evaluation/attack, or the surrogate for attribution maps.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub attack: Option<AttackBlock>,
    /// ε grid for `eval`; defaults to [1,2,3,4,5].
    #[serde(default)]
    pub sweep: Option<Vec<f64>>,
    #[serde(default)]
    pub bench: Option<BenchBlock>,
    #[serde(default)]
    pub report: Option<ReportBlock>,
}

fn default_out() -> PathBuf {
    PathBuf::from("advlab-out")
}

fn default_threads() -> usize {
    1
}

fn default_name() -> String {
    "run".to_string()
}

fn default_holdout_every() -> usize {
    5
}

/// Strict parse: invalid JSON, unknown keys, and type mismatches all fail
/// with the offending key path. A `seed` inside the train block is rejected
/// up front — the shuffle seed is derived from the top-level seed and a
/// shadowed value would silently lose.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("config {} is not valid JSON", path.display()))?;
    if raw.pointer("/train/seed").is_some() {
        bail!(
            "config {}: train.seed is not accepted; set the top-level `seed` — the shuffle \
             seed is derived from it (stage {STAGE_TRAIN})",
            path.display()
        );
    }
    let mut de = serde_json::Deserializer::from_str(&text);
    let config: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        anyhow::anyhow!("config {}: {} (at `{}`)", path.display(), e.inner(), e.path())
    })?;
    Ok(config)
}

/// Echoes the effective config into `dir/config.json` so the directory alone
/// suffices to re-run the experiment.
pub fn echo_config(config: &RunConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.json");
    let mut body = serde_json::to_vec_pretty(config).context("serializing the effective config")?;
    body.push(b'\n');
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
