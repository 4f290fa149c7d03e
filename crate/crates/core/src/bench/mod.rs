//! Robustness sweeps, the transferability benchmark, and training-type
//! aggregation.
//!
//! The benchmark is built entirely on surrogate models — targets are never
//! forwarded while adversarial examples are generated (the zero-query
//! contract), which tests assert via the models' forward-pass counters.
//! Adversarial images are kept in float form; re-quantizing to integers would
//! silently shrink the effective budget.

mod report;

pub use report::{
    attribution_pgm, export_attribution_maps, export_reports, heat_color, robustness_csv,
    ReportManifest,
};

use std::error::Error;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{
    load_adversarial_set, mig, mig_multi_epsilon, pgd, save_adversarial_set, AdversarialSet,
    AttackError, AttackSpec, EpsilonSlice, UpdateSign,
};
use crate::datasets::{
    load_image_set, save_image_set, BenchmarkSample, DataError, LabeledImageSet,
};
use crate::gradcore::Tensor;
use crate::zoo::{Classifier, Family, TrainingTag, ZooError};

/// Reference aggregate accuracies in percent from the large-scale study this
/// laboratory miniaturizes: rows are surrogate tags `[AT, ST]`, columns are
/// target tags `[AT, ST]`. Desk-scale runs reproduce the ordering, not the
/// values.
pub const TRANSFER_REFERENCE_PERCENT: [[f64; 2]; 2] = [[13.16, 26.58], [48.09, 32.88]];

/// The default evaluation grid, in pixel units.
pub fn default_sweep() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0, 5.0]
}

/// The default benchmark generator: unmodified single-budget MIG at the high
/// budget ε=16. "Unmodified" MIG descends the true-class attribution, so the
/// update sign is flipped from the ascend default; the persisted manifest
/// records the convention.
pub fn default_benchmark_spec() -> AttackSpec {
    let mut spec = AttackSpec::mig(16.0, 20);
    spec.update_sign = UpdateSign::Descend;
    spec
}

#[derive(Debug)]
pub enum BenchError {
    Invalid { detail: String },
    Data(DataError),
    Attack(AttackError),
    Zoo(ZooError),
    Io(std::io::Error),
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchError::Invalid { detail } => write!(f, "invalid benchmark request: {detail}"),
            BenchError::Data(e) => write!(f, "dataset error: {e}"),
            BenchError::Attack(e) => write!(f, "attack error: {e}"),
            BenchError::Zoo(e) => write!(f, "model error: {e}"),
            BenchError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl Error for BenchError {}

impl From<DataError> for BenchError {
    fn from(e: DataError) -> Self {
        BenchError::Data(e)
    }
}

impl From<AttackError> for BenchError {
    fn from(e: AttackError) -> Self {
        BenchError::Attack(e)
    }
}

impl From<ZooError> for BenchError {
    fn from(e: ZooError) -> Self {
        BenchError::Zoo(e)
    }
}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Io(e)
    }
}

/// Identity and training metadata carried through matrices and manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub id: String,
    pub family: Family,
    pub tag: Option<TrainingTag>,
}

/// Top-1 accuracy of `model` on a pixel batch, evaluated in fixed chunks so
/// the count — and therefore the accuracy — is independent of batch layout.
fn accuracy_chunked(
    model: &Classifier<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
) -> Result<f64, BenchError> {
    let n = labels.len();
    let shape = images.shape().to_vec();
    let px: usize = shape[1..].iter().product();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + 128).min(n);
        let mut chunk_shape = shape.clone();
        chunk_shape[0] = end - start;
        let chunk = Tensor::new(chunk_shape, images.data()[start * px..end * px].to_vec())
            .map_err(|e| BenchError::Invalid { detail: format!("chunking batch: {e}") })?;
        let pred = model.predict(&chunk)?;
        for (p, &y) in pred.top1().iter().zip(&labels[start..end]) {
            if *p == y {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

fn slice_accuracy(slice: &EpsilonSlice<f32>) -> f64 {
    let n = slice.success.len().max(1);
    slice.success.iter().filter(|&&flipped| !flipped).count() as f64 / n as f64
}

/// One sweep row: accuracy under each attack at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub epsilon: f64,
    pub pgd_accuracy: f64,
    pub mig_accuracy: f64,
}

/// Clean and per-epsilon adversarial accuracy of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub model: String,
    pub sample_size: usize,
    pub clean_accuracy: f64,
    pub rows: Vec<RobustnessRow>,
    pub pgd_spec: AttackSpec,
    pub mig_spec: AttackSpec,
}

/// Sweeps a model over ascending budgets: PGD runs independently per ε while
/// MIG trajectories are generated once at the largest ε and clipped for the
/// smaller ones. A leading ε=0 row reports plain clean accuracy. The
/// templates supply steps/momentum/baseline; their `epsilons` are replaced by
/// the sweep (so any single-ε `step_size` override is dropped for MIG).
pub fn eval_robustness_sweep(
    model_id: &str,
    model: &Classifier<f32>,
    dataset: &LabeledImageSet,
    pgd_template: &AttackSpec,
    mig_template: &AttackSpec,
    epsilon_list: &[f64],
) -> Result<RobustnessReport, BenchError> {
    if epsilon_list.is_empty() {
        return Err(BenchError::Invalid { detail: "empty epsilon list".to_string() });
    }
    for pair in epsilon_list.windows(2) {
        if !(pair[1] > pair[0]) {
            return Err(BenchError::Invalid {
                detail: format!("epsilon list must ascend strictly, got {epsilon_list:?}"),
            });
        }
    }
    if epsilon_list.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(BenchError::Invalid {
            detail: format!("epsilons must be finite and ≥ 0, got {epsilon_list:?}"),
        });
    }

    let images = dataset.images();
    let labels = dataset.labels();
    let clean_accuracy = accuracy_chunked(model, images, labels)?;

    let positive: Vec<f64> = epsilon_list.iter().copied().filter(|e| *e > 0.0).collect();

    let mut pgd_acc: Vec<f64> = Vec::with_capacity(positive.len());
    for &eps in &positive {
        let spec = AttackSpec { epsilons: vec![eps], ..pgd_template.clone() };
        let out = pgd(model, images, labels, &spec)?;
        pgd_acc.push(slice_accuracy(&out.per_epsilon[0]));
    }

    let mig_spec = AttackSpec {
        epsilons: positive.clone(),
        step_size: None,
        ..mig_template.clone()
    };
    let mig_acc: Vec<f64> = if positive.is_empty() {
        Vec::new()
    } else {
        let out = mig_multi_epsilon(model, images, labels, &mig_spec)?;
        out.per_epsilon.iter().map(slice_accuracy).collect()
    };

    let mut rows = Vec::with_capacity(epsilon_list.len());
    let mut k = 0usize;
    for &eps in epsilon_list {
        if eps == 0.0 {
            rows.push(RobustnessRow {
                epsilon: 0.0,
                pgd_accuracy: clean_accuracy,
                mig_accuracy: clean_accuracy,
            });
        } else {
            rows.push(RobustnessRow {
                epsilon: eps,
                pgd_accuracy: pgd_acc[k],
                mig_accuracy: mig_acc[k],
            });
            k += 1;
        }
    }

    Ok(RobustnessReport {
        model: model_id.to_string(),
        sample_size: dataset.len(),
        clean_accuracy,
        rows,
        pgd_spec: AttackSpec { epsilons: positive.clone(), ..pgd_template.clone() },
        mig_spec,
    })
}

/// The persisted transferability benchmark: one stratified clean sample plus
/// an adversarial copy per surrogate, all at the same high budget.
#[derive(Debug, Clone)]
pub struct TransferBenchmark {
    pub epsilon: f64,
    pub seed: u64,
    pub k_per_class: usize,
    pub source_indices: Vec<usize>,
    pub clean: LabeledImageSet,
    pub surrogates: Vec<(ModelMeta, AdversarialSet)>,
}

fn check_id(id: &str) -> Result<(), BenchError> {
    if id.is_empty()
        || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(BenchError::Invalid {
            detail: format!("model id `{id}` must be non-empty [A-Za-z0-9_-]"),
        });
    }
    Ok(())
}

/// Generates the benchmark: for each surrogate, unmodified single-ε MIG on
/// the clean sample. Any frozen or degenerate trajectory aborts the build —
/// a benchmark with silently missing perturbations would bias every cell.
pub fn build_transfer_benchmark(
    surrogates: &[(String, Classifier<f32>)],
    sample: &BenchmarkSample,
    spec: &AttackSpec,
) -> Result<TransferBenchmark, BenchError> {
    if surrogates.is_empty() {
        return Err(BenchError::Invalid { detail: "no surrogate models given".to_string() });
    }
    spec.validate()?;
    if spec.epsilons.len() != 1 {
        return Err(BenchError::Invalid {
            detail: "the benchmark uses single-epsilon MIG".to_string(),
        });
    }
    for (i, (id, _)) in surrogates.iter().enumerate() {
        check_id(id)?;
        if surrogates[..i].iter().any(|(other, _)| other == id) {
            return Err(BenchError::Invalid { detail: format!("duplicate surrogate id `{id}`") });
        }
    }

    let clean = &sample.set;
    let mut sets = Vec::with_capacity(surrogates.len());
    for (id, model) in surrogates {
        let output = mig(model, clean.images(), clean.labels(), spec)?;
        if !output.diagnostics.is_empty() {
            return Err(BenchError::Invalid {
                detail: format!(
                    "surrogate `{id}` produced degenerate trajectories: {}",
                    output.diagnostics.join("; ")
                ),
            });
        }
        let meta = ModelMeta { id: id.clone(), family: model.config.family, tag: model.tag };
        let set = AdversarialSet {
            surrogate: id.clone(),
            seed: sample.seed,
            spec: spec.clone(),
            labels: clean.labels().to_vec(),
            output,
        };
        sets.push((meta, set));
    }

    Ok(TransferBenchmark {
        epsilon: spec.epsilons[0],
        seed: sample.seed,
        k_per_class: sample.k_per_class,
        source_indices: sample.source_indices.clone(),
        clean: clean.clone(),
        surrogates: sets,
    })
}

#[derive(Serialize, Deserialize)]
struct BenchmarkHeader {
    version: u32,
    epsilon: f64,
    seed: u64,
    k_per_class: usize,
    source_indices: Vec<usize>,
    clean_file: String,
    surrogates: Vec<BenchmarkEntry>,
}

#[derive(Serialize, Deserialize)]
struct BenchmarkEntry {
    id: String,
    family: Family,
    tag: Option<TrainingTag>,
    file: String,
}

const BENCHMARK_VERSION: u32 = 1;

/// Writes `benchmark.json`, `clean.advd`, and one `adv_<id>.advi` (+ JSON
/// manifest) per surrogate into `dir`. Returns every path written.
pub fn save_benchmark(
    benchmark: &TransferBenchmark,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, BenchError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let clean_file = "clean.advd".to_string();
    save_image_set(&benchmark.clean, dir.join(&clean_file))?;
    written.push(dir.join(&clean_file));

    let mut entries = Vec::with_capacity(benchmark.surrogates.len());
    for (meta, set) in &benchmark.surrogates {
        let base = dir.join(format!("adv_{}", meta.id));
        let (bin, manifest) = save_adversarial_set(set, &base)?;
        entries.push(BenchmarkEntry {
            id: meta.id.clone(),
            family: meta.family,
            tag: meta.tag,
            file: format!("adv_{}.advi", meta.id),
        });
        written.push(bin);
        written.push(manifest);
    }

    let header = BenchmarkHeader {
        version: BENCHMARK_VERSION,
        epsilon: benchmark.epsilon,
        seed: benchmark.seed,
        k_per_class: benchmark.k_per_class,
        source_indices: benchmark.source_indices.clone(),
        clean_file,
        surrogates: entries,
    };
    let mut body = serde_json::to_vec_pretty(&header)
        .map_err(|e| BenchError::Invalid { detail: format!("benchmark manifest: {e}") })?;
    body.push(b'\n');
    let manifest_path = dir.join("benchmark.json");
    fs::write(&manifest_path, body)?;
    written.insert(0, manifest_path);
    Ok(written)
}

/// Reads a directory written by [`save_benchmark`], cross-checking every
/// adversarial set against the manifest and the clean sample.
pub fn load_benchmark(dir: impl AsRef<Path>) -> Result<TransferBenchmark, BenchError> {
    let dir = dir.as_ref();
    let header_bytes = fs::read(dir.join("benchmark.json"))?;
    let header: BenchmarkHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| BenchError::Invalid { detail: format!("benchmark manifest: {e}") })?;
    if header.version != BENCHMARK_VERSION {
        return Err(BenchError::Invalid {
            detail: format!("unsupported benchmark version {}", header.version),
        });
    }
    let clean = load_image_set(dir.join(&header.clean_file))?;
    let mut surrogates = Vec::with_capacity(header.surrogates.len());
    for entry in header.surrogates {
        let set = load_adversarial_set(dir.join(&entry.file))?;
        if set.surrogate != entry.id {
            return Err(BenchError::Invalid {
                detail: format!(
                    "adversarial set `{}` claims surrogate `{}`, manifest says `{}`",
                    entry.file, set.surrogate, entry.id
                ),
            });
        }
        if set.labels != clean.labels() {
            return Err(BenchError::Invalid {
                detail: format!("labels in `{}` do not match the clean sample", entry.file),
            });
        }
        let slice = match set.output.per_epsilon.as_slice() {
            [one] => one,
            other => {
                return Err(BenchError::Invalid {
                    detail: format!(
                        "benchmark sets carry one epsilon slice, `{}` has {}",
                        entry.file,
                        other.len()
                    ),
                })
            }
        };
        if slice.epsilon != header.epsilon {
            return Err(BenchError::Invalid {
                detail: format!(
                    "`{}` was generated at ε={}, benchmark says ε={}",
                    entry.file, slice.epsilon, header.epsilon
                ),
            });
        }
        if slice.images.shape() != clean.images().shape() {
            return Err(BenchError::Invalid {
                detail: format!("`{}` image shape does not match the clean sample", entry.file),
            });
        }
        surrogates.push((
            ModelMeta { id: entry.id, family: entry.family, tag: entry.tag },
            set,
        ));
    }
    Ok(TransferBenchmark {
        epsilon: header.epsilon,
        seed: header.seed,
        k_per_class: header.k_per_class,
        source_indices: header.source_indices,
        clean,
        surrogates,
    })
}

/// One surrogate × target evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub surrogate: usize,
    pub target: usize,
    /// Target accuracy on the surrogate's adversarial images; lower means
    /// stronger transfer.
    pub accuracy: f64,
    pub n: usize,
    /// Set when surrogate and target are the same model id.
    pub white_box: bool,
}

/// The surrogate × target grid plus a clean-accuracy reference column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub surrogates: Vec<ModelMeta>,
    pub targets: Vec<ModelMeta>,
    /// Row-major: `cells[s * targets.len() + t]`.
    pub cells: Vec<TransferCell>,
    pub clean_accuracy: Vec<f64>,
}

impl TransferMatrix {
    pub fn cell(&self, surrogate: usize, target: usize) -> &TransferCell {
        &self.cells[surrogate * self.targets.len() + target]
    }
}

/// Evaluates every target on every surrogate's adversarial set. Targets are
/// only forwarded here — never during generation — and each must carry a
/// training tag.
pub fn eval_transfer_matrix(
    benchmark: &TransferBenchmark,
    targets: &[(String, Classifier<f32>)],
) -> Result<TransferMatrix, BenchError> {
    if targets.is_empty() {
        return Err(BenchError::Invalid { detail: "no target models given".to_string() });
    }
    let dims = benchmark.clean.dims();
    let classes = benchmark.clean.class_count();
    let mut target_meta = Vec::with_capacity(targets.len());
    for (id, model) in targets {
        check_id(id)?;
        if model.config.input != dims {
            return Err(BenchError::Invalid {
                detail: format!(
                    "target `{id}` expects {:?} inputs, benchmark images are {dims:?}",
                    model.config.input
                ),
            });
        }
        if classes > model.config.num_classes {
            return Err(BenchError::Invalid {
                detail: format!(
                    "target `{id}` outputs {} classes, benchmark has {classes}",
                    model.config.num_classes
                ),
            });
        }
        let tag = model.tag.ok_or_else(|| BenchError::Invalid {
            detail: format!("target `{id}` has no training tag"),
        })?;
        target_meta.push(ModelMeta { id: id.clone(), family: model.config.family, tag: Some(tag) });
    }

    let labels = benchmark.clean.labels();
    let n = labels.len();
    let mut clean_accuracy = Vec::with_capacity(targets.len());
    for (_, model) in targets {
        clean_accuracy.push(accuracy_chunked(model, benchmark.clean.images(), labels)?);
    }

    let mut cells = Vec::with_capacity(benchmark.surrogates.len() * targets.len());
    for (s, (s_meta, set)) in benchmark.surrogates.iter().enumerate() {
        let adv = &set.output.per_epsilon[0].images;
        for (t, (t_id, model)) in targets.iter().enumerate() {
            let accuracy = accuracy_chunked(model, adv, labels)?;
            cells.push(TransferCell {
                surrogate: s,
                target: t,
                accuracy,
                n,
                white_box: &s_meta.id == t_id,
            });
        }
    }

    Ok(TransferMatrix {
        surrogates: benchmark.surrogates.iter().map(|(m, _)| m.clone()).collect(),
        targets: target_meta,
        cells,
        clean_accuracy,
    })
}

/// Mean accuracy over one (surrogate tag, target tag) group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub mean: f64,
    pub pairs: usize,
}

/// Table-style 2×2 aggregation over training tags, excluding white-box cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMatrix {
    pub at_to_at: AggregateCell,
    pub at_to_st: AggregateCell,
    pub st_to_at: AggregateCell,
    pub st_to_st: AggregateCell,
    /// Always true: white-box diagonal cells never enter the means.
    pub excludes_white_box: bool,
}

impl AggregateMatrix {
    pub fn get(&self, surrogate: TrainingTag, target: TrainingTag) -> AggregateCell {
        match (surrogate, target) {
            (TrainingTag::At, TrainingTag::At) => self.at_to_at,
            (TrainingTag::At, TrainingTag::St) => self.at_to_st,
            (TrainingTag::St, TrainingTag::At) => self.st_to_at,
            (TrainingTag::St, TrainingTag::St) => self.st_to_st,
        }
    }
}

/// Arithmetic means of the transfer cells grouped by (surrogate tag, target
/// tag), white-box diagonal excluded. Every model must be tagged and every
/// group must be populated.
pub fn aggregate_training_type(matrix: &TransferMatrix) -> Result<AggregateMatrix, BenchError> {
    let tag_of = |meta: &ModelMeta, role: &str| {
        meta.tag.ok_or_else(|| BenchError::Invalid {
            detail: format!("{role} `{}` has no training tag", meta.id),
        })
    };

    // Index 0 = AT, 1 = ST.
    let mut sums = [[0.0f64; 2]; 2];
    let mut counts = [[0usize; 2]; 2];
    for cell in &matrix.cells {
        if cell.white_box {
            continue;
        }
        let s = match tag_of(&matrix.surrogates[cell.surrogate], "surrogate")? {
            TrainingTag::At => 0,
            TrainingTag::St => 1,
        };
        let t = match tag_of(&matrix.targets[cell.target], "target")? {
            TrainingTag::At => 0,
            TrainingTag::St => 1,
        };
        sums[s][t] += cell.accuracy;
        counts[s][t] += 1;
    }

    let group = |s: usize, t: usize| -> Result<AggregateCell, BenchError> {
        if counts[s][t] == 0 {
            let name = |i| if i == 0 { "AT" } else { "ST" };
            return Err(BenchError::Invalid {
                detail: format!(
                    "no non-white-box pairs in the {}→{} group",
                    name(s),
                    name(t)
                ),
            });
        }
        Ok(AggregateCell { mean: sums[s][t] / counts[s][t] as f64, pairs: counts[s][t] })
    };

    Ok(AggregateMatrix {
        at_to_at: group(0, 0)?,
        at_to_st: group(0, 1)?,
        st_to_at: group(1, 0)?,
        st_to_st: group(1, 1)?,
        excludes_white_box: true,
    })
}
