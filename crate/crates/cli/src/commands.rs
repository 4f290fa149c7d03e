//! Subcommand implementations. Every command echoes its effective config
//! into the output directory, writes self-describing artifacts, and prints a
//! short summary to stdout.

use std::fs;
use std::ops::Range;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use advlab_core::attacks::{
    mig, mig_multi_epsilon, pgd, save_adversarial_set, AdversarialSet, AttackError, AttackOutput,
    AttackSpec, EpsilonSlice,
};
use advlab_core::bench::{
    aggregate_training_type, build_transfer_benchmark, default_benchmark_spec, default_sweep,
    eval_robustness_sweep, eval_transfer_matrix, export_attribution_maps, export_reports,
    load_benchmark, robustness_csv, save_benchmark, AggregateMatrix, RobustnessReport,
    RobustnessRow, TransferMatrix,
};
use advlab_core::datasets::{
    load_cifar_binary, load_idx, load_image_set, sample_benchmark, synth_blobs, LabeledImageSet,
};
use advlab_core::gradcore::Tensor;
use advlab_core::train::{save_run, train_free_at, train_standard};
use advlab_core::zoo::{build_classifier, load_checkpoint, Classifier};

use crate::config::{
    echo_config, stage_seed, AttackMethod, DatasetBlock, ModelRef, RunConfig, STAGE_ATTACK,
    STAGE_DATASET, STAGE_MODEL_INIT, STAGE_SAMPLE, STAGE_TRAIN, STAGE_VAL_DATASET,
};

/// The `bench run` artifact: matrix plus aggregate, versioned so `report`
/// can reject stale layouts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationArtifact {
    pub version: u32,
    pub matrix: TransferMatrix,
    pub aggregate: AggregateMatrix,
}

pub const EVALUATION_VERSION: u32 = 1;

fn require<'a, T>(field: &'a Option<T>, block: &str, command: &str) -> Result<&'a T> {
    field
        .as_ref()
        .ok_or_else(|| anyhow!("`{command}` needs a `{block}` block in the config"))
}

fn load_dataset(block: &DatasetBlock, seed: u64) -> Result<LabeledImageSet> {
    let set = match block {
        DatasetBlock::SynthBlobs(b) => synth_blobs(b.classes, b.per_class, b.resolution, seed)
            .context("generating synth-blobs")?,
        DatasetBlock::Idx(b) => load_idx(&b.images, &b.labels).with_context(|| {
            format!("loading IDX pair {} / {}", b.images.display(), b.labels.display())
        })?,
        DatasetBlock::CifarBinary(b) => {
            load_cifar_binary(&b.batches).context("loading CIFAR binary batches")?
        }
        DatasetBlock::ImageSet(b) => load_image_set(&b.path)
            .with_context(|| format!("loading image set {}", b.path.display()))?,
    };
    Ok(set)
}

fn load_model(path: &Path) -> Result<Classifier<f32>> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_model_refs(refs: &[ModelRef]) -> Result<Vec<(String, Classifier<f32>)>> {
    refs.iter()
        .map(|r| Ok((r.id.clone(), load_model(&r.checkpoint)?)))
        .collect()
}

/// Every `k`-th image validates, the rest train.
fn holdout_split(
    set: &LabeledImageSet,
    every: usize,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if every < 2 {
        bail!("holdout_every must be at least 2, got {every}");
    }
    let val: Vec<usize> = (0..set.len()).filter(|i| i % every == 0).collect();
    let train: Vec<usize> = (0..set.len()).filter(|i| i % every != 0).collect();
    if train.is_empty() {
        bail!("holdout split leaves no training images ({} total)", set.len());
    }
    Ok((set.subset(&train)?, set.subset(&val)?))
}

pub fn run_train(config: &RunConfig) -> Result<()> {
    let dataset = require(&config.dataset, "dataset", "train")?;
    let model_config = require(&config.model, "model", "train")?;
    let train_block = require(&config.train, "train", "train")?;

    let full = load_dataset(dataset, stage_seed(config.seed, STAGE_DATASET))?;
    let (train_set, val_set) = match &config.val_dataset {
        Some(block) => (full, load_dataset(block, stage_seed(config.seed, STAGE_VAL_DATASET))?),
        None => holdout_split(&full, config.holdout_every)?,
    };

    let model = build_classifier(model_config, stage_seed(config.seed, STAGE_MODEL_INIT))
        .context("building the model")?;
    let mut train_config = train_block.clone();
    train_config.seed = stage_seed(config.seed, STAGE_TRAIN);

    let run = if train_config.free_at.is_some() {
        train_free_at(model, &train_set, &val_set, &train_config).context("free AT run")?
    } else {
        train_standard(model, &train_set, &val_set, &train_config).context("standard run")?
    };

    let mut effective = config.clone();
    effective.train = Some(train_config.clone());
    echo_config(&effective, &config.out)?;
    let paths = save_run(&run, &train_config, &config.out, &config.name)
        .context("saving the trained run")?;

    let tag = run.model.tag.map_or_else(|| "untagged".to_string(), |t| t.to_string());
    if run.curves.is_empty() {
        println!(
            "trained `{}` [{tag}]: zero epochs requested; checkpoint is the initialization",
            config.name
        );
    } else {
        let best = &run.curves[run.best_epoch];
        println!(
            "trained `{}` [{tag}]: {} epochs ({} optimizer steps){}, best epoch {} (val_loss {:.6}, val_acc {:.4})",
            config.name,
            run.curves.len(),
            run.steps,
            if run.stopped_early { " — stopped early" } else { "" },
            run.best_epoch,
            best.val_loss,
            best.val_acc,
        );
    }
    println!("wrote {}", paths.checkpoint.display());
    println!("wrote {}", paths.manifest.display());
    println!("wrote {}", paths.curves.display());
    Ok(())
}

/// Balanced contiguous shards: the first `n % t` shards carry one extra row.
fn shards(n: usize, threads: usize) -> Vec<Range<usize>> {
    let t = threads.clamp(1, n.max(1));
    let base = n / t;
    let extra = n % t;
    let mut out = Vec::with_capacity(t);
    let mut start = 0;
    for i in 0..t {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

fn rows_subset(set: &LabeledImageSet, range: &Range<usize>) -> Result<LabeledImageSet> {
    let idx: Vec<usize> = range.clone().collect();
    Ok(set.subset(&idx)?)
}

/// Rewrites shard-local "image N:" diagnostics to global indices so the
/// merged output matches the single-threaded run byte for byte.
fn offset_image_diagnostics(diags: Vec<String>, offset: usize) -> Vec<String> {
    diags
        .into_iter()
        .map(|d| {
            let tail = match d.strip_prefix("image ") {
                Some(t) => t,
                None => return d,
            };
            let colon = match tail.find(':') {
                Some(p) => p,
                None => return d,
            };
            match tail[..colon].parse::<usize>() {
                Ok(local) => format!("image {}{}", local + offset, &tail[colon..]),
                Err(_) => d,
            }
        })
        .collect()
}

fn merge_attack_outputs(
    parts: Vec<AttackOutput<f32>>,
    ranges: &[Range<usize>],
    shape: &[usize],
) -> Result<AttackOutput<f32>> {
    let [_, h, w, c] = [shape[0], shape[1], shape[2], shape[3]];
    let n: usize = ranges.iter().map(|r| r.len()).sum();
    let first = &parts[0];
    let mut merged: Vec<EpsilonSlice<f32>> = first
        .per_epsilon
        .iter()
        .map(|s| EpsilonSlice {
            epsilon: s.epsilon,
            images: Tensor::new(vec![0, h, w, c], Vec::new()).expect("empty batch"),
            success: Vec::with_capacity(n),
            linf: Vec::with_capacity(n),
        })
        .collect();
    let mut pixel_data: Vec<Vec<f32>> = vec![Vec::with_capacity(n * h * w * c); merged.len()];
    let mut diagnostics = Vec::new();
    for (part, range) in parts.into_iter().zip(ranges) {
        if part.per_epsilon.len() != merged.len() {
            bail!("attack shards disagree on the epsilon grid");
        }
        for (k, slice) in part.per_epsilon.into_iter().enumerate() {
            pixel_data[k].extend_from_slice(slice.images.data());
            merged[k].success.extend(slice.success);
            merged[k].linf.extend(slice.linf);
        }
        diagnostics.extend(offset_image_diagnostics(part.diagnostics, range.start));
    }
    for (slice, data) in merged.iter_mut().zip(pixel_data) {
        slice.images = Tensor::new(vec![n, h, w, c], data).expect("merged shard shapes");
    }
    Ok(AttackOutput { per_epsilon: merged, diagnostics })
}

fn attack_once(
    model: &Classifier<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    spec: &AttackSpec,
    method: AttackMethod,
) -> Result<AttackOutput<f32>, AttackError> {
    match method {
        AttackMethod::Pgd => pgd(model, images, labels, spec),
        AttackMethod::Mig if spec.epsilons.len() > 1 => {
            mig_multi_epsilon(model, images, labels, spec)
        }
        AttackMethod::Mig => mig(model, images, labels, spec),
    }
}

/// Per-image attack work sharded over `threads` workers. Trajectories are
/// image-local, so any thread count reproduces the single-threaded bytes;
/// shard boundaries depend only on (n, threads).
fn sharded_attack(
    model: &Classifier<f32>,
    set: &LabeledImageSet,
    spec: &AttackSpec,
    method: AttackMethod,
    threads: usize,
) -> Result<AttackOutput<f32>> {
    if threads <= 1 || set.len() <= 1 {
        return Ok(attack_once(model, set.images(), set.labels(), spec, method)?);
    }
    let ranges = shards(set.len(), threads);
    let subsets = ranges
        .iter()
        .map(|r| rows_subset(set, r))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<AttackOutput<f32>, AttackError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = subsets
            .iter()
            .map(|sub| scope.spawn(move || attack_once(model, sub.images(), sub.labels(), spec, method)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("attack worker panicked")).collect()
    });
    let parts = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    merge_attack_outputs(parts, &ranges, set.images().shape())
}

pub fn run_attack(config: &RunConfig) -> Result<()> {
    let dataset = require(&config.dataset, "dataset", "attack")?;
    let checkpoint = require(&config.checkpoint, "checkpoint", "attack")?;
    let block = config.attack.clone().unwrap_or_default();
    let spec = block.spec();

    let model = load_model(checkpoint)?;
    let set = load_dataset(dataset, stage_seed(config.seed, STAGE_DATASET))?;
    let output = sharded_attack(&model, &set, &spec, block.method, config.threads)?;

    for diag in &output.diagnostics {
        eprintln!("warning: {diag}");
    }
    echo_config(config, &config.out)?;
    let adv = AdversarialSet {
        surrogate: config.name.clone(),
        seed: stage_seed(config.seed, STAGE_ATTACK),
        spec,
        labels: set.labels().to_vec(),
        output,
    };
    let (binary, manifest) = save_adversarial_set(&adv, config.out.join(&config.name))
        .context("saving the adversarial set")?;

    let n = set.len();
    for slice in &adv.output.per_epsilon {
        let hits = slice.success.iter().filter(|&&s| s).count();
        println!(
            "epsilon {:>6}: attack success {hits}/{n} ({:.4})",
            slice.epsilon,
            hits as f64 / n as f64
        );
    }
    println!("wrote {}", binary.display());
    println!("wrote {}", manifest.display());
    Ok(())
}

fn merge_sweep_reports(
    parts: Vec<RobustnessReport>,
    weights: &[usize],
) -> Result<RobustnessReport> {
    let total: usize = weights.iter().sum();
    let mut merged = parts[0].clone();
    merged.sample_size = total;
    merged.clean_accuracy = 0.0;
    for row in &mut merged.rows {
        row.pgd_accuracy = 0.0;
        row.mig_accuracy = 0.0;
    }
    for (part, &w) in parts.iter().zip(weights) {
        if part.rows.len() != merged.rows.len() {
            bail!("sweep shards disagree on the epsilon grid");
        }
        let frac = w as f64 / total as f64;
        merged.clean_accuracy += part.clean_accuracy * frac;
        for (m, p) in merged.rows.iter_mut().zip(&part.rows) {
            m.pgd_accuracy += p.pgd_accuracy * frac;
            m.mig_accuracy += p.mig_accuracy * frac;
        }
    }
    Ok(merged)
}

fn sharded_sweep(
    model_id: &str,
    model: &Classifier<f32>,
    set: &LabeledImageSet,
    pgd_template: &AttackSpec,
    mig_template: &AttackSpec,
    sweep: &[f64],
    threads: usize,
) -> Result<RobustnessReport> {
    if threads <= 1 || set.len() <= 1 {
        return Ok(eval_robustness_sweep(model_id, model, set, pgd_template, mig_template, sweep)?);
    }
    let ranges = shards(set.len(), threads);
    let subsets = ranges
        .iter()
        .map(|r| rows_subset(set, r))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = subsets
            .iter()
            .map(|sub| {
                scope.spawn(move || {
                    eval_robustness_sweep(model_id, model, sub, pgd_template, mig_template, sweep)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let parts = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let weights: Vec<usize> = subsets.iter().map(|s| s.len()).collect();
    merge_sweep_reports(parts, &weights)
}

pub fn run_eval(config: &RunConfig) -> Result<()> {
    let dataset = require(&config.dataset, "dataset", "eval")?;
    let checkpoint = require(&config.checkpoint, "checkpoint", "eval")?;
    let block = config.attack.clone().unwrap_or_default();
    let sweep = config.sweep.clone().unwrap_or_else(default_sweep);

    let model = load_model(checkpoint)?;
    let set = load_dataset(dataset, stage_seed(config.seed, STAGE_DATASET))?;
    let report = sharded_sweep(
        &config.name,
        &model,
        &set,
        &block.pgd_template(),
        &block.mig_template(),
        &sweep,
        config.threads,
    )?;

    echo_config(config, &config.out)?;
    let csv_path = config.out.join(format!("robustness_{}.csv", config.name));
    fs::write(&csv_path, robustness_csv(&report))
        .with_context(|| format!("writing {}", csv_path.display()))?;
    let json_path = config.out.join(format!("robustness_{}.json", config.name));
    let mut body = serde_json::to_vec_pretty(&report).context("serializing the sweep report")?;
    body.push(b'\n');
    fs::write(&json_path, body).with_context(|| format!("writing {}", json_path.display()))?;

    println!(
        "model `{}`: clean accuracy {:.4} over {} images",
        config.name, report.clean_accuracy, report.sample_size
    );
    for RobustnessRow { epsilon, pgd_accuracy, mig_accuracy } in &report.rows {
        println!("epsilon {epsilon:>6}: pgd {pgd_accuracy:.4}  mig {mig_accuracy:.4}");
    }
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    Ok(())
}

pub fn run_bench_build(config: &RunConfig) -> Result<()> {
    let dataset = require(&config.dataset, "dataset", "bench build")?;
    let bench = require(&config.bench, "bench", "bench build")?;
    if bench.surrogates.is_empty() {
        bail!("bench.surrogates lists no checkpoints; nothing to build from");
    }
    let spec = match &config.attack {
        Some(block) => {
            if block.method != AttackMethod::Mig {
                bail!("the transfer benchmark is generated with MIG; set attack.method = \"mig\"");
            }
            block.spec()
        }
        None => default_benchmark_spec(),
    };

    let set = load_dataset(dataset, stage_seed(config.seed, STAGE_DATASET))?;
    let sample = sample_benchmark(&set, bench.k_per_class, stage_seed(config.seed, STAGE_SAMPLE))
        .context("stratified benchmark sampling")?;
    let surrogates = load_model_refs(&bench.surrogates)?;
    let benchmark =
        build_transfer_benchmark(&surrogates, &sample, &spec).context("generating the benchmark")?;

    echo_config(config, &config.out)?;
    let written = save_benchmark(&benchmark, &config.out).context("saving the benchmark")?;
    println!(
        "benchmark: {} surrogates × {} images at epsilon {}",
        benchmark.surrogates.len(),
        benchmark.clean.len(),
        benchmark.epsilon
    );
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_aggregate(aggregate: &AggregateMatrix) {
    println!("aggregate mean target accuracy (white-box cells excluded):");
    for (name, cell) in [
        ("AT→AT", aggregate.at_to_at),
        ("AT→ST", aggregate.at_to_st),
        ("ST→AT", aggregate.st_to_at),
        ("ST→ST", aggregate.st_to_st),
    ] {
        println!("  {name} {:.4} over {} pairs", cell.mean, cell.pairs);
    }
    let r = advlab_core::bench::TRANSFER_REFERENCE_PERCENT;
    println!(
        "  reference (percent): AT→AT {}, AT→ST {}, ST→AT {}, ST→ST {}",
        r[0][0], r[0][1], r[1][0], r[1][1]
    );
}

pub fn run_bench_run(config: &RunConfig) -> Result<()> {
    let bench = require(&config.bench, "bench", "bench run")?;
    if bench.targets.is_empty() {
        bail!("bench.targets lists no checkpoints; nothing to evaluate");
    }
    let dir = bench
        .benchmark_dir
        .as_ref()
        .ok_or_else(|| anyhow!("`bench run` needs bench.benchmark_dir (from `bench build`)"))?;

    let benchmark =
        load_benchmark(dir).with_context(|| format!("loading benchmark {}", dir.display()))?;
    let targets = load_model_refs(&bench.targets)?;
    let matrix = eval_transfer_matrix(&benchmark, &targets).context("evaluating the matrix")?;
    let aggregate = aggregate_training_type(&matrix).context("aggregating by training type")?;

    echo_config(config, &config.out)?;
    let artifact = EvaluationArtifact { version: EVALUATION_VERSION, matrix, aggregate };
    let path = config.out.join("evaluation.json");
    let mut body = serde_json::to_vec_pretty(&artifact).context("serializing the evaluation")?;
    body.push(b'\n');
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;

    for cell in &artifact.matrix.cells {
        let s = &artifact.matrix.surrogates[cell.surrogate].id;
        let t = &artifact.matrix.targets[cell.target].id;
        let wb = if cell.white_box { " (white-box)" } else { "" };
        println!("{s} → {t}: accuracy {:.4} over {} images{wb}", cell.accuracy, cell.n);
    }
    print_aggregate(&artifact.aggregate);
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run_report(config: &RunConfig) -> Result<()> {
    let block = require(&config.report, "report", "report")?;
    let text = fs::read_to_string(&block.evaluation)
        .with_context(|| format!("reading {}", block.evaluation.display()))?;
    let artifact: EvaluationArtifact = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", block.evaluation.display()))?;
    if artifact.version != EVALUATION_VERSION {
        bail!(
            "evaluation {} has version {}, this build reads {EVALUATION_VERSION}",
            block.evaluation.display(),
            artifact.version
        );
    }
    let robustness = block
        .robustness
        .iter()
        .map(|p| {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<RobustnessReport>(&text)
                .with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;

    echo_config(config, &config.out)?;
    let written = export_reports(&artifact.matrix, &artifact.aggregate, &robustness, &config.out)
        .context("rendering reports")?;
    for path in &written {
        println!("wrote {}", path.display());
    }

    if let Some(attr) = &block.attribution {
        let dataset = require(&config.dataset, "dataset", "report (attribution)")?;
        let model = load_model(&attr.checkpoint)?;
        let set = load_dataset(dataset, stage_seed(config.seed, STAGE_DATASET))?;
        if attr.count == 0 {
            bail!("report.attribution.count must be at least 1");
        }
        let count = attr.count.min(set.len());
        let head: Vec<usize> = (0..count).collect();
        let subset = set.subset(&head).context("taking the attribution head")?;
        let spec = config.attack.clone().unwrap_or_default().mig_template();
        let maps = export_attribution_maps(
            &model,
            subset.images(),
            subset.labels(),
            &spec,
            config.out.join("attribution"),
            &config.name,
        )
        .context("rendering attribution maps")?;
        for path in &maps {
            println!("wrote {}", path.display());
        }
    }
    print_aggregate(&artifact.aggregate);
    Ok(())
}
