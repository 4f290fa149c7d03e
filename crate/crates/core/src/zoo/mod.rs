//! Desk-scale model zoo: four trainable classifier families that all share the
//! same contract — raw pixels in [0,255] go in, the preprocessing affine
//! `(x - c) / s` is the first layer *inside* the model, logits come out.
//!
//! Every classifier carries its preprocessing spec and an optional training
//! tag (standard vs. adversarial) so downstream benchmarks can aggregate by
//! training type. Checkpoints round-trip bit-exactly.

mod checkpoint;
mod families;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::gradcore::{
    cast, kernels, DifferentiableModel, GradError, Real, Tape, Tensor, TraceRefs,
};

use families::{Binder, Init};

/// Errors from model construction, inference, and persistence.
#[derive(Debug)]
pub enum ZooError {
    /// Configuration violates a family constraint (dimensions, divisibility).
    Config { detail: String },
    /// A batch handed to `predict` is malformed or out of pixel range.
    Input { detail: String },
    /// A checkpoint file is malformed.
    Format { detail: String },
    Io(std::io::Error),
    Grad(GradError),
}

impl fmt::Display for ZooError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZooError::Config { detail } => write!(f, "invalid model config: {detail}"),
            ZooError::Input { detail } => write!(f, "invalid input batch: {detail}"),
            ZooError::Format { detail } => write!(f, "malformed checkpoint: {detail}"),
            ZooError::Io(e) => write!(f, "checkpoint io: {e}"),
            ZooError::Grad(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ZooError {}

impl From<GradError> for ZooError {
    fn from(e: GradError) -> Self {
        ZooError::Grad(e)
    }
}

impl From<std::io::Error> for ZooError {
    fn from(e: std::io::Error) -> Self {
        ZooError::Io(e)
    }
}

/// The four surrogate families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "small-cnn-a")]
    SmallCnnA,
    #[serde(rename = "small-cnn-b-residual")]
    SmallCnnBResidual,
    #[serde(rename = "tiny-vit")]
    TinyVit,
}

impl Family {
    pub const ALL: [Family; 4] =
        [Family::Mlp, Family::SmallCnnA, Family::SmallCnnBResidual, Family::TinyVit];

    /// Stable identifier, identical to the serde rename.
    pub fn id(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::SmallCnnA => "small-cnn-a",
            Family::SmallCnnBResidual => "small-cnn-b-residual",
            Family::TinyVit => "tiny-vit",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// How a classifier was trained, for benchmark aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainingTag {
    #[serde(rename = "ST")]
    St,
    #[serde(rename = "AT")]
    At,
}

impl fmt::Display for TrainingTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingTag::St => "ST",
            TrainingTag::At => "AT",
        })
    }
}

/// The in-model preprocessing affine: pixels map as `(x - offset) / scale`.
/// Declared input range is always [0,255]; there is no external path around
/// this layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    #[serde(default = "default_half_range")]
    pub offset: f64,
    #[serde(default = "default_half_range")]
    pub scale: f64,
}

fn default_half_range() -> f64 {
    127.5
}

impl Default for PreprocessSpec {
    /// Maps [0,255] onto [-1,1].
    fn default() -> Self {
        PreprocessSpec { offset: 127.5, scale: 127.5 }
    }
}

impl PreprocessSpec {
    pub fn identity() -> Self {
        PreprocessSpec { offset: 0.0, scale: 1.0 }
    }

    pub fn validate(&self) -> Result<(), ZooError> {
        if !(self.scale > 0.0 && self.scale.is_finite() && self.offset.is_finite()) {
            return Err(ZooError::Config {
                detail: format!(
                    "preprocess requires finite offset and scale > 0, got c={} s={}",
                    self.offset, self.scale
                ),
            });
        }
        Ok(())
    }

    /// The affine as (mul, add) so that `x * mul + add == (x - c) / s`.
    /// Both the tape trace and `apply_preprocess` go through this so the two
    /// paths are arithmetic-identical.
    pub(crate) fn coeffs(&self) -> (f64, f64) {
        (1.0 / self.scale, -(self.offset / self.scale))
    }
}

/// Applies the preprocessing affine elementwise, exactly as the model's first
/// layer computes it.
pub fn apply_preprocess<E: Real>(spec: &PreprocessSpec, pixels: &[E]) -> Vec<E> {
    let (mul, add) = spec.coeffs();
    let m = cast::<E>(mul);
    let a = cast::<E>(add);
    pixels.iter().map(|&v| v * m + a).collect()
}

/// Architecture hyperparameters. Parameter shapes are a pure function of this
/// config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    /// Input resolution as [height, width, channels].
    pub input: [usize; 3],
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Patch side for tiny-vit; ignored by the other families.
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    /// Attention heads for tiny-vit; ignored by the other families.
    #[serde(default = "default_heads")]
    pub heads: usize,
}

fn default_width() -> usize {
    32
}

fn default_depth() -> usize {
    2
}

fn default_patch() -> usize {
    4
}

fn default_heads() -> usize {
    4
}

impl ModelConfig {
    /// Desk-scale defaults per family for a given resolution and class count.
    pub fn preset(family: Family, input: [usize; 3], num_classes: usize) -> ModelConfig {
        let (width, depth) = match family {
            Family::Mlp => (96, 2),
            Family::SmallCnnA => (8, 2),
            Family::SmallCnnBResidual => (12, 2),
            Family::TinyVit => (32, 2),
        };
        ModelConfig { family, input, num_classes, width, depth, patch_size: 4, heads: 4 }
    }

    pub fn validate(&self) -> Result<(), ZooError> {
        let fail = |detail: String| Err(ZooError::Config { detail });
        let [h, w, c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return fail(format!("input resolution {:?} has a zero dimension", self.input));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes {} < 2", self.num_classes));
        }
        if self.width == 0 || self.depth == 0 {
            return fail(format!("width {} and depth {} must be positive", self.width, self.depth));
        }
        match self.family {
            Family::Mlp | Family::SmallCnnBResidual => {}
            Family::SmallCnnA => {
                let (mut sh, mut sw) = (h, w);
                for stage in 0..self.depth {
                    if sh.min(sw) < 2 {
                        return fail(format!(
                            "{h}x{w} input leaves a {sh}x{sw} map at stage {stage}, too small to pool"
                        ));
                    }
                    sh = (sh - 2) / 2 + 1;
                    sw = (sw - 2) / 2 + 1;
                }
            }
            Family::TinyVit => {
                let p = self.patch_size;
                if p == 0 || h % p != 0 || w % p != 0 {
                    return fail(format!("resolution {h}x{w} not divisible by patch size {p}"));
                }
                if self.heads == 0 || self.width % self.heads != 0 {
                    return fail(format!(
                        "width {} not divisible by heads {}",
                        self.width, self.heads
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A trained or freshly initialized classifier: config, in-model
/// preprocessing, named parameters, and an optional training tag.
///
/// Immutable during inference; the only interior state is a forward-pass
/// counter (used by the benchmark to prove the zero-query contract), so a
/// shared reference can serve concurrent predictions.
pub struct Classifier<E: Real> {
    pub config: ModelConfig,
    pub preprocess: PreprocessSpec,
    pub tag: Option<TrainingTag>,
    params: Vec<(String, Tensor<E>)>,
    forward_count: AtomicU64,
}

impl<E: Real> fmt::Debug for Classifier<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Classifier")
            .field("config", &self.config)
            .field("preprocess", &self.preprocess)
            .field("tag", &self.tag)
            .field("num_params", &self.num_params())
            .finish()
    }
}

impl<E: Real> Clone for Classifier<E> {
    fn clone(&self) -> Self {
        Classifier {
            config: self.config.clone(),
            preprocess: self.preprocess,
            tag: self.tag,
            params: self.params.clone(),
            forward_count: AtomicU64::new(self.forward_count.load(Ordering::Relaxed)),
        }
    }
}

/// Logits and softmax probabilities for one batch.
#[derive(Debug, Clone)]
pub struct Prediction<E: Real> {
    pub logits: Tensor<E>,
    pub probs: Tensor<E>,
}

impl<E: Real> Prediction<E> {
    /// Per-row argmax (first index on ties).
    pub fn top1(&self) -> Vec<usize> {
        let [n, classes] = [self.logits.shape()[0], self.logits.shape()[1]];
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let row = &self.logits.data()[r * classes..(r + 1) * classes];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(best);
        }
        out
    }
}

impl<E: Real> Classifier<E> {
    /// Reassembles a classifier from stored pieces, verifying the parameter
    /// list matches the config-derived inventory name-for-name and
    /// shape-for-shape.
    pub fn from_parts(
        config: ModelConfig,
        preprocess: PreprocessSpec,
        tag: Option<TrainingTag>,
        params: Vec<(String, Tensor<E>)>,
    ) -> Result<Self, ZooError> {
        preprocess.validate()?;
        let specs = families::param_specs(&config)?;
        if specs.len() != params.len() {
            return Err(ZooError::Config {
                detail: format!(
                    "config declares {} parameters, {} provided",
                    specs.len(),
                    params.len()
                ),
            });
        }
        for (spec, (name, tensor)) in specs.iter().zip(&params) {
            if &spec.name != name || spec.shape != tensor.shape() {
                return Err(ZooError::Config {
                    detail: format!(
                        "parameter {} {:?} does not match declared {} {:?}",
                        name,
                        tensor.shape(),
                        spec.name,
                        spec.shape
                    ),
                });
            }
            if !tensor.is_finite() {
                return Err(ZooError::Config {
                    detail: format!("parameter {name} contains non-finite values"),
                });
            }
        }
        Ok(Classifier { config, preprocess, tag, params, forward_count: AtomicU64::new(0) })
    }

    pub fn params(&self) -> &[(String, Tensor<E>)] {
        &self.params
    }

    /// Mutable access for optimizers. Shapes must be preserved by the caller.
    pub fn params_mut(&mut self) -> &mut [(String, Tensor<E>)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Total forward passes traced through this instance.
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forward_count.store(0, Ordering::Relaxed);
    }

    pub fn convert<F: Real>(&self) -> Classifier<F> {
        Classifier {
            config: self.config.clone(),
            preprocess: self.preprocess,
            tag: self.tag,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.convert())).collect(),
            forward_count: AtomicU64::new(0),
        }
    }

    /// Multiplies the preprocessing scale by `lambda` and the first-layer
    /// weight by the same factor. Mathematically a no-op on the logits; for
    /// power-of-two `lambda` it is exactly a no-op in float arithmetic, which
    /// the scale-invariance tests rely on.
    ///
    /// The first parameter entry is always the first weight that multiplies
    /// the preprocessed input (fc0.w / conv0.w / stem.w / patch.w), and the
    /// bias it pairs with is added after the product, so no other tensor needs
    /// compensation.
    pub fn compensated_rescale(&mut self, lambda: f64) -> Result<(), ZooError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ZooError::Config { detail: format!("rescale factor {lambda} not positive") });
        }
        self.preprocess.scale *= lambda;
        let l = cast::<E>(lambda);
        for v in self.params[0].1.data_mut() {
            *v = *v * l;
        }
        Ok(())
    }

    /// Rejects batches that are not [n, h, w, c] with every pixel in [0,255].
    fn check_pixel_batch(&self, batch: &Tensor<E>) -> Result<(), ZooError> {
        let dims = self.config.input;
        let ok_shape = batch.shape().len() == 4
            && batch.shape()[0] > 0
            && batch.shape()[1..] == dims;
        if !ok_shape {
            return Err(ZooError::Input {
                detail: format!("batch shape {:?}, model expects [n, {:?}]", batch.shape(), dims),
            });
        }
        let hi = cast::<E>(255.0);
        for &v in batch.data() {
            if !(v >= E::zero() && v <= hi) {
                return Err(ZooError::Input {
                    detail: format!("pixel {v} outside [0,255]"),
                });
            }
        }
        Ok(())
    }

    /// Raw pixels in, logits and probabilities out.
    pub fn predict(&self, batch: &Tensor<E>) -> Result<Prediction<E>, ZooError> {
        self.check_pixel_batch(batch)?;
        let mut tape = Tape::new();
        let refs = self.trace(&mut tape, batch, false, false)?;
        let n = batch.shape()[0];
        let classes = self.config.num_classes;
        let logits = tape.value(refs.logits).to_vec();
        let mut probs = logits.clone();
        kernels::softmax_rows_inplace(&mut probs, n, classes);
        Ok(Prediction {
            logits: Tensor::new(vec![n, classes], logits)?,
            probs: Tensor::new(vec![n, classes], probs)?,
        })
    }
}

/// Builds a deterministically initialized classifier: fan-in-scaled uniform
/// for conv/dense weights, truncated normal (sigma 0.02, clipped at two
/// sigma) for transformer weights, zeros for biases, ones for norm gains.
/// All draws happen in f64 and are cast, so f32 and f64 builds of the same
/// seed agree to rounding.
pub fn build_classifier<E: Real>(config: &ModelConfig, seed: u64) -> Result<Classifier<E>, ZooError> {
    let specs = families::param_specs(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).expect("constant sigma is valid");
    let mut params = Vec::with_capacity(specs.len());
    for spec in specs {
        let numel: usize = spec.shape.iter().product();
        let data: Vec<E> = match spec.init {
            Init::FanInUniform { fan_in } => {
                let limit = (6.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| cast::<E>(rng.gen_range(-limit..limit))).collect()
            }
            Init::TruncNormal => (0..numel)
                .map(|_| loop {
                    let v = normal.sample(&mut rng);
                    if v.abs() <= 0.04 {
                        break cast::<E>(v);
                    }
                })
                .collect(),
            Init::Zeros => vec![E::zero(); numel],
            Init::Ones => vec![E::one(); numel],
        };
        params.push((spec.name, Tensor::new(spec.shape, data)?));
    }
    Ok(Classifier {
        config: config.clone(),
        preprocess: PreprocessSpec::default(),
        tag: None,
        params,
        forward_count: AtomicU64::new(0),
    })
}

impl<E: Real> DifferentiableModel<E> for Classifier<E> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_dims(&self) -> Vec<usize> {
        self.config.input.to_vec()
    }

    fn trace(
        &self,
        tape: &mut Tape<E>,
        batch: &Tensor<E>,
        input_requires_grad: bool,
        params_require_grad: bool,
    ) -> Result<TraceRefs, GradError> {
        let dims = self.config.input;
        if batch.shape().len() != 4 || batch.shape()[1..] != dims || batch.shape()[0] == 0 {
            return Err(GradError::ShapeMismatch {
                op: "trace",
                detail: format!("batch shape {:?}, model expects [n>0, {:?}]", batch.shape(), dims),
            });
        }
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let n = batch.shape()[0];
        let input = tape.leaf(batch.data().to_vec(), batch.shape().to_vec(), input_requires_grad)?;
        let (mul, add) = self.preprocess.coeffs();
        let pre = tape.affine(input, mul, add)?;
        let mut binder = Binder::new(tape, &self.params, params_require_grad);
        let logits = families::trace_body(&self.config, &mut binder, pre, n)?;
        Ok(TraceRefs { input, logits, params: binder.bound })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{finite_difference_oracle, input_gradient, ScalarSelector};

    fn tiny_config(family: Family) -> ModelConfig {
        match family {
            Family::Mlp => ModelConfig {
                family,
                input: [4, 4, 1],
                num_classes: 3,
                width: 6,
                depth: 2,
                patch_size: 4,
                heads: 4,
            },
            Family::SmallCnnA => ModelConfig {
                family,
                input: [8, 8, 1],
                num_classes: 3,
                width: 4,
                depth: 2,
                patch_size: 4,
                heads: 4,
            },
            Family::SmallCnnBResidual => ModelConfig {
                family,
                input: [8, 8, 3],
                num_classes: 3,
                width: 4,
                depth: 1,
                patch_size: 4,
                heads: 4,
            },
            Family::TinyVit => ModelConfig {
                family,
                input: [8, 8, 3],
                num_classes: 3,
                width: 8,
                depth: 1,
                patch_size: 4,
                heads: 2,
            },
        }
    }

    fn pixel_batch<E: Real>(dims: [usize; 3], n: usize, seed: u64) -> Tensor<E> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel = n * dims[0] * dims[1] * dims[2];
        let data: Vec<E> = (0..numel).map(|_| cast::<E>(rng.gen_range(0.0..255.0))).collect();
        Tensor::new(vec![n, dims[0], dims[1], dims[2]], data).unwrap()
    }

    #[test]
    fn same_config_and_seed_build_bit_identical_parameters() {
        for family in Family::ALL {
            let config = tiny_config(family);
            let a = build_classifier::<f32>(&config, 7).unwrap();
            let b = build_classifier::<f32>(&config, 7).unwrap();
            assert_eq!(a.params.len(), b.params.len());
            for ((an, at), (bn, bt)) in a.params.iter().zip(b.params.iter()) {
                assert_eq!(an, bn);
                let bits_a: Vec<u32> = at.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = bt.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b, "{family} parameter {an} differs across builds");
            }
            let c = build_classifier::<f32>(&config, 8).unwrap();
            let same = a
                .params
                .iter()
                .zip(c.params.iter())
                .all(|((_, x), (_, y))| x.data() == y.data());
            assert!(!same, "{family} ignores the seed");
        }
    }

    #[test]
    fn mlp_parameter_count_matches_hand_sum() {
        // 8x8x1 input, one hidden layer of 32, 10 classes:
        // fc0 64*32 + 32, head 32*10 + 10 = 2048 + 32 + 320 + 10.
        let config = ModelConfig {
            family: Family::Mlp,
            input: [8, 8, 1],
            num_classes: 10,
            width: 32,
            depth: 1,
            patch_size: 4,
            heads: 4,
        };
        let model = build_classifier::<f32>(&config, 0).unwrap();
        assert_eq!(model.num_params(), 2410);
    }

    #[test]
    fn tiny_vit_patch4_on_32x32_has_64_patch_tokens_plus_class_token() {
        let config = ModelConfig {
            family: Family::TinyVit,
            input: [32, 32, 3],
            num_classes: 10,
            width: 16,
            depth: 1,
            patch_size: 4,
            heads: 4,
        };
        let model = build_classifier::<f32>(&config, 0).unwrap();
        assert_eq!(model.param("pos_embed").unwrap().shape(), &[65, 16]);
        assert_eq!(model.param("cls_token").unwrap().shape(), &[16]);
    }

    #[test]
    fn predict_probabilities_sum_to_one_for_all_families() {
        for family in Family::ALL {
            let config = tiny_config(family);
            let model = build_classifier::<f32>(&config, 3).unwrap();
            let batch = pixel_batch::<f32>(config.input, 5, 11);
            let pred = model.predict(&batch).unwrap();
            assert_eq!(pred.probs.shape(), &[5, 3]);
            for r in 0..5 {
                let sum: f32 = pred.probs.data()[r * 3..(r + 1) * 3].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "{family} row {r} sums to {sum}");
                let top = pred.top1()[r];
                assert!(top < 3);
            }
        }
    }

    #[test]
    fn predict_rejects_out_of_range_pixels_and_bad_shapes() {
        let config = tiny_config(Family::Mlp);
        let model = build_classifier::<f32>(&config, 0).unwrap();
        let mut batch = pixel_batch::<f32>(config.input, 1, 0);
        batch.data_mut()[3] = 255.5;
        assert!(matches!(model.predict(&batch), Err(ZooError::Input { .. })));
        batch.data_mut()[3] = -0.5;
        assert!(matches!(model.predict(&batch), Err(ZooError::Input { .. })));
        batch.data_mut()[3] = f32::NAN;
        assert!(matches!(model.predict(&batch), Err(ZooError::Input { .. })));
        let wrong = Tensor::<f32>::new(vec![1, 4, 4, 2], vec![1.0; 32]).unwrap();
        assert!(matches!(model.predict(&wrong), Err(ZooError::Input { .. })));
    }

    #[test]
    fn preprocess_maps_255_to_plus_one_and_admits_identity() {
        let spec = PreprocessSpec::default();
        assert_eq!(apply_preprocess::<f64>(&spec, &[255.0]), vec![1.0]);
        assert_eq!(apply_preprocess::<f64>(&spec, &[0.0]), vec![-1.0]);
        assert_eq!(apply_preprocess::<f64>(&spec, &[127.5]), vec![0.0]);
        let id = PreprocessSpec::identity();
        let xs = [0.0f32, 17.25, 255.0];
        assert_eq!(apply_preprocess::<f32>(&id, &xs), xs.to_vec());
    }

    #[test]
    fn pixel_epsilon_one_maps_to_1_over_127_5_in_internal_space() {
        let spec = PreprocessSpec::default();
        let lo = apply_preprocess::<f64>(&spec, &[100.0])[0];
        let hi = apply_preprocess::<f64>(&spec, &[101.0])[0];
        let radius = hi - lo;
        assert!((radius - 1.0 / 127.5).abs() < 1e-12);
        assert!((radius - 0.00784313725490196).abs() < 1e-12);
        // Conversely a full-range internal perturbation (eps = 1 in [-1,1]
        // space) is worth 127.5 pixel units, i.e. roughly 128.
        assert_eq!((1.0_f64 * spec.scale).round(), 128.0);
    }

    #[test]
    fn first_layer_sees_plus_one_for_pixel_255_inside_the_model() {
        // Identity-ish MLP: 1x1x1 input, one hidden unit with weight 1 and no
        // bias, head passes the hidden unit through to logit 0.
        let config = ModelConfig {
            family: Family::Mlp,
            input: [1, 1, 1],
            num_classes: 2,
            width: 1,
            depth: 1,
            patch_size: 4,
            heads: 4,
        };
        let params = vec![
            ("fc0.w".to_string(), Tensor::<f32>::new(vec![1, 1], vec![1.0]).unwrap()),
            ("fc0.b".to_string(), Tensor::<f32>::new(vec![1], vec![0.0]).unwrap()),
            ("head.w".to_string(), Tensor::<f32>::new(vec![1, 2], vec![1.0, 0.0]).unwrap()),
            ("head.b".to_string(), Tensor::<f32>::new(vec![2], vec![0.0, 0.0]).unwrap()),
        ];
        let model =
            Classifier::from_parts(config, PreprocessSpec::default(), None, params).unwrap();
        let batch = Tensor::<f32>::new(vec![1, 1, 1, 1], vec![255.0]).unwrap();
        let pred = model.predict(&batch).unwrap();
        assert_eq!(pred.logits.data(), &[1.0, 0.0]);
    }

    #[test]
    fn from_parts_rejects_wrong_names_shapes_and_nonfinite() {
        let config = tiny_config(Family::Mlp);
        let good = build_classifier::<f32>(&config, 0).unwrap();
        let mut params: Vec<(String, Tensor<f32>)> = good.params().to_vec();
        params.swap(0, 1);
        let err = Classifier::from_parts(config.clone(), PreprocessSpec::default(), None, params);
        assert!(matches!(err, Err(ZooError::Config { .. })));

        let mut params: Vec<(String, Tensor<f32>)> = good.params().to_vec();
        params[0].1 = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = Classifier::from_parts(config.clone(), PreprocessSpec::default(), None, params);
        assert!(matches!(err, Err(ZooError::Config { .. })));

        let params: Vec<(String, Tensor<f32>)> =
            good.params()[..2].to_vec();
        let err = Classifier::from_parts(config, PreprocessSpec::default(), None, params);
        assert!(matches!(err, Err(ZooError::Config { .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut vit = tiny_config(Family::TinyVit);
        vit.patch_size = 3;
        assert!(vit.validate().is_err(), "8x8 is not divisible by 3");
        let mut vit = tiny_config(Family::TinyVit);
        vit.heads = 3;
        assert!(vit.validate().is_err(), "width 8 not divisible by 3 heads");
        let mut cnn = tiny_config(Family::SmallCnnA);
        cnn.depth = 4;
        assert!(cnn.validate().is_err(), "8x8 cannot pool four times");
        cnn.depth = 3;
        assert!(cnn.validate().is_ok(), "8->4->2->1 pools three times");
        let mut mlp = tiny_config(Family::Mlp);
        mlp.num_classes = 1;
        assert!(mlp.validate().is_err());
        let bad = PreprocessSpec { offset: 0.0, scale: 0.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_counter_tracks_predictions_and_resets() {
        let config = tiny_config(Family::Mlp);
        let model = build_classifier::<f32>(&config, 0).unwrap();
        assert_eq!(model.forward_count(), 0);
        let batch = pixel_batch::<f32>(config.input, 2, 5);
        model.predict(&batch).unwrap();
        model.predict(&batch).unwrap();
        assert_eq!(model.forward_count(), 2);
        let fork = model.clone();
        assert_eq!(fork.forward_count(), 2);
        model.reset_forward_count();
        assert_eq!(model.forward_count(), 0);
        assert_eq!(fork.forward_count(), 2, "clones keep an independent counter");
    }

    #[test]
    fn compensated_rescale_by_two_leaves_logits_bit_identical() {
        for family in Family::ALL {
            let config = tiny_config(family);
            let model = build_classifier::<f32>(&config, 9).unwrap();
            let batch = pixel_batch::<f32>(config.input, 3, 21);
            let before = model.predict(&batch).unwrap();
            let mut scaled = model.clone();
            scaled.compensated_rescale(2.0).unwrap();
            assert_eq!(scaled.preprocess.scale, 255.0);
            let after = scaled.predict(&batch).unwrap();
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&before.logits), bits(&after.logits), "{family} logits moved");
        }
    }

    #[test]
    fn convert_round_trips_through_f64() {
        let config = tiny_config(Family::SmallCnnA);
        let model = build_classifier::<f32>(&config, 4).unwrap();
        let twice = model.convert::<f64>().convert::<f32>();
        for ((_, a), (_, b)) in model.params().iter().zip(twice.params()) {
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn tiny_vit_input_gradient_matches_finite_differences() {
        let config = tiny_config(Family::TinyVit);
        let model = build_classifier::<f64>(&config, 12).unwrap();
        let batch = pixel_batch::<f64>(config.input, 2, 40);
        let selector = ScalarSelector::Loss {
            labels: vec![0, 2],
            loss: crate::gradcore::LossKind::SoftmaxXent,
        };
        let analytic = input_gradient(&model, &batch, &selector).unwrap();
        let fd = finite_difference_oracle(&model, &batch, &selector, 1e-5).unwrap();
        for (a, f) in analytic.data().iter().zip(fd.data()) {
            let err = (a - f).abs();
            assert!(
                err <= 1e-4 * a.abs().max(f.abs()) || err <= 1e-7,
                "analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn residual_cnn_input_gradient_matches_finite_differences() {
        let config = tiny_config(Family::SmallCnnBResidual);
        let model = build_classifier::<f64>(&config, 5).unwrap();
        let batch = pixel_batch::<f64>(config.input, 1, 33);
        let selector = ScalarSelector::ClassLogit { classes: vec![1] };
        let analytic = input_gradient(&model, &batch, &selector).unwrap();
        let fd = finite_difference_oracle(&model, &batch, &selector, 1e-5).unwrap();
        for (a, f) in analytic.data().iter().zip(fd.data()) {
            let err = (a - f).abs();
            assert!(
                err <= 1e-4 * a.abs().max(f.abs()) || err <= 1e-7,
                "analytic {a} vs fd {f}"
            );
        }
    }
}
