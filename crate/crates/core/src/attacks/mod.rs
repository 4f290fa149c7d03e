//! The ℓ∞ attack suite: ball projection, PGD, integrated gradients, MIG, and
//! the shared-attribution multi-epsilon MIG variant.
//!
//! Epsilons are pixel units on the raw [0,255] scale. Every attack walks each
//! image independently in index order, so results never depend on batch
//! composition or any parallel schedule, and projection always intersects the
//! epsilon ball with the valid pixel range — adversarial images must remain
//! images.

mod artifact;

pub use artifact::{load_adversarial_set, save_adversarial_set, AdversarialSet};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::gradcore::{
    cast, input_gradient, DifferentiableModel, GradError, LossKind, Real, ScalarSelector, Tape,
    Tensor,
};

/// Errors from attack configuration or execution.
#[derive(Debug)]
pub enum AttackError {
    /// Arguments violate a precondition (bad epsilon list, shape mismatch…).
    Invalid { detail: String },
    /// A gradient or forward value left the finite range where the contract
    /// demands a hard failure (standalone attribution, success evaluation).
    NonFinite { image: usize, detail: String },
    /// An artifact file is malformed.
    Format { detail: String },
    Io(std::io::Error),
    Grad(GradError),
}

impl fmt::Display for AttackError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackError::Invalid { detail } => write!(f, "invalid attack request: {detail}"),
            AttackError::NonFinite { image, detail } => {
                write!(f, "non-finite computation on image {image}: {detail}")
            }
            AttackError::Format { detail } => write!(f, "malformed adversarial set: {detail}"),
            AttackError::Io(e) => write!(f, "adversarial set io: {e}"),
            AttackError::Grad(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AttackError {}

impl From<GradError> for AttackError {
    fn from(e: GradError) -> Self {
        AttackError::Grad(e)
    }
}

impl From<std::io::Error> for AttackError {
    fn from(e: std::io::Error) -> Self {
        AttackError::Io(e)
    }
}

/// The reference input that integrated gradients accumulates from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineSpec {
    /// The all-zero "black image".
    Black,
    /// Every pixel set to the same value in [0,255].
    Uniform { value: f64 },
}

impl Default for BaselineSpec {
    fn default() -> Self {
        BaselineSpec::Black
    }
}

impl BaselineSpec {
    pub(crate) fn materialize<E: Real>(&self, len: usize) -> Vec<E> {
        match self {
            BaselineSpec::Black => vec![E::zero(); len],
            BaselineSpec::Uniform { value } => vec![cast::<E>(*value); len],
        }
    }
}

/// Whether updates move along +sign (raising the scalar, as in the
/// multi-epsilon algorithm) or against it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateSign {
    Ascend,
    Descend,
}

impl Default for UpdateSign {
    fn default() -> Self {
        UpdateSign::Ascend
    }
}

/// The per-class scalar that integrated gradients differentiates. Logit is
/// the default: it keeps gradients alive at confident predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributionScalar {
    Logit,
    Prob,
}

impl Default for AttributionScalar {
    fn default() -> Self {
        AttributionScalar::Logit
    }
}

/// The PGD objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PgdLoss {
    CrossEntropy,
}

impl Default for PgdLoss {
    fn default() -> Self {
        PgdLoss::CrossEntropy
    }
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

/// Shared attack configuration. Budgets are pixel units; the step size
/// defaults to ε/T per epsilon when unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// Strictly positive, strictly ascending pixel-unit budgets.
    pub epsilons: Vec<f64>,
    /// Iteration count T.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Step size α in pixel units; None means ε/T (required for multi-epsilon
    /// runs, where each budget derives its own α).
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Momentum factor μ.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Integration resolution s for the attribution sum.
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    #[serde(default)]
    pub baseline: BaselineSpec,
    #[serde(default)]
    pub update_sign: UpdateSign,
    #[serde(default)]
    pub loss: PgdLoss,
    #[serde(default)]
    pub scalar: AttributionScalar,
}

impl AttackSpec {
    /// PGD at a single budget with step size ε/T.
    pub fn pgd(epsilon: f64, steps: usize) -> AttackSpec {
        AttackSpec {
            epsilons: vec![epsilon],
            steps,
            step_size: None,
            momentum: default_momentum(),
            ig_steps: default_ig_steps(),
            baseline: BaselineSpec::default(),
            update_sign: UpdateSign::default(),
            loss: PgdLoss::default(),
            scalar: AttributionScalar::default(),
        }
    }

    /// MIG at a single budget with the defaults μ=1, s=20.
    pub fn mig(epsilon: f64, steps: usize) -> AttackSpec {
        AttackSpec::mig_multi(vec![epsilon], steps)
    }

    /// Multi-epsilon MIG; budgets must ascend, each gets α = ε/T.
    pub fn mig_multi(epsilons: Vec<f64>, steps: usize) -> AttackSpec {
        AttackSpec { epsilons, steps, ..AttackSpec::pgd(0.0, steps) }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let fail = |detail: String| Err(AttackError::Invalid { detail });
        if self.epsilons.is_empty() {
            return fail("no epsilon budgets given".to_string());
        }
        for pair in self.epsilons.windows(2) {
            if !(pair[0] < pair[1]) {
                return fail(format!("epsilons must strictly ascend, got {:?}", self.epsilons));
            }
        }
        if !self.epsilons.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return fail(format!("epsilons must be positive and finite, got {:?}", self.epsilons));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                return fail(format!("step size must be positive, got {a}"));
            }
            if self.epsilons.len() > 1 {
                return fail(
                    "multi-epsilon runs derive per-budget step sizes; leave step_size unset"
                        .to_string(),
                );
            }
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return fail(format!("momentum must be nonnegative, got {}", self.momentum));
        }
        if self.ig_steps == 0 {
            return fail("ig_steps must be at least 1".to_string());
        }
        if let BaselineSpec::Uniform { value } = self.baseline {
            if !(0.0..=255.0).contains(&value) {
                return fail(format!("uniform baseline {value} outside [0,255]"));
            }
        }
        Ok(())
    }

    /// Effective per-epsilon step sizes: the explicit α if set, else ε/T.
    pub fn alphas(&self) -> Vec<f64> {
        let t = self.steps.max(1) as f64;
        self.epsilons
            .iter()
            .map(|&e| self.step_size.unwrap_or(e / t))
            .collect()
    }
}

/// One adversarial batch at one budget.
#[derive(Debug, Clone)]
pub struct EpsilonSlice<E: Real> {
    pub epsilon: f64,
    /// [n, h, w, c] adversarial images, all inside the ball and [0,255].
    pub images: Tensor<E>,
    /// Per image: does the attacked model now predict something ≠ label?
    pub success: Vec<bool>,
    /// Per image achieved ∞-distance from the clean input, pixel units.
    pub linf: Vec<f64>,
}

/// Attack results, one slice per requested epsilon (ascending), plus
/// per-image diagnostics for aborted or degenerate steps.
#[derive(Debug, Clone)]
pub struct AttackOutput<E: Real> {
    pub per_epsilon: Vec<EpsilonSlice<E>>,
    pub diagnostics: Vec<String>,
}

impl<E: Real> AttackOutput<E> {
    /// The highest-epsilon slice.
    pub fn top(&self) -> &EpsilonSlice<E> {
        self.per_epsilon.last().expect("outputs always carry at least one epsilon")
    }
}

fn to_f64<E: Real>(v: E) -> f64 {
    v.to_f64().expect("Real is a machine float")
}

/// Mathematical sign: -1, 0, or +1. (`Float::signum` maps +0.0 to +1.0,
/// which would turn a dead gradient into a step.)
pub(crate) fn sgn<E: Real>(v: E) -> E {
    if v > E::zero() {
        E::one()
    } else if v < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}

fn clamp_into_ball<E: Real>(x0: &[E], x: &mut [E], eps: E) {
    let lo_om = E::zero();
    let hi_om = cast::<E>(255.0);
    for (v, &c) in x.iter_mut().zip(x0) {
        let lo = (c - eps).max(lo_om);
        let hi = (c + eps).min(hi_om);
        *v = (*v).min(hi).max(lo);
    }
}

/// Projects `x` onto the ℓ∞ ball of radius `epsilon` around `x0`,
/// intersected with the valid pixel range [0,255].
pub fn project_ball<E: Real>(
    x0: &Tensor<E>,
    x: &Tensor<E>,
    epsilon: f64,
) -> Result<Tensor<E>, AttackError> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(AttackError::Invalid { detail: format!("negative epsilon {epsilon}") });
    }
    if x0.shape() != x.shape() {
        return Err(AttackError::Invalid {
            detail: format!("center shape {:?} vs point shape {:?}", x0.shape(), x.shape()),
        });
    }
    let hi = cast::<E>(255.0);
    if x0.data().iter().any(|&v| !(v >= E::zero() && v <= hi)) {
        return Err(AttackError::Invalid {
            detail: "ball center has pixels outside [0,255]".to_string(),
        });
    }
    let mut out = x.data().to_vec();
    clamp_into_ball(x0.data(), &mut out, cast::<E>(epsilon));
    Ok(Tensor::new(x.shape().to_vec(), out).expect("projection preserves shape"))
}

fn check_attack_inputs<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    x: &Tensor<E>,
    y: &[usize],
) -> Result<[usize; 4], AttackError> {
    let dims = model.input_dims();
    let shape = x.shape();
    if shape.len() != 4 || shape[1..] != dims[..] || shape[0] == 0 {
        return Err(AttackError::Invalid {
            detail: format!("batch shape {shape:?}, model expects [n>0, {dims:?}]"),
        });
    }
    if shape[0] != y.len() {
        return Err(AttackError::Invalid {
            detail: format!("{} images but {} labels", shape[0], y.len()),
        });
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= model.num_classes()) {
        return Err(AttackError::Invalid {
            detail: format!("label {bad} out of range for {} classes", model.num_classes()),
        });
    }
    let hi = cast::<E>(255.0);
    if x.data().iter().any(|&v| !(v >= E::zero() && v <= hi)) {
        return Err(AttackError::Invalid {
            detail: "clean batch has pixels outside [0,255]".to_string(),
        });
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

/// Argmax-of-logits predictions (first index on ties).
fn predictions<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    batch: &Tensor<E>,
) -> Result<Vec<usize>, AttackError> {
    let mut tape = Tape::new();
    let refs = model.trace(&mut tape, batch, false, false)?;
    let logits = tape.value(refs.logits);
    let classes = model.num_classes();
    let n = batch.shape()[0];
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let row = &logits[r * classes..(r + 1) * classes];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// How a single gradient evaluation ended.
enum GradStep<E: Real> {
    Ok(Vec<E>),
    /// Gradient or forward left the finite range; the image freezes here.
    Aborted(String),
}

fn input_grad_single<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    pixels: &[E],
    dims: [usize; 3],
    selector: &ScalarSelector,
) -> Result<GradStep<E>, AttackError> {
    let batch = Tensor::new(vec![1, dims[0], dims[1], dims[2]], pixels.to_vec())
        .expect("single-image batch is shape-consistent");
    match input_gradient(model, &batch, selector) {
        Ok(g) => Ok(GradStep::Ok(g.into_data())),
        Err(GradError::NonFinite { op, pass }) => {
            Ok(GradStep::Aborted(format!("non-finite value in {op} during {pass}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn scalar_selector(kind: AttributionScalar, class: usize) -> ScalarSelector {
    match kind {
        AttributionScalar::Logit => ScalarSelector::ClassLogit { classes: vec![class] },
        AttributionScalar::Prob => ScalarSelector::ClassProb { classes: vec![class] },
    }
}

/// The Eq. 2 attribution sum for one image (flat pixels), hard-failing on
/// non-finite gradients.
fn ig_single<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    image: usize,
    x: &[E],
    baseline: &[E],
    dims: [usize; 3],
    class: usize,
    s: usize,
    kind: AttributionScalar,
) -> Result<GradStep<E>, AttackError> {
    let selector = scalar_selector(kind, class);
    let mut acc = vec![E::zero(); x.len()];
    let inv_s = cast::<E>(1.0 / s as f64);
    for k in 1..=s {
        let frac = cast::<E>(k as f64 / s as f64);
        let point: Vec<E> =
            x.iter().zip(baseline).map(|(&xi, &bi)| bi + frac * (xi - bi)).collect();
        match input_grad_single(model, &point, dims, &selector)? {
            GradStep::Ok(g) => {
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a = *a + gi;
                }
            }
            GradStep::Aborted(detail) => {
                return Ok(GradStep::Aborted(format!(
                    "integration point {k}/{s} of image {image}: {detail}"
                )))
            }
        }
    }
    for ((a, &xi), &bi) in acc.iter_mut().zip(x).zip(baseline) {
        *a = (xi - bi) * *a * inv_s;
    }
    Ok(GradStep::Ok(acc))
}

/// Integrated gradients (Eq. 2) for a batch against a shared baseline image:
/// per pixel, `(x_i - b_i) · (1/s) · Σ_{k=1..s} ∂f_y(b + (k/s)(x - b))/∂x_i`.
pub fn integrated_gradients<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    x: &Tensor<E>,
    y: &[usize],
    baseline: &Tensor<E>,
    s: usize,
) -> Result<Tensor<E>, AttackError> {
    integrated_gradients_for(model, x, y, baseline, s, AttributionScalar::default())
}

/// `integrated_gradients` with an explicit scalar selector.
pub fn integrated_gradients_for<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    x: &Tensor<E>,
    y: &[usize],
    baseline: &Tensor<E>,
    s: usize,
    kind: AttributionScalar,
) -> Result<Tensor<E>, AttackError> {
    let [n, h, w, c] = check_attack_inputs(model, x, y)?;
    if s == 0 {
        return Err(AttackError::Invalid { detail: "s must be at least 1".to_string() });
    }
    if baseline.shape() != [h, w, c] {
        return Err(AttackError::Invalid {
            detail: format!("baseline shape {:?}, expected {:?}", baseline.shape(), [h, w, c]),
        });
    }
    let px = h * w * c;
    let mut out = Vec::with_capacity(n * px);
    for i in 0..n {
        let image = &x.data()[i * px..(i + 1) * px];
        match ig_single(model, i, image, baseline.data(), [h, w, c], y[i], s, kind)? {
            GradStep::Ok(attr) => out.extend(attr),
            GradStep::Aborted(detail) => {
                return Err(AttackError::NonFinite { image: i, detail })
            }
        }
    }
    Ok(Tensor::new(vec![n, h, w, c], out).expect("attribution batch is shape-consistent"))
}

fn assemble_output<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    clean: &Tensor<E>,
    y: &[usize],
    epsilons: &[f64],
    trajectories: Vec<Vec<E>>,
    diagnostics: Vec<String>,
) -> Result<AttackOutput<E>, AttackError> {
    let shape = clean.shape().to_vec();
    let n = shape[0];
    let px: usize = shape[1..].iter().product();
    let mut per_epsilon = Vec::with_capacity(epsilons.len());
    for (&epsilon, data) in epsilons.iter().zip(trajectories) {
        let images = Tensor::new(shape.clone(), data).expect("trajectory is shape-consistent");
        let predicted = predictions(model, &images)?;
        let success: Vec<bool> = predicted.iter().zip(y).map(|(p, l)| p != l).collect();
        let linf: Vec<f64> = (0..n)
            .map(|i| {
                images.data()[i * px..(i + 1) * px]
                    .iter()
                    .zip(&clean.data()[i * px..(i + 1) * px])
                    .map(|(&a, &b)| (to_f64(a) - to_f64(b)).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        per_epsilon.push(EpsilonSlice { epsilon, images, success, linf });
    }
    Ok(AttackOutput { per_epsilon, diagnostics })
}

/// PGD (Eq. 1): `x_{t+1} = Π(x_t + α·sign(∇_x L(f(x_t), y)))`, started from
/// the clean input with no random initialization. Requires a single-epsilon
/// spec. A non-finite gradient freezes that image at its last iterate and
/// records a diagnostic.
pub fn pgd<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    x: &Tensor<E>,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<AttackOutput<E>, AttackError> {
    spec.validate()?;
    if spec.epsilons.len() != 1 {
        return Err(AttackError::Invalid {
            detail: format!("pgd takes exactly one epsilon, got {:?}", spec.epsilons),
        });
    }
    let [n, h, w, c] = check_attack_inputs(model, x, y)?;
    let epsilon = cast::<E>(spec.epsilons[0]);
    let alpha = cast::<E>(spec.alphas()[0]);
    let dir = match spec.update_sign {
        UpdateSign::Ascend => E::one(),
        UpdateSign::Descend => -E::one(),
    };
    let px = h * w * c;
    let mut diagnostics = Vec::new();
    let mut out = Vec::with_capacity(n * px);
    for i in 0..n {
        let clean = &x.data()[i * px..(i + 1) * px];
        let mut adv = clean.to_vec();
        let PgdLoss::CrossEntropy = spec.loss;
        let selector =
            ScalarSelector::Loss { labels: vec![y[i]], loss: LossKind::SoftmaxXent };
        for t in 1..=spec.steps {
            match input_grad_single(model, &adv, [h, w, c], &selector)? {
                GradStep::Ok(g) => {
                    for (v, gi) in adv.iter_mut().zip(g) {
                        *v = *v + dir * alpha * sgn(gi);
                    }
                    clamp_into_ball(clean, &mut adv, epsilon);
                }
                GradStep::Aborted(detail) => {
                    diagnostics.push(format!(
                        "image {i}: {detail} at iteration {t}; trajectory frozen"
                    ));
                    break;
                }
            }
        }
        out.extend(adv);
    }
    assemble_output(model, x, y, &spec.epsilons, vec![out], diagnostics)
}

/// MIG at a single budget: delegates to the multi-epsilon core with one
/// trajectory, so the two paths are arithmetic-identical by construction.
pub fn mig<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    x: &Tensor<E>,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<AttackOutput<E>, AttackError> {
    spec.validate()?;
    if spec.epsilons.len() != 1 {
        return Err(AttackError::Invalid {
            detail: format!("mig takes exactly one epsilon, got {:?}", spec.epsilons),
        });
    }
    mig_core(model, x, y, spec)
}

/// Multi-epsilon MIG: one attribution per iteration, computed on the
/// highest-epsilon trajectory, shared across every budget's own momentum and
/// clip radius. The top-epsilon output is identical to a standalone `mig`
/// run at that budget.
pub fn mig_multi_epsilon<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    x: &Tensor<E>,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<AttackOutput<E>, AttackError> {
    spec.validate()?;
    mig_core(model, x, y, spec)
}

fn mig_core<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    x: &Tensor<E>,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<AttackOutput<E>, AttackError> {
    let [n, h, w, c] = check_attack_inputs(model, x, y)?;
    let px = h * w * c;
    let n_eps = spec.epsilons.len();
    let epsilons: Vec<E> = spec.epsilons.iter().map(|&e| cast::<E>(e)).collect();
    let alphas: Vec<E> = spec.alphas().iter().map(|&a| cast::<E>(a)).collect();
    let mu = cast::<E>(spec.momentum);
    let dir = match spec.update_sign {
        UpdateSign::Ascend => E::one(),
        UpdateSign::Descend => -E::one(),
    };
    let baseline: Vec<E> = spec.baseline.materialize(px);

    let mut diagnostics = Vec::new();
    let mut trajectories: Vec<Vec<E>> = vec![Vec::with_capacity(n * px); n_eps];
    for i in 0..n {
        let clean = &x.data()[i * px..(i + 1) * px];
        let mut advs: Vec<Vec<E>> = vec![clean.to_vec(); n_eps];
        let mut moms: Vec<Vec<E>> = vec![vec![E::zero(); px]; n_eps];
        'iterations: for t in 1..=spec.steps {
            let delta = match ig_single(
                model,
                i,
                &advs[n_eps - 1],
                &baseline,
                [h, w, c],
                y[i],
                spec.ig_steps,
                spec.scalar,
            )? {
                GradStep::Ok(d) => d,
                GradStep::Aborted(detail) => {
                    diagnostics.push(format!(
                        "image {i}: {detail} at iteration {t}; trajectories frozen"
                    ));
                    break 'iterations;
                }
            };
            let mut l1 = E::zero();
            for &d in &delta {
                l1 = l1 + d.abs();
            }
            if l1 == E::zero() {
                diagnostics.push(format!(
                    "image {i}: zero attribution at iteration {t}; direction treated as zero"
                ));
            }
            for e in 0..n_eps {
                let g = &mut moms[e];
                for (gj, &dj) in g.iter_mut().zip(&delta) {
                    let dirn = if l1 > E::zero() { dj / l1 } else { E::zero() };
                    *gj = mu * *gj + dirn;
                }
                let adv = &mut advs[e];
                for (v, gj) in adv.iter_mut().zip(g.iter()) {
                    *v = *v + dir * alphas[e] * sgn(*gj);
                }
                clamp_into_ball(clean, adv, epsilons[e]);
            }
        }
        for (slot, adv) in trajectories.iter_mut().zip(advs) {
            slot.extend(adv);
        }
    }
    assemble_output(model, x, y, &spec.epsilons, trajectories, diagnostics)
}

/// Per-class tally of correct predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassOutcome {
    pub class: usize,
    pub total: usize,
    pub correct: usize,
}

/// Accuracy and attack-success fractions for a labeled (adversarial) batch.
#[derive(Debug, Clone, Serialize)]
pub struct SuccessReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub attack_success: f64,
    pub per_class: Vec<ClassOutcome>,
}

/// Evaluates a batch against its labels: accuracy, attack success
/// (1 − accuracy), and a per-class breakdown.
pub fn success_rate<E: Real, M: DifferentiableModel<E>>(
    model: &M,
    images: &Tensor<E>,
    labels: &[usize],
) -> Result<SuccessReport, AttackError> {
    let [n, ..] = check_attack_inputs(model, images, labels)?;
    let predicted = predictions(model, images)?;
    let mut per_class: Vec<ClassOutcome> = (0..model.num_classes())
        .map(|class| ClassOutcome { class, total: 0, correct: 0 })
        .collect();
    let mut correct = 0;
    for (p, &l) in predicted.iter().zip(labels) {
        per_class[l].total += 1;
        if *p == l {
            per_class[l].correct += 1;
            correct += 1;
        }
    }
    let accuracy = correct as f64 / n as f64;
    Ok(SuccessReport {
        total: n,
        correct,
        accuracy,
        attack_success: 1.0 - accuracy,
        per_class,
    })
}
