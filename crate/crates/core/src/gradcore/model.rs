//! Model-facing differentiation API: trace a classifier onto a tape, reduce
//! to a scalar (loss or class score), and pull gradients back to parameters
//! and/or raw pixels.

use super::tape::{Gradients, Tape};
use super::{GradError, NodeId, Real, Tensor};

/// Anything that can record its forward computation on a tape. Implemented by
/// the model zoo; test models implement it directly.
pub trait DifferentiableModel<E: Real> {
    fn num_classes(&self) -> usize;

    /// Shape of a single input, e.g. `[h, w, c]`.
    fn input_dims(&self) -> Vec<usize>;

    /// Records the forward pass for a raw-pixel batch of shape
    /// `[n, ..input_dims]` and returns handles into the tape.
    fn trace(
        &self,
        tape: &mut Tape<E>,
        batch: &Tensor<E>,
        input_requires_grad: bool,
        params_require_grad: bool,
    ) -> Result<TraceRefs, GradError>;
}

/// Tape handles produced by one trace: the pixel leaf, the logits, and every
/// parameter leaf in declaration order.
pub struct TraceRefs {
    pub input: NodeId,
    pub logits: NodeId,
    pub params: Vec<(String, NodeId)>,
}

/// Loss used when the scalar is a training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxXent,
}

/// Which scalar the gradient is taken of: the batch loss L(f(x), y), a
/// label-indexed logit f_y(x), or the label-indexed softmax probability.
/// Logit/prob selectors sum over the batch; per-image gradients stay exact
/// because no primitive mixes images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScalarSelector {
    Loss { labels: Vec<usize>, loss: LossKind },
    ClassLogit { classes: Vec<usize> },
    ClassProb { classes: Vec<usize> },
}

fn apply_selector<E: Real>(
    tape: &mut Tape<E>,
    logits: NodeId,
    selector: &ScalarSelector,
) -> Result<NodeId, GradError> {
    match selector {
        ScalarSelector::Loss { labels, loss: LossKind::SoftmaxXent } => {
            tape.softmax_xent(logits, labels)
        }
        ScalarSelector::ClassLogit { classes } => tape.select_class_sum(logits, classes),
        ScalarSelector::ClassProb { classes } => {
            let probs = tape.softmax_rows(logits)?;
            tape.select_class_sum(probs, classes)
        }
    }
}

/// A scalar loss still attached to its tape; consuming it yields gradients.
pub struct LossGraph<E: Real> {
    tape: Tape<E>,
    root: NodeId,
    refs: TraceRefs,
    loss: E,
}

impl<E: Real> LossGraph<E> {
    pub fn loss(&self) -> E {
        self.loss
    }

    pub fn logits(&self) -> &[E] {
        self.tape.value(self.refs.logits)
    }

    /// One reverse pass returning both parameter gradients (zeros for any
    /// parameter the loss never touched) and, if requested at trace time,
    /// the raw-pixel gradient.
    pub fn backward_all(self) -> Result<LossBackward<E>, GradError> {
        let param_meta: Vec<(String, NodeId, Vec<usize>)> = self
            .refs
            .params
            .iter()
            .map(|(name, id)| (name.clone(), NodeId(id.0), self.tape.shape(*id).to_vec()))
            .collect();
        let input_shape = self.tape.shape(self.refs.input).to_vec();
        let input_id = self.refs.input;

        let mut grads: Gradients<E> = self.tape.backward(self.root)?;

        let mut param_grads = Vec::with_capacity(param_meta.len());
        for (name, id, shape) in param_meta {
            let numel: usize = shape.iter().product();
            let g = grads.take(id).unwrap_or_else(|| vec![E::zero(); numel]);
            param_grads.push((name, Tensor::new(shape, g)?));
        }
        let input_grad = match grads.take(input_id) {
            Some(g) => Some(Tensor::new(input_shape, g)?),
            None => None,
        };
        Ok(LossBackward { param_grads, input_grad })
    }
}

pub struct LossBackward<E: Real> {
    pub param_grads: Vec<(String, Tensor<E>)>,
    pub input_grad: Option<Tensor<E>>,
}

/// Forward pass to a scalar training loss, keeping the tape for backward.
pub fn forward_scalar_loss<E: Real, M: DifferentiableModel<E> + ?Sized>(
    model: &M,
    batch: &Tensor<E>,
    labels: &[usize],
    loss: LossKind,
    input_requires_grad: bool,
) -> Result<LossGraph<E>, GradError> {
    check_batch(model, batch, Some(labels))?;
    let mut tape = Tape::new();
    let refs = model.trace(&mut tape, batch, input_requires_grad, true)?;
    let selector = ScalarSelector::Loss { labels: labels.to_vec(), loss };
    let root = apply_selector(&mut tape, refs.logits, &selector)?;
    let loss_value = tape.value(root)[0];
    Ok(LossGraph { tape, root, refs, loss: loss_value })
}

/// Parameter gradients of the batch loss (the Eq. "g_θ ← ∇_θ L" direction).
pub fn backward_params<E: Real>(
    graph: LossGraph<E>,
) -> Result<Vec<(String, Tensor<E>)>, GradError> {
    Ok(graph.backward_all()?.param_grads)
}

/// Gradient of the selected scalar with respect to raw pixels. Parameters are
/// frozen, so backward skips all weight-gradient work.
pub fn input_gradient<E: Real, M: DifferentiableModel<E> + ?Sized>(
    model: &M,
    batch: &Tensor<E>,
    selector: &ScalarSelector,
) -> Result<Tensor<E>, GradError> {
    check_batch(model, batch, selector_labels(selector))?;
    let mut tape = Tape::new();
    let refs = model.trace(&mut tape, batch, true, false)?;
    let root = apply_selector(&mut tape, refs.logits, selector)?;
    let input_shape = tape.shape(refs.input).to_vec();
    let input_id = refs.input;
    let mut grads = tape.backward(root)?;
    let g = grads
        .take(input_id)
        .unwrap_or_else(|| vec![E::zero(); input_shape.iter().product()]);
    Tensor::new(input_shape, g)
}

/// Evaluates the selected scalar without recording gradients.
pub fn eval_scalar<E: Real, M: DifferentiableModel<E> + ?Sized>(
    model: &M,
    batch: &Tensor<E>,
    selector: &ScalarSelector,
) -> Result<E, GradError> {
    check_batch(model, batch, selector_labels(selector))?;
    let mut tape = Tape::new();
    let refs = model.trace(&mut tape, batch, false, false)?;
    let root = apply_selector(&mut tape, refs.logits, selector)?;
    Ok(tape.value(root)[0])
}

/// Central finite differences (S(x+h·e_i) − S(x−h·e_i)) / (2h) of the selected
/// scalar, coordinate by coordinate. Quadratic cost in input size; this is a
/// test oracle, not a production path.
pub fn finite_difference_oracle<E: Real, M: DifferentiableModel<E> + ?Sized>(
    model: &M,
    batch: &Tensor<E>,
    selector: &ScalarSelector,
    h: f64,
) -> Result<Tensor<E>, GradError> {
    if h <= 0.0 {
        return Err(GradError::InvalidArg {
            op: "finite_difference_oracle",
            detail: format!("step h must be positive, got {}", h),
        });
    }
    let hv = super::cast::<E>(h);
    let two_h = super::cast::<E>(2.0 * h);
    let mut grad = vec![E::zero(); batch.numel()];
    let mut work = batch.data().to_vec();
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + hv;
        let plus = {
            let t = Tensor::new(batch.shape().to_vec(), work.clone())?;
            eval_scalar(model, &t, selector)?
        };
        work[i] = orig - hv;
        let minus = {
            let t = Tensor::new(batch.shape().to_vec(), work.clone())?;
            eval_scalar(model, &t, selector)?
        };
        work[i] = orig;
        grad[i] = (plus - minus) / two_h;
    }
    Tensor::new(batch.shape().to_vec(), grad)
}

fn selector_labels(selector: &ScalarSelector) -> Option<&[usize]> {
    match selector {
        ScalarSelector::Loss { labels, .. } => Some(labels),
        ScalarSelector::ClassLogit { classes } | ScalarSelector::ClassProb { classes } => {
            Some(classes)
        }
    }
}

fn check_batch<E: Real, M: DifferentiableModel<E> + ?Sized>(
    model: &M,
    batch: &Tensor<E>,
    labels: Option<&[usize]>,
) -> Result<(), GradError> {
    let dims = model.input_dims();
    let shape = batch.shape();
    if shape.is_empty() || shape[1..] != dims[..] {
        return Err(GradError::ShapeMismatch {
            op: "trace",
            detail: format!("batch {:?} vs input dims {:?}", shape, dims),
        });
    }
    if let Some(labels) = labels {
        if labels.len() != shape[0] {
            return Err(GradError::ShapeMismatch {
                op: "trace",
                detail: format!("{} labels for batch of {}", labels.len(), shape[0]),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes()) {
            return Err(GradError::InvalidArg {
                op: "trace",
                detail: format!("label {} out of range", bad),
            });
        }
    }
    Ok(())
}
