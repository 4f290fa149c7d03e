//! Gradient-check oracles: every differentiable primitive is compared against
//! central finite differences in 64-bit precision, plus linearity and
//! determinism properties of the backward pass.

use advlab_core::gradcore::{
    backward_params, eval_scalar, finite_difference_oracle, forward_scalar_loss, input_gradient,
    DifferentiableModel, GradError, LossKind, NodeId, ScalarSelector, Tape, Tensor, TraceRefs,
};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-5;
const KINK_GUARD: f64 = 1e-3; // reject cases with a relu/pool kink this close
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;

/// Builds the graph twice per coordinate and compares the analytic gradient of
/// every leaf against (S(v+h·e_i) − S(v−h·e_i)) / 2h.
fn run_fd_case<F>(flat: &[f64], build: F) -> Result<(), TestCaseError>
where
    F: Fn(&mut Tape<f64>, &[f64], bool) -> (Vec<NodeId>, NodeId),
{
    let mut tape = Tape::new();
    let (leaves, root) = build(&mut tape, flat, true);
    prop_assume!(tape.kink_margin() > KINK_GUARD);
    let numels: Vec<usize> = leaves.iter().map(|&l| tape.value(l).len()).collect();
    let grads = tape.backward(root).expect("backward");
    let mut analytic = Vec::with_capacity(flat.len());
    for (leaf, numel) in leaves.iter().zip(&numels) {
        match grads.get(*leaf) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(*numel)),
        }
    }
    prop_assert_eq!(analytic.len(), flat.len());

    let eval = |v: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let (_, root) = build(&mut tape, v, false);
        tape.value(root)[0]
    };
    let mut work = flat.to_vec();
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + FD_H;
        let plus = eval(&work);
        work[i] = orig - FD_H;
        let minus = eval(&work);
        work[i] = orig;
        let fd = (plus - minus) / (2.0 * FD_H);
        let a = analytic[i];
        let err = (a - fd).abs();
        prop_assert!(
            err <= REL_TOL * a.abs().max(fd.abs()) || err <= ABS_FLOOR,
            "coordinate {}: analytic {} vs finite difference {} (err {})",
            i,
            a,
            fd,
            err
        );
    }
    Ok(())
}

/// Random-cotangent reduction so checks probe more than an all-ones pullback.
fn weighted_sum(tape: &mut Tape<f64>, x: NodeId, w: &[f64]) -> NodeId {
    let shape = tape.shape(x).to_vec();
    let wleaf = tape.leaf(w.to_vec(), shape, false).unwrap();
    let prod = tape.mul(x, wleaf).unwrap();
    tape.sum_all(prod).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn prop_elementwise_chain_fd(
        data in vec(-2.0f64..2.0, 1..24),
        cot in vec(-1.0f64..1.0, 24),
    ) {
        let n = data.len();
        let w = cot[..n].to_vec();
        run_fd_case(&data, |tape, flat, rg| {
            let x = tape.leaf(flat.to_vec(), vec![n], rg).unwrap();
            let a = tape.affine(x, 1.7, 0.3).unwrap();
            let r = tape.relu(a).unwrap();
            let s = tape.add(r, x).unwrap();
            let m = tape.mul(s, s).unwrap();
            (vec![x], weighted_sum(tape, m, &w))
        })?;
    }

    #[test]
    fn prop_gelu_fd(data in vec(-3.0f64..3.0, 1..16), cot in vec(-1.0f64..1.0, 16)) {
        let n = data.len();
        let w = cot[..n].to_vec();
        run_fd_case(&data, |tape, flat, rg| {
            let x = tape.leaf(flat.to_vec(), vec![n], rg).unwrap();
            let g = tape.gelu(x).unwrap();
            (vec![x], weighted_sum(tape, g, &w))
        })?;
    }

    #[test]
    fn prop_add_bias_fd(
        (nd, flat, cot) in (1usize..4, 1usize..6).prop_flat_map(|(n, d)| (
            Just((n, d)),
            vec(-2.0f64..2.0, n * d + d),
            vec(-1.0f64..1.0, n * d),
        )),
    ) {
        let (n, d) = nd;
        run_fd_case(&flat, |tape, flat, rg| {
            let a = tape.leaf(flat[..n * d].to_vec(), vec![n, d], rg).unwrap();
            let b = tape.leaf(flat[n * d..].to_vec(), vec![d], rg).unwrap();
            let s = tape.add_bias(a, b).unwrap();
            (vec![a, b], weighted_sum(tape, s, &cot))
        })?;
    }

    #[test]
    fn prop_matmul_fd(
        (dims, flat, cot) in (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(m, k, n)| (
            Just((m, k, n)),
            vec(-2.0f64..2.0, m * k + k * n),
            vec(-1.0f64..1.0, m * n),
        )),
    ) {
        let (m, k, n) = dims;
        run_fd_case(&flat, |tape, flat, rg| {
            let a = tape.leaf(flat[..m * k].to_vec(), vec![m, k], rg).unwrap();
            let b = tape.leaf(flat[m * k..].to_vec(), vec![k, n], rg).unwrap();
            let c = tape.matmul(a, b).unwrap();
            (vec![a, b], weighted_sum(tape, c, &cot))
        })?;
    }

    #[test]
    fn prop_batmatmul_fd(
        (dims, trans_b, flat, cot) in (1usize..3, 1usize..3, 1usize..3, 1usize..3, any::<bool>())
            .prop_flat_map(|(bt, m, k, n, t)| (
                Just((bt, m, k, n)),
                Just(t),
                vec(-2.0f64..2.0, bt * m * k + bt * k * n),
                vec(-1.0f64..1.0, bt * m * n),
            )),
    ) {
        let (bt, m, k, n) = dims;
        run_fd_case(&flat, |tape, flat, rg| {
            let a = tape.leaf(flat[..bt * m * k].to_vec(), vec![bt, m, k], rg).unwrap();
            let bshape = if trans_b { vec![bt, n, k] } else { vec![bt, k, n] };
            let b = tape.leaf(flat[bt * m * k..].to_vec(), bshape, rg).unwrap();
            let c = tape.batmatmul(a, b, trans_b).unwrap();
            (vec![a, b], weighted_sum(tape, c, &cot))
        })?;
    }

    #[test]
    fn prop_conv2d_fd(
        (geom, flat, cot) in (1usize..3, 2usize..5, 2usize..5, 1usize..3, 1usize..3, 1usize..3, 0usize..2)
            .prop_flat_map(|(n, h, w, cin, cout, stride, pad)| {
                let k = 2usize.min(h).min(w);
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (w + 2 * pad - k) / stride + 1;
                (
                    Just((n, h, w, cin, cout, k, stride, pad)),
                    vec(-2.0f64..2.0, n * h * w * cin + k * k * cin * cout),
                    vec(-1.0f64..1.0, n * oh * ow * cout),
                )
            }),
    ) {
        let (n, h, w, cin, cout, k, stride, pad) = geom;
        run_fd_case(&flat, |tape, flat, rg| {
            let xlen = n * h * w * cin;
            let x = tape.leaf(flat[..xlen].to_vec(), vec![n, h, w, cin], rg).unwrap();
            let wt = tape.leaf(flat[xlen..].to_vec(), vec![k, k, cin, cout], rg).unwrap();
            let c = tape.conv2d(x, wt, stride, pad).unwrap();
            (vec![x, wt], weighted_sum(tape, c, &cot))
        })?;
    }

    #[test]
    fn prop_maxpool_fd(
        (geom, flat, cot) in (1usize..3, 2usize..6, 2usize..6, 1usize..3, 1usize..3)
            .prop_flat_map(|(n, h, w, c, stride)| {
                let size = 2usize;
                let oh = (h - size) / stride + 1;
                let ow = (w - size) / stride + 1;
                (
                    Just((n, h, w, c, size, stride)),
                    vec(-2.0f64..2.0, n * h * w * c),
                    vec(-1.0f64..1.0, n * oh * ow * c),
                )
            }),
    ) {
        let (n, h, w, c, size, stride) = geom;
        run_fd_case(&flat, |tape, flat, rg| {
            let x = tape.leaf(flat.to_vec(), vec![n, h, w, c], rg).unwrap();
            let p = tape.maxpool2d(x, size, stride).unwrap();
            (vec![x], weighted_sum(tape, p, &cot))
        })?;
    }

    #[test]
    fn prop_layer_norm_fd(
        (rd, flat, cot) in (1usize..4, 2usize..8).prop_flat_map(|(rows, dim)| (
            Just((rows, dim)),
            vec(-2.0f64..2.0, rows * dim + 2 * dim),
            vec(-1.0f64..1.0, rows * dim),
        )),
    ) {
        let (rows, dim) = rd;
        run_fd_case(&flat, |tape, flat, rg| {
            let x = tape.leaf(flat[..rows * dim].to_vec(), vec![rows, dim], rg).unwrap();
            let gamma = tape
                .leaf(flat[rows * dim..rows * dim + dim].to_vec(), vec![dim], rg)
                .unwrap();
            let beta = tape.leaf(flat[rows * dim + dim..].to_vec(), vec![dim], rg).unwrap();
            let yn = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
            (vec![x, gamma, beta], weighted_sum(tape, yn, &cot))
        })?;
    }

    #[test]
    fn prop_softmax_rows_fd(
        (rd, flat, cot) in (1usize..4, 2usize..6).prop_flat_map(|(rows, dim)| (
            Just((rows, dim)),
            vec(-3.0f64..3.0, rows * dim),
            vec(-1.0f64..1.0, rows * dim),
        )),
    ) {
        let (rows, dim) = rd;
        run_fd_case(&flat, |tape, flat, rg| {
            let x = tape.leaf(flat.to_vec(), vec![rows, dim], rg).unwrap();
            let s = tape.softmax_rows(x).unwrap();
            (vec![x], weighted_sum(tape, s, &cot))
        })?;
    }

    #[test]
    fn prop_softmax_xent_fd(
        (rc, flat, labels) in (1usize..4, 2usize..6).prop_flat_map(|(rows, classes)| (
            Just((rows, classes)),
            vec(-3.0f64..3.0, rows * classes),
            vec(0usize..classes, rows),
        )),
    ) {
        let (rows, classes) = rc;
        run_fd_case(&flat, |tape, flat, rg| {
            let x = tape.leaf(flat.to_vec(), vec![rows, classes], rg).unwrap();
            let l = tape.softmax_xent(x, &labels).unwrap();
            // non-unit cotangent via a scalar affine wrapper
            let root = tape.affine(l, 2.375, 0.0).unwrap();
            (vec![x], root)
        })?;
    }

    #[test]
    fn prop_select_class_sum_fd(
        (rc, flat, labels) in (1usize..4, 2usize..6).prop_flat_map(|(rows, classes)| (
            Just((rows, classes)),
            vec(-3.0f64..3.0, rows * classes),
            vec(0usize..classes, rows),
        )),
    ) {
        let (rows, classes) = rc;
        run_fd_case(&flat, |tape, flat, rg| {
            let x = tape.leaf(flat.to_vec(), vec![rows, classes], rg).unwrap();
            let l = tape.select_class_sum(x, &labels).unwrap();
            let root = tape.affine(l, -1.5, 0.25).unwrap();
            (vec![x], root)
        })?;
    }

    #[test]
    fn prop_token_reshape_swap_fd(
        (ntd, index, flat, cot) in (1usize..3, 1usize..4, 2usize..5).prop_flat_map(|(n, t, d)| (
            Just((n, t, d)),
            0usize..(t + 1),
            vec(-2.0f64..2.0, n * t * d + d),
            vec(-1.0f64..1.0, n * d),
        )),
    ) {
        let (n, t, d) = ntd;
        run_fd_case(&flat, |tape, flat, rg| {
            let seq = tape.leaf(flat[..n * t * d].to_vec(), vec![n, t, d], rg).unwrap();
            let tok = tape.leaf(flat[n * t * d..].to_vec(), vec![d], rg).unwrap();
            let cat = tape.prepend_token(seq, tok).unwrap();
            let r4 = tape.reshape(cat, vec![n, t + 1, 1, d]).unwrap();
            let sw = tape.swap_axes_1_2(r4).unwrap();
            let back = tape.reshape(sw, vec![n, t + 1, d]).unwrap();
            let picked = tape.take_token(back, index).unwrap();
            (vec![seq, tok], weighted_sum(tape, picked, &cot))
        })?;
    }

    #[test]
    fn prop_attention_composite_fd(
        (td, flat, cot) in (1usize..4, 2usize..5).prop_flat_map(|(t, d)| (
            Just((t, d)),
            vec(-1.5f64..1.5, 3 * t * d),
            vec(-1.0f64..1.0, t * d),
        )),
    ) {
        let (t, d) = td;
        run_fd_case(&flat, |tape, flat, rg| {
            let q = tape.leaf(flat[..t * d].to_vec(), vec![1, t, d], rg).unwrap();
            let k = tape.leaf(flat[t * d..2 * t * d].to_vec(), vec![1, t, d], rg).unwrap();
            let v = tape.leaf(flat[2 * t * d..].to_vec(), vec![1, t, d], rg).unwrap();
            let scores = tape.batmatmul(q, k, true).unwrap();
            let scaled = tape.affine(scores, 1.0 / (d as f64).sqrt(), 0.0).unwrap();
            let attn = tape.softmax_rows(scaled).unwrap();
            let out = tape.batmatmul(attn, v, false).unwrap();
            (vec![q, k, v], weighted_sum(tape, out, &cot))
        })?;
    }

    /// Backward of a sum of losses equals the sum of separate backwards.
    #[test]
    fn prop_backward_linearity(
        (dc, wdata, x1, x2, y1, y2) in (1usize..5, 2usize..5).prop_flat_map(|(d, c)| (
            Just((d, c)),
            vec(-1.0f64..1.0, d * c),
            vec(-2.0f64..2.0, d),
            vec(-2.0f64..2.0, d),
            0usize..c,
            0usize..c,
        )),
    ) {
        let (d, c) = dc;
        let grad_of = |batches: &[(&[f64], usize)]| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let w = tape.leaf(wdata.clone(), vec![d, c], true).unwrap();
            let mut total: Option<NodeId> = None;
            for (x, y) in batches {
                let xl = tape.leaf(x.to_vec(), vec![1, d], false).unwrap();
                let logits = tape.matmul(xl, w).unwrap();
                let loss = tape.softmax_xent(logits, &[*y]).unwrap();
                total = Some(match total {
                    Some(t) => tape.add(t, loss).unwrap(),
                    None => loss,
                });
            }
            let grads = tape.backward(total.unwrap()).unwrap();
            grads.get(w).unwrap().to_vec()
        };
        let joint = grad_of(&[(&x1, y1), (&x2, y2)]);
        let g1 = grad_of(&[(&x1, y1)]);
        let g2 = grad_of(&[(&x2, y2)]);
        for i in 0..joint.len() {
            let sum = g1[i] + g2[i];
            prop_assert!(
                (joint[i] - sum).abs() <= 1e-10 * (1.0 + sum.abs()),
                "index {}: joint {} vs parts {}",
                i, joint[i], sum
            );
        }
    }
}

// ── whole-model oracles ──────────────────────────────────────────────────────

/// Two dense layers with relu, traced onto the tape.
struct MlpProbe {
    d: usize,
    hidden: usize,
    classes: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl MlpProbe {
    fn random(seed: u64, d: usize, hidden: usize, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect()
        };
        MlpProbe {
            d,
            hidden,
            classes,
            w1: draw(d * hidden),
            b1: draw(hidden),
            w2: draw(hidden * classes),
            b2: draw(classes),
        }
    }
}

impl DifferentiableModel<f64> for MlpProbe {
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn input_dims(&self) -> Vec<usize> {
        vec![self.d]
    }
    fn trace(
        &self,
        tape: &mut Tape<f64>,
        batch: &Tensor<f64>,
        input_requires_grad: bool,
        params_require_grad: bool,
    ) -> Result<TraceRefs, GradError> {
        let n = batch.shape()[0];
        let input = tape.leaf(batch.data().to_vec(), vec![n, self.d], input_requires_grad)?;
        let w1 = tape.leaf(self.w1.clone(), vec![self.d, self.hidden], params_require_grad)?;
        let b1 = tape.leaf(self.b1.clone(), vec![self.hidden], params_require_grad)?;
        let w2 = tape.leaf(self.w2.clone(), vec![self.hidden, self.classes], params_require_grad)?;
        let b2 = tape.leaf(self.b2.clone(), vec![self.classes], params_require_grad)?;
        let h1 = tape.matmul(input, w1)?;
        let h1b = tape.add_bias(h1, b1)?;
        let a1 = tape.relu(h1b)?;
        let h2 = tape.matmul(a1, w2)?;
        let logits = tape.add_bias(h2, b2)?;
        Ok(TraceRefs {
            input,
            logits,
            params: vec![
                ("w1".into(), w1),
                ("b1".into(), b1),
                ("w2".into(), w2),
                ("b2".into(), b2),
            ],
        })
    }
}

/// Straight-line reimplementation of the same arithmetic, no tape involved.
fn straight_line_mlp_loss(m: &MlpProbe, batch: &[f64], n: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let x = &batch[i * m.d..(i + 1) * m.d];
        let mut hidden = vec![0.0f64; m.hidden];
        for j in 0..m.hidden {
            let mut acc = m.b1[j];
            for (p, &xv) in x.iter().enumerate() {
                acc += xv * m.w1[p * m.hidden + j];
            }
            hidden[j] = acc.max(0.0);
        }
        let mut logits = vec![0.0f64; m.classes];
        for j in 0..m.classes {
            let mut acc = m.b2[j];
            for (p, &hv) in hidden.iter().enumerate() {
                acc += hv * m.w2[p * m.classes + j];
            }
            logits[j] = acc;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sumexp: f64 = logits.iter().map(|&z| (z - mx).exp()).sum();
        total += mx + sumexp.ln() - logits[labels[i]];
    }
    total / n as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Tape loss vs. an independent straight-line reimplementation.
    #[test]
    fn prop_mlp_duplicate_path_oracle(
        seed in 0u64..1_000_000,
        (nc, batch, labels) in (1usize..4, 2usize..5).prop_flat_map(|(n, c)| (
            Just((n, c)),
            vec(0.0f64..255.0, n * 3),
            vec(0usize..c, n),
        )),
    ) {
        let (n, c) = nc;
        let probe = MlpProbe::random(seed, 3, 5, c);
        let batch_t = Tensor::new(vec![n, 3], batch.clone()).unwrap();
        let graph =
            forward_scalar_loss(&probe, &batch_t, &labels, LossKind::SoftmaxXent, false).unwrap();
        let direct = straight_line_mlp_loss(&probe, &batch, n, &labels);
        let err = (graph.loss() - direct).abs();
        prop_assert!(
            err <= 1e-6 * direct.abs().max(1.0),
            "tape {} vs straight-line {}",
            graph.loss(),
            direct
        );
    }

    /// The public input-gradient entry point agrees with the public
    /// finite-difference oracle on random small nets.
    #[test]
    fn prop_input_gradient_matches_fd_oracle(
        seed in 0u64..1_000_000,
        batch in vec(-2.0f64..2.0, 3),
        label in 0usize..3,
        use_loss in any::<bool>(),
    ) {
        let probe = MlpProbe::random(seed, 3, 4, 3);
        let x = Tensor::new(vec![1, 3], batch).unwrap();

        // reject instances near a relu kink, where the FD oracle is undefined
        let mut tape = Tape::new();
        let _ = probe.trace(&mut tape, &x, false, false).unwrap();
        prop_assume!(tape.kink_margin() > KINK_GUARD);

        let selector = if use_loss {
            ScalarSelector::Loss { labels: vec![label], loss: LossKind::SoftmaxXent }
        } else {
            ScalarSelector::ClassLogit { classes: vec![label] }
        };
        let analytic = input_gradient(&probe, &x, &selector).unwrap();
        let fd = finite_difference_oracle(&probe, &x, &selector, FD_H).unwrap();
        for (i, (&a, &f)) in analytic.data().iter().zip(fd.data()).enumerate() {
            let err = (a - f).abs();
            prop_assert!(
                err <= REL_TOL * a.abs().max(f.abs()) || err <= ABS_FLOOR,
                "coordinate {}: analytic {} vs fd {}",
                i, a, f
            );
        }
    }
}

/// Convolutional probe for whole-model parameter gradient checks.
struct CnnProbe {
    side: usize,
    classes: usize,
    wc: Vec<f64>, // [3,3,1,2]
    wf: Vec<f64>, // [flattened, classes]
    bf: Vec<f64>,
}

impl CnnProbe {
    fn random(seed: u64, side: usize, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pooled = side / 2;
        let flat = pooled * pooled * 2;
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
        };
        CnnProbe { side, classes, wc: draw(3 * 3 * 2), wf: draw(flat * classes), bf: draw(classes) }
    }

    fn param_slices(&self) -> Vec<(&'static str, usize)> {
        vec![("wc", self.wc.len()), ("wf", self.wf.len()), ("bf", self.bf.len())]
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut v = self.wc.clone();
        v.extend_from_slice(&self.wf);
        v.extend_from_slice(&self.bf);
        v
    }

    fn with_params(&self, flat: &[f64]) -> CnnProbe {
        let (a, b) = (self.wc.len(), self.wc.len() + self.wf.len());
        CnnProbe {
            side: self.side,
            classes: self.classes,
            wc: flat[..a].to_vec(),
            wf: flat[a..b].to_vec(),
            bf: flat[b..].to_vec(),
        }
    }
}

impl DifferentiableModel<f64> for CnnProbe {
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn input_dims(&self) -> Vec<usize> {
        vec![self.side, self.side, 1]
    }
    fn trace(
        &self,
        tape: &mut Tape<f64>,
        batch: &Tensor<f64>,
        input_requires_grad: bool,
        params_require_grad: bool,
    ) -> Result<TraceRefs, GradError> {
        let n = batch.shape()[0];
        let input = tape.leaf(
            batch.data().to_vec(),
            vec![n, self.side, self.side, 1],
            input_requires_grad,
        )?;
        let wc = tape.leaf(self.wc.clone(), vec![3, 3, 1, 2], params_require_grad)?;
        let pooled = self.side / 2;
        let flat = pooled * pooled * 2;
        let wf = tape.leaf(self.wf.clone(), vec![flat, self.classes], params_require_grad)?;
        let bf = tape.leaf(self.bf.clone(), vec![self.classes], params_require_grad)?;
        let c = tape.conv2d(input, wc, 1, 1)?;
        let r = tape.relu(c)?;
        let p = tape.maxpool2d(r, 2, 2)?;
        let f = tape.reshape(p, vec![n, flat])?;
        let z = tape.matmul(f, wf)?;
        let logits = tape.add_bias(z, bf)?;
        Ok(TraceRefs {
            input,
            logits,
            params: vec![("wc".into(), wc), ("wf".into(), wf), ("bf".into(), bf)],
        })
    }
}

/// Parameter gradients of a small CNN vs. finite differences over θ.
#[test]
fn cnn_parameter_gradients_match_finite_differences() {
    let side = 6;
    let probe = CnnProbe::random(23, side, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1023);
    let batch: Vec<f64> = (0..2 * side * side).map(|_| rng.gen_range(0.0..4.0)).collect();
    let batch_t = Tensor::new(vec![2, side, side, 1], batch).unwrap();
    let labels = [0usize, 2];

    // sanity: this fixed instance must be kink-regular for FD to be defined
    let mut tape = Tape::new();
    let _ = probe.trace(&mut tape, &batch_t, false, false).unwrap();
    assert!(tape.kink_margin() > KINK_GUARD, "margin {}", tape.kink_margin());

    let graph =
        forward_scalar_loss(&probe, &batch_t, &labels, LossKind::SoftmaxXent, false).unwrap();
    let grads = backward_params(graph).unwrap();
    let mut analytic = Vec::new();
    for (_, g) in &grads {
        analytic.extend_from_slice(g.data());
    }

    let theta = probe.flat_params();
    let total: usize = probe.param_slices().iter().map(|(_, n)| n).sum();
    assert_eq!(analytic.len(), total);
    let sel = ScalarSelector::Loss { labels: labels.to_vec(), loss: LossKind::SoftmaxXent };
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] += FD_H;
        let plus = eval_scalar(&probe.with_params(&t), &batch_t, &sel).unwrap();
        t[i] = theta[i] - FD_H;
        let minus = eval_scalar(&probe.with_params(&t), &batch_t, &sel).unwrap();
        let fd = (plus - minus) / (2.0 * FD_H);
        let err = (analytic[i] - fd).abs();
        let rel = err / analytic[i].abs().max(fd.abs()).max(1e-3);
        worst = worst.max(rel);
        assert!(
            err <= REL_TOL * analytic[i].abs().max(fd.abs()) || err <= ABS_FLOOR,
            "param coord {}: analytic {} vs fd {}",
            i,
            analytic[i],
            fd
        );
    }
    assert!(worst < REL_TOL, "worst relative error {}", worst);
}

/// Input gradients of the same CNN vs. the public finite-difference oracle.
#[test]
fn cnn_input_gradient_matches_finite_differences() {
    let side = 6;
    let probe = CnnProbe::random(0, side, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2000);
    let batch: Vec<f64> = (0..side * side).map(|_| rng.gen_range(0.0..4.0)).collect();
    let batch_t = Tensor::new(vec![1, side, side, 1], batch).unwrap();

    let mut tape = Tape::new();
    let _ = probe.trace(&mut tape, &batch_t, false, false).unwrap();
    assert!(tape.kink_margin() > KINK_GUARD, "margin {}", tape.kink_margin());

    for selector in [
        ScalarSelector::Loss { labels: vec![1], loss: LossKind::SoftmaxXent },
        ScalarSelector::ClassLogit { classes: vec![2] },
        ScalarSelector::ClassProb { classes: vec![0] },
    ] {
        let analytic = input_gradient(&probe, &batch_t, &selector).unwrap();
        let fd = finite_difference_oracle(&probe, &batch_t, &selector, FD_H).unwrap();
        for (i, (&a, &f)) in analytic.data().iter().zip(fd.data()).enumerate() {
            let err = (a - f).abs();
            assert!(
                err <= REL_TOL * a.abs().max(f.abs()) || err <= ABS_FLOOR,
                "selector {:?} coord {}: analytic {} vs fd {}",
                selector,
                i,
                a,
                f
            );
        }
    }
}

/// Identical inputs produce bit-identical losses and gradients.
#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let side = 6;
    let probe = CnnProbe::random(31, side, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let batch: Vec<f64> = (0..3 * side * side).map(|_| rng.gen_range(0.0..255.0)).collect();
    let batch_t = Tensor::new(vec![3, side, side, 1], batch).unwrap();
    let labels = [1usize, 3, 0];

    let run = || {
        let graph =
            forward_scalar_loss(&probe, &batch_t, &labels, LossKind::SoftmaxXent, true).unwrap();
        let loss = graph.loss();
        let back = graph.backward_all().unwrap();
        let mut bits: Vec<u64> = vec![loss.to_bits()];
        for (_, g) in &back.param_grads {
            bits.extend(g.data().iter().map(|v| v.to_bits()));
        }
        bits.extend(back.input_grad.unwrap().data().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}
