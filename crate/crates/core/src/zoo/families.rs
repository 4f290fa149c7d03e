//! Per-family parameter inventories and tape builders. `param_specs` and
//! `trace_body` walk the architecture in the same order; the binder checks
//! names positionally so the two can never drift apart silently.

use crate::gradcore::{GradError, NodeId, Real, Tape, Tensor};

use super::{Family, ModelConfig, ZooError};

/// How a parameter tensor is filled at build time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Uniform(-limit, limit) with limit = sqrt(6 / fan_in) — relu stacks.
    FanInUniform { fan_in: usize },
    /// Normal(0, 0.02) resampled into ±2σ — transformer weights.
    TruncNormal,
    Zeros,
    Ones,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn dense(name: &str, fan_in: usize, fan_out: usize, specs: &mut Vec<ParamSpec>) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![fan_in, fan_out],
        init: Init::FanInUniform { fan_in },
    });
    specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![fan_out], init: Init::Zeros });
}

fn conv(name: &str, k: usize, c_in: usize, c_out: usize, specs: &mut Vec<ParamSpec>) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![k, k, c_in, c_out],
        init: Init::FanInUniform { fan_in: k * k * c_in },
    });
    specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![c_out], init: Init::Zeros });
}

fn trunc(name: String, shape: Vec<usize>, specs: &mut Vec<ParamSpec>) {
    specs.push(ParamSpec { name, shape, init: Init::TruncNormal });
}

fn layer_norm_pair(prefix: &str, dim: usize, specs: &mut Vec<ParamSpec>) {
    specs.push(ParamSpec {
        name: format!("{prefix}.gamma"),
        shape: vec![dim],
        init: Init::Ones,
    });
    specs.push(ParamSpec { name: format!("{prefix}.beta"), shape: vec![dim], init: Init::Zeros });
}

/// Spatial size after a 2×2/stride-2 max pool.
fn pooled(side: usize) -> usize {
    (side - 2) / 2 + 1
}

/// Complete, ordered parameter inventory for a config.
pub(crate) fn param_specs(config: &ModelConfig) -> Result<Vec<ParamSpec>, ZooError> {
    config.validate()?;
    let [h, w, c] = config.input;
    let width = config.width;
    let classes = config.num_classes;
    let mut specs = Vec::new();
    match config.family {
        Family::Mlp => {
            let mut prev = h * w * c;
            for i in 0..config.depth {
                dense(&format!("fc{i}"), prev, width, &mut specs);
                prev = width;
            }
            dense("head", prev, classes, &mut specs);
        }
        Family::SmallCnnA => {
            let (mut ch, mut sh, mut sw) = (c, h, w);
            for i in 0..config.depth {
                let c_out = width << i;
                conv(&format!("conv{i}"), 3, ch, c_out, &mut specs);
                ch = c_out;
                sh = pooled(sh);
                sw = pooled(sw);
            }
            dense("head", sh * sw * ch, classes, &mut specs);
        }
        Family::SmallCnnBResidual => {
            conv("stem", 3, c, width, &mut specs);
            let (mut sh, mut sw) = (h, w);
            for i in 0..config.depth {
                conv(&format!("block{i}.conv1"), 3, width, width, &mut specs);
                conv(&format!("block{i}.conv2"), 3, width, width, &mut specs);
                if sh.min(sw) >= 8 {
                    sh = pooled(sh);
                    sw = pooled(sw);
                }
            }
            dense("head", sh * sw * width, classes, &mut specs);
        }
        Family::TinyVit => {
            let p = config.patch_size;
            let tokens = (h / p) * (w / p) + 1;
            trunc("patch.w".into(), vec![p, p, c, width], &mut specs);
            trunc("cls_token".into(), vec![width], &mut specs);
            trunc("pos_embed".into(), vec![tokens, width], &mut specs);
            for i in 0..config.depth {
                layer_norm_pair(&format!("block{i}.ln1"), width, &mut specs);
                for part in ["wq", "wk", "wv", "wo"] {
                    trunc(format!("block{i}.attn.{part}"), vec![width, width], &mut specs);
                    let bias = part.replace('w', "b");
                    specs.push(ParamSpec {
                        name: format!("block{i}.attn.{bias}"),
                        shape: vec![width],
                        init: Init::Zeros,
                    });
                }
                layer_norm_pair(&format!("block{i}.ln2"), width, &mut specs);
                trunc(format!("block{i}.mlp.w1"), vec![width, 2 * width], &mut specs);
                specs.push(ParamSpec {
                    name: format!("block{i}.mlp.b1"),
                    shape: vec![2 * width],
                    init: Init::Zeros,
                });
                trunc(format!("block{i}.mlp.w2"), vec![2 * width, width], &mut specs);
                specs.push(ParamSpec {
                    name: format!("block{i}.mlp.b2"),
                    shape: vec![width],
                    init: Init::Zeros,
                });
            }
            layer_norm_pair("ln_f", width, &mut specs);
            trunc("head.w".into(), vec![width, classes], &mut specs);
            specs.push(ParamSpec { name: "head.b".into(), shape: vec![classes], init: Init::Zeros });
        }
    }
    Ok(specs)
}

/// Leafs stored parameters onto the tape in declaration order, verifying the
/// architecture walk requests exactly the declared names.
pub(crate) struct Binder<'a, E: Real> {
    pub tape: &'a mut Tape<E>,
    params: &'a [(String, Tensor<E>)],
    next: usize,
    requires_grad: bool,
    pub bound: Vec<(String, NodeId)>,
}

impl<'a, E: Real> Binder<'a, E> {
    pub fn new(
        tape: &'a mut Tape<E>,
        params: &'a [(String, Tensor<E>)],
        requires_grad: bool,
    ) -> Self {
        Binder { tape, params, next: 0, requires_grad, bound: Vec::with_capacity(params.len()) }
    }

    fn param(&mut self, name: &str) -> Result<NodeId, GradError> {
        let (stored, tensor) = self.params.get(self.next).ok_or_else(|| GradError::InvalidArg {
            op: "bind",
            detail: format!("architecture requests {name} beyond the parameter list"),
        })?;
        if stored != name {
            return Err(GradError::InvalidArg {
                op: "bind",
                detail: format!("architecture requests {name}, stored order has {stored}"),
            });
        }
        let id = self.tape.leaf(
            tensor.data().to_vec(),
            tensor.shape().to_vec(),
            self.requires_grad,
        )?;
        self.bound.push((stored.clone(), id));
        self.next += 1;
        Ok(id)
    }

    fn finish(&self) -> Result<(), GradError> {
        if self.next != self.params.len() {
            return Err(GradError::InvalidArg {
                op: "bind",
                detail: format!("{} of {} parameters bound", self.next, self.params.len()),
            });
        }
        Ok(())
    }
}

fn dense_layer<E: Real>(
    b: &mut Binder<'_, E>,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId, GradError> {
    let w = b.param(&format!("{prefix}.w"))?;
    let bias = b.param(&format!("{prefix}.b"))?;
    let z = b.tape.matmul(x, w)?;
    b.tape.add_bias(z, bias)
}

fn conv_layer<E: Real>(
    b: &mut Binder<'_, E>,
    x: NodeId,
    prefix: &str,
    stride: usize,
    pad: usize,
) -> Result<NodeId, GradError> {
    let w = b.param(&format!("{prefix}.w"))?;
    let bias = b.param(&format!("{prefix}.b"))?;
    let z = b.tape.conv2d(x, w, stride, pad)?;
    b.tape.add_bias(z, bias)
}

#[derive(Clone, Copy)]
struct HeadGeometry {
    n: usize,
    tokens: usize,
    heads: usize,
    dh: usize,
}

/// Projects token rows with one of the q/k/v matrices and regroups the result
/// into per-head sequences [n·heads, tokens, dh].
fn head_split<E: Real>(
    b: &mut Binder<'_, E>,
    rows: NodeId,
    prefix: &str,
    part: &str,
    geo: HeadGeometry,
) -> Result<NodeId, GradError> {
    let wmat = b.param(&format!("{prefix}.w{part}"))?;
    let bias = b.param(&format!("{prefix}.b{part}"))?;
    let z = b.tape.matmul(rows, wmat)?;
    let zb = b.tape.add_bias(z, bias)?;
    let four = b.tape.reshape(zb, vec![geo.n, geo.tokens, geo.heads, geo.dh])?;
    let swapped = b.tape.swap_axes_1_2(four)?;
    b.tape.reshape(swapped, vec![geo.n * geo.heads, geo.tokens, geo.dh])
}

/// Builds the family body from the preprocessed input to the logits.
pub(crate) fn trace_body<E: Real>(
    config: &ModelConfig,
    binder: &mut Binder<'_, E>,
    pre: NodeId,
    n: usize,
) -> Result<NodeId, GradError> {
    let [h, w, c] = config.input;
    let width = config.width;
    let logits = match config.family {
        Family::Mlp => {
            let mut cur = binder.tape.reshape(pre, vec![n, h * w * c])?;
            for i in 0..config.depth {
                cur = dense_layer(binder, cur, &format!("fc{i}"))?;
                cur = binder.tape.relu(cur)?;
            }
            dense_layer(binder, cur, "head")?
        }
        Family::SmallCnnA => {
            let (mut cur, mut ch, mut sh, mut sw) = (pre, c, h, w);
            for i in 0..config.depth {
                cur = conv_layer(binder, cur, &format!("conv{i}"), 1, 1)?;
                cur = binder.tape.relu(cur)?;
                cur = binder.tape.maxpool2d(cur, 2, 2)?;
                ch = width << i;
                sh = pooled(sh);
                sw = pooled(sw);
            }
            let flat = binder.tape.reshape(cur, vec![n, sh * sw * ch])?;
            dense_layer(binder, flat, "head")?
        }
        Family::SmallCnnBResidual => {
            let mut cur = conv_layer(binder, pre, "stem", 1, 1)?;
            cur = binder.tape.relu(cur)?;
            let (mut sh, mut sw) = (h, w);
            for i in 0..config.depth {
                let c1 = conv_layer(binder, cur, &format!("block{i}.conv1"), 1, 1)?;
                let r1 = binder.tape.relu(c1)?;
                let c2 = conv_layer(binder, r1, &format!("block{i}.conv2"), 1, 1)?;
                let sum = binder.tape.add(c2, cur)?;
                cur = binder.tape.relu(sum)?;
                if sh.min(sw) >= 8 {
                    cur = binder.tape.maxpool2d(cur, 2, 2)?;
                    sh = pooled(sh);
                    sw = pooled(sw);
                }
            }
            let flat = binder.tape.reshape(cur, vec![n, sh * sw * width])?;
            dense_layer(binder, flat, "head")?
        }
        Family::TinyVit => {
            let p = config.patch_size;
            let heads = config.heads;
            let dh = width / heads;
            let t = (h / p) * (w / p);
            let tokens = t + 1;

            let patch_w = binder.param("patch.w")?;
            let patched = binder.tape.conv2d(pre, patch_w, p, 0)?;
            let seq = binder.tape.reshape(patched, vec![n, t, width])?;
            let cls = binder.param("cls_token")?;
            let with_cls = binder.tape.prepend_token(seq, cls)?;
            let pos = binder.param("pos_embed")?;
            let mut cur = binder.tape.add_bias(with_cls, pos)?;

            for i in 0..config.depth {
                let g1 = binder.param(&format!("block{i}.ln1.gamma"))?;
                let be1 = binder.param(&format!("block{i}.ln1.beta"))?;
                let x1 = binder.tape.layer_norm(cur, g1, be1, 1e-5)?;
                let rows = binder.tape.reshape(x1, vec![n * tokens, width])?;

                let geo = HeadGeometry { n, tokens, heads, dh };
                let q = head_split(binder, rows, &format!("block{i}.attn"), "q", geo)?;
                let k = head_split(binder, rows, &format!("block{i}.attn"), "k", geo)?;
                let v = head_split(binder, rows, &format!("block{i}.attn"), "v", geo)?;

                let scores = binder.tape.batmatmul(q, k, true)?;
                let scaled = binder.tape.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0)?;
                let attn = binder.tape.softmax_rows(scaled)?;
                let ctx = binder.tape.batmatmul(attn, v, false)?;
                let ctx4 = binder.tape.reshape(ctx, vec![n, heads, tokens, dh])?;
                let merged = binder.tape.swap_axes_1_2(ctx4)?;
                let merged2 = binder.tape.reshape(merged, vec![n * tokens, width])?;
                let wo = binder.param(&format!("block{i}.attn.wo"))?;
                let bo = binder.param(&format!("block{i}.attn.bo"))?;
                let proj = binder.tape.matmul(merged2, wo)?;
                let projb = binder.tape.add_bias(proj, bo)?;
                let attn_out = binder.tape.reshape(projb, vec![n, tokens, width])?;
                cur = binder.tape.add(cur, attn_out)?;

                let g2 = binder.param(&format!("block{i}.ln2.gamma"))?;
                let be2 = binder.param(&format!("block{i}.ln2.beta"))?;
                let x2 = binder.tape.layer_norm(cur, g2, be2, 1e-5)?;
                let rows2 = binder.tape.reshape(x2, vec![n * tokens, width])?;
                let w1 = binder.param(&format!("block{i}.mlp.w1"))?;
                let b1 = binder.param(&format!("block{i}.mlp.b1"))?;
                let z1 = binder.tape.matmul(rows2, w1)?;
                let z1b = binder.tape.add_bias(z1, b1)?;
                let a1 = binder.tape.gelu(z1b)?;
                let w2 = binder.param(&format!("block{i}.mlp.w2"))?;
                let b2 = binder.param(&format!("block{i}.mlp.b2"))?;
                let z2 = binder.tape.matmul(a1, w2)?;
                let z2b = binder.tape.add_bias(z2, b2)?;
                let mlp_out = binder.tape.reshape(z2b, vec![n, tokens, width])?;
                cur = binder.tape.add(cur, mlp_out)?;
            }
            let gf = binder.param("ln_f.gamma")?;
            let bf = binder.param("ln_f.beta")?;
            let normed = binder.tape.layer_norm(cur, gf, bf, 1e-5)?;
            let cls_out = binder.tape.take_token(normed, 0)?;
            dense_layer(binder, cls_out, "head")?
        }
    };
    binder.finish()?;
    Ok(logits)
}
