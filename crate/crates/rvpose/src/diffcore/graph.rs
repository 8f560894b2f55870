//! Reverse-mode differentiable computation over a per-step tape.
//!
//! A [`Graph`] records the forward computation eagerly; node values are
//! materialized at op-build time and the op list is replayed in reverse by
//! [`Graph::backward`]. Nodes are appended after their parents, so tape order
//! is a topological order and the record is acyclic by construction.
//!
//! Parameters live outside the graph (see [`Param`]); each training step
//! builds a fresh graph over the current parameter values, and backward
//! accumulates into the parameter gradients until [`zero_grads`] is called.
//! Every forward value and every gradient is checked finite; NaN/Inf is a
//! hard error, not a warning.

use super::kernels::{self, ConvDims};
use super::tensor::{Element, Tensor};
use std::cell::{Cell, RefCell};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("configuration error in {op}: {detail}")]
    Config { op: &'static str, detail: String },
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T, GraphError> {
    Err(GraphError::Shape { op, detail })
}

/// A named, trainable tensor that persists across training steps.
pub struct Param<E: Element> {
    name: String,
    value: RefCell<Tensor<E>>,
    grad: RefCell<Tensor<E>>,
    trainable: Cell<bool>,
}

pub type ParamRef<E> = Rc<Param<E>>;

impl<E: Element> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> ParamRef<E> {
        let grad = Tensor::zeros(value.shape());
        Rc::new(Param {
            name: name.into(),
            value: RefCell::new(value),
            grad: RefCell::new(grad),
            trainable: Cell::new(true),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Tensor<E> {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn grad(&self) -> Tensor<E> {
        self.grad.borrow().clone()
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&self, t: Tensor<E>) {
        assert_eq!(
            t.shape(),
            self.value.borrow().shape(),
            "param {} shape change",
            self.name
        );
        *self.value.borrow_mut() = t;
    }

    pub fn zero_grad(&self) {
        let mut g = self.grad.borrow_mut();
        for v in g.data_mut() {
            *v = E::zero();
        }
    }

    pub fn set_trainable(&self, t: bool) {
        self.trainable.set(t);
    }

    pub fn trainable(&self) -> bool {
        self.trainable.get()
    }

    /// In-place update used by the optimizer between steps.
    pub fn update(&self, f: impl FnMut(&mut [E], &[E])) {
        let mut f = f;
        let mut v = self.value.borrow_mut();
        let g = self.grad.borrow();
        f(v.data_mut(), g.data());
    }

    fn accumulate_grad(&self, add: &Tensor<E>) {
        let mut g = self.grad.borrow_mut();
        for (acc, &v) in g.data_mut().iter_mut().zip(add.data()) {
            *acc = *acc + v;
        }
    }
}

/// Zeroes the accumulated gradient of every parameter.
pub fn zero_grads<E: Element>(params: &[ParamRef<E>]) {
    for p in params {
        p.zero_grad();
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    Sigmoid,
    Tanh,
    LeakyRelu,
}

enum Op<E: Element> {
    Input,
    Param(ParamRef<E>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    /// a [N,D] · b[M,D]ᵀ — the row-major layout used by the LSTM weights.
    MatmulNt {
        a: Var,
        b: Var,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        feat: usize,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    Activation {
        input: Var,
        kind: ActKind,
        alpha: E,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        softmax: Tensor<E>,
        onehot: Tensor<E>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: E,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    SumAxis {
        input: Var,
        axis: usize,
    },
    Sqrt {
        input: Var,
    },
    Exp {
        input: Var,
    },
    Log {
        input: Var,
    },
    Norm2 {
        input: Var,
    },
    RepeatLast {
        input: Var,
        copies: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
}

fn op_name<E: Element>(op: &Op<E>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::Linear { .. } => "linear",
        Op::MatmulNt { .. } => "matmul_nt",
        Op::LayerNorm { .. } => "layer_norm",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Activation { .. } => "activation",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Div { .. } => "div",
        Op::Scale { .. } => "scale",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape { .. } => "reshape",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::SumAxis { .. } => "sum_axis",
        Op::Sqrt { .. } => "sqrt",
        Op::Exp { .. } => "exp",
        Op::Log { .. } => "log",
        Op::Norm2 { .. } => "norm2",
        Op::RepeatLast { .. } => "repeat_last",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
    }
}

/// The per-step tape.
pub struct Graph<E: Element> {
    values: Vec<Tensor<E>>,
    ops: Vec<Op<E>>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Number of nodes on the tape; used by truncation audits.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Handles to every node on the tape, in creation order (graph audits).
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (0..self.values.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient of a node after [`Graph::backward`], if one was produced.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires: bool) -> Result<Var, GraphError> {
        if !value.is_all_finite() {
            return Err(GraphError::Numeric {
                op: op_name(&op).to_string(),
                detail: "non-finite forward value".to_string(),
            });
        }
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Ok(Var(self.values.len() - 1))
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn input(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Input, false).expect("non-finite input")
    }

    /// Leaf with an explicit requires-grad flag (gradient-check harness).
    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        self.push(t, Op::Input, requires_grad)
            .expect("non-finite leaf")
    }

    /// Leaf bound to a parameter; backward accumulates into the parameter.
    pub fn param(&mut self, p: &ParamRef<E>) -> Var {
        let value = p.value();
        let requires = p.trainable();
        self.push(value, Op::Param(Rc::clone(p)), requires)
            .expect("non-finite parameter")
    }

    // ------------------------------------------------------------------
    // structured ops
    // ------------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, GraphError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err("conv2d", format!("input {xs:?}, weight {ws:?}"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return shape_err("conv2d", format!("input channels {c} vs weight {wc}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(GraphError::Config {
                op: "conv2d",
                detail: format!("kernel extents must be odd, got {kh}x{kw}"),
            });
        }
        if stride == 0 {
            return Err(GraphError::Config {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        let oh = kernels::conv_out_extent(h, kh, stride, pad);
        let ow = kernels::conv_out_extent(w, kw, stride, pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => {
                return shape_err("conv2d", format!("spatial {h}x{w} too small for {kh}x{kw}"));
            }
        };
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [f] {
                return shape_err("conv2d", format!("bias {bs:?} vs out channels {f}"));
            }
        }
        let dims = ConvDims {
            batch: n,
            in_ch: c,
            h,
            w,
            out_ch: f,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(
            self.values[input.0].data(),
            self.values[weight.0].data(),
            bias.map(|b| self.values[b.0].data()),
            &dims,
        );
        let requires = self.requires[input.0]
            || self.requires[weight.0]
            || bias.is_some_and(|b| self.requires[b.0]);
        let value = Tensor::new(vec![n, f, oh, ow], out).unwrap();
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
            requires,
        )
    }

    /// input [N,D] · weight [D,M] + bias [M].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, GraphError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return shape_err(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            );
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut out = kernels::matmul(
            self.values[input.0].data(),
            self.values[weight.0].data(),
            n,
            d,
            m,
        );
        let bv = self.values[bias.0].data();
        for row in out.chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o = *o + b;
            }
        }
        let requires =
            self.requires[input.0] || self.requires[weight.0] || self.requires[bias.0];
        self.push(
            Tensor::new(vec![n, m], out).unwrap(),
            Op::Linear {
                input,
                weight,
                bias,
            },
            requires,
        )
    }

    /// a [N,D] · b [M,D]ᵀ → [N,M]; gate blocks of LSTM weights stay row-contiguous.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err("matmul_nt", format!("a {sa:?}, b {sb:?}"));
        }
        let (n, d, m) = (sa[0], sa[1], sb[0]);
        let out = kernels::matmul_nt(self.values[a.0].data(), self.values[b.0].data(), n, d, m);
        let requires = self.requires[a.0] || self.requires[b.0];
        self.push(
            Tensor::new(vec![n, m], out).unwrap(),
            Op::MatmulNt { a, b },
            requires,
        )
    }

    /// Normalizes over the last axis.
    pub fn layer_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, GraphError> {
        let xs = self.shape(input).to_vec();
        let feat = *xs.last().unwrap();
        if feat < 2 {
            return Err(GraphError::Config {
                op: "layer_norm",
                detail: format!("last axis must be >= 2, got {feat}"),
            });
        }
        if eps <= 0.0 {
            return Err(GraphError::Config {
                op: "layer_norm",
                detail: "eps must be positive".into(),
            });
        }
        if self.shape(gamma) != [feat] || self.shape(beta) != [feat] {
            return shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs feature {feat}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        let x = self.values[input.0].data();
        let (mean, rstd) = kernels::norm_stats(x, feat, eps);
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut out = vec![E::zero(); x.len()];
        for r in 0..mean.len() {
            let (m, s) = (mean[r], rstd[r]);
            let xr = &x[r * feat..(r + 1) * feat];
            let or = &mut out[r * feat..(r + 1) * feat];
            for j in 0..feat {
                or[j] = (xr[j] - m) * s * g[j] + b[j];
            }
        }
        let requires =
            self.requires[input.0] || self.requires[gamma.0] || self.requires[beta.0];
        self.push(
            Tensor::new(xs, out).unwrap(),
            Op::LayerNorm {
                input,
                gamma,
                beta,
                feat,
                mean,
                rstd,
            },
            requires,
        )
    }

    /// Train-mode batch norm over [N,C,H,W]; returns the node plus the batch
    /// statistics (mean, population variance) per channel so the caller can
    /// update its running estimates.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<E>, Vec<E>), GraphError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return shape_err("batch_norm", format!("input {xs:?}"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let group = n * h * w;
        if group < 2 {
            return Err(GraphError::Numeric {
                op: "batch_norm".to_string(),
                detail: format!("train mode needs N*H*W >= 2, got {group}"),
            });
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm", "gamma/beta must be [C]".to_string());
        }
        let x = self.values[input.0].data();
        let inv = E::from_f64(1.0 / group as f64);
        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        let plane = h * w;
        for ci in 0..c {
            let mut s = E::zero();
            for ni in 0..n {
                for &v in &x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane] {
                    s = s + v;
                }
            }
            let m = s * inv;
            let mut q = E::zero();
            for ni in 0..n {
                for &v in &x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane] {
                    let d = v - m;
                    q = q + d * d;
                }
            }
            mean[ci] = m;
            var[ci] = q * inv;
        }
        let rstd: Vec<E> = var
            .iter()
            .map(|&v| E::one() / (v + E::from_f64(eps)).sqrt())
            .collect();
        let v = self.bn_apply(input, gamma, beta, &mean, &rstd)?;
        Ok((v, mean, var))
    }

    /// Inference-mode batch norm using running statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[E],
        running_var: &[E],
        eps: f64,
    ) -> Result<Var, GraphError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return shape_err("batch_norm", format!("input {xs:?}"));
        }
        let c = xs[1];
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm", "running stats must be [C]".to_string());
        }
        let rstd: Vec<E> = running_var
            .iter()
            .map(|&v| E::one() / (v + E::from_f64(eps)).sqrt())
            .collect();
        let mean = running_mean.to_vec();
        self.bn_apply(input, gamma, beta, &mean, &rstd)
    }

    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[E],
        rstd: &[E],
    ) -> Result<Var, GraphError> {
        let xs = self.shape(input).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let x = self.values[input.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut out = vec![E::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let (m, s) = (mean[ci], rstd[ci]);
                let scale = s * g[ci];
                let off = b[ci];
                let src = &x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                let dst = &mut out[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - m) * scale + off;
                }
            }
        }
        let requires =
            self.requires[input.0] || self.requires[gamma.0] || self.requires[beta.0];
        self.push(
            Tensor::new(xs, out).unwrap(),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                rstd: rstd.to_vec(),
            },
            requires,
        )
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var, GraphError> {
        self.activation_op(input, ActKind::Sigmoid, 0.0)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var, GraphError> {
        self.activation_op(input, ActKind::Tanh, 0.0)
    }

    pub fn leaky_relu(&mut self, input: Var, alpha: f64) -> Result<Var, GraphError> {
        if !(0.0 < alpha && alpha < 1.0) {
            return Err(GraphError::Config {
                op: "activation",
                detail: format!("leaky_relu slope must be in (0,1), got {alpha}"),
            });
        }
        self.activation_op(input, ActKind::LeakyRelu, alpha)
    }

    fn activation_op(&mut self, input: Var, kind: ActKind, alpha: f64) -> Result<Var, GraphError> {
        let a = E::from_f64(alpha);
        let half = E::from_f64(0.5);
        let x = &self.values[input.0];
        let out = match kind {
            // sigmoid via tanh keeps it stable for large |x|
            ActKind::Sigmoid => x.map(|v| half * ((v * half).tanh() + E::one())),
            ActKind::Tanh => x.map(|v| v.tanh()),
            ActKind::LeakyRelu => x.map(|v| if v > E::zero() { v } else { a * v }),
        };
        let requires = self.requires[input.0];
        self.push(out, Op::Activation { input, kind, alpha: a }, requires)
    }

    /// Row-summed cross entropy between logits [N,K] and one-hot targets
    /// [N,K]; shifted by the row max for stability. Rejects rows that are not
    /// exactly one-hot.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        onehot: &Tensor<E>,
    ) -> Result<Var, GraphError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || onehot.shape() != ls {
            return shape_err(
                "softmax_cross_entropy",
                format!("logits {ls:?}, targets {:?}", onehot.shape()),
            );
        }
        let (n, k) = (ls[0], ls[1]);
        for r in 0..n {
            let row = &onehot.data()[r * k..(r + 1) * k];
            let mut ones = 0usize;
            for &v in row {
                if v == E::one() {
                    ones += 1;
                } else if v != E::zero() {
                    return Err(GraphError::Config {
                        op: "softmax_cross_entropy",
                        detail: format!("target row {r} is not one-hot"),
                    });
                }
            }
            if ones != 1 {
                return Err(GraphError::Config {
                    op: "softmax_cross_entropy",
                    detail: format!("target row {r} has {ones} hot entries"),
                });
            }
        }
        let z = self.values[logits.0].data();
        let mut soft = vec![E::zero(); n * k];
        let mut loss = E::zero();
        for r in 0..n {
            let row = &z[r * k..(r + 1) * k];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = E::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                soft[r * k + j] = e;
                sum = sum + e;
            }
            let lse = sum.ln() + mx;
            for j in 0..k {
                soft[r * k + j] = soft[r * k + j] / sum;
                if onehot.data()[r * k + j] == E::one() {
                    loss = loss + lse - row[j];
                }
            }
        }
        let requires = self.requires[logits.0];
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                softmax: Tensor::new(vec![n, k], soft).unwrap(),
                onehot: onehot.clone(),
            },
            requires,
        )
    }

    // ------------------------------------------------------------------
    // elementwise suite
    // ------------------------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(E, E) -> E,
    ) -> Result<(Tensor<E>, bool), GraphError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        Ok((t, self.requires[a.0] || self.requires[b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (t, r) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add { a, b }, r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (t, r) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub { a, b }, r)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (t, r) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul { a, b }, r)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (t, r) = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div { a, b }, r)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var, GraphError> {
        let f = E::from_f64(factor);
        let t = self.values[input.0].map(|v| v * f);
        let r = self.requires[input.0];
        self.push(t, Op::Scale { input, factor: f }, r)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, GraphError> {
        if parts.is_empty() {
            return shape_err("concat", "no parts".to_string());
        }
        let base = self.shape(parts[0]).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} of {base:?}"));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = vec![E::zero(); shape.iter().product()];
        let row = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let alen = self.shape(p)[axis];
            let src = self.values[p.0].data();
            for o in 0..outer {
                let dst = &mut out[o * row + offset * inner..][..alen * inner];
                dst.copy_from_slice(&src[o * alen * inner..(o + 1) * alen * inner]);
            }
            offset += alen;
        }
        let requires = parts.iter().any(|&p| self.requires[p.0]);
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            requires,
        )
    }

    pub fn slice(
        &mut self,
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, GraphError> {
        let base = self.shape(input).to_vec();
        if axis >= base.len() || start + len > base[axis] || len == 0 {
            return shape_err("slice", format!("[{start}..{}] axis {axis} of {base:?}", start + len));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = len;
        let src = self.values[input.0].data();
        let mut out = vec![E::zero(); outer * len * inner];
        for o in 0..outer {
            let s = &src[(o * base[axis] + start) * inner..][..len * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(s);
        }
        let requires = self.requires[input.0];
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::Slice {
                input,
                axis,
                start,
                len,
            },
            requires,
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, GraphError> {
        let t = &self.values[input.0];
        if shape.iter().product::<usize>() != t.numel() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", t.shape()));
        }
        let out = t.reshaped(shape);
        let r = self.requires[input.0];
        self.push(out, Op::Reshape { input }, r)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, GraphError> {
        let mut acc = E::zero();
        for &v in self.values[input.0].data() {
            acc = acc + v;
        }
        let r = self.requires[input.0];
        self.push(Tensor::scalar(acc), Op::Sum { input }, r)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var, GraphError> {
        let n = self.values[input.0].numel();
        let mut acc = E::zero();
        for &v in self.values[input.0].data() {
            acc = acc + v;
        }
        let r = self.requires[input.0];
        self.push(
            Tensor::scalar(acc / E::from_f64(n as f64)),
            Op::Mean { input },
            r,
        )
    }

    /// Sums along one axis, keeping it with extent 1.
    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var, GraphError> {
        let base = self.shape(input).to_vec();
        if axis >= base.len() {
            return shape_err("sum_axis", format!("axis {axis} of {base:?}"));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let alen = base[axis];
        let src = self.values[input.0].data();
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..alen {
                let s = &src[(o * alen + a) * inner..][..inner];
                let d = &mut out[o * inner..(o + 1) * inner];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv = *dv + sv;
                }
            }
        }
        let mut shape = base;
        shape[axis] = 1;
        let r = self.requires[input.0];
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::SumAxis { input, axis },
            r,
        )
    }

    pub fn sqrt(&mut self, input: Var) -> Result<Var, GraphError> {
        let t = self.values[input.0].map(|v| v.sqrt());
        let r = self.requires[input.0];
        self.push(t, Op::Sqrt { input }, r)
    }

    pub fn exp(&mut self, input: Var) -> Result<Var, GraphError> {
        let t = self.values[input.0].map(|v| v.exp());
        let r = self.requires[input.0];
        self.push(t, Op::Exp { input }, r)
    }

    pub fn log(&mut self, input: Var) -> Result<Var, GraphError> {
        let t = self.values[input.0].map(|v| v.ln());
        let r = self.requires[input.0];
        self.push(t, Op::Log { input }, r)
    }

    /// Euclidean norm of the whole tensor, as a scalar node.
    pub fn norm2(&mut self, input: Var) -> Result<Var, GraphError> {
        let mut acc = E::zero();
        for &v in self.values[input.0].data() {
            acc = acc + v * v;
        }
        let r = self.requires[input.0];
        self.push(Tensor::scalar(acc.sqrt()), Op::Norm2 { input }, r)
    }

    /// Repeats a trailing singleton axis: [..., 1] -> [..., copies].
    pub fn repeat_last(&mut self, input: Var, copies: usize) -> Result<Var, GraphError> {
        let base = self.shape(input).to_vec();
        if *base.last().unwrap() != 1 || copies == 0 {
            return shape_err("repeat_last", format!("{base:?} x{copies}"));
        }
        let src = self.values[input.0].data();
        let mut out = vec![E::zero(); src.len() * copies];
        for (i, &v) in src.iter().enumerate() {
            for j in 0..copies {
                out[i * copies + j] = v;
            }
        }
        let mut shape = base;
        *shape.last_mut().unwrap() = copies;
        let r = self.requires[input.0];
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::RepeatLast { input, copies },
            r,
        )
    }

    /// [N,C,H,W] -> [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, GraphError> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return shape_err("global_avg_pool", format!("{s:?}"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let inv = E::from_f64(1.0 / plane as f64);
        let src = self.values[input.0].data();
        let mut out = vec![E::zero(); n * c];
        for i in 0..n * c {
            let mut acc = E::zero();
            for &v in &src[i * plane..(i + 1) * plane] {
                acc = acc + v;
            }
            out[i] = acc * inv;
        }
        let r = self.requires[input.0];
        self.push(
            Tensor::new(vec![n, c], out).unwrap(),
            Op::GlobalAvgPool { input },
            r,
        )
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a scalar root. Populates the gradient of every
    /// requires-grad node and accumulates into bound parameters; repeated
    /// calls without `zero_grads` keep accumulating.
    pub fn backward(&mut self, root: Var) -> Result<(), GraphError> {
        if self.values[root.0].numel() != 1 {
            return Err(GraphError::NonScalarRoot(
                self.values[root.0].shape().to_vec(),
            ));
        }
        self.accum(root, &Tensor::scalar(E::one()));
        for i in (0..self.ops.len()).rev() {
            if !self.requires[i] || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            if !g.is_all_finite() {
                return Err(GraphError::Numeric {
                    op: op_name(&self.ops[i]).to_string(),
                    detail: "non-finite gradient".to_string(),
                });
            }
            self.backprop_one(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, add: &Tensor<E>) {
        let slot = &mut self.grads[v.0];
        match slot {
            Some(t) => {
                for (acc, &x) in t.data_mut().iter_mut().zip(add.data()) {
                    *acc = *acc + x;
                }
            }
            None => *slot = Some(add.clone()),
        }
    }

    fn accum_raw(&mut self, v: Var, shape: &[usize], add: Vec<E>) {
        let t = Tensor::new(shape.to_vec(), add).unwrap();
        self.accum(v, &t);
    }

    fn backprop_one(&mut self, i: usize, g: &Tensor<E>) -> Result<(), GraphError> {
        // ops are moved out and restored so parent grads can be mutated
        let op = std::mem::replace(&mut self.ops[i], Op::Input);
        match &op {
            Op::Input => {}
            Op::Param(p) => p.accumulate_grad(g),
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                let want_x = self.requires[input.0];
                let want_w = self.requires[weight.0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.values[input.0].data(),
                    self.values[weight.0].data(),
                    g.data(),
                    dims,
                    want_x,
                    want_w,
                );
                if want_x {
                    let s = self.values[input.0].shape().to_vec();
                    self.accum_raw(*input, &s, dx);
                }
                if want_w {
                    let s = self.values[weight.0].shape().to_vec();
                    self.accum_raw(*weight, &s, dw);
                }
                if let Some(b) = bias {
                    if self.requires[b.0] {
                        self.accum_raw(*b, &[dims.out_ch], db);
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, d) = {
                    let s = self.values[input.0].shape();
                    (s[0], s[1])
                };
                let m = self.values[weight.0].shape()[1];
                if self.requires[input.0] {
                    let dx =
                        kernels::matmul_nt(g.data(), self.values[weight.0].data(), n, m, d);
                    self.accum_raw(*input, &[n, d], dx);
                }
                if self.requires[weight.0] {
                    let dw =
                        kernels::matmul_tn(self.values[input.0].data(), g.data(), d, n, m);
                    self.accum_raw(*weight, &[d, m], dw);
                }
                if self.requires[bias.0] {
                    let mut db = vec![E::zero(); m];
                    for row in g.data().chunks(m) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    self.accum_raw(*bias, &[m], db);
                }
            }
            Op::MatmulNt { a, b } => {
                let (n, d) = {
                    let s = self.values[a.0].shape();
                    (s[0], s[1])
                };
                let m = self.values[b.0].shape()[0];
                if self.requires[a.0] {
                    let da = kernels::matmul(g.data(), self.values[b.0].data(), n, m, d);
                    self.accum_raw(*a, &[n, d], da);
                }
                if self.requires[b.0] {
                    let db = kernels::matmul_tn(g.data(), self.values[a.0].data(), m, n, d);
                    self.accum_raw(*b, &[m, d], db);
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                feat,
                mean,
                rstd,
            } => {
                let feat = *feat;
                let x = self.values[input.0].data();
                let gam = self.values[gamma.0].data();
                let rows = mean.len();
                let inv = E::from_f64(1.0 / feat as f64);
                let mut dx = vec![E::zero(); x.len()];
                let mut dgamma = vec![E::zero(); feat];
                let mut dbeta = vec![E::zero(); feat];
                for r in 0..rows {
                    let (m, s) = (mean[r], rstd[r]);
                    let xr = &x[r * feat..(r + 1) * feat];
                    let gr = &g.data()[r * feat..(r + 1) * feat];
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for j in 0..feat {
                        let xh = (xr[j] - m) * s;
                        let dyg = gr[j] * gam[j];
                        m1 = m1 + dyg;
                        m2 = m2 + dyg * xh;
                        dgamma[j] = dgamma[j] + gr[j] * xh;
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    m1 = m1 * inv;
                    m2 = m2 * inv;
                    let dr = &mut dx[r * feat..(r + 1) * feat];
                    for j in 0..feat {
                        let xh = (xr[j] - m) * s;
                        dr[j] = s * (gr[j] * gam[j] - m1 - xh * m2);
                    }
                }
                if self.requires[input.0] {
                    let sh = self.values[input.0].shape().to_vec();
                    self.accum_raw(*input, &sh, dx);
                }
                if self.requires[gamma.0] {
                    self.accum_raw(*gamma, &[feat], dgamma);
                }
                if self.requires[beta.0] {
                    self.accum_raw(*beta, &[feat], dbeta);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let s = self.values[input.0].shape().to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let plane = h * w;
                let group = n * plane;
                let inv = E::from_f64(1.0 / group as f64);
                let x = self.values[input.0].data();
                let gam = self.values[gamma.0].data();
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                let mut dx = vec![E::zero(); x.len()];
                for ci in 0..c {
                    let (m, sd) = (mean[ci], rstd[ci]);
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for j in 0..plane {
                            let xh = (x[base + j] - m) * sd;
                            let gv = g.data()[base + j];
                            m1 = m1 + gv;
                            m2 = m2 + gv * xh;
                            dgamma[ci] = dgamma[ci] + gv * xh;
                            dbeta[ci] = dbeta[ci] + gv;
                        }
                    }
                    m1 = m1 * inv;
                    m2 = m2 * inv;
                    let scale = sd * gam[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for j in 0..plane {
                            let xh = (x[base + j] - m) * sd;
                            dx[base + j] = scale * (g.data()[base + j] - m1 - xh * m2);
                        }
                    }
                }
                if self.requires[input.0] {
                    self.accum_raw(*input, &s, dx);
                }
                if self.requires[gamma.0] {
                    self.accum_raw(*gamma, &[c], dgamma);
                }
                if self.requires[beta.0] {
                    self.accum_raw(*beta, &[c], dbeta);
                }
            }
            Op::Activation { input, kind, alpha } => {
                if self.requires[input.0] {
                    let y = self.values[i].data();
                    let x = self.values[input.0].data();
                    let a = *alpha;
                    let data: Vec<E> = match kind {
                        ActKind::Sigmoid => y
                            .iter()
                            .zip(g.data())
                            .map(|(&yv, &gv)| gv * yv * (E::one() - yv))
                            .collect(),
                        ActKind::Tanh => y
                            .iter()
                            .zip(g.data())
                            .map(|(&yv, &gv)| gv * (E::one() - yv * yv))
                            .collect(),
                        // subgradient at 0 takes the alpha branch
                        ActKind::LeakyRelu => x
                            .iter()
                            .zip(g.data())
                            .map(|(&xv, &gv)| if xv > E::zero() { gv } else { gv * a })
                            .collect(),
                    };
                    let sh = self.values[input.0].shape().to_vec();
                    self.accum_raw(*input, &sh, data);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                softmax,
                onehot,
            } => {
                if self.requires[logits.0] {
                    let gv = g.item();
                    let data: Vec<E> = softmax
                        .data()
                        .iter()
                        .zip(onehot.data())
                        .map(|(&s, &a)| gv * (s - a))
                        .collect();
                    let sh = softmax.shape().to_vec();
                    self.accum_raw(*logits, &sh, data);
                }
            }
            Op::Add { a, b } => {
                if self.requires[a.0] {
                    self.accum(*a, g);
                }
                if self.requires[b.0] {
                    self.accum(*b, g);
                }
            }
            Op::Sub { a, b } => {
                if self.requires[a.0] {
                    self.accum(*a, g);
                }
                if self.requires[b.0] {
                    let neg = g.map(|v| -v);
                    self.accum(*b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.requires[a.0] {
                    let data: Vec<E> = g
                        .data()
                        .iter()
                        .zip(self.values[b.0].data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    let sh = g.shape().to_vec();
                    self.accum_raw(*a, &sh, data);
                }
                if self.requires[b.0] {
                    let data: Vec<E> = g
                        .data()
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    let sh = g.shape().to_vec();
                    self.accum_raw(*b, &sh, data);
                }
            }
            Op::Div { a, b } => {
                if self.requires[a.0] {
                    let data: Vec<E> = g
                        .data()
                        .iter()
                        .zip(self.values[b.0].data())
                        .map(|(&gv, &bv)| gv / bv)
                        .collect();
                    let sh = g.shape().to_vec();
                    self.accum_raw(*a, &sh, data);
                }
                if self.requires[b.0] {
                    let data: Vec<E> = g
                        .data()
                        .iter()
                        .zip(self.values[a.0].data().iter().zip(self.values[b.0].data()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    let sh = g.shape().to_vec();
                    self.accum_raw(*b, &sh, data);
                }
            }
            Op::Scale { input, factor } => {
                if self.requires[input.0] {
                    let f = *factor;
                    let t = g.map(|v| v * f);
                    self.accum(*input, &t);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.values[i].shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let alen = self.values[p.0].shape()[*axis];
                    if self.requires[p.0] {
                        let mut dp = vec![E::zero(); outer * alen * inner];
                        for o in 0..outer {
                            let src = &g.data()[(o * total + offset) * inner..][..alen * inner];
                            dp[o * alen * inner..(o + 1) * alen * inner].copy_from_slice(src);
                        }
                        let sh = self.values[p.0].shape().to_vec();
                        self.accum_raw(p, &sh, dp);
                    }
                    offset += alen;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                if self.requires[input.0] {
                    let base = self.values[input.0].shape().to_vec();
                    let outer: usize = base[..*axis].iter().product();
                    let inner: usize = base[*axis + 1..].iter().product();
                    let mut dx = vec![E::zero(); self.values[input.0].numel()];
                    for o in 0..outer {
                        let dst = &mut dx[(o * base[*axis] + start) * inner..][..len * inner];
                        dst.copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.accum_raw(*input, &base, dx);
                }
            }
            Op::Reshape { input } => {
                if self.requires[input.0] {
                    let sh = self.values[input.0].shape().to_vec();
                    self.accum_raw(*input, &sh, g.data().to_vec());
                }
            }
            Op::Sum { input } => {
                if self.requires[input.0] {
                    let gv = g.item();
                    let sh = self.values[input.0].shape().to_vec();
                    let n = self.values[input.0].numel();
                    self.accum_raw(*input, &sh, vec![gv; n]);
                }
            }
            Op::Mean { input } => {
                if self.requires[input.0] {
                    let n = self.values[input.0].numel();
                    let gv = g.item() / E::from_f64(n as f64);
                    let sh = self.values[input.0].shape().to_vec();
                    self.accum_raw(*input, &sh, vec![gv; n]);
                }
            }
            Op::SumAxis { input, axis } => {
                if self.requires[input.0] {
                    let base = self.values[input.0].shape().to_vec();
                    let outer: usize = base[..*axis].iter().product();
                    let inner: usize = base[*axis + 1..].iter().product();
                    let alen = base[*axis];
                    let mut dx = vec![E::zero(); self.values[input.0].numel()];
                    for o in 0..outer {
                        let gs = &g.data()[o * inner..(o + 1) * inner];
                        for a in 0..alen {
                            let dst = &mut dx[(o * alen + a) * inner..][..inner];
                            dst.copy_from_slice(gs);
                        }
                    }
                    self.accum_raw(*input, &base, dx);
                }
            }
            Op::Sqrt { input } => {
                if self.requires[input.0] {
                    let tiny = E::from_f64(1e-300);
                    let y = self.values[i].data();
                    let half = E::from_f64(0.5);
                    let data: Vec<E> = y
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &gv)| gv * half / yv.max(tiny))
                        .collect();
                    let sh = self.values[input.0].shape().to_vec();
                    self.accum_raw(*input, &sh, data);
                }
            }
            Op::Exp { input } => {
                if self.requires[input.0] {
                    let data: Vec<E> = self.values[i]
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &gv)| gv * yv)
                        .collect();
                    let sh = self.values[input.0].shape().to_vec();
                    self.accum_raw(*input, &sh, data);
                }
            }
            Op::Log { input } => {
                if self.requires[input.0] {
                    let data: Vec<E> = self.values[input.0]
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv / xv)
                        .collect();
                    let sh = self.values[input.0].shape().to_vec();
                    self.accum_raw(*input, &sh, data);
                }
            }
            Op::Norm2 { input } => {
                if self.requires[input.0] {
                    let norm = self.values[i].item();
                    let gv = g.item();
                    let data: Vec<E> = if norm == E::zero() {
                        vec![E::zero(); self.values[input.0].numel()]
                    } else {
                        self.values[input.0]
                            .data()
                            .iter()
                            .map(|&x| gv * x / norm)
                            .collect()
                    };
                    let sh = self.values[input.0].shape().to_vec();
                    self.accum_raw(*input, &sh, data);
                }
            }
            Op::RepeatLast { input, copies } => {
                if self.requires[input.0] {
                    let n = self.values[input.0].numel();
                    let mut dx = vec![E::zero(); n];
                    for (idx, d) in dx.iter_mut().enumerate() {
                        let mut acc = E::zero();
                        for j in 0..*copies {
                            acc = acc + g.data()[idx * copies + j];
                        }
                        *d = acc;
                    }
                    let sh = self.values[input.0].shape().to_vec();
                    self.accum_raw(*input, &sh, dx);
                }
            }
            Op::GlobalAvgPool { input } => {
                if self.requires[input.0] {
                    let sh = self.values[input.0].shape().to_vec();
                    let plane = sh[2] * sh[3];
                    let inv = E::from_f64(1.0 / plane as f64);
                    let mut dx = vec![E::zero(); self.values[input.0].numel()];
                    for (idx, &gv) in g.data().iter().enumerate() {
                        let v = gv * inv;
                        for d in &mut dx[idx * plane..(idx + 1) * plane] {
                            *d = v;
                        }
                    }
                    self.accum_raw(*input, &sh, dx);
                }
            }
        }
        self.ops[i] = op;
        Ok(())
    }
}
