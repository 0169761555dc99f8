//! Op vocabulary, execution contexts, and the reverse-mode tape.
//!
//! Layer code is written once against [`Ctx`]. Running it on [`Eager`]
//! computes values directly (optionally tracing cost per op); running it on
//! [`Tape`] records a [`DifferentiableGraph`](Tape) that [`Tape::backward`]
//! walks in reverse to produce vector-Jacobian products.

use crate::error::{Error, Result};
use crate::ops::{self, Activation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    MatMul,
    Bmm { trans_b: bool },
    Conv2d { stride: usize, pad: usize },
    AvgPool2d,
    MaxPool2d { k: usize, stride: usize, pad: usize },
    BatchNorm { eps: f64 },
    Act(Activation),
    Sigmoid,
    Softmax,
    GlobalAvgPool,
    Add,
    Mul,
    Scale(f64),
    MulChannel,
    AddBias,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    RelLogits2d { h: usize, w: usize },
    AbsLogits,
    SumAll,
    ArgMax,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d => "avg_pool2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::BatchNorm { .. } => "batchnorm_affine",
            Op::Act(_) => "activation",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax_lastdim",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MulChannel => "mul_channel",
            Op::AddBias => "add_bias",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::RelLogits2d { .. } => "rel_logits_2d",
            Op::AbsLogits => "abs_logits",
            Op::SumAll => "sum_all",
            Op::ArgMax => "argmax",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::MatMul | Op::Bmm { .. } | Op::Conv2d { .. } | Op::Add | Op::Mul => 2,
            Op::MulChannel | Op::AddBias | Op::AbsLogits => 2,
            Op::BatchNorm { .. } => 5,
            Op::RelLogits2d { .. } => 3,
            _ => 1,
        }
    }

    pub fn eval<T: Scalar>(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if inputs.len() != self.arity() {
            return Err(Error::shape(
                self.name(),
                format!("expected {} inputs, got {}", self.arity(), inputs.len()),
            ));
        }
        let x = inputs[0];
        match self {
            Op::MatMul => ops::matmul(x, inputs[1]),
            Op::Bmm { trans_b } => ops::bmm(x, inputs[1], *trans_b),
            Op::Conv2d { stride, pad } => ops::conv2d(x, inputs[1], *stride, *pad),
            Op::AvgPool2d => ops::avg_pool2d(x),
            Op::MaxPool2d { k, stride, pad } => ops::max_pool2d(x, *k, *stride, *pad),
            Op::BatchNorm { eps } => {
                ops::batchnorm_affine(x, inputs[1], inputs[2], inputs[3], inputs[4], T::of(*eps))
            }
            Op::Act(kind) => Ok(ops::activation(x, *kind)),
            Op::Sigmoid => Ok(ops::sigmoid(x)),
            Op::Softmax => Ok(ops::softmax_lastdim(x)),
            Op::GlobalAvgPool => ops::global_avg_pool(x),
            Op::Add => ops::add(x, inputs[1]),
            Op::Mul => ops::mul(x, inputs[1]),
            Op::Scale(s) => Ok(ops::scale(x, T::of(*s))),
            Op::MulChannel => ops::mul_channel(x, inputs[1]),
            Op::AddBias => ops::add_bias(x, inputs[1]),
            Op::Reshape(shape) => x.reshape(shape),
            Op::Permute(axes) => ops::permute(x, axes),
            Op::RelLogits2d { h, w } => ops::rel_logits_2d(x, inputs[1], inputs[2], *h, *w),
            Op::AbsLogits => ops::abs_logits(x, inputs[1]),
            Op::SumAll => Ok(Tensor::scalar(x.sum())),
            Op::ArgMax => {
                let rows = x.shape()[..x.rank() - 1].to_vec();
                let rows = if rows.is_empty() { vec![1] } else { rows };
                let idx = ops::argmax_last(x).into_iter().map(|i| T::of(i as f64)).collect();
                Tensor::new(&rows, idx)
            }
        }
    }

    /// Cotangents for every input given the output cotangent `gy`.
    pub fn vjp<T: Scalar>(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        gy: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let x = inputs[0];
        Ok(match self {
            Op::MatMul => {
                let (m, k) = (x.shape()[0], x.shape()[1]);
                let n = inputs[1].shape()[1];
                let bt = ops::transpose2(inputs[1].data(), k, n);
                let at = ops::transpose2(x.data(), m, k);
                vec![
                    Tensor::from_parts(vec![m, k], ops::gemm(gy.data(), &bt, m, n, k)),
                    Tensor::from_parts(vec![k, n], ops::gemm(&at, gy.data(), k, m, n)),
                ]
            }
            Op::Bmm { trans_b } => {
                let b = inputs[1];
                if *trans_b {
                    // y = a b^T: da = g b, db = g^T a
                    let gt = ops::permute(gy, &[0, 2, 1])?;
                    vec![ops::bmm(gy, b, false)?, ops::bmm(&gt, x, false)?]
                } else {
                    // y = a b: da = g b^T, db = a^T g
                    let at = ops::permute(x, &[0, 2, 1])?;
                    vec![ops::bmm(gy, b, true)?, ops::bmm(&at, gy, false)?]
                }
            }
            Op::Conv2d { stride, pad } => {
                let (dx, dw) = ops::conv2d_vjp(x, inputs[1], *stride, *pad, gy)?;
                vec![dx, dw]
            }
            Op::AvgPool2d => vec![ops::avg_pool2d_vjp(x.shape(), gy)],
            Op::MaxPool2d { k, stride, pad } => vec![ops::max_pool2d_vjp(x, *k, *stride, *pad, gy)?],
            Op::BatchNorm { eps } => {
                ops::batchnorm_vjp(x, inputs[1], inputs[3], inputs[4], T::of(*eps), gy).to_vec()
            }
            Op::Act(kind) => vec![ops::activation_vjp(x, *kind, gy)],
            Op::Sigmoid => vec![output.zip_map(gy, "sigmoid", |s, g| g * s * (T::one() - s))?],
            Op::Softmax => vec![ops::softmax_vjp(output, gy)],
            Op::GlobalAvgPool => {
                let (_, _, h, w) = x.nchw("global_avg_pool")?;
                let denom = T::of((h * w) as f64);
                let g = gy.data();
                vec![Tensor::from_fn(x.shape(), |i| g[i / (h * w)] / denom)]
            }
            Op::Add => vec![gy.clone(), gy.clone()],
            Op::Mul => vec![ops::mul(gy, inputs[1])?, ops::mul(gy, x)?],
            Op::Scale(s) => vec![ops::scale(gy, T::of(*s))],
            Op::MulChannel => {
                let s = inputs[1];
                let (n, c, h, w) = x.nchw("mul_channel")?;
                let hw = h * w;
                let dx = ops::mul_channel(gy, s)?;
                let ds = (0..n * c)
                    .map(|p| {
                        (0..hw).fold(T::zero(), |a, i| a + gy.data()[p * hw + i] * x.data()[p * hw + i])
                    })
                    .collect();
                vec![dx, Tensor::from_parts(vec![n, c], ds)]
            }
            Op::AddBias => {
                let f = inputs[1].numel();
                let mut db = vec![T::zero(); f];
                for (i, &g) in gy.data().iter().enumerate() {
                    db[i % f] = db[i % f] + g;
                }
                vec![gy.clone(), Tensor::from_parts(vec![f], db)]
            }
            Op::Reshape(_) => vec![gy.reshape(x.shape())?],
            Op::Permute(axes) => vec![ops::permute(gy, &ops::inverse_axes(axes))?],
            Op::RelLogits2d { h, w } => {
                ops::rel_logits_2d_vjp(x, inputs[1], inputs[2], *h, *w, gy).to_vec()
            }
            Op::AbsLogits => ops::abs_logits_vjp(x, inputs[1], gy).to_vec(),
            Op::SumAll => vec![Tensor::full(x.shape(), gy.data()[0])],
            Op::ArgMax => return Err(Error::UnsupportedOp("argmax")),
        })
    }

    /// Multiply-accumulates performed by one invocation, under the cost-model
    /// convention (normalisation, activations, pooling, softmax and
    /// element-wise ops are free).
    pub fn madds(&self, inputs: &[&[usize]], output: &[usize]) -> u64 {
        let p = |s: &[usize]| s.iter().product::<usize>() as u64;
        match self {
            // output numel times reduction length
            Op::MatMul => p(output) * inputs[0][1] as u64,
            Op::Bmm { .. } => p(output) * inputs[0][2] as u64,
            Op::Conv2d { .. } => {
                let w = inputs[1];
                p(output) * (w[1] * w[2] * w[3]) as u64
            }
            Op::RelLogits2d { h, w } => {
                let q = inputs[0];
                (q[0] * q[1] * (2 * h - 1 + 2 * w - 1) * q[2]) as u64
            }
            Op::AbsLogits => p(output) * inputs[0][2] as u64,
            _ => 0,
        }
    }
}

/// An execution context that layer code runs against.
pub trait Ctx<T: Scalar> {
    type V: Clone;

    fn apply(&mut self, op: Op, inputs: &[&Self::V]) -> Result<Self::V>;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;
    /// Introduces a tensor that is not the output of any op.
    fn input(&mut self, t: Tensor<T>) -> Self::V;
    /// Labels subsequent ops (used for per-stage cost attribution).
    fn set_stage(&mut self, _stage: &str) {}

    fn shape<'a>(&'a self, v: &'a Self::V) -> &'a [usize] {
        self.value(v).shape()
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::MatMul, &[a, b])
    }
    fn bmm(&mut self, a: &Self::V, b: &Self::V, trans_b: bool) -> Result<Self::V> {
        self.apply(Op::Bmm { trans_b }, &[a, b])
    }
    fn conv2d(&mut self, x: &Self::V, w: &Self::V, stride: usize, pad: usize) -> Result<Self::V> {
        self.apply(Op::Conv2d { stride, pad }, &[x, w])
    }
    fn avg_pool2d(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::AvgPool2d, &[x])
    }
    fn max_pool2d(&mut self, x: &Self::V, k: usize, stride: usize, pad: usize) -> Result<Self::V> {
        self.apply(Op::MaxPool2d { k, stride, pad }, &[x])
    }
    #[allow(clippy::too_many_arguments)]
    fn batchnorm(
        &mut self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        mean: &Self::V,
        var: &Self::V,
        eps: f64,
    ) -> Result<Self::V> {
        self.apply(Op::BatchNorm { eps }, &[x, gamma, beta, mean, var])
    }
    fn act(&mut self, x: &Self::V, kind: Activation) -> Result<Self::V> {
        self.apply(Op::Act(kind), &[x])
    }
    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::Sigmoid, &[x])
    }
    fn softmax(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::Softmax, &[x])
    }
    fn global_avg_pool(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::GlobalAvgPool, &[x])
    }
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Add, &[a, b])
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Mul, &[a, b])
    }
    fn scale(&mut self, x: &Self::V, s: f64) -> Result<Self::V> {
        self.apply(Op::Scale(s), &[x])
    }
    fn mul_channel(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V> {
        self.apply(Op::MulChannel, &[x, s])
    }
    fn add_bias(&mut self, x: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::AddBias, &[x, b])
    }
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }
    fn permute(&mut self, x: &Self::V, axes: &[usize]) -> Result<Self::V> {
        self.apply(Op::Permute(axes.to_vec()), &[x])
    }
    fn rel_logits_2d(
        &mut self,
        q: &Self::V,
        r_h: &Self::V,
        r_w: &Self::V,
        h: usize,
        w: usize,
    ) -> Result<Self::V> {
        self.apply(Op::RelLogits2d { h, w }, &[q, r_h, r_w])
    }
    fn abs_logits(&mut self, q: &Self::V, pos: &Self::V) -> Result<Self::V> {
        self.apply(Op::AbsLogits, &[q, pos])
    }
    fn sum_all(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::SumAll, &[x])
    }
}

/// One executed op as seen by a tracing [`Eager`] context.
#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub op: &'static str,
    pub stage: String,
    pub madds: u64,
    pub out_shape: Vec<usize>,
}

/// Direct evaluation. With tracing on, every op is logged with its
/// multiply-add count and output shape.
#[derive(Debug, Default)]
pub struct Eager {
    stage: String,
    trace: Option<Vec<OpRecord>>,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracing() -> Self {
        Self {
            stage: String::new(),
            trace: Some(Vec::new()),
        }
    }

    pub fn records(&self) -> &[OpRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn total_madds(&self) -> u64 {
        self.records().iter().map(|r| r.madds).sum()
    }
}

impl<T: Scalar> Ctx<T> for Eager {
    type V = Tensor<T>;

    fn apply(&mut self, op: Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let out = op.eval(inputs)?;
        if let Some(trace) = &mut self.trace {
            let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
            trace.push(OpRecord {
                op: op.name(),
                stage: self.stage.clone(),
                madds: op.madds(&shapes, out.shape()),
                out_shape: out.shape().to_vec(),
            });
        }
        Ok(out)
    }

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn input(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn set_stage(&mut self, stage: &str) {
        self.stage = stage.to_string();
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Tensor<T>,
}

/// Ordered record of executed ops: the differentiable graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Re-executes every recorded op from the leaves, returning all node values.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut vals: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                None => node.value.clone(),
                Some(op) => {
                    let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &vals[i]).collect();
                    op.eval(&ins)?
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Reverse sweep from `output` seeded with `cotangent`.
    pub fn backward(&self, output: Var, cotangent: &Tensor<T>) -> Result<Gradients<T>> {
        let out_shape = self.nodes[output.0].value.shape();
        if out_shape != cotangent.shape() {
            return Err(Error::dims("vjp", out_shape, cotangent.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(cotangent.clone());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            let Some(gy) = grads[idx].take() else { continue };
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let gins = op.vjp(&ins, &node.value, &gy)?;
            for (&i, g) in node.inputs.iter().zip(gins) {
                grads[i] = Some(match grads[i].take() {
                    None => g,
                    Some(acc) => ops::add(&acc, &g)?,
                });
            }
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }
}

impl<T: Scalar> Ctx<T> for Tape<T> {
    type V = Var;

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let value = {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.eval(&ins)?
        };
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t)
    }
}

/// Gradients for every node on a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// None when the node does not influence the differentiated output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros of `shape` when it does not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Reverse-mode vector-Jacobian product of a recorded graph.
pub fn vjp<T: Scalar>(graph: &Tape<T>, output: Var, cotangent: &Tensor<T>) -> Result<Gradients<T>> {
    graph.backward(output, cotangent)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - fd| / max(1, |analytic|)
    pub max_rel_err: f64,
    pub coords: usize,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: (usize, usize),
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(&out);
        if v.numel() != 1 {
            return Err(Error::shape("grad_check", format!("output must be scalar, got {:?}", v.shape())));
        }
        if !v.all_finite() {
            return Err(Error::NonFinite(format!("forward value {:?}", v.data()[0])));
        }
        Ok((tape, out))
    };
    let scalar = |xs: &[Tensor<f64>]| -> Result<f64> {
        let (tape, out) = eval(xs)?;
        Ok(tape.value(&out).data()[0])
    };

    let (tape, out) = eval(inputs)?;
    let cot = Tensor::ones(tape.value(&out).shape());
    let grads = tape.backward(out, &cot)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords: 0,
        worst: (0, 0),
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(Var(ii), x.shape());
        for c in 0..x.numel() {
            let mut plus = x.to_vec();
            plus[c] += h;
            work[ii] = Tensor::new(x.shape(), plus)?;
            let fp = scalar(&work)?;
            let mut minus = x.to_vec();
            minus[c] -= h;
            work[ii] = Tensor::new(x.shape(), minus)?;
            let fm = scalar(&work)?;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.data()[c];
            let err = (a - fd).abs() / a.abs().max(1.0);
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = (ii, c);
            }
            report.coords += 1;
        }
        work[ii] = x.clone();
    }
    Ok(report)
}
