//! Minimal reverse-mode differentiation: a define-by-run tape with the
//! handful of tensor operations the edge-classification network needs,
//! plus the parameter store and Adam optimizer in [`store`].
//!
//! Tensors are dense row-major buffers. The tape is rebuilt for every
//! mini-batch; [`Graph::backward`] walks it once in reverse. Training
//! runs in `f32`; the same code instantiated at `f64` exists for
//! gradient checking (see [`gradcheck`]).

pub mod gradcheck;
pub mod store;

pub use store::{adam_step, ParamStore};

use crate::{Error, Result};

/// Element type of the tape: `f32` for training, `f64` for checking.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    /// C <- alpha * A(m x k) * B(k x n) + beta * C(m x n), arbitrary strides.
    ///
    /// # Safety
    /// Pointers must cover the strided index ranges.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Forward-pass mode: training normalizes with batch statistics and
/// updates running estimates; evaluation uses the frozen running
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    Linear { x: usize, w: usize, b: Option<usize> },
    Relu { x: usize },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    AddScalar { x: usize },
    ConcatLast { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    NodeToEdgesSrc { x: usize },
    NodeToEdgesDst { x: usize },
    NeighborSum { e: usize },
    BatchNorm(Box<BatchNormCtx<S>>),
    SoftmaxLast { x: usize },
    GatherLast { x: usize, index: usize },
    SumAll { x: usize },
    WeightedCe(Box<WeightedCeCtx<S>>),
}

struct BatchNormCtx<S> {
    x: usize,
    gamma: usize,
    beta: usize,
    training: bool,
    xhat: Vec<S>,
    inv_std: Vec<S>, // per channel
}

struct WeightedCeCtx<S> {
    logits: usize,
    probs: Vec<S>,
    targets: Vec<u8>,
    weights: [S; 2],
    batch: usize,
    n: usize,
}

/// Define-by-run computation tape.
pub struct Graph<S: Scalar> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<S>>,
    grads: Vec<Vec<S>>,
    requires: Vec<bool>,
    ops: Vec<Op<S>>,
    params: Vec<(String, usize)>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, requires: bool, op: Op<S>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.shapes.push(shape);
        self.values.push(value);
        self.grads.push(Vec::new());
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    /// Gradient buffer, if one was populated by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        if self.grads[v.0].is_empty() {
            None
        } else {
            Some(&self.grads[v.0])
        }
    }

    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.values[v.0].len(), 1);
        self.values[v.0][0]
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, shape: Vec<usize>, value: Vec<S>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::Shape(format!(
                "input: shape {shape:?} wants {} values, got {}",
                numel(&shape),
                value.len()
            )));
        }
        Ok(self.push(shape, value, false, Op::Leaf))
    }

    /// Trainable leaf bound to `name` in a parameter store; its gradient
    /// flows back to the store via [`Graph::write_grads`].
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        let p = store.param(name)?;
        let var = self.push(p.shape.clone(), p.value.clone(), true, Op::Leaf);
        self.params.push((name.to_string(), var.0));
        Ok(var)
    }

    /// Copy of `v` cut off from the tape; receives no gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        self.push(self.shapes[v.0].clone(), self.values[v.0].clone(), false, Op::Leaf)
    }

    fn unary_shape(&self, v: Var) -> (Vec<usize>, usize) {
        (self.shapes[v.0].clone(), self.values[v.0].len())
    }

    /// Affine map over the last axis: `y = x * w^T (+ b)` with
    /// `w: [out, in]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = &self.shapes[x.0];
        let ws = &self.shapes[w.0];
        if ws.len() != 2 {
            return Err(Error::Shape(format!("linear: weight must be rank 2, got {ws:?}")));
        }
        let (out_dim, in_dim) = (ws[0], ws[1]);
        if *xs.last().unwrap_or(&0) != in_dim {
            return Err(Error::Shape(format!(
                "linear: input {xs:?} does not match weight {ws:?}"
            )));
        }
        if let Some(b) = b {
            if self.shapes[b.0] != vec![out_dim] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} does not match weight {ws:?}",
                    self.shapes[b.0]
                )));
            }
        }
        let rows = numel(xs) / in_dim;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = out_dim;
        let mut y = vec![S::ZERO; rows * out_dim];
        unsafe {
            S::gemm(
                rows,
                in_dim,
                out_dim,
                S::ONE,
                self.values[x.0].as_ptr(),
                in_dim as isize,
                1,
                self.values[w.0].as_ptr(),
                1,
                in_dim as isize,
                S::ZERO,
                y.as_mut_ptr(),
                out_dim as isize,
                1,
            );
        }
        if let Some(b) = b {
            let bias = &self.values[b.0];
            for row in y.chunks_exact_mut(out_dim) {
                for (o, &bv) in row.iter_mut().zip(bias.iter()) {
                    *o += bv;
                }
            }
        }
        let req = self.requires[x.0] || self.requires[w.0] || b.is_some_and(|b| self.requires[b.0]);
        Ok(self.push(out_shape, y, req, Op::Linear { x: x.0, w: w.0, b: b.map(|v| v.0) }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (shape, _) = self.unary_shape(x);
        let y: Vec<S> = self.values[x.0].iter().map(|&v| v.maximum(S::ZERO)).collect();
        self.push(shape, y, self.requires[x.0], Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (shape, _) = self.unary_shape(x);
        let y: Vec<S> = self.values[x.0]
            .iter()
            .map(|&v| S::ONE / (S::ONE + (-v).exp()))
            .collect();
        self.push(shape, y, self.requires[x.0], Op::Sigmoid { x: x.0 })
    }

    fn binary_same_shape(&self, name: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::Shape(format!(
                "{name}: lhs {:?} vs rhs {:?}",
                self.shapes[a.0], self.shapes[b.0]
            )));
        }
        Ok(self.shapes[a.0].clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("add", a, b)?;
        let y: Vec<S> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &z)| x + z)
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(shape, y, req, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let (shape, _) = self.unary_shape(x);
        let c = S::from_f64(c);
        let y: Vec<S> = self.values[x.0].iter().map(|&v| v + c).collect();
        self.push(shape, y, self.requires[x.0], Op::AddScalar { x: x.0 })
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("elementwise_mul", a, b)?;
        let y: Vec<S> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &z)| x * z)
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(shape, y, req, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("div", a, b)?;
        let y: Vec<S> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &z)| x / z)
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(shape, y, req, Op::Div { a: a.0, b: b.0 }))
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = &self.shapes[a.0];
        let sb = &self.shapes[b.0];
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape(format!("concat: lhs {sa:?} vs rhs {sb:?}")));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = numel(sa) / ca;
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let mut y = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            y.extend_from_slice(&self.values[a.0][r * ca..(r + 1) * ca]);
            y.extend_from_slice(&self.values[b.0][r * cb..(r + 1) * cb]);
        }
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(shape, y, req, Op::ConcatLast { a: a.0, b: b.0 }))
    }

    fn edge_shape_of(&self, name: &str, v: Var) -> Result<[usize; 4]> {
        let s = &self.shapes[v.0];
        if s.len() != 4 || s[1] != s[2] {
            return Err(Error::Shape(format!(
                "{name}: expected edge tensor [batch, n, n, channels], got {s:?}"
            )));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    fn node_shape_of(&self, name: &str, v: Var) -> Result<[usize; 3]> {
        let s = &self.shapes[v.0];
        if s.len() != 3 {
            return Err(Error::Shape(format!(
                "{name}: expected node tensor [batch, n, channels], got {s:?}"
            )));
        }
        Ok([s[0], s[1], s[2]])
    }

    /// Broadcast a node tensor along the target-node axis:
    /// `out[b,i,j,:] = x[b,i,:]`.
    pub fn node_to_edges_src(&mut self, x: Var) -> Result<Var> {
        let [bsz, n, h] = self.node_shape_of("node_to_edges_src", x)?;
        let xv = &self.values[x.0];
        let mut y = Vec::with_capacity(bsz * n * n * h);
        for b in 0..bsz {
            for i in 0..n {
                let src = &xv[(b * n + i) * h..(b * n + i + 1) * h];
                for _ in 0..n {
                    y.extend_from_slice(src);
                }
            }
        }
        Ok(self.push(vec![bsz, n, n, h], y, self.requires[x.0], Op::NodeToEdgesSrc { x: x.0 }))
    }

    /// Broadcast a node tensor along the source-node axis:
    /// `out[b,i,j,:] = x[b,j,:]`.
    pub fn node_to_edges_dst(&mut self, x: Var) -> Result<Var> {
        let [bsz, n, h] = self.node_shape_of("node_to_edges_dst", x)?;
        let xv = &self.values[x.0];
        let mut y = Vec::with_capacity(bsz * n * n * h);
        for b in 0..bsz {
            for _ in 0..n {
                y.extend_from_slice(&xv[b * n * h..(b + 1) * n * h]);
            }
        }
        Ok(self.push(vec![bsz, n, n, h], y, self.requires[x.0], Op::NodeToEdgesDst { x: x.0 }))
    }

    /// Row-wise sum over the neighbor axis, excluding the diagonal:
    /// `out[b,i,:] = sum_{j != i} e[b,i,j,:]`.
    pub fn neighbor_sum(&mut self, e: Var) -> Result<Var> {
        let [bsz, n, _, h] = self.edge_shape_of("neighbor_sum", e)?;
        let ev = &self.values[e.0];
        let mut y = vec![S::ZERO; bsz * n * h];
        for b in 0..bsz {
            for i in 0..n {
                let out = ((b * n) + i) * h;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let inp = (((b * n) + i) * n + j) * h;
                    for c in 0..h {
                        y[out + c] += ev[inp + c];
                    }
                }
            }
        }
        Ok(self.push(vec![bsz, n, h], y, self.requires[e.0], Op::NeighborSum { e: e.0 }))
    }

    /// Batch normalization over all axes but the last (channel) axis.
    ///
    /// In training mode the batch statistics normalize and update the
    /// running buffers in place (momentum `momentum`, unbiased variance
    /// for the running estimate); in evaluation mode the running
    /// buffers normalize and nothing is updated.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [S],
        running_var: &mut [S],
        eps: f64,
        momentum: f64,
        training: bool,
    ) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        let channels = *shape.last().ok_or_else(|| {
            Error::Shape("batch_norm: input must have at least one axis".into())
        })?;
        if self.shapes[gamma.0] != vec![channels] || self.shapes[beta.0] != vec![channels] {
            return Err(Error::Shape(format!(
                "batch_norm: gamma {:?} / beta {:?} do not match channel count {channels}",
                self.shapes[gamma.0], self.shapes[beta.0]
            )));
        }
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::Shape(format!(
                "batch_norm: running stats length {} / {} do not match channel count {channels}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let m = numel(&shape) / channels;
        let xv = &self.values[x.0];
        let eps = S::from_f64(eps);

        let (mean, var): (Vec<S>, Vec<S>) = if training {
            let mut mean = vec![S::ZERO; channels];
            for row in xv.chunks_exact(channels) {
                for (acc, &v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let inv_m = S::ONE / S::from_f64(m as f64);
            for v in &mut mean {
                *v = *v * inv_m;
            }
            let mut var = vec![S::ZERO; channels];
            for row in xv.chunks_exact(channels) {
                for c in 0..channels {
                    let d = row[c] - mean[c];
                    var[c] += d * d;
                }
            }
            for v in &mut var {
                *v = *v * inv_m;
            }
            // update running estimates (unbiased variance)
            let mom = S::from_f64(momentum);
            let keep = S::ONE - mom;
            let unbias = if m > 1 {
                S::from_f64(m as f64 / (m as f64 - 1.0))
            } else {
                S::ONE
            };
            for c in 0..channels {
                running_mean[c] = keep * running_mean[c] + mom * mean[c];
                running_var[c] = keep * running_var[c] + mom * (var[c] * unbias);
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let inv_std: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(channels) {
            for c in 0..channels {
                xhat.push((row[c] - mean[c]) * inv_std[c]);
            }
        }
        let gv = &self.values[gamma.0];
        let bv = &self.values[beta.0];
        let mut y = Vec::with_capacity(xhat.len());
        for row in xhat.chunks_exact(channels) {
            for c in 0..channels {
                y.push(gv[c] * row[c] + bv[c]);
            }
        }
        let req = self.requires[x.0] || self.requires[gamma.0] || self.requires[beta.0];
        Ok(self.push(
            shape,
            y,
            req,
            Op::BatchNorm(Box::new(BatchNormCtx {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                training,
                xhat,
                inv_std,
            })),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        let channels = *shape
            .last()
            .ok_or_else(|| Error::Shape("softmax: input must have at least one axis".into()))?;
        let mut y = Vec::with_capacity(self.values[x.0].len());
        for row in self.values[x.0].chunks_exact(channels) {
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut denom = S::ZERO;
            let exps: Vec<S> = row
                .iter()
                .map(|&v| {
                    let e = (v - mx).exp();
                    denom += e;
                    e
                })
                .collect();
            for e in exps {
                y.push(e / denom);
            }
        }
        Ok(self.push(shape, y, self.requires[x.0], Op::SoftmaxLast { x: x.0 }))
    }

    /// Select one index of the last axis, dropping that axis.
    pub fn gather(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        let channels = *shape
            .last()
            .ok_or_else(|| Error::Shape("gather: input must have at least one axis".into()))?;
        if index >= channels {
            return Err(Error::Shape(format!(
                "gather: index {index} out of range for last axis {channels}"
            )));
        }
        let out_shape = shape[..shape.len() - 1].to_vec();
        let y: Vec<S> = self.values[x.0]
            .chunks_exact(channels)
            .map(|row| row[index])
            .collect();
        Ok(self.push(out_shape, y, self.requires[x.0], Op::GatherLast { x: x.0, index }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = S::ZERO;
        for &v in &self.values[x.0] {
            acc += v;
        }
        self.push(vec![1], vec![acc], self.requires[x.0], Op::SumAll { x: x.0 })
    }

    /// Class-weighted cross-entropy over off-diagonal directed edges,
    /// averaged over `batch * n * (n-1)` terms.
    ///
    /// `logits` has shape `[batch, n, n, 2]`; `targets` holds the 0/1
    /// class per directed edge in the same row-major order (diagonal
    /// entries are ignored).
    pub fn weighted_ce_loss(
        &mut self,
        logits: Var,
        targets: &[u8],
        w0: f64,
        w1: f64,
    ) -> Result<Var> {
        let s = self.shapes[logits.0].clone();
        if s.len() != 4 || s[1] != s[2] || s[3] != 2 {
            return Err(Error::Shape(format!(
                "weighted_ce_loss: expected logits [batch, n, n, 2], got {s:?}"
            )));
        }
        let (bsz, n) = (s[0], s[1]);
        if targets.len() != bsz * n * n {
            return Err(Error::Shape(format!(
                "weighted_ce_loss: {} targets for {} edges",
                targets.len(),
                bsz * n * n
            )));
        }
        let weights = [S::from_f64(w0), S::from_f64(w1)];
        let denom = S::from_f64((bsz * n * (n - 1)) as f64);
        let lv = &self.values[logits.0];
        let mut probs = Vec::with_capacity(lv.len());
        let mut acc = S::ZERO;
        for (edge, pair) in lv.chunks_exact(2).enumerate() {
            let (l0, l1) = (pair[0], pair[1]);
            let mx = l0.maximum(l1);
            let (e0, e1) = ((l0 - mx).exp(), (l1 - mx).exp());
            let z = e0 + e1;
            let (p0, p1) = (e0 / z, e1 / z);
            probs.push(p0);
            probs.push(p1);
            let i = (edge / n) % n;
            let j = edge % n;
            if i == j {
                continue;
            }
            let y = targets[edge];
            let logp = if y == 1 { l1 - mx - z.ln() } else { l0 - mx - z.ln() };
            acc += -weights[y as usize] * logp;
        }
        let loss = acc / denom;
        Ok(self.push(
            vec![1],
            vec![loss],
            self.requires[logits.0],
            Op::WeightedCe(Box::new(WeightedCeCtx {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
                weights,
                batch: bsz,
                n,
            })),
        ))
    }

    fn ensure_grad(&mut self, idx: usize) {
        if self.requires[idx] && self.grads[idx].is_empty() {
            self.grads[idx] = vec![S::ZERO; self.values[idx].len()];
        }
    }

    /// Reverse pass from a scalar loss; populates gradients of all
    /// reachable parameters. A second call without rebuilding the tape
    /// is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; rebuild the graph before calling again".into(),
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar, got shape {:?}",
                self.shapes[loss.0]
            )));
        }
        self.backward_done = true;
        if !self.requires[loss.0] {
            return Ok(()); // nothing reachable
        }
        self.grads[loss.0] = vec![S::ONE];
        for k in (0..self.ops.len()).rev() {
            if !self.requires[k] || self.grads[k].is_empty() {
                continue;
            }
            let gout = std::mem::take(&mut self.grads[k]);
            self.backward_step(k, &gout);
            self.grads[k] = gout;
        }
        Ok(())
    }

    fn backward_step(&mut self, k: usize, gout: &[S]) {
        // borrow trick: ops[k] is temporarily swapped out so that
        // values/grads of other nodes can be borrowed freely
        let op = std::mem::replace(&mut self.ops[k], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let in_dim = *self.shapes[*x].last().unwrap();
                let out_dim = *self.shapes[k].last().unwrap();
                let rows = self.values[*x].len() / in_dim;
                if self.requires[*x] {
                    self.ensure_grad(*x);
                    unsafe {
                        S::gemm(
                            rows,
                            out_dim,
                            in_dim,
                            S::ONE,
                            gout.as_ptr(),
                            out_dim as isize,
                            1,
                            self.values[*w].as_ptr(),
                            in_dim as isize,
                            1,
                            S::ONE,
                            self.grads[*x].as_mut_ptr(),
                            in_dim as isize,
                            1,
                        );
                    }
                }
                if self.requires[*w] {
                    self.ensure_grad(*w);
                    unsafe {
                        S::gemm(
                            out_dim,
                            rows,
                            in_dim,
                            S::ONE,
                            gout.as_ptr(),
                            1,
                            out_dim as isize,
                            self.values[*x].as_ptr(),
                            in_dim as isize,
                            1,
                            S::ONE,
                            self.grads[*w].as_mut_ptr(),
                            in_dim as isize,
                            1,
                        );
                    }
                }
                if let Some(b) = b {
                    if self.requires[*b] {
                        self.ensure_grad(*b);
                        let gb = &mut self.grads[*b];
                        for row in gout.chunks_exact(out_dim) {
                            for (acc, &g) in gb.iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.requires[*x] {
                    self.ensure_grad(*x);
                    let yv = &self.values[k];
                    for ((g, &y), &go) in
                        self.grads[*x].iter_mut().zip(yv.iter()).zip(gout.iter())
                    {
                        if y > S::ZERO {
                            *g += go;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.requires[*x] {
                    self.ensure_grad(*x);
                    let yv = &self.values[k];
                    for ((g, &y), &go) in
                        self.grads[*x].iter_mut().zip(yv.iter()).zip(gout.iter())
                    {
                        *g += go * y * (S::ONE - y);
                    }
                }
            }
            Op::Add { a, b } => {
                for &p in [a, b].iter() {
                    if self.requires[*p] {
                        self.ensure_grad(*p);
                        for (g, &go) in self.grads[*p].iter_mut().zip(gout.iter()) {
                            *g += go;
                        }
                    }
                }
            }
            Op::AddScalar { x } => {
                if self.requires[*x] {
                    self.ensure_grad(*x);
                    for (g, &go) in self.grads[*x].iter_mut().zip(gout.iter()) {
                        *g += go;
                    }
                }
            }
            Op::ConcatLast { a, b } => {
                let ca = *self.shapes[*a].last().unwrap();
                let cb = *self.shapes[*b].last().unwrap();
                if self.requires[*a] {
                    self.ensure_grad(*a);
                    let ga = &mut self.grads[*a];
                    for (r, row) in gout.chunks_exact(ca + cb).enumerate() {
                        for c in 0..ca {
                            ga[r * ca + c] += row[c];
                        }
                    }
                }
                if self.requires[*b] {
                    self.ensure_grad(*b);
                    let gb = &mut self.grads[*b];
                    for (r, row) in gout.chunks_exact(ca + cb).enumerate() {
                        for c in 0..cb {
                            gb[r * cb + c] += row[ca + c];
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.requires[*a] {
                    self.ensure_grad(*a);
                    let bv = &self.values[*b];
                    let ga = &mut self.grads[*a];
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bv[i];
                    }
                }
                if self.requires[*b] {
                    self.ensure_grad(*b);
                    let av = &self.values[*a];
                    let gb = &mut self.grads[*b];
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * av[i];
                    }
                }
            }
            Op::Div { a, b } => {
                if self.requires[*a] {
                    self.ensure_grad(*a);
                    let bv = &self.values[*b];
                    let ga = &mut self.grads[*a];
                    for i in 0..gout.len() {
                        ga[i] += gout[i] / bv[i];
                    }
                }
                if self.requires[*b] {
                    self.ensure_grad(*b);
                    let av = &self.values[*a];
                    let bv = &self.values[*b];
                    let gb = &mut self.grads[*b];
                    for i in 0..gout.len() {
                        gb[i] += -gout[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::NodeToEdgesSrc { x } => {
                if self.requires[*x] {
                    self.ensure_grad(*x);
                    let s = &self.shapes[k];
                    let (bsz, n, h) = (s[0], s[1], s[3]);
                    let gx = &mut self.grads[*x];
                    for b in 0..bsz {
                        for i in 0..n {
                            let out = (b * n + i) * h;
                            for j in 0..n {
                                let inp = ((b * n + i) * n + j) * h;
                                for c in 0..h {
                                    gx[out + c] += gout[inp + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::NodeToEdgesDst { x } => {
                if self.requires[*x] {
                    self.ensure_grad(*x);
                    let s = &self.shapes[k];
                    let (bsz, n, h) = (s[0], s[1], s[3]);
                    let gx = &mut self.grads[*x];
                    for b in 0..bsz {
                        for i in 0..n {
                            for j in 0..n {
                                let inp = ((b * n + i) * n + j) * h;
                                let out = (b * n + j) * h;
                                for c in 0..h {
                                    gx[out + c] += gout[inp + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::NeighborSum { e } => {
                if self.requires[*e] {
                    self.ensure_grad(*e);
                    let s = &self.shapes[*e];
                    let (bsz, n, h) = (s[0], s[1], s[3]);
                    let ge = &mut self.grads[*e];
                    for b in 0..bsz {
                        for i in 0..n {
                            let out = (b * n + i) * h;
                            for j in 0..n {
                                if j == i {
                                    continue;
                                }
                                let inp = ((b * n + i) * n + j) * h;
                                for c in 0..h {
                                    ge[inp + c] += gout[out + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm(ctx) => {
                let channels = self.values[ctx.gamma].len();
                let m = self.values[ctx.x].len() / channels;
                let inv_m = S::ONE / S::from_f64(m as f64);
                let gv = self.values[ctx.gamma].clone();
                // per-channel reductions shared by every input
                let mut sum_dy = vec![S::ZERO; channels];
                let mut sum_dy_xhat = vec![S::ZERO; channels];
                for (row_g, row_x) in gout
                    .chunks_exact(channels)
                    .zip(ctx.xhat.chunks_exact(channels))
                {
                    for c in 0..channels {
                        sum_dy[c] += row_g[c];
                        sum_dy_xhat[c] += row_g[c] * row_x[c];
                    }
                }
                if self.requires[ctx.beta] {
                    self.ensure_grad(ctx.beta);
                    for (g, &s) in self.grads[ctx.beta].iter_mut().zip(&sum_dy) {
                        *g += s;
                    }
                }
                if self.requires[ctx.gamma] {
                    self.ensure_grad(ctx.gamma);
                    for (g, &s) in self.grads[ctx.gamma].iter_mut().zip(&sum_dy_xhat) {
                        *g += s;
                    }
                }
                if self.requires[ctx.x] {
                    self.ensure_grad(ctx.x);
                    let gx = &mut self.grads[ctx.x];
                    if ctx.training {
                        for r in 0..m {
                            for c in 0..channels {
                                let i = r * channels + c;
                                let term = gout[i]
                                    - sum_dy[c] * inv_m
                                    - ctx.xhat[i] * sum_dy_xhat[c] * inv_m;
                                gx[i] += gv[c] * ctx.inv_std[c] * term;
                            }
                        }
                    } else {
                        for r in 0..m {
                            for c in 0..channels {
                                let i = r * channels + c;
                                gx[i] += gout[i] * gv[c] * ctx.inv_std[c];
                            }
                        }
                    }
                }
            }
            Op::SoftmaxLast { x } => {
                if self.requires[*x] {
                    self.ensure_grad(*x);
                    let channels = *self.shapes[k].last().unwrap();
                    let yv = &self.values[k];
                    let gx = &mut self.grads[*x];
                    for r in 0..yv.len() / channels {
                        let base = r * channels;
                        let mut dot = S::ZERO;
                        for c in 0..channels {
                            dot += gout[base + c] * yv[base + c];
                        }
                        for c in 0..channels {
                            gx[base + c] += yv[base + c] * (gout[base + c] - dot);
                        }
                    }
                }
            }
            Op::GatherLast { x, index } => {
                if self.requires[*x] {
                    self.ensure_grad(*x);
                    let channels = *self.shapes[*x].last().unwrap();
                    let gx = &mut self.grads[*x];
                    for (r, &go) in gout.iter().enumerate() {
                        gx[r * channels + index] += go;
                    }
                }
            }
            Op::SumAll { x } => {
                if self.requires[*x] {
                    self.ensure_grad(*x);
                    let go = gout[0];
                    for g in self.grads[*x].iter_mut() {
                        *g += go;
                    }
                }
            }
            Op::WeightedCe(ctx) => {
                if self.requires[ctx.logits] {
                    self.ensure_grad(ctx.logits);
                    let scale =
                        gout[0] / S::from_f64((ctx.batch * ctx.n * (ctx.n - 1)) as f64);
                    let n = ctx.n;
                    let gl = &mut self.grads[ctx.logits];
                    for edge in 0..ctx.targets.len() {
                        let i = (edge / n) % n;
                        let j = edge % n;
                        if i == j {
                            continue;
                        }
                        let y = ctx.targets[edge] as usize;
                        let w = ctx.weights[y];
                        for cls in 0..2 {
                            let p = ctx.probs[edge * 2 + cls];
                            let ind = if cls == y { S::ONE } else { S::ZERO };
                            gl[edge * 2 + cls] += scale * w * (p - ind);
                        }
                    }
                }
            }
        }
        self.ops[k] = op;
    }

    /// Hash of the sign pattern of every rectifier activation on the
    /// tape. Finite-difference probes whose two evaluations disagree
    /// here straddle a kink, where a central difference does not
    /// estimate the derivative.
    pub fn activation_signature(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64; // FNV-1a offset basis
        for (op, value) in self.ops.iter().zip(&self.values) {
            if let Op::Relu { .. } = op {
                for &v in value {
                    hash ^= u64::from(v > S::ZERO);
                    hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        hash
    }

    /// Accumulate parameter gradients back into their store entries.
    pub fn write_grads(&self, store: &mut ParamStore<S>) -> Result<()> {
        for (name, idx) in &self.params {
            if !self.grads[*idx].is_empty() {
                store.accumulate_grad(name, &self.grads[*idx])?;
            }
        }
        Ok(())
    }
}
