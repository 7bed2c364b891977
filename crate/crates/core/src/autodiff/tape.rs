//! Reverse-mode tape. Every primitive appends one node; `backward` walks the
//! nodes in exact reverse order.

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, inverse_axes, permute};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel statistics of one train-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, the quantity running estimates track.
    pub var_unbiased: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients for every node reached by `backward`.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `y = x W + b` over the last axis of `x`; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let inner = *xs.last().expect("non-empty shape");
        if ws.len() != 2 || ws[0] != inner {
            return Err(shape_err(format!("linear: x {xs:?} vs W {ws:?}")));
        }
        let out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err(format!("linear: bias {:?} vs out {out}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / inner;
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                y[r * out..(r + 1) * out].copy_from_slice(bv);
            }
        }
        gemm_nn(rows, inner, out, self.value(x).data(), self.value(w).data(), &mut y);
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = out;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(shape, y)?, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched matrix product over leading axes: `[.., m, k] x [.., k, n]`, or with
    /// `transpose_b`, `[.., m, k] x [.., n, k]^T`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err(format!("batch_matmul: {sa:?} vs {sb:?}")));
        }
        let nd = sa.len();
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if transpose_b {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        if k != kb {
            return Err(shape_err(format!("batch_matmul inner: {sa:?} vs {sb:?}")));
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let mut c = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let aa = &ad[bi * m * k..(bi + 1) * m * k];
            let bb = &bd[bi * k * n..(bi + 1) * k * n];
            let cc = &mut c[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                gemm_nt(m, k, n, aa, bb, cc);
            } else {
                gemm_nn(m, k, n, aa, bb, cc);
            }
        }
        let mut shape = sa;
        shape[nd - 1] = n;
        Ok(self.push(
            Tensor::new(shape, c)?,
            Op::BatchMatMul { a, b, transpose_b },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * c).collect())
            .expect("same shape");
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&e| if e > T::zero() { e } else { T::zero() }).collect(),
        )
        .expect("same shape");
        self.push(t, Op::Relu(x), &[x])
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Normalizes the last axis, then applies the learnable affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(format!("layer_norm: affine params must be [{d}]")));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let rows = v.numel() / d;
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); v.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &e) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (e - mean) * is;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let y: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let t = Tensor::new(v.shape().to_vec(), y)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Train-mode batch norm over axis 0 of a `[batch, channels]` input.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(shape_err(format!("batch_norm expects [B, C], got {:?}", v.shape())));
        }
        let (bsz, c) = (v.shape()[0], v.shape()[1]);
        if bsz < 2 {
            return Err(Error::DegenerateBatch(bsz));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!("batch_norm: affine params must be [{c}]")));
        }
        let bn = T::of(bsz as f64);
        let eps = T::of(BATCH_NORM_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for r in 0..bsz {
            for (m, &e) in mean.iter_mut().zip(&v.data()[r * c..(r + 1) * c]) {
                *m += e;
            }
        }
        for m in mean.iter_mut() {
            *m = *m / bn;
        }
        for r in 0..bsz {
            for ((s, &e), &m) in var.iter_mut().zip(&v.data()[r * c..(r + 1) * c]).zip(&mean) {
                *s += (e - m) * (e - m);
            }
        }
        let var_unbiased: Vec<T> = var.iter().map(|&s| s / T::of((bsz - 1) as f64)).collect();
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / bn + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); bsz * c];
        for r in 0..bsz {
            for ch in 0..c {
                xhat[r * c + ch] = (v.data()[r * c + ch] - mean[ch]) * inv_std[ch];
            }
        }
        let y = self.bn_affine(&xhat, c, gamma, beta);
        let t = Tensor::new(vec![bsz, c], y)?;
        let out = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            &[x, gamma, beta],
        );
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Eval-mode batch norm using running statistics; each row is processed independently.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(shape_err(format!("batch_norm expects [B, C], got {:?}", v.shape())));
        }
        let (bsz, c) = (v.shape()[0], v.shape()[1]);
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm: running stats width".into()));
        }
        let eps = T::of(BATCH_NORM_EPS);
        let inv_std: Vec<T> = running_var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); bsz * c];
        for r in 0..bsz {
            for ch in 0..c {
                xhat[r * c + ch] = (v.data()[r * c + ch] - running_mean[ch]) * inv_std[ch];
            }
        }
        let y = self.bn_affine(&xhat, c, gamma, beta);
        let t = Tensor::new(vec![bsz, c], y)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            &[x, gamma, beta],
        ))
    }

    fn bn_affine(&self, xhat: &[T], c: usize, gamma: Var, beta: Var) -> Vec<T> {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        xhat.iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % c] + b[i % c])
            .collect()
    }

    /// Inverted dropout: in train mode zeroes each entry with probability `p` and
    /// scales survivors by `1/(1-p)`; in eval mode returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let v = self.value(x);
        let mask: Vec<T> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&e, &m)| e * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..v.ndim()).collect::<Vec<_>>() {
            return Err(shape_err(format!("permute: bad axes {axes:?} for {:?}", v.shape())));
        }
        let (shape, data) = permute(v.shape(), v.data(), axes);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err(format!("concat: {first:?} vs {s:?}")));
            }
            widths.push(*s.last().expect("non-empty"));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[target]` for `[B, C]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.ndim() != 2 || v.shape()[0] != targets.len() {
            return Err(shape_err(format!(
                "cross entropy: logits {:?} vs {} targets",
                v.shape(),
                targets.len()
            )));
        }
        let c = v.shape()[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidTarget { target: t, classes: c });
        }
        let mut probs = v.data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&e| (e - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss = loss / T::of(targets.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `sum(x * weights)` with constant weights; a generic scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if self.value(x).numel() != weights.len() {
            return Err(shape_err("weighted_sum: weight count".into()));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(shape_err("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(self.shape(output), T::one()));
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        let t = Tensor::new(self.shape(v).to_vec(), data).expect("gradient matches value shape");
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (inner, out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / inner;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); rows * inner];
                    gemm_nt(rows, out, inner, gd, wv.data(), &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); inner * out];
                    gemm_tn(rows, inner, out, xv.data(), gd, &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); out];
                        for row in gd.chunks(out) {
                            for (d, &e) in db.iter_mut().zip(row) {
                                *d += e;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let nd = av.ndim();
                let (m, k) = (av.shape()[nd - 2], av.shape()[nd - 1]);
                let n = node.value.shape()[nd - 1];
                let batch = av.numel() / (m * k);
                let mut da = vec![T::zero(); av.numel()];
                let mut db = vec![T::zero(); bv.numel()];
                for bi in 0..batch {
                    let gg = &gd[bi * m * n..(bi + 1) * m * n];
                    let aa = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let bb = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    let daa = &mut da[bi * m * k..(bi + 1) * m * k];
                    let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                    if *transpose_b {
                        // C = A B^T: dA = dC B, dB = dC^T A
                        gemm_nn(m, n, k, gg, bb, daa);
                        gemm_tn(m, n, k, gg, aa, dbb);
                    } else {
                        // C = A B: dA = dC B^T, dB = A^T dC
                        gemm_nt(m, n, k, gg, bb, daa);
                        gemm_tn(m, k, n, aa, gg, dbb);
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, gd.iter().map(|&e| e * *c).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&e, &v)| if v > T::zero() { e } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                let dn = T::of(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); xhat.len()];
                for r in 0..inv_std.len() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for i in 0..d {
                        let dh = gr[i] * gam[i];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[i];
                        dgamma[i] += gr[i] * hr[i];
                        dbeta[i] += gr[i];
                    }
                    let scale = inv_std[r] / dn;
                    for i in 0..d {
                        let dh = gr[i] * gam[i];
                        dx[r * d + i] = scale * (dn * dh - sum_dh - hr[i] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (bsz, c) = (node.value.shape()[0], node.value.shape()[1]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..bsz {
                    for ch in 0..c {
                        dgamma[ch] += gd[r * c + ch] * xhat[r * c + ch];
                        dbeta[ch] += gd[r * c + ch];
                    }
                }
                let mut dx = vec![T::zero(); bsz * c];
                if *train {
                    let bn = T::of(bsz as f64);
                    for ch in 0..c {
                        // dgamma/dbeta double as sum(dy * xhat) and sum(dy).
                        let scale = gam[ch] * inv_std[ch] / bn;
                        for r in 0..bsz {
                            let i = r * c + ch;
                            dx[i] = scale * (bn * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    }
                } else {
                    for r in 0..bsz {
                        for ch in 0..c {
                            dx[r * c + ch] = gd[r * c + ch] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, gd.iter().zip(mask).map(|(&e, &m)| e * m).collect());
            }
            Op::Permute { x, axes } => {
                let (_, dx) = permute(g.shape(), gd, &inverse_axes(axes));
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = gd[0] / T::of(targets.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * c + t] -= scale;
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, weights.iter().map(|&w| w * gd[0]).collect());
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        sum += *e;
    }
    for e in row.iter_mut() {
        *e = *e / sum;
    }
}
