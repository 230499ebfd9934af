//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Ops are recorded eagerly as they execute; [`Tape::backward`] replays the
//! record in reverse. Nodes that do not depend on any gradient-requesting
//! leaf are never visited during backward, so frozen sub-networks cost a
//! forward pass only.

use super::kernels::{self, gemm, MatRef, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    GradScale(Var, S),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<S>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<S>,
        count: usize,
    },
    WeightedSum {
        x: Var,
        weights: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by one backward pass, retrievable for leaves.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Output rows of a strided same-padded convolution over `len` frames.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        self.leaf_data(t.shape().to_vec(), t.data().to_vec(), requires_grad)
    }

    pub fn leaf_data(&mut self, shape: Vec<usize>, value: Vec<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            m,
            k,
            n,
            MatRef::new(self.value(a), k),
            MatRef::new(self.value(b), n),
            &mut out,
            n,
            false,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    /// Adds a length-`n` row vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|xr| xr.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(vec![m, n], out, Op::AddRow(x, row), ng))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), ng)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `c`.
    pub fn grad_scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).to_vec();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::GradScale(x, c), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: vec![m, n],
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        let mut mean = vec![S::zero(); m];
        let mut rstd = vec![S::zero(); m];
        kernels::layer_norm_rows(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            n,
            &mut out,
            &mut mean,
            &mut rstd,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head self-attention core over packed `[T × 3d]` projections.
    /// With `causal`, position `i` attends only to positions `≤ i`.
    pub fn attention(&mut self, qkv: Var, heads: usize, causal: bool) -> Result<Var> {
        let (t, w) = self.dims2(qkv, "attention")?;
        if w % 3 != 0 {
            return Err(Error::Dimension {
                op: "attention",
                lhs: vec![t, w],
                rhs: vec![t, 3],
            });
        }
        let d = w / 3;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by head count {heads}"
            )));
        }
        let mut out = vec![S::zero(); t * d];
        let mut probs = vec![S::zero(); heads * t * t];
        kernels::attention_forward(self.value(qkv), t, d, heads, causal, &mut out, &mut probs);
        let ng = self.needs(qkv);
        Ok(self.push(
            vec![t, d],
            out,
            Op::Attention {
                qkv,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Unfolds `[T × d]` into `[⌈T/stride⌉ × kernel·d]` windows with
    /// zero same-padding (`(kernel-1)/2` frames on the left).
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (t, d) = self.dims2(x, "im2col")?;
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        let rows = conv_out_len(t, stride);
        let pad = (kernel - 1) / 2;
        let src = self.value(x);
        let mut out = vec![S::zero(); rows * kernel * d];
        for o in 0..rows {
            for j in 0..kernel {
                let pos = (o * stride + j) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < t {
                    let p = pos as usize;
                    let dst = (o * kernel + j) * d;
                    out[dst..dst + d].copy_from_slice(&src[p * d..(p + 1) * d]);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![rows, kernel * d], out, Op::Im2Col { x, kernel, stride }, ng))
    }

    /// Gathers rows of a `[V × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        let tv = self.value(table);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, bound: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptyInput("concat_rows"));
        };
        let (_, d) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != d {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![rows, d],
                    rhs: vec![r, c],
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, d], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let ng = self.needs(x);
        Ok(self.push(vec![len, n], out, Op::SliceRows { x, start }, ng))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over positions where `mask` is true.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy_mean")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy_mean",
                lhs: vec![t, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch("every position is masked".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![S::zero(); t * v];
        let mut total = S::zero();
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::Index {
                    index: targets[r],
                    bound: v,
                });
            }
            let row = &mut probs[r * v..(r + 1) * v];
            row.copy_from_slice(&lv[r * v..(r + 1) * v]);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
            let log_p = lv[r * v + targets[r]] - max - z.ln();
            total -= log_p;
        }
        let loss = total / S::from_usize(count).unwrap();
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// `Σ weights ⊙ x` as a one-element node.
    pub fn weighted_sum(&mut self, x: Var, weights: &[S]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = kernels::dot(self.value(x), weights);
        let ng = self.needs(x);
        Ok(self.push(
            vec![1],
            vec![s],
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Back-propagates from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.nodes[loss.0].shape.clone(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n.value.len()]))
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, MatRef::new(g, n), MatRef::t(self.value(*b), n), da, k, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, MatRef::t(self.value(*a), k), MatRef::new(g, n), db, n, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(dr) = self.slot(grads, *row) {
                    let n = dr.len();
                    for gr in g.chunks_exact(n) {
                        add_into(dr, gr);
                    }
                }
            }
            Op::Scale(x, c) | Op::GradScale(x, c) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &v) in dx.iter_mut().zip(g) {
                        *d += *c * v;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), &gi) in dx.iter_mut().zip(xv).zip(g) {
                        *d += gi * kernels::gelu_grad(v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => self.backprop_layer_norm(*x, *gamma, *beta, mean, rstd, g, grads),
            Op::Attention {
                qkv,
                heads,
                probs,
            } => {
                let t = self.shape(*qkv)[0];
                let d = self.shape(*qkv)[1] / 3;
                let qv = self.value(*qkv);
                if let Some(dq) = self.slot(grads, *qkv) {
                    attention_backward(qv, probs, g, t, d, *heads, dq);
                }
            }
            Op::Im2Col { x, kernel, stride } => {
                let (t, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let pad = (kernel - 1) / 2;
                if let Some(dx) = self.slot(grads, *x) {
                    let rows = conv_out_len(t, *stride);
                    for o in 0..rows {
                        for j in 0..*kernel {
                            let pos = (o * stride + j) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < t {
                                let p = pos as usize;
                                let src = (o * kernel + j) * d;
                                add_into(&mut dx[p * d..(p + 1) * d], &g[src..src + d]);
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        add_into(dp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.shape(*x)[1];
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(&mut dx[start * n..start * n + g.len()], g);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / S::from_usize(*count).unwrap();
                if let Some(dl) = self.slot(grads, *logits) {
                    for (r, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let drow = &mut dl[r * v..(r + 1) * v];
                        for (d, &p) in drow.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *d += scale * p;
                        }
                        drow[tgt] -= scale;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &w) in dx.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_layer_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        rstd: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let n = self.shape(x)[1];
        let xv = self.value(x);
        let gv = self.value(gamma);
        let nf = S::from_usize(n).unwrap();
        if let Some(dg) = self.slot(grads, gamma) {
            for (r, (xr, gr)) in xv.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                for j in 0..n {
                    dg[j] += gr[j] * (xr[j] - mean[r]) * rstd[r];
                }
            }
        }
        if let Some(db) = self.slot(grads, beta) {
            for gr in g.chunks_exact(n) {
                add_into(db, gr);
            }
        }
        if let Some(dx) = self.slot(grads, x) {
            let mut dxhat = vec![S::zero(); n];
            for (r, (xr, gr)) in xv.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                let mut s1 = S::zero();
                let mut s2 = S::zero();
                for j in 0..n {
                    dxhat[j] = gr[j] * gv[j];
                    s1 += dxhat[j];
                    s2 += dxhat[j] * (xr[j] - mean[r]) * rstd[r];
                }
                let m1 = s1 / nf;
                let m2 = s2 / nf;
                let drow = &mut dx[r * n..(r + 1) * n];
                for j in 0..n {
                    let xhat = (xr[j] - mean[r]) * rstd[r];
                    drow[j] += rstd[r] * (dxhat[j] - m1 - xhat * m2);
                }
            }
        }
    }
}

fn add_into<S: Real>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn attention_backward<S: Real>(qkv: &[S], probs: &[S], g: &[S], t: usize, d: usize, heads: usize, dqkv: &mut [S]) {
    let dh = d / heads;
    let ld = 3 * d;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let mut dp = vec![S::zero(); t * t];
    for h in 0..heads {
        let p = &probs[h * t * t..(h + 1) * t * t];
        // dV_h += Pᵀ · dO_h
        gemm(t, t, dh, MatRef::t(p, t), MatRef::new(&g[h * dh..], d), &mut dqkv[2 * d + h * dh..], ld, true);
        // dP = dO_h · V_hᵀ
        gemm(t, dh, t, MatRef::new(&g[h * dh..], d), MatRef::t(&qkv[2 * d + h * dh..], ld), &mut dp, t, false);
        for i in 0..t {
            let pr = &p[i * t..(i + 1) * t];
            let dr = &mut dp[i * t..(i + 1) * t];
            let inner = kernels::dot(pr, dr);
            for (x, &pi) in dr.iter_mut().zip(pr) {
                *x = pi * (*x - inner) * scale;
            }
        }
        // dQ_h += dS · K_h ; dK_h += dSᵀ · Q_h
        gemm(t, t, dh, MatRef::new(&dp, t), MatRef::new(&qkv[d + h * dh..], ld), &mut dqkv[h * dh..], ld, true);
        gemm(t, t, dh, MatRef::t(&dp, t), MatRef::new(&qkv[h * dh..], ld), &mut dqkv[d + h * dh..], ld, true);
    }
}
