//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output and whatever the
//! backward rule needs. `backward` walks the nodes in exact reverse
//! recording order, so inputs always precede their consumers.

use rand::Rng;

use super::tensor::{DType, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MaskMul(Var, Vec<f64>),
    Silu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        src: Var,
        rows: Vec<usize>,
        row_len: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    GatedUpdate {
        s: Var,
        t: Var,
        g: Var,
    },
    Reshape(Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    dtype: DType,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(DType::F64)
    }
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Tape {
            nodes: Vec::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(&node.shape, node.value.clone())
            .expect("tape nodes keep shape and payload consistent")
            .with_dtype(self.dtype)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        mut value: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.dtype == DType::F32 {
            for x in &mut value {
                *x = *x as f32 as f64;
            }
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Gradients flow to it iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var> {
        self.push(
            "leaf",
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        self.push("constant", shape.to_vec(), data, false, Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    /// 2-D product `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.matmul_raw(a, b, m, k, n, vec![m, n])
    }

    /// Applies `w: [k,n]` to the last axis of `x: [..., k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("linear", sx, sw));
        }
        let k = sw[0];
        let n = sw[1];
        let m = self.nodes[x.0].value.len() / k.max(1);
        let mut out_shape = sx.to_vec();
        *out_shape.last_mut().unwrap() = n;
        self.matmul_raw(x, w, m, k, n, out_shape)
    }

    fn matmul_raw(&mut self, a: Var, b: Var, m: usize, k: usize, n: usize, shape: Vec<usize>) -> Result<Var> {
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            false,
            &self.nodes[b.0].value,
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", shape, out, rg, Op::Matmul { a, b, m, k, n })
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, rg, Op::Scale(a, c))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.nodes[a.0].value.len() {
            return Err(Error::shape("mask_mul", self.shape(a), &[mask.len()]));
        }
        let out = self.nodes[a.0].value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push("dropout", shape, out, rg, Op::MaskMul(a, mask))
    }

    /// Inverted dropout. Identity (no node recorded) when `p == 0` or not
    /// training.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let mask = (0..self.nodes[a.0].value.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mask_mul(a, mask)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push("silu", shape, out, rg, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push("sigmoid", shape, out, rg, Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[]))?;
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push("softmax", shape, out, rg, Op::Softmax { x: a, cols })
    }

    /// LayerNorm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Numerical(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = &self.nodes[x.0].value;
        let gs = &self.nodes[gamma.0].value;
        let bs = &self.nodes[beta.0].value;
        let rows = xs.len() / d;
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                xhat[r * d + c] = xh;
                out[r * d + c] = gs[c] * xh + bs[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Selects rows of `src` viewed as `[R, row_len]`; output `[rows.len(), row_len]`.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize], row_len: usize) -> Result<Var> {
        let total = self.nodes[src.0].value.len();
        let bound = total.checked_div(row_len).unwrap_or(0);
        if row_len == 0 || !total.is_multiple_of(row_len) {
            return Err(Error::shape("gather_rows", self.shape(src), &[row_len]));
        }
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= bound {
                return Err(Error::Index {
                    what: "gather row",
                    index: r as i64,
                    bound,
                });
            }
            out.extend_from_slice(&self.nodes[src.0].value[r * row_len..(r + 1) * row_len]);
        }
        let rg = self.rg(&[src]);
        self.push(
            "gather_rows",
            vec![rows.len(), row_len],
            out,
            rg,
            Op::Gather {
                src,
                rows: rows.to_vec(),
                row_len,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.nodes[a.0].value.clone();
        let rg = self.rg(&[a]);
        self.push("reshape", shape.to_vec(), out, rg, Op::Reshape(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(&[a]);
        self.push("sum", vec![], vec![s], rg, Op::SumAll(a))
    }

    /// Multi-head causal self-attention core on `[B,T,d]` projections:
    /// `softmax(q kᵀ / sqrt(d_head))` restricted to keys at positions `<= t`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("attention", &shape, &[3]));
        }
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (batch, seq, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention heads", &[d], &[heads]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let qi = &qs[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let kj = &ks[(b * seq + j) * d + off..][..dh];
                        p[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut p[..=i]);
                    let oi = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let vj = &vs[(b * seq + j) * d + off..][..dh];
                        let pij = p[j];
                        for c in 0..dh {
                            oi[c] += pij * vj[c];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            shape,
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        )
    }

    /// Mean cross-entropy of `logits: [..., V]` against `targets`, skipping
    /// positions equal to `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().ok_or_else(|| Error::shape("cross_entropy", &shape, &[]))?;
        let rows = self.nodes[logits.0].value.len() / vocab.max(1);
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let mut parsed = Vec::with_capacity(rows);
        for &t in targets {
            if t == ignore_index {
                parsed.push(None);
            } else if t < 0 || t as usize >= vocab {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: vocab,
                });
            } else {
                parsed.push(Some(t as usize));
            }
        }
        let count = parsed.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let xs = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; xs.len()];
        let mut total = 0.0;
        for (r, t) in parsed.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &xs[r * vocab..(r + 1) * vocab];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[t];
            for c in 0..vocab {
                probs[r * vocab + c] = (row[c] - lse).exp();
            }
        }
        let loss = total / count as f64;
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: parsed,
                probs,
                count,
            },
        )
    }

    /// `(1 - g) ⊙ s + g ⊙ t`, elementwise.
    pub fn gated_update(&mut self, s: Var, t: Var, g: Var) -> Result<Var> {
        self.same_shape("gated_update", s, t)?;
        self.same_shape("gated_update", s, g)?;
        let (ss, ts, gs) = (&self.nodes[s.0].value, &self.nodes[t.0].value, &self.nodes[g.0].value);
        let out = ss
            .iter()
            .zip(ts)
            .zip(gs)
            .map(|((&a, &b), &w)| {
                // Rounding can land one ulp outside [min, max]; the exact
                // convex combination never does.
                ((1.0 - w) * a + w * b).clamp(a.min(b), a.max(b))
            })
            .collect();
        let rg = self.rg(&[s, t, g]);
        let shape = self.shape(s).to_vec();
        self.push("gated_update", shape, out, rg, Op::GatedUpdate { s, t, g })
    }

    /// Reverse pass from a scalar `loss`. Gradients are kept for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.requires_grad(*a) {
                    let da = slot(grads, *a, m * k);
                    // dA = G · Bᵀ
                    gemm(m, n, k, g, false, &self.nodes[b.0].value, true, da, true);
                }
                if self.requires_grad(*b) {
                    let db = slot(grads, *b, k * n);
                    // dB = Aᵀ · G
                    gemm(k, m, n, &self.nodes[a.0].value, true, g, false, db, true);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.accumulate(grads, *a, |i| g[i] * bv[i]);
                self.accumulate(grads, *b, |i| g[i] * av[i]);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |i| g[i] * c),
            Op::MaskMul(a, mask) => self.accumulate(grads, *a, |i| g[i] * mask[i]),
            Op::Silu(a) => {
                let xs = &self.nodes[a.0].value;
                self.accumulate(grads, *a, |i| {
                    let s = sigmoid(xs[i]);
                    g[i] * (s + xs[i] * s * (1.0 - s))
                });
            }
            Op::Sigmoid(a) => {
                let ys = &node.value;
                self.accumulate(grads, *a, |i| g[i] * ys[i] * (1.0 - ys[i]));
            }
            Op::Softmax { x, cols } => {
                if self.requires_grad(*x) {
                    let ys = &node.value;
                    let dx = slot(grads, *x, ys.len());
                    for r in 0..ys.len() / cols {
                        let y = &ys[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inner = dot(y, gr);
                        for c in 0..*cols {
                            dx[r * cols + c] += y[c] * (gr[c] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[gamma.0].value.len();
                let rows = xhat.len() / d;
                if self.requires_grad(*gamma) {
                    let dg = slot(grads, *gamma, d);
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if self.requires_grad(*beta) {
                    let db = slot(grads, *beta, d);
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gam = &self.nodes[gamma.0].value;
                    let dx = slot(grads, *x, xhat.len());
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxh[c] = g[r * d + c] * gam[c];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxh, xh) / d as f64;
                        for c in 0..d {
                            dx[r * d + c] += inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather { src, rows, row_len } => {
                if self.requires_grad(*src) {
                    let n = self.nodes[src.0].value.len();
                    let ds = slot(grads, *src, n);
                    for (o, &r) in rows.iter().enumerate() {
                        for c in 0..*row_len {
                            ds[r * row_len + c] += g[o * row_len + c];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *batch, *seq, *heads, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.requires_grad(*logits) {
                    let vocab = *self.shape(*logits).last().unwrap();
                    let dl = slot(grads, *logits, probs.len());
                    let w = g[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..vocab {
                            dl[r * vocab + c] += w * probs[r * vocab + c];
                        }
                        dl[r * vocab + t] -= w;
                    }
                }
            }
            Op::GatedUpdate { s, t, g: gate } => {
                let (sv, tv, gv) = (
                    &self.nodes[s.0].value,
                    &self.nodes[t.0].value,
                    &self.nodes[gate.0].value,
                );
                self.accumulate(grads, *s, |i| g[i] * (1.0 - gv[i]));
                self.accumulate(grads, *t, |i| g[i] * gv[i]);
                self.accumulate(grads, *gate, |i| g[i] * (tv[i] - sv[i]));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |i| g[i]),
            Op::SumAll(a) => self.accumulate(grads, *a, |_| g[0]),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.shape(q)[2];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let n = qs.len();
        let mut dq = vec![0.0; n];
        let mut dk = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let gi = &g[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let vj = &vs[(b * seq + j) * d + off..][..dh];
                        dp[j] = dot(gi, vj);
                        let dvj = &mut dv[(b * seq + j) * d + off..][..dh];
                        for c in 0..dh {
                            dvj[c] += p[j] * gi[c];
                        }
                    }
                    let inner: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
                    let qi = &qs[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &ks[(b * seq + j) * d + off..][..dh];
                        let dqi = &mut dq[(b * seq + i) * d + off..][..dh];
                        for c in 0..dh {
                            dqi[c] += ds * kj[c];
                        }
                        let dkj = &mut dk[(b * seq + j) * d + off..][..dh];
                        for c in 0..dh {
                            dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            self.accumulate(grads, var, |i| delta[i]);
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: impl Fn(usize) -> f64) {
        if !self.requires_grad(var) {
            return;
        }
        let n = self.nodes[var.0].value.len();
        let dst = slot(grads, var, n);
        for (i, d) in dst.iter_mut().enumerate() {
            *d += f(i);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], var: Var, n: usize) -> &mut [f64] {
    grads[var.0].get_or_insert_with(|| vec![0.0; n])
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

/// `c (+)= op(a) · op(b)` with `op(a): [m,k]`, `op(b): [k,n]`, all row-major.
/// A transposed operand is passed in its stored (untransposed) layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above bounds every strided access of the three
    // row-major buffers, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
