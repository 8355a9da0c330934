//! Tape of array operations with reverse-mode gradients.

use super::array::{DiffArray, ParamId, ParamSet};
use super::gemm::{gemm, Layout};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Mean { a: Var, axis: usize },
    SumAll(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    L2Normalize(Var),
    Cos(Var),
    Sin(Var),
    Acos(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    Im2Col { x: Var, kernel: usize, pad: usize },
    MaxPool2(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Mean { .. } => "mean",
            Op::SumAll(..) => "sum",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Cos(..) => "cos",
            Op::Sin(..) => "sin",
            Op::Acos(..) => "acos",
            Op::Clamp { .. } => "clamp",
            Op::Im2Col { .. } => "im2col",
            Op::MaxPool2(..) => "max_pool2",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    /// Saved forward quantities (softmax probabilities, norms, statistics).
    aux: Vec<f64>,
    /// Saved argmax positions for pooling.
    aux_idx: Vec<usize>,
    needs_grad: bool,
}

/// Gradients of every node, as produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape at `axis` into (outer, len, inner) sizes.
fn axis_sizes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn is_suffix(full: &[usize], tail: &[usize]) -> bool {
    tail.len() <= full.len() && full[full.len() - tail.len()..] == *tail
}

/// Single-threaded computation graph. Nodes are appended as operations are
/// applied; [`Graph::backward`] walks them in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_array(&self, v: Var) -> DiffArray {
        DiffArray {
            shape: self.nodes[v.0].shape.clone(),
            values: self.nodes[v.0].value.clone(),
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        self.push_aux(shape, value, op, Vec::new(), Vec::new())
    }

    fn push_aux(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, aux: Vec<f64>, aux_idx: Vec<usize>) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite output of {} at element {i}", op.name())));
        }
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            aux,
            aux_idx,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, array: DiffArray) -> Result<Var> {
        self.push(array.shape, array.values, Op::Constant)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<Var> {
        let p = params.get(id);
        self.push(p.shape.clone(), p.values.clone(), Op::Param(id))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::invalid(format!("matmul shapes {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), Layout::Normal, self.value(b), Layout::Normal, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(shape, out, Op::MatMul(a, b))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::invalid(format!("batch_matmul shapes {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::invalid(format!("batch_matmul shapes {sa:?} x {sb:?}")));
        }
        let layout = if trans_b { Layout::Transposed } else { Layout::Normal };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                Layout::Normal,
                &bv[i * k * n..],
                layout,
                &mut out[i * m * n..],
                false,
            );
        }
        self.push(vec![batch, m, n], out, Op::BatchMatMul { a, b, trans_b })
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::invalid(format!("{name}: shape {sb:?} does not broadcast to {sa:?}")));
        }
        let bv = self.value(b);
        let inner = bv.len().max(1);
        Ok(self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % inner]))
            .collect())
    }

    /// Element-wise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!("sub shapes {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b))
    }

    /// Element-wise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x + c).collect();
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let out = softmax_rows(self.value(a), d);
        self.push(shape, out, Op::Softmax(a))
    }

    /// Mean softmax cross-entropy of `logits[B, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::invalid(format!(
                "cross_entropy expects [B, K] logits with B = {} labels, got {shape:?}",
                labels.len()
            )));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(self.value(logits), k);
        let lv = self.value(logits);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= labels.len() as f64;
        self.push_aux(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            probs,
            Vec::new(),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm of a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::invalid("layer_norm gamma/beta must have the last-axis size"));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            stats.push(mean);
            stats.push(rstd);
        }
        self.push_aux(shape, out, Op::LayerNorm { x, gamma, beta }, stats, Vec::new())
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid(format!("mean over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_sizes(&shape, axis);
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut new_shape = shape;
        new_shape.remove(axis);
        self.push(new_shape, out, Op::Mean { a, axis })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::SumAll(a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::invalid(format!("concat shapes {first:?} and {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_sizes(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::invalid(format!("cannot reshape {:?} to {shape:?}", self.shape(a))));
        }
        let v = self.value(a).to_vec();
        self.push(shape.to_vec(), v, Op::Reshape(a))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![0.0; self.value(a).len()];
        permute_into(self.value(a), &shape, perm, &mut out, false);
        self.push(
            out_shape,
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        )
    }

    /// Divides each last-axis row by its Euclidean norm. Zero rows are a numeric error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("l2_normalize of a scalar"))?;
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        let mut norms = Vec::with_capacity(av.len() / d.max(1));
        for (r, row) in av.chunks(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-300) {
                return Err(Error::numeric(format!("l2_normalize of a zero vector (row {r})")));
            }
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        self.push_aux(shape, out, Op::L2Normalize(a), norms, Vec::new())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, op)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    /// Arc cosine; inputs must lie strictly inside (-1, 1) for a finite gradient.
    pub fn acos(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|x| x.abs() > 1.0) {
            return Err(Error::numeric(format!("acos argument {x} outside [-1, 1]")));
        }
        self.unary(a, Op::Acos(a), f64::acos)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(a, Op::Clamp { a, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Patches of a `[B, H, W, C]` map for a stride-1 `kernel × kernel`
    /// convolution with zero padding; output `[B, H', W', kernel·kernel·C]`
    /// with columns ordered (row offset, column offset, channel).
    pub fn im2col(&mut self, x: Var, kernel: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kernel == 0 || s[1] + 2 * pad < kernel || s[2] + 2 * pad < kernel {
            return Err(Error::invalid(format!("im2col of {s:?} with kernel {kernel}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1);
        let cols = kernel * kernel * c;
        let xv = self.value(x);
        let mut out = vec![0.0; b * ho * wo * cols];
        for_each_patch(b, h, w, c, kernel, pad, |dst, src| {
            out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
        });
        self.push(vec![b, ho, wo, cols], out, Op::Im2Col { x, kernel, pad })
    }

    /// 2×2 max pooling with stride 2 over `[B, H, W, C]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::invalid(format!("max_pool2 needs [B, even H, even W, C], got {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![0.0; b * ho * wo * c];
        let mut arg = vec![0usize; out.len()];
        for bi in 0..b {
            for i in 0..ho {
                for j in 0..wo {
                    for ch in 0..c {
                        let o = ((bi * ho + i) * wo + j) * c + ch;
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let src = ((bi * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if xv[src] > best {
                                best = xv[src];
                                best_at = src;
                            }
                        }
                        out[o] = best;
                        arg[o] = best_at;
                    }
                }
            }
        }
        self.push_aux(vec![b, ho, wo, c], out, Op::MaxPool2(x), Vec::new(), arg)
    }

    /// Reverse pass from a single-element `loss`. Parameter gradients are
    /// accumulated into `params`; all node gradients are returned.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::invalid("backward needs a single-element loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite gradient of {} at element {i}", node.op.name())));
            }
            if let Op::Param(pid) = node.op {
                let p = params.get_mut(pid);
                match &mut p.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => p.grad = Some(g.clone()),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Constant | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let sb = self.shape(b);
                let (k, n) = (sb[0], sb[1]);
                let m = node.value.len() / n.max(1);
                if needs(a) {
                    let bv = self.value(b);
                    acc(a, &mut |da| gemm(m, n, k, g, Layout::Normal, bv, Layout::Transposed, da, true));
                }
                if needs(b) {
                    let av = self.value(a);
                    acc(b, &mut |db| gemm(k, m, n, av, Layout::Transposed, g, Layout::Normal, db, true));
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (av, bv) = (self.value(a), self.value(b));
                if needs(a) {
                    // dA = dC · Bᵀ, where B is [k, n] (or stored [n, k] when transposed)
                    let layout = if trans_b { Layout::Normal } else { Layout::Transposed };
                    acc(a, &mut |da| {
                        for i in 0..batch {
                            gemm(m, n, k, &g[i * m * n..], Layout::Normal, &bv[i * k * n..], layout, &mut da[i * m * k..], true);
                        }
                    });
                }
                if needs(b) {
                    acc(b, &mut |db| {
                        for i in 0..batch {
                            if trans_b {
                                gemm(n, m, k, &g[i * m * n..], Layout::Transposed, &av[i * m * k..], Layout::Normal, &mut db[i * k * n..], true);
                            } else {
                                gemm(k, m, n, &av[i * m * k..], Layout::Transposed, &g[i * m * n..], Layout::Normal, &mut db[i * k * n..], true);
                            }
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                let inner = self.value(b).len().max(1);
                acc(b, &mut |db| g.iter().enumerate().for_each(|(i, x)| db[i % inner] += x));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                acc(b, &mut |db| db.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let inner = bv.len().max(1);
                acc(a, &mut |da| da.iter_mut().enumerate().for_each(|(i, d)| *d += g[i] * bv[i % inner]));
                acc(b, &mut |db| g.iter().enumerate().for_each(|(i, x)| db[i % inner] += x * av[i]));
            }
            &Op::Scale(a, c) => acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x)),
            &Op::AddScalar(a) => acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x)),
            &Op::Relu(a) => {
                let av = self.value(a);
                acc(a, &mut |da| {
                    for i in 0..da.len() {
                        if av[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                acc(a, &mut |da| {
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            da[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let probs = &node.aux;
                acc(*logits, &mut |dl| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == y { 1.0 } else { 0.0 };
                            dl[i * k + j] += scale * (probs[i * k + j] - target);
                        }
                    }
                });
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let d = *node.shape.last().unwrap();
                let (xv, gv) = (self.value(x), self.value(gamma));
                let rows = xv.len() / d;
                let stats = &node.aux;
                let xhat = |r: usize, j: usize| (xv[r * d + j] - stats[2 * r]) * stats[2 * r + 1];
                acc(gamma, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat(r, j);
                        }
                    }
                });
                acc(beta, &mut |db| {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                });
                acc(x, &mut |dx| {
                    for r in 0..rows {
                        let rstd = stats[2 * r + 1];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat(r, j);
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            dx[r * d + j] += rstd * (dxh - mean_dxh - xhat(r, j) * mean_dxh_xh);
                        }
                    }
                });
            }
            &Op::Mean { a, axis } => {
                let (outer, len, inner) = axis_sizes(self.shape(a), axis);
                acc(a, &mut |da| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                da[(o * len + l) * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                });
            }
            &Op::SumAll(a) => acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_sizes(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    acc(p, &mut |dp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            dp[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, x)| *d += x);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Reshape(a) => acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x)),
            Op::Permute { a, perm } => {
                let in_shape = self.shape(*a).to_vec();
                acc(*a, &mut |da| permute_into(g, &in_shape, perm, da, true));
            }
            &Op::L2Normalize(a) => {
                let d = *node.shape.last().unwrap();
                let (y, norms) = (&node.value, &node.aux);
                acc(a, &mut |da| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            da[r * d + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            &Op::Cos(a) => {
                let av = self.value(a);
                acc(a, &mut |da| da.iter_mut().enumerate().for_each(|(i, d)| *d -= g[i] * av[i].sin()));
            }
            &Op::Sin(a) => {
                let av = self.value(a);
                acc(a, &mut |da| da.iter_mut().enumerate().for_each(|(i, d)| *d += g[i] * av[i].cos()));
            }
            &Op::Acos(a) => {
                let av = self.value(a);
                acc(a, &mut |da| {
                    da.iter_mut()
                        .enumerate()
                        .for_each(|(i, d)| *d -= g[i] / (1.0 - av[i] * av[i]).sqrt())
                });
            }
            &Op::Clamp { a, lo, hi } => {
                let av = self.value(a);
                acc(a, &mut |da| {
                    for i in 0..da.len() {
                        if av[i] >= lo && av[i] <= hi {
                            da[i] += g[i];
                        }
                    }
                });
            }
            &Op::Im2Col { x, kernel, pad } => {
                let s = self.shape(x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                acc(x, &mut |dx| {
                    for_each_patch(b, h, w, c, kernel, pad, |dst, src| {
                        for ch in 0..c {
                            dx[src + ch] += g[dst + ch];
                        }
                    });
                });
            }
            &Op::MaxPool2(x) => {
                let arg = &node.aux_idx;
                acc(x, &mut |dx| arg.iter().zip(g).for_each(|(&src, v)| dx[src] += v));
            }
        }
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param(_) => vec![],
        &Op::MatMul(a, b) | &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) => vec![a, b],
        &Op::BatchMatMul { a, b, .. } => vec![a, b],
        &Op::Scale(a, _)
        | &Op::AddScalar(a)
        | &Op::Relu(a)
        | &Op::Softmax(a)
        | &Op::Mean { a, .. }
        | &Op::SumAll(a)
        | &Op::Reshape(a)
        | &Op::L2Normalize(a)
        | &Op::Cos(a)
        | &Op::Sin(a)
        | &Op::Acos(a)
        | &Op::Clamp { a, .. }
        | &Op::MaxPool2(a) => vec![a],
        Op::Permute { a, .. } => vec![*a],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        &Op::LayerNorm { x, gamma, beta } => vec![x, gamma, beta],
        Op::Concat { parts, .. } => parts.clone(),
        &Op::Im2Col { x, .. } => vec![x],
    }
}

pub(crate) fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (dst, v) in o.iter_mut().zip(row) {
            *dst = (v - max).exp();
            sum += *dst;
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Visits every (output column block, input pixel) pair of an im2col layout.
fn for_each_patch(b: usize, h: usize, w: usize, c: usize, kernel: usize, pad: usize, mut f: impl FnMut(usize, usize)) {
    let (ho, wo) = (h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1);
    let cols = kernel * kernel * c;
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                let row = ((bi * ho + i) * wo + j) * cols;
                for di in 0..kernel {
                    let y = (i + di) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dj in 0..kernel {
                        let x = (j + dj) as isize - pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + y as usize) * w + x as usize) * c;
                        f(row + (di * kernel + dj) * c, src);
                    }
                }
            }
        }
    }
}

/// Writes `src` (shape `in_shape`, permuted by `perm`) into `dst`. With
/// `inverse`, `src` is in the permuted layout and is scattered back (added).
fn permute_into(src: &[f64], in_shape: &[usize], perm: &[usize], dst: &mut [f64], inverse: bool) {
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    // stride in the input buffer of each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut idx = vec![0usize; nd];
    let mut in_off = 0usize;
    for out_off in 0..total {
        if inverse {
            dst[in_off] += src[out_off];
        } else {
            dst[out_off] = src[in_off];
        }
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            in_off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            in_off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}
