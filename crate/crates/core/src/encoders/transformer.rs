use rand::Rng;

use crate::autodiff::{DiffArray, Graph, ParamId, ParamSet, Var};
use crate::error::Result;

/// Parameters of one pre-norm encoder layer: multi-head self-attention and a
/// ReLU MLP, each wrapped in a residual connection. The key projection has no
/// bias: it would shift every score of a query equally, which the softmax
/// ignores, so its gradient is identically zero.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    heads: usize,
    head_dim: usize,
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

fn dense(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> (ParamId, ParamId) {
    let w = params.add(format!("{name}.w"), DiffArray::glorot(&[fan_in, fan_out], fan_in, fan_out, rng));
    let b = params.add(format!("{name}.b"), DiffArray::zeros(&[fan_out]));
    (w, b)
}

impl EncoderLayer {
    pub(crate) fn register(
        params: &mut ParamSet,
        prefix: &str,
        heads: usize,
        head_dim: usize,
        mlp_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = heads * head_dim;
        let ln1_g = params.add(format!("{prefix}.ln1.g"), DiffArray::filled(&[d], 1.0));
        let ln1_b = params.add(format!("{prefix}.ln1.b"), DiffArray::zeros(&[d]));
        let (wq, bq) = dense(params, &format!("{prefix}.attn.q"), d, d, rng);
        let wk = params.add(format!("{prefix}.attn.k.w"), DiffArray::glorot(&[d, d], d, d, rng));
        let (wv, bv) = dense(params, &format!("{prefix}.attn.v"), d, d, rng);
        let (wo, bo) = dense(params, &format!("{prefix}.attn.o"), d, d, rng);
        let ln2_g = params.add(format!("{prefix}.ln2.g"), DiffArray::filled(&[d], 1.0));
        let ln2_b = params.add(format!("{prefix}.ln2.b"), DiffArray::zeros(&[d]));
        let (w1, b1) = dense(params, &format!("{prefix}.mlp.fc1"), d, mlp_hidden, rng);
        let (w2, b2) = dense(params, &format!("{prefix}.mlp.fc2"), mlp_hidden, d, rng);
        Self {
            heads,
            head_dim,
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Looks the layer's parameters up by name in a loaded parameter set.
    pub(crate) fn lookup(params: &ParamSet, prefix: &str, heads: usize, head_dim: usize) -> Option<Self> {
        let id = |s: &str| params.id(&format!("{prefix}.{s}"));
        Some(Self {
            heads,
            head_dim,
            ln1_g: id("ln1.g")?,
            ln1_b: id("ln1.b")?,
            wq: id("attn.q.w")?,
            bq: id("attn.q.b")?,
            wk: id("attn.k.w")?,
            wv: id("attn.v.w")?,
            bv: id("attn.v.b")?,
            wo: id("attn.o.w")?,
            bo: id("attn.o.b")?,
            ln2_g: id("ln2.g")?,
            ln2_b: id("ln2.b")?,
            w1: id("mlp.fc1.w")?,
            b1: id("mlp.fc1.b")?,
            w2: id("mlp.fc2.w")?,
            b2: id("mlp.fc2.b")?,
        })
    }

    fn linear(g: &mut Graph, params: &ParamSet, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let w = g.param(params, w)?;
        let y = g.matmul(x, w)?;
        match b {
            Some(b) => {
                let b = g.param(params, b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// `x` is `[B, T, D]`; returns the same shape.
    pub(crate) fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (batch, tokens, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, self.head_dim);

        let (lg, lb) = (g.param(params, self.ln1_g)?, g.param(params, self.ln1_b)?);
        let normed = g.layer_norm(x, lg, lb)?;
        let split_heads = |g: &mut Graph, w, b| -> Result<Var> {
            let y = Self::linear(g, params, normed, w, b)?;
            let y = g.reshape(y, &[batch, tokens, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[batch * h, tokens, dh])
        };
        let q = split_heads(g, self.wq, Some(self.bq))?;
        let k = split_heads(g, self.wk, None)?;
        let v = split_heads(g, self.wv, Some(self.bv))?;

        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.batch_matmul(attn, v, false)?;
        let ctx = g.reshape(ctx, &[batch, h, tokens, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch, tokens, d])?;
        let out = Self::linear(g, params, ctx, self.wo, Some(self.bo))?;
        let x = g.add(x, out)?;

        let (lg, lb) = (g.param(params, self.ln2_g)?, g.param(params, self.ln2_b)?);
        let normed = g.layer_norm(x, lg, lb)?;
        let hidden = Self::linear(g, params, normed, self.w1, Some(self.b1))?;
        let hidden = g.relu(hidden)?;
        let mlp = Self::linear(g, params, hidden, self.w2, Some(self.b2))?;
        g.add(x, mlp)
    }
}
