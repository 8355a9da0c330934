//! Additive angular margin loss.

use std::f64::consts::PI;

use crate::autodiff::{DiffArray, Graph, ParamSet, Var};
use crate::embedding::Embedding;
use crate::error::{Error, Result};

/// Cosines are kept this far inside [-1, 1] before taking the arc cosine.
pub const COS_CLAMP: f64 = 1e-7;

/// Cosine between each row of `emb[B, D]` and each L2-normalized column of
/// `weights[D, K]`; output `[B, K]`.
pub fn cosine_logits(g: &mut Graph, emb: Var, weights: Var) -> Result<Var> {
    let wt = g.permute(weights, &[1, 0])?;
    let wt = g.l2_normalize(wt)?;
    let wn = g.permute(wt, &[1, 0])?;
    g.matmul(emb, wn)
}

/// Margin-adjusted, scaled logits: target entries become `s·cos(θ_y + m)`,
/// others `s·cos θ_j`. `θ_y + m` is clamped to [0, π].
pub fn margin_logits(g: &mut Graph, cosines: Var, labels: &[usize], margin: f64, scale: f64) -> Result<Var> {
    let shape = g.shape(cosines).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::invalid(format!(
            "cosine matrix {shape:?} does not match {} labels",
            labels.len()
        )));
    }
    let k = shape[1];
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
    }
    let mut mask = DiffArray::zeros(&shape);
    for (i, &y) in labels.iter().enumerate() {
        mask.values[i * k + y] = 1.0;
    }
    let mut shift = mask.clone();
    shift.values.iter_mut().for_each(|v| *v *= margin);

    let mask = g.constant(mask)?;
    let shift = g.constant(shift)?;
    let clamped = g.clamp(cosines, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)?;
    let theta = g.acos(clamped)?;
    let theta = g.add(theta, shift)?;
    let theta = g.clamp(theta, 0.0, PI)?;
    let target = g.cos(theta)?;
    let delta = g.sub(target, cosines)?;
    let delta = g.mul(delta, mask)?;
    let adjusted = g.add(cosines, delta)?;
    g.scale(adjusted, scale)
}

/// Mean angular-margin softmax loss over a batch of unit-norm embeddings.
pub fn arcface_loss(g: &mut Graph, emb: Var, weights: Var, labels: &[usize], margin: f64, scale: f64) -> Result<Var> {
    let cos = cosine_logits(g, emb, weights)?;
    let logits = margin_logits(g, cos, labels, margin, scale)?;
    g.cross_entropy(logits, labels)
}

/// Evaluates the loss for fixed embeddings and a `[D, K]` class-weight matrix.
pub fn arcface_loss_value(
    embeddings: &[Embedding],
    labels: &[usize],
    class_weights: &DiffArray,
    margin: f64,
    scale: f64,
) -> Result<f64> {
    let d = embeddings.first().map(Embedding::dim).unwrap_or(0);
    if embeddings.iter().any(|e| e.dim() != d) || class_weights.shape.first() != Some(&d) {
        return Err(Error::invalid("embedding and class-weight dimensions disagree"));
    }
    let mut flat = Vec::with_capacity(embeddings.len() * d);
    embeddings.iter().for_each(|e| flat.extend_from_slice(e.as_slice()));
    let mut g = Graph::new();
    let emb = g.constant(DiffArray::new(&[embeddings.len(), d], flat)?)?;
    let w = g.constant(class_weights.clone())?;
    let loss = arcface_loss(&mut g, emb, w, labels, margin, scale)?;
    Ok(g.scalar(loss))
}

/// Head used with the loss: a `[D, K]` weight matrix in `params`.
pub(crate) fn class_probabilities(g: &mut Graph, params: &ParamSet, emb: Var, weights: crate::autodiff::ParamId, scale: f64) -> Result<Var> {
    let w = g.param(params, weights)?;
    let cos = cosine_logits(g, emb, w)?;
    let logits = g.scale(cos, scale)?;
    g.softmax(logits)
}
