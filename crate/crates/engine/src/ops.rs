//! Forward and backward kernels on plain slices.
//!
//! The [`Graph`](crate::Graph) records these as differentiable operations;
//! the tensor-level wrappers here are usable without a graph.

use crate::error::{shape_err, EngineError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which source positions each target position may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionMask {
    /// Every target sees every source.
    Bidirectional,
    /// Target `i` sees sources `j <= i`.
    Causal,
    /// Per-source validity flags (length `groups * kv_len`); invalid sources
    /// receive zero weight.
    Padding(Vec<bool>),
    /// Causal and padding constraints together.
    Combined(Vec<bool>),
}

impl AttentionMask {
    fn causal(&self) -> bool {
        matches!(self, AttentionMask::Causal | AttentionMask::Combined(_))
    }

    fn key_valid(&self) -> Option<&[bool]> {
        match self {
            AttentionMask::Padding(v) | AttentionMask::Combined(v) => Some(v),
            _ => None,
        }
    }

    #[inline]
    fn allowed(&self, causal: bool, valid: Option<&[bool]>, g: usize, s: usize, i: usize, j: usize) -> bool {
        (!causal || j <= i) && valid.map_or(true, |v| v[g * s + j])
    }
}

/// Geometry of a batched attention call: `groups` independent sequences,
/// each with `q_len` targets and `kv_len` sources, split into `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub groups: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(shape_err("softmax", "empty input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EngineError::NonFinite("softmax"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise layer normalization. Returns `(output, xhat, rstd)`.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / cols;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    let n = cols as f64;
    for r in 0..rows {
        let dyr = &dy[r * cols..(r + 1) * cols];
        let xh = &xhat[r * cols..(r + 1) * cols];
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for c in 0..cols {
            let d = dyr[c] * gamma[c];
            sum_d += d;
            sum_dx += d * xh[c];
            dgamma[c] += dyr[c] * xh[c];
            dbeta[c] += dyr[c];
        }
        for c in 0..cols {
            let d = dyr[c] * gamma[c];
            dx[r * cols + c] = rstd[r] / n * (n * d - sum_d - xh[c] * sum_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Layer normalization of a single vector.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() || gamma.len() != x.len() || beta.len() != x.len() {
        return Err(shape_err("layer_norm", "gamma/beta must match input length"));
    }
    Ok(layer_norm_forward(x, x.len(), gamma, beta, eps).0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Inverted-dropout keep mask: entries are `0` or `1 / (1 - rate)`.
pub(crate) fn dropout_mask(n: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let scale = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.uniform() < rate { 0.0 } else { scale })
        .collect()
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(EngineError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout on a tensor; identity outside training.
pub fn dropout(x: &Tensor, rate: f64, training: bool, rng: &mut Rng) -> Result<Tensor> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn check_layout(
    q: usize,
    k: usize,
    v: usize,
    qw: usize,
    kw: usize,
    vw: usize,
    layout: &AttnLayout,
    mask: &AttentionMask,
) -> Result<()> {
    let AttnLayout {
        groups,
        q_len,
        kv_len,
        heads,
    } = *layout;
    if heads == 0 || qw % heads != 0 || vw % heads != 0 {
        return Err(EngineError::Config(format!(
            "widths {qw}/{vw} not divisible by {heads} heads"
        )));
    }
    if qw != kw {
        return Err(shape_err("attention", format!("query width {qw} vs key width {kw}")));
    }
    if q != groups * q_len * qw || k != groups * kv_len * kw || v != groups * kv_len * vw {
        return Err(shape_err(
            "attention",
            format!("operands do not match {groups} groups of {q_len}x{kv_len}"),
        ));
    }
    if let Some(valid) = mask.key_valid() {
        if valid.len() != groups * kv_len {
            return Err(shape_err(
                "attention",
                format!("mask length {} for {} sources", valid.len(), groups * kv_len),
            ));
        }
    }
    Ok(())
}

/// Batched multi-head scaled dot-product attention on already projected
/// operands. `q` is `[groups*q_len × qw]`, `k` is `[groups*kv_len × qw]`,
/// `v` is `[groups*kv_len × vw]`; head `h` uses the `h`-th contiguous column
/// block of each. Returns `(output [groups*q_len × vw], probabilities)` with
/// probabilities laid out as `[groups, heads, q_len, kv_len]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    qw: usize,
    vw: usize,
    layout: &AttnLayout,
    mask: &AttentionMask,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_layout(q.len(), k.len(), v.len(), qw, qw, vw, layout, mask)?;
    let AttnLayout {
        groups,
        q_len: t,
        kv_len: s,
        heads,
    } = *layout;
    let dk = qw / heads;
    let dv = vw / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let causal = mask.causal();
    let valid = mask.key_valid();
    let mut out = vec![0.0; groups * t * vw];
    let mut probs = vec![0.0; groups * heads * t * s];
    let mut scores = vec![0.0; s];
    for g in 0..groups {
        for h in 0..heads {
            for i in 0..t {
                let qi = &q[(g * t + i) * qw + h * dk..][..dk];
                let mut max = f64::NEG_INFINITY;
                let mut any = false;
                for j in 0..s {
                    if !mask.allowed(causal, valid, g, s, i, j) {
                        continue;
                    }
                    let kj = &k[(g * s + j) * qw + h * dk..][..dk];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    scores[j] = dot * scale;
                    max = max.max(scores[j]);
                    any = true;
                }
                if !any {
                    return Err(EngineError::FullyMaskedRow { group: g, row: i });
                }
                if !max.is_finite() {
                    return Err(EngineError::NonFinite("attention"));
                }
                let p = &mut probs[((g * heads + h) * t + i) * s..][..s];
                let mut total = 0.0;
                for j in 0..s {
                    if mask.allowed(causal, valid, g, s, i, j) {
                        p[j] = (scores[j] - max).exp();
                        total += p[j];
                    }
                }
                let o = &mut out[(g * t + i) * vw + h * dv..][..dv];
                for j in 0..s {
                    if p[j] == 0.0 {
                        continue;
                    }
                    p[j] /= total;
                    let vj = &v[(g * s + j) * vw + h * dv..][..dv];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += p[j] * vc;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    qw: usize,
    vw: usize,
    layout: &AttnLayout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnLayout {
        groups,
        q_len: t,
        kv_len: s,
        heads,
    } = *layout;
    let dk = qw / heads;
    let dvw = vw / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dkm = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; s];
    for g in 0..groups {
        for h in 0..heads {
            for i in 0..t {
                let p = &probs[((g * heads + h) * t + i) * s..][..s];
                let doi = &dout[(g * t + i) * vw + h * dvw..][..dvw];
                let mut dot_pdp = 0.0;
                for j in 0..s {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vrow = (g * s + j) * vw + h * dvw;
                    let vj = &v[vrow..][..dvw];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot_pdp += p[j] * dp[j];
                    for (d, o) in dv[vrow..][..dvw].iter_mut().zip(doi) {
                        *d += p[j] * o;
                    }
                }
                let qrow = (g * t + i) * qw + h * dk;
                for j in 0..s {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot_pdp) * scale;
                    let krow = (g * s + j) * qw + h * dk;
                    for c in 0..dk {
                        dq[qrow + c] += ds * k[krow + c];
                        dkm[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (dq, dkm, dv)
}

/// `Softmax(Q·Kᵀ/√d_k)·V` for single-sequence 2-D operands.
pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor> {
    if k.rows() != v.rows() {
        return Err(shape_err("attention", "keys and values differ in length"));
    }
    let layout = AttnLayout {
        groups: 1,
        q_len: q.rows(),
        kv_len: k.rows(),
        heads: 1,
    };
    if q.cols() != k.cols() {
        return Err(shape_err("attention", "query and key widths differ"));
    }
    let (out, _) = attention_forward(q.data(), k.data(), v.data(), q.cols(), v.cols(), &layout, mask)?;
    Tensor::new(vec![q.rows(), v.cols()], out)
}

/// Mean over rows of `-log softmax(row)[target]`. Returns `(loss, probs)`.
pub(crate) fn cross_entropy_forward(
    logits: &[f64],
    classes: usize,
    targets: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let rows = logits.len() / classes;
    if targets.len() != rows {
        return Err(shape_err("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
    }
    let mut loss = 0.0;
    let mut probs = vec![0.0; logits.len()];
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(EngineError::TargetOutOfRange { target: t, classes });
        }
        let row = &logits[r * classes..(r + 1) * classes];
        if row.iter().any(|x| !x.is_finite()) {
            return Err(EngineError::NonFinite("cross_entropy"));
        }
        let lse = log_sum_exp(row);
        loss += lse - row[t];
        for c in 0..classes {
            probs[r * classes + c] = (row[c] - lse).exp();
        }
    }
    Ok((loss / rows as f64, probs))
}

pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(shape_err("cross_entropy", "no classes"));
    }
    Ok(cross_entropy_forward(logits, logits.len(), &[target])?.0)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn binary_cross_entropy_forward(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(shape_err("binary_cross_entropy", "logits and targets differ in length"));
    }
    let mut total = 0.0;
    for (&x, &y) in logits.iter().zip(targets) {
        if y != 0.0 && y != 1.0 {
            return Err(EngineError::NonBinaryTarget(y));
        }
        if !x.is_finite() {
            return Err(EngineError::NonFinite("binary_cross_entropy"));
        }
        total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    }
    Ok(total / logits.len() as f64)
}

/// Mean per-class sigmoid cross-entropy against a multi-hot target.
pub fn binary_cross_entropy(logits: &[f64], targets: &[f64]) -> Result<f64> {
    binary_cross_entropy_forward(logits, targets)
}
