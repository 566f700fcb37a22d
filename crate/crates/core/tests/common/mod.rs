#![allow(dead_code)]

pub mod fusion;

use stlt_core::layout::{BoundingBox, FrameLayout, Label, ObjectInstance, VideoLayout};
use stlt_engine::nn::{CrossBlock, LayerNorm, Linear, MultiHeadAttention, LAYER_NORM_EPS};
use stlt_engine::{ParamStore, Rng, Tensor};

pub fn random_box(rng: &mut Rng) -> BoundingBox {
    let (a, b) = (rng.uniform(), rng.uniform());
    let (c, d) = (rng.uniform(), rng.uniform());
    BoundingBox::new(a.min(b), c.min(d), a.max(b).max(a.min(b) + 1e-3).min(1.0), c.max(d).max(c.min(d) + 1e-3).min(1.0))
        .unwrap()
}

pub fn random_frame(rng: &mut Rng, max_objects: usize, vocabulary: usize) -> FrameLayout {
    let n = rng.below(max_objects + 1);
    FrameLayout {
        objects: (0..n)
            .map(|_| ObjectInstance { category: 2 + rng.below(vocabulary - 2), bbox: random_box(rng), score: None })
            .collect(),
    }
}

pub fn random_video(rng: &mut Rng, id: &str, frames: usize, max_objects: usize, vocabulary: usize, classes: usize) -> VideoLayout {
    VideoLayout {
        id: id.into(),
        frames: (0..frames).map(|_| random_frame(rng, max_objects, vocabulary)).collect(),
        label: Label::Single(rng.below(classes)),
    }
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Replaces every parameter value with fresh normal noise, so that biases
/// and normalization affines are exercised too.
pub fn randomize(store: &mut ParamStore, rng: &mut Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, random_tensor(rng, &shape, scale)).unwrap();
    }
}

pub fn zero_prefix(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.starts_with(prefix)).collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

// Reference implementations written directly from the definitions, one
// scalar at a time.

pub fn ref_linear(x: &[Vec<f64>], store: &ParamStore, l: &Linear) -> Vec<Vec<f64>> {
    let w = store.value(l.weight);
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    let b = l.bias.map(|b| store.value(b).data().to_vec()).unwrap_or(vec![0.0; fout]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), fin);
            (0..fout).map(|j| b[j] + (0..fin).map(|i| row[i] * w.data()[i * fout + j]).sum::<f64>()).collect()
        })
        .collect()
}

pub fn ref_layer_norm(x: &[Vec<f64>], store: &ParamStore, n: &LayerNorm) -> Vec<Vec<f64>> {
    let gamma = store.value(n.gamma).data();
    let beta = store.value(n.beta).data();
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            row.iter().enumerate().map(|(i, v)| gamma[i] * (v - mean) / (var + LAYER_NORM_EPS).sqrt() + beta[i]).collect()
        })
        .collect()
}

pub fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn add_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Multi-head attention of one group: `allowed(i, j)` says whether target
/// `i` may attend to source `j`.
pub fn ref_attention(
    target: &[Vec<f64>],
    source: &[Vec<f64>],
    store: &ParamStore,
    m: &MultiHeadAttention,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let q = ref_linear(target, store, &m.query);
    let k = ref_linear(source, store, &m.key);
    let v = ref_linear(source, store, &m.value);
    let dh = m.width / m.heads;
    let mut out = vec![vec![0.0; m.width]; target.len()];
    for h in 0..m.heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..target.len() {
            let scores: Vec<Option<f64>> = (0..source.len())
                .map(|j| {
                    allowed(i, j).then(|| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                })
                .collect();
            let max = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    let p = (s - max).exp() / z;
                    for c in cols.clone() {
                        out[i][c] += p * v[j][c];
                    }
                }
            }
        }
    }
    ref_linear(&out, store, &m.output)
}

pub fn ref_feed_forward(x: &[Vec<f64>], store: &ParamStore, inner: &Linear, outer: &Linear) -> Vec<Vec<f64>> {
    let h: Vec<Vec<f64>> = ref_linear(x, store, inner).into_iter().map(|r| r.into_iter().map(ref_gelu).collect()).collect();
    ref_linear(&h, store, outer)
}

pub fn ref_cross_block(
    target: &[Vec<f64>],
    source: &[Vec<f64>],
    store: &ParamStore,
    b: &CrossBlock,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let q = ref_layer_norm(target, store, &b.query_norm);
    let s = ref_layer_norm(source, store, &b.source_norm);
    let a = ref_attention(&q, &s, store, &b.attn, allowed);
    let x = add_rows(target, &a);
    let h = ref_layer_norm(&x, store, &b.ff_norm);
    let f = ref_feed_forward(&h, store, &b.ff.inner, &b.ff.outer);
    add_rows(&x, &f)
}
