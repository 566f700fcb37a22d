//! Classification metrics and score ensembling.

use stlt_engine::Tensor;

use crate::error::{data_err, Result};
use crate::layout::TaskMode;

fn check_matrix(scores: &Tensor, what: &str) -> Result<(usize, usize)> {
    if scores.shape().len() != 2 {
        return Err(data_err(format!("{what} must be a matrix, got shape {:?}", scores.shape())));
    }
    Ok((scores.rows(), scores.cols()))
}

/// Position of `label` in the row's ranking, counting the entries that
/// outrank it. Equal scores rank the lower class index first.
fn rank_of(row: &[f64], label: usize) -> usize {
    let s = row[label];
    row.iter().enumerate().filter(|&(j, &x)| x > s || (x == s && j < label)).count()
}

/// Fraction of rows whose label is among the `k` highest scores.
pub fn evaluate_topk(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (n, c) = check_matrix(scores, "scores")?;
    if k == 0 || k > c {
        return Err(data_err(format!("k = {k} outside 1..={c}")));
    }
    if labels.len() != n {
        return Err(data_err(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(data_err("no samples to evaluate"));
    }
    let mut hits = 0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(data_err(format!("label {l} out of range for {c} classes")));
        }
        if rank_of(scores.row(i), l) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Mean average precision and the classes skipped for having no positives.
#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Average precision of one class: precision at each positive's rank,
/// averaged over positives. Equal scores rank the lower sample index first.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut seen = 0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            seen += 1;
            sum += seen as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// `labels` is a multi-hot `[N × C]` matrix of zeros and ones.
pub fn evaluate_map(scores: &Tensor, labels: &Tensor) -> Result<MapResult> {
    let (n, c) = check_matrix(scores, "scores")?;
    if labels.shape() != scores.shape() {
        return Err(data_err(format!("labels {:?} do not match scores {:?}", labels.shape(), scores.shape())));
    }
    if labels.data().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(data_err("labels must be 0 or 1"));
    }
    if labels.data().iter().all(|&x| x == 0.0) {
        return Err(data_err("label matrix has no positives"));
    }
    let mut per_class = Vec::with_capacity(c);
    let mut skipped = Vec::new();
    for j in 0..c {
        let col: Vec<f64> = (0..n).map(|i| scores.data()[i * c + j]).collect();
        let pos: Vec<bool> = (0..n).map(|i| labels.data()[i * c + j] == 1.0).collect();
        let ap = average_precision(&col, &pos);
        if ap.is_none() {
            skipped.push(j);
        }
        per_class.push(ap);
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = included.iter().sum::<f64>() / included.len() as f64;
    Ok(MapResult { map, per_class, skipped })
}

pub fn softmax_rows(scores: &Tensor) -> Result<Tensor> {
    let (n, c) = check_matrix(scores, "scores")?;
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let row = scores.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|x| x / z));
    }
    Ok(Tensor::new(vec![n, c], out)?)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of softmax-normalized (single-label) or sigmoid (multi-label)
/// scores of two models.
pub fn ensemble(a: &Tensor, b: &Tensor, mode: TaskMode) -> Result<Tensor> {
    check_matrix(a, "scores")?;
    if a.shape() != b.shape() {
        return Err(data_err(format!("cannot ensemble {:?} with {:?}", a.shape(), b.shape())));
    }
    let (na, nb) = match mode {
        TaskMode::SingleLabel => (softmax_rows(a)?, softmax_rows(b)?),
        TaskMode::MultiLabel => (a.map(sigmoid), b.map(sigmoid)),
    };
    let data = na.data().iter().zip(nb.data()).map(|(x, y)| (x + y) / 2.0).collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}
