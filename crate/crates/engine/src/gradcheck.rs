//! Central finite-difference verification of every differentiable operation.
//!
//! Each check reduces the operation's output to a scalar with a fixed random
//! weighting, differentiates it with [`Graph::backward`], and compares the
//! result with `(f(x + h) - f(x - h)) / 2h` evaluated coordinate by
//! coordinate. The error of one instance is
//! `‖analytic - numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-6)`.

use crate::error::Result;
use crate::graph::{Conv3dSpec, Graph, Var};
use crate::nn::{EncoderBlock, Regularization};
use crate::ops::{AttentionMask, AttnLayout};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type Build<'b> = dyn for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var> + 'b;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-6)
}

fn weighted_loss(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn output_weights(store: &ParamStore, build: &Build, inputs: &[Tensor], rng: &mut Rng) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
}

fn eval(store: &ParamStore, build: &Build, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let l = weighted_loss(&mut g, out, weights)?;
    Ok(g.value(l).data()[0])
}

/// Relative error of the gradient with respect to all `inputs` jointly, for a graph
/// that uses no parameters.
pub fn check_inputs(build: &Build, inputs: &[Tensor], step: f64, rng: &mut Rng) -> Result<f64> {
    check_inputs_with(&ParamStore::new(), build, inputs, step, rng)
}

/// As [`check_inputs`], for graphs that read parameters from `store`.
pub fn check_inputs_with(store: &ParamStore, build: &Build, inputs: &[Tensor], step: f64, rng: &mut Rng) -> Result<f64> {
    let weights = output_weights(store, build, inputs, rng)?;
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let l = weighted_loss(&mut g, out, &weights)?;
    let grads = g.backward(l)?;
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut perturbed = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = x0 + step;
            let up = eval(store, build, &perturbed, &weights)?;
            perturbed[i].data_mut()[j] = x0 - step;
            let down = eval(store, build, &perturbed, &weights)?;
            perturbed[i].data_mut()[j] = x0;
            numeric[j] = (up - down) / (2.0 * step);
        }
        all_a.extend(analytic);
        all_n.extend(numeric);
    }
    Ok(relative_error(&all_a, &all_n))
}

/// Relative error of the gradient with respect to every parameter in `store` jointly.
pub fn check_params(store: &mut ParamStore, build: &Build, inputs: &[Tensor], step: f64, rng: &mut Rng) -> Result<f64> {
    let weights = output_weights(store, build, inputs, rng)?;
    let grads = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let l = weighted_loss(&mut g, out, &weights)?;
        g.backward(l)?
    };
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = grads
            .param(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.value(id).len()]);
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let x0 = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = x0 + step;
            let up = eval(store, build, inputs, &weights)?;
            store.get_mut(id).value.data_mut()[j] = x0 - step;
            let down = eval(store, build, inputs, &weights)?;
            store.get_mut(id).value.data_mut()[j] = x0;
            numeric[j] = (up - down) / (2.0 * step);
        }
        all_a.extend(analytic);
        all_n.extend(numeric);
    }
    Ok(relative_error(&all_a, &all_n))
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).expect("valid shape")
}

/// Values bounded away from zero, so kinks are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    random(shape, rng).map(|v| v.signum() * (0.05 + v.abs()))
}

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn attention_case(rng: &mut Rng, mask_kind: usize) -> (Vec<Tensor>, AttnLayout, AttentionMask) {
    let groups = dims(rng, 1, 2);
    let heads = dims(rng, 1, 2);
    let width = heads * dims(rng, 1, 2);
    let q_len = dims(rng, 1, 3);
    let kv_len = if mask_kind == 1 || mask_kind == 3 { q_len } else { dims(rng, 1, 3) };
    let mut valid: Vec<bool> = (0..groups * kv_len).map(|_| rng.bernoulli(0.7)).collect();
    for gi in 0..groups {
        valid[gi * kv_len] = true;
    }
    let mask = match mask_kind {
        0 => AttentionMask::Bidirectional,
        1 => AttentionMask::Causal,
        2 => AttentionMask::Padding(valid),
        _ => AttentionMask::Combined(valid),
    };
    let layout = AttnLayout { groups, q_len, kv_len, heads };
    let q = random(&[groups * q_len, width], rng);
    let k = random(&[groups * kv_len, width], rng);
    let v = random(&[groups * kv_len, width], rng);
    (vec![q, k, v], layout, mask)
}

/// Runs `instances` random checks of every differentiable operation.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let root = Rng::seed(seed);
    let mut reports = Vec::new();
    let mut record = |name: &str, f: &mut dyn FnMut(&mut Rng) -> Result<f64>| -> Result<()> {
        let mut rng = root.fork_named(name);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            worst = worst.max(f(&mut rng)?);
        }
        reports.push(CheckReport {
            op: name.to_string(),
            instances,
            max_rel_error: worst,
        });
        Ok(())
    };
    let h = DEFAULT_STEP;

    record("matmul", &mut |r| {
        let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        let ins = [random(&[m, k], r), random(&[k, n], r)];
        check_inputs(&|g, v| g.matmul(v[0], v[1]), &ins, h, r)
    })?;
    record("linear", &mut |r| {
        let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        let ins = [random(&[m, k], r), random(&[k, n], r), random(&[n], r)];
        check_inputs(&|g, v| g.linear(v[0], v[1], Some(v[2])), &ins, h, r)
    })?;
    record("add", &mut |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        let ins = [random(&s, r), random(&s, r)];
        check_inputs(&|g, v| g.add(v[0], v[1]), &ins, h, r)
    })?;
    record("sub", &mut |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        let ins = [random(&s, r), random(&s, r)];
        check_inputs(&|g, v| g.sub(v[0], v[1]), &ins, h, r)
    })?;
    record("mul", &mut |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        let ins = [random(&s, r), random(&s, r)];
        check_inputs(&|g, v| g.mul(v[0], v[1]), &ins, h, r)
    })?;
    record("add_row", &mut |r| {
        let (m, n) = (dims(r, 1, 4), dims(r, 1, 4));
        let ins = [random(&[m, n], r), random(&[n], r)];
        check_inputs(&|g, v| g.add_row(v[0], v[1]), &ins, h, r)
    })?;
    record("scale", &mut |r| {
        let c = r.uniform_range(-2.0, 2.0);
        let ins = [random(&[dims(r, 1, 8)], r)];
        check_inputs(&|g, v| Ok(g.scale(v[0], c)), &ins, h, r)
    })?;
    record("sum", &mut |r| {
        let ins = [random(&[dims(r, 1, 4), dims(r, 1, 4)], r)];
        check_inputs(&|g, v| Ok(g.sum(v[0])), &ins, h, r)
    })?;
    record("mean", &mut |r| {
        let ins = [random(&[dims(r, 1, 4), dims(r, 1, 4)], r)];
        check_inputs(&|g, v| Ok(g.mean(v[0])), &ins, h, r)
    })?;
    record("gelu", &mut |r| {
        let ins = [random(&[dims(r, 1, 16)], r).map(|x| 3.0 * x)];
        check_inputs(&|g, v| Ok(g.gelu(v[0])), &ins, h, r)
    })?;
    record("relu", &mut |r| {
        let ins = [away_from_zero(&[dims(r, 1, 16)], r)];
        check_inputs(&|g, v| Ok(g.relu(v[0])), &ins, h, r)
    })?;
    record("softmax", &mut |r| {
        let ins = [random(&[dims(r, 1, 3), dims(r, 1, 5)], r).map(|x| 3.0 * x)];
        check_inputs(&|g, v| g.softmax(v[0]), &ins, h, r)
    })?;
    record("layer_norm", &mut |r| {
        let c = dims(r, 2, 6);
        let ins = [random(&[dims(r, 1, 3), c], r), random(&[c], r), random(&[c], r)];
        check_inputs(&|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), &ins, h, r)
    })?;
    record("dropout", &mut |r| {
        let seed = r.next_seed();
        let ins = [random(&[dims(r, 1, 16)], r)];
        check_inputs(&|g, v| g.dropout(v[0], 0.3, true, &mut Rng::seed(seed)), &ins, h, r)
    })?;
    for (kind, name) in ["attention_bidirectional", "attention_causal", "attention_padding", "attention_combined"]
        .iter()
        .enumerate()
    {
        record(name, &mut |r| {
            let (ins, layout, mask) = attention_case(r, kind);
            check_inputs(&|g, v| g.attention(v[0], v[1], v[2], layout, &mask), &ins, h, r)
        })?;
    }
    record("cross_entropy", &mut |r| {
        let (n, c) = (dims(r, 1, 4), dims(r, 2, 6));
        let targets: Vec<usize> = (0..n).map(|_| r.below(c)).collect();
        let ins = [random(&[n, c], r).map(|x| 2.0 * x)];
        check_inputs(&|g, v| g.cross_entropy(v[0], &targets), &ins, h, r)
    })?;
    record("binary_cross_entropy", &mut |r| {
        let (n, c) = (dims(r, 1, 4), dims(r, 1, 6));
        let targets: Vec<f64> = (0..n * c).map(|_| if r.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        let ins = [random(&[n, c], r).map(|x| 2.0 * x)];
        check_inputs(&|g, v| g.binary_cross_entropy(v[0], &targets), &ins, h, r)
    })?;
    record("concat_cols", &mut |r| {
        let m = dims(r, 1, 4);
        let ins = [random(&[m, dims(r, 1, 3)], r), random(&[m, dims(r, 1, 3)], r)];
        check_inputs(&|g, v| g.concat_cols(&[v[0], v[1]]), &ins, h, r)
    })?;
    record("concat_rows", &mut |r| {
        let n = dims(r, 1, 4);
        let ins = [random(&[dims(r, 1, 3), n], r), random(&[dims(r, 1, 3), n], r)];
        check_inputs(&|g, v| g.concat_rows(&[v[0], v[1]]), &ins, h, r)
    })?;
    record("combine_rows", &mut |r| {
        let rows = dims(r, 1, 5);
        let map: Vec<Vec<(usize, f64)>> = (0..dims(r, 1, 4))
            .map(|_| (0..dims(r, 1, 3)).map(|_| (r.below(rows), r.uniform_range(-1.0, 1.0))).collect())
            .collect();
        let ins = [random(&[rows, dims(r, 1, 4)], r)];
        check_inputs(&|g, v| g.combine_rows(v[0], map.clone()), &ins, h, r)
    })?;
    record("reshape", &mut |r| {
        let (a, b) = (dims(r, 1, 4), dims(r, 1, 4));
        let ins = [random(&[a, b], r)];
        check_inputs(&|g, v| g.reshape(v[0], vec![b, a]), &ins, h, r)
    })?;
    record("conv3d", &mut |r| {
        let spec = Conv3dSpec {
            kernel: [dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3)],
            stride: [1, dims(r, 1, 2), dims(r, 1, 2)],
            padding: [r.below(2), r.below(2), r.below(2)],
        };
        let cin = dims(r, 1, 2);
        let cout = dims(r, 1, 2);
        let input = [1, 2, 3, 3, cin];
        let taps: usize = spec.kernel.iter().product();
        let ins = [random(&input, r), random(&[taps * cin, cout], r), random(&[cout], r)];
        check_inputs(&|g, v| g.conv3d(v[0], v[1], v[2], spec), &ins, h, r)
    })?;
    record("encoder_block", &mut |r| {
        let mut store = ParamStore::new();
        let heads = dims(r, 1, 2);
        let width = 2 * heads;
        let block = EncoderBlock::new(&mut store, "blk", width, heads, 2, r)?;
        // Non-trivial normalization affine parameters.
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            let t = random(&shape, r);
            store.set_value(id, t)?;
        }
        let len = dims(r, 1, 3);
        let causal = r.bernoulli(0.5);
        let ins = [random(&[2 * len, width], r)];
        let mask = if causal { AttentionMask::Causal } else { AttentionMask::Bidirectional };
        let seed = r.next_seed();
        let build = move |g: &mut Graph, v: &[Var]| {
            let mut drop_rng = Rng::seed(seed);
            let mut reg = Regularization { rate: 0.2, training: true, rng: &mut drop_rng };
            block.forward(g, v[0], 2, &mask, &mut reg)
        };
        let e_in = check_inputs_with(&store, &build, &ins, h, r)?;
        let e_par = check_params(&mut store, &build, &ins, h, r)?;
        Ok(e_in.max(e_par))
    })?;
    Ok(reports)
}

impl Rng {
    fn next_seed(&mut self) -> u64 {
        use rand::RngCore;
        self.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradient_matches_structure() {
        // d sum(A·B) / dA = ones · Bᵀ, i.e. every row equals the row sums of B.
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, -3.0, 1.5]).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let l = g.sum(c);
        let grads = g.backward(l).unwrap();
        let row_sums: Vec<f64> = (0..3).map(|i| b.row(i).iter().sum()).collect();
        assert_eq!(grads.wrt(va).unwrap().data(), &[row_sums.clone(), row_sums].concat()[..]);
        let col_sums: Vec<f64> = (0..3).map(|k| a.data()[k] + a.data()[3 + k]).collect();
        let expect_b: Vec<f64> = col_sums.iter().flat_map(|&s| [s, s]).collect();
        assert_eq!(grads.wrt(vb).unwrap().data(), &expect_b[..]);

        let mut r = Rng::seed(0);
        let err = check_inputs(&|g, v| g.matmul(v[0], v[1]), &[a, b], DEFAULT_STEP, &mut r).unwrap();
        assert!(err < TOLERANCE);
    }

    #[test]
    fn detects_wrong_gradients() {
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.1]) > TOLERANCE);
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.0]) == 0.0);
    }
}
