use proptest::prelude::*;
use stlt_engine::nn::MultiHeadAttention;
use stlt_engine::ops::{scaled_dot_product_attention, softmax};
use stlt_engine::{AttentionMask, AttnLayout, Graph, ParamStore, Rng, Tensor};

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

/// Per-head loop: project with each head's column slice, attend, then
/// concatenate and apply the output projection, all with naive loops.
fn mha_oracle(x: &Tensor, source: &Tensor, store: &ParamStore, mha: &MultiHeadAttention, causal: bool) -> Vec<f64> {
    let width = mha.width;
    let dk = width / mha.heads;
    let proj = |inp: &Tensor, lin: &stlt_engine::nn::Linear| -> Vec<Vec<f64>> {
        let w = store.value(lin.weight);
        let b = store.value(lin.bias.unwrap());
        (0..inp.rows())
            .map(|r| {
                (0..width)
                    .map(|c| b.data()[c] + (0..width).map(|k| inp.row(r)[k] * w.data()[k * width + c]).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let q = proj(x, &mha.query);
    let k = proj(source, &mha.key);
    let v = proj(source, &mha.value);
    let t = x.rows();
    let s = source.rows();
    let mut concat = vec![vec![0.0; width]; t];
    for h in 0..mha.heads {
        for i in 0..t {
            let allowed: Vec<usize> = (0..s).filter(|&j| !causal || j <= i).collect();
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&j| (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let p = softmax(&scores).unwrap();
            for (pi, &j) in p.iter().zip(&allowed) {
                for c in 0..dk {
                    concat[i][h * dk + c] += pi * v[j][h * dk + c];
                }
            }
        }
    }
    let out = Tensor::from_rows(&concat).unwrap();
    proj(&out, &mha.output).concat()
}

#[test]
fn multi_head_matches_per_head_oracle() {
    let mut rng = Rng::seed(42);
    for causal in [false, true] {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
        let x = random(4, 8, &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let mask = if causal { AttentionMask::Causal } else { AttentionMask::Bidirectional };
        let out = mha.forward(&mut g, xv, xv, 1, &mask).unwrap();
        let oracle = mha_oracle(&x, &x, &store, &mha, causal);
        let diff = g.value(out).data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-10, "causal={causal}: {diff}");
    }
}

#[test]
fn cross_attention_two_by_two_matches_oracle() {
    let mut rng = Rng::seed(5);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "x", 4, 1, &mut rng).unwrap();
    let target = random(2, 4, &mut rng);
    let source = random(2, 4, &mut rng);
    let mut g = Graph::new(&store);
    let (t, s) = (g.constant(target.clone()), g.constant(source.clone()));
    let out = mha.forward(&mut g, t, s, 1, &AttentionMask::Bidirectional).unwrap();
    let oracle = mha_oracle(&target, &source, &store, &mha, false);
    assert!(g.value(out).data().iter().zip(&oracle).all(|(a, b)| (a - b).abs() <= 1e-9));
}

#[test]
fn single_head_identity_projection_is_plain_attention() {
    let mut rng = Rng::seed(9);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "id", 3, 1, &mut rng).unwrap();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    for lin in [&mha.query, &mha.key, &mha.value, &mha.output] {
        store.set_value(lin.weight, Tensor::new(vec![3, 3], eye.clone()).unwrap()).unwrap();
    }
    let x = random(5, 3, &mut rng);
    let direct = scaled_dot_product_attention(&x, &x, &x, &AttentionMask::Causal).unwrap();
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let out = mha.forward(&mut g, xv, xv, 1, &AttentionMask::Causal).unwrap();
    assert!(g.value(out).max_abs_diff(&direct) < 1e-14);
}

#[test]
fn width_not_divisible_by_heads_is_a_config_error() {
    let mut store = ParamStore::new();
    let err = MultiHeadAttention::new(&mut store, "bad", 10, 3, &mut Rng::seed(0));
    assert!(matches!(err, Err(stlt_engine::EngineError::Config(_))));
}

#[test]
fn causal_position_zero_ignores_later_sources() {
    let mut rng = Rng::seed(11);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "c", 8, 4, &mut rng).unwrap();
    let a = random(6, 8, &mut rng);
    let mut b = a.clone();
    for v in &mut b.data_mut()[8..] {
        *v += 3.0;
    }
    let run = |x: &Tensor| {
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let out = mha.forward(&mut g, xv, xv, 1, &AttentionMask::Causal).unwrap();
        g.value(out).row(0).to_vec()
    };
    assert_eq!(run(&a), run(&b));
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let a = softmax(&v).unwrap();
        let b = softmax(&shifted).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
    }

    #[test]
    fn attention_rows_are_convex_combinations(seed in any::<u64>(), t in 1usize..5, s in 1usize..6, causal in any::<bool>()) {
        let mut rng = Rng::seed(seed);
        let s = if causal { t } else { s };
        let q = random(t, 3, &mut rng);
        let k = random(s, 3, &mut rng);
        let v = random(s, 2, &mut rng);
        let mask = if causal { AttentionMask::Causal } else { AttentionMask::Bidirectional };
        let out = scaled_dot_product_attention(&q, &k, &v, &mask).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..s).map(|j| v.row(j)[c]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..t {
                let o = out.row(i)[c];
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn causal_prefix_is_bit_exact(seed in any::<u64>(), len in 2usize..8, cut in 1usize..7) {
        let cut = cut.min(len - 1);
        let mut rng = Rng::seed(seed);
        let mut store = ParamStore::new();
        let block = stlt_engine::nn::Encoder::new(&mut store, "enc", 2, 8, 2, 2, &mut rng).unwrap();
        let x = random(len, 8, &mut rng);
        let prefix = Tensor::new(vec![cut, 8], x.data()[..cut * 8].to_vec()).unwrap();
        let run = |input: &Tensor| {
            let mut g = Graph::new(&store);
            let v = g.constant(input.clone());
            let mut r = Rng::seed(0);
            let mut reg = stlt_engine::nn::Regularization { rate: 0.1, training: false, rng: &mut r };
            let out = block.forward(&mut g, v, 1, &AttentionMask::Causal, &mut reg).unwrap();
            g.value(out).data().to_vec()
        };
        let full = run(&x);
        let part = run(&prefix);
        prop_assert_eq!(&full[..cut * 8], &part[..]);
    }

    #[test]
    fn padded_sources_contribute_nothing(seed in any::<u64>(), s in 2usize..6) {
        let mut rng = Rng::seed(seed);
        let q = random(3, 4, &mut rng);
        let k = random(s, 4, &mut rng);
        let v = random(s, 4, &mut rng);
        let mut valid = vec![true; s];
        valid[s - 1] = false;
        let layout = AttnLayout { groups: 1, q_len: 3, kv_len: s, heads: 2 };
        let store = ParamStore::new();
        let run = |k: Tensor, v: Tensor| {
            let mut g = Graph::new(&store);
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k), g.constant(v));
            let out = g.attention(qv, kv, vv, layout, &AttentionMask::Padding(valid.clone())).unwrap();
            g.value(out).clone()
        };
        let base = run(k.clone(), v.clone());
        let (mut k2, mut v2) = (k, v);
        for c in 0..4 {
            k2.data_mut()[(s - 1) * 4 + c] = 1e3;
            v2.data_mut()[(s - 1) * 4 + c] = -1e3;
        }
        prop_assert_eq!(base, run(k2, v2));
    }
}
