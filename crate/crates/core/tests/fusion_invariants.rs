mod common;

use common::fusion::*;
use common::*;
use stlt_core::fusion::{caf_stack, model_loss, roi_align, AppearanceInput, FeatureMap, FusionHead, FusionModel, Scheme, Targets};
use stlt_core::layout::{BoundingBox, PADDING_CATEGORY};
use stlt_core::model::LayoutBatch;
use stlt_engine::nn::{Linear, Regularization};
use stlt_engine::{Adam, AdamConfig, Graph, ParamStore, Rng, Tensor};

const TRIALS: usize = 200;

#[test]
fn pff_reduces_to_each_branch_and_matches_its_composition() {
    for t in 0..TRIALS {
        let mut rng = Rng::seed(100 + t as u64);
        let c = case(&mut rng, 2);
        let (mut store, m) = build(Scheme::Pff, t as u64, 2);
        let stlt = m.layout.as_ref().unwrap();
        let composed = |store: &ParamStore, with_layout: bool| {
            eval(store, |g, reg| {
                let map = per_frame_map(g, &m, &c);
                let per_frame = g.mean_row_groups(map.map, map.extent[1] * map.extent[2]).unwrap();
                let mut s = head_proj(&m).forward(g, per_frame).unwrap();
                if with_layout {
                    let o = stlt.embed_objects(g, &c.batch, None, reg).unwrap();
                    let sp = stlt.spatial_forward(g, &c.batch, o, reg).unwrap();
                    s = g.add(sp, s).unwrap();
                }
                let out = stlt.temporal_forward(g, s, 2, None, reg).unwrap();
                let y = stlt.classify(g, out.class).unwrap();
                g.value(y).clone()
            })
        };
        let d = max_diff(&fused(&store, &m, &c), &composed(&store, true));
        assert!(d <= 1e-10, "trial {t}: composition {d}");

        let mut zero_app = store.clone();
        zero_prefix(&mut zero_app, "fuse.proj");
        let d = max_diff(&fused(&zero_app, &m, &c), &plain_stlt(&zero_app, &m, &c));
        assert!(d <= 1e-10, "trial {t}: zero appearance {d}");

        let norm = &stlt.spatial.final_norm;
        for id in [norm.gamma, norm.beta] {
            store.set_value(id, Tensor::zeros(&[WIDTH])).unwrap();
        }
        let d = max_diff(&fused(&store, &m, &c), &composed(&store, false));
        assert!(d <= 1e-10, "trial {t}: zero layout {d}");
    }
}

/// RoI vectors of every batch row, computed one map at a time.
fn reference_rois(map: &Tensor, extent: [usize; 3], batch: &LayoutBatch) -> Vec<Vec<f64>> {
    let [_, h, w] = extent;
    let mut out = Vec::new();
    for v in 0..batch.videos {
        for f in 0..batch.frames {
            let base = (v * batch.frames + f) * h * w;
            let mut chw = vec![0.0; C * h * w];
            for cell in 0..h * w {
                for ch in 0..C {
                    chw[ch * h * w + cell] = map.row(base + cell)[ch];
                }
            }
            let chw = Tensor::new(vec![C, h, w], chw).unwrap();
            for s in 0..batch.tokens_per_frame() {
                let r = batch.class_row(v, f) + s;
                if !batch.valid[r] || batch.categories[r] == PADDING_CATEGORY {
                    out.push(vec![0.0; C]);
                    continue;
                }
                let b = &batch.boxes[r * 4..r * 4 + 4];
                let bbox = stlt_core::fusion::grow_to_cell(&BoundingBox { x1: b[0], y1: b[1], x2: b[2], y2: b[3] }, h, w);
                out.push(roi_align(&chw, &bbox).unwrap());
            }
        }
    }
    out
}

#[test]
fn pbf_object_embeddings_add_projected_rois() {
    for t in 0..TRIALS {
        let mut rng = Rng::seed(200 + t as u64);
        let c = case(&mut rng, 2);
        let (store, m) = build(Scheme::Pbf, t as u64, 2);
        let stlt = m.layout.as_ref().unwrap();
        let (got, want) = eval(&store, |g, reg| {
            let map = per_frame_map(g, &m, &c);
            let rois = reference_rois(g.value(map.map), map.extent, &c.batch);
            let extra = g.constant(from_rows(&rois));
            let extra = head_proj(&m).forward(g, extra).unwrap();
            let o = stlt.embed_objects(g, &c.batch, Some(extra), reg).unwrap();
            let s = stlt.spatial_forward(g, &c.batch, o, reg).unwrap();
            let out = stlt.temporal_forward(g, s, 2, None, reg).unwrap();
            let y = stlt.classify(g, out.class).unwrap();
            let want = g.value(y).clone();
            let f = m.forward(g, &c.batch, &c.input, reg).unwrap();
            (g.value(f.fused).clone(), want)
        });
        let d = max_diff(&got, &want);
        assert!(d <= 1e-10, "trial {t}: {d}");
    }
}

#[test]
fn pbf_reduces_to_stlt_and_keeps_permutation_symmetry() {
    for t in 0..TRIALS {
        let mut rng = Rng::seed(300 + t as u64);
        let c = case(&mut rng, 1);
        let (store, m) = build(Scheme::Pbf, t as u64, 2);
        let mut p = c.videos[0].clone();
        for f in &mut p.frames {
            rng.shuffle(&mut f.objects);
        }
        let pc = Case { batch: LayoutBatch::new(&[&p], SLOTS).unwrap(), videos: vec![p], input: c.input.clone() };
        let d = max_diff(&fused(&store, &m, &c), &fused(&store, &m, &pc));
        assert!(d <= 1e-9, "trial {t}: permutation {d}");

        let mut zero = store.clone();
        zero_prefix(&mut zero, "fuse.proj");
        let d = max_diff(&fused(&zero, &m, &c), &plain_stlt(&zero, &m, &c));
        assert!(d <= 1e-10, "trial {t}: zero projection {d}");
    }
}

#[test]
fn ef_video_token_leads_the_causal_sequence() {
    for t in 0..TRIALS {
        let mut rng = Rng::seed(400 + t as u64);
        let (store, m) = build(Scheme::Ef, t as u64, 2);
        let stlt = m.layout.as_ref().unwrap();
        let frames = random_tensor(&mut rng, &[FRAMES, WIDTH], 1.0);
        let lead = random_tensor(&mut rng, &[1, WIDTH], 1.0);
        let run = |frames: &Tensor, lead: &Tensor| {
            let mut g = Graph::new(&store);
            let mut r = Rng::seed(0);
            let mut reg = Regularization { rate: 0.1, training: false, rng: &mut r };
            let s = g.constant(frames.clone());
            let l = g.input(lead.clone());
            let out = stlt.temporal_forward(&mut g, s, 1, Some(l), &mut reg).unwrap();
            let score = g.sum(out.class);
            let grads = g.backward(score).unwrap();
            let sensitivity = grads.wrt(l).map_or(0.0, |x| x.data().iter().map(|v| v.abs()).sum());
            (out.len, g.value(out.hidden).clone(), sensitivity)
        };
        let (len, hidden, sensitivity) = run(&frames, &lead);
        assert_eq!(len, FRAMES + 2);
        assert!(sensitivity > 0.0, "trial {t}");

        let i = rng.below(FRAMES);
        let mut later = frames.clone();
        for r in i + 1..FRAMES {
            for k in 0..WIDTH {
                later.data_mut()[r * WIDTH + k] = rng.normal();
            }
        }
        let (_, h2, _) = run(&later, &lead);
        for r in 0..=i + 1 {
            assert_eq!(hidden.row(r), h2.row(r), "trial {t}: row {r}");
        }

        let mut lead2 = lead.clone();
        lead2.data_mut()[0] += 0.5;
        let (_, h3, _) = run(&frames, &lead2);
        for r in 0..len {
            assert_ne!(hidden.row(r), h3.row(r), "trial {t}: row {r} ignores the video token");
        }
    }
}

fn random_map(g: &mut Graph, rng: &mut Rng, extent: [usize; 3], constant: bool) -> FeatureMap {
    let cells: usize = extent.iter().product();
    let t = if constant {
        let row: Vec<f64> = (0..C).map(|_| rng.normal()).collect();
        from_rows(&vec![row; cells])
    } else {
        random_tensor(rng, &[cells, C], 1.0)
    };
    FeatureMap { map: g.constant(t), videos: 1, extent }
}

fn vatf_parts(m: &FusionModel) -> (&Linear, &Linear, &stlt_engine::nn::CrossBlock, &Linear) {
    match &m.head {
        FusionHead::Vatf { query, memory, blocks, classifier } => (query, memory, &blocks[0], classifier),
        _ => unreachable!(),
    }
}

/// Per-query logits averaged over the boxes, written out with the
/// reference implementations.
fn vatf_reference(store: &ParamStore, m: &FusionModel, map: &Tensor, extent: [usize; 3], boxes: &[BoundingBox]) -> Vec<f64> {
    let (query, memory, block, classifier) = vatf_parts(m);
    let [te, h, w] = extent;
    let central = te / 2;
    let mut chw = vec![0.0; C * h * w];
    for cell in 0..h * w {
        for ch in 0..C {
            chw[ch * h * w + cell] = map.row(central * h * w + cell)[ch];
        }
    }
    let chw = Tensor::new(vec![C, h, w], chw).unwrap();
    let rois: Vec<Vec<f64>> = boxes.iter().map(|b| roi_align(&chw, b).unwrap()).collect();
    let q = ref_linear(&rois, store, query);
    let mem = ref_linear(&rows_of(map), store, memory);
    let x = ref_cross_block(&q, &mem, store, block, &|_, _| true);
    let logits = ref_linear(&x, store, classifier);
    (0..CLASSES).map(|k| logits.iter().map(|r| r[k]).sum::<f64>() / boxes.len() as f64).collect()
}

fn vatf(store: &ParamStore, m: &FusionModel, map_of: impl FnOnce(&mut Graph) -> FeatureMap, boxes: Vec<BoundingBox>) -> (Tensor, Tensor, [usize; 3]) {
    eval(store, |g, reg| {
        let map = map_of(g);
        let y = m.vatf_logits(g, &map, &[boxes], reg).unwrap();
        (g.value(y).clone(), g.value(map.map).clone(), map.extent)
    })
}

#[test]
fn vatf_matches_brute_force_decoder() {
    for t in 0..TRIALS {
        let (store, m) = build(Scheme::Vatf, t as u64, 1);
        let mut rng = Rng::seed(500 + t as u64);
        let boxes = vec![random_box(&mut rng), random_box(&mut rng)];
        let boxes: Vec<BoundingBox> = boxes.iter().map(|b| stlt_core::fusion::grow_to_cell(b, 2, 2)).collect();
        let mut r2 = rng.fork(1);
        let (got, map, extent) = vatf(&store, &m, |g| random_map(g, &mut r2, [1, 2, 2], false), boxes.clone());
        let want = vatf_reference(&store, &m, &map, extent, &boxes);
        let d = got.row(0).iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-9, "trial {t}: {d}");
    }
}

#[test]
fn vatf_over_constant_trunk_reads_the_constant_token() {
    for t in 0..TRIALS {
        let (store, m) = build(Scheme::Vatf, t as u64, 2);
        let (query, memory, block, classifier) = vatf_parts(&m);
        let mut rng = Rng::seed(600 + t as u64);
        let (got, map, _) = vatf(&store, &m, |g| random_map(g, &mut rng, [2, 2, 2], true), vec![BoundingBox::FULL]);
        // Attention over identical memory rows returns that row's value.
        let token = vec![map.row(0).to_vec()];
        let q = ref_linear(&token, &store, query);
        let mem = ref_linear(&token, &store, memory);
        let s = ref_layer_norm(&mem, &store, &block.source_norm);
        let attended = ref_linear(&ref_linear(&s, &store, &block.attn.value), &store, &block.attn.output);
        let x = add_rows(&q, &attended);
        let f = ref_feed_forward(&ref_layer_norm(&x, &store, &block.ff_norm), &store, &block.ff.inner, &block.ff.outer);
        let want = ref_linear(&add_rows(&x, &f), &store, classifier);
        let d = got.row(0).iter().zip(&want[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-9, "trial {t}: {d}");
    }
}

#[test]
fn vatf_has_one_query_per_box() {
    for t in 0..TRIALS {
        let (store, m) = build(Scheme::Vatf, t as u64, 2);
        let mut rng = Rng::seed(700 + t as u64);
        let k = 1 + rng.below(4);
        let boxes: Vec<BoundingBox> = (0..k).map(|_| random_box(&mut rng)).collect();
        let map = random_tensor(&mut rng, &[8, C], 1.0);
        let with = |b: Vec<BoundingBox>| vatf(&store, &m, |g| FeatureMap { map: g.constant(map.clone()), videos: 1, extent: [2, 2, 2] }, b).0;
        let all = with(boxes.clone());
        let mean: Vec<f64> = (0..CLASSES)
            .map(|j| boxes.iter().map(|b| with(vec![*b]).row(0)[j]).sum::<f64>() / k as f64)
            .collect();
        let d = all.row(0).iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-12, "trial {t}: {d}");
        assert_eq!(with(Vec::new()), with(vec![BoundingBox::FULL]));
    }
}

fn lcf_parts(m: &FusionModel) -> (&Linear, &Linear, stlt_engine::ParamId) {
    match &m.head {
        FusionHead::Lcf { layout, appearance, bias } => (layout, appearance, *bias),
        _ => unreachable!(),
    }
}

#[test]
fn lcf_halves_reduce_to_single_branch_classifiers() {
    for t in 0..TRIALS {
        let mut rng = Rng::seed(800 + t as u64);
        let c = case(&mut rng, 2);
        let (store, m) = build(Scheme::Lcf, t as u64, 2);
        let (layout, appearance, bias) = lcf_parts(&m);
        for (zeroed, kept) in [(appearance, layout), (layout, appearance)] {
            let mut s = store.clone();
            let shape = s.value(zeroed.weight).shape().to_vec();
            s.set_value(zeroed.weight, Tensor::zeros(&shape)).unwrap();
            let (got, want) = eval(&s, |g, reg| {
                let out = m.forward(g, &c.batch, &c.input, reg).unwrap();
                let branch = if kept.weight == layout.weight {
                    m.layout.as_ref().unwrap().encode(g, &c.batch, reg).unwrap().class
                } else {
                    m.appearance_vector(g, &c.input, reg).unwrap()
                };
                let single = Linear { weight: kept.weight, bias: Some(bias) };
                let y = single.forward(g, branch).unwrap();
                (g.value(out.fused).clone(), g.value(y).clone())
            });
            assert_eq!(got.shape(), &[2, CLASSES]);
            assert_eq!(got, want, "trial {t}");
        }
    }
}

fn caf_parts(m: &FusionModel) -> (&[stlt_engine::nn::CrossBlock], &[stlt_engine::nn::CrossBlock]) {
    match &m.head {
        FusionHead::Caf { to_app, to_layout, .. } => (to_app, to_layout),
        _ => unreachable!(),
    }
}

#[test]
fn caf_matches_brute_force_cross_attention() {
    for t in 0..TRIALS {
        let (store, m) = build(Scheme::Caf, t as u64, 2);
        let (to_app, to_layout) = caf_parts(&m);
        let mut rng = Rng::seed(900 + t as u64);
        let l = random_tensor(&mut rng, &[2, WIDTH], 1.0);
        let a = random_tensor(&mut rng, &[2, WIDTH], 1.0);
        let (nl, na) = eval(&store, |g, reg| {
            let (lv, av) = (g.constant(l.clone()), g.constant(a.clone()));
            let (x, y) = caf_stack(g, lv, av, 1, to_app, to_layout, None, reg).unwrap();
            (g.value(x).clone(), g.value(y).clone())
        });
        let want_l = ref_cross_block(&rows_of(&l), &rows_of(&a), &store, &to_app[0], &|_, _| true);
        let want_a = ref_cross_block(&rows_of(&a), &rows_of(&l), &store, &to_layout[0], &|_, _| true);
        assert!(max_diff(&nl, &from_rows(&want_l)) <= 1e-9, "trial {t}");
        assert!(max_diff(&na, &from_rows(&want_a)) <= 1e-9, "trial {t}");
    }
}

#[test]
fn caf_singleton_appearance_gets_all_attention() {
    for t in 0..TRIALS {
        let (store, m) = build(Scheme::Caf, t as u64, 2);
        let (to_app, _) = caf_parts(&m);
        let attn = &to_app[0].attn;
        let mut rng = Rng::seed(1000 + t as u64);
        let q = random_tensor(&mut rng, &[5, WIDTH], 1.0);
        let s = random_tensor(&mut rng, &[1, WIDTH], 1.0);
        let got = eval(&store, |g, _| {
            let (qv, sv) = (g.constant(q.clone()), g.constant(s.clone()));
            let y = attn.forward(g, qv, sv, 1, &stlt_engine::AttentionMask::Bidirectional).unwrap();
            g.value(y).clone()
        });
        let token = ref_linear(&ref_linear(&rows_of(&s), &store, &attn.value), &store, &attn.output);
        for r in 0..5 {
            let d = got.row(r).iter().zip(&token[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d <= 1e-12, "trial {t} row {r}: {d}");
        }
    }
}

#[test]
fn caf_rejects_fully_masked_appearance() {
    let (store, m) = build(Scheme::Caf, 1, 2);
    let (to_app, to_layout) = caf_parts(&m);
    let mut rng = Rng::seed(1);
    let l = random_tensor(&mut rng, &[2, WIDTH], 1.0);
    let a = random_tensor(&mut rng, &[3, WIDTH], 1.0);
    let r = eval(&store, |g, reg| {
        let (lv, av) = (g.constant(l), g.constant(a));
        caf_stack(g, lv, av, 1, to_app, to_layout, Some(&[false, false, false]), reg).map(|_| ())
    });
    assert!(r.is_err());
}

fn backward_nonzero(store: &ParamStore, m: &FusionModel, c: &Case) -> Vec<(String, bool)> {
    let mut g = Graph::new(store);
    let mut r = Rng::seed(0);
    let mut reg = Regularization { rate: 0.1, training: true, rng: &mut r };
    let out = m.forward(&mut g, &c.batch, &c.input, &mut reg).unwrap();
    let targets = Targets::Single(c.videos.iter().map(|v| v.label.single().unwrap()).collect());
    let loss = model_loss(&mut g, m, &out, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    store
        .iter()
        .map(|(id, p)| (p.name.clone(), grads.param(id).is_some_and(|x| x.data().iter().any(|&v| v != 0.0))))
        .collect()
}

#[test]
fn cacnf_gradients_reach_both_branches_and_the_fusion_stack() {
    for t in 0..TRIALS / 10 {
        let mut rng = Rng::seed(1100 + t as u64);
        let c = case(&mut rng, 2);
        let (store, m) = build(Scheme::Cacnf, t as u64, 2);
        let flags = backward_nonzero(&store, &m, &c);
        for prefix in ["stlt.", "app.", "fuse.", "stlt.classifier.", "app.classifier.", "fuse.classifier."] {
            assert!(flags.iter().any(|(n, nz)| n.starts_with(prefix) && *nz), "trial {t}: nothing under {prefix}");
        }
    }
}

#[test]
fn every_scheme_trains_one_step_and_evaluates_repeatably() {
    let mut rng = Rng::seed(12);
    let c = case(&mut rng, 2);
    for scheme in [
        Scheme::None,
        Scheme::Appearance,
        Scheme::Pff,
        Scheme::Pbf,
        Scheme::Ef,
        Scheme::Vatf,
        Scheme::Lcf,
        Scheme::Caf,
        Scheme::Cacnf,
    ] {
        let (mut store, m) = build(scheme, 3, 2);
        let first = fused(&store, &m, &c);
        assert_eq!(first.shape(), &[2, CLASSES]);
        assert_eq!(first, fused(&store, &m, &c), "{scheme:?}");
        let grads = {
            let mut g = Graph::new(&store);
            let mut r = Rng::seed(0);
            let mut reg = Regularization { rate: 0.1, training: true, rng: &mut r };
            let out = m.forward(&mut g, &c.batch, &c.input, &mut reg).unwrap();
            let loss = model_loss(&mut g, &m, &out, &Targets::Single(vec![0, 2])).unwrap();
            g.backward(loss).unwrap()
        };
        store.accumulate(&grads).unwrap();
        Adam::new(AdamConfig::default()).step(&mut store).unwrap_or_else(|e| panic!("{scheme:?}: {e}"));
        assert_ne!(first, fused(&store, &m, &c), "{scheme:?}");
    }
}

fn app_vector(store: &ParamStore, m: &FusionModel, clips: &Tensor) -> Tensor {
    eval(store, |g, reg| {
        let input = AppearanceInput { clips: Some(clips.clone()), ..AppearanceInput::default() };
        let v = m.appearance_vector(g, &input, reg).unwrap();
        g.value(v).clone()
    })
}

#[test]
fn appearance_vector_of_a_blank_clip_is_set_by_biases() {
    let (mut store, m) = build(Scheme::Appearance, 4, 2);
    for i in 0..3 {
        zero_prefix(&mut store, &format!("app.conv{i}.b"));
    }
    let v = app_vector(&store, &m, &Tensor::zeros(&[1, CLIP, RES, RES, 3]));
    assert_eq!(v.shape(), &[1, APP]);
    let head = &m.appearance.as_ref().unwrap().head;
    let want: Vec<f64> = store.value(head.bias.unwrap()).data().iter().map(|&b| ref_gelu(b)).collect();
    assert!(v.row(0).iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12));
    assert_eq!(v, app_vector(&store, &m, &Tensor::zeros(&[1, CLIP, RES, RES, 3])));
}

#[test]
fn appearance_batches_match_single_clips() {
    for t in 0..TRIALS / 4 {
        let (store, m) = build(Scheme::Appearance, t as u64, 2);
        let mut rng = Rng::seed(1200 + t as u64);
        let clips = random_tensor(&mut rng, &[2, CLIP, RES, RES, 3], 1.0);
        let both = app_vector(&store, &m, &clips);
        let n = CLIP * RES * RES * 3;
        for i in 0..2 {
            let one = Tensor::new(vec![1, CLIP, RES, RES, 3], clips.data()[i * n..(i + 1) * n].to_vec()).unwrap();
            let single = app_vector(&store, &m, &one);
            let d = single.row(0).iter().zip(both.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d <= 1e-10, "trial {t}: {d}");
        }
    }
}

#[test]
fn appearance_encoder_rejects_mismatched_clips() {
    let (store, m) = build(Scheme::Appearance, 4, 2);
    let r = eval(&store, |g, reg| {
        let input = AppearanceInput { clips: Some(Tensor::zeros(&[1, CLIP, RES + 1, RES, 3])), ..AppearanceInput::default() };
        m.appearance_vector(g, &input, reg).map(|_| ())
    });
    assert!(r.is_err());
}

#[test]
fn precomputed_vectors_feed_the_classifier_directly() {
    let (store, m) = build(Scheme::Appearance, 5, 2);
    let mut rng = Rng::seed(5);
    let v = random_tensor(&mut rng, &[2, APP], 1.0);
    let c = Case {
        videos: vec![],
        batch: LayoutBatch::new(&[&random_video(&mut rng, "a", FRAMES, SLOTS, VOCAB, CLASSES)], SLOTS).unwrap(),
        input: AppearanceInput { vectors: Some(v.clone()), ..AppearanceInput::default() },
    };
    let got = fused(&store, &m, &c);
    let want = ref_linear(&rows_of(&v), &store, &m.appearance.as_ref().unwrap().classifier);
    assert!(max_diff(&got, &from_rows(&want)) <= 1e-12);
}
