//! Small fusion models and inputs shared by the fusion tests.

use super::*;
use stlt_core::fusion::{AppearanceConfig, AppearanceInput, FeatureMap, FusionConfig, FusionHead, FusionModel, Scheme, STAGE_CHANNELS};
use stlt_core::layout::VideoLayout;
use stlt_core::model::{Architecture, LayoutBatch, StltConfig};
use stlt_engine::nn::{Linear, Regularization};
use stlt_engine::{Graph, ParamStore, Rng, Tensor};

pub const VOCAB: usize = 5;
pub const CLASSES: usize = 3;
pub const FRAMES: usize = 4;
pub const SLOTS: usize = 3;
pub const WIDTH: usize = 8;
pub const APP: usize = 6;
pub const RES: usize = 8;
pub const CLIP: usize = 4;
pub const C: usize = STAGE_CHANNELS[2];

pub fn build(scheme: Scheme, seed: u64, heads: usize) -> (ParamStore, FusionModel) {
    let mut store = ParamStore::new();
    let stlt = StltConfig {
        width: WIDTH,
        spatial_layers: 1,
        spatial_heads: 2,
        temporal_layers: 1,
        temporal_heads: 2,
        dropout: 0.1,
        max_objects: SLOTS,
        frames: FRAMES,
        vocabulary: VOCAB,
        classes: CLASSES,
        ff_mult: 2,
        architecture: Architecture::Factorized,
    };
    let frames = if scheme.per_frame() { FRAMES } else { CLIP };
    let app = AppearanceConfig { resolution: RES, frames, per_frame: scheme.per_frame() };
    let fusion = FusionConfig { scheme, app_width: APP, layers: 1, heads, token_layers: 1, lambda_layout: 0.5, lambda_app: 0.5 };
    let mut rng = Rng::seed(seed);
    let model = FusionModel::new(&mut store, stlt, app, fusion, &mut rng).unwrap();
    randomize(&mut store, &mut rng.fork(7), 0.5);
    (store, model)
}

pub struct Case {
    pub videos: Vec<VideoLayout>,
    pub batch: LayoutBatch,
    pub input: AppearanceInput,
}

pub fn case(rng: &mut Rng, videos: usize) -> Case {
    let vs: Vec<VideoLayout> = (0..videos).map(|i| random_video(rng, &format!("v{i}"), FRAMES, SLOTS, VOCAB, CLASSES)).collect();
    let refs: Vec<&VideoLayout> = vs.iter().collect();
    let batch = LayoutBatch::new(&refs, SLOTS).unwrap();
    let input = AppearanceInput {
        clips: Some(random_tensor(rng, &[videos, CLIP, RES, RES, 3], 1.0)),
        layout_frames: Some(random_tensor(rng, &[videos, FRAMES, RES, RES, 3], 1.0)),
        central_boxes: vs.iter().map(|v| v.frames[1].objects.iter().map(|o| o.bbox).collect()).collect(),
        vectors: None,
    };
    Case { videos: vs, batch, input }
}

pub fn eval<T>(store: &ParamStore, f: impl FnOnce(&mut Graph, &mut Regularization) -> T) -> T {
    let mut g = Graph::new(store);
    let mut r = Rng::seed(0);
    let mut reg = Regularization { rate: 0.1, training: false, rng: &mut r };
    f(&mut g, &mut reg)
}

pub fn fused(store: &ParamStore, m: &FusionModel, c: &Case) -> Tensor {
    eval(store, |g, reg| {
        let out = m.forward(g, &c.batch, &c.input, reg).unwrap();
        g.value(out.fused).clone()
    })
}

pub fn plain_stlt(store: &ParamStore, m: &FusionModel, c: &Case) -> Tensor {
    eval(store, |g, reg| {
        let y = m.layout.as_ref().unwrap().forward(g, &c.batch, reg).unwrap();
        g.value(y).clone()
    })
}

pub fn per_frame_map(g: &mut Graph, m: &FusionModel, c: &Case) -> FeatureMap {
    let x = g.constant(c.input.layout_frames.clone().unwrap());
    m.appearance.as_ref().unwrap().encoder.forward(g, x).unwrap()
}

pub fn head_proj(m: &FusionModel) -> &Linear {
    match &m.head {
        FusionHead::Pff { proj } | FusionHead::Pbf { proj } | FusionHead::Ef { proj } => proj,
        _ => panic!("no projection"),
    }
}
