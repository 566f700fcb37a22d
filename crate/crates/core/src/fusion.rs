//! Appearance branch and layout/appearance fusion.
//!
//! The appearance branch is a small convolutional video encoder: three
//! stages of 3×3×3 convolutions (spatial stride 2, temporal stride 2 after the
//! first stage) with 16/32/64 channels. A per-frame variant uses 1×3×3
//! kernels and keeps every frame. Pooled patches of the last stage form a
//! token sequence for the cross-attention schemes.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stlt_engine::nn::{CrossBlock, Encoder, Linear, Regularization};
use stlt_engine::{AttentionMask, Container, Conv3dSpec, Graph, ParamId, ParamStore, Rng, RowMap, Tensor, Var};

use crate::error::{config_err, data_err, Result};
use crate::layout::{BoundingBox, PADDING_CATEGORY};
use crate::model::{LayoutBatch, StltConfig, StltWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Layout branch only.
    None,
    /// Appearance branch only.
    Appearance,
    /// Per-frame appearance vectors summed with frame embeddings.
    Pff,
    /// Per-object RoI features summed into object embeddings.
    Pbf,
    /// Video vector as a leading temporal token.
    Ef,
    /// Central-frame RoI queries decoding the appearance trunk.
    Vatf,
    /// Classifier over concatenated layout and appearance vectors.
    Lcf,
    /// Cross-attention between layout and appearance sequences.
    Caf,
    /// Cross-attention fusion with additional per-branch losses.
    Cacnf,
}

impl Scheme {
    pub fn uses_layout(self) -> bool {
        !matches!(self, Scheme::Appearance | Scheme::Vatf)
    }

    pub fn uses_appearance(self) -> bool {
        self != Scheme::None
    }

    /// Schemes whose appearance input is the sampled layout frames rendered
    /// one by one rather than an appearance clip.
    pub fn per_frame(self) -> bool {
        matches!(self, Scheme::Pff | Scheme::Pbf)
    }

    pub fn uses_tokens(self) -> bool {
        matches!(self, Scheme::Caf | Scheme::Cacnf)
    }

    /// Schemes that only need one appearance vector per video, which may be
    /// supplied precomputed.
    pub fn vector_only(self) -> bool {
        matches!(self, Scheme::Appearance | Scheme::Ef | Scheme::Lcf)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub scheme: Scheme,
    /// Appearance vector width `d_a`.
    pub app_width: usize,
    pub layers: usize,
    pub heads: usize,
    pub token_layers: usize,
    pub lambda_layout: f64,
    pub lambda_app: f64,
}

impl FusionConfig {
    pub fn new(scheme: Scheme) -> Self {
        Self { scheme, app_width: 128, layers: 2, heads: 4, token_layers: 1, lambda_layout: 0.5, lambda_app: 0.5 }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if !(self.lambda_layout >= 0.0 && self.lambda_app >= 0.0) {
            return Err(config_err("branch loss weights must be non-negative"));
        }
        if self.app_width == 0 || self.heads == 0 || width % self.heads != 0 {
            return Err(config_err(format!("fusion heads {} must divide width {width}", self.heads)));
        }
        Ok(())
    }
}

pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceConfig {
    pub resolution: usize,
    pub frames: usize,
    pub per_frame: bool,
}

#[derive(Clone, Debug)]
pub struct ConvStage {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv3dSpec,
}

/// Convolutional stages of the toy video encoder.
#[derive(Clone, Debug)]
pub struct AppearanceEncoder {
    pub config: AppearanceConfig,
    pub stages: Vec<ConvStage>,
}

/// Final feature map of a batch, flattened channels-last to
/// `[videos·t·h·w × 64]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub map: Var,
    pub videos: usize,
    pub extent: [usize; 3],
}

impl FeatureMap {
    pub fn cells(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn row(&self, v: usize, t: usize, y: usize, x: usize) -> usize {
        let [te, h, w] = self.extent;
        ((v * te + t) * h + y) * w + x
    }
}

impl AppearanceEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: AppearanceConfig, rng: &mut Rng) -> Result<Self> {
        if (!config.per_frame && config.frames < 4) || config.frames == 0 || config.resolution < 8 {
            return Err(config_err("appearance clips need at least 4 frames and resolution ≥ 8"));
        }
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &cout) in STAGE_CHANNELS.iter().enumerate() {
            let spec = if config.per_frame {
                Conv3dSpec { kernel: [1, 3, 3], stride: [1, 2, 2], padding: [0, 1, 1] }
            } else {
                let st = if i == 0 { 1 } else { 2 };
                Conv3dSpec { kernel: [3, 3, 3], stride: [st, 2, 2], padding: [1, 1, 1] }
            };
            let taps = spec.kernel.iter().product::<usize>();
            let weight = store.add_glorot(format!("{prefix}.conv{i}.w"), taps * cin, cout, rng)?;
            let bias = store.add(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[cout]))?;
            stages.push(ConvStage { weight, bias, spec });
            cin = cout;
        }
        Ok(Self { config, stages })
    }

    pub fn output_extent(&self) -> Result<[usize; 3]> {
        let mut e = [self.config.frames, self.config.resolution, self.config.resolution];
        for s in &self.stages {
            e = s.spec.output_extent(e)?;
        }
        Ok(e)
    }

    /// `clips` is `[videos, frames, res, res, 3]`.
    pub fn forward(&self, g: &mut Graph, clips: Var) -> Result<FeatureMap> {
        let shape = g.value(clips).shape().to_vec();
        let c = &self.config;
        if shape.len() != 5 || shape[1] != c.frames || shape[2] != c.resolution || shape[3] != c.resolution || shape[4] != 3 {
            return Err(data_err(format!(
                "appearance input {shape:?} does not match [_, {}, {}, {}, 3]",
                c.frames, c.resolution, c.resolution
            )));
        }
        let mut x = clips;
        for s in &self.stages {
            let (w, b) = (g.param(s.weight), g.param(s.bias));
            x = g.conv3d(x, w, b, s.spec)?;
            x = g.relu(x);
        }
        let extent = self.output_extent()?;
        let videos = shape[0];
        let rows = videos * extent.iter().product::<usize>();
        let map = g.reshape(x, vec![rows, STAGE_CHANNELS[2]])?;
        Ok(FeatureMap { map, videos, extent })
    }
}

fn hat_cdf(t: f64) -> f64 {
    if t <= -1.0 {
        0.0
    } else if t <= 0.0 {
        (1.0 + t) * (1.0 + t) / 2.0
    } else if t <= 1.0 {
        1.0 - (1.0 - t) * (1.0 - t) / 2.0
    } else {
        1.0
    }
}

/// `∫_a^b φ_j(u) du` for the clamped linear-interpolation basis on `n`
/// cells with centers at `j + 0.5`.
fn basis_integral(j: usize, n: usize, a: f64, b: f64) -> f64 {
    if n == 1 {
        return b - a;
    }
    let c = j as f64 + 0.5;
    let hat = |lo: f64, hi: f64| if hi > lo { hat_cdf(hi - c) - hat_cdf(lo - c) } else { 0.0 };
    if j == 0 {
        (b.min(c) - a).max(0.0) + hat(a.max(c), b)
    } else if j == n - 1 {
        (b - a.max(c)).max(0.0) + hat(a, b.min(c))
    } else {
        hat(a, b)
    }
}

fn axis_weights(lo: f64, hi: f64, n: usize) -> Vec<(usize, f64)> {
    let (a, b) = (lo * n as f64, hi * n as f64);
    (0..n)
        .map(|j| (j, basis_integral(j, n, a, b) / (b - a)))
        .filter(|&(_, w)| w != 0.0)
        .collect()
}

/// Cell weights (`y·w + x`) whose combination is the exact average of the
/// bilinear interpolant of an `h × w` map over `bbox`. Cell centers sit at
/// half-integer positions; outside the outermost centers the interpolant is
/// constant.
pub fn roi_weights(bbox: &BoundingBox, h: usize, w: usize) -> Result<Vec<(usize, f64)>> {
    if !bbox.is_valid() || bbox.width() <= 0.0 || bbox.height() <= 0.0 {
        return Err(data_err(format!("RoI box {:?} has zero area", bbox.coords())));
    }
    let wy = axis_weights(bbox.y1, bbox.y2, h);
    let wx = axis_weights(bbox.x1, bbox.x2, w);
    Ok(wy.iter().flat_map(|&(y, a)| wx.iter().map(move |&(x, b)| (y * w + x, a * b))).collect())
}

/// RoI-aligned `1×1` pooling of a `[C, H, W]` map.
pub fn roi_align(map: &Tensor, bbox: &BoundingBox) -> Result<Vec<f64>> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(data_err(format!("feature map must be [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let weights = roi_weights(bbox, h, w)?;
    Ok((0..c)
        .map(|ch| weights.iter().map(|&(cell, wt)| wt * map.data()[ch * h * w + cell]).sum())
        .collect())
}

/// Grows a box to at least one feature cell in each direction, keeping it
/// inside the frame.
pub fn grow_to_cell(b: &BoundingBox, h: usize, w: usize) -> BoundingBox {
    let grow = |lo: f64, hi: f64, n: usize| {
        let min = 1.0 / n as f64;
        if hi - lo >= min {
            return (lo, hi);
        }
        let c = ((lo + hi) / 2.0).clamp(min / 2.0, 1.0 - min / 2.0);
        (c - min / 2.0, c + min / 2.0)
    };
    let (x1, x2) = grow(b.x1, b.x2, w);
    let (y1, y2) = grow(b.y1, b.y2, h);
    BoundingBox { x1, y1, x2, y2 }
}

/// Appearance inputs for one batch.
#[derive(Clone, Debug, Default)]
pub struct AppearanceInput {
    /// `[videos, T', res, res, 3]` clips.
    pub clips: Option<Tensor>,
    /// `[videos, n, res, res, 3]` renderings of the sampled layout frames.
    pub layout_frames: Option<Tensor>,
    /// Boxes of the central clip frame of each video.
    pub central_boxes: Vec<Vec<BoundingBox>>,
    /// Precomputed `[videos × d_a]` appearance vectors.
    pub vectors: Option<Tensor>,
}

/// Logits of a fused model and, where the scheme has them, of its branches.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub fused: Var,
    pub layout: Option<Var>,
    pub appearance: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct AppearanceBranch {
    pub encoder: AppearanceEncoder,
    pub head: Linear,
    pub classifier: Linear,
}

#[derive(Clone, Debug)]
pub struct TokenStack {
    pub proj: Linear,
    pub positions: ParamId,
    pub class_token: ParamId,
    pub encoder: Encoder,
}

#[derive(Clone, Debug)]
pub enum FusionHead {
    None,
    Pff { proj: Linear },
    Pbf { proj: Linear },
    Ef { proj: Linear },
    Vatf { query: Linear, memory: Linear, blocks: Vec<CrossBlock>, classifier: Linear },
    Lcf { layout: Linear, appearance: Linear, bias: ParamId },
    Caf { tokens: TokenStack, to_app: Vec<CrossBlock>, to_layout: Vec<CrossBlock>, classifier: Linear },
}

/// A layout model, an appearance model, or a fusion of both.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub fusion: FusionConfig,
    pub layout: Option<StltWeights>,
    pub appearance: Option<AppearanceBranch>,
    pub head: FusionHead,
}

/// Number of appearance tokens per temporal slice: a 2×2 grid of pooled
/// patches, or fewer when the final map is smaller.
fn token_grid(extent: [usize; 3]) -> (usize, usize) {
    (extent[1].min(2), extent[2].min(2))
}

impl FusionModel {
    /// Builds every parameter the scheme uses. Parameters the scheme never
    /// reads are frozen so that the optimizer does not expect gradients.
    pub fn new(
        store: &mut ParamStore,
        layout: StltConfig,
        appearance: AppearanceConfig,
        fusion: FusionConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let scheme = fusion.scheme;
        fusion.validate(layout.width)?;
        let d = layout.width;
        let classes = layout.classes;
        let stlt = if scheme.uses_layout() {
            Some(StltWeights::new(store, "stlt", layout.clone(), &mut rng.fork_named("stlt"))?)
        } else {
            None
        };
        let mut arng = rng.fork_named("app");
        let app = if scheme.uses_appearance() {
            let cfg = AppearanceConfig { per_frame: scheme.per_frame(), ..appearance };
            Some(AppearanceBranch {
                encoder: AppearanceEncoder::new(store, "app", cfg, &mut arng)?,
                head: Linear::new(store, "app.head", STAGE_CHANNELS[2], fusion.app_width, &mut arng)?,
                classifier: Linear::new(store, "app.classifier", fusion.app_width, classes, &mut arng)?,
            })
        } else {
            None
        };
        let mut frng = rng.fork_named("fuse");
        let c = STAGE_CHANNELS[2];
        let head = match scheme {
            Scheme::None | Scheme::Appearance => FusionHead::None,
            Scheme::Pff => FusionHead::Pff { proj: Linear::new(store, "fuse.proj", c, d, &mut frng)? },
            Scheme::Pbf => FusionHead::Pbf { proj: Linear::new(store, "fuse.proj", c, d, &mut frng)? },
            Scheme::Ef => FusionHead::Ef { proj: Linear::new(store, "fuse.proj", fusion.app_width, d, &mut frng)? },
            Scheme::Vatf => FusionHead::Vatf {
                query: Linear::new(store, "fuse.query", c, d, &mut frng)?,
                memory: Linear::new(store, "fuse.memory", c, d, &mut frng)?,
                blocks: (0..fusion.layers)
                    .map(|i| CrossBlock::new(store, &format!("fuse.decoder{i}"), d, fusion.heads, layout.ff_mult, &mut frng))
                    .collect::<std::result::Result<_, _>>()?,
                classifier: Linear::new(store, "fuse.classifier", d, classes, &mut frng)?,
            },
            Scheme::Lcf => FusionHead::Lcf {
                layout: Linear::no_bias(store, "fuse.layout", d, classes, &mut frng)?,
                appearance: Linear::no_bias(store, "fuse.appearance", fusion.app_width, classes, &mut frng)?,
                bias: store.add("fuse.bias", Tensor::zeros(&[classes]))?,
            },
            Scheme::Caf | Scheme::Cacnf => {
                let app_cfg = &app.as_ref().expect("appearance branch").encoder;
                let extent = app_cfg.output_extent()?;
                let (gh, gw) = token_grid(extent);
                let max_tokens = extent[0] * gh * gw;
                FusionHead::Caf {
                    tokens: TokenStack {
                        proj: Linear::new(store, "fuse.tokens.proj", c, d, &mut frng)?,
                        positions: store.add_normal("fuse.tokens.position", &[max_tokens + 1, d], 0.5, &mut frng)?,
                        class_token: store.add_normal("fuse.tokens.class", &[1, d], 0.5, &mut frng)?,
                        encoder: Encoder::new(store, "fuse.tokens.encoder", fusion.token_layers, d, fusion.heads, layout.ff_mult, &mut frng)?,
                    },
                    to_app: (0..fusion.layers)
                        .map(|i| CrossBlock::new(store, &format!("fuse.layout_to_app{i}"), d, fusion.heads, layout.ff_mult, &mut frng))
                        .collect::<std::result::Result<_, _>>()?,
                    to_layout: (0..fusion.layers)
                        .map(|i| CrossBlock::new(store, &format!("fuse.app_to_layout{i}"), d, fusion.heads, layout.ff_mult, &mut frng))
                        .collect::<std::result::Result<_, _>>()?,
                    classifier: Linear::new(store, "fuse.classifier", 2 * d, classes, &mut frng)?,
                }
            }
        };
        let model = Self { fusion, layout: stlt, appearance: app, head };
        for prefix in model.unused_prefixes() {
            store.set_requires_grad_prefix(prefix, false);
        }
        Ok(model)
    }

    pub fn scheme(&self) -> Scheme {
        self.fusion.scheme
    }

    fn unused_prefixes(&self) -> Vec<&'static str> {
        match self.scheme() {
            Scheme::None | Scheme::Cacnf => vec![],
            Scheme::Appearance => vec![],
            Scheme::Pff | Scheme::Pbf => vec!["app.head.", "app.classifier."],
            Scheme::Ef => vec!["app.classifier."],
            Scheme::Vatf => vec!["app.head.", "app.classifier."],
            Scheme::Lcf => vec!["stlt.classifier.", "app.classifier."],
            Scheme::Caf => vec!["stlt.classifier.", "app.head.", "app.classifier."],
        }
    }

    /// Name prefixes of the final classifiers: the parameters fine-tuning
    /// may update.
    pub fn classifier_prefixes(&self) -> Vec<&'static str> {
        match self.scheme() {
            Scheme::None | Scheme::Pff | Scheme::Pbf | Scheme::Ef => vec!["stlt.classifier."],
            Scheme::Appearance => vec!["app.classifier."],
            Scheme::Vatf | Scheme::Caf => vec!["fuse.classifier."],
            Scheme::Lcf => vec!["fuse.layout.", "fuse.appearance.", "fuse.bias"],
            Scheme::Cacnf => vec!["fuse.classifier.", "stlt.classifier.", "app.classifier."],
        }
    }

    /// Parameters the scheme never reads.
    pub fn is_unused(&self, name: &str) -> bool {
        self.unused_prefixes().iter().any(|p| name.starts_with(p))
    }

    fn stlt(&self) -> Result<&StltWeights> {
        self.layout.as_ref().ok_or_else(|| config_err("scheme has no layout branch"))
    }

    fn app(&self) -> Result<&AppearanceBranch> {
        self.appearance.as_ref().ok_or_else(|| config_err("scheme has no appearance branch"))
    }

    /// Appearance vectors `[videos × d_a]`, from precomputed input or the
    /// encoder applied to clips.
    pub fn appearance_vector(&self, g: &mut Graph, input: &AppearanceInput, reg: &mut Regularization) -> Result<Var> {
        let app = self.app()?;
        if let Some(v) = &input.vectors {
            if v.cols() != self.fusion.app_width {
                return Err(data_err(format!("precomputed vectors have width {}, expected {}", v.cols(), self.fusion.app_width)));
            }
            return Ok(g.constant(v.clone()));
        }
        let map = self.clip_features(g, input)?;
        let pooled = g.mean_row_groups(map.map, map.cells())?;
        let v = app.head.forward(g, pooled)?;
        let v = g.gelu(v);
        Ok(reg.apply(g, v)?)
    }

    fn clip_features(&self, g: &mut Graph, input: &AppearanceInput) -> Result<FeatureMap> {
        let clips = input.clips.as_ref().ok_or_else(|| data_err("scheme needs appearance clips"))?;
        let x = g.constant(clips.clone());
        self.app()?.encoder.forward(g, x)
    }

    fn frame_features(&self, g: &mut Graph, input: &AppearanceInput) -> Result<FeatureMap> {
        let frames = input.layout_frames.as_ref().ok_or_else(|| data_err("scheme needs rendered layout frames"))?;
        let x = g.constant(frames.clone());
        self.app()?.encoder.forward(g, x)
    }

    /// Projected appearance tokens `[videos·(1+K) × d]` with a leading class
    /// token per video, after the token encoder.
    fn tokens(&self, g: &mut Graph, ts: &TokenStack, map: &FeatureMap, reg: &mut Regularization) -> Result<(Var, usize)> {
        let [te, h, w] = map.extent;
        let (gh, gw) = token_grid(map.extent);
        let per_video = te * gh * gw;
        let mut pool: RowMap = Vec::with_capacity(map.videos * per_video);
        for v in 0..map.videos {
            for t in 0..te {
                for by in 0..gh {
                    for bx in 0..gw {
                        let (y0, y1) = (by * h / gh, (by + 1) * h / gh);
                        let (x0, x1) = (bx * w / gw, (bx + 1) * w / gw);
                        let wt = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                        pool.push(
                            (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x))).map(|(y, x)| (map.row(v, t, y, x), wt)).collect(),
                        );
                    }
                }
            }
        }
        let patches = g.combine_rows(map.map, pool)?;
        let proj = ts.proj.forward(g, patches)?;
        let class = g.param(ts.class_token);
        let all = g.concat_rows(&[proj, class])?;
        let len = per_video + 1;
        let class_row = map.videos * per_video;
        let order: Vec<usize> = (0..map.videos)
            .flat_map(|v| std::iter::once(class_row).chain((0..per_video).map(move |k| v * per_video + k)))
            .collect();
        let seq = g.gather_rows(all, &order)?;
        let table = g.param(ts.positions);
        let pos_rows: Vec<usize> = (0..map.videos).flat_map(|_| 0..len).collect();
        let pos = g.gather_rows(table, &pos_rows)?;
        let seq = g.add(seq, pos)?;
        let seq = reg.apply(g, seq)?;
        let out = ts.encoder.forward(g, seq, map.videos, &AttentionMask::Bidirectional, reg)?;
        Ok((out, len))
    }

    /// RoI rows of per-frame maps for every slot of a layout batch: the full
    /// frame for class tokens, nothing (a zero row) for padding.
    fn slot_rois(batch: &LayoutBatch, map: &FeatureMap) -> Result<RowMap> {
        let [_, h, w] = map.extent;
        let mut rows = Vec::with_capacity(batch.rows());
        for v in 0..batch.videos {
            for f in 0..batch.frames {
                for s in 0..batch.tokens_per_frame() {
                    let r = batch.class_row(v, f) + s;
                    if !batch.valid[r] || batch.categories[r] == PADDING_CATEGORY {
                        rows.push(Vec::new());
                        continue;
                    }
                    let b = &batch.boxes[r * 4..r * 4 + 4];
                    let bbox = grow_to_cell(&BoundingBox { x1: b[0], y1: b[1], x2: b[2], y2: b[3] }, h, w);
                    let weights = roi_weights(&bbox, h, w)?;
                    rows.push(weights.into_iter().map(|(cell, wt)| (map.row(v, f, 0, 0) + cell, wt)).collect());
                }
            }
        }
        Ok(rows)
    }

    pub fn forward(&self, g: &mut Graph, batch: &LayoutBatch, input: &AppearanceInput, reg: &mut Regularization) -> Result<Outputs> {
        let videos = batch.videos;
        let only = |fused| Outputs { fused, layout: None, appearance: None };
        match &self.head {
            FusionHead::None if self.scheme() == Scheme::Appearance => {
                let app = self.app()?;
                let v = self.appearance_vector(g, input, reg)?;
                Ok(only(app.classifier.forward(g, v)?))
            }
            FusionHead::None => Ok(only(self.stlt()?.forward(g, batch, reg)?)),
            FusionHead::Pff { proj } => {
                let stlt = self.stlt()?;
                let map = self.frame_features(g, input)?;
                if map.videos != videos || map.extent[0] != batch.frames {
                    return Err(data_err("rendered frames do not match the layout batch"));
                }
                let o = stlt.embed_objects(g, batch, None, reg)?;
                let s = stlt.spatial_forward(g, batch, o, reg)?;
                let per_frame = g.mean_row_groups(map.map, map.extent[1] * map.extent[2])?;
                let a = proj.forward(g, per_frame)?;
                let s = g.add(s, a)?;
                let t = stlt.temporal_forward(g, s, videos, None, reg)?;
                Ok(only(stlt.classify(g, t.class)?))
            }
            FusionHead::Pbf { proj } => {
                let stlt = self.stlt()?;
                let map = self.frame_features(g, input)?;
                if map.videos != videos || map.extent[0] != batch.frames {
                    return Err(data_err("rendered frames do not match the layout batch"));
                }
                let rois = g.combine_rows(map.map, Self::slot_rois(batch, &map)?)?;
                let extra = proj.forward(g, rois)?;
                let o = stlt.embed_objects(g, batch, Some(extra), reg)?;
                let s = stlt.spatial_forward(g, batch, o, reg)?;
                let t = stlt.temporal_forward(g, s, videos, None, reg)?;
                Ok(only(stlt.classify(g, t.class)?))
            }
            FusionHead::Ef { proj } => {
                let stlt = self.stlt()?;
                let v = self.appearance_vector(g, input, reg)?;
                let lead = proj.forward(g, v)?;
                let o = stlt.embed_objects(g, batch, None, reg)?;
                let s = stlt.spatial_forward(g, batch, o, reg)?;
                let t = stlt.temporal_forward(g, s, videos, Some(lead), reg)?;
                Ok(only(stlt.classify(g, t.class)?))
            }
            FusionHead::Vatf { .. } => {
                let map = self.clip_features(g, input)?;
                self.vatf_logits(g, &map, &input.central_boxes, reg).map(only)
            }
            FusionHead::Lcf { layout, appearance, bias } => {
                let stlt = self.stlt()?;
                let h = stlt.class_vector(g, batch, reg)?;
                let v = self.appearance_vector(g, input, reg)?;
                let a = layout.forward(g, h)?;
                let b = appearance.forward(g, v)?;
                let s = g.add(a, b)?;
                let bias = g.param(*bias);
                Ok(only(g.add_row(s, bias)?))
            }
            FusionHead::Caf { tokens, to_app, to_layout, classifier } => {
                let stlt = self.stlt()?;
                let app = self.app()?;
                let t = stlt.encode(g, batch, reg)?;
                let map = self.clip_features(g, input)?;
                let (app_seq, app_len) = self.tokens(g, tokens, &map, reg)?;
                let fused = caf_stack(g, t.hidden, app_seq, videos, to_app, to_layout, None, reg)?;
                let l_rows: Vec<usize> = (0..videos).map(|v| v * t.len + t.len - 1).collect();
                let a_rows: Vec<usize> = (0..videos).map(|v| v * app_len).collect();
                let lc = g.gather_rows(fused.0, &l_rows)?;
                let ac = g.gather_rows(fused.1, &a_rows)?;
                let joint = g.concat_cols(&[lc, ac])?;
                let logits = classifier.forward(g, joint)?;
                if self.scheme() == Scheme::Cacnf {
                    let layout_logits = stlt.classify(g, t.class)?;
                    let pooled = g.mean_row_groups(map.map, map.cells())?;
                    let v = app.head.forward(g, pooled)?;
                    let v = g.gelu(v);
                    let v = reg.apply(g, v)?;
                    let app_logits = app.classifier.forward(g, v)?;
                    Ok(Outputs { fused: logits, layout: Some(layout_logits), appearance: Some(app_logits) })
                } else {
                    Ok(only(logits))
                }
            }
        }
    }

    /// Decoder of the VATF scheme over a trunk feature map: one query per
    /// box of the central frame (a full-frame query when there are none),
    /// per-query logits averaged per video.
    pub fn vatf_logits(&self, g: &mut Graph, map: &FeatureMap, boxes: &[Vec<BoundingBox>], reg: &mut Regularization) -> Result<Var> {
        let FusionHead::Vatf { query, memory, blocks, classifier } = &self.head else {
            return Err(config_err("not a VATF model"));
        };
        let [te, h, w] = map.extent;
        if boxes.len() != map.videos {
            return Err(data_err(format!("{} central box lists for {} videos", boxes.len(), map.videos)));
        }
        let central = te / 2;
        let queries: Vec<Vec<BoundingBox>> =
            boxes.iter().map(|b| if b.is_empty() { vec![BoundingBox::FULL] } else { b.clone() }).collect();
        let q_len = queries.iter().map(Vec::len).max().unwrap_or(1);
        let mut rois: RowMap = Vec::with_capacity(map.videos * q_len);
        for (v, qs) in queries.iter().enumerate() {
            for k in 0..q_len {
                // Short query lists are padded by repeating their last box;
                // padded queries are excluded from the average below.
                let b = grow_to_cell(&qs[k.min(qs.len() - 1)], h, w);
                let weights = roi_weights(&b, h, w)?;
                rois.push(weights.into_iter().map(|(cell, wt)| (map.row(v, central, 0, 0) + cell, wt)).collect());
            }
        }
        let r = g.combine_rows(map.map, rois)?;
        let mut q = query.forward(g, r)?;
        let m = memory.forward(g, map.map)?;
        for block in blocks {
            q = block.forward(g, q, m, map.videos, &AttentionMask::Bidirectional, reg)?;
        }
        let per_query = classifier.forward(g, q)?;
        let avg: RowMap = queries
            .iter()
            .enumerate()
            .map(|(v, qs)| (0..qs.len()).map(|k| (v * q_len + k, 1.0 / qs.len() as f64)).collect())
            .collect();
        Ok(g.combine_rows(per_query, avg)?)
    }
}

/// Stacked bidirectional cross-attention: in each layer layout tokens attend
/// over appearance tokens and appearance tokens attend over layout tokens,
/// both reading the previous layer's states. `app_valid` masks appearance
/// tokens as keys of the layout-side queries.
#[allow(clippy::too_many_arguments)]
pub fn caf_stack(
    g: &mut Graph,
    layout: Var,
    app: Var,
    groups: usize,
    to_app: &[CrossBlock],
    to_layout: &[CrossBlock],
    app_valid: Option<&[bool]>,
    reg: &mut Regularization,
) -> Result<(Var, Var)> {
    let (mut l, mut a) = (layout, app);
    let l_mask = app_valid.map_or(AttentionMask::Bidirectional, |v| AttentionMask::Padding(v.to_vec()));
    for (la, al) in to_app.iter().zip(to_layout) {
        let nl = la.forward(g, l, a, groups, &l_mask, reg)?;
        let na = al.forward(g, a, l, groups, &AttentionMask::Bidirectional, reg)?;
        l = nl;
        a = na;
    }
    Ok((l, a))
}

/// Training targets for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Single(Vec<usize>),
    /// Row-major multi-hot `[videos × classes]`.
    Multi(Vec<f64>),
}

pub fn branch_loss(g: &mut Graph, logits: Var, targets: &Targets) -> Result<Var> {
    Ok(match targets {
        Targets::Single(t) => g.cross_entropy(logits, t)?,
        Targets::Multi(t) => g.binary_cross_entropy(logits, t)?,
    })
}

/// `L(fused) + λ_layout·L(layout) + λ_app·L(appearance)`.
pub fn cacnf_loss(
    g: &mut Graph,
    fused: Var,
    layout: Var,
    appearance: Var,
    targets: &Targets,
    lambda_layout: f64,
    lambda_app: f64,
) -> Result<Var> {
    if !(lambda_layout >= 0.0 && lambda_app >= 0.0) {
        return Err(config_err("branch loss weights must be non-negative"));
    }
    let f = branch_loss(g, fused, targets)?;
    let l = branch_loss(g, layout, targets)?;
    let a = branch_loss(g, appearance, targets)?;
    let l = g.scale(l, lambda_layout);
    let a = g.scale(a, lambda_app);
    let s = g.add(f, l)?;
    Ok(g.add(s, a)?)
}

/// Training loss of a model's outputs.
pub fn model_loss(g: &mut Graph, model: &FusionModel, out: &Outputs, targets: &Targets) -> Result<Var> {
    match (model.scheme(), out.layout, out.appearance) {
        (Scheme::Cacnf, Some(l), Some(a)) => {
            cacnf_loss(g, out.fused, l, a, targets, model.fusion.lambda_layout, model.fusion.lambda_app)
        }
        _ => branch_loss(g, out.fused, targets),
    }
}

/// Precomputed appearance vectors keyed by video id, stored as a tensor
/// container with one `[d_a]` entry per video.
pub fn load_appearance_vectors(path: impl AsRef<Path>) -> Result<HashMap<String, Vec<f64>>> {
    let c = Container::load(path)?;
    Ok(c.entries.into_iter().map(|(id, t)| (id, t.into_data())).collect())
}

pub fn save_appearance_vectors(vectors: &[(String, Vec<f64>)], path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new("{\"kind\":\"appearance-vectors\"}");
    for (id, v) in vectors {
        c.push(id.clone(), Tensor::vector(v.clone()));
    }
    Ok(c.save(path)?)
}
