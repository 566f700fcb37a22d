//! The layout branch: object embedding, spatial transformer over the objects
//! of each frame, causal temporal transformer over frames, and classifier.
//! Also the joint variant that runs one transformer over all objects of all
//! frames.

use serde::{Deserialize, Serialize};
use stlt_engine::nn::{Encoder, LayerNorm, Linear, Regularization};
use stlt_engine::{AttentionMask, Graph, ParamId, ParamStore, Rng, Tensor, Var};

use crate::error::{config_err, data_err, Result};
use crate::layout::{pad_objects, BoundingBox, VideoLayout, CLASS_CATEGORY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Spatial transformer per frame, then a causal temporal transformer.
    Factorized,
    /// One bidirectional transformer over the unrolled objects of all frames.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StltConfig {
    pub width: usize,
    pub spatial_layers: usize,
    pub spatial_heads: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    pub dropout: f64,
    /// Object slots per frame, not counting the class token.
    pub max_objects: usize,
    pub frames: usize,
    pub vocabulary: usize,
    pub classes: usize,
    pub ff_mult: usize,
    pub architecture: Architecture,
}

impl StltConfig {
    pub fn new(vocabulary: usize, classes: usize) -> Self {
        Self {
            width: 128,
            spatial_layers: 2,
            spatial_heads: 4,
            temporal_layers: 2,
            temporal_heads: 4,
            dropout: 0.1,
            max_objects: 6,
            frames: 16,
            vocabulary,
            classes,
            ff_mult: 4,
            architecture: Architecture::Factorized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % self.spatial_heads != 0 || self.width % self.temporal_heads != 0 {
            return Err(config_err(format!(
                "width {} must be divisible by the head counts {} and {}",
                self.width, self.spatial_heads, self.temporal_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if self.frames == 0 || self.classes == 0 || self.vocabulary < 3 || self.max_objects == 0 || self.ff_mult == 0 {
            return Err(config_err("frames, classes, max_objects and ff_mult must be positive; vocabulary needs a stored category"));
        }
        Ok(())
    }
}

/// Padded, batched layouts. Every frame contributes `slots + 1` rows: the
/// class token first, then `slots` object slots.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutBatch {
    pub ids: Vec<String>,
    pub videos: usize,
    pub frames: usize,
    pub slots: usize,
    pub categories: Vec<usize>,
    /// `[rows × 4]` box coordinates.
    pub boxes: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LayoutBatch {
    /// Pads each frame to the largest object count in the batch (at most
    /// `max_objects`). Masked slots never influence outputs, so trimming the
    /// padding is exact.
    pub fn new(videos: &[&VideoLayout], max_objects: usize) -> Result<Self> {
        Self::with_slots(videos, max_objects, None)
    }

    /// As [`LayoutBatch::new`] with an explicit slot count.
    pub fn with_slots(videos: &[&VideoLayout], max_objects: usize, slots: Option<usize>) -> Result<Self> {
        let frames = videos.first().map(|v| v.frames.len()).ok_or_else(|| data_err("empty batch"))?;
        if videos.iter().any(|v| v.frames.len() != frames) {
            return Err(data_err("videos in a batch must have the same frame count"));
        }
        let busiest = videos.iter().flat_map(|v| &v.frames).map(|f| f.objects.len()).max().unwrap_or(0);
        let slots = slots.unwrap_or(busiest.min(max_objects)).min(max_objects);
        let rows = videos.len() * frames * (slots + 1);
        let mut b = Self {
            ids: videos.iter().map(|v| v.id.clone()).collect(),
            videos: videos.len(),
            frames,
            slots,
            categories: Vec::with_capacity(rows),
            boxes: Vec::with_capacity(rows * 4),
            valid: Vec::with_capacity(rows),
        };
        for v in videos {
            for f in &v.frames {
                b.categories.push(CLASS_CATEGORY);
                b.boxes.extend(BoundingBox::FULL.coords());
                b.valid.push(true);
                let (objects, mask) = pad_objects(f, slots);
                for (o, m) in objects.iter().zip(mask) {
                    b.categories.push(o.category);
                    b.boxes.extend(o.bbox.coords());
                    b.valid.push(m);
                }
            }
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.categories.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.slots + 1
    }

    /// Row index of the class token of frame `f` of video `v`.
    pub fn class_row(&self, v: usize, f: usize) -> usize {
        (v * self.frames + f) * self.tokens_per_frame()
    }
}

/// Parameters of the layout branch. Every parameter name starts with the
/// prefix given at construction; the classifier is `{prefix}.classifier`.
#[derive(Clone, Debug)]
pub struct StltWeights {
    pub config: StltConfig,
    pub prefix: String,
    pub category: ParamId,
    pub boxes: Linear,
    pub object_norm: LayerNorm,
    pub spatial: Encoder,
    /// Frame-position table with room for a leading extra token.
    pub positions: ParamId,
    pub temporal_norm: Option<LayerNorm>,
    pub temporal: Option<Encoder>,
    pub class_token: Option<ParamId>,
    pub classifier: Linear,
}

/// Final temporal hidden states.
#[derive(Clone, Copy, Debug)]
pub struct TemporalOutput {
    /// `[videos·len × d]`
    pub hidden: Var,
    /// `[videos × d]`
    pub class: Var,
    pub len: usize,
}

impl StltWeights {
    pub fn new(store: &mut ParamStore, prefix: &str, config: StltConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let p = |s: &str| format!("{prefix}.{s}");
        let joint = config.architecture == Architecture::Joint;
        let category = store.add_normal(p("category"), &[config.vocabulary, d], 0.5, rng)?;
        let boxes = Linear::new(store, &p("box"), 4, d, rng)?;
        let object_norm = LayerNorm::new(store, &p("object_ln"), d)?;
        let spatial =
            Encoder::new(store, &p("spatial"), config.spatial_layers, d, config.spatial_heads, config.ff_mult, rng)?;
        let positions = store.add_normal(p("position"), &[config.frames + 2, d], 0.5, rng)?;
        let (temporal_norm, temporal, class_token) = if joint {
            (None, None, None)
        } else {
            (
                Some(LayerNorm::new(store, &p("temporal_ln"), d)?),
                Some(Encoder::new(store, &p("temporal"), config.temporal_layers, d, config.temporal_heads, config.ff_mult, rng)?),
                Some(store.add_normal(p("class"), &[1, d], 0.5, rng)?),
            )
        };
        let classifier = Linear::new(store, &p("classifier"), d, config.classes, rng)?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            category,
            boxes,
            object_norm,
            spatial,
            positions,
            temporal_norm,
            temporal,
            class_token,
            classifier,
        })
    }

    pub fn classifier_prefix(&self) -> String {
        format!("{}.classifier", self.prefix)
    }

    /// `ô = Dropout(LayerNorm(ĉ + l̂ [+ extra]))` for every row of the batch.
    pub fn embed_objects(&self, g: &mut Graph, batch: &LayoutBatch, extra: Option<Var>, reg: &mut Regularization) -> Result<Var> {
        let table = g.param(self.category);
        let c = g.gather_rows(table, &batch.categories)?;
        let boxes = g.constant(Tensor::new(vec![batch.rows(), 4], batch.boxes.clone())?);
        let l = self.boxes.forward(g, boxes)?;
        let mut o = g.add(c, l)?;
        if let Some(e) = extra {
            o = g.add(o, e)?;
        }
        let o = self.object_norm.forward(g, o)?;
        Ok(reg.apply(g, o)?)
    }

    /// Frame embeddings `ŝ`, `[videos·frames × d]`: the class-token output of
    /// the spatial transformer for each frame.
    pub fn spatial_forward(&self, g: &mut Graph, batch: &LayoutBatch, objects: Var, reg: &mut Regularization) -> Result<Var> {
        let groups = batch.videos * batch.frames;
        let h = self.spatial.forward(g, objects, groups, &AttentionMask::Padding(batch.valid.clone()), reg)?;
        let rows: Vec<usize> = (0..groups).map(|i| i * batch.tokens_per_frame()).collect();
        Ok(g.gather_rows(h, &rows)?)
    }

    /// Causal temporal transformer over `[lead?, ŝ_0 … ŝ_{n−1}, class]`.
    /// `lead`, when given, holds one token per video placed first at
    /// position 0; frames then take positions from 1.
    pub fn temporal_forward(
        &self,
        g: &mut Graph,
        frames: Var,
        videos: usize,
        lead: Option<Var>,
        reg: &mut Regularization,
    ) -> Result<TemporalOutput> {
        let (Some(norm), Some(encoder), Some(class_id)) = (&self.temporal_norm, &self.temporal, self.class_token) else {
            return Err(config_err("the joint architecture has no temporal transformer"));
        };
        let total = g.value(frames).rows();
        if videos == 0 || total % videos != 0 {
            return Err(data_err(format!("{total} frame embeddings for {videos} videos")));
        }
        let n = total / videos;
        if n + 1 + lead.is_some() as usize > self.config.frames + 2 {
            return Err(config_err(format!("{n} frames exceed the position table")));
        }
        let class = g.param(class_id);
        let mut parts = vec![frames, class];
        parts.extend(lead);
        let pool = g.concat_rows(&parts)?;
        let offset = lead.is_some() as usize;
        let len = n + 1 + offset;
        let mut map = Vec::with_capacity(videos * len);
        for v in 0..videos {
            if offset == 1 {
                map.push(vec![(total + 1 + v, 1.0)]);
            }
            for i in 0..n {
                map.push(vec![(v * n + i, 1.0)]);
            }
            map.push(vec![(total, 1.0)]);
        }
        let seq = g.combine_rows(pool, map)?;
        let table = g.param(self.positions);
        let pos_rows: Vec<usize> = (0..videos).flat_map(|_| 0..len).collect();
        let pos = g.gather_rows(table, &pos_rows)?;
        let t = g.add(seq, pos)?;
        let t = norm.forward(g, t)?;
        let t = reg.apply(g, t)?;
        let hidden = encoder.forward(g, t, videos, &AttentionMask::Causal, reg)?;
        let class_rows: Vec<usize> = (0..videos).map(|v| v * len + len - 1).collect();
        let class = g.gather_rows(hidden, &class_rows)?;
        Ok(TemporalOutput { hidden, class, len })
    }

    pub fn classify(&self, g: &mut Graph, h: Var) -> Result<Var> {
        Ok(self.classifier.forward(g, h)?)
    }

    /// `ĥ_class` of the factorized model.
    pub fn encode(&self, g: &mut Graph, batch: &LayoutBatch, reg: &mut Regularization) -> Result<TemporalOutput> {
        let o = self.embed_objects(g, batch, None, reg)?;
        let s = self.spatial_forward(g, batch, o, reg)?;
        self.temporal_forward(g, s, batch.videos, None, reg)
    }

    /// `ĥ_class` of whichever architecture is configured.
    pub fn class_vector(&self, g: &mut Graph, batch: &LayoutBatch, reg: &mut Regularization) -> Result<Var> {
        match self.config.architecture {
            Architecture::Factorized => Ok(self.encode(g, batch, reg)?.class),
            Architecture::Joint => self.joint_encode(g, batch, reg),
        }
    }

    /// Logits `[videos × classes]` of whichever architecture is configured.
    pub fn forward(&self, g: &mut Graph, batch: &LayoutBatch, reg: &mut Regularization) -> Result<Var> {
        let h = self.class_vector(g, batch, reg)?;
        self.classify(g, h)
    }

    /// Joint variant: one bidirectional transformer over the `frames·slots`
    /// object tokens of each video plus a trailing class token. Objects are
    /// summed with the position embedding of their frame; the class token
    /// takes position `frames`.
    pub fn joint_encode(&self, g: &mut Graph, batch: &LayoutBatch, reg: &mut Regularization) -> Result<Var> {
        let (n, m) = (batch.frames, batch.slots);
        if n + 1 > self.config.frames + 2 {
            return Err(config_err(format!("{n} frames exceed the position table")));
        }
        let len = n * m + 1;
        // Class rows take position `n`; only frame 0's class row is kept.
        let mut pos_rows = Vec::with_capacity(batch.rows());
        for _ in 0..batch.videos {
            for f in 0..n {
                pos_rows.push(n);
                pos_rows.extend(std::iter::repeat(f).take(m));
            }
        }
        let table = g.param(self.positions);
        let pos = g.gather_rows(table, &pos_rows)?;
        let cat = g.param(self.category);
        let c = g.gather_rows(cat, &batch.categories)?;
        let boxes = g.constant(Tensor::new(vec![batch.rows(), 4], batch.boxes.clone())?);
        let l = self.boxes.forward(g, boxes)?;
        let o = g.add(c, l)?;
        let o = g.add(o, pos)?;
        let mut map = Vec::with_capacity(batch.videos * len);
        let mut valid = Vec::with_capacity(batch.videos * len);
        for v in 0..batch.videos {
            for f in 0..n {
                for k in 0..m {
                    let r = batch.class_row(v, f) + 1 + k;
                    map.push(vec![(r, 1.0)]);
                    valid.push(batch.valid[r]);
                }
            }
            map.push(vec![(batch.class_row(v, 0), 1.0)]);
            valid.push(true);
        }
        let seq = g.combine_rows(o, map)?;
        let seq = self.object_norm.forward(g, seq)?;
        let seq = reg.apply(g, seq)?;
        let h = self.spatial.forward(g, seq, batch.videos, &AttentionMask::Padding(valid), reg)?;
        let rows: Vec<usize> = (0..batch.videos).map(|v| v * len + len - 1).collect();
        Ok(g.gather_rows(h, &rows)?)
    }

    /// Sequence length seen by the joint transformer for a batch.
    pub fn joint_len(batch: &LayoutBatch) -> usize {
        batch.frames * batch.slots + 1
    }
}
