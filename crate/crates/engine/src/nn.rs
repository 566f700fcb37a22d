//! Parameterized layers built from graph operations.

use crate::error::{EngineError, Result};
use crate::graph::{Graph, Var};
use crate::ops::{AttentionMask, AttnLayout};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let weight = store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng)?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let weight = store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng)?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.weight];
        p.extend(self.bias);
        p
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(EngineError::Config(format!(
                "model width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, rng)?,
            key: Linear::new(store, &format!("{name}.k"), width, width, rng)?,
            value: Linear::new(store, &format!("{name}.v"), width, width, rng)?,
            output: Linear::new(store, &format!("{name}.o"), width, width, rng)?,
            heads,
            width,
        })
    }

    /// `target` is `[groups*q_len × width]`, `source` is
    /// `[groups*kv_len × width]`. Self-attention passes the same node twice.
    pub fn forward(
        &self,
        g: &mut Graph,
        target: Var,
        source: Var,
        groups: usize,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let q_len = g.value(target).rows() / groups;
        let kv_len = g.value(source).rows() / groups;
        let q = self.query.forward(g, target)?;
        let k = self.key.forward(g, source)?;
        let v = self.value.forward(g, source)?;
        let layout = AttnLayout {
            groups,
            q_len,
            kv_len,
            heads: self.heads,
        };
        let a = g.attention(q, k, v, layout, mask)?;
        self.output.forward(g, a)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.ff1"), width, hidden, rng)?,
            outer: Linear::new(store, &format!("{name}.ff2"), hidden, width, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.gelu(h);
        self.outer.forward(g, h)
    }
}

/// Dropout settings threaded through a forward pass.
pub struct Regularization<'r> {
    pub rate: f64,
    pub training: bool,
    pub rng: &'r mut Rng,
}

impl Regularization<'_> {
    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        g.dropout(x, self.rate, self.training, self.rng)
    }
}

/// Pre-normalization self-attention block:
/// `x + Drop(MHA(LN(x)))`, then `x + Drop(FF(LN(x)))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ff_mult: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            ff: FeedForward::new(store, name, width, width * ff_mult, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        groups: usize,
        mask: &AttentionMask,
        reg: &mut Regularization,
    ) -> Result<Var> {
        let h = self.attn_norm.forward(g, x)?;
        let a = self.attn.forward(g, h, h, groups, mask)?;
        let a = reg.apply(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ff_norm.forward(g, x)?;
        let f = self.ff.forward(g, h)?;
        let f = reg.apply(g, f)?;
        g.add(x, f)
    }
}

/// Stack of [`EncoderBlock`]s followed by a final layer normalization.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        width: usize,
        heads: usize,
        ff_mult: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(store, &format!("{name}.{i}"), width, heads, ff_mult, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.final_ln"), width)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        mut x: Var,
        groups: usize,
        mask: &AttentionMask,
        reg: &mut Regularization,
    ) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(g, x, groups, mask, reg)?;
        }
        self.final_norm.forward(g, x)
    }
}

/// Pre-normalization cross-attention block: queries from `target`,
/// keys/values from `source`, then a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub query_norm: LayerNorm,
    pub source_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl CrossBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ff_mult: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            query_norm: LayerNorm::new(store, &format!("{name}.lnq"), width)?,
            source_norm: LayerNorm::new(store, &format!("{name}.lns"), width)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            ff: FeedForward::new(store, name, width, width * ff_mult, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        target: Var,
        source: Var,
        groups: usize,
        mask: &AttentionMask,
        reg: &mut Regularization,
    ) -> Result<Var> {
        let q = self.query_norm.forward(g, target)?;
        let s = self.source_norm.forward(g, source)?;
        let a = self.attn.forward(g, q, s, groups, mask)?;
        let a = reg.apply(g, a)?;
        let x = g.add(target, a)?;
        let h = self.ff_norm.forward(g, x)?;
        let f = self.ff.forward(g, h)?;
        let f = reg.apply(g, f)?;
        g.add(x, f)
    }
}
