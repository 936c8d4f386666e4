//! Causal pre-norm transformer over packed interaction embeddings.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Segment, Var};
use crate::error::{ArgusError, Result};
use crate::tensor::{Float, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::mini_desk()
    }
}

impl EncoderConfig {
    /// L2 H64.
    pub fn mini_desk() -> Self {
        Self { n_layers: 2, width: 64, n_heads: 4, ff_mult: 4, dropout: 0.1, max_len: 512 }
    }

    /// L4 H128.
    pub fn small_desk() -> Self {
        Self { n_layers: 4, width: 128, n_heads: 4, ff_mult: 4, dropout: 0.1, max_len: 512 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_heads == 0 || !self.width.is_multiple_of(self.n_heads) {
            return Err(ArgusError::Config(format!(
                "encoder width {} must be a positive multiple of n_heads {}",
                self.width, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ArgusError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_len == 0 || self.ff_mult == 0 {
            return Err(ArgusError::Config("max_len and ff_mult must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn normal<F: Float>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(std * rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Weight with std `1/sqrt(fan_in)`.
pub(crate) fn dense<F: Float>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<F> {
    normal(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
}

fn layer_norm_params<F: Float>(store: &mut ParamStore<F>, name: &str, width: usize) -> (ParamId, ParamId) {
    (
        store.add(&format!("{name}.gain"), ParamGroup::Backbone, Tensor::full(&[width], F::one())),
        store.add(&format!("{name}.bias"), ParamGroup::Backbone, Tensor::zeros(&[width])),
    )
}

fn linear_params<F: Float>(
    store: &mut ParamStore<F>,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (ParamId, ParamId) {
    (
        store.add(&format!("{name}.w"), ParamGroup::Backbone, dense(rng, fan_in, fan_out)),
        store.add(&format!("{name}.b"), ParamGroup::Backbone, Tensor::zeros(&[fan_out])),
    )
}

impl Encoder {
    /// Registers all encoder parameters under the `enc.` prefix.
    pub fn register<F: Float>(config: &EncoderConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.width;
        let ff = h * config.ff_mult;
        let blocks = (0..config.n_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                Block {
                    ln1: layer_norm_params(store, &format!("{p}.ln1"), h),
                    wq: linear_params(store, rng, &format!("{p}.q"), h, h),
                    wk: linear_params(store, rng, &format!("{p}.k"), h, h),
                    wv: linear_params(store, rng, &format!("{p}.v"), h, h),
                    wo: linear_params(store, rng, &format!("{p}.o"), h, h),
                    ln2: layer_norm_params(store, &format!("{p}.ln2"), h),
                    ff1: linear_params(store, rng, &format!("{p}.ff1"), h, ff),
                    ff2: linear_params(store, rng, &format!("{p}.ff2"), ff, h),
                }
            })
            .collect();
        let ln_f = layer_norm_params(store, "enc.ln_f", h);
        Ok(Self { config: config.clone(), blocks, ln_f })
    }

    fn lin<F: Float>(g: &mut Graph<'_, F>, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (g.param(p.0), g.param(p.1));
        g.linear(x, w, Some(b))
    }

    fn ln<F: Float>(g: &mut Graph<'_, F>, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
        let (gain, bias) = (g.param(p.0), g.param(p.1));
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    /// Hidden states for packed rows `x` (`N x width`); each segment is an
    /// independent causal sequence.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var, segments: &[Segment]) -> Result<Var> {
        let t_max = segments.iter().map(|s| s.len).max().unwrap_or(0);
        if t_max > self.config.max_len {
            return Err(ArgusError::Shape(format!("sequence length {t_max} exceeds max_len {}", self.config.max_len)));
        }
        let p = self.config.dropout;
        let mut x = x;
        for b in &self.blocks {
            let a = Self::ln(g, x, b.ln1)?;
            let q = Self::lin(g, a, b.wq)?;
            let k = Self::lin(g, a, b.wk)?;
            let v = Self::lin(g, a, b.wv)?;
            let att = g.causal_attention(q, k, v, segments, self.config.n_heads)?;
            let o = Self::lin(g, att, b.wo)?;
            let o = g.dropout(o, p);
            x = g.add(x, o)?;

            let a = Self::ln(g, x, b.ln2)?;
            let f = Self::lin(g, a, b.ff1)?;
            let f = g.gelu(f);
            let f = Self::lin(g, f, b.ff2)?;
            let f = g.dropout(f, p);
            x = g.add(x, f)?;
        }
        Self::ln(g, x, self.ln_f)
    }
}
