//! Multi-head self-attention over the samples of each ray.
//!
//! Blocks are pre-norm: `x + MHA(LN(x))` followed by `x + FFN(LN(x))`. No
//! positional terms are added inside the stack, so it is equivariant to any
//! permutation of the tokens of a sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::numerics::{Graph, Linear, ParamId, ParamStore, PrngState, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub n_freq: usize,
    pub ffn_dim: usize,
}

impl AttentionConfig {
    /// Small stack used for CPU experiments.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 2,
            model_dim: 32,
            n_freq: 4,
            ffn_dim: 64,
        }
    }

    /// Six layers, eight heads, width 512.
    pub fn large() -> Self {
        Self {
            layers: 6,
            heads: 8,
            model_dim: 512,
            n_freq: 10,
            ffn_dim: 2048,
        }
    }

    pub fn key_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{} heads do not divide model width {}",
                self.heads, self.model_dim
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::invalid("feed-forward width must be ≥ 1"));
        }
        Ok(())
    }
}

pub fn encoding_width(n_freq: usize) -> usize {
    3 + 6 * n_freq
}

/// `[p, sin(2ʲπp), cos(2ʲπp)]` for `j = 0..n_freq`, each block covering
/// the three coordinates.
pub fn positional_encode(p: Vec3, n_freq: usize) -> Vec<f64> {
    let c = p.to_array();
    let mut out = Vec::with_capacity(encoding_width(n_freq));
    out.extend_from_slice(&c);
    for j in 0..n_freq {
        let w = (1u64 << j) as f64 * std::f64::consts::PI;
        out.extend(c.iter().map(|v| (w * v).sin()));
        out.extend(c.iter().map(|v| (w * v).cos()));
    }
    out
}

/// Lifts rank-2 inputs to a batch of one.
fn as_batched(g: &mut Graph, x: Var) -> Result<(Var, bool)> {
    match *g.shape(x) {
        [n, d] => Ok((g.reshape(x, &[1, n, d])?, true)),
        [_, _, _] => Ok((x, false)),
        _ => Err(Error::shape("attention input", g.shape(x), &[])),
    }
}

/// `softmax(QKᵀ/√d_k)·V` row-wise. Accepts `[N, d]` or batched `[B, N, d]`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qb, lifted) = as_batched(g, q)?;
    let (kb, _) = as_batched(g, k)?;
    let (vb, _) = as_batched(g, v)?;
    let (sq, sk, sv) = (g.shape(qb).to_vec(), g.shape(kb).to_vec(), g.shape(vb).to_vec());
    if sq[0] != sk[0] || sk[0] != sv[0] || sq[2] != sk[2] || sk[1] != sv[1] || sq[2] == 0 {
        return Err(Error::shape("scaled_dot_attention", &sq, &sk));
    }
    let kt = g.transpose_last(kb)?;
    let scores = g.batch_matmul(qb, kt)?;
    let scores = g.scale(scores, 1.0 / (sq[2] as f64).sqrt());
    let weights = g.softmax(scores, 2)?;
    let out = g.batch_matmul_exact(weights, vb)?;
    if lifted {
        g.reshape(out, &[sq[1], sv[2]])
    } else {
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadWeights {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(format!("{name}.gain"), Tensor::full([width], 1.0))?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros([width]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let scaled = g.mul(n, gain)?;
        g.add(scaled, bias)
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub output: ParamId,
    pub attn_norm: Norm,
    pub ffn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl LayerWeights {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut PrngState) -> Result<Self> {
        cfg.validate()?;
        let (d, dk) = (cfg.model_dim, cfg.key_dim());
        let heads = (0..cfg.heads)
            .map(|h| {
                Ok(HeadWeights {
                    query: store.insert_glorot(format!("{name}.head{h}.wq"), d, dk, rng)?,
                    key: store.insert_glorot(format!("{name}.head{h}.wk"), d, dk, rng)?,
                    value: store.insert_glorot(format!("{name}.head{h}.wv"), d, dk, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads,
            output: store.insert_glorot(format!("{name}.wo"), d, d, rng)?,
            attn_norm: Norm::new(store, &format!("{name}.attn_norm"), d)?,
            ffn_norm: Norm::new(store, &format!("{name}.ffn_norm"), d)?,
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, cfg.ffn_dim, rng)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), cfg.ffn_dim, d, rng)?,
        })
    }
}

/// Rank-2 `[rows, d] · [d, e]` applied to the flattened tokens of `[B, N, d]`.
fn project(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = g.matmul(flat, w)?;
    let e = g.shape(y)[1];
    g.reshape(y, &[s[0], s[1], e])
}

/// `Concat(head₁…head_h)·W_o` with `headᵢ = Attention(xq·W_Qⁱ, xkv·W_Kⁱ, xkv·W_Vⁱ)`.
pub fn multi_head(g: &mut Graph, store: &ParamStore, xq: Var, xkv: Var, w: &LayerWeights) -> Result<Var> {
    let (xq, lifted) = as_batched(g, xq)?;
    let (xkv, _) = as_batched(g, xkv)?;
    let d = g.shape(xq)[2];
    let wo = g.param(store, w.output);
    if g.shape(wo) != [d, d] || g.shape(xkv)[2] != d {
        return Err(Error::shape("multi_head", g.shape(xq), g.shape(wo)));
    }
    let mut heads = Vec::with_capacity(w.heads.len());
    for h in &w.heads {
        let (wq, wk, wv) = (g.param(store, h.query), g.param(store, h.key), g.param(store, h.value));
        let q = project(g, xq, wq)?;
        let k = project(g, xkv, wk)?;
        let v = project(g, xkv, wv)?;
        heads.push(scaled_dot_attention(g, q, k, v)?);
    }
    let cat = g.concat(&heads)?;
    let out = project(g, cat, wo)?;
    if lifted {
        let s = g.shape(out).to_vec();
        g.reshape(out, &[s[1], s[2]])
    } else {
        Ok(out)
    }
}

fn feed_forward(g: &mut Graph, store: &ParamStore, x: Var, inp: &Linear, out: &Linear) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let h = inp.forward(g, store, flat)?;
    let h = g.relu(h);
    let y = out.forward(g, store, h)?;
    g.reshape(y, &s)
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: AttentionConfig,
    pub layers: Vec<LayerWeights>,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, name: &str, config: AttentionConfig, rng: &mut PrngState) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| LayerWeights::new(store, &format!("{name}.layer{l}"), &config, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    /// Maps tokens `[B, N, d]` to `ĥ` of the same shape.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.config.model_dim || s[1] == 0 {
            return Err(Error::shape("transformer_forward", &s, &[self.config.model_dim]));
        }
        let mut x = tokens;
        for layer in &self.layers {
            let n = layer.attn_norm.forward(g, store, x)?;
            let a = multi_head(g, store, n, n, layer)?;
            x = g.add(x, a)?;
            let n = layer.ffn_norm.forward(g, store, x)?;
            let f = feed_forward(g, store, n, &layer.ffn_in, &layer.ffn_out)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }
}

/// Per-token residual MLP stack standing in for the transformer in the
/// ablation: same block layout without attention, hidden width chosen so the
/// parameter count matches.
#[derive(Clone, Debug)]
pub struct TokenMlp {
    pub blocks: Vec<(Norm, Linear, Linear)>,
}

impl TokenMlp {
    /// Hidden width whose block size `2d + d·h + h + h·d + d` best matches
    /// `target` parameters per block.
    pub fn matched_hidden(model_dim: usize, target: usize) -> usize {
        let d = model_dim as f64;
        (((target as f64) - 3.0 * d) / (2.0 * d + 1.0)).round().max(1.0) as usize
    }

    pub fn block_params(model_dim: usize, hidden: usize) -> usize {
        2 * model_dim + model_dim * hidden + hidden + hidden * model_dim + model_dim
    }

    pub fn new(store: &mut ParamStore, name: &str, config: &AttentionConfig, rng: &mut PrngState) -> Result<Self> {
        let d = config.model_dim;
        let per_layer = attention_layer_params(config);
        let hidden = Self::matched_hidden(d, per_layer);
        let blocks = (0..config.layers)
            .map(|l| {
                let name = format!("{name}.block{l}");
                Ok((
                    Norm::new(store, &format!("{name}.norm"), d)?,
                    Linear::new(store, &format!("{name}.fc_in"), d, hidden, rng)?,
                    Linear::new(store, &format!("{name}.fc_out"), hidden, d, rng)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for (norm, inp, out) in &self.blocks {
            let n = norm.forward(g, store, x)?;
            let f = feed_forward(g, store, n, inp, out)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }
}

/// Scalar parameter count of one attention block.
pub fn attention_layer_params(cfg: &AttentionConfig) -> usize {
    let d = cfg.model_dim;
    3 * d * cfg.key_dim() * cfg.heads + d * d + 4 * d + d * cfg.ffn_dim + cfg.ffn_dim + cfg.ffn_dim * d + d
}
