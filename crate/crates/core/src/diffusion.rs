//! Denoising diffusion over per-view feature vectors.
//!
//! Forward noising is `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`; the denoiser predicts
//! `x̂₀ = f_θ(x_t, t)` directly and is trained on `‖x₀ − f_θ(x_t, t)‖²`.
//! Pooled predictions are projected to the latent that conditions the
//! radiance field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Linear, ParamStore, PrngState, Tensor, Var};
use crate::scene::Image;

/// Cumulative signal-retention coefficients `ᾱ_1 … ᾱ_T`, together with the
/// per-step `β_t` they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// `ᾱ_t = ∏_{s≤t} (1 − β_s)` with `β` linearly spaced over `[beta_start, beta_end]`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("noise schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < {beta_start} ≤ {beta_end} < 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alphas = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas })
    }

    /// Schedule from explicit `ᾱ` values (nonincreasing, within `(0, 1]`).
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("noise schedule needs at least one step"));
        }
        if alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::invalid("every ᾱ_t must lie in (0, 1]"));
        }
        if alphas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("ᾱ_t must be nonincreasing"));
        }
        let mut prev = 1.0;
        let betas = alphas
            .iter()
            .map(|&a| {
                let b = 1.0 - a / prev;
                prev = a;
                b
            })
            .collect();
        Ok(Self { betas, alphas })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// `ᾱ_t` for `t ∈ 1..=T`; `ᾱ_0 = 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Noises `x0` with retention `alpha ∈ [0, 1]`, returning `(x_t, ε)`.
pub fn diffuse_with_alpha(x0: &Tensor, alpha: f64, rng: &mut PrngState) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let eps = rng.normal(x0.shape());
    let (a, b) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Ok((Tensor::new(x0.shape().to_vec(), data)?, eps))
}

pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut PrngState,
) -> Result<(Tensor, Tensor)> {
    schedule.check(t)?;
    diffuse_with_alpha(x0, schedule.alpha(t), rng)
}

/// What the network output is trained against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Output is `x̂₀`.
    #[default]
    Sample,
    /// Output is `ε̂`; `x̂₀` is recovered from it.
    Noise,
}

#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub data_dim: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub objective: Objective,
    layers: Vec<Linear>,
}

pub const TIME_EMBED_DIM: usize = 16;

impl DenoiserNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        data_dim: usize,
        hidden: &[usize],
        steps: usize,
        objective: Objective,
        rng: &mut PrngState,
    ) -> Result<Self> {
        if data_dim == 0 {
            return Err(Error::invalid("denoiser data width must be ≥ 1"));
        }
        let mut widths = vec![data_dim + TIME_EMBED_DIM];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            data_dim,
            time_dim: TIME_EMBED_DIM,
            steps,
            objective,
            layers,
        })
    }

    /// Sinusoidal embedding of `t / T`.
    pub fn time_embedding(&self, t: usize) -> Vec<f64> {
        let half = self.time_dim / 2;
        let s = t as f64 / self.steps.max(1) as f64;
        let mut out = Vec::with_capacity(self.time_dim);
        for k in 0..half {
            let freq = std::f64::consts::PI * (1u64 << k.min(62)) as f64 / 2.0;
            out.push((freq * s).sin());
            out.push((freq * s).cos());
        }
        out.resize(self.time_dim, 0.0);
        out
    }

    /// Raw network output for `x_t: [B, D]` at per-row timesteps.
    fn raw(&self, g: &mut Graph, store: &ParamStore, x_t: Var, t: &[usize]) -> Result<Var> {
        let s = g.shape(x_t).to_vec();
        if s.len() != 2 || s[1] != self.data_dim || s[0] != t.len() {
            return Err(Error::shape("denoise_predict", &s, &[t.len(), self.data_dim]));
        }
        let emb: Vec<f64> = t.iter().flat_map(|&ti| self.time_embedding(ti)).collect();
        let emb = g.constant(Tensor::new([t.len(), self.time_dim], emb)?);
        let mut h = g.concat(&[x_t, emb])?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// `x̂₀ = f_θ(x_t, t)` on the graph.
    pub fn predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: Var,
        t: &[usize],
        schedule: &NoiseSchedule,
    ) -> Result<Var> {
        Ok(self.predict_parts(g, store, x_t, t, schedule)?.1)
    }

    /// `(raw output, x̂₀)`; the two coincide for [`Objective::Sample`].
    fn predict_parts(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: Var,
        t: &[usize],
        schedule: &NoiseSchedule,
    ) -> Result<(Var, Var)> {
        for &ti in t {
            schedule.check(ti)?;
        }
        let out = self.raw(g, store, x_t, t)?;
        match self.objective {
            Objective::Sample => Ok((out, out)),
            Objective::Noise => {
                // x̂₀ = (x_t − √(1−ᾱ)·ε̂) / √ᾱ, row by row.
                let a: Vec<f64> = t.iter().map(|&ti| schedule.alpha(ti)).collect();
                let inv = g.constant(Tensor::new([t.len(), 1], a.iter().map(|a| 1.0 / a.sqrt()).collect())?);
                let coef = g.constant(Tensor::new(
                    [t.len(), 1],
                    a.iter().map(|a| ((1.0 - a) / a).sqrt()).collect(),
                )?);
                let xs = g.mul(x_t, inv)?;
                let es = g.mul(out, coef)?;
                Ok((out, g.sub(xs, es)?))
            }
        }
    }
}

/// Detached forward pass at a single timestep.
pub fn denoise_predict(
    net: &DenoiserNet,
    store: &ParamStore,
    x_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let rows = match x_t.shape() {
        [r, _] => *r,
        s => return Err(Error::shape("denoise_predict", s, &[net.data_dim])),
    };
    let x = g.constant(x_t.clone());
    let y = net.predict(&mut g, store, x, &vec![t; rows], schedule)?;
    Ok(g.value(y).clone())
}

pub struct DiffusionBatch {
    /// Mean over the batch of the squared L2 error of the network output
    /// against its target (`x₀`, or `ε` for [`Objective::Noise`]).
    pub loss: Var,
    pub x0_hat: Var,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
}

/// Samples `t ~ U{1..T}` and `ε ~ N(0, I)` per row of `x0: [B, D]`, and
/// scores the denoiser on the resulting `x_t`.
pub fn diffusion_loss(
    g: &mut Graph,
    net: &DenoiserNet,
    store: &ParamStore,
    x0: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut PrngState,
) -> Result<DiffusionBatch> {
    let (b, d) = match x0.shape() {
        [b, d] if *b > 0 => (*b, *d),
        s => {
            return Err(Error::invalid(format!(
                "diffusion batch must be nonempty [B, D], got {s:?}"
            )))
        }
    };
    let timesteps: Vec<usize> = (0..b).map(|_| 1 + rng.below(schedule.steps())).collect();
    let noise = rng.normal(&[b, d]);
    let mut xt = Vec::with_capacity(b * d);
    for (row, &t) in timesteps.iter().enumerate() {
        let a = schedule.alpha(t);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        for k in 0..d {
            xt.push(sa * x0.data()[row * d + k] + sb * noise.data()[row * d + k]);
        }
    }
    let xt = g.constant(Tensor::new([b, d], xt)?);
    let (raw, x0_hat) = net.predict_parts(g, store, xt, &timesteps, schedule)?;
    let target = match net.objective {
        Objective::Sample => g.constant(x0.clone()),
        Objective::Noise => g.constant(noise.clone()),
    };
    let sq = g.sum_sq(raw, Some(target))?;
    let loss = g.scale(sq, 1.0 / b as f64);
    Ok(DiffusionBatch {
        loss,
        x0_hat,
        timesteps,
        noise,
    })
}

/// Ancestral sampling on `steps` evenly spaced timesteps from `T` down to
/// 1, using the Gaussian posterior `q(x_s | x_t, x̂₀)` between consecutive
/// visited timesteps. With `steps = 1` this is one prediction from pure
/// noise at `T`.
pub fn reverse_sample(
    net: &DenoiserNet,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    shape: [usize; 2],
    rng: &mut PrngState,
    steps: usize,
) -> Result<Tensor> {
    let total = schedule.steps();
    if steps == 0 || steps > total {
        return Err(Error::invalid(format!("reverse steps must be in 1..={total}")));
    }
    let visit = spaced_timesteps(total, steps);
    let mut x = rng.normal(&shape);
    let mut x0_hat = x.clone();
    for (i, &t) in visit.iter().enumerate() {
        x0_hat = denoise_predict(net, store, &x, t, schedule)?;
        let s = visit.get(i + 1).copied().unwrap_or(0);
        if s == 0 {
            break;
        }
        let (at, as_) = (schedule.alpha(t), schedule.alpha(s));
        let step_alpha = at / as_;
        let step_beta = 1.0 - step_alpha;
        let c0 = as_.sqrt() * step_beta / (1.0 - at);
        let ct = step_alpha.sqrt() * (1.0 - as_) / (1.0 - at);
        let sigma = (step_beta * (1.0 - as_) / (1.0 - at)).sqrt();
        let z = rng.normal(&shape);
        let data = x0_hat
            .data()
            .iter()
            .zip(x.data())
            .zip(z.data())
            .map(|((p, xt), zv)| c0 * p + ct * xt + sigma * zv)
            .collect();
        x = Tensor::new(shape.to_vec(), data)?;
    }
    Ok(x0_hat)
}

/// `steps ≤ total` distinct timesteps from `T` down towards 1, evenly spaced.
fn spaced_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|i| total - (i * total) / steps).collect()
}

/// Mean-pools rows of `x̂₀` and projects to the conditioning latent.
#[derive(Clone, Copy, Debug)]
pub struct LatentProjector {
    pub proj: Linear,
}

impl LatentProjector {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        data_dim: usize,
        latent_dim: usize,
        rng: &mut PrngState,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, name, data_dim, latent_dim, rng)?,
        })
    }

    /// `[B, D] → [1, d_lat]`.
    pub fn extract_latent(&self, g: &mut Graph, store: &ParamStore, x0_hat: Var) -> Result<Var> {
        if !g.value(x0_hat).is_finite() {
            return Err(Error::NonFinite("extract_latent"));
        }
        let pooled = g.mean_rows(x0_hat)?;
        self.proj.forward(g, store, pooled)
    }
}

/// Fixed random linear embedding of downsampled views into feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEncoder {
    pub factor: usize,
    weights: Tensor,
}

impl ViewEncoder {
    pub fn new(width: usize, height: usize, factor: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if factor == 0 || !width.is_multiple_of(factor) || !height.is_multiple_of(factor) {
            return Err(Error::invalid(format!("{width}×{height} not divisible by {factor}")));
        }
        let inputs = (width / factor) * (height / factor) * 3;
        let mut rng = PrngState::derive(seed, 0xFEA7);
        let scale = 1.0 / (inputs as f64).sqrt();
        let weights = rng.normal(&[inputs, feature_dim]).map(|v| v * scale);
        Ok(Self { factor, weights })
    }

    pub fn encode(&self, image: &Image) -> Result<Vec<f64>> {
        let small = image.downsample(self.factor)?;
        let flat: Vec<f64> = small.data().iter().map(|v| v - 0.5).collect();
        let x = Tensor::row_vector(flat);
        Ok(x.matmul(&self.weights)?.into_data())
    }

    /// Stacks one feature row per image.
    pub fn encode_all(&self, images: &[Image]) -> Result<Tensor> {
        let rows = images.iter().map(|im| self.encode(im)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_rows(&rows))
    }
}
