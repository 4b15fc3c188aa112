//! Conditioned radiance field and emission–absorption compositing.
//!
//! Each ray contributes `S` stratified samples. A sample becomes a token
//! `embed([γ(x), latent])`; the aggregator turns the ray's tokens into `ĥ`,
//! and the field head maps `[ĥ, γ(x)]` to a density (softplus) and a color
//! (sigmoid). Compositing uses `αᵢ = 1 − exp(−σᵢδᵢ)` and
//! `Tᵢ = exp(−Σ_{j<i} σⱼδⱼ) = ∏_{j<i}(1 − αⱼ)`.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::numerics::{Graph, Linear, ParamStore, PrngState, Tensor, Var};
use crate::scene::{cast_ray, Camera, Image, PointCloud, Ray, RenderSpan};
use crate::transformer::{encoding_width, positional_encode, AttentionConfig, TokenMlp, Transformer};

/// Opacity above which a ray is taken to have hit a surface.
pub const HIT_OPACITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub span: RenderSpan,
    pub samples: usize,
    pub background: [f64; 3],
}

impl RenderConfig {
    pub fn new(near: f64, far: f64, samples: usize, background: [f64; 3]) -> Result<Self> {
        if samples < 2 {
            return Err(Error::invalid("at least 2 samples per ray"));
        }
        Ok(Self {
            span: RenderSpan::new(near, far)?,
            samples,
            background,
        })
    }

    pub fn bin_width(&self) -> f64 {
        (self.span.far - self.span.near) / self.samples as f64
    }

    /// Sample depths: bin midpoints, or one uniform draw per bin with `rng`.
    pub fn sample_depths(&self, rng: Option<&mut PrngState>) -> Vec<f64> {
        let w = self.bin_width();
        match rng {
            Some(rng) => (0..self.samples)
                .map(|i| self.span.near + (i as f64 + rng.uniform()) * w)
                .collect(),
            None => (0..self.samples)
                .map(|i| self.span.near + (i as f64 + 0.5) * w)
                .collect(),
        }
    }
}

/// Per-sample densities and colors of `R` rays with `S` samples each.
#[derive(Clone, Debug)]
pub struct RaySampleBatch {
    /// `[R, S]`, nonnegative.
    pub sigma: Var,
    /// Three `[R, S]` channels within `[0, 1]`.
    pub rgb: [Var; 3],
    /// `[R, S]` segment lengths, all positive.
    pub deltas: Tensor,
}

impl RaySampleBatch {
    pub fn from_values(g: &mut Graph, sigma: Tensor, rgb: [Tensor; 3], deltas: Tensor) -> Result<Self> {
        if sigma.shape() != deltas.shape() || rgb.iter().any(|c| c.shape() != sigma.shape()) {
            return Err(Error::shape("ray samples", sigma.shape(), deltas.shape()));
        }
        if sigma.data().iter().any(|s| !(*s >= 0.0)) || deltas.data().iter().any(|d| !(*d > 0.0)) {
            return Err(Error::invalid("densities must be ≥ 0 and segment lengths > 0"));
        }
        let sigma = g.leaf(sigma);
        let [r, gr, b] = rgb;
        let rgb = [g.leaf(r), g.leaf(gr), g.leaf(b)];
        Ok(Self { sigma, rgb, deltas })
    }
}

pub struct Composite {
    /// `[R, 3]`.
    pub rgb: Var,
    /// `[R, 1]`.
    pub opacity: Var,
    /// `[R, S]` compositing weights `Tᵢαᵢ`.
    pub weights: Var,
}

pub fn composite(g: &mut Graph, batch: &RaySampleBatch, background: [f64; 3]) -> Result<Composite> {
    let deltas = g.constant(batch.deltas.clone());
    let optical = g.mul(batch.sigma, deltas)?;
    let neg = g.scale(optical, -1.0);
    let survive = g.exp(neg);
    let neg_survive = g.scale(survive, -1.0);
    let alpha = g.add_scalar(neg_survive, 1.0);
    let before = g.cumsum_exclusive(optical)?;
    let before = g.scale(before, -1.0);
    let transmittance = g.exp(before);
    let weights = g.mul(transmittance, alpha)?;
    let total = g.sum_last(optical)?;
    let total = g.scale(total, -1.0);
    let residual = g.exp(total);
    let mut channels = Vec::with_capacity(3);
    for (c, &bg) in batch.rgb.iter().zip(&background) {
        let weighted = g.mul(weights, *c)?;
        let emitted = g.sum_last(weighted)?;
        let bg_part = g.scale(residual, bg);
        channels.push(g.add(emitted, bg_part)?);
    }
    let rgb = g.concat(&channels)?;
    let neg_residual = g.scale(residual, -1.0);
    let opacity = g.add_scalar(neg_residual, 1.0);
    Ok(Composite { rgb, opacity, weights })
}

/// Mean squared error over all pixel channels, on the graph.
pub fn render_loss(g: &mut Graph, pred: Var, truth: &Tensor) -> Result<Var> {
    if g.shape(pred) != truth.shape() {
        return Err(Error::shape("render_loss", g.shape(pred), truth.shape()));
    }
    let n = truth.len() as f64;
    let t = g.constant(truth.clone());
    let sq = g.sum_sq(pred, Some(t))?;
    Ok(g.scale(sq, 1.0 / n))
}

/// What turns a ray's tokens into `ĥ`.
#[derive(Clone, Debug)]
pub enum Aggregator {
    Attention(Transformer),
    PerToken(TokenMlp),
}

impl Aggregator {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        match self {
            Aggregator::Attention(t) => t.forward(g, store, tokens),
            Aggregator::PerToken(m) => m.forward(g, store, tokens),
        }
    }
}

/// Token embedding, aggregator and field head.
#[derive(Clone, Debug)]
pub struct FieldNet {
    pub n_freq: usize,
    pub model_dim: usize,
    pub latent_dim: usize,
    embed_pos: Linear,
    embed_latent: crate::numerics::ParamId,
    pub aggregator: Aggregator,
    head: Vec<Linear>,
}

impl FieldNet {
    pub fn new(
        store: &mut ParamStore,
        config: &AttentionConfig,
        latent_dim: usize,
        hidden: usize,
        use_attention: bool,
        rng: &mut PrngState,
    ) -> Result<Self> {
        config.validate()?;
        let enc = encoding_width(config.n_freq);
        let d = config.model_dim;
        let embed_pos = Linear::new(store, "tokens.embed_pos", enc, d, rng)?;
        let embed_latent = store.insert_glorot("tokens.embed_latent.w", latent_dim, d, rng)?;
        let aggregator = if use_attention {
            Aggregator::Attention(Transformer::new(store, "transformer", *config, rng)?)
        } else {
            Aggregator::PerToken(TokenMlp::new(store, "mixer", config, rng)?)
        };
        let head = vec![
            Linear::new(store, "field.l0", d + enc, hidden, rng)?,
            Linear::new(store, "field.l1", hidden, hidden, rng)?,
            Linear::new(store, "field.out", hidden, 4, rng)?,
        ];
        Ok(Self {
            n_freq: config.n_freq,
            model_dim: d,
            latent_dim,
            embed_pos,
            embed_latent,
            aggregator,
            head,
        })
    }

    /// Densities and colors at `positions` (`rays × samples`, row-major by
    /// ray) under conditioning `latent: [1, d_lat]`.
    pub fn field_eval(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        positions: &[Vec3],
        rays: usize,
        samples: usize,
        latent: Var,
    ) -> Result<RaySampleBatch> {
        if positions.len() != rays * samples || rays == 0 || samples == 0 {
            return Err(Error::shape("field_eval", &[positions.len()], &[rays, samples]));
        }
        if g.shape(latent) != [1, self.latent_dim] {
            return Err(Error::shape(
                "field_eval latent",
                g.shape(latent),
                &[1, self.latent_dim],
            ));
        }
        let enc = encoding_width(self.n_freq);
        let pe: Vec<f64> = positions
            .iter()
            .flat_map(|&p| positional_encode(p, self.n_freq))
            .collect();
        let pe = g.constant(Tensor::new([rays * samples, enc], pe)?);
        let pos_part = self.embed_pos.forward(g, store, pe)?;
        let wl = g.param(store, self.embed_latent);
        let lat_part = g.matmul(latent, wl)?;
        let tokens = g.add(pos_part, lat_part)?;
        let tokens = g.reshape(tokens, &[rays, samples, self.model_dim])?;
        let h = self.aggregator.forward(g, store, tokens)?;
        let h = g.reshape(h, &[rays * samples, self.model_dim])?;
        let mut x = g.concat(&[h, pe])?;
        for (i, layer) in self.head.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i + 1 < self.head.len() {
                x = g.relu(x);
            }
        }
        let sigma = g.slice_last(x, 0, 1)?;
        let sigma = g.softplus(sigma);
        let sigma = g.reshape(sigma, &[rays, samples])?;
        let mut rgb = [sigma; 3];
        for (c, slot) in rgb.iter_mut().enumerate() {
            let raw = g.slice_last(x, 1 + c, 2 + c)?;
            let col = g.sigmoid(raw);
            *slot = g.reshape(col, &[rays, samples])?;
        }
        Ok(RaySampleBatch {
            sigma,
            rgb,
            deltas: Tensor::zeros([rays, samples]),
        })
    }
}

/// Positions and segment lengths of every sample of `rays`.
pub fn ray_samples(rays: &[Ray], cfg: &RenderConfig, mut rng: Option<&mut PrngState>) -> (Vec<Vec3>, Vec<f64>, Tensor) {
    let mut positions = Vec::with_capacity(rays.len() * cfg.samples);
    let mut depths = Vec::with_capacity(rays.len() * cfg.samples);
    for ray in rays {
        let ts = cfg.sample_depths(rng.as_deref_mut());
        positions.extend(ts.iter().map(|&t| ray.at(t)));
        depths.extend(ts);
    }
    let deltas = Tensor::full([rays.len(), cfg.samples], cfg.bin_width());
    (positions, depths, deltas)
}

/// Renders `rays` end to end on `g`, returning the composite.
pub fn render_rays(
    g: &mut Graph,
    store: &ParamStore,
    field: &FieldNet,
    latent: Var,
    rays: &[Ray],
    cfg: &RenderConfig,
    rng: Option<&mut PrngState>,
) -> Result<(Composite, Vec<f64>)> {
    let (positions, depths, deltas) = ray_samples(rays, cfg, rng);
    let mut batch = field.field_eval(g, store, &positions, rays.len(), cfg.samples, latent)?;
    batch.deltas = deltas;
    Ok((composite(g, &batch, cfg.background)?, depths))
}

pub struct RenderOutput {
    pub image: Image,
    pub opacity: Vec<f64>,
    /// Weight-averaged hit point of each ray whose opacity exceeds [`HIT_OPACITY`].
    pub points: PointCloud,
}

/// Renders every pixel of `camera` at bin midpoints, `chunk` rays per graph.
pub fn render_image(
    store: &ParamStore,
    field: &FieldNet,
    latent: &Tensor,
    camera: &Camera,
    cfg: &RenderConfig,
    chunk: usize,
) -> Result<RenderOutput> {
    let rays = (0..camera.height)
        .flat_map(|py| (0..camera.width).map(move |px| (px, py)))
        .map(|(px, py)| cast_ray(camera, px, py))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(rays.len() * 3);
    let mut opacity = Vec::with_capacity(rays.len());
    let mut points = Vec::new();
    for group in rays.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let lat = g.constant(latent.clone());
        let (comp, depths) = render_rays(&mut g, store, field, lat, group, cfg, None)?;
        data.extend_from_slice(g.value(comp.rgb).data());
        let w = g.value(comp.weights).data();
        for (r, ray) in group.iter().enumerate() {
            let o = g.value(comp.opacity).data()[r];
            opacity.push(o);
            if o > HIT_OPACITY {
                let span = r * cfg.samples..(r + 1) * cfg.samples;
                let wsum: f64 = w[span.clone()].iter().sum();
                let depth: f64 = w[span.clone()]
                    .iter()
                    .zip(&depths[span])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / wsum;
                points.push(ray.at(depth));
            }
        }
    }
    Ok(RenderOutput {
        image: Image::from_data(camera.width, camera.height, data)?,
        opacity,
        points: PointCloud::new(points),
    })
}
