//! Joint training, evaluation, ablation runs and reporting.

mod ablate;
mod config;
mod eval;
mod report;
mod train;

pub use ablate::{ablate, median, AblationSummary};
pub use config::{CameraSpec, DiffusionSpec, RenderSpec, RunConfig, Variant};
pub use eval::{check_compatible, evaluate, load_checkpoint_for, render_view, write_evaluation, Evaluation};
pub use report::{parse_table, report, Report};
pub use train::{train, train_on, write_losses, RunRecord, StepLoss, Timings, TrainOutcome};

use crate::diffusion::{diffusion_loss, DenoiserNet, LatentProjector, NoiseSchedule, ViewEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, PrngState, Tensor, Var};
use crate::renderer::FieldNet;
use crate::scene::{make_camera_ring_at, oracle_render, sample_point_cloud, Camera, Image, PointCloud, SyntheticScene};

/// PRNG streams derived from the run seed.
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const SURFACE: u64 = 3;
    pub const FEATURES: u64 = 4;
}

/// `L_render + λ·L_diffusion` on one graph.
pub fn total_loss(g: &mut Graph, render: Var, diffusion: Option<Var>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("λ_diff must be finite and ≥ 0, got {lambda}")));
    }
    match diffusion {
        Some(d) => {
            let weighted = g.scale(d, lambda);
            g.add(render, weighted)
        }
        None => Ok(render),
    }
}

/// Where the conditioning latent comes from.
#[derive(Clone, Debug)]
pub enum Conditioning {
    Diffusion {
        denoiser: DenoiserNet,
        projector: LatentProjector,
        schedule: NoiseSchedule,
    },
    /// Trainable `[1, d_lat]` vector.
    Constant(ParamId),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub conditioning: Conditioning,
    pub field: FieldNet,
}

impl Model {
    /// Registers every parameter of `config`'s variant in `store`.
    pub fn new(config: &RunConfig, store: &mut ParamStore) -> Result<Self> {
        let mut rng = PrngState::derive(config.seed, stream::INIT);
        let d = &config.diffusion;
        let conditioning = if config.variant.uses_diffusion() {
            let denoiser = DenoiserNet::new(
                store,
                "diffusion.denoiser",
                d.feature_dim,
                &d.hidden,
                d.steps,
                d.objective,
                &mut rng,
            )?;
            let projector = LatentProjector::new(store, "diffusion.latent", d.feature_dim, d.latent_dim, &mut rng)?;
            Conditioning::Diffusion {
                denoiser,
                projector,
                schedule: config.schedule()?,
            }
        } else {
            let init = rng.normal(&[1, d.latent_dim]).map(|v| 0.1 * v);
            Conditioning::Constant(store.insert("latent_const", init)?)
        };
        let field = FieldNet::new(
            store,
            &config.transformer,
            d.latent_dim,
            config.render.field_hidden,
            config.variant.uses_attention(),
            &mut rng,
        )?;
        Ok(Self {
            variant: config.variant,
            conditioning,
            field,
        })
    }

    /// Latent for one training step plus the diffusion loss on `features`.
    pub fn latent_train(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &Tensor,
        rng: &mut PrngState,
    ) -> Result<(Var, Option<Var>)> {
        match &self.conditioning {
            Conditioning::Diffusion {
                denoiser,
                projector,
                schedule,
            } => {
                let batch = diffusion_loss(g, denoiser, store, features, schedule, rng)?;
                let latent = projector.extract_latent(g, store, batch.x0_hat)?;
                Ok((latent, Some(batch.loss)))
            }
            Conditioning::Constant(id) => Ok((g.param(store, *id), None)),
        }
    }

    /// Deterministic latent: `x̂₀ = f(√ᾱ₁·x₀, 1)` pooled and projected.
    pub fn latent_eval(&self, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let latent = match &self.conditioning {
            Conditioning::Diffusion {
                denoiser,
                projector,
                schedule,
            } => {
                let a = schedule.alpha(1).sqrt();
                let x = g.constant(features.map(|v| a * v));
                let rows = features.shape()[0];
                let x0 = denoiser.predict(&mut g, store, x, &vec![1; rows], schedule)?;
                projector.extract_latent(&mut g, store, x0)?
            }
            Conditioning::Constant(id) => g.param(store, *id),
        };
        Ok(g.value(latent).clone())
    }
}

/// Scene, cameras and ground truth shared by every run on one config.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub scene: SyntheticScene,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub train_views: Vec<usize>,
    pub held_out_views: Vec<usize>,
    pub encoder: ViewEncoder,
    /// One row per training view.
    pub features: Tensor,
    pub surface: PointCloud,
}

impl Benchmark {
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        let scene = config.load_scene()?;
        Self::from_scene(config, scene)
    }

    pub fn from_scene(config: &RunConfig, scene: SyntheticScene) -> Result<Self> {
        let c = &config.cameras;
        let cameras = make_camera_ring_at(
            c.n_views,
            c.radius,
            crate::geom::Vec3::ZERO,
            (c.width, c.height),
            0.0,
            c.fov_deg,
        )?;
        let span = config.span()?;
        let images = cameras
            .iter()
            .map(|cam| oracle_render(&scene, cam, span, config.render.oracle_samples))
            .collect::<Result<Vec<_>>>()?;
        let train_views = config.train_views();
        let held_out_views = config.held_out_views();
        let d = &config.diffusion;
        let encoder = ViewEncoder::new(
            c.width,
            c.height,
            d.downsample,
            d.feature_dim,
            stream::FEATURES ^ config.seed,
        )?;
        let train_images: Vec<Image> = train_views.iter().map(|&i| images[i].clone()).collect();
        let features = encoder.encode_all(&train_images)?;
        let surface = sample_point_cloud(
            &scene,
            config.render.surface_points,
            PrngState::derive(config.seed, stream::SURFACE).next_u64(),
        )?;
        Ok(Self {
            scene,
            cameras,
            images,
            train_views,
            held_out_views,
            encoder,
            features,
            surface,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_weights() {
        let mut g = Graph::new();
        let r = g.leaf(Tensor::scalar(0.5));
        let d = g.leaf(Tensor::scalar(0.5));
        let l = total_loss(&mut g, r, Some(d), 1.0).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let l = total_loss(&mut g, r, Some(d), 0.0).unwrap();
        assert_eq!(g.value(l).item(), 0.5);
        assert!(total_loss(&mut g, r, Some(d), -0.1).is_err());
        assert!(total_loss(&mut g, r, None, f64::NAN).is_err());
    }

    #[test]
    fn variant_parameter_names() {
        let base = RunConfig::benchmark("unused");
        let names = |v: Variant| {
            let mut store = ParamStore::new();
            Model::new(
                &RunConfig {
                    variant: v,
                    ..base.clone()
                },
                &mut store,
            )
            .unwrap();
            store.names().map(String::from).collect::<Vec<_>>()
        };
        let has = |n: &[String], p: &str| n.iter().any(|s| s.starts_with(p));
        for v in Variant::ALL {
            let n = names(v);
            assert_eq!(has(&n, "diffusion."), v.uses_diffusion(), "{v}");
            assert_eq!(has(&n, "latent_const"), !v.uses_diffusion(), "{v}");
            assert_eq!(has(&n, "transformer."), v.uses_attention(), "{v}");
            assert_eq!(has(&n, "mixer."), !v.uses_attention(), "{v}");
            assert!(has(&n, "field.") && has(&n, "tokens."));
        }
    }

    #[test]
    fn matched_mixer_size() {
        let base = RunConfig::benchmark("unused");
        let count = |v: Variant, p: &str| {
            let mut store = ParamStore::new();
            Model::new(
                &RunConfig {
                    variant: v,
                    ..base.clone()
                },
                &mut store,
            )
            .unwrap();
            store.count(p)
        };
        let attn = count(Variant::Full, "transformer.") as f64;
        let mlp = count(Variant::NoTransformer, "mixer.") as f64;
        assert!((mlp - attn).abs() <= 0.1 * attn, "{mlp} vs {attn}");
    }
}
