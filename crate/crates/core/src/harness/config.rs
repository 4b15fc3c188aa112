use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, Objective};
use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::renderer::RenderConfig;
use crate::scene::{RenderSpan, SyntheticScene};
use crate::transformer::AttentionConfig;

/// Which modules a run keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoDiffusion,
    NoTransformer,
    Neither,
}

impl Variant {
    /// Table order.
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoDiffusion,
        Variant::NoTransformer,
        Variant::Neither,
    ];

    pub fn uses_diffusion(self) -> bool {
        matches!(self, Variant::Full | Variant::NoTransformer)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Variant::Full | Variant::NoDiffusion)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDiffusion => "no_diffusion",
            Variant::NoTransformer => "no_transformer",
            Variant::Neither => "neither",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub n_views: usize,
    pub radius: f64,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// View `i` is held out when `i % holdout_every == holdout_every - 1`.
    pub holdout_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub objective: Objective,
    pub feature_dim: usize,
    pub latent_dim: usize,
    /// Box-filter factor applied to views before the feature projection.
    pub downsample: usize,
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    pub near: f64,
    pub far: f64,
    pub samples: usize,
    pub field_hidden: usize,
    /// Quadrature samples for ground-truth images.
    pub oracle_samples: usize,
    /// Ground-truth surface points for Chamfer distance.
    pub surface_points: usize,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: PathBuf,
    pub variant: Variant,
    pub out_dir: PathBuf,
    pub steps: usize,
    pub rays_per_step: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub lambda_diff: f64,
    pub cameras: CameraSpec,
    pub diffusion: DiffusionSpec,
    pub transformer: AttentionConfig,
    pub render: RenderSpec,
    pub optimizer: AdamConfig,
}

impl RunConfig {
    /// Desk-scale defaults for the bundled benchmark scene.
    pub fn benchmark(scene: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            scene: scene.into(),
            variant: Variant::Full,
            out_dir: PathBuf::from("runs"),
            steps: 200,
            rays_per_step: 64,
            checkpoint_every: 0,
            lambda_diff: 0.1,
            cameras: CameraSpec {
                n_views: 12,
                radius: 4.0,
                width: 32,
                height: 32,
                fov_deg: 40.0,
                holdout_every: 3,
            },
            diffusion: DiffusionSpec {
                steps: 50,
                beta_start: 1e-4,
                beta_end: 0.02,
                objective: Objective::Sample,
                feature_dim: 16,
                latent_dim: 8,
                downsample: 4,
                hidden: vec![64, 64],
            },
            transformer: AttentionConfig::desk(),
            render: RenderSpec {
                near: 2.0,
                far: 6.0,
                samples: 24,
                field_hidden: 64,
                oracle_samples: 1024,
                surface_points: 1024,
                chunk: 256,
            },
            optimizer: AdamConfig {
                learning_rate: 5e-3,
                ..AdamConfig::default()
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; a relative `scene` path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.scene.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.scene = dir.join(&cfg.scene);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda_diff >= 0.0 && self.lambda_diff.is_finite()) {
            return fail("lambda_diff must be finite and ≥ 0");
        }
        if self.rays_per_step == 0 {
            return fail("rays_per_step must be ≥ 1");
        }
        let c = &self.cameras;
        if c.n_views == 0 || c.width == 0 || c.height == 0 || !(c.radius > 0.0) {
            return fail("camera ring needs views, a positive radius and a resolution");
        }
        if c.holdout_every < 2 || c.n_views < c.holdout_every {
            return fail("holdout_every must be ≥ 2 and leave at least one held-out view");
        }
        let d = &self.diffusion;
        if d.feature_dim == 0 || d.latent_dim == 0 || d.downsample == 0 {
            return fail("diffusion widths must be ≥ 1");
        }
        if !c.width.is_multiple_of(d.downsample) || !c.height.is_multiple_of(d.downsample) {
            return fail("downsample must divide the view resolution");
        }
        self.schedule()?;
        self.transformer.validate()?;
        self.render_config([0.0; 3])?;
        if self.render.oracle_samples < 2 || self.render.surface_points == 0 || self.render.field_hidden == 0 {
            return fail("render spec needs oracle samples, surface points and a hidden width");
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return fail("invalid optimizer settings");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.diffusion;
        NoiseSchedule::linear(d.steps, d.beta_start, d.beta_end)
    }

    /// The learned renderer composites over the scene's fixed background.
    pub fn render_config(&self, background: [f64; 3]) -> Result<RenderConfig> {
        RenderConfig::new(self.render.near, self.render.far, self.render.samples, background)
    }

    pub fn span(&self) -> Result<RenderSpan> {
        RenderSpan::new(self.render.near, self.render.far)
    }

    pub fn load_scene(&self) -> Result<SyntheticScene> {
        if !self.scene.exists() {
            return Err(Error::Missing(self.scene.clone()));
        }
        crate::scene::load_scene(&self.scene)
    }

    pub fn train_views(&self) -> Vec<usize> {
        (0..self.cameras.n_views).filter(|i| !self.is_held_out(*i)).collect()
    }

    pub fn held_out_views(&self) -> Vec<usize> {
        (0..self.cameras.n_views).filter(|i| self.is_held_out(*i)).collect()
    }

    fn is_held_out(&self, i: usize) -> bool {
        i % self.cameras.holdout_every == self.cameras.holdout_every - 1
    }

    /// `variant-seedN`.
    pub fn run_name(&self) -> String {
        format!("{}-seed{}", self.variant, self.seed)
    }
}
