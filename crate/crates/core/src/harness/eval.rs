use std::path::Path;

use super::{Benchmark, Model, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{write_csv, ImagePair, MetricsReport};
use crate::numerics::{checkpoint, ParamStore};
use crate::renderer::{render_image, RenderOutput};
use crate::scene::Image;

pub struct Evaluation {
    /// One row per held-out view, then `MEAN`.
    pub reports: Vec<MetricsReport>,
    /// `(view index, render)` per held-out view.
    pub renders: Vec<(usize, Image)>,
}

/// Fails unless `loaded` has exactly the names and shapes `config` builds.
pub fn check_compatible(config: &RunConfig, loaded: &ParamStore) -> Result<Model> {
    let mut template = ParamStore::new();
    let model = Model::new(config, &mut template)?;
    let expected: Vec<(&str, &[usize])> = template.iter().map(|(n, t)| (n, t.shape())).collect();
    let found: Vec<(&str, &[usize])> = loaded.iter().map(|(n, t)| (n, t.shape())).collect();
    if expected != found {
        let missing = expected.iter().find(|e| !found.contains(e));
        let extra = found.iter().find(|f| !expected.contains(f));
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match the {} config (first missing: {:?}, first unexpected: {:?})",
            config.variant,
            missing.map(|m| m.0),
            extra.map(|m| m.0),
        )));
    }
    Ok(model)
}

pub fn load_checkpoint_for(config: &RunConfig, path: &Path) -> Result<(Model, ParamStore)> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let params = checkpoint::load(path)?;
    let model = check_compatible(config, &params)?;
    Ok((model, params))
}

/// Renders camera `view` of the benchmark ring with the learned model.
pub fn render_view(
    config: &RunConfig,
    bench: &Benchmark,
    model: &Model,
    params: &ParamStore,
    view: usize,
) -> Result<RenderOutput> {
    let cam = bench
        .cameras
        .get(view)
        .ok_or_else(|| Error::invalid(format!("view {view} outside 0..{}", bench.cameras.len())))?;
    let latent = model.latent_eval(params, &bench.features)?;
    let cfg = config.render_config(bench.scene.background)?;
    render_image(params, &model.field, &latent, cam, &cfg, config.render.chunk)
}

/// Every metric on every held-out view against the oracle images.
pub fn evaluate(config: &RunConfig, bench: &Benchmark, model: &Model, params: &ParamStore) -> Result<Evaluation> {
    let run = config.run_name();
    let variant = config.variant.name();
    let mut reports = Vec::new();
    let mut renders = Vec::new();
    for &v in &bench.held_out_views {
        let out = render_view(config, bench, model, params, v)?;
        let pair = ImagePair::unit(out.image.data(), bench.images[v].data())?;
        reports.push(MetricsReport::compute(
            &run,
            variant,
            &v.to_string(),
            &pair,
            &out.points,
            &bench.surface,
        ));
        renders.push((v, out.image));
    }
    if let Some(mean) = MetricsReport::mean(&reports) {
        reports.push(mean);
    }
    Ok(Evaluation { reports, renders })
}

/// `metrics.csv` plus one `view{N}.ppm` per held-out render.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    std::fs::write(&csv, write_csv(&eval.reports)).map_err(|e| Error::io(&csv, e))?;
    for (v, image) in &eval.renders {
        image.write_ppm(&dir.join(format!("view{v}.ppm")))?;
    }
    Ok(())
}
