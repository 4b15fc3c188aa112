use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, write_evaluation};
use super::{stream, total_loss, Benchmark, Model, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::numerics::{checkpoint, rng, AdamState, Graph, ParamStore, PrngState, Tensor};
use crate::renderer::{render_loss, render_rays};
use crate::scene::{cast_ray, Ray};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub render: f64,
    /// Absent for variants without the diffusion module.
    pub diffusion: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prepare_s: f64,
    pub train_s: f64,
    pub eval_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub version: String,
    pub prng: String,
    pub losses: Vec<StepLoss>,
    pub metrics: Vec<MetricsReport>,
    pub timings: Timings,
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub params: ParamStore,
    pub model: Model,
}

/// `step,render,diffusion,total`, one row per optimizer step.
pub fn write_losses(losses: &[StepLoss]) -> String {
    let mut out = String::from("step,render,diffusion,total\n");
    for l in losses {
        let d = l.diffusion.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", l.step, l.render, d, l.total).expect("write to string");
    }
    out
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn persist(dir: &Path, params: &ParamStore, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&dir.join("checkpoint.dtnf"), params)?;
    write(&dir.join("losses.csv"), write_losses(&record.losses))?;
    let json = serde_json::to_string_pretty(record).expect("run record serializes");
    write(&dir.join("record.json"), json)
}

/// Joint optimization of every module of `config`'s variant. Writes the
/// checkpoint, loss log, run record, held-out metrics and renders to
/// `config.out_dir`.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    let start = Instant::now();
    let bench = Benchmark::prepare(config)?;
    let prepare_s = start.elapsed().as_secs_f64();
    let mut outcome = train_on(config, &bench, true)?;
    outcome.record.timings.prepare_s = prepare_s;
    persist(&config.out_dir, &outcome.params, &outcome.record)?;
    Ok(outcome)
}

/// Training and evaluation on a prepared benchmark; writes to `out_dir`
/// only when `persist_outputs` is set.
pub fn train_on(config: &RunConfig, bench: &Benchmark, persist_outputs: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = ParamStore::new();
    let model = Model::new(config, &mut params)?;
    let mut adam = AdamState::new(config.optimizer, &params);
    let render_cfg = config.render_config(bench.scene.background)?;
    let mut rng = PrngState::derive(config.seed, stream::TRAIN);
    let pools: Vec<Vec<Ray>> = bench
        .train_views
        .iter()
        .map(|&v| {
            let cam = &bench.cameras[v];
            (0..cam.height)
                .flat_map(|py| (0..cam.width).map(move |px| (px, py)))
                .map(|(px, py)| cast_ray(cam, px, py))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut record = RunRecord {
        config: config.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        prng: rng::ALGORITHM.to_string(),
        losses: Vec::with_capacity(config.steps),
        metrics: Vec::new(),
        timings: Default::default(),
    };
    let started = Instant::now();
    for step in 0..config.steps {
        let loss = train_step(
            config,
            bench,
            &model,
            &mut params,
            &mut adam,
            &pools,
            &render_cfg,
            &mut rng,
        )
        .map_err(|e| Error::AtStep {
            step,
            source: Box::new(e),
        })?;
        record.losses.push(StepLoss { step, ..loss });
        let done = step + 1;
        if persist_outputs && config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps
        {
            persist(&config.out_dir, &params, &record)?;
        }
    }
    record.timings.train_s = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let evaluation = evaluate(config, bench, &model, &params)?;
    record.timings.eval_s = started.elapsed().as_secs_f64();
    if persist_outputs {
        write_evaluation(&config.out_dir, &evaluation)?;
    }
    record.metrics = evaluation.reports;
    Ok(TrainOutcome { record, params, model })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    config: &RunConfig,
    bench: &Benchmark,
    model: &Model,
    params: &mut ParamStore,
    adam: &mut AdamState,
    pools: &[Vec<Ray>],
    render_cfg: &crate::renderer::RenderConfig,
    rng: &mut PrngState,
) -> Result<StepLoss> {
    let slot = rng.below(pools.len());
    let image = &bench.images[bench.train_views[slot]];
    let mut rays = Vec::with_capacity(config.rays_per_step);
    let mut target = Vec::with_capacity(config.rays_per_step * 3);
    for _ in 0..config.rays_per_step {
        let i = rng.below(pools[slot].len());
        rays.push(pools[slot][i]);
        target.extend_from_slice(&image.data()[3 * i..3 * i + 3]);
    }
    let target = Tensor::new([rays.len(), 3], target)?;
    let mut g = Graph::new();
    let (latent, diff) = model.latent_train(&mut g, params, &bench.features, rng)?;
    let (comp, _) = render_rays(&mut g, params, &model.field, latent, &rays, render_cfg, Some(rng))?;
    let render = render_loss(&mut g, comp.rgb, &target)?;
    let total = total_loss(&mut g, render, diff, config.lambda_diff)?;
    let loss = StepLoss {
        step: 0,
        render: g.value(render).item(),
        diffusion: diff.map(|d| g.value(d).item()),
        total: g.value(total).item(),
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("total loss"));
    }
    let grads = g.backward(total)?.for_params(params);
    adam.step(params, &grads)?;
    Ok(loss)
}
