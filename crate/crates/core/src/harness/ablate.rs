use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::train::{persist, train_on, RunRecord};
use super::{Benchmark, RunConfig, Variant};
use crate::error::{Error, Result};

pub struct AblationSummary {
    /// Seed-major, variants in table order within each seed.
    pub records: Vec<RunRecord>,
    /// Median over seeds of each variant's mean held-out PSNR, table order.
    pub median_psnr: Vec<(Variant, f64)>,
}

impl AblationSummary {
    pub fn median_of(&self, v: Variant) -> Option<f64> {
        self.median_psnr.iter().find(|(w, _)| *w == v).map(|p| p.1)
    }
}

/// Middle value, or the mean of the two middle values. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean_psnr(r: &RunRecord) -> f64 {
    r.metrics
        .iter()
        .find(|m| m.view == "MEAN")
        .map_or(f64::NAN, |m| m.psnr_db)
}

/// Every variant under every seed, identical budgets and benchmark per
/// seed. Runs go to `out/<variant>/seed<N>/`; the per-run PSNRs and the
/// medians go to `out/ablation.csv` and `out/median_psnr.csv`.
pub fn ablate(base: &RunConfig, seeds: &[u64], out: &Path) -> Result<AblationSummary> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    base.validate()?;
    let scene = base.load_scene()?;
    let mut jobs = Vec::new();
    let mut benches = Vec::new();
    for (k, &seed) in seeds.iter().enumerate() {
        let cfg = RunConfig { seed, ..base.clone() };
        benches.push(Benchmark::from_scene(&cfg, scene.clone())?);
        for v in Variant::ALL {
            let run = RunConfig {
                variant: v,
                out_dir: out.join(v.name()).join(format!("seed{seed}")),
                ..cfg.clone()
            };
            jobs.push((k, run));
        }
    }
    let results: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((k, cfg)) = jobs.get(i) else { break };
                let res = train_on(cfg, &benches[*k], true).and_then(|o| {
                    persist(&cfg.out_dir, &o.params, &o.record)?;
                    Ok(o.record)
                });
                results.lock().expect("ablation results lock")[i] = Some(res);
            });
        }
    });
    let records = results
        .into_inner()
        .expect("ablation results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;

    let mut table = String::from("variant,seed,psnr_db\n");
    for r in &records {
        writeln!(table, "{},{},{}", r.config.variant, r.config.seed, mean_psnr(r)).expect("write to string");
    }
    let mut medians = String::from("variant,median_psnr_db\n");
    let mut median_psnr = Vec::new();
    for v in Variant::ALL {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.config.variant == v)
            .map(mean_psnr)
            .collect();
        let m = median(&vals).unwrap_or(f64::NAN);
        writeln!(medians, "{v},{m}").expect("write to string");
        median_psnr.push((v, m));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, text) in [("ablation.csv", table), ("median_psnr.csv", medians)] {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(AblationSummary { records, median_psnr })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0]), Some(3.0));
        assert_eq!(median(&[5.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[1.0, f64::INFINITY, 2.0]), Some(2.0));
    }
}
