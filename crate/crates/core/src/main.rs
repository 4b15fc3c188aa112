use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dtnerf::harness::{self, Benchmark, RunConfig};
use dtnerf::metrics::write_csv;
use dtnerf::scene::{save_scene, SyntheticScene};
use dtnerf::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dtnerf",
    version,
    about = "Diffusion- and attention-conditioned radiance fields at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded two-sphere, one-box scene file.
    GenScene {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run and write checkpoint, logs, metrics and renders.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one ring view with a trained checkpoint as PPM.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the held-out views and write CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every variant for every seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Inclusive range `A..B` or a comma list.
        #[arg(long, default_value = "0..4")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize run directories into a table and plot files.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene { seed, out } => save_scene(&out, &SyntheticScene::generate(seed)),
        Command::Train { config, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let outcome = harness::train(&cfg)?;
            if let Some(m) = outcome.record.metrics.last() {
                println!(
                    "{} psnr_db={} ssim={} out={}",
                    cfg.run_name(),
                    m.psnr_db,
                    m.ssim,
                    cfg.out_dir.display()
                );
            }
            Ok(())
        }
        Command::Render {
            checkpoint,
            config,
            view,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (model, params) = harness::load_checkpoint_for(&cfg, &checkpoint)?;
            let bench = Benchmark::prepare(&cfg)?;
            let r = harness::render_view(&cfg, &bench, &model, &params, view)?;
            r.image.write_ppm(&out)
        }
        Command::Eval {
            checkpoint,
            config,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (model, params) = harness::load_checkpoint_for(&cfg, &checkpoint)?;
            let bench = Benchmark::prepare(&cfg)?;
            let eval = harness::evaluate(&cfg, &bench, &model, &params)?;
            std::fs::write(&out, write_csv(&eval.reports)).map_err(|e| Error::io(&out, e))
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = RunConfig::load(&config)?;
            let summary = harness::ablate(&cfg, &parse_seeds(&seeds)?, &out)?;
            for (v, m) in summary.median_psnr {
                println!("{v} median_psnr_db={m}");
            }
            Ok(())
        }
        Command::Report { dirs, out } => {
            let r = harness::report(&dirs, &out)?;
            print!("{}", r.table);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
