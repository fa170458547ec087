use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};

use featrack_core::config::RunConfig;
use featrack_core::eval::format_comparison;
use featrack_core::features::{ClassicalExtractor, FeatureExtractor};
use featrack_core::model::NetworkExtractor;
use featrack_core::pipeline::{
    load_dataset, load_labels, load_model, prepare_out_dir, read_vo_outputs, render_dataset,
    run_compare_stage, run_eval_stage, run_label_stage, run_synth, run_train_stage, run_vo_stage,
    LoadedDataset,
};

/// Self-supervised keypoint pipeline on synthetic stereo scenes. A run
/// directory accumulates stage artifacts: synth lays down the dataset, then
/// vo, label, train, eval, and compare each add a subdirectory.
#[derive(Parser)]
#[command(name = "featrack", version, max_term_width = 100)]
struct Cli {
    /// Configuration file (key = value per line); defaults apply when omitted
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run directory that stages read from and write into
    #[arg(long, global = true, value_name = "DIR", default_value = "run")]
    out: PathBuf,

    /// Allow synth to write into a non-empty directory
    #[arg(long, global = true)]
    force: bool,

    /// Overrides the seed from the config file
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic stereo dataset into the run directory
    Synth,
    /// Run stereo visual odometry over the dataset
    Vo {
        /// Trained checkpoint to extract features with (classical corner
        /// detector when omitted)
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Score tracks geometrically and rasterize pseudo-label grids
    Label,
    /// Train the detector/descriptor network on the label grids
    Train,
    /// Evaluate an extractor: coverage, repeatability, trajectory error
    Eval {
        /// Checkpoint to evaluate; defaults to the trained one in the run
        /// directory, or the classical detector if none exists
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Compare classical, untrained, and trained extractors on a held-out scene
    Compare {
        /// Trained checkpoint; defaults to the one in the run directory
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("bad config {}", p.display()))
        }
    }
}

fn load_ds(out: &Path) -> anyhow::Result<LoadedDataset> {
    load_dataset(out).with_context(|| format!("no dataset in {} (run synth first)", out.display()))
}

fn network_extractor(path: &Path, cfg: &RunConfig) -> anyhow::Result<NetworkExtractor> {
    let params = load_model(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    Ok(NetworkExtractor { params, nms: cfg.nms() })
}

fn extractor_for(model: Option<&Path>, cfg: &RunConfig) -> anyhow::Result<Box<dyn FeatureExtractor>> {
    match model {
        None => Ok(Box::new(ClassicalExtractor { nms: cfg.nms(), ..Default::default() })),
        Some(p) => Ok(Box::new(network_extractor(p, cfg)?)),
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let out = cli.out.as_path();

    match cli.cmd {
        Cmd::Synth => {
            prepare_out_dir(out, cli.force)?;
            let n = run_synth(&cfg, seed, out)?;
            println!("wrote {n} stereo frames (seed {seed}) to {}", out.display());
        }
        Cmd::Vo { model } => {
            // resolve the extractor first so a bad checkpoint path fails
            // before any dataset i/o
            let extractor = extractor_for(model.as_deref(), &cfg)?;
            let ds = load_ds(out)?;
            let vo = run_vo_stage(&ds, extractor.as_ref(), &cfg.vo_params(seed), &out.join("vo"))?;
            println!(
                "tracked {} frames: {} pose failures, mean inliers {:.1}, {} tracks",
                ds.frames.len(),
                vo.failure_count(),
                vo.mean_inliers(),
                vo.tracks.len()
            );
        }
        Cmd::Label => {
            let ds = load_ds(out)?;
            let vo = read_vo_outputs(&out.join("vo"))
                .with_context(|| format!("no odometry outputs in {} (run vo first)", out.join("vo").display()))?;
            let labels = run_label_stage(&ds, &vo, &cfg.supervision(), &out.join("labels"))?;
            println!(
                "{} of {} tracks judged good; label grids for {} frames",
                labels.good_count(),
                labels.verdicts.len(),
                labels.labels.len()
            );
        }
        Cmd::Train => {
            let ds = load_ds(out)?;
            let (labels, ignore) =
                load_labels(&out.join("labels"), ds.frames.len(), ds.width, ds.height)
                    .with_context(|| {
                        format!("no label grids in {} (run label first)", out.join("labels").display())
                    })?;
            let outcome = run_train_stage(&ds, &labels, &ignore, &cfg, seed, &out.join("train"))?;
            let last = outcome.reports.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} steps over {} rounds, final loss {:.4}, {} rejected steps",
                outcome.reports.len(),
                cfg.rounds,
                last,
                outcome.rejected_steps
            );
        }
        Cmd::Eval { model } => {
            let default_ckpt = out.join("train").join("model.bin");
            let (extractor, method): (Box<dyn FeatureExtractor>, &str) = match &model {
                Some(p) => (Box::new(network_extractor(p, &cfg)?), "network (--model)"),
                None if default_ckpt.exists() => {
                    (Box::new(network_extractor(&default_ckpt, &cfg)?), "network (trained)")
                }
                None => {
                    (Box::new(ClassicalExtractor { nms: cfg.nms(), ..Default::default() }), "classical")
                }
            };
            let ds = load_ds(out)?;
            let report = run_eval_stage(&ds, extractor.as_ref(), &cfg, seed, &out.join("eval"))?;
            println!(
                "evaluated {method}: ate {:.4} m, {} failures, entropy {:.3}, dynamic fraction {:.3}",
                report.trajectory.ate_rmse,
                report.trajectory.failure_count,
                report.mean_entropy,
                report.dynamic_fraction
            );
        }
        Cmd::Compare { model } => {
            let ckpt = model.unwrap_or_else(|| out.join("train").join("model.bin"));
            let params = load_model(&ckpt).with_context(|| {
                format!("no trained checkpoint at {} (run train first or pass --model)", ckpt.display())
            })?;
            // held-out scene: same generator family, next seed
            let holdout = render_dataset(&cfg, seed.wrapping_add(1))?;
            let rows = run_compare_stage(&holdout, &cfg, seed, Some(&params), &out.join("compare"))?;
            print!("{}", format_comparison(&rows));
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
