use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use pmp_core::checkpoint::Checkpoint;
use pmp_core::config::{Baseline, RunConfig, TaskSpec};
use pmp_core::experiments::{ablation, mean_drop, noise_sweep};
use pmp_core::gradcheck::{check_model, GradCheckSettings};
use pmp_core::tasks::dataset::Dataset;
use pmp_core::tasks::generate;
use pmp_core::train::{evaluate_checkpoint, load_instances, train};

#[derive(Parser)]
#[command(name = "pmp", version, about = "Policy message passing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train a model; writes metrics.csv, best.ckpt and last.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// PMPD file, or a directory with cora.content and cora.cites.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test nodes of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Prior rollouts averaged per instance.
        #[arg(long, default_value_t = 5)]
        samples: usize,
    },
    /// Finite-difference check of the training gradient in 64-bit.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Entries sampled per parameter tensor.
        #[arg(long, default_value_t = 12)]
        entries: usize,
    },
    /// Clean versus noisy-edge accuracy on the synthetic community graph.
    NoiseSweep {
        #[arg(long, value_delimiter = ',', default_value = "0.5,1.0,2.0")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "pmp,gnn-mean")]
        baselines: Vec<String>,
        /// Base config; defaults to the community task with default settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write one CSV row per run here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy as a function of the function-set size and step count.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset scored on its test nodes.
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
        steps: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskName {
    Whereami,
    Puzzle,
    Community,
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum)]
    task: TaskName,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of instances (the community task always yields one graph).
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 6)]
    grid: usize,
    #[arg(long, default_value_t = 9)]
    objects: usize,
    #[arg(long, default_value_t = 4)]
    glyphs: usize,
    /// Puzzle side length in patches.
    #[arg(long, default_value_t = 3)]
    d: usize,
    /// Side length of the synthetic puzzle image in pixels.
    #[arg(long, default_value_t = 48)]
    image: usize,
    #[arg(long, default_value_t = 400)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    communities: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_ratio: f64,
}

impl GenData {
    fn spec(&self) -> TaskSpec {
        match self.task {
            TaskName::Whereami => TaskSpec::Whereami {
                grid: self.grid,
                objects: self.objects,
                glyphs: self.glyphs,
            },
            TaskName::Puzzle => TaskSpec::Puzzle {
                d: self.d,
                image: self.image,
            },
            TaskName::Community => TaskSpec::Community {
                nodes: self.nodes,
                communities: self.communities,
                noise_ratio: self.noise_ratio,
            },
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(args) => {
            let data = generate(&args.spec(), args.count, args.seed)?;
            data.save(&args.out)
                .with_context(|| format!("saving {}", args.out.display()))?;
            info!(
                "wrote {} instances to {}",
                data.instances.len(),
                args.out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = load_config(&config)?;
            let summary = train(cfg, &data, &out, resume.as_deref())?;
            println!(
                "epochs {} best val accuracy {:.4} at epoch {}{}",
                summary.epochs_run,
                summary.best_val,
                summary.best_epoch,
                if summary.stopped_early {
                    " (early stop)"
                } else {
                    ""
                }
            );
        }
        Command::Eval {
            ckpt,
            data,
            samples,
        } => {
            let ck = Checkpoint::load(&ckpt)
                .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let cfg = ck.config()?;
            let instances = if matches!(cfg.task, TaskSpec::Cora { .. }) {
                load_instances(&cfg, &data)?
            } else {
                Dataset::load(&data)
                    .with_context(|| format!("loading dataset {}", data.display()))?
                    .instances
            };
            let report = evaluate_checkpoint(&ck, &instances, samples)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::GradCheck {
            config,
            seed,
            entries,
        } => {
            let cfg = load_config(&config)?;
            let settings = GradCheckSettings {
                seed,
                entries_per_param: entries,
                ..GradCheckSettings::default()
            };
            let start = std::time::Instant::now();
            let outcome = check_model(&cfg, &settings)?;
            for p in &outcome.report.params {
                println!(
                    "{:<28} entries {:>3}  max abs {:.3e}  max rel {:.3e}",
                    p.name, p.entries_checked, p.max_abs_err, p.max_rel_err
                );
            }
            for (group, err) in outcome.groups() {
                println!("group {group:<12} worst rel {err:.3e}");
            }
            let worst = outcome.report.worst_rel_err();
            let verdict = if outcome.passed() { "PASS" } else { "FAIL" };
            println!(
                "{verdict}: worst relative error {worst:.3e} (threshold {:.0e}) in {:.1}s",
                outcome.tolerance,
                start.elapsed().as_secs_f64()
            );
            if !outcome.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::NoiseSweep {
            ratios,
            seeds,
            baselines,
            config,
            out,
        } => {
            let base = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::new(TaskSpec::Community {
                    nodes: 400,
                    communities: 4,
                    noise_ratio: 0.0,
                }),
            };
            let baselines = baselines
                .iter()
                .map(|b| b.parse::<Baseline>())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
                bail!("noise ratios must be non-negative");
            }
            let points = noise_sweep(&base, &ratios, &seeds, &baselines)?;
            let mut csv = String::from("baseline,seed,ratio,accuracy\n");
            for p in &points {
                csv.push_str(&format!(
                    "{},{},{},{:.6}\n",
                    p.baseline.name(),
                    p.seed,
                    p.ratio,
                    p.accuracy
                ));
            }
            match out {
                Some(path) => std::fs::write(&path, &csv)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
            for &b in &baselines {
                for &r in &ratios {
                    if let Some(d) = mean_drop(&points, b, r) {
                        println!("{} mean drop at ratio {r}: {:.4}", b.name(), d);
                    }
                }
            }
        }
        Command::Ablate {
            config,
            data,
            test_data,
            ks,
            steps,
        } => {
            let cfg = load_config(&config)?;
            let train_set = load_instances(&cfg, &data)?;
            let test_set = load_instances(&cfg, &test_data)?;
            let points = ablation(&cfg, &train_set, &test_set, &ks, &steps)?;
            println!("k,steps,accuracy,kendall_tau");
            for p in points {
                let tau = p.kendall_tau.map(|t| format!("{t:.6}")).unwrap_or_default();
                println!("{},{},{:.6},{tau}", p.k, p.steps, p.accuracy);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
