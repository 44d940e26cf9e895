use clap::{Parser, Subcommand};
use ptrefine::commands::{self};
use ptrefine::config::RunConfig;
use ptrefine::formats::Split;
use ptrefine::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Second-stage refinement of 3D bounding boxes from point clouds:
/// synthetic data generation, training, refinement, evaluation and
/// benchmarking, all deterministic under a fixed seed.
#[derive(Parser)]
#[command(name = "ptrefine", version, about)]
struct Cli {
    /// Worker thread cap (overrides the PTREFINE_THREADS environment
    /// variable; results do not depend on the thread count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/val splits and a manifest
    Generate {
        /// Structured run config; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of scenes
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train a refinement model on the dataset's train split
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an epoch checkpoint (config must match)
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Encoding variant override: plain, size_normalized, anchor,
        /// boundary_offset or virtual_points
        #[arg(long)]
        variant: Option<String>,
    },
    /// Rescore and refine a split's proposals with a trained checkpoint
    Refine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Proposals per forward batch
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// Run point-free crops through the network instead of rescoring
        /// them as background
        #[arg(long)]
        empty_passthrough: bool,
    },
    /// Evaluate a detections file: AP/APH per class, difficulty and range
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Run config supplying the [eval] section
        #[arg(long)]
        config: Option<PathBuf>,
        /// Match on BEV IoU instead of 3D IoU
        #[arg(long)]
        match_bev: bool,
        /// Interpolated PR integration with this many points (0 =
        /// continuous)
        #[arg(long, default_value_t = 0)]
        interp: usize,
    },
    /// Point-count statistics under proposal width/length enlargement
    Ambiguity {
        #[arg(long)]
        dataset: PathBuf,
        /// Width/length growth in meters
        #[arg(long, default_value_t = 1.0)]
        enlarge: f64,
        #[arg(long, default_value = "val")]
        split: String,
        /// Optional directory for ambiguity.json
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward-pass latency against sampled point counts (fixed batch)
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ascending point counts
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
        points: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// Timed runs per point count (median reported)
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional directory for bench.json
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an untrained checkpoint (lets bench run without training)
    InitCheckpoint {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse::<Split>().map_err(CliError::Schema)
}

fn setup_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("PTREFINE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    setup_threads(cli.threads);
    match cli.command {
        Command::Generate {
            config,
            out,
            seed,
            scenes,
        } => {
            let mut config = load_config(&config)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(n) = scenes {
                config.dataset.scenes = n;
            }
            config.validate().map_err(CliError::Schema)?;
            let summary = commands::cmd_generate(&config, &out)?;
            println!(
                "generated {} scenes ({} train / {} val), {} gt boxes, {} proposals -> {}",
                summary.scenes,
                summary.train_frames,
                summary.val_frames,
                summary.gt_boxes,
                summary.proposals,
                out.display()
            );
            if summary.objects_placed < summary.objects_requested {
                println!(
                    "note: placed {}/{} objects (bounded placement retries)",
                    summary.objects_placed, summary.objects_requested
                );
            }
            Ok(())
        }
        Command::Train {
            config,
            dataset,
            out,
            resume,
            seed,
            epochs,
            variant,
        } => {
            let mut config = load_config(&config)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            if let Some(v) = variant {
                config.encoding.variant = v;
            }
            config.validate().map_err(CliError::Schema)?;
            let summary = commands::cmd_train(&config, &dataset, &out, resume.as_deref())?;
            println!(
                "trained {} steps over {} epochs ({} params); final loss {:.4} (cls {:.4}, reg {:.4})",
                summary.steps,
                summary.epochs,
                summary.param_count,
                summary.final_total_loss,
                summary.final_cls_loss,
                summary.final_reg_loss
            );
            println!("checkpoint: {}", summary.checkpoint.display());
            Ok(())
        }
        Command::Refine {
            checkpoint,
            dataset,
            out,
            split,
            seed,
            batch,
            empty_passthrough,
        } => {
            let split = parse_split(&split)?;
            let summary = commands::cmd_refine(
                &checkpoint,
                &dataset,
                &out,
                split,
                seed,
                batch,
                empty_passthrough,
            )?;
            println!(
                "refined {} proposals over {} frames ({} empty crops) -> {}",
                summary.records,
                summary.frames,
                summary.empty_crops,
                summary.output.display()
            );
            Ok(())
        }
        Command::Eval {
            detections,
            dataset,
            out,
            split,
            config,
            match_bev,
            interp,
        } => {
            let split = parse_split(&split)?;
            let eval_config = match &config {
                Some(_) => Some(load_config(&config)?),
                None => None,
            };
            let (summary, _report) =
                commands::cmd_eval(&detections, &dataset, &out, split, |spec| {
                    if let Some(cfg) = &eval_config {
                        commands::apply_eval_section(spec, cfg);
                    }
                    if match_bev {
                        spec.match_bev = true;
                    }
                    if interp > 0 {
                        spec.integration = commands::integration_from_flag(interp);
                    }
                })?;
            let table = std::fs::read_to_string(&summary.report_text)
                .map_err(|e| CliError::io(summary.report_text.display(), e))?;
            print!("{table}");
            println!(
                "evaluated {} detections against {} ground truths; reports in {}",
                summary.detections,
                summary.ground_truths,
                out.display()
            );
            Ok(())
        }
        Command::Ambiguity {
            dataset,
            enlarge,
            split,
            out,
        } => {
            let split = parse_split(&split)?;
            let summary = commands::cmd_ambiguity(&dataset, enlarge, split, out.as_deref())?;
            println!(
                "{} proposals ({} split), +{:.2} m width/length:",
                summary.proposals, summary.split, summary.enlarge_wl
            );
            println!(
                "  same point count: {:.1}%  gained 1-9 points: {:.1}%",
                100.0 * summary.frac_same_count,
                100.0 * summary.frac_lt_10_new
            );
            Ok(())
        }
        Command::Bench {
            checkpoint,
            points,
            batch,
            runs,
            seed,
            out,
        } => {
            let report = commands::cmd_bench(&checkpoint, &points, batch, runs, seed, out.as_deref())?;
            println!(
                "forward latency, batch {} ({} params, median of {} runs):",
                report.batch, report.param_count, report.runs
            );
            for row in &report.rows {
                println!("  {:>5} points  {:>9.3} ms", row.n_points, row.median_seconds * 1e3);
            }
            Ok(())
        }
        Command::InitCheckpoint { config, out } => {
            let config = load_config(&config)?;
            commands::cmd_init_checkpoint(&config, &out)?;
            println!("wrote untrained checkpoint to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
