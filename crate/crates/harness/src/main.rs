use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use stra_core::verify::suites::{gradient_suite, SuiteModule};
use stra_core::verify::{count_arch, count_preset, Preset};

use stra_harness::checkpoint::Checkpoint;
use stra_harness::config::RunConfig;
use stra_harness::dataset::{generate_parts_dataset, PartsDataset, Split};
use stra_harness::error::{HarnessError, Result};
use stra_harness::eval::{evaluate_with_radius, default_radius};
use stra_harness::export::export_mode_maps;
use stra_harness::train::train;

#[derive(Parser)]
#[command(name = "stratt", version, about = "Train, check and inspect structure-regularized attention networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    All,
    Local,
    Mode,
    Block,
    Losses,
    Primitives,
    Network,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, or resume from a checkpoint.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from this checkpoint; its embedded config is used.
        #[arg(long, conflicts_with_all = ["config", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Accuracy, losses, mask overlap and mode-part alignment.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Hit radius in pixels; defaults to half a part diagonal.
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Compare every backward pass with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 3)]
        instances: usize,
        #[arg(long, default_value_t = 100)]
        seed: u64,
    },
    /// Multiply-accumulates, FLOPs and parameters per layer.
    Flops {
        #[arg(long, required_unless_present = "config", conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `HxW`; presets default to 256x128, configs to their own size.
        #[arg(long)]
        input: Option<String>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Write mode masks and coefficients as heatmaps.
    ExportModes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which mode-attention block, counted in network order.
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// Heatmaps are written for this many images; the aggregate uses all.
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
    /// Generate a dataset split described by a config file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn parse_hw(s: &str) -> Result<(usize, usize)> {
    let bad = || HarnessError::Invalid(format!("--input expects HxW, got `{s}`"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("STRATT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::Invalid(format!("STRATT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| HarnessError::Invalid(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out, resume } => {
            let summary = match resume {
                Some(path) => train(RunConfig::default(), &out, Some(&path))?,
                None => {
                    let path = config.expect("clap requires --config without --resume");
                    let mut cfg = RunConfig::load(&path)?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    train(cfg, &out, None)?
                }
            };
            println!(
                "trained {} epochs; test accuracy {:.4}; checkpoint {}",
                summary.epochs,
                summary.test.accuracy,
                summary.checkpoint.display()
            );
        }
        Command::Eval { checkpoint, data, radius } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = ck.config()?;
            let model = ck.model()?;
            let data = PartsDataset::load(&data)?;
            let radius = radius.unwrap_or_else(|| default_radius(data.part_size));
            let m = evaluate_with_radius(&model, &data, cfg.batch_size, radius)?;
            println!("samples {}", m.samples);
            println!("accuracy {:.4}", m.accuracy);
            println!("ce {:.6}", m.ce);
            println!("ld {:.6}", m.ld);
            if let Some(o) = m.mask_overlap {
                println!("mask_overlap {o:.6}");
            }
            if let Some(a) = m.alignment {
                println!("alignment {:.4} (baseline {:.4}, radius {:.2})", a.score, a.baseline, a.radius);
            }
        }
        Command::Gradcheck { module, tol, instances, seed } => {
            let modules: Vec<SuiteModule> = match module {
                ModuleArg::All => SuiteModule::ALL.to_vec(),
                ModuleArg::Local => vec![SuiteModule::Local],
                ModuleArg::Mode => vec![SuiteModule::Mode],
                ModuleArg::Block => vec![SuiteModule::Block],
                ModuleArg::Losses => vec![SuiteModule::Losses],
                ModuleArg::Primitives => vec![SuiteModule::Primitives],
                ModuleArg::Network => vec![SuiteModule::Network],
            };
            let mut failed = 0;
            let mut total = 0;
            for m in modules {
                for r in gradient_suite(m, instances, seed, tol)? {
                    total += 1;
                    if r.passed {
                        println!("PASS {} (max rel {:.2e})", r.label, r.max_rel());
                    } else {
                        failed += 1;
                        print!("{r}");
                    }
                }
            }
            println!("{} of {total} checks passed at tol {tol:e}", total - failed);
            if failed > 0 {
                return Err(HarnessError::Numerical(format!("{failed} gradient checks failed")));
            }
        }
        Command::Flops { preset, config, input, format } => {
            let hw = input.as_deref().map(parse_hw).transpose()?;
            let report = match (preset, config) {
                (Some(p), _) => count_preset(p.parse::<Preset>()?, hw.unwrap_or((256, 128)))?,
                (None, Some(path)) => {
                    let mut cfg = RunConfig::load(&path)?;
                    if let Some((h, w)) = hw {
                        cfg.arch.input = (cfg.arch.input.0, h, w);
                    }
                    count_arch(&cfg.arch)?
                }
                (None, None) => unreachable!("clap requires --preset or --config"),
            };
            match format {
                Format::Text => print!("{}", report.to_text()),
                Format::Csv => print!("{}", report.to_csv()),
            }
        }
        Command::ExportModes {
            checkpoint,
            images,
            out,
            block,
            limit,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.model()?;
            let data = PartsDataset::load(&images)?;
            let s = export_mode_maps(&model, &data, &out, block, limit, ck.config()?.batch_size)?;
            println!(
                "{} heatmaps for {} modes written to {}; aggregate argmax {:?}",
                s.pgm_files,
                s.modes,
                out.display(),
                s.argmax
            );
        }
        Command::GenData { config, out, split } => {
            let cfg = RunConfig::load(&config)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let data = generate_parts_dataset(&cfg.data, split)?;
            data.save(&out)?;
            info!("wrote {} images to {}", data.len(), out.display());
            println!("{} images written to {}", data.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
