use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use logo_ssl::cli;
use logo_ssl::config::EvalMode;

#[derive(Parser)]
#[command(name = "logo", version, about = "Self-supervised training with local/global crops and a learned local affinity")]
struct Args {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<command>-<unix time>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seeds training, initialization, probes and crop sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder; `key=value` arguments override the config.
    Train {
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint's frozen features.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        overrides: Vec<String>,
    },
    /// Compare cosine and regressor similarity of local crops.
    Affinity {
        checkpoint: PathBuf,
        /// Image files followed by optional `key=value` overrides.
        #[arg(required = true)]
        inputs: Vec<String>,
    },
    /// Chart KNN accuracy against step for one or more metrics logs.
    Plot {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
    /// Write the synthetic dataset as an image folder.
    MakeSynth { overrides: Vec<String> },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Knn,
    Linear,
}

fn split_inputs(inputs: Vec<String>) -> (Vec<PathBuf>, Vec<String>) {
    let (overrides, paths): (Vec<String>, Vec<String>) = inputs.into_iter().partition(|a| a.contains('='));
    (paths.into_iter().map(PathBuf::from).collect(), overrides)
}

fn run(args: Args) -> anyhow::Result<()> {
    let resolve = |overrides: &[String]| cli::resolve_config(args.config.as_deref(), overrides, args.seed);
    let dir = |name: &str| cli::run_dir(args.out.as_deref(), name);
    match args.command {
        Command::Train { ref resume, ref overrides } => {
            let cfg = resolve(overrides)?;
            let dir = dir("train")?;
            let s = cli::cmd_train(&cfg, &dir, resume.as_deref())?;
            match s.final_knn {
                Some(k) => println!("trained {} steps, knn_top1={:.2}, outputs in {}", s.steps, 100.0 * k, s.dir.display()),
                None => println!("trained {} steps, outputs in {}", s.steps, s.dir.display()),
            }
        }
        Command::Eval { ref checkpoint, mode, ref overrides } => {
            let mut cfg = resolve(overrides)?;
            if let Some(m) = mode {
                cfg.eval_mode = match m {
                    Mode::Knn => EvalMode::Knn,
                    Mode::Linear => EvalMode::Linear,
                };
            }
            let acc = cli::cmd_eval(&cfg, checkpoint, &dir("eval")?)?;
            println!("{}", cli::eval_line(cfg.eval_mode, acc));
        }
        Command::Affinity { ref checkpoint, ref inputs } => {
            let (images, overrides) = split_inputs(inputs.clone());
            let cfg = resolve(&overrides)?;
            let report = cli::cmd_affinity(&cfg, checkpoint, &images, &dir("affinity")?)?;
            print!("{}", report.to_text());
        }
        Command::Plot { ref logs } => {
            let (chart, warnings) = cli::cmd_plot(logs, &dir("plot")?)?;
            for w in warnings {
                log::warn!("{w}");
            }
            println!("{}", chart.display());
        }
        Command::MakeSynth { ref overrides } => {
            let cfg = resolve(overrides)?;
            let out = dir("synth")?;
            let n = cli::cmd_make_synth(&cfg, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {n} images to {}", Path::new(&out).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<logo_ssl::Error>().map_or(1, cli::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
