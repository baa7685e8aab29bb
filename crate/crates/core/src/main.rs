use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use pmflow::engine::{
    evaluate, export_ribbon, load_checkpoint, stream_procedure, train, PredictionTrace, RunConfig,
};
use pmflow::error::{Error, Result};
use pmflow::synthgen::{generate_all, read_one, write_dataset, GeneratorParams, Split, SplitSizes};

#[derive(Parser)]
#[command(name = "pmflow", version, about = "Online phase recognition and blocking-effectiveness detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        frames_min: Option<usize>,
        #[arg(long)]
        frames_max: Option<usize>,
        #[arg(long)]
        frames_mean: Option<usize>,
        #[arg(long)]
        ineffective_fraction: Option<f64>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Train a model; writes the best checkpoint to OUT and the latest to OUT.last.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Flat `key = value` file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Line-delimited metric records; defaults to CKPT.SPLIT.metrics.jsonl.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Stream one procedure frame by frame.
    Stream {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proc: String,
        /// Stop after this many frames.
        #[arg(long)]
        truncate: Option<usize>,
        /// Trace output; defaults to PROC.trace.jsonl.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Render a trace as a PNG ribbon plus CSV.
    Ribbon {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            out,
            n,
            seed,
            frames_min,
            frames_max,
            frames_mean,
            ineffective_fraction,
            height,
            width,
        } => {
            let d = GeneratorParams::default();
            let params = GeneratorParams {
                n_procedures: n,
                seed,
                frames_min: frames_min.unwrap_or(d.frames_min),
                frames_max: frames_max.unwrap_or(d.frames_max),
                frames_mean: frames_mean.unwrap_or(d.frames_mean),
                ineffective_fraction: ineffective_fraction.unwrap_or(d.ineffective_fraction),
                image_height: height.unwrap_or(d.image_height),
                image_width: width.unwrap_or(d.image_width),
                ..d
            };
            let procs = generate_all(&params)?;
            let manifest = write_dataset(&procs, &out, SplitSizes::proportional(n))?;
            let frames: usize = manifest.entries.iter().map(|e| e.frames).sum();
            println!("wrote {} procedures ({frames} frames) to {}", manifest.entries.len(), out.display());
        }
        Command::Train { data, config, out } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let outcome = train(cfg, &data, &out)?;
            let best = outcome.trainer.state.best_val_jaccard;
            println!(
                "trained {} epochs; best validation macro jaccard {}; checkpoint {}",
                outcome.epochs.len(),
                best.map_or("undef".into(), |v| format!("{v:.2}")),
                out.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            split,
            records,
        } => {
            let report = evaluate(&ckpt, &data, split)?;
            print!("{}", report.to_table());
            let records = records.unwrap_or_else(|| with_suffix(&ckpt, &format!(".{}.metrics.jsonl", split.as_str())));
            write(&records, &report.to_jsonl())?;
            info!("metric records written to {}", records.display());
        }
        Command::Stream {
            ckpt,
            data,
            proc,
            truncate,
            trace,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let procedure = read_one(&data, &proc)?;
            let (t, stats) = stream_procedure(&ckpt.model, &ckpt.bank, &procedure, truncate)?;
            let path = trace.unwrap_or_else(|| PathBuf::from(format!("{proc}.trace.jsonl")));
            t.write(&path)?;
            println!("{}", stats.summary());
            println!("trace written to {}", path.display());
        }
        Command::Ribbon { trace, out } => {
            let t = PredictionTrace::read(&trace)?;
            let labels = t
                .frames
                .iter()
                .map(|f| f.label)
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::data_format(&trace, "trace lacks ground-truth labels"))?;
            let preds: Vec<_> = t.frames.iter().map(|f| f.phase).collect();
            let csv = out.with_extension("csv");
            export_ribbon(&labels, &preds, &out, &csv)?;
            println!("ribbon written to {} and {}", out.display(), csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
