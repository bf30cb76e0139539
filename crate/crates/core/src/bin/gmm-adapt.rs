use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmm_adapt::metrics::MemoryModelInputs;
use gmm_adapt::run::{self, RunConfig, SweepParam};
use gmm_adapt::Error;

#[derive(Parser)]
#[command(name = "gmm-adapt", version, about = "Online GMM pseudo-labeling and adaptation on synthetic shifted streams")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $GMM_ADAPT_OUT/<command>-seed<seed>, or runs/...).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides as `--key value`; nested keys use dots, e.g. `--domain.class-sep 3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the source model and store its checkpoint.
    TrainSource(ConfigArgs),
    /// Run online adaptation over the target stream.
    Adapt {
        /// Directory written by `train-source`; trains from scratch when absent.
        #[arg(long)]
        source: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sweep one hyperparameter over several values and seeds.
    Sweep {
        /// One of fd_r, p_reject, n_init, batch_size (N_b), lambda, temperature, lr.
        #[arg(long)]
        param: String,
        /// Comma separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// For batch-size sweeps, also run with n_init scaled to keep n_init * batch_size fixed.
        #[arg(long)]
        compensate: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Memory comparison table of the mixture state against a feature queue and a teacher model.
    Memory {
        #[arg(long, default_value_t = 256)]
        fd: usize,
        #[arg(long, default_value_t = 64)]
        fd_r: usize,
        #[arg(long, default_value_t = 55388)]
        queue_len: usize,
        #[arg(long, default_value_t = 24_000_000)]
        teacher_params: usize,
        #[arg(long, default_value_t = 1)]
        classes_from: usize,
        #[arg(long, default_value_t = 345)]
        classes_to: usize,
        /// CSV output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute summary.json of a stored run from its metrics log.
    Replay {
        dir: PathBuf,
        /// Overwrite summary.json with the recomputed one.
        #[arg(long)]
        write: bool,
    },
}

fn parse_overrides(raw: &[String]) -> gmm_adapt::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, got {arg}")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("missing value for --{key}")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn load_config(args: &ConfigArgs) -> gmm_adapt::Result<RunConfig> {
    let base = match &args.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let cfg = RunConfig::with_overrides(base.as_deref(), &parse_overrides(&args.overrides)?)
        .map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(args: &ConfigArgs, cmd: &str, cfg: &RunConfig) -> PathBuf {
    args.out.clone().unwrap_or_else(|| run::default_out_root().join(format!("{cmd}-seed{}", cfg.seed)))
}

fn emit(text: &str) -> gmm_adapt::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn execute(cli: Cli) -> gmm_adapt::Result<()> {
    match cli.cmd {
        Cmd::TrainSource(args) => {
            let cfg = load_config(&args)?;
            let dir = out_dir(&args, "source", &cfg);
            let source = run::train_source_model(&cfg)?;
            run::write_source_dir(&dir, &cfg, &source)?;
            emit(&format!("holdout accuracy {:.4}\nwrote {}\n", source.holdout_accuracy, dir.display()))?;
        }
        Cmd::Adapt { source, cfg: args } => {
            let cfg = load_config(&args)?;
            let dir = out_dir(&args, "adapt", &cfg);
            let src = match &source {
                Some(p) => run::load_source_dir(p)?,
                None => run::train_source_model(&cfg)?,
            };
            let outcome = run::adapt_with_source(&cfg, &src)?;
            run::write_run_dir(&dir, &outcome)?;
            let s = &outcome.summary;
            emit(&format!(
                "h_score {} accuracy {} tau_k {:.4} tau_u {:.4}\n",
                fmt_opt(s.h_score),
                fmt_opt(s.accuracy),
                s.tau_k,
                s.tau_u
            ))?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            emit(&format!("wrote {}\n", dir.display()))?;
        }
        Cmd::Sweep { param, values, repeats, compensate, cfg: args } => {
            let cfg = load_config(&args)?;
            let param: SweepParam = param.parse()?;
            let dir = out_dir(&args, "sweep", &cfg);
            let rows = run::run_sweep(&cfg, param, &values, repeats, compensate)?;
            fs::create_dir_all(&dir)?;
            let csv = run::sweep_csv(&rows);
            fs::write(dir.join("sweep.csv"), &csv)?;
            emit(&csv)?;
        }
        Cmd::Memory { fd, fd_r, queue_len, teacher_params, classes_from, classes_to, out } => {
            let base = MemoryModelInputs { fd, fd_r, n_classes: classes_from.max(1), queue_len, teacher_params };
            let rows = run::run_memory(&base, classes_from..=classes_to)?;
            let csv = run::memory_csv(&rows);
            match out {
                Some(p) => write_file(&p, &csv)?,
                None => emit(&csv)?,
            }
        }
        Cmd::Replay { dir, write } => {
            let r = run::replay(&dir)?;
            if write {
                write_file(&dir.join(run::files::SUMMARY), &r.rendered)?;
            }
            emit(&r.rendered)?;
            if !r.matches_stored && !write {
                eprintln!("replayed summary differs from stored {}", run::files::SUMMARY);
                return Err(Error::Checkpoint("summary mismatch".into()));
            }
        }
    }
    Ok(())
}

fn write_file(p: &Path, text: &str) -> gmm_adapt::Result<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(fs::write(p, text)?)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidSplit(_) => 2,
        Error::Numerical { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::NonFiniteInput
        | Error::NonFiniteGradient => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
