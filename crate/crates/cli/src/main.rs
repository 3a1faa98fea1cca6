//! `quarc`: pretraining, coreset QAT runs and the diagnostic analyses.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or format error,
//! 4 numeric failure.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quarc_core::{Error, Result};

use crate::config::Config;
use crate::output::OutDir;

#[derive(Parser)]
#[command(name = "quarc", version, about = "Coreset quantization-aware training experiments")]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: runs/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write into an existing, non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FpArg {
    /// Full-precision checkpoint; falls back to `fp_checkpoint` in the config.
    #[arg(long)]
    fp: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision model with cross-entropy.
    Pretrain,
    /// Coreset QAT from a full-precision checkpoint.
    Train {
        #[command(flatten)]
        fp: FpArg,
        /// Separate teacher checkpoint; the full-precision model otherwise.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Run every variant of the ablation plan over all seeds.
    Ablate {
        #[command(flatten)]
        fp: FpArg,
    },
    /// Rank correlation between coreset mean RES and trained accuracy.
    Correlate {
        #[command(flatten)]
        fp: FpArg,
        /// Quantized checkpoint whose RES orders the samples.
        #[arg(long)]
        quantized: Option<PathBuf>,
    },
    /// Per-tap KL between student and full-precision intermediate outputs.
    LayerKl {
        #[command(flatten)]
        fp: FpArg,
        /// Student checkpoint; repeatable. KD and KD+CLC students are trained when absent.
        #[arg(long = "student")]
        students: Vec<PathBuf>,
    },
    /// Wall-clock and pass counts of full-data vs coreset training.
    Bench {
        #[command(flatten)]
        fp: FpArg,
    },
    /// Write per-sample EVS, DS, RES and combined scores as CSV.
    ScoresDump {
        #[command(flatten)]
        fp: FpArg,
        /// Quantized student; a fresh calibrated clone otherwise.
        #[arg(long)]
        student: Option<PathBuf>,
        /// Epoch used for the α schedule.
        #[arg(long)]
        epoch: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Train { .. } => "train",
            Command::Ablate { .. } => "ablate",
            Command::Correlate { .. } => "correlate",
            Command::LayerKl { .. } => "layer-kl",
            Command::Bench { .. } => "bench",
            Command::ScoresDump { .. } => "scores-dump",
        }
    }

    fn fp_arg(&self) -> Option<&FpArg> {
        match self {
            Command::Pretrain => None,
            Command::Train { fp, .. }
            | Command::Ablate { fp }
            | Command::Correlate { fp, .. }
            | Command::LayerKl { fp, .. }
            | Command::Bench { fp }
            | Command::ScoresDump { fp, .. } => Some(fp),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_numeric() => 4,
        _ => 3,
    }
}

fn resolve_fp(cmd: &Command, cfg: &Config) -> Result<Option<PathBuf>> {
    let Some(arg) = cmd.fp_arg() else {
        return Ok(None);
    };
    let path = arg.fp.clone().or_else(|| cfg.fp_checkpoint.clone()).ok_or_else(|| {
        Error::Config(format!(
            "{} needs a full-precision checkpoint: pass --fp or set fp_checkpoint",
            cmd.name()
        ))
    })?;
    if !path.is_file() {
        return Err(Error::Config(format!(
            "full-precision checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(Some(path))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate()?;
    if let Command::Ablate { .. } = cli.command {
        commands::ablation_plan(&cfg)?;
    }
    let fp = resolve_fp(&cli.command, &cfg)?;
    let fp = fp.as_deref().unwrap_or(Path::new(""));
    let out_root = cli
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(cli.command.name()));
    let out = OutDir::prepare(&out_root, cli.force)?;
    let resolved = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    out.write("config.toml", &resolved)?;

    match &cli.command {
        Command::Pretrain => commands::pretrain(&cfg, &out),
        Command::Train { teacher, .. } => commands::train(&cfg, fp, teacher.as_deref(), &out),
        Command::Ablate { .. } => commands::ablate(&cfg, fp, &out),
        Command::Correlate { quantized, .. } => commands::correlate_cmd(&cfg, fp, quantized.as_deref(), &out),
        Command::LayerKl { students, .. } => {
            let list = if students.is_empty() {
                &cfg.layer_kl.students
            } else {
                students
            };
            commands::layer_kl_cmd(&cfg, fp, list, &out)
        }
        Command::Bench { .. } => commands::bench_cmd(&cfg, fp, &out),
        Command::ScoresDump { student, epoch, .. } => {
            let student = student.as_deref().or(cfg.scores.student_checkpoint.as_deref());
            commands::scores_dump(&cfg, fp, student, epoch.unwrap_or(cfg.scores.epoch), &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 3);
        assert_eq!(exit_code(&Error::Shape("x".into())), 3);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 4);
        let d = Error::Diverged {
            epoch: 1,
            detail: "nan".into(),
        };
        assert_eq!(exit_code(&d), 4);
    }

    #[test]
    fn global_flags_follow_the_subcommand() {
        let cli = Cli::try_parse_from(["quarc", "train", "--fp", "a.json", "--seed", "3", "--force"]).unwrap();
        assert_eq!(cli.seed, Some(3));
        assert!(cli.force);
        assert_eq!(cli.command.fp_arg().unwrap().fp.as_deref(), Some(Path::new("a.json")));
    }
}
