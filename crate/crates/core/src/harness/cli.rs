//! Command-line front end. Flags override values from `--config`.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! failures during a run.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::{load_report, run_experiment, ExperimentConfig, ExperimentKind};
use crate::detect::DetectionThresholds;
use crate::forge::InitMode;
use crate::Error;

#[derive(Debug, Parser)]
#[command(
    name = "masterimg",
    version,
    about = "Forge and detect master images for image-text encoders"
)]
pub struct Cli {
    /// JSON experiment config; other flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Backend descriptor JSON (default: built-in toy encoder).
    #[arg(long, global = true)]
    backend: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory that receives the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize an image toward a set of prompts.
    Forge {
        #[command(flatten)]
        opt: ForgeArgs,
        /// Continue with a long low-rate second stage.
        #[arg(long)]
        extended: bool,
        /// Stand-in image for the master check, one per prompt, in prompt order.
        #[arg(long = "stand-in")]
        stand_ins: Vec<PathBuf>,
        /// Use seeded uniform-noise stand-ins for the master check.
        #[arg(long)]
        random_stand_ins: bool,
    },
    /// Forge once per (lower, upper) cell of a bounds grid.
    SweepBounds {
        #[command(flatten)]
        opt: ForgeArgs,
        /// Comma-separated lower bounds in [-1, 0].
        #[arg(long, value_delimiter = ',')]
        lower_grid: Vec<f64>,
        /// Comma-separated upper bounds in [0, 1].
        #[arg(long, value_delimiter = ',')]
        upper_grid: Vec<f64>,
    },
    /// Run the full objective and its three reduced variants from one start.
    Ablate {
        #[command(flatten)]
        opt: ForgeArgs,
    },
    /// Grayscale-sensitivity verdicts for a batch of images.
    Detect {
        #[command(flatten)]
        prompts: PromptArgs,
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        /// Thresholds JSON as written by `calibrate`.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long, requires = "tau2")]
        tau1: Option<f64>,
        #[arg(long, requires = "tau1")]
        tau2: Option<f64>,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Fit detection thresholds on labeled data.
    Calibrate {
        #[command(flatten)]
        prompts: PromptArgs,
        /// CSV with columns image_path,label,prompt_set_id.
        #[arg(long, conflicts_with = "synthetic")]
        manifest: Option<PathBuf>,
        /// Use this many synthetic samples instead of images.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Compare analytic and finite-difference gradients on random images.
    Gradcheck {
        #[command(flatten)]
        prompts: PromptArgs,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Print the summary of a finished run directory.
    Report { run_dir: PathBuf },
}

#[derive(Debug, Args)]
struct PromptArgs {
    #[arg(long = "prompt")]
    prompts: Vec<String>,
    /// One prompt per line; `#` starts a comment.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ForgeArgs {
    #[command(flatten)]
    prompts: PromptArgs,
    /// Starting image (PNG).
    #[arg(long, conflicts_with = "noise")]
    init: Option<PathBuf>,
    /// Start from seeded uniform noise inside the bounds.
    #[arg(long)]
    noise: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lower: Option<f64>,
    #[arg(long)]
    upper: Option<f64>,
}

/// Paths given on the command line are relative to the working directory,
/// not to the config file.
fn abs(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

fn apply_prompts(cfg: &mut ExperimentConfig, p: PromptArgs) {
    if !p.prompts.is_empty() {
        cfg.prompts = p.prompts;
        cfg.prompt_file = None;
    }
    if let Some(f) = p.prompt_file {
        cfg.prompt_file = Some(abs(f));
        cfg.prompts.clear();
    }
}

fn apply_forge(cfg: &mut ExperimentConfig, a: ForgeArgs) {
    apply_prompts(cfg, a.prompts);
    let o = &mut cfg.optimizer;
    if let Some(init) = a.init {
        cfg.init_image = Some(abs(init));
        o.init_mode = InitMode::FromImage;
    }
    if a.noise {
        cfg.init_image = None;
        o.init_mode = InitMode::UniformNoise;
    }
    if let Some(v) = a.iterations {
        o.iterations = v;
    }
    if let Some(v) = a.lr {
        o.learning_rate = v;
    }
    if let Some(v) = a.momentum {
        o.momentum = v;
    }
    if let Some(v) = a.alpha {
        o.weights.alpha = v;
    }
    if let Some(v) = a.beta {
        o.weights.beta = v;
    }
    if let Some(v) = a.lower {
        o.bounds.lower = v;
    }
    if let Some(v) = a.upper {
        o.bounds.upper = v;
    }
}

fn build_config(cli: Cli) -> Result<Option<ExperimentConfig>, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(b) = cli.backend {
        cfg.backend = Some(abs(b));
    }
    if let Some(s) = cli.seed {
        cfg.optimizer.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = cli.out {
        cfg.out = abs(o);
    }
    let kind = match cli.command {
        Command::Forge {
            opt,
            extended,
            stand_ins,
            random_stand_ins,
        } => {
            apply_forge(&mut cfg, opt);
            cfg.extended_stage |= extended;
            if !stand_ins.is_empty() {
                cfg.stand_ins = stand_ins.into_iter().map(abs).collect();
            }
            cfg.random_stand_ins |= random_stand_ins;
            ExperimentKind::Forge
        }
        Command::SweepBounds {
            opt,
            lower_grid,
            upper_grid,
        } => {
            apply_forge(&mut cfg, opt);
            if !lower_grid.is_empty() {
                cfg.sweep.lower = lower_grid;
            }
            if !upper_grid.is_empty() {
                cfg.sweep.upper = upper_grid;
            }
            ExperimentKind::Sweep
        }
        Command::Ablate { opt } => {
            apply_forge(&mut cfg, opt);
            ExperimentKind::Ablate
        }
        Command::Detect {
            prompts,
            images,
            thresholds,
            tau1,
            tau2,
            theta,
        } => {
            apply_prompts(&mut cfg, prompts);
            if !images.is_empty() {
                cfg.detect.images = images.into_iter().map(abs).collect();
            }
            if let Some(t) = thresholds {
                cfg.detect.thresholds_file = Some(abs(t));
                cfg.detect.thresholds = None;
            }
            if let (Some(tau1), Some(tau2)) = (tau1, tau2) {
                cfg.detect.thresholds = Some(DetectionThresholds { tau1, tau2, theta });
                cfg.detect.thresholds_file = None;
            } else if let (Some(theta), Some(t)) = (theta, cfg.detect.thresholds.as_mut()) {
                t.theta = Some(theta);
            }
            ExperimentKind::Detect
        }
        Command::Calibrate {
            prompts,
            manifest,
            synthetic,
            sigma,
        } => {
            apply_prompts(&mut cfg, prompts);
            if let Some(m) = manifest {
                cfg.calibrate.manifest = Some(abs(m));
                cfg.calibrate.synthetic_samples = None;
            }
            if let Some(n) = synthetic {
                cfg.calibrate.synthetic_samples = Some(n);
                cfg.calibrate.manifest = None;
            }
            if let Some(s) = sigma {
                cfg.calibrate.sigma = s;
            }
            ExperimentKind::Calibrate
        }
        Command::Gradcheck { prompts, images, eps } => {
            apply_prompts(&mut cfg, prompts);
            if let Some(n) = images {
                cfg.gradcheck.images = n;
            }
            if let Some(e) = eps {
                cfg.gradcheck.eps = e;
            }
            ExperimentKind::Gradcheck
        }
        Command::Report { run_dir } => {
            let bundle = load_report(&run_dir)?;
            emit(&bundle.summary());
            return Ok(None);
        }
    };
    if let Some(k) = cfg.kind {
        if k != kind {
            return Err(Error::Config(vec![format!(
                "config is for {} but the {} command was given",
                k.name(),
                kind.name()
            )]));
        }
    }
    cfg.kind = Some(kind);
    Ok(Some(cfg))
}

/// Print to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn fail(e: &Error) -> i32 {
    eprintln!("error: {e}");
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match build_config(cli) {
        Ok(Some(cfg)) => cfg,
        Ok(None) => return 0,
        Err(e) => return fail(&e),
    };
    match run_experiment(cfg) {
        Ok(out) => {
            emit(&format!("{}\nwrote {}", out.bundle.summary(), out.dir.display()));
            0
        }
        Err(e) => fail(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> ExperimentConfig {
        let cli = Cli::try_parse_from(std::iter::once("masterimg").chain(args.iter().copied())).unwrap();
        build_config(cli).unwrap().unwrap()
    }

    #[test]
    fn forge_flags_override_defaults() {
        let cfg = parse(&[
            "forge", "--prompt", "a cat", "--prompt", "a dog", "--noise", "--lr", "0.5", "--lower", "-0.5", "--seed",
            "9",
        ]);
        assert_eq!(cfg.kind, Some(ExperimentKind::Forge));
        assert_eq!(cfg.prompts, ["a cat", "a dog"]);
        assert_eq!(cfg.optimizer.init_mode, InitMode::UniformNoise);
        assert_eq!(cfg.optimizer.learning_rate, 0.5);
        assert_eq!(cfg.optimizer.bounds.lower, -0.5);
        assert_eq!(cfg.optimizer.seed, 9);
    }

    #[test]
    fn sweep_grids_are_comma_separated() {
        let cfg = parse(&["sweep-bounds", "--lower-grid=-0.2,0", "--upper-grid", "0.8,1"]);
        assert_eq!(cfg.sweep.lower, [-0.2, 0.0]);
        assert_eq!(cfg.sweep.upper, [0.8, 1.0]);
    }

    #[test]
    fn inline_thresholds() {
        let cfg = parse(&["detect", "--tau1", "0.1", "--tau2", "0.3", "--theta", "0.2"]);
        assert_eq!(
            cfg.detect.thresholds,
            Some(DetectionThresholds {
                tau1: 0.1,
                tau2: 0.3,
                theta: Some(0.2)
            })
        );
    }

    #[test]
    fn bad_flags_exit_with_validation_code() {
        assert_eq!(main_with_args(["masterimg", "forge", "--lr", "fast"]), 1);
    }
}
