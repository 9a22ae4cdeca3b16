//! `optolev`: stability analysis, analytic Bode tables and virtual
//! torsion-pendulum measurements of the transversal optical spring.
//!
//! Exit status is 0 on success, 1 on a physics-level failure (unstable
//! configuration, inconsistent measurement, failed simulation or fit) and
//! 2 on a configuration or usage error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use optolev::config::ExperimentConfig;
use optolev::experiment::{self, BodeTarget};
use optolev::feedback::simulate_point;

#[derive(Debug, Parser)]
#[command(name = "optolev", version, about = "Virtual optical-spring experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; applied on top of --profile when both are given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in parameter set (paper, toy-stable).
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent sweep points.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stability matrix of the levitated mirror.
    Stability,
    /// Analytic response of a block or of the loop on a log grid.
    Bode {
        #[arg(long, value_enum, default_value_t = Target::OpenLoop)]
        target: Target,
        #[arg(long, default_value_t = 1e-3)]
        f_min: f64,
        #[arg(long, default_value_t = 100.0)]
        f_max: f64,
        #[arg(long, default_value_t = 200)]
        n_points: usize,
    },
    /// Laser-off and laser-on measurement and the inferred spring constant.
    Measure {
        /// Intracavity power in W; defaults to the configured power.
        #[arg(long)]
        power: Option<f64>,
        /// Also write the laser-on record at this injection frequency (Hz).
        #[arg(long)]
        timeseries: Option<f64>,
    },
    /// Measurement over the configured power list against the prediction.
    Sweep,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Target {
    Filter,
    Pendulum,
    Effective,
    OpenLoop,
    Suppression,
}

impl From<Target> for BodeTarget {
    fn from(t: Target) -> Self {
        match t {
            Target::Filter => BodeTarget::Filter,
            Target::Pendulum => BodeTarget::Pendulum,
            Target::Effective => BodeTarget::Effective,
            Target::OpenLoop => BodeTarget::OpenLoop,
            Target::Suppression => BodeTarget::Suppression,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, optolev::Error> {
    let text = match &common.config {
        Some(path) => Some(std::fs::read_to_string(path).map_err(|e| optolev::Error::Config {
            section: String::new(),
            key: String::new(),
            message: format!("cannot read {}: {e}", path.display()),
        })?),
        None => None,
    };
    let mut cfg = match (&common.profile, text) {
        (Some(name), Some(text)) => ExperimentConfig::profile_with_overlay(name, &text)?,
        (Some(name), None) => ExperimentConfig::profile(name)?,
        (None, Some(text)) => ExperimentConfig::from_toml_str(&text)?,
        (None, None) => {
            return Err(optolev::Error::Config {
                section: String::new(),
                key: String::new(),
                message: "one of --config or --profile is required".into(),
            })
        }
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

/// Writes `name` in `dir` through a temporary file and a rename.
fn write_atomic(dir: &Path, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<PathBuf> {
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
    body(&mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", tmp.display()))?;
    drop(w);
    std::fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(path)
}

fn write_measure_files(dir: &Path, prefix: &str, m: &experiment::MeasureOutcome) -> Result<()> {
    for (label, cond) in [("off", &m.reference), ("on", &m.laser_on)] {
        for r in &cond.responses {
            write_atomic(dir, &format!("{prefix}response_{label}_r{}.csv", r.repeat), |w| r.write_csv(w))?;
        }
        write_atomic(dir, &format!("{prefix}fits_{label}.csv"), |w| cond.write_fits_csv(w))?;
    }
    Ok(())
}

/// Runs the command; `Ok(false)` is a physics-level negative verdict.
fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(&cli.common)?;
    let seed = cfg.seed();
    let Format::Csv = cli.common.format;
    let out = &cli.common.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(out, "config.toml", |w| w.write_all(cfg.to_toml_string().as_bytes()))?;

    match &cli.command {
        Command::Stability => {
            let report = experiment::stability(&cfg)?;
            write_atomic(out, "stability.csv", |w| report.write_csv(w))?;
            println!(
                "{} (k_x = {:.4e} N/m, k_z = {:.4e} N/m, k_beta = {:.4e} N m/rad)",
                report.summary(),
                report.matrix.k_x,
                report.matrix.k_z,
                report.matrix.k_beta
            );
            Ok(report.verdict.stable)
        }
        Command::Bode {
            target,
            f_min,
            f_max,
            n_points,
        } => {
            let fr = experiment::bode(&cfg, (*target).into(), *f_min, *f_max, *n_points)?;
            let name = format!("bode_{}.csv", target.to_possible_value().expect("named").get_name());
            let path = write_atomic(out, &name, |w| fr.write_csv(w))?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Measure { power, timeseries } => {
            let m = experiment::measure(&cfg, *power, seed)?;
            write_measure_files(out, "", &m)?;
            write_atomic(out, "spring.csv", |w| m.write_csv(w))?;
            write_atomic(out, "summary.txt", |w| m.write_summary(w))?;
            if let Some(f) = timeseries {
                let lp = cfg.loop_config(m.k_injected)?;
                let ts = simulate_point(&lp, *f, &cfg.measurement_plan(seed)?, seed)?;
                write_atomic(out, "timeseries.csv", |w| ts.write_csv(w))?;
            }
            m.write_summary(std::io::stdout().lock())?;
            Ok(m.consistent())
        }
        Command::Sweep => {
            let s = experiment::sweep(&cfg, seed)?;
            for (i, m) in s.measurements.iter().enumerate() {
                write_measure_files(out, &format!("p{i}_"), m)?;
            }
            write_atomic(out, "sweep_points.csv", |w| s.write_points_csv(w))?;
            write_atomic(out, "sweep.csv", |w| s.report.write_csv(w))?;
            write_atomic(out, "summary.txt", |w| s.report.write_summary(w))?;
            s.report.write_summary(std::io::stdout().lock())?;
            Ok(s.report.all_consistent)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<optolev::Error>() {
        Some(err) if err.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
