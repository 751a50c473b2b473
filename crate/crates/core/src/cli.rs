//! The `qdiff` command-line tool.
//!
//! Every subcommand reads an optional `--config` file, takes its master seed
//! from `--seed` (falling back to the config's `seed`), and writes only into
//! `--out`. Failures print a single `error kind=<kind> msg=<quoted text>` line
//! on stderr and exit with status 1; malformed invocations exit with 2.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{ActivationProfile, CurveMode, QualityReport, QUALITY_HEADER};
use crate::calib::BlockReport;
use crate::diffusion::train::MOVING_AVERAGE_WINDOW;
use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::io::csv::{
    final_samples_table, points_from_samples, samples_table, Table, LOSS_HEADER, SAMPLES_HEADER,
};
use crate::io::serialize::{load_any, load_model, save_calibration, save_model, save_quantized};
use crate::run;

pub const CALIB_REPORT_HEADER: &[&str] = &[
    "phase",
    "block",
    "initial_mse",
    "final_mse",
    "held_initial_mse",
    "held_final_mse",
    "kept_initial",
];
pub const LAYER_PROFILE_HEADER: &[&str] = &["layer", "min", "p1", "p99", "max"];

#[derive(Parser, Debug)]
#[command(
    name = "qdiff",
    version,
    about = "Timestep-aware post-training quantization of a toy 2-D diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Key-value run configuration; unset keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the noise predictor: writes model.qdck, loss.csv and config.cfg.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Quantize and calibrate a trained model: writes quantized.qdck,
    /// calibration.qdck and calib_report.csv.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Full-precision model checkpoint.
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Draw samples from a full-precision or quantized checkpoint: writes
    /// samples.csv.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Dump every intermediate state, not only the final samples.
        #[arg(long)]
        record: bool,
    },
    /// Per-timestep error of one checkpoint against another: writes mse.csv.
    ProfileMse {
        #[command(flatten)]
        common: Common,
        /// Reference (full-precision) checkpoint.
        #[arg(long, value_name = "PATH")]
        fp: PathBuf,
        /// Checkpoint under test.
        #[arg(long, value_name = "PATH")]
        quant: PathBuf,
        /// `closed-loop` (separate trajectories) or `open-loop` (shared
        /// full-precision states).
        #[arg(long, default_value = "closed-loop")]
        mode: CurveMode,
    },
    /// Activation ranges per layer and step: writes profile.csv and
    /// profile_layers.csv.
    ProfileAct {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Compare no calibration, single-step and uniform-interval calibration:
    /// writes compare.csv.
    CompareCalib {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Score samples against reference points: writes quality.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Samples CSV; only rows with t = 0 are scored.
        #[arg(long, value_name = "PATH")]
        samples: PathBuf,
        /// Reference samples CSV; drawn from the configured dataset when
        /// omitted.
        #[arg(long, value_name = "PATH")]
        reference: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::Calibrate { common, .. }
            | Command::Sample { common, .. }
            | Command::ProfileMse { common, .. }
            | Command::ProfileAct { common, .. }
            | Command::CompareCalib { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// `error kind=<kind> msg="<text>"` with the message on one line.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error kind={} msg={:?}", e.kind(), msg)
}

fn load_config(common: &Common) -> Result<(RunConfig, u64)> {
    let cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok((cfg, seed))
}

fn out_dir(common: &Common) -> Result<&Path> {
    let dir = common.out.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn execute(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let (cfg, seed) = load_config(common)?;
    match cmd {
        Command::Train { .. } => {
            let out = out_dir(common)?;
            let report = run::train_model(&cfg, seed)?;
            let mut table = Table::new(LOSS_HEADER);
            for (i, l) in report.losses.iter().enumerate() {
                let ma = crate::diffusion::train::moving_average_tail(
                    &report.losses[..=i],
                    MOVING_AVERAGE_WINDOW,
                );
                table.push(vec![(i + 1).to_string(), l.to_string(), ma.to_string()]);
            }
            save_model(&out.join("model.qdck"), &report.model)?;
            table.save(&out.join("loss.csv"))?;
            let mut rendered = cfg.render();
            rendered.push_str(&format!("# seed used: {seed}\n"));
            crate::io::checkpoint::write_atomic(&out.join("config.cfg"), rendered.as_bytes())?;
            println!(
                "trained {} steps, final moving-average loss {:.4}",
                report.losses.len(),
                report.final_moving_average()
            );
        }
        Command::Calibrate { model, .. } => {
            let fp = load_model(model)?;
            let out = out_dir(common)?;
            println!(
                "calibration set: T_sample={} c={} n={} N={} strategy={}",
                cfg.t_sample,
                cfg.calib_c,
                cfg.calib_n,
                cfg.derived_n(),
                cfg.calib_strategy
            );
            let result = run::calibrate_model(&fp, &cfg, seed)?;
            let mut table = Table::new(CALIB_REPORT_HEADER);
            if let Some(report) = &result.report {
                let rows = |phase: &str, blocks: &[BlockReport], table: &mut Table| {
                    for b in blocks {
                        table.push(vec![
                            phase.to_string(),
                            b.block.clone(),
                            b.initial_mse.to_string(),
                            b.final_mse.to_string(),
                            b.held_initial_mse.to_string(),
                            b.held_final_mse.to_string(),
                            b.kept_initial.to_string(),
                        ]);
                    }
                };
                rows("weights", &report.weight_blocks, &mut table);
                rows("activations", &report.act_blocks, &mut table);
            }
            save_quantized(&out.join("quantized.qdck"), &result.model)?;
            save_calibration(&out.join("calibration.qdck"), &result.set)?;
            table.save(&out.join("calib_report.csv"))?;
        }
        Command::Sample { model, record, .. } => {
            let m = load_any(model)?;
            let out = out_dir(common)?;
            let traj = run::sample_model(&m, &cfg, seed, *record)?;
            let table = if *record {
                let mut rows = Vec::new();
                for (t, x) in &traj.states {
                    for i in 0..x.rows() {
                        rows.push((i, *t, [x.row(i)[0], x.row(i)[1]]));
                    }
                }
                let x = &traj.final_sample;
                for i in 0..x.rows() {
                    rows.push((i, 0, [x.row(i)[0], x.row(i)[1]]));
                }
                rows.sort_by_key(|r| r.0);
                samples_table(rows)
            } else {
                final_samples_table(&traj.final_sample)?
            };
            table.save(&out.join("samples.csv"))?;
        }
        Command::ProfileMse {
            fp, quant, mode, ..
        } => {
            let a = load_any(fp)?;
            let b = load_any(quant)?;
            let out = out_dir(common)?;
            let curve = run::error_curve(&a, &b, &cfg, seed, *mode)?;
            curve.to_table().save(&out.join("mse.csv"))?;
        }
        Command::ProfileAct { model, .. } => {
            let m = load_any(model)?;
            let out = out_dir(common)?;
            let profile = run::profile_activations(m.base(), &cfg, seed)?;
            profile.to_table().save(&out.join("profile.csv"))?;
            layer_table(&profile).save(&out.join("profile_layers.csv"))?;
            if let Some((layer, t_hi, t_lo, ratio)) = profile.max_range_ratio() {
                println!("widest range spread: {layer} is {ratio:.2}x wider at t={t_hi} than at t={t_lo}");
            }
        }
        Command::CompareCalib { model, .. } => {
            let fp = load_model(model)?;
            let out = out_dir(common)?;
            let cmp = run::compare(&fp, &cfg, seed)?;
            cmp.to_table().save(&out.join("compare.csv"))?;
            println!("fp32 energy distance {}", cmp.baseline.energy_distance);
        }
        Command::Eval {
            samples, reference, ..
        } => {
            let s = points_from_samples(&Table::load(samples, SAMPLES_HEADER)?, Some(0))?;
            let r = match reference {
                Some(p) => points_from_samples(&Table::load(p, SAMPLES_HEADER)?, Some(0))?,
                None => run::reference_points(&cfg, seed),
            };
            let out = out_dir(common)?;
            let report = run::evaluate_samples(&s, &r, &cfg)?;
            report.to_table().save(&out.join("quality.csv"))?;
            println!(
                "energy distance {} min mode coverage {}",
                report.energy_distance,
                report.coverage_min()
            );
        }
    }
    Ok(())
}

fn layer_table(profile: &ActivationProfile) -> Table {
    let mut t = Table::new(LAYER_PROFILE_HEADER);
    for a in profile.aggregate() {
        t.push(vec![
            a.layer,
            a.min.to_string(),
            a.p1.to_string(),
            a.p99.to_string(),
            a.max.to_string(),
        ]);
    }
    t
}

/// Reads a quality CSV written by `eval`.
pub fn load_quality(path: &Path) -> Result<QualityReport> {
    QualityReport::from_table(&Table::load(path, QUALITY_HEADER)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_cli(["qdiff", "bogus"]), 2);
        assert_eq!(run_cli(["qdiff", "train", "--nope"]), 2);
        assert_eq!(run_cli(["qdiff"]), 2);
    }

    #[test]
    fn runtime_errors_exit_one_with_one_line() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let missing = dir.path().join("missing.qdck");
        let code = run_cli([
            "qdiff".as_ref(),
            "sample".as_ref(),
            "--model".as_ref(),
            missing.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert_eq!(code, 1);
        let e = error_line(&Error::Config("bad\nvalue".into()));
        assert_eq!(e.lines().count(), 1);
        assert!(e.starts_with("error kind=config msg="));
    }
}
