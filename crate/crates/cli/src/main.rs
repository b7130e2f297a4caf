//! Command-line driver for the identification pipeline.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 3 for numerical
//! failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lrid::harness::{
    self, parse_n_list, parse_sigma_list, read_series_csv, series_to_csv, sidecar_json,
    sweep_to_csv, trace_to_csv, trials_to_csv, RunConfig, SeriesMeta,
};
use lrid::spectral::{coherence, dpl_diagnostic, FrequencyGrid};
use lrid::Error;

#[derive(Parser)]
#[command(
    name = "lrid",
    about = "Identification of low-rank stochastic processes from noisy measurements",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a measurement record and write it as CSV with a JSON sidecar.
    Simulate(SimulateArgs),
    /// Run both estimation paths on a simulated record and write the report.
    Estimate(EstimateArgs),
    /// Monte-Carlo experiment: per-trial table plus aggregate report.
    Mc(McArgs),
    /// Sensitivity sweep over noise levels and record lengths.
    Sweep(SweepArgs),
    /// Structural diagnostics.
    Diag(DiagArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Output CSV path; the sidecar goes to `<out>.meta.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Series CSV produced by `simulate` (its `.meta.json` sidecar is
    /// required to rebuild the ground truth for the fit metrics).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Optional CSV destination for the likelihood solver trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the trial count from the config.
    #[arg(long)]
    trials: Option<usize>,
    /// Per-trial CSV table.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Optional CSV with estimated-vs-true coherence curves of the latent
    /// model averaged over trials.
    #[arg(long)]
    coherence: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated sigmas or log-spaced shorthand `a:b:log:k`.
    #[arg(long)]
    sigma: Option<String>,
    /// Comma-separated record lengths.
    #[arg(long = "N")]
    n_list: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagArgs {
    #[command(subcommand)]
    what: DiagCommand,
}

#[derive(Subcommand)]
enum DiagCommand {
    /// Diagonal-plus-low-rank structure of the measurement spectrum.
    Dpl {
        #[arg(long)]
        config: PathBuf,
        /// Number of frequency grid points.
        #[arg(long, default_value_t = 512)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    RunConfig::from_json(&read_text(path)?)
}

fn sidecar_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(args) => {
            let config = load_config(&args.config)?;
            let resolved = config.resolve()?;
            let record = lrid::simgen::simulate(&resolved.system, config.n, args.seed, config.burn_in)?;
            write_text(&args.out, &series_to_csv(&record.zeta))?;
            let meta = SeriesMeta {
                seed: args.seed,
                n: config.n,
                burn_in: config.burn_in,
                sigma: resolved.sigma,
            };
            write_text(&sidecar_path(&args.out), &sidecar_json(&meta))?;
            eprintln!(
                "wrote {} samples of {} channels to {}",
                config.n,
                resolved.system.m() + resolved.system.l(),
                args.out.display()
            );
            Ok(())
        }
        Command::Estimate(args) => {
            let mut config = load_config(&args.config)?;
            let meta_path = sidecar_path(&args.data);
            let meta: SeriesMeta = serde_json::from_str(&read_text(&meta_path)?)
                .map_err(|e| Error::Config(format!("bad sidecar {}: {e}", meta_path.display())))?;
            let zeta = read_series_csv(&read_text(&args.data)?)?;
            if zeta.nrows() != meta.n {
                return Err(Error::Config(format!(
                    "data has {} rows but the sidecar says {}",
                    zeta.nrows(),
                    meta.n
                )));
            }
            config.n = meta.n;
            config.burn_in = meta.burn_in;
            config.sigma = Some(meta.sigma);
            let resolved = config.resolve()?;
            let channels = resolved.system.m() + resolved.system.l();
            if zeta.ncols() != channels {
                return Err(Error::Config(format!(
                    "data has {} channels but the configured system has {channels}",
                    zeta.ncols()
                )));
            }
            let truth =
                lrid::simgen::simulate(&resolved.system, meta.n, meta.seed, meta.burn_in)?;
            if (truth.zeta.clone() - &zeta).norm() > 1e-9 * (1.0 + zeta.norm()) {
                return Err(Error::Config(
                    "data does not match the sidecar's seed under this config".into(),
                ));
            }
            let out = harness::estimate_from_data(&config, &resolved, &truth, meta.seed)?;
            write_text(
                &args.report,
                &serde_json::to_string_pretty(&out.report)
                    .map_err(|e| Error::Io(e.to_string()))?,
            )?;
            if let Some(trace) = args.trace {
                write_text(&trace, &trace_to_csv(&out.ml_trace))?;
            }
            eprintln!(
                "fit_H {:.2}, fit_yl {:.2}, fit_ym {:.2}, err_phi {:.3e}",
                out.report.fit_h, out.report.fit_yl, out.report.fit_ym, out.report.err_phi
            );
            Ok(())
        }
        Command::Mc(args) => {
            let mut config = load_config(&args.config)?;
            if let Some(trials) = args.trials {
                config.mc.trials = trials;
            }
            let resolved = config.resolve()?;
            let out = harness::run_mc(&config)?;
            write_text(&args.out, &trials_to_csv(&out.trials, &out.param_names))?;
            write_text(
                &args.report,
                &serde_json::to_string_pretty(&out.report)
                    .map_err(|e| Error::Io(e.to_string()))?,
            )?;
            if let Some(coh) = args.coherence {
                let grid = FrequencyGrid::uniform(config.grid_points.min(1024));
                let entries = resolved.topology.lower_edges();
                let est = lrid::spectral::ar_spectrum(&out.mean_ar, &grid)?;
                let mut text = String::from("theta");
                for &(k, h) in &entries {
                    text.push_str(&format!(",est_{}_{},true_{}_{}", k + 1, h + 1, k + 1, h + 1));
                }
                text.push('\n');
                for (i, &theta) in grid.points().iter().enumerate() {
                    let truth = resolved.system.latent_spectrum(theta);
                    text.push_str(&format!("{theta}"));
                    for &(k, h) in &entries {
                        text.push_str(&format!(
                            ",{},{}",
                            coherence(&est[i], k, h),
                            coherence(&truth, k, h)
                        ));
                    }
                    text.push('\n');
                }
                write_text(&coh, &text)?;
            }
            eprintln!(
                "{} / {} trials succeeded; fit_H {:.2}, fit_yl {:.2}, fit_ym {:.2}, err_phi {:.3e}",
                out.report.succeeded,
                out.report.trials,
                out.report.fit_h,
                out.report.fit_yl,
                out.report.fit_ym,
                out.report.err_phi
            );
            Ok(())
        }
        Command::Sweep(args) => {
            let config = load_config(&args.config)?;
            let sigmas = match &args.sigma {
                Some(text) => parse_sigma_list(text)?,
                None => config.sweep.sigmas.clone(),
            };
            let n_list = match &args.n_list {
                Some(text) => parse_n_list(text)?,
                None => config.sweep.n_list.clone(),
            };
            let rows = harness::sweep(&config, &sigmas, &n_list)?;
            write_text(&args.out, &sweep_to_csv(&rows))?;
            eprintln!("wrote {} sweep cells to {}", rows.len(), args.out.display());
            Ok(())
        }
        Command::Diag(DiagArgs {
            what: DiagCommand::Dpl { config, grid, out },
        }) => {
            let config = load_config(&config)?;
            let resolved = config.resolve()?;
            let report = dpl_diagnostic(&resolved.system, &FrequencyGrid::uniform(grid))?;
            write_text(
                &out,
                &serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?,
            )?;
            eprintln!(
                "schur residual {:.3e}, off-diagonals {:.3e}/{:.3e}, rank {}",
                report.schur_residual,
                report.upsilon_m_offdiag,
                report.upsilon_l_offdiag,
                report.lambda_rank
            );
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
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
