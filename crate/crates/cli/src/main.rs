use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;

use soundfield::analysis::{metrics_csv, mnsm, predict_mmse, write_text, Metric, NoiseModel};
use soundfield::config::ExperimentConfig;
use soundfield::experiment::{ground_truth, run_noise_table, run_spacing_sweep, Scale, SpacingSweep};
use soundfield::geometry::{nyquist_spacing, Trajectory};
use soundfield::room::RirSet;
use soundfield::solve::{
    default_ridge_lambda, solve_decoupled, solve_full, static_deconvolve, Reconstruction, SolveMethod,
};
use soundfield::system::{assemble_decoupled, assemble_full, noise_variance, simulate_measurement, MeasurementRecord};
use soundfield::{Error, Result};

/// Simulate, measure and reconstruct room impulse responses on a virtual
/// grid from moving-microphone recordings.
#[derive(Debug, Parser)]
#[command(name = "soundfield", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Experiment configuration (TOML). Commands that need one fall back to
    /// the built-in 5 x 5 plane preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the trajectory seed and the first noise seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Experiment size preset.
    #[arg(long, global = true, default_value = "desk")]
    scale: Scale,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes the ground-truth grid RIRs (.sfr).
    Simulate,
    /// Writes the configured microphone trajectory as CSV.
    Trajectory,
    /// Simulates a measurement; writes `n,q,x` CSV plus sidecar files.
    Measure {
        /// Trajectory CSV to use instead of the configured generator.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// SNR in dB; defaults to the first configured level, if any.
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Recovers grid RIRs from a measurement (.sfr plus diagnostics CSV).
    Reconstruct {
        #[arg(long)]
        measurement: PathBuf,
        /// Ground truth .sfr; adds an MNSM row to the diagnostics.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Use period-averaged deconvolution at fixed microphones.
        #[arg(long)]
        r#static: bool,
    },
    /// Prints the MNSM between two .sfr files.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
    },
    /// Closed-form MMSE of the configured trajectory; writes the per-sample
    /// stencil energy profile.
    PredictMmse {
        /// Prior variance of the RIR coefficients.
        #[arg(long, default_value_t = 1e-4)]
        sigma_h2: f64,
        /// SNR in dB; defaults to the first configured level.
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Runs an experiment pipeline and writes its CSV table.
    #[command(subcommand)]
    Experiment(Experiment),
}

#[derive(Debug, Subcommand)]
enum Experiment {
    /// MNSM versus SNR for the static baseline and grid-snapped arrays of
    /// 25, 20, 15, 10 and 5 microphones.
    Table1,
    /// MNSM versus grid spacing for linear and Lagrange interpolation on a
    /// Lissajous trajectory.
    Fig1,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::plane(),
    };
    if let Some(seed) = g.seed {
        cfg.trajectory.seed = seed;
        if let Some(first) = cfg.measurement.seeds.first_mut() {
            *first = seed;
        }
    }
    Ok(cfg)
}

fn out_path(g: &Global, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate => {
            let cfg = load_config(g)?;
            let limit = nyquist_spacing(cfg.room.cutoff, cfg.room.speed_of_sound)?;
            if cfg.grid.spacing >= limit {
                warn!(
                    "grid spacing {} m is not below the spatial Nyquist bound {limit:.5} m",
                    cfg.grid.spacing
                );
            }
            let rirs = ground_truth(&cfg)?;
            let out = out_path(g, "truth.sfr");
            rirs.write_sfr(&out)?;
            println!("N = {}", cfg.grid.len());
            println!("L = {}", cfg.measurement.rir_length);
            println!("spacing = {} m", cfg.grid.spacing);
            println!("nyquist_spacing = {limit:.6} m");
            println!("nyquist_margin = {:.6} m", limit - cfg.grid.spacing);
            println!("wrote {}", out.display());
        }
        Command::Trajectory => {
            let cfg = load_config(g)?;
            let traj = cfg
                .trajectory
                .build(&cfg.grid, cfg.samples()?, cfg.excitation.period()?)?;
            let out = out_path(g, "trajectory.csv");
            traj.save_csv(&out)?;
            println!(
                "{} samples x {} microphones -> {}",
                traj.sample_count(),
                traj.mic_count(),
                out.display()
            );
        }
        Command::Measure { trajectory, snr } => {
            let cfg = load_config(g)?;
            let traj = match trajectory {
                Some(path) => Trajectory::load_csv(path)?,
                None => cfg
                    .trajectory
                    .build(&cfg.grid, cfg.samples()?, cfg.excitation.period()?)?,
            };
            let excitation = cfg.excitation.build()?;
            let snr = snr.or_else(|| cfg.measurement.snr_db.first().copied());
            let seed = cfg.measurement.seeds[0];
            let rec = simulate_measurement(
                &cfg.room,
                &traj,
                &excitation,
                cfg.measurement.periods,
                cfg.measurement.rir_length,
                snr,
                seed,
            )?;
            let out = out_path(g, "measurement.csv");
            rec.save(&out)?;
            println!("{} samples -> {}", rec.samples().len(), out.display());
        }
        Command::Reconstruct {
            measurement,
            truth,
            r#static,
        } => {
            let cfg = load_config(g)?;
            let rec = MeasurementRecord::load(measurement)?;
            let length = cfg.measurement.rir_length;
            let (rirs, mut metrics, blocks) = if *r#static {
                (static_deconvolve(&rec, &cfg.grid, length)?, Vec::new(), None)
            } else {
                let Reconstruction { rirs, diagnostics } = reconstruct(&cfg, &rec)?;
                let blocks = (!diagnostics.blocks.is_empty()).then(|| diagnostics.blocks_csv());
                (rirs, diagnostics.metrics(), blocks)
            };
            let out = out_path(g, "estimate.sfr");
            rirs.write_sfr(&out)?;
            if let Some(path) = truth {
                let t = RirSet::read_sfr(path)?;
                let value = mnsm(&t, &rirs)?;
                println!("MNSM = {value} dB");
                metrics.push(Metric::new("mnsm", value, "dB"));
            }
            write_text(sibling(&out, ".diagnostics.csv"), &metrics_csv(&metrics))?;
            if let Some(csv) = blocks {
                write_text(sibling(&out, ".blocks.csv"), &csv)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate { truth, estimate } => {
            let value = mnsm(&RirSet::read_sfr(truth)?, &RirSet::read_sfr(estimate)?)?;
            println!("MNSM = {value} dB");
            if let Some(out) = &g.out {
                write_text(out, &metrics_csv(&[Metric::new("mnsm", value, "dB")]))?;
            }
        }
        Command::PredictMmse { sigma_h2, snr } => {
            let cfg = load_config(g)?;
            let period = cfg.excitation.period()?;
            let traj = cfg.trajectory.build(&cfg.grid, cfg.samples()?, period)?;
            let snr = snr
                .or_else(|| cfg.measurement.snr_db.first().copied())
                .ok_or_else(|| Error::Invalid {
                    field: "snr",
                    reason: "no SNR given or configured".into(),
                })?;
            let power = cfg.excitation.power;
            let noise = NoiseModel::new(power, noise_variance(power, snr), *sigma_h2)?;
            let pred = predict_mmse(&traj, &cfg.kernel, &cfg.grid, &noise, period)?;
            println!("MMSE = {:e}", pred.total);
            let out = out_path(g, "mmse_profile.csv");
            write_text(&out, &pred.profile_csv())?;
            println!("wrote {}", out.display());
        }
        Command::Experiment(Experiment::Table1) => {
            let cfg = load_config(g)?;
            let table = run_noise_table(&cfg, &[25, 20, 15, 10, 5])?;
            let csv = table.to_csv();
            print!("{csv}");
            write_text(out_path(g, "table1.csv"), &csv)?;
        }
        Command::Experiment(Experiment::Fig1) => {
            let mut sweep = SpacingSweep::preset(g.scale);
            if let Some(seed) = g.seed {
                sweep.seeds = vec![seed];
            }
            let table = run_spacing_sweep(&sweep)?;
            let csv = table.to_csv();
            print!("{csv}");
            write_text(out_path(g, "fig1.csv"), &csv)?;
        }
    }
    Ok(())
}

fn reconstruct(cfg: &ExperimentConfig, rec: &MeasurementRecord) -> Result<Reconstruction> {
    let length = cfg.measurement.rir_length;
    let mut solver = cfg.solver;
    match solver.method {
        SolveMethod::DecoupledLs => {
            let sys = assemble_decoupled(rec, &cfg.kernel, &cfg.grid)?;
            solve_decoupled(&sys, rec.excitation(), &solver, length)
        }
        SolveMethod::FullLs | SolveMethod::Ridge | SolveMethod::Iterative => {
            if solver.method == SolveMethod::Ridge && solver.ridge_lambda.is_none() {
                solver.ridge_lambda = Some(default_ridge_lambda(rec));
            }
            let sys = assemble_full(rec, &cfg.kernel, &cfg.grid, length)?;
            solve_full(&sys, &solver)
        }
    }
}
