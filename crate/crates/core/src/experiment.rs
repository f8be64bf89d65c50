//! End-to-end experiment pipelines: the static versus grid-snapped noise
//! table and the grid-spacing sweep on a Lissajous trajectory.

use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::mnsm;
use crate::config::{ExcitationConfig, ExperimentConfig, TrajectoryConfig, TrajectoryKind};
use crate::error::{Error, Result};
use crate::geometry::{gen_lissajous, GridSpec};
use crate::interp::InterpolationKernel;
use crate::room::{simulate_grid_rirs, RirSet, RoomSpec};
use crate::solve::{solve_decoupled_batch, static_deconvolve, DecoupledFactorization, SolveMethod, SolverConfig};
use crate::system::{assemble_decoupled, simulate_measurement, MeasurementRecord};
use crate::Vec3;

/// Noise seed of one (setup, SNR, repetition) cell.
fn cell_seed(seed: u64, setup: usize, snr: usize) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add((setup as u64) << 16 | snr as u64)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// MNSM in dB of every (setup, SNR) pair, averaged over noise seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTable {
    pub snr_db: Vec<f64>,
    pub setups: Vec<String>,
    /// `mnsm_db[setup][snr]`.
    pub mnsm_db: Vec<Vec<f64>>,
}

impl NoiseTable {
    pub fn value(&self, setup: &str, snr_db: f64) -> Option<f64> {
        let s = self.setups.iter().position(|x| x == setup)?;
        let j = self.snr_db.iter().position(|&x| x == snr_db)?;
        Some(self.mnsm_db[s][j])
    }

    /// One row per SNR, one column per setup.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("snr_db");
        for s in &self.setups {
            out.push(',');
            out.push_str(s);
        }
        out.push('\n');
        for (j, snr) in self.snr_db.iter().enumerate() {
            write!(out, "{snr}").unwrap();
            for row in &self.mnsm_db {
                write!(out, ",{:.4}", row[j]).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Static baseline plus one grid-snapped dynamic setup per entry of
/// `mic_counts`, all with the excitation, `R` and `L` of `cfg`.
///
/// The static setup places one microphone on every node and deconvolves
/// the period average; dynamic setups move `Q` microphones over the nodes
/// and use the decoupled least-squares solver, factoring each block once
/// and reusing it for every noise draw.
pub fn run_noise_table(cfg: &ExperimentConfig, mic_counts: &[usize]) -> Result<NoiseTable> {
    cfg.validate()?;
    let excitation = cfg.excitation.build()?;
    let period = excitation.period();
    let periods = cfg.measurement.periods;
    let length = cfg.measurement.rir_length;
    let samples = periods * period;
    let snrs = &cfg.measurement.snr_db;
    let seeds = &cfg.measurement.seeds;
    if snrs.is_empty() {
        return Err(Error::invalid(
            "measurement.snr_db",
            "the noise table needs at least one SNR",
        ));
    }
    let truth = simulate_grid_rirs(&cfg.room, &cfg.grid, length)?;

    let mut setups = vec!["Static".to_string()];
    let mut table = Vec::new();

    info!("static baseline");
    let static_traj =
        TrajectoryConfig::of_kind(TrajectoryKind::Static, cfg.grid.len()).build(&cfg.grid, samples, period)?;
    let clean = simulate_measurement(&cfg.room, &static_traj, &excitation, periods, length, None, 0)?;
    table.push(sweep(snrs, seeds, 0, &clean, |rec| {
        let est = static_deconvolve(rec, &cfg.grid, length)?;
        Ok(mnsm(&truth, &est)?.value())
    })?);

    let solver = SolverConfig::new(SolveMethod::DecoupledLs);
    for (i, &q) in mic_counts.iter().enumerate() {
        info!("grid-snapped array with {q} microphones");
        setups.push(format!("Dyn-{q}"));
        let tcfg = TrajectoryConfig {
            mics: q,
            ..cfg.trajectory.clone()
        };
        let traj = TrajectoryConfig {
            kind: TrajectoryKind::GridSnapped,
            ..tcfg
        }
        .build(&cfg.grid, samples, period)?;
        let clean = simulate_measurement(&cfg.room, &traj, &excitation, periods, length, None, 0)?;
        let sys = assemble_decoupled(&clean, &InterpolationKernel::Linear, &cfg.grid)?;
        let factor = DecoupledFactorization::new(&sys, &solver)?;
        table.push(sweep(snrs, seeds, i + 1, &clean, |rec| {
            let est = factor.solve(&sys.with_rhs(rec.samples().to_vec())?, &excitation, length)?;
            Ok(mnsm(&truth, &est.rirs)?.value())
        })?);
    }
    Ok(NoiseTable {
        snr_db: snrs.clone(),
        setups,
        mnsm_db: table,
    })
}

fn sweep(
    snrs: &[f64],
    seeds: &[u64],
    setup: usize,
    clean: &MeasurementRecord,
    eval: impl Fn(&MeasurementRecord) -> Result<f64>,
) -> Result<Vec<f64>> {
    snrs.iter()
        .enumerate()
        .map(|(j, &snr)| {
            let values = seeds
                .iter()
                .map(|&seed| eval(&clean.with_noise(snr, cell_seed(seed, setup, j))))
                .collect::<Result<Vec<_>>>()?;
            Ok(mean(&values))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::invalid(
                "scale",
                format!("expected desk or paper, got {other:?}"),
            )),
        }
    }
}

/// Parameters of the grid-spacing sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SpacingSweep {
    pub room: RoomSpec,
    /// First grid node; the grid grows from it in `+x`, `+y` for every spacing.
    pub origin: Vec3,
    pub extents: [usize; 3],
    pub spacings: Vec<f64>,
    pub excitation: ExcitationConfig,
    pub periods: usize,
    pub rir_length: usize,
    pub ratio: [u32; 2],
    pub snr_db: Option<f64>,
    pub seeds: Vec<u64>,
    pub kernels: Vec<InterpolationKernel>,
}

impl SpacingSweep {
    /// 10 × 10 grid, `L = 256`, MLS of period 511 and `R = 211` periods. `R`
    /// is coprime to both Lissajous frequencies so that every block samples
    /// distinct points of the figure.
    pub fn desk() -> Self {
        Self {
            room: RoomSpec::reference(),
            origin: [2.75, 1.4, 0.8],
            extents: [10, 10, 1],
            spacings: vec![0.04, 0.03, 0.02, 0.015, 0.0133, 0.01],
            excitation: ExcitationConfig::mls(9),
            periods: 211,
            rir_length: 256,
            ratio: [17, 16],
            snr_db: Some(60.0),
            seeds: vec![1],
            kernels: vec![
                InterpolationKernel::Linear,
                InterpolationKernel::Lagrange { max_degree: 19 },
            ],
        }
    }

    /// 20 × 20 grid, `L = 1000`, MLS of period 1023 and `R = 1000` periods.
    pub fn paper() -> Self {
        Self {
            extents: [20, 20, 1],
            excitation: ExcitationConfig::mls(10),
            periods: 1000,
            rir_length: 1000,
            ..Self::desk()
        }
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self::desk(),
            Scale::Paper => Self::paper(),
        }
    }

    pub fn grid(&self, spacing: f64) -> Result<GridSpec> {
        GridSpec::new(self.origin, spacing, self.extents)
    }
}

/// MNSM per (spacing, kernel).
#[derive(Debug, Clone, PartialEq)]
pub struct SpacingTable {
    pub spacings: Vec<f64>,
    pub kernels: Vec<InterpolationKernel>,
    /// `mnsm_db[spacing][kernel]`.
    pub mnsm_db: Vec<Vec<f64>>,
}

pub fn kernel_label(k: &InterpolationKernel) -> String {
    match k {
        InterpolationKernel::Linear => "linear".into(),
        InterpolationKernel::Lagrange { max_degree } => format!("lagrange{max_degree}"),
    }
}

impl SpacingTable {
    pub fn value(&self, spacing: f64, kernel: &InterpolationKernel) -> Option<f64> {
        let i = self.spacings.iter().position(|&s| s == spacing)?;
        let k = self.kernels.iter().position(|x| x == kernel)?;
        Some(self.mnsm_db[i][k])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("spacing_m");
        for k in &self.kernels {
            out.push(',');
            out.push_str(&kernel_label(k));
        }
        out.push('\n');
        for (i, s) in self.spacings.iter().enumerate() {
            write!(out, "{s}").unwrap();
            for v in &self.mnsm_db[i] {
                write!(out, ",{v:.4}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Decoupled recovery from a single microphone on a Lissajous figure, for
/// every grid spacing and interpolation kernel.
pub fn run_spacing_sweep(sweep: &SpacingSweep) -> Result<SpacingTable> {
    let excitation = sweep.excitation.build()?;
    let period = excitation.period();
    if sweep.rir_length > period {
        return Err(Error::invalid(
            "rir_length",
            format!("exceeds the excitation period {period}"),
        ));
    }
    if sweep.seeds.is_empty() {
        return Err(Error::invalid("seeds", "at least one seed is required"));
    }
    let samples = sweep.periods * period;
    let solver = SolverConfig::new(SolveMethod::DecoupledLs);
    let mut rows = Vec::with_capacity(sweep.spacings.len());
    for (i, &spacing) in sweep.spacings.iter().enumerate() {
        info!("grid spacing {spacing} m");
        let grid = sweep.grid(spacing)?;
        let truth = simulate_grid_rirs(&sweep.room, &grid, sweep.rir_length)?;
        let traj = gen_lissajous(&grid, sweep.ratio[0], sweep.ratio[1], samples, 0.0)?;
        let clean = simulate_measurement(
            &sweep.room,
            &traj,
            &excitation,
            sweep.periods,
            sweep.rir_length,
            None,
            0,
        )?;
        let mut row = Vec::with_capacity(sweep.kernels.len());
        let noisy: Vec<MeasurementRecord> = match sweep.snr_db {
            Some(snr) => sweep
                .seeds
                .iter()
                .map(|&seed| clean.with_noise(snr, cell_seed(seed, i, 0)))
                .collect(),
            None => vec![clean.clone()],
        };
        let measurements: Vec<&[f64]> = noisy.iter().map(MeasurementRecord::samples).collect();
        for kernel in &sweep.kernels {
            let sys = assemble_decoupled(&clean, kernel, &grid)?;
            let values = solve_decoupled_batch(&sys, &measurements, &excitation, &solver, sweep.rir_length)?
                .iter()
                .map(|est| Ok(mnsm(&truth, &est.rirs)?.value()))
                .collect::<Result<Vec<_>>>()?;
            row.push(mean(&values));
        }
        rows.push(row);
    }
    Ok(SpacingTable {
        spacings: sweep.spacings.clone(),
        kernels: sweep.kernels.clone(),
        mnsm_db: rows,
    })
}

/// Exact grid RIRs of a configuration.
pub fn ground_truth(cfg: &ExperimentConfig) -> Result<RirSet> {
    simulate_grid_rirs(&cfg.room, &cfg.grid, cfg.measurement.rir_length)
}
