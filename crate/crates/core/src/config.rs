//! Experiment configuration files.
//!
//! A configuration is a TOML document with one flat table per concern:
//!
//! ```toml
//! [room]
//! dimensions = [5.8, 4.15, 2.55]
//! rt60 = 0.3
//! speed_of_sound = 343.0
//! sample_rate = 8000.0
//! cutoff = 4000.0
//! source = [1.4, 1.6, 1.0]
//! highpass = 100.0
//!
//! [grid]
//! origin = [2.75, 1.4, 0.8]
//! spacing = 0.02
//! extents = [5, 5, 1]
//!
//! [excitation]
//! kind = "mls"
//! order = 9
//! power = 1.0
//!
//! [trajectory]
//! kind = "grid_snapped"
//! mics = 25
//!
//! [measurement]
//! periods = 10
//! rir_length = 500
//! snr_db = [40.0]
//! seeds = [1]
//!
//! [kernel]
//! kind = "linear"
//!
//! [solver]
//! method = "decoupled_ls"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{gen_grid_snapped, gen_lissajous, gen_static, gen_uniform, GridSpec, Trajectory};
use crate::interp::InterpolationKernel;
use crate::room::RoomSpec;
use crate::signals::{generate_flat_spectrum, generate_mls, ExcitationSignal, SignalKind};
use crate::solve::{SolveMethod, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationConfig {
    pub kind: SignalKind,
    /// LFSR order for MLS; the period is `2^order - 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<u32>,
    /// Period of a flat-spectrum sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    #[serde(default = "unit_power")]
    pub power: f64,
    /// Phase seed of a flat-spectrum sequence.
    #[serde(default)]
    pub seed: u64,
}

fn unit_power() -> f64 {
    1.0
}

impl ExcitationConfig {
    pub fn mls(order: u32) -> Self {
        Self {
            kind: SignalKind::Mls,
            order: Some(order),
            period: None,
            power: 1.0,
            seed: 0,
        }
    }

    pub fn flat_spectrum(period: usize, seed: u64) -> Self {
        Self {
            kind: SignalKind::FlatSpectrum,
            order: None,
            period: Some(period),
            power: 1.0,
            seed,
        }
    }

    pub fn period(&self) -> Result<usize> {
        match self.kind {
            SignalKind::Mls => {
                let order = self
                    .order
                    .ok_or_else(|| Error::invalid("excitation.order", "required for MLS"))?;
                if !(1..usize::BITS).contains(&order) {
                    return Err(Error::invalid("excitation.order", format!("unsupported order {order}")));
                }
                Ok((1usize << order) - 1)
            }
            SignalKind::FlatSpectrum => self
                .period
                .ok_or_else(|| Error::invalid("excitation.period", "required for flat-spectrum excitation")),
        }
    }

    pub fn build(&self) -> Result<ExcitationSignal> {
        match self.kind {
            SignalKind::Mls => generate_mls(
                self.order
                    .ok_or_else(|| Error::invalid("excitation.order", "required for MLS"))?,
                self.power,
            ),
            SignalKind::FlatSpectrum => generate_flat_spectrum(self.period()?, self.power, self.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// One fixed microphone on every grid node.
    Static,
    /// `mics` microphones on grid nodes, re-posed every sample.
    GridSnapped,
    /// One microphone on a Lissajous figure spanning the grid.
    Lissajous,
    /// `mics` microphones at uniformly random positions in the grid hull.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub kind: TrajectoryKind,
    #[serde(default = "one")]
    pub mics: usize,
    /// Lissajous frequency ratio `[a, b]`.
    #[serde(default = "default_ratio")]
    pub ratio: [u32; 2],
    /// Lissajous clearance from the grid hull, meters.
    #[serde(default)]
    pub margin: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_ratio() -> [u32; 2] {
    [17, 16]
}

impl TrajectoryConfig {
    pub fn of_kind(kind: TrajectoryKind, mics: usize) -> Self {
        Self {
            kind,
            mics,
            ratio: default_ratio(),
            margin: 0.0,
            seed: 0,
        }
    }

    /// Trajectory with `samples` time samples.
    pub fn build(&self, grid: &GridSpec, samples: usize, period: usize) -> Result<Trajectory> {
        match self.kind {
            TrajectoryKind::Static => {
                let nodes: Vec<_> = (0..grid.len()).map(|u| grid.position(u)).collect();
                gen_static(&nodes, samples)?.snapped(*grid)
            }
            TrajectoryKind::GridSnapped => gen_grid_snapped(grid, self.mics, samples, period, self.seed),
            TrajectoryKind::Lissajous => gen_lissajous(grid, self.ratio[0], self.ratio[1], samples, self.margin),
            TrajectoryKind::Uniform => gen_uniform(grid, self.mics, samples, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementConfig {
    /// Number of excitation periods `R`.
    pub periods: usize,
    /// RIR length `L` in samples.
    pub rir_length: usize,
    /// SNR levels in dB; empty means noise-free.
    #[serde(default)]
    pub snr_db: Vec<f64>,
    /// Noise seeds.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub room: RoomSpec,
    pub grid: GridSpec,
    pub excitation: ExcitationConfig,
    pub trajectory: TrajectoryConfig,
    pub measurement: MeasurementConfig,
    pub kernel: InterpolationKernel,
    pub solver: SolverConfig,
}

impl ExperimentConfig {
    /// The 5 × 5 plane of the grid-snapped experiment: Δ = 2 cm at 0.8 m
    /// height from `r₀ = (2.75, 1.4, 0.8)`, MLS of period 511, `R = 10`,
    /// `L = 500`, in the reference room.
    pub fn plane() -> Self {
        Self {
            room: RoomSpec::reference(),
            grid: GridSpec {
                origin: [2.75, 1.4, 0.8],
                spacing: 0.02,
                extents: [5, 5, 1],
            },
            excitation: ExcitationConfig::mls(9),
            trajectory: TrajectoryConfig::of_kind(TrajectoryKind::GridSnapped, 25),
            measurement: MeasurementConfig {
                periods: 10,
                rir_length: 500,
                snr_db: vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0],
                seeds: vec![1, 2, 3, 4, 5],
            },
            kernel: InterpolationKernel::Linear,
            solver: SolverConfig::new(SolveMethod::DecoupledLs),
        }
    }

    /// A small instance on which the full system is cheap to solve.
    pub fn proof_of_concept() -> Self {
        Self {
            grid: GridSpec {
                origin: [2.75, 1.4, 0.8],
                spacing: 0.02,
                extents: [3, 3, 1],
            },
            excitation: ExcitationConfig::flat_spectrum(63, 7),
            trajectory: TrajectoryConfig {
                seed: 3,
                ..TrajectoryConfig::of_kind(TrajectoryKind::GridSnapped, 3)
            },
            measurement: MeasurementConfig {
                periods: 6,
                rir_length: 48,
                snr_db: vec![40.0],
                seeds: vec![1],
            },
            ..Self::plane()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid("config", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Time samples per microphone, `R · L_p`.
    pub fn samples(&self) -> Result<usize> {
        Ok(self.measurement.periods * self.excitation.period()?)
    }

    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        self.grid.validate()?;
        self.kernel.validate()?;
        self.solver.validate()?;
        let period = self.excitation.period()?;
        if !(self.excitation.power > 0.0) {
            return Err(Error::invalid("excitation.power", "must be positive"));
        }
        let m = &self.measurement;
        if m.periods == 0 {
            return Err(Error::invalid("measurement.periods", "must be positive"));
        }
        if m.rir_length == 0 || m.rir_length > period {
            return Err(Error::invalid(
                "measurement.rir_length",
                format!("must lie in 1..={period} (the excitation period), got {}", m.rir_length),
            ));
        }
        if m.seeds.is_empty() {
            return Err(Error::invalid("measurement.seeds", "at least one seed is required"));
        }
        let (lo, hi) = self.grid.bounds();
        if !self.room.contains(lo) || !self.room.contains(hi) {
            return Err(Error::invalid(
                "grid",
                format!("bounding box {lo:?}..{hi:?} leaves the room"),
            ));
        }
        let t = &self.trajectory;
        if t.mics == 0 {
            return Err(Error::invalid("trajectory.mics", "must be positive"));
        }
        if t.kind == TrajectoryKind::GridSnapped && t.mics > self.grid.len() {
            return Err(Error::invalid(
                "trajectory.mics",
                format!("{} microphones do not fit on {} grid nodes", t.mics, self.grid.len()),
            ));
        }
        if t.kind == TrajectoryKind::Lissajous && (t.ratio.contains(&0) || t.margin < 0.0) {
            return Err(Error::invalid(
                "trajectory",
                "Lissajous ratio must be positive and margin non-negative",
            ));
        }
        Ok(())
    }
}
