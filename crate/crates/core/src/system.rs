//! Dynamic measurement simulation and assembly of the reconstruction
//! systems.
//!
//! Measurement samples are stacked time-major: entry `n·Q + q` is the sample
//! of microphone `q` at time `n`. The excitation is periodic and already in
//! steady state at `n = 0`, so `s(n - k)` wraps around the period for
//! `n < k`.
//!
//! The full system has unknowns `h = [h_1ᵀ … h_Nᵀ]ᵀ` (RIR length `L`) and
//! rows `Σ_u φ_u(n) Σ_k s(n - k) h_u(k)`. The decoupled form instead solves,
//! for each excitation phase `ℓ`, for the per-phase steady-state responses
//! `h̃_u(ℓ) = (S h_u)(ℓ) / γ`, where row `(i, q)` of block `ℓ` holds
//! `γ φ(r_q(i·L_p + ℓ), r_u)`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use faer::Mat;
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Trajectory};
use crate::interp::{weights, InterpolationKernel, WeightStencil};
use crate::room::{simulate_rir, RoomSpec};
use crate::signals::{ExcitationSignal, SignalKind};

/// Largest full system matrix, in entries, that will be materialized.
pub const DEFAULT_FULL_MATRIX_LIMIT: usize = 200_000_000;

/// Recorded microphone samples together with everything needed to model them.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    samples: Vec<f64>,
    trajectory: Trajectory,
    excitation: ExcitationSignal,
    periods: usize,
    snr_db: Option<f64>,
    noise_seed: u64,
    sample_rate: f64,
}

impl MeasurementRecord {
    pub fn new(
        samples: Vec<f64>,
        trajectory: Trajectory,
        excitation: ExcitationSignal,
        periods: usize,
        snr_db: Option<f64>,
        noise_seed: u64,
        sample_rate: f64,
    ) -> Result<Self> {
        if samples.len() != trajectory.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a trajectory with {} positions",
                samples.len(),
                trajectory.len()
            )));
        }
        if periods == 0 {
            return Err(Error::invalid("periods", "must be positive"));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::invalid(
                "sample_rate",
                format!("must be positive, got {sample_rate}"),
            ));
        }
        Ok(Self {
            samples,
            trajectory,
            excitation,
            periods,
            snr_db,
            noise_seed,
            sample_rate,
        })
    }

    /// The measurement vector `x`, length `M = M_t·Q`.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn excitation(&self) -> &ExcitationSignal {
        &self.excitation
    }

    /// Number of excitation periods `R`.
    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn snr_db(&self) -> Option<f64> {
        self.snr_db
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// `σ_η² = σ_s² / 10^(SNR/10)`, zero for noise-free records.
    pub fn noise_variance(&self) -> f64 {
        self.snr_db
            .map_or(0.0, |snr| noise_variance(self.excitation.power(), snr))
    }

    /// Copy of this record with white Gaussian noise at `snr_db` added to the
    /// samples.
    pub fn with_noise(&self, snr_db: f64, seed: u64) -> Self {
        let mut samples = self.samples.clone();
        add_noise(&mut samples, noise_variance(self.excitation.power(), snr_db), seed);
        Self {
            samples,
            snr_db: Some(snr_db),
            noise_seed: seed,
            ..self.clone()
        }
    }

    /// Writes `n,q,x` rows to `path` and a `key=value` sidecar next to it
    /// (`<path>.meta`), plus the trajectory and excitation it references.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let q = self.trajectory.mic_count();
        let mut out = String::with_capacity(self.samples.len() * 28);
        out.push_str("n,q,x\n");
        for (i, v) in self.samples.iter().enumerate() {
            out.push_str(&format!("{},{},{v}\n", i / q, i % q));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;

        let traj_path = sibling(path, "traj.csv");
        let exc_path = sibling(path, "excitation.csv");
        self.trajectory.save_csv(&traj_path)?;
        self.excitation.save_csv(&exc_path)?;
        let mut meta = String::new();
        meta.push_str(&format!("trajectory={}\n", file_name(&traj_path)));
        meta.push_str(&format!("excitation={}\n", file_name(&exc_path)));
        meta.push_str(&format!("excitation_kind={}\n", self.excitation.kind()));
        meta.push_str(&format!("period={}\n", self.excitation.period()));
        meta.push_str(&format!("power={}\n", self.excitation.power()));
        meta.push_str(&format!("periods={}\n", self.periods));
        meta.push_str(&format!(
            "snr_db={}\n",
            self.snr_db.map_or("none".to_string(), |v| v.to_string())
        ));
        meta.push_str(&format!("noise_seed={}\n", self.noise_seed));
        meta.push_str(&format!("sample_rate={}\n", self.sample_rate));
        let meta_path = sibling(path, "meta");
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta_path = sibling(path, "meta");
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut meta = HashMap::new();
        for (i, line) in meta_text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&meta_path, i + 1, "expected key=value"))?;
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| {
            meta.get(key)
                .ok_or_else(|| Error::parse(&meta_path, 0, format!("missing key {key:?}")))
        };
        let dir = path.parent().unwrap_or(Path::new("."));
        let trajectory = Trajectory::load_csv(dir.join(get("trajectory")?))?;
        let excitation = ExcitationSignal::load_csv(dir.join(get("excitation")?))?;
        let periods: usize = get("periods")?
            .parse()
            .map_err(|_| Error::parse(&meta_path, 0, "bad periods"))?;
        let snr_db = match get("snr_db")?.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|_| Error::parse(&meta_path, 0, "bad snr_db"))?),
        };
        let noise_seed: u64 = get("noise_seed")?
            .parse()
            .map_err(|_| Error::parse(&meta_path, 0, "bad noise_seed"))?;
        let sample_rate: f64 = get("sample_rate")?
            .parse()
            .map_err(|_| Error::parse(&meta_path, 0, "bad sample_rate"))?;

        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let q = trajectory.mic_count();
        let mut samples = vec![f64::NAN; trajectory.len()];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with('n')) {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed = (f.len() == 3)
                .then(|| {
                    Some((
                        f[0].parse::<usize>().ok()?,
                        f[1].parse::<usize>().ok()?,
                        f[2].parse::<f64>().ok()?,
                    ))
                })
                .flatten();
            let (n, mic, x) = parsed.ok_or_else(|| Error::parse(path, i + 1, format!("malformed row {line:?}")))?;
            let slot = samples
                .get_mut(n * q + mic)
                .filter(|_| mic < q)
                .ok_or_else(|| Error::parse(path, i + 1, "sample index outside the trajectory"))?;
            *slot = x;
        }
        if samples.iter().any(|v| v.is_nan()) {
            return Err(Error::parse(path, 0, "missing samples"));
        }
        Self::new(
            samples,
            trajectory,
            excitation,
            periods,
            snr_db,
            noise_seed,
            sample_rate,
        )
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn noise_variance(signal_power: f64, snr_db: f64) -> f64 {
    signal_power / 10f64.powf(snr_db / 10.0)
}

fn add_noise(samples: &mut [f64], variance: f64, seed: u64) {
    if variance <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite noise deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in samples {
        *v += normal.sample(&mut rng);
    }
}

/// Simulates `x(n) = Σ_k h(r(n), k) s(n - k) + η(n)` with the exact
/// image-source RIR (truncated to `rir_length`) at every microphone
/// position. Each distinct position is simulated once.
pub fn simulate_measurement(
    room: &RoomSpec,
    trajectory: &Trajectory,
    excitation: &ExcitationSignal,
    periods: usize,
    rir_length: usize,
    snr_db: Option<f64>,
    noise_seed: u64,
) -> Result<MeasurementRecord> {
    room.validate()?;
    let period = excitation.period();
    if rir_length > period {
        return Err(Error::invalid(
            "rir_length",
            format!("period shorter than RIR: L = {rir_length} > L_p = {period}"),
        ));
    }
    if trajectory.sample_count() != periods * period {
        return Err(Error::invalid(
            "trajectory",
            format!(
                "{} time samples, expected R·L_p = {periods}·{period} = {}",
                trajectory.sample_count(),
                periods * period
            ),
        ));
    }
    if let Some(p) = trajectory.positions().iter().find(|p| !room.contains(**p)) {
        return Err(Error::OutsideRegion {
            position: *p,
            region: "room",
        });
    }

    let mut groups: HashMap<[u64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in trajectory.positions().iter().enumerate() {
        groups.entry(p.map(f64::to_bits)).or_default().push(i);
    }
    let mut groups: Vec<(&[u64; 3], Vec<usize>)> = groups.iter().map(|(k, v)| (k, v.clone())).collect();
    groups.sort_unstable_by_key(|g| g.1[0]);

    let q = trajectory.mic_count();
    let parts: Vec<Vec<(usize, f64)>> = groups
        .par_iter()
        .map(|(key, indices)| {
            let h = simulate_rir(room, key.map(f64::from_bits), rir_length)?;
            Ok(indices
                .iter()
                .map(|&i| {
                    let n = (i / q) as i64;
                    let x = h
                        .iter()
                        .enumerate()
                        .map(|(k, hk)| hk * excitation.at(n - k as i64))
                        .sum();
                    (i, x)
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut samples = vec![0.0; trajectory.len()];
    for (i, x) in parts.into_iter().flatten() {
        samples[i] = x;
    }
    if let Some(snr) = snr_db {
        add_noise(&mut samples, noise_variance(excitation.power(), snr), noise_seed);
    }
    MeasurementRecord::new(
        samples,
        trajectory.clone(),
        excitation.clone(),
        periods,
        snr_db,
        noise_seed,
        room.sample_rate,
    )
}

fn stencils(trajectory: &Trajectory, kernel: &InterpolationKernel, grid: &GridSpec) -> Result<Vec<WeightStencil>> {
    kernel.validate()?;
    trajectory
        .positions()
        .par_iter()
        .map(|&p| weights(kernel, grid, p))
        .collect()
}

/// Full measurement model `x = A h + η`.
#[derive(Debug, Clone)]
pub struct FullSystem {
    pub matrix: Mat<f64>,
    pub rhs: Vec<f64>,
    pub grid: GridSpec,
    pub rir_length: usize,
    pub sample_rate: f64,
}

/// The `M × N·L` matrix `A = [Φ_1 S, …, Φ_N S]`; column `u·L + k` holds
/// `φ_u(n) s(n - k)`.
pub fn full_matrix(
    trajectory: &Trajectory,
    excitation: &ExcitationSignal,
    kernel: &InterpolationKernel,
    grid: &GridSpec,
    rir_length: usize,
    limit: usize,
) -> Result<Mat<f64>> {
    let rows = trajectory.len();
    let cols = grid.len() * rir_length;
    if rir_length == 0 {
        return Err(Error::invalid("rir_length", "must be positive"));
    }
    if rows.saturating_mul(cols) > limit {
        return Err(Error::invalid(
            "full system",
            format!("{rows}×{cols} matrix exceeds the limit of {limit} entries; use the decoupled solver"),
        ));
    }
    let stencils = stencils(trajectory, kernel, grid)?;
    let q = trajectory.mic_count();
    let mut a = Mat::<f64>::zeros(rows, cols);
    for (row, stencil) in stencils.iter().enumerate() {
        let n = (row / q) as i64;
        for (u, w) in stencil.entries() {
            for k in 0..rir_length {
                a[(row, u * rir_length + k)] = w * excitation.at(n - k as i64);
            }
        }
    }
    Ok(a)
}

pub fn assemble_full(
    record: &MeasurementRecord,
    kernel: &InterpolationKernel,
    grid: &GridSpec,
    rir_length: usize,
) -> Result<FullSystem> {
    assemble_full_with_limit(record, kernel, grid, rir_length, DEFAULT_FULL_MATRIX_LIMIT)
}

pub fn assemble_full_with_limit(
    record: &MeasurementRecord,
    kernel: &InterpolationKernel,
    grid: &GridSpec,
    rir_length: usize,
    limit: usize,
) -> Result<FullSystem> {
    let matrix = full_matrix(
        record.trajectory(),
        record.excitation(),
        kernel,
        grid,
        rir_length,
        limit,
    )?;
    Ok(FullSystem {
        matrix,
        rhs: record.samples().to_vec(),
        grid: *grid,
        rir_length,
        sample_rate: record.sample_rate(),
    })
}

/// Matrix-free form of the full system matrix, for iterative solvers.
#[derive(Debug, Clone)]
pub struct FullOperator {
    stencils: Vec<WeightStencil>,
    excitation: ExcitationSignal,
    mics: usize,
    unknowns: usize,
    rir_length: usize,
}

impl FullOperator {
    pub fn new(
        trajectory: &Trajectory,
        excitation: &ExcitationSignal,
        kernel: &InterpolationKernel,
        grid: &GridSpec,
        rir_length: usize,
    ) -> Result<Self> {
        Ok(Self {
            stencils: stencils(trajectory, kernel, grid)?,
            excitation: excitation.clone(),
            mics: trajectory.mic_count(),
            unknowns: grid.len(),
            rir_length,
        })
    }

    pub fn nrows(&self) -> usize {
        self.stencils.len()
    }

    pub fn ncols(&self) -> usize {
        self.unknowns * self.rir_length
    }

    /// `A h`.
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        let len = self.rir_length;
        self.stencils
            .par_iter()
            .enumerate()
            .map(|(row, stencil)| {
                let n = (row / self.mics) as i64;
                stencil
                    .entries()
                    .map(|(u, w)| {
                        let hu = &h[u * len..(u + 1) * len];
                        w * hu
                            .iter()
                            .enumerate()
                            .map(|(k, v)| v * self.excitation.at(n - k as i64))
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    }

    /// `Aᵀ r`.
    pub fn apply_transpose(&self, r: &[f64]) -> Vec<f64> {
        let len = self.rir_length;
        let mut out = vec![0.0; self.ncols()];
        for (row, stencil) in self.stencils.iter().enumerate() {
            let n = (row / self.mics) as i64;
            for (u, w) in stencil.entries() {
                let wr = w * r[row];
                for (k, o) in out[u * len..(u + 1) * len].iter_mut().enumerate() {
                    *o += wr * self.excitation.at(n - k as i64);
                }
            }
        }
        out
    }
}

/// Per-phase subsystems `x_ℓ = Ã_ℓ h̃_ℓ + η_ℓ`.
///
/// Only the interpolation stencils are stored; block matrices are formed on
/// demand by [`DecoupledSystem::block_matrix`].
#[derive(Debug, Clone)]
pub struct DecoupledSystem {
    gamma: f64,
    period: usize,
    periods: usize,
    mics: usize,
    grid: GridSpec,
    stencils: Vec<WeightStencil>,
    rhs: Vec<f64>,
    sample_rate: f64,
}

impl DecoupledSystem {
    /// `γ = L_p σ_s²`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Number of blocks, `L_p`.
    pub fn block_count(&self) -> usize {
        self.period
    }

    /// Rows per block, `R·Q`.
    pub fn block_rows(&self) -> usize {
        self.periods * self.mics
    }

    /// Unknowns per block, `N`.
    pub fn unknowns(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    fn sample_index(&self, block: usize, row: usize) -> usize {
        let (i, q) = (row / self.mics, row % self.mics);
        (i * self.period + block) * self.mics + q
    }

    /// Dense `R·Q × N` block `Ã_ℓ` with entries `γ φ(r_q(i·L_p + ℓ), r_j)`.
    pub fn block_matrix(&self, block: usize) -> Mat<f64> {
        let mut a = Mat::<f64>::zeros(self.block_rows(), self.unknowns());
        for row in 0..self.block_rows() {
            for (u, w) in self.stencils[self.sample_index(block, row)].entries() {
                a[(row, u)] = self.gamma * w;
            }
        }
        a
    }

    /// `x_ℓ`, every `L_p`-th time sample starting at phase `ℓ`.
    pub fn block_rhs(&self, block: usize) -> Vec<f64> {
        self.block_values(&self.rhs, block)
    }

    /// Phase-`ℓ` rows of any measurement vector laid out like the system's.
    pub fn block_values(&self, samples: &[f64], block: usize) -> Vec<f64> {
        (0..self.block_rows())
            .map(|row| samples[self.sample_index(block, row)])
            .collect()
    }

    /// Length of the stacked measurement vector, `R·L_p·Q`.
    pub fn sample_count(&self) -> usize {
        self.rhs.len()
    }

    /// Same structure with a different measurement vector.
    pub fn with_rhs(&self, rhs: Vec<f64>) -> Result<Self> {
        if rhs.len() != self.rhs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples, expected {}",
                rhs.len(),
                self.rhs.len()
            )));
        }
        Ok(Self { rhs, ..self.clone() })
    }
}

pub fn assemble_decoupled(
    record: &MeasurementRecord,
    kernel: &InterpolationKernel,
    grid: &GridSpec,
) -> Result<DecoupledSystem> {
    let excitation = record.excitation();
    let period = excitation.period();
    let samples = record.trajectory().sample_count();
    if !samples.is_multiple_of(period) {
        return Err(Error::invalid(
            "trajectory",
            format!("{samples} time samples is not a multiple of the period {period}"),
        ));
    }
    if excitation.kind() == SignalKind::Mls {
        warn!("MLS excitation is not exactly perfect; responses are recovered with the support-constrained inverse");
    }
    Ok(DecoupledSystem {
        gamma: excitation.gamma(),
        period,
        periods: samples / period,
        mics: record.trajectory().mic_count(),
        grid: *grid,
        stencils: stencils(record.trajectory(), kernel, grid)?,
        rhs: record.samples().to_vec(),
        sample_rate: record.sample_rate(),
    })
}
