//! Reconstruction quality and closed-form error prediction.
//!
//! [`mnsm`] is the mean normalized misalignment between two RIR sets.
//! [`predict_mmse`] evaluates the per-sample MMSE formula for the linear
//! model with i.i.d. RIR coefficients; [`mmse_error_covariance_trace`] and
//! [`mmse_outer_trace`] evaluate the same quantity by dense inversion and
//! coincide with it when the system is square and samples of the same
//! excitation phase have disjoint stencils.

use std::fmt;
use std::path::Path;

use faer::linalg::solvers::DenseSolveCore;
use faer::prelude::*;
use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Trajectory};
use crate::interp::{weights, InterpolationKernel};
use crate::room::RirSet;

/// Second-order statistics of the excitation, noise and RIR prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma_s2: f64,
    pub sigma_eta2: f64,
    pub sigma_h2: f64,
}

impl NoiseModel {
    pub fn new(sigma_s2: f64, sigma_eta2: f64, sigma_h2: f64) -> Result<Self> {
        for (field, v) in [
            ("noise.sigma_s2", sigma_s2),
            ("noise.sigma_eta2", sigma_eta2),
            ("noise.sigma_h2", sigma_h2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, format!("must be positive, got {v}")));
            }
        }
        Ok(Self {
            sigma_s2,
            sigma_eta2,
            sigma_h2,
        })
    }

    /// Ridge penalty realizing the MMSE estimator, `σ_η² / σ_h²`.
    pub fn ridge_lambda(&self) -> f64 {
        self.sigma_eta2 / self.sigma_h2
    }
}

/// A level in decibels; exact agreement maps to a distinguished `-inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decibels {
    Finite(f64),
    NegInfinity,
}

impl Decibels {
    pub fn from_linear(ratio: f64) -> Self {
        if ratio == 0.0 {
            Decibels::NegInfinity
        } else {
            Decibels::Finite(10.0 * ratio.log10())
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Decibels::Finite(v) => v,
            Decibels::NegInfinity => f64::NEG_INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Decibels::Finite(v) => Some(v),
            Decibels::NegInfinity => None,
        }
    }
}

impl fmt::Display for Decibels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decibels::Finite(v) => write!(f, "{v:.4}"),
            Decibels::NegInfinity => f.write_str("-inf"),
        }
    }
}

/// Linear mean normalized misalignment `(1/N) Σ_u ‖h_u − ĥ_u‖² / ‖h_u‖²`.
pub fn mnsm_linear(truth: &RirSet, estimate: &RirSet) -> Result<f64> {
    if truth.grid() != estimate.grid() || truth.length() != estimate.length() {
        return Err(Error::ShapeMismatch(format!(
            "truth has {} rows of length {}, estimate has {} rows of length {}",
            truth.rows(),
            truth.length(),
            estimate.rows(),
            estimate.length()
        )));
    }
    let mut total = 0.0;
    for u in 0..truth.rows() {
        let (h, e) = (truth.row(u), estimate.row(u));
        let norm: f64 = h.iter().map(|v| v * v).sum();
        if norm == 0.0 {
            return Err(Error::invalid("truth", format!("row {u} has zero energy")));
        }
        let err: f64 = h.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum();
        total += err / norm;
    }
    Ok(total / truth.rows() as f64)
}

pub fn mnsm(truth: &RirSet, estimate: &RirSet) -> Result<Decibels> {
    mnsm_linear(truth, estimate).map(Decibels::from_linear)
}

/// One term of the per-sample MMSE sum for a stencil with `Σ_u φ² = sum_sq`.
pub fn mmse_term(noise: &NoiseModel, period: usize, sum_sq: f64) -> f64 {
    let snr_h = noise.sigma_h2 / noise.sigma_eta2;
    noise.sigma_h2 / (1.0 + snr_h * period as f64 * noise.sigma_s2 * sum_sq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmsePrediction {
    pub total: f64,
    /// `Σ_u φ²(r(n), r_u)` per sample, in record order.
    pub sum_of_squares: Vec<f64>,
}

impl MmsePrediction {
    pub fn profile_csv(&self) -> String {
        let mut out = String::from("sample,sum_phi2\n");
        for (i, v) in self.sum_of_squares.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

/// Closed-form MMSE summed over every sample of the trajectory.
pub fn predict_mmse(
    trajectory: &Trajectory,
    kernel: &InterpolationKernel,
    grid: &GridSpec,
    noise: &NoiseModel,
    period: usize,
) -> Result<MmsePrediction> {
    kernel.validate()?;
    let sum_of_squares = trajectory
        .positions()
        .iter()
        .map(|&p| weights(kernel, grid, p).map(|s| s.sum_of_squares()))
        .collect::<Result<Vec<_>>>()?;
    let total = sum_of_squares.iter().map(|&s| mmse_term(noise, period, s)).sum();
    Ok(MmsePrediction { total, sum_of_squares })
}

fn gram_transpose(a: &Mat<f64>) -> Mat<f64> {
    a.transpose() * a
}

fn gram(a: &Mat<f64>) -> Mat<f64> {
    a * a.transpose()
}

/// Inverse of a square matrix; fails when the pivots reveal singularity.
fn checked_inverse(m: &Mat<f64>, what: &str) -> Result<Mat<f64>> {
    let lu = m.full_piv_lu();
    let u = lu.U();
    let n = u.nrows();
    let diag: Vec<f64> = (0..n).map(|i| u[(i, i)].abs()).collect();
    let top = diag.iter().cloned().fold(0.0, f64::max);
    let bottom = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if n > 0 && !(bottom > 1e-14 * top.max(1.0)) {
        return Err(Error::Numerical(format!("{what} is singular")));
    }
    Ok(lu.inverse())
}

fn trace(m: &Mat<f64>) -> f64 {
    (0..m.nrows()).map(|i| m[(i, i)]).sum()
}

fn identity_plus(m: Mat<f64>, scale: f64) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| {
        scale * m[(i, j)] + if i == j { 1.0 } else { 0.0 }
    })
}

/// Both sides of `tr{(I + B Cᵀ)⁻¹} = tr{(I + Cᵀ B)⁻¹} − (W − S)` for `S × W`
/// matrices `B` and `C`.
pub fn trace_identity_check(b: &Mat<f64>, c: &Mat<f64>) -> Result<(f64, f64)> {
    if b.nrows() != c.nrows() || b.ncols() != c.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "B is {}×{}, C is {}×{}",
            b.nrows(),
            b.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    let (s, w) = (b.nrows() as f64, b.ncols() as f64);
    let left = identity_plus(b * c.transpose(), 1.0);
    let right = identity_plus(c.transpose() * b, 1.0);
    let lhs = trace(&checked_inverse(&left, "I + B Cᵀ")?);
    let rhs = trace(&checked_inverse(&right, "I + Cᵀ B")?) - (w - s);
    Ok((lhs, rhs))
}

/// `tr R_ee = σ_h² tr{(I + (σ_h²/σ_η²) AᵀA)⁻¹}`, the trace of the MMSE error
/// covariance.
pub fn mmse_error_covariance_trace(a: &Mat<f64>, noise: &NoiseModel) -> Result<f64> {
    let m = identity_plus(gram_transpose(a), noise.sigma_h2 / noise.sigma_eta2);
    Ok(noise.sigma_h2 * trace(&checked_inverse(&m, "I + c AᵀA")?))
}

/// `σ_h² tr{(I + (σ_h²/σ_η²) A Aᵀ)⁻¹}`; equals the error covariance trace
/// when `A` is square.
pub fn mmse_outer_trace(a: &Mat<f64>, noise: &NoiseModel) -> Result<f64> {
    let m = identity_plus(gram(a), noise.sigma_h2 / noise.sigma_eta2);
    Ok(noise.sigma_h2 * trace(&checked_inverse(&m, "I + c A Aᵀ")?))
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarlo {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Monte Carlo squared error `E‖h − ĥ‖²` of the ridge estimator with
/// `λ = σ_η²/σ_h²` on the model `x = A h + η`. Trial `t` draws from stream
/// `t` of a generator seeded by `seed`.
pub fn empirical_mmse(a: &Mat<f64>, noise: &NoiseModel, trials: usize, seed: u64) -> Result<MonteCarlo> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    let (m, n) = (a.nrows(), a.ncols());
    let lambda = noise.ridge_lambda();
    let normal = Mat::from_fn(n, n, |i, j| {
        (0..m).map(|k| a[(k, i)] * a[(k, j)]).sum::<f64>() + if i == j { lambda } else { 0.0 }
    });
    let llt = normal
        .llt(faer::Side::Lower)
        .map_err(|_| Error::Numerical("normal matrix of the ridge estimator is not positive definite".into()))?;
    // G = (AᵀA + λI)⁻¹ Aᵀ, so that ĥ = G x.
    let mut g = a.transpose().to_owned();
    llt.solve_in_place(g.as_mut());
    let h_dist = Normal::new(0.0, noise.sigma_h2.sqrt()).expect("positive variance");
    let eta_dist = Normal::new(0.0, noise.sigma_eta2.sqrt()).expect("positive variance");
    let errors: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let h: Vec<f64> = (0..n).map(|_| h_dist.sample(&mut rng)).collect();
            let x: Vec<f64> = (0..m)
                .map(|i| (0..n).map(|j| a[(i, j)] * h[j]).sum::<f64>() + eta_dist.sample(&mut rng))
                .collect();
            (0..n)
                .map(|i| {
                    let est: f64 = (0..m).map(|k| g[(i, k)] * x[k]).sum();
                    (h[i] - est).powi(2)
                })
                .sum()
        })
        .collect();
    let mean = errors.iter().sum::<f64>() / trials as f64;
    let std_error = if trials > 1 {
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        (var / trials as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(MonteCarlo {
        mean,
        std_error,
        trials,
    })
}

/// A `metric,value,unit` report row.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: String,
    pub unit: String,
}

impl Metric {
    pub fn new(name: impl Into<String>, value: impl fmt::Display, unit: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: value.to_string(),
            unit: unit.into(),
        }
    }
}

pub fn metrics_csv(rows: &[Metric]) -> String {
    let mut out = String::from("metric,value,unit\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.name, r.value, r.unit));
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::gen_static;
    use rand::Rng;

    fn set(rows: Vec<Vec<f64>>) -> RirSet {
        let grid = GridSpec::new([0.0; 3], 0.1, [rows.len(), 1, 1]).unwrap();
        let len = rows[0].len();
        RirSet::new(grid, len, 8000.0, rows.concat()).unwrap()
    }

    #[test]
    fn mnsm_examples() {
        let truth = set(vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(mnsm(&truth, &truth).unwrap(), Decibels::NegInfinity);
        assert_eq!(
            mnsm(&truth, &set(vec![vec![0.0; 2]; 2])).unwrap(),
            Decibels::Finite(0.0)
        );
        // Row ratios 0.01 and 0.04.
        let est = set(vec![vec![0.9, 0.0], vec![0.0, 1.6]]);
        let db = mnsm(&truth, &est).unwrap().value();
        assert!((db - 10.0 * 0.025f64.log10()).abs() < 1e-12, "{db}");
        assert!((db + 16.0206).abs() < 1e-4);
    }

    #[test]
    fn mnsm_errors() {
        let truth = set(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let err = mnsm(&truth, &truth).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
        let other = set(vec![vec![1.0, 0.0, 0.0]; 2]);
        assert!(matches!(mnsm(&other, &truth), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mnsm_permutation_invariant() {
        let truth = set(vec![vec![1.0, 0.5], vec![0.3, 2.0], vec![-1.0, 1.0]]);
        let est = set(vec![vec![0.8, 0.5], vec![0.3, 2.2], vec![-1.1, 0.9]]);
        let perm = [2, 0, 1];
        let p = |s: &RirSet| set(perm.iter().map(|&u| s.row(u).to_vec()).collect());
        let a = mnsm(&truth, &est).unwrap().value();
        let b = mnsm(&p(&truth), &p(&est)).unwrap().value();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn one_hot_prediction_closed_form() {
        let grid = GridSpec::new([0.0; 3], 0.1, [2, 2, 1]).unwrap();
        let traj = gen_static(&[grid.position(0), grid.position(3)], 10).unwrap();
        let noise = NoiseModel::new(1.0, 0.1, 0.5).unwrap();
        let pred = predict_mmse(&traj, &InterpolationKernel::Linear, &grid, &noise, 7).unwrap();
        let expect = 20.0 * 0.5 / (1.0 + 5.0 * 7.0);
        assert!((pred.total - expect).abs() < 1e-12);
        assert!(pred.sum_of_squares.iter().all(|&s| s == 1.0));
        let weak = NoiseModel::new(1.0, 1e12, 0.5).unwrap();
        let pred = predict_mmse(&traj, &InterpolationKernel::Linear, &grid, &weak, 7).unwrap();
        assert!((pred.total - 20.0 * 0.5).abs() < 1e-9);
    }

    #[test]
    fn trace_identity_trivial_and_random() {
        let (lhs, rhs) = trace_identity_check(&Mat::zeros(3, 5), &Mat::zeros(3, 5)).unwrap();
        assert_eq!((lhs, rhs), (3.0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (s, w) in [(4, 4), (2, 5), (6, 3)] {
            let b = Mat::from_fn(s, w, |_, _| rng.random_range(-1.0..1.0));
            let c = Mat::from_fn(s, w, |_, _| rng.random_range(-1.0..1.0));
            let (lhs, rhs) = trace_identity_check(&b, &c).unwrap();
            assert!(
                (lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0),
                "{s}×{w}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn trace_identity_singular_is_error() {
        // I + B Cᵀ = 0 when B Cᵀ = −I.
        let b = Mat::from_fn(2, 2, |i, j| if i == j { -1.0 } else { 0.0 });
        let c = Mat::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        assert!(trace_identity_check(&b, &c).is_err());
    }

    #[test]
    fn square_traces_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Mat::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let noise = NoiseModel::new(1.0, 0.3, 0.7).unwrap();
        let x = mmse_error_covariance_trace(&a, &noise).unwrap();
        let y = mmse_outer_trace(&a, &noise).unwrap();
        assert!((x - y).abs() < 1e-12 * x);
    }

    #[test]
    fn empirical_mmse_is_deterministic_and_vanishes_without_noise() {
        let a = Mat::from_fn(4, 2, |i, j| if i % 2 == j { 3.0 } else { 0.5 });
        let noise = NoiseModel::new(1.0, 1e-14, 1.0).unwrap();
        let mc = empirical_mmse(&a, &noise, 50, 1).unwrap();
        assert!(mc.mean < 1e-12);
        let noisy = NoiseModel::new(1.0, 0.5, 1.0).unwrap();
        assert_eq!(
            empirical_mmse(&a, &noisy, 20, 9).unwrap(),
            empirical_mmse(&a, &noisy, 20, 9).unwrap()
        );
        assert!(empirical_mmse(&a, &noisy, 0, 9).is_err());
    }

    #[test]
    fn decibel_display() {
        assert_eq!(Decibels::NegInfinity.to_string(), "-inf");
        assert_eq!(Decibels::from_linear(0.1).to_string(), "-10.0000");
    }

    #[test]
    fn metrics_csv_layout() {
        let csv = metrics_csv(&[Metric::new("mnsm", Decibels::Finite(-3.5), "dB")]);
        assert_eq!(csv, "metric,value,unit\nmnsm,-3.5000,dB\n");
    }
}
