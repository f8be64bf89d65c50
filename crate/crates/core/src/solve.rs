//! Recovery of the grid RIRs.
//!
//! The reference path is a dense column-pivoted QR least-squares solve of the
//! full system. The decoupled path solves one `R·Q × N` problem per
//! excitation phase, giving each grid point's periodic response
//! `z_u = γ h̃_u = S h_u`. The static baseline averages periods at fixed
//! microphones, which yields `z_u` directly.
//!
//! Both map `z_u` back to an RIR of length `L` with [`SupportInverse`], the
//! least-squares inverse of the excitation circulant over RIRs supported on
//! the first `L` taps. For a perfect sequence this is `Sᵀ z / γ` truncated;
//! for `L = L_p` it is exact circulant inversion.

use faer::linalg::solvers::{ColPivQr, Llt, SolveLstsq};
use faer::prelude::*;
use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::Metric;
use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::room::RirSet;
use crate::signals::{periodic_autocorrelation, ExcitationSignal, SignalKind};
use crate::system::{DecoupledSystem, FullOperator, FullSystem, MeasurementRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    /// Dense least squares on the full system.
    FullLs,
    /// Least squares on the per-phase blocks.
    DecoupledLs,
    /// Ridge (MMSE) estimate on the full system.
    Ridge,
    /// Conjugate gradients on the normal equations of the full system.
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolveMethod,
    /// Ridge penalty `λ = σ_η² / σ_h²`. `None` estimates it from the record.
    #[serde(default)]
    pub ridge_lambda: Option<f64>,
    /// Relative threshold on the pivoted `R` diagonal for rank decisions.
    #[serde(default = "default_rank_tolerance")]
    pub rank_tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Stopping threshold for the iterative solver, relative to `‖Aᵀx‖`.
    #[serde(default = "default_iterative_tolerance")]
    pub iterative_tolerance: f64,
}

fn default_rank_tolerance() -> f64 {
    1e-10
}

fn default_max_iterations() -> usize {
    5000
}

fn default_iterative_tolerance() -> f64 {
    1e-12
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::new(SolveMethod::DecoupledLs)
    }
}

impl SolverConfig {
    pub fn new(method: SolveMethod) -> Self {
        Self {
            method,
            ridge_lambda: None,
            rank_tolerance: default_rank_tolerance(),
            max_iterations: default_max_iterations(),
            iterative_tolerance: default_iterative_tolerance(),
        }
    }

    pub fn ridge(lambda: f64) -> Self {
        Self {
            ridge_lambda: Some(lambda),
            ..Self::new(SolveMethod::Ridge)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.ridge_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid(
                    "solver.ridge_lambda",
                    format!("must be non-negative, got {l}"),
                ));
            }
        }
        if !(self.rank_tolerance > 0.0) {
            return Err(Error::invalid("solver.rank_tolerance", "must be positive"));
        }
        Ok(())
    }

    fn lambda(&self) -> f64 {
        if self.method == SolveMethod::Ridge {
            self.ridge_lambda.unwrap_or(0.0)
        } else {
            0.0
        }
    }
}

/// Ridge penalty from the record's noise level and the prior variance
/// estimate `σ_h² = ‖x‖² / (M · L_p · σ_s²)`.
pub fn default_ridge_lambda(record: &MeasurementRecord) -> f64 {
    let x = record.samples();
    let energy: f64 = x.iter().map(|v| v * v).sum();
    let exc = record.excitation();
    let sigma_h2 = energy / (x.len() as f64 * exc.period() as f64 * exc.power());
    if sigma_h2 > 0.0 {
        record.noise_variance() / sigma_h2
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagnostics {
    pub block: usize,
    pub rank: usize,
    pub residual_norm: f64,
    /// Ratio of the largest to smallest pivoted `R` diagonal.
    pub condition: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveDiagnostics {
    pub rank: usize,
    pub unknowns: usize,
    pub residual_norm: f64,
    pub iterations: Option<usize>,
    pub blocks: Vec<BlockDiagnostics>,
    /// Energy of the back-transformed responses beyond the RIR length.
    pub truncated_energy: f64,
}

impl SolveDiagnostics {
    /// Summary rows for a `metric,value,unit` report.
    pub fn metrics(&self) -> Vec<Metric> {
        let mut rows = vec![
            Metric::new("rank", self.rank, "count"),
            Metric::new("unknowns", self.unknowns, "count"),
            Metric::new("residual_norm", self.residual_norm, "linear"),
            Metric::new("truncated_energy", self.truncated_energy, "linear"),
        ];
        if let Some(it) = self.iterations {
            rows.push(Metric::new("iterations", it, "count"));
        }
        if let Some(worst) = self.blocks.iter().map(|b| b.condition).reduce(f64::max) {
            rows.push(Metric::new("max_block_condition", worst, "ratio"));
        }
        rows
    }

    /// Per-block rank, residual and condition estimate.
    pub fn blocks_csv(&self) -> String {
        let mut out = String::from("block,rank,residual_norm,condition\n");
        for b in &self.blocks {
            out.push_str(&format!("{},{},{},{}\n", b.block, b.rank, b.residual_norm, b.condition));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub rirs: RirSet,
    pub diagnostics: SolveDiagnostics,
}

fn numerical_rank(qr: &ColPivQr<f64>, tolerance: f64) -> (usize, f64) {
    let r = qr.thin_R();
    let n = r.nrows().min(r.ncols());
    let diag: Vec<f64> = (0..n).map(|i| r[(i, i)].abs()).collect();
    let top = diag.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return (0, f64::INFINITY);
    }
    let rank = diag.iter().take_while(|&&d| d > tolerance * top).count();
    let cond = top / diag[n - 1];
    (rank, cond)
}

fn residual_norm(a: &Mat<f64>, x: &[f64], b: &[f64]) -> f64 {
    (0..a.nrows())
        .map(|i| {
            let ax: f64 = (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum();
            (b[i] - ax).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Appends `sqrt(λ) I` below `a` and zeros below `b`.
fn augment(a: &Mat<f64>, b: &[f64], lambda: f64) -> (Mat<f64>, Vec<f64>) {
    let (m, n) = (a.nrows(), a.ncols());
    let s = lambda.sqrt();
    let aug = Mat::from_fn(m + n, n, |i, j| {
        if i < m {
            a[(i, j)]
        } else if i - m == j {
            s
        } else {
            0.0
        }
    });
    let mut rhs = b.to_vec();
    rhs.resize(m + n, 0.0);
    (aug, rhs)
}

/// Least squares (or ridge) solution of a dense system with a rank check.
fn dense_solve(a: &Mat<f64>, b: &[f64], lambda: f64, tolerance: f64) -> Result<(Vec<f64>, usize, f64)> {
    let (qr, rank, cond) = factor_block(a, lambda, tolerance)?;
    let n = a.ncols();
    let mut x = Mat::from_fn(qr_rows(a, lambda), 1, |i, _| if i < b.len() { b[i] } else { 0.0 });
    qr.solve_lstsq_in_place(&mut x);
    Ok(((0..n).map(|i| x[(i, 0)]).collect(), rank, cond))
}

fn qr_rows(a: &Mat<f64>, lambda: f64) -> usize {
    a.nrows() + if lambda > 0.0 { a.ncols() } else { 0 }
}

/// Column-pivoted QR of `a`, or of `[a; √λ I]` when `λ > 0`, with its
/// numerical rank and condition estimate. Fails unless full column rank.
fn factor_block(a: &Mat<f64>, lambda: f64, tolerance: f64) -> Result<(ColPivQr<f64>, usize, f64)> {
    let n = a.ncols();
    if lambda == 0.0 && a.nrows() < n {
        return Err(Error::RankDeficient {
            rank: a.nrows(),
            unknowns: n,
        });
    }
    let qr = if lambda > 0.0 {
        augment(a, &[], lambda).0.col_piv_qr()
    } else {
        a.col_piv_qr()
    };
    let (rank, cond) = numerical_rank(&qr, tolerance);
    if rank < n {
        return Err(Error::RankDeficient { rank, unknowns: n });
    }
    Ok((qr, rank, cond))
}

fn rirs_from_stacked(grid: &GridSpec, rir_length: usize, sample_rate: f64, h: Vec<f64>) -> Result<RirSet> {
    RirSet::new(*grid, rir_length, sample_rate, h)
}

/// Solves the full system for all `N·L` coefficients.
pub fn solve_full(sys: &FullSystem, cfg: &SolverConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let unknowns = sys.matrix.ncols();
    match cfg.method {
        SolveMethod::FullLs | SolveMethod::Ridge | SolveMethod::DecoupledLs => {
            let lambda = cfg.lambda();
            let (h, rank, _) = dense_solve(&sys.matrix, &sys.rhs, lambda, cfg.rank_tolerance)?;
            let residual = residual_norm(&sys.matrix, &h, &sys.rhs);
            let diagnostics = SolveDiagnostics {
                rank,
                unknowns,
                residual_norm: residual,
                ..Default::default()
            };
            Ok(Reconstruction {
                rirs: rirs_from_stacked(&sys.grid, sys.rir_length, sys.sample_rate, h)?,
                diagnostics,
            })
        }
        SolveMethod::Iterative => {
            let a = &sys.matrix;
            let apply = |v: &[f64]| {
                (0..a.nrows())
                    .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * v[j]).sum())
                    .collect()
            };
            let apply_t = |r: &[f64]| {
                (0..a.ncols())
                    .map(|j| (0..a.nrows()).map(|i| a[(i, j)] * r[i]).sum())
                    .collect()
            };
            let (h, iterations) = cgls(apply, apply_t, &sys.rhs, unknowns, cfg.ridge_lambda.unwrap_or(0.0), cfg)?;
            let residual = residual_norm(a, &h, &sys.rhs);
            let diagnostics = SolveDiagnostics {
                rank: unknowns,
                unknowns,
                residual_norm: residual,
                iterations: Some(iterations),
                ..Default::default()
            };
            Ok(Reconstruction {
                rirs: rirs_from_stacked(&sys.grid, sys.rir_length, sys.sample_rate, h)?,
                diagnostics,
            })
        }
    }
}

/// Matrix-free conjugate-gradient least squares on the full model, for
/// systems too large to materialize.
pub fn solve_iterative(
    op: &FullOperator,
    rhs: &[f64],
    grid: &GridSpec,
    rir_length: usize,
    sample_rate: f64,
    cfg: &SolverConfig,
) -> Result<Reconstruction> {
    let (h, iterations) = cgls(
        |v| op.apply(v),
        |r| op.apply_transpose(r),
        rhs,
        op.ncols(),
        cfg.ridge_lambda.unwrap_or(0.0),
        cfg,
    )?;
    let ah = op.apply(&h);
    let residual = ah.iter().zip(rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let diagnostics = SolveDiagnostics {
        rank: op.ncols(),
        unknowns: op.ncols(),
        residual_norm: residual,
        iterations: Some(iterations),
        ..Default::default()
    };
    Ok(Reconstruction {
        rirs: RirSet::new(*grid, rir_length, sample_rate, h)?,
        diagnostics,
    })
}

/// CGLS for `min ‖b - A x‖² + λ‖x‖²`.
fn cgls(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_t: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    n: usize,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, usize)> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut s = apply_t(&r);
    let norm0 = dot(&s, &s).sqrt();
    if norm0 == 0.0 {
        return Ok((x, 0));
    }
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    for it in 1..=cfg.max_iterations {
        let q = apply(&p);
        let denom = dot(&q, &q) + lambda * dot(&p, &p);
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::Numerical(format!(
                "conjugate gradients broke down at iteration {it}"
            )));
        }
        let alpha = gamma / denom;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&q).for_each(|(ri, qi)| *ri -= alpha * qi);
        s = apply_t(&r);
        if lambda > 0.0 {
            s.iter_mut().zip(&x).for_each(|(si, xi)| *si -= lambda * xi);
        }
        let gamma_new = dot(&s, &s);
        if gamma_new.sqrt() <= cfg.iterative_tolerance * norm0 {
            return Ok((x, it));
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p.iter_mut().zip(&s).for_each(|(pi, si)| *pi = si + beta * *pi);
    }
    Err(Error::Numerical(format!(
        "conjugate gradients did not converge in {} iterations",
        cfg.max_iterations
    )))
}

/// Per-block factorizations of a decoupled system, reusable across
/// measurement vectors that share the same trajectory.
pub struct DecoupledFactorization {
    blocks: Vec<ColPivQr<f64>>,
    diagnostics: Vec<(usize, f64)>,
    lambda: f64,
    rows: usize,
}

impl DecoupledFactorization {
    pub fn new(sys: &DecoupledSystem, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let lambda = cfg.lambda() * sys.gamma();
        let rows = sys.block_rows();
        let n = sys.unknowns();
        if lambda == 0.0 && rows < n {
            return Err(Error::SingularBlock {
                block: 0,
                rank: rows,
                unknowns: n,
            });
        }
        let factored: Vec<(ColPivQr<f64>, (usize, f64))> = (0..sys.block_count())
            .into_par_iter()
            .map(|l| {
                let a = sys.block_matrix(l);
                let work = if lambda > 0.0 { augment(&a, &[], lambda).0 } else { a };
                let qr = work.col_piv_qr();
                let (rank, cond) = numerical_rank(&qr, cfg.rank_tolerance);
                if rank < n {
                    return Err(Error::SingularBlock {
                        block: l,
                        rank,
                        unknowns: n,
                    });
                }
                Ok((qr, (rank, cond)))
            })
            .collect::<Result<_>>()?;
        let (blocks, diagnostics) = factored.into_iter().unzip();
        Ok(Self {
            blocks,
            diagnostics,
            lambda,
            rows,
        })
    }

    pub fn solve(
        &self,
        sys: &DecoupledSystem,
        excitation: &ExcitationSignal,
        rir_length: usize,
    ) -> Result<Reconstruction> {
        if sys.block_count() != self.blocks.len() || sys.block_rows() != self.rows {
            return Err(Error::ShapeMismatch(
                "decoupled system does not match its factorization".into(),
            ));
        }
        let n = sys.unknowns();
        let extra = if self.lambda > 0.0 { n } else { 0 };
        let solved: Vec<(Vec<f64>, BlockDiagnostics)> = self
            .blocks
            .par_iter()
            .enumerate()
            .map(|(l, qr)| {
                let b = sys.block_rhs(l);
                let mut x = Mat::from_fn(b.len() + extra, 1, |i, _| if i < b.len() { b[i] } else { 0.0 });
                qr.solve_lstsq_in_place(&mut x);
                let sol: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
                let residual = residual_norm(&sys.block_matrix(l), &sol, &b);
                let (rank, condition) = self.diagnostics[l];
                (
                    sol,
                    BlockDiagnostics {
                        block: l,
                        rank,
                        residual_norm: residual,
                        condition,
                    },
                )
            })
            .collect();
        let (per_phase, block_diag) = solved.into_iter().unzip();
        finish_decoupled(sys, excitation, rir_length, per_phase, block_diag)
    }
}

/// Solves every phase block and maps the per-phase responses back to RIRs
/// of length `rir_length`.
pub fn solve_decoupled(
    sys: &DecoupledSystem,
    excitation: &ExcitationSignal,
    cfg: &SolverConfig,
    rir_length: usize,
) -> Result<Reconstruction> {
    let rhs = (0..sys.block_count()).map(|l| sys.block_rhs(l)).collect::<Vec<_>>();
    let mut out = solve_blocks(sys, excitation, cfg, rir_length, &[rhs])?;
    Ok(out.pop().expect("one measurement vector"))
}

/// [`solve_decoupled`] for several measurement vectors sharing the system's
/// trajectory. Each block is factored once and dropped before the next, so
/// memory stays at one dense block per worker.
pub fn solve_decoupled_batch(
    sys: &DecoupledSystem,
    measurements: &[&[f64]],
    excitation: &ExcitationSignal,
    cfg: &SolverConfig,
    rir_length: usize,
) -> Result<Vec<Reconstruction>> {
    if let Some(m) = measurements.iter().find(|m| m.len() != sys.sample_count()) {
        return Err(Error::ShapeMismatch(format!(
            "{} samples, expected {}",
            m.len(),
            sys.sample_count()
        )));
    }
    let rhs: Vec<Vec<Vec<f64>>> = measurements
        .iter()
        .map(|m| (0..sys.block_count()).map(|l| sys.block_values(m, l)).collect())
        .collect();
    solve_blocks(sys, excitation, cfg, rir_length, &rhs)
}

/// `rhs[k][ℓ]` is block `ℓ` of measurement `k`.
fn solve_blocks(
    sys: &DecoupledSystem,
    excitation: &ExcitationSignal,
    cfg: &SolverConfig,
    rir_length: usize,
    rhs: &[Vec<Vec<f64>>],
) -> Result<Vec<Reconstruction>> {
    cfg.validate()?;
    if excitation.period() != sys.block_count() {
        return Err(Error::ShapeMismatch(format!(
            "excitation period {} does not match {} blocks",
            excitation.period(),
            sys.block_count()
        )));
    }
    let lambda = cfg.lambda() * sys.gamma();
    let n = sys.unknowns();
    let solved: Vec<Vec<(Vec<f64>, BlockDiagnostics)>> = (0..sys.block_count())
        .into_par_iter()
        .map(|l| {
            let a = sys.block_matrix(l);
            let (qr, rank, condition) = factor_block(&a, lambda, cfg.rank_tolerance).map_err(|e| match e {
                Error::RankDeficient { rank, unknowns } => Error::SingularBlock {
                    block: l,
                    rank,
                    unknowns,
                },
                other => other,
            })?;
            let extra = if lambda > 0.0 { n } else { 0 };
            Ok(rhs
                .iter()
                .map(|blocks| {
                    let b = &blocks[l];
                    let mut x = Mat::from_fn(b.len() + extra, 1, |i, _| if i < b.len() { b[i] } else { 0.0 });
                    qr.solve_lstsq_in_place(&mut x);
                    let sol: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
                    let residual = residual_norm(&a, &sol, b);
                    (
                        sol,
                        BlockDiagnostics {
                            block: l,
                            rank,
                            residual_norm: residual,
                            condition,
                        },
                    )
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut per_rhs: Vec<(Vec<Vec<f64>>, Vec<BlockDiagnostics>)> = rhs
        .iter()
        .map(|_| (Vec::with_capacity(solved.len()), Vec::with_capacity(solved.len())))
        .collect();
    for block in solved {
        for (k, (sol, diag)) in block.into_iter().enumerate() {
            per_rhs[k].0.push(sol);
            per_rhs[k].1.push(diag);
        }
    }
    per_rhs
        .into_iter()
        .map(|(per_phase, diag)| finish_decoupled(sys, excitation, rir_length, per_phase, diag))
        .collect()
}

fn finish_decoupled(
    sys: &DecoupledSystem,
    excitation: &ExcitationSignal,
    rir_length: usize,
    per_phase: Vec<Vec<f64>>,
    blocks: Vec<BlockDiagnostics>,
) -> Result<Reconstruction> {
    let period = sys.block_count();
    if rir_length == 0 || rir_length > period {
        return Err(Error::invalid(
            "rir_length",
            format!("must lie in 1..={period}, got {rir_length}"),
        ));
    }
    let n = sys.unknowns();
    let gamma = sys.gamma();
    let inverse = SupportInverse::new(excitation, rir_length)?;
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|u| {
            let z: Vec<f64> = per_phase.iter().map(|sol| gamma * sol[u]).collect();
            Ok((inverse.apply(&z), inverse.tail_energy(&z)?))
        })
        .collect::<Result<_>>()?;
    let truncated = rows.iter().map(|r| r.1).sum();
    let data = rows.into_iter().flat_map(|r| r.0).collect();
    let residual = blocks.iter().map(|b| b.residual_norm.powi(2)).sum::<f64>().sqrt();
    let rank = blocks.iter().map(|b| b.rank).sum();
    let diagnostics = SolveDiagnostics {
        rank,
        unknowns: n * period,
        residual_norm: residual,
        iterations: None,
        blocks,
        truncated_energy: truncated,
    };
    Ok(Reconstruction {
        rirs: RirSet::new(*sys.grid(), rir_length, sys.sample_rate(), data)?,
        diagnostics,
    })
}

/// Maps `h̃_u = S h_u / γ` back to `h_u` over one full period by exact
/// circulant inversion.
pub fn back_transform(excitation: &ExcitationSignal, gamma: f64, transformed: &[f64]) -> Result<Vec<f64>> {
    match excitation.kind() {
        SignalKind::FlatSpectrum => Ok(excitation.correlate_period(transformed)),
        SignalKind::Mls => {
            let scaled: Vec<f64> = transformed.iter().map(|v| v * gamma).collect();
            excitation.deconvolve_period(&scaled)
        }
    }
}

enum Gram {
    /// `S_Lᵀ S_L = α I + β J`.
    TwoLevel {
        alpha: f64,
        beta: f64,
    },
    General(Llt<f64>),
}

/// Least-squares inverse of one excitation period restricted to RIRs of
/// length `L`: `h = (S_Lᵀ S_L)⁻¹ S_Lᵀ z`, where `S_L` holds the first `L`
/// columns of the `L_p × L_p` circulant.
///
/// `S_Lᵀ S_L` is the Toeplitz matrix of the periodic autocorrelation. When the
/// autocorrelation is two-level (perfect sequences, MLS) it is `α I + β J`
/// and is inverted in closed form; any other sequence is factored.
pub struct SupportInverse {
    excitation: ExcitationSignal,
    length: usize,
    gram: Gram,
}

impl SupportInverse {
    pub fn new(excitation: &ExcitationSignal, length: usize) -> Result<Self> {
        let period = excitation.period();
        if length == 0 || length > period {
            return Err(Error::invalid(
                "rir_length",
                format!("must lie in 1..={period}, got {length}"),
            ));
        }
        let r = periodic_autocorrelation(excitation);
        let r0 = r[0];
        let side = r.get(1).copied().unwrap_or(0.0);
        let two_level = r[1..].iter().all(|&v| (v - side).abs() <= 1e-9 * r0.abs());
        let gram = if two_level {
            let (alpha, beta) = (r0 - side, side);
            if alpha.abs() <= 1e-12 * r0.abs() || (alpha + beta * length as f64).abs() <= 1e-12 * r0.abs() {
                return Err(Error::Numerical(format!(
                    "excitation cannot resolve {length}-tap responses"
                )));
            }
            Gram::TwoLevel { alpha, beta }
        } else {
            let t = Mat::from_fn(length, length, |j, k| r[(k + period - j) % period]);
            Gram::General(
                t.llt(faer::Side::Lower)
                    .map_err(|_| Error::Numerical(format!("excitation cannot resolve {length}-tap responses")))?,
            )
        };
        Ok(Self {
            excitation: excitation.clone(),
            length,
            gram,
        })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// RIR of length `L` whose periodic response best matches `z`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut c = self.excitation.correlate_period(z);
        c.truncate(self.length);
        match &self.gram {
            Gram::TwoLevel { alpha, beta } => {
                let total: f64 = c.iter().sum();
                let shift = beta * total / (alpha + beta * self.length as f64);
                c.iter().map(|v| (v - shift) / alpha).collect()
            }
            Gram::General(llt) => {
                let mut col = Mat::from_fn(self.length, 1, |i, _| c[i]);
                llt.solve_in_place(col.as_mut());
                (0..self.length).map(|i| col[(i, 0)]).collect()
            }
        }
    }

    /// Energy that exact circulant inversion of `z` places beyond tap `L`.
    pub fn tail_energy(&self, z: &[f64]) -> Result<f64> {
        let full = self.excitation.deconvolve_period(z)?;
        Ok(full[self.length..].iter().map(|v| v * v).sum())
    }
}

/// Classical measurement at fixed microphones: average the `R` periods of
/// each microphone and deconvolve the average with [`SupportInverse`].
pub fn static_deconvolve(record: &MeasurementRecord, grid: &GridSpec, rir_length: usize) -> Result<RirSet> {
    let exc = record.excitation();
    let period = exc.period();
    let traj = record.trajectory();
    let q = traj.mic_count();
    let steps = traj.sample_count();
    if !steps.is_multiple_of(period) {
        return Err(Error::invalid(
            "trajectory",
            format!("{steps} samples is not a whole number of periods of {period}"),
        ));
    }
    if rir_length == 0 || rir_length > period {
        return Err(Error::invalid(
            "rir_length",
            format!("must lie in 1..={period}, got {rir_length}"),
        ));
    }
    let periods = steps / period;
    let mut sums = vec![vec![0.0; period]; grid.len()];
    let mut hits = vec![0usize; grid.len()];
    for mic in 0..q {
        let p = traj.position(0, mic);
        if (0..steps).any(|n| traj.position(n, mic) != p) {
            return Err(Error::invalid("trajectory", format!("microphone {mic} is not static")));
        }
        let u = grid.node_at(p).ok_or(Error::OutsideRegion {
            position: p,
            region: "grid nodes",
        })?;
        hits[u] += periods;
        for n in 0..steps {
            sums[u][n % period] += record.samples()[n * q + mic];
        }
    }
    if let Some(u) = hits.iter().position(|&h| h == 0) {
        return Err(Error::invalid("trajectory", format!("no microphone at grid point {u}")));
    }
    let inverse = SupportInverse::new(exc, rir_length)?;
    let mut data = Vec::with_capacity(grid.len() * rir_length);
    for (u, sum) in sums.iter().enumerate() {
        let avg: Vec<f64> = sum.iter().map(|v| v / hits[u] as f64).collect();
        data.extend(inverse.apply(&avg));
    }
    RirSet::new(*grid, rir_length, record.sample_rate(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{gen_grid_snapped, gen_static, gen_uniform};
    use crate::interp::InterpolationKernel;
    use crate::signals::{generate_flat_spectrum, generate_mls};
    use crate::system::{assemble_decoupled, assemble_full, full_matrix};

    fn grid() -> GridSpec {
        GridSpec::new([0.0, 0.0, 0.0], 0.1, [2, 2, 1]).unwrap()
    }

    fn record_from(
        a: &Mat<f64>,
        h: &[f64],
        traj: crate::geometry::Trajectory,
        exc: ExcitationSignal,
        periods: usize,
    ) -> MeasurementRecord {
        let x: Vec<f64> = (0..a.nrows())
            .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * h[j]).sum())
            .collect();
        MeasurementRecord::new(x, traj, exc, periods, None, 0, 8000.0).unwrap()
    }

    #[test]
    fn zero_measurement_gives_zero_rirs() {
        let g = grid();
        let exc = generate_flat_spectrum(8, 1.0, 1).unwrap();
        let traj = gen_uniform(&g, 1, 8 * 6, 3).unwrap();
        let rec = MeasurementRecord::new(vec![0.0; 48], traj, exc.clone(), 6, None, 0, 8000.0).unwrap();
        let kernel = InterpolationKernel::Linear;
        let full = solve_full(
            &assemble_full(&rec, &kernel, &g, 4).unwrap(),
            &SolverConfig::new(SolveMethod::FullLs),
        )
        .unwrap();
        assert!(full.rirs.data().iter().all(|&v| v == 0.0));
        let dec = solve_decoupled(
            &assemble_decoupled(&rec, &kernel, &g).unwrap(),
            &exc,
            &SolverConfig::default(),
            4,
        )
        .unwrap();
        assert!(dec.rirs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let g = grid();
        let exc = generate_flat_spectrum(8, 1.0, 1).unwrap();
        // A single static mic cannot separate four grid points.
        let traj = gen_static(&[[0.0, 0.0, 0.0]], 32).unwrap();
        let rec = MeasurementRecord::new(vec![1.0; 32], traj, exc.clone(), 4, None, 0, 8000.0).unwrap();
        let err = solve_full(
            &assemble_full(&rec, &InterpolationKernel::Linear, &g, 4).unwrap(),
            &SolverConfig::new(SolveMethod::FullLs),
        )
        .unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }), "{err}");
        let err = solve_decoupled(
            &assemble_decoupled(&rec, &InterpolationKernel::Linear, &g).unwrap(),
            &exc,
            &SolverConfig::default(),
            4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingularBlock { block: 0, .. }), "{err}");
    }

    #[test]
    fn ridge_shrinks_monotonically() {
        let g = grid();
        let exc = generate_mls(4, 1.0).unwrap();
        let traj = gen_uniform(&g, 1, 15 * 8, 4).unwrap();
        let kernel = InterpolationKernel::Linear;
        let a = full_matrix(&traj, &exc, &kernel, &g, 6, usize::MAX).unwrap();
        let h: Vec<f64> = (0..a.ncols()).map(|i| (i as f64).sin()).collect();
        let rec = record_from(&a, &h, traj, exc, 8);
        let sys = assemble_full(&rec, &kernel, &g, 6).unwrap();
        let mut last = f64::INFINITY;
        for &lambda in &[0.0, 1.0, 10.0, 100.0, 1e4, 1e6, 1e9] {
            let r = solve_full(&sys, &SolverConfig::ridge(lambda)).unwrap();
            let norm = r.rirs.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < last, "λ={lambda}");
            last = norm;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn residual_is_orthogonal_to_columns() {
        let g = grid();
        let exc = generate_mls(4, 1.0).unwrap();
        let traj = gen_uniform(&g, 2, 15 * 4, 8).unwrap();
        let kernel = InterpolationKernel::Lagrange { max_degree: 3 };
        let a = full_matrix(&traj, &exc, &kernel, &g, 10, usize::MAX).unwrap();
        let x: Vec<f64> = (0..a.nrows()).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let rec = MeasurementRecord::new(x.clone(), traj, exc, 4, None, 0, 8000.0).unwrap();
        let sol = solve_full(
            &assemble_full(&rec, &kernel, &g, 10).unwrap(),
            &SolverConfig::new(SolveMethod::FullLs),
        )
        .unwrap();
        let h = sol.rirs.data();
        let r: Vec<f64> = (0..a.nrows())
            .map(|i| x[i] - (0..a.ncols()).map(|j| a[(i, j)] * h[j]).sum::<f64>())
            .collect();
        let a_norm = (0..a.nrows())
            .flat_map(|i| (0..a.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)].powi(2))
            .sum::<f64>()
            .sqrt();
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..a.ncols() {
            let g: f64 = (0..a.nrows()).map(|i| a[(i, j)] * r[i]).sum();
            assert!(g.abs() < 1e-8 * a_norm * x_norm, "column {j}: {g}");
        }
    }

    #[test]
    fn batch_solve_matches_single_solves() {
        let g = grid();
        let exc = generate_mls(4, 1.0).unwrap();
        let traj = gen_grid_snapped(&g, 1, exc.period() * 12, exc.period(), 5).unwrap();
        let x: Vec<f64> = (0..traj.sample_count()).map(|i| (i as f64 * 0.37).sin()).collect();
        let clean = MeasurementRecord::new(x, traj, exc.clone(), 12, None, 0, 8000.0).unwrap();
        let noisy: Vec<_> = [3, 4].iter().map(|&s| clean.with_noise(30.0, s)).collect();
        let kernel = InterpolationKernel::Linear;
        let sys = assemble_decoupled(&clean, &kernel, &g).unwrap();
        let cfg = SolverConfig::default();
        let samples: Vec<&[f64]> = noisy.iter().map(|r| r.samples()).collect();
        let batch = solve_decoupled_batch(&sys, &samples, &exc, &cfg, 10).unwrap();
        for (rec, est) in noisy.iter().zip(&batch) {
            let single = solve_decoupled(&sys.with_rhs(rec.samples().to_vec()).unwrap(), &exc, &cfg, 10).unwrap();
            assert_eq!(single.rirs.data(), est.rirs.data());
        }
        assert!(solve_decoupled_batch(&sys, &[&samples[0][1..]], &exc, &cfg, 10).is_err());
    }

    #[test]
    fn iterative_matches_dense() {
        let g = grid();
        let exc = generate_flat_spectrum(16, 1.0, 2).unwrap();
        let traj = gen_uniform(&g, 1, 16 * 6, 9).unwrap();
        let kernel = InterpolationKernel::Linear;
        let rec = {
            let a = full_matrix(&traj, &exc, &kernel, &g, 12, usize::MAX).unwrap();
            let x: Vec<f64> = (0..a.nrows()).map(|i| (i as f64 * 0.31).cos()).collect();
            MeasurementRecord::new(x, traj.clone(), exc.clone(), 6, None, 0, 8000.0).unwrap()
        };
        let sys = assemble_full(&rec, &kernel, &g, 12).unwrap();
        let dense = solve_full(&sys, &SolverConfig::new(SolveMethod::FullLs)).unwrap();
        let iter = solve_full(&sys, &SolverConfig::new(SolveMethod::Iterative)).unwrap();
        let op = FullOperator::new(&traj, &exc, &kernel, &g, 12).unwrap();
        let free = solve_iterative(
            &op,
            rec.samples(),
            &g,
            12,
            8000.0,
            &SolverConfig::new(SolveMethod::Iterative),
        )
        .unwrap();
        let scale = dense.rirs.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        for other in [&iter, &free] {
            let diff = dense
                .rirs
                .data()
                .iter()
                .zip(other.rirs.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(diff < 1e-6 * scale, "{diff}");
        }
    }

    #[test]
    fn static_deconvolution_is_exact_without_noise() {
        let g = grid();
        let exc = generate_mls(5, 1.0).unwrap();
        let nodes: Vec<_> = (0..4).map(|u| g.position(u)).collect();
        let traj = gen_static(&nodes, 3 * exc.period()).unwrap();
        let truth: Vec<Vec<f64>> = (0..4)
            .map(|u| (0..20).map(|k| ((u + 1) as f64) * (-(k as f64) / 5.0).exp()).collect())
            .collect();
        let mut x = vec![0.0; traj.len()];
        for n in 0..traj.sample_count() {
            for (q, h) in truth.iter().enumerate() {
                x[n * 4 + q] = (0..20).map(|k| h[k] * exc.at(n as i64 - k as i64)).sum();
            }
        }
        let rec = MeasurementRecord::new(x, traj, exc, 3, None, 0, 8000.0).unwrap();
        let est = static_deconvolve(&rec, &g, 20).unwrap();
        for u in 0..4 {
            for k in 0..20 {
                assert!((est.row(u)[k] - truth[u][k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn static_rejects_moving_or_off_grid_mics() {
        let g = grid();
        let exc = generate_mls(3, 1.0).unwrap();
        let traj = gen_static(&[[0.05, 0.0, 0.0]], 7).unwrap();
        let rec = MeasurementRecord::new(vec![0.0; 7], traj, exc.clone(), 1, None, 0, 8000.0).unwrap();
        assert!(static_deconvolve(&rec, &g, 5).is_err());
        let moving = gen_grid_snapped(&g, 4, 7, 1, 0).unwrap();
        let rec = MeasurementRecord::new(vec![0.0; 28], moving, exc, 1, None, 0, 8000.0).unwrap();
        assert!(static_deconvolve(&rec, &g, 5).is_err());
    }

    #[test]
    fn factorization_reuse_matches_direct_solve() {
        let g = grid();
        let exc = generate_mls(4, 1.0).unwrap();
        let traj = gen_grid_snapped(&g, 2, 15 * 6, 15, 1).unwrap();
        let x: Vec<f64> = (0..traj.len()).map(|i| (i as f64 * 0.17).sin()).collect();
        let rec = MeasurementRecord::new(x, traj, exc.clone(), 6, None, 0, 8000.0).unwrap();
        let sys = assemble_decoupled(&rec, &InterpolationKernel::Linear, &g).unwrap();
        let cfg = SolverConfig::default();
        let direct = solve_decoupled(&sys, &exc, &cfg, 10).unwrap();
        let fact = DecoupledFactorization::new(&sys, &cfg).unwrap();
        let reused = fact.solve(&sys, &exc, 10).unwrap();
        for (a, b) in direct.rirs.data().iter().zip(reused.rirs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn ramp(len: usize) -> Vec<f64> {
        (0..len)
            .map(|k| (0.7_f64).powi(k as i32) * if k % 3 == 0 { -1.0 } else { 1.0 } + 0.05)
            .collect()
    }

    #[test]
    fn support_inverse_full_length_is_circulant_inverse() {
        let exc = generate_mls(5, 2.0).unwrap();
        let z = exc.convolve_period(&ramp(31));
        let a = SupportInverse::new(&exc, 31).unwrap().apply(&z);
        let b = exc.deconvolve_period(&z).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn support_inverse_is_exact_on_short_responses() {
        let samples: Vec<f64> = (0..40).map(|k| ((k * 7 % 11) as f64 - 5.0) + 0.3).collect();
        let power = samples.iter().map(|v| v * v).sum::<f64>() / 40.0;
        let generic = ExcitationSignal::from_samples(SignalKind::FlatSpectrum, samples, power).unwrap();
        for exc in [generate_mls(6, 0.5).unwrap(), generic] {
            let h = ramp(12);
            let inv = SupportInverse::new(&exc, 12).unwrap();
            let z = exc.convolve_period(&h);
            for (x, y) in inv.apply(&z).iter().zip(&h) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
            assert!(inv.tail_energy(&z).unwrap() < 1e-18);
        }
    }

    #[test]
    fn support_inverse_of_flat_spectrum_is_truncated_correlation() {
        let exc = generate_flat_spectrum(64, 1.5, 9).unwrap();
        let z: Vec<f64> = (0..64).map(|k| ((k * 13 % 17) as f64).sin()).collect();
        let got = SupportInverse::new(&exc, 20).unwrap().apply(&z);
        let corr = exc.correlate_period(&z);
        for (x, c) in got.iter().zip(&corr) {
            assert!((x - c / exc.gamma()).abs() < 1e-9);
        }
    }

    #[test]
    fn support_inverse_rejects_bad_lengths() {
        let exc = generate_mls(4, 1.0).unwrap();
        assert!(SupportInverse::new(&exc, 0).is_err());
        assert!(SupportInverse::new(&exc, 16).is_err());
    }
}
