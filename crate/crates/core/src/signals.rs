//! Periodic excitation signals.
//!
//! Two kinds are provided. Binary maximum-length sequences match the usual
//! acoustic measurement practice; their periodic autocorrelation is
//! `L_p σ²` at lag zero and `-σ²` elsewhere. Flat-spectrum sequences are
//! exactly perfect (`S Sᵀ = L_p σ² I` for the one-period circulant `S`) and
//! are used where the decoupling algebra has to hold to rounding error.
//!
//! Autocorrelations in this module are unnormalized:
//! `r(m) = Σ_n s(n) s((n + m) mod L_p)`, so `r(0) = L_p σ²`.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supported LFSR orders.
pub const MLS_ORDERS: std::ops::RangeInclusive<u32> = 2..=24;

/// Feedback taps (1-based bit positions) of one primitive polynomial per
/// order, `x^m + Σ x^t + 1`. Index is `m - 2`.
const MLS_TAPS: [&[u32]; 23] = [
    &[2, 1],
    &[3, 2],
    &[4, 3],
    &[5, 3],
    &[6, 5],
    &[7, 6],
    &[8, 6, 5, 4],
    &[9, 5],
    &[10, 7],
    &[11, 9],
    &[12, 6, 4, 1],
    &[13, 4, 3, 1],
    &[14, 5, 3, 1],
    &[15, 14],
    &[16, 15, 13, 4],
    &[17, 14],
    &[18, 11],
    &[19, 6, 2, 1],
    &[20, 17],
    &[21, 19],
    &[22, 21],
    &[23, 18],
    &[24, 23, 22, 17],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Mls,
    FlatSpectrum,
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalKind::Mls => f.write_str("MLS"),
            SignalKind::FlatSpectrum => f.write_str("FlatSpectrum"),
        }
    }
}

impl FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "MLS" | "mls" => Ok(SignalKind::Mls),
            "FlatSpectrum" | "flat" | "flat_spectrum" => Ok(SignalKind::FlatSpectrum),
            other => Err(Error::invalid("signal kind", format!("unknown kind {other:?}"))),
        }
    }
}

/// One period of a periodic excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationSignal {
    kind: SignalKind,
    power: f64,
    samples: Vec<f64>,
}

impl ExcitationSignal {
    /// Wraps an existing period, checking the invariants of `kind`.
    pub fn from_samples(kind: SignalKind, samples: Vec<f64>, power: f64) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::invalid("power", format!("must be positive, got {power}")));
        }
        let len = samples.len();
        if len < 2 {
            return Err(Error::invalid(
                "period length",
                format!("need at least 2 samples, got {len}"),
            ));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("samples", "non-finite value"));
        }
        let mean_power = samples.iter().map(|v| v * v).sum::<f64>() / len as f64;
        if ((mean_power - power) / power).abs() > 1e-9 {
            return Err(Error::invalid(
                "samples",
                format!("mean power {mean_power} does not match declared power {power}"),
            ));
        }
        if kind == SignalKind::Mls {
            if !(len + 1).is_power_of_two() {
                return Err(Error::invalid("period length", format!("{len} is not 2^m - 1")));
            }
            let amp = power.sqrt();
            if samples.iter().any(|v| (v.abs() - amp).abs() > 1e-12 * amp) {
                return Err(Error::invalid("samples", "MLS samples must all be ±sqrt(power)"));
            }
        }
        Ok(Self { kind, power, samples })
    }

    pub fn kind(&self) -> SignalKind {
        self.kind
    }

    pub fn period(&self) -> usize {
        self.samples.len()
    }

    /// Signal power σ_s².
    pub fn power(&self) -> f64 {
        self.power
    }

    /// `γ = L_p σ_s²`, the lag-zero autocorrelation.
    pub fn gamma(&self) -> f64 {
        self.samples.len() as f64 * self.power
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Sample at an arbitrary (possibly negative) time index of the periodic
    /// continuation.
    #[inline]
    pub fn at(&self, n: i64) -> f64 {
        let len = self.samples.len() as i64;
        self.samples[n.rem_euclid(len) as usize]
    }

    /// Circular convolution with `h` over one period: `S h` for the one-period
    /// circulant `S[n][k] = s((n - k) mod L_p)`. `h` shorter than the period
    /// is zero-padded.
    pub fn convolve_period(&self, h: &[f64]) -> Vec<f64> {
        let s = self.spectrum();
        let hf = forward(&pad(h, self.period()));
        inverse(s.iter().zip(&hf).map(|(a, b)| a * b).collect())
    }

    /// `Sᵀ z`, the circular cross-correlation of the period with `z`.
    pub fn correlate_period(&self, z: &[f64]) -> Vec<f64> {
        let s = self.spectrum();
        let zf = forward(&pad(z, self.period()));
        inverse(s.iter().zip(&zf).map(|(a, b)| a.conj() * b).collect())
    }

    /// `S⁻¹ z` by division in the frequency domain.
    pub fn deconvolve_period(&self, z: &[f64]) -> Result<Vec<f64>> {
        let s = self.spectrum();
        let floor = s.iter().map(|c| c.norm()).fold(0.0_f64, f64::max) * 1e-12;
        if let Some(k) = s.iter().position(|c| c.norm() <= floor) {
            return Err(Error::Numerical(format!(
                "excitation spectrum vanishes at bin {k}; circulant is not invertible"
            )));
        }
        let zf = forward(&pad(z, self.period()));
        Ok(inverse(zf.iter().zip(&s).map(|(a, b)| a / b).collect()))
    }

    fn spectrum(&self) -> Vec<Complex64> {
        forward(&self.samples)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::with_capacity(self.samples.len() * 24);
        out.push_str(&format!("# {},{},{}\n", self.kind, self.period(), self.power));
        for v in &self.samples {
            out.push_str(&format!("{v}\n"));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file"))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| Error::parse(path, 1, "missing `# kind,L_p,power` header"))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, 1, "header must have three fields"));
        }
        let kind: SignalKind = fields[0]
            .parse()
            .map_err(|e: Error| Error::parse(path, 1, e.to_string()))?;
        let period: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, 1, "bad period length"))?;
        let power: f64 = fields[2].parse().map_err(|_| Error::parse(path, 1, "bad power"))?;
        let mut samples = Vec::with_capacity(period);
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("not a number: {line:?}")))?;
            samples.push(v);
        }
        if samples.len() != period {
            return Err(Error::parse(
                path,
                1,
                format!("header declares {period} samples, found {}", samples.len()),
            ));
        }
        Self::from_samples(kind, samples, power)
    }
}

/// Binary maximum-length sequence of period `2^order - 1` with amplitude
/// `±sqrt(power)`, from a Fibonacci LFSR seeded with all ones.
pub fn generate_mls(order: u32, power: f64) -> Result<ExcitationSignal> {
    if !MLS_ORDERS.contains(&order) {
        return Err(Error::invalid(
            "MLS order",
            format!(
                "{order} unsupported; supported orders are {}..={}",
                MLS_ORDERS.start(),
                MLS_ORDERS.end()
            ),
        ));
    }
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::invalid("power", format!("must be positive, got {power}")));
    }
    let taps = MLS_TAPS[(order - 2) as usize];
    let mask: u32 = taps.iter().fold(0, |m, &t| m | 1 << (t - 1));
    let len = (1usize << order) - 1;
    let amp = power.sqrt();
    let mut state: u32 = (1 << order) - 1;
    let mut samples = Vec::with_capacity(len);
    for _ in 0..len {
        let out = (state >> (order - 1)) & 1;
        samples.push(if out == 1 { -amp } else { amp });
        let feedback = (state & mask).count_ones() & 1;
        state = ((state << 1) | feedback) & ((1 << order) - 1);
    }
    Ok(ExcitationSignal {
        kind: SignalKind::Mls,
        power,
        samples,
    })
}

/// Real sequence with constant spectral magnitude and seeded random phases.
pub fn generate_flat_spectrum(period: usize, power: f64, seed: u64) -> Result<ExcitationSignal> {
    if period < 2 {
        return Err(Error::invalid(
            "period length",
            format!("need at least 2, got {period}"),
        ));
    }
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::invalid("power", format!("must be positive, got {power}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // |X_k|² = L_p σ² makes r(m) = L_p σ² δ(m).
    let mag = (period as f64 * power).sqrt();
    let mut spec = vec![Complex64::new(0.0, 0.0); period];
    let sign = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { mag } else { -mag };
    spec[0] = Complex64::new(sign(&mut rng), 0.0);
    for k in 1..period.div_ceil(2) {
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let c = Complex64::from_polar(mag, phase);
        spec[k] = c;
        spec[period - k] = c.conj();
    }
    if period.is_multiple_of(2) {
        spec[period / 2] = Complex64::new(sign(&mut rng), 0.0);
    }
    let mut samples = inverse(spec);
    // Rescale away rounding drift so the power invariant is tight.
    let actual = samples.iter().map(|v| v * v).sum::<f64>() / period as f64;
    let scale = (power / actual).sqrt();
    samples.iter_mut().for_each(|v| *v *= scale);
    Ok(ExcitationSignal {
        kind: SignalKind::FlatSpectrum,
        power,
        samples,
    })
}

/// Unnormalized periodic autocorrelation, `r(0) = L_p σ²`.
pub fn periodic_autocorrelation(sig: &ExcitationSignal) -> Vec<f64> {
    let s = sig.samples();
    let len = s.len();
    if len <= 4096 {
        (0..len)
            .map(|m| (0..len).map(|n| s[n] * s[(n + m) % len]).sum())
            .collect()
    } else {
        let f = forward(s);
        inverse(f.iter().map(|c| Complex64::new(c.norm_sqr(), 0.0)).collect())
    }
}

fn pad(v: &[f64], len: usize) -> Vec<f64> {
    assert!(v.len() <= len, "sequence longer than period");
    let mut out = v.to_vec();
    out.resize(len, 0.0);
    out
}

fn forward(v: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

fn inverse(mut buf: Vec<Complex64>) -> Vec<f64> {
    let len = buf.len();
    FftPlanner::new().plan_fft_inverse(len).process(&mut buf);
    buf.iter().map(|c| c.re / len as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_autocorr(s: &[f64]) -> Vec<f64> {
        let len = s.len();
        (0..len)
            .map(|m| (0..len).map(|n| s[n] * s[(n + m) % len]).sum())
            .collect()
    }

    #[test]
    fn mls_period_lengths() {
        assert_eq!(generate_mls(9, 1.0).unwrap().period(), 511);
        assert_eq!(generate_mls(10, 1.0).unwrap().period(), 1023);
    }

    #[test]
    fn mls_order_three_autocorrelation() {
        let s = generate_mls(3, 1.0).unwrap();
        assert_eq!(s.period(), 7);
        assert!(s.samples().iter().all(|v| v.abs() == 1.0));
        assert_eq!(
            brute_autocorr(s.samples()),
            vec![7.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0]
        );
        assert_eq!(
            periodic_autocorrelation(&s),
            vec![7.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0]
        );
    }

    #[test]
    fn mls_autocorrelation_two_valued_for_small_orders() {
        for m in 3..=10 {
            let s = generate_mls(m, 1.0).unwrap();
            let r = brute_autocorr(s.samples());
            let len = s.period() as f64;
            assert_eq!(r[0], len, "order {m}");
            assert!(r[1..].iter().all(|&v| v == -1.0), "order {m}");
        }
    }

    #[test]
    fn every_tap_set_is_maximal() {
        // A primitive feedback polynomial cycles through all 2^m - 1 nonzero states.
        for m in MLS_ORDERS {
            let taps = MLS_TAPS[(m - 2) as usize];
            assert_eq!(taps[0], m);
            let mask: u32 = taps.iter().fold(0, |acc, &t| acc | 1 << (t - 1));
            let full = (1u32 << m) - 1;
            let mut state = full;
            let mut steps = 0u64;
            loop {
                let fb = (state & mask).count_ones() & 1;
                state = ((state << 1) | fb) & full;
                steps += 1;
                if state == full {
                    break;
                }
                assert!(steps < full as u64, "order {m} cycles early");
            }
            assert_eq!(steps, full as u64, "order {m}");
        }
    }

    #[test]
    fn mls_rejects_unsupported_order() {
        let err = generate_mls(25, 1.0).unwrap_err().to_string();
        assert!(err.contains("2..=24"), "{err}");
        assert!(generate_mls(1, 1.0).is_err());
    }

    #[test]
    fn mls_is_deterministic() {
        assert_eq!(generate_mls(11, 2.0).unwrap(), generate_mls(11, 2.0).unwrap());
    }

    #[test]
    fn flat_two_point() {
        for seed in 0..5 {
            let s = generate_flat_spectrum(2, 1.0, seed).unwrap();
            let r = brute_autocorr(s.samples());
            assert!((r[0] - 2.0).abs() < 1e-12);
            assert!(r[1].abs() < 1e-12);
        }
    }

    #[test]
    fn flat_autocorrelation_is_a_pulse() {
        for &len in &[8usize, 16, 127, 511] {
            let s = generate_flat_spectrum(len, 1.0, 7).unwrap();
            let r = brute_autocorr(s.samples());
            assert!((r[0] - len as f64).abs() < 1e-6);
            let off = r[1..].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(off < 1e-9 * len as f64, "L_p={len}: {off}");
        }
    }

    #[test]
    fn flat_rejects_short_period() {
        assert!(generate_flat_spectrum(1, 1.0, 0).is_err());
    }

    #[test]
    fn constant_sequence_autocorrelation() {
        let s = ExcitationSignal::from_samples(SignalKind::FlatSpectrum, vec![0.5; 6], 0.25).unwrap();
        assert_eq!(periodic_autocorrelation(&s), vec![1.5; 6]);
    }

    #[test]
    fn fft_path_matches_direct() {
        let s = generate_mls(13, 1.0).unwrap();
        let r = periodic_autocorrelation(&s);
        assert!((r[0] - 8191.0).abs() < 1e-6);
        assert!(r[1..].iter().all(|v| (v + 1.0).abs() < 1e-6));
    }

    #[test]
    fn circulant_helpers_agree_with_definitions() {
        let s = generate_mls(4, 1.0).unwrap();
        let len = s.period();
        let h: Vec<f64> = (0..10).map(|k| (k as f64 * 0.37).sin()).collect();
        let z = s.convolve_period(&h);
        for n in 0..len {
            let direct: f64 = (0..h.len()).map(|k| s.at(n as i64 - k as i64) * h[k]).sum();
            assert!((z[n] - direct).abs() < 1e-12);
        }
        let back = s.deconvolve_period(&z).unwrap();
        for k in 0..len {
            let want = if k < h.len() { h[k] } else { 0.0 };
            assert!((back[k] - want).abs() < 1e-12);
        }
        let corr = s.correlate_period(&z);
        for k in 0..len {
            let direct: f64 = (0..len).map(|n| s.at(n as i64 - k as i64) * z[n]).sum();
            assert!((corr[k] - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exc.csv");
        let s = generate_flat_spectrum(31, 0.5, 3).unwrap();
        s.save_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# FlatSpectrum,31,0.5\n"));
        assert_eq!(ExcitationSignal::load_csv(&path).unwrap(), s);
    }
}
