//! Image-source simulation of a rectangular room, used as the ground truth
//! that reconstructions are measured against.
//!
//! Walls share one frequency-independent reflection coefficient derived from
//! the target reverberation time with Sabine's formula. Each image source
//! contributes `β^k / (4π d)` at a delay of `d / c₀` seconds, rendered as a
//! Hann-windowed sinc low-passed at `0.9 · min(f_c, f_s / 2)`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::Vec3;

/// Number of taps of the fractional-delay kernel.
pub const SINC_TAPS: usize = 81;
const HALF_WIDTH: f64 = SINC_TAPS as f64 / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMode {
    /// Band-limited fractional delay.
    #[default]
    WindowedSinc,
    /// Round every arrival to the nearest sample. Fast, not band-limited.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Room size in meters; the room spans `[0, dimensions]`.
    pub dimensions: Vec3,
    pub rt60: f64,
    pub speed_of_sound: f64,
    pub sample_rate: f64,
    /// Band limit of the simulated field in Hz.
    pub cutoff: f64,
    pub source: Vec3,
    /// Cap on the number of wall reflections per image. `None` picks an
    /// order long enough to cover the reverberation time.
    #[serde(default)]
    pub max_image_order: Option<usize>,
    /// Overrides the Sabine-derived wall reflection coefficient; `Some(0.0)`
    /// gives a free field.
    #[serde(default)]
    pub wall_reflection: Option<f64>,
    #[serde(default)]
    pub delay_mode: DelayMode,
    /// Cutoff in Hz of the two-pole DC-blocking filter applied to every RIR,
    /// as in the original image method. `None` leaves the DC response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub highpass: Option<f64>,
}

impl RoomSpec {
    /// 5.8 m × 4.15 m × 2.55 m room with RT60 = 0.3 s and the source at
    /// (1.4, 1.6, 1.0), sampled at 8 kHz with a 4 kHz band limit and a 100 Hz
    /// DC-blocking high-pass.
    pub fn reference() -> Self {
        Self {
            dimensions: [5.8, 4.15, 2.55],
            rt60: 0.3,
            speed_of_sound: 343.0,
            sample_rate: 8000.0,
            cutoff: 4000.0,
            source: [1.4, 1.6, 1.0],
            max_image_order: None,
            wall_reflection: None,
            delay_mode: DelayMode::WindowedSinc,
            highpass: Some(100.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::invalid(
                "room.dimensions",
                format!("all must be positive, got {:?}", self.dimensions),
            ));
        }
        if !(self.rt60 > 0.0 && self.rt60.is_finite()) {
            return Err(Error::invalid(
                "room.rt60",
                format!("must be positive, got {}", self.rt60),
            ));
        }
        if !(self.speed_of_sound > 0.0 && self.speed_of_sound.is_finite()) {
            return Err(Error::invalid(
                "room.speed_of_sound",
                format!("must be positive, got {}", self.speed_of_sound),
            ));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::invalid(
                "room.sample_rate",
                format!("must be positive, got {}", self.sample_rate),
            ));
        }
        if !(self.cutoff > 0.0 && self.cutoff <= self.sample_rate / 2.0) {
            return Err(Error::invalid(
                "room.cutoff",
                format!(
                    "must lie in (0, sample_rate/2], got {} at {} Hz",
                    self.cutoff, self.sample_rate
                ),
            ));
        }
        if !(0..3).all(|a| self.source[a] > 0.0 && self.source[a] < self.dimensions[a]) {
            return Err(Error::invalid(
                "room.source",
                format!("{:?} is not strictly inside the room", self.source),
            ));
        }
        if let Some(f) = self.highpass {
            if !(f > 0.0 && f < self.sample_rate / 2.0) {
                return Err(Error::invalid(
                    "room.highpass",
                    format!("must lie in (0, sample_rate/2), got {f}"),
                ));
            }
        }
        if let Some(b) = self.wall_reflection {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::invalid(
                    "room.wall_reflection",
                    format!("must lie in [0, 1], got {b}"),
                ));
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dimensions;
        2.0 * (x * y + x * z + y * z)
    }

    /// Uniform wall pressure reflection coefficient `β = sqrt(1 - α)` with the
    /// absorption `α = 24 ln10 V / (c S T)` from Sabine's formula, clamped to
    /// `[0, 1]`.
    pub fn reflection_coefficient(&self) -> f64 {
        if let Some(b) = self.wall_reflection {
            return b;
        }
        let alpha = 24.0 * std::f64::consts::LN_10 * self.volume() / (self.speed_of_sound * self.surface() * self.rt60);
        (1.0 - alpha.min(1.0)).sqrt()
    }

    pub fn image_order(&self) -> usize {
        self.max_image_order.unwrap_or_else(|| {
            let min_dim = self.dimensions.iter().copied().fold(f64::INFINITY, f64::min);
            (self.speed_of_sound * self.rt60 / min_dim).ceil() as usize + 1
        })
    }

    /// Cutoff of the fractional-delay low-pass in Hz.
    pub fn lowpass_cutoff(&self) -> f64 {
        0.9 * self.cutoff.min(self.sample_rate / 2.0)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= self.dimensions[a])
    }
}

/// Image-source room impulse response from the room's source to `receiver`,
/// `length` samples long.
///
/// Arrivals closer than one sample period of travel (`c₀ / f_s`) use the
/// amplitude at that distance instead of the singular `1 / d`.
pub fn simulate_rir(room: &RoomSpec, receiver: Vec3, length: usize) -> Result<Vec<f64>> {
    room.validate()?;
    if length == 0 {
        return Err(Error::invalid("length", "RIR length must be positive"));
    }
    if !room.contains(receiver) {
        return Err(Error::OutsideRegion {
            position: receiver,
            region: "room",
        });
    }
    let mut h = vec![0.0; length];
    render_images(room, receiver, &mut h);
    if let Some(cutoff) = room.highpass {
        dc_block(&mut h, cutoff / room.sample_rate);
    }
    Ok(h)
}

/// In-place two-pole high-pass with a double zero at DC and a double pole
/// at `exp(-2π f)`, `f` the cutoff relative to the sample rate.
fn dc_block(h: &mut [f64], f: f64) {
    let w = 2.0 * PI * f;
    let r = (-w).exp();
    let (b1, b2) = (2.0 * r * w.cos(), -r * r);
    let a1 = -(1.0 + r);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in h.iter_mut() {
        let x0 = *v;
        let y0 = x0 + a1 * x1 + r * x2 + b1 * y1 + b2 * y2;
        (x2, x1) = (x1, x0);
        (y2, y1) = (y1, y0);
        *v = y0;
    }
}

fn render_images(room: &RoomSpec, receiver: Vec3, h: &mut [f64]) {
    let fs = room.sample_rate;
    let c = room.speed_of_sound;
    let beta = room.reflection_coefficient();
    let order = room.image_order();
    let reach = match room.delay_mode {
        DelayMode::WindowedSinc => HALF_WIDTH,
        DelayMode::Nearest => 0.5,
    };
    let max_dist = (h.len() as f64 + reach) * c / fs;
    let min_dist = c / fs;
    let band = 2.0 * room.lowpass_cutoff() / fs;
    let dims = room.dimensions;
    let src = room.source;

    if (0..3).map(|a| (src[a] - receiver[a]).powi(2)).sum::<f64>().sqrt() < min_dist {
        warn!("receiver {receiver:?} is within one sample of travel from the source; clamping amplitude");
    }

    // Per axis: (offset from receiver, reflection count) of every image
    // coordinate reachable within max_dist.
    let axis_images: [Vec<(f64, usize)>; 3] = std::array::from_fn(|a| {
        let mut out = Vec::new();
        for parity in 0..2 {
            let base = if parity == 0 { src[a] } else { -src[a] } - receiver[a];
            let lo = ((-max_dist - base) / (2.0 * dims[a])).ceil() as i64;
            let hi = ((max_dist - base) / (2.0 * dims[a])).floor() as i64;
            for n in lo..=hi {
                let offset = base + 2.0 * n as f64 * dims[a];
                let reflections = ((n - parity).unsigned_abs() + n.unsigned_abs()) as usize;
                out.push((offset, reflections));
            }
        }
        out
    });

    let max_sq = max_dist * max_dist;
    for &(dx, kx) in &axis_images[0] {
        for &(dy, ky) in &axis_images[1] {
            let dxy = dx * dx + dy * dy;
            if dxy > max_sq {
                continue;
            }
            for &(dz, kz) in &axis_images[2] {
                let d2 = dxy + dz * dz;
                let k = kx + ky + kz;
                if d2 > max_sq || k > order {
                    continue;
                }
                let gain = if k == 0 { 1.0 } else { beta.powi(k as i32) };
                if gain == 0.0 {
                    continue;
                }
                let d = d2.sqrt();
                let amp = gain / (4.0 * PI * d.max(min_dist));
                let delay = d / c * fs;
                match room.delay_mode {
                    DelayMode::WindowedSinc => add_windowed_sinc(h, delay, amp, band),
                    DelayMode::Nearest => {
                        let n = delay.round() as usize;
                        if n < h.len() {
                            h[n] += amp;
                        }
                    }
                }
            }
        }
    }
}

/// Adds `amp · b·sinc(b·(n - τ)) · w(n - τ)` for the integer `n` within the
/// 81-tap Hann window around `τ`.
fn add_windowed_sinc(h: &mut [f64], delay: f64, amp: f64, band: f64) {
    let first = (delay - HALF_WIDTH).floor() as i64 + 1;
    let last = ((delay + HALF_WIDTH).ceil() as i64 - 1).min(h.len() as i64 - 1);
    if last < 0 {
        return;
    }
    let start = first.max(0);
    let x0 = start as f64 - delay;
    // Phasors for sin(π b x) and cos(π x / W), advanced one sample at a time.
    let sinc_step = Complex64::from_polar(1.0, PI * band);
    let win_step = Complex64::from_polar(1.0, PI / HALF_WIDTH);
    let mut sinc_ph = Complex64::from_polar(1.0, PI * band * x0);
    let mut win_ph = Complex64::from_polar(1.0, PI * x0 / HALF_WIDTH);
    for n in start..=last {
        let x = n as f64 - delay;
        let sinc = if x.abs() < 1e-9 { band } else { sinc_ph.im / (PI * x) };
        let window = 0.5 * (1.0 + win_ph.re);
        h[n as usize] += amp * sinc * window;
        sinc_ph *= sinc_step;
        win_ph *= win_step;
    }
}

/// Grid RIRs, one row per grid point in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct RirSet {
    grid: GridSpec,
    length: usize,
    sample_rate: f64,
    data: Vec<f64>,
}

const SFR_MAGIC: &[u8; 6] = b"SFRIR\0";
const SFR_VERSION: u16 = 1;

impl RirSet {
    pub fn new(grid: GridSpec, length: usize, sample_rate: f64, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if length == 0 {
            return Err(Error::invalid("length", "RIR length must be positive"));
        }
        if data.len() != grid.len() * length {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for {} rows of length {length}",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite RIR sample".into()));
        }
        Ok(Self {
            grid,
            length,
            sample_rate,
            data,
        })
    }

    pub fn zeros(grid: GridSpec, length: usize, sample_rate: f64) -> Self {
        Self {
            grid,
            length,
            sample_rate,
            data: vec![0.0; grid.len() * length],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// RIR length `L` in samples.
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn rows(&self) -> usize {
        self.grid.len()
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.data[u * self.length..(u + 1) * self.length]
    }

    pub fn row_mut(&mut self, u: usize) -> &mut [f64] {
        &mut self.data[u * self.length..(u + 1) * self.length]
    }

    /// The stacked vector `[h_1ᵀ, …, h_Nᵀ]ᵀ`.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn write_sfr(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(64 + self.data.len() * 8);
        buf.extend_from_slice(SFR_MAGIC);
        buf.extend_from_slice(&SFR_VERSION.to_le_bytes());
        for e in self.grid.extents {
            buf.extend_from_slice(
                &u32::try_from(e)
                    .map_err(|_| Error::invalid("grid.extents", "too large"))?
                    .to_le_bytes(),
            );
        }
        buf.extend_from_slice(
            &u32::try_from(self.length)
                .map_err(|_| Error::invalid("length", "too large"))?
                .to_le_bytes(),
        );
        buf.extend_from_slice(&self.grid.spacing.to_le_bytes());
        for v in self.grid.origin {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.sample_rate.to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_sfr(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
        let bad = |reason: &str| Error::parse(path, 0, reason.to_string());
        if cur.take(6).ok_or_else(|| bad("truncated header"))? != SFR_MAGIC {
            return Err(bad("not an .sfr file (bad magic)"));
        }
        let version = cur.u16().ok_or_else(|| bad("truncated header"))?;
        if version != SFR_VERSION {
            return Err(bad(&format!("unsupported .sfr version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        }
        let spacing = cur.f64().ok_or_else(|| bad("truncated header"))?;
        let mut origin = [0.0; 3];
        for o in &mut origin {
            *o = cur.f64().ok_or_else(|| bad("truncated header"))?;
        }
        let sample_rate = cur.f64().ok_or_else(|| bad("truncated header"))?;
        let grid = GridSpec::new(origin, spacing, [dims[0], dims[1], dims[2]])?;
        let count = grid.len() * dims[3];
        if bytes.len() - cur.pos != count * 8 {
            return Err(bad(&format!(
                "expected {count} samples, found {} bytes",
                bytes.len() - cur.pos
            )));
        }
        let data = (0..count).map(|_| cur.f64().unwrap()).collect();
        Self::new(grid, dims[3], sample_rate, data)
    }

    /// One line per grid point: `u,x,y,z,h0,h1,…`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str("u,x,y,z");
        for k in 0..self.length {
            out.push_str(&format!(",h{k}"));
        }
        out.push('\n');
        for u in 0..self.rows() {
            let p = self.grid.position(u);
            out.push_str(&format!("{u},{},{},{}", p[0], p[1], p[2]));
            for v in self.row(u) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Simulated RIRs at every grid point.
pub fn simulate_grid_rirs(room: &RoomSpec, grid: &GridSpec, length: usize) -> Result<RirSet> {
    room.validate()?;
    grid.validate()?;
    if let Some(u) = (0..grid.len()).find(|&u| !room.contains(grid.position(u))) {
        return Err(Error::OutsideRegion {
            position: grid.position(u),
            region: "room",
        });
    }
    let rows: Vec<Vec<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|u| simulate_rir(room, grid.position(u), length))
        .collect::<Result<_>>()?;
    RirSet::new(*grid, length, room.sample_rate, rows.concat())
}
