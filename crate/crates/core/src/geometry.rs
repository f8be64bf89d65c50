//! Virtual sampling grid and microphone trajectories.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// Tolerance, in units of the grid spacing, below which a coordinate is
/// treated as lying on a grid line.
pub(crate) const SNAP_TOLERANCE: f64 = 1e-9;

/// Largest spacing that avoids spatial aliasing for a field band-limited to
/// `cutoff` Hz, `c₀ / (2 f_c)`. Usable grid spacings are strictly smaller.
pub fn nyquist_spacing(cutoff: f64, speed_of_sound: f64) -> Result<f64> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(Error::invalid("cutoff", format!("must be positive, got {cutoff}")));
    }
    if !(speed_of_sound > 0.0 && speed_of_sound.is_finite()) {
        return Err(Error::invalid(
            "speed_of_sound",
            format!("must be positive, got {speed_of_sound}"),
        ));
    }
    Ok(speed_of_sound / (2.0 * cutoff))
}

/// Equidistant Cartesian grid `r_g = r₀ + Δ·g` with `g ∈ [0,X)×[0,Y)×[0,Z)`.
///
/// Grid points are numbered with x fastest, then y, then z:
/// `u = g_x + X·(g_y + Y·g_z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec3,
    pub spacing: f64,
    pub extents: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: Vec3, spacing: f64, extents: [usize; 3]) -> Result<Self> {
        let grid = Self {
            origin,
            spacing,
            extents,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::invalid(
                "grid.spacing",
                format!("must be positive, got {}", self.spacing),
            ));
        }
        if self.extents.contains(&0) {
            return Err(Error::invalid(
                "grid.extents",
                format!("all extents must be positive, got {:?}", self.extents),
            ));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid.origin", "non-finite coordinate"));
        }
        Ok(())
    }

    /// Number of grid points `N = X·Y·Z`.
    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, g: [usize; 3]) -> usize {
        debug_assert!(g.iter().zip(&self.extents).all(|(a, b)| a < b));
        g[0] + self.extents[0] * (g[1] + self.extents[1] * g[2])
    }

    pub fn coords(&self, u: usize) -> [usize; 3] {
        let [x, y, _] = self.extents;
        [u % x, (u / x) % y, u / (x * y)]
    }

    pub fn position(&self, u: usize) -> Vec3 {
        self.position_of(self.coords(u))
    }

    pub fn position_of(&self, g: [usize; 3]) -> Vec3 {
        std::array::from_fn(|a| self.origin[a] + g[a] as f64 * self.spacing)
    }

    /// Continuous grid coordinate of `p` along `axis`, in units of Δ.
    pub fn grid_coordinate(&self, p: Vec3, axis: usize) -> f64 {
        (p[axis] - self.origin[axis]) / self.spacing
    }

    /// Lower and upper corner of the grid's bounding box.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let hi = std::array::from_fn(|a| self.origin[a] + (self.extents[a] - 1) as f64 * self.spacing);
        (self.origin, hi)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| {
            let t = self.grid_coordinate(p, a);
            t >= -SNAP_TOLERANCE && t <= (self.extents[a] - 1) as f64 + SNAP_TOLERANCE
        })
    }

    /// Index of the grid point nearest to `p`, clamped into the grid.
    pub fn nearest_index(&self, p: Vec3) -> usize {
        let g = std::array::from_fn(|a| {
            let t = self.grid_coordinate(p, a).round();
            t.clamp(0.0, (self.extents[a] - 1) as f64) as usize
        });
        self.index(g)
    }

    /// The grid point `p` coincides with, if any (within snapping tolerance).
    pub fn node_at(&self, p: Vec3) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let on_node = (0..3).all(|a| {
            let t = self.grid_coordinate(p, a);
            (t - t.round()).abs() <= SNAP_TOLERANCE
        });
        on_node.then(|| self.nearest_index(p))
    }
}

/// Microphone positions per time sample; `Q` positions per sample, stored
/// sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    positions: Vec<Vec3>,
    mic_count: usize,
    snapped_to: Option<GridSpec>,
}

impl Trajectory {
    pub fn new(positions: Vec<Vec3>, mic_count: usize) -> Result<Self> {
        if mic_count == 0 {
            return Err(Error::invalid("trajectory.mics", "need at least one microphone"));
        }
        if positions.is_empty() || !positions.len().is_multiple_of(mic_count) {
            return Err(Error::invalid(
                "trajectory",
                format!(
                    "{} positions do not form whole samples of {mic_count} microphones",
                    positions.len()
                ),
            ));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("trajectory", "non-finite position"));
        }
        Ok(Self {
            positions,
            mic_count,
            snapped_to: None,
        })
    }

    /// Marks every position as a node of `grid`, checking it.
    pub fn snapped(mut self, grid: GridSpec) -> Result<Self> {
        for &p in &self.positions {
            let u = grid.node_at(p).ok_or(Error::OutsideRegion {
                position: p,
                region: "grid nodes",
            })?;
            let q = grid.position(u);
            if (0..3).any(|a| (p[a] - q[a]).abs() > 1e-12) {
                return Err(Error::OutsideRegion {
                    position: p,
                    region: "grid nodes",
                });
            }
        }
        self.snapped_to = Some(grid);
        Ok(self)
    }

    /// Number of microphones `Q`.
    pub fn mic_count(&self) -> usize {
        self.mic_count
    }

    /// Number of time samples `M_t`.
    pub fn sample_count(&self) -> usize {
        self.positions.len() / self.mic_count
    }

    /// Total number of equations `M = M_t·Q`.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, n: usize, q: usize) -> Vec3 {
        self.positions[n * self.mic_count + q]
    }

    /// Positions in stacking order (sample major, microphone minor).
    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn grid_snapped(&self) -> Option<&GridSpec> {
        self.snapped_to.as_ref()
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::with_capacity(self.positions.len() * 64);
        out.push_str("n,mic,x,y,z\n");
        for (i, p) in self.positions.iter().enumerate() {
            let (n, q) = (i / self.mic_count, i % self.mic_count);
            out.push_str(&format!("{n},{q},{},{},{}\n", p[0], p[1], p[2]));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows: Vec<(usize, usize, Vec3)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with('n')) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("expected 5 fields, got {}", fields.len()),
                ));
            }
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::parse(path, line_no, format!("bad index {s:?}")))
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(path, line_no, format!("bad coordinate {s:?}")))
            };
            rows.push((
                int(fields[0])?,
                int(fields[1])?,
                [num(fields[2])?, num(fields[3])?, num(fields[4])?],
            ));
        }
        if rows.is_empty() {
            return Err(Error::parse(path, 1, "no trajectory rows"));
        }
        let mic_count = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
        let samples = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
        if rows.len() != mic_count * samples {
            return Err(Error::parse(
                path,
                rows.len() + 1,
                format!(
                    "expected {} rows for {samples} samples × {mic_count} mics, found {}",
                    mic_count * samples,
                    rows.len()
                ),
            ));
        }
        let mut positions = vec![[f64::NAN; 3]; rows.len()];
        for (i, (n, q, p)) in rows.into_iter().enumerate() {
            let slot = &mut positions[n * mic_count + q];
            if !slot[0].is_nan() {
                return Err(Error::parse(path, i + 2, format!("duplicate row for n={n}, mic={q}")));
            }
            *slot = p;
        }
        Self::new(positions, mic_count)
    }
}

/// Microphones held at fixed positions for `samples` time steps.
pub fn gen_static(points: &[Vec3], samples: usize) -> Result<Trajectory> {
    if samples == 0 {
        return Err(Error::invalid("samples", "must be positive"));
    }
    let positions = (0..samples).flat_map(|_| points.iter().copied()).collect();
    Trajectory::new(positions, points.len())
}

/// A `Q`-microphone array whose pose on the grid plane changes every time
/// sample by a quarter-turn rotation and an integer translation, keeping all
/// microphones on grid nodes.
///
/// The array occupies the first `Q` nodes of a row-major block of width
/// `min(X, Y, Q)`. Poses are drawn at random (seeded) but balanced per
/// residue class `n mod period`: the pose chosen at each step favours the
/// nodes least visited so far in that class, so each node is seen a near
/// equal number of times at every phase of a periodic excitation. With
/// `period = 1` the balancing runs over the whole sequence.
pub fn gen_grid_snapped(grid: &GridSpec, mics: usize, steps: usize, period: usize, seed: u64) -> Result<Trajectory> {
    grid.validate()?;
    let [nx, ny, nz] = grid.extents;
    if nz != 1 {
        return Err(Error::invalid(
            "grid.extents",
            "grid-snapped arrays need a plane grid (Z = 1)",
        ));
    }
    let capacity = nx * ny;
    if mics == 0 || mics > capacity {
        return Err(Error::invalid(
            "trajectory.mics",
            format!("{mics} microphones do not fit {capacity} grid points"),
        ));
    }
    if steps == 0 || period == 0 {
        return Err(Error::invalid("steps", "steps and period must be positive"));
    }

    let poses = array_poses(grid, mics);
    if poses.is_empty() {
        return Err(Error::invalid("trajectory.mics", "array layout does not fit the grid"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![vec![0u32; capacity]; period.min(steps)];
    let mut positions = Vec::with_capacity(steps * mics);
    let mut best: Vec<usize> = Vec::with_capacity(poses.len());
    for n in 0..steps {
        let seen = &mut counts[n % period];
        best.clear();
        let mut best_score = u64::MAX;
        for (i, pose) in poses.iter().enumerate() {
            let score: u64 = pose.iter().map(|&u| (seen[u] as u64 + 1).pow(2)).sum();
            if score < best_score {
                best_score = score;
                best.clear();
            }
            if score == best_score {
                best.push(i);
            }
        }
        let pose = &poses[best[rng.random_range(0..best.len())]];
        // Assign microphones to the pose's nodes in a random order: the
        // rotation moves each microphone, not just the occupied set.
        let mut order: Vec<usize> = pose.clone();
        order.shuffle(&mut rng);
        for &u in &order {
            seen[u] += 1;
            positions.push(grid.position(u));
        }
    }
    Trajectory::new(positions, mics)?.snapped(*grid)
}

/// Every distinct set of occupied nodes reachable by rotating the base layout
/// by a multiple of π/2 and translating it by whole grid steps.
fn array_poses(grid: &GridSpec, mics: usize) -> Vec<Vec<usize>> {
    let [nx, ny, _] = grid.extents;
    let width = nx.min(ny).min(mics);
    let base: Vec<(i64, i64)> = (0..mics).map(|i| ((i % width) as i64, (i / width) as i64)).collect();
    let mut seen = BTreeSet::new();
    let mut poses = Vec::new();
    for turn in 0..4 {
        let rotated: Vec<(i64, i64)> = base
            .iter()
            .map(|&(x, y)| match turn {
                0 => (x, y),
                1 => (-y, x),
                2 => (-x, -y),
                _ => (y, -x),
            })
            .collect();
        let min_x = rotated.iter().map(|p| p.0).min().unwrap();
        let min_y = rotated.iter().map(|p| p.1).min().unwrap();
        let span_x = rotated.iter().map(|p| p.0).max().unwrap() - min_x;
        let span_y = rotated.iter().map(|p| p.1).max().unwrap() - min_y;
        if span_x >= nx as i64 || span_y >= ny as i64 {
            continue;
        }
        for ox in 0..(nx as i64 - span_x) {
            for oy in 0..(ny as i64 - span_y) {
                let mut nodes: Vec<usize> = rotated
                    .iter()
                    .map(|&(x, y)| grid.index([(x - min_x + ox) as usize, (y - min_y + oy) as usize, 0]))
                    .collect();
                nodes.sort_unstable();
                if seen.insert(nodes.clone()) {
                    poses.push(nodes);
                }
            }
        }
    }
    poses
}

/// Single-microphone Lissajous figure in the grid plane,
/// `r(n) = c + A ⊙ [sin(2π·a·n/M_t + π/2), sin(2π·b·n/M_t), 0]`, where `c`
/// is the centre of the grid's bounding box and `A` its half extent minus
/// `margin`.
pub fn gen_lissajous(
    grid: &GridSpec,
    ratio_num: u32,
    ratio_den: u32,
    samples: usize,
    margin: f64,
) -> Result<Trajectory> {
    grid.validate()?;
    if samples < 2 {
        return Err(Error::invalid("samples", format!("need at least 2, got {samples}")));
    }
    if ratio_num == 0 || ratio_den == 0 {
        return Err(Error::invalid("lissajous ratio", "frequencies must be positive"));
    }
    let (lo, hi) = grid.bounds();
    let center: Vec3 = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
    let amp: Vec3 = std::array::from_fn(|a| 0.5 * (hi[a] - lo[a]) - margin);
    if !(margin >= 0.0) || amp[0] < 0.0 || amp[1] < 0.0 {
        return Err(Error::invalid(
            "margin",
            format!("{margin} does not fit inside the grid"),
        ));
    }
    let m = samples as f64;
    let tau = std::f64::consts::TAU;
    let positions = (0..samples)
        .map(|n| {
            let n = n as f64;
            let x = (tau * ratio_num as f64 * n / m + std::f64::consts::FRAC_PI_2).sin();
            let y = (tau * ratio_den as f64 * n / m).sin();
            [center[0] + amp[0] * x, center[1] + amp[1] * y, center[2]]
        })
        .collect();
    Trajectory::new(positions, 1)
}

/// Microphones at independent uniformly random positions inside the grid's
/// bounding box, one draw per microphone and time sample.
pub fn gen_uniform(grid: &GridSpec, mics: usize, samples: usize, seed: u64) -> Result<Trajectory> {
    grid.validate()?;
    if mics == 0 || samples == 0 {
        return Err(Error::invalid("trajectory", "mics and samples must be positive"));
    }
    let (lo, hi) = grid.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = (0..mics * samples)
        .map(|_| {
            std::array::from_fn(|a| {
                if hi[a] > lo[a] {
                    rng.random_range(lo[a]..=hi[a])
                } else {
                    lo[a]
                }
            })
        })
        .collect();
    Trajectory::new(positions, mics)
}
