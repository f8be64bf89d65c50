//! Spatial interpolation weights `φ(r, r_g)` tying an arbitrary position to
//! the grid RIRs.
//!
//! Both kernels are separable: the 3-D stencil is the tensor product of one
//! 1-D stencil per axis. Lagrange stencils use the `d + 1` grid lines closest
//! to the query coordinate, shifted inward at the grid boundary, with
//! `d = min(max_degree, nodes on the axis - 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, SNAP_TOLERANCE};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InterpolationKernel {
    Linear,
    Lagrange { max_degree: usize },
}

impl InterpolationKernel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InterpolationKernel::Lagrange { max_degree: 0 } => {
                Err(Error::invalid("kernel.max_degree", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

/// Interpolation weights of one position as a separable tensor product.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStencil {
    axes: [Vec<(usize, f64)>; 3],
    extents: [usize; 3],
}

impl WeightStencil {
    /// `(grid index, weight)` pairs; zero weights are omitted.
    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let [nx, ny, _] = self.extents;
        self.axes[2].iter().flat_map(move |&(gz, wz)| {
            self.axes[1].iter().flat_map(move |&(gy, wy)| {
                self.axes[0]
                    .iter()
                    .map(move |&(gx, wx)| (gx + nx * (gy + ny * gz), wx * wy * wz))
            })
        })
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `Σ_u φ²(r, r_u)`.
    pub fn sum_of_squares(&self) -> f64 {
        self.axes
            .iter()
            .map(|ax| ax.iter().map(|(_, w)| w * w).sum::<f64>())
            .product()
    }

    /// `Σ_u φ(r, r_u)`, evaluated as the product of the per-axis sums.
    pub fn sum(&self) -> f64 {
        self.axes
            .iter()
            .map(|ax| ax.iter().map(|(_, w)| w).sum::<f64>())
            .product()
    }
}

/// Interpolation weights of `position` on `grid`. Positions outside the
/// grid's bounding box are rejected; there is no extrapolation.
pub fn weights(kernel: &InterpolationKernel, grid: &GridSpec, position: Vec3) -> Result<WeightStencil> {
    if !grid.contains(position) {
        return Err(Error::OutsideRegion {
            position,
            region: "grid hull",
        });
    }
    let axes = std::array::from_fn(|a| {
        let nodes = grid.extents[a];
        let mut t = grid.grid_coordinate(position, a).clamp(0.0, (nodes - 1) as f64);
        if (t - t.round()).abs() <= SNAP_TOLERANCE {
            t = t.round();
        }
        match *kernel {
            InterpolationKernel::Linear => linear_1d(t, nodes),
            InterpolationKernel::Lagrange { max_degree } => lagrange_1d(t, nodes, max_degree),
        }
    });
    Ok(WeightStencil {
        axes,
        extents: grid.extents,
    })
}

fn linear_1d(t: f64, nodes: usize) -> Vec<(usize, f64)> {
    if nodes == 1 {
        return vec![(0, 1.0)];
    }
    let i = (t.floor() as usize).min(nodes - 2);
    let f = t - i as f64;
    [(i, 1.0 - f), (i + 1, f)]
        .into_iter()
        .filter(|&(_, w)| w != 0.0)
        .collect()
}

/// Lagrange weights on a window of `d + 1` consecutive integer nodes.
pub(crate) fn lagrange_1d(t: f64, nodes: usize, max_degree: usize) -> Vec<(usize, f64)> {
    let degree = max_degree.min(nodes - 1);
    if degree == 0 {
        return vec![(0, 1.0)];
    }
    let start = if degree % 2 == 1 {
        t.floor() as i64 - (degree as i64 - 1) / 2
    } else {
        t.round() as i64 - degree as i64 / 2
    };
    let start = start.clamp(0, (nodes - 1 - degree) as i64) as usize;
    if let Some(j) = (start..=start + degree).find(|&j| t == j as f64) {
        return vec![(j, 1.0)];
    }
    // Barycentric form: w_j ∝ λ_j / (t - j) with λ_j = (-1)^j C(d, j).
    let mut binom = 1.0;
    let mut raw = Vec::with_capacity(degree + 1);
    for i in 0..=degree {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        raw.push(sign * binom / (t - (start + i) as f64));
        binom = binom * (degree - i) as f64 / (i + 1) as f64;
    }
    let total: f64 = raw.iter().sum();
    raw.into_iter()
        .enumerate()
        .map(|(i, w)| (start + i, w / total))
        .filter(|&(_, w)| w != 0.0)
        .collect()
}
