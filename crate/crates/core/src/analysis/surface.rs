use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domains::DomainDataset;
use crate::meta::reestimate_bn;
use crate::nn::{ArchSpec, ModelState};
use crate::{Error, Result};

/// Batch-norm momentum given to materialized grid models. Evaluation never
/// reads it.
const GRID_BN_MOMENTUM: f64 = 0.1;

/// Fraction of the triangle's span added on each side of the default grid.
const DEFAULT_MARGIN: f64 = 0.25;
const DEFAULT_RESOLUTION: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPolicy {
    /// Running statistics interpolated barycentrically from the three anchors.
    #[default]
    Interpolate,
    /// Interpolated statistics, then re-estimated on data at every point.
    ReestimatePerPoint,
}

/// An orthonormal basis of the plane through `w1, w2, w3`, with `w1` as the
/// origin, `u` along `w2 - w1`, and `v` oriented so that `v . (w3 - w1) >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePlane {
    pub origin: Vec<f64>,
    pub basis_u: Vec<f64>,
    pub basis_v: Vec<f64>,
    pub w2_coords: [f64; 2],
    pub w3_coords: [f64; 2],
    /// `[a_min, a_max, b_min, b_max]`.
    pub grid_extent: [f64; 4],
    pub resolution: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Builds the plane basis. The default grid covers the triangle plus a
/// quarter of its span on every side.
pub fn surface_plane_basis(w1: &[f64], w2: &[f64], w3: &[f64]) -> Result<SurfacePlane> {
    let d = w1.len();
    if w2.len() != d {
        return Err(Error::dim("surface anchor w2", d, w2.len()));
    }
    if w3.len() != d {
        return Err(Error::dim("surface anchor w3", d, w3.len()));
    }
    let d2: Vec<f64> = w2.iter().zip(w1).map(|(a, b)| a - b).collect();
    let d3: Vec<f64> = w3.iter().zip(w1).map(|(a, b)| a - b).collect();
    let n2 = norm(&d2);
    let scale = n2.max(norm(&d3)).max(norm(w1));
    if !(n2 > 1e-12 * scale.max(1.0)) {
        return Err(Error::Degenerate("w2 coincides with w1".into()));
    }
    let u: Vec<f64> = d2.iter().map(|x| x / n2).collect();
    let a3 = dot(&d3, &u);
    let mut v: Vec<f64> = d3.iter().zip(&u).map(|(x, ui)| x - a3 * ui).collect();
    // Second pass keeps |u . v| at rounding level for nearly colinear input.
    let c = dot(&v, &u);
    v.iter_mut().zip(&u).for_each(|(x, ui)| *x -= c * ui);
    let nv = norm(&v);
    if !(nv > 1e-9 * norm(&d3).max(n2)) {
        return Err(Error::Degenerate("w3 is colinear with w1 and w2".into()));
    }
    v.iter_mut().for_each(|x| *x /= nv);
    let b3 = dot(&d3, &v);

    let (a_lo, a_hi) = (0f64.min(a3), n2.max(a3));
    let (a_pad, b_pad) = (DEFAULT_MARGIN * (a_hi - a_lo), DEFAULT_MARGIN * b3);
    Ok(SurfacePlane {
        origin: w1.to_vec(),
        basis_u: u,
        basis_v: v,
        w2_coords: [n2, 0.0],
        w3_coords: [a3, b3],
        grid_extent: [a_lo - a_pad, a_hi + a_pad, -b_pad, b3 + b_pad],
        resolution: DEFAULT_RESOLUTION,
    })
}

impl SurfacePlane {
    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn with_grid(mut self, extent: [f64; 4], resolution: usize) -> Result<Self> {
        if resolution == 0 || !(extent[0] <= extent[1] && extent[2] <= extent[3]) {
            return Err(Error::InvalidArgument(format!(
                "grid extent {extent:?} with resolution {resolution}"
            )));
        }
        self.grid_extent = extent;
        self.resolution = resolution;
        Ok(self)
    }

    /// Grid coordinates along `u` and along `v`.
    pub fn grid_axes(&self) -> (Vec<f64>, Vec<f64>) {
        let [a0, a1, b0, b1] = self.grid_extent;
        (linspace(a0, a1, self.resolution), linspace(b0, b1, self.resolution))
    }

    /// `w1 + a u + b v`.
    pub fn point(&self, a: f64, b: f64) -> Vec<f64> {
        self.origin
            .iter()
            .zip(&self.basis_u)
            .zip(&self.basis_v)
            .map(|((o, u), v)| o + a * u + b * v)
            .collect()
    }

    /// Barycentric weights of `(a, b)` with respect to the anchor triangle.
    pub fn barycentric(&self, a: f64, b: f64) -> [f64; 3] {
        let [a2, _] = self.w2_coords;
        let [a3, b3] = self.w3_coords;
        let l3 = b / b3;
        let l2 = (a - a3 * l3) / a2;
        [1.0 - l2 - l3, l2, l3]
    }
}

fn interpolated_stats(plane: &SurfacePlane, stats: &[Vec<f64>; 3], a: f64, b: f64) -> Vec<f64> {
    let w = plane.barycentric(a, b);
    let half = stats[0].len() / 2;
    (0..stats[0].len())
        .map(|i| {
            let s = w[0] * stats[0][i] + w[1] * stats[1][i] + w[2] * stats[2][i];
            // Extrapolated variances can dip below zero.
            if i >= half {
                s.max(0.0)
            } else {
                s
            }
        })
        .collect()
}

/// Eval-mode mean loss of the model at plane point `(a, b)`. `anchor_stats`
/// holds the running statistics of the three anchors; `reestimate_on` is
/// the data used by [`BnPolicy::ReestimatePerPoint`].
pub fn surface_loss_at(
    arch: &ArchSpec,
    plane: &SurfacePlane,
    anchor_stats: &[Vec<f64>; 3],
    (a, b): (f64, f64),
    dataset: &DomainDataset,
    policy: BnPolicy,
    reestimate_on: &[DomainDataset],
) -> Result<f64> {
    let stats = interpolated_stats(plane, anchor_stats, a, b);
    let mut model = ModelState::from_flat(arch.clone(), GRID_BN_MOMENTUM, &plane.point(a, b), &stats)?;
    if policy == BnPolicy::ReestimatePerPoint && model.num_batchnorms() > 0 {
        model = reestimate_bn(&model, reestimate_on)?;
    }
    Ok(model.evaluate(dataset.features.view(), &dataset.labels)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRecord {
    pub format_version: u32,
    pub bn_policy: BnPolicy,
    pub num_params: usize,
    pub w2_coords: [f64; 2],
    pub w3_coords: [f64; 2],
    pub grid_extent: [f64; 4],
    pub resolution: usize,
    pub a_coords: Vec<f64>,
    pub b_coords: Vec<f64>,
    /// `losses[i][j]` is the loss at `(a_coords[j], b_coords[i])`.
    pub losses: Vec<Vec<f64>>,
}

/// Loss over the plane's grid. Rows are evaluated in parallel; each cell is
/// independent so the result equals a serial sweep.
pub fn surface_grid_losses(
    arch: &ArchSpec,
    plane: &SurfacePlane,
    anchor_stats: &[Vec<f64>; 3],
    dataset: &DomainDataset,
    policy: BnPolicy,
    reestimate_on: &[DomainDataset],
) -> Result<SurfaceRecord> {
    let p = arch.num_params();
    if plane.dim() != p {
        return Err(Error::dim("surface plane parameter count", p, plane.dim()));
    }
    let n_stats = ModelState::zeros(arch.clone(), GRID_BN_MOMENTUM)?.num_running_stats();
    for s in anchor_stats {
        if s.len() != n_stats {
            return Err(Error::dim("surface anchor running statistics", n_stats, s.len()));
        }
    }
    if policy == BnPolicy::ReestimatePerPoint && reestimate_on.is_empty() {
        return Err(Error::Empty("data for per-point batch-norm re-estimation".into()));
    }
    let (a_coords, b_coords) = plane.grid_axes();
    let losses = b_coords
        .par_iter()
        .map(|&b| {
            a_coords
                .iter()
                .map(|&a| surface_loss_at(arch, plane, anchor_stats, (a, b), dataset, policy, reestimate_on))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurfaceRecord {
        format_version: super::ANALYSIS_FORMAT_VERSION,
        bn_policy: policy,
        num_params: p,
        w2_coords: plane.w2_coords,
        w3_coords: plane.w3_coords,
        grid_extent: plane.grid_extent,
        resolution: plane.resolution,
        a_coords,
        b_coords,
        losses,
    })
}
