//! Smooth random deformations for data augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::{argmax_labels, make_one_hot, Atlas};
use crate::warp::{warp_probmap, warp_scalar, DisplacementField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Voxels between neighbouring control points.
    pub control_spacing: usize,
    /// Largest displacement drawn at a control point, in voxels.
    pub max_amplitude: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    /// Desk-scale defaults for 64-voxel 2D grids.
    fn default() -> Self {
        AugmentConfig {
            control_spacing: 8,
            max_amplitude: 2.0,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.control_spacing < 2 {
            return Err(Error::config("control_spacing must be >= 2"));
        }
        if !(self.max_amplitude >= 0.0 && self.max_amplitude.is_finite()) {
            return Err(Error::config("max_amplitude must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Control points needed so the coarse lattice spans `n` voxels.
fn control_count(n: usize, spacing: usize) -> usize {
    (n - 1).div_ceil(spacing) + 1
}

/// Draw uniform control displacements and linearly upsample them to `shape`.
pub fn sample_smooth_field<R: Rng>(
    shape: &[usize],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<DisplacementField> {
    cfg.validate()?;
    if !(1..=3).contains(&shape.len()) || shape.iter().any(|&n| n < 2) {
        return Err(Error::input(format!("invalid field shape {shape:?}")));
    }
    let grid = Grid::from_shape(shape);
    let nd = shape.len();
    let s = cfg.control_spacing;
    let mut cn = [1usize; 3];
    for a in 0..3 {
        if grid.is_active(a) {
            cn[a] = control_count(grid.n[a], s);
        }
    }
    let coarse = Grid::with_ndim(cn, nd);
    let amp = cfg.max_amplitude;
    let mut u = Vec::with_capacity(nd * grid.len());
    for _ in 0..nd {
        let ctrl: Vec<f64> = (0..coarse.len())
            .map(|_| if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 })
            .collect();
        u.extend(upsample_linear(&ctrl, coarse, grid, s));
    }
    DisplacementField::new(shape.to_vec(), u)
}

/// Multilinear interpolation of a control lattice with spacing `s`.
fn upsample_linear(ctrl: &[f64], coarse: Grid, fine: Grid, s: usize) -> Vec<f64> {
    // per axis: (lower control index, upper control index, weight of upper)
    let axis_weights = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..fine.n[a])
            .map(|p| {
                if !fine.is_active(a) {
                    return (0, 0, 0.0);
                }
                let k = (p / s).min(coarse.n[a] - 2);
                let t = (p - k * s) as f64 / s as f64;
                (k, k + 1, t)
            })
            .collect()
    };
    let w: Vec<Vec<(usize, usize, f64)>> = (0..3).map(axis_weights).collect();
    let mut out = Vec::with_capacity(fine.len());
    for z in 0..fine.n[0] {
        let (z0, z1, tz) = w[0][z];
        for y in 0..fine.n[1] {
            let (y0, y1, ty) = w[1][y];
            for x in 0..fine.n[2] {
                let (x0, x1, tx) = w[2][x];
                let at = |zz, yy, xx| ctrl[coarse.index(zz, yy, xx)];
                let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
                let plane = |zz| {
                    lerp(
                        lerp(at(zz, y0, x0), at(zz, y0, x1), tx),
                        lerp(at(zz, y1, x0), at(zz, y1, x1), tx),
                        ty,
                    )
                };
                out.push(lerp(plane(z0), plane(z1), tz));
            }
        }
    }
    out
}

/// Deform an atlas image and its labels with one shared random field.
pub fn augment_atlas<R: Rng>(atlas: &Atlas, cfg: &AugmentConfig, rng: &mut R) -> Result<Atlas> {
    let field = sample_smooth_field(atlas.shape(), cfg, rng)?;
    apply_field(atlas, &field)
}

/// Warp image and one-hot labels of `atlas` by `field`.
pub fn apply_field(atlas: &Atlas, field: &DisplacementField) -> Result<Atlas> {
    let image = warp_scalar(&atlas.image, field)?;
    let labels = argmax_labels(&warp_probmap(&make_one_hot(&atlas.labels)?, field)?)?;
    Atlas::new(atlas.id.clone(), image, labels)
}
