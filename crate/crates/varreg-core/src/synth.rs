//! Synthetic ground truth: smooth random phantoms, fold-free deformations,
//! and image pairs with a known displacement field, so that registration
//! quality can be scored quantitatively without clinical data.

use alloc::vec::Vec;

use crate::denoise::gaussian_denoise;
use crate::grid::{GridDesc, ScalarField, VectorField};
use crate::metrics::jacobian_report;
use crate::rng::SeededRng;
use crate::sampler::{sample_multilinear, warp_mask_nearest, warp_scalar};
use crate::{Error, Result};

/// Knobs for [`make_pair`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Sup-norm of the ground-truth displacement, in voxels.
    pub max_disp: f64,
    /// Gaussian smoothing width of the deformation noise, in voxels.
    pub smoothness_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { max_disp: 2.0, smoothness_sigma: 96.0 }
    }
}

/// One synthetic registration problem with known ground truth.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub i0: ScalarField,
    pub i1: ScalarField,
    pub mask0: ScalarField,
    pub mask1: ScalarField,
    /// Registering i0 <- i1 should recover approximately this field.
    pub u_true: VectorField,
    /// Sup-norm residual of the fixed-point inversion used to build i1.
    pub inversion_residual: f64,
}

fn check_min_dims(grid: &GridDesc) -> Result<()> {
    let min = if grid.rank() == 2 { 32 } else { 16 };
    if grid.dims().iter().any(|&d| d < min) {
        return Err(Error::InvalidGrid(alloc::format!(
            "phantom needs dims >= {min} per axis, got {:?}",
            grid.dims()
        )));
    }
    Ok(())
}

/// Smooth multi-blob intensity image in [0,1] with a nested-threshold
/// mask: background 0, outer structure 1, core 2.
pub fn make_phantom(grid: &GridDesc, seed: u64) -> Result<(ScalarField, ScalarField)> {
    check_min_dims(grid)?;
    let mut rng = SeededRng::new(seed);
    let rank = grid.rank();
    let dims = grid.dims().to_vec();
    let min_dim = *dims.iter().min().unwrap() as f64;
    let n_bumps = 14 + rng.index(6);
    let mut bumps = Vec::with_capacity(n_bumps);
    for _ in 0..n_bumps {
        let mut center = [0.0f64; 3];
        for (a, c) in center.iter_mut().enumerate().take(rank) {
            *c = rng.uniform(0.1, 0.9) * (dims[a] - 1) as f64;
        }
        let sigma = rng.uniform(min_dim / 24.0, min_dim / 10.0);
        let amp = rng.uniform(0.5, 1.0);
        bumps.push((center, sigma, amp));
    }
    let mut image = ScalarField::from_fn(grid.clone(), |idx| {
        let mut v = 0.0;
        for (center, sigma, amp) in &bumps {
            let mut d2 = 0.0;
            for a in 0..rank {
                let d = idx[a] as f64 - center[a];
                d2 += d * d;
            }
            v += amp * libm::exp(-0.5 * d2 / (sigma * sigma));
        }
        v
    });
    let peak = image.values().iter().fold(0.0f64, |m, &v| m.max(v));
    for v in image.values_mut() {
        *v /= peak;
    }
    let mask = ScalarField::new(
        grid.clone(),
        image
            .values()
            .iter()
            .map(|&v| if v > 0.75 { 2.0 } else if v > 0.55 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    Ok((image, mask))
}

/// Gaussian-smoothed seeded noise rescaled to the requested sup-norm,
/// regenerated (fresh substream) until fold-free, at most 20 attempts.
pub fn make_deformation(
    grid: &GridDesc,
    max_disp: f64,
    smoothness_sigma: f64,
    seed: u64,
) -> Result<VectorField> {
    if max_disp < 0.0 || smoothness_sigma <= 0.0 {
        return Err(Error::InvalidConfig("max_disp >= 0 and smoothness_sigma > 0".into()));
    }
    let min_dim = *grid.dims().iter().min().unwrap() as f64;
    if max_disp > min_dim / 8.0 {
        return Err(Error::InvalidConfig("max_disp exceeds min(dims)/8".into()));
    }
    if max_disp == 0.0 {
        return Ok(VectorField::zeros(grid.clone()));
    }
    let base = SeededRng::new(seed);
    for attempt in 0..20u64 {
        let mut rng = base.substream(attempt);
        let mut u = VectorField::zeros(grid.clone());
        for c in 0..grid.rank() {
            for v in u.component_mut(c) {
                *v = rng.normal();
            }
        }
        let mut u = gaussian_denoise(&u, smoothness_sigma)?;
        let norm = u.max_norm();
        if norm == 0.0 {
            continue;
        }
        let scale = max_disp / norm;
        for c in 0..grid.rank() {
            for v in u.component_mut(c) {
                *v *= scale;
            }
        }
        let (neg_pct, _, _) = jacobian_report(&u);
        if neg_pct == 0.0 {
            return Ok(u);
        }
    }
    Err(Error::RejectionBudget)
}

/// Inverts u by 10 fixed-point iterations of u_inv(x) = -u(x + u_inv(x)),
/// returning the inverse and its sup-norm composition residual.
fn invert_fixed_point(u: &VectorField) -> (VectorField, f64) {
    let grid = u.grid().clone();
    let rank = grid.rank();
    let [d0, d1, d2] = grid.padded_dims();
    let mut inv = VectorField::zeros(grid.clone());
    for _ in 0..10 {
        let mut next = VectorField::zeros(grid.clone());
        for i0 in 0..d0 {
            for i1 in 0..d1 {
                for i2 in 0..d2 {
                    let idx = [i0, i1, i2];
                    let off = grid.offset(idx);
                    let cur = inv.at(idx);
                    let mut coord = [0.0f64; 3];
                    for a in 0..rank {
                        coord[a] = crate::grid::clamp_coord(
                            idx[a] as f64 + cur[a],
                            grid.dims()[a],
                        );
                    }
                    for c in 0..rank {
                        next.component_mut(c)[off] =
                            -sample_multilinear(u.component(c), &grid, coord);
                    }
                }
            }
        }
        inv = next;
    }
    // residual of u(x + u_inv(x)) + u_inv(x)
    let mut worst = 0.0f64;
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let idx = [i0, i1, i2];
                let cur = inv.at(idx);
                let mut coord = [0.0f64; 3];
                for a in 0..rank {
                    coord[a] =
                        crate::grid::clamp_coord(idx[a] as f64 + cur[a], grid.dims()[a]);
                }
                let mut s = 0.0;
                for c in 0..rank {
                    let r = sample_multilinear(u.component(c), &grid, coord) + cur[c];
                    s += r * r;
                }
                worst = worst.max(libm::sqrt(s));
            }
        }
    }
    (inv, worst)
}

/// Builds a registration problem: i1 is i0 resampled through the inverse
/// of a known smooth field, so registering i0 <- i1 targets u_true.
pub fn make_pair(grid: &GridDesc, cfg: &SynthConfig, seed: u64) -> Result<SynthPair> {
    let (i0, mask0) = make_phantom(grid, seed)?;
    let u_true = make_deformation(grid, cfg.max_disp, cfg.smoothness_sigma, seed ^ 0x5eed_cafe)?;
    let (u_inv, inversion_residual) = invert_fixed_point(&u_true);
    let i1 = warp_scalar(&i0, &u_inv)?;
    let mask1 = warp_mask_nearest(&mask0, &u_inv)?;
    Ok(SynthPair { i0, i1, mask0, mask1, u_true, inversion_residual })
}
