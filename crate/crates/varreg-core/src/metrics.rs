//! Evaluation of deformations and warped segmentations: Dice overlap,
//! Hausdorff distance in millimetres, and Jacobian-determinant statistics.

use alloc::vec::Vec;

use crate::grid::{ScalarField, VectorField};
use crate::{Error, Result};

/// Aggregated evaluation of one registration result.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Labels in ascending order; dice/hausdorff entries are parallel.
    pub labels: Vec<i64>,
    pub dice: Vec<f64>,
    pub hausdorff_mm: Vec<f64>,
    pub neg_jacobian_pct: f64,
    pub mean_grad_jacobian: f64,
    pub mae: f64,
}

fn check_grid(a: &ScalarField, b: &ScalarField) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(Error::GridMismatch("metrics inputs".into()));
    }
    Ok(())
}

#[inline]
fn has_label(v: f64, label: i64) -> bool {
    libm::round(v) as i64 == label
}

/// Dice overlap 2|A and B| / (|A| + |B|) for one label; 1 when both masks
/// are empty.
pub fn dice(a: &ScalarField, b: &ScalarField, label: i64) -> Result<f64> {
    check_grid(a, b)?;
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut overlap = 0usize;
    for (x, y) in a.values().iter().zip(b.values()) {
        let ia = has_label(*x, label);
        let ib = has_label(*y, label);
        na += ia as usize;
        nb += ib as usize;
        overlap += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap as f64 / (na + nb) as f64)
}

/// Boundary voxels of a label: labeled samples with at least one
/// face-neighbor outside the label (out-of-grid counts as outside).
fn boundary_voxels(m: &ScalarField, label: i64) -> Vec<[usize; 3]> {
    let grid = m.grid();
    let rank = grid.rank();
    let dims = grid.dims();
    let [d0, d1, d2] = grid.padded_dims();
    let mut out = Vec::new();
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let idx = [i0, i1, i2];
                if !has_label(m.at(idx), label) {
                    continue;
                }
                let mut on_boundary = false;
                'axes: for a in 0..rank {
                    for dir in [-1i64, 1] {
                        let p = idx[a] as i64 + dir;
                        if p < 0 || p >= dims[a] as i64 {
                            on_boundary = true;
                            break 'axes;
                        }
                        let mut nb = idx;
                        nb[a] = p as usize;
                        if !has_label(m.at(nb), label) {
                            on_boundary = true;
                            break 'axes;
                        }
                    }
                }
                if on_boundary {
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// Symmetric Hausdorff distance between the boundary voxel sets of one
/// label, with per-axis index offsets scaled by the physical spacing.
pub fn hausdorff(a: &ScalarField, b: &ScalarField, label: i64, spacing: &[f64]) -> Result<f64> {
    check_grid(a, b)?;
    if spacing.len() != a.grid().rank() {
        return Err(Error::InvalidConfig("spacing rank mismatch".into()));
    }
    let ba = boundary_voxels(a, label);
    let bb = boundary_voxels(b, label);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::EmptyMask(label));
    }
    let rank = a.grid().rank();
    let dist2 = |p: &[usize; 3], q: &[usize; 3]| -> f64 {
        let mut s = 0.0;
        for ax in 0..rank {
            let d = (p[ax] as f64 - q[ax] as f64) * spacing[ax];
            s += d * d;
        }
        s
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        let mut worst = 0.0f64;
        for p in from {
            let mut best = f64::INFINITY;
            for q in to {
                best = best.min(dist2(p, q));
            }
            worst = worst.max(best);
        }
        worst
    };
    Ok(libm::sqrt(directed(&ba, &bb).max(directed(&bb, &ba))))
}

/// Jacobian statistics of the deformation phi(x) = x + u(x): folding
/// fraction, mean gradient magnitude of the determinant map, and the
/// determinant map itself.
pub fn jacobian_report(u: &VectorField) -> (f64, f64, ScalarField) {
    let grid = u.grid().clone();
    let rank = grid.rank();
    // d phi_c / d axis = d u_c / d axis + delta(c, axis)
    let grads: Vec<VectorField> = (0..rank)
        .map(|c| {
            let comp = ScalarField::new(grid.clone(), u.component(c).to_vec()).unwrap();
            crate::sampler::image_gradient(&comp).unwrap()
        })
        .collect();
    let n = grid.len();
    let mut det = Vec::with_capacity(n);
    for i in 0..n {
        let mut m = [[0.0f64; 3]; 3];
        for c in 0..rank {
            for a in 0..rank {
                m[c][a] = grads[c].component(a)[i] + if c == a { 1.0 } else { 0.0 };
            }
        }
        let d = if rank == 2 {
            m[0][0] * m[1][1] - m[0][1] * m[1][0]
        } else {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        det.push(d);
    }
    let neg = det.iter().filter(|&&d| d < 0.0).count();
    let neg_pct = 100.0 * neg as f64 / n as f64;
    let det_map = ScalarField::new(grid, det).unwrap();
    let det_grad = crate::sampler::image_gradient(&det_map).unwrap();
    let mut mean_grad = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for a in 0..rank {
            s += det_grad.component(a)[i] * det_grad.component(a)[i];
        }
        mean_grad += libm::sqrt(s);
    }
    mean_grad /= n as f64;
    (neg_pct, mean_grad, det_map)
}

/// Mean absolute intensity difference.
pub fn intensity_mae(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    check_grid(a, b)?;
    let n = a.grid().len();
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n as f64)
}

/// Sorted nonzero labels present in either mask.
pub fn label_set(a: &ScalarField, b: &ScalarField) -> Vec<i64> {
    let mut labels: Vec<i64> = a
        .values()
        .iter()
        .chain(b.values())
        .map(|&v| libm::round(v) as i64)
        .filter(|&l| l != 0)
        .collect();
    labels.sort_unstable();
    labels.dedup();
    labels
}

/// Full report over all nonzero labels shared by the two masks.
pub fn evaluate(
    ref_mask: &ScalarField,
    warped_mask: &ScalarField,
    u: &VectorField,
    spacing: &[f64],
) -> Result<MetricsReport> {
    check_grid(ref_mask, warped_mask)?;
    let labels = label_set(ref_mask, warped_mask);
    let mut dices = Vec::with_capacity(labels.len());
    let mut hds = Vec::with_capacity(labels.len());
    for &l in &labels {
        dices.push(dice(ref_mask, warped_mask, l)?);
        hds.push(hausdorff(ref_mask, warped_mask, l, spacing)?);
    }
    let (neg_pct, mean_grad, _) = jacobian_report(u);
    let mae = intensity_mae(ref_mask, warped_mask)?;
    Ok(MetricsReport {
        labels,
        dice: dices,
        hausdorff_mm: hds,
        neg_jacobian_pct: neg_pct,
        mean_grad_jacobian: mean_grad,
        mae,
    })
}
