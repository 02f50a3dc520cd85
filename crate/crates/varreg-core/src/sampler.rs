//! Differentiable warping and finite-difference spatial gradients.
//!
//! The warping layer resamples an image at `x + u(x)` with multilinear
//! (bilinear/trilinear) interpolation; sample coordinates are clamped to
//! the grid. `warp_adjoint` provides the exact adjoints used for
//! backpropagation through the warp.

use alloc::format;
use alloc::vec::Vec;

use crate::grid::{clamp_coord, GridDesc, ScalarField, VectorField};
use crate::{Error, Result};

/// Interpolation cell along one axis: base sample and fractional offset.
///
/// The base is chosen as `ceil(x) - 1` so that integer coordinates land on
/// the *left* cell with frac = 1. Values are unaffected; the in-cell
/// derivative becomes a deterministic sub-gradient choice at boundaries.
#[inline]
fn cell(x: f64, dim: usize) -> (usize, f64) {
    let b = (libm::ceil(x) - 1.0).max(0.0).min((dim - 2) as f64);
    (b as usize, x - b)
}

/// Multilinear sample of a scalar plane at an already-clamped coordinate.
pub(crate) fn sample_multilinear(values: &[f64], grid: &GridDesc, coord: [f64; 3]) -> f64 {
    let rank = grid.rank();
    let dims = grid.dims();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..rank {
        let (b, f) = cell(coord[a], dims[a]);
        base[a] = b;
        frac[a] = f;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << rank) {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..rank {
            let bit = (corner >> a) & 1;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            idx[a] = base[a] + bit;
        }
        acc += w * values[grid.offset(idx)];
    }
    acc
}

fn check_same_grid(a: &GridDesc, b: &GridDesc, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Warps `i` by the displacement `u`: output(x) = i(clamp(x + u(x))).
pub fn warp_scalar(i: &ScalarField, u: &VectorField) -> Result<ScalarField> {
    check_same_grid(i.grid(), u.grid(), "warp_scalar")?;
    let grid = i.grid();
    let rank = grid.rank();
    let dims = grid.dims();
    let [d0, d1, d2] = grid.padded_dims();
    let mut out = Vec::with_capacity(grid.len());
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let idx = [i0, i1, i2];
                let disp = u.at(idx);
                let pos = [i0 as f64, i1 as f64, i2 as f64];
                let mut q = [0.0; 3];
                for a in 0..rank {
                    let raw = pos[a] + disp[a];
                    if !raw.is_finite() {
                        return Err(Error::NonFinite("displacement"));
                    }
                    q[a] = clamp_coord(raw, dims[a]);
                }
                out.push(sample_multilinear(i.values(), grid, q));
            }
        }
    }
    ScalarField::new(grid.clone(), out)
}

/// Warps an integer label mask by nearest-neighbor sampling; labels are
/// never interpolated.
pub fn warp_mask_nearest(m: &ScalarField, u: &VectorField) -> Result<ScalarField> {
    check_same_grid(m.grid(), u.grid(), "warp_mask_nearest")?;
    let grid = m.grid();
    let rank = grid.rank();
    let dims = grid.dims();
    let [d0, d1, d2] = grid.padded_dims();
    let mut out = Vec::with_capacity(grid.len());
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let idx = [i0, i1, i2];
                let disp = u.at(idx);
                let pos = [i0 as f64, i1 as f64, i2 as f64];
                let mut nn = [0usize; 3];
                for a in 0..rank {
                    let q = clamp_coord(pos[a] + disp[a], dims[a]);
                    nn[a] = libm::round(q) as usize;
                }
                out.push(m.values()[grid.offset(nn)]);
            }
        }
    }
    ScalarField::new(grid.clone(), out)
}

/// Central finite differences in the interior, one-sided at borders.
pub fn image_gradient(i: &ScalarField) -> Result<VectorField> {
    let grid = i.grid();
    let rank = grid.rank();
    let dims = grid.dims();
    let [d0, d1, d2] = grid.padded_dims();
    let mut comps = Vec::with_capacity(rank);
    for a in 0..rank {
        let mut plane = Vec::with_capacity(grid.len());
        for i0 in 0..d0 {
            for i1 in 0..d1 {
                for i2 in 0..d2 {
                    let idx = [i0, i1, i2];
                    let p = idx[a];
                    let d = dims[a];
                    let g = if p == 0 {
                        let mut hi = idx;
                        hi[a] = 1;
                        i.at(hi) - i.at(idx)
                    } else if p == d - 1 {
                        let mut lo = idx;
                        lo[a] = d - 2;
                        i.at(idx) - i.at(lo)
                    } else {
                        let mut hi = idx;
                        hi[a] = p + 1;
                        let mut lo = idx;
                        lo[a] = p - 1;
                        (i.at(hi) - i.at(lo)) / 2.0
                    };
                    plane.push(g);
                }
            }
        }
        comps.push(plane);
    }
    VectorField::new(grid.clone(), comps)
}

/// Adjoint of [`image_gradient`]: scatters a per-axis cotangent back
/// through the central/one-sided difference stencils.
pub fn image_gradient_adjoint(g: &VectorField) -> Result<ScalarField> {
    let grid = g.grid();
    let rank = grid.rank();
    let dims = grid.dims();
    let [d0, d1, d2] = grid.padded_dims();
    let mut out = ScalarField::zeros(grid.clone());
    for a in 0..rank {
        let plane = g.component(a);
        for i0 in 0..d0 {
            for i1 in 0..d1 {
                for i2 in 0..d2 {
                    let idx = [i0, i1, i2];
                    let gv = plane[grid.offset(idx)];
                    if gv == 0.0 {
                        continue;
                    }
                    let p = idx[a];
                    let d = dims[a];
                    let vals = out.values_mut();
                    if p == 0 {
                        let mut hi = idx;
                        hi[a] = 1;
                        vals[grid.offset(hi)] += gv;
                        vals[grid.offset(idx)] -= gv;
                    } else if p == d - 1 {
                        let mut lo = idx;
                        lo[a] = d - 2;
                        vals[grid.offset(idx)] += gv;
                        vals[grid.offset(lo)] -= gv;
                    } else {
                        let mut hi = idx;
                        hi[a] = p + 1;
                        let mut lo = idx;
                        lo[a] = p - 1;
                        vals[grid.offset(hi)] += gv / 2.0;
                        vals[grid.offset(lo)] -= gv / 2.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoints of the multilinear warp.
///
/// Given the output cotangent `g_out`, returns the cotangents with respect
/// to the image (`g_i`, scattered through the interpolation weights) and
/// the displacement (`g_u`, the in-cell analytic derivative). Axes whose
/// sample coordinate was clamped receive zero displacement gradient.
pub fn warp_adjoint(
    i: &ScalarField,
    u: &VectorField,
    g_out: &ScalarField,
) -> Result<(ScalarField, VectorField)> {
    check_same_grid(i.grid(), u.grid(), "warp_adjoint")?;
    check_same_grid(i.grid(), g_out.grid(), "warp_adjoint")?;
    let grid = i.grid();
    let rank = grid.rank();
    let dims = grid.dims();
    let [d0, d1, d2] = grid.padded_dims();

    let mut g_i = ScalarField::zeros(grid.clone());
    let mut g_u = VectorField::zeros(grid.clone());

    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let idx = [i0, i1, i2];
                let go = g_out.at(idx);
                let disp = u.at(idx);
                let pos = [i0 as f64, i1 as f64, i2 as f64];
                let mut base = [0usize; 3];
                let mut frac = [0.0f64; 3];
                let mut clamped = [false; 3];
                for a in 0..rank {
                    let raw = pos[a] + disp[a];
                    clamped[a] = raw < 0.0 || raw > (dims[a] - 1) as f64;
                    let q = clamp_coord(raw, dims[a]);
                    let (b, f) = cell(q, dims[a]);
                    base[a] = b;
                    frac[a] = f;
                }
                for corner in 0..(1usize << rank) {
                    let mut w = 1.0;
                    let mut cidx = [0usize; 3];
                    for a in 0..rank {
                        let bit = (corner >> a) & 1;
                        w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                        cidx[a] = base[a] + bit;
                    }
                    let coff = grid.offset(cidx);
                    g_i.values_mut()[coff] += go * w;
                    let ival = i.values()[coff];
                    // derivative of the weight product along each axis
                    for a in 0..rank {
                        if clamped[a] {
                            continue;
                        }
                        let bit = (corner >> a) & 1;
                        let mut dw = if bit == 1 { 1.0 } else { -1.0 };
                        for b in 0..rank {
                            if b == a {
                                continue;
                            }
                            let bbit = (corner >> b) & 1;
                            dw *= if bbit == 1 { frac[b] } else { 1.0 - frac[b] };
                        }
                        g_u.component_mut(a)[grid.offset(idx)] += go * dw * ival;
                    }
                }
            }
        }
    }
    Ok((g_i, g_u))
}
