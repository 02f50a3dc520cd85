//! Intensity consistency: closed-form solutions of the data subproblem.
//!
//! After Taylor linearization of the warped image, the data subproblem is
//! point-wise convex and has closed-form minimizers for both data terms:
//! a thresholding step driven by a dual certificate for the L1 term, and a
//! Sherman-Morrison rank-one solve for the L2 term.

use alloc::format;
use alloc::vec::Vec;

use crate::grid::{GridDesc, ScalarField, VectorField};
use crate::sampler::{image_gradient, warp_scalar};
use crate::{Error, Result};

/// Frozen per-linearization quantities: the warped image, its spatial
/// gradient, the residual against the reference, and the expansion point.
#[derive(Debug, Clone)]
pub struct LinearizedDataTerm {
    i1w: ScalarField,
    j: VectorField,
    r: ScalarField,
    u_ref: VectorField,
}

impl LinearizedDataTerm {
    pub fn new(
        i1w: ScalarField,
        j: VectorField,
        r: ScalarField,
        u_ref: VectorField,
    ) -> Result<Self> {
        let g = i1w.grid();
        if j.grid() != g || r.grid() != g || u_ref.grid() != g {
            return Err(Error::GridMismatch("linearized data term".into()));
        }
        Ok(Self { i1w, j, r, u_ref })
    }

    pub fn grid(&self) -> &GridDesc {
        self.i1w.grid()
    }

    pub fn warped(&self) -> &ScalarField {
        &self.i1w
    }

    pub fn gradient(&self) -> &VectorField {
        &self.j
    }

    pub fn residual(&self) -> &ScalarField {
        &self.r
    }

    pub fn expansion_point(&self) -> &VectorField {
        &self.u_ref
    }
}

/// Dual variable of the L1 subproblem; certifies optimality of the
/// thresholding solution when its sup-norm stays within 1.
#[derive(Debug, Clone)]
pub struct DualCertificate {
    pub z: ScalarField,
}

impl DualCertificate {
    pub fn sup_norm(&self) -> f64 {
        self.z.values().iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// First-order Taylor expansion of the warped floating image at `u_ref`.
pub fn linearize(
    i0: &ScalarField,
    i1: &ScalarField,
    u_ref: &VectorField,
) -> Result<LinearizedDataTerm> {
    if i0.grid() != i1.grid() || i0.grid() != u_ref.grid() {
        return Err(Error::GridMismatch("linearize inputs".into()));
    }
    let i1w = warp_scalar(i1, u_ref)?;
    let j = image_gradient(&i1w)?;
    let r = ScalarField::new(
        i0.grid().clone(),
        i1w.values()
            .iter()
            .zip(i0.values())
            .map(|(w, a)| w - a)
            .collect(),
    )?;
    Ok(LinearizedDataTerm { i1w, j, r, u_ref: u_ref.clone() })
}

/// Linearized residual rho(u) = r + <J, u - u_ref> per sample.
pub fn rho(ldt: &LinearizedDataTerm, u: &VectorField) -> Result<ScalarField> {
    if u.grid() != ldt.grid() {
        return Err(Error::GridMismatch("rho".into()));
    }
    let n = ldt.grid().len();
    let rank = ldt.grid().rank();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = ldt.r.values()[i];
        for c in 0..rank {
            acc += ldt.j.component(c)[i] * (u.component(c)[i] - ldt.u_ref.component(c)[i]);
        }
        out.push(acc);
    }
    ScalarField::new(ldt.grid().clone(), out)
}

/// L1 data subproblem: per-sample thresholding update with its dual
/// certificate. `eps` guards the division where the image gradient
/// vanishes.
pub fn icl_l1(
    ldt: &LinearizedDataTerm,
    v: &VectorField,
    theta: f64,
    eps: f64,
) -> Result<(VectorField, DualCertificate)> {
    if v.grid() != ldt.grid() {
        return Err(Error::GridMismatch("icl_l1".into()));
    }
    if !(theta > 0.0) {
        return Err(Error::InvalidConfig(format!("theta must be > 0, got {theta}")));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("eps must be > 0, got {eps}")));
    }
    let n = ldt.grid().len();
    let rank = ldt.grid().rank();
    let mut u = VectorField::zeros(ldt.grid().clone());
    let mut z = ScalarField::zeros(ldt.grid().clone());
    for i in 0..n {
        let mut rho_v = ldt.r.values()[i];
        let mut jj = 0.0;
        for c in 0..rank {
            let jc = ldt.j.component(c)[i];
            rho_v += jc * (v.component(c)[i] - ldt.u_ref.component(c)[i]);
            jj += jc * jc;
        }
        let zhat = theta * rho_v / (jj + eps);
        let zi = zhat / zhat.abs().max(1.0);
        z.values_mut()[i] = zi;
        for c in 0..rank {
            u.component_mut(c)[i] = v.component(c)[i] - zi * ldt.j.component(c)[i] / theta;
        }
    }
    Ok((u, DualCertificate { z }))
}

/// L2 data subproblem: the per-sample Sherman-Morrison solution, written
/// out component-wise for each rank.
pub fn icl_l2(ldt: &LinearizedDataTerm, v: &VectorField, theta: f64) -> Result<VectorField> {
    if v.grid() != ldt.grid() {
        return Err(Error::GridMismatch("icl_l2".into()));
    }
    if !(theta > 0.0) {
        return Err(Error::InvalidConfig(format!("theta must be > 0, got {theta}")));
    }
    let n = ldt.grid().len();
    let rank = ldt.grid().rank();
    let mut u = VectorField::zeros(ldt.grid().clone());
    for i in 0..n {
        let r = ldt.r.values()[i];
        if rank == 2 {
            let jx = ldt.j.component(0)[i];
            let jy = ldt.j.component(1)[i];
            let dx = v.component(0)[i] - ldt.u_ref.component(0)[i];
            let dy = v.component(1)[i] - ldt.u_ref.component(1)[i];
            let den = jx * jx + jy * jy + theta;
            u.component_mut(0)[i] = ldt.u_ref.component(0)[i]
                + ((jy * jy + theta) * dx - jx * jy * dy - jx * r) / den;
            u.component_mut(1)[i] = ldt.u_ref.component(1)[i]
                + ((jx * jx + theta) * dy - jy * jx * dx - jy * r) / den;
        } else {
            let jx = ldt.j.component(0)[i];
            let jy = ldt.j.component(1)[i];
            let jz = ldt.j.component(2)[i];
            let dx = v.component(0)[i] - ldt.u_ref.component(0)[i];
            let dy = v.component(1)[i] - ldt.u_ref.component(1)[i];
            let dz = v.component(2)[i] - ldt.u_ref.component(2)[i];
            let den = jx * jx + jy * jy + jz * jz + theta;
            u.component_mut(0)[i] = ldt.u_ref.component(0)[i]
                + ((jy * jy + jz * jz + theta) * dx - jx * jy * dy - jx * jz * dz - jx * r) / den;
            u.component_mut(1)[i] = ldt.u_ref.component(1)[i]
                + ((jx * jx + jz * jz + theta) * dy - jy * jx * dx - jy * jz * dz - jy * r) / den;
            u.component_mut(2)[i] = ldt.u_ref.component(2)[i]
                + ((jx * jx + jy * jy + theta) * dz - jz * jx * dx - jz * jy * dy - jz * r) / den;
        }
    }
    Ok(u)
}

/// (1/s) * sum |rho(u)|^s over all samples.
pub fn data_energy(ldt: &LinearizedDataTerm, u: &VectorField, s: u8) -> Result<f64> {
    let rho_u = rho(ldt, u)?;
    match s {
        1 => Ok(rho_u.values().iter().map(|v| v.abs()).sum()),
        2 => Ok(0.5 * rho_u.values().iter().map(|v| v * v).sum::<f64>()),
        _ => Err(Error::InvalidConfig(format!("s must be 1 or 2, got {s}"))),
    }
}

/// Isotropic total variation with forward differences: per sample, the
/// Euclidean norm over all components and axes of the forward stencil.
pub fn tv_isotropic(v: &VectorField) -> f64 {
    let grid = v.grid();
    let rank = grid.rank();
    let dims = grid.dims();
    let [d0, d1, d2] = grid.padded_dims();
    let mut total = 0.0;
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let idx = [i0, i1, i2];
                let off = grid.offset(idx);
                let mut s = 0.0;
                for c in 0..rank {
                    let plane = v.component(c);
                    for a in 0..rank {
                        if idx[a] + 1 < dims[a] {
                            let mut nb = idx;
                            nb[a] += 1;
                            let d = plane[grid.offset(nb)] - plane[off];
                            s += d * d;
                        }
                    }
                }
                total += libm::sqrt(s);
            }
        }
    }
    total
}

/// Full splitting objective: data term at `u`, weighted TV of `v`, and the
/// quadratic coupling (theta/2)|v - u|^2.
pub fn splitting_energy(
    ldt: &LinearizedDataTerm,
    u: &VectorField,
    v: &VectorField,
    s: u8,
    theta: f64,
    tv_weight: f64,
) -> Result<f64> {
    if v.grid() != ldt.grid() || u.grid() != ldt.grid() {
        return Err(Error::GridMismatch("splitting_energy".into()));
    }
    let mut e = data_energy(ldt, u, s)?;
    if tv_weight > 0.0 {
        e += tv_weight * tv_isotropic(v);
    }
    let rank = ldt.grid().rank();
    let mut quad = 0.0;
    for c in 0..rank {
        for (a, b) in v.component(c).iter().zip(u.component(c)) {
            let d = a - b;
            quad += d * d;
        }
    }
    Ok(e + 0.5 * theta * quad)
}
