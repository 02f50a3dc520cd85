//! The auxiliary-variable subproblem: denoising of displacement fields.
//!
//! Classical choices (total variation via the dual fixed-point projection,
//! Gaussian smoothing) sit behind the same interface as the learnable
//! residual convolutional denoiser, so the solver can swap them freely.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{ConvNet, MultiField};
use crate::grid::{GridDesc, VectorField};
use crate::{Error, Result};

/// Weights of the learnable residual convolutional denoiser:
/// out = in + residual_scale * net(in), channels rank -> C -> C -> rank.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvDenoiserWeights {
    pub net: ConvNet,
    pub residual_scale: f64,
}

impl ConvDenoiserWeights {
    /// Zero-initialized weights: the denoiser starts as the identity.
    pub fn identity(rank: usize, hidden: usize) -> Self {
        Self { net: ConvNet::shallow(rank, rank, hidden, rank), residual_scale: 1.0 }
    }

    pub fn validate(&self, rank: usize) -> Result<()> {
        self.net.validate()?;
        if self.net.in_channels() != rank || self.net.out_channels() != rank {
            return Err(Error::ShapeMismatch(format!(
                "denoiser channels {}->{} do not match rank {rank}",
                self.net.in_channels(),
                self.net.out_channels()
            )));
        }
        Ok(())
    }
}

/// Which denoiser the v-subproblem dispatches to.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserSpec {
    Identity,
    /// Dual-projection TV with effective strength weight = lambda/theta.
    Tv { weight: f64, iters: usize },
    Gaussian { sigma: f64 },
    Conv(ConvDenoiserWeights),
}

impl DenoiserSpec {
    pub fn validate(&self, rank: usize) -> Result<()> {
        match self {
            DenoiserSpec::Identity => Ok(()),
            DenoiserSpec::Tv { weight, iters } => {
                if *weight < 0.0 {
                    return Err(Error::InvalidConfig("tv weight must be >= 0".into()));
                }
                if *iters < 1 {
                    return Err(Error::InvalidConfig("tv iters must be >= 1".into()));
                }
                Ok(())
            }
            DenoiserSpec::Gaussian { sigma } => {
                if !(*sigma > 0.0) {
                    return Err(Error::InvalidConfig("sigma must be > 0".into()));
                }
                Ok(())
            }
            DenoiserSpec::Conv(w) => w.validate(rank),
        }
    }
}

/// Applies the configured denoiser to a displacement field.
pub fn denoise(v_in: &VectorField, spec: &DenoiserSpec) -> Result<VectorField> {
    spec.validate(v_in.rank())?;
    match spec {
        DenoiserSpec::Identity => Ok(v_in.clone()),
        DenoiserSpec::Tv { weight, iters } => tv_denoise(v_in, *weight, *iters),
        DenoiserSpec::Gaussian { sigma } => gaussian_denoise(v_in, *sigma),
        DenoiserSpec::Conv(w) => conv_forward(v_in, w),
    }
}

/// Forward-difference gradient of one scalar plane, zero past the last
/// sample of each axis.
fn forward_gradient(grid: &GridDesc, f: &[f64]) -> Vec<Vec<f64>> {
    let rank = grid.rank();
    let dims = grid.dims();
    let [d0, d1, d2] = grid.padded_dims();
    let mut out = vec![vec![0.0; grid.len()]; rank];
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let idx = [i0, i1, i2];
                let off = grid.offset(idx);
                for a in 0..rank {
                    if idx[a] + 1 < dims[a] {
                        let mut nb = idx;
                        nb[a] += 1;
                        out[a][off] = f[grid.offset(nb)] - f[off];
                    }
                }
            }
        }
    }
    out
}

/// Negative adjoint of `forward_gradient`.
fn divergence(grid: &GridDesc, p: &[Vec<f64>]) -> Vec<f64> {
    let rank = grid.rank();
    let dims = grid.dims();
    let [d0, d1, d2] = grid.padded_dims();
    let mut out = vec![0.0; grid.len()];
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let idx = [i0, i1, i2];
                let off = grid.offset(idx);
                let mut acc = 0.0;
                for a in 0..rank {
                    if idx[a] + 1 < dims[a] {
                        acc += p[a][off];
                    }
                    if idx[a] > 0 {
                        let mut nb = idx;
                        nb[a] -= 1;
                        acc -= p[a][grid.offset(nb)];
                    }
                }
                out[off] = acc;
            }
        }
    }
    out
}

/// Channel-wise TV denoising by the dual fixed-point projection iteration,
/// approximately solving min_g weight*TV(g) + (1/2)||g - f||^2.
pub fn tv_denoise(f: &VectorField, weight: f64, iters: usize) -> Result<VectorField> {
    if weight < 0.0 {
        return Err(Error::InvalidConfig("tv weight must be >= 0".into()));
    }
    if iters < 1 {
        return Err(Error::InvalidConfig("tv iters must be >= 1".into()));
    }
    if weight == 0.0 {
        return Ok(f.clone());
    }
    let grid = f.grid().clone();
    let rank = grid.rank();
    let tau = 1.0 / (2.0 * rank as f64);
    let n = grid.len();
    let mut out = VectorField::zeros(grid.clone());
    for c in 0..rank {
        let fc = f.component(c);
        let scaled: Vec<f64> = fc.iter().map(|v| v / weight).collect();
        let mut p = vec![vec![0.0; n]; rank];
        let mut work = vec![0.0; n];
        for _ in 0..iters {
            let div_p = divergence(&grid, &p);
            for i in 0..n {
                work[i] = div_p[i] - scaled[i];
            }
            let g = forward_gradient(&grid, &work);
            for i in 0..n {
                let mut norm = 0.0;
                for ga in g.iter().take(rank) {
                    norm += ga[i] * ga[i];
                }
                let denom = 1.0 + tau * libm::sqrt(norm);
                for (pa, ga) in p.iter_mut().zip(&g) {
                    pa[i] = (pa[i] + tau * ga[i]) / denom;
                }
            }
        }
        let div_p = divergence(&grid, &p);
        let oc = out.component_mut(c);
        for i in 0..n {
            oc[i] = fc[i] - weight * div_p[i];
        }
    }
    Ok(out)
}

/// Separable discrete Gaussian smoothing, kernel truncated at +-ceil(3
/// sigma) and renormalized, with clamp-to-edge borders.
pub fn gaussian_denoise(f: &VectorField, sigma: f64) -> Result<VectorField> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig("sigma must be > 0".into()));
    }
    let radius = libm::ceil(3.0 * sigma) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for j in -radius..=radius {
        let w = libm::exp(-(j * j) as f64 / (2.0 * sigma * sigma));
        kernel.push(w);
        sum += w;
    }
    kernel.iter_mut().for_each(|w| *w /= sum);

    let grid = f.grid().clone();
    let rank = grid.rank();
    let dims = grid.dims();
    let [d0, d1, d2] = grid.padded_dims();
    let mut out = f.clone();
    for c in 0..rank {
        for axis in 0..rank {
            let src = out.component(c).to_vec();
            let dst = out.component_mut(c);
            for i0 in 0..d0 {
                for i1 in 0..d1 {
                    for i2 in 0..d2 {
                        let idx = [i0, i1, i2];
                        let mut acc = 0.0;
                        for (ki, j) in (-radius..=radius).enumerate() {
                            let mut nb = idx;
                            nb[axis] = (idx[axis] as i64 + j)
                                .max(0)
                                .min(dims[axis] as i64 - 1)
                                as usize;
                            acc += kernel[ki] * src[grid.offset(nb)];
                        }
                        dst[grid.offset(idx)] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The residual convolutional denoiser forward pass.
pub fn conv_forward(v_in: &VectorField, w: &ConvDenoiserWeights) -> Result<VectorField> {
    w.validate(v_in.rank())?;
    let x = MultiField::from_vector_field(v_in);
    let y = w.net.forward(&x)?;
    let mut out = v_in.clone();
    for c in 0..out.rank() {
        let yc = y.channel(c);
        let oc = out.component_mut(c);
        for (o, r) in oc.iter_mut().zip(yc) {
            *o += w.residual_scale * r;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ScalarField;
    use crate::rng::SeededRng;
    use approx::assert_abs_diff_eq;

    fn random_disp(grid: &GridDesc, seed: u64, scale: f64) -> VectorField {
        let mut rng = SeededRng::new(seed);
        let mut u = VectorField::zeros(grid.clone());
        for c in 0..grid.rank() {
            u.component_mut(c).iter_mut().for_each(|x| *x = rng.uniform(-scale, scale));
        }
        u
    }

    #[test]
    fn identity_and_zero_weight_are_noops() {
        let g = GridDesc::isotropic(&[6, 6]).unwrap();
        let v = random_disp(&g, 1, 2.0);
        assert_eq!(denoise(&v, &DenoiserSpec::Identity).unwrap(), v);
        assert_eq!(tv_denoise(&v, 0.0, 50).unwrap(), v);
    }

    #[test]
    fn tv_keeps_constants() {
        let g = GridDesc::isotropic(&[8, 8]).unwrap();
        let mut v = VectorField::zeros(g);
        v.component_mut(0).iter_mut().for_each(|x| *x = 2.5);
        let d = tv_denoise(&v, 1.0, 100).unwrap();
        for &x in d.component(0) {
            assert_abs_diff_eq!(x, 2.5, epsilon = 1e-12);
        }
    }

    /// Independent high-precision dual solver for the same TV objective:
    /// projected gradient on min_p ||weight*div p - f||^2, per-sample ball.
    fn tv_oracle(f: &VectorField, weight: f64) -> VectorField {
        let grid = f.grid().clone();
        let rank = grid.rank();
        let n = grid.len();
        let mut out = VectorField::zeros(grid.clone());
        for c in 0..rank {
            let fc = f.component(c);
            let mut p = alloc::vec![alloc::vec![0.0; n]; rank];
            let step = 0.9 / (8.0 * rank as f64 * weight * weight).max(1e-9);
            for _ in 0..200_000 {
                let div_p = divergence(&grid, &p);
                let resid: Vec<f64> =
                    (0..n).map(|i| weight * div_p[i] - fc[i]).collect();
                let g = forward_gradient(&grid, &resid);
                let mut max_move = 0.0f64;
                for i in 0..n {
                    let mut norm = 0.0;
                    let mut cand = [0.0f64; 3];
                    for a in 0..rank {
                        cand[a] = p[a][i] + step * weight * g[a][i];
                        norm += cand[a] * cand[a];
                    }
                    let norm = libm::sqrt(norm).max(1.0);
                    for a in 0..rank {
                        let nv = cand[a] / norm;
                        max_move = max_move.max((nv - p[a][i]).abs());
                        p[a][i] = nv;
                    }
                }
                if max_move < 1e-10 {
                    break;
                }
            }
            let div_p = divergence(&grid, &p);
            let oc = out.component_mut(c);
            for i in 0..n {
                oc[i] = fc[i] - weight * div_p[i];
            }
        }
        out
    }

    #[test]
    fn tv_step_matches_convex_oracle() {
        // step profile replicated over a thin second axis
        let g = GridDesc::isotropic(&[16, 2]).unwrap();
        let mut v = VectorField::zeros(g.clone());
        for i0 in 0..16 {
            for i1 in 0..2 {
                v.component_mut(0)[g.offset([i0, i1, 0])] = if i0 < 8 { 0.0 } else { 1.0 };
            }
        }
        let weight = 2.0;
        let got = tv_denoise(&v, weight, 500).unwrap();
        let expect = tv_oracle(&v, weight);
        for i in 0..g.len() {
            assert!((got.component(0)[i] - expect.component(0)[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn tv_never_increases_objective() {
        let g = GridDesc::isotropic(&[8, 8]).unwrap();
        let f = random_disp(&g, 7, 1.0);
        let weight = 0.4;
        let gout = tv_denoise(&f, weight, 200).unwrap();
        let objective = |g_: &VectorField| {
            let mut quad = 0.0;
            for c in 0..2 {
                for (a, b) in g_.component(c).iter().zip(f.component(c)) {
                    quad += (a - b) * (a - b);
                }
            }
            weight * crate::icl::tv_isotropic(g_) + 0.5 * quad
        };
        assert!(objective(&gout) <= objective(&f) + 1e-9);
    }

    #[test]
    fn gaussian_preserves_constants_and_kernel_sums_to_one() {
        let g = GridDesc::isotropic(&[10, 10]).unwrap();
        let mut v = VectorField::zeros(g);
        v.component_mut(1).iter_mut().for_each(|x| *x = -3.25);
        let d = gaussian_denoise(&v, 1.0).unwrap();
        for &x in d.component(1) {
            assert_abs_diff_eq!(x, -3.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn tiny_sigma_is_nearly_identity() {
        let g = GridDesc::isotropic(&[8, 8]).unwrap();
        let v = random_disp(&g, 3, 1.0);
        let d = gaussian_denoise(&v, 0.1).unwrap();
        for c in 0..2 {
            for (a, b) in d.component(c).iter().zip(v.component(c)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gaussian_delta_recovers_kernel_row() {
        let g = GridDesc::isotropic(&[15, 15]).unwrap();
        let sigma = 1.0;
        let mut v = VectorField::zeros(g.clone());
        v.component_mut(0)[g.offset([7, 7, 0])] = 1.0;
        let d = gaussian_denoise(&v, sigma).unwrap();
        // closed-form separable weights
        let radius = 3i64;
        let mut k = alloc::vec::Vec::new();
        let mut sum = 0.0;
        for j in -radius..=radius {
            let w = libm::exp(-(j * j) as f64 / (2.0 * sigma * sigma));
            k.push(w);
            sum += w;
        }
        k.iter_mut().for_each(|w| *w /= sum);
        for (a, j0) in (-radius..=radius).enumerate() {
            for (b, j1) in (-radius..=radius).enumerate() {
                let got = d.component(0)[g.offset([(7 + j0) as usize, (7 + j1) as usize, 0])];
                assert_abs_diff_eq!(got, k[a] * k[b], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_weight_conv_denoiser_is_identity() {
        let g = GridDesc::isotropic(&[6, 6]).unwrap();
        let v = random_disp(&g, 5, 2.0);
        let w = ConvDenoiserWeights::identity(2, 8);
        let out = conv_forward(&v, &w).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn conv_denoiser_channel_mismatch_rejected() {
        let g = GridDesc::isotropic(&[4, 4, 4]).unwrap();
        let v = VectorField::zeros(g);
        let w = ConvDenoiserWeights::identity(2, 4);
        assert!(conv_forward(&v, &w).is_err());
    }

    #[test]
    fn scaled_delta_kernel_doubles_input() {
        // single-layer net whose kernel is a centered delta: residual
        // output is input + input
        let g = GridDesc::isotropic(&[5, 5]).unwrap();
        let v = random_disp(&g, 11, 1.0);
        let mut layer = crate::conv::ConvLayer::zeros(2, 2, 2);
        let taps = 9;
        layer.weights[(0 * 2 + 0) * taps + 4] = 1.0;
        layer.weights[(1 * 2 + 1) * taps + 4] = 1.0;
        let w = ConvDenoiserWeights {
            net: ConvNet { layers: alloc::vec![layer] },
            residual_scale: 1.0,
        };
        let out = conv_forward(&v, &w).unwrap();
        for c in 0..2 {
            for (o, i) in out.component(c).iter().zip(v.component(c)) {
                assert_abs_diff_eq!(*o, 2.0 * i, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn divergence_is_negative_adjoint_of_gradient() {
        let g = GridDesc::isotropic(&[5, 4]).unwrap();
        let mut rng = SeededRng::new(13);
        let f = ScalarField::from_fn(g.clone(), |_| rng.uniform(-1.0, 1.0));
        let p: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..g.len()).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let grad = forward_gradient(&g, f.values());
        let div = divergence(&g, &p);
        let lhs: f64 = (0..2)
            .map(|a| grad[a].iter().zip(&p[a]).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        let rhs: f64 = f.values().iter().zip(&div).map(|(x, y)| x * y).sum();
        assert_abs_diff_eq!(lhs, -rhs, epsilon = 1e-12);
    }
}
