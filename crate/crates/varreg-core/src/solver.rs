//! The variable-splitting registration engine: nested warp/iteration loops
//! alternating the closed-form data update with a denoising step, run
//! coarse-to-fine over an image pyramid.

use alloc::vec::Vec;

use crate::conv::{ConvNet, MultiField};
use crate::denoise::{denoise, DenoiserSpec};
use crate::grid::{build_pyramid, prolong_displacement, GridDesc, ScalarField, VectorField};
use crate::icl::{data_energy, icl_l1, icl_l2, linearize, splitting_energy};
use crate::rng::SeededRng;
use crate::{Error, Result};

/// How the displacement is seeded at the coarsest level.
#[derive(Debug, Clone)]
pub enum InitStrategy {
    Zeros,
    /// I.i.d. normal(0, sigma^2) per component.
    Noise { sigma: f64 },
    /// A caller-supplied field on the coarsest grid.
    Provided(VectorField),
    /// Forward pass of a conv net on the stacked (I0, I1) pair.
    Learned(ConvNet),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Data-term exponent: 1 (robust) or 2 (quadratic).
    pub s: u8,
    /// Splitting penalty weight; larger values couple u and v tighter.
    pub theta: f64,
    pub denoiser: DenoiserSpec,
    pub n_warp: usize,
    pub n_iter: usize,
    pub levels: usize,
    /// Guard for the vanishing-gradient division in the robust update.
    pub eps: f64,
    pub init: InitStrategy,
    /// Drives the Noise initialization only.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            s: 2,
            theta: 0.005,
            denoiser: DenoiserSpec::Tv { weight: 0.1, iters: 200 },
            n_warp: 3,
            n_iter: 2,
            levels: 3,
            eps: 1e-6,
            init: InitStrategy::Zeros,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, rank: usize) -> Result<()> {
        if self.s != 1 && self.s != 2 {
            return Err(Error::InvalidConfig(alloc::format!("s must be 1 or 2, got {}", self.s)));
        }
        if !(self.theta > 0.0) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("theta and eps must be positive".into()));
        }
        if self.n_warp == 0 || self.n_iter == 0 || self.levels == 0 {
            return Err(Error::InvalidConfig("n_warp, n_iter, levels must be >= 1".into()));
        }
        self.denoiser.validate(rank)?;
        if let InitStrategy::Noise { sigma } = self.init {
            if !(sigma > 0.0) {
                return Err(Error::InvalidConfig("noise sigma must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One inner-iteration snapshot of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub level: usize,
    pub warp: usize,
    pub iter: usize,
    pub splitting_energy: f64,
    pub data_energy: f64,
    pub max_disp: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    pub records: Vec<IterRecord>,
}

/// Seeds the displacement field for one grid. `images` carries the
/// level's (I0, I1) pair and is required by the Learned strategy.
pub fn init_displacement(
    strategy: &InitStrategy,
    grid: &GridDesc,
    seed: u64,
    images: Option<(&ScalarField, &ScalarField)>,
) -> Result<VectorField> {
    match strategy {
        InitStrategy::Zeros => Ok(VectorField::zeros(grid.clone())),
        InitStrategy::Noise { sigma } => {
            let mut rng = SeededRng::new(seed);
            let mut u = VectorField::zeros(grid.clone());
            for c in 0..grid.rank() {
                for v in u.component_mut(c) {
                    *v = sigma * rng.normal();
                }
            }
            Ok(u)
        }
        InitStrategy::Provided(f) => {
            if f.grid() != grid {
                return Err(Error::GridMismatch("provided initial field".into()));
            }
            Ok(f.clone())
        }
        InitStrategy::Learned(net) => {
            let (i0, i1) = images
                .ok_or_else(|| Error::InvalidConfig("learned init needs the image pair".into()))?;
            if net.in_channels() != 2 || net.out_channels() != grid.rank() {
                return Err(Error::InvalidConfig("init net must map 2 channels to rank".into()));
            }
            let stacked = MultiField::from_channels(
                grid.clone(),
                alloc::vec![i0.values().to_vec(), i1.values().to_vec()],
            )?;
            net.forward(&stacked)?.into_vector_field()
        }
    }
}

/// Effective regularizer weight entering the recorded objective: the
/// denoising step solves weight*TV(v) + 1/2|v-u|^2, which is the
/// v-subproblem of (weight*theta)*TV(v) + theta/2|v-u|^2.
fn reg_weight(spec: &DenoiserSpec, theta: f64) -> f64 {
    match spec {
        DenoiserSpec::Tv { weight, .. } => weight * theta,
        _ => 0.0,
    }
}

/// Registers the floating image `i1` onto the reference `i0`: returns the
/// displacement u such that i1(x + u(x)) approximates i0(x).
pub fn register(
    i0: &ScalarField,
    i1: &ScalarField,
    cfg: &SolverConfig,
) -> Result<(VectorField, SolveDiagnostics)> {
    if i0.grid() != i1.grid() {
        return Err(Error::GridMismatch("register inputs".into()));
    }
    cfg.validate(i0.grid().rank())?;
    let pyramid = build_pyramid(i0, i1, cfg.levels)?;
    let lambda = reg_weight(&cfg.denoiser, cfg.theta);
    let mut diag = SolveDiagnostics::default();
    let mut v: Option<VectorField> = None;

    for (level, (l0, l1)) in pyramid.levels().iter().enumerate() {
        let grid = l0.grid();
        let mut u = match v.take() {
            Some(coarse) => prolong_displacement(&coarse, grid)?,
            None => init_displacement(&cfg.init, grid, cfg.seed, Some((l0, l1)))?,
        };
        let mut vk = u.clone();
        for warp in 0..cfg.n_warp {
            let ldt = linearize(l0, l1, &u)?;
            for iter in 0..cfg.n_iter {
                u = match cfg.s {
                    1 => icl_l1(&ldt, &vk, cfg.theta, cfg.eps)?.0,
                    _ => icl_l2(&ldt, &vk, cfg.theta)?,
                };
                vk = denoise(&u, &cfg.denoiser)?;
                diag.records.push(IterRecord {
                    level,
                    warp,
                    iter,
                    splitting_energy: splitting_energy(&ldt, &u, &vk, cfg.s, cfg.theta, lambda)?,
                    data_energy: data_energy(&ldt, &u, cfg.s)?,
                    max_disp: vk.max_norm(),
                });
            }
            u = vk.clone();
        }
        v = Some(vk);
    }
    Ok((v.unwrap(), diag))
}
