//! Grid-attached array types, image pyramids, and displacement prolongation.
//!
//! All fields live on a regular d-dimensional grid (d = 2 or 3) with
//! physical spacing in millimetres. Values are stored row-major with the
//! last axis fastest. Displacements are kept in voxel (index-space) units;
//! spacing enters only distance-based metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Description of a regular sampling grid: per-axis sample counts and
/// physical spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDesc {
    dims: Vec<usize>,
    spacing: Vec<f64>,
}

impl GridDesc {
    pub fn new(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if dims.len() != 2 && dims.len() != 3 {
            return Err(Error::InvalidGrid(format!(
                "rank must be 2 or 3, got {}",
                dims.len()
            )));
        }
        if dims.len() != spacing.len() {
            return Err(Error::InvalidGrid(format!(
                "dims rank {} != spacing rank {}",
                dims.len(),
                spacing.len()
            )));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidGrid(format!("every dim must be >= 2: {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacing must be positive: {spacing:?}")));
        }
        Ok(Self { dims: dims.to_vec(), spacing: spacing.to_vec() })
    }

    /// Grid with unit spacing on every axis.
    pub fn isotropic(dims: &[usize]) -> Result<Self> {
        let spacing = vec![1.0; dims.len()];
        Self::new(dims, &spacing)
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Total number of samples.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Dims padded to three axes with trailing 1s, so rank-2 and rank-3
    /// kernels can share triple-nested loops.
    pub fn padded_dims(&self) -> [usize; 3] {
        match self.dims.len() {
            2 => [self.dims[0], self.dims[1], 1],
            _ => [self.dims[0], self.dims[1], self.dims[2]],
        }
    }

    /// Flat index of a (padded) sample coordinate.
    #[inline]
    pub fn offset(&self, idx: [usize; 3]) -> usize {
        let [_, d1, d2] = self.padded_dims();
        (idx[0] * d1 + idx[1]) * d2 + idx[2]
    }
}

/// A real-valued image sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridDesc,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: GridDesc, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scalar field values"));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridDesc) -> Self {
        let n = grid.len();
        Self { grid, values: vec![0.0; n] }
    }

    /// Build a field by evaluating `f` at every (padded) sample index.
    pub fn from_fn(grid: GridDesc, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let [d0, d1, d2] = grid.padded_dims();
        let mut values = Vec::with_capacity(grid.len());
        for i0 in 0..d0 {
            for i1 in 0..d1 {
                for i2 in 0..d2 {
                    values.push(f([i0, i1, i2]));
                }
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &GridDesc {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, idx: [usize; 3]) -> f64 {
        self.values[self.grid.offset(idx)]
    }
}

/// A displacement field: one component plane per grid axis, ordered to
/// match the axis order of the grid, in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: GridDesc,
    comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn new(grid: GridDesc, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.rank() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} components, got {}",
                grid.rank(),
                comps.len()
            )));
        }
        for c in &comps {
            if c.len() != grid.len() {
                return Err(Error::ShapeMismatch(format!(
                    "component has {} values, grid has {}",
                    c.len(),
                    grid.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("vector field values"));
            }
        }
        Ok(Self { grid, comps })
    }

    pub fn zeros(grid: GridDesc) -> Self {
        let n = grid.len();
        let rank = grid.rank();
        Self { grid, comps: vec![vec![0.0; n]; rank] }
    }

    pub fn grid(&self) -> &GridDesc {
        &self.grid
    }

    pub fn rank(&self) -> usize {
        self.comps.len()
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.comps[c]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.comps[c]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.comps
    }

    /// Displacement vector at a (padded) sample index, padded to 3 entries.
    #[inline]
    pub fn at(&self, idx: [usize; 3]) -> [f64; 3] {
        let off = self.grid.offset(idx);
        let mut v = [0.0; 3];
        for (c, plane) in self.comps.iter().enumerate() {
            v[c] = plane[off];
        }
        v
    }

    /// Largest displacement magnitude over the field.
    pub fn max_norm(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.grid.len() {
            let mut s = 0.0;
            for c in &self.comps {
                s += c[i] * c[i];
            }
            m = m.max(libm::sqrt(s));
        }
        m
    }
}

/// Coarse-to-fine image pyramid over a pair of scalar fields.
#[derive(Debug, Clone)]
pub struct Pyramid {
    /// Levels ordered coarsest first; the last level equals the inputs.
    levels: Vec<(ScalarField, ScalarField)>,
}

impl Pyramid {
    pub fn levels(&self) -> &[(ScalarField, ScalarField)] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// 2x block-mean downsampling; a trailing odd sample is folded into the
/// last block along its axis.
fn downsample(f: &ScalarField) -> Result<ScalarField> {
    let grid = f.grid();
    let rank = grid.rank();
    let dims = grid.dims();
    let coarse_dims: Vec<usize> = dims.iter().map(|&d| d / 2).collect();
    let coarse_spacing: Vec<f64> = grid.spacing().iter().map(|&s| s * 2.0).collect();
    let coarse_grid = GridDesc::new(&coarse_dims, &coarse_spacing)?;

    // fine index range covered by coarse block b along one axis
    let block = |b: usize, cd: usize, fd: usize| -> (usize, usize) {
        let start = 2 * b;
        let end = if b + 1 == cd { fd } else { 2 * b + 2 };
        (start, end)
    };

    let [cd0, cd1, cd2] = coarse_grid.padded_dims();
    let fd = grid.padded_dims();
    let mut values = Vec::with_capacity(coarse_grid.len());
    for b0 in 0..cd0 {
        let (s0, e0) = block(b0, cd0, fd[0]);
        for b1 in 0..cd1 {
            let (s1, e1) = block(b1, cd1, fd[1]);
            for b2 in 0..cd2 {
                let (s2, e2) = if rank == 2 { (0, 1) } else { block(b2, cd2, fd[2]) };
                let mut sum = 0.0;
                let mut count = 0usize;
                for i0 in s0..e0 {
                    for i1 in s1..e1 {
                        for i2 in s2..e2 {
                            sum += f.at([i0, i1, i2]);
                            count += 1;
                        }
                    }
                }
                values.push(sum / count as f64);
            }
        }
    }
    ScalarField::new(coarse_grid, values)
}

/// Builds a coarse-to-fine pyramid by repeated 2x block-mean downsampling
/// of both images. The finest level equals the inputs.
pub fn build_pyramid(i0: &ScalarField, i1: &ScalarField, levels: usize) -> Result<Pyramid> {
    if i0.grid() != i1.grid() {
        return Err(Error::GridMismatch(format!(
            "pyramid inputs: {:?} vs {:?}",
            i0.grid().dims(),
            i1.grid().dims()
        )));
    }
    if levels < 1 {
        return Err(Error::InvalidConfig("levels must be >= 1".into()));
    }
    // every level must keep >= 4 samples per axis
    let min_dim = *i0.grid().dims().iter().min().unwrap();
    if (min_dim >> (levels - 1)) < 4 {
        return Err(Error::InvalidConfig(format!(
            "{} levels too deep for dims {:?}",
            levels,
            i0.grid().dims()
        )));
    }

    let mut out = Vec::with_capacity(levels);
    out.push((i0.clone(), i1.clone()));
    for _ in 1..levels {
        let (a, b) = out.last().unwrap();
        let da = downsample(a)?;
        let db = downsample(b)?;
        out.push((da, db));
    }
    out.reverse();
    Ok(Pyramid { levels: out })
}

/// Transfers a displacement to a finer grid: each component is resampled
/// by multilinear interpolation of index coordinates, then scaled by the
/// per-axis dim ratio so voxel-unit displacements keep physical meaning.
pub fn prolong_displacement(u: &VectorField, target: &GridDesc) -> Result<VectorField> {
    let src = u.grid();
    if src.rank() != target.rank() {
        return Err(Error::GridMismatch("prolongation rank mismatch".into()));
    }
    for (&t, &s) in target.dims().iter().zip(src.dims()) {
        if t + 1 < 2 * s || t > 2 * s {
            return Err(Error::GridMismatch(format!(
                "target dim {t} not within [{}, {}] of source dim {s}",
                2 * s - 1,
                2 * s
            )));
        }
    }

    let rank = src.rank();
    let ratio: Vec<f64> = target
        .dims()
        .iter()
        .zip(src.dims())
        .map(|(&t, &s)| t as f64 / s as f64)
        .collect();

    let [t0, t1, t2] = target.padded_dims();
    let mut comps = Vec::with_capacity(rank);
    for c in 0..rank {
        let plane = u.component(c);
        let mut out = Vec::with_capacity(target.len());
        for i0 in 0..t0 {
            for i1 in 0..t1 {
                for i2 in 0..t2 {
                    let t = [i0 as f64, i1 as f64, i2 as f64];
                    let mut coord = [0.0; 3];
                    for a in 0..rank {
                        coord[a] = clamp_coord(t[a] / ratio[a], src.dims()[a]);
                    }
                    out.push(crate::sampler::sample_multilinear(plane, src, coord) * ratio[c]);
                }
            }
        }
        comps.push(out);
    }
    VectorField::new(target.clone(), comps)
}

#[inline]
pub(crate) fn clamp_coord(x: f64, dim: usize) -> f64 {
    x.max(0.0).min((dim - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ramp_x(dims: &[usize]) -> ScalarField {
        ScalarField::from_fn(GridDesc::isotropic(dims).unwrap(), |i| i[0] as f64)
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(GridDesc::new(&[4], &[1.0]).is_err());
        assert!(GridDesc::new(&[4, 1], &[1.0, 1.0]).is_err());
        assert!(GridDesc::new(&[4, 4], &[1.0, 0.0]).is_err());
        assert!(GridDesc::new(&[4, 4, 4], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn single_level_pyramid_is_identity() {
        let i0 = ramp_x(&[8, 8]);
        let i1 = ramp_x(&[8, 8]);
        let p = build_pyramid(&i0, &i1, 1).unwrap();
        assert_eq!(p.num_levels(), 1);
        assert_eq!(p.levels()[0].0, i0);
    }

    #[test]
    fn constant_image_stays_constant() {
        let g = GridDesc::isotropic(&[32, 32]).unwrap();
        let c = ScalarField::from_fn(g, |_| 7.0);
        let p = build_pyramid(&c, &c, 3).unwrap();
        for (a, b) in p.levels() {
            assert!(a.values().iter().all(|&v| v == 7.0));
            assert!(b.values().iter().all(|&v| v == 7.0));
        }
    }

    #[test]
    fn ramp_downsamples_to_block_means() {
        // 8x8 ramp I(x,y)=x, two levels: coarse rows average {0,1},{2,3},...
        let i = ramp_x(&[8, 8]);
        let p = build_pyramid(&i, &i, 2).unwrap();
        let coarse = &p.levels()[0].0;
        assert_eq!(coarse.grid().dims(), &[4, 4]);
        for i0 in 0..4 {
            for i1 in 0..4 {
                assert_abs_diff_eq!(coarse.at([i0, i1, 0]), 2.0 * i0 as f64 + 0.5);
            }
        }
    }

    #[test]
    fn odd_dims_fold_trailing_sample() {
        // 9 samples along x -> 4 blocks: {0,1}, {2,3}, {4,5}, {6,7,8}
        let i = ramp_x(&[9, 8]);
        let p = build_pyramid(&i, &i, 2).unwrap();
        let coarse = &p.levels()[0].0;
        assert_eq!(coarse.grid().dims(), &[4, 4]);
        assert_abs_diff_eq!(coarse.at([0, 0, 0]), 0.5);
        assert_abs_diff_eq!(coarse.at([1, 0, 0]), 2.5);
        assert_abs_diff_eq!(coarse.at([2, 0, 0]), 4.5);
        assert_abs_diff_eq!(coarse.at([3, 0, 0]), 7.0);
    }

    #[test]
    fn pyramid_depth_validation() {
        let i = ramp_x(&[8, 8]);
        assert!(build_pyramid(&i, &i, 2).is_ok());
        assert!(build_pyramid(&i, &i, 3).is_err());
        let j = ramp_x(&[8, 4]);
        assert!(build_pyramid(&i, &j, 1).is_err());
    }

    #[test]
    fn block_mean_preserves_sum_ratio() {
        // even dims, 2D: sum(coarse) * 4 == sum(fine) for integer inputs
        let g = GridDesc::isotropic(&[16, 16]).unwrap();
        let f = ScalarField::from_fn(g, |i| ((i[0] * 31 + i[1] * 7) % 13) as f64);
        let p = build_pyramid(&f, &f, 2).unwrap();
        let fine: f64 = p.levels()[1].0.values().iter().sum();
        let coarse: f64 = p.levels()[0].0.values().iter().sum();
        assert_abs_diff_eq!(coarse * 4.0, fine, epsilon = 1e-9);
    }

    #[test]
    fn prolong_zero_is_zero() {
        let src = GridDesc::isotropic(&[4, 4]).unwrap();
        let tgt = GridDesc::isotropic(&[8, 7]).unwrap();
        let u = VectorField::zeros(src);
        let p = prolong_displacement(&u, &tgt).unwrap();
        assert!(p.components().iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn prolong_constant_doubles() {
        let src = GridDesc::isotropic(&[4, 4]).unwrap();
        let tgt = GridDesc::isotropic(&[8, 8]).unwrap();
        let mut u = VectorField::zeros(src);
        u.component_mut(0).iter_mut().for_each(|v| *v = 1.0);
        let p = prolong_displacement(&u, &tgt).unwrap();
        assert!(p.component(0).iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert!(p.component(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prolong_linear_matches_reference() {
        // u_x(x,y) = x on 4x4 -> interior of 8x8 should reproduce x
        let src = GridDesc::isotropic(&[4, 4]).unwrap();
        let tgt = GridDesc::isotropic(&[8, 8]).unwrap();
        let mut u = VectorField::zeros(src.clone());
        for i0 in 0..4 {
            for i1 in 0..4 {
                u.component_mut(0)[src.offset([i0, i1, 0])] = i0 as f64;
            }
        }
        let p = prolong_displacement(&u, &tgt).unwrap();
        // dense reference: value at target x is interp(x/2) * 2, clamped at 3
        for i0 in 0..8usize {
            for i1 in 0..8usize {
                let expect = (i0 as f64 / 2.0).min(3.0) * 2.0;
                let got = p.component(0)[tgt.offset([i0, i1, 0])];
                assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn prolong_rejects_incompatible_target() {
        let src = GridDesc::isotropic(&[4, 4]).unwrap();
        let tgt = GridDesc::isotropic(&[12, 8]).unwrap();
        let u = VectorField::zeros(src);
        assert!(prolong_displacement(&u, &tgt).is_err());
    }

    #[test]
    fn pyramid_is_deterministic() {
        let g = GridDesc::isotropic(&[16, 16]).unwrap();
        let f = ScalarField::from_fn(g, |i| libm::sin(i[0] as f64 * 0.3 + i[1] as f64));
        let a = build_pyramid(&f, &f, 3).unwrap();
        let b = build_pyramid(&f, &f, 3).unwrap();
        for (la, lb) in a.levels().iter().zip(b.levels()) {
            assert_eq!(la.0.values(), lb.0.values());
        }
    }
}
