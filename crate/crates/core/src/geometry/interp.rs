use super::{DisplacementField, NeighborIndex, Neighbor, PointCloud, Vec3, TieBreak};
use crate::error::{Error, Result};

/// Sources whose kernel weight relative to the nearest source falls below
/// `exp(-LOG_CUTOFF)` are skipped. They cannot change a double-precision sum.
const LOG_CUTOFF: f64 = 46.0;

/// Normalized isotropic Gaussian weights from a fixed source set to a fixed
/// target set, stored sparsely. Linear in the source values, so the same
/// weights serve both interpolation and its adjoint.
#[derive(Debug, Clone)]
pub struct GaussianWeights {
    n_sources: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl GaussianWeights {
    /// Weights for `w_i = exp(-|p - s_i|^2 / (2 sigma^2))`, normalized per
    /// target. A target whose raw weight sum underflows to zero takes the
    /// nearest source value instead.
    pub fn new(sources: &[Vec3], targets: &[Vec3], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        if sources.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let index = NeighborIndex::from_points(sources.to_vec(), TieBreak::Index);
        let two_s2 = 2.0 * sigma * sigma;
        let mut scratch: Vec<Neighbor> = Vec::new();
        let rows = targets
            .iter()
            .map(|p| {
                let near = index.nearest(p);
                scratch.clear();
                index.within_unsorted(p, near.dist2 + LOG_CUTOFF * two_s2, &mut scratch);
                let raw: f64 = scratch.iter().map(|n| (-n.dist2 / two_s2).exp()).sum();
                if raw == 0.0 {
                    return vec![(near.index, 1.0)];
                }
                // shifted by the nearest distance; same ratios, no underflow
                let mut row: Vec<(usize, f64)> = scratch
                    .iter()
                    .map(|n| (n.index, (-(n.dist2 - near.dist2) / two_s2).exp()))
                    .collect();
                let total: f64 = row.iter().map(|r| r.1).sum();
                for r in &mut row {
                    r.1 /= total;
                }
                // nearest source first; `apply` expands around it
                if let Some(k) = row.iter().position(|r| r.0 == near.index) {
                    row.swap(0, k);
                }
                row
            })
            .collect();
        Ok(Self {
            n_sources: sources.len(),
            rows,
        })
    }

    pub(crate) fn into_rows(self) -> Vec<Vec<(usize, f64)>> {
        self.rows
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn n_targets(&self) -> usize {
        self.rows.len()
    }

    /// Weighted mean of `values` per target, evaluated as
    /// `v_near + Σ w_i (v_i - v_near)` so that constant fields are reproduced
    /// exactly.
    pub fn apply(&self, values: &[Vec3]) -> Vec<Vec3> {
        debug_assert_eq!(values.len(), self.n_sources);
        self.rows
            .iter()
            .map(|row| {
                let base = values[row[0].0];
                let mut acc = [0.0; 3];
                for &(j, w) in &row[1..] {
                    for a in 0..3 {
                        acc[a] += w * (values[j][a] - base[a]);
                    }
                }
                [base[0] + acc[0], base[1] + acc[1], base[2] + acc[2]]
            })
            .collect()
    }

    /// Adjoint of `apply`: scatters target gradients back onto the sources.
    pub fn apply_transpose(&self, grads: &[Vec3]) -> Vec<Vec3> {
        let mut out = vec![[0.0; 3]; self.n_sources];
        for (row, g) in self.rows.iter().zip(grads) {
            for &(j, w) in row {
                for a in 0..3 {
                    out[j][a] += w * g[a];
                }
            }
        }
        out
    }
}

/// Interpolate `values` (attached to `sources`) onto `targets` with a
/// normalized isotropic Gaussian kernel of width `sigma` (mm).
pub fn gaussian_interpolate(
    sources: &PointCloud,
    values: &DisplacementField,
    targets: &PointCloud,
    sigma: f64,
) -> Result<DisplacementField> {
    if values.len() != sources.len() {
        return Err(Error::LengthMismatch {
            what: "values vs sources",
            expected: sources.len(),
            got: values.len(),
        });
    }
    let w = GaussianWeights::new(sources.points(), targets.points(), sigma)?;
    DisplacementField::new(w.apply(values.vectors()))
}

/// Dense vector samples on a regular axis-aligned grid. Index order is
/// x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorGrid {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
    pub values: Vec<Vec3>,
}

impl VectorGrid {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin[0] + i as f64 * self.spacing,
            self.origin[1] + j as f64 * self.spacing,
            self.origin[2] + k as f64 * self.spacing,
        ]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.values[self.index(i, j, k)]
    }

    pub fn centers(&self) -> Vec<Vec3> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::with_capacity(nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(self.center(i, j, k));
                }
            }
        }
        out
    }
}

/// Geometry of the grid used by `rasterize_displacement`: the cloud bounding
/// box padded by `2 sigma` on each side; collapsed axes get a single voxel.
pub(crate) fn raster_layout(cloud: &PointCloud, spacing: f64, sigma: f64) -> (Vec3, [usize; 3]) {
    let (lo, hi) = cloud.bounds();
    let mut origin = [0.0; 3];
    let mut dims = [1usize; 3];
    for a in 0..3 {
        let extent = hi[a] - lo[a];
        if extent == 0.0 {
            origin[a] = lo[a];
            dims[a] = 1;
        } else {
            origin[a] = lo[a] - 2.0 * sigma;
            dims[a] = ((extent + 4.0 * sigma) / spacing).ceil() as usize + 1;
        }
    }
    (origin, dims)
}

/// Interpolate a sparse displacement field onto a regular grid of voxel
/// centres with `gaussian_interpolate`.
pub fn rasterize_displacement(
    cloud: &PointCloud,
    field: &DisplacementField,
    spacing: f64,
    sigma: f64,
) -> Result<VectorGrid> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing}")));
    }
    if field.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            what: "field vs cloud",
            expected: cloud.len(),
            got: field.len(),
        });
    }
    let (origin, dims) = raster_layout(cloud, spacing, sigma);
    let mut grid = VectorGrid {
        origin,
        spacing,
        dims,
        values: Vec::new(),
    };
    let centers = grid.centers();
    let w = GaussianWeights::new(cloud.points(), &centers, sigma)?;
    grid.values = w.apply(field.vectors());
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain all-pairs evaluation of the normalized kernel sum.
    fn direct(sources: &[Vec3], values: &[Vec3], p: &Vec3, sigma: f64) -> Vec3 {
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for (s, v) in sources.iter().zip(values) {
            let w = (-dist2(p, s) / (2.0 * sigma * sigma)).exp();
            den += w;
            for a in 0..3 {
                num[a] += w * v[a];
            }
        }
        num.map(|c| c / den)
    }

    fn pc(p: Vec<Vec3>) -> PointCloud {
        PointCloud::new(p).unwrap()
    }

    #[test]
    fn single_source_copies_value() {
        let s = pc(vec![[1.0, 2.0, 3.0]]);
        let v = DisplacementField::new(vec![[0.5, -1.0, 2.0]]).unwrap();
        let t = pc(vec![[0.0; 3], [100.0, 0.0, 0.0], [1e4, 1e4, 1e4]]);
        let out = gaussian_interpolate(&s, &v, &t, 5.0).unwrap();
        for o in out.vectors() {
            assert_eq!(*o, [0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn equidistant_target_averages() {
        let s = pc(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let v = DisplacementField::new(vec![[2.0, 0.0, 4.0], [0.0, 2.0, 0.0]]).unwrap();
        let t = pc(vec![[0.0, 3.0, 0.0]]);
        let out = gaussian_interpolate(&s, &v, &t, 2.0).unwrap();
        let o = out.vectors()[0];
        for (a, b) in o.iter().zip([1.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn three_sources_match_direct_sum() {
        let src = vec![[0.0, 0.0, 0.0], [4.0, 1.0, 0.0], [1.0, 5.0, -2.0]];
        let vals = vec![[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [-2.0, 1.0, 7.0]];
        let t = pc(vec![[1.5, 1.5, 0.3], [3.0, -2.0, 1.0]]);
        let out = gaussian_interpolate(&pc(src.clone()), &DisplacementField::new(vals.clone()).unwrap(), &t, 3.0).unwrap();
        for (p, o) in t.iter().zip(out.vectors()) {
            let want = direct(&src, &vals, p, 3.0);
            for a in 0..3 {
                assert!((o[a] - want[a]).abs() <= 1e-12 * want[a].abs().max(1.0));
            }
        }
    }

    #[test]
    fn underflow_falls_back_to_nearest() {
        let s = pc(vec![[0.0; 3], [10.0, 0.0, 0.0]]);
        let v = DisplacementField::new(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        // exp(-(1e3)^2 / 2) underflows for both sources
        let t = pc(vec![[-1000.0, 0.0, 0.0]]);
        let out = gaussian_interpolate(&s, &v, &t, 1.0).unwrap();
        assert_eq!(out.vectors()[0], [1.0, 0.0, 0.0]);
        assert!(out.vectors()[0].iter().all(|c| c.is_finite()));
    }

    #[test]
    fn random_targets_match_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src: Vec<Vec3> = (0..80).map(|_| [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)]).collect();
        let vals: Vec<Vec3> = (0..80).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect();
        let tg: Vec<Vec3> = (0..50).map(|_| [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)]).collect();
        let out = gaussian_interpolate(&pc(src.clone()), &DisplacementField::new(vals.clone()).unwrap(), &pc(tg.clone()), 5.0).unwrap();
        for (p, o) in tg.iter().zip(out.vectors()) {
            let want = direct(&src, &vals, p, 5.0);
            for a in 0..3 {
                assert!((o[a] - want[a]).abs() <= 1e-10 * want[a].abs().max(1.0), "{o:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src: Vec<Vec3> = (0..20).map(|_| [rng.random(), rng.random(), rng.random()].map(|c: f64| c * 10.0)).collect();
        let tg: Vec<Vec3> = (0..15).map(|_| [rng.random(), rng.random(), rng.random()].map(|c: f64| c * 10.0)).collect();
        let w = GaussianWeights::new(&src, &tg, 2.0).unwrap();
        let x: Vec<Vec3> = (0..20).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let y: Vec<Vec3> = (0..15).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let ax = w.apply(&x);
        let aty = w.apply_transpose(&y);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn raster_constant_and_zero_fields() {
        let c = pc(vec![[0.0, 0.0, 0.0], [10.0, 4.0, 2.0], [3.0, 8.0, 6.0]]);
        let g = rasterize_displacement(&c, &DisplacementField::constant(3, [1.5, -2.0, 0.25]), 2.0, 1.0).unwrap();
        assert!(g.values.iter().all(|v| (v[0] - 1.5).abs() < 1e-12 && (v[1] + 2.0).abs() < 1e-12 && (v[2] - 0.25).abs() < 1e-12));
        let z = rasterize_displacement(&c, &DisplacementField::zeros(3), 2.0, 1.0).unwrap();
        assert!(z.values.iter().all(|v| *v == [0.0; 3]));
        // padded by 2 sigma on each side
        assert_eq!(g.origin, [-2.0, -2.0, -2.0]);
        assert_eq!(g.dims, [8, 7, 6]);
    }

    #[test]
    fn raster_degenerate_axis() {
        let c = pc(vec![[0.0, 0.0, 5.0], [10.0, 4.0, 5.0]]);
        let g = rasterize_displacement(&c, &DisplacementField::zeros(2), 1.0, 1.0).unwrap();
        assert_eq!(g.dims[2], 1);
        assert_eq!(g.origin[2], 5.0);
    }

    #[test]
    fn raster_matches_per_voxel_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..40).map(|_| [rng.random_range(0.0..20.0), rng.random_range(0.0..15.0), rng.random_range(0.0..10.0)]).collect();
        let vals: Vec<Vec3> = (0..40).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let g = rasterize_displacement(&pc(pts.clone()), &DisplacementField::new(vals.clone()).unwrap(), 3.0, 2.5).unwrap();
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let want = direct(&pts, &vals, &g.center(i, j, k), 2.5);
                    let got = g.get(i, j, k);
                    for a in 0..3 {
                        assert!((got[a] - want[a]).abs() <= 1e-10 * want[a].abs().max(1.0));
                    }
                }
            }
        }
    }
}
