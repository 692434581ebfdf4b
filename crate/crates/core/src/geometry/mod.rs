//! Geometric kernels shared by every stage: point containers, exact
//! nearest-neighbour search, Chamfer distance, Gaussian scattered-data
//! interpolation and grid rasterization.
//!
//! Everything in here works in double precision and millimetres.

mod interp;
mod kdtree;

pub use interp::{gaussian_interpolate, rasterize_displacement, GaussianWeights, VectorGrid};
pub use kdtree::{Neighbor, NeighborIndex, TieBreak};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn check_finite(items: &[Vec3]) -> Result<()> {
    match items.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// An ordered, non-empty set of 3-D points in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        check_finite(&points)?;
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    /// Points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices
            .iter()
            .map(|&i| {
                self.points.get(i).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("index {i} out of range for {} points", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points)
    }

    /// `self + field`, point-wise.
    pub fn warp(&self, field: &DisplacementField) -> Result<Self> {
        if field.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "displacement field vs cloud",
                expected: self.len(),
                got: field.len(),
            });
        }
        Self::new(
            self.points
                .iter()
                .zip(field.vectors())
                .map(|(p, v)| add(p, v))
                .collect(),
        )
    }

    pub fn mean(&self) -> Vec3 {
        let n = self.len() as f64;
        let mut m = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                m[a] += p[a];
            }
        }
        m.map(|c| c / n)
    }

    /// Per-axis population standard deviation.
    pub fn std(&self) -> Vec3 {
        let m = self.mean();
        let n = self.len() as f64;
        let mut v = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                let d = p[a] - m[a];
                v[a] += d * d;
            }
        }
        v.map(|c| (c / n).sqrt())
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Apply `f` to every point.
    pub fn map(&self, mut f: impl FnMut(&Vec3) -> Vec3) -> Result<Self> {
        Self::new(self.points.iter().map(&mut f).collect())
    }
}

/// One displacement vector per point of an associated moving cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    vectors: Vec<Vec3>,
}

impl DisplacementField {
    pub fn new(vectors: Vec<Vec3>) -> Result<Self> {
        check_finite(&vectors)?;
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn constant(n: usize, v: Vec3) -> Self {
        Self { vectors: vec![v; n] }
    }

    /// `to - from`, point-wise; the field that maps `from` onto `to`.
    pub fn between(from: &PointCloud, to: &PointCloud) -> Result<Self> {
        if from.len() != to.len() {
            return Err(Error::LengthMismatch {
                what: "clouds for displacement",
                expected: from.len(),
                got: to.len(),
            });
        }
        Self::new(
            from.iter()
                .zip(to.iter())
                .map(|(a, b)| sub(b, a))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<Vec3> {
        self.vectors
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let vectors = indices
            .iter()
            .map(|&i| {
                self.vectors.get(i).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("index {i} out of range for {} vectors", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vectors })
    }
}

/// Symmetric Chamfer distance: the sum (not mean) of squared nearest-neighbour
/// distances from `x` to `y` plus those from `y` to `x`, in mm².
pub fn chamfer_distance(x: &PointCloud, y: &PointCloud) -> f64 {
    let ix = NeighborIndex::build(x);
    let iy = NeighborIndex::build(y);
    chamfer_with_indices(x, &ix, y, &iy)
}

/// Chamfer distance reusing prebuilt indices (`ix` over `x`, `iy` over `y`).
pub fn chamfer_with_indices(
    x: &PointCloud,
    ix: &NeighborIndex,
    y: &PointCloud,
    iy: &NeighborIndex,
) -> f64 {
    let forward: f64 = x.iter().map(|p| iy.nearest(p).dist2).sum();
    let backward: f64 = y.iter().map(|p| ix.nearest(p).dist2).sum();
    forward + backward
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(p: &[Vec3]) -> PointCloud {
        PointCloud::new(p.to_vec()).unwrap()
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
        assert!(matches!(
            PointCloud::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(DisplacementField::new(vec![[f64::INFINITY, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn chamfer_fixtures() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &b), 2.0);
        let two = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        // forward: 0 + 4, backward: 0
        assert_eq!(chamfer_distance(&two, &a), 4.0);
        assert_eq!(chamfer_distance(&two, &two), 0.0);
    }

    #[test]
    fn warp_checks_length() {
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        assert!(a.warp(&DisplacementField::zeros(3)).is_err());
        let w = a.warp(&DisplacementField::constant(2, [1.0, 0.0, 0.0])).unwrap();
        assert_eq!(w.points()[1], [2.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_and_std() {
        let a = cloud(&[[0.0, 0.0, 1.0], [2.0, 4.0, 1.0]]);
        assert_eq!(a.mean(), [1.0, 2.0, 1.0]);
        assert_eq!(a.std(), [1.0, 2.0, 0.0]);
    }
}
