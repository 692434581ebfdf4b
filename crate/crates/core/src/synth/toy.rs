//! Toy vessel-like datasets: random branching trees of quadratic Bezier
//! segments, sampled by arc length with Gaussian jitter.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{pre_align, Deformation, DeformationKind, Landmarks, RegistrationCase};
use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, PointCloud, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Branching generations below the trunk.
    pub depth: usize,
    pub trunk_length: f64,
    /// Points in the fixed and moving clouds.
    pub n_points: usize,
    /// Points in the dense moving pool.
    pub n_pool: usize,
    pub n_landmarks: usize,
    /// Std of the per-point jitter (mm).
    pub noise: f64,
    pub deformation: DeformationKind,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            trunk_length: 45.0,
            n_points: 2048,
            n_pool: 4096,
            n_landmarks: 50,
            noise: 0.5,
            deformation: DeformationKind::two_scale_default(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 || self.n_landmarks == 0 {
            return Err(Error::Config("toy point and landmark counts must be >= 1".into()));
        }
        if self.n_pool < self.n_points {
            return Err(Error::Config("toy n_pool must be >= n_points".into()));
        }
        if !(self.trunk_length > 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("toy trunk_length must be > 0 and noise >= 0".into()));
        }
        self.deformation.validate()
    }
}

/// Polyline approximation of a random branching tree.
#[derive(Debug, Clone)]
pub struct Tree {
    segments: Vec<(Vec3, Vec3)>,
    cumulative: Vec<f64>,
}

const SAMPLES_PER_CURVE: usize = 100;

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn scale(a: &Vec3, s: f64) -> Vec3 {
    a.map(|x| x * s)
}

fn norm(a: &Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn unit(a: &Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn axpy(a: f64, x: &Vec3, y: &Vec3) -> Vec3 {
    [a * x[0] + y[0], a * x[1] + y[1], a * x[2] + y[2]]
}

impl Tree {
    pub fn sample(rng: &mut impl Rng, depth: usize, trunk_length: f64) -> Self {
        let mut polys = Vec::new();
        grow(rng, [0.0, 0.0, 60.0], [0.0, 0.0, -1.0], trunk_length, depth, &mut polys);
        let mut segments = Vec::new();
        for poly in &polys {
            for w in poly.windows(2) {
                segments.push((w[0], w[1]));
            }
        }
        let mut total = 0.0;
        let cumulative = segments
            .iter()
            .map(|(a, b)| {
                total += crate::geometry::dist2(a, b).sqrt();
                total
            })
            .collect();
        Self { segments, cumulative }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    /// `n` points uniform in arc length plus isotropic Gaussian jitter.
    pub fn sample_points(&self, rng: &mut impl Rng, n: usize, noise: f64) -> Vec<Vec3> {
        let total = self.length();
        (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                let i = self.cumulative.partition_point(|&c| c < u).min(self.segments.len() - 1);
                let (a, b) = self.segments[i];
                let t: f64 = rng.random();
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = a[k] + (b[k] - a[k]) * t + noise * normal(rng);
                }
                p
            })
            .collect()
    }
}

fn grow(rng: &mut impl Rng, start: Vec3, dir: Vec3, len: f64, depth: usize, out: &mut Vec<Vec<Vec3>>) {
    let end = axpy(len, &dir, &start);
    let mut ctrl = axpy(0.5 * len, &dir, &start);
    for c in &mut ctrl {
        *c += 0.15 * len * normal(rng);
    }
    let poly = (0..SAMPLES_PER_CURVE)
        .map(|i| {
            let t = i as f64 / (SAMPLES_PER_CURVE - 1) as f64;
            let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * (1.0 - t) * t, t * t);
            [0, 1, 2].map(|k| a * start[k] + b * ctrl[k] + c * end[k])
        })
        .collect();
    out.push(poly);
    if depth == 0 {
        return;
    }
    let tangent = unit(&[end[0] - ctrl[0], end[1] - ctrl[1], end[2] - ctrl[2]]);
    let mut axis = [normal(rng), normal(rng), normal(rng)];
    axis = unit(&axpy(-dot(&axis, &tangent), &tangent, &axis));
    let side = cross(&axis, &tangent);
    for sign in [-1.0, 1.0] {
        let ang = sign * rng.random_range(25.0f64..45.0).to_radians();
        let d = axpy(ang.sin(), &side, &scale(&tangent, ang.cos()));
        let child = len * rng.random_range(0.7..0.85);
        grow(rng, end, d, child, depth - 1, out);
    }
}

/// One pre-aligned target-domain case.
///
/// The fixed cloud and the moving pool are independent samplings of the same
/// tree; the pool is warped by a random field and `moving` is a random subset
/// of it. Landmarks are noise-free tree points and their warped images. The
/// whole case is shifted so that the fixed cloud has zero mean.
pub fn toy_case(id: impl Into<String>, config: &ToyConfig, rng: &mut impl Rng) -> Result<RegistrationCase> {
    config.validate()?;
    let tree = Tree::sample(rng, config.depth, config.trunk_length);
    let fixed = tree.sample_points(rng, config.n_points, config.noise);
    let raw = tree.sample_points(rng, config.n_pool, config.noise);
    let lm_fixed = tree.sample_points(rng, config.n_landmarks, 0.0);

    let mut all = fixed.clone();
    all.extend_from_slice(&raw);
    let (lo, hi) = PointCloud::new(all)?.bounds();
    let def = Deformation::sample(&config.deformation, lo, hi, rng)?;
    let pool: Vec<Vec3> = raw.iter().map(|p| def.apply(p)).collect();
    let lm_moving: Vec<Vec3> = lm_fixed.iter().map(|p| def.apply(p)).collect();

    let subset = rand::seq::index::sample(rng, config.n_pool, config.n_points).into_vec();
    let moving: Vec<Vec3> = subset.iter().map(|&i| pool[i]).collect();
    let gt: Vec<Vec3> = subset
        .iter()
        .map(|&i| [0, 1, 2].map(|k| raw[i][k] - pool[i][k]))
        .collect();

    let fixed = PointCloud::new(fixed)?;
    let mu = fixed.mean();
    let centre = |p: &Vec3| [p[0] - mu[0], p[1] - mu[1], p[2] - mu[2]];
    let mut case = RegistrationCase::new(id, fixed.map(centre)?, PointCloud::new(moving)?.map(centre)?);
    case.moving_highres = Some(PointCloud::new(pool)?.map(centre)?);
    case.gt = Some(DisplacementField::new(gt)?);
    case.landmarks = Some(Landmarks::new(
        PointCloud::new(lm_moving)?.map(centre)?,
        PointCloud::new(lm_fixed)?.map(centre)?,
    )?);
    Ok(pre_align(&case)?.0)
}

/// `n` cases with ids `case000`, `case001`, ...
pub fn toy_dataset(n: usize, config: &ToyConfig, rng: &mut impl Rng) -> Result<Vec<RegistrationCase>> {
    (0..n).map(|i| toy_case(format!("case{i:03}"), config, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn case_shapes_and_alignment() {
        let cfg = ToyConfig {
            n_points: 256,
            n_pool: 512,
            n_landmarks: 10,
            ..ToyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let case = toy_case("t", &cfg, &mut rng).unwrap();
        case.validate().unwrap();
        assert_eq!(case.fixed.len(), 256);
        assert_eq!(case.moving.len(), 256);
        assert_eq!(case.moving_highres.as_ref().unwrap().len(), 512);
        assert_eq!(case.landmarks.as_ref().unwrap().len(), 10);
        let (mm, fm) = (case.moving.mean(), case.fixed.mean());
        let (ms, fs) = (case.moving.std(), case.fixed.std());
        for a in 0..3 {
            assert!(fm[a].abs() < 1e-9);
            assert!((mm[a] - fm[a]).abs() < 1e-9);
            assert!((ms[a] - fs[a]).abs() < 1e-9 * fs[a]);
        }
        // gt carries each moving point back onto an undeformed tree sample
        let target = case.moving.warp(case.gt.as_ref().unwrap()).unwrap();
        let d = crate::geometry::chamfer_distance(&target, &case.fixed) / 512.0;
        assert!(d < 10.0, "{d}");
    }

    #[test]
    fn reproducible() {
        let cfg = ToyConfig {
            n_points: 64,
            n_pool: 128,
            ..ToyConfig::default()
        };
        let a = toy_dataset(2, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = toy_dataset(2, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[1].id, "case001");
    }

    #[test]
    fn tree_spans_expected_extent() {
        let t = Tree::sample(&mut ChaCha8Rng::seed_from_u64(3), 5, 45.0);
        assert!(t.length() > 45.0 * 5.0);
    }
}
