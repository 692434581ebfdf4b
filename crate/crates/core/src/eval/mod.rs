//! Registration metrics: landmark TRE and SDlogJ of the rasterized field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{gaussian_interpolate, rasterize_displacement, DisplacementField, VectorGrid};
use crate::synth::RegistrationCase;

/// Kernel width (mm) for carrying predicted displacements to landmarks.
pub const TRE_SIGMA: f64 = 5.0;
/// Default voxel spacing (mm) of the SDlogJ grid.
pub const SDLOGJ_SPACING: f64 = 4.0;
/// Floor applied to non-positive Jacobian determinants.
pub const JACOBIAN_FLOOR: f64 = 1e-6;

/// Per-landmark target registration errors (mm) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Tre {
    pub errors: Vec<f64>,
    pub mean: f64,
}

pub fn tre(case: &RegistrationCase, phi: &DisplacementField) -> Result<Tre> {
    let lm = case.landmarks.as_ref().ok_or(Error::Missing("landmarks"))?;
    let disp = gaussian_interpolate(&case.moving, phi, &lm.moving, TRE_SIGMA)?;
    let errors: Vec<f64> = lm
        .moving
        .iter()
        .zip(disp.vectors())
        .zip(lm.fixed.iter())
        .map(|((m, d), f)| {
            let e = [m[0] + d[0] - f[0], m[1] + d[1] - f[1], m[2] + d[2] - f[2]];
            (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
        })
        .collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(Tre { errors, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothness {
    pub sdlogj: f64,
    /// Interior voxels with `det J <= 0`.
    pub folded: usize,
    pub voxels: usize,
}

impl Smoothness {
    pub fn folding_fraction(&self) -> f64 {
        self.folded as f64 / self.voxels as f64
    }
}

/// SDlogJ of `x -> x + phi(x)` after rasterizing `phi` with spacing `spacing`.
pub fn sdlogj(case: &RegistrationCase, phi: &DisplacementField, spacing: f64) -> Result<Smoothness> {
    let grid = rasterize_displacement(&case.moving, phi, spacing, TRE_SIGMA)?;
    grid_sdlogj(&grid)
}

/// `det J` of `x -> x + u(x)` at each interior voxel from central differences,
/// in grid index order.
pub fn jacobian_determinants(grid: &VectorGrid) -> Result<Vec<f64>> {
    let [nx, ny, nz] = grid.dims;
    if nx < 3 || ny < 3 || nz < 3 {
        return Err(Error::GridTooSmall { dims: grid.dims });
    }
    let h2 = 2.0 * grid.spacing;
    let mut out = Vec::with_capacity((nx - 2) * (ny - 2) * (nz - 2));
    for k in 1..nz - 1 {
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let d = [
                    diff(grid.get(i + 1, j, k), grid.get(i - 1, j, k), h2),
                    diff(grid.get(i, j + 1, k), grid.get(i, j - 1, k), h2),
                    diff(grid.get(i, j, k + 1), grid.get(i, j, k - 1), h2),
                ];
                // column c of J is e_c + du/dx_c
                let mut jm = [[0.0; 3]; 3];
                for (c, col) in d.iter().enumerate() {
                    for r in 0..3 {
                        jm[r][c] = col[r] + f64::from(u8::from(r == c));
                    }
                }
                out.push(det3(&jm));
            }
        }
    }
    Ok(out)
}

/// Standard deviation of `log det J` over interior voxels, with determinants
/// clamped to `JACOBIAN_FLOOR`.
pub fn grid_sdlogj(grid: &VectorGrid) -> Result<Smoothness> {
    let dets = jacobian_determinants(grid)?;
    let folded = dets.iter().filter(|&&d| d <= 0.0).count();
    let logs: Vec<f64> = dets.iter().map(|d| d.max(JACOBIAN_FLOOR).ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    Ok(Smoothness {
        sdlogj: var.sqrt(),
        folded,
        voxels: logs.len(),
    })
}

fn diff(a: [f64; 3], b: [f64; 3], h2: f64) -> [f64; 3] {
    [(a[0] - b[0]) / h2, (a[1] - b[1]) / h2, (a[2] - b[2]) / h2]
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Linear interpolation between closest ranks (`q` in [0, 1]).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: String,
    pub tre_mean_mm: f64,
    pub tre_p25_mm: f64,
    pub tre_p75_mm: f64,
    pub sdlogj: f64,
    pub folding_fraction: f64,
    pub landmark_errors_mm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tre_mean_mm: f64,
    pub tre_p25_mm: f64,
    pub tre_p75_mm: f64,
    pub sdlogj: f64,
    pub folding_fraction: f64,
    pub per_case: Vec<CaseReport>,
}

fn stats(errors: &[f64]) -> (f64, f64, f64) {
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    (mean, percentile(&s, 0.25), percentile(&s, 0.75))
}

/// TRE and SDlogJ of one prediction.
pub fn evaluate_case(case: &RegistrationCase, phi: &DisplacementField, spacing: f64) -> Result<CaseReport> {
    let t = tre(case, phi)?;
    let s = sdlogj(case, phi, spacing)?;
    let (_, p25, p75) = stats(&t.errors);
    Ok(CaseReport {
        id: case.id.clone(),
        tre_mean_mm: t.mean,
        tre_p25_mm: p25,
        tre_p75_mm: p75,
        sdlogj: s.sdlogj,
        folding_fraction: s.folding_fraction(),
        landmark_errors_mm: t.errors,
    })
}

/// Dataset aggregates: TRE statistics over the pooled landmark errors, mean
/// of per-case SDlogJ and folding fraction.
pub fn summarize(per_case: Vec<CaseReport>) -> Result<EvalReport> {
    if per_case.is_empty() {
        return Err(Error::InvalidArgument("summarize needs at least one case".into()));
    }
    let pooled: Vec<f64> = per_case.iter().flat_map(|c| c.landmark_errors_mm.iter().copied()).collect();
    if pooled.is_empty() {
        return Err(Error::InvalidArgument("no landmark errors to summarize".into()));
    }
    let (mean, p25, p75) = stats(&pooled);
    let n = per_case.len() as f64;
    Ok(EvalReport {
        tre_mean_mm: mean,
        tre_p25_mm: p25,
        tre_p75_mm: p75,
        sdlogj: per_case.iter().map(|c| c.sdlogj).sum::<f64>() / n,
        folding_fraction: per_case.iter().map(|c| c.folding_fraction).sum::<f64>() / n,
        per_case,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PointCloud, Vec3};
    use crate::synth::Landmarks;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pc(p: Vec<Vec3>) -> PointCloud {
        PointCloud::new(p).unwrap()
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize, l: usize) -> RegistrationCase {
        let mut r = |k: usize| pc((0..k).map(|_| [0, 1, 2].map(|_| rng.random_range(-20.0..20.0))).collect());
        let (f, m, lm, lf) = (r(n), r(n), r(l), r(l));
        let mut case = RegistrationCase::new("r", f, m);
        case.landmarks = Some(Landmarks::new(lm, lf).unwrap());
        case
    }

    #[test]
    fn zero_field_gives_landmark_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let case = random_case(&mut rng, 30, 12);
        let t = tre(&case, &DisplacementField::zeros(30)).unwrap();
        let lm = case.landmarks.as_ref().unwrap();
        for (e, (m, f)) in t.errors.iter().zip(lm.moving.iter().zip(lm.fixed.iter())) {
            assert!((e - crate::geometry::dist2(m, f).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn single_source_copies_vector() {
        let mut case = RegistrationCase::new("s", pc(vec![[9.0; 3]]), pc(vec![[0.0; 3]]));
        case.landmarks = Some(Landmarks::new(pc(vec![[1.0, 2.0, 3.0]]), pc(vec![[4.0, 0.0, 3.0]])).unwrap());
        let t = tre(&case, &DisplacementField::new(vec![[3.0, -2.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(t.errors, vec![0.0]);
        let bare = RegistrationCase::new("s", pc(vec![[9.0; 3]]), pc(vec![[0.0; 3]]));
        assert!(tre(&bare, &DisplacementField::zeros(1)).is_err());
    }

    #[test]
    fn tre_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let case = random_case(&mut rng, 40, 10);
        let phi = DisplacementField::new((0..40).map(|_| [0, 1, 2].map(|_| rng.random_range(-3.0..3.0))).collect()).unwrap();
        let t = tre(&case, &phi).unwrap();
        let lm = case.landmarks.as_ref().unwrap();
        let mut sum = 0.0;
        for (l, (q, f)) in lm.moving.iter().zip(lm.fixed.iter()).enumerate() {
            let (mut num, mut den) = ([0.0; 3], 0.0);
            for (s, v) in case.moving.iter().zip(phi.vectors()) {
                let w = (-crate::geometry::dist2(q, s) / 50.0).exp();
                den += w;
                for a in 0..3 {
                    num[a] += w * v[a];
                }
            }
            let e: f64 = (0..3).map(|a| (q[a] + num[a] / den - f[a]).powi(2)).sum::<f64>().sqrt();
            assert!((t.errors[l] - e).abs() < 1e-9);
            sum += e;
        }
        assert!((t.mean - sum / 10.0).abs() < 1e-9);
    }

    fn box_case(rng: &mut ChaCha8Rng) -> RegistrationCase {
        let m = pc((0..200).map(|_| [0, 1, 2].map(|_| rng.random_range(-10.0..10.0))).collect());
        RegistrationCase::new("b", m.clone(), m)
    }

    #[test]
    fn sdlogj_of_rigid_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let case = box_case(&mut rng);
        let s = sdlogj(&case, &DisplacementField::zeros(200), 4.0).unwrap();
        assert_eq!((s.sdlogj, s.folded), (0.0, 0));
        let s = sdlogj(&case, &DisplacementField::constant(200, [3.0, -1.0, 7.5]), 4.0).unwrap();
        assert!(s.sdlogj < 1e-9);
    }

    fn affine_grid(a: [[f64; 3]; 3]) -> VectorGrid {
        let mut g = VectorGrid {
            origin: [-3.0, 1.0, 2.0],
            spacing: 2.0,
            dims: [5, 4, 6],
            values: Vec::new(),
        };
        g.values = g
            .centers()
            .iter()
            .map(|p| [0, 1, 2].map(|r| a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + 0.3 * r as f64))
            .collect();
        g
    }

    #[test]
    fn affine_grid_has_closed_form_jacobian() {
        let s = grid_sdlogj(&affine_grid([[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]])).unwrap();
        assert!(s.sdlogj < 1e-12);
        assert_eq!(s.voxels, 3 * 2 * 4);
        let a = [[0.2, 0.05, -0.1], [0.0, -0.3, 0.1], [0.07, 0.0, 0.4]];
        // cofactor expansion of I + A written out by hand
        let (p, q, r) = ([1.2, 0.05, -0.1], [0.0, 0.7, 0.1], [0.07, 0.0, 1.4]);
        let expected = p[0] * (q[1] * r[2] - q[2] * r[1]) - p[1] * (q[0] * r[2] - q[2] * r[0]) + p[2] * (q[0] * r[1] - q[1] * r[0]);
        for d in jacobian_determinants(&affine_grid(a)).unwrap() {
            assert!((d - expected).abs() < 1e-6 * expected.abs());
        }
        assert!(grid_sdlogj(&affine_grid(a)).unwrap().sdlogj < 1e-9);
    }

    #[test]
    fn folding_is_counted() {
        let s = grid_sdlogj(&affine_grid([[-2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(s.folded, s.voxels);
        assert_eq!(s.folding_fraction(), 1.0);
    }

    #[test]
    fn tiny_grid_is_rejected() {
        let mut g = affine_grid([[0.0; 3]; 3]);
        g.dims = [2, 4, 6];
        assert!(matches!(grid_sdlogj(&g), Err(Error::GridTooSmall { .. })));
    }

    fn report(id: &str, errors: Vec<f64>) -> CaseReport {
        let (m, a, b) = stats(&errors);
        CaseReport {
            id: id.into(),
            tre_mean_mm: m,
            tre_p25_mm: a,
            tre_p75_mm: b,
            sdlogj: 0.1,
            folding_fraction: 0.0,
            landmark_errors_mm: errors,
        }
    }

    #[test]
    fn summary_statistics() {
        let r = summarize(vec![report("a", vec![5.0])]).unwrap();
        assert_eq!((r.tre_mean_mm, r.tre_p25_mm, r.tre_p75_mm), (5.0, 5.0, 5.0));
        let r = summarize(vec![report("a", vec![4.0, 1.0]), report("b", vec![3.0, 2.0])]).unwrap();
        assert_eq!((r.tre_p25_mm, r.tre_p75_mm, r.tre_mean_mm), (1.75, 3.25, 2.5));
        // duplicating a case leaves the mean and smoothness aggregates unchanged;
        // pooled linear percentiles of a doubled sample generally move
        let one = summarize(vec![report("a", vec![1.0, 7.0, 2.0])]).unwrap();
        let two = summarize(vec![report("a", vec![1.0, 7.0, 2.0]), report("a", vec![1.0, 7.0, 2.0])]).unwrap();
        assert_eq!((one.tre_mean_mm, one.sdlogj, one.folding_fraction), (two.tre_mean_mm, two.sdlogj, two.folding_fraction));
        let one = summarize(vec![report("a", vec![5.0])]).unwrap();
        let two = summarize(vec![report("a", vec![5.0]), report("a", vec![5.0])]).unwrap();
        assert_eq!((one.tre_p25_mm, one.tre_p75_mm), (two.tre_p25_mm, two.tre_p75_mm));
        assert!(summarize(Vec::new()).is_err());
    }

    #[test]
    fn report_json_keys() {
        let r = summarize(vec![report("a", vec![1.0])]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["tre_mean_mm", "tre_p25_mm", "tre_p75_mm", "sdlogj", "folding_fraction", "per_case"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
