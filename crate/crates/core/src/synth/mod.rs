//! Source-domain data synthesis and dataset preparation: correspondence
//! preserving deformations, keypoint extraction and mean/std pre-alignment.

mod keypoints;
pub mod toy;

pub use keypoints::{extract_keypoint_indices, extract_keypoints};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, PointCloud, Vec3};

/// A `def` function family: either a random rigid motion or a sum of two
/// trilinearly interpolated random control grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeformationKind {
    Rigid {
        /// Euler angles are drawn uniformly from `[-max_angle_deg, max_angle_deg]`.
        max_angle_deg: f64,
        /// Per-axis translation drawn uniformly from `[-max_translation, max_translation]`.
        max_translation: f64,
    },
    TwoScaleRandomField {
        coarse_spacing: f64,
        fine_spacing: f64,
        coarse_amplitude: f64,
        fine_amplitude: f64,
    },
}

impl DeformationKind {
    pub fn rigid_default() -> Self {
        DeformationKind::Rigid {
            max_angle_deg: 15.0,
            max_translation: 20.0,
        }
    }

    pub fn two_scale_default() -> Self {
        DeformationKind::TwoScaleRandomField {
            coarse_spacing: 60.0,
            fine_spacing: 20.0,
            coarse_amplitude: 15.0,
            fine_amplitude: 5.0,
        }
    }

    pub fn identity() -> Self {
        DeformationKind::Rigid {
            max_angle_deg: 0.0,
            max_translation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match *self {
            DeformationKind::Rigid {
                max_angle_deg,
                max_translation,
            } => {
                if !(0.0..=180.0).contains(&max_angle_deg) {
                    return bad("rotation range must lie in [0, 180] degrees");
                }
                if !(max_translation >= 0.0 && max_translation.is_finite()) {
                    return bad("translation range must be >= 0");
                }
            }
            DeformationKind::TwoScaleRandomField {
                coarse_spacing,
                fine_spacing,
                coarse_amplitude,
                fine_amplitude,
            } => {
                if !(coarse_spacing > 0.0 && fine_spacing > 0.0) {
                    return bad("control grid spacings must be > 0");
                }
                if !(coarse_amplitude >= 0.0 && fine_amplitude >= 0.0) {
                    return bad("field amplitudes must be >= 0");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationSpec {
    #[serde(flatten)]
    pub kind: DeformationKind,
    #[serde(default)]
    pub seed: u64,
}

impl DeformationSpec {
    pub fn new(kind: DeformationKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    /// A fresh RNG stream seeded from `seed`.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Rotation (row-major) followed by a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl RigidTransform {
    /// `R = Rz * Ry * Rx` for angles in degrees.
    pub fn from_euler_deg(angles: Vec3, translation: Vec3) -> Self {
        let [ax, ay, az] = angles.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        Self {
            rotation: matmul(&rz, &matmul(&ry, &rx)),
            translation,
        }
    }

    pub fn sample(max_angle_deg: f64, max_translation: f64, rng: &mut impl Rng) -> Self {
        let mut uniform = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let angles = [uniform(max_angle_deg), uniform(max_angle_deg), uniform(max_angle_deg)];
        let translation = [uniform(max_translation), uniform(max_translation), uniform(max_translation)];
        Self::from_euler_deg(angles, translation)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = &self.rotation;
        let mut out = self.translation;
        for (row, o) in r.iter().zip(out.iter_mut()) {
            *o += row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
        }
        out
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Random vectors on a regular control grid, evaluated trilinearly.
#[derive(Debug, Clone)]
struct ControlGrid {
    origin: Vec3,
    spacing: f64,
    dims: [usize; 3],
    values: Vec<Vec3>,
}

impl ControlGrid {
    fn sample(lo: Vec3, hi: Vec3, spacing: f64, amplitude: f64, rng: &mut impl Rng) -> Self {
        // one node of margin beyond the bounds on every side
        let origin = lo.map(|c| c - spacing);
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = ((hi[a] - lo[a]) / spacing).ceil() as usize + 3;
        }
        let n = dims[0] * dims[1] * dims[2];
        let values = (0..n)
            .map(|_| {
                let mut v = [0.0; 3];
                for c in &mut v {
                    *c = amplitude * rng.random_range(-1.0..=1.0);
                }
                v
            })
            .collect();
        Self {
            origin,
            spacing,
            dims,
            values,
        }
    }

    fn eval(&self, p: &Vec3) -> Vec3 {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let g = ((p[a] - self.origin[a]) / self.spacing).max(0.0);
            let i = (g.floor() as usize).min(self.dims[a] - 2);
            base[a] = i;
            frac[a] = (g - i as f64).clamp(0.0, 1.0);
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            let (i, j, k) = (base[0] + off[0], base[1] + off[1], base[2] + off[2]);
            let v = &self.values[i + self.dims[0] * (j + self.dims[1] * k)];
            for a in 0..3 {
                out[a] += w * v[a];
            }
        }
        out
    }
}

/// A sampled two-scale random displacement field over a bounding box.
#[derive(Debug, Clone)]
pub struct RandomField {
    grids: Vec<ControlGrid>,
}

impl RandomField {
    pub fn sample(lo: Vec3, hi: Vec3, kind: &DeformationKind, rng: &mut impl Rng) -> Result<Self> {
        kind.validate()?;
        match *kind {
            DeformationKind::TwoScaleRandomField {
                coarse_spacing,
                fine_spacing,
                coarse_amplitude,
                fine_amplitude,
            } => Ok(Self {
                grids: vec![
                    ControlGrid::sample(lo, hi, coarse_spacing, coarse_amplitude, rng),
                    ControlGrid::sample(lo, hi, fine_spacing, fine_amplitude, rng),
                ],
            }),
            DeformationKind::Rigid { .. } => Err(Error::InvalidArgument(
                "random field requires a two_scale_random_field spec".into(),
            )),
        }
    }

    /// Displacement at `p`.
    pub fn displacement(&self, p: &Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for g in &self.grids {
            let v = g.eval(p);
            for a in 0..3 {
                out[a] += v[a];
            }
        }
        out
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let d = self.displacement(p);
        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
    }
}

/// A sampled instance of a deformation family.
#[derive(Debug, Clone)]
pub enum Deformation {
    Rigid(RigidTransform),
    Field(RandomField),
}

impl Deformation {
    /// Sample a deformation whose random-field grids cover `lo..hi`.
    pub fn sample(kind: &DeformationKind, lo: Vec3, hi: Vec3, rng: &mut impl Rng) -> Result<Self> {
        kind.validate()?;
        Ok(match *kind {
            DeformationKind::Rigid {
                max_angle_deg,
                max_translation,
            } => Deformation::Rigid(RigidTransform::sample(max_angle_deg, max_translation, rng)),
            DeformationKind::TwoScaleRandomField { .. } => {
                Deformation::Field(RandomField::sample(lo, hi, kind, rng)?)
            }
        })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        match self {
            Deformation::Rigid(t) => t.apply(p),
            Deformation::Field(f) => f.apply(p),
        }
    }
}

/// Split `c` into `(w, g)` with `w ≈ target` and `w + g == c` exactly in
/// floating point.
fn exact_split(c: f64, target: f64) -> (f64, f64) {
    let mut w = target;
    for _ in 0..64 {
        let g = c - w;
        if w + g == c {
            return (w, g);
        }
        let back = c - g;
        if back + g == c {
            return (back, g);
        }
        // walk one ulp toward c and retry
        w = if w < c { next_up(w) } else { next_down(w) };
    }
    (c, 0.0)
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let b = x.to_bits();
    f64::from_bits(if x > 0.0 { b + 1 } else { b - 1 })
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

/// Deform `cloud` point-wise. Returns the warped cloud (same order) and
/// `gt = cloud - warped`, with `warped + gt == cloud` exact per component.
pub fn apply_deformation(
    cloud: &PointCloud,
    spec: &DeformationSpec,
    rng: &mut impl Rng,
) -> Result<(PointCloud, DisplacementField)> {
    let (lo, hi) = cloud.bounds();
    let def = Deformation::sample(&spec.kind, lo, hi, rng)?;
    deform_with(cloud, &def)
}

pub fn deform_with(cloud: &PointCloud, def: &Deformation) -> Result<(PointCloud, DisplacementField)> {
    let mut warped = Vec::with_capacity(cloud.len());
    let mut gt = Vec::with_capacity(cloud.len());
    for p in cloud.iter() {
        let q = def.apply(p);
        let mut w = [0.0; 3];
        let mut g = [0.0; 3];
        for a in 0..3 {
            (w[a], g[a]) = exact_split(p[a], q[a]);
        }
        warped.push(w);
        gt.push(g);
    }
    Ok((PointCloud::new(warped)?, DisplacementField::new(gt)?))
}

/// `(moving, fixed, gt)` with `moving + gt == fixed` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTriplet {
    pub moving: PointCloud,
    pub fixed: PointCloud,
    pub gt: DisplacementField,
}

impl SourceTriplet {
    pub fn new(moving: PointCloud, fixed: PointCloud, gt: DisplacementField) -> Result<Self> {
        if moving.len() != gt.len() {
            return Err(Error::LengthMismatch {
                what: "triplet gt vs moving",
                expected: moving.len(),
                got: gt.len(),
            });
        }
        Ok(Self { moving, fixed, gt })
    }
}

/// Source sample `(def(C), C, C - def(C))` built from a target-domain cloud.
pub fn make_source_triplet(
    target_cloud: &PointCloud,
    spec: &DeformationSpec,
    rng: &mut impl Rng,
) -> Result<SourceTriplet> {
    let (moving, gt) = apply_deformation(target_cloud, spec, rng)?;
    SourceTriplet::new(moving, target_cloud.clone(), gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks {
    pub moving: PointCloud,
    pub fixed: PointCloud,
}

impl Landmarks {
    pub fn new(moving: PointCloud, fixed: PointCloud) -> Result<Self> {
        if moving.len() != fixed.len() {
            return Err(Error::LengthMismatch {
                what: "landmark pairs",
                expected: moving.len(),
                got: fixed.len(),
            });
        }
        Ok(Self { moving, fixed })
    }

    pub fn len(&self) -> usize {
        self.moving.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moving.is_empty()
    }
}

/// A fixed/moving pair from the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationCase {
    pub id: String,
    pub fixed: PointCloud,
    pub moving: PointCloud,
    /// Denser sampling of the moving anatomy, used to synthesize pairs.
    pub moving_highres: Option<PointCloud>,
    pub gt: Option<DisplacementField>,
    pub landmarks: Option<Landmarks>,
}

impl RegistrationCase {
    pub fn new(id: impl Into<String>, fixed: PointCloud, moving: PointCloud) -> Self {
        Self {
            id: id.into(),
            fixed,
            moving,
            moving_highres: None,
            gt: None,
            landmarks: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(gt) = &self.gt {
            if gt.len() != self.moving.len() {
                return Err(Error::LengthMismatch {
                    what: "case gt vs moving",
                    expected: self.moving.len(),
                    got: gt.len(),
                });
            }
        }
        if let Some(l) = &self.landmarks {
            if l.moving.len() != l.fixed.len() {
                return Err(Error::LengthMismatch {
                    what: "landmark pairs",
                    expected: l.moving.len(),
                    got: l.fixed.len(),
                });
            }
        }
        Ok(())
    }
}

/// Per-axis affine map `p -> (p - shift_from) * scale + shift_to` applied by
/// `pre_align`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAlignment {
    pub moving_mean: Vec3,
    pub fixed_mean: Vec3,
    pub scale: Vec3,
    /// Axes on which the moving cloud had zero spread; scale was forced to 1.
    pub degenerate: [bool; 3],
}

impl AxisAlignment {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = (p[a] - self.moving_mean[a]) * self.scale[a] + self.fixed_mean[a];
        }
        out
    }

    pub fn has_warning(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Per-axis mean/std matching of the moving side (cloud, high-res cloud and
/// landmarks) to the fixed cloud. A stored gt is re-expressed so that it
/// still maps each moving point to the same fixed-space location.
pub fn pre_align(case: &RegistrationCase) -> Result<(RegistrationCase, AxisAlignment)> {
    case.validate()?;
    let mm = case.moving.mean();
    let ms = case.moving.std();
    let fm = case.fixed.mean();
    let fs = case.fixed.std();
    let mut scale = [1.0; 3];
    let mut degenerate = [false; 3];
    for a in 0..3 {
        if ms[a] > 0.0 && fs[a] > 0.0 {
            scale[a] = fs[a] / ms[a];
        } else {
            degenerate[a] = true;
        }
    }
    let map = AxisAlignment {
        moving_mean: mm,
        fixed_mean: fm,
        scale,
        degenerate,
    };
    let moving = case.moving.map(|p| map.apply(p))?;
    let gt = match &case.gt {
        Some(gt) => {
            let targets = case.moving.warp(gt)?;
            Some(DisplacementField::between(&moving, &targets)?)
        }
        None => None,
    };
    let out = RegistrationCase {
        id: case.id.clone(),
        fixed: case.fixed.clone(),
        moving,
        moving_highres: case.moving_highres.as_ref().map(|c| c.map(|p| map.apply(p))).transpose()?,
        gt,
        landmarks: case
            .landmarks
            .as_ref()
            .map(|l| -> Result<Landmarks> {
                Landmarks::new(l.moving.map(|p| map.apply(p))?, l.fixed.clone())
            })
            .transpose()?,
    };
    Ok((out, map))
}
