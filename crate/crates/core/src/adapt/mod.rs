//! Mean Teacher adaptation: supervised source loss, EMA teacher,
//! Chamfer-filtered consistency and teacher-synthesized training pairs.

mod train;

pub use train::{
    run_adaptation, run_pretraining, train_step, PreparedCase, StepRecord, TrainState, METRICS_HEADER,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, DisplacementField, GaussianWeights, NeighborIndex, PointCloud, Vec3};
use crate::model::{AdamConfig, Matrix, ModelParameters, NodeId, Plan, Prediction};
use crate::synth::{DeformationKind, RegistrationCase, SourceTriplet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    /// Weight of the supervised source loss.
    pub lambda_sup: f64,
    /// Weight of the (filtered) consistency loss.
    pub lambda_con: f64,
    /// Weight of the loss on teacher-synthesized pairs.
    pub lambda_syn: f64,
    /// Weight of Chamfer distance used directly as a loss on target pairs.
    pub lambda_chamfer: f64,
    /// Gate the consistency loss with the Chamfer indicator. Off gives the
    /// standard Mean Teacher.
    pub filter: bool,
    /// EMA momentum of the teacher.
    pub alpha: f64,
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Size of the clouds fed to the model during adaptation.
    pub n_points: usize,
    /// Minimum size of the high-resolution moving pool.
    pub n_points_highres: usize,
    /// Kernel width for moving the teacher field onto the pool (mm).
    pub interp_sigma: f64,
    pub coarse_loss_weight: f64,
    pub fine_loss_weight: f64,
    /// Draw a fresh moving subset from the pool for every target case each
    /// adaptation epoch.
    pub resample_moving: bool,
    /// Source-domain deformation applied to target fixed clouds.
    pub source_deformation: DeformationKind,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            lambda_sup: 10.0,
            lambda_con: 10.0,
            lambda_syn: 10.0,
            lambda_chamfer: 0.0,
            filter: true,
            alpha: 0.996,
            lr: 1e-3,
            pretrain_epochs: 160,
            adapt_epochs: 140,
            batch_source: 4,
            batch_target: 4,
            n_points: 2048,
            n_points_highres: 4096,
            interp_sigma: 5.0,
            coarse_loss_weight: 1.0,
            fine_loss_weight: 1.0,
            resample_moving: true,
            source_deformation: DeformationKind::rigid_default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda_sup", self.lambda_sup),
            ("lambda_con", self.lambda_con),
            ("lambda_syn", self.lambda_syn),
            ("lambda_chamfer", self.lambda_chamfer),
            ("coarse_loss_weight", self.coarse_loss_weight),
            ("fine_loss_weight", self.fine_loss_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0".into());
        }
        if !(self.interp_sigma > 0.0 && self.interp_sigma.is_finite()) {
            return bad("interp_sigma must be > 0".into());
        }
        if self.batch_source == 0 || self.batch_target == 0 || self.n_points == 0 {
            return bad("batch sizes and n_points must be >= 1".into());
        }
        if self.n_points_highres < 2 * self.n_points {
            return bad(format!(
                "n_points_highres ({}) must be at least 2 * n_points ({})",
                self.n_points_highres,
                2 * self.n_points
            ));
        }
        self.source_deformation.validate()
    }

    /// The same config with the target terms switched off.
    pub fn pretraining(&self) -> Self {
        Self {
            lambda_con: 0.0,
            lambda_syn: 0.0,
            lambda_chamfer: 0.0,
            ..self.clone()
        }
    }

    fn uses_targets(&self) -> bool {
        self.lambda_con > 0.0 || self.lambda_syn > 0.0 || self.lambda_chamfer > 0.0
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch { what, expected, got });
    }
    Ok(())
}

/// Mean over points of the squared error vector norm.
pub fn supervised_loss(phi_hat: &DisplacementField, gt: &DisplacementField) -> Result<f64> {
    check_len("prediction vs ground truth", phi_hat.len(), gt.len())?;
    Ok(mean_squared(phi_hat.vectors(), gt.vectors()))
}

fn mean_squared(a: &[Vec3], b: &[Vec3]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
        .sum();
    s / a.len() as f64
}

/// Value and output cotangent of `weight * mean |a - b|²`.
fn mse_seed(node: NodeId, a: &[Vec3], b: &[Vec3], weight: f64) -> (f64, (NodeId, Matrix)) {
    let n = a.len() as f64;
    let mut g = Matrix::zeros(a.len(), 3);
    for (i, (p, q)) in a.iter().zip(b).enumerate() {
        for k in 0..3 {
            g.data[i * 3 + k] = weight * 2.0 * (p[k] - q[k]) / n;
        }
    }
    (weight * mean_squared(a, b), (node, g))
}

/// A loss value together with cotangents for the prediction's output nodes.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub seeds: Vec<(NodeId, Matrix)>,
}

impl LossGrad {
    fn zero() -> Self {
        Self {
            value: 0.0,
            seeds: Vec::new(),
        }
    }
}

/// Scale-weighted mean squared error of a prediction against a target field on
/// the full moving cloud; the coarse level is compared on its own subsample.
pub fn multiscale_loss(pred: &Prediction, plan: &Plan, target: &DisplacementField, cfg: &AdaptationConfig) -> Result<LossGrad> {
    check_len("target field vs prediction", pred.phi.len(), target.len())?;
    let t = target.vectors();
    let mut out = LossGrad::zero();
    let (v, s) = mse_seed(pred.phi_node, pred.phi.vectors(), t, cfg.fine_loss_weight);
    out.value += v;
    out.seeds.push(s);
    if let (Some(coarse), Some(node), Some(idx)) = (&pred.coarse, pred.coarse_node, plan.coarse_indices()) {
        let tc: Vec<Vec3> = idx.iter().map(|&i| t[i]).collect();
        let (v, s) = mse_seed(node, coarse.vectors(), &tc, cfg.coarse_loss_weight);
        out.value += v;
        out.seeds.push(s);
    }
    Ok(out)
}

/// EMA of the teacher towards the student: `alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &ModelParameters, student: &ModelParameters, alpha: f64) -> Result<ModelParameters> {
    check_len("teacher vs student parameters", teacher.len(), student.len())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let values = teacher
        .values()
        .iter()
        .zip(student.values())
        .map(|(&t, &s)| alpha * t + (1.0 - alpha) * s)
        .collect();
    ModelParameters::new(values)
}

/// 1 iff the teacher's warp is strictly closer (Chamfer) to the fixed cloud
/// than the student's.
pub fn filter_indicator(case: &RegistrationCase, phi_student: &DisplacementField, phi_teacher: &DisplacementField) -> Result<u8> {
    let fixed_index = NeighborIndex::build(&case.fixed);
    filter_indicator_with(case, &fixed_index, phi_student, phi_teacher)
}

fn filter_indicator_with(
    case: &RegistrationCase,
    fixed_index: &NeighborIndex,
    phi_student: &DisplacementField,
    phi_teacher: &DisplacementField,
) -> Result<u8> {
    check_len("student field vs moving", case.moving.len(), phi_student.len())?;
    check_len("teacher field vs moving", case.moving.len(), phi_teacher.len())?;
    let ws = case.moving.warp(phi_student)?;
    let wt = case.moving.warp(phi_teacher)?;
    let ds = crate::geometry::chamfer_with_indices(&ws, &NeighborIndex::build(&ws), &case.fixed, fixed_index);
    let dt = crate::geometry::chamfer_with_indices(&wt, &NeighborIndex::build(&wt), &case.fixed, fixed_index);
    Ok(u8::from(dt < ds))
}

/// Indicator-gated mean squared student-teacher difference and the indicator.
pub fn consistency_loss(case: &RegistrationCase, phi_student: &DisplacementField, phi_teacher: &DisplacementField) -> Result<(f64, u8)> {
    let ind = filter_indicator(case, phi_student, phi_teacher)?;
    if ind == 0 {
        return Ok((0.0, 0));
    }
    Ok((mean_squared(phi_student.vectors(), phi_teacher.vectors()), 1))
}

/// Gradient-carrying consistency term against a fixed teacher prediction,
/// scale by scale. `indicator = 0` yields an exact zero with no cotangents.
pub fn consistency_grad(student: &Prediction, teacher: &Prediction, indicator: u8, cfg: &AdaptationConfig) -> Result<LossGrad> {
    if indicator == 0 {
        return Ok(LossGrad::zero());
    }
    check_len("teacher field vs student", student.phi.len(), teacher.phi.len())?;
    let mut out = LossGrad::zero();
    let (v, s) = mse_seed(student.phi_node, student.phi.vectors(), teacher.phi.vectors(), cfg.fine_loss_weight);
    out.value += v;
    out.seeds.push(s);
    if let (Some(sc), Some(tc), Some(node)) = (&student.coarse, &teacher.coarse, student.coarse_node) {
        check_len("teacher coarse field vs student", sc.len(), tc.len())?;
        let (v, s) = mse_seed(node, sc.vectors(), tc.vectors(), cfg.coarse_loss_weight);
        out.value += v;
        out.seeds.push(s);
    }
    Ok(out)
}

/// Per-point mean Chamfer distance of the warped moving cloud to the fixed
/// cloud, with its gradient in the fine prediction.
pub fn chamfer_grad(pred: &Prediction, moving: &PointCloud, fixed: &PointCloud, fixed_index: &NeighborIndex) -> Result<LossGrad> {
    let warped = moving.warp(&pred.phi)?;
    let wi = NeighborIndex::build(&warped);
    let n = moving.len() as f64;
    let w = warped.points();
    let f = fixed.points();
    let mut g = Matrix::zeros(w.len(), 3);
    let mut value = 0.0;
    for (i, p) in w.iter().enumerate() {
        let nb = fixed_index.nearest(p);
        value += nb.dist2;
        for k in 0..3 {
            g.data[i * 3 + k] += 2.0 * (p[k] - f[nb.index][k]);
        }
    }
    for q in f {
        let nb = wi.nearest(q);
        value += nb.dist2;
        for k in 0..3 {
            g.data[nb.index * 3 + k] += 2.0 * (w[nb.index][k] - q[k]);
        }
    }
    for v in &mut g.data {
        *v /= n;
    }
    Ok(LossGrad {
        value: value / n,
        seeds: vec![(pred.phi_node, g)],
    })
}

/// A training pair built from the teacher's own prediction: the teacher field
/// is interpolated onto the high-resolution pool, the moving cloud is pool
/// subset `A`, the fixed cloud is the warped disjoint subset `B`, and the
/// label is the interpolated field on `A`.
pub fn synthesize_pair(
    case: &RegistrationCase,
    phi_teacher: &DisplacementField,
    cfg: &AdaptationConfig,
    rng: &mut impl Rng,
) -> Result<SourceTriplet> {
    Ok(synthesize_pair_indexed(case, phi_teacher, cfg, rng)?.0)
}

/// `synthesize_pair` plus the subsets `A` and `B` and the pool field.
pub fn synthesize_pair_indexed(
    case: &RegistrationCase,
    phi_teacher: &DisplacementField,
    cfg: &AdaptationConfig,
    rng: &mut impl Rng,
) -> Result<(SourceTriplet, Vec<usize>, Vec<usize>, DisplacementField)> {
    let pool = case.moving_highres.as_ref().ok_or(Error::Missing("high-resolution moving cloud"))?;
    let n = cfg.n_points;
    if pool.len() < 2 * n {
        return Err(Error::PoolTooSmall {
            needed: 2 * n,
            have: pool.len(),
        });
    }
    check_len("teacher field vs moving", case.moving.len(), phi_teacher.len())?;
    let weights = GaussianWeights::new(case.moving.points(), pool.points(), cfg.interp_sigma)?;
    let field = weights.apply(phi_teacher.vectors());
    let picks = rand::seq::index::sample(rng, pool.len(), 2 * n).into_vec();
    let (a, b) = picks.split_at(n);
    let p = pool.points();
    let moving: Vec<Vec3> = a.iter().map(|&i| p[i]).collect();
    let gt: Vec<Vec3> = a.iter().map(|&i| field[i]).collect();
    let fixed: Vec<Vec3> = b
        .iter()
        .map(|&i| [p[i][0] + field[i][0], p[i][1] + field[i][1], p[i][2] + field[i][2]])
        .collect();
    let triplet = SourceTriplet::new(PointCloud::new(moving)?, PointCloud::new(fixed)?, DisplacementField::new(gt)?)?;
    Ok((triplet, a.to_vec(), b.to_vec(), DisplacementField::new(field)?))
}

/// Chamfer distance between the warped moving cloud and the fixed cloud.
pub fn warped_chamfer(case: &RegistrationCase, phi: &DisplacementField) -> Result<f64> {
    Ok(chamfer_distance(&case.moving.warp(phi)?, &case.fixed))
}
