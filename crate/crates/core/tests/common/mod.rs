#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use mtreg::adapt::{chamfer_grad, consistency_grad, multiscale_loss, synthesize_pair, AdaptationConfig, LossGrad};
use mtreg::geometry::{NeighborIndex, PointCloud, Vec3};
use mtreg::model::{forward, ModelConfig, ModelParameters, Plan, Prediction};
use mtreg::synth::{DeformationKind, RegistrationCase, SourceTriplet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn cloud(rng: &mut impl Rng, n: usize, half: f64) -> PointCloud {
    PointCloud::new((0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-half..half))).collect()).unwrap()
}

/// Two-scale model small enough for 64-point clouds.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        k: 6,
        width: 8,
        coarse_points: 16,
        coarse_candidates: 8,
        coarse_scale: 5.0,
        fine_radius: 4.0,
        upsample_sigma: 3.0,
        ..ModelConfig::default()
    }
}

pub fn small_adapt(n_points: usize) -> AdaptationConfig {
    AdaptationConfig {
        n_points,
        n_points_highres: 2 * n_points,
        batch_source: 2,
        batch_target: 2,
        pretrain_epochs: 1,
        adapt_epochs: 1,
        source_deformation: DeformationKind::Rigid {
            max_angle_deg: 10.0,
            max_translation: 2.0,
        },
        ..AdaptationConfig::default()
    }
}

/// Initialized parameters with every entry (output layer included) jittered so
/// that no gradient vanishes structurally.
pub fn random_params(cfg: &ModelConfig, rng: &mut impl Rng) -> ModelParameters {
    let mut v = ModelParameters::init(cfg).into_values();
    for x in &mut v {
        *x += rng.random_range(-0.1..0.1);
    }
    ModelParameters::new(v).unwrap()
}

/// A target-domain case: `fixed` is a smooth random warp of an independent
/// sampling of the same box as the moving pool.
pub fn pool_case(rng: &mut impl Rng, n: usize, half: f64) -> RegistrationCase {
    let pool = cloud(rng, 2 * n, half);
    let moving = pool.select(&(0..n).collect::<Vec<_>>()).unwrap();
    let shift: Vec3 = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
    let fixed = cloud(rng, n, half).map(|p| [p[0] + shift[0] + 0.05 * p[1], p[1] + shift[1], p[2] + shift[2]]).unwrap();
    let mut case = RegistrationCase::new("g", fixed, moving);
    case.moving_highres = Some(pool);
    case
}

/// Loss value, its gradient in the parameters, and a hash of every discrete
/// choice the value depends on.
pub struct Eval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub signature: u64,
}

pub fn eval_with(params: &ModelParameters, plan: &Plan, loss: &dyn Fn(&Prediction) -> (LossGrad, u64)) -> Eval {
    let (pred, mut tape) = forward(params, plan).unwrap();
    let (lg, extra) = loss(&pred);
    let mut h = DefaultHasher::new();
    tape.branch_signature().hash(&mut h);
    extra.hash(&mut h);
    let grad = tape.backward(&lg.seeds).unwrap();
    Eval {
        value: lg.value,
        grad,
        signature: h.finish(),
    }
}

pub struct Check {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Check {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
    }
}

/// Central differences with step `h` on random coordinates until `n` of them
/// have a non-zero analytic gradient (zero-gradient draws are kept). Coordinates
/// whose perturbed evaluations change any discrete choice (ReLU pattern,
/// max-pool winner, nearest neighbour) are redrawn, so every comparison
/// is inside a region where the loss is smooth.
pub fn finite_difference(
    params: &ModelParameters,
    n: usize,
    h: f64,
    rng: &mut impl Rng,
    f: &dyn Fn(&ModelParameters) -> Eval,
) -> Vec<Check> {
    let base = f(params);
    let mut out = Vec::new();
    let mut tried = 0;
    let mut live = 0;
    while live < n {
        tried += 1;
        assert!(tried < 50 * n, "could not find {n} smooth coordinates");
        let i = rng.random_range(0..params.len());
        let at = |d: f64| {
            let mut v = params.values().to_vec();
            v[i] += d;
            f(&ModelParameters::new(v).unwrap())
        };
        let (plus, minus) = (at(h), at(-h));
        if plus.signature != base.signature || minus.signature != base.signature {
            continue;
        }
        live += usize::from(base.grad[i] != 0.0);
        out.push(Check {
            index: i,
            analytic: base.grad[i],
            numeric: (plus.value - minus.value) / (2.0 * h),
        });
    }
    out
}

fn nearest_hash(pred: &Prediction, moving: &PointCloud, fixed: &PointCloud) -> u64 {
    let warped = moving.warp(&pred.phi).unwrap();
    let (wi, fi) = (NeighborIndex::build(&warped), NeighborIndex::build(fixed));
    let mut h = DefaultHasher::new();
    for p in warped.iter() {
        fi.nearest(p).index.hash(&mut h);
    }
    for q in fixed.iter() {
        wi.nearest(q).index.hash(&mut h);
    }
    h.finish()
}

#[derive(Debug, Clone, Copy)]
pub enum LossKind {
    Supervised,
    Consistency,
    Synthesized,
    Chamfer,
}

/// Gradient checks for one loss term on 64-point clouds.
pub fn check_loss(kind: LossKind, seed: u64, n_coords: usize) -> Vec<Check> {
    let mut r = rng(seed);
    let model = small_model();
    let cfg = small_adapt(64);
    let params = random_params(&model, &mut r);
    let f: Box<dyn Fn(&ModelParameters) -> Eval> = match kind {
        LossKind::Supervised => {
            let src = cloud(&mut r, 64, 10.0);
            let t = mtreg::synth::make_source_triplet(&src, &mtreg::synth::DeformationSpec::new(cfg.source_deformation.clone(), seed), &mut r).unwrap();
            supervised_eval(t, model, cfg)
        }
        LossKind::Synthesized => {
            let case = pool_case(&mut r, 64, 10.0);
            let teacher = random_params(&model, &mut r);
            let plan = Plan::new(&case.moving, &case.fixed, &model).unwrap();
            let phi_t = forward(&teacher, &plan).unwrap().0.phi;
            let t = synthesize_pair(&case, &phi_t, &cfg, &mut r).unwrap();
            supervised_eval(t, model, cfg)
        }
        LossKind::Consistency => {
            let case = pool_case(&mut r, 64, 10.0);
            let teacher = random_params(&model, &mut r);
            let plan = Plan::new(&case.moving, &case.fixed, &model).unwrap();
            let tpred = forward(&teacher, &plan).unwrap().0;
            Box::new(move |p| eval_with(p, &plan, &|pred| (consistency_grad(pred, &tpred, 1, &cfg).unwrap(), 0)))
        }
        LossKind::Chamfer => {
            let case = pool_case(&mut r, 64, 10.0);
            let plan = Plan::new(&case.moving, &case.fixed, &model).unwrap();
            let fi = NeighborIndex::build(&case.fixed);
            Box::new(move |p| {
                eval_with(p, &plan, &|pred| {
                    (
                        chamfer_grad(pred, &case.moving, &case.fixed, &fi).unwrap(),
                        nearest_hash(pred, &case.moving, &case.fixed),
                    )
                })
            })
        }
    };
    finite_difference(&params, n_coords, 1e-3, &mut r, f.as_ref())
}

fn supervised_eval(t: SourceTriplet, model: ModelConfig, cfg: AdaptationConfig) -> Box<dyn Fn(&ModelParameters) -> Eval> {
    let plan = Plan::new(&t.moving, &t.fixed, &model).unwrap();
    Box::new(move |p| eval_with(p, &plan, &|pred| (multiscale_loss(pred, &plan, &t.gt, &cfg).unwrap(), 0)))
}
