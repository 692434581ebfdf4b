use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{chamfer_grad, consistency_grad, filter_indicator_with, multiscale_loss, synthesize_pair, AdaptationConfig};
use crate::error::{Error, Result};
use crate::geometry::NeighborIndex;
use crate::model::{adam_step, forward, AdamState, Matrix, ModelConfig, ModelParameters, NodeId, Plan};
use crate::synth::{make_source_triplet, DeformationSpec, RegistrationCase, SourceTriplet};

/// Student, EMA teacher and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelConfig,
    pub student: ModelParameters,
    pub teacher: ModelParameters,
    pub adam: AdamState,
    pub step: u64,
    /// Steps dropped because of a non-finite loss or gradient.
    pub skipped: u64,
    pub metrics: Vec<StepRecord>,
}

impl TrainState {
    /// Fresh student from `model.init_seed`, teacher equal to it.
    pub fn new(model: &ModelConfig) -> Result<Self> {
        model.validate()?;
        let student = ModelParameters::init(model);
        Ok(Self {
            model: model.clone(),
            teacher: student.clone(),
            adam: AdamState::new(student.len()),
            student,
            step: 0,
            skipped: 0,
            metrics: Vec::new(),
        })
    }

    pub fn from_parts(model: &ModelConfig, student: ModelParameters, teacher: ModelParameters, adam: AdamState) -> Result<Self> {
        student.check_layout(model)?;
        teacher.check_layout(model)?;
        if adam.m.len() != student.len() || adam.v.len() != student.len() {
            return Err(Error::LengthMismatch {
                what: "optimizer state vs parameters",
                expected: student.len(),
                got: adam.m.len(),
            });
        }
        Ok(Self {
            model: model.clone(),
            student,
            teacher,
            step: adam.step,
            adam,
            skipped: 0,
            metrics: Vec::new(),
        })
    }
}

/// A target case with its forward plan and fixed-cloud index precomputed.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub case: RegistrationCase,
    plan: Plan,
    fixed_index: NeighborIndex,
}

impl PreparedCase {
    pub fn new(case: RegistrationCase, model: &ModelConfig) -> Result<Self> {
        let plan = Plan::new(&case.moving, &case.fixed, model)?;
        let fixed_index = NeighborIndex::build(&case.fixed);
        Ok(Self { case, plan, fixed_index })
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    /// The same case with `moving` redrawn as `n` points of the pool. Labels
    /// tied to the old moving cloud are dropped.
    pub fn resampled(&self, n: usize, model: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let pool = self.case.moving_highres.as_ref().ok_or(Error::Missing("high-resolution moving cloud"))?;
        if pool.len() < n {
            return Err(Error::PoolTooSmall { needed: n, have: pool.len() });
        }
        let idx = rand::seq::index::sample(rng, pool.len(), n).into_vec();
        let mut case = self.case.clone();
        case.moving = pool.select(&idx)?;
        case.gt = None;
        case.landmarks = None;
        Ok(Self {
            plan: Plan::new(&case.moving, &case.fixed, model)?,
            fixed_index: self.fixed_index.clone(),
            case,
        })
    }
}

/// Per-step loss record. Terms are unweighted batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub l_sup: f64,
    pub l_con: f64,
    pub l_syn: f64,
    pub l_chamfer: f64,
    /// Fraction of target cases whose teacher prediction passed the filter.
    pub indicator_rate: Option<f64>,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step,l_sup,l_con,l_syn,indicator_rate,total,l_chamfer";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let rate = self.indicator_rate.map(|r| r.to_string()).unwrap_or_default();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            self.step, self.l_sup, self.l_con, self.l_syn, rate, self.total, self.l_chamfer
        );
        s
    }
}

fn finite(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { term })
    }
}

fn accumulate(into: &mut [f64], g: &[f64]) {
    for (a, b) in into.iter_mut().zip(g) {
        *a += b;
    }
}

fn scaled_seeds(seeds: Vec<(NodeId, Matrix)>, s: f64) -> Vec<(NodeId, Matrix)> {
    seeds
        .into_iter()
        .map(|(id, mut m)| {
            for v in &mut m.data {
                *v *= s;
            }
            (id, m)
        })
        .collect()
}

/// One optimizer step on the joint loss
/// `λ_sup L_sup + λ_con L_con + λ_syn L_syn (+ λ_chamfer L_chamfer)`, each term
/// averaged over its batch, followed by the EMA teacher update.
///
/// The state is only modified on success. With every target weight zero the
/// target batch is not touched.
pub fn train_step(
    state: &mut TrainState,
    source: &[SourceTriplet],
    target: &[PreparedCase],
    cfg: &AdaptationConfig,
    rng: &mut impl Rng,
) -> Result<StepRecord> {
    let mut grad = vec![0.0; state.student.len()];
    let mut l_sup = 0.0;
    for t in source {
        let plan = Plan::new(&t.moving, &t.fixed, &state.model)?;
        let (pred, mut tape) = forward(&state.student, &plan)?;
        let loss = multiscale_loss(&pred, &plan, &t.gt, cfg)?;
        l_sup += finite("supervised", loss.value)? / source.len() as f64;
        let w = cfg.lambda_sup / source.len() as f64;
        if w > 0.0 {
            accumulate(&mut grad, &tape.backward(&scaled_seeds(loss.seeds, w))?);
        }
    }

    let (mut l_con, mut l_syn, mut l_cd) = (0.0, 0.0, 0.0);
    let mut indicator_rate = None;
    if cfg.uses_targets() && !target.is_empty() {
        let nt = target.len() as f64;
        let mut accepted = 0usize;
        for c in target {
            let (tpred, _) = forward(&state.teacher, &c.plan)?;
            let (spred, mut tape) = forward(&state.student, &c.plan)?;
            let ind = if cfg.filter {
                filter_indicator_with(&c.case, &c.fixed_index, &spred.phi, &tpred.phi)?
            } else {
                1
            };
            accepted += ind as usize;
            let mut seeds = Vec::new();
            if cfg.lambda_con > 0.0 {
                let g = consistency_grad(&spred, &tpred, ind, cfg)?;
                l_con += finite("consistency", g.value)? / nt;
                seeds.extend(scaled_seeds(g.seeds, cfg.lambda_con / nt));
            }
            if cfg.lambda_chamfer > 0.0 {
                let g = chamfer_grad(&spred, &c.case.moving, &c.case.fixed, &c.fixed_index)?;
                l_cd += finite("chamfer", g.value)? / nt;
                seeds.extend(scaled_seeds(g.seeds, cfg.lambda_chamfer / nt));
            }
            if !seeds.is_empty() {
                accumulate(&mut grad, &tape.backward(&seeds)?);
            }
            if cfg.lambda_syn > 0.0 {
                let pair = synthesize_pair(&c.case, &tpred.phi, cfg, rng)?;
                let plan = Plan::new(&pair.moving, &pair.fixed, &state.model)?;
                let (pred, mut tape) = forward(&state.student, &plan)?;
                let g = multiscale_loss(&pred, &plan, &pair.gt, cfg)?;
                l_syn += finite("synthesized", g.value)? / nt;
                accumulate(&mut grad, &tape.backward(&scaled_seeds(g.seeds, cfg.lambda_syn / nt))?);
            }
        }
        indicator_rate = Some(accepted as f64 / nt);
    }

    let total = finite(
        "total",
        cfg.lambda_sup * l_sup + cfg.lambda_con * l_con + cfg.lambda_syn * l_syn + cfg.lambda_chamfer * l_cd,
    )?;
    let mut student = state.student.clone();
    let mut adam = state.adam.clone();
    adam_step(&mut student, &grad, &mut adam, cfg.lr, &cfg.adam)?;
    let teacher = super::ema_update(&state.teacher, &student, cfg.alpha)?;

    state.student = student;
    state.teacher = teacher;
    state.adam = adam;
    state.step += 1;
    let record = StepRecord {
        step: state.step,
        l_sup,
        l_con,
        l_syn,
        l_chamfer: l_cd,
        indicator_rate,
        total,
    };
    state.metrics.push(record);
    Ok(record)
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. })
}

/// `train_step` that drops a numerically failed step instead of failing the run.
fn tolerant_step(
    state: &mut TrainState,
    source: &[SourceTriplet],
    target: &[PreparedCase],
    cfg: &AdaptationConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    match train_step(state, source, target, cfg, rng) {
        Ok(_) => Ok(()),
        Err(e) if is_numeric_failure(&e) => {
            state.skipped += 1;
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn source_triplet(case: &RegistrationCase, cfg: &AdaptationConfig, rng: &mut impl Rng) -> Result<SourceTriplet> {
    let cloud = if case.fixed.len() > cfg.n_points {
        let idx = rand::seq::index::sample(rng, case.fixed.len(), cfg.n_points).into_vec();
        case.fixed.select(&idx)?
    } else {
        case.fixed.clone()
    };
    make_source_triplet(&cloud, &DeformationSpec::new(cfg.source_deformation.clone(), cfg.seed), rng)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Called after every epoch with the 1-based epoch number.
pub type EpochHook<'a> = dyn FnMut(usize, &TrainState) -> Result<()> + 'a;

/// Supervised training on source pairs synthesized from the fixed clouds of
/// `dataset` with `cfg.source_deformation`. Returns the student with the
/// teacher set equal to it.
pub fn run_pretraining(
    dataset: &[RegistrationCase],
    model: &ModelConfig,
    cfg: &AdaptationConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainState> {
    cfg.validate()?;
    let mut state = TrainState::new(model)?;
    if cfg.pretrain_epochs == 0 {
        return Ok(state);
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs at least one case".into()));
    }
    let step_cfg = cfg.pretraining();
    let mut rng = stream(cfg.seed, 1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_source) {
            let batch = chunk
                .iter()
                .map(|&i| source_triplet(&dataset[i], cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            tolerant_step(&mut state, &batch, &[], &step_cfg, &mut rng)?;
        }
        on_epoch(epoch, &state)?;
    }
    state.teacher = state.student.clone();
    Ok(state)
}

/// Joint training on mixed batches: each step takes `batch_target` target
/// cases (one pass over `dataset` per epoch) and `batch_source` source pairs
/// drawn from random cases.
pub fn run_adaptation(
    dataset: &[RegistrationCase],
    mut state: TrainState,
    cfg: &AdaptationConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.adapt_epochs == 0 {
        return Ok(state);
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("adaptation needs at least one case".into()));
    }
    let model = state.model.clone();
    let base = dataset
        .iter()
        .map(|c| PreparedCase::new(c.clone(), &model))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stream(cfg.seed, 2);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=cfg.adapt_epochs {
        let prepared = if cfg.resample_moving {
            base.iter()
                .map(|p| match p.case.moving_highres {
                    Some(_) => p.resampled(cfg.n_points.min(p.case.moving.len()), &model, &mut rng),
                    None => Ok(p.clone()),
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            base.clone()
        };
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_target) {
            let target: Vec<PreparedCase> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let source = (0..cfg.batch_source)
                .map(|_| source_triplet(&dataset[rng.random_range(0..dataset.len())], cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            tolerant_step(&mut state, &source, &target, cfg, &mut rng)?;
        }
        on_epoch(epoch, &state)?;
    }
    Ok(state)
}
