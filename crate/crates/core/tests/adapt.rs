mod common;

use common::{cloud, pool_case, random_params, rng, small_adapt, small_model};
use mtreg::adapt::{
    consistency_grad, ema_update, filter_indicator, run_adaptation, run_pretraining, supervised_loss, synthesize_pair_indexed,
    train_step, AdaptationConfig, PreparedCase, TrainState,
};
use mtreg::geometry::{gaussian_interpolate, DisplacementField, PointCloud};
use mtreg::model::{forward, ModelParameters, Plan};
use mtreg::synth::{make_source_triplet, DeformationKind, DeformationSpec, RegistrationCase, SourceTriplet};
use mtreg::Error;
use proptest::prelude::*;
use rand::Rng;

fn source_batch(r: &mut impl Rng, n: usize, cfg: &AdaptationConfig) -> Vec<SourceTriplet> {
    (0..n)
        .map(|_| {
            let c = cloud(r, 64, 10.0);
            make_source_triplet(&c, &DeformationSpec::new(cfg.source_deformation.clone(), 0), r).unwrap()
        })
        .collect()
}

fn target_batch(r: &mut impl Rng, n: usize) -> Vec<PreparedCase> {
    (0..n).map(|_| PreparedCase::new(pool_case(r, 64, 10.0), &small_model()).unwrap()).collect()
}

/// A state whose student and teacher differ, as mid-adaptation.
fn split_state(r: &mut impl Rng) -> TrainState {
    let model = small_model();
    let mut s = TrainState::new(&model).unwrap();
    s.student = random_params(&model, r);
    s.teacher = random_params(&model, r);
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ema_is_linear(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let n = 50;
        let t = ModelParameters::new((0..n).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
        let s = ModelParameters::new((0..n).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
        let e = ema_update(&t, &s, alpha).unwrap();
        for i in 0..n {
            let lhs = e.values()[i] - s.values()[i];
            let rhs = alpha * (t.values()[i] - s.values()[i]);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn supervised_loss_is_non_negative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = DisplacementField::new((0..20).map(|_| [r.random_range(-5.0..5.0), 0.0, r.random_range(-5.0..5.0)]).collect()).unwrap();
        let b = DisplacementField::new((0..20).map(|_| [0.0, r.random_range(-5.0..5.0), 0.0]).collect()).unwrap();
        prop_assert!(supervised_loss(&a, &b).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rejected_teacher_contributes_nothing(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = small_model();
        let case = pool_case(&mut r, 64, 10.0);
        let plan = Plan::new(&case.moving, &case.fixed, &model).unwrap();
        let sp = forward(&random_params(&model, &mut r), &plan).unwrap().0;
        let tp = forward(&random_params(&model, &mut r), &plan).unwrap().0;
        let ind = filter_indicator(&case, &sp.phi, &tp.phi).unwrap();
        let g = consistency_grad(&sp, &tp, ind, &small_adapt(64)).unwrap();
        if ind == 0 {
            prop_assert_eq!(g.value, 0.0);
            prop_assert!(g.seeds.is_empty());
        } else {
            prop_assert!(g.value > 0.0);
        }
    }

    #[test]
    fn synthesized_labels_are_exact(seed in any::<u64>()) {
        let mut r = rng(seed);
        let case = pool_case(&mut r, 64, 10.0);
        let phi = DisplacementField::new((0..64).map(|_| [0, 1, 2].map(|_| r.random_range(-3.0..3.0))).collect()).unwrap();
        let cfg = small_adapt(64);
        let (t, a, b, field) = synthesize_pair_indexed(&case, &phi, &cfg, &mut r).unwrap();
        let pool = case.moving_highres.as_ref().unwrap();
        let direct = gaussian_interpolate(&case.moving, &phi, pool, cfg.interp_sigma).unwrap();
        prop_assert_eq!(&field, &direct);
        let mut seen = std::collections::HashSet::new();
        for &i in a.iter().chain(&b) {
            prop_assert!(seen.insert(i));
        }
        for (k, &i) in a.iter().enumerate() {
            prop_assert_eq!(t.gt.vectors()[k].map(f64::to_bits), field.vectors()[i].map(f64::to_bits));
            prop_assert_eq!(t.moving.points()[k], pool.points()[i]);
        }
    }

    #[test]
    fn teacher_is_exact_ema_after_step(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let cfg = AdaptationConfig { alpha, ..small_adapt(64) };
        let mut state = split_state(&mut r);
        let before = state.teacher.clone();
        let (src, tgt) = (source_batch(&mut r, 2, &cfg), target_batch(&mut r, 2));
        train_step(&mut state, &src, &tgt, &cfg, &mut r).unwrap();
        prop_assert_eq!(&state.teacher, &ema_update(&before, &state.student, alpha).unwrap());
    }

    #[test]
    fn zero_weights_leave_student_unchanged(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = AdaptationConfig {
            lambda_sup: 0.0,
            lambda_con: 0.0,
            lambda_syn: 0.0,
            lambda_chamfer: 0.0,
            ..small_adapt(64)
        };
        let mut state = split_state(&mut r);
        let before = state.student.clone();
        let (src, tgt) = (source_batch(&mut r, 2, &cfg), target_batch(&mut r, 2));
        let rec = train_step(&mut state, &src, &tgt, &cfg, &mut r).unwrap();
        prop_assert_eq!(rec.total, 0.0);
        for (a, b) in state.student.values().iter().zip(before.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn source_only_weights_ignore_targets() {
    let cfg = AdaptationConfig {
        lambda_con: 0.0,
        lambda_syn: 0.0,
        ..small_adapt(64)
    };
    let mut r = rng(3);
    let src = source_batch(&mut r, 2, &cfg);
    let tgt = target_batch(&mut r, 2);
    let base = split_state(&mut r);
    let (mut a, mut b) = (base.clone(), base);
    let ra = train_step(&mut a, &src, &tgt, &cfg, &mut rng(9)).unwrap();
    let rb = train_step(&mut b, &src, &[], &cfg, &mut rng(9)).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert_eq!(ra.indicator_rate, None);
}

#[test]
fn unit_alpha_freezes_teacher() {
    let cfg = AdaptationConfig {
        alpha: 1.0,
        ..small_adapt(64)
    };
    let mut r = rng(4);
    let mut state = split_state(&mut r);
    let t0 = state.teacher.clone();
    for _ in 0..3 {
        let (src, tgt) = (source_batch(&mut r, 2, &cfg), target_batch(&mut r, 2));
        train_step(&mut state, &src, &tgt, &cfg, &mut r).unwrap();
    }
    assert_eq!(state.teacher.values(), t0.values());
    assert_ne!(state.student.values(), t0.values());
}

#[test]
fn seeded_step_is_bit_reproducible() {
    let run = || {
        let cfg = small_adapt(64);
        let mut r = rng(5);
        let mut state = split_state(&mut r);
        let (src, tgt) = (source_batch(&mut r, 2, &cfg), target_batch(&mut r, 2));
        let rec = train_step(&mut state, &src, &tgt, &cfg, &mut r).unwrap();
        (rec, state)
    };
    let ((ra, sa), (rb, sb)) = (run(), run());
    assert_eq!(ra.total.to_bits(), rb.total.to_bits());
    assert_eq!(ra, rb);
    assert_eq!(sa, sb);
}

#[test]
fn non_finite_loss_leaves_state_untouched() {
    let cfg = small_adapt(64);
    let mut r = rng(6);
    let mut src = source_batch(&mut r, 2, &cfg);
    let bad = src[0].clone();
    src[0] = SourceTriplet::new(bad.moving, bad.fixed, DisplacementField::constant(64, [1e200, 0.0, 0.0])).unwrap();
    let mut state = split_state(&mut r);
    let before = state.clone();
    let err = train_step(&mut state, &src, &[], &cfg, &mut r).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    assert_eq!(state, before);
}

fn toy_cases(r: &mut impl Rng, n: usize) -> Vec<RegistrationCase> {
    (0..n).map(|_| pool_case(r, 64, 10.0)).collect()
}

#[test]
fn zero_epochs_return_initial_states() {
    let model = small_model();
    let cfg = AdaptationConfig {
        pretrain_epochs: 0,
        adapt_epochs: 0,
        ..small_adapt(64)
    };
    let cases = toy_cases(&mut rng(7), 2);
    let fresh = TrainState::new(&model).unwrap();
    let pre = run_pretraining(&cases, &model, &cfg, &mut |_, _| Ok(())).unwrap();
    assert_eq!(pre, fresh);
    let state = split_state(&mut rng(8));
    assert_eq!(run_adaptation(&cases, state.clone(), &cfg, &mut |_, _| Ok(())).unwrap(), state);
}

#[test]
fn identity_source_starts_at_zero_loss() {
    let model = small_model();
    let cfg = AdaptationConfig {
        source_deformation: DeformationKind::identity(),
        ..small_adapt(64)
    };
    let cases = toy_cases(&mut rng(9), 4);
    let state = run_pretraining(&cases, &model, &cfg, &mut |_, _| Ok(())).unwrap();
    assert_eq!(state.metrics[0].l_sup, 0.0);
    assert_eq!(state.teacher, state.student);
}

#[test]
fn pretraining_reduces_loss_on_a_fixed_pair() {
    let model = small_model();
    let mut decreasing = 0;
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let cfg = AdaptationConfig {
            lr: 1e-3,
            seed,
            ..small_adapt(64)
        };
        let src = source_batch(&mut r, 1, &cfg);
        let plan = Plan::new(&src[0].moving, &src[0].fixed, &model).unwrap();
        let loss = |p: &ModelParameters| supervised_loss(&forward(p, &plan).unwrap().0.phi, &src[0].gt).unwrap();
        let mut state = TrainState::new(&{ let mut m = model.clone(); m.init_seed = seed; m }).unwrap();
        let first = loss(&state.student);
        for _ in 0..50 {
            train_step(&mut state, &src, &[], &cfg.pretraining(), &mut r).unwrap();
        }
        if loss(&state.student) <= first {
            decreasing += 1;
        }
    }
    assert!(decreasing >= 9, "{decreasing}/10");
}

#[test]
fn adaptation_logs_bounded_indicator_rates() {
    let cfg = AdaptationConfig {
        adapt_epochs: 2,
        ..small_adapt(64)
    };
    let cases = toy_cases(&mut rng(10), 4);
    let mut rates = Vec::new();
    let mut epochs = Vec::new();
    let state = split_state(&mut rng(11));
    let out = run_adaptation(&cases, state, &cfg, &mut |e, s| {
        epochs.push(e);
        rates.extend(s.metrics.iter().filter_map(|m| m.indicator_rate));
        Ok(())
    })
    .unwrap();
    assert_eq!(epochs, vec![1, 2]);
    assert_eq!(out.metrics.len(), 4);
    assert!(!rates.is_empty() && rates.iter().all(|r| (0.0..=1.0).contains(r)));
}

#[test]
fn pool_checks() {
    let mut r = rng(12);
    let mut case = pool_case(&mut r, 64, 10.0);
    case.moving_highres = Some(PointCloud::new(case.moving.points().to_vec()).unwrap());
    let cfg = small_adapt(64);
    assert!(matches!(
        synthesize_pair_indexed(&case, &DisplacementField::zeros(64), &cfg, &mut r),
        Err(Error::PoolTooSmall { needed: 128, have: 64 })
    ));
}
