use super::*;
use crate::binding::{diagonal_target, target_for_permutation};
use crate::datagen::{generate_walker, simulate_pendulum, DisturbanceSpec, PendulumParams, WalkerParams};
use crate::gestaltvae::{gestalt_frame, TrainConfig};
use crate::popcode::{Coding, LatticeKind, PopcodeConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn pendulum() -> &'static (FeatureSequence<f64>, GestaltModel<f64>) {
    static CELL: OnceLock<(FeatureSequence<f64>, GestaltModel<f64>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let seq = simulate_pendulum(&PendulumParams {
            frames: 200,
            splice: 10,
            ..Default::default()
        })
        .unwrap();
        let config = TrainConfig {
            popcode: PopcodeConfig::planar(),
            hidden: 12,
            latent: 4,
            lr: [1e-2, 1e-2, 1e-3],
            epochs: 3,
            ..Default::default()
        };
        let model = GestaltModel::train(&config, &seq).unwrap();
        (seq, model)
    })
}

fn walker(coding: Coding) -> (FeatureSequence<f64>, GestaltModel<f64>) {
    let seq = generate_walker(&WalkerParams {
        frames: 60,
        ..WalkerParams::default()
    })
    .unwrap();
    let config = TrainConfig {
        popcode: PopcodeConfig {
            coding,
            posture_count: 27,
            direction_count: 12,
            ..Default::default()
        },
        hidden: 10,
        latent: 4,
        epochs: 1,
        ..Default::default()
    };
    let model = GestaltModel::train(&config, &seq).unwrap();
    (seq, model)
}

fn frame(seq: &FeatureSequence<f64>, t: usize) -> (Tensor<f64>, Tensor<f64>) {
    let x = seq.frame(t).clone();
    let v = seq.velocities()[t].clone().unwrap();
    (x, v)
}

fn random_pose(rng: &mut impl Rng, dim: usize) -> Pose<f64> {
    let n = if dim == 2 { 1 } else { 3 };
    Pose::new(
        (0..n).map(|_| rng.random_range(-0.6..0.6)).collect(),
        (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect(),
    )
    .unwrap()
}

fn random_bias(rng: &mut impl Rng, n: usize, m: usize) -> Tensor<f64> {
    Tensor::from_fn(n, m, |_, _| rng.random_range(-3.0..3.0))
}

fn target(n: usize, dim: usize) -> InferenceTarget {
    InferenceTarget::new(diagonal_target(n), dim, &DisturbanceSpec::default(), 1.0).unwrap()
}

#[test]
fn pipeline_matches_the_eager_path() {
    let (seq, model) = pendulum();
    let betas = [1.0, 8.0, 2.0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for loss in [ReconLoss::SquaredError, ReconLoss::Bce] {
        let mut p = LossPipeline::new(model, 2, loss, Reduction::Sum, betas).unwrap();
        for t in [3, 50, 120] {
            let (x, v) = frame(seq, t);
            let pose = random_pose(&mut rng, 2);
            let bias = random_bias(&mut rng, 2, 2);
            let got = p.evaluate(&bias, &pose, &x, &v).unwrap();
            let g = gestalt_frame(&model.encoder, &bias.map(crate::diffcore::sigmoid), &x, &v, &pose).unwrap();
            let want = model.losses(&g, loss, &betas).unwrap();
            for k in 0..3 {
                assert!((got.parts[k] - want[k]).abs() < 1e-9 * (1.0 + want[k]), "{loss:?} {k}");
            }
            assert!((got.total - want[3]).abs() < 1e-9 * (1.0 + want[3]));
        }
    }
}

fn central_difference(
    p: &mut LossPipeline<f64>,
    bias: &Tensor<f64>,
    pose: &Pose<f64>,
    x: &Tensor<f64>,
    v: &Tensor<f64>,
) -> BiasGradients<f64> {
    let h = 1e-5;
    let mut f = |b: &Tensor<f64>, pose: &Pose<f64>| p.evaluate(b, pose, x, v).unwrap().total;
    let mut binding = Tensor::zeros(bias.rows(), bias.cols());
    for i in 0..bias.len() {
        let mut up = bias.clone();
        up.data_mut()[i] += h;
        let mut dn = bias.clone();
        dn.data_mut()[i] -= h;
        binding.data_mut()[i] = (f(&up, pose) - f(&dn, pose)) / (2.0 * h);
    }
    let shifted = |a: &[f64], b: &[f64]| Pose::new(a.to_vec(), b.to_vec()).unwrap();
    let mut angles = vec![0.0; pose.angles().len()];
    for (i, g) in angles.iter_mut().enumerate() {
        let (mut up, mut dn) = (pose.angles().to_vec(), pose.angles().to_vec());
        up[i] += h;
        dn[i] -= h;
        *g = (f(bias, &shifted(&up, pose.translation())) - f(bias, &shifted(&dn, pose.translation()))) / (2.0 * h);
    }
    let mut translation = vec![0.0; pose.dim()];
    for (i, g) in translation.iter_mut().enumerate() {
        let (mut up, mut dn) = (pose.translation().to_vec(), pose.translation().to_vec());
        up[i] += h;
        dn[i] -= h;
        *g = (f(bias, &shifted(pose.angles(), &up)) - f(bias, &shifted(pose.angles(), &dn))) / (2.0 * h);
    }
    BiasGradients {
        binding,
        angles,
        translation,
    }
}

fn assert_close(analytic: &[f64], numeric: &[f64], scale: f64) {
    for (a, n) in analytic.iter().zip(numeric) {
        let err = (a - n).abs() / n.abs().max(a.abs()).max(1e-3 * scale).max(1e-8);
        assert!(err < 1e-4, "analytic {a} vs numeric {n}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let (seq, model) = pendulum();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = LossPipeline::new(model, 2, ReconLoss::SquaredError, Reduction::Sum, [1.0, 8.0, 2.0]).unwrap();
    for _ in 0..10 {
        let t = rng.random_range(1..seq.len());
        let (x, v) = frame(seq, t);
        let pose = random_pose(&mut rng, 2);
        let bias = random_bias(&mut rng, 2, 2);
        let (_, g) = p.gradients(&bias, &pose, &x, &v, LossRoot::Total).unwrap();
        let fd = central_difference(&mut p, &bias, &pose, &x, &v);
        let scale = g.binding.max_abs().max(1e-12);
        assert_close(g.binding.data(), fd.binding.data(), scale);
        assert_close(&g.angles, &fd.angles, scale);
        assert_close(&g.translation, &fd.translation, scale);
    }
}

#[test]
fn walker_gradients_match_finite_differences_and_respect_invariances() {
    let (seq, model) = walker(Coding::Population);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut p = LossPipeline::new(&model, 15, ReconLoss::SquaredError, Reduction::Sum, [8.0, 3.0, 0.125]).unwrap();
    for _ in 0..2 {
        let (x, v) = frame(&seq, rng.random_range(1..seq.len()));
        let pose = random_pose(&mut rng, 3);
        let bias = random_bias(&mut rng, 15, 15);
        let (_, g) = p.gradients(&bias, &pose, &x, &v, LossRoot::Total).unwrap();
        let fd = central_difference(&mut p, &bias, &pose, &x, &v);
        let scale = g.binding.max_abs();
        assert_close(g.binding.data(), fd.binding.data(), scale);
        assert_close(&g.angles, &fd.angles, scale);
        assert_close(&g.translation, &fd.translation, scale);

        let (_, gd) = p
            .gradients(&bias, &pose, &x, &v, LossRoot::Part(LatticeKind::Direction))
            .unwrap();
        let (_, gm) = p
            .gradients(&bias, &pose, &x, &v, LossRoot::Part(LatticeKind::Magnitude))
            .unwrap();
        assert!(gd.translation.iter().all(|&g| g == 0.0));
        assert!(gm.translation.iter().all(|&g| g == 0.0));
        assert!(gm.angles.iter().all(|&g| g == 0.0));
        assert!(gd.angles.iter().any(|&g| g != 0.0));
    }
}

#[test]
fn every_bias_receives_a_gradient() {
    for coding in [Coding::Population, Coding::Raw] {
        let (seq, model) = walker(coding);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = LossPipeline::new(&model, 15, ReconLoss::SquaredError, Reduction::Sum, [1.0; 3]).unwrap();
        let (x, v) = frame(&seq, 7);
        let (_, g) = p
            .gradients(
                &random_bias(&mut rng, 15, 15),
                &random_pose(&mut rng, 3),
                &x,
                &v,
                LossRoot::Total,
            )
            .unwrap();
        assert!(g.binding.data().iter().all(|&v| v != 0.0), "{coding:?}");
        assert!(g.angles.iter().chain(&g.translation).all(|&v| v != 0.0), "{coding:?}");
    }
}

#[test]
fn disabled_groups_are_bit_identical() {
    let (seq, model) = pendulum();
    let bias = Tensor::new(2, 2, vec![0.3, -1.0, 2.0, -0.5]).unwrap();
    let pose = Pose::new(vec![0.2], vec![0.05, -0.1]).unwrap();
    let config = InferenceConfig {
        steps: 40,
        ..Default::default()
    };
    let run = InferenceRun::new(
        model,
        BindingState::from_bias(bias.clone(), false),
        pose.clone(),
        config,
        target(2, 2),
    )
    .unwrap();
    let out = run.run(seq).unwrap();
    assert_eq!(out.binding.bias(), &bias);
    assert_eq!(out.pose, pose);
    assert_eq!(out.log.rows.len(), 40);

    let config = InferenceConfig {
        steps: 40,
        groups: Groups::BINDING,
        ..Default::default()
    };
    let run = InferenceRun::new(
        model,
        BindingState::from_bias(bias.clone(), false),
        pose.clone(),
        config,
        target(2, 2),
    )
    .unwrap();
    let out = run.run(seq).unwrap();
    assert_ne!(out.binding.bias(), &bias);
    assert_eq!(out.pose, pose);

    let config = InferenceConfig {
        steps: 40,
        groups: Groups {
            translation: true,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = InferenceRun::new(
        model,
        BindingState::from_bias(bias.clone(), false),
        pose.clone(),
        config,
        target(2, 2),
    )
    .unwrap();
    let out = run.run(seq).unwrap();
    assert_eq!(out.binding.bias(), &bias);
    assert_eq!(out.pose.angles(), pose.angles());
    assert_ne!(out.pose.translation(), pose.translation());
}

#[test]
fn tiny_plain_gradient_step_descends() {
    let (seq, model) = pendulum();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..10 {
        let config = InferenceConfig {
            groups: Groups::ALL,
            eta_binding: 1e-6,
            eta_rotation: 1e-6,
            eta_translation: 1e-6,
            gamma_binding: 0.0,
            gamma_rotation: 0.0,
            gamma_translation: 0.0,
            ..Default::default()
        };
        let state = BindingState::from_bias(random_bias(&mut rng, 2, 2), false);
        let mut run = InferenceRun::new(model, state, random_pose(&mut rng, 2), config, target(2, 2)).unwrap();
        let (x, v) = frame(seq, rng.random_range(1..seq.len()));
        let before = run.evaluate(&x, &v).unwrap().total;
        run.step(0, &x, &v).unwrap();
        let after = run.evaluate(&x, &v).unwrap().total;
        assert!(after <= before, "{after} > {before}");
    }
}

#[test]
fn log_shape_and_metric_ranges() {
    let (seq, model) = pendulum();
    let config = InferenceConfig {
        steps: 250,
        betas: [1.0, 8.0, 2.0],
        eta_binding: 0.1,
        ..Default::default()
    };
    let out = infer_binding(model, seq, &config, target(2, 2)).unwrap();
    assert_eq!(out.log.rows.len(), 250);
    // 250 steps wrap the 200-frame cycle
    assert_eq!(out.log.rows[198].frame, 199);
    assert_eq!(out.log.rows[199].frame, 0);
    assert_eq!(out.log.rows[200].frame, 1);
    for r in &out.log.rows {
        assert!(r.fbe >= 0.0 && r.td >= 0.0 && (0.0..=180.0).contains(&r.od));
        assert!(r.loss.is_finite() && r.loss >= 0.0);
    }
    assert_eq!(out.log.at(0), Some(out.log.initial));
    assert_eq!(out.log.at(250), Some(out.log.last()));
    let mut buf = Vec::new();
    out.log.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 252);
}

#[test]
fn runs_are_deterministic() {
    let (seq, model) = pendulum();
    let config = InferenceConfig {
        steps: 60,
        ..Default::default()
    };
    let spec = DisturbanceSpec {
        rotation_deg: [0.0, 0.0, 20.0],
        translation: vec![0.1, -0.2],
    };
    let seq = crate::datagen::apply_disturbance(seq, &spec).unwrap();
    let t = InferenceTarget::new(diagonal_target(2), 2, &spec, 1.0).unwrap();
    let a = infer_joint(model, &seq, &config, t.clone(), None).unwrap();
    let b = infer_joint(model, &seq, &config, t, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn joint_with_frozen_binding_reduces_to_perspective() {
    let (seq, model) = pendulum();
    let spec = DisturbanceSpec {
        rotation_deg: [0.0, 0.0, 15.0],
        translation: vec![0.1, 0.05],
    };
    let seq = crate::datagen::apply_disturbance(seq, &spec).unwrap();
    let t = InferenceTarget::new(diagonal_target(2), 2, &spec, 1.0).unwrap();
    let config = InferenceConfig {
        steps: 50,
        ..Default::default()
    };
    let frozen = init_binding(BindingMode::Training, 2, 2, 0.0).unwrap();
    let joint = infer_joint(model, &seq, &config, t.clone(), Some(frozen.clone())).unwrap();
    let persp = infer_perspective(model, &seq, &config, t).unwrap();
    assert_eq!(joint.log, persp.log);
    assert_eq!(joint.pose, persp.pose);
    assert_eq!(joint.binding, frozen);
}

#[test]
fn rejects_mismatched_inputs() {
    let (seq, model) = pendulum();
    let state = init_binding::<f64>(BindingMode::Inference, 2, 3, -5.0).unwrap();
    assert!(InferenceRun::new(
        model,
        state,
        Pose::identity(2).unwrap(),
        InferenceConfig::default(),
        target(2, 2)
    )
    .is_err());
    let bad = InferenceConfig {
        eta_binding: f64::NAN,
        ..Default::default()
    };
    assert!(infer_binding(model, seq, &bad, target(2, 2)).is_err());
    let (walk, _) = walker(Coding::Raw);
    assert!(infer_binding(model, &walk, &InferenceConfig::default(), target(15, 3)).is_err());
}

#[test]
fn non_finite_loss_halts_with_context() {
    let (seq, model) = pendulum();
    let mut run = InferenceRun::new(
        model,
        init_binding(BindingMode::Inference, 2, 2, -5.0).unwrap(),
        Pose::identity(2).unwrap(),
        InferenceConfig::default(),
        target(2, 2),
    )
    .unwrap();
    let (mut x, v) = frame(seq, 1);
    x.set(1, 0, f64::NAN);
    let before = run.binding().clone();
    let err = run.step(1, &x, &v).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    assert!(err.to_string().contains("step 0"));
    assert_eq!(run.binding(), &before);
    assert!(run.log().rows.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn permuting_features_relabels_the_binding_run(perm_seed in 0u64..1000, steps in 5usize..30) {
        let (seq, model) = pendulum();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        let perm: Vec<usize> = if rng.random_bool(0.5) { vec![1, 0] } else { vec![0, 1] };
        let shuffled = seq.permute_features(&perm).unwrap();
        let config = InferenceConfig { steps, betas: [1.0, 8.0, 2.0], eta_binding: 0.1, ..Default::default() };
        let a = infer_binding(model, seq, &config, target(2, 2)).unwrap();
        let tgt = InferenceTarget::new(target_for_permutation(&perm), 2, &DisturbanceSpec::default(), 1.0).unwrap();
        let b = infer_binding(model, &shuffled, &config, tgt).unwrap();
        for (ra, rb) in a.log.rows.iter().zip(&b.log.rows) {
            prop_assert!((ra.fbe - rb.fbe).abs() < 1e-9 * (1.0 + ra.fbe));
            prop_assert!((ra.loss - rb.loss).abs() < 1e-9 * (1.0 + ra.loss));
        }
        for i in 0..2 {
            for j in 0..2 {
                let x = a.binding.bias().get(perm[i], j);
                let y = b.binding.bias().get(i, j);
                prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn frozen_groups_stay_frozen_over_random_runs(seed in 0u64..10_000, mask in 0u8..8) {
        let (seq, model) = pendulum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = Groups { binding: mask & 1 != 0, rotation: mask & 2 != 0, translation: mask & 4 != 0 };
        let bias = random_bias(&mut rng, 2, 2);
        let pose = random_pose(&mut rng, 2);
        let config = InferenceConfig { steps: 15, groups, ..Default::default() };
        let out = InferenceRun::new(model, BindingState::from_bias(bias.clone(), false), pose.clone(), config, target(2, 2))
            .unwrap()
            .run(seq)
            .unwrap();
        prop_assert_eq!(out.binding.bias() == &bias, !groups.binding);
        prop_assert_eq!(out.pose.angles() == pose.angles(), !groups.rotation);
        prop_assert_eq!(out.pose.translation() == pose.translation(), !groups.translation);
    }
}
