use driftctl_core::config::{ClPolicy, LossKind};
use driftctl_core::learner::{
    ewc_penalty, loss_and_grad, si_penalty, softmax, train, Checkpoint, ContinualState, EwcAnchor, Example, Layout,
    Model, ParameterVector, Scenario, SiState,
};
use driftctl_core::synthetic::{axis_pair, sample_classes};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

struct Instance {
    model: Model,
    batch: Vec<Example>,
    ewc: EwcAnchor,
    si: SiState,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let layout = Layout::new(rng.random_range(1..=5), rng.random_range(0..=4), rng.random_range(2..=4));
    let n = layout.param_count();
    let mut v = || -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let model = Model { params: ParameterVector::from_values(layout, v()).unwrap() };
    let theta_star = v();
    let fisher: Vec<f64> = v().into_iter().map(f64::abs).collect();
    let si_star = v();
    let omega: Vec<f64> = v().into_iter().map(f64::abs).collect();
    let batch = (0..rng.random_range(1..=8))
        .map(|_| Example {
            features: (0..layout.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: rng.random_range(0..layout.num_classes as u32),
        })
        .collect();
    Instance {
        model,
        batch,
        ewc: EwcAnchor { theta_star, fisher_diag: fisher, lambda: rng.random_range(0.0..10.0) },
        si: SiState { omega_running: vec![0.0; n], omega, theta_star: si_star, xi: 0.1, c: rng.random_range(0.0..2.0) },
    }
}

fn total_loss(inst: &Instance, theta: &[f64]) -> f64 {
    let model = Model { params: ParameterVector::from_values(inst.model.layout(), theta.to_vec()).unwrap() };
    loss_and_grad(&model, &inst.batch, Some(&inst.ewc), Some(&inst.si)).unwrap().0
}

#[test]
fn gradient_matches_central_differences() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let inst = random_instance(&mut rng);
        let (_, grad) = loss_and_grad(&inst.model, &inst.batch, Some(&inst.ewc), Some(&inst.si)).unwrap();
        let theta = inst.model.params.values.clone();
        let numeric: Vec<f64> = (0..theta.len())
            .map(|i| {
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[i] += eps;
                down[i] -= eps;
                (total_loss(&inst, &up) - total_loss(&inst, &down)) / (2.0 * eps)
            })
            .collect();
        // relative error of the whole gradient vector
        let diff: f64 = grad.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|b| b * b).sum::<f64>().sqrt());
        let rel = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(rel);
        assert!(rel < 1e-5, "case {case}: relative error {rel:e}");
    }
    assert!(started.elapsed().as_secs_f64() < 10.0);
    eprintln!("worst relative gradient error {worst:e}");
}

#[test]
fn anchors_at_their_own_optimum_are_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..100 {
        let mut inst = random_instance(&mut rng);
        let theta = inst.model.params.values.clone();
        inst.ewc.theta_star = theta.clone();
        inst.si.theta_star = theta.clone();
        assert_eq!(ewc_penalty(&theta, &inst.ewc).unwrap(), 0.0);
        assert_eq!(si_penalty(&theta, &inst.si).unwrap(), 0.0);
        let (l0, g0) = loss_and_grad(&inst.model, &inst.batch, None, None).unwrap();
        let (l1, g1) = loss_and_grad(&inst.model, &inst.batch, Some(&inst.ewc), Some(&inst.si)).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
    }
}

proptest! {
    #[test]
    fn forward_is_a_probability_simplex(seed in 0u64..10_000, scale in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng);
        let mut model = inst.model.clone();
        model.params.values.iter_mut().for_each(|v| *v *= scale);
        for ex in &inst.batch {
            let p = model.forward(&ex.features).unwrap();
            prop_assert_eq!(p.len(), model.num_classes());
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_handles_extreme_logits(logits in prop::collection::vec(-1e300f64..1e300, 1..8)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn class_expansion_keeps_old_logits(seed in 0u64..10_000, extra in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng);
        let wider = inst.model.expand_classes(inst.model.num_classes() + extra);
        for ex in &inst.batch {
            let before = inst.model.logits(&ex.features).unwrap();
            let after = wider.logits(&ex.features).unwrap();
            prop_assert_eq!(&after[..before.len()], &before[..]);
            prop_assert!(after[before.len()..].iter().all(|&z| z == 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng);
        let cp = inst.model.checkpoint();
        let back = Checkpoint::from_bytes(&cp.to_bytes()).unwrap();
        prop_assert_eq!(back.digest(), cp.digest());
        prop_assert_eq!(back.into_model(), inst.model);
    }
}

fn displacement(lambda: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let a = sample_classes(&axis_pair(4, 0, 2.0, 1.0, [0, 1]), 100, &mut rng);
    let b = sample_classes(&axis_pair(4, 1, 2.0, 1.0, [0, 1]), 100, &mut rng);
    let policy = ClPolicy { loss: LossKind::Ewc, lambda, learning_rate: 0.01, ..ClPolicy::default() };
    let none: &[Example] = &[];
    let first = train(&Model::zeros(Layout::new(4, 0, 2)), &a, none, Scenario::Offline, &policy, &ContinualState::default(), 1).unwrap();
    let second = train(&first.model, &b, none, Scenario::Ni, &policy, &first.state, 2).unwrap();
    first.model.params.values.iter().zip(&second.model.params.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn stronger_anchor_moves_parameters_less() {
    let (strong, weak) = (displacement(1000.0), displacement(1.0));
    assert!(strong <= weak, "λ=1000 moved {strong}, λ=1 moved {weak}");
}
