use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbu_core::config::UnlearnConfig;
use sbu_core::unlearn::{loss_and_grad, loss_weight, Example, Features, Mlp, ModelState};

fn random_features(rng: &mut ChaCha8Rng, dim: usize) -> Features {
    let n = rng.gen_range(1..=4.min(dim));
    let mut idx: Vec<usize> = (0..dim).collect();
    for i in 0..n {
        let j = rng.gen_range(i..dim);
        idx.swap(i, j);
    }
    idx[..n].iter().map(|&i| (i, rng.gen_range(-1.0..1.0))).collect()
}

fn instance(seed: u64) -> (Vec<Example>, ModelState, UnlearnConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(3..12);
    let hidden = if seed % 3 == 0 { 0 } else { rng.gen_range(1..6) };
    let classes = rng.gen_range(2..5);
    let student = Mlp::gaussian(dim, hidden, classes, rng.gen_range(0.2..1.5), rng.gen()).unwrap();
    let reference = Mlp::gaussian(dim, hidden, classes, rng.gen_range(0.05..2.0), rng.gen()).unwrap();
    let mut batch = Vec::new();
    for _ in 0..rng.gen_range(0..5) {
        batch.push(Example::retain(random_features(&mut rng, dim), rng.gen_range(0..classes)));
    }
    for _ in 0..rng.gen_range(0..5) {
        batch.push(Example::forget(random_features(&mut rng, dim), None));
    }
    if batch.is_empty() {
        batch.push(Example::forget(random_features(&mut rng, dim), None));
    }
    let cfg = UnlearnConfig {
        lambda_f: rng.gen_range(0.1..3.0),
        temperature: rng.gen_range(0.5..4.0),
        entropy_fallback: rng.gen_bool(0.5),
        h_min: Some(rng.gen_range(0.05..0.6)),
        ..Default::default()
    };
    (batch, ModelState { student, reference }, cfg)
}

fn fd_check(batch: &[Example], state: &ModelState, cfg: &UnlearnConfig) -> Result<(), String> {
    let (_, grad) = loss_and_grad(batch, state, cfg).unwrap();
    let h = 1e-5;
    for i in 0..state.student.len() {
        let mut plus = state.clone();
        plus.student.params[i] += h;
        let mut minus = state.clone();
        minus.student.params[i] -= h;
        let fd = (loss_weight(batch, &plus, cfg).unwrap().total - loss_weight(batch, &minus, cfg).unwrap().total) / (2.0 * h);
        let err = (fd - grad[i]).abs();
        if err > 1e-4 * fd.abs().max(grad[i].abs()) && err > 1e-8 {
            return Err(format!("param {i}: analytic {} vs numeric {fd}", grad[i]));
        }
    }
    Ok(())
}

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..150 {
        let (batch, state, cfg) = instance(seed);
        if let Err(e) = fd_check(&batch, &state, &cfg) {
            panic!("instance {seed}: {e}");
        }
    }
}

#[test]
fn loss_decomposes_exactly() {
    for seed in 0..200 {
        let (batch, state, cfg) = instance(seed);
        let r = loss_weight(&batch, &state, &cfg).unwrap();
        assert!((r.total - (r.ce_part + cfg.lambda_f * cfg.temperature * cfg.temperature * r.kl_part)).abs() < 1e-12);
        assert!(r.kl_part >= 0.0 && r.ce_part >= 0.0);
    }
}

#[test]
fn student_equal_to_reference_has_zero_kl() {
    for seed in 0..50 {
        let (batch, mut state, mut cfg) = instance(seed);
        cfg.entropy_fallback = false;
        state.student = state.reference.clone();
        assert_eq!(loss_weight(&batch, &state, &cfg).unwrap().kl_part, 0.0);
    }
}
