use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{entropy, grad_step, temperature_softmax, Example, LossReport, ModelState};
use super::model::{Features, Mlp};
use crate::config::UnlearnConfig;
use crate::error::{Error, Result};

/// Argmax class and the `T = 1` distribution.
pub fn predict(model: &Mlp, x: &Features) -> (usize, Vec<f64>) {
    let p = temperature_softmax(&model.logits(x), 1.0).expect("unit temperature");
    let best = p
        .iter()
        .enumerate()
        .fold(0, |best, (k, &v)| if v > p[best] { k } else { best });
    (best, p)
}

/// Fraction of labeled items predicted correctly; 0 when none are labeled.
pub fn accuracy(model: &Mlp, items: &[Example]) -> f64 {
    let labeled: Vec<(usize, &Features)> = items.iter().filter_map(|e| e.y.map(|y| (y, &e.x))).collect();
    if labeled.is_empty() {
        return 0.0;
    }
    let hits = labeled.iter().filter(|(y, x)| predict(model, x).0 == *y).count();
    hits as f64 / labeled.len() as f64
}

/// Mean `T = 1` predictive entropy.
pub fn mean_entropy(model: &Mlp, items: &[Example]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().map(|e| entropy(&predict(model, &e.x).1)).sum::<f64>() / items.len() as f64
}

/// Per-item cross-entropy at `T = 1`, the loss a membership attacker sees.
pub fn item_losses(model: &Mlp, items: &[Example]) -> Vec<f64> {
    items
        .iter()
        .filter_map(|e| e.y.map(|y| -predict(model, &e.x).1[y].max(f64::MIN_POSITIVE).ln()))
        .collect()
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub forget_acc: f64,
    pub retain_acc: f64,
    pub forget_entropy: f64,
    /// Mean over the epoch's steps; zero for the pre-training snapshot.
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Metrics before the first step (epoch 0) followed by one row per epoch.
    pub epochs: Vec<EpochMetrics>,
    pub steps: usize,
    pub fallbacks: usize,
}

impl TrainReport {
    pub fn start(&self) -> &EpochMetrics {
        &self.epochs[0]
    }

    pub fn end(&self) -> &EpochMetrics {
        self.epochs.last().expect("start row always present")
    }
}

fn snapshot(state: &ModelState, retain: &[Example], forget: &[Example], epoch: usize, loss: LossReport) -> EpochMetrics {
    EpochMetrics {
        epoch,
        forget_acc: accuracy(&state.student, forget),
        retain_acc: accuracy(&state.student, retain),
        forget_entropy: mean_entropy(&state.student, forget),
        loss,
    }
}

/// Mixed-batch unlearning. Each epoch shuffles the retain set into batches
/// of `batch_size`; every batch is topped up with
/// `round(forget_ratio * len)` forget items taken cyclically from a
/// shuffled forget order. On a non-finite step the state keeps its last
/// finite parameters and the step index is reported in the error.
pub fn train_unlearn(
    state: &mut ModelState,
    retain: &[Example],
    forget: &[Example],
    cfg: &UnlearnConfig,
) -> Result<TrainReport> {
    if retain.is_empty() {
        return Err(Error::Empty("retain set"));
    }
    cfg.validate(state.student.classes)?;
    let retain: Vec<Example> = retain.iter().cloned().map(|e| Example { flag: super::Flag::Retain, ..e }).collect();
    let forget: Vec<Example> = forget.iter().cloned().map(|e| Example { flag: super::Flag::Forget, ..e }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport { epochs: vec![snapshot(state, &retain, &forget, 0, LossReport::default())], steps: 0, fallbacks: 0 };
    let mut r_order: Vec<usize> = (0..retain.len()).collect();
    let mut f_order: Vec<usize> = (0..forget.len()).collect();
    f_order.shuffle(&mut rng);
    let mut f_cursor = 0;

    for epoch in 1..=cfg.epochs {
        r_order.shuffle(&mut rng);
        let mut sum = LossReport::default();
        let mut n_steps = 0;
        for chunk in r_order.chunks(cfg.batch_size) {
            let mut batch: Vec<Example> = chunk.iter().map(|&i| retain[i].clone()).collect();
            let n_f = if forget.is_empty() { 0 } else { (cfg.forget_ratio * chunk.len() as f64).round() as usize };
            for _ in 0..n_f {
                if f_cursor == f_order.len() {
                    f_order.shuffle(&mut rng);
                    f_cursor = 0;
                }
                batch.push(forget[f_order[f_cursor]].clone());
                f_cursor += 1;
            }
            let step = report.steps;
            let r = grad_step(&batch, state, cfg).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite { step },
                other => other,
            })?;
            report.steps += 1;
            report.fallbacks += r.fallbacks;
            sum.total += r.total;
            sum.ce_part += r.ce_part;
            sum.kl_part += r.kl_part;
            sum.fallbacks += r.fallbacks;
            n_steps += 1;
        }
        let n = n_steps as f64;
        let mean = LossReport { total: sum.total / n, ce_part: sum.ce_part / n, kl_part: sum.kl_part / n, fallbacks: sum.fallbacks };
        report.epochs.push(snapshot(state, &retain, &forget, epoch, mean));
    }
    Ok(report)
}

/// Full-batch cross-entropy training, used to give the student something
/// to forget.
pub fn pretrain(model: &mut Mlp, data: &[Example], epochs: usize, lr: f64) -> Result<()> {
    let batch: Vec<Example> = data.iter().filter_map(|e| e.y.map(|y| Example::retain(e.x.clone(), y))).collect();
    if batch.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let cfg = UnlearnConfig { lambda_f: 0.0, lr, ..Default::default() };
    let mut state = ModelState { student: std::mem::replace(model, Mlp::zeros(0, 0, 0)), reference: Mlp::zeros(0, 0, 0) };
    let mut result = Ok(());
    for step in 0..epochs {
        if let Err(e) = grad_step(&batch, &mut state, &cfg) {
            result = Err(match e {
                Error::NonFinite { .. } => Error::NonFinite { step },
                other => other,
            });
            break;
        }
    }
    *model = state.student;
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unlearn::model::encode;

    fn toy(n: usize, dim: usize, offset: usize) -> Vec<Example> {
        (0..n).map(|i| Example::retain(encode(&format!("item{} cls{}", i + offset, i % 3), dim), i % 3)).collect()
    }

    #[test]
    fn pretraining_fits_a_separable_task() {
        let mut m = Mlp::gaussian(64, 8, 3, 0.1, 1).unwrap();
        let data = toy(30, 64, 0);
        pretrain(&mut m, &data, 300, 1.0).unwrap();
        assert!(accuracy(&m, &data) > 0.95);
    }

    #[test]
    fn reference_never_moves() {
        let mut student = Mlp::gaussian(64, 8, 3, 0.1, 1).unwrap();
        pretrain(&mut student, &toy(30, 64, 0), 100, 1.0).unwrap();
        let reference = Mlp::gaussian(64, 8, 3, 0.1, 99).unwrap();
        let fp = reference.fingerprint();
        let mut state = ModelState { student, reference };
        let forget: Vec<Example> = toy(10, 64, 100).into_iter().map(|e| Example::forget(e.x, e.y)).collect();
        let cfg = UnlearnConfig { epochs: 5, batch_size: 8, ..Default::default() };
        let report = train_unlearn(&mut state, &toy(30, 64, 0), &forget, &cfg).unwrap();
        assert_eq!(state.reference.fingerprint(), fp);
        assert_eq!(report.epochs.len(), 6);
        assert_eq!(report.steps, 5 * 4);
    }

    #[test]
    fn empty_retain_is_an_error() {
        let m = Mlp::zeros(8, 0, 2);
        let mut state = ModelState { student: m.clone(), reference: m };
        assert!(matches!(train_unlearn(&mut state, &[], &[], &UnlearnConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn divergence_keeps_last_finite_state() {
        let mut student = Mlp::zeros(8, 0, 2);
        student.params[0] = 1e308;
        let mut state = ModelState { reference: student.clone(), student };
        let before = state.clone();
        let retain = [Example::retain(vec![(0, 1.0)], 1)];
        let cfg = UnlearnConfig { lr: 1e308, epochs: 3, ..Default::default() };
        let err = train_unlearn(&mut state, &retain, &[], &cfg);
        assert!(matches!(err, Err(Error::NonFinite { .. })), "{err:?}");
        assert!(state.student.params.iter().all(|p| p.is_finite()));
        assert_eq!(state.reference, before.reference);
    }
}
