use serde::{Deserialize, Serialize};

use super::model::{Features, Mlp};
use crate::config::UnlearnConfig;
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Retain,
    Forget,
}

/// One training item. Retain items must carry a label; forget items may
/// carry one for measuring accuracy, but the loss ignores it.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Features,
    pub y: Option<usize>,
    pub flag: Flag,
}

impl Example {
    pub fn retain(x: Features, y: usize) -> Self {
        Example { x, y: Some(y), flag: Flag::Retain }
    }

    pub fn forget(x: Features, y: Option<usize>) -> Self {
        Example { x, y, flag: Flag::Forget }
    }
}

/// The student being trained and the frozen, randomly initialized
/// reference it is pulled toward on forget items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub student: Mlp,
    pub reference: Mlp,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ce_part: f64,
    pub kl_part: f64,
    /// Forget items whose target was replaced by the uniform distribution.
    pub fallbacks: usize,
}

pub fn temperature_softmax(z: &[f64], t: f64) -> Result<Vec<f64>> {
    if t.is_nan() || t <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| ((v - max) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Natural-log entropy. Zero-probability components contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a.ln() - b.ln())).sum()
}

/// Replaces a low-entropy reference distribution by the uniform one. The
/// comparison is strict: entropy exactly at the threshold is kept.
pub fn maybe_entropy_fallback(p_ref: &[f64], cfg: &UnlearnConfig) -> Vec<f64> {
    if falls_back(p_ref, cfg) {
        vec![1.0 / p_ref.len() as f64; p_ref.len()]
    } else {
        p_ref.to_vec()
    }
}

fn falls_back(p_ref: &[f64], cfg: &UnlearnConfig) -> bool {
    cfg.entropy_fallback && entropy(p_ref) < cfg.h_min_for(p_ref.len())
}

/// Target distribution for a forget item and whether the fallback fired.
pub fn forget_target(reference: &Mlp, x: &Features, cfg: &UnlearnConfig) -> Result<(Vec<f64>, bool)> {
    let p_ref = temperature_softmax(&reference.logits(x), cfg.temperature)?;
    let fell_back = falls_back(&p_ref, cfg);
    Ok((maybe_entropy_fallback(&p_ref, cfg), fell_back))
}

/// Mean retain cross-entropy plus `lambda_f * T^2` times mean forget KL to
/// the reference at temperature `T`.
pub fn loss_weight(batch: &[Example], state: &ModelState, cfg: &UnlearnConfig) -> Result<LossReport> {
    evaluate(batch, state, cfg, None)
}

/// Loss and its gradient with respect to the student parameters.
pub fn loss_and_grad(batch: &[Example], state: &ModelState, cfg: &UnlearnConfig) -> Result<(LossReport, Vec<f64>)> {
    let mut grad = vec![0.0; state.student.len()];
    let report = evaluate(batch, state, cfg, Some(&mut grad))?;
    Ok((report, grad))
}

fn evaluate(
    batch: &[Example],
    state: &ModelState,
    cfg: &UnlearnConfig,
    mut grad: Option<&mut Vec<f64>>,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let t = cfg.temperature;
    let n_r = batch.iter().filter(|e| e.flag == Flag::Retain).count();
    let n_f = batch.len() - n_r;
    let kl_scale = cfg.kl_multiplier();
    let mut report = LossReport::default();
    let model = &state.student;
    for item in batch {
        let (z, acts) = model.forward(&item.x);
        let dz = match item.flag {
            Flag::Retain => {
                let y = item.y.ok_or_else(|| Error::Config("retain item without a label".into()))?;
                if y >= z.len() {
                    return Err(Error::Config(format!("label {y} outside {} classes", z.len())));
                }
                let p = temperature_softmax(&z, 1.0)?;
                report.ce_part -= p[y].ln() / n_r as f64;
                let mut dz = p;
                dz[y] -= 1.0;
                dz.iter_mut().for_each(|g| *g /= n_r as f64);
                dz
            }
            Flag::Forget => {
                let (q, fell_back) = forget_target(&state.reference, &item.x, cfg)?;
                report.fallbacks += usize::from(fell_back);
                let p = temperature_softmax(&z, t)?;
                let kl = kl_divergence(&p, &q);
                report.kl_part += kl / n_f as f64;
                let w = kl_scale / (t * n_f as f64);
                p.iter().zip(&q).map(|(&pk, &qk)| w * pk * ((pk.ln() - qk.ln()) - kl)).collect()
            }
        };
        if let Some(g) = grad.as_deref_mut() {
            model.backward(&item.x, &acts, &dz, g);
        }
    }
    report.total = report.ce_part + kl_scale * report.kl_part;
    if !report.total.is_finite() {
        return Err(Error::NonFinite { step: 0 });
    }
    Ok(report)
}

/// One plain gradient-descent step. On a non-finite loss or gradient the
/// state is left untouched.
pub fn grad_step(batch: &[Example], state: &mut ModelState, cfg: &UnlearnConfig) -> Result<LossReport> {
    let (report, grad) = loss_and_grad(batch, state, cfg)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { step: 0 });
    }
    for (p, g) in state.student.params.iter_mut().zip(&grad) {
        *p -= cfg.lr * g;
    }
    Ok(report)
}
