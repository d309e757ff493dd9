//! Three independent gradients of the combined objective: reverse-mode on
//! the recorded loss, the closed form assembled from per-token log-prob
//! gradients, and central finite differences.

use serde::{Deserialize, Serialize};

use super::VerifyReport;
use crate::autodiff::{sigmoid, AutodiffError, Tape, Var};
use crate::datagen::{generate_corpus, CorpusSpec, PreferenceTriple};
use crate::error::Result;
use crate::losses::{derive_seed, prepare_triple, triple_loss, triple_loss_and_grad, LossConfig, PreparedTriple};
use crate::microlm::{ModelConfig, ModelParams, Trainable, Weights};
use crate::sequence::TokenId;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the element-wise relative error. Central differences
/// at `FD_STEP` resolve gradients only down to about `ε·|L| / h ≈ 1e-11`, and
/// some parameters (key biases) have an exactly zero gradient.
pub const REL_FLOOR: f64 = 1e-6;

/// A model small enough for exhaustive finite differences.
pub fn grad_check_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 24,
        seed,
    }
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, REL_FLOOR)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

fn flatten_grads(tape: &Tape, weights: &Weights<Var>, root: Var) -> Result<Vec<f64>> {
    let g = tape.backward(root)?;
    let mut out = Vec::new();
    for v in weights.iter() {
        out.extend_from_slice(g.get(*v).data());
    }
    Ok(out)
}

/// `log π(y_t | x, y_<t)` and its parameter gradient for every position.
fn token_logprob_gradients(policy: &ModelParams, x: &[TokenId], y: &[TokenId]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let w = policy.record(&mut tape, Trainable::Yes);
    let lp = policy.record_response_logprobs(&mut tape, &w, x, y)?;
    let values = tape.value(lp).data().to_vec();
    let mut grads = Vec::with_capacity(y.len());
    for t in 0..y.len() {
        let one = tape.pick(lp, &[(0, t)])?;
        grads.push(flatten_grads(&tape, &w, one)?);
    }
    Ok((values, grads))
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Closed-form gradient of the mean objective: the weighted DPO term
/// `−β(1−σ(βΔr)) Σ w ∇r` plus, when the hinge is active,
/// `2γ[Σ (d−b)(∇d−∇b) − Σ (c−d)(∇c−∇d)]` over the aligned prefixes.
pub fn closed_form_gradient(
    cfg: &LossConfig,
    policy: &ModelParams,
    reference: &ModelParams,
    batch: &[PreferenceTriple],
    preps: &[PreparedTriple],
) -> Result<Vec<f64>> {
    let n = policy.num_params();
    let mut total = vec![0.0; n];
    let gamma = cfg.effective_gamma();
    for (t, prep) in batch.iter().zip(preps) {
        let (lp_w, g_w) = token_logprob_gradients(policy, &t.x, &t.y_w)?;
        let (lp_l, g_l) = token_logprob_gradients(policy, &t.x, &t.y_l)?;
        let b: Vec<f64> = lp_w.iter().zip(reference.response_logprobs(&t.x, &t.y_w)?).map(|(p, r)| p - r).collect();
        let c: Vec<f64> = lp_l.iter().zip(reference.response_logprobs(&t.x, &t.y_l)?).map(|(p, r)| p - r).collect();
        let delta: f64 = b.iter().zip(&prep.weights_w).map(|(r, w)| r * w).sum::<f64>()
            - c.iter().zip(&prep.weights_l).map(|(r, w)| r * w).sum::<f64>();
        let coef = -cfg.beta * (1.0 - sigmoid(cfg.beta * delta));
        let mut g = vec![0.0; n];
        for (wt, gt) in prep.weights_w.iter().zip(&g_w) {
            axpy(&mut g, coef * wt, gt);
        }
        for (wt, gt) in prep.weights_l.iter().zip(&g_l) {
            axpy(&mut g, -coef * wt, gt);
        }
        if gamma > 0.0 {
            if let Some(anchor) = &prep.anchor {
                let (lp_a, g_a) = token_logprob_gradients(policy, &t.x, anchor)?;
                let d: Vec<f64> = lp_a.iter().zip(reference.response_logprobs(&t.x, anchor)?).map(|(p, r)| p - r).collect();
                let align = d.len().min(b.len());
                let push = d.len().min(c.len());
                let pos: f64 = (0..align).map(|i| (d[i] - b[i]).powi(2)).sum();
                let neg: f64 = (0..push).map(|i| (c[i] - d[i]).powi(2)).sum();
                if pos - neg + cfg.alpha_margin > 0.0 {
                    for i in 0..align {
                        let k = 2.0 * gamma * (d[i] - b[i]);
                        axpy(&mut g, k, &g_a[i]);
                        axpy(&mut g, -k, &g_w[i]);
                    }
                    for i in 0..push {
                        let k = -2.0 * gamma * (c[i] - d[i]);
                        axpy(&mut g, k, &g_l[i]);
                        axpy(&mut g, -k, &g_a[i]);
                    }
                }
            }
        }
        axpy(&mut total, 1.0 / batch.len() as f64, &g);
    }
    Ok(total)
}

fn mean_objective(
    cfg: &LossConfig,
    policy: &ModelParams,
    reference: &ModelParams,
    batch: &[PreferenceTriple],
    preps: &[PreparedTriple],
) -> Result<f64> {
    let mut s = 0.0;
    for (t, p) in batch.iter().zip(preps) {
        s += triple_loss(cfg, policy, reference, t, p)?.l_total;
    }
    Ok(s / batch.len() as f64)
}

/// Central differences with step `h` on every parameter, holding weights and
/// anchors fixed.
pub fn finite_difference_gradient(
    cfg: &LossConfig,
    policy: &ModelParams,
    reference: &ModelParams,
    batch: &[PreferenceTriple],
    preps: &[PreparedTriple],
    h: f64,
) -> Result<Vec<f64>> {
    let base = policy.flat();
    let mut probe = policy.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut theta = base.clone();
    for i in 0..base.len() {
        theta[i] = base[i] + h;
        probe.set_flat(&theta)?;
        let up = mean_objective(cfg, &probe, reference, batch, preps)?;
        theta[i] = base[i] - h;
        probe.set_flat(&theta)?;
        let down = mean_objective(cfg, &probe, reference, batch, preps)?;
        theta[i] = base[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Seeded policy, reference and two-triple batch on [`grad_check_config`].
/// Both models use init std 0.3 so gradients clear the finite-difference
/// noise floor.
pub fn grad_check_case(seed: u64) -> Result<(ModelParams, ModelParams, Vec<PreferenceTriple>)> {
    let reference = ModelParams::init_with_std(grad_check_config(seed), 0.3)?;
    let policy = ModelParams::init_with_std(grad_check_config(seed.wrapping_add(100)), 0.3)?;
    let batch = generate_corpus(&CorpusSpec {
        n_triples: 2,
        prompt_len: 3,
        response_len: 5,
        vocab_size: 24,
        seed,
        ..CorpusSpec::default()
    })?;
    Ok((policy, reference, batch))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub n_params: usize,
    pub loss: f64,
    pub autodiff: Vec<f64>,
    pub closed_form: Vec<f64>,
    pub finite_diff: Vec<f64>,
    pub autodiff_vs_fd: f64,
    pub autodiff_vs_closed_form: f64,
    pub closed_form_vs_fd: f64,
}

impl GradientCheck {
    pub fn reports(&self) -> Vec<VerifyReport> {
        vec![
            VerifyReport::at_most("grads.autodiff_vs_fd", self.autodiff_vs_fd, 1e-4),
            VerifyReport::at_most("grads.autodiff_vs_closed_form", self.autodiff_vs_closed_form, 1e-6),
            VerifyReport::at_most("grads.closed_form_vs_fd", self.closed_form_vs_fd, 1e-4),
        ]
    }
}

/// Prepares every triple from `policy` with `derive_seed(seed, i)` and
/// compares the three gradients of the batch-mean objective.
pub fn check_gradients(
    policy: &ModelParams,
    reference: &ModelParams,
    batch: &[PreferenceTriple],
    cfg: &LossConfig,
    seed: u64,
) -> Result<GradientCheck> {
    cfg.validate()?;
    let preps = batch
        .iter()
        .enumerate()
        .map(|(i, t)| prepare_triple(cfg, policy, t, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let n = policy.num_params();
    let mut autodiff = vec![0.0; n];
    let mut loss = 0.0;
    for (t, p) in batch.iter().zip(&preps) {
        let (b, g) = triple_loss_and_grad(cfg, policy, reference, t, p)?;
        axpy(&mut autodiff, 1.0 / batch.len() as f64, &g);
        loss += b.l_total / batch.len() as f64;
    }
    let closed_form = closed_form_gradient(cfg, policy, reference, batch, &preps)?;
    let finite_diff = finite_difference_gradient(cfg, policy, reference, batch, &preps, FD_STEP)?;
    if [&autodiff, &closed_form, &finite_diff]
        .iter()
        .any(|g| g.iter().any(|v| !v.is_finite()))
    {
        return Err(AutodiffError::NonFinite { op: "gradient check" }.into());
    }
    Ok(GradientCheck {
        n_params: n,
        loss,
        autodiff_vs_fd: max_relative_error(&autodiff, &finite_diff),
        autodiff_vs_closed_form: max_relative_error(&autodiff, &closed_form),
        closed_form_vs_fd: max_relative_error(&closed_form, &finite_diff),
        autodiff,
        closed_form,
        finite_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64) -> (ModelParams, ModelParams, Vec<PreferenceTriple>) {
        grad_check_case(seed).unwrap()
    }

    #[test]
    fn small_config_is_small() {
        let p = ModelParams::init(grad_check_config(0)).unwrap();
        assert!(p.num_params() <= 10_000);
    }

    #[test]
    fn three_gradients_agree() {
        let (policy, reference, batch) = setup(1);
        let check = check_gradients(&policy, &reference, &batch, &LossConfig::default(), 7).unwrap();
        assert!(check.reports().iter().all(|r| r.passed), "{:?}", check.reports());
    }

    #[test]
    fn gamma_zero_isolates_weighted_term() {
        let (policy, reference, batch) = setup(2);
        let cfg = LossConfig {
            gamma: 0.0,
            ..LossConfig::default()
        };
        let check = check_gradients(&policy, &reference, &batch, &cfg, 7).unwrap();
        assert!(check.reports().iter().all(|r| r.passed), "{:?}", check.reports());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_relative_error(&[0.0], &[0.0]), 0.0);
        assert!((max_relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }
}
