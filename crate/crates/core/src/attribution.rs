//! Token-importance weights.
//!
//! Raw importance of token `i` is the L1 norm of the gradient of the largest
//! final-position logit with respect to that token's input embedding. Raw
//! scores restricted to the response are normalized to a distribution and
//! mixed with a Gaussian position prior centred on the response:
//!
//! `W = λ · I_norm + (1 − λ) · P_prior`
//!
//! Weights are plain numbers. They are produced on their own tape and enter
//! the training objective as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::microlm::ModelParams;
use crate::sequence::{TokenId, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub prior: Vec<f64>,
    pub mixed: Vec<f64>,
    pub lambda: f64,
}

impl ImportanceWeights {
    pub fn len(&self) -> usize {
        self.mixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixed.is_empty()
    }
}

/// Where the position prior in the mix comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Gaussian,
    /// Softmax of the raw scores themselves.
    SoftmaxOfRaw,
}

/// Recorded attribution pass: the tape, the target scalar and the embedding
/// leaf it should be differentiated against.
#[derive(Debug)]
pub struct AttributionPass {
    pub tape: Tape,
    pub target: Var,
    pub embeddings: Var,
}

impl AttributionPass {
    pub fn target_value(&self) -> f64 {
        self.tape.value(self.target).item()
    }
}

/// `L_target = max(logits at the final position)` on a fresh tape whose only
/// leaf is the `T x d_model` embedding matrix of `seq`.
pub fn target_scalar(params: &ModelParams, seq: &[TokenId]) -> Result<AttributionPass> {
    if seq.len() < 2 {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            min: 2,
        });
    }
    let mut tape = Tape::new();
    let (logits, embeddings) = params.record_with_embedding_leaf(&mut tape, seq)?;
    let last = tape.value(logits).rows() - 1;
    let final_row = tape.gather_rows(logits, &[last])?;
    let target = tape.max(final_row)?;
    Ok(AttributionPass {
        tape,
        target,
        embeddings,
    })
}

/// `I_i = ‖∇_{e_i} L_target‖₁` for every position of `seq`.
pub fn raw_importance(params: &ModelParams, seq: &[TokenId]) -> Result<Vec<f64>> {
    let pass = target_scalar(params, seq)?;
    let grads = pass.tape.backward(pass.target)?;
    let g = grads.get(pass.embeddings);
    Ok((0..g.rows())
        .map(|r| g.row_slice(r).iter().map(|v| v.abs()).sum())
        .collect())
}

/// Unnormalized `exp(−½((t − μ)/σ)²)` with `μ = (T − 1)/2`, `σ = T/4`.
pub fn gaussian_prior_unnormalized(len: usize) -> Vec<f64> {
    let mu = (len as f64 - 1.0) / 2.0;
    let sigma = len as f64 / 4.0;
    (0..len)
        .map(|t| {
            let z = (t as f64 - mu) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect()
}

/// Gaussian position prior normalized to sum to one.
pub fn gaussian_prior(len: usize) -> Vec<f64> {
    normalize(&gaussian_prior_unnormalized(len)).unwrap_or_default()
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let s: f64 = v.iter().sum();
    (s > 0.0 && s.is_finite()).then(|| v.iter().map(|x| x / s).collect())
}

fn uniform(len: usize) -> Vec<f64> {
    vec![1.0 / len as f64; len]
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Convex mix of normalized raw scores with the Gaussian prior.
///
/// An all-zero score vector normalizes to the uniform distribution.
pub fn mix_weights(raw: &[f64], lambda: f64) -> Result<ImportanceWeights> {
    mix_with_prior(raw, lambda, PriorKind::Gaussian)
}

pub fn mix_with_prior(raw: &[f64], lambda: f64, prior: PriorKind) -> Result<ImportanceWeights> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    if raw.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(
            "raw importance scores must be finite and non-negative".into(),
        ));
    }
    let normalized = normalize(raw).unwrap_or_else(|| uniform(raw.len()));
    let prior = match prior {
        PriorKind::Gaussian => gaussian_prior(raw.len()),
        PriorKind::SoftmaxOfRaw => softmax(raw),
    };
    let mixed = normalized
        .iter()
        .zip(&prior)
        .map(|(n, p)| lambda * n + (1.0 - lambda) * p)
        .collect();
    Ok(ImportanceWeights {
        raw: raw.to_vec(),
        normalized,
        prior,
        mixed,
        lambda,
    })
}

/// Raw importance of the response tokens, attributed over `prompt ⊕ response`.
pub fn response_raw_importance(
    policy: &ModelParams,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<Vec<f64>> {
    let seq = TokenSequence::new(prompt.to_vec()).concat(response);
    let total = policy.config.max_seq_len;
    if seq.len() > total {
        return Err(Error::SequenceTooLong {
            len: seq.len(),
            max: total,
        });
    }
    let all = raw_importance(policy, &seq)?;
    Ok(all[prompt.len()..].to_vec())
}

pub fn response_weights(
    policy: &ModelParams,
    prompt: &[TokenId],
    response: &[TokenId],
    lambda: f64,
    prior: PriorKind,
) -> Result<ImportanceWeights> {
    let raw = response_raw_importance(policy, prompt, response)?;
    mix_with_prior(&raw, lambda, prior)
}

/// Hybrid weights for the preferred and dispreferred responses of one pair,
/// computed independently for each.
pub fn weights_for_pair(
    policy: &ModelParams,
    x: &[TokenId],
    y_w: &[TokenId],
    y_l: &[TokenId],
    lambda: f64,
) -> Result<(ImportanceWeights, ImportanceWeights)> {
    Ok((
        response_weights(policy, x, y_w, lambda, PriorKind::Gaussian)?,
        response_weights(policy, x, y_l, lambda, PriorKind::Gaussian)?,
    ))
}

/// One entry of the per-token weight report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub token_id: TokenId,
    pub position: usize,
    pub raw: f64,
    pub mixed: f64,
}

pub fn weight_report(response: &[TokenId], weights: &ImportanceWeights) -> Vec<TokenWeight> {
    response
        .iter()
        .enumerate()
        .map(|(position, &token_id)| TokenWeight {
            token_id,
            position,
            raw: weights.raw[position],
            mixed: weights.mixed[position],
        })
        .collect()
}
