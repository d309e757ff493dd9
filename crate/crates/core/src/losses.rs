//! Preference objectives: sequence-level DPO, importance-weighted token DPO,
//! the anchor triplet hinge and their combination, plus ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::attribution::{mix_with_prior, response_raw_importance, PriorKind};
use crate::autodiff::{log_sigmoid, Tape, Tensor, Var};
use crate::datagen::PreferenceTriple;
use crate::error::{Error, Result};
use crate::microlm::{ModelParams, SequenceState, Trainable, Weights};
use crate::sequence::{TokenId, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[serde(rename = "tidpo")]
    TiDpo,
    Dpo,
    NoTriplet,
    UniformWeight,
    RandomWeight,
    NoGaussianPrior,
    SoftmaxPrior,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::TiDpo,
        Variant::Dpo,
        Variant::NoTriplet,
        Variant::UniformWeight,
        Variant::RandomWeight,
        Variant::NoGaussianPrior,
        Variant::SoftmaxPrior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TiDpo => "tidpo",
            Variant::Dpo => "dpo",
            Variant::NoTriplet => "no-triplet",
            Variant::UniformWeight => "uniform-weight",
            Variant::RandomWeight => "random-weight",
            Variant::NoGaussianPrior => "no-gaussian-prior",
            Variant::SoftmaxPrior => "softmax-prior",
        }
    }

    pub fn uses_triplet(self) -> bool {
        !matches!(self, Variant::Dpo | Variant::NoTriplet)
    }

    pub fn uses_attribution(self) -> bool {
        matches!(
            self,
            Variant::TiDpo | Variant::NoTriplet | Variant::NoGaussianPrior | Variant::SoftmaxPrior
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        let v = match key.as_str() {
            "tidpo" => Variant::TiDpo,
            "dpo" => Variant::Dpo,
            "notriplet" => Variant::NoTriplet,
            "uniform" | "uniformweight" => Variant::UniformWeight,
            "random" | "randomweight" => Variant::RandomWeight,
            "nogaussianprior" | "noprior" => Variant::NoGaussianPrior,
            "softmaxprior" => Variant::SoftmaxPrior,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown variant {s:?}; expected one of {}",
                    Variant::ALL.map(Variant::name).join(", ")
                )))
            }
        };
        Ok(v)
    }
}

/// How per-token weight distributions enter the reward difference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScale {
    /// Weights used as produced, summing to one per response.
    Unit,
    /// Weights multiplied by the response length, so uniform weights give
    /// back the unweighted sequence objective.
    ResponseLength,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma: f64,
    pub alpha_margin: f64,
    pub lambda: f64,
    pub variant: Variant,
    #[serde(default = "default_scale")]
    pub weight_scale: WeightScale,
}

fn default_scale() -> WeightScale {
    WeightScale::ResponseLength
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: 0.1,
            alpha_margin: 0.3,
            lambda: 0.7,
            variant: Variant::TiDpo,
            weight_scale: default_scale(),
        }
    }
}

impl LossConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidConfig(format!("{what} = {v}")));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive, got", self.beta);
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be non-negative, got", self.gamma);
        }
        if !(self.alpha_margin >= 0.0 && self.alpha_margin.is_finite()) {
            return bad("alpha_margin must be non-negative, got", self.alpha_margin);
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1], got", self.lambda);
        }
        Ok(())
    }

    /// Triplet coefficient after the variant override.
    pub fn effective_gamma(&self) -> f64 {
        if self.variant.uses_triplet() {
            self.gamma
        } else {
            0.0
        }
    }

    fn effective_lambda(&self) -> f64 {
        if self.variant == Variant::NoGaussianPrior {
            1.0
        } else {
            self.lambda
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub delta_r_token: f64,
    pub l_dpo_w: f64,
    pub l_triplet: f64,
    pub l_total: f64,
    pub margin_active: bool,
}

impl LossBreakdown {
    /// Arithmetic mean in index order; the margin flag is set if any item has it.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.delta_r_token += b.delta_r_token;
            acc.l_dpo_w += b.l_dpo_w;
            acc.l_triplet += b.l_triplet;
            acc.l_total += b.l_total;
            acc.margin_active |= b.margin_active;
        }
        acc.delta_r_token /= n;
        acc.l_dpo_w /= n;
        acc.l_triplet /= n;
        acc.l_total /= n;
        acc
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, got })
    }
}

/// `Σ w_w·r_w − Σ w_l·r_l` over precomputed per-token log-ratios.
pub fn weighted_reward_difference(
    ratios_w: &[f64],
    ratios_l: &[f64],
    weights_w: &[f64],
    weights_l: &[f64],
) -> Result<f64> {
    check_len(ratios_w.len(), weights_w.len())?;
    check_len(ratios_l.len(), weights_l.len())?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok(dot(ratios_w, weights_w) - dot(ratios_l, weights_l))
}

pub fn delta_r_token(
    policy: &ModelParams,
    reference: &ModelParams,
    x: &[TokenId],
    y_w: &[TokenId],
    y_l: &[TokenId],
    weights_w: &[f64],
    weights_l: &[f64],
) -> Result<f64> {
    check_len(y_w.len(), weights_w.len())?;
    check_len(y_l.len(), weights_l.len())?;
    let r_w = policy.response_log_ratios(reference, x, y_w)?;
    let r_l = policy.response_log_ratios(reference, x, y_l)?;
    weighted_reward_difference(&r_w, &r_l, weights_w, weights_l)
}

/// `−log σ(β·delta)`.
pub fn loss_dpo_w(cfg: &LossConfig, delta: f64) -> f64 {
    -log_sigmoid(cfg.beta * delta)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletTerms {
    pub pos: f64,
    pub neg: f64,
    pub loss: f64,
    pub margin_active: bool,
}

/// Hinge on squared per-token distances. `b`, `c`, `d` are the log-ratio
/// sequences of the preferred, dispreferred and anchor responses; each sum
/// runs over the prefix the anchor shares with the other response.
pub fn triplet_hinge(b: &[f64], c: &[f64], d: &[f64], alpha: f64) -> Result<TripletTerms> {
    if d.is_empty() {
        return Err(Error::EmptyAnchor);
    }
    let sq = |u: &[f64]| -> f64 { u.iter().zip(d).map(|(x, y)| (y - x) * (y - x)).sum() };
    let pos = sq(b);
    let neg = sq(c);
    let pre = pos - neg + alpha;
    Ok(TripletTerms {
        pos,
        neg,
        loss: pre.max(0.0),
        margin_active: pre > 0.0,
    })
}

pub fn loss_triplet(
    policy: &ModelParams,
    reference: &ModelParams,
    x: &[TokenId],
    y_anchor: &[TokenId],
    y_w: &[TokenId],
    y_l: &[TokenId],
    cfg: &LossConfig,
) -> Result<(f64, bool)> {
    if y_anchor.is_empty() {
        return Err(Error::EmptyAnchor);
    }
    let b = policy.response_log_ratios(reference, x, y_w)?;
    let c = policy.response_log_ratios(reference, x, y_l)?;
    let d = policy.response_log_ratios(reference, x, y_anchor)?;
    let t = triplet_hinge(&b, &c, &d, cfg.alpha_margin)?;
    Ok((t.loss, t.margin_active))
}

/// Mixes a 64-bit seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Policy-sampled anchor: the first `⌈T_w/2⌉` tokens of `y_w` followed by up
/// to `T_w` sampled tokens at temperature 1, capped by the context window.
pub fn sample_anchor(policy: &ModelParams, x: &[TokenId], y_w: &[TokenId], seed: u64) -> Result<TokenSequence> {
    let keep = y_w.len().div_ceil(2);
    let prefix = &y_w[..keep];
    let room = policy
        .config
        .max_seq_len
        .saturating_sub(x.len() + prefix.len());
    let max_new = y_w.len().min(room);
    if max_new == 0 {
        return Ok(TokenSequence::new(prefix.to_vec()));
    }
    let state = SequenceState::new(x.to_vec(), prefix.to_vec());
    let sampled = policy.sample(&state, max_new, 1.0, seed)?;
    Ok(TokenSequence::new(prefix.to_vec()).concat(&sampled))
}

/// Seeded draw from the symmetric Dirichlet(1, …, 1).
pub fn dirichlet_weights(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Vec<f64> = (0..len).map(|_| Exp1.sample(&mut rng)).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Everything a triple needs before the differentiable pass: weights that
/// enter the reward difference, and the anchor when the triplet is active.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTriple {
    pub weights_w: Vec<f64>,
    pub weights_l: Vec<f64>,
    pub anchor: Option<TokenSequence>,
}

/// Per-response weight distribution for `variant`, summing to one.
pub fn weight_distribution(
    cfg: &LossConfig,
    policy: &ModelParams,
    x: &[TokenId],
    y: &[TokenId],
    seed: u64,
) -> Result<Vec<f64>> {
    let t = y.len();
    Ok(match cfg.variant {
        Variant::Dpo | Variant::UniformWeight => vec![1.0 / t as f64; t],
        Variant::RandomWeight => dirichlet_weights(t, seed),
        Variant::TiDpo | Variant::NoTriplet | Variant::NoGaussianPrior => {
            let raw = response_raw_importance(policy, x, y)?;
            mix_with_prior(&raw, cfg.effective_lambda(), PriorKind::Gaussian)?.mixed
        }
        Variant::SoftmaxPrior => {
            let raw = response_raw_importance(policy, x, y)?;
            mix_with_prior(&raw, cfg.lambda, PriorKind::SoftmaxOfRaw)?.mixed
        }
    })
}

fn loss_weights(cfg: &LossConfig, policy: &ModelParams, x: &[TokenId], y: &[TokenId], seed: u64) -> Result<Vec<f64>> {
    if cfg.variant == Variant::Dpo {
        return Ok(vec![1.0; y.len()]);
    }
    let dist = weight_distribution(cfg, policy, x, y, seed)?;
    Ok(match cfg.weight_scale {
        WeightScale::Unit => dist,
        WeightScale::ResponseLength => {
            let t = y.len() as f64;
            dist.into_iter().map(|w| w * t).collect()
        }
    })
}

/// Attribution and anchor sampling for one triple. Uses `policy` read-only;
/// every random choice is a function of `seed`.
pub fn prepare_triple(
    cfg: &LossConfig,
    policy: &ModelParams,
    triple: &PreferenceTriple,
    seed: u64,
) -> Result<PreparedTriple> {
    let weights_w = loss_weights(cfg, policy, &triple.x, &triple.y_w, derive_seed(seed, 1))?;
    let weights_l = loss_weights(cfg, policy, &triple.x, &triple.y_l, derive_seed(seed, 2))?;
    let anchor = if cfg.effective_gamma() > 0.0 {
        Some(sample_anchor(policy, &triple.x, &triple.y_w, derive_seed(seed, 3))?)
    } else {
        None
    };
    Ok(PreparedTriple {
        weights_w,
        weights_l,
        anchor,
    })
}

/// Loss of one prepared triple, evaluated without a tape.
pub fn triple_loss(
    cfg: &LossConfig,
    policy: &ModelParams,
    reference: &ModelParams,
    triple: &PreferenceTriple,
    prep: &PreparedTriple,
) -> Result<LossBreakdown> {
    let b = policy.response_log_ratios(reference, &triple.x, &triple.y_w)?;
    let c = policy.response_log_ratios(reference, &triple.x, &triple.y_l)?;
    let delta = weighted_reward_difference(&b, &c, &prep.weights_w, &prep.weights_l)?;
    let l_dpo_w = loss_dpo_w(cfg, delta);
    let gamma = cfg.effective_gamma();
    let (l_triplet, margin_active) = match (&prep.anchor, gamma > 0.0) {
        (Some(anchor), true) => {
            let d = policy.response_log_ratios(reference, &triple.x, anchor)?;
            let t = triplet_hinge(&b, &c, &d, cfg.alpha_margin)?;
            (t.loss, t.margin_active)
        }
        _ => (0.0, false),
    };
    Ok(LossBreakdown {
        delta_r_token: delta,
        l_dpo_w,
        l_triplet,
        l_total: l_dpo_w + gamma * l_triplet,
        margin_active,
    })
}

/// Handles to the pieces of one recorded triple objective.
#[derive(Clone, Copy, Debug)]
pub struct RecordedObjective {
    pub total: Var,
    pub ratios_w: Var,
    pub ratios_l: Var,
    pub ratios_anchor: Option<Var>,
}

fn record_ratios(
    tape: &mut Tape,
    policy: &ModelParams,
    w: &Weights<Var>,
    reference: &ModelParams,
    x: &[TokenId],
    y: &[TokenId],
) -> Result<Var> {
    let lp = policy.record_response_logprobs(tape, w, x, y)?;
    let ref_lp = tape.constant(Tensor::row(reference.response_logprobs(x, y)?));
    Ok(tape.sub(lp, ref_lp)?)
}

fn squared_distance(tape: &mut Tape, a: Var, b: Var, n: usize) -> Result<Var> {
    let a = tape.slice_cols(a, 0, n)?;
    let b = tape.slice_cols(b, 0, n)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq)?)
}

/// Records the combined objective of one triple on `tape`, with the policy
/// weights already placed there as `w`. Reference quantities, weights and
/// the anchor tokens enter as constants.
pub fn record_triple_objective(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &LossConfig,
    policy: &ModelParams,
    reference: &ModelParams,
    triple: &PreferenceTriple,
    prep: &PreparedTriple,
) -> Result<RecordedObjective> {
    policy.ensure_same_config(reference)?;
    check_len(triple.y_w.len(), prep.weights_w.len())?;
    check_len(triple.y_l.len(), prep.weights_l.len())?;
    let ratios_w = record_ratios(tape, policy, w, reference, &triple.x, &triple.y_w)?;
    let ratios_l = record_ratios(tape, policy, w, reference, &triple.x, &triple.y_l)?;
    let ww = tape.constant(Tensor::row(prep.weights_w.clone()));
    let wl = tape.constant(Tensor::row(prep.weights_l.clone()));
    let sw = tape.mul(ratios_w, ww)?;
    let sw = tape.sum(sw)?;
    let sl = tape.mul(ratios_l, wl)?;
    let sl = tape.sum(sl)?;
    let delta = tape.sub(sw, sl)?;
    let scaled = tape.scale(delta, cfg.beta)?;
    let ls = tape.log_sigmoid(scaled)?;
    let mut total = tape.scale(ls, -1.0)?;

    let gamma = cfg.effective_gamma();
    let mut ratios_anchor = None;
    if gamma > 0.0 {
        let anchor = prep.anchor.as_ref().ok_or(Error::EmptyAnchor)?;
        if anchor.is_empty() {
            return Err(Error::EmptyAnchor);
        }
        let d = record_ratios(tape, policy, w, reference, &triple.x, anchor)?;
        ratios_anchor = Some(d);
        let pos = squared_distance(tape, d, ratios_w, anchor.len().min(triple.y_w.len()))?;
        let neg = squared_distance(tape, ratios_l, d, anchor.len().min(triple.y_l.len()))?;
        let pre = tape.sub(pos, neg)?;
        let pre = tape.add_scalar(pre, cfg.alpha_margin)?;
        let hinge = tape.relu(pre)?;
        let weighted = tape.scale(hinge, gamma)?;
        total = tape.add(total, weighted)?;
    }
    Ok(RecordedObjective {
        total,
        ratios_w,
        ratios_l,
        ratios_anchor,
    })
}

/// Loss of one prepared triple and its gradient with respect to the flat
/// policy parameters.
pub fn triple_loss_and_grad(
    cfg: &LossConfig,
    policy: &ModelParams,
    reference: &ModelParams,
    triple: &PreferenceTriple,
    prep: &PreparedTriple,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut tape = Tape::new();
    let w = policy.record(&mut tape, Trainable::Yes);
    let obj = record_triple_objective(&mut tape, &w, cfg, policy, reference, triple, prep)?;
    let grads = tape.backward(obj.total)?;
    let mut flat = Vec::with_capacity(policy.num_params());
    for v in w.iter() {
        flat.extend_from_slice(grads.get(*v).data());
    }
    let breakdown = breakdown_from_tape(&tape, cfg, triple, prep, &obj)?;
    Ok((breakdown, flat))
}

fn breakdown_from_tape(
    tape: &Tape,
    cfg: &LossConfig,
    triple: &PreferenceTriple,
    prep: &PreparedTriple,
    obj: &RecordedObjective,
) -> Result<LossBreakdown> {
    let b = tape.value(obj.ratios_w).data();
    let c = tape.value(obj.ratios_l).data();
    let delta = weighted_reward_difference(b, c, &prep.weights_w, &prep.weights_l)?;
    let (l_triplet, margin_active) = match obj.ratios_anchor {
        Some(d) => {
            let t = triplet_hinge(b, c, tape.value(d).data(), cfg.alpha_margin)?;
            (t.loss, t.margin_active)
        }
        None => (0.0, false),
    };
    debug_assert_eq!(b.len(), triple.y_w.len());
    let l_dpo_w = loss_dpo_w(cfg, delta);
    Ok(LossBreakdown {
        delta_r_token: delta,
        l_dpo_w,
        l_triplet,
        l_total: l_dpo_w + cfg.effective_gamma() * l_triplet,
        margin_active,
    })
}

/// Batch mean of the variant's objective. Triple `i` draws its randomness
/// from `derive_seed(seed, i)`.
pub fn loss_total(
    cfg: &LossConfig,
    batch: &[PreferenceTriple],
    policy: &ModelParams,
    reference: &ModelParams,
    seed: u64,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let items = batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let prep = prepare_triple(cfg, policy, t, derive_seed(seed, i as u64))?;
            triple_loss(cfg, policy, reference, t, &prep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&items))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusSpec};
    use crate::microlm::ModelConfig;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 32,
            seed: 3,
        }
    }

    fn corpus(n: usize) -> Vec<PreferenceTriple> {
        generate_corpus(&CorpusSpec {
            n_triples: n,
            prompt_len: 3,
            response_len: 6,
            vocab_size: 32,
            seed: 9,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    fn models() -> (ModelParams, ModelParams) {
        let reference = ModelParams::init_with_std(small(), 0.3).unwrap();
        let policy = ModelParams::init_with_std(ModelConfig { seed: 4, ..small() }, 0.3).unwrap();
        (policy, reference)
    }

    #[test]
    fn dpo_w_scalar_values() {
        let cfg = LossConfig::default();
        assert!((loss_dpo_w(&cfg, 0.0) - LN2).abs() < 1e-12);
        assert!((loss_dpo_w(&cfg, 5.0) - 0.474_077).abs() < 1e-6);
        let oracle = -(1.0 / (1.0 + (-0.5f64).exp())).ln();
        assert!((loss_dpo_w(&cfg, 5.0) - oracle).abs() < 1e-15);
        assert!(loss_dpo_w(&cfg, 1e6) < 1e-12);
        assert!(loss_dpo_w(&cfg, -1e6) > 1e4);
    }

    #[test]
    fn triplet_hand_case() {
        let t = triplet_hinge(&[0.2, 0.1], &[-0.3, 0.0], &[0.0, 0.0], 0.3).unwrap();
        assert!((t.pos - 0.05).abs() < 1e-12);
        assert!((t.neg - 0.09).abs() < 1e-12);
        assert!((t.loss - 0.26).abs() < 1e-12);
        assert!(t.margin_active);
        let floor = triplet_hinge(&[0.2, 0.1], &[-0.3, 0.0], &[0.2, 0.1], 0.0).unwrap();
        assert_eq!(floor.loss, 0.0);
        assert!(!floor.margin_active);
        assert!(matches!(triplet_hinge(&[1.0], &[1.0], &[], 0.3), Err(Error::EmptyAnchor)));
    }

    #[test]
    fn triplet_truncates_to_shared_prefix() {
        let t = triplet_hinge(&[1.0], &[0.0, 5.0, 5.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(t.pos, 1.0);
        assert_eq!(t.neg, 25.0);
    }

    #[test]
    fn identical_models_give_zero_delta_and_margin_triplet() {
        let (policy, _) = models();
        let c = corpus(3);
        let t = &c[0];
        let cfg = LossConfig::default();
        let d = delta_r_token(&policy, &policy, &t.x, &t.y_w, &t.y_l, &[0.3; 6], &[0.9; 6]).unwrap();
        assert_eq!(d, 0.0);
        let (l, active) = loss_triplet(&policy, &policy, &t.x, &t.y_w, &t.y_w, &t.y_l, &cfg).unwrap();
        assert_eq!(l, 0.3);
        assert!(active);
        let dpo = loss_total(&LossConfig::with_variant(Variant::Dpo), &c, &policy, &policy, 1).unwrap();
        assert!((dpo.l_total - LN2).abs() < 1e-12);
    }

    #[test]
    fn delta_length_mismatch() {
        let (policy, reference) = models();
        let t = &corpus(1)[0];
        let r = delta_r_token(&policy, &reference, &t.x, &t.y_w, &t.y_l, &[1.0; 5], &[1.0; 6]);
        assert!(matches!(r, Err(Error::LengthMismatch { expected: 6, got: 5 })));
    }

    #[test]
    fn delta_antisymmetry_and_uniform_oracle() {
        let (policy, reference) = models();
        let t = &corpus(1)[0];
        let ww = [0.1, 0.2, 0.3, 0.1, 0.2, 0.1];
        let wl = [0.3, 0.1, 0.1, 0.2, 0.2, 0.1];
        let d = delta_r_token(&policy, &reference, &t.x, &t.y_w, &t.y_l, &ww, &wl).unwrap();
        let s = delta_r_token(&policy, &reference, &t.x, &t.y_l, &t.y_w, &wl, &ww).unwrap();
        assert!((d + s).abs() < 1e-12);

        let u = [1.0 / 6.0; 6];
        let got = delta_r_token(&policy, &reference, &t.x, &t.y_w, &t.y_l, &u, &u).unwrap();
        // Independent summation, one token_logprob call per position.
        let seq_ratio = |y: &[TokenId]| -> f64 {
            (0..y.len())
                .map(|i| {
                    let st = SequenceState::new(t.x.clone(), y[..i].to_vec());
                    policy.token_logprob(&st, y[i]).unwrap() - reference.token_logprob(&st, y[i]).unwrap()
                })
                .sum::<f64>()
                / y.len() as f64
        };
        let oracle = seq_ratio(&t.y_w) - seq_ratio(&t.y_l);
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn variant_overrides() {
        let (policy, reference) = models();
        let c = corpus(4);
        let nt = loss_total(&LossConfig::with_variant(Variant::NoTriplet), &c, &policy, &reference, 5).unwrap();
        assert_eq!(nt.l_total, nt.l_dpo_w);
        assert_eq!(nt.l_triplet, 0.0);
        let dpo = loss_total(&LossConfig::with_variant(Variant::Dpo), &c, &policy, &reference, 5).unwrap();
        assert_eq!(dpo.l_total, dpo.l_dpo_w);
        // Length-scaled uniform weights equal the unit-weight sequence objective.
        let uni = LossConfig {
            gamma: 0.0,
            ..LossConfig::with_variant(Variant::UniformWeight)
        };
        let u = loss_total(&uni, &c, &policy, &reference, 5).unwrap();
        assert!((u.l_dpo_w - dpo.l_dpo_w).abs() < 1e-12);
    }

    #[test]
    fn total_recomposes_from_parts() {
        let (policy, reference) = models();
        let c = corpus(4);
        let cfg = LossConfig::default();
        let seed = 77;
        let batch = loss_total(&cfg, &c, &policy, &reference, seed).unwrap();
        let mut manual = 0.0;
        for (i, t) in c.iter().enumerate() {
            let prep = prepare_triple(&cfg, &policy, t, derive_seed(seed, i as u64)).unwrap();
            let d = delta_r_token(&policy, &reference, &t.x, &t.y_w, &t.y_l, &prep.weights_w, &prep.weights_l)
                .unwrap();
            let anchor = prep.anchor.as_ref().unwrap();
            let (trip, _) = loss_triplet(&policy, &reference, &t.x, anchor, &t.y_w, &t.y_l, &cfg).unwrap();
            manual += loss_dpo_w(&cfg, d) + cfg.gamma * trip;
        }
        manual /= c.len() as f64;
        assert!((batch.l_total - manual).abs() < 1e-12);
        assert!((batch.l_total - (batch.l_dpo_w + cfg.gamma * batch.l_triplet)).abs() < 1e-12);
    }

    #[test]
    fn tape_and_plain_evaluation_agree() {
        let (policy, reference) = models();
        let c = corpus(3);
        for variant in Variant::ALL {
            let cfg = LossConfig::with_variant(variant);
            for (i, t) in c.iter().enumerate() {
                let prep = prepare_triple(&cfg, &policy, t, i as u64).unwrap();
                let plain = triple_loss(&cfg, &policy, &reference, t, &prep).unwrap();
                let (taped, grad) = triple_loss_and_grad(&cfg, &policy, &reference, t, &prep).unwrap();
                assert!((plain.l_total - taped.l_total).abs() < 1e-12, "{variant}");
                assert_eq!(plain.margin_active, taped.margin_active);
                assert_eq!(grad.len(), policy.num_params());
                assert!(grad.iter().any(|g| *g != 0.0));
            }
        }
    }

    #[test]
    fn prepared_weights_per_variant() {
        let (policy, _) = models();
        let t = &corpus(1)[0];
        for variant in Variant::ALL {
            let cfg = LossConfig::with_variant(variant);
            let p = prepare_triple(&cfg, &policy, t, 11).unwrap();
            assert!((p.weights_w.iter().sum::<f64>() - 6.0).abs() < 1e-9);
            assert!(p.weights_w.iter().all(|w| *w > 0.0));
            assert_eq!(p.anchor.is_some(), variant.uses_triplet());
            if let Some(a) = &p.anchor {
                assert_eq!(&a[..3], &t.y_w[..3]);
                assert!(a.len() > 3 && a.len() <= 9);
            }
            assert_eq!(p, prepare_triple(&cfg, &policy, t, 11).unwrap());
        }
        let unit = LossConfig {
            weight_scale: WeightScale::Unit,
            ..LossConfig::default()
        };
        let p = prepare_triple(&unit, &policy, t, 11).unwrap();
        assert!((p.weights_l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert_eq!("TI-DPO".parse::<Variant>().unwrap(), Variant::TiDpo);
        assert!("ipo".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for cfg in [
            LossConfig { beta: 0.0, ..LossConfig::default() },
            LossConfig { gamma: -0.1, ..LossConfig::default() },
            LossConfig { alpha_margin: f64::NAN, ..LossConfig::default() },
            LossConfig { lambda: 1.2, ..LossConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    proptest! {
        #[test]
        fn sigmoid_of_delta_is_weighted_bradley_terry(
            rw in prop::collection::vec(-3.0f64..3.0, 1..8),
            rl in prop::collection::vec(-3.0f64..3.0, 1..8),
            seed in any::<u64>(),
        ) {
            let ww = dirichlet_weights(rw.len(), seed);
            let wl = dirichlet_weights(rl.len(), seed ^ 1);
            let delta = weighted_reward_difference(&rw, &rl, &ww, &wl).unwrap();
            let sw: f64 = rw.iter().zip(&ww).map(|(a, b)| a * b).sum();
            let sl: f64 = rl.iter().zip(&wl).map(|(a, b)| a * b).sum();
            let bt = sw.exp() / (sw.exp() + sl.exp());
            prop_assert!((crate::autodiff::sigmoid(delta) - bt).abs() < 1e-9);
        }

        #[test]
        fn dpo_w_is_positive_and_decreasing(a in -50.0f64..50.0, step in 1e-3f64..10.0) {
            let cfg = LossConfig::default();
            prop_assert!(loss_dpo_w(&cfg, a) > 0.0);
            prop_assert!(loss_dpo_w(&cfg, a + step) < loss_dpo_w(&cfg, a));
        }

        #[test]
        fn raising_preferred_terms_never_raises_loss(
            rw in prop::collection::vec(-3.0f64..3.0, 1..8),
            bump in prop::collection::vec(0.0f64..2.0, 8),
            seed in any::<u64>(),
        ) {
            let cfg = LossConfig::default();
            let ww = dirichlet_weights(rw.len(), seed);
            let rl = vec![0.5; 3];
            let wl = vec![1.0 / 3.0; 3];
            let before = loss_dpo_w(&cfg, weighted_reward_difference(&rw, &rl, &ww, &wl).unwrap());
            let raised: Vec<f64> = rw.iter().zip(&bump).map(|(r, b)| r + b).collect();
            let after = loss_dpo_w(&cfg, weighted_reward_difference(&raised, &rl, &ww, &wl).unwrap());
            prop_assert!(after <= before);
        }

        #[test]
        fn triplet_is_a_hinge(
            b in prop::collection::vec(-2.0f64..2.0, 1..6),
            c in prop::collection::vec(-2.0f64..2.0, 1..6),
            d in prop::collection::vec(-2.0f64..2.0, 1..6),
            alpha in 0.0f64..1.0,
        ) {
            let t = triplet_hinge(&b, &c, &d, alpha).unwrap();
            prop_assert!(t.loss >= 0.0);
            if t.pos - t.neg + alpha <= 0.0 {
                prop_assert_eq!(t.loss, 0.0);
            } else {
                prop_assert!((t.loss - (t.pos - t.neg + alpha)).abs() < 1e-12);
            }
        }

        #[test]
        fn dirichlet_sums_to_one(len in 1usize..20, seed in any::<u64>()) {
            let w = dirichlet_weights(len, seed);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|v| *v > 0.0));
        }
    }
}
