//! Synthetic preference corpora with planted critical tokens.
//!
//! Every triple shares a filler backbone between its two responses. At a
//! small set of critical positions the preferred response carries a token
//! from the "good" pool and the dispreferred one a token from the "bad"
//! pool; everywhere else the responses agree. The critical set is the ground
//! truth for weight-recovery and KL-split checks.

use std::fs;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::microlm::{write_atomic, ModelConfig, ModelParams};
use crate::sequence::{TokenId, TokenSequence, BOS, RESERVED};

pub const POOL_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub x: TokenSequence,
    pub y_w: TokenSequence,
    pub y_l: TokenSequence,
    pub critical_w: Vec<usize>,
    pub critical_l: Vec<usize>,
    #[serde(default)]
    pub flipped: bool,
}

impl PreferenceTriple {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.y_w == self.y_l {
            return Err(Error::InvalidArgument(
                "preferred and dispreferred responses are identical".into(),
            ));
        }
        if self.x.is_empty() || self.y_w.is_empty() || self.y_l.is_empty() {
            return Err(Error::InvalidArgument("empty prompt or response".into()));
        }
        for (name, seq) in [("x", &self.x), ("y_w", &self.y_w), ("y_l", &self.y_l)] {
            seq.check_vocab(vocab_size).map_err(|e| match e {
                Error::TokenOutOfRange {
                    token,
                    position,
                    vocab,
                } => Error::InvalidArgument(format!(
                    "{name}[{position}] = {token} is outside vocabulary of size {vocab}"
                )),
                other => other,
            })?;
        }
        for (name, set, len) in [
            ("critical_w", &self.critical_w, self.y_w.len()),
            ("critical_l", &self.critical_l, self.y_l.len()),
        ] {
            if let Some(p) = set.iter().find(|&&p| p >= len) {
                return Err(Error::InvalidArgument(format!(
                    "{name} position {p} outside response of length {len}"
                )));
            }
        }
        Ok(())
    }

    /// Swaps the two responses together with their critical sets.
    pub fn flip(&mut self) {
        std::mem::swap(&mut self.y_w, &mut self.y_l);
        std::mem::swap(&mut self.critical_w, &mut self.critical_l);
        self.flipped = !self.flipped;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_triples: usize,
    pub prompt_len: usize,
    pub response_len: usize,
    pub n_critical: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub vocab_size: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_triples: 512,
            prompt_len: 4,
            response_len: 12,
            n_critical: 2,
            noise_rate: 0.0,
            seed: 0,
            vocab_size: 64,
        }
    }
}

/// Disjoint id ranges used by the generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPools {
    pub good: Range<TokenId>,
    pub bad: Range<TokenId>,
    pub filler: Range<TokenId>,
}

impl TokenPools {
    pub fn for_vocab(vocab_size: usize) -> Result<Self> {
        let good_start = RESERVED as TokenId;
        let bad_start = good_start + POOL_SIZE as TokenId;
        let filler_start = bad_start + POOL_SIZE as TokenId;
        if vocab_size < filler_start as usize + 2 {
            return Err(Error::SpecInfeasible(format!(
                "vocab_size {vocab_size} leaves fewer than 2 filler tokens"
            )));
        }
        Ok(Self {
            good: good_start..bad_start,
            bad: bad_start..filler_start,
            filler: filler_start..vocab_size as TokenId,
        })
    }

    pub fn is_good(&self, t: TokenId) -> bool {
        self.good.contains(&t)
    }

    pub fn is_bad(&self, t: TokenId) -> bool {
        self.bad.contains(&t)
    }
}

/// Positions eligible for planting: the middle half of the response, or the
/// whole response when the middle half is too small.
fn critical_window(len: usize, n_critical: usize) -> Range<usize> {
    let start = len / 4;
    let end = start + len.div_ceil(2);
    if end - start >= n_critical {
        start..end
    } else {
        0..len
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<PreferenceTriple>> {
    if spec.prompt_len == 0 || spec.response_len == 0 {
        return Err(Error::SpecInfeasible(
            "prompt and response must be non-empty".into(),
        ));
    }
    if spec.n_critical == 0 || spec.n_critical > spec.response_len {
        return Err(Error::SpecInfeasible(format!(
            "n_critical must lie in 1..={}, got {}",
            spec.response_len, spec.n_critical
        )));
    }
    if !(0.0..=1.0).contains(&spec.noise_rate) {
        return Err(Error::SpecInfeasible(format!(
            "noise_rate {} outside [0, 1]",
            spec.noise_rate
        )));
    }
    let pools = TokenPools::for_vocab(spec.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let window: Vec<usize> = critical_window(spec.response_len, spec.n_critical).collect();

    let mut corpus = Vec::with_capacity(spec.n_triples);
    for _ in 0..spec.n_triples {
        let mut x = vec![BOS];
        x.extend((1..spec.prompt_len).map(|_| rng.random_range(pools.filler.clone())));
        let backbone: Vec<TokenId> = (0..spec.response_len)
            .map(|_| rng.random_range(pools.filler.clone()))
            .collect();
        let mut critical: Vec<usize> = window
            .choose_multiple(&mut rng, spec.n_critical)
            .copied()
            .collect();
        critical.sort_unstable();
        let mut y_w = backbone.clone();
        let mut y_l = backbone;
        for &p in &critical {
            y_w[p] = rng.random_range(pools.good.clone());
            y_l[p] = rng.random_range(pools.bad.clone());
        }
        corpus.push(PreferenceTriple {
            x: x.into(),
            y_w: y_w.into(),
            y_l: y_l.into(),
            critical_w: critical.clone(),
            critical_l: critical,
            flipped: false,
        });
    }
    if spec.noise_rate > 0.0 {
        corpus = inject_noise(corpus, spec.noise_rate, spec.seed ^ 0x6e6f_6973_65);
    }
    Ok(corpus)
}

/// Flips exactly `round(rate * n)` triples chosen by a seeded shuffle.
pub fn inject_noise(mut corpus: Vec<PreferenceTriple>, rate: f64, seed: u64) -> Vec<PreferenceTriple> {
    let rate = rate.clamp(0.0, 1.0);
    let n_flip = (rate * corpus.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for &i in &idx[..n_flip] {
        corpus[i].flip();
    }
    corpus
}

/// Writes one JSON triple per line, atomically.
pub fn save(path: &Path, corpus: &[PreferenceTriple]) -> Result<()> {
    let mut out = Vec::new();
    for t in corpus {
        serde_json::to_writer(&mut out, t).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}

pub fn load(path: &Path, vocab_size: usize) -> Result<Vec<PreferenceTriple>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut corpus = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let triple: PreferenceTriple =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        triple.validate(vocab_size).map_err(|e| parse_err(e.to_string()))?;
        corpus.push(triple);
    }
    Ok(corpus)
}

/// A context-free model that prefers good-pool tokens and avoids bad-pool
/// tokens by `strength` logits, used as a known-separable reference point.
pub fn oracle_params(config: ModelConfig, strength: f64) -> Result<ModelParams> {
    let pools = TokenPools::for_vocab(config.vocab_size)?;
    let mut params = ModelParams::zeros(config)?;
    let d = config.d_model;
    let mut bias = vec![0.0; d];
    bias[0] = 1.0;
    params.weights.lnf_bias = Tensor::row(bias);
    let w_out = params.weights.w_out.data_mut();
    for t in pools.good {
        w_out[t as usize] = strength;
    }
    for t in pools.bad {
        w_out[t as usize] = -strength;
    }
    Ok(params)
}
