//! Weight distributions over a corpus and their correlation with
//! preference correctness.

use serde::{Deserialize, Serialize};

use crate::attribution::{response_weights, PriorKind};
use crate::datagen::PreferenceTriple;
use crate::error::{Error, Result};
use crate::losses::weighted_reward_difference;
use crate::microlm::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
    pub frequency: f64,
}

/// Equal-width bins over `[0, 1]`; the last bin is closed on the right.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let total = values.len().max(1) as f64;
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_low: i as f64 / bins as f64,
            bin_high: (i + 1) as f64 / bins as f64,
            count,
            frequency: count as f64 / total,
        })
        .collect()
}

pub fn histogram_csv(bins: &[HistogramBin]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for b in bins {
        w.serialize(b).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// True when the cumulative distribution of `upper` never exceeds that of
/// `lower`, i.e. `upper` puts its mass in higher bins.
pub fn stochastically_dominates(upper: &[HistogramBin], lower: &[HistogramBin]) -> bool {
    let (mut cu, mut cl) = (0.0, 0.0);
    for (u, l) in upper.iter().zip(lower) {
        cu += u.frequency;
        cl += l.frequency;
        if cu > cl + 1e-12 {
            return false;
        }
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSample {
    pub weight: f64,
    pub critical: bool,
}

/// Mixed weights of every response token in the corpus.
pub fn corpus_weights(params: &ModelParams, corpus: &[PreferenceTriple], lambda: f64) -> Result<Vec<WeightSample>> {
    let mut out = Vec::new();
    for t in corpus {
        for (y, critical) in [(&t.y_w, &t.critical_w), (&t.y_l, &t.critical_l)] {
            let w = response_weights(params, &t.x, y, lambda, PriorKind::Gaussian)?;
            out.extend(w.mixed.iter().enumerate().map(|(p, &weight)| WeightSample {
                weight,
                critical: critical.contains(&p),
            }));
        }
    }
    Ok(out)
}

/// Mean weight on critical positions over mean weight on filler positions.
pub fn critical_filler_ratio(samples: &[WeightSample]) -> Result<f64> {
    let mean = |critical: bool| {
        let v: Vec<f64> = samples.iter().filter(|s| s.critical == critical).map(|s| s.weight).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    match (mean(true), mean(false)) {
        (Some(c), Some(f)) if f > 0.0 => Ok(c / f),
        _ => Err(Error::DegenerateVariance("need critical and non-zero filler weights")),
    }
}

/// Separate histograms of critical and filler weights, as `(critical, filler)`.
pub fn conditional_histograms(samples: &[WeightSample], bins: usize) -> (Vec<HistogramBin>, Vec<HistogramBin>) {
    let pick = |critical: bool| -> Vec<f64> {
        samples.iter().filter(|s| s.critical == critical).map(|s| s.weight).collect()
    };
    (histogram(&pick(true), bins), histogram(&pick(false), bins))
}

pub fn weight_histogram(
    params: &ModelParams,
    corpus: &[PreferenceTriple],
    lambda: f64,
    bins: usize,
) -> Result<Vec<HistogramBin>> {
    let w: Vec<f64> = corpus_weights(params, corpus, lambda)?.iter().map(|s| s.weight).collect();
    Ok(histogram(&w, bins))
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::TooFewSamples { got: xs.len(), min: 2 });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateVariance("weight column is constant"));
    }
    if syy == 0.0 {
        return Err(Error::DegenerateVariance("correctness column is constant"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean of the `k` largest values (all of them when fewer than `k`).
pub fn top_k_mean(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = k.clamp(1, v.len().max(1));
    v.iter().take(k).sum::<f64>() / k as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonOutcome {
    pub r: f64,
    pub top_k_means: Vec<f64>,
    pub correct: Vec<bool>,
}

/// Per triple: mean of the top-`k` mixed weights of the preferred response
/// against the bit `Δr_token > 0` under the same mixed weights.
pub fn pearson_weight_accuracy(
    params: &ModelParams,
    reference: &ModelParams,
    corpus: &[PreferenceTriple],
    lambda: f64,
    top_k: usize,
) -> Result<PearsonOutcome> {
    if corpus.len() < 2 {
        return Err(Error::TooFewSamples {
            got: corpus.len(),
            min: 2,
        });
    }
    let mut top_k_means = Vec::with_capacity(corpus.len());
    let mut correct = Vec::with_capacity(corpus.len());
    for t in corpus {
        let ww = response_weights(params, &t.x, &t.y_w, lambda, PriorKind::Gaussian)?;
        let wl = response_weights(params, &t.x, &t.y_l, lambda, PriorKind::Gaussian)?;
        let rw = params.response_log_ratios(reference, &t.x, &t.y_w)?;
        let rl = params.response_log_ratios(reference, &t.x, &t.y_l)?;
        let delta = weighted_reward_difference(&rw, &rl, &ww.mixed, &wl.mixed)?;
        top_k_means.push(top_k_mean(&ww.mixed, top_k));
        correct.push(delta > 0.0);
    }
    let bits: Vec<f64> = correct.iter().map(|&c| f64::from(u8::from(c))).collect();
    let r = pearson(&top_k_means, &bits)?;
    Ok(PearsonOutcome {
        r,
        top_k_means,
        correct,
    })
}
