//! Training sweeps: label noise, the mixing coefficient and the ablation
//! variants, plus sampling helpers for diversity comparisons.

use serde::{Deserialize, Serialize};

use super::VerifyReport;
use crate::datagen::{generate_corpus, CorpusSpec, PreferenceTriple};
use crate::error::{Error, Result};
use crate::losses::{derive_seed, LossConfig, Variant};
use crate::microlm::{ModelParams, SequenceState};
use crate::sequence::TokenSequence;
use crate::trainer::{evaluate, train_from, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepRow {
    pub rate: f64,
    pub dpo_accuracy: f64,
    pub tidpo_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweep {
    pub rows: Vec<NoiseSweepRow>,
}

impl NoiseSweep {
    /// Accuracy lost between the lowest and the highest noise rate, as
    /// `(dpo, tidpo)`.
    pub fn degradation(&self) -> Option<(f64, f64)> {
        let lo = self.rows.iter().min_by(|a, b| a.rate.total_cmp(&b.rate))?;
        let hi = self.rows.iter().max_by(|a, b| a.rate.total_cmp(&b.rate))?;
        Some((lo.dpo_accuracy - hi.dpo_accuracy, lo.tidpo_accuracy - hi.tidpo_accuracy))
    }

    pub fn report(&self) -> Option<VerifyReport> {
        let (dpo, ti) = self.degradation()?;
        Some(
            VerifyReport::less_than("noise.degradation", ti, dpo)
                .with_note(format!("degradation dpo={dpo:.4} tidpo={ti:.4}")),
        )
    }
}

/// Trains DPO and TI-DPO on noise-injected copies of one base corpus and
/// measures accuracy on the clean `eval_set`.
pub fn noise_sweep(
    rates: &[f64],
    cfg: &TrainConfig,
    corpus_spec: &CorpusSpec,
    eval_set: &[PreferenceTriple],
    reference: &ModelParams,
) -> Result<NoiseSweep> {
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        let corpus = generate_corpus(&CorpusSpec {
            noise_rate: rate,
            ..*corpus_spec
        })?;
        let mut acc = [0.0; 2];
        for (slot, variant) in [Variant::Dpo, Variant::TiDpo].into_iter().enumerate() {
            let run = TrainConfig {
                loss: LossConfig { variant, ..cfg.loss },
                checkpoint_dir: None,
                curve_points: 0,
                ..cfg.clone()
            };
            let out = train_from(&run, &corpus, &[], reference)?;
            acc[slot] = evaluate(&out.params, reference, eval_set)?;
        }
        rows.push(NoiseSweepRow {
            rate,
            dpo_accuracy: acc[0],
            tidpo_accuracy: acc[1],
        });
    }
    Ok(NoiseSweep { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub accuracy: f64,
    pub final_loss: f64,
}

pub fn lambda_sweep(
    lambdas: &[f64],
    cfg: &TrainConfig,
    corpus: &[PreferenceTriple],
    eval_set: &[PreferenceTriple],
    reference: &ModelParams,
) -> Result<Vec<LambdaRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let run = TrainConfig {
                loss: LossConfig {
                    lambda,
                    variant: Variant::TiDpo,
                    ..cfg.loss
                },
                checkpoint_dir: None,
                curve_points: 0,
                ..cfg.clone()
            };
            let out = train_from(&run, corpus, &[], reference)?;
            Ok(LambdaRow {
                lambda,
                accuracy: evaluate(&out.params, reference, eval_set)?,
                final_loss: out.log.last().map_or(f64::NAN, |r| r.l_total),
            })
        })
        .collect()
}

/// Worst accuracy gap to the best λ among rows with `lo <= λ <= hi`.
pub fn lambda_stability_report(rows: &[LambdaRow], lo: f64, hi: f64, tolerance: f64) -> Result<VerifyReport> {
    let best = rows
        .iter()
        .map(|r| r.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let band: Vec<_> = rows.iter().filter(|r| (lo..=hi).contains(&r.lambda)).collect();
    if band.is_empty() {
        return Err(Error::InvalidArgument(format!("no lambda in [{lo}, {hi}]")));
    }
    let worst = band.iter().map(|r| best - r.accuracy).fold(0.0, f64::max);
    Ok(VerifyReport::at_most("sweep.lambda_band_gap", worst, tolerance)
        .with_note(format!("best accuracy {best:.4}; band [{lo}, {hi}]")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub accuracy: f64,
    pub final_loss: f64,
}

pub fn ablation(
    variants: &[Variant],
    cfg: &TrainConfig,
    corpus: &[PreferenceTriple],
    eval_set: &[PreferenceTriple],
    reference: &ModelParams,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let run = TrainConfig {
                loss: LossConfig { variant, ..cfg.loss },
                checkpoint_dir: None,
                curve_points: 0,
                ..cfg.clone()
            };
            let out = train_from(&run, corpus, &[], reference)?;
            Ok(AblationRow {
                variant,
                accuracy: evaluate(&out.params, reference, eval_set)?,
                final_loss: out.log.last().map_or(f64::NAN, |r| r.l_total),
            })
        })
        .collect()
}

/// One sampled continuation per prompt, prompt `i` seeded by
/// `derive_seed(seed, i)`.
pub fn sample_generations(
    params: &ModelParams,
    prompts: &[TokenSequence],
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let state = SequenceState::prompt_only(p.clone());
            params.sample(&state, max_new, temperature, derive_seed(seed, i as u64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microlm::ModelConfig;

    #[test]
    fn degradation_uses_extreme_rates() {
        let s = NoiseSweep {
            rows: vec![
                NoiseSweepRow { rate: 0.4, dpo_accuracy: 0.6, tidpo_accuracy: 0.8 },
                NoiseSweepRow { rate: 0.0, dpo_accuracy: 0.9, tidpo_accuracy: 0.9 },
                NoiseSweepRow { rate: 0.1, dpo_accuracy: 0.1, tidpo_accuracy: 0.1 },
            ],
        };
        let (d, t) = s.degradation().unwrap();
        assert!((d - 0.3).abs() < 1e-12 && (t - 0.1).abs() < 1e-12);
        assert!(s.report().unwrap().passed);
    }

    #[test]
    fn lambda_band() {
        let rows: Vec<LambdaRow> = [(0.0, 0.8), (0.3, 0.95), (0.5, 0.96), (0.7, 0.94), (1.0, 0.97)]
            .iter()
            .map(|&(lambda, accuracy)| LambdaRow { lambda, accuracy, final_loss: 0.0 })
            .collect();
        let r = lambda_stability_report(&rows, 0.3, 0.7, 0.02).unwrap();
        assert!((r.observed - 0.03).abs() < 1e-12);
        assert!(!r.passed);
        assert!(lambda_stability_report(&rows, 0.31, 0.49, 0.02).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let cfg = ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 32,
            seed: 1,
        };
        let p = ModelParams::init_with_std(cfg, 0.5).unwrap();
        let prompts = vec![TokenSequence::new(vec![1, 20]); 3];
        let a = sample_generations(&p, &prompts, 6, 1.0, 4).unwrap();
        assert_eq!(a, sample_generations(&p, &prompts, 6, 1.0, 4).unwrap());
        assert_ne!(a[0], a[1]);
    }
}
