//! Per-position `KL(π_θ ‖ π_ref)` on corpus states, split by whether the
//! position is a planted critical token.

use serde::{Deserialize, Serialize};

use super::VerifyReport;
use crate::datagen::PreferenceTriple;
use crate::error::{Error, Result};
use crate::microlm::NextTokenModel;

/// Mean per-triple KL mass on critical and non-critical positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KlSplit {
    pub critical: f64,
    pub noncritical: f64,
}

impl KlSplit {
    pub fn total(&self) -> f64 {
        self.critical + self.noncritical
    }

    pub fn noncritical_share(&self) -> f64 {
        let t = self.total();
        if t > 0.0 {
            self.noncritical / t
        } else {
            0.0
        }
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(lp, lq)| if lp.is_finite() { lp.exp() * (lp - lq) } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

/// States are `x ⊕ y[..t]` for both responses of every triple.
pub fn kl_split<P: NextTokenModel + ?Sized, R: NextTokenModel + ?Sized>(
    policy: &P,
    reference: &R,
    corpus: &[PreferenceTriple],
) -> Result<KlSplit> {
    let mut split = KlSplit::default();
    for t in corpus {
        for (y, critical) in [(&t.y_w, &t.critical_w), (&t.y_l, &t.critical_l)] {
            let p = policy.step_logprobs(&t.x, y)?;
            let q = reference.step_logprobs(&t.x, y)?;
            for (pos, (pp, qq)) in p.iter().zip(&q).enumerate() {
                let k = kl(pp, qq);
                if critical.contains(&pos) {
                    split.critical += k;
                } else {
                    split.noncritical += k;
                }
            }
        }
    }
    let n = corpus.len().max(1) as f64;
    split.critical /= n;
    split.noncritical /= n;
    Ok(split)
}

/// Directional check that the weighted objective spends less KL on
/// non-critical positions than unweighted DPO.
pub fn verify_theorem3_kl_split<A, B, R>(
    trained_tidpo: &A,
    trained_dpo: &B,
    reference: &R,
    corpus: &[PreferenceTriple],
) -> Result<(KlSplit, KlSplit, VerifyReport)>
where
    A: NextTokenModel + ?Sized,
    B: NextTokenModel + ?Sized,
    R: NextTokenModel + ?Sized,
{
    let ti = kl_split(trained_tidpo, reference, corpus)?;
    let dpo = kl_split(trained_dpo, reference, corpus)?;
    if ti.total() == 0.0 || dpo.total() == 0.0 {
        return Err(Error::UntrainedInput);
    }
    let report = VerifyReport::less_than("theorem3.kl_noncritical", ti.noncritical, dpo.noncritical).with_note(
        format!(
            "K_C tidpo={:.6} dpo={:.6}; K_N share tidpo={:.4} dpo={:.4}",
            ti.critical,
            dpo.critical,
            ti.noncritical_share(),
            dpo.noncritical_share()
        ),
    );
    Ok((ti, dpo, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusSpec};
    use crate::microlm::{ModelConfig, ModelParams};
    use crate::sequence::TokenId;

    /// Reference distributions everywhere except at the planted positions of
    /// the triples it was built from, where the mass is reshaped.
    struct CriticalOnly<'a> {
        base: &'a ModelParams,
        corpus: &'a [PreferenceTriple],
    }

    impl NextTokenModel for CriticalOnly<'_> {
        fn step_logprobs(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<Vec<f64>>> {
            let mut out = self.base.step_logprobs(prompt, response)?;
            let critical = self
                .corpus
                .iter()
                .find_map(|t| {
                    if t.x.tokens() != prompt {
                        None
                    } else if t.y_w.tokens() == response {
                        Some(&t.critical_w)
                    } else if t.y_l.tokens() == response {
                        Some(&t.critical_l)
                    } else {
                        None
                    }
                })
                .expect("state from the corpus");
            for &p in critical {
                let v = out[p].len() as f64;
                out[p].iter_mut().for_each(|lp| *lp = -v.ln());
            }
            Ok(out)
        }
    }

    fn setup() -> (ModelParams, Vec<PreferenceTriple>) {
        let cfg = ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 32,
            seed: 1,
        };
        let corpus = generate_corpus(&CorpusSpec {
            n_triples: 5,
            prompt_len: 3,
            response_len: 8,
            vocab_size: 32,
            ..CorpusSpec::default()
        })
        .unwrap();
        (ModelParams::init_with_std(cfg, 0.5).unwrap(), corpus)
    }

    #[test]
    fn untrained_models_are_rejected() {
        let (reference, corpus) = setup();
        let s = kl_split(&reference, &reference, &corpus).unwrap();
        assert_eq!(s.total(), 0.0);
        assert!(matches!(
            verify_theorem3_kl_split(&reference, &reference, &reference, &corpus),
            Err(Error::UntrainedInput)
        ));
    }

    #[test]
    fn critical_only_change_has_no_noncritical_kl() {
        let (reference, corpus) = setup();
        let altered = CriticalOnly {
            base: &reference,
            corpus: &corpus,
        };
        let s = kl_split(&altered, &reference, &corpus).unwrap();
        assert_eq!(s.noncritical, 0.0);
        assert!(s.critical > 0.0);
        assert_eq!(s.noncritical_share(), 0.0);
    }

    #[test]
    fn directional_report() {
        let (reference, corpus) = setup();
        let altered = CriticalOnly {
            base: &reference,
            corpus: &corpus,
        };
        let other = ModelParams::init_with_std(ModelConfig { seed: 9, ..reference.config }, 0.5).unwrap();
        let (ti, dpo, report) = verify_theorem3_kl_split(&altered, &other, &reference, &corpus).unwrap();
        assert!(report.passed);
        assert_eq!(ti.noncritical, 0.0);
        assert!(dpo.noncritical > 0.0);
    }
}
