//! Monte-Carlo checks on the noise model: non-critical tokens contribute
//! i.i.d. zero-mean noise `ε_t ~ N(0, σ²)` to the reward, scaled by `w_t`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::VerifyReport;
use crate::autodiff::{log_sigmoid, sigmoid};
use crate::error::{Error, Result};
use crate::losses::derive_seed;

pub const MIN_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelSpec {
    pub n_noncritical: usize,
    pub sigma_eps: f64,
    pub weights: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl NoiseModelSpec {
    pub fn constant(n_noncritical: usize, sigma_eps: f64, weight: f64, n_samples: usize, seed: u64) -> Self {
        Self {
            n_noncritical,
            sigma_eps,
            weights: vec![weight; n_noncritical],
            n_samples,
            seed,
        }
    }

    /// Weights drawn i.i.d. from `U[0, 1]` with `derive_seed(seed, 0)`.
    pub fn uniform(n_noncritical: usize, sigma_eps: f64, n_samples: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        let u = Uniform::new_inclusive(0.0, 1.0).expect("valid range");
        Self {
            n_noncritical,
            sigma_eps,
            weights: (0..n_noncritical).map(|_| u.sample(&mut rng)).collect(),
            n_samples,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.n_noncritical {
            return Err(Error::LengthMismatch {
                expected: self.n_noncritical,
                got: self.weights.len(),
            });
        }
        if self.n_noncritical == 0 {
            return Err(Error::InvalidArgument("n_noncritical must be positive".into()));
        }
        if !(self.sigma_eps > 0.0 && self.sigma_eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_eps must be positive, got {}",
                self.sigma_eps
            )));
        }
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidArgument("weights must lie in [0, 1]".into()));
        }
        if self.n_samples < MIN_SAMPLES {
            return Err(Error::TooFewSamples {
                got: self.n_samples,
                min: MIN_SAMPLES,
            });
        }
        Ok(())
    }

    fn sum_sq_weights(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }

    /// Draws `(Σ ε_t, Σ w_t ε_t)` pairs sharing the same noise.
    fn draw_sums(&self) -> Vec<(f64, f64)> {
        let normal = Normal::new(0.0, self.sigma_eps).expect("validated sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_samples)
            .map(|_| {
                let mut plain = 0.0;
                let mut weighted = 0.0;
                for w in &self.weights {
                    let e = normal.sample(&mut rng);
                    plain += e;
                    weighted += w * e;
                }
                (plain, weighted)
            })
            .collect()
    }
}

fn sample_variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub var_dpo: f64,
    pub var_ti: f64,
    pub theory_dpo: f64,
    pub theory_ti: f64,
}

pub fn estimate_variances(spec: &NoiseModelSpec) -> Result<VarianceEstimate> {
    spec.validate()?;
    let sums = spec.draw_sums();
    let s2 = spec.sigma_eps * spec.sigma_eps;
    Ok(VarianceEstimate {
        var_dpo: sample_variance(sums.iter().map(|s| s.0)),
        var_ti: sample_variance(sums.iter().map(|s| s.1)),
        theory_dpo: spec.n_noncritical as f64 * s2,
        theory_ti: s2 * spec.sum_sq_weights(),
    })
}

/// Empirical variance ratio against `Σw²/|N|` (5% relative tolerance) and
/// the ordering of the two variances.
pub fn verify_lemma1(spec: &NoiseModelSpec) -> Result<Vec<VerifyReport>> {
    let est = estimate_variances(spec)?;
    let expected_ratio = spec.sum_sq_weights() / spec.n_noncritical as f64;
    let ratio = if expected_ratio > 0.0 {
        VerifyReport::equality(
            "lemma1.variance_ratio",
            est.var_ti / est.var_dpo,
            expected_ratio,
            0.05 * expected_ratio,
        )
    } else {
        VerifyReport::equality("lemma1.variance_ratio", est.var_ti, 0.0, 1e-12)
            .with_note("all weights zero; weighted variance must vanish")
    };
    let ordering = if spec.weights.iter().any(|w| *w < 1.0) {
        VerifyReport::less_than("lemma1.strict_ordering", est.var_ti, est.var_dpo)
    } else {
        VerifyReport::equality("lemma1.ordering_nonstrict", est.var_ti / est.var_dpo, 1.0, 0.03)
            .with_note("all weights one; variances coincide")
    };
    Ok(vec![ratio, ordering])
}

/// Curvature of `R ↦ −log σ(βR)`.
pub fn loss_curvature(beta: f64, r: f64) -> f64 {
    let s = sigmoid(beta * r);
    beta * beta * s * (1.0 - s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Estimate {
    pub loss_dpo: f64,
    pub loss_ti: f64,
    pub kappa_hat: f64,
    pub delta_sigma2: f64,
}

impl Theorem2Estimate {
    /// `E[L_DPO] − ½ κ̂ Δσ² (1 − slack)`.
    pub fn bound(&self, slack: f64) -> f64 {
        self.loss_dpo - 0.5 * self.kappa_hat * self.delta_sigma2 * (1.0 - slack)
    }
}

/// Expected `−log σ(βR)` for `R = μ + noise` under both estimators, the
/// sampled minimum curvature and the theoretical variance gap.
pub fn estimate_theorem2(spec: &NoiseModelSpec, mu: f64, beta: f64) -> Result<Theorem2Estimate> {
    spec.validate()?;
    if !(beta > 0.0 && beta.is_finite() && mu.is_finite()) {
        return Err(Error::InvalidArgument("beta must be positive and mu finite".into()));
    }
    let sums = spec.draw_sums();
    let n = sums.len() as f64;
    let mut loss_dpo = 0.0;
    let mut loss_ti = 0.0;
    let mut kappa_hat = f64::INFINITY;
    for (plain, weighted) in sums {
        let (rd, rt) = (mu + plain, mu + weighted);
        loss_dpo -= log_sigmoid(beta * rd);
        loss_ti -= log_sigmoid(beta * rt);
        kappa_hat = kappa_hat.min(loss_curvature(beta, rd)).min(loss_curvature(beta, rt));
    }
    let s2 = spec.sigma_eps * spec.sigma_eps;
    Ok(Theorem2Estimate {
        loss_dpo: loss_dpo / n,
        loss_ti: loss_ti / n,
        kappa_hat,
        delta_sigma2: s2 * (spec.n_noncritical as f64 - spec.sum_sq_weights()),
    })
}

pub fn verify_theorem2(spec: &NoiseModelSpec, mu: f64, beta: f64, slack: f64) -> Result<VerifyReport> {
    let est = estimate_theorem2(spec, mu, beta)?;
    Ok(VerifyReport::at_most("theorem2.bound", est.loss_ti, est.bound(slack)).with_note(format!(
        "E[L_DPO]={:.6} kappa_hat={:.3e} delta_sigma2={:.4}",
        est.loss_dpo, est.kappa_hat, est.delta_sigma2
    )))
}

/// Fraction of `reps` independently seeded replications in which the bound
/// holds, required to reach `required`.
pub fn theorem2_replications(
    spec: &NoiseModelSpec,
    mu: f64,
    beta: f64,
    slack: f64,
    reps: usize,
    required: f64,
) -> Result<VerifyReport> {
    let mut held = 0;
    for r in 0..reps {
        let rep = NoiseModelSpec {
            seed: derive_seed(spec.seed, r as u64),
            ..spec.clone()
        };
        if verify_theorem2(&rep, mu, beta, slack)?.passed {
            held += 1;
        }
    }
    let frac = held as f64 / reps.max(1) as f64;
    Ok(VerifyReport::at_least("theorem2.replications", frac, required)
        .with_note(format!("{held}/{reps} replications satisfy the bound")))
}
