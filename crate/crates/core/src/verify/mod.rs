//! Executable checks: Monte-Carlo variance and loss-bound claims, gradient
//! agreement, the critical/non-critical KL split, weight histograms, the
//! weight-correctness correlation, diversity metrics and training sweeps.

mod analysis;
mod diversity;
mod gradcheck;
mod kl;
mod sweeps;
mod theory;

use serde::{Deserialize, Serialize};

pub use analysis::{
    conditional_histograms, corpus_weights, critical_filler_ratio, histogram, histogram_csv, pearson, pearson_weight_accuracy, stochastically_dominates,
    top_k_mean, weight_histogram, HistogramBin, PearsonOutcome, WeightSample,
};
pub use diversity::{bleu4, distinct_n, diversity_metrics, unigram_entropy, DiversityMetrics};
pub use gradcheck::{
    check_gradients, closed_form_gradient, finite_difference_gradient, grad_check_case, grad_check_config, max_relative_error,
    GradientCheck,
};
pub use kl::{kl_split, verify_theorem3_kl_split, KlSplit};
pub use sweeps::{
    ablation, lambda_stability_report, lambda_sweep, noise_sweep, sample_generations, AblationRow, LambdaRow,
    NoiseSweep, NoiseSweepRow,
};
pub use theory::{
    estimate_theorem2, estimate_variances, theorem2_replications, verify_lemma1, verify_theorem2, NoiseModelSpec,
    Theorem2Estimate, VarianceEstimate,
};

/// Outcome of one check. Equality checks pass when
/// `|observed - expected| <= tolerance`; ordering checks compare `observed`
/// against the bound held in `expected`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub name: String,
    pub observed: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl VerifyReport {
    pub fn equality(name: impl Into<String>, observed: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            observed,
            expected,
            tolerance,
            passed: (observed - expected).abs() <= tolerance,
            note: None,
        }
    }

    /// `observed < bound`.
    pub fn less_than(name: impl Into<String>, observed: f64, bound: f64) -> Self {
        Self::ordering(name, observed, bound, observed < bound)
    }

    /// `observed <= bound`.
    pub fn at_most(name: impl Into<String>, observed: f64, bound: f64) -> Self {
        Self::ordering(name, observed, bound, observed <= bound)
    }

    /// `observed >= bound`.
    pub fn at_least(name: impl Into<String>, observed: f64, bound: f64) -> Self {
        Self::ordering(name, observed, bound, observed >= bound)
    }

    fn ordering(name: impl Into<String>, observed: f64, bound: f64, passed: bool) -> Self {
        Self {
            name: name.into(),
            observed,
            expected: bound,
            tolerance: 0.0,
            passed,
            note: None,
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}
