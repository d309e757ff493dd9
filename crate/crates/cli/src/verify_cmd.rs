//! `verify` subcommands. Each prints one line per check, optionally writes
//! the report list as JSON plus a CSV of the underlying measurements, and
//! fails the process when a check fails.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use serde::Serialize;
use tidpo_core::datagen::{generate_corpus, CorpusSpec, PreferenceTriple};
use tidpo_core::losses::{derive_seed, LossConfig, Variant};
use tidpo_core::microlm::ModelParams;
use tidpo_core::verify::{
    check_gradients, conditional_histograms, corpus_weights, critical_filler_ratio, diversity_metrics,
    grad_check_case, histogram, histogram_csv, noise_sweep, pearson_weight_accuracy, sample_generations,
    stochastically_dominates, theorem2_replications, verify_lemma1, verify_theorem2, verify_theorem3_kl_split,
    DiversityMetrics, NoiseModelSpec, VerifyReport,
};
use tidpo_core::{Error as CoreError, TokenSequence};

use crate::{emit_reports, load_checkpoint, load_corpus, write_text, Outcome, TrainFlags};

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Variance reduction of weighted noise sums.
    Lemma1(Lemma1Args),
    /// Expected-loss bound under reduced reward variance.
    Theorem2(Theorem2Args),
    /// KL spent on non-critical positions by trained models.
    Theorem3(Theorem3Args),
    /// Autodiff, closed-form and finite-difference gradient agreement.
    Grads(GradsArgs),
    /// Histogram of mixed weights over a corpus.
    Hist(HistArgs),
    /// Correlation between top-k weights and preference correctness.
    Pearson(PearsonArgs),
    /// Self-BLEU, Distinct-n and entropy of sampled generations.
    Diversity(DiversityArgs),
    /// Accuracy of DPO and TI-DPO under increasing label noise.
    NoiseSweep(NoiseSweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutputFlags {
    /// JSON report list.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV of the underlying measurements.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Lemma1Args {
    #[arg(long, default_value_t = 10)]
    pub n_noncritical: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputFlags,
}

#[derive(Debug, Args)]
pub struct Theorem2Args {
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 10)]
    pub n_noncritical: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub weight: f64,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Fraction of the curvature term that may be given up.
    #[arg(long, default_value_t = 0.1)]
    pub slack: f64,
    /// Required fraction of replications satisfying the bound.
    #[arg(long, default_value_t = 0.99)]
    pub required: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputFlags,
}

#[derive(Debug, Args)]
pub struct ModelPair {
    #[arg(long)]
    pub tidpo: PathBuf,
    #[arg(long)]
    pub dpo: PathBuf,
    /// Reference checkpoint; defaults to re-initializing from the policy config.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Theorem3Args {
    #[command(flatten)]
    pub models: ModelPair,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub output: OutputFlags,
}

#[derive(Debug, Args)]
pub struct GradsArgs {
    #[arg(long, default_value_t = 8)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[command(flatten)]
    pub output: OutputFlags,
}

#[derive(Debug, Args)]
pub struct HistArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub lambda: f64,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Smallest acceptable critical/filler mean-weight ratio.
    #[arg(long, default_value_t = 1.5)]
    pub min_ratio: f64,
    #[command(flatten)]
    pub output: OutputFlags,
}

#[derive(Debug, Args)]
pub struct PearsonArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub lambda: f64,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[command(flatten)]
    pub output: OutputFlags,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    #[command(flatten)]
    pub models: ModelPair,
    /// Corpus whose prompts seed the generations, reused cyclically.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 12)]
    pub max_new: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputFlags,
}

#[derive(Debug, Args)]
pub struct NoiseSweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.4")]
    pub rates: Vec<f64>,
    /// Training corpus size per rate.
    #[arg(long, default_value_t = 128)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 12)]
    pub resp_len: usize,
    #[arg(long, default_value_t = 2)]
    pub n_critical: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Size of the clean held-out evaluation corpus.
    #[arg(long, default_value_t = 256)]
    pub eval_n: usize,
    #[arg(long, default_value_t = 1_000_003)]
    pub eval_seed: u64,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub output: OutputFlags,
}

pub(crate) fn run(cmd: &VerifyCommand) -> Result<Outcome> {
    match cmd {
        VerifyCommand::Lemma1(a) => lemma1(a),
        VerifyCommand::Theorem2(a) => theorem2(a),
        VerifyCommand::Theorem3(a) => theorem3(a),
        VerifyCommand::Grads(a) => grads(a),
        VerifyCommand::Hist(a) => hist(a),
        VerifyCommand::Pearson(a) => pearson(a),
        VerifyCommand::Diversity(a) => diversity(a),
        VerifyCommand::NoiseSweep(a) => noise(a),
    }
}

fn finish(reports: &[VerifyReport], output: &OutputFlags, csv: Option<String>) -> Result<Outcome> {
    if let (Some(path), Some(text)) = (&output.csv, csv) {
        write_text(path, &text)?;
    }
    emit_reports(reports, output.out.as_deref())
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn tagged(mut r: VerifyReport, tag: &str) -> VerifyReport {
    r.name = format!("{}[{tag}]", r.name);
    r
}

fn reference_for(policy: &ModelParams, explicit: Option<&Path>) -> Result<ModelParams> {
    match explicit {
        Some(p) => load_checkpoint(p),
        None => Ok(ModelParams::init(policy.config)?),
    }
}

fn lemma1(a: &Lemma1Args) -> Result<Outcome> {
    let specs = [
        ("w=1", NoiseModelSpec::constant(a.n_noncritical, a.sigma, 1.0, a.samples, a.seed)),
        ("w=0.5", NoiseModelSpec::constant(a.n_noncritical, a.sigma, 0.5, a.samples, a.seed)),
        ("w~U[0,1]", NoiseModelSpec::uniform(a.n_noncritical, a.sigma, a.samples, a.seed)),
    ];
    let mut reports = Vec::new();
    for (tag, spec) in &specs {
        reports.extend(verify_lemma1(spec)?.into_iter().map(|r| tagged(r, tag)));
    }
    finish(&reports, &a.output, None)
}

fn theorem2(a: &Theorem2Args) -> Result<Outcome> {
    let spec = NoiseModelSpec::constant(a.n_noncritical, a.sigma, a.weight, a.samples, a.seed);
    let reports = vec![
        verify_theorem2(&spec, a.mu, a.beta, a.slack)?,
        theorem2_replications(&spec, a.mu, a.beta, a.slack, a.reps, a.required)?,
    ];
    finish(&reports, &a.output, None)
}

fn load_pair(models: &ModelPair) -> Result<(ModelParams, ModelParams, ModelParams)> {
    let ti = load_checkpoint(&models.tidpo)?;
    let dpo = load_checkpoint(&models.dpo)?;
    ti.ensure_same_config(&dpo).context("tidpo and dpo checkpoints disagree")?;
    let reference = reference_for(&ti, models.reference.as_deref())?;
    Ok((ti, dpo, reference))
}

fn theorem3(a: &Theorem3Args) -> Result<Outcome> {
    let (ti, dpo, reference) = load_pair(&a.models)?;
    let corpus = load_corpus(&a.data, reference.config.vocab_size)?;
    let (k_ti, k_dpo, report) = verify_theorem3_kl_split(&ti, &dpo, &reference, &corpus)?;
    #[derive(Serialize)]
    struct Row {
        model: &'static str,
        critical: f64,
        noncritical: f64,
        noncritical_share: f64,
    }
    let csv = to_csv([("tidpo", k_ti), ("dpo", k_dpo)].map(|(model, k)| Row {
        model,
        critical: k.critical,
        noncritical: k.noncritical,
        noncritical_share: k.noncritical_share(),
    }))?;
    finish(&[report], &a.output, Some(csv))
}

fn grads(a: &GradsArgs) -> Result<Outcome> {
    let cfg = LossConfig {
        gamma: a.gamma,
        ..LossConfig::default()
    };
    #[derive(Serialize)]
    struct Row {
        seed: u64,
        n_params: usize,
        loss: f64,
        autodiff_vs_fd: f64,
        autodiff_vs_closed_form: f64,
        closed_form_vs_fd: f64,
    }
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for seed in a.first_seed..a.first_seed + a.seeds {
        let (policy, reference, batch) = grad_check_case(seed)?;
        let check = check_gradients(&policy, &reference, &batch, &cfg, seed)?;
        reports.extend(check.reports().into_iter().map(|r| tagged(r, &format!("seed={seed}"))));
        rows.push(Row {
            seed,
            n_params: check.n_params,
            loss: check.loss,
            autodiff_vs_fd: check.autodiff_vs_fd,
            autodiff_vs_closed_form: check.autodiff_vs_closed_form,
            closed_form_vs_fd: check.closed_form_vs_fd,
        });
    }
    finish(&reports, &a.output, Some(to_csv(rows)?))
}

fn hist(a: &HistArgs) -> Result<Outcome> {
    let params = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.data, params.config.vocab_size)?;
    let samples = corpus_weights(&params, &corpus, a.lambda)?;
    let all: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let bins = histogram(&all, a.bins);
    let (critical, filler) = conditional_histograms(&samples, a.bins);
    let dominates = stochastically_dominates(&critical, &filler);
    let total: f64 = bins.iter().map(|b| b.frequency).sum();
    let reports = vec![
        VerifyReport::equality("hist.frequency_sum", total, 1.0, 1e-9),
        VerifyReport::at_least("hist.critical_dominates_filler", f64::from(u8::from(dominates)), 1.0),
        VerifyReport::at_least("hist.critical_filler_ratio", critical_filler_ratio(&samples)?, a.min_ratio),
    ];
    finish(&reports, &a.output, Some(histogram_csv(&bins)?))
}

fn pearson(a: &PearsonArgs) -> Result<Outcome> {
    let params = load_checkpoint(&a.checkpoint)?;
    let reference = reference_for(&params, a.reference.as_deref())?;
    let corpus = load_corpus(&a.data, params.config.vocab_size)?;
    let out = match pearson_weight_accuracy(&params, &reference, &corpus, a.lambda, a.top_k) {
        Ok(out) => out,
        Err(CoreError::DegenerateVariance(why)) => {
            let report = VerifyReport::at_most("pearson.r_in_range", f64::NAN, 1.0)
                .with_note(format!("r undefined: {why}"));
            return finish(&[report], &a.output, None);
        }
        Err(e) => return Err(e.into()),
    };
    let accuracy = out.correct.iter().filter(|&&c| c).count() as f64 / out.correct.len() as f64;
    let report = VerifyReport::at_most("pearson.r_in_range", out.r.abs(), 1.0)
        .with_note(format!("r={:.6}; accuracy under mixed weights {accuracy:.4}", out.r));
    #[derive(Serialize)]
    struct Row {
        triple: usize,
        top_k_mean: f64,
        correct: u8,
    }
    let csv = to_csv(out.top_k_means.iter().zip(&out.correct).enumerate().map(|(triple, (&m, &c))| Row {
        triple,
        top_k_mean: m,
        correct: u8::from(c),
    }))?;
    finish(&[report], &a.output, Some(csv))
}

/// Continuations of `samples` prompts taken cyclically from `corpus`.
pub fn generate(
    params: &ModelParams,
    corpus: &[PreferenceTriple],
    samples: usize,
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    anyhow::ensure!(!corpus.is_empty(), "prompt corpus is empty");
    let prompts: Vec<TokenSequence> = (0..samples).map(|i| corpus[i % corpus.len()].x.clone()).collect();
    Ok(sample_generations(params, &prompts, max_new, temperature, seed)?)
}

fn diversity(a: &DiversityArgs) -> Result<Outcome> {
    let (ti, dpo, _) = load_pair(&a.models)?;
    let corpus = load_corpus(&a.data, ti.config.vocab_size)?;
    let seed = derive_seed(a.seed, 0);
    let m_ti = diversity_metrics(&generate(&ti, &corpus, a.samples, a.max_new, a.temperature, seed)?)?;
    let m_dpo = diversity_metrics(&generate(&dpo, &corpus, a.samples, a.max_new, a.temperature, seed)?)?;
    let reports = vec![
        VerifyReport::at_most("diversity.self_bleu", m_ti.self_bleu, m_dpo.self_bleu),
        VerifyReport::at_least("diversity.distinct2", m_ti.distinct2, m_dpo.distinct2),
    ];
    #[derive(Serialize)]
    struct Row {
        model: &'static str,
        self_bleu: f64,
        distinct2: f64,
        distinct4: f64,
        entropy: f64,
    }
    let row = |model, m: DiversityMetrics| Row {
        model,
        self_bleu: m.self_bleu,
        distinct2: m.distinct2,
        distinct4: m.distinct4,
        entropy: m.entropy,
    };
    let csv = to_csv([row("tidpo", m_ti), row("dpo", m_dpo)])?;
    finish(&reports, &a.output, Some(csv))
}

fn noise(a: &NoiseSweepArgs) -> Result<Outcome> {
    let base = CorpusSpec {
        n_triples: a.n,
        prompt_len: a.prompt_len,
        response_len: a.resp_len,
        n_critical: a.n_critical,
        noise_rate: 0.0,
        seed: a.data_seed,
        vocab_size: a.train.vocab,
    };
    let eval = generate_corpus(&CorpusSpec {
        n_triples: a.eval_n,
        seed: a.eval_seed,
        ..base
    })?;
    let reference = ModelParams::init(a.train.model_config())?;
    let mut cfg = a.train.train_config(Variant::TiDpo);
    cfg.curve_points = 0;
    let sweep = noise_sweep(&a.rates, &cfg, &base, &eval, &reference)?;
    for r in &sweep.rows {
        println!("rate={:<4} dpo={:.4} tidpo={:.4}", r.rate, r.dpo_accuracy, r.tidpo_accuracy);
    }
    let reports: Vec<VerifyReport> = sweep.report().into_iter().collect();
    anyhow::ensure!(!reports.is_empty(), "noise sweep needs at least one rate");
    finish(&reports, &a.output, Some(to_csv(&sweep.rows)?))
}
