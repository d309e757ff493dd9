//! Command-line driver: corpus generation, training, ablations, sweeps,
//! verification checks and weight reports.
//!
//! Every command is a pure function of its flags, so reruns with the same
//! flags write byte-identical files.

mod verify_cmd;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tidpo_core::attribution::{response_weights, weight_report, PriorKind, TokenWeight};
use tidpo_core::datagen::{self, generate_corpus, CorpusSpec, PreferenceTriple};
use tidpo_core::losses::{LossConfig, Variant};
use tidpo_core::microlm::{write_atomic, ModelConfig, ModelParams};
use tidpo_core::trainer::{
    evaluate, paired_run, train_from, write_log_csv, write_paired_csv, OptimizerKind, TrainConfig,
};
use tidpo_core::verify::{ablation, lambda_stability_report, lambda_sweep, VerifyReport};

pub use verify_cmd::VerifyCommand;

#[derive(Debug, Parser)]
#[command(name = "tidpo", version, about = "Token-importance guided preference optimization lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted preference corpus as JSONL.
    Datagen(DatagenArgs),
    /// Train one variant, or DPO and TI-DPO side by side.
    Train(TrainArgs),
    /// Train every requested loss variant on the same data.
    Ablate(AblateArgs),
    /// Sweep the attribution/prior mixing coefficient.
    Sweep(SweepArgs),
    /// Run an executable check and emit a JSON report list.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Per-token raw and mixed weights for corpus responses.
    Report(ReportArgs),
}

/// Whether every check a command ran passed. The binary exits with 3 when
/// one failed, 1 on errors and 2 on usage errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    ChecksFailed,
}

impl Outcome {
    fn from_reports(reports: &[VerifyReport]) -> Self {
        if reports.iter().all(|r| r.passed) {
            Outcome::Passed
        } else {
            Outcome::ChecksFailed
        }
    }
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 12)]
    pub resp_len: usize,
    #[arg(long, default_value_t = 2)]
    pub n_critical: usize,
    /// Fraction of triples whose preference label is flipped.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long)]
    pub out: PathBuf,
}

impl DatagenArgs {
    fn spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_triples: self.n,
            prompt_len: self.prompt_len,
            response_len: self.resp_len,
            n_critical: self.n_critical,
            noise_rate: self.noise,
            seed: self.seed,
            vocab_size: self.vocab,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

/// Model, loss and optimization flags shared by every training command.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    /// Triplet loss weight.
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Triplet margin.
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    /// Attribution share of the mixed weights.
    #[arg(long, default_value_t = 0.7)]
    pub lambda: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// Evaluate every this many steps besides each epoch end; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// Seed of the reference initialization.
    #[arg(long, default_value_t = 42)]
    pub model_seed: u64,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 12)]
    pub curve_points: usize,
    #[arg(long, default_value_t = 128)]
    pub probe_size: usize,
}

impl TrainFlags {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab,
            seed: self.model_seed,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        TrainConfig {
            loss: LossConfig {
                beta: self.beta,
                gamma: self.gamma,
                alpha_margin: self.alpha,
                lambda: self.lambda,
                variant,
                ..LossConfig::default()
            },
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => OptimizerKind::adam(),
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            },
            eval_every: self.eval_every,
            seed: self.seed,
            checkpoint_dir: None,
            record_wall_time: false,
            curve_points: self.curve_points,
            probe_size: self.probe_size,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataFlags {
    /// Training corpus (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out evaluation corpus; defaults to the training corpus.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
}

impl DataFlags {
    fn load(&self, vocab: usize) -> Result<(Vec<PreferenceTriple>, Vec<PreferenceTriple>)> {
        let corpus = load_corpus(&self.data, vocab)?;
        let eval = match &self.eval_data {
            Some(p) => load_corpus(p, vocab)?,
            None => corpus.clone(),
        };
        Ok((corpus, eval))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = Variant::TiDpo)]
    pub variant: Variant,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
    /// Output directory for logs, curves and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Also train DPO from the same reference and data order and write the
    /// paired probe-loss curve.
    #[arg(long)]
    pub compare_dpo: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated variants; defaults to all of them.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated mixing coefficients.
    #[arg(long = "lambda", value_delimiter = ',', default_value = "0,0.1,0.3,0.5,0.7,0.9,1.0")]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 0.3)]
    pub band_low: f64,
    #[arg(long, default_value_t = 0.7)]
    pub band_high: f64,
    /// Largest allowed accuracy gap to the best coefficient inside the band.
    #[arg(long, default_value_t = 0.02)]
    pub band_tolerance: f64,
    #[command(flatten)]
    pub train: SweepTrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    pub out: PathBuf,
}

/// [`TrainFlags`] without `--lambda`, which the sweep owns.
#[derive(Debug, Clone, Args)]
pub struct SweepTrainFlags {
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 42)]
    pub model_seed: u64,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
}

impl SweepTrainFlags {
    fn flags(&self) -> TrainFlags {
        TrainFlags {
            beta: self.beta,
            gamma: self.gamma,
            alpha: self.alpha,
            lambda: LossConfig::default().lambda,
            lr: self.lr,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            optimizer: self.optimizer,
            eval_every: 0,
            model_seed: self.model_seed,
            vocab: self.vocab,
            curve_points: 0,
            probe_size: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Policy checkpoint whose attribution is reported.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub lambda: f64,
    /// Number of leading triples to report.
    #[arg(long, default_value_t = 8)]
    pub limit: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Datagen(a) => datagen_cmd(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::Sweep(a) => sweep_cmd(&a),
        Command::Verify(v) => verify_cmd::run(&v),
        Command::Report(a) => report_cmd(&a),
    }
}

pub(crate) fn load_corpus(path: &Path, vocab: usize) -> Result<Vec<PreferenceTriple>> {
    datagen::load(path, vocab).with_context(|| format!("loading corpus {}", path.display()))
}

pub(crate) fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    ModelParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// Prints one line per report and writes the list as JSON when `out` is set.
pub(crate) fn emit_reports(reports: &[VerifyReport], out: Option<&Path>) -> Result<Outcome> {
    for r in reports {
        println!(
            "{} {} observed={:.6} expected={:.6} tolerance={:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.observed,
            r.expected,
            r.tolerance
        );
    }
    if let Some(path) = out {
        write_json(path, reports)?;
    }
    Ok(Outcome::from_reports(reports))
}

fn datagen_cmd(a: &DatagenArgs) -> Result<Outcome> {
    let corpus = generate_corpus(&a.spec())?;
    datagen::save(&a.out, &corpus).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} triples to {}", corpus.len(), a.out.display());
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Variant,
    steps: usize,
    final_loss: f64,
    final_accuracy: f64,
    best_eval: Option<f64>,
    reference_fingerprint: String,
}

#[derive(Serialize)]
struct PairedSummary {
    dpo: TrainSummary,
    tidpo: TrainSummary,
    checkpoints: usize,
    tidpo_at_or_below_dpo: usize,
}

fn summarize(
    variant: Variant,
    out: &tidpo_core::trainer::TrainOutcome,
    reference: &ModelParams,
    eval: &[PreferenceTriple],
) -> Result<TrainSummary> {
    Ok(TrainSummary {
        variant,
        steps: out.log.len(),
        final_loss: out.log.last().map_or(f64::NAN, |r| r.l_total),
        final_accuracy: evaluate(&out.params, reference, eval)?,
        best_eval: out.best_eval,
        reference_fingerprint: out.reference_fingerprint.clone(),
    })
}

fn train_cmd(a: &TrainArgs) -> Result<Outcome> {
    let (corpus, eval) = a.data.load(a.train.vocab)?;
    let reference = ModelParams::init(a.train.model_config())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut cfg = a.train.train_config(a.variant);
    cfg.checkpoint_dir = Some(a.out.join("checkpoints"));

    if a.compare_dpo {
        if a.variant != Variant::TiDpo {
            bail!("--compare-dpo pairs DPO with tidpo; got --variant {}", a.variant);
        }
        let run = paired_run(&cfg, &corpus, &eval, &reference)?;
        write_log_csv(&a.out.join("dpo-log.csv"), &run.dpo.log)?;
        write_log_csv(&a.out.join("tidpo-log.csv"), &run.tidpo.log)?;
        write_paired_csv(&a.out.join("paired.csv"), &run)?;
        run.dpo.params.save(&a.out.join("dpo-final.json"))?;
        run.tidpo.params.save(&a.out.join("tidpo-final.json"))?;
        let columns = run.loss_columns();
        let summary = PairedSummary {
            dpo: summarize(Variant::Dpo, &run.dpo, &reference, &eval)?,
            tidpo: summarize(Variant::TiDpo, &run.tidpo, &reference, &eval)?,
            checkpoints: columns.len(),
            tidpo_at_or_below_dpo: columns.iter().filter(|(_, d, t)| t <= d).count(),
        };
        println!(
            "dpo acc={:.4} tidpo acc={:.4}; tidpo <= dpo at {}/{} checkpoints",
            summary.dpo.final_accuracy,
            summary.tidpo.final_accuracy,
            summary.tidpo_at_or_below_dpo,
            summary.checkpoints
        );
        write_json(&a.out.join("summary.json"), &summary)?;
    } else {
        let out = train_from(&cfg, &corpus, &eval, &reference)?;
        write_log_csv(&a.out.join("log.csv"), &out.log)?;
        out.params.save(&a.out.join("final.json"))?;
        let summary = summarize(a.variant, &out, &reference, &eval)?;
        println!(
            "{} steps={} final_loss={:.6} accuracy={:.4}",
            a.variant, summary.steps, summary.final_loss, summary.final_accuracy
        );
        write_json(&a.out.join("summary.json"), &summary)?;
    }
    Ok(Outcome::Passed)
}

fn ablate_cmd(a: &AblateArgs) -> Result<Outcome> {
    let (corpus, eval) = a.data.load(a.train.vocab)?;
    let reference = ModelParams::init(a.train.model_config())?;
    let variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    let cfg = a.train.train_config(Variant::TiDpo);
    let rows = ablation(&variants, &cfg, &corpus, &eval, &reference)?;
    for r in &rows {
        println!("{:<18} accuracy={:.4} final_loss={:.6}", r.variant, r.accuracy, r.final_loss);
    }
    write_json(&a.out, &rows)?;
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct SweepOutput {
    rows: Vec<tidpo_core::verify::LambdaRow>,
    reports: Vec<VerifyReport>,
}

fn sweep_cmd(a: &SweepArgs) -> Result<Outcome> {
    let flags = a.train.flags();
    let (corpus, eval) = a.data.load(flags.vocab)?;
    let reference = ModelParams::init(flags.model_config())?;
    let rows = lambda_sweep(&a.lambdas, &flags.train_config(Variant::TiDpo), &corpus, &eval, &reference)?;
    for r in &rows {
        println!("lambda={:<4} accuracy={:.4} final_loss={:.6}", r.lambda, r.accuracy, r.final_loss);
    }
    let malformed = rows
        .iter()
        .filter(|r| !(r.final_loss.is_finite() && (0.0..=1.0).contains(&r.accuracy)))
        .count();
    let reports = vec![
        VerifyReport::at_most("sweep.sanity", malformed as f64, 0.0)
            .with_note(format!("{} rows with finite loss and accuracy in [0, 1]", rows.len() - malformed)),
        lambda_stability_report(&rows, a.band_low, a.band_high, a.band_tolerance)?,
    ];
    let outcome = emit_reports(&reports, None)?;
    write_json(&a.out, &SweepOutput { rows, reports })?;
    Ok(outcome)
}

#[derive(Serialize)]
struct SequenceReport {
    triple: usize,
    response: &'static str,
    tokens: Vec<TokenWeight>,
}

fn report_cmd(a: &ReportArgs) -> Result<Outcome> {
    let params = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.data, params.config.vocab_size)?;
    let mut out = Vec::new();
    for (i, t) in corpus.iter().take(a.limit).enumerate() {
        for (label, y) in [("chosen", &t.y_w), ("rejected", &t.y_l)] {
            let w = response_weights(&params, &t.x, y, a.lambda, PriorKind::Gaussian)?;
            out.push(SequenceReport {
                triple: i,
                response: label,
                tokens: weight_report(y, &w),
            });
        }
    }
    write_json(&a.out, &out)?;
    println!("wrote weights for {} responses to {}", out.len(), a.out.display());
    Ok(Outcome::Passed)
}
