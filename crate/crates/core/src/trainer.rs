//! The training loop: per batch, attribution and anchor sampling against the
//! current policy, then one differentiable pass per triple, an ordered
//! gradient reduction and one optimizer update. The reference stays frozen.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::PreferenceTriple;
use crate::error::{Error, Result};
use crate::losses::{
    derive_seed, prepare_triple, triple_loss, triple_loss_and_grad, LossBreakdown, LossConfig, Variant,
};
use crate::microlm::{write_atomic, ModelConfig, ModelParams};

const ORDER_STREAM: u64 = 0x6f72_6465_72;
const STEP_STREAM: u64 = 0x7374_6570;
const PROBE_STREAM: u64 = 0x7072_6f62_65;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Evaluate every this many steps in addition to each epoch end; 0 disables.
    pub eval_every: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Store elapsed milliseconds in log rows; off keeps logs reproducible.
    pub record_wall_time: bool,
    /// Evenly spaced probe evaluations from step 0 to the last step; 0 disables.
    pub curve_points: usize,
    /// Number of leading corpus triples used for probe evaluations.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            epochs: 3,
            batch_size: 16,
            lr: 5e-3,
            optimizer: OptimizerKind::adam(),
            eval_every: 0,
            seed: 0,
            checkpoint_dir: None,
            record_wall_time: false,
            curve_points: 0,
            probe_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.curve_points == 1 {
            return Err(Error::InvalidConfig("curve_points must be 0 or at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: f64,
    pub delta_r_token: f64,
    pub l_dpo_w: f64,
    pub l_triplet: f64,
    pub l_total: f64,
    pub margin_active: bool,
    pub eval_accuracy: Option<f64>,
    pub wall_ms: u64,
}

/// Probe-set loss after `step` updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogRow>,
    pub curve: Vec<CurvePoint>,
    pub reference_fingerprint: String,
    pub best_eval: Option<f64>,
}

/// First-order optimizer over the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => n_params,
        };
        Self {
            kind,
            lr,
            step: 0,
            first: vec![0.0; moments],
            second: vec![0.0; moments],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first, &self.second)
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    params[i] -= self.lr * m / (v.sqrt() + eps);
                }
            }
        }
    }
}

/// Batch loss and mean gradient, reduced in index order. Triple `j` of the
/// batch draws its randomness from `derive_seed(batch_seed, j)`.
pub fn batch_loss_and_grad(
    cfg: &LossConfig,
    policy: &ModelParams,
    reference: &ModelParams,
    batch: &[&PreferenceTriple],
    batch_seed: u64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let per_triple = batch
        .par_iter()
        .enumerate()
        .map(|(j, t)| {
            let prep = prepare_triple(cfg, policy, t, derive_seed(batch_seed, j as u64))?;
            triple_loss_and_grad(cfg, policy, reference, t, &prep)
        })
        .collect::<Vec<_>>();
    let mut parts = Vec::with_capacity(batch.len());
    let mut grad = vec![0.0; policy.num_params()];
    for item in per_triple {
        let (b, g) = item?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
        parts.push(b);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((LossBreakdown::mean(&parts), grad))
}

/// Fraction of triples whose uniform-weight reward difference is strictly
/// positive. Ties count as incorrect.
pub fn evaluate(params: &ModelParams, reference: &ModelParams, corpus: &[PreferenceTriple]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty corpus".into()));
    }
    let correct = corpus
        .par_iter()
        .map(|t| uniform_delta(params, reference, t).map(|d| usize::from(d > 0.0)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / corpus.len() as f64)
}

/// Length-normalized sequence log-ratio difference.
pub fn uniform_delta(params: &ModelParams, reference: &ModelParams, t: &PreferenceTriple) -> Result<f64> {
    let mean = |y: &[u32]| -> Result<f64> {
        let r = params.response_log_ratios(reference, &t.x, y)?;
        Ok(r.iter().sum::<f64>() / r.len() as f64)
    };
    Ok(mean(&t.y_w)? - mean(&t.y_l)?)
}

/// Mean objective over `probe`, each triple prepared with a seed that does
/// not depend on the training step.
pub fn probe_loss(
    cfg: &LossConfig,
    policy: &ModelParams,
    reference: &ModelParams,
    probe: &[PreferenceTriple],
    seed: u64,
) -> Result<LossBreakdown> {
    let parts = probe
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let prep = prepare_triple(cfg, policy, t, derive_seed(seed, i as u64))?;
            triple_loss(cfg, policy, reference, t, &prep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&parts))
}

fn curve_steps(points: usize, total_steps: usize) -> Vec<usize> {
    if points < 2 {
        return Vec::new();
    }
    (0..points)
        .map(|k| ((k * total_steps) as f64 / (points - 1) as f64).round() as usize)
        .collect()
}

fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    params
        .save(path)
        .map_err(|e| Error::CheckpointIo(format!("{}: {e}", path.display())))
}

/// Trains a fresh policy initialized from `model_cfg`, evaluating on the
/// training corpus.
pub fn train(cfg: &TrainConfig, corpus: &[PreferenceTriple], model_cfg: ModelConfig) -> Result<TrainOutcome> {
    let reference = ModelParams::init(model_cfg)?;
    train_from(cfg, corpus, corpus, &reference)
}

/// Trains a copy of `reference` on `corpus`. Accuracy is measured on `eval_set`.
pub fn train_from(
    cfg: &TrainConfig,
    corpus: &[PreferenceTriple],
    eval_set: &[PreferenceTriple],
    reference: &ModelParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    let vocab = reference.config.vocab_size;
    for t in corpus.iter().chain(eval_set) {
        t.validate(vocab)?;
    }
    let started = Instant::now();
    let reference_fingerprint = reference.fingerprint();
    let mut policy = reference.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, policy.num_params());
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let probe = &corpus[..cfg.probe_size.min(corpus.len())];
    let probe_seed = derive_seed(cfg.seed, PROBE_STREAM);
    let mut curve_at = curve_steps(cfg.curve_points, total_steps).into_iter().peekable();
    let mut curve = Vec::new();
    let mut log = Vec::with_capacity(total_steps);
    let mut best_eval: Option<f64> = None;
    let mut last_good: Option<PathBuf> = None;
    let ckpt_dir = cfg.checkpoint_dir.as_deref();

    let mut record_curve = |policy: &ModelParams, done: usize, curve: &mut Vec<CurvePoint>| -> Result<()> {
        while curve_at.peek() == Some(&done) {
            curve_at.next();
            curve.push(CurvePoint {
                step: done,
                epoch: done as f64 / steps_per_epoch as f64,
                loss: probe_loss(&cfg.loss, policy, reference, probe, probe_seed)?,
            });
        }
        Ok(())
    };
    record_curve(&policy, 0, &mut curve)?;

    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed ^ ORDER_STREAM,
            epoch as u64,
        )));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreferenceTriple> = chunk.iter().map(|&i| &corpus[i]).collect();
            let batch_seed = derive_seed(cfg.seed ^ STEP_STREAM, step as u64);
            let (loss, grad) = batch_loss_and_grad(&cfg.loss, &policy, reference, &batch, batch_seed)?;
            if !loss.l_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    checkpoint: last_good,
                });
            }
            let mut flat = policy.flat();
            optimizer.apply(&mut flat, &grad);
            policy.set_flat(&flat)?;
            step += 1;

            let epoch_end = step % steps_per_epoch == 0;
            let periodic = cfg.eval_every > 0 && step % cfg.eval_every == 0;
            let eval_accuracy = if (epoch_end || periodic) && !eval_set.is_empty() {
                Some(evaluate(&policy, reference, eval_set)?)
            } else {
                None
            };
            if let (Some(acc), Some(dir)) = (eval_accuracy, ckpt_dir) {
                if best_eval.is_none_or(|b| acc > b) {
                    save_checkpoint(&policy, &dir.join("best.json"))?;
                }
            }
            if let Some(acc) = eval_accuracy {
                best_eval = Some(best_eval.map_or(acc, |b| b.max(acc)));
            }
            log.push(TrainLogRow {
                step,
                epoch: step as f64 / steps_per_epoch as f64,
                delta_r_token: loss.delta_r_token,
                l_dpo_w: loss.l_dpo_w,
                l_triplet: loss.l_triplet,
                l_total: loss.l_total,
                margin_active: loss.margin_active,
                eval_accuracy,
                wall_ms: if cfg.record_wall_time {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            });
            record_curve(&policy, step, &mut curve)?;
        }
        if let Some(dir) = ckpt_dir {
            let path = dir.join(format!("epoch-{}.json", epoch + 1));
            save_checkpoint(&policy, &path)?;
            last_good = Some(path);
        }
    }
    debug_assert_eq!(reference.fingerprint(), reference_fingerprint);
    Ok(TrainOutcome {
        params: policy,
        log,
        curve,
        reference_fingerprint,
        best_eval,
    })
}

/// DPO and TI-DPO trained from the same reference, seed and data order.
#[derive(Clone, Debug)]
pub struct PairedRun {
    pub dpo: TrainOutcome,
    pub tidpo: TrainOutcome,
}

impl PairedRun {
    /// Aligned `(epoch, dpo_loss, tidpo_loss)` rows of the probe curves.
    pub fn loss_columns(&self) -> Vec<(f64, f64, f64)> {
        self.dpo
            .curve
            .iter()
            .zip(&self.tidpo.curve)
            .map(|(a, b)| (a.epoch, a.loss.l_total, b.loss.l_total))
            .collect()
    }
}

pub fn paired_run(
    cfg: &TrainConfig,
    corpus: &[PreferenceTriple],
    eval_set: &[PreferenceTriple],
    reference: &ModelParams,
) -> Result<PairedRun> {
    let with = |variant: Variant| TrainConfig {
        loss: LossConfig { variant, ..cfg.loss },
        checkpoint_dir: cfg.checkpoint_dir.as_ref().map(|d| d.join(variant.name())),
        ..cfg.clone()
    };
    Ok(PairedRun {
        dpo: train_from(&with(Variant::Dpo), corpus, eval_set, reference)?,
        tidpo: train_from(&with(Variant::TiDpo), corpus, eval_set, reference)?,
    })
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn write_log_csv(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    Ok(write_atomic(path, &csv_bytes(rows)?)?)
}

#[derive(Serialize)]
struct CurveRow {
    step: usize,
    epoch: f64,
    dpo_loss: f64,
    tidpo_loss: f64,
}

pub fn write_paired_csv(path: &Path, run: &PairedRun) -> Result<()> {
    let rows = run.dpo.curve.iter().zip(&run.tidpo.curve).map(|(a, b)| CurveRow {
        step: a.step,
        epoch: a.epoch,
        dpo_loss: a.loss.l_total,
        tidpo_loss: b.loss.l_total,
    });
    Ok(write_atomic(path, &csv_bytes(rows)?)?)
}
