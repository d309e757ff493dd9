//! The planted corpus is learnable: an oracle model separates it, training
//! recovers it, and fully inverted labels invert accuracy.

use std::f64::consts::LN_2;

use tidpo_core::datagen::{self, generate_corpus, oracle_params, CorpusSpec};
use tidpo_core::losses::{loss_total, LossConfig, Variant};
use tidpo_core::microlm::{ModelConfig, ModelParams};
use tidpo_core::trainer::{evaluate, paired_run, train_from, TrainConfig};
use tidpo_core::verify::noise_sweep;

fn spec(n: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_triples: n,
        seed,
        ..CorpusSpec::default()
    }
}

#[test]
fn oracle_model_separates_the_corpus() {
    let corpus = generate_corpus(&spec(200, 3)).unwrap();
    let oracle = oracle_params(ModelConfig::default(), 2.0).unwrap();
    let reference = ModelParams::zeros(ModelConfig::default()).unwrap();
    assert!(evaluate(&oracle, &reference, &corpus).unwrap() >= 0.95);
    let dpo = LossConfig::with_variant(Variant::Dpo);
    let loss = loss_total(&dpo, &corpus, &oracle, &reference, 0).unwrap();
    assert!(loss.l_dpo_w < LN_2, "{}", loss.l_dpo_w);

    let flipped: Vec<_> = corpus
        .iter()
        .cloned()
        .map(|mut t| {
            t.flip();
            t
        })
        .collect();
    let a = evaluate(&oracle, &reference, &corpus).unwrap();
    let b = evaluate(&oracle, &reference, &flipped).unwrap();
    assert!((a + b - 1.0).abs() < 1e-12);
}

#[test]
fn corpus_file_round_trip_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let corpus = generate_corpus(&spec(48, 4)).unwrap();
    datagen::save(&path, &corpus).unwrap();
    let loaded = datagen::load(&path, 64).unwrap();
    assert_eq!(loaded, corpus);

    let reference = ModelParams::init(ModelConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        checkpoint_dir: Some(dir.path().join("ckpt")),
        ..TrainConfig::default()
    };
    let out = train_from(&cfg, &loaded, &loaded, &reference).unwrap();
    let last = ModelParams::load(&dir.path().join("ckpt/epoch-2.json")).unwrap();
    assert_eq!(last.flat(), out.params.flat());
    assert_eq!(out.reference_fingerprint, reference.fingerprint());
    assert!(out.log.windows(2).all(|w| w[0].step < w[1].step));
    let acc = evaluate(&last, &reference, &loaded).unwrap();
    assert_eq!(Some(acc), out.log.last().unwrap().eval_accuracy);
}

#[test]
fn paired_run_starts_near_the_untrained_baseline() {
    let corpus = generate_corpus(&spec(32, 5)).unwrap();
    let reference = ModelParams::init(ModelConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        curve_points: 3,
        probe_size: 16,
        ..TrainConfig::default()
    };
    let run = paired_run(&cfg, &corpus, &corpus, &reference).unwrap();
    let cols = run.loss_columns();
    assert_eq!(cols.len(), 3);
    let (epoch, dpo, ti) = cols[0];
    assert_eq!(epoch, 0.0);
    assert!((dpo - LN_2).abs() <= 0.05 && (ti - LN_2).abs() <= 0.05, "{dpo} {ti}");
    let again = paired_run(&cfg, &corpus, &corpus, &reference).unwrap();
    assert_eq!(again.loss_columns(), cols);
    assert_eq!(again.tidpo.log, run.tidpo.log);
}

#[test]
fn clean_and_fully_inverted_noise_rows() {
    let base = spec(64, 6);
    let eval = generate_corpus(&CorpusSpec { n_triples: 64, seed: 60, ..base }).unwrap();
    let reference = ModelParams::init(ModelConfig { seed: 6, ..ModelConfig::default() }).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let sweep = noise_sweep(&[0.0, 1.0], &cfg, &base, &eval, &reference).unwrap();
    let untrained = evaluate(&reference, &reference, &eval).unwrap();
    let (clean, inverted) = (sweep.rows[0], sweep.rows[1]);
    for (c, i) in [
        (clean.dpo_accuracy, inverted.dpo_accuracy),
        (clean.tidpo_accuracy, inverted.tidpo_accuracy),
    ] {
        assert!(c >= untrained);
        assert!(i <= 1.0 - c + 0.05, "clean {c} inverted {i}");
    }
}
