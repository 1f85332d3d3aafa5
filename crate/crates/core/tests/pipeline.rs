// SPDX-License-Identifier: Apache-2.0

//! End-to-end runs of data generation, training, evaluation and checkpoints.

use credal::data::{gen_id, DatasetSpec, EvalSets, Kind, LabeledSequence, Split};
use credal::model::{forward_classify, load_checkpoint, save_checkpoint};
use credal::train::{evaluate_uncertainty, score_examples, train, TrainConfig, UncertaintyReport};
use credal::ModelConfig;

fn mean_u(params: &credal::ModelParams, cfg: &ModelConfig, seqs: &[LabeledSequence]) -> f64 {
    let scores = score_examples(params, cfg, seqs).unwrap();
    scores.iter().map(|s| s.uncertainty).sum::<f64>() / scores.len() as f64
}

#[test]
fn default_config_loss_falls_by_epoch_five() {
    let cfg = ModelConfig::default();
    let data = gen_id(&DatasetSpec::default(), Split::Train).unwrap();
    let tc = TrainConfig {
        epochs: 5,
        ..Default::default()
    };
    let out = train(&cfg, &tc, &data).unwrap();
    assert!(out.log[4].loss < out.log[0].loss, "{:?}", out.log);
}

// Fails at the default scale: the model does not memorize its training set,
// and train vs held-out mean U differ by ~1e-3 with either sign. Run with
// `cargo test -- --ignored` to reproduce.
#[test]
#[ignore = "does not hold at the default scale; differences are at noise level"]
fn training_data_is_no_less_certain_than_held_out_id() {
    for seed in 1..=3 {
        let cfg = ModelConfig { seed, ..Default::default() };
        let spec = DatasetSpec { seed, ..Default::default() };
        let data = gen_id(&spec, Split::Train).unwrap();
        let tc = TrainConfig { seed, ..Default::default() };
        let params = train(&cfg, &tc, &data).unwrap().params;
        let held_out = gen_id(&spec, Split::Eval).unwrap();
        let (seen, unseen) = (mean_u(&params, &cfg, &data), mean_u(&params, &cfg, &held_out));
        eprintln!("seed {seed}: train {seen} held-out {unseen}");
        assert!(seen <= unseen, "seed {seed}: train {seen} > held-out {unseen}");
    }
}

#[test]
fn checkpoint_reproduces_predictions() {
    let cfg = ModelConfig {
        seq_len: 8,
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        seed: 3,
        ..Default::default()
    };
    let spec = DatasetSpec {
        seq_len: 8,
        n_train: 96,
        n_eval: 24,
        seed: 3,
        ..Default::default()
    };
    let tc = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let params = train(&cfg, &tc, &gen_id(&spec, Split::Train).unwrap()).unwrap().params;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&path, &cfg, &params).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config, cfg);

    let sets = EvalSets::generate(&spec).unwrap();
    for kind in Kind::ALL {
        for seq in sets.get(kind) {
            let a = forward_classify(&params, &cfg, &seq.tokens).unwrap();
            let b = forward_classify(&loaded.params, &loaded.config, &seq.tokens).unwrap();
            assert_eq!(a, b);
        }
    }
    let r1 = evaluate_uncertainty(&params, &cfg, &sets).unwrap();
    let r2: UncertaintyReport = evaluate_uncertainty(&loaded.params, &cfg, &sets).unwrap();
    assert_eq!(r1, r2);
    for k in r1.kinds() {
        assert!(k.mean_u > 0.0 && k.mean_u < 1.0);
    }
}
