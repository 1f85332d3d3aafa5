// SPDX-License-Identifier: Apache-2.0

use super::*;

fn small(mechanism: Mechanism) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        seq_len: 6,
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        n_layers: 2,
        n_classes: 3,
        mechanism,
        seed: 9,
        ..Default::default()
    }
}

const TOKENS: [usize; 6] = [3, 1, 4, 1, 5, 9];

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = small(Mechanism::Credal);
    let a = init_params(&cfg).unwrap();
    let b = init_params(&cfg).unwrap();
    assert_eq!(a, b);
    let c = init_params(&ModelConfig { seed: 10, ..cfg.clone() }).unwrap();
    assert_ne!(a.embedding, c.embedding);
    assert_eq!(a.layers[0].attn.wq[0].shape(), &[8, 4]);
    assert_eq!(a.layers[0].attn.wq.len(), 2);
    assert_eq!(a.layers[1].norm2_scale.data(), &[1.0; 8]);
    assert!(a.layers[1].norm2_bias.data().iter().all(|&x| x == 0.0));
}

#[test]
fn invalid_configs_are_rejected() {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 3,
        ..Default::default()
    };
    assert!(matches!(init_params(&cfg), Err(Error::Config(_))));
    let cfg = ModelConfig {
        n_classes: 0,
        ..Default::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn standard_mode_has_no_vacuity() {
    let cfg = small(Mechanism::Standard);
    let out = forward_classify(&init_params(&cfg).unwrap(), &cfg, &TOKENS).unwrap();
    assert!(out.layer_vacuity.is_empty());
    assert_eq!(out.model_uncertainty, None);
    assert!(matches!(model_uncertainty(&out), Err(Error::Contract(_))));
    assert_eq!(out.logits.shape(), &[3]);
}

#[test]
fn zero_layers_is_pooled_embedding_through_head() {
    let cfg = ModelConfig {
        n_layers: 0,
        ..small(Mechanism::Credal)
    };
    let p = init_params(&cfg).unwrap();
    let out = forward_classify(&p, &cfg, &TOKENS).unwrap();

    let pe = sinusoidal_positions(6, 8);
    let mut pooled = [0.0; 8];
    for (pos, &t) in TOKENS.iter().enumerate() {
        for (j, acc) in pooled.iter_mut().enumerate() {
            *acc += (p.embedding.at(t, j) + pe.at(pos, j)) / 6.0;
        }
    }
    for c in 0..3 {
        let want: f64 = (0..8).map(|j| pooled[j] * p.head_w.at(j, c)).sum::<f64>() + p.head_b.data()[c];
        assert!((out.logits.data()[c] - want).abs() < 1e-12);
    }
    assert_eq!(out.model_uncertainty, None);
}

#[test]
fn zero_scores_give_half_vacuity() {
    let cfg = small(Mechanism::Credal);
    let mut p = init_params(&cfg).unwrap();
    for l in &mut p.layers {
        for w in &mut l.attn.wq {
            *w = Tensor::zeros(w.shape());
        }
    }
    let out = forward_classify(&p, &cfg, &TOKENS).unwrap();
    for u in out.layer_vacuity.last().unwrap().data() {
        assert!((u - 0.5).abs() < 1e-15);
    }
    assert!((model_uncertainty(&out).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn uncertainty_is_mean_of_final_layer() {
    let out = |rows: &[&[f64]]| ClassifierOutput {
        logits: Tensor::vector(vec![0.0, 0.0]),
        layer_vacuity: vec![Tensor::full(&[1, 2], 0.9), Tensor::from_rows(rows).unwrap()],
        model_uncertainty: None,
    };
    assert_eq!(model_uncertainty(&out(&[&[0.5, 0.5], &[0.5, 0.5]])).unwrap(), 0.5);
    assert!((model_uncertainty(&out(&[&[0.1, 0.3]])).unwrap() - 0.2).abs() < 1e-15);
    assert!((model_uncertainty(&out(&[&[0.1, 0.2], &[0.3, 0.4]])).unwrap() - 0.25).abs() < 1e-15);
}

#[test]
fn forward_is_deterministic_and_bounded() {
    let cfg = small(Mechanism::Credal);
    let p = init_params(&cfg).unwrap();
    let a = forward_classify(&p, &cfg, &TOKENS).unwrap();
    let b = forward_classify(&p, &cfg, &TOKENS).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.layer_vacuity.len(), 2);
    assert_eq!(a.layer_vacuity[0].shape(), &[2, 6]);
    for seq in [[0usize; 6], [19; 6], [7, 8, 9, 10, 11, 12]] {
        let u = forward_classify(&p, &cfg, &seq).unwrap().model_uncertainty.unwrap();
        assert!(u > 0.0 && u < 1.0);
    }
}

#[test]
fn token_contract() {
    let cfg = small(Mechanism::Credal);
    let p = init_params(&cfg).unwrap();
    assert!(matches!(forward_classify(&p, &cfg, &[0, 1, 2, 3, 4, 20]), Err(Error::Input(_))));
    assert!(matches!(forward_classify(&p, &cfg, &[0, 1]), Err(Error::Input(_))));
}

#[test]
fn high_evidence_credal_model_matches_standard() {
    let cfg = small(Mechanism::Credal);
    let p = init_params(&cfg).unwrap();
    let run = |mech: Mechanism, offset: f64| {
        let tape = Tape::new();
        let vars = params_on_tape(&tape, &p, false);
        let opts = AttentionOptions {
            score_offset: offset,
            ..Default::default()
        };
        forward_trace_with(&vars, &cfg.with_mechanism(mech), &TOKENS, opts)
            .unwrap()
            .to_output()
    };
    let standard = run(Mechanism::Standard, 0.0);
    let credal = run(Mechanism::Credal, 20.0);
    assert!(standard.logits.max_abs_diff(&credal.logits) < 1e-4);
    // Without the shift the mechanisms genuinely differ.
    assert!(standard.logits.max_abs_diff(&run(Mechanism::Credal, 0.0).logits) > 1e-3);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = small(Mechanism::Credal);
    let p = init_params(&cfg).unwrap();
    let ck = Checkpoint {
        config: cfg.clone(),
        params: p.clone(),
    };
    let text = ck.to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back, ck);
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names[0], "embedding");
    assert!(names.contains(&"layers.1.attn.wk.1".to_string()));
    assert!(names.contains(&"layers.0.ffn.b2".to_string()));
    assert_eq!(names.last().unwrap(), "head.bias");
}

#[test]
fn checkpoint_rejects_bad_files() {
    let cfg = small(Mechanism::Credal);
    let p = init_params(&cfg).unwrap();
    let text = Checkpoint { config: cfg, params: p }.to_json().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["version"] = 2.into();
    assert!(Checkpoint::from_json(&v.to_string()).is_err());
    v["version"] = 1.into();
    v["tensors"].as_array_mut().unwrap().pop();
    let err = Checkpoint::from_json(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("head.bias"), "{err}");
}

#[test]
fn values_mut_covers_every_tensor() {
    let cfg = small(Mechanism::Credal);
    let mut p = init_params(&cfg).unwrap();
    let n = p.named().len();
    assert_eq!(p.values_mut().len(), n);
    assert_eq!(n, 1 + 2 * (3 * 2 + 1 + 8) + 2);
}
