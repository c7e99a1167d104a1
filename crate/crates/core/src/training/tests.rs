use super::*;
use crate::adapters::{insert_adapters, AdapterSpec};
use crate::data::{SyntheticTask, SyntheticTaskSpec};
use crate::model::{build_encoder, freeze_backbone, EncoderConfig, GroupRole};
use crate::pruning::{apply_mask, prune_by_percentile, score_random, PruneMask};

fn small_model(seed: u64) -> Model {
    let cfg = EncoderConfig { vocab_size: 16, d_model: 8, n_heads: 2, d_ff: 16, n_layers: 1, max_seq_len: 6, n_classes: 3 };
    let mut m = build_encoder(&cfg, seed).unwrap();
    freeze_backbone(&mut m);
    insert_adapters(&mut m, &AdapterSpec::houlsby(2), seed + 1).unwrap();
    m
}

fn data(n_train: usize) -> (Dataset, Dataset) {
    SyntheticTaskSpec {
        task: SyntheticTask::TokenMajority,
        vocab: 16,
        seq_len: 6,
        n_classes: 3,
        n_train,
        n_eval: 12,
        noise_rate: 0.1,
        seed: 5,
    }
    .generate()
    .unwrap()
}

fn quick(epochs: usize) -> OptimizerConfig {
    OptimizerConfig { peak_lr: 1e-2, epochs, batch_size: 4, seed: 3, ..Default::default() }
}

#[test]
fn lr_schedule_endpoints() {
    let cfg = OptimizerConfig { peak_lr: 0.5, ..Default::default() };
    assert_eq!(lr_at(0, 100, &cfg).unwrap(), 0.0);
    assert_eq!(lr_at(5, 100, &cfg).unwrap(), 0.25);
    assert_eq!(lr_at(10, 100, &cfg).unwrap(), 0.5);
    assert_eq!(lr_at(55, 100, &cfg).unwrap(), 0.25);
    assert_eq!(lr_at(100, 100, &cfg).unwrap(), 0.0);
    assert!(lr_at(101, 100, &cfg).is_err());
    // ⌈1.5⌉ = 2 warmup steps.
    assert_eq!(lr_at(2, 15, &cfg).unwrap(), 0.5);
    assert_eq!(lr_at(1, 15, &cfg).unwrap(), 0.25);
}

fn single_grad(m: &Model, name: &str, value: f64) -> GradMap {
    let g = m.group(name).unwrap();
    GradMap::from([(name.to_string(), Tensor::from_fn(g.shape().to_vec(), |_| value))])
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut m = small_model(0);
    let before = m.param_bytes(|_| true);
    let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
    let mut state = AdamState::new();
    let grads: GradMap = m.trainable_groups().map(|g| (g.name.clone(), Tensor::zeros(g.shape().to_vec()))).collect();
    for _ in 0..3 {
        masked_adam_step(&mut m, &grads, &mut state, &cfg, 1e-2).unwrap();
    }
    assert_eq!(m.param_bytes(|_| true), before);
}

/// Textbook AdamW on one scalar.
fn reference_adam(w0: f64, grads: &[f64], lrs: &[f64], cfg: &OptimizerConfig) -> f64 {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    for (t, (&g, &lr)) in grads.iter().zip(lrs).enumerate() {
        let t = (t + 1) as i32;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1.powi(t));
        let v_hat = v / (1.0 - cfg.beta2.powi(t));
        w -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w);
    }
    w
}

#[test]
fn adam_matches_reference() {
    let mut m = small_model(0);
    let name = "head.b";
    m.group_mut(name).unwrap().tensor.data_mut().fill(0.3);
    let cfg = OptimizerConfig::default();
    let mut state = AdamState::new();
    let lrs = [1e-3, 2e-3, 5e-4, 1e-3, 3e-3];
    let grads = [1.0, 1.0, -0.5, 2.0, 1.0];
    for (&g, &lr) in grads.iter().zip(&lrs) {
        let grad = single_grad(&m, name, g);
        masked_adam_step(&mut m, &grad, &mut state, &cfg, lr).unwrap();
    }
    let expect = reference_adam(0.3, &grads, &lrs, &cfg);
    for &w in m.group(name).unwrap().tensor.data() {
        assert!((w - expect).abs() < 1e-12, "{w} vs {expect}");
    }

    // g = 1 constant, first step: |Δw| = lr·(1/(1 + eps)) + decay term.
    let mut m = small_model(0);
    m.group_mut(name).unwrap().tensor.data_mut().fill(0.0);
    let mut state = AdamState::new();
    let grad = single_grad(&m, name, 1.0);
    masked_adam_step(&mut m, &grad, &mut state, &cfg, 1e-3).unwrap();
    let step = m.group(name).unwrap().tensor.data()[0];
    assert!((step + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
}

#[test]
fn masked_positions_and_moments_stay_zero() {
    let mut m = small_model(1);
    let mask = prune_by_percentile(&score_random(&m, 0).unwrap(), 0.5).unwrap();
    apply_mask(&mut m, &mask).unwrap();
    let cfg = OptimizerConfig::default();
    let mut state = AdamState::new();
    let grads: GradMap = m.trainable_groups().map(|g| (g.name.clone(), Tensor::from_fn(g.shape().to_vec(), |i| 1.0 + i as f64))).collect();
    for _ in 0..4 {
        masked_adam_step(&mut m, &grads, &mut state, &cfg, 1e-2).unwrap();
        for (name, bits) in mask.groups() {
            let w = m.group(name).unwrap().tensor.data();
            let (mo, v) = state.moments(name).unwrap();
            for (i, &keep) in bits.iter().enumerate() {
                if !keep {
                    assert_eq!((w[i], mo[i], v[i]), (0.0, 0.0, 0.0));
                } else {
                    assert!(mo[i] != 0.0);
                }
            }
        }
    }
}

#[test]
fn frozen_groups_are_skipped() {
    let mut m = small_model(0);
    let before = m.param_bytes(|g| g.role == GroupRole::Backbone);
    let grads = single_grad(&m, "layer0.ffn.w1", 1.0);
    let mut state = AdamState::new();
    masked_adam_step(&mut m, &grads, &mut state, &OptimizerConfig::default(), 1.0).unwrap();
    assert_eq!(m.param_bytes(|g| g.role == GroupRole::Backbone), before);
    assert!(state.moments("layer0.ffn.w1").is_none());
    let bad = GradMap::from([("head.b".to_string(), Tensor::zeros(vec![4]))]);
    assert!(matches!(masked_adam_step(&mut m, &bad, &mut state, &OptimizerConfig::default(), 1.0), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn zero_epochs_changes_nothing() {
    let mut m = small_model(0);
    let (tr, ev) = data(16);
    let before = m.param_bytes(|_| true);
    let metrics = train(&mut m, &tr, &ev, &quick(0)).unwrap();
    assert!(metrics.is_empty());
    assert_eq!(m.param_bytes(|_| true), before);
}

#[test]
fn training_is_deterministic_and_preserves_backbone() {
    let (tr, ev) = data(16);
    let run = || {
        let mut m = small_model(2);
        let backbone = m.param_bytes(|g| g.role == GroupRole::Backbone);
        let metrics = train(&mut m, &tr, &ev, &quick(3)).unwrap();
        assert_eq!(m.param_bytes(|g| g.role == GroupRole::Backbone), backbone);
        metrics
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.records.iter().filter(|r| r.split == Split::Train).count(), 12);
    assert_eq!(a.evals().count(), 3);
    assert!(a.records.windows(2).all(|w| w[0].step <= w[1].step));
    let mut csv_a = Vec::new();
    a.write_csv(&mut csv_a).unwrap();
    let mut csv_b = Vec::new();
    b.write_csv(&mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
    assert!(String::from_utf8(csv_a).unwrap().starts_with("step,split,loss,accuracy,lr,kept_fraction\n"));
}

#[test]
fn all_ones_mask_matches_dense_run() {
    let (tr, ev) = data(16);
    let mut dense = small_model(4);
    let mut ones = dense.clone();
    let all = PruneMask::dense(&ones).unwrap();
    apply_mask(&mut ones, &all).unwrap();
    let a = train(&mut dense, &tr, &ev, &quick(2)).unwrap();
    let b = train(&mut ones, &tr, &ev, &quick(2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mask_survives_five_hundred_steps() {
    let (tr, ev) = data(16);
    let mut m = small_model(6);
    let mask = prune_by_percentile(&score_random(&m, 1).unwrap(), 0.4).unwrap();
    apply_mask(&mut m, &mask).unwrap();
    let cfg = OptimizerConfig { eval_every: Some(250), ..quick(125) };
    let (metrics, state) = train_with_state(&mut m, &tr, &ev, &cfg).unwrap();
    assert_eq!(state.step(), 500);
    assert!(metrics.records.iter().all(|r| r.kept_fraction == metrics.records[0].kept_fraction));
    for (name, bits) in mask.groups() {
        let w = m.group(name).unwrap().tensor.data();
        let (mo, v) = state.moments(name).unwrap();
        for (i, _) in bits.iter().enumerate().filter(|(_, &k)| !k) {
            assert_eq!((w[i], mo[i], v[i]), (0.0, 0.0, 0.0));
        }
    }
}

#[test]
fn constant_logits_score_chance() {
    let mut m = small_model(0);
    for name in ["head.w", "head.b"] {
        m.group_mut(name).unwrap().tensor.data_mut().fill(0.0);
    }
    let cfg = EncoderConfig { n_classes: 4, ..m.config().clone() };
    let mut m4 = build_encoder(&cfg, 0).unwrap();
    for name in ["head.w", "head.b"] {
        m4.group_mut(name).unwrap().tensor.data_mut().fill(0.0);
    }
    let ds = Dataset::new((0..8).map(|i| Example { tokens: vec![i, i + 1], label: i % 4 }).collect());
    let before = m4.param_bytes(|_| true);
    let (loss, acc) = evaluate(&m4, &ds).unwrap();
    assert_eq!(acc, 0.25);
    assert!((loss - 4f64.ln()).abs() < 1e-12);
    assert_eq!(evaluate(&m4, &ds).unwrap(), (loss, acc));
    assert_eq!(m4.param_bytes(|_| true), before);
    assert!(matches!(evaluate(&m, &Dataset::default()), Err(Error::EmptyDataset)));
}

#[test]
fn overflowing_adapter_reports_divergence() {
    let (tr, ev) = data(16);
    let mut m = small_model(0);
    for name in ["layer0.ffn.w1", "layer0.ffn.w2"] {
        m.group_mut(name).unwrap().tensor.data_mut().fill(1e200);
    }
    match train(&mut m, &tr, &ev, &quick(1)) {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn summary_and_thresholds() {
    let mk = |step, acc| StepRecord { step, split: Split::Eval, loss: 1.0, accuracy: acc, lr: 0.0, kept_fraction: 0.5 };
    let metrics = RunMetrics { records: vec![mk(4, 0.4), mk(8, 0.75), mk(12, 0.7)] };
    assert_eq!(metrics.steps_to_threshold(0.7), Some(8));
    assert_eq!(metrics.steps_to_threshold(0.9), None);
    let s = metrics.summary();
    assert_eq!(s.final_eval_accuracy, Some(0.7));
    assert_eq!(s.best_eval_accuracy, Some(0.75));
    assert_eq!(s.steps_to_threshold["0.70"], Some(8));
    assert_eq!(s.steps, 12);
}

#[test]
fn config_validation() {
    assert!(OptimizerConfig { peak_lr: 0.0, ..Default::default() }.validate().is_err());
    assert!(OptimizerConfig { warmup_fraction: 1.0, ..Default::default() }.validate().is_err());
    assert!(OptimizerConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    let parsed: OptimizerConfig = serde_json::from_str(r#"{"peak_lr": 0.01}"#).unwrap();
    assert_eq!(parsed.beta2, 0.98);
    assert!(serde_json::from_str::<OptimizerConfig>(r#"{"lr": 0.01}"#).is_err());
}
