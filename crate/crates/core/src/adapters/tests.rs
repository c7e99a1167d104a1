use super::*;
use crate::model::{build_encoder, freeze_backbone, EncoderConfig};
use crate::pruning::{apply_mask, prune_by_percentile, score_random, PruneMask};

fn tiny(d: usize, layers: usize) -> EncoderConfig {
    EncoderConfig { vocab_size: 16, d_model: d, n_heads: 2, d_ff: 2 * d, n_layers: layers, max_seq_len: 6, n_classes: 3 }
}

fn with_adapter(cfg: &EncoderConfig, spec: AdapterSpec) -> Model {
    let mut m = build_encoder(cfg, 1).unwrap();
    freeze_backbone(&mut m);
    insert_adapters(&mut m, &spec, 2).unwrap();
    m
}

fn rows(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian(&mut rng, vec![n, d], 1.0)
}

fn group_sum(m: &Model, prefix: &str) -> usize {
    m.groups().iter().filter(|g| g.name.starts_with(prefix)).map(|g| g.len()).sum()
}

#[test]
fn houlsby_places_two_adapters_per_layer() {
    let m = with_adapter(&tiny(16, 4), AdapterSpec::houlsby(4));
    let sites = adapter_sites(m.adapter_spec().unwrap(), 4);
    assert_eq!(sites.len(), 8);
    for site in sites {
        let p = site.prefix();
        assert_eq!(m.group(&format!("{p}.down")).unwrap().shape(), &[16, 4]);
        assert_eq!(m.group(&format!("{p}.up")).unwrap().shape(), &[4, 16]);
    }
}

#[test]
fn houlsby_count_at_base_width() {
    let cfg = EncoderConfig { vocab_size: 4, d_model: 768, n_heads: 12, d_ff: 8, n_layers: 1, max_seq_len: 2, n_classes: 2 };
    let m = with_adapter(&cfg, AdapterSpec::houlsby(64));
    let closed_form = 2 * 768 * 64 + 64 + 768;
    assert_eq!(closed_form, 99_136);
    assert_eq!(group_sum(&m, "layer0.attn.adapter."), closed_form);
    assert_eq!(group_sum(&m, "layer0.ffn.adapter."), closed_form);
}

#[test]
fn lora_adds_two_rank_factors_per_projection() {
    let m = with_adapter(&tiny(128, 1), AdapterSpec::new(AdapterVariant::Lora, 8));
    for proj in ["q", "v"] {
        let prunable: usize = m
            .prunable_groups()
            .filter(|g| g.name.starts_with(&format!("layer0.attn.{proj}.")))
            .map(|g| g.len())
            .sum();
        assert_eq!(prunable, 2048);
    }
    assert_eq!(m.prunable_groups().count(), 4);
}

#[test]
fn prunable_set_is_the_adapter_matrices() {
    for variant in [AdapterVariant::Houlsby, AdapterVariant::Pfeiffer, AdapterVariant::Lora, AdapterVariant::Mam] {
        let m = with_adapter(&tiny(8, 2), AdapterSpec::new(variant, 2));
        for g in m.groups() {
            let is_matrix = g.role == GroupRole::Adapter && g.shape().len() == 2 && !g.name.contains("prefix");
            assert_eq!(g.prunable, is_matrix, "{} ({variant:?})", g.name);
        }
    }
}

#[test]
fn insert_rejects_wide_bottleneck_and_second_insert() {
    let mut m = build_encoder(&tiny(8, 1), 0).unwrap();
    assert!(matches!(insert_adapters(&mut m, &AdapterSpec::houlsby(8), 0), Err(Error::InvalidConfig(_))));
    insert_adapters(&mut m, &AdapterSpec::houlsby(4), 0).unwrap();
    assert!(matches!(insert_adapters(&mut m, &AdapterSpec::houlsby(4), 0), Err(Error::AdaptersPresent)));
}

#[test]
fn zero_up_projection_is_identity() {
    let mut m = with_adapter(&tiny(8, 1), AdapterSpec::houlsby(3));
    for name in ["layer0.ffn.adapter.up", "layer0.ffn.adapter.up_bias"] {
        m.group_mut(name).unwrap().tensor.data_mut().fill(0.0);
    }
    let x = rows(5, 8, 3);
    let y = adapter_forward(&m, AdapterSite::FfnOutput { layer: 0 }, &x).unwrap();
    assert_eq!(y, x);
}

#[test]
fn zero_input_and_biases_give_zero() {
    let m = with_adapter(&tiny(8, 1), AdapterSpec::houlsby(3));
    let x = Tensor::zeros(vec![2, 8]);
    let y = adapter_forward(&m, AdapterSite::AttentionOutput { layer: 0 }, &x).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn dense(x: &[f64], w: &Tensor, n: usize) -> Vec<f64> {
    let (k, m) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += x[i * k + t] * w.data()[t * m + j];
            }
        }
    }
    out
}

#[test]
fn bottleneck_matches_straight_line_reference() {
    let mut m = with_adapter(&tiny(8, 1), AdapterSpec::houlsby(3));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let names: Vec<String> =
        m.groups().iter().filter(|g| g.name.starts_with("layer0.attn.adapter")).map(|g| g.name.clone()).collect();
    for n in names {
        let g = m.group_mut(&n).unwrap();
        g.tensor = gaussian(&mut rng, g.shape().to_vec(), 0.5);
    }
    let p = |n: &str| m.group(&format!("layer0.attn.adapter.{n}")).unwrap().tensor.clone();
    let (down, b_down, up, b_up) = (p("down"), p("down_bias"), p("up"), p("up_bias"));
    let x = rows(4, 8, 4);
    let mut h = dense(x.data(), &down, 4);
    for (i, v) in h.iter_mut().enumerate() {
        *v = gelu(*v + b_down.data()[i % 3]);
    }
    let mut expect = dense(&h, &up, 4);
    for (i, v) in expect.iter_mut().enumerate() {
        *v += b_up.data()[i % 8] + x.data()[i];
    }
    let y = adapter_forward(&m, AdapterSite::AttentionOutput { layer: 0 }, &x).unwrap();
    for (a, b) in y.data().iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn lora_matches_reference_and_is_linear() {
    let spec = AdapterSpec { lora_alpha: 4.0, ..AdapterSpec::new(AdapterVariant::Lora, 2) };
    let m = with_adapter(&tiny(8, 1), spec);
    let site = AdapterSite::LoraValue { layer: 0 };
    let w = m.group("layer0.attn.wv").unwrap().tensor.clone();
    let a = m.group("layer0.attn.v.lora_a").unwrap().tensor.clone();
    let b = m.group("layer0.attn.v.lora_b").unwrap().tensor.clone();
    let x = rows(3, 8, 5);
    let base = dense(x.data(), &w, 3);
    let delta = |x: &Tensor| -> Vec<f64> {
        let y = adapter_forward(&m, site, x).unwrap();
        let base = dense(x.data(), &w, 3);
        y.data().iter().zip(&base).map(|(y, b)| y - b).collect()
    };
    let xab = dense(&dense(x.data(), &a, 3), &b, 3);
    for (d, r) in delta(&x).iter().zip(&xab) {
        assert!((d - 2.0 * r).abs() < 1e-12);
    }
    let x2 = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
    for (d2, d1) in delta(&x2).iter().zip(delta(&x)) {
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
    }
    assert_eq!(base.len(), 24);
}

#[test]
fn forward_rejects_bad_width_and_missing_site() {
    let m = with_adapter(&tiny(8, 1), AdapterSpec::houlsby(3));
    let bad = Tensor::zeros(vec![2, 7]);
    assert!(matches!(
        adapter_forward(&m, AdapterSite::FfnOutput { layer: 0 }, &bad),
        Err(Error::ShapeMismatch { .. })
    ));
    let x = Tensor::zeros(vec![2, 8]);
    assert!(adapter_forward(&m, AdapterSite::LoraQuery { layer: 0 }, &x).is_err());
    assert!(adapter_forward(&m, AdapterSite::FfnOutput { layer: 1 }, &x).is_err());
}

#[test]
fn mam_parallel_branch_is_scaled() {
    let spec = AdapterSpec { lora_alpha: 6.0, ..AdapterSpec::new(AdapterVariant::Mam, 3) };
    let m = with_adapter(&tiny(8, 1), spec);
    assert_eq!(m.group("layer0.attn.prefix_k").unwrap().shape(), &[8, 8]);
    let x = rows(2, 8, 6);
    let y = adapter_forward(&m, AdapterSite::FfnParallel { layer: 0 }, &x).unwrap();
    let p = |n: &str| m.group(&format!("layer0.ffn.adapter.{n}")).unwrap().tensor.clone();
    let h: Vec<f64> = dense(x.data(), &p("down"), 2).into_iter().map(gelu).collect();
    let expect = dense(&h, &p("up"), 2);
    for (a, b) in y.data().iter().zip(&expect) {
        assert!((a - 2.0 * b).abs() < 1e-12);
    }
}

#[test]
fn report_counts_roles_and_mask() {
    let mut m = with_adapter(&tiny(16, 2), AdapterSpec::houlsby(4));
    let dense_report = trainable_param_report(&m);
    assert_eq!(dense_report.adapter_kept, dense_report.adapter_total);
    assert_eq!(dense_report.head, 16 * 3 + 3);
    assert_eq!(dense_report.adapter_total, 4 * (2 * 16 * 4 + 4 + 16));
    assert_eq!(dense_report.total(), m.groups().iter().map(|g| g.len()).sum::<usize>());

    let mut ones = m.clone();
    let all = PruneMask::dense(&ones).unwrap();
    apply_mask(&mut ones, &all).unwrap();
    assert_eq!(trainable_param_report(&ones), dense_report);

    let mask = prune_by_percentile(&score_random(&m, 0).unwrap(), 0.4).unwrap();
    apply_mask(&mut m, &mask).unwrap();
    let r = trainable_param_report(&m);
    assert_eq!(r.prunable_kept, 307);
    assert!((r.weight_fraction_kept - 0.6 * dense_report.weight_fraction_kept).abs() < 1.0 / r.total() as f64);
    assert!(r.fraction_kept < dense_report.fraction_kept);
}

#[test]
fn large_sparse_rows() {
    let c = large_sparse_config(64, 2).unwrap();
    assert_eq!((c.r, c.s), (128, 0.5));
    let c = large_sparse_config(64, 4).unwrap();
    assert_eq!((c.r, c.s), (256, 0.75));
    let c = large_sparse_config(64, 1).unwrap();
    assert_eq!((c.r, c.s), (64, 0.0));
    assert!(large_sparse_config(64, 0).is_err());
}

#[test]
fn spec_json_defaults() {
    let spec: AdapterSpec = serde_json::from_str(r#"{"variant":"lora","r":8}"#).unwrap();
    assert_eq!(spec.lora_alpha, 16.0);
    assert_eq!(spec.prefix_len, 8);
    assert_eq!(spec.init, AdapterInit::default());
    assert!(serde_json::from_str::<AdapterSpec>(r#"{"variant":"lora","r":8,"x":1}"#).is_err());
}

#[test]
fn lora_zero_init_flag() {
    let spec = AdapterSpec {
        init: AdapterInit { gaussian_std: 0.01, lora_zero_init: true },
        ..AdapterSpec::new(AdapterVariant::Lora, 2)
    };
    let m = with_adapter(&tiny(8, 1), spec);
    assert!(m.group("layer0.attn.q.lora_b").unwrap().tensor.data().iter().all(|&v| v == 0.0));
    assert!(m.group("layer0.attn.q.lora_a").unwrap().tensor.data().iter().any(|&v| v != 0.0));
}
