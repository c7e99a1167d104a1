use proptest::prelude::*;
use sparse_adapter::adapters::{
    adapter_forward, insert_adapters, large_sparse_config, trainable_param_report, AdapterSite, AdapterSpec,
    AdapterVariant,
};
use sparse_adapter::autodiff::Tensor;
use sparse_adapter::model::{build_encoder, freeze_backbone, EncoderConfig, Model};
use sparse_adapter::pruning::{apply_mask, prune_by_percentile, score_random, PruneMask, PruneMethod};

fn model(d: usize, r: usize, layers: usize, variant: AdapterVariant) -> Model {
    let cfg = EncoderConfig { vocab_size: 8, d_model: d, n_heads: 1, d_ff: 4, n_layers: layers, max_seq_len: 4, n_classes: 2 };
    let mut m = build_encoder(&cfg, 0).unwrap();
    freeze_backbone(&mut m);
    insert_adapters(&mut m, &AdapterSpec::new(variant, r), 1).unwrap();
    m
}

fn kept_at(d: usize, r: usize, layers: usize, s: f64) -> (usize, usize) {
    let mut m = model(d, r, layers, AdapterVariant::Houlsby);
    let mask = prune_by_percentile(&score_random(&m, 4).unwrap(), s).unwrap();
    apply_mask(&mut m, &mask).unwrap();
    (trainable_param_report(&m).prunable_kept, mask.n_groups())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zeroed_up_projection_is_exact_identity(
        d in 2usize..10, r in 1usize..4, n in 1usize..5, seed in any::<u64>(),
    ) {
        prop_assume!(r < d);
        let mut m = model(d, r, 1, AdapterVariant::Pfeiffer);
        let mut zeroed = std::collections::BTreeMap::new();
        for g in m.prunable_groups() {
            zeroed.insert(g.name.clone(), vec![!g.name.ends_with(".up"); g.len()]);
        }
        // Up-projection bias starts at zero; pruning the up matrix leaves x.
        let mask = PruneMask::from_bits(PruneMethod::Random, 0.5, 0, zeroed).unwrap();
        apply_mask(&mut m, &mask).unwrap();
        let mut state = seed;
        let x = Tensor::from_fn(vec![n, d], |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 20.0 - 10.0
        });
        let y = adapter_forward(&m, AdapterSite::FfnOutput { layer: 0 }, &x).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn lora_delta_is_linear_in_input(c in -4.0f64..4.0, seed in 0u64..1000) {
        let m = model(6, 2, 1, AdapterVariant::Lora);
        let site = AdapterSite::LoraQuery { layer: 0 };
        let x = Tensor::from_fn(vec![2, 6], |i| ((i as u64 * 31 + seed) % 17) as f64 / 8.0 - 1.0);
        let cx = Tensor::new(vec![2, 6], x.data().iter().map(|v| c * v).collect()).unwrap();
        let base = |x: &Tensor| {
            let w = m.group("layer0.attn.wq").unwrap().tensor.data().to_vec();
            (0..2).flat_map(|i| (0..6).map(move |j| (i, j))).map(|(i, j)| {
                (0..6).map(|k| x.data()[i * 6 + k] * w[k * 6 + j]).sum::<f64>()
            }).collect::<Vec<f64>>()
        };
        let delta = |x: &Tensor| {
            let y = adapter_forward(&m, site, x).unwrap();
            y.data().iter().zip(base(x)).map(|(a, b)| a - b).collect::<Vec<f64>>()
        };
        for (a, b) in delta(&cx).iter().zip(delta(&x)) {
            prop_assert!((a - c * b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn large_sparse_keeps_the_dense_budget(r_base in 1usize..6, k in 2usize..5, layers in 1usize..3) {
        let cfg = large_sparse_config(r_base, k).unwrap();
        let d = 4 * r_base * k + 1;
        let (dense, _) = kept_at(d, r_base, layers, 0.0);
        let (sparse, groups) = kept_at(d, cfg.r, layers, cfg.s);
        prop_assert!((dense as i64 - sparse as i64).abs() <= groups as i64);
    }
}
