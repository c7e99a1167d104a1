//! WebAssembly bindings for the demo page in `www/`.
//!
//! The plain functions do the work and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors and encode JSON.

use serde::Serialize;
use sparse_adapter::adapters::{insert_adapters, large_sparse_config, AdapterSpec};
use sparse_adapter::data::SyntheticTaskSpec;
use sparse_adapter::model::{build_encoder, freeze_backbone, EncoderConfig, Model};
use sparse_adapter::pruning::{build_mask, er_sparsities, kept_count, PruneConfig, PruneMethod};
use wasm_bindgen::prelude::*;

/// Demo encoder: one layer, d = 32.
pub const DEMO_D_MODEL: usize = 32;

#[derive(Debug, Serialize)]
pub struct HeatmapGroup {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `1` for kept.
    pub bits: String,
}

#[derive(Debug, Serialize)]
pub struct Heatmap {
    pub method: String,
    pub s: f64,
    pub kept: usize,
    pub total: usize,
    pub groups: Vec<HeatmapGroup>,
}

#[derive(Debug, Serialize)]
pub struct BudgetRow {
    pub k: usize,
    pub r: usize,
    pub s: f64,
    pub weights: usize,
    pub kept: usize,
}

fn demo_model(r: usize, seed: u64) -> sparse_adapter::Result<Model> {
    let cfg = EncoderConfig {
        vocab_size: 32,
        d_model: DEMO_D_MODEL,
        n_heads: 4,
        d_ff: 64,
        n_layers: 1,
        max_seq_len: 8,
        n_classes: 4,
    };
    let mut m = build_encoder(&cfg, seed)?;
    freeze_backbone(&mut m);
    insert_adapters(&mut m, &AdapterSpec::houlsby(r), seed.wrapping_add(1))?;
    Ok(m)
}

/// Per-group ER sparsities for `(n_in, n_out)` pairs given flat.
pub fn er_allocation_for(shapes: &[u32], s: f64) -> Result<Vec<f64>, String> {
    if shapes.is_empty() || !shapes.len().is_multiple_of(2) {
        return Err("shapes must be n_in, n_out pairs".into());
    }
    let pairs: Vec<(usize, usize)> = shapes.chunks(2).map(|c| (c[0] as usize, c[1] as usize)).collect();
    er_sparsities(&pairs, s).map_err(|e| e.to_string())
}

/// Masks the Houlsby adapters of the demo encoder with `method`.
pub fn heatmap_for(method: &str, s: f64, r: usize, seed: u64) -> Result<Heatmap, String> {
    let method: PruneMethod = method.parse().map_err(|e: sparse_adapter::Error| e.to_string())?;
    let model = demo_model(r, seed).map_err(|e| e.to_string())?;
    let spec = SyntheticTaskSpec { vocab: 32, n_train: 32, n_eval: 1, ..SyntheticTaskSpec::token_majority(seed) };
    let (train, _) = spec.generate().map_err(|e| e.to_string())?;
    let batches: Vec<_> = train.chunks(32).collect();
    let mask = build_mask(&model, &PruneConfig::new(method, s, seed), &batches).map_err(|e| e.to_string())?;
    let groups = mask
        .groups()
        .map(|(name, bits)| {
            let g = model.group(name).expect("mask matches model");
            HeatmapGroup {
                name: name.to_string(),
                rows: g.n_in,
                cols: g.n_out,
                bits: bits.iter().map(|&b| if b { '1' } else { '0' }).collect(),
            }
        })
        .collect();
    Ok(Heatmap { method: method.name().into(), s, kept: mask.kept(), total: mask.total(), groups })
}

/// Kept weight counts for bottleneck `k·r_base` at `s = 1 − 1/k`, with
/// `groups` weight matrices of shape `d_model × r`.
pub fn budget_for(r_base: usize, d_model: usize, groups: usize, max_k: usize) -> Result<Vec<BudgetRow>, String> {
    (1..=max_k)
        .map(|k| {
            let ls = large_sparse_config(r_base, k).map_err(|e| e.to_string())?;
            let per_group = d_model * ls.r;
            Ok(BudgetRow { k, r: ls.r, s: ls.s, weights: groups * per_group, kept: groups * kept_count(ls.s, per_group) })
        })
        .collect()
}

fn js_err(e: String) -> JsError {
    JsError::new(&e)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

#[wasm_bindgen]
pub fn er_allocation(shapes: &[u32], s: f64) -> Result<Vec<f64>, JsError> {
    er_allocation_for(shapes, s).map_err(js_err)
}

/// JSON-encoded [`Heatmap`].
#[wasm_bindgen]
pub fn mask_heatmap(method: &str, s: f64, r: usize, seed: u64) -> Result<String, JsError> {
    heatmap_for(method, s, r, seed).map(|h| to_json(&h)).map_err(js_err)
}

/// JSON-encoded list of [`BudgetRow`].
#[wasm_bindgen]
pub fn large_sparse_budget(r_base: usize, d_model: usize, groups: usize, max_k: usize) -> Result<String, JsError> {
    budget_for(r_base, d_model, groups, max_k).map(|rows| to_json(&rows)).map_err(js_err)
}
