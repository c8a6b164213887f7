//! Browser bindings for three small views onto `comol-core`.
//!
//! Every export takes plain numbers and returns a JSON string, so the page
//! needs no glue beyond `JSON.parse`. The `*_json` functions hold the logic and
//! are what the native tests exercise.

use comol_core::accounting::{count_flops, count_output_level_flops, count_params, CostConfig};
use comol_core::adapters::{comol_forward_reference, init_layer, AdapterParams, LoraParams};
use comol_core::coreconvert::{core_to_delta, experts_to_comol, lora_to_core, relative_frobenius};
use comol_core::linalg::{matmul, reduced_svd};
use comol_core::rng::SeededRng;
use comol_core::synthtrain::{make_task, TaskSpec};
use comol_core::{AdapterLayer, LayerConfig, Method, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Demo sizes stay small enough to answer within a frame or two.
const MAX_DIM: usize = 128;
const MAX_EXPERTS: usize = 32;
const MAX_TOKENS: usize = 128;

fn check(name: &str, v: usize, max: usize) -> std::result::Result<(), String> {
    if v == 0 || v > max {
        return Err(format!("{name} must be in 1..={max}, got {v}"));
    }
    Ok(())
}

fn layer_config(method: &str, m: usize, n: usize, r: usize, num_experts: usize, top_k: usize) -> std::result::Result<LayerConfig, String> {
    let method: Method = method.parse().map_err(|e: comol_core::Error| e.to_string())?;
    check("m", m, MAX_DIM)?;
    check("n", n, MAX_DIM)?;
    check("r", r, MAX_DIM)?;
    check("num_experts", num_experts, MAX_EXPERTS)?;
    let mut c = LayerConfig::new(method, m, n, r, num_experts);
    if method == Method::MoeSparse {
        c = c.with_top_k(top_k);
    }
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

fn routing_explorer_inner(config: &LayerConfig, clusters: usize, seq_len: usize, seed: u64) -> Result<Value> {
    // Mixed-cluster sequences whenever possible, so one view shows several clusters.
    let mix = if clusters > 1 && seq_len > 1 { 1.0 } else { 0.0 };
    let spec = TaskSpec::new(seed, config.m, config.n, clusters, 1, seq_len, 2, mix);
    let task = make_task(&spec)?;
    let seq = &task.sequences[0];
    let mut layer: AdapterLayer = init_layer(config, seed)?;
    layer.randomize(seed, 0.5);
    let weights = layer.routing_weights(&seq.tokens)?;
    let delta = layer.adapter_delta(&seq.tokens)?;
    let rows: Vec<Vec<f64>> = (0..weights.rows()).map(|i| weights.row(i).to_vec()).collect();
    let norms: Vec<f64> = (0..delta.rows()).map(|i| delta.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok(json!({
        "method": config.method,
        "num_experts": config.num_experts,
        "weights": rows,
        "clusters": seq.clusters,
        "delta_norms": norms,
        "trainable_params": layer.num_trainable(),
    }))
}

#[allow(clippy::too_many_arguments)]
/// Routing weights (`L × N`) of a randomly initialized layer over one
/// clustered token sequence, with each token's cluster and update norm.
pub fn routing_explorer_json(
    method: &str,
    m: usize,
    n: usize,
    r: usize,
    num_experts: usize,
    top_k: usize,
    clusters: usize,
    seq_len: usize,
    seed: u64,
) -> std::result::Result<String, String> {
    let config = layer_config(method, m, n, r, num_experts, top_k)?;
    check("seq_len", seq_len, MAX_TOKENS)?;
    check("clusters", clusters, n.min(16))?;
    routing_explorer_inner(&config, clusters, seq_len, seed).map(|v| v.to_string()).map_err(|e| e.to_string())
}

/// Trainable parameters and per-forward FLOPs for every method as the expert
/// count grows from 1 to `max_experts`.
pub fn cost_curves_json(m: u64, n: u64, r: u64, max_experts: u64, top_k: u64, seq_len: u64) -> std::result::Result<String, String> {
    if m == 0 || n == 0 || r == 0 || seq_len == 0 || max_experts == 0 || max_experts > 256 {
        return Err("dimensions must be positive and max_experts at most 256".into());
    }
    let series: Vec<Value> = Method::ALL
        .into_iter()
        .map(|method| {
            let points: Vec<Value> = (1..=max_experts)
                .map(|e| {
                    let mut c = CostConfig::new(method, m, n, r, e, seq_len);
                    if method == Method::MoeSparse {
                        c = c.with_top_k(top_k.clamp(1, e));
                    }
                    let p = count_params(&c);
                    let f = count_flops(&c);
                    json!({
                        "num_experts": e,
                        "params": p.total,
                        "flops": f.expert + f.aggregation + f.routing,
                    })
                })
                .collect();
            json!({ "method": method, "label": method.display_name(), "points": points })
        })
        .collect();
    // Output-level evaluation of the same CoMoL layer, for contrast with the fused path.
    let unfused: Vec<Value> = (1..=max_experts)
        .filter_map(|e| {
            let c = CostConfig::new(Method::Comol, m, n, r, e, seq_len);
            count_output_level_flops(&c).map(|f| {
                let routing = count_flops(&c).routing;
                json!({ "num_experts": e, "flops": f.expert + f.aggregation + routing })
            })
        })
        .collect();
    Ok(json!({ "series": series, "comol_output_level": unfused }).to_string())
}

fn core_conversion_inner(m: usize, n: usize, r: usize, num_experts: usize, seed: u64) -> Result<Value> {
    let mut rng = SeededRng::stream(seed, 40);
    let experts: Vec<LoraParams> = (0..num_experts)
        .map(|_| LoraParams { b: rng.uniform_matrix(m, r, 1.0), a: rng.uniform_matrix(r, n, 1.0) })
        .collect();

    let single = lora_to_core(&experts[0].b, &experts[0].a)?;
    let delta = matmul(&experts[0].b, &experts[0].a)?;
    let single_err = relative_frobenius(&core_to_delta(&single)?, &delta)?;
    let core_sigma = reduced_svd(&single.core)?.sigma;

    let conv = experts_to_comol(&experts, 0, seed)?;
    let residuals: Vec<f64> = conv.residuals.iter().map(|r| r.relative).collect();

    // The converted layer evaluated fused and output-level on the same tokens.
    let w = rng.uniform_matrix(m, n, 1.0 / (n as f64).sqrt());
    let tokens = rng.uniform_matrix(8, n, 1.0);
    let layer = AdapterLayer {
        config: LayerConfig::new(Method::Comol, m, n, r, num_experts),
        w: w.clone(),
        params: AdapterParams::Comol(conv.params.clone()),
    };
    let fused = layer.apply(&tokens)?;
    let reference = comol_forward_reference(&w, &conv.params, &tokens, 1.0, true)?;
    let equiv = fused.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    Ok(json!({
        "single_relative_error": single_err,
        "core_singular_values": core_sigma,
        "expert_relative_residuals": residuals,
        "fused_vs_output_level_max_abs": equiv,
    }))
}

/// Re-parameterizes random LoRA experts into core-space form: the exact
/// single-pair error, the core's spectrum, every expert's projection residual
/// onto expert 0's bases, and the fused vs output-level gap of the result.
pub fn core_conversion_json(m: usize, n: usize, r: usize, num_experts: usize, seed: u64) -> std::result::Result<String, String> {
    check("m", m, MAX_DIM)?;
    check("n", n, MAX_DIM)?;
    check("num_experts", num_experts, MAX_EXPERTS)?;
    check("r", r, m.min(n))?;
    core_conversion_inner(m, n, r, num_experts, seed).map(|v| v.to_string()).map_err(|e| e.to_string())
}

fn to_js(r: std::result::Result<String, String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn routing_explorer(
    method: &str,
    m: usize,
    n: usize,
    r: usize,
    num_experts: usize,
    top_k: usize,
    clusters: usize,
    seq_len: usize,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(routing_explorer_json(method, m, n, r, num_experts, top_k, clusters, seq_len, seed as u64))
}

#[wasm_bindgen]
pub fn cost_curves(m: u32, n: u32, r: u32, max_experts: u32, top_k: u32, seq_len: u32) -> std::result::Result<String, JsValue> {
    to_js(cost_curves_json(m as u64, n as u64, r as u64, max_experts as u64, top_k as u64, seq_len as u64))
}

#[wasm_bindgen]
pub fn core_conversion(m: usize, n: usize, r: usize, num_experts: usize, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(core_conversion_json(m, n, r, num_experts, seed as u64))
}
