//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export returns a JSON string; the plain Rust functions underneath are
//! what the tests call.

use conformer::conditioning::{expanded_score_identity, expanded_score_terms};
use conformer::data::{synth_generate, SynthConfig, Topology};
use conformer::graph::{normalize_adjacency, propagate};
use conformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const EPS: f64 = 1e-5;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.last_dim().max(1);
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

fn graph_config(n_nodes: usize, topology: &str) -> Result<SynthConfig, String> {
    Ok(SynthConfig {
        n_nodes,
        days: 1,
        topology: topology.parse::<Topology>().map_err(|e| e.to_string())?,
        ..SynthConfig::default()
    })
}

/// Row-normalized operator and its powers `L̃⁰..L̃ᴷ` for a generated graph.
pub fn propagation(n_nodes: usize, topology: &str, hops: usize, seed: u64) -> Result<Value, String> {
    if !(1..=40).contains(&n_nodes) || hops > 6 {
        return Err("choose 1-40 nodes and at most 6 hops".into());
    }
    let bundle = synth_generate(&graph_config(n_nodes, topology)?, seed).map_err(|e| e.to_string())?;
    let op = normalize_adjacency(&bundle.graph, true).map_err(|e| e.to_string())?;
    // Propagating the identity yields every power side by side.
    let eye = Tensor::eye(n_nodes).reshape(&[1, n_nodes, n_nodes]).map_err(|e| e.to_string())?;
    let stacked = propagate(&eye, &op, hops).map_err(|e| e.to_string())?;
    let powers: Vec<Vec<Vec<f64>>> = (0..=hops)
        .map(|k| {
            stacked
                .data()
                .chunks(n_nodes * (hops + 1))
                .map(|row| row[k * n_nodes..(k + 1) * n_nodes].to_vec())
                .collect()
        })
        .collect();
    let edges: Vec<Value> = bundle.graph.edges().iter().map(|e| json!([e.src, e.dst, e.weight])).collect();
    Ok(json!({ "nodes": n_nodes, "edges": edges, "powers": powers }))
}

/// Speed series of one node of a small synthetic network with its incident ids.
pub fn incident_series(seed: u64, incident_rate: f64, node: usize, days: usize) -> Result<Value, String> {
    let cfg = SynthConfig {
        n_nodes: 12,
        days: days.clamp(1, 7),
        incident_rate,
        ..SynthConfig::default()
    };
    if node >= cfg.n_nodes {
        return Err(format!("node must be below {}", cfg.n_nodes));
    }
    let b = synth_generate(&cfg, seed).map_err(|e| e.to_string())?;
    let n = b.n_nodes();
    let pick = |xs: &[usize]| -> Vec<usize> { xs.iter().skip(node).step_by(n).copied().collect() };
    let values: Vec<f64> = b.values.data().iter().skip(node).step_by(n).copied().collect();
    let (acc, reg) = b.incident_cells();
    Ok(json!({
        "steps_per_day": b.meta.steps_per_day(),
        "values": values,
        "accident": pick(&b.acc_ids),
        "regulation": pick(&b.reg_ids),
        "accident_cells": acc,
        "regulation_cells": reg,
    }))
}

/// The four additive parts of the modulated attention score for random `Q`, `K`
/// under `γ = gamma·1 + noise`, `β = beta·1 + noise`.
pub fn score_decomposition(m: usize, n: usize, dk: usize, gamma: f64, beta: f64, seed: u64) -> Result<Value, String> {
    if !(1..=8).contains(&m) || !(1..=8).contains(&n) || !(1..=8).contains(&dk) {
        return Err("dimensions must lie in 1..=8".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: &[usize], scale: f64| Tensor::from_fn(shape, |_| scale * rng.random_range(-1.0..1.0));
    let q = rand(&[m, dk], 2.0);
    let k = rand(&[n, dk], 2.0);
    let g = rand(&[dk], 0.2).map(|x| x + gamma);
    let b = rand(&[dk], 0.2).map(|x| x + beta);
    let terms = expanded_score_terms(&q, &k, &g, &b, EPS).map_err(|e| e.to_string())?;
    let (direct, total) = expanded_score_identity(&q, &k, &g, &b, EPS).map_err(|e| e.to_string())?;
    Ok(json!({
        "scale": rows(&terms.scale),
        "query_shift": rows(&terms.query_shift),
        "key_shift": rows(&terms.key_shift),
        "shift": terms.shift,
        "total": rows(&total),
        "direct": rows(&direct),
        "max_abs_diff": direct.max_abs_diff(&total),
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = propagation)]
pub fn propagation_js(n_nodes: usize, topology: &str, hops: usize, seed: u32) -> Result<String, JsValue> {
    to_js(propagation(n_nodes, topology, hops, seed.into()))
}

#[wasm_bindgen(js_name = incidentSeries)]
pub fn incident_series_js(seed: u32, incident_rate: f64, node: usize, days: usize) -> Result<String, JsValue> {
    to_js(incident_series(seed.into(), incident_rate, node, days))
}

#[wasm_bindgen(js_name = scoreDecomposition)]
pub fn score_decomposition_js(m: usize, n: usize, dk: usize, gamma: f64, beta: f64, seed: u32) -> Result<String, JsValue> {
    to_js(score_decomposition(m, n, dk, gamma, beta, seed.into()))
}
