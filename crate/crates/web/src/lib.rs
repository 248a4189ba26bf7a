//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function takes a JSON or text argument and returns a JSON
//! string, either the result object or `{"error": "..."}`. The plain Rust
//! versions in [`ops`] return `Result` and are what the native tests call.

use wasm_bindgen::prelude::*;

pub mod ops;

fn render(result: Result<serde_json::Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

/// Certificate, stationary vector and second eigenvalue modulus of a gossip
/// matrix given as whitespace-separated rows.
#[wasm_bindgen]
pub fn analyze_gossip(text: &str) -> String {
    render(ops::analyze_gossip(text))
}

/// Multi-seed TD run on the demo instance; see [`ops::RateParams`].
#[wasm_bindgen]
pub fn simulate_rates(params: &str) -> String {
    render(ops::simulate_rates(params))
}

/// Normalized weighted martingale sums; the argument is a
/// `MartingaleLilSpec` in JSON.
#[wasm_bindgen]
pub fn martingale_lil(spec: &str) -> String {
    render(ops::martingale_lil(spec))
}
