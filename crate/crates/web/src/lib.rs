//! Browser bindings: a plan cost explorer, a layerwise-versus-scratch
//! training race and attention heatmaps of the racing models.

pub mod demo;

use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js<T: Serialize>(r: mslt::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// JSON per-stage costs of a layerwise plan and its ratios to scratch.
#[wasm_bindgen]
pub fn plan_costs(
    num_layers: usize,
    hidden: usize,
    heads: usize,
    num_stages: usize,
    total_steps: u32,
    retrain_fraction: f64,
) -> Result<String, JsError> {
    js(demo::plan_costs(num_layers, hidden, heads, num_stages, total_steps as u64, retrain_fraction))
}

#[wasm_bindgen]
pub struct Race(demo::Race);

#[wasm_bindgen]
impl Race {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, total_steps: u32) -> Result<Race, JsError> {
        demo::Race::new(seed as u64, total_steps as u64)
            .map(Race)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn done(&self) -> bool {
        self.0.done()
    }

    /// JSON lane updates after up to `n` more steps per lane.
    pub fn advance(&mut self, n: usize) -> Result<String, JsError> {
        js(self.0.advance(n))
    }

    /// JSON heatmap of one head of a lane's current model.
    pub fn attention(&self, lane: usize, layer: usize, head: usize) -> Result<String, JsError> {
        js(self.0.attention(lane, layer, head))
    }
}
