//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The page fetches both checkpoints, builds a [`WasmDemo`] and calls it as
//! the user draws. Results cross the boundary as JSON strings or plain typed
//! arrays.

pub mod demo;

use cevit::attention::Selector;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct WasmDemo {
    inner: demo::Demo,
}

#[wasm_bindgen]
impl WasmDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(vit_manifest: &str, vit_blob: &[u8], cevit_manifest: &str, cevit_blob: &[u8]) -> Result<WasmDemo, JsError> {
        let inner = demo::Demo::from_checkpoints(vit_manifest, vit_blob, cevit_manifest, cevit_blob).map_err(js_err)?;
        Ok(WasmDemo { inner })
    }

    /// `{label, probs, mask}` for a 28×28 image.
    pub fn classify(&self, pixels: &[f32], selector: &str) -> Result<String, JsError> {
        let sel: Selector = selector.parse().map_err(js_err)?;
        let out = self.inner.classify(pixels, sel).map_err(js_err)?;
        serde_json::to_string(&out).map_err(js_err)
    }

    /// `{score, mask}` for a (query, reference) pair.
    pub fn compare(&self, query: &[f32], reference: &[f32], selector: &str) -> Result<String, JsError> {
        let sel: Selector = selector.parse().map_err(js_err)?;
        let out = self.inner.compare(query, reference, sel).map_err(js_err)?;
        serde_json::to_string(&out).map_err(js_err)
    }
}

#[wasm_bindgen]
pub fn sharpen(mask: &[f32], threshold: f32) -> Result<Vec<f32>, JsError> {
    demo::sharpen(mask, threshold).map_err(js_err)
}

#[wasm_bindgen(js_name = overlayRgba)]
pub fn overlay_rgba(image: &[f32], mask: &[f32], alpha: f32) -> Result<Vec<u8>, JsError> {
    demo::overlay_rgba(image, mask, alpha).map_err(js_err)
}

#[wasm_bindgen(js_name = prepareDrawing)]
pub fn prepare_drawing(gray: &[f32], side: usize) -> Result<Vec<f32>, JsError> {
    demo::prepare_drawing(gray, side).map_err(js_err)
}
