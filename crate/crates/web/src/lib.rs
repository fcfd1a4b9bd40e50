//! WebAssembly bindings for the interactive mask and attention viewer in
//! `www/`. All computation lives in [`render`]; this layer only converts
//! errors and hands byte buffers to JavaScript.

pub mod render;

use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct RgbaImage {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl RgbaImage {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Copies the pixels out; feed to `new ImageData(...)`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl From<render::Image> for RgbaImage {
    fn from(img: render::Image) -> Self {
        Self {
            width: img.width,
            height: img.height,
            rgba: img.rgba,
        }
    }
}

fn js_err(e: relattn::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Self-attention mask of a layout document.
#[wasm_bindgen(js_name = csamImage)]
pub fn csam_image(layout_json: &str) -> Result<RgbaImage, JsError> {
    let spec = render::parse(layout_json).map_err(js_err)?;
    Ok(render::csam_image(&spec).into())
}

/// Three-level cross-attention mask of a layout document.
#[wasm_bindgen(js_name = mcamImage)]
pub fn mcam_image(layout_json: &str) -> Result<RgbaImage, JsError> {
    let spec = render::parse(layout_json).map_err(js_err)?;
    Ok(render::mcam_image(&spec).into())
}

/// Rotary `(i, j, k)` per token, flattened.
#[wasm_bindgen(js_name = positions)]
pub fn positions(layout_json: &str) -> Result<Vec<u32>, JsError> {
    let spec = render::parse(layout_json).map_err(js_err)?;
    Ok(render::position_triples(&spec))
}

/// Cross-attention weights under bias strength `r` and pooling factor `d`.
#[wasm_bindgen(js_name = crossImage)]
pub fn cross_image(layout_json: &str, seed: u32, r: f32, d: usize) -> Result<RgbaImage, JsError> {
    let spec = render::parse(layout_json).map_err(js_err)?;
    render::cross_image(&spec, seed as u64, r, d, 16)
        .map(Into::into)
        .map_err(js_err)
}
