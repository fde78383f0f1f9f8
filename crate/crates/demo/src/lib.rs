//! Browser bindings: level embedding and widths, the scale-space warp, and
//! the discretized Gaussian symbol model.

use elfvc::codelayer::discrete_gaussian_prob;
use elfvc::motion::{scale_space_warp, FlowField, PYRAMID_LEVELS};
use elfvc::rateflex::{embed_level, quant_width, QuantWidthTable};
use elfvc::Tensor;
use wasm_bindgen::prelude::*;

fn text(e: elfvc::Error) -> String {
    e.to_string()
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|m| JsError::new(&m))
}

/// Embedding vector for a continuous level.
pub fn level_vector(level: f64, levels: usize, dims: usize) -> Result<Vec<f64>, String> {
    Ok(embed_level(level, levels, dims).map_err(text)?.vector)
}

/// Width at `level` for a table whose slot widths run geometrically from
/// `first` to `last`.
pub fn level_width(level: f64, levels: usize, dims: usize, first: f64, last: f64) -> Result<f64, String> {
    if !(first > 0.0 && last > 0.0) {
        return Err("widths must be positive".into());
    }
    let lv = embed_level(level, levels, dims).map_err(text)?;
    let logs: Vec<f64> = (0..dims)
        .map(|i| {
            let t = i as f64 / (dims - 1) as f64;
            (1.0 - t) * first.ln() + t * last.ln()
        })
        .collect();
    let table = QuantWidthTable::new(Tensor::new(vec![dims, 1], logs).map_err(text)?).map_err(text)?;
    Ok(quant_width(&lv, &table, 0))
}

/// Demo texture: smooth colour ramps with a checker of period 8.
fn texture(size: usize) -> Tensor {
    Tensor::from_fn3(3, size, size, |c, y, x| {
        let checker = if ((x / 8) + (y / 8)) % 2 == 0 { 0.2 } else { 0.0 };
        let ramp = match c {
            0 => x as f64 / size as f64,
            1 => y as f64 / size as f64,
            _ => 0.5,
        };
        (0.6 * ramp + checker + 0.1).min(1.0)
    })
}

/// RGBA pixels of the demo texture warped by a constant flow.
pub fn warp_rgba(size: usize, dx: f64, dy: f64, blur: f64) -> Result<Vec<u8>, String> {
    if size == 0 || size > 512 {
        return Err("size must be in 1..=512".into());
    }
    let blur = blur.clamp(0.0, (PYRAMID_LEVELS - 1) as f64);
    let flow = Tensor::from_fn3(3, size, size, |c, _, _| [dx, dy, blur][c]);
    let out = scale_space_warp(&texture(size), &FlowField::new(flow).map_err(text)?).map_err(text)?;
    let mut rgba = Vec::with_capacity(size * size * 4);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                rgba.push(elfvc::tools::image::to_u8(out.at3(c, y, x)));
            }
            rgba.push(255);
        }
    }
    Ok(rgba)
}

/// `[symbol, probability, bits]` triples for symbols `-span..=span`.
pub fn symbol_bits(mu: f64, sigma: f64, width: f64, span: i32) -> Result<Vec<f64>, String> {
    if !(sigma > 0.0 && width > 0.0) || !mu.is_finite() || !(0..=64).contains(&span) {
        return Err("need sigma > 0, width > 0, finite mu and span in 0..=64".into());
    }
    let mut out = Vec::with_capacity(3 * (2 * span as usize + 1));
    for k in -span..=span {
        let p = discrete_gaussian_prob(k as f64 * width, mu, sigma, width);
        out.extend_from_slice(&[k as f64, p, -p.log2()]);
    }
    Ok(out)
}

mod bindings {
    use super::*;

    #[wasm_bindgen(js_name = level_vector)]
    pub fn level_vector_js(level: f64, levels: usize, dims: usize) -> Result<Vec<f64>, JsError> {
        js(level_vector(level, levels, dims))
    }

    #[wasm_bindgen(js_name = level_width)]
    pub fn level_width_js(level: f64, levels: usize, dims: usize, first: f64, last: f64) -> Result<f64, JsError> {
        js(level_width(level, levels, dims, first, last))
    }

    #[wasm_bindgen(js_name = warp_rgba)]
    pub fn warp_rgba_js(size: usize, dx: f64, dy: f64, blur: f64) -> Result<Vec<u8>, JsError> {
        js(warp_rgba(size, dx, dy, blur))
    }

    #[wasm_bindgen(js_name = symbol_bits)]
    pub fn symbol_bits_js(mu: f64, sigma: f64, width: f64, span: i32) -> Result<Vec<f64>, JsError> {
        js(symbol_bits(mu, sigma, width, span))
    }
}
