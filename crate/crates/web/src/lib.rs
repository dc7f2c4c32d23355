//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export is a thin wrapper over a plain function so the logic is
//! testable natively.

use wasm_bindgen::prelude::*;

use hybridscan::data::{generate_synthetic, SyntheticSpec};
use hybridscan::fgm::{fft_filter, frequency_radius, mask_value, FilterMode};
use hybridscan::orders::{build_order, OrderKind};

pub fn parse_kind(kind: &str) -> Result<OrderKind, String> {
    Ok(match kind {
        "slice_f" => OrderKind::SliceF,
        "slice_r" => OrderKind::SliceR,
        "local_f" => OrderKind::LocalF,
        "local_r" => OrderKind::LocalR,
        "local_s" => OrderKind::LocalS,
        other => return Err(format!("unknown order kind {other:?}")),
    })
}

pub fn parse_mode(mode: &str) -> Result<FilterMode, String> {
    match mode {
        "low_pass" => Ok(FilterMode::LowPass),
        "high_pass" => Ok(FilterMode::HighPass),
        other => Err(format!("unknown filter mode {other:?}")),
    }
}

/// Sequence position of every voxel (inverse permutation), row-major over
/// `(D, H, W)`.
pub fn order_positions(d: usize, h: usize, w: usize, k: usize, kind: &str) -> Result<Vec<u32>, String> {
    let o = build_order(parse_kind(kind)?, (d, h, w), k).map_err(|e| e.to_string())?;
    Ok(o.inverse().iter().map(|&i| i as u32).collect())
}

fn lesion_spec(size: usize, noise: f64, blur: f64) -> SyntheticSpec {
    SyntheticSpec {
        size: (size, size, size),
        radius: ((size as f64 / 10.0).max(1.0), (size as f64 / 5.0).max(1.0)),
        noise_sigma: noise,
        blur_sigma: blur,
        num_cases: 1,
        ..SyntheticSpec::default()
    }
}

/// Middle axial slice of a synthetic volume: `size²` image values followed by
/// `size²` labels.
pub fn lesion_slice(size: usize, seed: u64, noise: f64, blur: f64) -> Result<Vec<f32>, String> {
    let s = generate_synthetic(&lesion_spec(size, noise, blur), seed).map_err(|e| e.to_string())?;
    let plane = size * size;
    let z = size / 2;
    let mut out: Vec<f32> = s.image.data()[z * plane..(z + 1) * plane].iter().map(|&v| v as f32).collect();
    out.extend(s.label.data[z * plane..(z + 1) * plane].iter().map(|&l| l as f32));
    Ok(out)
}

/// Middle slice of a synthetic volume before and after the frequency filter:
/// `size²` input values followed by `size²` filtered values.
pub fn filtered_slice(
    size: usize,
    seed: u64,
    noise: f64,
    mode: &str,
    threshold: f64,
    tau: f64,
) -> Result<Vec<f32>, String> {
    let mode = parse_mode(mode)?;
    let s = generate_synthetic(&lesion_spec(size, noise, 0.0), seed).map_err(|e| e.to_string())?;
    let y = fft_filter(&s.image, mode, threshold, tau);
    let plane = size * size;
    let z = size / 2;
    let mut out: Vec<f32> = s.image.data()[z * plane..(z + 1) * plane].iter().map(|&v| v as f32).collect();
    out.extend(y.data()[z * plane..(z + 1) * plane].iter().map(|&v| v as f32));
    Ok(out)
}

/// Mask value at `n` evenly spaced normalized radii in `[0, 1]`.
pub fn mask_curve(mode: &str, threshold: f64, tau: f64, n: usize) -> Result<Vec<f32>, String> {
    let mode = parse_mode(mode)?;
    let n = n.max(2);
    Ok((0..n)
        .map(|i| mask_value(mode, i as f64 / (n - 1) as f64, threshold, tau).0 as f32)
        .collect())
}

/// Mask applied to the middle `k = 0` plane of a `size³` spectrum, with the
/// zero frequency moved to the centre for display.
pub fn mask_plane(size: usize, mode: &str, threshold: f64, tau: f64) -> Result<Vec<f32>, String> {
    let mode = parse_mode(mode)?;
    let rho = frequency_radius((1, size, size));
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (sy, sx) = ((y + size / 2) % size, (x + size / 2) % size);
            out[y * size + x] = mask_value(mode, rho[sy * size + sx], threshold, tau).0 as f32;
        }
    }
    Ok(out)
}

#[wasm_bindgen(js_name = orderPositions)]
pub fn order_positions_js(d: usize, h: usize, w: usize, k: usize, kind: &str) -> Result<Vec<u32>, JsError> {
    order_positions(d, h, w, k, kind).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = lesionSlice)]
pub fn lesion_slice_js(size: usize, seed: u32, noise: f64, blur: f64) -> Result<Vec<f32>, JsError> {
    lesion_slice(size, seed as u64, noise, blur).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = filteredSlice)]
pub fn filtered_slice_js(
    size: usize,
    seed: u32,
    noise: f64,
    mode: &str,
    threshold: f64,
    tau: f64,
) -> Result<Vec<f32>, JsError> {
    filtered_slice(size, seed as u64, noise, mode, threshold, tau).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = maskCurve)]
pub fn mask_curve_js(mode: &str, threshold: f64, tau: f64, n: usize) -> Result<Vec<f32>, JsError> {
    mask_curve(mode, threshold, tau, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = maskPlane)]
pub fn mask_plane_js(size: usize, mode: &str, threshold: f64, tau: f64) -> Result<Vec<f32>, JsError> {
    mask_plane(size, mode, threshold, tau).map_err(|e| JsError::new(&e))
}
