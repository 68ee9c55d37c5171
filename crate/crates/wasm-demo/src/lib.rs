//! Browser bindings for a few signal operations. Each exported function has
//! a plain Rust twin (without the `js_` prefix) so the logic can be tested
//! natively.

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use wasm_bindgen::prelude::*;
use warpada::signal::{integer_warp_oracle, warp_series, TimeSeries};
use warpada::warp::{make_path, WarpParams};

/// Smooth random warp path: uniform noise summed over `smooth` samples,
/// exponentiated into a positive speed profile, then constrained.
pub fn random_path(n: usize, phi_max: f64, half_width: usize, smooth: usize, seed: u64) -> Result<Vec<f64>, String> {
    let smooth = smooth.max(1);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n + smooth).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = (smooth as f64).sqrt();
    let phi = (0..n)
        .map(|i| (raw[i..i + smooth].iter().sum::<f64>() / norm).exp())
        .collect();
    let params = WarpParams::new(phi).map_err(|e| e.to_string())?;
    make_path(&params, phi_max, half_width)
        .map(|p| p.displacements)
        .map_err(|e| e.to_string())
}

/// Sum of sinusoids `Σ sin(2π·f·t/n)` with the given frequencies.
pub fn test_signal(n: usize, frequencies: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|t| {
            frequencies
                .iter()
                .map(|f| (2.0 * std::f64::consts::PI * f * t as f64 / n as f64).sin())
                .sum()
        })
        .collect()
}

pub fn warp(signal: &[f64], path: &[f64], half_width: usize) -> Result<Vec<f64>, String> {
    let x = TimeSeries::univariate(signal.to_vec(), 0, "demo").map_err(|e| e.to_string())?;
    let y = warp_series(&x, path, half_width).map_err(|e| e.to_string())?;
    Ok(y.channel(0).to_vec())
}

/// Largest difference between the phase-shift warp and direct index
/// remapping after rounding the path to whole samples.
pub fn oracle_gap(signal: &[f64], path: &[f64], half_width: usize) -> Result<f64, String> {
    let rounded: Vec<f64> = path.iter().map(|v| v.round()).collect();
    let x = TimeSeries::univariate(signal.to_vec(), 0, "demo").map_err(|e| e.to_string())?;
    let a = warp_series(&x, &rounded, half_width).map_err(|e| e.to_string())?;
    let b = integer_warp_oracle(&x, &rounded).map_err(|e| e.to_string())?;
    Ok(a.channel(0)
        .iter()
        .zip(b.channel(0))
        .fold(0.0, |m, (u, v)| f64::max(m, (u - v).abs())))
}

#[wasm_bindgen]
pub fn js_random_path(n: usize, phi_max: f64, half_width: usize, smooth: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    random_path(n, phi_max, half_width, smooth, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn js_test_signal(n: usize, frequencies: Vec<f64>) -> Vec<f64> {
    test_signal(n, &frequencies)
}

#[wasm_bindgen]
pub fn js_warp(signal: Vec<f64>, path: Vec<f64>, half_width: usize) -> Result<Vec<f64>, JsError> {
    warp(&signal, &path, half_width).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn js_oracle_gap(signal: Vec<f64>, path: Vec<f64>, half_width: usize) -> Result<f64, JsError> {
    oracle_gap(&signal, &path, half_width).map_err(|e| JsError::new(&e))
}
