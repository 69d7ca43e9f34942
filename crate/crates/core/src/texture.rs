//! Procedural tissue-like ground truth for the simulator.
//!
//! Bright cell membranes (thin Gaussian rings) over a slowly varying
//! background, roughly resembling gastric mucosa under CLE.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frame::{DenseFrame, Grid};

/// Deterministic tissue texture in [0, 1].
pub fn tissue_texture(width: usize, height: usize, seed: u64) -> DenseFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Grid::new(width, height, 0.0f64);

    // background: a handful of long-wavelength plane waves
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let period = rng.random_range(60.0..260.0);
            let angle = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.04..0.10);
            let k = 2.0 * PI / period;
            (k * angle.cos(), k * angle.sin(), phase, amp)
        })
        .collect();
    for y in 0..height {
        for x in 0..width {
            let mut v = 0.35;
            for &(kx, ky, phase, amp) in &waves {
                v += amp * (kx * x as f64 + ky * y as f64 + phase).sin();
            }
            acc[(x, y)] = v.max(0.0);
        }
    }

    let n_cells = (width * height) / 110 + 1;
    for _ in 0..n_cells {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let radius = rng.random_range(2.5..7.5);
        let thickness = rng.random_range(0.8..1.6);
        let brightness = rng.random_range(0.15..0.55);
        let nucleus = rng.random_range(0.0..0.25);
        let reach = radius + 3.0 * thickness;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(width.saturating_sub(1));
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(height.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let ring = (-(d - radius).powi(2) / (2.0 * thickness * thickness)).exp();
                let core = (-(d * d) / (2.0 * (0.4 * radius).powi(2))).exp();
                acc[(x, y)] += brightness * ring + nucleus * core;
            }
        }
    }

    // soft saturation keeps everything inside [0, 1)
    DenseFrame::from_clamped(acc.map(|&v| 1.0 - (-1.3 * v).exp()))
}
