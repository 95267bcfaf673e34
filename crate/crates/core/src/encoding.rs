//! Sinusoidal positional encoding with windowed (coarse-to-fine) band easing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosEncConfig {
    pub num_bands: usize,
    pub include_input: bool,
    /// Easing position in `[0, num_bands]`; `num_bands` means fully open.
    pub progress: f64,
}

impl PosEncConfig {
    /// Fully eased-in encoding.
    pub fn new(num_bands: usize, include_input: bool) -> Self {
        Self { num_bands, include_input, progress: num_bands as f64 }
    }

    pub fn with_progress(mut self, progress: f64) -> Self {
        self.progress = progress.clamp(0.0, self.num_bands as f64);
        self
    }

    /// Encoded width for a `dim`-dimensional input.
    pub fn output_dim(&self, dim: usize) -> usize {
        dim * usize::from(self.include_input) + 2 * dim * self.num_bands
    }
}

/// Per-band easing weights `w_k = (1 - cos(pi * clamp(progress - k, 0, 1))) / 2`.
pub fn window_weights(cfg: &PosEncConfig) -> Vec<f64> {
    (0..cfg.num_bands)
        .map(|k| {
            let x = (cfg.progress - k as f64).clamp(0.0, 1.0);
            0.5 * (1.0 - (PI * x).cos())
        })
        .collect()
}

/// Linear easing schedule: `L * min(iteration / ease_iters, 1)`.
pub fn progress_at(iteration: u64, ease_iters: u64, num_bands: usize) -> f64 {
    assert!(ease_iters > 0, "ease_iters must be positive");
    num_bands as f64 * (iteration as f64 / ease_iters as f64).min(1.0)
}

/// Precomputed band frequencies and weights for repeated encoding.
#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub cfg: PosEncConfig,
    freqs: Vec<F>,
    weights: Vec<F>,
}

impl<F: Real> Encoder<F> {
    pub fn new(cfg: PosEncConfig) -> Self {
        let freqs = (0..cfg.num_bands).map(|k| F::of(2f64.powi(k as i32) * PI)).collect();
        let weights = window_weights(&cfg).into_iter().map(F::of).collect();
        Self { cfg, freqs, weights }
    }

    pub fn output_dim(&self, dim: usize) -> usize {
        self.cfg.output_dim(dim)
    }

    /// Writes `[v?, w_0 sin(pi v), w_0 cos(pi v), w_1 sin(2 pi v), ...]`
    /// into `out`, each sin/cos block spanning all input dimensions.
    pub fn encode_into(&self, v: &[F], out: &mut [F]) {
        let d = v.len();
        debug_assert_eq!(out.len(), self.output_dim(d));
        let mut o = 0;
        if self.cfg.include_input {
            out[..d].copy_from_slice(v);
            o = d;
        }
        for (&f, &w) in self.freqs.iter().zip(&self.weights) {
            let (sin, cos) = out[o..o + 2 * d].split_at_mut(d);
            if w == F::zero() {
                sin.fill(F::zero());
                cos.fill(F::zero());
            } else {
                for i in 0..d {
                    let (s, c) = (f * v[i]).sin_cos();
                    sin[i] = w * s;
                    cos[i] = w * c;
                }
            }
            o += 2 * d;
        }
    }

    /// Accumulates `d(out)/d(v)^T * grad_out` into `grad_in`.
    pub fn backward_into(&self, v: &[F], grad_out: &[F], grad_in: &mut [F]) {
        let d = v.len();
        let mut o = 0;
        if self.cfg.include_input {
            for i in 0..d {
                grad_in[i] += grad_out[i];
            }
            o = d;
        }
        for (&f, &w) in self.freqs.iter().zip(&self.weights) {
            if w != F::zero() {
                let wf = w * f;
                for i in 0..d {
                    let (s, c) = (f * v[i]).sin_cos();
                    grad_in[i] += wf * (c * grad_out[o + i] - s * grad_out[o + d + i]);
                }
            }
            o += 2 * d;
        }
    }

    pub fn encode(&self, v: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); self.output_dim(v.len())];
        self.encode_into(v, &mut out);
        out
    }
}

pub fn posenc<F: Real>(v: &[F], cfg: &PosEncConfig) -> Vec<F> {
    Encoder::new(*cfg).encode(v)
}
