//! FFT-gated fusion of a spatial branch with a frequency-filtered branch.
//!
//! ```text
//! x_s   = ConvBlock_in(x)
//! x_fre = Re(IFFT(mask(ρ) ⊙ FFT(x_s)))
//! gate  = sigmoid(Conv3(concat(x_fre, x_s)))        one channel
//! out   = ConvBlock_out(x_s ⊙ gate + x_fre ⊙ (1 − gate)) + x
//! ```
//!
//! The filter thresholds are learnable scalars applied to the normalized
//! radial frequency `ρ ∈ [0, 1]` through a sigmoid soft mask of sharpness `τ`:
//! `σ((f_low − ρ)/τ) / σ(f_low/τ)` keeps low frequencies (exactly 1 at DC),
//! `σ((ρ − f_high)/τ)` keeps high ones. `τ = 0` selects the hard indicator
//! (no threshold gradient).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fft::{fft3, ifft3};
use crate::graph::{Graph, Var};
use crate::nn::{ConvBlock, Init};
use crate::ops::sigmoid;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{ComplexTensor, Tensor};

pub const F_LOW_INIT: f64 = 0.1;
pub const F_HIGH_INIT: f64 = 0.9;
pub const THRESHOLD_MIN: f64 = 0.01;
pub const THRESHOLD_MAX: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    LowPass,
    HighPass,
}

/// Signed FFT frequency of bin `i` for extent `n`, in cycles per sample.
fn signed_freq(i: usize, n: usize) -> f64 {
    let k = if i <= (n - 1) / 2 { i as f64 } else { i as f64 - n as f64 };
    k / n as f64
}

/// Normalized radius of every bin of a `D×H×W` spectrum:
/// `‖(u/D, v/H, w/W)‖ / ‖(½, ½, ½)‖`.
pub fn frequency_radius(dims: (usize, usize, usize)) -> Vec<f64> {
    let (d, h, w) = dims;
    let norm = (0.75f64).sqrt();
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let fz = signed_freq(z, d);
        for y in 0..h {
            let fy = signed_freq(y, h);
            for x in 0..w {
                let fx = signed_freq(x, w);
                out.push((fz * fz + fy * fy + fx * fx).sqrt() / norm);
            }
        }
    }
    out
}

/// Mask value and its derivative with respect to the active threshold.
pub fn mask_value(mode: FilterMode, rho: f64, threshold: f64, tau: f64) -> (f64, f64) {
    if tau <= 0.0 {
        let m = match mode {
            FilterMode::LowPass => (rho < threshold) as u8 as f64,
            FilterMode::HighPass => (rho > threshold) as u8 as f64,
        };
        return (m, 0.0);
    }
    match mode {
        FilterMode::LowPass => {
            // Normalized so the DC bin always passes unchanged.
            let s = sigmoid((threshold - rho) / tau);
            let s0 = sigmoid(threshold / tau);
            let m = s / s0;
            (m, m * (s0 - s) / tau)
        }
        FilterMode::HighPass => {
            let m = sigmoid((rho - threshold) / tau);
            (m, -m * (1.0 - m) / tau)
        }
    }
}

/// Non-differentiable filter, also used by the browser demo.
pub fn fft_filter(x: &Tensor, mode: FilterMode, threshold: f64, tau: f64) -> Tensor {
    let rho = frequency_radius(x.dims3());
    let mut spec = fft3(x);
    let n = rho.len();
    for (i, v) in spec.data.iter_mut().enumerate() {
        *v *= mask_value(mode, rho[i % n], threshold, tau).0;
    }
    ifft3(&spec).real()
}

impl Graph {
    /// Differentiable in `x` and in the scalar `threshold` (`f_low` for
    /// low-pass, `f_high` for high-pass).
    pub fn fft_filter(&mut self, x: Var, threshold: Var, mode: FilterMode, tau: f64) -> Var {
        let xt = self.value(x);
        let thr = self.value(threshold).item();
        let dims = xt.dims3();
        let rho = frequency_radius(dims);
        let n = rho.len();
        let (mask, dmask): (Vec<f64>, Vec<f64>) =
            rho.iter().map(|&r| mask_value(mode, r, thr, tau)).unzip();
        let spectrum = fft3(xt);
        let mut filtered = spectrum.clone();
        for (i, v) in filtered.data.iter_mut().enumerate() {
            *v *= mask[i % n];
        }
        let out = ifft3(&filtered).real();
        self.record(
            "fft_filter",
            out,
            &[x, threshold],
            Box::new(move |g, _, _| {
                // The filter is a self-adjoint real-linear map for a fixed mask.
                let gspec = fft3(g);
                let mut back = ComplexTensor {
                    shape: gspec.shape.clone(),
                    data: gspec.data.clone(),
                };
                for (i, v) in back.data.iter_mut().enumerate() {
                    *v *= mask[i % n];
                }
                let dx = ifft3(&back).real();
                // dL/dm_k = Re(X_k · conj(G_k)) / N, summed over channels.
                let dthr: f64 = spectrum
                    .data
                    .iter()
                    .zip(&gspec.data)
                    .enumerate()
                    .map(|(i, (xk, gk)): (usize, (&Complex64, &Complex64))| {
                        (xk * gk.conj()).re * dmask[i % n]
                    })
                    .sum::<f64>()
                    / n as f64;
                vec![Some(dx), Some(Tensor::scalar(dthr))]
            }),
        )
    }
}

#[derive(Debug, Clone)]
pub struct FgmConfig {
    pub channels: usize,
    pub mode: FilterMode,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct Fgm {
    pub conv_in: ConvBlock,
    pub f_low: ParamId,
    pub f_high: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub conv_out: ConvBlock,
    pub mode: FilterMode,
    pub tau: f64,
}

/// Intermediate tensors of one FGM evaluation.
pub struct FgmTrace {
    pub x_s: Var,
    pub x_fre: Var,
    pub gate: Var,
    pub fused: Var,
    pub out: Var,
}

impl Fgm {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, cfg: &FgmConfig) -> Result<Self> {
        let c = cfg.channels;
        let conv_in = ConvBlock::new(store, init, &format!("{prefix}.conv_in"), c, c, 3, 1)?;
        let f_low = store.add(format!("{prefix}.f_low"), Tensor::scalar(F_LOW_INIT))?;
        let f_high = store.add(format!("{prefix}.f_high"), Tensor::scalar(F_HIGH_INIT))?;
        let bound = 1.0 / ((2 * c * 27) as f64).sqrt();
        let gate_w = store.add(format!("{prefix}.gate.w"), init.uniform(&[1, 2 * c, 3, 3, 3], bound))?;
        let gate_b = store.add(format!("{prefix}.gate.b"), Tensor::zeros(&[1]))?;
        let conv_out = ConvBlock::new(store, init, &format!("{prefix}.conv_out"), c, c, 3, 1)?;
        Ok(Fgm {
            conv_in,
            f_low,
            f_high,
            gate_w,
            gate_b,
            conv_out,
            mode: cfg.mode,
            tau: cfg.tau,
        })
    }

    pub fn threshold(&self) -> ParamId {
        match self.mode {
            FilterMode::LowPass => self.f_low,
            FilterMode::HighPass => self.f_high,
        }
    }

    pub fn trace(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<FgmTrace> {
        let x_s = self.conv_in.forward(g, store, x)?;
        let thr = g.param(store, self.threshold());
        let x_fre = g.fft_filter(x_s, thr, self.mode, self.tau);
        let both = g.concat_channels(&[x_fre, x_s]);
        let (gw, gb) = (g.param(store, self.gate_w), g.param(store, self.gate_b));
        let logits = g.conv3d(both, gw, Some(gb), 1, 1)?;
        let gate = g.sigmoid(logits);
        let inv = g.affine(gate, -1.0, 1.0);
        let a = g.mul_bcast_channel(x_s, gate);
        let b = g.mul_bcast_channel(x_fre, inv);
        let fused = g.add(a, b);
        let y = self.conv_out.forward(g, store, fused)?;
        let out = g.add(y, x);
        Ok(FgmTrace { x_s, x_fre, gate, fused, out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.trace(g, store, x)?.out)
    }

    /// Keeps both thresholds inside `[0.01, 0.99]`; call after each optimizer step.
    pub fn clamp_thresholds(&self, store: &mut ParamStore) {
        for id in [self.f_low, self.f_high] {
            for v in store.get_mut(id).tensor.data_mut() {
                *v = v.clamp(THRESHOLD_MIN, THRESHOLD_MAX);
            }
        }
    }
}
