//! Parameter initialization and small reusable blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Seeded source for initial weights; creation order fixes the stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        if bound == 0.0 {
            return Tensor::zeros(shape);
        }
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..bound))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// He-uniform bound for a ReLU-family activation.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// `conv → instance norm → silu`.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let w = init.uniform(&[cout, cin, k, k, k], he_bound(cin * k * k * k));
        Ok(ConvBlock {
            w: store.add(format!("{prefix}.w"), w)?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[cout]))?,
            gamma: store.add(format!("{prefix}.norm.gamma"), Tensor::full(&[cout], 1.0))?,
            beta: store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[cout]))?,
            stride,
            pad: (k - 1) / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.conv3d(x, w, Some(b), self.stride, self.pad)?;
        let (gm, bt) = (g.param(store, self.gamma), g.param(store, self.beta));
        let y = g.instance_norm(y, gm, bt);
        Ok(g.silu(y))
    }
}

/// Plain convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bound: Option<f64>,
    ) -> Result<Self> {
        let bound = bound.unwrap_or_else(|| he_bound(cin * k * k * k));
        Ok(Conv {
            w: store.add(format!("{prefix}.w"), init.uniform(&[cout, cin, k, k, k], bound))?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[cout]))?,
            stride,
            pad: (k - 1) / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv3d(x, w, Some(b), self.stride, self.pad)
    }
}
