//! Differentiable operators recorded on a [`Graph`](crate::graph::Graph).

mod basic;
mod conv;
mod loss;
mod norm;

pub use conv::{conv3d_forward, conv_out_extent};
pub use loss::softmax_cross_entropy_value;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 20.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}
