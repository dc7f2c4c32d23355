//! Layer and instance normalization (biased variance, epsilon inside the root).

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Normalizes `n` groups; element `j` of group `g` lives at `index(g, j)`.
fn normalize_groups(
    x: &[f64],
    groups: usize,
    len: usize,
    eps: f64,
    index: impl Fn(usize, usize) -> usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let mean = (0..len).map(|j| x[index(g, j)]).sum::<f64>() / len as f64;
        let var = (0..len)
            .map(|j| {
                let d = x[index(g, j)] - mean;
                d * d
            })
            .sum::<f64>()
            / len as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[g] = is;
        for j in 0..len {
            let i = index(g, j);
            out[i] = (x[i] - mean) * is;
        }
    }
    (out, inv_std)
}

fn normalize_backward(
    grad: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    len: usize,
    index: impl Fn(usize, usize) -> usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; grad.len()];
    for (g, &is) in inv_std.iter().enumerate() {
        let mut mg = 0.0;
        let mut mgx = 0.0;
        for j in 0..len {
            let i = index(g, j);
            mg += grad[i];
            mgx += grad[i] * xhat[i];
        }
        mg /= len as f64;
        mgx /= len as f64;
        for j in 0..len {
            let i = index(g, j);
            dx[i] = is * (grad[i] - mg - xhat[i] * mgx);
        }
    }
    dx
}

impl Graph {
    /// Normalizes each position of a `[C, L]` (or `[C, ...]`) tensor across channels.
    pub fn layer_norm_raw(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let l = t.numel() / c;
        let idx = move |g: usize, j: usize| j * l + g;
        let (out, inv_std) = normalize_groups(t.data(), l, c, eps, idx);
        let v = Tensor::new(t.shape(), out).unwrap();
        self.record(
            "layer_norm",
            v,
            &[x],
            Box::new(move |g, p, out| {
                let dx = normalize_backward(g.data(), out.data(), &inv_std, c, idx);
                vec![Some(Tensor::new(p[0].shape(), dx).unwrap())]
            }),
        )
    }

    /// Normalizes each channel of a `[C, ...]` tensor over its remaining axes.
    pub fn instance_norm_raw(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let n = t.numel() / c;
        let idx = move |g: usize, j: usize| g * n + j;
        let (out, inv_std) = normalize_groups(t.data(), c, n, eps, idx);
        let v = Tensor::new(t.shape(), out).unwrap();
        self.record(
            "instance_norm",
            v,
            &[x],
            Box::new(move |g, p, out| {
                let dx = normalize_backward(g.data(), out.data(), &inv_std, n, idx);
                vec![Some(Tensor::new(p[0].shape(), dx).unwrap())]
            }),
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let n = self.layer_norm_raw(x, NORM_EPS);
        self.channel_affine(n, gamma, beta)
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let n = self.instance_norm_raw(x, NORM_EPS);
        self.channel_affine(n, gamma, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3, 4], 2.5));
        let y = g.layer_norm_raw(x, NORM_EPS);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let z = g.instance_norm_raw(x, NORM_EPS);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_values_map_to_minus_one_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
        let y = g.layer_norm_raw(x, 0.0);
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn instance_norm_is_per_channel() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 2, 1, 1], vec![1.0, 3.0, 5.0, 9.0]).unwrap());
        let y = g.instance_norm_raw(x, 0.0);
        assert_eq!(g.value(y).data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn length_one_group_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[1, 3], vec![4.0, -2.0, 7.0]).unwrap());
        let y = g.layer_norm_raw(x, NORM_EPS);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
