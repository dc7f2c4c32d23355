use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn check_labels(logits: &Tensor, labels: &[u8]) -> Result<(usize, usize)> {
    let k = logits.shape()[0];
    let n = logits.numel() / k;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} labels for {} voxels",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    Ok((k, n))
}

/// Per-voxel softmax over the class axis of `[K, ...]` logits.
fn softmax(logits: &Tensor, k: usize, n: usize) -> Vec<f64> {
    let x = logits.data();
    let mut p = vec![0.0; x.len()];
    for v in 0..n {
        let m = (0..k).map(|c| x[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..k {
            let e = (x[c * n + v] - m).exp();
            p[c * n + v] = e;
            z += e;
        }
        for c in 0..k {
            p[c * n + v] /= z;
        }
    }
    p
}

/// Mean voxelwise cross-entropy without recording a graph.
pub fn softmax_cross_entropy_value(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    let (k, n) = check_labels(logits, labels)?;
    let x = logits.data();
    let mut total = 0.0;
    for (v, &l) in labels.iter().enumerate() {
        let m = (0..k).map(|c| x[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..k).map(|c| (x[c * n + v] - m).exp()).sum::<f64>().ln();
        total += lse - x[l as usize * n + v];
    }
    Ok(total / n as f64)
}

impl Graph {
    /// Mean over voxels of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let lt = self.value(logits);
        let (k, n) = check_labels(lt, labels)?;
        let loss = softmax_cross_entropy_value(lt, labels)?;
        let labels = labels.to_vec();
        Ok(self.record(
            "softmax_ce",
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g, p, _| {
                let mut d = softmax(p[0], k, n);
                for (v, &l) in labels.iter().enumerate() {
                    d[l as usize * n + v] -= 1.0;
                }
                let s = g.item() / n as f64;
                for x in d.iter_mut() {
                    *x *= s;
                }
                vec![Some(Tensor::new(p[0].shape(), d).unwrap())]
            }),
        ))
    }
}
