//! Voxel orderings that flatten a `D×H×W` grid into a 1-D sequence.
//!
//! `forward[s]` is the linear voxel index (`d·H·W + h·W + w`) visited at
//! sequence position `s`. Slice orders are plain raster scans. Local orders
//! group each per-slice `k×k` window into consecutive positions; the
//! across-slice variant additionally stacks a window's whole depth tube.
//! Extents that `k` does not divide are handled on the zero-padded grid with
//! pad positions dropped, so `forward` stays a bijection on real voxels.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderKind {
    SliceF,
    SliceR,
    LocalF,
    LocalR,
    LocalS,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowVariant {
    WithinSlice,
    AcrossSlice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    forward: Vec<usize>,
    inverse: Vec<usize>,
    dims: (usize, usize, usize),
    kind: OrderKind,
    window: Option<usize>,
}

impl ScanOrder {
    fn from_forward(
        forward: Vec<usize>,
        dims: (usize, usize, usize),
        kind: OrderKind,
        window: Option<usize>,
    ) -> Self {
        let mut inverse = vec![usize::MAX; forward.len()];
        for (s, &v) in forward.iter().enumerate() {
            debug_assert_eq!(inverse[v], usize::MAX, "voxel {v} visited twice");
            inverse[v] = s;
        }
        ScanOrder {
            forward,
            inverse,
            dims,
            kind,
            window,
        }
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn kind(&self) -> OrderKind {
        self.kind
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// The same voxels visited back to front.
    pub fn reversed(&self) -> ScanOrder {
        let kind = match self.kind {
            OrderKind::SliceF => OrderKind::SliceR,
            OrderKind::SliceR => OrderKind::SliceF,
            OrderKind::LocalF => OrderKind::LocalR,
            OrderKind::LocalR => OrderKind::LocalF,
            OrderKind::LocalS => OrderKind::LocalS,
        };
        let forward = self.forward.iter().rev().copied().collect();
        ScanOrder::from_forward(forward, self.dims, kind, self.window)
    }
}

fn check_dims(dims: (usize, usize, usize)) -> Result<()> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(Error::Config(format!("scan order dims must be positive, got {dims:?}")));
    }
    Ok(())
}

/// Raster order, depth outermost: the identity permutation.
pub fn slice_forward_order(dims: (usize, usize, usize)) -> Result<ScanOrder> {
    check_dims(dims)?;
    let l = dims.0 * dims.1 * dims.2;
    Ok(ScanOrder::from_forward((0..l).collect(), dims, OrderKind::SliceF, None))
}

pub fn slice_reverse_order(dims: (usize, usize, usize)) -> Result<ScanOrder> {
    Ok(slice_forward_order(dims)?.reversed())
}

pub fn local_window_order(
    dims: (usize, usize, usize),
    k: usize,
    variant: WindowVariant,
) -> Result<ScanOrder> {
    check_dims(dims)?;
    let (d, h, w) = dims;
    if k == 0 || k > h || k > w {
        return Err(Error::Config(format!(
            "window size {k} must be in [1, min(H, W)] for slice {h}×{w}"
        )));
    }
    let (gh, gw) = (h.div_ceil(k), w.div_ceil(k));
    let mut forward = Vec::with_capacity(d * h * w);
    let push_window = |z: usize, wy: usize, wx: usize, out: &mut Vec<usize>| {
        for y in wy * k..((wy + 1) * k).min(h) {
            for x in wx * k..((wx + 1) * k).min(w) {
                out.push((z * h + y) * w + x);
            }
        }
    };
    let kind = match variant {
        WindowVariant::WithinSlice => {
            for z in 0..d {
                for wy in 0..gh {
                    for wx in 0..gw {
                        push_window(z, wy, wx, &mut forward);
                    }
                }
            }
            OrderKind::LocalF
        }
        WindowVariant::AcrossSlice => {
            for wy in 0..gh {
                for wx in 0..gw {
                    for z in 0..d {
                        push_window(z, wy, wx, &mut forward);
                    }
                }
            }
            OrderKind::LocalS
        }
    };
    Ok(ScanOrder::from_forward(forward, dims, kind, Some(k)))
}

/// Builds the order for any kind; `k` is ignored by slice kinds.
pub fn build_order(kind: OrderKind, dims: (usize, usize, usize), k: usize) -> Result<ScanOrder> {
    match kind {
        OrderKind::SliceF => slice_forward_order(dims),
        OrderKind::SliceR => slice_reverse_order(dims),
        OrderKind::LocalF => local_window_order(dims, k, WindowVariant::WithinSlice),
        OrderKind::LocalR => Ok(local_window_order(dims, k, WindowVariant::WithinSlice)?.reversed()),
        OrderKind::LocalS => local_window_order(dims, k, WindowVariant::AcrossSlice),
    }
}

fn check_match(x: &Tensor, o: &ScanOrder) -> Result<()> {
    if x.ndim() != 4 || x.dims3() != o.dims {
        return Err(Error::Usage(format!(
            "order built for {:?} applied to tensor {:?}",
            o.dims,
            x.shape()
        )));
    }
    Ok(())
}

fn gather(src: &[f64], idx: &[usize], c: usize) -> Vec<f64> {
    let l = idx.len();
    let mut out = Vec::with_capacity(c * l);
    for ch in src.chunks(l) {
        out.extend(idx.iter().map(|&i| ch[i]));
    }
    out
}

/// `out[c, s] = x[c, forward[s]]`.
pub fn apply_order(x: &Tensor, o: &ScanOrder) -> Result<Tensor> {
    check_match(x, o)?;
    let c = x.shape()[0];
    Tensor::new(&[c, o.len()], gather(x.data(), &o.forward, c))
}

/// Inverse of [`apply_order`]: scatters a `[C, L]` sequence back to `[C, D, H, W]`.
pub fn unapply_order(seq: &Tensor, o: &ScanOrder) -> Result<Tensor> {
    if seq.ndim() != 2 || seq.shape()[1] != o.len() {
        return Err(Error::Usage(format!(
            "sequence {:?} does not match order length {}",
            seq.shape(),
            o.len()
        )));
    }
    let c = seq.shape()[0];
    let (d, h, w) = o.dims;
    Tensor::new(&[c, d, h, w], gather(seq.data(), &o.inverse, c))
}

impl Graph {
    pub fn apply_order(&mut self, x: Var, o: &Arc<ScanOrder>) -> Result<Var> {
        let v = apply_order(self.value(x), o)?;
        let o = Arc::clone(o);
        Ok(self.record(
            "apply_order",
            v,
            &[x],
            Box::new(move |g, _, _| vec![Some(unapply_order(g, &o).unwrap())]),
        ))
    }

    pub fn unapply_order(&mut self, seq: Var, o: &Arc<ScanOrder>) -> Result<Var> {
        let v = unapply_order(self.value(seq), o)?;
        let o = Arc::clone(o);
        Ok(self.record(
            "unapply_order",
            v,
            &[seq],
            Box::new(move |g, _, _| vec![Some(apply_order(g, &o).unwrap())]),
        ))
    }
}

/// Sequence spans of same-window voxel groups within one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityStats {
    pub window: usize,
    pub windows: usize,
    /// Largest `max position − min position` over all per-slice windows.
    pub max_span_local: usize,
    pub max_span_slice: usize,
    pub mean_span_local: f64,
    pub mean_span_slice: f64,
}

fn window_spans(o: &ScanOrder, k: usize) -> Vec<usize> {
    let (d, h, w) = o.dims;
    let mut spans = Vec::new();
    for z in 0..d {
        for wy in 0..h.div_ceil(k) {
            for wx in 0..w.div_ceil(k) {
                let mut lo = usize::MAX;
                let mut hi = 0;
                for y in wy * k..((wy + 1) * k).min(h) {
                    for x in wx * k..((wx + 1) * k).min(w) {
                        let s = o.inverse[(z * h + y) * w + x];
                        lo = lo.min(s);
                        hi = hi.max(s);
                    }
                }
                spans.push(hi - lo);
            }
        }
    }
    spans
}

pub fn locality_stats(dims: (usize, usize, usize), k: usize) -> Result<LocalityStats> {
    let local = local_window_order(dims, k, WindowVariant::WithinSlice)?;
    let slice = slice_forward_order(dims)?;
    let sl = window_spans(&local, k);
    let ss = window_spans(&slice, k);
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    Ok(LocalityStats {
        window: k,
        windows: sl.len(),
        max_span_local: sl.iter().copied().max().unwrap_or(0),
        max_span_slice: ss.iter().copied().max().unwrap_or(0),
        mean_span_local: mean(&sl),
        mean_span_slice: mean(&ss),
    })
}
