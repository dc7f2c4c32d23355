//! Direct 3-D convolution (cross-correlation, PyTorch convention) and
//! nearest-neighbour upsampling.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Output indices `o` in `[lo, hi)` whose input tap `o·s + t − p` lands in `[0, n)`.
fn valid_range(t: usize, pad: usize, stride: usize, n: usize, out_n: usize) -> (usize, usize) {
    let lo = if pad > t { (pad - t).div_ceil(stride) } else { 0 };
    let hi = if n + pad > t {
        ((n - 1 + pad - t) / stride + 1).min(out_n)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: (usize, usize, usize),
    out: (usize, usize, usize),
}

impl Geometry {
    /// Visits every contiguous output-row segment touched by one weight tap:
    /// `f(weight_index, out_offset, in_offset, len)`; input advances by `stride`.
    fn for_each_segment(&self, oc: usize, ic: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (d, h, w) = self.inp;
        let (od_n, oh_n, ow_n) = self.out;
        let (k, s, p) = (self.k, self.stride, self.pad);
        let in_base = ic * d * h * w;
        let out_base = oc * od_n * oh_n * ow_n;
        for kd in 0..k {
            let (d_lo, d_hi) = valid_range(kd, p, s, d, od_n);
            for kh in 0..k {
                let (h_lo, h_hi) = valid_range(kh, p, s, h, oh_n);
                for kw in 0..k {
                    let (w_lo, w_hi) = valid_range(kw, p, s, w, ow_n);
                    if w_lo >= w_hi {
                        continue;
                    }
                    let widx = (((oc * self.cin + ic) * k + kd) * k + kh) * k + kw;
                    for od in d_lo..d_hi {
                        let id = od * s + kd - p;
                        for oh in h_lo..h_hi {
                            let ih = oh * s + kh - p;
                            let out_off = out_base + (od * oh_n + oh) * ow_n + w_lo;
                            let in_off = in_base + (id * h + ih) * w + w_lo * s + kw - p;
                            f(widx, out_off, in_off, w_hi - w_lo);
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Geometry> {
    if x.ndim() != 4 || w.ndim() != 5 {
        return Err(Error::Config(format!(
            "conv3d expects x [C,D,H,W] and w [Co,Ci,k,k,k], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let k = w.shape()[2];
    if w.shape()[3] != k || w.shape()[4] != k {
        return Err(Error::Config(format!("conv3d kernel must be cubic, got {:?}", w.shape())));
    }
    if w.shape()[1] != x.shape()[0] {
        return Err(Error::Config(format!(
            "conv3d: input has {} channels but kernel expects {}",
            x.shape()[0],
            w.shape()[1]
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv3d stride must be positive".into()));
    }
    let (d, h, ww) = x.dims3();
    for n in [d, h, ww] {
        if n + 2 * pad < k {
            return Err(Error::Config(format!(
                "conv3d: extent {n} with padding {pad} smaller than kernel {k}"
            )));
        }
    }
    Ok(Geometry {
        cin: x.shape()[0],
        cout: w.shape()[0],
        k,
        stride,
        pad,
        inp: (d, h, ww),
        out: (
            conv_out_extent(d, k, stride, pad),
            conv_out_extent(h, k, stride, pad),
            conv_out_extent(ww, k, stride, pad),
        ),
    })
}

/// Plain forward convolution without graph recording.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let geo = geometry(x, w, stride, pad)?;
    Ok(forward_impl(&geo, x, w, b))
}

fn forward_impl(geo: &Geometry, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (od, oh, ow) = geo.out;
    let plane = od * oh * ow;
    let mut out = vec![0.0; geo.cout * plane];
    if let Some(b) = b {
        for (oc, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(b.data()[oc]);
        }
    }
    let (xd, wd, s) = (x.data(), w.data(), geo.stride);
    for oc in 0..geo.cout {
        for ic in 0..geo.cin {
            geo.for_each_segment(oc, ic, |widx, o, i, n| {
                let wv = wd[widx];
                if wv == 0.0 {
                    return;
                }
                let dst = &mut out[o..o + n];
                if s == 1 {
                    for (a, &xv) in dst.iter_mut().zip(&xd[i..i + n]) {
                        *a += wv * xv;
                    }
                } else {
                    for (j, a) in dst.iter_mut().enumerate() {
                        *a += wv * xd[i + j * s];
                    }
                }
            });
        }
    }
    Tensor::new(&[geo.cout, od, oh, ow], out).unwrap()
}

impl Graph {
    /// 3-D convolution; `padding = (k − 1) / 2` gives "same" extents at stride 1.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geo = geometry(self.value(x), self.value(w), stride, pad)?;
        let v = forward_impl(&geo, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        let has_bias = b.is_some();
        let need_dx = self.requires_grad(x);
        Ok(self.record(
            "conv3d",
            v,
            &parents,
            Box::new(move |g, p, _| {
                let (xt, wt) = (p[0], p[1]);
                let (xd, wd, gd, s) = (xt.data(), wt.data(), g.data(), geo.stride);
                let mut dx = if need_dx { vec![0.0; xt.numel()] } else { Vec::new() };
                let mut dw = vec![0.0; wt.numel()];
                for oc in 0..geo.cout {
                    for ic in 0..geo.cin {
                        geo.for_each_segment(oc, ic, |widx, o, i, n| {
                            let wv = wd[widx];
                            let gs = &gd[o..o + n];
                            let mut acc = 0.0;
                            if !need_dx {
                                for (j, &gv) in gs.iter().enumerate() {
                                    acc += gv * xd[i + j * s];
                                }
                            } else if s == 1 {
                                let xs = &xd[i..i + n];
                                let dxs = &mut dx[i..i + n];
                                for j in 0..n {
                                    acc += gs[j] * xs[j];
                                    dxs[j] += wv * gs[j];
                                }
                            } else {
                                for (j, &gv) in gs.iter().enumerate() {
                                    acc += gv * xd[i + j * s];
                                    dx[i + j * s] += wv * gv;
                                }
                            }
                            dw[widx] += acc;
                        });
                    }
                }
                let mut res = vec![
                    need_dx.then(|| Tensor::new(xt.shape(), dx).unwrap()),
                    Some(Tensor::new(wt.shape(), dw).unwrap()),
                ];
                if has_bias {
                    let plane = gd.len() / geo.cout;
                    let db = gd.chunks(plane).map(|c| c.iter().sum()).collect();
                    res.push(Some(Tensor::new(&[geo.cout], db).unwrap()));
                }
                res
            }),
        ))
    }

    /// Nearest-neighbour ×2 upsampling of every spatial axis.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let (d, h, w) = t.dims3();
        let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
        let mut out = vec![0.0; c * d2 * h2 * w2];
        for ci in 0..c {
            for z in 0..d2 {
                for y in 0..h2 {
                    let src = ((ci * d + z / 2) * h + y / 2) * w;
                    let dst = ((ci * d2 + z) * h2 + y) * w2;
                    for xx in 0..w2 {
                        out[dst + xx] = t.data()[src + xx / 2];
                    }
                }
            }
        }
        let v = Tensor::new(&[c, d2, h2, w2], out).unwrap();
        self.record(
            "upsample2",
            v,
            &[x],
            Box::new(move |g, p, _| {
                let mut dx = Tensor::zeros(p[0].shape());
                let gd = g.data();
                let dd = dx.data_mut();
                for ci in 0..c {
                    for z in 0..d2 {
                        for y in 0..h2 {
                            let src = ((ci * d + z / 2) * h + y / 2) * w;
                            let dst = ((ci * d2 + z) * h2 + y) * w2;
                            for xx in 0..w2 {
                                dd[src + xx / 2] += gd[dst + xx];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}
