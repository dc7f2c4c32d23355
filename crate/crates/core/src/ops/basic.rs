use super::{sigmoid, silu, softplus};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record("add", v, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record("sub", v, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scale(-1.0))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record(
            "mul",
            v,
            &[a, b],
            Box::new(|g, p, _| {
                vec![
                    Some(g.zip_map(p[1], |g, y| g * y)),
                    Some(g.zip_map(p[0], |g, x| g * x)),
                ]
            }),
        )
    }

    /// Sum of several same-shape tensors, accumulated in argument order.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut v = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            v.add_assign(self.value(x));
        }
        let n = xs.len();
        self.record("add_n", v, xs, Box::new(move |g, _, _| vec![Some(g.clone()); n]))
    }

    /// `a·x + b` with constant scalars.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.value(x).map(|t| a * t + b);
        self.record("affine", v, &[x], Box::new(move |g, _, _| vec![Some(g.scale(a))]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.record(
            "sigmoid",
            v,
            &[x],
            Box::new(|g, _, out| vec![Some(g.zip_map(out, |g, s| g * s * (1.0 - s)))]),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(silu);
        self.record(
            "silu",
            v,
            &[x],
            Box::new(|g, p, _| {
                vec![Some(g.zip_map(p[0], |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                }))]
            }),
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.record(
            "softplus",
            v,
            &[x],
            Box::new(|g, p, _| vec![Some(g.zip_map(p[0], |g, x| g * sigmoid(x)))]),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.record(
            "exp",
            v,
            &[x],
            Box::new(|g, _, out| vec![Some(g.zip_map(out, |g, e| g * e))]),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.record(
            "sum",
            v,
            &[x],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        self.record(
            "reshape",
            v,
            &[x],
            Box::new(|g, p, _| vec![Some(g.clone().reshape(p[0].shape()).unwrap())]),
        )
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let rest = self.shape(xs[0])[1..].to_vec();
        let mut channels = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            assert_eq!(&t.shape()[1..], &rest[..], "concat_channels: trailing dims differ");
            channels.push(t.shape()[0]);
            data.extend_from_slice(t.data());
        }
        let total: usize = channels.iter().sum();
        let mut shape = vec![total];
        shape.extend_from_slice(&rest);
        let stride: usize = rest.iter().product();
        let v = Tensor::new(&shape, data).unwrap();
        self.record(
            "concat",
            v,
            xs,
            Box::new(move |g, p, _| {
                let mut off = 0;
                channels
                    .iter()
                    .zip(p)
                    .map(|(&c, pv)| {
                        let part = g.data()[off * stride..(off + c) * stride].to_vec();
                        off += c;
                        Some(Tensor::new(pv.shape(), part).unwrap())
                    })
                    .collect()
            }),
        )
    }

    /// Channels `[start, start + len)` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let stride = t.numel() / t.shape()[0];
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let v = Tensor::new(&shape, t.data()[start * stride..(start + len) * stride].to_vec())
            .unwrap();
        self.record(
            "slice",
            v,
            &[x],
            Box::new(move |g, p, _| {
                let mut full = Tensor::zeros(p[0].shape());
                full.data_mut()[start * stride..(start + len) * stride].copy_from_slice(g.data());
                vec![Some(full)]
            }),
        )
    }

    /// `x[c, ...] * gate[0, ...]`: a one-channel gate broadcast over channels.
    pub fn mul_bcast_channel(&mut self, x: Var, gate: Var) -> Var {
        let (xt, gt) = (self.value(x), self.value(gate));
        assert_eq!(gt.shape()[0], 1, "gate must have one channel");
        assert_eq!(&xt.shape()[1..], &gt.shape()[1..], "gate spatial dims");
        let n = gt.numel();
        let mut v = xt.clone();
        for chunk in v.data_mut().chunks_mut(n) {
            for (a, &b) in chunk.iter_mut().zip(gt.data()) {
                *a *= b;
            }
        }
        self.record(
            "mul_bcast",
            v,
            &[x, gate],
            Box::new(move |g, p, _| {
                let (xt, gt) = (p[0], p[1]);
                let mut dx = g.clone();
                let mut dg = Tensor::zeros(gt.shape());
                for (c, chunk) in dx.data_mut().chunks_mut(n).enumerate() {
                    let xc = &xt.data()[c * n..(c + 1) * n];
                    for i in 0..n {
                        dg.data_mut()[i] += chunk[i] * xc[i];
                        chunk[i] *= gt.data()[i];
                    }
                }
                vec![Some(dx), Some(dg)]
            }),
        )
    }

    /// Per-channel scale and shift: `x[c, ..] * gamma[c] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xt = self.value(x);
        let c = xt.shape()[0];
        let n = xt.numel() / c;
        let (gm, bt) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        assert_eq!(gm.len(), c);
        assert_eq!(bt.len(), c);
        let mut v = xt.clone();
        for (ci, chunk) in v.data_mut().chunks_mut(n).enumerate() {
            for a in chunk.iter_mut() {
                *a = *a * gm[ci] + bt[ci];
            }
        }
        self.record(
            "channel_affine",
            v,
            &[x, gamma, beta],
            Box::new(move |g, p, _| {
                let gm = p[1].data();
                let mut dx = g.clone();
                let mut dgm = Tensor::zeros(p[1].shape());
                let mut dbt = Tensor::zeros(p[2].shape());
                for (ci, chunk) in dx.data_mut().chunks_mut(n).enumerate() {
                    let xc = &p[0].data()[ci * n..(ci + 1) * n];
                    let mut sg = 0.0;
                    let mut sb = 0.0;
                    for (gv, &xv) in chunk.iter_mut().zip(xc) {
                        sg += *gv * xv;
                        sb += *gv;
                        *gv *= gm[ci];
                    }
                    dgm.data_mut()[ci] = sg;
                    dbt.data_mut()[ci] = sb;
                }
                vec![Some(dx), Some(dgm), Some(dbt)]
            }),
        )
    }

    /// Dense projection over the leading axis: `w[out, in] · x[in, L] + b[out]`.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Var {
        let (wt, xt) = (self.value(w), self.value(x));
        let (o, i) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(xt.shape()[0], i, "linear: weight in={} vs input {:?}", i, xt.shape());
        let l = xt.numel() / i;
        let mut out = vec![0.0; o * l];
        for oi in 0..o {
            let row = &mut out[oi * l..(oi + 1) * l];
            if let Some(b) = b {
                row.fill(self.value(b).data()[oi]);
            }
            for ii in 0..i {
                let wv = wt.data()[oi * i + ii];
                if wv == 0.0 {
                    continue;
                }
                let xr = &xt.data()[ii * l..(ii + 1) * l];
                for (r, &xv) in row.iter_mut().zip(xr) {
                    *r += wv * xv;
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        shape[0] = o;
        let v = Tensor::new(&shape, out).unwrap();
        let parents: Vec<Var> = match b {
            Some(b) => vec![w, x, b],
            None => vec![w, x],
        };
        let has_bias = b.is_some();
        self.record(
            "linear",
            v,
            &parents,
            Box::new(move |g, p, _| {
                let (wt, xt) = (p[0], p[1]);
                let gd = g.data();
                let mut dw = vec![0.0; o * i];
                let mut dx = vec![0.0; i * l];
                for oi in 0..o {
                    let gr = &gd[oi * l..(oi + 1) * l];
                    for ii in 0..i {
                        let xr = &xt.data()[ii * l..(ii + 1) * l];
                        dw[oi * i + ii] = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let wv = wt.data()[oi * i + ii];
                        if wv != 0.0 {
                            for (d, &gv) in dx[ii * l..(ii + 1) * l].iter_mut().zip(gr) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
                let mut res = vec![
                    Some(Tensor::new(wt.shape(), dw).unwrap()),
                    Some(Tensor::new(xt.shape(), dx).unwrap()),
                ];
                if has_bias {
                    let db = (0..o).map(|oi| gd[oi * l..(oi + 1) * l].iter().sum()).collect();
                    res.push(Some(Tensor::new(&[o], db).unwrap()));
                }
                res
            }),
        )
    }
}
