//! Selective state-space sequence layer.
//!
//! For inner channel `e`, state `n` and position `t`:
//!
//! ```text
//! Δ_t  = softplus(W_Δ·u_t + b_Δ)            > 0
//! a_t  = exp(Δ_t[e] · A[e,n]),  A = −exp(A_log)   ∈ (0, 1)
//! b_t  = Δ_t[e] · B_t[n] · u_t[e]
//! h_t  = a_t · h_{t−1} + b_t,   h_0 = 0
//! y_t  = Σ_n C_t[n] · h_t[e,n] + D[e] · u_t[e]
//! ```
//!
//! The full layer wraps this with an expanding input projection, a causal
//! depthwise convolution, a silu gate branch and an output projection.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::Init;
use crate::params::{ParamId, ParamStore};
use crate::scan::{scan, ScanImpl};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsmConfig {
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub scan: ScanImpl,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_state: 16,
            expand: 2,
            conv_width: 4,
            scan: ScanImpl::Sequential,
        }
    }
}

/// Zero-order hold on `A`, Euler step on `B`: returns `(a, b)` for one
/// channel/state at one position.
pub fn discretize(delta: f64, a: f64, b: f64, x: f64) -> (f64, f64) {
    ((delta * a).exp(), delta * b * x)
}

impl Graph {
    /// Depthwise causal 1-D convolution over `[E, L]`:
    /// `y[e,t] = bias[e] + Σ_j w[e,j] · x[e, t − (K−1) + j]`.
    pub fn causal_dwconv1d(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(bias));
        let (e, l) = (xt.shape()[0], xt.shape()[1]);
        let k = wt.shape()[1];
        assert_eq!(wt.shape()[0], e);
        let mut out = vec![0.0; e * l];
        for c in 0..e {
            let xr = &xt.data()[c * l..(c + 1) * l];
            let wr = &wt.data()[c * k..(c + 1) * k];
            for t in 0..l {
                let mut acc = bt.data()[c];
                for (j, &wv) in wr.iter().enumerate() {
                    if let Some(src) = (t + j).checked_sub(k - 1) {
                        acc += wv * xr[src];
                    }
                }
                out[c * l + t] = acc;
            }
        }
        let v = Tensor::new(&[e, l], out).unwrap();
        self.record(
            "causal_dwconv1d",
            v,
            &[x, w, bias],
            Box::new(move |g, p, _| {
                let (xt, wt) = (p[0], p[1]);
                let mut dx = vec![0.0; e * l];
                let mut dw = vec![0.0; e * k];
                let mut db = vec![0.0; e];
                for c in 0..e {
                    let xr = &xt.data()[c * l..(c + 1) * l];
                    let gr = &g.data()[c * l..(c + 1) * l];
                    for t in 0..l {
                        let gv = gr[t];
                        db[c] += gv;
                        for j in 0..k {
                            if let Some(src) = (t + j).checked_sub(k - 1) {
                                dw[c * k + j] += gv * xr[src];
                                dx[c * l + src] += gv * wt.data()[c * k + j];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[e, l], dx).unwrap()),
                    Some(Tensor::new(&[e, k], dw).unwrap()),
                    Some(Tensor::new(&[e], db).unwrap()),
                ]
            }),
        )
    }

    /// Fused selective scan. Shapes: `u, delta: [E, L]`, `a_log: [E, N]`,
    /// `b, c: [N, L]`, `d_skip: [E]`; output `[E, L]`.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        imp: ScanImpl,
    ) -> Var {
        let (ut, dt, at, bt, ct, dk) = (
            self.value(u),
            self.value(delta),
            self.value(a_log),
            self.value(b),
            self.value(c),
            self.value(d_skip),
        );
        let (e, l) = (ut.shape()[0], ut.shape()[1]);
        let n = at.shape()[1];
        assert_eq!(dt.shape(), ut.shape());
        assert_eq!(bt.shape(), &[n, l]);
        assert_eq!(ct.shape(), &[n, l]);
        let mut ga = vec![0.0; e * n * l];
        let mut gb = vec![0.0; e * n * l];
        for ei in 0..e {
            for ni in 0..n {
                let a_cont = -at.data()[ei * n + ni].exp();
                let lane = (ei * n + ni) * l;
                for t in 0..l {
                    let (a, bb) = discretize(
                        dt.data()[ei * l + t],
                        a_cont,
                        bt.data()[ni * l + t],
                        ut.data()[ei * l + t],
                    );
                    ga[lane + t] = a;
                    gb[lane + t] = bb;
                }
            }
        }
        let h = Arc::new(scan(imp, &ga, &gb, l));
        let mut y = vec![0.0; e * l];
        for ei in 0..e {
            let yr = &mut y[ei * l..(ei + 1) * l];
            for ni in 0..n {
                let hr = &h[(ei * n + ni) * l..(ei * n + ni + 1) * l];
                let cr = &ct.data()[ni * l..(ni + 1) * l];
                for t in 0..l {
                    yr[t] += cr[t] * hr[t];
                }
            }
            let dv = dk.data()[ei];
            for (t, yv) in yr.iter_mut().enumerate() {
                *yv += dv * ut.data()[ei * l + t];
            }
        }
        let v = Tensor::new(&[e, l], y).unwrap();
        self.record(
            "selective_scan",
            v,
            &[u, delta, a_log, b, c, d_skip],
            Box::new(move |g, p, _| {
                let (ut, dt, at, bt, ct, dk) = (p[0], p[1], p[2], p[3], p[4], p[5]);
                let (ud, dd, bd, cd, gd) = (ut.data(), dt.data(), bt.data(), ct.data(), g.data());
                let mut du = vec![0.0; e * l];
                let mut ddelta = vec![0.0; e * l];
                let mut dalog = vec![0.0; e * n];
                let mut dbm = vec![0.0; n * l];
                let mut dcm = vec![0.0; n * l];
                let mut ddk = vec![0.0; e];
                for ei in 0..e {
                    let ur = &ud[ei * l..(ei + 1) * l];
                    let dr = &dd[ei * l..(ei + 1) * l];
                    let gr = &gd[ei * l..(ei + 1) * l];
                    for ni in 0..n {
                        let a_cont = -at.data()[ei * n + ni].exp();
                        let hr = &h[(ei * n + ni) * l..(ei * n + ni + 1) * l];
                        let br = &bd[ni * l..(ni + 1) * l];
                        let cr = &cd[ni * l..(ni + 1) * l];
                        let mut carry = 0.0;
                        let mut da_sum = 0.0;
                        for t in (0..l).rev() {
                            let gh = gr[t] * cr[t] + carry;
                            dcm[ni * l + t] += gr[t] * hr[t];
                            let a = (dr[t] * a_cont).exp();
                            let h_prev = if t > 0 { hr[t - 1] } else { 0.0 };
                            let da = gh * h_prev * a;
                            ddelta[ei * l + t] += da * a_cont + gh * br[t] * ur[t];
                            da_sum += da * dr[t];
                            dbm[ni * l + t] += gh * dr[t] * ur[t];
                            du[ei * l + t] += gh * dr[t] * br[t];
                            carry = gh * a;
                        }
                        dalog[ei * n + ni] = da_sum * a_cont;
                    }
                    let dv = dk.data()[ei];
                    for t in 0..l {
                        du[ei * l + t] += gr[t] * dv;
                        ddk[ei] += gr[t] * ur[t];
                    }
                }
                vec![
                    Some(Tensor::new(&[e, l], du).unwrap()),
                    Some(Tensor::new(&[e, l], ddelta).unwrap()),
                    Some(Tensor::new(&[e, n], dalog).unwrap()),
                    Some(Tensor::new(&[n, l], dbm).unwrap()),
                    Some(Tensor::new(&[n, l], dcm).unwrap()),
                    Some(Tensor::new(&[e], ddk).unwrap()),
                ]
            }),
        )
    }
}

/// Parameters of one selective-scan layer (`SSMParams`).
#[derive(Debug, Clone)]
pub struct MambaLayer {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub scan: ScanImpl,
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dt_w: ParamId,
    pub dt_b: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: ParamId,
}

impl MambaLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        d_model: usize,
        cfg: &SsmConfig,
    ) -> Result<Self> {
        let di = cfg.expand * d_model;
        let n = cfg.d_state;
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let in_proj = init.uniform(&[2 * di, d_model], lin(d_model));
        let conv_w = init.uniform(&[di, cfg.conv_width], lin(cfg.conv_width));
        let conv_b = init.uniform(&[di], lin(cfg.conv_width));
        let dt_w = init.uniform(&[di, di], lin(di));
        // Initial step sizes log-uniform in [1e-3, 1e-1]; bias is softplus⁻¹.
        let dt_b = Tensor::from_fn(&[di], |_| {
            let u: f64 = rand::Rng::gen_range(init.rng(), 0.0..1.0);
            let dt = (1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        let b_proj = init.uniform(&[n, di], lin(di));
        let c_proj = init.uniform(&[n, di], lin(di));
        let a_log = Tensor::from_fn(&[di, n], |i| ((i % n) as f64 + 1.0).ln());
        let out_proj = init.uniform(&[d_model, di], lin(di));
        Ok(MambaLayer {
            d_model,
            d_inner: di,
            d_state: n,
            scan: cfg.scan,
            in_proj: store.add(format!("{prefix}.in_proj"), in_proj)?,
            conv_w: store.add(format!("{prefix}.conv.w"), conv_w)?,
            conv_b: store.add(format!("{prefix}.conv.b"), conv_b)?,
            dt_w: store.add(format!("{prefix}.dt.w"), dt_w)?,
            dt_b: store.add(format!("{prefix}.dt.b"), dt_b)?,
            b_proj: store.add(format!("{prefix}.b_proj"), b_proj)?,
            c_proj: store.add(format!("{prefix}.c_proj"), c_proj)?,
            a_log: store.add(format!("{prefix}.a_log"), a_log)?,
            d_skip: store.add(format!("{prefix}.d_skip"), Tensor::full(&[di], 1.0))?,
            out_proj: store.add(format!("{prefix}.out_proj"), out_proj)?,
        })
    }

    /// `[C, L] → [C, L]`, causal along `L`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let di = self.d_inner;
        let w_in = g.param(store, self.in_proj);
        let xz = g.linear(w_in, x, None);
        let xi = g.slice_channels(xz, 0, di);
        let z = g.slice_channels(xz, di, di);
        let (cw, cb) = (g.param(store, self.conv_w), g.param(store, self.conv_b));
        let xc = g.causal_dwconv1d(xi, cw, cb);
        let u = g.silu(xc);
        let (dw, db) = (g.param(store, self.dt_w), g.param(store, self.dt_b));
        let dt_lin = g.linear(dw, u, Some(db));
        let delta = g.softplus(dt_lin);
        let bw = g.param(store, self.b_proj);
        let bm = g.linear(bw, u, None);
        let cwp = g.param(store, self.c_proj);
        let cm = g.linear(cwp, u, None);
        let (al, dk) = (g.param(store, self.a_log), g.param(store, self.d_skip));
        let y = g.selective_scan(u, delta, al, bm, cm, dk, self.scan);
        let gate = g.silu(z);
        let yg = g.mul(y, gate);
        let w_out = g.param(store, self.out_proj);
        g.linear(w_out, yg, None)
    }

    pub fn param_ids(&self) -> [ParamId; 10] {
        [
            self.in_proj,
            self.conv_w,
            self.conv_b,
            self.dt_w,
            self.dt_b,
            self.b_proj,
            self.c_proj,
            self.a_log,
            self.d_skip,
            self.out_proj,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{silu, softplus};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(c: usize, seed: u64) -> (ParamStore, MambaLayer) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let cfg = SsmConfig {
            d_state: 4,
            ..SsmConfig::default()
        };
        let m = MambaLayer::new(&mut store, &mut init, "m", c, &cfg).unwrap();
        (store, m)
    }

    fn run(store: &ParamStore, m: &MambaLayer, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = m.forward(&mut g, store, xv);
        g.value(y).clone()
    }

    #[test]
    fn discretize_limits() {
        let (a, b) = discretize(1e-12, -1.0, 0.7, 2.0);
        assert!((a - 1.0).abs() < 1e-11 && b.abs() < 1e-11);
        let (a, _) = discretize(2f64.ln(), -1.0, 1.0, 1.0);
        assert!((a - 0.5).abs() < 1e-15);
        assert_eq!(discretize(0.3, -2.0, 5.0, 0.0).1, 0.0);
    }

    #[test]
    fn step_size_and_gain_stay_in_range() {
        let (store, m) = layer(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(&[3, 9], |_| rng.gen_range(-3.0..3.0));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let w_in = g.param(&store, m.in_proj);
        let xz = g.linear(w_in, xv, None);
        let xi = g.slice_channels(xz, 0, m.d_inner);
        let (cw, cb) = (g.param(&store, m.conv_w), g.param(&store, m.conv_b));
        let u = g.causal_dwconv1d(xi, cw, cb);
        let u = g.silu(u);
        let (dw, db) = (g.param(&store, m.dt_w), g.param(&store, m.dt_b));
        let dl = g.linear(dw, u, Some(db));
        let delta = g.softplus(dl);
        assert!(g.value(delta).data().iter().all(|&d| d > 0.0));
        let a_log = &store.get(m.a_log).tensor;
        for (i, &d) in g.value(delta).data().iter().enumerate() {
            let e = i / 9;
            for ni in 0..m.d_state {
                let a = (d * -a_log.data()[e * m.d_state + ni].exp()).exp();
                assert!(a > 0.0 && a < 1.0);
            }
        }
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero() {
        let (mut store, m) = layer(3, 4);
        store.get_mut(m.conv_b).tensor = Tensor::zeros(&[m.d_inner]);
        let y = run(&store, &m, &Tensor::zeros(&[3, 6]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_causal() {
        let (store, m) = layer(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[3, 10], |_| rng.gen_range(-1.0..1.0));
        let base = run(&store, &m, &x);
        for t in [0, 4, 9] {
            let mut xp = x.clone();
            xp.data_mut()[10 + t] += 0.5;
            let y = run(&store, &m, &xp);
            for c in 0..3 {
                for s in 0..10 {
                    let diff = (y.data()[c * 10 + s] - base.data()[c * 10 + s]).abs();
                    if s < t {
                        assert_eq!(diff, 0.0, "position {s} changed by perturbing {t}");
                    }
                }
            }
            let later: f64 = (t..10).map(|s| (y.data()[s] - base.data()[s]).abs()).sum();
            assert!(later > 0.0);
        }
    }

    #[test]
    fn single_position_closed_form() {
        let (store, m) = layer(2, 11);
        let x = Tensor::new(&[2, 1], vec![0.4, -0.9]).unwrap();
        let y = run(&store, &m, &x);

        let p = |id: ParamId| store.get(id).tensor.data().to_vec();
        let (di, n) = (m.d_inner, m.d_state);
        let w_in = p(m.in_proj);
        let proj = |row: usize| w_in[row * 2] * 0.4 + w_in[row * 2 + 1] * -0.9;
        let (cw, cb, dtw, dtb) = (p(m.conv_w), p(m.conv_b), p(m.dt_w), p(m.dt_b));
        let (bw, cwp, dsk, wo) = (p(m.b_proj), p(m.c_proj), p(m.d_skip), p(m.out_proj));
        let k = cw.len() / di;
        // Only the last conv tap sees position 0.
        let u: Vec<f64> = (0..di).map(|e| silu(cw[e * k + k - 1] * proj(e) + cb[e])).collect();
        let gate: Vec<f64> = (0..di).map(|e| silu(proj(di + e))).collect();
        let bvec: Vec<f64> = (0..n).map(|s| (0..di).map(|e| bw[s * di + e] * u[e]).sum()).collect();
        let cvec: Vec<f64> = (0..n).map(|s| (0..di).map(|e| cwp[s * di + e] * u[e]).sum()).collect();
        let inner: Vec<f64> = (0..di)
            .map(|e| {
                let delta = softplus((0..di).map(|j| dtw[e * di + j] * u[j]).sum::<f64>() + dtb[e]);
                let ssm: f64 = (0..n).map(|s| cvec[s] * delta * bvec[s] * u[e]).sum();
                gate[e] * (ssm + dsk[e] * u[e])
            })
            .collect();
        for c in 0..2 {
            let want: f64 = (0..di).map(|e| wo[c * di + e] * inner[e]).sum();
            assert!((y.data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_layers_agree() {
        let (store, mut m) = layer(3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[3, 37], |_| rng.gen_range(-1.0..1.0));
        let a = run(&store, &m, &x);
        m.scan = ScanImpl::Parallel;
        let b = run(&store, &m, &x);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
