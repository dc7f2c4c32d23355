//! Central finite-difference verification of analytic gradients.
//!
//! Each case maps inputs (and optionally model parameters) to a tensor,
//! which is reduced to a scalar by a fixed random projection. For every
//! checked tensor the error is `max |analytic − numeric|` divided by
//! `max(max |numeric| over that tensor, 1e-3 · case scale, 1e-12)`, where the
//! case scale is the largest numeric derivative seen in the case.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fgm::{Fgm, FgmConfig, FilterMode};
use crate::graph::{Graph, Var};
use crate::model::{ModelConfig, SegModel};
use crate::nn::Init;
use crate::orders::{build_order, OrderKind};
use crate::params::{ParamId, ParamStore};
use crate::scan::ScanImpl;
use crate::slmamba::{BlockConfig, ResidualMode, SLMambaBlock};
use crate::ssm::{MambaLayer, SsmConfig};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const BLOCK_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// At most this many coordinates per tensor (all when smaller).
    pub max_coords: usize,
    pub seed: u64,
}

type CaseFn<'a> = dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> + 'a;

/// Checks gradients with respect to `inputs` and every parameter in `store`.
pub fn check(
    name: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    f: &CaseFn<'_>,
    opts: &CheckOptions,
) -> Result<GradCheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);

    let eval = |store: &ParamStore, inputs: &[Tensor], proj: Option<&Tensor>| -> Result<(f64, Tensor)> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, store, &vars)?;
        let o = g.value(out);
        let s = proj.map(|p| o.data().iter().zip(p.data()).map(|(a, b)| a * b).sum());
        Ok((s.unwrap_or(0.0), o.clone()))
    };
    let (_, out0) = eval(store, inputs, None)?;
    let proj = Tensor::from_fn(out0.shape(), |_| rng.gen_range(-1.0..1.0));

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    let pv = g.constant(proj.clone());
    let prod = g.mul(out, pv);
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;
    let zeros = |t: &Tensor| Tensor::zeros(t.shape());
    let analytic_inputs: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| zeros(t)))
        .collect();
    let param_ids: Vec<ParamId> = store.ids().collect();
    let analytic_params: Vec<Tensor> = param_ids
        .iter()
        .map(|&id| grads.param(id).cloned().unwrap_or_else(|| zeros(&store.get(id).tensor)))
        .collect();

    // Numeric pass, per tensor.
    let mut per_tensor: Vec<(f64, f64)> = Vec::new();
    let mut coordinates = 0;
    let h = opts.step;
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, opts.max_coords).into_vec();
            v.sort_unstable();
            v
        }
    };
    for (ti, a) in analytic_inputs.iter().enumerate() {
        let mut worst = (0.0f64, 0.0f64);
        for i in pick(a.numel(), &mut rng) {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= h;
            let num = (eval(store, &plus, Some(&proj))?.0 - eval(store, &minus, Some(&proj))?.0) / (2.0 * h);
            worst.0 = worst.0.max((a.data()[i] - num).abs());
            worst.1 = worst.1.max(num.abs());
            coordinates += 1;
        }
        per_tensor.push(worst);
    }
    let mut scratch = store.clone();
    for (pi, &id) in param_ids.iter().enumerate() {
        let a = &analytic_params[pi];
        let mut worst = (0.0f64, 0.0f64);
        for i in pick(a.numel(), &mut rng) {
            let orig = scratch.get(id).tensor.data()[i];
            scratch.get_mut(id).tensor.data_mut()[i] = orig + h;
            let up = eval(&scratch, inputs, Some(&proj))?.0;
            scratch.get_mut(id).tensor.data_mut()[i] = orig - h;
            let down = eval(&scratch, inputs, Some(&proj))?.0;
            scratch.get_mut(id).tensor.data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            worst.0 = worst.0.max((a.data()[i] - num).abs());
            worst.1 = worst.1.max(num.abs());
            coordinates += 1;
        }
        per_tensor.push(worst);
    }
    let scale = per_tensor.iter().map(|w| w.1).fold(0.0, f64::max);
    let max_rel_err = per_tensor
        .iter()
        .map(|&(err, mag)| err / mag.max(1e-3 * scale).max(1e-12))
        .fold(0.0, f64::max);
    Ok(GradCheckResult {
        name: name.to_string(),
        seed: opts.seed,
        max_rel_err,
        tolerance: opts.tolerance,
        coordinates,
        passed: max_rel_err < opts.tolerance && max_rel_err.is_finite(),
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn op_case(
    out: &mut Vec<GradCheckResult>,
    name: &str,
    inputs: Vec<Tensor>,
    seed: u64,
    f: &CaseFn<'_>,
) -> Result<()> {
    let opts = CheckOptions {
        step: FD_STEP,
        tolerance: OP_TOLERANCE,
        max_coords: 64,
        seed,
    };
    out.push(check(name, &ParamStore::new(), &inputs, f, &opts)?);
    Ok(())
}

/// Every differentiable primitive, inputs drawn from `[−1, 1]`.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let v = |r: &mut ChaCha8Rng, s: &[usize]| uniform(r, s, -1.0, 1.0);

    let (a, b) = (v(r, &[2, 3]), v(r, &[2, 3]));
    op_case(&mut out, "add", vec![a.clone(), b.clone()], seed, &|g, _, x| Ok(g.add(x[0], x[1])))?;
    op_case(&mut out, "sub", vec![a.clone(), b.clone()], seed, &|g, _, x| Ok(g.sub(x[0], x[1])))?;
    op_case(&mut out, "mul", vec![a.clone(), b.clone()], seed, &|g, _, x| Ok(g.mul(x[0], x[1])))?;
    op_case(&mut out, "add_n", vec![a.clone(), b.clone(), v(r, &[2, 3])], seed, &|g, _, x| {
        Ok(g.add_n(x))
    })?;
    op_case(&mut out, "affine", vec![a.clone()], seed, &|g, _, x| Ok(g.affine(x[0], -1.5, 0.5)))?;
    op_case(&mut out, "sigmoid", vec![a.clone()], seed, &|g, _, x| Ok(g.sigmoid(x[0])))?;
    op_case(&mut out, "silu", vec![a.clone()], seed, &|g, _, x| Ok(g.silu(x[0])))?;
    op_case(&mut out, "softplus", vec![a.clone()], seed, &|g, _, x| Ok(g.softplus(x[0])))?;
    op_case(&mut out, "exp", vec![a.clone()], seed, &|g, _, x| Ok(g.exp(x[0])))?;
    op_case(&mut out, "mean", vec![a.clone()], seed, &|g, _, x| Ok(g.mean(x[0])))?;
    op_case(&mut out, "reshape", vec![a.clone()], seed, &|g, _, x| {
        let y = g.reshape(x[0], &[3, 2]);
        let w = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 - 2.0));
        Ok(g.mul(y, w))
    })?;
    let (c1, c2) = (v(r, &[2, 2, 2, 3]), v(r, &[3, 2, 2, 3]));
    op_case(&mut out, "concat_channels", vec![c1.clone(), c2], seed, &|g, _, x| {
        Ok(g.concat_channels(&[x[0], x[1]]))
    })?;
    op_case(&mut out, "slice_channels", vec![v(r, &[4, 2, 3])], seed, &|g, _, x| {
        Ok(g.slice_channels(x[0], 1, 2))
    })?;
    op_case(&mut out, "mul_bcast_channel", vec![c1.clone(), v(r, &[1, 2, 2, 3])], seed, &|g, _, x| {
        Ok(g.mul_bcast_channel(x[0], x[1]))
    })?;
    op_case(
        &mut out,
        "channel_affine",
        vec![c1.clone(), v(r, &[2]), v(r, &[2])],
        seed,
        &|g, _, x| Ok(g.channel_affine(x[0], x[1], x[2])),
    )?;
    op_case(
        &mut out,
        "linear",
        vec![v(r, &[3, 4]), v(r, &[4, 5]), v(r, &[3])],
        seed,
        &|g, _, x| Ok(g.linear(x[0], x[1], Some(x[2]))),
    )?;
    for (name, k, s, p) in [("conv3d_k3_s1", 3, 1, 1), ("conv3d_k3_s2", 3, 2, 1), ("conv3d_k7_s2", 7, 2, 3)] {
        let x = v(r, &[2, 5, 4, 6]);
        let w = v(r, &[3, 2, k, k, k]);
        let bias = v(r, &[3]);
        op_case(&mut out, name, vec![x, w, bias], seed, &move |g, _, x| {
            g.conv3d(x[0], x[1], Some(x[2]), s, p)
        })?;
    }
    op_case(&mut out, "upsample2", vec![v(r, &[2, 2, 3, 2])], seed, &|g, _, x| Ok(g.upsample2(x[0])))?;
    op_case(&mut out, "layer_norm", vec![v(r, &[4, 6]), v(r, &[4]), v(r, &[4])], seed, &|g, _, x| {
        Ok(g.layer_norm(x[0], x[1], x[2]))
    })?;
    op_case(
        &mut out,
        "instance_norm",
        vec![v(r, &[3, 2, 3, 2]), v(r, &[3]), v(r, &[3])],
        seed,
        &|g, _, x| Ok(g.instance_norm(x[0], x[1], x[2])),
    )?;
    let labels: Vec<u8> = (0..12).map(|_| r.gen_range(0..3)).collect();
    op_case(&mut out, "softmax_cross_entropy", vec![v(r, &[3, 2, 2, 3])], seed, &move |g, _, x| {
        g.softmax_cross_entropy(x[0], &labels)
    })?;
    op_case(
        &mut out,
        "causal_dwconv1d",
        vec![v(r, &[3, 7]), v(r, &[3, 4]), v(r, &[3])],
        seed,
        &|g, _, x| Ok(g.causal_dwconv1d(x[0], x[1], x[2])),
    )?;
    let (e, n, l) = (3, 4, 9);
    let scan_inputs = vec![
        v(r, &[e, l]),
        uniform(r, &[e, l], 0.05, 1.0),
        v(r, &[e, n]),
        v(r, &[n, l]),
        v(r, &[n, l]),
        v(r, &[e]),
    ];
    for (name, imp) in [("selective_scan_seq", ScanImpl::Sequential), ("selective_scan_par", ScanImpl::Parallel)] {
        op_case(&mut out, name, scan_inputs.clone(), seed, &move |g, _, x| {
            Ok(g.selective_scan(x[0], x[1], x[2], x[3], x[4], x[5], imp))
        })?;
    }
    let order = Arc::new(build_order(OrderKind::LocalS, (2, 4, 4), 2)?);
    let o2 = Arc::clone(&order);
    op_case(&mut out, "apply_order", vec![v(r, &[2, 2, 4, 4])], seed, &move |g, _, x| {
        g.apply_order(x[0], &o2)
    })?;
    op_case(&mut out, "unapply_order", vec![v(r, &[2, 32])], seed, &move |g, _, x| {
        g.unapply_order(x[0], &order)
    })?;
    for (name, mode, thr) in [
        ("fft_filter_low", FilterMode::LowPass, 0.35),
        ("fft_filter_high", FilterMode::HighPass, 0.6),
    ] {
        op_case(
            &mut out,
            name,
            vec![v(r, &[2, 4, 5, 4]), Tensor::scalar(thr)],
            seed,
            &move |g, _, x| Ok(g.fft_filter(x[0], x[1], mode, 0.05)),
        )?;
    }
    Ok(out)
}

fn block_opts(seed: u64) -> CheckOptions {
    CheckOptions {
        step: FD_STEP,
        tolerance: BLOCK_TOLERANCE,
        max_coords: 6,
        seed,
    }
}

/// Composite modules: Mamba layer, S-LMamba block, FGM and a toy model.
pub fn block_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let r = &mut rng;
    let mut out = Vec::new();
    let ssm = SsmConfig {
        d_state: 4,
        ..SsmConfig::default()
    };

    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let m = MambaLayer::new(&mut store, &mut init, "m", 4, &ssm)?;
    out.push(check(
        "mamba_layer",
        &store,
        &[uniform(r, &[4, 12], -1.0, 1.0)],
        &|g, s, x| Ok(m.forward(g, s, x[0])),
        &block_opts(seed),
    )?);

    let mut store = ParamStore::new();
    let mut init = Init::new(seed + 1);
    let cfg = BlockConfig {
        channels: 4,
        window: 2,
        local: true,
        mlp_ratio: 2,
        residual: ResidualMode::Intermediate,
        ssm: ssm.clone(),
    };
    let block = SLMambaBlock::new(&mut store, &mut init, "blk", &cfg)?;
    out.push(check(
        "slmamba_block",
        &store,
        &[uniform(r, &[4, 4, 4, 4], -1.0, 1.0)],
        &|g, s, x| block.forward(g, s, x[0]),
        &block_opts(seed),
    )?);

    for mode in [FilterMode::LowPass, FilterMode::HighPass] {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed + 2);
        let fgm = Fgm::new(
            &mut store,
            &mut init,
            "fgm",
            &FgmConfig {
                channels: 2,
                mode,
                tau: 0.05,
            },
        )?;
        let name = match mode {
            FilterMode::LowPass => "fgm_low_pass",
            FilterMode::HighPass => "fgm_high_pass",
        };
        out.push(check(
            name,
            &store,
            &[uniform(r, &[2, 4, 4, 4], -1.0, 1.0)],
            &|g, s, x| fgm.forward(g, s, x[0]),
            &block_opts(seed),
        )?);
    }

    let model = SegModel::build(&gradcheck_model_config(), seed + 3)?;
    let labels: Vec<u8> = (0..512).map(|_| r.gen_range(0..2)).collect();
    out.push(check(
        "model_2stage_8cube",
        &model.params,
        &[uniform(r, &[1, 8, 8, 8], -1.0, 1.0)],
        &|g, s, x| {
            let mut m = model.clone();
            m.params = s.clone();
            let logits = m.forward(g, x[0])?;
            g.softmax_cross_entropy(logits, &labels)
        },
        &block_opts(seed),
    )?);
    Ok(out)
}

/// The two-stage toy network used for end-to-end gradient checks.
pub fn gradcheck_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk(1, 2);
    cfg.stages[0].channels = 2;
    cfg.stages[1].channels = 4;
    cfg.decoder_channels = vec![2, 4];
    cfg.zero_init_head = false;
    cfg
}

pub fn full_suite(seeds: &[u64]) -> Result<Vec<GradCheckResult>> {
    let mut all = Vec::new();
    for &s in seeds {
        all.extend(op_suite(s)?);
    }
    all.extend(block_suite(seeds.first().copied().unwrap_or(0))?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_for_one_seed() {
        for r in op_suite(7).unwrap() {
            assert!(r.passed, "{} err {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // sum of squares with a deliberately wrong backward.
        let opts = CheckOptions {
            step: FD_STEP,
            tolerance: OP_TOLERANCE,
            max_coords: 8,
            seed: 1,
        };
        let x = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let r = check("bad", &ParamStore::new(), &[x], &|g, _, v| Ok(g.affine(v[0], 2.0, 0.0)), &opts).unwrap();
        assert!(r.passed);
        let r = check(
            "bad",
            &ParamStore::new(),
            &[Tensor::from_fn(&[4], |i| i as f64)],
            &|g, _, v| {
                let val = g.value(v[0]).map(|a| a * a);
                Ok(g.record("bad_square", val, &[v[0]], Box::new(|gr, _, _| vec![Some(gr.clone())])))
            },
            &opts,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn block_suite_passes() {
        for r in block_suite(3).unwrap() {
            assert!(r.passed, "{} err {:e}", r.name, r.max_rel_err);
        }
    }
}
