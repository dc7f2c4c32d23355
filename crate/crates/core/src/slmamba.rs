//! Slice-oriented and local-oriented scan branches and the block that
//! combines them.
//!
//! ```text
//! n   = LN(x)
//! m   = SoMamba(n) + LoMamba(n) + x
//! out = MLP(IN(m)) + m              (ResidualMode::Intermediate)
//! out = MLP(IN(m)) + x              (ResidualMode::Input)
//! SoMamba(n) = Σ_{o ∈ {slice_f, slice_r}}          unapply_o(Mamba_o(apply_o(n)))
//! LoMamba(n) = Σ_{o ∈ {local_f, local_r, local_s}} unapply_o(Mamba_o(apply_o(n)))
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::Init;
use crate::orders::{build_order, OrderKind};
use crate::params::{ParamId, ParamStore};
use crate::ssm::{MambaLayer, SsmConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Second residual taken from the post-mixer intermediate.
    #[default]
    Intermediate,
    /// Second residual taken from the block input.
    Input,
}

/// Sequence layer applied along one flattening.
#[derive(Debug, Clone)]
pub enum SeqMixer {
    Mamba(MambaLayer),
    Identity,
}

impl SeqMixer {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Var {
        match self {
            SeqMixer::Mamba(m) => m.forward(g, store, seq),
            SeqMixer::Identity => seq,
        }
    }
}

/// One flattening direction with its own mixer.
#[derive(Debug, Clone)]
pub struct Branch {
    pub kind: OrderKind,
    pub mixer: SeqMixer,
}

impl Branch {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, window: usize) -> Result<Var> {
        let dims = {
            let s = g.shape(x);
            (s[1], s[2], s[3])
        };
        let order = Arc::new(build_order(self.kind, dims, window)?);
        let seq = g.apply_order(x, &order)?;
        let y = self.mixer.forward(g, store, seq);
        g.unapply_order(y, &order)
    }
}

fn sum_branches(
    branches: &[Branch],
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    window: usize,
) -> Result<Var> {
    let outs = branches
        .iter()
        .map(|b| b.forward(g, store, x, window))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.add_n(&outs))
}

#[derive(Debug, Clone)]
pub struct SoMamba {
    pub branches: [Branch; 2],
}

impl SoMamba {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, c: usize, cfg: &SsmConfig) -> Result<Self> {
        let mk = |store: &mut ParamStore, init: &mut Init, kind: OrderKind, tag: &str| -> Result<Branch> {
            Ok(Branch {
                kind,
                mixer: SeqMixer::Mamba(MambaLayer::new(store, init, &format!("{prefix}.{tag}"), c, cfg)?),
            })
        };
        Ok(SoMamba {
            branches: [
                mk(store, init, OrderKind::SliceF, "f")?,
                mk(store, init, OrderKind::SliceR, "r")?,
            ],
        })
    }

    pub fn identity() -> Self {
        SoMamba {
            branches: [
                Branch { kind: OrderKind::SliceF, mixer: SeqMixer::Identity },
                Branch { kind: OrderKind::SliceR, mixer: SeqMixer::Identity },
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        sum_branches(&self.branches, g, store, x, 1)
    }
}

#[derive(Debug, Clone)]
pub struct LoMamba {
    pub branches: [Branch; 3],
    pub window: usize,
}

impl LoMamba {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        c: usize,
        window: usize,
        cfg: &SsmConfig,
    ) -> Result<Self> {
        let mk = |store: &mut ParamStore, init: &mut Init, kind: OrderKind, tag: &str| -> Result<Branch> {
            Ok(Branch {
                kind,
                mixer: SeqMixer::Mamba(MambaLayer::new(store, init, &format!("{prefix}.{tag}"), c, cfg)?),
            })
        };
        Ok(LoMamba {
            branches: [
                mk(store, init, OrderKind::LocalF, "lf")?,
                mk(store, init, OrderKind::LocalR, "lr")?,
                mk(store, init, OrderKind::LocalS, "ls")?,
            ],
            window,
        })
    }

    pub fn identity(window: usize) -> Self {
        let b = |kind| Branch { kind, mixer: SeqMixer::Identity };
        LoMamba {
            branches: [b(OrderKind::LocalF), b(OrderKind::LocalR), b(OrderKind::LocalS)],
            window,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        sum_branches(&self.branches, g, store, x, self.window)
    }
}

#[derive(Debug, Clone)]
pub struct SLMambaBlock {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub somamba: SoMamba,
    pub lomamba: Option<LoMamba>,
    pub in_gamma: ParamId,
    pub in_beta: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub residual: ResidualMode,
}

#[derive(Debug, Clone)]
pub struct BlockConfig {
    pub channels: usize,
    pub window: usize,
    pub local: bool,
    pub mlp_ratio: usize,
    pub residual: ResidualMode,
    pub ssm: SsmConfig,
}

impl SLMambaBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, cfg: &BlockConfig) -> Result<Self> {
        let c = cfg.channels;
        let hidden = cfg.mlp_ratio * c;
        let ln_gamma = store.add(format!("{prefix}.ln.gamma"), Tensor::full(&[c], 1.0))?;
        let ln_beta = store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[c]))?;
        let somamba = SoMamba::new(store, init, &format!("{prefix}.so"), c, &cfg.ssm)?;
        let lomamba = if cfg.local {
            Some(LoMamba::new(store, init, &format!("{prefix}.lo"), c, cfg.window, &cfg.ssm)?)
        } else {
            None
        };
        let in_gamma = store.add(format!("{prefix}.in.gamma"), Tensor::full(&[c], 1.0))?;
        let in_beta = store.add(format!("{prefix}.in.beta"), Tensor::zeros(&[c]))?;
        let b1 = 1.0 / (c as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        let mlp_w1 = store.add(format!("{prefix}.mlp.w1"), init.uniform(&[hidden, c], b1))?;
        let mlp_b1 = store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(&[hidden]))?;
        let mlp_w2 = store.add(format!("{prefix}.mlp.w2"), init.uniform(&[c, hidden], b2))?;
        let mlp_b2 = store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(&[c]))?;
        Ok(SLMambaBlock {
            ln_gamma,
            ln_beta,
            somamba,
            lomamba,
            in_gamma,
            in_beta,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            residual: cfg.residual,
        })
    }

    /// `linear → silu → linear`, pointwise over voxels.
    fn mlp(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (w1, b1) = (g.param(store, self.mlp_w1), g.param(store, self.mlp_b1));
        let (w2, b2) = (g.param(store, self.mlp_w2), g.param(store, self.mlp_b2));
        let h = g.linear(w1, x, Some(b1));
        let h = g.silu(h);
        g.linear(w2, h, Some(b2))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (lg, lb) = (g.param(store, self.ln_gamma), g.param(store, self.ln_beta));
        let n = g.layer_norm(x, lg, lb);
        let so = self.somamba.forward(g, store, n)?;
        let m = match &self.lomamba {
            Some(lo) => {
                let lo = lo.forward(g, store, n)?;
                g.add_n(&[so, lo, x])
            }
            None => g.add(so, x),
        };
        let (ig, ib) = (g.param(store, self.in_gamma), g.param(store, self.in_beta));
        let normed = g.instance_norm(m, ig, ib);
        let f = self.mlp(g, store, normed);
        let res = match self.residual {
            ResidualMode::Intermediate => m,
            ResidualMode::Input => x,
        };
        Ok(g.add(f, res))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::silu;
    use crate::orders::{apply_order, unapply_order};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn small_ssm() -> SsmConfig {
        SsmConfig { d_state: 4, ..SsmConfig::default() }
    }

    #[test]
    fn identity_mixers_double_and_triple_exactly() {
        let x = random(&[2, 3, 4, 4], 1);
        let store = ParamStore::new();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let so = SoMamba::identity().forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(so), &x.map(|v| v + v));
        let lo = LoMamba::identity(2).forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(lo), &x.map(|v| v + v + v));
    }

    /// With the state path switched off (zero B/C projections) and a conv
    /// kernel that only reads the current position, each mixer is a pointwise
    /// map `f(x) = W_out (D ⊙ silu(W_x x) ⊙ silu(W_z x))`. Tied weights across
    /// both directions make SoMamba equal to `2 f(x)` voxel by voxel.
    #[test]
    fn pointwise_mixers_sum_over_directions() {
        let c = 2;
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let so = SoMamba::new(&mut store, &mut init, "so", c, &small_ssm()).unwrap();
        let SeqMixer::Mamba(mf) = &so.branches[0].mixer else { unreachable!() };
        let SeqMixer::Mamba(mr) = &so.branches[1].mixer else { unreachable!() };
        let di = mf.d_inner;
        let cw = Tensor::from_fn(&[di, 4], |i| if i % 4 == 3 { 1.0 } else { 0.0 });
        let shared: Vec<(ParamId, ParamId)> = mf.param_ids().into_iter().zip(mr.param_ids()).collect();
        store.get_mut(mf.conv_w).tensor = cw;
        store.get_mut(mf.conv_b).tensor = Tensor::zeros(&[di]);
        store.get_mut(mf.b_proj).tensor = Tensor::zeros(&[mf.d_state, di]);
        store.get_mut(mf.c_proj).tensor = Tensor::zeros(&[mf.d_state, di]);
        for (a, b) in shared {
            store.get_mut(b).tensor = store.get(a).tensor.clone();
        }
        let x = random(&[c, 2, 3, 3], 4);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = so.forward(&mut g, &store, xv).unwrap();

        let p = |id: ParamId| store.get(id).tensor.data().to_vec();
        let (w_in, w_out, dsk) = (p(mf.in_proj), p(mf.out_proj), p(mf.d_skip));
        let l = 18;
        for v in 0..l {
            let xv: Vec<f64> = (0..c).map(|ch| x.data()[ch * l + v]).collect();
            let proj = |row: usize| (0..c).map(|j| w_in[row * c + j] * xv[j]).sum::<f64>();
            let inner: Vec<f64> = (0..di)
                .map(|e| {
                    let u = silu(proj(e));
                    dsk[e] * u * silu(proj(di + e))
                })
                .collect();
            for ch in 0..c {
                let f: f64 = (0..di).map(|e| w_out[ch * di + e] * inner[e]).sum();
                assert!((g.value(y).data()[ch * l + v] - 2.0 * f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_zero_biases_gives_zero() {
        let mut store = ParamStore::new();
        let mut init = Init::new(5);
        let lo = LoMamba::new(&mut store, &mut init, "lo", 2, 2, &small_ssm()).unwrap();
        for b in &lo.branches {
            if let SeqMixer::Mamba(m) = &b.mixer {
                store.get_mut(m.conv_b).tensor = Tensor::zeros(&[m.d_inner]);
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(&[2, 2, 4, 4]));
        let y = lo.forward(&mut g, &store, xv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_slice_window_matches_slice_branch_with_tied_weights() {
        let c = 3;
        let mut store = ParamStore::new();
        let mut init = Init::new(6);
        let so = SoMamba::new(&mut store, &mut init, "so", c, &small_ssm()).unwrap();
        let SeqMixer::Mamba(mf) = so.branches[0].mixer.clone() else { unreachable!() };
        let lf = Branch { kind: OrderKind::LocalF, mixer: SeqMixer::Mamba(mf) };
        let x = random(&[c, 2, 4, 4], 7);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let a = so.branches[0].forward(&mut g, &store, xv, 1).unwrap();
        let b = lf.forward(&mut g, &store, xv, 4).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn zero_weights_reduce_block_to_identity() {
        let cfg = BlockConfig {
            channels: 3,
            window: 2,
            local: true,
            mlp_ratio: 2,
            residual: ResidualMode::Intermediate,
            ssm: small_ssm(),
        };
        let mut store = ParamStore::new();
        let mut init = Init::new(8);
        let block = SLMambaBlock::new(&mut store, &mut init, "b", &cfg).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if !p.name.ends_with("gamma") {
                p.tensor = Tensor::zeros(p.tensor.shape());
            }
        }
        let x = random(&[3, 2, 4, 4], 9);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn block_preserves_shape_for_odd_extents() {
        for (local, residual) in [(true, ResidualMode::Intermediate), (false, ResidualMode::Input)] {
            let cfg = BlockConfig {
                channels: 2,
                window: 2,
                local,
                mlp_ratio: 2,
                residual,
                ssm: small_ssm(),
            };
            let mut store = ParamStore::new();
            let mut init = Init::new(10);
            let block = SLMambaBlock::new(&mut store, &mut init, "b", &cfg).unwrap();
            let x = random(&[2, 3, 5, 3], 11);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = block.forward(&mut g, &store, xv).unwrap();
            assert_eq!(g.shape(y), &[2, 3, 5, 3]);
        }
    }

    #[test]
    fn permutation_roundtrip_inside_branches() {
        let x = random(&[2, 3, 4, 4], 12);
        for kind in [OrderKind::SliceF, OrderKind::SliceR, OrderKind::LocalF, OrderKind::LocalR, OrderKind::LocalS] {
            let o = build_order(kind, (3, 4, 4), 2).unwrap();
            assert_eq!(unapply_order(&apply_order(&x, &o).unwrap(), &o).unwrap(), x);
        }
    }
}
