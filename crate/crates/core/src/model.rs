//! Segmentation network: large-kernel stem, staged encoder of S-LMamba
//! blocks with an FGM per stage, a light U-shaped decoder and a 1×1×1 head.
//!
//! ```text
//! x ──stem(k7,s2)──► stage0 ─down─► stage1 ─down─► … ─► stageN
//!                      │ skip        │ skip               │
//! head ◄─ up ◄─ dec0 ◄─ up ◄─ dec1 ◄── … ◄── up ◄─────────┘
//!   ▲ concat(input)
//! ```
//!
//! Each decoder level upsamples ×2 (nearest), concatenates the stage skip and
//! applies two 3×3×3 conv blocks. The last ×2 upsample restores input
//! resolution, where the raw input is concatenated before the head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgm::{Fgm, FgmConfig, FilterMode};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, ConvBlock, Init};
use crate::params::ParamStore;
use crate::slmamba::{BlockConfig, ResidualMode, SLMambaBlock};
use crate::ssm::SsmConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub num_blocks: usize,
    pub window: usize,
    pub fgm_mode: FilterMode,
    pub enable_slmamba_local: bool,
    pub enable_fgm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_kernel: usize,
    pub stages: Vec<StageConfig>,
    /// Output channels of each decoder level, shallowest first.
    pub decoder_channels: Vec<usize>,
    pub mlp_ratio: usize,
    pub residual: ResidualMode,
    pub ssm: SsmConfig,
    pub fgm_tau: f64,
    pub zero_init_head: bool,
}

impl ModelConfig {
    /// Four stages `[48, 96, 192, 384]`, two blocks each.
    pub fn full(in_channels: usize, num_classes: usize) -> Self {
        let modes = [FilterMode::HighPass, FilterMode::HighPass, FilterMode::LowPass, FilterMode::LowPass];
        let windows = [4, 2, 1, 1];
        let channels = [48, 96, 192, 384];
        ModelConfig {
            in_channels,
            num_classes,
            stem_kernel: 7,
            stages: (0..4)
                .map(|i| StageConfig {
                    channels: channels[i],
                    num_blocks: 2,
                    window: windows[i],
                    fgm_mode: modes[i],
                    enable_slmamba_local: true,
                    enable_fgm: true,
                })
                .collect(),
            decoder_channels: channels.to_vec(),
            mlp_ratio: 2,
            residual: ResidualMode::Intermediate,
            ssm: SsmConfig::default(),
            fgm_tau: 0.05,
            zero_init_head: true,
        }
    }

    /// Two narrow stages sized for CPU training on 32³ crops.
    pub fn desk(in_channels: usize, num_classes: usize) -> Self {
        let channels = [4, 8];
        ModelConfig {
            in_channels,
            num_classes,
            stem_kernel: 7,
            stages: vec![
                StageConfig {
                    channels: channels[0],
                    num_blocks: 1,
                    window: 4,
                    fgm_mode: FilterMode::HighPass,
                    enable_slmamba_local: true,
                    enable_fgm: true,
                },
                StageConfig {
                    channels: channels[1],
                    num_blocks: 1,
                    window: 2,
                    fgm_mode: FilterMode::LowPass,
                    enable_slmamba_local: true,
                    enable_fgm: true,
                },
            ],
            decoder_channels: channels.to_vec(),
            mlp_ratio: 2,
            residual: ResidualMode::Intermediate,
            ssm: SsmConfig {
                d_state: 4,
                ..SsmConfig::default()
            },
            fgm_tau: 0.05,
            zero_init_head: true,
        }
    }

    /// Applies the ablation switches to every stage.
    pub fn with_modules(mut self, local: bool, fgm: bool) -> Self {
        for s in &mut self.stages {
            s.enable_slmamba_local = local;
            s.enable_fgm = fgm;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be ≥ 2, got {}", self.num_classes));
        }
        if self.stem_kernel % 2 == 0 {
            return bad(format!("stem_kernel must be odd, got {}", self.stem_kernel));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.decoder_channels.len() != self.stages.len() {
            return bad(format!(
                "decoder_channels has {} entries for {} stages",
                self.decoder_channels.len(),
                self.stages.len()
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.window == 0 {
                return bad(format!("stage {i}: channels and window must be positive"));
            }
        }
        if self.decoder_channels.contains(&0) || self.mlp_ratio == 0 {
            return bad("decoder channels and mlp_ratio must be positive".into());
        }
        if self.ssm.d_state == 0 || self.ssm.expand == 0 || self.ssm.conv_width == 0 {
            return bad("ssm d_state, expand and conv_width must be positive".into());
        }
        if !(self.fgm_tau >= 0.0) {
            return bad(format!("fgm_tau must be ≥ 0, got {}", self.fgm_tau));
        }
        Ok(())
    }

    /// Total spatial reduction at the deepest stage.
    pub fn downsample_factor(&self) -> usize {
        1 << self.stages.len()
    }

    /// Checks that an input extent survives the encoder and that every
    /// stage window fits its slice.
    pub fn check_input(&self, dims: (usize, usize, usize)) -> Result<()> {
        let f = self.downsample_factor();
        let (d, h, w) = dims;
        if d % f != 0 || h % f != 0 || w % f != 0 {
            let pad = |n: usize| n.div_ceil(f) * f - n;
            return Err(Error::Usage(format!(
                "input {dims:?} must be divisible by {f}; pad by ({}, {}, {})",
                pad(d),
                pad(h),
                pad(w)
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let (sh, sw) = (h >> (i + 1), w >> (i + 1));
            if s.enable_slmamba_local && (s.window > sh || s.window > sw) {
                return Err(Error::Config(format!(
                    "stage {i}: window {} exceeds slice {sh}×{sw}",
                    s.window
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<SLMambaBlock>,
    pub fgm: Option<Fgm>,
    pub down: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub stem: Conv,
    pub stages: Vec<Stage>,
    /// Shallowest level first.
    pub decoder: Vec<DecoderLevel>,
    pub head: Conv,
}

/// Forward outputs kept for inspection.
pub struct ForwardTrace {
    pub logits: Var,
    pub gates: Vec<Option<Var>>,
}

impl SegModel {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let k = cfg.stem_kernel;
        let c0 = cfg.stages[0].channels;
        let stem = Conv::new(&mut params, &mut init, "stem", cfg.in_channels, c0, k, 2, None)?;
        let n = cfg.stages.len();
        let mut stages = Vec::with_capacity(n);
        for (i, s) in cfg.stages.iter().enumerate() {
            let block_cfg = BlockConfig {
                channels: s.channels,
                window: s.window,
                local: s.enable_slmamba_local,
                mlp_ratio: cfg.mlp_ratio,
                residual: cfg.residual,
                ssm: cfg.ssm.clone(),
            };
            let blocks = (0..s.num_blocks)
                .map(|b| SLMambaBlock::new(&mut params, &mut init, &format!("stage{i}.block{b}"), &block_cfg))
                .collect::<Result<Vec<_>>>()?;
            let fgm = if s.enable_fgm {
                let fc = FgmConfig {
                    channels: s.channels,
                    mode: s.fgm_mode,
                    tau: cfg.fgm_tau,
                };
                Some(Fgm::new(&mut params, &mut init, &format!("stage{i}.fgm"), &fc)?)
            } else {
                None
            };
            let down = if i + 1 < n {
                let next = cfg.stages[i + 1].channels;
                Some(Conv::new(&mut params, &mut init, &format!("stage{i}.down"), s.channels, next, 3, 2, None)?)
            } else {
                None
            };
            stages.push(Stage { blocks, fgm, down });
        }
        let mut decoder = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let deep = cfg.decoder_channels[i + 1];
            let deep = if i + 1 == n - 1 { cfg.stages[n - 1].channels } else { deep };
            let cin = deep + cfg.stages[i].channels;
            let cout = cfg.decoder_channels[i];
            decoder.push(DecoderLevel {
                conv1: ConvBlock::new(&mut params, &mut init, &format!("dec{i}.conv1"), cin, cout, 3, 1)?,
                conv2: ConvBlock::new(&mut params, &mut init, &format!("dec{i}.conv2"), cout, cout, 3, 1)?,
            });
        }
        let top = if n > 1 { cfg.decoder_channels[0] } else { cfg.stages[0].channels };
        let head_bound = if cfg.zero_init_head { Some(0.0) } else { None };
        let head = Conv::new(
            &mut params,
            &mut init,
            "head",
            top + cfg.in_channels,
            cfg.num_classes,
            1,
            1,
            head_bound,
        )?;
        Ok(SegModel {
            cfg: cfg.clone(),
            params,
            stem,
            stages,
            decoder,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn fgms(&self) -> impl Iterator<Item = (usize, &Fgm)> {
        self.stages
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.fgm.as_ref().map(|f| (i, f)))
    }

    pub fn clamp_thresholds(&mut self) {
        let fgms: Vec<Fgm> = self.fgms().map(|(_, f)| f.clone()).collect();
        for f in fgms {
            f.clamp_thresholds(&mut self.params);
        }
    }

    pub fn trace(&self, g: &mut Graph, x: Var) -> Result<ForwardTrace> {
        let dims = {
            let s = g.shape(x);
            if s.len() != 4 || s[0] != self.cfg.in_channels {
                return Err(Error::Usage(format!(
                    "expected input [{}, D, H, W], got {s:?}",
                    self.cfg.in_channels
                )));
            }
            (s[1], s[2], s[3])
        };
        self.cfg.check_input(dims)?;
        let p = &self.params;
        let mut h = self.stem.forward(g, p, x)?;
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut gates = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for b in &stage.blocks {
                h = b.forward(g, p, h)?;
            }
            match &stage.fgm {
                Some(f) => {
                    let t = f.trace(g, p, h)?;
                    gates.push(Some(t.gate));
                    h = t.out;
                }
                None => gates.push(None),
            }
            skips.push(h);
            if let Some(d) = &stage.down {
                h = d.forward(g, p, h)?;
            }
        }
        let mut feat = *skips.last().unwrap();
        for (i, level) in self.decoder.iter().enumerate().rev() {
            let up = g.upsample2(feat);
            let cat = g.concat_channels(&[up, skips[i]]);
            let y = level.conv1.forward(g, p, cat)?;
            feat = level.conv2.forward(g, p, y)?;
        }
        let up = g.upsample2(feat);
        let cat = g.concat_channels(&[up, x]);
        let logits = self.head.forward(g, p, cat)?;
        Ok(ForwardTrace { logits, gates })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.trace(g, x)?.logits)
    }

    /// Inference without retaining backward state.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Per-voxel argmax over the class axis.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let k = logits.shape()[0];
    let n = logits.numel() / k;
    let d = logits.data();
    (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + v] > d[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
