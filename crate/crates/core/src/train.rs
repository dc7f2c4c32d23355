//! SGD training loop, evaluation and the module ablation driver.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, VolumeSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{dice, hd95, BinaryMask, CaseMetrics, EvalReport};
use crate::model::{argmax_labels, ModelConfig, SegModel};
use crate::params::ParamStore;
use crate::tensor::{DType, Tensor};

/// Augmentations applied independently per training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Flip each spatial axis with probability 1/2.
    pub mirror: bool,
    /// Add a uniform offset in `[-0.1, 0.1]` with probability 0.3.
    pub brightness: bool,
    /// Gamma in `[0.7, 1.5]` on min-max rescaled intensities with probability 0.3.
    pub gamma: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            mirror: true,
            brightness: true,
            gamma: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop: (usize, usize, usize),
    pub augment: Augment,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub val_every: usize,
    /// Rescale the batch gradient when its global norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            poly_power: 0.9,
            weight_decay: 3e-5,
            momentum: 0.9,
            epochs: 200,
            batch_size: 2,
            crop: (32, 32, 32),
            augment: Augment::default(),
            seed: 0,
            val_every: 10,
            grad_clip: Some(12.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 || self.poly_power < 0.0 {
            return bad("weight_decay and poly_power must be non-negative".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 {
            return bad("epochs, batch_size and val_every must be positive".into());
        }
        let (a, b, c) = self.crop;
        if a == 0 || b == 0 || c == 0 {
            return bad(format!("crop {:?} has a zero extent", self.crop));
        }
        Ok(())
    }

    /// `lr0 · (1 − e/E)^p`, clamped to zero past the last epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let frac = 1.0 - (epoch as f64 / self.epochs as f64).min(1.0);
        self.lr0 * frac.powf(self.poly_power)
    }
}

/// SGD with classical momentum and decoupled-from-nothing L2 weight decay:
/// `v ← μv + (g + λw)`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        let ids: Vec<_> = params.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let p = params.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let w = p.tensor.data_mut();
            for ((wi, &gi), vi) in w.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Mean cross-entropy and its parameter gradients for one sample.
pub fn sample_gradients(model: &SegModel, image: &Tensor, labels: &[u8]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let logits = model.forward(&mut g, x)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let out = model
        .params
        .iter()
        .map(|(id, p)| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect();
    Ok((value, out))
}

/// Mean loss and gradient over a batch. Per-sample work may run in parallel;
/// the reduction is always in batch order so results do not depend on the
/// thread count.
pub fn batch_gradients(model: &SegModel, batch: &[(Tensor, Vec<u8>)]) -> Result<(f64, Vec<Tensor>)> {
    let per: Vec<Result<(f64, Vec<Tensor>)>> =
        batch.par_iter().map(|(x, y)| sample_gradients(model, x, y)).collect();
    let mut loss = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for r in per {
        let (l, g) = r?;
        loss += l;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let n = batch.len() as f64;
    let mut acc = acc.unwrap_or_default();
    acc.iter_mut().for_each(|t| t.scale_in_place(1.0 / n));
    Ok((loss / n, acc))
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|t| t.norm2().powi(2)).sum::<f64>().sqrt()
}

/// Random crop plus the enabled augmentations.
pub fn prepare_sample(
    sample: &VolumeSample,
    crop: (usize, usize, usize),
    augment: &Augment,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<u8>)> {
    let (d, h, w) = sample.dims();
    let (cd, ch, cw) = crop;
    if cd > d || ch > h || cw > w {
        return Err(Error::Config(format!(
            "crop {crop:?} exceeds volume {:?} of {}",
            sample.dims(),
            sample.case_id
        )));
    }
    let oz = rng.gen_range(0..=d - cd);
    let oy = rng.gen_range(0..=h - ch);
    let ox = rng.gen_range(0..=w - cw);
    let flips = if augment.mirror {
        [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)]
    } else {
        [false; 3]
    };
    let src = |z: usize, y: usize, x: usize| {
        let z = if flips[0] { cd - 1 - z } else { z };
        let y = if flips[1] { ch - 1 - y } else { y };
        let x = if flips[2] { cw - 1 - x } else { x };
        ((oz + z) * h + oy + y) * w + ox + x
    };
    let c = sample.channels();
    let n = cd * ch * cw;
    let mut img = vec![0.0; c * n];
    let mut lab = vec![0u8; n];
    let sd = sample.image.data();
    for z in 0..cd {
        for y in 0..ch {
            for x in 0..cw {
                let dst = (z * ch + y) * cw + x;
                let s = src(z, y, x);
                lab[dst] = sample.label.data[s];
                for k in 0..c {
                    img[k * n + dst] = sd[k * d * h * w + s];
                }
            }
        }
    }
    if augment.brightness && rng.gen_bool(0.3) {
        let off = rng.gen_range(-0.1..=0.1);
        img.iter_mut().for_each(|v| *v += off);
    }
    if augment.gamma && rng.gen_bool(0.3) {
        let gamma = rng.gen_range(0.7..=1.5);
        let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let r = hi - lo;
            img.iter_mut().for_each(|v| *v = lo + r * ((*v - lo) / r).powf(gamma));
        }
    }
    Ok((Tensor::new(&[c, cd, ch, cw], img)?, lab))
}

/// Foreground Dice/HD95 of a prediction against a reference label map,
/// averaged over the foreground classes `1..K`.
pub fn score_case(
    case_id: &str,
    pred: &[u8],
    truth: &[u8],
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    num_classes: usize,
) -> Result<CaseMetrics> {
    let mut d = 0.0;
    let mut h = 0.0;
    for k in 1..num_classes {
        let a = BinaryMask::from_labels(pred, dims, k as u8, spacing)?;
        let b = BinaryMask::from_labels(truth, dims, k as u8, spacing)?;
        d += dice(&a, &b)?;
        h += hd95(&a, &b)?;
    }
    let n = (num_classes - 1) as f64;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dice: d / n,
        hd95: h / n,
    })
}

/// Whole-volume inference and scoring on the given cases.
pub fn evaluate(model: &SegModel, cases: &[&VolumeSample]) -> Result<EvalReport> {
    let rows = cases
        .par_iter()
        .map(|c| {
            let logits = model.predict(&c.image)?;
            if !logits.is_finite() {
                return Err(Error::Numerical(format!("non-finite logits on {}", c.case_id)));
            }
            let pred = argmax_labels(&logits);
            score_case(&c.case_id, &pred, &c.label.data, c.dims(), c.spacing, model.cfg.num_classes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_cases(rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    pub val_dice: Option<f64>,
    pub val_hd95: Option<f64>,
    pub seconds: f64,
}

pub const CURVE_HEADER: &str = "epoch,lr,train_ce,val_dice,val_hd95,seconds";

pub fn curves_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.epoch,
            r.lr,
            r.train_ce,
            opt(r.val_dice),
            opt(r.val_hd95),
            r.seconds
        ));
    }
    s
}

/// Where training writes its artefacts.
#[derive(Debug, Clone, Copy)]
pub struct TrainOutputs<'a> {
    pub dir: &'a Path,
}

impl TrainOutputs<'_> {
    pub const CHECKPOINT: &'static str = "model.hsck";
    pub const LAST_GOOD: &'static str = "last_good.hsck";
    pub const CURVES: &'static str = "curves.csv";
    pub const HISTORY: &'static str = "history.json";
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains `model` on the dataset's training split.
///
/// `on_epoch` observes each record as it is produced. When `out` is given the
/// final checkpoint, curves and history are written there; a non-finite loss
/// aborts with the parameters from before the failing step saved as
/// `last_good.hsck`.
pub fn train(
    model: &mut SegModel,
    data: &Dataset,
    cfg: &TrainConfig,
    out: Option<TrainOutputs<'_>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    model.cfg.check_input(cfg.crop)?;
    if data.split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if let Some(o) = out {
        fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
    }
    let train_cases = data.subset(&data.split.train);
    let val_cases = data.subset(&data.split.val);
    for c in train_cases.iter().chain(&val_cases) {
        c.validate(model.cfg.num_classes)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1f);
    let mut opt = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| prepare_sample(train_cases[i], cfg.crop, &cfg.augment, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (loss, mut grads) = batch_gradients(model, &batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                if let Some(o) = out {
                    model.params.save(&o.dir.join(TrainOutputs::LAST_GOOD), DType::Real64)?;
                }
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, step {steps}; last good parameters kept"
                )));
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = global_norm(&grads);
                if norm > clip {
                    grads.iter_mut().for_each(|g| g.scale_in_place(clip / norm));
                }
            }
            opt.step(&mut model.params, &grads, lr);
            model.clamp_thresholds();
            loss_sum += loss;
            steps += 1;
        }
        let validate = !val_cases.is_empty() && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs);
        let (val_dice, val_hd95) = if validate {
            let r = evaluate(model, &val_cases)?;
            (Some(r.mean.dice), Some(r.mean.hd95))
        } else {
            (None, None)
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_ce: loss_sum / steps as f64,
            val_dice,
            val_hd95,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
    }
    if let Some(o) = out {
        model.params.save(&o.dir.join(TrainOutputs::CHECKPOINT), DType::Real64)?;
        let p = o.dir.join(TrainOutputs::CURVES);
        fs::write(&p, curves_csv(&history)).map_err(|e| Error::io(&p, e))?;
        write_json(&o.dir.join(TrainOutputs::HISTORY), &history)?;
    }
    Ok(history)
}

/// Repeated SGD steps on one fixed, un-augmented sample. Returns the loss
/// before each step followed by the final loss.
pub fn overfit(model: &mut SegModel, sample: &VolumeSample, steps: usize, lr: f64, momentum: f64) -> Result<Vec<f64>> {
    let x = sample.image.clone();
    let y = sample.label.data.clone();
    let mut opt = Sgd::new(&model.params, momentum, 0.0);
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grads) = sample_gradients(model, &x, &y)?;
        if !loss.is_finite() {
            return Err(Error::Numerical("non-finite loss while overfitting".into()));
        }
        losses.push(loss);
        opt.step(&mut model.params, &grads, lr);
        model.clamp_thresholds();
    }
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let logits = model.forward(&mut g, xv)?;
    let l = g.softmax_cross_entropy(logits, &y)?;
    losses.push(g.value(l).item());
    Ok(losses)
}

/// One row of the module ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub slmamba_local: bool,
    pub fgm: bool,
    pub parameters: usize,
    #[serde(rename = "Dice")]
    pub dice: f64,
    #[serde(rename = "HD95")]
    pub hd95: f64,
}

pub const ABLATION_ROWS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("+S-LMamba", true, false),
    ("+FGM", false, true),
    ("S-LMamba+FGM", true, true),
];

/// Trains and evaluates the four module combinations under one seed and
/// reports held-out test metrics. `on_trained` sees each row with its model.
pub fn ablate(
    base: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&str, &EpochRecord),
    mut on_trained: impl FnMut(&AblationRow, &SegModel),
) -> Result<Vec<AblationRow>> {
    let test = data.subset(&data.split.test);
    let mut rows = Vec::new();
    for (name, local, fgm) in ABLATION_ROWS {
        let mc = base.clone().with_modules(local, fgm);
        let mut model = SegModel::build(&mc, cfg.seed)?;
        train(&mut model, data, cfg, None, |r| progress(name, r))?;
        let report = evaluate(&model, &test)?;
        let row = AblationRow {
            name: name.to_string(),
            slmamba_local: local,
            fgm,
            parameters: model.num_parameters(),
            dice: report.mean.dice,
            hd95: report.mean.hd95,
        };
        on_trained(&row, &model);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("name,slmamba_local,fgm,parameters,Dice,HD95\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name, r.slmamba_local, r.fgm, r.parameters, r.dice, r.hd95
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn tiny_spec(n: usize) -> SyntheticSpec {
        SyntheticSpec {
            size: (8, 8, 8),
            radius: (1.5, 2.5),
            lesions: (1, 1),
            num_cases: n,
            ..SyntheticSpec::default()
        }
    }

    fn tiny_model(seed: u64) -> SegModel {
        let mut c = ModelConfig::desk(1, 2);
        c.stages[0].window = 2;
        c.stages[1].window = 2;
        SegModel::build(&c, seed).unwrap()
    }

    #[test]
    fn poly_schedule_boundaries() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(c.epochs), 0.0);
        let lrs: Vec<f64> = (0..=c.epochs).map(|e| c.lr_at(e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn first_loss_with_zero_head_is_ln_k() {
        let ds = Dataset::synthetic(&tiny_spec(1), 0).unwrap();
        let m = tiny_model(0);
        let (loss, _) = sample_gradients(&m, &ds.cases[0].image, &ds.cases[0].label.data).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut opt = Sgd::new(&p, 0.9, 0.1);
        let g = vec![Tensor::new(&[2], vec![0.5, 0.5]).unwrap()];
        opt.step(&mut p, &g, 0.1);
        // v = g + 0.1 w = [0.6, 0.3]; w = w - 0.1 v
        assert!((p.get(id).tensor.data()[0] - 0.94).abs() < 1e-15);
        assert!((p.get(id).tensor.data()[1] + 2.03).abs() < 1e-15);
        opt.step(&mut p, &g, 0.1);
        // v = 0.9·0.6 + 0.5 + 0.094 = 1.134
        assert!((p.get(id).tensor.data()[0] - (0.94 - 0.1134)).abs() < 1e-15);
    }

    #[test]
    fn crop_without_augmentation_is_identity() {
        let ds = Dataset::synthetic(&tiny_spec(1), 1).unwrap();
        let off = Augment {
            mirror: false,
            brightness: false,
            gamma: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = prepare_sample(&ds.cases[0], (8, 8, 8), &off, &mut rng).unwrap();
        assert_eq!(&x, &ds.cases[0].image);
        assert_eq!(y, ds.cases[0].label.data);
        assert!(prepare_sample(&ds.cases[0], (9, 8, 8), &off, &mut rng).is_err());
    }

    #[test]
    fn mirror_keeps_image_and_label_aligned() {
        let ds = Dataset::synthetic(&tiny_spec(1), 2).unwrap();
        let aug = Augment {
            mirror: true,
            brightness: false,
            gamma: false,
        };
        let c = &ds.cases[0];
        for s in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (x, y) = prepare_sample(c, (8, 8, 8), &aug, &mut rng).unwrap();
            let mut pairs: Vec<(u64, u8)> = x.data().iter().map(|v| v.to_bits()).zip(y).collect();
            let mut want: Vec<(u64, u8)> =
                c.image.data().iter().map(|v| v.to_bits()).zip(c.label.data.iter().copied()).collect();
            pairs.sort_unstable();
            want.sort_unstable();
            assert_eq!(pairs, want);
        }
    }

    #[test]
    fn batch_reduction_is_order_fixed() {
        let ds = Dataset::synthetic(&tiny_spec(2), 3).unwrap();
        let mut m = tiny_model(1);
        m.cfg.zero_init_head = false;
        let m = SegModel::build(&m.cfg, 1).unwrap();
        let batch: Vec<_> = ds.cases.iter().map(|c| (c.image.clone(), c.label.data.clone())).collect();
        let (l, g) = batch_gradients(&m, &batch).unwrap();
        let (l0, g0) = sample_gradients(&m, &batch[0].0, &batch[0].1).unwrap();
        let (l1, g1) = sample_gradients(&m, &batch[1].0, &batch[1].1).unwrap();
        assert_eq!(l, (l0 + l1) / 2.0);
        for ((a, b), c) in g.iter().zip(&g0).zip(&g1) {
            let mut s = b.clone();
            s.add_assign(c);
            s.scale_in_place(0.5);
            assert_eq!(a, &s);
        }
    }

    #[test]
    fn training_is_deterministic_and_writes_outputs() {
        let ds = Dataset::synthetic(&tiny_spec(6), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            crop: (8, 8, 8),
            lr0: 0.01,
            val_every: 1,
            seed: 5,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut a = tiny_model(2);
        let ha = train(&mut a, &ds, &cfg, Some(TrainOutputs { dir: dir.path() }), |_| {}).unwrap();
        let mut b = tiny_model(2);
        let hb = train(&mut b, &ds, &cfg, None, |_| {}).unwrap();
        assert_eq!(a.params.to_bytes(DType::Real64).unwrap(), b.params.to_bytes(DType::Real64).unwrap());
        assert_eq!(
            ha.iter().map(|r| r.train_ce).collect::<Vec<_>>(),
            hb.iter().map(|r| r.train_ce).collect::<Vec<_>>()
        );
        assert!(ha[1].val_dice.is_some());
        let csv = fs::read_to_string(dir.path().join(TrainOutputs::CURVES)).unwrap();
        assert!(csv.starts_with(CURVE_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert!(dir.path().join(TrainOutputs::CHECKPOINT).exists());
    }

    #[test]
    fn nan_input_aborts_with_last_good_checkpoint() {
        let mut ds = Dataset::synthetic(&tiny_spec(3), 6).unwrap();
        for c in &mut ds.cases {
            c.image.data_mut()[0] = f64::NAN;
        }
        let cfg = TrainConfig {
            epochs: 1,
            crop: (8, 8, 8),
            ..TrainConfig::default()
        };
        let mut m = tiny_model(0);
        // Non-finite data is rejected up front.
        let dir = tempfile::tempdir().unwrap();
        let err = train(&mut m, &ds, &cfg, Some(TrainOutputs { dir: dir.path() }), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let mut opt_cfg = cfg.clone();
        opt_cfg.lr0 = 1e300;
        opt_cfg.epochs = 3;
        opt_cfg.grad_clip = None;
        let ds = Dataset::synthetic(&tiny_spec(3), 6).unwrap();
        let mut m = tiny_model(0);
        m.cfg.zero_init_head = false;
        let mut m = SegModel::build(&m.cfg, 0).unwrap();
        let err = train(&mut m, &ds, &opt_cfg, Some(TrainOutputs { dir: dir.path() }), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
        assert!(dir.path().join(TrainOutputs::LAST_GOOD).exists());
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let ds = Dataset::synthetic(&tiny_spec(1), 8).unwrap();
        let c = &ds.cases[0];
        let m = score_case("x", &c.label.data, &c.label.data, c.dims(), c.spacing, 2).unwrap();
        assert_eq!((m.dice, m.hd95), (1.0, 0.0));
    }

    #[test]
    fn ablation_rows_have_table_shape() {
        let csv = ablation_csv(&[AblationRow {
            name: "baseline".into(),
            slmamba_local: false,
            fgm: false,
            parameters: 10,
            dice: 0.5,
            hd95: 3.0,
        }]);
        assert!(csv.starts_with("name,slmamba_local,fgm,parameters,Dice,HD95"));
    }
}
