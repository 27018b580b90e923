//! Desk-scale training: optional masked-reconstruction warm-up, then the main
//! phase with flips/rotations, Adam and a cosine learning rate.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, shape_err, Error, Result};
use crate::loss::{lp_loss, lp_loss_grad, oa_loss, oa_loss_grad, LossParams};
use crate::metrics::{mse, PSNR_CAP_DB};
use crate::network::{BnMode, Mode, ParamKind, SyeNetConfig, SyeNetModel, Task};
use crate::tensor::{cast, Dims, Element, Tensor};

use super::data::{bicubic_upsample, make_synthetic_dataset, Dataset};
use super::mask::{warmup_mask, MaskSpec};
use super::optim::{Adam, CosineSchedule};
use super::tape::{BatchStats, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    OutlierAware(LossParams),
    /// Plain `L_p` with `p` in `{1, 2}`.
    Lp(u8),
}

impl Objective {
    pub fn loss_and_grad<T: Element>(&self, pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        match self {
            Objective::OutlierAware(p) => Ok((oa_loss(pred, gt, p)?, oa_loss_grad(pred, gt, p)?)),
            Objective::Lp(p) => Ok((lp_loss(pred, gt, *p)?, lp_loss_grad(pred, gt, *p)?)),
        }
    }
}

/// Mean absolute error over masked pixels (all channels) and its gradient.
/// `mask` is `(n, 1, h, w)` at the prediction's resolution.
pub fn masked_l1<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let d = pred.dims();
    if gt.dims() != d || mask.dims() != Dims::new(d.n, 1, d.h, d.w) {
        return shape_err(format!("masked loss on {d}, target {}, mask {}", gt.dims(), mask.dims()));
    }
    let count = mask.data().iter().filter(|&&m| m != T::zero()).count() * d.c;
    let mut grad = Tensor::zeros(d);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for n in 0..d.n {
        let m = mask.plane(n, 0);
        for c in 0..d.c {
            let (p, g) = (pred.plane(n, c), gt.plane(n, c));
            let dst = grad.plane_mut(n, c);
            for i in 0..m.len() {
                if m[i] != T::zero() {
                    let e = (p[i] - g[i]).to_f64().unwrap_or(f64::NAN);
                    total += e.abs();
                    dst[i] = cast(e.signum() * if e == 0.0 { 0.0 } else { inv });
                }
            }
        }
    }
    Ok((total * inv, grad))
}

/// Loss value, gradients keyed by parameter name, and batch statistics.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: f64,
    pub grads: BTreeMap<String, Vec<T>>,
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

/// Runs one recorded forward pass and backpropagates `objective(pred)`.
pub fn compute_gradients<T: Element>(
    model: &SyeNetModel<T>,
    input: &Tensor<T>,
    bn_mode: BnMode,
    objective: impl FnOnce(&Tensor<T>) -> Result<(f64, Tensor<T>)>,
) -> Result<StepOutput<T>> {
    let mut tape = Tape::new();
    let rec = model.record(&mut tape, input, bn_mode)?;
    let (loss, seed) = objective(tape.value(rec.output))?;
    let g = tape.backward(rec.output, seed)?;
    let grads = rec
        .params
        .iter()
        .map(|(name, v)| {
            let data = match g.get(*v) {
                Some(t) => t.data().to_vec(),
                None => vec![T::zero(); tape.value(*v).numel()],
            };
            (name.clone(), data)
        })
        .collect();
    Ok(StepOutput { loss, grads, bn_stats: rec.bn_stats })
}

fn apply_update<T: Element>(model: &mut SyeNetModel<T>, adam: &mut Adam, grads: &BTreeMap<String, Vec<T>>) -> Result<f64> {
    let mut slots = model.slots_mut();
    adam.step(
        slots
            .iter_mut()
            .filter(|s| s.kind == ParamKind::Trainable)
            .map(|s| (s.name.as_str(), &mut *s.data)),
        grads,
    )
}

/// The six flip/rotation variants of a square patch; `k` in `0..6`.
pub fn augment<T: Element>(x: &Tensor<T>, k: u8) -> Tensor<T> {
    let d = x.dims();
    let (h, w) = (d.h, d.w);
    match k {
        0 => x.clone(),
        1 => Tensor::from_fn(d, |n, c, y, xx| x.at(n, c, y, w - 1 - xx)),
        2 => Tensor::from_fn(d, |n, c, y, xx| x.at(n, c, h - 1 - y, xx)),
        3 => Tensor::from_fn(Dims::new(d.n, d.c, w, h), |n, c, y, xx| x.at(n, c, xx, w - 1 - y)),
        4 => Tensor::from_fn(d, |n, c, y, xx| x.at(n, c, h - 1 - y, w - 1 - xx)),
        _ => Tensor::from_fn(Dims::new(d.n, d.c, w, h), |n, c, y, xx| x.at(n, c, h - 1 - xx, y)),
    }
}

/// Nearest-neighbour enlargement of a mask.
fn upsample_nearest<T: Element>(m: &Tensor<T>, s: usize) -> Tensor<T> {
    if s == 1 {
        return m.clone();
    }
    let d = m.dims();
    Tensor::from_fn(Dims::new(d.n, d.c, d.h * s, d.w * s), |n, c, y, x| m.at(n, c, y / s, x / s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    /// Cosine period; defaults to `iterations`.
    pub lr_period: Option<usize>,
    pub warmup_iters: usize,
    pub warmup_lr: f64,
    pub objective: Objective,
    /// Random flips and rotations; ignored for mosaics, whose pattern they break.
    pub augment: bool,
    pub bn_momentum: f64,
    pub seed: u64,
    /// Validation PSNR is logged every this many iterations and at the end.
    pub val_every: usize,
    /// Fixed-batch loss is recorded every this many iterations.
    pub probe_every: usize,
}

impl TrainConfig {
    pub fn new(iterations: usize, seed: u64, objective: Objective) -> Self {
        TrainConfig {
            iterations,
            batch_size: 4,
            lr: 2e-3,
            lr_floor: 1e-5,
            lr_period: None,
            warmup_iters: 0,
            warmup_lr: 1e-6,
            objective,
            augment: true,
            bn_momentum: 0.1,
            seed,
            val_every: 250,
            probe_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// One row per main-phase iteration.
    pub log: Vec<LogRow>,
    /// Per-iteration masked objective of the warm-up phase.
    pub warmup_log: Vec<f64>,
    /// Masked objective on a fixed masked batch before and after warm-up.
    pub warmup_probe: Option<(f64, f64)>,
    /// `(iteration, loss)` on a fixed un-augmented batch, starting at 0.
    pub probe: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn final_val_psnr(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.val_psnr)
    }
}

/// Writes `iter,lr,loss,val_psnr`; `val_psnr` is empty when not measured.
pub fn write_log_csv<W: Write>(rows: &[LogRow], mut out: W) -> Result<()> {
    writeln!(out, "iter,lr,loss,val_psnr")?;
    for r in rows {
        let v = r.val_psnr.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{v}", r.iter, r.lr, r.loss)?;
    }
    Ok(())
}

fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
    }
}

const EVAL_CHUNK: usize = 8;

/// PSNR (range 1) of the clamped inference output over the whole set.
pub fn evaluate_psnr<T: Element>(model: &SyeNetModel<T>, data: &Dataset<T>) -> Result<f64> {
    let mut sum = 0.0;
    let mut start = 0;
    while start < data.len() {
        let k = EVAL_CHUNK.min(data.len() - start);
        let x = data.inputs.batch_slice(start, k)?;
        let y = data.targets.batch_slice(start, k)?;
        sum += mse(&model.forward(&x)?, &y)? * k as f64;
        start += k;
    }
    Ok(psnr_from_mse(sum / data.len() as f64))
}

/// PSNR of clamped bicubic upsampling on a super-resolution set.
pub fn bicubic_psnr<T: Element>(data: &Dataset<T>) -> Result<f64> {
    let s = match data.task {
        Task::Sr { scale } => scale,
        _ => return config_err("the bicubic baseline applies to super-resolution only"),
    };
    let up = bicubic_upsample(&data.inputs, s)?.clamp(T::zero(), T::one());
    Ok(psnr_from_mse(mse(&up, &data.targets)?))
}

fn masked_objective<T: Element>(
    model: &SyeNetModel<T>,
    masked: &Tensor<T>,
    target: &Tensor<T>,
    mask_up: &Tensor<T>,
    bn_mode: BnMode,
) -> Result<StepOutput<T>> {
    compute_gradients(model, masked, bn_mode, |pred| masked_l1(pred, target, mask_up))
}

/// Trains `model` in place. Deterministic for a fixed seed.
pub fn train_toy<T: Element>(
    model: &mut SyeNetModel<T>,
    train: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if model.mode() == Mode::Folded {
        return Err(Error::Mode("a folded model cannot be trained; load the training-form weights".into()));
    }
    if train.is_empty() {
        return config_err("training set is empty");
    }
    if train.task != model.config().task {
        return config_err(format!("dataset is for {}, model for {}", train.task.name(), model.config().task.name()));
    }
    if cfg.batch_size == 0 {
        return config_err("batch size must be positive");
    }
    let mut report = TrainReport::default();
    if cfg.iterations == 0 && cfg.warmup_iters == 0 {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let momentum: T = cast(cfg.bn_momentum);
    let probe_idx: Vec<usize> = (0..cfg.batch_size).map(|i| i % train.len()).collect();
    let (probe_x, probe_y) = train.batch(&probe_idx)?;
    let scale = model.config().task.scale();
    let augmentable = cfg.augment && train.task != Task::Isp && probe_x.dims().h == probe_x.dims().w;

    if cfg.warmup_iters > 0 {
        let (pm, pmask) = warmup_mask(&probe_x, &MaskSpec::new(cfg.seed ^ 0x5eed))?;
        let pmask = upsample_nearest(&pmask, scale);
        let before = masked_objective(model, &pm, &probe_y, &pmask, BnMode::Batch)?.loss;
        let mut adam = Adam::new(CosineSchedule::constant(cfg.warmup_lr)?);
        for _ in 0..cfg.warmup_iters {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..train.len())).collect();
            let (x, y) = train.batch(&idx)?;
            let (masked, mask) = warmup_mask(&x, &MaskSpec::new(rng.gen()))?;
            let out = masked_objective(model, &masked, &y, &upsample_nearest(&mask, scale), BnMode::Batch)?;
            model.update_bn_stats(&out.bn_stats, momentum)?;
            apply_update(model, &mut adam, &out.grads)?;
            report.warmup_log.push(out.loss);
        }
        let after = masked_objective(model, &pm, &probe_y, &pmask, BnMode::Batch)?.loss;
        report.warmup_probe = Some((before, after));
    }

    let mut adam = Adam::new(CosineSchedule::new(cfg.lr, cfg.lr_floor, cfg.lr_period.unwrap_or(cfg.iterations) as u64)?);
    let probe = |m: &SyeNetModel<T>| -> Result<f64> {
        Ok(compute_gradients(m, &probe_x, BnMode::Batch, |p| cfg.objective.loss_and_grad(p, &probe_y))?.loss)
    };
    if cfg.iterations > 0 {
        report.probe.push((0, probe(model)?));
    }
    for it in 1..=cfg.iterations {
        let mut xs = Vec::with_capacity(cfg.batch_size);
        let mut ys = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..train.len());
            let (x, y) = train.batch(&[i])?;
            let k = if augmentable { rng.gen_range(0..6u8) } else { 0 };
            xs.push(augment(&x, k));
            ys.push(augment(&y, k));
        }
        let (x, y) = (Tensor::stack(&xs)?, Tensor::stack(&ys)?);
        let out = compute_gradients(model, &x, BnMode::Batch, |p| cfg.objective.loss_and_grad(p, &y))?;
        model.update_bn_stats(&out.bn_stats, momentum)?;
        let lr = apply_update(model, &mut adam, &out.grads)?;
        let val_psnr = match val {
            Some(v) if it % cfg.val_every.max(1) == 0 || it == cfg.iterations => Some(evaluate_psnr(model, v)?),
            _ => None,
        };
        report.log.push(LogRow { iter: it, lr, loss: out.loss, val_psnr });
        if cfg.probe_every > 0 && it % cfg.probe_every == 0 {
            report.probe.push((it, probe(model)?));
        }
    }
    Ok(report)
}

/// A fully pinned super-resolution run on synthetic patches: data sizes,
/// seeds and optimiser settings are fixed so results are reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct SrToyRecipe {
    pub model: SyeNetConfig,
    pub train_count: usize,
    pub train_patch: usize,
    pub val_count: usize,
    pub val_patch: usize,
    /// Seeds the training set; the model uses `train.seed`, validation `data_seed + 1`.
    pub data_seed: u64,
    pub train: TrainConfig,
}

impl SrToyRecipe {
    /// x2 SR, 2000 iterations, seed 42, outlier-aware loss with `alpha = 1`, `p = 1`.
    pub fn pinned() -> Self {
        let loss = LossParams { alpha: 1.0, p: 1 };
        let mut train = TrainConfig::new(2000, 42, Objective::OutlierAware(loss));
        train.lr = 5e-3;
        SrToyRecipe {
            model: SyeNetConfig::new(Task::Sr { scale: 2 }),
            train_count: 256,
            train_patch: 32,
            val_count: 16,
            val_patch: 96,
            data_seed: 42,
            train,
        }
    }

    /// The pinned setup with only a masked warm-up phase at the default warm-up rate.
    pub fn warmup_only(iterations: usize) -> Self {
        let mut r = Self::pinned();
        r.train.iterations = 0;
        r.train.warmup_iters = iterations;
        r
    }
}

#[derive(Debug, Clone)]
pub struct ToyRun<T> {
    pub model: SyeNetModel<T>,
    pub report: TrainReport,
    /// Validation PSNR after training (before training if no main phase ran).
    pub val_psnr: f64,
    pub bicubic_psnr: f64,
}

pub fn run_recipe<T: Element>(recipe: &SrToyRecipe) -> Result<ToyRun<T>> {
    let task = recipe.model.task;
    let train = make_synthetic_dataset::<T>(task, recipe.train_count, recipe.train_patch, recipe.data_seed)?;
    let val = make_synthetic_dataset::<T>(task, recipe.val_count, recipe.val_patch, recipe.data_seed.wrapping_add(1))?;
    let mut model = SyeNetModel::seeded(recipe.model.clone(), recipe.train.seed)?;
    let report = train_toy(&mut model, &train, Some(&val), &recipe.train)?;
    let val_psnr = match report.final_val_psnr() {
        Some(p) => p,
        None => evaluate_psnr(&model, &val)?,
    };
    Ok(ToyRun { bicubic_psnr: bicubic_psnr(&val)?, model, report, val_psnr })
}
