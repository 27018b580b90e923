use rand::{Rng, SeedableRng};

use crate::error::{config_err, shape_err, Error, Result};
use crate::reparam::{equivalence_inputs, reparameterize, ConvRepBlock, EquivalenceReport, FoldedConv, INIT_GAIN};
use crate::tensor::{cast, BatchNormParams, Conv2dParams, Element, Tensor};
use crate::train::tape::{BatchStats, Tape, Var};

use super::config::{FusionKind, SyeNetConfig, Task};
use super::{ChannelAttention, Fusion};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Multi-branch ConvRep blocks; trainable and foldable.
    Training,
    /// Single convolutions; inference only.
    Folded,
}

impl Mode {
    pub fn tag(self) -> u8 {
        match self {
            Mode::Training => 0,
            Mode::Folded => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Mode::Training),
            1 => Some(Mode::Folded),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Saved with the model but not optimized (batch-norm statistics and epsilon).
    Buffer,
}

/// Mutable view of one named parameter tensor.
#[derive(Debug)]
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// How batch norm behaves while recording a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them.
    Batch,
    /// Normalize with running statistics.
    Running,
}

/// A forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct Recorded<T> {
    pub input: Var,
    pub output: Var,
    /// Leaf of every trainable parameter, keyed by slot name.
    pub params: Vec<(String, Var)>,
    /// Batch statistics per batch-norm prefix (only under [`BnMode::Batch`]).
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

struct Recorder<'t, T> {
    tape: &'t mut Tape<T>,
    bn_mode: BnMode,
    params: Vec<(String, Var)>,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Element> Recorder<'_, T> {
    fn param(&mut self, name: String, value: Tensor<T>) -> Var {
        let v = self.tape.leaf(value);
        self.params.push((name, v));
        v
    }

    fn channel_param(&mut self, name: String, values: &[T]) -> Var {
        let v = self.tape.channel_leaf(values);
        self.params.push((name, v));
        v
    }

    fn conv(&mut self, prefix: &str, conv: &Conv2dParams<T>, x: Var) -> Result<Var> {
        let w = self.param(format!("{prefix}.weight"), conv.weight.clone());
        let b = self.channel_param(format!("{prefix}.bias"), &conv.bias);
        self.tape.conv2d(x, w, b, conv.padding)
    }

    fn bn(&mut self, prefix: &str, bn: &BatchNormParams<T>, x: Var) -> Result<Var> {
        let g = self.channel_param(format!("{prefix}.gamma"), &bn.gamma);
        let b = self.channel_param(format!("{prefix}.beta"), &bn.beta);
        match self.bn_mode {
            BnMode::Batch => {
                let (y, stats) = self.tape.batchnorm_train(x, g, b, bn.eps)?;
                self.bn_stats.push((prefix.to_string(), stats));
                Ok(y)
            }
            BnMode::Running => self.tape.batchnorm_frozen(x, g, b, &bn.running_mean, &bn.running_var, bn.eps),
        }
    }
}

fn conv_slots<'a, T: Element>(prefix: &str, conv: &'a mut Conv2dParams<T>, out: &mut Vec<ParamSlot<'a, T>>) {
    let shape = conv.weight.dims().as_array().to_vec();
    let c = conv.bias.len();
    out.push(ParamSlot { name: format!("{prefix}.weight"), kind: ParamKind::Trainable, shape, data: conv.weight.data_mut() });
    out.push(ParamSlot { name: format!("{prefix}.bias"), kind: ParamKind::Trainable, shape: vec![c], data: &mut conv.bias });
}

fn vec_slot<'a, T>(name: String, kind: ParamKind, v: &'a mut [T]) -> ParamSlot<'a, T> {
    ParamSlot { name, kind, shape: vec![v.len()], data: v }
}

fn bn_slots<'a, T: Element>(prefix: &str, bn: &'a mut BatchNormParams<T>, out: &mut Vec<ParamSlot<'a, T>>) {
    out.push(vec_slot(format!("{prefix}.gamma"), ParamKind::Trainable, &mut bn.gamma));
    out.push(vec_slot(format!("{prefix}.beta"), ParamKind::Trainable, &mut bn.beta));
    out.push(vec_slot(format!("{prefix}.running_mean"), ParamKind::Buffer, &mut bn.running_mean));
    out.push(vec_slot(format!("{prefix}.running_var"), ParamKind::Buffer, &mut bn.running_var));
    out.push(vec_slot(format!("{prefix}.eps"), ParamKind::Buffer, std::slice::from_mut(&mut bn.eps)));
}

/// A ConvRep position in the backbone, in either form.
#[derive(Debug, Clone, PartialEq)]
pub enum RepConv<T> {
    Branched(ConvRepBlock<T>),
    Folded(FoldedConv<T>),
}

impl<T: Element> RepConv<T> {
    pub fn fold(&self) -> Result<Self> {
        Ok(match self {
            RepConv::Branched(b) => RepConv::Folded(reparameterize(b)?),
            RepConv::Folded(f) => RepConv::Folded(f.clone()),
        })
    }

    pub fn param_count(&self) -> usize {
        match self {
            RepConv::Branched(b) => b.param_count(),
            RepConv::Folded(f) => f.param_count(),
        }
    }

    /// Output bias of the block (the trailing 1x1 for branched form).
    fn output_bias_mut(&mut self) -> &mut [T] {
        match self {
            RepConv::Branched(b) => &mut b.pointwise.bias,
            RepConv::Folded(f) => &mut f.conv.bias,
        }
    }

    fn record(&self, rec: &mut Recorder<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        match self {
            RepConv::Folded(f) => rec.conv(&format!("{prefix}.conv"), &f.conv, x),
            RepConv::Branched(block) => {
                let mut outs = Vec::with_capacity(block.branches.len());
                for (i, br) in block.branches.iter().enumerate() {
                    let mut y = rec.conv(&format!("{prefix}.branch{i}.conv"), &br.conv, x)?;
                    if let Some(bn) = &br.bn {
                        y = rec.bn(&format!("{prefix}.branch{i}.bn"), bn, y)?;
                    }
                    outs.push(y);
                }
                let cat = rec.tape.concat(&outs)?;
                rec.conv(&format!("{prefix}.pointwise"), &block.pointwise, cat)
            }
        }
    }

    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamSlot<'a, T>>) {
        match self {
            RepConv::Folded(f) => conv_slots(&format!("{prefix}.conv"), &mut f.conv, out),
            RepConv::Branched(block) => {
                for (i, br) in block.branches.iter_mut().enumerate() {
                    conv_slots(&format!("{prefix}.branch{i}.conv"), &mut br.conv, out);
                    if let Some(bn) = &mut br.bn {
                        bn_slots(&format!("{prefix}.branch{i}.bn"), bn, out);
                    }
                }
                conv_slots(&format!("{prefix}.pointwise"), &mut block.pointwise, out);
            }
        }
    }

    fn batchnorms_mut(&mut self, prefix: &str) -> Vec<(String, &mut BatchNormParams<T>)> {
        match self {
            RepConv::Folded(_) => Vec::new(),
            RepConv::Branched(block) => block
                .branches
                .iter_mut()
                .enumerate()
                .filter_map(|(i, br)| br.bn.as_mut().map(|bn| (format!("{prefix}.branch{i}.bn"), bn)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub conv: Conv2dParams<T>,
    pub prelu: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tail<T> {
    pub conv: Conv2dParams<T>,
}

/// The full network. Fields are public so that tests and tools can inspect
/// or overwrite individual parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SyeNetModel<T> {
    config: SyeNetConfig,
    pub head: Head<T>,
    pub a1_complex: [RepConv<T>; 2],
    pub a1_simple: RepConv<T>,
    pub a2_complex: RepConv<T>,
    pub a2_simple: RepConv<T>,
    pub fuse1: Fusion<T>,
    pub fuse2: Fusion<T>,
    pub ca: ChannelAttention<T>,
    pub final_conv: RepConv<T>,
    pub tail: Tail<T>,
}

const PRELU_INIT: f64 = 0.25;

impl<T: Element> SyeNetModel<T> {
    /// [`Self::new`] driven by a ChaCha8 stream seeded with `seed`.
    pub fn seeded(config: SyeNetConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    /// Randomly initialized training-form model.
    pub fn new<R: Rng + ?Sized>(config: SyeNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let head_in = match config.task {
            Task::Isp => 4,
            Task::Sr { .. } | Task::Lle => 3,
        };
        let head = Head {
            conv: Conv2dParams::random(c, head_in, 3, INIT_GAIN, 0.0, rng)?,
            prelu: config.prelu.then(|| vec![cast(PRELU_INIT); c]),
        };
        let block = |nominal: usize, rng: &mut R| -> Result<RepConv<T>> {
            let menu: Vec<(usize, bool)> = config.branch_menu.iter().map(|e| e.resolve(nominal)).collect();
            Ok(RepConv::Branched(ConvRepBlock::init(c, c, nominal, &menu, config.expansion, rng)?))
        };
        let a1_complex = [block(5, rng)?, block(5, rng)?];
        let mut a1_simple = block(5, rng)?;
        let a2_complex = block(3, rng)?;
        let mut a2_simple = block(1, rng)?;
        let final_conv = block(3, rng)?;
        if matches!(config.fusion, FusionKind::Qcu | FusionKind::Mul) {
            // The product then starts close to the complex branch alone.
            a1_simple.output_bias_mut().fill(T::one());
            a2_simple.output_bias_mut().fill(T::one());
        }
        let fusion = |rng: &mut R| -> Result<Fusion<T>> {
            Ok(match config.fusion {
                FusionKind::Qcu => Fusion::Qcu { bias: vec![T::zero(); c] },
                FusionKind::Add => Fusion::Add,
                FusionKind::Mul => Fusion::Mul,
                FusionKind::CatConv => Fusion::CatConv { conv: Conv2dParams::random(c, 2 * c, 1, INIT_GAIN, 0.0, rng)? },
            })
        };
        let fuse1 = fusion(rng)?;
        let fuse2 = fusion(rng)?;
        let mid = c / config.ca_reduction;
        let ca = ChannelAttention::new(
            Conv2dParams::random(mid, c, 1, 1.0, 0.0, rng)?,
            Conv2dParams::random(c, mid, 1, 1.0, 0.0, rng)?,
        )?;
        let tail_out = match config.task {
            Task::Sr { scale } => 3 * scale * scale,
            Task::Isp => 12,
            Task::Lle => 3,
        };
        // Small weights and a mid-gray bias: the untrained net predicts a flat
        // 0.5 image instead of saturating at the clamp.
        let mut tail = Tail { conv: Conv2dParams::random(tail_out, c, 3, 0.1 * INIT_GAIN, 0.0, rng)? };
        tail.conv.bias.iter_mut().for_each(|b| *b = cast(0.5));
        Ok(SyeNetModel {
            config,
            head,
            a1_complex,
            a1_simple,
            a2_complex,
            a2_simple,
            fuse1,
            fuse2,
            ca,
            final_conv,
            tail,
        })
    }

    pub fn config(&self) -> &SyeNetConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        match self.a1_simple {
            RepConv::Branched(_) => Mode::Training,
            RepConv::Folded(_) => Mode::Folded,
        }
    }

    fn rep_convs(&self) -> [&RepConv<T>; 6] {
        [
            &self.a1_complex[0],
            &self.a1_complex[1],
            &self.a1_simple,
            &self.a2_complex,
            &self.a2_simple,
            &self.final_conv,
        ]
    }

    /// Inference form with every ConvRep block folded.
    pub fn fold(&self) -> Result<Self> {
        let mut out = self.clone();
        out.a1_complex = [self.a1_complex[0].fold()?, self.a1_complex[1].fold()?];
        out.a1_simple = self.a1_simple.fold()?;
        out.a2_complex = self.a2_complex.fold()?;
        out.a2_simple = self.a2_simple.fold()?;
        out.final_conv = self.final_conv.fold()?;
        Ok(out)
    }

    /// Convolutions between head and tail that act on feature maps (the
    /// channel-attention gate acts on pooled vectors and is not counted).
    pub fn backbone_conv_count(&self) -> usize {
        let per_rep = |r: &RepConv<T>| match r {
            RepConv::Folded(_) => 1,
            RepConv::Branched(b) => b.branches.len() + 1,
        };
        let fusion = |f: &Fusion<T>| usize::from(matches!(f, Fusion::CatConv { .. }));
        self.rep_convs().iter().map(|r| per_rep(r)).sum::<usize>() + fusion(&self.fuse1) + fusion(&self.fuse2)
    }

    /// Trainable scalars in the current form. The backbone covers the
    /// ConvRep blocks, fusion and channel attention.
    pub fn param_count(&self, include_head_tail: bool) -> usize {
        let backbone = self.rep_convs().iter().map(|r| r.param_count()).sum::<usize>()
            + self.fuse1.param_count()
            + self.fuse2.param_count()
            + self.ca.param_count();
        if !include_head_tail {
            return backbone;
        }
        backbone
            + self.head.conv.param_count()
            + self.head.prelu.as_ref().map_or(0, Vec::len)
            + self.tail.conv.param_count()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let d = x.dims();
        let want = self.config.task.input_channels();
        if d.c != want {
            return shape_err(format!("{} input must have {want} channels, got {}", self.config.task.name(), d.c));
        }
        if self.config.task == Task::Isp && (!d.h.is_multiple_of(2) || !d.w.is_multiple_of(2)) {
            return shape_err(format!("raw mosaic must have even sides, got {}x{}", d.h, d.w));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. The output is not clamped.
    pub fn record(&self, tape: &mut Tape<T>, x: &Tensor<T>, bn_mode: BnMode) -> Result<Recorded<T>> {
        self.check_input(x)?;
        let mut rec = Recorder { tape, bn_mode, params: Vec::new(), bn_stats: Vec::new() };
        let input = rec.tape.leaf(x.clone());
        let mut h = input;
        if self.config.task == Task::Isp {
            h = rec.tape.pixel_unshuffle(h, 2)?;
        }
        h = rec.conv("head.conv", &self.head.conv, h)?;
        if let Some(slope) = &self.head.prelu {
            let a = rec.channel_param("head.prelu".into(), slope);
            h = rec.tape.prelu(h, a)?;
        }
        let mut f1 = self.a1_complex[0].record(&mut rec, "a1c0", h)?;
        f1 = self.a1_complex[1].record(&mut rec, "a1c1", f1)?;
        let f2 = self.a1_simple.record(&mut rec, "a1s", h)?;
        let i1 = record_fusion(&mut rec, "fuse1", &self.fuse1, f1, f2)?;
        let g1 = self.a2_complex.record(&mut rec, "a2c", i1)?;
        let g2 = self.a2_simple.record(&mut rec, "a2s", i1)?;
        let i2 = record_fusion(&mut rec, "fuse2", &self.fuse2, g1, g2)?;
        let z = rec.tape.global_avg_pool(i2);
        let z = rec.conv("ca.reduce", &self.ca.reduce, z)?;
        let z = rec.conv("ca.expand", &self.ca.expand, z)?;
        let gate = rec.tape.sigmoid(z);
        let y = rec.tape.channel_scale(i2, gate)?;
        let y = self.final_conv.record(&mut rec, "final", y)?;
        let mut out = rec.conv("tail.conv", &self.tail.conv, y)?;
        let r = match self.config.task {
            Task::Sr { scale } => scale,
            Task::Isp => 2,
            Task::Lle => 1,
        };
        if r > 1 {
            out = rec.tape.pixel_shuffle(out, r)?;
        }
        Ok(Recorded { input, output: out, params: rec.params, bn_stats: rec.bn_stats })
    }

    /// Inference-semantics forward without the final clamp.
    pub fn forward_unclamped(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x, BnMode::Running)?;
        Ok(tape.value(rec.output).clone())
    }

    /// Inference forward, clamped to `[0, 1]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_unclamped(x)?.clamp(T::zero(), T::one()))
    }

    /// Mutable views of every parameter and buffer, in a fixed order.
    pub fn slots_mut(&mut self) -> Vec<ParamSlot<'_, T>> {
        let mut out = Vec::new();
        conv_slots("head.conv", &mut self.head.conv, &mut out);
        if let Some(slope) = &mut self.head.prelu {
            out.push(vec_slot("head.prelu".into(), ParamKind::Trainable, slope));
        }
        let [a, b] = &mut self.a1_complex;
        a.slots("a1c0", &mut out);
        b.slots("a1c1", &mut out);
        self.a1_simple.slots("a1s", &mut out);
        fusion_slots("fuse1", &mut self.fuse1, &mut out);
        self.a2_complex.slots("a2c", &mut out);
        self.a2_simple.slots("a2s", &mut out);
        fusion_slots("fuse2", &mut self.fuse2, &mut out);
        conv_slots("ca.reduce", &mut self.ca.reduce, &mut out);
        conv_slots("ca.expand", &mut self.ca.expand, &mut out);
        self.final_conv.slots("final", &mut out);
        conv_slots("tail.conv", &mut self.tail.conv, &mut out);
        out
    }

    /// Owned copy of every parameter and buffer, in [`Self::slots_mut`] order.
    pub fn named_params(&self) -> Vec<NamedParam<T>> {
        let mut copy = self.clone();
        copy.slots_mut()
            .into_iter()
            .map(|s| NamedParam { name: s.name, kind: s.kind, shape: s.shape, data: s.data.to_vec() })
            .collect()
    }

    /// Overwrites parameters by name. Every slot must be covered exactly once.
    pub fn load_params(&mut self, params: &[NamedParam<T>]) -> Result<()> {
        let mut slots = self.slots_mut();
        if slots.len() != params.len() {
            return Err(Error::Format(format!("model has {} tensors, file has {}", slots.len(), params.len())));
        }
        for (slot, p) in slots.iter_mut().zip(params) {
            if slot.name != p.name {
                return Err(Error::Format(format!("expected tensor {:?}, found {:?}", slot.name, p.name)));
            }
            if slot.shape != p.shape {
                return Err(Error::Format(format!("tensor {} has shape {:?}, model expects {:?}", p.name, p.shape, slot.shape)));
            }
            slot.data.copy_from_slice(&p.data);
        }
        Ok(())
    }

    /// Blends observed batch statistics into running statistics:
    /// `running = (1 - momentum) * running + momentum * batch`, with the
    /// batch variance made unbiased.
    pub fn update_bn_stats(&mut self, stats: &[(String, BatchStats<T>)], momentum: T) -> Result<()> {
        let mut bns: Vec<(String, &mut BatchNormParams<T>)> = Vec::new();
        let [a, b] = &mut self.a1_complex;
        bns.extend(a.batchnorms_mut("a1c0"));
        bns.extend(b.batchnorms_mut("a1c1"));
        bns.extend(self.a1_simple.batchnorms_mut("a1s"));
        bns.extend(self.a2_complex.batchnorms_mut("a2c"));
        bns.extend(self.a2_simple.batchnorms_mut("a2s"));
        bns.extend(self.final_conv.batchnorms_mut("final"));
        for (name, s) in stats {
            let bn = match bns.iter_mut().find(|(n, _)| n == name) {
                Some((_, bn)) => bn,
                None => return config_err(format!("no batch norm named {name}")),
            };
            let unbias: T = if s.count > 1 { cast(s.count as f64 / (s.count - 1) as f64) } else { T::one() };
            let keep = T::one() - momentum;
            for c in 0..bn.channels() {
                bn.running_mean[c] = keep * bn.running_mean[c] + momentum * s.mean[c];
                bn.running_var[c] = keep * bn.running_var[c] + momentum * s.var[c] * unbias;
            }
        }
        Ok(())
    }
}

fn record_fusion<T: Element>(rec: &mut Recorder<'_, T>, prefix: &str, fusion: &Fusion<T>, f1: Var, f2: Var) -> Result<Var> {
    match fusion {
        Fusion::Qcu { bias } => {
            let b = rec.channel_param(format!("{prefix}.bias"), bias);
            let p = rec.tape.mul(f1, f2)?;
            rec.tape.add_channel_bias(p, b)
        }
        Fusion::Add => rec.tape.add(f1, f2),
        Fusion::Mul => rec.tape.mul(f1, f2),
        Fusion::CatConv { conv } => {
            let cat = rec.tape.concat(&[f1, f2])?;
            rec.conv(&format!("{prefix}.conv"), conv, cat)
        }
    }
}

fn fusion_slots<'a, T: Element>(prefix: &str, fusion: &'a mut Fusion<T>, out: &mut Vec<ParamSlot<'a, T>>) {
    match fusion {
        Fusion::Qcu { bias } => out.push(vec_slot(format!("{prefix}.bias"), ParamKind::Trainable, bias)),
        Fusion::Add | Fusion::Mul => {}
        Fusion::CatConv { conv } => conv_slots(&format!("{prefix}.conv"), conv, out),
    }
}

/// Compares unclamped inference outputs of two models of the same
/// configuration on random `16x16` inputs.
pub fn verify_models<T: Element>(
    reference: &SyeNetModel<T>,
    candidate: &SyeNetModel<T>,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    if trials == 0 {
        return config_err("model verification needs at least one trial");
    }
    if reference.config() != candidate.config() {
        return config_err("models have different configurations");
    }
    let mut max_abs_diff = 0.0f64;
    for x in equivalence_inputs::<T>(reference.config().task.input_channels(), 16, trials, seed) {
        let a = reference.forward_unclamped(&x)?;
        let b = candidate.forward_unclamped(&x)?;
        for (p, q) in a.data().iter().zip(b.data()) {
            let d = (*p - *q).abs().to_f64().unwrap_or(f64::INFINITY);
            max_abs_diff = max_abs_diff.max(if d.is_nan() { f64::INFINITY } else { d });
        }
    }
    Ok(EquivalenceReport { max_abs_diff, trials, tolerance, pass: max_abs_diff <= tolerance })
}
