//! Folding a multi-branch ConvRep block into a single convolution.
//!
//! A block runs `N` parallel branches (convolution, optionally followed by
//! batch norm), concatenates their outputs along channels and mixes them with
//! a trailing 1x1 convolution. Every stage is affine in the input, so the
//! whole block collapses to one `K x K` convolution:
//!
//! 1. [`fold_bn`] absorbs each branch's batch norm into its conv weights.
//! 2. [`pad_kernel`] zero-pads smaller kernels to the block's nominal size,
//!    keeping them centered.
//! 3. [`fold_concat`] stacks branch kernels along the output-channel axis.
//! 4. [`fold_pointwise`] multiplies the 1x1 mixing matrix through.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{batchnorm_infer, concat_channels, conv2d, BatchNormParams, Conv2dParams, Dims, Element, Tensor};

/// Uniform init bound, in units of `1/sqrt(fan_in)`, that keeps activation
/// variance constant through a linear layer.
pub const INIT_GAIN: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec<T> {
    /// `c_in -> R * c_out` convolution.
    pub conv: Conv2dParams<T>,
    pub bn: Option<BatchNormParams<T>>,
}

impl<T: Element> BranchSpec<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.conv)?;
        match &self.bn {
            Some(bn) => batchnorm_infer(&y, bn),
            None => Ok(y),
        }
    }
}

/// Training-time multi-branch block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvRepBlock<T> {
    pub branches: Vec<BranchSpec<T>>,
    /// `N * R * c_out -> c_out`, 1x1.
    pub pointwise: Conv2dParams<T>,
    pub nominal_kernel: usize,
}

impl<T: Element> ConvRepBlock<T> {
    pub fn new(branches: Vec<BranchSpec<T>>, pointwise: Conv2dParams<T>, nominal_kernel: usize) -> Result<Self> {
        let block = ConvRepBlock { branches, pointwise, nominal_kernel };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.nominal_kernel;
        if k.is_multiple_of(2) {
            return config_err(format!("nominal kernel {k} must be odd"));
        }
        let first = match self.branches.first() {
            Some(b) => &b.conv,
            None => return config_err("a ConvRep block needs at least one branch"),
        };
        let (c_in, width) = (first.c_in(), first.c_out());
        let mut cat_channels = 0;
        for (idx, b) in self.branches.iter().enumerate() {
            if b.conv.c_in() != c_in || b.conv.c_out() != width {
                return shape_err(format!(
                    "branch {idx} maps {}->{} but branch 0 maps {c_in}->{width}",
                    b.conv.c_in(),
                    b.conv.c_out()
                ));
            }
            let (kh, kw) = b.conv.kernel();
            if kh > k || kw > k {
                return config_err(format!("branch {idx} kernel {kh}x{kw} exceeds nominal {k}"));
            }
            if b.conv.padding != ((kh - 1) / 2, (kw - 1) / 2) {
                return config_err(format!("branch {idx} must use same padding"));
            }
            if let Some(bn) = &b.bn {
                if bn.channels() != width {
                    return shape_err(format!("branch {idx} batch norm has {} channels, conv has {width}", bn.channels()));
                }
            }
            cat_channels += width;
        }
        if self.pointwise.kernel() != (1, 1) || self.pointwise.padding != (0, 0) {
            return config_err("trailing convolution must be 1x1 without padding");
        }
        if self.pointwise.c_in() != cat_channels {
            return shape_err(format!(
                "trailing 1x1 expects {} channels, branches produce {cat_channels}",
                self.pointwise.c_in()
            ));
        }
        if width % self.pointwise.c_out() != 0 {
            return shape_err("branch width must be a multiple of the block's output channels");
        }
        Ok(())
    }

    /// Builds a block from a menu of `(kernel, with_bn)` branches. Kernels larger
    /// than `nominal` are clamped to it.
    pub fn init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        nominal: usize,
        menu: &[(usize, bool)],
        expansion: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if expansion == 0 {
            return config_err("expansion ratio must be positive");
        }
        let width = expansion * c_out;
        let mut branches = Vec::with_capacity(menu.len());
        for &(k, with_bn) in menu {
            let k = k.min(nominal);
            let conv = Conv2dParams::random(width, c_in, k, INIT_GAIN, 0.0, rng)?;
            let bn = with_bn.then(|| BatchNormParams::identity(width, crate::tensor::cast(1e-5)));
            branches.push(BranchSpec { conv, bn });
        }
        let pointwise = Conv2dParams::random(c_out, width * menu.len(), 1, INIT_GAIN, 0.0, rng)?;
        Self::new(branches, pointwise, nominal)
    }

    pub fn c_in(&self) -> usize {
        self.branches[0].conv.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.pointwise.c_out()
    }

    /// Expansion ratio `R`.
    pub fn expansion(&self) -> usize {
        self.branches[0].conv.c_out() / self.c_out()
    }

    /// Inference-mode forward: batch norm uses running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let outs = self.branches.iter().map(|b| b.forward(x)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        conv2d(&concat_channels(&refs)?, &self.pointwise)
    }

    /// Trainable scalars (batch-norm running statistics excluded).
    pub fn param_count(&self) -> usize {
        let branches: usize = self
            .branches
            .iter()
            .map(|b| b.conv.param_count() + b.bn.as_ref().map_or(0, |bn| 2 * bn.channels()))
            .sum();
        branches + self.pointwise.param_count()
    }
}

/// Inference form of a [`ConvRepBlock`].
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedConv<T> {
    pub conv: Conv2dParams<T>,
}

impl<T: Element> FoldedConv<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.conv)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

/// Absorbs an inference batch norm into the preceding convolution.
pub fn fold_bn<T: Element>(conv: &Conv2dParams<T>, bn: &BatchNormParams<T>) -> Result<Conv2dParams<T>> {
    if bn.channels() != conv.c_out() {
        return shape_err(format!("batch norm has {} channels, conv produces {}", bn.channels(), conv.c_out()));
    }
    let d = conv.weight.dims();
    let per = d.c * d.h * d.w;
    let mut weight = conv.weight.clone();
    let mut bias = Vec::with_capacity(d.n);
    for o in 0..d.n {
        let w_bn = T::one() / (bn.running_var[o] + bn.eps).sqrt();
        let b_bn = -bn.running_mean[o] * w_bn;
        let factor = bn.gamma[o] * w_bn;
        for v in &mut weight.data_mut()[o * per..(o + 1) * per] {
            *v = factor * *v;
        }
        bias.push(bn.gamma[o] * (w_bn * conv.bias[o] + b_bn) + bn.beta[o]);
    }
    Conv2dParams::new(weight, bias, conv.padding)
}

/// Zero-pads an odd kernel to `k x k`, centered, and widens the padding so the
/// convolution output is unchanged.
pub fn pad_kernel<T: Element>(conv: &Conv2dParams<T>, k: usize) -> Result<Conv2dParams<T>> {
    let (kh, kw) = conv.kernel();
    if k.is_multiple_of(2) || kh % 2 == 0 || kw % 2 == 0 {
        return config_err(format!("pad_kernel needs odd sizes, got {kh}x{kw} -> {k}"));
    }
    if kh > k || kw > k {
        return config_err(format!("kernel {kh}x{kw} larger than target {k}"));
    }
    let (dy, dx) = ((k - kh) / 2, (k - kw) / 2);
    let d = conv.weight.dims();
    let weight = Tensor::from_fn(Dims::new(d.n, d.c, k, k), |o, i, y, x| {
        if y >= dy && y < dy + kh && x >= dx && x < dx + kw {
            conv.weight.at(o, i, y - dy, x - dx)
        } else {
            T::zero()
        }
    });
    Conv2dParams::new(weight, conv.bias.clone(), (conv.padding.0 + dy, conv.padding.1 + dx))
}

/// Stacks convolutions sharing input channels and kernel size along `c_out`.
pub fn fold_concat<T: Element>(branches: &[Conv2dParams<T>]) -> Result<Conv2dParams<T>> {
    let first = match branches.first() {
        Some(b) => b,
        None => return config_err("fold_concat needs at least one branch"),
    };
    let mut data = Vec::new();
    let mut bias = Vec::new();
    for (idx, b) in branches.iter().enumerate() {
        if b.c_in() != first.c_in() || b.kernel() != first.kernel() || b.padding != first.padding {
            return shape_err(format!("branch {idx} does not match branch 0 in c_in, kernel or padding"));
        }
        data.extend_from_slice(b.weight.data());
        bias.extend_from_slice(&b.bias);
    }
    let (kh, kw) = first.kernel();
    let weight = Tensor::from_vec(Dims::new(bias.len(), first.c_in(), kh, kw), data)?;
    Conv2dParams::new(weight, bias, first.padding)
}

/// Composes a 1x1 convolution after `cat`:
/// `W[o,i] = sum_m P[o,m] * cat.W[m,i]`, `B[o] = sum_m P[o,m] * cat.B[m] + P.B[o]`.
pub fn fold_pointwise<T: Element>(cat: &Conv2dParams<T>, pointwise: &Conv2dParams<T>) -> Result<Conv2dParams<T>> {
    if pointwise.kernel() != (1, 1) || pointwise.padding != (0, 0) {
        return config_err("fold_pointwise needs an unpadded 1x1 convolution");
    }
    if pointwise.c_in() != cat.c_out() {
        return shape_err(format!("pointwise expects {} channels, got {}", pointwise.c_in(), cat.c_out()));
    }
    let cd = cat.weight.dims();
    let per = cd.c * cd.h * cd.w;
    let mix = pointwise.weight.data();
    let src = cat.weight.data();
    let c_out = pointwise.c_out();
    let mut weight = vec![T::zero(); c_out * per];
    let mut bias = Vec::with_capacity(c_out);
    for o in 0..c_out {
        let row = &mix[o * cd.n..(o + 1) * cd.n];
        let dst = &mut weight[o * per..(o + 1) * per];
        let mut b = T::zero();
        for (m, &p) in row.iter().enumerate() {
            for (d, &s) in dst.iter_mut().zip(&src[m * per..(m + 1) * per]) {
                *d = *d + p * s;
            }
            b = b + p * cat.bias[m];
        }
        bias.push(b + pointwise.bias[o]);
    }
    Conv2dParams::new(Tensor::from_vec(Dims::new(c_out, cd.c, cd.h, cd.w), weight)?, bias, cat.padding)
}

/// fold_bn -> pad_kernel -> fold_concat -> fold_pointwise.
pub fn reparameterize<T: Element>(block: &ConvRepBlock<T>) -> Result<FoldedConv<T>> {
    block.validate()?;
    let mut padded = Vec::with_capacity(block.branches.len());
    for b in &block.branches {
        let conv = match &b.bn {
            Some(bn) => fold_bn(&b.conv, bn)?,
            None => b.conv.clone(),
        };
        padded.push(pad_kernel(&conv, block.nominal_kernel)?);
    }
    let cat = fold_concat(&padded)?;
    Ok(FoldedConv { conv: fold_pointwise(&cat, &block.pointwise)? })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub trials: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Random probe inputs for equivalence checks: uniform in `[-1, 1)`, never all zero.
pub fn equivalence_inputs<T: Element>(c_in: usize, spatial: usize, trials: usize, seed: u64) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| loop {
            let x = Tensor::random_uniform(Dims::new(2, c_in, spatial, spatial), -1.0, 1.0, &mut rng);
            if x.data().iter().any(|v| *v != T::zero()) {
                break x;
            }
        })
        .collect()
}

/// Runs random inputs through the branched block and its folded form and
/// reports the largest absolute output difference.
pub fn verify_equivalence<T: Element>(
    block: &ConvRepBlock<T>,
    folded: &FoldedConv<T>,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    if trials == 0 {
        return config_err("verify_equivalence needs at least one trial");
    }
    if folded.conv.c_in() != block.c_in() || folded.conv.c_out() != block.c_out() {
        return shape_err(format!(
            "folded conv maps {}->{}, block maps {}->{}",
            folded.conv.c_in(),
            folded.conv.c_out(),
            block.c_in(),
            block.c_out()
        ));
    }
    let spatial = (2 * block.nominal_kernel + 1).max(8);
    let mut max_abs_diff = 0.0f64;
    for x in equivalence_inputs::<T>(block.c_in(), spatial, trials, seed) {
        let a = block.forward(&x)?;
        let b = folded.forward(&x)?;
        let diff = a.max_abs_diff(&b)?.to_f64().unwrap_or(f64::INFINITY);
        max_abs_diff = if diff.is_nan() { f64::INFINITY } else { max_abs_diff.max(diff) };
    }
    Ok(EquivalenceReport { max_abs_diff, trials, tolerance, pass: max_abs_diff <= tolerance })
}
