//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{image_stats, oa_loss_frozen, oa_loss_grad_frozen, LossParams};
use crate::network::{BnMode, ParamKind, SyeNetConfig, SyeNetModel};
use crate::tensor::{Dims, Tensor};

use super::tape::Tape;
use super::toy::compute_gradients;

/// Outcome of comparing analytic and numerical derivatives on a set of coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst: Option<usize>,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Magnitude below which derivatives are compared absolutely; keeps
    /// round-off on near-zero derivatives from dominating the ratio.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tolerance: 1e-4, floor: 1e-6 }
    }
}

/// Compares `analytic[i]` to `(f(theta + h e_i) - f(theta - h e_i)) / 2h` for
/// each `i` in `coords`.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    opts: GradCheckOptions,
) -> GradCheckReport {
    let mut probe = theta.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + opts.h;
        let up = f(&probe);
        probe[i] = orig - opts.h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * opts.h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        if rel > max_rel_error || worst.is_none() {
            max_rel_error = max_rel_error.max(rel);
            worst = Some(i);
        }
    }
    GradCheckReport {
        checked: coords.len(),
        max_rel_error,
        worst,
        tolerance: opts.tolerance,
        pass: max_rel_error <= opts.tolerance,
    }
}

/// Checks `d loss(model(input)) / d theta` over the trainable parameters in
/// training form with batch statistics. One coordinate is drawn from every
/// trainable tensor, then the rest uniformly, `count` in total.
pub fn model_grad_check(
    model: &SyeNetModel<f64>,
    input: &Tensor<f64>,
    loss: impl Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
    count: usize,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let out = compute_gradients(model, input, BnMode::Batch, &loss)?;
    let mut theta = Vec::new();
    let mut analytic = Vec::new();
    let mut spans = Vec::new();
    for p in model.named_params().into_iter().filter(|p| p.kind == ParamKind::Trainable) {
        let g = &out.grads[&p.name];
        spans.push((theta.len(), p.data.len()));
        theta.extend_from_slice(&p.data);
        analytic.extend_from_slice(g);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = spans.iter().map(|&(start, len)| start + rng.gen_range(0..len)).collect();
    coords.truncate(count);
    let rest: Vec<usize> = sample(&mut rng, theta.len(), count.min(theta.len()))
        .into_iter()
        .filter(|i| !coords.contains(i))
        .collect();
    coords.extend(rest.into_iter().take(count - coords.len()));

    let mut failure = None;
    let report = grad_check(
        |t| {
            let mut m = model.clone();
            let mut offset = 0;
            for s in m.slots_mut().into_iter().filter(|s| s.kind == ParamKind::Trainable) {
                s.data.copy_from_slice(&t[offset..offset + s.data.len()]);
                offset += s.data.len();
            }
            match compute_gradients(&m, input, BnMode::Batch, &loss) {
                Ok(o) => o.loss,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &theta,
        &analytic,
        &coords,
        opts,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Full-model check of a freshly initialized 64-bit model of `config` under
/// the outlier-aware loss, on a random batch of two `8x8` inputs. The loss
/// statistics are frozen at the starting point, as in training.
pub fn config_grad_check(
    config: &SyeNetConfig,
    loss: &LossParams,
    seed: u64,
    count: usize,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let model = SyeNetModel::<f64>::seeded(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let task = config.task;
    let x = Tensor::random_uniform(Dims::new(2, task.input_channels(), 8, 8), 0.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let rec = model.record(&mut tape, &x, BnMode::Batch)?;
    let d = tape.value(rec.output).dims();
    let y = Tensor::random_uniform(d, 0.0, 1.0, &mut rng);
    let stats = image_stats(tape.value(rec.output), &y, loss.p)?;
    model_grad_check(
        &model,
        &x,
        |p| Ok((oa_loss_frozen(p, &y, loss, &stats)?, oa_loss_grad_frozen(p, &y, loss, &stats)?)),
        count,
        seed,
        opts,
    )
}
