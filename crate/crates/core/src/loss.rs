//! Outlier-Aware loss.
//!
//! Each residual `d = pred - gt` is charged `|d|^p * w(d)` with
//! `w(d) = 1 - exp(-alpha * |d - mu|^p / b)`, where `mu` is the residual mean
//! of the image and `b` its scale: `sqrt(var / 2)` for `p = 1` (Laplacian) and
//! `2 var` for `p = 2`. Pixels far from the typical residual get close to full
//! `L_p` weight; pixels near it are discounted. `mu` and `b` are treated as
//! constants when differentiating, and are computed per image (batch index).

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{cast, sub, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub alpha: f64,
    /// Norm order, 1 or 2.
    pub p: u8,
}

impl LossParams {
    pub fn new(alpha: f64, p: u8) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return config_err(format!("alpha must be positive and finite, got {alpha}"));
        }
        if p != 1 && p != 2 {
            return config_err(format!("norm order must be 1 or 2, got {p}"));
        }
        Ok(LossParams { alpha, p })
    }
}

/// Residual statistics of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffStats<T> {
    pub delta: Tensor<T>,
    pub mu: f64,
    /// Population variance.
    pub sigma2: f64,
    /// Zero when `degenerate`.
    pub b: f64,
    /// Zero variance: the weight is undefined and the loss falls back to `L_p`.
    pub degenerate: bool,
}

impl<T: Element> DiffStats<T> {
    pub fn frozen(&self) -> FrozenStats {
        FrozenStats { mu: self.mu, b: self.b, degenerate: self.degenerate }
    }
}

/// The part of [`DiffStats`] that the loss treats as constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrozenStats {
    pub mu: f64,
    pub b: f64,
    pub degenerate: bool,
}

fn scale_for(sigma2: f64, p: u8) -> f64 {
    if p == 1 {
        (sigma2 / 2.0).sqrt()
    } else {
        2.0 * sigma2
    }
}

fn stats_of(values: impl Iterator<Item = f64> + Clone, p: u8) -> FrozenStats {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mu = sum / n as f64;
    let sigma2 = values.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    let degenerate = sigma2 == 0.0;
    FrozenStats { mu, b: if degenerate { 0.0 } else { scale_for(sigma2, p) }, degenerate }
}

/// Residual and its statistics over the whole tensor.
pub fn diff_stats<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, p: u8) -> Result<DiffStats<T>> {
    LossParams::new(1.0, p)?;
    let delta = sub(pred, gt)?;
    let vals = delta.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN));
    let FrozenStats { mu, degenerate, b } = stats_of(vals.clone(), p);
    let sigma2 = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / delta.numel() as f64;
    Ok(DiffStats { delta, mu, sigma2, b, degenerate })
}

/// Statistics of each image (batch index) of `pred - gt`.
pub fn image_stats<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, p: u8) -> Result<Vec<FrozenStats>> {
    if pred.dims() != gt.dims() {
        return shape_err(format!("prediction {} vs target {}", pred.dims(), gt.dims()));
    }
    let per = pred.numel() / pred.dims().n;
    Ok(pred
        .data()
        .chunks(per)
        .zip(gt.data().chunks(per))
        .map(|(a, b)| {
            stats_of(a.iter().zip(b).map(|(&x, &y)| (x - y).to_f64().unwrap_or(f64::NAN)), p)
        })
        .collect())
}

/// `1 - exp(-alpha |delta - mu|^p / b)`, in `[0, 1)`.
pub fn oa_weight(delta: f64, stats: &FrozenStats, params: &LossParams) -> Result<f64> {
    if stats.degenerate || stats.b <= 0.0 {
        return Err(Error::Degenerate);
    }
    Ok(-(-params.alpha * (delta - stats.mu).abs().powi(params.p as i32) / stats.b).exp_m1())
}

fn weight_or_one(delta: f64, stats: &FrozenStats, params: &LossParams) -> f64 {
    oa_weight(delta, stats, params).unwrap_or(1.0)
}

fn check_stats<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, stats: &[FrozenStats]) -> Result<usize> {
    if pred.dims() != gt.dims() {
        return shape_err(format!("prediction {} vs target {}", pred.dims(), gt.dims()));
    }
    if stats.len() != pred.dims().n {
        return shape_err(format!("{} image statistics for a batch of {}", stats.len(), pred.dims().n));
    }
    Ok(pred.numel() / pred.dims().n)
}

/// Loss with caller-supplied statistics, one entry per image.
pub fn oa_loss_frozen<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, params: &LossParams, stats: &[FrozenStats]) -> Result<f64> {
    let per = check_stats(pred, gt, stats)?;
    let mut total = 0.0;
    for ((a, b), s) in pred.data().chunks(per).zip(gt.data().chunks(per)).zip(stats) {
        for (&x, &y) in a.iter().zip(b) {
            let d = (x - y).to_f64().unwrap_or(f64::NAN);
            total += d.abs().powi(params.p as i32) * weight_or_one(d, s, params);
        }
    }
    Ok(total / pred.numel() as f64)
}

/// Mean of `|d|^p * w(d)`; images with zero residual variance use plain `L_p`.
pub fn oa_loss<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, params: &LossParams) -> Result<f64> {
    oa_loss_frozen(pred, gt, params, &image_stats(pred, gt, params.p)?)
}

/// Gradient of [`oa_loss_frozen`] with respect to `pred`.
pub fn oa_loss_grad_frozen<T: Element>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    params: &LossParams,
    stats: &[FrozenStats],
) -> Result<Tensor<T>> {
    let per = check_stats(pred, gt, stats)?;
    let inv_n = 1.0 / pred.numel() as f64;
    let p = params.p as i32;
    let mut grad = Vec::with_capacity(pred.numel());
    for ((a, b), s) in pred.data().chunks(per).zip(gt.data().chunks(per)).zip(stats) {
        for (&x, &y) in a.iter().zip(b) {
            let d = (x - y).to_f64().unwrap_or(f64::NAN);
            // d/dd |d|^p, with the p = 1 subgradient at 0 taken as 0.
            let dlp = if p == 1 { sign(d) } else { 2.0 * d };
            let g = if s.degenerate {
                dlp
            } else {
                let e = d - s.mu;
                let decay = (-params.alpha * e.abs().powi(p) / s.b).exp();
                let de = if p == 1 { sign(e) } else { 2.0 * e };
                dlp * -(decay - 1.0) + d.abs().powi(p) * decay * params.alpha / s.b * de
            };
            grad.push(cast(g * inv_n));
        }
    }
    Tensor::from_vec(pred.dims(), grad)
}

/// Gradient of [`oa_loss`] with `mu` and `b` held constant.
pub fn oa_loss_grad<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, params: &LossParams) -> Result<Tensor<T>> {
    oa_loss_grad_frozen(pred, gt, params, &image_stats(pred, gt, params.p)?)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean `|pred - gt|^p`.
pub fn lp_loss<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, p: u8) -> Result<f64> {
    LossParams::new(1.0, p)?;
    let d = sub(pred, gt)?;
    Ok(d.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN).abs().powi(p as i32)).sum::<f64>() / d.numel() as f64)
}

pub fn lp_loss_grad<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, p: u8) -> Result<Tensor<T>> {
    LossParams::new(1.0, p)?;
    let d = sub(pred, gt)?;
    let inv_n = 1.0 / d.numel() as f64;
    Ok(d.map(|v| {
        let v = v.to_f64().unwrap_or(f64::NAN);
        cast(if p == 1 { sign(v) } else { 2.0 * v } * inv_n)
    }))
}

/// One row of the loss-shape table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisRow {
    pub x: f64,
    /// `f64::INFINITY` marks the plain `L_p` reference curve.
    pub alpha: f64,
    pub weight: f64,
    pub loss: f64,
    /// Share of the sampled total loss per unit `|x|` in `(x - step, x]`.
    pub density: f64,
    /// Share of the sampled total loss from residuals with `|d| <= x`.
    pub cumulative: f64,
}

pub const ANALYSIS_STEP: f64 = 0.05;

/// Tabulates weight, loss, loss density and cumulative loss share against
/// `|x|` for residuals drawn from a unit Laplacian (`mu = 0`, scale 1).
///
/// The loss scale follows the `p` rule from the Laplacian's variance of 2.
/// Rows for each alpha come first, followed by the `L_p` reference rows.
pub fn loss_analysis_emit(alphas: &[f64], p: u8, sample_count: usize, seed: u64) -> Result<Vec<AnalysisRow>> {
    for &a in alphas {
        LossParams::new(a, p)?;
    }
    if sample_count == 0 {
        return config_err("sample count must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<f64> = (0..sample_count)
        .map(|_| {
            // Inverse CDF; |u| < 0.5 keeps the log finite.
            let u: f64 = rng.gen_range(-0.5..0.5);
            (-sign(u) * (1.0 - 2.0 * u.abs()).ln()).abs()
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    let max = samples.last().copied().unwrap_or(0.0);
    let steps = (max.max(10.0) / ANALYSIS_STEP).ceil() as usize;
    let stats = FrozenStats { mu: 0.0, b: scale_for(2.0, p), degenerate: false };

    let mut curves: Vec<f64> = alphas.to_vec();
    curves.push(f64::INFINITY);
    let mut rows = Vec::with_capacity(curves.len() * (steps + 1));
    for &alpha in &curves {
        let weight = |x: f64| {
            if alpha.is_infinite() {
                1.0
            } else {
                weight_or_one(x, &stats, &LossParams { alpha, p })
            }
        };
        let loss = |x: f64| x.powi(p as i32) * weight(x);
        let total: f64 = samples.iter().map(|&s| loss(s)).sum();
        let mut acc = 0.0;
        let mut prev = 0.0;
        let mut idx = 0;
        for k in 0..=steps {
            let x = k as f64 * ANALYSIS_STEP;
            let edge = if k == steps { f64::INFINITY } else { x };
            while idx < samples.len() && samples[idx] <= edge {
                acc += loss(samples[idx]);
                idx += 1;
            }
            let cumulative = if total > 0.0 { acc / total } else { 0.0 };
            let density = if k == 0 { 0.0 } else { (cumulative - prev) / ANALYSIS_STEP };
            prev = cumulative;
            rows.push(AnalysisRow { x, alpha, weight: weight(x), loss: loss(x), density, cumulative });
        }
    }
    Ok(rows)
}

/// Writes rows as CSV with header `x,alpha,weight,loss,density,cumulative`.
pub fn write_analysis_csv<W: Write>(rows: &[AnalysisRow], mut out: W) -> Result<()> {
    writeln!(out, "x,alpha,weight,loss,density,cumulative")?;
    for r in rows {
        let alpha = if r.alpha.is_infinite() { "inf".to_string() } else { r.alpha.to_string() };
        writeln!(out, "{},{alpha},{},{},{},{}", r.x, r.weight, r.loss, r.density, r.cumulative)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn t(v: &[f64], h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(Dims::new(1, 1, h, w), v.to_vec()).unwrap()
    }

    #[test]
    fn worked_example_statistics() {
        let zero = t(&[0.0; 4], 2, 2);
        let s = diff_stats(&t(&[0.0, 1.0, -1.0, 2.0], 2, 2), &zero, 1).unwrap();
        assert_eq!(s.mu, 0.5);
        assert_eq!(s.sigma2, 1.25);
        assert!((s.b - 0.625f64.sqrt()).abs() < 1e-15);
        assert!(!s.degenerate);
        let s2 = diff_stats(&t(&[0.0, 1.0, -1.0, 2.0], 2, 2), &zero, 2).unwrap();
        assert_eq!(s2.b, 2.5);
        let c = diff_stats(&t(&[0.3; 4], 2, 2), &zero, 1).unwrap();
        assert!(c.degenerate && c.b == 0.0);
        assert!(diff_stats(&zero, &zero, 1).unwrap().degenerate);
    }

    #[test]
    fn weight_cases() {
        let s = FrozenStats { mu: 0.5, b: 0.625f64.sqrt(), degenerate: false };
        let lp = LossParams::new(1.0, 1).unwrap();
        assert_eq!(oa_weight(0.5, &s, &lp).unwrap(), 0.0);
        let w = oa_weight(1.0, &s, &lp).unwrap();
        assert!((w - (1.0 - (-0.5 / 0.625f64.sqrt()).exp())).abs() < 1e-15);
        assert!((w - 0.4687).abs() < 1e-4);
        let hard = LossParams::new(100.0, 1).unwrap();
        assert!(oa_weight(0.5 + 0.1 * s.b, &s, &hard).unwrap() > 1.0 - 1e-3);
        assert!(matches!(oa_weight(1.0, &FrozenStats { mu: 0.0, b: 0.0, degenerate: true }, &lp), Err(Error::Degenerate)));
        assert!(LossParams::new(0.0, 1).is_err());
        assert!(LossParams::new(1.0, 3).is_err());
    }

    #[test]
    fn worked_example_loss() {
        let pred = t(&[0.0, 1.0, -1.0, 2.0], 2, 2);
        let gt = t(&[0.0; 4], 2, 2);
        let lp = LossParams::new(1.0, 1).unwrap();
        let b = 0.625f64.sqrt();
        // Independent per-pixel evaluation.
        let terms: Vec<f64> = [0.0f64, 1.0, -1.0, 2.0]
            .iter()
            .map(|&d| d.abs() * (1.0 - (-(d - 0.5f64).abs() / b).exp()))
            .collect();
        let oracle = terms.iter().sum::<f64>() / 4.0;
        let l = oa_loss(&pred, &gt, &lp).unwrap();
        assert!((l - oracle).abs() < 1e-15);
        assert!((l - 0.75475).abs() < 1e-3);
        assert_eq!(lp_loss(&pred, &gt, 1).unwrap(), 1.0);
        assert!(l <= 1.0);
        assert_eq!(oa_loss(&gt, &gt, &lp).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_falls_back_to_lp() {
        let pred = t(&[0.5; 4], 2, 2);
        let gt = t(&[0.0; 4], 2, 2);
        let lp = LossParams::new(1.0, 2).unwrap();
        assert_eq!(oa_loss(&pred, &gt, &lp).unwrap(), lp_loss(&pred, &gt, 2).unwrap());
        assert_eq!(oa_loss_grad(&pred, &gt, &lp).unwrap(), lp_loss_grad(&pred, &gt, 2).unwrap());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let gt = t(&[0.1, -0.4, 0.7, 0.2], 2, 2);
        let pred = t(&[0.5, 0.3, -0.2, 0.9], 2, 2);
        for p in [1u8, 2] {
            let lp = LossParams::new(1.3, p).unwrap();
            let stats = image_stats(&pred, &gt, p).unwrap();
            let g = oa_loss_grad(&pred, &gt, &lp).unwrap();
            let h = 1e-5;
            for i in 0..4 {
                let mut a = pred.clone();
                let mut b = pred.clone();
                a.data_mut()[i] += h;
                b.data_mut()[i] -= h;
                let fd = (oa_loss_frozen(&a, &gt, &lp, &stats).unwrap() - oa_loss_frozen(&b, &gt, &lp, &stats).unwrap()) / (2.0 * h);
                let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs());
                assert!(rel <= 1e-6, "p={p} i={i}: {fd} vs {}", g.data()[i]);
            }
        }
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let x = t(&[0.1, 0.2, 0.3, 0.4], 2, 2);
        let g = oa_loss_grad(&x, &x, &LossParams::new(1.0, 1).unwrap()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_alpha_gradient_approaches_l1() {
        let gt = t(&[0.0; 4], 2, 2);
        let pred = t(&[-1.0, 0.5, 2.0, 3.5], 2, 2);
        let g = oa_loss_grad(&pred, &gt, &LossParams::new(100.0, 1).unwrap()).unwrap();
        let l1 = lp_loss_grad(&pred, &gt, 1).unwrap();
        assert!(g.max_abs_diff(&l1).unwrap() < 1e-3);
    }

    #[test]
    fn analysis_table_shape() {
        let rows = loss_analysis_emit(&[0.1, 1.0, 100.0], 1, 20_000, 7).unwrap();
        let per = rows.len() / 4;
        for curve in rows.chunks(per) {
            assert_eq!(curve[0].x, 0.0);
            assert_eq!(curve[0].loss, 0.0);
            if curve[0].alpha.is_finite() {
                assert_eq!(curve[0].weight, 0.0);
            }
            assert_eq!(curve[per - 1].cumulative, 1.0);
            assert!(curve.windows(2).all(|w| w[1].cumulative >= w[0].cumulative));
        }
        let mut buf = Vec::new();
        write_analysis_csv(&rows[..2], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,alpha,weight,loss,density,cumulative\n0,0.1,0,0,0,"));
        assert!(loss_analysis_emit(&[-1.0], 1, 10, 0).is_err());
    }
}
