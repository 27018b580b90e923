//! Image quality metrics and the challenge score.

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Returned for identical images instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, data_range: f64) -> Result<()> {
    if pred.dims() != gt.dims() {
        return shape_err(format!("prediction {} vs target {}", pred.dims(), gt.dims()));
    }
    if !(data_range > 0.0) {
        return config_err(format!("data range must be positive, got {data_range}"));
    }
    Ok(())
}

pub fn mse<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check(pred, gt, 1.0)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap_or(f64::NAN) - b.to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// `10 log10(range^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, data_range: f64) -> Result<f64> {
    check(pred, gt, data_range)?;
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(k, &gk)| gk * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, &gk)| gk * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM: 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`,
/// `K2 = 0.03`, valid windows only, averaged over channels and images.
pub fn ssim<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, data_range: f64) -> Result<f64> {
    check(pred, gt, data_range)?;
    let d = pred.dims();
    if d.h < SSIM_WINDOW || d.w < SSIM_WINDOW {
        return shape_err(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}", d.h, d.w));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let g = gaussian_window();
    let to64 = |s: &[T]| s.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect::<Vec<f64>>();
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..d.n {
        for c in 0..d.c {
            let x = to64(pred.plane(n, c));
            let y = to64(gt.plane(n, c));
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
            let [mx, my, exx, eyy, exy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, d.h, d.w, &g));
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = exx[i] - ux * ux;
                let vy = eyy[i] - uy * uy;
                let cov = exy[i] - ux * uy;
                total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Normalization constant and measured latency of the score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParams {
    pub c_norm: f64,
    pub latency_ms: f64,
}

impl ScoreParams {
    pub fn new(c_norm: f64, latency_ms: f64) -> Result<Self> {
        if !(c_norm > 0.0 && c_norm.is_finite()) || !(latency_ms > 0.0 && latency_ms.is_finite()) {
            return config_err(format!("score needs positive constants, got C={c_norm}, latency={latency_ms}"));
        }
        Ok(ScoreParams { c_norm, latency_ms })
    }
}

/// `2^(2 psnr) / (C * latency)`.
pub fn mai_score(psnr_db: f64, params: &ScoreParams) -> f64 {
    (2.0 * psnr_db).exp2() / (params.c_norm * params.latency_ms)
}
