//! Random token masking for the reconstruction warm-up.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{cast, Dims, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    /// Side of a square token in pixels.
    pub token: usize,
    pub fraction: f64,
    pub fill: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(seed: u64) -> Self {
        MaskSpec { token: 3, fraction: 1.0 / 3.0, fill: 0.0, seed }
    }
}

/// Masks `round(fraction * h * w / token^2)` tokens of a non-overlapping
/// token grid per image, chosen uniformly without replacement. Partial tokens
/// at the right and bottom edges are never masked.
///
/// Returns the masked input and a `(n, 1, h, w)` mask with 1 at masked pixels.
pub fn warmup_mask<T: Element>(input: &Tensor<T>, spec: &MaskSpec) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = input.dims();
    if spec.token == 0 {
        return config_err("mask token size must be positive");
    }
    if !(0.0..=1.0).contains(&spec.fraction) {
        return config_err(format!("mask fraction must be in [0, 1], got {}", spec.fraction));
    }
    if d.h < spec.token || d.w < spec.token {
        return shape_err(format!("{}x{} image is smaller than one {}-pixel token", d.h, d.w, spec.token));
    }
    let (gh, gw) = (d.h / spec.token, d.w / spec.token);
    let tokens = gh * gw;
    let want = (spec.fraction * d.plane() as f64 / (spec.token * spec.token) as f64).round() as usize;
    let count = want.min(tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = Tensor::zeros(Dims::new(d.n, 1, d.h, d.w));
    let mut masked = input.clone();
    let fill: T = cast(spec.fill);
    for n in 0..d.n {
        for t in sample(&mut rng, tokens, count) {
            let (ty, tx) = (t / gw * spec.token, t % gw * spec.token);
            for y in ty..ty + spec.token {
                for x in tx..tx + spec.token {
                    mask.set(n, 0, y, x, T::one());
                    for c in 0..d.c {
                        masked.set(n, c, y, x, fill);
                    }
                }
            }
        }
    }
    Ok((masked, mask))
}
