//! Procedural paired patches standing in for real training data.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, shape_err, Result};
use crate::io::bayer::mosaic_rggb;
use crate::network::Task;
use crate::tensor::{cast, Dims, Element, Tensor};

/// Stacked `(degraded, target)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub task: Task,
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
}

impl<T: Element> Dataset<T> {
    pub fn new(task: Task, inputs: Tensor<T>, targets: Tensor<T>) -> Result<Self> {
        if inputs.dims().n != targets.dims().n {
            return shape_err(format!("{} inputs but {} targets", inputs.dims().n, targets.dims().n));
        }
        Ok(Dataset { task, inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.dims().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pairs at `indices`, stacked in order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let items = indices.iter().map(|&i| t.batch_slice(i, 1)).collect::<Result<Vec<_>>>()?;
            Tensor::stack(&items)
        };
        Ok((pick(&self.inputs)?, pick(&self.targets)?))
    }
}

/// Standard deviation of the sensor noise added to synthetic mosaics.
pub const ISP_NOISE: f64 = 0.01;

/// Random smooth ramps, hard edges and oriented gratings, in `[0, 1]`.
pub fn synthetic_image<R: Rng + ?Sized>(patch: usize, rng: &mut R) -> Tensor<f64> {
    let p = patch as f64;
    let base: [[f64; 3]; 3] = std::array::from_fn(|_| [rng.gen_range(0.2..0.8), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]);
    let edges: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..2.0 * PI);
            let offset = rng.gen_range(0.2..0.8) * p;
            let color = std::array::from_fn(|_| rng.gen_range(-0.35..0.35));
            (theta.cos(), theta.sin(), offset, color)
        })
        .collect();
    let freq = 2.0 * PI / rng.gen_range(4.0..14.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    let (gx, gy) = (phi.cos() * freq, phi.sin() * freq);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let amp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.03..0.12));
    let cx = rng.gen_range(0.25..0.75) * p;
    let cy = rng.gen_range(0.25..0.75) * p;
    let radius = rng.gen_range(0.15..0.35) * p;
    let disk: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
    let mut img = Tensor::from_fn(Dims::new(1, 3, patch, patch), |_, c, y, x| {
        let (fx, fy) = (x as f64, y as f64);
        let [a, bx, by] = base[c];
        let mut v = a + bx * fx / p + by * fy / p;
        for &(nx, ny, off, col) in &edges {
            if nx * (fx - p / 2.0) + ny * (fy - p / 2.0) + p / 2.0 > off {
                v += col[c];
            }
        }
        if (fx - cx).powi(2) + (fy - cy).powi(2) < radius * radius {
            v += disk[c];
        }
        v + amp[c] * (gx * fx + gy * fy + phase).sin()
    });
    for v in img.data_mut() {
        *v = (*v + rng.gen_range(-0.01..0.01)).clamp(0.0, 1.0);
    }
    img
}

/// Mean over non-overlapping `s x s` blocks.
pub fn box_downsample<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    if s == 0 || !d.h.is_multiple_of(s) || !d.w.is_multiple_of(s) {
        return shape_err(format!("{}x{} not divisible by {s}", d.h, d.w));
    }
    let inv: T = cast(1.0 / (s * s) as f64);
    Ok(Tensor::from_fn(Dims::new(d.n, d.c, d.h / s, d.w / s), |n, c, y, xx| {
        let mut acc = T::zero();
        for dy in 0..s {
            for dx in 0..s {
                acc = acc + x.at(n, c, y * s + dy, xx * s + dx);
            }
        }
        acc * inv
    }))
}

/// Keys cubic kernel with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Four source taps and weights for each output coordinate, half-pixel aligned
/// with edge replication.
fn cubic_taps(len: usize, s: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..len * s)
        .map(|o| {
            let src = (o as f64 + 0.5) / s as f64 - 0.5;
            let base = src.floor();
            let t = src - base;
            let idx = std::array::from_fn(|k| (base as isize + k as isize - 1).clamp(0, len as isize - 1) as usize);
            let w = [cubic(t + 1.0), cubic(t), cubic(1.0 - t), cubic(2.0 - t)];
            (idx, w)
        })
        .collect()
}

/// Separable bicubic upsampling by an integer factor.
pub fn bicubic_upsample<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 {
        return config_err("upsampling factor must be positive");
    }
    let d = x.dims();
    let tx = cubic_taps(d.w, s);
    let ty = cubic_taps(d.h, s);
    let mut rows = vec![0.0f64; d.h * d.w * s];
    let mut out = Tensor::zeros(Dims::new(d.n, d.c, d.h * s, d.w * s));
    let ow = d.w * s;
    for n in 0..d.n {
        for c in 0..d.c {
            let src = x.plane(n, c);
            for y in 0..d.h {
                for (ox, (idx, w)) in tx.iter().enumerate() {
                    rows[y * ow + ox] = (0..4).map(|k| w[k] * src[y * d.w + idx[k]].to_f64().unwrap_or(f64::NAN)).sum();
                }
            }
            let dst = out.plane_mut(n, c);
            for (oy, (idx, w)) in ty.iter().enumerate() {
                for ox in 0..ow {
                    dst[oy * ow + ox] = cast((0..4).map(|k| w[k] * rows[idx[k] * ow + ox]).sum());
                }
            }
        }
    }
    Ok(out)
}

/// Paired patches for `task`; targets are `patch x patch` RGB.
pub fn make_synthetic_dataset<T: Element>(task: Task, count: usize, patch: usize, seed: u64) -> Result<Dataset<T>> {
    make_synthetic_dataset_with_noise(task, count, patch, seed, ISP_NOISE)
}

/// As [`make_synthetic_dataset`], with an explicit mosaic noise level.
pub fn make_synthetic_dataset_with_noise<T: Element>(
    task: Task,
    count: usize,
    patch: usize,
    seed: u64,
    isp_noise: f64,
) -> Result<Dataset<T>> {
    if count == 0 {
        return config_err("dataset must contain at least one pair");
    }
    if patch < 16 {
        return config_err(format!("patch must be at least 16, got {patch}"));
    }
    match task {
        Task::Sr { scale } if !patch.is_multiple_of(scale) => {
            return config_err(format!("patch {patch} not divisible by scale {scale}"));
        }
        Task::Isp if !patch.is_multiple_of(2) => return config_err("mosaic patches must have even size"),
        _ => {}
    }
    let noise = Normal::new(0.0, isp_noise.max(0.0)).map_err(|e| crate::Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for _ in 0..count {
        let target = synthetic_image(patch, &mut rng);
        let input = match task {
            Task::Sr { scale } => box_downsample(&target, scale)?,
            Task::Lle => {
                let gamma = rng.gen_range(1.5..2.5);
                let gain = rng.gen_range(0.15..0.4);
                target.map(|v| gain * v.powf(gamma))
            }
            Task::Isp => {
                let mut raw = mosaic_rggb(&target)?;
                if isp_noise > 0.0 {
                    for v in raw.data_mut() {
                        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                }
                raw
            }
        };
        inputs.push(input.convert::<T>());
        targets.push(target.convert::<T>());
    }
    Dataset::new(task, Tensor::stack(&inputs)?, Tensor::stack(&targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_shapes_and_determinism() {
        let sr = make_synthetic_dataset::<f32>(Task::Sr { scale: 2 }, 3, 32, 1).unwrap();
        assert_eq!(sr.inputs.dims(), Dims::new(3, 3, 16, 16));
        assert_eq!(sr.targets.dims(), Dims::new(3, 3, 32, 32));
        assert_eq!(sr, make_synthetic_dataset(Task::Sr { scale: 2 }, 3, 32, 1).unwrap());
        assert_ne!(sr, make_synthetic_dataset(Task::Sr { scale: 2 }, 3, 32, 2).unwrap());
        let lle = make_synthetic_dataset::<f64>(Task::Lle, 2, 16, 1).unwrap();
        assert_eq!(lle.inputs.dims(), lle.targets.dims());
        assert!(lle.inputs.mean() < lle.targets.mean());
        assert!(make_synthetic_dataset::<f64>(Task::Sr { scale: 3 }, 1, 16, 0).is_err());
        assert!(make_synthetic_dataset::<f64>(Task::Lle, 1, 8, 0).is_err());
    }

    #[test]
    fn noiseless_isp_input_is_exact_mosaic() {
        let ds = make_synthetic_dataset_with_noise::<f64>(Task::Isp, 2, 16, 4, 0.0).unwrap();
        assert_eq!(ds.inputs.dims(), Dims::new(2, 1, 16, 16));
        assert_eq!(ds.inputs, mosaic_rggb(&ds.targets).unwrap());
    }

    #[test]
    fn images_stay_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = synthetic_image(24, &mut rng);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bicubic_reproduces_constants_and_ramps() {
        let c = Tensor::<f64>::full(Dims::new(1, 1, 4, 5), 0.3);
        let up = bicubic_upsample(&c, 3).unwrap();
        assert_eq!(up.dims(), Dims::new(1, 1, 12, 15));
        assert!(up.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        // Interior points of a linear ramp are reproduced exactly.
        let ramp = Tensor::<f64>::from_fn(Dims::new(1, 1, 1, 8), |_, _, _, x| x as f64);
        let up = bicubic_upsample(&ramp, 2).unwrap();
        for ox in 4..12 {
            let src = (ox as f64 + 0.5) / 2.0 - 0.5;
            assert!((up.at(0, 0, 0, ox) - src).abs() < 1e-12);
        }
    }

    #[test]
    fn box_downsample_averages() {
        let x = Tensor::<f64>::from_vec(Dims::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(box_downsample(&x, 2).unwrap().data(), &[3.0]);
    }
}
