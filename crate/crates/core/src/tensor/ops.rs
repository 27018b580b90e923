use super::{cast, BatchNormParams, Dims, Element, Tensor};
use crate::error::{shape_err, Result};

fn same_dims<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(format!("{what}: {} vs {}", a.dims(), b.dims()));
    }
    Ok(())
}

fn zip_with<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    same_dims(a, b, what)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.dims(), data)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "mul", |x, y| x * y)
}

/// `x[n,c,:,:] * s[n,c]`; `s` has dims `(n,c,1,1)` or `(1,c,1,1)` (shared over the batch).
pub fn channel_scale<T: Element>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, sd) = (x.dims(), s.dims());
    if sd.c != d.c || sd.h != 1 || sd.w != 1 || (sd.n != d.n && sd.n != 1) {
        return shape_err(format!("channel_scale: scale {sd} incompatible with {d}"));
    }
    let mut out = x.clone();
    for n in 0..d.n {
        for c in 0..d.c {
            let k = s.at(if sd.n == 1 { 0 } else { n }, c, 0, 0);
            out.plane_mut(n, c).iter_mut().for_each(|v| *v = *v * k);
        }
    }
    Ok(out)
}

/// Adds a per-channel bias broadcast over batch and space.
pub fn add_channel_bias<T: Element>(x: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let d = x.dims();
    if bias.len() != d.c {
        return shape_err(format!("bias length {} != channels {}", bias.len(), d.c));
    }
    let mut out = x.clone();
    for n in 0..d.n {
        for (c, &b) in bias.iter().enumerate() {
            out.plane_mut(n, c).iter_mut().for_each(|v| *v = *v + b);
        }
    }
    Ok(out)
}

/// Concatenates along the channel axis, preserving input order.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = match parts.first() {
        Some(t) => t.dims(),
        None => return shape_err("concat of an empty list"),
    };
    let mut c_total = 0;
    for t in parts {
        let d = t.dims();
        if (d.n, d.h, d.w) != (first.n, first.h, first.w) {
            return shape_err(format!("concat: {d} incompatible with {first}"));
        }
        c_total += d.c;
    }
    let dims = Dims { c: c_total, ..first };
    let mut data = Vec::with_capacity(dims.numel());
    for n in 0..first.n {
        for t in parts {
            let per = t.dims().c * first.plane();
            data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(dims, data)
}

pub fn prelu<T: Element>(x: &Tensor<T>, slope: &[T]) -> Result<Tensor<T>> {
    let d = x.dims();
    if slope.len() != d.c {
        return shape_err(format!("prelu slope length {} != channels {}", slope.len(), d.c));
    }
    let mut out = x.clone();
    for n in 0..d.n {
        for (c, &a) in slope.iter().enumerate() {
            out.plane_mut(n, c).iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = *v * a
                }
            });
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Element>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Mean over each `(n, c)` plane, returned as `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.dims();
    let inv = cast::<T>(1.0 / d.plane() as f64);
    Tensor::from_fn(Dims::new(d.n, d.c, 1, 1), |n, c, _, _| x.plane(n, c).iter().copied().sum::<T>() * inv)
}

/// `y = (x - E) / sqrt(VAR + eps) * gamma + beta`, per channel, using running statistics.
pub fn batchnorm_infer<T: Element>(x: &Tensor<T>, params: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let d = x.dims();
    if params.channels() != d.c {
        return shape_err(format!("batch norm has {} channels, input has {}", params.channels(), d.c));
    }
    let mut out = x.clone();
    for c in 0..d.c {
        let std = (params.running_var[c] + params.eps).sqrt();
        let (m, g, b) = (params.running_mean[c], params.gamma[c], params.beta[c]);
        for n in 0..d.n {
            out.plane_mut(n, c).iter_mut().for_each(|v| *v = (*v - m) / std * g + b);
        }
    }
    Ok(out)
}

/// Depth-to-space: `out[c, h*r+i, w*r+j] = in[c*r*r + i*r + j, h, w]`.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    if r == 0 || !d.c.is_multiple_of(r * r) {
        return shape_err(format!("pixel_shuffle: {} channels not divisible by {}", d.c, r * r));
    }
    let out_dims = Dims::new(d.n, d.c / (r * r), d.h * r, d.w * r);
    let mut out = Tensor::zeros(out_dims);
    for n in 0..d.n {
        for c in 0..out_dims.c {
            for i in 0..r {
                for j in 0..r {
                    let src = x.plane(n, c * r * r + i * r + j);
                    for h in 0..d.h {
                        for w in 0..d.w {
                            out.set(n, c, h * r + i, w * r + j, src[h * d.w + w]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Space-to-depth; exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    if r == 0 || !d.h.is_multiple_of(r) || !d.w.is_multiple_of(r) {
        return shape_err(format!("pixel_unshuffle: spatial {}x{} not divisible by {r}", d.h, d.w));
    }
    let out_dims = Dims::new(d.n, d.c * r * r, d.h / r, d.w / r);
    let mut out = Tensor::zeros(out_dims);
    for n in 0..d.n {
        for c in 0..d.c {
            for i in 0..r {
                for j in 0..r {
                    let oc = c * r * r + i * r + j;
                    for h in 0..out_dims.h {
                        for w in 0..out_dims.w {
                            let v = x.at(n, c, h * r + i, w * r + j);
                            out.set(n, oc, h, w, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
