//! Stride-1, zero-padded 2-D convolution in three execution paths.
//!
//! * [`conv2d_naive`] evaluates every output element independently. It is the
//!   brute-force oracle the other paths are tested against.
//! * [`conv2d`] is the serial default. It accumulates whole rows at a time but
//!   visits `(c_in, kernel row, kernel col)` in the same order as the naive
//!   path, so both produce bit-identical results.
//! * [`conv2d_parallel`] lowers to im2col + matrix multiply and spreads
//!   `(sample, output channel)` pairs over the rayon pool.

use rand::Rng;
use rayon::prelude::*;

use super::{cast, Dims, Element, Tensor};
use crate::error::{config_err, shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<T> {
    /// Kernel of shape `(c_out, c_in, k_h, k_w)`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    /// Zero padding `(p_h, p_w)` applied to both sides of each axis.
    pub padding: (usize, usize),
}

impl<T: Element> Conv2dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>, padding: (usize, usize)) -> Result<Self> {
        let d = weight.dims();
        if d.h.is_multiple_of(2) || d.w.is_multiple_of(2) {
            return config_err(format!("kernel {}x{} must have odd sides", d.h, d.w));
        }
        if bias.len() != d.n {
            return shape_err(format!("bias length {} != c_out {}", bias.len(), d.n));
        }
        Ok(Conv2dParams { weight, bias, padding })
    }

    /// Convolution whose output keeps the input's spatial size.
    pub fn same(weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let d = weight.dims();
        Self::new(weight, bias, (d.h.saturating_sub(1) / 2, d.w.saturating_sub(1) / 2))
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        Self::same(Tensor::zeros(Dims::new(c_out, c_in, k, k)), vec![T::zero(); c_out])
    }

    /// Uniform init in `±bound/sqrt(fan_in)` for weights; biases in `±bias_bound`.
    pub fn random<R: Rng + ?Sized>(
        c_out: usize,
        c_in: usize,
        k: usize,
        bound: f64,
        bias_bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let s = bound / fan_in.sqrt();
        let weight = Tensor::random_uniform(Dims::new(c_out, c_in, k, k), -s, s, rng);
        let bias = (0..c_out)
            .map(|_| if bias_bound > 0.0 { cast(rng.gen_range(-bias_bound..bias_bound)) } else { T::zero() })
            .collect();
        Self::same(weight, bias)
    }

    /// 1x1 identity mixing with zero bias.
    pub fn identity(c: usize) -> Self {
        let weight = Tensor::from_fn(Dims::new(c, c, 1, 1), |o, i, _, _| if o == i { T::one() } else { T::zero() });
        Conv2dParams { weight, bias: vec![T::zero(); c], padding: (0, 0) }
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        let d = self.weight.dims();
        (d.h, d.w)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.len()
    }

    fn output_dims(&self, input: Dims) -> Result<Dims> {
        if input.c != self.c_in() {
            return shape_err(format!("conv expects {} input channels, got {}", self.c_in(), input.c));
        }
        let (kh, kw) = self.kernel();
        if kh % 2 == 0 || kw % 2 == 0 {
            return config_err(format!("kernel {kh}x{kw} must have odd sides"));
        }
        let (ph, pw) = self.padding;
        let oh = (input.h + 2 * ph).checked_sub(kh).map(|v| v + 1).unwrap_or(0);
        let ow = (input.w + 2 * pw).checked_sub(kw).map(|v| v + 1).unwrap_or(0);
        if oh == 0 || ow == 0 {
            return shape_err(format!("kernel {kh}x{kw} with padding {ph},{pw} too large for input {input}"));
        }
        Ok(Dims::new(input.n, self.c_out(), oh, ow))
    }
}

/// Range of output coordinates whose input tap `o + k - pad` lands in `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

/// Brute-force reference: one independent accumulation per output element.
pub fn conv2d_naive<T: Element>(input: &Tensor<T>, params: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let out_dims = params.output_dims(input.dims())?;
    let d = input.dims();
    let (kh, kw) = params.kernel();
    let (ph, pw) = (params.padding.0 as isize, params.padding.1 as isize);
    let mut out = Tensor::zeros(out_dims);
    for n in 0..d.n {
        for o in 0..out_dims.c {
            for oy in 0..out_dims.h {
                for ox in 0..out_dims.w {
                    let mut acc = T::zero();
                    for i in 0..d.c {
                        for ky in 0..kh {
                            let iy = oy as isize + ky as isize - ph;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox as isize + kx as isize - pw;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                acc = acc
                                    + params.weight.at(o, i, ky, kx)
                                        * input.at(n, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc + params.bias[o]);
                }
            }
        }
    }
    Ok(out)
}

/// Accumulates one output plane of one sample. Shared by the serial path.
fn conv_plane<T: Element>(
    input: &Tensor<T>,
    n: usize,
    o: usize,
    params: &Conv2dParams<T>,
    out_dims: Dims,
    out: &mut [T],
) {
    let d = input.dims();
    let (kh, kw) = params.kernel();
    let (ph, pw) = params.padding;
    let (oh, ow) = (out_dims.h, out_dims.w);
    for i in 0..d.c {
        let src = input.plane(n, i);
        for ky in 0..kh {
            let (y0, y1) = valid_range(ky, ph, d.h, oh);
            for kx in 0..kw {
                let wv = params.weight.at(o, i, ky, kx);
                let (x0, x1) = valid_range(kx, pw, d.w, ow);
                if x0 >= x1 {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = oy + ky - ph;
                    let srow = &src[iy * d.w + x0 + kx - pw..iy * d.w + x1 + kx - pw];
                    let drow = &mut out[oy * ow + x0..oy * ow + x1];
                    for (dv, &sv) in drow.iter_mut().zip(srow) {
                        *dv = *dv + wv * sv;
                    }
                }
            }
        }
    }
    for v in out.iter_mut() {
        *v = *v + params.bias[o];
    }
}

/// Serial convolution; bit-identical to [`conv2d_naive`].
pub fn conv2d<T: Element>(input: &Tensor<T>, params: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let out_dims = params.output_dims(input.dims())?;
    let mut out = Tensor::zeros(out_dims);
    for n in 0..out_dims.n {
        for o in 0..out_dims.c {
            conv_plane(input, n, o, params, out_dims, out.plane_mut(n, o));
        }
    }
    Ok(out)
}

/// Gradient of [`conv2d`] with respect to its input, given the upstream gradient `gy`.
pub fn conv2d_grad_input<T: Element>(gy: &Tensor<T>, params: &Conv2dParams<T>, input_dims: Dims) -> Result<Tensor<T>> {
    let out_dims = params.output_dims(input_dims)?;
    if gy.dims() != out_dims {
        return shape_err(format!("upstream gradient {} does not match conv output {out_dims}", gy.dims()));
    }
    let (kh, kw) = params.kernel();
    let (ph, pw) = params.padding;
    let d = input_dims;
    let (oh, ow) = (out_dims.h, out_dims.w);
    let mut dx = Tensor::zeros(d);
    for n in 0..d.n {
        for i in 0..d.c {
            let dst = dx.plane_mut(n, i);
            for o in 0..out_dims.c {
                let g = gy.plane(n, o);
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky, ph, d.h, oh);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(kx, pw, d.w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = params.weight.at(o, i, ky, kx);
                        for oy in y0..y1 {
                            let iy = oy + ky - ph;
                            let drow = &mut dst[iy * d.w + x0 + kx - pw..iy * d.w + x1 + kx - pw];
                            for (dv, &gv) in drow.iter_mut().zip(&g[oy * ow + x0..oy * ow + x1]) {
                                *dv = *dv + wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Gradients of [`conv2d`] with respect to weight and bias.
pub fn conv2d_grad_params<T: Element>(
    gy: &Tensor<T>,
    input: &Tensor<T>,
    params: &Conv2dParams<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let out_dims = params.output_dims(input.dims())?;
    if gy.dims() != out_dims {
        return shape_err(format!("upstream gradient {} does not match conv output {out_dims}", gy.dims()));
    }
    let (kh, kw) = params.kernel();
    let (ph, pw) = params.padding;
    let d = input.dims();
    let (oh, ow) = (out_dims.h, out_dims.w);
    let mut dw = Tensor::zeros(params.weight.dims());
    let mut db = vec![T::zero(); out_dims.c];
    for o in 0..out_dims.c {
        for n in 0..d.n {
            let g = gy.plane(n, o);
            db[o] = db[o] + g.iter().copied().sum::<T>();
            for i in 0..d.c {
                let src = input.plane(n, i);
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky, ph, d.h, oh);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(kx, pw, d.w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy + ky - ph;
                            let srow = &src[iy * d.w + x0 + kx - pw..iy * d.w + x1 + kx - pw];
                            for (&gv, &sv) in g[oy * ow + x0..oy * ow + x1].iter().zip(srow) {
                                acc = acc + gv * sv;
                            }
                        }
                        let off = dw.offset(o, i, ky, kx);
                        dw.data_mut()[off] = dw.data()[off] + acc;
                    }
                }
            }
        }
    }
    Ok((dw, db))
}

/// Column matrix of shape `(c_in*kh*kw, oh*ow)` for one sample, zero at padding taps.
fn im2col<T: Element>(input: &Tensor<T>, n: usize, kh: usize, kw: usize, pad: (usize, usize), out_dims: Dims) -> Vec<T> {
    let d = input.dims();
    let (oh, ow) = (out_dims.h, out_dims.w);
    let cols = oh * ow;
    let mut col = vec![T::zero(); d.c * kh * kw * cols];
    for i in 0..d.c {
        let src = input.plane(n, i);
        for ky in 0..kh {
            let (y0, y1) = valid_range(ky, pad.0, d.h, oh);
            for kx in 0..kw {
                let (x0, x1) = valid_range(kx, pad.1, d.w, ow);
                let row = (i * kh + ky) * kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in y0..y1 {
                    let iy = oy + ky - pad.0;
                    for ox in x0..x1 {
                        dst[oy * ow + ox] = src[iy * d.w + ox + kx - pad.1];
                    }
                }
            }
        }
    }
    col
}

/// im2col + matrix multiply, parallel over `(sample, output channel)`.
pub fn conv2d_parallel<T: Element>(input: &Tensor<T>, params: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let out_dims = params.output_dims(input.dims())?;
    let (kh, kw) = params.kernel();
    let rows = params.c_in() * kh * kw;
    let cols = out_dims.plane();
    let columns: Vec<Vec<T>> = (0..out_dims.n)
        .into_par_iter()
        .map(|n| im2col(input, n, kh, kw, params.padding, out_dims))
        .collect();
    let weight = params.weight.data();
    let mut out = Tensor::zeros(out_dims);
    out.data_mut().par_chunks_mut(cols).enumerate().for_each(|(idx, dst)| {
        let (n, o) = (idx / out_dims.c, idx % out_dims.c);
        let col = &columns[n];
        let wrow = &weight[o * rows..(o + 1) * rows];
        for (r, &wv) in wrow.iter().enumerate() {
            let src = &col[r * cols..(r + 1) * cols];
            for (dv, &sv) in dst.iter_mut().zip(src) {
                *dv = *dv + wv * sv;
            }
        }
        let b = params.bias[o];
        for v in dst.iter_mut() {
            *v = *v + b;
        }
    });
    Ok(out)
}

/// Inference-time batch normalization parameters for `c` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Element> BatchNormParams<T> {
    pub fn new(gamma: Vec<T>, beta: Vec<T>, running_mean: Vec<T>, running_var: Vec<T>, eps: T) -> Result<Self> {
        let c = gamma.len();
        if beta.len() != c || running_mean.len() != c || running_var.len() != c {
            return shape_err("batch norm vectors must share one length");
        }
        if running_var.iter().any(|&v| v < T::zero()) {
            return config_err("running variance must be non-negative");
        }
        if eps < T::zero() {
            return config_err("epsilon must be non-negative");
        }
        Ok(BatchNormParams { gamma, beta, running_mean, running_var, eps })
    }

    /// gamma=1, beta=0, mean=0, var=1.
    pub fn identity(c: usize, eps: T) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            eps,
        }
    }

    /// Random affine and running statistics, with variance bounded away from zero.
    pub fn random<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let mut draw = |lo: f64, hi: f64| -> Vec<T> { (0..c).map(|_| cast(rng.gen_range(lo..hi))).collect() };
        let gamma = draw(0.5, 1.5);
        let beta = draw(-0.5, 0.5);
        let running_mean = draw(-0.5, 0.5);
        let running_var = draw(0.25, 2.0);
        BatchNormParams { gamma, beta, running_mean, running_var, eps: cast(1e-5) }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` with `y = scale*x + shift`.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let inv_std = T::one() / (self.running_var[c] + self.eps).sqrt();
            scale.push(self.gamma[c] * inv_std);
            shift.push(self.gamma[c] * (-self.running_mean[c] * inv_std) + self.beta[c]);
        }
        (scale, shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(weight: Vec<f64>, k: usize, bias: f64) -> Conv2dParams<f64> {
        Conv2dParams::same(Tensor::from_vec(Dims::new(1, 1, k, k), weight).unwrap(), vec![bias]).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::from_vec(Dims::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let p = params(vec![0., 0., 0., 0., 1., 0., 0., 0., 0.], 3, 0.0);
        assert_eq!(conv2d(&x, &p).unwrap(), x);
        assert_eq!(conv2d_naive(&x, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_sliding_window() {
        let x = Tensor::<f64>::ones(Dims::new(1, 1, 3, 3));
        let p = params(vec![1.0; 9], 3, 0.0);
        // Hand-counted number of in-bounds taps per output position.
        let expected = vec![4., 6., 4., 6., 9., 6., 4., 6., 4.];
        assert_eq!(conv2d(&x, &p).unwrap().data(), &expected[..]);
        assert_eq!(conv2d_naive(&x, &p).unwrap().data(), &expected[..]);
    }

    #[test]
    fn zero_kernel_yields_bias_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::random_uniform(Dims::new(2, 3, 5, 4), -1.0, 1.0, &mut rng);
        let p = Conv2dParams::same(Tensor::zeros(Dims::new(2, 3, 3, 3)), vec![0.25, -1.5]).unwrap();
        let y = conv2d(&x, &p).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn errors_on_channel_mismatch_and_even_kernel() {
        let x = Tensor::<f32>::zeros(Dims::new(1, 2, 4, 4));
        let p = Conv2dParams::<f32>::zeros(1, 3, 3).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(crate::Error::Shape(_))));
        let even = Conv2dParams::new(Tensor::<f32>::zeros(Dims::new(1, 2, 2, 2)), vec![0.0], (0, 0));
        assert!(matches!(even, Err(crate::Error::Config(_))));
    }

    #[test]
    fn serial_matches_naive_bitwise_with_asymmetric_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::random_uniform(Dims::new(2, 3, 7, 6), -1.0, 1.0, &mut rng);
        let w = Tensor::random_uniform(Dims::new(4, 3, 5, 3), -1.0, 1.0, &mut rng);
        for pad in [(0, 0), (1, 0), (2, 1), (3, 2)] {
            let p = Conv2dParams::new(w.clone(), vec![0.1, -0.2, 0.3, 0.0], pad).unwrap();
            let a = conv2d(&x, &p).unwrap();
            let b = conv2d_naive(&x, &p).unwrap();
            assert_eq!(a.dims(), b.dims());
            assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn parallel_agrees_with_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::random_uniform(Dims::new(3, 8, 16, 12), -1.0, 1.0, &mut rng);
        let p = Conv2dParams::<f32>::random(6, 8, 5, 1.0, 0.5, &mut rng).unwrap();
        let a = conv2d(&x, &p).unwrap();
        let b = conv2d_parallel(&x, &p).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-5 * u.abs().max(1.0));
        }
    }

    #[test]
    fn bn_rejects_negative_variance() {
        let bad = BatchNormParams::new(vec![1.0f32], vec![0.0], vec![0.0], vec![-1.0], 1e-5);
        assert!(bad.is_err());
    }
}
