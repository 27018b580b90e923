//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every operation is evaluated eagerly and appended to the tape together with
//! whatever it needs for its backward pass. Node ids are assigned in creation
//! order, so a node's inputs always have smaller ids than the node itself and
//! a single reverse sweep visits each operation exactly once.

use crate::error::{shape_err, Result};
use crate::tensor::{
    add, add_channel_bias, cast, channel_scale, concat_channels, conv2d, conv2d_grad_input, conv2d_grad_params,
    global_avg_pool, mul, pixel_shuffle, pixel_unshuffle, prelu, sigmoid, sub, Conv2dParams, Dims, Element, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, padding: (usize, usize) },
    /// Batch statistics; `xhat` is the normalized input.
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    /// Fixed statistics, learnable affine.
    BatchNormFrozen { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddChannelBias { x: Var, b: Var },
    Concat(Vec<Var>),
    ChannelScale { x: Var, s: Var },
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Prelu { x: Var, slope: Var },
    PixelShuffle { x: Var, r: usize },
    PixelUnshuffle { x: Var, r: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Batch mean and biased variance observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel that produced the statistics.
    pub count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn channel_vec<T: Element>(t: &Tensor<T>, c: usize, what: &str) -> Result<Vec<T>> {
    let d = t.dims();
    if d.numel() != c || d.c != c {
        return shape_err(format!("{what} must be 1x{c}x1x1, got {d}"));
    }
    Ok(t.data().to_vec())
}

/// Sums `g` over batch and spatial axes into a `(1, c, 1, 1)` tensor.
fn channel_sum<T: Element>(g: &Tensor<T>) -> Tensor<T> {
    let d = g.dims();
    let mut out = Tensor::zeros(Dims::new(1, d.c, 1, 1));
    for n in 0..d.n {
        for c in 0..d.c {
            let s: T = g.plane(n, c).iter().copied().sum();
            out.data_mut()[c] = out.data()[c] + s;
        }
    }
    out
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Per-channel vector as a `(1, c, 1, 1)` leaf.
    pub fn channel_leaf(&mut self, values: &[T]) -> Var {
        let t = Tensor::from_vec(Dims::new(1, values.len(), 1, 1), values.to_vec())
            .expect("channel leaf needs at least one value");
        self.leaf(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: (usize, usize)) -> Result<Var> {
        let params = self.conv_params(w, b, padding)?;
        let y = conv2d(self.value(x), &params)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, padding }))
    }

    fn conv_params(&self, w: Var, b: Var, padding: (usize, usize)) -> Result<Conv2dParams<T>> {
        let weight = self.value(w).clone();
        let bias = channel_vec(self.value(b), weight.dims().n, "conv bias")?;
        Conv2dParams::new(weight, bias, padding)
    }

    /// Normalizes with the batch's own statistics (biased variance).
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        let d = xv.dims();
        let g = channel_vec(self.value(gamma), d.c, "batch norm gamma")?;
        let bt = channel_vec(self.value(beta), d.c, "batch norm beta")?;
        let count = d.n * d.plane();
        let m: T = cast(count as f64);
        let mut mean = vec![T::zero(); d.c];
        let mut var = vec![T::zero(); d.c];
        for c in 0..d.c {
            let s: T = (0..d.n).map(|n| xv.plane(n, c).iter().copied().sum::<T>()).sum();
            mean[c] = s / m;
            let ss: T = (0..d.n)
                .map(|n| xv.plane(n, c).iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>())
                .sum();
            var[c] = ss / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        let mut y = xv.clone();
        for n in 0..d.n {
            for c in 0..d.c {
                for (h, o) in xhat.plane_mut(n, c).iter_mut().zip(y.plane_mut(n, c).iter_mut()) {
                    *h = (*h - mean[c]) * inv_std[c];
                    *o = *h * g[c] + bt[c];
                }
            }
        }
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Normalizes with fixed statistics, as at inference.
    pub fn batchnorm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.dims();
        let g = channel_vec(self.value(gamma), d.c, "batch norm gamma")?;
        let bt = channel_vec(self.value(beta), d.c, "batch norm beta")?;
        if mean.len() != d.c || var.len() != d.c {
            return shape_err(format!("batch norm statistics must have {} channels", d.c));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut y = xv.clone();
        for n in 0..d.n {
            for c in 0..d.c {
                for o in y.plane_mut(n, c) {
                    *o = (*o - mean[c]) * inv_std[c] * g[c] + bt[c];
                }
            }
        }
        Ok(self.push(y, Op::BatchNormFrozen { x, gamma, beta, mean: mean.to_vec(), inv_std }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = sub(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).dims().c;
        let bias = channel_vec(self.value(b), c, "channel bias")?;
        let y = add_channel_bias(self.value(x), &bias)?;
        Ok(self.push(y, Op::AddChannelBias { x, b }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = concat_channels(&refs)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// `s` has shape `(n, c, 1, 1)` or `(1, c, 1, 1)`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let y = channel_scale(self.value(x), self.value(s))?;
        Ok(self.push(y, Op::ChannelScale { x, s }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = global_avg_pool(self.value(x));
        self.push(y, Op::GlobalAvgPool(x))
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let c = self.value(x).dims().c;
        let a = channel_vec(self.value(slope), c, "prelu slope")?;
        let y = prelu(self.value(x), &a)?;
        Ok(self.push(y, Op::Prelu { x, slope }))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = pixel_shuffle(self.value(x), r)?;
        Ok(self.push(y, Op::PixelShuffle { x, r }))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = pixel_unshuffle(self.value(x), r)?;
        Ok(self.push(y, Op::PixelUnshuffle { x, r }))
    }

    /// Propagates `seed = dL/d(root)` back to every node that influences `root`.
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if root.0 >= self.nodes.len() {
            return shape_err(format!("node {} is not on this tape", root.0));
        }
        if seed.dims() != self.value(root).dims() {
            return shape_err(format!("seed {} does not match root {}", seed.dims(), self.value(root).dims()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        let mut visited = 0;
        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            visited += 1;
            let contributions = self.node_backward(idx, &g)?;
            grads[idx] = Some(g);
            for (v, dv) in contributions {
                accumulate(&mut grads[v.0], dv)?;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn node_backward(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, padding } => {
                let params = self.conv_params(*w, *b, *padding)?;
                let xv = self.value(*x);
                let dx = conv2d_grad_input(g, &params, xv.dims())?;
                let (dw, db) = conv2d_grad_params(g, xv, &params)?;
                let db = Tensor::from_vec(Dims::new(1, db.len(), 1, 1), db)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let d = xhat.dims();
                let gm = self.value(*gamma).data();
                let m: T = cast((d.n * d.plane()) as f64);
                let mut dgamma = vec![T::zero(); d.c];
                let mut dbeta = vec![T::zero(); d.c];
                for n in 0..d.n {
                    for c in 0..d.c {
                        for (&gv, &hv) in g.plane(n, c).iter().zip(xhat.plane(n, c)) {
                            dgamma[c] = dgamma[c] + gv * hv;
                            dbeta[c] = dbeta[c] + gv;
                        }
                    }
                }
                // dx = inv/M * (M*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)), dxhat = g*gamma
                let mut dx = Tensor::zeros(d);
                for n in 0..d.n {
                    for c in 0..d.c {
                        let k = gm[c] * inv_std[c] / m;
                        let dst = dx.plane_mut(n, c);
                        for ((o, &gv), &hv) in dst.iter_mut().zip(g.plane(n, c)).zip(xhat.plane(n, c)) {
                            *o = k * (m * gv - dbeta[c] - hv * dgamma[c]);
                        }
                    }
                }
                vec![
                    (*x, dx),
                    (*gamma, Tensor::from_vec(Dims::new(1, d.c, 1, 1), dgamma)?),
                    (*beta, Tensor::from_vec(Dims::new(1, d.c, 1, 1), dbeta)?),
                ]
            }
            Op::BatchNormFrozen { x, gamma, beta, mean, inv_std } => {
                let xv = self.value(*x);
                let d = xv.dims();
                let gm = self.value(*gamma).data();
                let mut dx = Tensor::zeros(d);
                let mut dgamma = vec![T::zero(); d.c];
                let mut dbeta = vec![T::zero(); d.c];
                for n in 0..d.n {
                    for c in 0..d.c {
                        let k = gm[c] * inv_std[c];
                        for ((o, &gv), &xv) in dx.plane_mut(n, c).iter_mut().zip(g.plane(n, c)).zip(xv.plane(n, c)) {
                            *o = gv * k;
                            dgamma[c] = dgamma[c] + gv * (xv - mean[c]) * inv_std[c];
                            dbeta[c] = dbeta[c] + gv;
                        }
                    }
                }
                vec![
                    (*x, dx),
                    (*gamma, Tensor::from_vec(Dims::new(1, d.c, 1, 1), dgamma)?),
                    (*beta, Tensor::from_vec(Dims::new(1, d.c, 1, 1), dbeta)?),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Mul(a, b) => vec![(*a, mul(g, self.value(*b))?), (*b, mul(g, self.value(*a))?)],
            Op::AddChannelBias { x, b } => vec![(*x, g.clone()), (*b, channel_sum(g))],
            Op::Concat(parts) => {
                let d = g.dims();
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).dims().c;
                    let part = Tensor::from_fn(Dims::new(d.n, c, d.h, d.w), |n, ch, h, w| g.at(n, start + ch, h, w));
                    out.push((p, part));
                    start += c;
                }
                out
            }
            Op::ChannelScale { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let d = xv.dims();
                let dx = channel_scale(g, sv)?;
                let sd = sv.dims();
                let mut ds = Tensor::zeros(sd);
                for n in 0..d.n {
                    for c in 0..d.c {
                        let dot: T = g.plane(n, c).iter().zip(xv.plane(n, c)).map(|(&a, &b)| a * b).sum();
                        let sn = if sd.n == 1 { 0 } else { n };
                        let off = ds.offset(sn, c, 0, 0);
                        ds.data_mut()[off] = ds.data()[off] + dot;
                    }
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let dx = Tensor::from_vec(
                    y.dims(),
                    y.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (T::one() - s)).collect(),
                )?;
                vec![(*x, dx)]
            }
            Op::GlobalAvgPool(x) => {
                let d = self.value(*x).dims();
                let inv: T = cast(1.0 / d.plane() as f64);
                vec![(*x, Tensor::from_fn(d, |n, c, _, _| g.at(n, c, 0, 0) * inv))]
            }
            Op::Prelu { x, slope } => {
                let xv = self.value(*x);
                let a = self.value(*slope).data();
                let d = xv.dims();
                let mut dx = Tensor::zeros(d);
                let mut da = vec![T::zero(); d.c];
                for n in 0..d.n {
                    for c in 0..d.c {
                        for ((o, &gv), &v) in dx.plane_mut(n, c).iter_mut().zip(g.plane(n, c)).zip(xv.plane(n, c)) {
                            if v > T::zero() {
                                *o = gv;
                            } else {
                                *o = gv * a[c];
                                da[c] = da[c] + gv * v;
                            }
                        }
                    }
                }
                vec![(*x, dx), (*slope, Tensor::from_vec(Dims::new(1, d.c, 1, 1), da)?)]
            }
            Op::PixelShuffle { x, r } => vec![(*x, pixel_unshuffle(g, *r)?)],
            Op::PixelUnshuffle { x, r } => vec![(*x, pixel_shuffle(g, *r)?)],
        })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, dv: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => *acc = add(acc, &dv)?,
        None => *slot = Some(dv),
    }
    Ok(())
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Element> Gradients<T> {
    /// `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
