//! Layers, parameter initialization, and the SGD optimizer.
//!
//! Layers are thin wrappers that own parameter [`Tensor`]s and assemble graph
//! ops. Forward passes take an explicit `training` flag; the only layer that
//! behaves differently between modes is [`BatchNorm2d`], which also updates
//! its running statistics as a side effect of training-mode forwards.

use crate::tensor::{self, Tensor};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::HashMap;

/// He-normal initialization: N(0, sqrt(2 / fan)).
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan: usize) -> ArrayD<f64> {
    let std = (2.0 / fan as f64).sqrt();
    gaussian(rng, shape, std)
}

/// Orthogonal initialization with ReLU gain: rows (one per output unit,
/// `fan` entries each) are orthonormalized and scaled to norm sqrt(2).
/// Plain He draws give every channel an independent random scale, and over
/// several layers the spread compounds until a couple of channels dominate
/// pooled features; equal-norm orthogonal rows keep channels comparable.
/// Requires `shape[0] <= fan`.
pub fn he_orthogonal(rng: &mut ChaCha8Rng, shape: &[usize], fan: usize) -> ArrayD<f64> {
    let out: usize = shape[0];
    let per_row: usize = shape.iter().skip(1).product();
    assert_eq!(per_row, fan, "row length {per_row} != fan {fan}");
    assert!(out <= fan, "cannot orthogonalize {out} rows of length {fan}");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(out);
    while rows.len() < out {
        let g = gaussian(rng, &[fan], 1.0);
        let mut row: Vec<f64> = g.iter().copied().collect();
        for prev in &rows {
            let dot: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (r, p) in row.iter_mut().zip(prev) {
                *r -= dot * p;
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for r in &mut row {
            *r /= norm;
        }
        rows.push(row);
    }
    let gain = 2.0f64.sqrt();
    let data: Vec<f64> = rows.into_iter().flatten().map(|v| v * gain).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("init shape")
}

/// Zero-mean Gaussian with the given standard deviation (Box-Muller).
pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(std * r * theta.cos());
        if out.len() < n {
            out.push(std * r * theta.sin());
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), out).expect("init shape")
}

/// Uniform(-bound, bound).
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("init shape")
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights and biases.
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::param(uniform(rng, &[out_dim, in_dim], bound));
        let b = bias.then(|| Tensor::param(uniform(rng, &[out_dim], bound)));
        Linear { w, b, in_dim, out_dim }
    }

    /// Gaussian weights with a caller-chosen std and zero biases. Used for
    /// heads that must start near (but not exactly at) the origin.
    pub fn new_small(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, std: f64) -> Self {
        let w = Tensor::param(gaussian(rng, &[out_dim, in_dim], std));
        let b = Some(Tensor::param(ArrayD::zeros(IxDyn(&[out_dim]))));
        Linear { w, b, in_dim, out_dim }
    }

    /// `x [B, in] -> [B, out]`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = tensor::matmul(x, false, &self.w, true);
        match &self.b {
            Some(b) => tensor::add(&y, b),
            None => y,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub w: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Orthogonal ReLU-gain weights with fan = C*KH*KW, no bias (batch norm
    /// follows). Falls back to He-normal when out_ch exceeds the fan.
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan = in_ch * k * k;
        let init = if out_ch <= fan {
            he_orthogonal(rng, &[out_ch, in_ch, k, k], fan)
        } else {
            he_normal(rng, &[out_ch, in_ch, k, k], fan)
        };
        let w = Tensor::param(init);
        Conv2d { w, stride, pad }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        tensor::conv2d(x, &self.w, self.stride, self.pad)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.w.clone()));
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Array1<f64>>,
    pub running_var: RefCell<Array1<f64>>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::param(ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            beta: Tensor::param(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: RefCell::new(Array1::zeros(channels)),
            running_var: RefCell::new(Array1::ones(channels)),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running estimates (unbiased variance); eval mode uses the running
    /// estimates unchanged.
    pub fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        if training {
            let (y, batch_mean, batch_var) =
                tensor::batchnorm2d_train(x, &self.gamma, &self.beta, self.eps);
            let m = {
                let s = x.shape();
                (s[0] * s[2] * s[3]) as f64
            };
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            {
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                for c in 0..self.channels {
                    rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * batch_mean[c];
                    rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * batch_var[c] * unbias;
                }
            }
            y
        } else {
            tensor::batchnorm2d_eval(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean.borrow(),
                &self.running_var.borrow(),
                self.eps,
            )
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

// ---------------------------------------------------------------------------
// Two-layer MLP head
// ---------------------------------------------------------------------------

pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp {
            fc1: Linear::new(rng, in_dim, hidden, true),
            fc2: Linear::new(rng, hidden, out_dim, true),
        }
    }

    /// Same shape, but the output layer starts at a small Gaussian so initial
    /// logits are near-uniform without being exactly tied.
    pub fn new_small_output(
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        out_std: f64,
    ) -> Self {
        Mlp {
            fc1: Linear::new(rng, in_dim, hidden, true),
            fc2: Linear::new_small(rng, hidden, out_dim, out_std),
        }
    }

    /// MLP over a concatenated pair `[a, b]` (each half `half_dim` wide) that
    /// starts out computing a small Gaussian linear map of `a - b`. First-layer
    /// rows come in negated pairs `[g, -g]` / `[-g, g]` with zero bias, and the
    /// output columns for each pair are negated copies, so
    /// `relu(z) - relu(-z) = z` collapses the initial logits to
    /// `sum_p 2*w_p * (g_p . (a - b))`. Components shared by the two halves
    /// cancel, and because the effective readout rows are iid Gaussian no class
    /// is favored for any input. Training decouples the pairs from the first
    /// update. An odd trailing hidden unit gets a zeroed output column so the
    /// linearity still holds exactly.
    pub fn new_pair_difference(
        rng: &mut ChaCha8Rng,
        half_dim: usize,
        hidden: usize,
        out_dim: usize,
        out_std: f64,
    ) -> Self {
        let bound = 1.0 / ((2 * half_dim) as f64).sqrt();
        let mut w1 = ArrayD::zeros(IxDyn(&[hidden, 2 * half_dim]));
        let fill_row = |w1: &mut ArrayD<f64>, row: usize, g: &ArrayD<f64>, sign: f64| {
            for i in 0..half_dim {
                w1[[row, i]] = sign * g[[i]];
                w1[[row, half_dim + i]] = -sign * g[[i]];
            }
        };
        for p in 0..hidden / 2 {
            let g = uniform(rng, &[half_dim], bound);
            fill_row(&mut w1, 2 * p, &g, 1.0);
            fill_row(&mut w1, 2 * p + 1, &g, -1.0);
        }
        if hidden % 2 == 1 {
            let g = uniform(rng, &[half_dim], bound);
            fill_row(&mut w1, hidden - 1, &g, 1.0);
        }
        let mut w2 = gaussian(rng, &[out_dim, hidden], out_std);
        for c in 0..out_dim {
            for p in 0..hidden / 2 {
                w2[[c, 2 * p + 1]] = -w2[[c, 2 * p]];
            }
            if hidden % 2 == 1 {
                w2[[c, hidden - 1]] = 0.0;
            }
        }
        let fc1 = Linear {
            w: Tensor::param(w1),
            b: Some(Tensor::param(ArrayD::zeros(IxDyn(&[hidden])))),
            in_dim: 2 * half_dim,
            out_dim: hidden,
        };
        let fc2 = Linear {
            w: Tensor::param(w2),
            b: Some(Tensor::param(ArrayD::zeros(IxDyn(&[out_dim])))),
            in_dim: hidden,
            out_dim,
        };
        Mlp { fc1, fc2 }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = tensor::relu(&self.fc1.forward(x));
        self.fc2.forward(&h)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.params(&format!("{prefix}.fc1"), out);
        self.fc2.params(&format!("{prefix}.fc2"), out);
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }
}

// ---------------------------------------------------------------------------
// SGD with momentum and L2 weight decay
// ---------------------------------------------------------------------------

pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<u64, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: HashMap::new() }
    }

    /// One update over the given parameters. Parameters whose gradient slot
    /// is empty are left untouched (their momentum also stays frozen), so an
    /// inactive head neither moves nor decays.
    pub fn step(&mut self, params: &[Tensor]) {
        for p in params {
            let Some(grad) = p.grad() else { continue };
            let mut g = grad;
            if self.weight_decay != 0.0 {
                g = &g + &p.value().mapv(|w| self.weight_decay * w);
            }
            let v = self
                .velocity
                .entry(p.id())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            if self.momentum != 0.0 {
                *v = v.mapv(|x| self.momentum * x) + &g;
            } else {
                *v = g;
            }
            let new = &*p.value() - &v.mapv(|x| self.lr * x);
            p.set_value(new);
        }
    }

    pub fn zero_grad(&self, params: &[Tensor]) {
        for p in params {
            p.zero_grad();
        }
    }
}

/// Euclidean norm of all gradients taken together. Parameters without a
/// gradient contribute nothing.
pub fn global_grad_norm(params: &[Tensor]) -> f64 {
    let mut acc = 0.0;
    for p in params {
        if let Some(g) = p.grad() {
            acc += g.iter().map(|&x| x * x).sum::<f64>();
        }
    }
    acc.sqrt()
}

/// Scale every gradient so the global norm does not exceed `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_grad_norm(params: &[Tensor], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params {
            if let Some(g) = p.grad() {
                p.set_grad(g.mapv(|x| s * x));
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mean_all, square, sum_all};
    use crate::util;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, Array2};

    fn rng() -> ChaCha8Rng {
        util::stream(7, &[99])
    }

    #[test]
    fn linear_forward_matches_manual() {
        let mut r = rng();
        let lin = Linear::new(&mut r, 3, 2, true);
        let x = Tensor::constant(arr1(&[1.0, -2.0, 0.5]).insert_axis(ndarray::Axis(0)).into_dyn());
        let y = lin.forward(&x);
        let w = lin.w.to_array();
        let b = lin.b.as_ref().unwrap().to_array();
        for j in 0..2 {
            let expect = w[[j, 0]] * 1.0 + w[[j, 1]] * -2.0 + w[[j, 2]] * 0.5 + b[[j]];
            assert_abs_diff_eq!(y.value()[[0, j]], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn mlp_gradients_flow_to_all_params() {
        let mut r = rng();
        let mlp = Mlp::new(&mut r, 4, 8, 3);
        let x = Tensor::constant(uniform(&mut r, &[5, 4], 1.0));
        let loss = mean_all(&square(&mlp.forward(&x)));
        loss.backward();
        let mut ps = Vec::new();
        mlp.params("h", &mut ps);
        assert_eq!(ps.len(), 4);
        for (name, p) in &ps {
            assert!(p.grad().is_some(), "missing grad for {name}");
        }
    }

    #[test]
    fn batchnorm_running_stats_track_batches() {
        let bn = BatchNorm2d::new(2);
        let mut r = rng();
        let x = uniform(&mut r, &[4, 2, 3, 3], 2.0);
        let xt = Tensor::constant(x.clone());
        let _ = bn.forward(&xt, true);
        // manual per-channel stats
        let m = (4 * 3 * 3) as f64;
        for c in 0..2 {
            let mut vals = Vec::new();
            for b in 0..4 {
                for i in 0..3 {
                    for j in 0..3 {
                        vals.push(x[[b, c, i, j]]);
                    }
                }
            }
            let mu: f64 = vals.iter().sum::<f64>() / m;
            let var: f64 = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            let unbiased = var * m / (m - 1.0);
            let rm = bn.running_mean.borrow()[c];
            let rv = bn.running_var.borrow()[c];
            assert_abs_diff_eq!(rm, 0.9 * 0.0 + 0.1 * mu, epsilon = 1e-12);
            assert_abs_diff_eq!(rv, 0.9 * 1.0 + 0.1 * unbiased, epsilon = 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let bn = BatchNorm2d::new(1);
        *bn.running_mean.borrow_mut() = arr1(&[2.0]);
        *bn.running_var.borrow_mut() = arr1(&[4.0]);
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 4.0));
        let y = bn.forward(&x, false);
        // (4 - 2) / sqrt(4 + eps) with gamma=1 beta=0
        assert_abs_diff_eq!(y.item(), 2.0 / (4.0f64 + 1e-5).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn sgd_momentum_trajectory() {
        // Constant gradient 0.5, lr 0.1, momentum 0.9, no decay:
        // v1 = 0.5,  p1 = 1 - 0.05 = 0.95
        // v2 = 0.95, p2 = 0.95 - 0.095 = 0.855
        let p = Tensor::param(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        for expect in [0.95, 0.855] {
            p.set_grad(ArrayD::from_elem(IxDyn(&[1]), 0.5));
            opt.step(&[p.clone()]);
            assert_abs_diff_eq!(p.value()[[0]], expect, epsilon = 1e-12);
            p.zero_grad();
        }
    }

    #[test]
    fn sgd_weight_decay_pulls_toward_zero() {
        let p = Tensor::param(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = Sgd::new(0.1, 0.0, 0.01);
        p.set_grad(ArrayD::zeros(IxDyn(&[1])));
        opt.step(&[p.clone()]);
        assert_abs_diff_eq!(p.value()[[0]], 1.0 - 0.1 * 0.01, epsilon = 1e-14);
    }

    #[test]
    fn sgd_skips_params_without_grads() {
        let p = Tensor::param(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let mut opt = Sgd::new(0.1, 0.9, 0.5);
        opt.step(&[p.clone()]);
        assert_eq!(p.value()[[0]], 3.0);
    }

    #[test]
    fn grad_clip_scales_to_max_norm() {
        let p = Tensor::param(ArrayD::zeros(IxDyn(&[2])));
        p.set_grad(ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, 4.0]).unwrap());
        let before = clip_global_grad_norm(&[p.clone()], 1.0);
        assert_abs_diff_eq!(before, 5.0, epsilon = 1e-12);
        let g = p.grad().unwrap();
        assert_abs_diff_eq!(g[[0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(g[[1]], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_moments_sane() {
        let mut r = rng();
        let x = gaussian(&mut r, &[10_000], 0.5);
        let mean: f64 = x.iter().sum::<f64>() / 10_000.0;
        let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 0.5).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn linear_grad_check() {
        let mut r = rng();
        let lin = Linear::new(&mut r, 3, 2, true);
        let x0 = uniform(&mut r, &[4, 3], 1.0);
        let x = Tensor::param(x0.clone());
        let y = sum_all(&square(&lin.forward(&x)));
        y.backward();
        let analytic = x.grad().unwrap();
        // numeric wrt x
        let f = |xa: &ArrayD<f64>| -> f64 {
            let xt = Tensor::constant(xa.clone());
            sum_all(&square(&lin.forward(&xt))).item()
        };
        let mut numeric = Array2::zeros((4, 3)).into_dyn();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            minus.as_slice_mut().unwrap()[i] -= h;
            numeric.as_slice_mut().unwrap()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        let rel = (&analytic - &numeric).mapv(f64::abs).sum()
            / (analytic.mapv(f64::abs).sum() + 1e-12);
        assert!(rel < 1e-6, "rel err {rel}");
    }
}
