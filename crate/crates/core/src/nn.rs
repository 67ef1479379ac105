//! Layers with hand-written forward and backward passes.
//!
//! Every `forward` is `&self` and returns whatever the matching `backward`
//! needs, so several samples can be in flight at once. `backward` accumulates
//! into the parameter gradients and returns the input gradient.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{col2im, im2col, Map, Scalar, Window};

pub const LEAKY_SLOPE: f64 = 0.2;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { value: vec![T::zero(); n], grad: vec![T::zero(); n], shape: shape.to_vec() }
    }

    /// Normal init with standard deviation `gain / sqrt(fan_in)`.
    pub fn fan_in_normal<R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            let e: f64 = StandardNormal.sample(rng);
            *v = T::from_f64_lossy(e * std);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything that owns parameters. Visiting order is fixed and doubles as the
/// optimizer's slot order.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn leaky_relu_inplace<T: Scalar>(data: &mut [T]) {
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    for v in data {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward through leaky ReLU given the activation's *output*.
pub fn leaky_relu_backward<T: Scalar>(output: &[T], grad: &mut [T]) {
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    for (g, &y) in grad.iter_mut().zip(output) {
        if y < T::zero() {
            *g *= slope;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::fan_in_normal(&[outputs, inputs], inputs, gain, rng),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.inputs, "linear input width");
        let mut y = self.bias.value.clone();
        T::gemm(self.outputs, self.inputs, 1, T::one(), &self.weight.value, false, x, false, T::one(), &mut y);
        y
    }

    pub fn backward(&mut self, x: &[T], dy: &[T]) -> Vec<T> {
        for (g, &d) in self.bias.grad.iter_mut().zip(dy) {
            *g += d;
        }
        T::gemm(self.outputs, 1, self.inputs, T::one(), dy, false, x, false, T::one(), &mut self.weight.grad);
        let mut dx = vec![T::zero(); self.inputs];
        T::gemm(self.inputs, self.outputs, 1, T::one(), &self.weight.value, true, dy, false, T::zero(), &mut dx);
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
    /// `out × (in·k·k)`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, window: Window, gain: f64, rng: &mut R) -> Self {
        let k = window.kernel;
        let fan_in = in_channels * k * k;
        Self {
            in_channels,
            out_channels,
            window,
            weight: Param::fan_in_normal(&[out_channels, in_channels, k, k], fan_in, gain, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    pub fn forward(&self, x: &Map<T>) -> (Map<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let oh = self.window.conv_out(x.height).expect("conv window larger than input");
        let ow = self.window.conv_out(x.width).expect("conv window larger than input");
        let n = oh * ow;
        let kk = self.in_channels * self.window.kernel * self.window.kernel;
        let mut cols = Vec::new();
        im2col(x, self.window, oh, ow, &mut cols);
        let mut out = Map::zeros(self.out_channels, oh, ow);
        for (c, &b) in self.bias.value.iter().enumerate() {
            out.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = b);
        }
        T::gemm(self.out_channels, kk, n, T::one(), &self.weight.value, false, &cols, false, T::one(), &mut out.data);
        (out, ConvCache { cols, in_shape: x.shape(), out_hw: (oh, ow) })
    }

    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Map<T>, need_input_grad: bool) -> Option<Map<T>> {
        let (oh, ow) = cache.out_hw;
        let n = oh * ow;
        let kk = self.in_channels * self.window.kernel * self.window.kernel;
        for (c, g) in self.bias.grad.iter_mut().enumerate() {
            *g += dy.data[c * n..(c + 1) * n].iter().copied().sum::<T>();
        }
        T::gemm(self.out_channels, n, kk, T::one(), &dy.data, false, &cache.cols, true, T::one(), &mut self.weight.grad);
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(kk, self.out_channels, n, T::one(), &self.weight.value, true, &dy.data, false, T::zero(), &mut dcols);
        let (c, h, w) = cache.in_shape;
        let mut dx = Map::zeros(c, h, w);
        col2im(&dcols, self.window, oh, ow, &mut dx);
        Some(dx)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution; the adjoint of [`Conv2d`] with the same window.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
    /// `in × (out·k·k)`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Debug)]
pub struct ConvTCache<T> {
    input: Map<T>,
    out_hw: (usize, usize),
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, window: Window, gain: f64, rng: &mut R) -> Self {
        let k = window.kernel;
        let fan_in = (in_channels * k * k / (window.stride * window.stride)).max(1);
        Self {
            in_channels,
            out_channels,
            window,
            weight: Param::fan_in_normal(&[in_channels, out_channels, k, k], fan_in, gain, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    pub fn forward(&self, x: &Map<T>) -> (Map<T>, ConvTCache<T>) {
        assert_eq!(x.channels, self.in_channels, "transposed conv input channels");
        let oh = self.window.transposed_out(x.height).expect("transposed conv geometry");
        let ow = self.window.transposed_out(x.width).expect("transposed conv geometry");
        let n = x.plane();
        let rows = self.out_channels * self.window.kernel * self.window.kernel;
        let mut cols = vec![T::zero(); rows * n];
        T::gemm(rows, self.in_channels, n, T::one(), &self.weight.value, true, &x.data, false, T::zero(), &mut cols);
        let mut out = Map::zeros(self.out_channels, oh, ow);
        col2im(&cols, self.window, x.height, x.width, &mut out);
        let plane = oh * ow;
        for (c, &b) in self.bias.value.iter().enumerate() {
            out.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        (out, ConvTCache { input: x.clone(), out_hw: (oh, ow) })
    }

    pub fn backward(&mut self, cache: &ConvTCache<T>, dy: &Map<T>, need_input_grad: bool) -> Option<Map<T>> {
        let (oh, ow) = cache.out_hw;
        let plane = oh * ow;
        for (c, g) in self.bias.grad.iter_mut().enumerate() {
            *g += dy.data[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
        }
        let x = &cache.input;
        let n = x.plane();
        let rows = self.out_channels * self.window.kernel * self.window.kernel;
        let mut dcols = Vec::new();
        im2col(dy, self.window, x.height, x.width, &mut dcols);
        T::gemm(self.in_channels, n, rows, T::one(), &x.data, false, &dcols, true, T::one(), &mut self.weight.grad);
        if !need_input_grad {
            return None;
        }
        let mut dx = Map::zeros(x.channels, x.height, x.width);
        T::gemm(self.in_channels, rows, n, T::one(), &self.weight.value, false, &dcols, false, T::zero(), &mut dx.data);
        Some(dx)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Down-sampling residual block: two 3×3 convolutions (the first strided)
/// plus a strided 1×1 projection on the skip path.
#[derive(Clone, Debug)]
pub struct ResDown<T> {
    pub conv_a: Conv2d<T>,
    pub conv_b: Conv2d<T>,
    pub skip: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct ResDownCache<T> {
    a: ConvCache<T>,
    act_a: Map<T>,
    b: ConvCache<T>,
    skip: ConvCache<T>,
    out: Map<T>,
}

impl<T: Scalar> ResDown<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv_a: Conv2d::new(cin, cout, Window::new(3, 2, 1), 2f64.sqrt(), rng),
            conv_b: Conv2d::new(cout, cout, Window::new(3, 1, 1), 0.5, rng),
            skip: Conv2d::new(cin, cout, Window::new(1, 2, 0), 1.0, rng),
        }
    }

    pub fn forward(&self, x: &Map<T>) -> (Map<T>, ResDownCache<T>) {
        let (mut act_a, a) = self.conv_a.forward(x);
        leaky_relu_inplace(&mut act_a.data);
        let (mut out, b) = self.conv_b.forward(&act_a);
        let (sk, skip) = self.skip.forward(x);
        for (o, s) in out.data.iter_mut().zip(&sk.data) {
            *o += *s;
        }
        leaky_relu_inplace(&mut out.data);
        (out.clone(), ResDownCache { a, act_a, b, skip, out })
    }

    pub fn backward(&mut self, cache: &ResDownCache<T>, dy: &Map<T>, need_input_grad: bool) -> Option<Map<T>> {
        let mut d = dy.clone();
        leaky_relu_backward(&cache.out.data, &mut d.data);
        let mut d_act = self.conv_b.backward(&cache.b, &d, true).expect("inner grad");
        leaky_relu_backward(&cache.act_a.data, &mut d_act.data);
        let dx_main = self.conv_a.backward(&cache.a, &d_act, need_input_grad);
        let dx_skip = self.skip.backward(&cache.skip, &d, need_input_grad);
        match (dx_main, dx_skip) {
            (Some(mut m), Some(s)) => {
                for (a, b) in m.data.iter_mut().zip(&s.data) {
                    *a += *b;
                }
                Some(m)
            }
            _ => None,
        }
    }
}

impl<T: Scalar> Module<T> for ResDown<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv_a.visit(&join(prefix, "conv_a"), f);
        self.conv_b.visit(&join(prefix, "conv_b"), f);
        self.skip.visit(&join(prefix, "skip"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv_a.visit_mut(&join(prefix, "conv_a"), f);
        self.conv_b.visit_mut(&join(prefix, "conv_b"), f);
        self.skip.visit_mut(&join(prefix, "skip"), f);
    }
}

/// Each pixel repeated over a 2×2 block.
pub fn upsample_nearest2<T: Scalar>(x: &Map<T>) -> Map<T> {
    let (c, h, w) = x.shape();
    let mut out = Map::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.data[(ch * 2 * h + y) * 2 * w + xx] = x.data[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2`]: sums each 2×2 block.
pub fn sum_pool2<T: Scalar>(d: &Map<T>) -> Map<T> {
    let (c, h2, w2) = d.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Map::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out.data[(ch * h + y / 2) * w + xx / 2] += d.data[(ch * h2 + y) * w2 + xx];
            }
        }
    }
    out
}

/// Up-sampling residual block: a 4×4 stride-2 transposed convolution and a
/// 3×3 convolution. The skip path is a 1×1 projection followed by nearest
/// ×2 up-sampling.
#[derive(Clone, Debug)]
pub struct ResUp<T> {
    pub up: ConvTranspose2d<T>,
    pub conv: Conv2d<T>,
    pub skip: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct ResUpCache<T> {
    up: ConvTCache<T>,
    act_up: Map<T>,
    conv: ConvCache<T>,
    skip: ConvCache<T>,
    out: Map<T>,
}

impl<T: Scalar> ResUp<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            up: ConvTranspose2d::new(cin, cout, Window::new(4, 2, 1), 2f64.sqrt(), rng),
            conv: Conv2d::new(cout, cout, Window::new(3, 1, 1), 0.5, rng),
            skip: Conv2d::new(cin, cout, Window::new(1, 1, 0), 1.0, rng),
        }
    }

    pub fn forward(&self, x: &Map<T>) -> (Map<T>, ResUpCache<T>) {
        let (mut act_up, up) = self.up.forward(x);
        leaky_relu_inplace(&mut act_up.data);
        let (mut out, conv) = self.conv.forward(&act_up);
        let (sk, skip) = self.skip.forward(x);
        for (o, s) in out.data.iter_mut().zip(&upsample_nearest2(&sk).data) {
            *o += *s;
        }
        leaky_relu_inplace(&mut out.data);
        (out.clone(), ResUpCache { up, act_up, conv, skip, out })
    }

    pub fn backward(&mut self, cache: &ResUpCache<T>, dy: &Map<T>) -> Map<T> {
        let mut d = dy.clone();
        leaky_relu_backward(&cache.out.data, &mut d.data);
        let mut d_act = self.conv.backward(&cache.conv, &d, true).expect("inner grad");
        leaky_relu_backward(&cache.act_up.data, &mut d_act.data);
        let mut dx = self.up.backward(&cache.up, &d_act, true).expect("inner grad");
        let ds = self.skip.backward(&cache.skip, &sum_pool2(&d), true).expect("inner grad");
        for (a, b) in dx.data.iter_mut().zip(&ds.data) {
            *a += *b;
        }
        dx
    }
}

impl<T: Scalar> Module<T> for ResUp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.up.visit(&join(prefix, "up"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.skip.visit(&join(prefix, "skip"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.skip.visit_mut(&join(prefix, "skip"), f);
    }
}

/// Adam with bias correction. Slot order follows [`Module::visit_mut`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `modules` (in order) and
    /// clears their gradients.
    pub fn step(&mut self, modules: &mut [&mut dyn Module<T>]) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.learning_rate);
        let eps = T::from_f64_lossy(self.eps);
        let mut slot = 0usize;
        let first = &mut self.first;
        let second = &mut self.second;
        for module in modules.iter_mut() {
            module.visit_mut("", &mut |_, p| {
                if first.len() <= slot {
                    first.push(vec![T::zero(); p.len()]);
                    second.push(vec![T::zero(); p.len()]);
                }
                let m = &mut first[slot];
                let v = &mut second[slot];
                for i in 0..p.value.len() {
                    let g = p.grad[i];
                    m[i] = b1 * m[i] + (one - b1) * g;
                    v[i] = b2 * v[i] + (one - b2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    p.value[i] -= lr * mh / (vh.sqrt() + eps);
                    p.grad[i] = T::zero();
                }
                slot += 1;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> Map<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Map::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Weighted-sum probe loss: L = Σ r_i y_i.
    fn probe(y: &Map<f64>, seed: u64) -> (f64, Map<f64>) {
        let r = rand_map(y.channels, y.height, y.width, seed);
        (crate::tensor::dot(&y.data, &r.data), r)
    }

    fn check<M, F, B>(module: &mut M, mut fwd: F, mut bwd: B, x: &Map<f64>)
    where
        M: Module<f64> + Clone,
        F: FnMut(&M, &Map<f64>) -> f64,
        B: FnMut(&mut M, &Map<f64>) -> Map<f64>,
    {
        module.zero_grad();
        let dx = bwd(module, x);
        let h = 1e-5;
        // input gradient
        for i in (0..x.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (fwd(module, &xp) - fwd(module, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{i}] {fd} vs {}", dx.data[i]);
        }
        // parameter gradients
        let mut grads = Vec::new();
        module.visit("", &mut |n, p| grads.push((n.to_string(), p.grad.clone())));
        for (pi, (name, g)) in grads.iter().enumerate() {
            for j in (0..g.len()).step_by(5) {
                let bump = |m: &mut M, delta: f64| {
                    let mut k = 0;
                    m.visit_mut("", &mut |_, p| {
                        if k == pi {
                            p.value[j] += delta;
                        }
                        k += 1;
                    });
                };
                let mut mp = module.clone();
                bump(&mut mp, h);
                let mut mm = module.clone();
                bump(&mut mm, -h);
                let fd = (fwd(&mp, x) - fwd(&mm, x)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{name}[{j}] {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for win in [Window::new(3, 1, 1), Window::new(3, 2, 1), Window::new(1, 2, 0)] {
            let mut conv = Conv2d::<f64>::new(2, 3, win, 1.0, &mut rng);
            let x = rand_map(2, 6, 6, 2);
            check(
                &mut conv,
                |m, x| probe(&m.forward(x).0, 9).0,
                |m, x| {
                    let (y, c) = m.forward(x);
                    let (_, r) = probe(&y, 9);
                    m.backward(&c, &r, true).unwrap()
                },
                &x,
            );
        }
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for win in [Window::new(4, 2, 1), Window::new(2, 2, 0)] {
            let mut conv = ConvTranspose2d::<f64>::new(3, 2, win, 1.0, &mut rng);
            let x = rand_map(3, 3, 3, 4);
            check(
                &mut conv,
                |m, x| probe(&m.forward(x).0, 5).0,
                |m, x| {
                    let (y, c) = m.forward(x);
                    let (_, r) = probe(&y, 5);
                    m.backward(&c, &r, true).unwrap()
                },
                &x,
            );
        }
    }

    #[test]
    fn residual_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut down = ResDown::<f64>::new(2, 3, &mut rng);
        let x = rand_map(2, 8, 8, 6);
        check(
            &mut down,
            |m, x| probe(&m.forward(x).0, 7).0,
            |m, x| {
                let (y, c) = m.forward(x);
                let (_, r) = probe(&y, 7);
                m.backward(&c, &r, true).unwrap()
            },
            &x,
        );
        let mut up = ResUp::<f64>::new(3, 2, &mut rng);
        let x = rand_map(3, 2, 2, 8);
        check(
            &mut up,
            |m, x| probe(&m.forward(x).0, 10).0,
            |m, x| {
                let (y, c) = m.forward(x);
                let (_, r) = probe(&y, 10);
                m.backward(&c, &r)
            },
            &x,
        );
    }

    #[test]
    fn linear_backward_matches_transpose_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut lin = Linear::<f64>::new(4, 3, 1.0, &mut rng);
        let x = vec![0.5, -1.0, 2.0, 0.25];
        let dy = vec![1.0, -2.0, 0.5];
        let dx = lin.backward(&x, &dy);
        for i in 0..4 {
            let want: f64 = (0..3).map(|o| lin.weight.value[o * 4 + i] * dy[o]).sum();
            assert!((dx[i] - want).abs() < 1e-12);
        }
        for o in 0..3 {
            for i in 0..4 {
                assert!((lin.weight.grad[o * 4 + i] - dy[o] * x[i]).abs() < 1e-12);
            }
        }
        assert_eq!(lin.bias.grad, dy);
    }

    #[test]
    fn adam_moves_against_gradient_and_clears_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::<f64>::new(2, 1, 1.0, &mut rng);
        let before = lin.weight.value.clone();
        lin.weight.grad = vec![1.0, -1.0];
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut lin]);
        assert!((lin.weight.value[0] - (before[0] - 0.01)).abs() < 1e-9);
        assert!((lin.weight.value[1] - (before[1] + 0.01)).abs() < 1e-9);
        assert!(lin.weight.grad.iter().all(|&g| g == 0.0));
        assert_eq!(opt.steps_taken(), 1);
    }
}
