//! Minimal layers with explicit forward/backward passes.
//!
//! Every layer works on a single sample. Batches are handled by running
//! samples independently (possibly in parallel) and summing gradient
//! accumulators in a fixed order. A gradient accumulator has the same type as
//! the module it belongs to, created with [`zeros_like`].

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Tensor};

/// Named access to every parameter tensor of a module, in a stable order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

macro_rules! tuple_params {
    ($($name:ident $idx:tt),+) => {
        impl<$($name: Params),+> Params for ($($name,)+) {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
                $(self.$idx.visit(&join(prefix, stringify!($idx)), f);)+
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
                $(self.$idx.visit_mut(&join(prefix, stringify!($idx)), f);)+
            }
        }
    };
}

tuple_params!(A 0);
tuple_params!(A 0, B 1);
tuple_params!(A 0, B 1, C 2);
tuple_params!(A 0, B 1, C 2, D 3);

/// Borrowed modules visited in sequence, e.g. the trainable subset of a model.
pub struct ParamsRef<'m>(pub Vec<&'m dyn Params>);

impl Params for ParamsRef<'_> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (i, m) in self.0.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor)) {
        panic!("ParamsRef is read-only");
    }
}

pub struct ParamsMut<'m>(pub Vec<&'m mut dyn Params>);

impl Params for ParamsMut<'_> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (i, m) in self.0.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, m) in self.0.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

pub fn zeros_like<T: Params + Clone>(module: &T) -> T {
    let mut g = module.clone();
    g.visit_mut("", &mut |_, t| t.fill(0.0));
    g
}

/// `acc += other`, tensor by tensor.
pub fn accumulate<T: Params>(acc: &mut T, other: &T) {
    let mut src = Vec::new();
    other.visit("", &mut |_, t| src.push(t));
    let mut i = 0;
    acc.visit_mut("", &mut |_, t| {
        t.add_assign(src[i]);
        i += 1;
    });
}

pub fn scale_params<T: Params>(module: &mut T, k: f64) {
    module.visit_mut("", &mut |_, t| t.scale(k));
}

pub fn param_count<T: Params>(module: &T) -> usize {
    let mut n = 0;
    module.visit("", &mut |_, t| n += t.len());
    n
}

pub fn params_finite<T: Params>(module: &T) -> bool {
    let mut ok = true;
    module.visit("", &mut |_, t| ok &= t.is_finite());
    ok
}

/// Flatten all parameters into one vector (visit order).
pub fn flatten<T: Params>(module: &T) -> Vec<f64> {
    let mut out = Vec::new();
    module.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

/// Overwrite all parameters from a flat vector produced by [`flatten`].
pub fn unflatten<T: Params>(module: &mut T, flat: &[f64]) {
    let mut off = 0;
    module.visit_mut("", &mut |_, t| {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    });
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        Self {
            weight: he_normal(rng, &[output, input], input),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeroed(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n_in = self.input_dim();
        debug_assert_eq!(x.len(), n_in);
        let w = self.weight.data();
        self.bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let row = &w[o * n_in..(o + 1) * n_in];
                b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Returns dL/dx; accumulates parameter gradients into `grads` when given.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: Option<&mut Linear>) -> Vec<f64> {
        let n_in = self.input_dim();
        if let Some(g) = grads {
            let gw = g.weight.data_mut();
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for (r, xi) in row.iter_mut().zip(x) {
                    *r += d * xi;
                }
            }
            for (b, d) in g.bias.data_mut().iter_mut().zip(dy) {
                *b += d;
            }
        }
        let w = self.weight.data();
        let mut dx = vec![0.0; n_in];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            for (g, wi) in dx.iter_mut().zip(row) {
                *g += d * wi;
            }
        }
        dx
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Two fully connected layers with a ReLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Intermediate values of an [`Mlp2`] forward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl Mlp2 {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::new(rng, input, hidden),
            fc2: Linear::new(rng, hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_tape(x).0
    }

    pub fn forward_tape(&self, x: &[f64]) -> (Vec<f64>, MlpTape) {
        let mut hidden = self.fc1.forward(x);
        relu_inplace(&mut hidden);
        let out = self.fc2.forward(&hidden);
        (
            out,
            MlpTape {
                input: x.to_vec(),
                hidden,
            },
        )
    }

    pub fn backward(&self, tape: &MlpTape, dy: &[f64], grads: Option<&mut Mlp2>) -> Vec<f64> {
        let (g1, g2) = match grads {
            Some(g) => (Some(&mut g.fc1), Some(&mut g.fc2)),
            None => (None, None),
        };
        let mut dh = self.fc2.backward(&tape.hidden, dy, g2);
        relu_backward_inplace(&tape.hidden, &mut dh);
        self.fc1.backward(&tape.input, &dh, g1)
    }
}

impl Params for Mlp2 {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Square convolution, stride 1, "same" zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, output: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            weight: he_normal(rng, &[output, input, kernel, kernel], input * kernel * kernel),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (cin, cout, k) = (self.in_channels(), self.out_channels(), self.kernel());
        debug_assert_eq!(x.channels, cin);
        let (h, w) = (x.height, x.width);
        let mut out = FeatureMap::zeros(cout, h, w);
        let wt = self.weight.data();
        for oc in 0..cout {
            let op = out.plane_mut(oc);
            op.fill(self.bias.data()[oc]);
            for ic in 0..cin {
                let ip = x.plane(ic);
                let base = (oc * cin + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[base + ky * k + kx];
                        let Some(win) = Window::new(h, w, ky, kx, k) else {
                            continue;
                        };
                        for y in win.y0..win.y1 {
                            let sy = (y as isize + win.dy) as usize;
                            let orow = &mut op[y * w + win.x0..y * w + win.x1];
                            let irow = &ip[sy * w + win.sx0..sy * w + win.sx0 + win.x1 - win.x0];
                            for (o, i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &FeatureMap,
        dy: &FeatureMap,
        mut grads: Option<&mut Conv2d>,
        want_dx: bool,
    ) -> Option<FeatureMap> {
        let (cin, cout, k) = (self.in_channels(), self.out_channels(), self.kernel());
        let (h, w) = (x.height, x.width);
        let mut dx = want_dx.then(|| FeatureMap::zeros(cin, h, w));
        let wt = self.weight.data();
        for oc in 0..cout {
            let gp = dy.plane(oc);
            if let Some(g) = grads.as_deref_mut() {
                g.bias.data_mut()[oc] += gp.iter().sum::<f64>();
            }
            for ic in 0..cin {
                let ip = x.plane(ic);
                let base = (oc * cin + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let Some(win) = Window::new(h, w, ky, kx, k) else {
                            continue;
                        };
                        let span = win.x1 - win.x0;
                        if let Some(g) = grads.as_deref_mut() {
                            let mut acc = 0.0;
                            for y in win.y0..win.y1 {
                                let sy = (y as isize + win.dy) as usize;
                                let grow = &gp[y * w + win.x0..y * w + win.x1];
                                let irow = &ip[sy * w + win.sx0..sy * w + win.sx0 + span];
                                acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            g.weight.data_mut()[base + ky * k + kx] += acc;
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wv = wt[base + ky * k + kx];
                            let dp = dx.plane_mut(ic);
                            for y in win.y0..win.y1 {
                                let sy = (y as isize + win.dy) as usize;
                                let grow = &gp[y * w + win.x0..y * w + win.x1];
                                let drow = &mut dp[sy * w + win.sx0..sy * w + win.sx0 + span];
                                for (d, g) in drow.iter_mut().zip(grow) {
                                    *d += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Valid output range for one kernel tap under same padding.
struct Window {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    dy: isize,
    sx0: usize,
}

impl Window {
    fn new(h: usize, w: usize, ky: usize, kx: usize, k: usize) -> Option<Self> {
        let p = (k / 2) as isize;
        let dy = ky as isize - p;
        let dx = kx as isize - p;
        let y0 = (-dy).max(0) as usize;
        let y1 = (h as isize - dy).min(h as isize);
        let x0 = (-dx).max(0) as usize;
        let x1 = (w as isize - dx).min(w as isize);
        if y1 <= y0 as isize || x1 <= x0 as isize {
            return None;
        }
        Some(Self {
            y0,
            y1: y1 as usize,
            x0,
            x1: x1 as usize,
            dy,
            sx0: (x0 as isize + dx) as usize,
        })
    }
}

impl Params for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` where the (post-activation) output was not positive.
pub fn relu_backward_inplace(output: &[f64], grad: &mut [f64]) {
    for (g, o) in grad.iter_mut().zip(output) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Max pooling with a 2×2 window on axes of length ≥ 2 (1 otherwise).
pub fn max_pool2(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let kh = if x.height >= 2 { 2 } else { 1 };
    let kw = if x.width >= 2 { 2 } else { 1 };
    let (oh, ow) = (x.height / kh, x.width / kw);
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    let mut arg = vec![0usize; x.channels * oh * ow];
    for c in 0..x.channels {
        let ip = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let i = (oy * kh + ky) * x.width + ox * kw + kx;
                        if ip[i] > best {
                            best = ip[i];
                            best_i = i;
                        }
                    }
                }
                let o = c * oh * ow + oy * ow + ox;
                out.data[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(input: &FeatureMap, argmax: &[usize], dy: &FeatureMap) -> FeatureMap {
    let mut dx = FeatureMap::zeros(input.channels, input.height, input.width);
    let n_out = dy.plane_len();
    for c in 0..dy.channels {
        let gp = dy.plane(c);
        let dp = dx.plane_mut(c);
        for o in 0..n_out {
            dp[argmax[c * n_out + o]] += gp[o];
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let ip = x.plane(c);
        let op = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                op[y * w + xx] = ip[(y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &FeatureMap) -> FeatureMap {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = FeatureMap::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        let gp = dy.plane(c);
        let dp = dx.plane_mut(c);
        for y in 0..dy.height {
            for xx in 0..dy.width {
                dp[(y / 2) * w + xx / 2] += gp[y * dy.width + xx];
            }
        }
    }
    dx
}

pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let n = x.plane_len() as f64;
    (0..x.channels).map(|c| x.plane(c).iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(shape: &FeatureMap, dy: &[f64]) -> FeatureMap {
    let n = shape.plane_len();
    let mut dx = FeatureMap::zeros(shape.channels, shape.height, shape.width);
    for (c, g) in dy.iter().enumerate() {
        dx.plane_mut(c).fill(g / n as f64);
    }
    dx
}

/// Adam with bias correction. Moments are stored per parameter tensor in
/// visit order so the state can be checkpointed and resumed exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// First and second moment estimates, one vector per parameter tensor.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub fn set_moments(&mut self, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<()> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("optimizer moment lists disagree".into()));
        }
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One step on `module` using `grads`, which must visit tensors of the
    /// same shapes in the same order.
    pub fn update<M: Params + ?Sized, G: Params + ?Sized>(&mut self, module: &mut M, grads: &G) -> Result<()> {
        let mut gs = Vec::new();
        grads.visit("", &mut |_, t| gs.push(t));
        if self.first.is_empty() {
            self.first = gs.iter().map(|t| vec![0.0; t.len()]).collect();
            self.second = self.first.clone();
        }
        let mut sizes = Vec::with_capacity(gs.len());
        module.visit("", &mut |_, t| sizes.push(t.len()));
        let consistent = sizes.len() == gs.len()
            && self.first.len() == gs.len()
            && sizes
                .iter()
                .zip(&gs)
                .zip(&self.first)
                .all(|((n, g), m)| *n == g.len() && *n == m.len());
        if !consistent {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, gradients have {}, module has {} (or sizes differ)",
                self.first.len(),
                gs.len(),
                sizes.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut i = 0;
        let first = &mut self.first;
        let second = &mut self.second;
        module.visit_mut("", &mut |_, p| {
            let g = gs[i].data();
            let (m, v) = (&mut first[i], &mut second[i]);
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}

/// Uniform draw for randomized test inputs.
#[cfg(test)]
pub(crate) fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    use rand::Rng;
    lo + (hi - lo) * rng.gen::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let data = (0..c * h * w).map(|_| uniform(rng, -1.0, 1.0)).collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    /// Direct definition of a same-padded convolution.
    fn conv_reference(conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (cin, cout, k) = (conv.in_channels(), conv.out_channels(), conv.kernel());
        let p = (k / 2) as isize;
        let mut out = FeatureMap::zeros(cout, x.height, x.width);
        for oc in 0..cout {
            for y in 0..x.height as isize {
                for xx in 0..x.width as isize {
                    let mut acc = conv.bias.data()[oc];
                    for ic in 0..cin {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let sy = y + ky - p;
                                let sx = xx + kx - p;
                                if sy < 0 || sx < 0 || sy >= x.height as isize || sx >= x.width as isize {
                                    continue;
                                }
                                let wi = ((oc * cin + ic) * k + ky as usize) * k + kx as usize;
                                acc += conv.weight.data()[wi] * x.plane(ic)[sy as usize * x.width + sx as usize];
                            }
                        }
                    }
                    out.plane_mut(oc)[y as usize * x.width + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, h, w) in &[(3, 5, 7), (1, 4, 4), (3, 1, 1), (5, 3, 6)] {
            let mut conv = Conv2d::new(&mut rng, 2, 3, k);
            conv.bias
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = uniform(&mut rng, -1.0, 1.0));
            let x = rand_map(&mut rng, 2, h, w);
            let a = conv.forward(&x);
            let b = conv_reference(&conv, &x);
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(&mut rng, 2, 3, 3);
        let x = rand_map(&mut rng, 2, 4, 5);
        let probe = rand_map(&mut rng, 3, 4, 5);
        let loss =
            |c: &Conv2d, x: &FeatureMap| -> f64 { c.forward(x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum() };
        let mut g = zeros_like(&conv);
        let dx = conv.backward(&x, &probe, Some(&mut g), true).unwrap();
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6);
        }
        let flat = flatten(&conv);
        let gflat = flatten(&g);
        for i in 0..flat.len() {
            let mut cp = conv.clone();
            let mut f = flat.clone();
            f[i] += h;
            unflatten(&mut cp, &f);
            let lp = loss(&cp, &x);
            f[i] -= 2.0 * h;
            unflatten(&mut cp, &f);
            let lm = loss(&cp, &x);
            assert!(((lp - lm) / (2.0 * h) - gflat[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_map(&mut rng, 2, 4, 6);
        let (p, arg) = max_pool2(&x);
        assert_eq!((p.height, p.width), (2, 3));
        let dx = max_pool2_backward(&x, &arg, &p);
        // every pooled max is routed back to exactly one input position
        let nonzero = dx.data.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, p.data.len());

        let u = upsample2(&p);
        assert_eq!((u.height, u.width), (4, 6));
        let back = upsample2_backward(&u);
        for (a, b) in back.data.iter().zip(&p.data) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }

        let thin = rand_map(&mut rng, 1, 1, 4);
        let (tp, _) = max_pool2(&thin);
        assert_eq!((tp.height, tp.width), (1, 2));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp2::new(&mut rng, 5, 7, 3);
        let x: Vec<f64> = (0..5).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let probe = [0.3, -1.2, 0.7];
        let loss = |m: &Mlp2, x: &[f64]| -> f64 { m.forward(x).iter().zip(&probe).map(|(a, b)| a * b).sum() };
        let (_, tape) = mlp.forward_tape(&x);
        let mut g = zeros_like(&mlp);
        let dx = mlp.backward(&tape, &probe, Some(&mut g));
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6);
        }
        let flat = flatten(&mlp);
        let gflat = flatten(&g);
        let mut m = mlp.clone();
        for i in 0..flat.len() {
            let mut f = flat.clone();
            f[i] += h;
            unflatten(&mut m, &f);
            let lp = loss(&m, &x);
            f[i] -= 2.0 * h;
            unflatten(&mut m, &f);
            let lm = loss(&m, &x);
            assert!(((lp - lm) / (2.0 * h) - gflat[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_leaves_zero_gradient_parameters_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lin = Linear::new(&mut rng, 3, 2);
        let before = lin.clone();
        let grads = zeros_like(&lin);
        let mut opt = Adam::new(1e-2);
        for _ in 0..5 {
            opt.update(&mut lin, &grads).unwrap();
        }
        assert_eq!(before, lin);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut lin = Linear::zeroed(1, 1);
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let mut g = zeros_like(&lin);
            // loss = (w - 3)^2 + (b + 1)^2
            g.weight.data_mut()[0] = 2.0 * (lin.weight.data()[0] - 3.0);
            g.bias.data_mut()[0] = 2.0 * (lin.bias.data()[0] + 1.0);
            opt.update(&mut lin, &g).unwrap();
        }
        assert!((lin.weight.data()[0] - 3.0).abs() < 1e-2);
        assert!((lin.bias.data()[0] + 1.0).abs() < 1e-2);
    }
}
