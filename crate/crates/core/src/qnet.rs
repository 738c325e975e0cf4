//! Convolutional Q-network with hand-written backpropagation, the
//! double-DQN target rule and an Adam optimizer.
//!
//! Layout: a shape-preserving padded convolution, two unpadded
//! convolutions, then three dense layers. Every layer except the last is
//! followed by a ReLU. All arithmetic is `f64`.

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer widths. The kernel is square and shared by the three convolutions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub conv_filters: [usize; 3],
    pub kernel: usize,
    pub dense: [usize; 2],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            conv_filters: [32, 64, 64],
            kernel: 3,
            dense: [256, 128],
        }
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.to_string(),
            shape,
            data: vec![0.0; n],
        }
    }

    fn fill_uniform(&mut self, bound: f64, rng: &mut ChaCha8Rng) {
        let dist = Uniform::new_inclusive(-bound, bound);
        for v in &mut self.data {
            *v = dist.sample(rng);
        }
    }
}

/// 2-D convolution with square kernel, stride 1 and symmetric zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            pad,
            weight: Param::zeros(
                &format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
            ),
            bias: Param::zeros(&format!("{name}.bias"), vec![out_channels]),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = (h + 2 * self.pad).checked_sub(self.kernel)? + 1;
        let ow = (w + 2 * self.pad).checked_sub(self.kernel)? + 1;
        Some((oh, ow))
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds the input into a `[in*k*k, oh*ow]` matrix.
    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.out_size(h, w).expect("checked at construction");
        let k = self.kernel;
        let p = oh * ow;
        let mut cols = vec![0.0; self.fan_in() * p];
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * p;
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = (c * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[row + oy * ow + ox] = x[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.out_size(h, w).expect("checked at construction");
        let k = self.kernel;
        let p = oh * ow;
        let mut x = vec![0.0; self.in_channels * h * w];
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * p;
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = (c * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x[dst + ix as usize] += cols[row + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output `[out, oh, ow]` and the unfolded input for backward.
    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_channels * h * w);
        let (oh, ow) = self.out_size(h, w).expect("checked at construction");
        let p = oh * ow;
        let kk = self.fan_in();
        let cols = self.im2col(x, h, w);
        let mut out = vec![0.0; self.out_channels * p];
        for o in 0..self.out_channels {
            let dst = &mut out[o * p..(o + 1) * p];
            dst.fill(self.bias.data[o]);
            let wrow = &self.weight.data[o * kk..(o + 1) * kk];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let src = &cols[r * p..(r + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
        (out, cols)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        cols: &[f64],
        dout: &[f64],
        h: usize,
        w: usize,
        dweight: &mut [f64],
        dbias: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (oh, ow) = self.out_size(h, w).expect("checked at construction");
        let p = oh * ow;
        let kk = self.fan_in();
        let mut dcols = if need_input_grad {
            vec![0.0; kk * p]
        } else {
            Vec::new()
        };
        for o in 0..self.out_channels {
            let g = &dout[o * p..(o + 1) * p];
            dbias[o] += g.iter().sum::<f64>();
            let wrow = &self.weight.data[o * kk..(o + 1) * kk];
            let dwrow = &mut dweight[o * kk..(o + 1) * kk];
            for r in 0..kk {
                let src = &cols[r * p..(r + 1) * p];
                dwrow[r] += src.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                if need_input_grad {
                    let wv = wrow[r];
                    for (d, &gv) in dcols[r * p..(r + 1) * p].iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
            }
        }
        need_input_grad.then(|| self.col2im(&dcols, h, w))
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::zeros(&format!("{name}.weight"), vec![outputs, inputs]),
            bias: Param::zeros(&format!("{name}.bias"), vec![outputs]),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight.data[o * self.inputs..(o + 1) * self.inputs];
                self.bias.data[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        dweight: &mut [f64],
        dbias: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let mut dx = if need_input_grad {
            vec![0.0; self.inputs]
        } else {
            Vec::new()
        };
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            dbias[o] += g;
            let range = o * self.inputs..(o + 1) * self.inputs;
            for (d, &xv) in dweight[range.clone()].iter_mut().zip(x) {
                *d += g * xv;
            }
            if need_input_grad {
                for (d, &wv) in dx.iter_mut().zip(&self.weight.data[range]) {
                    *d += g * wv;
                }
            }
        }
        need_input_grad.then_some(dx)
    }
}

pub fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose activation was clipped.
pub fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Huber loss with threshold 1 and its derivative in `pred`.
pub fn huber(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    if d.abs() <= 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Intermediate values kept for backpropagation.
pub struct ForwardCache {
    cols: [Vec<f64>; 3],
    acts: [Vec<f64>; 3],
    flat: Vec<f64>,
    hidden: [Vec<f64>; 2],
}

/// The Q-network. Cloning yields an independent deep copy.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    pub config: NetConfig,
    /// `(channels, height, width)` of the observation.
    pub input: (usize, usize, usize),
    pub conv: [Conv2d; 3],
    pub fc: [Dense; 3],
    spatial: [(usize, usize); 4],
}

/// Gradients aligned with [`QNetwork::params`].
pub type Gradients = Vec<Vec<f64>>;

impl QNetwork {
    /// Zero-initialized network for an observation of shape `input` and
    /// `n_actions` outputs.
    pub fn zeros(config: &NetConfig, input: (usize, usize, usize), n_actions: usize) -> Result<Self> {
        let (c, h, w) = input;
        let k = config.kernel;
        if k == 0 || k % 2 == 0 {
            return Err(Error::Shape(format!("kernel size {k} must be odd")));
        }
        if c == 0 || n_actions == 0 || config.conv_filters.contains(&0) || config.dense.contains(&0) {
            return Err(Error::Shape("layer widths must be positive".into()));
        }
        let [f1, f2, f3] = config.conv_filters;
        let conv = [
            Conv2d::new("conv1", c, f1, k, k / 2),
            Conv2d::new("conv2", f1, f2, k, 0),
            Conv2d::new("conv3", f2, f3, k, 0),
        ];
        let mut spatial = [(h, w); 4];
        for i in 0..3 {
            let (sh, sw) = spatial[i];
            spatial[i + 1] = conv[i]
                .out_size(sh, sw)
                .filter(|&(a, b)| a > 0 && b > 0)
                .ok_or_else(|| Error::Shape(format!("input {h}x{w} is too small for the convolution stack")))?;
        }
        let (oh, ow) = spatial[3];
        let flat = f3 * oh * ow;
        let [d1, d2] = config.dense;
        let fc = [
            Dense::new("fc1", flat, d1),
            Dense::new("fc2", d1, d2),
            Dense::new("fc3", d2, n_actions),
        ];
        Ok(Self {
            config: config.clone(),
            input,
            conv,
            fc,
            spatial,
        })
    }

    /// Network with every weight and bias drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(config: &NetConfig, input: (usize, usize, usize), n_actions: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config, input, n_actions)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.conv {
            let bound = 1.0 / (layer.fan_in() as f64).sqrt();
            layer.weight.fill_uniform(bound, &mut rng);
            layer.bias.fill_uniform(bound, &mut rng);
        }
        for layer in &mut net.fc {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            layer.weight.fill_uniform(bound, &mut rng);
            layer.bias.fill_uniform(bound, &mut rng);
        }
        Ok(net)
    }

    pub fn n_actions(&self) -> usize {
        self.fc[2].outputs
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::with_capacity(12);
        for l in &self.conv {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        for l in &self.fc {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::with_capacity(12);
        for l in &mut self.conv {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        for l in &mut self.fc {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.params().iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::Shape(format!(
                "observation has {} values, network expects {:?}",
                x.len(),
                self.input
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).0)
    }

    /// Forward pass that keeps the intermediates needed by [`Self::backward`].
    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, ForwardCache) {
        let mut cur = x.to_vec();
        let mut cols: [Vec<f64>; 3] = Default::default();
        let mut acts: [Vec<f64>; 3] = Default::default();
        for i in 0..3 {
            let (h, w) = self.spatial[i];
            let (mut out, c) = self.conv[i].forward(&cur, h, w);
            relu(&mut out);
            cols[i] = c;
            acts[i] = out.clone();
            cur = out;
        }
        let flat = cur;
        let mut h1 = self.fc[0].forward(&flat);
        relu(&mut h1);
        let mut h2 = self.fc[1].forward(&h1);
        relu(&mut h2);
        let q = self.fc[2].forward(&h2);
        (
            q,
            ForwardCache {
                cols,
                acts,
                flat,
                hidden: [h1, h2],
            },
        )
    }

    /// Accumulates `dL/dparams` for an upstream gradient `dq` on the outputs.
    pub fn backward(&self, cache: &ForwardCache, dq: &[f64], grads: &mut Gradients) {
        let (g_conv, g_fc) = grads.split_at_mut(6);
        let [dw6, db6, dw7, db7, dw8, db8] = g_fc else {
            unreachable!("twelve parameter tensors")
        };
        let mut g = self.fc[2]
            .backward(&cache.hidden[1], dq, dw8, db8, true)
            .expect("input grad requested");
        relu_backward(&cache.hidden[1], &mut g);
        let mut g = self.fc[1]
            .backward(&cache.hidden[0], &g, dw7, db7, true)
            .expect("input grad requested");
        relu_backward(&cache.hidden[0], &mut g);
        let mut g = self.fc[0]
            .backward(&cache.flat, &g, dw6, db6, true)
            .expect("input grad requested");
        for i in (0..3).rev() {
            relu_backward(&cache.acts[i], &mut g);
            let (h, w) = self.spatial[i];
            let (a, b) = g_conv.split_at_mut(2 * i + 1);
            let next = self.conv[i].backward(
                &cache.cols[i],
                &g,
                h,
                w,
                &mut a[2 * i],
                &mut b[0],
                i > 0,
            );
            match next {
                Some(n) => g = n,
                None => break,
            }
        }
    }
}

/// Index of the largest `q` among mask-true entries, lowest index on ties.
/// `None` when the mask has no true entry.
pub fn masked_argmax(q: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in q.iter().zip(mask).enumerate() {
        if m && best.map_or(true, |b| v > q[b]) {
            best = Some(i);
        }
    }
    best
}

/// One replayed experience.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Arc<Vec<f64>>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Arc<Vec<f64>>,
    pub terminal: bool,
    pub next_mask: Arc<Vec<bool>>,
}

/// Double-DQN targets: the online network picks the next action, the target
/// network values it.
pub fn ddqn_targets(batch: &[&Transition], online: &QNetwork, target: &QNetwork, gamma: f64) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            if t.terminal || gamma == 0.0 {
                return Ok(t.reward);
            }
            let q_online = online.forward(&t.next_state)?;
            let Some(a) = masked_argmax(&q_online, &t.next_mask) else {
                return Ok(t.reward);
            };
            let q_target = target.forward(&t.next_state)?;
            Ok(t.reward + gamma * q_target[a])
        })
        .collect()
}

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn new(net: &QNetwork, cfg: AdamConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: net.zero_gradients(),
            v: net.zero_gradients(),
        }
    }

    pub fn apply(&mut self, net: &mut QNetwork, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in net.params_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Mean Huber loss over the batch and its parameter gradients, flowing only
/// through the taken action's output.
pub fn loss_and_gradients(net: &QNetwork, batch: &[&Transition], targets: &[f64]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty training batch".into()));
    }
    let mut grads = net.zero_gradients();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut dq = vec![0.0; net.n_actions()];
    for (t, &y) in batch.iter().zip(targets) {
        net.check_input(&t.state)?;
        if t.action >= dq.len() {
            return Err(Error::Shape(format!("action {} out of range", t.action)));
        }
        let (q, cache) = net.forward_cached(&t.state);
        let (l, d) = huber(q[t.action], y);
        loss += l * scale;
        dq.fill(0.0);
        dq[t.action] = d * scale;
        net.backward(&cache, &dq, &mut grads);
    }
    Ok((loss, grads))
}

/// One optimizer step on the online network. On non-finite loss or
/// gradients the network and optimizer are left unchanged.
pub fn train_batch(
    online: &mut QNetwork,
    target: &QNetwork,
    opt: &mut Adam,
    batch: &[&Transition],
    gamma: f64,
) -> Result<f64> {
    let targets = ddqn_targets(batch, online, target, gamma)?;
    let (loss, grads) = loss_and_gradients(online, batch, &targets)?;
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    opt.apply(online, &grads);
    Ok(loss)
}

/// Independent copy of the online network.
pub fn sync_target(online: &QNetwork) -> QNetwork {
    online.clone()
}
