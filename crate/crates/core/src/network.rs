//! Small convolutional stacks with reverse-mode gradients and a
//! momentum gradient-descent trainer.
//!
//! A network is `conv → (bias, ReLU, conv)* → bias → conv`: every layer but
//! the last is followed by a per-channel bias, and every layer but the last
//! two by a rectifier as well. Filters are either
//! synthesized from basis coefficients (equivariant layers) or stored
//! densely (plain convolutions).

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array4, Array6, ArrayView4, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::bases::{BasisKind, BasisSet};
use crate::error::{invalid, Error, Result};
use crate::gconv::{build_layer_filters, project_filter_gradient, FilterBank, LayerKind};
use crate::grid::{GridSpec, RotationGroup};
use crate::parametrize::{init_coefficients_with, NormalizedBasis, DEFAULT_RANK_TOL};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
enum Weights {
    /// Coefficients synthesized through the shared basis.
    Basis(Vec<f64>),
    /// Dense filter values.
    Dense(Array6<f64>),
}

#[derive(Debug, Clone)]
pub struct Layer {
    kind: LayerKind,
    c_out: usize,
    c_in: usize,
    weights: Weights,
    /// Per output channel, shared across orientations. Empty for the last
    /// layer.
    bias: Vec<f64>,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.c_out, self.c_in)
    }

    pub fn weight_count(&self) -> usize {
        match &self.weights {
            Weights::Basis(w) => w.len(),
            Weights::Dense(v) => v.len(),
        }
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

/// Shape of a toy network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub p: usize,
    pub h: f64,
    pub t: usize,
    /// Channels of every hidden layer (each carries `t` orientations in the
    /// equivariant stack).
    pub channels: usize,
    /// Number of intermediate layers between input and output layers.
    pub hidden_layers: usize,
}

impl NetworkConfig {
    pub fn conv_layers(&self) -> usize {
        self.hidden_layers + 2
    }

    /// Spatial shrinkage of the full stack in valid mode.
    pub fn shrinkage(&self) -> usize {
        self.conv_layers() * (self.p - 1)
    }

    fn validate(&self) -> Result<()> {
        if self.p == 0 || self.t == 0 || self.channels == 0 {
            return Err(invalid("network sizes must be positive"));
        }
        if !(self.h > 0.0) {
            return Err(invalid("mesh size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkKind {
    /// Basis-parametrized group convolutions.
    Equivariant,
    /// Ordinary convolutions with `channels · t` hidden channels.
    Plain,
}

impl NetworkKind {
    pub fn name(&self) -> &'static str {
        match self {
            NetworkKind::Equivariant => "fconv",
            NetworkKind::Plain => "cnn",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyNetwork {
    config: NetworkConfig,
    kind: NetworkKind,
    basis: Option<NormalizedBasis>,
    layers: Vec<Layer>,
    version: u64,
}

/// Activations recorded by [`ToyNetwork::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Input of each layer (after the previous bias and rectifier).
    inputs: Vec<Array4<f64>>,
    /// Pre-bias convolution output of each hidden layer.
    pre: Vec<Array4<f64>>,
    banks: Vec<FilterBank>,
}

/// Gradients per layer in the parameter layout of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

fn layer_plan(config: &NetworkConfig, kind: NetworkKind) -> Vec<(LayerKind, usize, usize)> {
    let c = match kind {
        NetworkKind::Equivariant => config.channels,
        NetworkKind::Plain => config.channels * config.t,
    };
    let mid = match kind {
        NetworkKind::Equivariant => LayerKind::Intermediate,
        NetworkKind::Plain => LayerKind::Input,
    };
    let edge = |k| if kind == NetworkKind::Equivariant { k } else { LayerKind::Input };
    let mut plan = vec![(edge(LayerKind::Input), c, 1)];
    plan.extend(std::iter::repeat_n((mid, c, c), config.hidden_layers));
    plan.push((edge(LayerKind::Output), 1, c));
    plan
}

impl ToyNetwork {
    /// Equivariant stack built on the proposed basis, He-initialized.
    pub fn new_equivariant(config: NetworkConfig, seed: u64) -> Result<Self> {
        Self::with_basis(config, BasisKind::Proposed, seed)
    }

    pub fn with_basis(config: NetworkConfig, basis_kind: BasisKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let set = BasisSet::new(basis_kind, GridSpec::new(config.p, config.h)?);
        let basis = NormalizedBasis::build(&set, &RotationGroup::new(config.t)?, DEFAULT_RANK_TOL)?;
        let r = basis.rank();
        let t = config.t;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = layer_plan(&config, NetworkKind::Equivariant);
        let last = plan.len() - 1;
        let layers = plan
            .into_iter()
            .enumerate()
            .map(|(idx, (kind, c_out, c_in))| {
                let fan_in = if kind == LayerKind::Input { c_in } else { c_in * t };
                let mut w = Vec::new();
                for _ in 0..c_out * c_in * kind.vectors_per_pair(t) {
                    w.extend(init_coefficients_with(&mut rng, fan_in, r, t));
                }
                Layer { kind, c_out, c_in, weights: Weights::Basis(w), bias: vec![0.0; if idx == last { 0 } else { c_out }] }
            })
            .collect();
        Ok(Self { config, kind: NetworkKind::Equivariant, basis: Some(basis), layers, version: fresh_version() })
    }

    /// Plain convolution stack of the same depth with `channels · t` hidden
    /// channels, He-initialized.
    pub fn new_plain(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let p = config.p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = layer_plan(&config, NetworkKind::Plain);
        let last = plan.len() - 1;
        let layers = plan
            .into_iter()
            .enumerate()
            .map(|(idx, (kind, c_out, c_in))| {
                let normal = Normal::new(0.0, (2.0 / (c_in * p * p) as f64).sqrt()).unwrap();
                let v = Array6::from_shape_simple_fn((c_out, c_in, 1, 1, p, p), || normal.sample(&mut rng));
                Layer { kind, c_out, c_in, weights: Weights::Dense(v), bias: vec![0.0; if idx == last { 0 } else { c_out }] }
            })
            .collect();
        Ok(Self { config, kind: NetworkKind::Plain, basis: None, layers, version: fresh_version() })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn kind(&self) -> NetworkKind {
        self.kind
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn basis(&self) -> Option<&NormalizedBasis> {
        self.basis.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_count() + l.bias.len()).sum()
    }

    /// Weights then biases, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            match &l.weights {
                Weights::Basis(w) => out.extend_from_slice(w),
                Weights::Dense(v) => out.extend(v.iter().copied()),
            }
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(invalid(format!("expected {} parameters, got {}", self.param_count(), params.len())));
        }
        let mut off = 0;
        for l in &mut self.layers {
            match &mut l.weights {
                Weights::Basis(w) => {
                    let n = w.len();
                    w.copy_from_slice(&params[off..off + n]);
                    off += n;
                }
                Weights::Dense(v) => {
                    for (d, s) in v.iter_mut().zip(&params[off..]) {
                        *d = *s;
                    }
                    off += v.len();
                }
            }
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        self.version = fresh_version();
        Ok(())
    }

    fn bank(&self, layer: &Layer) -> Result<FilterBank> {
        match &layer.weights {
            Weights::Basis(w) => build_layer_filters(self.basis.as_ref().unwrap(), w, layer.kind, layer.c_out, layer.c_in),
            Weights::Dense(v) => FilterBank::new(layer.kind, v.clone()),
        }
    }

    fn check_image(&self, x: &ArrayView4<'_, f64>) -> Result<()> {
        let (c, t, r, cols) = x.dim();
        if c != 1 || t != 1 {
            return Err(invalid(format!("network input must be a (1, 1, n, n) tensor, got ({c}, {t}, {r}, {cols})")));
        }
        let need = self.config.shrinkage() + 1;
        if r < need || cols < need {
            return Err(invalid(format!("image {r}x{cols} too small; need at least {need}x{need}")));
        }
        Ok(())
    }

    /// Runs the stack on a `(1, 1, n, n)` image.
    pub fn forward(&self, x: ArrayView4<'_, f64>) -> Result<(Array4<f64>, ForwardCache)> {
        self.check_image(&x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut banks = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        let n = self.layers.len();
        for (idx, layer) in self.layers.iter().enumerate() {
            let bank = self.bank(layer)?;
            let y = bank.forward(cur.view())?;
            inputs.push(cur);
            banks.push(bank);
            if idx == last {
                cur = y;
            } else {
                let mut a = y.clone();
                activate(&mut a, &layer.bias, rectified(idx, n));
                pre.push(y);
                cur = a;
            }
        }
        Ok((cur, ForwardCache { version: self.version, inputs, pre, banks }))
    }

    pub fn apply(&self, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Reverse pass for an upstream gradient `g` of the network output.
    pub fn backward(&self, cache: &ForwardCache, g: ArrayView4<'_, f64>) -> Result<Gradients> {
        if cache.version != self.version || cache.banks.len() != self.layers.len() {
            return Err(Error::Contract("forward cache does not belong to the current parameters".into()));
        }
        let n = self.layers.len();
        let mut weights = vec![Vec::new(); n];
        let mut biases = vec![Vec::new(); n];
        let mut grad = g.to_owned();
        for idx in (0..n).rev() {
            let layer = &self.layers[idx];
            if idx != n - 1 {
                // Through the bias and rectifier of this layer's output.
                let pre = &cache.pre[idx];
                let mut db = vec![0.0; layer.c_out];
                for (ch, b) in layer.bias.iter().enumerate() {
                    let mut gc = grad.index_axis_mut(Axis(0), ch);
                    let pc = pre.index_axis(Axis(0), ch);
                    let mut acc = 0.0;
                    for (gv, pv) in gc.iter_mut().zip(pc.iter()) {
                        if rectified(idx, n) && pv + b <= 0.0 {
                            *gv = 0.0;
                        }
                        acc += *gv;
                    }
                    db[ch] = acc;
                }
                biases[idx] = db;
            }
            let (dx, dk) = cache.banks[idx].backward(cache.inputs[idx].view(), grad.view())?;
            weights[idx] = match &layer.weights {
                Weights::Basis(_) => project_filter_gradient(self.basis.as_ref().unwrap(), &dk, layer.kind)?,
                Weights::Dense(_) => dk.iter().copied().collect(),
            };
            grad = dx;
        }
        Ok(Gradients { weights, biases })
    }

    /// Sets every hidden bias to minus the mean pre-activation of its
    /// channel over `images` (all orientations and pixels), layer by layer.
    /// This centers the rectifier inputs the way batch statistics would at
    /// initialization.
    pub fn center_biases(&mut self, images: &[Array4<f64>]) -> Result<()> {
        if images.is_empty() {
            return Err(invalid("centering needs at least one image"));
        }
        for img in images {
            self.check_image(&img.view())?;
        }
        let mut acts: Vec<Array4<f64>> = images.to_vec();
        let n = self.layers.len();
        for idx in 0..n - 1 {
            let bank = self.bank(&self.layers[idx])?;
            let pre: Vec<Array4<f64>> = acts.par_iter().map(|x| bank.forward(x.view())).collect::<Result<_>>()?;
            let layer = &mut self.layers[idx];
            let mut total = vec![0.0; layer.c_out];
            let mut count = 0;
            for y in &pre {
                for (ch, tot) in total.iter_mut().enumerate() {
                    *tot += y.index_axis(Axis(0), ch).sum();
                }
                count += y.len() / layer.c_out;
            }
            for (b, tot) in layer.bias.iter_mut().zip(&total) {
                *b = -tot / count as f64;
            }
            acts = pre
                .into_iter()
                .map(|mut y| {
                    activate(&mut y, &layer.bias, rectified(idx, n));
                    y
                })
                .collect();
        }
        self.version = fresh_version();
        Ok(())
    }

    /// Central crop of `x` matching the output size.
    pub fn crop_target(&self, x: ArrayView4<'_, f64>) -> Array4<f64> {
        let m = self.config.shrinkage() / 2;
        let (_, _, r, c) = x.dim();
        let k = self.config.shrinkage();
        x.slice(s![.., .., m..m + r - k, m..m + c - k]).to_owned()
    }

    /// Mean-squared reconstruction error of the central crop and its gradient.
    pub fn reconstruction_loss(&self, x: ArrayView4<'_, f64>) -> Result<(f64, Gradients)> {
        let (y, cache) = self.forward(x)?;
        let target = self.crop_target(x);
        let n = y.len() as f64;
        let diff = &y - &target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let g = diff.mapv(|d| 2.0 * d / n);
        Ok((loss, self.backward(&cache, g.view())?))
    }

    /// Serializes the configuration and every parameter.
    pub fn to_checkpoint(&self, seed: u64) -> String {
        let c = &self.config;
        let mut s = String::new();
        writeln!(s, "# fconv checkpoint {}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(
            s,
            "network={} p={} h={:e} t={} channels={} hidden={} seed={}",
            self.kind.name(),
            c.p,
            c.h,
            c.t,
            c.channels,
            c.hidden_layers,
            seed
        )
        .unwrap();
        for (idx, l) in self.layers.iter().enumerate() {
            let weights: Vec<f64> = match &l.weights {
                Weights::Basis(w) => w.clone(),
                Weights::Dense(v) => v.iter().copied().collect(),
            };
            writeln!(s, "layer {idx} {} {} {} {} {}", l.kind.name(), l.c_out, l.c_in, weights.len(), l.bias.len()).unwrap();
            writeln!(s, "{}", join(&weights)).unwrap();
            writeln!(s, "{}", join(&l.bias)).unwrap();
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format { what: "checkpoint", reason };
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let field = |name: &str| -> Result<&str> {
            header
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| bad(format!("missing {name}")))
        };
        let num = |name: &str| -> Result<usize> { field(name)?.parse().map_err(|_| bad(format!("bad {name}"))) };
        let config = NetworkConfig {
            p: num("p")?,
            h: field("h")?.parse().map_err(|_| bad("bad h".into()))?,
            t: num("t")?,
            channels: num("channels")?,
            hidden_layers: num("hidden")?,
        };
        let seed: u64 = field("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
        let mut net = match field("network")? {
            "fconv" => Self::new_equivariant(config, seed)?,
            "cnn" => Self::new_plain(config, seed)?,
            other => return Err(bad(format!("unknown network {other}"))),
        };
        let mut params = Vec::with_capacity(net.param_count());
        for idx in 0..net.layers.len() {
            let head = lines.next().ok_or_else(|| bad(format!("missing layer {idx}")))?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let layer = &net.layers[idx];
            let expect_w = layer.weight_count().to_string();
            let expect_b = layer.bias.len().to_string();
            if parts.len() != 7 || parts[0] != "layer" || parts[5] != expect_w || parts[6] != expect_b {
                return Err(bad(format!("layer {idx} header does not match the configuration")));
            }
            for expected in [layer.weight_count(), layer.bias.len()] {
                let vals = parse_row(lines.next().unwrap_or(""))?;
                if vals.len() != expected {
                    return Err(bad(format!("layer {idx}: expected {expected} values, got {}", vals.len())));
                }
                params.extend(vals);
            }
        }
        net.set_params(&params)?;
        Ok(net)
    }
}

fn rectified(idx: usize, layers: usize) -> bool {
    idx + 2 < layers
}

fn activate(y: &mut Array4<f64>, bias: &[f64], relu: bool) {
    for (ch, b) in bias.iter().enumerate() {
        if relu {
            y.index_axis_mut(Axis(0), ch).mapv_inplace(|v| (v + b).max(0.0));
        } else {
            y.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v + b);
        }
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
}

fn parse_row(line: &str) -> Result<Vec<f64>> {
    if line.trim().is_empty() {
        return Ok(Vec::new());
    }
    line.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Format { what: "checkpoint", reason: format!("bad number {v:?}") }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub step: f64,
    pub momentum: f64,
    /// Images per step; `None` uses the full set every epoch.
    pub batch_size: Option<usize>,
    /// Drives minibatch selection.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, step: 1e-2, momentum: 0.9, batch_size: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Full-set loss before each epoch's update, then once after the last.
    pub losses: Vec<f64>,
    pub final_step: f64,
}

/// Mean loss and gradient over `images`, reduced in image order.
pub fn batch_loss(net: &ToyNetwork, images: &[Array4<f64>]) -> Result<(f64, Vec<f64>)> {
    let per: Vec<(f64, Vec<f64>)> = images
        .par_iter()
        .map(|img| net.reconstruction_loss(img.view()).map(|(l, g)| (l, g.flatten())))
        .collect::<Result<_>>()?;
    let n = images.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.param_count()];
    for (l, g) in per {
        loss += l / n;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b / n;
        }
    }
    Ok((loss, grad))
}

/// Gradient descent with momentum on the reconstruction loss. The step is
/// halved (and the velocity cleared) whenever the loss increases.
pub fn train_autoencoder(net: &mut ToyNetwork, images: &[Array4<f64>], cfg: &TrainConfig) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(invalid("training needs at least one image"));
    }
    let dim = images[0].dim();
    if images.iter().any(|i| i.dim() != dim) {
        return Err(invalid("training images must share one shape"));
    }
    if !(cfg.step > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(invalid("step must be positive and momentum in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = net.params();
    let mut velocity = vec![0.0; params.len()];
    let mut step = cfg.step;
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    let mut prev = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let (loss, full_grad) = batch_loss(net, images)?;
        if !loss.is_finite() {
            losses.push(loss);
            return Err(Error::TrainingDiverged { epoch, loss, trace: losses });
        }
        losses.push(loss);
        if loss > prev {
            step *= 0.5;
            velocity.iter_mut().for_each(|v| *v = 0.0);
        }
        prev = loss;
        let grad = match cfg.batch_size {
            Some(b) if b < images.len() => {
                let picked: Vec<Array4<f64>> = sample(&mut rng, images.len(), b.max(1)).into_iter().map(|i| images[i].clone()).collect();
                batch_loss(net, &picked)?.1
            }
            _ => full_grad,
        };
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v - step * g;
            *p += *v;
        }
        net.set_params(&params)?;
    }
    if cfg.epochs > 0 {
        let (loss, _) = batch_loss(net, images)?;
        if !loss.is_finite() {
            losses.push(loss);
            return Err(Error::TrainingDiverged { epoch: cfg.epochs, loss, trace: losses });
        }
        losses.push(loss);
    }
    Ok(TrainReport { losses, final_step: step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn randn4(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Array4::from_shape_simple_fn(shape, || n.sample(&mut rng))
    }

    fn small() -> NetworkConfig {
        NetworkConfig { p: 3, h: 0.5, t: 4, channels: 2, hidden_layers: 1 }
    }

    fn sum_grad(net: &ToyNetwork, x: &Array4<f64>) -> Vec<f64> {
        let (y, cache) = net.forward(x.view()).unwrap();
        net.backward(&cache, Array4::ones(y.raw_dim()).view()).unwrap().flatten()
    }

    fn sum_out(net: &ToyNetwork, x: &Array4<f64>) -> f64 {
        net.apply(x.view()).unwrap().sum()
    }

    #[test]
    fn shapes_and_counts() {
        let net = ToyNetwork::new_equivariant(small(), 1).unwrap();
        assert_eq!(net.layers().len(), 3);
        let x = randn4(2, (1, 1, 12, 12));
        assert_eq!(net.apply(x.view()).unwrap().dim(), (1, 1, 6, 6));
        assert!(net.apply(randn4(2, (1, 1, 6, 6)).view()).is_err());
        let r = net.basis().unwrap().rank();
        assert_eq!(net.layers()[1].weight_count(), 2 * 2 * 4 * r);

        let plain = ToyNetwork::new_plain(small(), 1).unwrap();
        assert_eq!(plain.layers()[1].channels(), (8, 8));
        assert_eq!(plain.apply(x.view()).unwrap().dim(), (1, 1, 6, 6));
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut net = ToyNetwork::new_equivariant(small(), 3).unwrap();
        net.set_params(&vec![0.0; net.param_count()]).unwrap();
        assert!(net.apply(randn4(4, (1, 1, 10, 10)).view()).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_pair_is_linear_and_homogeneous() {
        let cfg = NetworkConfig { hidden_layers: 0, ..small() };
        let mut net = ToyNetwork::new_equivariant(cfg, 5).unwrap();
        let n_in = net.layers()[0].weight_count();
        let mut p = net.params();
        p[n_in..n_in + 2].copy_from_slice(&[0.3, -0.7]);
        net.set_params(&p).unwrap();
        let x1 = randn4(6, (1, 1, 9, 9));
        let x2 = randn4(7, (1, 1, 9, 9));
        let y1 = net.apply(x1.view()).unwrap();
        let y2 = net.apply(x2.view()).unwrap();
        let y0 = net.apply(Array4::zeros(x1.raw_dim()).view()).unwrap();
        let ys = net.apply((&x1 + &x2).view()).unwrap();
        assert!((&ys - &(&y1 + &y2 - &y0)).iter().all(|v| v.abs() < 1e-12));

        p[n_in..n_in + 2].copy_from_slice(&[0.0, 0.0]);
        net.set_params(&p).unwrap();
        let a = net.apply(x1.view()).unwrap();
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        net.set_params(&doubled).unwrap();
        let b = net.apply(x1.view()).unwrap();
        // Both layers scale, so the output scales by four.
        assert!(b.iter().zip(a.iter()).all(|(b, a)| (b - 4.0 * a).abs() < 1e-12 * (1.0 + a.abs())));
    }

    #[test]
    fn zero_upstream_gradient() {
        let net = ToyNetwork::new_equivariant(small(), 10).unwrap();
        let (y, cache) = net.forward(randn4(11, (1, 1, 10, 10)).view()).unwrap();
        let g = net.backward(&cache, Array4::zeros(y.raw_dim()).view()).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = ToyNetwork::new_equivariant(small(), 12).unwrap();
        let (y, cache) = net.forward(randn4(13, (1, 1, 10, 10)).view()).unwrap();
        let p = net.params();
        net.set_params(&p).unwrap();
        assert!(matches!(net.backward(&cache, y.view()), Err(Error::Contract(_))));
    }

    #[test]
    fn single_layer_gradient_matches_closed_form() {
        let cfg = NetworkConfig { hidden_layers: 0, channels: 1, ..small() };
        let net = ToyNetwork::new_equivariant(cfg, 14).unwrap();
        let x = randn4(15, (1, 1, 11, 11));
        let (_, cache) = net.forward(x.view()).unwrap();
        let g0 = cache.pre[0].clone().mapv(|_| 1.0);
        let (dx, dk) = cache.banks[0].backward(x.view(), g0.view()).unwrap();
        let _ = dx;
        // d/dK[a,b] of Σ conv(x, K) is the sum of the matching input window.
        let p = 3;
        let n_out = 9;
        let img = x.slice(s![0, 0, .., ..]).to_owned();
        let mut window = Array2::<f64>::zeros((p, p));
        for a in 0..p {
            for b in 0..p {
                window[[a, b]] = img.slice(s![p - 1 - a..p - 1 - a + n_out, p - 1 - b..p - 1 - b + n_out]).sum();
            }
        }
        for o in 0..4 {
            let got = dk.slice(s![0, 0, o, 0, .., ..]).to_owned();
            assert!(got.iter().zip(window.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let basis = net.basis().unwrap();
        let dw = project_filter_gradient(basis, &dk, LayerKind::Input).unwrap();
        let flat: Vec<f64> = dk.iter().copied().collect();
        for (c, v) in dw.iter().enumerate() {
            let want: f64 = basis.u().column(c).iter().zip(&flat).map(|(a, b)| a * b).sum();
            assert!((v - want).abs() < 1e-12);
        }
    }

    fn check_gradients(net: &mut ToyNetwork, x: &Array4<f64>, coords: usize, seed: u64) {
        let analytic = sum_grad(net, x);
        let base = net.params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = sample(&mut rng, base.len(), coords.min(base.len()));
        let eps = 1e-5;
        for i in picks {
            let mut p = base.clone();
            p[i] += eps;
            net.set_params(&p).unwrap();
            let up = sum_out(net, x);
            p[i] -= 2.0 * eps;
            net.set_params(&p).unwrap();
            let down = sum_out(net, x);
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(rel <= 1e-5, "param {i}: analytic {a}, numeric {numeric}");
        }
        net.set_params(&base).unwrap();
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut params_seed = 16;
        for hidden in [0, 1] {
            let cfg = NetworkConfig { hidden_layers: hidden, ..small() };
            let mut net = ToyNetwork::new_equivariant(cfg, params_seed).unwrap();
            let mut p = net.params();
            let mut rng = ChaCha8Rng::seed_from_u64(params_seed);
            let n = Normal::new(0.0, 0.1).unwrap();
            let mut off = 0;
            for l in net.layers() {
                off += l.weight_count();
                for k in 0..l.bias().len() {
                    p[off + k] = n.sample(&mut rng);
                }
                off += l.bias().len();
            }
            net.set_params(&p).unwrap();
            check_gradients(&mut net, &randn4(params_seed + 1, (1, 1, 11, 11)), 50, params_seed);
            params_seed += 10;
        }
        let mut plain = ToyNetwork::new_plain(small(), 40).unwrap();
        check_gradients(&mut plain, &randn4(41, (1, 1, 10, 10)), 50, 42);
    }

    #[test]
    fn centered_biases_zero_the_mean_pre_activation() {
        let mut net = ToyNetwork::new_equivariant(small(), 30).unwrap();
        let images: Vec<_> = (0..3).map(|i| randn4(31 + i, (1, 1, 12, 12)).mapv(|v| v + 2.0)).collect();
        net.center_biases(&images).unwrap();
        for idx in 0..2 {
            let c = net.layers()[idx].channels().0;
            let mut total = vec![0.0; c];
            let mut count = 0;
            for img in &images {
                let (_, cache) = net.forward(img.view()).unwrap();
                let pre = &cache.pre[idx];
                for (ch, tot) in total.iter_mut().enumerate() {
                    *tot += pre.index_axis(Axis(0), ch).sum() + net.layers()[idx].bias()[ch] * (pre.len() / c) as f64;
                }
                count += pre.len() / c;
            }
            assert!(total.iter().all(|t| (t / count as f64).abs() < 1e-12), "{total:?}");
        }
        assert!(net.center_biases(&[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = ToyNetwork::new_equivariant(small(), 50).unwrap();
        let text = net.to_checkpoint(50);
        let back = ToyNetwork::from_checkpoint(&text).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.config(), net.config());

        let plain = ToyNetwork::new_plain(small(), 51).unwrap();
        assert_eq!(ToyNetwork::from_checkpoint(&plain.to_checkpoint(51)).unwrap().params(), plain.params());

        assert!(ToyNetwork::from_checkpoint("network=fconv p=3").is_err());
        let truncated: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(ToyNetwork::from_checkpoint(&truncated).is_err());
    }

    #[test]
    fn zero_epochs_leave_the_net_unchanged() {
        let mut net = ToyNetwork::new_equivariant(small(), 60).unwrap();
        let before = net.params();
        let images = vec![randn4(61, (1, 1, 12, 12))];
        let report = train_autoencoder(&mut net, &images, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(net.params(), before);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let images: Vec<_> = (0..4).map(|i| randn4(70 + i, (1, 1, 14, 14))).collect();
        let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
        let mut a = ToyNetwork::new_equivariant(small(), 80).unwrap();
        let mut b = ToyNetwork::new_equivariant(small(), 80).unwrap();
        let ra = train_autoencoder(&mut a, &images, &cfg).unwrap();
        let rb = train_autoencoder(&mut b, &images, &cfg).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(ra.losses.len(), 31);
        assert!(ra.losses.last().unwrap() < &ra.losses[0]);
    }

    #[test]
    fn divergence_is_reported() {
        let mut images: Vec<_> = (0..2).map(|i| randn4(90 + i, (1, 1, 14, 14))).collect();
        images[1][[0, 0, 7, 7]] = f64::INFINITY;
        let mut net = ToyNetwork::new_equivariant(small(), 91).unwrap();
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        match train_autoencoder(&mut net, &images, &cfg) {
            Err(Error::TrainingDiverged { epoch, trace, .. }) => {
                assert_eq!(epoch, 0);
                assert_eq!(trace.len(), 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
