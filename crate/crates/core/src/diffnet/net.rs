use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layernorm::{self, NormStats};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's version dominates training profiles.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x))),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let th = fast_tanh(u);
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer followed by activation, optional layernorm and optional skip connection.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub layernorm: bool,
    pub residual: bool,
}

impl LayerSpec {
    pub fn n_params(&self) -> usize {
        let affine = self.out_dim * self.in_dim + self.out_dim;
        if self.layernorm {
            affine + 2 * self.out_dim
        } else {
            affine
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    pub layers: Vec<LayerSpec>,
}

impl Topology {
    pub fn validate(&self) -> Result<()> {
        ensure(!self.layers.is_empty(), || "network needs at least one layer".into())?;
        for (i, l) in self.layers.iter().enumerate() {
            ensure(l.in_dim >= 1 && l.out_dim >= 1, || format!("layer {i} has a zero dimension"))?;
            if i > 0 {
                let prev = self.layers[i - 1].out_dim;
                if prev != l.in_dim {
                    return Err(Error::TopologyMismatch(format!(
                        "layer {i} expects {} inputs, previous layer has {prev}",
                        l.in_dim
                    )));
                }
            }
            ensure(!l.residual || l.in_dim == l.out_dim, || format!("residual layer {i} must preserve width"))?;
            ensure(!l.layernorm || l.out_dim >= 2, || format!("layernorm on layer {i} needs width >= 2"))?;
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::n_params).sum()
    }

    /// Indices of layers that carry layernorm.
    pub fn layernorm_sites(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.layernorm).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    Mlp,
    /// Hidden layers after the first are identity-plus-residual blocks.
    ResNet,
}

/// Builder for the standard critic trunk: `depth` hidden layers of `width`, then a linear head.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub layernorm: bool,
    pub architecture: Architecture,
    /// Zero the head so the network initially outputs exactly zero.
    pub zero_init_head: bool,
}

impl NetConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            width: 64,
            depth: 3,
            activation: Activation::Gelu,
            layernorm: true,
            architecture: Architecture::Mlp,
            zero_init_head: false,
        }
    }

    pub fn topology(&self) -> Topology {
        let mut layers = Vec::with_capacity(self.depth + 1);
        let mut prev = self.input_dim;
        for i in 0..self.depth {
            layers.push(LayerSpec {
                in_dim: prev,
                out_dim: self.width,
                activation: self.activation,
                layernorm: self.layernorm,
                residual: self.architecture == Architecture::ResNet && i > 0,
            });
            prev = self.width;
        }
        layers.push(LayerSpec {
            in_dim: prev,
            out_dim: self.output_dim,
            activation: Activation::Identity,
            layernorm: false,
            residual: false,
        });
        Topology { layers }
    }

    /// Fan-in scaled uniform weights, zero biases, unit layernorm scale.
    pub fn build(&self, seed: u64) -> Result<NetParams> {
        let topology = self.topology();
        let mut net = NetParams::zeros(topology)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = net.topology.layers.len();
        for i in 0..n_layers {
            let spec = net.topology.layers[i].clone();
            let r = net.layer_range(i);
            let bound = 1.0 / (spec.in_dim as f64).sqrt();
            let head_zero = self.zero_init_head && i + 1 == n_layers;
            let flat = &mut net.flat[r];
            for w in &mut flat[..spec.out_dim * spec.in_dim] {
                *w = if head_zero { 0.0 } else { rng.gen_range(-bound..bound) };
            }
            if spec.layernorm {
                let off = spec.out_dim * spec.in_dim + spec.out_dim;
                flat[off..off + spec.out_dim].fill(1.0);
            }
        }
        Ok(net)
    }
}

/// Structured copy of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Layernorm `(scale, shift)`.
    pub norm: Option<(Vec<f64>, Vec<f64>)>,
}

/// Network parameters stored flat, with the topology that gives them structure.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    topology: Topology,
    flat: Vec<f64>,
    offsets: Vec<usize>,
}

fn offsets_of(topology: &Topology) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(topology.layers.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for l in &topology.layers {
        acc += l.n_params();
        offsets.push(acc);
    }
    offsets
}

impl NetParams {
    pub fn zeros(topology: Topology) -> Result<Self> {
        topology.validate()?;
        let offsets = offsets_of(&topology);
        let flat = vec![0.0; *offsets.last().unwrap()];
        Ok(Self { topology, flat, offsets })
    }

    pub fn from_flat(topology: Topology, flat: Vec<f64>) -> Result<Self> {
        topology.validate()?;
        let offsets = offsets_of(&topology);
        let expected = *offsets.last().unwrap();
        if flat.len() != expected {
            return Err(Error::ShapeMismatch { expected, got: flat.len() });
        }
        Ok(Self { topology, flat, offsets })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let topology = Topology { layers: layers.iter().map(|l| l.spec.clone()).collect() };
        let mut net = Self::zeros(topology)?;
        for (i, l) in layers.into_iter().enumerate() {
            let s = &l.spec;
            ensure(l.weight.len() == s.out_dim * s.in_dim && l.bias.len() == s.out_dim, || {
                format!("layer {i} weight/bias shape mismatch")
            })?;
            ensure(l.norm.is_some() == s.layernorm, || format!("layer {i} layernorm flag mismatch"))?;
            let r = net.layer_range(i);
            let dst = &mut net.flat[r];
            let nw = l.weight.len();
            dst[..nw].copy_from_slice(&l.weight);
            dst[nw..nw + s.out_dim].copy_from_slice(&l.bias);
            if let Some((scale, shift)) = l.norm {
                ensure(scale.len() == s.out_dim && shift.len() == s.out_dim, || format!("layer {i} norm shape mismatch"))?;
                let off = nw + s.out_dim;
                dst[off..off + s.out_dim].copy_from_slice(&scale);
                dst[off + s.out_dim..off + 2 * s.out_dim].copy_from_slice(&shift);
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> Vec<Layer> {
        (0..self.topology.layers.len())
            .map(|i| {
                let v = self.layer_view(i);
                Layer {
                    spec: v.spec.clone(),
                    weight: v.weight.to_vec(),
                    bias: v.bias.to_vec(),
                    norm: v.norm.map(|(a, b)| (a.to_vec(), b.to_vec())),
                }
            })
            .collect()
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn n_params(&self) -> usize {
        self.flat.len()
    }

    pub fn n_layers(&self) -> usize {
        self.topology.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.topology.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.topology.output_dim()
    }

    /// Range of layer `i`'s parameters in the flat vector.
    pub fn layer_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn same_topology(&self, other: &NetParams) -> bool {
        self.topology == other.topology
    }

    fn layer_view(&self, i: usize) -> LayerView<'_> {
        let spec = &self.topology.layers[i];
        let p = &self.flat[self.layer_range(i)];
        let nw = spec.out_dim * spec.in_dim;
        let (weight, rest) = p.split_at(nw);
        let (bias, rest) = rest.split_at(spec.out_dim);
        let norm = spec.layernorm.then(|| rest.split_at(spec.out_dim));
        LayerView { spec, weight, bias, norm }
    }

    /// Forward pass recording every intermediate.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        let mut trace = ForwardTrace { layers: Vec::new() };
        self.forward_into(input, &mut trace)?;
        Ok((trace.output().to_vec(), trace))
    }

    /// [`forward`](Self::forward) reusing the buffers of an existing trace.
    pub fn forward_into(&self, input: &[f64], trace: &mut ForwardTrace) -> Result<()> {
        self.check_input(input)?;
        trace.layers.resize_with(self.n_layers(), LayerTrace::default);
        for i in 0..self.n_layers() {
            let v = self.layer_view(i);
            let n = v.spec.out_dim;
            let (done, rest) = trace.layers.split_at_mut(i);
            let t = &mut rest[0];
            t.input.clear();
            t.input.extend_from_slice(if i == 0 { input } else { &done[i - 1].out });
            t.pre.resize(n, 0.0);
            affine(v.weight, v.bias, &t.input, &mut t.pre);
            t.act.clear();
            t.act.extend(t.pre.iter().map(|p| v.spec.activation.apply(*p)));
            t.post_ln.resize(n, 0.0);
            match v.norm {
                Some((scale, shift)) => {
                    t.xhat.resize(n, 0.0);
                    t.stats = Some(layernorm::normalize_into(&t.act, scale, shift, &mut t.xhat, &mut t.post_ln));
                }
                None => {
                    t.xhat.clear();
                    t.stats = None;
                    t.post_ln.copy_from_slice(&t.act);
                }
            }
            t.out.clear();
            t.out.extend_from_slice(&t.post_ln);
            if v.spec.residual {
                for (o, x) in t.out.iter_mut().zip(&t.input) {
                    *o += x;
                }
            }
        }
        Ok(())
    }

    /// Forward pass without a trace, reusing `scratch`. Returns the output slice.
    pub fn eval<'s>(&self, input: &[f64], scratch: &'s mut Scratch) -> Result<&'s [f64]> {
        self.check_input(input)?;
        Ok(self.eval_unchecked(input, scratch))
    }

    pub(crate) fn eval_unchecked<'s>(&self, input: &[f64], scratch: &'s mut Scratch) -> &'s [f64] {
        let Scratch { cur, next, xhat, act } = scratch;
        cur.clear();
        cur.extend_from_slice(input);
        for i in 0..self.n_layers() {
            let v = self.layer_view(i);
            let n = v.spec.out_dim;
            next.resize(n, 0.0);
            affine(v.weight, v.bias, cur, next);
            for p in next.iter_mut() {
                *p = v.spec.activation.apply(*p);
            }
            if let Some((scale, shift)) = v.norm {
                xhat.resize(n, 0.0);
                act.clear();
                act.extend_from_slice(next);
                layernorm::normalize_into(act, scale, shift, xhat, next);
            }
            if v.spec.residual {
                for (o, x) in next.iter_mut().zip(cur.iter()) {
                    *o += x;
                }
            }
            std::mem::swap(cur, next);
        }
        cur.as_slice()
    }

    /// Accumulates the gradient of `<upstream, output>` w.r.t. all parameters into `grad`.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.n_params() {
            return Err(Error::ShapeMismatch { expected: self.n_params(), got: grad.len() });
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::ShapeMismatch { expected: self.output_dim(), got: upstream.len() });
        }
        if trace.layers.len() != self.n_layers() {
            return Err(Error::TopologyMismatch("trace does not match network depth".into()));
        }
        let mut g_out = upstream.to_vec();
        for i in (0..self.n_layers()).rev() {
            let v = self.layer_view(i);
            let t = &trace.layers[i];
            let (n, m) = (v.spec.out_dim, v.spec.in_dim);
            let g = &mut grad[self.offsets[i]..self.offsets[i + 1]];
            let (g_w, rest) = g.split_at_mut(n * m);
            let (g_b, rest) = rest.split_at_mut(n);
            let mut g_act = match (v.norm, &t.stats) {
                (Some((scale, _)), Some(stats)) => {
                    let (g_scale, g_shift) = rest.split_at_mut(n);
                    let mut g_in = vec![0.0; n];
                    layernorm::backward_into(&t.xhat, stats, scale, &g_out, g_scale, g_shift, &mut g_in);
                    g_in
                }
                _ => g_out.clone(),
            };
            for (ga, p) in g_act.iter_mut().zip(&t.pre) {
                *ga *= v.spec.activation.derivative(*p);
            }
            let g_pre = g_act;
            for o in 0..n {
                g_b[o] += g_pre[o];
                let row = &mut g_w[o * m..(o + 1) * m];
                for (gw, x) in row.iter_mut().zip(&t.input) {
                    *gw += g_pre[o] * x;
                }
            }
            if i > 0 {
                let mut g_in = if v.spec.residual { g_out.clone() } else { vec![0.0; m] };
                for (row, g) in v.weight.chunks_exact(m).zip(&g_pre[..n]) {
                    for (gi, w) in g_in.iter_mut().zip(row) {
                        *gi += g * w;
                    }
                }
                g_out = g_in;
            }
        }
        Ok(())
    }

    /// Gradient of `<upstream, f(input)>` as a fresh flat vector.
    pub fn gradient(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let (_, trace) = self.forward(input)?;
        let mut grad = vec![0.0; self.n_params()];
        self.backward(&trace, upstream, &mut grad)?;
        Ok(grad)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch { expected: self.input_dim(), got: input.len() });
        }
        Ok(())
    }
}

struct LayerView<'a> {
    spec: &'a LayerSpec,
    weight: &'a [f64],
    bias: &'a [f64],
    norm: Option<(&'a [f64], &'a [f64])>,
}

#[inline]
fn affine(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let m = x.len();
    for (o, (dst, b)) in out.iter_mut().zip(bias).enumerate() {
        let row = &weight[o * m..(o + 1) * m];
        *dst = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

/// Reusable buffers for [`NetParams::eval`].
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    cur: Vec<f64>,
    next: Vec<f64>,
    xhat: Vec<f64>,
    act: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerTrace {
    pub input: Vec<f64>,
    /// `W x + b`.
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    /// Equals `act` when the layer has no layernorm.
    pub post_ln: Vec<f64>,
    /// Layer output (post-layernorm plus skip input for residual layers).
    pub out: Vec<f64>,
    xhat: Vec<f64>,
    stats: Option<NormStats>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map_or(&[], |l| l.out.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(arch: Architecture, act: Activation) -> NetParams {
        let mut cfg = NetConfig::new(3, 2);
        cfg.width = 5;
        cfg.depth = 2;
        cfg.architecture = arch;
        cfg.activation = act;
        let mut net = cfg.build(1).unwrap();
        // move layernorm params off (1, 0) so their gradients are exercised
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in net.flat_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
        net
    }

    #[test]
    fn identity_linear_net() {
        let spec = LayerSpec { in_dim: 3, out_dim: 3, activation: Activation::Identity, layernorm: false, residual: false };
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let net = NetParams::from_layers(vec![Layer { spec, weight: w, bias: vec![0.0; 3], norm: None }]).unwrap();
        let (y, _) = net.forward(&[0.5, -2.0, 7.0]).unwrap();
        assert_eq!(y, vec![0.5, -2.0, 7.0]);
    }

    #[test]
    fn zero_weights_give_activation_of_bias() {
        let spec = |i, o, a| LayerSpec { in_dim: i, out_dim: o, activation: a, layernorm: false, residual: false };
        let l0 = Layer { spec: spec(2, 2, Activation::Relu), weight: vec![0.0; 4], bias: vec![-1.0, 2.0], norm: None };
        let l1 = Layer { spec: spec(2, 1, Activation::Identity), weight: vec![0.0; 2], bias: vec![0.25], norm: None };
        let net = NetParams::from_layers(vec![l0, l1]).unwrap();
        let (y, trace) = net.forward(&[3.0, 4.0]).unwrap();
        assert_eq!(trace.layers[0].act, vec![0.0, 2.0]);
        assert_eq!(y, vec![0.25]);
    }

    #[test]
    fn scalar_linear_gradient_is_input() {
        let spec = LayerSpec { in_dim: 1, out_dim: 1, activation: Activation::Identity, layernorm: false, residual: false };
        let net = NetParams::from_layers(vec![Layer { spec, weight: vec![2.0], bias: vec![0.0], norm: None }]).unwrap();
        let g = net.gradient(&[3.5], &[1.0]).unwrap();
        assert_eq!(g, vec![3.5, 1.0]);
    }

    #[test]
    fn eval_matches_forward() {
        for arch in [Architecture::Mlp, Architecture::ResNet] {
            let net = small(arch, Activation::Gelu);
            let x = [0.3, -0.8, 1.7];
            let (y, _) = net.forward(&x).unwrap();
            let mut scratch = Scratch::default();
            assert_eq!(net.eval(&x, &mut scratch).unwrap(), y.as_slice());
            // scratch reuse must not leak state
            assert_eq!(net.eval(&x, &mut scratch).unwrap(), y.as_slice());
        }
    }

    #[test]
    fn shape_errors() {
        let net = small(Architecture::Mlp, Activation::Gelu);
        assert!(net.forward(&[1.0]).is_err());
        let (_, trace) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        let mut g = vec![0.0; 3];
        assert!(net.backward(&trace, &[1.0, 1.0], &mut g).is_err());
    }

    #[test]
    fn flat_structured_round_trip() {
        let net = small(Architecture::ResNet, Activation::Gelu);
        let back = NetParams::from_layers(net.layers()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn resnet_blocks_are_residual() {
        let mut cfg = NetConfig::new(4, 1);
        cfg.architecture = Architecture::ResNet;
        let topo = cfg.topology();
        assert!(!topo.layers[0].residual);
        assert!(topo.layers[1].residual && topo.layers[2].residual);
        assert!(!topo.layers[3].residual);
    }

    #[test]
    fn zero_head_outputs_zero() {
        let mut cfg = NetConfig::new(4, 1);
        cfg.zero_init_head = true;
        let net = cfg.build(3).unwrap();
        let (y, _) = net.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(y, vec![0.0]);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8);
        }
    }
}
