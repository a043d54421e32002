//! A small convolutional inpainting network, a patch discriminator, and the
//! reverse-mode gradients and Adam updates that train them.
//!
//! The inpainter is an encoder of stride-2 convolutions, a bottleneck of
//! dilated convolutions, and a decoder of nearest-upsample + convolution
//! blocks ending in a sigmoid. Every convolution is 3x3. Layers can optionally
//! be gated: `act(conv_f(x)) * sigmoid(conv_g(x))`.

pub mod checkpoint;
pub mod conv;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, InputStack};
use crate::rng::RandomState;
use crate::tensor::FeatureMap;
use conv::{col2im, conv_forward, conv_input_grads, conv_param_grads, im2col, ConvGeometry};

pub use optim::{optimizer_step, AdamConfig, AdamState};

const LEAKY_SLOPE: f64 = 0.2;

/// Hidden-layer activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    LeakyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Nonlinearity {
    Elu,
    LeakyRelu,
    Sigmoid,
    Identity,
}

impl From<Activation> for Nonlinearity {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Elu => Nonlinearity::Elu,
            Activation::LeakyRelu => Nonlinearity::LeakyRelu,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Nonlinearity::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Nonlinearity::Sigmoid => sigmoid(x),
            Nonlinearity::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Nonlinearity::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Nonlinearity::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Nonlinearity::Identity => 1.0,
        }
    }
}

/// Shape-determining description of the inpainting network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Channels of the images being restored (1 or 3).
    pub image_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 encoder levels (and matching decoder levels).
    pub depth: usize,
    /// One dilated bottleneck convolution per entry.
    pub dilations: Vec<usize>,
    pub gated: bool,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_channels: 8,
            depth: 3,
            dilations: vec![1, 2, 4],
            gated: false,
            activation: Activation::Elu,
        }
    }
}

impl ArchConfig {
    /// The tiny variant used for finite-difference gradient checks.
    pub fn tiny(image_channels: usize) -> Self {
        Self {
            image_channels,
            base_channels: 4,
            depth: 1,
            dilations: vec![2],
            gated: false,
            activation: Activation::Elu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::Param(format!("image_channels must be 1 or 3, got {}", self.image_channels)));
        }
        if self.depth < 1 {
            return Err(Error::Param("depth must be at least 1".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::Param(format!("base_channels must be at least 4, got {}", self.base_channels)));
        }
        if self.dilations.iter().any(|&d| d < 1) {
            return Err(Error::Param("dilations must be at least 1".into()));
        }
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Patch discriminator description: `depth` stride-2 convolutions followed by
/// a single-channel score convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_channels: 8,
            depth: 3,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::Param(format!("image_channels must be 1 or 3, got {}", self.image_channels)));
        }
        if self.depth < 1 || self.base_channels < 1 {
            return Err(Error::Param("discriminator depth and channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter (or gradient) arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    tensors: Vec<NamedTensor>,
}

/// Gradients share the layout of the parameters they belong to.
pub type GradientSet = ParamSet;

impl ParamSet {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name.as_str())
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Scalar at a flat index across all tensors in order.
    pub fn scalar(&self, mut index: usize) -> f64 {
        for t in &self.tensors {
            if index < t.data.len() {
                return t.data[index];
            }
            index -= t.data.len();
        }
        panic!("scalar index out of range")
    }

    pub fn scalar_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if index < t.data.len() {
                return &mut t.data[index];
            }
            index -= t.data.len();
        }
        panic!("scalar index out of range")
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    fn pair_mut(&mut self, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
        assert!(i < j);
        let (a, b) = self.tensors.split_at_mut(j);
        (&mut a[i].data, &mut b[0].data)
    }
}

/// Parameters θ of an inpainting network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub arch: ArchConfig,
    pub params: ParamSet,
}

/// Parameters of a patch discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscParams {
    pub config: DiscConfig,
    pub params: ParamSet,
}

#[derive(Clone, Debug)]
struct Block {
    name: String,
    upsample: bool,
    geom: ConvGeometry,
    act: Nonlinearity,
    weight: usize,
    bias: usize,
    gate: Option<(usize, usize)>,
}

/// Executable layer graph for either network kind.
#[derive(Clone, Debug)]
pub struct ConvNet {
    blocks: Vec<Block>,
    in_channels: usize,
    /// Spatial dims must be divisible by this.
    granularity: usize,
}

struct BlockTape {
    in_h: usize,
    in_w: usize,
    cols: Vec<f64>,
    pre: Vec<f64>,
    gate_pre: Option<Vec<f64>>,
}

/// Intermediate values recorded by a training forward pass.
pub struct Tape {
    blocks: Vec<BlockTape>,
    out: (usize, usize, usize),
}

struct BlockSpec {
    name: String,
    upsample: bool,
    geom: ConvGeometry,
    act: Nonlinearity,
    gated: bool,
}

impl ConvNet {
    fn from_specs(specs: Vec<BlockSpec>, in_channels: usize, granularity: usize) -> Self {
        let mut next = 0;
        let blocks = specs
            .into_iter()
            .map(|s| {
                let weight = next;
                let bias = next + 1;
                next += 2;
                let gate = if s.gated {
                    next += 2;
                    Some((weight + 2, weight + 3))
                } else {
                    None
                };
                Block {
                    name: s.name,
                    upsample: s.upsample,
                    geom: s.geom,
                    act: s.act,
                    weight,
                    bias,
                    gate,
                }
            })
            .collect();
        Self {
            blocks,
            in_channels,
            granularity,
        }
    }

    pub fn inpainter(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let conv = |cin, cout, stride, dilation| ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride,
            dilation,
        };
        let hidden = Nonlinearity::from(arch.activation);
        let mut specs = Vec::new();
        for l in 0..arch.depth {
            let cin = if l == 0 { arch.image_channels + 1 } else { arch.level_channels(l - 1) };
            specs.push(BlockSpec {
                name: format!("enc{l}"),
                upsample: false,
                geom: conv(cin, arch.level_channels(l), 2, 1),
                act: hidden,
                gated: arch.gated,
            });
        }
        let deepest = arch.level_channels(arch.depth - 1);
        for (i, &d) in arch.dilations.iter().enumerate() {
            specs.push(BlockSpec {
                name: format!("mid{i}"),
                upsample: false,
                geom: conv(deepest, deepest, 1, d),
                act: hidden,
                gated: arch.gated,
            });
        }
        for l in (0..arch.depth).rev() {
            let last = l == 0;
            let cout = if last { arch.image_channels } else { arch.level_channels(l - 1) };
            specs.push(BlockSpec {
                name: format!("dec{l}"),
                upsample: true,
                geom: conv(arch.level_channels(l), cout, 1, 1),
                act: if last { Nonlinearity::Sigmoid } else { hidden },
                gated: arch.gated && !last,
            });
        }
        Ok(Self::from_specs(specs, arch.image_channels + 1, 1 << arch.depth))
    }

    pub fn discriminator(cfg: &DiscConfig) -> Result<Self> {
        cfg.validate()?;
        let mut specs = Vec::new();
        let mut cin = cfg.image_channels;
        for l in 0..cfg.depth {
            let cout = cfg.base_channels << l;
            specs.push(BlockSpec {
                name: format!("disc{l}"),
                upsample: false,
                geom: ConvGeometry {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 3,
                    stride: 2,
                    dilation: 1,
                },
                act: Nonlinearity::LeakyRelu,
                gated: false,
            });
            cin = cout;
        }
        specs.push(BlockSpec {
            name: "score".into(),
            upsample: false,
            geom: ConvGeometry {
                in_channels: cin,
                out_channels: 1,
                kernel: 3,
                stride: 1,
                dilation: 1,
            },
            act: Nonlinearity::Identity,
            gated: false,
        });
        Ok(Self::from_specs(specs, cfg.image_channels, 1 << cfg.depth))
    }

    /// Parameter names and shapes, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let g = &b.geom;
            let wshape = vec![g.out_channels, g.in_channels, g.kernel, g.kernel];
            out.push((format!("{}.weight", b.name), wshape.clone()));
            out.push((format!("{}.bias", b.name), vec![g.out_channels]));
            if b.gate.is_some() {
                out.push((format!("{}.gate.weight", b.name), wshape));
                out.push((format!("{}.gate.bias", b.name), vec![g.out_channels]));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Fan-in scaled normal weights, zero biases.
    pub fn init_params(&self, rs: &mut RandomState) -> ParamSet {
        let last = self.blocks.len() - 1;
        let mut tensors = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            let g = &b.geom;
            let fan_in = g.patch_len() as f64;
            let gain = if bi == last { 1.0 } else { 2.0 };
            let std = (gain / fan_in).sqrt();
            let mut push = |suffix: &str, weights: bool| {
                let shape = if weights {
                    vec![g.out_channels, g.in_channels, g.kernel, g.kernel]
                } else {
                    vec![g.out_channels]
                };
                let n: usize = shape.iter().product();
                let data = if weights { (0..n).map(|_| std * rs.normal()).collect() } else { vec![0.0; n] };
                tensors.push(NamedTensor {
                    name: format!("{}.{suffix}", b.name),
                    shape,
                    data,
                });
            };
            push("weight", true);
            push("bias", false);
            if b.gate.is_some() {
                push("gate.weight", true);
                push("gate.bias", false);
            }
        }
        ParamSet::new(tensors)
    }

    fn check_input(&self, params: &ParamSet, x: &FeatureMap) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        if x.height % self.granularity != 0 || x.width % self.granularity != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by {}",
                x.height, x.width, self.granularity
            )));
        }
        let expected = self.layout();
        let matches = params.tensors().len() == expected.len()
            && params.tensors().iter().zip(&expected).all(|(t, (n, s))| &t.name == n && &t.shape == s);
        if !matches {
            return Err(Error::Shape("parameter layout does not match the architecture".into()));
        }
        Ok(())
    }

    fn run(&self, params: &ParamSet, x: &FeatureMap, record: bool) -> Result<(FeatureMap, Option<Tape>)> {
        self.check_input(params, x)?;
        let t = params.tensors();
        let mut tapes = Vec::new();
        let mut cur = x.clone();
        for b in &self.blocks {
            if b.upsample {
                cur = cur.upsample2();
            }
            let (oh, ow) = b.geom.output_dims(cur.height, cur.width);
            let n = oh * ow;
            let cols = im2col(&b.geom, &cur);
            let pre = conv_forward(&b.geom, &cols, &t[b.weight].data, &t[b.bias].data, n);
            let gate_pre = b
                .gate
                .map(|(gw, gb)| conv_forward(&b.geom, &cols, &t[gw].data, &t[gb].data, n));
            let mut out: Vec<f64> = pre.iter().map(|&v| b.act.apply(v)).collect();
            if let Some(gp) = &gate_pre {
                for (o, &g) in out.iter_mut().zip(gp) {
                    *o *= sigmoid(g);
                }
            }
            let next = FeatureMap::from_vec(b.geom.out_channels, oh, ow, out)?;
            if record {
                tapes.push(BlockTape {
                    in_h: cur.height,
                    in_w: cur.width,
                    cols,
                    pre,
                    gate_pre,
                });
            }
            cur = next;
        }
        let tape = record.then(|| Tape {
            blocks: tapes,
            out: (cur.channels, cur.height, cur.width),
        });
        Ok((cur, tape))
    }

    pub fn forward(&self, params: &ParamSet, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.run(params, x, false)?.0)
    }

    pub fn forward_train(&self, params: &ParamSet, x: &FeatureMap) -> Result<(FeatureMap, Tape)> {
        let (out, tape) = self.run(params, x, true)?;
        Ok((out, tape.expect("tape recorded")))
    }

    /// Back-propagates `dout` through the recorded pass, accumulating into
    /// `grads`. Returns the gradient w.r.t. the network input when requested.
    pub fn backward(
        &self,
        params: &ParamSet,
        tape: &Tape,
        dout: &FeatureMap,
        grads: &mut GradientSet,
        want_input_grad: bool,
    ) -> Result<Option<FeatureMap>> {
        if (dout.channels, dout.height, dout.width) != tape.out {
            return Err(Error::Shape("output gradient does not match the recorded output".into()));
        }
        let t = params.tensors();
        let mut dy = dout.data.clone();
        for (bi, (b, bt)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let (oh, ow) = b.geom.output_dims(bt.in_h, bt.in_w);
            let n = oh * ow;
            let mut d_pre = vec![0.0; dy.len()];
            let mut d_gate = None;
            match &bt.gate_pre {
                Some(gp) => {
                    let mut dg = vec![0.0; dy.len()];
                    for i in 0..dy.len() {
                        let s = sigmoid(gp[i]);
                        let a = b.act.apply(bt.pre[i]);
                        d_pre[i] = dy[i] * s * b.act.derivative(bt.pre[i]);
                        dg[i] = dy[i] * a * s * (1.0 - s);
                    }
                    d_gate = Some(dg);
                }
                None => {
                    for i in 0..dy.len() {
                        d_pre[i] = dy[i] * b.act.derivative(bt.pre[i]);
                    }
                }
            }
            {
                let (dw, db) = grads.pair_mut(b.weight, b.bias);
                conv_param_grads(&b.geom, &bt.cols, &d_pre, n, dw, db);
            }
            if let (Some((gw, gb)), Some(dg)) = (b.gate, &d_gate) {
                let (dw, db) = grads.pair_mut(gw, gb);
                conv_param_grads(&b.geom, &bt.cols, dg, n, dw, db);
            }
            if bi == 0 && !want_input_grad {
                return Ok(None);
            }
            let mut dcols = vec![0.0; b.geom.patch_len() * n];
            conv_input_grads(&b.geom, &t[b.weight].data, &d_pre, n, &mut dcols);
            if let (Some((gw, _)), Some(dg)) = (b.gate, &d_gate) {
                conv_input_grads(&b.geom, &t[gw].data, dg, n, &mut dcols);
            }
            let mut dx = col2im(&b.geom, &dcols, bt.in_h, bt.in_w);
            if b.upsample {
                dx = dx.downsum2();
            }
            if bi == 0 {
                return Ok(Some(dx));
            }
            dy = dx.data;
        }
        unreachable!("network has at least one block")
    }
}

/// Draws fresh inpainter parameters.
pub fn init_network(rs: &mut RandomState, arch: &ArchConfig) -> Result<NetworkParams> {
    let net = ConvNet::inpainter(arch)?;
    Ok(NetworkParams {
        arch: arch.clone(),
        params: net.init_params(rs),
    })
}

pub fn init_discriminator(rs: &mut RandomState, cfg: &DiscConfig) -> Result<DiscParams> {
    let net = ConvNet::discriminator(cfg)?;
    Ok(DiscParams {
        config: cfg.clone(),
        params: net.init_params(rs),
    })
}

impl NetworkParams {
    pub fn net(&self) -> Result<ConvNet> {
        ConvNet::inpainter(&self.arch)
    }
}

impl DiscParams {
    pub fn net(&self) -> Result<ConvNet> {
        ConvNet::discriminator(&self.config)
    }
}

/// `f_θ(x)`: restores a full-resolution image from a masked-input stack.
pub fn forward(theta: &NetworkParams, x: &InputStack) -> Result<Image> {
    let out = theta.net()?.forward(&theta.params, x.as_feature_map())?;
    if !out.is_finite() {
        return Err(Error::Numeric("inpainter output".into()));
    }
    Image::from_feature_map(out)
}

/// Evaluates a scalar loss of the network output and its parameter gradient.
///
/// `loss` returns the loss value and its gradient w.r.t. the output image.
pub fn gradients(
    theta: &NetworkParams,
    x: &InputStack,
    loss: impl FnOnce(&Image) -> Result<(f64, FeatureMap)>,
) -> Result<(f64, GradientSet)> {
    let net = theta.net()?;
    let (out, tape) = net.forward_train(&theta.params, x.as_feature_map())?;
    if !out.is_finite() {
        return Err(Error::Numeric("inpainter output".into()));
    }
    let pred = Image::from_feature_map(out)?;
    let (value, dpred) = loss(&pred)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss value {value}")));
    }
    let mut grads = theta.params.zeros_like();
    net.backward(&theta.params, &tape, &dpred, &mut grads, false)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numeric(format!("gradient of {name}")));
    }
    Ok((value, grads))
}

/// Patch score map of the discriminator.
pub fn disc_forward(d: &DiscParams, image: &Image) -> Result<FeatureMap> {
    if image.channels() != d.config.image_channels {
        return Err(Error::Shape(format!(
            "discriminator expects {} channels, got {}",
            d.config.image_channels,
            image.channels()
        )));
    }
    d.net()?.forward(&d.params, &image.to_feature_map())
}
