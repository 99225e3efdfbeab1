//! The grid-prediction detector: a configurable conv/BN/activation/pool
//! stack with a per-cell prediction head (B*5 box+objectness channels plus
//! C class logits).

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::activation::ActivationKind;
use crate::nn::batchnorm::{BatchNormCtx, BatchNormLayer, BnMode};
use crate::nn::conv::{ConvCtx, ConvGrads, ConvLayer};
use crate::nn::pool::{MaxPoolCtx, MaxPoolLayer};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub boxes_per_cell: usize,
    pub num_classes: usize,
    /// channel width after each conv+pool stage; one pool per stage
    pub stage_channels: Vec<usize>,
    pub use_batchnorm: bool,
    pub activation: ActivationKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 160,
            boxes_per_cell: 1,
            num_classes: 32,
            stage_channels: vec![12, 24, 48, 96],
            use_batchnorm: true,
            activation: ActivationKind::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The paper-scale profile: 640x640 input, five pool stages, S = 20.
    pub fn paper_profile() -> Self {
        ModelConfig {
            input_size: 640,
            stage_channels: vec![16, 32, 64, 128, 128],
            ..ModelConfig::default()
        }
    }

    pub fn head_channels(&self) -> usize {
        self.boxes_per_cell * 5 + self.num_classes
    }

    /// Grid cells per side; errors if the pooling stages do not divide the
    /// input extent down cleanly.
    pub fn grid_size(&self) -> Result<usize> {
        if self.num_classes == 0 || self.boxes_per_cell == 0 {
            return Err(Error::Config(
                "num_classes and boxes_per_cell must be positive".into(),
            ));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::Config("at least one stage required".into()));
        }
        let mut extent = self.input_size;
        for (i, _) in self.stage_channels.iter().enumerate() {
            if extent % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: extent {extent} not divisible by the 2x2 pool"
                )));
            }
            extent /= 2;
            if extent == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: input {}px exhausted by pooling",
                    self.input_size
                )));
            }
        }
        Ok(extent)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer<f32>),
    BatchNorm(BatchNormLayer<f32>),
    Activation(ActivationKind),
    MaxPool(MaxPoolLayer),
}

/// Per-layer saved forward state for one training pass.
pub enum LayerCtx {
    Conv(ConvCtx<f32>),
    BatchNorm(BatchNormCtx<f32>),
    Activation(Tensor<f32>),
    MaxPool(MaxPoolCtx),
}

/// Per-layer parameter gradients (layers without parameters carry `None`).
pub enum LayerGrads {
    Conv(ConvGrads<f32>),
    BatchNorm {
        d_gamma: Tensor<f32>,
        d_beta: Tensor<f32>,
    },
    None,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub config: ModelConfig,
    pub grid_size: usize,
}

/// Raw per-cell detector outputs: [N, S, S, B*5 + C].
#[derive(Debug, Clone)]
pub struct GridPrediction {
    pub raw: Tensor<f32>,
    pub grid_size: usize,
    pub boxes_per_cell: usize,
    pub num_classes: usize,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    let grid_size = config.grid_size()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers = Vec::new();
    let mut cin = 3;
    for &cout in &config.stage_channels {
        layers.push(Layer::Conv(init_conv(
            &mut rng,
            cin,
            cout,
            3,
            config.activation.init_gain(),
        )?));
        if config.use_batchnorm {
            layers.push(Layer::BatchNorm(BatchNormLayer::new(cout)));
        }
        layers.push(Layer::Activation(config.activation));
        layers.push(Layer::MaxPool(MaxPoolLayer::default()));
        cin = cout;
    }
    // 1x1 head producing raw logits; unit gain
    let mut head = init_conv(&mut rng, cin, config.head_channels(), 1, 1.0)?;
    // objectness bias starts low: most cells are background, so this saves
    // the early epochs otherwise spent pushing the shared bias down
    for slot in 0..config.boxes_per_cell {
        head.bias.data_mut()[slot * 5 + 4] = -3.0;
    }
    layers.push(Layer::Conv(head));
    Ok(Model {
        layers,
        config: config.clone(),
        grid_size,
    })
}

fn init_conv(
    rng: &mut ChaCha8Rng,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f64,
) -> Result<ConvLayer<f32>> {
    let fan_in = (cin * k * k) as f64;
    let std = gain / fan_in.sqrt();
    let normal = Normal::new(0.0, std).expect("std > 0");
    let n = cout * cin * k * k;
    let data: Vec<f32> = (0..n).map(|_| normal.sample(rng) as f32).collect();
    ConvLayer::new(
        Tensor::from_vec(&[cout, cin, k, k], data)?,
        Tensor::zeros(&[cout]),
        1,
        (k - 1) / 2,
    )
}

impl Model {
    fn check_input(&self, images: &Tensor<f32>) -> Result<()> {
        let s = self.config.input_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::RejectedInput(format!(
                "model expects [N,3,{s},{s}], got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Inference forward pass; batch norm uses running statistics.
    pub fn forward(&self, images: &Tensor<f32>) -> Result<GridPrediction> {
        self.check_input(images)?;
        let mut x = images.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(l) => l.forward(&x)?,
                Layer::BatchNorm(l) => l.forward_infer(&x)?,
                Layer::Activation(k) => k.forward(&x),
                Layer::MaxPool(l) => l.forward(&x)?,
            };
        }
        Ok(self.wrap_prediction(x))
    }

    /// Training forward pass: batch statistics for BN, contexts retained.
    pub fn forward_train(&mut self, images: &Tensor<f32>) -> Result<(GridPrediction, Vec<LayerCtx>)> {
        self.check_input(images)?;
        let mut x = images.clone();
        let mut ctxs = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            x = match layer {
                Layer::Conv(l) => {
                    let (out, ctx) = l.forward_ctx(&x)?;
                    ctxs.push(LayerCtx::Conv(ctx));
                    out
                }
                Layer::BatchNorm(l) => {
                    let (out, ctx) = l.forward_ctx(&x, BnMode::Train)?;
                    ctxs.push(LayerCtx::BatchNorm(ctx));
                    out
                }
                Layer::Activation(k) => {
                    ctxs.push(LayerCtx::Activation(x.clone()));
                    k.forward(&x)
                }
                Layer::MaxPool(l) => {
                    let (out, ctx) = l.forward_ctx(&x)?;
                    ctxs.push(LayerCtx::MaxPool(ctx));
                    out
                }
            };
        }
        Ok((self.wrap_prediction(x), ctxs))
    }

    fn wrap_prediction(&self, head: Tensor<f32>) -> GridPrediction {
        GridPrediction {
            raw: nchw_to_nhwc(&head),
            grid_size: self.grid_size,
            boxes_per_cell: self.config.boxes_per_cell,
            num_classes: self.config.num_classes,
        }
    }

    /// Backpropagates a gradient w.r.t. the raw prediction ([N,S,S,ch])
    /// through the stack; returns per-layer parameter gradients aligned
    /// with `self.layers`.
    pub fn backward(&self, ctxs: &[LayerCtx], d_pred: &Tensor<f32>) -> Result<Vec<LayerGrads>> {
        if ctxs.len() != self.layers.len() {
            return Err(Error::Usage(
                "forward context does not match the layer stack".into(),
            ));
        }
        let mut grad = nhwc_to_nchw(d_pred);
        let mut out: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        for (layer, ctx) in self.layers.iter().zip(ctxs).rev() {
            let g = match (layer, ctx) {
                (Layer::Conv(l), LayerCtx::Conv(c)) => {
                    let (dx, grads) = l.backward(c, &grad)?;
                    grad = dx;
                    LayerGrads::Conv(grads)
                }
                (Layer::BatchNorm(l), LayerCtx::BatchNorm(c)) => {
                    let (dx, grads) = l.backward(c, &grad)?;
                    grad = dx;
                    LayerGrads::BatchNorm {
                        d_gamma: grads.d_gamma,
                        d_beta: grads.d_beta,
                    }
                }
                (Layer::Activation(k), LayerCtx::Activation(input)) => {
                    grad = k.backward(input, &grad);
                    LayerGrads::None
                }
                (Layer::MaxPool(l), LayerCtx::MaxPool(c)) => {
                    grad = l.backward(c, &grad)?;
                    LayerGrads::None
                }
                _ => return Err(Error::Usage("layer/context kind mismatch".into())),
            };
            out.push(g);
        }
        out.reverse();
        Ok(out)
    }

    /// Plain SGD: p <- p - lr * g.
    pub fn sgd_step(&mut self, grads: &[LayerGrads], lr: f32) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            match (layer, g) {
                (Layer::Conv(l), LayerGrads::Conv(cg)) => {
                    for (p, d) in l.weights.data_mut().iter_mut().zip(cg.d_weights.data()) {
                        *p -= lr * d;
                    }
                    for (p, d) in l.bias.data_mut().iter_mut().zip(cg.d_bias.data()) {
                        *p -= lr * d;
                    }
                }
                (Layer::BatchNorm(l), LayerGrads::BatchNorm { d_gamma, d_beta }) => {
                    for (p, d) in l.gamma.data_mut().iter_mut().zip(d_gamma.data()) {
                        *p -= lr * d;
                    }
                    for (p, d) in l.beta.data_mut().iter_mut().zip(d_beta.data()) {
                        *p -= lr * d;
                    }
                }
                _ => {}
            }
        }
    }

    /// Total learnable + running-stat element count.
    pub fn count_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weights.len() + c.bias.len(),
                Layer::BatchNorm(b) => b.gamma.len() + b.beta.len(),
                _ => 0,
            })
            .sum()
    }

    /// All parameter tensors in layer order (the checkpoint payload order).
    pub fn param_tensors(&self) -> Vec<&Tensor<f32>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(&c.weights);
                    out.push(&c.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&b.gamma);
                    out.push(&b.beta);
                    out.push(&b.running_mean);
                    out.push(&b.running_var);
                }
                _ => {}
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "format_version={CHECKPOINT_FORMAT_VERSION}")?;
        writeln!(f, "input_size={}", self.config.input_size)?;
        writeln!(f, "boxes_per_cell={}", self.config.boxes_per_cell)?;
        writeln!(f, "num_classes={}", self.config.num_classes)?;
        writeln!(
            f,
            "stage_channels={}",
            self.config
                .stage_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )?;
        writeln!(f, "use_batchnorm={}", self.config.use_batchnorm)?;
        writeln!(f, "activation={}", activation_token(self.config.activation))?;
        writeln!(f, "seed={}", self.config.seed)?;
        writeln!(f, "---")?;
        for t in self.param_tensors() {
            t.write_to(&mut f)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut config = ModelConfig::default();
        let mut version = 0u32;
        loop {
            let mut line = String::new();
            if f.read_line(&mut line)? == 0 {
                return Err(Error::Corrupt("checkpoint manifest unterminated".into()));
            }
            let line = line.trim_end();
            if line == "---" {
                break;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("bad manifest line {line:?}")))?;
            match key {
                "format_version" => {
                    version = value
                        .parse()
                        .map_err(|_| Error::Corrupt("bad format_version".into()))?
                }
                "input_size" => {
                    config.input_size = value
                        .parse()
                        .map_err(|_| Error::Corrupt("bad input_size".into()))?
                }
                "boxes_per_cell" => {
                    config.boxes_per_cell = value
                        .parse()
                        .map_err(|_| Error::Corrupt("bad boxes_per_cell".into()))?
                }
                "num_classes" => {
                    config.num_classes = value
                        .parse()
                        .map_err(|_| Error::Corrupt("bad num_classes".into()))?
                }
                "stage_channels" => {
                    config.stage_channels = value
                        .split(',')
                        .map(|v| v.parse().map_err(|_| Error::Corrupt("bad stage_channels".into())))
                        .collect::<Result<_>>()?
                }
                "use_batchnorm" => {
                    config.use_batchnorm = value
                        .parse()
                        .map_err(|_| Error::Corrupt("bad use_batchnorm".into()))?
                }
                "activation" => config.activation = parse_activation_token(value)?,
                "seed" => {
                    config.seed = value.parse().map_err(|_| Error::Corrupt("bad seed".into()))?
                }
                _ => return Err(Error::Corrupt(format!("unknown manifest key {key:?}"))),
            }
        }
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut model = build_model(&config)?;
        for layer in &mut model.layers {
            match layer {
                Layer::Conv(c) => {
                    c.weights = read_expect(&mut f, c.weights.shape())?;
                    c.bias = read_expect(&mut f, c.bias.shape())?;
                }
                Layer::BatchNorm(b) => {
                    b.gamma = read_expect(&mut f, b.gamma.shape())?;
                    b.beta = read_expect(&mut f, b.beta.shape())?;
                    b.running_mean = read_expect(&mut f, b.running_mean.shape())?;
                    b.running_var = read_expect(&mut f, b.running_var.shape())?;
                }
                _ => {}
            }
        }
        Ok(model)
    }
}

fn read_expect(r: &mut impl std::io::Read, shape: &[usize]) -> Result<Tensor<f32>> {
    let t = Tensor::read_from(r)?;
    if t.shape() != shape {
        return Err(Error::Corrupt(format!(
            "checkpoint tensor shape {:?} does not match model {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(t)
}

fn activation_token(kind: ActivationKind) -> String {
    match kind {
        ActivationKind::LeakyRelu { alpha } => format!("leaky_relu:{alpha}"),
        ActivationKind::Relu => "relu".into(),
        ActivationKind::Identity => "identity".into(),
    }
}

fn parse_activation_token(s: &str) -> Result<ActivationKind> {
    if let Some(alpha) = s.strip_prefix("leaky_relu:") {
        return Ok(ActivationKind::LeakyRelu {
            alpha: alpha
                .parse()
                .map_err(|_| Error::Corrupt("bad leaky_relu alpha".into()))?,
        });
    }
    match s {
        "relu" => Ok(ActivationKind::Relu),
        "identity" => Ok(ActivationKind::Identity),
        _ => Err(Error::Corrupt(format!("unknown activation {s:?}"))),
    }
}

/// [N,C,H,W] -> [N,H,W,C]
pub fn nchw_to_nhwc(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[n, h, w, c]);
    for img in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let src = ((img * c + ch) * h + y) * w + x;
                    let dst = ((img * h + y) * w + x) * c + ch;
                    out.data_mut()[dst] = t.data()[src];
                }
            }
        }
    }
    out
}

/// [N,H,W,C] -> [N,C,H,W]
pub fn nhwc_to_nchw(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for img in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let dst = ((img * c + ch) * h + y) * w + x;
                    let src = ((img * h + y) * w + x) * c + ch;
                    out.data_mut()[dst] = t.data()[src];
                }
            }
        }
    }
    out
}
