//! Post-training full-integer quantization: calibration, int8 tensors,
//! a pure-integer inference path with fixed-point requantization, and
//! float-vs-quantized fidelity reporting.

use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::time::Instant;

use crate::detector::{nchw_to_nhwc, GridPrediction, Layer, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::activation::ActivationKind;
use crate::nn::conv::ConvLayer;
use crate::nn::pool::MaxPoolLayer;
use crate::postprocess::{decode, iou, nms, DecodeConfig};
use crate::tensor::Tensor;

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;
const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QScheme {
    Symmetric,
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub scheme: QScheme,
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config("quant scale must be positive".into()));
        }
        if self.zero_point < QMIN || self.zero_point > QMAX {
            return Err(Error::Config("zero point outside the int8 range".into()));
        }
        if self.scheme == QScheme::Symmetric && self.zero_point != 0 {
            return Err(Error::Config(
                "symmetric scheme forces zero_point == 0".into(),
            ));
        }
        Ok(())
    }

    /// Symmetric weight params: scale = max|w| / 127.
    pub fn symmetric(max_abs: f64) -> QuantParams {
        QuantParams {
            scale: (max_abs / QMAX as f64).max(SCALE_FLOOR),
            zero_point: 0,
            scheme: QScheme::Symmetric,
        }
    }

    /// Affine activation params from an observed range. The range is widened
    /// to include zero so the zero point is exactly representable (integer
    /// zero padding then contributes nothing to convolutions).
    pub fn affine(min: f64, max: f64) -> QuantParams {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = ((hi - lo) / (QMAX - QMIN) as f64).max(SCALE_FLOOR);
        let zp = (QMIN as f64 - lo / scale).round() as i32;
        QuantParams {
            scale,
            zero_point: zp.clamp(QMIN, QMAX),
            scheme: QScheme::Affine,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub params: QuantParams,
}

fn round_half_away(x: f64) -> f64 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        (x - 0.5).ceil()
    }
}

/// q = clamp(round(x/scale) + zero_point, -128, 127)
pub fn quantize_tensor(t: &Tensor<f32>, p: QuantParams) -> QTensor {
    let data = t
        .data()
        .iter()
        .map(|&x| {
            let q = round_half_away(x as f64 / p.scale) + p.zero_point as f64;
            q.clamp(QMIN as f64, QMAX as f64) as i8
        })
        .collect();
    QTensor {
        shape: t.shape().to_vec(),
        data,
        params: p,
    }
}

/// x = (q - zero_point) * scale
pub fn dequantize_tensor(q: &QTensor) -> Tensor<f32> {
    let data: Vec<f32> = q
        .data
        .iter()
        .map(|&v| ((v as i32 - q.params.zero_point) as f64 * q.params.scale) as f32)
        .collect();
    Tensor::from_vec(&q.shape, data).expect("shape/data agree by construction")
}

/// Fixed-point multiplier: value ~= mantissa * 2^-shift with the mantissa
/// normalized into [2^30, 2^31).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    pub mantissa: i32,
    pub shift: i32,
}

pub fn requant_multiplier(m: f64) -> Result<Requant> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Config(format!(
            "requant multiplier must be positive and finite, got {m}"
        )));
    }
    let lo = (1u64 << 30) as f64;
    let hi = (1u64 << 31) as f64;
    let mut shift = 0i32;
    let mut v = m;
    while v < lo {
        v *= 2.0;
        shift += 1;
    }
    while v >= hi {
        v /= 2.0;
        shift -= 1;
    }
    let mut mantissa = v.round();
    if mantissa >= hi {
        mantissa /= 2.0;
        shift -= 1;
    }
    Ok(Requant {
        mantissa: mantissa as i32,
        shift,
    })
}

impl Requant {
    pub fn value(&self) -> f64 {
        self.mantissa as f64 * 2f64.powi(-self.shift)
    }

    /// Integer multiply + rounding right shift, round-half-away-from-zero.
    pub fn apply(&self, acc: i32) -> i32 {
        let prod = acc as i64 * self.mantissa as i64;
        let v = if self.shift <= 0 {
            prod << (-self.shift)
        } else {
            let half = 1i64 << (self.shift - 1);
            let mag = (prod.abs() + half) >> self.shift;
            if prod < 0 {
                -mag
            } else {
                mag
            }
        };
        debug_assert!(v >= i32::MIN as i64 && v <= i32::MAX as i64);
        v as i32
    }
}

/// One conv stage after BN folding: conv weights/bias plus what follows it.
#[derive(Debug, Clone)]
pub struct FusedBlock {
    pub conv: ConvLayer<f32>,
    pub activation: Option<ActivationKind>,
    pub pool: bool,
}

/// Folds each BN into the preceding convolution (inference statistics) and
/// groups conv/activation/pool runs into blocks.
pub fn fold_model(model: &Model) -> Result<Vec<FusedBlock>> {
    let mut blocks: Vec<FusedBlock> = Vec::new();
    for layer in &model.layers {
        match layer {
            Layer::Conv(l) => blocks.push(FusedBlock {
                conv: l.clone(),
                activation: None,
                pool: false,
            }),
            Layer::BatchNorm(bn) => {
                let block = blocks
                    .last_mut()
                    .ok_or_else(|| Error::Corrupt("batch norm without a conv".into()))?;
                let cout = block.conv.weights.shape()[0];
                let per = block.conv.weights.len() / cout;
                for co in 0..cout {
                    let inv_std =
                        1.0 / (bn.running_var.data()[co] as f64 + bn.epsilon as f64).sqrt();
                    let g = bn.gamma.data()[co] as f64 * inv_std;
                    for w in &mut block.conv.weights.data_mut()[co * per..(co + 1) * per] {
                        *w = (*w as f64 * g) as f32;
                    }
                    let b = block.conv.bias.data()[co] as f64;
                    block.conv.bias.data_mut()[co] =
                        ((b - bn.running_mean.data()[co] as f64) * g + bn.beta.data()[co] as f64)
                            as f32;
                }
            }
            Layer::Activation(k) => {
                let block = blocks
                    .last_mut()
                    .ok_or_else(|| Error::Corrupt("activation without a conv".into()))?;
                block.activation = Some(*k);
            }
            Layer::MaxPool(_) => {
                let block = blocks
                    .last_mut()
                    .ok_or_else(|| Error::Corrupt("pool without a conv".into()))?;
                block.pool = true;
            }
        }
    }
    Ok(blocks)
}

/// Float forward through the fused blocks, recording each block's
/// pre-activation min/max.
fn fused_trace(blocks: &[FusedBlock], input: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<(f64, f64)>)> {
    let pool = MaxPoolLayer::default();
    let mut x = input.clone();
    let mut ranges = Vec::with_capacity(blocks.len());
    for block in blocks {
        x = block.conv.forward(&x)?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in x.data() {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
        ranges.push((lo, hi));
        if let Some(k) = block.activation {
            x = k.forward(&x);
        }
        if block.pool {
            x = pool.forward(&x)?;
        }
    }
    Ok((x, ranges))
}

/// Observed activation ranges over a calibration set.
#[derive(Debug, Clone)]
pub struct CalibStats {
    pub input: (f64, f64),
    /// per fused block, pre-activation
    pub edges: Vec<(f64, f64)>,
    /// constant (max == min) edges that hit the scale floor path
    pub constant_edge_warnings: usize,
}

pub fn calibrate(model: &Model, images: &[Image]) -> Result<CalibStats> {
    if images.is_empty() {
        return Err(Error::RejectedInput(
            "calibration needs at least one image".into(),
        ));
    }
    let blocks = fold_model(model)?;
    let mut input = (f64::INFINITY, f64::NEG_INFINITY);
    let mut edges = vec![(f64::INFINITY, f64::NEG_INFINITY); blocks.len()];
    for img in images {
        let t = Image::batch_to_tensor(&[img])?;
        for &v in t.data() {
            input.0 = input.0.min(v as f64);
            input.1 = input.1.max(v as f64);
        }
        let (_, ranges) = fused_trace(&blocks, &t)?;
        for (acc, r) in edges.iter_mut().zip(ranges) {
            acc.0 = acc.0.min(r.0);
            acc.1 = acc.1.max(r.1);
        }
    }
    let constant_edge_warnings = std::iter::once(&input)
        .chain(edges.iter())
        .filter(|(lo, hi)| lo == hi)
        .count();
    Ok(CalibStats {
        input,
        edges,
        constant_edge_warnings,
    })
}

/// One integer conv stage: int8 weights, int32 bias at scale s_in*s_w, a
/// fixed-point requantizer into the output edge, then optional integer
/// activation and 2x2 max-pool.
#[derive(Debug, Clone)]
pub struct QConvLayer {
    pub weights: QTensor,
    pub bias: Vec<i32>,
    pub stride: usize,
    pub padding: usize,
    pub in_params: QuantParams,
    pub out_params: QuantParams,
    pub multiplier: Requant,
    pub activation: Option<ActivationKind>,
    pub pool: bool,
}

#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub grid_size: usize,
    pub input_params: QuantParams,
    pub layers: Vec<QConvLayer>,
    pub constant_edge_warnings: usize,
}

pub fn quantize_model(model: &Model, calib: &CalibStats) -> Result<QuantizedModel> {
    let blocks = fold_model(model)?;
    if blocks.len() != calib.edges.len() {
        return Err(Error::Usage(
            "calibration does not match the model structure".into(),
        ));
    }
    let input_params = QuantParams::affine(calib.input.0, calib.input.1);
    let mut in_params = input_params;
    let mut layers = Vec::with_capacity(blocks.len());
    for (block, &(lo, hi)) in blocks.iter().zip(&calib.edges) {
        let max_abs = block
            .conv
            .weights
            .data()
            .iter()
            .fold(0.0f64, |m, &w| m.max((w as f64).abs()));
        let wparams = QuantParams::symmetric(max_abs);
        let weights = quantize_tensor(&block.conv.weights, wparams);
        let bias_scale = in_params.scale * wparams.scale;
        let bias: Vec<i32> = block
            .conv
            .bias
            .data()
            .iter()
            .map(|&b| round_half_away(b as f64 / bias_scale) as i32)
            .collect();
        let out_params = QuantParams::affine(lo, hi);
        let multiplier = requant_multiplier(bias_scale / out_params.scale)?;
        layers.push(QConvLayer {
            weights,
            bias,
            stride: block.conv.stride,
            padding: block.conv.padding,
            in_params,
            out_params,
            multiplier,
            activation: block.activation,
            pool: block.pool,
        });
        in_params = out_params;
    }
    Ok(QuantizedModel {
        config: model.config.clone(),
        grid_size: model.grid_size,
        input_params,
        layers,
        constant_edge_warnings: calib.constant_edge_warnings,
    })
}

struct QFeature {
    data: Vec<i8>,
    c: usize,
    h: usize,
    w: usize,
}

fn integer_activation(kind: ActivationKind, q: i32, zp: i32) -> i32 {
    match kind {
        ActivationKind::Identity => q,
        ActivationKind::Relu => q.max(zp),
        ActivationKind::LeakyRelu { alpha } => {
            if q >= zp {
                q
            } else {
                zp + round_half_away(alpha * (q - zp) as f64) as i32
            }
        }
    }
}

fn qconv_forward(layer: &QConvLayer, x: &QFeature) -> QFeature {
    let ws = &layer.weights.shape;
    let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (oh, ow) = (
        (x.h + 2 * layer.padding - kh) / layer.stride + 1,
        (x.w + 2 * layer.padding - kw) / layer.stride + 1,
    );
    let zp_in = layer.in_params.zero_point;
    let zp_out = layer.out_params.zero_point;
    let mut out = vec![0i8; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = layer.bias[co] as i64;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * layer.stride + ky) as isize - layer.padding as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue; // zero pad: q == zp_in contributes nothing
                        }
                        let wrow = ((co * cin + ci) * kh + ky) * kw;
                        let xrow = (ci * x.h + iy as usize) * x.w;
                        for kx in 0..kw {
                            let ix = (ox * layer.stride + kx) as isize - layer.padding as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let wv = layer.weights.data[wrow + kx] as i64;
                            let xv = x.data[xrow + ix as usize] as i64 - zp_in as i64;
                            acc += wv * xv;
                        }
                    }
                }
                debug_assert!(acc >= i32::MIN as i64 && acc <= i32::MAX as i64);
                let mut q = layer.multiplier.apply(acc as i32) + zp_out;
                q = q.clamp(QMIN, QMAX);
                if let Some(k) = layer.activation {
                    q = integer_activation(k, q, zp_out);
                }
                out[(co * oh + oy) * ow + ox] = q as i8;
            }
        }
    }
    QFeature {
        data: out,
        c: cout,
        h: oh,
        w: ow,
    }
}

fn qpool_forward(x: &QFeature) -> QFeature {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = vec![0i8; x.c * oh * ow];
    for c in 0..x.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = i8::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data[(c * x.h + oy * 2 + dy) * x.w + ox * 2 + dx]);
                    }
                }
                out[(c * oh + oy) * ow + ox] = m;
            }
        }
    }
    QFeature {
        data: out,
        c: x.c,
        h: oh,
        w: ow,
    }
}

/// Pure-integer inference; only the head output is dequantized to reals.
/// The image must already be at the model input size.
pub fn quantized_forward(qm: &QuantizedModel, img: &Image) -> Result<GridPrediction> {
    let target = qm.config.input_size;
    if img.width != target || img.height != target {
        return Err(Error::RejectedInput(format!(
            "expected a {target}x{target} input, got {}x{}",
            img.width, img.height
        )));
    }
    let t = Image::batch_to_tensor(&[img])?;
    let qin = quantize_tensor(&t, qm.input_params);
    let mut x = QFeature {
        data: qin.data,
        c: 3,
        h: target,
        w: target,
    };
    for layer in &qm.layers {
        x = qconv_forward(layer, &x);
        if layer.pool {
            x = qpool_forward(&x);
        }
    }
    let head = qm.layers.last().expect("model has layers");
    let zp = head.out_params.zero_point;
    let scale = head.out_params.scale;
    let data: Vec<f32> = x
        .data
        .iter()
        .map(|&v| ((v as i32 - zp) as f64 * scale) as f32)
        .collect();
    let nchw = Tensor::from_vec(&[1, x.c, x.h, x.w], data)?;
    Ok(GridPrediction {
        raw: nchw_to_nhwc(&nchw),
        grid_size: qm.grid_size,
        boxes_per_cell: qm.config.boxes_per_cell,
        num_classes: qm.config.num_classes,
    })
}

/// Parameter payload sizes in bytes: float (32-bit params) vs quantized
/// (8-bit weights, 32-bit biases, plus the textual params table).
pub fn payload_sizes(model: &Model, qm: &QuantizedModel) -> (usize, usize) {
    let float_bytes = model.count_params() * 4;
    let mut quant_bytes = 0usize;
    for l in &qm.layers {
        quant_bytes += l.weights.data.len() + l.bias.len() * 4;
        // edge id + scale + zero point + scheme + multiplier line
        quant_bytes += 64;
    }
    quant_bytes += 64; // input edge
    (float_bytes, quant_bytes)
}

/// Per-cell argmax class agreement plus head deviation statistics between
/// two raw grid predictions of identical shape.
pub fn head_deviation(a: &GridPrediction, b: &GridPrediction) -> (f64, f64, f64) {
    assert_eq!(a.raw.shape(), b.raw.shape());
    let mut max_dev = 0.0f64;
    let mut sum_dev = 0.0f64;
    for (&x, &y) in a.raw.data().iter().zip(b.raw.data()) {
        let d = (x as f64 - y as f64).abs();
        max_dev = max_dev.max(d);
        sum_dev += d;
    }
    let mean_dev = sum_dev / a.raw.len() as f64;
    let ch = a.boxes_per_cell * 5 + a.num_classes;
    let cells = a.raw.len() / ch;
    let mut agree = 0usize;
    for cell in 0..cells {
        let base = cell * ch + a.boxes_per_cell * 5;
        let arg = |p: &GridPrediction| {
            p.raw.data()[base..base + a.num_classes]
                .iter()
                .enumerate()
                .fold((0usize, f32::NEG_INFINITY), |acc, (i, &v)| {
                    if v > acc.1 {
                        (i, v)
                    } else {
                        acc
                    }
                })
                .0
        };
        if arg(a) == arg(b) {
            agree += 1;
        }
    }
    (max_dev, mean_dev, agree as f64 / cells as f64)
}

#[derive(Debug, Clone)]
pub struct FidelityReport {
    pub max_abs_dev: f64,
    pub mean_abs_dev: f64,
    /// fraction of grid cells whose argmax class matches
    pub top1_agreement: f64,
    /// fraction of probe images whose post-NMS detections match at IoU 0.9
    pub detection_match_rate: f64,
    pub size_ratio: f64,
    /// median seconds per image over >= 30 timed runs
    pub latency_float: f64,
    pub latency_quant: f64,
    pub probes: usize,
}

impl FidelityReport {
    pub fn render(&self) -> String {
        format!(
            "probes: {}\nmax_abs_dev: {:.6}\nmean_abs_dev: {:.6}\ntop1_agreement: {:.4}\n\
             detection_match_rate: {:.4}\nsize_ratio: {:.4}\nlatency_float_ms: {:.3}\n\
             latency_quant_ms: {:.3}\nspeedup: {:.2}x\n",
            self.probes,
            self.max_abs_dev,
            self.mean_abs_dev,
            self.top1_agreement,
            self.detection_match_rate,
            self.size_ratio,
            self.latency_float * 1e3,
            self.latency_quant * 1e3,
            self.latency_float / self.latency_quant.max(1e-12),
        )
    }
}

fn detections_match(
    a: &GridPrediction,
    b: &GridPrediction,
    target: usize,
    cfg: &DecodeConfig,
) -> bool {
    let t = crate::imaging::LetterboxTransform::IDENTITY;
    let da = nms(
        &decode(a, 0, &t, target, target, target, cfg),
        cfg.nms_iou_thresh,
        cfg.max_detections,
    );
    let db = nms(
        &decode(b, 0, &t, target, target, target, cfg),
        cfg.nms_iou_thresh,
        cfg.max_detections,
    );
    if da.len() != db.len() {
        return false;
    }
    let mut used = vec![false; db.len()];
    for d in &da {
        let hit = db.iter().enumerate().position(|(i, e)| {
            !used[i] && e.class_id == d.class_id && iou(e.bbox, d.bbox) >= 0.9
        });
        match hit {
            Some(i) => used[i] = true,
            None => return false,
        }
    }
    true
}

/// Runs both paths over the probes and reports deviation, agreement, size
/// and latency. Latency medians come from at least 30 timed runs per path
/// (probes are cycled if fewer are given).
pub fn fidelity_report(
    model: &Model,
    qm: &QuantizedModel,
    probes: &[Image],
) -> Result<FidelityReport> {
    if probes.is_empty() {
        return Err(Error::RejectedInput("fidelity needs probe images".into()));
    }
    let target = model.config.input_size;
    let decode_cfg = DecodeConfig::default();
    let mut max_dev = 0.0f64;
    let mut mean_sum = 0.0f64;
    let mut top1_sum = 0.0f64;
    let mut det_match = 0usize;
    for img in probes {
        let t = Image::batch_to_tensor(&[img])?;
        let fp = model.forward(&t)?;
        let qp = quantized_forward(qm, img)?;
        let (mx, mean, top1) = head_deviation(&fp, &qp);
        max_dev = max_dev.max(mx);
        mean_sum += mean;
        top1_sum += top1;
        if detections_match(&fp, &qp, target, &decode_cfg) {
            det_match += 1;
        }
    }
    let runs = 30usize.max(probes.len());
    let mut float_times = Vec::with_capacity(runs);
    let mut quant_times = Vec::with_capacity(runs);
    for i in 0..runs {
        let img = &probes[i % probes.len()];
        let t = Image::batch_to_tensor(&[img])?;
        let start = Instant::now();
        model.forward(&t)?;
        float_times.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        quantized_forward(qm, img)?;
        quant_times.push(start.elapsed().as_secs_f64());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let (float_bytes, quant_bytes) = payload_sizes(model, qm);
    Ok(FidelityReport {
        max_abs_dev: max_dev,
        mean_abs_dev: mean_sum / probes.len() as f64,
        top1_agreement: top1_sum / probes.len() as f64,
        detection_match_rate: det_match as f64 / probes.len() as f64,
        size_ratio: quant_bytes as f64 / float_bytes as f64,
        latency_float: median(&mut float_times),
        latency_quant: median(&mut quant_times),
        probes: probes.len(),
    })
}

const QCHECKPOINT_FORMAT_VERSION: u32 = 1;

impl QuantizedModel {
    /// Text manifest (config, per-edge params with 9-significant-digit
    /// scales, multipliers), then raw int8 weight and int32 bias payloads.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "format_version={QCHECKPOINT_FORMAT_VERSION}")?;
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
        writeln!(f, "constant_edge_warnings={}", self.constant_edge_warnings)?;
        let edge = |p: &QuantParams| {
            format!(
                "{:.8e}\t{}\t{}",
                p.scale,
                p.zero_point,
                match p.scheme {
                    QScheme::Symmetric => "symmetric",
                    QScheme::Affine => "affine",
                }
            )
        };
        writeln!(f, "edge\tinput\t{}", edge(&self.input_params))?;
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(f, "edge\tlayer{i}\t{}", edge(&l.out_params))?;
            writeln!(f, "weights\tlayer{i}\t{}", edge(&l.weights.params))?;
            writeln!(
                f,
                "mult\tlayer{i}\t{}\t{}",
                l.multiplier.mantissa, l.multiplier.shift
            )?;
            writeln!(
                f,
                "layer\tlayer{i}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                l.weights.shape[0],
                l.weights.shape[1],
                l.weights.shape[2],
                l.weights.shape[3],
                l.stride,
                l.padding,
                l.activation.map(activation_word).unwrap_or_else(|| "none".into()),
                if l.pool { 1 } else { 0 },
            )?;
        }
        writeln!(f, "---")?;
        for l in &self.layers {
            let bytes: Vec<u8> = l.weights.data.iter().map(|&v| v as u8).collect();
            f.write_all(&bytes)?;
            for b in &l.bias {
                f.write_all(&b.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<QuantizedModel> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut config = ModelConfig::default();
        let mut input_params = None;
        let mut warnings = 0usize;
        struct Pending {
            out_params: Option<QuantParams>,
            wparams: Option<QuantParams>,
            mult: Option<Requant>,
            shape: Vec<usize>,
            stride: usize,
            padding: usize,
            activation: Option<ActivationKind>,
            pool: bool,
        }
        let mut pendings: Vec<Pending> = Vec::new();
        let bad = |m: &str| Error::Corrupt(m.into());
        loop {
            let mut line = String::new();
            if f.read_line(&mut line)? == 0 {
                return Err(bad("missing payload separator"));
            }
            let line = line.trim_end();
            if line == "---" {
                break;
            }
            let parse_params = |fields: &[&str]| -> Result<QuantParams> {
                if fields.len() != 3 {
                    return Err(bad("malformed quant params"));
                }
                let p = QuantParams {
                    scale: fields[0].parse().map_err(|_| bad("bad scale"))?,
                    zero_point: fields[1].parse().map_err(|_| bad("bad zero point"))?,
                    scheme: match fields[2] {
                        "symmetric" => QScheme::Symmetric,
                        "affine" => QScheme::Affine,
                        _ => return Err(bad("unknown scheme")),
                    },
                };
                p.validate()?;
                Ok(p)
            };
            let ensure_layer = |pendings: &mut Vec<Pending>, name: &str| -> Result<usize> {
                let idx: usize = name
                    .strip_prefix("layer")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad layer id"))?;
                while pendings.len() <= idx {
                    pendings.push(Pending {
                        out_params: None,
                        wparams: None,
                        mult: None,
                        shape: Vec::new(),
                        stride: 1,
                        padding: 0,
                        activation: None,
                        pool: false,
                    });
                }
                Ok(idx)
            };
            if let Some(rest) = line.strip_prefix("edge\t") {
                let fields: Vec<&str> = rest.split('\t').collect();
                if fields[0] == "input" {
                    input_params = Some(parse_params(&fields[1..])?);
                } else {
                    let idx = ensure_layer(&mut pendings, fields[0])?;
                    pendings[idx].out_params = Some(parse_params(&fields[1..])?);
                }
            } else if let Some(rest) = line.strip_prefix("weights\t") {
                let fields: Vec<&str> = rest.split('\t').collect();
                let idx = ensure_layer(&mut pendings, fields[0])?;
                pendings[idx].wparams = Some(parse_params(&fields[1..])?);
            } else if let Some(rest) = line.strip_prefix("mult\t") {
                let fields: Vec<&str> = rest.split('\t').collect();
                if fields.len() != 3 {
                    return Err(bad("malformed multiplier"));
                }
                let idx = ensure_layer(&mut pendings, fields[0])?;
                pendings[idx].mult = Some(Requant {
                    mantissa: fields[1].parse().map_err(|_| bad("bad mantissa"))?,
                    shift: fields[2].parse().map_err(|_| bad("bad shift"))?,
                });
            } else if let Some(rest) = line.strip_prefix("layer\t") {
                let fields: Vec<&str> = rest.split('\t').collect();
                if fields.len() != 9 {
                    return Err(bad("malformed layer line"));
                }
                let idx = ensure_layer(&mut pendings, fields[0])?;
                let num = |s: &str| -> Result<usize> {
                    s.parse().map_err(|_| bad("bad layer field"))
                };
                pendings[idx].shape =
                    vec![num(fields[1])?, num(fields[2])?, num(fields[3])?, num(fields[4])?];
                pendings[idx].stride = num(fields[5])?;
                pendings[idx].padding = num(fields[6])?;
                pendings[idx].activation = parse_activation_word(fields[7])?;
                pendings[idx].pool = fields[8] == "1";
            } else if let Some((key, value)) = line.split_once('=') {
                match key {
                    "format_version" => {
                        let v: u32 = value.parse().map_err(|_| bad("bad version"))?;
                        if v != QCHECKPOINT_FORMAT_VERSION {
                            return Err(bad("unsupported checkpoint version"));
                        }
                    }
                    "input_size" => config.input_size = value.parse().map_err(|_| bad("bad input_size"))?,
                    "boxes_per_cell" => {
                        config.boxes_per_cell = value.parse().map_err(|_| bad("bad boxes_per_cell"))?
                    }
                    "num_classes" => {
                        config.num_classes = value.parse().map_err(|_| bad("bad num_classes"))?
                    }
                    "stage_channels" => {
                        config.stage_channels = value
                            .split(',')
                            .map(|s| s.parse().map_err(|_| bad("bad stage_channels")))
                            .collect::<Result<_>>()?
                    }
                    "constant_edge_warnings" => {
                        warnings = value.parse().map_err(|_| bad("bad warnings count"))?
                    }
                    _ => return Err(bad("unknown manifest key")),
                }
            } else {
                return Err(bad("unrecognized manifest line"));
            }
        }
        let input_params = input_params.ok_or_else(|| bad("missing input edge"))?;
        let mut in_params = input_params;
        let mut layers = Vec::with_capacity(pendings.len());
        for p in pendings {
            let wparams = p.wparams.ok_or_else(|| bad("missing weight params"))?;
            let out_params = p.out_params.ok_or_else(|| bad("missing edge params"))?;
            let mult = p.mult.ok_or_else(|| bad("missing multiplier"))?;
            if p.shape.len() != 4 {
                return Err(bad("missing layer geometry"));
            }
            let n: usize = p.shape.iter().product();
            let mut wbytes = vec![0u8; n];
            f.read_exact(&mut wbytes).map_err(|_| bad("truncated weights"))?;
            let mut bias = vec![0i32; p.shape[0]];
            for b in &mut bias {
                let mut buf = [0u8; 4];
                f.read_exact(&mut buf).map_err(|_| bad("truncated bias"))?;
                *b = i32::from_le_bytes(buf);
            }
            layers.push(QConvLayer {
                weights: QTensor {
                    shape: p.shape,
                    data: wbytes.iter().map(|&v| v as i8).collect(),
                    params: wparams,
                },
                bias,
                stride: p.stride,
                padding: p.padding,
                in_params,
                out_params,
                multiplier: mult,
                activation: p.activation,
                pool: p.pool,
            });
            in_params = out_params;
        }
        if layers.is_empty() {
            return Err(bad("checkpoint has no layers"));
        }
        let grid_size = config.grid_size()?;
        Ok(QuantizedModel {
            config,
            grid_size,
            input_params,
            layers,
            constant_edge_warnings: warnings,
        })
    }
}

fn activation_word(kind: ActivationKind) -> String {
    match kind {
        ActivationKind::LeakyRelu { alpha } => format!("leaky_relu:{alpha}"),
        ActivationKind::Relu => "relu".into(),
        ActivationKind::Identity => "identity".into(),
    }
}

fn parse_activation_word(s: &str) -> Result<Option<ActivationKind>> {
    if s == "none" {
        return Ok(None);
    }
    if let Some(alpha) = s.strip_prefix("leaky_relu:") {
        return Ok(Some(ActivationKind::LeakyRelu {
            alpha: alpha
                .parse()
                .map_err(|_| Error::Corrupt("bad leaky_relu alpha".into()))?,
        }));
    }
    match s {
        "relu" => Ok(Some(ActivationKind::Relu)),
        "identity" => Ok(Some(ActivationKind::Identity)),
        _ => Err(Error::Corrupt(format!("unknown activation {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::build_model;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_weight_scale() {
        let p = QuantParams::symmetric(1.0);
        assert!((p.scale - 1.0 / 127.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 0);
        p.validate().unwrap();
    }

    #[test]
    fn affine_activation_params() {
        let p = QuantParams::affine(0.0, 2.55);
        assert!((p.scale - 0.01).abs() < 1e-12);
        assert_eq!(p.zero_point, -128);
        p.validate().unwrap();
    }

    #[test]
    fn zero_quantizes_to_zero_point() {
        let p = QuantParams::affine(0.0, 2.55);
        let t = Tensor::from_vec(&[1], vec![0.0f32]).unwrap();
        let q = quantize_tensor(&t, p);
        assert_eq!(q.data[0], -128);
        assert_eq!(dequantize_tensor(&q).data()[0], 0.0);
    }

    #[test]
    fn round_trip_bound_and_clamp() {
        let p = QuantParams::affine(-1.0, 1.0);
        let xs = [-1.0f32, -0.37, 0.0, 0.5, 0.999, 1.0];
        let t = Tensor::from_vec(&[xs.len()], xs.to_vec()).unwrap();
        let back = dequantize_tensor(&quantize_tensor(&t, p));
        for (&x, &y) in xs.iter().zip(back.data()) {
            // small slack for f32 rounding of the dequantized value
            assert!((x as f64 - y as f64).abs() <= p.scale / 2.0 + 1e-7);
        }
        // out of range clamps to the saturation value
        let t = Tensor::from_vec(&[1], vec![5.0f32]).unwrap();
        let q = quantize_tensor(&t, p);
        assert_eq!(q.data[0], 127);
    }

    #[test]
    fn multiplier_half() {
        let r = requant_multiplier(0.5).unwrap();
        assert_eq!(r.mantissa, 1 << 30);
        assert_eq!(r.shift, 31);
        let v = r.value();
        assert!(v >= 0.5 * (1.0 - 2f64.powi(-30)) && v <= 0.5 * (1.0 + 2f64.powi(-30)));
        assert_eq!(r.apply(10), 5);
        assert_eq!(r.apply(-10), -5);
        // half away from zero
        assert_eq!(r.apply(3), 2);
        assert_eq!(r.apply(-3), -2);
    }

    #[test]
    fn multiplier_mantissa_normalized() {
        for &m in &[0.001, 0.3, 0.9999, 1.0, 7.5, 123.456] {
            let r = requant_multiplier(m).unwrap();
            assert!(r.mantissa as i64 >= 1 << 30 && (r.mantissa as i64) < 1 << 31);
            assert!((r.value() - m).abs() / m < 1e-9);
        }
        assert!(requant_multiplier(0.0).is_err());
    }

    #[test]
    fn integer_leaky_matches_definition() {
        let k = ActivationKind::LeakyRelu { alpha: 0.1 };
        assert_eq!(integer_activation(k, 50, -10), 50);
        // below zp: zp + round(0.1 * (q - zp))
        assert_eq!(integer_activation(k, -110, -10), -20);
        assert_eq!(integer_activation(k, -14, -10), -10); // round(-0.4) = 0
    }

    fn trained_like_model() -> Model {
        // an untrained but BN-active model: run a few forward_train passes so
        // running stats are non-trivial before folding
        let mut model = build_model(&ModelConfig {
            input_size: 32,
            num_classes: 5,
            stage_channels: vec![6, 8],
            ..ModelConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let mut t = Tensor::zeros(&[2, 3, 32, 32]);
            for v in t.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            model.forward_train(&t).unwrap();
        }
        model
    }

    #[test]
    fn folding_preserves_float_inference() {
        let model = trained_like_model();
        let blocks = fold_model(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tensor::zeros(&[1, 3, 32, 32]);
        for v in t.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let direct = model.forward(&t).unwrap();
        let (fused, _) = fused_trace(&blocks, &t).unwrap();
        let fused = nchw_to_nhwc(&fused);
        for (&a, &b) in direct.raw.data().iter().zip(fused.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    fn probe_images(n: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut img = Image::new(32, 32);
                for v in img.data.iter_mut() {
                    *v = rng.gen_range(0.0..1.0);
                }
                img
            })
            .collect()
    }

    #[test]
    fn quantized_path_tracks_float_path() {
        let model = trained_like_model();
        let calib = calibrate(&model, &probe_images(8, 21)).unwrap();
        let qm = quantize_model(&model, &calib).unwrap();
        let probes = probe_images(4, 22);
        let head_range = calib.edges.last().map(|(lo, hi)| hi - lo).unwrap();
        for img in &probes {
            let t = Image::batch_to_tensor(&[img]).unwrap();
            let fp = model.forward(&t).unwrap();
            let qp = quantized_forward(&qm, img).unwrap();
            let (max_dev, _, _) = head_deviation(&fp, &qp);
            assert!(
                max_dev <= 0.1 * head_range,
                "max_dev {max_dev} vs range {head_range}"
            );
        }
    }

    #[test]
    fn integer_path_is_deterministic() {
        let model = trained_like_model();
        let calib = calibrate(&model, &probe_images(4, 31)).unwrap();
        let qm = quantize_model(&model, &calib).unwrap();
        let img = &probe_images(1, 32)[0];
        let a = quantized_forward(&qm, img).unwrap();
        let b = quantized_forward(&qm, img).unwrap();
        assert_eq!(a.raw.data(), b.raw.data());
    }

    #[test]
    fn payload_ratio_small() {
        // needs realistic weight counts; tiny stages are metadata-dominated
        let model = build_model(&ModelConfig {
            input_size: 32,
            num_classes: 10,
            stage_channels: vec![8, 16, 16],
            ..ModelConfig::default()
        })
        .unwrap();
        let calib = calibrate(&model, &probe_images(2, 41)).unwrap();
        let qm = quantize_model(&model, &calib).unwrap();
        let (fb, qb) = payload_sizes(&model, &qm);
        assert!((qb as f64) / (fb as f64) <= 0.30, "{qb}/{fb}");
    }

    #[test]
    fn identical_predictions_have_zero_deviation() {
        let model = trained_like_model();
        let t = Image::batch_to_tensor(&[&probe_images(1, 51)[0]]).unwrap();
        let p = model.forward(&t).unwrap();
        let (max_dev, mean_dev, top1) = head_deviation(&p, &p);
        assert_eq!(max_dev, 0.0);
        assert_eq!(mean_dev, 0.0);
        assert_eq!(top1, 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = trained_like_model();
        let calib = calibrate(&model, &probe_images(3, 61)).unwrap();
        let qm = quantize_model(&model, &calib).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qckpt");
        qm.save(&path).unwrap();
        let loaded = QuantizedModel::load(&path).unwrap();
        let img = &probe_images(1, 62)[0];
        let a = quantized_forward(&qm, img).unwrap();
        let b = quantized_forward(&loaded, img).unwrap();
        // scales travel as 9-significant-digit decimals, so the dequantized
        // head may differ in the last ulp; the integer path itself is exact
        for (&x, &y) in a.raw.data().iter().zip(b.raw.data()) {
            assert!((x as f64 - y as f64).abs() <= 1e-5 * (x as f64).abs().max(1.0));
        }
    }

    #[test]
    fn calibration_replay_in_range() {
        let model = trained_like_model();
        let imgs = probe_images(6, 71);
        let calib = calibrate(&model, &imgs).unwrap();
        let qm = quantize_model(&model, &calib).unwrap();
        // replaying the calibration set: every observed activation fits its
        // edge's representable float range
        let blocks = fold_model(&model).unwrap();
        for img in &imgs {
            let t = Image::batch_to_tensor(&[img]).unwrap();
            let (_, ranges) = fused_trace(&blocks, &t).unwrap();
            for (r, l) in ranges.iter().zip(&qm.layers) {
                let p = l.out_params;
                let lo = (QMIN - p.zero_point) as f64 * p.scale;
                let hi = (QMAX - p.zero_point) as f64 * p.scale;
                assert!(r.0 >= lo - p.scale && r.1 <= hi + p.scale);
            }
        }
    }

    #[test]
    fn constant_edge_counted() {
        let model = trained_like_model();
        let imgs = vec![Image::filled(32, 32, 0.25)];
        let calib = calibrate(&model, &imgs).unwrap();
        // a constant image makes the input edge (and every conv output over a
        // single constant image) constant
        assert!(calib.constant_edge_warnings >= 1);
        quantize_model(&model, &calib).unwrap();
    }

    #[test]
    fn quantize_monotonicity() {
        let p = QuantParams::affine(-2.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut xs: Vec<f32> = (0..512).map(|_| rng.gen_range(-3.0..4.0)).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let t = Tensor::from_vec(&[xs.len()], xs).unwrap();
        let q = quantize_tensor(&t, p);
        for w in q.data.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }
}
