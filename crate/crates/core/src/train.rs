//! Composite detection loss (box/object/class), the SGD training loop with
//! step-decay schedule, and the four-configuration ablation harness.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::AnnotatedImage;
use crate::detector::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::imaging::{apply_augment, sample_augment_params, AugmentConfig, Image, LabeledBox};
use crate::nn::ActivationKind;
use crate::pipeline::{evaluate_model, PipelineConfig};
use crate::postprocess::sigmoid;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub finetune_lr: f64,
    pub lambda_box: f64,
    pub lambda_obj: f64,
    pub lambda_noobj: f64,
    pub lambda_cls: f64,
    pub augment_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            batch_size: 32,
            epochs: 50,
            decay_epoch: 30,
            decay_factor: 0.1,
            finetune_lr: 0.0001,
            lambda_box: 5.0,
            lambda_obj: 1.0,
            lambda_noobj: 0.5,
            lambda_cls: 1.0,
            augment_enabled: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must be in (0,1]".into()));
        }
        if self.decay_epoch >= self.epochs {
            return Err(Error::Config("decay_epoch must be < epochs".into()));
        }
        if [
            self.lambda_box,
            self.lambda_obj,
            self.lambda_noobj,
            self.lambda_cls,
        ]
        .iter()
        .any(|l| *l < 0.0)
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Scratch,
    Finetune,
}

/// Step schedule: scratch mode decays once after `decay_epoch`; fine-tune
/// mode holds a constant cautious rate.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig, mode: TrainMode) -> f64 {
    match mode {
        TrainMode::Scratch => {
            if epoch < cfg.decay_epoch {
                cfg.lr0
            } else {
                cfg.lr0 * cfg.decay_factor
            }
        }
        TrainMode::Finetune => cfg.finetune_lr,
    }
}

/// Target tensor plus the per-cell responsibility mask.
#[derive(Debug, Clone)]
pub struct Targets<F: Scalar = f32> {
    /// [N, S, S, B*5 + C], sigma-space box targets in responsible slots
    pub tensor: Tensor<F>,
    /// one flag per (n, cy, cx) cell
    pub responsible: Vec<bool>,
    pub responsible_count: usize,
    /// objects dropped because another object already owned their cell
    pub collisions: usize,
}

/// The cell containing each object's center becomes responsible for it;
/// later objects whose centers land in an occupied cell are dropped and
/// counted.
pub fn assign_targets<F: Scalar>(
    annotations: &[&[LabeledBox]],
    s: usize,
    b: usize,
    c: usize,
) -> Targets<F> {
    let n = annotations.len();
    let ch = b * 5 + c;
    let mut tensor = Tensor::zeros(&[n, s, s, ch]);
    let mut responsible = vec![false; n * s * s];
    let mut collisions = 0;
    let mut count = 0;
    for (img, boxes) in annotations.iter().enumerate() {
        for bx in boxes.iter() {
            let cell_x = ((bx.cx * s as f64).floor() as usize).min(s - 1);
            let cell_y = ((bx.cy * s as f64).floor() as usize).min(s - 1);
            let cell = (img * s + cell_y) * s + cell_x;
            if responsible[cell] {
                collisions += 1;
                continue;
            }
            responsible[cell] = true;
            count += 1;
            let base = cell * ch;
            let t = tensor.data_mut();
            t[base] = F::from_f64(bx.cx * s as f64 - cell_x as f64);
            t[base + 1] = F::from_f64(bx.cy * s as f64 - cell_y as f64);
            t[base + 2] = F::from_f64(bx.w);
            t[base + 3] = F::from_f64(bx.h);
            t[base + 4] = F::one();
            t[base + b * 5 + bx.class_id] = F::one();
        }
    }
    Targets {
        tensor,
        responsible,
        responsible_count: count,
        collisions,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    /// unweighted per-slot sigma-space MSE, summed over responsible slots
    pub box_: f64,
    /// weighted objectness BCE, summed over all slots
    pub obj: f64,
    /// unweighted softmax cross-entropy, summed over responsible slots
    pub cls: f64,
    pub total: f64,
}

const PROB_FLOOR: f64 = 1e-7;

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Composite loss and its gradient w.r.t. the raw prediction logits.
///
/// box: squared error on the four sigmoid box outputs, summed over
/// responsible slots; obj: BCE on sigmoid objectness summed over all slots
/// (positives weighted lambda_obj, negatives lambda_noobj); cls: softmax
/// cross-entropy summed over responsible slots. Slot-wise sums keep the
/// per-sample gradient contribution independent of the batch size.
pub fn yolo_loss<F: Scalar>(
    pred: &Tensor<F>,
    targets: &Targets<F>,
    cfg: &TrainConfig,
) -> (LossBreakdown, Tensor<F>) {
    let shape = pred.shape();
    assert_eq!(shape, targets.tensor.shape(), "pred/target shape mismatch");
    let (n, s, ch) = (shape[0], shape[1], shape[3]);
    let c = ch - 5; // B = 1 slot layout

    let mut grad = Tensor::zeros(shape);
    let mut box_sum = 0.0;
    let mut obj_pos = 0.0;
    let mut obj_neg = 0.0;
    let mut cls_sum = 0.0;

    for cell in 0..n * s * s {
        let base = cell * ch;
        let p = &pred.data()[base..base + ch];
        let t = &targets.tensor.data()[base..base + ch];
        let g = &mut grad.data_mut()[base..base + ch];
        let resp = targets.responsible[cell];

        // objectness
        let obj_logit = p[4].to_f64();
        let sp = sigmoid(obj_logit);
        let y = if resp { 1.0 } else { 0.0 };
        let (lambda, bucket) = if resp {
            (cfg.lambda_obj, &mut obj_pos)
        } else {
            (cfg.lambda_noobj, &mut obj_neg)
        };
        *bucket += bce(sp, y);
        g[4] = F::from_f64(lambda * (sp - y));

        if !resp {
            continue;
        }
        // box regression in sigma space
        for k in 0..4 {
            let sv = sigmoid(p[k].to_f64());
            let tv = t[k].to_f64();
            let d = sv - tv;
            box_sum += d * d;
            g[k] = F::from_f64(cfg.lambda_box * 2.0 * d * sv * (1.0 - sv));
        }
        // classification
        let logits: Vec<f64> = p[5..5 + c].iter().map(|v| <F as Scalar>::to_f64(*v)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for k in 0..c {
            let prob = exps[k] / z;
            let y = t[5 + k].to_f64();
            if y > 0.0 {
                cls_sum += -(prob.max(PROB_FLOOR)).ln() * y;
            }
            g[5 + k] = F::from_f64(cfg.lambda_cls * (prob - y));
        }
    }

    let obj = cfg.lambda_obj * obj_pos + cfg.lambda_noobj * obj_neg;
    let breakdown = LossBreakdown {
        box_: box_sum,
        obj,
        cls: cls_sum,
        total: cfg.lambda_box * box_sum + obj + cfg.lambda_cls * cls_sum,
    };
    (breakdown, grad)
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val: Option<(f64, f64, f64)>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub collisions: usize,
    pub epochs_to_converge: Option<usize>,
}

impl TrainLog {
    /// epoch,lr,box,obj,cls,total,val_map,val_p,val_r
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,box,obj,cls,total,val_map,val_p,val_r\n");
        for r in &self.rows {
            let val = r
                .val
                .map(|(m, p, rc)| format!("{m:.6},{p:.6},{rc:.6}"))
                .unwrap_or_else(|| ",,".into());
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.epoch, r.lr, r.loss.box_, r.loss.obj, r.loss.cls, r.loss.total, val
            ));
        }
        out
    }

    fn finalize_convergence(&mut self) {
        let min_total = self
            .rows
            .iter()
            .map(|r| r.loss.total)
            .fold(f64::INFINITY, f64::min);
        self.epochs_to_converge = self
            .rows
            .iter()
            .position(|r| r.loss.total < 1.05 * min_total)
            .map(|i| i + 1);
    }
}

/// Everything the trainer consumes.
pub struct TrainData<'a> {
    pub train: &'a [AnnotatedImage],
    /// when present, per-epoch validation mAP/precision/recall are logged
    pub val: Option<&'a [AnnotatedImage]>,
    pub augment: AugmentConfig,
}

fn derive_rng(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    let mix = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(sample as u64);
    ChaCha8Rng::seed_from_u64(mix)
}

/// Plain SGD training with deterministic epoch-wise shuffling and optional
/// per-sample augmentation.
pub fn train(
    model: Model,
    data: &TrainData,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<(Model, TrainLog)> {
    train_with_progress(model, data, cfg, mode, |_| {})
}

/// As `train`, invoking the callback after every completed epoch.
pub fn train_with_progress(
    mut model: Model,
    data: &TrainData,
    cfg: &TrainConfig,
    mode: TrainMode,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::RejectedInput("training set is empty".into()));
    }
    if cfg.batch_size > data.train.len() {
        return Err(Error::RejectedInput(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            data.train.len()
        )));
    }
    let s = model.grid_size;
    let b = model.config.boxes_per_cell;
    let c = model.config.num_classes;
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg, mode) as f32;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut shuffle_rng = derive_rng(cfg.seed, epoch, usize::MAX);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }

        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // augment (or pass through) each sample, deterministically
            let mut images: Vec<Image> = Vec::with_capacity(chunk.len());
            let mut boxes: Vec<Vec<LabeledBox>> = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = &data.train[idx];
                if cfg.augment_enabled {
                    let mut rng = derive_rng(cfg.seed, epoch, idx);
                    let draw = sample_augment_params(&data.augment, &mut rng);
                    let (img, bs) = apply_augment(&sample.image, &sample.boxes, &draw);
                    images.push(img);
                    boxes.push(bs);
                } else {
                    images.push(sample.image.clone());
                    boxes.push(sample.boxes.clone());
                }
            }
            let refs: Vec<&Image> = images.iter().collect();
            let input = Image::batch_to_tensor(&refs)?;
            let ann: Vec<&[LabeledBox]> = boxes.iter().map(|v| v.as_slice()).collect();
            let targets = assign_targets::<f32>(&ann, s, b, c);
            log.collisions += targets.collisions;

            let (pred, ctxs) = model.forward_train(&input)?;
            let (loss, d_pred) = yolo_loss(&pred.raw, &targets, cfg);
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let grads = model.backward(&ctxs, &d_pred)?;
            model.sgd_step(&grads, lr);

            sum.box_ += loss.box_;
            sum.obj += loss.obj;
            sum.cls += loss.cls;
            sum.total += loss.total;
            batches += 1;
        }
        let k = batches as f64;
        let mean = LossBreakdown {
            box_: sum.box_ / k,
            obj: sum.obj / k,
            cls: sum.cls / k,
            total: sum.total / k,
        };
        let (val, val_loss) = match data.val {
            Some(val_set) if !val_set.is_empty() => {
                let report = evaluate_model(&model, val_set, &PipelineConfig::default())?;
                let vl = validation_loss(&mut model, val_set, cfg)?;
                (Some((report.map, report.precision, report.recall)), Some(vl))
            }
            _ => (None, None),
        };
        log.rows.push(EpochRow {
            epoch: epoch + 1,
            lr: lr as f64,
            loss: mean,
            val,
            val_loss,
        });
        on_epoch(log.rows.last().expect("row just pushed"));
    }
    log.finalize_convergence();
    Ok((model, log))
}

/// Mean total loss over a held-out set, batch statistics mode so the value
/// is comparable with training loss for BN-free ablations too.
pub fn validation_loss(
    model: &mut Model,
    val: &[AnnotatedImage],
    cfg: &TrainConfig,
) -> Result<f64> {
    let s = model.grid_size;
    let b = model.config.boxes_per_cell;
    let c = model.config.num_classes;
    let refs: Vec<&Image> = val.iter().map(|a| &a.image).collect();
    let input = Image::batch_to_tensor(&refs)?;
    let ann: Vec<&[LabeledBox]> = val.iter().map(|a| a.boxes.as_slice()).collect();
    let targets = assign_targets::<f32>(&ann, s, b, c);
    // running stats must survive validation untouched
    let mut probe = model.clone();
    let (pred, _) = probe.forward_train(&input)?;
    let (loss, _) = yolo_loss(&pred.raw, &targets, cfg);
    Ok(loss.total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationToggle {
    Full,
    MinusBatchnorm,
    MinusAugmentation,
    MinusLeakyRelu,
}

impl AblationToggle {
    pub const ALL: [AblationToggle; 4] = [
        AblationToggle::Full,
        AblationToggle::MinusBatchnorm,
        AblationToggle::MinusAugmentation,
        AblationToggle::MinusLeakyRelu,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationToggle::Full => "Full Custom Model",
            AblationToggle::MinusBatchnorm => "Minus Batch Normalization",
            AblationToggle::MinusAugmentation => "Minus Data Augmentation",
            AblationToggle::MinusLeakyRelu => "Minus Leaky ReLU Activation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(AblationToggle::Full),
            "minus_batchnorm" => Some(AblationToggle::MinusBatchnorm),
            "minus_augmentation" => Some(AblationToggle::MinusAugmentation),
            "minus_leaky_relu" => Some(AblationToggle::MinusLeakyRelu),
            _ => None,
        }
    }

    /// Applies the toggle to the model/training configuration pair.
    pub fn apply(self, model_cfg: &mut ModelConfig, train_cfg: &mut TrainConfig) {
        match self {
            AblationToggle::Full => {}
            AblationToggle::MinusBatchnorm => model_cfg.use_batchnorm = false,
            AblationToggle::MinusAugmentation => train_cfg.augment_enabled = false,
            AblationToggle::MinusLeakyRelu => model_cfg.activation = ActivationKind::Identity,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub toggle: AblationToggle,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub epochs_to_converge: Option<usize>,
    pub final_val_loss: f64,
    /// relative to the baseline's final validation loss; None for baseline
    pub loss_increase: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Runs one training per toggle; evaluation uses a perturbed validation
/// split so augmentation robustness is visible at desk scale.
pub fn ablate(
    base_model_cfg: &ModelConfig,
    base_train_cfg: &TrainConfig,
    train_set: &[AnnotatedImage],
    val_set: &[AnnotatedImage],
    perturb_seed: u64,
    toggles: &[AblationToggle],
) -> Result<AblationReport> {
    if toggles.is_empty() {
        return Err(Error::Usage("no ablation toggles given".into()));
    }
    if !toggles.contains(&AblationToggle::Full) {
        return Err(Error::Usage(
            "ablation requires the 'full' baseline toggle".into(),
        ));
    }
    let perturbed_val = perturb_validation(val_set, perturb_seed);
    let mut rows = Vec::new();
    for &toggle in toggles {
        let mut mc = base_model_cfg.clone();
        let mut tc = base_train_cfg.clone();
        toggle.apply(&mut mc, &mut tc);
        let run = || -> Result<AblationRow> {
            let model = build_model(&mc)?;
            let data = TrainData {
                train: train_set,
                val: None,
                augment: AugmentConfig::default(),
            };
            let (mut model, log) = train(model, &data, &tc, TrainMode::Scratch)?;
            let report = evaluate_model(&model, &perturbed_val, &PipelineConfig::default())?;
            let final_val_loss = validation_loss(&mut model, &perturbed_val, &tc)?;
            Ok(AblationRow {
                toggle,
                map: report.map,
                precision: report.precision,
                recall: report.recall,
                epochs_to_converge: log.epochs_to_converge,
                final_val_loss,
                loss_increase: None,
                error: None,
            })
        };
        match run() {
            Ok(row) => rows.push(row),
            Err(e) => rows.push(AblationRow {
                toggle,
                map: 0.0,
                precision: 0.0,
                recall: 0.0,
                epochs_to_converge: None,
                final_val_loss: f64::NAN,
                loss_increase: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let baseline_loss = rows
        .iter()
        .find(|r| r.toggle == AblationToggle::Full)
        .map(|r| r.final_val_loss)
        .unwrap_or(f64::NAN);
    for row in &mut rows {
        if row.toggle != AblationToggle::Full && row.error.is_none() && baseline_loss > 0.0 {
            row.loss_increase = Some((row.final_val_loss - baseline_loss) / baseline_loss);
        }
    }
    Ok(AblationReport { rows })
}

/// Deterministic rotation/brightness perturbation of a validation split.
pub fn perturb_validation(val: &[AnnotatedImage], seed: u64) -> Vec<AnnotatedImage> {
    val.iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut rng = derive_rng(seed, 0, i);
            let cfg = AugmentConfig {
                scale_min: 1.0,
                scale_max: 1.0,
                saturation_max: 0.0,
                ..AugmentConfig::default()
            };
            let draw = sample_augment_params(&cfg, &mut rng);
            let (img, boxes) = apply_augment(&sample.image, &sample.boxes, &draw);
            AnnotatedImage {
                image: img,
                boxes,
                image_id: sample.image_id.clone(),
            }
        })
        .collect()
}

impl AblationReport {
    pub fn to_table_rows(&self) -> Vec<crate::metrics::TableRow> {
        self.rows
            .iter()
            .map(|r| crate::metrics::TableRow {
                label: r.toggle.label().to_string(),
                map: r.map,
                precision: r.precision,
                recall: r.recall,
                epochs: r.epochs_to_converge,
                loss_increase: r.loss_increase,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg, TrainMode::Scratch), 0.001);
        assert_eq!(lr_schedule(29, &cfg, TrainMode::Scratch), 0.001);
        assert!((lr_schedule(30, &cfg, TrainMode::Scratch) - 0.0001).abs() < 1e-15);
        assert_eq!(lr_schedule(10, &cfg, TrainMode::Finetune), 0.0001);
    }

    #[test]
    fn schedule_single_step() {
        let cfg = TrainConfig::default();
        let mut jumps = 0;
        for e in 1..cfg.epochs {
            if lr_schedule(e, &cfg, TrainMode::Scratch)
                != lr_schedule(e - 1, &cfg, TrainMode::Scratch)
            {
                jumps += 1;
            }
        }
        assert_eq!(jumps, 1);
    }

    #[test]
    fn center_box_cell_and_offsets() {
        let boxes = [LabeledBox {
            class_id: 0,
            cx: 0.5,
            cy: 0.5,
            w: 0.2,
            h: 0.2,
        }];
        let t = assign_targets::<f64>(&[&boxes], 10, 1, 4);
        let cell = (5 * 10) + 5;
        assert!(t.responsible[cell]);
        let base = cell * 9;
        assert!((t.tensor.data()[base]).abs() < 1e-12); // tx offset 0
        assert!((t.tensor.data()[base + 1]).abs() < 1e-12);
        assert_eq!(t.tensor.data()[base + 4], 1.0);
    }

    #[test]
    fn empty_image_targets() {
        let t = assign_targets::<f64>(&[&[]], 4, 1, 3);
        assert_eq!(t.responsible_count, 0);
        assert!(t.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collision_drops_later_object() {
        let boxes = [
            LabeledBox {
                class_id: 0,
                cx: 0.51,
                cy: 0.51,
                w: 0.1,
                h: 0.1,
            },
            LabeledBox {
                class_id: 1,
                cx: 0.55,
                cy: 0.55,
                w: 0.1,
                h: 0.1,
            },
        ];
        let t = assign_targets::<f64>(&[&boxes], 2, 1, 4);
        assert_eq!(t.collisions, 1);
        assert_eq!(t.responsible_count, 1);
        // first object won the cell
        let cell = (1 * 2) + 1;
        assert_eq!(t.tensor.data()[cell * 9 + 5], 1.0);
    }

    #[test]
    fn empty_image_obj_loss_value() {
        let cfg = TrainConfig::default();
        let s = 4;
        let pred = Tensor::<f64>::zeros(&[1, s, s, 9]);
        let targets = assign_targets::<f64>(&[&[]], s, 1, 4);
        let (loss, _) = yolo_loss(&pred, &targets, &cfg);
        assert_eq!(loss.box_, 0.0);
        assert_eq!(loss.cls, 0.0);
        // per slot, obj is lambda_noobj * (-log 0.5)
        let per_slot = cfg.lambda_noobj * -(0.5f64.ln());
        let slots = (s * s) as f64;
        assert!((loss.obj / slots - per_slot).abs() < 1e-12, "obj {}", loss.obj);
        assert!((loss.total - per_slot * slots).abs() < 1e-12);
    }

    #[test]
    fn lambda_scaling_is_linear() {
        let mut cfg = TrainConfig::default();
        let boxes = [LabeledBox {
            class_id: 1,
            cx: 0.3,
            cy: 0.7,
            w: 0.2,
            h: 0.4,
        }];
        let targets = assign_targets::<f64>(&[&boxes], 4, 1, 3);
        let mut pred = Tensor::<f64>::zeros(&[1, 4, 4, 8]);
        for (i, v) in pred.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 17) as f64 - 8.0) / 10.0;
        }
        let (l1, _) = yolo_loss(&pred, &targets, &cfg);
        cfg.lambda_box *= 3.0;
        cfg.lambda_obj *= 3.0;
        cfg.lambda_noobj *= 3.0;
        cfg.lambda_cls *= 3.0;
        let (l3, _) = yolo_loss(&pred, &targets, &cfg);
        assert!((l3.total - 3.0 * l1.total).abs() < 1e-9);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = TrainConfig::default();
        let boxes = [LabeledBox {
            class_id: 2,
            cx: 0.4,
            cy: 0.6,
            w: 0.3,
            h: 0.2,
        }];
        let targets = assign_targets::<f64>(&[&boxes], 3, 1, 4);
        let mut pred = Tensor::<f64>::zeros(&[1, 3, 3, 9]);
        for (i, v) in pred.data_mut().iter_mut().enumerate() {
            *v = ((i * 31 % 23) as f64 - 11.0) / 7.0;
        }
        let (_, grad) = yolo_loss(&pred, &targets, &cfg);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..pred.len() {
            let orig = pred.data()[i];
            pred.data_mut()[i] = orig + h;
            let (hi, _) = yolo_loss(&pred, &targets, &cfg);
            pred.data_mut()[i] = orig - h;
            let (lo, _) = yolo_loss(&pred, &targets, &cfg);
            pred.data_mut()[i] = orig;
            let numeric = (hi.total - lo.total) / (2.0 * h);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        assert!(worst < 1e-3, "max rel err {worst}");
    }

    #[test]
    fn crafted_single_object_term_oracle() {
        // independent scalar recomputation of each loss family
        let cfg = TrainConfig::default();
        let s = 2;
        let c = 3;
        let boxes = [LabeledBox {
            class_id: 1,
            cx: 0.25,
            cy: 0.25,
            w: 0.5,
            h: 0.25,
        }];
        let targets = assign_targets::<f64>(&[&boxes], s, 1, c);
        let mut pred = Tensor::<f64>::zeros(&[1, s, s, 5 + c]);
        let resp_base = 0; // cell (0,0)
        let vals = [0.3, -0.2, 0.1, 0.4, 0.7, 0.2, 1.1, -0.5];
        for (k, &v) in vals.iter().enumerate() {
            pred.data_mut()[resp_base + k] = v;
        }
        let (loss, _) = yolo_loss(&pred, &targets, &cfg);

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        // box: targets tx=0.5, ty=0.5, tw=0.5, th=0.25
        let tgts = [0.5, 0.5, 0.5, 0.25];
        let box_oracle: f64 = (0..4)
            .map(|k| (sig(vals[k]) - tgts[k]).powi(2))
            .sum::<f64>();
        assert!((loss.box_ - box_oracle).abs() < 1e-12);
        // obj: 1 positive at logit 0.7, 3 negatives at logit 0
        let obj_oracle = cfg.lambda_obj * (-(sig(0.7f64).ln()))
            + cfg.lambda_noobj * 3.0 * (-(0.5f64.ln()));
        assert!((loss.obj - obj_oracle).abs() < 1e-12, "{} vs {obj_oracle}", loss.obj);
        // cls: softmax CE for class 1 over logits [0.2, 1.1, -0.5]
        let z: f64 = [0.2f64, 1.1, -0.5].iter().map(|v| v.exp()).sum();
        let cls_oracle = -((1.1f64).exp() / z).ln();
        assert!((loss.cls - cls_oracle).abs() < 1e-12);
        let total = cfg.lambda_box * box_oracle + obj_oracle + cfg.lambda_cls * cls_oracle;
        assert!((loss.total - total).abs() < 1e-12);
    }
}
