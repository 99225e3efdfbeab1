//! End-to-end glue: run the detector over annotated images and score the
//! result, or produce per-image detections for reporting.

use crate::dataset::AnnotatedImage;
use crate::detector::Model;
use crate::error::Result;
use crate::imaging::{letterbox, Image, LetterboxTransform};
use crate::metrics::{evaluate, EvalConfig, EvalReport, GroundTruth};
use crate::postprocess::{decode, nms, DecodeConfig, Detection};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub batch_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            batch_size: 16,
        }
    }
}

/// Letterboxes one image to the model input, runs inference, and returns
/// NMS-filtered detections in the original pixel frame.
pub fn detect_image(model: &Model, img: &Image, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    let target = model.config.input_size;
    let (boxed, t) = if img.width == target && img.height == target {
        (img.clone(), LetterboxTransform::IDENTITY)
    } else {
        letterbox(img, target)?
    };
    let input = Image::batch_to_tensor(&[&boxed])?;
    let pred = model.forward(&input)?;
    let raw = decode(&pred, 0, &t, img.width, img.height, target, &cfg.decode);
    Ok(nms(&raw, cfg.decode.nms_iou_thresh, cfg.decode.max_detections))
}

/// Runs the model over an annotated split and scores mAP/precision/recall.
/// Images matching the model input size are batched; others go through the
/// letterbox path one by one.
pub fn evaluate_model(
    model: &Model,
    images: &[AnnotatedImage],
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    let target = model.config.input_size;
    let mut dets: Vec<(String, Detection)> = Vec::new();
    let mut gts: Vec<(String, GroundTruth)> = Vec::new();

    for sample in images {
        let (w, h) = (sample.image.width, sample.image.height);
        for b in &sample.boxes {
            gts.push((
                sample.image_id.clone(),
                GroundTruth {
                    class_id: b.class_id,
                    bbox: (
                        (b.cx - b.w / 2.0) * w as f64,
                        (b.cy - b.h / 2.0) * h as f64,
                        (b.cx + b.w / 2.0) * w as f64,
                        (b.cy + b.h / 2.0) * h as f64,
                    ),
                },
            ));
        }
    }

    let mut batchable: Vec<&AnnotatedImage> = Vec::new();
    for sample in images {
        if sample.image.width == target && sample.image.height == target {
            batchable.push(sample);
        } else {
            for d in detect_image(model, &sample.image, cfg)? {
                dets.push((sample.image_id.clone(), d));
            }
        }
    }
    for chunk in batchable.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let input = Image::batch_to_tensor(&refs)?;
        let pred = model.forward(&input)?;
        for (n, sample) in chunk.iter().enumerate() {
            let raw = decode(
                &pred,
                n,
                &LetterboxTransform::IDENTITY,
                target,
                target,
                target,
                &cfg.decode,
            );
            for d in nms(&raw, cfg.decode.nms_iou_thresh, cfg.decode.max_detections) {
                dets.push((sample.image_id.clone(), d));
            }
        }
    }

    evaluate(&dets, &gts, &cfg.eval)
}

/// Integer-path counterpart of `evaluate_model`; images must already be at
/// the model input size.
pub fn evaluate_quantized_model(
    qm: &crate::quantize::QuantizedModel,
    images: &[AnnotatedImage],
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    let target = qm.config.input_size;
    let mut dets: Vec<(String, Detection)> = Vec::new();
    let mut gts: Vec<(String, GroundTruth)> = Vec::new();
    for sample in images {
        let (w, h) = (sample.image.width, sample.image.height);
        for b in &sample.boxes {
            gts.push((
                sample.image_id.clone(),
                GroundTruth {
                    class_id: b.class_id,
                    bbox: (
                        (b.cx - b.w / 2.0) * w as f64,
                        (b.cy - b.h / 2.0) * h as f64,
                        (b.cx + b.w / 2.0) * w as f64,
                        (b.cy + b.h / 2.0) * h as f64,
                    ),
                },
            ));
        }
        let pred = crate::quantize::quantized_forward(qm, &sample.image)?;
        let raw = decode(
            &pred,
            0,
            &LetterboxTransform::IDENTITY,
            target,
            target,
            target,
            &cfg.decode,
        );
        for d in nms(&raw, cfg.decode.nms_iou_thresh, cfg.decode.max_detections) {
            dets.push((sample.image_id.clone(), d));
        }
    }
    evaluate(&dets, &gts, &cfg.eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_model, ModelConfig};
    use crate::imaging::LabeledBox;

    fn tiny_model() -> Model {
        build_model(&ModelConfig {
            input_size: 32,
            num_classes: 4,
            stage_channels: vec![4, 8],
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn detect_accepts_non_square_input() {
        let model = tiny_model();
        let img = Image::filled(24, 40, 0.5);
        // an untrained model may emit anything; the call itself must succeed
        detect_image(&model, &img, &PipelineConfig::default()).unwrap();
    }

    #[test]
    fn evaluate_model_scores_untrained_near_zero() {
        let model = tiny_model();
        let samples: Vec<AnnotatedImage> = (0..3)
            .map(|i| AnnotatedImage {
                image: Image::filled(32, 32, 0.3),
                boxes: vec![LabeledBox {
                    class_id: i % 4,
                    cx: 0.5,
                    cy: 0.5,
                    w: 0.4,
                    h: 0.4,
                }],
                image_id: format!("img_{i}"),
            })
            .collect();
        let report = evaluate_model(&model, &samples, &PipelineConfig::default()).unwrap();
        assert!(report.map <= 1.0);
        assert_eq!(report.tp + report.fn_, 3);
    }
}
