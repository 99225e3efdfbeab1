//! Decoding raw grid predictions into scored pixel-space detections,
//! IoU, and class-wise greedy non-maximum suppression.

use crate::detector::GridPrediction;
use crate::imaging::{unletterbox_boxes, LetterboxTransform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    /// (x1, y1, x2, y2) pixels in the original image frame
    pub bbox: (f64, f64, f64, f64),
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub conf_thresh: f64,
    pub nms_iou_thresh: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            conf_thresh: 0.25,
            nms_iou_thresh: 0.45,
            max_detections: 100,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Decodes one image's grid prediction (batch index `n`) into detections in
/// the original pixel frame. Box centers are (cell + sigmoid(t))/S image
/// fractions, sizes are sigmoid fractions; score is objectness times the
/// best class probability.
pub fn decode(
    pred: &GridPrediction,
    n: usize,
    t: &LetterboxTransform,
    orig_w: usize,
    orig_h: usize,
    target: usize,
    cfg: &DecodeConfig,
) -> Vec<Detection> {
    let s = pred.grid_size;
    let b = pred.boxes_per_cell;
    let c = pred.num_classes;
    let ch = b * 5 + c;
    let mut out = Vec::new();
    for cy in 0..s {
        for cx in 0..s {
            let base = ((n * s + cy) * s + cx) * ch;
            let slot = &pred.raw.data()[base..base + ch];
            let class_logits: Vec<f64> = slot[b * 5..].iter().map(|&v| v as f64).collect();
            let probs = softmax(&class_logits);
            let (best_class, best_prob) = probs
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (i, &p)| {
                    if p > acc.1 {
                        (i, p)
                    } else {
                        acc
                    }
                });
            for slot_b in 0..b {
                let o = slot_b * 5;
                let bx = (cx as f64 + sigmoid(slot[o] as f64)) / s as f64;
                let by = (cy as f64 + sigmoid(slot[o + 1] as f64)) / s as f64;
                let bw = sigmoid(slot[o + 2] as f64);
                let bh = sigmoid(slot[o + 3] as f64);
                let obj = sigmoid(slot[o + 4] as f64);
                let score = obj * best_prob;
                if score <= cfg.conf_thresh {
                    continue;
                }
                let tx1 = (bx - bw / 2.0) * target as f64;
                let ty1 = (by - bh / 2.0) * target as f64;
                let tx2 = (bx + bw / 2.0) * target as f64;
                let ty2 = (by + bh / 2.0) * target as f64;
                let mapped = unletterbox_boxes(&[(tx1, ty1, tx2, ty2)], t, orig_w, orig_h)[0];
                if mapped.2 <= mapped.0 || mapped.3 <= mapped.1 {
                    continue;
                }
                out.push(Detection {
                    class_id: best_class,
                    score,
                    bbox: mapped,
                });
            }
        }
    }
    out
}

/// Intersection over union of two (x1,y1,x2,y2) boxes.
pub fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0).max(0.0) * (a.3 - a.1).max(0.0);
    let area_b = (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Sorts by descending score with deterministic tie-breaking (lower class
/// id, then input order).
pub fn sort_detections(dets: &mut Vec<(usize, Detection)>) {
    dets.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.class_id.cmp(&b.1.class_id))
            .then(a.0.cmp(&b.0))
    });
}

/// Class-wise greedy NMS; output keeps descending score order and is capped
/// at `max_detections`.
pub fn nms(dets: &[Detection], iou_thresh: f64, max_detections: usize) -> Vec<Detection> {
    let mut indexed: Vec<(usize, Detection)> = dets.iter().cloned().enumerate().collect();
    sort_detections(&mut indexed);
    let mut kept: Vec<Detection> = Vec::new();
    for (_, d) in indexed {
        if kept.len() >= max_detections {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(k.bbox, d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// One "image_id class_id score x1 y1 x2 y2" line per detection, 6 decimals.
pub fn format_detection_line(image_id: &str, d: &Detection) -> String {
    format!(
        "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
        image_id, d.class_id, d.score, d.bbox.0, d.bbox.1, d.bbox.2, d.bbox.3
    )
}
