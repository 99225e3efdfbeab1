//! Detection matching, per-class average precision, mAP, precision/recall,
//! and table rendering for ablation and model-comparison reports.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::postprocess::{iou, Detection};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Ground-truth box in pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: (f64, f64, f64, f64),
}

/// Per-detection TP/FP flags (aligned with score-descending order) plus the
/// image's unmatched ground-truth count.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// (input detection index, is_tp, matched gt index)
    pub flags: Vec<(usize, bool, Option<usize>)>,
    pub unmatched_gt: usize,
}

/// Greedy matching by descending detection score: a detection is a TP if its
/// best-IoU same-class unmatched ground truth clears `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });
    let mut gt_used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_used[gi] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(d.bbox, g.bbox);
            // ties broken by lower gt index: strict > keeps the earlier one
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v >= iou_thresh => {
                gt_used[gi] = true;
                flags.push((di, true, Some(gi)));
            }
            _ => flags.push((di, false, None)),
        }
    }
    MatchResult {
        flags,
        unmatched_gt: gt_used.iter().filter(|u| !**u).count(),
    }
}

/// All-point interpolated average precision from a score-descending TP/FP
/// sequence and the class's total ground-truth count.
pub fn average_precision(tp_fp: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp_fp.len());
    for (i, &is_tp) in tp_fp.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let recall = tp as f64 / total_gt as f64;
        let precision = tp as f64 / (i + 1) as f64;
        points.push((recall, precision));
    }
    // precision envelope: max precision at recall >= r
    let mut envelope = points.clone();
    let mut best = 0.0f64;
    for p in envelope.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in envelope {
        if r > prev_recall {
            area += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    area
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// class id -> AP, only for classes present in ground truth
    pub per_class_ap: Vec<(usize, f64)>,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// true when precision fell back to the 0/0 := 1 convention
    pub precision_degenerate: bool,
    /// classes that appeared in detections but never in ground truth
    pub classes_without_gt: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub iou_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: DEFAULT_MATCH_IOU,
        }
    }
}

/// Pools detections and ground truths over images (keyed by image id) and
/// computes per-class AP, mAP@iou, and the operating-point precision/recall.
pub fn evaluate(
    dets: &[(String, Detection)],
    gts: &[(String, GroundTruth)],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let mut images: Vec<&String> = gts.iter().map(|(id, _)| id).collect();
    images.extend(dets.iter().map(|(id, _)| id));
    images.sort();
    images.dedup();

    let mut gt_by_image: HashMap<&str, Vec<GroundTruth>> = HashMap::new();
    for (id, g) in gts {
        gt_by_image.entry(id).or_default().push(*g);
    }
    let mut det_by_image: HashMap<&str, Vec<Detection>> = HashMap::new();
    for (id, d) in dets {
        det_by_image.entry(id).or_default().push(*d);
    }

    // (class, score, is_tp) pooled across images
    let mut pooled: Vec<(usize, f64, bool)> = Vec::new();
    let mut gt_count_per_class: HashMap<usize, usize> = HashMap::new();
    for (_, g) in gts {
        *gt_count_per_class.entry(g.class_id).or_default() += 1;
    }
    let mut tp = 0;
    let mut fp = 0;
    for id in &images {
        let empty_g = Vec::new();
        let empty_d = Vec::new();
        let g = gt_by_image.get(id.as_str()).unwrap_or(&empty_g);
        let d = det_by_image.get(id.as_str()).unwrap_or(&empty_d);
        let m = match_detections(d, g, cfg.iou_thresh);
        for (di, is_tp, _) in &m.flags {
            pooled.push((d[*di].class_id, d[*di].score, *is_tp));
            if *is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let fn_ = gts.len() - tp;

    let mut classes: Vec<usize> = gt_count_per_class.keys().cloned().collect();
    classes.sort_unstable();
    let mut per_class_ap = Vec::with_capacity(classes.len());
    for &cls in &classes {
        let mut seq: Vec<(f64, bool)> = pooled
            .iter()
            .filter(|(c, _, _)| *c == cls)
            .map(|&(_, s, t)| (s, t))
            .collect();
        seq.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let flags: Vec<bool> = seq.iter().map(|&(_, t)| t).collect();
        per_class_ap.push((cls, average_precision(&flags, gt_count_per_class[&cls])));
    }
    let map = per_class_ap.iter().map(|(_, ap)| ap).sum::<f64>() / per_class_ap.len() as f64;

    let mut det_classes: Vec<usize> = dets.iter().map(|(_, d)| d.class_id).collect();
    det_classes.sort_unstable();
    det_classes.dedup();
    let classes_without_gt = det_classes
        .into_iter()
        .filter(|c| !gt_count_per_class.contains_key(c))
        .collect();

    let precision_degenerate = tp + fp == 0;
    Ok(EvalReport {
        per_class_ap,
        map,
        precision: if precision_degenerate {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        },
        recall: if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        },
        tp,
        fp,
        fn_,
        precision_degenerate,
        classes_without_gt,
    })
}

impl EvalReport {
    /// Machine form: one class_id,ap line per class then a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,ap\n");
        for (cls, ap) in &self.per_class_ap {
            let _ = writeln!(out, "{cls},{ap:.6}");
        }
        let _ = writeln!(out, "map,precision,recall,tp,fp,fn");
        let _ = writeln!(
            out,
            "{:.6},{:.6},{:.6},{},{},{}",
            self.map, self.precision, self.recall, self.tp, self.fp, self.fn_
        );
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableStyle {
    Ablation,
    Comparison,
}

/// One rendered report row: a label plus metric columns. `loss_increase`
/// of `None` renders as "-" (the baseline row).
#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: String,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub epochs: Option<usize>,
    pub loss_increase: Option<f64>,
}

/// Renders rows in the fixed column layout; percentages with one decimal.
pub fn render_table(rows: &[TableRow], style: TableStyle) -> String {
    let headers: Vec<&str> = match style {
        TableStyle::Ablation => vec![
            "Configuration",
            "mAP",
            "Precision",
            "Recall",
            "Training Time (Epochs)",
            "Loss Increase",
        ],
        TableStyle::Comparison => vec!["Model Name", "mAP", "Precision", "Recall"],
    };
    let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let pct = |v: f64| format!("{:.1}%", v * 100.0);
        let mut row = vec![r.label.clone(), pct(r.map), pct(r.precision), pct(r.recall)];
        if style == TableStyle::Ablation {
            row.push(r.epochs.map_or_else(|| "-".into(), |e| e.to_string()));
            row.push(
                r.loss_increase
                    .map_or_else(|| "-".into(), |v| format!("{:.0}%", v * 100.0)),
            );
        }
        cells.push(row);
    }
    let ncols = cells[0].len();
    let widths: Vec<usize> = (0..ncols)
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| format!("{:<w$}", v, w = widths[c]))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: usize, score: f64, bbox: (f64, f64, f64, f64)) -> Detection {
        Detection {
            class_id: class,
            score,
            bbox,
        }
    }

    #[test]
    fn exact_match_is_tp() {
        let b = (0.0, 0.0, 10.0, 10.0);
        let m = match_detections(
            &[det(1, 0.9, b)],
            &[GroundTruth { class_id: 1, bbox: b }],
            0.5,
        );
        assert_eq!(m.flags.len(), 1);
        assert!(m.flags[0].1);
        assert_eq!(m.unmatched_gt, 0);
    }

    #[test]
    fn no_detections_all_fn() {
        let g = GroundTruth {
            class_id: 0,
            bbox: (0.0, 0.0, 1.0, 1.0),
        };
        let m = match_detections(&[], &[g, g, g], 0.5);
        assert!(m.flags.is_empty());
        assert_eq!(m.unmatched_gt, 3);
    }

    #[test]
    fn ap_extremes() {
        assert_eq!(average_precision(&[true, true], 2), 1.0);
        assert_eq!(average_precision(&[false, false, false], 2), 0.0);
    }

    #[test]
    fn ap_envelope_tp_fp_tp() {
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap {ap}");
    }

    #[test]
    fn evaluate_perfect() {
        let b = (5.0, 5.0, 20.0, 20.0);
        let dets = vec![("i0".to_string(), det(2, 1.0, b))];
        let gts = vec![("i0".to_string(), GroundTruth { class_id: 2, bbox: b })];
        let r = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn evaluate_empty_dets_convention() {
        let gts = vec![(
            "i0".to_string(),
            GroundTruth {
                class_id: 0,
                bbox: (0.0, 0.0, 1.0, 1.0),
            },
        )];
        let r = evaluate(&[], &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.precision, 1.0);
        assert!(r.precision_degenerate);
    }

    #[test]
    fn evaluate_rejects_empty_gt() {
        assert!(matches!(
            evaluate(&[], &[], &EvalConfig::default()),
            Err(Error::EmptyGroundTruth)
        ));
    }

    #[test]
    fn table_ii_first_row() {
        let rows = vec![TableRow {
            label: "Custom YOLOv8 Model".into(),
            map: 0.995,
            precision: 0.981,
            recall: 0.988,
            epochs: None,
            loss_increase: None,
        }];
        let text = render_table(&rows, TableStyle::Comparison);
        let row_line = text.lines().nth(1).unwrap();
        let squeezed: String = row_line.split_whitespace().collect::<Vec<_>>().join(" ");
        assert_eq!(squeezed, "Custom YOLOv8 Model 99.5% 98.1% 98.8%");
    }

    #[test]
    fn ablation_baseline_dash() {
        let rows = vec![TableRow {
            label: "Full Custom Model".into(),
            map: 0.995,
            precision: 0.981,
            recall: 0.988,
            epochs: Some(50),
            loss_increase: None,
        }];
        let text = render_table(&rows, TableStyle::Ablation);
        assert!(text.lines().nth(1).unwrap().trim_end().ends_with('-'));
        // empty row list renders header only
        let header_only = render_table(&[], TableStyle::Ablation);
        assert_eq!(header_only.lines().count(), 1);
    }
}
