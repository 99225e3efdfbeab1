use std::time::Instant;

use pilldet_core::dataset::{generate_split, make_catalog, Split};
use pilldet_core::detector::{build_model, ModelConfig};
use pilldet_core::imaging::AugmentConfig;
use pilldet_core::pipeline::{evaluate_model, PipelineConfig};
use pilldet_core::train::{train_with_progress, TrainConfig, TrainData, TrainMode};

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let seed: u64 = env_or("SEED", 7);
    let batch: usize = env_or("BATCH", 32);
    let epochs: usize = env_or("EPOCHS", 50);
    let aug: usize = env_or("AUG", 1);
    let n_train: usize = env_or("NTRAIN", 200);
    let n_val: usize = env_or("NVAL", 50);
    let channels: String = env_or("CHANNELS", "8,16,32,64".to_string());

    let start = Instant::now();
    let catalog = make_catalog(32, seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_split(&catalog, n_train, n_val, seed, 160, dir.path()).unwrap();
    let train_set = manifest.load_split(Split::Train).unwrap();
    let val_set = manifest.load_split(Split::Val).unwrap();
    eprintln!("dataset ready in {:.1}s", start.elapsed().as_secs_f64());

    let model_cfg = ModelConfig {
        input_size: 160,
        stage_channels: channels.split(',').map(|v| v.parse().unwrap()).collect(),
        seed,
        ..ModelConfig::default()
    };
    let model = build_model(&model_cfg).unwrap();
    let lbox: f64 = env_or("LBOX", 5.0);
    let train_cfg = TrainConfig {
        batch_size: batch,
        lambda_box: lbox,
        epochs,
        decay_epoch: 30.min(epochs - 1),
        augment_enabled: aug != 0,
        seed,
        ..TrainConfig::default()
    };
    let data = TrainData {
        train: &train_set,
        val: Some(&val_set),
        augment: AugmentConfig::default(),
    };
    let t0 = Instant::now();
    let (model, _log) = train_with_progress(model, &data, &train_cfg, TrainMode::Scratch, |r| {
        eprintln!(
            "epoch {:2} lr {:.4} box {:.4} obj {:.4} cls {:.4} total {:.4} val {:?} [{:.1}s]",
            r.epoch,
            r.lr,
            r.loss.box_,
            r.loss.obj,
            r.loss.cls,
            r.loss.total,
            r.val,
            t0.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    model.save(std::path::Path::new("/tmp/exp_model.txt")).unwrap();
    let report = evaluate_model(&model, &val_set, &PipelineConfig::default()).unwrap();
    let mut low = PipelineConfig::default();
    low.decode.conf_thresh = 0.001;
    let sweep = evaluate_model(&model, &val_set, &low).unwrap();
    let train_sweep = evaluate_model(&model, &train_set, &low).unwrap();
    let mut loose = low.clone();
    loose.eval.iou_thresh = 0.3;
    let loose_sweep = evaluate_model(&model, &val_set, &loose).unwrap();
    eprintln!("val mAP@.001 iou=0.3: {:.4}", loose_sweep.map);

    // per-shape breakdown: best-IoU detection per GT, class accuracy at best
    use pilldet_core::pipeline::detect_image;
    use pilldet_core::postprocess::iou;
    let mut diag = PipelineConfig::default();
    diag.decode.conf_thresh = 0.05;
    let mut stats = [[0.0f64; 4]; 3]; // [shape][n, sum_iou, n_iou50, n_cls_ok]
    for sample in &val_set {
        let dets = detect_image(&model, &sample.image, &diag).unwrap();
        for gt in &sample.boxes {
            let w = sample.image.width as f64;
            let h = sample.image.height as f64;
            let g = (
                (gt.cx - gt.w / 2.0) * w,
                (gt.cy - gt.h / 2.0) * h,
                (gt.cx + gt.w / 2.0) * w,
                (gt.cy + gt.h / 2.0) * h,
            );
            let best = dets
                .iter()
                .map(|d| (iou(d.bbox, g), d.class_id))
                .max_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
            let s = &mut stats[gt.class_id % 3];
            s[0] += 1.0;
            if let Some((bi, cls)) = best {
                s[1] += bi;
                if bi >= 0.5 {
                    s[2] += 1.0;
                }
                if bi >= 0.3 && cls == gt.class_id {
                    s[3] += 1.0;
                }
            }
        }
    }
    for (name, s) in ["round", "oval", "capsule"].iter().zip(stats.iter()) {
        eprintln!(
            "{:7} n {:3.0} mean_best_iou {:.3} frac_iou50 {:.3} frac_cls_ok {:.3}",
            name,
            s[0],
            s[1] / s[0].max(1.0),
            s[2] / s[0].max(1.0),
            s[3] / s[0].max(1.0)
        );
    }
    let mut aps: Vec<(usize, f64)> = sweep.per_class_ap.iter().map(|&(k, v)| (k, v)).collect();
    aps.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    eprintln!("worst classes: {:?}", &aps[..aps.len().min(8)]);
    eprintln!(
        "final mAP {:.4} P {:.4} R {:.4} | val mAP@.001 {:.4} | train mAP@.001 {:.4} | in {:.1}s",
        report.map,
        report.precision,
        report.recall,
        sweep.map,
        train_sweep.map,
        start.elapsed().as_secs_f64()
    );
}
