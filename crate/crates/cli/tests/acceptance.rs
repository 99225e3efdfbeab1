//! End-to-end acceptance checks. Each numbered criterion prints one
//! PASS/FAIL line; the test fails if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pilldet_core::dataset::{generate_split, make_catalog, Split};
use pilldet_core::detector::{build_model, ModelConfig};
use pilldet_core::imaging::{
    apply_augment, letterbox, sample_augment_params, AugmentConfig, AugmentDraw, Image,
};
use pilldet_core::metrics::{average_precision, render_table, TableRow, TableStyle};
use pilldet_core::nn::{grad_check, LayerKind};
use pilldet_core::pipeline::{evaluate_model, PipelineConfig};
use pilldet_core::postprocess::{iou, nms, Detection};
use pilldet_core::quantize::{calibrate, fidelity_report, quantize_model, quantized_forward};
use pilldet_core::tensor::Tensor;
use pilldet_core::train::{
    ablate, train, yolo_loss, AblationToggle, TrainConfig, TrainData, TrainMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Score {
    failures: Vec<String>,
}

impl Score {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: &str) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id} ({name}): {verdict} [{detail}]");
        if !pass {
            self.failures.push(format!("criterion {id} ({name})"));
        }
    }
}

fn criterion_1_gradients(score: &mut Score) {
    let t0 = Instant::now();
    let mut worst_layer = 0.0f64;
    for seed in 0..20u64 {
        for kind in [
            LayerKind::Conv,
            LayerKind::BatchNorm,
            LayerKind::LeakyRelu,
            LayerKind::Relu,
            LayerKind::Identity,
            LayerKind::MaxPool,
        ] {
            worst_layer = worst_layer.max(grad_check(kind, seed));
        }
    }
    let mut worst_loss = 0.0f64;
    let cfg = TrainConfig::default();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes = vec![vec![pilldet_core::imaging::LabeledBox {
            class_id: rng.gen_range(0..4),
            cx: rng.gen_range(0.1..0.9),
            cy: rng.gen_range(0.1..0.9),
            w: 0.3,
            h: 0.3,
        }]];
        let refs: Vec<&[pilldet_core::imaging::LabeledBox]> =
            boxes.iter().map(|b| b.as_slice()).collect();
        let targets = pilldet_core::train::assign_targets::<f64>(&refs, 3, 1, 4);
        let mut pred = Tensor::<f64>::zeros(&[1, 3, 3, 9]);
        for v in pred.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (_, grad) = yolo_loss(&pred, &targets, &cfg);
        let eps = 1e-5;
        for i in 0..pred.len() {
            let orig = pred.data()[i];
            pred.data_mut()[i] = orig + eps;
            let (up, _) = yolo_loss(&pred, &targets, &cfg);
            pred.data_mut()[i] = orig - eps;
            let (dn, _) = yolo_loss(&pred, &targets, &cfg);
            pred.data_mut()[i] = orig;
            let fd = (up.total - dn.total) / (2.0 * eps);
            let g = grad.data()[i];
            worst_loss = worst_loss.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-4));
        }
    }
    score.record(
        1,
        "gradient correctness",
        worst_layer < 1e-4 && worst_loss < 1e-3 && t0.elapsed().as_secs() < 60,
        &format!(
            "layer max rel err {worst_layer:.2e}, loss max rel err {worst_loss:.2e}, {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

fn criterion_2_oracles(score: &mut Score) {
    let t0 = Instant::now();
    // the heavy random-instance comparisons live in the core oracle suite;
    // here we re-run the binding cases
    let ap = average_precision(&[true, false, true], 2);
    let ap_ok = (ap - 5.0 / 6.0).abs() < 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut nms_ok = true;
    for _ in 0..200 {
        let n = rng.gen_range(0..=50);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let x = rng.gen_range(0.0..80.0);
                let y = rng.gen_range(0.0..80.0);
                Detection {
                    class_id: rng.gen_range(0..4),
                    score: rng.gen_range(0.0..1.0),
                    bbox: (x, y, x + rng.gen_range(1.0..25.0), y + rng.gen_range(1.0..25.0)),
                }
            })
            .collect();
        // brute force: repeatedly take the best remaining, drop overlaps
        let mut remaining: Vec<(usize, Detection)> = dets.iter().cloned().enumerate().collect();
        let mut reference = Vec::new();
        while !remaining.is_empty() && reference.len() < 100 {
            let best = remaining
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    b.1.score
                        .partial_cmp(&a.1.score)
                        .unwrap()
                        .then(a.1.class_id.cmp(&b.1.class_id))
                        .then(a.0.cmp(&b.0))
                })
                .map(|(i, _)| i)
                .unwrap();
            let (_, d) = remaining.remove(best);
            remaining.retain(|(_, r)| r.class_id != d.class_id || iou(r.bbox, d.bbox) <= 0.45);
            reference.push(d);
        }
        if nms(&dets, 0.45, 100) != reference {
            nms_ok = false;
            break;
        }
    }
    score.record(
        2,
        "oracle equivalence",
        ap_ok && nms_ok && t0.elapsed().as_secs() < 60,
        &format!(
            "AP crafted case {}, NMS x200 {}, {:.1}s",
            if ap_ok { "exact" } else { "mismatch" },
            if nms_ok { "set-equal" } else { "mismatch" },
            t0.elapsed().as_secs_f64()
        ),
    );
}

struct Trained {
    model: pilldet_core::detector::Model,
    val: Vec<pilldet_core::dataset::AnnotatedImage>,
    map: f64,
    minutes: f64,
}

fn criterion_3_training(score: &mut Score, dir: &Path) -> Trained {
    let t0 = Instant::now();
    let seed = 7u64;
    let catalog = make_catalog(32, seed).unwrap();
    let manifest = generate_split(&catalog, 200, 50, seed, 160, dir).unwrap();
    let train_set = manifest.load_split(Split::Train).unwrap();
    let val_set = manifest.load_split(Split::Val).unwrap();
    let model = build_model(&ModelConfig {
        input_size: 160,
        num_classes: 32,
        seed,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        // heavier box weighting than the default: small-extent regression
        // is the binding constraint at this scale
        lambda_box: 10.0,
        seed,
        ..TrainConfig::default()
    };
    let data = TrainData {
        train: &train_set,
        val: None,
        augment: AugmentConfig::default(),
    };
    let (model, _log) = train(model, &data, &cfg, TrainMode::Scratch).unwrap();
    // mAP swept over the full PR curve: low confidence floor, default NMS
    let mut pcfg = PipelineConfig::default();
    pcfg.decode.conf_thresh = 0.001;
    let report = evaluate_model(&model, &val_set, &pcfg).unwrap();
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    score.record(
        3,
        "end-to-end training surrogate",
        report.map >= 0.90 && minutes < 15.0,
        &format!("val mAP@0.5 {:.4}, {:.1} min", report.map, minutes),
    );
    Trained {
        model,
        val: val_set,
        map: report.map,
        minutes,
    }
}

fn criterion_4_ablation(score: &mut Score, dir: &Path) {
    let seed = 7u64;
    let catalog = make_catalog(8, seed).unwrap();
    let manifest = generate_split(&catalog, 48, 16, seed, 96, dir).unwrap();
    let train_set = manifest.load_split(Split::Train).unwrap();
    let val_set = manifest.load_split(Split::Val).unwrap();
    let model_cfg = ModelConfig {
        input_size: 96,
        num_classes: 8,
        stage_channels: vec![8, 16, 32],
        seed,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        batch_size: 4,
        epochs: 12,
        decay_epoch: 8,
        seed,
        ..TrainConfig::default()
    };
    let report = ablate(
        &model_cfg,
        &train_cfg,
        &train_set,
        &val_set,
        seed,
        &AblationToggle::ALL,
    )
    .unwrap();
    let by_label = |l: &str| report.rows.iter().find(|r| r.toggle.label() == l).unwrap();
    let base = by_label("Full Custom Model");
    let no_bn = by_label("Minus Batch Normalization");
    let no_aug = by_label("Minus Data Augmentation");
    let no_lrelu = by_label("Minus Leaky ReLU Activation");
    let base_epochs = base.epochs_to_converge.unwrap_or(usize::MAX);
    let bn_epochs = no_bn.epochs_to_converge.unwrap_or(usize::MAX);
    let bn_dir = bn_epochs > base_epochs;
    let aug_dir = no_aug.map < base.map;
    let lrelu_dir = no_lrelu.final_val_loss > no_bn.final_val_loss
        && no_lrelu.final_val_loss > no_aug.final_val_loss;
    let table = render_table(&report.to_table_rows(), TableStyle::Ablation);
    let table_ok = table.lines().nth(1).map_or(false, |l| l.contains('-'));
    score.record(
        4,
        "ablation directionality",
        bn_dir && aug_dir && lrelu_dir && table_ok,
        &format!(
            "epochs {base_epochs}->{bn_epochs} (bn), mAP {:.3}->{:.3} (aug), \
             losses bn {:.3} aug {:.3} lrelu {:.3}",
            base.map, no_aug.map, no_bn.final_val_loss, no_aug.final_val_loss,
            no_lrelu.final_val_loss
        ),
    );
}

fn criterion_5_quantization(score: &mut Score, trained: &Trained) {
    let probes: Vec<Image> = trained
        .val
        .iter()
        .cycle()
        .take(100)
        .map(|a| a.image.clone())
        .collect();
    let calib: Vec<Image> = trained.val.iter().take(20).map(|a| a.image.clone()).collect();
    let stats = calibrate(&trained.model, &calib).unwrap();
    let qm = quantize_model(&trained.model, &stats).unwrap();
    let report = fidelity_report(&trained.model, &qm, &probes).unwrap();
    // bit-identical integer path across two runs
    let a = quantized_forward(&qm, &probes[0]).unwrap();
    let b = quantized_forward(&qm, &probes[0]).unwrap();
    let deterministic = a.raw.data() == b.raw.data();
    let pass = report.top1_agreement >= 0.99
        && report.detection_match_rate >= 0.95
        && report.size_ratio <= 0.30
        && deterministic;
    score.record(
        5,
        "quantization fidelity",
        pass,
        &format!(
            "top1 {:.3}, det match {:.3}, size ratio {:.3}, latency float {:.1}ms / int8 {:.1}ms",
            report.top1_agreement,
            report.detection_match_rate,
            report.size_ratio,
            report.latency_float * 1e3,
            report.latency_quant * 1e3
        ),
    );
}

fn criterion_6_imaging(score: &mut Score) {
    let frame = Image::filled(960, 1280, 0.25);
    let (_, t) = letterbox(&frame, 640).unwrap();
    let letterbox_ok = (t.scale - 0.5).abs() < 1e-12 && t.pad_y == 80 && t.pad_x == 0;

    let mut img = Image::new(20, 20);
    for (i, v) in img.data.iter_mut().enumerate() {
        *v = (i % 97) as f32 / 97.0;
    }
    let boxes = vec![pilldet_core::imaging::LabeledBox {
        class_id: 0,
        cx: 0.5,
        cy: 0.5,
        w: 0.4,
        h: 0.3,
    }];
    let draw = AugmentDraw {
        theta_deg: 0.0,
        scale: 1.0,
        brightness: 0.0,
        saturation: 0.0,
    };
    let (out, out_boxes) = apply_augment(&img, &boxes, &draw);
    let identity_ok = out
        .data
        .iter()
        .zip(&img.data)
        .all(|(a, b)| (a - b).abs() < 1e-5)
        && out_boxes.len() == 1
        && (out_boxes[0].cx - 0.5).abs() < 1e-9;

    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut ranges_ok = true;
    for _ in 0..10_000 {
        let d = sample_augment_params(&cfg, &mut rng);
        if d.theta_deg.abs() > 20.0
            || !(0.8..=1.2).contains(&d.scale)
            || d.brightness.abs() > 0.2
            || d.saturation.abs() > 0.1
        {
            ranges_ok = false;
            break;
        }
    }
    score.record(
        6,
        "imaging invariants",
        letterbox_ok && identity_ok && ranges_ok,
        &format!(
            "letterbox scale {:.2} pad ({:.0},{:.0}), identity {}, 10^4 draws in range {}",
            t.scale, t.pad_x, t.pad_y, identity_ok, ranges_ok
        ),
    );
}

fn criterion_7_determinism(score: &mut Score, dir: &Path) {
    let bin = env!("CARGO_BIN_EXE_pilldet");
    let run = |args: &[&str]| -> (String, String) {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "pilldet {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        (
            String::from_utf8_lossy(&out.stdout).into_owned(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )
    };
    let data_a = dir.join("det_a");
    let data_b = dir.join("det_b");
    let synth = |out: &Path| {
        let o = out.to_str().unwrap();
        run(&[
            "synth", "--classes", "6", "--train", "12", "--val", "4", "--size", "64", "--seed",
            "5", "--out", o,
        ]);
    };
    synth(&data_a);
    synth(&data_b);
    let digest = |root: &Path| {
        let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    entries.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        entries.sort();
        entries
    };
    // manifests embed their own root path; compare everything else
    let strip_manifest = |mut v: Vec<(String, Vec<u8>)>| {
        v.retain(|(name, _)| name != "manifest.txt");
        v
    };
    let synth_ok = strip_manifest(digest(&data_a)) == strip_manifest(digest(&data_b));

    let train_once = |model: &Path, log: &Path| {
        run(&[
            "train",
            "--data",
            data_a.to_str().unwrap(),
            "--out",
            model.to_str().unwrap(),
            "--epochs",
            "3",
            "--batch",
            "4",
            "--seed",
            "5",
            "--channels",
            "4,8",
            "--log",
            log.to_str().unwrap(),
        ]);
    };
    let (m1, l1) = (dir.join("m1.ckpt"), dir.join("l1.csv"));
    let (m2, l2) = (dir.join("m2.ckpt"), dir.join("l2.csv"));
    train_once(&m1, &l1);
    train_once(&m2, &l2);
    let train_ok = std::fs::read(&m1).unwrap() == std::fs::read(&m2).unwrap()
        && std::fs::read(&l1).unwrap() == std::fs::read(&l2).unwrap();

    let eval = |model: &Path| {
        run(&[
            "eval",
            "--model",
            model.to_str().unwrap(),
            "--data",
            data_a.to_str().unwrap(),
        ])
        .0
    };
    let eval_ok = eval(&m1) == eval(&m2);
    score.record(
        7,
        "determinism",
        synth_ok && train_ok && eval_ok,
        &format!("synth {synth_ok}, train {train_ok}, eval {eval_ok}"),
    );
}

fn criterion_8_report(score: &mut Score) {
    let rows = [
        TableRow {
            label: "Custom YOLOv8 Model".into(),
            map: 0.995,
            precision: 0.981,
            recall: 0.988,
            epochs: None,
            loss_increase: None,
        },
    ];
    let table = render_table(&rows, TableStyle::Comparison);
    let line = table
        .lines()
        .find(|l| l.starts_with("Custom"))
        .unwrap_or("");
    let collapsed: String = line.split_whitespace().collect::<Vec<_>>().join(" ");
    let ok = collapsed == "Custom YOLOv8 Model 99.5% 98.1% 98.8%";
    score.record(8, "report fidelity", ok, &format!("row {line:?}"));
}

#[test]
fn acceptance() {
    let mut score = Score { failures: Vec::new() };
    let dir = tempfile::tempdir().unwrap();

    criterion_1_gradients(&mut score);
    criterion_2_oracles(&mut score);
    criterion_6_imaging(&mut score);
    criterion_8_report(&mut score);
    criterion_7_determinism(&mut score, dir.path());
    criterion_4_ablation(&mut score, &dir.path().join("ablate"));
    let trained = criterion_3_training(&mut score, &dir.path().join("e2e"));
    criterion_5_quantization(&mut score, &trained);
    let _ = (trained.map, trained.minutes);

    assert!(
        score.failures.is_empty(),
        "failed: {}",
        score.failures.join(", ")
    );
}
