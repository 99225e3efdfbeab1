use pilldet_core::dataset::{generate_split, make_catalog, Split};
use pilldet_core::detector::Model;
use pilldet_core::pipeline::{detect_image, PipelineConfig};
use pilldet_core::postprocess::iou;

fn main() {
    let seed = 7u64;
    let catalog = make_catalog(32, seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_split(&catalog, 200, 50, seed, 160, dir.path()).unwrap();
    let val_set = manifest.load_split(Split::Val).unwrap();
    let model = Model::load(std::path::Path::new("/tmp/exp_model.txt")).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.decode.conf_thresh = 0.001;

    let watch: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    for sample in &val_set {
        let dets = detect_image(&model, &sample.image, &cfg).unwrap();
        let w = sample.image.width as f64;
        let h = sample.image.height as f64;
        let gts: Vec<(usize, (f64, f64, f64, f64))> = sample
            .boxes
            .iter()
            .map(|b| {
                (
                    b.class_id,
                    (
                        (b.cx - b.w / 2.0) * w,
                        (b.cy - b.h / 2.0) * h,
                        (b.cx + b.w / 2.0) * w,
                        (b.cy + b.h / 2.0) * h,
                    ),
                )
            })
            .collect();
        for d in dets.iter().filter(|d| watch.contains(&d.class_id)) {
            if d.score < 0.05 {
                continue;
            }
            // best overlap against any gt, and against same-class gt
            let best_any = gts
                .iter()
                .map(|(c, g)| (iou(d.bbox, *g), *c))
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let (bi, bc) = best_any.unwrap_or((0.0, usize::MAX));
            let verdict = if bc == d.class_id && bi >= 0.5 {
                "TP"
            } else if bc == d.class_id {
                "FP-loc"
            } else if bi >= 0.3 {
                "FP-cls"
            } else {
                "FP-bg"
            };
            println!(
                "{} class {:2} score {:.3} {} (best iou {:.2} over gt class {})",
                sample.image_id, d.class_id, d.score, verdict, bi,
                if bc == usize::MAX { 999 } else { bc }
            );
        }
        for (c, g) in &gts {
            if !watch.contains(c) {
                continue;
            }
            let best = dets
                .iter()
                .filter(|d| d.class_id == *c)
                .map(|d| iou(d.bbox, *g))
                .fold(0.0f64, f64::max);
            if best < 0.5 {
                println!("{} MISS gt class {:2} (best same-class iou {:.2})", sample.image_id, c, best);
            }
        }
    }
}
