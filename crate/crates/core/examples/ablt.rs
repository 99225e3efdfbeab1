use pilldet_core::dataset::{generate_split, make_catalog, Split};
use pilldet_core::detector::ModelConfig;
use pilldet_core::train::{ablate, AblationToggle, TrainConfig};

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let seed = 7u64;
    let epochs: usize = env_or("EPOCHS", 12);
    let decay: usize = env_or("DECAY", 8);
    let lr: f64 = env_or("LR", 0.001);
    let batch: usize = env_or("BATCH", 4);
    let classes: usize = env_or("CLASSES", 8);
    let n_train: usize = env_or("NTRAIN", 48);
    let n_val: usize = env_or("NVAL", 16);
    let catalog = make_catalog(classes, seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_split(&catalog, n_train, n_val, seed, 96, dir.path()).unwrap();
    let train_set = manifest.load_split(Split::Train).unwrap();
    let val_set = manifest.load_split(Split::Val).unwrap();
    let model_cfg = ModelConfig {
        input_size: 96,
        num_classes: classes,
        stage_channels: vec![8, 16, 32],
        seed,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        batch_size: batch,
        epochs,
        decay_epoch: decay,
        lr0: lr,
        seed,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let report = ablate(
        &model_cfg,
        &train_cfg,
        &train_set,
        &val_set,
        seed,
        &AblationToggle::ALL,
    )
    .unwrap();
    for r in &report.rows {
        println!(
            "{:30} map {:.3} conv {:?} final_val_loss {:.2} err {:?}",
            r.toggle.label(),
            r.map,
            r.epochs_to_converge,
            r.final_val_loss,
            r.error
        );
    }
    println!("in {:.1}s", t0.elapsed().as_secs_f64());
}
