//! `pilldet`: dataset synthesis, training, evaluation, detection,
//! quantization, benchmarking and ablation from one binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad flags. Configuration
//! resolves defaults <- config file <- flags; every run logs its resolved
//! values (with provenance) and seed to stderr.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use pilldet_core::announcer::{announce, DEFAULT_MAX_ITEMS};
use pilldet_core::dataset::{generate_split, make_catalog, DatasetManifest, Split};
use pilldet_core::detector::{build_model, Model, ModelConfig};
use pilldet_core::imaging::{AugmentConfig, Image};
use pilldet_core::metrics::{render_table, TableRow, TableStyle};
use pilldet_core::pipeline::{
    detect_image, evaluate_model, evaluate_quantized_model, PipelineConfig,
};
use pilldet_core::postprocess::format_detection_line;
use pilldet_core::quantize::{calibrate, fidelity_report, quantize_model, QuantizedModel};
use pilldet_core::train::{
    ablate, train_with_progress, AblationToggle, TrainConfig, TrainData, TrainMode,
};

#[derive(Parser)]
#[command(
    name = "pilldet",
    about = "Pill detection pipeline: synthesize data, train, evaluate, quantize, announce",
    version
)]
struct Cli {
    /// line-oriented key=value configuration file; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pill dataset (default: 32 classes, 160px)
    Synth {
        /// number of pill classes [default: 32]
        #[arg(long)]
        classes: Option<usize>,
        /// training images [default: 200]
        #[arg(long)]
        train: Option<usize>,
        /// validation images [default: 50]
        #[arg(long)]
        val: Option<usize>,
        /// square canvas extent in pixels [default: 160]
        #[arg(long)]
        size: Option<usize>,
        /// RNG seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector (defaults: lr 0.001 decayed x0.1 after epoch 30,
    /// batch 32, 50 epochs, fine-tune lr 0.0001)
    Train {
        /// dataset directory (as produced by synth)
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// epochs [default: 50]
        #[arg(long)]
        epochs: Option<usize>,
        /// batch size [default: 32]
        #[arg(long)]
        batch: Option<usize>,
        /// initial learning rate [default: 0.001]
        #[arg(long)]
        lr: Option<f64>,
        /// epoch after which the rate decays x0.1 [default: 30]
        #[arg(long)]
        decay_epoch: Option<usize>,
        #[arg(long, value_enum, default_value_t = ModeArg::Scratch)]
        mode: ModeArg,
        /// disable one component, as in the ablation study
        #[arg(long, value_enum, default_value_t = AblationArg::Full)]
        ablation: AblationArg,
        /// RNG seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// per-stage conv channels, comma-separated [default: 8,16,32,64]
        #[arg(long)]
        channels: Option<String>,
        /// warm-start from an existing checkpoint
        #[arg(long)]
        init: Option<PathBuf>,
        /// write the per-epoch training log CSV here
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's validation split
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// confidence threshold [default: 0.25]
        #[arg(long)]
        conf: Option<f64>,
        /// NMS IoU threshold [default: 0.45]
        #[arg(long)]
        nms: Option<f64>,
        /// treat --model as a quantized checkpoint and run the integer path
        #[arg(long)]
        quantized: bool,
        /// also write the per-class report CSV here
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run detection on one image (PPM), optionally as utterance text
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// render the detections as auditory-feedback text
        #[arg(long)]
        announce: bool,
        /// pill catalog CSV (required with --announce)
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// confidence threshold [default: 0.25]
        #[arg(long)]
        conf: Option<f64>,
        /// NMS IoU threshold [default: 0.45]
        #[arg(long)]
        nms: Option<f64>,
    },
    /// Post-training full-integer quantization of a checkpoint
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// dataset directory whose training split calibrates activations
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare float vs quantized paths: fidelity and median latency
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        qmodel: PathBuf,
        /// dataset directory supplying probe images (validation split)
        #[arg(long)]
        data: PathBuf,
        /// number of probe images [default: 100]
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train all four ablation configurations and print the study table
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// run every configuration
        #[arg(long)]
        all: bool,
        /// subset of configurations (full must be included)
        #[arg(long, value_enum, value_delimiter = ',')]
        configs: Vec<AblationArg>,
        /// epochs per configuration [default: 50]
        #[arg(long)]
        epochs: Option<usize>,
        /// RNG seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// per-stage conv channels, comma-separated [default: 8,16,32,64]
        #[arg(long)]
        channels: Option<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Scratch,
    Finetune,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblationArg {
    Full,
    MinusBatchnorm,
    MinusAugmentation,
    MinusLeakyRelu,
}

impl From<AblationArg> for AblationToggle {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => AblationToggle::Full,
            AblationArg::MinusBatchnorm => AblationToggle::MinusBatchnorm,
            AblationArg::MinusAugmentation => AblationToggle::MinusAugmentation,
            AblationArg::MinusLeakyRelu => AblationToggle::MinusLeakyRelu,
        }
    }
}

/// key=value lines, '#' comments; unknown keys are rejected up front so
/// typos fail loudly.
struct FileConfig(HashMap<String, String>);

const KNOWN_KEYS: &[&str] = &[
    "classes", "train", "val", "size", "seed", "epochs", "batch", "lr", "decay_epoch", "conf",
    "nms", "n", "channels",
];

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
                let k = k.trim();
                if !KNOWN_KEYS.contains(&k) {
                    bail!("{}:{}: unknown config key {k:?}", path.display(), i + 1);
                }
                map.insert(k.to_string(), v.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    /// defaults <- file <- flag, logging the winning source.
    fn resolve<T: FromStr + std::fmt::Display>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T> {
        let (value, source) = match flag {
            Some(v) => (v, "flag"),
            None => match self.0.get(key) {
                Some(raw) => (
                    raw.parse()
                        .map_err(|_| anyhow::anyhow!("config key {key}: bad value {raw:?}"))?,
                    "config file",
                ),
                None => (default, "default"),
            },
        };
        eprintln!("config: {key}={value} ({source})");
        Ok(value)
    }
}

fn parse_channels(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .with_context(|| format!("bad channel count {v:?}"))
        })
        .collect()
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(&dir.join("manifest.txt"))
        .with_context(|| format!("loading dataset manifest from {}", dir.display()))
}

fn pipeline_config(conf: f64, nms: f64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.decode.conf_thresh = conf;
    cfg.decode.nms_iou_thresh = nms;
    cfg
}

fn print_eval(report: &pilldet_core::metrics::EvalReport, label: &str) {
    let rows = [TableRow {
        label: label.to_string(),
        map: report.map,
        precision: report.precision,
        recall: report.recall,
        epochs: None,
        loss_increase: None,
    }];
    print!("{}", render_table(&rows, TableStyle::Comparison));
    print!("{}", report.to_csv());
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth {
            classes,
            train,
            val,
            size,
            seed,
            out,
        } => {
            let classes = file.resolve(classes, "classes", 32)?;
            let n_train = file.resolve(train, "train", 200)?;
            let n_val = file.resolve(val, "val", 50)?;
            let size = file.resolve(size, "size", 160)?;
            let seed = file.resolve(seed, "seed", 0u64)?;
            eprintln!("seed: {seed}");
            let catalog = make_catalog(classes, seed)?;
            let manifest = generate_split(&catalog, n_train, n_val, seed, size, &out)?;
            println!(
                "wrote {} train / {} val images to {}",
                n_train,
                n_val,
                manifest.root.display()
            );
        }
        Command::Train {
            data,
            out,
            epochs,
            batch,
            lr,
            decay_epoch,
            mode,
            ablation,
            seed,
            channels,
            init,
            log,
        } => {
            let epochs = file.resolve(epochs, "epochs", 50)?;
            let batch = file.resolve(batch, "batch", 32)?;
            let lr = file.resolve(lr, "lr", 0.001)?;
            let decay_epoch = file.resolve(decay_epoch, "decay_epoch", 30.min(epochs - 1))?;
            let seed = file.resolve(seed, "seed", 0u64)?;
            let channels =
                file.resolve(channels, "channels", "8,16,32,64".to_string())?;
            eprintln!("seed: {seed}");
            let manifest = load_manifest(&data)?;
            let train_set = manifest.load_split(Split::Train)?;
            let val_set = manifest.load_split(Split::Val)?;
            let catalog = manifest.load_catalog()?;

            let mut model_cfg = ModelConfig {
                input_size: manifest.canvas,
                num_classes: catalog.len(),
                stage_channels: parse_channels(&channels)?,
                seed,
                ..ModelConfig::default()
            };
            let mut train_cfg = TrainConfig {
                lr0: lr,
                batch_size: batch,
                epochs,
                decay_epoch,
                seed,
                ..TrainConfig::default()
            };
            AblationToggle::from(ablation).apply(&mut model_cfg, &mut train_cfg);
            let model = match init {
                Some(path) => Model::load(&path)?,
                None => build_model(&model_cfg)?,
            };
            let data = TrainData {
                train: &train_set,
                val: if val_set.is_empty() {
                    None
                } else {
                    Some(&val_set)
                },
                augment: AugmentConfig::default(),
            };
            let mode = match mode {
                ModeArg::Scratch => TrainMode::Scratch,
                ModeArg::Finetune => TrainMode::Finetune,
            };
            let (model, train_log) =
                train_with_progress(model, &data, &train_cfg, mode, |r| {
                    let val = r
                        .val
                        .map(|(m, p, rc)| format!(" val mAP {m:.4} P {p:.4} R {rc:.4}"))
                        .unwrap_or_default();
                    eprintln!(
                        "epoch {:3} lr {:.5} loss {:.4}{}",
                        r.epoch, r.lr, r.loss.total, val
                    );
                })?;
            model.save(&out)?;
            println!("checkpoint written to {}", out.display());
            if let Some(path) = log {
                std::fs::write(&path, train_log.to_csv())?;
                println!("training log written to {}", path.display());
            }
            if let Some(e) = train_log.epochs_to_converge {
                println!("epochs_to_converge: {e}");
            }
        }
        Command::Eval {
            model,
            data,
            conf,
            nms,
            quantized,
            csv,
        } => {
            let conf = file.resolve(conf, "conf", 0.25)?;
            let nms = file.resolve(nms, "nms", 0.45)?;
            let manifest = load_manifest(&data)?;
            let val_set = manifest.load_split(Split::Val)?;
            let cfg = pipeline_config(conf, nms);
            let report = if quantized {
                let qm = QuantizedModel::load(&model)?;
                evaluate_quantized_model(&qm, &val_set, &cfg)?
            } else {
                let m = Model::load(&model)?;
                evaluate_model(&m, &val_set, &cfg)?
            };
            let label = if quantized {
                "Quantized Model"
            } else {
                "Float Model"
            };
            print_eval(&report, label);
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv())?;
            }
        }
        Command::Detect {
            model,
            image,
            announce: do_announce,
            catalog,
            conf,
            nms,
        } => {
            let conf = file.resolve(conf, "conf", 0.25)?;
            let nms = file.resolve(nms, "nms", 0.45)?;
            let m = Model::load(&model)?;
            let img = Image::read_ppm(&image)?;
            let cfg = pipeline_config(conf, nms);
            let dets = detect_image(&m, &img, &cfg)?;
            let image_id = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            for d in &dets {
                println!("{}", format_detection_line(&image_id, d));
            }
            if do_announce {
                let catalog_path = catalog
                    .context("--announce requires --catalog pointing at the catalog CSV")?;
                let records = pilldet_core::dataset::load_catalog(&catalog_path)?;
                let u = announce(&dets, &records, DEFAULT_MAX_ITEMS)?;
                println!("{}", u.text);
            }
        }
        Command::Quantize { model, calib, out } => {
            let m = Model::load(&model)?;
            let manifest = load_manifest(&calib)?;
            let images: Vec<Image> = manifest
                .load_split(Split::Train)?
                .into_iter()
                .map(|a| a.image)
                .collect();
            let stats = calibrate(&m, &images)?;
            if stats.constant_edge_warnings > 0 {
                eprintln!(
                    "warning: {} constant activation edge(s), scale floored",
                    stats.constant_edge_warnings
                );
            }
            let qm = quantize_model(&m, &stats)?;
            qm.save(&out)?;
            println!("quantized checkpoint written to {}", out.display());
        }
        Command::Bench {
            model,
            qmodel,
            data,
            n,
        } => {
            let n = file.resolve(n, "n", 100)?;
            let m = Model::load(&model)?;
            let qm = QuantizedModel::load(&qmodel)?;
            let manifest = load_manifest(&data)?;
            let val_set = manifest.load_split(Split::Val)?;
            if val_set.is_empty() {
                bail!("dataset has no validation images to probe with");
            }
            let probes: Vec<Image> = val_set
                .iter()
                .cycle()
                .take(n)
                .map(|a| a.image.clone())
                .collect();
            let report = fidelity_report(&m, &qm, &probes)?;
            print!("{}", report.render());
        }
        Command::Ablate {
            data,
            all,
            configs,
            epochs,
            seed,
            channels,
        } => {
            let epochs = file.resolve(epochs, "epochs", 50)?;
            let seed = file.resolve(seed, "seed", 0u64)?;
            let channels =
                file.resolve(channels, "channels", "8,16,32,64".to_string())?;
            eprintln!("seed: {seed}");
            let toggles: Vec<AblationToggle> = if all {
                AblationToggle::ALL.to_vec()
            } else if configs.is_empty() {
                bail!("pass --all or --configs");
            } else {
                configs.into_iter().map(Into::into).collect()
            };
            let manifest = load_manifest(&data)?;
            let train_set = manifest.load_split(Split::Train)?;
            let val_set = manifest.load_split(Split::Val)?;
            let catalog = manifest.load_catalog()?;
            let model_cfg = ModelConfig {
                input_size: manifest.canvas,
                num_classes: catalog.len(),
                stage_channels: parse_channels(&channels)?,
                seed,
                ..ModelConfig::default()
            };
            let train_cfg = TrainConfig {
                epochs,
                decay_epoch: 30.min(epochs - 1),
                seed,
                ..TrainConfig::default()
            };
            let report = ablate(&model_cfg, &train_cfg, &train_set, &val_set, seed, &toggles)?;
            for row in &report.rows {
                if let Some(err) = &row.error {
                    eprintln!("warning: {} failed: {err}", row.toggle.label());
                }
            }
            print!(
                "{}",
                render_table(&report.to_table_rows(), TableStyle::Ablation)
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
