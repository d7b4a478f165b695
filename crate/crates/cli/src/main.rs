//! Command-line entry point tying the pipeline together.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error (missing or
//! unreadable files, bad checkpoints), 3 numeric failure. The `PEAC_DATA_ROOT`
//! environment variable supplies the default data directory when `--data` /
//! `--images` is omitted.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use ndarray::Array2;
use peac_core::analysis::{
    best_buddies, cosegment, dense_embeddings, matching_stability, top_pairs,
    write_embedding_map, AnalysisError,
};
use peac_core::data::{
    generate_phantom_set, load_image, load_image_dir, materialize_phantoms, save_label_png,
    to_square, DataError, Phantom,
};
use peac_core::geometry::GeometryError;
use peac_core::model::{ModelError, ParamStore};
use peac_core::pretrain::{StepRecord, TrainConfig, TrainError, Trainer};
use peac_core::probe::{extract_features, linear_probe, ProbeError};
use peac_core::Real;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "peac",
    version,
    about = "Grid-aligned two-crop self-supervised pretraining with global/local \
             embedding consistency, plus correspondence and co-segmentation tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student-teacher model on a directory of images
    Pretrain {
        /// TOML config file; keys are the training config fields
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of training images (defaults to $PEAC_DATA_ROOT)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and the training log
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config epoch count
        #[arg(long)]
        epochs: Option<u32>,
        /// Overrides the config batch size
        #[arg(long)]
        batch_size: Option<usize>,
        /// Overrides the config learning rate
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Materialize synthetic phantom images with landmark ground truth
    Phantoms {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side in pixels
        #[arg(long, default_value_t = 96)]
        side: usize,
    },
    /// Emit the top-k correspondence pairs between two images
    Match {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        /// Output file for correspondence lines
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Dense-grid window in pixels (defaults to the encoder patch side)
        #[arg(long)]
        window: Option<usize>,
        /// Dense-grid stride in pixels (defaults to half the window)
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Zero-shot co-segmentation of an image directory into label masks
    Coseg {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of images (defaults to $PEAC_DATA_ROOT)
        #[arg(long)]
        images: Option<PathBuf>,
        /// Number of clusters
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Linear probe of frozen teacher features against labels.csv classes
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with images and labels.csv (defaults to $PEAC_DATA_ROOT)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Grid-vs-similarity matching stability report across checkpoints
    Stability {
        /// Directory containing *.ckpt files
        #[arg(long)]
        ckpts: PathBuf,
        /// Directory of images (defaults to $PEAC_DATA_ROOT)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        plans: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export the dense embedding map of one image
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
}

enum AppError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::InvalidConfig(_)
            | TrainError::ConfigParse(_)
            | TrainError::Geometry(_)
            | TrainError::Model(_)
            | TrainError::Objective(_) => AppError::Usage(e.to_string()),
            TrainError::NonFiniteLoss { .. } => AppError::Numeric(e.to_string()),
            TrainError::Io(_)
            | TrainError::BadMagic
            | TrainError::VersionMismatch { .. }
            | TrainError::Corrupt(_) => AppError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        match &e {
            DataError::InvalidSpec(_) => AppError::Usage(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for AppError {
    fn from(e: AnalysisError) -> Self {
        match &e {
            AnalysisError::BadStride { .. }
            | AnalysisError::WindowMismatch { .. }
            | AnalysisError::BadClusterCount(_)
            | AnalysisError::DimMismatch { .. }
            | AnalysisError::Model(_)
            | AnalysisError::Geometry(_)
            | AnalysisError::ImageIncompatible { .. } => AppError::Usage(e.to_string()),
            AnalysisError::NotEnough { .. }
            | AnalysisError::Io(_)
            | AnalysisError::BadEmbeddingFile(_) => AppError::Data(e.to_string()),
        }
    }
}

impl From<ProbeError> for AppError {
    fn from(e: ProbeError) -> Self {
        match &e {
            ProbeError::Model(_) => AppError::Usage(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<GeometryError> for AppError {
    fn from(e: GeometryError) -> Self {
        AppError::Usage(e.to_string())
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        AppError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn resolve_dir(flag: Option<PathBuf>, what: &str) -> Result<PathBuf, AppError> {
    flag.or_else(|| std::env::var_os("PEAC_DATA_ROOT").map(PathBuf::from)).ok_or_else(|| {
        AppError::Usage(format!("{what} not given and PEAC_DATA_ROOT is unset"))
    })
}

fn load_trainer(path: &Path) -> Result<Trainer<Real>, AppError> {
    Ok(Trainer::load_checkpoint(path)?)
}

fn dense_grid_params(
    trainer: &Trainer<Real>,
    window: Option<usize>,
    stride: Option<usize>,
) -> (usize, usize) {
    let window = window.unwrap_or(trainer.encoder_config().patch_side);
    let stride = stride.unwrap_or_else(|| (window / 2).max(1));
    (window, stride)
}

fn run(command: Command) -> Result<(), AppError> {
    match command {
        Command::Pretrain { config, data, out, seed, epochs, batch_size, lr } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::from_file(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(epochs) = epochs {
                cfg.epochs = epochs;
            }
            if let Some(batch_size) = batch_size {
                cfg.batch_size = batch_size;
            }
            if let Some(lr) = lr {
                cfg.lr = lr;
            }
            cfg.validate()?;
            let data = resolve_dir(data, "--data")?;
            // Raw images must be at least 32 px even for tiny grids.
            let target = cfg.grid()?.seed_side().max(32);
            let dataset = load_image_dir::<Real>(&data, target)?;
            let images: Vec<Array2<Real>> =
                dataset.items.into_iter().map(|i| i.image).collect();

            std::fs::create_dir_all(&out)?;
            let mut trainer = Trainer::<Real>::new(cfg.clone(), images.len())?;
            println!("# command: pretrain");
            println!("# seed: {}", cfg.seed);
            println!(
                "# grid: n={} m={} k={}  encoder: depth={} dim={} heads={}",
                cfg.grid_n, cfg.grid_m, cfg.grid_k, cfg.depth, cfg.dim, cfg.heads
            );
            println!(
                "# images: {}  steps/epoch: {}  total steps: {}",
                images.len(),
                trainer.steps_per_epoch(),
                trainer.total_steps()
            );

            let mut log = std::io::BufWriter::new(std::fs::File::create(
                out.join("train_log.jsonl"),
            )?);
            let spe = trainer.steps_per_epoch();
            let ckpt_every = cfg.ckpt_every_epochs as u64 * spe;
            while trainer.step() < trainer.total_steps() {
                let executed = trainer.step();
                let lr_now = trainer.current_lr();
                let idxs = trainer.next_batch_indices(images.len());
                let batch: Vec<&Array2<Real>> = idxs.iter().map(|&i| &images[i]).collect();
                let bundle = trainer.train_step(&batch)?;
                writeln!(log, "{}", StepRecord::new(executed, lr_now, &bundle).to_json())?;
                let done = executed + 1;
                if done % spe == 0 {
                    println!(
                        "epoch {:>4}  step {:>6}  lr {:.5}  total {:.4}",
                        done / spe,
                        done,
                        lr_now,
                        bundle.total
                    );
                }
                if ckpt_every > 0 && done % ckpt_every == 0 && done < trainer.total_steps() {
                    trainer.save_checkpoint(&out.join(format!("ckpt_step_{done:06}.ckpt")))?;
                }
            }
            log.flush()?;
            trainer.save_checkpoint(&out.join("final.ckpt"))?;
            println!("saved {}", out.join("final.ckpt").display());
            Ok(())
        }
        Command::Phantoms { out, count, seed, side } => {
            println!("# command: phantoms");
            println!("# seed: {seed}");
            let phantoms: Vec<Phantom<Real>> = generate_phantom_set(count, side, seed)?;
            materialize_phantoms(&out, &phantoms)?;
            println!("wrote {count} phantoms to {}", out.display());
            Ok(())
        }
        Command::Match { ckpt, image_a, image_b, out, top, window, stride, seed } => {
            let trainer = load_trainer(&ckpt)?;
            let (window, stride) = dense_grid_params(&trainer, window, stride);
            let side = trainer.encoder_config().crop_side();
            let store = &trainer.model().teacher;
            let cfg = trainer.encoder_config();

            let a = load_image::<Real>(&image_a, side)?;
            let b = load_image::<Real>(&image_b, side)?;
            let map_a = dense_embeddings(store, cfg, &a, window, stride, "a")?;
            let map_b = dense_embeddings(store, cfg, &b, window, stride, "b")?;
            let bbps = best_buddies(&map_a, &map_b)?;
            let pairs = top_pairs(&map_a, &map_b, &bbps, top, seed);

            println!("# command: match");
            println!("# seed: {seed}");
            println!("# bbps: {}  emitted: {}", bbps.len(), pairs.len());
            let mut f = std::io::BufWriter::new(std::fs::File::create(&out)?);
            writeln!(f, "# seed: {seed}")?;
            writeln!(f, "# window: {window} stride: {stride}")?;
            writeln!(f, "# row_a col_a row_b col_b similarity")?;
            for p in &pairs {
                writeln!(f, "{} {} {} {} {:.6}", p.a.0, p.a.1, p.b.0, p.b.1, p.similarity)?;
            }
            f.flush()?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Coseg { ckpt, images, k, out, window, stride, seed } => {
            let trainer = load_trainer(&ckpt)?;
            let (window, stride) = dense_grid_params(&trainer, window, stride);
            let side = trainer.encoder_config().crop_side();
            let dir = resolve_dir(images, "--images")?;
            let dataset = load_image_dir::<Real>(&dir, side)?;
            let inputs: Vec<(String, Array2<Real>)> = dataset
                .items
                .iter()
                .map(|item| (item.name.clone(), to_square(&item.image, side)))
                .collect();

            println!("# command: coseg");
            println!("# seed: {seed}");
            let masks = cosegment(
                &trainer.model().teacher,
                trainer.encoder_config(),
                &inputs,
                k,
                window,
                stride,
                seed,
            )?;
            std::fs::create_dir_all(&out)?;
            for (name, mask) in &masks {
                let path = out.join(format!("{name}.mask.png"));
                save_label_png(&path, mask)?;
            }
            let common = masks
                .first()
                .map(|(_, m)| m.iter().copied().max().unwrap_or(0))
                .unwrap_or(0);
            println!("wrote {} masks ({} common clusters) to {}", masks.len(), common, out.display());
            Ok(())
        }
        Command::Probe { ckpt, data, seed } => {
            let trainer = load_trainer(&ckpt)?;
            let dir = resolve_dir(data, "--data")?;
            let side = trainer.encoder_config().crop_side();
            let dataset = load_image_dir::<Real>(&dir, side)?;
            let labels = dataset.labels().ok_or_else(|| {
                AppError::Data(format!(
                    "probe needs a labels.csv (image,class) covering every image in {}",
                    dir.display()
                ))
            })?;
            let images: Vec<Array2<Real>> =
                dataset.items.iter().map(|i| to_square(&i.image, side)).collect();
            let features =
                extract_features(&trainer.model().teacher, trainer.encoder_config(), &images)?;
            let ckpt_id = ckpt.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let result = linear_probe(&features, &labels, seed, &ckpt_id)?;
            println!("# command: probe");
            println!("# seed: {seed}");
            print!("{result}");
            Ok(())
        }
        Command::Stability { ckpts, data, plans, seed } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&ckpts)
                .map_err(|e| AppError::Data(format!("cannot read {}: {e}", ckpts.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().map(|e| e == "ckpt").unwrap_or(false))
                .collect();
            paths.sort();
            let mut trainers = Vec::new();
            for p in &paths {
                trainers.push((
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    load_trainer(p)?,
                ));
            }
            if let Some(((_, first), rest)) = trainers.split_first() {
                for (name, t) in rest {
                    if t.encoder_config() != first.encoder_config() {
                        return Err(AppError::Usage(format!(
                            "checkpoint {name} has a different encoder configuration"
                        )));
                    }
                }
            }
            let dir = resolve_dir(data, "--data")?;
            let grid = trainers
                .first()
                .map(|(_, t)| t.grid())
                .ok_or_else(|| AppError::Data("no *.ckpt files found".into()))?;
            let dataset = load_image_dir::<Real>(&dir, grid.seed_side().max(32))?;
            let images: Vec<Array2<Real>> =
                dataset.items.into_iter().map(|i| i.image).collect();

            let stores: Vec<(String, &ParamStore<Real>)> = trainers
                .iter()
                .map(|(name, t)| (name.clone(), &t.model().teacher))
                .collect();
            let cfg = trainers[0].1.encoder_config();
            let report = matching_stability(&stores, cfg, grid, &images, plans, seed)?;
            println!("# command: stability");
            println!("# seed: {seed}");
            print!("{report}");
            Ok(())
        }
        Command::ExportEmbeddings { ckpt, image, out, window, stride } => {
            let trainer = load_trainer(&ckpt)?;
            let (window, stride) = dense_grid_params(&trainer, window, stride);
            let side = trainer.encoder_config().crop_side();
            let img = load_image::<Real>(&image, side)?;
            let id = image.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let map = dense_embeddings(
                &trainer.model().teacher,
                trainer.encoder_config(),
                &img,
                window,
                stride,
                &id,
            )?;
            write_embedding_map(&out, &map)?;
            println!("# command: export-embeddings");
            println!("wrote {} ({}x{} cells, dim {})", out.display(), map.g(), map.g(), map.dim());
            Ok(())
        }
    }
}
