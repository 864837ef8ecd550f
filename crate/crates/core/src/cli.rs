//! The work behind each `logo` subcommand.
//!
//! Every command takes a resolved [`RunConfig`] and an output directory and
//! returns plain values; argument parsing and exit codes live in the binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{crop_resize, sample_crop_rect};
use crate::checkpoint::load_checkpoint;
use crate::config::{parse_override, DataFormat, EvalMode, RunConfig};
use crate::data::{
    export_image_folder, generate_synthetic, load_cifar_binary, load_image, load_image_folder, Dataset,
};
use crate::error::{io_err, Error, Result};
use crate::eval::{knn_top1, linear_probe, AffinityReport, CropMeta, FeatureBank, Split};
use crate::metrics::{knn_curve, read_metrics, JsonLinesSink, MetricRecord, MetricsSink};
use crate::plot::{bar_chart, line_chart, Series};
use crate::tensor::Tensor;
use crate::trainer::{fit, resize_images, FitOptions, Monitor, TrainState};

/// Exit status for a failed command: 2 for bad input, 1 for runtime trouble.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Checkpoint(_) => 2,
        Error::NonFinite(_) | Error::Format { .. } | Error::Decode(_) | Error::Io { .. } => 1,
    }
}

/// Config file pairs, then `key=value` overrides in order, then the seed.
pub fn resolve_config(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut pairs = match file {
        Some(p) => RunConfig::load(p)?,
        None => Vec::new(),
    };
    for o in overrides {
        pairs.push(parse_override(o)?);
    }
    let mut cfg = RunConfig::from_pairs(&pairs)?;
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    cfg.train.validate()?;
    Ok(cfg)
}

/// `out` if given, else a fresh `runs/<command>-<unix seconds>`.
pub fn run_dir(out: Option<&Path>, command: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            PathBuf::from("runs").join(format!("{command}-{secs}"))
        }
    };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

pub fn write_config_echo(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("config.txt");
    fs::write(&path, cfg.to_text()).map_err(io_err(&path))?;
    Ok(path)
}

/// Training data plus the images used for monitoring and evaluation.
pub struct Data {
    pub train: Dataset,
    pub train_idx: Vec<usize>,
    /// Separate validation set; `None` means `val_idx` indexes `train`.
    pub val: Option<Dataset>,
    pub val_idx: Vec<usize>,
}

impl Data {
    pub fn val_set(&self) -> &Dataset {
        self.val.as_ref().unwrap_or(&self.train)
    }
}

fn load_source(cfg: &RunConfig, path: Option<&PathBuf>, key: &str) -> Result<Dataset> {
    let need = || path.ok_or_else(|| Error::Config(format!("{key} is required for data.format other than synthetic")));
    match cfg.data_format {
        DataFormat::Synthetic => generate_synthetic(&cfg.synth),
        DataFormat::Folder => load_image_folder(need()?),
        DataFormat::Cifar => load_cifar_binary(need()?),
    }
}

/// Loads `data.train` and either `data.val` or a seeded hold-out split.
pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let mut train = load_source(cfg, cfg.data_train.as_ref(), "data.train")?;
    let separate = cfg.data_format != DataFormat::Synthetic && cfg.data_val.is_some();
    let val = if separate {
        Some(load_source(cfg, cfg.data_val.as_ref(), "data.val")?)
    } else {
        train.hold_out(cfg.data_holdout, cfg.train.seed)?;
        None
    };
    let train_idx = train.split("train")?.to_vec();
    let val_idx = match &val {
        Some(v) => v.split("train")?.to_vec(),
        None => train.split("val")?.to_vec(),
    };
    Ok(Data {
        train,
        train_idx,
        val,
        val_idx,
    })
}

/// Records metrics to disk and remembers the latest evaluation.
struct RunSink {
    file: JsonLinesSink,
    last_knn: Option<f64>,
}

impl MetricsSink for RunSink {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        if let MetricRecord::Eval(e) = rec {
            log::info!("epoch {} step {}: knn_top1 {:.2}%", e.epoch, e.step, 100.0 * e.knn_top1);
            self.last_knn = Some(e.knn_top1);
        }
        self.file.record(rec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_knn: Option<f64>,
    pub dir: PathBuf,
}

/// Trains (or resumes) and leaves `config.txt`, `metrics.jsonl`,
/// `last.ckpt` and `best.ckpt` in `dir`.
pub fn cmd_train(cfg: &RunConfig, dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let data = load_data(cfg)?;
    let mut state = match resume {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::new(cfg.train.clone(), data.train_idx.len())?,
    };
    let mut echo = cfg.clone();
    echo.train = state.config.clone();
    write_config_echo(&echo, dir)?;

    let size = state.config.augment.output_size_global;
    let monitor = if cfg.eval_every > 0 && !data.val_idx.is_empty() {
        let val = data.val_set();
        Some(Monitor {
            train_images: resize_images(&data.train.images(&data.train_idx)?, size),
            train_labels: data.train.labels(&data.train_idx)?,
            val_images: resize_images(&val.images(&data.val_idx)?, size),
            val_labels: val.labels(&data.val_idx)?,
            knn: cfg.knn,
            every: cfg.eval_every,
        })
    } else {
        None
    };
    let opts = FitOptions {
        monitor,
        checkpoint_dir: Some(dir.to_path_buf()),
        checkpoint_every: cfg.checkpoint_every,
    };
    let mut sink = RunSink {
        file: JsonLinesSink::append(dir.join("metrics.jsonl"))?,
        last_knn: None,
    };
    fit(&mut state, &data.train, &data.train_idx, &opts, &mut sink)?;
    Ok(TrainSummary {
        steps: state.step,
        final_knn: sink.last_knn,
        dir: dir.to_path_buf(),
    })
}

/// Top-1 accuracy (a fraction) of frozen backbone features.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, dir: &Path) -> Result<f64> {
    let mut state = load_checkpoint(checkpoint)?;
    let data = load_data(cfg)?;
    if data.val_idx.is_empty() {
        return Err(Error::Config("evaluation needs a non-empty data.val or data.holdout".into()));
    }
    let size = state.config.augment.output_size_global;
    let val = data.val_set();
    let features = |enc: &mut crate::encoder::EncoderState<f32>, ds: &Dataset, idx: &[usize]| {
        enc.features(&resize_images(&ds.images(idx)?, size), 256)
    };
    let ft = features(&mut state.encoder, &data.train, &data.train_idx)?;
    let fv = features(&mut state.encoder, val, &data.val_idx)?;
    let train = FeatureBank::new(&ft, data.train.labels(&data.train_idx)?, Split::Train)?;
    let val = FeatureBank::new(&fv, val.labels(&data.val_idx)?, Split::Val)?;
    let (mode, acc) = match cfg.eval_mode {
        EvalMode::Knn => ("knn", knn_top1(&train, &val, cfg.knn)?),
        EvalMode::Linear => ("linear", linear_probe(&train, &val, cfg.probe)?),
    };
    let record = serde_json::json!({
        "mode": mode,
        "top1": acc,
        "checkpoint": checkpoint.display().to_string(),
        "train_size": train.len(),
        "val_size": val.len(),
    });
    let path = dir.join("eval.json");
    fs::write(&path, format!("{record}\n")).map_err(io_err(&path))?;
    write_config_echo(cfg, dir)?;
    Ok(acc)
}

/// The printed result line, e.g. `knn_top1=87.50`.
pub fn eval_line(mode: EvalMode, acc: f64) -> String {
    let name = match mode {
        EvalMode::Knn => "knn_top1",
        EvalMode::Linear => "linear_top1",
    };
    format!("{name}={:.2}", 100.0 * acc)
}

/// Compares a reference crop with `affinity.crops_per_image` local crops of
/// every image, by cosine and by the learned regressor.
pub fn cmd_affinity(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], dir: &Path) -> Result<AffinityReport> {
    if images.len() < 2 {
        return Err(Error::Config("affinity needs at least two images for cross-image crops".into()));
    }
    if cfg.affinity_reference >= images.len() {
        return Err(Error::Config(format!(
            "affinity.reference = {} but only {} images were given",
            cfg.affinity_reference,
            images.len()
        )));
    }
    if cfg.affinity_crops == 0 {
        return Err(Error::Config("affinity.crops_per_image must be positive".into()));
    }
    let mut state = load_checkpoint(checkpoint)?;
    let aug = state.config.augment.clone();
    let samples = images
        .iter()
        .enumerate()
        .map(|(i, p)| load_image(p, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.affinity_seed);
    let mut crop = |image: usize, id: String| -> Result<(CropMeta, Tensor<f32>)> {
        let s = &samples[image];
        let r = sample_crop_rect(&mut rng, (s.height(), s.width()), aug.local_scale, aug.aspect_ratio)?;
        let meta = CropMeta {
            id,
            image,
            top: r.top,
            left: r.left,
            height: r.height,
            width: r.width,
        };
        Ok((meta, crop_resize(&s.pixels, &r, aug.output_size_local)))
    };
    let reference = crop(cfg.affinity_reference, "reference".into())?;
    let mut candidates = Vec::with_capacity(images.len() * cfg.affinity_crops);
    for i in 0..images.len() {
        for j in 0..cfg.affinity_crops {
            candidates.push(crop(i, format!("img{i}_crop{j}"))?);
        }
    }
    let report = crate::eval::affinity_compare(
        &mut state.encoder,
        &mut state.regressor,
        (&reference.0, &reference.1),
        &candidates,
    )?;
    let text = dir.join("affinity.txt");
    fs::write(&text, report.to_text()).map_err(io_err(&text))?;
    let ids: Vec<String> = report.scores.iter().map(|s| s.meta.id.clone()).collect();
    let svg = bar_chart(
        &ids,
        &[
            ("cosine".into(), report.scores.iter().map(|s| s.cosine_norm).collect()),
            ("regressor".into(), report.scores.iter().map(|s| s.regressor_norm).collect()),
        ],
        "normalized similarity to the reference crop",
    );
    let chart = dir.join("affinity.svg");
    fs::write(&chart, svg).map_err(io_err(&chart))?;
    write_config_echo(cfg, dir)?;
    Ok(report)
}

fn log_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(parent) if stem == "metrics" => parent.to_string_lossy().into_owned(),
        _ => stem,
    }
}

/// Overlays the KNN curves of the given logs in `dir/knn_top1.svg`.
/// Returns the chart path and one warning per skipped line.
pub fn cmd_plot(logs: &[PathBuf], dir: &Path) -> Result<(PathBuf, Vec<String>)> {
    if logs.is_empty() {
        return Err(Error::Config("plot needs at least one metrics log".into()));
    }
    let mut series = Vec::with_capacity(logs.len());
    let mut warnings = Vec::new();
    for path in logs {
        let (records, w) = read_metrics(path)?;
        warnings.extend(w);
        series.push(Series {
            label: log_label(path),
            points: knn_curve(&records).into_iter().map(|(s, v)| (s as f64, v)).collect(),
        });
    }
    let svg = line_chart(&series, "KNN top-1 during training", "step", "knn_top1");
    let out = dir.join("knn_top1.svg");
    fs::write(&out, svg).map_err(io_err(&out))?;
    Ok((out, warnings))
}

/// Writes the synthetic dataset as an image folder; returns the image count.
pub fn cmd_make_synth(cfg: &RunConfig, dir: &Path) -> Result<usize> {
    let ds = generate_synthetic(&cfg.synth)?;
    export_image_folder(&ds, dir)?;
    write_config_echo(cfg, dir)?;
    Ok(ds.len())
}
