//! Flat `key = value` configuration with dotted namespaces.
//!
//! Every key is known up front; unknown keys and unparsable values are
//! errors. [`RunConfig::to_text`] writes a file that parses back to the same
//! configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::Range;
use crate::data::SynthConfig;
use crate::encoder::{PredictorKind, Variant};
use crate::error::{io_err, Error, Result};
use crate::eval::{KnnConfig, ProbeConfig};
use crate::trainer::{LambdaMode, LocalMeasure, ScheduleUnit, TrainConfig};

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_widths(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p)).collect()
}

fn enum_value<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(n, _)| *n == v.trim())
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("{key}: expected one of {}, got {v:?}", names.join("|")))
        })
}

const VARIANTS: [(&str, Variant); 2] = [("contrastive", Variant::Contrastive), ("noncontrastive", Variant::NonContrastive)];
const LAMBDA_MODES: [(&str, LambdaMode); 2] = [
    ("fixed_weight", LambdaMode::FixedWeight),
    ("gradient_ratio", LambdaMode::GradientRatio),
];
const MEASURES: [(&str, LocalMeasure); 2] = [("learned", LocalMeasure::Learned), ("cosine", LocalMeasure::Cosine)];
const SCHEDULES: [(&str, ScheduleUnit); 2] = [("step", ScheduleUnit::Step), ("epoch", ScheduleUnit::Epoch)];
const PREDICTORS: [(&str, PredictorKind); 2] = [("mlp", PredictorKind::Mlp), ("identity", PredictorKind::Identity)];
const FORMATS: [(&str, DataFormat); 3] = [
    ("folder", DataFormat::Folder),
    ("cifar", DataFormat::Cifar),
    ("synthetic", DataFormat::Synthetic),
];
const EVAL_MODES: [(&str, EvalMode); 2] = [("knn", EvalMode::Knn), ("linear", EvalMode::Linear)];
const PRESETS: [(&str, Preset); 2] = [("default", Preset::Default), ("compact", Preset::Compact)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: &T) -> &'static str {
    options.iter().find(|(_, t)| t == v).map(|(n, _)| *n).expect("every variant is named")
}

/// Keys and values of a training configuration, in a fixed order.
pub fn train_pairs(c: &TrainConfig) -> Vec<(&'static str, String)> {
    let a = &c.augment;
    let widths: Vec<String> = c.encoder.widths.iter().map(|w| w.to_string()).collect();
    vec![
        ("train.variant", name_of(&VARIANTS, &c.variant).into()),
        ("train.lambda", c.lambda.to_string()),
        ("train.lambda_mode", name_of(&LAMBDA_MODES, &c.lambda_mode).into()),
        ("train.local_measure", name_of(&MEASURES, &c.local_measure).into()),
        ("train.batch_size", c.batch_size.to_string()),
        ("train.epochs", c.epochs.to_string()),
        ("train.lr_max", c.lr_max.to_string()),
        ("train.lr_min", c.lr_min.to_string()),
        ("train.sgd_momentum", c.sgd_momentum.to_string()),
        ("train.weight_decay", c.weight_decay.to_string()),
        ("train.temperature", c.temperature.to_string()),
        ("train.ema", c.ema.to_string()),
        ("train.queue_size", c.queue_size.to_string()),
        ("train.symmetrize", c.symmetrize.to_string()),
        ("train.schedule", name_of(&SCHEDULES, &c.schedule).into()),
        ("train.seed", c.seed.to_string()),
        ("encoder.widths", widths.join(",")),
        ("encoder.embed_dim", c.encoder.embed_dim.to_string()),
        ("encoder.predictor", name_of(&PREDICTORS, &c.encoder.predictor).into()),
        ("encoder.predictor_hidden", c.encoder.predictor_hidden.to_string()),
        ("encoder.init_seed", c.encoder.init_seed.to_string()),
        ("regressor.hidden", c.regressor.hidden.to_string()),
        ("regressor.blocks", c.regressor.blocks.to_string()),
        ("regressor.init_seed", c.regressor.init_seed.to_string()),
        ("regressor.zero_init_output", c.regressor.zero_init_output.to_string()),
        ("regressor.grad_clip", c.regressor.grad_clip.to_string()),
        ("augment.global_scale_min", a.global_scale.min.to_string()),
        ("augment.global_scale_max", a.global_scale.max.to_string()),
        ("augment.local_scale_min", a.local_scale.min.to_string()),
        ("augment.local_scale_max", a.local_scale.max.to_string()),
        ("augment.ratio_min", a.aspect_ratio.min.to_string()),
        ("augment.ratio_max", a.aspect_ratio.max.to_string()),
        ("augment.global_size", a.output_size_global.to_string()),
        ("augment.local_size", a.output_size_local.to_string()),
        ("augment.flip_prob", a.flip_prob.to_string()),
        ("augment.jitter_prob", a.jitter_prob.to_string()),
        ("augment.grayscale_prob", a.grayscale_prob.to_string()),
        ("augment.blur_prob", a.blur_prob.to_string()),
        ("augment.brightness", a.brightness.to_string()),
        ("augment.contrast", a.contrast.to_string()),
        ("augment.saturation", a.saturation.to_string()),
        ("augment.hue", a.hue.to_string()),
        ("augment.blur_sigma_min", a.blur_sigma.min.to_string()),
        ("augment.blur_sigma_max", a.blur_sigma.max.to_string()),
    ]
}

/// Sets one training key; returns `Ok(false)` if the key is not a training key.
pub fn set_train_key(c: &mut TrainConfig, key: &str, v: &str) -> Result<bool> {
    let a = &mut c.augment;
    match key {
        "train.variant" => c.variant = enum_value(key, v, &VARIANTS)?,
        "train.lambda" => c.lambda = parse(key, v)?,
        "train.lambda_mode" => c.lambda_mode = enum_value(key, v, &LAMBDA_MODES)?,
        "train.local_measure" => c.local_measure = enum_value(key, v, &MEASURES)?,
        "train.batch_size" => c.batch_size = parse(key, v)?,
        "train.epochs" => c.epochs = parse(key, v)?,
        "train.lr_max" => c.lr_max = parse(key, v)?,
        "train.lr_min" => c.lr_min = parse(key, v)?,
        "train.sgd_momentum" => {
            c.sgd_momentum = parse(key, v)?;
            c.regressor.sgd_momentum = c.sgd_momentum;
        }
        "train.weight_decay" => {
            c.weight_decay = parse(key, v)?;
            c.regressor.weight_decay = c.weight_decay;
        }
        "train.temperature" => c.temperature = parse(key, v)?,
        "train.ema" => c.ema = parse(key, v)?,
        "train.queue_size" => c.queue_size = parse(key, v)?,
        "train.symmetrize" => c.symmetrize = parse_bool(key, v)?,
        "train.schedule" => c.schedule = enum_value(key, v, &SCHEDULES)?,
        "train.seed" => c.seed = parse(key, v)?,
        "encoder.widths" => c.encoder.widths = parse_widths(key, v)?,
        "encoder.embed_dim" => {
            c.encoder.embed_dim = parse(key, v)?;
            c.regressor.embed_dim = c.encoder.embed_dim;
        }
        "encoder.predictor" => c.encoder.predictor = enum_value(key, v, &PREDICTORS)?,
        "encoder.predictor_hidden" => c.encoder.predictor_hidden = parse(key, v)?,
        "encoder.init_seed" => c.encoder.init_seed = parse(key, v)?,
        "regressor.hidden" => c.regressor.hidden = parse(key, v)?,
        "regressor.blocks" => c.regressor.blocks = parse(key, v)?,
        "regressor.init_seed" => c.regressor.init_seed = parse(key, v)?,
        "regressor.zero_init_output" => c.regressor.zero_init_output = parse_bool(key, v)?,
        "regressor.grad_clip" => c.regressor.grad_clip = parse(key, v)?,
        "augment.global_scale_min" => a.global_scale.min = parse(key, v)?,
        "augment.global_scale_max" => a.global_scale.max = parse(key, v)?,
        "augment.local_scale_min" => a.local_scale.min = parse(key, v)?,
        "augment.local_scale_max" => a.local_scale.max = parse(key, v)?,
        "augment.ratio_min" => a.aspect_ratio.min = parse(key, v)?,
        "augment.ratio_max" => a.aspect_ratio.max = parse(key, v)?,
        "augment.global_size" => a.output_size_global = parse(key, v)?,
        "augment.local_size" => a.output_size_local = parse(key, v)?,
        "augment.flip_prob" => a.flip_prob = parse(key, v)?,
        "augment.jitter_prob" => a.jitter_prob = parse(key, v)?,
        "augment.grayscale_prob" => a.grayscale_prob = parse(key, v)?,
        "augment.blur_prob" => a.blur_prob = parse(key, v)?,
        "augment.brightness" => a.brightness = parse(key, v)?,
        "augment.contrast" => a.contrast = parse(key, v)?,
        "augment.saturation" => a.saturation = parse(key, v)?,
        "augment.hue" => a.hue = parse(key, v)?,
        "augment.blur_sigma_min" => a.blur_sigma = Range::new(parse(key, v)?, a.blur_sigma.max),
        "augment.blur_sigma_max" => a.blur_sigma = Range::new(a.blur_sigma.min, parse(key, v)?),
        _ => return Ok(false),
    }
    Ok(true)
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
        out.push((canonical_key(k.trim()), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` override argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    arg.split_once('=')
        .map(|(k, v)| (canonical_key(k.trim()), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override {arg:?} is not key=value")))
}

/// Bare keys such as `lambda` or `variant` are shorthand for `train.*`.
pub fn canonical_key(key: &str) -> String {
    if key.contains('.') || key == "preset" {
        key.to_string()
    } else {
        format!("train.{key}")
    }
}

/// Rebuilds a training configuration from its own key list.
pub fn train_config_from_pairs(pairs: &[(String, String)]) -> Result<TrainConfig> {
    let variant = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "train.variant")
        .map(|(k, v)| enum_value(k, v, &VARIANTS))
        .transpose()?
        .unwrap_or(Variant::Contrastive);
    let mut c = TrainConfig::for_variant(variant);
    for (k, v) in pairs {
        if !set_train_key(&mut c, k, v)? {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Folder,
    Cifar,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Knn,
    Linear,
}

/// Starting point that later keys refine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full-width backbone on 64/32 pixel views.
    Default,
    /// See [`TrainConfig::compact`].
    Compact,
}

/// Everything a command needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub data_format: DataFormat,
    pub data_train: Option<PathBuf>,
    pub data_val: Option<PathBuf>,
    /// Fraction of the training data held out for monitoring when no
    /// validation set is given.
    pub data_holdout: f64,
    pub knn: KnnConfig,
    pub eval_every: usize,
    pub eval_mode: EvalMode,
    pub probe: ProbeConfig,
    pub checkpoint_every: usize,
    pub synth: SynthConfig,
    pub affinity_crops: usize,
    pub affinity_reference: usize,
    pub affinity_seed: u64,
}

impl RunConfig {
    pub fn new(preset: Preset, variant: Variant) -> Self {
        let train = match preset {
            Preset::Default => TrainConfig::for_variant(variant),
            Preset::Compact => TrainConfig::compact(variant),
        };
        Self {
            preset,
            train,
            data_format: DataFormat::Folder,
            data_train: None,
            data_val: None,
            data_holdout: 0.1,
            knn: KnnConfig::default(),
            eval_every: 1,
            eval_mode: EvalMode::Knn,
            probe: ProbeConfig::default(),
            checkpoint_every: 1,
            synth: SynthConfig::default(),
            affinity_crops: 10,
            affinity_reference: 0,
            affinity_seed: 0,
        }
    }

    /// Resolves pairs in order. The preset and variant are read first
    /// because they choose the defaults the remaining keys refine.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(k, v)| (k.as_str(), v.as_str()));
        let preset = last("preset").map(|(k, v)| enum_value(k, v, &PRESETS)).transpose()?.unwrap_or(Preset::Default);
        let variant = last("train.variant")
            .map(|(k, v)| enum_value(k, v, &VARIANTS))
            .transpose()?
            .unwrap_or(Variant::Contrastive);
        let mut c = Self::new(preset, variant);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if set_train_key(&mut self.train, key, v)? {
            return Ok(());
        }
        match key {
            "preset" => self.preset = enum_value(key, v, &PRESETS)?,
            "data.format" => self.data_format = enum_value(key, v, &FORMATS)?,
            "data.train" => self.data_train = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.val" => self.data_val = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.holdout" => self.data_holdout = parse(key, v)?,
            "eval.knn_k" => self.knn.k = parse(key, v)?,
            "eval.knn_temperature" => self.knn.temperature = parse(key, v)?,
            "eval.every" => self.eval_every = parse(key, v)?,
            "eval.mode" => self.eval_mode = enum_value(key, v, &EVAL_MODES)?,
            "eval.probe_epochs" => self.probe.epochs = parse(key, v)?,
            "eval.probe_lr" => self.probe.lr = parse(key, v)?,
            "eval.probe_batch" => self.probe.batch_size = parse(key, v)?,
            "checkpoint.every" => self.checkpoint_every = parse(key, v)?,
            "synth.num_images" => self.synth.num_images = parse(key, v)?,
            "synth.canvas_size" => self.synth.canvas_size = parse(key, v)?,
            "synth.objects_per_image" => self.synth.objects_per_image = parse(key, v)?,
            "synth.num_shape_classes" => self.synth.num_shape_classes = parse(key, v)?,
            "synth.background_kinds" => self.synth.background_kinds = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "affinity.crops_per_image" => self.affinity_crops = parse(key, v)?,
            "affinity.reference" => self.affinity_reference = parse(key, v)?,
            "affinity.seed" => self.affinity_seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a global seed to every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.train.encoder.init_seed = seed;
        self.train.regressor.init_seed = seed.wrapping_add(1);
        self.probe.seed = seed;
        self.affinity_seed = seed;
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = vec![("preset", name_of(&PRESETS, &self.preset).to_string())];
        out.extend(train_pairs(&self.train));
        out.extend([
            ("data.format", name_of(&FORMATS, &self.data_format).to_string()),
            ("data.train", path(&self.data_train)),
            ("data.val", path(&self.data_val)),
            ("data.holdout", self.data_holdout.to_string()),
            ("eval.knn_k", self.knn.k.to_string()),
            ("eval.knn_temperature", self.knn.temperature.to_string()),
            ("eval.every", self.eval_every.to_string()),
            ("eval.mode", name_of(&EVAL_MODES, &self.eval_mode).to_string()),
            ("eval.probe_epochs", self.probe.epochs.to_string()),
            ("eval.probe_lr", self.probe.lr.to_string()),
            ("eval.probe_batch", self.probe.batch_size.to_string()),
            ("checkpoint.every", self.checkpoint_every.to_string()),
            ("synth.num_images", self.synth.num_images.to_string()),
            ("synth.canvas_size", self.synth.canvas_size.to_string()),
            ("synth.objects_per_image", self.synth.objects_per_image.to_string()),
            ("synth.num_shape_classes", self.synth.num_shape_classes.to_string()),
            ("synth.background_kinds", self.synth.background_kinds.to_string()),
            ("synth.seed", self.synth.seed.to_string()),
            ("affinity.crops_per_image", self.affinity_crops.to_string()),
            ("affinity.reference", self.affinity_reference.to_string()),
            ("affinity.seed", self.affinity_seed.to_string()),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        pairs_to_text(&self.pairs())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        parse_pairs(&text)
    }
}

pub fn pairs_to_text(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn owned(p: Vec<(&str, String)>) -> Vec<(String, String)> {
        p.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::new(Preset::Compact, Variant::NonContrastive);
        c.train.augment.hue = 0.1234567;
        c.data_train = Some("/tmp/x".into());
        let back = RunConfig::from_pairs(&parse_pairs(&c.to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
        let t = train_config_from_pairs(&owned(train_pairs(&c.train))).unwrap();
        assert_eq!(t, c.train);
    }

    #[test]
    fn variant_selects_defaults_and_overrides_win() {
        let pairs = vec![
            ("train.variant".to_string(), "noncontrastive".to_string()),
        ];
        let c = RunConfig::from_pairs(&pairs).unwrap();
        assert_eq!(c.train.lambda, 0.0001);
        assert_eq!(c.train.lr_max, 0.0125);
        let pairs = vec![
            ("train.lambda".to_string(), "0.5".to_string()),
            ("train.variant".to_string(), "noncontrastive".to_string()),
        ];
        assert_eq!(RunConfig::from_pairs(&pairs).unwrap().train.lambda, 0.5);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let bad = vec![("train.lambada".to_string(), "1".to_string())];
        assert!(matches!(RunConfig::from_pairs(&bad), Err(Error::Config(m)) if m.contains("train.lambada")));
        let bad = vec![("train.epochs".to_string(), "many".to_string())];
        assert!(RunConfig::from_pairs(&bad).is_err());
        assert!(parse_pairs("no equals sign").is_err());
        assert_eq!(parse_pairs("# c\n\n a.b = 1 # trailing\n").unwrap(), vec![("a.b".into(), "1".into())]);
    }

    #[test]
    fn bare_keys_are_training_keys() {
        let pairs = vec![
            parse_override("variant=noncontrastive").unwrap(),
            parse_override("lambda=0.0001").unwrap(),
        ];
        let c = RunConfig::from_pairs(&pairs).unwrap();
        assert_eq!(c.train.variant, Variant::NonContrastive);
        assert!(c.to_text().contains("train.lambda = 0.0001\n"));
    }
}
