//! Plain-text run configuration: `key = value` lines, `#` comments, unknown
//! keys rejected. The full key list lives in `RunConfig::SCHEMA`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use jmvae::dist::ModalitySpec;
use jmvae::model::{ModelConfig, Variant};
use jmvae::train::TrainConfig;

use crate::selector::DatasetSelector;
use crate::CliError;

/// Scalar precision of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Everything a training run needs, parsed from one config file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub variant: Variant,
    pub precision: Precision,
    pub latent_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub shared_dim: usize,
    pub dec_hidden: Vec<usize>,
    pub alpha: f64,
    pub negative_slope: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub resample_binarization: bool,
    pub eval_every: usize,
    pub dataset: DatasetSelector,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Accepted keys. `lr_schedule`, `grad_clip` and `early_stopping` are
    /// reserved: they parse but only their off values are accepted.
    pub const SCHEMA: &'static [&'static str] = &[
        "variant",
        "precision",
        "latent_dim",
        "enc_hidden",
        "shared_dim",
        "dec_hidden",
        "alpha",
        "negative_slope",
        "epochs",
        "batch_size",
        "learning_rate",
        "warmup_epochs",
        "seed",
        "resample_binarization",
        "eval_every",
        "dataset",
        "toy.classes",
        "toy.dim",
        "toy.per_class",
        "toy.noise",
        "toy.train_fraction",
        "toy.seed",
        "idx.train_images",
        "idx.train_labels",
        "out_dir",
        "lr_schedule",
        "grad_clip",
        "early_stopping",
    ];

    /// Model layout for the given modality declarations (known once the
    /// dataset is loaded).
    pub fn model_config(&self, x_spec: ModalitySpec, w_spec: ModalitySpec) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            x_spec,
            w_spec,
            latent_dim: self.latent_dim,
            enc_hidden: self.enc_hidden.clone(),
            shared_dim: self.shared_dim,
            dec_hidden: self.dec_hidden.clone(),
            alpha: self.alpha,
            negative_slope: self.negative_slope,
            init_seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_epochs: self.warmup_epochs,
            seed: self.seed,
            resample_binarization: self.resample_binarization,
            eval_every: self.eval_every,
        }
    }

    /// Frozen copy of the resolved configuration, written next to run outputs.
    pub fn render_resolved(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("variant = {}\n", self.variant.name()));
        out.push_str(&format!(
            "precision = {}\n",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
        ));
        out.push_str(&format!("latent_dim = {}\n", self.latent_dim));
        out.push_str(&format!("enc_hidden = {}\n", join(&self.enc_hidden)));
        out.push_str(&format!("shared_dim = {}\n", self.shared_dim));
        out.push_str(&format!("dec_hidden = {}\n", join(&self.dec_hidden)));
        out.push_str(&format!("alpha = {}\n", self.alpha));
        out.push_str(&format!("negative_slope = {}\n", self.negative_slope));
        out.push_str(&format!("epochs = {}\n", self.epochs));
        out.push_str(&format!("batch_size = {}\n", self.batch_size));
        out.push_str(&format!("learning_rate = {}\n", self.learning_rate));
        out.push_str(&format!("warmup_epochs = {}\n", self.warmup_epochs));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!(
            "resample_binarization = {}\n",
            self.resample_binarization
        ));
        out.push_str(&format!("eval_every = {}\n", self.eval_every));
        out.push_str(&self.dataset.render());
        out.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        out
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_key_values(text: &str) -> Result<HashMap<String, String>, CliError> {
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::usage(format!("config line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if !RunConfig::SCHEMA.contains(&key.as_str()) {
            return Err(CliError::usage(format!(
                "config line {}: unknown key {key:?} (schema: {})",
                lineno + 1,
                RunConfig::SCHEMA.join(", ")
            )));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::usage(format!(
                "config line {}: duplicate key {key:?}",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::usage(format!("bad integer list entry {p:?}")))
        })
        .collect()
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let map = parse_key_values(&text)?;

    let get = |key: &str| -> Result<&String, CliError> {
        map.get(key)
            .ok_or_else(|| CliError::usage(format!("config is missing required key {key:?}")))
    };
    let get_or = |key: &str, default: &str| -> String {
        map.get(key).cloned().unwrap_or_else(|| default.to_string())
    };
    let parse_num = |key: &str, value: &str| -> Result<f64, CliError> {
        value
            .parse::<f64>()
            .map_err(|_| CliError::usage(format!("bad number for {key}: {value:?}")))
    };

    // Reserved flags accept only their off values.
    for (key, off) in [("lr_schedule", "none"), ("grad_clip", "0"), ("early_stopping", "false")] {
        if let Some(v) = map.get(key) {
            if v != off {
                return Err(CliError::usage(format!(
                    "{key} is reserved and not implemented; only {off:?} is accepted"
                )));
            }
        }
    }

    let variant = Variant::parse(get("variant")?)
        .ok_or_else(|| CliError::usage("variant must be one of vae, cvae, jmvae-zero, jmvae-kl"))?;
    let precision = match get_or("precision", "f32").as_str() {
        "f32" => Precision::F32,
        "f64" => Precision::F64,
        other => return Err(CliError::usage(format!("precision must be f32 or f64, got {other:?}"))),
    };
    let dataset = DatasetSelector::from_config(&map)?;
    let out_dir = PathBuf::from(get("out_dir")?);

    let cfg = RunConfig {
        variant,
        precision,
        latent_dim: parse_num("latent_dim", get("latent_dim")?)? as usize,
        enc_hidden: parse_usize_list(get("enc_hidden")?)?,
        shared_dim: parse_num("shared_dim", get("shared_dim")?)? as usize,
        dec_hidden: parse_usize_list(get("dec_hidden")?)?,
        alpha: parse_num("alpha", &get_or("alpha", "0"))?,
        negative_slope: parse_num("negative_slope", &get_or("negative_slope", "0.01"))?,
        epochs: parse_num("epochs", get("epochs")?)? as usize,
        batch_size: parse_num("batch_size", &get_or("batch_size", "100"))? as usize,
        learning_rate: parse_num("learning_rate", &get_or("learning_rate", "0.001"))?,
        warmup_epochs: parse_num("warmup_epochs", &get_or("warmup_epochs", "1"))? as usize,
        seed: parse_num("seed", &get_or("seed", "0"))? as u64,
        resample_binarization: match get_or("resample_binarization", "true").as_str() {
            "true" => true,
            "false" => false,
            other => {
                return Err(CliError::usage(format!(
                    "resample_binarization must be true or false, got {other:?}"
                )))
            }
        },
        eval_every: parse_num("eval_every", &get_or("eval_every", "0"))? as usize,
        dataset,
        out_dir,
    };

    // Validate everything up front, before any work starts.
    cfg.dataset.validate()?;
    if cfg.latent_dim == 0 {
        return Err(CliError::usage("latent_dim must be positive"));
    }
    if cfg.alpha < 0.0 {
        return Err(CliError::usage("alpha must be non-negative"));
    }
    if cfg.alpha != 0.0 && cfg.variant != Variant::JmvaeKl {
        return Err(CliError::usage(format!(
            "alpha applies only to jmvae-kl, set on {}",
            cfg.variant
        )));
    }
    cfg.train_config()
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}
