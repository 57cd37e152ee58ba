//! Dataset selectors: the `dataset = toy | idx` block of a run config, and
//! the compact `toy:...` / `idx:...` strings taken by evaluation commands.

use std::collections::HashMap;
use std::path::PathBuf;

use jmvae::data::{load_idx, make_toy, split, BimodalDataset};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    All,
    Train,
    Test,
}

impl Part {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "all" => Ok(Part::All),
            "train" => Ok(Part::Train),
            "test" => Ok(Part::Test),
            other => Err(CliError::usage(format!(
                "part must be all, train or test, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum DatasetSelector {
    Toy {
        classes: usize,
        dim: usize,
        per_class: usize,
        noise: f64,
        seed: u64,
        train_fraction: f64,
        part: Part,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl DatasetSelector {
    /// Selector block of a run config (`dataset = toy` plus `toy.*` keys, or
    /// `dataset = idx` plus `idx.train_*` paths). Training always consumes
    /// the train part of a toy split.
    pub fn from_config(map: &HashMap<String, String>) -> Result<Self, CliError> {
        let kind = map
            .get("dataset")
            .ok_or_else(|| CliError::usage("config is missing required key \"dataset\""))?;
        match kind.as_str() {
            "toy" => {
                let get = |key: &str, default: &str| -> String {
                    map.get(key).cloned().unwrap_or_else(|| default.to_string())
                };
                let num = |key: &str, v: String| -> Result<f64, CliError> {
                    v.parse()
                        .map_err(|_| CliError::usage(format!("bad number for {key}: {v:?}")))
                };
                Ok(DatasetSelector::Toy {
                    classes: num("toy.classes", get("toy.classes", "10"))? as usize,
                    dim: num("toy.dim", get("toy.dim", "64"))? as usize,
                    per_class: num("toy.per_class", get("toy.per_class", "600"))? as usize,
                    noise: num("toy.noise", get("toy.noise", "0.05"))?,
                    seed: num("toy.seed", get("toy.seed", &get("seed", "0")))? as u64,
                    train_fraction: num(
                        "toy.train_fraction",
                        get("toy.train_fraction", "0.8333333333333334"),
                    )?,
                    part: Part::Train,
                })
            }
            "idx" => {
                let path = |key: &str| -> Result<PathBuf, CliError> {
                    map.get(key)
                        .map(PathBuf::from)
                        .ok_or_else(|| CliError::usage(format!("idx dataset needs {key}")))
                };
                Ok(DatasetSelector::Idx {
                    images: path("idx.train_images")?,
                    labels: path("idx.train_labels")?,
                })
            }
            other => Err(CliError::usage(format!(
                "dataset must be toy or idx, got {other:?}"
            ))),
        }
    }

    /// Compact selector string:
    /// `toy:classes=10,dim=64,per_class=600,noise=0.05,seed=42,fraction=0.8333,part=test`
    /// or `idx:images=PATH,labels=PATH`.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| {
            CliError::usage(format!("dataset selector {s:?} must start with toy: or idx:"))
        })?;
        let mut map = HashMap::new();
        for pair in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| {
                CliError::usage(format!("dataset selector entry {pair:?} must be key=value"))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        match kind {
            "toy" => {
                let allowed =
                    ["classes", "dim", "per_class", "noise", "seed", "fraction", "part"];
                for key in map.keys() {
                    if !allowed.contains(&key.as_str()) {
                        return Err(CliError::usage(format!(
                            "unknown toy selector key {key:?} (allowed: {})",
                            allowed.join(", ")
                        )));
                    }
                }
                let get = |key: &str, default: &str| -> String {
                    map.get(key).cloned().unwrap_or_else(|| default.to_string())
                };
                let num = |key: &str, v: String| -> Result<f64, CliError> {
                    v.parse()
                        .map_err(|_| CliError::usage(format!("bad number for {key}: {v:?}")))
                };
                Ok(DatasetSelector::Toy {
                    classes: num("classes", get("classes", "10"))? as usize,
                    dim: num("dim", get("dim", "64"))? as usize,
                    per_class: num("per_class", get("per_class", "600"))? as usize,
                    noise: num("noise", get("noise", "0.05"))?,
                    seed: num("seed", get("seed", "0"))? as u64,
                    train_fraction: num("fraction", get("fraction", "0.8333333333333334"))?,
                    part: Part::parse(&get("part", "test"))?,
                })
            }
            "idx" => {
                let path = |key: &str| -> Result<PathBuf, CliError> {
                    map.get(key)
                        .map(PathBuf::from)
                        .ok_or_else(|| CliError::usage(format!("idx selector needs {key}=PATH")))
                };
                Ok(DatasetSelector::Idx {
                    images: path("images")?,
                    labels: path("labels")?,
                })
            }
            other => Err(CliError::usage(format!(
                "dataset selector kind must be toy or idx, got {other:?}"
            ))),
        }
    }

    /// Check parameters and paths without doing any work.
    pub fn validate(&self) -> Result<(), CliError> {
        match self {
            DatasetSelector::Toy { classes, dim, per_class, noise, train_fraction, .. } => {
                if *classes < 2 || *dim < *classes || *per_class == 0 {
                    return Err(CliError::usage(format!(
                        "toy dataset needs classes >= 2, dim >= classes, per_class >= 1; \
                         got classes={classes}, dim={dim}, per_class={per_class}"
                    )));
                }
                if !(0.0..=1.0).contains(noise) {
                    return Err(CliError::usage(format!("toy noise {noise} outside [0, 1]")));
                }
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                    return Err(CliError::usage(format!(
                        "toy train fraction {train_fraction} outside (0, 1)"
                    )));
                }
                Ok(())
            }
            DatasetSelector::Idx { images, labels } => {
                for p in [images, labels] {
                    if !p.is_file() {
                        return Err(CliError::usage(format!(
                            "dataset file {} does not exist; fetch the standard MNIST IDX \
                             files (train-images-idx3-ubyte / train-labels-idx1-ubyte and \
                             the t10k pair) from an MNIST mirror, decompress them, and point \
                             the idx paths at them — nothing is downloaded automatically",
                            p.display()
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn load(&self) -> Result<BimodalDataset, CliError> {
        self.validate()?;
        match self {
            DatasetSelector::Toy { classes, dim, per_class, noise, seed, train_fraction, part } => {
                let all = make_toy(*classes, *dim, *per_class, *noise, *seed)
                    .map_err(|e| CliError::usage(e.to_string()))?;
                match part {
                    Part::All => Ok(all),
                    Part::Train => {
                        let (train, _) = split(&all, *train_fraction, *seed)
                            .map_err(|e| CliError::usage(e.to_string()))?;
                        Ok(train)
                    }
                    Part::Test => {
                        let (_, test) = split(&all, *train_fraction, *seed)
                            .map_err(|e| CliError::usage(e.to_string()))?;
                        Ok(test)
                    }
                }
            }
            DatasetSelector::Idx { images, labels } => {
                load_idx(images, labels).map_err(|e| CliError::usage(e.to_string()))
            }
        }
    }

    /// Config-file rendition for the frozen resolved-config copy.
    pub fn render(&self) -> String {
        match self {
            DatasetSelector::Toy { classes, dim, per_class, noise, seed, train_fraction, .. } => {
                format!(
                    "dataset = toy\ntoy.classes = {classes}\ntoy.dim = {dim}\n\
                     toy.per_class = {per_class}\ntoy.noise = {noise}\ntoy.seed = {seed}\n\
                     toy.train_fraction = {train_fraction}\n"
                )
            }
            DatasetSelector::Idx { images, labels } => {
                format!(
                    "dataset = idx\nidx.train_images = {}\nidx.train_labels = {}\n",
                    images.display(),
                    labels.display()
                )
            }
        }
    }
}
