//! Portable, bit-exact model serialization.
//!
//! Layout: magic `JMCK`, little-endian `u32` version, little-endian `u64`
//! manifest length, a UTF-8 manifest block (model config as `key = value`
//! lines plus a tensor table of name / shape / byte-offset / byte-length),
//! then the payload of concatenated little-endian `f32` tensor data.
//!
//! Payload floats are always 32-bit: checkpoints are interchange artifacts.
//! Saving a 64-bit model quantizes parameters to `f32`; loading widens them
//! back as-is.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dist::{LikelihoodFamily, ModalitySpec};
use crate::model::{ModelConfig, ModelError, ModelHandle, Variant};
use crate::tensor::Scalar;

const MAGIC: &[u8; 4] = b"JMCK";
const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io { path: PathBuf, source: std::io::Error },
    BadMagic { got: [u8; 4] },
    BadVersion { got: u32 },
    Manifest { detail: String },
    TensorTable { detail: String },
    Model(ModelError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CheckpointError::BadMagic { got } => {
                write!(f, "bad checkpoint magic {:?}, expected \"JMCK\"", got)
            }
            CheckpointError::BadVersion { got } => {
                write!(f, "unsupported checkpoint version {got}, expected {VERSION}")
            }
            CheckpointError::Manifest { detail } => write!(f, "checkpoint manifest: {detail}"),
            CheckpointError::TensorTable { detail } => write!(f, "checkpoint tensors: {detail}"),
            CheckpointError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        CheckpointError::Model(e)
    }
}

fn fmt_usizes(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usizes(s: &str) -> Result<Vec<usize>, CheckpointError> {
    s.split(',')
        .map(|p| {
            p.trim().parse::<usize>().map_err(|_| CheckpointError::Manifest {
                detail: format!("bad integer list entry: {p:?}"),
            })
        })
        .collect()
}

/// Serialize a model to `path`. Deterministic: an identical handle produces
/// identical bytes.
pub fn save<T: Scalar>(handle: &ModelHandle<T>, path: &Path) -> Result<(), CheckpointError> {
    let cfg = handle.config();
    let mut manifest = String::new();
    manifest.push_str(&format!("variant = {}\n", cfg.variant.name()));
    manifest.push_str(&format!("latent_dim = {}\n", cfg.latent_dim));
    manifest.push_str(&format!("alpha = {}\n", cfg.alpha));
    manifest.push_str(&format!("negative_slope = {}\n", cfg.negative_slope));
    manifest.push_str(&format!("seed = {}\n", cfg.init_seed));
    manifest.push_str(&format!("enc_hidden = {}\n", fmt_usizes(&cfg.enc_hidden)));
    manifest.push_str(&format!("shared_dim = {}\n", cfg.shared_dim));
    manifest.push_str(&format!("dec_hidden = {}\n", fmt_usizes(&cfg.dec_hidden)));
    for (tag, spec) in [("x", &cfg.x_spec), ("w", &cfg.w_spec)] {
        manifest.push_str(&format!("{tag}.name = {}\n", spec.name));
        manifest.push_str(&format!("{tag}.family = {}\n", spec.family.name()));
        manifest.push_str(&format!("{tag}.shape = {}\n", fmt_usizes(&spec.shape)));
    }

    let params = handle.named_parameters();
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in &params {
        let offset = payload.len();
        for v in tensor.data() {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        manifest.push_str(&format!(
            "tensor {name} {} {offset} {}\n",
            fmt_usizes(tensor.shape()),
            payload.len() - offset
        ));
    }

    let mut bytes = Vec::with_capacity(16 + manifest.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(manifest.as_bytes());
    bytes.extend_from_slice(&payload);

    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reconstruct a model from `path`. Every parameter of the variant must
/// appear exactly once in the tensor table with in-bounds, non-overlapping
/// payload ranges; anything else is a structured error and no handle is
/// produced.
pub fn load<T: Scalar>(path: &Path) -> Result<ModelHandle<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 16 {
        return Err(CheckpointError::Manifest {
            detail: format!("file too short ({} bytes)", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            got: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(CheckpointError::BadVersion { got: version });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("sized slice")) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(CheckpointError::Manifest {
            detail: "manifest extends past end of file".into(),
        });
    }
    let manifest = std::str::from_utf8(&bytes[16..16 + manifest_len]).map_err(|_| {
        CheckpointError::Manifest {
            detail: "manifest is not UTF-8".into(),
        }
    })?;
    let payload = &bytes[16 + manifest_len..];

    let mut keys: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
    let mut table: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    for line in manifest.lines() {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let fields: Vec<&str> = rest.split(' ').collect();
            if fields.len() != 4 {
                return Err(CheckpointError::TensorTable {
                    detail: format!("bad tensor line: {line:?}"),
                });
            }
            let shape = parse_usizes(fields[1])?;
            let offset = fields[2].parse().map_err(|_| CheckpointError::TensorTable {
                detail: format!("bad offset in {line:?}"),
            })?;
            let len = fields[3].parse().map_err(|_| CheckpointError::TensorTable {
                detail: format!("bad length in {line:?}"),
            })?;
            table.push((fields[0].to_string(), shape, offset, len));
        } else if let Some((k, v)) = line.split_once(" = ") {
            keys.insert(k, v);
        } else {
            return Err(CheckpointError::Manifest {
                detail: format!("unparseable line: {line:?}"),
            });
        }
    }

    let get = |k: &str| -> Result<&str, CheckpointError> {
        keys.get(k).copied().ok_or_else(|| CheckpointError::Manifest {
            detail: format!("missing key {k}"),
        })
    };
    let variant = Variant::parse(get("variant")?).ok_or_else(|| CheckpointError::Manifest {
        detail: format!("unknown variant {:?}", keys.get("variant")),
    })?;
    let spec_of = |tag: &str| -> Result<ModalitySpec, CheckpointError> {
        let family = LikelihoodFamily::parse(get(&format!("{tag}.family"))?).ok_or_else(|| {
            CheckpointError::Manifest {
                detail: format!("unknown likelihood family for {tag}"),
            }
        })?;
        let shape = parse_usizes(get(&format!("{tag}.shape"))?)?;
        ModalitySpec::new(get(&format!("{tag}.name"))?, family, &shape).map_err(|e| {
            CheckpointError::Manifest {
                detail: e.to_string(),
            }
        })
    };
    let parse_num = |k: &str| -> Result<f64, CheckpointError> {
        get(k)?.parse().map_err(|_| CheckpointError::Manifest {
            detail: format!("bad number for {k}"),
        })
    };

    let config = ModelConfig {
        variant,
        x_spec: spec_of("x")?,
        w_spec: spec_of("w")?,
        latent_dim: parse_num("latent_dim")? as usize,
        enc_hidden: parse_usizes(get("enc_hidden")?)?,
        shared_dim: parse_num("shared_dim")? as usize,
        dec_hidden: parse_usizes(get("dec_hidden")?)?,
        alpha: parse_num("alpha")?,
        negative_slope: parse_num("negative_slope")?,
        init_seed: parse_num("seed")? as u64,
    };

    let mut handle = ModelHandle::<T>::zero_init(config)?;

    // Validate the table: every parameter exactly once, ranges in bounds and
    // non-overlapping.
    let mut covered: Vec<(usize, usize)> = Vec::new();
    {
        let mut params = handle.named_parameters_mut();
        if params.len() != table.len() {
            return Err(CheckpointError::TensorTable {
                detail: format!(
                    "variant {} expects {} tensors, table has {}",
                    variant,
                    params.len(),
                    table.len()
                ),
            });
        }
        for (name, tensor) in params.iter_mut() {
            let row = table
                .iter()
                .find(|(n, _, _, _)| n == name)
                .ok_or_else(|| CheckpointError::TensorTable {
                    detail: format!("missing tensor {name}"),
                })?;
            let (_, shape, offset, len) = row;
            if shape != tensor.shape() {
                return Err(CheckpointError::TensorTable {
                    detail: format!(
                        "tensor {name}: shape {shape:?} does not match expected {:?}",
                        tensor.shape()
                    ),
                });
            }
            if *len != tensor.numel() * 4 || offset + len > payload.len() {
                return Err(CheckpointError::TensorTable {
                    detail: format!("tensor {name}: range {offset}+{len} out of bounds"),
                });
            }
            if covered.iter().any(|&(o, l)| *offset < o + l && o < offset + len) {
                return Err(CheckpointError::TensorTable {
                    detail: format!("tensor {name}: overlapping payload range"),
                });
            }
            covered.push((*offset, *len));

            let dst = tensor.data_mut();
            for (i, v) in dst.iter_mut().enumerate() {
                let at = offset + 4 * i;
                let bits = f32::from_le_bytes(
                    payload[at..at + 4].try_into().expect("sized slice"),
                );
                *v = T::from_f64(bits as f64);
            }
        }
    }
    let total: usize = covered.iter().map(|&(_, l)| l).sum();
    if total != payload.len() {
        return Err(CheckpointError::TensorTable {
            detail: format!(
                "payload has {} bytes but tensors cover {total}",
                payload.len()
            ),
        });
    }
    Ok(handle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::ModalitySpec;
    use std::path::PathBuf;

    fn cfg(variant: Variant, alpha: f64) -> ModelConfig {
        ModelConfig {
            variant,
            x_spec: ModalitySpec::bernoulli_image("x", 2, 2),
            w_spec: ModalitySpec::categorical_label("w", 2),
            latent_dim: 1,
            enc_hidden: vec![8],
            shared_dim: 2,
            dec_hidden: vec![8],
            alpha,
            negative_slope: 0.01,
            init_seed: 77,
        }
    }

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("jmvae_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_preserves_every_parameter_bit_exactly() {
        for (variant, alpha) in [
            (Variant::Vae, 0.0),
            (Variant::Cvae, 0.0),
            (Variant::JmvaeZero, 0.0),
            (Variant::JmvaeKl, 0.1),
        ] {
            let handle = ModelHandle::<f32>::new(cfg(variant, alpha)).unwrap();
            let path = tmp(&format!("rt_{}.jmck", variant.name()));
            save(&handle, &path).unwrap();
            let loaded: ModelHandle<f32> = load(&path).unwrap();
            assert_eq!(loaded.config(), handle.config());
            for ((n1, t1), (n2, t2)) in handle
                .named_parameters()
                .iter()
                .zip(loaded.named_parameters())
            {
                assert_eq!(*n1, n2);
                assert_eq!(**t1, *t2);
            }
        }
    }

    #[test]
    fn resave_is_byte_identical_at_f32() {
        let handle = ModelHandle::<f32>::new(cfg(Variant::JmvaeKl, 0.25)).unwrap();
        let p1 = tmp("a.jmck");
        let p2 = tmp("b.jmck");
        save(&handle, &p1).unwrap();
        let loaded: ModelHandle<f32> = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn save_is_deterministic() {
        let handle = ModelHandle::<f64>::new(cfg(Variant::JmvaeZero, 0.0)).unwrap();
        let p1 = tmp("d1.jmck");
        let p2 = tmp("d2.jmck");
        save(&handle, &p1).unwrap();
        save(&handle, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn f64_save_quantizes_to_f32() {
        let handle = ModelHandle::<f64>::new(cfg(Variant::Vae, 0.0)).unwrap();
        let path = tmp("quant.jmck");
        save(&handle, &path).unwrap();
        let loaded: ModelHandle<f64> = load(&path).unwrap();
        for ((_, original), (_, restored)) in handle
            .named_parameters()
            .iter()
            .zip(loaded.named_parameters())
        {
            for (a, b) in original.data().iter().zip(restored.data()) {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
    }

    #[test]
    fn corrupt_magic_is_a_parse_error() {
        let handle = ModelHandle::<f32>::new(cfg(Variant::Vae, 0.0)).unwrap();
        let path = tmp("corrupt.jmck");
        save(&handle, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load::<f32>(&path),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let handle = ModelHandle::<f32>::new(cfg(Variant::Vae, 0.0)).unwrap();
        let path = tmp("short.jmck");
        save(&handle, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load::<f32>(&path),
            Err(CheckpointError::TensorTable { .. })
        ));
    }

    #[test]
    fn version_bump_is_rejected() {
        let handle = ModelHandle::<f32>::new(cfg(Variant::Vae, 0.0)).unwrap();
        let path = tmp("version.jmck");
        save(&handle, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load::<f32>(&path),
            Err(CheckpointError::BadVersion { got: 2 })
        ));
    }
}
