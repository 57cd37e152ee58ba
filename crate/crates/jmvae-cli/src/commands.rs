//! The four commands behind the binary: train, eval, generate, latent-dump.

use std::path::{Path, PathBuf};

use jmvae::checkpoint;
use jmvae::data::BimodalDataset;
use jmvae::eval::{evaluate_bounds, BoundSpec, EncoderPath, EvalError, Target};
use jmvae::model::{Modality, ModelHandle, Variant};
use jmvae::rng::{standard_normal_vec, RngHub, StreamKind};
use jmvae::tensor::{Scalar, Tensor};
use jmvae::train::{train_with_checkpoints, MetricsRow};

use crate::config::{load_run_config, Precision, RunConfig};
use crate::pgm::{read_pgm, write_pgm};
use crate::selector::DatasetSelector;
use crate::CliError;

/// Train a model from a run-config file. Writes `metrics.csv`, periodic and
/// final checkpoints, and a frozen copy of the resolved config into the
/// output directory.
pub fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let cfg = load_run_config(config_path)?;
    let dataset = cfg.dataset.load()?;

    match cfg.precision {
        Precision::F32 => train_run::<f32>(&cfg, &dataset),
        Precision::F64 => train_run::<f64>(&cfg, &dataset),
    }
}

fn train_run<T: Scalar>(cfg: &RunConfig, dataset: &BimodalDataset) -> Result<(), CliError> {
    let model_cfg = cfg.model_config(dataset.x_spec.clone(), dataset.w_spec.clone());
    model_cfg
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let handle = ModelHandle::<T>::new(model_cfg).map_err(|e| CliError::usage(e.to_string()))?;

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    std::fs::write(cfg.out_dir.join("config.resolved"), cfg.render_resolved())
        .map_err(|e| CliError::runtime(format!("cannot write resolved config: {e}")))?;

    let out_dir = cfg.out_dir.clone();
    let mut sink = |epoch: usize, handle: &ModelHandle<T>| -> Result<(), String> {
        let path = out_dir.join(format!("ckpt_epoch_{:04}.jmck", epoch + 1));
        checkpoint::save(handle, &path).map_err(|e| e.to_string())
    };
    let (handle, metrics) =
        train_with_checkpoints(handle, dataset, &cfg.train_config(), &mut sink)
            .map_err(|e| CliError::runtime(e.to_string()))?;

    let mut csv = String::from(MetricsRow::CSV_HEADER);
    csv.push('\n');
    for row in &metrics {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    std::fs::write(cfg.out_dir.join("metrics.csv"), csv)
        .map_err(|e| CliError::runtime(format!("cannot write metrics: {e}")))?;
    checkpoint::save(&handle, &cfg.out_dir.join("final.jmck"))
        .map_err(|e| CliError::runtime(e.to_string()))?;

    let last = metrics.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs on {} records; final objective {:.4}",
        handle.variant(),
        metrics.len(),
        dataset.len(),
        last.total
    );
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: String,
    pub target: String,
    pub path: String,
    pub k: usize,
    pub n_w: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Estimate a test lower bound over a dataset; prints `mean +- SE` and
/// writes the per-datum CSV.
pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let handle: ModelHandle<f64> =
        checkpoint::load(&args.checkpoint).map_err(|e| CliError::usage(e.to_string()))?;
    let dataset = DatasetSelector::parse(&args.dataset)?.load()?;
    check_compatible(&handle, &dataset)?;

    let target = Target::parse(&args.target).ok_or_else(|| {
        CliError::usage(format!(
            "target must be marginal-x, conditional or joint; got {:?}",
            args.target
        ))
    })?;
    let path = EncoderPath::parse(&args.path).ok_or_else(|| {
        CliError::usage(format!(
            "path must be single-x, single-w or multiple; got {:?}",
            args.path
        ))
    })?;
    let spec = BoundSpec { target, path, k: args.k, n_w: args.n_w };

    let report = evaluate_bounds(&handle, &spec, &dataset, args.seed).map_err(|e| match e {
        EvalError::Unsupported { .. } | EvalError::BadSpec { .. } => {
            CliError::usage(e.to_string())
        }
        other => CliError::runtime(other.to_string()),
    })?;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", args.out_dir.display())))?;
    std::fs::write(args.out_dir.join("bounds.csv"), report.to_csv())
        .map_err(|e| CliError::runtime(format!("cannot write bounds: {e}")))?;

    println!(
        "{} bound ({} path, k={}): {:.4} +- {:.4} over {} records",
        target.name(),
        path.name(),
        args.k,
        report.mean(),
        report.std_err(),
        report.values.len()
    );
    Ok(())
}

pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub mode: String,
    pub count: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub class: Option<usize>,
    pub image: Option<PathBuf>,
    pub sample: bool,
    pub zeta: f64,
}

/// Draw images (PGM) and label probabilities (CSV) from the model: prior
/// samples, conditional generation from a class, or reconstruction from an
/// image. Conditioning uses the posterior mean by default; `--sample` adds
/// `zeta`-scaled posterior noise per draw.
pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let handle: ModelHandle<f64> =
        checkpoint::load(&args.checkpoint).map_err(|e| CliError::usage(e.to_string()))?;
    if args.count == 0 {
        return Err(CliError::usage("count must be at least 1"));
    }
    let latent = handle.latent_dim();
    let hub = RngHub::new(args.seed);
    let mut rng = hub.stream(StreamKind::Eval, 0);
    let x_shape = handle.config().x_spec.shape.clone();
    let (rows, cols) = match x_shape.as_slice() {
        [r, c] => (*r, *c),
        other => {
            return Err(CliError::usage(format!(
                "x modality shape {other:?} is not an image"
            )))
        }
    };

    // Latent batch per mode.
    let z: Tensor<f64> = match args.mode.as_str() {
        "prior" | "prior-sample" => Tensor::new(
            &[args.count, latent],
            standard_normal_vec(&mut rng, args.count * latent),
        )
        .expect("sized buffer"),
        "from-w" => {
            let class = args
                .class
                .ok_or_else(|| CliError::usage("from-w needs --class"))?;
            let classes = handle.config().w_spec.dim;
            if class >= classes {
                return Err(CliError::usage(format!(
                    "class {class} out of range (model has {classes})"
                )));
            }
            let mut w = vec![0.0; classes];
            w[class] = 1.0;
            let w_t = Tensor::new(&[1, classes], w).expect("sized buffer");
            match handle.variant() {
                Variant::Cvae => {
                    // No posterior over z given w alone: condition the decoder
                    // on w and take the prior mean (or prior samples).
                    latent_draws(&Tensor::zeros(&[1, latent]), None, args, &mut rng)
                }
                _ => {
                    let (q, _) = handle
                        .encode(None, Some(&w_t))
                        .map_err(|e| CliError::usage(e.to_string()))?;
                    latent_draws(&q.mean, Some(&q.logvar), args, &mut rng)
                }
            }
        }
        "from-x" => {
            let image = args
                .image
                .as_ref()
                .ok_or_else(|| CliError::usage("from-x needs --image"))?;
            let (r, c, values) = read_pgm(image)?;
            if r * c != handle.config().x_spec.dim {
                return Err(CliError::usage(format!(
                    "image is {r}x{c} but the model expects {} pixels",
                    handle.config().x_spec.dim
                )));
            }
            let x_t = Tensor::new(&[1, r * c], values).expect("sized buffer");
            let (q, _) = handle
                .encode(Some(&x_t), None)
                .map_err(|e| CliError::usage(e.to_string()))?;
            latent_draws(&q.mean, Some(&q.logvar), args, &mut rng)
        }
        other => {
            return Err(CliError::usage(format!(
                "mode must be prior, from-w or from-x; got {other:?}"
            )))
        }
    };

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", args.out_dir.display())))?;

    // Decode images (all variants model x).
    let images = match handle.variant() {
        Variant::Cvae => {
            let class = args
                .class
                .ok_or_else(|| CliError::usage("cvae generation needs --class"))?;
            let classes = handle.config().w_spec.dim;
            let mut w = vec![0.0; classes];
            w[class] = 1.0;
            let mut tiled = Vec::with_capacity(args.count * classes);
            for _ in 0..args.count {
                tiled.extend_from_slice(&w);
            }
            let w_t = Tensor::new(&[args.count, classes], tiled).expect("sized buffer");
            handle
                .generate_x_given_w(&z, &w_t)
                .map_err(|e| CliError::runtime(e.to_string()))?
        }
        _ => handle
            .generate(&z, Modality::X)
            .map_err(|e| CliError::runtime(e.to_string()))?,
    };
    let probs = images.probabilities();
    for i in 0..args.count {
        let path = args.out_dir.join(format!("sample_{i:03}.pgm"));
        write_pgm(&path, rows, cols, probs.row(i))?;
    }

    // Label probabilities where a w decoder exists.
    if matches!(handle.variant(), Variant::JmvaeZero | Variant::JmvaeKl) {
        let w_params = handle
            .generate(&z, Modality::W)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        let w_probs = w_params.probabilities();
        let classes = handle.config().w_spec.dim;
        let mut csv = String::from("sample,");
        csv.push_str(
            &(0..classes)
                .map(|c| format!("p{c}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        csv.push('\n');
        for i in 0..args.count {
            csv.push_str(&i.to_string());
            for v in w_probs.row(i) {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        std::fs::write(args.out_dir.join("w_probs.csv"), csv)
            .map_err(|e| CliError::runtime(format!("cannot write label probabilities: {e}")))?;
    }

    println!(
        "wrote {} {} sample(s) to {}",
        args.count,
        args.mode,
        args.out_dir.display()
    );
    Ok(())
}

/// `count` latent rows from a posterior: the mean replicated, or
/// `mean + zeta * sigma * eps` per draw when sampling.
fn latent_draws(
    mean: &Tensor<f64>,
    logvar: Option<&Tensor<f64>>,
    args: &GenerateArgs,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor<f64> {
    let latent = mean.numel();
    let mut data = Vec::with_capacity(args.count * latent);
    for _ in 0..args.count {
        if args.sample {
            let eps = standard_normal_vec(rng, latent);
            for (j, e) in eps.iter().enumerate() {
                let sigma = logvar.map_or(1.0, |lv| (0.5 * lv.data()[j]).exp());
                data.push(mean.data()[j] + args.zeta * sigma * e);
            }
        } else {
            data.extend_from_slice(mean.data());
        }
    }
    Tensor::new(&[args.count, latent], data).expect("sized buffer")
}

/// Export posterior means with labels as CSV (`label,z1,...,zD`).
pub fn cmd_latent_dump(
    checkpoint_path: &Path,
    dataset: &str,
    out: &Path,
) -> Result<(), CliError> {
    let handle: ModelHandle<f64> =
        checkpoint::load(checkpoint_path).map_err(|e| CliError::usage(e.to_string()))?;
    let dataset = DatasetSelector::parse(dataset)?.load()?;
    check_compatible(&handle, &dataset)?;

    let latent = handle.latent_dim();
    let mut csv = String::from("label");
    for d in 0..latent {
        csv.push_str(&format!(",z{}", d + 1));
    }
    csv.push('\n');
    for i in 0..dataset.len() {
        let x = dataset.x.gather_rows(&[i]);
        let w = dataset.w.gather_rows(&[i]);
        let (q, _) = match handle.variant() {
            Variant::Vae => handle.encode(Some(&x), None),
            _ => handle.encode(Some(&x), Some(&w)),
        }
        .map_err(|e| CliError::runtime(e.to_string()))?;
        csv.push_str(&dataset.label_of(i).to_string());
        for v in q.mean.data() {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(out, csv)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", out.display())))?;
    println!("wrote {} latent rows to {}", dataset.len(), out.display());
    Ok(())
}

fn check_compatible(handle: &ModelHandle<f64>, ds: &BimodalDataset) -> Result<(), CliError> {
    let m = handle.config();
    if m.x_spec.dim != ds.x_spec.dim
        || m.x_spec.family != ds.x_spec.family
        || m.w_spec.dim != ds.w_spec.dim
        || m.w_spec.family != ds.w_spec.family
    {
        return Err(CliError::usage(format!(
            "checkpoint modalities (x: {} {}, w: {} {}) do not match dataset (x: {} {}, w: {} {})",
            m.x_spec.family.name(),
            m.x_spec.dim,
            m.w_spec.family.name(),
            m.w_spec.dim,
            ds.x_spec.family.name(),
            ds.x_spec.dim,
            ds.w_spec.family.name(),
            ds.w_spec.dim,
        )));
    }
    Ok(())
}
