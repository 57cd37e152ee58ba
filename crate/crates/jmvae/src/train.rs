//! SGVB training: Adam with bias correction, the linear warm-up schedule for
//! the prior KL coefficient, per-epoch binarization resampling, and the
//! epoch loop itself.
//!
//! The loop is bit-reproducible per (config, seed) at a given precision: all
//! randomness flows through purpose-separated streams of one master seed.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::BimodalDataset;
use crate::dist::LikelihoodFamily;
use crate::model::{LossBreakdown, ModelError, ModelHandle, Variant};
use crate::rng::{standard_normal_vec, RngHub, StreamKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Warm-up length `N_t`: the prior-KL coefficient ramps linearly from
    /// `1/N_t` at epoch 0 to 1 at epoch `N_t - 1`.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub resample_binarization: bool,
    /// Emit a checkpoint every this many epochs (0 = only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 100,
            learning_rate: 1e-3,
            warmup_epochs: 1,
            seed: 0,
            resample_binarization: true,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config {
                detail: "epochs and batch size must be at least 1".into(),
            });
        }
        if self.warmup_epochs == 0 {
            return Err(TrainError::Config {
                detail: "warm-up length must be at least 1".into(),
            });
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(TrainError::Config {
                detail: format!("learning rate must be positive, got {}", self.learning_rate),
            });
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config { detail: String },
    Model(ModelError),
    /// The objective became NaN/Inf; names the first offending tape node.
    NonFiniteLoss { epoch: usize, batch: usize, node: String },
    Checkpoint { detail: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config { detail } => write!(f, "train config: {detail}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::NonFiniteLoss { epoch, batch, node } => write!(
                f,
                "non-finite loss at epoch {epoch}, batch {batch}; first bad tensor: {node}"
            ),
            TrainError::Checkpoint { detail } => write!(f, "checkpoint sink: {detail}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

/// Warm-up coefficient for the prior KL term: `min(1, (epoch + 1) / n_t)`.
/// Strictly positive from epoch 0, exactly 1 for every epoch `>= n_t - 1`.
pub fn warmup_beta(epoch: usize, n_t: usize) -> f64 {
    debug_assert!(n_t >= 1);
    ((epoch + 1) as f64 / n_t as f64).min(1.0)
}

/// Adam accumulator state: first/second moments per parameter plus the step
/// counter for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps_hat: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Canonical constants: `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(shapes: &[&[usize]]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }

    pub fn for_model(handle: &ModelHandle<T>) -> Self {
        let params = handle.named_parameters();
        let shapes: Vec<&[usize]> = params.iter().map(|(_, t)| t.shape()).collect();
        Self::new(&shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One descent step on every parameter: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let corr1 = T::from_f64(1.0 - self.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.eps_hat);

        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(param.1.shape(), grad.shape(), "gradient shape mismatch");
            let p = param.1.data_mut();
            let m = m.data_mut();
            let v = v.data_mut();
            for i in 0..p.len() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Draw a fresh binarization of `[0, 1]` gray values: each pixel is 1 with
/// probability equal to its value.
pub fn resample_binarization(
    raw: &Tensor<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f64>, TrainError> {
    let mut data = Vec::with_capacity(raw.numel());
    for &p in raw.data() {
        if !(0.0..=1.0).contains(&p) {
            return Err(TrainError::Config {
                detail: format!("binarization input {p} outside [0, 1]"),
            });
        }
        data.push(f64::from(rng.gen_range(0.0..1.0) < p));
    }
    Ok(Tensor::new(raw.shape(), data).expect("shape preserved"))
}

/// One per-epoch metrics record. Values are dataset means of the per-batch
/// objective components.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub beta: f64,
    pub total: f64,
    pub kl_prior: f64,
    pub recon_x: f64,
    pub recon_w: f64,
    pub kl_sx: f64,
    pub kl_sw: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "epoch,beta,total,kl_prior,recon_x,recon_w,kl_sx,kl_sw,seconds";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.beta,
            self.total,
            self.kl_prior,
            self.recon_x,
            self.recon_w,
            self.kl_sx,
            self.kl_sw,
            self.seconds
        )
    }
}

/// Train a model on the dataset. Returns the trained handle and one metrics
/// row per epoch.
pub fn train<T: Scalar>(
    handle: ModelHandle<T>,
    dataset: &BimodalDataset,
    config: &TrainConfig,
) -> Result<(ModelHandle<T>, Vec<MetricsRow>), TrainError> {
    train_with_checkpoints(handle, dataset, config, &mut |_, _| Ok(()))
}

/// Checkpoint emission hook: called with (epoch, handle).
pub type CheckpointSink<'a, T> = &'a mut dyn FnMut(usize, &ModelHandle<T>) -> Result<(), String>;

/// As [`train`], invoking `sink(epoch, handle)` after every `eval_every`-th
/// epoch (checkpoint emission hook).
pub fn train_with_checkpoints<T: Scalar>(
    mut handle: ModelHandle<T>,
    dataset: &BimodalDataset,
    config: &TrainConfig,
    sink: CheckpointSink<'_, T>,
) -> Result<(ModelHandle<T>, Vec<MetricsRow>), TrainError> {
    config.validate()?;
    if dataset.x_spec != handle.config().x_spec || dataset.w_spec != handle.config().w_spec {
        return Err(TrainError::Config {
            detail: format!(
                "dataset modalities ({:?}, {:?}) do not match the model ({:?}, {:?})",
                dataset.x_spec,
                dataset.w_spec,
                handle.config().x_spec,
                handle.config().w_spec
            ),
        });
    }

    let hub = RngHub::new(config.seed);
    let mut adam = AdamState::for_model(&handle);
    let latent = handle.latent_dim();
    let n = dataset.len();
    let binarize = dataset.x_spec.family == LikelihoodFamily::BernoulliLogits;
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let beta = warmup_beta(epoch, config.warmup_epochs);

        // Fresh binarization draw each epoch when resampling; a fixed draw
        // (stream index 0) otherwise.
        let x_epoch: Tensor<f64> = if binarize {
            let stream_idx = if config.resample_binarization { epoch as u64 } else { 0 };
            resample_binarization(&dataset.x, &mut hub.stream(StreamKind::Binarize, stream_idx))?
        } else {
            dataset.x.clone()
        };

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut hub.stream(StreamKind::Shuffle, epoch as u64));
        let mut noise_rng = hub.stream(StreamKind::Noise, epoch as u64);

        let mut sums = LossSums::default();
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let xb: Tensor<T> = x_epoch.gather_rows(chunk).cast();
            let wb: Tensor<T> = dataset.w.gather_rows(chunk).cast();
            let noise = Tensor::<T>::from_f64_slice(
                &[chunk.len(), latent],
                &standard_normal_vec(&mut noise_rng, chunk.len() * latent),
            )
            .expect("sized buffer");

            let w_opt = (handle.variant() != Variant::Vae).then_some(&wb);
            let (breakdown, grads, tape) =
                handle.objective_with_grads(&xb, w_opt, &noise, T::from_f64(beta))?;
            if !breakdown.total.is_finite() {
                let node = tape
                    .first_non_finite()
                    .map(|(id, op)| format!("node {id} ({op})"))
                    .unwrap_or_else(|| "loss scalar".into());
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    node,
                });
            }

            // Ascent on the objective = descent on its negation.
            let descent: Vec<Tensor<T>> = grads
                .iter()
                .map(|g| {
                    let mut t = g.clone();
                    for v in t.data_mut() {
                        *v = -*v;
                    }
                    t
                })
                .collect();
            let mut params = handle.named_parameters_mut();
            adam.step(&mut params, &descent, config.learning_rate);

            sums.accumulate(&breakdown, chunk.len());
        }

        metrics.push(sums.into_row(epoch, beta, started.elapsed().as_secs_f64()));

        if config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 {
            sink(epoch, &handle).map_err(|detail| TrainError::Checkpoint { detail })?;
        }
    }

    Ok((handle, metrics))
}

#[derive(Default)]
struct LossSums {
    n: usize,
    total: f64,
    kl_prior: f64,
    recon_x: f64,
    recon_w: f64,
    kl_sx: f64,
    kl_sw: f64,
}

impl LossSums {
    fn accumulate<T: Scalar>(&mut self, b: &LossBreakdown<T>, batch: usize) {
        let w = batch as f64;
        self.n += batch;
        self.total += b.total.to_f64() * w;
        self.kl_prior += b.kl_prior.to_f64() * w;
        self.recon_x += b.recon_x.to_f64() * w;
        self.recon_w += b.recon_w.to_f64() * w;
        self.kl_sx += b.kl_single_x.to_f64() * w;
        self.kl_sw += b.kl_single_w.to_f64() * w;
    }

    fn into_row(self, epoch: usize, beta: f64, seconds: f64) -> MetricsRow {
        let n = self.n.max(1) as f64;
        MetricsRow {
            epoch,
            beta,
            total: self.total / n,
            kl_prior: self.kl_prior / n,
            recon_x: self.recon_x / n,
            recon_w: self.recon_w / n,
            kl_sx: self.kl_sx / n,
            kl_sw: self.kl_sw / n,
            seconds,
        }
    }
}
