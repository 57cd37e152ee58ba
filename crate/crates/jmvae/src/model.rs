//! Model variants and their training objectives.
//!
//! Four variants share one parameter layout:
//!
//! * `vae` — x-decoder `theta_x`, x-encoder `phi_x`.
//! * `cvae` — conditional decoder `theta_x` (input `[z; w]`) and conditional
//!   encoder `phi` (input `[x; w]`).
//! * `jmvae-zero` — decoders `theta_x`, `theta_w` and the joint encoder
//!   `phi`; missing modalities are zero-filled at test time.
//! * `jmvae-kl` — additionally trains single-modality encoders `phi_x`,
//!   `phi_w`, pulled toward the joint encoder by two KL terms weighted by
//!   `alpha`.
//!
//! Objectives are batch means; the warm-up coefficient `beta` anneals only
//! the prior KL term, never the `alpha`-weighted terms.

use std::fmt;

use crate::dist::{
    log_likelihood_rows, DiagGaussian, DistError, GaussianParams, LikelihoodParams, ModalitySpec,
};
use crate::nn::{zero_fill, Decoder, Encoder, EncoderConfig, MlpConfig, NnError};
use crate::rng::{RngHub, StreamKind};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Objective value, per-parameter gradients, and the recording tape.
pub type ObjectiveOutcome<T> =
    Result<(LossBreakdown<T>, Vec<Tensor<T>>, Tape<T>), ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Vae,
    Cvae,
    JmvaeZero,
    JmvaeKl,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vae => "vae",
            Variant::Cvae => "cvae",
            Variant::JmvaeZero => "jmvae-zero",
            Variant::JmvaeKl => "jmvae-kl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vae" => Some(Variant::Vae),
            "cvae" => Some(Variant::Cvae),
            "jmvae-zero" => Some(Variant::JmvaeZero),
            "jmvae-kl" => Some(Variant::JmvaeKl),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    X,
    W,
}

/// Which encoder parameters produced a posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderRole {
    Joint,
    SingleX,
    SingleW,
}

#[derive(Debug)]
pub enum ModelError {
    WrongVariant { expected: &'static str, got: Variant },
    MissingModality { detail: String },
    Unsupported { variant: Variant, detail: String },
    BatchMismatch { x: usize, w: usize },
    Config { detail: String },
    Tensor(TensorError),
    Dist(DistError),
    Nn(NnError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::WrongVariant { expected, got } => {
                write!(f, "operation requires variant {expected}, handle is {got}")
            }
            ModelError::MissingModality { detail } => write!(f, "missing modality: {detail}"),
            ModelError::Unsupported { variant, detail } => {
                write!(f, "{variant} does not support this: {detail}")
            }
            ModelError::BatchMismatch { x, w } => {
                write!(f, "batch size mismatch between modalities: x has {x}, w has {w}")
            }
            ModelError::Config { detail } => write!(f, "model config: {detail}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Dist(e) => write!(f, "{e}"),
            ModelError::Nn(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<DistError> for ModelError {
    fn from(e: DistError) -> Self {
        ModelError::Dist(e)
    }
}

impl From<NnError> for ModelError {
    fn from(e: NnError) -> Self {
        ModelError::Nn(e)
    }
}

/// Everything needed to rebuild a model's networks: variant, modality
/// declarations, architecture widths, `alpha`, and the init seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub x_spec: ModalitySpec,
    pub w_spec: ModalitySpec,
    pub latent_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub shared_dim: usize,
    pub dec_hidden: Vec<usize>,
    pub alpha: f64,
    pub negative_slope: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent_dim == 0 {
            return Err(ModelError::Config {
                detail: "latent dimension must be positive".into(),
            });
        }
        if self.alpha < 0.0 {
            return Err(ModelError::Config {
                detail: format!("alpha must be non-negative, got {}", self.alpha),
            });
        }
        if self.alpha != 0.0 && self.variant != Variant::JmvaeKl {
            return Err(ModelError::Config {
                detail: format!("alpha applies only to jmvae-kl, set on {}", self.variant),
            });
        }
        Ok(())
    }

    fn branch(&self, input_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden: self.enc_hidden.clone(),
            negative_slope: self.negative_slope,
        }
    }

    fn encoder_cfg(&self, branch_dims: &[usize]) -> EncoderConfig {
        EncoderConfig {
            branches: branch_dims.iter().map(|&d| self.branch(d)).collect(),
            shared_dim: self.shared_dim,
            latent_dim: self.latent_dim,
        }
    }

    fn decoder_cfg(&self, input_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden: self.dec_hidden.clone(),
            negative_slope: self.negative_slope,
        }
    }
}

/// Per-term view of an objective value. `total` always reconstructs from the
/// components via the variant's formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T: Scalar> {
    pub total: T,
    pub kl_prior: T,
    pub recon_x: T,
    pub recon_w: T,
    pub kl_single_x: T,
    pub kl_single_w: T,
    pub beta: T,
}

/// A model variant with its parameter set.
#[derive(Debug, Clone)]
pub struct ModelHandle<T: Scalar> {
    config: ModelConfig,
    dec_x: Decoder<T>,
    dec_w: Option<Decoder<T>>,
    enc_joint: Option<Encoder<T>>,
    enc_x: Option<Encoder<T>>,
    enc_w: Option<Encoder<T>>,
}

impl<T: Scalar> ModelHandle<T> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        Self::build(config, false)
    }

    /// All-zero parameters (bias-only behavior); used by closed-form tests.
    pub fn zero_init(config: ModelConfig) -> Result<Self, ModelError> {
        Self::build(config, true)
    }

    fn build(config: ModelConfig, zeros: bool) -> Result<Self, ModelError> {
        config.validate()?;
        let hub = RngHub::new(config.init_seed);
        let x_dim = config.x_spec.dim;
        let w_dim = config.w_spec.dim;
        let latent = config.latent_dim;

        // One init stream per parameter group, in a fixed order.
        let dec =
            |cfg: &MlpConfig, spec: &ModalitySpec, idx: u64| -> Result<Decoder<T>, ModelError> {
                Ok(if zeros {
                    Decoder::zero_init(cfg, spec)?
                } else {
                    Decoder::build(cfg, spec, &mut hub.stream(StreamKind::Init, idx))?
                })
            };
        let enc = |cfg: &EncoderConfig, idx: u64| -> Result<Encoder<T>, ModelError> {
            Ok(if zeros {
                Encoder::zero_init(cfg)?
            } else {
                Encoder::build(cfg, &mut hub.stream(StreamKind::Init, idx))?
            })
        };

        let handle = match config.variant {
            Variant::Vae => ModelHandle {
                dec_x: dec(&config.decoder_cfg(latent), &config.x_spec, 0)?,
                dec_w: None,
                enc_joint: None,
                enc_x: Some(enc(&config.encoder_cfg(&[x_dim]), 3)?),
                enc_w: None,
                config,
            },
            Variant::Cvae => ModelHandle {
                dec_x: dec(&config.decoder_cfg(latent + w_dim), &config.x_spec, 0)?,
                dec_w: None,
                enc_joint: Some(enc(&config.encoder_cfg(&[x_dim + w_dim]), 2)?),
                enc_x: None,
                enc_w: None,
                config,
            },
            Variant::JmvaeZero => ModelHandle {
                dec_x: dec(&config.decoder_cfg(latent), &config.x_spec, 0)?,
                dec_w: Some(dec(&config.decoder_cfg(latent), &config.w_spec, 1)?),
                enc_joint: Some(enc(&config.encoder_cfg(&[x_dim, w_dim]), 2)?),
                enc_x: None,
                enc_w: None,
                config,
            },
            Variant::JmvaeKl => ModelHandle {
                dec_x: dec(&config.decoder_cfg(latent), &config.x_spec, 0)?,
                dec_w: Some(dec(&config.decoder_cfg(latent), &config.w_spec, 1)?),
                enc_joint: Some(enc(&config.encoder_cfg(&[x_dim, w_dim]), 2)?),
                enc_x: Some(enc(&config.encoder_cfg(&[x_dim]), 3)?),
                enc_w: Some(enc(&config.encoder_cfg(&[w_dim]), 4)?),
                config,
            },
        };
        Ok(handle)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha
    }

    /// Parameter groups present on this variant, in checkpoint order.
    pub fn group_names(&self) -> Vec<&'static str> {
        let mut names = vec!["theta_x"];
        if self.dec_w.is_some() {
            names.push("theta_w");
        }
        if self.enc_joint.is_some() {
            names.push("phi");
        }
        if self.enc_x.is_some() {
            names.push("phi_x");
        }
        if self.enc_w.is_some() {
            names.push("phi_w");
        }
        names
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.dec_x.collect_params("theta_x", &mut out);
        if let Some(d) = &self.dec_w {
            d.collect_params("theta_w", &mut out);
        }
        if let Some(e) = &self.enc_joint {
            e.collect_params("phi", &mut out);
        }
        if let Some(e) = &self.enc_x {
            e.collect_params("phi_x", &mut out);
        }
        if let Some(e) = &self.enc_w {
            e.collect_params("phi_w", &mut out);
        }
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.dec_x.collect_params_mut("theta_x", &mut out);
        if let Some(d) = &mut self.dec_w {
            d.collect_params_mut("theta_w", &mut out);
        }
        if let Some(e) = &mut self.enc_joint {
            e.collect_params_mut("phi", &mut out);
        }
        if let Some(e) = &mut self.enc_x {
            e.collect_params_mut("phi_x", &mut out);
        }
        if let Some(e) = &mut self.enc_w {
            e.collect_params_mut("phi_w", &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelHandle<U> {
        ModelHandle {
            config: self.config.clone(),
            dec_x: self.dec_x.cast(),
            dec_w: self.dec_w.as_ref().map(Decoder::cast),
            enc_joint: self.enc_joint.as_ref().map(Encoder::cast),
            enc_x: self.enc_x.as_ref().map(Encoder::cast),
            enc_w: self.enc_w.as_ref().map(Encoder::cast),
        }
    }

    fn expect_variant(&self, allowed: &[Variant], expected: &'static str) -> Result<(), ModelError> {
        if allowed.contains(&self.config.variant) {
            Ok(())
        } else {
            Err(ModelError::WrongVariant {
                expected,
                got: self.config.variant,
            })
        }
    }

    fn check_batches(&self, x: &Tensor<T>, w: Option<&Tensor<T>>) -> Result<usize, ModelError> {
        let m = x.shape()[0];
        if let Some(w) = w {
            if w.shape()[0] != m {
                return Err(ModelError::BatchMismatch {
                    x: m,
                    w: w.shape()[0],
                });
            }
        }
        Ok(m)
    }

    fn check_noise(&self, noise: &Tensor<T>, batch: usize) -> Result<(), ModelError> {
        if noise.shape() != [batch, self.config.latent_dim] {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "noise",
                lhs: noise.shape().to_vec(),
                rhs: vec![batch, self.config.latent_dim],
            }));
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Inference
    // -----------------------------------------------------------------------

    /// Posterior over the latent given whichever modalities are present.
    /// Under `jmvae-zero` a missing modality is replaced by zeros at the
    /// joint encoder; under `jmvae-kl` the single-modality encoders are used.
    pub fn encode(
        &self,
        x: Option<&Tensor<T>>,
        w: Option<&Tensor<T>>,
    ) -> Result<(GaussianParams<T>, EncoderRole), ModelError> {
        match (x, w) {
            (None, None) => Err(ModelError::MissingModality {
                detail: "encode requires at least one modality".into(),
            }),
            (x, w) => match self.config.variant {
                Variant::Vae => match (x, w) {
                    (Some(x), None) => {
                        let enc = self.enc_x.as_ref().expect("vae has phi_x");
                        Ok((enc.predict(&[x])?, EncoderRole::SingleX))
                    }
                    _ => Err(ModelError::Unsupported {
                        variant: Variant::Vae,
                        detail: "only q(z|x) exists".into(),
                    }),
                },
                Variant::Cvae => match (x, w) {
                    (Some(x), Some(w)) => {
                        self.check_batches(x, Some(w))?;
                        let joined = concat_cols_host(x, w);
                        let enc = self.enc_joint.as_ref().expect("cvae has phi");
                        Ok((enc.predict(&[&joined])?, EncoderRole::Joint))
                    }
                    _ => Err(ModelError::Unsupported {
                        variant: Variant::Cvae,
                        detail: "conditional encoder needs both x and w".into(),
                    }),
                },
                Variant::JmvaeZero => {
                    let enc = self.enc_joint.as_ref().expect("jmvae has phi");
                    let batch = x.or(w).expect("checked above").shape()[0];
                    if let (Some(x), Some(w)) = (x, w) {
                        self.check_batches(x, Some(w))?;
                    }
                    let x_in = x
                        .cloned()
                        .unwrap_or_else(|| zero_fill(&self.config.x_spec, batch));
                    let w_in = w
                        .cloned()
                        .unwrap_or_else(|| zero_fill(&self.config.w_spec, batch));
                    let role = match (x.is_some(), w.is_some()) {
                        (true, true) => EncoderRole::Joint,
                        // Zero-filling still runs the joint parameters.
                        _ => EncoderRole::Joint,
                    };
                    Ok((enc.predict(&[&x_in, &w_in])?, role))
                }
                Variant::JmvaeKl => match (x, w) {
                    (Some(x), Some(w)) => {
                        self.check_batches(x, Some(w))?;
                        let enc = self.enc_joint.as_ref().expect("jmvae-kl has phi");
                        Ok((enc.predict(&[x, w])?, EncoderRole::Joint))
                    }
                    (Some(x), None) => {
                        let enc = self.enc_x.as_ref().expect("jmvae-kl has phi_x");
                        Ok((enc.predict(&[x])?, EncoderRole::SingleX))
                    }
                    (None, Some(w)) => {
                        let enc = self.enc_w.as_ref().expect("jmvae-kl has phi_w");
                        Ok((enc.predict(&[w])?, EncoderRole::SingleW))
                    }
                    (None, None) => unreachable!("handled above"),
                },
            },
        }
    }

    /// Decode latents into likelihood parameters for one modality.
    pub fn generate(
        &self,
        z: &Tensor<T>,
        modality: Modality,
    ) -> Result<LikelihoodParams<T>, ModelError> {
        match modality {
            Modality::X => {
                if self.config.variant == Variant::Cvae {
                    return Err(ModelError::Unsupported {
                        variant: Variant::Cvae,
                        detail: "decoder is conditioned on w; use generate_x_given_w".into(),
                    });
                }
                Ok(LikelihoodParams {
                    family: self.config.x_spec.family,
                    params: self.dec_x.predict(z)?,
                })
            }
            Modality::W => {
                let dec = self.dec_w.as_ref().ok_or(ModelError::Unsupported {
                    variant: self.config.variant,
                    detail: "no w decoder on this variant".into(),
                })?;
                Ok(LikelihoodParams {
                    family: self.config.w_spec.family,
                    params: dec.predict(z)?,
                })
            }
        }
    }

    /// CVAE decoder `p(x | z, w)`.
    pub fn generate_x_given_w(
        &self,
        z: &Tensor<T>,
        w: &Tensor<T>,
    ) -> Result<LikelihoodParams<T>, ModelError> {
        self.expect_variant(&[Variant::Cvae], "cvae")?;
        if z.shape()[0] != w.shape()[0] {
            return Err(ModelError::BatchMismatch {
                x: z.shape()[0],
                w: w.shape()[0],
            });
        }
        let joined = concat_cols_host(z, w);
        Ok(LikelihoodParams {
            family: self.config.x_spec.family,
            params: self.dec_x.predict(&joined)?,
        })
    }

    // -----------------------------------------------------------------------
    // Objectives
    // -----------------------------------------------------------------------

    pub fn elbo_vae(
        &self,
        x: &Tensor<T>,
        noise: &Tensor<T>,
        beta: T,
    ) -> Result<LossBreakdown<T>, ModelError> {
        self.expect_variant(&[Variant::Vae], "vae")?;
        self.objective(x, None, noise, beta)
    }

    pub fn elbo_cvae(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        noise: &Tensor<T>,
        beta: T,
    ) -> Result<LossBreakdown<T>, ModelError> {
        self.expect_variant(&[Variant::Cvae], "cvae")?;
        self.objective(x, Some(w), noise, beta)
    }

    /// The joint bound (no `alpha` terms) for either JMVAE approach.
    pub fn elbo_jm(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        noise: &Tensor<T>,
        beta: T,
    ) -> Result<LossBreakdown<T>, ModelError> {
        self.expect_variant(&[Variant::JmvaeZero, Variant::JmvaeKl], "jmvae-zero or jmvae-kl")?;
        let tape = Tape::new();
        let (_, breakdown) = self.objective_on_tape(&tape, x, Some(w), noise, beta, false)?;
        Ok(breakdown)
    }

    /// The `jmvae-kl` objective: joint bound minus
    /// `alpha * [KL(q(z|x,w) || q(z|x)) + KL(q(z|x,w) || q(z|w))]`.
    pub fn objective_jmkl(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        noise: &Tensor<T>,
        beta: T,
    ) -> Result<LossBreakdown<T>, ModelError> {
        self.expect_variant(&[Variant::JmvaeKl], "jmvae-kl")?;
        self.objective(x, Some(w), noise, beta)
    }

    /// The variant's training objective (higher is better).
    pub fn objective(
        &self,
        x: &Tensor<T>,
        w: Option<&Tensor<T>>,
        noise: &Tensor<T>,
        beta: T,
    ) -> Result<LossBreakdown<T>, ModelError> {
        let tape = Tape::new();
        let (_, breakdown) = self.objective_on_tape(&tape, x, w, noise, beta, true)?;
        Ok(breakdown)
    }

    /// Objective plus its gradient with respect to every parameter, aligned
    /// with [`ModelHandle::named_parameters`] order. The gradient is of the
    /// maximized objective (ascent direction); the tape is returned for
    /// divergence diagnostics.
    pub fn objective_with_grads(
        &self,
        x: &Tensor<T>,
        w: Option<&Tensor<T>>,
        noise: &Tensor<T>,
        beta: T,
    ) -> ObjectiveOutcome<T> {
        let tape = Tape::new();
        let (total, breakdown) = self.objective_on_tape(&tape, x, w, noise, beta, true)?;
        if !breakdown.total.is_finite() {
            // Leave NaN diagnostics to the caller (training loop) via the tape.
            let grads = self
                .named_parameters()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect();
            return Ok((breakdown, grads, tape));
        }
        let grads = tape.backward(total)?;
        let out = self
            .named_parameters()
            .iter()
            .map(|(_, t)| match tape.leaf_id(t) {
                Some(id) => grads.by_id(id),
                None => Tensor::zeros(t.shape()),
            })
            .collect();
        Ok((breakdown, out, tape))
    }

    fn objective_on_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Tensor<T>,
        w: Option<&Tensor<T>>,
        noise: &Tensor<T>,
        beta: T,
        with_alpha: bool,
    ) -> Result<(Var<'t, T>, LossBreakdown<T>), ModelError> {
        let batch = self.check_batches(x, w)?;
        self.check_noise(noise, batch)?;
        let zero = T::ZERO;

        match self.config.variant {
            Variant::Vae => {
                let enc = self.enc_x.as_ref().expect("vae has phi_x");
                let q = enc.forward(tape, &[x])?;
                let kl = q.kl_to_standard_rows()?.mean_all()?;
                let z = q.rsample(noise)?;
                let logits = self.dec_x.forward(tape, z)?;
                let recon =
                    log_likelihood_rows(self.config.x_spec.family, logits, x)?.mean_all()?;
                let total = recon.sub(kl.mul_scalar(beta)?)?;
                let breakdown = LossBreakdown {
                    total: total.value().item(),
                    kl_prior: kl.value().item(),
                    recon_x: recon.value().item(),
                    recon_w: zero,
                    kl_single_x: zero,
                    kl_single_w: zero,
                    beta,
                };
                Ok((total, breakdown))
            }
            Variant::Cvae => {
                let w = w.ok_or_else(|| ModelError::MissingModality {
                    detail: "cvae objective needs w".into(),
                })?;
                let enc = self.enc_joint.as_ref().expect("cvae has phi");
                let joined = concat_cols_host(x, w);
                let q = enc.forward(tape, &[&joined])?;
                let kl = q.kl_to_standard_rows()?.mean_all()?;
                let z = q.rsample(noise)?;
                let w_const = tape.constant(w);
                let zw = z.concat_cols(w_const)?;
                let logits = self.dec_x.forward(tape, zw)?;
                let recon =
                    log_likelihood_rows(self.config.x_spec.family, logits, x)?.mean_all()?;
                let total = recon.sub(kl.mul_scalar(beta)?)?;
                let breakdown = LossBreakdown {
                    total: total.value().item(),
                    kl_prior: kl.value().item(),
                    recon_x: recon.value().item(),
                    recon_w: zero,
                    kl_single_x: zero,
                    kl_single_w: zero,
                    beta,
                };
                Ok((total, breakdown))
            }
            Variant::JmvaeZero | Variant::JmvaeKl => {
                let w = w.ok_or_else(|| ModelError::MissingModality {
                    detail: "joint objective needs w".into(),
                })?;
                let enc = self.enc_joint.as_ref().expect("jmvae has phi");
                let q = enc.forward(tape, &[x, w])?;
                let kl = q.kl_to_standard_rows()?.mean_all()?;
                let z = q.rsample(noise)?;
                let x_logits = self.dec_x.forward(tape, z)?;
                let recon_x =
                    log_likelihood_rows(self.config.x_spec.family, x_logits, x)?.mean_all()?;
                let dec_w = self.dec_w.as_ref().expect("jmvae has theta_w");
                let w_logits = dec_w.forward(tape, z)?;
                let recon_w =
                    log_likelihood_rows(self.config.w_spec.family, w_logits, w)?.mean_all()?;
                let base = recon_x.add(recon_w)?.sub(kl.mul_scalar(beta)?)?;

                let use_alpha = with_alpha && self.config.variant == Variant::JmvaeKl;
                let (kl_sx, kl_sw) = if self.config.variant == Variant::JmvaeKl {
                    let qx = self
                        .enc_x
                        .as_ref()
                        .expect("jmvae-kl has phi_x")
                        .forward(tape, &[x])?;
                    let qw = self
                        .enc_w
                        .as_ref()
                        .expect("jmvae-kl has phi_w")
                        .forward(tape, &[w])?;
                    (
                        Some(kl_between_mean(&q, &qx)?),
                        Some(kl_between_mean(&q, &qw)?),
                    )
                } else {
                    (None, None)
                };

                // alpha = 0 takes the identical code path as the plain joint
                // bound, so the two agree bit for bit.
                let alpha = T::from_f64(self.config.alpha);
                let total = if use_alpha && self.config.alpha != 0.0 {
                    let kx = kl_sx.expect("jmvae-kl branch");
                    let kw = kl_sw.expect("jmvae-kl branch");
                    base.sub(kx.add(kw)?.mul_scalar(alpha)?)?
                } else {
                    base
                };

                let breakdown = LossBreakdown {
                    total: total.value().item(),
                    kl_prior: kl.value().item(),
                    recon_x: recon_x.value().item(),
                    recon_w: recon_w.value().item(),
                    kl_single_x: kl_sx.map_or(zero, |v| v.value().item()),
                    kl_single_w: kl_sw.map_or(zero, |v| v.value().item()),
                    beta,
                };
                Ok((total, breakdown))
            }
        }
    }
}

fn kl_between_mean<'t, T: Scalar>(
    q: &DiagGaussian<'t, T>,
    other: &DiagGaussian<'t, T>,
) -> Result<Var<'t, T>, ModelError> {
    Ok(q.kl_between_rows(other)?.mean_all()?)
}

/// Host-side column concatenation of two rank-2 tensors.
pub fn concat_cols_host<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape()[0], b.shape()[0], "row counts must match");
    let (m, ac, bc) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut data = Vec::with_capacity(m * (ac + bc));
    for i in 0..m {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::new(&[m, ac + bc], data).expect("sized buffer")
}
