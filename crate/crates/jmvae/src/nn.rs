//! MLP encoders and decoders.
//!
//! Encoders follow the shared-top layout: one branch per modality, each a
//! stack of leaky-rectified dense layers ending in a linear map to the shared
//! width. Branch outputs are fused by elementwise sum, the fused vector is
//! activated, and two linear heads produce the posterior mean and
//! log-variance. Summing (rather than concatenating) keeps the fused width
//! equal to the branch width, and with zero biases a zero-filled branch
//! contributes exactly nothing at initialization.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dist::{DiagGaussian, GaussianParams, LikelihoodFamily, ModalitySpec};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Default negative slope of the leaky rectifier.
pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum NnError {
    InvalidConfig { detail: String },
    Tensor(TensorError),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::InvalidConfig { detail } => write!(f, "invalid network config: {detail}"),
            NnError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for NnError {}

impl From<TensorError> for NnError {
    fn from(e: TensorError) -> Self {
        NnError::Tensor(e)
    }
}

/// Widths of one dense stack: input dimension plus at least one hidden layer,
/// leaky-rectified after every hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub negative_slope: f64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: &[usize]) -> Self {
        MlpConfig {
            input_dim,
            hidden: hidden.to_vec(),
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
        }
    }

    fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 {
            return Err(NnError::InvalidConfig {
                detail: "input dimension must be positive".into(),
            });
        }
        if self.hidden.is_empty() {
            return Err(NnError::InvalidConfig {
                detail: "at least one hidden layer required".into(),
            });
        }
        if self.hidden.contains(&0) {
            return Err(NnError::InvalidConfig {
                detail: format!("hidden widths must be positive, got {:?}", self.hidden),
            });
        }
        Ok(())
    }
}

/// Layout of a (possibly multimodal) encoder: one branch per modality, all
/// fused at `shared_dim` before the mean / log-variance heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub branches: Vec<MlpConfig>,
    pub shared_dim: usize,
    pub latent_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.branches.is_empty() {
            return Err(NnError::InvalidConfig {
                detail: "encoder needs at least one branch".into(),
            });
        }
        for b in &self.branches {
            b.validate()?;
        }
        if self.shared_dim == 0 || self.latent_dim == 0 {
            return Err(NnError::InvalidConfig {
                detail: "shared and latent dimensions must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Glorot-uniform weights (`+-sqrt(6 / (fan_in + fan_out))`), zero biases.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<T> = (0..fan_in * fan_out)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Linear {
            weight: Tensor::new(&[fan_in, fan_out], data).expect("sized buffer"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        x.matmul(tape.leaf(&self.weight))?.add(tape.leaf(&self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.w"), &self.weight));
        out.push((format!("{prefix}.b"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.w"), &mut self.weight));
        out.push((format!("{prefix}.b"), &mut self.bias));
    }

    fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Stack of leaky-rectified dense layers.
#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    layers: Vec<Linear<T>>,
    slope: T,
}

impl<T: Scalar> Mlp<T> {
    fn build(cfg: &MlpConfig, init: &mut dyn FnMut(usize, usize) -> Linear<T>) -> Self {
        let mut layers = Vec::new();
        let mut prev = cfg.input_dim;
        for &w in &cfg.hidden {
            layers.push(init(prev, w));
            prev = w;
        }
        Mlp {
            layers,
            slope: T::from_f64(cfg.negative_slope),
        }
    }

    fn out_dim(&self) -> usize {
        self.layers
            .last()
            .expect("validated: at least one layer")
            .weight
            .shape()[1]
    }

    /// Hidden representation: every layer is followed by the leaky rectifier.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, h)?.leaky_relu(self.slope)?;
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.l{i}"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&format!("{prefix}.l{i}"), out);
        }
    }

    fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self.layers.iter().map(Linear::cast).collect(),
            slope: U::from_f64(self.slope.to_f64()),
        }
    }
}

/// One encoder branch: hidden stack plus the linear map to the shared width
/// (left pre-activation so branch sums fuse before the nonlinearity).
#[derive(Debug, Clone)]
struct Branch<T: Scalar> {
    hidden: Mlp<T>,
    to_shared: Linear<T>,
}

impl<T: Scalar> Branch<T> {
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let h = self.hidden.forward(tape, x)?;
        self.to_shared.forward(tape, h)
    }
}

/// Encoder producing a diagonal Gaussian over the latent space from one or
/// more modality inputs.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    branches: Vec<Branch<T>>,
    head_mean: Linear<T>,
    head_logvar: Linear<T>,
    slope: T,
    latent_dim: usize,
}

impl<T: Scalar> Encoder<T> {
    pub fn build(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        cfg.validate()?;
        Ok(Self::build_with(cfg, &mut |i, o| Linear::glorot(i, o, rng)))
    }

    /// All-zero parameters; the output Gaussian is then determined by the
    /// head biases alone.
    pub fn zero_init(cfg: &EncoderConfig) -> Result<Self, NnError> {
        cfg.validate()?;
        Ok(Self::build_with(cfg, &mut |i, o| Linear::zeros(i, o)))
    }

    fn build_with(cfg: &EncoderConfig, init: &mut dyn FnMut(usize, usize) -> Linear<T>) -> Self {
        let branches = cfg
            .branches
            .iter()
            .map(|b| {
                let hidden = Mlp::build(b, init);
                let to_shared = init(hidden.out_dim(), cfg.shared_dim);
                Branch { hidden, to_shared }
            })
            .collect();
        Encoder {
            branches,
            head_mean: init(cfg.shared_dim, cfg.latent_dim),
            head_logvar: init(cfg.shared_dim, cfg.latent_dim),
            slope: T::from_f64(
                cfg.branches
                    .first()
                    .map(|b| b.negative_slope)
                    .unwrap_or(DEFAULT_NEGATIVE_SLOPE),
            ),
            latent_dim: cfg.latent_dim,
        }
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Posterior parameters for a batch. `inputs` supplies one `[m, dim]`
    /// tensor per branch (zero-filled by the caller when a modality is
    /// missing).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        inputs: &[&Tensor<T>],
    ) -> Result<DiagGaussian<'t, T>, NnError> {
        if inputs.len() != self.branches.len() {
            return Err(NnError::InvalidConfig {
                detail: format!(
                    "encoder has {} branches, got {} inputs",
                    self.branches.len(),
                    inputs.len()
                ),
            });
        }
        let mut fused: Option<Var<'t, T>> = None;
        for (branch, input) in self.branches.iter().zip(inputs) {
            let h = branch.forward(tape, tape.constant(input))?;
            fused = Some(match fused {
                None => h,
                Some(acc) => acc.add(h)?,
            });
        }
        let fused = fused.expect("validated: at least one branch");
        let activated = fused.leaky_relu(self.slope)?;
        let mean = self.head_mean.forward(tape, activated)?;
        let logvar = self.head_logvar.forward(tape, activated)?;
        Ok(DiagGaussian::new(mean, logvar).expect("heads share latent width"))
    }

    /// Detached posterior parameters (inference path).
    pub fn predict(&self, inputs: &[&Tensor<T>]) -> Result<GaussianParams<T>, NnError> {
        let tape = Tape::new();
        let q = self.forward(&tape, inputs)?;
        Ok(GaussianParams {
            mean: q.mean.value(),
            logvar: q.logvar.value(),
        })
    }

    pub fn param_count(&self) -> usize {
        let branches: usize = self
            .branches
            .iter()
            .map(|b| b.hidden.param_count() + b.to_shared.param_count())
            .sum();
        branches + self.head_mean.param_count() + self.head_logvar.param_count()
    }

    pub fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, b) in self.branches.iter().enumerate() {
            b.hidden.collect(&format!("{prefix}.branch{i}"), out);
            b.to_shared.collect(&format!("{prefix}.branch{i}.shared"), out);
        }
        self.head_mean.collect(&format!("{prefix}.mean"), out);
        self.head_logvar.collect(&format!("{prefix}.logvar"), out);
    }

    pub fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<T>)>,
    ) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.hidden.collect_mut(&format!("{prefix}.branch{i}"), out);
            b.to_shared
                .collect_mut(&format!("{prefix}.branch{i}.shared"), out);
        }
        self.head_mean.collect_mut(&format!("{prefix}.mean"), out);
        self.head_logvar
            .collect_mut(&format!("{prefix}.logvar"), out);
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    hidden: b.hidden.cast(),
                    to_shared: b.to_shared.cast(),
                })
                .collect(),
            head_mean: self.head_mean.cast(),
            head_logvar: self.head_logvar.cast(),
            slope: U::from_f64(self.slope.to_f64()),
            latent_dim: self.latent_dim,
        }
    }
}

/// Decoder producing likelihood parameters (logits or means) from latents.
#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar> {
    hidden: Mlp<T>,
    out: Linear<T>,
    family: LikelihoodFamily,
}

impl<T: Scalar> Decoder<T> {
    pub fn build(
        cfg: &MlpConfig,
        modality: &ModalitySpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut init = |i, o| Linear::glorot(i, o, rng);
        let hidden = Mlp::build(cfg, &mut init);
        let out = init(hidden.out_dim(), modality.dim);
        Ok(Decoder {
            hidden,
            out,
            family: modality.family,
        })
    }

    pub fn zero_init(cfg: &MlpConfig, modality: &ModalitySpec) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut init = |i, o| Linear::<T>::zeros(i, o);
        let hidden = Mlp::build(cfg, &mut init);
        let out = init(hidden.out_dim(), modality.dim);
        Ok(Decoder {
            hidden,
            out,
            family: modality.family,
        })
    }

    pub fn family(&self) -> LikelihoodFamily {
        self.family
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.out.weight.shape()[1]
    }

    /// Likelihood parameters for a batch of latents `[m, latent]` (plus any
    /// conditioning columns the decoder was built with).
    pub fn forward<'t>(&self, tape: &'t Tape<T>, z: Var<'t, T>) -> Result<Var<'t, T>, NnError> {
        let h = self.hidden.forward(tape, z)?;
        Ok(self.out.forward(tape, h)?)
    }

    /// Detached likelihood parameters (inference path).
    pub fn predict(&self, z: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let tape = Tape::new();
        let out = self.forward(&tape, tape.constant(z))?;
        Ok(out.value())
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.out.param_count()
    }

    pub fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.hidden.collect(prefix, out);
        self.out.collect(&format!("{prefix}.out"), out);
    }

    pub fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<T>)>,
    ) {
        self.hidden.collect_mut(prefix, out);
        self.out.collect_mut(&format!("{prefix}.out"), out);
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            hidden: self.hidden.cast(),
            out: self.out.cast(),
            family: self.family,
        }
    }
}

/// All-zeros stand-in input for a missing modality.
pub fn zero_fill<T: Scalar>(modality: &ModalitySpec, batch: usize) -> Tensor<T> {
    Tensor::zeros(&[batch, modality.dim])
}
