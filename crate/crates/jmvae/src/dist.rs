//! Probability primitives: diagonal Gaussians with reparameterized sampling,
//! Bernoulli / categorical / fixed-variance Gaussian likelihoods, and the
//! analytic KL divergences used by every objective.
//!
//! Decoders emit logits (not probabilities) and every likelihood is computed
//! in log space via log-sigmoid / log-sum-exp, so nothing overflows for large
//! logits. When explicit probabilities are requested (image export), they are
//! clamped to `[1e-7, 1 - 1e-7]`.

use std::fmt;

use crate::tape::Var;
use crate::tensor::{Scalar, Tensor, TensorError};

pub const PROB_CLAMP: f64 = 1e-7;
const LN_2PI: f64 = 1.8378770664093453;

/// Likelihood family of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodFamily {
    /// Independent Bernoulli pixels parameterized by logits.
    BernoulliLogits,
    /// One categorical draw over `dim` classes parameterized by logits.
    CategoricalLogits,
    /// Diagonal Gaussian with unit variance parameterized by means.
    GaussianUnitVariance,
}

impl LikelihoodFamily {
    pub fn name(self) -> &'static str {
        match self {
            LikelihoodFamily::BernoulliLogits => "bernoulli",
            LikelihoodFamily::CategoricalLogits => "categorical",
            LikelihoodFamily::GaussianUnitVariance => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bernoulli" => Some(LikelihoodFamily::BernoulliLogits),
            "categorical" => Some(LikelihoodFamily::CategoricalLogits),
            "gaussian" => Some(LikelihoodFamily::GaussianUnitVariance),
            _ => None,
        }
    }
}

/// Declaration of one observed modality: its size, display shape, and
/// likelihood family.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    pub family: LikelihoodFamily,
    pub dim: usize,
    /// Display/layout shape (e.g. `[28, 28]` for images); product equals `dim`.
    pub shape: Vec<usize>,
}

impl ModalitySpec {
    pub fn new(
        name: impl Into<String>,
        family: LikelihoodFamily,
        shape: &[usize],
    ) -> Result<Self, DistError> {
        let dim: usize = shape.iter().product();
        if dim == 0 {
            return Err(DistError::Invalid {
                detail: format!("modality shape {shape:?} has zero size"),
            });
        }
        Ok(ModalitySpec {
            name: name.into(),
            family,
            dim,
            shape: shape.to_vec(),
        })
    }

    pub fn bernoulli_image(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, LikelihoodFamily::BernoulliLogits, &[rows, cols]).expect("nonzero shape")
    }

    pub fn categorical_label(name: impl Into<String>, classes: usize) -> Self {
        Self::new(name, LikelihoodFamily::CategoricalLogits, &[classes]).expect("nonzero shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DistError {
    Tensor(TensorError),
    /// Observation outside the likelihood family's support.
    OutOfSupport { family: &'static str, detail: String },
    Invalid { detail: String },
}

impl fmt::Display for DistError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistError::Tensor(e) => write!(f, "{e}"),
            DistError::OutOfSupport { family, detail } => {
                write!(f, "{family} observation out of support: {detail}")
            }
            DistError::Invalid { detail } => write!(f, "{detail}"),
        }
    }
}

impl std::error::Error for DistError {}

impl From<TensorError> for DistError {
    fn from(e: TensorError) -> Self {
        DistError::Tensor(e)
    }
}

/// Diagonal Gaussian on the tape: per-dimension mean and log-variance, one
/// row per datum. Every encoder output is a value of this type.
#[derive(Clone, Copy)]
pub struct DiagGaussian<'t, T: Scalar> {
    pub mean: Var<'t, T>,
    pub logvar: Var<'t, T>,
}

impl<'t, T: Scalar> DiagGaussian<'t, T> {
    pub fn new(mean: Var<'t, T>, logvar: Var<'t, T>) -> Result<Self, DistError> {
        if mean.shape() != logvar.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "diag_gaussian",
                lhs: mean.shape(),
                rhs: logvar.shape(),
            }
            .into());
        }
        Ok(DiagGaussian { mean, logvar })
    }

    /// Reparameterized sample `z = mean + exp(logvar / 2) * eps`,
    /// differentiable through both parameters.
    pub fn rsample(&self, eps: &Tensor<T>) -> Result<Var<'t, T>, DistError> {
        if eps.shape() != self.mean.shape().as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "rsample",
                lhs: self.mean.shape(),
                rhs: eps.shape().to_vec(),
            }
            .into());
        }
        let std = self.logvar.mul_scalar(T::from_f64(0.5))?.exp()?;
        let noise = self.mean.tape().constant(eps);
        Ok(self.mean.add(std.mul(noise)?)?)
    }

    /// Per-datum `KL(q || N(0, I))`, one value per row:
    /// `-1/2 * sum_d (1 + log var - mean^2 - var)`.
    pub fn kl_to_standard_rows(&self) -> Result<Var<'t, T>, DistError> {
        let mu2 = self.mean.mul(self.mean)?;
        let var = self.logvar.exp()?;
        let inner = self
            .logvar
            .add_scalar(T::ONE)?
            .sub(mu2)?
            .sub(var)?
            .sum_rows()?;
        Ok(inner.mul_scalar(T::from_f64(-0.5))?)
    }

    /// Batch-mean `KL(q || N(0, I))` as a scalar; non-negative, zero iff
    /// `mean = 0` and `var = 1`.
    pub fn kl_to_standard_normal(&self) -> Result<Var<'t, T>, DistError> {
        Ok(self.kl_to_standard_rows()?.mean_all()?)
    }

    /// Per-datum `KL(self || other)` between diagonal Gaussians:
    /// `sum_d [ log(s2/s1) + (s1^2 + (m1 - m2)^2) / (2 s2^2) - 1/2 ]`.
    pub fn kl_between_rows(&self, other: &DiagGaussian<'t, T>) -> Result<Var<'t, T>, DistError> {
        if self.mean.shape() != other.mean.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "kl_between",
                lhs: self.mean.shape(),
                rhs: other.mean.shape(),
            }
            .into());
        }
        let d = self.mean.sub(other.mean)?;
        let d2 = d.mul(d)?;
        let var1 = self.logvar.exp()?;
        let inv_var2 = other.logvar.neg()?.exp()?;
        let ratio = var1.add(d2)?.mul(inv_var2)?;
        let inner = other
            .logvar
            .sub(self.logvar)?
            .add(ratio)?
            .add_scalar(-T::ONE)?
            .sum_rows()?;
        Ok(inner.mul_scalar(T::from_f64(0.5))?)
    }

    /// Batch-mean `KL(self || other)` as a scalar.
    pub fn kl_between(&self, other: &DiagGaussian<'t, T>) -> Result<Var<'t, T>, DistError> {
        Ok(self.kl_between_rows(other)?.mean_all()?)
    }
}

/// Detached diagonal Gaussian parameters (posterior means/log-variances read
/// back off the tape for inference and evaluation).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<T: Scalar> {
    pub mean: Tensor<T>,
    pub logvar: Tensor<T>,
}

/// Detached decoder output: the likelihood family plus its logits or means.
#[derive(Debug, Clone)]
pub struct LikelihoodParams<T: Scalar> {
    pub family: LikelihoodFamily,
    pub params: Tensor<T>,
}

impl<T: Scalar> LikelihoodParams<T> {
    /// Explicit probabilities (Bernoulli / categorical families) or means
    /// (Gaussian family). Probabilities are clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn probabilities(&self) -> Tensor<T> {
        let lo = T::from_f64(PROB_CLAMP);
        let hi = T::from_f64(1.0 - PROB_CLAMP);
        match self.family {
            LikelihoodFamily::GaussianUnitVariance => self.params.clone(),
            LikelihoodFamily::BernoulliLogits => {
                let data = self
                    .params
                    .data()
                    .iter()
                    .map(|&l| sigmoid_scalar(l).maximum(lo).minimum(hi))
                    .collect();
                Tensor::new(self.params.shape(), data).expect("shape preserved")
            }
            LikelihoodFamily::CategoricalLogits => {
                let shape = self.params.shape().to_vec();
                let cols = *shape.last().expect("nonempty shape");
                let rows = self.params.numel() / cols;
                let mut out = vec![T::ZERO; self.params.numel()];
                for i in 0..rows {
                    let row = &self.params.data()[i * cols..(i + 1) * cols];
                    let mut hi_l = T::neg_infinity();
                    for &v in row {
                        hi_l = hi_l.maximum(v);
                    }
                    let mut s = T::ZERO;
                    for &v in row {
                        s = s + (v - hi_l).exp();
                    }
                    for j in 0..cols {
                        out[i * cols + j] = ((row[j] - hi_l).exp() / s).maximum(lo).minimum(hi);
                    }
                }
                Tensor::new(&shape, out).expect("shape preserved")
            }
        }
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Check an observation batch against a family's support.
pub fn validate_observation<T: Scalar>(
    family: LikelihoodFamily,
    obs: &Tensor<T>,
) -> Result<(), DistError> {
    match family {
        LikelihoodFamily::GaussianUnitVariance => Ok(()),
        LikelihoodFamily::BernoulliLogits => {
            for &v in obs.data() {
                if v != T::ZERO && v != T::ONE {
                    return Err(DistError::OutOfSupport {
                        family: "bernoulli",
                        detail: format!("pixel value {v} is not binary"),
                    });
                }
            }
            Ok(())
        }
        LikelihoodFamily::CategoricalLogits => {
            let shape = obs.shape();
            let cols = *shape.last().expect("nonempty shape");
            let rows = obs.numel() / cols;
            for i in 0..rows {
                let row = &obs.data()[i * cols..(i + 1) * cols];
                let mut ones = 0usize;
                for &v in row {
                    if v == T::ONE {
                        ones += 1;
                    } else if v != T::ZERO {
                        return Err(DistError::OutOfSupport {
                            family: "categorical",
                            detail: format!("entry {v} is not 0 or 1"),
                        });
                    }
                }
                if ones != 1 {
                    return Err(DistError::OutOfSupport {
                        family: "categorical",
                        detail: format!("row {i} has {ones} ones, expected exactly one"),
                    });
                }
            }
            Ok(())
        }
    }
}

/// Per-datum log-likelihood `log p(obs | params)`, one value per row,
/// computed in log space. `params` are logits for the Bernoulli and
/// categorical families and means for the unit-variance Gaussian family.
pub fn log_likelihood_rows<'t, T: Scalar>(
    family: LikelihoodFamily,
    params: Var<'t, T>,
    obs: &Tensor<T>,
) -> Result<Var<'t, T>, DistError> {
    if params.shape() != obs.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "log_likelihood",
            lhs: params.shape(),
            rhs: obs.shape().to_vec(),
        }
        .into());
    }
    validate_observation(family, obs)?;
    let obs_v = params.tape().constant(obs);
    let rows = match family {
        LikelihoodFamily::BernoulliLogits => {
            // sum_j obs * logit - softplus(logit)
            params.mul(obs_v)?.sub(params.softplus()?)?.sum_rows()?
        }
        LikelihoodFamily::CategoricalLogits => {
            // obs is one-hot: sum_j obs * logit - logsumexp(logits)
            params
                .mul(obs_v)?
                .sum_rows()?
                .sub(params.logsumexp_rows()?)?
        }
        LikelihoodFamily::GaussianUnitVariance => {
            let d = obs_v.sub(params)?;
            let dim = *obs.shape().last().expect("nonempty shape") as f64;
            d.mul(d)?
                .sum_rows()?
                .mul_scalar(T::from_f64(-0.5))?
                .add_scalar(T::from_f64(-0.5 * dim * LN_2PI))?
        }
    };
    Ok(rows)
}

/// Batch-mean log-likelihood as a scalar.
pub fn log_likelihood<'t, T: Scalar>(
    family: LikelihoodFamily,
    params: Var<'t, T>,
    obs: &Tensor<T>,
) -> Result<Var<'t, T>, DistError> {
    Ok(log_likelihood_rows(family, params, obs)?.mean_all()?)
}

// ---------------------------------------------------------------------------
// Plain f64 densities. Test-time bound arithmetic runs at 64 bits regardless
// of training precision, so the evaluation module works on these rather than
// on taped values.
// ---------------------------------------------------------------------------

/// `log N(z; mean, diag(exp(logvar)))`.
pub fn log_normal_diag(z: &[f64], mean: &[f64], logvar: &[f64]) -> f64 {
    debug_assert_eq!(z.len(), mean.len());
    debug_assert_eq!(z.len(), logvar.len());
    let mut acc = 0.0;
    for i in 0..z.len() {
        let d = z[i] - mean[i];
        acc += -0.5 * (d * d * (-logvar[i]).exp() + logvar[i] + LN_2PI);
    }
    acc
}

/// `log N(z; 0, I)`.
pub fn log_standard_normal(z: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in z {
        acc += -0.5 * (v * v + LN_2PI);
    }
    acc
}

fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Analytic `KL(N(m1, e^lv1) || N(m2, e^lv2))` for diagonal Gaussians
/// (plain f64 path).
pub fn kl_diag_slices(m1: &[f64], lv1: &[f64], m2: &[f64], lv2: &[f64]) -> f64 {
    debug_assert_eq!(m1.len(), m2.len());
    let mut acc = 0.0;
    for i in 0..m1.len() {
        let d = m1[i] - m2[i];
        acc += 0.5 * ((lv2[i] - lv1[i]) + (lv1[i].exp() + d * d) * (-lv2[i]).exp() - 1.0);
    }
    acc
}

/// Analytic `KL(N(m, e^lv) || N(0, I))` (plain f64 path).
pub fn kl_standard_slices(m: &[f64], lv: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..m.len() {
        acc += -0.5 * (1.0 + lv[i] - m[i] * m[i] - lv[i].exp());
    }
    acc
}

/// `log p(obs | params)` for one datum (plain f64 path).
pub fn log_likelihood_slice(family: LikelihoodFamily, params: &[f64], obs: &[f64]) -> f64 {
    debug_assert_eq!(params.len(), obs.len());
    match family {
        LikelihoodFamily::BernoulliLogits => {
            let mut acc = 0.0;
            for (l, o) in params.iter().zip(obs) {
                acc += o * l - softplus_f64(*l);
            }
            acc
        }
        LikelihoodFamily::CategoricalLogits => {
            let mut hi = f64::NEG_INFINITY;
            for &l in params {
                hi = hi.max(l);
            }
            let mut lse = 0.0;
            let mut dot = 0.0;
            for (l, o) in params.iter().zip(obs) {
                lse += (l - hi).exp();
                dot += o * l;
            }
            dot - (hi + lse.ln())
        }
        LikelihoodFamily::GaussianUnitVariance => {
            let mut acc = 0.0;
            for (m, o) in params.iter().zip(obs) {
                let d = o - m;
                acc += -0.5 * d * d;
            }
            acc - 0.5 * params.len() as f64 * LN_2PI
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal_vec, RngHub, StreamKind};
    use crate::tape::{grad_check, Tape};
    use rand::Rng;

    fn tape_gaussian<'t>(
        tape: &'t Tape<f64>,
        mean: &Tensor<f64>,
        logvar: &Tensor<f64>,
    ) -> DiagGaussian<'t, f64> {
        DiagGaussian::new(tape.leaf(mean), tape.leaf(logvar)).unwrap()
    }

    #[test]
    fn rsample_passes_standard_normal_through() {
        let tape = Tape::new();
        let q = tape_gaussian(&tape, &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3]));
        let eps = Tensor::new(&[1, 3], vec![0.3, -1.2, 0.7]).unwrap();
        let z = q.rsample(&eps).unwrap().value();
        assert_eq!(z.data(), eps.data());
    }

    #[test]
    fn rsample_scales_by_std() {
        let tape = Tape::new();
        let mean = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let logvar = Tensor::new(&[1, 2], vec![0.0, 4f64.ln()]).unwrap();
        let q = tape_gaussian(&tape, &mean, &logvar);
        let eps = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let z = q.rsample(&eps).unwrap().value();
        assert!((z.data()[0] - 2.0).abs() < 1e-12);
        assert!((z.data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rsample_moments_match_parameters() {
        let hub = RngHub::new(5);
        let mut rng = hub.stream(StreamKind::Noise, 0);
        let (mu, lv) = (0.7, (0.8f64).ln());
        let n = 100_000;
        let tape = Tape::new();
        let q = tape_gaussian(
            &tape,
            &Tensor::filled(&[1, n], mu),
            &Tensor::filled(&[1, n], lv),
        );
        let eps = Tensor::new(&[1, n], standard_normal_vec(&mut rng, n)).unwrap();
        let z = q.rsample(&eps).unwrap().value();
        let mean: f64 = z.data().iter().sum::<f64>() / n as f64;
        let var: f64 = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sigma2 = lv.exp();
        let se_mean = (sigma2 / n as f64).sqrt();
        let se_var = sigma2 * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - sigma2).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn rsample_gradients_match_finite_differences() {
        let hub = RngHub::new(6);
        let mut rng = hub.stream(StreamKind::Noise, 1);
        let eps = Tensor::new(&[2, 3], standard_normal_vec(&mut rng, 6)).unwrap();
        let logvar = Tensor::new(&[2, 3], standard_normal_vec(&mut rng, 6)).unwrap();
        let mean = Tensor::new(&[2, 3], standard_normal_vec(&mut rng, 6)).unwrap();

        // With eps held fixed, check the gradient w.r.t. the mean...
        let err = grad_check(
            |tape, m| {
                let q = DiagGaussian::new(m, tape.constant(&logvar)).unwrap();
                let z = q.rsample(&eps).unwrap();
                z.mul(z)?.sum_all()
            },
            &mean,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "mean grad rel err {err}");

        // ...and w.r.t. the log-variance.
        let err = grad_check(
            |tape, lv| {
                let q = DiagGaussian::new(tape.constant(&mean), lv).unwrap();
                let z = q.rsample(&eps).unwrap();
                z.mul(z)?.sum_all()
            },
            &logvar,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "logvar grad rel err {err}");
    }

    #[test]
    fn kl_to_standard_normal_closed_forms() {
        let tape = Tape::new();
        let q = tape_gaussian(&tape, &Tensor::zeros(&[1, 4]), &Tensor::zeros(&[1, 4]));
        assert_eq!(q.kl_to_standard_normal().unwrap().value().item(), 0.0);

        let q = tape_gaussian(&tape, &Tensor::filled(&[1, 1], 1.0), &Tensor::zeros(&[1, 1]));
        let kl = q.kl_to_standard_normal().unwrap().value().item();
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_between_closed_forms() {
        let tape = Tape::new();
        let q1 = tape_gaussian(&tape, &Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 1]));
        let q2 = tape_gaussian(&tape, &Tensor::filled(&[1, 1], 1.0), &Tensor::zeros(&[1, 1]));
        let kl = q1.kl_between(&q2).unwrap().value().item();
        assert!((kl - 0.5).abs() < 1e-12);

        let same = tape_gaussian(
            &tape,
            &Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap(),
            &Tensor::new(&[1, 2], vec![0.1, -0.4]).unwrap(),
        );
        assert!(same.kl_between(&same).unwrap().value().item().abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative_on_random_inputs() {
        let hub = RngHub::new(7);
        let mut rng = hub.stream(StreamKind::Noise, 2);
        for _ in 0..1000 {
            let d = rng.gen_range(1..5);
            let mk = |rng: &mut _| Tensor::new(&[1, d], standard_normal_vec(rng, d)).unwrap();
            let tape = Tape::new();
            let q1 = tape_gaussian(&tape, &mk(&mut rng), &mk(&mut rng));
            let q2 = tape_gaussian(&tape, &mk(&mut rng), &mk(&mut rng));
            assert!(q1.kl_to_standard_normal().unwrap().value().item() >= 0.0);
            assert!(q1.kl_between(&q2).unwrap().value().item() >= 0.0);
        }
    }

    // Monte Carlo oracle: KL(q || p) = E_q[log q(z) - log p(z)], densities
    // written out directly in probability space.
    #[test]
    fn kl_formulas_match_monte_carlo() {
        let hub = RngHub::new(8);
        let mut rng = hub.stream(StreamKind::Noise, 3);
        let n = 100_000;
        for trial in 0..3 {
            let d = 2;
            let mean1 = standard_normal_vec(&mut rng, d);
            let lv1: Vec<f64> = standard_normal_vec(&mut rng, d)
                .into_iter()
                .map(|v| v * 0.5)
                .collect();
            let mean2 = standard_normal_vec(&mut rng, d);
            let lv2: Vec<f64> = standard_normal_vec(&mut rng, d)
                .into_iter()
                .map(|v| v * 0.5)
                .collect();

            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let eps = standard_normal_vec(&mut rng, d);
                let z: Vec<f64> = (0..d)
                    .map(|i| mean1[i] + (0.5 * lv1[i]).exp() * eps[i])
                    .collect();
                samples.push(log_normal_diag(&z, &mean1, &lv1) - log_normal_diag(&z, &mean2, &lv2));
            }
            let mc: f64 = samples.iter().sum::<f64>() / n as f64;
            let sd = (samples.iter().map(|v| (v - mc) * (v - mc)).sum::<f64>()
                / (n as f64 - 1.0))
                .sqrt();
            let se = sd / (n as f64).sqrt();

            let tape = Tape::new();
            let q1 = tape_gaussian(
                &tape,
                &Tensor::new(&[1, d], mean1.clone()).unwrap(),
                &Tensor::new(&[1, d], lv1.clone()).unwrap(),
            );
            let q2 = tape_gaussian(
                &tape,
                &Tensor::new(&[1, d], mean2.clone()).unwrap(),
                &Tensor::new(&[1, d], lv2.clone()).unwrap(),
            );
            let analytic = q1.kl_between(&q2).unwrap().value().item();
            assert!(
                (analytic - mc).abs() < 3.0 * se,
                "trial {trial}: analytic {analytic} vs mc {mc} +- {se}"
            );
        }
    }

    #[test]
    fn bernoulli_uniform_logits_give_d_log_half() {
        let tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[1, 7]));
        let obs = Tensor::new(&[1, 7], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let ll = log_likelihood(LikelihoodFamily::BernoulliLogits, logits, &obs)
            .unwrap()
            .value()
            .item();
        assert!((ll - 7.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn categorical_uniform_logits_give_log_inverse_classes() {
        let tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[1, 10]));
        let mut onehot = vec![0.0; 10];
        onehot[4] = 1.0;
        let obs = Tensor::new(&[1, 10], onehot).unwrap();
        let ll = log_likelihood(LikelihoodFamily::CategoricalLogits, logits, &obs)
            .unwrap()
            .value()
            .item();
        assert!((ll - (0.1f64).ln()).abs() < 1e-12);
    }

    // Direct probability-space oracle for random logits.
    #[test]
    fn log_likelihood_matches_probability_space_oracle() {
        let hub = RngHub::new(9);
        let mut rng = hub.stream(StreamKind::Noise, 4);
        for _ in 0..50 {
            let d = rng.gen_range(2..8);
            let logits: Vec<f64> = (0..d).map(|_| rng.gen_range(-4.0..4.0)).collect();

            // Bernoulli.
            let obs: Vec<f64> = (0..d).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let direct: f64 = logits
                .iter()
                .zip(&obs)
                .map(|(&l, &o)| {
                    let p = 1.0 / (1.0 + (-l).exp());
                    if o == 1.0 { p.ln() } else { (1.0 - p).ln() }
                })
                .sum();
            let tape = Tape::new();
            let lv = tape.constant(&Tensor::new(&[1, d], logits.clone()).unwrap());
            let ll = log_likelihood(
                LikelihoodFamily::BernoulliLogits,
                lv,
                &Tensor::new(&[1, d], obs.clone()).unwrap(),
            )
            .unwrap()
            .value()
            .item();
            assert!((ll - direct).abs() < 1e-10, "bernoulli {ll} vs {direct}");
            assert!((log_likelihood_slice(LikelihoodFamily::BernoulliLogits, &logits, &obs)
                - direct)
                .abs()
                < 1e-10);

            // Categorical.
            let class = rng.gen_range(0..d);
            let mut onehot = vec![0.0; d];
            onehot[class] = 1.0;
            let norm: f64 = logits.iter().map(|l| l.exp()).sum();
            let direct = (logits[class].exp() / norm).ln();
            let tape = Tape::new();
            let lv = tape.constant(&Tensor::new(&[1, d], logits.clone()).unwrap());
            let ll = log_likelihood(
                LikelihoodFamily::CategoricalLogits,
                lv,
                &Tensor::new(&[1, d], onehot.clone()).unwrap(),
            )
            .unwrap()
            .value()
            .item();
            assert!((ll - direct).abs() < 1e-10, "categorical {ll} vs {direct}");
            assert!(
                (log_likelihood_slice(LikelihoodFamily::CategoricalLogits, &logits, &onehot)
                    - direct)
                    .abs()
                    < 1e-10
            );
        }
    }

    #[test]
    fn categorical_probabilities_sum_to_one_over_all_observations() {
        let hub = RngHub::new(10);
        let mut rng = hub.stream(StreamKind::Noise, 5);
        let c = 10;
        let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut total = 0.0;
        for class in 0..c {
            let mut onehot = vec![0.0; c];
            onehot[class] = 1.0;
            total +=
                log_likelihood_slice(LikelihoodFamily::CategoricalLogits, &logits, &onehot).exp();
        }
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn out_of_support_observations_are_rejected() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(&Tensor::zeros(&[1, 3]));
        let bad = Tensor::new(&[1, 3], vec![0.5, 0.0, 1.0]).unwrap();
        assert!(matches!(
            log_likelihood(LikelihoodFamily::BernoulliLogits, logits, &bad),
            Err(DistError::OutOfSupport { family: "bernoulli", .. })
        ));

        let two_hot = Tensor::new(&[1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            log_likelihood(LikelihoodFamily::CategoricalLogits, logits, &two_hot),
            Err(DistError::OutOfSupport { family: "categorical", .. })
        ));
    }

    #[test]
    fn gaussian_unit_variance_log_density() {
        let tape = Tape::new();
        let means = tape.constant(&Tensor::zeros(&[1, 2]));
        let obs = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let ll = log_likelihood(LikelihoodFamily::GaussianUnitVariance, means, &obs)
            .unwrap()
            .value()
            .item();
        assert!((ll + LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn slice_kl_agrees_with_taped_kl() {
        let hub = RngHub::new(14);
        let mut rng = hub.stream(StreamKind::Noise, 6);
        for _ in 0..100 {
            let d = rng.gen_range(1..6);
            let m1 = standard_normal_vec(&mut rng, d);
            let lv1 = standard_normal_vec(&mut rng, d);
            let m2 = standard_normal_vec(&mut rng, d);
            let lv2 = standard_normal_vec(&mut rng, d);
            let tape = Tape::new();
            let q1 = tape_gaussian(
                &tape,
                &Tensor::new(&[1, d], m1.clone()).unwrap(),
                &Tensor::new(&[1, d], lv1.clone()).unwrap(),
            );
            let q2 = tape_gaussian(
                &tape,
                &Tensor::new(&[1, d], m2.clone()).unwrap(),
                &Tensor::new(&[1, d], lv2.clone()).unwrap(),
            );
            let taped = q1.kl_between(&q2).unwrap().value().item();
            let sliced = kl_diag_slices(&m1, &lv1, &m2, &lv2);
            assert!((taped - sliced).abs() < 1e-12);

            let taped = q1.kl_to_standard_normal().unwrap().value().item();
            let sliced = kl_standard_slices(&m1, &lv1);
            assert!((taped - sliced).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_are_clamped() {
        let params = LikelihoodParams {
            family: LikelihoodFamily::BernoulliLogits,
            params: Tensor::new(&[1, 2], vec![100.0, -100.0]).unwrap(),
        };
        let p = params.probabilities();
        assert_eq!(p.data()[0], 1.0 - PROB_CLAMP);
        assert_eq!(p.data()[1], PROB_CLAMP);
    }
}
