//! Test-time log-likelihood estimation.
//!
//! Implements the importance-weighted single and multiple lower bounds, the
//! Monte Carlo estimator of `log p(w)`, and a trapezoid-rule quadrature
//! oracle that gives ground-truth log-likelihoods for latent dimensions 1
//! and 2 — small enough to check every bound claim numerically.
//!
//! Bound arithmetic always runs at 64 bits (log-weights are combined with
//! log-sum-exp only), so these functions take `ModelHandle<f64>`; widen a
//! 32-bit handle with `ModelHandle::cast` first. The quadrature range
//! `[-10, 10]` per dimension leaves prior mass below `1.6e-23` outside the
//! grid, far under the documented `1e-20` budget.

use std::fmt;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::data::BimodalDataset;
use crate::dist::{
    kl_diag_slices, kl_standard_slices, log_likelihood_slice, log_normal_diag,
    log_standard_normal, GaussianParams,
};
use crate::model::{Modality, ModelError, ModelHandle, Variant};
use crate::rng::{standard_normal_vec, RngHub};
use crate::tensor::Tensor;

/// Decode batches in chunks to bound activation memory on large grids.
const DECODE_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    MarginalX,
    ConditionalXGivenW,
    JointXw,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::MarginalX => "marginal-x",
            Target::ConditionalXGivenW => "conditional",
            Target::JointXw => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "marginal-x" => Some(Target::MarginalX),
            "conditional" | "conditional-x-given-w" => Some(Target::ConditionalXGivenW),
            "joint" | "joint-xw" => Some(Target::JointXw),
            _ => None,
        }
    }
}

/// Which encoder supplies the importance-sampling proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderPath {
    SingleX,
    SingleW,
    Multiple,
}

impl EncoderPath {
    pub fn name(self) -> &'static str {
        match self {
            EncoderPath::SingleX => "single-x",
            EncoderPath::SingleW => "single-w",
            EncoderPath::Multiple => "multiple",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single-x" => Some(EncoderPath::SingleX),
            "single-w" => Some(EncoderPath::SingleW),
            "multiple" => Some(EncoderPath::Multiple),
            _ => None,
        }
    }
}

/// Which test lower bound to estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSpec {
    pub target: Target,
    pub path: EncoderPath,
    /// Importance-sample count.
    pub k: usize,
    /// Prior-sample count for the `log p(w)` estimator.
    pub n_w: usize,
}

impl BoundSpec {
    fn salt(&self) -> u64 {
        let t = match self.target {
            Target::MarginalX => 1u64,
            Target::ConditionalXGivenW => 2,
            Target::JointXw => 3,
        };
        let p = match self.path {
            EncoderPath::SingleX => 1u64,
            EncoderPath::SingleW => 2,
            EncoderPath::Multiple => 3,
        };
        (self.k as u64)
            .wrapping_mul(0x100_0001)
            .wrapping_add(t << 32)
            .wrapping_add(p << 40)
            .wrapping_add((self.n_w as u64) << 8)
    }
}

#[derive(Debug)]
pub enum EvalError {
    Model(ModelError),
    BadSpec { detail: String },
    Unsupported { variant: Variant, detail: String },
    LatentTooLarge { latent: usize },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::BadSpec { detail } => write!(f, "bound spec: {detail}"),
            EvalError::Unsupported { variant, detail } => {
                write!(f, "{variant} cannot evaluate this bound: {detail}")
            }
            EvalError::LatentTooLarge { latent } => {
                write!(f, "quadrature oracle supports latent dim 1 or 2, model has {latent}")
            }
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

/// Per-datum bound values for one (target, path, k) setting.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub target: Target,
    pub path: EncoderPath,
    pub k: usize,
    pub values: Vec<f64>,
    pub seconds: f64,
}

impl BoundReport {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn std_err(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean();
        let var = self
            .values
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n as f64 - 1.0);
        (var / n as f64).sqrt()
    }

    /// CSV with header `index,bound,k,target,path`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,bound,k,target,path\n");
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!(
                "{i},{v},{},{},{}\n",
                self.k,
                self.target.name(),
                self.path.name()
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Sampling and decoding helpers
// ---------------------------------------------------------------------------

fn sample_posterior(q: &GaussianParams<f64>, k: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let d = q.mean.numel();
    let mean = q.mean.data();
    let logvar = q.logvar.data();
    let eps = standard_normal_vec(rng, k * d);
    let mut z = Vec::with_capacity(k * d);
    for i in 0..k {
        for j in 0..d {
            z.push(mean[j] + (0.5 * logvar[j]).exp() * eps[i * d + j]);
        }
    }
    Tensor::new(&[k, d], z).expect("sized buffer")
}

fn sample_prior(latent: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(&[k, latent], standard_normal_vec(rng, k * latent)).expect("sized buffer")
}

fn tile_row(row: &[f64], k: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(k * row.len());
    for _ in 0..k {
        data.extend_from_slice(row);
    }
    Tensor::new(&[k, row.len()], data).expect("sized buffer")
}

/// Decoder pass over a batch of latents, chunked. `cond_w` routes through the
/// CVAE conditional decoder.
fn decode_rows(
    handle: &ModelHandle<f64>,
    z: &Tensor<f64>,
    modality: Modality,
    cond_w: Option<&[f64]>,
) -> Result<Tensor<f64>, EvalError> {
    let k = z.shape()[0];
    let mut rows: Vec<f64> = Vec::new();
    let mut cols = 0;
    let mut start = 0;
    while start < k {
        let end = (start + DECODE_CHUNK).min(k);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = z.gather_rows(&idx);
        let params = match cond_w {
            Some(w) => handle.generate_x_given_w(&chunk, &tile_row(w, end - start))?,
            None => handle.generate(&chunk, modality)?,
        };
        cols = params.params.shape()[1];
        rows.extend_from_slice(params.params.data());
        start = end;
    }
    Ok(Tensor::new(&[k, cols], rows).expect("sized buffer"))
}

fn loglik_rows(
    family: crate::dist::LikelihoodFamily,
    params: &Tensor<f64>,
    obs: &[f64],
) -> Vec<f64> {
    (0..params.shape()[0])
        .map(|i| log_likelihood_slice(family, params.row(i), obs))
        .collect()
}

fn logsumexp(values: &[f64]) -> f64 {
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + values.iter().map(|v| (v - hi).exp()).sum::<f64>().ln()
}

fn proposal_for(
    handle: &ModelHandle<f64>,
    path: EncoderPath,
    x: Option<&Tensor<f64>>,
    w: Option<&Tensor<f64>>,
) -> Result<GaussianParams<f64>, EvalError> {
    let (q, _) = match path {
        EncoderPath::Multiple => handle.encode(x, w)?,
        EncoderPath::SingleX => handle.encode(x, None)?,
        EncoderPath::SingleW => handle.encode(None, w)?,
    };
    Ok(q)
}

// ---------------------------------------------------------------------------
// Importance-weighted bounds
// ---------------------------------------------------------------------------

/// `k`-fold importance-weighted lower bound for one datum:
/// `log( (1/k) * sum_i w_i )` via log-sum-exp of per-sample log-weights.
///
/// Log-weights by target: `marginal-x` uses `log p(x|z) + log p(z) - log q(z)`;
/// `joint-xw` adds `log p(w|z)`; the conditional target uses the joint
/// numerator and subtracts the Monte Carlo `log p(w)` (estimated with `n_w`
/// prior samples through the same decoder). On a CVAE the conditional bound
/// uses `log p(x|z,w) + log p(z) - log q(z|x,w)` directly.
pub fn iw_bound(
    handle: &ModelHandle<f64>,
    spec: &BoundSpec,
    x: &[f64],
    w: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<f64, EvalError> {
    if spec.k == 0 {
        return Err(EvalError::BadSpec {
            detail: "importance-sample count k must be at least 1".into(),
        });
    }
    let variant = handle.variant();
    let needs_w = spec.target != Target::MarginalX || spec.path != EncoderPath::SingleX;
    if needs_w && w.is_none() {
        return Err(EvalError::BadSpec {
            detail: format!(
                "target {} with path {} requires the w modality",
                spec.target.name(),
                spec.path.name()
            ),
        });
    }
    if variant == Variant::Cvae
        && !(spec.target == Target::ConditionalXGivenW && spec.path == EncoderPath::Multiple)
    {
        return Err(EvalError::Unsupported {
            variant,
            detail: "cvae supports only the conditional target with the multiple path".into(),
        });
    }
    if variant == Variant::Vae && spec.path != EncoderPath::SingleX {
        return Err(EvalError::Unsupported {
            variant,
            detail: "vae has only q(z|x)".into(),
        });
    }
    if variant == Variant::Vae && spec.target != Target::MarginalX {
        return Err(EvalError::Unsupported {
            variant,
            detail: "vae has no w decoder".into(),
        });
    }

    let x_t = Tensor::new(&[1, x.len()], x.to_vec()).expect("sized buffer");
    let w_t = w.map(|w| Tensor::new(&[1, w.len()], w.to_vec()).expect("sized buffer"));

    let q = proposal_for(handle, spec.path, Some(&x_t), w_t.as_ref())?;
    let z = sample_posterior(&q, spec.k, rng);

    let x_family = handle.config().x_spec.family;
    let w_family = handle.config().w_spec.family;

    let x_params = if variant == Variant::Cvae {
        decode_rows(handle, &z, Modality::X, Some(w.expect("checked above")))?
    } else {
        decode_rows(handle, &z, Modality::X, None)?
    };
    let ll_x = loglik_rows(x_family, &x_params, x);

    let need_pw = variant != Variant::Cvae && spec.target != Target::MarginalX;
    let ll_w: Option<Vec<f64>> = if need_pw {
        let w_params = decode_rows(handle, &z, Modality::W, None)?;
        Some(loglik_rows(w_family, &w_params, w.expect("checked above")))
    } else {
        None
    };

    let mean = q.mean.data();
    let logvar = q.logvar.data();
    let mut log_weights = Vec::with_capacity(spec.k);
    for i in 0..spec.k {
        let zi = z.row(i);
        let mut lw = ll_x[i] + log_standard_normal(zi) - log_normal_diag(zi, mean, logvar);
        if let Some(ll_w) = &ll_w {
            lw += ll_w[i];
        }
        log_weights.push(lw);
    }
    let mut bound = logsumexp(&log_weights) - (spec.k as f64).ln();

    if spec.target == Target::ConditionalXGivenW && variant != Variant::Cvae {
        bound -= log_p_w(handle, w.expect("checked above"), spec.n_w, rng)?;
    }
    Ok(bound)
}

/// Monte Carlo estimate of `log p(w) = log E_{p(z)}[p(w|z)]`, computed as
/// `logsumexp_i(log p(w|z_i)) - log n_w` over `n_w` prior samples.
pub fn log_p_w(
    handle: &ModelHandle<f64>,
    w: &[f64],
    n_w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, EvalError> {
    if n_w == 0 {
        return Err(EvalError::BadSpec {
            detail: "prior-sample count n_w must be at least 1".into(),
        });
    }
    let z = sample_prior(handle.latent_dim(), n_w, rng);
    let params = decode_rows(handle, &z, Modality::W, None)?;
    let ll = loglik_rows(handle.config().w_spec.family, &params, w);
    Ok(logsumexp(&ll) - (n_w as f64).ln())
}

/// Evaluate a bound over every record of a dataset. Each datum draws from a
/// content-keyed substream, so per-datum values do not depend on batch order.
pub fn evaluate_bounds(
    handle: &ModelHandle<f64>,
    spec: &BoundSpec,
    dataset: &BimodalDataset,
    seed: u64,
) -> Result<BoundReport, EvalError> {
    let started = Instant::now();
    let hub = RngHub::new(seed);
    let mut values = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let x = dataset.x.row(i);
        let w = dataset.w.row(i);
        let mut rng = hub.eval_stream_for(spec.salt(), &[x, w]);
        values.push(iw_bound(handle, spec, x, Some(w), &mut rng)?);
    }
    Ok(BoundReport {
        target: spec.target,
        path: spec.path,
        k: spec.k,
        values,
        seconds: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Quadrature oracle
// ---------------------------------------------------------------------------

/// Ground-truth quantities computable by quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadTarget {
    MarginalX,
    MarginalW,
    JointXw,
    ConditionalXGivenW,
    ConditionalWGivenX,
}

/// Trapezoid grid over the latent space.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureGrid {
    pub lo: f64,
    pub hi: f64,
    /// Points for a 1-D latent.
    pub points_1d: usize,
    /// Points per dimension for a 2-D latent.
    pub points_2d: usize,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        // Standard normal mass outside [-10, 10] is < 1.6e-23 per dimension.
        QuadratureGrid {
            lo: -10.0,
            hi: 10.0,
            points_1d: 20_001,
            points_2d: 801,
        }
    }
}

impl QuadratureGrid {
    fn axis(&self, points: usize) -> (Vec<f64>, Vec<f64>) {
        let h = (self.hi - self.lo) / (points - 1) as f64;
        let zs: Vec<f64> = (0..points).map(|j| self.lo + h * j as f64).collect();
        let lw: Vec<f64> = (0..points)
            .map(|j| {
                if j == 0 || j == points - 1 {
                    (h / 2.0).ln()
                } else {
                    h.ln()
                }
            })
            .collect();
        (zs, lw)
    }

    /// Grid points `[n, latent]` and per-point log trapezoid weights.
    fn build(&self, latent: usize) -> Result<(Tensor<f64>, Vec<f64>), EvalError> {
        match latent {
            1 => {
                let (zs, lw) = self.axis(self.points_1d);
                Ok((
                    Tensor::new(&[zs.len(), 1], zs).expect("sized buffer"),
                    lw,
                ))
            }
            2 => {
                let (zs, lw) = self.axis(self.points_2d);
                let n = zs.len();
                let mut points = Vec::with_capacity(n * n * 2);
                let mut weights = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        points.push(zs[i]);
                        points.push(zs[j]);
                        weights.push(lw[i] + lw[j]);
                    }
                }
                Ok((
                    Tensor::new(&[n * n, 2], points).expect("sized buffer"),
                    weights,
                ))
            }
            latent => Err(EvalError::LatentTooLarge { latent }),
        }
    }
}

/// Ground-truth log-likelihood by trapezoid quadrature over the latent space,
/// valid for latent dimension 1 or 2. Conditional targets are computed as
/// differences of joint and marginal quadratures.
pub fn quadrature_log_prob(
    handle: &ModelHandle<f64>,
    target: QuadTarget,
    x: Option<&[f64]>,
    w: Option<&[f64]>,
    grid: &QuadratureGrid,
) -> Result<f64, EvalError> {
    let variant = handle.variant();
    match target {
        QuadTarget::ConditionalXGivenW => {
            if variant == Variant::Cvae {
                // CVAE models p(x|w) directly: integrate p(x|z,w) p(z) dz.
                return integrate(handle, grid, x, w, true, false, true);
            }
            let joint = quadrature_log_prob(handle, QuadTarget::JointXw, x, w, grid)?;
            let marg_w = quadrature_log_prob(handle, QuadTarget::MarginalW, None, w, grid)?;
            Ok(joint - marg_w)
        }
        QuadTarget::ConditionalWGivenX => {
            let joint = quadrature_log_prob(handle, QuadTarget::JointXw, x, w, grid)?;
            let marg_x = quadrature_log_prob(handle, QuadTarget::MarginalX, x, None, grid)?;
            Ok(joint - marg_x)
        }
        QuadTarget::MarginalX => integrate(handle, grid, x, None, true, false, false),
        QuadTarget::MarginalW => integrate(handle, grid, None, w, false, true, false),
        QuadTarget::JointXw => integrate(handle, grid, x, w, true, true, false),
    }
}

fn integrate(
    handle: &ModelHandle<f64>,
    grid: &QuadratureGrid,
    x: Option<&[f64]>,
    w: Option<&[f64]>,
    with_x: bool,
    with_w: bool,
    cvae_conditional: bool,
) -> Result<f64, EvalError> {
    let variant = handle.variant();
    if with_w && handle.variant() == Variant::Vae {
        return Err(EvalError::Unsupported {
            variant,
            detail: "vae has no w decoder".into(),
        });
    }
    if variant == Variant::Cvae && !cvae_conditional {
        return Err(EvalError::Unsupported {
            variant,
            detail: "cvae models only p(x|w)".into(),
        });
    }
    let (z, log_weights) = grid.build(handle.latent_dim())?;
    let n = z.shape()[0];

    let mut terms = vec![0.0f64; n];
    for (i, t) in terms.iter_mut().enumerate() {
        *t = log_weights[i] + log_standard_normal(z.row(i));
    }
    if with_x {
        let x = x.ok_or_else(|| EvalError::BadSpec {
            detail: "target needs the x modality".into(),
        })?;
        let params = if cvae_conditional {
            let w = w.ok_or_else(|| EvalError::BadSpec {
                detail: "cvae conditional needs the w modality".into(),
            })?;
            decode_rows(handle, &z, Modality::X, Some(w))?
        } else {
            decode_rows(handle, &z, Modality::X, None)?
        };
        let ll = loglik_rows(handle.config().x_spec.family, &params, x);
        for (t, l) in terms.iter_mut().zip(&ll) {
            *t += l;
        }
    }
    if with_w && !cvae_conditional {
        let w = w.ok_or_else(|| EvalError::BadSpec {
            detail: "target needs the w modality".into(),
        })?;
        let params = decode_rows(handle, &z, Modality::W, None)?;
        let ll = loglik_rows(handle.config().w_spec.family, &params, w);
        for (t, l) in terms.iter_mut().zip(&ll) {
            *t += l;
        }
    }
    Ok(logsumexp(&terms))
}

// ---------------------------------------------------------------------------
// Exact single-sample (k = 1) bounds and the alpha = 1 objective estimate
// ---------------------------------------------------------------------------

/// Exact value of the variant's k = 1 lower bound (the plain ELBO): analytic
/// prior KL plus the reconstruction expectation integrated by quadrature over
/// the posterior. Valid for 1-D latents; by Jensen's inequality the result
/// never exceeds the true log-likelihood of the matching target.
pub fn exact_elbo(
    handle: &ModelHandle<f64>,
    x: &[f64],
    w: Option<&[f64]>,
    grid: &QuadratureGrid,
) -> Result<f64, EvalError> {
    if handle.latent_dim() != 1 {
        return Err(EvalError::LatentTooLarge {
            latent: handle.latent_dim(),
        });
    }
    let variant = handle.variant();
    let x_t = Tensor::new(&[1, x.len()], x.to_vec()).expect("sized buffer");
    let w_t = w.map(|w| Tensor::new(&[1, w.len()], w.to_vec()).expect("sized buffer"));

    let (q, _) = match variant {
        Variant::Vae => handle.encode(Some(&x_t), None)?,
        _ => handle.encode(Some(&x_t), w_t.as_ref())?,
    };
    let (mu, lv) = (q.mean.data()[0], q.logvar.data()[0]);
    let sigma = (0.5 * lv).exp();

    // Integrate over the posterior on mu +- 10 sigma (same 1e-20 tail budget
    // as the prior grid).
    let points = grid.points_1d;
    let lo = mu - 10.0 * sigma;
    let h = 20.0 * sigma / (points - 1) as f64;
    let zs: Vec<f64> = (0..points).map(|j| lo + h * j as f64).collect();
    let z = Tensor::new(&[points, 1], zs.clone()).expect("sized buffer");

    let x_params = if variant == Variant::Cvae {
        decode_rows(handle, &z, Modality::X, Some(w.expect("cvae needs w")))?
    } else {
        decode_rows(handle, &z, Modality::X, None)?
    };
    let mut recon = loglik_rows(handle.config().x_spec.family, &x_params, x);
    if matches!(variant, Variant::JmvaeZero | Variant::JmvaeKl) {
        let w_params = decode_rows(handle, &z, Modality::W, None)?;
        let ll_w = loglik_rows(
            handle.config().w_spec.family,
            &w_params,
            w.expect("joint needs w"),
        );
        for (r, l) in recon.iter_mut().zip(&ll_w) {
            *r += l;
        }
    }

    // Plain trapezoid of q(z) * recon(z); the integrand decays like the
    // posterior density.
    let mut expect = 0.0;
    for (j, z) in zs.iter().enumerate() {
        let weight = if j == 0 || j == points - 1 { h / 2.0 } else { h };
        let d = (z - mu) / sigma;
        let q_density = (-0.5 * d * d).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        expect += weight * q_density * recon[j];
    }

    let kl = kl_standard_slices(q.mean.data(), q.logvar.data());
    Ok(expect - kl)
}

/// Monte Carlo estimate (mean, standard error) of the `alpha = 1` objective
/// for one pair: reconstruction terms estimated with `n_samples` posterior
/// draws, all three KL terms analytic.
pub fn jmkl_alpha1_bound_mc(
    handle: &ModelHandle<f64>,
    x: &[f64],
    w: &[f64],
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), EvalError> {
    if handle.variant() != Variant::JmvaeKl {
        return Err(EvalError::Unsupported {
            variant: handle.variant(),
            detail: "the alpha = 1 objective needs the single-modality encoders".into(),
        });
    }
    let x_t = Tensor::new(&[1, x.len()], x.to_vec()).expect("sized buffer");
    let w_t = Tensor::new(&[1, w.len()], w.to_vec()).expect("sized buffer");
    let (q, _) = handle.encode(Some(&x_t), Some(&w_t))?;
    let (qx, _) = handle.encode(Some(&x_t), None)?;
    let (qw, _) = handle.encode(None, Some(&w_t))?;

    let z = sample_posterior(&q, n_samples, rng);
    let x_params = decode_rows(handle, &z, Modality::X, None)?;
    let w_params = decode_rows(handle, &z, Modality::W, None)?;
    let ll_x = loglik_rows(handle.config().x_spec.family, &x_params, x);
    let ll_w = loglik_rows(handle.config().w_spec.family, &w_params, w);
    let recon: Vec<f64> = ll_x.iter().zip(&ll_w).map(|(a, b)| a + b).collect();

    let mean_recon = recon.iter().sum::<f64>() / n_samples as f64;
    let var = recon
        .iter()
        .map(|v| (v - mean_recon) * (v - mean_recon))
        .sum::<f64>()
        / (n_samples as f64 - 1.0);
    let se = (var / n_samples as f64).sqrt();

    let kl_prior = kl_standard_slices(q.mean.data(), q.logvar.data());
    let kl_x = kl_diag_slices(q.mean.data(), q.logvar.data(), qx.mean.data(), qx.logvar.data());
    let kl_w = kl_diag_slices(q.mean.data(), q.logvar.data(), qw.mean.data(), qw.logvar.data());

    Ok((mean_recon - kl_prior - kl_x - kl_w, se))
}

// ---------------------------------------------------------------------------
// Convergence report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub k: usize,
    pub single: f64,
    pub multiple: f64,
    pub gap: f64,
}

/// Single vs. multiple marginal-x bounds over a schedule of `k`, with a
/// common random source per `k`. The gap column shrinks as `k` grows.
pub fn bound_convergence_report(
    handle: &ModelHandle<f64>,
    x: &[f64],
    w: &[f64],
    ks: &[usize],
    seed: u64,
) -> Result<Vec<ConvergenceRow>, EvalError> {
    let hub = RngHub::new(seed);
    let mut rows = Vec::with_capacity(ks.len());
    for (i, &k) in ks.iter().enumerate() {
        let spec_single = BoundSpec {
            target: Target::MarginalX,
            path: EncoderPath::SingleX,
            k,
            n_w: 1,
        };
        let spec_multi = BoundSpec {
            target: Target::MarginalX,
            path: EncoderPath::Multiple,
            k,
            n_w: 1,
        };
        let mut rng = hub.stream(crate::rng::StreamKind::Eval, i as u64);
        let single = iw_bound(handle, &spec_single, x, Some(w), &mut rng.clone())?;
        let multiple = iw_bound(handle, &spec_multi, x, Some(w), &mut rng)?;
        rows.push(ConvergenceRow {
            k,
            single,
            multiple,
            gap: (single - multiple).abs(),
        });
    }
    Ok(rows)
}
