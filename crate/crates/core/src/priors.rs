//! Log-densities and score functions for the Gaussian likelihood, the
//! spike-and-slab prior and the baseline (L1, L2, polarization) priors.
//!
//! Gaussian densities use the usual negative exponent. `N(w; 0, 1/c^2)` has
//! standard deviation `1/c`, so `c` acts as a precision-like inverse scale
//! and the spike becomes a point mass at zero as `epsilon_spike -> inf`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{
    backprop, forward_pass, log_sum_exp, softmax_rows, DatasetBatch, NetworkParams, Targets,
};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Minimum spike-to-slab precision ratio.
pub const MIN_SPIKE_RATIO: f64 = 100.0;

/// Default spike-to-slab precision ratio.
pub const DEFAULT_SPIKE_RATIO: f64 = 1e4;

/// Learnable noise scales of one particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScalars {
    /// Inverse standard deviation of the prediction likelihood.
    pub d: f64,
    /// Slab precision-like scale.
    pub lambda: f64,
    /// Spike precision-like scale.
    pub epsilon_spike: f64,
}

impl NoiseScalars {
    /// `epsilon_spike = spike_ratio * lambda`.
    pub fn new(d: f64, lambda: f64, spike_ratio: f64) -> Result<Self> {
        NoiseScalars::with_epsilon(d, lambda, spike_ratio * lambda)
    }

    pub fn with_epsilon(d: f64, lambda: f64, epsilon_spike: f64) -> Result<Self> {
        let n = NoiseScalars {
            d,
            lambda,
            epsilon_spike,
        };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(Error::Domain(format!("d must be positive, got {}", self.d)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon_spike >= MIN_SPIKE_RATIO * self.lambda) || !self.epsilon_spike.is_finite()
        {
            return Err(Error::Domain(format!(
                "spike scale {} must be at least {MIN_SPIKE_RATIO} x lambda ({})",
                self.epsilon_spike, self.lambda
            )));
        }
        Ok(())
    }
}

fn ln_normal(w: f64, c: f64) -> f64 {
    c.ln() - HALF_LN_2PI - 0.5 * c * c * w * w
}

/// Value and gradients of the spike-and-slab log-prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTerms {
    pub value: f64,
    /// `d/dw_i`; equals `-curvature[i] * w_i`.
    pub d_theta: Vec<f64>,
    /// `r_i lambda^2 + (1 - r_i) epsilon^2`, with `r_i` the slab responsibility.
    pub curvature: Vec<f64>,
    /// Slab responsibilities.
    pub responsibility: Vec<f64>,
    /// `d/dg_i`.
    pub d_gates: Vec<f64>,
    /// `d/dlambda` with `epsilon_spike` held fixed.
    pub d_lambda: f64,
}

fn check_gate_values(gates: &[f64], m: usize) -> Result<()> {
    if gates.len() != m {
        return Err(Error::Shape(format!(
            "{} gates for {m} parameters",
            gates.len()
        )));
    }
    if let Some(i) = gates.iter().position(|g| !(0.0..=1.0).contains(g)) {
        return Err(Error::Domain(format!(
            "relaxed gate {i} = {} is outside [0, 1]",
            gates[i]
        )));
    }
    Ok(())
}

/// Spike-and-slab terms over a flat weight vector.
pub fn spike_slab_terms(
    weights: &[f64],
    gates: &[f64],
    noise: &NoiseScalars,
) -> Result<PriorTerms> {
    noise.validate()?;
    check_gate_values(gates, weights.len())?;
    let (lam, eps) = (noise.lambda, noise.epsilon_spike);
    let (lam2, eps2) = (lam * lam, eps * eps);
    let m = weights.len();
    let mut t = PriorTerms {
        value: 0.0,
        d_theta: Vec::with_capacity(m),
        curvature: Vec::with_capacity(m),
        responsibility: Vec::with_capacity(m),
        d_gates: Vec::with_capacity(m),
        d_lambda: 0.0,
    };
    for (i, (&w, &g)) in weights.iter().zip(gates).enumerate() {
        let ln_slab = ln_normal(w, lam);
        let ln_spike = ln_normal(w, eps);
        let a = g.ln() + ln_slab;
        let b = (-g).ln_1p() + ln_spike;
        let lse = log_sum_exp(&[a, b]);
        if !lse.is_finite() {
            return Err(Error::Numeric(format!(
                "spike-and-slab term {i} underflows on both branches"
            )));
        }
        let r = (a - lse).exp();
        let c = r * lam2 + (1.0 - r) * eps2;
        t.value += lse;
        t.d_theta.push(-c * w);
        t.curvature.push(c);
        t.responsibility.push(r);
        t.d_gates
            .push((ln_slab - lse).exp() - (ln_spike - lse).exp());
        t.d_lambda += r * (1.0 / lam - lam * w * w);
    }
    Ok(t)
}

/// Value and gradients of the expected gated log-prior.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedPriorTerms {
    pub value: f64,
    /// `d/dw_i = -theta_i lambda^2 w_i`.
    pub d_theta: Vec<f64>,
    /// `d/dtheta_i = ln N(w_i; 0, 1/lambda^2) - ln N(0; 0, 1/eps^2)`, always
    /// negative: dropping a weight into the spike always gains prior mass.
    pub d_probs: Vec<f64>,
    pub d_lambda: f64,
    /// `sum_i theta_i`.
    pub slab_mass: f64,
    /// `sum_i theta_i w_i^2`; the optimal `lambda^2` is `slab_mass / slab_sq`.
    pub slab_sq: f64,
}

/// Expected log-prior when gate `z_i ~ Bernoulli(theta_i)` selects the slab
/// and a gated-out weight enters the network as exactly zero, i.e. at the
/// centre of the spike:
/// `sum_i theta_i ln N(w_i; 0, 1/lambda^2) + (1 - theta_i) ln N(0; 0, 1/eps^2)`.
pub fn expected_spike_slab_terms(
    weights: &[f64],
    probs: &[f64],
    noise: &NoiseScalars,
) -> Result<GatedPriorTerms> {
    noise.validate()?;
    check_gate_values(probs, weights.len())?;
    let (lam, eps) = (noise.lambda, noise.epsilon_spike);
    let ln_spike = ln_normal(0.0, eps);
    let m = weights.len();
    let mut t = GatedPriorTerms {
        value: 0.0,
        d_theta: Vec::with_capacity(m),
        d_probs: Vec::with_capacity(m),
        d_lambda: 0.0,
        slab_mass: 0.0,
        slab_sq: 0.0,
    };
    for (&w, &p) in weights.iter().zip(probs) {
        let ln_slab = ln_normal(w, lam);
        t.value += p * ln_slab + (1.0 - p) * ln_spike;
        t.d_theta.push(-p * lam * lam * w);
        t.d_probs.push(ln_slab - ln_spike);
        t.d_lambda += p * (1.0 / lam - lam * w * w);
        t.slab_mass += p;
        t.slab_sq += p * w * w;
    }
    Ok(t)
}

/// `sum_i ln[g_i N(w_i; 0, 1/lambda^2) + (1 - g_i) N(w_i; 0, 1/eps^2)]`.
pub fn log_spike_slab_prior(
    params: &NetworkParams,
    gates: &[f64],
    noise: &NoiseScalars,
) -> Result<f64> {
    Ok(spike_slab_terms(&params.flatten(), gates, noise)?.value)
}

/// Value and gradients of the Gaussian log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodTerms {
    pub value: f64,
    pub d_theta: Vec<f64>,
    pub d_gates: Vec<f64>,
    pub d_d: f64,
    /// Summed squared residual `S`.
    pub sq_residual: f64,
    /// Number of samples.
    pub count: usize,
}

/// Residuals `y - f` and the softmax/identity output used for them.
fn residuals(
    logits: &crate::tensor::Tensor,
    targets: &Targets,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    match targets {
        Targets::Classes { labels, .. } => {
            let c = logits.cols();
            let p = softmax_rows(logits);
            let mut r: Vec<f64> = p.iter().map(|v| -v).collect();
            for (row, &l) in r.chunks_exact_mut(c).zip(labels) {
                if l >= c {
                    return Err(Error::Index(format!("label {l} with only {c} outputs")));
                }
                row[l] += 1.0;
            }
            Ok((r, Some(p)))
        }
        Targets::Values(y) => {
            if logits.cols() != 1 {
                return Err(Error::Shape(
                    "regression likelihood needs a single network output".into(),
                ));
            }
            Ok((
                y.iter().zip(logits.values()).map(|(y, f)| y - f).collect(),
                None,
            ))
        }
    }
}

/// Gaussian log-likelihood and its exact gradients.
///
/// For class targets the residual is one-hot minus softmax output, summed
/// over classes.
pub fn likelihood_terms(
    params: &NetworkParams,
    gates: &[f64],
    noise: &NoiseScalars,
    batch: &DatasetBatch,
) -> Result<LikelihoodTerms> {
    if !(noise.d > 0.0) {
        return Err(Error::Domain(format!(
            "d must be positive, got {}",
            noise.d
        )));
    }
    let pass = forward_pass(params, Some(gates), batch.inputs())?;
    let (r, probs) = residuals(pass.logits(), batch.targets())?;
    let d = noise.d;
    let d2 = d * d;
    let n = batch.len();
    let s: f64 = r.iter().map(|v| v * v).sum();
    let value = n as f64 * (d.ln() - HALF_LN_2PI) - 0.5 * d2 * s;
    let upstream: Vec<f64> = match probs {
        Some(p) => {
            let c = pass.logits().cols();
            let mut out = vec![0.0; r.len()];
            for ((o, rr), pp) in out
                .chunks_exact_mut(c)
                .zip(r.chunks_exact(c))
                .zip(p.chunks_exact(c))
            {
                let dot: f64 = rr.iter().zip(pp).map(|(a, b)| a * b).sum();
                for ((ok, rk), pk) in o.iter_mut().zip(rr).zip(pp) {
                    *ok = d2 * pk * (rk - dot);
                }
            }
            out
        }
        None => r.iter().map(|v| d2 * v).collect(),
    };
    let g = backprop(params, Some(gates), &pass, &upstream)?;
    Ok(LikelihoodTerms {
        value,
        d_theta: g.params,
        d_gates: g.gates,
        d_d: n as f64 / d - d * s,
        sq_residual: s,
        count: n,
    })
}

/// `sum_i [ln d - ln(2 pi)/2 - d^2 |y_i - f(x_i)|^2 / 2]`.
pub fn log_likelihood(
    params: &NetworkParams,
    gates: &[f64],
    noise: &NoiseScalars,
    batch: &DatasetBatch,
) -> Result<f64> {
    if !(noise.d > 0.0) {
        return Err(Error::Domain(format!(
            "d must be positive, got {}",
            noise.d
        )));
    }
    let logits = forward_pass(params, Some(gates), batch.inputs())?;
    let (r, _) = residuals(logits.logits(), batch.targets())?;
    let s: f64 = r.iter().map(|v| v * v).sum();
    let d = noise.d;
    Ok(batch.len() as f64 * (d.ln() - HALF_LN_2PI) - 0.5 * d * d * s)
}

/// Log-likelihood plus log spike-and-slab prior, with the evidence omitted.
/// `None` for the batch evaluates the prior alone.
pub fn log_posterior_unnorm(
    params: &NetworkParams,
    gates: &[f64],
    noise: &NoiseScalars,
    batch: Option<&DatasetBatch>,
) -> Result<f64> {
    let prior = log_spike_slab_prior(params, gates, noise)?;
    match batch {
        Some(b) => Ok(log_likelihood(params, gates, noise, b)? + prior),
        None => Ok(prior),
    }
}

/// Gradients of the unnormalized log-posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub value: f64,
    pub theta: Vec<f64>,
    pub gates: Vec<f64>,
    pub d: f64,
    pub lambda: f64,
}

/// Exact gradient of [`log_posterior_unnorm`] with respect to the weights,
/// the relaxed gates, `d` and `lambda` (`epsilon_spike` held fixed).
pub fn score(
    params: &NetworkParams,
    gates: &[f64],
    noise: &NoiseScalars,
    batch: Option<&DatasetBatch>,
) -> Result<Score> {
    let prior = spike_slab_terms(&params.flatten(), gates, noise)?;
    let mut s = Score {
        value: prior.value,
        theta: prior.d_theta,
        gates: prior.d_gates,
        d: 0.0,
        lambda: prior.d_lambda,
    };
    if let Some(b) = batch {
        let lik = likelihood_terms(params, gates, noise, b)?;
        s.value += lik.value;
        s.d = lik.d_d;
        s.theta
            .iter_mut()
            .zip(&lik.d_theta)
            .for_each(|(a, b)| *a += b);
        s.gates
            .iter_mut()
            .zip(&lik.d_gates)
            .for_each(|(a, b)| *a += b);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    LaplaceL1,
    GaussianL2,
    Polarization,
}

/// Hyperparameters of the baseline priors. Only the fields used by `kind`
/// are checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselinePriorConfig {
    pub kind: BaselineKind,
    /// Laplace scale.
    pub b: f64,
    /// Gaussian weight variance.
    pub alpha: f64,
    /// Data variance of the scalar observation model.
    pub delta: f64,
    /// Polarization Laplace scale.
    pub a: f64,
    /// Polarization trade-off, `t >= 1`.
    pub t: f64,
}

impl BaselinePriorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        match self.kind {
            BaselineKind::LaplaceL1 => positive("b", self.b),
            BaselineKind::GaussianL2 => positive("alpha", self.alpha),
            BaselineKind::Polarization => {
                positive("a", self.a)?;
                if !(self.t >= 1.0) || !self.t.is_finite() {
                    return Err(Error::Config(format!(
                        "t must be at least 1, got {}",
                        self.t
                    )));
                }
                Ok(())
            }
        }
    }
}

impl Default for BaselinePriorConfig {
    fn default() -> Self {
        BaselinePriorConfig {
            kind: BaselineKind::LaplaceL1,
            b: 1.0,
            alpha: 1.0,
            delta: 1.0,
            a: 1.0,
            t: 1.0,
        }
    }
}

/// Per-neuron scaling factors and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFactors {
    gamma: Vec<f64>,
    gamma_bar: f64,
}

impl ScalingFactors {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::Precondition("no scaling factors".into()));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("scaling factor".into()));
        }
        let gamma_bar = gamma.iter().sum::<f64>() / gamma.len() as f64;
        Ok(ScalingFactors { gamma, gamma_bar })
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn gamma_bar(&self) -> f64 {
        self.gamma_bar
    }
}

/// What a baseline prior is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum BaselineTarget<'a> {
    Weights(&'a [f64]),
    Factors(&'a ScalingFactors),
}

/// Baseline log-priors up to additive constants:
///
/// * `laplace_l1`: `-sum |w| / b` (drops `-M ln(2b)`)
/// * `gaussian_l2`: `-sum w^2 / (2 alpha)` (drops `-(M/2) ln(2 pi alpha)`)
/// * `polarization`: `-(t sum |gamma| - sum |gamma - mean|) / a` (no
///   normalizer exists; none is dropped)
pub fn log_baseline_prior(target: BaselineTarget<'_>, config: &BaselinePriorConfig) -> Result<f64> {
    config.validate()?;
    match (config.kind, target) {
        (BaselineKind::LaplaceL1, BaselineTarget::Weights(w)) => {
            Ok(-w.iter().map(|v| v.abs()).sum::<f64>() / config.b)
        }
        (BaselineKind::GaussianL2, BaselineTarget::Weights(w)) => {
            Ok(-w.iter().map(|v| v * v).sum::<f64>() / (2.0 * config.alpha))
        }
        (BaselineKind::Polarization, BaselineTarget::Factors(f)) => {
            let total: f64 = f.gamma.iter().map(|g| g.abs()).sum();
            let spread: f64 = f.gamma.iter().map(|g| (g - f.gamma_bar).abs()).sum();
            Ok(-(config.t * total - spread) / config.a)
        }
        (BaselineKind::Polarization, BaselineTarget::Weights(_)) => Err(Error::Config(
            "the polarization prior is evaluated on scaling factors".into(),
        )),
        (_, BaselineTarget::Factors(_)) => Err(Error::Config(
            "weight priors are evaluated on weights, not scaling factors".into(),
        )),
    }
}

/// Log-likelihood of the scalar observation model `y_i ~ N(w_j x_i, delta)`
/// with one factor per (sample, weight) pair.
pub fn scalar_model_log_likelihood(
    weights: &[f64],
    xs: &[f64],
    ys: &[f64],
    delta: f64,
) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "{} inputs for {} targets",
            xs.len(),
            ys.len()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::Domain(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let c = -0.5 * (2.0 * std::f64::consts::PI * delta).ln();
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        for w in weights {
            let r = y - w * x;
            total += c - r * r / (2.0 * delta);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{mlp_specs, Activation, LayerSpec};
    use crate::tensor::Tensor;

    fn single(w: f64) -> NetworkParams {
        NetworkParams::from_flat(&[LayerSpec::new(1, 1, Activation::Identity)], &[w, 0.0]).unwrap()
    }

    #[test]
    fn slab_and_spike_at_origin() {
        let n = NoiseScalars::new(1.0, 2.0, 1e4).unwrap();
        let t = spike_slab_terms(&[0.0], &[1.0], &n).unwrap();
        assert!((t.value - (2.0f64 / (2.0 * std::f64::consts::PI).sqrt()).ln()).abs() < 1e-14);
        let t = spike_slab_terms(&[0.0], &[0.0], &n).unwrap();
        assert!((t.value - (2e4f64 / (2.0 * std::f64::consts::PI).sqrt()).ln()).abs() < 1e-12);
        assert_eq!(t.d_theta[0], 0.0);
    }

    #[test]
    fn half_gate_unit_weight() {
        let n = NoiseScalars::new(1.0, 1.0, 1e4).unwrap();
        let t = spike_slab_terms(&[1.0], &[0.5], &n).unwrap();
        // ln(0.5) + ln N(1; 0, 1); the spike branch contributes exp(-5e7).
        let expected = 0.5f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5;
        assert!((t.value - expected).abs() < 1e-12);
        assert!((t.value - (-2.112_085_713_764_618)).abs() < 1e-12);
    }

    #[test]
    fn pure_slab_score_is_gaussian() {
        let n = NoiseScalars::new(1.0, 3.0, 1e4).unwrap();
        let w = [0.7, -0.2, 1e-6];
        let t = spike_slab_terms(&w, &[1.0; 3], &n).unwrap();
        for (g, w) in t.d_theta.iter().zip(w) {
            assert_eq!(*g, -9.0 * w);
        }
    }

    #[test]
    fn noise_invariants() {
        assert!(NoiseScalars::new(0.0, 1.0, 1e4).is_err());
        assert!(NoiseScalars::new(1.0, -1.0, 1e4).is_err());
        assert!(NoiseScalars::new(1.0, 1.0, 10.0).is_err());
    }

    #[test]
    fn zero_residual_likelihood() {
        let specs = [LayerSpec::new(1, 1, Activation::Identity)];
        let p = NetworkParams::from_flat(&specs, &[2.0, 0.0]).unwrap();
        let b = DatasetBatch::new(
            Tensor::from_rows(&[vec![1.5]]).unwrap(),
            Targets::Values(vec![3.0]),
        )
        .unwrap();
        let n = NoiseScalars::new(1.0, 1.0, 1e4).unwrap();
        let v = log_likelihood(&p, &[1.0, 1.0], &n, &b).unwrap();
        assert!((v + 0.918939).abs() < 1e-6);
        let bad = NoiseScalars { d: 0.0, ..n };
        assert!(matches!(
            log_likelihood(&p, &[1.0, 1.0], &bad, &b),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn prior_only_posterior() {
        let p = single(0.3);
        let n = NoiseScalars::new(1.0, 1.0, 1e4).unwrap();
        let g = [0.7, 0.4];
        assert_eq!(
            log_posterior_unnorm(&p, &g, &n, None).unwrap(),
            log_spike_slab_prior(&p, &g, &n).unwrap()
        );
    }

    #[test]
    fn likelihood_gradient_shapes() {
        let specs = mlp_specs(2, &[3], 2, Activation::Relu, Activation::SoftmaxOut);
        let p = NetworkParams::zeros(&specs).unwrap();
        let b =
            DatasetBatch::classification(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), vec![1], 2)
                .unwrap();
        let n = NoiseScalars::new(2.0, 1.0, 1e4).unwrap();
        let t = likelihood_terms(&p, &vec![1.0; p.len()], &n, &b).unwrap();
        assert_eq!(t.d_theta.len(), p.len());
        // Uniform softmax on 2 classes: residual (-0.5, 0.5), S = 0.5.
        assert!((t.sq_residual - 0.5).abs() < 1e-15);
        assert!((t.d_d - (1.0 / 2.0 - 2.0 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn baseline_examples() {
        let l1 = BaselinePriorConfig::default();
        assert_eq!(
            log_baseline_prior(BaselineTarget::Weights(&[0.0; 4]), &l1).unwrap(),
            0.0
        );
        let l2 = BaselinePriorConfig {
            kind: BaselineKind::GaussianL2,
            ..l1
        };
        assert_eq!(
            log_baseline_prior(BaselineTarget::Weights(&[3.0, -4.0]), &l2).unwrap(),
            -12.5
        );
        let pol = BaselinePriorConfig {
            kind: BaselineKind::Polarization,
            ..l1
        };
        let f = ScalingFactors::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(f.gamma_bar(), 1.0);
        assert_eq!(
            log_baseline_prior(BaselineTarget::Factors(&f), &pol).unwrap(),
            -2.0
        );
        assert!(log_baseline_prior(BaselineTarget::Weights(&[1.0]), &pol).is_err());
        let bad = BaselinePriorConfig { b: 0.0, ..l1 };
        assert!(matches!(
            log_baseline_prior(BaselineTarget::Weights(&[1.0]), &bad),
            Err(Error::Config(_))
        ));
    }
}
