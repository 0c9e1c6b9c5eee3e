//! Bernoulli inclusion gates and their binary-concrete (two-class
//! Gumbel-Softmax) relaxation.
//!
//! For a gate with inclusion probability `theta`, temperature `tau` and a
//! uniform draw `u`, the relaxed sample is
//!
//! ```text
//! g = sigmoid((ln theta - ln(1 - theta) + ln u - ln(1 - u)) / tau)
//! ```
//!
//! which is the two-way softmax over Gumbel-perturbed log-probabilities
//! written as a logistic. As `tau -> 0` it becomes a Bernoulli(theta) draw.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Gate probabilities are clamped to `[PROB_MIN, 1 - PROB_MIN]`.
pub const PROB_MIN: f64 = 1e-4;

/// Logit bound matching [`PROB_MIN`].
pub fn logit_bound() -> f64 {
    ((1.0 - PROB_MIN) / PROB_MIN).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Exponential temperature annealing from `tau_start` to `tau_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: u64,
}

impl TemperatureSchedule {
    pub fn new(tau_start: f64, tau_end: f64, total_steps: u64) -> Result<Self> {
        let s = TemperatureSchedule {
            tau_start,
            tau_end,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_start > 0.0 && self.tau_end > 0.0 && self.tau_end < self.tau_start) {
            return Err(Error::Config(format!(
                "temperature schedule needs 0 < tau_end < tau_start, got {} -> {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config(
                "temperature schedule needs total_steps >= 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            tau_start: 5.0,
            tau_end: 0.1,
            total_steps: 1000,
        }
    }
}

/// `tau_start * (tau_end / tau_start)^(step / total_steps)`; steps past the
/// end are clamped.
pub fn temperature(step: u64, schedule: &TemperatureSchedule) -> f64 {
    let step = if step > schedule.total_steps {
        log::warn!(
            "temperature step {step} beyond schedule length {}; clamping",
            schedule.total_steps
        );
        schedule.total_steps
    } else {
        step
    };
    if step == 0 {
        return schedule.tau_start;
    }
    if step == schedule.total_steps {
        return schedule.tau_end;
    }
    let frac = step as f64 / schedule.total_steps as f64;
    schedule.tau_start * (schedule.tau_end / schedule.tau_start).powf(frac)
}

/// A relaxed gate draw together with its reparameterisation derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxedGate {
    pub value: f64,
    /// The uniform draw, retained so the sample can be recomputed.
    pub uniform: f64,
    pub d_theta: f64,
    pub d_logit: f64,
    pub d_tau: f64,
}

/// Logistic noise `ln u - ln(1 - u)`.
pub fn logistic_noise(u: f64) -> f64 {
    u.ln() - (-u).ln_1p()
}

fn relaxed_from_logit(gate_logit: f64, tau: f64, u: f64) -> RelaxedGate {
    let s = gate_logit + logistic_noise(u);
    let g = sigmoid(s / tau);
    let slope = g * (1.0 - g);
    let theta = sigmoid(gate_logit);
    RelaxedGate {
        value: g,
        uniform: u,
        d_theta: slope / (tau * theta * (1.0 - theta)),
        d_logit: slope / tau,
        d_tau: -slope * s / (tau * tau),
    }
}

/// Deterministic relaxed gate for a given uniform draw.
pub fn relaxed_gate_from_uniform(theta: f64, tau: f64, u: f64) -> Result<RelaxedGate> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Domain(format!(
            "gate probability {theta} is not in (0, 1)"
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("uniform draw {u} is not in (0, 1)")));
    }
    Ok(relaxed_from_logit(logit(theta), tau, u))
}

pub fn sample_relaxed_gate(theta: f64, tau: f64, rng: &mut RngState) -> Result<RelaxedGate> {
    let u = rng.uniform_open();
    relaxed_gate_from_uniform(theta, tau, u)
}

/// `1` if `g >= 0.5`, else `0`. Ties keep the gate.
pub fn harden(g: f64) -> u8 {
    u8::from(g >= 0.5)
}

/// Per-parameter gate state: unconstrained logits of the inclusion
/// probabilities plus the current relaxed draws.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    logits: Vec<f64>,
    relaxed: Vec<f64>,
    d_logit: Vec<f64>,
}

impl GateSet {
    /// All gates at probability `init_prob`; relaxed draws start at that
    /// probability until the first refresh.
    pub fn new(count: usize, init_prob: f64) -> Result<Self> {
        if !(init_prob > 0.0 && init_prob < 1.0) {
            return Err(Error::Domain(format!(
                "initial gate probability {init_prob} is not in (0, 1)"
            )));
        }
        let l = logit(init_prob.clamp(PROB_MIN, 1.0 - PROB_MIN));
        Ok(GateSet {
            logits: vec![l; count],
            relaxed: vec![sigmoid(l); count],
            d_logit: vec![0.0; count],
        })
    }

    /// Builds a gate set from logits, clamping them to the allowed range.
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.iter().any(|l| l.is_nan()) {
            return Err(Error::Numeric("gate logit".into()));
        }
        let bound = logit_bound();
        let logits: Vec<f64> = logits.into_iter().map(|l| l.clamp(-bound, bound)).collect();
        let relaxed = logits.iter().map(|&l| sigmoid(l)).collect();
        let n = logits.len();
        Ok(GateSet {
            logits,
            relaxed,
            d_logit: vec![0.0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn mean_prob(&self) -> f64 {
        if self.logits.is_empty() {
            return 0.0;
        }
        self.logits.iter().map(|&l| sigmoid(l)).sum::<f64>() / self.logits.len() as f64
    }

    /// Current relaxed draws.
    pub fn relaxed(&self) -> &[f64] {
        &self.relaxed
    }

    /// `d g / d logit` for each current relaxed draw.
    pub fn relaxed_logit_slopes(&self) -> &[f64] {
        &self.d_logit
    }

    /// Redraws every relaxed gate at temperature `tau`, one uniform per gate
    /// in parameter order.
    pub fn refresh(&mut self, tau: f64, rng: &mut RngState) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("temperature {tau} must be positive")));
        }
        for ((l, g), d) in self
            .logits
            .iter()
            .zip(self.relaxed.iter_mut())
            .zip(self.d_logit.iter_mut())
        {
            let r = relaxed_from_logit(*l, tau, rng.uniform_open());
            *g = r.value;
            *d = r.d_logit;
        }
        Ok(())
    }

    /// Overrides the relaxed draws (slopes set to zero).
    pub fn set_relaxed(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} relaxed gates for {} logits",
                values.len(),
                self.len()
            )));
        }
        if values.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::Domain("relaxed gate outside [0, 1]".into()));
        }
        self.relaxed = values;
        self.d_logit.iter_mut().for_each(|d| *d = 0.0);
        Ok(())
    }

    /// Descends the logits along `grads` with step `lr`, then clamps.
    pub fn descend(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        if grads.len() != self.len() {
            return Err(Error::Shape("gate gradient length".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("gate gradient".into()));
        }
        let bound = logit_bound();
        for (l, g) in self.logits.iter_mut().zip(grads) {
            *l = (*l - lr * g).clamp(-bound, bound);
        }
        Ok(())
    }

    /// Hardened inclusion decisions from the probabilities.
    pub fn hardened(&self) -> Vec<f64> {
        self.logits
            .iter()
            .map(|&l| f64::from(harden(sigmoid(l))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = TemperatureSchedule::new(5.0, 0.1, 100).unwrap();
        assert_eq!(temperature(0, &s), 5.0);
        assert_eq!(temperature(100, &s), 0.1);
        assert!((temperature(50, &s) - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(temperature(1000, &s), 0.1);
        let mut prev = f64::INFINITY;
        for step in 0..=100 {
            let t = temperature(step, &s);
            assert!(t < prev);
            prev = t;
        }
    }

    #[test]
    fn schedule_rejects_increasing() {
        assert!(TemperatureSchedule::new(0.1, 5.0, 10).is_err());
        assert!(TemperatureSchedule::new(5.0, 0.1, 0).is_err());
    }

    #[test]
    fn symmetric_median_draw() {
        for tau in [0.01, 0.5, 1.0, 7.0] {
            let g = relaxed_gate_from_uniform(0.5, tau, 0.5).unwrap();
            assert!((g.value - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_temperature_limit() {
        // ln(0.7/0.3) + L(0.4) > 0 -> 1; ln(0.2/0.8) + L(0.6) < 0 -> 0.
        let hi = relaxed_gate_from_uniform(0.7, 1e-4, 0.4).unwrap();
        let lo = relaxed_gate_from_uniform(0.2, 1e-4, 0.6).unwrap();
        assert!(hi.value > 1.0 - 1e-12);
        assert!(lo.value < 1e-12);
    }

    #[test]
    fn rejects_bad_domain() {
        assert!(relaxed_gate_from_uniform(0.0, 1.0, 0.5).is_err());
        assert!(relaxed_gate_from_uniform(1.0, 1.0, 0.5).is_err());
        assert!(relaxed_gate_from_uniform(0.5, 0.0, 0.5).is_err());
    }

    #[test]
    fn theta_derivative_matches_finite_difference() {
        for &(theta, tau, u) in &[(0.3, 0.7, 0.2), (0.9, 2.0, 0.8), (0.55, 0.25, 0.45)] {
            let g = relaxed_gate_from_uniform(theta, tau, u).unwrap();
            let h = 1e-6;
            let up = relaxed_gate_from_uniform(theta + h, tau, u).unwrap().value;
            let dn = relaxed_gate_from_uniform(theta - h, tau, u).unwrap().value;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g.d_theta).abs() < 1e-6 * g.d_theta.abs().max(1.0));
            let up = relaxed_gate_from_uniform(theta, tau + h, u).unwrap().value;
            let dn = relaxed_gate_from_uniform(theta, tau - h, u).unwrap().value;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g.d_tau).abs() < 1e-6 * g.d_tau.abs().max(1.0));
        }
    }

    #[test]
    fn harden_tie_break() {
        assert_eq!(harden(0.49), 0);
        assert_eq!(harden(0.5), 1);
        assert_eq!(harden(1.0), 1);
    }

    #[test]
    fn gate_set_clamps_and_refreshes() {
        let mut gs = GateSet::from_logits(vec![100.0, -100.0, 0.0]).unwrap();
        let p = gs.probs();
        assert!((p[0] - (1.0 - PROB_MIN)).abs() < 1e-12);
        assert!((p[1] - PROB_MIN).abs() < 1e-12);
        let mut rng = RngState::new(3, 0);
        gs.refresh(0.5, &mut rng).unwrap();
        assert!(gs.relaxed().iter().all(|g| (0.0..=1.0).contains(g)));
        let mut again = GateSet::from_logits(vec![100.0, -100.0, 0.0]).unwrap();
        again.refresh(0.5, &mut RngState::new(3, 0)).unwrap();
        assert_eq!(gs, again);
    }
}
