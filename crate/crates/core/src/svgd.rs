//! Kernelized Stein updates and the particle training loop.
//!
//! Each particle holds network weights, per-parameter gates and its noise
//! scales. Weights move along
//!
//! ```text
//! -(grad CE - beta * phi(theta_i))
//! phi(theta_i) = (1/n) sum_j [k(theta_j, theta_i) s_j + grad_{theta_j} k(theta_j, theta_i)]
//! ```
//!
//! where `s_j` is the score of the log-posterior divided by the training set
//! size, so the posterior term is per sample like the mean cross-entropy.
//! Gate logits, `d` and `lambda` descend the particle's own negative
//! log-posterior (plus the cross-entropy pathway for the gates); the kernel
//! acts on the weights only.
//!
//! Updates are synchronous: every particle's direction is computed from the
//! same pre-step ensemble, so results do not depend on evaluation order.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{temperature, GateSet, TemperatureSchedule};
use crate::net::{accuracy, backward, forward, DatasetBatch, LayerSpec, NetworkParams, TaskLoss};
use crate::priors::{
    expected_spike_slab_terms, likelihood_terms, NoiseScalars, DEFAULT_SPIKE_RATIO,
};
use crate::rng::{derive_seed, RngState};

/// `k = exp(-|a - b|^2 / h)` and `dk/da = -(2/h)(a - b) k`.
pub fn rbf_kernel(a: &[f64], b: &[f64], h: f64) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "kernel arguments have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::Domain(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    let d2 = sq_dist(a, b);
    let k = (-d2 / h).exp();
    let c = -2.0 * k / h;
    Ok((k, a.iter().zip(b).map(|(x, y)| c * (x - y)).collect()))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    Fixed,
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub bandwidth_mode: BandwidthMode,
    pub fixed_bandwidth: f64,
    pub heuristic_floor: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth_mode: BandwidthMode::MedianHeuristic,
            // exp(-|a - b|^2 / ln 2), the fixed two-model kernel.
            fixed_bandwidth: std::f64::consts::LN_2,
            heuristic_floor: 1e-8,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.heuristic_floor > 0.0) {
            return Err(Error::Config(
                "kernel heuristic_floor must be positive".into(),
            ));
        }
        if self.bandwidth_mode == BandwidthMode::Fixed && !(self.fixed_bandwidth > 0.0) {
            return Err(Error::Config(
                "kernel fixed_bandwidth must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Effective bandwidth for a set of points, never below the floor.
    pub fn bandwidth(&self, points: &[Vec<f64>]) -> Result<f64> {
        match self.bandwidth_mode {
            BandwidthMode::Fixed => Ok(self.fixed_bandwidth.max(self.heuristic_floor)),
            BandwidthMode::MedianHeuristic => median_bandwidth(points, self.heuristic_floor),
        }
    }
}

/// `med^2 / ln n` over pairwise Euclidean distances (mean of the two middle
/// values for an even count), floored at `floor`.
pub fn median_bandwidth(points: &[Vec<f64>], floor: f64) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Precondition(format!(
            "median bandwidth needs at least 2 particles, got {n}"
        )));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            if points[i].len() != points[j].len() {
                return Err(Error::Shape("particles differ in dimension".into()));
            }
            dists.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let med = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    let h = med * med / (n as f64).ln();
    if h < floor || !h.is_finite() {
        if med == 0.0 {
            log::warn!("all particles coincide; using the bandwidth floor {floor}");
        }
        return Ok(floor);
    }
    Ok(h)
}

/// Stein direction for particle `i`. Ascending it lowers KL(q || p).
pub fn ksd_direction(
    i: usize,
    points: &[Vec<f64>],
    scores: &[Vec<f64>],
    h: f64,
) -> Result<Vec<f64>> {
    let n = points.len();
    if i >= n {
        return Err(Error::Index(format!("particle {i} of {n}")));
    }
    if scores.len() != n {
        return Err(Error::Shape(format!(
            "{} scores for {n} particles",
            scores.len()
        )));
    }
    let dim = points[i].len();
    for (j, s) in scores.iter().enumerate() {
        if s.len() != dim || points[j].len() != dim {
            return Err(Error::Shape(format!(
                "particle {j} has the wrong dimension"
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("score of particle {j}")));
        }
    }
    let mut phi = vec![0.0; dim];
    for j in 0..n {
        // grad wrt theta_j of k(theta_j, theta_i)
        let (k, grad) = rbf_kernel(&points[j], &points[i], h)?;
        for ((p, s), g) in phi.iter_mut().zip(&scores[j]).zip(&grad) {
            *p += k * s + g;
        }
    }
    let inv = 1.0 / n as f64;
    phi.iter_mut().for_each(|p| *p *= inv);
    Ok(phi)
}

/// Stein directions for every particle.
pub fn ksd_directions(points: &[Vec<f64>], scores: &[Vec<f64>], h: f64) -> Result<Vec<Vec<f64>>> {
    (0..points.len())
        .into_par_iter()
        .map(|i| ksd_direction(i, points, scores, h))
        .collect()
}

/// One plain Stein variational step `x_i += step * phi(x_i)` for a target
/// given by its score function.
pub fn svgd_step<F>(
    points: &mut [Vec<f64>],
    score: F,
    step: f64,
    kernel: &KernelConfig,
) -> Result<()>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let h = kernel.bandwidth(points)?;
    let scores: Vec<Vec<f64>> = points.iter().map(|p| score(p)).collect();
    let phi = ksd_directions(points, &scores, h)?;
    for (p, f) in points.iter_mut().zip(phi) {
        p.iter_mut().zip(f).for_each(|(x, v)| *x += step * v);
    }
    Ok(())
}

/// One member of the variational ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub params: NetworkParams,
    pub gates: GateSet,
    pub noise: NoiseScalars,
}

/// `n >= 2` particles sharing one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    particles: Vec<Particle>,
}

impl ParticleEnsemble {
    pub fn new(particles: Vec<Particle>) -> Result<Self> {
        if particles.len() < 2 {
            return Err(Error::Precondition(format!(
                "an ensemble needs at least 2 particles, got {}",
                particles.len()
            )));
        }
        let specs = particles[0].params.specs();
        for (i, p) in particles.iter().enumerate() {
            if p.params.specs() != specs {
                return Err(Error::Shape(format!(
                    "particle {i} has a different topology"
                )));
            }
            if p.gates.len() != p.params.len() {
                return Err(Error::Shape(format!("particle {i} has misaligned gates")));
            }
            p.noise.validate()?;
        }
        Ok(ParticleEnsemble { particles })
    }

    /// He-initialized particles, each from its own derived seed.
    pub fn init(specs: &[LayerSpec], n: usize, config: &TrainConfig) -> Result<Self> {
        let particles = (0..n)
            .map(|i| {
                let mut rng = RngState::new(derive_seed(config.seed, i as u64), 0);
                let params = NetworkParams::init_he(specs, &mut rng)?;
                let gates = GateSet::new(params.len(), config.gate_init)?;
                let noise =
                    NoiseScalars::new(config.init_d, config.init_lambda, config.spike_ratio)?;
                Ok(Particle {
                    params,
                    gates,
                    noise,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ParticleEnsemble::new(particles)
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn particles_mut(&mut self) -> &mut [Particle] {
        &mut self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        self.particles[0].params.specs()
    }

    pub fn flattened(&self) -> Vec<Vec<f64>> {
        self.particles.iter().map(|p| p.params.flatten()).collect()
    }

    /// Mean over coordinates of the across-particle variance of the weights.
    pub fn dispersion(&self) -> f64 {
        let flats = self.flattened();
        let n = flats.len() as f64;
        let m = flats[0].len();
        let mut total = 0.0;
        for c in 0..m {
            let mean = flats.iter().map(|f| f[c]).sum::<f64>() / n;
            total += flats.iter().map(|f| (f[c] - mean).powi(2)).sum::<f64>() / n;
        }
        total / m as f64
    }
}

/// Cosine decay from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            start: 0.1,
            end: 0.001,
        }
    }
}

/// `end + (start - end)(1 + cos(pi step / total)) / 2`.
pub fn learning_rate(step: u64, total_steps: u64, schedule: &LrSchedule) -> f64 {
    if total_steps == 0 {
        return schedule.start;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    schedule.end
        + 0.5 * (schedule.start - schedule.end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Explicit penalty added to the task-loss gradient, for the
/// sparsity-regularized baselines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightPenalty {
    #[default]
    None,
    /// `strength * sum |w|`.
    L1 { strength: f64 },
    /// `strength / 2 * sum w^2`.
    L2 { strength: f64 },
}

impl WeightPenalty {
    fn add_gradient(&self, weights: &[f64], grad: &mut [f64]) {
        match *self {
            WeightPenalty::None => {}
            WeightPenalty::L1 { strength } => {
                for (g, w) in grad.iter_mut().zip(weights) {
                    // Subgradient 0 at w = 0.
                    *g += strength * if *w == 0.0 { 0.0 } else { w.signum() };
                }
            }
            WeightPenalty::L2 { strength } => {
                grad.iter_mut()
                    .zip(weights)
                    .for_each(|(g, w)| *g += strength * w);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the posterior term.
    pub beta_kl: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: LrSchedule,
    pub seed: u64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub kernel: KernelConfig,
    /// Relaxed gate draws averaged per step.
    pub gate_samples: usize,
    pub gate_init: f64,
    /// Step size of the RMS-normalized gate-logit updates.
    pub gate_learning_rate: f64,
    /// When false, gates stay at 1 and are never updated.
    pub learn_gates: bool,
    /// Step size for `ln d` and `ln lambda`.
    pub scalar_learning_rate: f64,
    pub init_d: f64,
    /// Upper bound on `d`. A separable task drives the residual to zero and
    /// the optimal `d` to infinity.
    pub max_d: f64,
    pub init_lambda: f64,
    /// `epsilon_spike / lambda`.
    pub spike_ratio: f64,
    pub plateau_tolerance: f64,
    pub plateau_patience: u32,
    pub penalty: WeightPenalty,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta_kl: 0.1,
            epochs: 60,
            batch_size: 512,
            learning_rate: LrSchedule::default(),
            seed: 0,
            tau_start: 5.0,
            tau_end: 0.1,
            kernel: KernelConfig::default(),
            gate_samples: 1,
            gate_init: 0.9,
            gate_learning_rate: 0.05,
            learn_gates: true,
            scalar_learning_rate: 0.1,
            init_d: 1.0,
            max_d: 100.0,
            init_lambda: 1.0,
            spike_ratio: DEFAULT_SPIKE_RATIO,
            plateau_tolerance: 1e-5,
            plateau_patience: 10,
            penalty: WeightPenalty::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if !(self.beta_kl >= 0.0) || !self.beta_kl.is_finite() {
            return Err(Error::Config(format!(
                "beta_kl must be >= 0, got {}",
                self.beta_kl
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        positive("learning_rate.start", self.learning_rate.start)?;
        positive("learning_rate.end", self.learning_rate.end)?;
        positive("gate_learning_rate", self.gate_learning_rate)?;
        positive("scalar_learning_rate", self.scalar_learning_rate)?;
        positive("init_d", self.init_d)?;
        positive("max_d", self.max_d)?;
        if self.init_d > self.max_d {
            return Err(Error::Config(format!(
                "init_d {} exceeds max_d {}",
                self.init_d, self.max_d
            )));
        }
        positive("init_lambda", self.init_lambda)?;
        if !(self.gate_init > 0.0 && self.gate_init < 1.0) {
            return Err(Error::Config(format!(
                "gate_init must be in (0, 1), got {}",
                self.gate_init
            )));
        }
        if self.gate_samples == 0 {
            return Err(Error::Config("gate_samples must be at least 1".into()));
        }
        if !(self.spike_ratio >= crate::priors::MIN_SPIKE_RATIO) {
            return Err(Error::Config(format!(
                "spike_ratio must be at least {}, got {}",
                crate::priors::MIN_SPIKE_RATIO,
                self.spike_ratio
            )));
        }
        if !(self.plateau_tolerance >= 0.0) {
            return Err(Error::Config("plateau_tolerance must be >= 0".into()));
        }
        match self.penalty {
            WeightPenalty::L1 { strength } | WeightPenalty::L2 { strength }
                if !(strength >= 0.0 && strength.is_finite()) =>
            {
                return Err(Error::Config(format!(
                    "penalty strength must be >= 0, got {strength}"
                )));
            }
            _ => {}
        }
        TemperatureSchedule::new(self.tau_start, self.tau_end, 1)?;
        self.kernel.validate()
    }
}

/// Sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngState::new(derive_seed(seed ^ 0x5EED_0BA7_C4E5, epoch), 0);
    order.shuffle(&mut rng);
    order
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Mean cross-entropy of particle 0 over the epoch's steps.
    pub loss: f64,
    /// Mean `beta * rms(phi)` of particle 0.
    pub kl_term: f64,
    pub mean_gate_prob: f64,
    pub d: f64,
    pub lambda: f64,
    /// Training accuracy of particle 0 with hardened gates.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingTrace {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    Converged,
    Diverged,
    /// Stopped at an epoch limit with budget left; resumable.
    Paused,
}

/// Everything besides the particles needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainProgress {
    pub step: u64,
    pub epoch: u64,
    pub best_loss: f64,
    pub plateau_count: u32,
    /// Gate-noise stream of each particle.
    pub gate_rngs: Vec<RngState>,
    /// Running mean square of each particle's gate-logit gradient.
    pub gate_rms: Vec<Vec<f64>>,
}

impl TrainProgress {
    pub fn fresh(ensemble: &ParticleEnsemble, seed: u64) -> Self {
        TrainProgress {
            step: 0,
            epoch: 0,
            best_loss: f64::INFINITY,
            plateau_count: 0,
            gate_rngs: (0..ensemble.len())
                .map(|i| RngState::new(derive_seed(seed, 1 << 32 | i as u64), i as u64))
                .collect(),
            gate_rms: ensemble
                .particles()
                .iter()
                .map(|p| vec![0.0; p.params.len()])
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub ensemble: ParticleEnsemble,
    pub progress: TrainProgress,
    pub trace: TrainingTrace,
    pub status: TrainStatus,
}

const GATE_RMS_DECAY: f64 = 0.9;
const RMS_EPS: f64 = 1e-8;

struct ParticleStep {
    ce: f64,
    ce_theta: Vec<f64>,
    /// `d CE / d logit` through the relaxed samples.
    ce_logits: Vec<f64>,
    /// Per-sample score of the weights.
    score: Vec<f64>,
    /// Per-sample log-posterior gradient of the gate logits.
    post_logits: Vec<f64>,
    d_ln_d: f64,
    d_ln_lambda: f64,
}

/// Resumable training loop.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a DatasetBatch,
    ensemble: ParticleEnsemble,
    progress: TrainProgress,
    trace: TrainingTrace,
    total_steps: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        ensemble: ParticleEnsemble,
        data: &'a DatasetBatch,
        config: TrainConfig,
    ) -> Result<Self> {
        let progress = TrainProgress::fresh(&ensemble, config.seed);
        Trainer::resume(ensemble, progress, data, config)
    }

    pub fn resume(
        ensemble: ParticleEnsemble,
        progress: TrainProgress,
        data: &'a DatasetBatch,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if data.dim() != ensemble.specs()[0].fan_in {
            return Err(Error::Shape(format!(
                "data has {} features but the network expects {}",
                data.dim(),
                ensemble.specs()[0].fan_in
            )));
        }
        if progress.gate_rngs.len() != ensemble.len() || progress.gate_rms.len() != ensemble.len() {
            return Err(Error::Shape(
                "training progress does not match the ensemble".into(),
            ));
        }
        let total_steps = config.epochs * batches_per_epoch(data.len(), config.batch_size);
        Ok(Trainer {
            config,
            data,
            ensemble,
            progress,
            trace: TrainingTrace::default(),
            total_steps,
        })
    }

    pub fn ensemble(&self) -> &ParticleEnsemble {
        &self.ensemble
    }

    pub fn progress(&self) -> &TrainProgress {
        &self.progress
    }

    pub fn trace(&self) -> &TrainingTrace {
        &self.trace
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs
    }

    fn particle_step(
        &self,
        idx: usize,
        particle: &mut Particle,
        rng: &mut RngState,
        batch: &DatasetBatch,
        tau: f64,
    ) -> Result<ParticleStep> {
        let cfg = &self.config;
        let inv_n = 1.0 / self.data.len() as f64;
        let inv_b = 1.0 / batch.len() as f64;
        let m = particle.params.len();
        let samples = if cfg.learn_gates { cfg.gate_samples } else { 1 };
        let inv_s = 1.0 / samples as f64;
        let loss_kind = TaskLoss::for_targets(batch.targets());
        let mut out = ParticleStep {
            ce: 0.0,
            ce_theta: vec![0.0; m],
            ce_logits: vec![0.0; m],
            score: vec![0.0; m],
            post_logits: vec![0.0; m],
            d_ln_d: 0.0,
            d_ln_lambda: 0.0,
        };
        let ones = vec![1.0; m];
        let posterior = cfg.beta_kl > 0.0 || cfg.learn_gates;
        if posterior {
            let flat = particle.params.flatten();
            let probs = if cfg.learn_gates {
                particle.gates.probs()
            } else {
                ones.clone()
            };
            let prior = expected_spike_slab_terms(&flat, &probs, &particle.noise)?;
            for i in 0..m {
                out.score[i] = prior.d_theta[i] * inv_n;
                out.post_logits[i] = prior.d_probs[i] * probs[i] * (1.0 - probs[i]) * inv_n;
            }
            if prior.slab_mass > 0.0 && prior.slab_sq > 0.0 {
                out.d_ln_lambda = log_ratio_step(
                    prior.slab_mass,
                    particle.noise.lambda.powi(2) * prior.slab_sq,
                );
            }
        }
        for _ in 0..samples {
            if cfg.learn_gates {
                particle.gates.refresh(tau, rng)?;
            }
            let g: &[f64] = if cfg.learn_gates {
                particle.gates.relaxed()
            } else {
                &ones
            };
            let ce = backward(&particle.params, Some(g), batch, loss_kind)?;
            if !ce.loss.is_finite() {
                return Err(Error::Numeric(format!("loss of particle {idx}")));
            }
            out.ce += ce.loss * inv_s;
            add_scaled(&mut out.ce_theta, &ce.grads.params, inv_s);
            let slopes = particle.gates.relaxed_logit_slopes();
            if cfg.learn_gates {
                for i in 0..m {
                    out.ce_logits[i] += ce.grads.gates[i] * slopes[i] * inv_s;
                }
            }
            if !posterior {
                continue;
            }
            let lik = likelihood_terms(&particle.params, g, &particle.noise, batch)?;
            add_scaled(&mut out.score, &lik.d_theta, inv_b * inv_s);
            if cfg.learn_gates {
                for i in 0..m {
                    out.post_logits[i] += lik.d_gates[i] * slopes[i] * inv_b * inv_s;
                }
            }
            out.d_ln_d += log_ratio_step(
                batch.len() as f64,
                particle.noise.d.powi(2) * lik.sq_residual,
            ) * inv_s;
        }
        Ok(out)
    }

    pub fn run_epoch(&mut self) -> Result<Option<EpochRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let cfg = self.config.clone();
        let epoch = self.progress.epoch;
        let order = epoch_order(cfg.seed, epoch, self.data.len());
        let schedule = TemperatureSchedule {
            tau_start: cfg.tau_start,
            tau_end: cfg.tau_end,
            total_steps: self.total_steps.max(1),
        };
        let mut loss_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut steps = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let batch = self.data.select(chunk)?;
            let step = self.progress.step;
            let tau = temperature(step, &schedule);
            let lr = learning_rate(step, self.total_steps, &cfg.learning_rate);

            let mut particles = std::mem::take(&mut self.ensemble.particles);
            let mut rngs = std::mem::take(&mut self.progress.gate_rngs);
            let results: Vec<Result<ParticleStep>> = particles
                .par_iter_mut()
                .zip(rngs.par_iter_mut())
                .enumerate()
                .map(|(i, (p, r))| self.particle_step(i, p, r, &batch, tau))
                .collect();
            self.ensemble.particles = particles;
            self.progress.gate_rngs = rngs;
            let results = results.into_iter().collect::<Result<Vec<_>>>()?;

            let phis = if cfg.beta_kl > 0.0 {
                let points = self.ensemble.flattened();
                let h = cfg.kernel.bandwidth(&points)?;
                // The Stein direction of the full posterior, scaled per sample
                // like the task loss. Scaling only the score would leave the
                // repulsion N times too strong and target p^(1/N) instead.
                let n_total = self.data.len() as f64;
                let scores: Vec<Vec<f64>> = results
                    .iter()
                    .map(|r| r.score.iter().map(|v| v * n_total).collect())
                    .collect();
                let mut phis = ksd_directions(&points, &scores, h)?;
                phis.iter_mut().flatten().for_each(|v| *v /= n_total);
                Some(phis)
            } else {
                None
            };

            for (i, (p, r)) in self.ensemble.particles.iter_mut().zip(&results).enumerate() {
                let mut grad = r.ce_theta.clone();
                if let Some(phis) = &phis {
                    let phi = &phis[i];
                    grad.iter_mut()
                        .zip(phi)
                        .for_each(|(g, f)| *g -= cfg.beta_kl * f);
                    if i == 0 {
                        let rms =
                            (phi.iter().map(|v| v * v).sum::<f64>() / phi.len() as f64).sqrt();
                        kl_sum += cfg.beta_kl * rms;
                    }
                }
                if cfg.penalty != WeightPenalty::None {
                    cfg.penalty.add_gradient(&p.params.flatten(), &mut grad);
                }
                p.params = crate::net::sgd_step(&p.params, &grad, lr)
                    .map_err(|e| Error::Numeric(format!("particle {i}: {e}")))?;

                if cfg.learn_gates {
                    let rms = &mut self.progress.gate_rms[i];
                    let logit_grad: Vec<f64> = (0..grad.len())
                        .map(|k| r.ce_logits[k] - cfg.beta_kl * r.post_logits[k])
                        .collect();
                    let mut scaled = Vec::with_capacity(logit_grad.len());
                    for (v, g) in rms.iter_mut().zip(&logit_grad) {
                        *v = GATE_RMS_DECAY * *v + (1.0 - GATE_RMS_DECAY) * g * g;
                        scaled.push(g / (v.sqrt() + RMS_EPS));
                    }
                    p.gates.descend(&scaled, cfg.gate_learning_rate)?;
                }

                let ln_d =
                    (p.noise.d.ln() + cfg.scalar_learning_rate * r.d_ln_d).min(cfg.max_d.ln());
                let ln_lambda = p.noise.lambda.ln() + cfg.scalar_learning_rate * r.d_ln_lambda;
                let noise = NoiseScalars::new(ln_d.exp(), ln_lambda.exp(), cfg.spike_ratio)
                    .map_err(|e| {
                        Error::Numeric(format!("particle {i}: noise scales diverged: {e}"))
                    })?;
                p.noise = noise;
            }

            loss_sum += results[0].ce;
            steps += 1;
            self.progress.step += 1;
        }

        let p0 = &self.ensemble.particles[0];
        let acc = match self.data.labels() {
            Some(labels) => {
                let hard = p0.gates.hardened();
                accuracy(&forward(&p0.params, Some(&hard), self.data)?, labels)?
            }
            None => f64::NAN,
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / steps as f64,
            kl_term: kl_sum / steps as f64,
            mean_gate_prob: p0.gates.mean_prob(),
            d: p0.noise.d,
            lambda: p0.noise.lambda,
            accuracy: acc,
        };
        if !record.loss.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch} loss")));
        }
        if self.progress.best_loss - record.loss < cfg.plateau_tolerance {
            self.progress.plateau_count += 1;
        } else {
            self.progress.plateau_count = 0;
        }
        self.progress.best_loss = self.progress.best_loss.min(record.loss);
        self.progress.epoch += 1;
        self.trace.epochs.push(record.clone());
        Ok(Some(record))
    }

    pub fn plateaued(&self) -> bool {
        self.progress.plateau_count >= self.config.plateau_patience
    }

    /// Trains until the epoch budget is spent, the loss plateaus, or
    /// `max_epochs` more epochs have run. A numeric failure stops training
    /// and keeps the last good state.
    pub fn advance(&mut self, max_epochs: Option<u64>) -> TrainStatus {
        let mut ran = 0;
        loop {
            if self.plateaued() {
                return TrainStatus::Converged;
            }
            if self.is_finished() {
                return TrainStatus::Completed;
            }
            if max_epochs.is_some_and(|m| ran >= m) {
                return TrainStatus::Paused;
            }
            let snapshot = (self.ensemble.clone(), self.progress.clone());
            if let Err(e) = self.run_epoch() {
                log::error!("training diverged: {e}");
                self.ensemble = snapshot.0;
                self.progress = snapshot.1;
                return TrainStatus::Diverged;
            }
            ran += 1;
        }
    }

    pub fn run(mut self) -> TrainOutcome {
        let status = self.advance(None);
        self.into_outcome(status)
    }

    pub fn into_outcome(self, status: TrainStatus) -> TrainOutcome {
        TrainOutcome {
            ensemble: self.ensemble,
            progress: self.progress,
            trace: self.trace,
            status,
        }
    }
}

/// `0.5 ln(target / current)` for a quantity whose optimum makes them
/// equal: a damped fixed-point step in log space. Stable where a gradient
/// step on `ln d` overshoots once the fit is nearly exact.
fn log_ratio_step(target: f64, current: f64) -> f64 {
    if current > 0.0 && target > 0.0 {
        0.5 * (target / current).ln()
    } else {
        0.0
    }
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += s * b);
}

/// Trains `ensemble` on `data` from a fresh start.
pub fn train(
    ensemble: ParticleEnsemble,
    data: &DatasetBatch,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    Ok(Trainer::new(ensemble, data, config.clone())?.run())
}
