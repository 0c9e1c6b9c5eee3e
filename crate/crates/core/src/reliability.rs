//! Estimation-efficiency calculators for the linear-Gaussian observation
//! model, and the aleatoric/epistemic uncertainty sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_gaussian, shuffle_targets, subsample};
use crate::error::{Error, Result};
use crate::net::{forward, softmax_rows, DatasetBatch, LayerSpec, Targets};
use crate::rng::derive_seed;
use crate::svgd::{train, ParticleEnsemble, TrainConfig, TrainStatus};

/// Observation-model quantities. `beta2_noise` is the data-noise variance,
/// unrelated to the KL weight `beta_kl` of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyInputs {
    pub eps2: f64,
    pub alpha2: f64,
    pub beta2_noise: f64,
    /// Observation count.
    pub k: u64,
    pub mu_theta: f64,
    pub y_bar: f64,
}

impl EfficiencyInputs {
    pub fn new(eps2: f64, alpha2: f64, beta2_noise: f64) -> Self {
        EfficiencyInputs {
            eps2,
            alpha2,
            beta2_noise,
            k: 1,
            mu_theta: 0.0,
            y_bar: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps2 > 0.0 && self.eps2.is_finite()) {
            return Err(Error::Domain(format!(
                "eps2 must be positive, got {}",
                self.eps2
            )));
        }
        for (name, v) in [("alpha2", self.alpha2), ("beta2_noise", self.beta2_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.k == 0 {
            return Err(Error::Domain(
                "observation count k must be at least 1".into(),
            ));
        }
        if !self.mu_theta.is_finite() || !self.y_bar.is_finite() {
            return Err(Error::Domain("mu_theta and y_bar must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCase {
    /// Neither the parameters nor the data are noisy.
    Clean,
    ModelNoise,
    DataNoise,
    Both,
}

impl NoiseCase {
    pub fn label(self) -> &'static str {
        match self {
            NoiseCase::Clean => "clean",
            NoiseCase::ModelNoise => "model_noise",
            NoiseCase::DataNoise => "data_noise",
            NoiseCase::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            NoiseCase::Clean,
            NoiseCase::ModelNoise,
            NoiseCase::DataNoise,
            NoiseCase::Both,
        ]
        .into_iter()
        .find(|c| c.label() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub crlb: f64,
    pub estimator_variance: f64,
    /// `crlb / estimator_variance`, in (0, 1].
    pub efficiency: f64,
    pub case: NoiseCase,
}

/// `(y_bar alpha^2 + mu_theta eps^2) / (eps^2 + alpha^2)`. Only the
/// denominator has to be positive, so the noiseless-data limit `eps2 = 0`
/// is allowed here.
pub fn map_estimator(inputs: &EfficiencyInputs) -> Result<f64> {
    let (e, a) = (inputs.eps2, inputs.alpha2);
    if !(e >= 0.0 && a >= 0.0) || !(e + a).is_finite() {
        return Err(Error::Domain(format!(
            "variances must be >= 0, got eps2 {e}, alpha2 {a}"
        )));
    }
    if e + a == 0.0 {
        return Err(Error::Domain("eps2 + alpha2 must be positive".into()));
    }
    Ok((inputs.y_bar * a + inputs.mu_theta * e) / (e + a))
}

/// The bound of an unbiased estimator: `eps^2`.
pub fn crlb(inputs: &EfficiencyInputs) -> Result<f64> {
    inputs.validate()?;
    Ok(inputs.eps2)
}

/// Efficiency for one of the four noise cases. The noise fields must match
/// the case: absent noise sources have to be exactly zero.
pub fn efficiency(case: NoiseCase, inputs: &EfficiencyInputs) -> Result<EfficiencyReport> {
    inputs.validate()?;
    let (e, a, b) = (inputs.eps2, inputs.alpha2, inputs.beta2_noise);
    let (uses_alpha, uses_beta) = match case {
        NoiseCase::Clean => (false, false),
        NoiseCase::ModelNoise => (true, false),
        NoiseCase::DataNoise => (false, true),
        NoiseCase::Both => (true, true),
    };
    if !uses_alpha && a != 0.0 {
        return Err(Error::Config(format!(
            "case {} requires alpha2 = 0, got {a}",
            case.label()
        )));
    }
    if !uses_beta && b != 0.0 {
        return Err(Error::Config(format!(
            "case {} requires beta2_noise = 0, got {b}",
            case.label()
        )));
    }
    let variance = match case {
        NoiseCase::Clean => e,
        NoiseCase::ModelNoise => e + a,
        NoiseCase::DataNoise => e + b,
        NoiseCase::Both => e + a + b,
    };
    Ok(EfficiencyReport {
        crlb: e,
        estimator_variance: variance,
        efficiency: e / variance,
        case,
    })
}

/// Spearman rank correlation, with average ranks for ties. `None` when
/// either sequence is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Aleatoric,
    Epistemic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Everything a sweep cell trains from, apart from its condition.
#[derive(Debug, Clone)]
pub struct SweepSetup {
    pub data: DatasetBatch,
    /// Held-out inputs for the inter-particle prediction variance.
    pub probe: Option<DatasetBatch>,
    pub specs: Vec<LayerSpec>,
    pub particles: usize,
    pub train: TrainConfig,
    pub base_seed: u64,
}

/// One trained condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    /// Noise std or data fraction.
    pub level: f64,
    pub seed: u64,
    pub status: CellStatus,
    /// Mean over particles of the learned prediction std `1/d`.
    pub aleatoric: Option<f64>,
    /// Mean over coordinates of the inter-particle variance of the weights.
    pub epistemic: Option<f64>,
    /// Mean inter-particle variance of the predictions on the probe set.
    pub prediction_variance: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySweepResult {
    pub kind: SweepKind,
    pub cells: Vec<SweepCell>,
    /// Training on shuffled targets at the clean level, when requested.
    pub control: Option<SweepCell>,
}

impl UncertaintySweepResult {
    pub fn levels(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.level).collect()
    }

    pub fn aleatoric(&self) -> Vec<Option<f64>> {
        self.cells.iter().map(|c| c.aleatoric).collect()
    }

    pub fn epistemic(&self) -> Vec<Option<f64>> {
        self.cells.iter().map(|c| c.epistemic).collect()
    }

    /// Rank correlation between level and the swept metric over the
    /// successful cells.
    pub fn rank_correlation(&self) -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .cells
            .iter()
            .filter_map(|c| {
                let v = match self.kind {
                    SweepKind::Aleatoric => c.aleatoric,
                    SweepKind::Epistemic => c.epistemic,
                };
                v.map(|v| (c.level, v))
            })
            .unzip();
        spearman(&x, &y)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in self.cells.iter().chain(&self.control) {
            out.push_str(&serde_json::to_string(c).expect("cells serialize"));
            out.push('\n');
        }
        out
    }

    /// One row per cell: level, aleatoric, epistemic, prediction variance.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:e}"));
        let mut out = String::from("level,status,aleatoric,epistemic,prediction_variance\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.level,
                if c.status == CellStatus::Ok {
                    "ok"
                } else {
                    "failed"
                },
                f(c.aleatoric),
                f(c.epistemic),
                f(c.prediction_variance)
            ));
        }
        out
    }
}

fn prediction_variance(ensemble: &ParticleEnsemble, probe: &DatasetBatch) -> Result<f64> {
    let outputs = ensemble
        .particles()
        .iter()
        .map(|p| {
            let hard = p.gates.hardened();
            let logits = forward(&p.params, Some(&hard), probe)?;
            Ok(match probe.targets() {
                Targets::Classes { .. } => softmax_rows(&logits),
                Targets::Values(_) => logits.into_values(),
            })
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let n = outputs.len() as f64;
    let len = outputs[0].len();
    let mut total = 0.0;
    for k in 0..len {
        let mean = outputs.iter().map(|o| o[k]).sum::<f64>() / n;
        total += outputs.iter().map(|o| (o[k] - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(total / len as f64)
}

fn run_cell(
    setup: &SweepSetup,
    index: usize,
    level: f64,
    seed: u64,
    data: Result<DatasetBatch>,
) -> SweepCell {
    let mut cell = SweepCell {
        index,
        level,
        seed,
        status: CellStatus::Failed,
        aleatoric: None,
        epistemic: None,
        prediction_variance: None,
        final_loss: None,
        error: None,
    };
    let outcome = data.and_then(|data| {
        let config = TrainConfig {
            seed,
            ..setup.train.clone()
        };
        let ensemble = ParticleEnsemble::init(&setup.specs, setup.particles, &config)?;
        train(ensemble, &data, &config)
    });
    match outcome {
        Ok(out) if out.status != TrainStatus::Diverged => {
            let ens = &out.ensemble;
            let inv_d =
                ens.particles().iter().map(|p| 1.0 / p.noise.d).sum::<f64>() / ens.len() as f64;
            cell.aleatoric = Some(inv_d);
            cell.epistemic = Some(ens.dispersion());
            cell.final_loss = out.trace.epochs.last().map(|r| r.loss);
            cell.prediction_variance = match &setup.probe {
                Some(probe) => prediction_variance(ens, probe).ok(),
                None => None,
            };
            cell.status = CellStatus::Ok;
        }
        Ok(_) => cell.error = Some("training diverged".into()),
        Err(e) => cell.error = Some(e.to_string()),
    }
    if let Some(e) = &cell.error {
        log::warn!("sweep cell {index} (level {level}) failed: {e}");
    }
    cell
}

/// Trains one ensemble per input-noise std. Cells run concurrently, each on
/// a seed derived from the base seed and its index.
pub fn aleatoric_sweep(
    setup: &SweepSetup,
    noise_levels: &[f64],
    shuffled_control: bool,
) -> Result<UncertaintySweepResult> {
    if noise_levels.len() < 3 {
        return Err(Error::Config(
            "an aleatoric sweep needs at least 3 noise levels".into(),
        ));
    }
    if !noise_levels.contains(&0.0) {
        return Err(Error::Config(
            "an aleatoric sweep needs the clean level 0".into(),
        ));
    }
    if let Some(v) = noise_levels.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::Config(format!(
            "noise level {v} is not a finite std >= 0"
        )));
    }
    let cells: Vec<SweepCell> = noise_levels
        .par_iter()
        .enumerate()
        .map(|(i, &std)| {
            let seed = derive_seed(setup.base_seed, i as u64);
            run_cell(
                setup,
                i,
                std,
                seed,
                corrupt_gaussian(&setup.data, std, seed),
            )
        })
        .collect();
    let control = shuffled_control.then(|| {
        let i = noise_levels.len();
        let seed = derive_seed(setup.base_seed, i as u64);
        run_cell(setup, i, 0.0, seed, shuffle_targets(&setup.data, seed))
    });
    Ok(UncertaintySweepResult {
        kind: SweepKind::Aleatoric,
        cells,
        control,
    })
}

/// Trains one ensemble per training-set fraction.
pub fn epistemic_sweep(setup: &SweepSetup, fractions: &[f64]) -> Result<UncertaintySweepResult> {
    if fractions.len() < 3 {
        return Err(Error::Config(
            "an epistemic sweep needs at least 3 fractions".into(),
        ));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("fraction {f} is outside (0, 1]")));
    }
    let cells: Vec<SweepCell> = fractions
        .par_iter()
        .enumerate()
        .map(|(i, &f)| {
            let seed = derive_seed(setup.base_seed, i as u64);
            run_cell(setup, i, f, seed, subsample(&setup.data, f, seed))
        })
        .collect();
    Ok(UncertaintySweepResult {
        kind: SweepKind::Epistemic,
        cells,
        control: None,
    })
}
