//! Pruning masks and weight-distribution analysis.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gates::harden;
use crate::net::{layer_ranges, LayerSpec, NetworkParams};
use crate::svgd::Particle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    DllpSlab,
    Magnitude,
    L1TrainedMagnitude,
    L2TrainedMagnitude,
}

impl MaskOrigin {
    pub fn code(self) -> u8 {
        match self {
            MaskOrigin::DllpSlab => 0,
            MaskOrigin::Magnitude => 1,
            MaskOrigin::L1TrainedMagnitude => 2,
            MaskOrigin::L2TrainedMagnitude => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MaskOrigin::DllpSlab),
            1 => Some(MaskOrigin::Magnitude),
            2 => Some(MaskOrigin::L1TrainedMagnitude),
            3 => Some(MaskOrigin::L2TrainedMagnitude),
            _ => None,
        }
    }
}

/// Keep/drop decision per parameter, in flattened parameter order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    keep: Vec<bool>,
    origin: MaskOrigin,
}

impl PruneMask {
    pub fn new(keep: Vec<bool>, origin: MaskOrigin) -> Self {
        PruneMask { keep, origin }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn origin(&self) -> MaskOrigin {
        self.origin
    }

    pub fn with_origin(mut self, origin: MaskOrigin) -> Self {
        self.origin = origin;
        self
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    /// `1 - kept / M`; zero for an empty mask.
    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        1.0 - self.kept() as f64 / self.keep.len() as f64
    }

    /// 1.0 for kept parameters and 0.0 for dropped ones.
    pub fn as_gates(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| f64::from(u8::from(k))).collect()
    }

    /// Parameters with dropped entries set to zero.
    pub fn apply(&self, params: &NetworkParams) -> Result<NetworkParams> {
        if self.keep.len() != params.len() {
            return Err(Error::Shape(format!(
                "mask of {} entries for {} parameters",
                self.keep.len(),
                params.len()
            )));
        }
        let flat: Vec<f64> = params
            .flatten()
            .into_iter()
            .zip(&self.keep)
            .map(|(w, &k)| if k { w } else { 0.0 })
            .collect();
        let mut out = params.clone();
        out.set_flat(&flat)?;
        Ok(out)
    }

    /// Values of the kept parameters.
    pub fn kept_values(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(&self.keep)
            .filter(|(_, &k)| k)
            .map(|(v, _)| *v)
            .collect()
    }
}

/// Keeps the parameters whose inclusion probability is at least
/// `gate_threshold` and zeroes the rest. At 0.5 this is `harden` of the
/// probabilities.
pub fn extract_slab(
    particle: &Particle,
    gate_threshold: f64,
) -> Result<(PruneMask, NetworkParams)> {
    let probs = particle.gates.probs();
    let keep: Vec<bool> = if gate_threshold == 0.5 {
        probs.iter().map(|&p| harden(p) == 1).collect()
    } else {
        probs.iter().map(|&p| p >= gate_threshold).collect()
    };
    let mask = PruneMask::new(keep, MaskOrigin::DllpSlab);
    let pruned = mask.apply(&particle.params)?;
    Ok((mask, pruned))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MagnitudeCriterion {
    /// Fraction of parameters to drop.
    Sparsity(f64),
    /// Drop every `|w| <= delta`.
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeMask {
    pub mask: PruneMask,
    /// Largest dropped magnitude (the threshold for `Threshold`).
    pub delta: f64,
}

/// Magnitude pruning over all parameters. With a target sparsity the
/// `round(s M)` smallest magnitudes are dropped; ties at the cut drop the
/// lowest index first.
pub fn magnitude_prune(weights: &[f64], criterion: MagnitudeCriterion) -> Result<MagnitudeMask> {
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("weight".into()));
    }
    match criterion {
        MagnitudeCriterion::Threshold(delta) => {
            if !(delta >= 0.0) {
                return Err(Error::Domain(format!(
                    "threshold must be >= 0, got {delta}"
                )));
            }
            let keep = weights.iter().map(|w| w.abs() > delta).collect();
            Ok(MagnitudeMask {
                mask: PruneMask::new(keep, MaskOrigin::Magnitude),
                delta,
            })
        }
        MagnitudeCriterion::Sparsity(s) => {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Domain(format!(
                    "target sparsity {s} is outside [0, 1]"
                )));
            }
            let m = weights.len();
            let drop = ((s * m as f64).round() as usize).min(m);
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| {
                weights[a]
                    .abs()
                    .total_cmp(&weights[b].abs())
                    .then(a.cmp(&b))
            });
            let mut keep = vec![true; m];
            let mut delta = 0.0;
            for &i in &order[..drop] {
                keep[i] = false;
                delta = weights[i].abs();
            }
            Ok(MagnitudeMask {
                mask: PruneMask::new(keep, MaskOrigin::Magnitude),
                delta,
            })
        }
    }
}

/// Parameters of the truncated-weight models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationAnalysisConfig {
    /// Weight standard deviation.
    pub sigma: f64,
    pub n_samples: u32,
    /// Norm order, 1 or 2.
    pub p_norm: u32,
    /// Magnitude threshold.
    pub threshold: f64,
    /// Tail shape numerator; the tail index is `h_shape / sigma`.
    pub h_shape: f64,
}

impl TruncationAnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !matches!(self.p_norm, 1 | 2) {
            return Err(Error::Config(format!(
                "p_norm must be 1 or 2, got {}",
                self.p_norm
            )));
        }
        if !(self.h_shape > 0.0) {
            return Err(Error::Config(format!(
                "h_shape must be positive, got {}",
                self.h_shape
            )));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config("threshold must be >= 0".into()));
        }
        if self.p_norm == 2 && self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// `h / sigma`.
    pub fn tail_index(&self) -> f64 {
        self.h_shape / self.sigma
    }
}

/// Log-density of the weight-magnitude model.
///
/// For `p = 2` this is the scaled-chi form with `k = n (p - 1)`:
/// `f(w) = (sqrt2 / sigma) (w / (sqrt2 sigma))^(k-1) exp(-(w / (sqrt2 sigma))^2) / Gamma(k/2)`.
/// For `p = 1` the shape `k / 2` vanishes and the half-normal with variance
/// `2 sigma^2` is used instead.
pub fn amoroso_log_density(w: f64, config: &TruncationAnalysisConfig) -> Result<f64> {
    config.validate()?;
    if !(w >= 0.0) {
        return Err(Error::Domain(format!("magnitude {w} must be >= 0")));
    }
    let s = config.sigma;
    if config.p_norm == 1 {
        let var = 2.0 * s * s;
        return Ok(std::f64::consts::LN_2
            - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
            - w * w / (2.0 * var));
    }
    let k = config.n_samples as f64 * (config.p_norm as f64 - 1.0);
    let scale = std::f64::consts::SQRT_2 * s;
    let u = w / scale;
    let power = if k == 1.0 { 0.0 } else { (k - 1.0) * u.ln() };
    Ok(-ln_gamma(k / 2.0) + (std::f64::consts::SQRT_2 / s).ln() + power - u * u)
}

/// Mode of the `p = 2` magnitude model for `k = n(p-1) > 1`.
pub fn amoroso_mode(config: &TruncationAnalysisConfig) -> Result<f64> {
    config.validate()?;
    let k = config.n_samples as f64 * (config.p_norm as f64 - 1.0);
    if !(k > 1.0) {
        return Err(Error::Domain(
            "the mode is interior only for n(p-1) > 1".into(),
        ));
    }
    Ok(std::f64::consts::SQRT_2 * config.sigma * ((k - 1.0) / 2.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailSides {
    /// Density on `w > delta` only.
    One,
    /// Symmetric in `w`, half of the mass in each tail.
    Two,
}

/// Generalized-Pareto tail density `k delta^k / |w|^(k+1)` beyond `delta`.
pub fn gpd_density(w: f64, delta: f64, k: f64, sides: TailSides) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!(
            "delta must be positive, got {delta}"
        )));
    }
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::Domain(format!("k must be positive, got {k}")));
    }
    let x = match sides {
        TailSides::One => w,
        TailSides::Two => w.abs(),
    };
    if x <= delta {
        return Ok(0.0);
    }
    let f = k * (k * delta.ln() - (k + 1.0) * x.ln()).exp();
    Ok(match sides {
        TailSides::One => f,
        TailSides::Two => 0.5 * f,
    })
}

pub const MIN_TAIL_SAMPLES: usize = 30;

/// Maximum-likelihood (Hill) tail index `m / sum ln(|w| / delta)`.
pub fn fit_gpd_shape(weights: &[f64], delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!(
            "delta must be positive, got {delta}"
        )));
    }
    if weights.len() < MIN_TAIL_SAMPLES {
        return Err(Error::Precondition(format!(
            "{} surviving weights; at least {MIN_TAIL_SAMPLES} are needed",
            weights.len()
        )));
    }
    let mut sum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        if !(w.abs() > delta) {
            return Err(Error::Precondition(format!(
                "weight {i} = {w} does not exceed the threshold {delta}"
            )));
        }
        sum += (w.abs() / delta).ln();
    }
    Ok(weights.len() as f64 / sum)
}

pub const MIN_REPORT_SAMPLES: usize = 100;

/// Histogram and shape statistics of a weight set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    /// `bins + 1` edges spanning `[-max|w|, max|w|]`.
    pub edges: Vec<f64>,
    /// Count / (total * width) per bin.
    pub densities: Vec<f64>,
    pub excess_kurtosis: f64,
    /// Kolmogorov-Smirnov distance to the moment-fitted Gaussian.
    pub ks_statistic: f64,
    pub bimodality_flag: bool,
    /// Density of the bin an exact zero falls into; with an even bin count
    /// that is `[0, width)`.
    pub near_zero_density: f64,
    /// The fitted Gaussian's mean density over that bin.
    pub near_zero_gaussian: f64,
}

/// Significant peaks reach this fraction of the tallest one.
const PEAK_FLOOR: f64 = 0.1;
/// Two peaks are separate modes when the trough between them is below this
/// fraction of the smaller one.
const TROUGH_RATIO: f64 = 0.6;

/// Histogram with a 3-bin moving average has two significant local maxima
/// separated by a trough deeper than [`TROUGH_RATIO`].
pub fn is_bimodal(densities: &[f64]) -> bool {
    let n = densities.len();
    if n < 3 {
        return false;
    }
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            densities[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let top = smooth.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return false;
    }
    // Local maxima; a plateau counts once at its first bin.
    let mut peaks = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && smooth[j + 1] == smooth[i] {
            j += 1;
        }
        let left = i == 0 || smooth[i - 1] < smooth[i];
        let right = j == n - 1 || smooth[j + 1] < smooth[i];
        if left && right && smooth[i] >= PEAK_FLOOR * top {
            peaks.push(i);
        }
        i = j + 1;
    }
    peaks.windows(2).any(|w| {
        let trough = smooth[w[0]..=w[1]]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        trough < TROUGH_RATIO * smooth[w[0]].min(smooth[w[1]])
    })
}

/// Builds the report over `bins` equal-width bins.
pub fn distribution_report(weights: &[f64], bins: usize) -> Result<DistributionReport> {
    if weights.len() < MIN_REPORT_SAMPLES {
        return Err(Error::Precondition(format!(
            "{} weights; at least {MIN_REPORT_SAMPLES} are needed",
            weights.len()
        )));
    }
    if bins < 2 {
        return Err(Error::Config("a histogram needs at least 2 bins".into()));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("weight".into()));
    }
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let m2 = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    if !(m2 > 0.0) {
        return Err(Error::Precondition(
            "weights have zero variance; shape statistics are undefined".into(),
        ));
    }
    let m4 = weights.iter().map(|w| (w - mean).powi(4)).sum::<f64>() / n;
    let std = m2.sqrt();

    let max = weights.iter().fold(0.0f64, |a, w| a.max(w.abs()));
    let width = 2.0 * max / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| -max + i as f64 * width).collect();
    let bin_of = |w: f64| (((w + max) / width).floor() as usize).min(bins - 1);
    let mut counts = vec![0usize; bins];
    for &w in weights {
        counts[bin_of(w)] += 1;
    }
    let densities: Vec<f64> = counts.iter().map(|&c| c as f64 / (n * width)).collect();

    let normal = Normal::new(mean, std).expect("positive std");
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ks: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal.cdf(x);
        ks = ks.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }

    let zero_bin = bin_of(0.0);
    let near_zero_gaussian =
        (normal.cdf(edges[zero_bin + 1]) - normal.cdf(edges[zero_bin])) / width;

    Ok(DistributionReport {
        count: weights.len(),
        mean,
        std,
        bimodality_flag: is_bimodal(&densities),
        near_zero_density: densities[zero_bin],
        near_zero_gaussian,
        edges,
        densities,
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        ks_statistic: ks,
    })
}

/// Scalar summary of a report, for JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub excess_kurtosis: f64,
    pub ks_statistic: f64,
    pub bimodality_flag: bool,
    pub near_zero_density: f64,
    pub near_zero_gaussian: f64,
}

impl DistributionReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            count: self.count,
            mean: self.mean,
            std: self.std,
            excess_kurtosis: self.excess_kurtosis,
            ks_statistic: self.ks_statistic,
            bimodality_flag: self.bimodality_flag,
            near_zero_density: self.near_zero_density,
            near_zero_gaussian: self.near_zero_gaussian,
        }
    }

    /// `edge` column, one row per bin edge.
    pub fn edges_csv(&self) -> String {
        let mut s = String::from("edge\n");
        for e in &self.edges {
            s.push_str(&format!("{e:e}\n"));
        }
        s
    }

    /// `bin,left,right,density` rows.
    pub fn densities_csv(&self) -> String {
        let mut s = String::from("bin,left,right,density\n");
        for (i, d) in self.densities.iter().enumerate() {
            s.push_str(&format!(
                "{i},{:e},{:e},{d:e}\n",
                self.edges[i],
                self.edges[i + 1]
            ));
        }
        s
    }
}

/// Dense multiply-accumulate count of a masked network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    /// One MAC per surviving weight.
    pub macs: u64,
    /// One add per surviving bias, reported separately.
    pub bias_adds: u64,
    /// MACs of the unpruned network.
    pub dense_macs: u64,
}

pub fn flops_estimate(specs: &[LayerSpec], mask: &PruneMask) -> Result<MacCount> {
    let total: usize = specs.iter().map(LayerSpec::param_count).sum();
    if mask.len() != total {
        return Err(Error::Shape(format!(
            "mask of {} entries for {total} parameters",
            mask.len()
        )));
    }
    let mut c = MacCount {
        macs: 0,
        bias_adds: 0,
        dense_macs: 0,
    };
    for r in layer_ranges(specs) {
        c.dense_macs += r.weights.len() as u64;
        c.macs += mask.keep[r.weights].iter().filter(|k| **k).count() as u64;
        c.bias_adds += mask.keep[r.bias].iter().filter(|k| **k).count() as u64;
    }
    Ok(c)
}
