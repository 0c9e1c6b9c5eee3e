//! Dense feed-forward networks with optional per-parameter gates.
//!
//! Parameters are addressed through a single flattened view: for each layer
//! in order, the weight matrix (row-major, `fan_out x fan_in`) followed by
//! the bias vector. Gates, gradients and masks all use this alignment.
//!
//! All reductions run in a fixed sequential order, so results are
//! bit-identical across runs on the same platform.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    /// Final-layer marker: the network returns logits and the softmax is
    /// applied by the loss.
    SoftmaxOut,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
            Activation::SoftmaxOut => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            2 => Some(Activation::SoftmaxOut),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        LayerSpec {
            fan_in,
            fan_out,
            activation,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.fan_out
    }
}

/// Builds a multilayer perceptron topology: `hidden` activation between
/// layers and `output` on the last one.
pub fn mlp_specs(
    input: usize,
    hidden: &[usize],
    outputs: usize,
    hidden_activation: Activation,
    output_activation: Activation,
) -> Vec<LayerSpec> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(outputs);
    let last = sizes.len() - 2;
    sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i == last {
                output_activation
            } else {
                hidden_activation
            };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

pub fn validate_topology(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (i, spec) in specs.iter().enumerate() {
        if spec.fan_in == 0 || spec.fan_out == 0 {
            return Err(Error::Config(format!("layer {i} has a zero dimension")));
        }
        if spec.activation == Activation::SoftmaxOut && i + 1 != specs.len() {
            return Err(Error::Config(format!(
                "layer {i}: softmax-out is only allowed on the final layer"
            )));
        }
        if i > 0 && specs[i - 1].fan_out != spec.fan_in {
            return Err(Error::Shape(format!(
                "layer {} outputs {} values but layer {i} expects {}",
                i - 1,
                specs[i - 1].fan_out,
                spec.fan_in
            )));
        }
    }
    Ok(())
}

/// Flat index ranges of one layer's weights and bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRange {
    pub weights: std::ops::Range<usize>,
    pub bias: std::ops::Range<usize>,
}

pub fn layer_ranges(specs: &[LayerSpec]) -> Vec<LayerRange> {
    let mut offset = 0;
    specs
        .iter()
        .map(|s| {
            let w = offset..offset + s.weight_count();
            let b = w.end..w.end + s.fan_out;
            offset = b.end;
            LayerRange {
                weights: w,
                bias: b,
            }
        })
        .collect()
}

pub fn param_count(specs: &[LayerSpec]) -> usize {
    specs.iter().map(LayerSpec::param_count).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[fan_out x fan_in]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

/// The learnable parameter set of a dense network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    specs: Vec<LayerSpec>,
    layers: Vec<DenseLayer>,
}

impl NetworkParams {
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        NetworkParams::from_flat(specs, &vec![0.0; param_count(specs)])
    }

    /// Zero-mean Gaussian weights with standard deviation `sqrt(2 / fan_in)`
    /// and zero biases.
    pub fn init_he<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        validate_topology(specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let normal = Normal::new(0.0, (2.0 / s.fan_in as f64).sqrt())
                    .expect("positive standard deviation");
                let w = (0..s.weight_count()).map(|_| normal.sample(rng)).collect();
                DenseLayer {
                    weight: Tensor::from_parts_unchecked(vec![s.fan_out, s.fan_in], w),
                    bias: Tensor::zeros(vec![s.fan_out]),
                }
            })
            .collect();
        Ok(NetworkParams {
            specs: specs.to_vec(),
            layers,
        })
    }

    pub fn from_flat(specs: &[LayerSpec], flat: &[f64]) -> Result<Self> {
        validate_topology(specs)?;
        let m = param_count(specs);
        if flat.len() != m {
            return Err(Error::Shape(format!(
                "topology has {m} parameters but {} were given",
                flat.len()
            )));
        }
        let layers = specs
            .iter()
            .zip(layer_ranges(specs))
            .map(|(s, r)| {
                Ok(DenseLayer {
                    weight: Tensor::new(vec![s.fan_out, s.fan_in], flat[r.weights].to_vec())?,
                    bias: Tensor::new(vec![s.fan_out], flat[r.bias].to_vec())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkParams {
            specs: specs.to_vec(),
            layers,
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.layers {
            out.extend_from_slice(l.weight.values());
            out.extend_from_slice(l.bias.values());
        }
        out
    }

    /// Overwrites all parameters from a flat vector.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for (i, l) in self.layers.iter_mut().enumerate() {
            for dst in [&mut l.weight, &mut l.bias] {
                let n = dst.len();
                let src = &flat[offset..offset + n];
                if src.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("parameter update in layer {i}")));
                }
                dst.values_mut().copy_from_slice(src);
                offset += n;
            }
        }
        Ok(())
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Total scalar count `M` (weights plus biases).
    pub fn len(&self) -> usize {
        param_count(&self.specs)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_inputs(&self) -> usize {
        self.specs[0].fan_in
    }

    pub fn num_outputs(&self) -> usize {
        self.specs[self.specs.len() - 1].fan_out
    }
}

/// Supervision targets: class indices or real-valued regression targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes {
        labels: Vec<usize>,
        num_classes: usize,
    },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes {
                labels,
                num_classes,
            } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Values(v) => Targets::Values(indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Inputs `[N x D]` paired with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBatch {
    inputs: Tensor,
    targets: Targets,
}

impl DatasetBatch {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "inputs must be a matrix, got shape {:?}",
                inputs.shape()
            )));
        }
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::Precondition(
                "a batch needs at least one sample".into(),
            ));
        }
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "{n} input rows but {} targets",
                targets.len()
            )));
        }
        match &targets {
            Targets::Classes {
                labels,
                num_classes,
            } => {
                if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= *num_classes) {
                    return Err(Error::Index(format!(
                        "label {l} at sample {i} is not below the class count {num_classes}"
                    )));
                }
            }
            Targets::Values(v) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric("regression target".into()));
                }
            }
        }
        Ok(DatasetBatch { inputs, targets })
    }

    pub fn classification(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        DatasetBatch::new(
            inputs,
            Targets::Classes {
                labels,
                num_classes,
            },
        )
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Values(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Sub-batch made of the given sample indices (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<DatasetBatch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index(format!(
                "sample {bad} in a batch of {}",
                self.len()
            )));
        }
        DatasetBatch::new(
            self.inputs.select_rows(indices),
            self.targets.select(indices),
        )
    }

    pub(crate) fn with_inputs(&self, inputs: Tensor) -> Result<DatasetBatch> {
        DatasetBatch::new(inputs, self.targets.clone())
    }

    pub(crate) fn with_targets(&self, targets: Targets) -> Result<DatasetBatch> {
        DatasetBatch::new(self.inputs.clone(), targets)
    }
}

/// Intermediate values of one forward pass, kept for back-propagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input to each layer (`[N x fan_in]`).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer (`[N x fan_out]`).
    pre_activations: Vec<Vec<f64>>,
    /// Gated weights and biases actually used.
    effective: Vec<(Vec<f64>, Vec<f64>)>,
    batch_len: usize,
    logits: Tensor,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn batch_len(&self) -> usize {
        self.batch_len
    }
}

fn check_gates(params: &NetworkParams, gates: Option<&[f64]>) -> Result<()> {
    if let Some(g) = gates {
        if g.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gates for {} parameters",
                g.len(),
                params.len()
            )));
        }
    }
    Ok(())
}

fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Relu => z.max(0.0),
        Activation::Identity | Activation::SoftmaxOut => z,
    }
}

fn activation_slope(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Identity | Activation::SoftmaxOut => 1.0,
    }
}

/// Runs the network on raw inputs, keeping the intermediates.
pub fn forward_pass(
    params: &NetworkParams,
    gates: Option<&[f64]>,
    inputs: &Tensor,
) -> Result<ForwardPass> {
    check_gates(params, gates)?;
    if inputs.shape().len() != 2 || inputs.cols() != params.num_inputs() {
        return Err(Error::Shape(format!(
            "network expects [N x {}] inputs, got {:?}",
            params.num_inputs(),
            inputs.shape()
        )));
    }
    if !inputs.is_finite() {
        return Err(Error::Numeric("network input".into()));
    }
    let n = inputs.rows();
    let ranges = layer_ranges(params.specs());
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut effective = Vec::with_capacity(params.layers.len());
    let mut current = inputs.values().to_vec();

    for ((spec, layer), range) in params.specs.iter().zip(&params.layers).zip(&ranges) {
        let (w, b) = match gates {
            Some(g) => (
                layer
                    .weight
                    .values()
                    .iter()
                    .zip(&g[range.weights.clone()])
                    .map(|(w, g)| g * w)
                    .collect::<Vec<_>>(),
                layer
                    .bias
                    .values()
                    .iter()
                    .zip(&g[range.bias.clone()])
                    .map(|(b, g)| g * b)
                    .collect::<Vec<_>>(),
            ),
            None => (layer.weight.values().to_vec(), layer.bias.values().to_vec()),
        };
        let (fan_in, fan_out) = (spec.fan_in, spec.fan_out);
        let mut z = vec![0.0; n * fan_out];
        for (x, zrow) in current
            .chunks_exact(fan_in)
            .zip(z.chunks_exact_mut(fan_out))
        {
            for ((zo, wrow), bo) in zrow.iter_mut().zip(w.chunks_exact(fan_in)).zip(&b) {
                let mut acc = 0.0;
                for (wi, xi) in wrow.iter().zip(x) {
                    acc += wi * xi;
                }
                *zo = acc + bo;
            }
        }
        let a: Vec<f64> = z.iter().map(|&v| activate(spec.activation, v)).collect();
        layer_inputs.push(std::mem::replace(&mut current, a));
        pre_activations.push(z);
        effective.push((w, b));
    }

    if current.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("network output overflowed".into()));
    }
    let logits = Tensor::from_parts_unchecked(vec![n, params.num_outputs()], current);
    Ok(ForwardPass {
        layer_inputs,
        pre_activations,
        effective,
        batch_len: n,
        logits,
    })
}

/// Logits (pre-softmax outputs) of the optionally gated network.
pub fn forward(
    params: &NetworkParams,
    gates: Option<&[f64]>,
    batch: &DatasetBatch,
) -> Result<Tensor> {
    Ok(forward_pass(params, gates, batch.inputs())?.logits)
}

/// Gradient of a scalar with respect to every parameter and every gate,
/// in flattened parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub gates: Vec<f64>,
}

/// Back-propagates `d_logits` (`[N x outputs]`) through a recorded pass.
pub fn backprop(
    params: &NetworkParams,
    gates: Option<&[f64]>,
    pass: &ForwardPass,
    d_logits: &[f64],
) -> Result<Gradients> {
    check_gates(params, gates)?;
    let n = pass.batch_len;
    if d_logits.len() != n * params.num_outputs() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries, expected {}",
            d_logits.len(),
            n * params.num_outputs()
        )));
    }
    let m = params.len();
    let mut g_params = vec![0.0; m];
    let mut g_gates = vec![0.0; m];
    let ranges = layer_ranges(params.specs());
    let mut upstream = d_logits.to_vec();

    for li in (0..params.layers.len()).rev() {
        let spec = params.specs[li];
        let (fan_in, fan_out) = (spec.fan_in, spec.fan_out);
        let z = &pass.pre_activations[li];
        let x = &pass.layer_inputs[li];
        let (w_eff, _) = &pass.effective[li];

        let dz: Vec<f64> = upstream
            .iter()
            .zip(z)
            .map(|(u, &zv)| u * activation_slope(spec.activation, zv))
            .collect();

        let mut dw = vec![0.0; fan_out * fan_in];
        let mut db = vec![0.0; fan_out];
        for (dzrow, xrow) in dz.chunks_exact(fan_out).zip(x.chunks_exact(fan_in)) {
            for ((dwrow, dbo), &d) in dw.chunks_exact_mut(fan_in).zip(&mut db).zip(dzrow) {
                *dbo += d;
                if d != 0.0 {
                    for (dwi, xi) in dwrow.iter_mut().zip(xrow) {
                        *dwi += d * xi;
                    }
                }
            }
        }

        if li > 0 {
            let mut dx = vec![0.0; n * fan_in];
            for (dzrow, dxrow) in dz.chunks_exact(fan_out).zip(dx.chunks_exact_mut(fan_in)) {
                for (&d, wrow) in dzrow.iter().zip(w_eff.chunks_exact(fan_in)) {
                    if d != 0.0 {
                        for (dxi, wi) in dxrow.iter_mut().zip(wrow) {
                            *dxi += d * wi;
                        }
                    }
                }
            }
            upstream = dx;
        }

        let layer = &params.layers[li];
        let r = &ranges[li];
        for (k, (&d, &w)) in dw.iter().zip(layer.weight.values()).enumerate() {
            let idx = r.weights.start + k;
            let g = gates.map_or(1.0, |g| g[idx]);
            g_params[idx] = g * d;
            g_gates[idx] = w * d;
        }
        for (k, (&d, &b)) in db.iter().zip(layer.bias.values()).enumerate() {
            let idx = r.bias.start + k;
            let g = gates.map_or(1.0, |g| g[idx]);
            g_params[idx] = g * d;
            g_gates[idx] = b * d;
        }
    }

    Ok(Gradients {
        params: g_params,
        gates: g_gates,
    })
}

/// Row-wise log-softmax of a logits matrix, stabilised by the row maximum.
pub fn log_softmax_rows(logits: &Tensor) -> Vec<f64> {
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.values().chunks_exact(c) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|z| z - lse));
    }
    out
}

pub fn softmax_rows(logits: &Tensor) -> Vec<f64> {
    log_softmax_rows(logits).into_iter().map(f64::exp).collect()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Index(format!(
            "label {bad} with only {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean negative log-softmax probability of the true labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let c = logits.cols();
    let total: f64 = logits
        .values()
        .chunks_exact(c)
        .zip(labels)
        .map(|(row, &l)| log_sum_exp(row) - row[l])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Fraction of rows whose arg-max (lowest index on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let c = logits.cols();
    let correct = logits
        .values()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Task loss used for the supervised term of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskLoss {
    /// Mean softmax cross-entropy over class labels.
    CrossEntropy,
    /// Mean of `(y - f(x))^2 / 2` over single-output regression targets.
    SquaredError,
}

impl TaskLoss {
    pub fn for_targets(targets: &Targets) -> Self {
        match targets {
            Targets::Classes { .. } => TaskLoss::CrossEntropy,
            Targets::Values(_) => TaskLoss::SquaredError,
        }
    }
}

/// Task loss value and the gradient of the logits.
pub fn task_loss_upstream(
    logits: &Tensor,
    targets: &Targets,
    loss: TaskLoss,
) -> Result<(f64, Vec<f64>)> {
    let n = logits.rows() as f64;
    match (loss, targets) {
        (TaskLoss::CrossEntropy, Targets::Classes { labels, .. }) => {
            let value = cross_entropy(logits, labels)?;
            let c = logits.cols();
            let mut d = softmax_rows(logits);
            for (row, &l) in d.chunks_exact_mut(c).zip(labels) {
                row[l] -= 1.0;
                row.iter_mut().for_each(|v| *v /= n);
            }
            Ok((value, d))
        }
        (TaskLoss::SquaredError, Targets::Values(y)) => {
            if logits.cols() != 1 || logits.rows() != y.len() {
                return Err(Error::Shape(
                    "squared error needs one output per regression target".into(),
                ));
            }
            let mut value = 0.0;
            let d = logits
                .values()
                .iter()
                .zip(y)
                .map(|(f, t)| {
                    let r = f - t;
                    value += 0.5 * r * r;
                    r / n
                })
                .collect();
            Ok((value / n, d))
        }
        _ => Err(Error::Config(
            "task loss does not match the kind of targets".into(),
        )),
    }
}

/// Loss value and exact analytic gradients.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub loss: f64,
    pub grads: Gradients,
}

/// Exact gradients of `loss(forward(params, gates, batch))` with respect to
/// the parameters and the gates.
pub fn backward(
    params: &NetworkParams,
    gates: Option<&[f64]>,
    batch: &DatasetBatch,
    loss: TaskLoss,
) -> Result<LossGradients> {
    let pass = forward_pass(params, gates, batch.inputs())?;
    let (value, upstream) = task_loss_upstream(pass.logits(), batch.targets(), loss)?;
    let grads = backprop(params, gates, &pass, &upstream)?;
    Ok(LossGradients { loss: value, grads })
}

/// `params - learning_rate * grads`, element-wise over the flattened view.
pub fn sgd_step(
    params: &NetworkParams,
    grads: &[f64],
    learning_rate: f64,
) -> Result<NetworkParams> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::Domain(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (li, r) in layer_ranges(params.specs()).iter().enumerate() {
        if grads[r.weights.start..r.bias.end]
            .iter()
            .any(|g| !g.is_finite())
        {
            return Err(Error::Numeric(format!("gradient in layer {li}")));
        }
    }
    let updated: Vec<f64> = params
        .flatten()
        .iter()
        .zip(grads)
        .map(|(p, g)| p - learning_rate * g)
        .collect();
    let mut out = params.clone();
    out.set_flat(&updated)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: &[Vec<f64>], labels: Vec<usize>, classes: usize) -> DatasetBatch {
        DatasetBatch::classification(Tensor::from_rows(rows).unwrap(), labels, classes).unwrap()
    }

    #[test]
    fn identity_network_passes_inputs_through() {
        let specs = [LayerSpec::new(3, 3, Activation::Identity)];
        let mut flat = vec![0.0; 12];
        for i in 0..3 {
            flat[i * 3 + i] = 1.0;
        }
        let p = NetworkParams::from_flat(&specs, &flat).unwrap();
        let b = batch(&[vec![0.5, -2.0, 7.0], vec![1.0, 2.0, 3.0]], vec![0, 1], 3);
        let logits = forward(&p, None, &b).unwrap();
        assert_eq!(logits.values(), b.inputs().values());
    }

    #[test]
    fn zero_gates_leave_only_biases() {
        let specs = [LayerSpec::new(2, 2, Activation::SoftmaxOut)];
        let p = NetworkParams::from_flat(&specs, &[1.0, 2.0, 3.0, 4.0, 0.25, -0.5]).unwrap();
        let mut gates = vec![0.0; 6];
        gates[4] = 1.0;
        gates[5] = 1.0;
        let b = batch(&[vec![9.0, -3.0]], vec![0], 2);
        let logits = forward(&p, Some(&gates), &b).unwrap();
        assert_eq!(logits.values(), &[0.25, -0.5]);
    }

    #[test]
    fn hand_computed_two_layer_forward() {
        // 2-2-2, relu hidden layer.
        let specs = [
            LayerSpec::new(2, 2, Activation::Relu),
            LayerSpec::new(2, 2, Activation::SoftmaxOut),
        ];
        let flat = [
            0.5, -1.0, 2.0, 0.25, // W1
            0.1, -0.2, // b1
            1.0, -1.0, 0.5, 2.0, // W2
            0.0, 0.3, // b2
        ];
        let p = NetworkParams::from_flat(&specs, &flat).unwrap();
        let b = batch(&[vec![1.0, 2.0]], vec![1], 2);
        // h1 = relu(0.5 - 2 + 0.1) = relu(-1.4) = 0
        // h2 = relu(2 + 0.5 - 0.2) = 2.3
        // o1 = 1*0 - 1*2.3 + 0 = -2.3
        // o2 = 0.5*0 + 2*2.3 + 0.3 = 4.9
        let logits = forward(&p, None, &b).unwrap();
        assert!((logits.values()[0] - (-2.3)).abs() < 1e-15);
        assert!((logits.values()[1] - 4.9).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::from_rows(&[vec![0.3; 5]]).unwrap();
        assert!((cross_entropy(&uniform, &[2]).unwrap() - 5f64.ln()).abs() < 1e-14);

        let extreme = Tensor::from_rows(&[vec![1000.0, -1000.0]]).unwrap();
        let l = cross_entropy(&extreme, &[0]).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);

        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let e = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let expected = -(e[2] / (e[0] + e[1] + e[2])).ln();
        let got = cross_entropy(&t, &[2]).unwrap();
        assert!((got - expected).abs() < 1e-14);
        assert!((got - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(cross_entropy(&t, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn zero_weight_network_gradients() {
        let specs = [LayerSpec::new(2, 2, Activation::SoftmaxOut)];
        let p = NetworkParams::zeros(&specs).unwrap();
        let x = vec![1.5, -0.5];
        let b = batch(std::slice::from_ref(&x), vec![1], 2);
        let g = backward(&p, None, &b, TaskLoss::CrossEntropy)
            .unwrap()
            .grads;
        let expected_bias = [0.5, -0.5];
        assert_eq!(&g.params[4..6], &expected_bias);
        for o in 0..2 {
            for i in 0..2 {
                assert_eq!(g.params[o * 2 + i], expected_bias[o] * x[i]);
            }
        }
    }

    #[test]
    fn gated_out_weight_has_zero_param_gradient() {
        let specs = mlp_specs(3, &[4], 2, Activation::Relu, Activation::SoftmaxOut);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NetworkParams::init_he(&specs, &mut rng).unwrap();
        let mut gates = vec![1.0; p.len()];
        gates[0] = 0.0;
        let b = batch(&[vec![1.0, -1.0, 0.5], vec![0.2, 0.3, -2.0]], vec![0, 1], 2);
        let g = backward(&p, Some(&gates), &b, TaskLoss::CrossEntropy)
            .unwrap()
            .grads;
        assert_eq!(g.params[0], 0.0);
        assert!(g.gates[0] != 0.0);
    }

    #[test]
    fn sgd_examples() {
        let specs = [LayerSpec::new(1, 1, Activation::Identity)];
        let p = NetworkParams::from_flat(&specs, &[1.0, 2.0]).unwrap();
        let same = sgd_step(&p, &[0.0, 0.0], 0.3).unwrap();
        assert_eq!(same, p);
        let zero = sgd_step(&p, &[1.0, 2.0], 1.0).unwrap();
        assert_eq!(zero.flatten(), vec![0.0, 0.0]);
        let step = sgd_step(&p, &[0.5, -0.5], 0.1).unwrap();
        assert_eq!(step.flatten(), vec![0.95, 2.05]);
        assert!(matches!(
            sgd_step(&p, &[f64::NAN, 0.0], 0.1),
            Err(Error::Numeric(msg)) if msg.contains("layer 0")
        ));
        assert!(sgd_step(&p, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn topology_validation() {
        assert!(validate_topology(&[
            LayerSpec::new(2, 3, Activation::SoftmaxOut),
            LayerSpec::new(3, 2, Activation::Identity)
        ])
        .is_err());
        assert!(validate_topology(&[
            LayerSpec::new(2, 3, Activation::Relu),
            LayerSpec::new(4, 2, Activation::Identity)
        ])
        .is_err());
    }
}
