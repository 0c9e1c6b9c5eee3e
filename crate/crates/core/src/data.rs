//! Dataset loading, synthetic generators, corruption transforms and binary
//! persistence of checkpoints and masks.
//!
//! Checkpoint container: the magic `DLLPCKPT`, a little-endian `u32`
//! version, then sections of `u32 tag | u64 length | payload | u32 CRC32 of
//! the payload`. All numbers are little-endian; floats are stored as their
//! IEEE-754 bit patterns, so round trips are bit-exact.
//!
//! Mask file: the magic `DLLPMASK`, `u32` version, `u64` parameter count,
//! the keep flags packed eight per byte (least significant bit first), and a
//! CRC32 of every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::GateSet;
use crate::net::{Activation, DatasetBatch, LayerSpec, NetworkParams, Targets};
use crate::priors::NoiseScalars;
use crate::pruning::{MaskOrigin, PruneMask};
use crate::rng::{derive_seed, RngState};
use crate::svgd::{Particle, ParticleEnsemble, TrainProgress};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, format!("truncated while reading {what}")))
}

/// Parses an IDX image/label pair from memory. Pixels are scaled to [0, 1].
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<DatasetBatch> {
    let magic = read_be_u32(images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("image magic is {magic:#010x}, expected 0x00000803"),
        ));
    }
    let n = read_be_u32(images, 4, "image count")? as usize;
    let rows = read_be_u32(images, 8, "row count")? as usize;
    let cols = read_be_u32(images, 12, "column count")? as usize;
    let dim = rows * cols;
    let body = n * dim;
    if images.len() < 16 + body {
        return Err(Error::format(
            images.len() as u64,
            format!(
                "image file truncated: {n} images of {dim} pixels need {} bytes",
                16 + body
            ),
        ));
    }
    let magic = read_be_u32(labels, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("label magic is {magic:#010x}, expected 0x00000801"),
        ));
    }
    let ln = read_be_u32(labels, 4, "label count")? as usize;
    if ln != n {
        return Err(Error::format(4, format!("{ln} labels for {n} images")));
    }
    if labels.len() < 8 + n {
        return Err(Error::format(labels.len() as u64, "label file truncated"));
    }
    if n == 0 {
        return Err(Error::format(4, "no samples"));
    }
    let values: Vec<f64> = images[16..16 + body]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = labels[8..8 + n].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    DatasetBatch::classification(Tensor::new(vec![n, dim], values)?, labels, classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetBatch> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Parses comma-separated rows of `label,feature,...`. Errors carry the byte
/// offset of the offending line.
pub fn parse_csv(text: &str, has_header: bool, num_classes: Option<usize>) -> Result<DatasetBatch> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0usize;
    let mut width = None;
    for (line_no, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if (has_header && line_no == 0) || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields
            .next()
            .and_then(|f| f.trim().parse::<usize>().ok())
            .ok_or_else(|| {
                Error::format(
                    start as u64,
                    format!("line {} has no integer label", line_no + 1),
                )
            })?;
        let feats = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::format(start as u64, format!("line {}: {e}", line_no + 1)))?;
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                start as u64,
                format!("line {} has a non-finite feature", line_no + 1),
            ));
        }
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(Error::format(
                    start as u64,
                    format!(
                        "line {} has {} features, expected {w}",
                        line_no + 1,
                        feats.len()
                    ),
                ))
            }
            _ => {}
        }
        if let Some(c) = num_classes {
            if label >= c {
                return Err(Error::format(
                    start as u64,
                    format!("line {}: label {label} is not below {c}", line_no + 1),
                ));
            }
        }
        rows.push(feats);
        labels.push(label);
    }
    if rows.is_empty() || width == Some(0) {
        return Err(Error::format(offset as u64, "no samples with features"));
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1).max(2));
    DatasetBatch::classification(Tensor::from_rows(&rows)?, labels, classes)
}

pub fn load_csv(path: &Path, has_header: bool, num_classes: Option<usize>) -> Result<DatasetBatch> {
    parse_csv(&fs::read_to_string(path)?, has_header, num_classes)
}

/// Per-feature affine map `(x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Standardization fitted to `batch`; constant features keep scale 1.
    pub fn standardize(batch: &DatasetBatch) -> Self {
        let (n, dim) = (batch.len(), batch.dim());
        let x = batch.inputs().values();
        let mut shift = vec![0.0; dim];
        let mut scale = vec![0.0; dim];
        for row in x.chunks_exact(dim) {
            shift.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        shift.iter_mut().for_each(|s| *s /= n as f64);
        for row in x.chunks_exact(dim) {
            for ((q, v), m) in scale.iter_mut().zip(row).zip(&shift) {
                *q += (v - m) * (v - m);
            }
        }
        for q in &mut scale {
            let sd = (*q / n as f64).sqrt();
            *q = if sd > 0.0 { sd } else { 1.0 };
        }
        Normalization { shift, scale }
    }

    pub fn apply(&self, batch: &DatasetBatch) -> Result<DatasetBatch> {
        let dim = batch.dim();
        if self.shift.len() != dim || self.scale.len() != dim {
            return Err(Error::Shape(format!(
                "normalization for {} features applied to {dim}",
                self.shift.len()
            )));
        }
        let mut values = batch.inputs().values().to_vec();
        for row in values.chunks_exact_mut(dim) {
            for ((v, s), q) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - s) / q;
            }
        }
        batch.with_inputs(Tensor::new(batch.inputs().shape().to_vec(), values)?)
    }
}

/// Class centres at the vertices of a regular simplex with pairwise
/// distance `separation`, embedded in the first `classes - 1` coordinates.
fn simplex_centres(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    // Centred standard basis vectors e_c - 1/k span a (k-1)-space; an
    // orthonormal basis of it gives coordinates for the vertices.
    let k = classes;
    let centred: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            (0..k)
                .map(|j| if j == c { 1.0 } else { 0.0 } - 1.0 / k as f64)
                .collect()
        })
        .collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in &centred {
        let mut u = v.clone();
        for b in &basis {
            let dot: f64 = u.iter().zip(b).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 && basis.len() < k - 1 {
            basis.push(u.into_iter().map(|a| a / norm).collect());
        }
    }
    // Vertices of the centred simplex are sqrt(2) apart.
    let s = separation / std::f64::consts::SQRT_2;
    centred
        .iter()
        .map(|v| {
            let mut c = vec![0.0; dim];
            for (slot, b) in c.iter_mut().zip(&basis) {
                *slot = s * v.iter().zip(b).map(|(a, b)| a * b).sum::<f64>();
            }
            c
        })
        .collect()
}

/// Unit-variance Gaussian clusters at simplex vertices `separation` apart.
/// Samples are interleaved by class.
pub fn generate_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<DatasetBatch> {
    if classes < 2 {
        return Err(Error::Config("blobs need at least 2 classes".into()));
    }
    if dim + 1 < classes {
        return Err(Error::Config(format!(
            "{classes} simplex vertices need at least {} dimensions, got {dim}",
            classes - 1
        )));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::Config(format!(
            "separation must be >= 0, got {separation}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Precondition(
            "blobs with zero samples per class".into(),
        ));
    }
    let centres = simplex_centres(classes, dim, separation);
    let mut rng = RngState::new(seed, 0);
    let mut values = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (c, centre) in centres.iter().enumerate() {
            for mu in centre {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(mu + z);
            }
            labels.push(c);
        }
    }
    DatasetBatch::classification(
        Tensor::new(vec![classes * per_class, dim], values)?,
        labels,
        classes,
    )
}

/// `y = w . x + noise` with `x, w ~ N(0, I)` drawn from `seed`.
pub fn generate_linear(n: usize, dim: usize, noise_std: f64, seed: u64) -> Result<DatasetBatch> {
    if n == 0 || dim == 0 {
        return Err(Error::Precondition(
            "linear data needs samples and features".into(),
        ));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Config("noise_std must be >= 0".into()));
    }
    let mut rng = RngState::new(seed, 0);
    let w: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut values = Vec::with_capacity(n * dim);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e: f64 = StandardNormal.sample(&mut rng);
        ys.push(x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + noise_std * e);
        values.extend(x);
    }
    DatasetBatch::new(Tensor::new(vec![n, dim], values)?, Targets::Values(ys))
}

/// Adds i.i.d. `N(0, std^2)` to every input; targets are unchanged.
pub fn corrupt_gaussian(batch: &DatasetBatch, std: f64, seed: u64) -> Result<DatasetBatch> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Domain(format!("noise std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(batch.clone());
    }
    let mut rng = RngState::new(seed, 0);
    let values: Vec<f64> = batch
        .inputs()
        .values()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + std * z
        })
        .collect();
    batch.with_inputs(Tensor::new(batch.inputs().shape().to_vec(), values)?)
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut RngState::new(seed, 0));
    idx
}

/// `round(fraction * N)` samples (at least one), kept in original order.
pub fn subsample(batch: &DatasetBatch, fraction: f64, seed: u64) -> Result<DatasetBatch> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!(
            "fraction {fraction} is not in (0, 1]"
        )));
    }
    let keep = ((fraction * batch.len() as f64).round() as usize).clamp(1, batch.len());
    let mut idx = permutation(batch.len(), seed);
    idx.truncate(keep);
    idx.sort_unstable();
    batch.select(&idx)
}

/// Splits off `holdout` of the samples (at least one in each part).
pub fn split(
    batch: &DatasetBatch,
    holdout: f64,
    seed: u64,
) -> Result<(DatasetBatch, DatasetBatch)> {
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(Error::Domain(format!(
            "holdout fraction {holdout} is not in (0, 1)"
        )));
    }
    if batch.len() < 2 {
        return Err(Error::Precondition("cannot split a single sample".into()));
    }
    let n_test = ((holdout * batch.len() as f64).round() as usize).clamp(1, batch.len() - 1);
    let idx = permutation(batch.len(), seed);
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((batch.select(&train)?, batch.select(&test)?))
}

/// Randomly permutes the targets, destroying the input-label relation.
pub fn shuffle_targets(batch: &DatasetBatch, seed: u64) -> Result<DatasetBatch> {
    let idx = permutation(batch.len(), derive_seed(seed, 7));
    let targets = match batch.targets() {
        Targets::Classes {
            labels,
            num_classes,
        } => Targets::Classes {
            labels: idx.iter().map(|&i| labels[i]).collect(),
            num_classes: *num_classes,
        },
        Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
    };
    batch.with_targets(targets)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DLLPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MASK_MAGIC: &[u8; 8] = b"DLLPMASK";
pub const MASK_VERSION: u32 = 1;

const TAG_LAYERS: u32 = 1;
const TAG_PARTICLES: u32 = 2;
const TAG_RNG: u32 = 3;
const TAG_PROGRESS: u32 = 4;
const TAG_NORMALIZATION: u32 = 5;
const TAG_CONFIG: u32 = 6;
const TAG_MASK: u32 = 7;
/// Empty closing section; a file cut at a section boundary lacks it.
const TAG_END: u32 = 8;

/// Everything needed to evaluate or resume a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub ensemble: ParticleEnsemble,
    pub progress: Option<TrainProgress>,
    pub normalization: Option<Normalization>,
    /// Configuration text the run was started from.
    pub config_text: String,
    pub mask: Option<PruneMask>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Offset of `bytes[0]` in the file.
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        Reader {
            bytes,
            pos: 0,
            base,
        }
    }
    fn offset(&self) -> u64 {
        (self.base + self.pos) as u64
    }
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::format(
                self.offset(),
                format!("truncated while reading {what}"),
            )),
        }
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(
            self.take(16, what)?.try_into().expect("16 bytes"),
        ))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(self.offset(), "length overflow"))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.offset();
        usize::try_from(self.u64(what)?)
            .map_err(|_| Error::format(at, format!("{what} does not fit in memory")))
    }
    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!("trailing bytes in {what}"),
            ));
        }
        Ok(())
    }
}

fn section(out: &mut Writer, tag: u32, payload: &[u8]) {
    out.u32(tag);
    out.u64(payload.len() as u64);
    out.0.extend_from_slice(payload);
    out.u32(crc32fast::hash(payload));
}

fn pack_bits(keep: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; keep.len().div_ceil(8)];
    for (i, &k) in keep.iter().enumerate() {
        if k {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], m: usize) -> Vec<bool> {
    (0..m).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Serializes a checkpoint. Ensembles below two particles are refused.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let ens = &ck.ensemble;
    if ens.len() < 2 {
        return Err(Error::Precondition(format!(
            "refusing to save an ensemble of {} particles",
            ens.len()
        )));
    }
    let mut out = Writer(Vec::new());
    out.0.extend_from_slice(CHECKPOINT_MAGIC);
    out.u32(CHECKPOINT_VERSION);

    let mut p = Writer(Vec::new());
    p.u32(ens.specs().len() as u32);
    for s in ens.specs() {
        p.u64(s.fan_in as u64);
        p.u64(s.fan_out as u64);
        p.u8(s.activation.code());
    }
    section(&mut out, TAG_LAYERS, &p.0);

    let m = ens.particles()[0].params.len();
    let mut p = Writer(Vec::new());
    p.u32(ens.len() as u32);
    p.u64(m as u64);
    for part in ens.particles() {
        p.f64s(&part.params.flatten());
        p.f64s(part.gates.logits());
        p.f64(part.noise.d);
        p.f64(part.noise.lambda);
        p.f64(part.noise.epsilon_spike);
    }
    section(&mut out, TAG_PARTICLES, &p.0);

    if let Some(pr) = &ck.progress {
        let mut p = Writer(Vec::new());
        p.u32(pr.gate_rngs.len() as u32);
        for r in &pr.gate_rngs {
            p.u64(r.seed());
            p.u64(r.stream());
            p.u128(r.word_pos());
        }
        section(&mut out, TAG_RNG, &p.0);

        let mut p = Writer(Vec::new());
        p.u64(pr.step);
        p.u64(pr.epoch);
        p.f64(pr.best_loss);
        p.u32(pr.plateau_count);
        p.u32(pr.gate_rms.len() as u32);
        p.u64(m as u64);
        for r in &pr.gate_rms {
            if r.len() != m {
                return Err(Error::Shape("gate optimizer state length".into()));
            }
            p.f64s(r);
        }
        section(&mut out, TAG_PROGRESS, &p.0);
    }

    if let Some(nm) = &ck.normalization {
        let mut p = Writer(Vec::new());
        p.u64(nm.shift.len() as u64);
        p.f64s(&nm.shift);
        p.f64s(&nm.scale);
        section(&mut out, TAG_NORMALIZATION, &p.0);
    }

    section(&mut out, TAG_CONFIG, ck.config_text.as_bytes());

    if let Some(mask) = &ck.mask {
        let mut p = Writer(Vec::new());
        p.u8(mask.origin().code());
        p.u64(mask.len() as u64);
        p.0.extend_from_slice(&pack_bits(mask.keep()));
        section(&mut out, TAG_MASK, &p.0);
    }
    section(&mut out, TAG_END, &[]);
    Ok(out.0)
}

/// Weights, gate logits and `[d, lambda, epsilon]` of one particle.
type RawParticle = (Vec<f64>, Vec<f64>, [f64; 3]);
/// Step, epoch, best loss, plateau count and gate optimizer state.
type RawProgress = (u64, u64, f64, u32, Vec<Vec<f64>>);

/// Parses a checkpoint, verifying the version and every section checksum.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, 0);
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            8,
            format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }

    let mut specs: Option<Vec<LayerSpec>> = None;
    let mut particles_raw: Option<(usize, usize, Vec<RawParticle>)> = None;
    let mut rngs: Option<Vec<RngState>> = None;
    let mut progress_raw: Option<RawProgress> = None;
    let mut normalization = None;
    let mut config_text = None;
    let mut mask = None;
    let mut ended = false;

    while r.pos < bytes.len() {
        if ended {
            return Err(Error::format(r.offset(), "data after the closing section"));
        }
        let tag_at = r.offset();
        let tag = r.u32("section tag")?;
        let len = r.usize("section length")?;
        let payload_at = r.pos;
        let payload = r.take(len, "section payload")?;
        let crc_at = r.offset();
        let crc = r.u32("section checksum")?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::format(
                crc_at,
                format!("checksum mismatch in section {tag}"),
            ));
        }
        let mut p = Reader::new(payload, payload_at);
        match tag {
            TAG_LAYERS => {
                let n = p.u32("layer count")? as usize;
                let mut v = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let fan_in = p.usize("fan_in")?;
                    let fan_out = p.usize("fan_out")?;
                    let at = p.offset();
                    let act = Activation::from_code(p.u8("activation")?)
                        .ok_or_else(|| Error::format(at, "unknown activation code"))?;
                    v.push(LayerSpec::new(fan_in, fan_out, act));
                }
                p.finish("layers")?;
                specs = Some(v);
            }
            TAG_PARTICLES => {
                let n = p.u32("particle count")? as usize;
                let m = p.usize("parameter count")?;
                let mut v = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let theta = p.f64s(m, "weights")?;
                    let logits = p.f64s(m, "gate logits")?;
                    let s = [p.f64("d")?, p.f64("lambda")?, p.f64("epsilon")?];
                    v.push((theta, logits, s));
                }
                p.finish("particles")?;
                particles_raw = Some((n, m, v));
            }
            TAG_RNG => {
                let n = p.u32("stream count")? as usize;
                let mut v = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let seed = p.u64("seed")?;
                    let stream = p.u64("stream")?;
                    let pos = p.u128("word position")?;
                    v.push(RngState::restore(seed, stream, pos));
                }
                p.finish("rng")?;
                rngs = Some(v);
            }
            TAG_PROGRESS => {
                let step = p.u64("step")?;
                let epoch = p.u64("epoch")?;
                let best = p.f64("best loss")?;
                let plateau = p.u32("plateau count")?;
                let n = p.u32("optimizer count")? as usize;
                let m = p.usize("optimizer length")?;
                let mut rms = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    rms.push(p.f64s(m, "gate optimizer state")?);
                }
                p.finish("progress")?;
                progress_raw = Some((step, epoch, best, plateau, rms));
            }
            TAG_NORMALIZATION => {
                let d = p.usize("feature count")?;
                let shift = p.f64s(d, "shift")?;
                let scale = p.f64s(d, "scale")?;
                p.finish("normalization")?;
                normalization = Some(Normalization { shift, scale });
            }
            TAG_CONFIG => {
                config_text = Some(String::from_utf8(payload.to_vec()).map_err(|_| {
                    Error::format(payload_at as u64, "configuration text is not UTF-8")
                })?);
            }
            TAG_MASK => {
                let at = p.offset();
                let origin = MaskOrigin::from_code(p.u8("mask origin")?)
                    .ok_or_else(|| Error::format(at, "unknown mask origin"))?;
                let m = p.usize("mask length")?;
                let bits = p.take(m.div_ceil(8), "mask bits")?;
                p.finish("mask")?;
                mask = Some(PruneMask::new(unpack_bits(bits, m), origin));
            }
            TAG_END => {
                p.finish("closing section")?;
                ended = true;
            }
            other => {
                return Err(Error::format(
                    tag_at,
                    format!("unknown section tag {other}"),
                ))
            }
        }
    }
    if !ended {
        return Err(Error::format(
            bytes.len() as u64,
            "truncated: no closing section",
        ));
    }

    let specs = specs.ok_or_else(|| Error::format(bytes.len() as u64, "missing layer section"))?;
    let (_, m, raw) = particles_raw
        .ok_or_else(|| Error::format(bytes.len() as u64, "missing particle section"))?;
    let particles = raw
        .into_iter()
        .map(|(theta, logits, s)| {
            if theta.len() != m {
                return Err(Error::Shape("particle length".into()));
            }
            Ok(Particle {
                params: NetworkParams::from_flat(&specs, &theta)?,
                gates: GateSet::from_logits(logits)?,
                noise: NoiseScalars::with_epsilon(s[0], s[1], s[2])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ensemble = ParticleEnsemble::new(particles)?;
    let progress = match (progress_raw, rngs) {
        (Some((step, epoch, best_loss, plateau_count, gate_rms)), Some(gate_rngs)) => {
            Some(TrainProgress {
                step,
                epoch,
                best_loss,
                plateau_count,
                gate_rngs,
                gate_rms,
            })
        }
        (None, None) => None,
        _ => {
            return Err(Error::format(
                bytes.len() as u64,
                "progress and rng sections must appear together",
            ))
        }
    };
    if let Some(mk) = &mask {
        if mk.len() != m {
            return Err(Error::Shape(
                "mask length differs from the parameter count".into(),
            ));
        }
    }
    Ok(Checkpoint {
        ensemble,
        progress,
        normalization,
        config_text: config_text
            .ok_or_else(|| Error::format(bytes.len() as u64, "missing configuration section"))?,
        mask,
    })
}

/// Writes `bytes` through a synced temporary file renamed into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn encode_mask(mask: &PruneMask) -> Vec<u8> {
    let mut out = Writer(Vec::new());
    out.0.extend_from_slice(MASK_MAGIC);
    out.u32(MASK_VERSION);
    out.u64(mask.len() as u64);
    out.0.extend_from_slice(&pack_bits(mask.keep()));
    let crc = crc32fast::hash(&out.0);
    out.u32(crc);
    out.0
}

/// Parses a mask file; the origin is not stored and must be supplied.
pub fn decode_mask(bytes: &[u8], origin: MaskOrigin) -> Result<PruneMask> {
    let mut r = Reader::new(bytes, 0);
    if r.take(8, "magic")? != MASK_MAGIC {
        return Err(Error::format(0, "not a mask file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != MASK_VERSION {
        return Err(Error::format(
            8,
            format!("unsupported mask version {version}, expected {MASK_VERSION}"),
        ));
    }
    let m = r.usize("mask length")?;
    let bits = r.take(m.div_ceil(8), "mask bits")?;
    let body_end = r.pos;
    let crc_at = r.offset();
    let crc = r.u32("checksum")?;
    r.finish("mask file")?;
    if crc32fast::hash(&bytes[..body_end]) != crc {
        return Err(Error::format(crc_at, "mask checksum mismatch"));
    }
    Ok(PruneMask::new(unpack_bits(bits, m), origin))
}

pub fn save_mask(path: &Path, mask: &PruneMask) -> Result<()> {
    write_atomic(path, &encode_mask(mask))
}

pub fn load_mask(path: &Path, origin: MaskOrigin) -> Result<PruneMask> {
    decode_mask(&fs::read(path)?, origin)
}
