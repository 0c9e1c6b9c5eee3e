//! C ABI over the steinprune library.
//!
//! Every fallible function returns an [`SpStatus`] and writes results
//! through out-pointers. On failure the message is kept per thread and read
//! with [`sp_last_error_message`]. Handles are opaque, created by `*_new`,
//! `*_load` or a producing call, and released with the matching `*_free`.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use steinprune::data::{generate_blobs, load_checkpoint, save_checkpoint, Checkpoint};
use steinprune::net::{accuracy, forward, mlp_specs, Activation, DatasetBatch};
use steinprune::pruning::{extract_slab, magnitude_prune, MagnitudeCriterion, PruneMask};
use steinprune::reliability::{efficiency, EfficiencyInputs, NoiseCase};
use steinprune::svgd::{rbf_kernel, train, ParticleEnsemble, TrainConfig, TrainStatus};
use steinprune::tensor::Tensor;
use steinprune::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullArgument = 1,
    /// Shapes, ranges, configs and other caller mistakes.
    InvalidArgument = 2,
    Numeric = 3,
    /// Malformed checkpoint or data file.
    Format = 4,
    Io = 5,
    /// A Rust panic was caught; the handle arguments may be inconsistent.
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpNoiseCase {
    Clean = 0,
    ModelNoise = 1,
    DataNoise = 2,
    Both = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpTrainStatus {
    Completed = 0,
    Converged = 1,
    Diverged = 2,
    Paused = 3,
}

/// Labelled inputs.
pub struct SpDataset {
    inner: DatasetBatch,
}

/// Particle ensemble with its training config.
pub struct SpEnsemble {
    inner: ParticleEnsemble,
    config: TrainConfig,
}

/// Keep/drop flag per parameter.
pub struct SpMask {
    inner: PruneMask,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul bytes were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Numeric(_) => SpStatus::Numeric,
            Error::Format { .. } => SpStatus::Format,
            Error::Io(_) => SpStatus::Io,
            _ => SpStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(SpStatus::NullArgument, format!("{name} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(SpStatus::InvalidArgument, message.into())
}

/// Runs `f`, records any failure or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            SpStatus::Panic
        }
    }
}

unsafe fn reference<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn string(p: *const c_char, name: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| invalid(format!("{name} is not UTF-8")))
}

/// Null means defaults.
unsafe fn train_config(json: *const c_char) -> Result<TrainConfig, Failure> {
    if json.is_null() {
        return Ok(TrainConfig::default());
    }
    let text = string(json, "config_json")?;
    let config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| invalid(format!("config_json: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn into_handle<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Gaussian class clusters at distance `separation` (in cluster stds).
///
/// # Safety
/// `out_dataset` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
    out_dataset: *mut *mut SpDataset,
) -> SpStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let inner = generate_blobs(classes, per_class, dim, separation, seed)?;
        *slot = into_handle(SpDataset { inner });
        Ok(())
    })
}

/// Copies a row-major `rows x cols` input matrix and one label per row.
///
/// # Safety
/// `inputs` must point to `rows * cols` values, `labels` to `rows` values,
/// and `out_dataset` to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_from_arrays(
    inputs: *const f64,
    rows: usize,
    cols: usize,
    labels: *const u32,
    num_classes: usize,
    out_dataset: *mut *mut SpDataset,
) -> SpStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| invalid("rows * cols overflows"))?;
        let x = slice(inputs, count, "inputs")?.to_vec();
        let y = slice(labels, rows, "labels")?
            .iter()
            .map(|&l| l as usize)
            .collect();
        let inner =
            DatasetBatch::classification(Tensor::new(vec![rows, cols], x)?, y, num_classes)?;
        *slot = into_handle(SpDataset { inner });
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_len(
    dataset: *const SpDataset,
    out_len: *mut usize,
) -> SpStatus {
    guard(|| {
        *out(out_len, "out_len")? = reference(dataset, "dataset")?.inner.len();
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_free(dataset: *mut SpDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// New ensemble of a ReLU MLP with layer widths `sizes[0..n_sizes]` (input
/// first, classes last). `config_json` is a training config as JSON, or
/// null for defaults; it seeds the initialization and is kept for training.
///
/// # Safety
/// `sizes` must point to `n_sizes` values; `config_json` must be null or a
/// nul-terminated string; `out_ensemble` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_ensemble_new(
    sizes: *const usize,
    n_sizes: usize,
    particles: usize,
    config_json: *const c_char,
    out_ensemble: *mut *mut SpEnsemble,
) -> SpStatus {
    guard(|| {
        let slot = out(out_ensemble, "out_ensemble")?;
        let sizes = slice(sizes, n_sizes, "sizes")?;
        if sizes.len() < 2 {
            return Err(invalid(
                "a network needs at least an input and an output width",
            ));
        }
        let config = train_config(config_json)?;
        let specs = mlp_specs(
            sizes[0],
            &sizes[1..sizes.len() - 1],
            sizes[sizes.len() - 1],
            Activation::Relu,
            Activation::SoftmaxOut,
        );
        let inner = ParticleEnsemble::init(&specs, particles, &config)?;
        *slot = into_handle(SpEnsemble { inner, config });
        Ok(())
    })
}

/// Trains in place with the ensemble's config. On divergence the last good
/// state is kept and the status reports it.
///
/// # Safety
/// `ensemble` and `dataset` must be live handles; `out_status` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_ensemble_train(
    ensemble: *mut SpEnsemble,
    dataset: *const SpDataset,
    out_status: *mut SpTrainStatus,
) -> SpStatus {
    guard(|| {
        let status_slot = out(out_status, "out_status")?;
        let data = &reference(dataset, "dataset")?.inner;
        let handle = out(ensemble, "ensemble")?;
        let outcome = train(handle.inner.clone(), data, &handle.config)?;
        handle.inner = outcome.ensemble;
        *status_slot = match outcome.status {
            TrainStatus::Completed => SpTrainStatus::Completed,
            TrainStatus::Converged => SpTrainStatus::Converged,
            TrainStatus::Diverged => SpTrainStatus::Diverged,
            TrainStatus::Paused => SpTrainStatus::Paused,
        };
        Ok(())
    })
}

/// # Safety
/// `ensemble` must be a live handle; out-pointers writable.
#[no_mangle]
pub unsafe extern "C" fn sp_ensemble_shape(
    ensemble: *const SpEnsemble,
    out_particles: *mut usize,
    out_params: *mut usize,
) -> SpStatus {
    guard(|| {
        let e = &reference(ensemble, "ensemble")?.inner;
        *out(out_particles, "out_particles")? = e.len();
        *out(out_params, "out_params")? = e.particles()[0].params.len();
        Ok(())
    })
}

/// Accuracy of one particle with hardened gates.
///
/// # Safety
/// `ensemble` and `dataset` must be live handles; `out_accuracy` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_ensemble_accuracy(
    ensemble: *const SpEnsemble,
    dataset: *const SpDataset,
    particle: usize,
    out_accuracy: *mut f64,
) -> SpStatus {
    guard(|| {
        let slot = out(out_accuracy, "out_accuracy")?;
        let e = &reference(ensemble, "ensemble")?.inner;
        let data = &reference(dataset, "dataset")?.inner;
        let p = e
            .particles()
            .get(particle)
            .ok_or_else(|| invalid(format!("particle {particle} of {}", e.len())))?;
        let labels = data
            .labels()
            .ok_or_else(|| invalid("dataset has no class labels"))?;
        let gates = p.gates.hardened();
        *slot = accuracy(&forward(&p.params, Some(&gates), data)?, labels)?;
        Ok(())
    })
}

/// Mean over coordinates of the inter-particle variance of the weights.
///
/// # Safety
/// `ensemble` must be a live handle; `out_dispersion` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_ensemble_dispersion(
    ensemble: *const SpEnsemble,
    out_dispersion: *mut f64,
) -> SpStatus {
    guard(|| {
        *out(out_dispersion, "out_dispersion")? =
            reference(ensemble, "ensemble")?.inner.dispersion();
        Ok(())
    })
}

/// Writes a checkpoint with the ensemble and its config.
///
/// # Safety
/// `ensemble` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sp_ensemble_save(
    ensemble: *const SpEnsemble,
    path: *const c_char,
) -> SpStatus {
    guard(|| {
        let handle = reference(ensemble, "ensemble")?;
        let path = PathBuf::from(string(path, "path")?);
        let ck = Checkpoint {
            ensemble: handle.inner.clone(),
            progress: None,
            normalization: None,
            config_text: serde_json::to_string(&handle.config).expect("train config serializes"),
            mask: None,
        };
        save_checkpoint(&path, &ck)?;
        Ok(())
    })
}

/// Reads a checkpoint. Its stored training config is used when it parses;
/// otherwise the defaults.
///
/// # Safety
/// `path` must be a nul-terminated string; `out_ensemble` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_ensemble_load(
    path: *const c_char,
    out_ensemble: *mut *mut SpEnsemble,
) -> SpStatus {
    guard(|| {
        let slot = out(out_ensemble, "out_ensemble")?;
        let ck = load_checkpoint(&PathBuf::from(string(path, "path")?))?;
        let config = serde_json::from_str(&ck.config_text).unwrap_or_default();
        *slot = into_handle(SpEnsemble {
            inner: ck.ensemble,
            config,
        });
        Ok(())
    })
}

/// # Safety
/// `ensemble` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_ensemble_free(ensemble: *mut SpEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// Slab of particle 0: parameters whose inclusion probability reaches
/// `gate_threshold`.
///
/// # Safety
/// `ensemble` must be a live handle; `out_mask` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_prune_slab(
    ensemble: *const SpEnsemble,
    gate_threshold: f64,
    out_mask: *mut *mut SpMask,
) -> SpStatus {
    guard(|| {
        let slot = out(out_mask, "out_mask")?;
        let e = &reference(ensemble, "ensemble")?.inner;
        if !(gate_threshold > 0.0 && gate_threshold < 1.0) {
            return Err(invalid(format!(
                "gate threshold {gate_threshold} is outside (0, 1)"
            )));
        }
        let (inner, _) = extract_slab(&e.particles()[0], gate_threshold)?;
        *slot = into_handle(SpMask { inner });
        Ok(())
    })
}

/// Drops the `round(sparsity * M)` smallest-magnitude parameters of
/// particle 0.
///
/// # Safety
/// `ensemble` must be a live handle; `out_mask` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_prune_magnitude(
    ensemble: *const SpEnsemble,
    sparsity: f64,
    out_mask: *mut *mut SpMask,
) -> SpStatus {
    guard(|| {
        let slot = out(out_mask, "out_mask")?;
        let e = &reference(ensemble, "ensemble")?.inner;
        let m = magnitude_prune(
            &e.particles()[0].params.flatten(),
            MagnitudeCriterion::Sparsity(sparsity),
        )?;
        *slot = into_handle(SpMask { inner: m.mask });
        Ok(())
    })
}

/// # Safety
/// `mask` must be a live handle; out-pointers writable.
#[no_mangle]
pub unsafe extern "C" fn sp_mask_stats(
    mask: *const SpMask,
    out_len: *mut usize,
    out_sparsity: *mut f64,
) -> SpStatus {
    guard(|| {
        let m = &reference(mask, "mask")?.inner;
        *out(out_len, "out_len")? = m.len();
        *out(out_sparsity, "out_sparsity")? = m.sparsity();
        Ok(())
    })
}

/// Copies the keep flags (1 kept, 0 dropped); `len` must equal the mask
/// length.
///
/// # Safety
/// `mask` must be a live handle; `out_keep` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sp_mask_copy_keep(
    mask: *const SpMask,
    out_keep: *mut u8,
    len: usize,
) -> SpStatus {
    guard(|| {
        let m = &reference(mask, "mask")?.inner;
        if len != m.len() {
            return Err(invalid(format!(
                "buffer holds {len} flags but the mask has {}",
                m.len()
            )));
        }
        if out_keep.is_null() {
            return Err(null("out_keep"));
        }
        let dst = std::slice::from_raw_parts_mut(out_keep, len);
        for (d, &k) in dst.iter_mut().zip(m.keep()) {
            *d = u8::from(k);
        }
        Ok(())
    })
}

/// # Safety
/// `mask` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_mask_free(mask: *mut SpMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Estimation efficiency `crlb / variance` for one noise case.
///
/// # Safety
/// `out_efficiency` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_efficiency(
    noise_case: SpNoiseCase,
    eps2: f64,
    alpha2: f64,
    beta2_noise: f64,
    out_efficiency: *mut f64,
) -> SpStatus {
    guard(|| {
        let slot = out(out_efficiency, "out_efficiency")?;
        let case = match noise_case {
            SpNoiseCase::Clean => NoiseCase::Clean,
            SpNoiseCase::ModelNoise => NoiseCase::ModelNoise,
            SpNoiseCase::DataNoise => NoiseCase::DataNoise,
            SpNoiseCase::Both => NoiseCase::Both,
        };
        *slot = efficiency(case, &EfficiencyInputs::new(eps2, alpha2, beta2_noise))?.efficiency;
        Ok(())
    })
}

/// `exp(-|a - b|^2 / h)` for two vectors of length `len`.
///
/// # Safety
/// `a` and `b` must point to `len` values; `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_rbf_kernel(
    a: *const f64,
    b: *const f64,
    len: usize,
    bandwidth: f64,
    out_value: *mut f64,
) -> SpStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        let (k, _) = rbf_kernel(slice(a, len, "a")?, slice(b, len, "b")?, bandwidth)?;
        *slot = k;
        Ok(())
    })
}
