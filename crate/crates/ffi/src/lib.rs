//! C ABI over the `fedkernel` crate.
//!
//! Datasets and trained models are opaque handles owned by the caller and
//! released with their `*_free` function. Every fallible call returns an
//! [`FkStatus`]; on failure [`fk_last_error`] describes what went wrong on the
//! calling thread. Panics are caught at the boundary and reported as
//! `FK_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nalgebra::{DMatrix, DVector};

use fedkernel::datagen::{self, Layout, Noise, ScenarioSpec};
use fedkernel::engine::{run_training, Params};
use fedkernel::harness::{self, ExperimentConfig};
use fedkernel::{spectral, Algorithm, AlgorithmConfig, ClientData, Error, FederatedDataset, KernelSpec};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    EmptyInput = 4,
    Unsupported = 5,
    Config = 6,
    Unstable = 7,
    Numeric = 8,
    Degenerate = 9,
    EmptySelection = 10,
    Io = 11,
    Parse = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FkFamily {
    LinearHomogeneous = 0,
    Heterogeneous = 1,
    Subspace = 2,
    Chebyshev = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FkLayout {
    Anchored = 0,
    Symmetric = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FkAlgorithmKind {
    FedAvg = 0,
    FedProx = 1,
}

/// Synthetic scenario. `sizes` may be NULL to keep the family's default
/// client sizes (10 points per client for Chebyshev); `dim` of 0 keeps the
/// default dimension.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FkScenario {
    pub family: FkFamily,
    pub sizes: *const usize,
    pub num_clients: usize,
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Model spread for the heterogeneous family.
    pub heterogeneity: f64,
    pub layout: FkLayout,
    /// Covariate rank for the subspace family.
    pub rank: usize,
}

/// Training settings. `batch_size` of 0 means full batch; `local_steps` is
/// ignored by FedProx.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FkAlgorithm {
    pub kind: FkAlgorithmKind,
    pub local_steps: usize,
    pub eta: f64,
    pub rounds: usize,
    pub batch_size: usize,
    pub early_stop: bool,
}

/// Opaque federated dataset.
pub struct FkDataset {
    inner: FederatedDataset,
}

/// Opaque trained model: final coefficients over the dataset's feature map.
pub struct FkModel {
    kernel: KernelSpec,
    theta: DVector<f64>,
    rounds: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: FkStatus,
    message: String,
}

impl Failure {
    fn new(status: FkStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }

    fn null(what: &str) -> Self {
        Failure::new(FkStatus::NullPointer, format!("{what} is NULL"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InputShape(_) => FkStatus::Shape,
            Error::EmptyInput(_) => FkStatus::EmptyInput,
            Error::UnsupportedRepresentation(_) => FkStatus::Unsupported,
            Error::Config(_) => FkStatus::Config,
            Error::Stability { .. } => FkStatus::Unstable,
            Error::Numeric(_) => FkStatus::Numeric,
            Error::Degenerate(_) => FkStatus::Degenerate,
            Error::EmptySelection(_) => FkStatus::EmptySelection,
            Error::Io { .. } => FkStatus::Io,
            Error::Parse(_) => FkStatus::Parse,
        };
        Failure::new(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FkStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FkStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            FkStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::new(FkStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null(what));
    }
    out.write(value);
    Ok(())
}

fn algorithm_config(a: &FkAlgorithm) -> AlgorithmConfig {
    let algorithm = match a.kind {
        FkAlgorithmKind::FedAvg => Algorithm::FedAvg {
            local_steps: a.local_steps,
        },
        FkAlgorithmKind::FedProx => Algorithm::FedProx,
    };
    let mut cfg = AlgorithmConfig::new(algorithm, a.eta, a.rounds);
    if a.batch_size > 0 {
        cfg = cfg.with_batch_size(a.batch_size);
    }
    cfg.early_stop = a.early_stop;
    cfg
}

fn scenario_spec(s: &FkScenario, sizes: Option<&[usize]>) -> ScenarioSpec {
    let layout = match s.layout {
        FkLayout::Anchored => Layout::Anchored,
        FkLayout::Symmetric => Layout::Symmetric,
    };
    let mut spec = match s.family {
        FkFamily::LinearHomogeneous => ScenarioSpec::linear_homogeneous(s.seed),
        FkFamily::Heterogeneous => ScenarioSpec::heterogeneous(s.heterogeneity, layout, s.seed),
        FkFamily::Subspace => ScenarioSpec::subspace(s.rank, s.seed),
        FkFamily::Chebyshev => ScenarioSpec::chebyshev(10, s.seed),
    };
    if let Some(sz) = sizes {
        spec.sizes = sz.to_vec();
    }
    if s.dim > 0 {
        spec.dim = s.dim;
    }
    spec.sigma = s.sigma;
    spec.noise = Noise::Gaussian;
    spec
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn fk_status_message(status: FkStatus) -> *const c_char {
    let s: &'static CStr = match status {
        FkStatus::Ok => c"ok",
        FkStatus::NullPointer => c"null pointer argument",
        FkStatus::InvalidArgument => c"invalid argument",
        FkStatus::Shape => c"input shape mismatch",
        FkStatus::EmptyInput => c"empty input",
        FkStatus::Unsupported => c"unsupported representation",
        FkStatus::Config => c"configuration error",
        FkStatus::Unstable => c"unstable local dynamics",
        FkStatus::Numeric => c"numerical failure",
        FkStatus::Degenerate => c"degenerate problem",
        FkStatus::EmptySelection => c"empty selection",
        FkStatus::Io => c"I/O error",
        FkStatus::Parse => c"parse error",
        FkStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next `fk_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fk_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Draws a synthetic dataset.
///
/// # Safety
/// `scenario` must point to a valid `FkScenario` whose `sizes` (when not
/// NULL) holds `num_clients` entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fk_dataset_generate(
    scenario: *const FkScenario,
    out: *mut *mut FkDataset,
) -> FkStatus {
    guard(|| {
        let s = deref(scenario, "scenario")?;
        let sizes = if s.sizes.is_null() {
            None
        } else {
            Some(slice(s.sizes, s.num_clients, "sizes")?)
        };
        let ds = datagen::generate(&scenario_spec(s, sizes))?;
        write_out(out, Box::into_raw(Box::new(FkDataset { inner: ds })), "out")
    })
}

/// Builds a linear-kernel dataset from row-major covariates.
///
/// `covariates` holds `sum(sizes) * dim` values and `responses` holds
/// `sum(sizes)` values, clients stored one after another.
///
/// # Safety
/// The arrays must have the lengths stated above; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fk_dataset_from_arrays(
    covariates: *const f64,
    responses: *const f64,
    sizes: *const usize,
    num_clients: usize,
    dim: usize,
    sigma: f64,
    out: *mut *mut FkDataset,
) -> FkStatus {
    guard(|| {
        let sizes = slice(sizes, num_clients, "sizes")?;
        let total: usize = sizes.iter().sum();
        let x = slice(covariates, total * dim, "covariates")?;
        let y = slice(responses, total, "responses")?;
        let mut clients = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &n in sizes {
            let rows = DMatrix::from_row_slice(n, dim, &x[start * dim..(start + n) * dim]);
            let resp = DVector::from_column_slice(&y[start..start + n]);
            clients.push(ClientData::new(rows, resp));
            start += n;
        }
        let ds = FederatedDataset::new(KernelSpec::Linear { dim }, clients, sigma)?;
        write_out(out, Box::into_raw(Box::new(FkDataset { inner: ds })), "out")
    })
}

/// Reads a dataset directory written by `fk_dataset_write` or the CLI.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fk_dataset_read(dir: *const c_char, out: *mut *mut FkDataset) -> FkStatus {
    guard(|| {
        let ds = datagen::read_dataset(&path_arg(dir, "dir")?)?;
        write_out(out, Box::into_raw(Box::new(FkDataset { inner: ds })), "out")
    })
}

/// Writes `dataset` into the directory `dir`, creating it if needed.
///
/// # Safety
/// `dataset` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fk_dataset_write(dataset: *const FkDataset, dir: *const c_char) -> FkStatus {
    guard(|| {
        let ds = deref(dataset, "dataset")?;
        let dir = path_arg(dir, "dir")?;
        std::fs::create_dir_all(&dir)
            .map_err(|e| Failure::new(FkStatus::Io, format!("{}: {e}", dir.display())))?;
        datagen::write_dataset(&ds.inner, &dir, None)?;
        Ok(())
    })
}

/// Number of clients, or 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fk_dataset_num_clients(dataset: *const FkDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.num_clients())
}

/// Total sample count `N`, or 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fk_dataset_total(dataset: *const FkDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.total())
}

/// Input dimension of the covariates, or 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fk_dataset_input_dim(dataset: *const FkDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.kernel().input_dim())
}

/// # Safety
/// `dataset` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fk_dataset_free(dataset: *mut FkDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains from zero and returns the final model. `seed` only drives
/// minibatch ordering.
///
/// # Safety
/// `dataset` and `algorithm` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fk_train(
    dataset: *const FkDataset,
    algorithm: *const FkAlgorithm,
    seed: u64,
    out: *mut *mut FkModel,
) -> FkStatus {
    guard(|| {
        let ds = &deref(dataset, "dataset")?.inner;
        let cfg = algorithm_config(deref(algorithm, "algorithm")?);
        let trace = run_training(ds, &cfg, seed, None)?;
        let last = trace.last();
        let theta = match &last.params {
            Params::Primal(t) => t.clone(),
            Params::Dual(_) => {
                return Err(Failure::new(
                    FkStatus::Unsupported,
                    "model export needs a finite-rank feature map",
                ))
            }
        };
        let model = FkModel {
            kernel: ds.kernel().clone(),
            theta,
            rounds: last.round,
        };
        write_out(out, Box::into_raw(Box::new(model)), "out")
    })
}

/// Rounds actually run (smaller than requested under early stopping).
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fk_model_rounds(model: *const FkModel) -> usize {
    model.as_ref().map_or(0, |m| m.rounds)
}

/// Number of coefficients, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fk_model_num_coefficients(model: *const FkModel) -> usize {
    model.as_ref().map_or(0, |m| m.theta.len())
}

/// Copies the coefficients into `buf`, which must hold at least
/// `fk_model_num_coefficients(model)` values.
///
/// # Safety
/// `model` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fk_model_coefficients(model: *const FkModel, buf: *mut f64, len: usize) -> FkStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if len < m.theta.len() {
            return Err(Failure::new(
                FkStatus::Shape,
                format!("buffer holds {len} values, model has {}", m.theta.len()),
            ));
        }
        if buf.is_null() {
            return Err(Failure::null("buf"));
        }
        ptr::copy_nonoverlapping(m.theta.as_ptr(), buf, m.theta.len());
        Ok(())
    })
}

/// Predicts at `rows` row-major query points of the dataset's input
/// dimension, writing `rows` values into `out`.
///
/// # Safety
/// `queries` must hold `rows * input_dim` doubles and `out` `rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn fk_model_predict(
    model: *const FkModel,
    queries: *const f64,
    rows: usize,
    out: *mut f64,
) -> FkStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let dim = m.kernel.input_dim();
        let x = slice(queries, rows * dim, "queries")?;
        if rows > 0 && out.is_null() {
            return Err(Failure::null("out"));
        }
        for r in 0..rows {
            let phi = m.kernel.features(&x[r * dim..(r + 1) * dim])?;
            let v: f64 = phi.iter().zip(m.theta.iter()).map(|(a, b)| a * b).sum();
            out.add(r).write(v);
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fk_model_free(model: *mut FkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// `gamma = eta * max_i ||K_{x_i}||`.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fk_gamma(dataset: *const FkDataset, eta: f64, out: *mut f64) -> FkStatus {
    guard(|| {
        let g = spectral::gamma(&deref(dataset, "dataset")?.inner, eta)?;
        write_out(out, g, "out")
    })
}

/// Condition-number bound for the algorithm at the given `gamma`.
///
/// # Safety
/// `algorithm` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fk_kappa(gamma: f64, algorithm: *const FkAlgorithm, out: *mut f64) -> FkStatus {
    guard(|| {
        let cfg = algorithm_config(deref(algorithm, "algorithm")?);
        let k = spectral::kappa(gamma, cfg.algorithm)?;
        write_out(out, k, "out")
    })
}

/// Early-stopping time for the dataset under the algorithm's step size
/// and local steps. `saturated` is set when the search hit its cap.
///
/// # Safety
/// `dataset` and `algorithm` must be valid; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fk_early_stopping_time(
    dataset: *const FkDataset,
    algorithm: *const FkAlgorithm,
    out_t: *mut usize,
    out_saturated: *mut bool,
) -> FkStatus {
    guard(|| {
        let ds = &deref(dataset, "dataset")?.inner;
        let cfg = algorithm_config(deref(algorithm, "algorithm")?);
        let es = spectral::early_stopping_for(ds, &cfg)?;
        write_out(out_t, es.t, "out_t")?;
        write_out(out_saturated, es.saturated, "out_saturated")
    })
}

/// Runs an experiment config and writes its run directory. `out_dir` may be
/// NULL to use the usual resolution (environment, config, default).
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out_dir` NULL or one.
#[no_mangle]
pub unsafe extern "C" fn fk_run_experiment(config_path: *const c_char, out_dir: *const c_char) -> FkStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(&path_arg(config_path, "config_path")?)?;
        let flag = if out_dir.is_null() {
            None
        } else {
            Some(path_arg(out_dir, "out_dir")?)
        };
        let dir = harness::resolve_out_dir(&cfg, flag.as_deref());
        harness::execute(&cfg, &dir)?;
        Ok(())
    })
}
