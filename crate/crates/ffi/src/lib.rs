//! C ABI for loading, mapping and running xbar-snn models.
//!
//! Every fallible function returns an [`XsnnStatus`]; on failure the message
//! is kept per thread and can be read with [`xsnn_last_error`]. Models are
//! opaque [`XsnnModel`] handles owned by the caller and released with
//! [`xsnn_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use xbar_snn::crossbar::{effective_conductance, CircuitMode, ConductanceTile, CrossbarConfig};
use xbar_snn::harness::{delta_metric, load_model, save_model};
use xbar_snn::mapping::nonidealize_model;
use xbar_snn::numerics::Tensor;
use xbar_snn::snn::{ann_forward, snn_forward, Model};
use xbar_snn::Error;

/// Result code of every fallible call. `Ok` is 0.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XsnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Solver = 5,
    Structure = 6,
    Panic = 7,
    Other = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XsnnCircuitMode {
    Ideal = 0,
    Nodal = 1,
    Approx = 2,
}

/// Device and parasitic parameters of a crossbar tile. Resistances in ohms,
/// conductances in siemens.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct XsnnCrossbarConfig {
    pub rows: usize,
    pub cols: usize,
    pub r_driver: f64,
    pub r_wire_row: f64,
    pub r_wire_col: f64,
    pub r_sense: f64,
    pub g_min: f64,
    pub g_max: f64,
    pub sigma_over_mu: f64,
    pub v_read: f64,
    pub solver_tol: f64,
    pub circuit_mode: XsnnCircuitMode,
}

impl From<&CrossbarConfig> for XsnnCrossbarConfig {
    fn from(c: &CrossbarConfig) -> Self {
        XsnnCrossbarConfig {
            rows: c.rows,
            cols: c.cols,
            r_driver: c.r_driver,
            r_wire_row: c.r_wire_row,
            r_wire_col: c.r_wire_col,
            r_sense: c.r_sense,
            g_min: c.g_min,
            g_max: c.g_max,
            sigma_over_mu: c.sigma_over_mu,
            v_read: c.v_read,
            solver_tol: c.solver_tol,
            circuit_mode: match c.circuit_mode {
                CircuitMode::Ideal => XsnnCircuitMode::Ideal,
                CircuitMode::Nodal => XsnnCircuitMode::Nodal,
                CircuitMode::Approx => XsnnCircuitMode::Approx,
            },
        }
    }
}

impl From<&XsnnCrossbarConfig> for CrossbarConfig {
    fn from(c: &XsnnCrossbarConfig) -> Self {
        CrossbarConfig {
            rows: c.rows,
            cols: c.cols,
            r_driver: c.r_driver,
            r_wire_row: c.r_wire_row,
            r_wire_col: c.r_wire_col,
            r_sense: c.r_sense,
            g_min: c.g_min,
            g_max: c.g_max,
            sigma_over_mu: c.sigma_over_mu,
            v_read: c.v_read,
            solver_tol: c.solver_tol,
            circuit_mode: match c.circuit_mode {
                XsnnCircuitMode::Ideal => CircuitMode::Ideal,
                XsnnCircuitMode::Nodal => CircuitMode::Nodal,
                XsnnCircuitMode::Approx => CircuitMode::Approx,
            },
        }
    }
}

/// Opaque network handle.
pub struct XsnnModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(XsnnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::Shape(_) | Error::Config(_) => XsnnStatus::InvalidArgument,
            Error::Io(_) | Error::Parse { .. } => XsnnStatus::Io,
            Error::Format(_) | Error::UnsupportedVersion { .. } | Error::Json(_) => XsnnStatus::Format,
            Error::Solver { .. } | Error::Tile { .. } => XsnnStatus::Solver,
            Error::Structure(_) => XsnnStatus::Structure,
            _ => XsnnStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(XsnnStatus::NullPointer, format!("`{what}` is null"))
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', "?")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn catch(f: impl FnOnce() -> Result<(), Failure>) -> XsnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            XsnnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            XsnnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(XsnnStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_arg<'a>(m: *const XsnnModel) -> Result<&'a Model, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xsnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn xsnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fills `out` with the default crossbar parameters.
///
/// # Safety
/// `out` must be null or point to writable memory for one config.
#[no_mangle]
pub unsafe extern "C" fn xsnn_crossbar_config_default(out: *mut XsnnCrossbarConfig) -> XsnnStatus {
    catch(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = XsnnCrossbarConfig::from(&CrossbarConfig::default());
        Ok(())
    })
}

/// Loads a model container from `path` into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn xsnn_model_load(path: *const c_char, out: *mut *mut XsnnModel) -> XsnnStatus {
    catch(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_model(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(XsnnModel { inner: model }));
        Ok(())
    })
}

/// Writes `model` to `path` atomically.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn xsnn_model_save(model: *const XsnnModel, path: *const c_char) -> XsnnStatus {
    catch(|| Ok(save_model(model_arg(model)?, &path_arg(path, "path")?)?))
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xsnn_model_free(model: *mut XsnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Simulation length of an SNN, 0 for an ANN. Returns 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn xsnn_model_time_steps(model: *const XsnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.time_steps)
}

/// Number of output classes. Returns 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn xsnn_model_classes(model: *const XsnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.classes)
}

/// Copies `[channels, height, width]` of one input image into `out`.
///
/// # Safety
/// `model` must be a live handle and `out` point to three writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn xsnn_model_input_shape(model: *const XsnnModel, out: *mut usize) -> XsnnStatus {
    catch(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(m.spec.input_shape.as_ptr(), out, 3);
        Ok(())
    })
}

/// Maps every weighted layer of `model` onto crossbars described by `config`
/// (null for defaults) and returns the model with the resulting non-ideal
/// weights as a new handle.
///
/// # Safety
/// `model` must be a live handle, `config` null or valid, `out` a writable
/// pointer slot.
#[no_mangle]
pub unsafe extern "C" fn xsnn_model_nonidealize(
    model: *const XsnnModel,
    config: *const XsnnCrossbarConfig,
    seed: u64,
    out: *mut *mut XsnnModel,
) -> XsnnStatus {
    catch(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = config
            .as_ref()
            .map_or_else(CrossbarConfig::default, CrossbarConfig::from);
        let mapped = nonidealize_model(m, &cfg, seed)?;
        *out = Box::into_raw(Box::new(XsnnModel { inner: mapped }));
        Ok(())
    })
}

/// Runs `n` images (row-major `n x C x H x W`, values in [0, 1]) through the
/// network and writes `n x classes` outputs: logits for an ANN, accumulated
/// output potential for an SNN. `time_steps` 0 uses the model's own.
///
/// # Safety
/// `images` must hold `n * C * H * W` doubles and `out` room for
/// `n * classes`.
#[no_mangle]
pub unsafe extern "C" fn xsnn_model_forward(
    model: *const XsnnModel,
    images: *const f64,
    n: usize,
    time_steps: usize,
    seed: u64,
    out: *mut f64,
) -> XsnnStatus {
    catch(|| {
        let m = model_arg(model)?;
        if images.is_null() {
            return Err(null("images"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let [c, h, w] = m.spec.input_shape;
        let data = std::slice::from_raw_parts(images, n * c * h * w).to_vec();
        let x = Tensor::from_vec(&[n, c, h, w], data)?;
        let y = if m.is_snn() {
            let t = if time_steps == 0 { m.spec.time_steps } else { time_steps };
            snn_forward(m, &x, t, seed)?
        } else {
            ann_forward(m, &x)?
        };
        ptr::copy_nonoverlapping(y.data().as_ptr(), out, y.len());
        Ok(())
    })
}

/// Effective conductances of one tile under `config` (null for defaults).
/// `g` and `out` are row-major `rows x cols`; rows and cols override the
/// config's. Every `g` must lie in `[g_min, g_max]`.
///
/// # Safety
/// `g` and `out` must each hold `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn xsnn_effective_conductance(
    g: *const f64,
    rows: usize,
    cols: usize,
    config: *const XsnnCrossbarConfig,
    out: *mut f64,
) -> XsnnStatus {
    catch(|| {
        if g.is_null() {
            return Err(null("g"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let base = config
            .as_ref()
            .map_or_else(CrossbarConfig::default, CrossbarConfig::from);
        let cfg = CrossbarConfig { rows, cols, ..base };
        cfg.validate()?;
        let values = Tensor::from_vec(&[rows, cols], std::slice::from_raw_parts(g, rows * cols).to_vec())?;
        let tile = ConductanceTile::dense(values)?;
        tile.validate(&cfg)?;
        let geff = effective_conductance(&tile, &cfg)?;
        ptr::copy_nonoverlapping(geff.data().as_ptr(), out, geff.len());
        Ok(())
    })
}

/// Relative accuracy degradation `(sw - hw) / sw * 100`.
///
/// # Safety
/// `out` must be a writable double.
#[no_mangle]
pub unsafe extern "C" fn xsnn_delta_metric(sw: f64, hw: f64, out: *mut f64) -> XsnnStatus {
    catch(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = delta_metric(sw, hw)?;
        Ok(())
    })
}
