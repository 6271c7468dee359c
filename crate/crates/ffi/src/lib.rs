//! C ABI for the ssdlab semi-supervised detection lab.
//!
//! Opaque handles, integer status codes, and a thread-local last-error
//! message. All functions catch panics at the boundary and return
//! [`SsdlabStatus::Panic`] instead of unwinding into foreign frames.
//! Absent metric values (AP with no ground truth in range) surface as NaN.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ssdlab::cli::{run_training, RunConfig};
use ssdlab::error::Error;
use ssdlab::metrics::EvalReport;
use ssdlab::synthdata::{generate, load_dataset, save_dataset, Dataset, DatasetSplit, SceneSpec};
use ssdlab::trainer::{evaluate_model, Trainer};

/// Status codes mirroring the CLI exit-code contract.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsdlabStatus {
    Ok = 0,
    /// Generic failure; see `ssdlab_last_error`.
    Error = 1,
    /// Invalid configuration or malformed input file.
    Config = 2,
    /// Non-finite loss during training.
    Numeric = 3,
    /// A required pointer argument was null.
    NullArgument = 4,
    /// A panic was caught at the boundary.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> SsdlabStatus {
    match err.exit_code() {
        2 => SsdlabStatus::Config,
        3 => SsdlabStatus::Numeric,
        _ => SsdlabStatus::Error,
    }
}

fn guard<F: FnOnce() -> Result<(), (SsdlabStatus, String)>>(f: F) -> SsdlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsdlabStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(&msg);
            SsdlabStatus::Panic
        }
    }
}

unsafe fn cstr_arg(ptr: *const c_char) -> Result<String, (SsdlabStatus, String)> {
    if ptr.is_null() {
        return Err((SsdlabStatus::NullArgument, "null string argument".into()));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(|s| s.to_string())
        .map_err(|e| (SsdlabStatus::Config, format!("invalid UTF-8 argument: {e}")))
}

/// Copy the last error message into `buf` (truncated, always
/// NUL-terminated). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query length).
#[no_mangle]
pub unsafe extern "C" fn ssdlab_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            // Guarantee termination even on truncation.
            *buf.add(n - 1) = 0;
        }
        bytes.len() - 1
    })
}

/// Static version string of the library.
#[no_mangle]
pub extern "C" fn ssdlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Generate a synthetic dataset: `n` training images plus a quarter as a
/// test set, written under `out_dir` as `train/` and `test/`.
///
/// # Safety
/// `spec_json` may be null (defaults); other pointers must be valid
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ssdlab_generate_dataset(
    spec_json: *const c_char,
    out_dir: *const c_char,
    n: usize,
    seed: u64,
) -> SsdlabStatus {
    guard(|| {
        let out = PathBuf::from(cstr_arg(out_dir)?);
        if n == 0 {
            return Err((SsdlabStatus::Config, "n must be >= 1".into()));
        }
        let mut spec = if spec_json.is_null() {
            SceneSpec::default()
        } else {
            serde_json::from_str::<SceneSpec>(&cstr_arg(spec_json)?)
                .map_err(|e| (SsdlabStatus::Config, format!("bad scene spec: {e}")))?
        };
        spec.seed = seed;
        let train = generate(&spec, n).map_err(|e| (status_of(&e), e.to_string()))?;
        let test_spec = SceneSpec {
            seed: seed.wrapping_add(1),
            ..spec
        };
        let test =
            generate(&test_spec, (n / 4).max(1)).map_err(|e| (status_of(&e), e.to_string()))?;
        save_dataset(&out.join("train"), &train).map_err(|e| (status_of(&e), e.to_string()))?;
        save_dataset(&out.join("test"), &test).map_err(|e| (status_of(&e), e.to_string()))?;
        Ok(())
    })
}

/// Run a full training run from a RunConfig JSON document (the document
/// itself, not a path). Writes the run directory exactly like the CLI and
/// stores the final mAP (NaN when absent) in `out_map` if non-null.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string; `out_map` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn ssdlab_run_training(
    config_json: *const c_char,
    out_map: *mut f64,
) -> SsdlabStatus {
    guard(|| {
        let cfg: RunConfig = serde_json::from_str(&cstr_arg(config_json)?)
            .map_err(|e| (SsdlabStatus::Config, format!("bad run config: {e}")))?;
        let outcome = run_training(&cfg, true).map_err(|e| (status_of(&e), e.to_string()))?;
        if !out_map.is_null() {
            *out_map = outcome.final_report.map.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Opaque trainer handle.
#[repr(C)]
pub struct SsdlabTrainer {
    _private: [u8; 0],
}

struct TrainerHandle {
    trainer: std::mem::ManuallyDrop<Trainer<'static>>,
    train_ds: *mut Dataset,
    test_ds: Box<Dataset>,
    split: *mut DatasetSplit,
}

impl Drop for TrainerHandle {
    fn drop(&mut self) {
        // The trainer borrows the leaked dataset and split: drop it first,
        // then reclaim what it borrowed. `test_ds` drops normally.
        unsafe {
            std::mem::ManuallyDrop::drop(&mut self.trainer);
            drop(Box::from_raw(self.train_ds));
            drop(Box::from_raw(self.split));
        }
    }
}

/// Per-step scalar metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SsdlabStepMetrics {
    pub iteration: u64,
    pub total_loss: f64,
    pub supervised_loss: f64,
    pub unsupervised_loss: f64,
    pub consistency_loss: f64,
    pub n_pseudo_confident: usize,
    pub n_pseudo_reliable: usize,
    /// 1 while the one-to-many stage is active, 0 afterwards.
    pub stage_one_to_many: i32,
}

/// Evaluation summary; absent AP values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SsdlabEvalReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub duplicate_rate: f64,
    pub n_predictions: usize,
}

fn to_c_report(r: &EvalReport) -> SsdlabEvalReport {
    let nan = f64::NAN;
    SsdlabEvalReport {
        map: r.map.unwrap_or(nan),
        ap50: r.ap50.unwrap_or(nan),
        ap75: r.ap75.unwrap_or(nan),
        ap_small: r.ap_small.unwrap_or(nan),
        ap_medium: r.ap_medium.unwrap_or(nan),
        ap_large: r.ap_large.unwrap_or(nan),
        duplicate_rate: r.duplicate_rate,
        n_predictions: r.n_predictions,
    }
}

/// Create a step-wise trainer from a RunConfig JSON document. The handle
/// owns its datasets; release it with `ssdlab_trainer_free`.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string and `out` a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn ssdlab_trainer_new(
    config_json: *const c_char,
    out: *mut *mut SsdlabTrainer,
) -> SsdlabStatus {
    guard(|| {
        if out.is_null() {
            return Err((SsdlabStatus::NullArgument, "null output handle".into()));
        }
        let cfg: RunConfig = serde_json::from_str(&cstr_arg(config_json)?)
            .map_err(|e| (SsdlabStatus::Config, format!("bad run config: {e}")))?;
        cfg.validate().map_err(|e| (status_of(&e), e.to_string()))?;
        let train_ds = Box::new(
            load_dataset(&cfg.train_data).map_err(|e| (status_of(&e), e.to_string()))?,
        );
        let test_ds = Box::new(
            load_dataset(&cfg.test_data).map_err(|e| (status_of(&e), e.to_string()))?,
        );
        let split = Box::new(
            ssdlab::synthdata::split(
                train_ds.samples.len(),
                cfg.labeled_fraction,
                cfg.fold,
                cfg.train.seed,
            )
            .map_err(|e| (status_of(&e), e.to_string()))?,
        );
        // Leak the borrowed inputs to give the trainer a stable 'static
        // view; the handle's Drop reclaims them.
        let train_ptr = Box::into_raw(train_ds);
        let split_ptr = Box::into_raw(split);
        let trainer = Trainer::new(
            cfg.mode,
            cfg.train.clone(),
            cfg.detector.clone(),
            &*train_ptr,
            &*split_ptr,
        )
        .map_err(|e| {
            drop(Box::from_raw(train_ptr));
            drop(Box::from_raw(split_ptr));
            (status_of(&e), e.to_string())
        })?;
        let handle = Box::new(TrainerHandle {
            trainer: std::mem::ManuallyDrop::new(trainer),
            train_ds: train_ptr,
            test_ds,
            split: split_ptr,
        });
        *out = Box::into_raw(handle) as *mut SsdlabTrainer;
        Ok(())
    })
}

/// Advance the trainer by one optimizer step.
///
/// # Safety
/// `handle` must come from `ssdlab_trainer_new`; `metrics` may be null.
#[no_mangle]
pub unsafe extern "C" fn ssdlab_trainer_step(
    handle: *mut SsdlabTrainer,
    metrics: *mut SsdlabStepMetrics,
) -> SsdlabStatus {
    guard(|| {
        if handle.is_null() {
            return Err((SsdlabStatus::NullArgument, "null trainer handle".into()));
        }
        let h = &mut *(handle as *mut TrainerHandle);
        let m = h
            .trainer
            .train_step()
            .map_err(|e| (status_of(&e), e.to_string()))?;
        if !metrics.is_null() {
            *metrics = SsdlabStepMetrics {
                iteration: m.iteration,
                total_loss: m.total_loss,
                supervised_loss: m.supervised_loss,
                unsupervised_loss: m.unsupervised_loss,
                consistency_loss: m.consistency_loss,
                n_pseudo_confident: m.n_pseudo_confident,
                n_pseudo_reliable: m.n_pseudo_reliable,
                stage_one_to_many: m.stage_one_to_many as i32,
            };
        }
        Ok(())
    })
}

/// Evaluate the EMA teacher on the held-out test set.
///
/// # Safety
/// `handle` must come from `ssdlab_trainer_new` and `report` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ssdlab_trainer_evaluate(
    handle: *mut SsdlabTrainer,
    report: *mut SsdlabEvalReport,
) -> SsdlabStatus {
    guard(|| {
        if handle.is_null() || report.is_null() {
            return Err((SsdlabStatus::NullArgument, "null argument".into()));
        }
        let h = &mut *(handle as *mut TrainerHandle);
        let r = evaluate_model(&h.trainer.state.teacher, &h.test_ds.samples, &h.test_ds)
            .map_err(|e| (status_of(&e), e.to_string()))?;
        *report = to_c_report(&r);
        Ok(())
    })
}

/// Current iteration counter (steps completed).
///
/// # Safety
/// `handle` must come from `ssdlab_trainer_new`.
#[no_mangle]
pub unsafe extern "C" fn ssdlab_trainer_iteration(handle: *const SsdlabTrainer) -> u64 {
    if handle.is_null() {
        return 0;
    }
    let h = &*(handle as *const TrainerHandle);
    h.trainer.state.iteration
}

/// Release a trainer handle.
///
/// # Safety
/// `handle` must come from `ssdlab_trainer_new` and not be used afterward.
#[no_mangle]
pub unsafe extern "C" fn ssdlab_trainer_free(handle: *mut SsdlabTrainer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle as *mut TrainerHandle));
    }
}
