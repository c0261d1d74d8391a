//! C ABI for the covmeta meta-learning library.
//!
//! Conventions:
//! - Every fallible call returns a [`CovmetaStatus`]; `COVMETA_STATUS_OK`
//!   is zero. On failure, [`covmeta_last_error`] returns a UTF-8 message
//!   for the calling thread (valid until that thread's next failing call).
//! - Objects cross the boundary as opaque handles created by `_new`/`_load`
//!   and released by the matching `_free`. Handles are not thread-safe;
//!   share them across threads only with external synchronization.
//! - Buffers are caller-allocated; their required lengths are documented
//!   per call and never inferred.
//! - All panics are caught at the boundary and reported as
//!   `COVMETA_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use covmeta::checkpoint::load_checkpoint;
use covmeta::config::RunConfig;
use covmeta::dataset::generate_task;
use covmeta::meta::eval_adapt;
use covmeta::meta::MetaParams;
use covmeta::rng::{derive, Stream};
use covmeta::taskgen::{purpose, Dependence, MetaDistribution, Variant};
use covmeta::tensor::Tensor;
use covmeta::Error;

/// Call outcome. Zero is success; everything else is an error whose
/// message is available from `covmeta_last_error`.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CovmetaStatus {
    /// The call succeeded.
    Ok = 0,
    /// A pointer was null, a string was not valid UTF-8, or an argument
    /// was out of range or inconsistent.
    InvalidArgument = 1,
    /// The computation produced a non-finite value.
    Numerical = 2,
    /// The file could not be read, written, or understood.
    Io = 3,
    /// An internal invariant failed (a bug; please report it).
    Internal = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let sanitized: String = message.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: CovmetaStatus, message: &str) -> CovmetaStatus {
    set_last_error(message);
    status
}

fn fail_with(err: &Error) -> CovmetaStatus {
    let status = match err {
        Error::NonFinite { .. } | Error::NumericalFailure { .. } | Error::Domain { .. } => {
            CovmetaStatus::Numerical
        }
        Error::Io { .. } | Error::Checkpoint(_) | Error::Dataset(_) => CovmetaStatus::Io,
        _ => CovmetaStatus::InvalidArgument,
    };
    fail(status, &err.to_string())
}

/// Run `f` with panics converted to `COVMETA_STATUS_INTERNAL`.
fn guarded(f: impl FnOnce() -> CovmetaStatus) -> CovmetaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(CovmetaStatus::Internal, &format!("internal error: {msg}"))
        }
    }
}

/// # Safety
/// `s` must be a valid NUL-terminated string or null.
unsafe fn utf8_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, CovmetaStatus> {
    if s.is_null() {
        return Err(fail(
            CovmetaStatus::InvalidArgument,
            &format!("{what} must not be null"),
        ));
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        fail(
            CovmetaStatus::InvalidArgument,
            &format!("{what} must be valid UTF-8"),
        )
    })
}

fn out_param<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, CovmetaStatus> {
    if p.is_null() {
        return Err(fail(
            CovmetaStatus::InvalidArgument,
            &format!("{what} must not be null"),
        ));
    }
    Ok(unsafe { &mut *p })
}

/// Message for the calling thread's most recent failure; empty until one
/// occurs. The pointer stays valid until this thread's next failing call.
#[no_mangle]
pub extern "C" fn covmeta_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn covmeta_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// A benchmark meta-distribution (covariate modes, weights, hypothesis
/// rule) built from a data seed.
pub struct CovmetaMetaDist {
    md: MetaDistribution,
    task_seed: u64,
}

/// Build a meta-distribution handle.
///
/// `variant` is one of `sine`, `sine-quad-linear`, `five`; `dependence`
/// is `dependent` or `independent`; `seed` is the master data seed. On
/// success `*out` owns the handle; release it with
/// `covmeta_meta_dist_free`.
///
/// # Safety
/// `variant` and `dependence` must be valid NUL-terminated strings and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn covmeta_meta_dist_new(
    variant: *const c_char,
    dependence: *const c_char,
    seed: u64,
    out: *mut *mut CovmetaMetaDist,
) -> CovmetaStatus {
    guarded(|| {
        let out = match out_param(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let variant = match utf8_arg(variant, "variant") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let dependence = match utf8_arg(dependence, "dependence") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let (variant, dependence) = match (Variant::parse(variant), Dependence::parse(dependence))
        {
            (Ok(v), Ok(d)) => (v, d),
            (Err(e), _) | (_, Err(e)) => return fail_with(&e),
        };
        let md = MetaDistribution::build(variant, dependence, seed);
        let task_seed = derive(seed, purpose::TRAIN_TASKS);
        *out = Box::into_raw(Box::new(CovmetaMetaDist { md, task_seed }));
        CovmetaStatus::Ok
    })
}

/// Release a meta-distribution handle. Null is a no-op.
///
/// # Safety
/// `dist` must be a handle from `covmeta_meta_dist_new` (or null), not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn covmeta_meta_dist_free(dist: *mut CovmetaMetaDist) {
    if !dist.is_null() {
        drop(Box::from_raw(dist));
    }
}

/// Number of covariate modes in the distribution.
///
/// # Safety
/// `dist` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn covmeta_meta_dist_n_modes(
    dist: *const CovmetaMetaDist,
    out: *mut usize,
) -> CovmetaStatus {
    guarded(|| {
        let out = match out_param(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        if dist.is_null() {
            return fail(CovmetaStatus::InvalidArgument, "dist must not be null");
        }
        *out = (*dist).md.n_modes();
        CovmetaStatus::Ok
    })
}

/// Draw benchmark task `index` into caller buffers.
///
/// `support_x`, `support_y` must hold `n_support` doubles and `query_x`,
/// `query_y` must hold `n_query` doubles. `out_mode` receives the
/// covariate mode, `out_family` the hypothesis family tag (0 sine, 1
/// quadratic, 2 linear, 3 absolute-value, 4 tanh). Task `index` under the
/// same distribution and counts is bit-reproducible.
///
/// # Safety
/// `dist` must be a live handle and every output pointer valid for the
/// documented length.
#[no_mangle]
pub unsafe extern "C" fn covmeta_sample_task(
    dist: *const CovmetaMetaDist,
    index: u64,
    n_support: usize,
    n_query: usize,
    support_x: *mut f64,
    support_y: *mut f64,
    query_x: *mut f64,
    query_y: *mut f64,
    out_mode: *mut u32,
    out_family: *mut u8,
) -> CovmetaStatus {
    guarded(|| {
        if dist.is_null() {
            return fail(CovmetaStatus::InvalidArgument, "dist must not be null");
        }
        if n_support == 0 || n_query == 0 {
            return fail(
                CovmetaStatus::InvalidArgument,
                "n_support and n_query must be at least 1",
            );
        }
        for (p, what) in [
            (support_x, "support_x"),
            (support_y, "support_y"),
            (query_x, "query_x"),
            (query_y, "query_y"),
        ] {
            if p.is_null() {
                return fail(
                    CovmetaStatus::InvalidArgument,
                    &format!("{what} must not be null"),
                );
            }
        }
        if out_mode.is_null() || out_family.is_null() {
            return fail(
                CovmetaStatus::InvalidArgument,
                "out_mode and out_family must not be null",
            );
        }
        let dist = &*dist;
        let task = generate_task(&dist.md, dist.task_seed, index, n_support, n_query);
        ptr::copy_nonoverlapping(task.support_x.as_ptr(), support_x, n_support);
        ptr::copy_nonoverlapping(task.support_y.as_ptr(), support_y, n_support);
        ptr::copy_nonoverlapping(task.query_x.as_ptr(), query_x, n_query);
        ptr::copy_nonoverlapping(task.query_y.as_ptr(), query_y, n_query);
        *out_mode = task.mode as u32;
        *out_family = task.hypothesis.family.tag();
        CovmetaStatus::Ok
    })
}

/// A trained model loaded from a checkpoint, with the run configuration it
/// was trained under (used for adaptation defaults).
pub struct CovmetaModel {
    params: MetaParams,
    config: RunConfig,
}

/// Load a model checkpoint. On success `*out` owns the handle; release it
/// with `covmeta_model_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn covmeta_model_load(
    path: *const c_char,
    out: *mut *mut CovmetaModel,
) -> CovmetaStatus {
    guarded(|| {
        let out = match out_param(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let path = match utf8_arg(path, "path") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match load_checkpoint(Path::new(path)) {
            Ok(loaded) => {
                *out = Box::into_raw(Box::new(CovmetaModel {
                    params: loaded.params,
                    config: loaded.config,
                }));
                CovmetaStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a handle from `covmeta_model_load` (or null), not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn covmeta_model_free(model: *mut CovmetaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total number of meta-parameters in the loaded model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn covmeta_model_param_count(
    model: *const CovmetaModel,
    out: *mut usize,
) -> CovmetaStatus {
    guarded(|| {
        let out = match out_param(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        if model.is_null() {
            return fail(CovmetaStatus::InvalidArgument, "model must not be null");
        }
        *out = (*model).params.data.len();
        CovmetaStatus::Ok
    })
}

/// Adapt the model to a support set and predict at the query points.
///
/// `support_x`/`support_y` hold `n_support` doubles, `query_x` holds
/// `n_query`; predictions go to `out_post` (`n_query` doubles) and, when
/// non-null, `out_pre` receives the pre-adaptation predictions too.
/// `k` is the number of adaptation steps (negative = the model's training
/// value) and `eta0` the step size (NaN = the model's training value).
/// `eps_seed` seeds the latent draw hierarchical models condition on;
/// the same seed and inputs give bit-identical predictions.
///
/// # Safety
/// All array pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn covmeta_adapt_predict(
    model: *const CovmetaModel,
    eps_seed: u64,
    support_x: *const f64,
    support_y: *const f64,
    n_support: usize,
    query_x: *const f64,
    n_query: usize,
    k: i32,
    eta0: f64,
    out_pre: *mut f64,
    out_post: *mut f64,
) -> CovmetaStatus {
    guarded(|| {
        if model.is_null() {
            return fail(CovmetaStatus::InvalidArgument, "model must not be null");
        }
        if support_x.is_null() || support_y.is_null() || query_x.is_null() || out_post.is_null() {
            return fail(
                CovmetaStatus::InvalidArgument,
                "support_x, support_y, query_x and out_post must not be null",
            );
        }
        if n_support == 0 || n_query == 0 {
            return fail(
                CovmetaStatus::InvalidArgument,
                "n_support and n_query must be at least 1",
            );
        }
        let model = &*model;
        let sx = std::slice::from_raw_parts(support_x, n_support);
        let sy = std::slice::from_raw_parts(support_y, n_support);
        let qx = std::slice::from_raw_parts(query_x, n_query);
        let k = if k < 0 { model.config.k } else { k as usize };
        let eta0 = if eta0.is_nan() { model.config.eta0 } else { eta0 };

        let task = covmeta::taskgen::Task {
            mode: 0,
            hypothesis: covmeta::taskgen::Hypothesis {
                family: covmeta::taskgen::Family::Linear,
                a: 0.0,
                w: 0.0,
                c: 0.0,
                b: 0.0,
            },
            support_x: sx.to_vec(),
            support_y: sy.to_vec(),
            query_x: qx.to_vec(),
            query_y: vec![0.0; n_query],
        };
        let eps = model.params.hierarchical.then(|| {
            let d_z = model.params.arch.d_z;
            let mut stream = Stream::new(derive(eps_seed, purpose::EVAL_EPS));
            Tensor::new(vec![1, d_z], stream.normal_vec(d_z)).expect("shape is valid")
        });
        match eval_adapt(&model.params, false, &task, eps.as_ref(), k, eta0) {
            Ok(outcome) => {
                if !out_pre.is_null() {
                    ptr::copy_nonoverlapping(outcome.pre_pred.as_ptr(), out_pre, n_query);
                }
                ptr::copy_nonoverlapping(outcome.post_pred.as_ptr(), out_post, n_query);
                CovmetaStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}
