//! C ABI for the vbmem library.
//!
//! Conventions:
//! - Handles (`VbmSpec`, `VbmEpisode`, `VbmResult`) are opaque pointers
//!   created and destroyed by this library; never free them with `free()`.
//! - Every fallible call returns a [`VbmStatus`]; on failure,
//!   [`vbm_last_error_message`] returns a thread-local description valid
//!   until the next failing call on the same thread.
//! - Strings returned through `char**` out-parameters are NUL-terminated,
//!   UTF-8, and owned by the caller; release them with [`vbm_string_free`].
//! - Structured data crosses the boundary as JSON using the same schemas
//!   as the CLI, so bindings in any language can reuse one parser.
//!
//! The pointer contracts above apply to every `unsafe` function here:
//! handles must be live pointers produced by this library, strings must be
//! NUL-terminated, and out-parameters must point to writable storage.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use vbmem::baseline::{baseline_write, BaselineKind};
use vbmem::elbo::{elbo_closed_form, elbo_monte_carlo};
use vbmem::engine::{
    inference_result_from_json, inference_result_to_json, write_episode, InferenceConfig,
    InferenceResult, InitMode,
};
use vbmem::episode::{
    episode_from_json, episode_to_json, generate_synthetic_episode, Episode, SynthConfig,
};
use vbmem::model::{model_spec_from_json, model_spec_to_json, ModelSpec, Variant};
use vbmem::readout::{generate_direct, generate_iterative, IdentityDecoder, IdentityEncoder};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VbmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A precondition on the inputs was violated.
    InvalidArgument = 2,
    /// A JSON document could not be parsed or did not match its schema.
    Parse = 3,
    /// An I/O failure surfaced from the library.
    Io = 4,
    /// The library panicked; this is a bug worth reporting.
    Panic = 5,
}

/// Model variant selector for [`vbm_spec_create`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VbmVariant {
    Gaussian = 0,
    Categorical = 1,
    MeanShifted = 2,
    Mixture = 3,
    Tree = 4,
}

/// Memory initialization mode for [`vbm_write_episode`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VbmInit {
    Prior = 0,
    Random = 1,
    DataDependent = 2,
}

/// Baseline selector for [`vbm_baseline_write`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VbmBaseline {
    OnlineNonIterative = 0,
    BatchedIterative = 1,
}

/// Additive pieces of the evidence lower bound.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VbmElboBreakdown {
    pub recon: f64,
    pub code_kl: f64,
    pub address_kl: f64,
    pub memory_kl: f64,
    pub total: f64,
}

/// Opaque model specification handle.
pub struct VbmSpec {
    inner: ModelSpec,
}

/// Opaque episode handle.
pub struct VbmEpisode {
    inner: Episode,
}

/// Opaque inference-result handle (the posterior plus the spec it was
/// produced under, so it is self-describing).
pub struct VbmResult {
    spec: ModelSpec,
    inner: InferenceResult,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &vbmem::Error) -> VbmStatus {
    match err {
        vbmem::Error::Schema(_) | vbmem::Error::Json(_) => VbmStatus::Parse,
        vbmem::Error::Io(_) => VbmStatus::Io,
        _ => VbmStatus::InvalidArgument,
    }
}

/// Runs a fallible body, translating panics and errors into status codes.
fn guarded(body: impl FnOnce() -> Result<(), (VbmStatus, String)>) -> VbmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => VbmStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&message);
            VbmStatus::Panic
        }
    }
}

fn lib_err(err: vbmem::Error) -> (VbmStatus, String) {
    (status_of(&err), err.to_string())
}

fn null_err(what: &str) -> (VbmStatus, String) {
    (VbmStatus::NullPointer, format!("{what} must not be null"))
}

unsafe fn read_c_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, (VbmStatus, String)> {
    if ptr.is_null() {
        return Err(null_err(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| (VbmStatus::Parse, format!("{what}: invalid UTF-8: {e}")))
}

fn give_string(out: *mut *mut c_char, value: String) -> Result<(), (VbmStatus, String)> {
    let cstring = CString::new(value)
        .map_err(|e| (VbmStatus::InvalidArgument, format!("embedded NUL: {e}")))?;
    unsafe { *out = cstring.into_raw() };
    Ok(())
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vbm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Frees a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn vbm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a spec with zero prior mean and identity covariances.
/// `clusters` is forced to 1 for the single-cluster variants and
/// `partitions` is forced to 1 for all but the tree variant.
#[no_mangle]
pub unsafe extern "C" fn vbm_spec_create(
    variant: VbmVariant,
    memory_rows: usize,
    code_dim: usize,
    clusters: usize,
    partitions: usize,
    sigma_z2: f64,
    out: *mut *mut VbmSpec,
) -> VbmStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let variant = match variant {
            VbmVariant::Gaussian => Variant::GaussianAddress,
            VbmVariant::Categorical => Variant::CategoricalAddress,
            VbmVariant::MeanShifted => Variant::MeanShifted,
            VbmVariant::Mixture => Variant::Mixture,
            VbmVariant::Tree => Variant::Tree,
        };
        let (clusters, partitions) = match variant {
            Variant::GaussianAddress | Variant::CategoricalAddress | Variant::MeanShifted => (1, 1),
            Variant::Mixture => (clusters, 1),
            Variant::Tree => (clusters, partitions),
        };
        let spec = ModelSpec::with_defaults(
            variant,
            memory_rows,
            code_dim,
            clusters,
            partitions,
            sigma_z2,
        )
        .map_err(lib_err)?;
        *out = Box::into_raw(Box::new(VbmSpec { inner: spec }));
        Ok(())
    })
}

/// Parses a model-spec JSON document.
#[no_mangle]
pub unsafe extern "C" fn vbm_spec_from_json(
    json: *const c_char,
    out: *mut *mut VbmSpec,
) -> VbmStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let text = read_c_str(json, "json")?;
        let spec = model_spec_from_json(text).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(VbmSpec { inner: spec }));
        Ok(())
    })
}

/// Serializes a spec to JSON (caller frees via [`vbm_string_free`]).
#[no_mangle]
pub unsafe extern "C" fn vbm_spec_to_json(
    spec: *const VbmSpec,
    out: *mut *mut c_char,
) -> VbmStatus {
    guarded(|| {
        if spec.is_null() {
            return Err(null_err("spec"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        give_string(out, model_spec_to_json(&(*spec).inner).map_err(lib_err)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn vbm_spec_free(spec: *mut VbmSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Parses an episode JSON document.
#[no_mangle]
pub unsafe extern "C" fn vbm_episode_from_json(
    json: *const c_char,
    out: *mut *mut VbmEpisode,
) -> VbmStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let text = read_c_str(json, "json")?;
        let episode = episode_from_json(text).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(VbmEpisode { inner: episode }));
        Ok(())
    })
}

/// Serializes an episode to JSON (caller frees via [`vbm_string_free`]).
#[no_mangle]
pub unsafe extern "C" fn vbm_episode_to_json(
    episode: *const VbmEpisode,
    out: *mut *mut c_char,
) -> VbmStatus {
    guarded(|| {
        if episode.is_null() {
            return Err(null_err("episode"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        give_string(out, episode_to_json(&(*episode).inner).map_err(lib_err)?)
    })
}

/// Number of timesteps in an episode; zero for a null handle.
#[no_mangle]
pub unsafe extern "C" fn vbm_episode_len(episode: *const VbmEpisode) -> usize {
    if episode.is_null() {
        0
    } else {
        (*episode).inner.len()
    }
}

#[no_mangle]
pub unsafe extern "C" fn vbm_episode_free(episode: *mut VbmEpisode) {
    if !episode.is_null() {
        drop(Box::from_raw(episode));
    }
}

/// Samples a synthetic linear-Gaussian episode. On success, `out_episode`
/// receives the observed-mode episode and `out_spec` (optional, may be
/// null) receives a gaussian-address spec carrying the prior the episode
/// was generated under, ready for [`vbm_write_episode`].
#[no_mangle]
pub unsafe extern "C" fn vbm_episode_synth(
    timesteps: usize,
    memory_rows: usize,
    code_dim: usize,
    sigma_z2: f64,
    prior_mean_scale: f64,
    seed: u64,
    out_episode: *mut *mut VbmEpisode,
    out_spec: *mut *mut VbmSpec,
) -> VbmStatus {
    guarded(|| {
        if out_episode.is_null() {
            return Err(null_err("out_episode"));
        }
        let cfg = SynthConfig {
            timesteps,
            memory_rows,
            code_dim,
            sigma_z2,
            prior_mean_scale,
            seed,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (episode, truth) = generate_synthetic_episode(&cfg, &mut rng).map_err(lib_err)?;
        if !out_spec.is_null() {
            let spec = ModelSpec::new(
                Variant::GaussianAddress,
                memory_rows,
                code_dim,
                1,
                1,
                sigma_z2,
                truth.prior_mean.clone(),
                nalgebra::DMatrix::identity(memory_rows, memory_rows),
                None,
                None,
            )
            .map_err(lib_err)?;
            *out_spec = Box::into_raw(Box::new(VbmSpec { inner: spec }));
        }
        *out_episode = Box::into_raw(Box::new(VbmEpisode { inner: episode }));
        Ok(())
    })
}

/// Runs coordinate-ascent inference over an episode.
#[no_mangle]
pub unsafe extern "C" fn vbm_write_episode(
    spec: *const VbmSpec,
    episode: *const VbmEpisode,
    sweeps: usize,
    init: VbmInit,
    seed: u64,
    record_trace: bool,
    out: *mut *mut VbmResult,
) -> VbmStatus {
    guarded(|| {
        if spec.is_null() {
            return Err(null_err("spec"));
        }
        if episode.is_null() {
            return Err(null_err("episode"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        let cfg = InferenceConfig {
            sweeps,
            init_mode: match init {
                VbmInit::Prior => InitMode::Prior,
                VbmInit::Random => InitMode::Random,
                VbmInit::DataDependent => InitMode::DataDependent,
            },
            rng_seed: seed,
            elbo_trace: record_trace,
            early_stop_rel_tol: None,
        };
        let result =
            write_episode(&(*spec).inner, (*episode).inner.codes(), &cfg).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(VbmResult {
            spec: (*spec).inner.clone(),
            inner: result,
        }));
        Ok(())
    })
}

/// Runs one of the least-squares baselines (gaussian-address specs only).
/// `iterations` applies to the batched baseline and is ignored otherwise.
#[no_mangle]
pub unsafe extern "C" fn vbm_baseline_write(
    spec: *const VbmSpec,
    episode: *const VbmEpisode,
    kind: VbmBaseline,
    iterations: usize,
    out: *mut *mut VbmResult,
) -> VbmStatus {
    guarded(|| {
        if spec.is_null() {
            return Err(null_err("spec"));
        }
        if episode.is_null() {
            return Err(null_err("episode"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        let kind = match kind {
            VbmBaseline::OnlineNonIterative => BaselineKind::OnlineNonIterative,
            VbmBaseline::BatchedIterative => BaselineKind::BatchedIterative { iterations },
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let result =
            baseline_write(&(*spec).inner, &(*episode).inner, &kind, &mut rng).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(VbmResult {
            spec: (*spec).inner.clone(),
            inner: result,
        }));
        Ok(())
    })
}

/// Last recorded bound value; an error if the run recorded no trace.
#[no_mangle]
pub unsafe extern "C" fn vbm_result_final_elbo(
    result: *const VbmResult,
    out: *mut f64,
) -> VbmStatus {
    guarded(|| {
        if result.is_null() {
            return Err(null_err("result"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        match (*result).inner.final_elbo() {
            Some(v) => {
                *out = v;
                Ok(())
            }
            None => Err((
                VbmStatus::InvalidArgument,
                "result has no recorded bound trace".to_string(),
            )),
        }
    })
}

/// Exact bound breakdown of a result against an episode.
#[no_mangle]
pub unsafe extern "C" fn vbm_elbo_closed_form(
    episode: *const VbmEpisode,
    result: *const VbmResult,
    out: *mut VbmElboBreakdown,
) -> VbmStatus {
    guarded(|| {
        if episode.is_null() {
            return Err(null_err("episode"));
        }
        if result.is_null() {
            return Err(null_err("result"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        let handle = &*result;
        let b = elbo_closed_form(&handle.spec, (*episode).inner.codes(), &handle.inner, None)
            .map_err(lib_err)?;
        *out = VbmElboBreakdown {
            recon: b.recon,
            code_kl: b.code_kl,
            address_kl: b.address_kl,
            memory_kl: b.memory_kl,
            total: b.total,
        };
        Ok(())
    })
}

/// Monte Carlo bound estimate with standard error.
#[no_mangle]
pub unsafe extern "C" fn vbm_elbo_monte_carlo(
    episode: *const VbmEpisode,
    result: *const VbmResult,
    n_samples: usize,
    seed: u64,
    out_estimate: *mut f64,
    out_std_error: *mut f64,
) -> VbmStatus {
    guarded(|| {
        if episode.is_null() {
            return Err(null_err("episode"));
        }
        if result.is_null() {
            return Err(null_err("result"));
        }
        if out_estimate.is_null() || out_std_error.is_null() {
            return Err(null_err("out"));
        }
        let handle = &*result;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (estimate, se) = elbo_monte_carlo(
            &handle.spec,
            (*episode).inner.codes(),
            &handle.inner,
            n_samples,
            &mut rng,
        )
        .map_err(lib_err)?;
        *out_estimate = estimate;
        *out_std_error = se;
        Ok(())
    })
}

/// Serializes a result (including its spec) to JSON.
#[no_mangle]
pub unsafe extern "C" fn vbm_result_to_json(
    result: *const VbmResult,
    out: *mut *mut c_char,
) -> VbmStatus {
    guarded(|| {
        if result.is_null() {
            return Err(null_err("result"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        let handle = &*result;
        give_string(
            out,
            inference_result_to_json(&handle.spec, &handle.inner).map_err(lib_err)?,
        )
    })
}

/// Parses a result JSON document produced by [`vbm_result_to_json`] or the
/// CLI `infer` subcommand.
#[no_mangle]
pub unsafe extern "C" fn vbm_result_from_json(
    json: *const c_char,
    out: *mut *mut VbmResult,
) -> VbmStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let text = read_c_str(json, "json")?;
        let (spec, result) = inference_result_from_json(text).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(VbmResult {
            spec,
            inner: result,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn vbm_result_free(result: *mut VbmResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Draws `n` observations directly from a written memory; `out` receives a
/// JSON array of code vectors.
#[no_mangle]
pub unsafe extern "C" fn vbm_generate_direct(
    result: *const VbmResult,
    n: usize,
    seed: u64,
    out: *mut *mut c_char,
) -> VbmStatus {
    guarded(|| {
        if result.is_null() {
            return Err(null_err("result"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        let handle = &*result;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let samples = generate_direct(
            &handle.spec,
            &handle.inner.memory,
            n,
            &mut rng,
            &mut IdentityDecoder,
        )
        .map_err(lib_err)?;
        give_string(
            out,
            serde_json::to_string(&samples).map_err(|e| lib_err(e.into()))?,
        )
    })
}

/// Runs `steps` iterations of the read chain; `out` receives a JSON array
/// of code vectors.
#[no_mangle]
pub unsafe extern "C" fn vbm_generate_iterative(
    result: *const VbmResult,
    steps: usize,
    seed: u64,
    out: *mut *mut c_char,
) -> VbmStatus {
    guarded(|| {
        if result.is_null() {
            return Err(null_err("result"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        let handle = &*result;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let samples = generate_iterative(
            &handle.spec,
            &handle.inner.memory,
            steps,
            &mut rng,
            &mut IdentityDecoder,
            &mut IdentityEncoder,
        )
        .map_err(lib_err)?;
        give_string(
            out,
            serde_json::to_string(&samples).map_err(|e| lib_err(e.into()))?,
        )
    })
}
