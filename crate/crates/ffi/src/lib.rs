//! C ABI over the specdec engine.
//!
//! Handles are opaque and owned by the caller; free them with the matching
//! `*_free`. Every fallible call returns an `SpdStatus`; on failure the
//! message is available from `spd_last_error` on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use specdec::bench::install_spec_embedding;
use specdec::hybrid_engine::{generate, mean_acceptance_length, Drafters, EngineConfig, Mode};
use specdec::owl_drafter::{compute_alpha, DrafterWeights, TreePolicy};
use specdec::suffix_drafter::SuffixParams;
use specdec::target_model::{TargetConfig, TargetModel};
use specdec::Error;

/// Target model handle.
pub struct SpdModel(TargetModel);

/// Drafter weights handle.
pub struct SpdDrafter(DrafterWeights);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    InvalidArgument = 5,
    MissingDrafter = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpdMode {
    Vanilla = 0,
    Owl = 1,
    OwlNospec = 2,
    Suffix = 3,
    Hybrid = 4,
}

impl From<SpdMode> for Mode {
    fn from(m: SpdMode) -> Self {
        match m {
            SpdMode::Vanilla => Mode::Vanilla,
            SpdMode::Owl => Mode::Owl,
            SpdMode::OwlNospec => Mode::OwlNospec,
            SpdMode::Suffix => Mode::Suffix,
            SpdMode::Hybrid => Mode::Hybrid,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdEngineParams {
    pub mode: SpdMode,
    pub tree_size: u32,
    pub top_k: u32,
    pub depth: u32,
    /// Nonzero appends `[SPEC]` tokens in tree steps.
    pub spec_token: u8,
    pub threshold_c: f64,
    pub max_spec_factor: f64,
    pub max_suffix_depth: u32,
    pub max_new_tokens: u32,
}

impl From<&SpdEngineParams> for EngineConfig {
    fn from(p: &SpdEngineParams) -> Self {
        EngineConfig {
            mode: p.mode.into(),
            threshold_c: p.threshold_c,
            tree: TreePolicy {
                top_k: p.top_k as usize,
                depth: p.depth as usize,
                size: p.tree_size as usize,
            },
            spec_enabled: p.spec_token != 0,
            max_new_tokens: p.max_new_tokens as usize,
            eos: None,
            suffix: SuffixParams {
                max_spec_factor: p.max_spec_factor,
                max_suffix_depth: p.max_suffix_depth as usize,
            },
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SpdStatus {
    match e {
        Error::Io(_) => SpdStatus::Io,
        Error::MalformedHeader(_) | Error::Truncated(_) | Error::MissingTensor(_) | Error::Json(_) => {
            SpdStatus::Format
        }
        Error::MissingDrafter { .. } => SpdStatus::MissingDrafter,
        Error::EmptyInput(_)
        | Error::DimensionMismatch { .. }
        | Error::TopKOutOfRange { .. }
        | Error::TokenOutOfRange { .. }
        | Error::ReservedToken(_)
        | Error::InvalidConfig(_)
        | Error::Dataset(_) => SpdStatus::InvalidArgument,
        _ => SpdStatus::Internal,
    }
}

struct Fail(SpdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SpdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SpdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SpdStatus::Internal
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, Fail> {
    if path.is_null() {
        return Err(Fail(SpdStatus::NullPointer, "path is null".into()));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Fail(SpdStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

fn null(what: &str) -> Fail {
    Fail(SpdStatus::NullPointer, format!("{what} is null"))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn spd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fills `out` with the engine defaults (hybrid mode).
///
/// # Safety
/// `out` must be null or point to writable memory for one `SpdEngineParams`.
#[no_mangle]
pub unsafe extern "C" fn spd_engine_params_default(out: *mut SpdEngineParams) -> SpdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = EngineConfig::default();
        *out = SpdEngineParams {
            mode: SpdMode::Hybrid,
            tree_size: c.tree.size as u32,
            top_k: c.tree.top_k as u32,
            depth: c.tree.depth as u32,
            spec_token: u8::from(c.spec_enabled),
            threshold_c: c.threshold_c,
            max_spec_factor: c.suffix.max_spec_factor,
            max_suffix_depth: c.suffix.max_suffix_depth as u32,
            max_new_tokens: c.max_new_tokens as u32,
        };
        Ok(())
    })
}

/// Writes the drafter output scale for `depth` and `dim` to `alpha` and the
/// unscaled base to `alpha0`. Either pointer may be null.
///
/// # Safety
/// Non-null pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn spd_compute_alpha(depth: u32, dim: u32, alpha: *mut f64, alpha0: *mut f64) -> SpdStatus {
    guard(|| {
        if depth == 0 || dim == 0 {
            return Err(Fail(SpdStatus::InvalidArgument, "depth and dim must be positive".into()));
        }
        let (a0, a) = compute_alpha(depth as usize, dim as usize);
        if let Some(p) = alpha.as_mut() {
            *p = a;
        }
        if let Some(p) = alpha0.as_mut() {
            *p = a0;
        }
        Ok(())
    })
}

/// Creates a seeded target model; `vocab` excludes `[SPEC]`.
///
/// # Safety
/// `out` must point to writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn spd_model_seed(
    vocab: u32,
    hidden: u32,
    layers: u32,
    heads: u32,
    seed: u64,
    out: *mut *mut SpdModel,
) -> SpdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let config = TargetConfig {
            vocab_size: vocab as usize + 1,
            hidden_size: hidden as usize,
            num_layers: layers as usize,
            num_heads: heads as usize,
            ..TargetConfig::default()
        };
        let m = TargetModel::seeded(config, seed)?;
        *out = Box::into_raw(Box::new(SpdModel(m)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spd_model_load(path: *const c_char, out: *mut *mut SpdModel) -> SpdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = TargetModel::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SpdModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spd_model_save(model: *const SpdModel, path: *const c_char) -> SpdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.0.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Real vocabulary size (the `[SPEC]` id).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spd_model_vocab(model: *const SpdModel) -> u32 {
    model.as_ref().map_or(0, |m| m.0.spec_token())
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spd_model_free(model: *mut SpdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spd_drafter_load(path: *const c_char, out: *mut *mut SpdDrafter) -> SpdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = DrafterWeights::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SpdDrafter(d)));
        Ok(())
    })
}

/// # Safety
/// `drafter` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spd_drafter_free(drafter: *mut SpdDrafter) {
    if !drafter.is_null() {
        drop(Box::from_raw(drafter));
    }
}

/// Decodes `prompt` and writes up to `capacity` tokens to `out_tokens`.
/// `out_len` receives the full output length; `BufferTooSmall` is returned
/// (with the prefix written) when it exceeds `capacity`. `mean_al` may be
/// null; it receives NaN when no verification step ran. Either drafter may
/// be null if `params->mode` does not need it.
///
/// # Safety
/// Handles must be live; `prompt` must hold `prompt_len` ids and
/// `out_tokens` room for `capacity` ids.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn spd_generate(
    model: *const SpdModel,
    drafter_spec: *const SpdDrafter,
    drafter_nospec: *const SpdDrafter,
    params: *const SpdEngineParams,
    prompt: *const u32,
    prompt_len: usize,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
    mean_al: *mut f64,
) -> SpdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let out_len = out_len.as_mut().ok_or_else(|| null("out_len"))?;
        if prompt.is_null() {
            return Err(null("prompt"));
        }
        if out_tokens.is_null() && capacity > 0 {
            return Err(null("out_tokens"));
        }
        let prompt = std::slice::from_raw_parts(prompt, prompt_len);
        let drafters = Drafters {
            spec: drafter_spec.as_ref().map(|d| &d.0),
            nospec: drafter_nospec.as_ref().map(|d| &d.0),
        };
        let model = install_spec_embedding(&m.0, drafters)?;
        let g = generate(&model, drafters, prompt, &EngineConfig::from(p))?;
        *out_len = g.tokens.len();
        if let Some(al) = mean_al.as_mut() {
            *al = mean_acceptance_length(&g.steps).unwrap_or(f64::NAN);
        }
        let n = g.tokens.len().min(capacity);
        if n > 0 {
            ptr::copy_nonoverlapping(g.tokens.as_ptr(), out_tokens, n);
        }
        if g.tokens.len() > capacity {
            return Err(Fail(
                SpdStatus::BufferTooSmall,
                format!("output has {} tokens, buffer holds {capacity}", g.tokens.len()),
            ));
        }
        Ok(())
    })
}
