//! C ABI over `fmx-core`: load a trained checkpoint, encode, infer responsibilities, sample,
//! score, and train from a config file.
//!
//! Every function returns an [`FmxStatus`]. On failure a message is available from
//! [`fmx_last_error`] on the same thread until the next call. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use fmx_core::checkpoint::Checkpoint;
use fmx_core::cli::{evaluate, sample_images, train_run, RunConfig};
use fmx_core::data::Dataset;
use fmx_core::nets::Model;
use fmx_core::prior::FactorialPriorState;
use fmx_core::FmxError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferSize = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    Shape = 7,
    Index = 8,
    Domain = 9,
    Numeric = 10,
    Panic = 11,
}

/// A trained model and prior loaded from a checkpoint.
pub struct FmxModel {
    model: Model,
    prior: FactorialPriorState,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FmxShape {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub blocks: usize,
    pub block_dim: usize,
    /// Sum of the component counts over blocks.
    pub total_components: usize,
}

/// Predictive bound of one datum and its terms.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FmxBound {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_r: f64,
    pub bound: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FmxStatus, String);

impl From<FmxError> for Failure {
    fn from(e: FmxError) -> Self {
        let status = match &e {
            FmxError::Domain(_) => FmxStatus::Domain,
            FmxError::Shape { .. } => FmxStatus::Shape,
            FmxError::Index { .. } => FmxStatus::Index,
            FmxError::Config(_) => FmxStatus::Config,
            FmxError::Parse { .. } => FmxStatus::Parse,
            FmxError::Io { .. } => FmxStatus::Io,
            FmxError::Numeric(_) => FmxStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

type Res<T = ()> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> Res) -> FmxStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FmxStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            FmxStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FmxStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(h: *const FmxModel) -> Res<&'a FmxModel> {
    h.as_ref().ok_or_else(|| null("model handle"))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Res<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, want: usize, what: &str) -> Res<&'a mut [T]> {
    if len != want {
        return Err(Failure(
            FmxStatus::BufferSize,
            format!("{what}: buffer holds {len} values, need {want}"),
        ));
    }
    if want == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn c_path(p: *const c_char, what: &str) -> Res<PathBuf> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            FmxStatus::InvalidArgument,
            format!("{what} is not valid UTF-8"),
        )
    })?;
    Ok(PathBuf::from(s))
}

fn check_dim(m: &FmxModel, x: &[f64]) -> Res {
    if x.len() != m.model.data_dim() {
        return Err(Failure(
            FmxStatus::Shape,
            format!(
                "datum has {} values, model expects {}",
                x.len(),
                m.model.data_dim()
            ),
        ));
    }
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn fmx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Version string of this library; static storage.
#[no_mangle]
pub extern "C" fn fmx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `fmx train`. On success `*out` owns a handle to release
/// with [`fmx_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fmx_model_load(path: *const c_char, out: *mut *mut FmxModel) -> FmxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = c_path(path, "path")?;
        let ck = Checkpoint::load(&p)?;
        let handle = Box::new(FmxModel {
            model: ck.state.model,
            prior: ck.state.prior,
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Releases a handle from [`fmx_model_load`]. Null is ignored.
///
/// # Safety
/// `h` must come from [`fmx_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fmx_model_free(h: *mut FmxModel) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fmx_model_shape(h: *const FmxModel, out: *mut FmxShape) -> FmxStatus {
    guard(|| {
        let m = model_ref(h)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = FmxShape {
            data_dim: m.model.data_dim(),
            latent_dim: m.model.latent_dim(),
            blocks: m.prior.blocks(),
            block_dim: m.prior.dim(),
            total_components: m.prior.ks().iter().sum(),
        };
        Ok(())
    })
}

/// Writes the component count of each block into `ks[0..blocks]`.
///
/// # Safety
/// `h` must be a live handle and `ks` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn fmx_model_components(
    h: *const FmxModel,
    ks: *mut usize,
    len: usize,
) -> FmxStatus {
    guard(|| {
        let m = model_ref(h)?;
        let want = m.prior.ks();
        output(ks, len, want.len(), "ks")?.copy_from_slice(&want);
        Ok(())
    })
}

/// Encoder mean and log-variance of one datum.
///
/// # Safety
/// `x` must point to `x_len` values; `mu` and `log_var` to `latent_len` writable values each.
#[no_mangle]
pub unsafe extern "C" fn fmx_encode(
    h: *const FmxModel,
    x: *const f64,
    x_len: usize,
    mu: *mut f64,
    log_var: *mut f64,
    latent_len: usize,
) -> FmxStatus {
    guard(|| {
        let m = model_ref(h)?;
        let x = input(x, x_len, "x")?;
        check_dim(m, x)?;
        let latent = m.model.latent_dim();
        let enc = m.model.encode_x(x)?;
        output(mu, latent_len, latent, "mu")?.copy_from_slice(enc.mu());
        output(log_var, latent_len, latent, "log_var")?.copy_from_slice(enc.log_var());
        Ok(())
    })
}

/// Optimal responsibilities of one datum, block after block (`out_len` = total components).
///
/// # Safety
/// `x` must point to `x_len` values and `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn fmx_responsibilities(
    h: *const FmxModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> FmxStatus {
    guard(|| {
        let m = model_ref(h)?;
        let x = input(x, x_len, "x")?;
        check_dim(m, x)?;
        let total: usize = m.prior.ks().iter().sum();
        let out = output(out, out_len, total, "out")?;
        let resp = m.prior.responsibilities(&m.model.encode_x(x)?)?;
        let mut pos = 0;
        for i in 0..m.prior.blocks() {
            let g = resp.block(i);
            out[pos..pos + g.len()].copy_from_slice(g);
            pos += g.len();
        }
        Ok(())
    })
}

/// Draws `count` codes from the prior and decodes them.
///
/// `clamp` holds one entry per block: a 0-based component index, or a negative value to
/// sample that block freely. It may be null when `clamp_len` is 0. Codes are written
/// 0-based, `count × blocks`; decoded means `count × data_dim`.
///
/// # Safety
/// Every pointer must cover its stated length.
#[no_mangle]
pub unsafe extern "C" fn fmx_sample(
    h: *const FmxModel,
    clamp: *const i64,
    clamp_len: usize,
    count: usize,
    seed: u64,
    codes: *mut u32,
    codes_len: usize,
    images: *mut f64,
    images_len: usize,
) -> FmxStatus {
    guard(|| {
        let m = model_ref(h)?;
        let ks = m.prior.ks();
        let clamp: Vec<Option<usize>> = if clamp_len == 0 {
            vec![None; ks.len()]
        } else {
            if clamp.is_null() {
                return Err(null("clamp"));
            }
            if clamp_len != ks.len() {
                return Err(Failure(
                    FmxStatus::BufferSize,
                    format!(
                        "clamp has {clamp_len} entries, model has {} blocks",
                        ks.len()
                    ),
                ));
            }
            let raw = slice::from_raw_parts(clamp, clamp_len);
            let mut out = Vec::with_capacity(raw.len());
            for (i, (&c, &k)) in raw.iter().zip(&ks).enumerate() {
                if c >= 0 && c as usize >= k {
                    return Err(Failure(
                        FmxStatus::Index,
                        format!("clamp for block {i} is {c}, block has {k} components"),
                    ));
                }
                out.push((c >= 0).then_some(c as usize));
            }
            out
        };
        let codes = output(codes, codes_len, count * ks.len(), "codes")?;
        let pixels = m.model.data_dim();
        let images = output(images, images_len, count * pixels, "images")?;
        let s = sample_images(&m.model, &m.prior, &clamp, count, seed)?;
        for (j, (code, img)) in s.codes.iter().zip(&s.images).enumerate() {
            for (dst, &k) in codes[j * ks.len()..(j + 1) * ks.len()].iter_mut().zip(code) {
                *dst = k as u32;
            }
            images[j * pixels..(j + 1) * pixels].copy_from_slice(img);
        }
        Ok(())
    })
}

/// Predictive bound of one datum, averaged over `n_samples` reparameterized draws.
///
/// # Safety
/// `x` must point to `x_len` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fmx_test_elbo(
    h: *const FmxModel,
    x: *const f64,
    x_len: usize,
    n_samples: usize,
    seed: u64,
    out: *mut FmxBound,
) -> FmxStatus {
    guard(|| {
        let m = model_ref(h)?;
        let x = input(x, x_len, "x")?;
        check_dim(m, x)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let data = Dataset::new(vec![x.to_vec()], 1, x.len())?;
        let row = evaluate(&m.model, &m.prior, &data, n_samples, seed)?
            .pop()
            .expect("one datum");
        *out = FmxBound {
            recon: row.recon,
            kl_z: row.kl_z,
            kl_r: row.kl_r,
            bound: row.bound,
        };
        Ok(())
    })
}

/// Runs a full training job from a JSON config into `out_dir`, which receives
/// `metrics.csv` and `checkpoint.fmxc`. A negative `seed` keeps the config's seed.
///
/// # Safety
/// Both paths must be nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fmx_train(
    config: *const c_char,
    out_dir: *const c_char,
    seed: i64,
) -> FmxStatus {
    guard(|| {
        let config = c_path(config, "config")?;
        let out = c_path(out_dir, "out_dir")?;
        let mut cfg = RunConfig::load(&config)?;
        if seed >= 0 {
            cfg.train.seed = seed as u64;
        }
        train_run(&cfg, &out, None)?;
        Ok(())
    })
}
