//! C ABI over `syncvsr`.
//!
//! Every fallible function returns an [`SvStatus`]; on failure the message is
//! kept per thread and read back with [`sv_last_error_message`]. Handles are
//! opaque, created by `*_load` and released by the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use syncvsr::corpus::{self, Dataset, World};
use syncvsr::model::{self, Model};
use syncvsr::quantizer::{self, Codebook};
use syncvsr::tensor::Mat;
use syncvsr::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Corrupt = 4,
    VersionMismatch = 5,
    FingerprintMismatch = 6,
    Infeasible = 7,
    OutOfRange = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

pub struct SvWorld(World);
pub struct SvDataset(Dataset);
pub struct SvCodebook(Codebook);
pub struct SvModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).unwrap_or_default()));
}

fn status_of(err: &Error) -> SvStatus {
    match err {
        Error::Io { .. } => SvStatus::Io,
        Error::Corrupt { .. } | Error::Json(_) => SvStatus::Corrupt,
        Error::VersionMismatch { .. } => SvStatus::VersionMismatch,
        Error::FingerprintMismatch { .. } | Error::CheckpointMismatch(_) | Error::SplitMismatch(_) => {
            SvStatus::FingerprintMismatch
        }
        Error::InfeasibleConfig(_) | Error::InfeasibleCoverage(_) | Error::InfeasibleCtc { .. } => SvStatus::Infeasible,
        Error::LabelOutOfRange { .. } | Error::TooManyFrames { .. } => SvStatus::OutOfRange,
        _ => SvStatus::InvalidArgument,
    }
}

struct Fail(SvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SvStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SvStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SvStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn copy_out<T: Copy>(src: &[T], buf: *mut T, cap: usize, len_out: *mut usize) -> Result<(), Fail> {
    write(len_out, src.len(), "len_out")?;
    if src.len() > cap {
        return Err(Fail(SvStatus::BufferTooSmall, format!("need {} elements, have {cap}", src.len())));
    }
    if !src.is_empty() {
        if buf.is_null() {
            return Err(null("buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    }
    Ok(())
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message (NUL-terminated, truncated
/// to `cap`) and returns the full message length excluding the NUL.
/// Returns 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn sv_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && cap > 0 {
                let n = bytes.len().min(cap - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

// ---------------------------------------------------------------------------
// World and datasets

/// Loads the world written next to the splits in `data_dir`.
///
/// # Safety
/// `data_dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_world_load(data_dir: *const c_char, out: *mut *mut SvWorld) -> SvStatus {
    guard(|| {
        let dir = path_arg(data_dir, "data_dir")?;
        let world = corpus::load_world(&dir)?;
        write(out, boxed(SvWorld(world)), "out")
    })
}

/// # Safety
/// `world` must come from [`sv_world_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_world_free(world: *mut SvWorld) {
    free(world)
}

/// # Safety
/// `world` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_world_num_words(world: *const SvWorld, out: *mut usize) -> SvStatus {
    guard(|| write(out, handle(world, "world")?.0.num_words(), "out"))
}

/// Copies the NUL-terminated world fingerprint into `buf`.
///
/// # Safety
/// `world` must be a live handle; `buf` must be valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn sv_world_fingerprint(
    world: *const SvWorld,
    buf: *mut c_char,
    cap: usize,
    len_out: *mut usize,
) -> SvStatus {
    guard(|| {
        let fp = CString::new(handle(world, "world")?.0.fingerprint()).unwrap_or_default();
        copy_out(fp.as_bytes_with_nul(), buf.cast::<u8>(), cap, len_out)
    })
}

/// Loads one split directory. A non-null `world` enforces its fingerprint.
///
/// # Safety
/// `split_dir` must be a NUL-terminated string; `world` null or live;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_dataset_load(
    split_dir: *const c_char,
    world: *const SvWorld,
    out: *mut *mut SvDataset,
) -> SvStatus {
    guard(|| {
        let dir = path_arg(split_dir, "split_dir")?;
        let fp = world.as_ref().map(|w| w.0.fingerprint());
        let ds = corpus::load_dataset(&dir, fp)?;
        write(out, boxed(SvDataset(ds)), "out")
    })
}

/// # Safety
/// `dataset` must come from [`sv_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_dataset_free(dataset: *mut SvDataset) {
    free(dataset)
}

/// # Safety
/// `dataset` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_dataset_len(dataset: *const SvDataset, out: *mut usize) -> SvStatus {
    guard(|| write(out, handle(dataset, "dataset")?.0.len(), "out"))
}

unsafe fn sample<'a>(dataset: *const SvDataset, index: usize) -> Result<&'a corpus::Sample, Fail> {
    let ds = &handle(dataset, "dataset")?.0;
    ds.samples
        .get(index)
        .ok_or_else(|| Fail(SvStatus::OutOfRange, format!("sample {index} of {}", ds.len())))
}

/// Frame count and feature width of sample `index`.
///
/// # Safety
/// `dataset` must be a live handle; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn sv_dataset_sample_shape(
    dataset: *const SvDataset,
    index: usize,
    frames_out: *mut usize,
    dim_out: *mut usize,
) -> SvStatus {
    guard(|| {
        let s = sample(dataset, index)?;
        write(frames_out, s.num_frames, "frames_out")?;
        write(dim_out, s.visual_dim, "dim_out")
    })
}

/// Copies the row-major `frames × dim` visual features of sample `index`.
///
/// # Safety
/// `dataset` must be a live handle; `buf` valid for `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn sv_dataset_sample_frames(
    dataset: *const SvDataset,
    index: usize,
    buf: *mut f32,
    cap: usize,
    len_out: *mut usize,
) -> SvStatus {
    guard(|| copy_out(&sample(dataset, index)?.visual_frames, buf, cap, len_out))
}

/// Copies the label codes of sample `index`: one word id in word mode, the
/// grapheme sequence in sentence mode.
///
/// # Safety
/// `dataset` must be a live handle; `buf` valid for `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn sv_dataset_sample_label(
    dataset: *const SvDataset,
    index: usize,
    buf: *mut u16,
    cap: usize,
    len_out: *mut usize,
) -> SvStatus {
    guard(|| copy_out(&sample(dataset, index)?.label.as_codes(), buf, cap, len_out))
}

// ---------------------------------------------------------------------------
// Codebook

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_codebook_load(path: *const c_char, out: *mut *mut SvCodebook) -> SvStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        let cb = quantizer::load_codebook(&p)?;
        write(out, boxed(SvCodebook(cb)), "out")
    })
}

/// # Safety
/// `codebook` must come from [`sv_codebook_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_codebook_free(codebook: *mut SvCodebook) {
    free(codebook)
}

/// # Safety
/// `codebook` must be a live handle; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn sv_codebook_shape(
    codebook: *const SvCodebook,
    size_out: *mut usize,
    dim_out: *mut usize,
) -> SvStatus {
    guard(|| {
        let cb = &handle(codebook, "codebook")?.0;
        write(size_out, cb.size(), "size_out")?;
        write(dim_out, cb.dim(), "dim_out")
    })
}

/// Nearest-centroid ids for `rows` row-major feature vectors of width `dim`.
///
/// # Safety
/// `features` valid for `rows * dim` doubles; `tokens_out` for `rows` ids.
#[no_mangle]
pub unsafe extern "C" fn sv_codebook_quantize(
    codebook: *const SvCodebook,
    features: *const f64,
    rows: usize,
    dim: usize,
    tokens_out: *mut u16,
) -> SvStatus {
    guard(|| {
        let cb = &handle(codebook, "codebook")?.0;
        let n = rows
            .checked_mul(dim)
            .ok_or_else(|| Fail(SvStatus::InvalidArgument, "rows * dim overflows".into()))?;
        let x = Mat::from_vec(rows, dim, slice(features, n, "features")?.to_vec());
        let ids = quantizer::quantize(cb, &x)?;
        let mut written = 0;
        copy_out(&ids, tokens_out, rows, &mut written)
    })
}

// ---------------------------------------------------------------------------
// Model

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_model_load(path: *const c_char, out: *mut *mut SvModel) -> SvStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        let ck = model::load_checkpoint(&p)?;
        write(out, boxed(SvModel(ck.model)), "out")
    })
}

/// # Safety
/// `model` must come from [`sv_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_model_free(model: *mut SvModel) {
    free(model)
}

/// Word-classifier prediction for sample `index`.
///
/// # Safety
/// Handles live; `word_out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_model_predict_word(
    model: *const SvModel,
    dataset: *const SvDataset,
    index: usize,
    word_out: *mut usize,
) -> SvStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let word = m.predict_word(sample(dataset, index)?)?;
        write(word_out, word, "word_out")
    })
}

/// Greedy decoder transcript (grapheme ids, no BOS/EOS) for sample `index`.
///
/// # Safety
/// Handles live; `buf` valid for `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn sv_model_transcribe(
    model: *const SvModel,
    dataset: *const SvDataset,
    index: usize,
    buf: *mut u16,
    cap: usize,
    len_out: *mut usize,
) -> SvStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let frames = m.input_frames(sample(dataset, index)?)?;
        copy_out(&m.greedy_transcribe(&frames)?, buf, cap, len_out)
    })
}

// ---------------------------------------------------------------------------
// Pure functions

/// Edit distance between two id sequences.
///
/// # Safety
/// `a` valid for `na`, `b` for `nb` elements.
#[no_mangle]
pub unsafe extern "C" fn sv_levenshtein(
    a: *const u32,
    na: usize,
    b: *const u32,
    nb: usize,
    out: *mut usize,
) -> SvStatus {
    guard(|| {
        let d = syncvsr::analysis::levenshtein(slice(a, na, "a")?, slice(b, nb, "b")?);
        write(out, d, "out")
    })
}

/// Word error rate of `hyp` against a non-empty `reference`.
///
/// # Safety
/// `hyp` valid for `nh`, `reference` for `nr` elements.
#[no_mangle]
pub unsafe extern "C" fn sv_wer(
    hyp: *const u32,
    nh: usize,
    reference: *const u32,
    nr: usize,
    out: *mut f64,
) -> SvStatus {
    guard(|| {
        let w = syncvsr::analysis::wer(slice(hyp, nh, "hyp")?, slice(reference, nr, "reference")?)?;
        write(out, w, "out")
    })
}

/// CTC negative log-likelihood of `target` under `frames × classes` logits
/// (blank is the last class).
///
/// # Safety
/// `logits` valid for `frames * classes`, `target` for `target_len` elements.
#[no_mangle]
pub unsafe extern "C" fn sv_ctc_loss(
    logits: *const f64,
    frames: usize,
    classes: usize,
    target: *const u32,
    target_len: usize,
    out: *mut f64,
) -> SvStatus {
    guard(|| {
        let n = frames
            .checked_mul(classes)
            .ok_or_else(|| Fail(SvStatus::InvalidArgument, "frames * classes overflows".into()))?;
        let x = Mat::from_vec(frames, classes, slice(logits, n, "logits")?.to_vec());
        let y: Vec<usize> = slice(target, target_len, "target")?.iter().map(|&g| g as usize).collect();
        if y.iter().any(|&g| g + 1 >= classes.max(1)) {
            return Err(Fail(SvStatus::OutOfRange, "target id collides with blank or exceeds classes".into()));
        }
        write(out, syncvsr::losses::ctc_loss(&x, &y)?.value, "out")
    })
}
