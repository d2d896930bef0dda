//! C ABI over `sgseq-core`.
//!
//! Every function returns an [`SgseqStatus`]; on failure the message is
//! available from [`sgseq_last_error_message`] on the same thread. Objects
//! cross the boundary as opaque handles released by their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sgseq_core::codec::parse_sequence;
use sgseq_core::eval::{evaluate, load_seen_triplets, EvalConfig, EvalReport, Metric, Protocol};
use sgseq_core::gradcheck::{run_gradcheck, GradcheckConfig};
use sgseq_core::io::{load_categories, load_scene_graphs};
use sgseq_core::model::{giou, iou, Box2};
use sgseq_core::tokenizer::Vocabulary;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgseqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// File could not be read or parsed.
    Io = 3,
    /// An argument is out of range or inconsistent.
    InvalidArgument = 4,
    /// Output buffer too small; the required length was still written.
    BufferTooSmall = 5,
    /// The computation ran but its check failed (gradcheck).
    CheckFailed = 6,
    Panic = 7,
}

/// Normalized corners, every coordinate in `[0, 1]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgseqBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SgseqParseStats {
    pub n_triplets: usize,
    pub n_unique_triplets: usize,
    pub n_rel_tokens: usize,
}

/// Half-open token ranges of one parsed triplet; each range ends after its
/// delimiter token.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SgseqSpan {
    pub subject_start: usize,
    pub subject_end: usize,
    pub predicate_start: usize,
    pub predicate_end: usize,
    pub object_start: usize,
    pub object_end: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SgseqGradcheckResult {
    pub loss_max_rel_error: f64,
    pub network_max_rel_error: f64,
    pub network_parameters: usize,
}

/// Loaded vocabulary.
pub struct SgseqVocab(Vocabulary);

/// Evaluation result.
pub struct SgseqEvalReport(EvalReport);

pub const SGSEQ_PROTOCOL_SGDET: i32 = 0;
pub const SGSEQ_PROTOCOL_SGCLS: i32 = 1;
pub const SGSEQ_PROTOCOL_PCLS: i32 = 2;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(SgseqStatus, String);

impl Fail {
    fn new(status: SgseqStatus, msg: impl std::fmt::Display) -> Self {
        Fail(status, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SgseqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SgseqStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SgseqStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::new(SgseqStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::new(SgseqStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail::new(SgseqStatus::NullPointer, format!("{what} is null")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail::new(SgseqStatus::NullPointer, format!("{what} is null")))
}

fn to_box(b: &SgseqBox) -> Result<Box2, Fail> {
    let r = Box2::new(b.x1, b.y1, b.x2, b.y2);
    if !r.is_valid() {
        return Err(Fail::new(SgseqStatus::InvalidArgument, format!("invalid box {b:?}")));
    }
    Ok(r)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn sgseq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sgseq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library.
#[no_mangle]
pub unsafe extern "C" fn sgseq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// Pointers must be null or valid for reads (boxes) and writes (`out`).
#[no_mangle]
pub unsafe extern "C" fn sgseq_iou(a: *const SgseqBox, b: *const SgseqBox, out: *mut f64) -> SgseqStatus {
    guard(|| {
        let (a, b) = (to_box(ref_arg(a, "a")?)?, to_box(ref_arg(b, "b")?)?);
        *out_arg(out, "out")? = iou(&a, &b);
        Ok(())
    })
}

/// # Safety
/// Pointers must be null or valid for reads (boxes) and writes (`out`).
#[no_mangle]
pub unsafe extern "C" fn sgseq_giou(a: *const SgseqBox, b: *const SgseqBox, out: *mut f64) -> SgseqStatus {
    guard(|| {
        let (a, b) = (to_box(ref_arg(a, "a")?)?, to_box(ref_arg(b, "b")?)?);
        *out_arg(out, "out")? = giou(&a, &b);
        Ok(())
    })
}

/// Loads `vocab.txt`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgseq_vocab_load(path: *const c_char, out: *mut *mut SgseqVocab) -> SgseqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let p = path_arg(path, "path")?;
        let v = Vocabulary::load(&p).map_err(|e| Fail::new(SgseqStatus::Io, format!("{}: {e}", p.display())))?;
        *out = Box::into_raw(Box::new(SgseqVocab(v)));
        Ok(())
    })
}

/// # Safety
/// `v` must be null or a handle from [`sgseq_vocab_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn sgseq_vocab_free(v: *mut SgseqVocab) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// # Safety
/// `v` must be a live vocabulary handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgseq_vocab_size(v: *const SgseqVocab, out: *mut usize) -> SgseqStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(v, "vocab")?.0.len();
        Ok(())
    })
}

/// Tokenizes `text` into `ids` (capacity `cap`). `len` receives the token
/// count; when it exceeds `cap` nothing is written and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `ids` must be valid for `cap` writes (may be null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn sgseq_vocab_tokenize(
    v: *const SgseqVocab,
    text: *const c_char,
    ids: *mut u32,
    cap: usize,
    len: *mut usize,
) -> SgseqStatus {
    guard(|| {
        let toks = ref_arg(v, "vocab")?.0.tokenize(str_arg(text, "text")?);
        *out_arg(len, "len")? = toks.len();
        if toks.len() > cap {
            return Err(Fail::new(
                SgseqStatus::BufferTooSmall,
                format!("{} tokens for capacity {cap}", toks.len()),
            ));
        }
        if !toks.is_empty() {
            if ids.is_null() {
                return Err(Fail::new(SgseqStatus::NullPointer, "ids is null"));
            }
            std::slice::from_raw_parts_mut(ids, toks.len()).copy_from_slice(&toks);
        }
        Ok(())
    })
}

/// Parses a token sequence. Statistics are always written; spans go to
/// `spans` (capacity `cap`), with `n_spans` receiving the full count.
///
/// # Safety
/// `tokens` must be valid for `n` reads; `spans` for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn sgseq_parse(
    v: *const SgseqVocab,
    tokens: *const u32,
    n: usize,
    stats: *mut SgseqParseStats,
    spans: *mut SgseqSpan,
    cap: usize,
    n_spans: *mut usize,
) -> SgseqStatus {
    guard(|| {
        let vocab = &ref_arg(v, "vocab")?.0;
        let toks: &[u32] = if n == 0 {
            &[]
        } else if tokens.is_null() {
            return Err(Fail::new(SgseqStatus::NullPointer, "tokens is null"));
        } else {
            std::slice::from_raw_parts(tokens, n)
        };
        if let Some((i, t)) = toks.iter().enumerate().find(|(_, &t)| t as usize >= vocab.len()) {
            return Err(Fail::new(
                SgseqStatus::InvalidArgument,
                format!("token {t} at position {i} outside vocabulary of {}", vocab.len()),
            ));
        }
        let (found, st) = parse_sequence(toks, vocab);
        *out_arg(stats, "stats")? = SgseqParseStats {
            n_triplets: st.n_triplets,
            n_unique_triplets: st.n_unique_triplets,
            n_rel_tokens: st.n_rel_tokens,
        };
        *out_arg(n_spans, "n_spans")? = found.len();
        if found.len() > cap {
            return Err(Fail::new(
                SgseqStatus::BufferTooSmall,
                format!("{} spans for capacity {cap}", found.len()),
            ));
        }
        if !found.is_empty() {
            if spans.is_null() {
                return Err(Fail::new(SgseqStatus::NullPointer, "spans is null"));
            }
            let out = std::slice::from_raw_parts_mut(spans, found.len());
            for (o, s) in out.iter_mut().zip(&found) {
                *o = SgseqSpan {
                    subject_start: s.subject.start,
                    subject_end: s.subject.end,
                    predicate_start: s.predicate.start,
                    predicate_end: s.predicate.end,
                    object_start: s.object.start,
                    object_end: s.object.end,
                };
            }
        }
        Ok(())
    })
}

/// Evaluates predicted graphs against ground truth at K = 20, 50, 100.
/// `seen_path` may be null, in which case zero-shot recall is undefined.
///
/// # Safety
/// Paths must be NUL-terminated strings (or null for `seen_path`); `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgseq_evaluate_files(
    categories_path: *const c_char,
    pred_path: *const c_char,
    gt_path: *const c_char,
    seen_path: *const c_char,
    protocol: i32,
    out: *mut *mut SgseqEvalReport,
) -> SgseqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let protocol = match protocol {
            SGSEQ_PROTOCOL_SGDET => Protocol::SgDet,
            SGSEQ_PROTOCOL_SGCLS => Protocol::SgCls,
            SGSEQ_PROTOCOL_PCLS => Protocol::PCls,
            p => return Err(Fail::new(SgseqStatus::InvalidArgument, format!("unknown protocol {p}"))),
        };
        let io = |e: &dyn std::fmt::Display| Fail::new(SgseqStatus::Io, e);
        let space = load_categories(path_arg(categories_path, "categories_path")?, 0.5, 0).map_err(|e| io(&e))?;
        let preds = load_scene_graphs(path_arg(pred_path, "pred_path")?, &space).map_err(|e| io(&e))?;
        let gts = load_scene_graphs(path_arg(gt_path, "gt_path")?, &space).map_err(|e| io(&e))?;
        let seen = if seen_path.is_null() {
            None
        } else {
            Some(load_seen_triplets(path_arg(seen_path, "seen_path")?, &space).map_err(|e| io(&e))?)
        };
        let cfg = EvalConfig {
            protocol,
            seen_triplets: seen,
            ..Default::default()
        };
        let report = evaluate(&preds, &gts, &space, &cfg)
            .map_err(|e| Fail::new(SgseqStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(SgseqEvalReport(report)));
        Ok(())
    })
}

/// Value of one report key (e.g. `"R@50"`, `"zR@100"`) as a double.
/// Undefined metrics give `InvalidArgument`.
///
/// # Safety
/// `r` must be a live report handle; `key` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sgseq_eval_report_value(
    r: *const SgseqEvalReport,
    key: *const c_char,
    out: *mut f64,
) -> SgseqStatus {
    guard(|| {
        let kv = ref_arg(r, "report")?.0.to_key_values();
        let key = str_arg(key, "key")?;
        let v = kv
            .get(key)
            .ok_or_else(|| Fail::new(SgseqStatus::InvalidArgument, format!("no key {key:?}")))?;
        let m = Metric::parse(v)
            .ok_or_else(|| Fail::new(SgseqStatus::InvalidArgument, format!("{key} is {v}")))?;
        *out_arg(out, "out")? = m.value();
        Ok(())
    })
}

/// All report values as `key = value` lines with exact ratios. Release with
/// [`sgseq_string_free`].
///
/// # Safety
/// `r` must be a live report handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgseq_eval_report_text(r: *const SgseqEvalReport, out: *mut *mut c_char) -> SgseqStatus {
    guard(|| {
        let text = ref_arg(r, "report")?.0.key_value_text();
        *out_arg(out, "out")? = CString::new(text)
            .map_err(|e| Fail::new(SgseqStatus::InvalidArgument, e))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a handle from [`sgseq_evaluate_files`], freed once.
#[no_mangle]
pub unsafe extern "C" fn sgseq_eval_report_free(r: *mut SgseqEvalReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Runs the finite-difference gradient check with default dimensions and
/// `layers` attention layers. Returns `CheckFailed` when a tolerance is
/// exceeded; `out` is filled either way.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgseq_gradcheck(seed: u64, layers: usize, out: *mut SgseqGradcheckResult) -> SgseqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let r = run_gradcheck(&GradcheckConfig {
            seed,
            layers,
            ..Default::default()
        })
        .map_err(|e| Fail::new(SgseqStatus::InvalidArgument, e))?;
        *out = SgseqGradcheckResult {
            loss_max_rel_error: r.loss_max_rel_error,
            network_max_rel_error: r.network_max_rel_error,
            network_parameters: r.network_parameters,
        };
        if !r.passed() {
            return Err(Fail::new(
                SgseqStatus::CheckFailed,
                format!(
                    "relative error {:.3e} (loss) / {:.3e} (network) above tolerance",
                    r.loss_max_rel_error, r.network_max_rel_error
                ),
            ));
        }
        Ok(())
    })
}
