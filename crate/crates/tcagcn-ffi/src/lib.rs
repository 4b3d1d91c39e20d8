//! C ABI over the core library: opaque handles, integer statuses, and a
//! thread-local error message. `include/tcagcn.h` is regenerated from these
//! declarations on every build.
//!
//! Pointer contract: handles come from this library and are freed exactly
//! once with their matching `_free`; every other pointer argument is
//! borrowed for the duration of the call only.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tcagcn::autodiff::ops::BnMode;
use tcagcn::autodiff::Tape;
use tcagcn::data::{derive_sample, load_checkpoint, Stream};
use tcagcn::error::Error;
use tcagcn::fusion::{solve, solve_greedy, FusionResult, ScoreMatrix, NUM_STREAMS};
use tcagcn::network::{Model, INPUT_CHANNELS};
use tcagcn::tensor::Tensor;

/// Result of one call. Anything but OK leaves a message readable through
/// `tcagcn_last_error` on the calling thread.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcagcnStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad paths, shapes, encodings, or file contents.
    InvalidArgument = 2,
    /// The operating system refused a read or write.
    Io = 3,
    /// A result came out NaN or infinite.
    Numerical = 4,
    /// An internal invariant broke; the library state is undefined.
    Panic = 5,
}

/// Input encodings accepted by `tcagcn_model_predict`. Passed as a plain
/// integer so out-of-range values can be rejected instead of being undefined
/// behavior.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcagcnStream {
    Joint = 0,
    Bone = 1,
    JointMotion = 2,
    BoneMotion = 3,
}

/// Outcome of a stream-weight search. `weights` applies to the four score
/// tables in argument order (joint, bone, joint motion, bone motion).
#[repr(C)]
pub struct TcagcnFusionResult {
    pub weights: [f64; 4],
    pub accuracy: f64,
    pub right: usize,
    pub zong: usize,
    pub tuples_evaluated: usize,
}

/// A loaded model. Create with `tcagcn_model_load`, release with
/// `tcagcn_model_free`. Safe to use from several threads at once; the
/// handle is read-only after loading.
pub struct TcagcnModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: TcagcnStatus, msg: impl AsRef<str>) -> TcagcnStatus {
    let clean: String =
        msg.as_ref().chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap_or_default());
    status
}

fn fail_error(e: Error) -> TcagcnStatus {
    let status = match &e {
        Error::Numerical(_) => TcagcnStatus::Numerical,
        Error::Io(_) => TcagcnStatus::Io,
        _ => TcagcnStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn clear_error() -> TcagcnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::default());
    TcagcnStatus::Ok
}

fn guarded(f: impl FnOnce() -> TcagcnStatus) -> TcagcnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(TcagcnStatus::Panic, "internal panic"),
    }
}

/// Borrow a UTF-8 path argument, or produce the failing status.
unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, TcagcnStatus> {
    if p.is_null() {
        return Err(fail(TcagcnStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TcagcnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Library version as a static string; never null, never freed.
#[no_mangle]
pub extern "C" fn tcagcn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failing call on this thread, empty after a
/// success. The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tcagcn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a model from a checkpoint manifest written by the trainer. On
/// success `*out` owns the model; on failure it is null.
#[no_mangle]
pub unsafe extern "C" fn tcagcn_model_load(
    checkpoint_path: *const c_char,
    out: *mut *mut TcagcnModel,
) -> TcagcnStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TcagcnStatus::NullPointer, "out is null");
        }
        *out = std::ptr::null_mut();
        let path = match path_arg(checkpoint_path, "checkpoint_path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_checkpoint(Path::new(path)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(TcagcnModel { inner: model }));
                clear_error()
            }
            Err(e) => fail_error(e),
        }
    })
}

/// Release a model handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn tcagcn_model_free(model: *mut TcagcnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of action classes the model scores. 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn tcagcn_model_num_classes(model: *const TcagcnModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.cfg.num_classes)
}

/// Number of skeleton joints the model expects per frame. 0 for a null
/// handle.
#[no_mangle]
pub unsafe extern "C" fn tcagcn_model_num_joints(model: *const TcagcnModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.graph.num_joints())
}

/// Minimum number of frames a sequence needs to survive the model's
/// temporal strides. 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn tcagcn_model_min_frames(model: *const TcagcnModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.cfg.min_frames())
}

/// Score one skeleton sequence.
///
/// `coords` holds frames × joints × 3 doubles, row major: the x, y, z of
/// joint j in frame t at `coords[(t * joints + j) * 3]`. `stream` selects
/// the input encoding (a `TcagcnStream` value); bone and motion variants
/// are derived internally from the raw coordinates. `logits` receives
/// `tcagcn_model_num_classes` unnormalized class scores.
#[no_mangle]
pub unsafe extern "C" fn tcagcn_model_predict(
    model: *const TcagcnModel,
    coords: *const f64,
    frames: usize,
    stream: u32,
    logits: *mut f64,
) -> TcagcnStatus {
    guarded(|| {
        let Some(m) = model.as_ref() else {
            return fail(TcagcnStatus::NullPointer, "model is null");
        };
        if coords.is_null() {
            return fail(TcagcnStatus::NullPointer, "coords is null");
        }
        if logits.is_null() {
            return fail(TcagcnStatus::NullPointer, "logits is null");
        }
        let stream = match stream {
            0 => Stream::Joint,
            1 => Stream::Bone,
            2 => Stream::JointMotion,
            3 => Stream::BoneMotion,
            other => {
                return fail(
                    TcagcnStatus::InvalidArgument,
                    format!("stream {other} is not a TcagcnStream value"),
                )
            }
        };
        if frames == 0 {
            return fail(TcagcnStatus::InvalidArgument, "frames must be at least 1");
        }
        let n = m.inner.graph.num_joints();
        let raw = std::slice::from_raw_parts(coords, frames * n * INPUT_CHANNELS);
        let x = match Tensor::new(vec![frames, n, INPUT_CHANNELS], raw.to_vec()) {
            Ok(x) => x,
            Err(e) => return fail_error(e),
        };
        let derived = derive_sample(&x, &m.inner.graph, stream);
        let batched = match Tensor::new(
            vec![1, frames, n, INPUT_CHANNELS],
            derived.data().to_vec(),
        ) {
            Ok(x) => x,
            Err(e) => return fail_error(e),
        };
        let tape = Tape::new();
        let scores = match m.inner.bind(&tape).forward(&batched, BnMode::Eval) {
            Ok(v) => v.value(),
            Err(e) => return fail_error(e),
        };
        if let Some(bad) = scores.data().iter().find(|v| !v.is_finite()) {
            return fail(TcagcnStatus::Numerical, format!("non-finite score {bad}"));
        }
        std::slice::from_raw_parts_mut(logits, m.inner.cfg.num_classes)
            .copy_from_slice(scores.data());
        clear_error()
    })
}

/// Search stream weights over four aligned score CSVs (as written by the
/// scores command), one path per stream in the order joint, bone, joint
/// motion, bone motion.
///
/// `step` is the weight grid resolution in (0, 1]. `threads` caps the
/// search workers; 0 means one per available core. `greedy` switches from
/// the exhaustive search to the first-improvement scan; both reach the same
/// correct count and differ only in which maximizing tuple they report.
#[no_mangle]
pub unsafe extern "C" fn tcagcn_fuse_solve(
    joint_csv: *const c_char,
    bone_csv: *const c_char,
    joint_motion_csv: *const c_char,
    bone_motion_csv: *const c_char,
    step: f64,
    threads: usize,
    greedy: bool,
    out: *mut TcagcnFusionResult,
) -> TcagcnStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TcagcnStatus::NullPointer, "out is null");
        }
        let args = [
            ("joint", joint_csv),
            ("bone", bone_csv),
            ("joint-motion", joint_motion_csv),
            ("bone-motion", bone_motion_csv),
        ];
        let mut loaded = Vec::with_capacity(NUM_STREAMS);
        for (name, arg) in args {
            let path = match path_arg(arg, &format!("{name} CSV path")) {
                Ok(p) => p,
                Err(status) => return status,
            };
            let file = match std::fs::File::open(path) {
                Ok(f) => f,
                Err(e) => return fail_error(e.into()),
            };
            match ScoreMatrix::from_csv(name, std::io::BufReader::new(file)) {
                Ok(s) => loaded.push(s),
                Err(e) => return fail_error(e),
            }
        }
        let streams: [ScoreMatrix; NUM_STREAMS] =
            loaded.try_into().expect("four streams were loaded");
        let threads = if threads == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            threads
        };
        let result: FusionResult = match if greedy {
            solve_greedy(&streams, step)
        } else {
            solve(&streams, step, threads)
        } {
            Ok(r) => r,
            Err(e) => return fail_error(e),
        };
        *out = TcagcnFusionResult {
            weights: result.weights,
            accuracy: result.accuracy,
            right: result.right,
            zong: result.zong,
            tuples_evaluated: result.tuples_evaluated,
        };
        clear_error()
    })
}
