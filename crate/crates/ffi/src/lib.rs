//! C ABI for loading a trained model, scoring images, running attacks and
//! handling universal perturbations.
//!
//! Conventions:
//! - Every function returns a [`ViapStatus`]; on failure a message is
//!   available from [`viap_last_error`] on the same thread.
//! - Images are `H * W * C` doubles in row-major `[H, W, C]` order, values in
//!   `[0, 1]`. Batches are images back to back.
//! - Output buffers are caller-owned; their length is passed alongside and
//!   must be exact.
//! - Handles come from `*_load` / [`viap_craft`] and are released with the
//!   matching `*_free`. Passing NULL to a free function is a no-op.
//! - Panics never cross the boundary; they surface as `VIAP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use viap::attacks::{self, AttackConfig, AttackFamily, Perturbation};
use viap::{classifier, net, Error, ModelParams, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    LabelOutOfRange = 4,
    NonFinite = 5,
    Io = 6,
    Format = 7,
    BufferSize = 8,
    Panic = 9,
    Other = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViapFamily {
    Fgsm = 0,
    FgsmTargeted = 1,
    Bim = 2,
    BimTargeted = 3,
    Viap = 4,
    ViapTargeted = 5,
}

/// Families cross the boundary as plain integers (`ViapFamily` values) so an
/// out-of-range value is an error rather than undefined behaviour.
fn family_arg(value: i32) -> FfiResult<AttackFamily> {
    const FAMILIES: [(ViapFamily, AttackFamily); 6] = [
        (ViapFamily::Fgsm, AttackFamily::Fgsm),
        (ViapFamily::FgsmTargeted, AttackFamily::FgsmTargeted),
        (ViapFamily::Bim, AttackFamily::Bim),
        (ViapFamily::BimTargeted, AttackFamily::BimTargeted),
        (ViapFamily::Viap, AttackFamily::Viap),
        (ViapFamily::ViapTargeted, AttackFamily::ViapTargeted),
    ];
    FAMILIES
        .iter()
        .find(|(f, _)| *f as i32 == value)
        .map(|(_, a)| *a)
        .ok_or_else(|| Failure::new(ViapStatus::InvalidArgument, format!("unknown attack family {value}")))
}

/// Opaque trained classifier.
pub struct ViapModel {
    params: ModelParams,
}

/// Opaque universal perturbation.
pub struct ViapPerturbation {
    inner: Perturbation,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: ViapStatus,
    message: String,
}

impl Failure {
    fn new(status: ViapStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::ShapeMismatch { .. } | Error::DataLength { .. } => ViapStatus::Shape,
            Error::LabelOutOfRange { .. } => ViapStatus::LabelOutOfRange,
            Error::NonFinite(_) => ViapStatus::NonFinite,
            Error::InvalidArgument(_) => ViapStatus::InvalidArgument,
            Error::Io(_) => ViapStatus::Io,
            Error::Format { .. } | Error::Json(_) => ViapStatus::Format,
            _ => ViapStatus::Other,
        };
        Failure::new(status, e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Failure>;

fn set_last_error(message: Option<String>) {
    let c = message.map(|m| CString::new(m.replace('\0', " ")).expect("nul bytes removed"));
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, records its error message, and converts panics.
fn guard(f: impl FnOnce() -> FfiResult) -> ViapStatus {
    set_last_error(None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ViapStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(Some(fail.message));
            fail.status
        }
        Err(_) => {
            set_last_error(Some("internal panic".into()));
            ViapStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> FfiResult<()> {
    if p.is_null() {
        Err(Failure::new(ViapStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(path: *const c_char) -> FfiResult<PathBuf> {
    non_null(path, "path")?;
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure::new(ViapStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> FfiResult<&'a [f64]> {
    non_null(p, what)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, expected: usize, what: &str) -> FfiResult<&'a mut [f64]> {
    non_null(p, what)?;
    if len != expected {
        return Err(Failure::new(
            ViapStatus::BufferSize,
            format!("{what} holds {len} values, expected {expected}"),
        ));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn model_ref<'a>(model: *const ViapModel) -> FfiResult<&'a ViapModel> {
    non_null(model, "model")?;
    Ok(&*model)
}

unsafe fn perturbation_ref<'a>(p: *const ViapPerturbation) -> FfiResult<&'a ViapPerturbation> {
    non_null(p, "perturbation")?;
    Ok(&*p)
}

fn image_tensor(model: &ViapModel, data: &[f64]) -> FfiResult<Tensor> {
    Ok(Tensor::new(model.params.arch().image_shape().to_vec(), data.to_vec())?)
}

fn target_arg(target: i64) -> Option<usize> {
    usize::try_from(target).ok()
}

/// Message of the most recent failed call on this thread, or NULL. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn viap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code; unknown codes map to `"unknown"`.
#[no_mangle]
pub extern "C" fn viap_status_name(status: i32) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"ok",
        1 => c"null_pointer",
        2 => c"invalid_argument",
        3 => c"shape",
        4 => c"label_out_of_range",
        5 => c"non_finite",
        6 => c"io",
        7 => c"format",
        8 => c"buffer_size",
        9 => c"panic",
        10 => c"other",
        _ => c"unknown",
    };
    s.as_ptr()
}

/// Loads a params file written by `viap train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn viap_model_load(path: *const c_char, out: *mut *mut ViapModel) -> ViapStatus {
    guard(|| {
        non_null(out, "out")?;
        let params = ModelParams::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ViapModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `viap_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn viap_model_free(model: *mut ViapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input extents and class count of a model. Any output pointer may be NULL.
///
/// # Safety
/// Non-NULL pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn viap_model_info(
    model: *const ViapModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
    classes: *mut usize,
) -> ViapStatus {
    guard(|| {
        let arch = model_ref(model)?.params.arch();
        for (p, v) in [
            (height, arch.height),
            (width, arch.width),
            (channels, arch.channels),
            (classes, arch.classes),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Softmax probabilities for `count` images into `probs` (`count * classes`).
///
/// # Safety
/// `images` must hold `count * H * W * C` doubles and `probs` `probs_len`.
#[no_mangle]
pub unsafe extern "C" fn viap_predict(
    model: *const ViapModel,
    images: *const f64,
    count: usize,
    probs: *mut f64,
    probs_len: usize,
) -> ViapStatus {
    guard(|| {
        let m = model_ref(model)?;
        if count == 0 {
            return Err(Failure::new(ViapStatus::InvalidArgument, "count must be positive"));
        }
        let arch = m.params.arch();
        let n = arch.image_len();
        let data = input(images, count * n, "images")?;
        let out = output(probs, probs_len, count * arch.classes, "probs")?;
        let tensors = data
            .chunks(n)
            .map(|c| image_tensor(m, c))
            .collect::<FfiResult<Vec<_>>>()?;
        let refs: Vec<&Tensor> = tensors.iter().collect();
        out.copy_from_slice(classifier::predict(&m.params, &refs)?.data());
        Ok(())
    })
}

/// Gradient of the cross-entropy loss for `label` w.r.t. one image.
/// `loss` may be NULL.
///
/// # Safety
/// `image` and `grad` must hold `image_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn viap_input_gradient(
    model: *const ViapModel,
    image: *const f64,
    image_len: usize,
    label: usize,
    grad: *mut f64,
    grad_len: usize,
    loss: *mut f64,
) -> ViapStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = image_tensor(m, input(image, image_len, "image")?)?;
        let out = output(grad, grad_len, image_len, "grad")?;
        let (l, g) = net::loss_and_input_grad(&m.params, &Tensor::stack(&[&x])?, &[label])?;
        out.copy_from_slice(g.data());
        if !loss.is_null() {
            *loss = l;
        }
        Ok(())
    })
}

/// Per-image attack (FGSM, FGSM-T, BIM, BIM-T; `family` is a `ViapFamily`).
/// `epsilon` is on the 0-255 scale; `iterations == 0` selects the default of
/// 20 for BIM families; `target < 0` means none.
///
/// # Safety
/// `image` and `out` must hold `image_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn viap_attack_image(
    model: *const ViapModel,
    image: *const f64,
    image_len: usize,
    label: usize,
    family: i32,
    epsilon: f64,
    iterations: usize,
    target: i64,
    out: *mut f64,
    out_len: usize,
) -> ViapStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = image_tensor(m, input(image, image_len, "image")?)?;
        let dst = output(out, out_len, image_len, "out")?;
        let mut config = AttackConfig::new(family_arg(family)?, epsilon);
        if iterations > 0 && config.family.is_iterative() {
            config.iterations = iterations;
        }
        config.target = target_arg(target);
        let adv = attacks::attack_image(&m.params, &x, label, &config)?;
        dst.copy_from_slice(adv.data());
        Ok(())
    })
}

/// Crafts one perturbation shared by `count` images (`family` is
/// `VIAP_FAMILY_VIAP` or `VIAP_FAMILY_VIAP_TARGETED`). Arguments as in
/// `viap_attack_image`; `seed` drives the initial noise.
///
/// # Safety
/// `images` must hold `count * image_len` doubles, `labels` `count` entries,
/// and `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn viap_craft(
    model: *const ViapModel,
    images: *const f64,
    count: usize,
    image_len: usize,
    labels: *const usize,
    family: i32,
    epsilon: f64,
    iterations: usize,
    target: i64,
    seed: u64,
    out: *mut *mut ViapPerturbation,
) -> ViapStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        non_null(labels, "labels")?;
        if count == 0 {
            return Err(Failure::new(ViapStatus::InvalidArgument, "count must be positive"));
        }
        let data = input(images, count * image_len, "images")?;
        let labels = slice::from_raw_parts(labels, count);
        let tensors = data
            .chunks(image_len)
            .map(|c| image_tensor(m, c))
            .collect::<FfiResult<Vec<_>>>()?;
        let views: Vec<(&Tensor, usize)> = tensors.iter().zip(labels.iter().copied()).collect();
        let mut config = AttackConfig::new(family_arg(family)?, epsilon).with_seed(seed);
        if iterations > 0 {
            config.iterations = iterations;
        }
        config.target = target_arg(target);
        let keys = (0..count).map(|i| format!("input{i}")).collect();
        let p = attacks::viap(&m.params, &views, keys, &config)?;
        *out = Box::into_raw(Box::new(ViapPerturbation { inner: p }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn viap_perturbation_load(path: *const c_char, out: *mut *mut ViapPerturbation) -> ViapStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = Perturbation::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ViapPerturbation { inner }));
        Ok(())
    })
}

/// # Safety
/// `p` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn viap_perturbation_save(p: *const ViapPerturbation, path: *const c_char) -> ViapStatus {
    guard(|| {
        let p = perturbation_ref(p)?;
        p.inner.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `p` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn viap_perturbation_free(p: *mut ViapPerturbation) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Number of doubles in the perturbation (equal to one image).
///
/// # Safety
/// `p` must be a live handle and `len` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn viap_perturbation_len(p: *const ViapPerturbation, len: *mut usize) -> ViapStatus {
    guard(|| {
        let p = perturbation_ref(p)?;
        non_null(len, "len")?;
        *len = p.inner.delta.len();
        Ok(())
    })
}

/// Copies `delta` into `out`.
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn viap_perturbation_delta(
    p: *const ViapPerturbation,
    out: *mut f64,
    out_len: usize,
) -> ViapStatus {
    guard(|| {
        let p = perturbation_ref(p)?;
        output(out, out_len, p.inner.delta.len(), "out")?.copy_from_slice(p.inner.delta.data());
        Ok(())
    })
}

/// `out = clamp(image + delta, 0, 1)`.
///
/// # Safety
/// `image` and `out` must hold `image_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn viap_perturbation_apply(
    p: *const ViapPerturbation,
    image: *const f64,
    image_len: usize,
    out: *mut f64,
    out_len: usize,
) -> ViapStatus {
    guard(|| {
        let p = perturbation_ref(p)?;
        let x = Tensor::new(
            p.inner.delta.shape().to_vec(),
            input(image, image_len, "image")?.to_vec(),
        )?;
        let dst = output(out, out_len, image_len, "out")?;
        dst.copy_from_slice(p.inner.apply(&x)?.data());
        Ok(())
    })
}
