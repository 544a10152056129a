//! C ABI over the scoring and evaluation library.
//!
//! Handles are opaque pointers created and destroyed by this library;
//! every function returns a [`ClipnStatus`] code and writes results
//! through out-pointers. The generated header lives at
//! `include/clipn.h`.

use std::ffi::CStr;
use std::os::raw::{c_char, c_double, c_int};
use std::ptr;

use clipn::detect::{self, AtdCompare, ClassTextBank, Method};
use clipn::metric;
use clipn::numkernel::EmbeddingMatrix;

/// Status codes returned by every FFI entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipnStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Dimensions or lengths are inconsistent.
    DimMismatch = 2,
    /// A numeric argument is out of range.
    InvalidArgument = 3,
    /// The operation failed internally.
    Internal = 4,
}

/// Opaque class text bank handle.
pub struct ClipnBank {
    inner: ClassTextBank,
}

/// Scoring method selector for [`clipn_score`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipnMethod {
    Msp = 0,
    MaxLogit = 1,
    Energy = 2,
    React = 3,
    Odin = 4,
    Ctw = 5,
    Atd = 6,
}

impl From<ClipnMethod> for Method {
    fn from(m: ClipnMethod) -> Method {
        match m {
            ClipnMethod::Msp => Method::Msp,
            ClipnMethod::MaxLogit => Method::MaxLogit,
            ClipnMethod::Energy => Method::Energy,
            ClipnMethod::React => Method::React,
            ClipnMethod::Odin => Method::Odin,
            ClipnMethod::Ctw => Method::Ctw,
            ClipnMethod::Atd => Method::Atd,
        }
    }
}

unsafe fn slice_arg<'a>(ptr: *const c_double, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// Builds a bank from row-major standard and negation feature tables of
/// shape `classes x dim` (rows must be unit norm) and a positive
/// temperature. Class names are optional; pass null to use generated
/// names. On success writes a handle that must be freed with
/// [`clipn_bank_free`].
///
/// # Safety
/// `standard` and `negation` must point to `classes * dim` doubles;
/// `names`, when non-null, must point to `classes` valid C strings;
/// `out_bank` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clipn_bank_new(
    classes: usize,
    dim: usize,
    standard: *const c_double,
    negation: *const c_double,
    tau: c_double,
    names: *const *const c_char,
    out_bank: *mut *mut ClipnBank,
) -> ClipnStatus {
    if out_bank.is_null() {
        return ClipnStatus::NullPointer;
    }
    *out_bank = ptr::null_mut();
    let (std_data, no_data) = match (
        slice_arg(standard, classes * dim),
        slice_arg(negation, classes * dim),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return ClipnStatus::NullPointer,
    };
    let class_names: Vec<String> = if names.is_null() {
        (0..classes).map(|i| format!("class{i}")).collect()
    } else {
        let mut out = Vec::with_capacity(classes);
        for i in 0..classes {
            let p = *names.add(i);
            if p.is_null() {
                return ClipnStatus::NullPointer;
            }
            match CStr::from_ptr(p).to_str() {
                Ok(s) => out.push(s.to_string()),
                Err(_) => return ClipnStatus::InvalidArgument,
            }
        }
        out
    };
    let build = || -> Result<ClassTextBank, detect::DetectError> {
        let std_m = EmbeddingMatrix::from_unit_rows(classes, dim, std_data.to_vec())
            .map_err(detect::DetectError::Num)?;
        let no_m = EmbeddingMatrix::from_unit_rows(classes, dim, no_data.to_vec())
            .map_err(detect::DetectError::Num)?;
        ClassTextBank::new(class_names, std_m, no_m, tau)
    };
    match build() {
        Ok(bank) => {
            *out_bank = Box::into_raw(Box::new(ClipnBank { inner: bank }));
            ClipnStatus::Ok
        }
        Err(detect::DetectError::NonPositiveT(_)) => ClipnStatus::InvalidArgument,
        Err(detect::DetectError::DimMismatch { .. }) | Err(detect::DetectError::Num(_)) => {
            ClipnStatus::DimMismatch
        }
        Err(_) => ClipnStatus::Internal,
    }
}

/// Frees a bank created by [`clipn_bank_new`]. Null is a no-op.
///
/// # Safety
/// `bank` must be null or a pointer previously returned by
/// [`clipn_bank_new`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn clipn_bank_free(bank: *mut ClipnBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Number of classes in the bank.
///
/// # Safety
/// `bank` must be a live handle from [`clipn_bank_new`].
#[no_mangle]
pub unsafe extern "C" fn clipn_bank_classes(bank: *const ClipnBank) -> usize {
    if bank.is_null() {
        return 0;
    }
    (*bank).inner.classes()
}

/// Scores one unit-norm feature vector of length `dim` with the given
/// method. Writes the idness score to `out_idness`. `out_is_id` receives
/// 1/0 for the threshold-free methods (CTW, ATD) and -1 otherwise; pass
/// null to skip it. Baseline hyperparameters use the library defaults
/// (energy T = 1, ODIN T = 1000 and eps = 0.0014, ReAct clamp infinite).
///
/// # Safety
/// `bank` must be a live handle; `feature` must point to `dim` doubles;
/// `out_idness` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clipn_score(
    bank: *const ClipnBank,
    feature: *const c_double,
    dim: usize,
    method: ClipnMethod,
    out_idness: *mut c_double,
    out_is_id: *mut c_int,
) -> ClipnStatus {
    if bank.is_null() || out_idness.is_null() {
        return ClipnStatus::NullPointer;
    }
    let f = match slice_arg(feature, dim) {
        Some(f) => f,
        None => return ClipnStatus::NullPointer,
    };
    let b = &(*bank).inner;
    let result = match method {
        ClipnMethod::Msp => detect::msp(f, b),
        ClipnMethod::MaxLogit => detect::maxlogit(f, b),
        ClipnMethod::Energy => detect::energy(f, b, 1.0),
        ClipnMethod::React => detect::react(f, b, f64::INFINITY, 1.0),
        ClipnMethod::Odin => detect::odin(f, b, 1000.0, 0.0014),
        ClipnMethod::Ctw => detect::ctw(f, b),
        ClipnMethod::Atd => detect::atd_with_compare(f, b, AtdCompare::Original),
    };
    match result {
        Ok(r) => {
            *out_idness = r.idness;
            if !out_is_id.is_null() {
                *out_is_id = match r.is_id {
                    Some(true) => 1,
                    Some(false) => 0,
                    None => -1,
                };
            }
            ClipnStatus::Ok
        }
        Err(detect::DetectError::DimMismatch { .. }) => ClipnStatus::DimMismatch,
        Err(detect::DetectError::NonPositiveT(_))
        | Err(detect::DetectError::NegativeEpsilon(_)) => ClipnStatus::InvalidArgument,
        Err(_) => ClipnStatus::Internal,
    }
}

/// AUROC of ID scores against OOD scores (ties count one half).
///
/// # Safety
/// `id_scores` / `ood_scores` must point to `id_len` / `ood_len` doubles;
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clipn_auroc(
    id_scores: *const c_double,
    id_len: usize,
    ood_scores: *const c_double,
    ood_len: usize,
    out: *mut c_double,
) -> ClipnStatus {
    if out.is_null() {
        return ClipnStatus::NullPointer;
    }
    let (id, ood) = match (slice_arg(id_scores, id_len), slice_arg(ood_scores, ood_len)) {
        (Some(a), Some(b)) => (a, b),
        _ => return ClipnStatus::NullPointer,
    };
    match metric::auroc(id, ood) {
        Ok(v) => {
            *out = v;
            ClipnStatus::Ok
        }
        Err(metric::MetricError::EmptyInput) => ClipnStatus::InvalidArgument,
        Err(_) => ClipnStatus::Internal,
    }
}

/// False positive rate at the given true-positive-rate target.
///
/// # Safety
/// Same pointer requirements as [`clipn_auroc`].
#[no_mangle]
pub unsafe extern "C" fn clipn_fpr_at_tpr(
    id_scores: *const c_double,
    id_len: usize,
    ood_scores: *const c_double,
    ood_len: usize,
    tpr_target: c_double,
    out: *mut c_double,
) -> ClipnStatus {
    if out.is_null() {
        return ClipnStatus::NullPointer;
    }
    let (id, ood) = match (slice_arg(id_scores, id_len), slice_arg(ood_scores, ood_len)) {
        (Some(a), Some(b)) => (a, b),
        _ => return ClipnStatus::NullPointer,
    };
    match metric::fpr_at_tpr(id, ood, tpr_target) {
        Ok(v) => {
            *out = v;
            ClipnStatus::Ok
        }
        Err(metric::MetricError::EmptyInput) | Err(metric::MetricError::BadTarget(_)) => {
            ClipnStatus::InvalidArgument
        }
        Err(_) => ClipnStatus::Internal,
    }
}

/// Normalizes `v` (length `len`) to unit L2 norm in place. Fails on
/// near-zero vectors.
///
/// # Safety
/// `v` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn clipn_l2_normalize(v: *mut c_double, len: usize) -> ClipnStatus {
    if v.is_null() {
        return ClipnStatus::NullPointer;
    }
    let data = std::slice::from_raw_parts_mut(v, len);
    match clipn::numkernel::l2_normalize(data) {
        Ok(u) => {
            data.copy_from_slice(&u);
            ClipnStatus::Ok
        }
        Err(clipn::numkernel::NumError::ZeroVector)
        | Err(clipn::numkernel::NumError::EmptyInput) => ClipnStatus::InvalidArgument,
        Err(_) => ClipnStatus::Internal,
    }
}
