//! Exercises the C ABI from Rust: handle lifecycle, scoring, metrics and
//! the error paths.

use clipn_ffi::*;
use std::os::raw::c_int;
use std::ptr;

fn unit2(x: f64, y: f64) -> [f64; 2] {
    let n = (x * x + y * y).sqrt();
    [x / n, y / n]
}

fn make_bank() -> *mut ClipnBank {
    // two orthogonal classes with antipodal negations
    let standard = [1.0, 0.0, 0.0, 1.0];
    let negation = [-1.0, 0.0, 0.0, -1.0];
    let mut bank: *mut ClipnBank = ptr::null_mut();
    let status = unsafe {
        clipn_bank_new(
            2,
            2,
            standard.as_ptr(),
            negation.as_ptr(),
            0.5,
            ptr::null(),
            &mut bank,
        )
    };
    assert_eq!(status, ClipnStatus::Ok);
    assert!(!bank.is_null());
    bank
}

#[test]
fn bank_lifecycle_and_scores() {
    let bank = make_bank();
    unsafe {
        assert_eq!(clipn_bank_classes(bank), 2);
        let f = unit2(0.9, 0.1);
        let mut idness = 0.0;
        let mut is_id: c_int = -2;

        let st = clipn_score(bank, f.as_ptr(), 2, ClipnMethod::Msp, &mut idness, &mut is_id);
        assert_eq!(st, ClipnStatus::Ok);
        assert!(idness > 0.5 && idness <= 1.0);
        assert_eq!(is_id, -1); // baselines carry no verdict

        let st = clipn_score(bank, f.as_ptr(), 2, ClipnMethod::Ctw, &mut idness, &mut is_id);
        assert_eq!(st, ClipnStatus::Ok);
        assert_eq!(is_id, 1); // near class 0, far from its negation

        let st = clipn_score(bank, f.as_ptr(), 2, ClipnMethod::Atd, &mut idness, &mut is_id);
        assert_eq!(st, ClipnStatus::Ok);
        assert!(idness > 0.5);
        assert_eq!(is_id, 1);

        // dimension mismatch reported, not crashed
        let bad = [1.0, 0.0, 0.0];
        let st = clipn_score(bank, bad.as_ptr(), 3, ClipnMethod::Msp, &mut idness, &mut is_id);
        assert_eq!(st, ClipnStatus::DimMismatch);

        clipn_bank_free(bank);
        clipn_bank_free(ptr::null_mut()); // null free is a no-op
    }
}

#[test]
fn bank_rejects_bad_inputs() {
    let standard = [1.0, 0.0, 0.0, 1.0];
    let negation = [-1.0, 0.0, 0.0, -1.0];
    let mut bank: *mut ClipnBank = ptr::null_mut();
    unsafe {
        // null data
        let st = clipn_bank_new(2, 2, ptr::null(), negation.as_ptr(), 0.5, ptr::null(), &mut bank);
        assert_eq!(st, ClipnStatus::NullPointer);
        // non-positive temperature
        let st = clipn_bank_new(
            2,
            2,
            standard.as_ptr(),
            negation.as_ptr(),
            0.0,
            ptr::null(),
            &mut bank,
        );
        assert_eq!(st, ClipnStatus::InvalidArgument);
        assert!(bank.is_null());
        // non-unit rows
        let junk = [5.0, 0.0, 0.0, 5.0];
        let st = clipn_bank_new(2, 2, junk.as_ptr(), negation.as_ptr(), 0.5, ptr::null(), &mut bank);
        assert_eq!(st, ClipnStatus::DimMismatch);
    }
}

#[test]
fn metrics_through_ffi() {
    let id = [0.9, 0.8, 0.7];
    let ood = [0.1, 0.2];
    let mut v = 0.0;
    unsafe {
        assert_eq!(
            clipn_auroc(id.as_ptr(), id.len(), ood.as_ptr(), ood.len(), &mut v),
            ClipnStatus::Ok
        );
        assert_eq!(v, 1.0);
        assert_eq!(
            clipn_fpr_at_tpr(id.as_ptr(), id.len(), ood.as_ptr(), ood.len(), 0.95, &mut v),
            ClipnStatus::Ok
        );
        assert_eq!(v, 0.0);
        // bad target
        assert_eq!(
            clipn_fpr_at_tpr(id.as_ptr(), id.len(), ood.as_ptr(), ood.len(), 0.0, &mut v),
            ClipnStatus::InvalidArgument
        );
        // empty input
        assert_eq!(
            clipn_auroc(id.as_ptr(), 0, ood.as_ptr(), ood.len(), &mut v),
            ClipnStatus::InvalidArgument
        );
    }
}

#[test]
fn normalize_in_place() {
    let mut v = [3.0, 4.0];
    unsafe {
        assert_eq!(clipn_l2_normalize(v.as_mut_ptr(), 2), ClipnStatus::Ok);
    }
    assert!((v[0] - 0.6).abs() < 1e-15);
    assert!((v[1] - 0.8).abs() < 1e-15);
    let mut z = [0.0, 0.0];
    unsafe {
        assert_eq!(clipn_l2_normalize(z.as_mut_ptr(), 2), ClipnStatus::InvalidArgument);
    }
}
