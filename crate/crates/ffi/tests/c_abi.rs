use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use coae_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(coae_last_error()) }
        .to_string_lossy()
        .into_owned()
}

struct Model(*mut CoaeModel);

impl Drop for Model {
    fn drop(&mut self) {
        unsafe { coae_model_free(self.0) };
    }
}

fn fresh(seed: u64) -> Model {
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { coae_model_new(ptr::null(), seed, &mut m) },
        CoaeStatus::Ok
    );
    assert!(!m.is_null());
    Model(m)
}

fn pattern(n: usize, k: f64) -> Vec<f64> {
    (0..n).map(|i| 0.5 + 0.4 * (i as f64 * k).sin()).collect()
}

fn detect_all(m: &Model, img: &[f64], q: &[f64]) -> Vec<CoaeDetection> {
    let mut count = 0;
    let st = unsafe {
        coae_detect(
            m.0,
            img.as_ptr(),
            img.len(),
            q.as_ptr(),
            q.len(),
            ptr::null_mut(),
            0,
            &mut count,
        )
    };
    assert_eq!(st, CoaeStatus::Ok, "{}", last_error());
    let mut out = vec![
        CoaeDetection {
            bbox: CoaeBox {
                x1: 0.0,
                y1: 0.0,
                x2: 0.0,
                y2: 0.0
            },
            score: 0.0
        };
        count
    ];
    let mut again = 0;
    let st = unsafe {
        coae_detect(
            m.0,
            img.as_ptr(),
            img.len(),
            q.as_ptr(),
            q.len(),
            out.as_mut_ptr(),
            out.len(),
            &mut again,
        )
    };
    assert_eq!(st, CoaeStatus::Ok);
    assert_eq!(again, count);
    out
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(coae_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    assert_eq!(
        unsafe { coae_model_new(ptr::null(), 0, ptr::null_mut()) },
        CoaeStatus::NullPointer
    );
    assert!(last_error().contains("null"));
    let mut out = 0.0;
    assert_eq!(
        unsafe { coae_iou(ptr::null(), ptr::null(), &mut out) },
        CoaeStatus::NullPointer
    );
    let mut a = 0;
    assert_eq!(
        unsafe { coae_model_dims(ptr::null(), &mut a, &mut a, &mut a) },
        CoaeStatus::NullPointer
    );
    unsafe { coae_model_free(ptr::null_mut()) };
}

#[test]
fn dims_and_detection_shapes() {
    let m = fresh(1);
    let (mut s, mut q, mut n) = (0, 0, 0);
    assert_eq!(
        unsafe { coae_model_dims(m.0, &mut s, &mut q, &mut n) },
        CoaeStatus::Ok
    );
    assert_eq!((s, q, n), (64, 32, 32));
    let img = pattern(3 * s * s, 0.013);
    let query = pattern(3 * q * q, 0.029);
    for d in detect_all(&m, &img, &query) {
        assert!(d.score >= 0.0 && d.score <= 1.0);
        assert!(d.bbox.x1 < d.bbox.x2 && d.bbox.y1 < d.bbox.y2);
        assert!(d.bbox.x1 >= 0.0 && d.bbox.x2 <= s as f64);
    }
    let mut count = 0;
    let st = unsafe {
        coae_detect(
            m.0,
            img.as_ptr(),
            img.len() - 1,
            query.as_ptr(),
            query.len(),
            ptr::null_mut(),
            0,
            &mut count,
        )
    };
    assert_eq!(st, CoaeStatus::Dimension);
    assert!(last_error().contains("image"));
}

#[test]
fn coexcitation_lies_in_unit_interval() {
    let m = fresh(2);
    let img = pattern(3 * 64 * 64, 0.011);
    let q = pattern(3 * 32 * 32, 0.031);
    let mut w = vec![0.0; 32];
    let st = unsafe {
        coae_coexcitation(
            m.0,
            img.as_ptr(),
            img.len(),
            q.as_ptr(),
            q.len(),
            w.as_mut_ptr(),
            w.len(),
        )
    };
    assert_eq!(st, CoaeStatus::Ok, "{}", last_error());
    assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
    let st = unsafe {
        coae_coexcitation(
            m.0,
            img.as_ptr(),
            img.len(),
            q.as_ptr(),
            q.len(),
            w.as_mut_ptr(),
            4,
        )
    };
    assert_eq!(st, CoaeStatus::InvalidArgument);
}

#[test]
fn checkpoint_round_trip_preserves_detections() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = fresh(3);
    assert_eq!(
        unsafe { coae_model_save(m.0, path.as_ptr()) },
        CoaeStatus::Ok
    );
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { coae_model_load(ptr::null(), path.as_ptr(), &mut loaded) },
        CoaeStatus::Ok
    );
    let loaded = Model(loaded);
    let img = pattern(3 * 64 * 64, 0.017);
    let q = pattern(3 * 32 * 32, 0.023);
    assert_eq!(detect_all(&m, &img, &q), detect_all(&loaded, &img, &q));

    let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { coae_model_load(ptr::null(), missing.as_ptr(), &mut out) },
        CoaeStatus::Io
    );
    assert!(out.is_null());
}

#[test]
fn bad_config_names_the_line() {
    let text = CString::new("train.epochs = 2\ndetector.nope = 1\n").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { coae_model_new(text.as_ptr(), 0, &mut out) },
        CoaeStatus::Config
    );
    assert!(last_error().contains(":2:"), "{}", last_error());
}

#[test]
fn iou_of_known_boxes() {
    let a = CoaeBox {
        x1: 0.0,
        y1: 0.0,
        x2: 2.0,
        y2: 2.0,
    };
    let b = CoaeBox {
        x1: 1.0,
        y1: 1.0,
        x2: 3.0,
        y2: 3.0,
    };
    let mut v = 0.0;
    assert_eq!(unsafe { coae_iou(&a, &b, &mut v) }, CoaeStatus::Ok);
    assert!((v - 1.0 / 7.0).abs() < 1e-15);
    let bad = CoaeBox { x2: -1.0, ..a };
    assert_eq!(
        unsafe { coae_iou(&a, &bad, &mut v) },
        CoaeStatus::InvalidArgument
    );
}

#[test]
fn margin_loss_hand_traced() {
    let run = |s: &[f64], y: &[u8]| {
        let mut v = f64::NAN;
        let st =
            unsafe { coae_margin_ranking_loss(s.as_ptr(), y.as_ptr(), s.len(), 0.7, 0.3, &mut v) };
        (st, v)
    };
    assert_eq!(run(&[0.9, 0.1], &[1, 0]), (CoaeStatus::Ok, 0.0));
    let (st, v) = run(&[0.5, 0.5], &[1, 0]);
    assert_eq!(st, CoaeStatus::Ok);
    assert!((v - 1.1).abs() < 1e-15);
    assert_eq!(run(&[0.8, 0.75], &[1, 1]), (CoaeStatus::Ok, 0.0));
    assert_eq!(run(&[1.5], &[1]).0, CoaeStatus::InvalidArgument);
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/coae.h")
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok()
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for sym in [
        "coae_version",
        "coae_last_error",
        "coae_model_new",
        "coae_model_load",
        "coae_model_save",
        "coae_model_free",
        "coae_model_dims",
        "coae_detect",
        "coae_coexcitation",
        "coae_iou",
        "coae_margin_ranking_loss",
        "typedef struct CoaeModel CoaeModel",
        "COAE_STATUS_OK = 0",
    ] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    if !have_cc() {
        eprintln!("no C compiler; skipped");
        return;
    }
    let inc = header().parent().unwrap().to_path_buf();
    for (lang, std) in [("c", "-std=c99"), ("c++", "-std=c++11")] {
        let out = Command::new("cc")
            .args([
                "-fsyntax-only",
                "-Wall",
                "-Werror",
                "-pedantic",
                std,
                "-x",
                lang,
            ])
            .arg(header())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{lang}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "coae.h"
int probe(void) {
    CoaeModel *m = NULL;
    CoaeStatus st = coae_model_new(NULL, 7, &m);
    if (st != COAE_STATUS_OK) return (int)st;
    size_t s, q, n;
    coae_model_dims(m, &s, &q, &n);
    CoaeBox a = {0, 0, 2, 2}, b = {1, 1, 3, 3};
    double v;
    coae_iou(&a, &b, &v);
    coae_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-std=c99", "-I"])
        .arg(&inc)
        .arg(&src)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
