use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use attnloc::classifier::{train, FeatureSequence, TrainConfig};
use attnloc_ffi::*;

fn last_error() -> String {
    let p = attnloc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn toy() -> *mut AttnlocBackend {
    let mut b = ptr::null_mut();
    assert_eq!(attnloc_toy_backend_new(3, 8, 2, 2, &mut b), AttnlocStatus::Ok);
    assert!(!b.is_null());
    b
}

fn features(backend: *const AttnlocBackend, code: &str, flatten: AttnlocFlatten) -> *mut AttnlocMatrix {
    let code = CString::new(code).unwrap();
    let lang = CString::new("c").unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe {
        attnloc_sample_features(
            backend,
            code.as_ptr(),
            lang.as_ptr(),
            AttnlocHighlight::LineIndex,
            flatten,
            &mut m,
        )
    };
    assert_eq!(st, AttnlocStatus::Ok, "{}", last_error());
    m
}

fn copy(m: *const AttnlocMatrix) -> Vec<f64> {
    let n = unsafe { attnloc_matrix_rows(m) * attnloc_matrix_cols(m) };
    let mut buf = vec![0.0; n];
    assert_eq!(unsafe { attnloc_matrix_copy(m, buf.as_mut_ptr(), n) }, AttnlocStatus::Ok);
    buf
}

#[test]
fn toy_features_have_expected_shape_and_are_deterministic() {
    let b = toy();
    let (mut layers, mut heads) = (0, 0);
    assert_eq!(unsafe { attnloc_backend_shape(b, &mut layers, &mut heads) }, AttnlocStatus::Ok);
    assert_eq!((layers, heads), (2, 2));

    let m = features(b, "int a = 0;\nfree(a);\nreturn a;\n", AttnlocFlatten::Layerwise);
    assert_eq!(unsafe { (attnloc_matrix_rows(m), attnloc_matrix_cols(m)) }, (3, 6));
    let first = copy(m);
    let again = features(b, "int a = 0;\nfree(a);\nreturn a;\n", AttnlocFlatten::Layerwise);
    assert_eq!(first, copy(again));

    let pooled = features(b, "int a = 0;\nfree(a);\nreturn a;\n", AttnlocFlatten::AvgPool);
    assert_eq!(unsafe { attnloc_matrix_cols(pooled) }, 3);
    unsafe {
        attnloc_matrix_free(m);
        attnloc_matrix_free(again);
        attnloc_matrix_free(pooled);
        attnloc_backend_free(b);
    }
}

#[test]
fn error_codes_and_messages() {
    let mut b = ptr::null_mut();
    assert_eq!(attnloc_toy_backend_new(0, 7, 2, 2, &mut b), AttnlocStatus::ConfigError);
    assert!(b.is_null());
    assert!(last_error().contains("d_model"));

    assert_eq!(attnloc_toy_backend_new(0, 8, 2, 2, ptr::null_mut()), AttnlocStatus::NullPointer);

    let backend = toy();
    let lang = CString::new("c").unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe {
        attnloc_sample_features(
            backend,
            ptr::null(),
            lang.as_ptr(),
            AttnlocHighlight::LineIndex,
            AttnlocFlatten::Layerwise,
            &mut m,
        )
    };
    assert_eq!(st, AttnlocStatus::NullPointer);
    assert_eq!(last_error(), "code is null");

    let dir = CString::new("/nonexistent/dumps").unwrap();
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { attnloc_dump_backend_new(dir.as_ptr(), &mut d) }, AttnlocStatus::BackendError);

    let small = features(backend, "x;\n", AttnlocFlatten::Layerwise);
    let mut one = [0.0];
    assert_eq!(
        unsafe { attnloc_matrix_copy(small, one.as_mut_ptr(), 1) },
        AttnlocStatus::BufferTooSmall
    );
    unsafe {
        attnloc_matrix_free(small);
        attnloc_backend_free(backend);
        attnloc_backend_free(ptr::null_mut());
    }
}

#[test]
fn baseline_worked_example() {
    let lines = [3usize, 5, 5];
    let lengths = [2usize, 1];
    let mut out = [f64::NAN; 6];
    let st = unsafe { attnloc_baseline_score(lines.as_ptr(), lengths.as_ptr(), 2, 6, out.as_mut_ptr()) };
    assert_eq!(st, AttnlocStatus::Ok);
    assert_eq!(out, [0.0, 0.0, 0.25, 0.0, 0.75, 0.0]);

    let bad = [9usize];
    let st = unsafe { attnloc_baseline_score(bad.as_ptr(), [1usize].as_ptr(), 1, 6, out.as_mut_ptr()) };
    assert_eq!(st, AttnlocStatus::DataError);
    assert_eq!(attnloc_f1(40.0, 40.0), 40.0);
}

#[test]
fn model_scores_match_library() {
    let data: Vec<FeatureSequence> = (0..4)
        .map(|i| FeatureSequence {
            sample_id: format!("s{i}"),
            language: "c".into(),
            features: (0..3).map(|t| vec![(i + t) as f64, (t as f64) - 1.0]).collect(),
            labels: Some(vec![0, 1, 0]),
        })
        .collect();
    let config = TrainConfig {
        hidden_dim: 4,
        epochs: 3,
        ..Default::default()
    };
    let model = train(&data, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.model.json");
    model.save(&path).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { attnloc_model_load(cpath.as_ptr(), &mut handle) }, AttnlocStatus::Ok);
    assert_eq!(unsafe { attnloc_model_input_dim(handle) }, 2);

    let flat: Vec<f64> = data[1].features.concat();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { attnloc_matrix_new(flat.as_ptr(), 3, 2, &mut m) }, AttnlocStatus::Ok);
    let mut scores = [0.0; 3];
    assert_eq!(
        unsafe { attnloc_model_score(handle, m, scores.as_mut_ptr(), 3) },
        AttnlocStatus::Ok
    );
    let expected = attnloc::classifier::score(&model, &data[1]).unwrap();
    assert_eq!(scores.to_vec(), expected);

    let mut wrong = ptr::null_mut();
    assert_eq!(unsafe { attnloc_matrix_new(flat.as_ptr(), 2, 3, &mut wrong) }, AttnlocStatus::Ok);
    assert_eq!(
        unsafe { attnloc_model_score(handle, wrong, scores.as_mut_ptr(), 3) },
        AttnlocStatus::DataError
    );
    unsafe {
        attnloc_matrix_free(m);
        attnloc_matrix_free(wrong);
        attnloc_model_free(handle);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/attnloc.h")).unwrap();
    for name in [
        "attnloc_last_error",
        "attnloc_version",
        "attnloc_toy_backend_new",
        "attnloc_dump_backend_new",
        "attnloc_backend_free",
        "attnloc_backend_shape",
        "attnloc_sample_features",
        "attnloc_matrix_new",
        "attnloc_matrix_copy",
        "attnloc_matrix_free",
        "attnloc_model_load",
        "attnloc_model_score",
        "attnloc_model_free",
        "attnloc_baseline_score",
        "attnloc_f1",
        "typedef struct AttnlocBackend AttnlocBackend;",
        "ATTNLOC_STATUS_BUFFER_TOO_SMALL = 6",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let version = unsafe { CStr::from_ptr(attnloc_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn static_lib() -> Option<PathBuf> {
    // integration test binaries live in target/<profile>/deps
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libattnloc_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_against_static_library() {
    let Some(lib) = static_lib() else {
        eprintln!("static library not built; skipping C link check");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping C link check");
        return;
    }
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.25 0.75");
}
