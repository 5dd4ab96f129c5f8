use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use reverb::config::RunConfig;
use reverb::model::{ModelConfig, RevModel};
use reverb::nn::Checkpoint;
use reverb_ffi::*;

fn last_error() -> String {
    let p = reverb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn transform_round_trip() {
    let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
    for kind in [ReverbTransform::None, ReverbTransform::Dft, ReverbTransform::Db2, ReverbTransform::Haar] {
        let mut spec = vec![0.0; 16];
        let mut back = vec![0.0; 16];
        unsafe {
            assert_eq!(reverb_transform_forward(kind, x.as_ptr(), 8, 2, spec.as_mut_ptr()), ReverbStatus::Ok);
            assert_eq!(reverb_transform_inverse(kind, spec.as_ptr(), 8, 2, back.as_mut_ptr()), ReverbStatus::Ok);
        }
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9, "{kind:?}");
        }
    }
}

#[test]
fn odd_length_reports_shape_error() {
    let x = [0.0; 6];
    let mut out = [0.0; 6];
    let s = unsafe { reverb_transform_forward(ReverbTransform::Haar, x.as_ptr(), 3, 2, out.as_mut_ptr()) };
    assert_eq!(s, ReverbStatus::Shape);
    assert!(!last_error().is_empty());
}

#[test]
fn null_pointers_are_rejected() {
    let mut out = [0.0; 4];
    let s = unsafe { reverb_transform_forward(ReverbTransform::None, ptr::null(), 2, 2, out.as_mut_ptr()) };
    assert_eq!(s, ReverbStatus::NullPointer);
    assert!(last_error().contains("null"));
    let mut m = ptr::null_mut();
    let s = unsafe { reverb_model_load(ptr::null(), ptr::null(), &mut m) };
    assert_eq!(s, ReverbStatus::NullPointer);
    assert!(m.is_null());
    unsafe { reverb_model_free(ptr::null_mut()) };
}

#[test]
fn success_clears_last_error() {
    let mut out = [0.0; 4];
    unsafe { reverb_transform_forward(ReverbTransform::None, ptr::null(), 2, 2, out.as_mut_ptr()) };
    let x = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(
        unsafe { reverb_transform_forward(ReverbTransform::None, x.as_ptr(), 2, 2, out.as_mut_ptr()) },
        ReverbStatus::Ok
    );
    assert!(reverb_last_error().is_null());
}

#[test]
fn metrics_and_curves() {
    let preds = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 3.0];
    let gt = [0.0, 1.0, 0.0, 2.0];
    let (mut ade, mut fde) = (0.0, 0.0);
    let s = unsafe { reverb_min_ade_fde(preds.as_ptr(), 2, 2, 2, gt.as_ptr(), &mut ade, &mut fde) };
    assert_eq!(s, ReverbStatus::Ok);
    assert!((ade - 0.5).abs() < 1e-12);
    assert!((fde - 1.0).abs() < 1e-12);

    let r = [1.0, 0.0, 1.0, 2.0];
    let mut c = [0.0; 4];
    assert_eq!(unsafe { reverb_curve_non(r.as_ptr(), 2, 2, c.as_mut_ptr()) }, ReverbStatus::Ok);
    assert_eq!(c, [0.5, 0.0, 0.5, 1.0]);
}

#[test]
fn model_load_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        model: ModelConfig { d: 8, k_g: 3, n_theta: 4, layers: 1, heads: 2, ..ModelConfig::default() },
        ..RunConfig::default()
    };
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let model = RevModel::new(cfg.model.clone(), cfg.seed).unwrap();
    let stem = dir.path().join("ck");
    Checkpoint::from_params(&model.params, None).save(&stem).unwrap();

    let c_cfg = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let c_ck = CString::new(stem.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { reverb_model_load(c_cfg.as_ptr(), c_ck.as_ptr(), &mut handle) }, ReverbStatus::Ok);
    let (mut th, mut tf, mut kg) = (0, 0, 0);
    assert_eq!(unsafe { reverb_model_dims(handle, &mut th, &mut tf, &mut kg) }, ReverbStatus::Ok);
    assert_eq!((th, tf, kg), (8, 12, 3));

    let ego: Vec<f64> = (0..th).flat_map(|t| [10.0 + 0.4 * t as f64, 5.0]).collect();
    let nb: Vec<f64> = (0..th).flat_map(|t| [12.0, 7.0 - 0.3 * t as f64]).collect();
    let mut out = vec![f64::NAN; kg * tf * 2];
    assert_eq!(
        unsafe { reverb_model_predict(handle, ego.as_ptr(), nb.as_ptr(), 1, out.as_mut_ptr()) },
        ReverbStatus::Ok
    );
    assert!(out.iter().all(|v| v.is_finite()));
    // World coordinates: first prediction lies near the ego's last point.
    assert!((out[0] - ego[2 * th - 2]).abs() < 5.0 && (out[1] - 5.0).abs() < 5.0);
    unsafe { reverb_model_free(handle) };
}

#[test]
fn missing_checkpoint_is_an_io_or_checkpoint_error() {
    let ck = CString::new("/nonexistent/ck").unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { reverb_model_load(ptr::null(), ck.as_ptr(), &mut m) };
    assert!(matches!(s, ReverbStatus::Io | ReverbStatus::Checkpoint), "{s:?}");
    assert!(m.is_null());
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/reverb.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in
        ["reverb_model_predict", "reverb_last_error", "REVERB_STATUS_OK", "typedef struct ReverbModel ReverbModel"]
    {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping compile check");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"reverb.h\"\nint main(void) { ReverbModel *m = 0; size_t t; \
         return reverb_model_dims(m, &t, &t, &t) == REVERB_STATUS_NULL_POINTER ? 0 : 1; }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
