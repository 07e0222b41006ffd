use std::ffi::{CStr, CString};
use std::ptr;

use mdtal::checkpoint::save_model;
use mdtal::denoiser::{DenoiserParams, ModelConfig};
use mdtal::synthgen::{generate_dataset, write_dataset, SynthConfig};
use mdtal_ffi::*;

fn last_error() -> String {
    let p = mdtal_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take_json(p: *mut std::ffi::c_char) -> serde_json::Value {
    assert!(!p.is_null());
    let v = serde_json::from_str(unsafe { CStr::from_ptr(p) }.to_str().unwrap()).unwrap();
    unsafe { mdtal_string_free(p) };
    v
}

#[test]
fn version_is_static_string() {
    let v = unsafe { CStr::from_ptr(mdtal_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn time_codec_roundtrip_and_errors() {
    let mut k = 0u32;
    assert_eq!(
        unsafe { mdtal_time_encode(50.0, 100.0, 100, &mut k) },
        MdtalStatus::Ok
    );
    assert_eq!(k, 50); // round(99 * 0.5) = round(49.5) = 50
    let mut tau = 0.0;
    assert_eq!(
        unsafe { mdtal_time_decode(99, 100.0, 100, &mut tau) },
        MdtalStatus::Ok
    );
    assert_eq!(tau, 100.0);

    assert_eq!(
        unsafe { mdtal_time_encode(101.0, 100.0, 100, &mut k) },
        MdtalStatus::OutOfRange
    );
    assert!(last_error().contains("101"));
    assert_eq!(
        unsafe { mdtal_time_decode(100, 100.0, 100, &mut tau) },
        MdtalStatus::OutOfRange
    );
    assert_eq!(
        unsafe { mdtal_time_encode(1.0, 100.0, 100, ptr::null_mut()) },
        MdtalStatus::NullPointer
    );
}

#[test]
fn tiou_and_step_weight() {
    let mut v = 0.0;
    assert_eq!(
        unsafe { mdtal_tiou(0.0, 2.0, 1.0, 3.0, &mut v) },
        MdtalStatus::Ok
    );
    assert!((v - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(unsafe { mdtal_step_weight(1, 64, &mut v) }, MdtalStatus::Ok);
    assert!((v - 2.0 / 65.0).abs() < 1e-15);
    assert_eq!(
        unsafe { mdtal_step_weight(0, 64, &mut v) },
        MdtalStatus::OutOfRange
    );
}

#[test]
fn soft_iou_of_point_masses() {
    let n = 11;
    let mut ps = vec![0.0; n];
    let mut pe = vec![0.0; n];
    ps[2] = 1.0;
    pe[6] = 1.0;
    let mut r = 0.0;
    // [0.2, 0.6] against [0.4, 0.8]: overlap 0.2, union 0.6
    assert_eq!(
        unsafe { mdtal_soft_iou(ps.as_ptr(), pe.as_ptr(), n, 4, 8, &mut r) },
        MdtalStatus::Ok
    );
    assert!((r - 1.0 / 3.0).abs() < 1e-7);
    ps[2] = f64::NAN;
    assert_eq!(
        unsafe { mdtal_soft_iou(ps.as_ptr(), pe.as_ptr(), n, 4, 8, &mut r) },
        MdtalStatus::NonFinite
    );
    assert_eq!(
        unsafe { mdtal_soft_iou(pe.as_ptr(), pe.as_ptr(), n, 11, 8, &mut r) },
        MdtalStatus::OutOfRange
    );
}

#[test]
fn model_handle_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let task = SynthConfig::default();
    let vocab = task.vocabulary().unwrap();
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 1,
        n_steps: 8,
        max_response: task.template_len(),
        ..ModelConfig::for_vocab(&vocab)
    };
    let params = DenoiserParams::new(config).unwrap();
    let ckpt = dir.path().join("m.bin");
    save_model(&ckpt, &params, &task, serde_json::Value::Null).unwrap();
    let examples = generate_dataset(&task, 3, 0).unwrap();
    let data = dir.path().join("eval.jsonl");
    write_dataset(&examples, &data).unwrap();

    let path = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { mdtal_model_load(path.as_ptr(), &mut model) },
        MdtalStatus::Ok
    );
    assert!(!model.is_null());

    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { mdtal_model_info(model, &mut out) },
        MdtalStatus::Ok
    );
    let info = take_json(out);
    assert_eq!(info["model"]["d_model"], 16);

    let feats = &examples[0].features;
    let flat: Vec<f64> = feats.iter().copied().collect();
    let status = unsafe {
        mdtal_model_generate(
            model,
            flat.as_ptr(),
            feats.nrows(),
            feats.ncols(),
            0,
            &mut out,
        )
    };
    assert_eq!(status, MdtalStatus::Ok, "{}", last_error());
    assert!(take_json(out).is_array());
    let status = unsafe {
        mdtal_model_generate(
            model,
            flat.as_ptr(),
            feats.nrows(),
            feats.ncols() - 1,
            0,
            &mut out,
        )
    };
    assert_eq!(status, MdtalStatus::InvalidArgument);
    let status = unsafe {
        mdtal_model_generate(
            model,
            flat.as_ptr(),
            feats.nrows(),
            feats.ncols(),
            64,
            &mut out,
        )
    };
    assert_eq!(status, MdtalStatus::OutOfRange);

    let dpath = CString::new(data.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { mdtal_model_evaluate(model, dpath.as_ptr(), 0, &mut out) },
        MdtalStatus::Ok
    );
    let ev = take_json(out);
    assert!(ev["report"]["rtl"]["miou"].is_number());

    let preds = dir.path().join("preds.jsonl");
    let dets: Vec<mdtal::metrics::Detection> =
        serde_json::from_value(ev["predictions"].clone()).unwrap();
    mdtal::metrics::write_detections(&preds, &dets).unwrap();
    let ppath = CString::new(preds.to_str().unwrap()).unwrap();
    let (rtl, thumos) = (
        CString::new("rtl").unwrap(),
        CString::new("thumos").unwrap(),
    );
    let status = unsafe {
        mdtal_eval_jsonl(
            ppath.as_ptr(),
            dpath.as_ptr(),
            rtl.as_ptr(),
            thumos.as_ptr(),
            &mut out,
        )
    };
    assert_eq!(status, MdtalStatus::Ok, "{}", last_error());
    assert_eq!(take_json(out)["rtl"], ev["report"]["rtl"]);

    let bad = CString::new("nope").unwrap();
    let status = unsafe {
        mdtal_eval_jsonl(
            ppath.as_ptr(),
            dpath.as_ptr(),
            rtl.as_ptr(),
            bad.as_ptr(),
            &mut out,
        )
    };
    assert_eq!(status, MdtalStatus::InvalidArgument);
    unsafe { mdtal_model_free(model) };
}

#[test]
fn missing_checkpoint_reports_io() {
    let path = CString::new("/nonexistent/model.bin").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { mdtal_model_load(path.as_ptr(), &mut model) },
        MdtalStatus::Io
    );
    assert!(model.is_null());
    assert!(!last_error().is_empty());
    unsafe { mdtal_model_free(ptr::null_mut()) };
    unsafe { mdtal_string_free(ptr::null_mut()) };
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mdtal.h")).unwrap();
    for f in [
        "mdtal_version",
        "mdtal_last_error_message",
        "mdtal_string_free",
        "mdtal_time_encode",
        "mdtal_time_decode",
        "mdtal_tiou",
        "mdtal_step_weight",
        "mdtal_soft_iou",
        "mdtal_model_load",
        "mdtal_model_free",
        "mdtal_model_info",
        "mdtal_model_generate",
        "mdtal_model_evaluate",
        "mdtal_eval_jsonl",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct MdtalModel MdtalModel;"));
    assert!(header.contains("MDTAL_STATUS_OK = 0"));
}
