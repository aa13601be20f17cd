use std::ffi::{CStr, CString};
use std::ptr;

use vtsfe_ffi::*;

fn last_error() -> String {
    let p = vtsfe_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn synth(classes: usize, demos: usize, frames: usize, dims: usize) -> *mut VtsfeDataset {
    let mut ds = ptr::null_mut();
    let st = unsafe { vtsfe_dataset_synth(classes, demos, frames, dims, 3, &mut ds) };
    assert_eq!(st, VtsfeStatus::Ok);
    assert!(!ds.is_null());
    ds
}

const TINY: &str =
    r#"{"t_full": 20, "hidden": 6, "samples": 2, "l_sub": 6, "n_v": 2, "batch_size": 3, "epochs": 2, "seed": 5}"#;

#[test]
fn dataset_round_trip() {
    let ds = synth(2, 3, 20, 4);
    unsafe {
        assert_eq!(vtsfe_dataset_len(ds), 6);
        let (mut t, mut d) = (0usize, 0usize);
        assert_eq!(vtsfe_dataset_demo_shape(ds, 5, &mut t, &mut d), VtsfeStatus::Ok);
        assert_eq!((t, d), (20, 4));
        let mut buf = vec![0.0; 80];
        assert_eq!(
            vtsfe_dataset_demo_copy(ds, 0, buf.as_mut_ptr(), buf.len()),
            VtsfeStatus::Ok
        );
        assert!(buf.iter().all(|v| v.is_finite()) && buf.iter().any(|v| *v != 0.0));
        assert_eq!(vtsfe_dataset_demo_copy(ds, 0, buf.as_mut_ptr(), 3), VtsfeStatus::Config);
        assert_eq!(vtsfe_dataset_demo_shape(ds, 6, &mut t, &mut d), VtsfeStatus::Config);
        assert!(last_error().contains("out of range"));
        vtsfe_dataset_free(ds);
    }
}

#[test]
fn null_and_invalid_arguments() {
    unsafe {
        assert_eq!(vtsfe_dataset_len(ptr::null()), 0);
        let mut m = ptr::null_mut();
        assert_eq!(vtsfe_train(ptr::null(), ptr::null(), &mut m), VtsfeStatus::NullArgument);
        assert!(m.is_null());
        assert_eq!(
            vtsfe_dataset_synth(0, 1, 10, 2, 0, &mut ptr::null_mut()),
            VtsfeStatus::Config
        );
        let missing = CString::new("/nonexistent/manifest.json").unwrap();
        let mut ds = ptr::null_mut();
        assert_ne!(vtsfe_dataset_load(missing.as_ptr(), &mut ds), VtsfeStatus::Ok);
        assert!(ds.is_null());
        let ds = synth(2, 3, 20, 4);
        let bad = CString::new(r#"{"model": "lstm"}"#).unwrap();
        assert_eq!(vtsfe_train(ds, bad.as_ptr(), &mut m), VtsfeStatus::Config);
        assert!(last_error().contains("vtsfe-light"));
        vtsfe_dataset_free(ds);
        vtsfe_dataset_free(ptr::null_mut());
        vtsfe_model_free(ptr::null_mut());
    }
}

#[test]
fn train_reconstruct_evaluate_save_load() {
    let ds = synth(2, 3, 20, 4);
    let cfg = CString::new(TINY).unwrap();
    let tmp = tempfile::TempDir::new().unwrap();
    let path = CString::new(tmp.path().join("ck.json").to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(
            vtsfe_train(ds, cfg.as_ptr(), &mut m),
            VtsfeStatus::Ok,
            "{}",
            last_error()
        );
        let (mut d, mut dz, mut t) = (0, 0, 0);
        assert_eq!(vtsfe_model_shape(m, &mut d, &mut dz, &mut t), VtsfeStatus::Ok);
        assert_eq!((d, dz, t), (4, 2, 20));

        let input: Vec<f64> = (0..t * d).map(|i| ((i as f64) * 0.1).sin() * 0.5).collect();
        let mut recon = vec![f64::NAN; t * d];
        let mut latent = vec![f64::NAN; t * dz];
        let st = vtsfe_model_reconstruct(m, input.as_ptr(), t, recon.as_mut_ptr(), latent.as_mut_ptr());
        assert_eq!(st, VtsfeStatus::Ok, "{}", last_error());
        assert!(recon.iter().chain(&latent).all(|v| v.is_finite()));
        let st = vtsfe_model_reconstruct(m, input.as_ptr(), t - 1, recon.as_mut_ptr(), ptr::null_mut());
        assert_eq!(st, VtsfeStatus::Config);

        let (mut mse, mut sv) = (f64::NAN, f64::NAN);
        assert_eq!(vtsfe_model_evaluate(m, ds, &mut mse, &mut sv), VtsfeStatus::Ok);
        assert!(mse.is_finite() && mse >= 0.0 && sv.is_finite() && sv >= 0.0);

        assert_eq!(vtsfe_model_save(m, path.as_ptr()), VtsfeStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(vtsfe_model_load(path.as_ptr(), &mut loaded), VtsfeStatus::Ok);
        let mut again = vec![0.0; t * d];
        vtsfe_model_reconstruct(loaded, input.as_ptr(), t, again.as_mut_ptr(), ptr::null_mut());
        assert_eq!(recon, again);

        let other = synth(2, 3, 20, 5);
        assert_eq!(vtsfe_model_evaluate(m, other, &mut mse, &mut sv), VtsfeStatus::Config);
        vtsfe_dataset_free(other);
        vtsfe_model_free(loaded);
        vtsfe_model_free(m);
        vtsfe_dataset_free(ds);
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/vtsfe.h");
    for f in [
        "vtsfe_last_error",
        "vtsfe_dataset_synth",
        "vtsfe_dataset_load",
        "vtsfe_dataset_len",
        "vtsfe_dataset_demo_shape",
        "vtsfe_dataset_demo_copy",
        "vtsfe_dataset_free",
        "vtsfe_train",
        "vtsfe_model_load",
        "vtsfe_model_save",
        "vtsfe_model_shape",
        "vtsfe_model_reconstruct",
        "vtsfe_model_evaluate",
        "vtsfe_model_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct VtsfeModel VtsfeModel;"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/vtsfe.h");
    match std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(_) => eprintln!("no C compiler found; skipped"),
    }
}
