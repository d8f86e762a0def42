use std::ffi::{CStr, CString};
use std::ptr;

use smae::pipeline::pretrain::pretrain;
use smae::RunConfig;
use smae_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(smae_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn shape(kind: &str, n: usize, seed: u64) -> *mut SmaeCloud {
    let kind = CString::new(kind).unwrap();
    let mut cloud = ptr::null_mut();
    let status = unsafe { smae_make_shape(kind.as_ptr(), n, seed, &mut cloud) };
    assert_eq!(status, SmaeStatus::Ok, "{}", last_error());
    cloud
}

#[test]
fn cloud_round_trip_and_chamfer() {
    let xyz = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0];
    let mut a = ptr::null_mut();
    unsafe {
        assert_eq!(smae_cloud_new(xyz.as_ptr(), 3, &mut a), SmaeStatus::Ok);
        assert_eq!(smae_cloud_len(a), 3);
        let mut back = [0.0; 9];
        assert_eq!(smae_cloud_points(a, back.as_mut_ptr(), 9), SmaeStatus::Ok);
        assert_eq!(back, xyz);
        assert_eq!(
            smae_cloud_points(a, back.as_mut_ptr(), 8),
            SmaeStatus::InvalidArgument
        );
        let mut labels = [0usize; 3];
        assert_eq!(
            smae_cloud_labels(a, labels.as_mut_ptr(), 3),
            SmaeStatus::InvalidArgument
        );
        assert!(last_error().contains("no labels"));

        let mut d = -1.0;
        assert_eq!(smae_chamfer(a, a, &mut d), SmaeStatus::Ok);
        assert_eq!(d, 0.0);
        smae_cloud_free(a);
    }
}

#[test]
fn shapes_carry_labels() {
    let c = shape("chair", 128, 7);
    unsafe {
        assert_eq!(smae_cloud_len(c), 128);
        let mut labels = vec![usize::MAX; 128];
        assert_eq!(
            smae_cloud_labels(c, labels.as_mut_ptr(), 128),
            SmaeStatus::Ok
        );
        assert!(labels.iter().all(|&l| l != usize::MAX));
        smae_cloud_free(c);
    }
    let bad = CString::new("teapot").unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { smae_make_shape(bad.as_ptr(), 64, 0, &mut out) };
    assert_eq!(status, SmaeStatus::InvalidArgument);
    assert!(out.is_null());
    assert!(last_error().contains("teapot"));
}

#[test]
fn fps_and_knn_match_core() {
    let c = shape("plane", 96, 3);
    unsafe {
        let mut picked = [0usize; 8];
        assert_eq!(smae_fps(c, 8, 0, picked.as_mut_ptr()), SmaeStatus::Ok);
        let mut hoods = [0usize; 8 * 4];
        assert_eq!(
            smae_knn(c, picked.as_ptr(), 8, 4, hoods.as_mut_ptr()),
            SmaeStatus::Ok
        );
        for (row, &center) in hoods.chunks(4).zip(&picked) {
            assert_eq!(row[0], center);
        }
        assert_eq!(
            smae_fps(c, 97, 0, picked.as_mut_ptr()),
            SmaeStatus::InvalidArgument
        );
        smae_cloud_free(c);
    }
}

#[test]
fn csem_mask_counts() {
    let assignment: Vec<usize> = (0..48).map(|i| i / 16).collect();
    let mut mask = [9u8; 48];
    unsafe {
        assert_eq!(
            smae_csem_mask(assignment.as_ptr(), 48, 1, 0.6, 5, mask.as_mut_ptr()),
            SmaeStatus::Ok
        );
    }
    assert!(mask.iter().all(|&m| m <= 1));
    assert_eq!(mask.iter().filter(|&&m| m == 1).count(), 29);
    let full = (0..3).filter(|&c| mask[c * 16..(c + 1) * 16].iter().all(|&m| m == 1));
    assert_eq!(full.count(), 1);
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        let mut d = 0.0;
        assert_eq!(
            smae_chamfer(ptr::null(), ptr::null(), &mut d),
            SmaeStatus::NullPointer
        );
        assert_eq!(smae_cloud_len(ptr::null()), 0);
        assert_eq!(smae_model_prototypes(ptr::null()), 0);
        assert_eq!(
            smae_cloud_new(ptr::null(), 3, &mut ptr::null_mut()),
            SmaeStatus::NullPointer
        );
        smae_cloud_free(ptr::null_mut());
        smae_model_free(ptr::null_mut());
    }
}

#[test]
fn model_exports_groups() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset("toy").unwrap();
    cfg.epochs = 1;
    pretrain(&cfg, Some(dir.path())).unwrap();
    let path = CString::new(dir.path().join("checkpoint.bin").to_str().unwrap()).unwrap();

    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            smae_model_load(path.as_ptr(), &mut model),
            SmaeStatus::Ok,
            "{}",
            last_error()
        );
        let q = smae_model_prototypes(model);
        assert_eq!(q, cfg.prototypes);
        let c = shape("table", cfg.n_points, 11);
        let mut labels = vec![usize::MAX; cfg.n_points];
        assert_eq!(
            smae_export_groups(model, c, labels.as_mut_ptr()),
            SmaeStatus::Ok
        );
        assert!(labels.iter().all(|&l| l < q));
        smae_cloud_free(c);
        smae_model_free(model);
    }

    let missing = CString::new(dir.path().join("nope.bin").to_str().unwrap()).unwrap();
    let status = unsafe { smae_model_load(missing.as_ptr(), &mut model) };
    assert_eq!(status, SmaeStatus::Config);
    assert!(last_error().contains("nope.bin"));
}

#[test]
fn header_declares_every_entry_point() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/smae.h")).unwrap();
    for name in [
        "smae_last_error_message",
        "smae_version",
        "smae_cloud_new",
        "smae_make_shape",
        "smae_cloud_read",
        "smae_cloud_len",
        "smae_cloud_points",
        "smae_cloud_labels",
        "smae_cloud_free",
        "smae_chamfer",
        "smae_fps",
        "smae_knn",
        "smae_csem_mask",
        "smae_model_load",
        "smae_model_prototypes",
        "smae_export_groups",
        "smae_model_free",
        "SMAE_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let version = unsafe { CStr::from_ptr(smae_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = std::process::Command::new(compiler)
            .args([
                "-fsyntax-only",
                "-Wall",
                "-Werror",
                "-x",
                lang,
                "-I",
                include,
                "-",
            ])
            .stdin(std::process::Stdio::piped())
            .spawn()
            .and_then(|mut child| {
                use std::io::Write;
                child.stdin.take().expect("piped stdin").write_all(
                    b"#include \"smae.h\"\nint main(void) { return smae_version() == 0; }\n",
                )?;
                child.wait()
            });
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected smae.h"),
            Err(e) => eprintln!("skipping {compiler}: {e}"),
        }
    }
}
