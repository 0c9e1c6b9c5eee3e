use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use steinprune_ffi::*;

fn last_error() -> String {
    let p = sp_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn blobs(per_class: usize, seed: u64) -> *mut SpDataset {
    let mut ds = ptr::null_mut();
    let st = unsafe { sp_dataset_blobs(2, per_class, 4, 6.0, seed, &mut ds) };
    assert_eq!(st, SpStatus::Ok);
    ds
}

fn ensemble(config: &str) -> *mut SpEnsemble {
    let sizes = [4usize, 16, 2];
    let cfg = CString::new(config).unwrap();
    let mut e = ptr::null_mut();
    let st = unsafe { sp_ensemble_new(sizes.as_ptr(), sizes.len(), 2, cfg.as_ptr(), &mut e) };
    assert_eq!(st, SpStatus::Ok, "{}", last_error());
    e
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(sp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let st = unsafe { sp_dataset_blobs(2, 10, 4, 6.0, 1, ptr::null_mut()) };
    assert_eq!(st, SpStatus::NullArgument);
    assert!(last_error().contains("out_dataset"));
    let mut n = 0usize;
    assert_eq!(
        unsafe { sp_dataset_len(ptr::null(), &mut n) },
        SpStatus::NullArgument
    );
    unsafe {
        sp_dataset_free(ptr::null_mut());
        sp_ensemble_free(ptr::null_mut());
        sp_mask_free(ptr::null_mut());
    }
}

#[test]
fn invalid_arguments_carry_messages() {
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { sp_dataset_blobs(4, 10, 1, 6.0, 1, &mut ds) },
        SpStatus::InvalidArgument
    );
    assert!(last_error().contains("configuration"));
    let bad = CString::new("{\"epochz\": 3}").unwrap();
    let sizes = [4usize, 2];
    let mut e = ptr::null_mut();
    let st = unsafe { sp_ensemble_new(sizes.as_ptr(), 2, 2, bad.as_ptr(), &mut e) };
    assert_eq!(st, SpStatus::InvalidArgument);
    assert!(last_error().contains("epochz"));
    assert!(e.is_null());
    let st = unsafe { sp_ensemble_new(sizes.as_ptr(), 2, 1, ptr::null(), &mut e) };
    assert_eq!(st, SpStatus::InvalidArgument);
}

#[test]
fn dataset_from_arrays() {
    let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [0u32, 1, 1];
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { sp_dataset_from_arrays(x.as_ptr(), 3, 2, y.as_ptr(), 2, &mut ds) },
        SpStatus::Ok
    );
    let mut n = 0;
    assert_eq!(unsafe { sp_dataset_len(ds, &mut n) }, SpStatus::Ok);
    assert_eq!(n, 3);
    unsafe { sp_dataset_free(ds) };
    let y = [0u32, 5, 1];
    assert_eq!(
        unsafe { sp_dataset_from_arrays(x.as_ptr(), 3, 2, y.as_ptr(), 2, &mut ds) },
        SpStatus::InvalidArgument
    );
}

#[test]
fn train_prune_save_load() {
    let ds = blobs(100, 3);
    let e = ensemble("{\"epochs\": 30, \"batch_size\": 32, \"beta_kl\": 0.001, \"seed\": 5}");
    let mut status = SpTrainStatus::Diverged;
    assert_eq!(
        unsafe { sp_ensemble_train(e, ds, &mut status) },
        SpStatus::Ok
    );
    assert_ne!(status, SpTrainStatus::Diverged);
    let mut acc = 0.0;
    assert_eq!(
        unsafe { sp_ensemble_accuracy(e, ds, 0, &mut acc) },
        SpStatus::Ok
    );
    assert!(acc > 0.95, "accuracy {acc}");
    assert_eq!(
        unsafe { sp_ensemble_accuracy(e, ds, 9, &mut acc) },
        SpStatus::InvalidArgument
    );

    let (mut particles, mut params) = (0, 0);
    assert_eq!(
        unsafe { sp_ensemble_shape(e, &mut particles, &mut params) },
        SpStatus::Ok
    );
    assert_eq!((particles, params), (2, 4 * 16 + 16 + 16 * 2 + 2));
    let mut disp = -1.0;
    assert_eq!(
        unsafe { sp_ensemble_dispersion(e, &mut disp) },
        SpStatus::Ok
    );
    assert!(disp > 0.0);

    let mut mask = ptr::null_mut();
    assert_eq!(unsafe { sp_prune_slab(e, 0.5, &mut mask) }, SpStatus::Ok);
    let (mut len, mut sparsity) = (0, -1.0);
    assert_eq!(
        unsafe { sp_mask_stats(mask, &mut len, &mut sparsity) },
        SpStatus::Ok
    );
    assert_eq!(len, params);
    let mut keep = vec![9u8; len];
    assert_eq!(
        unsafe { sp_mask_copy_keep(mask, keep.as_mut_ptr(), len) },
        SpStatus::Ok
    );
    let dropped = keep.iter().filter(|&&k| k == 0).count();
    assert!(keep.iter().all(|&k| k <= 1));
    assert!((dropped as f64 / len as f64 - sparsity).abs() < 1e-15);
    assert_eq!(
        unsafe { sp_mask_copy_keep(mask, keep.as_mut_ptr(), len - 1) },
        SpStatus::InvalidArgument
    );
    unsafe { sp_mask_free(mask) };

    let mut mag = ptr::null_mut();
    assert_eq!(
        unsafe { sp_prune_magnitude(e, 0.25, &mut mag) },
        SpStatus::Ok
    );
    assert_eq!(
        unsafe { sp_mask_stats(mag, &mut len, &mut sparsity) },
        SpStatus::Ok
    );
    assert!((sparsity - (0.25 * len as f64).round() / len as f64).abs() < 1e-15);
    unsafe { sp_mask_free(mag) };
    assert_eq!(
        unsafe { sp_prune_slab(e, 1.5, &mut mask) },
        SpStatus::InvalidArgument
    );

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("e.dllp").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sp_ensemble_save(e, path.as_ptr()) }, SpStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { sp_ensemble_load(path.as_ptr(), &mut loaded) },
        SpStatus::Ok
    );
    let mut acc2 = 0.0;
    assert_eq!(
        unsafe { sp_ensemble_accuracy(loaded, ds, 0, &mut acc2) },
        SpStatus::Ok
    );
    assert_eq!(acc.to_bits(), {
        let mut a = 0.0;
        unsafe { sp_ensemble_accuracy(e, ds, 0, &mut a) };
        a.to_bits()
    });
    assert_eq!(acc2.to_bits(), acc.to_bits());
    unsafe {
        sp_ensemble_free(loaded);
        sp_ensemble_free(e);
        sp_dataset_free(ds);
    }
}

#[test]
fn load_errors_map_to_status() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.dllp").to_str().unwrap()).unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(
        unsafe { sp_ensemble_load(missing.as_ptr(), &mut e) },
        SpStatus::Io
    );
    let junk = dir.path().join("junk.dllp");
    std::fs::write(&junk, b"NOTACKPT and more bytes").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { sp_ensemble_load(junk.as_ptr(), &mut e) },
        SpStatus::Format
    );
    assert!(last_error().contains("byte"));
}

#[test]
fn efficiency_and_kernel() {
    let mut v = 0.0;
    assert_eq!(
        unsafe { sp_efficiency(SpNoiseCase::Both, 1.0, 1.0, 2.0, &mut v) },
        SpStatus::Ok
    );
    assert_eq!(v, 0.25);
    assert_eq!(
        unsafe { sp_efficiency(SpNoiseCase::Clean, 1.0, 1.0, 0.0, &mut v) },
        SpStatus::InvalidArgument
    );
    let (a, b) = ([0.0, 0.0], [1.0, 1.0]);
    assert_eq!(
        unsafe { sp_rbf_kernel(a.as_ptr(), b.as_ptr(), 2, 2.0, &mut v) },
        SpStatus::Ok
    );
    assert_eq!(v, (-1.0f64).exp());
}

#[test]
fn errors_are_thread_local() {
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { sp_dataset_blobs(2, 0, 4, 6.0, 1, &mut ds) },
        SpStatus::InvalidArgument
    );
    let here = last_error();
    let other = std::thread::spawn(|| sp_last_error_message().is_null())
        .join()
        .unwrap();
    assert!(other);
    assert_eq!(last_error(), here);
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include").join("steinprune.h");
    assert!(
        header.is_file(),
        "the build script writes {}",
        header.display()
    );
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; header check skipped");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "steinprune.h"
int main(void) {
    double e = 0.0;
    if (sp_efficiency(SP_NOISE_CASE_MODEL_NOISE, 1.0, 1.0, 0.0, &e) != SP_STATUS_OK) return 1;
    if (e != 0.5) return 2;
    SpDataset *ds = NULL;
    if (sp_dataset_blobs(2, 0, 4, 6.0, 1, &ds) != SP_STATUS_INVALID_ARGUMENT) return 3;
    if (sp_last_error_message() == NULL) return 4;
    if (sp_dataset_blobs(2, 5, 4, 6.0, 1, &ds) != SP_STATUS_OK) return 5;
    size_t n = 0;
    sp_dataset_len(ds, &n);
    sp_dataset_free(ds);
    printf("%s %zu\n", sp_version(), n);
    return n == 10 ? 0 : 6;
}
"#,
    )
    .unwrap();
    let lib = target_dir().join("libsteinprune_ffi.a");
    let exe = dir.path().join("main");
    let mut cmd = Command::new(cc);
    cmd.arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src);
    if lib.is_file() {
        cmd.arg(&lib)
            .args(["-lpthread", "-ldl", "-lm"])
            .arg("-o")
            .arg(&exe);
    } else {
        eprintln!(
            "{} not built; checking the header syntax only",
            lib.display()
        );
        cmd.arg("-fsyntax-only");
    }
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    if lib.is_file() {
        let run = Command::new(&exe).output().unwrap();
        assert!(run.status.success(), "exit {:?}", run.status.code());
        assert_eq!(
            String::from_utf8_lossy(&run.stdout).trim(),
            format!("{} 10", env!("CARGO_PKG_VERSION"))
        );
    }
}
