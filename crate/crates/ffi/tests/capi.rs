use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use energyscape_ffi::*;

fn last_error() -> String {
    let p = es_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_round_trip_and_energy() {
    let h = [0.5, -0.2];
    let w = [0.3];
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { es_mem_model_new(2, h.as_ptr(), w.as_ptr(), &mut m) }, EsStatus::Ok);
    assert_eq!(unsafe { es_mem_n_units(m) }, 2);
    let mut e = 0.0;
    assert_eq!(unsafe { es_mem_energy(m, 3, &mut e) }, EsStatus::Ok);
    assert!((e + 0.6).abs() < 1e-15);
    assert_eq!(unsafe { es_mem_energy(m, 4, &mut e) }, EsStatus::Range);
    assert!(last_error().contains("out of range"));
    let (mut ho, mut wo) = ([0.0; 2], [0.0; 4]);
    assert_eq!(unsafe { es_mem_params(m, ho.as_mut_ptr(), wo.as_mut_ptr()) }, EsStatus::Ok);
    assert_eq!(ho, h);
    assert_eq!(wo, [0.0, 0.3, 0.3, 0.0]);
    let mut z = 0.0;
    assert_eq!(unsafe { es_mem_log_partition(m, &mut z) }, EsStatus::Ok);
    let direct = (1.0f64 + 0.5f64.exp() + (-0.2f64).exp() + 0.6f64.exp()).ln();
    assert!((z - direct).abs() < 1e-12);
    let (mut c, mut a, mut conv) = (0.0, false, false);
    assert_eq!(unsafe { es_mem_fit_quality(m, &mut c, &mut a, &mut conv) }, EsStatus::InvalidArgument);
    unsafe { es_mem_free(m) };
    unsafe { es_mem_free(ptr::null_mut()) };
}

#[test]
fn fit_binarize_and_series() {
    let t = 200;
    let n = 3;
    let signals: Vec<f64> = (0..t * n).map(|k| ((k * 7919) % 101) as f64 / 10.0 + (k % n) as f64).collect();
    let mut states = vec![0u8; t * n];
    let mut codes = vec![0u32; t];
    let s = unsafe { es_binarize_mean(signals.as_ptr(), t, n, states.as_mut_ptr(), codes.as_mut_ptr()) };
    assert_eq!(s, EsStatus::Ok);
    assert!(states.iter().all(|&v| v <= 1));
    assert_eq!(codes[0], (0..n).map(|i| u32::from(states[i]) << i).sum::<u32>());

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { es_mem_fit(states.as_ptr(), t, n, &mut m) }, EsStatus::Ok);
    let (mut c, mut a, mut conv) = (0.0, false, false);
    assert_eq!(unsafe { es_mem_fit_quality(m, &mut c, &mut a, &mut conv) }, EsStatus::Ok);
    assert!(a && conv && c > 0.99);

    let mut energies = vec![0.0; t];
    assert_eq!(unsafe { es_energy_series(m, codes.as_ptr(), t, energies.as_mut_ptr()) }, EsStatus::Ok);
    let mut e0 = 0.0;
    unsafe { es_mem_energy(m, codes[0], &mut e0) };
    assert_eq!(energies[0], e0);

    let mut feats = vec![0.0; es_feature_len()];
    assert_eq!(unsafe { es_landscape_features(energies.as_ptr(), t, 0.2, feats.as_mut_ptr()) }, EsStatus::Ok);
    assert_eq!(unsafe { es_landscape_features(energies.as_ptr(), t, 0.7, feats.as_mut_ptr()) }, EsStatus::Range);
    unsafe { es_mem_free(m) };
}

#[test]
fn error_codes() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { es_mem_fit(ptr::null(), 10, 2, &mut m) }, EsStatus::NullPointer);
    assert!(last_error().contains("states"));
    let constant = [1.0; 8];
    assert_eq!(unsafe { es_binarize_mean(constant.as_ptr(), 4, 2, ptr::null_mut(), ptr::null_mut()) }, EsStatus::Degenerate);
    let states = [0u8; 21 * 4];
    assert_eq!(unsafe { es_mem_fit(states.as_ptr(), 4, 21, &mut m) }, EsStatus::Capacity);
    assert!(m.is_null());
    let (mut u, mut p) = (0.0, 0.0);
    assert_eq!(unsafe { es_mann_whitney(ptr::null(), 0, [1.0].as_ptr(), 1, &mut u, &mut p) }, EsStatus::Degenerate);
    let a = [1.0, 2.0, 3.0];
    let b = [4.0, 5.0, 6.0];
    assert_eq!(unsafe { es_mann_whitney(a.as_ptr(), 3, b.as_ptr(), 3, &mut u, &mut p) }, EsStatus::Ok);
    assert_eq!((u, p), (0.0, 0.1));
    assert!(!es_version().is_null());
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/energyscape.h")).unwrap();
    for name in [
        "es_last_error", "es_version", "es_mem_model_new", "es_mem_fit", "es_mem_free", "es_mem_n_units",
        "es_mem_params", "es_mem_energy", "es_mem_log_partition", "es_mem_fit_quality", "es_binarize_mean",
        "es_energy_series", "es_feature_len", "es_landscape_features", "es_mann_whitney",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct EsMemModel EsMemModel;"));
    assert!(header.contains("ES_STATUS_NON_CONVERGENCE = 5"));
}

/// Compile and run a C program against the header and static library when a
/// C compiler and the archive are available.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("libenergyscape_ffi.a");
    if !lib.is_file() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no cc or {} not built", lib.display());
        return;
    }
    let dir = tempfile_dir();
    let src = dir.join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "energyscape.h"
int main(void) {
    double h[3] = {0.1, -0.4, 0.2}, w[3] = {0.5, -0.3, 0.8}, e = 0.0;
    EsMemModel *m = NULL;
    if (es_mem_model_new(3, h, w, &m) != ES_STATUS_OK) return 1;
    if (es_mem_energy(m, 7, &e) != ES_STATUS_OK) return 2;
    if (es_mem_energy(m, 8, &e) != ES_STATUS_RANGE || es_last_error() == NULL) return 3;
    es_mem_energy(m, 7, &e);
    es_mem_free(m);
    printf("%.12f\n", e);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.join("smoke");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let e: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((e - -(0.1 - 0.4 + 0.2 + 0.5 - 0.3 + 0.8)).abs() < 1e-12);
    let _ = std::fs::remove_dir_all(&dir);
}

fn tempfile_dir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("energyscape-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
