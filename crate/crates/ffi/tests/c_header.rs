//! The generated header compiles as C and a C program linked against the
//! static library runs.

use std::path::PathBuf;
use std::process::Command;

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// `target/<profile>` of the running test binary.
/// The static library of the current build: `cargo test` leaves it in
/// `target/<profile>/deps`, `cargo build` also copies it one level up.
fn static_library() -> PathBuf {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let candidates = [deps.join("libcddpm_ffi.a"), deps.parent().unwrap().join("libcddpm_ffi.a")];
    candidates.iter().find(|p| p.exists()).unwrap_or(&candidates[0]).clone()
}

fn cc() -> String {
    std::env::var("CC").unwrap_or_else(|_| "cc".into())
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(manifest_dir().join("include/cddpm.h")).unwrap();
    for name in [
        "CDDPM_H",
        "CDDPM_STATUS_OK",
        "CDDPM_STATUS_PANIC",
        "typedef struct CddpmVolume CddpmVolume",
        "typedef struct CddpmMask CddpmMask",
        "typedef struct CddpmModel CddpmModel",
        "cddpm_last_error_message",
        "cddpm_volume_load",
        "cddpm_reconstruct",
        "cddpm_model_free",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn c_program_links_and_runs() {
    let lib = static_library();
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let out_dir = tempfile::tempdir().unwrap();
    let exe = out_dir.path().join("smoke");
    let status = Command::new(cc())
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(manifest_dir().join("include"))
        .arg(manifest_dir().join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "compiling the C smoke test failed");
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains(" ok"));
}
