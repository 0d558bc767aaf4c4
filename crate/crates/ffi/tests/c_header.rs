use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "drlab.h"

int main(void) {
    size_t dims[3] = {2, 4, 3};
    DrlabModel *m = NULL;
    if (drlab_model_new(dims, 3, DRLAB_ACTIVATION_TANH, 1, &m) != DRLAB_STATUS_OK) return 1;
    double x[4] = {0.5, -1.0, 2.0, 0.25};
    double logits[6];
    size_t pred[2];
    if (drlab_model_forward(m, x, 2, 2, logits, 6) != DRLAB_STATUS_OK) return 2;
    if (drlab_model_predict(m, x, 2, 2, pred) != DRLAB_STATUS_OK) return 3;
    if (drlab_model_forward(m, x, 1, 3, logits, 3) != DRLAB_STATUS_SHAPE) return 4;
    if (strlen(drlab_last_error()) == 0) return 5;
    if (drlab_model_forward(NULL, x, 1, 2, logits, 3) != DRLAB_STATUS_NULL_POINTER) return 6;
    drlab_model_free(m);
    printf("%zu %zu\n", pred[0], pred[1]);
    return 0;
}
"#;

fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links() {
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("drlab.h").exists());
    let lib = lib_dir();
    if !lib.join("libdrlab_ffi.so").exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or shared library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg(format!("-I{}", include.display()))
        .arg(format!("-L{}", lib.display()))
        .arg(format!("-Wl,-rpath,{}", lib.display()))
        .arg("-ldrlab_ffi")
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    let preds: Vec<usize> = text.split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(preds.len(), 2);
    assert!(preds.iter().all(|&p| p < 3));
}
