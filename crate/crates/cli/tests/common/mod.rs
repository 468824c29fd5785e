#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sesa_core::dataset::write_csv;
use sesa_core::Dataset;

pub fn sesa() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sesa"));
    c.env_remove("SESA_THREADS").env("RUST_LOG", "error");
    c
}

pub fn run(args: &[&str]) -> Output {
    sesa().args(args).output().expect("spawn sesa")
}

pub fn write_dataset(path: &Path, ds: &Dataset) {
    let f = std::fs::File::create(path).unwrap();
    write_csv(ds, f, true).unwrap();
}

pub fn write_specs(path: &Path, ds: &Dataset) {
    std::fs::write(path, serde_json::to_string_pretty(ds.specs()).unwrap()).unwrap();
}

pub fn models_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
