#![allow(dead_code)]

pub mod oracle;

use std::path::Path;
use std::process::{Command, Output};

pub fn damo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_damo")).args(args).output().expect("binary runs")
}

pub fn damo_ok(args: &[&str]) -> String {
    let out = damo(args);
    assert!(
        out.status.success(),
        "damo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Prints the criterion outcome, then fails the test if it did not hold.
pub fn verdict(id: u32, what: &str, ok: bool, detail: &str) {
    println!("criterion {id} [{}] {what}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} failed: {what}: {detail}");
}
