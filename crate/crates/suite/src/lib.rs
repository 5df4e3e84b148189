//! End-to-end acceptance suite for the workspace; see `tests/acceptance.rs`.
//! The package sorts after the library and CLI packages, so
//! `cargo test --workspace` runs every other target before it.

use std::path::PathBuf;
use std::process::Command;

/// The `mergeguard` binary in the same target directory as the running
/// test. The binary is (re)built first, so it is never stale.
pub fn cli_binary() -> PathBuf {
    let status = Command::new(env!("CARGO"))
        .args(["build", "--quiet", "-p", "mergeguard-cli", "--bin", "mergeguard"])
        .status()
        .expect("running cargo build");
    assert!(status.success(), "building the mergeguard binary failed");
    let exe = std::env::current_exe().expect("test executable path");
    let profile_dir = exe.parent().and_then(|deps| deps.parent()).expect("target/<profile>/deps layout");
    profile_dir.join(format!("mergeguard{}", std::env::consts::EXE_SUFFIX))
}
