// Builds the guest crates for wasm32 with a nested cargo invocation and
// copies the modules into OUT_DIR for `include_bytes!`.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const GUESTS: &[(&str, &str)] = &[
    ("synthetic-operator", "synthetic_operator.wasm"),
    ("reference-guests", "reference_guests.wasm"),
];

const TARGET: &str = "wasm32-unknown-unknown";

fn main() {
    let manifest_dir = PathBuf::from(env::var_os("CARGO_MANIFEST_DIR").unwrap());
    let root = manifest_dir.parent().and_then(Path::parent).unwrap().to_owned();
    let out_dir = PathBuf::from(env::var_os("OUT_DIR").unwrap());

    for dir in ["abi", "guest-sdk", "synthetic-operator", "reference-guests"] {
        println!("cargo:rerun-if-changed={}", root.join("crates").join(dir).join("src").display());
        println!("cargo:rerun-if-changed={}", root.join("crates").join(dir).join("Cargo.toml").display());
    }
    println!("cargo:rerun-if-changed={}", root.join("Cargo.lock").display());
    println!("cargo:rerun-if-env-changed=WASM_OPERATOR_GUEST_DIR");

    // Prebuilt modules, for hosts without the wasm32 target.
    if let Some(dir) = env::var_os("WASM_OPERATOR_GUEST_DIR") {
        for (_, file) in GUESTS {
            fs::copy(Path::new(&dir).join(file), out_dir.join(file))
                .unwrap_or_else(|e| panic!("copying {file} from WASM_OPERATOR_GUEST_DIR: {e}"));
        }
        return;
    }

    let target_dir = root.join("target").join("guest-wasm");
    let cargo = env::var_os("CARGO").unwrap_or_else(|| "cargo".into());
    let mut cmd = Command::new(cargo);
    cmd.current_dir(&root)
        .args(["build", "--release", "--target", TARGET, "--target-dir"])
        .arg(&target_dir);
    for (package, _) in GUESTS {
        cmd.args(["-p", package]);
    }
    for var in [
        "RUSTFLAGS",
        "CARGO_ENCODED_RUSTFLAGS",
        "CARGO_TARGET_DIR",
        "CARGO_BUILD_TARGET",
        "CARGO_BUILD_RUSTFLAGS",
        "RUSTC_WORKSPACE_WRAPPER",
        "CARGO_LLVM_COV",
        "LLVM_PROFILE_FILE",
    ] {
        cmd.env_remove(var);
    }
    let status = cmd.status().expect("spawning nested cargo");
    if !status.success() {
        panic!(
            "building the wasm guests failed ({status}); install the target with \
             `rustup target add {TARGET}` or point WASM_OPERATOR_GUEST_DIR at prebuilt modules"
        );
    }
    for (_, file) in GUESTS {
        let built = target_dir.join(TARGET).join("release").join(file);
        fs::copy(&built, out_dir.join(file)).unwrap_or_else(|e| panic!("copying {}: {e}", built.display()));
    }
}
