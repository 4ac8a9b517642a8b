use std::process::Command;

fn main() {
    let pkg = env!("CARGO_PKG_VERSION");
    let rev = Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let version = match rev {
        Some(r) => format!("{pkg} ({r})"),
        None => pkg.to_string(),
    };
    println!("cargo:rustc-env=EDGEUDA_VERSION={version}");
    println!("cargo:rerun-if-changed=build.rs");
}
