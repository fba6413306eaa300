// Lets the acceptance runner compile the core suites as plain functions.
fn main() {
    println!("cargo::rustc-check-cfg=cfg(acceptance_harness)");
    println!("cargo::rustc-cfg=acceptance_harness");
}
