//! Regenerates the C header from the extern "C" surface on every build.
//! The header is committed so pure-C consumers never need the Rust
//! toolchain; this script keeps it from drifting.

use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let header = crate_dir.join("include").join("advtrain.h");
    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(&header);
        }
        // A parse error must fail the build; an incomplete toolchain (e.g.
        // docs.rs) merely keeps the committed header.
        Err(cbindgen::Error::ParseSyntaxError { .. }) => panic!("header generation failed"),
        Err(e) => println!("cargo:warning=skipping header generation: {e}"),
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
