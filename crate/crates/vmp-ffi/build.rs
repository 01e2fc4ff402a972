use std::env;
use std::fs;
use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = cbindgen::Config::from_file(dir.join("cbindgen.toml")).expect("cbindgen.toml");
    let bindings = cbindgen::Builder::new()
        .with_crate(&dir)
        .with_config(config)
        .generate()
        .expect("generate C header");
    let mut text = Vec::new();
    bindings.write(&mut text);
    let out = dir.join("include").join("vmp.h");
    // Leave the file untouched when nothing changed so downstream builds stay fresh.
    if fs::read(&out).ok().as_deref() != Some(text.as_slice()) {
        fs::create_dir_all(out.parent().unwrap()).unwrap();
        fs::write(&out, text).unwrap();
    }
}
