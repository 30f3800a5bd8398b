fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR unset");
    let config = cbindgen::Config::from_file(format!("{crate_dir}/cbindgen.toml"))
        .expect("cbindgen.toml is malformed");
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            // write_to_file leaves the header untouched when unchanged, so
            // this does not trigger rebuild loops.
            bindings.write_to_file(format!("{crate_dir}/include/gscodec.h"));
        }
        Err(e) => println!("cargo:warning=skipping header generation: {e}"),
    }
}
