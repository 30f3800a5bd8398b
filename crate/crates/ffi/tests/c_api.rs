//! Exercises the C entry points end to end: compress a scene through the
//! raw API, reopen it as a handle, render, and query stats — plus the error
//! paths a C caller depends on.

use std::ffi::{CStr, CString};
use std::path::Path;

use gscodec_ffi::{
    gsc_compress_file, gsc_config_default, gsc_decompress_file, gsc_last_error, gsc_scene_free,
    gsc_scene_gaussian_count, gsc_scene_open, gsc_scene_render, gsc_stats_json, gsc_string_free,
    GscCamera, GscConfig, GscScene, GscStatus,
};

fn c_path(path: &Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(gsc_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn write_toy_scene(dir: &Path) -> (CString, CString) {
    let scene = gscodec::synth::toy_scene(&gscodec::synth::ToyConfig {
        n: 250,
        ..Default::default()
    })
    .unwrap();
    let ply_path = dir.join("toy.ply");
    std::fs::write(&ply_path, gscodec::ply::save_ply(&scene.cloud).unwrap()).unwrap();
    let cams_path = dir.join("cams.json");
    let cams = gscodec::synth::ring_cameras(2, 4.0, 0.8, 32, 28.0);
    gscodec::camera::save_cameras(&cams, &cams_path).unwrap();
    (c_path(&ply_path), c_path(&cams_path))
}

fn quick_config() -> GscConfig {
    let mut config = std::mem::MaybeUninit::<GscConfig>::uninit();
    let status = unsafe { gsc_config_default(config.as_mut_ptr()) };
    assert_eq!(status, GscStatus::Ok);
    let mut config = unsafe { config.assume_init() };
    config.hash_log2 = 8;
    config.codebook_size = 16;
    config.stages = 2;
    config.iters_mask = 40;
    config.iters_field = 80;
    config.iters_rvq = 10;
    config
}

#[test]
fn full_c_roundtrip_compress_open_render_stats() {
    let dir = tempfile::tempdir().unwrap();
    let (ply, cams) = write_toy_scene(dir.path());
    let cgs = c_path(&dir.path().join("toy.cgs"));
    let config = quick_config();

    let status = unsafe { gsc_compress_file(ply.as_ptr(), cams.as_ptr(), cgs.as_ptr(), &config) };
    assert_eq!(status, GscStatus::Ok, "compress failed: {}", last_error());

    let mut scene: *mut GscScene = std::ptr::null_mut();
    let status = unsafe { gsc_scene_open(cgs.as_ptr(), &mut scene) };
    assert_eq!(status, GscStatus::Ok, "open failed: {}", last_error());
    assert!(!scene.is_null());
    let count = unsafe { gsc_scene_gaussian_count(scene) };
    assert!(count > 0 && count <= 250, "count = {count}");

    let camera = GscCamera {
        rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        center: [0.0, 0.0, -5.0],
        focal: [28.0, 28.0],
        principal: [16.0, 16.0],
        width: 32,
        height: 32,
    };
    let mut rgb = vec![-1.0f32; 32 * 32 * 3];
    let status = unsafe { gsc_scene_render(scene, &camera, rgb.as_mut_ptr()) };
    assert_eq!(status, GscStatus::Ok, "render failed: {}", last_error());
    assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(rgb.iter().any(|&v| v > 0.0), "image is entirely black");

    let mut json: *mut std::os::raw::c_char = std::ptr::null_mut();
    let status = unsafe { gsc_stats_json(cgs.as_ptr(), &mut json) };
    assert_eq!(status, GscStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    assert!(text.contains("\"total\":"), "stats json: {text}");
    assert!(text.contains(&format!("\"gaussians\":{count}")));
    unsafe { gsc_string_free(json) };

    let ply_out = c_path(&dir.path().join("back.ply"));
    let dirvec = [0.0f64, 0.0, 1.0];
    let status =
        unsafe { gsc_decompress_file(cgs.as_ptr(), ply_out.as_ptr(), dirvec.as_ptr()) };
    assert_eq!(status, GscStatus::Ok, "decompress failed: {}", last_error());
    let back =
        gscodec::ply::load_ply(&std::fs::read(dir.path().join("back.ply")).unwrap()).unwrap();
    assert_eq!(back.len() as u64, count);

    unsafe { gsc_scene_free(scene) };
    unsafe { gsc_scene_free(std::ptr::null_mut()) };
}

#[test]
fn null_arguments_are_rejected_not_crashed() {
    let mut scene: *mut GscScene = std::ptr::null_mut();
    let status = unsafe { gsc_scene_open(std::ptr::null(), &mut scene) };
    assert_eq!(status, GscStatus::NullArgument);
    assert!(last_error().contains("null"));

    let good = CString::new("/tmp/whatever.cgs").unwrap();
    let status = unsafe { gsc_scene_open(good.as_ptr(), std::ptr::null_mut()) };
    assert_eq!(status, GscStatus::NullArgument);

    let status = unsafe {
        gsc_compress_file(std::ptr::null(), std::ptr::null(), good.as_ptr(), std::ptr::null())
    };
    assert_eq!(status, GscStatus::NullArgument);

    assert_eq!(unsafe { gsc_scene_gaussian_count(std::ptr::null()) }, 0);
}

#[test]
fn missing_and_corrupt_files_map_to_distinct_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let missing = c_path(&dir.path().join("nope.cgs"));
    let mut scene: *mut GscScene = std::ptr::null_mut();
    assert_eq!(
        unsafe { gsc_scene_open(missing.as_ptr(), &mut scene) },
        GscStatus::Io
    );

    let garbage = dir.path().join("garbage.cgs");
    std::fs::write(&garbage, b"this is not a container").unwrap();
    let garbage = c_path(&garbage);
    assert_eq!(
        unsafe { gsc_scene_open(garbage.as_ptr(), &mut scene) },
        GscStatus::Decode
    );
    assert!(!last_error().is_empty());
}

#[test]
fn invalid_config_is_reported_with_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let (ply, _) = write_toy_scene(dir.path());
    let out = c_path(&dir.path().join("out.cgs"));
    let mut config = quick_config();
    config.epsilon = 2.0;
    let status =
        unsafe { gsc_compress_file(ply.as_ptr(), std::ptr::null(), out.as_ptr(), &config) };
    assert_eq!(status, GscStatus::InvalidArgument);
    assert!(last_error().contains("epsilon"), "error: {}", last_error());
}
