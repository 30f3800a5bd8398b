//! C ABI over the scene codec.
//!
//! Conventions:
//! - Every fallible call returns a [`GscStatus`]; `GSC_STATUS_OK` is 0.
//! - On failure, [`gsc_last_error`] returns a thread-local message that stays
//!   valid until the next failing call on the same thread.
//! - Scenes are opaque handles created by [`gsc_scene_open`] and released by
//!   [`gsc_scene_free`].
//! - Strings returned through out-pointers are heap-allocated and must be
//!   released with [`gsc_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gscodec::camera::CameraPose;
use gscodec::config::RunConfig;
use gscodec::container::{decode_file, stats, DecodedScene};
use gscodec::error::GsError;
use gscodec::mask::MaskMode;
use gscodec::pipeline::{bake_cloud, compress, render_decoded_views};
use gscodec::ply::{load_ply, save_ply};

/// Status codes returned by every fallible API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GscStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A path, string, or config value was malformed.
    InvalidArgument = 2,
    /// File IO failed.
    Io = 3,
    /// The container could not be parsed.
    Decode = 4,
    /// A training stage failed.
    Train = 5,
    /// Unexpected internal failure (a bug; details via `gsc_last_error`).
    Internal = 6,
}

/// Compression settings. Zero-initialization is NOT a valid default; call
/// [`gsc_config_default`] first and then override fields.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GscConfig {
    /// Weight of the mask sparsity loss.
    pub lambda_mask: f64,
    /// Hard-mask threshold on the soft mask at prune time.
    pub epsilon: f64,
    /// 0 = opacity only, 1 = scale only, 2 = both.
    pub mask_mode: u8,
    /// Apply post-processing (pruning + quantization + entropy coding).
    pub post_process: bool,
    /// Skip mask training and keep every Gaussian.
    pub skip_mask: bool,
    /// Codes per residual-VQ stage.
    pub codebook_size: u32,
    /// Residual-VQ stages.
    pub stages: u32,
    /// log2 of the per-level hash table cap.
    pub hash_log2: u32,
    pub iters_mask: u64,
    pub iters_field: u64,
    pub iters_rvq: u64,
    pub seed: u64,
}

/// A pinhole camera. `rotation` is the row-major world-to-camera matrix;
/// `focal` and `principal` are in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GscCamera {
    pub rotation: [f64; 9],
    pub center: [f64; 3],
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub width: u32,
    pub height: u32,
}

/// An opened (decoded) scene.
pub struct GscScene {
    scene: DecodedScene,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &GsError) -> GscStatus {
    match e {
        GsError::Io(_) => GscStatus::Io,
        GsError::Decode(_) => GscStatus::Decode,
        GsError::Train(_) => GscStatus::Train,
        _ => GscStatus::InvalidArgument,
    }
}

fn fail(status: GscStatus, msg: impl Into<String>) -> GscStatus {
    set_last_error(msg.into());
    status
}

fn fail_err(e: GsError) -> GscStatus {
    let status = status_of(&e);
    set_last_error(e.to_string());
    status
}

/// Run `f`, converting panics into `Internal`.
fn guarded(f: impl FnOnce() -> GscStatus) -> GscStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(GscStatus::Internal, "internal panic"),
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for reads.
unsafe fn path_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a Path, GscStatus> {
    if ptr.is_null() {
        return Err(fail(GscStatus::NullArgument, format!("{name} is null")));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(
            GscStatus::InvalidArgument,
            format!("{name} is not valid UTF-8"),
        )),
    }
}

fn run_config(config: *const GscConfig) -> Result<RunConfig, GscStatus> {
    let mut rc = RunConfig::default();
    if !config.is_null() {
        let c = unsafe { *config };
        rc.lambda_mask = c.lambda_mask;
        rc.epsilon = c.epsilon;
        rc.mask_mode = MaskMode::from_code(c.mask_mode).map_err(fail_err)?;
        rc.pp = c.post_process;
        rc.skip_mask = c.skip_mask;
        rc.codebook_size = c.codebook_size as usize;
        rc.stages = c.stages as usize;
        rc.hash_log2 = c.hash_log2;
        rc.iters_mask = c.iters_mask as usize;
        rc.iters_field = c.iters_field as usize;
        rc.iters_rvq = c.iters_rvq as usize;
        rc.seed = c.seed;
    }
    rc.validate().map_err(fail_err)?;
    Ok(rc)
}

/// Fill `out` with the default compression settings.
///
/// # Safety
/// `out` must be valid for writes of one `GscConfig`.
#[no_mangle]
pub unsafe extern "C" fn gsc_config_default(out: *mut GscConfig) -> GscStatus {
    if out.is_null() {
        return fail(GscStatus::NullArgument, "out is null");
    }
    let rc = RunConfig::default();
    out.write(GscConfig {
        lambda_mask: rc.lambda_mask,
        epsilon: rc.epsilon,
        mask_mode: rc.mask_mode.code(),
        post_process: rc.pp,
        skip_mask: rc.skip_mask,
        codebook_size: rc.codebook_size as u32,
        stages: rc.stages as u32,
        hash_log2: rc.hash_log2,
        iters_mask: rc.iters_mask as u64,
        iters_field: rc.iters_field as u64,
        iters_rvq: rc.iters_rvq as u64,
        seed: rc.seed,
    });
    GscStatus::Ok
}

/// Compress a PLY scene into a `.cgs` container file.
/// `cameras_json` may be null (mask training is then skipped); `config` may
/// be null for defaults.
///
/// # Safety
/// All non-null pointers must satisfy the conventions above.
#[no_mangle]
pub unsafe extern "C" fn gsc_compress_file(
    input_ply: *const c_char,
    cameras_json: *const c_char,
    output_cgs: *const c_char,
    config: *const GscConfig,
) -> GscStatus {
    guarded(|| {
        let input = match path_arg(input_ply, "input_ply") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let output = match path_arg(output_cgs, "output_cgs") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let rc = match run_config(config) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let bytes = match std::fs::read(input) {
            Ok(b) => b,
            Err(e) => return fail(GscStatus::Io, format!("{}: {e}", input.display())),
        };
        let cloud = match load_ply(&bytes) {
            Ok(c) => c,
            Err(e) => return fail_err(e),
        };
        let views = if cameras_json.is_null() {
            Vec::new()
        } else {
            let path = match path_arg(cameras_json, "cameras_json") {
                Ok(p) => p,
                Err(s) => return s,
            };
            match gscodec::camera::load_cameras(path) {
                Ok(v) => v,
                Err(e) => return fail_err(e),
            }
        };
        let outcome = match compress(&cloud, &views, &rc) {
            Ok(o) => o,
            Err(e) => return fail_err(e),
        };
        match std::fs::write(output, &outcome.bytes) {
            Ok(()) => GscStatus::Ok,
            Err(e) => fail(GscStatus::Io, format!("{}: {e}", output.display())),
        }
    })
}

/// Decode a container and write an interop PLY with colors baked at
/// `view_dir` (a length-3 array; null means +z).
///
/// # Safety
/// All non-null pointers must satisfy the conventions above.
#[no_mangle]
pub unsafe extern "C" fn gsc_decompress_file(
    input_cgs: *const c_char,
    output_ply: *const c_char,
    view_dir: *const f64,
) -> GscStatus {
    guarded(|| {
        let input = match path_arg(input_cgs, "input_cgs") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let output = match path_arg(output_ply, "output_ply") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let dir = if view_dir.is_null() {
            [0.0, 0.0, 1.0]
        } else {
            [*view_dir, *view_dir.add(1), *view_dir.add(2)]
        };
        let bytes = match std::fs::read(input) {
            Ok(b) => b,
            Err(e) => return fail(GscStatus::Io, format!("{}: {e}", input.display())),
        };
        let scene = match decode_file(&bytes) {
            Ok(s) => s,
            Err(e) => return fail_err(e),
        };
        let cloud = match bake_cloud(&scene, dir) {
            Ok(c) => c,
            Err(e) => return fail_err(e),
        };
        let ply = match save_ply(&cloud) {
            Ok(p) => p,
            Err(e) => return fail_err(e),
        };
        match std::fs::write(output, &ply) {
            Ok(()) => GscStatus::Ok,
            Err(e) => fail(GscStatus::Io, format!("{}: {e}", output.display())),
        }
    })
}

/// Open a container file as a scene handle. On success `*out` owns the scene.
///
/// # Safety
/// `path` must be a valid string pointer; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gsc_scene_open(
    path: *const c_char,
    out: *mut *mut GscScene,
) -> GscStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GscStatus::NullArgument, "out is null");
        }
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) => return fail(GscStatus::Io, format!("{}: {e}", path.display())),
        };
        match decode_file(&bytes) {
            Ok(scene) => {
                out.write(Box::into_raw(Box::new(GscScene { scene })));
                GscStatus::Ok
            }
            Err(e) => fail_err(e),
        }
    })
}

/// Release a scene handle. Null is a no-op.
///
/// # Safety
/// `scene` must be null or a pointer returned by [`gsc_scene_open`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn gsc_scene_free(scene: *mut GscScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of Gaussians in the scene; 0 for null.
///
/// # Safety
/// `scene` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gsc_scene_gaussian_count(scene: *const GscScene) -> u64 {
    if scene.is_null() {
        0
    } else {
        (*scene).scene.len() as u64
    }
}

/// Render the scene at `camera` into `out_rgb`, a caller-allocated buffer of
/// `width * height * 3` floats (row-major RGB in [0, 1]).
///
/// # Safety
/// `scene` and `camera` must be live; `out_rgb` must be valid for
/// `width * height * 3` float writes.
#[no_mangle]
pub unsafe extern "C" fn gsc_scene_render(
    scene: *const GscScene,
    camera: *const GscCamera,
    out_rgb: *mut f32,
) -> GscStatus {
    guarded(|| {
        if scene.is_null() || camera.is_null() || out_rgb.is_null() {
            return fail(GscStatus::NullArgument, "scene, camera, and out_rgb are required");
        }
        let cam = &*camera;
        let pose = CameraPose::from_parts(
            cam.rotation,
            cam.center,
            cam.focal,
            cam.principal,
            [cam.width, cam.height],
        );
        if let Err(e) = pose.validate(0) {
            return fail_err(e);
        }
        match render_decoded_views(&(*scene).scene, &[pose], [0.0, 0.0, 0.0]) {
            Ok(images) => {
                let img = &images[0];
                for (i, &v) in img.data.iter().enumerate() {
                    out_rgb.add(i).write(v as f32);
                }
                GscStatus::Ok
            }
            Err(e) => fail_err(e),
        }
    })
}

/// Storage breakdown of a container file as a JSON string. The caller owns
/// `*out` and must release it with [`gsc_string_free`].
///
/// # Safety
/// `path` must be a valid string pointer; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gsc_stats_json(
    path: *const c_char,
    out: *mut *mut c_char,
) -> GscStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GscStatus::NullArgument, "out is null");
        }
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) => return fail(GscStatus::Io, format!("{}: {e}", path.display())),
        };
        let report = match stats(&bytes) {
            Ok(r) => r,
            Err(e) => return fail_err(e),
        };
        let json = format!(
            concat!(
                "{{\"gaussians\":{},\"input_gaussians\":{},\"post_processed\":{},",
                "\"positions\":{},\"opacities\":{},\"scale\":{},\"rotation\":{},",
                "\"hash\":{},\"mlp\":{},\"overhead\":{},\"total\":{}}}"
            ),
            report.n,
            report.input_n,
            report.pp,
            report.positions,
            report.opacities,
            report.scale,
            report.rotation,
            report.hash,
            report.mlp,
            report.overhead,
            report.total,
        );
        match CString::new(json) {
            Ok(c) => {
                out.write(c.into_raw());
                GscStatus::Ok
            }
            Err(_) => fail(GscStatus::Internal, "stats JSON contained NUL"),
        }
    })
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be null or a pointer returned by this library that has not been
/// freed.
#[no_mangle]
pub unsafe extern "C" fn gsc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failure on this thread (empty if none). Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gsc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}
