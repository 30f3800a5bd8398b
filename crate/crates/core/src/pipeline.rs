//! End-to-end drivers: compress a cloud into container bytes, decode and
//! re-render, export interop PLYs, and compare image sets.
//!
//! Compression stages run in a fixed order — mask training and pruning,
//! residual VQ over scales and rotations, color-field distillation, container
//! encode (with optional post-processing) — and a stage failure aborts with
//! the stage named in the error.

use serde::Serialize;

use crate::camera::CameraPose;
use crate::cloud::GaussianCloud;
use crate::config::RunConfig;
use crate::container::{
    decode_file, encode_file, stats, DecodedScene, EncodeOptions, SceneBundle, StorageReport,
};
use crate::error::{GsError, Result};
use crate::field::{distill_train, precompute_features, query_color_cached, ColorField};
use crate::img::{l1, psnr, Image};
use crate::mask::train_mask;
use crate::metrics::ssim;
use crate::render::{rasterize, RenderSettings, SplatView};
use crate::rvq::train_rvq;
use crate::sh::{evaluate_sh, SH_C0};
use crate::util::par_chunk_map;

const COLOR_CHUNK: usize = 512;

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| GsError::Train(format!("{name} stage failed: {e}")))
}

/// Render a cloud through its spherical-harmonics colors.
pub fn render_cloud(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    background: [f64; 3],
) -> Result<Image> {
    let colors = sh_colors(cloud, pose)?;
    let mut settings = RenderSettings::for_pose(pose);
    settings.background = background;
    let view = SplatView {
        positions: &cloud.positions,
        opacities: &cloud.opacities,
        scales: &cloud.scales,
        rotations: &cloud.rotations,
        colors: &colors,
    };
    rasterize(&view, pose, &settings)
}

/// Per-Gaussian colors for one pose, evaluated from the cloud's SH.
pub fn sh_colors(cloud: &GaussianCloud, pose: &CameraPose) -> Result<Vec<[f64; 3]>> {
    let parts = par_chunk_map(cloud.len(), COLOR_CHUNK, |s, e| {
        let mut out = Vec::with_capacity(e - s);
        for i in s..e {
            let d = pose.direction_to(cloud.positions[i]);
            out.push(evaluate_sh(cloud.sh_at(i), d));
        }
        out
    });
    let mut colors = Vec::with_capacity(cloud.len());
    for part in parts {
        for c in part {
            colors.push(c?);
        }
    }
    Ok(colors)
}

pub fn render_cloud_views(
    cloud: &GaussianCloud,
    views: &[CameraPose],
    background: [f64; 3],
) -> Result<Vec<Image>> {
    views.iter().map(|p| render_cloud(cloud, p, background)).collect()
}

/// Render a decoded scene; colors come from the color field, with grid
/// features precomputed once per scene.
pub fn render_decoded_views(
    scene: &DecodedScene,
    views: &[CameraPose],
    background: [f64; 3],
) -> Result<Vec<Image>> {
    let field = match &scene.field {
        Some(f) => f,
        None => {
            // Header-only scene: nothing to splat.
            return Ok(views
                .iter()
                .map(|p| Image::filled(p.size[0] as usize, p.size[1] as usize, background))
                .collect());
        }
    };
    let cache = precompute_features(field, &scene.positions);
    let mut out = Vec::with_capacity(views.len());
    for pose in views {
        let colors = field_colors(field, &cache, &scene.positions, pose)?;
        let mut settings = RenderSettings::for_pose(pose);
        settings.background = background;
        let view = SplatView {
            positions: &scene.positions,
            opacities: &scene.opacities,
            scales: &scene.scales,
            rotations: &scene.rotations,
            colors: &colors,
        };
        out.push(rasterize(&view, pose, &settings)?);
    }
    Ok(out)
}

fn field_colors(
    field: &ColorField,
    cache: &[f64],
    positions: &[[f64; 3]],
    pose: &CameraPose,
) -> Result<Vec<[f64; 3]>> {
    let parts = par_chunk_map(positions.len(), COLOR_CHUNK, |s, e| {
        let mut out = Vec::with_capacity(e - s);
        for i in s..e {
            let d = pose.direction_to(positions[i]);
            out.push(query_color_cached(field, cache, i, d));
        }
        out
    });
    let mut colors = Vec::with_capacity(positions.len());
    for part in parts {
        for c in part {
            colors.push(c?);
        }
    }
    Ok(colors)
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressReport {
    pub input_n: usize,
    pub kept_n: usize,
    pub mask_trained: bool,
    /// Rendering loss at the last logged mask iteration.
    pub mask_final_loss: Option<f64>,
    pub scale_rvq_loss: f64,
    pub rotation_rvq_loss: f64,
    pub field_initial_loss: f64,
    pub field_final_loss: f64,
    /// Mean PSNR of the decoded scene against the input's own renders.
    pub psnr: Option<f64>,
    pub sizes: SizesReport,
    pub elapsed_secs: f64,
}

/// JSON-friendly projection of [`StorageReport`]; byte counts sum to `total`,
/// which is the exact file length.
#[derive(Debug, Clone, Serialize)]
pub struct SizesReport {
    pub positions: usize,
    pub opacities: usize,
    pub scale: usize,
    pub rotation: usize,
    pub hash: usize,
    pub mlp: usize,
    pub overhead: usize,
    pub total: usize,
    pub pp: bool,
    pub baseline_bytes: Option<u64>,
    pub ratio: Option<f64>,
}

impl From<StorageReport> for SizesReport {
    fn from(r: StorageReport) -> SizesReport {
        SizesReport {
            positions: r.positions,
            opacities: r.opacities,
            scale: r.scale,
            rotation: r.rotation,
            hash: r.hash,
            mlp: r.mlp,
            overhead: r.overhead,
            total: r.total,
            pp: r.pp,
            baseline_bytes: r.baseline,
            ratio: r.ratio,
        }
    }
}

pub struct CompressOutcome {
    pub bytes: Vec<u8>,
    pub report: CompressReport,
}

/// Run the full codec. With no views, mask training is skipped (a warning is
/// printed) and the reported PSNR is absent; distillation still runs.
pub fn compress(
    cloud: &GaussianCloud,
    views: &[CameraPose],
    config: &RunConfig,
) -> Result<CompressOutcome> {
    config.validate()?;
    cloud.validate()?;
    let started = std::time::Instant::now();
    let background = [0.0, 0.0, 0.0];

    let references = if views.is_empty() || config.skip_mask {
        Vec::new()
    } else {
        stage("reference render", render_cloud_views(cloud, views, background))?
    };

    let skip_mask = views.is_empty() || config.skip_mask || cloud.is_empty();
    if views.is_empty() && !config.skip_mask {
        eprintln!("warning: no cameras given; skipping mask training");
    }
    let (work, mask_trained, mask_final_loss) = if skip_mask {
        (cloud.clone(), false, None)
    } else {
        let result = stage(
            "mask",
            train_mask(cloud, views, &references, &config.mask_config(background)),
        )?;
        let last = result.log.last().map(|row| row.l_ren);
        (result.cloud, true, last)
    };
    let kept_n = work.len();

    // Residual VQ runs last-phase style on the pruned attributes; scales are
    // quantized in their stored (linear) domain.
    let rvq_config = config.rvq_config();
    let (scale_codec, scale_stream, scale_rvq_loss, rot_codec, rot_stream, rot_rvq_loss) =
        if work.is_empty() {
            let dummy = |dim: usize| crate::rvq::RvqCodec {
                dim,
                codebook_size: config.codebook_size,
                codebooks: vec![
                    vec![0.0; config.codebook_size * dim];
                    config.stages
                ],
            };
            let empty = |_dim: usize| crate::rvq::IndexStream {
                n: 0,
                stages: config.stages,
                indices: Vec::new(),
            };
            (dummy(3), empty(3), 0.0, dummy(4), empty(4), 0.0)
        } else {
            let scales_flat: Vec<f64> = work.scales.iter().flatten().copied().collect();
            let (sc, ss) = stage("scale quantization", train_rvq(&scales_flat, 3, &rvq_config))?;
            let s_loss = crate::rvq::codebook_loss(&scales_flat, &sc, &ss)?;
            let rots_flat: Vec<f64> = work.rotations.iter().flatten().copied().collect();
            let (rc, rs) = stage("rotation quantization", train_rvq(&rots_flat, 4, &rvq_config))?;
            let r_loss = crate::rvq::codebook_loss(&rots_flat, &rc, &rs)?;
            (sc, ss, s_loss, rc, rs, r_loss)
        };

    let mut field = stage("field init", ColorField::new(config.field_config(), config.seed))?;
    let (field_initial_loss, field_final_loss) = if work.is_empty() {
        (0.0, 0.0)
    } else {
        let centers = (!views.is_empty())
            .then(|| views.iter().map(|p| [p.center.x, p.center.y, p.center.z]).collect());
        let report = stage(
            "field distillation",
            distill_train(&work, &mut field, &config.distill_config(centers)),
        )?;
        (report.initial_loss, report.final_loss)
    };

    let bundle = SceneBundle {
        positions: &work.positions,
        opacities: &work.opacities,
        scale_codec: &scale_codec,
        scale_stream: &scale_stream,
        rotation_codec: &rot_codec,
        rotation_stream: &rot_stream,
        field: &field,
    };
    let options = EncodeOptions {
        pp: config.pp,
        mask_mode: config.mask_mode,
        input_n: cloud.len() as u64,
    };
    let bytes = stage("container encode", encode_file(&bundle, &options))?;
    let storage = stats(&bytes)?;

    let psnr_mean = if references.is_empty() {
        None
    } else {
        let decoded = decode_file(&bytes)?;
        let renders = render_decoded_views(&decoded, views, background)?;
        let mut acc = 0.0;
        for (img, reference) in renders.iter().zip(&references) {
            acc += psnr(img, reference)?;
        }
        Some(acc / references.len() as f64)
    };

    Ok(CompressOutcome {
        report: CompressReport {
            input_n: cloud.len(),
            kept_n,
            mask_trained,
            mask_final_loss,
            scale_rvq_loss,
            rotation_rvq_loss: rot_rvq_loss,
            field_initial_loss,
            field_final_loss,
            psnr: psnr_mean,
            sizes: storage.into(),
            elapsed_secs: started.elapsed().as_secs_f64(),
        },
        bytes,
    })
}

/// Bake a decoded scene to a degree-0 cloud for PLY export: each Gaussian's
/// color is the field queried at one reference direction.
pub fn bake_cloud(scene: &DecodedScene, reference_dir: [f64; 3]) -> Result<GaussianCloud> {
    let norm = reference_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(GsError::Config(
            "reference direction must have nonzero length".into(),
        ));
    }
    let d = [
        reference_dir[0] / norm,
        reference_dir[1] / norm,
        reference_dir[2] / norm,
    ];
    let mut cloud = scene.to_cloud();
    cloud.sh_dim = 1;
    cloud.sh = Vec::with_capacity(scene.len() * 3);
    if let Some(field) = &scene.field {
        let cache = precompute_features(field, &scene.positions);
        for i in 0..scene.len() {
            let c = query_color_cached(field, &cache, i, d)?;
            for ch in 0..3 {
                cloud.sh.push((c[ch] - 0.5) / SH_C0);
            }
        }
    }
    cloud.validate()?;
    Ok(cloud)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

/// Per-view image metrics plus a mean row (view index = image count).
pub fn eval_images(a: &[Image], b: &[Image]) -> Result<Vec<EvalRow>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(GsError::Config(format!(
            "metric comparison needs matched non-empty image sets, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut rows = Vec::with_capacity(a.len() + 1);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        rows.push(EvalRow {
            view: i,
            psnr: psnr(x, y)?,
            ssim: ssim(x, y)?,
            l1: l1(x, y)?,
        });
    }
    let k = a.len() as f64;
    rows.push(EvalRow {
        view: a.len(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / k,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / k,
        l1: rows.iter().map(|r| r.l1).sum::<f64>() / k,
    });
    Ok(rows)
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("view,psnr,ssim,l1\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{:.8}\n", r.view, r.psnr, r.ssim, r.l1));
    }
    out
}
