//! CPU splatting renderer: perspective projection of anisotropic Gaussians to
//! 2D footprints, globally depth-sorted front-to-back alpha blending, and a
//! manual backward pass for opacity, mask multipliers, and per-Gaussian color.
//!
//! Geometry gradients (position, rotation, scale shape) are intentionally not
//! computed: the codec quantizes pre-trained geometry rather than re-learning
//! it, so only the opacity/mask/color chain is differentiable.

use nalgebra::{Matrix2, Matrix2x3, Vector2};

use crate::camera::CameraPose;
use crate::cloud::covariance_from;
use crate::error::{GsError, Result};
use crate::img::Image;
use crate::mask::MaskMode;
use crate::util;

/// Blending skips contributions below this alpha.
pub const DEFAULT_ALPHA_CUTOFF: f64 = 1.0 / 255.0;
/// Blending stops once transmittance falls below this floor.
pub const DEFAULT_TRANSMITTANCE_FLOOR: f64 = 1e-4;
/// Per-sample alpha ceiling.
pub const ALPHA_MAX: f64 = 0.99;
/// Low-pass floor added to the projected covariance diagonal, in pixel².
pub const COV2D_FLOOR: f64 = 0.3;

const ROW_CHUNK: usize = 8;

#[derive(Debug, Clone)]
pub struct RenderSettings {
    pub width: usize,
    pub height: usize,
    /// Near clip in world units; Gaussians closer than this are culled.
    pub near_clip: f64,
    pub alpha_cutoff: f64,
    pub transmittance_floor: f64,
    pub background: [f64; 3],
}

impl RenderSettings {
    /// Settings matching a camera's image size, black background.
    pub fn for_pose(pose: &CameraPose) -> RenderSettings {
        RenderSettings {
            width: pose.size[0] as usize,
            height: pose.size[1] as usize,
            near_clip: 0.01,
            alpha_cutoff: DEFAULT_ALPHA_CUTOFF,
            transmittance_floor: DEFAULT_TRANSMITTANCE_FLOOR,
            background: [0.0, 0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(GsError::Config("render size must be at least 1x1".into()));
        }
        for (name, v) in [
            ("alpha_cutoff", self.alpha_cutoff),
            ("transmittance_floor", self.transmittance_floor),
        ] {
            if !(0.0..1.0).contains(&v) || v <= 0.0 {
                return Err(GsError::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-Gaussian inputs for one view, with activations and any masking already
/// applied and colors already resolved (from SH or the color field).
#[derive(Debug, Clone, Copy)]
pub struct SplatView<'a> {
    pub positions: &'a [[f64; 3]],
    /// Effective opacities ô.
    pub opacities: &'a [f64],
    /// Effective scales ŝ.
    pub scales: &'a [[f64; 3]],
    pub rotations: &'a [[f64; 4]],
    pub colors: &'a [[f64; 3]],
}

impl<'a> SplatView<'a> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone)]
pub struct Projected {
    pub mean: [f64; 2],
    /// 2×2 footprint covariance in pixel², including the low-pass floor.
    pub cov: Matrix2<f64>,
    /// Camera-space depth along the view axis.
    pub depth: f64,
}

/// Project one Gaussian. Returns `None` when the center lies closer than the
/// near clip (culled, not an error).
pub fn project_gaussian(
    position: [f64; 3],
    scale: [f64; 3],
    rotation: [f64; 4],
    pose: &CameraPose,
    near_clip: f64,
) -> Option<Projected> {
    let t = pose.to_camera(position);
    if t.z < near_clip {
        return None;
    }
    let (fx, fy) = (pose.focal[0], pose.focal[1]);
    let inv_z = 1.0 / t.z;
    let mean = [
        fx * t.x * inv_z + pose.principal[0],
        fy * t.y * inv_z + pose.principal[1],
    ];
    // Jacobian of (fx·x/z, fy·y/z) at the Gaussian center.
    let j = Matrix2x3::new(
        fx * inv_z,
        0.0,
        -fx * t.x * inv_z * inv_z,
        0.0,
        fy * inv_z,
        -fy * t.y * inv_z * inv_z,
    );
    let m = j * pose.rotation;
    let mut cov = m * covariance_from(scale, rotation) * m.transpose();
    cov[(0, 0)] += COV2D_FLOOR;
    cov[(1, 1)] += COV2D_FLOOR;
    Some(Projected {
        mean,
        cov,
        depth: t.z,
    })
}

/// One blended contribution, recorded for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct BlendRecord {
    pub idx: u32,
    pub alpha: f64,
    /// Gaussian falloff g = exp(−½ δᵀΣ⁻¹δ) at the pixel center.
    pub g: f64,
    /// ‖Σ⁻¹δ‖², needed for the footprint-size derivative.
    pub qn2: f64,
}

/// Forward-pass record of everything the backward pass needs.
#[derive(Debug, Default)]
pub struct RenderTape {
    pub records: Vec<BlendRecord>,
    /// Prefix offsets into `records`, one per pixel plus a terminator.
    pub pixel_start: Vec<u32>,
    /// Final transmittance per pixel.
    pub t_final: Vec<f64>,
    /// Gaussians dropped because their footprint covariance was singular.
    pub skipped_singular: usize,
}

struct Prepared {
    idx: u32,
    mean: Vector2<f64>,
    /// Inverse footprint covariance.
    q: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Project, cull, and depth-sort the view. Returns the prepared list and the
/// number of singular-footprint skips.
fn prepare(view: &SplatView, pose: &CameraPose, settings: &RenderSettings) -> (Vec<Prepared>, usize) {
    let mut order: Vec<(f64, u32)> = Vec::with_capacity(view.len());
    let mut projected: Vec<Option<Prepared>> = Vec::with_capacity(view.len());
    let mut skipped = 0usize;
    for n in 0..view.len() {
        let o = view.opacities[n];
        // A Gaussian with ô below the cutoff can never pass the per-pixel
        // alpha test (g ≤ 1), so it contributes exactly nothing.
        if o < settings.alpha_cutoff {
            projected.push(None);
            continue;
        }
        let Some(p) = project_gaussian(
            view.positions[n],
            view.scales[n],
            view.rotations[n],
            pose,
            settings.near_clip,
        ) else {
            projected.push(None);
            continue;
        };
        let det = p.cov[(0, 0)] * p.cov[(1, 1)] - p.cov[(0, 1)] * p.cov[(1, 0)];
        if det <= 0.0 || !det.is_finite() {
            skipped += 1;
            projected.push(None);
            continue;
        }
        let q = Matrix2::new(
            p.cov[(1, 1)] / det,
            -p.cov[(0, 1)] / det,
            -p.cov[(1, 0)] / det,
            p.cov[(0, 0)] / det,
        );
        // Largest eigenvalue of the footprint bounds the reach of the
        // super-cutoff region: δᵀΣ⁻¹δ ≤ 2·ln(ô/cutoff) implies
        // ‖δ‖ ≤ sqrt(2·ln(ô/cutoff)·λmax).
        let mid = 0.5 * (p.cov[(0, 0)] + p.cov[(1, 1)]);
        let disc = (0.25 * (p.cov[(0, 0)] - p.cov[(1, 1)]).powi(2)
            + p.cov[(0, 1)] * p.cov[(0, 1)])
        .sqrt();
        let lambda_max = mid + disc;
        let reach = (2.0 * (o / settings.alpha_cutoff).ln() * lambda_max).sqrt();
        // Pixel (x, y) samples at (x+0.5, y+0.5).
        let x0f = (p.mean[0] - reach - 0.5).floor();
        let x1f = (p.mean[0] + reach - 0.5).ceil();
        let y0f = (p.mean[1] - reach - 0.5).floor();
        let y1f = (p.mean[1] + reach - 0.5).ceil();
        if x1f < 0.0
            || y1f < 0.0
            || x0f > settings.width as f64 - 1.0
            || y0f > settings.height as f64 - 1.0
        {
            projected.push(None);
            continue;
        }
        order.push((p.depth, n as u32));
        projected.push(Some(Prepared {
            idx: n as u32,
            mean: Vector2::new(p.mean[0], p.mean[1]),
            q,
            opacity: o,
            color: view.colors[n],
            x0: x0f.max(0.0) as usize,
            x1: x1f.min(settings.width as f64 - 1.0) as usize,
            y0: y0f.max(0.0) as usize,
            y1: y1f.min(settings.height as f64 - 1.0) as usize,
        }));
    }
    // Front-to-back with a stable index tie-break.
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let sorted = order
        .into_iter()
        .map(|(_, n)| projected[n as usize].take().expect("projected entry"))
        .collect();
    (sorted, skipped)
}

struct RowResult {
    y0: usize,
    pixels: Vec<f64>,
    records: Vec<BlendRecord>,
    counts: Vec<u32>,
    t_final: Vec<f64>,
}

fn render_rows(
    view: &SplatView,
    pose: &CameraPose,
    settings: &RenderSettings,
    want_tape: bool,
) -> (Image, RenderTape) {
    let (w, h) = (settings.width, settings.height);
    let (sorted, skipped_singular) = prepare(view, pose, settings);

    // Per-row candidate lists, preserving the global depth order.
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (k, p) in sorted.iter().enumerate() {
        for row in rows.iter_mut().take(p.y1 + 1).skip(p.y0) {
            row.push(k as u32);
        }
    }

    let chunks = util::par_chunk_map(h, ROW_CHUNK, |ys, ye| {
        let mut out = RowResult {
            y0: ys,
            pixels: vec![0.0; (ye - ys) * w * 3],
            records: Vec::new(),
            counts: vec![0; (ye - ys) * w],
            t_final: vec![1.0; (ye - ys) * w],
        };
        for y in ys..ye {
            for x in 0..w {
                let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let mut t = 1.0f64;
                let mut c = [0.0f64; 3];
                let mut count = 0u32;
                for &k in &rows[y] {
                    let p = &sorted[k as usize];
                    if x < p.x0 || x > p.x1 {
                        continue;
                    }
                    let d = px - p.mean;
                    let qd = p.q * d;
                    let e = d.dot(&qd);
                    let g = (-0.5 * e).exp();
                    let alpha = (p.opacity * g).min(ALPHA_MAX);
                    if alpha < settings.alpha_cutoff {
                        continue;
                    }
                    for ch in 0..3 {
                        c[ch] += p.color[ch] * alpha * t;
                    }
                    if want_tape {
                        out.records.push(BlendRecord {
                            idx: p.idx,
                            alpha,
                            g,
                            qn2: qd.norm_squared(),
                        });
                        count += 1;
                    }
                    t *= 1.0 - alpha;
                    if t < settings.transmittance_floor {
                        break;
                    }
                }
                let base = ((y - ys) * w + x) * 3;
                for ch in 0..3 {
                    out.pixels[base + ch] = c[ch] + settings.background[ch] * t;
                }
                out.counts[(y - ys) * w + x] = count;
                out.t_final[(y - ys) * w + x] = t;
            }
        }
        out
    });

    let mut image = Image::new(w, h);
    let mut tape = RenderTape {
        skipped_singular,
        ..Default::default()
    };
    if want_tape {
        tape.pixel_start = Vec::with_capacity(w * h + 1);
        tape.pixel_start.push(0);
        tape.t_final = Vec::with_capacity(w * h);
    }
    for chunk in chunks {
        let base = chunk.y0 * w * 3;
        image.data[base..base + chunk.pixels.len()].copy_from_slice(&chunk.pixels);
        if want_tape {
            tape.records.extend_from_slice(&chunk.records);
            for &n in &chunk.counts {
                let last = *tape.pixel_start.last().unwrap();
                tape.pixel_start.push(last + n);
            }
            tape.t_final.extend_from_slice(&chunk.t_final);
        }
    }
    (image, tape)
}

/// Render a view to an image.
pub fn rasterize(view: &SplatView, pose: &CameraPose, settings: &RenderSettings) -> Result<Image> {
    settings.validate()?;
    Ok(render_rows(view, pose, settings, false).0)
}

/// Render a view and keep the per-pixel blend records for [`backward`].
pub fn rasterize_with_tape(
    view: &SplatView,
    pose: &CameraPose,
    settings: &RenderSettings,
) -> Result<(Image, RenderTape)> {
    settings.validate()?;
    let (image, tape) = render_rows(view, pose, settings, true);
    Ok((image, tape))
}

/// How mask multipliers entered the forward pass, for the backward chain.
#[derive(Debug, Clone, Copy)]
pub struct MaskChain<'a> {
    /// Mask multiplier t per Gaussian (soft σ(m) during training, binary at
    /// prune time). The effective attributes were ô = t·o and/or ŝ = t·s.
    pub multipliers: &'a [f64],
    /// Raw (pre-mask) opacities o.
    pub raw_opacities: &'a [f64],
    pub mode: MaskMode,
}

/// Gradients produced by [`backward`].
#[derive(Debug)]
pub struct RenderGrads {
    /// ∂loss/∂ô (effective opacity as seen by the rasterizer).
    pub d_opacity: Vec<f64>,
    /// ∂loss/∂t (mask multiplier), including both the opacity and the
    /// footprint-size paths; empty when no mask chain was supplied.
    pub d_mask: Vec<f64>,
    /// ∂loss/∂rgb per Gaussian.
    pub d_color: Vec<[f64; 3]>,
}

/// Reverse-mode gradients through the blending formula.
///
/// `grad_image` is ∂loss/∂pixel in image layout. The mask-multiplier gradient
/// uses the identity dg/dt = g·(δᵀQδ − 0.3·‖Qδ‖²)/t for the footprint path,
/// which follows from Σ(t) = t²·A + 0.3·I. Contributions clamped at the alpha
/// ceiling receive zero gradient.
pub fn backward(
    tape: &RenderTape,
    view: &SplatView,
    settings: &RenderSettings,
    grad_image: &[f64],
    mask: Option<&MaskChain>,
) -> RenderGrads {
    let n = view.len();
    let (w, h) = (settings.width, settings.height);
    assert_eq!(grad_image.len(), w * h * 3);
    assert_eq!(tape.t_final.len(), w * h);

    let chunks = util::par_chunk_map(h, ROW_CHUNK, |ys, ye| {
        let mut d_opacity = vec![0.0; n];
        let mut d_mask = vec![0.0; if mask.is_some() { n } else { 0 }];
        let mut d_color = vec![[0.0f64; 3]; n];
        let mut t_buf: Vec<f64> = Vec::new();
        for pix in ys * w..ye * w {
            let start = tape.pixel_start[pix] as usize;
            let end = tape.pixel_start[pix + 1] as usize;
            if start == end {
                continue;
            }
            let records = &tape.records[start..end];
            let gpx = &grad_image[pix * 3..pix * 3 + 3];

            // Transmittance in front of each record.
            t_buf.clear();
            let mut t = 1.0;
            for r in records {
                t_buf.push(t);
                t *= 1.0 - r.alpha;
            }

            // Suffix S holds Σ_{k>i} c_k·α_k·T_k + bg·T_final.
            let mut s = [
                settings.background[0] * tape.t_final[pix],
                settings.background[1] * tape.t_final[pix],
                settings.background[2] * tape.t_final[pix],
            ];
            for (i, r) in records.iter().enumerate().rev() {
                let gi = r.idx as usize;
                let ti = t_buf[i];
                let color = view.colors[gi];
                let mut g_alpha = 0.0;
                for ch in 0..3 {
                    let dc_dalpha = color[ch] * ti - s[ch] / (1.0 - r.alpha);
                    g_alpha += gpx[ch] * dc_dalpha;
                    d_color[gi][ch] += gpx[ch] * r.alpha * ti;
                    s[ch] += color[ch] * r.alpha * ti;
                }
                if r.alpha >= ALPHA_MAX {
                    continue; // ceiling clamp: zero derivative
                }
                d_opacity[gi] += g_alpha * r.g;
                if let Some(chain) = mask {
                    let t_mul = chain.multipliers[gi];
                    let o_raw = chain.raw_opacities[gi];
                    let mut dalpha_dt = 0.0;
                    if matches!(chain.mode, MaskMode::OpacityOnly | MaskMode::Both) {
                        dalpha_dt += o_raw * r.g;
                    }
                    if matches!(chain.mode, MaskMode::ScaleOnly | MaskMode::Both)
                        && t_mul > 1e-12
                    {
                        let e = -2.0 * r.g.ln(); // δᵀQδ
                        dalpha_dt +=
                            view.opacities[gi] * r.g * (e - COV2D_FLOOR * r.qn2) / t_mul;
                    }
                    d_mask[gi] += g_alpha * dalpha_dt;
                }
            }
        }
        (d_opacity, d_mask, d_color)
    });

    let mut grads = RenderGrads {
        d_opacity: vec![0.0; n],
        d_mask: vec![0.0; if mask.is_some() { n } else { 0 }],
        d_color: vec![[0.0; 3]; n],
    };
    for (po, pm, pc) in chunks {
        util::fold_partials(&mut grads.d_opacity, vec![po]);
        if mask.is_some() {
            util::fold_partials(&mut grads.d_mask, vec![pm]);
        }
        for (acc, part) in grads.d_color.iter_mut().zip(pc) {
            for ch in 0..3 {
                acc[ch] += part[ch];
            }
        }
    }
    grads
}
