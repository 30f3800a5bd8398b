//! Structural similarity and the blended rendering loss, with exact
//! reverse-mode gradients with respect to the rendered image.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) and the standard constants
//! for a unit dynamic range. Windows that overhang the border are
//! renormalized over their in-bounds support, which keeps the statistic
//! well-defined on images smaller than the window.

use crate::error::{GsError, Result};
use crate::img::Image;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 1e-4; // (0.01)^2
const C2: f64 = 9e-4; // (0.03)^2

/// L1 weight (1-λ) and SSIM weight λ of the rendering loss.
pub const LOSS_SSIM_WEIGHT: f64 = 0.2;

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let half = (WINDOW / 2) as isize;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = (i as isize - half) as f64;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Per-position sum of in-bounds kernel taps along one axis.
fn axis_norms(len: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let half = (WINDOW / 2) as isize;
    (0..len as isize)
        .map(|i| {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let p = i + j as isize - half;
                if p >= 0 && p < len as isize {
                    s += kv;
                }
            }
            s
        })
        .collect()
}

/// Separable border-skipping convolution (no renormalization). The operator
/// is symmetric, so it serves as its own transpose.
fn conv2(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let half = (WINDOW / 2) as isize;
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let p = x + j as isize - half;
                if p >= 0 && p < w as isize {
                    acc += kv * plane[y * w + p as usize];
                }
            }
            rows[y * w + x as usize] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for x in 0..w {
        for y in 0..h as isize {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let p = y + j as isize - half;
                if p >= 0 && p < h as isize {
                    acc += kv * rows[p as usize * w + x];
                }
            }
            out[y as usize * w + x] = acc;
        }
    }
    out
}

struct SsimCtx {
    k: [f64; WINDOW],
    /// Product of the per-axis norms at each pixel.
    norm: Vec<f64>,
}

impl SsimCtx {
    fn new(w: usize, h: usize) -> SsimCtx {
        let k = gaussian_kernel();
        let nx = axis_norms(w, &k);
        let ny = axis_norms(h, &k);
        let mut norm = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                norm[y * w + x] = nx[x] * ny[y];
            }
        }
        SsimCtx { k, norm }
    }

    /// Renormalized window average of a plane.
    fn smooth(&self, plane: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mut out = conv2(plane, w, h, &self.k);
        for (v, n) in out.iter_mut().zip(&self.norm) {
            *v /= n;
        }
        out
    }

    /// Transpose of [`SsimCtx::smooth`].
    fn smooth_adjoint(&self, grad: &[f64], w: usize, h: usize) -> Vec<f64> {
        let scaled: Vec<f64> = grad.iter().zip(&self.norm).map(|(g, n)| g / n).collect();
        conv2(&scaled, w, h, &self.k)
    }
}

/// Mean SSIM between two images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_with_grad(a, b)?.0)
}

/// Mean SSIM and its gradient with respect to `a` (same layout as the image
/// data).
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    if a.width != b.width || a.height != b.height {
        return Err(GsError::Image(format!(
            "size mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let ctx = SsimCtx::new(w, h);
    let npix = w * h;
    let mut total = 0.0;
    let mut grad = vec![0.0; a.data.len()];

    for ch in 0..3 {
        let x: Vec<f64> = (0..npix).map(|i| a.data[i * 3 + ch]).collect();
        let y: Vec<f64> = (0..npix).map(|i| b.data[i * 3 + ch]).collect();
        let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
        let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();

        let mu_x = ctx.smooth(&x, w, h);
        let mu_y = ctx.smooth(&y, w, h);
        let e_x2 = ctx.smooth(&x2, w, h);
        let e_y2 = ctx.smooth(&y2, w, h);
        let e_xy = ctx.smooth(&xy, w, h);

        // Upstream gradients for the three smoothed fields that depend on x.
        let mut g_mu = vec![0.0; npix];
        let mut g_ex2 = vec![0.0; npix];
        let mut g_exy = vec![0.0; npix];

        for p in 0..npix {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let var_x = e_x2[p] - mx * mx;
            let var_y = e_y2[p] - my * my;
            let cov = e_xy[p] - mx * my;

            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * cov + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = var_x + var_y + C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;

            let d_mu_direct = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
            let d_var = -s / b2;
            let d_cov = 2.0 * a1 / (b1 * b2);

            g_mu[p] = d_mu_direct + d_var * (-2.0 * mx) + d_cov * (-my);
            g_ex2[p] = d_var;
            g_exy[p] = d_cov;
        }

        let t_mu = ctx.smooth_adjoint(&g_mu, w, h);
        let t_ex2 = ctx.smooth_adjoint(&g_ex2, w, h);
        let t_exy = ctx.smooth_adjoint(&g_exy, w, h);
        let scale = 1.0 / (npix as f64 * 3.0);
        for p in 0..npix {
            grad[p * 3 + ch] = scale * (t_mu[p] + 2.0 * x[p] * t_ex2[p] + y[p] * t_exy[p]);
        }
    }

    Ok((total / (npix as f64 * 3.0), grad))
}

/// The training loss `0.8·L1 + 0.2·(1 − SSIM)` and its gradient with respect
/// to `image`.
pub fn render_loss(image: &Image, reference: &Image) -> Result<(f64, Vec<f64>)> {
    let (ssim_val, ssim_grad) = ssim_with_grad(image, reference)?;
    let count = image.data.len() as f64;
    let mut l1_sum = 0.0;
    let mut grad = vec![0.0; image.data.len()];
    for (i, (x, y)) in image.data.iter().zip(&reference.data).enumerate() {
        let d = x - y;
        l1_sum += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[i] = (1.0 - LOSS_SSIM_WEIGHT) * sign / count - LOSS_SSIM_WEIGHT * ssim_grad[i];
    }
    let loss = (1.0 - LOSS_SSIM_WEIGHT) * l1_sum / count + LOSS_SSIM_WEIGHT * (1.0 - ssim_val);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(w, h);
        for v in &mut img.data {
            *v = rng.random_range(0.05..0.95);
        }
        img
    }

    #[test]
    fn identical_images_have_unit_ssim_and_zero_loss() {
        let img = random_image(16, 16, 1);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let (loss, _) = render_loss(&img, &img).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn black_vs_white_loss_matches_the_blend() {
        let black = Image::filled(16, 16, [0.0; 3]);
        let white = Image::filled(16, 16, [1.0; 3]);
        let (loss, _) = render_loss(&white, &black).unwrap();
        // L1 term contributes 0.8 exactly; both images are flat so their
        // variances vanish and SSIM reduces to (C1)/(1 + C1) per window
        // (means 1 and 0).
        let flat_ssim = C1 / (1.0 + C1);
        assert!((loss - (0.8 + 0.2 * (1.0 - flat_ssim))).abs() < 1e-12);
    }

    #[test]
    fn smoothing_operator_matches_its_adjoint() {
        // <F x, g> must equal <x, Fᵀ g> for the renormalized smoother.
        let (w, h) = (9, 7);
        let ctx = SsimCtx::new(w, h);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fx = ctx.smooth(&x, w, h);
        let ftg = ctx.smooth_adjoint(&g, w, h);
        let lhs: f64 = fx.iter().zip(&g).map(|(u, v)| u * v).sum();
        let rhs: f64 = x.iter().zip(&ftg).map(|(u, v)| u * v).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn window_average_preserves_constants() {
        // Border renormalization must keep a constant plane constant.
        let ctx = SsimCtx::new(8, 8);
        let plane = vec![0.7; 64];
        for v in ctx.smooth(&plane, 8, 8) {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // Central differences on an 8×8 random pair, 1e-4 absolute.
        let img = random_image(8, 8, 11);
        let reference = random_image(8, 8, 12);
        let (_, grad) = render_loss(&img, &reference).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..img.data.len()).step_by(7) {
            let mut plus = img.clone();
            plus.data[i] += h;
            let mut minus = img.clone();
            minus.data[i] -= h;
            let lp = render_loss(&plus, &reference).unwrap().0;
            let lm = render_loss(&minus, &reference).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-4,
                "pixel {i}: fd {fd} vs analytic {}",
                grad[i]
            );
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let img = random_image(8, 8, 21);
        let reference = random_image(8, 8, 22);
        let (_, grad) = ssim_with_grad(&img, &reference).unwrap();
        let h = 1e-6;
        for i in (0..img.data.len()).step_by(13) {
            let mut plus = img.clone();
            plus.data[i] += h;
            let mut minus = img.clone();
            minus.data[i] -= h;
            let fd =
                (ssim(&plus, &reference).unwrap() - ssim(&minus, &reference).unwrap()) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-6,
                "pixel {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn ssim_is_symmetric_in_its_arguments() {
        let a = random_image(12, 9, 31);
        let b = random_image(12, 9, 32);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0);
    }
}
