//! Real spherical-harmonic basis (degree ≤ 3) and view-dependent color
//! evaluation, following the sign conventions used by splat checkpoints.

use crate::error::{GsError, Result};

/// Degree-0 basis constant 1/(2·sqrt(pi)).
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values for a unit direction, ordered so that a channel evaluates as
/// `Σ_b basis[b] · coeff[b]`. Only the first `dim` entries are meaningful for
/// a degree < 3 scene.
pub fn sh_basis(d: [f64; 3]) -> [f64; 16] {
    let [x, y, z] = d;
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    b[1] = -SH_C1 * y;
    b[2] = SH_C1 * z;
    b[3] = -SH_C1 * x;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    b[4] = SH_C2[0] * xy;
    b[5] = SH_C2[1] * yz;
    b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    b[7] = SH_C2[3] * xz;
    b[8] = SH_C2[4] * (xx - yy);
    b[9] = SH_C3[0] * y * (3.0 * xx - yy);
    b[10] = SH_C3[1] * xy * z;
    b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    b[14] = SH_C3[5] * z * (xx - yy);
    b[15] = SH_C3[6] * x * (xx - yy);
    b
}

/// Evaluate one Gaussian's color toward direction `d`.
///
/// `sh` holds 3 channels × `dim` coefficients (channel-major); `dim` must be
/// 1, 4, 9 or 16. A non-unit `d` is normalized first. The result is
/// `clamp(0.5 + Σ_b Y_b(d)·k_b, 0, 1)` per channel.
pub fn evaluate_sh(sh: &[f64], d: [f64; 3]) -> Result<[f64; 3]> {
    if sh.len() % 3 != 0 {
        return Err(GsError::Config(format!(
            "sh coefficient count {} is not divisible by 3",
            sh.len()
        )));
    }
    let dim = sh.len() / 3;
    if !matches!(dim, 1 | 4 | 9 | 16) {
        return Err(GsError::Config(format!(
            "sh basis size must be 1, 4, 9 or 16, got {dim}"
        )));
    }
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let d = if norm > 0.0 {
        [d[0] / norm, d[1] / norm, d[2] / norm]
    } else {
        [0.0, 0.0, 1.0]
    };
    let basis = sh_basis(d);
    let mut rgb = [0.0; 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        let coeffs = &sh[ch * dim..(ch + 1) * dim];
        let mut acc = 0.0;
        for (b, k) in basis[..dim].iter().zip(coeffs) {
            acc += b * k;
        }
        *out = (0.5 + acc).clamp(0.0, 1.0);
    }
    Ok(rgb)
}
