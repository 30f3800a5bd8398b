//! Scene data model: the Gaussian cloud and covariance construction.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{GsError, Result};

/// A splat scene held post-activation: opacities in [0,1], scales positive,
/// quaternions unit-norm with a canonical sign. Inverse activations are
/// applied only at the PLY boundary.
#[derive(Debug, Clone, Default)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub scales: Vec<[f64; 3]>,
    /// Unit quaternions in (w, x, y, z) order.
    pub rotations: Vec<[f64; 4]>,
    /// Spherical-harmonic color coefficients, flattened channel-major:
    /// `sh[n * 3 * sh_dim + ch * sh_dim + b]` for channel `ch` and basis `b`.
    pub sh: Vec<f64>,
    /// Basis functions per channel: 1, 4, 9 or 16 (degree 0-3).
    pub sh_dim: usize,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// All coefficients of Gaussian `n`, 3 channels × `sh_dim`.
    pub fn sh_at(&self, n: usize) -> &[f64] {
        let w = 3 * self.sh_dim;
        &self.sh[n * w..(n + 1) * w]
    }

    /// Check the structural invariants: matching lengths, opacity range,
    /// positive scales, unit quaternions, finite values.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.opacities.len() != n
            || self.scales.len() != n
            || self.rotations.len() != n
            || self.sh.len() != n * 3 * self.sh_dim
        {
            return Err(GsError::Config(format!(
                "attribute length mismatch: {} positions, {} opacities, {} scales, {} rotations, {} sh values (dim {})",
                n,
                self.opacities.len(),
                self.scales.len(),
                self.rotations.len(),
                self.sh.len(),
                self.sh_dim
            )));
        }
        if n == 0 {
            return Ok(());
        }
        if !matches!(self.sh_dim, 1 | 4 | 9 | 16) {
            return Err(GsError::Config(format!(
                "sh basis size must be 1, 4, 9 or 16, got {}",
                self.sh_dim
            )));
        }
        for (i, o) in self.opacities.iter().enumerate() {
            if !o.is_finite() || !(0.0..=1.0).contains(o) {
                return Err(GsError::Config(format!("opacity[{i}] = {o} out of [0,1]")));
            }
        }
        for (i, s) in self.scales.iter().enumerate() {
            if s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(GsError::Config(format!("scale[{i}] = {s:?} not positive")));
            }
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let norm = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-5 {
                return Err(GsError::Config(format!(
                    "rotation[{i}] norm {norm} departs from 1 by more than 1e-5"
                )));
            }
        }
        Ok(())
    }

    /// Keep only the Gaussians at `kept` (in order), dropping the rest.
    pub fn select(&self, kept: &[usize]) -> GaussianCloud {
        let w = 3 * self.sh_dim;
        let mut out = GaussianCloud {
            positions: Vec::with_capacity(kept.len()),
            opacities: Vec::with_capacity(kept.len()),
            scales: Vec::with_capacity(kept.len()),
            rotations: Vec::with_capacity(kept.len()),
            sh: Vec::with_capacity(kept.len() * w),
            sh_dim: self.sh_dim,
        };
        for &i in kept {
            out.positions.push(self.positions[i]);
            out.opacities.push(self.opacities[i]);
            out.scales.push(self.scales[i]);
            out.rotations.push(self.rotations[i]);
            out.sh.extend_from_slice(&self.sh[i * w..(i + 1) * w]);
        }
        out
    }
}

/// Normalize a quaternion and canonicalize its sign (first nonzero component
/// positive) so `q` and `-q`, which encode the same rotation, quantize to the
/// same vector.
pub fn canonicalize_quaternion(q: [f64; 4]) -> [f64; 4] {
    let norm = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let mut out = q;
    if norm > 0.0 {
        for v in &mut out {
            *v /= norm;
        }
    } else {
        out = [1.0, 0.0, 0.0, 0.0];
    }
    for v in out {
        if v != 0.0 {
            if v < 0.0 {
                for o in &mut out {
                    *o = -*o;
                }
            }
            break;
        }
    }
    out
}

/// Rotation matrix of a unit quaternion in (w, x, y, z) order.
pub fn quat_to_rotation(q: [f64; 4]) -> Matrix3<f64> {
    let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    *uq.to_rotation_matrix().matrix()
}

/// 3D covariance of one Gaussian: `R · diag(s²) · Rᵀ`. Symmetric and
/// positive-definite for any positive scale and unit quaternion.
pub fn covariance_from(scale: [f64; 3], rotation: [f64; 4]) -> Matrix3<f64> {
    let r = quat_to_rotation(rotation);
    let d = Matrix3::from_diagonal(&Vector3::new(
        scale[0] * scale[0],
        scale[1] * scale[1],
        scale[2] * scale[2],
    ));
    r * d * r.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_quaternion_gives_diagonal_covariance() {
        let c = covariance_from([1.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(c, Matrix3::identity(), epsilon = 1e-12);
        let c = covariance_from([2.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(
            c,
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        // Oracle: eigen-decomposition of the constructed matrix must recover
        // s² regardless of orientation.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let scale = [
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
            ];
            let q = canonicalize_quaternion([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            let cov = covariance_from(scale, q);
            // Symmetry.
            assert_relative_eq!(cov, cov.transpose(), epsilon = 1e-9);
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            let mut want: Vec<f64> = scale.iter().map(|s| s * s).collect();
            eig.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (e, w) in eig.iter().zip(&want) {
                assert_relative_eq!(e, w, epsilon = 1e-6, max_relative = 1e-6);
            }
            // Positive definiteness via Cholesky.
            assert!(nalgebra::Cholesky::new(cov).is_some());
        }
    }

    #[test]
    fn quaternion_sign_is_canonical() {
        let q = canonicalize_quaternion([-0.5, 0.5, 0.5, -0.5]);
        assert!(q[0] > 0.0);
        let q2 = canonicalize_quaternion([0.0, -0.8, 0.0, 0.6]);
        assert!(q2[1] > 0.0);
        assert_relative_eq!(
            q2.iter().map(|v| v * v).sum::<f64>().sqrt(),
            1.0,
            epsilon = 1e-12
        );
        // q and -q collapse to the same representative.
        let a = canonicalize_quaternion([0.3, -0.4, 0.5, 0.6]);
        let b = canonicalize_quaternion([-0.3, 0.4, -0.5, -0.6]);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn select_keeps_rows_in_order() {
        let cloud = GaussianCloud {
            positions: vec![[0.0; 3], [1.0; 3], [2.0; 3]],
            opacities: vec![0.1, 0.2, 0.3],
            scales: vec![[1.0; 3]; 3],
            rotations: vec![[1.0, 0.0, 0.0, 0.0]; 3],
            sh: (0..9).map(|i| i as f64).collect(),
            sh_dim: 1,
        };
        let out = cloud.select(&[0, 2]);
        assert_eq!(out.len(), 2);
        assert_eq!(out.positions[1], [2.0; 3]);
        assert_eq!(out.sh, vec![0.0, 1.0, 2.0, 6.0, 7.0, 8.0]);
        out.validate().unwrap();
    }
}
