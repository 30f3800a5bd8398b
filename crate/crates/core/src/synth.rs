//! Synthetic scene generation for benchmarks and tests.
//!
//! The generated cloud is built to exercise the whole codec: a fraction of
//! Gaussians are invisible decoys (opacity below the rasterizer's α cutoff,
//! so they contribute nothing and exist only to be pruned), scales and
//! rotations are drawn from a small set of clusters plus jitter (so residual
//! VQ compresses them well), and colors vary smoothly with position with mild
//! view dependence (so a hash-grid field can distill them).

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraPose;
use crate::cloud::{canonicalize_quaternion, GaussianCloud};
use crate::error::{GsError, Result};
use crate::sh::SH_C0;

/// Opacity band for decoys, chosen entirely below the 1/255 blending cutoff:
/// a decoy never colors a pixel no matter where it lands.
pub const DECOY_OPACITY: (f64, f64) = (0.001, 0.0035);
/// Opacity band for contributing Gaussians.
pub const CONTRIBUTOR_OPACITY: (f64, f64) = (0.35, 0.9);

#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub n: usize,
    /// Fraction of Gaussians generated as invisible decoys.
    pub decoy_fraction: f64,
    /// Distinct scale/rotation clusters the attributes are drawn from.
    pub clusters: usize,
    /// Relative jitter applied around each cluster center.
    pub jitter: f64,
    /// Spherical-harmonics degree of the generated colors.
    pub sh_degree: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> ToyConfig {
        ToyConfig {
            n: 5_000,
            decoy_fraction: 0.45,
            clusters: 48,
            jitter: 0.01,
            sh_degree: 3,
            seed: 0,
        }
    }
}

/// A generated scene plus the ground-truth decoy labels (which the codec
/// never sees; tests use them to grade pruning).
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub cloud: GaussianCloud,
    pub decoy: Vec<bool>,
}

impl ToyScene {
    pub fn decoy_count(&self) -> usize {
        self.decoy.iter().filter(|&&d| d).count()
    }
}

/// Smooth low-frequency color palette over the scene volume.
fn palette(p: [f64; 3]) -> [f64; 3] {
    [
        0.5 + 0.32 * (1.3 * p[0] + 0.7 * p[1]).sin(),
        0.5 + 0.32 * (1.1 * p[1] - 0.9 * p[2] + 1.0).sin(),
        0.5 + 0.32 * (0.8 * p[2] + 1.2 * p[0] - 1.0).sin(),
    ]
}

/// Generate a toy scene. Deterministic in the config.
pub fn toy_scene(config: &ToyConfig) -> Result<ToyScene> {
    if config.n == 0 {
        return Err(GsError::Config("toy scene needs at least one Gaussian".into()));
    }
    if !(0.0..=1.0).contains(&config.decoy_fraction) {
        return Err(GsError::Config(format!(
            "decoy fraction {} outside [0, 1]",
            config.decoy_fraction
        )));
    }
    if config.clusters == 0 {
        return Err(GsError::Config("cluster count must be ≥ 1".into()));
    }
    if config.sh_degree > 3 {
        return Err(GsError::Config(format!(
            "SH degree {} unsupported (max 3)",
            config.sh_degree
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Attribute clusters shared across the scene.
    let scale_centers: Vec<[f64; 3]> = (0..config.clusters)
        .map(|_| {
            let base: f64 = rng.random_range(0.02f64.ln()..0.09f64.ln());
            [
                (base + rng.random_range(-0.3..0.3)).exp(),
                (base + rng.random_range(-0.3..0.3)).exp(),
                (base + rng.random_range(-0.3..0.3)).exp(),
            ]
        })
        .collect();
    let rot_centers: Vec<[f64; 4]> = (0..config.clusters)
        .map(|_| {
            let q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            canonicalize_quaternion([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm])
        })
        .collect();

    let basis_count = (config.sh_degree + 1) * (config.sh_degree + 1);
    let n_decoys = (config.n as f64 * config.decoy_fraction).round() as usize;

    let mut cloud = GaussianCloud {
        sh_dim: basis_count,
        ..Default::default()
    };
    let mut decoy = Vec::with_capacity(config.n);
    for i in 0..config.n {
        // Position: uniform in a ball of radius 1.3 around the origin.
        let dir = loop {
            let v: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let n2: f64 = v.iter().map(|x| x * x).sum();
            if n2 > 1e-6 && n2 <= 1.0 {
                break v;
            }
        };
        let p = [1.3 * dir[0], 1.3 * dir[1], 1.3 * dir[2]];
        cloud.positions.push(p);

        let is_decoy = i < n_decoys;
        decoy.push(is_decoy);
        let (lo, hi) = if is_decoy {
            DECOY_OPACITY
        } else {
            CONTRIBUTOR_OPACITY
        };
        cloud.opacities.push(rng.random_range(lo..hi));

        let k = rng.random_range(0..config.clusters);
        let sc = scale_centers[k];
        cloud.scales.push([
            sc[0] * (1.0 + rng.random_range(-config.jitter..config.jitter)),
            sc[1] * (1.0 + rng.random_range(-config.jitter..config.jitter)),
            sc[2] * (1.0 + rng.random_range(-config.jitter..config.jitter)),
        ]);
        let rc = rot_centers[k];
        let mut q = [0.0; 4];
        for (c, out) in q.iter_mut().enumerate() {
            *out = rc[c] + rng.random_range(-config.jitter..config.jitter);
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        cloud
            .rotations
            .push(canonicalize_quaternion([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]));

        // Channel-major SH: the DC term carries the palette color, higher
        // bands add mild view dependence that shrinks with band order.
        let color = palette(p);
        for ch in 0..3 {
            for b in 0..basis_count {
                if b == 0 {
                    cloud.sh.push((color[ch] - 0.5) / SH_C0);
                } else {
                    let band = (b as f64).sqrt().floor();
                    cloud.sh.push(rng.random_range(-0.04..0.04) / band.max(1.0).powi(2));
                }
            }
        }
    }
    cloud.validate()?;
    Ok(ToyScene { cloud, decoy })
}

/// `count` cameras on a ring of the given radius, all looking at the origin.
pub fn ring_cameras(count: usize, radius: f64, height: f64, size: u32, focal: f64) -> Vec<CameraPose> {
    (0..count)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / count.max(1) as f64;
            look_at_origin([radius * theta.cos(), height, radius * theta.sin()], size, focal)
        })
        .collect()
}

/// A pinhole pose at `center` with +z pointing at the origin.
pub fn look_at_origin(center: [f64; 3], size: u32, focal: f64) -> CameraPose {
    let c = Vector3::new(center[0], center[1], center[2]);
    let forward = (-c).normalize();
    let mut up = Vector3::new(0.0, 1.0, 0.0);
    if forward.dot(&up).abs() > 0.99 {
        up = Vector3::new(1.0, 0.0, 0.0);
    }
    let right = up.cross(&forward).normalize();
    let down = forward.cross(&right);
    let half = size as f64 / 2.0;
    CameraPose {
        rotation: Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]),
        center: c,
        focal: [focal, focal],
        principal: [half, half],
        size: [size, size],
    }
}
