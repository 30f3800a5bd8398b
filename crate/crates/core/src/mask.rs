//! Learnable per-Gaussian masking: soft/binary masks over opacity and scale,
//! the sparsity loss, pruning, and the mask training loop.
//!
//! Masking uses a straight-through estimator: the binary value 1[σ(m) > ε]
//! is used wherever a hard decision is needed (pruning, final encoding), and
//! gradients flow through the sigmoid surrogate. The training loop keeps the
//! forward pass on the soft multiplier σ(m) so rendering retains a restoring
//! gradient for Gaussians that matter; every `prune_interval` iterations the
//! binary mask is applied physically and dead Gaussians are removed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraPose;
use crate::cloud::GaussianCloud;
use crate::error::{GsError, Result};
use crate::img::Image;
use crate::metrics::render_loss;
use crate::optim::Adam;
use crate::render::{backward, rasterize_with_tape, MaskChain, RenderSettings, SplatView};
use crate::sh::evaluate_sh;
use crate::util::{sigmoid, sigmoid_grad};

/// Which attributes the mask multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    OpacityOnly,
    ScaleOnly,
    Both,
}

impl MaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskMode::OpacityOnly => "opacity_only",
            MaskMode::ScaleOnly => "scale_only",
            MaskMode::Both => "both",
        }
    }

    pub fn from_str(s: &str) -> Result<MaskMode> {
        match s {
            "opacity_only" => Ok(MaskMode::OpacityOnly),
            "scale_only" => Ok(MaskMode::ScaleOnly),
            "both" => Ok(MaskMode::Both),
            other => Err(GsError::Config(format!(
                "mask_mode must be opacity_only, scale_only or both, got {other}"
            ))),
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            MaskMode::OpacityOnly => 0,
            MaskMode::ScaleOnly => 1,
            MaskMode::Both => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<MaskMode> {
        match c {
            0 => Ok(MaskMode::OpacityOnly),
            1 => Ok(MaskMode::ScaleOnly),
            2 => Ok(MaskMode::Both),
            other => Err(GsError::Decode(format!("unknown mask mode code {other}"))),
        }
    }
}

/// Default logit initialization: masks start at σ(m) = 0.99, so removal has
/// to be earned by the sparsity pressure.
pub fn default_mask_logit() -> f64 {
    crate::util::logit(0.99)
}

/// Per-Gaussian mask logits plus the binarization threshold and mode.
#[derive(Debug, Clone)]
pub struct MaskState {
    pub m: Vec<f64>,
    pub epsilon: f64,
    pub mode: MaskMode,
}

impl MaskState {
    pub fn new(n: usize, epsilon: f64, mode: MaskMode) -> MaskState {
        MaskState {
            m: vec![default_mask_logit(); n],
            epsilon,
            mode,
        }
    }
}

/// Soft multipliers σ(m), elementwise in (0, 1).
pub fn soft_mask(state: &MaskState) -> Vec<f64> {
    state.m.iter().map(|&m| sigmoid(m)).collect()
}

/// Hard mask values 1[σ(m) > ε] in {0, 1}. The matching straight-through
/// gradient is [`ste_backward`].
pub fn binary_mask(state: &MaskState) -> Vec<f64> {
    state
        .m
        .iter()
        .map(|&m| if sigmoid(m) > state.epsilon { 1.0 } else { 0.0 })
        .collect()
}

/// Straight-through gradient contract: for any upstream ∂loss/∂mask value,
/// ∂loss/∂m = upstream · σ'(m), exactly the soft path's derivative.
pub fn ste_backward(state: &MaskState, upstream: &[f64]) -> Vec<f64> {
    state
        .m
        .iter()
        .zip(upstream)
        .map(|(&m, &u)| u * sigmoid_grad(m))
        .collect()
}

/// Masked attributes (ŝ, ô) under the hard mask: multiplied entries get
/// M·s and/or M·o per the mode, other attributes pass through.
pub fn apply_mask(cloud: &GaussianCloud, state: &MaskState) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mask = binary_mask(state);
    apply_multipliers(cloud, &mask, state.mode)
}

/// Masked attributes under arbitrary multipliers (used with σ(m) during
/// training).
pub fn apply_multipliers(
    cloud: &GaussianCloud,
    multipliers: &[f64],
    mode: MaskMode,
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let scale_on = matches!(mode, MaskMode::ScaleOnly | MaskMode::Both);
    let opacity_on = matches!(mode, MaskMode::OpacityOnly | MaskMode::Both);
    let scales = cloud
        .scales
        .iter()
        .zip(multipliers)
        .map(|(s, &t)| {
            if scale_on {
                [s[0] * t, s[1] * t, s[2] * t]
            } else {
                *s
            }
        })
        .collect();
    let opacities = cloud
        .opacities
        .iter()
        .zip(multipliers)
        .map(|(o, &t)| if opacity_on { o * t } else { *o })
        .collect();
    (scales, opacities)
}

/// Sparsity loss: mean of σ(m) over all Gaussians.
pub fn masking_loss(state: &MaskState) -> Result<f64> {
    if state.m.is_empty() {
        return Err(GsError::Config(
            "masking loss is undefined for an empty mask".into(),
        ));
    }
    Ok(state.m.iter().map(|&m| sigmoid(m)).sum::<f64>() / state.m.len() as f64)
}

/// Physically remove masked Gaussians. Returns the compact cloud, the kept
/// original indices, and the compacted mask state.
pub fn prune(cloud: &GaussianCloud, state: &MaskState) -> (GaussianCloud, Vec<usize>, MaskState) {
    let mask = binary_mask(state);
    let kept: Vec<usize> = (0..cloud.len()).filter(|&i| mask[i] == 1.0).collect();
    let pruned = cloud.select(&kept);
    let new_state = MaskState {
        m: kept.iter().map(|&i| state.m[i]).collect(),
        epsilon: state.epsilon,
        mode: state.mode,
    };
    (pruned, kept, new_state)
}

#[derive(Debug, Clone)]
pub struct MaskTrainConfig {
    pub lambda_mask: f64,
    pub epsilon: f64,
    pub mode: MaskMode,
    pub iters: usize,
    pub prune_interval: usize,
    pub lr: f64,
    pub seed: u64,
    pub background: [f64; 3],
}

impl Default for MaskTrainConfig {
    fn default() -> Self {
        MaskTrainConfig {
            lambda_mask: 5e-4,
            epsilon: 0.01,
            mode: MaskMode::Both,
            iters: 2000,
            prune_interval: 500,
            lr: 1e-2,
            seed: 0,
            background: [0.0, 0.0, 0.0],
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct MaskLogRow {
    pub iter: usize,
    pub n_gaussians: usize,
    pub l_ren: f64,
    pub l_m: f64,
}

#[derive(Debug)]
pub struct MaskTrainResult {
    /// The pruned cloud after the final prune.
    pub cloud: GaussianCloud,
    /// Kept indices into the original cloud.
    pub kept: Vec<usize>,
    /// Mask state for the kept Gaussians.
    pub state: MaskState,
    pub log: Vec<MaskLogRow>,
}

/// Train the mask logits against reference renders, minimizing
/// `render_loss + lambda_mask · masking_loss` with Adam, pruning dead
/// Gaussians every `prune_interval` iterations.
pub fn train_mask(
    cloud: &GaussianCloud,
    views: &[CameraPose],
    references: &[Image],
    config: &MaskTrainConfig,
) -> Result<MaskTrainResult> {
    if views.is_empty() || views.len() != references.len() {
        return Err(GsError::Config(format!(
            "mask training needs matched views and references, got {} and {}",
            views.len(),
            references.len()
        )));
    }
    if cloud.is_empty() {
        return Err(GsError::Config("cannot mask-train an empty cloud".into()));
    }

    // Per-view colors are mask-independent; resolve them once.
    let mut view_colors: Vec<Vec<[f64; 3]>> = Vec::with_capacity(views.len());
    for pose in views {
        let mut colors = Vec::with_capacity(cloud.len());
        for n in 0..cloud.len() {
            colors.push(evaluate_sh(cloud.sh_at(n), pose.direction_to(cloud.positions[n]))?);
        }
        view_colors.push(colors);
    }

    let mut alive = cloud.clone();
    let mut kept: Vec<usize> = (0..cloud.len()).collect();
    let mut state = MaskState::new(cloud.len(), config.epsilon, config.mode);
    let mut adam = Adam::new(cloud.len(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.iters);

    for iter in 0..config.iters {
        let v = rng.random_range(0..views.len());
        let pose = &views[v];
        let mut settings = RenderSettings::for_pose(pose);
        settings.background = config.background;

        let t: Vec<f64> = soft_mask(&state);
        let (scales_hat, opacities_hat) = apply_multipliers(&alive, &t, config.mode);
        let colors: Vec<[f64; 3]> = kept.iter().map(|&i| view_colors[v][i]).collect();
        let view = SplatView {
            positions: &alive.positions,
            opacities: &opacities_hat,
            scales: &scales_hat,
            rotations: &alive.rotations,
            colors: &colors,
        };
        let (image, tape) = rasterize_with_tape(&view, pose, &settings)?;
        let (l_ren, grad_img) = render_loss(&image, &references[v])?;
        let l_m = masking_loss(&state)?;
        if !l_ren.is_finite() || !l_m.is_finite() {
            return Err(GsError::Train(format!(
                "non-finite loss at iteration {iter}: l_ren={l_ren} l_m={l_m}"
            )));
        }

        let grads = backward(
            &tape,
            &view,
            &settings,
            &grad_img,
            Some(&MaskChain {
                multipliers: &t,
                raw_opacities: &alive.opacities,
                mode: config.mode,
            }),
        );

        let n_alive = alive.len() as f64;
        let grad_m: Vec<f64> = state
            .m
            .iter()
            .zip(&grads.d_mask)
            .map(|(&m, &dt)| (dt + config.lambda_mask / n_alive) * sigmoid_grad(m))
            .collect();
        adam.step(&mut state.m, &grad_m);
        log.push(MaskLogRow {
            iter,
            n_gaussians: alive.len(),
            l_ren,
            l_m,
        });

        let last = iter + 1 == config.iters;
        if (iter + 1) % config.prune_interval == 0 || last {
            let (pruned, local_kept, new_state) = prune(&alive, &state);
            if local_kept.len() < alive.len() {
                adam.compact(&local_kept);
                kept = local_kept.iter().map(|&i| kept[i]).collect();
                alive = pruned;
                state = new_state;
            }
            if alive.is_empty() {
                eprintln!("warning: mask training removed every Gaussian at iteration {iter}");
                break;
            }
        }
    }

    Ok(MaskTrainResult {
        cloud: alive,
        kept,
        state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::canonicalize_quaternion;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector3};

    fn tiny_cloud(n: usize, seed: u64) -> GaussianCloud {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = GaussianCloud {
            sh_dim: 1,
            ..Default::default()
        };
        for _ in 0..n {
            cloud.positions.push([
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            ]);
            cloud.opacities.push(rng.random_range(0.3..0.8));
            cloud.scales.push([
                rng.random_range(0.1..0.3),
                rng.random_range(0.1..0.3),
                rng.random_range(0.1..0.3),
            ]);
            cloud.rotations.push(canonicalize_quaternion([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]));
            for _ in 0..3 {
                cloud.sh.push(rng.random_range(-0.8..0.8));
            }
        }
        cloud
    }

    fn test_pose(size: u32) -> CameraPose {
        CameraPose {
            rotation: Matrix3::identity(),
            center: Vector3::new(0.0, 0.0, -4.0),
            focal: [60.0, 60.0],
            principal: [size as f64 / 2.0, size as f64 / 2.0],
            size: [size, size],
        }
    }

    #[test]
    fn soft_mask_is_the_sigmoid() {
        let mut state = MaskState::new(3, 0.01, MaskMode::Both);
        state.m = vec![0.0, 1.386_294_4, -30.0];
        let t = soft_mask(&state);
        assert_relative_eq!(t[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(t[1], 0.8, epsilon = 1e-7);
        assert!(t[2] < 1e-12);
    }

    #[test]
    fn binary_mask_thresholds_at_epsilon() {
        let mut state = MaskState::new(2, 0.01, MaskMode::Both);
        state.m = vec![crate::util::logit(0.9), crate::util::logit(0.005)];
        assert_eq!(binary_mask(&state), vec![1.0, 0.0]);
    }

    #[test]
    fn ste_gradient_matches_soft_path_finite_differences() {
        // For a linear readout h(M) = a·M + b the straight-through gradient
        // a·σ'(m) must match finite differences of h(σ(m)).
        let mut state = MaskState::new(4, 0.01, MaskMode::Both);
        state.m = vec![-2.0, -0.3, 0.7, 3.1];
        let a = [0.7, -1.3, 2.1, 0.4];
        let grads = ste_backward(&state, &a);
        let h = 1e-6;
        for i in 0..4 {
            let fd = (a[i] * sigmoid(state.m[i] + h) - a[i] * sigmoid(state.m[i] - h)) / (2.0 * h);
            assert!(
                ((fd - grads[i]) / fd.abs().max(1e-12)).abs() < 1e-5,
                "logit {i}: fd {fd} vs ste {}",
                grads[i]
            );
        }
    }

    #[test]
    fn masking_loss_is_the_mean_sigmoid() {
        let mut state = MaskState::new(2, 0.01, MaskMode::Both);
        state.m = vec![0.0, 1.386_294_4];
        assert_relative_eq!(masking_loss(&state).unwrap(), 0.65, epsilon = 1e-7);
        state.m = vec![-40.0, -40.0];
        assert!(masking_loss(&state).unwrap() < 1e-12);
        let empty = MaskState::new(0, 0.01, MaskMode::Both);
        assert!(masking_loss(&empty).is_err());
    }

    #[test]
    fn apply_mask_respects_the_mode() {
        let cloud = tiny_cloud(2, 1);
        let mut state = MaskState::new(2, 0.01, MaskMode::OpacityOnly);
        state.m = vec![-20.0, 20.0]; // mask off, mask on
        let (scales, opacities) = apply_mask(&cloud, &state);
        assert_eq!(opacities[0], 0.0);
        assert_eq!(scales[0], cloud.scales[0]); // opacity_only leaves ŝ alone
        assert_eq!(opacities[1], cloud.opacities[1]);

        state.mode = MaskMode::Both;
        let (scales, opacities) = apply_mask(&cloud, &state);
        assert_eq!(scales[0], [0.0, 0.0, 0.0]);
        assert_eq!(opacities[0], 0.0);
        assert_eq!(scales[1], cloud.scales[1]);
    }

    #[test]
    fn prune_keeps_exactly_the_on_mask() {
        let cloud = tiny_cloud(3, 2);
        let mut state = MaskState::new(3, 0.01, MaskMode::Both);
        state.m = vec![5.0, -5.0, 5.0];
        let (pruned, kept, new_state) = prune(&cloud, &state);
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(pruned.len(), 2);
        assert_eq!(new_state.m.len(), 2);
        assert_eq!(pruned.positions[1], cloud.positions[2]);
    }

    #[test]
    fn pruned_render_equals_masked_render_bit_for_bit() {
        let cloud = tiny_cloud(12, 3);
        let mut state = MaskState::new(12, 0.01, MaskMode::Both);
        for i in [2usize, 5, 9] {
            state.m[i] = -10.0;
        }
        let pose = test_pose(32);
        let settings = RenderSettings::for_pose(&pose);
        let colors: Vec<[f64; 3]> = (0..cloud.len())
            .map(|n| evaluate_sh(cloud.sh_at(n), pose.direction_to(cloud.positions[n])).unwrap())
            .collect();

        let (scales_hat, opacities_hat) = apply_mask(&cloud, &state);
        let masked = crate::render::rasterize(
            &SplatView {
                positions: &cloud.positions,
                opacities: &opacities_hat,
                scales: &scales_hat,
                rotations: &cloud.rotations,
                colors: &colors,
            },
            &pose,
            &settings,
        )
        .unwrap();

        let (pruned, kept, _) = prune(&cloud, &state);
        let pruned_colors: Vec<[f64; 3]> = kept.iter().map(|&i| colors[i]).collect();
        let pruned_img = crate::render::rasterize(
            &SplatView {
                positions: &pruned.positions,
                opacities: &pruned.opacities,
                scales: &pruned.scales,
                rotations: &pruned.rotations,
                colors: &pruned_colors,
            },
            &pose,
            &settings,
        )
        .unwrap();

        for (a, b) in masked.data.iter().zip(&pruned_img.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Full-chain check: d(render_loss)/dm via the renderer's mask chain must
    /// match central finite differences of the soft path, including the
    /// footprint-size term of mode `Both`.
    #[test]
    fn mask_logit_gradient_matches_finite_differences() {
        let cloud = tiny_cloud(3, 7);
        let pose = test_pose(16);
        let mut settings = RenderSettings::for_pose(&pose);
        settings.background = [0.15, 0.15, 0.15];
        let colors: Vec<[f64; 3]> = (0..cloud.len())
            .map(|n| evaluate_sh(cloud.sh_at(n), pose.direction_to(cloud.positions[n])).unwrap())
            .collect();
        // Reference offset from the render so the L1 term has no sign flips.
        let reference = Image::filled(16, 16, [0.8, 0.7, 0.6]);

        let logits = vec![1.2, -0.4, 0.6];
        let loss_of = |m: &[f64]| -> f64 {
            let t: Vec<f64> = m.iter().map(|&v| sigmoid(v)).collect();
            let (scales_hat, opacities_hat) =
                apply_multipliers(&cloud, &t, MaskMode::Both);
            let view = SplatView {
                positions: &cloud.positions,
                opacities: &opacities_hat,
                scales: &scales_hat,
                rotations: &cloud.rotations,
                colors: &colors,
            };
            let img = crate::render::rasterize(&view, &pose, &settings).unwrap();
            render_loss(&img, &reference).unwrap().0
        };

        let t: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
        let (scales_hat, opacities_hat) = apply_multipliers(&cloud, &t, MaskMode::Both);
        let view = SplatView {
            positions: &cloud.positions,
            opacities: &opacities_hat,
            scales: &scales_hat,
            rotations: &cloud.rotations,
            colors: &colors,
        };
        let (img, tape) = rasterize_with_tape(&view, &pose, &settings).unwrap();
        let (_, grad_img) = render_loss(&img, &reference).unwrap();
        let grads = backward(
            &tape,
            &view,
            &settings,
            &grad_img,
            Some(&MaskChain {
                multipliers: &t,
                raw_opacities: &cloud.opacities,
                mode: MaskMode::Both,
            }),
        );

        let h = 1e-4;
        for i in 0..3 {
            let analytic = grads.d_mask[i] * sigmoid_grad(logits[i]);
            let mut plus = logits.clone();
            plus[i] += h;
            let mut minus = logits.clone();
            minus[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(
                ((fd - analytic) / fd.abs().max(1e-9)).abs() < 1e-4,
                "logit {i}: fd {fd} vs analytic {analytic}"
            );
        }
    }
}
