//! Run-level configuration shared by the CLI and pipeline drivers.
//!
//! One [`RunConfig`] carries every tunable knob; stage drivers project it
//! onto their own config structs. Validation rejects a bad value with the
//! offending key named, so CLI errors point at the flag to fix.

use serde::{Deserialize, Serialize};

use crate::error::{GsError, Result};
use crate::field::{DistillConfig, FieldConfig};
use crate::mask::{MaskMode, MaskTrainConfig};
use crate::rvq::RvqTrainConfig;

/// Iteration budget of the full-length training schedule.
pub const FULL_ITERS: usize = 30_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Weight of the mask sparsity term in the training loss.
    pub lambda_mask: f64,
    /// Hard-mask threshold on σ(m) at prune time.
    pub epsilon: f64,
    /// Which attributes the mask multiplies.
    pub mask_mode: MaskMode,
    /// Codes per residual-VQ stage (C).
    pub codebook_size: usize,
    /// Residual-VQ stages (L).
    pub stages: usize,
    /// log₂ of the per-level hash table cap.
    pub hash_log2: u32,
    /// Mask training iterations.
    pub iters_mask: usize,
    /// Color-field distillation iterations.
    pub iters_field: usize,
    /// Codebook refinement iterations after K-means init.
    pub iters_rvq: usize,
    pub seed: u64,
    /// Post-processing (pruning + 8-bit quantization + Huffman) on encode.
    pub pp: bool,
    /// Skip mask training entirely (geometry passes through unpruned).
    pub skip_mask: bool,
    /// Pin the worker pool to one thread.
    pub deterministic: bool,
    // Stage internals with fixed defaults; not surfaced as CLI flags.
    pub prune_interval: usize,
    pub lr_mask: f64,
    pub lr_rvq: f64,
    pub lr_field: f64,
    pub field_batch: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            lambda_mask: 5e-4,
            epsilon: 0.01,
            mask_mode: MaskMode::Both,
            codebook_size: 64,
            stages: 6,
            hash_log2: 19,
            iters_mask: 2_000,
            iters_field: 5_000,
            iters_rvq: 1_000,
            seed: 0,
            pp: true,
            skip_mask: false,
            deterministic: false,
            prune_interval: 500,
            lr_mask: 1e-2,
            lr_rvq: 1e-3,
            lr_field: 1e-2,
            field_batch: 1024,
        }
    }
}

impl RunConfig {
    /// Raise the desk-scale iteration budgets to the full-length schedule:
    /// mask and field each train for the complete 30K-iteration run, and
    /// codebook refinement scales by the same factor as the mask stage.
    pub fn apply_full_schedule(&mut self) {
        let factor = FULL_ITERS / self.iters_mask.max(1);
        self.iters_rvq = (self.iters_rvq * factor).max(self.iters_rvq);
        self.iters_mask = FULL_ITERS;
        self.iters_field = FULL_ITERS.max(self.iters_field);
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(key: &str, detail: String) -> GsError {
            GsError::Config(format!("invalid {key}: {detail}"))
        }
        if !self.lambda_mask.is_finite() || self.lambda_mask < 0.0 {
            return Err(bad(
                "lambda-mask",
                format!("{} (must be finite and ≥ 0)", self.lambda_mask),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(bad(
                "epsilon",
                format!("{} (must lie in (0, 1))", self.epsilon),
            ));
        }
        if self.codebook_size == 0 || self.codebook_size > 65_536 {
            return Err(bad(
                "codebook-size",
                format!("{} (must lie in 1..=65536)", self.codebook_size),
            ));
        }
        if self.stages == 0 || self.stages > 255 {
            return Err(bad(
                "stages",
                format!("{} (must lie in 1..=255)", self.stages),
            ));
        }
        if !(3..=30).contains(&self.hash_log2) {
            return Err(bad(
                "hash-log2",
                format!("{} (must lie in 3..=30)", self.hash_log2),
            ));
        }
        for (key, lr) in [
            ("lr-mask", self.lr_mask),
            ("lr-rvq", self.lr_rvq),
            ("lr-field", self.lr_field),
        ] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(bad(key, format!("{lr} (must be finite and > 0)")));
            }
        }
        if self.prune_interval == 0 {
            return Err(bad("prune-interval", "0 (must be ≥ 1)".into()));
        }
        if self.field_batch == 0 {
            return Err(bad("field-batch", "0 (must be ≥ 1)".into()));
        }
        self.field_config().validate()?;
        Ok(())
    }

    pub fn mask_config(&self, background: [f64; 3]) -> MaskTrainConfig {
        MaskTrainConfig {
            lambda_mask: self.lambda_mask,
            epsilon: self.epsilon,
            mode: self.mask_mode,
            iters: self.iters_mask,
            prune_interval: self.prune_interval,
            lr: self.lr_mask,
            seed: self.seed,
            background,
        }
    }

    pub fn rvq_config(&self) -> RvqTrainConfig {
        RvqTrainConfig {
            codebook_size: self.codebook_size,
            stages: self.stages,
            refine_iters: self.iters_rvq,
            refine_lr: self.lr_rvq,
            seed: self.seed,
        }
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            max_hashmap: 1usize << self.hash_log2,
            ..FieldConfig::default()
        }
    }

    pub fn distill_config(&self, camera_centers: Option<Vec<[f64; 3]>>) -> DistillConfig {
        DistillConfig {
            iters: self.iters_field,
            lr: self.lr_field,
            batch: self.field_batch,
            seed: self.seed,
            camera_centers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_match_published_values() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.codebook_size, 64);
        assert_eq!(c.stages, 6);
        assert_eq!(c.hash_log2, 19);
        assert!((c.lambda_mask - 5e-4).abs() < 1e-18);
        assert!((c.epsilon - 0.01).abs() < 1e-18);
        assert!(c.pp);
    }

    #[test]
    fn rejections_name_the_offending_key() {
        let cases: Vec<(&str, RunConfig)> = vec![
            (
                "lambda-mask",
                RunConfig {
                    lambda_mask: -1.0,
                    ..Default::default()
                },
            ),
            (
                "epsilon",
                RunConfig {
                    epsilon: 1.5,
                    ..Default::default()
                },
            ),
            (
                "codebook-size",
                RunConfig {
                    codebook_size: 0,
                    ..Default::default()
                },
            ),
            (
                "stages",
                RunConfig {
                    stages: 0,
                    ..Default::default()
                },
            ),
            (
                "hash-log2",
                RunConfig {
                    hash_log2: 40,
                    ..Default::default()
                },
            ),
        ];
        for (key, config) in cases {
            let err = config.validate().unwrap_err().to_string();
            assert!(err.contains(key), "error {err:?} does not name {key}");
        }
    }

    #[test]
    fn full_schedule_scales_every_stage_budget() {
        let mut c = RunConfig::default();
        c.apply_full_schedule();
        assert_eq!(c.iters_mask, FULL_ITERS);
        assert_eq!(c.iters_field, FULL_ITERS);
        assert_eq!(c.iters_rvq, 15_000);
    }

    #[test]
    fn projected_configs_carry_the_seed_everywhere() {
        let c = RunConfig {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(c.mask_config([0.0; 3]).seed, 42);
        assert_eq!(c.rvq_config().seed, 42);
        assert_eq!(c.distill_config(None).seed, 42);
    }
}
