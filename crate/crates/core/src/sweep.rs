//! Rate-distortion sweeps: re-run compression over a grid of compactness
//! knobs and tabulate file size against reconstruction quality.
//!
//! The grid tightens one knob at a time from the base config — doubling the
//! mask weight, halving the hash table, halving the stage count — so each
//! family traces one axis of the rate-distortion trade-off.

use crate::camera::CameraPose;
use crate::cloud::GaussianCloud;
use crate::config::RunConfig;
use crate::error::Result;
use crate::pipeline::compress;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda_mask: f64,
    pub hash_log2: u32,
    pub stages: usize,
    pub bytes: usize,
    pub psnr: f64,
}

/// The sweep grid: the base config, then per-family tightened variants
/// (λ_m doubled ×2/×4/×8, hash halved ÷2/÷4/÷8, stages halved).
pub fn sweep_grid(base: &RunConfig) -> Vec<RunConfig> {
    let mut grid = vec![base.clone()];
    for factor in [2.0, 4.0, 8.0] {
        grid.push(RunConfig {
            lambda_mask: base.lambda_mask * factor,
            ..base.clone()
        });
    }
    for down in [1, 2, 3] {
        if base.hash_log2 > down + 2 {
            grid.push(RunConfig {
                hash_log2: base.hash_log2 - down,
                ..base.clone()
            });
        }
    }
    let mut stages = base.stages;
    while stages > 1 {
        stages = (stages / 2).max(1);
        grid.push(RunConfig {
            stages,
            ..base.clone()
        });
    }
    grid
}

/// Compress once per grid config. A failing config is reported on stderr and
/// skipped; the sweep continues.
pub fn run_sweep(
    cloud: &GaussianCloud,
    views: &[CameraPose],
    base: &RunConfig,
) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let mut rows = Vec::new();
    for config in sweep_grid(base) {
        match compress(cloud, views, &config) {
            Ok(outcome) => rows.push(SweepRow {
                lambda_mask: config.lambda_mask,
                hash_log2: config.hash_log2,
                stages: config.stages,
                bytes: outcome.bytes.len(),
                psnr: outcome.report.psnr.unwrap_or(f64::NAN),
            }),
            Err(e) => eprintln!(
                "warning: sweep point (lambda_m={}, hash_log2={}, stages={}) failed: {e}",
                config.lambda_mask, config.hash_log2, config.stages
            ),
        }
    }
    Ok(rows)
}

/// Pareto-frontier mask over (bytes, psnr): `true` where no other row is at
/// least as small and at least as good with one strict improvement.
pub fn frontier(rows: &[SweepRow]) -> Vec<bool> {
    rows.iter()
        .map(|r| {
            !rows.iter().any(|o| {
                o.bytes <= r.bytes
                    && o.psnr >= r.psnr
                    && (o.bytes < r.bytes || o.psnr > r.psnr)
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow], frontier_only: bool) -> String {
    let keep = if frontier_only {
        frontier(rows)
    } else {
        vec![true; rows.len()]
    };
    let mut out = String::from("lambda_m,hash_log2,stages,bytes,psnr\n");
    for (row, keep) in rows.iter().zip(keep) {
        if keep {
            out.push_str(&format!(
                "{},{},{},{},{:.4}\n",
                row.lambda_mask, row.hash_log2, row.stages, row.bytes, row.psnr
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(bytes: usize, psnr: f64) -> SweepRow {
        SweepRow {
            lambda_mask: 5e-4,
            hash_log2: 9,
            stages: 6,
            bytes,
            psnr,
        }
    }

    #[test]
    fn default_grid_has_at_least_nine_points() {
        let grid = sweep_grid(&RunConfig::default());
        assert!(grid.len() >= 9, "grid has {} points", grid.len());
        // One base plus three λ variants, three hash variants, stage halvings.
        assert_eq!(grid[0].lambda_mask, 5e-4);
        assert_eq!(grid[1].lambda_mask, 1e-3);
        assert_eq!(grid[3].lambda_mask, 4e-3);
        assert!(grid.iter().skip(4).take(3).map(|c| c.hash_log2).eq([18, 17, 16]));
        let stage_family: Vec<usize> = grid.iter().skip(7).map(|c| c.stages).collect();
        assert_eq!(stage_family, vec![3, 1]);
    }

    #[test]
    fn frontier_keeps_only_undominated_rows() {
        let rows = vec![
            row(100, 30.0), // dominated by the third row
            row(80, 32.0),  // frontier
            row(90, 31.0),  // frontier relative to first, dominated by second
            row(120, 35.0), // frontier: best quality
            row(70, 28.0),  // frontier: smallest
        ];
        let f = frontier(&rows);
        assert_eq!(f, vec![false, true, false, true, true]);
    }

    #[test]
    fn csv_carries_the_pinned_columns() {
        let rows = vec![row(100, 30.0), row(80, 32.0)];
        let csv = sweep_csv(&rows, false);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("lambda_m,hash_log2,stages,bytes,psnr"));
        assert_eq!(lines.next(), Some("0.0005,9,6,100,30.0000"));
        assert_eq!(csv.lines().count(), 3);

        let only = sweep_csv(&rows, true);
        assert_eq!(only.lines().count(), 2, "dominated row filtered:\n{only}");
    }
}
