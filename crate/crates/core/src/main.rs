//! `gscodec` — compress, inspect, and render compact Gaussian-splat scenes.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use gscodec::config::RunConfig;
use gscodec::container::{decode_file, predict_sizes, stats, StorageReport};
use gscodec::error::{GsError, Result};
use gscodec::img::Image;
use gscodec::mask::MaskMode;
use gscodec::pipeline::{
    bake_cloud, compress, eval_csv, eval_images, render_cloud_views, render_decoded_views,
};
use gscodec::ply::{load_ply, save_ply};
use gscodec::sweep::{run_sweep, sweep_csv};
use gscodec::synth::{ring_cameras, toy_scene, ToyConfig};

#[derive(Parser)]
#[command(
    name = "gscodec",
    version,
    about = "Compact codec for 3D Gaussian splat scenes",
    after_help = "Environment:\n  GSCODEC_THREADS  caps the worker thread count (1 forces serial execution)"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Compression knobs shared by `compress` and `sweep`.
#[derive(Args)]
struct Knobs {
    /// Weight of the mask sparsity loss.
    #[arg(long, default_value_t = 5e-4)]
    lambda_mask: f64,
    /// Hard-mask threshold on the soft mask at prune time.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Attributes the mask multiplies: opacity_only, scale_only, or both.
    #[arg(long, default_value = "both")]
    mask_mode: String,
    /// Codes per residual-VQ stage.
    #[arg(long, default_value_t = 64)]
    codebook_size: usize,
    /// Residual-VQ stages.
    #[arg(long, default_value_t = 6)]
    stages: usize,
    /// log2 of the per-level hash table cap.
    #[arg(long, default_value_t = 19)]
    hash_log2: u32,
    /// Mask training iterations.
    #[arg(long, default_value_t = 2000)]
    iters_mask: usize,
    /// Color-field distillation iterations.
    #[arg(long, default_value_t = 5000)]
    iters_field: usize,
    /// Codebook refinement iterations.
    #[arg(long, default_value_t = 1000)]
    iters_rvq: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable post-processing (pruning + quantization + Huffman).
    #[arg(long)]
    no_pp: bool,
    /// Skip mask training and keep every Gaussian.
    #[arg(long)]
    no_mask: bool,
    /// Pin the worker pool to a single thread.
    #[arg(long)]
    deterministic: bool,
    /// Use the full-length (30K-iteration) training schedule.
    #[arg(long)]
    full_schedule: bool,
}

impl Knobs {
    fn to_config(&self) -> Result<RunConfig> {
        let mut config = RunConfig {
            lambda_mask: self.lambda_mask,
            epsilon: self.epsilon,
            mask_mode: MaskMode::from_str(&self.mask_mode)?,
            codebook_size: self.codebook_size,
            stages: self.stages,
            hash_log2: self.hash_log2,
            iters_mask: self.iters_mask,
            iters_field: self.iters_field,
            iters_rvq: self.iters_rvq,
            seed: self.seed,
            pp: !self.no_pp,
            skip_mask: self.no_mask,
            deterministic: self.deterministic,
            ..Default::default()
        };
        if self.full_schedule {
            config.apply_full_schedule();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a PLY scene into a .cgs container.
    Compress {
        /// Input scene (binary little-endian PLY).
        input: PathBuf,
        /// Camera JSON; without it mask training is skipped.
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// Output container path.
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Decode a container and export an interop PLY (degree-0 colors).
    Decompress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Reference direction the exported colors are baked at.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 1.0])]
        view_dir: Vec<f64>,
    },
    /// Render a scene (.ply or .cgs) at the given cameras into PNGs.
    Render {
        scene: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Render two scenes at shared cameras and tabulate PSNR/SSIM/L1.
    Eval {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report the per-channel storage breakdown of a container,
    /// or predict it from scene shape with --predict-n.
    Stats {
        input: Option<PathBuf>,
        /// Predict sizes for this Gaussian count instead of reading a file.
        #[arg(long)]
        predict_n: Option<u64>,
        #[arg(long, default_value_t = 64)]
        codebook_size: usize,
        #[arg(long, default_value_t = 6)]
        stages: usize,
        #[arg(long, default_value_t = 19)]
        hash_log2: u32,
    },
    /// Rate-distortion sweep over tightened compactness knobs.
    Sweep {
        input: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Keep only Pareto-frontier rows.
        #[arg(long)]
        frontier: bool,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Generate a synthetic benchmark scene (and optionally its cameras).
    Synth {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        cameras_out: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        /// Fraction of invisible decoy Gaussians.
        #[arg(long, default_value_t = 0.45)]
        decoys: f64,
        #[arg(long, default_value_t = 48)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ring cameras to generate.
        #[arg(long, default_value_t = 8)]
        views: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 128)]
        size: u32,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Compress {
            input,
            cameras,
            output,
            report,
            knobs,
        } => {
            let config = apply_determinism(knobs.to_config()?);
            let cloud = load_ply(&std::fs::read(&input)?)?;
            let views = match &cameras {
                Some(path) => gscodec::camera::load_cameras(path)?,
                None => Vec::new(),
            };
            let outcome = compress(&cloud, &views, &config)?;
            std::fs::write(&output, &outcome.bytes)?;
            let json = serde_json::to_string_pretty(&outcome.report)
                .map_err(|e| GsError::Io(std::io::Error::other(e)))?;
            println!("{json}");
            if let Some(path) = report {
                std::fs::write(path, json)?;
            }
            Ok(())
        }
        Cmd::Decompress {
            input,
            output,
            view_dir,
        } => {
            let bytes = std::fs::read(&input)?;
            let scene = decode_file(&bytes)?;
            let dir = [view_dir[0], view_dir[1], view_dir[2]];
            let cloud = bake_cloud(&scene, dir)?;
            let ply = save_ply(&cloud)?;
            std::fs::write(&output, &ply)?;
            println!(
                "{}",
                serde_json::json!({
                    "gaussians": cloud.len(),
                    "bytes_in": bytes.len(),
                    "bytes_out": ply.len(),
                })
            );
            Ok(())
        }
        Cmd::Render {
            scene,
            cameras,
            outdir,
        } => {
            let views = gscodec::camera::load_cameras(&cameras)?;
            let images = render_scene(&scene, &views)?;
            std::fs::create_dir_all(&outdir)?;
            for (i, img) in images.iter().enumerate() {
                img.save_png(&outdir.join(format!("view_{i:03}.png")))?;
            }
            println!("wrote {} images to {}", images.len(), outdir.display());
            Ok(())
        }
        Cmd::Eval { a, b, cameras, out } => {
            let views = gscodec::camera::load_cameras(&cameras)?;
            let ia = render_scene(&a, &views)?;
            let ib = render_scene(&b, &views)?;
            let rows = eval_images(&ia, &ib)?;
            let csv = eval_csv(&rows);
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::Stats {
            input,
            predict_n,
            codebook_size,
            stages,
            hash_log2,
        } => {
            let report = match (&input, predict_n) {
                (Some(path), None) => stats(&std::fs::read(path)?)?,
                (None, Some(n)) => {
                    let fc = gscodec::field::FieldConfig {
                        max_hashmap: 1usize << hash_log2,
                        ..Default::default()
                    };
                    predict_sizes(n, codebook_size, stages, &fc)
                }
                _ => {
                    return Err(GsError::Config(
                        "stats needs exactly one of an input file or --predict-n".into(),
                    ))
                }
            };
            println!("{}", stats_json(&report));
            Ok(())
        }
        Cmd::Sweep {
            input,
            cameras,
            out,
            frontier,
            knobs,
        } => {
            let config = apply_determinism(knobs.to_config()?);
            let cloud = load_ply(&std::fs::read(&input)?)?;
            let views = gscodec::camera::load_cameras(&cameras)?;
            let rows = run_sweep(&cloud, &views, &config)?;
            std::fs::write(&out, sweep_csv(&rows, frontier))?;
            println!("wrote {} sweep rows to {}", rows.len(), out.display());
            Ok(())
        }
        Cmd::Synth {
            output,
            cameras_out,
            n,
            decoys,
            clusters,
            seed,
            views,
            size,
        } => {
            let scene = toy_scene(&ToyConfig {
                n,
                decoy_fraction: decoys,
                clusters,
                seed,
                ..Default::default()
            })?;
            std::fs::write(&output, save_ply(&scene.cloud)?)?;
            if let Some(path) = cameras_out {
                let cams = ring_cameras(views, 4.0, 0.8, size, size as f64 * 0.86);
                gscodec::camera::save_cameras(&cams, &path)?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "gaussians": n,
                    "decoys": scene.decoy_count(),
                    "output": output.display().to_string(),
                })
            );
            Ok(())
        }
    }
}

/// `--deterministic` pins the pool before its first use.
fn apply_determinism(config: RunConfig) -> RunConfig {
    if config.deterministic {
        std::env::set_var("GSCODEC_THREADS", "1");
    }
    config
}

fn render_scene(path: &Path, views: &[gscodec::camera::CameraPose]) -> Result<Vec<Image>> {
    let background = [0.0, 0.0, 0.0];
    let bytes = std::fs::read(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("cgs") => render_decoded_views(&decode_file(&bytes)?, views, background),
        _ => render_cloud_views(&load_ply(&bytes)?, views, background),
    }
}

fn stats_json(r: &StorageReport) -> String {
    let ratio = match r.ratio {
        Some(v) => serde_json::json!((v * 100.0).round() / 100.0),
        None => serde_json::json!("n/a"),
    };
    serde_json::to_string_pretty(&serde_json::json!({
        "gaussians": r.n,
        "input_gaussians": r.input_n,
        "post_processed": r.pp,
        "bytes": {
            "positions": r.positions,
            "opacities": r.opacities,
            "scale": r.scale,
            "rotation": r.rotation,
            "hash": r.hash,
            "mlp": r.mlp,
            "overhead": r.overhead,
            "total": r.total,
        },
        "baseline_bytes": r.baseline,
        "ratio": ratio,
    }))
    .expect("stats serialization cannot fail")
}
