//! Residual vector quantization of per-Gaussian geometry attributes.
//!
//! A codec holds `L` stage codebooks of `C` entries each. Encoding walks the
//! stages, picking the nearest code to the running residual (ties broken by
//! lowest index); decoding is the cumulative sum of the selected codes.
//! Training runs K-means per stage on the residuals of the previous stages,
//! then jointly refines all codebooks by gradient descent with re-encoding
//! every iteration.
//!
//! Vectors are stored flat (`n * dim`), and index streams stage-major, which
//! matches their serialized layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GsError, Result};
use crate::util::par_chunk_map;

const ENCODE_CHUNK: usize = 4096;
const LLOYD_MAX_ITERS: usize = 50;

/// Stage codebooks for one attribute. `codebooks[l]` is `C × dim`, flat.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqCodec {
    pub dim: usize,
    pub codebook_size: usize,
    pub codebooks: Vec<Vec<f64>>,
}

impl RvqCodec {
    pub fn stages(&self) -> usize {
        self.codebooks.len()
    }

    pub fn code(&self, stage: usize, k: usize) -> &[f64] {
        &self.codebooks[stage][k * self.dim..(k + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.codebook_size == 0 || self.codebooks.is_empty() {
            return Err(GsError::Config(
                "codec needs dim ≥ 1, codebook_size ≥ 1 and at least one stage".into(),
            ));
        }
        for (l, cb) in self.codebooks.iter().enumerate() {
            if cb.len() != self.codebook_size * self.dim {
                return Err(GsError::Config(format!(
                    "stage {l} codebook has {} values, expected {}",
                    cb.len(),
                    self.codebook_size * self.dim
                )));
            }
        }
        Ok(())
    }
}

/// Stage-major code indices: `indices[stage * n + i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexStream {
    pub n: usize,
    pub stages: usize,
    pub indices: Vec<u32>,
}

impl IndexStream {
    pub fn index(&self, stage: usize, i: usize) -> u32 {
        self.indices[stage * self.n + i]
    }
}

#[derive(Debug, Clone)]
pub struct RvqTrainConfig {
    pub codebook_size: usize,
    pub stages: usize,
    pub refine_iters: usize,
    pub refine_lr: f64,
    pub seed: u64,
}

impl Default for RvqTrainConfig {
    fn default() -> Self {
        RvqTrainConfig {
            codebook_size: 64,
            stages: 6,
            refine_iters: 1000,
            refine_lr: 1e-3,
            seed: 0,
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance; equal distances resolve to the
/// lowest index.
fn nearest(v: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let c = centroids.len() / dim;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..c {
        let d = dist2(v, &centroids[k * dim..(k + 1) * dim]);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

/// K-means with k-means++ seeding and Lloyd refinement. Empty clusters are
/// reseeded to the point currently farthest from its assigned centroid.
/// Fewer than `c` distinct inputs fall back to duplicate centroids.
pub fn kmeans_init(
    vectors: &[f64],
    dim: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if dim == 0 || vectors.len() % dim != 0 {
        return Err(GsError::Config(format!(
            "vector buffer of {} values is not a multiple of dim {dim}",
            vectors.len()
        )));
    }
    let n = vectors.len() / dim;
    if n == 0 {
        return Err(GsError::Config("k-means needs at least one vector".into()));
    }
    let at = |i: usize| &vectors[i * dim..(i + 1) * dim];

    // k-means++ seeding: next centroid sampled ∝ squared distance to the
    // nearest chosen one. When every remaining distance is zero (fewer
    // distinct points than centroids) duplicates are allowed.
    let mut centroids = Vec::with_capacity(c * dim);
    centroids.extend_from_slice(at(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(at(i), &centroids[0..dim])).collect();
    while centroids.len() < c * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(at(pick));
        let new = centroids[start..start + dim].to_vec();
        for i in 0..n {
            d2[i] = d2[i].min(dist2(at(i), &new));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..LLOYD_MAX_ITERS {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (k, d) = nearest(at(i), &centroids, dim);
            dist[i] = d;
            if assignment[i] != k {
                assignment[i] = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }

        let mut sums = vec![0.0; c * dim];
        let mut counts = vec![0usize; c];
        for i in 0..n {
            let k = assignment[i];
            counts[k] += 1;
            for (s, &v) in sums[k * dim..(k + 1) * dim].iter_mut().zip(at(i)) {
                *s += v;
            }
        }
        for k in 0..c {
            if counts[k] > 0 {
                for j in 0..dim {
                    centroids[k * dim + j] = sums[k * dim + j] / counts[k] as f64;
                }
            } else {
                // Reseed to the worst-fit point; exclude it from further
                // reseeds this round so empty clusters land on distinct points.
                let far = dist
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[k * dim..(k + 1) * dim].copy_from_slice(at(far));
                dist[far] = -1.0;
            }
        }
    }
    Ok(centroids)
}

/// Quantize `vectors` through every stage. Parallel over vectors; the result
/// is independent of thread count.
pub fn encode(vectors: &[f64], codec: &RvqCodec) -> Result<IndexStream> {
    codec.validate()?;
    if vectors.len() % codec.dim != 0 {
        return Err(GsError::Config(format!(
            "vector buffer of {} values is not a multiple of dim {}",
            vectors.len(),
            codec.dim
        )));
    }
    let dim = codec.dim;
    let n = vectors.len() / dim;
    let stages = codec.stages();

    // Each chunk yields vector-major indices; scatter into stage-major order.
    let chunks = par_chunk_map(n, ENCODE_CHUNK, |lo, hi| {
        let mut out = Vec::with_capacity((hi - lo) * stages);
        let mut residual = vec![0.0; dim];
        for i in lo..hi {
            residual.copy_from_slice(&vectors[i * dim..(i + 1) * dim]);
            for l in 0..stages {
                let (k, _) = nearest(&residual, &codec.codebooks[l], dim);
                out.push(k as u32);
                let code = codec.code(l, k);
                for (r, &z) in residual.iter_mut().zip(code) {
                    *r -= z;
                }
            }
        }
        out
    });

    let mut indices = vec![0u32; stages * n];
    let mut base = 0;
    for chunk in chunks {
        let rows = chunk.len() / stages;
        for (row, item) in chunk.chunks_exact(stages).enumerate() {
            for (l, &idx) in item.iter().enumerate() {
                indices[l * n + base + row] = idx;
            }
        }
        base += rows;
    }
    Ok(IndexStream { n, stages, indices })
}

/// Cumulative code sum through `up_to_stage` stages (0 → zero vectors).
pub fn decode(stream: &IndexStream, codec: &RvqCodec, up_to_stage: usize) -> Result<Vec<f64>> {
    codec.validate()?;
    if up_to_stage > codec.stages() || stream.stages != codec.stages() {
        return Err(GsError::Config(format!(
            "decode through stage {up_to_stage} of a {}-stage codec with a {}-stage stream",
            codec.stages(),
            stream.stages
        )));
    }
    let c = codec.codebook_size as u32;
    if let Some(&bad) = stream.indices.iter().find(|&&i| i >= c) {
        return Err(GsError::Decode(format!(
            "code index {bad} out of range for codebook size {c}"
        )));
    }
    let dim = codec.dim;
    let n = stream.n;
    let parts = par_chunk_map(n, ENCODE_CHUNK, |lo, hi| {
        let mut out = vec![0.0; (hi - lo) * dim];
        for i in lo..hi {
            let v = &mut out[(i - lo) * dim..(i - lo + 1) * dim];
            for l in 0..up_to_stage {
                let code = codec.code(l, stream.index(l, i) as usize);
                for (o, &z) in v.iter_mut().zip(code) {
                    *o += z;
                }
            }
        }
        out
    });
    Ok(parts.concat())
}

/// Quantization objective: mean over vectors and codebook entries of the
/// squared stage-wise residual errors,
/// `(1/(N·C)) · Σ_stages Σ_n ‖residual − selected code‖²`.
/// Residuals are treated as constants; gradients flow only into the selected
/// codes. Returns the loss and per-stage gradients shaped like the codebooks.
pub fn codebook_loss_grad(
    vectors: &[f64],
    codec: &RvqCodec,
    stream: &IndexStream,
) -> Result<(f64, Vec<Vec<f64>>)> {
    codec.validate()?;
    let dim = codec.dim;
    let n = stream.n;
    if vectors.len() != n * dim {
        return Err(GsError::Config(format!(
            "loss over {n} indices needs {} values, got {}",
            n * dim,
            vectors.len()
        )));
    }
    let norm = 1.0 / (n as f64 * codec.codebook_size as f64);
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = codec.codebooks.iter().map(|cb| vec![0.0; cb.len()]).collect();
    let mut residual = vec![0.0; dim];
    for i in 0..n {
        residual.copy_from_slice(&vectors[i * dim..(i + 1) * dim]);
        for l in 0..codec.stages() {
            let k = stream.index(l, i) as usize;
            let code = codec.code(l, k);
            let g = &mut grads[l][k * dim..(k + 1) * dim];
            for j in 0..dim {
                let err = residual[j] - code[j];
                loss += err * err * norm;
                g[j] += 2.0 * (code[j] - residual[j]) * norm;
                residual[j] -= code[j];
            }
        }
    }
    Ok((loss, grads))
}

/// Convenience wrapper when only the loss value is needed.
pub fn codebook_loss(vectors: &[f64], codec: &RvqCodec, stream: &IndexStream) -> Result<f64> {
    codebook_loss_grad(vectors, codec, stream).map(|(l, _)| l)
}

/// Train a codec: per-stage K-means on the running residuals, then joint
/// gradient refinement with indices refreshed by re-encoding every iteration.
pub fn train_rvq(
    vectors: &[f64],
    dim: usize,
    config: &RvqTrainConfig,
) -> Result<(RvqCodec, IndexStream)> {
    if config.codebook_size == 0 || config.stages == 0 {
        return Err(GsError::Config(
            "R-VQ needs codebook_size ≥ 1 and stages ≥ 1".into(),
        ));
    }
    if dim == 0 || vectors.len() % dim != 0 || vectors.is_empty() {
        return Err(GsError::Config(format!(
            "cannot train a dim-{dim} codec on a buffer of {} values",
            vectors.len()
        )));
    }
    let n = vectors.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut codec = RvqCodec {
        dim,
        codebook_size: config.codebook_size,
        codebooks: Vec::with_capacity(config.stages),
    };
    let mut residual = vectors.to_vec();
    for _ in 0..config.stages {
        let cb = kmeans_init(&residual, dim, config.codebook_size, &mut rng)?;
        for i in 0..n {
            let v = &mut residual[i * dim..(i + 1) * dim];
            let (k, _) = nearest(v, &cb, dim);
            for (r, &z) in v.iter_mut().zip(&cb[k * dim..(k + 1) * dim]) {
                *r -= z;
            }
        }
        codec.codebooks.push(cb);
    }

    for iter in 0..config.refine_iters {
        let stream = encode(vectors, &codec)?;
        let (loss, grads) = codebook_loss_grad(vectors, &codec, &stream)?;
        if !loss.is_finite() {
            return Err(GsError::Train(format!(
                "non-finite quantization loss at refinement iteration {iter}"
            )));
        }
        for (cb, g) in codec.codebooks.iter_mut().zip(&grads) {
            for (z, &dz) in cb.iter_mut().zip(g) {
                *z -= config.refine_lr * dz;
            }
        }
    }

    let stream = encode(vectors, &codec)?;
    Ok((codec, stream))
}
