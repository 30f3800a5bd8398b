//! View-dependent color field: scene contraction, a multiresolution hash
//! grid, and a small MLP head.
//!
//! A query contracts the world position into the unit ball of radius 2, maps
//! it into [0,1]³, gathers trilinearly-interpolated features from every grid
//! level, concatenates the raw view direction, and runs the MLP. The three
//! outputs are treated as SH degree-0 coefficients:
//! `rgb = clamp(0.5 + 0.28209479…·out)`.
//!
//! All parameters (grid tables, then MLP weights) live in one flat `f64`
//! vector so the training loops can drive a single optimizer; serialization
//! slices the same vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::GaussianCloud;
use crate::error::{GsError, Result};
use crate::optim::Adam;
use crate::sh::{evaluate_sh, SH_C0};
use crate::util::{fold_partials, par_chunk_map};

const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];
const TABLE_INIT_SPAN: f64 = 1e-4;
const BATCH_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub num_levels: usize,
    pub features_per_level: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
    /// Per-level slot budget; levels whose dense corner count fits use
    /// direct indexing instead of hashing.
    pub max_hashmap: usize,
    pub mlp_hidden: usize,
    /// Number of hidden layers (the output layer is extra).
    pub mlp_layers: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            num_levels: 16,
            features_per_level: 2,
            base_resolution: 16,
            max_resolution: 4096,
            max_hashmap: 1 << 19,
            mlp_hidden: 64,
            mlp_layers: 2,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0
            || self.features_per_level == 0
            || self.base_resolution == 0
            || self.mlp_hidden == 0
            || self.mlp_layers == 0
            || self.max_hashmap == 0
        {
            return Err(GsError::Config("field config values must be positive".into()));
        }
        if self.max_resolution < self.base_resolution {
            return Err(GsError::Config(format!(
                "max_resolution {} below base_resolution {}",
                self.max_resolution, self.base_resolution
            )));
        }
        Ok(())
    }

    /// Geometric level resolutions from base to max, rounded to integers.
    pub fn level_resolutions(&self) -> Vec<u32> {
        if self.num_levels == 1 {
            return vec![self.base_resolution];
        }
        let b = ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln())
            / (self.num_levels - 1) as f64;
        (0..self.num_levels)
            .map(|l| (self.base_resolution as f64 * (b * l as f64).exp()).round() as u32)
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.num_levels * self.features_per_level
    }

    pub fn mlp_input_dim(&self) -> usize {
        self.feature_dim() + 3
    }

    /// Dense layer shapes (in, out) of the MLP head.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.mlp_input_dim(), self.mlp_hidden)];
        for _ in 1..self.mlp_layers {
            dims.push((self.mlp_hidden, self.mlp_hidden));
        }
        dims.push((self.mlp_hidden, 3));
        dims
    }
}

/// Slot count for one level: the dense corner count `(n+1)³` rounded up to a
/// multiple of 8, capped at the hash budget. Returns (slots, dense?).
pub fn level_slots(resolution: u32, max_hashmap: usize) -> (usize, bool) {
    let corners = (resolution as usize + 1).pow(3);
    let padded = corners.div_ceil(8) * 8;
    if padded <= max_hashmap {
        (padded, true)
    } else {
        (max_hashmap, false)
    }
}

/// Piecewise contraction onto the open ball of radius 2: identity inside the
/// unit ball, `(2 − 1/‖p‖)·p/‖p‖` outside.
pub fn contract(p: [f64; 3]) -> [f64; 3] {
    let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if norm <= 1.0 {
        p
    } else {
        let f = (2.0 - 1.0 / norm) / norm;
        [p[0] * f, p[1] * f, p[2] * f]
    }
}

/// Affine map from the contraction range (−2,2)³ into the unit cube.
pub fn to_unit_cube(c: [f64; 3]) -> [f64; 3] {
    [
        ((c[0] + 2.0) / 4.0).clamp(0.0, 1.0),
        ((c[1] + 2.0) / 4.0).clamp(0.0, 1.0),
        ((c[2] + 2.0) / 4.0).clamp(0.0, 1.0),
    ]
}

/// The eight (slot, weight) pairs per level that a query touches; level-major.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub entries: Vec<(u32, f64)>,
}

#[derive(Debug, Clone)]
pub struct ColorField {
    pub config: FieldConfig,
    pub resolutions: Vec<u32>,
    pub table_slots: Vec<usize>,
    pub table_dense: Vec<bool>,
    table_offsets: Vec<usize>,
    mlp_offset: usize,
    layer_offsets: Vec<usize>,
    /// Grid tables level by level, then per layer weights (row-major out×in)
    /// followed by biases.
    pub params: Vec<f64>,
}

impl ColorField {
    /// Build a field with small random table entries and fan-in-scaled MLP
    /// weights (biases zero).
    pub fn new(config: FieldConfig, seed: u64) -> Result<ColorField> {
        config.validate()?;
        let resolutions = config.level_resolutions();
        let mut table_slots = Vec::with_capacity(resolutions.len());
        let mut table_dense = Vec::with_capacity(resolutions.len());
        let mut table_offsets = Vec::with_capacity(resolutions.len());
        let mut offset = 0usize;
        for &n in &resolutions {
            let (slots, dense) = level_slots(n, config.max_hashmap);
            table_offsets.push(offset);
            offset += slots * config.features_per_level;
            table_slots.push(slots);
            table_dense.push(dense);
        }
        let mlp_offset = offset;
        let mut layer_offsets = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            layer_offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; offset];
        for v in &mut params[..mlp_offset] {
            *v = rng.random_range(-TABLE_INIT_SPAN..TABLE_INIT_SPAN);
        }
        for (i, (fan_in, fan_out)) in config.layer_dims().iter().enumerate() {
            let bound = 1.0 / (*fan_in as f64).sqrt();
            let start = layer_offsets[i];
            for v in &mut params[start..start + fan_in * fan_out] {
                *v = rng.random_range(-bound..bound);
            }
            // Biases stay zero.
        }

        Ok(ColorField {
            config,
            resolutions,
            table_slots,
            table_dense,
            table_offsets,
            mlp_offset,
            layer_offsets,
            params,
        })
    }

    pub fn table(&self, level: usize) -> &[f64] {
        let start = self.table_offsets[level];
        &self.params[start..start + self.table_slots[level] * self.config.features_per_level]
    }

    pub fn mlp_params(&self) -> &[f64] {
        &self.params[self.mlp_offset..]
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn mlp_param_count(&self) -> usize {
        self.params.len() - self.mlp_offset
    }

    fn layer(&self, i: usize) -> (&[f64], &[f64], usize, usize) {
        let (fan_in, fan_out) = self.config.layer_dims()[i];
        let start = self.layer_offsets[i];
        let w = &self.params[start..start + fan_in * fan_out];
        let b = &self.params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out];
        (w, b, fan_in, fan_out)
    }

    /// Interpolation stencil of a unit-cube point: per level, the 8 corner
    /// slots with their trilinear weights.
    pub fn stencil(&self, x: [f64; 3]) -> Stencil {
        let f = self.config.features_per_level;
        let _ = f;
        let mut entries = Vec::with_capacity(self.resolutions.len() * 8);
        for (l, &n) in self.resolutions.iter().enumerate() {
            let nf = n as f64;
            let mut base = [0u32; 3];
            let mut frac = [0.0f64; 3];
            for a in 0..3 {
                let pos = x[a].clamp(0.0, 1.0) * nf;
                let i0 = pos.floor().min(nf - 1.0).max(0.0);
                base[a] = i0 as u32;
                frac[a] = pos - i0;
            }
            let slots = self.table_slots[l];
            let dense = self.table_dense[l];
            for corner in 0..8u32 {
                let dx = corner & 1;
                let dy = (corner >> 1) & 1;
                let dz = (corner >> 2) & 1;
                let ix = base[0] + dx;
                let iy = base[1] + dy;
                let iz = base[2] + dz;
                let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                    * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                    * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
                let slot = if dense {
                    let n1 = n as u64 + 1;
                    (ix as u64 + iy as u64 * n1 + iz as u64 * n1 * n1) as u32
                } else {
                    let h = ix.wrapping_mul(HASH_PRIMES[0])
                        ^ iy.wrapping_mul(HASH_PRIMES[1])
                        ^ iz.wrapping_mul(HASH_PRIMES[2]);
                    h % slots as u32
                };
                entries.push((slot, w));
            }
        }
        Stencil { entries }
    }

    /// Concatenated per-level features for a unit-cube point.
    pub fn hash_encode(&self, x: [f64; 3]) -> Vec<f64> {
        self.features_from_stencil(&self.stencil(x))
    }

    pub fn features_from_stencil(&self, stencil: &Stencil) -> Vec<f64> {
        let f = self.config.features_per_level;
        let mut out = vec![0.0; self.config.feature_dim()];
        for l in 0..self.resolutions.len() {
            let table = self.table(l);
            for &(slot, w) in &stencil.entries[l * 8..(l + 1) * 8] {
                for j in 0..f {
                    out[l * f + j] += w * table[slot as usize * f + j];
                }
            }
        }
        out
    }

    /// Scatter feature gradients back into a flat parameter-gradient buffer.
    fn accumulate_table_grads(&self, stencil: &Stencil, d_feat: &[f64], grad: &mut [f64]) {
        let f = self.config.features_per_level;
        for l in 0..self.resolutions.len() {
            let base = self.table_offsets[l];
            for &(slot, w) in &stencil.entries[l * 8..(l + 1) * 8] {
                for j in 0..f {
                    grad[base + slot as usize * f + j] += w * d_feat[l * f + j];
                }
            }
        }
    }

    /// MLP forward pass; returns the 3 raw outputs and the layer inputs and
    /// pre-activations needed by the backward pass.
    fn mlp_forward(&self, input: &[f64]) -> ([f64; 3], MlpCache) {
        let dims = self.config.layer_dims();
        let mut acts: Vec<Vec<f64>> = vec![input.to_vec()];
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
        for i in 0..dims.len() {
            let (w, b, fan_in, fan_out) = self.layer(i);
            let x = acts.last().unwrap();
            let mut z = vec![0.0; fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(x) {
                    acc += wi * xi;
                }
                *zo = acc;
            }
            pre.push(z.clone());
            if i + 1 < dims.len() {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            acts.push(z);
        }
        let out = acts.last().unwrap();
        ([out[0], out[1], out[2]], MlpCache { acts, pre })
    }

    /// Backward through the MLP: accumulates weight/bias gradients into
    /// `grad` and returns the gradient w.r.t. the input vector.
    fn mlp_backward(&self, cache: &MlpCache, d_out: &[f64; 3], grad: &mut [f64]) -> Vec<f64> {
        let dims = self.config.layer_dims();
        let mut delta: Vec<f64> = d_out.to_vec();
        for i in (0..dims.len()).rev() {
            let (w, _, fan_in, fan_out) = self.layer(i);
            if i + 1 < dims.len() {
                for (d, z) in delta.iter_mut().zip(&cache.pre[i]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let start = self.layer_offsets[i];
            let x = &cache.acts[i];
            for o in 0..fan_out {
                let d = delta[o];
                let wrow = start + o * fan_in;
                for (j, xi) in x.iter().enumerate() {
                    grad[wrow + j] += d * xi;
                }
                grad[start + fan_in * fan_out + o] += d;
            }
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += d * wi;
                }
            }
            delta = prev;
        }
        delta
    }
}

struct MlpCache {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn unit_direction(d: [f64; 3]) -> Result<[f64; 3]> {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(GsError::Config("view direction must be finite and nonzero".into()));
    }
    Ok([d[0] / norm, d[1] / norm, d[2] / norm])
}

/// Color from precomputed grid features and a view direction. Shared by the
/// direct and cached query paths so the two are bit-identical.
pub fn color_from_features(field: &ColorField, features: &[f64], d: [f64; 3]) -> Result<[f64; 3]> {
    let d = unit_direction(d)?;
    let mut input = Vec::with_capacity(field.config.mlp_input_dim());
    input.extend_from_slice(features);
    input.extend_from_slice(&d);
    let (out, _) = field.mlp_forward(&input);
    Ok([
        (0.5 + SH_C0 * out[0]).clamp(0.0, 1.0),
        (0.5 + SH_C0 * out[1]).clamp(0.0, 1.0),
        (0.5 + SH_C0 * out[2]).clamp(0.0, 1.0),
    ])
}

/// View-dependent color of a world-space point.
pub fn query_color(field: &ColorField, p: [f64; 3], d: [f64; 3]) -> Result<[f64; 3]> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err(GsError::Config(format!("non-finite query position {p:?}")));
    }
    let features = field.hash_encode(to_unit_cube(contract(p)));
    color_from_features(field, &features, d)
}

/// Grid features for every Gaussian position, `N × feature_dim` flat.
/// Querying against the cache skips the grid walk entirely.
pub fn precompute_features(field: &ColorField, positions: &[[f64; 3]]) -> Vec<f64> {
    let fd = field.config.feature_dim();
    let parts = par_chunk_map(positions.len(), 1024, |lo, hi| {
        let mut out = Vec::with_capacity((hi - lo) * fd);
        for p in &positions[lo..hi] {
            out.extend(field.hash_encode(to_unit_cube(contract(*p))));
        }
        out
    });
    parts.concat()
}

/// Cached-path color query; errors if the cache does not cover index `n`.
pub fn query_color_cached(
    field: &ColorField,
    cache: &[f64],
    n: usize,
    d: [f64; 3],
) -> Result<[f64; 3]> {
    let fd = field.config.feature_dim();
    let start = n * fd;
    if start + fd > cache.len() {
        return Err(GsError::Config(format!(
            "feature cache of {} entries has no row {n}",
            cache.len() / fd
        )));
    }
    color_from_features(field, &cache[start..start + fd], d)
}

/// Squared-error loss of one query against a target color, with its gradient
/// over every parameter (grid tables and MLP). This is exactly one sample of
/// the distillation objective — contraction, stencil, trilinear features,
/// MLP, color head — exposed so the whole chain can be checked against
/// finite differences of [`query_color`] from outside the module.
pub fn query_loss_grad(
    field: &ColorField,
    p: [f64; 3],
    d: [f64; 3],
    target: [f64; 3],
) -> Result<(f64, Vec<f64>)> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err(GsError::Config(format!("non-finite query position {p:?}")));
    }
    let d = unit_direction(d)?;
    let stencil = field.stencil(to_unit_cube(contract(p)));
    let features = field.features_from_stencil(&stencil);
    let mut input = Vec::with_capacity(field.config.mlp_input_dim());
    input.extend_from_slice(&features);
    input.extend_from_slice(&d);
    let (out, cache) = field.mlp_forward(&input);

    let mut loss = 0.0;
    let mut d_out = [0.0; 3];
    for ch in 0..3 {
        let raw = 0.5 + SH_C0 * out[ch];
        let rgb = raw.clamp(0.0, 1.0);
        let err = rgb - target[ch];
        loss += err * err;
        if (0.0..=1.0).contains(&raw) {
            d_out[ch] = 2.0 * err * SH_C0;
        }
    }
    let mut grad = vec![0.0; field.param_count()];
    let d_input = field.mlp_backward(&cache, &d_out, &mut grad);
    field.accumulate_table_grads(&stencil, &d_input[..field.config.feature_dim()], &mut grad);
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// When set, directions are sampled from these camera centers to the
    /// Gaussian; otherwise uniformly on the sphere.
    pub camera_centers: Option<Vec<[f64; 3]>>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iters: 5000,
            lr: 1e-2,
            batch: 1024,
            seed: 0,
            camera_centers: None,
        }
    }
}

/// Iterations at which the distillation learning rate drops by ×0.33: the
/// 5/30, 15/30 and 25/30 marks of the configured budget.
pub fn lr_decay_marks(iters: usize) -> [usize; 3] {
    [
        iters * 5 / 30,
        iters * 15 / 30,
        iters * 25 / 30,
    ]
}

#[derive(Debug, Clone)]
pub struct DistillReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// (iteration, loss) rows.
    pub log: Vec<(usize, f64)>,
}

fn sphere_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Distill the cloud's SH color into the field: minimize the mean squared
/// RGB error between field queries and SH evaluation over random Gaussians
/// and view directions. Aborts if the loss exceeds ten times its initial
/// value.
pub fn distill_train(
    cloud: &GaussianCloud,
    field: &mut ColorField,
    config: &DistillConfig,
) -> Result<DistillReport> {
    if cloud.is_empty() {
        return Err(GsError::Config("cannot distill from an empty cloud".into()));
    }
    if config.iters == 0 || config.batch == 0 {
        return Err(GsError::Config("distillation needs iters ≥ 1 and batch ≥ 1".into()));
    }
    if let Some(centers) = &config.camera_centers {
        if centers.is_empty() {
            return Err(GsError::Config("camera_centers must not be empty when set".into()));
        }
    }

    // Positions are fixed, so stencils and the cube coordinates can be
    // resolved once per Gaussian.
    let stencils: Vec<Stencil> = cloud
        .positions
        .iter()
        .map(|&p| field.stencil(to_unit_cube(contract(p))))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(field.param_count(), config.lr);
    let marks = lr_decay_marks(config.iters);
    let mut lr = config.lr;
    let mut report = DistillReport {
        initial_loss: 0.0,
        final_loss: 0.0,
        log: Vec::with_capacity(config.iters),
    };

    for iter in 0..config.iters {
        if marks.contains(&iter) && iter > 0 {
            lr *= 0.33;
            adam.lr = lr;
        }

        // Draw the whole batch sequentially so the parallel pass below is
        // thread-count invariant.
        let samples: Vec<(usize, [f64; 3])> = (0..config.batch)
            .map(|_| {
                let n = rng.random_range(0..cloud.len());
                let d = match &config.camera_centers {
                    Some(centers) => {
                        let c = centers[rng.random_range(0..centers.len())];
                        let p = cloud.positions[n];
                        match unit_direction([p[0] - c[0], p[1] - c[1], p[2] - c[2]]) {
                            Ok(d) => d,
                            Err(_) => sphere_direction(&mut rng),
                        }
                    }
                    None => sphere_direction(&mut rng),
                };
                (n, d)
            })
            .collect();

        let scale = 1.0 / (config.batch as f64 * 3.0);
        let parts = par_chunk_map(samples.len(), BATCH_CHUNK, |lo, hi| {
            let mut grad = vec![0.0; field.param_count()];
            let mut loss = 0.0;
            for &(n, d) in &samples[lo..hi] {
                let features = field.features_from_stencil(&stencils[n]);
                let mut input = Vec::with_capacity(field.config.mlp_input_dim());
                input.extend_from_slice(&features);
                input.extend_from_slice(&d);
                let (out, cache) = field.mlp_forward(&input);
                let target = evaluate_sh(cloud.sh_at(n), d).expect("validated SH");

                let mut d_out = [0.0; 3];
                for ch in 0..3 {
                    let raw = 0.5 + SH_C0 * out[ch];
                    let rgb = raw.clamp(0.0, 1.0);
                    let err = rgb - target[ch];
                    loss += err * err * scale;
                    if (0.0..=1.0).contains(&raw) {
                        d_out[ch] = 2.0 * err * scale * SH_C0;
                    }
                }
                let d_input = field.mlp_backward(&cache, &d_out, &mut grad);
                field.accumulate_table_grads(&stencils[n], &d_input[..field.config.feature_dim()], &mut grad);
            }
            (loss, grad)
        });

        let mut loss = 0.0;
        let mut grad = vec![0.0; field.param_count()];
        let (losses, grads): (Vec<f64>, Vec<Vec<f64>>) = parts.into_iter().unzip();
        for l in losses {
            loss += l;
        }
        fold_partials(&mut grad, grads);

        if iter == 0 {
            report.initial_loss = loss;
        }
        if !loss.is_finite() || (iter > 0 && loss > report.initial_loss * 10.0) {
            return Err(GsError::Train(format!(
                "distillation diverged at iteration {iter}: loss {loss} (initial {})",
                report.initial_loss
            )));
        }
        adam.step(&mut field.params, &grad);
        report.log.push((iter, loss));
        report.final_loss = loss;
    }
    Ok(report)
}

/// End-to-end refinement for synthetic scenes: render the cloud with field
/// colors and follow the photometric loss gradient back into the field.
/// Geometry is frozen; only field parameters move.
pub fn render_distill_train(
    cloud: &GaussianCloud,
    views: &[crate::camera::CameraPose],
    references: &[crate::img::Image],
    field: &mut ColorField,
    config: &DistillConfig,
) -> Result<DistillReport> {
    use crate::metrics::render_loss;
    use crate::render::{backward, rasterize_with_tape, RenderSettings, SplatView};

    if cloud.is_empty() {
        return Err(GsError::Config("cannot distill from an empty cloud".into()));
    }
    if views.is_empty() || views.len() != references.len() {
        return Err(GsError::Config(format!(
            "render distillation needs matched views and references, got {} and {}",
            views.len(),
            references.len()
        )));
    }

    let stencils: Vec<Stencil> = cloud
        .positions
        .iter()
        .map(|&p| field.stencil(to_unit_cube(contract(p))))
        .collect();
    let directions: Vec<Vec<[f64; 3]>> = views
        .iter()
        .map(|pose| {
            cloud
                .positions
                .iter()
                .map(|&p| pose.direction_to(p))
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(field.param_count(), config.lr);
    let marks = lr_decay_marks(config.iters);
    let mut lr = config.lr;
    let mut report = DistillReport {
        initial_loss: 0.0,
        final_loss: 0.0,
        log: Vec::with_capacity(config.iters),
    };

    for iter in 0..config.iters {
        if marks.contains(&iter) && iter > 0 {
            lr *= 0.33;
            adam.lr = lr;
        }
        let v = rng.random_range(0..views.len());
        let pose = &views[v];
        let settings = RenderSettings::for_pose(pose);

        // Forward: field colors, then the splatting pass.
        let n = cloud.len();
        let color_parts = par_chunk_map(n, BATCH_CHUNK, |lo, hi| {
            let mut out = Vec::with_capacity(hi - lo);
            let mut caches = Vec::with_capacity(hi - lo);
            for i in lo..hi {
                let features = field.features_from_stencil(&stencils[i]);
                let mut input = Vec::with_capacity(field.config.mlp_input_dim());
                input.extend_from_slice(&features);
                input.extend_from_slice(&directions[v][i]);
                let (raw, cache) = field.mlp_forward(&input);
                out.push(raw);
                caches.push(cache);
            }
            (out, caches)
        });
        let mut raw_outputs = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        for (o, c) in color_parts {
            raw_outputs.extend(o);
            caches.extend(c);
        }
        let colors: Vec<[f64; 3]> = raw_outputs
            .iter()
            .map(|o| {
                [
                    (0.5 + SH_C0 * o[0]).clamp(0.0, 1.0),
                    (0.5 + SH_C0 * o[1]).clamp(0.0, 1.0),
                    (0.5 + SH_C0 * o[2]).clamp(0.0, 1.0),
                ]
            })
            .collect();

        let view = SplatView {
            positions: &cloud.positions,
            opacities: &cloud.opacities,
            scales: &cloud.scales,
            rotations: &cloud.rotations,
            colors: &colors,
        };
        let (image, tape) = rasterize_with_tape(&view, pose, &settings)?;
        let (loss, grad_img) = render_loss(&image, &references[v])?;
        if iter == 0 {
            report.initial_loss = loss;
        }
        if !loss.is_finite() || (iter > 0 && loss > report.initial_loss * 10.0 + 1e-12) {
            return Err(GsError::Train(format!(
                "render distillation diverged at iteration {iter}: loss {loss} (initial {})",
                report.initial_loss
            )));
        }
        let grads = backward(&tape, &view, &settings, &grad_img, None);

        let parts = par_chunk_map(n, BATCH_CHUNK, |lo, hi| {
            let mut grad = vec![0.0; field.param_count()];
            for i in lo..hi {
                let dc = grads.d_color[i];
                let mut d_out = [0.0; 3];
                let mut touched = false;
                for ch in 0..3 {
                    let raw = 0.5 + SH_C0 * raw_outputs[i][ch];
                    if (0.0..=1.0).contains(&raw) && dc[ch] != 0.0 {
                        d_out[ch] = dc[ch] * SH_C0;
                        touched = true;
                    }
                }
                if !touched {
                    continue;
                }
                let d_input = field.mlp_backward(&caches[i], &d_out, &mut grad);
                field.accumulate_table_grads(&stencils[i], &d_input[..field.config.feature_dim()], &mut grad);
            }
            grad
        });
        let mut grad = vec![0.0; field.param_count()];
        fold_partials(&mut grad, parts);
        adam.step(&mut field.params, &grad);
        report.log.push((iter, loss));
        report.final_loss = loss;
    }
    Ok(report)
}
