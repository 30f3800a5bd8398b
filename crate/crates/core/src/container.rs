//! The `.cgs` compact scene container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CGSCENE1" · version u32 · N u64
//! flags block   (u32 length + payload: pp, mask_mode, input N, codec and
//!                field shape)
//! five channel blocks, each u64 length + payload, in fixed order:
//!   positions · opacities · scale codec · rotation codec · color field
//! crc32 u32     (over every preceding byte)
//! ```
//!
//! Positions are f16. Opacities are f16, or 8-bit quantized + Huffman when
//! post-processing is on. Codebooks are f32, index streams bit-packed
//! (Huffman-coded per stage under post-processing). Hash tables are f16, or
//! pruned + quantized + Huffman under post-processing; MLP weights stay f16.
//! `N = 0` writes zero-length channel blocks: a header-only file.

use half::f16;

use crate::cloud::GaussianCloud;
use crate::error::{GsError, Result};
use crate::field::{ColorField, FieldConfig};
use crate::mask::MaskMode;
use crate::postproc::{
    bitpack, bitunpack, dequantize, huffman_decode, huffman_encode, quantize_u8, unprune,
    HuffmanBlob, PrunedTable, QuantizedTensor, HASH_PRUNE_THRESHOLD,
};
use crate::rvq::{decode as rvq_decode, IndexStream, RvqCodec};

pub const MAGIC: &[u8; 8] = b"CGSCENE1";
pub const VERSION: u32 = 1;
/// Uncompressed baseline: 59 f32 attributes per Gaussian.
pub const BASELINE_FLOATS: u64 = 59;

/// Everything the encoder serializes. Geometry must already be pruned; the
/// index streams must cover exactly the cloud's Gaussians.
pub struct SceneBundle<'a> {
    pub positions: &'a [[f64; 3]],
    pub opacities: &'a [f64],
    pub scale_codec: &'a RvqCodec,
    pub scale_stream: &'a IndexStream,
    pub rotation_codec: &'a RvqCodec,
    pub rotation_stream: &'a IndexStream,
    pub field: &'a ColorField,
}

#[derive(Debug, Clone)]
pub struct EncodeOptions {
    pub pp: bool,
    pub mask_mode: MaskMode,
    /// Gaussian count of the original input, the denominator-side anchor for
    /// compression ratios.
    pub input_n: u64,
}

/// A decoded, renderable scene: baked geometry plus the color field
/// (`None` only for header-only files).
#[derive(Debug, Clone)]
pub struct DecodedScene {
    pub positions: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub field: Option<ColorField>,
    pub pp: bool,
    pub mask_mode: MaskMode,
    pub input_n: u64,
}

impl DecodedScene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// View the geometry as a (color-less) cloud for PLY export and tooling.
    pub fn to_cloud(&self) -> GaussianCloud {
        GaussianCloud {
            positions: self.positions.clone(),
            opacities: self.opacities.clone(),
            scales: self.scales.clone(),
            rotations: self.rotations.clone(),
            sh: Vec::new(),
            sh_dim: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Byte plumbing

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f16(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&f16::from_f64(v).to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(GsError::Decode(format!(
                "file truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f16(&mut self) -> Result<f64> {
        Ok(f16::from_le_bytes(self.take(2)?.try_into().unwrap()).to_f64())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn push_huffman(out: &mut Vec<u8>, blob: &HuffmanBlob) {
    out.extend_from_slice(&blob.lengths);
    push_u64(out, blob.count);
    push_u64(out, blob.payload.len() as u64);
    out.extend_from_slice(&blob.payload);
}

fn read_huffman(r: &mut Reader) -> Result<HuffmanBlob> {
    let lengths: [u8; 256] = r.take(256)?.try_into().unwrap();
    let count = r.u64()?;
    let payload_len = r.u64()? as usize;
    let payload = r.take(payload_len)?.to_vec();
    Ok(HuffmanBlob {
        lengths,
        count,
        payload,
    })
}

// ---------------------------------------------------------------------------
// Index stream transforms

fn index_bits(codebook_size: usize) -> u32 {
    (usize::BITS - (codebook_size - 1).leading_zeros()).max(1)
}

fn bytes_per_index(codebook_size: usize) -> usize {
    (index_bits(codebook_size) as usize).div_ceil(8)
}

/// One stage's indices as big-endian byte symbols for Huffman coding.
fn stage_symbols(stream: &IndexStream, stage: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(stream.n * width);
    for i in 0..stream.n {
        let idx = stream.index(stage, i);
        for b in (0..width).rev() {
            out.push((idx >> (8 * b)) as u8);
        }
    }
    out
}

fn symbols_to_indices(symbols: &[u8], width: usize, n: usize) -> Result<Vec<u32>> {
    if symbols.len() != n * width {
        return Err(GsError::Decode(format!(
            "index stage decoded to {} symbols, expected {}",
            symbols.len(),
            n * width
        )));
    }
    Ok(symbols
        .chunks_exact(width)
        .map(|c| c.iter().fold(0u32, |acc, &b| (acc << 8) | b as u32))
        .collect())
}

fn encode_codec_block(codec: &RvqCodec, stream: &IndexStream, pp: bool) -> Result<Vec<u8>> {
    codec.validate()?;
    if stream.stages != codec.stages() || stream.indices.len() != stream.stages * stream.n {
        return Err(GsError::Config(format!(
            "index stream shape {}×{} does not match a {}-stage codec",
            stream.stages,
            stream.n,
            codec.stages()
        )));
    }
    if codec.codebook_size > u16::MAX as usize + 1 {
        return Err(GsError::Config(format!(
            "codebook size {} exceeds the serializable maximum 65536",
            codec.codebook_size
        )));
    }
    let mut out = Vec::new();
    for cb in &codec.codebooks {
        for &v in cb {
            push_f32(&mut out, v as f32);
        }
    }
    let bits = index_bits(codec.codebook_size);
    if pp {
        let width = bytes_per_index(codec.codebook_size);
        for stage in 0..codec.stages() {
            let blob = huffman_encode(&stage_symbols(stream, stage, width));
            push_huffman(&mut out, &blob);
        }
    } else {
        for stage in 0..codec.stages() {
            let slice = &stream.indices[stage * stream.n..(stage + 1) * stream.n];
            out.extend(bitpack(slice, bits)?);
        }
    }
    Ok(out)
}

fn decode_codec_block(
    r: &mut Reader,
    dim: usize,
    codebook_size: usize,
    stages: usize,
    n: usize,
    pp: bool,
) -> Result<(RvqCodec, IndexStream)> {
    let mut codebooks = Vec::with_capacity(stages);
    for _ in 0..stages {
        let mut cb = Vec::with_capacity(codebook_size * dim);
        for _ in 0..codebook_size * dim {
            cb.push(r.f32()? as f64);
        }
        codebooks.push(cb);
    }
    let codec = RvqCodec {
        dim,
        codebook_size,
        codebooks,
    };
    let mut indices = Vec::with_capacity(stages * n);
    if pp {
        let width = bytes_per_index(codebook_size);
        for _ in 0..stages {
            let blob = read_huffman(r)?;
            let symbols = huffman_decode(&blob)?;
            indices.extend(symbols_to_indices(&symbols, width, n)?);
        }
    } else {
        let bits = index_bits(codebook_size);
        let stage_bytes = (n * bits as usize).div_ceil(8);
        for _ in 0..stages {
            let packed = r.take(stage_bytes)?;
            indices.extend(bitunpack(packed, bits, n)?);
        }
    }
    let stream = IndexStream { n, stages, indices };
    if let Some(&bad) = stream.indices.iter().find(|&&i| i >= codebook_size as u32) {
        return Err(GsError::Decode(format!(
            "code index {bad} out of range for codebook size {codebook_size}"
        )));
    }
    Ok((codec, stream))
}

// ---------------------------------------------------------------------------
// Field block

fn encode_field_block(field: &ColorField, pp: bool) -> Vec<u8> {
    let mut out = Vec::new();
    if pp {
        for table in prune_hash(field) {
            out.extend_from_slice(&table.bitmap);
            if table.survivors.is_empty() {
                push_f32(&mut out, 0.0);
                push_f32(&mut out, 0.0);
                push_huffman(&mut out, &huffman_encode(&[]));
            } else {
                let qt = quantize_u8(&table.survivors).expect("non-empty survivors");
                push_f32(&mut out, qt.min);
                push_f32(&mut out, qt.max);
                push_huffman(&mut out, &huffman_encode(&qt.symbols));
            }
        }
    } else {
        for l in 0..field.resolutions.len() {
            for &v in field.table(l) {
                push_f16(&mut out, v);
            }
        }
    }
    let mlp_start = field.param_count() - field.mlp_param_count();
    for &v in &field.params[mlp_start..] {
        push_f16(&mut out, v);
    }
    out
}

fn prune_hash(field: &ColorField) -> Vec<PrunedTable> {
    crate::postproc::prune_hash(field, HASH_PRUNE_THRESHOLD)
}

fn decode_field_block(r: &mut Reader, config: &FieldConfig, pp: bool) -> Result<ColorField> {
    let mut field = ColorField::new(config.clone(), 0)?;
    let feature_count: Vec<usize> = field
        .table_slots
        .iter()
        .map(|&s| s * config.features_per_level)
        .collect();
    let mut offset = 0usize;
    for &count in &feature_count {
        if pp {
            let bitmap = r.take(count.div_ceil(8))?.to_vec();
            let min = r.f32()?;
            let max = r.f32()?;
            let blob = read_huffman(r)?;
            let symbols = huffman_decode(&blob)?;
            let survivors = dequantize(&QuantizedTensor {
                symbols,
                min,
                max,
            });
            let table = PrunedTable {
                len: count,
                bitmap,
                survivors,
            };
            let values = unprune(&table)?;
            field.params[offset..offset + count].copy_from_slice(&values);
        } else {
            for j in 0..count {
                field.params[offset + j] = r.f16()?;
            }
        }
        offset += count;
    }
    let mlp_start = field.param_count() - field.mlp_param_count();
    for j in 0..field.mlp_param_count() {
        field.params[mlp_start + j] = r.f16()?;
    }
    Ok(field)
}

// ---------------------------------------------------------------------------
// Top level

fn push_flags(out: &mut Vec<u8>, bundle: &SceneBundle, options: &EncodeOptions) {
    let mut flags = Vec::new();
    flags.push(options.pp as u8);
    flags.push(options.mask_mode.code());
    push_u64(&mut flags, options.input_n);
    push_u16(&mut flags, bundle.scale_codec.codebook_size as u16);
    flags.push(bundle.scale_codec.stages() as u8);
    let fc = &bundle.field.config;
    flags.push(fc.num_levels as u8);
    flags.push(fc.features_per_level as u8);
    push_u32(&mut flags, fc.base_resolution);
    push_u32(&mut flags, fc.max_resolution);
    push_u64(&mut flags, fc.max_hashmap as u64);
    push_u16(&mut flags, fc.mlp_hidden as u16);
    flags.push(fc.mlp_layers as u8);
    push_u32(out, flags.len() as u32);
    out.extend_from_slice(&flags);
}

struct Flags {
    pp: bool,
    mask_mode: MaskMode,
    input_n: u64,
    codebook_size: usize,
    stages: usize,
    field_config: FieldConfig,
}

fn read_flags(r: &mut Reader) -> Result<Flags> {
    let len = r.u32()? as usize;
    let payload = r.take(len)?;
    let mut fr = Reader::new(payload);
    let pp = fr.u8()? != 0;
    let mask_mode = MaskMode::from_code(fr.u8()?)?;
    let input_n = fr.u64()?;
    let codebook_size = fr.u16()? as usize;
    let stages = fr.u8()? as usize;
    let field_config = FieldConfig {
        num_levels: fr.u8()? as usize,
        features_per_level: fr.u8()? as usize,
        base_resolution: fr.u32()?,
        max_resolution: fr.u32()?,
        max_hashmap: fr.u64()? as usize,
        mlp_hidden: fr.u16()? as usize,
        mlp_layers: fr.u8()? as usize,
    };
    Ok(Flags {
        pp,
        mask_mode,
        input_n,
        codebook_size,
        stages,
        field_config,
    })
}

/// Serialize a compressed scene. Deterministic: identical inputs give
/// identical bytes.
pub fn encode_file(bundle: &SceneBundle, options: &EncodeOptions) -> Result<Vec<u8>> {
    let n = bundle.positions.len();
    if bundle.opacities.len() != n {
        return Err(GsError::Config(format!(
            "{} opacities for {n} positions",
            bundle.opacities.len()
        )));
    }
    if n > 0 {
        for (name, stream, codec, dim) in [
            ("scale", bundle.scale_stream, bundle.scale_codec, 3),
            ("rotation", bundle.rotation_stream, bundle.rotation_codec, 4),
        ] {
            if stream.n != n {
                return Err(GsError::Config(format!(
                    "{name} index stream covers {} Gaussians, expected {n}",
                    stream.n
                )));
            }
            if codec.dim != dim {
                return Err(GsError::Config(format!(
                    "{name} codec dim {} (expected {dim})",
                    codec.dim
                )));
            }
        }
        if bundle.scale_codec.codebook_size != bundle.rotation_codec.codebook_size
            || bundle.scale_codec.stages() != bundle.rotation_codec.stages()
        {
            return Err(GsError::Config(
                "scale and rotation codecs must share C and L".into(),
            ));
        }
        if bundle.field.params.iter().any(|v| !v.is_finite()) {
            return Err(GsError::Config("field has non-finite parameters".into()));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u64(&mut out, n as u64);
    push_flags(&mut out, bundle, options);

    let write_block = |out: &mut Vec<u8>, payload: Vec<u8>| {
        push_u64(out, payload.len() as u64);
        out.extend_from_slice(&payload);
    };

    if n == 0 {
        for _ in 0..5 {
            write_block(&mut out, Vec::new());
        }
    } else {
        let mut positions = Vec::with_capacity(n * 6);
        for p in bundle.positions {
            for &c in p {
                push_f16(&mut positions, c);
            }
        }
        write_block(&mut out, positions);

        let mut opacities = Vec::new();
        if options.pp {
            let qt = quantize_u8(bundle.opacities)?;
            push_f32(&mut opacities, qt.min);
            push_f32(&mut opacities, qt.max);
            push_huffman(&mut opacities, &huffman_encode(&qt.symbols));
        } else {
            for &o in bundle.opacities {
                push_f16(&mut opacities, o);
            }
        }
        write_block(&mut out, opacities);

        write_block(
            &mut out,
            encode_codec_block(bundle.scale_codec, bundle.scale_stream, options.pp)?,
        );
        write_block(
            &mut out,
            encode_codec_block(bundle.rotation_codec, bundle.rotation_stream, options.pp)?,
        );
        write_block(&mut out, encode_field_block(bundle.field, options.pp));
    }

    let crc = crc32fast::hash(&out);
    push_u32(&mut out, crc);
    Ok(out)
}

/// Parse and verify a container, baking geometry back out.
pub fn decode_file(bytes: &[u8]) -> Result<DecodedScene> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 {
        return Err(GsError::Decode("file shorter than the fixed header".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored_crc != computed {
        return Err(GsError::Decode(format!(
            "checksum mismatch: stored {stored_crc:08x}, computed {computed:08x}"
        )));
    }

    let mut r = Reader::new(body);
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(GsError::Decode("bad magic: not a compact scene file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(GsError::Decode(format!(
            "unsupported container version {version} (expected {VERSION})"
        )));
    }
    let n = r.u64()? as usize;
    let flags = read_flags(&mut r)?;

    let read_block = |r: &mut Reader<'_>| -> Result<Vec<u8>> {
        let len = r.u64()? as usize;
        Ok(r.take(len)?.to_vec())
    };
    let pos_block = read_block(&mut r)?;
    let opa_block = read_block(&mut r)?;
    let scale_block = read_block(&mut r)?;
    let rot_block = read_block(&mut r)?;
    let field_block = read_block(&mut r)?;
    if !r.done() {
        return Err(GsError::Decode(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }

    if n == 0 {
        return Ok(DecodedScene {
            positions: Vec::new(),
            opacities: Vec::new(),
            scales: Vec::new(),
            rotations: Vec::new(),
            field: None,
            pp: flags.pp,
            mask_mode: flags.mask_mode,
            input_n: flags.input_n,
        });
    }

    let mut pr = Reader::new(&pos_block);
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push([pr.f16()?, pr.f16()?, pr.f16()?]);
    }

    let mut or = Reader::new(&opa_block);
    let opacities = if flags.pp {
        let min = or.f32()?;
        let max = or.f32()?;
        let blob = read_huffman(&mut or)?;
        let symbols = huffman_decode(&blob)?;
        if symbols.len() != n {
            return Err(GsError::Decode(format!(
                "opacity stream decoded {} values for {n} Gaussians",
                symbols.len()
            )));
        }
        dequantize(&QuantizedTensor { symbols, min, max })
    } else {
        let mut o = Vec::with_capacity(n);
        for _ in 0..n {
            o.push(or.f16()?);
        }
        o
    };

    let mut sr = Reader::new(&scale_block);
    let (scale_codec, scale_stream) =
        decode_codec_block(&mut sr, 3, flags.codebook_size, flags.stages, n, flags.pp)?;
    let scale_flat = rvq_decode(&scale_stream, &scale_codec, flags.stages)?;
    let scales: Vec<[f64; 3]> = scale_flat
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();

    let mut rr = Reader::new(&rot_block);
    let (rot_codec, rot_stream) =
        decode_codec_block(&mut rr, 4, flags.codebook_size, flags.stages, n, flags.pp)?;
    let rot_flat = rvq_decode(&rot_stream, &rot_codec, flags.stages)?;
    let mut rotations = Vec::with_capacity(n);
    for c in rot_flat.chunks_exact(4) {
        let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2] + c[3] * c[3]).sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(GsError::Decode(
                "decoded rotation has zero or non-finite norm".into(),
            ));
        }
        rotations.push([c[0] / norm, c[1] / norm, c[2] / norm, c[3] / norm]);
    }

    let mut fr = Reader::new(&field_block);
    let field = decode_field_block(&mut fr, &flags.field_config, flags.pp)?;

    Ok(DecodedScene {
        positions,
        opacities,
        scales,
        rotations,
        field: Some(field),
        pp: flags.pp,
        mask_mode: flags.mask_mode,
        input_n: flags.input_n,
    })
}

// ---------------------------------------------------------------------------
// Storage accounting

/// Byte counts per channel; `total` always equals the exact file length.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageReport {
    pub n: u64,
    pub input_n: u64,
    pub pp: bool,
    pub positions: usize,
    pub opacities: usize,
    pub scale: usize,
    pub rotation: usize,
    pub hash: usize,
    pub mlp: usize,
    pub overhead: usize,
    pub total: usize,
    /// 59 f32 per input Gaussian; `None` when the input count is unknown.
    pub baseline: Option<u64>,
    pub ratio: Option<f64>,
}

/// Per-channel storage breakdown of a container file.
pub fn stats(bytes: &[u8]) -> Result<StorageReport> {
    // Decode validates the checksum and structure; sizes come from a
    // lightweight reparse of the block lengths.
    let (body, _) = bytes.split_at(bytes.len().saturating_sub(4));
    let mut r = Reader::new(body);
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(GsError::Decode("bad magic: not a compact scene file".into()));
    }
    let _version = r.u32()?;
    let n = r.u64()?;
    let flags = read_flags(&mut r)?;
    let mut sizes = [0usize; 5];
    for s in &mut sizes {
        let len = r.u64()? as usize;
        r.take(len)?;
        *s = len;
    }
    if !r.done() {
        return Err(GsError::Decode(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }

    let mlp_bytes = if sizes[4] == 0 {
        0
    } else {
        let dims = flags.field_config.layer_dims();
        dims.iter().map(|(i, o)| i * o + o).sum::<usize>() * 2
    };
    if mlp_bytes > sizes[4] {
        return Err(GsError::Decode(
            "field block smaller than its own MLP weights".into(),
        ));
    }
    let channel_sum: usize = sizes.iter().sum();
    let overhead = bytes.len() - channel_sum;
    let baseline = (flags.input_n > 0).then_some(BASELINE_FLOATS * 4 * flags.input_n);
    let ratio = baseline.map(|b| b as f64 / bytes.len() as f64);
    Ok(StorageReport {
        n,
        input_n: flags.input_n,
        pp: flags.pp,
        positions: sizes[0],
        opacities: sizes[1],
        scale: sizes[2],
        rotation: sizes[3],
        hash: sizes[4] - mlp_bytes,
        mlp: mlp_bytes,
        overhead,
        total: bytes.len(),
        baseline,
        ratio,
    })
}

/// Predicted storage for the non-post-processed format: pure arithmetic,
/// exact against [`encode_file`] output for the same shapes.
pub fn predict_sizes(
    n: u64,
    codebook_size: usize,
    stages: usize,
    field_config: &FieldConfig,
) -> StorageReport {
    let bits = index_bits(codebook_size) as usize;
    let stage_bytes = (n as usize * bits).div_ceil(8);
    let (positions, opacities, scale, rotation, hash, mlp) = if n == 0 {
        (0, 0, 0, 0, 0, 0)
    } else {
        let scale = stages * codebook_size * 3 * 4 + stages * stage_bytes;
        let rotation = stages * codebook_size * 4 * 4 + stages * stage_bytes;
        let hash: usize = field_config
            .level_resolutions()
            .iter()
            .map(|&res| {
                let (slots, _) = crate::field::level_slots(res, field_config.max_hashmap);
                slots * field_config.features_per_level * 2
            })
            .sum();
        let mlp = field_config
            .layer_dims()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum::<usize>()
            * 2;
        (n as usize * 6, n as usize * 2, scale, rotation, hash, mlp)
    };
    // magic + version + N + flags prefix/payload + five u64 block prefixes
    // + crc.
    let overhead = 8 + 4 + 8 + (4 + 34) + 5 * 8 + 4;
    let total = positions + opacities + scale + rotation + hash + mlp + overhead;
    StorageReport {
        n,
        input_n: 0,
        pp: false,
        positions,
        opacities,
        scale,
        rotation,
        hash,
        mlp,
        overhead,
        total,
        baseline: None,
        ratio: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::canonicalize_quaternion;
    use crate::field::FieldConfig;
    use crate::rvq::{encode as rvq_encode, train_rvq, RvqTrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        positions: Vec<[f64; 3]>,
        opacities: Vec<f64>,
        scales_flat: Vec<f64>,
        scale_codec: RvqCodec,
        scale_stream: IndexStream,
        rotation_codec: RvqCodec,
        rotation_stream: IndexStream,
        field: ColorField,
    }

    fn field_config() -> FieldConfig {
        FieldConfig {
            num_levels: 3,
            features_per_level: 2,
            base_resolution: 4,
            max_resolution: 16,
            max_hashmap: 1 << 8,
            mlp_hidden: 8,
            mlp_layers: 2,
        }
    }

    fn fixture(n: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect();
        let opacities: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let scales_flat: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0.01..0.5)).collect();
        let rotations_flat: Vec<f64> = (0..n)
            .flat_map(|_| {
                canonicalize_quaternion([
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ])
            })
            .collect();
        let rvq_config = RvqTrainConfig {
            codebook_size: 8,
            stages: 2,
            refine_iters: 10,
            seed,
            ..Default::default()
        };
        let (scale_codec, scale_stream) = train_rvq(&scales_flat, 3, &rvq_config).unwrap();
        let (rotation_codec, rotation_stream) =
            train_rvq(&rotations_flat, 4, &rvq_config).unwrap();
        let mut field = ColorField::new(field_config(), seed).unwrap();
        // Widen table values so pruning keeps a mixed population.
        let mlp_start = field.param_count() - field.mlp_param_count();
        let mut frng = ChaCha8Rng::seed_from_u64(seed + 1);
        for v in &mut field.params[..mlp_start] {
            *v = frng.random_range(-0.5..0.5);
        }
        Fixture {
            positions,
            opacities,
            scales_flat,
            scale_codec,
            scale_stream,
            rotation_codec,
            rotation_stream,
            field,
        }
    }

    fn bundle(f: &Fixture) -> SceneBundle<'_> {
        SceneBundle {
            positions: &f.positions,
            opacities: &f.opacities,
            scale_codec: &f.scale_codec,
            scale_stream: &f.scale_stream,
            rotation_codec: &f.rotation_codec,
            rotation_stream: &f.rotation_stream,
            field: &f.field,
        }
    }

    fn options(pp: bool) -> EncodeOptions {
        EncodeOptions {
            pp,
            mask_mode: MaskMode::Both,
            input_n: 500,
        }
    }

    /// Codebooks as the decoder sees them: rounded through f32.
    fn f32_codec(codec: &RvqCodec) -> RvqCodec {
        RvqCodec {
            dim: codec.dim,
            codebook_size: codec.codebook_size,
            codebooks: codec
                .codebooks
                .iter()
                .map(|cb| cb.iter().map(|&v| v as f32 as f64).collect())
                .collect(),
        }
    }

    #[test]
    fn roundtrip_meets_every_precision_bound() {
        let f = fixture(200, 1);
        let bytes = encode_file(&bundle(&f), &options(false)).unwrap();
        let scene = decode_file(&bytes).unwrap();
        assert_eq!(scene.len(), 200);
        assert_eq!(scene.input_n, 500);

        // Positions: f16 relative error ≤ 2⁻¹¹.
        for (a, b) in f.positions.iter().zip(&scene.positions) {
            for c in 0..3 {
                let rel = (a[c] - b[c]).abs() / a[c].abs().max(6.1e-5);
                assert!(rel <= 1.0 / 2048.0, "position {a:?} decoded {b:?}");
            }
        }
        // Opacities: same f16 bound.
        for (a, b) in f.opacities.iter().zip(&scene.opacities) {
            assert!((a - b).abs() / a.abs().max(6.1e-5) <= 1.0 / 2048.0);
        }
        // Scales: exactly the R-VQ reconstruction under f32 codebooks.
        let expect =
            rvq_decode(&f.scale_stream, &f32_codec(&f.scale_codec), 2).unwrap();
        for (i, s) in scene.scales.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(s[c].to_bits(), expect[i * 3 + c].to_bits());
            }
        }
        // Rotations: renormalized f32-codebook reconstruction.
        let expect =
            rvq_decode(&f.rotation_stream, &f32_codec(&f.rotation_codec), 2).unwrap();
        for (i, q) in scene.rotations.iter().enumerate() {
            let raw = &expect[i * 4..(i + 1) * 4];
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..3 {
                assert!((q[c] - raw[c] / norm).abs() < 1e-12);
            }
            let n2: f64 = q.iter().map(|v| v * v).sum();
            assert!((n2 - 1.0).abs() < 1e-12);
        }
        // Field: f16 bound on every parameter.
        let field = scene.field.unwrap();
        for (a, b) in f.field.params.iter().zip(&field.params) {
            assert!((a - b).abs() / a.abs().max(6.1e-5) <= 1.0 / 2048.0);
        }
    }

    #[test]
    fn post_processed_roundtrip_respects_quantization_bounds() {
        let f = fixture(300, 2);
        let bytes = encode_file(&bundle(&f), &options(true)).unwrap();
        let scene = decode_file(&bytes).unwrap();

        // Opacity: within half a quantization step.
        let omin = f.opacities.iter().copied().fold(f64::INFINITY, f64::min) as f32 as f64;
        let omax = f
            .opacities
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max) as f32 as f64;
        let step = (omax - omin) / 255.0;
        for (a, b) in f.opacities.iter().zip(&scene.opacities) {
            assert!((a - b).abs() <= step / 2.0 + 1e-6, "{a} decoded as {b}");
        }

        // Index streams decode exactly.
        let s_exp = rvq_encode(&f.scales_flat, &f.scale_codec).unwrap();
        let scale_expect = rvq_decode(&s_exp, &f32_codec(&f.scale_codec), 2).unwrap();
        for (i, s) in scene.scales.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(s[c].to_bits(), scale_expect[i * 3 + c].to_bits());
            }
        }

        // Hash tables: pruned values decode to zero, survivors within half a
        // step of their level's quantizer.
        let field = scene.field.unwrap();
        for l in 0..f.field.resolutions.len() {
            let orig = f.field.table(l);
            let got = field.table(l);
            let survivors: Vec<f64> = orig
                .iter()
                .copied()
                .filter(|v| v.abs() >= HASH_PRUNE_THRESHOLD)
                .collect();
            if survivors.is_empty() {
                assert!(got.iter().all(|&v| v == 0.0));
                continue;
            }
            let min = survivors.iter().copied().fold(f64::INFINITY, f64::min) as f32 as f64;
            let max = survivors
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max) as f32 as f64;
            let step = (max - min) / 255.0;
            for (a, b) in orig.iter().zip(got) {
                if a.abs() < HASH_PRUNE_THRESHOLD {
                    assert_eq!(*b, 0.0);
                } else {
                    assert!((a - b).abs() <= step / 2.0 + 1e-6);
                }
            }
        }
        assert!(scene.pp);
    }

    #[test]
    fn encoding_is_deterministic() {
        let f = fixture(150, 3);
        for pp in [false, true] {
            let a = encode_file(&bundle(&f), &options(pp)).unwrap();
            let b = encode_file(&bundle(&f), &options(pp)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_scene_writes_a_header_only_file() {
        let f = fixture(1, 4);
        let empty = SceneBundle {
            positions: &[],
            opacities: &[],
            ..bundle(&f)
        };
        let bytes = encode_file(&empty, &options(false)).unwrap();
        assert!(bytes.len() < 128, "header-only file is {} bytes", bytes.len());
        let scene = decode_file(&bytes).unwrap();
        assert!(scene.is_empty());
        assert!(scene.field.is_none());

        let report = stats(&bytes).unwrap();
        assert_eq!(report.total, bytes.len());
        assert_eq!(report.positions + report.opacities, 0);
    }

    #[test]
    fn corruption_is_rejected_with_structured_errors() {
        let f = fixture(50, 5);
        let bytes = encode_file(&bundle(&f), &options(false)).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_file(&bad_magic), Err(GsError::Decode(_))));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xFF;
        assert!(matches!(decode_file(&flipped), Err(GsError::Decode(_))));

        let truncated = &bytes[..bytes.len() / 3];
        assert!(matches!(decode_file(truncated), Err(GsError::Decode(_))));
    }

    #[test]
    fn stats_accounts_for_every_byte() {
        let f = fixture(120, 6);
        for pp in [false, true] {
            let bytes = encode_file(&bundle(&f), &options(pp)).unwrap();
            let report = stats(&bytes).unwrap();
            assert_eq!(report.total, bytes.len());
            assert_eq!(
                report.positions
                    + report.opacities
                    + report.scale
                    + report.rotation
                    + report.hash
                    + report.mlp
                    + report.overhead,
                report.total
            );
            assert_eq!(report.n, 120);
            assert_eq!(report.baseline, Some(59 * 4 * 500));
            let ratio = report.ratio.unwrap();
            assert!((ratio - 59.0 * 4.0 * 500.0 / bytes.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn predicted_sizes_match_an_actual_encoding_exactly() {
        let f = fixture(137, 7);
        let bytes = encode_file(&bundle(&f), &options(false)).unwrap();
        let actual = stats(&bytes).unwrap();
        let predicted = predict_sizes(137, 8, 2, &field_config());
        assert_eq!(predicted.positions, actual.positions);
        assert_eq!(predicted.opacities, actual.opacities);
        assert_eq!(predicted.scale, actual.scale);
        assert_eq!(predicted.rotation, actual.rotation);
        assert_eq!(predicted.hash, actual.hash);
        assert_eq!(predicted.mlp, actual.mlp);
        assert_eq!(predicted.overhead, actual.overhead);
        assert_eq!(predicted.total, actual.total);
    }

    #[test]
    fn mismatched_streams_are_rejected_at_encode_time() {
        let f = fixture(60, 8);
        let g = fixture(61, 9);
        let mixed = SceneBundle {
            scale_stream: &g.scale_stream,
            ..bundle(&f)
        };
        assert!(encode_file(&mixed, &options(false)).is_err());
    }
}
