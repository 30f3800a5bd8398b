//! Optional storage post-processing: 8-bit min-max quantization,
//! sub-threshold pruning of hash-table values, canonical Huffman coding, and
//! MSB-first bit-packing.
//!
//! Every pair here is an exact inverse of its counterpart (Huffman, bitpack)
//! or carries an explicit error bound (quantization: half a step per value).
//! Pruning drops values by magnitude and records survivors in a bitmap, one
//! bit per value; reconstruction substitutes zero.

use crate::error::{GsError, Result};
use crate::field::ColorField;
use crate::util::round_half_away;

pub const HASH_PRUNE_THRESHOLD: f64 = 0.1;
const MAX_CODE_LEN: usize = 63;

/// Values mapped to 0..=255 between a stored min/max pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub symbols: Vec<u8>,
    pub min: f32,
    pub max: f32,
}

/// 8-bit min-max quantization: `q = round(255·(x−min)/(max−min))`, rounding
/// half away from zero. A constant tensor quantizes to all-zero symbols.
pub fn quantize_u8(values: &[f64]) -> Result<QuantizedTensor> {
    if values.is_empty() {
        return Err(GsError::Config("cannot quantize an empty tensor".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(GsError::Config(format!("cannot quantize non-finite value {bad}")));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min) as f32;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) as f32;
    let lo = min as f64;
    let span = max as f64 - lo;
    let symbols = if span <= 0.0 {
        vec![0u8; values.len()]
    } else {
        values
            .iter()
            .map(|&x| round_half_away(255.0 * (x - lo) / span).clamp(0.0, 255.0) as u8)
            .collect()
    };
    Ok(QuantizedTensor { symbols, min, max })
}

/// Inverse map: `x̂ = min + q/255·(max−min)`.
pub fn dequantize(qt: &QuantizedTensor) -> Vec<f64> {
    let lo = qt.min as f64;
    let span = qt.max as f64 - lo;
    qt.symbols
        .iter()
        .map(|&q| lo + q as f64 / 255.0 * span)
        .collect()
}

/// One pruned value tensor: an MSB-first survivor bitmap over the original
/// positions plus the surviving values in order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedTable {
    pub len: usize,
    pub bitmap: Vec<u8>,
    pub survivors: Vec<f64>,
}

/// Drop every value with `|v| < threshold`, recording survivors in the
/// bitmap (bit 7 of byte 0 is value 0).
pub fn prune_values(values: &[f64], threshold: f64) -> PrunedTable {
    let mut bitmap = vec![0u8; values.len().div_ceil(8)];
    let mut survivors = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        if v.abs() >= threshold {
            bitmap[i / 8] |= 0x80 >> (i % 8);
            survivors.push(v);
        }
    }
    PrunedTable {
        len: values.len(),
        bitmap,
        survivors,
    }
}

/// Reconstruct the dense tensor, substituting zero for pruned positions.
pub fn unprune(table: &PrunedTable) -> Result<Vec<f64>> {
    if table.bitmap.len() < table.len.div_ceil(8) {
        return Err(GsError::Decode(format!(
            "survivor bitmap of {} bytes cannot cover {} values",
            table.bitmap.len(),
            table.len
        )));
    }
    let mut out = vec![0.0; table.len];
    let mut next = 0usize;
    for (i, slot) in out.iter_mut().enumerate() {
        if table.bitmap[i / 8] & (0x80 >> (i % 8)) != 0 {
            let &v = table.survivors.get(next).ok_or_else(|| {
                GsError::Decode("survivor bitmap claims more values than stored".into())
            })?;
            *slot = v;
            next += 1;
        }
    }
    if next != table.survivors.len() {
        return Err(GsError::Decode(format!(
            "bitmap selects {next} survivors but {} were stored",
            table.survivors.len()
        )));
    }
    Ok(out)
}

/// Prune every hash-table level of a field at the given magnitude threshold.
pub fn prune_hash(field: &ColorField, threshold: f64) -> Vec<PrunedTable> {
    (0..field.resolutions.len())
        .map(|l| prune_values(field.table(l), threshold))
        .collect()
}

/// Canonical Huffman coding of a byte stream.
#[derive(Debug, Clone, PartialEq)]
pub struct HuffmanBlob {
    /// Code length per symbol; zero means the symbol does not occur.
    pub lengths: [u8; 256],
    pub count: u64,
    pub payload: Vec<u8>,
}

impl HuffmanBlob {
    /// Serialized size: the 256-byte length table, the u64 count, and the
    /// padded bitstream.
    pub fn stored_size(&self) -> usize {
        256 + 8 + self.payload.len()
    }
}

/// Code lengths from symbol frequencies via the standard two-queue Huffman
/// construction. Falls back to flat 8-bit codes in the (pathological) case
/// where a depth would exceed the 63-bit decode accumulator.
fn code_lengths(freqs: &[u64; 256]) -> [u8; 256] {
    let mut lengths = [0u8; 256];
    let present: Vec<usize> = (0..256).filter(|&s| freqs[s] > 0).collect();
    match present.len() {
        0 => return lengths,
        1 => {
            lengths[present[0]] = 1;
            return lengths;
        }
        _ => {}
    }

    // Node arena: leaves first, then internal nodes; deterministic heap order
    // by (frequency, creation index).
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let mut parents: Vec<usize> = vec![usize::MAX; present.len()];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = present
        .iter()
        .enumerate()
        .map(|(i, &s)| Reverse((freqs[s], i)))
        .collect();
    let mut next_id = present.len();
    while heap.len() > 1 {
        let Reverse((fa, a)) = heap.pop().unwrap();
        let Reverse((fb, b)) = heap.pop().unwrap();
        parents.push(usize::MAX);
        parents[a] = next_id;
        parents[b] = next_id;
        heap.push(Reverse((fa + fb, next_id)));
        next_id += 1;
    }
    for (i, &s) in present.iter().enumerate() {
        let mut depth = 0u32;
        let mut node = i;
        while parents[node] != usize::MAX {
            node = parents[node];
            depth += 1;
        }
        if depth as usize > MAX_CODE_LEN {
            let mut flat = [0u8; 256];
            for &s in &present {
                flat[s] = 8;
            }
            // A flat table is only a prefix code when all 256 symbols share
            // it; extend to the full alphabet.
            return if present.len() == 256 { flat } else { full_flat() };
        }
        lengths[s] = depth as u8;
    }
    lengths
}

fn full_flat() -> [u8; 256] {
    [8u8; 256]
}

/// Canonical code assignment: symbols sorted by (length, value) receive
/// consecutive codes. Returns per-symbol codes alongside the sorted order.
fn canonical_codes(lengths: &[u8; 256]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..256).filter(|&s| lengths[s] > 0).collect();
    order.sort_by_key(|&s| (lengths[s], s));
    let mut codes = vec![0u64; 256];
    let mut code = 0u64;
    let mut prev_len = 0u8;
    for &s in &order {
        code <<= lengths[s] - prev_len;
        codes[s] = code;
        code += 1;
        prev_len = lengths[s];
    }
    (codes, order)
}

/// Encode a byte stream with canonical Huffman codes (MSB-first bitstream).
pub fn huffman_encode(symbols: &[u8]) -> HuffmanBlob {
    let mut freqs = [0u64; 256];
    for &s in symbols {
        freqs[s as usize] += 1;
    }
    let lengths = code_lengths(&freqs);
    let (codes, _) = canonical_codes(&lengths);

    let mut payload = Vec::new();
    let mut acc = 0u64;
    let mut nbits = 0u32;
    for &s in symbols {
        let len = lengths[s as usize] as u32;
        acc = (acc << len) | codes[s as usize];
        nbits += len;
        while nbits >= 8 {
            nbits -= 8;
            payload.push((acc >> nbits) as u8);
        }
    }
    if nbits > 0 {
        payload.push((acc << (8 - nbits)) as u8);
    }
    HuffmanBlob {
        lengths,
        count: symbols.len() as u64,
        payload,
    }
}

/// Decode a canonical Huffman blob; errors when the payload runs out before
/// `count` symbols or the length table is not a prefix code.
pub fn huffman_decode(blob: &HuffmanBlob) -> Result<Vec<u8>> {
    if blob.count == 0 {
        return Ok(Vec::new());
    }
    // Kraft check rejects tables that cannot be prefix codes.
    let kraft: u128 = blob
        .lengths
        .iter()
        .filter(|&&l| l > 0)
        .map(|&l| 1u128 << (MAX_CODE_LEN as u32 + 1 - l as u32))
        .sum();
    if kraft > 1u128 << (MAX_CODE_LEN + 1) || blob.lengths.iter().any(|&l| l as usize > MAX_CODE_LEN) {
        return Err(GsError::Decode("Huffman length table violates the Kraft bound".into()));
    }

    let (codes, order) = canonical_codes(&blob.lengths);
    if order.is_empty() {
        return Err(GsError::Decode("Huffman table has no symbols but count > 0".into()));
    }
    // Per-length first code and range into the canonical order.
    let mut first = [0u64; MAX_CODE_LEN + 1];
    let mut span = [0usize; MAX_CODE_LEN + 1];
    let mut start = [0usize; MAX_CODE_LEN + 1];
    {
        let mut i = 0;
        while i < order.len() {
            let len = blob.lengths[order[i]] as usize;
            let mut j = i;
            while j < order.len() && blob.lengths[order[j]] as usize == len {
                j += 1;
            }
            first[len] = codes[order[i]];
            start[len] = i;
            span[len] = j - i;
            i = j;
        }
    }

    let mut out = Vec::with_capacity(blob.count as usize);
    let mut code = 0u64;
    let mut len = 0usize;
    let mut bit_pos = 0usize;
    let total_bits = blob.payload.len() * 8;
    while (out.len() as u64) < blob.count {
        if bit_pos >= total_bits {
            return Err(GsError::Decode(format!(
                "Huffman payload exhausted after {} of {} symbols",
                out.len(),
                blob.count
            )));
        }
        let bit = (blob.payload[bit_pos / 8] >> (7 - bit_pos % 8)) & 1;
        bit_pos += 1;
        code = (code << 1) | bit as u64;
        len += 1;
        if len > MAX_CODE_LEN {
            return Err(GsError::Decode("Huffman code longer than any table entry".into()));
        }
        if span[len] > 0 && code >= first[len] && code - first[len] < span[len] as u64 {
            out.push(order[start[len] + (code - first[len]) as usize] as u8);
            code = 0;
            len = 0;
        }
    }
    Ok(out)
}

/// Pack indices MSB-first at a fixed bit width.
pub fn bitpack(indices: &[u32], bits: u32) -> Result<Vec<u8>> {
    if bits == 0 || bits > 32 {
        return Err(GsError::Config(format!("bit width {bits} out of range 1..=32")));
    }
    let limit = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
    let mut out = Vec::with_capacity((indices.len() * bits as usize).div_ceil(8));
    let mut acc = 0u64;
    let mut nbits = 0u32;
    for &idx in indices {
        if idx > limit {
            return Err(GsError::Config(format!("index {idx} does not fit in {bits} bits")));
        }
        acc = (acc << bits) | idx as u64;
        nbits += bits;
        while nbits >= 8 {
            nbits -= 8;
            out.push((acc >> nbits) as u8);
        }
    }
    if nbits > 0 {
        out.push((acc << (8 - nbits)) as u8);
    }
    Ok(out)
}

/// Inverse of [`bitpack`]; `count` is the number of indices to read.
pub fn bitunpack(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<u32>> {
    if bits == 0 || bits > 32 {
        return Err(GsError::Config(format!("bit width {bits} out of range 1..=32")));
    }
    if bytes.len() * 8 < count * bits as usize {
        return Err(GsError::Decode(format!(
            "{} bytes cannot hold {count} indices of {bits} bits",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut acc = 0u64;
    let mut nbits = 0u32;
    let mut pos = 0usize;
    for _ in 0..count {
        while nbits < bits {
            acc = (acc << 8) | bytes[pos] as u64;
            pos += 1;
            nbits += 8;
        }
        nbits -= bits;
        out.push(((acc >> nbits) & ((1u64 << bits) - 1)) as u32);
    }
    Ok(out)
}
