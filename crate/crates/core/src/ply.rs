//! Binary little-endian PLY ingest/export in the community splat layout.
//!
//! Vertices carry `x y z nx ny nz f_dc_0..2 f_rest_* opacity scale_0..2
//! rot_0..3` as float32 properties. Stored opacities are logits, stored
//! scales are logs; activations are applied on load and inverted on save.
//! The SH degree is deduced from the `f_rest_*` count (45 → degree 3, absent
//! → degree 0). Normals are read and ignored.

use crate::cloud::{canonicalize_quaternion, GaussianCloud};
use crate::error::{GsError, Result};
use crate::util::{logit, sigmoid};

/// Parse a splat PLY from bytes, applying activations.
pub fn load_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let (header_len, vertex_count, properties) = parse_header(bytes)?;

    let find = |name: &str| properties.iter().position(|p| p == name);
    let require = |name: &str| {
        find(name).ok_or_else(|| GsError::Ply(format!("missing required property {name}")))
    };

    let xyz = [require("x")?, require("y")?, require("z")?];
    let opacity = require("opacity")?;
    let scales = [require("scale_0")?, require("scale_1")?, require("scale_2")?];
    let rots = [
        require("rot_0")?,
        require("rot_1")?,
        require("rot_2")?,
        require("rot_3")?,
    ];
    let dc = [require("f_dc_0")?, require("f_dc_1")?, require("f_dc_2")?];

    let rest_count = properties
        .iter()
        .filter(|p| p.starts_with("f_rest_"))
        .count();
    if rest_count % 3 != 0 {
        return Err(GsError::Ply(format!(
            "f_rest count {rest_count} is not divisible by 3"
        )));
    }
    let sh_dim = 1 + rest_count / 3;
    if !matches!(sh_dim, 1 | 4 | 9 | 16) {
        return Err(GsError::Ply(format!(
            "f_rest count {rest_count} does not correspond to SH degree 0-3"
        )));
    }
    let mut rest = Vec::with_capacity(rest_count);
    for i in 0..rest_count {
        rest.push(require(&format!("f_rest_{i}"))?);
    }

    let stride = properties.len() * 4;
    let body = &bytes[header_len..];
    if body.len() < vertex_count * stride {
        return Err(GsError::Ply(format!(
            "body truncated: need {} bytes for {} vertices, have {}",
            vertex_count * stride,
            vertex_count,
            body.len()
        )));
    }

    let mut cloud = GaussianCloud {
        positions: Vec::with_capacity(vertex_count),
        opacities: Vec::with_capacity(vertex_count),
        scales: Vec::with_capacity(vertex_count),
        rotations: Vec::with_capacity(vertex_count),
        sh: Vec::with_capacity(vertex_count * 3 * sh_dim),
        sh_dim,
    };

    for v in 0..vertex_count {
        let row = &body[v * stride..(v + 1) * stride];
        let get = |idx: usize, name: &str| -> Result<f64> {
            let val = f32::from_le_bytes(row[idx * 4..idx * 4 + 4].try_into().unwrap()) as f64;
            if !val.is_finite() {
                return Err(GsError::Ply(format!("non-finite {name} at vertex {v}")));
            }
            Ok(val)
        };

        cloud.positions.push([
            get(xyz[0], "x")?,
            get(xyz[1], "y")?,
            get(xyz[2], "z")?,
        ]);
        cloud.opacities.push(sigmoid(get(opacity, "opacity")?));
        cloud.scales.push([
            get(scales[0], "scale_0")?.exp(),
            get(scales[1], "scale_1")?.exp(),
            get(scales[2], "scale_2")?.exp(),
        ]);
        cloud.rotations.push(canonicalize_quaternion([
            get(rots[0], "rot_0")?,
            get(rots[1], "rot_1")?,
            get(rots[2], "rot_2")?,
            get(rots[3], "rot_3")?,
        ]));
        // Channel-major coefficients: DC first, then the per-channel block of
        // higher-order terms.
        let per_channel = sh_dim - 1;
        for ch in 0..3 {
            cloud.sh.push(get(dc[ch], "f_dc")?);
            for j in 0..per_channel {
                cloud.sh.push(get(rest[ch * per_channel + j], "f_rest")?);
            }
        }
    }

    cloud.validate()?;
    Ok(cloud)
}

/// Serialize a cloud back to splat PLY bytes, inverting activations.
/// Opacities at exactly 0 or 1 are clamped into (0, 1) before the logit.
pub fn save_ply(cloud: &GaussianCloud) -> Result<Vec<u8>> {
    cloud.validate().map_err(|e| GsError::Ply(e.to_string()))?;
    let per_channel = cloud.sh_dim - 1;
    let rest_count = 3 * per_channel;

    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for name in ["x", "y", "z", "nx", "ny", "nz"] {
        header.push_str(&format!("property float {name}\n"));
    }
    for i in 0..3 {
        header.push_str(&format!("property float f_dc_{i}\n"));
    }
    for i in 0..rest_count {
        header.push_str(&format!("property float f_rest_{i}\n"));
    }
    header.push_str("property float opacity\n");
    for i in 0..3 {
        header.push_str(&format!("property float scale_{i}\n"));
    }
    for i in 0..4 {
        header.push_str(&format!("property float rot_{i}\n"));
    }
    header.push_str("end_header\n");

    let stride = (17 + rest_count) * 4;
    let mut out = Vec::with_capacity(header.len() + cloud.len() * stride);
    out.extend_from_slice(header.as_bytes());

    let push = |v: f64, out: &mut Vec<u8>| out.extend_from_slice(&(v as f32).to_le_bytes());
    for n in 0..cloud.len() {
        for &c in &cloud.positions[n] {
            push(c, &mut out);
        }
        for _ in 0..3 {
            push(0.0, &mut out); // normals: written as zeros, ignored on load
        }
        let sh = cloud.sh_at(n);
        for ch in 0..3 {
            push(sh[ch * cloud.sh_dim], &mut out);
        }
        for ch in 0..3 {
            for j in 1..cloud.sh_dim {
                push(sh[ch * cloud.sh_dim + j], &mut out);
            }
        }
        push(logit(cloud.opacities[n].clamp(1e-6, 1.0 - 1e-6)), &mut out);
        for &s in &cloud.scales[n] {
            push(s.ln(), &mut out);
        }
        for &q in &cloud.rotations[n] {
            push(q, &mut out);
        }
    }
    Ok(out)
}

/// Returns (header byte length, vertex count, property names in order).
fn parse_header(bytes: &[u8]) -> Result<(usize, usize, Vec<String>)> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| GsError::Ply("header has no end_header line".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| GsError::Ply("header is not valid UTF-8".into()))?
            .trim_end_matches('\r')
            .to_string();
        pos += nl + 1;
        let done = line == "end_header";
        lines.push(line);
        if done {
            break;
        }
        if pos >= bytes.len() {
            return Err(GsError::Ply("header has no end_header line".into()));
        }
    }

    if lines.first().map(String::as_str) != Some("ply") {
        return Err(GsError::Ply("missing ply magic line".into()));
    }
    if !lines
        .iter()
        .any(|l| l.trim() == "format binary_little_endian 1.0")
    {
        return Err(GsError::Ply(
            "only format binary_little_endian 1.0 is supported".into(),
        ));
    }

    let mut vertex_count: Option<usize> = None;
    let mut properties = Vec::new();
    let mut in_vertex_element = false;
    for line in &lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["element", "vertex", count] => {
                vertex_count = Some(count.parse().map_err(|_| {
                    GsError::Ply(format!("bad vertex count {count}"))
                })?);
                in_vertex_element = true;
            }
            ["element", ..] => in_vertex_element = false,
            ["property", ty, name] if in_vertex_element => {
                if *ty != "float" && *ty != "float32" {
                    return Err(GsError::Ply(format!(
                        "property {name} has type {ty}; only float32 is supported"
                    )));
                }
                properties.push((*name).to_string());
            }
            _ => {}
        }
    }
    let vertex_count =
        vertex_count.ok_or_else(|| GsError::Ply("missing element vertex line".into()))?;
    if properties.is_empty() {
        return Err(GsError::Ply("vertex element has no properties".into()));
    }
    Ok((pos, vertex_count, properties))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, sh_dim: usize, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = GaussianCloud {
            sh_dim,
            ..Default::default()
        };
        for _ in 0..n {
            cloud.positions.push([
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ]);
            cloud.opacities.push(rng.random_range(0.01..0.99));
            cloud.scales.push([
                rng.random_range(0.01..2.0),
                rng.random_range(0.01..2.0),
                rng.random_range(0.01..2.0),
            ]);
            cloud.rotations.push(canonicalize_quaternion([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]));
            for _ in 0..3 * sh_dim {
                cloud.sh.push(rng.random_range(-0.5..0.5));
            }
        }
        cloud
    }

    #[test]
    fn single_vertex_activations() {
        // Stored logit 0 → opacity 0.5; stored log-scale 0 → scale 1.
        let mut cloud = GaussianCloud {
            positions: vec![[1.0, 2.0, 3.0]],
            opacities: vec![0.5],
            scales: vec![[1.0, 1.0, 1.0]],
            rotations: vec![[1.0, 0.0, 0.0, 0.0]],
            sh: vec![0.1, 0.2, 0.3],
            sh_dim: 1,
        };
        let bytes = save_ply(&cloud).unwrap();
        let loaded = load_ply(&bytes).unwrap();
        assert!((loaded.opacities[0] - 0.5).abs() < 1e-7);
        assert!((loaded.scales[0][0] - 1.0).abs() < 1e-7);

        cloud.opacities[0] = 0.8;
        cloud.scales[0] = [2.0, 0.5, 1.0];
        let loaded = load_ply(&save_ply(&cloud).unwrap()).unwrap();
        assert!((loaded.opacities[0] - 0.8).abs() < 1e-6);
        assert!((loaded.scales[0][0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn roundtrip_reproduces_attributes() {
        for &(n, dim) in &[(40usize, 1usize), (25, 4), (10, 16)] {
            let cloud = random_cloud(n, dim, 42 + dim as u64);
            let loaded = load_ply(&save_ply(&cloud).unwrap()).unwrap();
            assert_eq!(loaded.len(), n);
            assert_eq!(loaded.sh_dim, dim);
            for i in 0..n {
                for k in 0..3 {
                    assert!((loaded.positions[i][k] - cloud.positions[i][k]).abs() < 1e-6);
                    assert!(
                        (loaded.scales[i][k] - cloud.scales[i][k]).abs()
                            < 1e-6 * cloud.scales[i][k].max(1.0)
                    );
                }
                assert!((loaded.opacities[i] - cloud.opacities[i]).abs() < 1e-6);
                for k in 0..4 {
                    assert!((loaded.rotations[i][k] - cloud.rotations[i][k]).abs() < 1e-6);
                }
            }
            for (a, b) in loaded.sh.iter().zip(&cloud.sh) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn extreme_opacities_are_clamped_not_rejected() {
        let mut cloud = random_cloud(2, 1, 9);
        cloud.opacities[0] = 0.0;
        cloud.opacities[1] = 1.0;
        let loaded = load_ply(&save_ply(&cloud).unwrap()).unwrap();
        assert!(loaded.opacities[0] > 0.0 && loaded.opacities[0] < 1e-5);
        assert!(loaded.opacities[1] < 1.0 && loaded.opacities[1] > 1.0 - 1e-5);
    }

    #[test]
    fn missing_property_is_named_in_error() {
        let cloud = random_cloud(1, 1, 3);
        let bytes = save_ply(&cloud).unwrap();
        let text = String::from_utf8_lossy(&bytes[..200]).to_string();
        let broken = String::from_utf8_lossy(&bytes)
            .replace("property float opacity\n", "");
        let _ = text;
        let err = load_ply(broken.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("opacity"), "{err}");
    }

    #[test]
    fn truncated_body_is_rejected() {
        let cloud = random_cloud(5, 1, 4);
        let bytes = save_ply(&cloud).unwrap();
        let err = load_ply(&bytes[..bytes.len() - 10]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn non_finite_values_are_rejected_with_property_name() {
        let cloud = random_cloud(1, 1, 5);
        let mut bytes = save_ply(&cloud).unwrap();
        // Corrupt the x coordinate of the first vertex with a NaN.
        let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        bytes[header_end..header_end + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = load_ply(&bytes).unwrap_err();
        assert!(err.to_string().contains('x'), "{err}");
    }
}
