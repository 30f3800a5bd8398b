//! Camera poses and the JSON camera file.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{GsError, Result};

/// A pinhole view: world-to-camera rotation, camera center in world units,
/// focal lengths and principal point in pixels.
#[derive(Debug, Clone)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub size: [u32; 2],
}

impl CameraPose {
    /// Build a pose from plain arrays (rotation row-major, world-to-camera).
    pub fn from_parts(
        rotation: [f64; 9],
        center: [f64; 3],
        focal: [f64; 2],
        principal: [f64; 2],
        size: [u32; 2],
    ) -> CameraPose {
        CameraPose {
            rotation: Matrix3::from_row_slice(&rotation),
            center: Vector3::new(center[0], center[1], center[2]),
            focal,
            principal,
            size,
        }
    }

    /// World point to camera coordinates (z is depth along the view axis).
    pub fn to_camera(&self, p: [f64; 3]) -> Vector3<f64> {
        self.rotation * (Vector3::new(p[0], p[1], p[2]) - self.center)
    }

    /// Unit direction from the camera center toward a world point.
    pub fn direction_to(&self, p: [f64; 3]) -> [f64; 3] {
        let d = Vector3::new(p[0], p[1], p[2]) - self.center;
        let n = d.norm();
        if n > 0.0 {
            [d.x / n, d.y / n, d.z / n]
        } else {
            [0.0, 0.0, 1.0]
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let should_be_identity = self.rotation * self.rotation.transpose();
        let dev = (should_be_identity - Matrix3::identity()).abs().max();
        if dev > 1e-6 {
            return Err(GsError::Camera(format!(
                "view {index}: rotation departs from orthonormal by {dev:.2e}"
            )));
        }
        if self.focal[0] <= 0.0 || self.focal[1] <= 0.0 {
            return Err(GsError::Camera(format!(
                "view {index}: focal lengths must be positive, got {:?}",
                self.focal
            )));
        }
        if self.size[0] == 0 || self.size[1] == 0 {
            return Err(GsError::Camera(format!(
                "view {index}: image size must be at least 1x1"
            )));
        }
        Ok(())
    }
}

/// On-disk form of one view: rotation as 9 row-major floats.
#[derive(Debug, Serialize, Deserialize)]
struct CameraJson {
    rotation: Vec<f64>,
    center: [f64; 3],
    focal: [f64; 2],
    principal: [f64; 2],
    size: [u32; 2],
}

/// Parse a camera JSON file (an array of views).
pub fn load_cameras(path: &Path) -> Result<Vec<CameraPose>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GsError::Camera(format!("{}: {e}", path.display())))?;
    let raw: Vec<CameraJson> =
        serde_json::from_str(&text).map_err(|e| GsError::Camera(format!("bad JSON: {e}")))?;
    let mut out = Vec::with_capacity(raw.len());
    for (i, cam) in raw.into_iter().enumerate() {
        if cam.rotation.len() != 9 {
            return Err(GsError::Camera(format!(
                "view {i}: rotation must have 9 entries, got {}",
                cam.rotation.len()
            )));
        }
        let pose = CameraPose {
            rotation: Matrix3::from_row_slice(&cam.rotation),
            center: Vector3::new(cam.center[0], cam.center[1], cam.center[2]),
            focal: cam.focal,
            principal: cam.principal,
            size: cam.size,
        };
        pose.validate(i)?;
        out.push(pose);
    }
    Ok(out)
}

/// Write poses as the JSON camera file.
pub fn save_cameras(poses: &[CameraPose], path: &Path) -> Result<()> {
    let raw: Vec<CameraJson> = poses
        .iter()
        .map(|p| CameraJson {
            rotation: p.rotation.transpose().as_slice().to_vec(),
            center: [p.center.x, p.center.y, p.center.z],
            focal: p.focal,
            principal: p.principal,
            size: p.size,
        })
        .collect();
    let text = serde_json::to_string_pretty(&raw)
        .map_err(|e| GsError::Camera(format!("serialize: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn look_at_origin(center: [f64; 3]) -> CameraPose {
        // Build an orthonormal frame with +z looking from center to origin.
        let c = Vector3::new(center[0], center[1], center[2]);
        let forward = (-c).normalize();
        let mut up = Vector3::new(0.0, 1.0, 0.0);
        if forward.dot(&up).abs() > 0.99 {
            up = Vector3::new(1.0, 0.0, 0.0);
        }
        let right = up.cross(&forward).normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        CameraPose {
            rotation,
            center: c,
            focal: [100.0, 100.0],
            principal: [64.0, 64.0],
            size: [128, 128],
        }
    }

    #[test]
    fn json_roundtrip_preserves_poses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cameras.json");
        let poses = vec![look_at_origin([3.0, 1.0, -2.0]), look_at_origin([0.5, 4.0, 1.0])];
        save_cameras(&poses, &path).unwrap();
        let loaded = load_cameras(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in poses.iter().zip(&loaded) {
            assert!((a.rotation - b.rotation).abs().max() < 1e-12);
            assert!((a.center - b.center).norm() < 1e-12);
            assert_eq!(a.size, b.size);
        }
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"[{"rotation":[1,0,0, 0,2,0, 0,0,1],"center":[0,0,0],"focal":[50,50],"principal":[32,32],"size":[64,64]}]"#,
        )
        .unwrap();
        let err = load_cameras(&path).unwrap_err();
        assert!(err.to_string().contains("orthonormal"));
    }

    #[test]
    fn camera_frame_looks_at_origin() {
        let pose = look_at_origin([0.0, 0.0, -5.0]);
        let cam = pose.to_camera([0.0, 0.0, 0.0]);
        assert!((cam.z - 5.0).abs() < 1e-12);
        assert!(cam.x.abs() < 1e-12 && cam.y.abs() < 1e-12);
        let d = pose.direction_to([0.0, 0.0, 0.0]);
        assert!((d[2] - 1.0).abs() < 1e-12);
    }
}
