//! Gaussian scene model and its companions: cameras, label vocabularies,
//! labeled point clouds and dense 2D target maps.

mod augment;
pub mod io;
pub mod synth;
mod transfer;

use std::path::PathBuf;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::autodiff::Tensor;

pub use augment::{augment, AugmentConfig, Similarity};
pub use synth::{synth_cameras, synth_scene, CameraRig, RoomSpec};
pub use transfer::{nearest_point_brute_force, transfer_labels, PointGrid};

/// Width of the per-Gaussian semantic vector.
pub const SEMANTIC_DIM: usize = 16;
/// Class id excluded from every loss and metric.
pub const IGNORE_LABEL: u16 = 65535;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("header declares {declared} records, payload holds {actual}")]
    CountMismatch { declared: u64, actual: u64 },
    #[error("record {index}: {field} out of range ({detail})")]
    InvariantViolation {
        index: usize,
        field: &'static str,
        detail: String,
    },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("room spec has no classes or a non-positive extent")]
    EmptySpec,
    #[error("point cloud is empty")]
    EmptyCloud,
}

/// One anisotropic 3D Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    /// Per-axis standard deviation in meters.
    pub scale: [f64; 3],
    /// Post-activation opacity in (0, 1).
    pub opacity: f64,
    pub color: [f64; 3],
    /// View-independent semantic vector.
    pub semantic: [f64; SEMANTIC_DIM],
    pub label: u16,
    pub instance: u32,
}

impl Default for Gaussian {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [0.05; 3],
            opacity: 0.5,
            color: [0.5; 3],
            semantic: [0.0; SEMANTIC_DIM],
            label: IGNORE_LABEL,
            instance: 0,
        }
    }
}

pub(crate) fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

impl Gaussian {
    pub fn position_vec(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.rotation)
    }

    /// `Σ = R · diag(scale²) · Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = Matrix3::from_diagonal(&Vector3::from(self.scale).map(|v| v * v));
        r * s * r.transpose()
    }

    /// Adapter attributes: quaternion (4), color (3), scale (3), opacity (1).
    pub fn attributes(&self) -> [f64; 11] {
        let mut a = [0.0; 11];
        a[..4].copy_from_slice(&self.rotation);
        a[4..7].copy_from_slice(&self.color);
        a[7..10].copy_from_slice(&self.scale);
        a[10] = self.opacity;
        a
    }

    /// Checks every field invariant. Quaternion norm must be within 1e-6 of 1.
    pub fn validate(&self, index: usize) -> Result<(), SceneError> {
        let bad = |field: &'static str, detail: String| SceneError::InvariantViolation { index, field, detail };
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(bad("position", format!("{:?}", self.position)));
        }
        let norm = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(bad("rotation", format!("norm {norm}")));
        }
        if !self.scale.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(bad("scale", format!("{:?}", self.scale)));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(bad("opacity", format!("{}", self.opacity)));
        }
        if !self.color.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(bad("color", format!("{:?}", self.color)));
        }
        if !self.semantic.iter().all(|v| v.is_finite()) {
            return Err(bad("semantic", "non-finite".into()));
        }
        Ok(())
    }
}

/// Ordered Gaussian set. Order is preserved through every file round trip.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub scene_id: String,
    pub domain_tag: String,
    pub has_semantics: bool,
    pub has_labels: bool,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self {
            gaussians,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn labels(&self) -> Vec<u16> {
        self.gaussians.iter().map(|g| g.label).collect()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.gaussians.iter().enumerate().try_for_each(|(i, g)| g.validate(i))
    }

    /// `N × 16` matrix of semantic vectors.
    pub fn semantics_tensor(&self) -> Tensor {
        let data = self.gaussians.iter().flat_map(|g| g.semantic).collect();
        Tensor::matrix(self.len(), SEMANTIC_DIM, data).expect("N×16")
    }

    /// `N × 11` matrix of adapter attributes.
    pub fn attributes_tensor(&self) -> Tensor {
        let data = self.gaussians.iter().flat_map(|g| g.attributes()).collect();
        Tensor::matrix(self.len(), 11, data).expect("N×11")
    }

    /// Writes semantic vectors from an `N × 16` matrix.
    pub fn set_semantics(&mut self, s: &Tensor) {
        assert_eq!(s.shape(), [self.len(), SEMANTIC_DIM]);
        for (i, g) in self.gaussians.iter_mut().enumerate() {
            g.semantic.copy_from_slice(s.row(i));
        }
        self.has_semantics = true;
    }
}

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera space follows the usual vision convention: +z forward, +x right,
/// +y down.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 4×4.
    pub world_to_camera: [f64; 16],
}

impl Camera {
    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_to_camera;
        Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10])
    }

    pub fn translation(&self) -> Vector3<f64> {
        let m = &self.world_to_camera;
        Vector3::new(m[3], m[7], m[11])
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Camera at `eye` looking at `target`, with world +z as the up hint.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], width: u32, height: u32, focal: f64) -> Self {
        let eye = Vector3::from(eye);
        let fwd = (Vector3::from(target) - eye).normalize();
        let mut up = Vector3::new(0.0, 0.0, 1.0);
        if fwd.cross(&up).norm() < 1e-6 {
            up = Vector3::new(0.0, 1.0, 0.0);
        }
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let t = -(r * eye);
        let mut m = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 4 + j] = r[(i, j)];
            }
            m[i * 4 + 3] = t[i];
        }
        m[15] = 1.0;
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_camera: m,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |s: String| Err(SceneError::InvalidCamera(s));
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad(format!("focal lengths must be positive, got {} {}", self.fx, self.fy));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return bad("non-finite principal point".into());
        }
        if self.width < 1 || self.height < 1 {
            return bad(format!("resolution {}x{}", self.width, self.height));
        }
        if !self.world_to_camera.iter().all(|v| v.is_finite()) {
            return bad("non-finite extrinsics".into());
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return bad(format!("rotation block not orthonormal (error {err:e})"));
        }
        let last = &self.world_to_camera[12..];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return bad(format!("last row must be 0 0 0 1, got {last:?}"));
        }
        Ok(())
    }
}

/// Class names with unit-norm text embeddings (one row per class).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVocabulary {
    names: Vec<String>,
    embeddings: Tensor,
    unseen: Vec<bool>,
}

impl LabelVocabulary {
    /// Builds a vocabulary, L2-normalizing every embedding row.
    pub fn new(names: Vec<String>, embeddings: Tensor) -> Result<Self, SceneError> {
        let bad = |s: String| Err(SceneError::InvalidVocabulary(s));
        if names.len() < 2 {
            return bad(format!("need at least 2 classes, got {}", names.len()));
        }
        if !embeddings.is_matrix() || embeddings.rows() != names.len() || embeddings.cols() == 0 {
            return bad(format!("embedding shape {:?} for {} names", embeddings.shape(), names.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return bad(format!("invalid class name {n:?}"));
            }
            if !seen.insert(n.as_str()) {
                return bad(format!("duplicate class name {n:?}"));
            }
        }
        let mut embeddings = embeddings;
        for r in 0..names.len() {
            let row = embeddings.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return bad(format!("embedding of {:?} has norm {norm}", names[r]));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let unseen = vec![false; names.len()];
        Ok(Self {
            names,
            embeddings,
            unseen,
        })
    }

    /// Vocabulary whose embeddings are the first `names.len()` standard basis
    /// vectors of `dim`-dimensional space.
    pub fn orthonormal(names: &[&str], dim: usize) -> Result<Self, SceneError> {
        if dim < names.len() {
            return Err(SceneError::InvalidVocabulary(format!(
                "{} orthonormal rows need dim >= {}",
                names.len(),
                names.len()
            )));
        }
        let mut e = Tensor::zeros(&[names.len(), dim]);
        for i in 0..names.len() {
            e.row_mut(i)[i] = 1.0;
        }
        Self::new(names.iter().map(|s| s.to_string()).collect(), e)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn unseen_mask(&self) -> &[bool] {
        &self.unseen
    }

    /// Marks the named classes as held out; every other class becomes seen.
    /// Names absent from the vocabulary are ignored and returned.
    pub fn set_unseen<S: AsRef<str>>(&mut self, names: &[S]) -> Vec<String> {
        self.unseen.iter_mut().for_each(|u| *u = false);
        let mut missing = Vec::new();
        for n in names {
            match self.class_id(n.as_ref()) {
                Some(i) => self.unseen[i] = true,
                None => missing.push(n.as_ref().to_string()),
            }
        }
        missing
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.unseen[i]).collect()
    }

    pub fn unseen_classes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.unseen[i]).collect()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Annotated points used as the label source for Gaussians.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledPointCloud {
    pub positions: Vec<[f64; 3]>,
    pub labels: Vec<u16>,
    pub instances: Vec<u32>,
}

impl LabeledPointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.labels.len() != self.len() || self.instances.len() != self.len() {
            return Err(SceneError::DimensionMismatch(format!(
                "point cloud arrays differ: {} positions, {} labels, {} instances",
                self.len(),
                self.labels.len(),
                self.instances.len()
            )));
        }
        Ok(())
    }
}

/// Dense per-pixel feature map, `height × width × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTargetMap {
    pub height: u32,
    pub width: u32,
    pub dim: u32,
    pub data: Vec<f32>,
}

impl DenseTargetMap {
    pub fn new(height: u32, width: u32, dim: u32, data: Vec<f32>) -> Result<Self, SceneError> {
        let n = height as usize * width as usize * dim as usize;
        if data.len() != n {
            return Err(SceneError::DimensionMismatch(format!(
                "{height}x{width}x{dim} map needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn pixel(&self, p: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.data[p * d..(p + 1) * d]
    }

    pub fn check_camera(&self, cam: &Camera) -> Result<(), SceneError> {
        if self.width != cam.width || self.height != cam.height {
            return Err(SceneError::DimensionMismatch(format!(
                "target map {}x{} vs camera {}x{}",
                self.width, self.height, cam.width, cam.height
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_is_rotated_diagonal() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let g = Gaussian {
            rotation: [h, 0.0, 0.0, h], // 90° about z
            scale: [1.0, 2.0, 3.0],
            ..Default::default()
        };
        let c = g.covariance();
        assert!((c[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((c[(1, 1)] - 1.0).abs() < 1e-12);
        assert!((c[(2, 2)] - 9.0).abs() < 1e-12);
        assert!(c[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn validation_flags_each_field() {
        let ok = Gaussian::default();
        assert!(ok.validate(0).is_ok());
        let cases: Vec<(Gaussian, &str)> = vec![
            (Gaussian { rotation: [1.1, 0.0, 0.0, 0.0], ..ok }, "rotation"),
            (Gaussian { scale: [0.1, 0.0, 0.1], ..ok }, "scale"),
            (Gaussian { opacity: 1.0, ..ok }, "opacity"),
            (Gaussian { color: [0.0, 1.01, 0.0], ..ok }, "color"),
            (Gaussian { position: [f64::NAN, 0.0, 0.0], ..ok }, "position"),
        ];
        for (g, field) in cases {
            match g.validate(4) {
                Err(SceneError::InvariantViolation { index: 4, field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }

    #[test]
    fn look_at_camera_is_valid_and_centers_target() {
        let cam = Camera::look_at([1.0, 2.0, 1.5], [3.0, 3.0, 0.5], 40, 30, 24.0);
        cam.validate().unwrap();
        let t = cam.to_camera(&Vector3::new(3.0, 3.0, 0.5));
        assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12 && t.z > 0.0);
        // World up projects to image up (negative camera y).
        let above = cam.to_camera(&Vector3::new(3.0, 3.0, 1.5));
        assert!(above.y < 0.0);
    }

    #[test]
    fn vocabulary_normalizes_and_rejects_duplicates() {
        let e = Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 2.0]).unwrap();
        let v = LabelVocabulary::new(vec!["a".into(), "b".into()], e.clone()).unwrap();
        assert_eq!(v.embeddings().row(0), &[0.6, 0.8]);
        assert!(LabelVocabulary::new(vec!["a".into(), "a".into()], e.clone()).is_err());
        assert!(LabelVocabulary::new(vec!["a".into()], Tensor::zeros(&[1, 2])).is_err());
        let z = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(LabelVocabulary::new(vec!["a".into(), "b".into()], z).is_err());
    }

    #[test]
    fn unseen_mask_partitions_classes() {
        let mut v = LabelVocabulary::orthonormal(&["wall", "sofa", "bed", "floor"], 8).unwrap();
        let missing = v.set_unseen(&["sofa", "bed", "curtain"]);
        assert_eq!(missing, vec!["curtain".to_string()]);
        assert_eq!(v.seen_classes(), vec![0, 3]);
        assert_eq!(v.unseen_classes(), vec![1, 2]);
    }
}
