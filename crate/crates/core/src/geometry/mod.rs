//! Camera model, rigid transforms, point-to-node partition and ground-truth
//! correspondence construction.

mod correspondences;
mod kdtree;
mod partition;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use correspondences::{gt_correspondences, GroundTruth, PixelPoint};
pub use kdtree::KdTree;
pub use partition::{farthest_point_sampling, point_to_node_partition};

/// Tolerance for the rotation-matrix invariants.
pub const SO3_TOL: f64 = 1e-9;
/// Points at or closer than this depth (meters) are behind the camera.
pub const Z_MIN: f64 = 1e-6;

/// Rigid transform `p ↦ R·p + t` from the point-cloud frame to the camera
/// frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseJson", into = "PoseJson")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Serialized form: row-major rotation and translation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PoseJson {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<RigidTransform> for PoseJson {
    fn from(t: RigidTransform) -> Self {
        let tr = t.translation();
        PoseJson { r: t.rotation_row_major(), t: [tr.x, tr.y, tr.z] }
    }
}

impl TryFrom<PoseJson> for RigidTransform {
    type Error = Error;
    fn try_from(p: PoseJson) -> Result<Self> {
        RigidTransform::from_row_major(&p.r, &p.t)
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        if !t.is_valid() {
            return Err(Error::Domain(format!("not a rotation matrix: {rotation}")));
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation of `angle` radians about `axis`, then translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = if axis.norm() == 0.0 || angle == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
        };
        RigidTransform {
            rotation,
            translation,
        }
    }

    /// Builds from row-major rotation entries; input that is not a rotation
    /// is rejected.
    pub fn from_row_major(r: &[f64; 9], t: &[f64; 3]) -> Result<Self> {
        RigidTransform::new(Matrix3::from_row_slice(r), Vector3::from_row_slice(t))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ]
    }

    pub fn is_valid(&self) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        ortho <= SO3_TOL && (r.determinant() - 1.0).abs() <= SO3_TOL
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_array(&self, p: &[f64; 3]) -> [f64; 3] {
        let q = self.apply(&Vector3::from(*p));
        [q.x, q.y, q.z]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Pinhole intrinsics. Pixel `(col, row)` covers `[col − ½, col + ½) ×
/// [row − ½, row + ½)` in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Result of projecting a camera-frame point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Pixel { u: f64, v: f64 },
    BehindCamera,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if !ok {
            return Err(Error::Config(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    pub fn project(&self, p: &Vector3<f64>) -> Projection {
        if p.z > Z_MIN {
            Projection::Pixel {
                u: self.fx * p.x / p.z + self.cx,
                v: self.fy * p.y / p.z + self.cy,
            }
        } else {
            Projection::BehindCamera
        }
    }

    /// Pixel cell containing image coordinates `(u, v)`, if inside the image.
    pub fn cell(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let c = (u + 0.5).floor();
        let r = (v + 0.5).floor();
        if c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height {
            Some((c as usize, r as usize))
        } else {
            None
        }
    }

    /// Flat row-major pixel index of the cell a camera-frame point lands in.
    pub fn pixel_of(&self, p: &Vector3<f64>) -> Option<usize> {
        match self.project(p) {
            Projection::Pixel { u, v } => self.cell(u, v).map(|(c, r)| r * self.width + c),
            Projection::BehindCamera => None,
        }
    }

    /// Camera-frame point at depth `z` on the ray through pixel center
    /// `(col, row)`.
    pub fn backproject(&self, col: f64, row: f64, z: f64) -> Vector3<f64> {
        Vector3::new((col - self.cx) / self.fx * z, (row - self.cy) / self.fy * z, z)
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Points in meters with per-point descriptors (`N × channels`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub descriptors: Vec<f64>,
    pub channels: usize,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, descriptors: Vec<f64>, channels: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Usage("point cloud needs at least one point".into()));
        }
        if descriptors.len() != points.len() * channels {
            return Err(Error::dim(
                "PointCloud::new",
                &[points.len(), channels],
                &[descriptors.len()],
            ));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite point coordinate".into()));
        }
        Ok(PointCloud {
            points,
            descriptors,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.channels..(i + 1) * self.channels]
    }
}

/// Applies `t` to every point; descriptors are unchanged.
pub fn transform_points(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_array(p)).collect(),
        descriptors: cloud.descriptors.clone(),
        channels: cloud.channels,
    }
}

/// Row-major pixel grid split into square patches of side `2^scale`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub width: usize,
    pub height: usize,
    pub scale: u32,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, scale: u32) -> Self {
        PatchGrid {
            width,
            height,
            scale,
        }
    }

    pub fn side(&self) -> usize {
        1 << self.scale
    }

    pub fn cols(&self) -> usize {
        self.width >> self.scale
    }

    pub fn rows(&self) -> usize {
        self.height >> self.scale
    }

    pub fn n_patches(&self) -> usize {
        self.cols() * self.rows()
    }

    pub fn patch_of(&self, pixel: usize) -> usize {
        let (r, c) = (pixel / self.width, pixel % self.width);
        (r >> self.scale) * self.cols() + (c >> self.scale)
    }

    /// Pixels of a patch in row-major order.
    pub fn pixels(&self, patch: usize) -> Vec<usize> {
        let s = self.side();
        let (pr, pc) = (patch / self.cols(), patch % self.cols());
        let mut out = Vec::with_capacity(s * s);
        for r in pr * s..(pr + 1) * s {
            for c in pc * s..(pc + 1) * s {
                out.push(r * self.width + c);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::new(points, vec![0.5; n], 1).unwrap()
    }

    #[test]
    fn identity_leaves_points() {
        let c = cloud(vec![[1.0, 2.0, 3.0], [-0.5, 0.0, 4.0]]);
        assert_eq!(transform_points(&RigidTransform::identity(), &c), c);
    }

    #[test]
    fn inverse_composition_round_trips() {
        let t = RigidTransform::from_axis_angle(Vector3::new(0.3, -1.0, 0.2), 0.7, Vector3::new(0.1, 2.0, -3.0));
        let c = cloud(vec![[1.0, 2.0, 3.0], [-0.5, 0.0, 4.0]]);
        let back = transform_points(&t.inverse(), &transform_points(&t, &c));
        for (a, b) in back.points.iter().zip(&c.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn projection_cases() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap();
        assert_eq!(k.project(&Vector3::new(0.0, 0.0, 1.0)), Projection::Pixel { u: 0.0, v: 0.0 });
        assert_eq!(k.project(&Vector3::new(1.0, 1.0, 0.0)), Projection::BehindCamera);
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 200).unwrap();
        match k.project(&Vector3::new(1.0, 0.0, 2.0)) {
            Projection::Pixel { u, .. } => assert_relative_eq!(u, 100.0),
            _ => panic!(),
        }
    }

    #[test]
    fn backprojection_inverts_projection() {
        let k = CameraIntrinsics::new(30.0, 32.0, 11.5, 12.0, 24, 24).unwrap();
        let p = Vector3::new(0.2, -0.1, 1.7);
        let Projection::Pixel { u, v } = k.project(&p) else { panic!() };
        assert_relative_eq!(k.backproject(u, v, p.z), p, epsilon = 1e-12);
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
    }

    #[test]
    fn patch_grid_indexing() {
        let g = PatchGrid::new(16, 16, 1);
        assert_eq!(g.n_patches(), 64);
        assert_eq!(PatchGrid::new(16, 16, 2).n_patches(), 16);
        assert_eq!(PatchGrid::new(16, 16, 3).n_patches(), 4);
        assert_eq!(g.pixels(0), vec![0, 1, 16, 17]);
        for p in g.pixels(9) {
            assert_eq!(g.patch_of(p), 9);
        }
    }
}
