//! Pose regression from 2D-3D matches: a linear minimal solver, robust
//! Gauss-Newton refinement, seeded RANSAC and pose error metrics.

mod pnp;
mod ransac;
mod refine;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, RigidTransform, Z_MIN};

pub use pnp::{is_degenerate, pnp_minimal};
pub use ransac::{ransac_pnp, PoseEstimate, RansacConfig};
pub use refine::{refine_pose, robust_cost, Refinement, HUBER_DELTA};

/// A pixel observation of a 3-d point in the point-cloud frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub uv: [f64; 2],
    pub point: [f64; 3],
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Correspondence {
    pub fn new(uv: [f64; 2], point: [f64; 3]) -> Self {
        Correspondence { uv, point, weight: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnPProblem {
    pub correspondences: Vec<Correspondence>,
    pub intrinsics: CameraIntrinsics,
}

/// Reprojection error in pixels, or `None` when the point falls behind the
/// camera.
pub fn reprojection_error(t: &RigidTransform, k: &CameraIntrinsics, c: &Correspondence) -> Option<f64> {
    let p = t.apply(&Vector3::from(c.point));
    if p.z <= Z_MIN {
        return None;
    }
    let du = k.fx * p.x / p.z + k.cx - c.uv[0];
    let dv = k.fy * p.y / p.z + k.cy - c.uv[1];
    Some((du * du + dv * dv).sqrt())
}

/// Rotation error (degrees), translation error (meters) and scene RMSE
/// (meters) of an estimate against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub rot_deg: f64,
    pub trans_m: f64,
    pub rmse_m: f64,
}

/// Compares `est` with `gt`; the RMSE is over `points` mapped by both.
pub fn pose_errors(est: &RigidTransform, gt: &RigidTransform, points: &[[f64; 3]]) -> PoseErrors {
    let r = gt.rotation().transpose() * est.rotation();
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let rot_deg = c.acos().to_degrees();
    let trans_m = (est.translation() - gt.translation()).norm();
    let rmse_m = if points.is_empty() {
        0.0
    } else {
        let s: f64 = points
            .iter()
            .map(|p| {
                let p = Vector3::from(*p);
                (est.apply(&p) - gt.apply(&p)).norm_squared()
            })
            .sum();
        (s / points.len() as f64).sqrt()
    };
    PoseErrors { rot_deg, trans_m, rmse_m }
}
