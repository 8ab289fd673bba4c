use nalgebra::{Matrix2x3, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};

use super::Correspondence;
use crate::geometry::{CameraIntrinsics, RigidTransform, Z_MIN};

/// Huber transition in pixels.
pub const HUBER_DELTA: f64 = 2.0;
/// Residual charged to a point behind the camera.
const BEHIND_RESIDUAL: f64 = 1e4;
const GRAD_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 30;
const SINGULAR_RATIO: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub transform: RigidTransform,
    /// Robust cost before the first step and after every accepted step.
    pub costs: Vec<f64>,
    /// Normal equations could not be solved; `transform` is the input.
    pub singular: bool,
    pub iterations: usize,
}

fn huber(r: f64) -> f64 {
    if r <= HUBER_DELTA {
        0.5 * r * r
    } else {
        HUBER_DELTA * (r - 0.5 * HUBER_DELTA)
    }
}

fn residual(t: &RigidTransform, k: &CameraIntrinsics, c: &Correspondence) -> Option<(Vector2<f64>, Vector3<f64>)> {
    let p = t.apply(&Vector3::from(c.point));
    if p.z <= Z_MIN {
        return None;
    }
    let r = Vector2::new(k.fx * p.x / p.z + k.cx - c.uv[0], k.fy * p.y / p.z + k.cy - c.uv[1]);
    Some((r, p))
}

/// Weighted Huber cost of the reprojection residuals.
pub fn robust_cost(t: &RigidTransform, corr: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    corr.iter()
        .map(|c| {
            let r = residual(t, k, c).map_or(BEHIND_RESIDUAL, |(r, _)| r.norm());
            c.weight * huber(r)
        })
        .sum()
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left perturbation `(ω, v)`: `R ← Exp(ω)·R`, `t ← Exp(ω)·t + v`.
fn retract(t: &RigidTransform, d: &Vector6<f64>) -> RigidTransform {
    let w = Vector3::new(d[0], d[1], d[2]);
    let v = Vector3::new(d[3], d[4], d[5]);
    let e = Rotation3::new(w).into_inner();
    RigidTransform::new(e * t.rotation(), e * t.translation() + v).unwrap_or(*t)
}

/// Iteratively reweighted Gauss-Newton on the Huber reprojection cost.
///
/// A step that raises the cost is halved until it does not; if no halving
/// helps the solve stops. The cost sequence is therefore non-increasing.
pub fn refine_pose(t0: &RigidTransform, corr: &[Correspondence], k: &CameraIntrinsics, iters: usize) -> Refinement {
    let mut t = *t0;
    let mut cost = robust_cost(&t, corr, k);
    let mut costs = vec![cost];
    let mut used = 0;
    for _ in 0..iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in corr {
            let Some((r, p)) = residual(&t, k, c) else { continue };
            let n = r.norm();
            let w = c.weight * if n <= HUBER_DELTA { 1.0 } else { HUBER_DELTA / n };
            let iz = 1.0 / p.z;
            let dproj = Matrix2x3::new(k.fx * iz, 0.0, -k.fx * p.x * iz * iz, 0.0, k.fy * iz, -k.fy * p.y * iz * iz);
            let mut dp = nalgebra::Matrix3x6::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&p)));
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = dproj * dp;
            h += w * j.transpose() * j;
            g += w * j.transpose() * r;
        }
        if g.norm() < GRAD_TOL {
            break;
        }
        let eig = h.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let chol = if lo > SINGULAR_RATIO * hi { h.cholesky() } else { None };
        let Some(chol) = chol else {
            return Refinement { transform: *t0, costs, singular: true, iterations: used };
        };
        let mut step = -chol.solve(&g);
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = retract(&t, &step);
            let c = robust_cost(&cand, corr, k);
            if c <= cost {
                accepted = Some((cand, c));
                break;
            }
            step *= 0.5;
        }
        used += 1;
        let Some((cand, c)) = accepted else { break };
        let stalled = c == cost;
        t = cand;
        cost = c;
        costs.push(c);
        if stalled {
            break;
        }
    }
    Refinement { transform: t, costs, singular: false, iterations: used }
}
