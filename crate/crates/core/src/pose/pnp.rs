use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};

use super::Correspondence;
use crate::geometry::{CameraIntrinsics, RigidTransform, Z_MIN};

/// Relative eigenvalue below which a point spread counts as flat.
const FLAT_TOL: f64 = 1e-10;

/// Centroid and principal axes (ascending variance) of a point set.
fn principal_axes(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>, Matrix3<f64>) {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = Vector3::new(eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    let vecs = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    (c, vals, vecs)
}

/// True when the 3-d points of `sample` are (nearly) collinear or fewer
/// than four.
pub fn is_degenerate(sample: &[Correspondence]) -> bool {
    if sample.len() < 4 {
        return true;
    }
    let pts: Vec<Vector3<f64>> = sample.iter().map(|c| Vector3::from(c.point)).collect();
    let (_, vals, _) = principal_axes(&pts);
    !(vals[2] > 0.0) || vals[1] <= FLAT_TOL * vals[2]
}

/// Right singular vector of the smallest singular value.
fn null_vector(a: &DMatrix<f64>) -> Option<Vec<f64>> {
    let cols = a.ncols();
    let a = if a.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    Some(vt.row(imin).iter().copied().collect())
}

/// Nearest rotation to `m` in the Frobenius sense.
fn nearest_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Some(u * d * vt)
}

/// Isotropic normalization: translate to the centroid and scale so the mean
/// distance is √dim.
fn normalizer<const D: usize>(pts: &[[f64; D]]) -> ([f64; D], f64) {
    let n = pts.len() as f64;
    let mut c = [0.0; D];
    for p in pts {
        for k in 0..D {
            c[k] += p[k] / n;
        }
    }
    let mean: f64 = pts
        .iter()
        .map(|p| (0..D).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n;
    let s = if mean > 0.0 { (D as f64).sqrt() / mean } else { 1.0 };
    (c, s)
}

fn normalized_rays(sample: &[Correspondence], k: &CameraIntrinsics) -> Vec<[f64; 2]> {
    sample.iter().map(|c| [(c.uv[0] - k.cx) / k.fx, (c.uv[1] - k.cy) / k.fy]).collect()
}

/// Direct linear transform of the 3×4 projection, lifted to SO(3).
fn dlt(sample: &[Correspondence], k: &CameraIntrinsics) -> Option<RigidTransform> {
    let rays = normalized_rays(sample, k);
    let pts: Vec<[f64; 3]> = sample.iter().map(|c| c.point).collect();
    let (ci, si) = normalizer(&rays);
    let (cp, sp) = normalizer(&pts);
    let mut a = DMatrix::zeros(2 * sample.len(), 12);
    for (r, (x, p)) in rays.iter().zip(&pts).enumerate() {
        let u = (x[0] - ci[0]) * si;
        let v = (x[1] - ci[1]) * si;
        let xh = [(p[0] - cp[0]) * sp, (p[1] - cp[1]) * sp, (p[2] - cp[2]) * sp, 1.0];
        for j in 0..4 {
            a[(2 * r, j)] = xh[j];
            a[(2 * r, 8 + j)] = -u * xh[j];
            a[(2 * r + 1, 4 + j)] = xh[j];
            a[(2 * r + 1, 8 + j)] = -v * xh[j];
        }
    }
    let h = null_vector(&a)?;
    let pn = nalgebra::Matrix3x4::from_row_slice(&h);
    // undo normalizations: P = T_img⁻¹ · P' · T_pts
    let t_img_inv = Matrix3::new(1.0 / si, 0.0, ci[0], 0.0, 1.0 / si, ci[1], 0.0, 0.0, 1.0);
    let mut t_pts = nalgebra::Matrix4::identity() * sp;
    t_pts[(3, 3)] = 1.0;
    for j in 0..3 {
        t_pts[(j, 3)] = -cp[j] * sp;
    }
    let mut p = t_img_inv * pn * t_pts;
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
    }
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let scale = m.svd(false, false).singular_values.mean();
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let r = nearest_rotation(&m)?;
    let t = p.column(3) / scale;
    RigidTransform::new(r, t.into_owned()).ok()
}

/// Plane-induced homography solve for (nearly) coplanar samples.
fn planar(sample: &[Correspondence], k: &CameraIntrinsics, centroid: Vector3<f64>, axes: &Matrix3<f64>) -> Option<RigidTransform> {
    // plane basis: two largest axes in-plane, smallest is the normal
    let e1 = axes.column(2).into_owned();
    let e2 = axes.column(1).into_owned();
    let nrm = e1.cross(&e2);
    let basis = Matrix3::from_columns(&[e1, e2, nrm]);
    let plane: Vec<[f64; 2]> = sample
        .iter()
        .map(|c| {
            let d = Vector3::from(c.point) - centroid;
            [d.dot(&e1), d.dot(&e2)]
        })
        .collect();
    let rays = normalized_rays(sample, k);
    let (ci, si) = normalizer(&rays);
    let (cq, sq) = normalizer(&plane);
    let mut a = DMatrix::zeros(2 * sample.len(), 9);
    for (r, (x, q)) in rays.iter().zip(&plane).enumerate() {
        let u = (x[0] - ci[0]) * si;
        let v = (x[1] - ci[1]) * si;
        let qh = [(q[0] - cq[0]) * sq, (q[1] - cq[1]) * sq, 1.0];
        for j in 0..3 {
            a[(2 * r, j)] = qh[j];
            a[(2 * r, 6 + j)] = -u * qh[j];
            a[(2 * r + 1, 3 + j)] = qh[j];
            a[(2 * r + 1, 6 + j)] = -v * qh[j];
        }
    }
    let h = null_vector(&a)?;
    let hn = Matrix3::from_row_slice(&h);
    let t_img_inv = Matrix3::new(1.0 / si, 0.0, ci[0], 0.0, 1.0 / si, ci[1], 0.0, 0.0, 1.0);
    let t_q = Matrix3::new(sq, 0.0, -cq[0] * sq, 0.0, sq, -cq[1] * sq, 0.0, 0.0, 1.0);
    let mut hm = t_img_inv * hn * t_q;
    let scale = 0.5 * (hm.column(0).norm() + hm.column(1).norm());
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    hm /= scale;
    // the plane origin (the centroid) must lie in front of the camera
    if hm[(2, 2)] < 0.0 {
        hm = -hm;
    }
    let r1 = hm.column(0).into_owned();
    let r2 = hm.column(1).into_owned();
    let approx = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    let rp = nearest_rotation(&approx)?;
    let r = rp * basis.transpose();
    let t = hm.column(2).into_owned() - r * centroid;
    RigidTransform::new(r, t).ok()
}

fn positive_depths(t: &RigidTransform, sample: &[Correspondence]) -> usize {
    sample.iter().filter(|c| t.apply(&Vector3::from(c.point)).z > Z_MIN).count()
}

/// Candidate poses from a sample of at least four correspondences.
///
/// Non-coplanar samples need six points for the projective linear solve;
/// coplanar ones go through a plane homography and need four. Candidates are
/// ordered by how many sample points they place in front of the camera, and
/// only those with the best count are kept. Degenerate samples yield none.
pub fn pnp_minimal(sample: &[Correspondence], k: &CameraIntrinsics) -> Vec<RigidTransform> {
    if is_degenerate(sample) {
        return Vec::new();
    }
    let pts: Vec<Vector3<f64>> = sample.iter().map(|c| Vector3::from(c.point)).collect();
    let (c, vals, axes) = principal_axes(&pts);
    let flat = vals[0] <= FLAT_TOL * vals[2];
    let mut cands = Vec::new();
    if flat {
        cands.extend(planar(sample, k, c, &axes));
    } else if sample.len() >= 6 {
        cands.extend(dlt(sample, k));
        // near-planar samples condition the projective solve poorly
        if vals[0] <= 1e-4 * vals[2] {
            cands.extend(planar(sample, k, c, &axes));
        }
    }
    let scored: Vec<(usize, RigidTransform)> = cands.into_iter().map(|t| (positive_depths(&t, sample), t)).collect();
    let best = scored.iter().map(|s| s.0).max().unwrap_or(0);
    scored.into_iter().filter(|s| s.0 == best && best > 0).map(|s| s.1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn observe(t: &RigidTransform, pts: &[[f64; 3]]) -> Vec<Correspondence> {
        let k = k();
        pts.iter()
            .map(|p| {
                let c = t.apply(&Vector3::from(*p));
                Correspondence::new([k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy], *p)
            })
            .collect()
    }

    #[test]
    fn identity_from_six_points() {
        let pts = [[0.1, 0.2, 2.0], [-0.3, 0.1, 2.5], [0.4, -0.2, 3.0], [0.0, 0.0, 1.5], [-0.2, -0.4, 2.2], [0.3, 0.3, 2.8]];
        let c = pnp_minimal(&observe(&RigidTransform::identity(), &pts), &k());
        assert!(!c.is_empty());
        let t = c[0];
        assert!((t.rotation() - Matrix3::identity()).abs().max() < 1e-8);
        assert!(t.translation().norm() < 1e-8);
    }

    #[test]
    fn coplanar_four_points() {
        let gt = RigidTransform::from_axis_angle(Vector3::new(0.3, -1.0, 0.2), 0.4, Vector3::new(0.1, -0.2, 3.0));
        let pts = [[-0.5, -0.5, 0.2], [0.5, -0.4, 0.2], [0.6, 0.5, 0.2], [-0.4, 0.3, 0.2]];
        let c = pnp_minimal(&observe(&gt, &pts), &k());
        assert!(!c.is_empty());
        let t = c[0];
        assert!((t.rotation() - gt.rotation()).abs().max() < 1e-9);
        assert!((t.translation() - gt.translation()).norm() < 1e-9);
    }

    #[test]
    fn collinear_and_short_samples_are_degenerate() {
        let pts: Vec<[f64; 3]> = (0..6).map(|i| [i as f64 * 0.1, 0.0, 2.0]).collect();
        assert!(pnp_minimal(&observe(&RigidTransform::identity(), &pts), &k()).is_empty());
        let pts = [[0.1, 0.2, 2.0], [-0.3, 0.1, 2.5], [0.4, -0.2, 3.0]];
        assert!(pnp_minimal(&observe(&RigidTransform::identity(), &pts), &k()).is_empty());
    }

    #[test]
    fn random_poses_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let gt = RigidTransform::from_axis_angle(
                axis,
                rng.random_range(-1.0..1.0),
                Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(2.0..4.0)),
            );
            let pts: Vec<[f64; 3]> = (0..6)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let c = pnp_minimal(&observe(&gt, &pts), &k());
            let t = c[0];
            let r = gt.rotation().transpose() * t.rotation();
            let ang = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            assert!(ang < 1e-6, "{ang}");
            assert!((t.translation() - gt.translation()).norm() < 1e-8);
        }
    }
}
