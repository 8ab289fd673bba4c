use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xmreg::geometry::{CameraIntrinsics, RigidTransform, SO3_TOL};
use xmreg::pose::{
    pnp_minimal, pose_errors, ransac_pnp, refine_pose, reprojection_error, robust_cost, Correspondence, PnPProblem,
    RansacConfig,
};

fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    RigidTransform::from_axis_angle(
        axis,
        rng.random_range(-0.5..0.5),
        Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(3.0..5.0)),
    )
}

fn project(k: &CameraIntrinsics, t: &RigidTransform, p: &[f64; 3]) -> [f64; 2] {
    let c = t.apply(&Vector3::from(*p));
    [k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy]
}

/// `n` matches, the first `n·outliers` with uniformly random pixels.
fn synth(seed: u64, n: usize, outliers: f64, noise_px: f64) -> (RigidTransform, PnPProblem, Vec<[f64; 3]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_pose(&mut rng);
    let k = camera();
    let noise = Normal::new(0.0, noise_px.max(1e-300)).unwrap();
    let n_out = (n as f64 * outliers).round() as usize;
    let mut pts = Vec::new();
    let correspondences = (0..n)
        .map(|i| {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8), rng.random_range(-0.6..0.6)];
            pts.push(p);
            let uv = if i < n_out {
                [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)]
            } else {
                let uv = project(&k, &gt, &p);
                if noise_px > 0.0 {
                    [uv[0] + noise.sample(&mut rng), uv[1] + noise.sample(&mut rng)]
                } else {
                    uv
                }
            };
            Correspondence::new(uv, p)
        })
        .collect();
    (gt, PnPProblem { correspondences, intrinsics: k }, pts)
}

fn rot_err_rad(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let r = a.rotation().transpose() * b.rotation();
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

#[test]
fn minimal_solver_recovers_random_poses() {
    for seed in 0..100 {
        let (gt, p, _) = synth(seed, 6, 0.0, 0.0);
        let c = pnp_minimal(&p.correspondences, &p.intrinsics);
        assert!(!c.is_empty(), "seed {seed}");
        assert!(rot_err_rad(&c[0], &gt) < 1e-6, "seed {seed}");
        assert!((c[0].translation() - gt.translation()).norm() < 1e-8, "seed {seed}");
    }
}

#[test]
fn refine_converges_from_perturbed_start() {
    for seed in 0..20 {
        let (gt, p, _) = synth(seed, 40, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let d = RigidTransform::from_axis_angle(axis, 2f64.to_radians(), dir.normalize() * 0.05);
        let t0 = d.compose(&gt);
        let r = refine_pose(&t0, &p.correspondences, &p.intrinsics, 100);
        assert!(!r.singular);
        assert!(rot_err_rad(&r.transform, &gt) < 1e-6, "seed {seed}");
        assert!((r.transform.translation() - gt.translation()).norm() < 1e-6, "seed {seed}");
        assert!(r.costs.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn ransac_exact_matches_all_inliers() {
    let (gt, p, _) = synth(7, 50, 0.0, 0.0);
    let e = ransac_pnp(&p, &RansacConfig::default()).unwrap();
    assert!(e.success);
    assert_eq!(e.inlier_count(), 50);
    assert!(rot_err_rad(&e.transform, &gt) < 1e-8);
    assert!((e.transform.translation() - gt.translation()).norm() < 1e-8);
}

#[test]
fn ransac_monte_carlo_with_outliers() {
    let mut ok = 0;
    for seed in 0..100 {
        let (gt, p, _) = synth(seed, 200, 0.3, 0.5);
        let e = ransac_pnp(&p, &RansacConfig { seed, ..Default::default() }).unwrap();
        let err = pose_errors(&e.transform, &gt, &[]);
        if e.success && err.rot_deg < 0.5 && err.trans_m < 0.01 {
            ok += 1;
        }
    }
    assert!(ok >= 99, "{ok}/100");
}

#[test]
fn ransac_all_outliers_fails_cleanly() {
    let (_, p, _) = synth(3, 100, 1.0, 0.0);
    let e = ransac_pnp(&p, &RansacConfig { max_iters: 200, inlier_thresh: 0.5, ..Default::default() }).unwrap();
    assert!(!e.success);
    assert!(e.transform.is_valid());
}

#[test]
fn ransac_is_deterministic() {
    let (_, p, _) = synth(11, 150, 0.4, 0.5);
    let cfg = RansacConfig { seed: 5, ..Default::default() };
    let a = ransac_pnp(&p, &cfg).unwrap();
    let b = ransac_pnp(&p, &cfg).unwrap();
    assert_eq!(a.transform.rotation_row_major().map(f64::to_bits), b.transform.rotation_row_major().map(f64::to_bits));
    assert_eq!(a, b);
}

#[test]
fn ransac_inliers_reproject_within_threshold() {
    for seed in 0..10 {
        let (_, p, _) = synth(seed, 120, 0.3, 1.0);
        let cfg = RansacConfig { seed, ..Default::default() };
        let e = ransac_pnp(&p, &cfg).unwrap();
        for (c, &m) in p.correspondences.iter().zip(&e.inliers) {
            if m {
                assert!(reprojection_error(&e.transform, &p.intrinsics, c).unwrap() < cfg.inlier_thresh);
            }
        }
    }
}

#[test]
fn refinement_does_not_worsen_inlier_cost() {
    for seed in 0..10 {
        let (_, p, _) = synth(seed, 120, 0.3, 1.0);
        let e = ransac_pnp(&p, &RansacConfig { seed, ..Default::default() }).unwrap();
        let set: Vec<_> = p.correspondences.iter().zip(&e.inliers).filter(|x| *x.1).map(|x| *x.0).collect();
        let before = robust_cost(&e.transform, &set, &p.intrinsics);
        let r = refine_pose(&e.transform, &set, &p.intrinsics, 20);
        assert!(robust_cost(&r.transform, &set, &p.intrinsics) <= before);
    }
}

#[test]
fn rmse_matches_per_point_double_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_pose(&mut rng);
    let b = random_pose(&mut rng);
    let pts: Vec<[f64; 3]> = (0..37).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let mut acc = 0.0;
    for p in &pts {
        let mut d2 = 0.0;
        for r in 0..3 {
            let mut ea = a.translation()[r];
            let mut eb = b.translation()[r];
            for c in 0..3 {
                ea += a.rotation()[(r, c)] * p[c];
                eb += b.rotation()[(r, c)] * p[c];
            }
            d2 += (ea - eb) * (ea - eb);
        }
        acc += d2;
    }
    let oracle = (acc / pts.len() as f64).sqrt();
    let e = pose_errors(&a, &b, &pts);
    assert!((e.rmse_m - oracle).abs() <= 1e-12 * oracle.max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recovered_rotations_are_orthonormal(seed in 0u64..10_000, noise in 0.0f64..2.0) {
        let (_, p, _) = synth(seed, 40, 0.2, noise);
        let e = ransac_pnp(&p, &RansacConfig { seed, max_iters: 200, ..Default::default() }).unwrap();
        let r = e.transform.rotation();
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() < SO3_TOL);
        prop_assert!((r.determinant() - 1.0).abs() < SO3_TOL);
    }

    #[test]
    fn pose_error_is_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = random_pose(&mut ChaCha8Rng::seed_from_u64(s1));
        let b = random_pose(&mut ChaCha8Rng::seed_from_u64(s2));
        let ab = pose_errors(&a, &b, &[[0.1, 0.2, 0.3]]);
        let ba = pose_errors(&b, &a, &[[0.1, 0.2, 0.3]]);
        prop_assert!((ab.rot_deg - ba.rot_deg).abs() < 1e-9);
        prop_assert!((ab.rmse_m - ba.rmse_m).abs() < 1e-12);
    }
}
