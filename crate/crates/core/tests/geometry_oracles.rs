use nalgebra::{Matrix4, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmreg::geometry::{
    gt_correspondences, point_to_node_partition, transform_points, PatchGrid, PixelPoint, PointCloud,
    RigidTransform,
};
use xmreg::scenegen::{generate_scene, SceneConfig};

fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    RigidTransform::from_axis_angle(axis, rng.random_range(-3.0..3.0), t)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
        .collect()
}

#[test]
fn transform_matches_homogeneous_matrix() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_pose(&mut rng);
        let pts = random_points(&mut rng, 50);
        let cloud = PointCloud::new(pts.clone(), vec![0.0; 50], 1).unwrap();
        let out = transform_points(&t, &cloud);

        let r = t.rotation_row_major();
        let tr = t.translation();
        let mut h = Matrix4::identity();
        for i in 0..3 {
            for j in 0..3 {
                h[(i, j)] = r[3 * i + j];
            }
            h[(i, 3)] = tr[i];
        }
        for (p, q) in pts.iter().zip(&out.points) {
            let e = h * Vector4::new(p[0], p[1], p[2], 1.0);
            for k in 0..3 {
                assert!((e[k] / e[3] - q[k]).abs() < 1e-12);
            }
        }
        assert_eq!(out.descriptors, cloud.descriptors);
    }
}

#[test]
fn inverse_composition_restores_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = random_pose(&mut rng);
    let pts = random_points(&mut rng, 100);
    let round = t.compose(&t.inverse());
    for p in &pts {
        let q = round.apply_array(p);
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn transforms_preserve_pairwise_distances(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_pose(&mut rng);
        let pts = random_points(&mut rng, n);
        let moved: Vec<_> = pts.iter().map(|p| t.apply_array(p)).collect();
        let d = |a: &[f64; 3], b: &[f64; 3]| Vector3::from(*a).metric_distance(&Vector3::from(*b));
        for i in 0..n {
            for j in i + 1..n {
                prop_assert!((d(&pts[i], &pts[j]) - d(&moved[i], &moved[j])).abs() < 1e-9);
            }
        }
        prop_assert!(t.is_valid());
    }

    #[test]
    fn partition_is_total_and_idempotent(seed in any::<u64>(), n in 1usize..200, m in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, n);
        let nodes = random_points(&mut rng, m);
        let a = point_to_node_partition(&pts, &nodes).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.iter().all(|&k| k < m));
        prop_assert_eq!(a, point_to_node_partition(&pts, &nodes).unwrap());
    }
}

fn brute_partition(points: &[[f64; 3]], nodes: &[[f64; 3]]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (k, q) in nodes.iter().enumerate() {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect()
}

#[test]
fn partition_matches_exhaustive_argmin() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let pts = random_points(&mut rng, 500);
        let nodes = random_points(&mut rng, 20);
        assert_eq!(point_to_node_partition(&pts, &nodes).unwrap(), brute_partition(&pts, &nodes));
    }
    // integer lattice: many exact ties
    let pts: Vec<[f64; 3]> = (0..125).map(|i| [(i % 5) as f64, ((i / 5) % 5) as f64, (i / 25) as f64]).collect();
    let nodes: Vec<[f64; 3]> = (0..8).map(|i| [(i % 2) as f64 * 4.0, ((i / 2) % 2) as f64 * 4.0, (i / 4) as f64 * 4.0]).collect();
    assert_eq!(point_to_node_partition(&pts, &nodes).unwrap(), brute_partition(&pts, &nodes));
}

#[test]
fn gt_correspondences_match_exhaustive_scan() {
    let cfg = SceneConfig {
        n_points: 300,
        height: 16,
        width: 16,
        focal: 20.0,
        ..SceneConfig::default()
    };
    for seed in 0..5 {
        let s = generate_scene(&cfg, seed).unwrap();
        let nodes: Vec<[f64; 3]> = s.cloud.points.iter().step_by(15).copied().collect();
        let assign = brute_partition(&s.cloud.points, &nodes);
        let thresh = 0.05;
        let gt = gt_correspondences(&s, &assign, nodes.len(), thresh);

        let k = s.intrinsics;
        let mut pairs = Vec::new();
        for pixel in 0..256 {
            let (row, col) = (pixel / 16, pixel % 16);
            let z = s.depth[pixel];
            if z <= 0.0 {
                continue;
            }
            let q = [(col as f64 - k.cx) * z / k.fx, (row as f64 - k.cy) * z / k.fy, z];
            for (i, p) in s.cloud.points.iter().enumerate() {
                let r = s.gt_pose.rotation_row_major();
                let t = s.gt_pose.translation();
                let pc: Vec<f64> = (0..3)
                    .map(|a| r[3 * a] * p[0] + r[3 * a + 1] * p[1] + r[3 * a + 2] * p[2] + t[a])
                    .collect();
                if pc[2] <= 1e-6 {
                    continue;
                }
                let u = k.fx * pc[0] / pc[2] + k.cx;
                let v = k.fy * pc[1] / pc[2] + k.cy;
                if (u + 0.5).floor() != col as f64 || (v + 0.5).floor() != row as f64 {
                    continue;
                }
                let d = ((q[0] - pc[0]).powi(2) + (q[1] - pc[1]).powi(2) + (q[2] - pc[2]).powi(2)).sqrt();
                if d < thresh {
                    pairs.push(PixelPoint { pixel, point: i });
                }
            }
        }
        assert!(!pairs.is_empty());
        assert_eq!(gt.pairs, pairs, "seed {seed}");

        for scale in 1..=3u32 {
            let grid = PatchGrid::new(16, 16, scale);
            let m = &gt.overlap[scale as usize - 1];
            for node in 0..nodes.len() {
                for patch in 0..grid.n_patches() {
                    let px = grid.pixels(patch);
                    let hit = px
                        .iter()
                        .filter(|&&q| pairs.iter().any(|pp| pp.pixel == q && assign[pp.point] == node))
                        .count();
                    assert_eq!(m.get(node, patch), hit as f64 / px.len() as f64);
                }
            }
        }
    }
}

#[test]
fn correspondence_on_ray_and_displaced_point() {
    let cfg = SceneConfig {
        n_points: 200,
        height: 16,
        width: 16,
        focal: 20.0,
        noise_sigma: 0.0,
        occlusion_fraction: 0.0,
        ..SceneConfig::default()
    };
    let mut s = generate_scene(&cfg, 9).unwrap();
    let pixel = (0..256).find(|&p| s.depth[p] > 0.0).unwrap();
    let on_ray = s.gt_pose.inverse().apply(&s.pixel_point(pixel).unwrap());
    let dir = s.pixel_point(pixel).unwrap().normalize();
    let off = s.gt_pose.inverse().apply(&(s.pixel_point(pixel).unwrap() + dir * 0.1));
    s.cloud.points = vec![[on_ray.x, on_ray.y, on_ray.z], [off.x, off.y, off.z]];
    s.cloud.descriptors = vec![0.0; 2 * s.cloud.channels];
    let gt = gt_correspondences(&s, &[0, 0], 1, 0.05);
    assert_eq!(gt.pairs, vec![PixelPoint { pixel, point: 0 }]);
}
