use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pnp_minimal, refine_pose, reprojection_error, PnPProblem};
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

/// Hypotheses evaluated in parallel before the serial scan.
const BLOCK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub max_iters: usize,
    /// Reprojection inlier threshold in pixels.
    pub inlier_thresh: f64,
    pub confidence: f64,
    pub seed: u64,
    pub min_sample: usize,
    pub refine_iters: usize,
    /// Refit every new best hypothesis on its inliers during the search.
    pub local_opt: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { max_iters: 1000, inlier_thresh: 3.0, confidence: 0.999, seed: 0, min_sample: 6, refine_iters: 50, local_opt: true }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("ransac max_iters must be ≥ 1".into()));
        }
        if !(self.inlier_thresh > 0.0) {
            return Err(Error::Config(format!("ransac inlier_thresh must be > 0, got {}", self.inlier_thresh)));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!("ransac confidence must lie in (0, 1), got {}", self.confidence)));
        }
        if self.min_sample < 4 {
            return Err(Error::Config(format!("ransac min_sample must be ≥ 4, got {}", self.min_sample)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    /// Refined pose on success, otherwise the best hypothesis seen (identity
    /// if there was none).
    pub transform: RigidTransform,
    pub inliers: Vec<bool>,
    /// Reprojection RMSE over the inliers, in pixels.
    pub rmse_px: f64,
    pub iterations: usize,
    pub success: bool,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn inlier_mask(t: &RigidTransform, p: &PnPProblem, thresh: f64) -> Vec<bool> {
    p.correspondences
        .iter()
        .map(|c| c.weight > 0.0 && reprojection_error(t, &p.intrinsics, c).is_some_and(|e| e < thresh))
        .collect()
}

fn rmse_px(t: &RigidTransform, p: &PnPProblem, mask: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (c, &m) in p.correspondences.iter().zip(mask) {
        if let (true, Some(e)) = (m, reprojection_error(t, &p.intrinsics, c)) {
            s += e * e;
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        (s / n as f64).sqrt()
    }
}

/// Truncated quadratic support cost: `Σ min(e², τ²)` with `τ²` for points
/// behind the camera or of zero weight. Lower is better.
fn msac_cost(t: &RigidTransform, p: &PnPProblem, thresh: f64) -> f64 {
    let cap = thresh * thresh;
    p.correspondences
        .iter()
        .map(|c| match reprojection_error(t, &p.intrinsics, c) {
            Some(e) if c.weight > 0.0 => (e * e).min(cap),
            _ => cap,
        })
        .sum()
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Best candidate of hypothesis `iter` by support cost.
fn hypothesis(p: &PnPProblem, cfg: &RansacConfig, iter: usize) -> Option<(f64, RigidTransform)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iter as u64);
    let idx = rand::seq::index::sample(&mut rng, p.correspondences.len(), cfg.min_sample);
    let sample: Vec<_> = idx.iter().map(|i| p.correspondences[i]).collect();
    let mut best: Option<(f64, RigidTransform)> = None;
    for t in pnp_minimal(&sample, &p.intrinsics) {
        // the linear solve is noisy on few points; polish it on the sample
        let t = refine_pose(&t, &sample, &p.intrinsics, POLISH_ITERS).transform;
        let c = msac_cost(&t, p, cfg.inlier_thresh);
        if best.as_ref().is_none_or(|b| c < b.0) {
            best = Some((c, t));
        }
    }
    best
}

/// Refits a new best hypothesis on its own inliers and keeps the refit if
/// it lowers the support cost.
fn local_opt(p: &PnPProblem, cfg: &RansacConfig, cost: f64, t: RigidTransform) -> (f64, RigidTransform) {
    let mask = inlier_mask(&t, p, cfg.inlier_thresh);
    if count(&mask) < cfg.min_sample {
        return (cost, t);
    }
    let set: Vec<_> = p.correspondences.iter().zip(&mask).filter(|m| *m.1).map(|m| *m.0).collect();
    let r = refine_pose(&t, &set, &p.intrinsics, LO_ITERS);
    let c = msac_cost(&r.transform, p, cfg.inlier_thresh);
    if c < cost { (c, r.transform) } else { (cost, t) }
}

/// Gauss-Newton iterations on each minimal sample.
const POLISH_ITERS: usize = 5;
/// Gauss-Newton iterations of each local refit.
const LO_ITERS: usize = 10;

/// Iterations needed to see an all-inlier sample with `confidence`.
fn required_iters(inliers: usize, n: usize, s: usize, confidence: f64, cap: usize) -> usize {
    let w = inliers as f64 / n as f64;
    let ws = w.powi(s as i32);
    if ws >= 1.0 {
        return 1;
    }
    if ws <= 0.0 {
        return cap;
    }
    let k = (1.0 - confidence).ln() / (1.0 - ws).ln();
    if k.is_finite() { (k.ceil() as usize).clamp(1, cap) } else { cap }
}

/// Seeded hypothesize-and-verify PnP.
///
/// Hypothesis `i` draws its sample from a ChaCha8 stream keyed by
/// `(seed, i)`, so evaluating blocks in parallel and scanning them in order
/// gives the same result as a serial loop. The loop stops once the inlier
/// ratio of the best hypothesis makes `confidence` reachable. Hypotheses are
/// ranked by truncated quadratic reprojection cost, and every new best is
/// refit on its inliers when `local_opt` is set. The winner is
/// refined on its inliers and the mask is recomputed under the refined pose.
pub fn ransac_pnp(problem: &PnPProblem, cfg: &RansacConfig) -> Result<PoseEstimate> {
    cfg.validate()?;
    let n = problem.correspondences.len();
    if n < cfg.min_sample.max(4) {
        return Err(Error::Usage(format!("ransac needs at least {} correspondences, got {n}", cfg.min_sample.max(4))));
    }
    if problem.correspondences.iter().any(|c| !(c.weight >= 0.0)) {
        return Err(Error::Domain("correspondence weights must be ≥ 0".into()));
    }
    let mut best: Option<(f64, RigidTransform)> = None;
    let mut needed = cfg.max_iters;
    let mut done = 0;
    while done < needed {
        let end = (done + BLOCK).min(needed);
        let block: Vec<_> = (done..end).into_par_iter().map(|i| hypothesis(problem, cfg, i)).collect();
        for h in block {
            done += 1;
            if let Some((c, t)) = h {
                if best.as_ref().is_none_or(|b| c < b.0) {
                    let (c, t) = if cfg.local_opt { local_opt(problem, cfg, c, t) } else { (c, t) };
                    let inl = count(&inlier_mask(&t, problem, cfg.inlier_thresh));
                    best = Some((c, t));
                    needed = required_iters(inl, n, cfg.min_sample, cfg.confidence, cfg.max_iters);
                }
            }
            if done >= needed {
                break;
            }
        }
    }
    let Some((_, t)) = best else {
        return Ok(PoseEstimate {
            transform: RigidTransform::identity(),
            inliers: vec![false; n],
            rmse_px: f64::INFINITY,
            iterations: done,
            success: false,
        });
    };
    let inliers = inlier_mask(&t, problem, cfg.inlier_thresh);
    if count(&inliers) < cfg.min_sample {
        let rmse_px = rmse_px(&t, problem, &inliers);
        return Ok(PoseEstimate { transform: t, inliers, rmse_px, iterations: done, success: false });
    }
    let mut t = t;
    let mut mask = inliers;
    for _ in 0..2 {
        let set: Vec<_> = problem.correspondences.iter().zip(&mask).filter(|p| *p.1).map(|p| *p.0).collect();
        let r = refine_pose(&t, &set, &problem.intrinsics, cfg.refine_iters);
        let next = inlier_mask(&r.transform, problem, cfg.inlier_thresh);
        if count(&next) < cfg.min_sample {
            break;
        }
        t = r.transform;
        let same = next == mask;
        mask = next;
        if same {
            break;
        }
    }
    let rmse = rmse_px(&t, problem, &mask);
    let success = count(&mask) >= cfg.min_sample;
    Ok(PoseEstimate { transform: t, inliers: mask, rmse_px: rmse, iterations: done, success })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::pose::Correspondence;
    use nalgebra::Vector3;

    fn problem(gt: &RigidTransform, n: usize) -> PnPProblem {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let correspondences = (0..n)
            .map(|i| {
                let f = i as f64;
                let p = [(f * 0.7).sin(), (f * 1.3).cos() * 0.8, (f * 0.4).sin() * 0.5];
                let c = gt.apply(&Vector3::from(p));
                Correspondence::new([k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy], p)
            })
            .collect();
        PnPProblem { correspondences, intrinsics: k }
    }

    #[test]
    fn exact_matches_all_inliers() {
        let gt = RigidTransform::from_axis_angle(Vector3::new(0.1, 1.0, 0.2), 0.25, Vector3::new(0.05, -0.1, 4.0));
        let e = ransac_pnp(&problem(&gt, 50), &RansacConfig::default()).unwrap();
        assert!(e.success);
        assert_eq!(e.inlier_count(), 50);
        assert!((e.transform.rotation() - gt.rotation()).abs().max() < 1e-8);
        assert!((e.transform.translation() - gt.translation()).norm() < 1e-8);
    }

    #[test]
    fn too_few_correspondences_is_usage_error() {
        let p = problem(&RigidTransform::from_axis_angle(Vector3::x(), 0.0, Vector3::new(0.0, 0.0, 4.0)), 3);
        assert!(matches!(ransac_pnp(&p, &RansacConfig::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let p = problem(&RigidTransform::from_axis_angle(Vector3::x(), 0.0, Vector3::new(0.0, 0.0, 4.0)), 10);
        let cfg = RansacConfig { confidence: 1.0, ..Default::default() };
        assert!(matches!(ransac_pnp(&p, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn required_iterations_formula() {
        assert_eq!(required_iters(10, 10, 6, 0.999, 1000), 1);
        assert_eq!(required_iters(0, 10, 6, 0.999, 1000), 1000);
        // w = 0.5, s = 6: ln(0.001) / ln(1 - 1/64) ≈ 438.6
        assert_eq!(required_iters(50, 100, 6, 0.999, 1000), 439);
    }
}
