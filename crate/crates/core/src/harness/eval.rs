use std::io::Write;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, TrainConfig};
use super::model::{domain_features, forward, predict, prepare};
use super::params::ParamStore;
use crate::amam::mmd;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::pose::{pose_errors, ransac_pnp, Correspondence, PnPProblem, PoseEstimate, RansacConfig};
use crate::scenegen::SceneSample;
use crate::uhmm::FineMatch;

/// Per-scene evaluation results. Pose errors are `None` when RANSAC failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: u64,
    pub n_matches: usize,
    pub ir: f64,
    pub fmr: bool,
    pub rr: bool,
    pub rot_err_deg: Option<f64>,
    pub trans_err_m: Option<f64>,
    pub rmse_m: Option<f64>,
    pub mmd: Option<f64>,
}

/// Averages over scenes. Pose errors average over scenes with an estimate
/// and MMD over scenes where it was defined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub ir: f64,
    pub fmr: f64,
    pub rr: f64,
    pub rot_err_deg: Option<f64>,
    pub trans_err_m: Option<f64>,
    pub rmse_m: Option<f64>,
    pub mmd: Option<f64>,
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricMeans {
    pub fn from_scenes(scenes: &[SceneMetrics]) -> Self {
        let frac = |f: fn(&SceneMetrics) -> bool| mean_of(scenes.iter().map(|s| f(s) as u8 as f64)).unwrap_or(0.0);
        MetricMeans {
            ir: mean_of(scenes.iter().map(|s| s.ir)).unwrap_or(0.0),
            fmr: frac(|s| s.fmr),
            rr: frac(|s| s.rr),
            rot_err_deg: mean_of(scenes.iter().filter_map(|s| s.rot_err_deg)),
            trans_err_m: mean_of(scenes.iter().filter_map(|s| s.trans_err_m)),
            rmse_m: mean_of(scenes.iter().filter_map(|s| s.rmse_m)),
            mmd: mean_of(scenes.iter().filter_map(|s| s.mmd)),
        }
    }
}

/// Fraction of matches whose pixel surface point lies strictly within
/// `thresh` meters of the matched point under the true pose. Pixels without
/// depth count as outliers and an empty set scores 0.
pub fn inlier_ratio(sample: &SceneSample, matches: &[FineMatch], thresh: f64) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    let good = matches.iter().filter(|m| is_inlier(sample, m.pixel, m.point, thresh)).count();
    good as f64 / matches.len() as f64
}

pub fn is_inlier(sample: &SceneSample, pixel: usize, point: usize, thresh: f64) -> bool {
    match sample.pixel_point(pixel) {
        Some(s) => (s - sample.gt_pose.apply(&Vector3::from(sample.cloud.points[point]))).norm() < thresh,
        None => false,
    }
}

/// 2-d/3-d correspondences of a match set, pixel centers as `(u, v)`.
pub fn correspondences(sample: &SceneSample, matches: &[FineMatch]) -> Vec<Correspondence> {
    matches
        .iter()
        .map(|m| {
            let (u, v) = sample.pixel_center(m.pixel);
            Correspondence::new([u, v], sample.cloud.points[m.point])
        })
        .collect()
}

/// Robust pose from matches, or `None` when there are too few matches or
/// RANSAC finds no consensus.
pub fn register(sample: &SceneSample, matches: &[FineMatch], ransac: &RansacConfig) -> Result<Option<PoseEstimate>> {
    if matches.len() < ransac.min_sample.max(4) {
        return Ok(None);
    }
    let problem = PnPProblem { correspondences: correspondences(sample, matches), intrinsics: sample.intrinsics };
    let est = ransac_pnp(&problem, &RansacConfig { seed: ransac.seed ^ sample.seed, ..*ransac })?;
    Ok(est.success.then_some(est))
}

/// Metrics of one scene given its matches and an optional pose estimate.
pub fn scene_metrics(
    sample: &SceneSample,
    matches: &[FineMatch],
    pose: Option<&PoseEstimate>,
    mmd: Option<f64>,
    eval: &EvalConfig,
) -> SceneMetrics {
    let ir = inlier_ratio(sample, matches, eval.ir_thresh);
    let errs = pose.map(|p| pose_errors(&p.transform, &sample.gt_pose, &sample.cloud.points));
    SceneMetrics {
        scene_id: sample.seed,
        n_matches: matches.len(),
        ir,
        fmr: ir > eval.fmr_thresh,
        rr: errs.is_some_and(|e| e.rmse_m < eval.rr_thresh),
        rot_err_deg: errs.map(|e| e.rot_deg),
        trans_err_m: errs.map(|e| e.trans_m),
        rmse_m: errs.map(|e| e.rmse_m),
        mmd,
    }
}

/// Fine matches of the deterministic forward pass and the MMD between
/// pooled image and node features.
pub fn scene_matches(params: &ParamStore, cfg: &TrainConfig, sample: &SceneSample) -> Result<(Vec<FineMatch>, Option<f64>)> {
    let scene = prepare(sample, cfg)?;
    let mut t = Tape::new();
    let p = params.bind(&mut t);
    let fwd = forward(&mut t, &p, &scene, cfg, None)?;
    let (_, fine) = predict(&mut t, &fwd, &scene, cfg)?;
    let (img, pts) = domain_features(&mut t, &fwd, &scene)?;
    let gap = mmd(t.value(img), t.value(pts)).ok().map(|m| m.value());
    Ok((fine.matches, gap))
}

/// Matching and registration of one scene.
pub fn evaluate_scene(params: &ParamStore, cfg: &TrainConfig, eval: &EvalConfig, sample: &SceneSample) -> Result<SceneMetrics> {
    let (matches, gap) = scene_matches(params, cfg, sample)?;
    let pose = register(sample, &matches, &eval.ransac)?;
    Ok(scene_metrics(sample, &matches, pose.as_ref(), gap, eval))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scenes: Vec<SceneMetrics>,
    pub means: MetricMeans,
}

/// Evaluates every scene in parallel; rows keep the input order.
pub fn evaluate(params: &ParamStore, cfg: &TrainConfig, eval: &EvalConfig, samples: &[SceneSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Usage("evaluation needs at least one scene".into()));
    }
    let scenes = samples.par_iter().map(|s| evaluate_scene(params, cfg, eval, s)).collect::<Result<Vec<_>>>()?;
    let means = MetricMeans::from_scenes(&scenes);
    Ok(Evaluation { scenes, means })
}

pub const CSV_HEADER: &str = "scene_id,ir,fmr_flag,rr_flag,rot_err_deg,trans_err_m,rmse_m,mmd";

/// One row per scene; missing values are empty fields.
pub fn write_csv<W: Write>(mut w: W, scenes: &[SceneMetrics]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    writeln!(w, "{CSV_HEADER}")?;
    for s in scenes {
        writeln!(
            w,
            "{},{:.17e},{},{},{},{},{},{}",
            s.scene_id,
            s.ir,
            s.fmr as u8,
            s.rr as u8,
            opt(s.rot_err_deg),
            opt(s.trans_err_m),
            opt(s.rmse_m),
            opt(s.mmd)
        )?;
    }
    Ok(())
}
