use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::config::{EvalConfig, TrainConfig};
use super::eval::{Evaluation, MetricMeans, SceneMetrics};
use super::model::{forward, prepare};
use super::train::{StepLog, ValPoint};
use super::params::ParamStore;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::scenegen::SceneSample;

/// Fraction of occluded pixels at which a scale-1 patch counts as corrupted.
pub const CORRUPTED_FRACTION: f64 = 0.5;

/// Class of a scale-1 patch by the scene generator's labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchClass {
    /// At least half of the pixels are occluded.
    Corrupted,
    /// No occluded pixel and every pixel rendered.
    Clean,
    Other,
}

pub fn patch_classes(sample: &SceneSample) -> Vec<PatchClass> {
    let g = PatchGrid::new(sample.width(), sample.height(), 1);
    (0..g.n_patches())
        .map(|p| {
            let px = g.pixels(p);
            let occ = px.iter().filter(|&&q| sample.occluded[q]).count();
            if occ as f64 >= CORRUPTED_FRACTION * px.len() as f64 {
                PatchClass::Corrupted
            } else if occ == 0 && px.iter().all(|&q| sample.depth[q] > 0.0) {
                PatchClass::Clean
            } else {
                PatchClass::Other
            }
        })
        .collect()
}

/// Mean predicted variance of every scale-1 patch (averaged over channels).
pub fn patch_variances(params: &ParamStore, cfg: &TrainConfig, sample: &SceneSample) -> Result<Vec<f64>> {
    if !cfg.flags.enable_uncertainty {
        return Err(Error::Usage("patch variances need the uncertainty module enabled".into()));
    }
    let scene = prepare(sample, cfg)?;
    let mut t = Tape::new();
    let p = params.bind(&mut t);
    let fwd = forward(&mut t, &p, &scene, cfg, None)?;
    let var = t.value(fwd.var.expect("uncertainty enabled")[0]);
    Ok((0..var.rows()).map(|r| var.row(r).iter().sum::<f64>() / var.cols() as f64).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub var: f64,
}

impl ClassStats {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 { x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        ClassStats { n, mean, var }
    }
}

/// Welch's test of `mean(corrupted) > mean(clean)` over per-patch variances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub corrupted: ClassStats,
    pub clean: ClassStats,
    pub t: f64,
    pub df: f64,
    /// One-sided p-value.
    pub p_value: f64,
}

/// One-sided Welch t-test that `a` has the larger mean.
pub fn welch_greater(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Usage(format!("welch test needs ≥ 2 samples per group, got {} and {}", a.len(), b.len())));
    }
    let (sa, sb) = (ClassStats::of(a), ClassStats::of(b));
    let (ea, eb) = (sa.var / sa.n as f64, sb.var / sb.n as f64);
    let se2 = ea + eb;
    if !(se2 > 0.0) {
        let p = if sa.mean > sb.mean { 0.0 } else { 1.0 };
        return Ok((f64::INFINITY.copysign(sa.mean - sb.mean), f64::INFINITY, p));
    }
    let t = (sa.mean - sb.mean) / se2.sqrt();
    let df = se2 * se2 / (ea * ea / (sa.n - 1) as f64 + eb * eb / (sb.n - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Domain(format!("students t: {e}")))?;
    Ok((t, df, dist.sf(t)))
}

/// Compares predicted variances of occlusion-corrupted and clean scale-1
/// patches across `samples`.
pub fn uncertainty_separation(params: &ParamStore, cfg: &TrainConfig, samples: &[SceneSample]) -> Result<Separation> {
    let per_scene = samples
        .par_iter()
        .map(|s| Ok((patch_classes(s), patch_variances(params, cfg, s)?)))
        .collect::<Result<Vec<_>>>()?;
    let (mut bad, mut good) = (Vec::new(), Vec::new());
    for (classes, vars) in per_scene {
        for (c, v) in classes.into_iter().zip(vars) {
            match c {
                PatchClass::Corrupted => bad.push(v),
                PatchClass::Clean => good.push(v),
                PatchClass::Other => {}
            }
        }
    }
    if bad.is_empty() {
        return Err(Error::Usage("dataset has no occlusion-corrupted patches".into()));
    }
    if good.is_empty() {
        return Err(Error::Usage("dataset has no clean patches".into()));
    }
    let (t, df, p_value) = welch_greater(&bad, &good)?;
    Ok(Separation { corrupted: ClassStats::of(&bad), clean: ClassStats::of(&good), t, df, p_value })
}

/// Everything reported about a trained model on a test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Always `"synthetic"`: numbers come from generated scenes and are not
    /// comparable with results on captured data.
    pub data: String,
    pub eval: EvalConfig,
    pub scenes: Vec<SceneMetrics>,
    pub means: MetricMeans,
    pub loss_curve: Vec<StepLog>,
    pub validation: Vec<ValPoint>,
    /// Variance statistics per patch class, when uncertainty is enabled and
    /// the split has both classes.
    pub variance: Option<Separation>,
}

impl MetricsReport {
    pub fn new(eval: &EvalConfig, evaluation: Evaluation, loss_curve: Vec<StepLog>, validation: Vec<ValPoint>, variance: Option<Separation>) -> Self {
        MetricsReport {
            data: "synthetic".into(),
            eval: *eval,
            scenes: evaluation.scenes,
            means: evaluation.means,
            loss_curve,
            validation,
            variance,
        }
    }

    /// Whether the stored means equal a recomputation from the rows.
    pub fn means_consistent(&self) -> bool {
        MetricMeans::from_scenes(&self.scenes) == self.means
    }
}
