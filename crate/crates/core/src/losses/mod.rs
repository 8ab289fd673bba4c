//! Circle loss over cross-modal descriptor pairs, coarse and fine
//! supervision built on it, and total-loss assembly.

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::GroundTruth;
use crate::scenegen::SceneSample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircleParams {
    pub delta_p: f64,
    pub delta_n: f64,
    pub gamma: f64,
    pub lambda_p: f64,
    pub lambda_n: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        CircleParams { delta_p: 0.1, delta_n: 1.4, gamma: 10.0, lambda_p: 1.0, lambda_n: 1.0 }
    }
}

impl CircleParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.delta_p && self.delta_p < self.delta_n) {
            return Err(Error::Config(format!("circle loss needs 0 < delta_p < delta_n, got {self:?}")));
        }
        if !(self.gamma > 0.0 && self.lambda_p >= 0.0 && self.lambda_n >= 0.0) {
            return Err(Error::Config(format!("circle loss needs gamma > 0 and lambdas >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Positive and negative pairs of one anchor, as indices into a distance
/// vector.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnchorPairs {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// A scalar loss with bookkeeping about its anchors.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub loss: Var,
    /// Anchors that contributed a nonzero term.
    pub active: usize,
    /// Anchors flagged as uninformative (no positives or no negatives).
    pub flagged: usize,
}

/// Mean over anchors of
/// `(1/γ) log[1 + Σ_P exp(β_p (d − Δ_p)) · Σ_N exp(β_n (Δ_n − d))]`
/// with detached weights `β_p = γ λ_p [d − Δ_p]₊`, `β_n = γ λ_n [Δ_n − d]₊`.
///
/// `dist` is a vector of pair distances; anchors index into it. Anchors
/// with an empty positive or negative set contribute 0.
pub fn circle_loss(t: &mut Tape, dist: Var, anchors: &[AnchorPairs], p: &CircleParams) -> Result<LossTerm> {
    if anchors.is_empty() {
        return Err(Error::Usage("circle loss needs at least one anchor".into()));
    }
    if anchors.iter().all(|a| a.pos.is_empty() && a.neg.is_empty()) {
        return Err(Error::Usage("circle loss: every anchor has empty positive and negative sets".into()));
    }
    let d = t.value(dist).data().to_vec();
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    let mut pos_seg = Vec::new();
    let mut neg_seg = Vec::new();
    let mut flagged = 0;
    for a in anchors {
        if a.pos.is_empty() || a.neg.is_empty() {
            flagged += 1;
            continue;
        }
        pos_seg.push(pos_idx.len()..pos_idx.len() + a.pos.len());
        pos_idx.extend_from_slice(&a.pos);
        neg_seg.push(neg_idx.len()..neg_idx.len() + a.neg.len());
        neg_idx.extend_from_slice(&a.neg);
    }
    let active = pos_seg.len();
    if active == 0 {
        return Ok(LossTerm { loss: t.scalar(0.0), active, flagged });
    }
    let beta_p: Vec<f64> = pos_idx.iter().map(|&i| p.gamma * p.lambda_p * (d[i] - p.delta_p).max(0.0)).collect();
    let beta_n: Vec<f64> = neg_idx.iter().map(|&i| p.gamma * p.lambda_n * (p.delta_n - d[i]).max(0.0)).collect();

    let dp = t.gather_elems(dist, &pos_idx)?;
    let dp = t.shift(dp, -p.delta_p);
    let bp = t.constant(Tensor::vector(beta_p));
    let lp = t.mul(dp, bp)?;
    let lse_p = t.segment_logsumexp(lp, pos_seg)?;

    let dn = t.gather_elems(dist, &neg_idx)?;
    let dn = t.neg(dn);
    let dn = t.shift(dn, p.delta_n);
    let bn = t.constant(Tensor::vector(beta_n));
    let ln = t.mul(dn, bn)?;
    let lse_n = t.segment_logsumexp(ln, neg_seg)?;

    // log(1 + e^a e^b) = softplus(a + b)
    let s = t.add(lse_p, lse_n)?;
    let per = t.softplus(s);
    let total = t.sum(per);
    let loss = t.scale(total, 1.0 / (p.gamma * anchors.len() as f64));
    Ok(LossTerm { loss, active, flagged })
}

/// One anchor row with its positive rows and candidate negative rows in the
/// other modality.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MiningAnchor {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Circle loss between unit-normalized rows of `anchors_f` and `others_f`.
/// Each anchor keeps its `neg_ratio × |P|` hardest (closest) candidate
/// negatives, ties to the lower index.
pub fn mined_circle_loss(
    t: &mut Tape,
    anchors_f: Var,
    others_f: Var,
    anchors: &[MiningAnchor],
    neg_ratio: usize,
    p: &CircleParams,
) -> Result<LossTerm> {
    let a = t.row_normalize(anchors_f);
    let o = t.row_normalize(others_f);
    let (av, ov) = (t.value(a).clone(), t.value(o).clone());
    let d2 = |i: usize, j: usize| av.row(i).iter().zip(ov.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut pairs = Vec::new();
    let mut sets = Vec::with_capacity(anchors.len());
    for m in anchors {
        let mut negs: Vec<(f64, usize)> = m.negatives.iter().map(|&j| (d2(m.anchor, j), j)).collect();
        negs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        negs.truncate(neg_ratio * m.positives.len());
        let mut set = AnchorPairs::default();
        for &j in &m.positives {
            set.pos.push(pairs.len());
            pairs.push((m.anchor, j));
        }
        for &(_, j) in &negs {
            set.neg.push(pairs.len());
            pairs.push((m.anchor, j));
        }
        sets.push(set);
    }
    let dist = t.pair_distances(a, o, &pairs)?;
    circle_loss(t, dist, &sets, p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    /// Patch positives need at least this overlap fraction; patches with
    /// zero overlap are negatives and the band between is ignored.
    pub overlap_min: f64,
    pub neg_ratio: usize,
    /// Fine anchors sampled per scene.
    pub fine_anchors: usize,
    /// Fine negatives lie farther than this (meters) from the anchor's
    /// surface point.
    pub fine_neg_dist: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { overlap_min: 0.3, neg_ratio: 4, fine_anchors: 64, fine_neg_dist: 0.15 }
    }
}

/// Circle loss at every scale with nodes as anchors and image patches as
/// candidates, averaged over scales that have at least one anchor.
pub fn coarse_loss(
    t: &mut Tape,
    f_p: &[Var],
    f_i: &[Var],
    gt: &GroundTruth,
    mining: &MiningConfig,
    p: &CircleParams,
) -> Result<LossTerm> {
    let mut per_scale = Vec::new();
    let (mut active, mut flagged) = (0, 0);
    for x in 0..f_p.len() {
        let ov = &gt.overlap[x];
        let (nodes, patches) = ov.dims2();
        let mut anchors = Vec::new();
        for a in 0..nodes {
            let row = ov.row(a);
            let positives: Vec<usize> = (0..patches).filter(|&b| row[b] >= mining.overlap_min).collect();
            if positives.is_empty() {
                flagged += 1;
                continue;
            }
            let negatives = (0..patches).filter(|&b| row[b] == 0.0).collect();
            anchors.push(MiningAnchor { anchor: a, positives, negatives });
        }
        if anchors.is_empty() {
            continue;
        }
        let term = mined_circle_loss(t, f_p[x], f_i[x], &anchors, mining.neg_ratio, p)?;
        active += term.active;
        flagged += term.flagged;
        per_scale.push(term.loss);
    }
    if per_scale.is_empty() {
        return Ok(LossTerm { loss: t.scalar(0.0), active, flagged });
    }
    let n = per_scale.len() as f64;
    let stacked = t.concat(&per_scale, crate::autodiff::Axis::Rows)?;
    let s = t.sum(stacked);
    Ok(LossTerm { loss: t.scale(s, 1.0 / n), active, flagged })
}

/// Circle loss with sampled ground-truth pixels as anchors against point
/// features: positives are the pixel's corresponding points, negatives are
/// points farther than `fine_neg_dist` from the pixel's surface point.
pub fn fine_loss<R: Rng>(
    t: &mut Tape,
    pixel_f: Var,
    point_f: Var,
    sample_: &SceneSample,
    gt: &GroundTruth,
    mining: &MiningConfig,
    p: &CircleParams,
    rng: &mut R,
) -> Result<LossTerm> {
    let by_pixel = gt.points_by_pixel(sample_.n_pixels());
    let pixels: Vec<usize> = (0..by_pixel.len()).filter(|&q| !by_pixel[q].is_empty()).collect();
    if pixels.is_empty() {
        return Ok(LossTerm { loss: t.scalar(0.0), active: 0, flagged: 0 });
    }
    let n = mining.fine_anchors.min(pixels.len());
    let mut chosen: Vec<usize> = sample(rng, pixels.len(), n).into_iter().map(|i| pixels[i]).collect();
    chosen.sort_unstable();
    let cam: Vec<Vector3<f64>> =
        sample_.cloud.points.iter().map(|q| sample_.gt_pose.apply(&Vector3::from(*q))).collect();
    let anchors: Vec<MiningAnchor> = chosen
        .iter()
        .map(|&q| {
            let s = sample_.pixel_point(q).expect("corresponding pixels have depth");
            let negatives = (0..cam.len()).filter(|&j| (cam[j] - s).norm() > mining.fine_neg_dist).collect();
            MiningAnchor { anchor: q, positives: by_pixel[q].clone(), negatives }
        })
        .collect();
    mined_circle_loss(t, pixel_f, point_f, &anchors, mining.neg_ratio, p)
}

/// Per-term weights of the total loss; all 1 by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub coarse: f64,
    pub fine: f64,
    pub sig: f64,
    pub domain: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { coarse: 1.0, fine: 1.0, sig: 1.0, domain: 1.0 }
    }
}

/// The four loss terms of one step; `domain` is `None` when alignment is off.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub coarse: Var,
    pub fine: Var,
    pub sig: Var,
    pub domain: Option<Var>,
}

/// `L = L_coarse + L_fine + L_sig + L_d`, each term scaled by its weight.
/// A non-finite term aborts with that term's name.
pub fn total_loss(t: &mut Tape, terms: &LossTerms, w: &LossWeights, step: usize) -> Result<Var> {
    let mut parts = vec![("coarse", terms.coarse, w.coarse), ("fine", terms.fine, w.fine), ("sig", terms.sig, w.sig)];
    if let Some(d) = terms.domain {
        parts.push(("domain", d, w.domain));
    }
    let mut scaled = Vec::with_capacity(parts.len());
    for (name, v, weight) in parts {
        if !t.value(v).all_finite() {
            return Err(Error::NumericalAbort { step, term: name.into() });
        }
        scaled.push(if weight == 1.0 { v } else { t.scale(v, weight) });
    }
    let stacked = t.concat(&scaled, crate::autodiff::Axis::Rows)?;
    let total = t.sum(stacked);
    if !t.value(total).all_finite() {
        return Err(Error::NumericalAbort { step, term: "total".into() });
    }
    Ok(total)
}
