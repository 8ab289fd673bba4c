use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::TrainConfig;
use super::params::BoundParams;
use crate::amam::{domain_loss, DomainBatch, DomainClassifier};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sampling, gt_correspondences, point_to_node_partition, GroundTruth};
use crate::losses::{coarse_loss, fine_loss, LossTerms};
use crate::scenegen::SceneSample;
use crate::uhmm::{
    build_pyramid, coarse_match, fine_match, interaction_stage, l_sig, pool_groups, score_maps, uncertainty_layer,
    CoarseMatch, FineMatches, InteractionParams, PatchPyramid, PyramidParams, UncertaintyParams, SCALES,
};

/// A scene with its node partition and supervision precomputed.
#[derive(Clone, Debug)]
pub struct PreparedScene<'a> {
    pub sample: &'a SceneSample,
    /// `H·W × C` image features.
    pub pixels: Tensor,
    /// `N × C` point descriptors.
    pub descriptors: Tensor,
    /// Point index of every node.
    pub nodes: Vec<usize>,
    pub node_points: Vec<Vec<usize>>,
    pub gt: GroundTruth,
}

/// Image sides the three patch scales divide evenly.
pub const GRID_MULTIPLE: usize = 1 << SCALES;

/// Rejects images whose sides are not multiples of [`GRID_MULTIPLE`].
pub fn check_grid(width: usize, height: usize) -> Result<()> {
    if width % GRID_MULTIPLE != 0 || height % GRID_MULTIPLE != 0 {
        return Err(Error::Config(format!("image size {width}×{height} must be a multiple of {GRID_MULTIPLE} on both sides")));
    }
    Ok(())
}

pub fn prepare<'a>(sample: &'a SceneSample, cfg: &TrainConfig) -> Result<PreparedScene<'a>> {
    check_grid(sample.intrinsics.width, sample.intrinsics.height)?;
    let pts = &sample.cloud.points;
    let nodes = farthest_point_sampling(pts, cfg.n_nodes);
    let node_pos: Vec<[f64; 3]> = nodes.iter().map(|&i| pts[i]).collect();
    let assignment = point_to_node_partition(pts, &node_pos)?;
    let mut node_points = vec![Vec::new(); nodes.len()];
    for (i, &a) in assignment.iter().enumerate() {
        node_points[a].push(i);
    }
    let gt = gt_correspondences(sample, &assignment, nodes.len(), cfg.supervision_thresh);
    let c = sample.channels();
    Ok(PreparedScene {
        sample,
        pixels: Tensor::matrix(sample.n_pixels(), c, sample.image_features.clone()),
        descriptors: Tensor::matrix(pts.len(), c, sample.cloud.descriptors.clone()),
        nodes,
        node_points,
        gt,
    })
}

/// Intermediate features of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Per-pixel image features.
    pub f_i: Var,
    /// Per-point features.
    pub f_p: Var,
    pub pyramid: PatchPyramid,
    /// Patch features entering the score maps, per scale.
    pub z: [Var; SCALES],
    /// Per-patch variances and mean entropies when uncertainty is enabled.
    pub var: Option<[Var; SCALES]>,
    pub q: Option<[Var; SCALES]>,
    /// Node features `f_p1, f_p2, f_p3`.
    pub node_f: [Var; SCALES],
    /// Mean point feature per node, before the node projection.
    pub node_pooled: Var,
}

fn encoder(t: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let h = t.matmul(x, p.var(&format!("{name}.w1")))?;
    let h = t.add_row(h, p.var(&format!("{name}.b1")))?;
    let h = t.tanh(h);
    let o = t.matmul(h, p.var(&format!("{name}.w2")))?;
    t.add_row(o, p.var(&format!("{name}.b2")))
}

fn interaction(p: &BoundParams, s: usize) -> InteractionParams {
    let v = |w: &str| p.var(&format!("int{s}.{w}"));
    InteractionParams { w_q: v("w_q"), w_k: v("w_k"), w_v: v("w_v"), w1: v("w1"), b1: v("b1"), w2: v("w2"), b2: v("b2") }
}

pub fn classifier(p: &BoundParams) -> DomainClassifier {
    DomainClassifier {
        w1: p.var("clf.w1"),
        b1: p.var("clf.b1"),
        w2: p.var("clf.w2"),
        b2: p.var("clf.b2"),
        w3: p.var("clf.w3"),
        b3: p.var("clf.b3"),
    }
}

/// Standard-normal reparameterization noise for every scale, or `None` for
/// the deterministic (mean) path.
pub fn sample_eps<R: Rng>(rng: &mut R, scene: &PreparedScene, d: usize) -> [Tensor; SCALES] {
    let (w, h) = (scene.sample.width(), scene.sample.height());
    [1, 2, 3].map(|x| {
        let n = (w >> x) * (h >> x);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
    })
}

/// Encoders, pyramid, uncertainty layers and interaction stages.
pub fn forward(
    t: &mut Tape,
    p: &BoundParams,
    scene: &PreparedScene,
    cfg: &TrainConfig,
    eps: Option<&[Tensor; SCALES]>,
) -> Result<Forward> {
    let s = scene.sample;
    let x_i = t.constant(scene.pixels.clone());
    let x_p = t.constant(scene.descriptors.clone());
    let f_i = encoder(t, p, "enc_i", x_i)?;
    let f_p = encoder(t, p, "enc_p", x_p)?;
    let pp = PyramidParams {
        w: [1, 2, 3].map(|x| p.var(&format!("pyr{x}.w"))),
        b: [1, 2, 3].map(|x| p.var(&format!("pyr{x}.b"))),
    };
    let pyramid = build_pyramid(t, f_i, s.height(), s.width(), &pp)?;

    let (z, var, q) = if cfg.flags.enable_uncertainty {
        let mut z = Vec::with_capacity(SCALES);
        let mut var = Vec::with_capacity(SCALES);
        let mut q = Vec::with_capacity(SCALES);
        for x in 0..SCALES {
            let f = pyramid.features[x];
            let e = match eps {
                Some(e) => e[x].clone(),
                None => Tensor::zeros(t.value(f).shape().to_vec()),
            };
            let up = UncertaintyParams {
                w_mu: p.var(&format!("unc{}.w_mu", x + 1)),
                w_var: p.var(&format!("unc{}.w_var", x + 1)),
                b_var: p.var(&format!("unc{}.b_var", x + 1)),
            };
            let u = uncertainty_layer(t, f, &e, &up, cfg.variance_floor)?;
            z.push(u.z);
            var.push(u.var);
            q.push(u.q);
        }
        ([z[0], z[1], z[2]], Some([var[0], var[1], var[2]]), Some([q[0], q[1], q[2]]))
    } else {
        (pyramid.features, None, None)
    };

    let node_pooled = t.pool_rows(f_p, scene.node_points.clone())?;
    let h = t.matmul(node_pooled, p.var("node.w"))?;
    let h = t.add_row(h, p.var("node.b"))?;
    let f_p1 = t.tanh(h);
    let (f_p2, f_p3) = if cfg.flags.enable_interaction {
        let a = interaction_stage(t, f_p1, z[0], &interaction(p, 1))?.out;
        let b = interaction_stage(t, a, z[1], &interaction(p, 2))?.out;
        (a, b)
    } else {
        (f_p1, f_p1)
    };
    Ok(Forward { f_i, f_p, pyramid, z, var, q, node_f: [f_p1, f_p2, f_p3], node_pooled })
}

/// Pooled scale-1 image features and node-pooled point features, the two
/// sides seen by the domain classifier.
pub fn domain_features(t: &mut Tape, fwd: &Forward, scene: &PreparedScene) -> Result<(Var, Var)> {
    let s = scene.sample;
    let img = t.pool_rows(fwd.f_i, pool_groups(s.height(), s.width()))?;
    Ok((img, fwd.node_pooled))
}

/// Summed mean entropy over scales, if uncertainty is enabled.
pub fn total_entropy(t: &Tape, fwd: &Forward) -> Option<f64> {
    fwd.q.map(|q| q.iter().map(|&v| t.value(v).item()).sum())
}

/// All training loss terms of one scene.
pub fn scene_losses<R: Rng>(
    t: &mut Tape,
    p: &BoundParams,
    scene: &PreparedScene,
    fwd: &Forward,
    cfg: &TrainConfig,
    gamma_sig: f64,
    rng: &mut R,
) -> Result<LossTerms> {
    let coarse = coarse_loss(t, &fwd.node_f, &fwd.z, &scene.gt, &cfg.mining, &cfg.circle)?.loss;
    let fine = fine_loss(t, fwd.f_i, fwd.f_p, scene.sample, &scene.gt, &cfg.mining, &cfg.circle, rng)?.loss;
    let sig = match fwd.q {
        Some(q) => l_sig(t, &q, gamma_sig)?,
        None => t.scalar(0.0),
    };
    let domain = if cfg.flags.enable_amam {
        let (img, pts) = domain_features(t, fwd, scene)?;
        let (ni, np) = (t.value(img).rows(), t.value(pts).rows());
        let n = ni.min(np);
        if n == 0 {
            return Err(Error::Usage("domain loss needs image and point features".into()));
        }
        // balance the two domains by subsampling the larger one
        let pick = |rng: &mut R, total: usize| {
            let mut idx: Vec<usize> = sample(rng, total, n).into_vec();
            idx.sort_unstable();
            idx
        };
        let img = if ni > n { t.gather_rows(img, &pick(rng, ni))? } else { img };
        let pts = if np > n { t.gather_rows(pts, &pick(rng, np))? } else { pts };
        let batch = DomainBatch::pair(t, img, pts)?;
        Some(domain_loss(t, &batch, &classifier(p), Some(cfg.lambda_grl))?)
    } else {
        None
    };
    Ok(LossTerms { coarse, fine, sig, domain })
}

/// Coarse and fine matches of the deterministic forward pass.
pub fn predict(t: &mut Tape, fwd: &Forward, scene: &PreparedScene, cfg: &TrainConfig) -> Result<(Vec<CoarseMatch>, FineMatches)> {
    let maps = score_maps(t, &fwd.node_f, &fwd.z, &fwd.pyramid)?;
    let coarse = coarse_match(t.value(maps.fused), &maps.source, cfg.k);
    let s = scene.sample;
    let fine = fine_match(&coarse, t.value(fwd.f_i), t.value(fwd.f_p), &scene.node_points, s.width(), s.height(), cfg.k_f);
    Ok((coarse, fine))
}
