//! Uncertainty-aware hierarchical matching: a three-scale image patch
//! pyramid, per-patch Gaussian uncertainty with an entropy budget,
//! cross-attention from point nodes to image patches, fused cosine score maps
//! and coarse-to-fine correspondence extraction.

mod matching;

use std::f64::consts::{E, PI};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::PatchGrid;

pub use matching::{coarse_match, dedup_matches, fine_match, region_pixels, mutual_topk, CoarseMatch, FineMatch, FineMatches};

/// Number of pyramid scales.
pub const SCALES: usize = 3;
/// Default lower bound added to every predicted variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Learnable maps of the three pyramid stages: stage `x` computes
/// `tanh(pool(prev) · w[x] + b[x])`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidParams {
    pub w: [Var; SCALES],
    pub b: [Var; SCALES],
}

#[derive(Clone, Debug)]
pub struct PatchPyramid {
    /// `n_patches(x) × d` per scale.
    pub features: [Var; SCALES],
    pub grids: [PatchGrid; SCALES],
}

impl PatchPyramid {
    /// For every scale-1 patch, the index of its ancestor at `scale` (1-based).
    pub fn ancestors(&self, scale: usize) -> Vec<usize> {
        let g1 = self.grids[0];
        let gx = self.grids[scale - 1];
        let shift = scale - 1;
        (0..g1.n_patches())
            .map(|p| {
                let (r, c) = (p / g1.cols(), p % g1.cols());
                (r >> shift) * gx.cols() + (c >> shift)
            })
            .collect()
    }
}

/// Groups of fine-grid cells averaged into each coarse cell when pooling a
/// `rows × cols` row-major grid by 2 along both axes.
pub fn pool_groups(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    let (r2, c2) = (rows / 2, cols / 2);
    let mut groups = Vec::with_capacity(r2 * c2);
    for r in 0..r2 {
        for c in 0..c2 {
            let tl = 2 * r * cols + 2 * c;
            groups.push(vec![tl, tl + 1, tl + cols, tl + cols + 1]);
        }
    }
    groups
}

/// Builds the three-scale patch pyramid from per-pixel features
/// (`height·width × c`, row-major pixels).
pub fn build_pyramid(t: &mut Tape, pixels: Var, height: usize, width: usize, p: &PyramidParams) -> Result<PatchPyramid> {
    if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 {
        return Err(Error::Usage(format!("pyramid needs H, W divisible by 8, got {height}×{width}")));
    }
    if t.value(pixels).rows() != height * width {
        return Err(Error::dim("build_pyramid", t.value(pixels).shape(), &[height * width]));
    }
    let mut prev = pixels;
    let (mut rows, mut cols) = (height, width);
    let mut features = Vec::with_capacity(SCALES);
    for x in 0..SCALES {
        let pooled = t.pool_rows(prev, pool_groups(rows, cols))?;
        let lin = t.matmul(pooled, p.w[x])?;
        let lin = t.add_row(lin, p.b[x])?;
        let f = t.tanh(lin);
        features.push(f);
        prev = f;
        rows /= 2;
        cols /= 2;
    }
    let grids = [1, 2, 3].map(|s| PatchGrid::new(width, height, s));
    Ok(PatchPyramid { features: [features[0], features[1], features[2]], grids })
}

/// Parameters of one uncertainty estimation layer.
#[derive(Clone, Copy, Debug)]
pub struct UncertaintyParams {
    /// `c × c` mean map.
    pub w_mu: Var,
    /// `c × c` variance map and its bias.
    pub w_var: Var,
    pub b_var: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct UncertainFeatures {
    pub mu: Var,
    /// Diagonal covariance `σ²`, `patches × c`.
    pub var: Var,
    pub sigma: Var,
    /// Reparameterized sample `μ + ε ⊙ σ`.
    pub z: Var,
    /// Mean per-patch differential entropy.
    pub q: Var,
}

/// `μ = f·W_μ`, `σ² = softplus(f·W_σ + b_σ) + floor`, `z = μ + ε ⊙ σ`.
pub fn uncertainty_layer(
    t: &mut Tape,
    f: Var,
    eps: &Tensor,
    p: &UncertaintyParams,
    floor: f64,
) -> Result<UncertainFeatures> {
    let mu = t.matmul(f, p.w_mu)?;
    let pre = t.matmul(f, p.w_var)?;
    let pre = t.add_row(pre, p.b_var)?;
    let var = t.softplus(pre);
    let var = t.shift(var, floor);
    let sigma = t.sqrt(var);
    let z = t.reparam_sample(mu, sigma, eps)?;
    let q = entropy(t, var);
    Ok(UncertainFeatures { mu, var, sigma, z, q })
}

/// Differential entropy of diagonal Gaussians, `½ Σ_c log(2πe σ²_c)`,
/// averaged over rows of `var`.
pub fn entropy(t: &mut Tape, var: Var) -> Var {
    let (rows, cols) = t.value(var).dims2();
    let logs = t.log(var);
    let s = t.sum(logs);
    let s = t.scale(s, 0.5 / rows as f64);
    t.shift(s, 0.5 * cols as f64 * (2.0 * PI * E).ln())
}

/// Variance budget hinge `max(0, γ − Σ q)`.
pub fn l_sig(t: &mut Tape, q: &[Var], gamma: f64) -> Result<Var> {
    let stacked = t.concat(q, crate::autodiff::Axis::Rows)?;
    let total = t.sum(stacked);
    let neg = t.neg(total);
    let gap = t.shift(neg, gamma);
    Ok(t.relu(gap))
}

/// Cross-attention weights plus the residual two-layer projection.
#[derive(Clone, Copy, Debug)]
pub struct InteractionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Interaction {
    pub out: Var,
    /// `nodes × patches` attention weights.
    pub attention: Var,
}

/// `A = softmax(Q Kᵀ / √d)` with `Q = f_p W_q`, `K = f_iu W_k`,
/// `V = f_iu W_v`; returns `f_p + tanh(A V W₁ + b₁) W₂ + b₂`.
pub fn interaction_stage(t: &mut Tape, f_p: Var, f_iu: Var, p: &InteractionParams) -> Result<Interaction> {
    let q = t.matmul(f_p, p.w_q)?;
    let k = t.matmul(f_iu, p.w_k)?;
    let v = t.matmul(f_iu, p.w_v)?;
    let dk = t.value(k).cols() as f64;
    let kt = t.transpose(k)?;
    let logits = t.matmul(q, kt)?;
    let logits = t.scale(logits, 1.0 / dk.sqrt());
    let attention = t.softmax_rows(logits);
    let ctx = t.matmul(attention, v)?;
    let h = t.matmul(ctx, p.w1)?;
    let h = t.add_row(h, p.b1)?;
    let h = t.tanh(h);
    let h = t.matmul(h, p.w2)?;
    let h = t.add_row(h, p.b2)?;
    let out = t.add(f_p, h)?;
    Ok(Interaction { out, attention })
}

/// Row-wise cosine similarity matrix `a_i · b_j / (‖a_i‖‖b_j‖)`; rows with
/// (near) zero norm score 0 against everything.
pub fn cosine_matrix(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = t.row_normalize(a);
    let bn = t.row_normalize(b);
    let bt = t.transpose(bn)?;
    t.matmul(an, bt)
}

#[derive(Clone, Debug)]
pub struct ScoreMapSet {
    /// `nodes × n_patches(x)` cosine maps per scale.
    pub maps: [Var; SCALES],
    /// `nodes × n_patches(1)`: elementwise max after replicating coarser
    /// scales onto their scale-1 descendants.
    pub fused: Var,
    /// Scale (0-based) that produced each fused entry, row-major.
    pub source: Vec<usize>,
    /// Feature rows with zero norm, whose scores were defined as 0.
    pub zero_rows: usize,
}

/// Cosine score maps between node features `f_p[x]` and image features
/// `f_i[x]` at every scale, fused by elementwise max.
pub fn score_maps(t: &mut Tape, f_p: &[Var; SCALES], f_i: &[Var; SCALES], pyramid: &PatchPyramid) -> Result<ScoreMapSet> {
    let mut maps = Vec::with_capacity(SCALES);
    let mut zero_rows = 0;
    for x in 0..SCALES {
        for v in [f_p[x], f_i[x]] {
            let val = t.value(v);
            zero_rows += (0..val.rows())
                .filter(|&r| val.row(r).iter().map(|a| a * a).sum::<f64>().sqrt() < crate::autodiff::ZERO_NORM)
                .count();
        }
        maps.push(cosine_matrix(t, f_p[x], f_i[x])?);
    }
    let mut aligned = vec![maps[0]];
    for x in 1..SCALES {
        aligned.push(t.gather_cols(maps[x], &pyramid.ancestors(x + 1))?);
    }
    let fused = t.max_stack(&aligned)?;
    let source = t.max_stack_argmax(fused).expect("max_stack node").to_vec();
    Ok(ScoreMapSet { maps: [maps[0], maps[1], maps[2]], fused, source, zero_rows })
}
