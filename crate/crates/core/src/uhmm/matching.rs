use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::geometry::PatchGrid;

/// Patch-level match between a point node and a scale-1 image patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseMatch {
    pub node: usize,
    /// Scale-1 patch index.
    pub patch: usize,
    /// Scale (1-based) whose score won the fusion at this cell.
    pub scale: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineMatch {
    pub pixel: usize,
    pub point: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FineMatches {
    /// Unique `(pixel, point)` pairs by descending score.
    pub matches: Vec<FineMatch>,
    /// Coarse pairs skipped because the node owns no points.
    pub skipped: usize,
}

/// Indices of the `k` largest entries of `row`, ties to the lower index.
fn topk(row: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    // + 0.0 folds -0.0 into 0.0 so signed zeros tie
    let mut idx: Vec<(usize, f64)> = row.map(|v| v + 0.0).enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx.into_iter().map(|(i, _)| i).collect()
}

/// Row-major `(row, col)` pairs where `col` is among row's top `k` and `row`
/// is among col's top `k`; `k` is capped at each side's length.
pub fn mutual_topk(s: &Tensor, k: usize) -> Vec<(usize, usize)> {
    let (m, n) = s.dims2();
    let mut in_col = vec![vec![false; m]; n];
    for (j, col) in in_col.iter_mut().enumerate() {
        for i in topk((0..m).map(|i| s.get(i, j)), k) {
            col[i] = true;
        }
    }
    let mut out = Vec::new();
    for i in 0..m {
        let mut row = topk(s.row(i).iter().copied(), k);
        row.sort_unstable();
        out.extend(row.into_iter().filter(|&j| in_col[j][i]).map(|j| (i, j)));
    }
    out
}

/// Mutual top-`k` over the fused `nodes × patches` score map. `source[i]`
/// holds the 0-based scale of flat entry `i`. Sorted by descending score,
/// then by `(node, patch)`.
pub fn coarse_match(fused: &Tensor, source: &[usize], k: usize) -> Vec<CoarseMatch> {
    let (m, n) = fused.dims2();
    if k > m.min(n) {
        log::warn!("coarse top-k {k} clamped to the {m}×{n} score map");
    }
    let mut out: Vec<CoarseMatch> = mutual_topk(fused, k.max(1))
        .into_iter()
        .map(|(a, b)| CoarseMatch { node: a, patch: b, scale: source[a * n + b] + 1, score: fused.get(a, b) })
        .collect();
    out.sort_by(|x, y| y.score.total_cmp(&x.score).then((x.node, x.patch).cmp(&(y.node, y.patch))));
    out
}

fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let nrm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm < crate::autodiff::ZERO_NORM {
                vec![0.0; r.len()]
            } else {
                r.iter().map(|x| x / nrm).collect()
            }
        })
        .collect()
}

/// Pixels of the patch at `scale` (1-based) containing scale-1 `patch`.
pub fn region_pixels(width: usize, height: usize, patch: usize, scale: usize) -> Vec<usize> {
    let g1 = PatchGrid::new(width, height, 1);
    let gx = PatchGrid::new(width, height, scale as u32);
    gx.pixels(gx.patch_of(g1.pixels(patch)[0]))
}

/// Dense matches inside every coarse pair: cosine similarity between the
/// pixels of the pair's patch (at its winning scale) and the node's points,
/// mutual top-`k_f`, then duplicate `(pixel, point)` pairs collapse to their
/// best score.
pub fn fine_match(
    coarse: &[CoarseMatch],
    pixel_features: &Tensor,
    point_features: &Tensor,
    node_points: &[Vec<usize>],
    width: usize,
    height: usize,
    k_f: usize,
) -> FineMatches {
    let pix = unit_rows(pixel_features);
    let pts = unit_rows(point_features);
    let mut found = Vec::new();
    let mut skipped = 0;
    for c in coarse {
        let region = region_pixels(width, height, c.patch, c.scale);
        let members = &node_points[c.node];
        if members.is_empty() || region.is_empty() {
            skipped += 1;
            continue;
        }
        let mut sim = Vec::with_capacity(region.len() * members.len());
        for &q in &region {
            for &p in members {
                sim.push(pix[q].iter().zip(&pts[p]).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let sim = Tensor::matrix(region.len(), members.len(), sim);
        found.extend(mutual_topk(&sim, k_f.max(1)).into_iter().map(|(i, j)| FineMatch {
            pixel: region[i],
            point: members[j],
            score: sim.get(i, j),
        }));
    }
    FineMatches { matches: dedup_matches(found), skipped }
}

/// Keeps the highest-scoring instance of every `(pixel, point)` pair, sorted
/// by descending score then `(pixel, point)`.
pub fn dedup_matches(found: Vec<FineMatch>) -> Vec<FineMatch> {
    let mut best: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for m in found {
        best.entry((m.pixel, m.point)).and_modify(|v| *v = v.max(m.score)).or_insert(m.score);
    }
    let mut matches: Vec<FineMatch> =
        best.into_iter().map(|((pixel, point), score)| FineMatch { pixel, point, score }).collect();
    matches.sort_by(|x, y| y.score.total_cmp(&x.score).then((x.pixel, x.point).cmp(&(y.pixel, y.point))));
    matches
}
