use nalgebra::Vector3;

use super::PatchGrid;
use crate::autodiff::Tensor;
use crate::scenegen::SceneSample;

/// A pixel (row-major flat index) paired with a point index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PixelPoint {
    pub pixel: usize,
    pub point: usize,
}

/// Ground-truth supervision for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Pixel-point correspondences sorted by `(pixel, point)`.
    pub pairs: Vec<PixelPoint>,
    /// For scales 1, 2, 3: `n_nodes × n_patches` matrix holding, per
    /// (node, patch), the fraction of the patch's pixels that correspond to
    /// at least one point of the node.
    pub overlap: Vec<Tensor>,
}

impl GroundTruth {
    /// Node-patch pairs at `scale` (1-based) with overlap fraction at least
    /// `overlap_min`.
    pub fn positives(&self, scale: usize, overlap_min: f64) -> Vec<(usize, usize)> {
        let m = &self.overlap[scale - 1];
        let (rows, cols) = m.dims2();
        let mut out = Vec::new();
        for a in 0..rows {
            for b in 0..cols {
                if m.get(a, b) >= overlap_min {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Points corresponding to each pixel.
    pub fn points_by_pixel(&self, n_pixels: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_pixels];
        for p in &self.pairs {
            out[p.pixel].push(p.point);
        }
        out
    }
}

/// Builds pixel-point correspondences and node-patch overlaps.
///
/// Pixel `q` corresponds to point `p` when `p`, mapped into the camera frame
/// by the ground-truth pose, projects inside `q`'s cell and lies closer than
/// `dist_thresh` meters to the back-projection of `q`'s center at its
/// rendered depth. Pixels without a rendered depth have no correspondences.
pub fn gt_correspondences(
    sample: &SceneSample,
    assignment: &[usize],
    n_nodes: usize,
    dist_thresh: f64,
) -> GroundTruth {
    let k = &sample.intrinsics;
    let mut pairs = Vec::new();
    for (i, p) in sample.cloud.points.iter().enumerate() {
        let pc = sample.gt_pose.apply(&Vector3::from(*p));
        let Some(pixel) = k.pixel_of(&pc) else { continue };
        let Some(q) = sample.pixel_point(pixel) else { continue };
        if (q - pc).norm() < dist_thresh {
            pairs.push(PixelPoint { pixel, point: i });
        }
    }
    pairs.sort();

    // pixel → set of nodes it corresponds to
    let mut pixel_nodes: Vec<Vec<usize>> = vec![Vec::new(); k.n_pixels()];
    for pp in &pairs {
        let node = assignment[pp.point];
        let list = &mut pixel_nodes[pp.pixel];
        if !list.contains(&node) {
            list.push(node);
        }
    }

    let overlap = (1..=3u32)
        .map(|scale| {
            let grid = PatchGrid::new(k.width, k.height, scale);
            let per_patch = (grid.side() * grid.side()) as f64;
            let mut m = Tensor::zeros(vec![n_nodes, grid.n_patches()]);
            let cols = grid.n_patches();
            for (pixel, nodes) in pixel_nodes.iter().enumerate() {
                let b = grid.patch_of(pixel);
                for &a in nodes {
                    m.data_mut()[a * cols + b] += 1.0 / per_patch;
                }
            }
            m
        })
        .collect();

    GroundTruth { pairs, overlap }
}
