//! Static 3-d tree for exact nearest-neighbor queries.

/// Balanced kd-tree over a fixed set of 3-d points.
///
/// Queries return the nearest point by Euclidean distance; among equidistant
/// points the lowest original index wins, matching a linear scan.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

#[derive(Clone, Debug)]
struct KdNode {
    index: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build(&mut idx, 0);
        tree
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let pts = &self.points;
        idx.sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let index = idx[mid];
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build(lo, depth + 1);
        let right = self.build(&mut hi[1..], depth + 1);
        self.nodes.push(KdNode {
            index,
            axis,
            left,
            right,
        });
        Some(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point, `None` when empty.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root?, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &[f64; 3], best: &mut (usize, f64)) {
        let n = &self.nodes[node];
        let p = &self.points[n.index];
        let d2 = dist2(p, q);
        if d2 < best.1 || (d2 == best.1 && n.index < best.0) {
            *best = (n.index, d2);
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, q, best);
        }
        // Equal-distance candidates may sit across the plane; only strictly
        // farther half-spaces are pruned.
        if let Some(c) = far {
            if diff * diff <= best.1 {
                self.search(c, q, best);
            }
        }
    }
}

pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}
