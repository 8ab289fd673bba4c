use super::kdtree::{dist2, KdTree};
use crate::error::{Error, Result};

/// Assigns every point to its nearest node, ties to the lowest node index.
pub fn point_to_node_partition(points: &[[f64; 3]], nodes: &[[f64; 3]]) -> Result<Vec<usize>> {
    if nodes.is_empty() {
        return Err(Error::Usage("point-to-node partition needs at least one node".into()));
    }
    let tree = KdTree::new(nodes);
    Ok(points
        .iter()
        .map(|p| tree.nearest(p).expect("non-empty tree").0)
        .collect())
}

/// Deterministic farthest-point sampling of `count` node positions.
///
/// Starts from point 0 and repeatedly adds the point farthest from the
/// current selection, lowest index on ties. Returns point indices.
pub fn farthest_point_sampling(points: &[[f64; 3]], count: usize) -> Vec<usize> {
    let count = count.min(points.len());
    if count == 0 {
        return Vec::new();
    }
    let mut chosen = vec![0usize];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &points[0])).collect();
    while chosen.len() < count {
        let mut best = 0;
        for i in 1..points.len() {
            if d[i] > d[best] {
                best = i;
            }
        }
        chosen.push(best);
        let q = points[best];
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, &q));
        }
    }
    chosen
}
