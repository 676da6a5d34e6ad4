//! Axis-aligned KD-tree with median splits over a fixed point set.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        lo: usize,
        hi: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl KdTree {
    pub fn build(positions: &[Vector3<f64>]) -> Self {
        let points: Vec<[f64; 3]> = positions.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut tree = KdTree {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
            root: None,
        };
        if !tree.points.is_empty() {
            let n = tree.points.len();
            tree.root = Some(tree.build_range(0, n));
        }
        tree
    }

    fn build_range(&mut self, lo: usize, hi: usize) -> usize {
        if hi - lo <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { lo, hi });
            return self.nodes.len() - 1;
        }
        // split along the widest extent of this range
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &i in &self.order[lo..hi] {
            for a in 0..3 {
                min[a] = min[a].min(self.points[i][a]);
                max[a] = max[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b])))
            .unwrap_or(0);
        let mid = lo + (hi - lo) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        let left = self.build_range(lo, mid);
        let right = self.build_range(mid, hi);
        self.nodes.push(Node::Split {
            axis,
            value,
            left,
            right,
        });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    fn dist2(&self, i: usize, q: &[f64; 3]) -> f64 {
        let p = &self.points[i];
        let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
        dx * dx + dy * dy + dz * dz
    }

    /// Every point strictly closer than `radius`, as `(index, distance)`
    /// sorted by distance then index.
    pub fn within(&self, query: &Vector3<f64>, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let Some(root) = self.root else {
            return out;
        };
        let q = [query.x, query.y, query.z];
        let r2 = radius * radius;
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            match self.nodes[n] {
                Node::Leaf { lo, hi } => {
                    for &i in &self.order[lo..hi] {
                        let d2 = self.dist2(i, &q);
                        if d2 < r2 {
                            out.push((i, d2.sqrt()));
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = q[axis] - value;
                    // points equal to the split value can live on either side
                    if diff <= 0.0 || diff * diff < r2 {
                        stack.push(left);
                    }
                    if diff >= 0.0 || diff * diff < r2 {
                        stack.push(right);
                    }
                }
            }
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    /// The `k` nearest points as `(index, distance)`, ascending.
    pub fn nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        #[derive(PartialEq)]
        struct Cand(f64, usize);
        impl Eq for Cand {}
        impl PartialOrd for Cand {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Cand {
            fn cmp(&self, other: &Self) -> Ordering {
                self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
            }
        }

        let Some(root) = self.root else {
            return Vec::new();
        };
        if k == 0 {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        let mut stack: Vec<(usize, f64)> = vec![(root, 0.0)];
        while let Some((n, bound)) = stack.pop() {
            if heap.len() == k && bound > heap.peek().map_or(f64::INFINITY, |c| c.0) {
                continue;
            }
            match self.nodes[n] {
                Node::Leaf { lo, hi } => {
                    for &i in &self.order[lo..hi] {
                        let c = Cand(self.dist2(i, &q), i);
                        if heap.len() < k {
                            heap.push(c);
                        } else if c < *heap.peek().unwrap() {
                            heap.pop();
                            heap.push(c);
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = q[axis] - value;
                    let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                    // push far first so near is explored first
                    stack.push((far, bound.max(diff * diff)));
                    stack.push((near, bound));
                }
            }
        }
        let mut out: Vec<(usize, f64)> = heap.into_iter().map(|c| (c.1, c.0.sqrt())).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn scan_within(pts: &[Vector3<f64>], q: &Vector3<f64>, r: f64) -> Vec<(usize, f64)> {
        let mut v: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm()))
            .filter(|(_, d)| *d < r)
            .collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        v
    }

    #[test]
    fn knn_matches_scan() {
        let pts = random_points(2000, 3);
        let tree = KdTree::build(&pts);
        let queries = random_points(200, 4);
        for q in &queries {
            let got = tree.nearest(q, 7);
            let mut all: Vec<_> = pts.iter().enumerate().map(|(i, p)| (i, (p - q).norm())).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let want: Vec<usize> = all[..7].iter().map(|c| c.0).collect();
            let got_idx: Vec<usize> = got.iter().map(|c| c.0).collect();
            assert_eq!(got_idx, want);
        }
    }

    #[test]
    fn duplicate_coordinates_are_all_found() {
        let pts = vec![Vector3::new(0.5, 0.0, 0.0); 40];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.within(&Vector3::new(0.5, 0.0, 0.0), 1e-9).len(), 40);
        assert_eq!(tree.nearest(&Vector3::zeros(), 40).len(), 40);
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::build(&[]);
        assert!(tree.within(&Vector3::zeros(), 1.0).is_empty());
        assert!(tree.nearest(&Vector3::zeros(), 3).is_empty());
    }

    #[test]
    fn radius_matches_scan() {
        let pts = random_points(3000, 11);
        let tree = KdTree::build(&pts);
        for (j, q) in random_points(300, 12).iter().enumerate() {
            let r = 0.05 + 0.001 * j as f64;
            assert_eq!(tree.within(q, r), scan_within(&pts, q, r));
        }
    }
}
