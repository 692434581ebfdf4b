use std::cmp::Ordering;

use super::{dist2, PointCloud, Vec3};

const LEAF_SIZE: usize = 8;

/// How equal distances are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Lowest point index first.
    #[default]
    Index,
    /// Lexicographic (x, y, z), then index. Independent of input order, so
    /// neighbourhoods survive a permutation of the indexed cloud.
    Coordinates,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Exact k-d tree over a point cloud. Immutable after `build` and shareable
/// across threads.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    tie: TieBreak,
}

impl NeighborIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        Self::from_points(cloud.points().to_vec(), TieBreak::Index)
    }

    pub fn build_with(cloud: &PointCloud, tie: TieBreak) -> Self {
        Self::from_points(cloud.points().to_vec(), tie)
    }

    pub(crate) fn from_points(points: Vec<Vec3>, tie: TieBreak) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !points.is_empty() {
            build_node(&points, &mut order, 0, &mut nodes);
        }
        Self {
            points,
            order,
            nodes,
            tie,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn cmp(&self, a: &Neighbor, b: &Neighbor) -> Ordering {
        a.dist2.total_cmp(&b.dist2).then_with(|| match self.tie {
            TieBreak::Index => a.index.cmp(&b.index),
            TieBreak::Coordinates => {
                let (pa, pb) = (&self.points[a.index], &self.points[b.index]);
                pa[0]
                    .total_cmp(&pb[0])
                    .then(pa[1].total_cmp(&pb[1]))
                    .then(pa[2].total_cmp(&pb[2]))
                    .then(a.index.cmp(&b.index))
            }
        })
    }

    /// Closest indexed point to `q`.
    pub fn nearest(&self, q: &Vec3) -> Neighbor {
        let mut best = Neighbor {
            index: usize::MAX,
            dist2: f64::INFINITY,
        };
        self.nearest_rec(0, q, &mut best);
        best
    }

    fn nearest_rec(&self, node: usize, q: &Vec3, best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: i,
                        dist2: dist2(q, &self.points[i]),
                    };
                    if best.index == usize::MAX || self.cmp(&cand, best) == Ordering::Less {
                        *best = cand;
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
                self.nearest_rec(near, q, best);
                if diff * diff <= best.dist2 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `min(k, len)` closest points, ascending by distance.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<Neighbor> {
        let k = k.min(self.len());
        let mut heap = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_rec(0, q, k, &mut heap);
        }
        heap
    }

    /// Indices of the `min(k, len)` closest points, ascending by distance.
    pub fn query(&self, q: &Vec3, k: usize) -> Vec<usize> {
        self.knn(q, k).into_iter().map(|n| n.index).collect()
    }

    fn knn_rec(&self, node: usize, q: &Vec3, k: usize, best: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: i,
                        dist2: dist2(q, &self.points[i]),
                    };
                    if best.len() == k && self.cmp(&cand, &best[k - 1]) != Ordering::Less {
                        continue;
                    }
                    let pos = best
                        .binary_search_by(|n| self.cmp(n, &cand))
                        .unwrap_or_else(|p| p);
                    best.insert(pos, cand);
                    best.truncate(k);
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
                self.knn_rec(near, q, k, best);
                if best.len() < k || diff * diff <= best[k - 1].dist2 {
                    self.knn_rec(far, q, k, best);
                }
            }
        }
    }

    /// Every point with squared distance `<= r2`, sorted ascending.
    pub fn within(&self, q: &Vec3, r2: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        self.within_unsorted(q, r2, &mut out);
        out.sort_by(|a, b| self.cmp(a, b));
        out
    }

    /// Like `within`, appending to `out` in traversal order.
    pub(crate) fn within_unsorted(&self, q: &Vec3, r2: f64, out: &mut Vec<Neighbor>) {
        if !self.is_empty() {
            self.within_rec(0, q, r2, out);
        }
    }

    fn within_rec(&self, node: usize, q: &Vec3, r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    if d <= r2 {
                        out.push(Neighbor { index: i, dist2: d });
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
                self.within_rec(near, q, r2, out);
                if diff * diff <= r2 {
                    self.within_rec(far, q, r2, out);
                }
            }
        }
    }
}

fn build_node(points: &[Vec3], order: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    if hi[axis] - lo[axis] == 0.0 {
        // all points coincide
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[order[mid]][axis];
    nodes.push(Node::Split {
        axis,
        value,
        left: 0,
        right: 0,
    });
    let (l, r) = order.split_at_mut(mid);
    let left = build_node(points, l, offset, nodes);
    let right = build_node(points, r, offset + mid, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}
