use std::sync::OnceLock;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Unordered dense vertex cloud; the fitting target.
///
/// Nearest-vertex queries go through a k-d tree built on first use.
/// Results are exact: ties resolve to the lowest vertex index, matching a
/// linear scan.
#[derive(Clone, Debug)]
pub struct PointCloudMesh {
    vertices: Vec<Vector3<f64>>,
    index: OnceLock<KdTree>,
}

impl PointCloudMesh {
    pub fn new(vertices: Vec<Vector3<f64>>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::InvalidInput("mesh has no vertices".into()));
        }
        if let Some(i) = vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!("mesh vertex {i} is not finite")));
        }
        Ok(PointCloudMesh {
            vertices,
            index: OnceLock::new(),
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    fn tree(&self) -> &KdTree {
        self.index.get_or_init(|| KdTree::build(&self.vertices))
    }

    /// Forces the spatial index to be built now.
    pub fn build_index(&self) {
        self.tree();
    }

    /// `(vertex index, squared distance)` of the nearest vertex.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let (i, d2) = self.tree().nearest(q);
        (i as usize, d2)
    }

    /// Linear-scan reference for [`PointCloudMesh::nearest`].
    pub fn nearest_linear(&self, q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, v) in self.vertices.iter().enumerate() {
            let d2 = (v - q).norm_squared();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }
}

const LEAF_SIZE: usize = 32;

#[derive(Clone, Debug)]
enum Node {
    /// Range into the reordered points and their bounding box.
    Leaf {
        start: u32,
        end: u32,
        lo: Vector3<f64>,
        hi: Vector3<f64>,
    },
    /// Points with `p[axis] <= value` are under `left`, `>= value` under
    /// `right`; `right` is the next node after the left subtree.
    Split { axis: u8, value: f64, right: u32 },
}

#[derive(Clone, Debug)]
struct KdTree {
    nodes: Vec<Node>,
    /// Vertex indices in leaf order.
    items: Vec<u32>,
    /// Positions parallel to `items`.
    points: Vec<Vector3<f64>>,
}

impl KdTree {
    fn build(vertices: &[Vector3<f64>]) -> Self {
        let mut order: Vec<u32> = (0..vertices.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * vertices.len() / LEAF_SIZE + 1);
        Self::split(vertices, &mut order, 0, &mut nodes);
        KdTree {
            nodes,
            points: order.iter().map(|&i| vertices[i as usize]).collect(),
            items: order,
        }
    }

    /// Median split on the widest axis of the bounding box.
    fn split(vertices: &[Vector3<f64>], order: &mut [u32], offset: usize, nodes: &mut Vec<Node>) {
        let n = order.len();
        let (lo, hi) = bounds(order.iter().map(|&i| &vertices[i as usize]));
        let extent = hi - lo;
        let axis = extent.imax();
        if n <= LEAF_SIZE || extent[axis] <= 0.0 {
            nodes.push(Node::Leaf {
                start: offset as u32,
                end: (offset + n) as u32,
                lo,
                hi,
            });
            return;
        }
        let mid = n / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            vertices[a as usize][axis].total_cmp(&vertices[b as usize][axis])
        });
        let value = vertices[order[mid] as usize][axis];
        let at = nodes.len();
        nodes.push(Node::Split {
            axis: axis as u8,
            value,
            right: 0,
        });
        let (left, right) = order.split_at_mut(mid);
        Self::split(vertices, left, offset, nodes);
        let right_at = nodes.len() as u32;
        if let Node::Split { right, .. } = &mut nodes[at] {
            *right = right_at;
        }
        Self::split(vertices, right, offset + mid, nodes);
    }

    fn nearest(&self, q: &Vector3<f64>) -> (u32, f64) {
        let mut best = (u32::MAX, f64::INFINITY);
        self.search(0, q, [0.0; 3], 0.0, &mut best);
        best
    }

    /// `off[a]` is the distance from `q` to the node's region along axis `a`
    /// and `lower = sum(off^2)` bounds every point below the node.
    fn search(&self, node: usize, q: &Vector3<f64>, mut off: [f64; 3], lower: f64, best: &mut (u32, f64)) {
        match &self.nodes[node] {
            Node::Leaf { start, end, lo, hi } => {
                let gap = (lo - q).sup(&(q - hi)).sup(&Vector3::zeros());
                if gap.norm_squared() > best.1 * (1.0 + 1e-12) {
                    return;
                }
                let (s, e) = (*start as usize, *end as usize);
                for (p, &idx) in self.points[s..e].iter().zip(&self.items[s..e]) {
                    let d2 = (p - q).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && idx < best.0) {
                        *best = (idx, d2);
                    }
                }
            }
            Node::Split { axis, value, right } => {
                let a = *axis as usize;
                let diff = q[a] - value;
                let right = *right;
                let (near, far) = if diff <= 0.0 {
                    (node + 1, right as usize)
                } else {
                    (right as usize, node + 1)
                };
                self.search(near, q, off, lower, best);
                let far_lower = lower - off[a] * off[a] + diff * diff;
                // Equal bounds are still visited, since a tie may carry a lower
                // index; the slack absorbs rounding in the running bound.
                if far_lower <= best.1 * (1.0 + 1e-12) {
                    off[a] = diff;
                    self.search(far, q, off, far_lower, best);
                }
            }
        }
    }
}

fn bounds<'a>(mut points: impl Iterator<Item = &'a Vector3<f64>>) -> (Vector3<f64>, Vector3<f64>) {
    let first = *points.next().expect("non-empty");
    points.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)))
}
