//! Point-cloud containers, pinhole projection, k-NN graphs and preprocessing.
//!
//! Camera coordinates are x-right, y-down, z-forward; all distances in
//! meters, pixel quantities in pixels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FlowError, Result};

/// Minimum depth for a projection to count as in front of the camera.
pub const Z_MIN: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> PointCloud {
        assert!(!points.is_empty(), "point cloud must contain at least one point");
        assert!(
            points.iter().all(|p| p.iter().all(|c| c.is_finite())),
            "point cloud contains non-finite coordinates"
        );
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    /// Row-major N x 3 copy of the coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive: fx={fx} fy={fy}");
        assert!(width >= 1 && height >= 1, "image extents must be >= 1");
        CameraIntrinsics { fx, fy, cx, cy, width, height }
    }

    /// Inverse of [`project_points`] for a single pixel at known depth.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }
}

/// Per-point neighbor lists; every row contains the point itself.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<usize>, // N x k, row-major
}

impl KnnGraph {
    /// Builds a graph from explicit rows; `neighbors` is row-major N x k.
    pub fn from_flat(k: usize, neighbors: Vec<usize>) -> KnnGraph {
        assert!(k >= 1 && neighbors.len() % k == 0, "neighbor list not divisible by k={k}");
        let n = neighbors.len() / k;
        assert!(neighbors.iter().all(|&j| j < n), "neighbor index out of range");
        KnnGraph { k, neighbors }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_points(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Flattened N*k neighbor indices, row-major.
    pub fn flat(&self) -> &[usize] {
        &self.neighbors
    }
}

/// Pinhole projection of every point; points behind the near plane or outside
/// the image are flagged invalid rather than dropped.
pub fn project_points(cloud: &PointCloud, cam: &CameraIntrinsics) -> (Vec<[f64; 2]>, Vec<bool>) {
    let mut pixels = Vec::with_capacity(cloud.len());
    let mut valid = Vec::with_capacity(cloud.len());
    for p in cloud.points() {
        let [x, y, z] = *p;
        if z <= Z_MIN {
            pixels.push([0.0, 0.0]);
            valid.push(false);
            continue;
        }
        let u = cam.fx * x / z + cam.cx;
        let v = cam.fy * y / z + cam.cy;
        let inside = u >= 0.0 && u < cam.width as f64 && v >= 0.0 && v < cam.height as f64;
        pixels.push([u, v]);
        valid.push(inside);
    }
    (pixels, valid)
}

/// Exact k nearest neighbors (self included) for every point, ties broken by
/// smaller index. Backed by a kd-tree; `knn_brute_force` is the reference.
pub fn knn_search(cloud: &PointCloud, k: usize) -> KnnGraph {
    let n = cloud.len();
    assert!(k >= 1 && k <= n, "knn_search: k={k} out of range for {n} points");
    let tree = KdTree::build(cloud.points());
    let mut neighbors = vec![0usize; n * k];
    let mut best = KBest::new(k);
    for i in 0..n {
        best.clear();
        tree.query(cloud.point(i), &mut best);
        let row = best.sorted_indices();
        neighbors[i * k..(i + 1) * k].copy_from_slice(&row);
    }
    KnnGraph { k, neighbors }
}

/// O(N^2) reference used to validate the kd-tree.
pub fn knn_brute_force(cloud: &PointCloud, k: usize) -> KnnGraph {
    let n = cloud.len();
    assert!(k >= 1 && k <= n, "knn_brute_force: k={k} out of range for {n} points");
    let mut neighbors = Vec::with_capacity(n * k);
    for i in 0..n {
        let pi = cloud.point(i);
        let mut cand: Vec<(f64, usize)> = (0..n).map(|j| (dist2(pi, cloud.point(j)), j)).collect();
        cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
        neighbors.extend(cand[..k].iter().map(|&(_, j)| j));
    }
    KnnGraph { k, neighbors }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Bounded best-k set ordered by (squared distance, index).
struct KBest {
    cap: usize,
    entries: Vec<(f64, usize)>, // kept sorted ascending
}

impl KBest {
    fn new(cap: usize) -> KBest {
        KBest { cap, entries: Vec::with_capacity(cap + 1) }
    }

    fn clear(&mut self) {
        self.entries.clear();
    }

    fn full(&self) -> bool {
        self.entries.len() == self.cap
    }

    fn worst_d2(&self) -> f64 {
        if self.full() {
            self.entries.last().unwrap().0
        } else {
            f64::INFINITY
        }
    }

    fn offer(&mut self, d2: f64, idx: usize) {
        let key = (d2, idx);
        if self.full() && key >= *self.entries.last().unwrap() {
            return;
        }
        let pos = self.entries.partition_point(|e| *e < key);
        self.entries.insert(pos, key);
        if self.entries.len() > self.cap {
            self.entries.pop();
        }
    }

    fn sorted_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|&(_, i)| i).collect()
    }
}

struct KdNode {
    axis: usize,
    split: f64,
    index: usize,
    left: Option<Box<KdNode>>,
    right: Option<Box<KdNode>>,
}

struct KdTree<'a> {
    points: &'a [[f64; 3]],
    root: Option<Box<KdNode>>,
}

impl<'a> KdTree<'a> {
    fn build(points: &'a [[f64; 3]]) -> KdTree<'a> {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_node(points, &mut idx, 0);
        KdTree { points, root }
    }

    fn build_node(points: &[[f64; 3]], idx: &mut [usize], depth: usize) -> Option<Box<KdNode>> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        idx.sort_by(|&a, &b| {
            (points[a][axis], a)
                .partial_cmp(&(points[b][axis], b))
                .unwrap()
        });
        let mid = idx.len() / 2;
        let index = idx[mid];
        let split = points[index][axis];
        let (left_idx, rest) = idx.split_at_mut(mid);
        let right_idx = &mut rest[1..];
        Some(Box::new(KdNode {
            axis,
            split,
            index,
            left: Self::build_node(points, left_idx, depth + 1),
            right: Self::build_node(points, right_idx, depth + 1),
        }))
    }

    fn query(&self, target: [f64; 3], best: &mut KBest) {
        Self::query_node(self.points, &self.root, target, best);
    }

    fn query_node(points: &[[f64; 3]], node: &Option<Box<KdNode>>, target: [f64; 3], best: &mut KBest) {
        let Some(node) = node else { return };
        best.offer(dist2(target, points[node.index]), node.index);
        let delta = target[node.axis] - node.split;
        let (near, far) = if delta < 0.0 {
            (&node.left, &node.right)
        } else {
            (&node.right, &node.left)
        };
        Self::query_node(points, near, target, best);
        // the far side can still hold an equal-distance lower index, so
        // prune only on strict excess
        if delta * delta <= best.worst_d2() {
            Self::query_node(points, far, target, best);
        }
    }
}

/// Result of [`preprocess_cloud`]: surviving points plus their indices into
/// the original cloud (with repetition when sampling with replacement).
#[derive(Debug, Clone)]
pub struct PreprocessedCloud {
    pub cloud: PointCloud,
    pub indices: Vec<usize>,
}

/// Depth cut, ground removal by height threshold (y-down: ground is large y),
/// then a seed-deterministic sample of `n_sample` points — without
/// replacement when enough points survive, with replacement otherwise.
pub fn preprocess_cloud(
    cloud: &PointCloud,
    max_depth: f64,
    ground_height: f64,
    n_sample: usize,
    seed: u64,
) -> Result<PreprocessedCloud> {
    assert!(n_sample >= 1, "n_sample must be >= 1");
    let kept: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let [_, y, z] = cloud.point(i);
            z <= max_depth && y <= ground_height
        })
        .collect();
    if kept.is_empty() {
        return Err(FlowError::EmptyScene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = if kept.len() >= n_sample {
        let mut pool = kept;
        pool.shuffle(&mut rng);
        pool.truncate(n_sample);
        pool
    } else {
        (0..n_sample).map(|_| kept[rng.gen_range(0..kept.len())]).collect()
    };
    let points = indices.iter().map(|&i| cloud.point(i)).collect();
    Ok(PreprocessedCloud { cloud: PointCloud::new(points), indices })
}
