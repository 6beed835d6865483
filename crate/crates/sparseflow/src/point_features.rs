//! Pointwise feature extraction by graph convolution.
//!
//! Each block concatenates neighbor features with coordinate offsets, applies
//! a per-edge linear map with LeakyReLU, and max-pools over every point's
//! neighborhood. Three stacked blocks (32, 64, 128 channels) produce the
//! final per-point descriptors.

use crate::geometry::{KnnGraph, PointCloud};
use crate::numerics::{Tape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BLOCK_CHANNELS: [usize; 3] = [32, 64, 128];

/// One per-edge linear layer: weight is `(c_in + 3) x c_out`, bias `c_out`.
#[derive(Debug, Clone)]
pub struct GraphConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl GraphConvLayer {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Three graph-conv blocks applied on a shared k-NN graph.
#[derive(Debug, Clone)]
pub struct PointFeatureParams {
    pub layers: Vec<GraphConvLayer>,
}

/// Choice of f0, the per-point features entering the first block.
#[derive(Debug, Clone, Copy)]
pub enum InitialFeatures<'a> {
    /// Absolute coordinates; layer-1 edges are `[p_j ; p_j - p_i]`, width 6.
    Coordinates,
    /// Empty f0; layer-1 edges are offsets only, width 3. Makes the whole
    /// extractor invariant to rigid translation.
    OffsetsOnly,
    /// Caller-supplied N x c matrix, e.g. `[x,y,z,r,g,b]` for early fusion.
    Custom(&'a Tensor),
}

/// Per-edge concatenation `[f_j ; p_j - p_i]`, flattened to `(N*k) x (c+3)`.
/// With `features = None` only the offset columns are produced.
pub fn edge_features(
    tape: &Tape,
    features: Option<&Tensor>,
    cloud: &PointCloud,
    graph: &KnnGraph,
) -> Tensor {
    let n = cloud.len();
    let k = graph.k();
    assert_eq!(graph.n_points(), n, "graph built over a different cloud");
    let mut offsets = Vec::with_capacity(n * k * 3);
    for i in 0..n {
        let pi = cloud.point(i);
        for &j in graph.row(i) {
            let pj = cloud.point(j);
            offsets.extend_from_slice(&[pj[0] - pi[0], pj[1] - pi[1], pj[2] - pi[2]]);
        }
    }
    let offsets = Tensor::constant(crate::numerics::Value::new(vec![n * k, 3], offsets));
    match features {
        Some(f) => {
            assert_eq!(f.shape()[0], n, "feature row count {} vs {n} points", f.shape()[0]);
            let gathered = tape.gather_rows(f, graph.flat());
            tape.concat_cols(&gathered, &offsets)
        }
        None => offsets,
    }
}

/// One block: per-edge linear + LeakyReLU, then max over each point's k edges.
pub fn graph_conv_block(
    tape: &Tape,
    features: Option<&Tensor>,
    cloud: &PointCloud,
    graph: &KnnGraph,
    layer: &GraphConvLayer,
) -> Tensor {
    let edges = edge_features(tape, features, cloud, graph);
    assert_eq!(
        edges.shape()[1],
        layer.in_width(),
        "edge width {} vs layer input {}",
        edges.shape()[1],
        layer.in_width()
    );
    let act = tape.linear_leaky(&edges, &layer.weight, &layer.bias, LEAKY_SLOPE);
    tape.max_pool_rows(&act, graph.k())
}

/// Chains the three blocks over one shared graph, yielding N x 128 features.
pub fn extract_point_features(
    tape: &Tape,
    cloud: &PointCloud,
    graph: &KnnGraph,
    params: &PointFeatureParams,
    init: InitialFeatures,
) -> Tensor {
    assert_eq!(params.layers.len(), 3, "expected three graph-conv blocks");
    let coords;
    let mut current: Option<Tensor> = match init {
        InitialFeatures::Coordinates => {
            coords = Tensor::constant(crate::numerics::Value::new(vec![cloud.len(), 3], cloud.flat()));
            Some(coords)
        }
        InitialFeatures::OffsetsOnly => None,
        InitialFeatures::Custom(f) => Some(f.clone()),
    };
    for layer in &params.layers {
        current = Some(graph_conv_block(tape, current.as_ref(), cloud, graph, layer));
    }
    current.unwrap()
}
