//! Residual refinement of the initial flow.
//!
//! A second graph-conv stack (32, 64, 128) reads the initial flow as
//! per-point features over the source cloud's k-NN graph; a final linear
//! head maps back to 3 channels and is added to the input flow.

use crate::geometry::{KnnGraph, PointCloud};
use crate::numerics::{Tape, Tensor};
use crate::point_features::{graph_conv_block, PointFeatureParams};

/// Three graph-conv blocks over the initial flow plus a 128 -> 3 head.
/// The head starts at zero so refinement begins as the identity.
#[derive(Debug, Clone)]
pub struct RefineParams {
    pub blocks: PointFeatureParams,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// `sf_est = sf' + head(h(sf'))` with h running on the PC_t graph.
pub fn refine_flow(
    tape: &Tape,
    sf_prime: &Tensor,
    pc_t: &PointCloud,
    graph: &KnnGraph,
    params: &RefineParams,
) -> Tensor {
    assert_eq!(sf_prime.shape(), &[pc_t.len(), 3], "flow must be N x 3 over pc_t");
    assert_eq!(params.head_weight.shape(), &[128, 3], "head must map 128 -> 3");
    let mut h = sf_prime.clone();
    for layer in &params.blocks.layers {
        h = graph_conv_block(tape, Some(&h), pc_t, graph, layer);
    }
    let residual = tape.add_row(&tape.matmul(&h, &params.head_weight), &params.head_bias);
    tape.add(sf_prime, &residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::knn_search;
    use crate::numerics::Value;
    use crate::point_features::{GraphConvLayer, BLOCK_CHANNELS};
    use rand::prelude::*;

    fn random_refine(seed: u64) -> (Vec<Value>, Vec<Value>, Value, Value) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut c_in = 3;
        for &c_out in &BLOCK_CHANNELS {
            let w = c_in + 3;
            let bound = (1.0 / w as f64).sqrt();
            weights.push(Value::new(
                vec![w, c_out],
                (0..w * c_out).map(|_| rng.gen_range(-bound..bound)).collect(),
            ));
            biases.push(Value::new(vec![c_out], (0..c_out).map(|_| rng.gen_range(-bound..bound)).collect()));
            c_in = c_out;
        }
        let hw = Value::new(vec![128, 3], (0..384).map(|_| rng.gen_range(-0.05..0.05)).collect());
        let hb = Value::new(vec![3], vec![0.01, -0.02, 0.005]);
        (weights, biases, hw, hb)
    }

    fn bind(tape: &Tape, w: &[Value], b: &[Value], hw: &Value, hb: &Value) -> RefineParams {
        RefineParams {
            blocks: PointFeatureParams {
                layers: w
                    .iter()
                    .zip(b)
                    .map(|(w, b)| GraphConvLayer { weight: tape.var(w), bias: tape.var(b) })
                    .collect(),
            },
            head_weight: tape.var(hw),
            head_bias: tape.var(hb),
        }
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(1.0..8.0)])
                .collect(),
        )
    }

    #[test]
    fn zero_head_is_the_identity() {
        let tape = Tape::new();
        let (w, b, _, _) = random_refine(1);
        let hw = Value::zeros(vec![128, 3]);
        let hb = Value::zeros(vec![3]);
        let params = bind(&tape, &w, &b, &hw, &hb);
        let cloud = random_cloud(9, 2);
        let graph = knn_search(&cloud, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sf = Tensor::constant(Value::new(vec![9, 3], (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let out = refine_flow(&tape, &sf, &cloud, &graph, &params);
        assert_eq!(out.data(), sf.data());
    }

    #[test]
    fn output_minus_input_equals_the_head_residual() {
        let tape = Tape::new();
        let (w, b, hw, hb) = random_refine(4);
        let params = bind(&tape, &w, &b, &hw, &hb);
        let cloud = random_cloud(7, 5);
        let graph = knn_search(&cloud, 3);
        let sf_val = Value::new(vec![7, 3], (0..21).map(|i| (i as f64) * 0.05 - 0.5).collect());
        let sf = Tensor::constant(sf_val.clone());
        let out = refine_flow(&tape, &sf, &cloud, &graph, &params);
        // recompute the residual alone and compare
        let mut h = sf.clone();
        for layer in &params.blocks.layers {
            h = crate::point_features::graph_conv_block(&tape, Some(&h), &cloud, &graph, layer);
        }
        let res = tape.add_row(&tape.matmul(&h, &params.head_weight), &params.head_bias);
        for i in 0..21 {
            assert!((out.data()[i] - sf_val.data()[i] - res.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_flow_on_a_regular_grid_refines_uniformly() {
        // 3 x 3 planar grid: interior point and corners have congruent
        // neighborhoods only for k covering the whole cloud
        let mut pts = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                pts.push([c as f64, r as f64, 5.0]);
            }
        }
        let cloud = PointCloud::new(pts);
        let graph = knn_search(&cloud, 9);
        let tape = Tape::new();
        let (w, b, hw, hb) = random_refine(6);
        let params = bind(&tape, &w, &b, &hw, &hb);
        let sf = Tensor::constant(Value::new(vec![9, 3], vec![0.3; 27]));
        let out = refine_flow(&tape, &sf, &cloud, &graph, &params);
        // center point (index 4) sees every offset twice with opposite sign;
        // all points see the same *set* of edge features only at the center,
        // so instead check determinism of the residual against a translated
        // copy of the same grid
        let shifted = PointCloud::new(cloud.points().iter().map(|p| [p[0] + 2.0, p[1] - 1.0, p[2]]).collect());
        let graph2 = knn_search(&shifted, 9);
        let out2 = refine_flow(&tape, &sf, &shifted, &graph2, &params);
        for (x, y) in out.data().iter().zip(out2.data()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn permuting_points_permutes_refined_rows() {
        let cloud = random_cloud(10, 7);
        let n = cloud.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted = PointCloud::new(perm.iter().map(|&o| cloud.point(o)).collect());
        let (w, b, hw, hb) = random_refine(8);
        let sf_rows: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * 0.1, -0.2, 0.05 * i as f64]).collect();
        let run = |c: &PointCloud, rows: &[[f64; 3]]| {
            let tape = Tape::new();
            let graph = knn_search(c, 4);
            let params = bind(&tape, &w, &b, &hw, &hb);
            let sf = Tensor::constant(Value::new(vec![n, 3], rows.iter().flatten().copied().collect()));
            refine_flow(&tape, &sf, c, &graph, &params).value()
        };
        let base = run(&cloud, &sf_rows);
        let perm_rows: Vec<[f64; 3]> = perm.iter().map(|&o| sf_rows[o]).collect();
        let permuted_out = run(&permuted, &perm_rows);
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(&base.data()[old * 3..old * 3 + 3], &permuted_out.data()[new * 3..new * 3 + 3]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cloud = random_cloud(8, 9);
        let graph = knn_search(&cloud, 4);
        let (w, b, mut hw, hb) = random_refine(10);
        let mut sf_val = Value::new(vec![8, 3], (0..24).map(|i| (i as f64) * 0.04 - 0.5).collect());

        let eval = |sf: &Value, hwv: &Value| -> (f64, Vec<f64>, Vec<f64>) {
            let tape = Tape::new();
            let params = bind(&tape, &w, &b, hwv, &hb);
            let sft = tape.var(sf);
            let out = refine_flow(&tape, &sft, &cloud, &graph, &params);
            let probe = Tensor::constant(Value::new(vec![3, 1], vec![0.7, -0.4, 0.2]));
            let loss = tape.sum(&tape.matmul(&out, &probe));
            let g = tape.backward(&loss);
            (
                loss.item(),
                g.wrt(&sft).unwrap().to_vec(),
                g.wrt(&params.head_weight).unwrap().to_vec(),
            )
        };

        let (_, gsf, ghw) = eval(&sf_val, &hw);
        let h = 1e-6;
        for idx in [0, 5, 11, 23] {
            let orig = sf_val.data()[idx];
            sf_val.data_mut()[idx] = orig + h;
            let (fp, _, _) = eval(&sf_val, &hw);
            sf_val.data_mut()[idx] = orig - h;
            let (fm, _, _) = eval(&sf_val, &hw);
            sf_val.data_mut()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = gsf[idx].abs().max(fd.abs()).max(1e-8);
            assert!(((gsf[idx] - fd) / denom).abs() < 1e-4, "sf {idx}: {} vs {fd}", gsf[idx]);
        }
        for idx in [0, 100, 383] {
            let orig = hw.data()[idx];
            hw.data_mut()[idx] = orig + h;
            let (fp, _, _) = eval(&sf_val, &hw);
            hw.data_mut()[idx] = orig - h;
            let (fm, _, _) = eval(&sf_val, &hw);
            hw.data_mut()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = ghw[idx].abs().max(fd.abs()).max(1e-8);
            assert!(((ghw[idx] - fd) / denom).abs() < 1e-4, "hw {idx}: {} vs {fd}", ghw[idx]);
        }
    }
}
