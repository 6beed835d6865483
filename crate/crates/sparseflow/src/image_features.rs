//! Strided convolutional image pyramid and feature sampling at projections.
//!
//! Four stride-2 blocks (16, 32, 64, 128 channels), each a conv followed by
//! instance normalization and LeakyReLU(0.1). Only the coarsest level (total
//! stride 16) is kept; per-point features are read off it by bilinear
//! interpolation at the projected pixel locations.

use crate::numerics::{Tape, Tensor, Value};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const FPN_CHANNELS: [usize; 4] = [16, 32, 64, 128];
/// Per-level odd kernel sizes; the wide last kernel carries most of the
/// model's capacity.
pub const FPN_KERNELS: [usize; 4] = [3, 3, 3, 7];
pub const TOTAL_STRIDE: usize = 16;

/// RGB image with values in [0, 1], stored H x W x 3 row-major.
#[derive(Debug, Clone)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Image {
        assert!(
            height >= 16 && width >= 16,
            "image must be at least 16 x 16, got {height} x {width}"
        );
        assert_eq!(data.len(), height * width * 3, "pixel buffer length mismatch");
        assert!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            "pixel values must lie in [0, 1]"
        );
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn to_value(&self) -> Value {
        Value::new(vec![self.height, self.width, 3], self.data.clone())
    }
}

/// One strided conv block: weight K x K x C_in x C_out plus bias.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// The four-block pyramid encoder.
#[derive(Debug, Clone)]
pub struct FpnParams {
    pub blocks: Vec<ConvBlock>,
}

/// Runs the four blocks and returns the coarsest map, (H/16) x (W/16) x 128.
pub fn fpn_forward(tape: &Tape, image: &Image, params: &FpnParams) -> Tensor {
    assert_eq!(params.blocks.len(), 4, "expected four pyramid blocks");
    let mut x = Tensor::constant(image.to_value());
    for block in &params.blocks {
        let conv = tape.conv2d_stride2(&x, &block.weight, &block.bias);
        x = tape.leaky_relu(&tape.instance_norm(&conv, INSTANCE_NORM_EPS), LEAKY_SLOPE);
    }
    x
}

/// Bilinear read of the coarsest map at full-resolution pixel coordinates.
/// Uses the align-centers mapping `grid = (pixel + 0.5)/16 - 0.5` with border
/// clamping; invalid points receive the zero vector.
pub fn sample_at_projections(
    tape: &Tape,
    feature_map: &Tensor,
    pixel_coords: &[[f64; 2]],
    validity: &[bool],
) -> Tensor {
    assert_eq!(pixel_coords.len(), validity.len(), "coords/validity length mismatch");
    let s = TOTAL_STRIDE as f64;
    let grid: Vec<(f64, f64)> = pixel_coords
        .iter()
        .map(|&[u, v]| ((u + 0.5) / s - 0.5, (v + 0.5) / s - 0.5))
        .collect();
    tape.bilinear_sample(feature_map, &grid, validity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    pub(crate) fn random_fpn(rng: &mut rand_chacha::ChaCha8Rng) -> (Vec<Value>, Vec<Value>) {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut c_in = 3;
        for (&c_out, &k) in FPN_CHANNELS.iter().zip(&FPN_KERNELS) {
            let fan_in = k * k * c_in;
            let bound = (1.0 / fan_in as f64).sqrt();
            weights.push(Value::new(
                vec![k, k, c_in, c_out],
                (0..fan_in * c_out).map(|_| rng.gen_range(-bound..bound)).collect(),
            ));
            biases.push(Value::new(vec![c_out], (0..c_out).map(|_| rng.gen_range(-bound..bound)).collect()));
            c_in = c_out;
        }
        (weights, biases)
    }

    fn bind(tape: &Tape, weights: &[Value], biases: &[Value]) -> FpnParams {
        FpnParams {
            blocks: weights
                .iter()
                .zip(biases)
                .map(|(w, b)| ConvBlock { weight: tape.var(w), bias: tape.var(b) })
                .collect(),
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn four_levels_reduce_32x32_to_2x2x128() {
        let tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (w, b) = random_fpn(&mut rng);
        let params = bind(&tape, &w, &b);
        let out = fpn_forward(&tape, &random_image(32, 32, 2), &params);
        assert_eq!(out.shape(), &[2, 2, 128]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_features() {
        let tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (w, mut b) = random_fpn(&mut rng);
        for bias in &mut b {
            bias.data_mut().fill(0.0);
        }
        let params = bind(&tape, &w, &b);
        let img = Image::new(16, 16, vec![0.0; 16 * 16 * 3]);
        let out = fpn_forward(&tape, &img, &params);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_give_identical_maps() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (w, b) = random_fpn(&mut rng);
        let img = random_image(16, 32, 5);
        let run = || {
            let tape = Tape::new();
            let params = bind(&tape, &w, &b);
            fpn_forward(&tape, &img, &params).value()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn fpn_gradient_matches_finite_differences() {
        // 32 x 32 keeps a 2 x 2 coarsest map; a 1 x 1 map normalizes to zero
        // and would make the check vacuous
        let img = random_image(32, 32, 6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (mut weights, biases) = random_fpn(&mut rng);

        let eval = |w: &[Value], b: &[Value]| -> (f64, Vec<Vec<f64>>) {
            let tape = Tape::new();
            let params = bind(&tape, w, b);
            let out = fpn_forward(&tape, &img, &params);
            let n = out.numel();
            let probe = Tensor::constant(Value::new(
                vec![n, 1],
                (0..n).map(|i| ((i * 53 % 31) as f64 - 15.0) * 0.07).collect(),
            ));
            let flat = tape.reshape(&out, vec![1, n]);
            let loss = tape.sum(&tape.matmul(&flat, &probe));
            let grads = tape.backward(&loss);
            let gw = params.blocks.iter().map(|bl| grads.wrt(&bl.weight).unwrap().to_vec()).collect();
            (loss.item(), gw)
        };

        let (_, analytic) = eval(&weights, &biases);
        let h = 1e-5;
        for level in 0..4 {
            let n = weights[level].numel();
            for probe_idx in [0, n / 2, n - 1] {
                let orig = weights[level].data()[probe_idx];
                weights[level].data_mut()[probe_idx] = orig + h;
                let (fp, _) = eval(&weights, &biases);
                weights[level].data_mut()[probe_idx] = orig - h;
                let (fm, _) = eval(&weights, &biases);
                weights[level].data_mut()[probe_idx] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[level][probe_idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < 1e-4,
                    "level {level} idx {probe_idx}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn cell_center_sampling_returns_the_cell() {
        let tape = Tape::new();
        let map = Tensor::constant(Value::new(
            vec![2, 2, 1],
            vec![1.0, 2.0, 3.0, 4.0],
        ));
        // pixel at the center of grid cell (row 0, col 1): grid x = 1, y = 0
        // so pixel u = 23.5, v = 7.5
        let out = sample_at_projections(&tape, &map, &[[23.5, 7.5]], &[true]);
        assert_eq!(out.data(), &[2.0]);
    }

    #[test]
    fn midpoint_sampling_averages_adjacent_cells() {
        let tape = Tape::new();
        let map = Tensor::constant(Value::new(vec![1, 2, 2], vec![1.0, 10.0, 3.0, 30.0]));
        // grid x = 0.5 between the two cells: u = 0.5*16 + 7.5 = 15.5
        let out = sample_at_projections(&tape, &map, &[[15.5, 7.5]], &[true]);
        assert_eq!(out.data(), &[2.0, 20.0]);
    }

    #[test]
    fn invalid_points_sample_zero() {
        let tape = Tape::new();
        let map = Tensor::constant(Value::ones(vec![2, 2, 3]));
        let out = sample_at_projections(&tape, &map, &[[8.0, 8.0], [8.0, 8.0]], &[false, true]);
        assert_eq!(&out.data()[0..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&out.data()[3..6], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn out_of_range_coordinates_clamp_to_border() {
        let tape = Tape::new();
        let map = Tensor::constant(Value::new(vec![1, 2, 1], vec![5.0, 9.0]));
        let out = sample_at_projections(&tape, &map, &[[-100.0, 0.0], [1e6, 0.0]], &[true, true]);
        assert_eq!(out.data(), &[5.0, 9.0]);
    }
}
