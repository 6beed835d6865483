//! End-to-end model assembly, initialization, and checkpointing.
//!
//! Both frames share one set of weights. The forward pass extracts point and
//! image features, fuses them per point, solves the transport matching,
//! converts the plan to an initial flow, and refines it residually.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ScenePair;
use crate::error::{FlowError, Result};
use crate::fusion::{early_fuse, fuse_features, rgb_at_projections, FusionMode, FusionParams};
use crate::geometry::{knn_search, project_points, PointCloud};
use crate::image_features::{
    fpn_forward, sample_at_projections, ConvBlock, FpnParams, Image, FPN_CHANNELS, FPN_KERNELS,
};
use crate::numerics::{Tape, Tensor, Value};
use crate::ot::{cost_matrix, distance_mask, initial_flow, sinkhorn_tape, uniform_weights};
use crate::point_features::{
    extract_point_features, GraphConvLayer, InitialFeatures, PointFeatureParams, BLOCK_CHANNELS,
};
use crate::refine::{refine_flow, RefineParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture and matching hyperparameters; stored inside checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Config {
    pub knn: usize,
    pub sinkhorn_k: usize,
    pub d_max: f64,
    pub fusion: FusionMode,
    pub mlps: usize,
}

impl Default for Config {
    fn default() -> Config {
        Config { knn: 32, sinkhorn_k: 1, d_max: 10.0, fusion: FusionMode::Late, mlps: 1 }
    }
}

/// Estimated flow, row-aligned with `pc_t`.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub flow: Value,
    /// True where the transport row carried no mass (fully gated points).
    pub unmatched: Vec<bool>,
}

/// Forward results kept for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub flow: FlowField,
    pub initial_flow: Value,
    pub plan: Value,
}

/// All trainable tensors plus the architecture config.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: Config,
    pub fe: Vec<(Value, Value)>,     // three graph-conv layers
    pub fpn: Vec<(Value, Value)>,    // four conv blocks (late fusion only)
    pub fusion: Vec<(Value, Value)>, // 256-channel MLP layers (late only)
    pub refine: Vec<(Value, Value)>, // three graph-conv layers
    pub refine_head: (Value, Value),
    pub log_epsilon: Value,
    pub log_lambda: Value,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Value {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Value::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Fresh parameters: weights uniform in +-sqrt(1/fan_in), biases zero, the
/// refinement head zero, and log regularizers zero (epsilon = lambda = 1.03).
pub fn init_params(seed: u64, config: Config) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fe_c0 = match config.fusion {
        FusionMode::Early => 6,
        _ => 3,
    };
    let mut fe = Vec::new();
    let mut c_in = fe_c0;
    for &c_out in &BLOCK_CHANNELS {
        let w = c_in + 3;
        fe.push((uniform_init(&mut rng, vec![w, c_out], w), Value::zeros(vec![c_out])));
        c_in = c_out;
    }
    let mut fpn = Vec::new();
    let mut fusion = Vec::new();
    if config.fusion == FusionMode::Late {
        let mut c_in = 3;
        for (&c_out, &k) in FPN_CHANNELS.iter().zip(&FPN_KERNELS) {
            let fan = k * k * c_in;
            fpn.push((
                uniform_init(&mut rng, vec![k, k, c_in, c_out], fan),
                Value::zeros(vec![c_out]),
            ));
            c_in = c_out;
        }
        let mut width = 256;
        for _ in 0..config.mlps {
            fusion.push((uniform_init(&mut rng, vec![width, 256], width), Value::zeros(vec![256])));
            width = 256;
        }
    }
    let mut refine = Vec::new();
    let mut c_in = 3;
    for &c_out in &BLOCK_CHANNELS {
        let w = c_in + 3;
        refine.push((uniform_init(&mut rng, vec![w, c_out], w), Value::zeros(vec![c_out])));
        c_in = c_out;
    }
    ModelParams {
        config,
        fe,
        fpn,
        fusion,
        refine,
        refine_head: (Value::zeros(vec![128, 3]), Value::zeros(vec![3])),
        log_epsilon: Value::scalar(0.0),
        log_lambda: Value::scalar(0.0),
    }
}

impl ModelParams {
    /// Named tensors in canonical order; checkpoints and optimizer slots
    /// both follow this order.
    pub fn entries(&self) -> Vec<(String, &Value)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.fe.iter().enumerate() {
            out.push((format!("fe.{i}.weight"), w));
            out.push((format!("fe.{i}.bias"), b));
        }
        for (i, (w, b)) in self.fpn.iter().enumerate() {
            out.push((format!("fpn.{i}.weight"), w));
            out.push((format!("fpn.{i}.bias"), b));
        }
        for (i, (w, b)) in self.fusion.iter().enumerate() {
            out.push((format!("fusion.{i}.weight"), w));
            out.push((format!("fusion.{i}.bias"), b));
        }
        for (i, (w, b)) in self.refine.iter().enumerate() {
            out.push((format!("refine.{i}.weight"), w));
            out.push((format!("refine.{i}.bias"), b));
        }
        out.push(("refine.head.weight".into(), &self.refine_head.0));
        out.push(("refine.head.bias".into(), &self.refine_head.1));
        out.push(("ot.log_epsilon".into(), &self.log_epsilon));
        out.push(("ot.log_lambda".into(), &self.log_lambda));
        out
    }

    /// Mutable view in the same order as [`entries`](Self::entries).
    pub fn entries_mut(&mut self) -> Vec<&mut Value> {
        let mut out: Vec<&mut Value> = Vec::new();
        for (w, b) in self.fe.iter_mut().chain(&mut self.fpn).chain(&mut self.fusion).chain(&mut self.refine) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.refine_head.0);
        out.push(&mut self.refine_head.1);
        out.push(&mut self.log_epsilon);
        out.push(&mut self.log_lambda);
        out
    }

    pub fn param_count(&self) -> usize {
        self.entries().iter().map(|(_, v)| v.numel()).sum()
    }

    /// Attaches every tensor to a tape. `tracked` decides whether gradients
    /// are recorded (training) or not (inference).
    pub fn bind(&self, tape: &Tape, tracked: bool) -> BoundModel {
        let lift = |v: &Value| if tracked { tape.var(v) } else { Tensor::constant(v.clone()) };
        let layer = |(w, b): &(Value, Value)| GraphConvLayer { weight: lift(w), bias: lift(b) };
        let point = PointFeatureParams { layers: self.fe.iter().map(layer).collect() };
        let fpn = (!self.fpn.is_empty()).then(|| FpnParams {
            blocks: self.fpn.iter().map(|(w, b)| ConvBlock { weight: lift(w), bias: lift(b) }).collect(),
        });
        let fusion = (!self.fusion.is_empty()).then(|| FusionParams {
            layers: self.fusion.iter().map(|(w, b)| (lift(w), lift(b))).collect(),
        });
        let refine = RefineParams {
            blocks: PointFeatureParams { layers: self.refine.iter().map(layer).collect() },
            head_weight: lift(&self.refine_head.0),
            head_bias: lift(&self.refine_head.1),
        };
        let mut flat = Vec::new();
        for l in &point.layers {
            flat.push(l.weight.clone());
            flat.push(l.bias.clone());
        }
        if let Some(f) = &fpn {
            for b in &f.blocks {
                flat.push(b.weight.clone());
                flat.push(b.bias.clone());
            }
        }
        if let Some(f) = &fusion {
            for (w, b) in &f.layers {
                flat.push(w.clone());
                flat.push(b.clone());
            }
        }
        for l in &refine.blocks.layers {
            flat.push(l.weight.clone());
            flat.push(l.bias.clone());
        }
        flat.push(refine.head_weight.clone());
        flat.push(refine.head_bias.clone());
        let log_epsilon = lift(&self.log_epsilon);
        let log_lambda = lift(&self.log_lambda);
        flat.push(log_epsilon.clone());
        flat.push(log_lambda.clone());
        BoundModel { point, fpn, fusion, refine, log_epsilon, log_lambda, flat }
    }
}

/// Tape-bound parameter set produced by [`ModelParams::bind`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub point: PointFeatureParams,
    pub fpn: Option<FpnParams>,
    pub fusion: Option<FusionParams>,
    pub refine: RefineParams,
    pub log_epsilon: Tensor,
    pub log_lambda: Tensor,
    /// Every tensor above, in [`ModelParams::entries`] order.
    pub flat: Vec<Tensor>,
}

/// Per-frame feature extraction shared by both frames.
fn frame_features(
    tape: &Tape,
    bound: &BoundModel,
    config: &Config,
    cloud: &PointCloud,
    image: &Image,
    cam: &crate::geometry::CameraIntrinsics,
) -> Tensor {
    let graph = knn_search(cloud, config.knn);
    match config.fusion {
        FusionMode::Late => {
            let point = extract_point_features(tape, cloud, &graph, &bound.point, InitialFeatures::Coordinates);
            let map = fpn_forward(tape, image, bound.fpn.as_ref().expect("late fusion needs FPN weights"));
            let (pixels, valid) = project_points(cloud, cam);
            let image_feats = sample_at_projections(tape, &map, &pixels, &valid);
            fuse_features(tape, &point, &image_feats, bound.fusion.as_ref().expect("late fusion needs MLP weights"))
        }
        FusionMode::Early => {
            let (pixels, valid) = project_points(cloud, cam);
            let rgb = rgb_at_projections(image, &pixels, &valid);
            let f0 = Tensor::constant(early_fuse(cloud, &rgb));
            extract_point_features(tape, cloud, &graph, &bound.point, InitialFeatures::Custom(&f0))
        }
        FusionMode::None => {
            extract_point_features(tape, cloud, &graph, &bound.point, InitialFeatures::Coordinates)
        }
    }
}

/// Tape-level forward pass; everything stays differentiable when the bound
/// parameters are tracked.
pub fn forward_tape(
    tape: &Tape,
    bound: &BoundModel,
    config: &Config,
    scene: &ScenePair,
) -> Result<(Tensor, Tensor, Tensor, Vec<bool>)> {
    let n = scene.pc_t.len();
    let m = scene.pc_t1.len();
    assert!(config.knn <= n.min(m), "knn {} exceeds point count {}", config.knn, n.min(m));
    let f_t = frame_features(tape, bound, config, &scene.pc_t, &scene.img_t, &scene.cam);
    let f_t1 = frame_features(tape, bound, config, &scene.pc_t1, &scene.img_t1, &scene.cam);
    let cost = cost_matrix(tape, &f_t, &f_t1);
    let mask = distance_mask(&scene.pc_t, &scene.pc_t1, config.d_max);
    let plan = sinkhorn_tape(
        tape,
        &cost,
        &mask,
        &bound.log_epsilon,
        &bound.log_lambda,
        config.sinkhorn_k,
        &uniform_weights(n),
        &uniform_weights(m),
    )?;
    let (sf0, matched) = initial_flow(tape, &plan, &scene.pc_t, &scene.pc_t1);
    let graph_t = knn_search(&scene.pc_t, config.knn);
    let flow = refine_flow(tape, &sf0, &scene.pc_t, &graph_t, &bound.refine);
    let unmatched = matched.iter().map(|&b| !b).collect();
    Ok((flow, sf0, plan, unmatched))
}

/// Inference entry point: runs the forward pass without gradient tracking.
pub fn forward(scene: &ScenePair, params: &ModelParams) -> Result<ModelOutput> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let (flow, sf0, plan, unmatched) = forward_tape(&tape, &bound, &params.config, scene)?;
    Ok(ModelOutput {
        flow: FlowField { flow: flow.value(), unmatched },
        initial_flow: sf0.value(),
        plan: plan.value(),
    })
}

// ---- checkpoint format -----------------------------------------------------

fn push_entry(buf: &mut Vec<u8>, name: &str, value: &Value) {
    let name_bytes = name.as_bytes();
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    buf.push(value.shape().len() as u8);
    for &d in value.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in value.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn config_entries(config: &Config) -> Vec<(String, Value)> {
    let fusion_code = match config.fusion {
        FusionMode::Late => 0.0,
        FusionMode::Early => 1.0,
        FusionMode::None => 2.0,
    };
    vec![
        ("config.knn".into(), Value::scalar(config.knn as f64)),
        ("config.sinkhorn_k".into(), Value::scalar(config.sinkhorn_k as f64)),
        ("config.d_max".into(), Value::scalar(config.d_max)),
        ("config.fusion".into(), Value::scalar(fusion_code)),
        ("config.mlps".into(), Value::scalar(config.mlps as f64)),
    ]
}

/// Serializes parameters and config; 32-bit values, little-endian, bit-exact.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = config_entries(&params.config);
    let entries = params.entries();
    buf.extend_from_slice(&((config.len() + entries.len()) as u32).to_le_bytes());
    for (name, value) in &config {
        push_entry(&mut buf, name, value);
    }
    for (name, value) in &entries {
        push_entry(&mut buf, name, value);
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FlowError::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FlowError::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?} (\"SFCK\")"
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FlowError::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u32("entry count")? as usize;
    let mut map = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| FlowError::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if map.insert(name.clone(), Value::new(shape, data)).is_some() {
            return Err(FlowError::Checkpoint(format!("duplicate entry {name:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(FlowError::Checkpoint("trailing bytes after last entry".into()));
    }

    let mut take = |name: &str| -> Result<Value> {
        map.remove(name).ok_or_else(|| FlowError::Checkpoint(format!("missing entry {name:?}")))
    };
    let scalar = |v: Value| v.data()[0];
    let config = Config {
        knn: scalar(take("config.knn")?) as usize,
        sinkhorn_k: scalar(take("config.sinkhorn_k")?) as usize,
        d_max: scalar(take("config.d_max")?),
        fusion: match scalar(take("config.fusion")?) as u32 {
            0 => FusionMode::Late,
            1 => FusionMode::Early,
            2 => FusionMode::None,
            other => return Err(FlowError::Checkpoint(format!("unknown fusion mode code {other}"))),
        },
        mlps: scalar(take("config.mlps")?) as usize,
    };
    let pair = |take: &mut dyn FnMut(&str) -> Result<Value>, prefix: &str, i: usize| -> Result<(Value, Value)> {
        Ok((take(&format!("{prefix}.{i}.weight"))?, take(&format!("{prefix}.{i}.bias"))?))
    };
    let mut fe = Vec::new();
    let mut fpn = Vec::new();
    let mut fusion = Vec::new();
    let mut refine = Vec::new();
    for i in 0..3 {
        fe.push(pair(&mut take, "fe", i)?);
        refine.push(pair(&mut take, "refine", i)?);
    }
    if config.fusion == FusionMode::Late {
        for i in 0..4 {
            fpn.push(pair(&mut take, "fpn", i)?);
        }
        for i in 0..config.mlps {
            fusion.push(pair(&mut take, "fusion", i)?);
        }
    }
    let params = ModelParams {
        config,
        fe,
        fpn,
        fusion,
        refine,
        refine_head: (take("refine.head.weight")?, take("refine.head.bias")?),
        log_epsilon: take("ot.log_epsilon")?,
        log_lambda: take("ot.log_lambda")?,
    };
    if let Some(name) = map.keys().next() {
        return Err(FlowError::Checkpoint(format!("unexpected entry {name:?}")));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, GeneratorConfig};
    use crate::ot::OT_OFFSET;

    fn small_scene(seed: u64) -> ScenePair {
        generate_scene(
            seed,
            &GeneratorConfig { n_points: 48, occlusion_frac: 0.0, ..Default::default() },
        )
    }

    fn small_config() -> Config {
        Config { knn: 6, ..Default::default() }
    }

    #[test]
    fn same_seed_initializes_identically() {
        let a = init_params(5, Config::default());
        let b = init_params(5, Config::default());
        for ((na, va), (nb, vb)) in a.entries().iter().zip(b.entries().iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.data(), vb.data());
        }
    }

    #[test]
    fn initial_epsilon_is_one_point_oh_three() {
        let p = init_params(0, Config::default());
        let eps = p.log_epsilon.data()[0].exp() + OT_OFFSET;
        assert_eq!(eps, 1.03);
    }

    #[test]
    fn default_config_parameter_count_is_near_budget() {
        let p = init_params(0, Config::default());
        let count = p.param_count();
        assert_eq!(count, 513_765);
        let target = 480_000.0;
        assert!((count as f64 - target).abs() / target <= 0.10);
    }

    #[test]
    fn forward_at_init_equals_the_transport_flow() {
        let params = init_params(1, small_config());
        let out = forward(&small_scene(2), &params).unwrap();
        assert_eq!(out.flow.flow.data(), out.initial_flow.data());
    }

    #[test]
    fn forward_rows_align_with_pc_t() {
        let params = init_params(3, small_config());
        let scene = small_scene(4);
        let out = forward(&scene, &params).unwrap();
        assert_eq!(out.flow.flow.shape(), &[scene.pc_t.len(), 3]);
        assert_eq!(out.flow.unmatched.len(), scene.pc_t.len());
        assert!(out.flow.flow.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_frames_self_match_with_sharp_regularization() {
        let mut params = init_params(7, small_config());
        // sharpen the plan so near-zero-cost self pairs dominate
        params.log_epsilon.data_mut()[0] = -7.0;
        let base = small_scene(8);
        let scene = ScenePair {
            pc_t1: base.pc_t.clone(),
            img_t1: base.img_t.clone(),
            gt_flow: vec![[0.0; 3]; base.pc_t.len()],
            mask: vec![true; base.pc_t.len()],
            ..base
        };
        let out = forward(&scene, &params).unwrap();
        let n = scene.pc_t.len();
        let mean_flow: f64 = (0..n)
            .map(|i| {
                (out.flow.flow.at(i, 0).powi(2)
                    + out.flow.flow.at(i, 1).powi(2)
                    + out.flow.flow.at(i, 2).powi(2))
                .sqrt()
            })
            .sum::<f64>()
            / n as f64;
        // points arrive in tight clusters, so the nearest neighbor sits
        // millimeters away; judge self-matching against scene-scale spacing
        // (distance to an arbitrary unrelated point) instead
        let mean_far: f64 = (0..n)
            .map(|i| {
                let (p, q) = (scene.pc_t.point(i), scene.pc_t.point((i + n / 2) % n));
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            })
            .sum::<f64>()
            / n as f64;
        assert!(
            mean_flow < 0.2 * mean_far,
            "mean flow {mean_flow} vs scene-scale spacing {mean_far}"
        );
    }

    #[test]
    fn permuting_source_points_permutes_flow_rows() {
        let params = init_params(9, small_config());
        let scene = small_scene(10);
        let n = scene.pc_t.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted = ScenePair {
            pc_t: PointCloud::new(perm.iter().map(|&o| scene.pc_t.point(o)).collect()),
            gt_flow: perm.iter().map(|&o| scene.gt_flow[o]).collect(),
            mask: perm.iter().map(|&o| scene.mask[o]).collect(),
            ..scene.clone()
        };
        let a = forward(&scene, &params).unwrap();
        let b = forward(&permuted, &params).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..3 {
                let (x, y) = (a.flow.flow.at(old, c), b.flow.flow.at(new, c));
                assert!((x - y).abs() < 1e-9, "row {old}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = init_params(11, small_config());
        let scene = small_scene(12);
        let a = forward(&scene, &params).unwrap();
        let b = forward(&scene, &params).unwrap();
        assert_eq!(a.flow.flow.data(), b.flow.flow.data());
        assert_eq!(a.plan.data(), b.plan.data());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(13, Config { knn: 12, mlps: 2, ..Default::default() });
        let p1 = dir.path().join("a.sfck");
        let p2 = dir.path().join("b.sfck");
        save_checkpoint(&params, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.config, params.config);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_stays_under_five_megabytes() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(14, Config::default());
        let path = dir.path().join("c.sfck");
        save_checkpoint(&params, &path).unwrap();
        assert!(fs::metadata(&path).unwrap().len() < 5 * 1024 * 1024);
    }

    #[test]
    fn corrupted_magic_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(15, small_config());
        let path = dir.path().join("d.sfck");
        save_checkpoint(&params, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(FlowError::Checkpoint(msg)) => assert!(msg.contains("SFCK"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(16, small_config());
        let path = dir.path().join("e.sfck");
        save_checkpoint(&params, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(FlowError::Checkpoint(_))));
    }

    #[test]
    fn early_and_none_modes_run_without_image_weights() {
        for mode in [FusionMode::Early, FusionMode::None] {
            let params = init_params(17, Config { knn: 6, fusion: mode, ..Default::default() });
            assert!(params.fpn.is_empty() && params.fusion.is_empty());
            let out = forward(&small_scene(18), &params).unwrap();
            assert!(out.flow.flow.data().iter().all(|v| v.is_finite()));
        }
    }
}
