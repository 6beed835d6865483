//! Masked L1 supervision and the training loop.

use crate::data::ScenePair;
use crate::error::{FlowError, Result};
use crate::geometry::PointCloud;
use crate::metrics::{compute_metrics, AccSemantics, MetricsAccumulator};
use crate::model::{forward_tape, ModelParams};
use crate::numerics::{AdamState, Tape, Tensor, Value};
use crate::ot::OT_OFFSET;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch index at which the learning rate drops tenfold.
    pub lr_drop_epoch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig { epochs: 1, batch_size: 4, lr: 0.001, lr_drop_epoch: 0, seed: 0 }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub epe3d: f64,
    pub eps: f64,
    pub lambda: f64,
    pub rho: f64,
    pub lr: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} epe3d={:.6} eps={:.6} lambda={:.6} rho={:.6} lr={:.6}",
            self.epoch, self.loss, self.epe3d, self.eps, self.lambda, self.rho, self.lr
        )
    }
}

/// Mean absolute flow error over supervised points, averaged over the three
/// coordinates: `sum |mask * (est - gt)| / (3 * #masked)`.
pub fn masked_l1_loss(tape: &Tape, est: &Tensor, gt: &[[f64; 3]], mask: &[bool]) -> Result<Tensor> {
    let n = gt.len();
    assert_eq!(est.shape(), &[n, 3], "estimate must be N x 3");
    assert_eq!(mask.len(), n, "mask length mismatch");
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(FlowError::DegenerateBatch);
    }
    let gt_t = Tensor::constant(Value::new(vec![n, 3], gt.iter().flatten().copied().collect()));
    let gate: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let gated = tape.mul_colvec(&tape.sub(est, &gt_t), &Tensor::constant(Value::new(vec![n, 1], gate)));
    Ok(tape.scale(&tape.sum(&tape.abs(&gated)), 1.0 / (3.0 * count as f64)))
}

/// Mean validation EPE3D (point-weighted across scenes), without gradients.
/// Occluded points have no valid match in frame t+1, so they are excluded
/// from scoring just as the mask excludes them from supervision.
pub fn validation_epe3d(scenes: &[ScenePair], params: &ModelParams) -> Result<f64> {
    let mut acc = MetricsAccumulator::new();
    for scene in scenes {
        let out = crate::model::forward(scene, params)?;
        let keep: Vec<usize> = (0..scene.mask.len()).filter(|&i| scene.mask[i]).collect();
        let est = Value::new(
            vec![keep.len(), 3],
            keep.iter()
                .flat_map(|&i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| out.flow.flow.at(i, j))
                .collect(),
        );
        let gt: Vec<[f64; 3]> = keep.iter().map(|&i| scene.gt_flow[i]).collect();
        let pc = PointCloud::new(keep.iter().map(|&i| scene.pc_t.points()[i]).collect());
        acc.add(&compute_metrics(&est, &gt, &pc, &scene.cam, AccSemantics::Or));
    }
    Ok(acc.finish().epe3d)
}

/// Adam training over all parameters including the OT regularizers.
/// Deterministic given (seed, config, dataset); `on_epoch` receives each log
/// line as it is produced.
pub fn train(
    dataset: &[ScenePair],
    val: &[ScenePair],
    config: &TrainConfig,
    params: &mut ModelParams,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if dataset.is_empty() {
        return Err(FlowError::Data("training dataset is empty".into()));
    }
    assert!(config.batch_size >= 1, "batch size must be >= 1");
    assert!(
        config.lr_drop_epoch < config.epochs.max(1),
        "lr drop epoch {} not before final epoch {}",
        config.lr_drop_epoch,
        config.epochs
    );
    let n_entries = params.entries().len();
    let mut adam = AdamState::new(n_entries);
    let mut logs = Vec::with_capacity(config.epochs);
    let model_config = params.config;

    for epoch in 0..config.epochs {
        let lr = if epoch < config.lr_drop_epoch { config.lr } else { config.lr * 0.1 };
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E3779B97F4A7C15)));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut n_scenes = 0usize;
        for batch in order.chunks(config.batch_size) {
            let sizes: Vec<usize> = params.entries().iter().map(|(_, v)| v.numel()).collect();
            let mut grad_acc: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
            for &scene_idx in batch {
                let scene = &dataset[scene_idx];
                let tape = Tape::new();
                let bound = params.bind(&tape, true);
                let (flow, sf0, _, _) = forward_tape(&tape, &bound, &model_config, scene)?;
                // supervise both prediction levels: the transport flow keeps
                // its gradient signal even once refinement compensates for it
                let l0 = masked_l1_loss(&tape, &sf0, &scene.gt_flow, &scene.mask)?;
                let l1 = masked_l1_loss(&tape, &flow, &scene.gt_flow, &scene.mask)?;
                let loss = tape.add(&l0, &l1);
                let loss_val = loss.item();
                if !loss_val.is_finite() {
                    return Err(FlowError::NonFiniteLoss { scene: format!("index {scene_idx}") });
                }
                epoch_loss += loss_val;
                n_scenes += 1;
                let grads = tape.backward(&loss);
                for (slot, tensor) in bound.flat.iter().enumerate() {
                    if let Some(g) = grads.wrt(tensor) {
                        for (a, &v) in grad_acc[slot].iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            adam.begin_step();
            for (slot, value) in params.entries_mut().into_iter().enumerate() {
                let g: Vec<f64> = grad_acc[slot].iter().map(|v| v * scale).collect();
                adam.update(slot, value.data_mut(), &g, lr);
            }
        }

        let eps = params.log_epsilon.data()[0].exp() + OT_OFFSET;
        let lambda = params.log_lambda.data()[0].exp() + OT_OFFSET;
        let log = EpochLog {
            epoch,
            loss: epoch_loss / n_scenes as f64,
            epe3d: if val.is_empty() { f64::NAN } else { validation_epe3d(val, params)? },
            eps,
            lambda,
            rho: lambda / (lambda + eps),
            lr,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
