use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, OptimizerInfo, Sgd};
use super::schedule::{Stage, TrainSchedule};
use super::{HarnessError, Result};
use crate::data_io::{synth_scene, toy_grid, StereoSample, SyntheticScene, SyntheticSceneSpec};
use crate::geometry::CameraRig;
use crate::losses::{
    detection_loss_var, encode_detection_targets, occupancy_bce_var, DetectionLossConfig, DetectionTargets,
};
use crate::networks::{
    detection_head, forward, image_feature_fusion, Ctx, Heads, Model, NetworkConfig, Trainable, DETECTION_PREFIX,
    DETECTION_STRIDE,
};
use crate::postproc::{decode_boxes, nms, BevBox, DenseDetections};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::voxel_grid::{occupancy_from_points, OccupancyGrid};

/// A stereo sample with its occupancy labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub sample: StereoSample,
    pub labels: OccupancyGrid,
}

impl TrainingSample {
    /// Derives occupancy labels from the sample's point cloud.
    pub fn new(sample: StereoSample, cfg: &NetworkConfig) -> Self {
        let labels = occupancy_from_points(&cfg.grid, &sample.rig, &sample.cloud, cfg.require_both_cameras);
        Self { sample, labels }
    }
}

impl From<SyntheticScene> for TrainingSample {
    fn from(s: SyntheticScene) -> Self {
        Self {
            sample: s.sample,
            labels: s.labels,
        }
    }
}

/// Everything a training run needs besides the data. Missing fields in a
/// serialized config fall back to [`TrainConfig::toy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub stage1: TrainSchedule,
    pub stage2: TrainSchedule,
    #[serde(default)]
    pub detection_loss: DetectionLossConfig,
    /// Seeds parameter initialization.
    pub seed: u64,
    pub class_name: String,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Desk-scale defaults: KITTI schedules on the full network.
    pub fn paper() -> Self {
        Self {
            network: NetworkConfig::default(),
            stage1: TrainSchedule::backbone_default(),
            stage2: TrainSchedule::detection_default(),
            detection_loss: DetectionLossConfig::default(),
            seed: 0,
            class_name: "Car".into(),
            score_threshold: 0.1,
            nms_iou: 0.3,
        }
    }

    /// The overfitting setup: an eighth-width network over a 64×8×64 grid,
    /// one sample per step.
    pub fn toy() -> Self {
        Self {
            network: NetworkConfig {
                scale: 0.125,
                grid: toy_grid(),
                ..NetworkConfig::default()
            },
            stage1: TrainSchedule {
                epochs: 50,
                initial_lr: 0.04,
                decay_epochs: vec![40, 45],
                batch_size: 1,
                grad_clip: Some(1.0),
                warmup_epochs: 10,
                ..TrainSchedule::backbone_default()
            },
            stage2: TrainSchedule {
                epochs: 100,
                initial_lr: 0.02,
                decay_epochs: vec![70, 90],
                batch_size: 1,
                grad_clip: Some(5.0),
                ..TrainSchedule::detection_default()
            },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage1.stage != Stage::BackboneOccupancy || self.stage2.stage != Stage::DetectionHead {
            return Err(HarnessError::InvalidSchedule(
                "stage 1 trains the backbone, stage 2 the detection head".into(),
            ));
        }
        Ok(())
    }
}

/// Four toy scenes for the overfitting run.
pub fn toy_dataset(seed: u64, count: usize) -> Result<Vec<TrainingSample>> {
    (0..count as u64)
        .map(|i| Ok(synth_scene(&SyntheticSceneSpec::toy(seed.wrapping_add(i)))?.into()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Batch-mean loss before the update.
    pub loss: f64,
    pub focal: f64,
    pub regression: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn stage_losses(&self, stage: Stage) -> Vec<f64> {
        self.steps.iter().filter(|s| s.stage == stage).map(|s| s.loss).collect()
    }
}

fn is_detection_param(name: &str) -> bool {
    name.starts_with(DETECTION_PREFIX)
}

struct StepOutput {
    loss: f64,
    focal: f64,
    regression: f64,
    grads: Vec<(String, Vec<f64>)>,
}

fn collect_grads(ctx: &Ctx) -> Vec<(String, Vec<f64>)> {
    ctx.bound_params()
        .into_iter()
        .filter_map(|(name, v)| ctx.tape.grad(v).map(|g| (name, g.to_vec())))
        .collect()
}

fn stage1_sample_step(model: &mut Model, s: &TrainingSample, dropout_seed: u64) -> Result<StepOutput> {
    let cfg = model.config.clone();
    let mut tape = Tape::new();
    tape.set_train(true, dropout_seed);
    let l = tape.constant(s.sample.left.clone());
    let r = tape.constant(s.sample.right.clone());
    let mut ctx = Ctx::new(
        &mut tape,
        &mut model.params,
        model.seed,
        Trainable::Except(vec![DETECTION_PREFIX.into()]),
    );
    let out = forward(&mut ctx, &cfg, l, r, &s.sample.rig, Heads::OCCUPANCY)?;
    let occ = out.occupancy.expect("occupancy head requested");
    let loss = occupancy_bce_var(ctx.tape, occ, &s.labels)?;
    ctx.tape.backward(loss)?;
    Ok(StepOutput {
        loss: ctx.tape.data(loss)[0],
        focal: 0.0,
        regression: 0.0,
        grads: collect_grads(&ctx),
    })
}

/// Detection-head input of a sample with the backbone in inference mode.
pub fn detection_features(model: &mut Model, sample: &StereoSample) -> Result<Tensor> {
    let cfg = model.config.clone();
    let mut tape = Tape::new();
    let l = tape.constant(sample.left.clone());
    let r = tape.constant(sample.right.clone());
    let mut ctx = Ctx::new(&mut tape, &mut model.params, model.seed, Trainable::None);
    let heads = Heads {
        occupancy: cfg.fusion_enabled,
        detection: false,
    };
    let out = forward(&mut ctx, &cfg, l, r, &sample.rig, heads)?;
    let input = match out.occupancy {
        Some(occ) if cfg.fusion_enabled => image_feature_fusion(
            ctx.tape,
            &cfg,
            out.left_features,
            out.right_features,
            occ,
            out.bev,
            &sample.rig,
        )?,
        _ => out.bev,
    };
    Ok(tape.value(input).clone())
}

fn stage2_sample_step(
    model: &mut Model,
    features: &Tensor,
    targets: &DetectionTargets,
    loss_cfg: &DetectionLossConfig,
) -> Result<StepOutput> {
    let cfg = model.config.clone();
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let mut ctx = Ctx::new(
        &mut tape,
        &mut model.params,
        model.seed,
        Trainable::Prefixes(vec![DETECTION_PREFIX.into()]),
    );
    let maps = detection_head(&mut ctx, &cfg, x)?;
    let (loss, report) = detection_loss_var(ctx.tape, maps.class_logits, maps.regression, targets, loss_cfg)?;
    ctx.tape.backward(loss)?;
    Ok(StepOutput {
        loss: report.detection_loss,
        focal: report.focal_loss,
        regression: report.regression_loss,
        grads: collect_grads(&ctx),
    })
}

/// Runs one stage over `n` samples; `step_fn(model, index, step)` computes a
/// single sample's loss and gradients.
fn run_stage(
    model: &mut Model,
    schedule: &TrainSchedule,
    n: usize,
    report: &mut TrainReport,
    mut step_fn: impl FnMut(&mut Model, usize, usize) -> Result<StepOutput>,
) -> Result<()> {
    schedule.validate()?;
    if n == 0 {
        return Err(HarnessError::EmptyDataset);
    }
    let mut opt = Sgd::new(schedule.momentum, schedule.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch)?;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(schedule.batch_size) {
            let mut sum: HashMap<String, Vec<f64>> = HashMap::new();
            let mut names: Vec<String> = Vec::new();
            let (mut loss, mut focal, mut regression) = (0.0, 0.0, 0.0);
            for &i in batch {
                let out = step_fn(model, i, step)?;
                loss += out.loss;
                focal += out.focal;
                regression += out.regression;
                for (name, g) in out.grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            names.push(name.clone());
                            sum.insert(name, g);
                        }
                    }
                }
            }
            let k = 1.0 / batch.len() as f64;
            let (loss, focal, regression) = (loss * k, focal * k, regression * k);
            if !loss.is_finite() {
                return Err(HarnessError::DivergedLoss {
                    stage: schedule.stage,
                    step,
                });
            }
            let mut grads: Vec<(String, Vec<f64>)> = names
                .into_iter()
                .map(|name| {
                    let mut g = sum.remove(&name).unwrap_or_default();
                    g.iter_mut().for_each(|x| *x *= k);
                    (name, g)
                })
                .collect();
            let grad_norm = match schedule.grad_clip {
                Some(c) => clip_grad_norm(&mut grads, c),
                None => super::optim::grad_norm(&grads),
            };
            if !grad_norm.is_finite() {
                return Err(HarnessError::DivergedLoss {
                    stage: schedule.stage,
                    step,
                });
            }
            opt.step(&mut model.params, &grads, lr);
            log::debug!(
                "{} epoch {epoch} step {step} lr {lr:e} loss {loss:.6}",
                schedule.stage.name()
            );
            report.steps.push(StepRecord {
                stage: schedule.stage,
                epoch,
                step,
                lr,
                loss,
                focal,
                regression,
                grad_norm,
            });
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let mean_loss = epoch_loss / batches as f64;
        log::info!(
            "{} epoch {epoch} lr {lr:e} mean loss {mean_loss:.6}",
            schedule.stage.name()
        );
        report.epochs.push(EpochRecord {
            stage: schedule.stage,
            epoch,
            lr,
            mean_loss,
        });
    }
    Ok(())
}

/// Stage 1: stereo and volume networks plus the occupancy head, trained on
/// the masked occupancy loss.
pub fn train_backbone(
    model: &mut Model,
    schedule: &TrainSchedule,
    data: &[TrainingSample],
    report: &mut TrainReport,
) -> Result<()> {
    if let Some(s) = data.first() {
        ensure_initialized(model, &s.sample.rig)?;
    }
    run_stage(model, schedule, data.len(), report, |m, i, step| {
        stage1_sample_step(
            m,
            &data[i],
            schedule.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        )
    })
}

/// Stage 2: detection head only. The frozen backbone is deterministic in
/// inference mode, so its outputs are computed once per sample.
pub fn train_detection(
    model: &mut Model,
    schedule: &TrainSchedule,
    data: &[TrainingSample],
    loss_cfg: &DetectionLossConfig,
    class_name: &str,
    report: &mut TrainReport,
) -> Result<()> {
    if let Some(s) = data.first() {
        ensure_initialized(model, &s.sample.rig)?;
    }
    let grid = model.config.grid;
    let mut cached = Vec::with_capacity(data.len());
    for s in data {
        let feats = detection_features(model, &s.sample)?;
        let boxes: Vec<BevBox> = s
            .sample
            .gt_boxes
            .iter()
            .filter(|g| g.class_name == class_name)
            .map(|g| g.bev)
            .collect();
        cached.push((feats, encode_detection_targets(&boxes, &grid, DETECTION_STRIDE)));
    }
    run_stage(model, schedule, data.len(), report, |m, i, _| {
        stage2_sample_step(m, &cached[i].0, &cached[i].1, loss_cfg)
    })
}

fn ensure_initialized(model: &mut Model, rig: &CameraRig) -> Result<()> {
    if model.params.is_empty() {
        model.initialize(rig)?;
    }
    Ok(())
}

/// Both stages in sequence on a fresh model.
pub fn train(config: &TrainConfig, data: &[TrainingSample]) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut model = Model::new(config.network.clone(), config.seed)?;
    let mut report = TrainReport::default();
    train_backbone(&mut model, &config.stage1, data, &mut report)?;
    train_detection(
        &mut model,
        &config.stage2,
        data,
        &config.detection_loss,
        &config.class_name,
        &mut report,
    )?;
    Ok((model, report))
}

/// Checksum of every parameter outside the detection head.
pub fn backbone_checksum(params: &ParamStore) -> u64 {
    params.filtered(|n| !is_detection_param(n)).checksum()
}

/// Occupancy probabilities and post-NMS boxes for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub occupancy: OccupancyGrid,
    pub dense: DenseDetections,
    pub boxes: Vec<BevBox>,
}

/// Full forward pass, decoding and NMS. Every parameter must already exist
/// in the model with the shape the configuration implies.
pub fn infer(model: &Model, sample: &StereoSample, score_threshold: f64, nms_iou: f64) -> Result<Inference> {
    let cfg = &model.config;
    let mut params = model.params.clone();
    let mut tape = Tape::new();
    let l = tape.constant(sample.left.clone());
    let r = tape.constant(sample.right.clone());
    let before = params.len();
    let mut ctx = Ctx::new(&mut tape, &mut params, model.seed, Trainable::None);
    let out = forward(&mut ctx, cfg, l, r, &sample.rig, Heads::ALL)?;
    if params.len() != before {
        return Err(HarnessError::CheckpointMismatch(format!(
            "checkpoint lacks {} parameters the configuration needs",
            params.len() - before
        )));
    }
    let occ = out.occupancy.expect("all heads requested");
    let maps = out.detection.expect("all heads requested");
    let data = |v: Var| tape.data(v).to_vec();
    let occupancy = OccupancyGrid::new(
        cfg.grid,
        data(occ),
        crate::voxel_grid::fov_mask(&cfg.grid, &sample.rig, cfg.require_both_cameras),
    )?;
    let s = tape.shape(maps.class_logits);
    let dense = DenseDetections {
        dims: (s[1], s[2]),
        class_logits: data(maps.class_logits),
        regression: data(maps.regression),
    };
    let decoded = decode_boxes(&dense, &cfg.grid, DETECTION_STRIDE, score_threshold)?;
    let boxes = nms(&decoded, nms_iou);
    Ok(Inference {
        occupancy,
        dense,
        boxes,
    })
}

const CHECKPOINT_HEADER_MAGIC: &[u8; 4] = b"PLMC";

/// Header stored in front of the parameter block of every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    pub seed: u64,
    pub optimizer: OptimizerInfo,
    pub stages_completed: Vec<Stage>,
}

/// Magic, `u32` header length, JSON header, then the parameter block.
pub fn write_checkpoint<W: Write>(mut w: W, header: &CheckpointHeader, params: &ParamStore) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(CHECKPOINT_HEADER_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    params.write_to(&mut w)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, ParamStore)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_HEADER_MAGIC {
        return Err(HarnessError::CheckpointMismatch("not a checkpoint file".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let params = ParamStore::read_from(&mut r)?;
    Ok((header, params))
}

/// Loads a checkpoint for `config`, rejecting topology differences.
pub fn load_model(bytes: &[u8], config: &NetworkConfig) -> Result<Model> {
    let (header, params) = read_checkpoint(bytes)?;
    if &header.network != config {
        return Err(HarnessError::CheckpointMismatch(
            "checkpoint was trained with a different network configuration".into(),
        ));
    }
    Ok(Model {
        config: header.network,
        params,
        seed: header.seed,
    })
}
