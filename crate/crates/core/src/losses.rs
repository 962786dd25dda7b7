//! Occupancy BCE, focal loss, smooth-L1 and dense detection targets.
//!
//! Each loss exists as a plain scalar function (used by oracles and
//! evaluation code) and as a differentiable tape reduction.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::postproc::{cell_center, detection_dims, BevBox, DenseDetections, REGRESSION_CHANNELS};
use crate::tensor::{sigmoid, Tape, TensorError, Var};
use crate::voxel_grid::{OccupancyGrid, VoxelGridSpec};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` with clamped `p`.
pub fn bce(p: f64, y: f64) -> f64 {
    let (p, _) = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Derivative of [`bce`] with respect to `p`; zero where clamping is active.
pub fn bce_grad(p: f64, y: f64) -> f64 {
    let (p, clamped) = clamp_prob(p);
    if clamped {
        0.0
    } else {
        -y / p + (1.0 - y) / (1.0 - p)
    }
}

/// Focal loss of one probability against a binary class.
pub fn focal(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let (p, _) = clamp_prob(p);
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Derivative of `focal(sigmoid(z), ..)` with respect to the logit `z`.
pub fn focal_logit_grad(z: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let (p, clamped) = clamp_prob(sigmoid(z));
    if clamped {
        return 0.0;
    }
    if positive {
        alpha * (1.0 - p).powf(gamma) * (gamma * p * p.ln() - (1.0 - p))
    } else {
        (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * (1.0 - p).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothL1Mode {
    /// `0.5|x|` below 0.5, `|x| - 0.5` above: discontinuous at `|x| = 0.5`.
    PaperLiteral,
    /// `x²` below 0.5, `|x| - 0.25` above.
    #[default]
    HuberBeta05,
}

pub fn smooth_l1(x: f64, mode: SmoothL1Mode) -> f64 {
    let a = x.abs();
    match mode {
        SmoothL1Mode::PaperLiteral if a < 0.5 => 0.5 * a,
        SmoothL1Mode::PaperLiteral => a - 0.5,
        SmoothL1Mode::HuberBeta05 if a < 0.5 => x * x,
        SmoothL1Mode::HuberBeta05 => a - 0.25,
    }
}

pub fn smooth_l1_grad(x: f64, mode: SmoothL1Mode) -> f64 {
    let a = x.abs();
    let sign = if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    };
    match mode {
        SmoothL1Mode::PaperLiteral if a < 0.5 => 0.5 * sign,
        SmoothL1Mode::HuberBeta05 if a < 0.5 => 2.0 * x,
        _ => sign,
    }
}

fn check_grid_match(pred_len: usize, labels: &OccupancyGrid) -> Result<(), TensorError> {
    if pred_len != labels.values.len() || labels.fov_mask.len() != labels.values.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "occupancy prediction has {pred_len} voxels, labels have {} (mask {})",
            labels.values.len(),
            labels.fov_mask.len()
        )));
    }
    Ok(())
}

/// Mean BCE over in-FOV voxels; zero when the mask is empty.
pub fn occupancy_bce(pred: &OccupancyGrid, labels: &OccupancyGrid) -> Result<f64, TensorError> {
    check_grid_match(pred.values.len(), labels)?;
    let n = labels.fov_mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .values
        .iter()
        .zip(&labels.values)
        .zip(&labels.fov_mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &y), _)| bce(p, y))
        .sum();
    Ok(sum / n as f64)
}

/// Differentiable [`occupancy_bce`] on a probability tensor laid out like
/// the label grid (x-major `[X, Y, Z]`, any shape with the same length).
pub fn occupancy_bce_var(tape: &mut Tape, probs: Var, labels: &OccupancyGrid) -> Result<Var, TensorError> {
    check_grid_match(tape.data(probs).len(), labels)?;
    let n = labels.fov_mask.iter().filter(|&&m| m).count().max(1) as f64;
    Ok(tape.reduce_with(probs, |i, p| {
        if labels.fov_mask[i] {
            let y = labels.values[i];
            (bce(p, y) / n, bce_grad(p, y) / n)
        } else {
            (0.0, 0.0)
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub smooth_l1: SmoothL1Mode,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            smooth_l1: SmoothL1Mode::HuberBeta05,
        }
    }
}

/// Dense training targets at the detection stride, channel-major over an
/// `(nx, nz)` map like [`DenseDetections`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    pub dims: (usize, usize),
    pub stride: usize,
    pub positive: Vec<bool>,
    pub regression: Vec<f64>,
}

impl DetectionTargets {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    /// Class logits of `±confidence` and exact regression targets: what a
    /// perfect detection head would output.
    pub fn as_detections(&self, confidence: f64) -> DenseDetections {
        DenseDetections {
            dims: self.dims,
            class_logits: self
                .positive
                .iter()
                .map(|&p| if p { confidence } else { -confidence })
                .collect(),
            regression: self.regression.clone(),
        }
    }
}

/// Regression targets of `b` relative to a cell centered at `(cu, cv)`.
pub fn encode_box(b: &BevBox, cu: f64, cv: f64) -> [f64; REGRESSION_CHANNELS] {
    let (s, c) = b.theta.sin_cos();
    [b.u - cu, b.v - cv, b.w.ln(), b.h.ln(), s, c]
}

/// Cells whose centers fall inside a box are positive for it. A cell inside
/// several boxes belongs to the one with the nearest center. A box that
/// covers no cell center claims the cell containing its own center.
pub fn encode_detection_targets(boxes: &[BevBox], grid: &VoxelGridSpec, stride: usize) -> DetectionTargets {
    let (nx, nz) = detection_dims(grid, stride);
    let cells = nx * nz;
    let mut owner: Vec<Option<usize>> = vec![None; cells];
    let dist2 = |b: &BevBox, cu: f64, cv: f64| (b.u - cu).powi(2) + (b.v - cv).powi(2);
    // order-independent preference: nearest center, then smaller (u, v, w, h, theta)
    let better = |a: &BevBox, b: &BevBox, cu: f64, cv: f64| -> bool {
        dist2(a, cu, cv)
            .total_cmp(&dist2(b, cu, cv))
            .then(a.u.total_cmp(&b.u))
            .then(a.v.total_cmp(&b.v))
            .then(a.w.total_cmp(&b.w))
            .then(a.h.total_cmp(&b.h))
            .then(a.theta.total_cmp(&b.theta))
            == Ordering::Less
    };
    let claim = |owner: &mut Vec<Option<usize>>, c: usize, bi: usize, cu: f64, cv: f64| match owner[c] {
        Some(cur) if !better(&boxes[bi], &boxes[cur], cu, cv) => {}
        _ => owner[c] = Some(bi),
    };
    let cell = stride as f64 * grid.resolution;
    for (bi, b) in boxes.iter().enumerate() {
        let mut claimed = false;
        let r = 0.5 * b.w.hypot(b.h);
        let lo_i = ((b.u - r - grid.x_range[0]) / cell).floor().max(0.0) as usize;
        let hi_i = (((b.u + r - grid.x_range[0]) / cell).ceil().max(0.0) as usize).min(nx);
        let lo_j = ((b.v - r - grid.z_range[0]) / cell).floor().max(0.0) as usize;
        let hi_j = (((b.v + r - grid.z_range[0]) / cell).ceil().max(0.0) as usize).min(nz);
        for i in lo_i..hi_i {
            for j in lo_j..hi_j {
                let (cu, cv) = cell_center(grid, stride, i, j);
                if b.contains(cu, cv) {
                    claim(&mut owner, i * nz + j, bi, cu, cv);
                    claimed = true;
                }
            }
        }
        if !claimed {
            let fi = ((b.u - grid.x_range[0]) / cell).floor();
            let fj = ((b.v - grid.z_range[0]) / cell).floor();
            if fi >= 0.0 && fj >= 0.0 && (fi as usize) < nx && (fj as usize) < nz {
                let (i, j) = (fi as usize, fj as usize);
                let (cu, cv) = cell_center(grid, stride, i, j);
                claim(&mut owner, i * nz + j, bi, cu, cv);
            }
        }
    }
    let mut positive = vec![false; cells];
    let mut regression = vec![0.0; REGRESSION_CHANNELS * cells];
    for i in 0..nx {
        for j in 0..nz {
            let c = i * nz + j;
            if let Some(bi) = owner[c] {
                positive[c] = true;
                let (cu, cv) = cell_center(grid, stride, i, j);
                for (ch, t) in encode_box(&boxes[bi], cu, cv).into_iter().enumerate() {
                    regression[ch * cells + c] = t;
                }
            }
        }
    }
    DetectionTargets {
        dims: (nx, nz),
        stride,
        positive,
        regression,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub depth_loss: f64,
    pub focal_loss: f64,
    pub regression_loss: f64,
    pub detection_loss: f64,
    /// In-FOV voxels behind `depth_loss`.
    pub voxels: usize,
    /// Detection cells and positives behind the focal and regression terms.
    pub cells: usize,
    pub positives: usize,
}

fn check_maps(tape: &Tape, logits: Var, regression: Var, t: &DetectionTargets) -> Result<(), TensorError> {
    let cells = t.dims.0 * t.dims.1;
    if tape.data(logits).len() != cells || tape.data(regression).len() != REGRESSION_CHANNELS * cells {
        return Err(TensorError::ShapeMismatch(format!(
            "detection maps {:?} / {:?} do not fit targets of {}x{} cells",
            tape.shape(logits),
            tape.shape(regression),
            t.dims.0,
            t.dims.1
        )));
    }
    Ok(())
}

/// Focal loss over every cell plus smooth-L1 over positive cells, both
/// divided by `max(1, positives)`. Returns the differentiable total and the
/// per-term report.
pub fn detection_loss_var(
    tape: &mut Tape,
    logits: Var,
    regression: Var,
    targets: &DetectionTargets,
    cfg: &DetectionLossConfig,
) -> Result<(Var, LossReport), TensorError> {
    check_maps(tape, logits, regression, targets)?;
    let cells = targets.dims.0 * targets.dims.1;
    let positives = targets.num_positive();
    let norm = positives.max(1) as f64;
    let focal_var = tape.reduce_with(logits, |i, z| {
        let pos = targets.positive[i];
        (
            focal(sigmoid(z), pos, cfg.alpha, cfg.gamma) / norm,
            focal_logit_grad(z, pos, cfg.alpha, cfg.gamma) / norm,
        )
    });
    let reg_var = tape.reduce_with(regression, |i, x| {
        if targets.positive[i % cells] {
            let r = x - targets.regression[i];
            (
                smooth_l1(r, cfg.smooth_l1) / norm,
                smooth_l1_grad(r, cfg.smooth_l1) / norm,
            )
        } else {
            (0.0, 0.0)
        }
    });
    let total = tape.add(focal_var, reg_var)?;
    let focal_loss = tape.data(focal_var)[0];
    let regression_loss = tape.data(reg_var)[0];
    let report = LossReport {
        focal_loss,
        regression_loss,
        detection_loss: tape.data(total)[0],
        cells,
        positives,
        ..LossReport::default()
    };
    Ok((total, report))
}

/// Non-differentiable [`detection_loss_var`].
pub fn detection_loss(
    pred: &DenseDetections,
    targets: &DetectionTargets,
    cfg: &DetectionLossConfig,
) -> Result<LossReport, TensorError> {
    let mut tape = Tape::new();
    let (nx, nz) = pred.dims;
    if pred.dims != targets.dims {
        return Err(TensorError::ShapeMismatch(format!(
            "prediction map {nx}x{nz} vs target map {}x{}",
            targets.dims.0, targets.dims.1
        )));
    }
    let logits = tape.constant(crate::tensor::Tensor::new(vec![1, nx, nz], pred.class_logits.clone())?);
    let reg = tape.constant(crate::tensor::Tensor::new(
        vec![REGRESSION_CHANNELS, nx, nz],
        pred.regression.clone(),
    )?);
    detection_loss_var(&mut tape, logits, reg, targets, cfg).map(|(_, r)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postproc::decode_boxes;
    use crate::tensor::Tensor;

    fn toy_grid() -> VoxelGridSpec {
        VoxelGridSpec {
            x_range: [-6.4, 6.4],
            y_range: [-1.0, 0.6],
            z_range: [2.0, 14.8],
            resolution: 0.2,
        }
    }

    #[test]
    fn bce_examples() {
        assert!((bce(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce(0.5, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce(0.9, 1.0) - 0.105360515657826).abs() < 1e-12);
        assert_eq!(bce_grad(0.5, 1.0), -2.0);
        assert!(bce(1.0, 1.0) > 0.0 && bce(1.0, 1.0) < 1e-6);
    }

    #[test]
    fn focal_examples() {
        let v = focal(0.5, true, 0.25, 2.0);
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.043322).abs() < 1e-6);
        assert!(focal(1.0 - 1e-12, true, 0.25, 2.0) < 1e-20);
        assert!((focal(0.3, false, 0.5, 0.0) - 0.5 * bce(0.3, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn focal_logit_grad_matches_differences() {
        for &z in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            for &pos in &[true, false] {
                for &(a, g) in &[(0.25, 2.0), (0.5, 0.0), (0.7, 1.5)] {
                    let h = 1e-6;
                    let num = (focal(sigmoid(z + h), pos, a, g) - focal(sigmoid(z - h), pos, a, g)) / (2.0 * h);
                    let ana = focal_logit_grad(z, pos, a, g);
                    assert!((num - ana).abs() < 1e-8, "z={z} pos={pos} a={a} g={g}: {num} vs {ana}");
                }
            }
        }
    }

    #[test]
    fn smooth_l1_examples() {
        for mode in [SmoothL1Mode::PaperLiteral, SmoothL1Mode::HuberBeta05] {
            assert_eq!(smooth_l1(0.0, mode), 0.0);
        }
        assert_eq!(smooth_l1(0.4, SmoothL1Mode::PaperLiteral), 0.2);
        assert_eq!(smooth_l1(2.0, SmoothL1Mode::PaperLiteral), 1.5);
        assert_eq!(
            smooth_l1(0.5 - 1e-12, SmoothL1Mode::PaperLiteral).to_bits(),
            (0.5 * (0.5 - 1e-12f64)).to_bits()
        );
        assert_eq!(smooth_l1(0.5, SmoothL1Mode::PaperLiteral), 0.0);
        let below = smooth_l1(0.5 - 1e-12, SmoothL1Mode::HuberBeta05);
        assert!((below - smooth_l1(0.5, SmoothL1Mode::HuberBeta05)).abs() < 1e-11);
        assert_eq!(
            smooth_l1_grad(0.5 - 1e-15, SmoothL1Mode::HuberBeta05),
            2.0 * (0.5 - 1e-15)
        );
        assert_eq!(smooth_l1_grad(0.5, SmoothL1Mode::HuberBeta05), 1.0);
    }

    #[test]
    fn occupancy_bce_masked_and_examples() {
        let spec = VoxelGridSpec {
            x_range: [-1.0, 1.0],
            y_range: [0.0, 1.0],
            z_range: [1.0, 3.0],
            resolution: 1.0,
        };
        let n = spec.num_voxels();
        let mut labels = OccupancyGrid::new(spec, vec![0.0; n], vec![true; n]).unwrap();
        for (i, v) in labels.values.iter_mut().enumerate() {
            *v = (i % 2) as f64;
        }
        labels.fov_mask = vec![false; n];
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_fn(&[n], |i| 0.1 + 0.8 * i as f64 / n as f64), true);
        let l = occupancy_bce_var(&mut tape, p, &labels).unwrap();
        assert_eq!(tape.data(l)[0], 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(p).unwrap().iter().all(|&g| g == 0.0));

        labels.fov_mask[3] = true;
        labels.values[3] = 1.0;
        let mut pred = labels.clone();
        pred.values = vec![0.9; n];
        assert!((occupancy_bce(&pred, &labels).unwrap() - 0.105360515657826).abs() < 1e-12);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[n], 0.5), true);
        let l = occupancy_bce_var(&mut tape, p, &labels).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap()[3], -2.0);
        assert_eq!(tape.grad(p).unwrap().iter().filter(|&&g| g != 0.0).count(), 1);
    }

    #[test]
    fn encode_centered_box() {
        let grid = toy_grid();
        let (cu, cv) = cell_center(&grid, 4, 5, 7);
        let b = BevBox::new(cu, cv, 1.6, 3.9, 0.0);
        let t = encode_detection_targets(&[b], &grid, 4);
        let cells = t.dims.0 * t.dims.1;
        let c = 5 * t.dims.1 + 7;
        assert!(t.positive[c]);
        assert_eq!(t.regression[c], 0.0);
        assert_eq!(t.regression[cells + c], 0.0);
        assert_eq!((t.regression[4 * cells + c], t.regression[5 * cells + c]), (0.0, 1.0));
    }

    #[test]
    fn tiny_box_claims_its_own_cell() {
        let grid = toy_grid();
        let b = BevBox::new(0.13, 8.05, 0.05, 0.05, 0.3);
        let t = encode_detection_targets(&[b], &grid, 4);
        assert_eq!(t.num_positive(), 1);
        let outside = BevBox::new(50.0, 8.0, 1.0, 1.0, 0.0);
        assert_eq!(encode_detection_targets(&[outside], &grid, 4).num_positive(), 0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let grid = toy_grid();
        let boxes = [
            BevBox::new(-2.3, 5.1, 1.6, 3.8, 0.7),
            BevBox::new(3.1, 11.2, 1.7, 4.1, -2.9),
        ];
        let t = encode_detection_targets(&boxes, &grid, 4);
        let decoded = decode_boxes(&t.as_detections(30.0), &grid, 4, 0.5).unwrap();
        assert_eq!(decoded.len(), t.num_positive());
        for d in decoded {
            let gt = boxes
                .iter()
                .find(|b| (b.u - d.u).abs() < 1e-9 && (b.v - d.v).abs() < 1e-9)
                .expect("decoded box matches a ground truth");
            assert!((gt.w - d.w).abs() < 1e-9 && (gt.h - d.h).abs() < 1e-9);
            assert!((gt.theta - d.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn detection_loss_examples() {
        let grid = toy_grid();
        let cfg = DetectionLossConfig::default();
        let empty = encode_detection_targets(&[], &grid, 4);
        let pred = DenseDetections {
            dims: empty.dims,
            class_logits: vec![0.0; empty.positive.len()],
            regression: vec![0.3; 6 * empty.positive.len()],
        };
        let r = detection_loss(&pred, &empty, &cfg).unwrap();
        assert_eq!(r.regression_loss, 0.0);
        let expected = empty.positive.len() as f64 * focal(0.5, false, 0.25, 2.0);
        assert!((r.focal_loss - expected).abs() < 1e-9);

        let boxes = [
            BevBox::new(1.0, 7.0, 1.6, 3.9, 0.4),
            BevBox::new(-3.0, 10.0, 1.7, 4.0, -1.2),
        ];
        let t = encode_detection_targets(&boxes, &grid, 4);
        let perfect = detection_loss(&t.as_detections(20.0), &t, &cfg).unwrap();
        assert!(perfect.detection_loss < 1e-3, "{perfect:?}");
        assert_eq!(perfect.detection_loss, perfect.focal_loss + perfect.regression_loss);

        let swapped = encode_detection_targets(&[boxes[1], boxes[0]], &grid, 4);
        assert_eq!(swapped, t);
        let wrong = DenseDetections {
            dims: (1, 1),
            class_logits: vec![0.0],
            regression: vec![0.0; 6],
        };
        assert!(detection_loss(&wrong, &t, &cfg).is_err());
    }
}
