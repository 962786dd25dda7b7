//! KITTI-style BEV average precision with difficulty buckets.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::postproc::{rotated_iou, BevBox};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ground truth in the evaluated bucket")]
    NoGroundTruth,
    #[error("{0} detection frames vs {1} ground-truth frames")]
    FrameCountMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

/// Minimum 2D box height (px), maximum occlusion level and truncation per
/// difficulty, from the public benchmark's devkit.
const THRESHOLDS: [(Difficulty, f64, u8, f64); 3] = [
    (Difficulty::Easy, 40.0, 0, 0.15),
    (Difficulty::Moderate, 25.0, 1, 0.30),
    (Difficulty::Hard, 25.0, 2, 0.50),
];

pub fn assign_difficulty(image_bbox_height: f64, occlusion: u8, truncation: f64) -> Difficulty {
    THRESHOLDS
        .iter()
        .find(|(_, h, occ, trunc)| image_bbox_height >= *h && occlusion <= *occ && truncation <= *trunc)
        .map_or(Difficulty::Ignored, |t| t.0)
}

pub const DONT_CARE: &str = "DontCare";

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub bev: BevBox,
    pub class_name: String,
    pub image_bbox_height: f64,
    pub occlusion: u8,
    pub truncation: f64,
    pub difficulty: Difficulty,
}

impl GroundTruthBox {
    pub fn new(
        bev: BevBox,
        class_name: impl Into<String>,
        image_bbox_height: f64,
        occlusion: u8,
        truncation: f64,
    ) -> Self {
        let class_name = class_name.into();
        let difficulty = if class_name == DONT_CARE {
            Difficulty::Ignored
        } else {
            assign_difficulty(image_bbox_height, occlusion, truncation)
        };
        Self {
            bev,
            class_name,
            image_bbox_height,
            occlusion,
            truncation,
            difficulty,
        }
    }
}

/// Evaluation bucket. `Easy ⊂ Moderate ⊂ Hard`; `All` admits every
/// ground truth of the class regardless of difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Easy,
    Moderate,
    Hard,
    All,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Easy, Level::Moderate, Level::Hard, Level::All];

    pub fn name(self) -> &'static str {
        match self {
            Level::Easy => "easy",
            Level::Moderate => "moderate",
            Level::Hard => "hard",
            Level::All => "all",
        }
    }

    fn admits(self, d: Difficulty) -> bool {
        match self {
            Level::All => true,
            Level::Easy => d == Difficulty::Easy,
            Level::Moderate => matches!(d, Difficulty::Easy | Difficulty::Moderate),
            Level::Hard => d != Difficulty::Ignored,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GtRole {
    Valid,
    Ignored,
    Excluded,
}

/// Neighbouring class absorbed like an ignored box (a van is not a false
/// positive for a car detector).
fn neighbour_class(class: &str) -> Option<&'static str> {
    match class {
        "Car" => Some("Van"),
        "Pedestrian" => Some("Person_sitting"),
        _ => None,
    }
}

fn role(gt: &GroundTruthBox, class: &str, level: Level) -> GtRole {
    if gt.class_name == class {
        if level.admits(gt.difficulty) {
            GtRole::Valid
        } else {
            GtRole::Ignored
        }
    } else if gt.class_name == DONT_CARE || neighbour_class(class) == Some(gt.class_name.as_str()) {
        GtRole::Ignored
    } else {
        GtRole::Excluded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Matched an ignored ground truth: counts as neither.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    pub scores: Vec<f64>,
    pub outcomes: Vec<Outcome>,
    pub gt_used: Vec<bool>,
    pub num_valid_gt: usize,
}

impl FrameMatch {
    pub fn tp_flags(&self) -> Vec<bool> {
        self.outcomes.iter().map(|&o| o == Outcome::TruePositive).collect()
    }

    pub fn fp_flags(&self) -> Vec<bool> {
        self.outcomes.iter().map(|&o| o == Outcome::FalsePositive).collect()
    }
}

/// Greedy matching of score-sorted detections: each takes the highest-IoU
/// unused valid ground truth with IoU ≥ `iou_threshold` (lowest index on
/// ties). Invalid boxes (degenerate sizes) count as zero overlap.
pub fn match_detections(
    dets: &[BevBox],
    gts: &[GroundTruthBox],
    class: &str,
    level: Level,
    iou_threshold: f64,
) -> FrameMatch {
    let roles: Vec<GtRole> = gts.iter().map(|g| role(g, class, level)).collect();
    let mut gt_used = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    for d in dets {
        let ious: Vec<f64> = gts.iter().map(|g| rotated_iou(d, &g.bev).unwrap_or(0.0)).collect();
        let mut best: Option<(usize, f64)> = None;
        for (gi, &iou) in ious.iter().enumerate() {
            if roles[gi] == GtRole::Valid && !gt_used[gi] && iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        let outcome = if let Some((gi, _)) = best {
            gt_used[gi] = true;
            Outcome::TruePositive
        } else if ious
            .iter()
            .zip(&roles)
            .any(|(&iou, &r)| r == GtRole::Ignored && iou >= iou_threshold)
        {
            Outcome::Ignored
        } else {
            Outcome::FalsePositive
        };
        outcomes.push(outcome);
    }
    FrameMatch {
        scores: dets.iter().map(|d| d.score).collect(),
        outcomes,
        gt_used,
        num_valid_gt: roles.iter().filter(|&&r| r == GtRole::Valid).count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    #[default]
    ElevenPoint,
    FortyPoint,
}

impl ApMode {
    pub fn recall_points(self) -> Vec<f64> {
        match self {
            ApMode::ElevenPoint => (0..=10).map(|i| i as f64 / 10.0).collect(),
            ApMode::FortyPoint => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

/// Pooled precision/recall points, one per counted detection in descending
/// score order (ties keep frame order, then detection order).
pub fn pr_curve(frames: &[FrameMatch]) -> Result<Vec<(f64, f64)>, EvalError> {
    let total_gt: usize = frames.iter().map(|f| f.num_valid_gt).sum();
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut pooled: Vec<(f64, bool)> = frames
        .iter()
        .flat_map(|f| {
            f.scores
                .iter()
                .zip(&f.outcomes)
                .filter(|(_, &o)| o != Outcome::Ignored)
                .map(|(&s, &o)| (s, o == Outcome::TruePositive))
        })
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    Ok(pooled
        .into_iter()
        .map(|(_, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            (tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect())
}

/// Mean interpolated precision `max_{r' ≥ r} p(r')` over the mode's recall
/// sample points.
pub fn average_precision(frames: &[FrameMatch], mode: ApMode) -> Result<f64, EvalError> {
    let curve = pr_curve(frames)?;
    // suffix maxima of precision
    let mut best = vec![0.0f64; curve.len() + 1];
    for i in (0..curve.len()).rev() {
        best[i] = best[i + 1].max(curve[i].1);
    }
    let points = mode.recall_points();
    let sum: f64 = points
        .iter()
        .map(|&r| {
            let first = curve.partition_point(|&(rec, _)| rec < r - 1e-12);
            best[first]
        })
        .sum();
    Ok(sum / points.len() as f64)
}

pub const IOU_THRESHOLDS: [f64; 2] = [0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub class: String,
    pub mode: ApMode,
    pub iou_thresholds: Vec<f64>,
    /// `(level, AP per threshold)`; `None` where the bucket has no ground truth.
    pub rows: Vec<(Level, Vec<Option<f64>>)>,
}

/// AP for every level and IoU threshold over a set of frames.
pub fn evaluate(
    detections: &[Vec<BevBox>],
    ground_truth: &[Vec<GroundTruthBox>],
    class: &str,
    mode: ApMode,
) -> Result<ResultsTable, EvalError> {
    if detections.len() != ground_truth.len() {
        return Err(EvalError::FrameCountMismatch(detections.len(), ground_truth.len()));
    }
    let sorted: Vec<Vec<BevBox>> = detections
        .iter()
        .map(|d| {
            let mut d = d.clone();
            d.sort_by(crate::postproc::detection_order);
            d
        })
        .collect();
    let rows = Level::ALL
        .iter()
        .map(|&level| {
            let aps = IOU_THRESHOLDS
                .iter()
                .map(|&thr| {
                    let frames: Vec<FrameMatch> = sorted
                        .iter()
                        .zip(ground_truth)
                        .map(|(d, g)| match_detections(d, g, class, level, thr))
                        .collect();
                    average_precision(&frames, mode).ok()
                })
                .collect();
            (level, aps)
        })
        .collect();
    Ok(ResultsTable {
        class: class.to_string(),
        mode,
        iou_thresholds: IOU_THRESHOLDS.to_vec(),
        rows,
    })
}

impl ResultsTable {
    pub fn get(&self, level: Level, iou_threshold: f64) -> Option<f64> {
        let col = self.iou_thresholds.iter().position(|&t| t == iou_threshold)?;
        self.rows.iter().find(|(l, _)| *l == level)?.1[col]
    }

    fn cell(ap: Option<f64>) -> String {
        ap.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} BEV AP (%)\n{:<10}", self.class, "difficulty");
        for t in &self.iou_thresholds {
            let _ = write!(s, " {:>9}", format!("IoU={t}"));
        }
        s.push('\n');
        for (level, aps) in &self.rows {
            let _ = write!(s, "{:<10}", level.name());
            for &ap in aps {
                let _ = write!(s, " {:>9}", Self::cell(ap));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("difficulty");
        for t in &self.iou_thresholds {
            let _ = write!(s, ",ap_iou_{t}");
        }
        s.push('\n');
        for (level, aps) in &self.rows {
            s.push_str(level.name());
            for &ap in aps {
                let _ = write!(s, ",{}", Self::cell(ap));
            }
            s.push('\n');
        }
        s
    }
}
