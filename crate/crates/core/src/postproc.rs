//! Oriented BEV boxes: decoding dense head outputs, rotated IoU by convex
//! clipping, and greedy NMS.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt::Write as _;

use thiserror::Error;

use crate::tensor::sigmoid;
use crate::voxel_grid::VoxelGridSpec;

#[derive(Debug, Error, PartialEq)]
pub enum PostprocError {
    #[error("degenerate box: w = {w}, h = {h}")]
    DegenerateBox { w: f64, h: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed detection line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
}

/// Number of regression channels: `du, dv, log w, log h, sin θ, cos θ`.
pub const REGRESSION_CHANNELS: usize = 6;

/// Oriented rectangle on the ground plane. `(u, v)` is the center in
/// (camera x, camera z) meters, `w` extends along the heading `theta`, `h`
/// across it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevBox {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub score: f64,
    pub class_id: u32,
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta - 2.0 * PI * ((theta + PI) / (2.0 * PI)).floor();
    if t >= PI {
        t - 2.0 * PI
    } else {
        t
    }
}

impl BevBox {
    pub fn new(u: f64, v: f64, w: f64, h: f64, theta: f64) -> Self {
        Self {
            u,
            v,
            w,
            h,
            theta: normalize_angle(theta),
            score: 1.0,
            class_id: 0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn validate(&self) -> Result<(), PostprocError> {
        if self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite() {
            Ok(())
        } else {
            Err(PostprocError::DegenerateBox { w: self.w, h: self.h })
        }
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        [[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]]
            .map(|[lx, ly]| [self.u + lx * c - ly * s, self.v + lx * s + ly * c])
    }

    /// Point-in-box test (boundary inclusive).
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (du, dv) = (u - self.u, v - self.v);
        let lx = du * c + dv * s;
        let ly = -du * s + dv * c;
        lx.abs() <= 0.5 * self.w && ly.abs() <= 0.5 * self.h
    }
}

const EDGE_EPS: f64 = 1e-9;

fn cross(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn edge_intersection(a: [f64; 2], b: [f64; 2], p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let t = cp / (cp - cq);
    let mut out = [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
    // keep axis-aligned clip lines exact
    if a[0] == b[0] {
        out[0] = a[0];
    }
    if a[1] == b[1] {
        out[1] = a[1];
    }
    out
}

/// Shoelace area (positive for counter-clockwise polygons).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

/// Clips `subject` against the convex counter-clockwise `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let p_in = cross(a, b, p) >= -EDGE_EPS;
            let q_in = cross(a, b, q) >= -EDGE_EPS;
            match (p_in, q_in) {
                (true, true) => output.push(q),
                (true, false) => output.push(edge_intersection(a, b, p, q)),
                (false, true) => {
                    output.push(edge_intersection(a, b, p, q));
                    output.push(q);
                }
                (false, false) => {}
            }
        }
    }
    output
}

pub fn intersection_area(a: &BevBox, b: &BevBox) -> f64 {
    polygon_area(&clip_convex(&a.corners(), &b.corners())).max(0.0)
}

fn aligned_intersection(a: &BevBox, b: &BevBox) -> f64 {
    let overlap = |ca: f64, ea: f64, cb: f64, eb: f64| {
        ((ca + 0.5 * ea).min(cb + 0.5 * eb) - (ca - 0.5 * ea).max(cb - 0.5 * eb)).max(0.0)
    };
    overlap(a.u, a.w, b.u, b.w) * overlap(a.v, a.h, b.v, b.h)
}

/// Intersection over union of two oriented boxes.
pub fn rotated_iou(a: &BevBox, b: &BevBox) -> Result<f64, PostprocError> {
    a.validate()?;
    b.validate()?;
    // cheap reject on circumscribed circles
    let ra = 0.5 * a.w.hypot(a.h);
    let rb = 0.5 * b.w.hypot(b.h);
    if (a.u - b.u).hypot(a.v - b.v) > ra + rb {
        return Ok(0.0);
    }
    let inter = if a.theta == 0.0 && b.theta == 0.0 {
        aligned_intersection(a, b)
    } else {
        intersection_area(a, b)
    };
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Score descending, then `u`, then `v` ascending.
pub fn detection_order(a: &BevBox, b: &BevBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.u.total_cmp(&b.u))
        .then(a.v.total_cmp(&b.v))
}

/// Greedy NMS: keeps boxes in [`detection_order`], dropping any whose IoU
/// with an already kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[BevBox], iou_threshold: f64) -> Vec<BevBox> {
    let mut order: Vec<&BevBox> = boxes.iter().collect();
    order.sort_by(|a, b| detection_order(a, b));
    let mut kept: Vec<BevBox> = Vec::new();
    for cand in order {
        let suppressed = kept
            .iter()
            .any(|k| rotated_iou(k, cand).map(|iou| iou > iou_threshold).unwrap_or(false));
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

/// Dense prediction maps at `stride` voxels per cell: one classification
/// logit and six regression values per cell, both channel-major over an
/// `(nx, nz)` map.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDetections {
    pub dims: (usize, usize),
    pub class_logits: Vec<f64>,
    pub regression: Vec<f64>,
}

/// Metric BEV center of detection cell `(i, j)`.
pub fn cell_center(grid: &VoxelGridSpec, stride: usize, i: usize, j: usize) -> (f64, f64) {
    let r = grid.resolution;
    let half = stride as f64 * 0.5;
    (
        grid.x_range[0] + (i as f64 * stride as f64 + half) * r,
        grid.z_range[0] + (j as f64 * stride as f64 + half) * r,
    )
}

/// Detection map size for a grid at `stride` (ceil division, matching
/// stride-2 convolutions with padding 1).
pub fn detection_dims(grid: &VoxelGridSpec, stride: usize) -> (usize, usize) {
    let (x, _, z) = grid.dims_unchecked();
    (x.div_ceil(stride), z.div_ceil(stride))
}

/// Turns every cell with `sigmoid(logit) > score_threshold` into a box.
pub fn decode_boxes(
    dets: &DenseDetections,
    grid: &VoxelGridSpec,
    stride: usize,
    score_threshold: f64,
) -> Result<Vec<BevBox>, PostprocError> {
    let (nx, nz) = dets.dims;
    let cells = nx * nz;
    if dets.class_logits.len() != cells || dets.regression.len() != REGRESSION_CHANNELS * cells {
        return Err(PostprocError::ShapeMismatch(format!(
            "maps for {nx}x{nz} cells need {cells} logits and {} regressions, got {} and {}",
            REGRESSION_CHANNELS * cells,
            dets.class_logits.len(),
            dets.regression.len()
        )));
    }
    let mut out = Vec::new();
    for i in 0..nx {
        for j in 0..nz {
            let c = i * nz + j;
            let score = sigmoid(dets.class_logits[c]);
            if !(score > score_threshold) {
                continue;
            }
            let r = |ch: usize| dets.regression[ch * cells + c];
            let (cu, cv) = cell_center(grid, stride, i, j);
            let mut b = BevBox::new(cu + r(0), cv + r(1), r(2).exp(), r(3).exp(), r(4).atan2(r(5)));
            b.score = score;
            out.push(b);
        }
    }
    Ok(out)
}

/// `%.9g`-style formatting.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        return format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    let fixed = format!("{x:.decimals$}");
    if fixed.contains('.') {
        fixed.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        fixed
    }
}

/// One line per box: `class u v w h theta score`.
pub fn write_detections(boxes: &[BevBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            b.class_id,
            format_sig9(b.u),
            format_sig9(b.v),
            format_sig9(b.w),
            format_sig9(b.h),
            format_sig9(b.theta),
            format_sig9(b.score)
        );
    }
    s
}

pub fn parse_detections(text: &str) -> Result<Vec<BevBox>, PostprocError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: String| PostprocError::MalformedLine { line: n + 1, reason };
        if fields.len() != 7 {
            return Err(bad(format!("expected 7 fields, got {}", fields.len())));
        }
        let class_id = fields[0].parse::<u32>().map_err(|e| bad(e.to_string()))?;
        let mut v = [0.0; 6];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|e| bad(e.to_string()))?;
        }
        out.push(BevBox {
            u: v[0],
            v: v[1],
            w: v[2],
            h: v[3],
            theta: v[4],
            score: v[5],
            class_id,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let a = BevBox::new(1.0, 2.0, 2.0, 4.0, 0.3);
        assert!((rotated_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = BevBox::new(10.0, 2.0, 2.0, 4.0, 0.3);
        assert_eq!(rotated_iou(&a, &b).unwrap(), 0.0);
        let touching = BevBox::new(3.0, 2.0, 2.0, 4.0, 0.0);
        let a0 = BevBox::new(1.0, 2.0, 2.0, 4.0, 0.0);
        assert!(rotated_iou(&a0, &touching).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rotated_unit_square_octagon() {
        let a = BevBox::new(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = BevBox::new(0.0, 0.0, 1.0, 1.0, PI / 4.0);
        let s2 = 2f64.sqrt();
        let inter = 2.0 * (s2 - 1.0);
        let expected = inter / (2.0 - inter);
        let iou = rotated_iou(&a, &b).unwrap();
        assert!((iou - expected).abs() < 1e-12);
        assert_eq!(format!("{iou:.5}"), "0.70711");
    }

    #[test]
    fn degenerate_rejected() {
        let a = BevBox::new(0.0, 0.0, 0.0, 1.0, 0.0);
        let b = BevBox::new(0.0, 0.0, 1.0, 1.0, 0.0);
        assert!(matches!(rotated_iou(&a, &b), Err(PostprocError::DegenerateBox { .. })));
    }

    #[test]
    fn normalize_range() {
        for t in [-10.0, -PI, -0.1, 0.0, PI, 3.5, 100.0] {
            let n = normalize_angle(t);
            assert!((-PI..PI).contains(&n), "{t} -> {n}");
            assert!(((n - t) / (2.0 * PI)).fract().abs() < 1e-9 || ((n - t) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
        assert_eq!(normalize_angle(PI), -PI);
    }

    #[test]
    fn nms_examples() {
        let a = BevBox::new(0.0, 0.0, 2.0, 4.0, 0.0).with_score(0.9);
        assert_eq!(nms(&[a], 0.5), vec![a]);
        let b = a.with_score(0.8);
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
        let far = BevBox::new(20.0, 0.0, 2.0, 4.0, 0.0).with_score(0.95);
        assert_eq!(nms(&[a, far, b], 0.5), vec![far, a]);
    }

    #[test]
    fn decode_zero_regression() {
        let grid = VoxelGridSpec {
            x_range: [-3.2, 3.2],
            y_range: [0.0, 0.8],
            z_range: [0.0, 6.4],
            resolution: 0.2,
        };
        let dims = detection_dims(&grid, 4);
        assert_eq!(dims, (8, 8));
        let cells = 64;
        let mut logits = vec![-10.0; cells];
        logits[2 * 8 + 5] = 3.0;
        let mut reg = vec![0.0; 6 * cells];
        for c in 0..cells {
            reg[5 * cells + c] = 1.0;
        }
        let dets = DenseDetections {
            dims,
            class_logits: logits,
            regression: reg,
        };
        let boxes = decode_boxes(&dets, &grid, 4, 0.5).unwrap();
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        let (cu, cv) = cell_center(&grid, 4, 2, 5);
        assert_eq!((b.u, b.v, b.w, b.h, b.theta), (cu, cv, 1.0, 1.0, 0.0));
        assert!((cu - (-3.2 + 10.0 * 0.2)).abs() < 1e-12);
        assert!(decode_boxes(&dets, &grid, 4, 1.0).unwrap().is_empty());
        let bad = DenseDetections { dims: (3, 3), ..dets };
        assert!(decode_boxes(&bad, &grid, 4, 0.5).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.5), "1.5");
        assert_eq!(format_sig9(-12.3456789012), "-12.3456789");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(9.9999999996), "10");
        assert_eq!(format_sig9(1.25e-7), "1.25e-07");
        assert_eq!(format_sig9(123456789012.0), "1.23456789e+11");
    }

    #[test]
    fn detection_text_round_trip() {
        let boxes = vec![
            BevBox::new(1.0 / 3.0, 17.25, 1.6, 3.9, -0.5).with_score(0.75),
            BevBox::new(-4.0, 30.0, 1.7, 4.2, 2.0).with_score(0.125),
        ];
        let text = write_detections(&boxes);
        assert_eq!(text.lines().next().unwrap(), "0 0.333333333 17.25 1.6 3.9 -0.5 0.75");
        let back = parse_detections(&text).unwrap();
        for (a, b) in boxes.iter().zip(&back) {
            assert!((a.u - b.u).abs() < 1e-8 && (a.score - b.score).abs() < 1e-9);
        }
        assert_eq!(write_detections(&back), text);
        assert!(parse_detections("0 1 2 3").is_err());
    }
}
