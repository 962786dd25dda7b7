use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kitti::{rotation_y_from_heading, KittiObject};
use super::{DataError, Result, StereoSample};
use crate::geometry::{CameraRig, PixelCoord, Point3};
use crate::postproc::{rotated_iou, BevBox};
use crate::tensor::Tensor;
use crate::voxel_grid::{occupancy_from_points, OccupancyGrid, VoxelGridSpec};

/// Distributions for procedurally generated driving-like scenes: boxes
/// standing on a flat ground plane, seen by a rectified stereo rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    /// Inclusive range of the number of boxes.
    pub boxes: [usize; 2],
    pub width: [f64; 2],
    pub length: [f64; 2],
    pub height: [f64; 2],
    /// BEV heading range in radians.
    pub heading: [f64; 2],
    pub grid: VoxelGridSpec,
    /// Minimum distance between a box footprint and the grid's x/z border.
    pub margin: f64,
    /// Height of the ground plane (camera y points down).
    pub ground_y: f64,
    /// Points per square meter.
    pub ground_density: f64,
    pub surface_density: f64,
    pub rig: CameraRig,
    pub require_both_cameras: bool,
    pub class_name: String,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self::toy(0)
    }
}

impl SyntheticSceneSpec {
    /// A 64×8×64 grid at 0.2 m in front of a 160×48 rig.
    pub fn toy(seed: u64) -> Self {
        Self {
            seed,
            boxes: [2, 4],
            width: [1.0, 1.4],
            length: [1.8, 2.8],
            height: [0.9, 1.3],
            heading: [-std::f64::consts::PI, std::f64::consts::PI],
            grid: toy_grid(),
            margin: 0.4,
            ground_y: 0.9,
            ground_density: 200.0,
            surface_density: 400.0,
            rig: toy_rig(),
            require_both_cameras: true,
            class_name: "Car".into(),
        }
    }

    /// One small box in a 16×4×16 grid seen by a 32×16 rig, for tests that
    /// run the whole network many times.
    pub fn micro(seed: u64) -> Self {
        Self {
            boxes: [1, 1],
            width: [0.4, 0.5],
            length: [0.6, 0.8],
            height: [0.3, 0.5],
            margin: 0.1,
            ground_y: 0.3,
            grid: VoxelGridSpec {
                x_range: [-1.6, 1.6],
                y_range: [-0.4, 0.4],
                z_range: [2.0, 5.2],
                resolution: 0.2,
            },
            rig: CameraRig::new(20.0, 20.0, 15.5, 7.5, 0.5, 32, 16).expect("valid rig"),
            ..Self::toy(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        self.grid
            .validate()
            .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        self.rig.validate().map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        if self.boxes[0] > self.boxes[1] {
            return bad(format!("box count range {:?} is empty", self.boxes));
        }
        for (name, r) in [("width", self.width), ("length", self.length), ("height", self.height)] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(format!("{name} range {r:?} must be positive and ordered"));
            }
        }
        if !(self.heading[0] <= self.heading[1]) {
            return bad(format!("heading range {:?} is empty", self.heading));
        }
        if !(self.ground_density > 0.0 && self.surface_density > 0.0) {
            return bad("point densities must be positive".into());
        }
        if !(self.ground_y >= self.grid.y_range[0] && self.ground_y < self.grid.y_range[1]) {
            return bad(format!("ground height {} lies outside the grid", self.ground_y));
        }
        let diag = 0.5 * self.width[1].hypot(self.length[1]) + self.margin;
        let g = &self.grid;
        if 2.0 * diag >= g.x_range[1] - g.x_range[0] || 2.0 * diag >= g.z_range[1] - g.z_range[0] {
            return bad("boxes do not fit inside the grid".into());
        }
        Ok(())
    }
}

pub fn toy_grid() -> VoxelGridSpec {
    VoxelGridSpec {
        x_range: [-6.4, 6.4],
        y_range: [-0.6, 1.0],
        z_range: [2.0, 14.8],
        resolution: 0.2,
    }
}

pub fn toy_rig() -> CameraRig {
    CameraRig {
        fx: 60.0,
        fy: 60.0,
        cx: 79.5,
        cy: 23.5,
        baseline: 0.5,
        image_w: 160,
        image_h: 48,
    }
}

/// A generated sample together with its occupancy labels and KITTI-style
/// object records.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub sample: StereoSample,
    pub labels: OccupancyGrid,
    pub objects: Vec<KittiObject>,
    pub splats: Vec<Splat>,
}

/// Where one source point landed in both views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub point: usize,
    pub depth: f64,
    pub left: PixelCoord,
    pub right: PixelCoord,
}

struct PlacedBox {
    bev: BevBox,
    height: f64,
    color: [f64; 3],
}

const PALETTE: [[f64; 3]; 6] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.2],
    [0.8, 0.3, 0.9],
    [0.2, 0.85, 0.9],
];
const GROUND_COLOR: [f64; 3] = [0.45, 0.45, 0.45];

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn place_boxes(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Vec<PlacedBox> {
    let count = rng.gen_range(spec.boxes[0]..=spec.boxes[1]);
    let g = &spec.grid;
    let mut placed: Vec<PlacedBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while placed.len() < count && attempts < 200 * count.max(1) {
        attempts += 1;
        let w = uniform(rng, spec.width);
        let l = uniform(rng, spec.length);
        let height = uniform(rng, spec.height);
        let theta = uniform(rng, spec.heading);
        let u = rng.gen_range(g.x_range[0]..g.x_range[1]);
        let v = rng.gen_range(g.z_range[0]..g.z_range[1]);
        let bev = BevBox::new(u, v, w, l, theta);
        let inside = bev.corners().iter().all(|&[x, z]| {
            x >= g.x_range[0] + spec.margin
                && x <= g.x_range[1] - spec.margin
                && z >= g.z_range[0] + spec.margin
                && z <= g.z_range[1] - spec.margin
        });
        let center = Point3 {
            x: u,
            y: spec.ground_y - 0.5 * height,
            z: v,
        };
        if !inside || !spec.rig.in_fov_with(center, spec.require_both_cameras) {
            continue;
        }
        let grown = |b: &BevBox| BevBox::new(b.u, b.v, b.w + 0.4, b.h + 0.4, b.theta);
        if placed
            .iter()
            .any(|p| rotated_iou(&grown(&p.bev), &grown(&bev)).map_or(true, |iou| iou > 0.0))
        {
            continue;
        }
        let color = PALETTE[placed.len() % PALETTE.len()];
        placed.push(PlacedBox { bev, height, color });
    }
    placed
}

fn textured(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    let t = rng.gen_range(0.5..1.0);
    base.map(|c| c * t)
}

/// Samples the ground plane (minus box footprints) and the four sides and
/// top of every box. Occluded points are dropped later.
fn sample_points(spec: &SyntheticSceneSpec, boxes: &[PlacedBox], rng: &mut ChaCha8Rng) -> (Vec<Point3>, Vec<[f64; 3]>) {
    let mut pts = Vec::new();
    let mut colors = Vec::new();
    let g = &spec.grid;
    let area = (g.x_range[1] - g.x_range[0]) * (g.z_range[1] - g.z_range[0]);
    let n_ground = (area * spec.ground_density).round() as usize;
    for _ in 0..n_ground {
        let x = rng.gen_range(g.x_range[0]..g.x_range[1]);
        let z = rng.gen_range(g.z_range[0]..g.z_range[1]);
        let c = textured(rng, GROUND_COLOR);
        if boxes.iter().any(|b| b.bev.contains(x, z)) {
            continue;
        }
        pts.push(Point3 { x, y: spec.ground_y, z });
        colors.push(c);
    }
    for b in boxes {
        let (s, c) = b.bev.theta.sin_cos();
        let (hw, hl) = (0.5 * b.bev.w, 0.5 * b.bev.h);
        let top = spec.ground_y - b.height;
        // (fixed local coordinate, extent of the free one, face area)
        let faces: [(&str, f64, f64); 5] = [
            ("x", hw, b.bev.h * b.height),
            ("x", -hw, b.bev.h * b.height),
            ("y", hl, b.bev.w * b.height),
            ("y", -hl, b.bev.w * b.height),
            ("top", 0.0, b.bev.w * b.bev.h),
        ];
        for (axis, fixed, face_area) in faces {
            let n = (face_area * spec.surface_density).round() as usize;
            for _ in 0..n {
                let (lx, ly, y) = match axis {
                    "x" => (fixed, rng.gen_range(-hl..hl), rng.gen_range(top..spec.ground_y)),
                    "y" => (rng.gen_range(-hw..hw), fixed, rng.gen_range(top..spec.ground_y)),
                    _ => (rng.gen_range(-hw..hw), rng.gen_range(-hl..hl), top),
                };
                pts.push(Point3 {
                    x: b.bev.u + lx * c - ly * s,
                    y,
                    z: b.bev.v + lx * s + ly * c,
                });
                colors.push(textured(rng, b.color));
            }
        }
    }
    (pts, colors)
}

/// True when the segment from the left camera center to `p` passes through
/// no box interior, i.e. a sensor at the camera would see `p`.
fn visible(p: Point3, boxes: &[PlacedBox], ground_y: f64) -> bool {
    boxes.iter().all(|b| {
        let (s, c) = b.bev.theta.sin_cos();
        // segment origin is the camera at (0, 0, 0); work in box-local axes
        let (dx, dz) = (-b.bev.u, -b.bev.v);
        let o = [dx * c + dz * s, 0.0, -dx * s + dz * c];
        let e = [
            (p.x - b.bev.u) * c + (p.z - b.bev.v) * s,
            p.y,
            -(p.x - b.bev.u) * s + (p.z - b.bev.v) * c,
        ];
        let lo = [-0.5 * b.bev.w, ground_y - b.height, -0.5 * b.bev.h];
        let hi = [0.5 * b.bev.w, ground_y, 0.5 * b.bev.h];
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for a in 0..3 {
            let d = e[a] - o[a];
            if d.abs() < 1e-15 {
                if o[a] <= lo[a] || o[a] >= hi[a] {
                    return true;
                }
                continue;
            }
            let (ta, tb) = ((lo[a] - o[a]) / d, (hi[a] - o[a]) / d);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        // entering at the endpoint itself means p lies on a facing surface
        t0 >= t1 || t0 >= 1.0 - 1e-9
    })
}

/// Nearest-splat z-buffered rendering of colored points into both views.
/// Each point covers a square roughly one point spacing wide.
pub fn render_stereo(
    rig: &CameraRig,
    points: &[Point3],
    colors: &[[f64; 3]],
    spacing: f64,
) -> (Tensor, Tensor, Vec<Splat>) {
    let (h, w) = (rig.image_h, rig.image_w);
    let mut imgs = [Tensor::zeros(&[3, h, w]), Tensor::zeros(&[3, h, w])];
    let mut depth = [vec![f64::INFINITY; h * w], vec![f64::INFINITY; h * w]];
    let mut splats = Vec::new();
    for (idx, (p, col)) in points.iter().zip(colors).enumerate() {
        let (Ok(l), Ok(r)) = (rig.project_to_image(*p), rig.project_to_right(*p)) else {
            continue;
        };
        splats.push(Splat {
            point: idx,
            depth: p.z,
            left: l,
            right: r,
        });
        let half = (0.5 * rig.fx * spacing / p.z).ceil().max(1.0) as i64 - 1;
        for (view, px) in [l, r].into_iter().enumerate() {
            let (cu, cv) = (px.u.round() as i64, px.v.round() as i64);
            for y in cv - half..=cv + half {
                for x in cu - half..=cu + half {
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let o = y as usize * w + x as usize;
                    if p.z < depth[view][o] {
                        depth[view][o] = p.z;
                        let d = imgs[view].data_mut();
                        for c in 0..3 {
                            d[c * h * w + o] = col[c];
                        }
                    }
                }
            }
        }
    }
    let [left, right] = imgs;
    (left, right, splats)
}

fn image_box(rig: &CameraRig, b: &PlacedBox, ground_y: f64) -> ([f64; 4], f64) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for [x, z] in b.bev.corners() {
        for y in [ground_y, ground_y - b.height] {
            if let Ok(p) = rig.project_to_image(Point3 { x, y, z }) {
                lo = [lo[0].min(p.u), lo[1].min(p.v)];
                hi = [hi[0].max(p.u), hi[1].max(p.v)];
            }
        }
    }
    let (wm, hm) = ((rig.image_w - 1) as f64, (rig.image_h - 1) as f64);
    let clipped = [
        lo[0].clamp(0.0, wm),
        lo[1].clamp(0.0, hm),
        hi[0].clamp(0.0, wm),
        hi[1].clamp(0.0, hm),
    ];
    let full = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let kept = (clipped[2] - clipped[0]) * (clipped[3] - clipped[1]);
    let truncation = if full > 0.0 {
        (1.0 - kept / full).clamp(0.0, 1.0)
    } else {
        1.0
    };
    (clipped, truncation)
}

/// Generates one scene. Identical specs give bit-identical scenes.
pub fn synth_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let boxes = place_boxes(spec, &mut rng);
    let (points, point_colors) = sample_points(spec, &boxes, &mut rng);
    let (cloud, colors): (Vec<Point3>, Vec<[f64; 3]>) = points
        .into_iter()
        .zip(point_colors)
        .filter(|(p, _)| visible(*p, &boxes, spec.ground_y))
        .unzip();
    let spacing = 1.0 / spec.ground_density.min(spec.surface_density).sqrt();
    let (left, right, splats) = render_stereo(&spec.rig, &cloud, &colors, spacing);
    let labels = occupancy_from_points(&spec.grid, &spec.rig, &cloud, spec.require_both_cameras);

    let objects: Vec<KittiObject> = boxes
        .iter()
        .map(|b| {
            let (bbox, truncated) = image_box(&spec.rig, b, spec.ground_y);
            let ry = rotation_y_from_heading(b.bev.theta);
            KittiObject {
                kind: spec.class_name.clone(),
                truncated,
                occluded: 0,
                alpha: crate::postproc::normalize_angle(ry - b.bev.u.atan2(b.bev.v)),
                bbox,
                dimensions: [b.height, b.bev.w, b.bev.h],
                location: [b.bev.u, spec.ground_y, b.bev.v],
                rotation_y: ry,
                score: None,
            }
        })
        .collect();
    let gt_boxes = boxes
        .iter()
        .zip(&objects)
        .map(|(b, o)| {
            crate::evaluation::GroundTruthBox::new(b.bev, o.kind.clone(), o.bbox[3] - o.bbox[1], 0, o.truncated)
        })
        .collect();
    let sample = StereoSample::new(left, right, spec.rig, cloud, gt_boxes)?;
    Ok(SyntheticScene {
        sample,
        labels,
        objects,
        splats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let a = synth_scene(&SyntheticSceneSpec::toy(5)).unwrap();
        let b = synth_scene(&SyntheticSceneSpec::toy(5)).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(&SyntheticSceneSpec::toy(6)).unwrap();
        assert_ne!(a.sample.cloud, c.sample.cloud);
    }

    #[test]
    fn empty_scene_is_ground_only() {
        let spec = SyntheticSceneSpec {
            boxes: [0, 0],
            ..SyntheticSceneSpec::toy(1)
        };
        let s = synth_scene(&spec).unwrap();
        assert!(s.sample.gt_boxes.is_empty() && s.objects.is_empty());
        assert!(s.sample.cloud.iter().all(|p| p.y == spec.ground_y));
        assert!(s.labels.occupied_count() > 0);
    }

    #[test]
    fn splats_are_rectified() {
        let s = synth_scene(&SyntheticSceneSpec::toy(2)).unwrap();
        let rig = s.sample.rig;
        assert_eq!(s.splats.len(), s.sample.cloud.len());
        for sp in &s.splats {
            let d = rig.fx * rig.baseline / sp.depth;
            assert!((sp.left.u - sp.right.u - d).abs() < 1e-9);
            assert_eq!(sp.left.v, sp.right.v);
        }
    }

    #[test]
    fn labels_match_point_membership() {
        let spec = SyntheticSceneSpec::toy(3);
        let s = synth_scene(&spec).unwrap();
        let g = &spec.grid;
        let (nx, ny, nz) = g.grid_dims().unwrap();
        let mut want = vec![0.0; nx * ny * nz];
        let cell = |v: f64, lo: f64, hi: f64, n: usize| {
            (0..n).find(|&i| v >= lo + i as f64 * 0.2 && v < (lo + (i + 1) as f64 * 0.2).min(hi))
        };
        for p in &s.sample.cloud {
            let i = cell(p.x, g.x_range[0], g.x_range[1], nx);
            let j = cell(p.y, g.y_range[0], g.y_range[1], ny);
            let k = cell(p.z, g.z_range[0], g.z_range[1], nz);
            if let (Some(i), Some(j), Some(k)) = (i, j, k) {
                want[(i * ny + j) * nz + k] = 1.0;
            }
        }
        assert_eq!(s.labels.values, want);
    }

    #[test]
    fn only_camera_facing_box_faces_survive() {
        let spec = SyntheticSceneSpec::toy(4);
        let s = synth_scene(&spec).unwrap();
        let mut on_boxes = 0;
        for p in s.sample.cloud.iter().filter(|p| p.y != spec.ground_y) {
            // find the box face the point lies on and check it faces the camera
            let facing = s.sample.gt_boxes.iter().any(|gt| {
                let b = gt.bev;
                let (sn, c) = b.theta.sin_cos();
                let (dx, dz) = (p.x - b.u, p.z - b.v);
                let (lx, ly) = (dx * c + dz * sn, -dx * sn + dz * c);
                let on = |v: f64, half: f64| (v.abs() - half).abs() < 1e-9;
                let normal = if on(lx, 0.5 * b.w) && ly.abs() <= 0.5 * b.h {
                    [lx.signum() * c, lx.signum() * sn]
                } else if on(ly, 0.5 * b.h) && lx.abs() <= 0.5 * b.w {
                    [-ly.signum() * sn, ly.signum() * c]
                } else {
                    return false;
                };
                normal[0] * -p.x + normal[1] * -p.z > 0.0
            });
            assert!(facing, "{p:?}");
            on_boxes += 1;
        }
        assert!(on_boxes > 0);
    }

    #[test]
    fn boxes_stay_inside_and_apart() {
        for seed in 0..20 {
            let spec = SyntheticSceneSpec::toy(seed);
            let s = synth_scene(&spec).unwrap();
            assert!(s.sample.gt_boxes.len() >= spec.boxes[0]);
            for (a, gt) in s.sample.gt_boxes.iter().enumerate() {
                for [x, z] in gt.bev.corners() {
                    assert!(x > spec.grid.x_range[0] && x < spec.grid.x_range[1]);
                    assert!(z > spec.grid.z_range[0] && z < spec.grid.z_range[1]);
                }
                for other in &s.sample.gt_boxes[a + 1..] {
                    assert_eq!(rotated_iou(&gt.bev, &other.bev).unwrap(), 0.0);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticSceneSpec::toy(0);
        spec.ground_density = 0.0;
        assert!(matches!(synth_scene(&spec), Err(DataError::InvalidSpec(_))));
        let mut spec = SyntheticSceneSpec::toy(0);
        spec.boxes = [3, 1];
        assert!(synth_scene(&spec).is_err());
    }
}
