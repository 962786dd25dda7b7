use std::f64::consts::PI;

use proptest::prelude::*;

use plumenet::data_io::{
    parse_kitti_objects, read_point_cloud, write_kitti_objects, write_point_cloud, KittiCalib, KittiObject,
};
use plumenet::evaluation::{average_precision, match_detections, ApMode, FrameMatch, GroundTruthBox, Level};
use plumenet::geometry::{CameraRig, Point3};
use plumenet::harness::Sgd;
use plumenet::losses::{
    detection_loss, encode_detection_targets, smooth_l1, smooth_l1_grad, DetectionLossConfig, SmoothL1Mode,
};
use plumenet::postproc::{nms, parse_detections, rotated_iou, write_detections, BevBox, DenseDetections};
use plumenet::tensor::{ParamStore, Tape, Tensor};
use plumenet::voxel_grid::{occupancy_from_points, VoxelGridSpec};

fn rig() -> impl Strategy<Value = CameraRig> {
    (20.0..800.0f64, 0.1..1.0f64, 16usize..400, 8usize..200)
        .prop_map(|(f, b, w, h)| CameraRig::new(f, f, w as f64 / 2.0, h as f64 / 2.0, b, w, h).unwrap())
}

fn bev_box() -> impl Strategy<Value = BevBox> {
    (
        -5.0..5.0f64,
        -5.0..5.0f64,
        0.3..4.0f64,
        0.3..4.0f64,
        -3.2..3.2f64,
        0.0..1.0f64,
    )
        .prop_map(|(u, v, w, h, t, s)| BevBox::new(u, v, w, h, t).with_score(s))
}

fn small_grid() -> VoxelGridSpec {
    VoxelGridSpec {
        x_range: [-2.0, 2.0],
        y_range: [-0.5, 0.5],
        z_range: [1.0, 5.0],
        resolution: 0.25,
    }
}

fn point() -> impl Strategy<Value = Point3> {
    (-2.5..2.5f64, -0.8..0.8f64, 0.5..5.5f64).prop_map(|(x, y, z)| Point3 { x, y, z })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn disparity_round_trip(r in rig(), z in 0.1..200.0f64) {
        let back = r.disparity_to_depth(r.depth_to_disparity(z).unwrap()).unwrap();
        prop_assert!((back - z).abs() / z < 1e-12);
    }

    #[test]
    fn projection_is_linear_in_x(r in rig(), x in -10.0..10.0f64, d in -1.0..1.0f64, z in 0.5..80.0f64) {
        let u0 = r.project_to_image(Point3 { x, y: 0.0, z }).unwrap().u;
        let u1 = r.project_to_image(Point3 { x: x + d, y: 0.0, z }).unwrap().u;
        prop_assert!((u1 - u0 - r.fx * d / z).abs() < 1e-9 * (1.0 + r.fx));
    }

    #[test]
    fn stereo_fov_is_stricter(r in rig(), x in -30.0..30.0f64, y in -5.0..5.0f64, z in -5.0..80.0f64) {
        let p = Point3 { x, y, z };
        prop_assert!(!r.in_fov_with(p, true) || r.in_fov_with(p, false));
    }

    #[test]
    fn in_range_points_land_in_exactly_one_voxel(p in point()) {
        let g = small_grid();
        let inside = p.x >= g.x_range[0] && p.x < g.x_range[1]
            && p.y >= g.y_range[0] && p.y < g.y_range[1]
            && p.z >= g.z_range[0] && p.z < g.z_range[1];
        let (nx, ny, nz) = g.grid_dims().unwrap();
        let mut hits = 0;
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let c = g.voxel_center(i, j, k).unwrap();
                    let h = g.resolution / 2.0;
                    if (p.x - c.x).abs() <= h && (p.y - c.y).abs() <= h && (p.z - c.z).abs() <= h
                        && g.point_to_voxel(p) == Some((i, j, k))
                    {
                        hits += 1;
                    }
                }
            }
        }
        prop_assert_eq!(hits, usize::from(inside));
        prop_assert_eq!(g.point_to_voxel(p).is_some(), inside);
    }

    #[test]
    fn occupancy_ignores_order_and_duplicates(mut pts in prop::collection::vec(point(), 0..60), seed in any::<u64>()) {
        let g = small_grid();
        let r = CameraRig::new(40.0, 40.0, 31.5, 15.5, 0.5, 64, 32).unwrap();
        let a = occupancy_from_points(&g, &r, &pts, true);
        let dup: Vec<Point3> = pts.iter().chain(pts.iter()).copied().collect();
        prop_assert_eq!(&occupancy_from_points(&g, &r, &dup, true), &a);
        let n = pts.len().max(1);
        pts.rotate_left(seed as usize % n);
        pts.reverse();
        prop_assert_eq!(&occupancy_from_points(&g, &r, &pts, true), &a);
    }

    #[test]
    fn convolution_is_linear(a in -2.0..2.0f64, b in -2.0..2.0f64, seed in 0u64..1000) {
        let gen = |s: u64, shape: &[usize]| {
            Tensor::from_fn(shape, |i| (((i as u64 + 1) * (s + 7919)) % 211) as f64 / 105.0 - 1.0)
        };
        let (x, y, w) = (gen(seed, &[2, 5, 6]), gen(seed + 1, &[2, 5, 6]), gen(seed + 2, &[3, 2, 3, 3]));
        let conv = |input: Tensor| {
            let mut t = Tape::new();
            let (xv, wv) = (t.constant(input), t.constant(w.clone()));
            let out = t.conv2d(xv, wv, None, 1, 1, 1).unwrap();
            t.data(out).to_vec()
        };
        let mix = Tensor::from_fn(&[2, 5, 6], |i| a * x.data()[i] + b * y.data()[i]);
        let (cx, cy, cm) = (conv(x.clone()), conv(y.clone()), conv(mix));
        for i in 0..cm.len() {
            prop_assert!((cm[i] - (a * cx[i] + b * cy[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn huber_mode_is_continuous(x in -3.0..3.0f64) {
        let m = SmoothL1Mode::HuberBeta05;
        let e = 1e-7;
        prop_assert!((smooth_l1(x + e, m) - smooth_l1(x - e, m)).abs() < 1e-6);
        prop_assert!((smooth_l1_grad(x + e, m) - smooth_l1_grad(x - e, m)).abs() < 1e-5);
    }

    #[test]
    fn detection_loss_ignores_box_order(boxes in prop::collection::vec(bev_box(), 1..5), seed in 0u64..1000) {
        let grid = VoxelGridSpec { x_range: [-6.4, 6.4], y_range: [0.0, 0.4], z_range: [-6.4, 6.4], resolution: 0.2 };
        let t1 = encode_detection_targets(&boxes, &grid, 4);
        let mut rev = boxes.clone();
        rev.reverse();
        let t2 = encode_detection_targets(&rev, &grid, 4);
        let (nx, nz) = t1.dims;
        let pred = DenseDetections {
            dims: (nx, nz),
            class_logits: (0..nx * nz).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 4.0 - 2.0).collect(),
            regression: (0..6 * nx * nz).map(|i| ((i as u64 * 13 + seed) % 23) as f64 / 10.0 - 1.1).collect(),
        };
        let cfg = DetectionLossConfig::default();
        let (a, b) = (detection_loss(&pred, &t1, &cfg).unwrap(), detection_loss(&pred, &t2, &cfg).unwrap());
        prop_assert_eq!(a.detection_loss, b.detection_loss);
    }

    #[test]
    fn iou_is_symmetric_and_rigid(a in bev_box(), b in bev_box(), du in -50.0..50.0f64, dv in -50.0..50.0f64, phi in -3.2..3.2f64) {
        let ab = rotated_iou(&a, &b).unwrap();
        prop_assert!((ab - rotated_iou(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab));
        let moved = |x: &BevBox| {
            let (s, c) = phi.sin_cos();
            BevBox::new(x.u * c - x.v * s + du, x.u * s + x.v * c + dv, x.w, x.h, x.theta + phi)
        };
        prop_assert!((ab - rotated_iou(&moved(&a), &moved(&b)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn nms_keeps_a_sorted_non_overlapping_subset(boxes in prop::collection::vec(bev_box(), 0..30), thr in 0.05..0.9f64) {
        let kept = nms(&boxes, thr);
        for k in &kept {
            prop_assert!(boxes.contains(k));
        }
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                prop_assert!(rotated_iou(&kept[i], &kept[j]).unwrap() <= thr);
            }
        }
    }

    #[test]
    fn ap_ignores_frame_order_and_score_scale(
        frames in prop::collection::vec((prop::collection::vec(bev_box(), 0..6), prop::collection::vec(bev_box(), 1..4)), 1..5),
        k in 0.1..10.0f64,
    ) {
        let run = |frames: &[(Vec<BevBox>, Vec<BevBox>)], f: &dyn Fn(f64) -> f64| -> f64 {
            let matched: Vec<FrameMatch> = frames
                .iter()
                .map(|(d, g)| {
                    let mut d: Vec<BevBox> = d.iter().map(|b| b.with_score(f(b.score))).collect();
                    d.sort_by(plumenet::postproc::detection_order);
                    let g: Vec<GroundTruthBox> = g.iter().map(|b| GroundTruthBox::new(*b, "Car", 50.0, 0, 0.0)).collect();
                    match_detections(&d, &g, "Car", Level::All, 0.5)
                })
                .collect();
            average_precision(&matched, ApMode::ElevenPoint).unwrap()
        };
        let base = run(&frames, &|s| s);
        let mut rev = frames.clone();
        rev.reverse();
        prop_assert_eq!(run(&rev, &|s| s), base);
        prop_assert_eq!(run(&frames, &|s| k * s * s + s), base);
    }

    #[test]
    fn detections_round_trip(boxes in prop::collection::vec(bev_box(), 0..10)) {
        let back = parse_detections(&write_detections(&boxes)).unwrap();
        prop_assert_eq!(back.len(), boxes.len());
        for (a, b) in back.iter().zip(&boxes) {
            for (x, y) in [(a.u, b.u), (a.v, b.v), (a.w, b.w), (a.h, b.h), (a.theta, b.theta), (a.score, b.score)] {
                prop_assert!((x - y).abs() <= 1e-8 * y.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn labels_calib_and_clouds_round_trip(
        r in rig(),
        loc in prop::array::uniform3(-40.0..40.0f64),
        dims in prop::array::uniform3(0.5..5.0f64),
        ry in -PI..PI,
        pts in prop::collection::vec(point(), 0..20),
    ) {
        let obj = KittiObject {
            kind: "Car".into(),
            truncated: 0.0,
            occluded: 1,
            alpha: ry / 2.0,
            bbox: [10.0, 20.0, 110.5, 80.25],
            dimensions: dims,
            location: loc,
            rotation_y: ry,
            score: None,
        };
        prop_assert_eq!(parse_kitti_objects(&write_kitti_objects(std::slice::from_ref(&obj))).unwrap(), vec![obj]);
        let calib = KittiCalib::from_rig(&r);
        prop_assert_eq!(KittiCalib::parse(&calib.to_text()).unwrap(), calib);
        let back = read_point_cloud(&write_point_cloud(&pts), None).unwrap();
        for (a, b) in back.iter().zip(&pts) {
            prop_assert_eq!((a.x, a.y, a.z), (b.x as f32 as f64, b.y as f32 as f64, b.z as f32 as f64));
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing(w in prop::collection::vec(-5.0..5.0f64, 1..20), m in 0.0..0.99f64) {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![w.len()], w.clone()).unwrap());
        let before = p.checksum();
        let g: Vec<f64> = w.iter().map(|x| x * 3.0 - 1.0).collect();
        Sgd::new(m, 1e-4).step(&mut p, &[("w".to_string(), g)], 0.0);
        prop_assert_eq!(p.checksum(), before);
    }
}
