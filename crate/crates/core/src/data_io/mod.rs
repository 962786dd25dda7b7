//! KITTI file formats, image I/O and procedurally generated stereo scenes.

mod image;
mod kitti;
mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use self::image::{decode_png, decode_raw, encode_png, encode_raw, read_image, write_image};
pub use kitti::{
    bev_heading, parse_kitti_calib, parse_kitti_labels, parse_kitti_objects, read_point_cloud, rotation_y_from_heading,
    write_kitti_calib, write_kitti_objects, write_point_cloud, KittiCalib, KittiObject,
};
pub use synth::{render_stereo, synth_scene, toy_grid, toy_rig, Splat, SyntheticScene, SyntheticSceneSpec};

use crate::evaluation::GroundTruthBox;
use crate::geometry::{CameraRig, Point3};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing calibration entry {0}")]
    MissingKey(&'static str),
    #[error("malformed matrix: {0}")]
    MalformedMatrix(String),
    #[error("malformed line {line:?}: {reason}")]
    MalformedLine { line: String, reason: String },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image codec: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One stereo frame with its camera rig, the point cloud in the left
/// camera frame and BEV ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub left: Tensor,
    pub right: Tensor,
    pub rig: CameraRig,
    pub cloud: Vec<Point3>,
    pub gt_boxes: Vec<GroundTruthBox>,
}

impl StereoSample {
    pub fn new(
        left: Tensor,
        right: Tensor,
        rig: CameraRig,
        cloud: Vec<Point3>,
        gt_boxes: Vec<GroundTruthBox>,
    ) -> Result<Self> {
        if left.shape() != right.shape() || left.shape() != [3, rig.image_h, rig.image_w] {
            return Err(DataError::ShapeMismatch(format!(
                "images {:?}/{:?} do not match the {}x{} rig",
                left.shape(),
                right.shape(),
                rig.image_h,
                rig.image_w
            )));
        }
        if let Some(b) = gt_boxes.iter().find(|g| {
            ![g.bev.u, g.bev.v, g.bev.w, g.bev.h, g.bev.theta]
                .iter()
                .all(|x| x.is_finite())
        }) {
            return Err(DataError::ShapeMismatch(format!("non-finite ground truth {:?}", b.bev)));
        }
        Ok(Self {
            left,
            right,
            rig,
            cloud,
            gt_boxes,
        })
    }
}

/// Paths of frame `index` in a KITTI-style object directory.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiPaths {
    pub left: PathBuf,
    pub right: PathBuf,
    pub calib: PathBuf,
    pub labels: PathBuf,
    pub velodyne: PathBuf,
}

impl KittiPaths {
    pub fn new(root: &Path, index: usize) -> Self {
        let id = format!("{index:06}");
        Self {
            left: root.join("image_2").join(format!("{id}.png")),
            right: root.join("image_3").join(format!("{id}.png")),
            calib: root.join("calib").join(format!("{id}.txt")),
            labels: root.join("label_2").join(format!("{id}.txt")),
            velodyne: root.join("velodyne").join(format!("{id}.bin")),
        }
    }
}

/// Number of frames in `root/image_2`.
pub fn count_frames(root: &Path) -> Result<usize> {
    let mut n = 0;
    for entry in std::fs::read_dir(root.join("image_2"))? {
        if entry?.path().extension().is_some_and(|e| e == "png") {
            n += 1;
        }
    }
    Ok(n)
}

/// Loads frame `index`. Labels and the point cloud are optional (testing
/// splits ship neither); locations move into the left camera frame.
pub fn load_kitti_sample(root: &Path, index: usize) -> Result<StereoSample> {
    let p = KittiPaths::new(root, index);
    let left = read_image(&p.left)?;
    let right = read_image(&p.right)?;
    let calib = KittiCalib::parse(&std::fs::read_to_string(&p.calib)?)?;
    let rig = calib.rig(left.shape()[2], left.shape()[1])?;
    let cloud = match std::fs::read(&p.velodyne) {
        Ok(bytes) => read_point_cloud(&bytes, Some(&calib))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let gt_boxes = match std::fs::read_to_string(&p.labels) {
        Ok(text) => parse_kitti_labels(&text)?
            .into_iter()
            .map(|mut g| {
                g.bev.u += calib.left_camera_offset();
                g
            })
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    StereoSample::new(left, right, rig, cloud, gt_boxes)
}

/// Writes a generated scene in the KITTI layout. The point cloud is stored
/// in the camera frame with identity extrinsics in the calibration.
pub fn write_kitti_sample(root: &Path, index: usize, scene: &SyntheticScene) -> Result<()> {
    let p = KittiPaths::new(root, index);
    for dir in ["image_2", "image_3", "calib", "label_2", "velodyne"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    write_image(&p.left, &scene.sample.left)?;
    write_image(&p.right, &scene.sample.right)?;
    std::fs::write(&p.calib, write_kitti_calib(&scene.sample.rig))?;
    std::fs::write(&p.labels, write_kitti_objects(&scene.objects))?;
    std::fs::write(&p.velodyne, write_point_cloud(&scene.sample.cloud))?;
    Ok(())
}
