use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use super::{DataError, Result};
use crate::evaluation::GroundTruthBox;
use crate::geometry::{CameraRig, Point3};
use crate::postproc::{normalize_angle, BevBox};

/// Projection and extrinsic matrices of a KITTI calibration file. Only `P2`
/// and `P3` are mandatory.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiCalib {
    pub p2: [f64; 12],
    pub p3: [f64; 12],
    pub r0_rect: Option<[f64; 9]>,
    pub tr_velo_to_cam: Option<[f64; 12]>,
}

fn parse_floats<const N: usize>(key: &str, rest: &str) -> Result<[f64; N]> {
    let vals: Vec<f64> = rest
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| DataError::MalformedMatrix(format!("{key}: {e}")))?;
    vals.try_into()
        .map_err(|v: Vec<f64>| DataError::MalformedMatrix(format!("{key}: expected {N} values, found {}", v.len())))
}

impl KittiCalib {
    pub fn parse(text: &str) -> Result<Self> {
        let mut p2 = None;
        let mut p3 = None;
        let mut r0 = None;
        let mut tr = None;
        for line in text.lines() {
            let Some((key, rest)) = line.split_once(':') else {
                continue;
            };
            match key.trim() {
                "P2" => p2 = Some(parse_floats::<12>("P2", rest)?),
                "P3" => p3 = Some(parse_floats::<12>("P3", rest)?),
                "R0_rect" | "R_rect" => r0 = Some(parse_floats::<9>("R0_rect", rest)?),
                "Tr_velo_to_cam" | "Tr_velo_cam" => tr = Some(parse_floats::<12>("Tr_velo_to_cam", rest)?),
                _ => {}
            }
        }
        let calib = Self {
            p2: p2.ok_or(DataError::MissingKey("P2"))?,
            p3: p3.ok_or(DataError::MissingKey("P3"))?,
            r0_rect: r0,
            tr_velo_to_cam: tr,
        };
        if !(calib.p2[0] > 0.0 && calib.p2[5] > 0.0) {
            return Err(DataError::MalformedMatrix(format!(
                "P2 focal lengths must be positive, got {} and {}",
                calib.p2[0], calib.p2[5]
            )));
        }
        Ok(calib)
    }

    /// Calibration of an ideal rectified rig with identity extrinsics; the
    /// left camera sits at the origin.
    pub fn from_rig(rig: &CameraRig) -> Self {
        let k = |tx: f64| [rig.fx, 0.0, rig.cx, tx, 0.0, rig.fy, rig.cy, 0.0, 0.0, 0.0, 1.0, 0.0];
        Self {
            p2: k(0.0),
            p3: k(-rig.fx * rig.baseline),
            r0_rect: Some([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            tr_velo_to_cam: Some([1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        }
    }

    pub fn to_text(&self) -> String {
        let row = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "P2: {}", row(&self.p2));
        let _ = writeln!(s, "P3: {}", row(&self.p3));
        if let Some(r) = &self.r0_rect {
            let _ = writeln!(s, "R0_rect: {}", row(r));
        }
        if let Some(t) = &self.tr_velo_to_cam {
            let _ = writeln!(s, "Tr_velo_to_cam: {}", row(t));
        }
        s
    }

    pub fn baseline(&self) -> f64 {
        (self.p2[3] - self.p3[3]) / self.p2[0]
    }

    /// Offset of the left camera center from the rectified reference frame
    /// along x (KITTI's camera 2 sits about 6 cm from camera 0).
    pub fn left_camera_offset(&self) -> f64 {
        self.p2[3] / self.p2[0]
    }

    pub fn rig(&self, image_w: usize, image_h: usize) -> Result<CameraRig> {
        CameraRig::new(
            self.p2[0],
            self.p2[5],
            self.p2[2],
            self.p2[6],
            self.baseline(),
            image_w,
            image_h,
        )
        .map_err(|e| DataError::MalformedMatrix(e.to_string()))
    }

    /// Rectified reference frame → left camera frame.
    pub fn reference_to_left(&self, p: Point3) -> Point3 {
        Point3 {
            x: p.x + self.left_camera_offset(),
            ..p
        }
    }

    /// LiDAR frame → left camera frame. Missing matrices are identity.
    pub fn velo_to_left(&self, p: Point3) -> Point3 {
        let q = match &self.tr_velo_to_cam {
            Some(t) => [
                t[0] * p.x + t[1] * p.y + t[2] * p.z + t[3],
                t[4] * p.x + t[5] * p.y + t[6] * p.z + t[7],
                t[8] * p.x + t[9] * p.y + t[10] * p.z + t[11],
            ],
            None => [p.x, p.y, p.z],
        };
        let r = match &self.r0_rect {
            Some(r) => [
                r[0] * q[0] + r[1] * q[1] + r[2] * q[2],
                r[3] * q[0] + r[4] * q[1] + r[5] * q[2],
                r[6] * q[0] + r[7] * q[1] + r[8] * q[2],
            ],
            None => q,
        };
        self.reference_to_left(Point3 {
            x: r[0],
            y: r[1],
            z: r[2],
        })
    }
}

/// Reads the stereo rig from a KITTI calibration file.
pub fn parse_kitti_calib(text: &str, image_w: usize, image_h: usize) -> Result<CameraRig> {
    KittiCalib::parse(text)?.rig(image_w, image_h)
}

pub fn write_kitti_calib(rig: &CameraRig) -> String {
    KittiCalib::from_rig(rig).to_text()
}

/// One line of a KITTI object label file.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiObject {
    pub kind: String,
    pub truncated: f64,
    /// 0 visible … 3 unknown; -1 on `DontCare` lines.
    pub occluded: i32,
    pub alpha: f64,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
    /// `[height, width, length]` in meters.
    pub dimensions: [f64; 3],
    /// Bottom center in the rectified camera frame.
    pub location: [f64; 3],
    pub rotation_y: f64,
    /// Present on detection result lines.
    pub score: Option<f64>,
}

/// BEV heading from KITTI's `rotation_y`. A box's length runs along
/// `(cos ry, -sin ry)` in `(x, z)`, which is the BEV box's `h` axis.
pub fn bev_heading(rotation_y: f64) -> f64 {
    normalize_angle(-rotation_y - FRAC_PI_2)
}

pub fn rotation_y_from_heading(theta: f64) -> f64 {
    normalize_angle(-theta - FRAC_PI_2)
}

impl KittiObject {
    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 15 && f.len() != 16 {
            return Err(DataError::MalformedLine {
                line: line.to_string(),
                reason: format!("expected 15 fields, found {}", f.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>().map_err(|e| DataError::MalformedLine {
                line: line.to_string(),
                reason: format!("field {i}: {e}"),
            })
        };
        let occluded = f[2].parse::<i32>().map_err(|e| DataError::MalformedLine {
            line: line.to_string(),
            reason: format!("occlusion: {e}"),
        })?;
        Ok(Self {
            kind: f[0].to_string(),
            truncated: num(1)?,
            occluded,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dimensions: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if f.len() == 16 { Some(num(15)?) } else { None },
        })
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            self.kind,
            self.truncated,
            self.occluded,
            self.alpha,
            self.bbox[0],
            self.bbox[1],
            self.bbox[2],
            self.bbox[3],
            self.dimensions[0],
            self.dimensions[1],
            self.dimensions[2],
            self.location[0],
            self.location[1],
            self.location[2],
            self.rotation_y
        );
        if let Some(sc) = self.score {
            let _ = write!(s, " {sc}");
        }
        s
    }

    pub fn bev(&self) -> Result<BevBox> {
        let [_, w, l] = self.dimensions;
        if !(w > 0.0 && l > 0.0) {
            return Err(DataError::MalformedLine {
                line: self.to_line(),
                reason: format!("degenerate footprint {w}x{l}"),
            });
        }
        Ok(BevBox::new(
            self.location[0],
            self.location[2],
            w,
            l,
            bev_heading(self.rotation_y),
        ))
    }

    /// BEV ground truth. `DontCare` regions often carry placeholder
    /// dimensions; they keep a tiny footprint and the ignored bucket.
    pub fn to_ground_truth(&self) -> Result<GroundTruthBox> {
        let bev = if self.dimensions[1] > 0.0 && self.dimensions[2] > 0.0 {
            self.bev()?
        } else {
            BevBox::new(self.location[0], self.location[2], 1e-3, 1e-3, 0.0)
        };
        let occ = self.occluded.clamp(0, 3) as u8;
        Ok(GroundTruthBox::new(
            bev,
            self.kind.clone(),
            self.bbox[3] - self.bbox[1],
            occ,
            self.truncated,
        ))
    }
}

pub fn parse_kitti_objects(text: &str) -> Result<Vec<KittiObject>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(KittiObject::parse_line)
        .collect()
}

pub fn write_kitti_objects(objects: &[KittiObject]) -> String {
    objects.iter().map(|o| o.to_line() + "\n").collect()
}

/// Parses a label file into BEV ground truth. Locations are taken as
/// given; see [`KittiCalib::reference_to_left`] for the camera offset.
pub fn parse_kitti_labels(text: &str) -> Result<Vec<GroundTruthBox>> {
    parse_kitti_objects(text)?
        .iter()
        .map(KittiObject::to_ground_truth)
        .collect()
}

/// Packed little-endian `f32` records of `x, y, z, reflectance`, optionally
/// moved into the left camera frame.
pub fn read_point_cloud(bytes: &[u8], calib: Option<&KittiCalib>) -> Result<Vec<Point3>> {
    if !bytes.len().is_multiple_of(16) {
        return Err(DataError::TruncatedFile(format!(
            "{} bytes is not a multiple of 16",
            bytes.len()
        )));
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
    Ok(bytes
        .chunks_exact(16)
        .map(|r| {
            let p = Point3 {
                x: f(&r[0..4]),
                y: f(&r[4..8]),
                z: f(&r[8..12]),
            };
            calib.map_or(p, |c| c.velo_to_left(p))
        })
        .collect())
}

/// Inverse of [`read_point_cloud`] without a calibration; reflectance is 0.
pub fn write_point_cloud(points: &[Point3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
