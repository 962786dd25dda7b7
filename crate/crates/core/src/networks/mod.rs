//! Stereo image network, pseudo-LiDAR feature volume, 3D-BEV network and the
//! occupancy and detection heads.
//!
//! Layers create their parameters lazily through [`Ctx`] the first time a
//! forward pass needs them, so one code path defines both the topology and
//! the parameter set.

mod ctx;
mod heads;
mod plan;
mod plume;
mod stereo;
mod volume;

pub use ctx::{Ctx, Trainable};
pub use heads::{detection_head, occupancy_head, DetectionMaps, DETECTION_STRIDE};
pub use plan::{paper_table, shape_plan, Dim, PlanDiff, PlanRow, ShapePlan, Sym};
pub use plume::{build_plume, image_feature_fusion, plume_taps, FeatureVolume, PlumeTaps};
pub use stereo::stereo_forward;
pub use volume::volume_forward;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraRig;
use crate::tensor::{ParamStore, Tape, TensorError, Var};
use crate::voxel_grid::{GridError, VoxelGridSpec};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("camera rig does not match the feature maps: {0}")]
    RigMismatch(String),
    #[error("parameter {name} has shape {found:?}, layer expects {expected:?}")]
    CheckpointMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Small,
    Middle,
    Large,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Small, Variant::Middle, Variant::Large];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Small => "small",
            Variant::Middle => "middle",
            Variant::Large => "large",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Variant::Small),
            "middle" => Ok(Variant::Middle),
            "large" => Ok(Variant::Large),
            other => Err(NetworkError::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

/// Resolution of the stereo feature maps relative to the input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureResolution {
    #[default]
    Full,
    Half,
    Quarter,
}

impl FeatureResolution {
    pub fn factor(self) -> usize {
        match self {
            FeatureResolution::Full => 1,
            FeatureResolution::Half => 2,
            FeatureResolution::Quarter => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeNet {
    /// Two 3D convolutions, then the BEV hourglass.
    #[default]
    Hybrid3dBev,
    /// BEV hourglass directly on the flattened feature volume.
    BevOnly,
    /// Hourglass built from 3D convolutions, flattened at the end.
    Pure3d,
}

/// Everything that determines the network topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub image_feature_resolution: FeatureResolution,
    pub volume_net: VolumeNet,
    /// Append each voxel center's `(x, y, z)` to its feature vector.
    pub concat_voxel_coords: bool,
    /// Append occupancy-weighted image features to the detection input.
    pub fusion_enabled: bool,
    /// Left and right images go through the same encoder weights.
    pub share_stereo_weights: bool,
    pub grid: VoxelGridSpec,
    /// Multiplier on every channel count; results round up to at least 4.
    pub scale: f64,
    pub dropout: f64,
    /// FOV masks require the voxel to be visible in both cameras.
    pub require_both_cameras: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Small,
            image_feature_resolution: FeatureResolution::Full,
            volume_net: VolumeNet::Hybrid3dBev,
            concat_voxel_coords: false,
            fusion_enabled: false,
            share_stereo_weights: true,
            grid: VoxelGridSpec::kitti(),
            scale: 1.0,
            dropout: 0.2,
            require_both_cameras: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(NetworkError::InvalidConfig(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NetworkError::InvalidConfig(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> ChannelPlan {
        ChannelPlan::new(self.variant, self.scale)
    }

    /// Channels of one stereo feature map.
    pub fn image_channels(&self) -> usize {
        self.channels().fpn_conv
    }

    /// Channels of the feature volume.
    pub fn plume_channels(&self) -> usize {
        2 * self.image_channels() + if self.concat_voxel_coords { 3 } else { 0 }
    }

    /// Channels entering the detection head.
    pub fn detection_input_channels(&self) -> usize {
        self.channels().bev0
            + if self.fusion_enabled {
                2 * self.image_channels()
            } else {
                0
            }
    }
}

/// Channel counts and block depths of one variant after scaling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub conv0: usize,
    pub maxpool0: usize,
    pub layer1: usize,
    pub layer2: usize,
    pub layer3: usize,
    pub layer4: usize,
    pub branch: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub fpn: usize,
    pub fpn_conv: usize,
    pub conv3d: usize,
    pub bev0: usize,
    pub bev2: usize,
    pub occ_conv3: usize,
    /// Convolutions in `conv0`.
    pub conv0_layers: usize,
    /// Residual blocks in `layer1..=layer4`.
    pub blocks: [usize; 4],
    /// Detection-head encoder: layers and channels of its five blocks.
    pub det_layers: [usize; 5],
    pub det_channels: [usize; 5],
}

/// Rounds `c * scale` up, with a floor of 4 channels.
pub fn scale_channels(c: usize, scale: f64) -> usize {
    if scale == 1.0 {
        return c;
    }
    ((c as f64 * scale - 1e-9).ceil() as usize).max(4)
}

impl ChannelPlan {
    /// Unscaled plan of a variant.
    pub fn base(variant: Variant) -> Self {
        let (conv0, maxpool0, layer1, layer2, layer3, layer4, branch, conv1, conv2) = match variant {
            Variant::Small => (32, 8, 8, 16, 32, 32, 8, 32, 8),
            Variant::Middle | Variant::Large => (32, 32, 32, 64, 128, 128, 32, 128, 32),
        };
        let (fpn, conv3d, bev0, bev2, occ_conv3) = match variant {
            Variant::Small => (32, 12, 96, 192, 48),
            Variant::Middle => (64, 32, 160, 320, 80),
            Variant::Large => (96, 48, 256, 512, 128),
        };
        let blocks = match variant {
            Variant::Small | Variant::Middle => [3, 6, 2, 2],
            Variant::Large => [3, 6, 6, 6],
        };
        let (det_layers, det_channels) = match variant {
            Variant::Small => ([2, 3, 6, 6, 3], [32, 96, 128, 192, 192]),
            Variant::Middle => ([2, 3, 6, 6, 3], [32, 96, 192, 256, 384]),
            Variant::Large => ([3, 3, 6, 6, 3], [48, 128, 192, 256, 384]),
        };
        Self {
            conv0,
            maxpool0,
            layer1,
            layer2,
            layer3,
            layer4,
            branch,
            conv1,
            conv2,
            fpn,
            fpn_conv: 32,
            conv3d,
            bev0,
            bev2,
            occ_conv3,
            conv0_layers: 3,
            blocks,
            det_layers,
            det_channels,
        }
    }

    pub fn new(variant: Variant, scale: f64) -> Self {
        let b = Self::base(variant);
        let s = |c| scale_channels(c, scale);
        Self {
            conv0: s(b.conv0),
            maxpool0: s(b.maxpool0),
            layer1: s(b.layer1),
            layer2: s(b.layer2),
            layer3: s(b.layer3),
            layer4: s(b.layer4),
            branch: s(b.branch),
            conv1: s(b.conv1),
            conv2: s(b.conv2),
            fpn: s(b.fpn),
            fpn_conv: s(b.fpn_conv),
            conv3d: s(b.conv3d),
            bev0: s(b.bev0),
            bev2: s(b.bev2),
            occ_conv3: s(b.occ_conv3),
            det_channels: b.det_channels.map(s),
            ..b
        }
    }

    /// Channels of the spatial-pyramid concatenation.
    pub fn concat(&self) -> usize {
        self.layer2 + self.layer4 + 4 * self.branch
    }

    /// Hourglass widths of the all-3D volume network.
    pub fn pure3d(&self) -> (usize, usize) {
        (self.bev0.div_ceil(8).max(4), self.bev2.div_ceil(8).max(4))
    }

    /// Channels of the detection head's decoder and header convolutions.
    pub fn det_decoder(&self) -> usize {
        self.det_channels[2]
    }
}

/// Which heads a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub occupancy: bool,
    pub detection: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        occupancy: true,
        detection: true,
    };
    pub const OCCUPANCY: Heads = Heads {
        occupancy: true,
        detection: false,
    };
}

/// Intermediate and final handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub left_features: Var,
    pub right_features: Var,
    pub volume: Var,
    pub bev: Var,
    /// Probabilities `[X, Y, Z]`.
    pub occupancy: Option<Var>,
    /// Detection-head input (BEV features, fused when enabled).
    pub detection_input: Option<Var>,
    pub detection: Option<DetectionMaps>,
}

/// Full forward pass over a stereo pair `[3, H, W]`.
pub fn forward(
    ctx: &mut Ctx,
    cfg: &NetworkConfig,
    left: Var,
    right: Var,
    rig: &CameraRig,
    heads: Heads,
) -> Result<Outputs> {
    cfg.validate()?;
    ctx.record("image", left);
    let left_prefix = if cfg.share_stereo_weights {
        "stereo"
    } else {
        "stereo_left"
    };
    let right_prefix = if cfg.share_stereo_weights {
        "stereo"
    } else {
        "stereo_right"
    };
    let left_features = stereo_forward(ctx, cfg, left, left_prefix)?;
    let right_features = ctx.without_trace(|ctx| stereo_forward(ctx, cfg, right, right_prefix))?;
    let plume = build_plume(ctx.tape, left_features, right_features, &cfg.grid, rig, cfg)?;
    ctx.record("plume", plume.values);
    let bev = volume_forward(ctx, cfg, plume.values)?;
    let need_occ = heads.occupancy || (heads.detection && cfg.fusion_enabled);
    let occupancy = if need_occ {
        Some(occupancy_head(ctx, cfg, bev)?)
    } else {
        None
    };
    let (detection_input, detection) = if heads.detection {
        let input = match (cfg.fusion_enabled, occupancy) {
            (true, Some(occ)) => {
                let fused = image_feature_fusion(ctx.tape, cfg, left_features, right_features, occ, bev, rig)?;
                ctx.record("fusion", fused);
                fused
            }
            _ => bev,
        };
        (Some(input), Some(detection_head(ctx, cfg, input)?))
    } else {
        (None, None)
    };
    Ok(Outputs {
        left_features,
        right_features,
        volume: plume.values,
        bev,
        occupancy,
        detection_input,
        detection,
    })
}

/// Parameter-name prefix of the detection head.
pub const DETECTION_PREFIX: &str = "detection.";

/// Parameters and configuration of one network instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub seed: u64,
}

impl Model {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params: ParamStore::new(),
            seed,
        })
    }

    /// Runs one forward pass on blank inputs so every parameter exists.
    pub fn initialize(&mut self, rig: &CameraRig) -> Result<()> {
        let mut tape = Tape::new();
        let blank = crate::tensor::Tensor::zeros(&[3, rig.image_h, rig.image_w]);
        let l = tape.constant(blank.clone());
        let r = tape.constant(blank);
        let cfg = self.config.clone();
        let mut ctx = Ctx::new(&mut tape, &mut self.params, self.seed, Trainable::None);
        forward(&mut ctx, &cfg, l, r, rig, Heads::ALL)?;
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    #[test]
    fn scaling_rounds_up_with_floor() {
        assert_eq!(scale_channels(32, 1.0), 32);
        assert_eq!(scale_channels(96, 0.125), 12);
        assert_eq!(scale_channels(12, 0.125), 4);
        assert_eq!(scale_channels(100, 0.25), 25);
        assert_eq!(scale_channels(101, 0.25), 26);
    }

    #[test]
    fn plume_is_64_channels_at_full_scale() {
        for v in Variant::ALL {
            let cfg = NetworkConfig {
                variant: v,
                ..NetworkConfig::default()
            };
            assert_eq!(cfg.plume_channels(), 64);
            assert_eq!(
                NetworkConfig {
                    concat_voxel_coords: true,
                    ..cfg
                }
                .plume_channels(),
                67
            );
        }
    }

    #[test]
    fn detection_block_plans() {
        let s = ChannelPlan::base(Variant::Small);
        assert_eq!(
            (s.det_layers, s.det_channels),
            ([2, 3, 6, 6, 3], [32, 96, 128, 192, 192])
        );
        let m = ChannelPlan::base(Variant::Middle);
        assert_eq!(
            (m.det_layers, m.det_channels),
            ([2, 3, 6, 6, 3], [32, 96, 192, 256, 384])
        );
        let l = ChannelPlan::base(Variant::Large);
        assert_eq!(
            (l.det_layers, l.det_channels),
            ([3, 3, 6, 6, 3], [48, 128, 192, 256, 384])
        );
        assert_eq!(s.concat(), 80);
        assert_eq!(m.concat(), 320);
    }

    pub(crate) fn toy_config() -> NetworkConfig {
        NetworkConfig {
            scale: 0.125,
            grid: VoxelGridSpec {
                x_range: [-1.6, 1.6],
                y_range: [-0.4, 0.4],
                z_range: [2.0, 5.2],
                resolution: 0.2,
            },
            ..NetworkConfig::default()
        }
    }

    pub(crate) fn toy_rig() -> CameraRig {
        CameraRig::new(20.0, 20.0, 15.5, 7.5, 0.5, 32, 16).unwrap()
    }

    fn run_trace(cfg: &NetworkConfig) -> (Vec<(String, Vec<usize>)>, ParamStore) {
        let rig = toy_rig();
        let mut tape = Tape::new();
        let img = crate::tensor::Tensor::from_fn(&[3, 16, 32], |i| ((i * 37) % 11) as f64 / 11.0);
        let l = tape.constant(img.clone());
        let r = tape.constant(img);
        let mut params = ParamStore::new();
        let mut ctx = Ctx::new(&mut tape, &mut params, 3, Trainable::All);
        forward(&mut ctx, cfg, l, r, &rig, Heads::ALL).unwrap();
        let trace = ctx.trace().to_vec();
        (trace, params)
    }

    #[test]
    fn executed_shapes_follow_the_plan() {
        use crate::networks::{FeatureResolution, VolumeNet};
        let base = toy_config();
        let variants = [
            base.clone(),
            NetworkConfig {
                concat_voxel_coords: true,
                fusion_enabled: true,
                ..base.clone()
            },
            NetworkConfig {
                image_feature_resolution: FeatureResolution::Half,
                volume_net: VolumeNet::BevOnly,
                ..base.clone()
            },
            NetworkConfig {
                image_feature_resolution: FeatureResolution::Quarter,
                volume_net: VolumeNet::Pure3d,
                ..base.clone()
            },
            NetworkConfig {
                variant: Variant::Large,
                share_stereo_weights: false,
                ..base.clone()
            },
            NetworkConfig { scale: 0.25, ..base },
        ];
        for cfg in variants {
            let (trace, _) = run_trace(&cfg);
            let plan = shape_plan(&cfg).unwrap().concrete(16, 32).unwrap();
            assert_eq!(trace, plan, "{cfg:?}");
        }
    }

    #[test]
    fn separate_stereo_weights_double_the_encoder() {
        let shared = run_trace(&toy_config()).1;
        let separate = run_trace(&NetworkConfig {
            share_stereo_weights: false,
            ..toy_config()
        })
        .1;
        let enc = |p: &ParamStore, pre: &str| p.names().iter().filter(|n| n.starts_with(pre)).count();
        assert!(enc(&shared, "stereo.") > 0);
        assert_eq!(enc(&separate, "stereo_left."), enc(&shared, "stereo."));
        assert_eq!(enc(&separate, "stereo_right."), enc(&shared, "stereo."));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = NetworkConfig {
            variant: Variant::Middle,
            scale: 0.25,
            ..NetworkConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"variant\":\"middle\""));
        let back: NetworkConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: NetworkConfig = serde_json::from_str(r#"{"variant":"large"}"#).unwrap();
        assert_eq!(partial.variant, Variant::Large);
        assert_eq!(partial.scale, 1.0);
    }
}
