//! Symbolic layer-by-layer shapes, computed without allocating tensors.

use std::fmt::{self, Write as _};

use super::stereo::SPP_WINDOWS;
use super::{NetworkConfig, Result, Variant, VolumeNet};
use crate::postproc::REGRESSION_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sym {
    H,
    W,
    X,
    Y,
    Z,
}

impl Sym {
    fn letter(self) -> char {
        match self {
            Sym::H => 'H',
            Sym::W => 'W',
            Sym::X => 'X',
            Sym::Y => 'Y',
            Sym::Z => 'Z',
        }
    }
}

/// `coeff · ceil(sym / div)`, or a plain number when `sym` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dim {
    pub coeff: usize,
    pub sym: Option<Sym>,
    pub div: usize,
}

impl Dim {
    pub const fn n(c: usize) -> Self {
        Self {
            coeff: c,
            sym: None,
            div: 1,
        }
    }

    pub const fn s(sym: Sym, div: usize) -> Self {
        Self {
            coeff: 1,
            sym: Some(sym),
            div,
        }
    }

    pub fn eval(&self, h: usize, w: usize, grid: (usize, usize, usize)) -> usize {
        let base = match self.sym {
            None => return self.coeff,
            Some(Sym::H) => h,
            Some(Sym::W) => w,
            Some(Sym::X) => grid.0,
            Some(Sym::Y) => grid.1,
            Some(Sym::Z) => grid.2,
        };
        self.coeff * base.div_ceil(self.div)
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.sym, self.coeff, self.div) {
            (None, c, _) => write!(f, "{c}"),
            (Some(s), 1, 1) => write!(f, "{}", s.letter()),
            (Some(s), 1, d) => write!(f, "{}/{d}", s.letter()),
            (Some(s), c, 1) => write!(f, "({c}×{})", s.letter()),
            (Some(s), c, d) => write!(f, "({c}×{}/{d})", s.letter()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanRow {
    pub name: String,
    pub dims: Vec<Dim>,
}

impl PlanRow {
    pub fn render(&self) -> String {
        self.dims.iter().map(Dim::to_string).collect::<Vec<_>>().join("×")
    }
}

/// Difference between a plan row and the reference table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanDiff {
    pub row: String,
    pub expected: Option<String>,
    pub found: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapePlan {
    pub config: NetworkConfig,
    pub rows: Vec<PlanRow>,
}

impl ShapePlan {
    pub fn get(&self, name: &str) -> Option<&PlanRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Shapes for a concrete `H × W` input on the configured grid.
    pub fn concrete(&self, h: usize, w: usize) -> Result<Vec<(String, Vec<usize>)>> {
        let grid = self.config.grid.grid_dims()?;
        Ok(self
            .rows
            .iter()
            .map(|r| (r.name.clone(), r.dims.iter().map(|d| d.eval(h, w, grid)).collect()))
            .collect())
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {}", r.name, r.render());
        }
        s
    }

    /// Row-for-row comparison against `table`, in table order.
    pub fn diff(&self, table: &[(&str, String)]) -> Vec<PlanDiff> {
        let mut out = Vec::new();
        let planned: Vec<&PlanRow> = self
            .rows
            .iter()
            .filter(|r| table.iter().any(|(n, _)| *n == r.name))
            .collect();
        for (i, (name, expected)) in table.iter().enumerate() {
            let found = self.get(name).map(PlanRow::render);
            let in_order = planned.get(i).is_some_and(|r| r.name == *name);
            if found.as_deref() != Some(expected.as_str()) || !in_order {
                out.push(PlanDiff {
                    row: name.to_string(),
                    expected: Some(expected.clone()),
                    found,
                });
            }
        }
        out
    }
}

/// Analytic shapes of every recorded layer, in execution order.
pub fn shape_plan(cfg: &NetworkConfig) -> Result<ShapePlan> {
    use Sym::*;
    cfg.validate()?;
    let ch = cfg.channels();
    let f = cfg.image_feature_resolution.factor();
    let mut rows = Vec::new();
    let mut push = |name: &str, dims: Vec<Dim>| {
        rows.push(PlanRow {
            name: name.into(),
            dims,
        })
    };
    let img = |c: usize, div: usize| vec![Dim::n(c), Dim::s(H, div), Dim::s(W, div)];
    let bev = |c: usize, div: usize| vec![Dim::n(c), Dim::s(X, div), Dim::s(Z, div)];

    push("image", img(3, 1));
    push("conv0", img(ch.conv0, 1));
    push("maxpool0", img(ch.maxpool0, 2));
    push("layer1", img(ch.layer1, 2));
    push("layer2", img(ch.layer2, 4));
    push("layer3", img(ch.layer3, 4));
    push("layer4", img(ch.layer4, 4));
    for i in 0..SPP_WINDOWS.len() {
        push(&format!("branch{}", i + 1), img(ch.branch, 4));
    }
    push("concat", img(ch.concat(), 4));
    push("conv1", img(ch.conv1, 4));
    push("conv2", img(ch.conv2, 4));
    push("fpn_conv2", img(ch.fpn, 4));
    push("fpn_conv2_up", img(ch.fpn, f));
    push("fpn_conv1", img(ch.fpn, 2));
    push("fpn_conv1_up", img(ch.fpn, f));
    push("fpn_conv0", img(ch.fpn, 1));
    push("fpn_conv0_up", img(ch.fpn, f));
    push("fpn_sum", img(ch.fpn, f));
    push("dropout", img(ch.fpn, f));
    push("fpn_conv", img(ch.fpn_conv, f));

    let vol = |c: usize, dx: usize, dz: usize| vec![Dim::n(c), Dim::s(X, dx), Dim::s(Y, 1), Dim::s(Z, dz)];
    push("plume", vol(cfg.plume_channels(), 1, 1));
    let reshape = |c: usize| {
        vec![
            Dim {
                coeff: c,
                sym: Some(Y),
                div: 1,
            },
            Dim::s(X, 1),
            Dim::s(Z, 1),
        ]
    };
    let hourglass =
        |push: &mut dyn FnMut(&str, Vec<Dim>), shape: &dyn Fn(usize, usize) -> Vec<Dim>, c0: usize, c2: usize| {
            push("bev_conv0", shape(c0, 1));
            push("bev_conv1", shape(c0, 1));
            push("bev_conv2", shape(c2, 2));
            push("bev_conv3", shape(c2, 4));
            push("bev_deconv4", shape(c2, 2));
            push("bev_deconv5", shape(c0, 1));
        };
    match cfg.volume_net {
        VolumeNet::Hybrid3dBev => {
            push("3dconv0", vol(ch.conv3d, 1, 1));
            push("reshape", reshape(ch.conv3d));
            hourglass(&mut push, &bev, ch.bev0, ch.bev2);
        }
        VolumeNet::BevOnly => {
            push("reshape", reshape(cfg.plume_channels()));
            hourglass(&mut push, &bev, ch.bev0, ch.bev2);
        }
        VolumeNet::Pure3d => {
            push("3dconv0", vol(ch.conv3d, 1, 1));
            let (c0, c2) = ch.pure3d();
            hourglass(&mut push, &|c, d| vol(c, d, d), c0, c2);
            push("reshape", reshape(c0));
            push("flatten_proj", bev(ch.bev0, 1));
        }
    }
    push("conv3", bev(ch.occ_conv3, 1));
    push("conv4", vec![Dim::s(Y, 1), Dim::s(X, 1), Dim::s(Z, 1)]);
    if cfg.fusion_enabled {
        push("fusion", bev(cfg.detection_input_channels(), 1));
    }
    for b in 0..5 {
        push(&format!("det_block{}", b + 1), bev(ch.det_channels[b], 1 << b));
    }
    push("det_fpn", bev(ch.det_decoder(), 4));
    push("det_cls", bev(1, 4));
    push("det_reg", bev(REGRESSION_CHANNELS, 4));
    Ok(ShapePlan {
        config: cfg.clone(),
        rows,
    })
}

/// Output dimensions of the architecture table for `variant` at full
/// feature resolution and unit scale, in the notation of [`Dim`].
pub fn paper_table(variant: Variant) -> Vec<(&'static str, String)> {
    let pick = |s: usize, m: usize, l: usize| match variant {
        Variant::Small => s,
        Variant::Middle => m,
        Variant::Large => l,
    };
    let img = |c: usize, d: usize| match d {
        1 => format!("{c}×H×W"),
        d => format!("{c}×H/{d}×W/{d}"),
    };
    let bev = |c: usize, d: usize| match d {
        1 => format!("{c}×X×Z"),
        d => format!("{c}×X/{d}×Z/{d}"),
    };
    let fpn = pick(32, 64, 96);
    let enc = pick(8, 32, 32);
    let deep = pick(32, 128, 128);
    let c3d = pick(12, 32, 48);
    let b0 = pick(96, 160, 256);
    let b2 = pick(192, 320, 512);
    vec![
        ("image", img(3, 1)),
        ("conv0", img(32, 1)),
        ("maxpool0", img(enc, 2)),
        ("layer1", img(enc, 2)),
        ("layer2", img(pick(16, 64, 64), 4)),
        ("layer3", img(deep, 4)),
        ("layer4", img(deep, 4)),
        ("branch1", img(enc, 4)),
        ("branch2", img(enc, 4)),
        ("branch3", img(enc, 4)),
        ("branch4", img(enc, 4)),
        ("concat", img(pick(80, 320, 320), 4)),
        ("conv1", img(deep, 4)),
        ("conv2", img(enc, 4)),
        ("fpn_conv2", img(fpn, 4)),
        ("fpn_conv2_up", img(fpn, 1)),
        ("fpn_conv1", img(fpn, 2)),
        ("fpn_conv1_up", img(fpn, 1)),
        ("fpn_conv0", img(fpn, 1)),
        ("fpn_conv0_up", img(fpn, 1)),
        ("fpn_sum", img(fpn, 1)),
        ("dropout", img(fpn, 1)),
        ("fpn_conv", img(32, 1)),
        ("plume", "64×X×Y×Z".to_string()),
        ("3dconv0", format!("{c3d}×X×Y×Z")),
        ("reshape", format!("({c3d}×Y)×X×Z")),
        ("bev_conv0", bev(b0, 1)),
        ("bev_conv1", bev(b0, 1)),
        ("bev_conv2", bev(b2, 2)),
        ("bev_conv3", bev(b2, 4)),
        ("bev_deconv4", bev(b2, 2)),
        ("bev_deconv5", bev(b0, 1)),
        ("conv3", bev(pick(48, 80, 128), 1)),
        ("conv4", "Y×X×Z".to_string()),
    ]
}
