//! Camera/LiDAR BEV fusers.
//!
//! All four strategies take two H×W×C grids and return one H×W×C grid:
//!
//! * `Conv`: channel concat, then a 3×3 conv 2C→C.
//! * `Add`: a separate 3×3 conv per modality, summed.
//! * `Dynamic`: `Conv`, then a squeeze-and-excitation channel gate on the
//!   fused map.
//! * `DualDynamic`: a channel gate `w = σ(γ(avgpool(cam + lidar)))` weights
//!   the branches by `w` and `1 - w`, a 3×3 conv fuses the concatenation and
//!   a spatial self-gate re-weights every position:
//!   `Adaptive(F) = σ(a · mean_c(F) + b) · F`.
//!
//! Gate linears start at zero so every gate begins at the neutral 0.5.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{self, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FuserKind {
    Conv,
    Add,
    Dynamic,
    DualDynamic,
}

impl FuserKind {
    pub const ALL: [FuserKind; 4] = [FuserKind::Conv, FuserKind::Add, FuserKind::Dynamic, FuserKind::DualDynamic];

    pub fn token(self) -> &'static str {
        match self {
            FuserKind::Conv => "conv",
            FuserKind::Add => "add",
            FuserKind::Dynamic => "dynamic",
            FuserKind::DualDynamic => "ddf",
        }
    }
}

impl fmt::Display for FuserKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for FuserKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(FuserKind::Conv),
            "add" => Ok(FuserKind::Add),
            "dynamic" => Ok(FuserKind::Dynamic),
            "ddf" => Ok(FuserKind::DualDynamic),
            other => Err(Error::Input(format!(
                "unknown fuser `{other}` (expected conv|add|dynamic|ddf)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub c: usize,
    /// SE-style bottleneck reduction ratio for the DDF channel gate
    /// (C → C/r → C with ReLU). `None` uses a single C→C linear layer.
    pub gate_reduction: Option<usize>,
}

impl FusionConfig {
    pub fn new(c: usize) -> Self {
        FusionConfig {
            c,
            gate_reduction: None,
        }
    }
}

/// Graph handles for the intermediate tensors of one DDF pass.
#[derive(Clone, Copy, Debug)]
pub struct DdfTrace {
    /// Channel gate w, shape [C].
    pub gate: NodeId,
    /// w ⊙ cam
    pub cam_branch: NodeId,
    /// (1 − w) ⊙ lidar
    pub lidar_branch: NodeId,
    /// 3×3 conv output before the spatial gate.
    pub conv: NodeId,
    /// Spatial gate s, shape [H, W].
    pub spatial_gate: NodeId,
    pub out: NodeId,
}

#[derive(Clone, Debug)]
pub struct Fuser {
    kind: FuserKind,
    cfg: FusionConfig,
}

pub const CONV_K: &str = "fuser.conv.kernel";
pub const CONV_B: &str = "fuser.conv.bias";
pub const CAM_K: &str = "fuser.cam_conv.kernel";
pub const CAM_B: &str = "fuser.cam_conv.bias";
pub const LIDAR_K: &str = "fuser.lidar_conv.kernel";
pub const LIDAR_B: &str = "fuser.lidar_conv.bias";
pub const SE_W: &str = "fuser.se.weight";
pub const SE_B: &str = "fuser.se.bias";
pub const GATE_W: &str = "fuser.gate.weight";
pub const GATE_B: &str = "fuser.gate.bias";
pub const GATE_W1: &str = "fuser.gate.weight1";
pub const GATE_B1: &str = "fuser.gate.bias1";
pub const GATE_W2: &str = "fuser.gate.weight2";
pub const GATE_B2: &str = "fuser.gate.bias2";
pub const ADAPT_W: &str = "fuser.adaptive.weight";
pub const ADAPT_B: &str = "fuser.adaptive.bias";

fn conv_params(store: &mut ParamStore, k: &str, b: &str, cin: usize, cout: usize, rng: &mut Rng) {
    let fan_in = 9 * cin;
    store.insert(k, params::uniform_fan_in(&[3, 3, cin, cout], fan_in, rng));
    store.insert(b, params::uniform_fan_in(&[cout], fan_in, rng));
}

impl Fuser {
    pub fn new(kind: FuserKind, cfg: FusionConfig) -> Result<Self> {
        if cfg.c == 0 {
            return Err(Error::Input("fusion channel count must be positive".into()));
        }
        if let Some(r) = cfg.gate_reduction {
            if r == 0 || cfg.c / r == 0 {
                return Err(Error::Input(format!("gate reduction {r} invalid for C = {}", cfg.c)));
            }
        }
        Ok(Fuser { kind, cfg })
    }

    pub fn kind(&self) -> FuserKind {
        self.kind
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        let c = self.cfg.c;
        match self.kind {
            FuserKind::Conv => conv_params(store, CONV_K, CONV_B, 2 * c, c, rng),
            FuserKind::Add => {
                conv_params(store, CAM_K, CAM_B, c, c, rng);
                conv_params(store, LIDAR_K, LIDAR_B, c, c, rng);
            }
            FuserKind::Dynamic => {
                conv_params(store, CONV_K, CONV_B, 2 * c, c, rng);
                store.insert(SE_W, Tensor::zeros(&[c, c]));
                store.insert(SE_B, Tensor::zeros(&[c]));
            }
            FuserKind::DualDynamic => {
                match self.cfg.gate_reduction {
                    None => {
                        store.insert(GATE_W, Tensor::zeros(&[c, c]));
                        store.insert(GATE_B, Tensor::zeros(&[c]));
                    }
                    Some(r) => {
                        let hidden = c / r;
                        // The second layer starts at zero, so the first must not.
                        store.insert(GATE_W1, params::uniform_fan_in(&[c, hidden], c, rng));
                        store.insert(GATE_B1, params::uniform_fan_in(&[hidden], c, rng));
                        store.insert(GATE_W2, Tensor::zeros(&[hidden, c]));
                        store.insert(GATE_B2, Tensor::zeros(&[c]));
                    }
                }
                conv_params(store, CONV_K, CONV_B, 2 * c, c, rng);
                store.insert(ADAPT_W, Tensor::zeros(&[1]));
                store.insert(ADAPT_B, Tensor::zeros(&[1]));
            }
        }
    }

    fn p(g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId> {
        Ok(g.param(name, store.get(name)?))
    }

    fn check_pair(&self, g: &Graph, cam: NodeId, lidar: NodeId) -> Result<()> {
        let s = g.shape(cam);
        if s.len() != 3 || s[2] != self.cfg.c {
            return Err(dim_err("fusion", format!("camera grid {s:?}, expected H×W×{}", self.cfg.c)));
        }
        if g.shape(lidar) != s {
            return Err(dim_err("fusion", format!("camera {s:?} vs lidar {:?}", g.shape(lidar))));
        }
        Ok(())
    }

    /// Vector [C] → linear layer → [C].
    fn linear_vec(g: &mut Graph, store: &ParamStore, v: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let c = g.shape(v)[0];
        let row = g.reshape(v, &[1, c])?;
        let wn = Self::p(g, store, w)?;
        let bn = Self::p(g, store, b)?;
        let out = g.matmul(row, wn)?;
        let out = g.add_row_bias(out, bn)?;
        let n = g.shape(out)[1];
        g.reshape(out, &[n])
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cam: NodeId, lidar: NodeId) -> Result<NodeId> {
        match self.kind {
            FuserKind::Conv => self.conv_fusion(g, store, cam, lidar),
            FuserKind::Add => self.add_fusion(g, store, cam, lidar),
            FuserKind::Dynamic => self.dynamic_fusion(g, store, cam, lidar),
            FuserKind::DualDynamic => Ok(self.ddf_fuse(g, store, cam, lidar)?.out),
        }
    }

    pub fn conv_fusion(&self, g: &mut Graph, store: &ParamStore, cam: NodeId, lidar: NodeId) -> Result<NodeId> {
        self.check_pair(g, cam, lidar)?;
        let cat = g.concat_last(&[cam, lidar])?;
        let k = Self::p(g, store, CONV_K)?;
        let b = Self::p(g, store, CONV_B)?;
        g.conv3x3(cat, k, b)
    }

    pub fn add_fusion(&self, g: &mut Graph, store: &ParamStore, cam: NodeId, lidar: NodeId) -> Result<NodeId> {
        self.check_pair(g, cam, lidar)?;
        let (ck, cb) = (Self::p(g, store, CAM_K)?, Self::p(g, store, CAM_B)?);
        let (lk, lb) = (Self::p(g, store, LIDAR_K)?, Self::p(g, store, LIDAR_B)?);
        let c = g.conv3x3(cam, ck, cb)?;
        let l = g.conv3x3(lidar, lk, lb)?;
        g.add(c, l)
    }

    /// Conv fusion followed by a channel gate σ(Linear(avgpool(f))) ⊙ f.
    pub fn dynamic_fusion(&self, g: &mut Graph, store: &ParamStore, cam: NodeId, lidar: NodeId) -> Result<NodeId> {
        Ok(self.dynamic_fusion_traced(g, store, cam, lidar)?.1)
    }

    /// Returns (channel gate, output).
    pub fn dynamic_fusion_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cam: NodeId,
        lidar: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let f = self.conv_fusion(g, store, cam, lidar)?;
        let pooled = g.avgpool_spatial(f)?;
        let lin = Self::linear_vec(g, store, pooled, SE_W, SE_B)?;
        let gate = g.sigmoid(lin)?;
        Ok((gate, g.scale_channels(f, gate)?))
    }

    /// w = σ(γ(avgpool(cam + lidar))), shape [C].
    pub fn ddf_gate(&self, g: &mut Graph, store: &ParamStore, cam: NodeId, lidar: NodeId) -> Result<NodeId> {
        self.check_pair(g, cam, lidar)?;
        let sum = g.add(cam, lidar)?;
        let pooled = g.avgpool_spatial(sum)?;
        let lin = match self.cfg.gate_reduction {
            None => Self::linear_vec(g, store, pooled, GATE_W, GATE_B)?,
            Some(_) => {
                let hidden = Self::linear_vec(g, store, pooled, GATE_W1, GATE_B1)?;
                let hidden = g.relu(hidden)?;
                Self::linear_vec(g, store, hidden, GATE_W2, GATE_B2)?
            }
        };
        g.sigmoid(lin)
    }

    /// Spatial self-gate: s = σ(a · mean_c(f) + b), out = s ⊙ f.
    /// Returns (s, out).
    pub fn adaptive(&self, g: &mut Graph, store: &ParamStore, f: NodeId) -> Result<(NodeId, NodeId)> {
        let pooled = g.avgpool_channel(f)?;
        let a = Self::p(g, store, ADAPT_W)?;
        let b = Self::p(g, store, ADAPT_B)?;
        let lin = g.mul(pooled, a)?;
        let lin = g.add(lin, b)?;
        let s = g.sigmoid(lin)?;
        Ok((s, g.scale_positions(f, s)?))
    }

    /// Full DDF pass with every intermediate exposed.
    pub fn ddf_fuse(&self, g: &mut Graph, store: &ParamStore, cam: NodeId, lidar: NodeId) -> Result<DdfTrace> {
        let gate = self.ddf_gate(g, store, cam, lidar)?;
        self.ddf_fuse_with_gate(g, store, cam, lidar, gate)
    }

    /// DDF with an externally supplied channel gate (used to pin the gate
    /// in tests and diagnostics).
    pub fn ddf_fuse_with_gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cam: NodeId,
        lidar: NodeId,
        gate: NodeId,
    ) -> Result<DdfTrace> {
        self.check_pair(g, cam, lidar)?;
        let complement = g.one_minus(gate)?;
        let cam_branch = g.scale_channels(cam, gate)?;
        let lidar_branch = g.scale_channels(lidar, complement)?;
        let cat = g.concat_last(&[cam_branch, lidar_branch])?;
        let k = Self::p(g, store, CONV_K)?;
        let b = Self::p(g, store, CONV_B)?;
        let conv = g.conv3x3(cat, k, b)?;
        let (spatial_gate, out) = self.adaptive(g, store, conv)?;
        Ok(DdfTrace {
            gate,
            cam_branch,
            lidar_branch,
            conv,
            spatial_gate,
            out,
        })
    }
}
