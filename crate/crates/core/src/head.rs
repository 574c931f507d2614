//! Segmentation head and focal loss settings.

use crate::error::{dim_err, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{self, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// conv3x3 (C→hidden) → ReLU → conv3x3 (hidden→K), one logit plane per class.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub c: usize,
    pub hidden: usize,
    pub k: usize,
    prefix: String,
}

impl SegHead {
    pub fn new(c: usize, k: usize) -> Self {
        Self::with_prefix("head", c, c, k)
    }

    /// A head whose parameters live under `prefix` instead of `head`.
    pub fn with_prefix(prefix: &str, c: usize, hidden: usize, k: usize) -> Self {
        SegHead {
            c,
            hidden,
            k,
            prefix: prefix.to_owned(),
        }
    }

    pub fn param_name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        let fan1 = 9 * self.c;
        let fan2 = 9 * self.hidden;
        store.insert(
            self.param_name("conv1.kernel"),
            params::uniform_fan_in(&[3, 3, self.c, self.hidden], fan1, rng),
        );
        store.insert(
            self.param_name("conv1.bias"),
            params::uniform_fan_in(&[self.hidden], fan1, rng),
        );
        store.insert(
            self.param_name("conv2.kernel"),
            params::uniform_fan_in(&[3, 3, self.hidden, self.k], fan2, rng),
        );
        store.insert(self.param_name("conv2.bias"), Tensor::zeros(&[self.k]));
    }

    /// H×W×C → H×W×K logits.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.c {
            return Err(dim_err("seg_head", format!("input {s:?}, expected H×W×{}", self.c)));
        }
        let mut p = |part: &str| -> Result<NodeId> {
            let name = self.param_name(part);
            Ok(g.param(&name, store.get(&name)?))
        };
        let (k1, b1, k2, b2) = (p("conv1.kernel")?, p("conv1.bias")?, p("conv2.kernel")?, p("conv2.bias")?);
        let h = g.conv3x3(x, k1, b1)?;
        let h = g.relu(h)?;
        g.conv3x3(h, k2, b2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalConfig {
    pub gamma: f64,
    /// Positive-class weight α; negatives get 1 − α. `None` weighs both by 1.
    pub alpha: Option<f64>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            gamma: 2.0,
            alpha: Some(0.25),
        }
    }
}

impl FocalConfig {
    pub fn apply(&self, g: &mut Graph, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        g.focal_loss(logits, targets, self.gamma, self.alpha)
    }
}
