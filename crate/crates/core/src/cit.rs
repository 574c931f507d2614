//! Cross-modal interaction transform.
//!
//! Camera and LiDAR BEV grids (H×W×C each) are flattened into tokens,
//! concatenated camera-first into a 2HW×C sequence, offset by a learnable
//! positional embedding and passed through multi-head self-attention:
//!
//! ```text
//! T_in   = [T_cam; T_lidar] + P
//! Z_i    = softmax((T_in Wq_i)(T_in Wk_i)ᵀ / √d) (T_in Wv_i)
//! Ẑ      = [Z_1, …, Z_h] Wo
//! T_out  = MLP(Ẑ) + T_in
//! ```
//!
//! There is no normalisation layer and no residual around the attention
//! itself, so large activations are not damped; the trainer offers gradient
//! clipping for that reason. The first HW rows of `T_out` become the
//! enhanced camera grid and the rest the enhanced LiDAR grid.

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{self, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CitConfig {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub heads: usize,
    /// Per-head projection width (`D_Q = D_K = D_V`).
    pub head_dim: usize,
    pub mlp_hidden: usize,
    /// Number of stacked attention blocks.
    pub depth: usize,
    /// Whether the learnable positional embedding is present.
    pub positional: bool,
}

impl CitConfig {
    /// Desk-scale defaults: 8×8 grid, 16 channels, 4 heads of width C.
    pub fn desk() -> Self {
        Self::for_grid(8, 8, 16, 4)
    }

    /// 8 heads with a 256-wide embedding.
    pub fn full_scale(h: usize, w: usize) -> Self {
        Self::for_grid(h, w, 256, 8)
    }

    pub fn for_grid(h: usize, w: usize, c: usize, heads: usize) -> Self {
        CitConfig {
            h,
            w,
            c,
            heads,
            head_dim: c,
            mlp_hidden: 2 * c,
            depth: 1,
            positional: true,
        }
    }

    pub fn tokens_per_modality(&self) -> usize {
        self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("h", self.h),
            ("w", self.w),
            ("c", self.c),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("depth", self.depth),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Input(format!("cit {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Which part of the concatenated sequence a token matrix holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenOrigin {
    CameraHalf,
    LidarHalf,
    Concatenated,
}

/// Flattened BEV tokens. In a concatenated matrix, row `i < HW` is a camera
/// token and row `i >= HW` a LiDAR token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Tensor,
    pub origin: TokenOrigin,
}

impl TokenMatrix {
    pub fn from_grid(grid: &Tensor, origin: TokenOrigin) -> Result<Self> {
        let (h, w, c) = grid_dims("tokenize", grid)?;
        Ok(TokenMatrix {
            tokens: grid.reshape(&[h * w, c])?,
            origin,
        })
    }

    /// Camera rows first, then LiDAR rows; optional positional offset.
    pub fn concat(cam: &Tensor, lidar: &Tensor, pos_embed: Option<&Tensor>) -> Result<Self> {
        let (h, w, c) = grid_dims("tokenize", cam)?;
        if lidar.shape() != cam.shape() {
            return Err(dim_err("tokenize", format!("camera {:?} vs lidar {:?}", cam.shape(), lidar.shape())));
        }
        let mut data = cam.data().to_vec();
        data.extend_from_slice(lidar.data());
        if let Some(p) = pos_embed {
            if p.shape() != [2 * h * w, c] {
                return Err(dim_err("tokenize", format!("pos_embed {:?}, expected [{}, {c}]", p.shape(), 2 * h * w)));
            }
            for (d, &pv) in data.iter_mut().zip(p.data()) {
                *d += pv;
            }
        }
        Ok(TokenMatrix {
            tokens: Tensor::new(&[2 * h * w, c], data)?,
            origin: TokenOrigin::Concatenated,
        })
    }

    /// Inverse of [`TokenMatrix::concat`] without positional offset.
    pub fn split(&self, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
        let (rows, c) = match *self.tokens.shape() {
            [r, c] => (r, c),
            ref s => return Err(dim_err("detokenize", format!("expected a matrix, got {s:?}"))),
        };
        if rows % 2 != 0 || rows != 2 * h * w {
            return Err(dim_err("detokenize", format!("{rows} rows for a {h}×{w} grid pair")));
        }
        let half = h * w * c;
        let d = self.tokens.data();
        Ok((
            Tensor::new(&[h, w, c], d[..half].to_vec())?,
            Tensor::new(&[h, w, c], d[half..].to_vec())?,
        ))
    }
}

fn grid_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(dim_err(op, format!("expected H×W×C grid, got {s:?}"))),
    }
}

/// Graph handles produced by one CIT pass.
#[derive(Clone, Debug)]
pub struct CitOutput {
    pub cam: NodeId,
    pub lidar: NodeId,
    pub tokens_in: NodeId,
    pub tokens_out: NodeId,
    /// Per-head attention matrices of the last block.
    pub attention: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Cit {
    cfg: CitConfig,
}

impl Cit {
    pub fn new(cfg: CitConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Cit { cfg })
    }

    pub fn config(&self) -> &CitConfig {
        &self.cfg
    }

    pub fn pos_embed_name() -> &'static str {
        "cit.pos_embed"
    }

    fn name(block: usize, what: &str) -> String {
        format!("cit.{block}.{what}")
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        let CitConfig {
            c,
            heads,
            head_dim,
            mlp_hidden,
            ..
        } = self.cfg;
        if self.cfg.positional {
            let n = 2 * self.cfg.tokens_per_modality();
            store.insert(Self::pos_embed_name(), params::normal(&[n, c], 0.02, rng));
        }
        for b in 0..self.cfg.depth {
            for i in 0..heads {
                for proj in ["wq", "wk", "wv"] {
                    store.insert(
                        Self::name(b, &format!("{proj}.{i}")),
                        params::uniform_fan_in(&[c, head_dim], c, rng),
                    );
                }
            }
            let concat = heads * head_dim;
            store.insert(Self::name(b, "wo"), params::uniform_fan_in(&[concat, c], concat, rng));
            store.insert(Self::name(b, "mlp.w1"), params::uniform_fan_in(&[c, mlp_hidden], c, rng));
            store.insert(Self::name(b, "mlp.b1"), params::uniform_fan_in(&[mlp_hidden], c, rng));
            store.insert(Self::name(b, "mlp.w2"), params::uniform_fan_in(&[mlp_hidden, c], mlp_hidden, rng));
            store.insert(Self::name(b, "mlp.b2"), params::uniform_fan_in(&[c], mlp_hidden, rng));
        }
    }

    fn check_grid(&self, g: &Graph, id: NodeId, which: &str) -> Result<()> {
        let expect = [self.cfg.h, self.cfg.w, self.cfg.c];
        if g.shape(id) != expect {
            return Err(dim_err("cit", format!("{which} grid {:?}, expected {expect:?}", g.shape(id))));
        }
        Ok(())
    }

    /// Flatten both grids, concatenate camera-first, add the positional
    /// embedding. Returns the 2HW×C input tokens.
    pub fn tokenize(&self, g: &mut Graph, store: &ParamStore, cam: NodeId, lidar: NodeId) -> Result<NodeId> {
        self.check_grid(g, cam, "camera")?;
        self.check_grid(g, lidar, "lidar")?;
        let hw = self.cfg.tokens_per_modality();
        let c = self.cfg.c;
        let cam_t = g.reshape(cam, &[hw, c])?;
        let lidar_t = g.reshape(lidar, &[hw, c])?;
        let tokens = g.concat_rows(&[cam_t, lidar_t])?;
        if self.cfg.positional {
            let pos = g.param(Self::pos_embed_name(), store.get(Self::pos_embed_name())?);
            g.add(tokens, pos)
        } else {
            Ok(tokens)
        }
    }

    /// Multi-head scaled dot-product attention. Returns Ẑ (2HW×C) and the
    /// per-head attention matrices α_i (2HW×2HW).
    pub fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: usize,
        tokens: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let scale = 1.0 / (self.cfg.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut alphas = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let mut proj = |what: &str| -> Result<NodeId> {
                let name = Self::name(block, &format!("{what}.{i}"));
                let w = g.param(&name, store.get(&name)?);
                g.matmul(tokens, w)
            };
            let q = proj("wq")?;
            let k = proj("wk")?;
            let v = proj("wv")?;
            let logits = g.matmul_nt(q, k)?;
            let scaled = g.scale(logits, scale)?;
            let alpha = g.softmax_rows(scaled)?;
            heads.push(g.matmul(alpha, v)?);
            alphas.push(alpha);
        }
        let concat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_last(&heads)?
        };
        let wo_name = Self::name(block, "wo");
        let wo = g.param(&wo_name, store.get(&wo_name)?);
        Ok((g.matmul(concat, wo)?, alphas))
    }

    /// T_out = MLP(Ẑ) + T_in with a two-layer ReLU MLP.
    pub fn output_transform(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: usize,
        z: NodeId,
        t_in: NodeId,
    ) -> Result<NodeId> {
        if g.shape(z) != g.shape(t_in) {
            return Err(dim_err("output_transform", format!("{:?} vs {:?}", g.shape(z), g.shape(t_in))));
        }
        let mut p = |what: &str| -> Result<NodeId> {
            let name = Self::name(block, what);
            Ok(g.param(&name, store.get(&name)?))
        };
        let (w1, b1, w2, b2) = (p("mlp.w1")?, p("mlp.b1")?, p("mlp.w2")?, p("mlp.b2")?);
        let hidden = g.matmul(z, w1)?;
        let hidden = g.add_row_bias(hidden, b1)?;
        let hidden = g.relu(hidden)?;
        let out = g.matmul(hidden, w2)?;
        let out = g.add_row_bias(out, b2)?;
        g.add(out, t_in)
    }

    /// Split 2HW×C tokens back into camera and LiDAR grids.
    pub fn detokenize(&self, g: &mut Graph, tokens: NodeId) -> Result<(NodeId, NodeId)> {
        let hw = self.cfg.tokens_per_modality();
        let rows = g.shape(tokens)[0];
        if rows % 2 != 0 || rows != 2 * hw {
            return Err(dim_err("detokenize", format!("{rows} rows, expected {}", 2 * hw)));
        }
        let shape = [self.cfg.h, self.cfg.w, self.cfg.c];
        let cam = g.slice_rows(tokens, 0, hw)?;
        let lidar = g.slice_rows(tokens, hw, hw)?;
        Ok((g.reshape(cam, &shape)?, g.reshape(lidar, &shape)?))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cam: NodeId, lidar: NodeId) -> Result<CitOutput> {
        let tokens_in = self.tokenize(g, store, cam, lidar)?;
        let mut t = tokens_in;
        let mut attention = Vec::new();
        for b in 0..self.cfg.depth {
            let (z, alphas) = self.attention(g, store, b, t)?;
            t = self.output_transform(g, store, b, z, t)?;
            attention = alphas;
        }
        let (cam_out, lidar_out) = self.detokenize(g, t)?;
        Ok(CitOutput {
            cam: cam_out,
            lidar: lidar_out,
            tokens_in,
            tokens_out: t,
            attention,
        })
    }
}

/// The 2HW×2HW attention matrix α, rows = querying tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub alpha: Tensor,
    pub hw: usize,
}

/// The four HW×HW tiles of α and per-row attention mass split.
#[derive(Clone, Debug)]
pub struct CorrelationBlocks {
    pub cam_cam: Tensor,
    pub cam_lidar: Tensor,
    pub lidar_cam: Tensor,
    pub lidar_lidar: Tensor,
    /// Mass each row puts on tokens of its own modality.
    pub intra_mass: Vec<f64>,
    /// Mass each row puts on tokens of the other modality.
    pub inter_mass: Vec<f64>,
}

/// Mean intra/inter mass over the rows of one modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowGroupMass {
    pub intra: f64,
    pub inter: f64,
}

impl CorrelationBlocks {
    pub fn camera_rows(&self) -> RowGroupMass {
        self.group(0)
    }

    pub fn lidar_rows(&self) -> RowGroupMass {
        self.group(1)
    }

    fn group(&self, which: usize) -> RowGroupMass {
        let hw = self.intra_mass.len() / 2;
        let range = which * hw..(which + 1) * hw;
        let n = hw as f64;
        RowGroupMass {
            intra: self.intra_mass[range.clone()].iter().sum::<f64>() / n,
            inter: self.inter_mass[range].iter().sum::<f64>() / n,
        }
    }
}

impl CorrelationMatrix {
    pub fn new(alpha: Tensor, hw: usize) -> Result<Self> {
        if alpha.shape() != [2 * hw, 2 * hw] {
            return Err(dim_err("correlation", format!("{:?} for hw = {hw}", alpha.shape())));
        }
        Ok(CorrelationMatrix { alpha, hw })
    }

    /// Element-wise mean of per-head matrices.
    pub fn head_average(heads: &[Tensor], hw: usize) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::Input("no attention heads".into()))?;
        let mut acc = Tensor::zeros(first.shape());
        for h in heads {
            if h.shape() != first.shape() {
                return Err(dim_err("correlation", "heads disagree in shape"));
            }
            for (a, v) in acc.data_mut().iter_mut().zip(h.data()) {
                *a += v;
            }
        }
        let inv = 1.0 / heads.len() as f64;
        acc.data_mut().iter_mut().for_each(|v| *v *= inv);
        Self::new(acc, hw)
    }

    pub fn from_graph(g: &Graph, heads: &[NodeId], hw: usize) -> Result<Self> {
        let values: Vec<Tensor> = heads.iter().map(|&id| g.value(id).clone()).collect();
        Self::head_average(&values, hw)
    }

    /// Tiles α into its four modality blocks. Rows that do not sum to one
    /// within 1e-6 are an integrity error.
    pub fn blocks(&self) -> Result<CorrelationBlocks> {
        let hw = self.hw;
        let n = 2 * hw;
        let d = self.alpha.data();
        for (i, row) in d.chunks_exact(n).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Integrity(format!("attention row {i} is not stochastic (sum {s})")));
            }
        }
        let tile = |r0: usize, c0: usize| {
            Tensor::from_fn(&[hw, hw], |k| d[(r0 + k / hw) * n + c0 + k % hw])
        };
        let mut intra = Vec::with_capacity(n);
        let mut inter = Vec::with_capacity(n);
        for (i, row) in d.chunks_exact(n).enumerate() {
            let first: f64 = row[..hw].iter().sum();
            let second: f64 = row[hw..].iter().sum();
            if i < hw {
                intra.push(first);
                inter.push(second);
            } else {
                intra.push(second);
                inter.push(first);
            }
        }
        Ok(CorrelationBlocks {
            cam_cam: tile(0, 0),
            cam_lidar: tile(0, hw),
            lidar_cam: tile(hw, 0),
            lidar_lidar: tile(hw, hw),
            intra_mass: intra,
            inter_mass: inter,
        })
    }
}

/// Mean cosine similarity over positions between two grids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSummary {
    pub mean: f64,
    pub counted: usize,
    /// Positions skipped because one of the two vectors has zero norm.
    pub excluded: usize,
}

pub fn mean_cosine(a: &Tensor, b: &Tensor) -> Result<CosineSummary> {
    let (_, _, c) = grid_dims("alignment", a)?;
    if a.shape() != b.shape() {
        return Err(dim_err("alignment", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut sum = 0.0;
    let mut counted = 0;
    let mut excluded = 0;
    for (pa, pb) in a.data().chunks_exact(c).zip(b.data().chunks_exact(c)) {
        let na = crate::kernels::dot(pa, pa).sqrt();
        let nb = crate::kernels::dot(pb, pb).sqrt();
        if na == 0.0 || nb == 0.0 {
            excluded += 1;
            continue;
        }
        sum += crate::kernels::dot(pa, pb) / (na * nb);
        counted += 1;
    }
    let mean = if counted > 0 { sum / counted as f64 } else { 0.0 };
    Ok(CosineSummary {
        mean,
        counted,
        excluded,
    })
}

/// Cross-modal cosine similarity before and after the transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentReport {
    pub before: CosineSummary,
    pub after: CosineSummary,
}

pub fn alignment_stats(before: (&Tensor, &Tensor), after: (&Tensor, &Tensor)) -> Result<AlignmentReport> {
    if before.0.shape() != after.0.shape() {
        return Err(dim_err("alignment", "before/after grids differ in extent"));
    }
    Ok(AlignmentReport {
        before: mean_cosine(before.0, before.1)?,
        after: mean_cosine(after.0, after.1)?,
    })
}
