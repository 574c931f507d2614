//! Deterministic mini-batch SGD with momentum.
//!
//! Step `s` consumes scenes `s·B .. (s+1)·B` of the generator. Per-scene
//! gradients are computed in parallel and summed in scene order, so the
//! result does not depend on the thread count. The update is
//!
//! ```text
//! v ← μ·v + g
//! θ ← θ − lr·v
//! ```
//!
//! with `g` the batch-mean gradient, optionally rescaled to a maximum
//! global L2 norm.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{evaluate, Trainable};
use crate::params::ParamStore;
use crate::scenes::{Scene, SceneGenerator};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Evaluate on held-out scenes every this many steps; 0 disables.
    pub eval_every: usize,
    pub eval_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 4,
            lr: 1e-2,
            momentum: 0.9,
            seed: 1,
            grad_clip: None,
            eval_every: 0,
            eval_scenes: 32,
        }
    }
}

impl TrainConfig {
    /// Schedule used for the desk ablations: single-scene steps with a
    /// larger rate and clipping.
    pub fn desk_ablation() -> Self {
        TrainConfig {
            steps: 2400,
            batch_size: 1,
            lr: 0.1,
            grad_clip: Some(5.0),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Input("steps and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Input(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Input(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Input(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub curve: Vec<CurvePoint>,
    /// SHA-256 over every training scene consumed, in order.
    pub stream_hash: String,
    pub steps: usize,
}

/// SGD with momentum over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: ParamStore,
}

impl Sgd {
    pub fn new(params: &ParamStore, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &ParamStore {
        &self.velocity
    }

    /// `grads` must be in the store's parameter order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        for (((_, p), (_, v)), g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grads) {
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

fn hash_scene(h: &mut Sha256, s: &Scene) {
    h.update(s.index.to_le_bytes());
    for t in [&s.cam, &s.lidar, &s.masks] {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
}

/// Loss and per-parameter gradients for one scene, in store order.
pub fn scene_gradients<M: Trainable + ?Sized>(
    model: &M,
    params: &ParamStore,
    scene: &Scene,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let (loss, _) = model.loss(&mut g, params, scene)?;
    let value = g.value(loss).data()[0];
    g.backward(loss)?;
    let grads = params
        .iter()
        .map(|(name, t)| g.param_grad(name).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// Batch-mean loss and gradient.
pub fn batch_gradients<M: Trainable + ?Sized>(
    model: &M,
    params: &ParamStore,
    batch: &[Scene],
) -> Result<(f64, Vec<Tensor>)> {
    let per_scene: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| scene_gradients(model, params, s))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for (l, grads) in &per_scene {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for t in &mut total {
        for v in t.data_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, total))
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Trains `model` from `init` on the generator's training stream.
pub fn train<M: Trainable + ?Sized>(
    model: &M,
    init: ParamStore,
    data: &SceneGenerator,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init;
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum);
    let mut hasher = Sha256::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    let heldout = if cfg.eval_every > 0 {
        data.heldout(cfg.eval_scenes)
    } else {
        Vec::new()
    };

    for step in 0..cfg.steps {
        let first = (step * cfg.batch_size) as u64;
        let batch: Vec<Scene> = data.scenes(first..first + cfg.batch_size as u64).collect();
        for s in &batch {
            hash_scene(&mut hasher, s);
        }
        let (loss, mut grads) = batch_gradients(model, &params, &batch).map_err(|e| match e {
            Error::NonFinite { op } => Error::Training {
                step,
                msg: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("loss is {loss}"),
            });
        }
        if let Some(max) = cfg.grad_clip {
            let norm = global_norm(&grads);
            if norm > max {
                let s = max / norm;
                for t in &mut grads {
                    for v in t.data_mut() {
                        *v *= s;
                    }
                }
            }
        }
        opt.step(&mut params, &grads);
        if params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Training {
                step,
                msg: "parameters became non-finite".into(),
            });
        }
        let miou = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            Some(evaluate(model, &params, &heldout)?.miou)
        } else {
            None
        };
        curve.push(CurvePoint {
            step: step + 1,
            loss,
            miou,
        });
    }

    Ok(TrainOutcome {
        params,
        curve,
        stream_hash: hex::encode(hasher.finalize()),
        steps: cfg.steps,
    })
}

/// `step,loss,miou` rows.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,loss,miou\n");
    for p in curve {
        let miou = p.miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{:.10e},{}\n", p.step, p.loss, miou));
    }
    s
}
