//! Model assembly: optional CIT → fuser → segmentation head → focal loss.

use crate::cit::{Cit, CitConfig, CitOutput};
use crate::error::{Error, Result};
use crate::fusion::{Fuser, FuserKind, FusionConfig};
use crate::graph::{Graph, NodeId};
use crate::head::{FocalConfig, SegHead};
use crate::metrics::{self, EvalReport, Predictor};
use crate::params::ParamStore;
use crate::rng::{streams, Rng};
use crate::scenes::{Scene, SceneSpec};
use crate::tensor::Tensor;

/// Something with parameters that maps a scene to per-class logits.
pub trait Trainable: Sync {
    fn num_classes(&self) -> usize;

    fn focal(&self) -> FocalConfig;

    /// Fresh parameters drawn from the init stream of `seed`.
    fn init_params(&self, seed: u64) -> ParamStore;

    /// H×W×K logits for one scene.
    fn logits(&self, g: &mut Graph, store: &ParamStore, scene: &Scene) -> Result<NodeId>;

    /// Returns (scalar loss, logits).
    fn loss(&self, g: &mut Graph, store: &ParamStore, scene: &Scene) -> Result<(NodeId, NodeId)> {
        let logits = self.logits(g, store, scene)?;
        let loss = self.focal().apply(g, logits, &scene.masks)?;
        Ok((loss, logits))
    }

    fn predict(&self, store: &ParamStore, scene: &Scene) -> Result<Tensor> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, store, scene)?;
        let p = g.sigmoid(logits)?;
        Ok(g.value(p).clone())
    }
}

struct Bound<'a, M: ?Sized> {
    model: &'a M,
    params: &'a ParamStore,
}

impl<M: Trainable + ?Sized> Predictor<Scene> for Bound<'_, M> {
    fn predict(&self, scene: &Scene) -> Result<Tensor> {
        self.model.predict(self.params, scene)
    }

    fn target<'a>(&self, scene: &'a Scene) -> &'a Tensor {
        &scene.masks
    }
}

/// Dataset-level threshold-swept evaluation of `model` on `scenes`.
pub fn evaluate<M: Trainable + ?Sized>(model: &M, params: &ParamStore, scenes: &[Scene]) -> Result<EvalReport> {
    metrics::evaluate(&Bound { model, params }, scenes, model.num_classes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub cit: Option<CitConfig>,
    pub fuser: FuserKind,
    pub fusion: FusionConfig,
    pub focal: FocalConfig,
}

impl ModelConfig {
    pub fn for_spec(spec: &SceneSpec, fuser: FuserKind, cit: bool) -> Self {
        ModelConfig {
            h: spec.h,
            w: spec.w,
            c: spec.c,
            k: spec.k,
            cit: cit.then(|| CitConfig::for_grid(spec.h, spec.w, spec.c, 4)),
            fuser,
            fusion: FusionConfig::new(spec.c),
            focal: FocalConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    cit: Option<Cit>,
    fuser: Fuser,
    head: SegHead,
}

#[derive(Clone, Debug)]
pub struct ModelForward {
    pub cit: Option<CitOutput>,
    pub fused: NodeId,
    pub logits: NodeId,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.fusion.c != cfg.c {
            return Err(Error::Input(format!(
                "fusion width {} differs from feature width {}",
                cfg.fusion.c, cfg.c
            )));
        }
        let cit = match &cfg.cit {
            Some(cc) => {
                if (cc.h, cc.w, cc.c) != (cfg.h, cfg.w, cfg.c) {
                    return Err(Error::Input(format!(
                        "CIT grid {}×{}×{} differs from scene grid {}×{}×{}",
                        cc.h, cc.w, cc.c, cfg.h, cfg.w, cfg.c
                    )));
                }
                Some(Cit::new(cc.clone())?)
            }
            None => None,
        };
        let fuser = Fuser::new(cfg.fuser, cfg.fusion.clone())?;
        let head = SegHead::new(cfg.c, cfg.k);
        Ok(Model { cfg, cit, fuser, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn cit(&self) -> Option<&Cit> {
        self.cit.as_ref()
    }

    pub fn fuser(&self) -> &Fuser {
        &self.fuser
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cam: NodeId, lidar: NodeId) -> Result<ModelForward> {
        let (cit, cam_f, lidar_f) = match &self.cit {
            Some(cit) => {
                let out = cit.forward(g, store, cam, lidar)?;
                let (c, l) = (out.cam, out.lidar);
                (Some(out), c, l)
            }
            None => (None, cam, lidar),
        };
        let fused = self.fuser.forward(g, store, cam_f, lidar_f)?;
        let logits = self.head.forward(g, store, fused)?;
        Ok(ModelForward { cit, fused, logits })
    }
}

impl Trainable for Model {
    fn num_classes(&self) -> usize {
        self.cfg.k
    }

    fn focal(&self) -> FocalConfig {
        self.cfg.focal
    }

    fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = Rng::new(seed, streams::INIT);
        let mut store = ParamStore::new();
        if let Some(cit) = &self.cit {
            cit.init_params(&mut store, &mut rng);
        }
        self.fuser.init_params(&mut store, &mut rng);
        self.head.init_params(&mut store, &mut rng);
        store
    }

    fn logits(&self, g: &mut Graph, store: &ParamStore, scene: &Scene) -> Result<NodeId> {
        let cam = g.constant(scene.cam.clone());
        let lidar = g.constant(scene.lidar.clone());
        Ok(self.forward(g, store, cam, lidar)?.logits)
    }
}

pub use crate::scenes::Modality;

/// Segmentation head trained on one modality alone.
#[derive(Clone, Debug)]
pub struct Probe {
    pub modality: Modality,
    head: SegHead,
    focal: FocalConfig,
}

impl Probe {
    pub fn new(modality: Modality, c: usize, k: usize) -> Self {
        Probe {
            modality,
            head: SegHead::with_prefix("probe", c, c, k),
            focal: FocalConfig::default(),
        }
    }
}

impl Trainable for Probe {
    fn num_classes(&self) -> usize {
        self.head.k
    }

    fn focal(&self) -> FocalConfig {
        self.focal
    }

    fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.head.init_params(&mut store, &mut Rng::new(seed, streams::INIT));
        store
    }

    fn logits(&self, g: &mut Graph, store: &ParamStore, scene: &Scene) -> Result<NodeId> {
        let x = match self.modality {
            Modality::Camera => &scene.cam,
            Modality::Lidar => &scene.lidar,
        };
        let x = g.constant(x.clone());
        self.head.forward(g, store, x)
    }
}
