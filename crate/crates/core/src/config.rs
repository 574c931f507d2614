//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid config. Unknown keys, duplicate keys and bad
//! values are errors that name the key and the line.
//!
//! The config hash is the SHA-256 of the canonical rendering produced by
//! [`RunConfig::to_text`], so two files that differ only in comments,
//! ordering or omitted defaults hash the same.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::ablation::AblationGrid;
use crate::cit::CitConfig;
use crate::error::{Error, Result};
use crate::fusion::{FuserKind, FusionConfig};
use crate::head::FocalConfig;
use crate::model::ModelConfig;
use crate::scenes::SceneSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub cit_enabled: bool,
    pub cit_heads: usize,
    /// Per-head width; `None` means the feature width C.
    pub cit_head_dim: Option<usize>,
    /// MLP hidden width; `None` means 2C.
    pub cit_mlp_hidden: Option<usize>,
    pub cit_depth: usize,
    pub cit_positional: bool,
    pub fuser: FuserKind,
    pub gate_reduction: Option<usize>,
    pub train: TrainConfig,
    pub focal: FocalConfig,
    pub ablation_seeds: Vec<u64>,
    pub eval_scenes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneSpec {
                seed: 1,
                ..SceneSpec::desk()
            },
            cit_enabled: true,
            cit_heads: 4,
            cit_head_dim: None,
            cit_mlp_hidden: None,
            cit_depth: 1,
            cit_positional: true,
            fuser: FuserKind::DualDynamic,
            gate_reduction: None,
            train: TrainConfig::default(),
            focal: FocalConfig::default(),
            ablation_seeds: vec![1, 2, 3],
            eval_scenes: 64,
        }
    }
}

fn on_off(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_else(|| "none".into())
}

struct Parser {
    line: usize,
    key: String,
}

impl Parser {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Config {
            line: self.line,
            key: self.key.clone(),
            msg: msg.into(),
        }
    }

    fn num<T: FromStr>(&self, v: &str) -> Result<T> {
        v.parse().map_err(|_| self.err(format!("cannot parse `{v}`")))
    }

    fn float(&self, v: &str) -> Result<f64> {
        let x: f64 = self.num(v)?;
        if !x.is_finite() {
            return Err(self.err(format!("`{v}` is not finite")));
        }
        Ok(x)
    }

    fn flag(&self, v: &str) -> Result<bool> {
        match v {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            _ => Err(self.err(format!("expected on|off, got `{v}`"))),
        }
    }

    fn maybe<T>(&self, v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
        if v == "none" {
            Ok(None)
        } else {
            f(v).map(Some)
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                key: line.to_owned(),
                msg: "expected key = value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let p = Parser {
                line: i + 1,
                key: key.to_owned(),
            };
            if !seen.insert(key.to_owned()) {
                return Err(p.err("duplicate key"));
            }
            cfg.set(&p, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, p: &Parser, key: &str, v: &str) -> Result<()> {
        let s = &mut self.scene;
        let t = &mut self.train;
        match key {
            "scene.h" => s.h = p.num(v)?,
            "scene.w" => s.w = p.num(v)?,
            "scene.c" => s.c = p.num(v)?,
            "scene.k" => s.k = p.num(v)?,
            "scene.seed" => s.seed = p.num(v)?,
            "scene.gap" => s.gap = p.float(v)?,
            "scene.cam_noise" => s.cam_noise = p.float(v)?,
            "scene.lidar_noise" => s.lidar_noise = p.float(v)?,
            "scene.lidar_dropout" => s.lidar_dropout = p.float(v)?,
            "scene.cam_blur" => s.cam_blur = p.num(v)?,
            "scene.degradation" => s.degradation = p.float(v)?,
            "cit.enabled" => self.cit_enabled = p.flag(v)?,
            "cit.heads" => self.cit_heads = p.num(v)?,
            "cit.head_dim" => self.cit_head_dim = p.maybe(v, |x| p.num(x))?,
            "cit.mlp_hidden" => self.cit_mlp_hidden = p.maybe(v, |x| p.num(x))?,
            "cit.depth" => self.cit_depth = p.num(v)?,
            "cit.positional" => self.cit_positional = p.flag(v)?,
            "fuser" => self.fuser = v.parse().map_err(|e: Error| p.err(e.to_string()))?,
            "fuser.gate_reduction" => self.gate_reduction = p.maybe(v, |x| p.num(x))?,
            "train.steps" => t.steps = p.num(v)?,
            "train.batch_size" => t.batch_size = p.num(v)?,
            "train.lr" => t.lr = p.float(v)?,
            "train.momentum" => t.momentum = p.float(v)?,
            "train.seed" => t.seed = p.num(v)?,
            "train.grad_clip" => t.grad_clip = p.maybe(v, |x| p.float(x))?,
            "train.eval_every" => t.eval_every = p.num(v)?,
            "train.eval_scenes" => t.eval_scenes = p.num(v)?,
            "loss.gamma" => self.focal.gamma = p.float(v)?,
            "loss.alpha" => self.focal.alpha = p.maybe(v, |x| p.float(x))?,
            "ablation.seeds" => {
                self.ablation_seeds = v
                    .split(',')
                    .map(|x| p.num(x.trim()))
                    .collect::<Result<_>>()?;
            }
            "eval.scenes" => self.eval_scenes = p.num(v)?,
            _ => return Err(p.err("unknown key")),
        }
        Ok(())
    }

    /// Semantic checks, reported against line 0 (the config as a whole).
    pub fn validate(&self) -> Result<()> {
        let whole = |key: &str, e: Error| Error::Config {
            line: 0,
            key: key.into(),
            msg: e.to_string(),
        };
        self.scene.validate().map_err(|e| whole("scene", e))?;
        self.train.validate().map_err(|e| whole("train", e))?;
        if self.cit_enabled {
            self.cit_config().validate().map_err(|e| whole("cit", e))?;
        }
        if self.eval_scenes == 0 {
            return Err(whole("eval.scenes", Error::Input("must be at least 1".into())));
        }
        if self.ablation_seeds.is_empty() {
            return Err(whole("ablation.seeds", Error::Input("no seeds given".into())));
        }
        if !(self.focal.gamma >= 0.0) || self.focal.alpha.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(whole("loss", Error::Input("need gamma ≥ 0 and alpha in [0, 1]".into())));
        }
        Ok(())
    }

    /// Canonical rendering: every key, fixed order, no comments.
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let t = &self.train;
        let seeds: Vec<String> = self.ablation_seeds.iter().map(u64::to_string).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("scene.h", s.h.to_string()),
            ("scene.w", s.w.to_string()),
            ("scene.c", s.c.to_string()),
            ("scene.k", s.k.to_string()),
            ("scene.seed", s.seed.to_string()),
            ("scene.gap", s.gap.to_string()),
            ("scene.cam_noise", s.cam_noise.to_string()),
            ("scene.lidar_noise", s.lidar_noise.to_string()),
            ("scene.lidar_dropout", s.lidar_dropout.to_string()),
            ("scene.cam_blur", s.cam_blur.to_string()),
            ("scene.degradation", s.degradation.to_string()),
            ("cit.enabled", on_off(self.cit_enabled).into()),
            ("cit.heads", self.cit_heads.to_string()),
            ("cit.head_dim", opt(&self.cit_head_dim)),
            ("cit.mlp_hidden", opt(&self.cit_mlp_hidden)),
            ("cit.depth", self.cit_depth.to_string()),
            ("cit.positional", on_off(self.cit_positional).into()),
            ("fuser", self.fuser.to_string()),
            ("fuser.gate_reduction", opt(&self.gate_reduction)),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.grad_clip", opt(&t.grad_clip)),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.eval_scenes", t.eval_scenes.to_string()),
            ("loss.gamma", self.focal.gamma.to_string()),
            ("loss.alpha", opt(&self.focal.alpha)),
            ("ablation.seeds", seeds.join(",")),
            ("eval.scenes", self.eval_scenes.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn cit_config(&self) -> CitConfig {
        let s = &self.scene;
        let mut c = CitConfig::for_grid(s.h, s.w, s.c, self.cit_heads);
        if let Some(d) = self.cit_head_dim {
            c.head_dim = d;
        }
        if let Some(m) = self.cit_mlp_hidden {
            c.mlp_hidden = m;
        }
        c.depth = self.cit_depth;
        c.positional = self.cit_positional;
        c
    }

    pub fn model_config(&self) -> ModelConfig {
        let s = &self.scene;
        ModelConfig {
            h: s.h,
            w: s.w,
            c: s.c,
            k: s.k,
            cit: self.cit_enabled.then(|| self.cit_config()),
            fuser: self.fuser,
            fusion: FusionConfig {
                c: s.c,
                gate_reduction: self.gate_reduction,
            },
            focal: self.focal,
        }
    }

    /// Uses one seed for both the scene stream and the parameter init.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn ablation_grid(&self) -> AblationGrid {
        let mut grid = AblationGrid::standard(self.scene.clone(), self.train.clone(), self.ablation_seeds.clone());
        grid.cit = self.cit_config();
        grid.fusion.gate_reduction = self.gate_reduction;
        grid.focal = self.focal;
        grid.eval_scenes = self.eval_scenes;
        grid
    }
}
