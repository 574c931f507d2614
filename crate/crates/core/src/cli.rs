//! Command implementations behind the `bevfuse` binary.
//!
//! Every command takes a resolved [`RunConfig`] and writes its outputs
//! atomically. CSV outputs start with a `# config_hash=… seed=…` line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ablation::{run_ablation, AblationResults};
use crate::checkpoint::Checkpoint;
use crate::cit::{alignment_stats, AlignmentReport, CorrelationMatrix, RowGroupMass};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::FuserKind;
use crate::graph::Graph;
use crate::io::{atomic_write, with_provenance};
use crate::metrics::EvalReport;
use crate::model::{evaluate, Model, Trainable};
use crate::params::ParamStore;
use crate::scenes::{export_scenes, Scene, SceneGenerator};
use crate::suite::{gradcheck_suite, suite_csv, Component};
use crate::trainer::{curve_csv, train};

pub const CHECKPOINT_FILE: &str = "checkpoint.bevf";
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub fuser: Option<FuserKind>,
    pub cit: Option<bool>,
}

pub fn resolve_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = ov.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(f) = ov.fuser {
        cfg.fuser = f;
    }
    if let Some(c) = ov.cit {
        cfg.cit_enabled = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn csv_out(cfg: &RunConfig, body: &str) -> String {
    with_provenance(&cfg.hash_hex(), &[cfg.train.seed], body)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    pub stream_hash: String,
}

/// Trains from fresh init; writes the checkpoint, `curve.csv` and the
/// canonical `config.txt` into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let model = Model::new(cfg.model_config())?;
    let data = SceneGenerator::new(cfg.scene.clone())?;
    let result = train(&model, model.init_params(cfg.train.seed), &data, &cfg.train)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    Checkpoint::new(cfg.hash(), result.steps as u64, result.params).save(&ckpt_path)?;
    atomic_write(&out.join("curve.csv"), csv_out(cfg, &curve_csv(&result.curve)).as_bytes())?;
    atomic_write(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        final_loss: result.curve.last().map_or(f64::NAN, |p| p.loss),
        stream_hash: result.stream_hash,
    })
}

/// Loads a checkpoint and checks it against the model `cfg` describes.
pub fn load_for(cfg: &RunConfig, path: &Path) -> Result<(Model, ParamStore)> {
    let model = Model::new(cfg.model_config())?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_compatible(&model.init_params(cfg.train.seed))?;
    if ckpt.config_hash != cfg.hash() {
        log::warn!(
            "checkpoint was written under config {}, evaluating under {}",
            hex::encode(ckpt.config_hash),
            cfg.hash_hex()
        );
    }
    Ok((model, ckpt.params))
}

pub fn heldout(cfg: &RunConfig) -> Result<Vec<Scene>> {
    Ok(SceneGenerator::new(cfg.scene.clone())?.heldout(cfg.eval_scenes))
}

pub fn eval_report(cfg: &RunConfig, model: &Model, params: &ParamStore) -> Result<EvalReport> {
    evaluate(model, params, &heldout(cfg)?)
}

/// Evaluates the checkpoint on held-out scenes; returns the CSV text.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<String> {
    let (model, params) = load_for(cfg, checkpoint)?;
    Ok(csv_out(cfg, &eval_report(cfg, &model, &params)?.to_csv()))
}

/// Returns the suite CSV and whether every group is under tolerance.
pub fn cmd_gradcheck(component: Component, seed: u64) -> Result<(String, bool)> {
    let entries = gradcheck_suite(component, seed)?;
    let ok = entries.iter().all(|e| e.max_rel_err < GRADCHECK_TOL);
    Ok((suite_csv(&entries), ok))
}

/// Runs both ablation tables and writes `components.csv`, `fusers.csv`
/// and the per-run `runs.csv` into `out`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<AblationResults> {
    let grid = cfg.ablation_grid();
    let results = run_ablation(&grid)?;
    let hash = cfg.hash_hex();
    let seeds = &results.seeds;
    let write = |name: &str, body: String| atomic_write(&out.join(name), with_provenance(&hash, seeds, &body).as_bytes());
    write("components.csv", results.component_table().to_csv(seeds))?;
    write("fusers.csv", results.fuser_table().to_csv(seeds))?;
    let mut runs = String::from("cit,fuser,seed,miou,stream_hash\n");
    for ((cell, seed), r) in &results.runs {
        let cit = if cell.cit { "on" } else { "off" };
        match r {
            Ok(r) => writeln!(runs, "{cit},{},{seed},{:.6},{}", cell.fuser, r.miou, r.stream_hash),
            Err(_) => writeln!(runs, "{cit},{},{seed},NA,NA", cell.fuser),
        }
        .expect("writing to a String");
    }
    write("runs.csv", runs)?;
    Ok(results)
}

/// Attention-block masses and cross-modal alignment for one scene.
#[derive(Clone, Debug)]
pub struct Diagnostic {
    pub scene: u64,
    pub camera_rows: RowGroupMass,
    pub lidar_rows: RowGroupMass,
    pub alignment: AlignmentReport,
}

/// Runs the CIT part of `model` on each scene. Fails when the model has
/// no CIT.
pub fn diagnose(model: &Model, params: &ParamStore, scenes: &[Scene]) -> Result<Vec<Diagnostic>> {
    let cit = model
        .cit()
        .ok_or_else(|| Error::Input("diagnose needs a model with the CIT enabled".into()))?;
    let hw = cit.config().tokens_per_modality();
    scenes
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let cam = g.constant(s.cam.clone());
            let lidar = g.constant(s.lidar.clone());
            let out = cit.forward(&mut g, params, cam, lidar)?;
            let blocks = CorrelationMatrix::from_graph(&g, &out.attention, hw)?.blocks()?;
            let alignment = alignment_stats((&s.cam, &s.lidar), (g.value(out.cam), g.value(out.lidar)))?;
            Ok(Diagnostic {
                scene: s.index,
                camera_rows: blocks.camera_rows(),
                lidar_rows: blocks.lidar_rows(),
                alignment,
            })
        })
        .collect()
}

/// Held-out means of the per-scene diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticSummary {
    pub camera_rows: RowGroupMass,
    pub lidar_rows: RowGroupMass,
    pub cos_before: f64,
    pub cos_after: f64,
}

pub fn summarize(rows: &[Diagnostic]) -> Result<DiagnosticSummary> {
    if rows.is_empty() {
        return Err(Error::Input("no scenes to diagnose".into()));
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&Diagnostic) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(DiagnosticSummary {
        camera_rows: RowGroupMass {
            intra: mean(&|d| d.camera_rows.intra),
            inter: mean(&|d| d.camera_rows.inter),
        },
        lidar_rows: RowGroupMass {
            intra: mean(&|d| d.lidar_rows.intra),
            inter: mean(&|d| d.lidar_rows.inter),
        },
        cos_before: mean(&|d| d.alignment.before.mean),
        cos_after: mean(&|d| d.alignment.after.mean),
    })
}

/// `step,row_group,intra_mass,inter_mass`
pub fn correlation_csv(step: u64, s: &DiagnosticSummary) -> String {
    let mut out = String::from("step,row_group,intra_mass,inter_mass\n");
    for (group, m) in [("camera", s.camera_rows), ("lidar", s.lidar_rows)] {
        let _ = writeln!(out, "{step},{group},{:.6},{:.6}", m.intra, m.inter);
    }
    out
}

/// `step,cos_before,cos_after`
pub fn alignment_csv(step: u64, s: &DiagnosticSummary) -> String {
    format!("step,cos_before,cos_after\n{step},{:.6},{:.6}\n", s.cos_before, s.cos_after)
}

/// Returns the correlation-mass CSV and the alignment CSV.
pub fn cmd_diagnose(cfg: &RunConfig, checkpoint: &Path) -> Result<(String, String)> {
    let (model, params) = load_for(cfg, checkpoint)?;
    let step = Checkpoint::load(checkpoint)?.step;
    let summary = summarize(&diagnose(&model, &params, &heldout(cfg)?)?)?;
    Ok((
        csv_out(cfg, &correlation_csv(step, &summary)),
        csv_out(cfg, &alignment_csv(step, &summary)),
    ))
}

/// Writes `count` training scenes in the binary scene format.
pub fn cmd_export(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    let data = SceneGenerator::new(cfg.scene.clone())?;
    let scenes: Vec<Scene> = data.scenes(0..count as u64).collect();
    let mut buf = Vec::new();
    export_scenes(&mut buf, &cfg.scene, &scenes)?;
    atomic_write(out, &buf)
}
