//! Component and fuser ablations over several seeds.
//!
//! For seed `s` every cell uses scene seed `s` and init seed `s`, so all
//! cells of one seed see the identical scene stream. The stream hashes are
//! recorded and checked.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::cit::CitConfig;
use crate::error::{Error, Result};
use crate::fusion::{FuserKind, FusionConfig};
use crate::head::FocalConfig;
use crate::model::{evaluate, Modality, Model, ModelConfig, Probe, Trainable};
use crate::params::ParamStore;
use crate::scenes::{Scene, SceneGenerator, SceneSpec};
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub cit: bool,
    pub fuser: FuserKind,
}

impl Cell {
    pub const fn new(cit: bool, fuser: FuserKind) -> Self {
        Cell { cit, fuser }
    }
}

/// Rows of the component table: label and cell.
pub const COMPONENT_ROWS: [(&str, Cell); 4] = [
    ("baseline", Cell::new(false, FuserKind::Conv)),
    ("+DDF", Cell::new(false, FuserKind::DualDynamic)),
    ("+CIT", Cell::new(true, FuserKind::Conv)),
    ("full", Cell::new(true, FuserKind::DualDynamic)),
];

/// Rows of the fuser table (no CIT).
pub const FUSER_ROWS: [(&str, Cell); 4] = [
    ("conv", Cell::new(false, FuserKind::Conv)),
    ("add", Cell::new(false, FuserKind::Add)),
    ("dynamic", Cell::new(false, FuserKind::Dynamic)),
    ("ddf", Cell::new(false, FuserKind::DualDynamic)),
];

#[derive(Clone, Debug)]
pub struct AblationGrid {
    pub spec: SceneSpec,
    pub train: TrainConfig,
    /// Used by every cell with the CIT switched on.
    pub cit: CitConfig,
    pub fusion: FusionConfig,
    pub focal: FocalConfig,
    pub seeds: Vec<u64>,
    pub eval_scenes: usize,
    pub cells: Vec<Cell>,
}

impl AblationGrid {
    /// Both tables on the desk spec with the desk ablation schedule.
    pub fn desk(seeds: Vec<u64>) -> Self {
        Self::standard(SceneSpec::desk(), TrainConfig::desk_ablation(), seeds)
    }

    /// Both tables over `seeds`.
    pub fn standard(spec: SceneSpec, train: TrainConfig, seeds: Vec<u64>) -> Self {
        let mut cells: Vec<Cell> = COMPONENT_ROWS.iter().chain(&FUSER_ROWS).map(|r| r.1).collect();
        cells.sort();
        cells.dedup();
        AblationGrid {
            cit: CitConfig::for_grid(spec.h, spec.w, spec.c, 4),
            fusion: FusionConfig::new(spec.c),
            focal: FocalConfig::default(),
            spec,
            train,
            seeds,
            eval_scenes: 64,
            cells,
        }
    }

    pub fn model_config(&self, cell: Cell) -> ModelConfig {
        ModelConfig {
            h: self.spec.h,
            w: self.spec.w,
            c: self.spec.c,
            k: self.spec.k,
            cit: cell.cit.then(|| self.cit.clone()),
            fuser: cell.fuser,
            fusion: self.fusion.clone(),
            focal: self.focal,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub miou: f64,
    pub stream_hash: String,
}

#[derive(Clone, Debug, Default)]
pub struct AblationResults {
    /// (cell, seed) → outcome; failed runs hold the error text.
    pub runs: BTreeMap<(Cell, u64), std::result::Result<RunResult, String>>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub cell: Cell,
    pub per_seed: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub rows: Vec<TableRow>,
    pub complete: bool,
}

impl Table {
    pub fn mean_of(&self, label: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label).and_then(|r| r.mean)
    }

    pub fn to_csv(&self, seeds: &[u64]) -> String {
        let mut s = String::from("method,cit,fuser");
        for seed in seeds {
            let _ = write!(s, ",seed{seed}");
        }
        s.push_str(",mean,sd\n");
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.label, if r.cell.cit { "on" } else { "off" }, r.cell.fuser);
            for v in &r.per_seed {
                let _ = write!(s, ",{}", fmt(*v));
            }
            let _ = writeln!(s, ",{},{}", fmt(r.mean), fmt(r.sd));
        }
        if !self.complete {
            s.push_str("# incomplete\n");
        }
        s
    }
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl AblationResults {
    pub fn table(&self, rows: &[(&str, Cell)]) -> Table {
        let mut complete = true;
        let rows = rows
            .iter()
            .map(|&(label, cell)| {
                let per_seed: Vec<Option<f64>> = self
                    .seeds
                    .iter()
                    .map(|&s| match self.runs.get(&(cell, s)) {
                        Some(Ok(r)) => Some(r.miou),
                        _ => None,
                    })
                    .collect();
                let ok: Vec<f64> = per_seed.iter().flatten().copied().collect();
                complete &= ok.len() == per_seed.len();
                let (mean, sd) = if ok.is_empty() {
                    (None, None)
                } else {
                    let (m, s) = mean_sd(&ok);
                    (Some(m), Some(s))
                };
                TableRow {
                    label: label.to_owned(),
                    cell,
                    per_seed,
                    mean,
                    sd,
                }
            })
            .collect();
        Table { rows, complete }
    }

    pub fn component_table(&self) -> Table {
        self.table(&COMPONENT_ROWS)
    }

    pub fn fuser_table(&self) -> Table {
        self.table(&FUSER_ROWS)
    }

    /// True when every successful run of a seed consumed the same stream.
    pub fn streams_consistent(&self) -> bool {
        self.seeds.iter().all(|&seed| {
            let mut hashes = self
                .runs
                .iter()
                .filter(|((_, s), _)| *s == seed)
                .filter_map(|(_, r)| r.as_ref().ok().map(|r| &r.stream_hash));
            match hashes.next() {
                Some(first) => hashes.all(|h| h == first),
                None => true,
            }
        })
    }
}

/// Trains and evaluates one cell for one seed.
pub fn run_cell(grid: &AblationGrid, cell: Cell, seed: u64) -> Result<RunResult> {
    Ok(train_cell(grid, cell, seed)?.result)
}

/// A trained cell together with its model and held-out scenes.
#[derive(Clone, Debug)]
pub struct TrainedCell {
    pub model: Model,
    pub params: ParamStore,
    pub heldout: Vec<Scene>,
    pub result: RunResult,
}

pub fn train_cell(grid: &AblationGrid, cell: Cell, seed: u64) -> Result<TrainedCell> {
    let spec = SceneSpec { seed, ..grid.spec.clone() };
    let data = SceneGenerator::new(spec)?;
    let model = Model::new(grid.model_config(cell))?;
    let cfg = TrainConfig {
        seed,
        ..grid.train.clone()
    };
    let out = train(&model, model.init_params(seed), &data, &cfg)?;
    let heldout = data.heldout(grid.eval_scenes);
    let report = evaluate(&model, &out.params, &heldout)?;
    Ok(TrainedCell {
        model,
        params: out.params,
        heldout,
        result: RunResult {
            miou: report.miou,
            stream_hash: out.stream_hash,
        },
    })
}

/// Runs every cell for every seed. Failed cells are recorded, not fatal.
pub fn run_ablation(grid: &AblationGrid) -> Result<AblationResults> {
    if grid.seeds.len() < 3 {
        return Err(Error::Input(format!(
            "ablation needs at least 3 seeds, got {}",
            grid.seeds.len()
        )));
    }
    let mut results = AblationResults {
        runs: BTreeMap::new(),
        seeds: grid.seeds.clone(),
    };
    for &seed in &grid.seeds {
        for &cell in &grid.cells {
            let r = run_cell(grid, cell, seed).map_err(|e| e.to_string());
            if let Err(e) = &r {
                log::warn!("cell {cell:?} seed {seed} failed: {e}");
            }
            results.runs.insert((cell, seed), r);
        }
    }
    Ok(results)
}

/// Held-out mIoU of single-modality probes, one value per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBound {
    pub camera: Vec<f64>,
    pub lidar: Vec<f64>,
}

impl ModalityBound {
    pub fn camera_mean(&self) -> f64 {
        mean_sd(&self.camera).0
    }

    pub fn lidar_mean(&self) -> f64 {
        mean_sd(&self.lidar).0
    }

    /// The better of the two modality means.
    pub fn best(&self) -> f64 {
        self.camera_mean().max(self.lidar_mean())
    }
}

/// Trains a segmentation head on each modality alone, with the same
/// schedule and seed discipline as the ablation cells.
pub fn oracle_best_single_modality(
    spec: &SceneSpec,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    eval_scenes: usize,
) -> Result<ModalityBound> {
    if seeds.is_empty() {
        return Err(Error::Input("no seeds given".into()));
    }
    let mut bound = ModalityBound {
        camera: Vec::new(),
        lidar: Vec::new(),
    };
    for &seed in seeds {
        let data = SceneGenerator::new(SceneSpec { seed, ..spec.clone() })?;
        let heldout = data.heldout(eval_scenes);
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        for modality in [Modality::Camera, Modality::Lidar] {
            let probe = Probe::new(modality, spec.c, spec.k);
            let out = train(&probe, probe.init_params(seed), &data, &cfg)?;
            let miou = evaluate(&probe, &out.params, &heldout)?.miou;
            match modality {
                Modality::Camera => bound.camera.push(miou),
                Modality::Lidar => bound.lidar.push(miou),
            }
        }
    }
    Ok(bound)
}
