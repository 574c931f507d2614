//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. The ablation criteria train the desk grid
//! and take most of the runtime.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use bevfuse::ablation::{train_cell, AblationGrid, AblationResults, Cell, COMPONENT_ROWS};
use bevfuse::checkpoint::Checkpoint;
use bevfuse::cit::{Cit, CitConfig, CorrelationMatrix};
use bevfuse::cli::{self, diagnose, summarize};
use bevfuse::config::RunConfig;
use bevfuse::fusion::{self, Fuser, FuserKind, FusionConfig};
use bevfuse::graph::Graph;
use bevfuse::metrics::iou_sweep;
use bevfuse::params::ParamStore;
use bevfuse::rng::Rng;
use bevfuse::suite::{gradcheck_suite, Component};
use bevfuse::Tensor;
use common::oracles::{self, bce, brute_force_sweep, CitWeights};
use common::random_tensor;

const SEEDS: [u64; 3] = [1, 2, 3];
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ROW_SUM_TOL: f64 = 1e-10;
const CIT_ORACLE_TOL: f64 = 1e-10;
const DDF_ORACLE_TOL: f64 = 1e-12;
const MIN_FULL_GAIN: f64 = 0.02;
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);
const FOCAL_BCE_TOL: f64 = 1e-12;
const IOU_CASES: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    let mut groups = 0;
    for seed in SEEDS {
        for e in gradcheck_suite(Component::All, seed).expect("suite runs") {
            groups += 1;
            if !(e.max_rel_err < worst.0) {
                worst = (e.max_rel_err, format!("{}:{} seed {seed}", e.check, e.group));
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst.0 < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "{groups} groups, max rel err {:.2e} at {} (< {GRAD_TOL:e}), {:.1}s (< {}s)",
            worst.0,
            worst.1,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

fn cit_block(cfg: CitConfig, seed: u64) -> (Cit, ParamStore) {
    let cit = Cit::new(cfg).unwrap();
    let mut store = ParamStore::new();
    cit.init_params(&mut store, &mut Rng::new(seed, 3));
    (cit, store)
}

/// Returns the flattened outputs, the per-head α and the head average.
fn cit_run(cit: &Cit, store: &ParamStore, cam: &Tensor, lidar: &Tensor) -> (Vec<f64>, Vec<Tensor>, CorrelationMatrix) {
    let mut g = Graph::new();
    let c = g.constant(cam.clone());
    let l = g.constant(lidar.clone());
    let out = cit.forward(&mut g, store, c, l).unwrap();
    let hw = cit.config().tokens_per_modality();
    let cm = CorrelationMatrix::from_graph(&g, &out.attention, hw).unwrap();
    let values = g.value(out.cam).data().iter().chain(g.value(out.lidar).data()).copied().collect();
    let heads = out.attention.iter().map(|&a| g.value(a).clone()).collect();
    (values, heads, cm)
}

fn permute_positions(t: &Tensor, perm: &[usize]) -> Tensor {
    let c = t.shape()[2];
    let mut out = vec![0.0; t.len()];
    for (dst, &src) in perm.iter().enumerate() {
        out[dst * c..(dst + 1) * c].copy_from_slice(&t.data()[src * c..(src + 1) * c]);
    }
    Tensor::new(t.shape(), out).unwrap()
}

fn attention_invariants() -> Outcome {
    let (h, w, c) = (2, 3, 4);
    let hw = h * w;
    let perm = [3, 0, 5, 1, 4, 2];
    let mut row_err: f64 = 0.0;
    let mut mass_err: f64 = 0.0;
    let mut equivariant_err: f64 = 0.0;
    let mut broken_min = f64::INFINITY;
    for seed in SEEDS {
        let (cit, mut store) = cit_block(CitConfig::for_grid(h, w, c, 2), seed);
        let mut rng = Rng::new(seed, 60);
        store.insert(Cit::pos_embed_name(), random_tensor(&[2 * hw, c], &mut rng));
        let cam = random_tensor(&[h, w, c], &mut rng);
        let lidar = random_tensor(&[h, w, c], &mut rng);
        let (pc, pl) = (permute_positions(&cam, &perm), permute_positions(&lidar, &perm));

        let (out, heads, cm) = cit_run(&cit, &store, &cam, &lidar);
        for head in &heads {
            for row in head.data().chunks(2 * hw) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        for row in cm.alpha.data().chunks(2 * hw) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let blocks = cm.blocks().unwrap();
        for (a, b) in blocks.intra_mass.iter().zip(&blocks.inter_mass) {
            mass_err = mass_err.max((a + b - 1.0).abs());
        }

        let permuted_out = |out: &[f64]| {
            let half = out.len() / 2;
            let cam_out = Tensor::new(&[h, w, c], out[..half].to_vec()).unwrap();
            let lidar_out = Tensor::new(&[h, w, c], out[half..].to_vec()).unwrap();
            let mut v = permute_positions(&cam_out, &perm).data().to_vec();
            v.extend_from_slice(permute_positions(&lidar_out, &perm).data());
            v
        };
        let (learned_perm, ..) = cit_run(&cit, &store, &pc, &pl);
        broken_min = broken_min.min(max_abs_diff(&permuted_out(&out), &learned_perm));

        store.get_mut(Cit::pos_embed_name()).unwrap().data_mut().fill(0.0);
        let (zero_out, ..) = cit_run(&cit, &store, &cam, &lidar);
        let (zero_perm, ..) = cit_run(&cit, &store, &pc, &pl);
        equivariant_err = equivariant_err.max(max_abs_diff(&permuted_out(&zero_out), &zero_perm));
    }
    Outcome::new(
        row_err < ROW_SUM_TOL && mass_err < ROW_SUM_TOL && equivariant_err < 1e-12 && broken_min > 1e-6,
        format!(
            "row sum err {row_err:.1e}, block mass err {mass_err:.1e} (< {ROW_SUM_TOL:e}); \
             zero-pos permutation err {equivariant_err:.1e}, learned-pos min deviation {broken_min:.1e}"
        ),
    )
}

fn oracle_weights(cit: &Cit, store: &ParamStore) -> CitWeights {
    let cfg = cit.config();
    let m = |name: &str| {
        let t = store.get(name).unwrap();
        oracles::mat(t.shape()[0], t.shape()[1], t.data())
    };
    let heads = |p: &str| (0..cfg.heads).map(|i| m(&format!("cit.0.{p}.{i}"))).collect();
    CitWeights {
        pos: m(Cit::pos_embed_name()),
        wq: heads("wq"),
        wk: heads("wk"),
        wv: heads("wv"),
        wo: m("cit.0.wo"),
        w1: m("cit.0.mlp.w1"),
        b1: store.get("cit.0.mlp.b1").unwrap().data().to_vec(),
        w2: m("cit.0.mlp.w2"),
        b2: store.get("cit.0.mlp.b2").unwrap().data().to_vec(),
    }
}

fn oracle_equivalence() -> Outcome {
    let mut cit_err: f64 = 0.0;
    let mut ddf_err: f64 = 0.0;
    for seed in SEEDS {
        // Two tokens per modality, four in total.
        let (cit, mut store) = cit_block(CitConfig::for_grid(1, 2, 3, 2), seed);
        let mut rng = Rng::new(seed, 61);
        store.insert(Cit::pos_embed_name(), random_tensor(&[4, 3], &mut rng));
        let cam = random_tensor(&[1, 2, 3], &mut rng);
        let lidar = random_tensor(&[1, 2, 3], &mut rng);
        let (got, ..) = cit_run(&cit, &store, &cam, &lidar);
        let (want, _) = oracles::cit_forward(
            &oracles::mat(2, 3, cam.data()),
            &oracles::mat(2, 3, lidar.data()),
            &oracle_weights(&cit, &store),
        );
        cit_err = cit_err.max(max_abs_diff(&got, &want.concat()));

        let (h, w, c) = (4, 5, 3);
        let f = Fuser::new(FuserKind::DualDynamic, FusionConfig::new(c)).unwrap();
        let mut store = ParamStore::new();
        f.init_params(&mut store, &mut Rng::new(seed, 3));
        for name in [fusion::GATE_W, fusion::GATE_B, fusion::ADAPT_W, fusion::ADAPT_B] {
            for v in store.get_mut(name).unwrap().data_mut() {
                *v = 0.5 * rng.normal();
            }
        }
        let cam = random_tensor(&[h, w, c], &mut rng);
        let lidar = random_tensor(&[h, w, c], &mut rng);
        let mut g = Graph::new();
        let cn = g.constant(cam.clone());
        let ln = g.constant(lidar.clone());
        let out = f.forward(&mut g, &store, cn, ln).unwrap();
        let get = |n: &str| store.get(n).unwrap().data().to_vec();
        let want = oracles::ddf_forward(
            &oracles::grid(h, w, c, cam.data()),
            &oracles::grid(h, w, c, lidar.data()),
            &get(fusion::GATE_W),
            &get(fusion::GATE_B),
            &get(fusion::CONV_K),
            &get(fusion::CONV_B),
            get(fusion::ADAPT_W)[0],
            get(fusion::ADAPT_B)[0],
        );
        ddf_err = ddf_err.max(max_abs_diff(g.value(out).data(), &oracles::flatten(&want)));
    }
    Outcome::new(
        cit_err < CIT_ORACLE_TOL && ddf_err < DDF_ORACLE_TOL,
        format!("CIT max abs diff {cit_err:.1e} (< {CIT_ORACLE_TOL:e}), DDF {ddf_err:.1e} (< {DDF_ORACLE_TOL:e})"),
    )
}

struct AblationRun {
    results: AblationResults,
    component_time: Duration,
    alignment: Vec<(f64, f64)>,
}

fn run_desk_ablation() -> AblationRun {
    let mut grid = AblationGrid::desk(SEEDS.to_vec());
    grid.cells = COMPONENT_ROWS.iter().map(|r| r.1).collect();
    let full = COMPONENT_ROWS[3].1;
    let mut runs = BTreeMap::new();
    let mut alignment = Vec::new();
    let start = Instant::now();
    for seed in SEEDS {
        for &cell in &grid.cells {
            let t = Instant::now();
            let trained = train_cell(&grid, cell, seed);
            if let Ok(tc) = &trained {
                eprintln!(
                    "  cell cit={} fuser={} seed {seed}: mIoU {:.4} ({:.0}s)",
                    cell.cit,
                    cell.fuser,
                    tc.result.miou,
                    t.elapsed().as_secs_f64()
                );
            }
            if cell == full {
                if let Ok(tc) = &trained {
                    let s = summarize(&diagnose(&tc.model, &tc.params, &tc.heldout).unwrap()).unwrap();
                    alignment.push((s.cos_before, s.cos_after));
                }
            }
            runs.insert((cell, seed), trained.map(|t| t.result).map_err(|e| e.to_string()));
        }
    }
    AblationRun {
        results: AblationResults {
            runs,
            seeds: SEEDS.to_vec(),
        },
        component_time: start.elapsed(),
        alignment,
    }
}

fn mean_of(run: &AblationRun, cell: Cell) -> Option<f64> {
    let v: Option<Vec<f64>> = SEEDS
        .iter()
        .map(|s| run.results.runs.get(&(cell, *s)).and_then(|r| r.as_ref().ok()).map(|r| r.miou))
        .collect();
    v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn component_direction(run: &AblationRun) -> Outcome {
    let table = run.results.component_table();
    eprint!("{}", table.to_csv(&run.results.seeds));
    let means: Vec<Option<f64>> = COMPONENT_ROWS.iter().map(|r| mean_of(run, r.1)).collect();
    let (Some(base), Some(ddf), Some(cit), Some(full)) = (means[0], means[1], means[2], means[3]) else {
        return Outcome::new(false, "incomplete table");
    };
    let ordered = full >= ddf && full >= cit && ddf >= base && cit >= base;
    let gain = full - base;
    let secs = run.component_time.as_secs_f64();
    Outcome::new(
        table.complete && ordered && gain >= MIN_FULL_GAIN && run.component_time < ABLATION_BUDGET,
        format!(
            "baseline {base:.4}, +DDF {ddf:.4}, +CIT {cit:.4}, full {full:.4}; \
             full - baseline {gain:.4} (>= {MIN_FULL_GAIN}); {secs:.0}s (< {}s)",
            ABLATION_BUDGET.as_secs()
        ),
    )
}

fn fuser_direction(run: &AblationRun) -> Outcome {
    match (
        mean_of(run, Cell::new(false, FuserKind::DualDynamic)),
        mean_of(run, Cell::new(false, FuserKind::Conv)),
    ) {
        (Some(ddf), Some(conv)) => Outcome::new(ddf >= conv, format!("ddf {ddf:.4} vs conv {conv:.4}")),
        _ => Outcome::new(false, "missing runs"),
    }
}

fn alignment_diagnostic(run: &AblationRun) -> Outcome {
    if run.alignment.len() != SEEDS.len() {
        return Outcome::new(false, "full model did not train on every seed");
    }
    let n = run.alignment.len() as f64;
    let before = run.alignment.iter().map(|a| a.0).sum::<f64>() / n;
    let after = run.alignment.iter().map(|a| a.1).sum::<f64>() / n;
    let per_seed: Vec<String> = run.alignment.iter().map(|(b, a)| format!("{b:.3}->{a:.3}")).collect();
    Outcome::new(
        after > before,
        format!("mean cosine before {before:.4}, after {after:.4} (per seed {})", per_seed.join(", ")),
    )
}

const SMALL: &str = "\
scene.h = 6
scene.w = 6
scene.c = 4
scene.k = 2
cit.heads = 2
train.steps = 4
train.batch_size = 2
train.lr = 0.05
train.eval_every = 2
train.eval_scenes = 3
eval.scenes = 4
";

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(SMALL).unwrap();
    let mut problems = Vec::new();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        cli::cmd_train(&cfg, out).unwrap();
    }
    for f in [cli::CHECKPOINT_FILE, "curve.csv", "config.txt"] {
        if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
            problems.push(format!("{f} differs"));
        }
    }
    let (ca, cb) = (a.join(cli::CHECKPOINT_FILE), b.join(cli::CHECKPOINT_FILE));
    if cli::cmd_eval(&cfg, &ca).unwrap() != cli::cmd_eval(&cfg, &cb).unwrap() {
        problems.push("eval csv differs".into());
    }
    if cli::cmd_diagnose(&cfg, &ca).unwrap() != cli::cmd_diagnose(&cfg, &cb).unwrap() {
        problems.push("diagnose csv differs".into());
    }
    let bytes = fs::read(&ca).unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    if loaded.to_bytes() != bytes {
        problems.push("checkpoint bytes change on round trip".into());
    }
    let resaved = dir.path().join("resaved.bevf");
    loaded.save(&resaved).unwrap();
    if fs::read(&resaved).unwrap() != bytes {
        problems.push("checkpoint file changes on save".into());
    }
    let detail = if problems.is_empty() {
        format!("checkpoint ({} bytes), curve, config, eval and diagnose outputs identical", bytes.len())
    } else {
        problems.join("; ")
    };
    Outcome::new(problems.is_empty(), detail)
}

fn metric_correctness() -> Outcome {
    let mut rng = Rng::new(11, 70);
    let mut focal_err: f64 = 0.0;
    for _ in 0..5 {
        let n = 200;
        let x = Tensor::from_fn(&[n], |_| 4.0 * rng.normal());
        let y = Tensor::from_fn(&[n], |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let l = g.focal_loss(xn, &y, 0.0, None).unwrap();
        let expect = x.data().iter().zip(y.data()).map(|(&a, &b)| bce(a, b)).sum::<f64>() / n as f64;
        focal_err = focal_err.max((g.value(l).data()[0] - expect).abs());
    }
    let mut mismatches = 0;
    for _ in 0..IOU_CASES {
        let n = rng.int_range(1, 12);
        let density = rng.uniform();
        let probs: Vec<f64> = (0..n)
            .map(|_| {
                if rng.bernoulli(0.3) {
                    rng.int_range(0, 20) as f64 / 20.0
                } else {
                    rng.uniform()
                }
            })
            .collect();
        let mask: Vec<f64> = (0..n).map(|_| if rng.bernoulli(density) { 1.0 } else { 0.0 }).collect();
        if iou_sweep(&probs, &mask).unwrap() != brute_force_sweep(&probs, &mask) {
            mismatches += 1;
        }
    }
    Outcome::new(
        focal_err < FOCAL_BCE_TOL && mismatches == 0,
        format!(
            "focal(gamma=0) vs BCE {focal_err:.1e} (< {FOCAL_BCE_TOL:e}); iou sweep mismatches {mismatches}/{IOU_CASES}"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut outcomes: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient suite", gradient_suite()),
        (2, "attention invariants", attention_invariants()),
        (3, "oracle equivalence", oracle_equivalence()),
    ];
    let run = run_desk_ablation();
    outcomes.push((4, "component ablation direction", component_direction(&run)));
    outcomes.push((5, "fuser ablation direction", fuser_direction(&run)));
    outcomes.push((6, "alignment diagnostic", alignment_diagnostic(&run)));
    outcomes.push((7, "determinism", determinism()));
    outcomes.push((8, "metric correctness", metric_correctness()));

    for (i, name, o) in &outcomes {
        println!("criterion {i} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.2.pass).map(|o| o.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
