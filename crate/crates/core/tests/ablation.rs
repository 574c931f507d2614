use bevfuse::ablation::{
    oracle_best_single_modality, run_ablation, run_cell, AblationGrid, Cell, COMPONENT_ROWS, FUSER_ROWS,
};
use bevfuse::fusion::FuserKind;
use bevfuse::metrics::SweepAccumulator;
use bevfuse::scenes::{SceneGenerator, SceneSpec};
use bevfuse::trainer::TrainConfig;
use bevfuse::{Error, Tensor};

fn spec() -> SceneSpec {
    SceneSpec {
        h: 6,
        w: 6,
        c: 4,
        k: 2,
        ..SceneSpec::desk()
    }
}

fn train_cfg(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        lr,
        ..TrainConfig::default()
    }
}

fn grid(steps: usize, lr: f64) -> AblationGrid {
    let mut g = AblationGrid::standard(spec(), train_cfg(steps, lr), vec![1, 2, 3]);
    g.cit.heads = 1;
    g.eval_scenes = 4;
    g
}

#[test]
fn standard_grid_covers_both_tables_once() {
    let g = grid(1, 0.01);
    assert_eq!(g.cells.len(), 6);
    for (_, cell) in COMPONENT_ROWS.iter().chain(&FUSER_ROWS) {
        assert!(g.cells.contains(cell));
    }
    assert!(g.model_config(Cell::new(true, FuserKind::Add)).cit.is_some());
    assert!(g.model_config(Cell::new(false, FuserKind::Add)).cit.is_none());
}

#[test]
fn ablation_fills_both_tables_with_consistent_streams() {
    let results = run_ablation(&grid(2, 0.01)).unwrap();
    assert!(results.streams_consistent());
    for table in [results.component_table(), results.fuser_table()] {
        assert!(table.complete);
        assert_eq!(table.rows.len(), 4);
        for r in &table.rows {
            assert_eq!(r.per_seed.len(), 3);
            let m = r.mean.unwrap();
            assert!((0.0..=1.0).contains(&m));
        }
        let csv = table.to_csv(&results.seeds);
        assert!(csv.starts_with("method,cit,fuser,seed1,seed2,seed3,mean,sd\n"));
        assert_eq!(csv.lines().count(), 5);
    }
    let again = run_ablation(&grid(2, 0.01)).unwrap();
    assert_eq!(again.component_table(), results.component_table());
}

#[test]
fn failing_cells_mark_the_table_incomplete() {
    let results = run_ablation(&grid(3, 1e300)).unwrap();
    assert!(results.runs.values().all(|r| r.is_err()));
    let t = results.component_table();
    assert!(!t.complete);
    let csv = t.to_csv(&results.seeds);
    assert!(csv.contains("NA"));
    assert!(csv.ends_with("# incomplete\n"));
}

#[test]
fn fewer_than_three_seeds_is_rejected() {
    let mut g = grid(1, 0.01);
    g.seeds = vec![1, 2];
    assert!(matches!(run_ablation(&g), Err(Error::Input(_))));
}

#[test]
fn a_cell_run_depends_only_on_its_seed() {
    let mut g = grid(2, 0.05);
    g.spec = SceneSpec::degenerate(6, 6, 4, 2, 0);
    let a = run_cell(&g, Cell::new(false, FuserKind::Add), 1).unwrap();
    let b = run_cell(&g, Cell::new(false, FuserKind::Add), 1).unwrap();
    assert_eq!(a, b);
    let c = run_cell(&g, Cell::new(false, FuserKind::Add), 2).unwrap();
    assert_ne!(a.stream_hash, c.stream_hash);
}

fn all_positive_miou(spec: &SceneSpec, seed: u64, n: usize) -> f64 {
    let data = SceneGenerator::new(SceneSpec { seed, ..spec.clone() }).unwrap();
    let mut acc = SweepAccumulator::new(spec.k);
    for s in data.heldout(n) {
        acc.add(&Tensor::full(s.masks.shape(), 0.5), &s.masks).unwrap();
    }
    acc.report().miou
}

#[test]
fn silent_lidar_probe_sits_at_the_all_positive_baseline() {
    let s = SceneSpec {
        lidar_dropout: 1.0,
        degradation: 0.0,
        ..spec()
    };
    let bound = oracle_best_single_modality(&s, &train_cfg(80, 0.1), &[1, 2, 3], 8).unwrap();
    for (i, seed) in [1, 2, 3].into_iter().enumerate() {
        let chance = all_positive_miou(&s, seed, 8);
        assert!((bound.lidar[i] - chance).abs() < 1e-12, "{} vs {chance}", bound.lidar[i]);
        assert!(bound.camera[i] > chance, "{} vs {chance}", bound.camera[i]);
    }
}

#[test]
fn clean_camera_probe_approaches_the_ceiling() {
    let s = SceneSpec {
        cam_noise: 0.0,
        cam_blur: 0,
        gap: 0.0,
        degradation: 0.0,
        ..spec()
    };
    let bound = oracle_best_single_modality(&s, &train_cfg(150, 0.1), &[1, 2, 3], 8).unwrap();
    assert!(bound.camera_mean() > 0.9, "{bound:?}");
    assert!(bound.camera_mean() > bound.lidar_mean());
    assert_eq!(bound.best(), bound.camera_mean());
}

#[test]
fn symmetric_spec_probes_tie() {
    let s = SceneSpec::degenerate(6, 6, 4, 2, 0);
    let bound = oracle_best_single_modality(&s, &train_cfg(10, 0.05), &[1, 2, 3], 6).unwrap();
    assert_eq!(bound.camera, bound.lidar);
}
