use bevfuse::fusion::FuserKind;
use bevfuse::graph::Graph;
use bevfuse::model::{Model, ModelConfig, Trainable};
use bevfuse::params::ParamStore;
use bevfuse::scenes::{SceneGenerator, SceneSpec};
use bevfuse::trainer::{curve_csv, global_norm, scene_gradients, train, Sgd, TrainConfig};
use bevfuse::{Error, Tensor};

fn spec(seed: u64) -> SceneSpec {
    SceneSpec {
        h: 6,
        w: 6,
        c: 4,
        k: 2,
        seed,
        ..SceneSpec::desk()
    }
}

fn small_model(fuser: FuserKind, cit: bool) -> Model {
    let mut cfg = ModelConfig::for_spec(&spec(0), fuser, cit);
    if let Some(c) = cfg.cit.as_mut() {
        c.heads = 1;
    }
    Model::new(cfg).unwrap()
}

fn cfg(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        lr,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let model = small_model(FuserKind::DualDynamic, true);
    let data = SceneGenerator::new(spec(1)).unwrap();
    let init = model.init_params(1);
    let out = train(&model, init.clone(), &data, &cfg(3, 0.0)).unwrap();
    assert!(out.params.bit_identical(&init));
    assert_eq!(out.curve.len(), 3);
}

#[test]
fn sgd_momentum_matches_closed_form_on_a_quadratic() {
    // f(θ) = Σ (θ − c)², ∇f = 2(θ − c).
    let c = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut p = ParamStore::new();
    p.insert("theta", Tensor::new(&[3], vec![0.0, 0.0, 3.0]).unwrap());
    let grad_of = |p: &ParamStore| {
        let mut g = Graph::new();
        let t = g.param("theta", p.get("theta").unwrap());
        let cc = g.constant(c.clone());
        let d = g.sub(t, cc).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        g.param_grad("theta").unwrap()
    };
    let (lr, mu) = (0.1, 0.9);
    let mut opt = Sgd::new(&p, lr, mu);
    let theta0 = p.get("theta").unwrap().data().to_vec();

    let g0 = grad_of(&p);
    opt.step(&mut p, &[g0.clone()]);
    let theta1 = p.get("theta").unwrap().data().to_vec();
    for i in 0..3 {
        let expect = theta0[i] - lr * 2.0 * (theta0[i] - c.data()[i]);
        assert_eq!(theta1[i], expect);
    }

    let g1 = grad_of(&p);
    opt.step(&mut p, &[g1.clone()]);
    for i in 0..3 {
        let v = mu * g0.data()[i] + g1.data()[i];
        assert!((p.get("theta").unwrap().data()[i] - (theta1[i] - lr * v)).abs() < 1e-15);
        assert!((opt.velocity().get("theta").unwrap().data()[i] - v).abs() < 1e-15);
    }
}

#[test]
fn fixed_seed_reproduces_curve_and_parameters_across_thread_counts() {
    let model = small_model(FuserKind::DualDynamic, true);
    let data = SceneGenerator::new(spec(2)).unwrap();
    let c = TrainConfig {
        eval_every: 2,
        eval_scenes: 3,
        ..cfg(4, 0.05)
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&model, model.init_params(2), &data, &c).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert!(a.params.bit_identical(&b.params));
    assert_eq!(curve_csv(&a.curve), curve_csv(&b.curve));
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.stream_hash, b.stream_hash);
    assert!(a.curve[1].miou.is_some() && a.curve[0].miou.is_none());
    assert!(!a.params.bit_identical(&model.init_params(2)));
}

#[test]
fn every_cell_sees_the_same_scene_stream() {
    let data = SceneGenerator::new(spec(3)).unwrap();
    let hashes: Vec<String> = [(FuserKind::Conv, false), (FuserKind::Add, false), (FuserKind::DualDynamic, true)]
        .into_iter()
        .map(|(f, cit)| {
            let m = small_model(f, cit);
            train(&m, m.init_params(3), &data, &cfg(2, 0.01)).unwrap().stream_hash
        })
        .collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    let other = SceneGenerator::new(spec(4)).unwrap();
    let m = small_model(FuserKind::Conv, false);
    assert_ne!(train(&m, m.init_params(3), &other, &cfg(2, 0.01)).unwrap().stream_hash, hashes[0]);
}

#[test]
fn divergence_aborts_with_the_step_index() {
    let model = small_model(FuserKind::Conv, false);
    let data = SceneGenerator::new(spec(5)).unwrap();
    match train(&model, model.init_params(5), &data, &cfg(5, 1e300)) {
        Err(Error::Training { step, .. }) => assert!(step < 5),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn clipping_bounds_the_first_update() {
    let model = small_model(FuserKind::Conv, false);
    let data = SceneGenerator::new(spec(6)).unwrap();
    let init = model.init_params(6);
    let scenes: Vec<_> = data.scenes(0..2).collect();
    let grads: Vec<Vec<Tensor>> = scenes.iter().map(|s| scene_gradients(&model, &init, s).unwrap().1).collect();
    let mean: Vec<Tensor> = grads[0]
        .iter()
        .zip(&grads[1])
        .map(|(a, b)| Tensor::from_fn(a.shape(), |i| (a.data()[i] + b.data()[i]) / 2.0))
        .collect();
    let norm = global_norm(&mean);
    let clip = norm / 4.0;
    let c = TrainConfig {
        momentum: 0.0,
        grad_clip: Some(clip),
        ..cfg(1, 0.5)
    };
    let out = train(&model, init.clone(), &data, &c).unwrap();
    let delta: f64 = out
        .params
        .iter()
        .zip(init.iter())
        .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt();
    assert!((delta - 0.5 * clip).abs() < 1e-9 * norm, "{delta} vs {}", 0.5 * clip);
}

#[test]
fn invalid_configs_are_rejected() {
    let model = small_model(FuserKind::Conv, false);
    let data = SceneGenerator::new(spec(7)).unwrap();
    for bad in [
        cfg(0, 0.1),
        cfg(1, -0.1),
        TrainConfig {
            momentum: 1.0,
            ..cfg(1, 0.1)
        },
        TrainConfig {
            grad_clip: Some(0.0),
            ..cfg(1, 0.1)
        },
    ] {
        assert!(matches!(train(&model, model.init_params(7), &data, &bad), Err(Error::Input(_))));
    }
}
