use ndarray::Array2;
use octa_restore::metrics::mae;
use octa_restore::model::{
    build_params, forward, infer_bscan, predict, train, Mode, Tensor, TrainConfig, TrainingSample, TrainingSet,
    UNetConfig,
};
use octa_restore::patch::{plan_stitch, SamplerConfig};
use octa_restore::synth::{generate_phantom, PhantomConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_set(n: usize, h: usize, w: usize, seed: u64, target: impl Fn(&Array2<f32>) -> Array2<f32>) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrainingSet {
        samples: (0..n)
            .map(|_| {
                let input = Array2::from_shape_fn((h, w), |_| rng.gen::<f32>());
                TrainingSample {
                    target: target(&input),
                    input,
                    smoothed_target: None,
                }
            })
            .collect(),
    }
}

#[test]
fn learns_a_constant() {
    let data = random_set(16, 8, 8, 1, |x| Array2::from_elem(x.dim(), 0.5));
    let tcfg = TrainConfig {
        epochs: 50,
        smoothing_epochs: 0,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let report = train(&data, &UNetConfig::tiny(2, 2), &tcfg).unwrap();
    let last = *report.losses().last().unwrap();
    assert!(last < 1e-3, "final loss {last}");
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = random_set(4, 8, 8, 1, |x| x.clone());
    let cfg = UNetConfig::tiny(2, 2);
    let tcfg = TrainConfig {
        epochs: 0,
        smoothing_epochs: 0,
        seed: 5,
        ..Default::default()
    };
    let report = train(&data, &cfg, &tcfg).unwrap();
    assert!(report.log.is_empty());
    assert_eq!(report.params, build_params(&cfg, 5).unwrap());
}

#[test]
fn loss_log_is_deterministic() {
    let data = random_set(12, 8, 8, 2, |x| x.mapv(|v| 1.0 - v));
    let tcfg = TrainConfig {
        epochs: 4,
        smoothing_epochs: 0,
        batch_size: 4,
        ..Default::default()
    };
    let a = train(&data, &UNetConfig::tiny(2, 2), &tcfg).unwrap();
    let b = train(&data, &UNetConfig::tiny(2, 2), &tcfg).unwrap();
    let bits = |l: Vec<f64>| l.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.losses()), bits(b.losses()));
    assert_eq!(a.params, b.params);
    assert_eq!(a.to_csv().lines().count(), 5);
}

#[test]
fn smoothed_targets_only_in_leading_epochs() {
    let p = generate_phantom(&PhantomConfig::with_dims([16, 32, 32], 3)).unwrap();
    let sampler = SamplerConfig {
        count: 1,
        width: 16,
        ..Default::default()
    };
    let data = TrainingSet::from_volumes(&p.oct, &p.octa, None, &sampler, true, 0).unwrap();
    assert!(!data.is_empty());
    assert!(data.samples.iter().all(|s| s.smoothed_target.is_some()));
    let tcfg = TrainConfig {
        epochs: 3,
        smoothing_epochs: 2,
        ..Default::default()
    };
    let report = train(&data, &UNetConfig::tiny(2, 2), &tcfg).unwrap();
    let flags: Vec<bool> = report.log.iter().map(|e| e.smoothed_targets).collect();
    assert_eq!(flags, [true, true, false]);
    let bad = TrainConfig {
        epochs: 1,
        smoothing_epochs: 2,
        ..Default::default()
    };
    assert!(train(&data, &UNetConfig::tiny(2, 2), &bad).is_err());
}

#[test]
fn empty_and_indivisible_datasets_rejected() {
    let cfg = UNetConfig::tiny(2, 2);
    assert!(train(&TrainingSet::default(), &cfg, &TrainConfig::default()).is_err());
    let odd = random_set(2, 6, 8, 0, |x| x.clone());
    assert!(train(&odd, &cfg, &TrainConfig::default()).is_err());
}

#[test]
fn outputs_stay_in_open_unit_interval() {
    let params = build_params(&UNetConfig::tiny(2, 2), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_vec(2, 1, 8, 8, (0..128).map(|_| rng.gen_range(-5.0f32..5.0)).collect());
    for mode in [Mode::Train, Mode::Eval] {
        let out = forward(&params, &x, mode).unwrap().output;
        assert!(out.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn full_width_inference_uses_five_patches() {
    let params = build_params(&UNetConfig::tiny(2, 2), 1).unwrap();
    let plan = plan_stitch(500, 128, 5, 8).unwrap();
    assert_eq!(plan.count(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scan = Array2::from_shape_fn((480, 500), |_| rng.gen::<f32>());
    let a = infer_bscan(&params, scan.view(), &plan).unwrap();
    assert_eq!(a.dim(), (480, 500));
    let b = infer_bscan(&params, scan.view(), &plan).unwrap();
    assert_eq!(a, b);
    // each owned column comes from the forward pass of its patch
    let patches = plan.extract(scan.view(), 0).unwrap();
    for (k, (lo, hi)) in plan.ranges().into_iter().enumerate() {
        let y = predict(&params, &Tensor::from_images(&[patches[k].pixels.view()])).unwrap().image(0);
        for c in lo..=hi {
            assert_eq!(a.column(c), y.column(c - plan.starts[k]));
        }
    }
}

#[test]
fn identity_task_reproduces_input() {
    let p = generate_phantom(&PhantomConfig::with_dims([16, 32, 64], 8)).unwrap();
    let sampler = SamplerConfig {
        count: 6,
        width: 16,
        ..Default::default()
    };
    let mut data = TrainingSet::from_volumes(&p.oct, &p.oct, None, &sampler, false, 0).unwrap();
    data.truncate(96);
    let tcfg = TrainConfig {
        epochs: 30,
        smoothing_epochs: 0,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let report = train(&data, &UNetConfig::tiny(4, 4), &tcfg).unwrap();
    let held = generate_phantom(&PhantomConfig::with_dims([16, 32, 64], 9)).unwrap();
    let plan = plan_stitch(64, 16, 5, 1).unwrap();
    let out = infer_bscan(&report.params, held.oct.bscan(8), &plan).unwrap();
    let err = mae(out.view(), held.oct.bscan(8)).unwrap();
    assert!(err < 0.05, "identity MAE {err}");
}
