use proptest::prelude::*;

use opteq_core::activations::Activation;
use opteq_core::checkpoint;
use opteq_core::config::{ExperimentConfig, ExtractorKind, ModelSpec};
use opteq_core::data::make_dataset;
use opteq_core::metrics::{read_metrics, MetricsWriter};
use opteq_core::regularizers::Regularizer;
use opteq_core::training::{
    flatten_parameters, sgd_train, unrolled_loss_and_grad, GradientMode, LossSpec, LrSchedule, TrainSpec, UnrolledSpec,
};
use opteq_core::Error;

const CONFIG: &str = r#"{
    "seed": 5,
    "model": {"input_dim": 2, "hidden": 6, "outputs": 2, "layers": 2, "alpha": 0.7, "activation": "tanh",
              "extractor": "linear_tanh", "feature_dim": 3},
    "solver": {"mode": "sam", "steps": 6},
    "regularizer": {"placement": "sam", "reg": {"kind": "inverse_norm", "epsilon": 0.1}},
    "training": {
        "loss": {"kind": "softmax_cross_entropy", "weight_decay": 0.0003},
        "lr": {"initial": 0.1, "factor": 0.5, "every": 2},
        "epochs": 4,
        "batch_size": 10,
        "holdout": 5,
        "gradient": "unrolled"
    },
    "dataset": {"generator": "gaussian_blobs", "n": 40, "classes": 2, "dim": 2},
    "output": {"metrics": "m.csv", "checkpoint": "c.json"}
}"#;

fn run(cfg: &ExperimentConfig) -> Vec<u8> {
    let data = make_dataset(&cfg.dataset, cfg.seed).unwrap();
    let (train, eval) = data.split_holdout(cfg.training.holdout, cfg.seed).unwrap();
    let mut model = cfg.build_model().unwrap();
    let mut w = MetricsWriter::new(Vec::new()).unwrap();
    sgd_train(&mut model, &train, eval.as_ref(), &cfg.train_spec().unwrap(), |r| w.append(r)).unwrap();
    w.into_inner().unwrap()
}

#[test]
fn same_config_same_metrics() {
    let cfg = ExperimentConfig::from_json(CONFIG).unwrap();
    let a = run(&cfg);
    assert_eq!(a, run(&cfg));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 4);
    assert!(text.lines().nth(1).unwrap().starts_with("0,train,"));

    let mut other = cfg.clone();
    other.seed = 6;
    assert_ne!(run(&other), run(&cfg));
}

#[test]
fn metrics_file_reads_back() {
    let cfg = ExperimentConfig::from_json(CONFIG).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(&path, run(&cfg)).unwrap();
    let records = read_metrics(&path).unwrap();
    assert_eq!(records.len(), 8);
    assert_eq!(records[1].split, "eval");
    assert!(records.iter().all(|r| r.loss.is_finite() && r.reg_value > 0.0));
    assert_eq!(records[4].lr, 0.05);
}

#[test]
fn config_round_trips_through_json() {
    let cfg = ExperimentConfig::from_json(CONFIG).unwrap();
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn missing_seed_is_rejected() {
    let text = CONFIG.replace("\"seed\": 5,", "");
    match ExperimentConfig::from_json(&text) {
        Err(Error::Config { reason, .. }) => assert!(reason.contains("seed"), "{reason}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// An extra key in any object of the config is an error naming that object.
    #[test]
    fn unknown_keys_rejected_everywhere(section in prop::sample::select(vec!["", "model", "solver", "regularizer", "training", "dataset", "output"]), key in "[a-z]{3,8}") {
        let mut v: serde_json::Value = serde_json::from_str(CONFIG).unwrap();
        let target = if section.is_empty() { &mut v } else { &mut v[section] };
        let obj = target.as_object_mut().unwrap();
        prop_assume!(!obj.contains_key(&key) && !["kind", "epsilon", "generator"].contains(&key.as_str()));
        obj.insert(key.clone(), serde_json::json!(1));
        match ExperimentConfig::from_json(&v.to_string()) {
            Err(Error::Config { path, reason }) => {
                prop_assert!(path.starts_with(section) || section.is_empty(), "{} for {}", path, section);
                prop_assert!(reason.contains(&key) || path.contains(&key), "{} / {}", path, reason);
            }
            other => prop_assert!(false, "accepted {}: {:?}", key, other.map(|c| c.seed)),
        }
    }

    /// save → load → save is byte-identical, structural regularizer included.
    #[test]
    fn checkpoint_save_is_stable(seed in 0u64..10_000, layers in 1usize..4, structural in 0usize..3) {
        let spec = ModelSpec {
            input_dim: 3,
            feature_dim: Some(4),
            hidden: 5,
            outputs: 2,
            layers,
            alpha: 0.6,
            mu: 1.5,
            activation: Activation::LeakyRelu(0.05),
            extractor: ExtractorKind::LinearTanh,
            init_norm: 0.8,
        };
        let mut model = spec.init(seed).unwrap();
        model = match structural {
            1 => model.append_structural_regularizer(Regularizer::L1 { lambda: 0.01 }, 0.5).unwrap(),
            2 => model.append_structural_regularizer(Regularizer::InverseNorm { epsilon: 0.2 }, 0.1).unwrap(),
            _ => model,
        };
        let first = checkpoint::to_json(&model);
        let loaded = checkpoint::from_json(&first).unwrap();
        prop_assert_eq!(&loaded, &model);
        prop_assert_eq!(checkpoint::to_json(&loaded), first);
    }
}

/// The weight-decay term adds exactly `2ξθ` to the gradient.
#[test]
fn weight_decay_gradient_is_two_xi_theta() {
    let cfg = ExperimentConfig::from_json(CONFIG).unwrap();
    let model = cfg.build_model().unwrap();
    let data = make_dataset(&cfg.dataset, 1).unwrap();
    let spec = UnrolledSpec::picard(4);
    let xi = 0.01;
    let (l0, g0) = unrolled_loss_and_grad(&model, &data, &spec, &LossSpec::cross_entropy()).unwrap();
    let (l1, g1) = unrolled_loss_and_grad(&model, &data, &spec, &LossSpec::cross_entropy().with_weight_decay(xi)).unwrap();
    let theta = flatten_parameters(&model);
    let norm2: f64 = theta.iter().map(|t| t * t).sum();
    assert!((l1 - l0 - xi * norm2).abs() < 1e-12);
    for ((a, b), t) in g1.flatten().iter().zip(g0.flatten()).zip(&theta) {
        assert!((a - b - 2.0 * xi * t).abs() < 1e-15 * (1.0 + a.abs()), "{a} - {b} vs {}", 2.0 * xi * t);
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = ExperimentConfig::from_json(CONFIG).unwrap();
    let mut model = cfg.build_model().unwrap();
    let before = model.clone();
    let data = make_dataset(&cfg.dataset, cfg.seed).unwrap();
    let spec = TrainSpec {
        epochs: 2,
        batch_size: 8,
        lr: LrSchedule::constant(0.0),
        loss: LossSpec::cross_entropy(),
        gradient: GradientMode::Unrolled(UnrolledSpec::picard(3)),
        seed: 1,
        spectral_bound: None,
        record_wallclock: false,
    };
    let log = sgd_train(&mut model, &data, None, &spec, |_| Ok(())).unwrap();
    assert_eq!(model, before);
    let losses = log.losses("train");
    assert_eq!(losses[0], losses[1]);
}
