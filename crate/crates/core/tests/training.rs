mod common;

use candle_core::{DType, Tensor};
use common::{fixture, samples, seeded_model, small_profile};
use mrcnet::density::GtMode;
use mrcnet::error::Error;
use mrcnet::evaluation::MetricsReport;
use mrcnet::inference::{CountHead, EvalItem, FullImagePredictor, InferenceConfig, OraclePredictor, TiledPredictor};
use mrcnet::loss::LossConfig;
use mrcnet::model::{Model, ModelConfig, ModelOutput};
use mrcnet::patches::PatchSample;
use mrcnet::synthetic::SceneSpec;
use mrcnet::trainer::{batch_gradients, named_gradients, train, validate, TrainConfig, TrainOutputs, LOSS_LOG_HEADER};

fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::with_widths([4, 4, 8, 8, 8], [8, 8, 4, 4, 4]);
    cfg.init_std = 0.1;
    cfg
}

fn scene64() -> SceneSpec {
    SceneSpec {
        height: 64,
        width: 64,
        min_people: 5,
        max_people: 30,
        ..SceneSpec::default()
    }
}

/// Two 64² images, two 32² crops each.
fn tiny_samples() -> (common::Fixture, Vec<PatchSample>) {
    let fx = fixture(2, &scene64(), 5);
    let s = samples(&fx.items, &small_profile(64, 32, 9));
    assert_eq!(s.len(), 4);
    (fx, s)
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn quick_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        ..TrainConfig::aerial(steps)
    }
}

#[test]
fn accumulated_gradients_equal_direct_batch() {
    let (_fx, s) = tiny_samples();
    let refs: Vec<&PatchSample> = s.iter().collect();
    let model = seeded_model(&tiny_config(), DType::F64, 3);
    let loss = LossConfig::default();
    let (direct, l_direct) = batch_gradients(&model, &refs, 4, &loss).unwrap();
    let direct = named_gradients(&model, &direct).unwrap();
    for micro in [1, 3] {
        let (acc, l_acc) = batch_gradients(&model, &refs, micro, &loss).unwrap();
        assert!((l_acc.total - l_direct.total).abs() <= 1e-12 * l_direct.total.abs());
        for ((name, a), (_, b)) in named_gradients(&model, &acc).unwrap().iter().zip(&direct) {
            let (a, b) = (flat(a), flat(b));
            let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let diff = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(diff <= 1e-6 * scale.max(1e-30), "{name}: micro {micro}, diff {diff} vs scale {scale}");
        }
    }
}

#[test]
fn fixed_seed_reproduces_losses() {
    let (_fx, s) = tiny_samples();
    let run = || {
        let model = seeded_model(&tiny_config(), DType::F32, 11);
        train(&model, &s, &quick_train_config(3), &LossConfig::default(), &TrainOutputs::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.steps.len(), 3);
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!(x.loss.total.to_bits(), y.loss.total.to_bits());
        assert_eq!(x.loss.low.to_bits(), y.loss.low.to_bits());
    }
}

#[test]
fn checkpoint_round_trip_gives_identical_metrics() {
    let (fx, s) = tiny_samples();
    let run_dir = tempfile::tempdir().unwrap();
    let model = seeded_model(&tiny_config(), DType::F32, 2);
    let cfg = TrainConfig {
        checkpoint_every: 1,
        ..quick_train_config(2)
    };
    let outputs = TrainOutputs {
        run_dir: Some(run_dir.path()),
        validation: None,
    };
    let report = train(&model, &s, &cfg, &LossConfig::default(), &outputs).unwrap();
    assert_eq!(report.checkpoints.len(), 2);
    let leftovers: Vec<_> = std::fs::read_dir(run_dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains("tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");

    let reloaded = Model::load_checkpoint(report.checkpoints.last().unwrap(), model.device()).unwrap();
    let score = |m: &Model| -> MetricsReport {
        let p = TiledPredictor {
            model: m,
            config: InferenceConfig::default(),
        };
        validate(&p, &fx.items, CountHead::Low).unwrap()
    };
    assert_eq!(score(&model), score(&reloaded));

    // the loss log is append-only
    let log = std::fs::read_to_string(run_dir.path().join("loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some(LOSS_LOG_HEADER));
    assert_eq!(log.lines().count(), 3);
    train(&reloaded, &s, &quick_train_config(1), &LossConfig::default(), &outputs).unwrap();
    let log = std::fs::read_to_string(run_dir.path().join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

struct ZeroPredictor;

impl FullImagePredictor for ZeroPredictor {
    fn predict(&self, item: &EvalItem) -> mrcnet::Result<ModelOutput> {
        let (h, w) = (item.image.height, item.image.width);
        Ok(ModelOutput {
            density_low: mrcnet::density::DensityMap::zeros(&item.record.id, h.div_ceil(4), w.div_ceil(4), 4),
            density_high: mrcnet::density::DensityMap::zeros(&item.record.id, h, w, 1),
        })
    }
}

#[test]
fn validation_examples() {
    let spec = SceneSpec {
        min_people: 20,
        ..scene64()
    };
    let fx = fixture(2, &spec, 1);
    let mut items = fx.items.clone();
    items[0].points.points.truncate(10);
    items[1].points.points.truncate(20);

    let zero = validate(&ZeroPredictor, &items, CountHead::Low).unwrap();
    assert_eq!(zero.mae, 15.0);

    let oracle = OraclePredictor {
        gt_mode: GtMode::GsdAdaptive,
    };
    let exact = validate(&oracle, &items, CountHead::Low).unwrap();
    assert!(exact.mae < 1e-4 && exact.rmse < 1e-4 && exact.mnae.unwrap() < 1e-6);

    let single = validate(&ZeroPredictor, &items[..1], CountHead::Low).unwrap();
    assert_eq!(single.mae, single.rmse);

    assert!(validate(&oracle, &[], CountHead::Low).is_err());
}

#[test]
fn non_finite_loss_names_the_batch() {
    let (_fx, mut s) = tiny_samples();
    // a corrupt target; NaN pixels alone are swallowed by the ReLUs
    for sample in &mut s {
        sample.gt_low.values[0] = f32::NAN;
    }
    let model = seeded_model(&tiny_config(), DType::F32, 1);
    let err = train(&model, &s, &quick_train_config(2), &LossConfig::default(), &TrainOutputs::default())
        .unwrap_err();
    match err {
        Error::NonFiniteLoss { step, samples, .. } => {
            assert_eq!(step, 0);
            assert_eq!(samples.len(), 2);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn zero_lambda_decouples_the_high_head() {
    let (_fx, s) = tiny_samples();
    let refs: Vec<&PatchSample> = s.iter().collect();
    let model = seeded_model(&tiny_config(), DType::F64, 4);
    let head_grad = |lambda: f64| -> f64 {
        let (g, _) = batch_gradients(&model, &refs, 4, &LossConfig { lambda }).unwrap();
        named_gradients(&model, &g)
            .unwrap()
            .iter()
            .filter(|(n, _)| n.starts_with("head.high"))
            .flat_map(|(_, t)| flat(t))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    };
    assert_eq!(head_grad(0.0), 0.0);
    assert!(head_grad(1e-4) > 0.0);
}

#[test]
fn default_initialization_statistics() {
    let model = seeded_model(&ModelConfig::default(), DType::F32, 0);
    assert!((18_300_000..=22_300_000).contains(&model.parameter_count()));
    let mut values = Vec::new();
    for (name, var) in model.named_parameters() {
        let v = flat(var.as_tensor());
        if name.ends_with(".bias") {
            assert!(v.iter().all(|x| *x == 0.0), "{name}");
        } else if name.starts_with("decoder.") {
            values.extend(v);
        }
    }
    assert!(values.len() >= 100_000);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() <= 0.001, "mean {mean}");
    assert!((std - 0.01).abs() <= 0.001, "std {std}");
}

#[test]
fn pretrained_encoder_weights_are_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let source = seeded_model(&tiny_config(), DType::F32, 1);
    let path = dir.path().join("vgg.safetensors");
    source.save_checkpoint(&path).unwrap();

    let cfg = ModelConfig {
        use_pretrained_encoder: true,
        pretrained_path: Some(path),
        ..tiny_config()
    };
    let model = seeded_model(&cfg, DType::F32, 2);
    for ((name, a), (_, b)) in model.named_parameters().iter().zip(source.named_parameters()) {
        let same = flat(a.as_tensor()) == flat(b.as_tensor());
        if name.starts_with("encoder.") {
            assert!(same, "{name} should come from the pretrained file");
        } else if name.ends_with(".weight") {
            assert!(!same, "{name} should be freshly initialized");
        }
    }
}

#[test]
fn forward_shapes_and_non_negativity() {
    let model = seeded_model(&tiny_config(), DType::F32, 8);
    for (h, w) in [(32, 32), (64, 96), (128, 64)] {
        let x = Tensor::randn(0f32, 1.0, (2, 3, h, w), model.device()).unwrap();
        let (low, high) = model.forward(&x).unwrap();
        assert_eq!(low.dims(), &[2, 1, h / 4, w / 4]);
        assert_eq!(high.dims(), &[2, 1, h, w]);
        for v in flat(&low).into_iter().chain(flat(&high)) {
            assert!(v >= 0.0 && v.is_finite());
        }
    }
    let zeros = Tensor::zeros((1, 3, 64, 64), DType::F32, model.device()).unwrap();
    let (low, high) = model.forward(&zeros).unwrap();
    assert!(flat(&low).iter().chain(&flat(&high)).all(|v| v.is_finite()));
}
