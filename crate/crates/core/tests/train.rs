use lowbit::data::{make_synthetic, make_synthetic_split, Dataset, Split};
use lowbit::models::{build_model, Model, ModelConfig, ModelKind, NUM_CLASSES};
use lowbit::nn::Precision;
use lowbit::packing::{load_model, save_model};
use lowbit::quant::{grid_values, quantize_with};
use lowbit::train::{cross_entropy, evaluate, fit, train_epoch, OptState, TrainConfig, METRICS_HEADER};
use lowbit::Error;

fn data(n_per_class: usize) -> (Dataset, Dataset) {
    (
        make_synthetic(n_per_class, NUM_CLASSES, 4).unwrap(),
        make_synthetic_split(5, NUM_CLASSES, 4, Split::Val).unwrap(),
    )
}

fn cfg(lr: f32, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        seed: 8,
        ..TrainConfig::new(lr, epochs)
    }
}

fn fcnn(n: Option<u16>) -> Model {
    build_model(&ModelConfig::new(ModelKind::Fcnn1, n).with_seed(1)).unwrap()
}

#[test]
fn full_precision_training_loss_strictly_decreases() {
    let (train, val) = data(20);
    let mut m = fcnn(None);
    let rows = fit(&mut m, &train, &val, &cfg(0.001, 5), |_| Ok(())).unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    for w in rows.windows(2) {
        assert!(w[1].train_loss < w[0].train_loss, "{rows:#?}");
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (train, val) = data(8);
    let run = || {
        let mut m = fcnn(Some(3));
        let rows = fit(&mut m, &train, &val, &cfg(0.001, 2), |_| Ok(())).unwrap();
        let w: Vec<f32> = m.params().iter().flat_map(|(_, p)| p.value.data().to_vec()).collect();
        (rows, w)
    };
    assert_eq!(run(), run());
}

#[test]
fn callback_sees_rows_in_order_and_can_abort() {
    let (train, val) = data(4);
    let mut seen = Vec::new();
    let mut m = fcnn(Some(5));
    fit(&mut m, &train, &val, &cfg(0.001, 3), |r| {
        seen.push(r.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3]);

    let err = fit(&mut m, &train, &val, &cfg(0.001, 3), |_| Err(Error::InferenceOnly)).unwrap_err();
    assert!(matches!(err, Error::InferenceOnly));
}

#[test]
fn evaluate_matches_a_manual_pass() {
    let (_, val) = data(1);
    let m = fcnn(Some(3));
    let (loss, acc) = evaluate(&m, &val).unwrap();
    let probs = m.predict(&val.images).unwrap();
    let y = lowbit::tensor::Tensor::new(
        [val.len(), NUM_CLASSES],
        val.labels.iter().flat_map(|&l| lowbit::data::one_hot(l as usize, NUM_CLASSES)).collect(),
    )
    .unwrap();
    assert!((loss - cross_entropy(&probs, &y).unwrap() as f64).abs() < 1e-5);
    let hits = probs.argmax_rows().iter().zip(&val.labels).filter(|(p, l)| **p == **l as usize).count();
    assert_eq!(acc, hits as f64 / val.len() as f64);
}

#[test]
fn masters_leave_the_grid_but_their_image_stays_on_it() {
    let (train, val) = data(4);
    let mut m = fcnn(Some(3));
    fit(&mut m, &train, &val, &cfg(0.01, 1), |_| Ok(())).unwrap();
    let Precision::Quantized(spec) = m.config().precision() else { unreachable!() };
    let grid = grid_values(3).unwrap();
    for (_, p) in m.params().iter().filter(|(_, p)| p.quantized) {
        let q = quantize_with(&p.value, &spec).unwrap();
        assert!(q.w_q.data().iter().all(|&v| grid.digit_of(v).is_some()), "{}", p.name);
        let off_grid = p.value.data().iter().filter(|&&w| grid.digit_of(w / q.gamma).is_none()).count();
        assert!(off_grid > p.value.len() / 2, "{}: masters should stay continuous", p.name);
    }
}

#[test]
fn restored_models_refuse_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lbq");
    save_model(&fcnn(Some(3)), &path).unwrap();
    let mut loaded = load_model(&path).unwrap();
    assert!(loaded.inference_only());
    let (train, val) = data(1);
    let err = train_epoch(&mut loaded, &train, &val, &cfg(0.001, 1), &mut OptState::new(), 1).unwrap_err();
    assert!(matches!(err, Error::InferenceOnly));
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let (train, val) = data(4);
    let mut m = fcnn(None);
    let err = fit(&mut m, &train, &val, &cfg(1e30, 3), |_| Ok(())).unwrap_err();
    match err {
        Error::Diverged { epoch, .. } => assert!(epoch <= 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_hyperparameters_name_their_field() {
    let (train, val) = data(1);
    let mut m = fcnn(None);
    let mut c = cfg(0.001, 1);
    c.momentum = 1.0;
    match fit(&mut m, &train, &val, &c, |_| Ok(())).unwrap_err() {
        Error::Config { field, .. } => assert_eq!(field, "momentum"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn metrics_writer_streams_rows() {
    use lowbit::train::MetricsWriter;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let (train, val) = data(2);
    let mut m = fcnn(Some(3));
    let mut w = MetricsWriter::create(&path).unwrap();
    fit(&mut m, &train, &val, &cfg(0.001, 2), |r| {
        w.append(r)?;
        let lines = std::fs::read_to_string(&path).unwrap().lines().count();
        assert_eq!(lines, 1 + r.epoch);
        Ok(())
    })
    .unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0")), "timing off by default");
}
