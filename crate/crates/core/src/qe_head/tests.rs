use super::*;
use crate::adapters::AdapterKind;
use crate::data::{make_synthetic_dataset, PlantedSignal, QeRecord};
use crate::metrics::spearman;
use crate::numerics::finite_diff_check;
use crate::rng::{normal_vec, seeded};
use crate::transformer::{ModelConfig, TokenBatch, TransformerModel};

fn tiny_config(d_model: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, d_model, n_heads: 2, d_ff: 2 * d_model, vocab_size: 256, max_seq_len: 48, seed: 7 }
}

fn records(n: usize, seed: u64) -> Vec<QeRecord> {
    let split = make_synthetic_dataset(n, seed, &PlantedSignal::default()).unwrap();
    split.train.into_iter().chain(split.test).collect()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig { adapter: AdapterConfig::new(AdapterKind::Lora, 4, 8.0), epochs: 3, batch_size: 8, ..TrainConfig::default() }
}

fn zero_head_model(kind: AdapterKind) -> TrainedQeModel {
    let mut model = TransformerModel::new(&tiny_config(8)).unwrap();
    model.attach_adapters(&AdapterConfig::new(kind, 4, 8.0), &mut seeded(1)).unwrap();
    let base_checksum = model.base_checksum();
    TrainedQeModel { model, head: RegressionHead::zeros(8, 8).unwrap(), config: TrainConfig::default(), loss_trace: vec![], base_checksum }
}

#[test]
fn pool_examples() {
    let one = Tensor::matrix(1, 2, vec![4.0, 5.0]).unwrap();
    assert_eq!(pool(&one, &[true], PoolingStrategy::Mean).unwrap().data(), &[4.0, 5.0]);
    let two = Tensor::matrix(2, 2, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
    assert_eq!(pool(&two, &[true, true], PoolingStrategy::Mean).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(pool(&two, &[true, true], PoolingStrategy::Last).unwrap().data(), &[3.0, 3.0]);
    let padded = Tensor::matrix(4, 2, vec![1.0, 1.0, 3.0, 3.0, 99.0, -7.0, 1e6, 2.0]).unwrap();
    for strategy in [PoolingStrategy::Mean, PoolingStrategy::Last] {
        assert_eq!(pool(&padded, &[true, true, false, false], strategy).unwrap(), pool(&two, &[true, true], strategy).unwrap());
    }
    assert!(pool(&two, &[false, false], PoolingStrategy::Mean).is_err());
}

#[test]
fn zero_head_predicts_midpoint() {
    for kind in [AdapterKind::Lora, AdapterKind::Lorma] {
        let m = zero_head_model(kind);
        assert_eq!(m.predict_da("a source", "a translation").unwrap(), 50.0);
        assert_eq!(predict_da(&m, "x", "y").unwrap(), 50.0);
    }
    let m = zero_head_model(AdapterKind::Lora);
    assert!(matches!(m.predict_da("  ", "y"), Err(QeError::EmptyInput)));
    assert!(matches!(m.predict_da("x", ""), Err(QeError::EmptyInput)));
}

#[test]
fn predictions_stay_in_range() {
    let mut m = zero_head_model(AdapterKind::Lora);
    for (scale, bias) in [(ScoreScale::Raw0To100, 1e4), (ScoreScale::Raw0To100, -1e4), (ScoreScale::UnitInterval, 50.0)] {
        m.config.score_scale = scale;
        m.head.b2.assign(&[bias]).unwrap();
        let p = m.predict_da("src", "tgt").unwrap();
        assert!((0.0..=100.0).contains(&p), "{p}");
    }
    m.head = RegressionHead::new(8, 8, &mut seeded(3)).unwrap();
    m.config.score_scale = ScoreScale::UnitInterval;
    let a = m.predict_da("src text", "tgt text").unwrap();
    assert_eq!(a, m.predict_da("src text", "tgt text").unwrap());
}

#[test]
fn config_errors() {
    let model = TransformerModel::new(&tiny_config(8)).unwrap();
    let data = records(10, 1);
    let bad_epochs = TrainConfig { epochs: 0, ..quick_cfg() };
    assert!(matches!(train(&model, &data, &bad_epochs), Err(QeError::InvalidConfig(_))));
    assert!(matches!(train(&model, &[], &quick_cfg()), Err(QeError::EmptyDataset)));
    let bad_layer = TrainConfig { layer_index: -3, ..quick_cfg() };
    assert!(matches!(train(&model, &data, &bad_layer), Err(QeError::Model(ModelError::LayerOutOfRange { .. }))));
    let json = r#"{"epochs": 2, "score_scale": "raw_0_100", "pooling": "last"}"#;
    let cfg: TrainConfig = serde_json::from_str(json).unwrap();
    assert_eq!((cfg.epochs, cfg.score_scale, cfg.pooling), (2, ScoreScale::Raw0To100, PoolingStrategy::Last));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 2}"#).is_err());
}

#[test]
fn training_is_deterministic_and_keeps_base_frozen() {
    let model = TransformerModel::new(&tiny_config(8)).unwrap();
    let data = records(30, 2);
    let a = train(&model, &data, &quick_cfg()).unwrap();
    let b = train(&model, &data, &quick_cfg()).unwrap();
    assert_eq!(a.loss_trace.len(), 3);
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.model.base_checksum(), model.base_checksum());
    assert_eq!(a.base_checksum, model.base_checksum());
    let c = train(&model, &data, &TrainConfig { seed: 1, ..quick_cfg() }).unwrap();
    assert_ne!(a.loss_trace, c.loss_trace);
}

#[test]
fn evaluation_is_ordered_pure_and_thread_invariant() {
    let model = TransformerModel::new(&tiny_config(8)).unwrap();
    let data = records(100, 3);
    let m = train(&model, &data[..20], &quick_cfg()).unwrap();
    let before = serde_json::to_string(&m).unwrap();
    let p1 = m.evaluate(&data).unwrap();
    let p4 = m.evaluate_with(&data, 4).unwrap();
    assert_eq!(p1.len(), data.len());
    assert_eq!(p1, p4);
    assert_eq!(p1, evaluate(&m, &data).unwrap());
    assert_eq!(serde_json::to_string(&m).unwrap(), before);
    for (p, r) in p1.iter().zip(&data) {
        assert_eq!(p.id, r.id);
        assert_eq!(p.gold, r.da_score);
        assert_eq!(p.prediction, m.predict_da(&r.source, &r.translation).unwrap());
    }
    assert!(matches!(m.evaluate(&[]), Err(QeError::EmptyDataset)));
}

#[test]
fn overfits_small_planted_set() {
    let model = TransformerModel::new(&tiny_config(8)).unwrap();
    let data = records(64, 4);
    let cfg = TrainConfig { adapter: AdapterConfig::new(AdapterKind::Lora, 4, 8.0), epochs: 200, batch_size: 16, ..TrainConfig::default() };
    let m = train(&model, &data, &cfg).unwrap();
    let (first, last) = (m.loss_trace[0], *m.loss_trace.last().unwrap());
    assert!(m.loss_trace.iter().all(|v| v.is_finite()));
    assert!(last < 0.1 * first, "first {first} last {last}");
    let preds = m.evaluate(&data).unwrap();
    let (p, g): (Vec<f64>, Vec<f64>) = preds.iter().map(|p| (p.prediction, p.gold)).unzip();
    assert!(spearman(&p, &g).unwrap() > 0.9);
}

#[test]
fn quantized_base_trains_without_mutation() {
    let model = TransformerModel::new(&tiny_config(8)).unwrap();
    let data = records(20, 5);
    let m = train(&model, &data, &TrainConfig { quantize_base: true, ..quick_cfg() }).unwrap();
    assert!(m.model.is_quantized());
    assert_eq!(m.model.base_checksum(), m.base_checksum);
    assert_ne!(m.base_checksum, model.base_checksum());
}

fn to_tensor_err(e: QeError) -> TensorError {
    match e {
        QeError::Tensor(t) => t,
        other => TensorError::InvalidArgument(other.to_string()),
    }
}

#[test]
fn pipeline_gradient_matches_finite_differences() {
    for kind in [AdapterKind::Lora, AdapterKind::Lorma] {
        let mut model = TransformerModel::new(&tiny_config(8)).unwrap();
        let cfg = AdapterConfig::new(kind, 2, 4.0).with_targets(&crate::adapters::Projection::ALL);
        model.attach_adapters(&cfg, &mut seeded(11)).unwrap();
        let mut rng = seeded(12);
        for t in model.adapter_params_mut() {
            let n = t.numel();
            t.assign(&normal_vec(&mut rng, n, 0.3)).unwrap();
        }
        let head = RegressionHead::new(8, 8, &mut seeded(13)).unwrap();
        let data = records(10, 6);
        let encs: Vec<_> =
            data[..3].iter().map(|r| model.tokenize(&join_pair(&r.source, &r.translation, DEFAULT_SEPARATOR).unwrap()).unwrap()).collect();
        let batch = TokenBatch::packed(&encs);
        let targets: Vec<f64> = data[..3].iter().map(|r| r.da_score / 100.0).collect();

        for (block, proj, which) in [(0, 0, 0), (0, 2, 1), (1, 3, 0), (1, 1, 1)] {
            let (fa, fb) = model.blocks[block].projection(crate::adapters::Projection::ALL[proj]).adapter.as_ref().unwrap().factors();
            let x0 = if which == 0 { fa.clone() } else { fb.clone() };
            let f = |tape: &mut Tape, x: Var| {
                let mut av = model.register_adapters(tape);
                let (a, b) = av[block][proj].unwrap();
                av[block][proj] = Some(if which == 0 { (x, b) } else { (a, x) });
                let hv = head.constants(tape);
                pipeline_loss(tape, &model, Some(&av), hv, &batch, &targets, -1, PoolingStrategy::Mean, ScoreScale::UnitInterval)
                    .map_err(to_tensor_err)
            };
            let check = finite_diff_check(f, &x0, 1e-5).unwrap();
            assert!(check.max_rel_error < 1e-5, "{kind:?} block {block} proj {proj}: {}", check.max_rel_error);
        }

        for (i, layer) in [(0, -1), (2, -2)] {
            let x0 = head.params()[i].clone();
            let f = |tape: &mut Tape, x: Var| {
                let av = model.register_adapters(tape);
                let mut hv = head.constants(tape);
                if i == 0 {
                    hv.w1 = x
                } else {
                    hv.w2 = x
                }
                pipeline_loss(tape, &model, Some(&av), hv, &batch, &targets, layer, PoolingStrategy::Last, ScoreScale::Raw0To100)
                    .map_err(to_tensor_err)
            };
            let check = finite_diff_check(f, &x0, 1e-5).unwrap();
            assert!(check.max_rel_error < 1e-5, "head {i}: {}", check.max_rel_error);
        }
    }
}

#[test]
fn adam_matches_hand_computed_first_step() {
    let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap().with_grad(true);
    let mut adam = Adam::new(0.1, &[2]);
    adam.step(vec![&mut p], &[vec![0.5, -3.0]]).unwrap();
    // First bias-corrected step is lr · g / (|g| + eps).
    assert!((p.data()[0] - 0.9).abs() < 1e-8);
    assert!((p.data()[1] + 1.9).abs() < 1e-8);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = TransformerModel::new(&tiny_config(8)).unwrap();
    let data = records(20, 8);
    let m = train(&model, &data, &TrainConfig { quantize_base: true, ..quick_cfg() }).unwrap();

    let ck = dir.path().join("model.json");
    save_checkpoint(&m, &ck).unwrap();
    let loaded = load_checkpoint(&ck).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(loaded.evaluate(&data).unwrap(), m.evaluate(&data).unwrap());
    std::fs::write(&ck, r#"{"format": "other/9"}"#).unwrap();
    assert!(matches!(load_checkpoint(&ck), Err(QeError::Format(_))));

    let loss = dir.path().join("loss.csv");
    write_loss_csv(&m.loss_trace, &loss).unwrap();
    assert!(std::fs::read_to_string(&loss).unwrap().starts_with("epoch,mean_mse\n1,"));
    assert_eq!(read_loss_csv(&loss).unwrap(), m.loss_trace);

    let preds_path = dir.path().join("predictions.jsonl");
    let preds = m.evaluate(&data).unwrap();
    write_predictions(&preds, &preds_path).unwrap();
    let first = std::fs::read_to_string(&preds_path).unwrap().lines().next().unwrap().to_string();
    assert!(first.starts_with(r#"{"id":"#) && first.contains(r#""prediction":"#) && first.contains(r#""gold":"#));
    assert_eq!(read_predictions(&preds_path).unwrap(), preds);
}
