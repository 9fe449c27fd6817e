use proptest::prelude::*;
use rand::Rng;
use s2st_core::config::{AuxMode, AuxWeight, ModelConfig};
use s2st_core::dsp::Matrix;
use s2st_core::model::{encoder_layer_prefix, init_params, Example};
use s2st_core::selfcheck::micro_config;
use s2st_core::speaker::{default_registry, speaker_embed};
use s2st_core::trainer::*;
use s2st_tensor::{ParamStore, Tensor};

fn dataset(cfg: &ModelConfig, n: usize) -> Dataset {
    let mut r = s2st_tensor::rng::stream(9, "test.trainer", 0, 0);
    let reg = default_registry();
    let examples = (0..n)
        .map(|i| {
            let t = 3 + i % 3;
            let mut mat = |rows: usize, cols: usize, lo: f64, hi: f64| {
                Matrix::new(rows, cols, (0..rows * cols).map(|_| r.random_range(lo..hi)).collect()).unwrap()
            };
            Example {
                features: mat(t, cfg.input_channels(), -1.0, 1.0),
                target: Some(mat(t + 1, cfg.bins(), -4.0, 0.0)),
                source_symbols: (0..1 + i % 2).map(|k| (i + k) % cfg.symbol_vocab).collect(),
                target_symbols: (0..2).map(|k| (i * 2 + k) % cfg.symbol_vocab).collect(),
                speaker: Some(speaker_embed(&reg[i % reg.len()]).unwrap()),
            }
        })
        .collect();
    Dataset { examples, ids: (0..n).collect() }
}

fn run(cfg: &ModelConfig, aux: AuxMode, steps: u64, seed: u64) -> TrainReport {
    train(&dataset(cfg, 6), cfg, &TrainOptions::new(aux, steps, seed)).unwrap()
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let cfg = micro_config();
    let a = run(&cfg, AuxMode::Both, 4, 1);
    let b = run(&cfg, AuxMode::Both, 4, 1);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    let c = run(&cfg, AuxMode::Both, 4, 2);
    assert_ne!(a.checkpoint.params, c.checkpoint.params);
}

#[test]
fn metrics_record_the_scheduled_aux_weight() {
    let cfg = ModelConfig { aux_weight: AuxWeight::Decay { start: 0.3, end: 0.01, steps: 4 }, ..micro_config() };
    let rep = run(&cfg, AuxMode::Both, 6, 1);
    assert_eq!(rep.metrics.len(), 6);
    for (step, l) in &rep.metrics {
        assert_eq!(l.lambda, Some(cfg.aux_weight.at(*step)));
        assert!(l.src_aux.is_some() && l.tgt_aux.is_some());
    }
    let csv = rep.metrics_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 6);
    let none = run(&cfg, AuxMode::None, 2, 1);
    assert!(none.metrics.iter().all(|(_, l)| l.lambda.is_none()));
    assert!(none.metrics_csv().lines().nth(1).unwrap().contains(",,,,"));
}

#[test]
fn training_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { checkpoint_every: 2, ..micro_config() };
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), ..TrainOptions::new(AuxMode::Target, 5, 3) };
    let rep = train(&dataset(&cfg, 4), &cfg, &opts).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), rep.metrics_csv());
    for (name, step) in [("ckpt-2.s2st", 2), ("ckpt-4.s2st", 4), ("final.s2st", 5)] {
        assert_eq!(Checkpoint::load(dir.path().join(name)).unwrap().step, step);
    }
    assert_eq!(Checkpoint::load(dir.path().join("final.s2st")).unwrap(), rep.checkpoint);
}

#[test]
fn checkpoint_bytes_round_trip_exactly() {
    let cfg = micro_config();
    let ck = run(&cfg, AuxMode::Both, 2, 4).checkpoint;
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.s2st");
    ck.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).is_err());
    let mut version = bytes;
    version[4] = 99;
    assert!(Checkpoint::from_bytes(&version).is_err());
}

#[test]
fn pretrained_tensors_must_match_by_name_and_shape() {
    let cfg = micro_config();
    let mut params: ParamStore<f32> = init_params(&cfg, AuxMode::None, 1).unwrap();
    let mut pre = ParamStore::new();
    let w = params.get("encoder.layer0.fwd.W").unwrap().map(|v| v + 1.0);
    pre.insert("encoder.layer0.fwd.W", w.clone()).unwrap();
    assert_eq!(load_pretrained(&mut params, &pre).unwrap(), 1);
    assert_eq!(params.get("encoder.layer0.fwd.W").unwrap(), &w);

    let mut wrong = ParamStore::new();
    wrong.insert("encoder.layer0.fwd.W", Tensor::<f32>::zeros(&[1, 4])).unwrap();
    let e = load_pretrained(&mut params, &wrong).unwrap_err().to_string();
    assert!(e.contains("shape mismatch"), "{e}");
    let mut unknown = ParamStore::new();
    unknown.insert("encoder.layer9.fwd.W", Tensor::<f32>::zeros(&[1, 4])).unwrap();
    assert!(load_pretrained(&mut params, &unknown).is_err());
}

#[test]
fn pretraining_keeps_the_bottom_layers_and_seeds_training() {
    let cfg = micro_config();
    let data = dataset(&cfg, 4);
    let opts = TrainOptions::new(AuxMode::None, 2, 5);
    let ck = pretrain_encoder(&data, &cfg, 1, &opts).unwrap();
    assert!(!ck.params.is_empty());
    assert!(ck.params.names().all(|n| n.starts_with(&encoder_layer_prefix(0))));
    for k in [0, cfg.encoder_layers + 1] {
        assert!(pretrain_encoder(&data, &cfg, k, &opts).is_err());
    }
    let all = pretrain_encoder(&data, &cfg, cfg.encoder_layers, &opts).unwrap();
    assert!(all.params.names().all(|n| n.starts_with("encoder.")));

    // With zero steps the trained model still holds the copied tensors.
    let init = TrainOptions { init_from: Some(ck.params.clone()), ..TrainOptions::new(AuxMode::None, 0, 6) };
    let rep = train(&data, &cfg, &init).unwrap();
    for (name, t) in ck.params.iter() {
        assert_eq!(rep.checkpoint.params.get(name).unwrap(), t);
    }
    let narrow = ModelConfig { encoder_units: cfg.encoder_units + 2, ..cfg.clone() };
    let init = TrainOptions { init_from: Some(ck.params), ..TrainOptions::new(AuxMode::None, 1, 6) };
    assert!(train(&dataset(&narrow, 4), &narrow, &init).is_err());
}

#[test]
fn optimizer_state_is_factored_for_matrices() {
    let cfg = micro_config();
    let params: ParamStore<f32> = init_params(&cfg, AuxMode::Both, 1).unwrap();
    let state = AdafactorState::new(&params);
    assert_eq!(state.moments.len(), params.len());
    for (name, t) in params.iter() {
        match &state.moments[name] {
            Moments::Factored { row, col } => {
                assert_eq!(t.rank(), 2, "{name}");
                assert_eq!((row.len(), col.len()), (t.shape()[0], t.shape()[1]));
            }
            Moments::Full(v) => {
                assert_eq!(t.rank(), 1, "{name}");
                assert_eq!(v.len(), t.len());
            }
        }
    }
    let rep = run(&cfg, AuxMode::Both, 3, 1);
    assert_eq!(rep.checkpoint.optimizer.step, 3);
    let names: Vec<&String> = rep.checkpoint.params.names().collect();
    assert_eq!(rep.checkpoint.optimizer.moments.keys().collect::<Vec<_>>(), names);
}

#[test]
fn weight_noise_perturbs_only_lstm_weights_with_the_requested_spread() {
    let mut p = ParamStore::<f32>::new();
    p.insert("decoder.lstm0.W", Tensor::zeros(&[200, 200])).unwrap();
    p.insert("decoder.lstm0.b", Tensor::zeros(&[200])).unwrap();
    p.insert("decoder.frame.W", Tensor::zeros(&[20, 20])).unwrap();
    let sigma = 0.05;
    let noisy = apply_weight_noise(&p, sigma, 3, 7).unwrap();
    let w = noisy.get("decoder.lstm0.W").unwrap().data();
    let n = w.len() as f64;
    let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 4.0 * sigma / n.sqrt(), "mean {mean}");
    assert!((sd / sigma - 1.0).abs() < 0.02, "sd {sd}");
    assert_eq!(noisy.get("decoder.lstm0.b"), p.get("decoder.lstm0.b"));
    assert_eq!(noisy.get("decoder.frame.W"), p.get("decoder.frame.W"));
    assert_eq!(noisy, apply_weight_noise(&p, sigma, 3, 7).unwrap());
    assert_ne!(noisy, apply_weight_noise(&p, sigma, 3, 8).unwrap());
    assert_eq!(apply_weight_noise(&p, 0.0, 3, 7).unwrap(), p);
    assert!(apply_weight_noise(&p, -1.0, 3, 7).is_err());
}

proptest! {
    #[test]
    fn factored_second_moments_stay_positive(
        rows in 1usize..6,
        cols in 1usize..6,
        steps in 1u64..6,
        scale in prop::sample::select(vec![0.0f32, 1e-6, 1.0, 100.0]),
        seed in 0u64..1000,
    ) {
        let mut r = s2st_tensor::rng::stream(seed, "test.adafactor", 0, 0);
        let mut p = Tensor::<f32>::zeros(&[rows, cols]);
        let mut m = Moments::Factored { row: vec![0.0; rows], col: vec![0.0; cols] };
        for t in 1..=steps {
            let g = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| scale * r.random_range(-1.0f32..1.0)).collect()).unwrap();
            adafactor_update(&mut p, &g, &mut m, 0.01, t).unwrap();
            let Moments::Factored { row, col } = &m else { unreachable!() };
            prop_assert!(row.iter().chain(col).all(|&v| v > 0.0 && v.is_finite()));
            prop_assert!(p.all_finite());
            // Update clipping bounds the RMS step by the learning rate.
            let rms = (p.data().iter().map(|v| v * v).sum::<f32>() / p.len() as f32).sqrt();
            prop_assert!(rms <= 0.01 * t as f32 * (1.0 + 1e-4));
        }
    }
}
