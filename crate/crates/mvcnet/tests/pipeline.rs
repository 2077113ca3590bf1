use std::collections::HashMap;
use std::path::Path;

use mvcnet::consolidation::DecisionHead;
use mvcnet::container::TensorArchive;
use mvcnet::dataset::{make_synthesized_views, stream_sessions, toy_dataset, StreamProtocol, ToyConfig};
use mvcnet::evaluation::{avg_acc, bwt, evaluate_classes};
use mvcnet::sparse_features::EncoderConfig;
use mvcnet::trainer::{self, build_dataset, CachedModel, Family, Mode, RunConfig, Trainer};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(classes: usize, views: usize, seed: u64) -> RunConfig {
    let mut c = RunConfig { seed, ..RunConfig::default() };
    c.protocol.family = Family::Toy;
    c.protocol.num_views = views;
    c.protocol.toy = ToyConfig { num_classes: classes, input_dim: 12, train_per_class: 40, test_per_class: 20, separation: 2.0 };
    c.encoder.groups = 3;
    c.encoder.nodes = 6;
    c.encoder.max_iter = 10;
    c.fusion.width = 10;
    c.consolidation.epochs_per_session = 2;
    c.consolidation.batch_size = 16;
    c
}

fn toy_run(config: &RunConfig) -> trainer::RunOutcome {
    let data = build_dataset(config, Path::new(".")).unwrap();
    trainer::run(config, &data).unwrap()
}

#[test]
fn two_class_two_view_stream_is_deterministic() {
    let config = small_config(2, 2, 5);
    let a = toy_run(&config);
    let b = toy_run(&config);
    assert_eq!(a.trainer.to_archive().to_bytes(), b.trainer.to_archive().to_bytes());
    assert_eq!(a.matrix.to_csv(), b.matrix.to_csv());
    assert_eq!(a.manifest.sessions.len(), 4);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let config = small_config(3, 2, 6);
    let data = build_dataset(&config, Path::new(".")).unwrap();
    let out = trainer::run(&config, &data).unwrap();
    let bytes = out.trainer.to_archive().to_bytes();
    let back = Trainer::from_archive(&TensorArchive::read(&mut bytes.as_slice()).unwrap()).unwrap();
    assert_eq!(back.to_archive().to_bytes(), bytes);
    for batch in &data.test {
        assert_eq!(
            out.trainer.predict(batch.view_id, batch.inputs.view()).unwrap(),
            back.predict(batch.view_id, batch.inputs.view()).unwrap()
        );
    }
}

#[test]
fn rerun_from_manifest_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(3, 2, 7);
    config.output.dir = Some(dir.path().join("first"));
    let first = toy_run(&config);
    let text = std::fs::read_to_string(dir.path().join("first/manifest.json")).unwrap();
    let manifest: trainer::RunManifest = serde_json::from_str(&text).unwrap();
    let mut again = manifest.config.clone();
    again.output.dir = Some(dir.path().join("second"));
    let second = toy_run(&again);
    assert_eq!(first.matrix.to_csv(), second.matrix.to_csv());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("report.csv")).unwrap();
    assert_eq!(read("first"), read("second"));
}

#[test]
fn single_class_single_view_has_null_bwt() {
    let out = toy_run(&small_config(1, 1, 8));
    assert_eq!(out.matrix.num_classes(), 1);
    assert_eq!(out.manifest.bwt, None);
    assert_eq!(out.manifest.avg_acc, out.matrix.accuracy(0, 0).unwrap());
}

#[test]
fn per_view_cadence_records_progress() {
    let mut config = small_config(2, 3, 9);
    config.eval_cadence = trainer::EvalCadence::PerView;
    let out = toy_run(&config);
    assert_eq!(out.manifest.progress.len(), 4);
    assert_eq!(out.rows.len(), 2);
}

#[test]
fn modes_set_consolidation_strength() {
    let mut config = small_config(2, 1, 1);
    assert_eq!(config.effective_mu(), 1000.0);
    config.mode = Mode::Net1;
    assert_eq!(config.effective_mu(), 0.0);
    config.mode = Mode::Net2;
    assert_eq!(config.effective_mu(), 0.0);
    let out = toy_run(&config);
    assert_eq!(out.trainer.head().mu(), 0.0);
}

#[test]
fn out_of_order_sessions_are_rejected() {
    let config = small_config(2, 2, 3);
    let data = build_dataset(&config, Path::new(".")).unwrap();
    let mut t = Trainer::new(config.clone(), data.view_dims.clone()).unwrap();
    t.train_session(data.train_batch(0, 1).unwrap()).unwrap();
    assert!(t.train_session(data.train_batch(0, 0).unwrap()).is_err());
    t.train_session(data.train_batch(1, 0).unwrap()).unwrap();
    assert!(t.train_session(data.train_batch(0, 0).unwrap()).is_err());
}

#[test]
fn state_size_does_not_grow_with_sessions() {
    let mut config = small_config(10, 3, 4);
    config.consolidation.epochs_per_session = 1;
    let data = build_dataset(&config, Path::new(".")).unwrap();
    let protocol = StreamProtocol::new("toy", &data, (0..10).collect(), Default::default(), 4).unwrap();
    let sessions = stream_sessions(&protocol, &data);
    let mut t = Trainer::new(config.clone(), data.view_dims.clone()).unwrap();
    let mut sizes = Vec::new();
    for s in &sessions {
        t.train_session(s).unwrap();
        sizes.push(t.state_bytes());
    }
    let after3 = sizes[2];
    let after30 = sizes[29];
    let head_growth = 9 * (config.fusion.width * 4 + 2) * std::mem::size_of::<f64>();
    assert_eq!(after30 - after3, head_growth, "{after3} -> {after30}");
}

#[test]
fn large_mu_pins_important_weights() {
    let mut config = small_config(3, 2, 30);
    config.consolidation.mu = 1e8;
    config.consolidation.epochs_per_session = 5;
    config.consolidation.learning_rate = 0.05;
    let data = build_dataset(&config, Path::new(".")).unwrap();
    let mut t = Trainer::new(config, data.view_dims.clone()).unwrap();
    for c in 0..2 {
        for v in 0..2 {
            t.train_session(data.train_batch(c, v).unwrap()).unwrap();
        }
    }
    t.train_session(data.train_batch(2, 0).unwrap()).unwrap();
    t.train_session(data.train_batch(2, 1).unwrap()).unwrap();
    let head = t.head();
    let anchor = head.anchor();
    let fisher = head.fisher_sum().slice(s![.., ..2]).to_owned();
    let mut sorted: Vec<f64> = fisher.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let now = head.weights().slice(s![.., ..2]).to_owned();
    let drift = ndarray::Zip::from(&now)
        .and(&anchor)
        .and(&fisher)
        .fold(0.0f64, |m, &w, &a, &f| if f > median { m.max((w - a).abs()) } else { m });
    assert!(drift < 1e-3, "drift {drift}");
    assert!(head.weights().column(2).iter().any(|&w| w != 0.0));
}

#[test]
fn new_classes_train_freely_under_consolidation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut head = DecisionHead::new(4, 1e6).unwrap();
    head.expand(0).unwrap();
    let x = Array2::from_shape_simple_fn((10, 4), || rng.random_range(-1.0..1.0));
    let f = head.fisher_diag(x.view(), &[0; 10]).unwrap();
    head.end_of_class(0, &f).unwrap();
    head.expand(1).unwrap();
    let before = head.weights().column(1).to_owned();
    let g = head.swc_loss_and_grad(x.view(), &[1; 10]).unwrap();
    head.step(g.grad_w.view(), g.grad_b.view(), 0.5).unwrap();
    assert_ne!(head.weights().column(1), before);
}

#[test]
fn synthesized_views_are_seeded_and_distinct() {
    let base = toy_dataset(&ToyConfig { num_classes: 3, input_dim: 10, train_per_class: 30, test_per_class: 10, separation: 1.0 }, 2)
        .unwrap();
    let cfg = EncoderConfig { groups: 2, nodes: 5, max_iter: 5, ..EncoderConfig::default() };
    let a = make_synthesized_views(&base, 3, &cfg, 9).unwrap();
    let b = make_synthesized_views(&base, 3, &cfg, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.views_per_class, 3);
    assert_eq!(a.train.len(), 9);
    let v0 = a.train_batch(1, 0).unwrap();
    let v1 = a.train_batch(1, 1).unwrap();
    assert_eq!(v0.len(), v1.len());
    assert_eq!(v1.input_dim(), 10);
    assert_ne!(v0.inputs, v1.inputs);
    assert!(a.train.iter().chain(&a.test).all(|b| b.inputs.iter().all(|v| v.is_finite())));
}

#[test]
fn cached_and_direct_predictions_agree() {
    let config = small_config(3, 2, 12);
    let data = build_dataset(&config, Path::new(".")).unwrap();
    let out = trainer::run(&config, &data).unwrap();
    let test: Vec<_> = data.test.iter().collect();
    let classes = out.trainer.classes().to_vec();
    let mut cache = HashMap::new();
    let cached = evaluate_classes(&mut CachedModel::new(&out.trainer, &mut cache), &test, &classes, 2).unwrap();
    let mut direct = out.trainer.clone();
    let plain = evaluate_classes(&mut direct, &test, &classes, 2).unwrap();
    assert_eq!(cached, plain);
    assert_eq!(out.rows.last().unwrap(), &plain);
    assert_eq!(avg_acc(&out.matrix).unwrap(), out.manifest.avg_acc);
    assert_eq!(bwt(&out.matrix).unwrap(), out.manifest.bwt);
}

#[test]
fn toy_report_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(4, 2, 42);
    config.output.dir = Some(dir.path().to_path_buf());
    toy_run(&config);
    let got = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/toy_report.csv");
    if std::env::var_os("MVCNET_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &got).unwrap();
    }
    let want = std::fs::read_to_string(&golden).expect("golden report missing; run with MVCNET_BLESS=1 once");
    assert_eq!(got, want);
}

#[test]
fn batch_mean_absorption_takes_one_vector_per_block() {
    let mut config = small_config(2, 1, 13);
    config.fusion.absorb = trainer::Absorb::BatchMeans;
    let data = build_dataset(&config, Path::new(".")).unwrap();
    let mut t = Trainer::new(config.clone(), data.view_dims.clone()).unwrap();
    t.train_session(data.train_batch(0, 0).unwrap()).unwrap();
    let blocks = 40usize.div_ceil(config.consolidation.batch_size) as u64;
    assert_eq!(t.fusion_layers()[0].projector.samples_absorbed(), blocks);
    config.fusion.absorb = trainer::Absorb::Rows;
    let mut t = Trainer::new(config, data.view_dims.clone()).unwrap();
    t.train_session(data.train_batch(0, 0).unwrap()).unwrap();
    assert_eq!(t.fusion_layers()[0].projector.samples_absorbed(), 40);
}
