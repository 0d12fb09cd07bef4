//! End-to-end: synthetic data, multistage training, file round trips,
//! whitening, query expansion and exact evaluation.

use listwise_ap::embed::{Embedder, LinearEmbedder};
use listwise_ap::exact::{evaluate_retrieval, Protocol};
use listwise_ap::io::{load_descriptors, load_ground_truth, load_labels, save_desc1, save_ground_truth, save_labels, LabelRow};
use listwise_ap::retrieval::{alpha_qe_all, fit_whitening, whiten_all, QeConfig};
use listwise_ap::training::{embed_all, embed_eval, train, LossKind, SyntheticConfig, SyntheticDataset, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(loss: LossKind) -> TrainConfig {
    TrainConfig {
        lr0: 1e-2,
        total_iters: 40,
        batch_size: 64,
        loss,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn trained_descriptors_survive_disk_and_postprocessing() {
    let ds = SyntheticDataset::generate(&SyntheticConfig::fixture(7)).unwrap();
    let mut model = LinearEmbedder::random(ds.feature_dim(), 32, &mut ChaCha8Rng::seed_from_u64(7));
    let out = train(&mut model, &ds, &small_config(LossKind::ApQ)).unwrap();
    assert!(out.final_map > out.initial_map);
    assert_eq!(out.history.len(), 40);
    assert_eq!(out.counters.updates, 40);
    assert_eq!(out.counters.forwards, 2 * 40 * 64);
    assert_eq!(out.counters.backwards, 40 * 64);

    let (q, d) = embed_eval(&model, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (qp, dp, gp, lp) = (
        dir.path().join("q.desc"),
        dir.path().join("d.desc"),
        dir.path().join("gt.json"),
        dir.path().join("q.csv"),
    );
    save_desc1(&qp, q.as_matrix()).unwrap();
    save_desc1(&dp, d.as_matrix()).unwrap();
    save_ground_truth(&gp, &ds.judgments).unwrap();
    let rows: Vec<LabelRow> = ds
        .queries
        .ids
        .iter()
        .zip(&ds.queries.labels)
        .map(|(id, c)| LabelRow { id: id.clone(), class_label: c.to_string() })
        .collect();
    save_labels(&lp, &rows).unwrap();

    let q2 = load_descriptors(&qp).unwrap();
    let d2 = load_descriptors(&dp).unwrap();
    let gt = load_ground_truth(&gp).unwrap();
    assert_eq!(load_labels(&lp).unwrap(), rows);
    assert_eq!(gt, ds.judgments);

    let direct = evaluate_retrieval(&q, &ds.queries.ids, &d, &ds.db.ids, &ds.judgments, Protocol::Medium).unwrap();
    let reloaded = evaluate_retrieval(&q2, &ds.queries.ids, &d2, &ds.db.ids, &gt, Protocol::Medium).unwrap();
    // DESC1 stores f32, so rankings may move by at most rounding-level ties.
    assert!((direct.map - reloaded.map).abs() < 1e-6);

    let hard = evaluate_retrieval(&q, &ds.queries.ids, &d, &ds.db.ids, &ds.judgments, Protocol::Hard).unwrap();
    assert!(hard.map > 0.0 && hard.map <= 1.0);

    let train_desc = embed_all(&model, &ds.train.features).unwrap();
    let w = fit_whitening(&train_desc, 16).unwrap();
    assert_eq!(w.output_dim(), 16);
    let (qw, dw) = (whiten_all(&w, &q).unwrap(), whiten_all(&w, &d).unwrap());
    assert_eq!(qw.dim(), 16);
    let whitened = evaluate_retrieval(&qw, &ds.queries.ids, &dw, &ds.db.ids, &ds.judgments, Protocol::Medium).unwrap();
    assert!(whitened.map > 0.5);

    let expanded = alpha_qe_all(&q, &d, &QeConfig::default()).unwrap();
    assert_eq!(expanded.count(), q.count());
    for r in expanded.iter_rows() {
        assert!((r.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic_and_triplet_counters_follow_the_budget() {
    let ds = SyntheticDataset::generate(&SyntheticConfig::fixture(3)).unwrap();
    let run = |loss| {
        let mut model = LinearEmbedder::random(ds.feature_dim(), 32, &mut ChaCha8Rng::seed_from_u64(3));
        let out = train(&mut model, &ds, &small_config(loss)).unwrap();
        (model.params().to_vec(), out)
    };
    let (p1, o1) = run(LossKind::ApQ);
    let (p2, o2) = run(LossKind::ApQ);
    assert_eq!(p1, p2);
    assert_eq!(o1.final_map, o2.final_map);

    let (_, t) = run(LossKind::Triplet);
    let per_update = 3 * 64;
    assert_eq!(t.counters.backwards, 40 * per_update);
    assert_eq!(t.counters.updates, 40);
}
