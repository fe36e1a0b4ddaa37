use prefixmtl::corpus::{build_corpus, RawTask};
use prefixmtl::model::EncoderModel;
use prefixmtl::probing::*;
use prefixmtl::seed;
use prefixmtl::synthetic::{pair_task, FamilyPool, PairTaskSpec};
use prefixmtl::training::{ModelShape, PreparedCorpus, TrainConfig};
use proptest::prelude::*;

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        lr: 2e-3,
        seed,
        model: ModelShape {
            layers: 1,
            hidden: 24,
            heads: 2,
            ffn: 48,
            max_len: 16,
            dropout: 0.0,
        },
        ..TrainConfig::default()
    }
}

/// `orig` and its renamed copy `twin`, plus two tasks over unrelated words.
fn twin_corpus() -> Vec<RawTask> {
    let task = |pool: &FamilyPool, name: &str| {
        pair_task(
            pool,
            &PairTaskSpec {
                name: name.into(),
                context_words: 4,
                train: 120,
                dev: 10,
                mapping: pool.mapping(0),
                seed: 0,
            },
        )
    };
    let (p, q, r) = (FamilyPool::new("pp", 10, 10), FamilyPool::new("qq", 10, 10), FamilyPool::new("rr", 10, 10));
    let orig = task(&p, "orig");
    let mut twin = orig.clone();
    twin.descriptor.name = "twin".into();
    vec![orig, task(&q, "other"), twin, task(&r, "far")]
}

fn trained(seed: u64) -> (PreparedCorpus, EncoderModel, Vec<prefixmtl::training::EpochRecord>) {
    let c = config(seed);
    let corpus = build_corpus(&twin_corpus(), 2, seed).unwrap();
    let data = PreparedCorpus::from_config(&corpus, &c).unwrap();
    let (model, history) = train_probe_model(&data, &c, None).unwrap();
    (data, model, history)
}

fn names(data: &PreparedCorpus) -> Vec<String> {
    data.tasks.iter().map(|t| t.name.clone()).collect()
}

#[test]
fn twin_task_ranks_first_and_unrelated_tasks_score_lower() {
    let (data, model, history) = trained(0);
    assert!(history.last().unwrap().mlm < history[0].mlm);
    let m = RelationshipMatrix::from_model(&model, &data, &names(&data), Normalization::Global).unwrap();
    assert_eq!(rank_complementary(&m, "orig", 1).unwrap(), vec!["twin"]);
    assert_eq!(rank_complementary(&m, "twin", 1).unwrap(), vec!["orig"]);
    let pair = m.score("orig", "twin").unwrap();
    assert!(m.score("orig", "other").unwrap() < pair);
    assert!(m.score("orig", "far").unwrap() < pair);
    assert_eq!(rank_complementary(&m, "orig", 3).unwrap().len(), 3);
}

#[test]
fn every_prefix_row_is_trained() {
    let c = config(1);
    let corpus = build_corpus(&twin_corpus(), 2, 1).unwrap();
    let data = PreparedCorpus::from_config(&corpus, &c).unwrap();
    let init = EncoderModel::new(c.model.encoder(data.vocab.len()), c.seed).unwrap();
    let (model, _) = train_probe_model(&data, &c, None).unwrap();
    for task in &data.tasks {
        assert_ne!(model.embedding_row(task.prefix_id), init.embedding_row(task.prefix_id), "{}", task.name);
    }
}

#[test]
fn probe_sequences_carry_no_option_text() {
    let c = config(0);
    let corpus = build_corpus(&twin_corpus(), 2, 0).unwrap();
    let data = PreparedCorpus::from_config(&corpus, &c).unwrap();
    for (task, raw) in data.tasks.iter().zip(&corpus.tasks) {
        for (ex, src) in task.train.iter().zip(&raw.examples) {
            let text = data.vocab.decode(&ex.probe.ids);
            assert_eq!(text, format!("[CLS] {} {} [SEP] [SEP]", raw.prefix, src.context));
        }
    }
}

#[test]
fn matrix_is_symmetric_with_unit_diagonal_and_reproducible() {
    let (data, model, _) = trained(2);
    let m = RelationshipMatrix::from_model(&model, &data, &names(&data), Normalization::Global).unwrap();
    for i in 0..m.tasks.len() {
        assert_eq!(m.raw[i][i], 1.0);
        assert_eq!(m.normalized[i][i], 1.0);
        for j in 0..m.tasks.len() {
            assert_eq!(m.raw[i][j], m.raw[j][i]);
            assert_eq!(m.normalized[i][j], m.normalized[j][i]);
            assert!((0.0..=1.0).contains(&m.normalized[i][j]));
        }
    }
    let (data2, model2, _) = trained(2);
    let again = RelationshipMatrix::from_model(&model2, &data2, &names(&data2), Normalization::Global).unwrap();
    assert_eq!(serde_json::to_string(&m).unwrap(), serde_json::to_string(&again).unwrap());

    let dir = tempfile::tempdir().unwrap();
    m.save(&dir.path().join("m.json")).unwrap();
    assert_eq!(RelationshipMatrix::load(&dir.path().join("m.json")).unwrap(), m);
    m.write_pgm(&dir.path().join("m.pgm"), 3).unwrap();
    let pgm = std::fs::read(dir.path().join("m.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n12 12\n255\n"));
    assert_eq!(pgm.len(), b"P5\n12 12\n255\n".len() + 144);
}

#[test]
fn missing_prefix_is_reported() {
    let (data, model, _) = trained(0);
    let err = RelationshipMatrix::from_model(&model, &data, &["nope".to_string()], Normalization::Global).unwrap_err();
    assert!(matches!(err, prefixmtl::Error::MissingPrefix(_)));
}

#[test]
fn baselines_follow_their_definitions() {
    let c = config(0);
    let corpus = build_corpus(&twin_corpus(), 2, 0).unwrap();
    let data = PreparedCorpus::from_config(&corpus, &c).unwrap();
    let length = BaselineMeasure::compute(BaselineKind::Length, &data).unwrap();
    let vocab = BaselineMeasure::compute(BaselineKind::Vocab, &data).unwrap();
    assert_eq!(length.score("orig", "orig").unwrap(), 0.0);
    assert_eq!(vocab.score("orig", "twin").unwrap(), 1.0);
    assert_eq!(vocab.score("orig", "other").unwrap(), 0.0);
    for i in 0..4 {
        for j in 0..4 {
            assert!(length.scores[i][j] <= 0.0);
            assert_eq!(length.scores[i][j], length.scores[j][i]);
            assert!((0.0..=1.0).contains(&vocab.scores[i][j]));
        }
    }
    let (a, b) = (&data.tasks[0], &data.tasks[1]);
    assert_eq!(baseline_length(a, b).unwrap(), -(a.mean_length - b.mean_length).abs());
}

#[test]
fn length_baseline_arithmetic() {
    let c = config(0);
    let corpus = build_corpus(&twin_corpus(), 2, 0).unwrap();
    let data = PreparedCorpus::from_config(&corpus, &c).unwrap();
    let mut a = data.tasks[0].clone();
    let mut b = data.tasks[1].clone();
    a.mean_length = 10.0;
    b.mean_length = 14.5;
    assert_eq!(baseline_length(&a, &b).unwrap(), -4.5);
    assert_eq!(baseline_length(&b, &a).unwrap(), -4.5);
    b.train.clear();
    assert!(matches!(baseline_length(&a, &b), Err(prefixmtl::Error::EmptyTask(_))));
}

proptest! {
    #[test]
    fn pearson_is_invariant_to_positive_affine_maps(k in 0u64..500, alpha in 0.01f64..100.0, beta in -50.0f64..50.0) {
        let mut rng = seed::rng(&[k]);
        let a: Vec<f64> = (0..16).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let mapped: Vec<f64> = a.iter().map(|x| alpha * x + beta).collect();
        let r = pearson(&a, &b).unwrap();
        prop_assert!((pearson(&mapped, &b).unwrap() - r).abs() < 1e-12);
        prop_assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(pearson(&a, &b).unwrap(), pearson(&b, &a).unwrap());
    }
}
