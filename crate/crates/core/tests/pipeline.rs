use rebalance::augment::AugmentMethod;
use rebalance::balancer::{balance, BalancePlan, Generator, TraditionalGenerator};
use rebalance::classifier::{LinearModel, TextClassifier, TfidfLinear, TrainConfig};
use rebalance::corpus::{load_corpus, split, CorpusFormat, Label, Origin, SplitSpec};
use rebalance::eval::evaluate;
use rebalance::fixtures::{self, CorpusShape};
use rebalance::llm_augment::{generate, load_patterns, LlmConfig, PatternId, Transcript, Transport};
use rebalance::rules::load_rules;
use rebalance::textproc::{normalize, Vocabulary};

#[test]
fn balance_train_and_evaluate() {
    let corpus = fixtures::synth_corpus(&CorpusShape::default()).map_texts(normalize).unwrap();
    let (train, test) = split(&corpus, &SplitSpec::default()).unwrap();
    let res = fixtures::resources(42);
    let mut a = TraditionalGenerator::for_method(AugmentMethod::SubstituteSynonym, &res).unwrap();
    let mut b = TraditionalGenerator::for_method(AugmentMethod::InsertEmbedding, &res).unwrap();
    let plan = BalancePlan::to_parity(&train, vec!["substitute_synonym".into(), "insert_embedding".into()], 3);
    let gens: Vec<&mut dyn Generator> = vec![&mut a, &mut b];
    let (grown, trace) = balance(&train, &plan, gens).unwrap();

    assert_eq!(grown.class_count(Label::Negative), grown.class_count(Label::Positive));
    assert_eq!(trace.rounds.last().unwrap().after, 757);
    for e in grown.examples().iter().filter(|e| e.is_augmented()) {
        let Origin::Augmented { parent_id, .. } = &e.origin else { unreachable!() };
        assert_eq!(train.get(parent_id).unwrap().label, Label::Negative);
    }

    let clf = TfidfLinear::fit(&grown, 1, &TrainConfig::default()).unwrap();
    let report = evaluate(&clf, &test).unwrap();
    assert!(report.class(Label::Negative).f1 > 0.5, "{:?}", report.class(Label::Negative));
}

#[test]
fn saved_model_predicts_identically() {
    let corpus = fixtures::synth_corpus(&CorpusShape::default()).map_texts(normalize).unwrap();
    let clf = TfidfLinear::fit(&corpus, 2, &TrainConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    clf.vocab.save(&dir.path().join("vocab.json")).unwrap();
    clf.model.save(&dir.path().join("model.json")).unwrap();
    let back = TfidfLinear::new(
        Vocabulary::load(&dir.path().join("vocab.json")).unwrap(),
        LinearModel::load(&dir.path().join("model.json")).unwrap(),
        clf.threshold,
    )
    .unwrap();
    for e in corpus.examples().iter().take(200) {
        assert_eq!(clf.predict_proba_text(&e.text).unwrap(), back.predict_proba_text(&e.text).unwrap());
    }
}

#[test]
fn written_fixture_set_loads_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let written = fixtures::write_fixture_set(dir.path(), 42).unwrap();
    assert!(written.iter().all(|p| p.exists()));

    let corpus = load_corpus(&dir.path().join(fixtures::CORPUS_FILE), CorpusFormat::Csv).unwrap();
    assert_eq!(corpus.class_count(Label::Negative), 122);
    assert_eq!(load_rules(&dir.path().join(fixtures::RULES_FILE)).unwrap().len(), 3);

    let transcript = Transcript::load(&dir.path().join(fixtures::TRANSCRIPT_FILE)).unwrap();
    let patterns = load_patterns(Some(&dir.path().join(fixtures::PROMPTS_DIR))).unwrap();
    let source = corpus.examples().iter().find(|e| e.label == Label::Negative).unwrap();
    let source = rebalance::corpus::LabeledExample { text: normalize(&source.text), ..source.clone() };
    let req = LlmConfig::default().request(&patterns[&PatternId::Recipe], &source);
    let records = generate(&req, &Transport::Replay(&transcript)).unwrap();
    assert_eq!(records.len(), 5);
    assert!(records.iter().all(|r| r.label == Label::Negative && r.parent_id == source.id));
}
