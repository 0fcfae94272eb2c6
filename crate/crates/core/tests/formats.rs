use densetrain::corpus::{self, Corpus, Document, Qrels, RetrievalRun};
use densetrain::encoder::{
    init_params, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, EncoderConfig,
};
use densetrain::pairgen::{read_pairs, read_triples, write_pairs, write_triples, Origin, TrainingPair, TrainingTriple};
use densetrain::toy::{self, ToyConfig};
use densetrain::Error;

fn small_corpus() -> Corpus {
    let mut docs = vec![
        Document::new("d1", Some("Statins"), "Statins lower LDL cholesterol."),
        Document::new("d2", None, "Unicode survives: \u{3b2}-blockers \"quoted\"\ttab"),
    ];
    docs[0].source = "pubmed".into();
    Corpus::new("c", docs).unwrap()
}

#[test]
fn corpus_jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let c = small_corpus();
    corpus::write_jsonl(&c, &path).unwrap();
    let back = corpus::ingest_jsonl(&path).unwrap();
    assert_eq!(back.documents()[0], c.documents()[0]);
    // a missing source defaults to the file stem
    assert_eq!(back.documents()[1].source, "corpus");
    assert_eq!(back.documents()[1].text, c.documents()[1].text);
}

#[test]
fn qrels_and_run_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut qrels = Qrels::default();
    qrels.insert("q1", "d1", 2).unwrap();
    qrels.insert("q1", "d2", 0).unwrap();
    qrels.insert("q2", "d2", 1).unwrap();
    let qpath = dir.path().join("qrels.tsv");
    corpus::write_qrels(&qrels, &qpath).unwrap();
    assert_eq!(corpus::load_qrels(&qpath).unwrap(), qrels);

    let mut run = RetrievalRun::default();
    run.insert_unsorted(
        "q1",
        vec![
            ("d2".into(), 0.1 + 0.2),
            ("d1".into(), -1e-300),
            ("d3".into(), 0.30000000000000004),
        ],
    )
    .unwrap();
    run.insert_unsorted("q2", vec![("d1".into(), 7.0)]).unwrap();
    let rpath = dir.path().join("run.trec");
    corpus::write_run(&run, &rpath, "tag").unwrap();
    assert_eq!(corpus::read_run(&rpath).unwrap(), run);
    // equal scores are listed by ascending id
    assert_eq!(run.rankings["q1"][0].0, "d2");
    assert_eq!(run.rankings["q1"][1].0, "d3");
}

#[test]
fn run_parse_rejects_out_of_order_ranks() {
    let text = "q1 Q0 d1 2 0.5 t\n";
    let err = corpus::parse_run(text, std::path::Path::new("x.trec")).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err}");
}

#[test]
fn pairs_and_triples_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut pair = TrainingPair::new("statin safety", "Statins lower LDL cholesterol.", Origin::Labeled);
    pair.id = Some("p7".into());
    let pairs = vec![pair.clone(), TrainingPair::new("b", "c", Origin::Labeled)];
    let ppath = dir.path().join("pairs.jsonl");
    write_pairs(&ppath, &pairs).unwrap();
    assert_eq!(read_pairs(&ppath).unwrap(), pairs);

    let triples = vec![TrainingTriple::new(pair, vec!["Aspirin thins blood.".into()])];
    let tpath = dir.path().join("triples.jsonl");
    write_triples(&tpath, &triples).unwrap();
    assert_eq!(read_triples(&tpath).unwrap(), triples);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let params = init_params(&EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 16,
        seed: 3,
        ..EncoderConfig::default()
    })
    .unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&params, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, params.config);
    assert_eq!(write_checkpoint(&back), write_checkpoint(&params));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let params = init_params(&EncoderConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 16,
        ..EncoderConfig::default()
    })
    .unwrap();
    let bytes = write_checkpoint(&params);
    assert!(matches!(
        read_checkpoint(&bytes[..bytes.len() - 8]),
        Err(Error::Checkpoint(_))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad), Err(Error::Checkpoint(_))));
}

#[test]
fn toy_benchmark_files_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let bench = toy::generate(&ToyConfig::default()).unwrap();
    bench.write_dir(dir.path()).unwrap();
    let c = corpus::ingest_jsonl(&dir.path().join("corpus.jsonl")).unwrap();
    assert_eq!(c.len(), bench.corpus.len());
    for (a, b) in c.iter().zip(bench.corpus.iter()) {
        assert_eq!((&a.id, &a.title, &a.text), (&b.id, &b.title, &b.text));
    }
    assert_eq!(corpus::load_qrels(&dir.path().join("qrels.tsv")).unwrap(), bench.qrels);
}
