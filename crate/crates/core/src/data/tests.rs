use std::io::Write as _;
use std::path::Path;

use super::*;

fn record(id: &str, domain: Domain, lp: LangPair, da: f64) -> QeRecord {
    QeRecord {
        id: id.into(),
        source: "a source".into(),
        translation: "a translation".into(),
        lang_pair: lp,
        domain,
        annotator_scores: vec![],
        da_score: da,
    }
}

fn write_file(dir: &Path, name: &str, body: &str) {
    let mut f = std::fs::File::create(dir.join(name)).unwrap();
    f.write_all(body.as_bytes()).unwrap();
}

#[test]
fn annotator_averaging() {
    assert_eq!(average_annotators(&[75.0, 80.0, 85.0]).unwrap(), 80.0);
    assert!(matches!(average_annotators(&[70.0, 70.0]), Err(DataError::TooFewAnnotators(2))));
    assert!((average_annotators(&[0.0, 0.0, 100.0]).unwrap() - 100.0 / 3.0).abs() < 1e-9);
    assert!(matches!(average_annotators(&[10.0, 20.0, 101.0]), Err(DataError::ScoreOutOfRange(_))));
}

#[test]
fn record_validation() {
    assert!(record("a", Domain::General, LangPair::EnHi, 50.0).validate().is_ok());
    assert!(record("a", Domain::General, LangPair::EnHi, 120.0).validate().is_err());
    assert!(record("a", Domain::General, LangPair::EnHi, f64::NAN).validate().is_err());
    assert!(record("", Domain::General, LangPair::EnHi, 50.0).validate().is_err());
    let mut r = record("a", Domain::General, LangPair::EnHi, 80.0);
    r.annotator_scores = vec![75.0, 80.0, 85.0];
    assert!(r.validate().is_ok());
    r.da_score = 80.1;
    assert!(r.validate().is_err());
    r.annotator_scores = vec![80.1, 80.1];
    assert!(r.validate().is_err());
}

#[test]
fn catalog_membership() {
    let c = DomainCatalog::default();
    assert!(!c.contains(Domain::Legal, LangPair::EnHi));
    assert!(!c.contains(Domain::Legal, LangPair::EnMr));
    assert!(c.contains(Domain::Legal, LangPair::EnTe));
    assert!(!c.contains(Domain::Healthcare, LangPair::EnTe));
    assert!(!c.contains(Domain::Tourism, LangPair::EnTa));
    assert_eq!(c.pairs(Domain::General).len(), 5);
}

#[test]
fn parsing_names() {
    assert_eq!("en-gu".parse::<LangPair>().unwrap(), LangPair::EnGu);
    assert!("en-fr".parse::<LangPair>().is_err());
    assert_eq!("Legal".parse::<Domain>().unwrap(), Domain::Legal);
    assert_eq!(serde_json::to_string(&LangPair::EnTa).unwrap(), "\"en-ta\"");
}

#[test]
fn jsonl_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let good = serde_json::to_string(&record("t1", Domain::General, LangPair::EnHi, 50.0)).unwrap();
    let bad_range = serde_json::to_string(&record("t2", Domain::General, LangPair::EnHi, 120.0)).unwrap();
    let legal_hi = serde_json::to_string(&record("t3", Domain::Legal, LangPair::EnHi, 40.0)).unwrap();
    write_file(dir.path(), "train.jsonl", &format!("{good}\n{{not json\n\n{bad_range}\n{legal_hi}\n"));
    let test = serde_json::to_string(&record("s1", Domain::General, LangPair::EnMr, 60.0)).unwrap();
    let overlap = serde_json::to_string(&record("t1", Domain::General, LangPair::EnMr, 60.0)).unwrap();
    write_file(dir.path(), "test.jsonl", &format!("{test}\n{overlap}\n"));

    let err = load_dataset(dir.path(), DataFormat::Jsonl, IngestMode::Strict).unwrap_err();
    assert!(matches!(err, DataError::Malformed { count: 3, .. }), "{err}");

    let loaded = load_dataset(dir.path(), DataFormat::Jsonl, IngestMode::Lenient).unwrap();
    let lines: Vec<usize> = loaded.report.errors.iter().map(|e| e.line).collect();
    assert_eq!(lines, vec![2, 4, 2]);
    assert!(loaded.report.errors[1].message.contains("120"));
    assert!(loaded.report.errors[2].message.contains("both train and test"));
    assert_eq!(loaded.report.warnings.len(), 1);
    assert_eq!(loaded.report.warnings[0].line, 5);
    assert_eq!(loaded.split.train.len(), 2);
    assert_eq!(loaded.split.test.len(), 1);
    // Every input line is either loaded or reported.
    assert_eq!(loaded.split.len() + loaded.report.errors.len(), 6);
    loaded.split.check_disjoint().unwrap();
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path(), DataFormat::Jsonl, IngestMode::Lenient), Err(DataError::Io { .. })));
}

#[test]
fn round_trips_are_lossless() {
    let split = make_synthetic_dataset(40, 3, &PlantedSignal::default()).unwrap();
    for format in [DataFormat::Jsonl, DataFormat::Tsv] {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &split, format).unwrap();
        let once = load_dataset(dir.path(), format, IngestMode::Strict).unwrap();
        assert_eq!(once.split, split, "{format:?}");
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &once.split, format).unwrap();
        let twice = load_dataset(dir2.path(), format, IngestMode::Strict).unwrap();
        assert_eq!(twice.split, split);
    }
}

#[test]
fn tsv_malformed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let header = io::TSV_COLUMNS.join("\t");
    let body = format!(
        "{header}\nr1\tsrc\ttgt\ten-hi\tgeneral\t70;80;90\t80\nr2\tsrc\ttgt\ten-xx\tgeneral\t\t50\nr3\tonly\tthree\nr4\tsrc\ttgt\ten-te\tlegal\t\tabc\n"
    );
    write_file(dir.path(), "train.tsv", &body);
    write_file(dir.path(), "test.tsv", &format!("{header}\n"));
    let loaded = load_dataset(dir.path(), DataFormat::Tsv, IngestMode::Lenient).unwrap();
    assert_eq!(loaded.split.train.len(), 1);
    assert_eq!(loaded.split.train[0].annotator_scores, vec![70.0, 80.0, 90.0]);
    let lines: Vec<usize> = loaded.report.errors.iter().map(|e| e.line).collect();
    assert_eq!(lines, vec![3, 4, 5]);

    write_file(dir.path(), "test.tsv", "id\tsource\n");
    let bad = load_dataset(dir.path(), DataFormat::Tsv, IngestMode::Lenient).unwrap();
    assert!(bad.report.errors.iter().any(|e| e.message.contains("header")));
}

#[test]
fn grouping() {
    assert!(group_by(&[]).is_empty());
    let rs = vec![
        record("1", Domain::General, LangPair::EnHi, 1.0),
        record("2", Domain::Legal, LangPair::EnTe, 2.0),
        record("3", Domain::General, LangPair::EnHi, 3.0),
    ];
    let g = group_by(&rs);
    assert_eq!(g.values().map(Vec::len).sum::<usize>(), 3);
    let ids: Vec<&str> = g[&(Domain::General, LangPair::EnHi)].iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["1", "3"]);
}

#[test]
fn synthetic_generator_contract() {
    let s = PlantedSignal::default();
    let a = make_synthetic_dataset(100, 11, &s).unwrap();
    assert_eq!(a, make_synthetic_dataset(100, 11, &s).unwrap());
    assert_ne!(a, make_synthetic_dataset(100, 12, &s).unwrap());
    assert_eq!((a.train.len(), a.test.len()), (90, 10));
    a.check_disjoint().unwrap();
    let catalog = DomainCatalog::default();
    for r in a.train.iter().chain(&a.test) {
        r.validate().unwrap();
        assert!(catalog.contains(r.domain, r.lang_pair));
    }
    assert!(matches!(make_synthetic_dataset(1, 0, &s), Err(DataError::TooFewRecords(1))));
}

#[test]
fn noiseless_signal_is_exactly_recoverable() {
    let s = PlantedSignal { noise_std: 0.0, ..PlantedSignal::default() };
    let split = make_synthetic_dataset(200, 5, &s).unwrap();
    for r in split.train.iter().chain(&split.test) {
        let clean = s.clean_score(PlantedSignal::feature(&r.translation));
        assert!((r.da_score - clean).abs() < 1e-9);
    }
}

#[test]
fn manifest_validation_small() {
    let manifest = Manifest {
        domains: [(Domain::Legal, SplitCounts { train: 12, test: 3 }), (Domain::Tourism, SplitCounts { train: 5, test: 1 })]
            .into_iter()
            .collect(),
    };
    let mut split = make_manifest_dataset(&manifest, 1, &PlantedSignal::default()).unwrap();
    manifest.validate(&split).unwrap();
    split.check_disjoint().unwrap();
    let legal_pairs: std::collections::BTreeSet<_> =
        split.train.iter().filter(|r| r.domain == Domain::Legal).map(|r| r.lang_pair).collect();
    assert_eq!(legal_pairs.len(), 3);
    split.test.pop();
    let mismatches = manifest.validate(&split).unwrap_err();
    assert_eq!(mismatches, vec![CountMismatch { domain: Domain::Tourism, split: "test", expected: 1, actual: 0 }]);
}

#[test]
fn release_manifest_counts() {
    let m = Manifest::indic_domain_qe();
    assert_eq!(m.expected(Domain::Healthcare), Some(SplitCounts { train: 13_280, test: 1_660 }));
    assert_eq!(m.expected(Domain::Legal), Some(SplitCounts { train: 6_160, test: 770 }));
    assert_eq!(m.expected(Domain::Tourism), Some(SplitCounts { train: 13_840, test: 1_730 }));
    assert_eq!(m.expected(Domain::General), Some(SplitCounts { train: 18_880, test: 2_360 }));
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<Manifest>(&json).unwrap(), m);
}
