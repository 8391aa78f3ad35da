use proptest::prelude::*;
use rand::seq::SliceRandom;

use super::*;
use crate::data::{Domain, LangPair};
use crate::rng::seeded;

/// Textbook single-pass formula, structurally unlike `pearson_unchecked`.
fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// O(n²) average rank: 1 + #smaller + (#equal − 1)/2.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn closed_form_spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (brute_ranks(x), brute_ranks(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn spearman_examples() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&[4.0, 3.0, 2.0, 1.0], &[1.0, 2.0, 3.0, 4.0]).unwrap() + 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 3.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
}

#[test]
fn pearson_examples() {
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
    let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
    assert!((r - 0.98198).abs() < 5e-6);
}

#[test]
fn error_cases() {
    assert!(matches!(spearman(&[1.0], &[1.0]), Err(MetricError::TooShort(1))));
    assert!(matches!(pearson(&[1.0, 2.0], &[1.0]), Err(MetricError::LengthMismatch(2, 1))));
    assert!(matches!(spearman(&[1.0, 2.0], &[3.0, 3.0]), Err(MetricError::Constant("gold"))));
    assert!(matches!(pearson(&[5.0, 5.0], &[1.0, 2.0]), Err(MetricError::Constant("pred"))));
    assert!(matches!(pearson(&[f64::NAN, 1.0], &[1.0, 2.0]), Err(MetricError::NonFinite(_))));
    assert!(matches!(macro_average(&[]), Err(MetricError::EmptyAverage)));
}

#[test]
fn average_rank_ties() {
    assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    assert_eq!(average_ranks(&[1.0, 1.0, 1.0]), vec![2.0, 2.0, 2.0]);
}

#[test]
fn published_average_rows() {
    let rows: [(&[f64], f64); 3] =
        [(&[0.476, 0.155, 0.605, 0.267, 0.435], 0.388), (&[0.581, 0.267, 0.445], 0.431), (&[0.350, 0.670, 0.205], 0.408)];
    for (values, printed) in rows {
        assert!((macro_average(values).unwrap() - printed).abs() <= 0.0005);
    }
}

#[test]
fn thousand_random_vectors_match_oracles() {
    let mut rng = seeded(2024);
    for trial in 0..1000 {
        let n = rng.random_range(2..=50);
        // Every third trial draws from a small integer range to force ties.
        let draw = |rng: &mut crate::rng::Rng| -> f64 {
            if trial % 3 == 0 {
                rng.random_range(0..5) as f64
            } else {
                rng.random_range(-10.0..10.0)
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        assert_eq!(average_ranks(&x), brute_ranks(&x));
        let (Ok(p), Ok(s)) = (pearson(&x, &y), spearman(&x, &y)) else { continue };
        assert!((p - naive_pearson(&x, &y)).abs() < 1e-12, "trial {trial}");
        assert!((s - naive_pearson(&brute_ranks(&x), &brute_ranks(&y))).abs() < 1e-12, "trial {trial}");
    }
}

#[test]
fn closed_form_on_tie_free_permutations() {
    let mut rng = seeded(9);
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut y = x.clone();
        y.shuffle(&mut rng);
        if let Ok(s) = spearman(&x, &y) {
            assert!((s - closed_form_spearman(&x, &y)).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn bounded_and_invariant(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..40),
        a in 0.1f64..10.0,
        b in -10.0f64..10.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let (Ok(s), Ok(p)) = (spearman(&x, &y), pearson(&x, &y)) {
            prop_assert!(s.abs() <= 1.0 && p.abs() <= 1.0);
            let exp_x: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let aff_y: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            prop_assert!((spearman(&exp_x, &y).unwrap() - s).abs() < 1e-12);
            prop_assert!((spearman(&x, &aff_y).unwrap() - s).abs() < 1e-12);
            let aff_x: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&aff_x, &y).unwrap() - p).abs() < 1e-12);
            prop_assert!((pearson(&x, &aff_y).unwrap() - p).abs() < 1e-12);
        }
    }
}

fn legal_report() -> MetricReport {
    let mut report = MetricReport::new();
    let values = [(LangPair::EnGu, 0.581), (LangPair::EnTa, 0.267), (LangPair::EnTe, 0.445)];
    for (i, layer) in DEFAULT_LAYERS.iter().enumerate() {
        for (lp, v) in values {
            let entry = CorrelationEntry { spearman: v - 0.01 * i as f64, pearson: v / 2.0, n: 10 };
            report.entries.insert((Domain::Legal, lp, ConfigId::adapter(128, 32.0, *layer)), entry);
        }
    }
    report
}

#[test]
fn sweep_table_shape_na_and_avg() {
    let report = legal_report();
    let layout = SweepLayout { configs: vec![(128, 32.0)], ..SweepLayout::default() };
    let table = emit_sweep_table(&report, &layout).unwrap();
    assert_eq!(table.rows.len(), 4);
    for row in &table.rows {
        assert_eq!(row.cells[0], None);
        assert_eq!(row.cells[1], None);
        let present: Vec<f64> = row.cells.iter().flatten().copied().collect();
        assert_eq!(present.len(), 3);
        assert!((row.avg.unwrap() - macro_average(&present).unwrap()).abs() < 1e-12);
    }
    assert!((table.rows[0].avg.unwrap() - 0.431).abs() <= 0.0005);
    let text = table.to_text();
    assert!(text.contains("== legal (spearman) =="));
    assert!(text.lines().any(|l| l.trim_start().starts_with("-11") && l.contains("NA")));
    assert!(text.contains("0.581*"));

    let parsed = SweepTable::parse_csv(&table.to_csv(), Metric::Spearman).unwrap();
    assert_eq!(parsed, table);
    parsed.verify(&report).unwrap();
}

#[test]
fn sweep_verification_catches_tampering() {
    let report = legal_report();
    let layout = SweepLayout { configs: vec![(128, 32.0)], ..SweepLayout::default() };
    let mut table = emit_sweep_table(&report, &layout).unwrap();
    table.rows[2].avg = Some(table.rows[2].avg.unwrap() + 1e-9);
    assert!(matches!(table.verify(&report), Err(MetricError::Verification(_))));
    assert!(matches!(emit_sweep_table(&MetricReport::new(), &layout), Err(MetricError::EmptyReport)));
}

#[test]
fn report_csv_round_trip_and_averages() {
    let mut report = legal_report();
    report
        .entries
        .insert((Domain::General, LangPair::EnHi, ConfigId::default()), CorrelationEntry { spearman: 1.0 / 3.0, pearson: -0.1, n: 2 });
    let text = report.to_csv_string();
    assert!(text.starts_with("domain,lang_pair,rank,alpha,layer,spearman,pearson,n\n"));
    assert_eq!(MetricReport::read_csv(text.as_bytes()).unwrap(), report);
    let (rho, _) = report.domain_average(Domain::Legal, ConfigId::adapter(128, 32.0, -1)).unwrap();
    assert!((rho - (0.581 + 0.267 + 0.445) / 3.0).abs() < 1e-15);
    assert_eq!(report.domain_averages().len(), 5);
    let mut other = MetricReport::new();
    other.entries.insert((Domain::General, LangPair::EnHi, ConfigId::default()), CorrelationEntry { spearman: 0.0, pearson: 0.0, n: 3 });
    assert!(report.merge(&other).is_err());
}

#[test]
fn from_predictions_groups_and_skips() {
    let rows = vec![
        (Domain::General, LangPair::EnHi, 1.0, 10.0),
        (Domain::General, LangPair::EnHi, 2.0, 20.0),
        (Domain::General, LangPair::EnHi, 3.0, 30.0),
        (Domain::Legal, LangPair::EnTe, 1.0, 5.0),
    ];
    let (report, skipped) = MetricReport::from_predictions(ConfigId::adapter(64, 32.0, -1), rows);
    assert_eq!(report.entries.len(), 1);
    assert_eq!(skipped.len(), 1);
    assert_eq!(report.get(Domain::General, LangPair::EnHi, ConfigId::adapter(64, 32.0, -1)).unwrap().n, 3);
}

fn labeled(method: &str, source: &str, domain: Domain, values: &[(LangPair, f64)]) -> LabeledReport {
    let mut report = MetricReport::new();
    for &(lp, v) in values {
        report.entries.insert((domain, lp, ConfigId::default()), CorrelationEntry { spearman: v, pearson: -v, n: 5 });
    }
    LabeledReport { method: method.into(), source: source.into(), report }
}

#[test]
fn comparison_table_reproduces_printed_averages() {
    use LangPair::*;
    let mut general =
        labeled("lora", "runs/a", Domain::General, &[(EnHi, 0.476), (EnMr, 0.157), (EnTa, 0.610), (EnTe, 0.292), (EnGu, 0.485)]);
    let health = labeled("lora", "runs/a", Domain::Healthcare, &[(EnHi, 0.520), (EnMr, 0.192), (EnTa, 0.415), (EnGu, 0.532)]);
    general.report.merge(&health.report).unwrap();
    let tourism = labeled("lorma", "runs/b", Domain::Tourism, &[(EnHi, 0.465), (EnMr, 0.532), (EnTe, 0.227)]);
    let zero = labeled("zero_shot", "runs/c", Domain::Tourism, &[(EnHi, 0.417), (EnMr, 0.469), (EnTe, 0.309)]);
    let table = ComparisonTable::build(&[general, tourism, zero], Metric::Spearman).unwrap();
    let avg = |d: Domain, m: &str| table.rows.iter().find(|r| r.domain == d && r.method == m).unwrap().avg.unwrap();
    assert!((avg(Domain::General, "lora") - 0.404).abs() <= 0.0005);
    assert!((avg(Domain::Healthcare, "lora") - 0.415).abs() <= 0.0005);
    assert!((avg(Domain::Tourism, "lorma") - 0.408).abs() <= 0.0005);
    for r in &table.rows {
        let present: Vec<f64> = r.cells.iter().flatten().copied().collect();
        assert_eq!(r.avg.unwrap(), macro_average(&present).unwrap());
    }
    assert_eq!(table.rows.iter().filter(|r| r.domain == Domain::Tourism).count(), 2);
    let text = table.to_text();
    assert!(text.contains("0.465*") && text.contains("0.309*") && text.contains("NA"));
    assert!(table.to_csv().starts_with("domain,method,en-hi,en-mr,en-ta,en-te,en-gu,avg\n"));
}

#[test]
fn comparison_conflicts_name_both_sources() {
    let a = labeled("lora", "runs/a", Domain::Legal, &[(LangPair::EnTa, 0.5)]);
    let b = labeled("lora", "runs/b", Domain::Legal, &[(LangPair::EnTa, 0.6)]);
    let err = ComparisonTable::build(&[a, b], Metric::Spearman).unwrap_err().to_string();
    assert!(err.contains("runs/a") && err.contains("runs/b"), "{err}");
}
