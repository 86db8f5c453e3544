mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{expand, welch_cases, OURS, POND5, VANILLA};
use musicform_core::stats::{
    compare_groups, exclude_raters, mos_summary, qualify_rater, read_ratings, write_ratings, MosReport,
    QualificationKind, RatingContext, RatingRecord, StatsError,
};

fn table_fixture() -> Vec<RatingRecord> {
    let mut out = Vec::new();
    for (group, counts) in [("ours", OURS), ("vanilla", VANILLA), ("pond5", POND5)] {
        for (i, s) in expand(counts).into_iter().enumerate() {
            // ten clips per group, raters cycling
            out.push(RatingRecord::study(format!("r{}", i % 10), format!("{group}/{}", i % 10), s as u8));
        }
    }
    out
}

fn groups() -> Vec<(String, String)> {
    [("ours", "Ours"), ("vanilla", "Vanilla MusicGen"), ("pond5", "Pond5")]
        .iter()
        .map(|(g, l)| (g.to_string(), l.to_string()))
        .collect()
}

#[test]
fn table_rows_from_ratings_csv() {
    let mut csv = Vec::new();
    write_ratings(&mut csv, &table_fixture()).unwrap();
    let ratings = read_ratings(&csv[..]).unwrap();
    let report = MosReport::build(&ratings, &groups(), &BTreeSet::new()).unwrap();
    assert_eq!(
        report.table_rows(),
        [
            ("Ours".to_string(), "3.89±1.06".to_string()),
            ("Vanilla MusicGen".to_string(), "3.50±1.08".to_string()),
            ("Pond5".to_string(), "3.98±0.81".to_string()),
        ]
    );
    let text = report.render_text();
    assert!(text.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["Ours", "3.89±1.06"]));
}

#[test]
fn welch_matches_reference() {
    for case in welch_cases() {
        let c = compare_groups(&case.a, &case.b).unwrap();
        assert!((c.statistic - case.t).abs() < 1e-9, "{} vs {}", c.statistic, case.t);
        assert!((c.df - case.df).abs() < 1e-9 * case.df);
        assert!((c.p_value - case.p).abs() < 1e-9, "{} vs {}", c.p_value, case.p);
        let swapped = compare_groups(&case.b, &case.a).unwrap();
        assert_eq!(swapped.statistic, -c.statistic);
        assert!((swapped.p_value - c.p_value).abs() < 1e-12);
    }
}

#[test]
fn summary_is_order_free_and_exclusion_is_total() {
    let mut ratings = table_fixture();
    let a = mos_summary(&ratings, "ours").unwrap();
    ratings.reverse();
    let b = mos_summary(&ratings, "ours").unwrap();
    assert!((a.mean - b.mean).abs() < 1e-12 && (a.sd - b.sd).abs() < 1e-12);
    let gone: BTreeSet<String> = ["r3".to_string()].into();
    let kept = exclude_raters(&ratings, &gone);
    assert!(kept.iter().all(|r| r.rater_id != "r3"));
    assert_eq!(kept.len(), ratings.len() - ratings.iter().filter(|r| r.rater_id == "r3").count());
    assert!(matches!(mos_summary(&ratings, "missing"), Err(StatsError::EmptyGroup(_))));
}

fn qualification_key() -> BTreeMap<String, QualificationKind> {
    let mut key = BTreeMap::new();
    key.insert("q/0".into(), QualificationKind::Instructed(2));
    key.insert("q/1".into(), QualificationKind::Instructed(5));
    key.insert("q/2".into(), QualificationKind::Instructed(3));
    key.insert("q/3".into(), QualificationKind::Silence);
    for i in 4..10 {
        key.insert(format!("q/{i}"), QualificationKind::Plain);
    }
    key
}

fn session(scores: [u8; 10]) -> Vec<RatingRecord> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| RatingRecord {
            context: RatingContext::Qualification,
            ..RatingRecord::study("alice", format!("q/{i}"), s)
        })
        .collect()
}

#[test]
fn qualification_checks() {
    let key = qualification_key();
    let pass = qualify_rater("alice", &session([2, 5, 3, 1, 4, 4, 3, 5, 2, 4]), &key, 10).unwrap();
    assert!(pass.passed && pass.failures.is_empty());
    let silence = qualify_rater("alice", &session([2, 5, 3, 3, 4, 4, 3, 5, 2, 4]), &key, 10).unwrap();
    assert_eq!(silence.failures, ["silence"]);
    let instructed = qualify_rater("alice", &session([1, 5, 3, 1, 4, 4, 3, 5, 2, 4]), &key, 10).unwrap();
    assert_eq!(instructed.failures, ["instructed"]);
    let mut nine = session([2, 5, 3, 1, 4, 4, 3, 5, 2, 4]);
    nine.pop();
    assert!(matches!(
        qualify_rater("alice", &nine, &key, 10),
        Err(StatsError::IncompleteQualification { completed: 9, .. })
    ));
}
