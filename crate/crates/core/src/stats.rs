//! Opinion-score aggregation, rater qualification and group comparison.
//!
//! Clips belong to groups by id prefix: `ours/03` is in group `ours`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("group {0:?} has no study ratings")]
    EmptyGroup(String),
    #[error("score {0} is outside 1..=5")]
    ScoreOutOfRange(i64),
    #[error("rater {rater} completed {completed} of {required} qualification tasks")]
    IncompleteQualification { rater: String, completed: usize, required: usize },
    #[error("a group of size {0} has no sample variance")]
    DegenerateVariance(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StatsError>;

pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingContext {
    Qualification,
    Study,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rater_id: String,
    pub clip_id: String,
    pub score: u8,
    /// Unix seconds.
    pub timestamp: u64,
    pub context: RatingContext,
}

impl RatingRecord {
    pub fn study(rater_id: impl Into<String>, clip_id: impl Into<String>, score: u8) -> Self {
        Self {
            rater_id: rater_id.into(),
            clip_id: clip_id.into(),
            score,
            timestamp: 0,
            context: RatingContext::Study,
        }
    }

    pub fn group(&self) -> &str {
        clip_group(&self.clip_id)
    }
}

pub fn check_score(score: i64) -> Result<u8> {
    if (i64::from(MIN_SCORE)..=i64::from(MAX_SCORE)).contains(&score) {
        Ok(score as u8)
    } else {
        Err(StatsError::ScoreOutOfRange(score))
    }
}

/// Group label of a clip id: everything before the first `/`.
pub fn clip_group(clip_id: &str) -> &str {
    clip_id.split_once('/').map_or(clip_id, |(g, _)| g)
}

#[derive(Deserialize)]
struct CsvRow {
    rater_id: String,
    clip_id: String,
    score: i64,
    timestamp: u64,
    context: RatingContext,
}

pub fn read_ratings<R: Read>(reader: R) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(RatingRecord {
                score: check_score(row.score)?,
                rater_id: row.rater_id,
                clip_id: row.clip_id,
                timestamp: row.timestamp,
                context: row.context,
            })
        })
        .collect()
}

pub fn write_ratings<W: Write>(writer: W, records: &[RatingRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    if records.is_empty() {
        wtr.write_record(["rater_id", "clip_id", "score", "timestamp", "context"])?;
    }
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_ratings(path: impl AsRef<Path>) -> Result<Vec<RatingRecord>> {
    read_ratings(std::fs::File::open(path)?)
}

pub fn save_ratings(path: impl AsRef<Path>, records: &[RatingRecord]) -> Result<()> {
    write_ratings(std::fs::File::create(path)?, records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl GroupSummary {
    /// Mean and sample standard deviation of raw scores.
    pub fn from_scores(label: impl Into<String>, scores: &[f64]) -> Result<Self> {
        let label = label.into();
        if scores.is_empty() {
            return Err(StatsError::EmptyGroup(label));
        }
        let (mean, var) = mean_var(scores);
        Ok(Self {
            label,
            mean,
            sd: var.map_or(0.0, f64::sqrt),
            n: scores.len(),
        })
    }

    /// `m.mm±s.ss`
    pub fn mos(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.sd)
    }
}

impl fmt::Display for GroupSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.label, self.mos())
    }
}

/// Mean and, for n ≥ 2, the unbiased variance. Two-pass for stability.
fn mean_var(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = (xs.len() >= 2).then(|| xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0));
    (mean, var)
}

/// Summary over the study ratings of clips in `group`.
pub fn mos_summary(ratings: &[RatingRecord], group: &str) -> Result<GroupSummary> {
    let scores = group_scores(ratings, group);
    GroupSummary::from_scores(group, &scores)
}

pub fn group_scores(ratings: &[RatingRecord], group: &str) -> Vec<f64> {
    ratings
        .iter()
        .filter(|r| r.context == RatingContext::Study && r.group() == group)
        .map(|r| f64::from(r.score))
        .collect()
}

/// Drop every record of the given raters.
pub fn exclude_raters(ratings: &[RatingRecord], raters: &BTreeSet<String>) -> Vec<RatingRecord> {
    ratings.iter().filter(|r| !raters.contains(&r.rater_id)).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "score", rename_all = "lowercase")]
pub enum QualificationKind {
    /// Carries a spoken instruction naming the expected score.
    Instructed(u8),
    /// Silence; attentive raters give the lowest score.
    Silence,
    Plain,
}

/// Task mix shown to every new rater.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualificationPlan {
    pub instructed: usize,
    pub silence: usize,
    pub plain: usize,
}

impl Default for QualificationPlan {
    fn default() -> Self {
        Self {
            instructed: 3,
            silence: 1,
            plain: 6,
        }
    }
}

impl QualificationPlan {
    pub fn total(&self) -> usize {
        self.instructed + self.silence + self.plain
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualificationResult {
    pub rater_id: String,
    pub passed: bool,
    /// Check ids: `silence`, `instructed`.
    pub failures: Vec<String>,
}

/// Judge one rater from their qualification records. `key` maps each
/// qualification clip to its kind.
pub fn qualify_rater(
    rater_id: &str,
    records: &[RatingRecord],
    key: &BTreeMap<String, QualificationKind>,
    required: usize,
) -> Result<QualificationResult> {
    let mine: Vec<&RatingRecord> = records
        .iter()
        .filter(|r| r.rater_id == rater_id && r.context == RatingContext::Qualification)
        .collect();
    let completed = mine.iter().map(|r| r.clip_id.as_str()).collect::<BTreeSet<_>>().len();
    if completed < required {
        return Err(StatsError::IncompleteQualification {
            rater: rater_id.to_string(),
            completed,
            required,
        });
    }
    let mut failures = BTreeSet::new();
    for r in mine {
        match key.get(&r.clip_id) {
            Some(QualificationKind::Silence) if r.score > MIN_SCORE => {
                failures.insert("silence");
            }
            Some(QualificationKind::Instructed(expected)) if r.score != *expected => {
                failures.insert("instructed");
            }
            _ => {}
        }
    }
    Ok(QualificationResult {
        rater_id: rater_id.to_string(),
        passed: failures.is_empty(),
        failures: failures.into_iter().map(String::from).collect(),
    })
}

pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Welch t, positive when `a` has the higher mean.
    pub statistic: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Two-sided Welch t-test.
///
/// Two constant groups give p = 1 when their values agree and p = 0
/// (with an infinite statistic) otherwise.
pub fn compare_groups(a: &[f64], b: &[f64]) -> Result<Comparison> {
    for g in [a, b] {
        if g.len() < 2 {
            return Err(StatsError::DegenerateVariance(g.len()));
        }
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (va, vb) = (va.unwrap_or(0.0), vb.unwrap_or(0.0));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let df = na + nb - 2.0;
        return Ok(if ma == mb {
            Comparison {
                statistic: 0.0,
                df,
                p_value: 1.0,
                significant: false,
            }
        } else {
            Comparison {
                statistic: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                df,
                p_value: 0.0,
                significant: true,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(Comparison {
        statistic: t,
        df,
        p_value: p,
        significant: p < ALPHA,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedComparison {
    pub a: String,
    pub b: String,
    #[serde(flatten)]
    pub result: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosReport {
    pub rows: Vec<GroupSummary>,
    pub comparisons: Vec<NamedComparison>,
    pub excluded_raters: Vec<String>,
}

impl MosReport {
    /// Summaries for `groups` in order, after dropping `excluded` raters.
    /// Each `(group, display label)` pair names a row.
    pub fn build(ratings: &[RatingRecord], groups: &[(String, String)], excluded: &BTreeSet<String>) -> Result<Self> {
        let kept = exclude_raters(ratings, excluded);
        let rows = groups
            .iter()
            .map(|(group, label)| {
                let scores = group_scores(&kept, group);
                GroupSummary::from_scores(label.clone(), &scores).map_err(|_| StatsError::EmptyGroup(group.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows,
            comparisons: Vec::new(),
            excluded_raters: excluded.iter().cloned().collect(),
        })
    }

    /// Add Welch comparisons of the first group against every other one.
    pub fn with_comparisons(mut self, ratings: &[RatingRecord], groups: &[(String, String)]) -> Result<Self> {
        let kept = exclude_raters(ratings, &self.excluded_raters.iter().cloned().collect());
        if let Some(((first, first_label), rest)) = groups.split_first() {
            let a = group_scores(&kept, first);
            for (group, label) in rest {
                let b = group_scores(&kept, group);
                self.comparisons.push(NamedComparison {
                    a: first_label.clone(),
                    b: label.clone(),
                    result: compare_groups(&a, &b)?,
                });
            }
        }
        Ok(self)
    }

    /// `(label, "m.mm±s.ss")` per row.
    pub fn table_rows(&self) -> Vec<(String, String)> {
        self.rows.iter().map(|r| (r.label.clone(), r.mos())).collect()
    }

    pub fn render_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.chars().count()).chain([12]).max().unwrap_or(12) + 2;
        let mut out = format!("{:<width$}MOS\n", "Model/Source");
        for (label, mos) in self.table_rows() {
            out.push_str(&format!("{label:<width$}{mos}\n"));
        }
        for c in &self.comparisons {
            out.push_str(&format!(
                "\n{} vs {}: t = {:.4}, df = {:.2}, p = {:.6}{}",
                c.a,
                c.b,
                c.result.statistic,
                c.result.df,
                c.result.p_value,
                if c.result.significant { " (significant)" } else { "" }
            ));
        }
        if !self.comparisons.is_empty() {
            out.push('\n');
        }
        out
    }
}
