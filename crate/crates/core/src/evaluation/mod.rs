//! Match judging, per-strategy match metrics, preference aggregation and the
//! hypothesis tests that compare them.

pub mod judge;
pub mod metrics;
pub mod preferences;
pub mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PairedBenchmark;
use crate::generation::StrategyKind;

pub use judge::{parse_yes_no, Judge, JudgeError, JudgeKind, Ledger, LedgerEntry, LlmJudge, MatchVerdict, NormalizedExactJudge, Verdict};
pub use metrics::{
    cross_strategy, evaluate_strategy, pair_coverage, CrossStrategyReport, MatchReport, PairCoverage, QuestionVerdict, Tally,
};
pub use preferences::{aggregate_preferences, Ballot, PreferenceSummary, PreferenceVote};
pub use stats::{chi_square_independence, exact_binomial_two_sided, two_proportion_z, StatResult, StatsError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("record references unknown question {0}")]
    UnknownQuestion(String),
    #[error("question {0} has more than one record")]
    DuplicateRecord(String),
    #[error("record for {question} was produced by {found}, expected {expected}")]
    StrategyMismatch {
        question: String,
        expected: StrategyKind,
        found: StrategyKind,
    },
    #[error("record sets cover different questions: {0:?}")]
    CoverageMismatch(Vec<String>),
    #[error("no record for benchmark question {0}")]
    MissingRecord(String),
    #[error("vote for {question} has {count} ballots, expected 3")]
    BallotCount { question: String, count: usize },
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyBlock {
    pub report: MatchReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_coverage: Option<PairCoverage>,
    pub mismatch_count: usize,
}

/// The evaluation document: one block per strategy, the cross-strategy
/// buckets when two are given, and named test results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub subject: String,
    pub judge: JudgeKind,
    pub strategies: Vec<StrategyBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_strategy: Option<CrossStrategyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferences: Option<PreferenceSummary>,
    pub tests: BTreeMap<String, StatResult>,
}

impl EvaluationReport {
    /// Assembles the report from one or two match reports. Pair coverage is
    /// included when `paired` is given and the records cover all of its
    /// questions. With two reports, the direct-match
    /// and top-five rates are compared by z-test and the pair-coverage rows
    /// by chi-square; tests whose preconditions fail are left out.
    pub fn build(subject: &str, judge: JudgeKind, reports: Vec<MatchReport>, paired: Option<&PairedBenchmark>) -> Result<Self, EvalError> {
        assert!(matches!(reports.len(), 1 | 2), "evaluation takes one or two strategies");
        let mut strategies = Vec::new();
        for report in reports {
            let complete = paired.is_some_and(|b| report.verdicts.len() == b.bank().questions().len());
            if paired.is_some() && !complete {
                log::warn!("{} records do not cover the benchmark; pair coverage omitted", report.strategy);
            }
            let pair_coverage = paired.filter(|_| complete).map(|b| pair_coverage(&report, b)).transpose()?;
            let mismatch_count = report.mismatches().len();
            strategies.push(StrategyBlock {
                report,
                pair_coverage,
                mismatch_count,
            });
        }
        let mut tests = BTreeMap::new();
        let mut cross = None;
        if let [a, b] = strategies.as_slice() {
            cross = Some(cross_strategy(&a.report, &b.report)?);
            let mut record = |name: &str, r: Result<StatResult, StatsError>| match r {
                Ok(r) => {
                    tests.insert(name.to_string(), r);
                }
                Err(e) => log::warn!("{name} skipped: {e}"),
            };
            let (da, db) = (a.report.direct_match, b.report.direct_match);
            record(
                "direct_match_z",
                two_proportion_z(da.count as u64, da.total as u64, db.count as u64, db.total as u64),
            );
            let (ta, tb) = (a.report.top_five, b.report.top_five);
            record(
                "top_five_z",
                two_proportion_z(ta.count as u64, ta.total as u64, tb.count as u64, tb.total as u64),
            );
            if let (Some(pa), Some(pb)) = (&a.pair_coverage, &b.pair_coverage) {
                record("pair_coverage_chi_square", chi_square_independence(&[pa.row(), pb.row()]));
            }
        }
        Ok(Self {
            subject: subject.to_string(),
            judge,
            strategies,
            cross_strategy: cross,
            preferences: None,
            tests,
        })
    }

    /// Adds a preference summary and its binomial test.
    pub fn with_preferences(mut self, summary: PreferenceSummary) -> Self {
        match summary.binomial_test() {
            Ok(r) => {
                self.tests.insert("preference_binomial".to_string(), r);
            }
            Err(e) => log::warn!("preference_binomial skipped: {e}"),
        }
        self.preferences = Some(summary);
        self
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
