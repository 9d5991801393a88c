//! Direct-match, top-five, cross-strategy and pair-coverage metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::judge::{Judge, MatchVerdict};
use super::EvalError;
use crate::corpus::{PairedBenchmark, QuestionBank};
use crate::gateway::parallel_map;
use crate::generation::{GenerationRecord, StrategyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub count: usize,
    pub total: usize,
}

impl Tally {
    pub fn new(count: usize, total: usize) -> Self {
        assert!(count <= total, "tally count exceeds total");
        Self { count, total }
    }

    /// `count / total`, or 0 for an empty tally.
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionVerdict {
    pub question_id: String,
    pub gold_label: String,
    pub selected: String,
    pub verdict: MatchVerdict,
    pub top_five: bool,
    /// 0-based index of the first matching candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_candidate: Option<usize>,
}

impl QuestionVerdict {
    pub fn direct(&self) -> bool {
        self.verdict.value.is_match()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub strategy: StrategyKind,
    pub direct_match: Tally,
    pub top_five: Tally,
    /// Sorted by question id.
    pub verdicts: Vec<QuestionVerdict>,
}

impl MatchReport {
    pub fn question_ids(&self) -> BTreeSet<&str> {
        self.verdicts.iter().map(|v| v.question_id.as_str()).collect()
    }

    fn direct_set(&self) -> BTreeSet<&str> {
        self.verdicts
            .iter()
            .filter(|v| v.direct())
            .map(|v| v.question_id.as_str())
            .collect()
    }

    /// Questions whose selected label did not match, i.e. the set sent to
    /// human review.
    pub fn mismatches(&self) -> Vec<&QuestionVerdict> {
        self.verdicts.iter().filter(|v| !v.direct()).collect()
    }
}

fn judge_record(record: &GenerationRecord, gold: &str, judge: &dyn Judge) -> Result<QuestionVerdict, EvalError> {
    let qid = &record.question_id;
    let verdict = judge.judge(qid, &record.selected, gold)?;
    let matched_candidate = if verdict.value.is_match() {
        record.candidates.items().iter().position(|c| c == &record.selected)
    } else {
        None
    };
    let matched_candidate = match matched_candidate {
        Some(i) => Some(i),
        None => {
            let mut found = None;
            for (i, c) in record.candidates.items().iter().enumerate() {
                if judge.judge(qid, c, gold)?.value.is_match() {
                    found = Some(i);
                    break;
                }
            }
            found
        }
    };
    Ok(QuestionVerdict {
        question_id: qid.clone(),
        gold_label: gold.to_string(),
        selected: record.selected.clone(),
        top_five: verdict.value.is_match() || matched_candidate.is_some(),
        verdict,
        matched_candidate,
    })
}

/// Judges each record's selected label and its five candidates against the
/// gold label of its question.
pub fn evaluate_strategy(
    strategy: StrategyKind,
    records: &[GenerationRecord],
    bank: &QuestionBank,
    judge: &dyn Judge,
) -> Result<MatchReport, EvalError> {
    let mut golds = Vec::with_capacity(records.len());
    let mut seen = BTreeSet::new();
    for r in records {
        if r.strategy != strategy {
            return Err(EvalError::StrategyMismatch {
                question: r.question_id.clone(),
                expected: strategy,
                found: r.strategy,
            });
        }
        if !seen.insert(r.question_id.as_str()) {
            return Err(EvalError::DuplicateRecord(r.question_id.clone()));
        }
        let gold = bank
            .gold_label(&r.question_id)
            .ok_or_else(|| EvalError::UnknownQuestion(r.question_id.clone()))?;
        golds.push((r, gold));
    }
    let results = parallel_map(&golds, judge.parallelism(), |(r, gold)| judge_record(r, gold, judge));
    let mut verdicts = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    verdicts.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    let total = verdicts.len();
    let direct = verdicts.iter().filter(|v| v.direct()).count();
    let top = verdicts.iter().filter(|v| v.top_five).count();
    Ok(MatchReport {
        strategy,
        direct_match: Tally::new(direct, total),
        top_five: Tally::new(top, total),
        verdicts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossStrategyReport {
    pub strategy_a: StrategyKind,
    pub strategy_b: StrategyKind,
    pub total: usize,
    pub matched_by_both: usize,
    pub exclusive_a: usize,
    pub exclusive_b: usize,
    pub matched_by_neither: usize,
}

/// Buckets each question by which of the two reports matched it directly.
pub fn cross_strategy(a: &MatchReport, b: &MatchReport) -> Result<CrossStrategyReport, EvalError> {
    let (ids_a, ids_b) = (a.question_ids(), b.question_ids());
    if ids_a != ids_b {
        let differing = ids_a.symmetric_difference(&ids_b).map(|s| s.to_string()).collect();
        return Err(EvalError::CoverageMismatch(differing));
    }
    let (da, db) = (a.direct_set(), b.direct_set());
    let both = da.intersection(&db).count();
    let total = ids_a.len();
    let exclusive_a = da.len() - both;
    let exclusive_b = db.len() - both;
    Ok(CrossStrategyReport {
        strategy_a: a.strategy,
        strategy_b: b.strategy,
        total,
        matched_by_both: both,
        exclusive_a,
        exclusive_b,
        matched_by_neither: total - both - exclusive_a - exclusive_b,
    })
}

/// Per-KC count of how many of its two questions were matched directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCoverage {
    pub both: usize,
    pub one: usize,
    pub neither: usize,
    pub kc_total: usize,
    pub question_total: usize,
    /// `both / kc_total`.
    pub both_rate_over_kcs: f64,
    /// `both / question_total`.
    pub both_rate_over_questions: f64,
}

impl PairCoverage {
    pub fn from_counts(both: usize, one: usize, neither: usize) -> Self {
        let kc_total = both + one + neither;
        let question_total = 2 * kc_total;
        let rate = |d: usize| if d == 0 { 0.0 } else { both as f64 / d as f64 };
        Self {
            both,
            one,
            neither,
            kc_total,
            question_total,
            both_rate_over_kcs: rate(kc_total),
            both_rate_over_questions: rate(question_total),
        }
    }

    /// Direct matches implied by the coverage counts.
    pub fn direct_matches(&self) -> usize {
        2 * self.both + self.one
    }

    /// The `[both, one, neither]` row used in contingency tables.
    pub fn row(&self) -> Vec<u64> {
        vec![self.both as u64, self.one as u64, self.neither as u64]
    }
}

pub fn pair_coverage(report: &MatchReport, benchmark: &PairedBenchmark) -> Result<PairCoverage, EvalError> {
    let by_id: BTreeMap<&str, bool> = report.verdicts.iter().map(|v| (v.question_id.as_str(), v.direct())).collect();
    let (mut both, mut one, mut neither) = (0, 0, 0);
    for questions in benchmark.pairs().values() {
        let mut hits = 0;
        for q in questions {
            match by_id.get(q.as_str()) {
                Some(true) => hits += 1,
                Some(false) => {}
                None => return Err(EvalError::MissingRecord(q.clone())),
            }
        }
        match hits {
            2 => both += 1,
            1 => one += 1,
            _ => neither += 1,
        }
    }
    if let Some(extra) = by_id.keys().find(|q| benchmark.kc_of(q).is_none()) {
        return Err(EvalError::UnknownQuestion(extra.to_string()));
    }
    Ok(PairCoverage::from_counts(both, one, neither))
}
