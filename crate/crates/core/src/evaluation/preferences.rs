//! Three-rater preference votes between generated and human labels.

use serde::{Deserialize, Serialize};

use super::stats::{exact_binomial_two_sided, StatResult};
use super::EvalError;

pub const BALLOTS_PER_VOTE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ballot {
    Llm,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceVote {
    pub question_id: String,
    pub votes: Vec<Ballot>,
}

impl PreferenceVote {
    pub fn new(question_id: impl Into<String>, votes: [Ballot; BALLOTS_PER_VOTE]) -> Self {
        Self {
            question_id: question_id.into(),
            votes: votes.to_vec(),
        }
    }

    /// Winning side and whether the decision was unanimous.
    pub fn outcome(&self) -> Result<(Ballot, bool), EvalError> {
        if self.votes.len() != BALLOTS_PER_VOTE {
            return Err(EvalError::BallotCount {
                question: self.question_id.clone(),
                count: self.votes.len(),
            });
        }
        let llm = self.votes.iter().filter(|&&b| b == Ballot::Llm).count();
        let winner = if llm * 2 > BALLOTS_PER_VOTE { Ballot::Llm } else { Ballot::Human };
        Ok((winner, llm == 0 || llm == BALLOTS_PER_VOTE))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PreferenceSummary {
    pub total: usize,
    pub llm_preferred: usize,
    pub human_preferred: usize,
    pub majority_only: usize,
    pub unanimous: usize,
}

impl PreferenceSummary {
    /// Exact two-sided test of the LLM-preferred count against a fair split.
    pub fn binomial_test(&self) -> Result<StatResult, EvalError> {
        Ok(exact_binomial_two_sided(self.llm_preferred as u64, self.total as u64, 0.5)?)
    }

    /// Combines summaries from separate review sets.
    pub fn merge(&self, other: &Self) -> Self {
        Self {
            total: self.total + other.total,
            llm_preferred: self.llm_preferred + other.llm_preferred,
            human_preferred: self.human_preferred + other.human_preferred,
            majority_only: self.majority_only + other.majority_only,
            unanimous: self.unanimous + other.unanimous,
        }
    }
}

pub fn aggregate_preferences(votes: &[PreferenceVote]) -> Result<PreferenceSummary, EvalError> {
    let mut s = PreferenceSummary {
        total: votes.len(),
        ..Default::default()
    };
    for v in votes {
        let (winner, unanimous) = v.outcome()?;
        match winner {
            Ballot::Llm => s.llm_preferred += 1,
            Ballot::Human => s.human_preferred += 1,
        }
        if unanimous {
            s.unanimous += 1;
        } else {
            s.majority_only += 1;
        }
    }
    Ok(s)
}
