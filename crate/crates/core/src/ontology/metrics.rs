//! Grouping accuracy and refinement against a paired gold model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Grouping, OntologyError};
use crate::corpus::PairedBenchmark;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingScore {
    pub accuracy: f64,
    pub refinement: f64,
    pub group_count: usize,
}

fn check_questions(g: &Grouping, bench: &PairedBenchmark) -> Result<(), OntologyError> {
    let ids: Vec<&str> = g.groups.iter().flat_map(|gr| gr.question_ids.iter().map(String::as_str)).collect();
    let set: BTreeSet<&str> = ids.iter().copied().collect();
    let gold: BTreeSet<&str> = bench.bank().questions().iter().map(|q| q.id.as_str()).collect();
    if set.len() != ids.len() || set != gold || g.groups.iter().any(|gr| gr.question_ids.is_empty()) {
        return Err(OntologyError::QuestionSetMismatch);
    }
    Ok(())
}

/// Fraction of gold KCs whose two questions share a group.
pub fn grouping_accuracy(g: &Grouping, bench: &PairedBenchmark) -> Result<f64, OntologyError> {
    check_questions(g, bench)?;
    let group_of: BTreeMap<&str, usize> = g
        .groups
        .iter()
        .enumerate()
        .flat_map(|(i, gr)| gr.question_ids.iter().map(move |q| (q.as_str(), i)))
        .collect();
    let together = bench
        .pairs()
        .values()
        .filter(|[a, b]| group_of[a.as_str()] == group_of[b.as_str()])
        .count();
    Ok(together as f64 / bench.kc_count() as f64)
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Question-weighted mean of group size over distinct gold KCs in the group.
/// The sum is accumulated as an exact fraction and divided once.
pub fn grouping_refinement(g: &Grouping, bench: &PairedBenchmark) -> Result<f64, OntologyError> {
    check_questions(g, bench)?;
    let (mut num, mut den) = (0u128, 1u128);
    for gr in &g.groups {
        let kcs: BTreeSet<&str> = gr.question_ids.iter().filter_map(|q| bench.kc_of(q)).collect();
        let (n, d) = (gr.question_ids.len() as u128, kcs.len() as u128);
        num = num * d + n * den;
        den *= d;
        let k = gcd(num, den);
        (num, den) = (num / k, den / k);
    }
    den *= bench.bank().questions().len() as u128;
    let k = gcd(num, den);
    Ok((num / k) as f64 / (den / k) as f64)
}

pub fn score_grouping(g: &Grouping, bench: &PairedBenchmark) -> Result<GroupingScore, OntologyError> {
    Ok(GroupingScore {
        accuracy: grouping_accuracy(g, bench)?,
        refinement: grouping_refinement(g, bench)?,
        group_count: g.groups.len(),
    })
}

/// Set-of-sets equality on question ids; order and labels are ignored.
pub fn groupings_equal(a: &Grouping, b: &Grouping) -> bool {
    a.partition() == b.partition()
}
