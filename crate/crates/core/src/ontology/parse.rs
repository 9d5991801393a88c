//! Parsers for the objective-proposal and classification replies.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::text::strip_markup;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OntologyParseError {
    #[error("no group blocks found")]
    NoGroups,
    #[error("group {0} lists questions but has no name")]
    MissingName(u32),
    #[error("group {0} has an empty name")]
    EmptyName(u32),
    #[error("no objective number found")]
    NoObjective,
    #[error("objective {index} is out of range 1..={max}")]
    OutOfRange { index: usize, max: usize },
}

/// Group blocks as proposed, with objective indices renumbered 1.. in order
/// of appearance. Question labels are the 1-based `Q` numbers of the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedGroups {
    pub objectives: Vec<String>,
    /// Question label to every objective index it was listed under.
    pub listed: BTreeMap<usize, Vec<usize>>,
    /// Labels outside `1..=n`.
    pub unknown: Vec<usize>,
}

impl ParsedGroups {
    /// Labels in `1..=n` listed under no group.
    pub fn omitted(&self, n: usize) -> Vec<usize> {
        (1..=n).filter(|q| !self.listed.contains_key(q)).collect()
    }

    /// Labels listed under more than one group, or twice in one group.
    pub fn duplicated(&self) -> Vec<usize> {
        self.listed.iter().filter(|(_, g)| g.len() > 1).map(|(q, _)| *q).collect()
    }

    /// True when every label is listed exactly once and nothing unknown
    /// appears.
    pub fn is_clean(&self, n: usize) -> bool {
        self.unknown.is_empty() && self.omitted(n).is_empty() && self.duplicated().is_empty()
    }
}

static GROUP_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^[\s>*_#\-]*group\s*(\d+)\s*[*_]*\s*(name|questions?)\s*[*_]*\s*[:\-\u{2013}]\s*(.*)$").unwrap());
static Q_LABEL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bQ\s*_?(\d+)\b").unwrap());
static BARE_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(\d+)\b").unwrap());

fn clean_name(raw: &str) -> String {
    let s = strip_markup(raw);
    let s = s.trim();
    let s = s.strip_prefix('[').and_then(|x| x.strip_suffix(']')).unwrap_or(s);
    strip_markup(s)
}

fn question_labels(raw: &str) -> Vec<usize> {
    let tagged: Vec<usize> = Q_LABEL.captures_iter(raw).filter_map(|c| c[1].parse().ok()).collect();
    if !tagged.is_empty() {
        return tagged;
    }
    BARE_NUMBER.captures_iter(raw).filter_map(|c| c[1].parse().ok()).collect()
}

/// Parses `Group i name: ...` / `Group i questions: [Q1, ...]` blocks for a
/// prompt that listed `n` questions.
pub fn parse_group_blocks(reply: &str, n: usize) -> Result<ParsedGroups, OntologyParseError> {
    let mut names: Vec<(u32, String)> = Vec::new();
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for line in reply.lines() {
        let Some(c) = GROUP_LINE.captures(line) else { continue };
        let num: u32 = c[1].parse().map_err(|_| OntologyParseError::NoGroups)?;
        if c[2].to_ascii_lowercase().starts_with("name") {
            let name = clean_name(&c[3]);
            if name.is_empty() {
                return Err(OntologyParseError::EmptyName(num));
            }
            if !names.iter().any(|(k, _)| *k == num) {
                names.push((num, name));
            }
        } else {
            members.entry(num).or_default().extend(question_labels(&c[3]));
        }
    }
    if let Some(num) = members.keys().find(|k| !names.iter().any(|(n, _)| n == *k)) {
        return Err(OntologyParseError::MissingName(*num));
    }
    if names.is_empty() {
        return Err(OntologyParseError::NoGroups);
    }
    let mut out = ParsedGroups::default();
    for (idx, (num, name)) in names.into_iter().enumerate() {
        out.objectives.push(name);
        for q in members.remove(&num).unwrap_or_default() {
            if (1..=n).contains(&q) {
                out.listed.entry(q).or_default().push(idx + 1);
            } else if !out.unknown.contains(&q) {
                out.unknown.push(q);
            }
        }
    }
    Ok(out)
}

static OBJECTIVE_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)most\s+relevant\s+objective\s*[*_]*\s*(?:number)?\s*[:\-]?\s*[*_]*\s*\[?\s*(?:objective\s*)?#?(\d+)").unwrap()
});
static BARE_OBJECTIVE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*[*_]*\[?\s*(\d+)\s*\]?[*_.]*\s*$").unwrap());

/// Parses the objective number from a classification reply. The last
/// `Most relevant Objective:` line wins; a reply that is only a (bracketed)
/// number is also accepted.
pub fn parse_objective_choice(reply: &str, objective_count: usize) -> Result<usize, OntologyParseError> {
    let index = OBJECTIVE_LINE
        .captures_iter(reply)
        .last()
        .or_else(|| BARE_OBJECTIVE.captures(reply.trim()))
        .and_then(|c| c[1].parse::<usize>().ok())
        .ok_or(OntologyParseError::NoObjective)?;
    if !(1..=objective_count).contains(&index) {
        return Err(OntologyParseError::OutOfRange {
            index,
            max: objective_count,
        });
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_blocks() {
        let r = "Group 1 name: Gas laws\nGroup 1 questions: [Q1, Q2]\nGroup 2 name: Ionic compounds\nGroup 2 questions: [Q3, Q4]";
        let p = parse_group_blocks(r, 4).unwrap();
        assert_eq!(p.objectives, vec!["Gas laws", "Ionic compounds"]);
        assert_eq!(
            p.listed.iter().map(|(q, g)| (*q, g[0])).collect::<Vec<_>>(),
            vec![(1, 1), (2, 1), (3, 2), (4, 2)]
        );
        assert!(p.is_clean(4));
    }

    #[test]
    fn omissions_duplicates_and_unknowns() {
        let r = "Group 1 name: A\nGroup 1 questions: [Q1, Q2]\nGroup 2 name: B\nGroup 2 questions: [Q2, Q4, Q9]";
        let p = parse_group_blocks(r, 4).unwrap();
        assert_eq!(p.omitted(4), vec![3]);
        assert_eq!(p.duplicated(), vec![2]);
        assert_eq!(p.unknown, vec![9]);
        assert!(!p.is_clean(4));
    }

    #[test]
    fn block_errors() {
        assert_eq!(
            parse_group_blocks("I would sort them by topic.", 3),
            Err(OntologyParseError::NoGroups)
        );
        assert_eq!(
            parse_group_blocks("Group 1 questions: [Q1]", 1),
            Err(OntologyParseError::MissingName(1))
        );
        assert_eq!(
            parse_group_blocks("Group 1 name: []\nGroup 1 questions: [Q1]", 1),
            Err(OntologyParseError::EmptyName(1))
        );
    }

    #[test]
    fn objective_lines() {
        assert_eq!(parse_objective_choice("Most relevant Objective: [2]", 3), Ok(2));
        assert_eq!(parse_objective_choice("Most relevant Objective: 2", 3), Ok(2));
        assert_eq!(
            parse_objective_choice("Objective two is best", 3),
            Err(OntologyParseError::NoObjective)
        );
        assert_eq!(parse_objective_choice("[3]", 3), Ok(3));
        assert_eq!(
            parse_objective_choice("Most relevant Objective: [4]", 3),
            Err(OntologyParseError::OutOfRange { index: 4, max: 3 })
        );
    }
}
