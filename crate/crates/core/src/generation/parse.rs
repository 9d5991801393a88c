//! Parsers for candidate lists and final selections.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{jaccard, normalize_label, strip_markup};

pub const CANDIDATE_COUNT: usize = 5;
pub const DEFAULT_SELECTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("expected {CANDIDATE_COUNT}, found {0}")]
    WrongCount(usize),
    #[error("no list items found")]
    NoItems,
    #[error("reply does not designate any candidate")]
    Unresolved,
}

/// Exactly five non-empty KC labels, in the order the model listed them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct KcCandidateList {
    items: Vec<String>,
}

impl KcCandidateList {
    pub fn new(items: Vec<String>) -> Result<Self, ParseError> {
        if items.is_empty() {
            return Err(ParseError::NoItems);
        }
        if items.len() != CANDIDATE_COUNT {
            return Err(ParseError::WrongCount(items.len()));
        }
        if items.iter().any(|i| i.trim().is_empty()) {
            return Err(ParseError::NoItems);
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// Numbered `1. ...` lines, as shown in repair prompts.
    pub fn numbered(&self) -> String {
        self.items
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {s}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl TryFrom<Vec<String>> for KcCandidateList {
    type Error = ParseError;

    fn try_from(v: Vec<String>) -> Result<Self, ParseError> {
        Self::new(v)
    }
}

impl From<KcCandidateList> for Vec<String> {
    fn from(c: KcCandidateList) -> Self {
        c.items
    }
}

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:#{1,6}\s*)?(?:\*\*|__)?\s*\(?(\d{1,2})\s*[.):]\s*(.+)$").unwrap());
static BULLET: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\s*)[-*\u{2022}+]\s+(.+)$").unwrap());
static BOLD_HEAD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\*\*(.+?)\*\*\s*(?::|-|\u{2013}|\u{2014})?\s*(.*)$").unwrap());

/// Cleans one list item: drops emphasis, and when the item opens with a bold
/// heading followed by an explanation, keeps only the heading.
fn clean_item(raw: &str) -> String {
    let raw = raw.trim();
    let text = match BOLD_HEAD.captures(raw) {
        Some(c) if !c[2].trim().is_empty() => c[1].to_string(),
        _ => raw.to_string(),
    };
    strip_markup(&text).trim_end_matches(':').trim().to_string()
}

/// Extracts exactly five labels from a numbered, bulleted, or one-per-line
/// list. Numbered lists win over bullets, bullets over bare lines. When a
/// reply holds several numbered runs (e.g. reasoning steps then a final
/// list), the last five-item run is used.
pub fn parse_candidate_list(reply: &str) -> Result<KcCandidateList, ParseError> {
    let lines: Vec<&str> = reply.lines().collect();

    let mut runs: Vec<Vec<String>> = Vec::new();
    for line in &lines {
        let Some(c) = NUMBERED.captures(line) else { continue };
        let n: usize = c[1].parse().unwrap_or(0);
        let item = clean_item(&c[2]);
        if item.is_empty() {
            continue;
        }
        if n == 1 {
            runs.push(vec![item]);
        } else if let Some(run) = runs.last_mut() {
            if run.len() + 1 == n {
                run.push(item);
            }
        }
    }
    if !runs.is_empty() {
        if let Some(run) = runs.iter().rev().find(|r| r.len() == CANDIDATE_COUNT) {
            return KcCandidateList::new(run.clone());
        }
        let longest = runs.iter().map(Vec::len).max().unwrap_or(0);
        return Err(ParseError::WrongCount(longest));
    }

    let bullets: Vec<(usize, String)> = lines
        .iter()
        .filter_map(|l| BULLET.captures(l).map(|c| (c[1].len(), clean_item(&c[2]))))
        .filter(|(_, s)| !s.is_empty())
        .collect();
    if let Some(indent) = bullets.iter().map(|(i, _)| *i).min() {
        let top: Vec<String> = bullets.into_iter().filter(|(i, _)| *i == indent).map(|(_, s)| s).collect();
        return KcCandidateList::new(top);
    }

    let plain: Vec<String> = lines
        .iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty() && !l.ends_with(':'))
        .map(clean_item)
        .filter(|s| !s.is_empty())
        .collect();
    KcCandidateList::new(plain)
}

/// Which resolution rule picked the selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    Ordinal,
    Substring,
    Overlap,
}

static ORDINAL_NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:\b(?:point|topic|item|number|option|objective|skill|kc|choice|no\.)|#)\s*#?\s*\(?([1-5])\b").unwrap()
});
static ORDINAL_WORD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(first|second|third|fourth|fifth|1st|2nd|3rd|4th|5th)\s+(?:point|topic|item|option|one|skill|objective|kc|choice)\b")
        .unwrap()
});
static LEADING_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\*\*)?\s*\(?([1-5])\s*[.):](?:\s|\*|$)|^\s*\(?([1-5])\)?\.?\s*$").unwrap());

fn ordinal_mentions(reply: &str) -> Vec<(usize, usize)> {
    let mut hits: Vec<(usize, usize)> = Vec::new();
    if let Some(c) = LEADING_NUMBER.captures(reply) {
        let n = c.get(1).or_else(|| c.get(2)).unwrap();
        hits.push((0, n.as_str().parse().unwrap()));
    }
    for c in ORDINAL_NUMBER.captures_iter(reply) {
        hits.push((c.get(0).unwrap().start(), c[1].parse().unwrap()));
    }
    for c in ORDINAL_WORD.captures_iter(reply) {
        let n = match c[1].to_lowercase().as_str() {
            "first" | "1st" => 1,
            "second" | "2nd" => 2,
            "third" | "3rd" => 3,
            "fourth" | "4th" => 4,
            _ => 5,
        };
        hits.push((c.get(0).unwrap().start(), n));
    }
    hits.sort();
    hits
}

/// Resolves the candidate a reply designates, returning its 0-based index.
///
/// Rules in priority order: an explicit ordinal ("point 2", "the third
/// topic", a leading "3."); the longest candidate contained verbatim in the
/// reply; the candidate with the highest word overlap, if at least
/// `threshold`. A reply that mentions several different ordinals is resolved
/// by the text rules first and falls back to its first ordinal.
pub fn parse_selection(reply: &str, candidates: &KcCandidateList, threshold: f64) -> Result<(usize, SelectionRule), ParseError> {
    let mentions = ordinal_mentions(reply);
    let mut distinct: Vec<usize> = mentions.iter().map(|&(_, n)| n).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() == 1 {
        return Ok((distinct[0] - 1, SelectionRule::Ordinal));
    }

    let norm_reply = normalize_label(&strip_markup(reply));
    let substring = candidates
        .items()
        .iter()
        .enumerate()
        .map(|(i, c)| (i, normalize_label(&strip_markup(c))))
        .filter(|(_, c)| !c.is_empty() && norm_reply.contains(c.as_str()))
        .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)));
    if let Some((i, _)) = substring {
        return Ok((i, SelectionRule::Substring));
    }

    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.items().iter().enumerate() {
        let score = jaccard(reply, c);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    if let Some((i, score)) = best {
        if score >= threshold {
            return Ok((i, SelectionRule::Overlap));
        }
    }
    match mentions.first() {
        Some(&(_, n)) => Ok((n - 1, SelectionRule::Ordinal)),
        None => Err(ParseError::Unresolved),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five() -> KcCandidateList {
        KcCandidateList::new(
            [
                "Apply Boyle's law",
                "Calculate gas pressure",
                "Identify constant temperature conditions",
                "Convert volume units between mL and L",
                "Interpret piston diagrams",
            ]
            .map(String::from)
            .to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn numbered_list() {
        let reply = "1. Apply Boyle's law\n2. b\n3. c\n4. d\n5. e";
        let c = parse_candidate_list(reply).unwrap();
        assert_eq!(c.items()[0], "Apply Boyle's law");
        assert_eq!(c.items().len(), 5);
    }

    #[test]
    fn bullet_list() {
        let reply = "Here they are:\n- a\n- b\n- c\n- d\n- e\n";
        assert_eq!(parse_candidate_list(reply).unwrap().items(), ["a", "b", "c", "d", "e"]);
    }

    #[test]
    fn count_errors() {
        assert_eq!(
            parse_candidate_list("1. a\n2. b\n3. c\n4. d").unwrap_err().to_string(),
            "expected 5, found 4"
        );
        assert_eq!(
            parse_candidate_list("1. a\n2. b\n3. c\n4. d\n5. e\n6. f").unwrap_err(),
            ParseError::WrongCount(6)
        );
        assert_eq!(parse_candidate_list("").unwrap_err(), ParseError::NoItems);
        assert_eq!(parse_candidate_list("   \n  ").unwrap_err(), ParseError::NoItems);
    }

    #[test]
    fn selection_by_ordinal() {
        assert_eq!(
            parse_selection("The most relevant is point 2.", &five(), 0.5).unwrap(),
            (1, SelectionRule::Ordinal)
        );
        assert_eq!(parse_selection("The third topic fits best", &five(), 0.5).unwrap().0, 2);
        assert_eq!(parse_selection("4. Convert volume units", &five(), 0.5).unwrap().0, 3);
        assert_eq!(parse_selection(" 5 ", &five(), 0.5).unwrap().0, 4);
        assert_eq!(parse_selection("(2)", &five(), 0.5).unwrap().0, 1);
    }

    #[test]
    fn selection_by_substring() {
        let reply = "Most relevant: \"Convert volume units between mL and L\" since the volume is given in mL.";
        assert_eq!(parse_selection(reply, &five(), 0.5).unwrap(), (3, SelectionRule::Substring));
    }

    #[test]
    fn selection_by_overlap() {
        let reply = "Identify constant temperature";
        assert_eq!(parse_selection(reply, &five(), 0.5).unwrap(), (2, SelectionRule::Overlap));
    }

    #[test]
    fn selection_unresolved() {
        assert_eq!(
            parse_selection("none of these apply", &five(), 0.5).unwrap_err(),
            ParseError::Unresolved
        );
    }

    #[test]
    fn conflicting_ordinals_prefer_text() {
        let reply = "Unlike point 4, point 1 is central: Apply Boyle's law";
        assert_eq!(parse_selection(reply, &five(), 0.5).unwrap(), (0, SelectionRule::Substring));
    }

    #[test]
    fn candidate_list_serde_enforces_five() {
        assert!(serde_json::from_str::<KcCandidateList>(r#"["a","b"]"#).is_err());
        let c: KcCandidateList = serde_json::from_str(r#"["a","b","c","d","e"]"#).unwrap();
        assert_eq!(c.numbered().lines().next(), Some("1. a"));
    }
}
