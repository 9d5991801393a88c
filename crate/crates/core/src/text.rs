//! Small text normalization helpers shared by the parsers and judges.

use std::collections::BTreeSet;

/// Lowercases, trims, collapses internal whitespace and strips terminal
/// punctuation.
pub fn normalize_label(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() && c != ')' && c != ']')
        .trim()
        .to_string()
}

/// Removes markdown emphasis, backticks and wrapping quotes.
pub fn strip_markup(s: &str) -> String {
    let s = s.replace("**", "").replace("__", "").replace('`', "");
    let mut s = s.trim();
    for mark in ['*', '_'] {
        if let Some(inner) = s.strip_prefix(mark).and_then(|x| x.strip_suffix(mark)) {
            s = inner.trim();
        }
    }
    s.trim_matches(|c| matches!(c, '"' | '\u{201c}' | '\u{201d}')).trim().to_string()
}

/// Lowercased alphanumeric word tokens (apostrophes kept inside words).
pub fn tokens(s: &str) -> BTreeSet<String> {
    s.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '\u{2019}'))
        .map(|t| t.trim_matches(|c| c == '\'' || c == '\u{2019}'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Jaccard similarity of the two token sets; 0 when both are empty.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (tokens(a), tokens(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_label("  Apply   Boyle's LAW. "), "apply boyle's law");
        assert_eq!(normalize_label("x!?"), "x");
        assert_eq!(normalize_label("f(x)"), "f(x)");
    }

    #[test]
    fn markup() {
        assert_eq!(strip_markup("**Apply `x`**"), "Apply x");
        assert_eq!(strip_markup("\"quoted\""), "quoted");
        assert_eq!(strip_markup("*Apply x*"), "Apply x");
        assert_eq!(strip_markup("snake_case_name"), "snake_case_name");
    }

    #[test]
    fn overlap() {
        assert_eq!(jaccard("a b", "a b"), 1.0);
        assert_eq!(jaccard("a b", "c d"), 0.0);
        assert!((jaccard("apply boyle's law", "Boyle's law") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(jaccard("", ""), 0.0);
    }
}
