//! Parsers for free-text LLM replies.

use std::sync::LazyLock;

use regex::Regex;

use crate::terminology::normalize_code;

static SUPPORTED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)supported\W{0,4}([01])\b").expect("regex"));
static EXPLANATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)explanation\W{0,4}(.*)$").expect("regex"));
static LEADING_DIGIT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\W*([01])\b").expect("regex"));
static ANSWER_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)answer\s*:").expect("regex"));
static PAREN_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\(?\b([A-Z])\)").expect("regex"));

/// Drops a leading `Label:` (e.g. `Context:`) from a reply.
pub fn strip_field_label<'a>(text: &'a str, label: &str) -> &'a str {
    let trimmed = text.trim();
    let lower = trimmed.to_lowercase();
    let label = label.to_lowercase();
    if lower.starts_with(&label) {
        let rest = &trimmed[label.len()..];
        if let Some(rest) = rest.trim_start().strip_prefix(':') {
            return rest.trim();
        }
    }
    trimmed
}

fn split_list(text: &str) -> impl Iterator<Item = &str> {
    text.split([',', ';', '\n'])
        .map(|s| s.trim().trim_start_matches(['-', '*', '•']).trim())
        .filter(|s| !s.is_empty())
}

/// Comma-separated synonyms, trimmed and deduplicated case-insensitively,
/// without the query term itself.
pub fn parse_alternative_names(reply: &str, term: &str) -> Vec<String> {
    let body = strip_field_label(reply, "Alternative Names");
    let term = term.trim().to_lowercase();
    let mut seen = vec![term];
    let mut out = Vec::new();
    for name in split_list(body) {
        let key = name.to_lowercase();
        if !seen.contains(&key) {
            seen.push(key);
            out.push(name.to_string());
        }
    }
    out
}

/// Candidate codes from a reply. Returns `(codes, dropped)` where `codes` are
/// upper-cased, deduplicated in first-occurrence order and accepted by
/// `plausible`; `dropped` counts rejected entries.
pub fn parse_codes(reply: &str, plausible: impl Fn(&str) -> bool) -> (Vec<String>, usize) {
    let mut body = reply.trim();
    if let Some(pos) = body.to_lowercase().rfind("codes:") {
        body = &body[pos + "codes:".len()..];
    } else if let Some(pos) = body.to_lowercase().rfind("code:") {
        body = &body[pos + "code:".len()..];
    }
    let mut codes: Vec<String> = Vec::new();
    let mut dropped = 0;
    for raw in split_list(body) {
        let code = normalize_code(raw.trim_matches(['.', '"', '\'', '`', '(', ')']));
        if plausible(&code) {
            if !codes.contains(&code) {
                codes.push(code);
            }
        } else {
            dropped += 1;
        }
    }
    (codes, dropped)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub supported: bool,
    pub explanation: String,
}

/// `Supported: 1/0` plus optional `explanation: ...`; `None` when no verdict
/// digit can be found.
pub fn parse_verdict(reply: &str) -> Option<Verdict> {
    let digit = SUPPORTED
        .captures(reply)
        .or_else(|| LEADING_DIGIT.captures(reply))?
        .get(1)?
        .as_str()
        .to_string();
    let explanation = EXPLANATION
        .captures(reply)
        .and_then(|c| c.get(1))
        .map(|m| m.as_str().trim().to_string())
        .unwrap_or_default();
    let supported = digit == "1";
    let explanation = if explanation.is_empty() && !supported {
        "no explanation given".to_string()
    } else {
        explanation
    };
    Some(Verdict {
        supported,
        explanation,
    })
}

/// Picks an option label from a free-text answer. `options` pairs each label
/// with its code; `none_label` is the "None of the above" label.
pub fn parse_option_answer(
    reply: &str,
    options: &[(String, String)],
    none_label: &str,
) -> Option<String> {
    let segment = match ANSWER_MARKER.find_iter(reply).last() {
        Some(m) => &reply[m.end()..],
        None => reply,
    };
    let head = segment
        .trim()
        .trim_start_matches(['(', '*', '[', '"'])
        .trim_start();
    let is_label = |l: &str| l == none_label || options.iter().any(|(ol, _)| ol == l);

    let mut chars = head.chars();
    if let Some(first) = chars.next() {
        let next = chars.next();
        let letter = first.to_string();
        if first.is_ascii_uppercase() && !next.is_some_and(|c| c.is_alphanumeric()) && is_label(&letter) {
            return Some(letter);
        }
    }
    if head.to_lowercase().starts_with("none") {
        return Some(none_label.to_string());
    }
    let upper = segment.to_uppercase();
    let mut best: Option<(usize, &str)> = None;
    for (label, code) in options {
        if let Some(pos) = find_token(&upper, code) {
            if best.is_none_or(|(b, _)| pos < b) {
                best = Some((pos, label));
            }
        }
    }
    if let Some((_, label)) = best {
        return Some(label.to_string());
    }
    PAREN_LETTER
        .captures_iter(segment)
        .map(|c| c[1].to_string())
        .find(|l| is_label(l))
}

/// Byte position of `needle` in `haystack` as a whole alphanumeric token.
fn find_token(haystack: &str, needle: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = haystack[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = haystack[end..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return Some(start);
        }
        from = end;
    }
    None
}

/// Normalizes a provider token (`" A"`, `"(A"`) to a bare label.
pub fn token_label(token: &str) -> &str {
    token.trim().trim_matches(['(', ')', '.', '*'])
}
