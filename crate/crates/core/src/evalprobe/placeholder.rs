//! Answer-span placeholder format: `*k* ... #k#` markers delimit spans so
//! translations preserve answer boundaries, and a validator checks that a
//! translation carries the same markers, balanced and non-overlapping
//! (marker order may legitimately differ across languages).

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// A document whose span markers satisfy the format invariants: each id
/// appears exactly once as opener `*k*` and once as closer `#k#`, the opener
/// precedes the closer, and spans neither nest nor overlap.
#[derive(Clone, Debug)]
pub struct PlaceholderDoc {
    text: String,
    /// id -> (opener char position, closer char position).
    spans: BTreeMap<u32, (usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MissingOpener { id: u32 },
    MissingCloser { id: u32 },
    DuplicateMarker { id: u32, position: usize },
    UnexpectedMarker { id: u32, position: usize },
    CloserBeforeOpener { id: u32, position: usize },
    Overlap { inner: u32, outer: u32, position: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingOpener { id } => write!(f, "missing opener *{id}*"),
            Violation::MissingCloser { id } => write!(f, "unclosed span {id} (missing #{id}#)"),
            Violation::DuplicateMarker { id, position } => {
                write!(f, "duplicate marker for span {id} at char {position}")
            }
            Violation::UnexpectedMarker { id, position } => {
                write!(f, "marker {id} at char {position} does not occur in the source")
            }
            Violation::CloserBeforeOpener { id, position } => {
                write!(f, "closer #{id}# at char {position} precedes its opener")
            }
            Violation::Overlap { inner, outer, position } => write!(
                f,
                "span {inner} at char {position} overlaps span {outer}"
            ),
        }
    }
}

/// Validation outcome; `spans` holds each extracted span text when valid.
#[derive(Clone, Debug)]
pub struct PlaceholderReport {
    pub violations: Vec<Violation>,
    pub spans: BTreeMap<u32, String>,
}

impl PlaceholderReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MarkerKind {
    Opener,
    Closer,
}

/// Scan `*k*` / `#k#` markers; returns (kind, id, char position, char length).
fn scan_markers(text: &str) -> Vec<(MarkerKind, u32, usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let kind = match chars[i] {
            '*' => Some(MarkerKind::Opener),
            '#' => Some(MarkerKind::Closer),
            _ => None,
        };
        if let Some(kind) = kind {
            let delim = chars[i];
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 1 && j < chars.len() && chars[j] == delim {
                let id: u32 = chars[i + 1..j]
                    .iter()
                    .collect::<String>()
                    .parse()
                    .unwrap_or(u32::MAX);
                out.push((kind, id, i, j - i + 1));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Structural check shared by source parsing and translation validation.
fn check_structure(text: &str, violations: &mut Vec<Violation>) -> BTreeMap<u32, (usize, usize)> {
    let markers = scan_markers(text);
    let mut opened: BTreeMap<u32, usize> = BTreeMap::new();
    let mut closed: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut current_open: Option<u32> = None;
    for (kind, id, pos, _) in &markers {
        match kind {
            MarkerKind::Opener => {
                if opened.contains_key(id) || closed.contains_key(id) {
                    violations.push(Violation::DuplicateMarker { id: *id, position: *pos });
                    continue;
                }
                if let Some(outer) = current_open {
                    violations.push(Violation::Overlap {
                        inner: *id,
                        outer,
                        position: *pos,
                    });
                }
                opened.insert(*id, *pos);
                current_open = Some(*id);
            }
            MarkerKind::Closer => {
                if closed.contains_key(id) {
                    violations.push(Violation::DuplicateMarker { id: *id, position: *pos });
                    continue;
                }
                match opened.remove(id) {
                    Some(open_pos) => {
                        if current_open == Some(*id) {
                            current_open = None;
                        } else if let Some(outer) = current_open {
                            violations.push(Violation::Overlap {
                                inner: *id,
                                outer,
                                position: *pos,
                            });
                        }
                        closed.insert(*id, (open_pos, *pos));
                    }
                    None => {
                        violations.push(Violation::CloserBeforeOpener { id: *id, position: *pos })
                    }
                }
            }
        }
    }
    for (&id, _) in &opened {
        violations.push(Violation::MissingCloser { id });
    }
    closed
}

impl PlaceholderDoc {
    /// Parse a source document, enforcing the format invariants.
    pub fn parse(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let mut violations = Vec::new();
        let spans = check_structure(&text, &mut violations);
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::Validation(format!(
                "placeholder format violations: {}",
                list.join("; ")
            )));
        }
        Ok(PlaceholderDoc { text, spans })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn span_ids(&self) -> Vec<u32> {
        self.spans.keys().copied().collect()
    }

    /// Extract each span's inner text.
    pub fn span_texts(&self) -> BTreeMap<u32, String> {
        extract_spans(&self.text, &self.spans)
    }
}

fn extract_spans(text: &str, spans: &BTreeMap<u32, (usize, usize)>) -> BTreeMap<u32, String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = BTreeMap::new();
    for (&id, &(open, close)) in spans {
        let open_len = format!("*{id}*").chars().count();
        let inner: String = chars[open + open_len..close].iter().collect();
        out.insert(id, inner.trim().to_string());
    }
    out
}

/// Validate a translation against a source document: the same marker
/// multiset, balanced and non-overlapping; ordering is free. Returns the
/// violations and, when clean, the extracted span texts.
pub fn validate_placeholders(source: &PlaceholderDoc, translation: &str) -> PlaceholderReport {
    let mut violations = Vec::new();
    let closed = check_structure(translation, &mut violations);
    // Marker multiset must match: every source id present, nothing extra.
    for (&id, _) in &closed {
        if !source.spans.contains_key(&id) {
            // Position of the unexpected opener.
            let pos = closed[&id].0;
            violations.push(Violation::UnexpectedMarker { id, position: pos });
        }
    }
    for (&id, _) in &source.spans {
        if !closed.contains_key(&id)
            && !violations.iter().any(|v| {
                matches!(v, Violation::MissingCloser { id: vid } | Violation::CloserBeforeOpener { id: vid, .. } if *vid == id)
            })
        {
            violations.push(Violation::MissingOpener { id });
        }
    }
    let spans = if violations.is_empty() {
        extract_spans(translation, &closed)
    } else {
        BTreeMap::new()
    };
    PlaceholderReport { violations, spans }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "this is *0* an example span #0# delimited by placeholders";

    #[test]
    fn the_reference_example_validates() {
        let doc = PlaceholderDoc::parse(EXAMPLE).unwrap();
        let report = validate_placeholders(&doc, EXAMPLE);
        assert!(report.ok(), "{:?}", report.violations);
        assert_eq!(report.spans[&0], "an example span");
    }

    #[test]
    fn missing_closer_is_an_unclosed_violation() {
        let doc = PlaceholderDoc::parse(EXAMPLE).unwrap();
        let report = validate_placeholders(&doc, "this is *0* an example span");
        assert!(!report.ok());
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::MissingCloser { id: 0 })));
    }

    #[test]
    fn reordered_spans_are_accepted() {
        let doc =
            PlaceholderDoc::parse("a *0* b #0# c *1* d #1#").unwrap();
        let report = validate_placeholders(&doc, "x *1* y #1# z *0* w #0#");
        assert!(report.ok(), "{:?}", report.violations);
        assert_eq!(report.spans[&0], "w");
        assert_eq!(report.spans[&1], "y");
    }

    #[test]
    fn nesting_and_crossing_are_rejected() {
        let doc = PlaceholderDoc::parse("a *0* b #0# c *1* d #1#").unwrap();
        let nested = validate_placeholders(&doc, "a *0* b *1* c #1# d #0#");
        assert!(nested
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Overlap { .. })));
        let crossing = validate_placeholders(&doc, "a *0* b *1* c #0# d #1#");
        assert!(crossing
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Overlap { .. })));
    }

    #[test]
    fn duplicated_and_unexpected_markers_are_reported() {
        let doc = PlaceholderDoc::parse("a *0* b #0#").unwrap();
        let dup = validate_placeholders(&doc, "a *0* b #0# c *0* d #0#");
        assert!(dup
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DuplicateMarker { id: 0, .. })));
        let extra = validate_placeholders(&doc, "a *0* b #0# c *7* d #7#");
        assert!(extra
            .violations
            .iter()
            .any(|v| matches!(v, Violation::UnexpectedMarker { id: 7, .. })));
    }

    #[test]
    fn closer_before_opener_is_reported() {
        let doc = PlaceholderDoc::parse("a *3* b #3#").unwrap();
        let report = validate_placeholders(&doc, "a #3# b *3*");
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::CloserBeforeOpener { id: 3, .. })));
    }

    #[test]
    fn source_parsing_enforces_the_invariants() {
        assert!(PlaceholderDoc::parse("plain text, no spans").is_ok());
        assert!(PlaceholderDoc::parse("*0* ok #0#").is_ok());
        assert!(PlaceholderDoc::parse("*0* nested *1* bad #1# #0#").is_err());
        assert!(PlaceholderDoc::parse("*0* unclosed").is_err());
        assert!(PlaceholderDoc::parse("#0# reversed *0*").is_err());
        assert!(PlaceholderDoc::parse("*0* a #0# *0* again #0#").is_err());
    }

    #[test]
    fn lone_stars_and_hashes_are_not_markers() {
        let doc = PlaceholderDoc::parse("2 * 3 = 6 and #hash and *0* span #0#").unwrap();
        assert_eq!(doc.span_ids(), vec![0]);
        assert_eq!(doc.span_texts()[&0], "span");
    }
}
