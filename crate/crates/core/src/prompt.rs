//! Fill-in-the-blank textual sub-prompts.
//!
//! Templates are rendered with literal sentinel strings (`[CLS]`, `[MASK]`,
//! `[SEP]`); mapping them to tokenizer-specific ids is left to the scoring
//! backend.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorspec::ColorText;

pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";
pub const SEP: &str = "[SEP]";

/// Longest relation phrase a template can hold.
pub const MAX_RELATION_TOKENS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("template text for {0} is empty")]
    EmptyText(&'static str),
    #[error("mask count must be 1..=3, got {0}")]
    BadMaskCount(usize),
    #[error("text {0:?} contains a reserved sentinel token")]
    ReservedToken(String),
    #[error("malformed prompt: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text(String),
    Mask(usize),
}

/// A rendered-able prompt: text runs interleaved with numbered mask slots.
///
/// Adjacent text runs are always merged, so [`PromptText::parse`] inverts
/// [`PromptText::render`] exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptText {
    segments: Vec<Segment>,
}

impl PromptText {
    fn build(parts: Vec<Part>) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        let mut masks = 0;
        for part in parts {
            match part {
                Part::Text(t) => match segments.last_mut() {
                    Some(Segment::Text(prev)) => {
                        prev.push(' ');
                        prev.push_str(&t);
                    }
                    _ => segments.push(Segment::Text(t)),
                },
                Part::Mask => {
                    segments.push(Segment::Mask(masks));
                    masks += 1;
                }
            }
        }
        Self { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn mask_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::Mask(_)))
            .count()
    }

    pub fn render(&self) -> String {
        let mut out = String::from(CLS);
        for seg in &self.segments {
            out.push(' ');
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Mask(_) => out.push_str(MASK),
            }
        }
        out.push(' ');
        out.push_str(SEP);
        out
    }

    /// Recovers the segment structure of a rendered prompt.
    pub fn parse(rendered: &str) -> Result<Self, PromptError> {
        let malformed = || PromptError::Malformed(format!("{rendered:?}"));
        let body = rendered
            .strip_prefix(CLS)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|r| r.strip_suffix(SEP))
            .and_then(|r| r.strip_suffix(' '))
            .ok_or_else(malformed)?;
        let chunks: Vec<&str> = body.split(MASK).collect();
        let last = chunks.len() - 1;
        let mut parts = Vec::new();
        for (i, chunk) in chunks.iter().enumerate() {
            if i > 0 {
                parts.push(Part::Mask);
            }
            // Chunks between masks carry the single separating spaces.
            let mut t = *chunk;
            if i > 0 {
                t = t.strip_prefix(' ').ok_or_else(malformed)?;
            }
            if i < last && !t.is_empty() {
                t = t.strip_suffix(' ').ok_or_else(malformed)?;
            }
            if !t.is_empty() {
                parts.push(text(t));
            }
        }
        let parsed = Self::build(parts);
        if parsed.render() != rendered {
            return Err(malformed());
        }
        Ok(parsed)
    }
}

impl fmt::Display for PromptText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

enum Part {
    Text(String),
    Mask,
}

fn text(s: impl Into<String>) -> Part {
    Part::Text(s.into())
}

fn checked<'a>(value: &'a str, what: &'static str) -> Result<&'a str, PromptError> {
    if value.trim().is_empty() {
        return Err(PromptError::EmptyText(what));
    }
    if [CLS, MASK, SEP].iter().any(|s| value.contains(s)) {
        return Err(PromptError::ReservedToken(value.to_string()));
    }
    Ok(value)
}

/// `[CLS] {query} is in [MASK] color [SEP]`. The query is inserted verbatim.
pub fn grounding_template(query: &str) -> Result<PromptText, PromptError> {
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let query = checked(query, "query")?;
    Ok(PromptText::build(vec![
        text(query),
        text("is in"),
        Part::Mask,
        text("color"),
    ]))
}

/// Wording of the pure-color probe prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeVariant {
    /// `a photo of [MASK] color`
    #[default]
    Of,
    /// `a photo in [MASK] color`
    In,
}

impl std::str::FromStr for ProbeVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "of" => Ok(Self::Of),
            "in" => Ok(Self::In),
            other => Err(format!(
                "unknown probe variant {other:?}, expected of or in"
            )),
        }
    }
}

pub fn cps_probe_template(variant: ProbeVariant) -> PromptText {
    let prep = match variant {
        ProbeVariant::Of => "of",
        ProbeVariant::In => "in",
    };
    PromptText::build(vec![
        text(format!("a photo {prep}")),
        Part::Mask,
        text("color"),
    ])
}

fn check_mask_count(l: usize) -> Result<(), PromptError> {
    if (1..=MAX_RELATION_TOKENS).contains(&l) {
        Ok(())
    } else {
        Err(PromptError::BadMaskCount(l))
    }
}

/// `[CLS] The {subject} in {c_s} color is [MASK]x{l} the {object} in {c_o} color [SEP]`.
pub fn relation_template(
    subject_text: &str,
    subject_color: &ColorText,
    object_text: &str,
    object_color: &ColorText,
    l: usize,
) -> Result<PromptText, PromptError> {
    check_mask_count(l)?;
    let subject = checked(subject_text, "subject")?;
    let object = checked(object_text, "object")?;
    let mut parts = vec![text(format!("The {subject} in {subject_color} color is"))];
    parts.extend((0..l).map(|_| Part::Mask));
    parts.push(text(format!("the {object} in {object_color} color")));
    Ok(PromptText::build(parts))
}

/// A candidate filler for a prompt's mask slots.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateTokenSeq {
    pub label: String,
    pub tokens: Vec<String>,
}

impl CandidateTokenSeq {
    /// Single-token candidate whose label is the token itself.
    pub fn single(token: impl Into<String>) -> Self {
        let token = token.into();
        Self {
            label: token.clone(),
            tokens: vec![token],
        }
    }

    /// Multi-token candidate labelled by its space-joined tokens.
    pub fn phrase(tokens: Vec<String>) -> Self {
        Self {
            label: tokens.join(" "),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The "no relation" filler for an `l`-mask relation template.
pub fn na_relation(l: usize) -> Result<CandidateTokenSeq, PromptError> {
    check_mask_count(l)?;
    let tokens: &[&str] = match l {
        1 => &["irrelevant"],
        2 => &["no", "relation"],
        _ => &["no", "relation", "with"],
    };
    Ok(CandidateTokenSeq::phrase(
        tokens.iter().map(|t| t.to_string()).collect(),
    ))
}
