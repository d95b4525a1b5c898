//! BIO/IO tag schemes: B-tag removal and restoration, presence-vector
//! transformation for the alignment head, span extraction and validation.
//!
//! Tag surface forms are the case-sensitive strings `O`, `B-<TYPE>`,
//! `I-<TYPE>`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaggingError {
    #[error("unknown tag string {0:?} (expected O, B-<TYPE> or I-<TYPE>)")]
    UnknownTag(String),
    #[error("B-tag {0:?} not allowed in IO input at position {1}")]
    BTagInIoInput(String, usize),
    #[error("tag index {index} out of range for {num_classes} classes")]
    IndexOutOfRange { index: usize, num_classes: usize },
    #[error("invalid BIO transitions: {0:?}")]
    InvalidBio(Vec<BioViolation>),
}

pub type Result<T> = std::result::Result<T, TaggingError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl Tag {
    pub fn parse(s: &str) -> Result<Tag> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        if let Some(t) = s.strip_prefix("B-") {
            if !t.is_empty() {
                return Ok(Tag::Begin(t.to_string()));
            }
        }
        if let Some(t) = s.strip_prefix("I-") {
            if !t.is_empty() {
                return Ok(Tag::Inside(t.to_string()));
            }
        }
        Err(TaggingError::UnknownTag(s.to_string()))
    }

    pub fn as_string(&self) -> String {
        match self {
            Tag::Outside => "O".to_string(),
            Tag::Begin(t) => format!("B-{t}"),
            Tag::Inside(t) => format!("I-{t}"),
        }
    }

    pub fn entity_type(&self) -> Option<&str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }
}

/// Maps tag strings to class indices. O is always index 0; IO mode indexes
/// `I-<type>` per entity type, BIO mode additionally indexes `B-<type>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagScheme {
    pub entity_types: Vec<String>,
    pub class_index: BTreeMap<String, usize>,
}

impl TagScheme {
    /// IO scheme over the given entity types (sorted, deduplicated).
    pub fn io_from_types<I: IntoIterator<Item = String>>(types: I) -> TagScheme {
        let mut entity_types: Vec<String> = types.into_iter().collect();
        entity_types.sort();
        entity_types.dedup();
        let mut class_index = BTreeMap::new();
        class_index.insert("O".to_string(), 0);
        for (i, t) in entity_types.iter().enumerate() {
            class_index.insert(format!("I-{t}"), i + 1);
        }
        TagScheme {
            entity_types,
            class_index,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn index_of(&self, tag: &str) -> Result<usize> {
        self.class_index
            .get(tag)
            .copied()
            .ok_or_else(|| TaggingError::UnknownTag(tag.to_string()))
    }

    pub fn tag_of(&self, index: usize) -> Result<&str> {
        self.class_index
            .iter()
            .find(|(_, &i)| i == index)
            .map(|(s, _)| s.as_str())
            .ok_or(TaggingError::IndexOutOfRange {
                index,
                num_classes: self.num_classes(),
            })
    }
}

/// A contiguous entity with inclusive token bounds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

/// Rewrite every `B-T` as `I-T`; O and I tags pass through.
pub fn bio_to_io(tags: &[String]) -> Result<Vec<String>> {
    tags.iter()
        .map(|s| {
            let tag = Tag::parse(s)?;
            Ok(match tag {
                Tag::Begin(t) => format!("I-{t}"),
                other => other.as_string(),
            })
        })
        .collect()
}

/// Restore B-tags from an IO sequence: an `I-T` opens an entity when it is
/// sequence-initial, follows O, or follows a different type. The output is
/// always BIO-valid. Lossy for adjacent same-type entities, which collapse
/// into one.
pub fn restore_b_tags(tags: &[String]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev_type: Option<String> = None;
    for (pos, s) in tags.iter().enumerate() {
        let tag = Tag::parse(s)?;
        match tag {
            Tag::Begin(t) => return Err(TaggingError::BTagInIoInput(format!("B-{t}"), pos)),
            Tag::Outside => {
                out.push("O".to_string());
                prev_type = None;
            }
            Tag::Inside(t) => {
                if prev_type.as_deref() == Some(t.as_str()) {
                    out.push(format!("I-{t}"));
                } else {
                    out.push(format!("B-{t}"));
                }
                prev_type = Some(t);
            }
        }
    }
    Ok(out)
}

/// Multi-hot presence vector over class indices: bit c is set iff class c
/// occurs anywhere in the sequence. The O class sets its bit like any other;
/// pass `include_outside = false` to leave bit 0 clear instead.
pub fn transform_labels(
    tag_indices: &[usize],
    num_classes: usize,
    include_outside: bool,
) -> Result<Vec<f64>> {
    let mut y = vec![0.0; num_classes];
    for &idx in tag_indices {
        if idx >= num_classes {
            return Err(TaggingError::IndexOutOfRange {
                index: idx,
                num_classes,
            });
        }
        if idx == 0 && !include_outside {
            continue;
        }
        y[idx] = 1.0;
    }
    Ok(y)
}

/// Maximal contiguous entities of a BIO-valid sequence. A B-tag always opens
/// a new span.
pub fn extract_spans(tags: &[String]) -> Result<Vec<Span>> {
    let violations = validate_bio(tags)?;
    if !violations.is_empty() {
        return Err(TaggingError::InvalidBio(violations));
    }
    let mut spans = Vec::new();
    let mut current: Option<Span> = None;
    for (pos, s) in tags.iter().enumerate() {
        let tag = Tag::parse(s)?;
        match tag {
            Tag::Outside => {
                if let Some(sp) = current.take() {
                    spans.push(sp);
                }
            }
            Tag::Begin(t) => {
                if let Some(sp) = current.take() {
                    spans.push(sp);
                }
                current = Some(Span {
                    start: pos,
                    end: pos,
                    entity_type: t,
                });
            }
            Tag::Inside(_) => {
                // validated: always continues the open span
                if let Some(sp) = current.as_mut() {
                    sp.end = pos;
                }
            }
        }
    }
    if let Some(sp) = current.take() {
        spans.push(sp);
    }
    Ok(spans)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BioViolationKind {
    /// `I-T` with no preceding entity tag (skipped B).
    SkippedB,
    /// `I-T` following a tag of a different entity type.
    TypeBreak,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioViolation {
    pub position: usize,
    pub kind: BioViolationKind,
}

/// Report BIO transition violations: an I-tag must follow a B or I of the
/// same type.
pub fn validate_bio(tags: &[String]) -> Result<Vec<BioViolation>> {
    let mut violations = Vec::new();
    let mut prev: Option<Tag> = None;
    for (pos, s) in tags.iter().enumerate() {
        let tag = Tag::parse(s)?;
        if let Tag::Inside(t) = &tag {
            match prev.as_ref().and_then(|p| p.entity_type()) {
                None => violations.push(BioViolation {
                    position: pos,
                    kind: BioViolationKind::SkippedB,
                }),
                Some(pt) if pt != t => violations.push(BioViolation {
                    position: pos,
                    kind: BioViolationKind::TypeBreak,
                }),
                Some(_) => {}
            }
        }
        prev = Some(tag);
    }
    Ok(violations)
}

/// Repair a BIO sequence in place by promoting stray I-tags to B-tags (the
/// same rule restoration uses). Returns the positions repaired.
pub fn repair_bio(tags: &mut [String]) -> Result<Vec<usize>> {
    let violations = validate_bio(tags)?;
    let positions: Vec<usize> = violations.iter().map(|v| v.position).collect();
    for v in &violations {
        let t = Tag::parse(&tags[v.position])?;
        if let Tag::Inside(ty) = t {
            tags[v.position] = format!("B-{ty}");
        }
    }
    Ok(positions)
}
