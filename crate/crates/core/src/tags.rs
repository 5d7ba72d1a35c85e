//! Frame-level entity tag scheme (BIO over ORG/PER/LOC) and the special-symbol
//! text rendering: '{' opens an organization, '|' a person, '$' a location,
//! and ']' closes any entity.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TAG_COUNT: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityType {
    Org,
    Per,
    Loc,
}

impl EntityType {
    pub const ALL: [EntityType; 3] = [EntityType::Org, EntityType::Per, EntityType::Loc];

    pub fn start_symbol(self) -> char {
        match self {
            EntityType::Org => '{',
            EntityType::Per => '|',
            EntityType::Loc => '$',
        }
    }

    pub fn from_start_symbol(c: char) -> Option<Self> {
        match c {
            '{' => Some(EntityType::Org),
            '|' => Some(EntityType::Per),
            '$' => Some(EntityType::Loc),
            _ => None,
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EntityType::Org => "ORG",
            EntityType::Per => "PER",
            EntityType::Loc => "LOC",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for EntityType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ORG" => Ok(EntityType::Org),
            "PER" => Ok(EntityType::Per),
            "LOC" => Ok(EntityType::Loc),
            other => Err(Error::Data(format!("unknown entity type `{other}`"))),
        }
    }
}

/// Per-frame tag: O, B-ORG, I-ORG, B-PER, I-PER, B-LOC, I-LOC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityTag {
    Outside,
    Begin(EntityType),
    Inside(EntityType),
}

impl EntityTag {
    /// Class index in `[0, TAG_COUNT)`; O is 0, then B/I pairs per type.
    pub fn index(self) -> usize {
        match self {
            EntityTag::Outside => 0,
            EntityTag::Begin(EntityType::Org) => 1,
            EntityTag::Inside(EntityType::Org) => 2,
            EntityTag::Begin(EntityType::Per) => 3,
            EntityTag::Inside(EntityType::Per) => 4,
            EntityTag::Begin(EntityType::Loc) => 5,
            EntityTag::Inside(EntityType::Loc) => 6,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Ok(match i {
            0 => EntityTag::Outside,
            1 => EntityTag::Begin(EntityType::Org),
            2 => EntityTag::Inside(EntityType::Org),
            3 => EntityTag::Begin(EntityType::Per),
            4 => EntityTag::Inside(EntityType::Per),
            5 => EntityTag::Begin(EntityType::Loc),
            6 => EntityTag::Inside(EntityType::Loc),
            other => return Err(Error::Data(format!("tag index {other} out of range"))),
        })
    }
}

/// Half-open frame span `[start, end)` of one entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub etype: EntityType,
}

/// Expand non-overlapping spans into per-frame BIO tags.
pub fn spans_to_tags(spans: &[EntitySpan], t: usize) -> Result<Vec<EntityTag>> {
    let mut tags = vec![EntityTag::Outside; t];
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| s.start);
    let mut last_end = 0usize;
    for (i, span) in sorted.iter().enumerate() {
        if span.start >= span.end || span.end > t {
            return Err(Error::Data(format!(
                "entity span [{}, {}) invalid for {t} frames",
                span.start, span.end
            )));
        }
        if i > 0 && span.start < last_end {
            return Err(Error::Data(format!(
                "overlapping entity spans at frame {}",
                span.start
            )));
        }
        last_end = span.end;
        tags[span.start] = EntityTag::Begin(span.etype);
        for tag in tags.iter_mut().take(span.end).skip(span.start + 1) {
            *tag = EntityTag::Inside(span.etype);
        }
    }
    Ok(tags)
}

/// Collapse a well-formed tag sequence back into spans.
pub fn tags_to_spans(tags: &[EntityTag]) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, EntityType)> = None;
    for (i, tag) in tags.iter().enumerate() {
        match *tag {
            EntityTag::Outside => {
                if let Some((start, ty)) = open.take() {
                    spans.push(EntitySpan { start, end: i, etype: ty });
                }
            }
            EntityTag::Begin(ty) => {
                if let Some((start, prev)) = open.take() {
                    spans.push(EntitySpan { start, end: i, etype: prev });
                }
                open = Some((i, ty));
            }
            EntityTag::Inside(ty) => match open {
                Some((_, prev)) if prev == ty => {}
                _ => {
                    return Err(Error::Data(format!(
                        "ill-formed tag sequence: I-{ty} at frame {i} without matching B-{ty}"
                    )))
                }
            },
        }
    }
    if let Some((start, ty)) = open {
        spans.push(EntitySpan { start, end: tags.len(), etype: ty });
    }
    Ok(spans)
}

pub fn is_well_formed(tags: &[EntityTag]) -> bool {
    tags_to_spans(tags).is_ok()
}

/// Repair span structure after per-frame argmax decoding: any I-X that does
/// not continue a span of the same type becomes B-X.
pub fn repair_tags(tags: &[EntityTag]) -> Vec<EntityTag> {
    let mut out = Vec::with_capacity(tags.len());
    let mut current: Option<EntityType> = None;
    for tag in tags {
        let fixed = match *tag {
            EntityTag::Inside(ty) if current != Some(ty) => EntityTag::Begin(ty),
            other => other,
        };
        current = match fixed {
            EntityTag::Outside => None,
            EntityTag::Begin(ty) | EntityTag::Inside(ty) => Some(ty),
        };
        out.push(fixed);
    }
    out
}

/// Annotate whitespace-joined words with entity symbols given token spans
/// `[start, end)`. Overlapping or out-of-range spans are an error.
pub fn annotate_words(words: &[&str], spans: &[(usize, usize, EntityType)]) -> Result<String> {
    let mut sorted: Vec<&(usize, usize, EntityType)> = spans.iter().collect();
    sorted.sort_by_key(|s| s.0);
    let mut last_end = 0usize;
    for (i, (start, end, _)) in sorted.iter().enumerate() {
        if start >= end || *end > words.len() {
            return Err(Error::Data(format!(
                "token span [{start}, {end}) invalid for {} words",
                words.len()
            )));
        }
        if i > 0 && *start < last_end {
            return Err(Error::Data(format!("overlapping entity spans at token {start}")));
        }
        last_end = *end;
    }
    let mut rendered: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    for (start, end, ty) in sorted {
        rendered[*start] = format!("{}{}", ty.start_symbol(), rendered[*start]);
        rendered[*end - 1] = format!("{}]", rendered[*end - 1]);
    }
    Ok(rendered.join(" "))
}

/// Render `(word, entity type or none)` tokens with the symbol scheme;
/// consecutive tokens of the same type form one entity span.
pub fn render_annotated_text(tokens: &[(String, Option<EntityType>)]) -> Result<String> {
    let words: Vec<&str> = tokens.iter().map(|(w, _)| w.as_str()).collect();
    let mut spans = Vec::new();
    let mut open: Option<(usize, EntityType)> = None;
    for (i, (_, ty)) in tokens.iter().enumerate() {
        let continues = matches!((open, ty), (Some((_, prev)), Some(t)) if prev == *t);
        if continues {
            continue;
        }
        if let Some((start, prev)) = open.take() {
            spans.push((start, i, prev));
        }
        if let Some(t) = ty {
            open = Some((i, *t));
        }
    }
    if let Some((start, ty)) = open {
        spans.push((start, tokens.len(), ty));
    }
    annotate_words(&words, &spans)
}

/// Inverse of [`render_annotated_text`].
pub fn parse_annotated_text(s: &str) -> Result<Vec<(String, Option<EntityType>)>> {
    let mut tokens = Vec::new();
    let mut current: Option<EntityType> = None;
    for raw in s.split_whitespace() {
        let mut word = raw;
        if let Some(first) = word.chars().next() {
            if let Some(ty) = EntityType::from_start_symbol(first) {
                if current.is_some() {
                    return Err(Error::Data(format!("nested entity start in `{raw}`")));
                }
                current = Some(ty);
                word = &word[first.len_utf8()..];
            }
        }
        let ty = current;
        if word.ends_with(']') {
            if current.is_none() {
                return Err(Error::Data(format!("dangling entity close in `{raw}`")));
            }
            word = &word[..word.len() - 1];
            current = None;
        }
        tokens.push((word.to_string(), ty));
    }
    if current.is_some() {
        return Err(Error::Data("unclosed entity span".into()));
    }
    Ok(tokens)
}
