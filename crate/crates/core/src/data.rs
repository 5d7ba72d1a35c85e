//! Shared data model: per-utterance frame features and frame labels.

use crate::error::{Error, Result};
use crate::tags::{EntitySpan, EntityTag};

/// Analysis frame length; every frame carries one authenticity label.
pub const FRAME_DURATION_MS: u32 = 20;

/// A `T x D` real-valued feature sequence for one utterance, row-major
/// (frame-major) storage.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub utterance_id: String,
    pub data: Vec<f64>,
    pub t: usize,
    pub d: usize,
    pub frame_duration_ms: u32,
}

impl FrameFeatures {
    pub fn new(utterance_id: impl Into<String>, data: Vec<f64>, t: usize, d: usize) -> Result<Self> {
        if t == 0 || d == 0 {
            return Err(Error::Dim(format!("frame features need t >= 1 and d >= 1, got {t} x {d}")));
        }
        if data.len() != t * d {
            return Err(Error::Dim(format!(
                "frame features length {} does not match [{t} x {d}]",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature value {v}")));
        }
        Ok(FrameFeatures {
            utterance_id: utterance_id.into(),
            data,
            t,
            d,
            frame_duration_ms: FRAME_DURATION_MS,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.d..(t + 1) * self.d]
    }
}

/// Per-frame authenticity labels (1 = authentic, 0 = spoofed) together with
/// the entity annotation used by the teacher branch.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub authentic: Vec<u8>,
    pub tags: Vec<EntityTag>,
    pub entity_spans: Vec<EntitySpan>,
}

impl FrameLabels {
    pub fn new(authentic: Vec<u8>, tags: Vec<EntityTag>, entity_spans: Vec<EntitySpan>) -> Result<Self> {
        if authentic.len() != tags.len() {
            return Err(Error::Dim(format!(
                "label lengths differ: {} authenticity vs {} tags",
                authentic.len(),
                tags.len()
            )));
        }
        if let Some(v) = authentic.iter().find(|v| **v > 1) {
            return Err(Error::Data(format!("authenticity labels must be 0 or 1, got {v}")));
        }
        Ok(FrameLabels { authentic, tags, entity_spans })
    }

    pub fn len(&self) -> usize {
        self.authentic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.authentic.is_empty()
    }
}
