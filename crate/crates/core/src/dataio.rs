//! On-disk corpus formats.
//!
//! Feature files: magic `NEPD`, version u16 = 1, u32 frame count, u32 feature
//! dim, then `T*D` IEEE-754 little-endian f32 values, frame-major.
//!
//! Manifest: one JSON object per line with fields
//! `{id, path, T, labels, entities, segments, split}` where `labels` is a
//! run-length encoding as `[value, count]` pairs.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, GeneratedUtterance, Split, UtteranceRecord};
use crate::error::{Error, Result};
use crate::tags::{EntitySpan, EntityType};

pub const FEATURE_MAGIC: [u8; 4] = *b"NEPD";
pub const FEATURE_VERSION: u16 = 1;

pub fn encode_features(t: usize, d: usize, data: &[f64]) -> Result<Vec<u8>> {
    if data.len() != t * d {
        return Err(Error::Dim(format!("feature length {} does not match [{t} x {d}]", data.len())));
    }
    let mut out = Vec::with_capacity(4 + 2 + 8 + 4 * data.len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 14 {
        return Err(Error::Data(format!("feature file truncated at {} bytes", bytes.len())));
    }
    if bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::Data("bad feature file magic, expected NEPD".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(Error::Data(format!("unsupported feature file version {version}")));
    }
    let t = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let d = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]) as usize;
    let expect = 14 + 4 * t * d;
    if bytes.len() != expect {
        return Err(Error::Data(format!(
            "feature file length {} does not match header [{t} x {d}] (expected {expect})",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(t * d);
    for chunk in bytes[14..].chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    Ok((t, d, data))
}

pub fn write_features(path: &Path, t: usize, d: usize, data: &[f64]) -> Result<()> {
    fs::write(path, encode_features(t, d, data)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_features(&fs::read(path)?)
}

pub fn rle_encode(labels: &[u8]) -> Vec<(u8, usize)> {
    let mut runs = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some((v, n)) if *v == l => *n += 1,
            _ => runs.push((l, 1)),
        }
    }
    runs
}

pub fn rle_decode(runs: &[(u8, usize)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (v, n) in runs {
        out.extend(std::iter::repeat(*v).take(*n));
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    path: String,
    #[serde(rename = "T")]
    t: usize,
    labels: Vec<(u8, usize)>,
    entities: Vec<(usize, usize, EntityType)>,
    segments: Vec<(usize, usize)>,
    split: Split,
}

pub fn manifest_line(record: &UtteranceRecord) -> Result<String> {
    let line = ManifestLine {
        id: record.id.clone(),
        path: record.path.clone(),
        t: record.t,
        labels: rle_encode(&record.frame_labels),
        entities: record.entities.iter().map(|e| (e.start, e.end, e.etype)).collect(),
        segments: record.segments.clone(),
        split: record.split,
    };
    serde_json::to_string(&line).map_err(|e| Error::Data(format!("manifest encode: {e}")))
}

pub fn parse_manifest_line(s: &str) -> Result<UtteranceRecord> {
    let line: ManifestLine =
        serde_json::from_str(s).map_err(|e| Error::Data(format!("manifest parse: {e}")))?;
    let frame_labels = rle_decode(&line.labels);
    if frame_labels.len() != line.t {
        return Err(Error::Data(format!(
            "{}: label runs expand to {} frames, manifest says {}",
            line.id,
            frame_labels.len(),
            line.t
        )));
    }
    let record = UtteranceRecord {
        id: line.id,
        path: line.path,
        t: line.t,
        frame_labels,
        entities: line
            .entities
            .into_iter()
            .map(|(start, end, etype)| EntitySpan { start, end, etype })
            .collect(),
        segments: line.segments,
        split: line.split,
    };
    record.validate()?;
    Ok(record)
}

/// Write `manifest.jsonl` plus one feature file per utterance under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("features"))?;
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    for u in &corpus.utterances {
        writeln!(manifest, "{}", manifest_line(&u.record)?)?;
        write_features(&dir.join(&u.record.path), u.record.t, corpus.d_in, &u.features)?;
    }
    Ok(())
}

/// Load a corpus previously written by [`write_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::open(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", manifest_path.display())))?;
    let mut utterances = Vec::new();
    let mut d_in: Option<usize> = None;
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_manifest_line(&line)
            .map_err(|e| Error::Data(format!("manifest line {}: {e}", ln + 1)))?;
        let (t, d, features) = read_features(&dir.join(&record.path))?;
        if t != record.t {
            return Err(Error::Data(format!(
                "{}: feature file has {t} frames, manifest says {}",
                record.id, record.t
            )));
        }
        match d_in {
            None => d_in = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Data(format!(
                    "{}: feature dim {d} differs from earlier {prev}",
                    record.id
                )))
            }
            _ => {}
        }
        utterances.push(GeneratedUtterance { record, features });
    }
    let d_in = d_in.ok_or_else(|| Error::Data("manifest is empty".into()))?;
    Ok(Corpus { d_in, utterances })
}
