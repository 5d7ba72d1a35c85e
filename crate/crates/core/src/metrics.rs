//! Frame-level equal error rate, the brute-force reference it is checked
//! against, and the forgery-level breakdown.
//!
//! Scores are spoof scores (higher means more likely spoofed); frames are
//! pooled across utterances before the threshold sweep. In score dumps the
//! `label` field follows the frame-label convention (1 = authentic).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{split_by_forgery_level, UtteranceRecord};
use crate::error::{Error, Result};

/// Pooled per-frame spoof scores with ground truth.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    entries: Vec<(f64, bool)>,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, spoof_score: f64, is_spoof: bool) {
        self.entries.push((spoof_score, is_spoof));
    }

    pub fn from_entries(entries: Vec<(f64, bool)>) -> Self {
        ScoreSet { entries }
    }

    pub fn extend(&mut self, other: &ScoreSet) {
        self.entries.extend_from_slice(&other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(f64, bool)] {
        &self.entries
    }

    fn class_counts(&self) -> (usize, usize) {
        let spoof = self.entries.iter().filter(|(_, s)| *s).count();
        (spoof, self.entries.len() - spoof)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (spoof, bona) = self.class_counts();
        if spoof == 0 || bona == 0 {
            return Err(Error::Metric(format!(
                "EER needs both classes, got {spoof} spoof and {bona} bona fide frames"
            )));
        }
        Ok((spoof, bona))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    /// Equal error rate in [0, 1].
    pub eer: f64,
    /// Interpolated decision threshold at the crossing (score >= threshold
    /// is called spoof).
    pub threshold: f64,
}

/// Find the FPR/FNR crossing over a list of operating points
/// `(threshold, fpr, fnr)`, linearly interpolating between adjacent points
/// when they do not meet exactly.
fn crossing(points: &[(f64, f64, f64)]) -> EerResult {
    for i in 0..points.len() {
        let (t_i, fpr_i, fnr_i) = points[i];
        let diff_i = fpr_i - fnr_i;
        if diff_i == 0.0 {
            return EerResult { eer: fpr_i, threshold: t_i };
        }
        if diff_i < 0.0 {
            // first point below the diagonal; interpolate from the previous one
            let (t_p, fpr_p, fnr_p) = points[i - 1];
            let diff_p = fpr_p - fnr_p;
            let u = diff_p / (diff_p - diff_i);
            return EerResult {
                eer: fpr_p + u * (fpr_i - fpr_p),
                threshold: t_p + u * (t_i - t_p),
            };
        }
    }
    // diff stays positive until the very end; the virtual endpoint (0, 1)
    // guarantees this is unreachable for well-formed inputs
    let last = points[points.len() - 1];
    EerResult { eer: last.1, threshold: last.0 }
}

/// Equal error rate by threshold sweep over the pooled scores.
///
/// `FPR(t) = P(score >= t | bona fide)`, `FNR(t) = P(score < t | spoof)`.
pub fn compute_eer(scores: &ScoreSet) -> Result<EerResult> {
    let (n_spoof, n_bona) = scores.require_both_classes()?;
    let mut sorted: Vec<(f64, bool)> = scores.entries.clone();
    if let Some((v, _)) = sorted.iter().find(|(v, _)| !v.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {v}")));
    }
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // operating points at each distinct score, plus the all-negative endpoint
    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    let mut spoof_below = 0usize;
    let mut bona_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        let fpr = (n_bona - bona_below) as f64 / n_bona as f64;
        let fnr = spoof_below as f64 / n_spoof as f64;
        points.push((v, fpr, fnr));
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                spoof_below += 1;
            } else {
                bona_below += 1;
            }
            i += 1;
        }
    }
    let v_max = sorted[sorted.len() - 1].0;
    points.push((v_max, 0.0, 1.0));
    Ok(crossing(&points))
}

/// Brute-force reference: evaluate FPR/FNR by full recount at every distinct
/// score shifted by `±eps` and interpolate the crossing. Kept independent of
/// [`compute_eer`]'s sorting/prefix-count path.
pub fn compute_eer_reference(scores: &ScoreSet) -> Result<EerResult> {
    let (n_spoof, n_bona) = scores.require_both_classes()?;
    let mut values: Vec<f64> = scores.entries.iter().map(|(v, _)| *v).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    values.dedup();
    let mut gap = f64::INFINITY;
    for w in values.windows(2) {
        gap = gap.min(w[1] - w[0]);
    }
    let eps = if gap.is_finite() { gap / 4.0 } else { 0.5 };

    let mut candidates = Vec::with_capacity(values.len() * 2);
    for v in &values {
        candidates.push(v - eps);
        candidates.push(v + eps);
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite"));

    let mut points = Vec::with_capacity(candidates.len());
    for tau in candidates {
        let mut false_pos = 0usize;
        let mut false_neg = 0usize;
        for (score, is_spoof) in &scores.entries {
            if *is_spoof && *score < tau {
                false_neg += 1;
            }
            if !*is_spoof && *score >= tau {
                false_pos += 1;
            }
        }
        points.push((tau, false_pos as f64 / n_bona as f64, false_neg as f64 / n_spoof as f64));
    }
    Ok(crossing(&points))
}

/// Per-frame spoof scores and ground-truth labels of one evaluated utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceScores {
    pub utt_id: String,
    /// Spoof score per frame.
    pub spoof_scores: Vec<f64>,
    /// 1 = authentic, 0 = spoofed (the frame-label convention).
    pub labels: Vec<u8>,
}

impl UtteranceScores {
    pub fn score_set(&self) -> ScoreSet {
        let entries = self
            .spoof_scores
            .iter()
            .zip(&self.labels)
            .map(|(s, l)| (*s, *l == 0))
            .collect();
        ScoreSet::from_entries(entries)
    }
}

/// Pool all frames of all utterances into one score set.
pub fn pool_scores(utts: &[UtteranceScores]) -> ScoreSet {
    let mut set = ScoreSet::new();
    for u in utts {
        set.extend(&u.score_set());
    }
    set
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ForgeryLevelTable {
    /// Level -> pooled EER over that level's fake utterances plus all bona
    /// fide utterances.
    pub rows: BTreeMap<usize, f64>,
    /// Levels that were present but could not be scored, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// EER per forgery level. Frames of level-k fake utterances are pooled with
/// the frames of every bona fide utterance.
pub fn eer_by_forgery_level(
    utts: &[UtteranceScores],
    records: &[UtteranceRecord],
) -> Result<ForgeryLevelTable> {
    let by_id: BTreeMap<&str, &UtteranceScores> =
        utts.iter().map(|u| (u.utt_id.as_str(), u)).collect();
    let levels = split_by_forgery_level(records.iter());
    let mut bona_pool = ScoreSet::new();
    for r in records.iter().filter(|r| !r.is_fake()) {
        if let Some(u) = by_id.get(r.id.as_str()) {
            bona_pool.extend(&u.score_set());
        }
    }
    let mut table = ForgeryLevelTable::default();
    for (level, rs) in levels {
        let mut pool = bona_pool.clone();
        for r in rs {
            if let Some(u) = by_id.get(r.id.as_str()) {
                pool.extend(&u.score_set());
            }
        }
        match compute_eer(&pool) {
            Ok(res) => {
                table.rows.insert(level, res.eer);
            }
            Err(e) => table.skipped.push((level, e.to_string())),
        }
    }
    Ok(table)
}

/// One line of the external score dump: `{utt_id, frame, spoof_score, label}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreDumpLine {
    pub utt_id: String,
    pub frame: usize,
    pub spoof_score: f64,
    pub label: u8,
}

pub fn dump_scores(utts: &[UtteranceScores]) -> Result<String> {
    let mut out = String::new();
    for u in utts {
        for (frame, (score, label)) in u.spoof_scores.iter().zip(&u.labels).enumerate() {
            let line = ScoreDumpLine {
                utt_id: u.utt_id.clone(),
                frame,
                spoof_score: *score,
                label: *label,
            };
            out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Data(e.to_string()))?);
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn set(spoof: &[f64], bona: &[f64]) -> ScoreSet {
        let mut s = ScoreSet::new();
        for v in spoof {
            s.push(*v, true);
        }
        for v in bona {
            s.push(*v, false);
        }
        s
    }

    #[test]
    fn perfectly_separated_scores_have_zero_eer() {
        let s = set(&[0.8, 0.6], &[0.4, 0.2]);
        let r = compute_eer(&s).unwrap();
        assert_eq!(r.eer, 0.0);
    }

    #[test]
    fn crossing_example_gives_half() {
        let s = set(&[0.8, 0.3], &[0.7, 0.2]);
        let r = compute_eer(&s).unwrap();
        assert!((r.eer - 0.5).abs() < 1e-15, "{}", r.eer);
        let oracle = compute_eer_reference(&s).unwrap();
        assert!((oracle.eer - 0.5).abs() < 1e-15);
    }

    #[test]
    fn implementation_matches_reference_on_random_sets() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for case in 0..100 {
            let n = rng.random_range(2..=100usize);
            let mut s = ScoreSet::new();
            // ensure both classes
            s.push(rng.random_range(0.0..1.0), true);
            s.push(rng.random_range(0.0..1.0), false);
            for _ in 0..n {
                // quantized scores provoke ties
                let v = (rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0;
                s.push(v, rng.random_range(0.0..1.0) < 0.5);
            }
            let a = compute_eer(&s).unwrap();
            let b = compute_eer_reference(&s).unwrap();
            assert!((a.eer - b.eer).abs() < 1e-9, "case {case}: {} vs {}", a.eer, b.eer);
            assert!(a.eer >= 0.0 && a.eer <= 1.0);
        }
    }

    #[test]
    fn single_class_input_is_undefined() {
        let s = set(&[0.9, 0.8], &[]);
        assert!(matches!(compute_eer(&s).unwrap_err(), Error::Metric(_)));
    }

    #[test]
    fn monotone_transform_leaves_eer_unchanged_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut s = ScoreSet::new();
            s.push(0.31, true);
            s.push(0.27, false);
            for _ in 0..40 {
                let v = (rng.random_range(0.0..1.0f64) * 1000.0).round() / 1000.0;
                s.push(v, rng.random_range(0.0..1.0) < 0.4);
            }
            let base = compute_eer(&s).unwrap().eer;
            let a: f64 = rng.random_range(0.5..2.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let mapped = ScoreSet::from_entries(
                s.entries().iter().map(|(v, l)| (a * v + b, *l)).collect(),
            );
            assert_eq!(compute_eer(&mapped).unwrap().eer, base);
            let cubed = ScoreSet::from_entries(
                s.entries().iter().map(|(v, l)| (v * v * v + v, *l)).collect(),
            );
            assert_eq!(compute_eer(&cubed).unwrap().eer, base);
        }
    }

    #[test]
    fn label_flip_symmetry() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut s = ScoreSet::new();
            s.push(0.9, true);
            s.push(0.1, false);
            for _ in 0..30 {
                s.push(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0) < 0.5);
            }
            let base = compute_eer(&s).unwrap().eer;
            let flipped = ScoreSet::from_entries(
                s.entries().iter().map(|(v, l)| (1.0 - v, !*l)).collect(),
            );
            let f = compute_eer(&flipped).unwrap().eer;
            assert!((base - f).abs() < 1e-12, "{base} vs {f}");
        }
    }

    #[test]
    fn random_balanced_scores_concentrate_near_half() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut s = ScoreSet::new();
        for i in 0..1000 {
            s.push(rng.random_range(0.0..1.0), i % 2 == 0);
        }
        let r = compute_eer(&s).unwrap();
        assert!((r.eer - 0.5).abs() <= 0.07, "{}", r.eer);
    }

    #[test]
    fn forgery_level_table_pools_bona_fide_into_every_level() {
        use crate::datagen::Split;
        // two fake utterances at levels 1 and 2, one bona fide
        let mk = |id: &str, labels: Vec<u8>, segments: Vec<(usize, usize)>| UtteranceRecord {
            id: id.into(),
            path: format!("features/{id}.nepd"),
            t: labels.len(),
            frame_labels: labels,
            entities: vec![],
            segments,
            split: Split::Eval,
        };
        let records = vec![
            mk("a", vec![1, 0, 0, 1], vec![(1, 3)]),
            mk("b", vec![0, 1, 0, 1], vec![(0, 1), (2, 3)]),
            mk("c", vec![1, 1, 1, 1], vec![]),
        ];
        // level-1 utterance scored perfectly, level-2 utterance scored at chance
        let utts = vec![
            UtteranceScores { utt_id: "a".into(), spoof_scores: vec![0.1, 0.9, 0.9, 0.1], labels: records[0].frame_labels.clone() },
            UtteranceScores { utt_id: "b".into(), spoof_scores: vec![0.5, 0.5, 0.5, 0.5], labels: records[1].frame_labels.clone() },
            UtteranceScores { utt_id: "c".into(), spoof_scores: vec![0.2, 0.3, 0.1, 0.2], labels: records[2].frame_labels.clone() },
        ];
        let table = eer_by_forgery_level(&utts, &records).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[&1], 0.0);
        assert!(table.rows[&2] > 0.0);
        assert!(table.skipped.is_empty());
    }

    #[test]
    fn score_dump_lines_parse_back() {
        let utts = vec![UtteranceScores {
            utt_id: "u0".into(),
            spoof_scores: vec![0.25, 0.75],
            labels: vec![1, 0],
        }];
        let dump = dump_scores(&utts).unwrap();
        let lines: Vec<ScoreDumpLine> =
            dump.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].frame, 1);
        assert_eq!(lines[1].label, 0);
        assert!((lines[1].spoof_score - 0.75).abs() < 1e-15);
    }
}
