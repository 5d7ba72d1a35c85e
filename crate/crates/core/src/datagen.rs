//! Synthetic partially-spoofed corpus with planted entity spans.
//!
//! Bona fide features are per-dimension AR(1) processes normalized to a fixed
//! marginal variance. Entity spans add type-dependent offsets on a small set
//! of reserved signature dimensions (which carry low-variance noise so the
//! teacher signal is clean). Spoofed segments overwrite frames with a fresh
//! AR(1) process using the spoof coefficient plus a mean shift on a random
//! content-dimension subspace, and are preferentially placed to intersect
//! entity spans.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{FrameFeatures, FrameLabels};
use crate::error::{Error, Result};
use crate::tags::{spans_to_tags, EntitySpan, EntityType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Config(format!("split must be train|dev|eval, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    /// Utterance length range in frames (inclusive).
    pub t_min: usize,
    pub t_max: usize,
    pub d_in: usize,
    /// Mean shift added to the spoofed subspace dimensions.
    pub spoof_shift: f64,
    pub ar_coeff_real: f64,
    pub ar_coeff_spoof: f64,
    /// Offset magnitude planted on the signature dimensions of entity frames.
    pub entity_signature: f64,
    /// Number of reserved signature dimensions (highest dims).
    pub signature_dims: usize,
    /// Marginal noise level of the signature dimensions.
    pub signature_noise: f64,
    /// Target mean entities per utterance.
    pub entities_per_utt_mean: f64,
    /// Probability that a spoof segment is placed to intersect an entity span.
    pub p_overlap: f64,
    /// Spoof segment count range for fake utterances (inclusive).
    pub seg_min: usize,
    pub seg_max: usize,
    /// Spoof segment length range in frames (inclusive).
    pub seg_len_min: usize,
    pub seg_len_max: usize,
    /// Entity span length range in frames (inclusive).
    pub entity_len_min: usize,
    pub entity_len_max: usize,
    /// Fraction of utterances that carry spoofed segments (0.9 mirrors the
    /// 8789/9755 train-split ratio of the reference corpus statistics).
    pub fake_utt_fraction: f64,
    /// Content dimensions receiving the mean shift, per segment.
    pub spoof_subspace: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            n_train: 400,
            n_dev: 60,
            n_eval: 60,
            t_min: 80,
            t_max: 200,
            d_in: 16,
            spoof_shift: 0.6,
            ar_coeff_real: 0.9,
            ar_coeff_spoof: 0.6,
            entity_signature: 0.8,
            signature_dims: 4,
            signature_noise: 1.0,
            entities_per_utt_mean: 1.3,
            p_overlap: 0.8,
            seg_min: 1,
            seg_max: 10,
            seg_len_min: 5,
            seg_len_max: 12,
            entity_len_min: 15,
            entity_len_max: 40,
            fake_utt_fraction: 0.9,
            spoof_subspace: 6,
        }
    }
}

impl CorpusConfig {
    /// Frames needed to fit `k` segments for any length draw, with slack.
    fn min_frames_for(&self, k: usize) -> usize {
        k * (self.seg_len_max + 1) + 10
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_dev == 0 || self.n_eval == 0 {
            return Err(Error::Config("split sizes must be >= 1".into()));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(Error::Config(format!("invalid t range [{}, {}]", self.t_min, self.t_max)));
        }
        if self.signature_dims >= self.d_in {
            return Err(Error::Config(format!(
                "signature_dims {} must leave content dims (d_in {})",
                self.signature_dims, self.d_in
            )));
        }
        if self.spoof_subspace > self.d_in - self.signature_dims {
            return Err(Error::Config(format!(
                "spoof_subspace {} exceeds content dims {}",
                self.spoof_subspace,
                self.d_in - self.signature_dims
            )));
        }
        for (name, p) in [("p_overlap", self.p_overlap), ("fake_utt_fraction", self.fake_utt_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.spoof_shift > 0.0) {
            return Err(Error::Config(format!("spoof_shift must be > 0, got {}", self.spoof_shift)));
        }
        if self.seg_min == 0 || self.seg_min > self.seg_max {
            return Err(Error::Config(format!(
                "invalid segment count range [{}, {}]",
                self.seg_min, self.seg_max
            )));
        }
        if self.seg_len_min == 0 || self.seg_len_min > self.seg_len_max {
            return Err(Error::Config(format!(
                "invalid segment length range [{}, {}]",
                self.seg_len_min, self.seg_len_max
            )));
        }
        if self.entity_len_min == 0 || self.entity_len_min > self.entity_len_max {
            return Err(Error::Config(format!(
                "invalid entity length range [{}, {}]",
                self.entity_len_min, self.entity_len_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub path: String,
    pub t: usize,
    /// 1 = authentic, 0 = spoofed; `frame_labels[t] = 0` iff `t` lies in a segment.
    pub frame_labels: Vec<u8>,
    pub entities: Vec<EntitySpan>,
    /// Non-overlapping sorted half-open spoof segments.
    pub segments: Vec<(usize, usize)>,
    pub split: Split,
}

impl UtteranceRecord {
    pub fn is_fake(&self) -> bool {
        !self.segments.is_empty()
    }

    pub fn forgery_level(&self) -> usize {
        self.segments.len()
    }

    /// Check the record's internal invariants.
    pub fn validate(&self) -> Result<()> {
        if self.frame_labels.len() != self.t {
            return Err(Error::Data(format!("{}: {} labels for {} frames", self.id, self.frame_labels.len(), self.t)));
        }
        let mut last_end = 0;
        for (i, (s, e)) in self.segments.iter().enumerate() {
            if s >= e || *e > self.t {
                return Err(Error::Data(format!("{}: segment [{s}, {e}) out of range", self.id)));
            }
            if i > 0 && *s < last_end {
                return Err(Error::Data(format!("{}: segments overlap or are unsorted at {s}", self.id)));
            }
            last_end = *e;
        }
        for (t, label) in self.frame_labels.iter().enumerate() {
            let in_segment = self.segments.iter().any(|(s, e)| t >= *s && t < *e);
            let expect = if in_segment { 0 } else { 1 };
            if *label != expect {
                return Err(Error::Data(format!("{}: frame {t} label {label}, expected {expect}", self.id)));
            }
        }
        spans_to_tags(&self.entities, self.t)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedUtterance {
    pub record: UtteranceRecord,
    /// `t x d` row-major features.
    pub features: Vec<f64>,
}

impl GeneratedUtterance {
    pub fn frame_features(&self, d: usize) -> Result<FrameFeatures> {
        FrameFeatures::new(self.record.id.clone(), self.features.clone(), self.record.t, d)
    }

    pub fn frame_labels(&self) -> Result<FrameLabels> {
        let tags = spans_to_tags(&self.record.entities, self.record.t)?;
        FrameLabels::new(self.record.frame_labels.clone(), tags, self.record.entities.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub d_in: usize,
    pub utterances: Vec<GeneratedUtterance>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitStats {
    pub split: Split,
    pub bona_fide: usize,
    pub fake: usize,
    pub all: usize,
    pub named_entities: usize,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &GeneratedUtterance> {
        self.utterances.iter().filter(move |u| u.record.split == split)
    }

    /// Per-split counts in the reference statistics-table layout:
    /// bona fide / fake / all / named-entity count.
    pub fn stats(&self) -> Vec<SplitStats> {
        Split::ALL
            .iter()
            .map(|s| {
                let mut st = SplitStats { split: *s, bona_fide: 0, fake: 0, all: 0, named_entities: 0 };
                for u in self.split(*s) {
                    st.all += 1;
                    if u.record.is_fake() {
                        st.fake += 1;
                    } else {
                        st.bona_fide += 1;
                    }
                    st.named_entities += u.record.entities.len();
                }
                st
            })
            .collect()
    }

    pub fn spoofed_frame_fraction(&self) -> f64 {
        let mut spoofed = 0usize;
        let mut total = 0usize;
        for u in &self.utterances {
            total += u.record.t;
            spoofed += u.record.frame_labels.iter().filter(|l| **l == 0).count();
        }
        spoofed as f64 / total as f64
    }

    pub fn mean_entities_per_utterance(&self) -> f64 {
        let n: usize = self.utterances.iter().map(|u| u.record.entities.len()).sum();
        n as f64 / self.utterances.len() as f64
    }

    /// Sub-corpus for one forgery level: the fake utterances with exactly
    /// `level` spoof segments plus every bona fide utterance.
    pub fn forgery_level_subset(&self, level: usize) -> Corpus {
        let utterances = self
            .utterances
            .iter()
            .filter(|u| !u.record.is_fake() || u.record.forgery_level() == level)
            .cloned()
            .collect();
        Corpus { d_in: self.d_in, utterances }
    }
}

/// Group fake utterances by spoof segment count; bona fide records are never
/// included. The union of all groups is exactly the set of fake utterances.
pub fn split_by_forgery_level<'a, I>(records: I) -> BTreeMap<usize, Vec<&'a UtteranceRecord>>
where
    I: IntoIterator<Item = &'a UtteranceRecord>,
{
    let mut map: BTreeMap<usize, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in records {
        if r.is_fake() {
            map.entry(r.forgery_level()).or_default().push(r);
        }
    }
    map
}

/// Type-dependent sign patterns over the signature dimensions.
fn signature_pattern(ty: EntityType, dim: usize) -> f64 {
    let signs: [[f64; 4]; 3] = [
        [1.0, 1.0, -1.0, -1.0],  // ORG
        [1.0, -1.0, 1.0, -1.0],  // PER
        [-1.0, 1.0, 1.0, -1.0],  // LOC
    ];
    let row = match ty {
        EntityType::Org => 0,
        EntityType::Per => 1,
        EntityType::Loc => 2,
    };
    signs[row][dim % 4]
}

struct Generator<'c> {
    cfg: &'c CorpusConfig,
    rng: ChaCha12Rng,
    normal: Normal<f64>,
}

impl<'c> Generator<'c> {
    fn entity_count(&mut self) -> usize {
        // 1 + {0,1,2} extras with P(1)=m/2, P(2)=m/4 for m = mean - 1
        let m = (self.cfg.entities_per_utt_mean - 1.0).clamp(0.0, 2.0);
        let u: f64 = self.rng.random_range(0.0..1.0);
        if u < m / 4.0 {
            3
        } else if u < m / 4.0 + m / 2.0 {
            2
        } else {
            1
        }
    }

    /// Uniformly pick a start from the valid candidates, or None if blocked.
    fn place(
        &mut self,
        t: usize,
        len: usize,
        placed: &[(usize, usize)],
        must_intersect: Option<&[EntitySpan]>,
    ) -> Option<usize> {
        if len > t {
            return None;
        }
        let mut candidates = Vec::new();
        'starts: for s in 0..=(t - len) {
            let e = s + len;
            for (ps, pe) in placed {
                // keep at least one clean frame between segments
                if s < pe + 1 && *ps < e + 1 {
                    continue 'starts;
                }
            }
            if let Some(spans) = must_intersect {
                if !spans.iter().any(|sp| s < sp.end && sp.start < e) {
                    continue 'starts;
                }
            }
            candidates.push(s);
        }
        if candidates.is_empty() {
            None
        } else {
            Some(candidates[self.rng.random_range(0..candidates.len())])
        }
    }

    fn entities(&mut self, t: usize) -> Vec<EntitySpan> {
        let count = self.entity_count();
        let mut spans: Vec<EntitySpan> = Vec::new();
        let mut occupied: Vec<(usize, usize)> = Vec::new();
        for _ in 0..count {
            let max_len = self.cfg.entity_len_max.min(t.saturating_sub(2)).max(self.cfg.entity_len_min);
            let len = self.rng.random_range(self.cfg.entity_len_min..=max_len);
            let ty = EntityType::ALL[self.rng.random_range(0..3)];
            if let Some(start) = self.place(t, len, &occupied, None) {
                occupied.push((start, start + len));
                spans.push(EntitySpan { start, end: start + len, etype: ty });
            }
        }
        spans.sort_by_key(|s| s.start);
        spans
    }

    fn segments(&mut self, t: usize, k: usize, entities: &[EntitySpan]) -> Vec<(usize, usize)> {
        let forced: Vec<bool> = (0..k).map(|_| self.rng.random_range(0.0..1.0) < self.cfg.p_overlap).collect();
        let lens: Vec<usize> =
            (0..k).map(|_| self.rng.random_range(self.cfg.seg_len_min..=self.cfg.seg_len_max)).collect();
        let mut placed: Vec<(usize, usize)> = Vec::new();
        // entity-seeking segments claim their room first
        for pass in [true, false] {
            for slot in 0..k {
                if forced[slot] != pass {
                    continue;
                }
                let constraint = if forced[slot] { Some(entities) } else { None };
                if let Some(s) = self.place(t, lens[slot], &placed, constraint) {
                    placed.push((s, s + lens[slot]));
                }
                // a blocked slot is dropped; the realized forgery level is the
                // number of segments actually placed
            }
        }
        placed.sort_unstable();
        placed
    }

    /// AR(1) sequence with unit-normalized marginal variance scaled by `sigma`.
    fn ar_series(&mut self, len: usize, rho: f64, sigma: f64, out: &mut [f64]) {
        let innov = sigma * (1.0 - rho * rho).max(1e-12).sqrt();
        let mut prev = sigma * self.normal.sample(&mut self.rng);
        out[0] = prev;
        for v in out.iter_mut().take(len).skip(1) {
            prev = rho * prev + innov * self.normal.sample(&mut self.rng);
            *v = prev;
        }
    }

    fn utterance(&mut self, id: String, path: String, split: Split, fake: bool) -> Result<GeneratedUtterance> {
        let cfg = self.cfg;
        let d = cfg.d_in;
        let content_dims = d - cfg.signature_dims;

        let (t, k) = if fake {
            let k = self.rng.random_range(cfg.seg_min..=cfg.seg_max);
            let t_floor = cfg.t_min.max(cfg.min_frames_for(k));
            if t_floor > cfg.t_max {
                return Err(Error::Data(format!(
                    "utterance needs >= {t_floor} frames for {k} spoof segments, t_max is {}",
                    cfg.t_max
                )));
            }
            (self.rng.random_range(t_floor..=cfg.t_max), k)
        } else {
            (self.rng.random_range(cfg.t_min..=cfg.t_max), 0)
        };

        let entities = self.entities(t);
        let segments = if fake { self.segments(t, k, &entities) } else { Vec::new() };
        debug_assert!(!fake || !segments.is_empty());

        // base process, one AR series per dimension
        let mut features = vec![0.0; t * d];
        let mut series = vec![0.0; t];
        for dim in 0..d {
            let sigma = if dim < content_dims { 1.0 } else { cfg.signature_noise };
            self.ar_series(t, cfg.ar_coeff_real, sigma, &mut series);
            for (frame, v) in series.iter().take(t).enumerate() {
                features[frame * d + dim] = *v;
            }
        }

        // spliced segments: fresh spoof-coefficient process plus subspace shift
        for (s, e) in &segments {
            let len = e - s;
            let subspace = sample(&mut self.rng, content_dims, cfg.spoof_subspace).into_vec();
            for dim in 0..d {
                let sigma = if dim < content_dims { 1.0 } else { cfg.signature_noise };
                self.ar_series(len, cfg.ar_coeff_spoof, sigma, &mut series[..len]);
                let shift = if subspace.contains(&dim) { cfg.spoof_shift } else { 0.0 };
                for (off, v) in series[..len].iter().enumerate() {
                    features[(s + off) * d + dim] = v + shift;
                }
            }
        }

        // entity signatures persist through spoofed frames; the sign alternates
        // per frame so the signature has no per-frame mean and must be
        // demodulated over time to be read
        for span in &entities {
            for frame in span.start..span.end {
                let parity = if frame % 2 == 0 { 1.0 } else { -1.0 };
                for sig in 0..cfg.signature_dims {
                    let dim = content_dims + sig;
                    features[frame * d + dim] +=
                        parity * cfg.entity_signature * signature_pattern(span.etype, sig);
                }
            }
        }

        // features are stored as f32 on disk; quantize now so the in-memory
        // corpus is bit-identical to a written-and-reloaded one
        for v in features.iter_mut() {
            *v = *v as f32 as f64;
        }

        let frame_labels: Vec<u8> = (0..t)
            .map(|fr| if segments.iter().any(|(s, e)| fr >= *s && fr < *e) { 0 } else { 1 })
            .collect();

        let record = UtteranceRecord { id, path, t, frame_labels, entities, segments, split };
        record.validate()?;
        Ok(GeneratedUtterance { record, features })
    }
}

/// Generate the full corpus deterministically from `cfg.seed`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    // fail early when the segment budget cannot fit any valid utterance
    if cfg.t_max < cfg.min_frames_for(cfg.seg_min) {
        return Err(Error::Data(format!(
            "t_max {} is too small for {} spoof segments (needs >= {})",
            cfg.t_max,
            cfg.seg_min,
            cfg.min_frames_for(cfg.seg_min)
        )));
    }
    if cfg.t_max < cfg.min_frames_for(cfg.seg_max) {
        return Err(Error::Data(format!(
            "t_max {} is too small for up to {} spoof segments (needs >= {})",
            cfg.t_max,
            cfg.seg_max,
            cfg.min_frames_for(cfg.seg_max)
        )));
    }
    let mut gen = Generator {
        cfg,
        rng: ChaCha12Rng::seed_from_u64(cfg.seed),
        normal: Normal::new(0.0, 1.0).expect("unit normal"),
    };
    let mut utterances = Vec::with_capacity(cfg.n_train + cfg.n_dev + cfg.n_eval);
    for (split, n) in [(Split::Train, cfg.n_train), (Split::Dev, cfg.n_dev), (Split::Eval, cfg.n_eval)] {
        // exact fake count per split so the ratio invariant holds for any seed
        let n_fake = (n as f64 * cfg.fake_utt_fraction).round() as usize;
        for i in 0..n {
            let id = format!("{split}-{i:04}");
            let path = format!("features/{id}.nepd");
            let fake = i < n_fake;
            utterances.push(gen.utterance(id, path, split, fake)?);
        }
    }
    Ok(Corpus { d_in: cfg.d_in, utterances })
}
