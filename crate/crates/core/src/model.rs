//! Full detection model: student branch, frozen-able teacher branch, fusion
//! gate, backend classifier, and the per-utterance loss composition for the
//! three aggregation modes.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{attention_transfer_loss, total_loss, FusionGate, GateMode, TransferConfig};
use crate::classifier::{bce_frame_loss, Classifier, ClassifierConfig};
use crate::data::{FrameFeatures, FrameLabels};
use crate::error::{Error, Result};
use crate::ner::{NerBranch, NerBranchConfig, NerForward};
use crate::numerics::TensorId;
use crate::padd::{PaddBranch, PaddBranchConfig, PaddForward};
use crate::params::{ParamStore, Session};

pub const TEACHER_PREFIX: &str = "ner.";

/// How the teacher's attention signal reaches the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Student only (ablation baseline).
    None,
    /// Attention Fusion: classifier consumes the gated embedding mix.
    Af,
    /// Attention Transfer: KL auxiliary loss on the attention maps.
    At,
}

impl AggregationMode {
    pub fn needs_teacher(self) -> bool {
        !matches!(self, AggregationMode::None)
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AggregationMode::None => "none",
            AggregationMode::Af => "af",
            AggregationMode::At => "at",
        };
        f.write_str(s)
    }
}

impl FromStr for AggregationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AggregationMode::None),
            "af" => Ok(AggregationMode::Af),
            "at" => Ok(AggregationMode::At),
            other => Err(Error::Config(format!(
                "aggregation mode must be one of none|af|at, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub padd: PaddBranchConfig,
    pub ner: NerBranchConfig,
    pub classifier: ClassifierConfig,
    pub gate_mode: GateMode,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            padd: PaddBranchConfig::desk(),
            ner: NerBranchConfig::desk(),
            classifier: ClassifierConfig::desk(),
            gate_mode: GateMode::PerFrameScalar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.padd.validate()?;
        self.ner.validate()?;
        if self.padd.d_in != self.ner.d_in {
            return Err(Error::Config(format!(
                "branches disagree on input dim: padd {} vs ner {}",
                self.padd.d_in, self.ner.d_in
            )));
        }
        if self.padd.attn_dim != self.ner.attn_dim {
            return Err(Error::Config(format!(
                "attention dims must match for fusion: padd {} vs ner {}",
                self.padd.attn_dim, self.ner.attn_dim
            )));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Per-utterance forward result with the scalar losses read out.
#[derive(Debug)]
pub struct UtterancePass {
    pub loss: TensorId,
    pub probs: TensorId,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kl: Option<f64>,
}

#[derive(Debug)]
pub struct NePaddModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub padd: PaddBranch,
    pub ner: NerBranch,
    pub gate: FusionGate,
    pub classifier: Classifier,
}

impl NePaddModel {
    /// Deterministic construction: identical (config, seed) gives bit-identical
    /// initial parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let padd = PaddBranch::new("padd", cfg.padd, &mut store, &mut rng)?;
        let ner = NerBranch::new("ner", cfg.ner, &mut store, &mut rng)?;
        let gate = FusionGate::new("agg.gate", cfg.padd.attn_dim, cfg.gate_mode, &mut store, &mut rng)?;
        let classifier = Classifier::new("clf", cfg.padd.attn_dim, cfg.classifier, &mut store, &mut rng)?;
        Ok(NePaddModel { cfg, store, padd, ner, gate, classifier })
    }

    /// Freeze every teacher parameter; returns how many were frozen.
    pub fn freeze_teacher(&mut self) -> usize {
        self.store.freeze_prefix(TEACHER_PREFIX)
    }

    /// Copy pretrained teacher parameters from another store.
    pub fn load_teacher(&mut self, src: &ParamStore) -> Result<usize> {
        self.store.import_prefix(src, TEACHER_PREFIX)
    }

    pub fn student_forward(&self, sess: &mut Session, x: &FrameFeatures) -> Result<PaddForward> {
        self.padd.forward(sess, &self.store, x)
    }

    pub fn teacher_forward(&self, sess: &mut Session, x: &FrameFeatures) -> Result<NerForward> {
        self.ner.forward(sess, &self.store, x)
    }

    /// Forward pass producing per-frame authenticity probabilities for the
    /// given aggregation mode (evaluation path, no loss).
    pub fn forward_probs(&self, sess: &mut Session, x: &FrameFeatures, mode: AggregationMode) -> Result<TensorId> {
        let embedding = match mode {
            AggregationMode::None | AggregationMode::At => {
                self.student_forward(sess, x)?.attended
            }
            AggregationMode::Af => {
                let student = self.student_forward(sess, x)?;
                let teacher = self.teacher_forward(sess, x)?;
                let (fused, _) = self.gate.fuse(sess, &self.store, student.attended, teacher.attended)?;
                fused
            }
        };
        self.classifier.classify_frames(sess, &self.store, embedding)
    }

    /// Full training pass for one utterance: forward, loss composition, and
    /// scalar loss readout. The caller decides when to run backward.
    pub fn utterance_pass(
        &self,
        sess: &mut Session,
        x: &FrameFeatures,
        labels: &FrameLabels,
        mode: AggregationMode,
        transfer: &TransferConfig,
        pos_weight: Option<f64>,
    ) -> Result<UtterancePass> {
        match mode {
            AggregationMode::None => {
                let student = self.student_forward(sess, x)?;
                let probs = self.classifier.classify_frames(sess, &self.store, student.attended)?;
                let ce = bce_frame_loss(sess, probs, labels, pos_weight)?;
                let loss_ce = sess.tape.value(ce)[0];
                Ok(UtterancePass { loss: ce, probs, loss_total: loss_ce, loss_ce, loss_kl: None })
            }
            AggregationMode::Af => {
                let student = self.student_forward(sess, x)?;
                let teacher = self.teacher_forward(sess, x)?;
                let (fused, _) = self.gate.fuse(sess, &self.store, student.attended, teacher.attended)?;
                let probs = self.classifier.classify_frames(sess, &self.store, fused)?;
                let ce = bce_frame_loss(sess, probs, labels, pos_weight)?;
                let loss_ce = sess.tape.value(ce)[0];
                Ok(UtterancePass { loss: ce, probs, loss_total: loss_ce, loss_ce, loss_kl: None })
            }
            AggregationMode::At => {
                let student = self.student_forward(sess, x)?;
                let teacher = self.teacher_forward(sess, x)?;
                let probs = self.classifier.classify_frames(sess, &self.store, student.attended)?;
                let ce = bce_frame_loss(sess, probs, labels, pos_weight)?;
                let kl = attention_transfer_loss(sess, teacher.attn, student.attn, transfer)?;
                let loss = total_loss(sess, ce, kl, transfer.lambda_kl)?;
                Ok(UtterancePass {
                    loss,
                    probs,
                    loss_total: sess.tape.value(loss)[0],
                    loss_ce: sess.tape.value(ce)[0],
                    loss_kl: Some(sess.tape.value(kl)[0]),
                })
            }
        }
    }
}
