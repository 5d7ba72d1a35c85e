//! End-to-end training: teacher pretraining and freezing, PADD training with
//! attention fusion or transfer, Adam with the warmup-normalized Noam
//! schedule, periodic dev evaluation, and best-checkpoint tracking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{RowReduction, TransferConfig};
use crate::classifier::spoof_scores;
use crate::data::{FrameFeatures, FrameLabels};
use crate::datagen::{Corpus, Split};
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, pool_scores, UtteranceScores};
use crate::model::{AggregationMode, ModelConfig, NePaddModel};
use crate::ner::{decode_tags, pretrain_ner_loss};
use crate::par::{map_collect, Parallelism};
use crate::params::{ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Weight of the transfer loss; required when `aggregation = at`.
    pub lambda_kl: Option<f64>,
    pub kl_epsilon_clamp: f64,
    pub kl_row_reduction: RowReduction,
    pub aggregation: AggregationMode,
    pub seed: u64,
    /// Evaluate dev EER every this many steps (always once at the end).
    pub eval_every: usize,
    /// Optional weight on the authentic-class BCE term.
    pub pos_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            base_lr: 1e-4,
            warmup_steps: 100,
            lambda_kl: None,
            kl_epsilon_clamp: 1e-10,
            kl_row_reduction: RowReduction::MeanOverQueryRows,
            aggregation: AggregationMode::None,
            seed: 0,
            eval_every: 25,
            pos_weight: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        if self.aggregation == AggregationMode::At && self.lambda_kl.is_none() {
            return Err(Error::Config("aggregation mode `at` requires lambda_kl".into()));
        }
        if let Some(l) = self.lambda_kl {
            if !(l >= 0.0) {
                return Err(Error::Config(format!("lambda_kl must be >= 0, got {l}")));
            }
        }
        Ok(())
    }

    pub fn transfer_config(&self) -> TransferConfig {
        TransferConfig {
            lambda_kl: self.lambda_kl.unwrap_or(0.0),
            epsilon_clamp: self.kl_epsilon_clamp,
            row_reduction: self.kl_row_reduction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    /// Plain Adam rate; teacher pretraining does not use the Noam schedule.
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig { epochs: 10, lr: 1e-3, batch_size: 8, seed: 0 }
    }
}

/// Warmup-normalized Noam schedule: linear warmup to exactly `base_lr` at
/// `warmup` steps, then inverse square-root decay.
pub fn noam_lr(step: u64, base_lr: f64, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("noam schedule steps start at 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(base_lr * w.sqrt() * f64::min(s.powf(-0.5), s * w.powf(-1.5)))
}

/// Adam with bias correction. Frozen parameters are skipped entirely: no
/// update and no moment decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let v = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    /// One update from the gradients accumulated in `store`.
    pub fn apply(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            if let Some(g) = p.grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {g} in `{}` at optimizer step {}",
                    p.name, self.step
                )));
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moments as named records for checkpointing.
    pub fn to_store(&self, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (idx, p) in params.iter().enumerate() {
            out.register(&format!("adam.m.{}", p.name), p.shape.clone(), self.m[idx].clone())
                .expect("fresh store");
            out.register(&format!("adam.v.{}", p.name), p.shape.clone(), self.v[idx].clone())
                .expect("fresh store");
        }
        out
    }

    /// Restore moments from checkpoint records; missing names are an error.
    pub fn from_store(params: &ParamStore, moments: &ParamStore, step: u64) -> Result<Self> {
        let mut adam = Adam::new(params);
        adam.step = step;
        for (idx, p) in params.iter().enumerate() {
            adam.m[idx] = moments.get(&format!("adam.m.{}", p.name))?.data.clone();
            adam.v[idx] = moments.get(&format!("adam.v.{}", p.name))?.data.clone();
        }
        Ok(adam)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainLogEntry {
    pub step: u64,
    pub lr: f64,
    pub loss_ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_kl: Option<f64>,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_eer: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model in its final state.
    pub model: NePaddModel,
    /// Optimizer in its final state (for checkpointing).
    pub adam: Adam,
    /// Parameters at the best dev EER seen.
    pub best_params: ParamStore,
    pub best_step: u64,
    pub best_dev_eer: f64,
    pub final_dev_eer: f64,
    pub log: Vec<TrainLogEntry>,
}

/// Materialized (features, labels) pairs for one split.
pub fn split_pairs(corpus: &Corpus, split: Split) -> Result<Vec<(FrameFeatures, FrameLabels)>> {
    corpus
        .split(split)
        .map(|u| Ok((u.frame_features(corpus.d_in)?, u.frame_labels()?)))
        .collect()
}

/// Forward the eval path for every utterance and pool frame scores.
pub fn evaluate(
    model: &NePaddModel,
    utts: &[(FrameFeatures, FrameLabels)],
    mode: AggregationMode,
    par: Parallelism,
) -> Result<(f64, Vec<UtteranceScores>)> {
    let results: Vec<Result<UtteranceScores>> = map_collect(par, utts, |(x, y)| {
        let mut sess = Session::new();
        let probs = model.forward_probs(&mut sess, x, mode)?;
        Ok(UtteranceScores {
            utt_id: x.utterance_id.clone(),
            spoof_scores: spoof_scores(sess.tape.value(probs)),
            labels: y.authentic.clone(),
        })
    });
    let scored: Vec<UtteranceScores> = results.into_iter().collect::<Result<_>>()?;
    let eer = compute_eer(&pool_scores(&scored))?.eer;
    Ok((eer, scored))
}

struct BatchResult {
    loss_ce: f64,
    loss_kl: Option<f64>,
    loss_total: f64,
    grads: Vec<(usize, Vec<f64>)>,
}

fn accumulate_mean_grads(store: &mut ParamStore, results: &[BatchResult]) {
    store.zero_grads();
    let scale = 1.0 / results.len() as f64;
    for r in results {
        for (idx, g) in &r.grads {
            let acc = store.grad_mut(*idx);
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += gi * scale;
            }
        }
    }
}

/// Train the PADD system in the given aggregation mode. `teacher` supplies the
/// pretrained teacher parameters and is mandatory for `af` and `at`; they are
/// frozen for the whole run.
pub fn train_padd(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    teacher: Option<&ParamStore>,
    par: Parallelism,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.aggregation.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!(
            "aggregation mode `{}` requires a pretrained teacher checkpoint",
            cfg.aggregation
        )));
    }
    let mut model = NePaddModel::new(*model_cfg, cfg.seed)?;
    if let Some(t) = teacher {
        model.load_teacher(t)?;
        let frozen = model.freeze_teacher();
        debug_assert!(frozen > 0);
    }
    let transfer = cfg.transfer_config();

    let train = split_pairs(corpus, Split::Train)?;
    let dev = split_pairs(corpus, Split::Dev)?;
    if train.is_empty() {
        return Err(Error::Data("corpus has no training utterances".into()));
    }

    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = Vec::new();
    let mut step: u64 = 0;
    let mut best_params = model.store.clone();
    let mut best_step = 0u64;
    let mut best_dev_eer = f64::INFINITY;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = noam_lr(step, cfg.base_lr, cfg.warmup_steps)?;

            let results: Vec<Result<BatchResult>> = map_collect(par, batch, |i| {
                let (x, y) = &train[*i];
                let mut sess = Session::new();
                let pass = model.utterance_pass(&mut sess, x, y, cfg.aggregation, &transfer, cfg.pos_weight)?;
                sess.tape.backward(pass.loss)?;
                Ok(BatchResult {
                    loss_ce: pass.loss_ce,
                    loss_kl: pass.loss_kl,
                    loss_total: pass.loss_total,
                    grads: sess.take_grads(),
                })
            });
            let results: Vec<BatchResult> = results.into_iter().collect::<Result<_>>()?;
            accumulate_mean_grads(&mut model.store, &results);
            adam.apply(&mut model.store, lr)?;

            let n = results.len() as f64;
            let loss_ce = results.iter().map(|r| r.loss_ce).sum::<f64>() / n;
            let loss_total = results.iter().map(|r| r.loss_total).sum::<f64>() / n;
            let loss_kl = if cfg.aggregation == AggregationMode::At {
                Some(results.iter().filter_map(|r| r.loss_kl).sum::<f64>() / n)
            } else {
                None
            };

            let mut entry =
                TrainLogEntry { step, lr, loss_ce, loss_kl, loss_total, dev_eer: None };
            if cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0 && !dev.is_empty() {
                let (eer, _) = evaluate(&model, &dev, cfg.aggregation, par)?;
                entry.dev_eer = Some(eer);
                if eer < best_dev_eer {
                    best_dev_eer = eer;
                    best_step = step;
                    best_params = model.store.clone();
                }
            }
            log.push(entry);
        }
    }

    // final dev evaluation, logged and considered for the best checkpoint
    let (final_dev_eer, _) = evaluate(&model, &dev, cfg.aggregation, par)?;
    if let Some(last) = log.last_mut() {
        if last.dev_eer.is_none() {
            last.dev_eer = Some(final_dev_eer);
        }
    }
    if final_dev_eer < best_dev_eer {
        best_dev_eer = final_dev_eer;
        best_step = step;
        best_params = model.store.clone();
    }

    Ok(TrainOutcome { model, adam, best_params, best_step, best_dev_eer, final_dev_eer, log })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: NePaddModel,
    pub adam: Adam,
    pub dev_tag_accuracy: f64,
    pub log: Vec<PretrainLogEntry>,
}

/// Fraction of dev frames whose argmax tag matches the gold tag.
pub fn teacher_tag_accuracy(
    model: &NePaddModel,
    utts: &[(FrameFeatures, FrameLabels)],
    par: Parallelism,
) -> Result<f64> {
    let counts: Vec<Result<(usize, usize)>> = map_collect(par, utts, |(x, y)| {
        let mut sess = Session::new();
        let out = model.teacher_forward(&mut sess, x)?;
        let decoded = decode_tags(sess.tape.value(out.tag_logits), x.t);
        let correct = decoded.iter().zip(&y.tags).filter(|(a, b)| a == b).count();
        Ok((correct, x.t))
    });
    let mut correct = 0usize;
    let mut total = 0usize;
    for c in counts {
        let (c, t) = c?;
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total as f64)
}

/// Train the teacher branch on the frame-tag objective with plain Adam.
pub fn pretrain_teacher(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TeacherTrainConfig,
    par: Parallelism,
) -> Result<PretrainOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("teacher epochs and batch_size must be >= 1".into()));
    }
    let train = split_pairs(corpus, Split::Train)?;
    let dev = split_pairs(corpus, Split::Dev)?;
    if train.iter().all(|(_, y)| y.entity_spans.is_empty()) {
        return Err(Error::Data("corpus has no entity annotations; cannot pretrain the teacher".into()));
    }

    let mut model = NePaddModel::new(*model_cfg, cfg.seed)?;
    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut log = Vec::new();

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<BatchResult>> = map_collect(par, batch, |i| {
                let (x, y) = &train[*i];
                let mut sess = Session::new();
                let out = model.teacher_forward(&mut sess, x)?;
                let loss = pretrain_ner_loss(&mut sess, out.tag_logits, &y.tags)?;
                let loss_val = sess.tape.value(loss)[0];
                sess.tape.backward(loss)?;
                Ok(BatchResult {
                    loss_ce: loss_val,
                    loss_kl: None,
                    loss_total: loss_val,
                    grads: sess.take_grads(),
                })
            });
            let results: Vec<BatchResult> = results.into_iter().collect::<Result<_>>()?;
            accumulate_mean_grads(&mut model.store, &results);
            adam.apply(&mut model.store, cfg.lr)?;
            epoch_loss += results.iter().map(|r| r.loss_total).sum::<f64>() / results.len() as f64;
            batches += 1;
        }
        log.push(PretrainLogEntry { epoch, mean_loss: epoch_loss / batches as f64 });
    }

    let dev_tag_accuracy = teacher_tag_accuracy(&model, &dev, par)?;
    Ok(PretrainOutcome { model, adam, dev_tag_accuracy, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::classifier::ClassifierConfig;
    use crate::datagen::{generate_corpus, CorpusConfig};
    use crate::ner::NerBranchConfig;
    use crate::padd::PaddBranchConfig;

    pub(crate) fn mini_model_cfg() -> ModelConfig {
        ModelConfig {
            padd: PaddBranchConfig { d_in: 16, conv_channels: 8, residual_blocks: 1, attn_dim: 8, attn_heads: 1 },
            ner: NerBranchConfig {
                d_in: 16,
                conv_channels: 8,
                bilstm_hidden: 4,
                bilstm_layers: 1,
                attn_dim: 8,
                attn_heads: 1,
            },
            classifier: ClassifierConfig {
                transformer_layers: 1,
                transformer_heads: 1,
                transformer_ff_dim: 16,
                bilstm_hidden: 4,
                fc_width: 8,
                positional_encoding: true,
            },
            gate_mode: crate::aggregation::GateMode::PerFrameScalar,
        }
    }

    pub(crate) fn mini_corpus(seed: u64) -> Corpus {
        generate_corpus(&CorpusConfig {
            seed,
            n_train: 8,
            n_dev: 4,
            n_eval: 4,
            t_min: 24,
            t_max: 40,
            seg_max: 2,
            seg_len_min: 4,
            seg_len_max: 7,
            entity_len_min: 8,
            entity_len_max: 14,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn noam_matches_closed_forms() {
        let base = 1e-4;
        let w = 100;
        assert!((noam_lr(w as u64, base, w).unwrap() - base).abs() < 1e-18);
        assert!((noam_lr(1, base, w).unwrap() - base / w as f64).abs() < 1e-18);
        let at_4w = noam_lr(4 * w as u64, base, w).unwrap();
        assert!((at_4w - base / 2.0).abs() < 1e-15, "{at_4w}");
        assert!(noam_lr(0, base, w).is_err());
        // increases during warmup, decreases after
        assert!(noam_lr(50, base, w).unwrap() < base);
        assert!(noam_lr(401, base, w).unwrap() < noam_lr(400, base, w).unwrap());
    }

    #[test]
    fn adam_first_step_is_minus_lr_and_zero_grads_keep_params() {
        // zero grads on fresh moments: parameters exactly unchanged
        let mut store = ParamStore::new();
        store.register("w", vec![1], vec![1.0]).unwrap();
        let mut adam = Adam::new(&store);
        adam.apply(&mut store, 0.01).unwrap();
        assert_eq!(store.get("w").unwrap().data, vec![1.0]);

        // g = 1 first step of a fresh optimizer: update is ~ -lr after bias correction
        let mut adam = Adam::new(&store);
        store.get_mut("w").unwrap().grad = vec![1.0];
        adam.apply(&mut store, 0.01).unwrap();
        let w = store.get("w").unwrap().data[0];
        assert!((w - (1.0 - 0.01)).abs() < 1e-9, "bias-corrected step should be ~ -lr, got {w}");

        // a subsequent zero-grad step decays the moments
        let m_before = adam.m[0][0];
        store.zero_grads();
        adam.apply(&mut store, 0.01).unwrap();
        assert!((adam.m[0][0] - 0.9 * m_before).abs() < 1e-15);
    }

    #[test]
    fn adam_skips_frozen_even_with_injected_grads() {
        let mut store = ParamStore::new();
        store.register("ner.w", vec![2], vec![1.0, 2.0]).unwrap();
        store.freeze_prefix("ner.");
        let mut adam = Adam::new(&store);
        store.get_mut("ner.w").unwrap().grad = vec![5.0, -5.0];
        adam.apply(&mut store, 0.1).unwrap();
        assert_eq!(store.get("ner.w").unwrap().data, vec![1.0, 2.0]);
        assert_eq!(adam.m[0], vec![0.0, 0.0]);
    }

    #[test]
    fn adam_aborts_on_nan_grads_with_step_index() {
        let mut store = ParamStore::new();
        store.register("w", vec![1], vec![0.0]).unwrap();
        let mut adam = Adam::new(&store);
        store.get_mut("w").unwrap().grad = vec![f64::NAN];
        let err = adam.apply(&mut store, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("step 1"), "{err}");
    }

    #[test]
    fn training_is_reproducible() {
        let corpus = mini_corpus(3);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, eval_every: 2, ..TrainConfig::default() };
        let a = train_padd(&corpus, &mini_model_cfg(), &cfg, None, Parallelism::default()).unwrap();
        let b = train_padd(&corpus, &mini_model_cfg(), &cfg, None, Parallelism::default()).unwrap();
        assert_eq!(a.log, b.log);
        for (pa, pb) in a.model.store.iter().zip(b.model.store.iter()) {
            assert_eq!(pa.data, pb.data, "{}", pa.name);
        }
        // sequential path gives the same trajectory as the parallel one
        let c = train_padd(&corpus, &mini_model_cfg(), &cfg, None, Parallelism::Sequential).unwrap();
        assert_eq!(a.log, c.log);
    }

    #[test]
    fn at_mode_requires_teacher_and_lambda() {
        let corpus = mini_corpus(4);
        let cfg = TrainConfig {
            epochs: 1,
            aggregation: AggregationMode::At,
            lambda_kl: None,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_padd(&corpus, &mini_model_cfg(), &cfg, None, Parallelism::default()).unwrap_err(),
            Error::Config(_)
        ));
        let cfg = TrainConfig { lambda_kl: Some(0.3), ..cfg };
        assert!(matches!(
            train_padd(&corpus, &mini_model_cfg(), &cfg, None, Parallelism::default()).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn baseline_log_has_no_kl_entries_and_at_lambda_zero_matches_bce() {
        let corpus = mini_corpus(5);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, eval_every: 0, ..TrainConfig::default() };
        let out = train_padd(&corpus, &mini_model_cfg(), &cfg, None, Parallelism::default()).unwrap();
        assert!(out.log.iter().all(|e| e.loss_kl.is_none()));
        let line = serde_json::to_string(&out.log[0]).unwrap();
        assert!(!line.contains("loss_kl"), "{line}");

        let teacher = pretrain_teacher(
            &corpus,
            &mini_model_cfg(),
            &TeacherTrainConfig { epochs: 1, ..TeacherTrainConfig::default() },
            Parallelism::default(),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            eval_every: 0,
            aggregation: AggregationMode::At,
            lambda_kl: Some(0.0),
            ..TrainConfig::default()
        };
        let out = train_padd(&corpus, &mini_model_cfg(), &cfg, Some(&teacher.model.store), Parallelism::default())
            .unwrap();
        for e in &out.log {
            assert!(e.loss_kl.is_some());
            assert!((e.loss_total - e.loss_ce).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_freeze_hash_is_invariant_over_training() {
        let corpus = mini_corpus(6);
        let teacher = pretrain_teacher(
            &corpus,
            &mini_model_cfg(),
            &TeacherTrainConfig { epochs: 1, ..TeacherTrainConfig::default() },
            Parallelism::default(),
        )
        .unwrap();
        let teacher_hash = checkpoint::hash_params(&teacher.model.store, Some("ner."));

        for mode in [AggregationMode::Af, AggregationMode::At] {
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 4,
                eval_every: 0,
                aggregation: mode,
                lambda_kl: Some(0.3),
                ..TrainConfig::default()
            };
            let out =
                train_padd(&corpus, &mini_model_cfg(), &cfg, Some(&teacher.model.store), Parallelism::default())
                    .unwrap();
            let after = checkpoint::hash_params(&out.model.store, Some("ner."));
            assert_eq!(teacher_hash, after, "{mode}: teacher parameters changed");
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_outputs() {
        let corpus = mini_corpus(7);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, eval_every: 0, ..TrainConfig::default() };
        let out = train_padd(&corpus, &mini_model_cfg(), &cfg, None, Parallelism::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("final.ckpt");
        let moments = out.adam.to_store(&out.model.store);
        checkpoint::save(&path, &out.model.store, &moments, out.adam.step, [0u8; 32]).unwrap();
        let ck = checkpoint::load(&path).unwrap();

        let mut reloaded = NePaddModel::new(mini_model_cfg(), cfg.seed).unwrap();
        reloaded.store.import_prefix(&ck.params, "").unwrap();

        let pairs = split_pairs(&corpus, Split::Eval).unwrap();
        for (x, _) in &pairs {
            let mut s1 = Session::new();
            let p1 = out.model.forward_probs(&mut s1, x, AggregationMode::None).unwrap();
            let mut s2 = Session::new();
            let p2 = reloaded.forward_probs(&mut s2, x, AggregationMode::None).unwrap();
            assert_eq!(s1.tape.value(p1), s2.tape.value(p2), "{}", x.utterance_id);
        }
        // optimizer state survives too
        let adam2 = Adam::from_store(&ck.params, &ck.moments, ck.step).unwrap();
        assert_eq!(adam2.step, out.adam.step);
        assert_eq!(adam2.m, out.adam.m);
    }

    #[test]
    fn initial_total_loss_is_affine_in_lambda() {
        let corpus = mini_corpus(8);
        let model = NePaddModel::new(mini_model_cfg(), 0).unwrap();
        let pairs = split_pairs(&corpus, Split::Train).unwrap();
        let (x, y) = &pairs[0];
        let mut totals = Vec::new();
        for lambda in [0.0, 0.5, 1.0] {
            let transfer = TransferConfig { lambda_kl: lambda, ..TransferConfig::default() };
            let mut sess = Session::new();
            let pass = model
                .utterance_pass(&mut sess, x, y, AggregationMode::At, &transfer, None)
                .unwrap();
            totals.push(pass.loss_total);
        }
        let slope1 = totals[1] - totals[0];
        let slope2 = totals[2] - totals[1];
        assert!((slope1 - slope2).abs() < 1e-12, "{totals:?}");
    }
}
