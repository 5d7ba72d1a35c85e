//! Frame-level backend classifier: Transformer encoder stack, BiLSTM, ReLU and
//! a fully connected head producing per-frame authenticity probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FrameLabels;
use crate::error::{Error, Result};
use crate::layers::{BiLstm, BiLstmSpec, Linear, TransformerEncoder, TransformerEncoderSpec};
use crate::numerics::TensorId;
use crate::params::{ParamStore, Session};

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_ff_dim: usize,
    pub bilstm_hidden: usize,
    pub fc_width: usize,
    /// Add sinusoidal positional encoding before the encoder stack.
    pub positional_encoding: bool,
}

impl ClassifierConfig {
    pub fn desk() -> Self {
        ClassifierConfig {
            transformer_layers: 2,
            transformer_heads: 2,
            transformer_ff_dim: 64,
            bilstm_hidden: 16,
            fc_width: 32,
            positional_encoding: true,
        }
    }

    /// Full-scale backend: E(2, 4, 1024), 128-unit BiLSTM, 256-d head.
    pub fn paper_scale() -> Self {
        ClassifierConfig {
            transformer_layers: 2,
            transformer_heads: 4,
            transformer_ff_dim: 1024,
            bilstm_hidden: 128,
            fc_width: 256,
            positional_encoding: true,
        }
    }
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub model_dim: usize,
    encoder: TransformerEncoder,
    bilstm: BiLstm,
    fc: Linear,
    head: Linear,
}

impl Classifier {
    pub fn new<R: Rng>(
        name: &str,
        model_dim: usize,
        cfg: ClassifierConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = TransformerEncoder::new(
            &format!("{name}.tf"),
            model_dim,
            TransformerEncoderSpec {
                layers: cfg.transformer_layers,
                heads: cfg.transformer_heads,
                feedforward_dim: cfg.transformer_ff_dim,
            },
            cfg.positional_encoding,
            store,
            rng,
        )?;
        let bilstm = BiLstm::new(
            &format!("{name}.bilstm"),
            BiLstmSpec { input_dim: model_dim, hidden_dim: cfg.bilstm_hidden, layer_count: 1 },
            store,
            rng,
        )?;
        let fc = Linear::new(&format!("{name}.fc"), 2 * cfg.bilstm_hidden, cfg.fc_width, true, store, rng)?;
        let head = Linear::new(&format!("{name}.head"), cfg.fc_width, 1, true, store, rng)?;
        // zero-initialized head: every frame starts at probability 0.5
        store.get_mut(&format!("{name}.head.w"))?.data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(&format!("{name}.head.b"))?.data.iter_mut().for_each(|v| *v = 0.0);
        Ok(Classifier { cfg, model_dim, encoder, bilstm, fc, head })
    }

    /// `[T x D] -> [T x 1]` of per-frame authenticity probabilities in (0, 1)
    /// (1 means authentic, matching the label convention).
    pub fn classify_frames(&self, sess: &mut Session, store: &ParamStore, h: TensorId) -> Result<TensorId> {
        let shape = sess.tape.shape(h);
        if shape.len() != 2 || shape[1] != self.model_dim {
            return Err(Error::Config(format!(
                "classifier expects [T x {}], got [{}]",
                self.model_dim,
                shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            )));
        }
        let enc = self.encoder.forward(sess, store, h)?;
        let seq = self.bilstm.forward(sess, store, enc)?;
        let act = sess.relu(seq);
        let f = self.fc.forward(sess, store, act)?;
        let f = sess.relu(f);
        let logits = self.head.forward(sess, store, f)?;
        Ok(sess.sigmoid(logits))
    }
}

/// Mean binary cross-entropy of per-frame authenticity probabilities against
/// labels; probabilities are clamped to `[1e-7, 1 - 1e-7]` inside the logs.
/// `pos_weight`, when set, scales the authentic-class term.
pub fn bce_frame_loss(
    sess: &mut Session,
    probs: TensorId,
    labels: &FrameLabels,
    pos_weight: Option<f64>,
) -> Result<TensorId> {
    let shape = sess.tape.shape(probs);
    let t = shape[0];
    if shape.len() != 2 || shape[1] != 1 {
        return Err(Error::Dim(format!(
            "probabilities must be [T x 1], got [{}]",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        )));
    }
    if labels.len() != t {
        return Err(Error::Dim(format!("{t} probabilities vs {} labels", labels.len())));
    }
    let w = pos_weight.unwrap_or(1.0);
    let y: Vec<f64> = labels.authentic.iter().map(|v| *v as f64 * w).collect();
    let one_minus_y: Vec<f64> = labels.authentic.iter().map(|v| 1.0 - *v as f64).collect();
    let yt = sess.input(y, vec![t, 1])?;
    let ymt = sess.input(one_minus_y, vec![t, 1])?;

    let p = sess.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = sess.log(p)?;
    let negp = sess.scale(probs, -1.0);
    let pm = sess.add_scalar(negp, 1.0);
    let pm = sess.clamp(pm, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lpm = sess.log(pm)?;

    let t1 = sess.mul(yt, lp)?;
    let t2 = sess.mul(ymt, lpm)?;
    let s = sess.add(t1, t2)?;
    let m = sess.mean_all(s);
    Ok(sess.scale(m, -1.0))
}

/// Spoof score orientation used by the metrics: `s = 1 - p_authentic`.
pub fn spoof_scores(p_authentic: &[f64]) -> Vec<f64> {
    p_authentic.iter().map(|p| 1.0 - p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::tags::EntityTag;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn mini() -> (Classifier, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let cfg = ClassifierConfig {
            transformer_layers: 1,
            transformer_heads: 1,
            transformer_ff_dim: 6,
            bilstm_hidden: 3,
            fc_width: 5,
            positional_encoding: true,
        };
        let clf = Classifier::new("clf", 4, cfg, &mut store, &mut rng).unwrap();
        (clf, store)
    }

    fn labels(authentic: Vec<u8>) -> FrameLabels {
        let tags = vec![EntityTag::Outside; authentic.len()];
        FrameLabels::new(authentic, tags, vec![]).unwrap()
    }

    #[test]
    fn output_length_matches_input_and_stays_in_unit_interval() {
        let (clf, store) = mini();
        for t in [1usize, 7, 50] {
            let mut sess = Session::new();
            let data: Vec<f64> = (0..t * 4).map(|i| (i as f64 * 0.11).sin()).collect();
            let h = sess.input(data, vec![t, 4]).unwrap();
            let p = clf.classify_frames(&mut sess, &store, h).unwrap();
            assert_eq!(sess.tape.shape(p), &[t, 1]);
            for v in sess.tape.value(p) {
                assert!(*v > 0.0 && *v < 1.0);
            }
        }
    }

    #[test]
    fn bce_exact_predictions_reach_clamp_floor() {
        let mut sess = Session::new();
        let p = sess.input(vec![1.0, 0.0], vec![2, 1]).unwrap();
        let l = bce_frame_loss(&mut sess, p, &labels(vec![1, 0]), None).unwrap();
        assert!(sess.tape.value(l)[0] <= 1.7e-7);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut sess = Session::new();
        let p = sess.input(vec![0.5; 4], vec![4, 1]).unwrap();
        let l = bce_frame_loss(&mut sess, p, &labels(vec![1, 0, 1, 0]), None).unwrap();
        assert!((sess.tape.value(l)[0] - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_direct_evaluation() {
        let mut sess = Session::new();
        let p = sess.input(vec![0.9, 0.2], vec![2, 1]).unwrap();
        let l = bce_frame_loss(&mut sess, p, &labels(vec![1, 0]), None).unwrap();
        let expect = -((0.9_f64).ln() + (0.8_f64).ln()) / 2.0;
        assert!((sess.tape.value(l)[0] - expect).abs() < 1e-12);
        assert!((expect - 0.16425).abs() < 1e-5);
    }

    #[test]
    fn bce_length_mismatch_errors() {
        let mut sess = Session::new();
        let p = sess.input(vec![0.5; 3], vec![3, 1]).unwrap();
        assert!(bce_frame_loss(&mut sess, p, &labels(vec![1, 0]), None).is_err());
    }

    #[test]
    fn full_stack_gradient_matches_finite_differences() {
        let (clf, mut store) = mini();
        let t = 4;
        let x0: Vec<f64> = (0..t * 4).map(|i| 0.01 * ((i * 3 % 17) as f64 - 8.0)).collect();
        let y = labels(vec![1, 0, 0, 1]);
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        let shapes: Vec<Vec<usize>> = store.iter().map(|p| p.shape.clone()).collect();
        let mut blocks: Vec<Vec<f64>> = vec![x0.clone()];
        blocks.extend(store.iter().map(|p| p.data.clone()));

        let eval = |ps: &[Vec<f64>]| {
            let mut st = ParamStore::new();
            for (i, n) in names.iter().enumerate() {
                st.register(n, shapes[i].clone(), ps[i + 1].clone()).unwrap();
            }
            let mut sess = Session::new();
            let x = sess.input_tracked(ps[0].clone(), vec![t, 4]).unwrap();
            let p = clf.classify_frames(&mut sess, &st, x).unwrap();
            let l = bce_frame_loss(&mut sess, p, &y, None).unwrap();
            sess.tape.value(l)[0]
        };
        let fd = central_diff(&eval, &blocks, 1e-5);

        let mut sess = Session::new();
        let x = sess.input_tracked(x0, vec![t, 4]).unwrap();
        let p = clf.classify_frames(&mut sess, &store, x).unwrap();
        let l = bce_frame_loss(&mut sess, p, &y, None).unwrap();
        sess.tape.backward(l).unwrap();
        store.zero_grads();
        sess.harvest_into(&mut store);
        assert!(max_rel_err(sess.tape.grad(x).unwrap(), &fd[0]) < 1e-4);
        for (i, n) in names.iter().enumerate() {
            assert!(max_rel_err(&store.get(n).unwrap().grad, &fd[i + 1]) < 1e-4, "param {n}");
        }
    }

    #[test]
    fn descent_on_separable_toy_batch() {
        // tiny supervised problem: frames with positive first feature are
        // authentic; loss should fall over 50 plain gradient steps
        let (clf, mut store) = mini();
        let t = 6;
        let data: Vec<f64> = (0..t)
            .flat_map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![sign * 0.8, 0.1, -0.1, 0.05]
            })
            .collect();
        let y = labels((0..t).map(|i| if i % 2 == 0 { 1 } else { 0 }).collect());

        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..50 {
            let mut sess = Session::new();
            let x = sess.input(data.clone(), vec![t, 4]).unwrap();
            let p = clf.classify_frames(&mut sess, &store, x).unwrap();
            let l = bce_frame_loss(&mut sess, p, &y, None).unwrap();
            let lv = sess.tape.value(l)[0];
            if step == 0 {
                first = lv;
            }
            last = lv;
            sess.tape.backward(l).unwrap();
            store.zero_grads();
            sess.harvest_into(&mut store);
            for prm in store.iter_mut() {
                for (v, g) in prm.data.iter_mut().zip(prm.grad.iter()) {
                    *v -= 0.1 * g;
                }
            }
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn spoof_score_orientation() {
        assert_eq!(spoof_scores(&[1.0, 0.25]), vec![0.0, 0.75]);
    }
}
