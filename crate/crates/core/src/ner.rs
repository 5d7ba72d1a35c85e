//! Teacher branch: conv + normalization frontend, BiLSTM stack, self-attention,
//! and the frame-tag head used only during teacher pretraining.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FrameFeatures;
use crate::error::{Error, Result};
use crate::layers::{BiLstm, BiLstmSpec, Conv1d, Conv1dSpec, LayerNorm, Linear, SelfAttention, SelfAttentionSpec};
use crate::numerics::TensorId;
use crate::params::{ParamStore, Session};
use crate::tags::{EntityTag, TAG_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NerBranchConfig {
    pub d_in: usize,
    pub conv_channels: usize,
    pub bilstm_hidden: usize,
    pub bilstm_layers: usize,
    /// Attention model dimension; must match the student branch for fusion.
    pub attn_dim: usize,
    pub attn_heads: usize,
}

impl NerBranchConfig {
    pub fn desk() -> Self {
        NerBranchConfig {
            d_in: 16,
            conv_channels: 32,
            bilstm_hidden: 16,
            bilstm_layers: 1,
            attn_dim: 16,
            attn_heads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.conv_channels == 0 || self.bilstm_hidden == 0 || self.bilstm_layers == 0 {
            return Err(Error::Config("ner branch dimensions must be positive".into()));
        }
        if self.attn_heads == 0 || self.attn_dim % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "ner attn_dim {} not divisible by attn_heads {}",
                self.attn_dim, self.attn_heads
            )));
        }
        Ok(())
    }
}

impl Default for NerBranchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub struct NerForward {
    /// BiLSTM embeddings, `[T x 2H]`.
    pub h: TensorId,
    /// Row-stochastic attention map, `[T x T]`.
    pub attn: TensorId,
    /// Attention-weighted values, `[T x D]`.
    pub attended: TensorId,
    /// Frame tag logits, `[T x 7]`; used by the pretraining objective only.
    pub tag_logits: TensorId,
}

#[derive(Debug, Clone)]
pub struct NerBranch {
    pub cfg: NerBranchConfig,
    conv: Conv1d,
    norm: LayerNorm,
    bilstm: BiLstm,
    attn: SelfAttention,
    tag_head: Linear,
}

impl NerBranch {
    pub fn new<R: Rng>(name: &str, cfg: NerBranchConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let conv = Conv1d::new(
            &format!("{name}.conv"),
            Conv1dSpec {
                kernel: 5,
                padding: 2,
                stride: 1,
                in_channels: cfg.d_in,
                out_channels: cfg.conv_channels,
                bias: true,
            },
            store,
            rng,
        )?;
        let norm = LayerNorm::new(&format!("{name}.ln"), cfg.conv_channels, store)?;
        let bilstm = BiLstm::new(
            &format!("{name}.bilstm"),
            BiLstmSpec {
                input_dim: cfg.conv_channels,
                hidden_dim: cfg.bilstm_hidden,
                layer_count: cfg.bilstm_layers,
            },
            store,
            rng,
        )?;
        let attn = SelfAttention::new(
            &format!("{name}.attn"),
            SelfAttentionSpec {
                in_dim: 2 * cfg.bilstm_hidden,
                model_dim: cfg.attn_dim,
                heads: cfg.attn_heads,
            },
            store,
            rng,
        )?;
        let tag_head = Linear::new(&format!("{name}.tag_head"), cfg.attn_dim, TAG_COUNT, true, store, rng)?;
        // zero-initialized head: the untrained teacher decodes everything as O
        store.get_mut(&format!("{name}.tag_head.w"))?.data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(&format!("{name}.tag_head.b"))?.data.iter_mut().for_each(|v| *v = 0.0);
        Ok(NerBranch { cfg, conv, norm, bilstm, attn, tag_head })
    }

    pub fn forward_tensor(&self, sess: &mut Session, store: &ParamStore, x: TensorId) -> Result<NerForward> {
        let shape = sess.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.cfg.d_in {
            return Err(Error::Config(format!(
                "ner branch expects [T x {}], got [{}]",
                self.cfg.d_in,
                shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            )));
        }
        let xc = sess.transpose(x)?;
        let c = self.conv.forward(sess, store, xc)?;
        let ct = sess.transpose(c)?; // [T x channels]
        let n = self.norm.forward(sess, store, ct)?;
        let h = self.bilstm.forward(sess, store, n)?;
        let (attended, attn) = self.attn.forward(sess, store, h)?;
        let tag_logits = self.tag_head.forward(sess, store, attended)?;
        Ok(NerForward { h, attn, attended, tag_logits })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: &FrameFeatures) -> Result<NerForward> {
        if x.d != self.cfg.d_in {
            return Err(Error::Config(format!(
                "ner branch configured for d_in={}, features have d={}",
                self.cfg.d_in, x.d
            )));
        }
        let input = sess.input(x.data.clone(), vec![x.t, x.d])?;
        self.forward_tensor(sess, store, input)
    }
}

/// Mean per-frame cross-entropy of the tag logits against gold tags.
pub fn pretrain_ner_loss(sess: &mut Session, tag_logits: TensorId, tags: &[EntityTag]) -> Result<TensorId> {
    let shape = sess.tape.shape(tag_logits);
    if shape.len() != 2 || shape[1] != TAG_COUNT {
        return Err(Error::Dim(format!(
            "tag logits must be [T x {TAG_COUNT}], got [{}]",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        )));
    }
    let t = shape[0];
    if tags.len() != t {
        return Err(Error::Dim(format!("{t} logit rows vs {} tags", tags.len())));
    }
    let mut onehot = vec![0.0; t * TAG_COUNT];
    for (i, tag) in tags.iter().enumerate() {
        onehot[i * TAG_COUNT + tag.index()] = 1.0;
    }
    let mask = sess.input(onehot, vec![t, TAG_COUNT])?;
    let p = sess.softmax_rows(tag_logits);
    let p = sess.clamp_min(p, 1e-300);
    let lp = sess.log(p)?;
    let picked = sess.mul(mask, lp)?;
    let s = sess.sum_all(picked);
    Ok(sess.scale(s, -1.0 / t as f64))
}

/// Per-frame argmax decode of tag logits.
pub fn decode_tags(logits: &[f64], t: usize) -> Vec<EntityTag> {
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let row = &logits[i * TAG_COUNT..(i + 1) * TAG_COUNT];
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        out.push(EntityTag::from_index(best).expect("argmax index in range"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::tags::EntityType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn mini_cfg() -> NerBranchConfig {
        NerBranchConfig { d_in: 3, conv_channels: 4, bilstm_hidden: 3, bilstm_layers: 1, attn_dim: 4, attn_heads: 1 }
    }

    #[test]
    fn single_frame_attention_is_unity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let branch = NerBranch::new("ner", mini_cfg(), &mut store, &mut rng).unwrap();
        let mut sess = Session::new();
        let x = FrameFeatures::new("u", vec![0.2, 0.4, -0.1], 1, 3).unwrap();
        let out = branch.forward(&mut sess, &store, &x).unwrap();
        assert_eq!(sess.tape.value(out.attn), &[1.0]);
    }

    #[test]
    fn shape_contract_at_t10() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let branch = NerBranch::new("ner", NerBranchConfig::desk(), &mut store, &mut rng).unwrap();
        let mut sess = Session::new();
        let t = 10;
        let data: Vec<f64> = (0..t * 16).map(|i| (i as f64 * 0.03).sin()).collect();
        let x = FrameFeatures::new("u", data, t, 16).unwrap();
        let out = branch.forward(&mut sess, &store, &x).unwrap();
        assert_eq!(sess.tape.shape(out.h), &[t, 32]);
        assert_eq!(sess.tape.shape(out.attn), &[t, t]);
        assert_eq!(sess.tape.shape(out.attended), &[t, 16]);
        assert_eq!(sess.tape.shape(out.tag_logits), &[t, 7]);
        let v = sess.tape.value(out.attn);
        for row in 0..t {
            let s: f64 = v[row * t..(row + 1) * t].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pretrain_loss_on_confident_correct_logits_is_tiny() {
        let mut sess = Session::new();
        let tags = vec![EntityTag::Outside, EntityTag::Begin(EntityType::Org)];
        let mut logits = vec![0.0; 2 * TAG_COUNT];
        logits[tags[0].index()] = 20.0;
        logits[TAG_COUNT + tags[1].index()] = 20.0;
        let l = sess.input_tracked(logits, vec![2, TAG_COUNT]).unwrap();
        let loss = pretrain_ner_loss(&mut sess, l, &tags).unwrap();
        assert!(sess.tape.value(loss)[0] <= 1e-6);
    }

    #[test]
    fn pretrain_loss_on_uniform_logits_is_ln7() {
        let mut sess = Session::new();
        let tags = vec![EntityTag::Outside; 3];
        let l = sess.input_tracked(vec![0.0; 3 * TAG_COUNT], vec![3, TAG_COUNT]).unwrap();
        let loss = pretrain_ner_loss(&mut sess, l, &tags).unwrap();
        assert!((sess.tape.value(loss)[0] - 7.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_matches_direct_summation() {
        // T=2, logits rows [1,0,...] and [0,1,0,...], tags [O, B-ORG]
        let mut logits: Vec<f64> = vec![0.0; 2 * TAG_COUNT];
        logits[0] = 1.0;
        logits[TAG_COUNT + 1] = 1.0;
        let tags = vec![EntityTag::Outside, EntityTag::Begin(EntityType::Org)];

        // independent oracle: direct softmax + log summation
        let mut expect = 0.0;
        for (i, tag) in tags.iter().enumerate() {
            let row = &logits[i * TAG_COUNT..(i + 1) * TAG_COUNT];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[tag.index()].exp() / denom).ln();
        }
        expect /= tags.len() as f64;

        let mut sess = Session::new();
        let l = sess.input_tracked(logits, vec![2, TAG_COUNT]).unwrap();
        let loss = pretrain_ner_loss(&mut sess, l, &tags).unwrap();
        assert!((sess.tape.value(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_length_mismatch_errors() {
        let mut sess = Session::new();
        let l = sess.input(vec![0.0; 2 * TAG_COUNT], vec![2, TAG_COUNT]).unwrap();
        let err = pretrain_ner_loss(&mut sess, l, &[EntityTag::Outside]).unwrap_err();
        assert!(matches!(err, Error::Dim(_)));
    }

    #[test]
    fn pretraining_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let branch = NerBranch::new("ner", mini_cfg(), &mut store, &mut rng).unwrap();
        let x0: Vec<f64> = (0..4 * 3).map(|i| 0.01 * ((i * 3 % 7) as f64 - 3.0)).collect();
        let tags = vec![
            EntityTag::Outside,
            EntityTag::Begin(EntityType::Per),
            EntityTag::Inside(EntityType::Per),
            EntityTag::Outside,
        ];
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
            let x = sess.input_tracked(ps[0].clone(), vec![4, 3]).unwrap();
            let out = branch.forward_tensor(&mut sess, &st, x).unwrap();
            let loss = pretrain_ner_loss(&mut sess, out.tag_logits, &tags).unwrap();
            sess.tape.value(loss)[0]
        };
        let fd = central_diff(&eval, &blocks, 1e-5);

        let mut sess = Session::new();
        let x = sess.input_tracked(x0, vec![4, 3]).unwrap();
        let out = branch.forward_tensor(&mut sess, &store, x).unwrap();
        let loss = pretrain_ner_loss(&mut sess, out.tag_logits, &tags).unwrap();
        sess.tape.backward(loss).unwrap();
        store.zero_grads();
        sess.harvest_into(&mut store);
        assert!(max_rel_err(sess.tape.grad(x).unwrap(), &fd[0]) < 1e-4);
        for (i, n) in names.iter().enumerate() {
            assert!(max_rel_err(&store.get(n).unwrap().grad, &fd[i + 1]) < 1e-4, "param {n}");
        }
    }
}
