//! Reusable neural building blocks on top of the tape: linear, 1-D convolution,
//! residual block, multi-head self-attention, Transformer encoder and BiLSTM.
//!
//! Layers register their parameters in a [`ParamStore`] under a name prefix at
//! construction time and lease them from a [`Session`] on every forward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::TensorId;
use crate::params::{ParamStore, Session};

pub const LAYER_NORM_EPS: f64 = 1e-5;

// ── linear ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new<R: Rng>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        store.register_uniform(&format!("{name}.w"), vec![in_dim, out_dim], bound, rng)?;
        if bias {
            store.register_uniform(&format!("{name}.b"), vec![1, out_dim], bound, rng)?;
        }
        Ok(Linear { name: name.to_string(), in_dim, out_dim, bias })
    }

    /// `[m x in] -> [m x out]`
    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let w = sess.param(store, &format!("{}.w", self.name))?;
        let y = sess.matmul(x, w)?;
        if self.bias {
            let b = sess.param(store, &format!("{}.b", self.name))?;
            sess.add_row(y, b)
        } else {
            Ok(y)
        }
    }
}

// ── layer norm (affine, over the last dimension) ────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNorm {
    name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize, store: &mut ParamStore) -> Result<Self> {
        store.register_const(&format!("{name}.gamma"), vec![1, dim], 1.0)?;
        store.register_const(&format!("{name}.beta"), vec![1, dim], 0.0)?;
        Ok(LayerNorm { name: name.to_string(), dim })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let gamma = sess.param(store, &format!("{}.gamma", self.name))?;
        let beta = sess.param(store, &format!("{}.beta", self.name))?;
        sess.layer_norm_rows(x, Some(gamma), Some(beta), LAYER_NORM_EPS)
    }
}

// ── 1-D convolution ─────────────────────────────────────────────────────

/// `C(kernel, padding, stride)` over `[channels x time]` data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl Conv1dSpec {
    pub fn output_len(&self, t: usize) -> Result<usize> {
        if t + 2 * self.padding < self.kernel {
            return Err(Error::Dim(format!(
                "conv input too short: t={t} with pad={} cannot fit kernel={}",
                self.padding, self.kernel
            )));
        }
        Ok((t + 2 * self.padding - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    name: String,
    pub spec: Conv1dSpec,
}

impl Conv1d {
    pub fn new<R: Rng>(name: &str, spec: Conv1dSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if spec.stride == 0 || spec.kernel == 0 {
            return Err(Error::Config(format!("conv `{name}`: kernel and stride must be >= 1")));
        }
        let fan_in = spec.in_channels * spec.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.register_uniform(&format!("{name}.w"), vec![spec.out_channels, fan_in], bound, rng)?;
        if spec.bias {
            store.register_uniform(&format!("{name}.b"), vec![spec.out_channels, 1], bound, rng)?;
        }
        Ok(Conv1d { name: name.to_string(), spec })
    }

    /// `[C_in x T] -> [C_out x T']`
    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let shape = sess.tape.shape(x);
        if shape.len() != 2 || shape[0] != self.spec.in_channels {
            return Err(Error::Dim(format!(
                "conv `{}` expects [{} x T], got [{}]",
                self.name,
                self.spec.in_channels,
                shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            )));
        }
        let col = sess.im2col(x, self.spec.kernel, self.spec.padding, self.spec.stride)?;
        let w = sess.param(store, &format!("{}.w", self.name))?;
        let y = sess.matmul(w, col)?;
        if self.spec.bias {
            let b = sess.param(store, &format!("{}.b", self.name))?;
            sess.add_col(y, b)
        } else {
            Ok(y)
        }
    }
}

// ── residual block ──────────────────────────────────────────────────────

/// `x + relu(layer_norm(conv_1x1(x)))` on `[channels x time]`; the output
/// shape always equals the input shape.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv: Conv1d,
    norm: LayerNorm,
}

impl ResidualBlock {
    pub fn new<R: Rng>(name: &str, channels: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let spec = Conv1dSpec {
            kernel: 1,
            padding: 0,
            stride: 1,
            in_channels: channels,
            out_channels: channels,
            bias: false,
        };
        let conv = Conv1d::new(&format!("{name}.conv"), spec, store, rng)?;
        let norm = LayerNorm::new(&format!("{name}.ln"), channels, store)?;
        Ok(ResidualBlock { conv, norm })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let y = self.conv.forward(sess, store, x)?;
        // normalize over channels per frame: transpose to [T x C] and back
        let yt = sess.transpose(y)?;
        let n = self.norm.forward(sess, store, yt)?;
        let a = sess.relu(n);
        let branch = sess.transpose(a)?;
        sess.add(x, branch)
    }
}

// ── self-attention ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfAttentionSpec {
    pub in_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
}

/// Scaled dot-product self-attention with Q/K/V projections and no output
/// projection. Returns the attended embeddings together with one row-stochastic
/// `T x T` attention map; multi-head maps are averaged into that single map.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    name: String,
    pub spec: SelfAttentionSpec,
}

impl SelfAttention {
    pub fn new<R: Rng>(name: &str, spec: SelfAttentionSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if spec.heads == 0 || spec.model_dim % spec.heads != 0 {
            return Err(Error::Config(format!(
                "attention `{name}`: model_dim {} not divisible by heads {}",
                spec.model_dim, spec.heads
            )));
        }
        // identity-plus-noise projections: at initialization each frame
        // attends to frames similar to itself instead of uniformly, which
        // keeps per-frame information in the attended embeddings
        let bound = 1.0 / (spec.in_dim as f64).sqrt();
        for p in ["wq", "wk", "wv"] {
            let full = format!("{name}.{p}");
            store.register_uniform(&full, vec![spec.in_dim, spec.model_dim], bound, rng)?;
            let w = store.get_mut(&full)?;
            for i in 0..spec.in_dim {
                let j = i % spec.model_dim;
                w.data[i * spec.model_dim + j] += 1.0;
            }
        }
        Ok(SelfAttention { name: name.to_string(), spec })
    }

    /// `[T x in_dim] -> (attended [T x model_dim], attn [T x T])`
    pub fn forward(
        &self,
        sess: &mut Session,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let shape = sess.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.spec.in_dim {
            return Err(Error::Dim(format!(
                "attention `{}` expects [T x {}], got [{}]",
                self.name,
                self.spec.in_dim,
                shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            )));
        }
        let wq = sess.param(store, &format!("{}.wq", self.name))?;
        let wk = sess.param(store, &format!("{}.wk", self.name))?;
        let wv = sess.param(store, &format!("{}.wv", self.name))?;
        let q = sess.matmul(x, wq)?;
        let k = sess.matmul(x, wk)?;
        let v = sess.matmul(x, wv)?;

        let heads = self.spec.heads;
        let dh = self.spec.model_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut contexts = Vec::with_capacity(heads);
        let mut map_sum: Option<TensorId> = None;
        for h in 0..heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let qh = sess.slice_cols(q, from, to)?;
            let kh = sess.slice_cols(k, from, to)?;
            let vh = sess.slice_cols(v, from, to)?;
            let kt = sess.transpose(kh)?;
            let scores = sess.matmul(qh, kt)?;
            let scaled = sess.scale(scores, scale);
            let attn = sess.softmax_rows(scaled);
            let ctx = sess.matmul(attn, vh)?;
            contexts.push(ctx);
            map_sum = Some(match map_sum {
                None => attn,
                Some(s) => sess.add(s, attn)?,
            });
        }
        let mut attended = contexts[0];
        for ctx in &contexts[1..] {
            attended = sess.concat_cols(attended, *ctx)?;
        }
        let map = map_sum.expect("at least one head");
        let map = if heads > 1 { sess.scale(map, 1.0 / heads as f64) } else { map };
        Ok((attended, map))
    }
}

// ── transformer encoder ─────────────────────────────────────────────────

/// `E(layers, heads, feedforward_dim)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerEncoderSpec {
    pub layers: usize,
    pub heads: usize,
    pub feedforward_dim: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: SelfAttention,
    wo: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

/// Stack of post-norm encoder layers (residual, then norm), optionally with
/// sinusoidal positional encoding added to the input. Shape-preserving:
/// `[T x D] -> [T x D]`.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub spec: TransformerEncoderSpec,
    pub model_dim: usize,
    pub positional_encoding: bool,
    layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new<R: Rng>(
        name: &str,
        model_dim: usize,
        spec: TransformerEncoderSpec,
        positional_encoding: bool,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let p = format!("{name}.l{l}");
            layers.push(EncoderLayer {
                attn: SelfAttention::new(
                    &format!("{p}.attn"),
                    SelfAttentionSpec { in_dim: model_dim, model_dim, heads: spec.heads },
                    store,
                    rng,
                )?,
                wo: Linear::new(&format!("{p}.wo"), model_dim, model_dim, true, store, rng)?,
                ln1: LayerNorm::new(&format!("{p}.ln1"), model_dim, store)?,
                ff1: Linear::new(&format!("{p}.ff1"), model_dim, spec.feedforward_dim, true, store, rng)?,
                ff2: Linear::new(&format!("{p}.ff2"), spec.feedforward_dim, model_dim, true, store, rng)?,
                ln2: LayerNorm::new(&format!("{p}.ln2"), model_dim, store)?,
            });
        }
        Ok(TransformerEncoder { spec, model_dim, positional_encoding, layers })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let shape = sess.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.model_dim {
            return Err(Error::Dim(format!(
                "transformer expects [T x {}], got [{}]",
                self.model_dim,
                shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            )));
        }
        let t = shape[0];
        let mut h = x;
        if self.positional_encoding {
            let pe = sess.input(sinusoidal_encoding(t, self.model_dim), vec![t, self.model_dim])?;
            h = sess.add(h, pe)?;
        }
        for layer in &self.layers {
            let (attended, _) = layer.attn.forward(sess, store, h)?;
            let proj = layer.wo.forward(sess, store, attended)?;
            let res1 = sess.add(h, proj)?;
            let h1 = layer.ln1.forward(sess, store, res1)?;
            let f1 = layer.ff1.forward(sess, store, h1)?;
            let a1 = sess.relu(f1);
            let f2 = layer.ff2.forward(sess, store, a1)?;
            let res2 = sess.add(h1, f2)?;
            h = layer.ln2.forward(sess, store, res2)?;
        }
        Ok(h)
    }
}

/// Standard sinusoidal positional encoding, `[t x dim]` row-major.
pub fn sinusoidal_encoding(t: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * dim];
    for pos in 0..t {
        for i in 0..dim {
            let exponent = 2.0 * (i / 2) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

// ── BiLSTM ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiLstmSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layer_count: usize,
}

/// Bidirectional LSTM; per frame the forward and backward hidden states are
/// concatenated, so the output is `[T x 2*hidden_dim]`. Gate order is
/// (input, forget, cell, output); weights are uniform(-1/sqrt(H), 1/sqrt(H))
/// and the forget-gate bias starts at +1.
#[derive(Debug, Clone)]
pub struct BiLstm {
    name: String,
    pub spec: BiLstmSpec,
}

impl BiLstm {
    pub fn new<R: Rng>(name: &str, spec: BiLstmSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if spec.hidden_dim == 0 || spec.layer_count == 0 {
            return Err(Error::Config(format!("bilstm `{name}`: hidden_dim and layer_count must be >= 1")));
        }
        let h = spec.hidden_dim;
        let bound = 1.0 / (h as f64).sqrt();
        for l in 0..spec.layer_count {
            let in_dim = if l == 0 { spec.input_dim } else { 2 * h };
            for dir in ["fw", "bw"] {
                let p = format!("{name}.l{l}.{dir}");
                store.register_uniform(&format!("{p}.w_ih"), vec![in_dim, 4 * h], bound, rng)?;
                store.register_uniform(&format!("{p}.w_hh"), vec![h, 4 * h], bound, rng)?;
                store.register_uniform(&format!("{p}.b"), vec![1, 4 * h], bound, rng)?;
                let b = store.get_mut(&format!("{p}.b"))?;
                for j in h..2 * h {
                    b.data[j] += 1.0;
                }
            }
        }
        Ok(BiLstm { name: name.to_string(), spec })
    }

    /// `[T x input_dim] -> [T x 2*hidden_dim]`
    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let shape = sess.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(Error::Dim(format!(
                "bilstm `{}` expects [T x {}], got [{}]",
                self.name,
                self.spec.input_dim,
                shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            )));
        }
        let mut h = x;
        for l in 0..self.spec.layer_count {
            let fw = self.run_direction(sess, store, h, l, "fw", false)?;
            let bw = self.run_direction(sess, store, h, l, "bw", true)?;
            h = sess.concat_cols(fw, bw)?;
        }
        Ok(h)
    }

    fn run_direction(
        &self,
        sess: &mut Session,
        store: &ParamStore,
        x: TensorId,
        layer: usize,
        dir: &str,
        reversed: bool,
    ) -> Result<TensorId> {
        let t = sess.tape.shape(x)[0];
        let hd = self.spec.hidden_dim;
        let p = format!("{}.l{layer}.{dir}", self.name);
        let w_ih = sess.param(store, &format!("{p}.w_ih"))?;
        let w_hh = sess.param(store, &format!("{p}.w_hh"))?;
        let b = sess.param(store, &format!("{p}.b"))?;

        let mut hidden = sess.zeros(vec![1, hd])?;
        let mut cell = sess.zeros(vec![1, hd])?;
        let mut outs = Vec::with_capacity(t);
        let order: Vec<usize> = if reversed { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let xt = sess.slice_row(x, step)?;
            let zx = sess.matmul(xt, w_ih)?;
            let zh = sess.matmul(hidden, w_hh)?;
            let z0 = sess.add(zx, zh)?;
            let z = sess.add(z0, b)?;
            let zi = sess.slice_cols(z, 0, hd)?;
            let zf = sess.slice_cols(z, hd, 2 * hd)?;
            let zg = sess.slice_cols(z, 2 * hd, 3 * hd)?;
            let zo = sess.slice_cols(z, 3 * hd, 4 * hd)?;
            let i = sess.sigmoid(zi);
            let f = sess.sigmoid(zf);
            let g = sess.tanh(zg);
            let o = sess.sigmoid(zo);
            let fc = sess.mul(f, cell)?;
            let ig = sess.mul(i, g)?;
            cell = sess.add(fc, ig)?;
            let tc = sess.tanh(cell);
            hidden = sess.mul(o, tc)?;
            outs.push(hidden);
        }
        if reversed {
            outs.reverse();
        }
        sess.stack_rows(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut store = ParamStore::new();
        let mut r = rng(0);
        let spec = Conv1dSpec { kernel: 1, padding: 0, stride: 1, in_channels: 2, out_channels: 2, bias: false };
        let conv = Conv1d::new("c", spec, &mut store, &mut r).unwrap();
        // identity weights: w[out, in*k] = I
        store.get_mut("c.w").unwrap().data = vec![1.0, 0.0, 0.0, 1.0];

        let mut sess = Session::new();
        let x = sess.input(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]).unwrap();
        let y = conv.forward(&mut sess, &store, x).unwrap();
        assert_eq!(sess.tape.value(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn conv_c521_preserves_length() {
        let spec = Conv1dSpec { kernel: 5, padding: 2, stride: 1, in_channels: 3, out_channels: 4, bias: false };
        assert_eq!(spec.output_len(10).unwrap(), 10);
        let spec2 = Conv1dSpec { kernel: 1, padding: 0, stride: 1, in_channels: 3, out_channels: 4, bias: true };
        assert_eq!(spec2.output_len(10).unwrap(), 10);

        let mut store = ParamStore::new();
        let mut r = rng(1);
        let conv = Conv1d::new("c", spec, &mut store, &mut r).unwrap();
        let mut sess = Session::new();
        let x = sess.input(vec![0.1; 30], vec![3, 10]).unwrap();
        let y = conv.forward(&mut sess, &store, x).unwrap();
        assert_eq!(sess.tape.shape(y), &[4, 10]);
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let spec = Conv1dSpec { kernel: 3, padding: 1, stride: 1, in_channels: 2, out_channels: 3, bias: true };
        let conv = Conv1d::new("c", spec, &mut store, &mut r).unwrap();
        let x0: Vec<f64> = (0..12).map(|i| 0.01 * (i as f64 - 6.0)).collect();
        let w0 = store.get("c.w").unwrap().data.clone();
        let b0 = store.get("c.b").unwrap().data.clone();

        let eval = |ps: &[Vec<f64>]| {
            let mut st = ParamStore::new();
            st.register("c.w", vec![3, 6], ps[1].clone()).unwrap();
            st.register("c.b", vec![3, 1], ps[2].clone()).unwrap();
            let mut sess = Session::new();
            let x = sess.input_tracked(ps[0].clone(), vec![2, 6]).unwrap();
            let y = conv.forward(&mut sess, &st, x).unwrap();
            let l = sess.tape.sum_all(y);
            sess.tape.value(l)[0]
        };
        let fd = central_diff(&eval, &[x0.clone(), w0.clone(), b0.clone()], 1e-5);

        let mut sess = Session::new();
        let x = sess.input_tracked(x0, vec![2, 6]).unwrap();
        let y = conv.forward(&mut sess, &store, x).unwrap();
        let l = sess.tape.sum_all(y);
        sess.tape.backward(l).unwrap();
        store.zero_grads();
        sess.harvest_into(&mut store);
        assert!(max_rel_err(sess.tape.grad(x).unwrap(), &fd[0]) < 1e-4);
        assert!(max_rel_err(&store.get("c.w").unwrap().grad, &fd[1]) < 1e-4);
        assert!(max_rel_err(&store.get("c.b").unwrap().grad, &fd[2]) < 1e-4);
    }

    #[test]
    fn residual_block_with_zero_conv_is_identity() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let block = ResidualBlock::new("b", 3, &mut store, &mut r).unwrap();
        let w = store.get_mut("b.conv.w").unwrap();
        w.data.iter_mut().for_each(|v| *v = 0.0);

        let mut sess = Session::new();
        let data: Vec<f64> = (0..15).map(|i| i as f64 * 0.7 - 3.0).collect();
        let x = sess.input(data.clone(), vec![3, 5]).unwrap();
        let y = block.forward(&mut sess, &store, x).unwrap();
        assert_eq!(sess.tape.value(y), data.as_slice());
    }

    #[test]
    fn attention_single_frame_is_unity() {
        let mut store = ParamStore::new();
        let mut r = rng(4);
        let attn = SelfAttention::new(
            "a",
            SelfAttentionSpec { in_dim: 3, model_dim: 4, heads: 2 },
            &mut store,
            &mut r,
        )
        .unwrap();
        let mut sess = Session::new();
        let x = sess.input(vec![0.5, -0.2, 0.9], vec![1, 3]).unwrap();
        let (attended, map) = attn.forward(&mut sess, &store, x).unwrap();
        assert_eq!(sess.tape.shape(attended), &[1, 4]);
        assert_eq!(sess.tape.value(map), &[1.0]);
    }

    #[test]
    fn attention_identical_frames_give_uniform_rows() {
        let mut store = ParamStore::new();
        let mut r = rng(5);
        let attn = SelfAttention::new(
            "a",
            SelfAttentionSpec { in_dim: 4, model_dim: 4, heads: 1 },
            &mut store,
            &mut r,
        )
        .unwrap();
        let mut sess = Session::new();
        let frame = [0.3, -1.2, 0.8, 0.05];
        let data: Vec<f64> = frame.iter().cycle().take(4 * 5).copied().collect();
        let x = sess.input(data, vec![5, 4]).unwrap();
        let (_, map) = attn.forward(&mut sess, &store, x).unwrap();
        for v in sess.tape.value(map) {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_closed_form_with_identity_projections() {
        let mut store = ParamStore::new();
        let mut r = rng(6);
        let attn = SelfAttention::new(
            "a",
            SelfAttentionSpec { in_dim: 2, model_dim: 2, heads: 1 },
            &mut store,
            &mut r,
        )
        .unwrap();
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        for p in ["a.wq", "a.wk", "a.wv"] {
            store.get_mut(p).unwrap().data = eye.clone();
        }
        let mut sess = Session::new();
        let x = sess.input(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let (_, map) = attn.forward(&mut sess, &store, x).unwrap();
        // row 0 of QK^T/sqrt(2) is [1/sqrt(2), 0]
        let s = 1.0 / 2.0_f64.sqrt();
        let e0 = s.exp();
        let expect0 = e0 / (e0 + 1.0);
        let got = sess.tape.value(map);
        assert!((got[0] - expect0).abs() < 1e-12, "{got:?}");
        assert!((got[1] - (1.0 - expect0)).abs() < 1e-12);
    }

    #[test]
    fn attention_maps_are_row_stochastic_for_random_inputs() {
        let mut r = rng(7);
        for case in 0..50 {
            let t = 1 + (case % 7);
            let heads = [1, 2][case % 2];
            let mut store = ParamStore::new();
            let attn = SelfAttention::new(
                "a",
                SelfAttentionSpec { in_dim: 6, model_dim: 4, heads },
                &mut store,
                &mut r,
            )
            .unwrap();
            let mut sess = Session::new();
            let data: Vec<f64> = (0..t * 6).map(|_| r.random_range(-2.0..2.0)).collect();
            let x = sess.input(data, vec![t, 6]).unwrap();
            let (_, map) = attn.forward(&mut sess, &store, x).unwrap();
            let v = sess.tape.value(map);
            for row in 0..t {
                let s: f64 = v[row * t..(row + 1) * t].iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
                assert!(v[row * t..(row + 1) * t].iter().all(|p| *p >= 0.0));
            }
        }
    }

    #[test]
    fn bilstm_zero_weights_give_zero_outputs() {
        let mut store = ParamStore::new();
        let mut r = rng(8);
        let lstm = BiLstm::new(
            "l",
            BiLstmSpec { input_dim: 3, hidden_dim: 2, layer_count: 1 },
            &mut store,
            &mut r,
        )
        .unwrap();
        for p in store.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut sess = Session::new();
        let x = sess.input(vec![1.0; 12], vec![4, 3]).unwrap();
        let y = lstm.forward(&mut sess, &store, x).unwrap();
        assert_eq!(sess.tape.shape(y), &[4, 4]);
        assert!(sess.tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bilstm_time_reversal_swaps_direction_halves() {
        let mut store = ParamStore::new();
        let mut r = rng(9);
        let lstm = BiLstm::new(
            "l",
            BiLstmSpec { input_dim: 2, hidden_dim: 3, layer_count: 1 },
            &mut store,
            &mut r,
        )
        .unwrap();
        let t = 5;
        let data: Vec<f64> = (0..t * 2).map(|i| (i as f64 * 0.37).sin()).collect();

        let mut sess = Session::new();
        let x = sess.input(data.clone(), vec![t, 2]).unwrap();
        let y = lstm.forward(&mut sess, &store, x).unwrap();
        let fwd_out = sess.tape.value(y).to_vec();

        // reversed input on a model with fw/bw weights swapped
        let mut swapped = store.clone();
        for name in ["w_ih", "w_hh", "b"] {
            let fw = store.get(&format!("l.l0.fw.{name}")).unwrap().data.clone();
            let bw = store.get(&format!("l.l0.bw.{name}")).unwrap().data.clone();
            swapped.get_mut(&format!("l.l0.fw.{name}")).unwrap().data = bw;
            swapped.get_mut(&format!("l.l0.bw.{name}")).unwrap().data = fw;
        }
        let mut rdata = vec![0.0; t * 2];
        for i in 0..t {
            rdata[i * 2..(i + 1) * 2].copy_from_slice(&data[(t - 1 - i) * 2..(t - i) * 2]);
        }
        let mut sess2 = Session::new();
        let xr = sess2.input(rdata, vec![t, 2]).unwrap();
        let yr = lstm.forward(&mut sess2, &swapped, xr).unwrap();
        let rev_out = sess2.tape.value(yr);

        // row t of fwd == row (T-1-t) of rev with halves exchanged
        for i in 0..t {
            for j in 0..3 {
                let a = fwd_out[i * 6 + j];
                let b = rev_out[(t - 1 - i) * 6 + 3 + j];
                assert!((a - b).abs() < 1e-12);
                let a2 = fwd_out[i * 6 + 3 + j];
                let b2 = rev_out[(t - 1 - i) * 6 + j];
                assert!((a2 - b2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilstm_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng(10);
        let lstm = BiLstm::new(
            "l",
            BiLstmSpec { input_dim: 2, hidden_dim: 3, layer_count: 1 },
            &mut store,
            &mut r,
        )
        .unwrap();
        let x0: Vec<f64> = (0..8).map(|i| 0.01 * (i as f64 - 4.0)).collect();
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
            let x = sess.input_tracked(ps[0].clone(), vec![4, 2]).unwrap();
            let y = lstm.forward(&mut sess, &st, x).unwrap();
            let l = sess.tape.sum_all(y);
            sess.tape.value(l)[0]
        };
        let fd = central_diff(&eval, &blocks, 1e-5);

        let mut sess = Session::new();
        let x = sess.input_tracked(x0, vec![4, 2]).unwrap();
        let y = lstm.forward(&mut sess, &store, x).unwrap();
        let l = sess.tape.sum_all(y);
        sess.tape.backward(l).unwrap();
        store.zero_grads();
        sess.harvest_into(&mut store);
        assert!(max_rel_err(sess.tape.grad(x).unwrap(), &fd[0]) < 1e-4);
        for (i, n) in names.iter().enumerate() {
            let g = &store.get(n).unwrap().grad;
            assert!(max_rel_err(g, &fd[i + 1]) < 1e-4, "param {n}");
        }
    }

    #[test]
    fn transformer_zero_weights_reduce_to_layer_norms() {
        let mut store = ParamStore::new();
        let mut r = rng(11);
        let enc = TransformerEncoder::new(
            "t",
            4,
            TransformerEncoderSpec { layers: 1, heads: 1, feedforward_dim: 6 },
            false,
            &mut store,
            &mut r,
        )
        .unwrap();
        for p in store.iter_mut() {
            if !p.name.contains("gamma") {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut sess = Session::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let x = sess.input(data.clone(), vec![3, 4]).unwrap();
        let y = enc.forward(&mut sess, &store, x).unwrap();

        // reference: layer_norm applied twice
        let mut ref_sess = Session::new();
        let xr = ref_sess.input(data, vec![3, 4]).unwrap();
        let l1 = ref_sess.tape.layer_norm_rows(xr, None, None, LAYER_NORM_EPS).unwrap();
        let l2 = ref_sess.tape.layer_norm_rows(l1, None, None, LAYER_NORM_EPS).unwrap();
        for (a, b) in sess.tape.value(y).iter().zip(ref_sess.tape.value(l2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transformer_preserves_shape() {
        for (t, d) in [(5usize, 8usize), (16, 32)] {
            let mut store = ParamStore::new();
            let mut r = rng(12);
            let enc = TransformerEncoder::new(
                "t",
                d,
                TransformerEncoderSpec { layers: 2, heads: 2, feedforward_dim: 16 },
                true,
                &mut store,
                &mut r,
            )
            .unwrap();
            let mut sess = Session::new();
            let data: Vec<f64> = (0..t * d).map(|i| (i as f64 * 0.13).sin()).collect();
            let x = sess.input(data, vec![t, d]).unwrap();
            let y = enc.forward(&mut sess, &store, x).unwrap();
            assert_eq!(sess.tape.shape(y), &[t, d]);
        }
    }

    #[test]
    fn transformer_rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut r = rng(13);
        let err = TransformerEncoder::new(
            "t",
            6,
            TransformerEncoderSpec { layers: 1, heads: 4, feedforward_dim: 8 },
            false,
            &mut store,
            &mut r,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn transformer_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng(14);
        let enc = TransformerEncoder::new(
            "t",
            4,
            TransformerEncoderSpec { layers: 1, heads: 2, feedforward_dim: 5 },
            true,
            &mut store,
            &mut r,
        )
        .unwrap();
        let x0: Vec<f64> = (0..12).map(|i| 0.01 * ((i * 7 % 13) as f64 - 6.0)).collect();
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
            let x = sess.input_tracked(ps[0].clone(), vec![3, 4]).unwrap();
            let y = enc.forward(&mut sess, &st, x).unwrap();
            let l = sess.tape.mean_all(y);
            sess.tape.value(l)[0]
        };
        let fd = central_diff(&eval, &blocks, 1e-5);

        let mut sess = Session::new();
        let x = sess.input_tracked(x0, vec![3, 4]).unwrap();
        let y = enc.forward(&mut sess, &store, x).unwrap();
        let l = sess.tape.mean_all(y);
        sess.tape.backward(l).unwrap();
        store.zero_grads();
        sess.harvest_into(&mut store);
        assert!(max_rel_err(sess.tape.grad(x).unwrap(), &fd[0]) < 1e-4);
        for (i, n) in names.iter().enumerate() {
            let g = &store.get(n).unwrap().grad;
            assert!(max_rel_err(g, &fd[i + 1]) < 1e-4, "param {n}");
        }
    }

    #[test]
    fn layers_preserve_declared_shapes_for_random_configs() {
        let mut r = rng(15);
        for _ in 0..100 {
            let t = r.random_range(1..12usize);
            let c_in = r.random_range(1..6usize);
            let c_out = r.random_range(1..6usize);
            let kernel = r.random_range(1..4usize);
            let padding = r.random_range(0..3usize);
            let stride = r.random_range(1..3usize);
            if t + 2 * padding < kernel {
                continue;
            }
            let mut store = ParamStore::new();
            let spec = Conv1dSpec { kernel, padding, stride, in_channels: c_in, out_channels: c_out, bias: true };
            let conv = Conv1d::new("c", spec, &mut store, &mut r).unwrap();
            let mut sess = Session::new();
            let data: Vec<f64> = (0..c_in * t).map(|_| r.random_range(-1.0..1.0)).collect();
            let x = sess.input(data, vec![c_in, t]).unwrap();
            let y = conv.forward(&mut sess, &store, x).unwrap();
            let expect = spec.output_len(t).unwrap();
            assert_eq!(sess.tape.shape(y), &[c_out, expect]);

            let hidden = r.random_range(1..5usize);
            let mut store2 = ParamStore::new();
            let lstm = BiLstm::new(
                "l",
                BiLstmSpec { input_dim: c_in, hidden_dim: hidden, layer_count: 1 },
                &mut store2,
                &mut r,
            )
            .unwrap();
            let mut sess2 = Session::new();
            let data: Vec<f64> = (0..t * c_in).map(|_| r.random_range(-1.0..1.0)).collect();
            let x2 = sess2.input(data, vec![t, c_in]).unwrap();
            let y2 = lstm.forward(&mut sess2, &store2, x2).unwrap();
            assert_eq!(sess2.tape.shape(y2), &[t, 2 * hidden]);
        }
    }
}
