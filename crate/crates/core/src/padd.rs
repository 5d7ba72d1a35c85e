//! Student branch: frame-feature frontend (conv + residual blocks + projection)
//! followed by self-attention over the projected embeddings.

use rand::Rng;

use crate::data::FrameFeatures;
use crate::error::{Error, Result};
use crate::layers::{Conv1d, Conv1dSpec, ResidualBlock, SelfAttention, SelfAttentionSpec};
use crate::numerics::TensorId;
use crate::params::{ParamStore, Session};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaddBranchConfig {
    pub d_in: usize,
    pub conv_channels: usize,
    pub residual_blocks: usize,
    /// Model dimension of the branch attention (the projection target).
    pub attn_dim: usize,
    pub attn_heads: usize,
}

impl PaddBranchConfig {
    /// Desk-scale defaults used throughout tests and the synthetic experiments.
    pub fn desk() -> Self {
        PaddBranchConfig { d_in: 16, conv_channels: 32, residual_blocks: 4, attn_dim: 16, attn_heads: 1 }
    }

    /// Dimensions of the full-scale system (768-d SSL features, 512-channel
    /// frontend, 12 residual blocks, 128-d attention). Kept as a named preset
    /// for documentation; not exercised in CI.
    pub fn paper_scale() -> Self {
        PaddBranchConfig { d_in: 768, conv_channels: 512, residual_blocks: 12, attn_dim: 128, attn_heads: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.conv_channels == 0 || self.attn_dim == 0 {
            return Err(Error::Config("padd branch dimensions must be positive".into()));
        }
        if self.attn_heads == 0 || self.attn_dim % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "padd attn_dim {} not divisible by attn_heads {}",
                self.attn_dim, self.attn_heads
            )));
        }
        Ok(())
    }
}

impl Default for PaddBranchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub struct PaddForward {
    /// Frontend embeddings, `[T x D]`.
    pub h: TensorId,
    /// Row-stochastic attention map, `[T x T]`.
    pub attn: TensorId,
    /// Attention-weighted values, `[T x D]`.
    pub attended: TensorId,
}

#[derive(Debug, Clone)]
pub struct PaddBranch {
    pub cfg: PaddBranchConfig,
    conv_in: Conv1d,
    blocks: Vec<ResidualBlock>,
    proj: Conv1d,
    attn: SelfAttention,
}

impl PaddBranch {
    pub fn new<R: Rng>(name: &str, cfg: PaddBranchConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        // first conv C(5,2,1) without bias, then C(1,0,1) blocks, then a
        // C(1,0,1) projection down to the attention dimension
        let conv_in = Conv1d::new(
            &format!("{name}.conv_in"),
            Conv1dSpec {
                kernel: 5,
                padding: 2,
                stride: 1,
                in_channels: cfg.d_in,
                out_channels: cfg.conv_channels,
                bias: false,
            },
            store,
            rng,
        )?;
        // identity taps at the kernel center: the frontend starts as a
        // feature passthrough and learns deviations from it
        {
            let w = store.get_mut(&format!("{name}.conv_in.w"))?;
            let k = 5;
            for out_ch in 0..cfg.conv_channels {
                let in_ch = out_ch % cfg.d_in;
                w.data[out_ch * (cfg.d_in * k) + in_ch * k + k / 2] += 1.0;
            }
        }
        let mut blocks = Vec::with_capacity(cfg.residual_blocks);
        for b in 0..cfg.residual_blocks {
            blocks.push(ResidualBlock::new(&format!("{name}.block{b}"), cfg.conv_channels, store, rng)?);
        }
        let proj = Conv1d::new(
            &format!("{name}.proj"),
            Conv1dSpec {
                kernel: 1,
                padding: 0,
                stride: 1,
                in_channels: cfg.conv_channels,
                out_channels: cfg.attn_dim,
                bias: true,
            },
            store,
            rng,
        )?;
        {
            let w = store.get_mut(&format!("{name}.proj.w"))?;
            for out_ch in 0..cfg.attn_dim {
                w.data[out_ch * cfg.conv_channels + (out_ch % cfg.conv_channels)] += 1.0;
            }
        }
        let attn = SelfAttention::new(
            &format!("{name}.attn"),
            SelfAttentionSpec { in_dim: cfg.attn_dim, model_dim: cfg.attn_dim, heads: cfg.attn_heads },
            store,
            rng,
        )?;
        Ok(PaddBranch { cfg, conv_in, blocks, proj, attn })
    }

    /// Run the branch on a tensor already on the tape (`[T x d_in]`).
    pub fn forward_tensor(&self, sess: &mut Session, store: &ParamStore, x: TensorId) -> Result<PaddForward> {
        let shape = sess.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.cfg.d_in {
            return Err(Error::Config(format!(
                "padd branch expects [T x {}], got [{}]",
                self.cfg.d_in,
                shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            )));
        }
        let xc = sess.transpose(x)?; // [d_in x T]
        let mut h = self.conv_in.forward(sess, store, xc)?;
        for block in &self.blocks {
            h = block.forward(sess, store, h)?;
        }
        let p = self.proj.forward(sess, store, h)?;
        let h_add = sess.transpose(p)?; // [T x D]
        let (attended, attn) = self.attn.forward(sess, store, h_add)?;
        Ok(PaddForward { h: h_add, attn, attended })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: &FrameFeatures) -> Result<PaddForward> {
        if x.d != self.cfg.d_in {
            return Err(Error::Config(format!(
                "padd branch configured for d_in={}, features have d={}",
                self.cfg.d_in, x.d
            )));
        }
        let input = sess.input(x.data.clone(), vec![x.t, x.d])?;
        self.forward_tensor(sess, store, input)
    }
}
