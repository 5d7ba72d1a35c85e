//! Attention aggregation between the two branches.
//!
//! Attention Fusion gates the two attended embeddings into one convex
//! combination per frame; Attention Transfer aligns the student attention map
//! with the (detached) teacher map through a KL auxiliary loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::TensorId;
use crate::params::{ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// One gate value per frame, broadcast across the feature dimension.
    PerFrameScalar,
    /// One gate value per frame and feature dimension.
    PerDimension,
}

impl Default for GateMode {
    fn default() -> Self {
        GateMode::PerFrameScalar
    }
}

/// Sigmoid fusion gate over the concatenated attended embeddings.
/// `g = 1` relies fully on the student embedding, `g = 0` on the teacher's.
#[derive(Debug, Clone)]
pub struct FusionGate {
    name: String,
    pub dim: usize,
    pub mode: GateMode,
}

impl FusionGate {
    pub fn new<R: Rng>(name: &str, dim: usize, mode: GateMode, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let out = match mode {
            GateMode::PerFrameScalar => 1,
            GateMode::PerDimension => dim,
        };
        let bound = 1.0 / (2.0 * dim as f64).sqrt();
        store.register_uniform(&format!("{name}.w"), vec![2 * dim, out], bound, rng)?;
        store.register_const(&format!("{name}.b"), vec![1, out], 0.0)?;
        Ok(FusionGate { name: name.to_string(), dim, mode })
    }

    /// `(h_fused, g)` where `h_fused = g ⊙ h_add + (1-g) ⊙ h_ner`.
    pub fn fuse(
        &self,
        sess: &mut Session,
        store: &ParamStore,
        h_add: TensorId,
        h_ner: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let (sa, sb) = (sess.tape.shape(h_add).to_vec(), sess.tape.shape(h_ner).to_vec());
        if sa != sb || sa.len() != 2 || sa[1] != self.dim {
            return Err(Error::Dim(format!(
                "fusion inputs must both be [T x {}], got [{}] and [{}]",
                self.dim,
                sa.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
                sb.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            )));
        }
        let w = sess.param(store, &format!("{}.w", self.name))?;
        let b = sess.param(store, &format!("{}.b", self.name))?;
        let cat = sess.concat_cols(h_add, h_ner)?;
        let z = sess.matmul(cat, w)?;
        let z = sess.add_row(z, b)?;
        let g = sess.sigmoid(z);
        let fused = match self.mode {
            GateMode::PerFrameScalar => {
                let ga = sess.mul_col(h_add, g)?;
                let neg = sess.scale(g, -1.0);
                let one_minus = sess.add_scalar(neg, 1.0);
                let gn = sess.mul_col(h_ner, one_minus)?;
                sess.add(ga, gn)?
            }
            GateMode::PerDimension => {
                let ga = sess.mul(h_add, g)?;
                let neg = sess.scale(g, -1.0);
                let one_minus = sess.add_scalar(neg, 1.0);
                let gn = sess.mul(h_ner, one_minus)?;
                sess.add(ga, gn)?
            }
        };
        Ok((fused, g))
    }
}

/// How the `T x T` maps are reduced to the KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowReduction {
    /// Row-wise KL averaged over query rows.
    MeanOverQueryRows,
    /// KL between the column-mean (pooled) distributions of the two maps.
    PooledColumnMean,
}

impl Default for RowReduction {
    fn default() -> Self {
        RowReduction::MeanOverQueryRows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub lambda_kl: f64,
    pub epsilon_clamp: f64,
    pub row_reduction: RowReduction,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { lambda_kl: 0.3, epsilon_clamp: 1e-10, row_reduction: RowReduction::MeanOverQueryRows }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0) {
            return Err(Error::Config(format!("lambda_kl must be >= 0, got {}", self.lambda_kl)));
        }
        if !(self.epsilon_clamp > 0.0) {
            return Err(Error::Config(format!("epsilon_clamp must be > 0, got {}", self.epsilon_clamp)));
        }
        Ok(())
    }
}

fn check_row_stochastic(sess: &Session, map: TensorId, who: &str) -> Result<usize> {
    let shape = sess.tape.shape(map);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Contract(format!(
            "{who} attention map must be square, got [{}]",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        )));
    }
    let t = shape[0];
    let v = sess.tape.value(map);
    for row in 0..t {
        let s: f64 = v[row * t..(row + 1) * t].iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "{who} attention row {row} sums to {s}, expected 1"
            )));
        }
        if v[row * t..(row + 1) * t].iter().any(|p| *p < 0.0) {
            return Err(Error::Contract(format!("{who} attention row {row} has negative entries")));
        }
    }
    Ok(t)
}

fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// KL divergence `KL(alpha_ner || alpha_add)` pulling the student map toward
/// the teacher map. The teacher map is detached inside, so gradient flows only
/// into `alpha_add`; the student entries are clamped below by
/// `cfg.epsilon_clamp` inside the log.
pub fn attention_transfer_loss(
    sess: &mut Session,
    alpha_ner: TensorId,
    alpha_add: TensorId,
    cfg: &TransferConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    let t_ner = check_row_stochastic(sess, alpha_ner, "teacher")?;
    let t_add = check_row_stochastic(sess, alpha_add, "student")?;
    if t_ner != t_add {
        return Err(Error::Contract(format!(
            "attention maps have different lengths: teacher T={t_ner}, student T={t_add}"
        )));
    }
    let t = t_ner;
    match cfg.row_reduction {
        RowReduction::MeanOverQueryRows => {
            let teacher_vals = sess.tape.value(alpha_ner).to_vec();
            let teacher = sess.input(teacher_vals.clone(), vec![t, t])?;
            // constant teacher entropy term, same summation order as the tape
            let mut entropy = 0.0;
            for v in &teacher_vals {
                entropy += xlnx(*v);
            }
            let clamped = sess.clamp_min(alpha_add, cfg.epsilon_clamp);
            let lb = sess.log(clamped)?;
            let cross = sess.mul(teacher, lb)?;
            let s = sess.sum_all(cross);
            let neg = sess.scale(s, -1.0 / t as f64);
            Ok(sess.add_scalar(neg, entropy / t as f64))
        }
        RowReduction::PooledColumnMean => {
            let teacher_vals = sess.tape.value(alpha_ner).to_vec();
            let mut pooled = vec![0.0; t];
            for row in 0..t {
                for j in 0..t {
                    pooled[j] += teacher_vals[row * t + j];
                }
            }
            for p in pooled.iter_mut() {
                *p /= t as f64;
            }
            let entropy: f64 = pooled.iter().map(|p| xlnx(*p)).sum();
            let teacher = sess.input(pooled, vec![1, t])?;
            let student_pooled = sess.mean_rows(alpha_add);
            let clamped = sess.clamp_min(student_pooled, cfg.epsilon_clamp);
            let lb = sess.log(clamped)?;
            let cross = sess.mul(teacher, lb)?;
            let s = sess.sum_all(cross);
            let neg = sess.scale(s, -1.0);
            Ok(sess.add_scalar(neg, entropy))
        }
    }
}

/// `L = L_CE + lambda_kl * L_KL`. Non-finite inputs abort training.
pub fn total_loss(sess: &mut Session, l_ce: TensorId, l_kl: TensorId, lambda_kl: f64) -> Result<TensorId> {
    for (name, l) in [("cross-entropy", l_ce), ("transfer", l_kl)] {
        let v = sess.tape.value(l)[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    if !(lambda_kl >= 0.0) {
        return Err(Error::Config(format!("lambda_kl must be >= 0, got {lambda_kl}")));
    }
    let weighted = sess.scale(l_kl, lambda_kl);
    sess.add(l_ce, weighted)
}
