//! The shared block applied at every recursion step.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::params::{Init, ParamSet};
use crate::tensor::{DiffTensor, Real, Tape, TensorError};

/// RMSNorm epsilon inside the block.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Gated MLP across the token axis, then across channels.
    #[default]
    TokenMixer,
    /// Multi-head self-attention across tokens, then the channel MLP.
    SelfAttention,
}

/// Shape of one shared block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockShape {
    pub kind: BlockKind,
    pub s: usize,
    pub d_h: usize,
    pub expansion: f64,
    pub heads: usize,
}

pub(crate) fn hidden(dim: usize, expansion: f64) -> usize {
    ((dim as f64 * expansion).round() as usize).max(1)
}

impl BlockShape {
    fn token_hidden(&self) -> usize {
        hidden(self.s, self.expansion)
    }

    fn channel_hidden(&self) -> usize {
        hidden(self.d_h, self.expansion)
    }

    pub fn parameter_count(&self) -> usize {
        let mix = match self.kind {
            BlockKind::TokenMixer => 3 * self.s * self.token_hidden(),
            BlockKind::SelfAttention => 4 * self.d_h * self.d_h,
        };
        mix + 3 * self.d_h * self.channel_hidden()
    }

    pub(crate) fn init(&self, init: &mut Init<'_>, ps: &mut ParamSet, prefix: &str) {
        match self.kind {
            BlockKind::TokenMixer => {
                let (s, hs) = (self.s, self.token_hidden());
                ps.insert(format!("{prefix}tok.gate"), init.weight(s, hs));
                ps.insert(format!("{prefix}tok.up"), init.weight(s, hs));
                ps.insert(format!("{prefix}tok.down"), init.weight(hs, s));
            }
            BlockKind::SelfAttention => {
                for name in ["q", "k", "v", "o"] {
                    ps.insert(format!("{prefix}attn.{name}"), init.weight(self.d_h, self.d_h));
                }
            }
        }
        let (c, hc) = (self.d_h, self.channel_hidden());
        ps.insert(format!("{prefix}ch.gate"), init.weight(c, hc));
        ps.insert(format!("{prefix}ch.up"), init.weight(c, hc));
        ps.insert(format!("{prefix}ch.down"), init.weight(hc, c));
    }

    /// `f(Z, ctx)` on `[B, s, d_h]` token grids.
    pub fn apply<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &ParamSet<T>,
        prefix: &str,
        z: &DiffTensor<T>,
        ctx: &DiffTensor<T>,
    ) -> Result<DiffTensor<T>, ModelError> {
        if z.shape() != ctx.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "shared_block",
                lhs: z.shape().to_vec(),
                rhs: ctx.shape().to_vec(),
            }
            .into());
        }
        let b = match z.shape() {
            &[b, s, d] if s == self.s && d == self.d_h => b,
            other => {
                return Err(TensorError::InvalidShape {
                    op: "shared_block",
                    shape: other.to_vec(),
                    reason: format!("expected [batch, {}, {}]", self.s, self.d_h),
                }
                .into())
            }
        };
        let u = tape.add(z, ctx)?;
        let mixed = match self.kind {
            BlockKind::TokenMixer => self.token_mix(tape, p, prefix, &u, b)?,
            BlockKind::SelfAttention => self.attention(tape, p, prefix, &u, b)?,
        };
        let a = tape.rms_norm(&tape.add(&u, &mixed)?, RMS_EPS)?;
        let flat = tape.reshape(&a, &[b * self.s, self.d_h])?;
        let ch = gated_mlp(tape, p, &format!("{prefix}ch"), &flat)?;
        let ch = tape.reshape(&ch, &[b, self.s, self.d_h])?;
        Ok(tape.rms_norm(&tape.add(&a, &ch)?, RMS_EPS)?)
    }

    fn token_mix<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &ParamSet<T>,
        prefix: &str,
        u: &DiffTensor<T>,
        b: usize,
    ) -> Result<DiffTensor<T>, ModelError> {
        let t = tape.transpose(u)?;
        let rows = tape.reshape(&t, &[b * self.d_h, self.s])?;
        let y = gated_mlp(tape, p, &format!("{prefix}tok"), &rows)?;
        let y = tape.reshape(&y, &[b, self.d_h, self.s])?;
        Ok(tape.transpose(&y)?)
    }

    fn attention<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &ParamSet<T>,
        prefix: &str,
        u: &DiffTensor<T>,
        b: usize,
    ) -> Result<DiffTensor<T>, ModelError> {
        let (s, d) = (self.s, self.d_h);
        let flat = tape.reshape(u, &[b * s, d])?;
        let proj = |name: &str| -> Result<DiffTensor<T>, ModelError> {
            let y = tape.matmul(&flat, p.get(&format!("{prefix}attn.{name}"))?)?;
            Ok(tape.reshape(&y, &[b, s, d])?)
        };
        let (q, k, v) = (proj("q")?, proj("k")?, proj("v")?);
        let dk = d / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_last(&q, h * dk, dk)?;
            let kh = tape.slice_last(&k, h * dk, dk)?;
            let vh = tape.slice_last(&v, h * dk, dk)?;
            let scores = tape.scale(&tape.bmm(&qh, &tape.transpose(&kh)?)?, 1.0 / (dk as f64).sqrt())?;
            let att = tape.softmax(&scores)?;
            heads.push(tape.bmm(&att, &vh)?);
        }
        let refs: Vec<&DiffTensor<T>> = heads.iter().collect();
        let cat = tape.reshape(&tape.concat(&refs)?, &[b * s, d])?;
        let out = tape.matmul(&cat, p.get(&format!("{prefix}attn.o"))?)?;
        Ok(tape.reshape(&out, &[b, s, d])?)
    }
}

/// `silu(x·W_gate) ⊙ (x·W_up) · W_down` on rows of `x`.
pub(crate) fn gated_mlp<T: Real>(tape: &Tape<T>, p: &ParamSet<T>, prefix: &str, x: &DiffTensor<T>) -> Result<DiffTensor<T>, ModelError> {
    let gate = tape.silu(&tape.matmul(x, p.get(&format!("{prefix}.gate"))?)?)?;
    let up = tape.matmul(x, p.get(&format!("{prefix}.up"))?)?;
    Ok(tape.matmul(&tape.mul(&gate, &up)?, p.get(&format!("{prefix}.down"))?)?)
}
