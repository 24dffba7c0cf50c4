//! Recursive token mapper.
//!
//! One shared block `f` is applied over `H` refinement steps of `L` inner
//! cycles each:
//!
//! ```text
//! Z0 = reshape(W_proj · pixel_norm(z) + b_proj)            [s, d_h]
//! Z_H, Z_L = carry.h, carry.l
//! repeat H times:
//!     repeat L times:  Z_L = f(Z_L, Z_H + Z0)
//!     Z_H = f(Z_H, Z_L)
//! w = W_out · flatten(Z_H) + b_out
//! ```
//!
//! so a forward pass evaluates the block `H·(L+1)` times while the parameter
//! count depends only on `(d, s, d_h)`.

use serde::{Deserialize, Serialize};

use super::block::{BlockKind, BlockShape};
use super::{pixel_norm, GradScope, MapperOutput};
use crate::error::ModelError;
use crate::params::{Init, ParamSet};
use crate::tensor::{DiffTensor, Real, Tape, TensorError};

const PREFIX: &str = "mapper.";
const BLOCK: &str = "mapper.block.";

fn default_expansion() -> f64 {
    2.0
}

fn default_heads() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RtmConfig {
    /// Latent and style width.
    pub d: usize,
    /// Token count.
    pub s: usize,
    /// Token width.
    pub d_h: usize,
    /// Refinement steps.
    #[serde(rename = "H")]
    pub h: usize,
    /// Inner cycles per refinement step.
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(default)]
    pub block: BlockKind,
    #[serde(default = "default_expansion")]
    pub expansion: f64,
    #[serde(default = "default_heads")]
    pub heads: usize,
}

impl RtmConfig {
    /// Token-mixer config with the default expansion and head count.
    pub fn new(d: usize, s: usize, d_h: usize, h: usize, l: usize) -> Self {
        Self {
            d,
            s,
            d_h,
            h,
            l,
            block: BlockKind::TokenMixer,
            expansion: default_expansion(),
            heads: default_heads(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, v) in [("d", self.d), ("s", self.s), ("d_h", self.d_h), ("H", self.h), ("L", self.l)] {
            if v == 0 {
                return Err(ModelError::config(field, "must be at least 1"));
            }
        }
        if !(self.expansion.is_finite() && self.expansion > 0.0) {
            return Err(ModelError::config("expansion", "must be a positive ratio"));
        }
        if self.block == BlockKind::SelfAttention && (self.heads == 0 || !self.d_h.is_multiple_of(self.heads)) {
            return Err(ModelError::config(
                "heads",
                format!("must be positive and divide d_h = {}", self.d_h),
            ));
        }
        Ok(())
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            kind: self.block,
            s: self.s,
            d_h: self.d_h,
            expansion: self.expansion,
            heads: self.heads,
        }
    }

    /// Number of shared-block applications in one forward pass at `h` steps.
    pub fn block_evals(&self, h: usize) -> usize {
        h * (self.l + 1)
    }

    pub fn parameter_count(&self) -> usize {
        let grid = self.s * self.d_h;
        let proj = self.d * grid + grid;
        let carries = 2 * grid;
        let readout = grid * self.d + self.d;
        proj + carries + self.block_shape().parameter_count() + readout
    }
}

/// The mapper itself; all weights live in a [`ParamSet`] under `mapper.`.
#[derive(Debug, Clone)]
pub struct Rtm {
    pub cfg: RtmConfig,
}

impl Rtm {
    pub fn new(cfg: RtmConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub(crate) fn init(&self, init: &mut Init<'_>, ps: &mut ParamSet) {
        let c = &self.cfg;
        let grid = c.s * c.d_h;
        ps.insert(format!("{PREFIX}proj.w"), init.weight(c.d, grid));
        ps.insert(format!("{PREFIX}proj.b"), init.zeros(&[grid]));
        ps.insert(format!("{PREFIX}carry.h"), init.zeros(&[c.s, c.d_h]));
        ps.insert(format!("{PREFIX}carry.l"), init.zeros(&[c.s, c.d_h]));
        self.cfg.block_shape().init(init, ps, BLOCK);
        ps.insert(format!("{PREFIX}out.w"), init.weight(grid, c.d));
        ps.insert(format!("{PREFIX}out.b"), init.zeros(&[c.d]));
    }

    /// `Z0 = reshape(z · W_proj + b_proj)` for rows of `z [B, d]`. No
    /// normalisation is applied here.
    pub fn project_to_tokens<T: Real>(&self, tape: &Tape<T>, p: &ParamSet<T>, z: &DiffTensor<T>) -> Result<DiffTensor<T>, ModelError> {
        let c = &self.cfg;
        if z.rank() != 2 || z.shape()[1] != c.d {
            return Err(TensorError::ShapeMismatch {
                op: "project_to_tokens",
                lhs: z.shape().to_vec(),
                rhs: vec![z.shape()[0], c.d],
            }
            .into());
        }
        let y = tape.linear(z, p.get("mapper.proj.w")?, Some(p.get("mapper.proj.b")?))?;
        Ok(tape.reshape(&y, &[z.shape()[0], c.s, c.d_h])?)
    }

    pub fn shared_block<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &ParamSet<T>,
        z: &DiffTensor<T>,
        ctx: &DiffTensor<T>,
    ) -> Result<DiffTensor<T>, ModelError> {
        self.cfg.block_shape().apply(tape, p, BLOCK, z, ctx)
    }

    /// Carry initial states broadcast over the batch.
    pub fn initial_carries<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &ParamSet<T>,
        batch: usize,
    ) -> Result<(DiffTensor<T>, DiffTensor<T>), ModelError> {
        Ok((
            tape.repeat(p.get("mapper.carry.h")?, batch)?,
            tape.repeat(p.get("mapper.carry.l")?, batch)?,
        ))
    }

    /// One refinement step: `L` inner updates of `Z_L`, then one of `Z_H`.
    pub fn refine_step<T: Real, F>(
        &self,
        tape: &Tape<T>,
        zh: &DiffTensor<T>,
        zl: &DiffTensor<T>,
        z0: &DiffTensor<T>,
        block: &mut F,
    ) -> Result<(DiffTensor<T>, DiffTensor<T>), ModelError>
    where
        F: FnMut(&DiffTensor<T>, &DiffTensor<T>) -> Result<DiffTensor<T>, ModelError>,
    {
        let mut zl = zl.clone();
        for _ in 0..self.cfg.l {
            let ctx = tape.add(zh, z0)?;
            zl = block(&zl, &ctx)?;
        }
        let zh = block(zh, &zl)?;
        Ok((zh, zl))
    }

    /// `w = flatten(Z_H) · W_out + b_out`.
    pub fn readout<T: Real>(&self, tape: &Tape<T>, p: &ParamSet<T>, zh: &DiffTensor<T>) -> Result<DiffTensor<T>, ModelError> {
        let c = &self.cfg;
        let flat = tape.reshape(zh, &[zh.shape()[0], c.s * c.d_h])?;
        Ok(tape.linear(&flat, p.get("mapper.out.w")?, Some(p.get("mapper.out.b")?))?)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &ParamSet<T>,
        z: &DiffTensor<T>,
        h_override: Option<usize>,
        scope: GradScope,
    ) -> Result<MapperOutput<T>, ModelError> {
        self.forward_with(tape, p, z, h_override, scope, |t, a, b| self.shared_block(t, p, a, b))
    }

    /// Forward pass with a caller-supplied block function.
    pub fn forward_with<T: Real, F>(
        &self,
        tape: &Tape<T>,
        p: &ParamSet<T>,
        z: &DiffTensor<T>,
        h_override: Option<usize>,
        scope: GradScope,
        block: F,
    ) -> Result<MapperOutput<T>, ModelError>
    where
        F: Fn(&Tape<T>, &DiffTensor<T>, &DiffTensor<T>) -> Result<DiffTensor<T>, ModelError>,
    {
        let steps = h_override.unwrap_or(self.cfg.h);
        if steps == 0 {
            return Err(ModelError::config("H", "inference override must be at least 1"));
        }
        let outer = tape.is_active();
        let record = |step: usize| match scope {
            GradScope::Inference => false,
            GradScope::FullGraph => outer,
            GradScope::ShortGradient => outer && step == steps,
        };
        let head = scope != GradScope::Inference && outer;

        let (z0, mut zh, mut zl) = tape.tracking(head, || -> Result<_, ModelError> {
            let zn = pixel_norm(tape, z)?;
            let z0 = self.project_to_tokens(tape, p, &zn)?;
            let (zh, zl) = self.initial_carries(tape, p, z.shape()[0])?;
            Ok((z0, zh, zl))
        })?;

        let mut evals = 0usize;
        let mut counted = |a: &DiffTensor<T>, b: &DiffTensor<T>| {
            evals += 1;
            block(tape, a, b)
        };
        for step in 1..=steps {
            let (h, l) = tape.tracking(record(step), || self.refine_step(tape, &zh, &zl, &z0, &mut counted))?;
            if !(h.all_finite() && l.all_finite()) {
                return Err(ModelError::NonFinite { stage: "refinement", step });
            }
            if scope == GradScope::ShortGradient && step < steps {
                zh = h.detach();
                zl = l.detach();
            } else {
                zh = h;
                zl = l;
            }
        }
        let w = tape.tracking(head, || self.readout(tape, p, &zh))?;
        if !w.all_finite() {
            return Err(ModelError::NonFinite {
                stage: "readout",
                step: steps,
            });
        }
        Ok(MapperOutput { w, block_evals: evals })
    }
}
