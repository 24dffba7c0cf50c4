//! Mapping networks: noise `z` to style vector `w`.

mod block;
mod mlp;
mod rtm;

use serde::{Deserialize, Serialize};

pub use block::{BlockKind, BlockShape, RMS_EPS};
pub use mlp::{MlpConfig, LRELU_SLOPE};
pub use rtm::{Rtm, RtmConfig};

use crate::error::ModelError;
use crate::params::{Init, ParamSet};
use crate::tensor::{DiffTensor, Real, Tape};

/// Epsilon of [`pixel_norm`].
pub const PIXEL_NORM_EPS: f64 = 1e-8;

/// `z / sqrt(mean(z²) + ε)` over each row.
pub fn pixel_norm<T: Real>(tape: &Tape<T>, z: &DiffTensor<T>) -> Result<DiffTensor<T>, ModelError> {
    Ok(tape.rms_norm(z, PIXEL_NORM_EPS)?)
}

/// Which part of the recursion is recorded for differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Nothing is recorded.
    Inference,
    /// Only the final refinement step (plus projection and readout) is
    /// recorded; earlier steps run untracked and their carries are detached.
    ShortGradient,
    /// Every step is recorded.
    FullGraph,
}

#[derive(Debug, Clone)]
pub struct MapperOutput<T: Real = f32> {
    /// Style vectors, `[B, d]`.
    pub w: DiffTensor<T>,
    /// Number of shared-block (or layer) applications performed.
    pub block_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityConfig {
    pub d: usize,
}

/// Mapper choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapperConfig {
    Rtm(RtmConfig),
    Mlp(MlpConfig),
    /// `w = z`; pairs with the affine decoder for sanity runs.
    Identity(IdentityConfig),
}

impl MapperConfig {
    pub fn d(&self) -> usize {
        match self {
            Self::Rtm(c) => c.d,
            Self::Mlp(c) => c.d,
            Self::Identity(c) => c.d,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Self::Rtm(c) => c.validate(),
            Self::Mlp(c) => c.validate(),
            Self::Identity(c) if c.d == 0 => Err(ModelError::config("d", "must be at least 1")),
            Self::Identity(_) => Ok(()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Self::Rtm(c) => c.parameter_count(),
            Self::Mlp(c) => c.parameter_count(),
            Self::Identity(_) => 0,
        }
    }

    /// Sequential transformations of `z` per forward pass.
    pub fn sequential_depth(&self) -> usize {
        match self {
            Self::Rtm(c) => c.block_evals(c.h),
            Self::Mlp(c) => c.depth,
            Self::Identity(_) => 0,
        }
    }

    /// Short label used in tables, e.g. `RTM(16,1)` or `MLP-32`.
    pub fn label(&self) -> String {
        match self {
            Self::Rtm(c) => format!("RTM({},{})", c.h, c.l),
            Self::Mlp(c) => format!("MLP-{}", c.depth),
            Self::Identity(_) => "identity".into(),
        }
    }

    pub(crate) fn init(&self, init: &mut Init<'_>, ps: &mut ParamSet) {
        match self {
            Self::Rtm(c) => Rtm { cfg: c.clone() }.init(init, ps),
            Self::Mlp(c) => c.init(init, ps),
            Self::Identity(_) => {}
        }
    }

    /// Maps `z [B, d]` to `w [B, d]`. `h_override` only affects the RTM.
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &ParamSet<T>,
        z: &DiffTensor<T>,
        h_override: Option<usize>,
        scope: GradScope,
    ) -> Result<MapperOutput<T>, ModelError> {
        match self {
            Self::Rtm(c) => Rtm { cfg: c.clone() }.forward(tape, p, z, h_override, scope),
            Self::Mlp(c) => {
                let track = scope != GradScope::Inference && tape.is_active();
                let w = tape.tracking(track, || c.forward(tape, p, z))?;
                Ok(MapperOutput { w, block_evals: c.depth })
            }
            Self::Identity(_) => Ok(MapperOutput {
                w: z.clone(),
                block_evals: 0,
            }),
        }
    }
}

/// Outcome of [`gradient_scope_check`].
#[derive(Debug, Clone)]
pub struct ScopeReport {
    /// Parameter names whose gradients differ in at least one bit.
    pub mismatched: Vec<String>,
    /// Whether the style vectors of both passes agree bitwise.
    pub outputs_equal: bool,
}

impl ScopeReport {
    pub fn passed(&self) -> bool {
        self.outputs_equal && self.mismatched.is_empty()
    }
}

fn squared_loss<T: Real>(tape: &Tape<T>, w: &DiffTensor<T>) -> Result<DiffTensor<T>, ModelError> {
    Ok(tape.sum(&tape.mul(w, w)?)?)
}

/// Checks that the short-gradient forward differentiates exactly the final
/// refinement step.
///
/// The gradient of `Σ w²` under [`GradScope::ShortGradient`] is compared
/// bit for bit against a replay that runs the first `H − 1` steps on an
/// inactive tape, treats the resulting carries as constants, and records
/// only the last step.
pub fn gradient_scope_check<T: Real>(rtm: &Rtm, params: &ParamSet<T>, z: &DiffTensor<T>) -> Result<ScopeReport, ModelError> {
    let steps = rtm.cfg.h;
    if steps < 2 {
        return Err(ModelError::config("H", "the scope check needs at least two refinement steps"));
    }

    let tape = Tape::new();
    let p = params.on_tape(&tape);
    let out = rtm.forward(&tape, &p, z, None, GradScope::ShortGradient)?;
    let grads = tape.backward(&squared_loss(&tape, &out.w)?)?;

    let quiet = Tape::inactive();
    let z0 = rtm.project_to_tokens(&quiet, params, &pixel_norm(&quiet, z)?)?;
    let (mut zh, mut zl) = rtm.initial_carries(&quiet, params, z.shape()[0])?;
    let mut block = |a: &DiffTensor<T>, b: &DiffTensor<T>| rtm.shared_block(&quiet, params, a, b);
    for _ in 1..steps {
        (zh, zl) = rtm.refine_step(&quiet, &zh, &zl, &z0, &mut block)?;
    }

    let replay = Tape::new();
    let rp = params.on_tape(&replay);
    let z0 = rtm.project_to_tokens(&replay, &rp, &pixel_norm(&replay, z)?)?;
    let mut block = |a: &DiffTensor<T>, b: &DiffTensor<T>| rtm.shared_block(&replay, &rp, a, b);
    let (zh, _) = rtm.refine_step(&replay, &zh, &zl, &z0, &mut block)?;
    let w = rtm.readout(&replay, &rp, &zh)?;
    let replay_grads = replay.backward(&squared_loss(&replay, &w)?)?;

    let bits = |t: &DiffTensor<T>| t.values().iter().map(|v| v.as_f64().to_bits()).collect::<Vec<_>>();
    let mismatched = p
        .iter()
        .filter(|(name, leaf)| {
            let a = grads.wrt_or_zero(leaf);
            let b = replay_grads.wrt_or_zero(rp.get(name).expect("same names"));
            bits(&a) != bits(&b)
        })
        .map(|(name, _)| name.to_string())
        .collect();
    Ok(ScopeReport {
        mismatched,
        outputs_equal: bits(&out.w) == bits(&w),
    })
}

#[cfg(test)]
mod tests;
