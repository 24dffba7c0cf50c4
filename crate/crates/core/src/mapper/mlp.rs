use serde::{Deserialize, Serialize};

use super::pixel_norm;
use crate::error::ModelError;
use crate::params::{Init, ParamSet};
use crate::tensor::{DiffTensor, Real, Tape};

/// Slope of the baseline mapper's LeakyReLU.
pub const LRELU_SLOPE: f64 = 0.2;

/// Feed-forward mapper: PixelNorm, then `depth` × (FC + LeakyReLU).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub d: usize,
    pub depth: usize,
    /// Hidden width; defaults to `d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

impl MlpConfig {
    pub fn new(d: usize, depth: usize) -> Self {
        Self { d, depth, width: None }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 {
            return Err(ModelError::config("d", "must be at least 1"));
        }
        if self.depth == 0 {
            return Err(ModelError::config("depth", "must be at least 1"));
        }
        if self.width == Some(0) {
            return Err(ModelError::config("width", "must be at least 1"));
        }
        Ok(())
    }

    /// `(in, out)` of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let w = self.width.unwrap_or(self.d);
        (0..self.depth)
            .map(|i| {
                let fan_in = if i == 0 { self.d } else { w };
                let fan_out = if i + 1 == self.depth { self.d } else { w };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub(crate) fn init(&self, init: &mut Init<'_>, ps: &mut ParamSet) {
        for (i, (fi, fo)) in self.layer_dims().into_iter().enumerate() {
            ps.insert(format!("mapper.fc{i}.w"), init.weight(fi, fo));
            ps.insert(format!("mapper.fc{i}.b"), init.zeros(&[fo]));
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, p: &ParamSet<T>, z: &DiffTensor<T>) -> Result<DiffTensor<T>, ModelError> {
        let mut x = pixel_norm(tape, z)?;
        for i in 0..self.depth {
            let y = tape.linear(&x, p.get(&format!("mapper.fc{i}.w"))?, Some(p.get(&format!("mapper.fc{i}.b"))?))?;
            x = tape.leaky_relu(&y, LRELU_SLOPE)?;
        }
        if !x.all_finite() {
            return Err(ModelError::NonFinite {
                stage: "mlp",
                step: self.depth,
            });
        }
        Ok(x)
    }
}
