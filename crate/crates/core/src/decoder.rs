//! Style-conditioned decoders: `w` to a sample.
//!
//! * [`DecoderConfig::Point`]: an MLP whose hidden layers are modulated by
//!   vector AdaIN, for planar datasets.
//! * [`DecoderConfig::MicroImage`]: a learned 2×2 constant map grown to an
//!   8×8 RGB image by three conv + AdaIN stages with nearest-neighbour
//!   upsampling in between.
//! * [`DecoderConfig::Affine`]: `x = w·A + b`.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::params::{Init, ParamSet};
use crate::rng::{self, Stream};
use crate::tensor::{DiffTensor, Real, Tape, TensorError};

/// LayerNorm epsilon used by AdaIN.
pub const ADAIN_EPS: f64 = 1e-5;

/// Side length of micro images.
pub const IMAGE_SIDE: usize = 8;
/// Flattened length of a micro image (`3 × 8 × 8`, channel-major).
pub const IMAGE_LEN: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;

const STAGES: usize = 3;

fn default_hidden() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_channels() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderConfig {
    Point {
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_layers")]
        layers: usize,
    },
    MicroImage {
        #[serde(default = "default_channels")]
        channels: usize,
        /// Per-pixel noise injection with learned per-channel strength.
        #[serde(default)]
        noise: bool,
    },
    Affine,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::Point {
            hidden: default_hidden(),
            layers: default_layers(),
        }
    }
}

/// A decoder bound to its input width `d` and output width.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub d: usize,
    pub out_dim: usize,
}

/// Vector AdaIN: standardise each row of `x [B, F]` over its features, then
/// apply per-feature `scale`, `shift` (both `[B, F]`).
pub fn adain_vector<T: Real>(
    tape: &Tape<T>,
    x: &DiffTensor<T>,
    scale: &DiffTensor<T>,
    shift: &DiffTensor<T>,
) -> Result<DiffTensor<T>, ModelError> {
    if x.shape() != scale.shape() || x.shape() != shift.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "adain_vector",
            lhs: x.shape().to_vec(),
            rhs: scale.shape().to_vec(),
        }
        .into());
    }
    let n = tape.layer_norm(x, ADAIN_EPS)?;
    Ok(tape.add(&tape.mul(&n, scale)?, shift)?)
}

/// Spatial AdaIN on `x [B, H, W, C]`: every channel of every sample is
/// standardised over its pixels, then scaled and shifted by `scale`,
/// `shift` (`[B, C]`).
pub fn adain_spatial<T: Real>(
    tape: &Tape<T>,
    x: &DiffTensor<T>,
    scale: &DiffTensor<T>,
    shift: &DiffTensor<T>,
) -> Result<DiffTensor<T>, ModelError> {
    let [b, h, w, c] = match *x.shape() {
        [b, h, w, c] => [b, h, w, c],
        _ => {
            return Err(TensorError::InvalidShape {
                op: "adain_spatial",
                shape: x.shape().to_vec(),
                reason: "expected [batch, height, width, channels]".into(),
            }
            .into())
        }
    };
    if scale.shape() != [b, c] || shift.shape() != [b, c] {
        return Err(TensorError::ShapeMismatch {
            op: "adain_spatial",
            lhs: vec![b, c],
            rhs: scale.shape().to_vec(),
        }
        .into());
    }
    let per_channel = tape.transpose(&tape.reshape(x, &[b, h * w, c])?)?;
    let rows = tape.reshape(&per_channel, &[b * c, h * w])?;
    let n = tape.layer_norm(&rows, ADAIN_EPS)?;
    let y = tape.row_add(&tape.row_mul(&n, &tape.reshape(scale, &[b * c])?)?, &tape.reshape(shift, &[b * c])?)?;
    let y = tape.transpose(&tape.reshape(&y, &[b, c, h * w])?)?;
    Ok(tape.reshape(&y, &[b, h, w, c])?)
}

/// `(scale, shift)` from the style affine `w·S + s`, each `[B, width]`.
fn style<T: Real>(
    tape: &Tape<T>,
    p: &ParamSet<T>,
    prefix: &str,
    w: &DiffTensor<T>,
    width: usize,
) -> Result<(DiffTensor<T>, DiffTensor<T>), ModelError> {
    let st = tape.linear(w, p.get(&format!("{prefix}.style.w"))?, Some(p.get(&format!("{prefix}.style.b"))?))?;
    Ok((tape.slice_last(&st, 0, width)?, tape.slice_last(&st, width, width)?))
}

fn init_style(init: &mut Init<'_>, ps: &mut ParamSet, prefix: &str, d: usize, width: usize) {
    ps.insert(format!("{prefix}.style.w"), init.weight(d, 2 * width));
    let bias: Vec<f32> = (0..2 * width).map(|i| if i < width { 1.0 } else { 0.0 }).collect();
    ps.insert(
        format!("{prefix}.style.b"),
        DiffTensor::new(&[2 * width], bias).expect("style bias"),
    );
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, d: usize, out_dim: usize) -> Result<Self, ModelError> {
        match &cfg {
            DecoderConfig::Point { hidden, layers } => {
                if *hidden == 0 {
                    return Err(ModelError::config("hidden", "must be at least 1"));
                }
                if *layers == 0 {
                    return Err(ModelError::config("layers", "must be at least 1"));
                }
            }
            DecoderConfig::MicroImage { channels, .. } => {
                if *channels == 0 {
                    return Err(ModelError::config("channels", "must be at least 1"));
                }
                if out_dim != IMAGE_LEN {
                    return Err(ModelError::config(
                        "kind",
                        format!("micro_image emits {IMAGE_LEN} values but the data has {out_dim}"),
                    ));
                }
            }
            DecoderConfig::Affine => {}
        }
        if d == 0 || out_dim == 0 {
            return Err(ModelError::config("kind", "input and output widths must be positive"));
        }
        Ok(Self { cfg, d, out_dim })
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.d;
        match self.cfg {
            DecoderConfig::Point { hidden, layers } => {
                let mut n = 0;
                for i in 0..layers {
                    let fan_in = if i == 0 { d } else { hidden };
                    n += fan_in * hidden + hidden + d * 2 * hidden + 2 * hidden;
                }
                n + hidden * self.out_dim + self.out_dim
            }
            DecoderConfig::MicroImage { channels: c, noise } => {
                let stage = 9 * c * c + c + d * 2 * c + 2 * c + if noise { c } else { 0 };
                4 * c + STAGES * stage + 3 * c + 3
            }
            DecoderConfig::Affine => d * self.out_dim + self.out_dim,
        }
    }

    pub(crate) fn init(&self, init: &mut Init<'_>, ps: &mut ParamSet) {
        let d = self.d;
        match self.cfg {
            DecoderConfig::Point { hidden, layers } => {
                for i in 0..layers {
                    let fan_in = if i == 0 { d } else { hidden };
                    ps.insert(format!("decoder.l{i}.w"), init.weight(fan_in, hidden));
                    ps.insert(format!("decoder.l{i}.b"), init.zeros(&[hidden]));
                    init_style(init, ps, &format!("decoder.l{i}"), d, hidden);
                }
                ps.insert("decoder.out.w", init.weight(hidden, self.out_dim));
                ps.insert("decoder.out.b", init.zeros(&[self.out_dim]));
            }
            DecoderConfig::MicroImage { channels: c, noise } => {
                ps.insert("decoder.const", init.normal(&[2, 2, c], 1.0));
                for i in 0..STAGES {
                    ps.insert(format!("decoder.s{i}.conv.w"), init.weight(9 * c, c));
                    ps.insert(format!("decoder.s{i}.conv.b"), init.zeros(&[c]));
                    init_style(init, ps, &format!("decoder.s{i}"), d, c);
                    if noise {
                        ps.insert(format!("decoder.s{i}.noise"), init.zeros(&[c]));
                    }
                }
                ps.insert("decoder.rgb.w", init.weight(c, 3));
                ps.insert("decoder.rgb.b", init.zeros(&[3]));
            }
            DecoderConfig::Affine => {
                ps.insert("decoder.w", init.weight(d, self.out_dim));
                ps.insert("decoder.b", init.zeros(&[self.out_dim]));
            }
        }
    }

    /// Decodes `w [B, d]` to `[B, out_dim]`.
    pub fn forward<T: Real>(&self, tape: &Tape<T>, p: &ParamSet<T>, w: &DiffTensor<T>) -> Result<DiffTensor<T>, ModelError> {
        if w.rank() != 2 || w.shape()[1] != self.d {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: w.shape().to_vec(),
                rhs: vec![w.shape()[0], self.d],
            }
            .into());
        }
        let out = match self.cfg {
            DecoderConfig::Point { hidden, layers } => self.point(tape, p, w, hidden, layers)?,
            DecoderConfig::MicroImage { channels, noise } => self.micro_image(tape, p, w, channels, noise)?,
            DecoderConfig::Affine => tape.linear(w, p.get("decoder.w")?, Some(p.get("decoder.b")?))?,
        };
        if let Some(i) = out.first_non_finite() {
            return Err(ModelError::NonFinite {
                stage: "decoder",
                step: i / self.out_dim,
            });
        }
        Ok(out)
    }

    fn point<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &ParamSet<T>,
        w: &DiffTensor<T>,
        hidden: usize,
        layers: usize,
    ) -> Result<DiffTensor<T>, ModelError> {
        let mut h = w.clone();
        for i in 0..layers {
            let y = tape.linear(&h, p.get(&format!("decoder.l{i}.w"))?, Some(p.get(&format!("decoder.l{i}.b"))?))?;
            let (scale, shift) = style(tape, p, &format!("decoder.l{i}"), w, hidden)?;
            h = tape.gelu(&adain_vector(tape, &y, &scale, &shift)?)?;
        }
        Ok(tape.linear(&h, p.get("decoder.out.w")?, Some(p.get("decoder.out.b")?))?)
    }

    fn micro_image<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &ParamSet<T>,
        w: &DiffTensor<T>,
        c: usize,
        noise: bool,
    ) -> Result<DiffTensor<T>, ModelError> {
        let b = w.shape()[0];
        let mut x = tape.repeat(p.get("decoder.const")?, b)?;
        let mut side = 2;
        for i in 0..STAGES {
            if i > 0 {
                x = tape.upsample2x(&x)?;
                side *= 2;
            }
            let cols = tape.im2col3x3(&x)?;
            let y = tape.linear(
                &cols,
                p.get(&format!("decoder.s{i}.conv.w"))?,
                Some(p.get(&format!("decoder.s{i}.conv.b"))?),
            )?;
            let mut y = tape.reshape(&y, &[b, side, side, c])?;
            if noise {
                y = add_noise(tape, p, &format!("decoder.s{i}.noise"), &y, w, i)?;
            }
            let (scale, shift) = style(tape, p, &format!("decoder.s{i}"), w, c)?;
            x = tape.gelu(&adain_spatial(tape, &y, &scale, &shift)?)?;
        }
        let flat = tape.reshape(&x, &[b * side * side, c])?;
        let rgb = tape.linear(&flat, p.get("decoder.rgb.w")?, Some(p.get("decoder.rgb.b")?))?;
        let chw = tape.transpose(&tape.reshape(&rgb, &[b, side * side, 3])?)?;
        Ok(tape.reshape(&chw, &[b, IMAGE_LEN])?)
    }
}

/// Adds `strength[c] · n` with `n ~ N(0, 1)` per pixel. The noise is keyed by
/// the bits of each sample's style vector, so a given `w` always sees the
/// same noise and the decoder stays a deterministic function.
fn add_noise<T: Real>(
    tape: &Tape<T>,
    p: &ParamSet<T>,
    name: &str,
    y: &DiffTensor<T>,
    w: &DiffTensor<T>,
    stage: usize,
) -> Result<DiffTensor<T>, ModelError> {
    let &[b, h, wd, c] = y.shape() else {
        unreachable!("stage output is rank 4")
    };
    let mut vals = Vec::with_capacity(b * h * wd);
    for row in w.values().chunks_exact(w.shape()[1]) {
        let key = row.iter().fold(0xcbf2_9ce4_8422_2325u64 ^ stage as u64, |acc, v| {
            (acc ^ v.as_f64().to_bits()).wrapping_mul(0x100_0000_01b3)
        });
        vals.extend(
            rng::normal_vec(key, Stream::Noise, stage as u64, h * wd)
                .into_iter()
                .map(T::from_f64),
        );
    }
    // [B·H·W, 1] noise times [1, C] strength broadcasts through a matmul.
    let n = DiffTensor::new(&[b * h * wd, 1], vals)?;
    let strength = tape.reshape(p.get(name)?, &[1, c])?;
    let scaled = tape.reshape(&tape.matmul(&n, &strength)?, &[b, h, wd, c])?;
    Ok(tape.add(y, &scaled)?)
}
