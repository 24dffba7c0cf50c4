//! A mapper paired with a decoder: latent `z` to sample `x` in one pass.

use rayon::prelude::*;

use crate::decoder::{Decoder, DecoderConfig};
use crate::error::ModelError;
use crate::mapper::{GradScope, MapperConfig};
use crate::params::{Init, ParamSet};
use crate::rng::{self, Stream};
use crate::tensor::{DiffTensor, Real, Tape};

/// Rows per worker chunk in gradient-free batch evaluation.
const CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct GeneratorOutput<T: Real = f32> {
    pub x: DiffTensor<T>,
    pub w: DiffTensor<T>,
    pub block_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub mapper: MapperConfig,
    pub decoder: Decoder,
}

impl Generator {
    pub fn new(mapper: MapperConfig, decoder: DecoderConfig, out_dim: usize) -> Result<Self, ModelError> {
        mapper.validate()?;
        let decoder = Decoder::new(decoder, mapper.d(), out_dim)?;
        Ok(Self { mapper, decoder })
    }

    pub fn latent_dim(&self) -> usize {
        self.mapper.d()
    }

    pub fn out_dim(&self) -> usize {
        self.decoder.out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.mapper.parameter_count() + self.decoder.parameter_count()
    }

    /// Fresh parameters drawn from the `Init` stream of `seed`.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut r = rng::keyed(seed, Stream::Init, 0);
        let mut init = Init { rng: &mut r };
        let mut ps = ParamSet::new();
        self.mapper.init(&mut init, &mut ps);
        self.decoder.init(&mut init, &mut ps);
        ps
    }

    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &ParamSet<T>,
        z: &DiffTensor<T>,
        h_override: Option<usize>,
        scope: GradScope,
    ) -> Result<GeneratorOutput<T>, ModelError> {
        let m = self.mapper.forward(tape, p, z, h_override, scope)?;
        let track = scope != GradScope::Inference && tape.is_active();
        let x = tape.tracking(track, || self.decoder.forward(tape, p, &m.w))?;
        Ok(GeneratorOutput {
            x,
            w: m.w,
            block_evals: m.block_evals,
        })
    }

    /// Gradient-free decoding of row-major latents `[count, d]`, fanned out
    /// over fixed-size chunks. Every row is computed independently, so the
    /// result does not depend on the chunking or the worker count.
    pub fn sample(&self, p: &ParamSet, latents: &[f32], h_override: Option<usize>) -> Result<Vec<f32>, ModelError> {
        let d = self.latent_dim();
        let chunks: Vec<Result<Vec<f32>, ModelError>> = latents
            .par_chunks(CHUNK * d)
            .map(|chunk| {
                let tape = Tape::inactive();
                let z = DiffTensor::new(&[chunk.len() / d, d], chunk.to_vec())?;
                Ok(self.forward(&tape, p, &z, h_override, GradScope::Inference)?.x.values().to_vec())
            })
            .collect();
        let mut out = Vec::with_capacity(latents.len() / d * self.out_dim());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Mapper only, gradient-free; returns `w` rows.
    pub fn map_only(&self, p: &ParamSet, latents: &[f32], h_override: Option<usize>) -> Result<Vec<f32>, ModelError> {
        let d = self.latent_dim();
        let tape = Tape::inactive();
        let z = DiffTensor::new(&[latents.len() / d, d], latents.to_vec())?;
        Ok(self
            .mapper
            .forward(&tape, p, &z, h_override, GradScope::Inference)?
            .w
            .values()
            .to_vec())
    }
}
