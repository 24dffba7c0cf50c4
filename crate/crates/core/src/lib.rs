//! Recursive token mapper (RTM) generators trained with IMLE and RS-IMLE.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors on a reverse-mode tape.
//! * [`mapper`]: noise-to-style networks, the weight-tied [`mapper::Rtm`] and
//!   the plain [`mapper::MlpConfig`] baseline.
//! * [`decoder`]: AdaIN-modulated decoders for points and micro images.
//! * [`imle`]: pool sampling, rejection, nearest-neighbour matching and the
//!   training loop.
//! * [`metrics`]: k-NN precision/recall/density/coverage, FID and mode
//!   coverage.
//! * [`data`]: synthetic datasets with known modes.
//! * [`harness`]: configs, checkpoints and experiment commands.
//!
//! ```
//! use rtmlab::mapper::RtmConfig;
//!
//! let cfg = RtmConfig::new(32, 8, 16, 4, 2);
//! assert_eq!(cfg.block_evals(cfg.h), 4 * (2 + 1));
//! ```

pub mod data;
pub mod decoder;
pub mod error;
pub mod generator;
pub mod harness;
pub mod imle;
pub mod mapper;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, ModelError};
pub use generator::Generator;

/// The guide's chapters, compiled so that their snippets run as doctests.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        };
    }
    chapter!(Introduction, "introduction.md");
    chapter!(Tensors, "tensors.md");
    chapter!(Mapper, "mapper.md");
    chapter!(Decoder, "decoder.md");
    chapter!(Training, "training.md");
    chapter!(Metrics, "metrics.md");
    chapter!(Data, "data.md");
    chapter!(Harness, "harness.md");
}
