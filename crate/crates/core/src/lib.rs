//! Accumulator-aware post-training quantization.
//!
//! Weights are quantized with GPFQ or OPTQ, optionally under an integer
//! accumulator budget so that every dot product with an `N`-bit unsigned
//! activation fits a `P`-bit register. The [`oracle`] module checks that
//! property exactly on the produced integer codes.

pub mod bounds;
pub mod constraint;
pub mod error;
pub mod gpfq;
pub mod numeric;
pub mod optq;
pub mod oracle;
pub mod pipeline;
pub mod projection;
pub mod sweep;
pub mod tensor_io;

pub use bounds::{
    l1_budget, min_accumulator_bits, outer_accumulator_bits, strict_limits, AccumulatorBudget,
    AccumulatorRepr,
};
pub use error::{QuantError, Result};
pub use numeric::{AffineQuantizer, Alphabet, AlphabetKind, RoundingMode};
pub use oracle::{verify, OverflowCertificate};
pub use pipeline::{quantize_layer, Algorithm, LayerJob, LayerReport, QuantConfig, Variant};
pub use projection::{ep_init, l1_project};
