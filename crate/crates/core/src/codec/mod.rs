//! Lossless range coding of symbol grids under the learned entropy model.

pub mod bitstream;
pub mod cdf;
pub mod range;

pub use bitstream::{
    decode, encode, grid_checksum, model_hash, quantized_code_length, Bitstream, Header,
    HEADER_BYTES, MAGIC, TRAILER_BYTES, VERSION,
};
pub use cdf::{pmf_to_cdf, FrozenCdf};
pub use range::{RangeDecoder, RangeEncoder};
