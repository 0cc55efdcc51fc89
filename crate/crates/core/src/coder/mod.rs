//! Range coding, the location codec and the bitstream container.

pub mod bitstream;
pub mod locations;
pub mod range;
pub mod tables;

pub use bitstream::{
    quantize_model, read_scene, write_scene, DecodedScene, EncodedScene, Header, QuantizedModel, SectionSizes,
    HEADER_LEN, MAGIC, VERSION,
};
pub use locations::{
    decode_locations, encode_locations, estimate_location_bits, morton_code, morton_order, LocationGrid,
};
pub use range::{RangeDecoder, RangeEncoder};
pub use tables::{quantize_freqs, rc_decode, rc_encode, FreqTable, GaussianTable, Pmf};
