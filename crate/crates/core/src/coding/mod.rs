//! Range coding, CDF tables, the bitstream container and the image codec.

pub mod bitstream;
pub mod cdf;
pub mod rangecoder;
pub mod codec;
