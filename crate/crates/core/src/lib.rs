//! Stabilizing erasure codes for quantized feedback control over
//! packet-erasure channels.
//!
//! A `(k, k′)` stabilizing code splits the quantized controller signal into
//! `k` descriptions such that any `k′` of them keep the loop stable. The crate
//! covers the loop model ([`lti`]), dithered quantization and entropy coding
//! ([`quantizer`]), multiple-description index assignments ([`mdc`]),
//! stability and efficiency bounds ([`stability`]) and seeded closed-loop
//! Monte Carlo ([`sim`]).

pub mod lti;
pub mod mdc;
pub mod quantizer;
pub mod stability;
pub mod sim;
