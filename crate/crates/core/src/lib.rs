pub mod codec;
pub mod enclave;
pub mod group;
pub mod masking;
pub mod protocol;
pub mod quantizer;
pub mod sim;
pub use ed25519_dalek;
