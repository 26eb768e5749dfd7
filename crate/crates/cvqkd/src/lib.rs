//! Certified secure-key-rate engine for discretely modulated CV-QKD.

pub mod fock;
pub mod objective;
pub mod oracle;
pub mod protocol;
pub mod sdp;
pub mod special;
