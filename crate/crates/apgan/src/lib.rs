//! Attribute-preserved thermal-to-visible face synthesis and verification.

pub mod attrnet;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod mcb;
pub mod nn;
pub mod real;
pub mod rng;
pub mod types;
