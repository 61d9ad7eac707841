#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod anchors;
pub mod augment;
mod mathutil;
pub mod net;
pub mod rng;
pub mod synth;
pub mod vol;
