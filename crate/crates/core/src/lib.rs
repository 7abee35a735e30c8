//! Depth embedding of fully-connected networks: constructing deeper networks
//! that compute the same function, checking that they do, and merging
//! effectively linear layers back out.

pub mod diagnostics;
pub mod experiments;
pub mod lifting;
pub mod linalg;
pub mod network;
