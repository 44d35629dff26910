//! Synthetic traffic for tests and demonstrations.

pub mod packet;
pub mod replica;
