//! Differentiable ops, implemented as `Graph` methods.

mod conv;
pub(crate) mod elementwise;
mod linalg;
mod loss;
mod nn;
mod reduce;
mod sample;
mod shape;

pub use elementwise::sigmoid;

#[cfg(test)]
mod tests;
