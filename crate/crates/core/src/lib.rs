//! Weight-decomposed low-rank adaptation on dense `f64` matrices.

pub mod adapters;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod tensor;
pub mod trainer;
