//! Dense kernels, singular values, seeded randomness and a finite-difference oracle.

mod gradcheck;
mod matrix;
mod rng;
mod svd;

pub use gradcheck::{finite_diff_gradient, max_relative_error};
pub use matrix::{cosine, dot, norm, Matrix};
pub use rng::{
    invert_permutation, is_permutation, mix64, random_matrix, random_permutation,
    sample_without_replacement, stream_id, SeededRng,
};
pub use svd::{singular_values, SingularSpectrum};
