//! Inner solvers of the block coordinate descent: factor step, score step and
//! the exact delay search.

pub mod delays;
pub mod factors;
pub mod scores;

pub use delays::{
    delay_lower_bound, delay_objective, estimate_delays_bb, estimate_delays_bb_traced,
    estimate_delays_bruteforce, BBNode,
};
pub use factors::{assemble_factor_quadratic, estimate_factors};
pub use scores::{assemble_score_quadratic, estimate_scores};

use ndarray::Array2;

/// `Σ (mask ⊙ x)²`; a masked-out entry contributes exactly 0 regardless of
/// its stored value, which keeps held-out data provably outside the fit.
pub(crate) fn masked_energy(x: &Array2<f64>, mask: Option<&Array2<f64>>) -> f64 {
    match mask {
        None => x.iter().map(|v| v * v).sum(),
        Some(m) => x
            .iter()
            .zip(m.iter())
            .map(|(v, w)| {
                let mv = w * v;
                mv * mv
            })
            .sum(),
    }
}

/// `Σ (mask ⊙ (x − y))²` — masked squared residual between two matrices.
pub(crate) fn masked_residual(x: &Array2<f64>, y: &Array2<f64>, mask: Option<&Array2<f64>>) -> f64 {
    match mask {
        None => x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum(),
        Some(m) => {
            let mut acc = 0.0;
            for ((a, b), w) in x.iter().zip(y.iter()).zip(m.iter()) {
                let d = w * (a - b);
                acc += d * d;
            }
            acc
        }
    }
}
