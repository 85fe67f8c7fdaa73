//! Factor step: assemble the masked least-squares quadratic over `vec(F)` and
//! minimize it over the feasible factor set by accelerated projected gradient.

use ndarray::{Array1, Array2};

use crate::data::ObservationSet;
use crate::error::{OpfaError, Result};
use crate::penalty::{project_factor_set, DifferenceOperator};
use crate::quadratic::{QMatrix, QuadraticForm};
use crate::shift::{DelayVector, FactorMatrix, Window};
use crate::solvers::masked_energy;

/// Stacks factor columns: `x[i·n_F + r] = F[r, i]`.
pub(crate) fn vec_factors(f_mat: &Array2<f64>) -> Array1<f64> {
    let (n_f, f) = f_mat.dim();
    let mut x = Array1::zeros(n_f * f);
    for i in 0..f {
        for r in 0..n_f {
            x[i * n_f + r] = f_mat[(r, i)];
        }
    }
    x
}

pub(crate) fn unvec_factors(x: &Array1<f64>, n_f: usize, f: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n_f, f));
    for i in 0..f {
        for r in 0..n_f {
            out[(r, i)] = x[i * n_f + r];
        }
    }
    out
}

/// Builds the quadratic `vec(F) · Q · vec(F) − 2 q · vec(F) + c` equal to the
/// masked residual `Σ_s ‖[X_s − window(M(F, d^s)) A_s]_Ω‖²` plus the
/// smoothness penalty `β Σ_i ‖W F_i‖²`.
///
/// Entry bookkeeping: window row `t` of subject `s` reads factor row
/// `(start + t − d_i) mod n_F` of column `i`, so each observed entry scatters
/// an `f × f` rank-one update over those positions.
pub fn assemble_factor_quadratic(
    data: &ObservationSet,
    scores: &[Array2<f64>],
    delays: &[DelayVector],
    n_f: usize,
    window: Window,
    beta: f64,
    op: &DifferenceOperator,
) -> Result<QuadraticForm> {
    let s_count = data.n_subjects();
    let (n, p) = (data.n(), data.p());
    if scores.len() != s_count || delays.len() != s_count {
        return Err(OpfaError::ShapeMismatch(format!(
            "{} score and {} delay sets for {} subjects",
            scores.len(),
            delays.len(),
            s_count
        )));
    }
    let f = scores[0].nrows();
    if f == 0 {
        return Err(OpfaError::InvalidInput("no factors".into()));
    }
    if scores.iter().any(|a| a.dim() != (f, p)) {
        return Err(OpfaError::ShapeMismatch(
            "score matrices must all be f × p".into(),
        ));
    }
    if delays.iter().any(|d| d.len() != f) {
        return Err(OpfaError::ShapeMismatch(
            "each delay vector needs one entry per factor".into(),
        ));
    }
    window.validate(n_f)?;
    if window.len != n {
        return Err(OpfaError::ShapeMismatch(format!(
            "window length {} vs {} data rows",
            window.len, n
        )));
    }
    if beta < 0.0 {
        return Err(OpfaError::InvalidInput("beta must be nonnegative".into()));
    }
    if beta > 0.0 && op.n_cols() != n_f {
        return Err(OpfaError::ShapeMismatch(format!(
            "difference operator acts on {} rows, factors have {n_f}",
            op.n_cols()
        )));
    }

    let dim = n_f * f;
    let mut q_mat = Array2::<f64>::zeros((dim, dim));
    let mut q_lin = Array1::<f64>::zeros(dim);
    let mut constant = 0.0;

    for s in 0..s_count {
        let x_s = data.matrix(s);
        let mask = data.mask(s);
        let a_s = &scores[s];
        let d_s = delays[s].delays();
        constant += masked_energy(x_s, mask);

        // rows of the factor matrix addressed by window row t, per factor
        let row_of = |t: usize, i: usize| (window.start + t + n_f - d_s[i]) % n_f;

        for t in 0..n {
            // gram of score rows restricted to entries observed at time t,
            // plus the data inner products at time t
            let mut g = vec![0.0; f * f];
            let mut b = vec![0.0; f];
            match mask {
                None => {
                    for j in 0..p {
                        let xv = x_s[(t, j)];
                        for i in 0..f {
                            let ai = a_s[(i, j)];
                            b[i] += xv * ai;
                            for i2 in i..f {
                                g[i * f + i2] += ai * a_s[(i2, j)];
                            }
                        }
                    }
                }
                Some(m) => {
                    for j in 0..p {
                        let w = m[(t, j)];
                        if w == 0.0 {
                            continue;
                        }
                        let xv = w * x_s[(t, j)];
                        for i in 0..f {
                            let ai = a_s[(i, j)];
                            b[i] += xv * ai;
                            for i2 in i..f {
                                g[i * f + i2] += ai * a_s[(i2, j)];
                            }
                        }
                    }
                }
            }
            for i in 0..f {
                let r_i = row_of(t, i);
                q_lin[i * n_f + r_i] += b[i];
                for i2 in i..f {
                    let r_i2 = row_of(t, i2);
                    let gv = g[i * f + i2];
                    q_mat[(i * n_f + r_i, i2 * n_f + r_i2)] += gv;
                    if i2 != i {
                        q_mat[(i2 * n_f + r_i2, i * n_f + r_i)] += gv;
                    }
                }
            }
        }
    }

    if beta > 0.0 {
        let gram = op.gram();
        for i in 0..f {
            for r in 0..n_f {
                for r2 in 0..n_f {
                    q_mat[(i * n_f + r, i * n_f + r2)] += beta * gram[(r, r2)];
                }
            }
        }
    }

    QuadraticForm::new(QMatrix::Dense(q_mat), q_lin, constant)
}

/// Minimizes a PSD quadratic over `{F ≥ 0, ‖F‖_F ≤ bound}` by accelerated
/// projected gradient with a monotone safeguard: momentum steps that fail to
/// descend are retried as plain projected-gradient steps, so the returned
/// objective never exceeds the initial one.
pub fn estimate_factors(
    quad: &QuadraticForm,
    init: &FactorMatrix,
    frobenius_bound: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(FactorMatrix, f64)> {
    let n_f = init.n_rows();
    let f = init.n_factors();
    if quad.dim() != n_f * f {
        return Err(OpfaError::ShapeMismatch(format!(
            "quadratic dimension {} vs {}×{} factors",
            quad.dim(),
            n_f,
            f
        )));
    }
    quad.check_psd()?;

    let project = |x: &Array1<f64>| -> Result<Array1<f64>> {
        let m = unvec_factors(x, n_f, f);
        let proj = project_factor_set(&m, frobenius_bound)?;
        Ok(vec_factors(proj.values()))
    };

    let mut lip = 2.0 * quad.max_eigenvalue(50) * (1.0 + 1e-3);
    if lip <= 1e-12 {
        // Degenerate quadratic part: the objective is linear, −2 q · x + c.
        // Its maximum inner product over the ball ∩ orthant sits at the
        // positive part of q scaled to the boundary (or at zero when q ≤ 0).
        let qpos = quad.linear.mapv(|v| v.max(0.0));
        let norm = qpos.dot(&qpos).sqrt();
        let x = if norm > 0.0 {
            qpos * (frobenius_bound / norm)
        } else {
            Array1::zeros(quad.dim())
        };
        let start_obj = quad.objective(&vec_factors(init.values()));
        let cand_obj = quad.objective(&x);
        return if cand_obj <= start_obj {
            let fm = FactorMatrix::from_feasible(unvec_factors(&x, n_f, f));
            Ok((fm, cand_obj))
        } else {
            Ok((init.clone(), start_obj))
        };
    }

    let mut x = vec_factors(init.values());
    let mut fx = quad.objective(&x);
    if !fx.is_finite() {
        return Err(OpfaError::NonFinite("factor objective at start".into()));
    }
    let mut x_prev: Array1<f64>;
    let mut y = x.clone();
    let mut t_momentum = 1.0_f64;
    let mut doublings = 0;

    for _ in 0..max_iters {
        let grad = quad.gradient(&y);
        let z = project(&(&y - &(grad / lip)))?;
        let fz = quad.objective(&z);
        if !fz.is_finite() {
            return Err(OpfaError::NonFinite("factor objective".into()));
        }
        let plain_step = y == x;
        if fz > fx {
            if plain_step {
                // A genuine gradient step went uphill: the Lipschitz estimate
                // was too small (power iteration is a lower bound). Tighten.
                lip *= 2.0;
                doublings += 1;
                if doublings > 60 {
                    return Err(OpfaError::NonFinite(
                        "factor step cannot find a descent step size".into(),
                    ));
                }
            } else {
                // Momentum overshot: restart from the best point.
                y = x.clone();
                t_momentum = 1.0;
            }
            continue;
        }
        let decrease = fx - fz;
        x_prev = std::mem::replace(&mut x, z);
        fx = fz;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_momentum * t_momentum).sqrt());
        let coeff = (t_momentum - 1.0) / t_next;
        y = &x + &((&x - &x_prev) * coeff);
        t_momentum = t_next;
        if decrease <= tol * fx.abs().max(1.0) && plain_step {
            break;
        }
    }

    Ok((
        FactorMatrix::from_feasible(unvec_factors(&x, n_f, f)),
        fx,
    ))
}
