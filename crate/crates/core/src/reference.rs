//! Independent reference implementations used to test the production path:
//! a covariance-form Kalman filter with RTS smoothing (no `Q`/`R` inversion),
//! a dense equality-constrained least-squares solve, a derivative-free
//! scalar prox minimizer, and the pseudo-inverse Huber baseline whose failure
//! mode motivates the constraint-based formulation.
//!
//! These favor clarity over speed and carry hard size guards; none of them
//! shares code with the block-structured production solve.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::blocklinalg::BlockBidiagonal;
use crate::error::{Error, Result};
use crate::model::{Problem, StackedVector};
use crate::penalties::{Penalty, PenaltyKind};
use crate::spectral;

/// Size guard for the Kalman/RTS oracle.
pub const MAX_KALMAN_STEPS: usize = 1000;
/// Size guard for dense oracle solves.
pub const MAX_DENSE_STEPS: usize = 64;
/// Relative eigenvalue cutoff for pseudo-inverses.
pub const PINV_TOL: f64 = 1e-12;

/// Gaussian posterior from the Kalman/RTS pass.
#[derive(Debug, Clone)]
pub struct GaussianEstimate {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl GaussianEstimate {
    /// Smoothed means as an `N x n` matrix, one row per step.
    pub fn means_matrix(&self) -> DMatrix<f64> {
        let n = self.means.first().map_or(0, DVector::len);
        let mut out = DMatrix::zeros(self.means.len(), n);
        for (k, mean) in self.means.iter().enumerate() {
            out.row_mut(k).tr_copy_from(mean);
        }
        out
    }
}

fn quadratic_scale(p: &Penalty) -> Result<f64> {
    match p.kind() {
        PenaltyKind::Quadratic => Ok(p.scale()),
        other => Err(Error::Oracle(format!(
            "oracle requires quadratic penalties, found {other:?}"
        ))),
    }
}

/// Effective covariance implied by a factor and the quadratic penalty scales
/// on its whitened coordinates: a cost `s/2 * u_i^2` is the likelihood of a
/// unit-variance coordinate scaled by `1/s`.
fn effective_covariance(
    factor: &DMatrix<f64>,
    penalty_scales: &[f64],
) -> DMatrix<f64> {
    let mut weighted = factor.clone();
    for (j, &s) in penalty_scales.iter().enumerate() {
        let col = weighted.column(j) / s.sqrt();
        weighted.set_column(j, &col);
    }
    &weighted * weighted.transpose()
}

fn per_coordinate_scales(
    penalty: &crate::penalties::SeparablePenalty,
    len: usize,
) -> Result<Vec<f64>> {
    let mut scales = vec![f64::NAN; len];
    for term in penalty.terms() {
        let s = quadratic_scale(&term.penalty)?;
        for v in &mut scales[term.start..term.start + term.len] {
            *v = s;
        }
    }
    if scales.iter().any(|v| v.is_nan()) {
        return Err(Error::Oracle(
            "oracle requires every whitened coordinate to carry a quadratic penalty".into(),
        ));
    }
    Ok(scales)
}

/// Covariance-form Kalman filter plus Rauch-Tung-Striebel smoother.
///
/// Neither `Q` nor `R` is inverted, so rank-deficient factors are handled
/// exactly; the only pseudo-inverse sits in the smoother gain where the
/// predicted covariance may be singular. Requires quadratic penalties and no
/// state constraints.
pub fn kalman_rts(problem: &Problem) -> Result<GaussianEstimate> {
    let n_steps = problem.num_steps();
    if n_steps > MAX_KALMAN_STEPS {
        return Err(Error::Oracle(format!(
            "kalman_rts oracle is guarded to {MAX_KALMAN_STEPS} steps, got {n_steps}"
        )));
    }
    let n = problem.state_dim();

    let mut q_eff = Vec::with_capacity(n_steps);
    let mut r_eff = Vec::with_capacity(n_steps);
    for step in &problem.steps {
        if step.state_penalty.is_some() {
            return Err(Error::Oracle(
                "kalman_rts does not support state penalties or constraints".into(),
            ));
        }
        let sp = quadratic_scale(&step.process_penalty)?;
        q_eff.push(effective_covariance(
            &step.process_factor,
            &vec![sp; step.process_rank()],
        ));
        let scales = per_coordinate_scales(&step.measurement_penalty, step.measurement_rank())?;
        r_eff.push(effective_covariance(&step.measurement_factor, &scales));
    }

    let mut pred_means = Vec::with_capacity(n_steps);
    let mut pred_covs = Vec::with_capacity(n_steps);
    let mut filt_means = Vec::with_capacity(n_steps);
    let mut filt_covs = Vec::with_capacity(n_steps);

    let mut mean = problem.initial_state.clone();
    let mut cov = q_eff[0].clone();
    for (k, step) in problem.steps.iter().enumerate() {
        if k > 0 {
            mean = &step.transition * &mean;
            cov = &step.transition * &cov * step.transition.transpose() + &q_eff[k];
        }
        symmetrize(&mut cov);
        pred_means.push(mean.clone());
        pred_covs.push(cov.clone());

        let m = step.measurement_dim();
        if m > 0 {
            let h = &step.measurement_map;
            let innovation = &step.observation - h * &mean;
            let sigma = h * &cov * h.transpose() + &r_eff[k];
            let chol = Cholesky::new(sigma.clone()).ok_or_else(|| {
                Error::Oracle(format!("innovation covariance not PD at step {k}"))
            })?;
            let diag = chol.l().diagonal();
            let dmax = diag.iter().cloned().fold(0.0_f64, f64::max);
            if diag.iter().any(|&d| d <= 1e-12 * dmax) {
                return Err(Error::Oracle(format!(
                    "innovation covariance numerically singular at step {k}"
                )));
            }
            // gain K = P H^T Sigma^{-1}
            let gain = chol.solve(&(h * &cov)).transpose();
            mean += &gain * innovation;
            let identity = DMatrix::identity(n, n);
            let shrink = &identity - &gain * h;
            cov = &shrink * &cov * shrink.transpose() + &gain * &r_eff[k] * gain.transpose();
            symmetrize(&mut cov);
        }
        filt_means.push(mean.clone());
        filt_covs.push(cov.clone());
    }

    let mut means = vec![DVector::zeros(n); n_steps];
    let mut covariances = vec![DMatrix::zeros(n, n); n_steps];
    means[n_steps - 1] = filt_means[n_steps - 1].clone();
    covariances[n_steps - 1] = filt_covs[n_steps - 1].clone();
    for k in (0..n_steps.saturating_sub(1)).rev() {
        let transition = &problem.steps[k + 1].transition;
        let pred_pinv = spectral::symmetric_pinv(&pred_covs[k + 1], PINV_TOL);
        let gain = &filt_covs[k] * transition.transpose() * pred_pinv;
        means[k] = &filt_means[k] + &gain * (&means[k + 1] - &pred_means[k + 1]);
        covariances[k] = &filt_covs[k]
            + &gain * (&covariances[k + 1] - &pred_covs[k + 1]) * gain.transpose();
        symmetrize(&mut covariances[k]);
    }

    Ok(GaussianEstimate { means, covariances })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Dense KKT solve of the quadratic problem `min 1/2 z^T W z  s.t.  A z = w`,
/// where `W` collects the quadratic penalty scales per coordinate. Exact
/// measurement rows are ordinary constraints here. Guarded to small horizons.
pub fn dense_equality_ls(problem: &Problem) -> Result<StackedVector> {
    if problem.num_steps() > MAX_DENSE_STEPS {
        return Err(Error::Oracle(format!(
            "dense oracle is guarded to {MAX_DENSE_STEPS} steps, got {}",
            problem.num_steps()
        )));
    }
    let layout = problem.layout();
    let (a, w_hat) = BlockBidiagonal::assemble(problem)?;
    let dense = a.to_dense();
    let cols = dense.ncols();
    let rows = dense.nrows();

    let mut weights = vec![0.0_f64; cols];
    for (k, step) in problem.steps.iter().enumerate() {
        let sl = layout.step(k);
        let sp = quadratic_scale(&step.process_penalty)?;
        for w in &mut weights[sl.process_aux..sl.process_aux + sl.process_rank] {
            *w = sp;
        }
        for term in step.measurement_penalty.terms() {
            let s = quadratic_scale(&term.penalty)?;
            let start = sl.measurement_aux + term.start;
            for w in &mut weights[start..start + term.len] {
                *w = s;
            }
        }
        if let Some(p) = &step.state_penalty {
            let s = quadratic_scale(p)?;
            for w in &mut weights[sl.state..sl.state + layout.state_dim()] {
                *w = s;
            }
        }
    }

    let dim = cols + rows;
    let mut kkt = DMatrix::zeros(dim, dim);
    for (i, &w) in weights.iter().enumerate() {
        kkt[(i, i)] = w;
    }
    kkt.view_mut((cols, 0), (rows, cols)).copy_from(&dense);
    kkt.view_mut((0, cols), (cols, rows)).copy_from(&dense.transpose());

    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(cols, rows).copy_from(&w_hat);

    let solution = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Oracle("dense KKT system is singular".into()))?;
    let z = solution.rows(0, cols).into_owned();

    let residual = (&dense * &z - &w_hat).amax();
    if residual > 1e-8 * (1.0 + w_hat.amax()) {
        return Err(Error::Oracle(format!(
            "dense KKT solve left constraint residual {residual:.3e}"
        )));
    }
    StackedVector::from_data(layout, z)
}

/// Golden-section minimization of `1/(2 alpha) (x - z)^2 + p(x)` over a
/// bracket guaranteed to contain the minimizer, refined to width `1e-10`.
pub fn prox_oracle(p: &Penalty, alpha: f64, z: f64) -> f64 {
    let (lo, hi) = match p.kind() {
        PenaltyKind::BoxIndicator { lower, upper } => {
            let l = lower[0];
            let u = upper[0];
            (l.max(z.min(u) - 1.0), u.min(z.max(l) + 1.0))
        }
        kind => {
            // |prox - z| <= alpha * scale * L, with L a bound on the penalty
            // slope at the minimizer (which satisfies |x*| <= |z|)
            let slope_bound = match kind {
                PenaltyKind::Quadratic => z.abs() + 1.0,
                PenaltyKind::L1 => 1.0,
                PenaltyKind::Quantile { tau } => tau.max(1.0 - tau),
                PenaltyKind::Huber { kappa } => *kappa,
                PenaltyKind::QuantileHuber { kappa, .. } => *kappa,
                PenaltyKind::Vapnik { .. } => 1.0,
                PenaltyKind::Hubnik { kappa, .. } => *kappa,
                PenaltyKind::ElasticNet => 2.0 * z.abs() + 2.0,
                PenaltyKind::BoxIndicator { .. } => unreachable!(),
            };
            let half_width = alpha * p.scale() * slope_bound + 1.0;
            (z - half_width, z + half_width)
        }
    };
    let objective = |x: f64| (x - z) * (x - z) / (2.0 * alpha) + p.eval(&[x]);
    golden_section(objective, lo, hi, 1e-10)
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, width: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > width {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Result of the pseudo-inverse Huber baseline.
#[derive(Debug, Clone)]
pub struct PinvSmootherResult {
    /// `N x n` state trajectory, one row per step.
    pub states: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// The workaround this library exists to replace: whiten residuals with
/// Moore-Penrose pseudo-inverse square roots and minimize the unconstrained
/// Huberized objective by gradient descent with backtracking. Deterministic
/// relations hidden in the null space of `Q` are silently dropped, which is
/// precisely its failure mode under outliers.
pub fn pinv_huber_smoother(problem: &Problem, kappa: f64) -> Result<PinvSmootherResult> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "huber threshold must be positive, got {kappa}"
        )));
    }
    let n = problem.state_dim();
    let n_steps = problem.num_steps();
    if n_steps > MAX_KALMAN_STEPS {
        return Err(Error::Oracle(format!(
            "pinv baseline is guarded to {MAX_KALMAN_STEPS} steps"
        )));
    }

    let process_whiteners: Vec<DMatrix<f64>> = problem
        .steps
        .iter()
        .map(|s| {
            let q = &s.process_factor * s.process_factor.transpose();
            spectral::symmetric_pinv_sqrt(&q, PINV_TOL)
        })
        .collect();
    let measurement_whiteners: Vec<DMatrix<f64>> = problem
        .steps
        .iter()
        .map(|s| {
            let r = &s.measurement_factor * s.measurement_factor.transpose();
            spectral::symmetric_pinv_sqrt(&r, PINV_TOL)
        })
        .collect();

    let huber = |t: f64| {
        if t.abs() <= kappa {
            0.5 * t * t
        } else {
            kappa * t.abs() - 0.5 * kappa * kappa
        }
    };
    let huber_grad = |t: f64| t.clamp(-kappa, kappa);

    // deterministic propagation of the prior as the starting point
    let mut states: Vec<DVector<f64>> = Vec::with_capacity(n_steps);
    states.push(problem.initial_state.clone());
    for k in 1..n_steps {
        let prev = states[k - 1].clone();
        states.push(&problem.steps[k].transition * prev);
    }

    let innovation = |states: &[DVector<f64>], k: usize| -> DVector<f64> {
        if k == 0 {
            &states[0] - &problem.initial_state
        } else {
            &states[k] - &problem.steps[k].transition * &states[k - 1]
        }
    };

    let objective = |states: &[DVector<f64>]| -> f64 {
        let mut total = 0.0;
        for k in 0..n_steps {
            let w = &process_whiteners[k] * innovation(states, k);
            total += w.iter().map(|&t| huber(t)).sum::<f64>();
            let step = &problem.steps[k];
            if step.measurement_dim() > 0 {
                let v = &measurement_whiteners[k]
                    * (&step.measurement_map * &states[k] - &step.observation);
                total += v.iter().map(|&t| huber(t)).sum::<f64>();
            }
        }
        total
    };

    let gradient = |states: &[DVector<f64>]| -> Vec<DVector<f64>> {
        let mut grads = vec![DVector::zeros(n); n_steps];
        for k in 0..n_steps {
            let whitened = &process_whiteners[k] * innovation(states, k);
            let pulled = &process_whiteners[k] * whitened.map(huber_grad);
            grads[k] += &pulled;
            if k > 0 {
                let g = &problem.steps[k].transition;
                grads[k - 1] -= g.transpose() * &pulled;
            }
            let step = &problem.steps[k];
            if step.measurement_dim() > 0 {
                let v = &measurement_whiteners[k]
                    * (&step.measurement_map * &states[k] - &step.observation);
                grads[k] +=
                    step.measurement_map.transpose() * (&measurement_whiteners[k] * v.map(huber_grad));
            }
        }
        grads
    };

    const MAX_ITER: usize = 200_000;
    const GRAD_TOL: f64 = 1e-8;
    let mut f_curr = objective(&states);
    let mut step_size = 1.0;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;

    while iterations < MAX_ITER {
        let grads = gradient(&states);
        grad_norm = grads.iter().map(|g| g.amax()).fold(0.0_f64, f64::max);
        if grad_norm <= GRAD_TOL {
            return Ok(PinvSmootherResult {
                states: stack_states(&states),
                converged: true,
                iterations,
                gradient_norm: grad_norm,
            });
        }
        let grad_sq: f64 = grads.iter().map(|g| g.norm_squared()).sum();
        step_size *= 2.0;
        loop {
            let trial: Vec<DVector<f64>> = states
                .iter()
                .zip(&grads)
                .map(|(x, g)| x - g * step_size)
                .collect();
            let f_trial = objective(&trial);
            if f_trial <= f_curr - 1e-4 * step_size * grad_sq {
                states = trial;
                f_curr = f_trial;
                break;
            }
            step_size *= 0.5;
            if step_size < 1e-18 {
                return Ok(PinvSmootherResult {
                    states: stack_states(&states),
                    converged: false,
                    iterations,
                    gradient_norm: grad_norm,
                });
            }
        }
        iterations += 1;
    }

    Ok(PinvSmootherResult {
        states: stack_states(&states),
        converged: false,
        iterations,
        gradient_norm: grad_norm,
    })
}

fn stack_states(states: &[DVector<f64>]) -> DMatrix<f64> {
    let n = states.first().map_or(0, DVector::len);
    let mut out = DMatrix::zeros(states.len(), n);
    for (k, x) in states.iter().enumerate() {
        out.row_mut(k).tr_copy_from(x);
    }
    out
}
