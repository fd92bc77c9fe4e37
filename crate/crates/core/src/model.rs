//! The user-facing smoothing problem: a linear state-space model with
//! square-root covariance factors, per-block penalties, and optional state
//! constraints, plus the singular-model builders (bias augmentation,
//! correlated noise, exact measurement rows).
//!
//! Covariances enter only through factors: the process covariance of step `k`
//! is `C_k C_k^T` and the measurement covariance is `S_k S_k^T`. Rectangular
//! factors express rank deficiency exactly; a factor with zero columns makes
//! the corresponding rows deterministic.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalties::{BlockTerm, Penalty, SeparablePenalty};
use crate::spectral;

/// Relative residual tolerance for the observation-range feasibility check.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// One time slice of the model.
///
/// Dimensions: the state is `n`, the process factor is `n x r`, the
/// measurement map is `m x n`, and the measurement factor is `m x s`. Both
/// `m = 0` (no observation) and `r = 0` / `s = 0` (deterministic rows) are
/// allowed. The transition of the first step is never used: the first process
/// constraint ties the state to the prior estimate directly.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeStep {
    /// State transition (`n x n`).
    pub transition: DMatrix<f64>,
    /// Square-root factor of the process covariance (`n x r`).
    pub process_factor: DMatrix<f64>,
    /// Measurement map (`m x n`).
    pub measurement_map: DMatrix<f64>,
    /// Square-root factor of the measurement covariance (`m x s`).
    pub measurement_factor: DMatrix<f64>,
    /// Observation (`m`).
    pub observation: DVector<f64>,
    /// Penalty on the whitened process innovation (`r` coordinates).
    pub process_penalty: Penalty,
    /// Penalty on the whitened measurement residual (`s` coordinates),
    /// segmentable so different rows of one step may carry different losses.
    pub measurement_penalty: SeparablePenalty,
    /// Optional penalty or box constraint on the state itself.
    pub state_penalty: Option<Penalty>,
}

impl TimeStep {
    /// Builds a step with quadratic penalties on both residual blocks.
    pub fn new(
        transition: DMatrix<f64>,
        process_factor: DMatrix<f64>,
        measurement_map: DMatrix<f64>,
        measurement_factor: DMatrix<f64>,
        observation: DVector<f64>,
    ) -> Self {
        let s = measurement_factor.ncols();
        let measurement_penalty = if s == 0 {
            SeparablePenalty::empty()
        } else {
            SeparablePenalty::uniform(Penalty::quadratic(), s).expect("single block is valid")
        };
        Self {
            transition,
            process_factor,
            measurement_map,
            measurement_factor,
            observation,
            process_penalty: Penalty::quadratic(),
            measurement_penalty,
            state_penalty: None,
        }
    }

    /// A step without any observation.
    pub fn without_measurement(transition: DMatrix<f64>, process_factor: DMatrix<f64>) -> Self {
        let n = transition.nrows();
        Self::new(
            transition,
            process_factor,
            DMatrix::zeros(0, n),
            DMatrix::zeros(0, 0),
            DVector::zeros(0),
        )
    }

    pub fn with_process_penalty(mut self, penalty: Penalty) -> Self {
        self.process_penalty = penalty;
        self
    }

    /// Applies one penalty uniformly across the whitened residual block.
    pub fn with_measurement_penalty(mut self, penalty: Penalty) -> Result<Self> {
        let s = self.measurement_factor.ncols();
        self.measurement_penalty = if s == 0 {
            SeparablePenalty::empty()
        } else {
            SeparablePenalty::uniform(penalty, s)?
        };
        Ok(self)
    }

    pub fn with_measurement_penalties(mut self, penalty: SeparablePenalty) -> Result<Self> {
        if penalty.min_len() > self.measurement_factor.ncols() {
            return Err(Error::Dimension(format!(
                "measurement penalty covers {} coordinates but the factor has {} columns",
                penalty.min_len(),
                self.measurement_factor.ncols()
            )));
        }
        self.measurement_penalty = penalty;
        Ok(self)
    }

    pub fn with_state_penalty(mut self, penalty: Penalty) -> Self {
        self.state_penalty = Some(penalty);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    /// Number of whitened process coordinates (`r`, the rank budget of `Q`).
    pub fn process_rank(&self) -> usize {
        self.process_factor.ncols()
    }

    pub fn measurement_dim(&self) -> usize {
        self.measurement_map.nrows()
    }

    /// Number of whitened measurement coordinates (`s`).
    pub fn measurement_rank(&self) -> usize {
        self.measurement_factor.ncols()
    }

    fn check_dims(&self, n: usize, k: usize) -> Result<()> {
        let err = |msg: String| Err(Error::Dimension(format!("step {k}: {msg}")));
        if self.transition.nrows() != n || self.transition.ncols() != n {
            return err(format!(
                "transition is {}x{}, expected {n}x{n}",
                self.transition.nrows(),
                self.transition.ncols()
            ));
        }
        if self.process_factor.nrows() != n {
            return err(format!(
                "process factor has {} rows, expected {n}",
                self.process_factor.nrows()
            ));
        }
        let m = self.measurement_map.nrows();
        if self.measurement_map.ncols() != n && m > 0 {
            return err(format!(
                "measurement map is {m}x{}, expected {m}x{n}",
                self.measurement_map.ncols()
            ));
        }
        if self.measurement_factor.nrows() != m {
            return err(format!(
                "measurement factor has {} rows, expected {m}",
                self.measurement_factor.nrows()
            ));
        }
        if self.observation.len() != m {
            return err(format!(
                "observation has length {}, expected {m}",
                self.observation.len()
            ));
        }
        if self.measurement_penalty.min_len() > self.measurement_rank() {
            return err(format!(
                "measurement penalty covers {} coordinates, factor has {} columns",
                self.measurement_penalty.min_len(),
                self.measurement_rank()
            ));
        }
        if let Some(p) = &self.state_penalty {
            if let Some(len) = p.intrinsic_len() {
                if len != n {
                    return err(format!("state box has length {len}, expected {n}"));
                }
            }
        }
        Ok(())
    }
}

/// Offsets of one step inside the stacked decision vector and the stacked
/// constraint rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepLayout {
    /// Offset of the whitened process block `u_k`.
    pub process_aux: usize,
    pub process_rank: usize,
    /// Offset of the whitened measurement block `t_k`.
    pub measurement_aux: usize,
    pub measurement_rank: usize,
    /// Offset of the state block `x_k`.
    pub state: usize,
    /// Row offset of the `n` process constraint rows.
    pub process_row: usize,
    /// Row offset of the `m_k` measurement constraint rows.
    pub measurement_row: usize,
    pub measurement_dim: usize,
}

/// Block layout of the stacked vector `z = (u_1, t_1, x_1, ..., u_N, t_N, x_N)`
/// and of the stacked constraint rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    steps: Vec<StepLayout>,
    state_dim: usize,
    len: usize,
    rows: usize,
}

impl BlockLayout {
    fn of(problem: &Problem) -> Self {
        let n = problem.state_dim();
        let mut steps = Vec::with_capacity(problem.num_steps());
        let mut col = 0usize;
        let mut row = 0usize;
        for step in &problem.steps {
            let r = step.process_rank();
            let s = step.measurement_rank();
            let m = step.measurement_dim();
            steps.push(StepLayout {
                process_aux: col,
                process_rank: r,
                measurement_aux: col + r,
                measurement_rank: s,
                state: col + r + s,
                process_row: row,
                measurement_row: row + n,
                measurement_dim: m,
            });
            col += r + s + n;
            row += n + m;
        }
        Self { steps, state_dim: n, len: col, rows: row }
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Total length of the stacked decision vector.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Total number of constraint rows.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn step(&self, k: usize) -> &StepLayout {
        &self.steps[k]
    }

    pub fn steps(&self) -> &[StepLayout] {
        &self.steps
    }
}

/// A flat decision vector with its block layout.
///
/// The blocks follow the internal constraint convention: the process block of
/// step `k` stores the negated whitened innovation, so symmetric penalties are
/// unaffected and the asymmetric ones are reflected internally before use.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedVector {
    data: DVector<f64>,
    layout: BlockLayout,
}

impl StackedVector {
    pub fn zeros(layout: BlockLayout) -> Self {
        let data = DVector::zeros(layout.len());
        Self { data, layout }
    }

    pub fn from_data(layout: BlockLayout, data: DVector<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "stacked vector has length {}, layout expects {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut DVector<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> DVector<f64> {
        self.data
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    /// State block of step `k`.
    pub fn state(&self, k: usize) -> DVectorView<'_, f64> {
        let step = self.layout.step(k);
        self.data.rows(step.state, self.layout.state_dim())
    }

    /// Whitened process block of step `k` (internal sign convention).
    pub fn process_aux(&self, k: usize) -> DVectorView<'_, f64> {
        let step = self.layout.step(k);
        self.data.rows(step.process_aux, step.process_rank)
    }

    /// Whitened measurement block of step `k`.
    pub fn measurement_aux(&self, k: usize) -> DVectorView<'_, f64> {
        let step = self.layout.step(k);
        self.data.rows(step.measurement_aux, step.measurement_rank)
    }

    pub fn set_state(&mut self, k: usize, value: &DVector<f64>) {
        let step = *self.layout.step(k);
        self.data
            .rows_mut(step.state, self.layout.state_dim())
            .copy_from(value);
    }

    /// The state trajectory as an `N x n` matrix, one row per step.
    pub fn states_matrix(&self) -> DMatrix<f64> {
        let n = self.layout.state_dim();
        let mut out = DMatrix::zeros(self.layout.num_steps(), n);
        for k in 0..self.layout.num_steps() {
            out.row_mut(k).tr_copy_from(&self.state(k));
        }
        out
    }
}

/// The full smoothing problem: an initial state estimate and `N >= 1` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "wire::ProblemSpec", into = "wire::ProblemSpec")]
pub struct Problem {
    pub initial_state: DVector<f64>,
    pub steps: Vec<TimeStep>,
}

impl Problem {
    pub fn new(initial_state: DVector<f64>, steps: Vec<TimeStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Dimension("a problem needs at least one step".into()));
        }
        let n = initial_state.len();
        for (k, step) in steps.iter().enumerate() {
            step.check_dims(n, k)?;
        }
        Ok(Self { initial_state, steps })
    }

    pub fn state_dim(&self) -> usize {
        self.initial_state.len()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout::of(self)
    }

    /// Checks dimensions, observation feasibility, and a per-step necessary
    /// condition for the constraint matrix to have full row rank.
    ///
    /// Feasibility requires each observation to lie in the range of
    /// `[S_k  H_k]`; otherwise no state can reproduce it and the constraint
    /// set is empty. The rank condition requires the rows of `[S_k  H_k]` to
    /// be independent; the process rows are always independent thanks to the
    /// identity block on the state.
    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        for (k, step) in self.steps.iter().enumerate() {
            step.check_dims(n, k)?;
            let m = step.measurement_dim();
            if m == 0 {
                continue;
            }
            let mut stacked = DMatrix::zeros(m, step.measurement_rank() + n);
            stacked
                .view_mut((0, 0), (m, step.measurement_rank()))
                .copy_from(&step.measurement_factor);
            stacked
                .view_mut((0, step.measurement_rank()), (m, n))
                .copy_from(&step.measurement_map);
            let svd = stacked.clone().svd(true, true);
            let max_sv = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
            let rank = svd
                .singular_values
                .iter()
                .filter(|&&sv| sv > 1e-12 * max_sv.max(1.0))
                .count();
            if rank < m {
                return Err(Error::RankDeficient {
                    step: k,
                    message: format!(
                        "rows of the stacked measurement block are dependent (rank {rank} of {m})"
                    ),
                });
            }
            let fitted = svd
                .solve(&step.observation, 1e-12 * max_sv.max(1.0))
                .map_err(|e| Error::Oracle(format!("svd solve failed: {e}")))?;
            let residual = (&stacked * &fitted - &step.observation).norm();
            if residual > FEASIBILITY_TOL * (1.0 + step.observation.norm()) {
                return Err(Error::Infeasible {
                    step: k,
                    message: format!(
                        "observation lies outside the range of the measurement model \
                         (residual {residual:.3e})"
                    ),
                });
            }
        }
        Ok(())
    }

    /// The separable penalty over the stacked vector, in the internal sign
    /// convention: process penalties are reflected (the stored process block
    /// is the negated whitened innovation), measurement and state penalties
    /// apply as given.
    pub(crate) fn stacked_penalty(&self) -> SeparablePenalty {
        let layout = self.layout();
        let mut terms = Vec::new();
        for (k, step) in self.steps.iter().enumerate() {
            let sl = layout.step(k);
            if sl.process_rank > 0 {
                terms.push(BlockTerm::new(
                    sl.process_aux,
                    sl.process_rank,
                    step.process_penalty.reflected(),
                ));
            }
            for term in step.measurement_penalty.shifted(sl.measurement_aux).terms() {
                terms.push(term.clone());
            }
            if let Some(p) = &step.state_penalty {
                terms.push(BlockTerm::new(sl.state, layout.state_dim(), p.clone()));
            }
        }
        SeparablePenalty::new(terms).expect("per-step blocks are disjoint by construction")
    }

    /// Objective value `sum_k rho_p(w_k) + rho_m(t_k) + rho_s(x_k)` at a
    /// stacked point, with the process penalty applied to the innovation in
    /// the user convention. `+inf` if a state violates its box.
    pub fn objective(&self, z: &StackedVector) -> Result<f64> {
        if z.layout() != &self.layout() {
            return Err(Error::Dimension(
                "stacked vector layout does not match the problem".into(),
            ));
        }
        self.stacked_penalty()
            .eval(z.data().as_slice())
    }

    /// Augments the state with `bias_dim` constant components. The per-step
    /// maps couple the bias into the measurements (`m_k x bias_dim` each).
    ///
    /// The bias is free at the first step (identity factor block) and held
    /// exactly constant afterwards (zero factor rows), which encodes the
    /// equality of the bias across time through a singular process model.
    pub fn augment_bias(&self, bias_dim: usize, maps: &[DMatrix<f64>]) -> Result<Problem> {
        if bias_dim == 0 {
            return Err(Error::InvalidParameter("bias dimension must be >= 1".into()));
        }
        if maps.len() != self.num_steps() {
            return Err(Error::Dimension(format!(
                "need one bias map per step: got {} maps for {} steps",
                maps.len(),
                self.num_steps()
            )));
        }
        let n = self.state_dim();
        let mut steps = Vec::with_capacity(self.num_steps());
        for (k, (step, map)) in self.steps.iter().zip(maps).enumerate() {
            let m = step.measurement_dim();
            if map.nrows() != m || map.ncols() != bias_dim {
                return Err(Error::Dimension(format!(
                    "step {k}: bias map is {}x{}, expected {m}x{bias_dim}",
                    map.nrows(),
                    map.ncols()
                )));
            }
            let mut transition = DMatrix::zeros(n + bias_dim, n + bias_dim);
            transition.view_mut((0, 0), (n, n)).copy_from(&step.transition);
            transition
                .view_mut((n, n), (bias_dim, bias_dim))
                .copy_from(&DMatrix::identity(bias_dim, bias_dim));

            let r = step.process_rank();
            let process_factor = if k == 0 {
                let mut c = DMatrix::zeros(n + bias_dim, r + bias_dim);
                c.view_mut((0, 0), (n, r)).copy_from(&step.process_factor);
                c.view_mut((n, r), (bias_dim, bias_dim))
                    .copy_from(&DMatrix::identity(bias_dim, bias_dim));
                c
            } else {
                let mut c = DMatrix::zeros(n + bias_dim, r);
                c.view_mut((0, 0), (n, r)).copy_from(&step.process_factor);
                c
            };

            let mut measurement_map = DMatrix::zeros(m, n + bias_dim);
            if m > 0 {
                measurement_map
                    .view_mut((0, 0), (m, n))
                    .copy_from(&step.measurement_map);
                measurement_map.view_mut((0, n), (m, bias_dim)).copy_from(map);
            }

            let mut new_step = step.clone();
            new_step.transition = transition;
            new_step.process_factor = process_factor;
            new_step.measurement_map = measurement_map;
            if let Some(p) = &step.state_penalty {
                if p.intrinsic_len().is_some() {
                    return Err(Error::InvalidParameter(
                        "cannot augment a step whose state box does not cover the bias; \
                         set the state penalty after augmentation"
                            .into(),
                    ));
                }
            }
            steps.push(new_step);
        }
        let mut x0 = DVector::zeros(n + bias_dim);
        x0.rows_mut(0, n).copy_from(&self.initial_state);
        Problem::new(x0, steps)
    }

    /// Augments the state with the process-noise vector so that correlated
    /// noise `w_k = M w_{k-1} + beta_k` becomes a singular model: the state
    /// block receives the previous noise exactly and fresh noise enters only
    /// the noise block.
    pub fn augment_correlated_noise(
        &self,
        noise_transition: &DMatrix<f64>,
        noise_factor: &DMatrix<f64>,
    ) -> Result<Problem> {
        let n = self.state_dim();
        let d = noise_transition.nrows();
        if noise_transition.ncols() != d {
            return Err(Error::Dimension("noise transition must be square".into()));
        }
        if d != n {
            return Err(Error::Dimension(format!(
                "noise dimension {d} must match the state dimension {n} \
                 (the noise enters the state through an identity block)"
            )));
        }
        if noise_factor.nrows() != d {
            return Err(Error::Dimension(format!(
                "noise factor has {} rows, expected {d}",
                noise_factor.nrows()
            )));
        }
        let q = noise_factor.ncols();
        let mut steps = Vec::with_capacity(self.num_steps());
        for step in &self.steps {
            let m = step.measurement_dim();
            let mut transition = DMatrix::zeros(2 * n, 2 * n);
            transition.view_mut((0, 0), (n, n)).copy_from(&step.transition);
            transition
                .view_mut((0, n), (n, n))
                .copy_from(&DMatrix::identity(n, n));
            transition.view_mut((n, n), (n, n)).copy_from(noise_transition);

            let mut factor = DMatrix::zeros(2 * n, q);
            factor.view_mut((n, 0), (n, q)).copy_from(noise_factor);

            let mut map = DMatrix::zeros(m, 2 * n);
            if m > 0 {
                map.view_mut((0, 0), (m, n)).copy_from(&step.measurement_map);
            }

            let mut new_step = step.clone();
            new_step.transition = transition;
            new_step.process_factor = factor;
            new_step.measurement_map = map;
            if let Some(p) = &step.state_penalty {
                if p.intrinsic_len().is_some() {
                    return Err(Error::InvalidParameter(
                        "state boxes must be re-specified after noise augmentation".into(),
                    ));
                }
            }
            steps.push(new_step);
        }
        let mut x0 = DVector::zeros(2 * n);
        x0.rows_mut(0, n).copy_from(&self.initial_state);
        Problem::new(x0, steps)
    }

    /// Pins one state component at one step to a known value by appending an
    /// exact (zero-variance) measurement row.
    pub fn add_exact_measurement(
        &self,
        step_index: usize,
        state_index: usize,
        value: f64,
    ) -> Result<Problem> {
        let n = self.state_dim();
        if step_index >= self.num_steps() {
            return Err(Error::Dimension(format!(
                "step index {step_index} out of range for {} steps",
                self.num_steps()
            )));
        }
        if state_index >= n {
            return Err(Error::Dimension(format!(
                "state index {state_index} out of range for dimension {n}"
            )));
        }
        let mut problem = self.clone();
        let step = &mut problem.steps[step_index];
        let m = step.measurement_dim();
        let s = step.measurement_rank();

        let mut map = DMatrix::zeros(m + 1, n);
        if m > 0 {
            map.view_mut((0, 0), (m, n)).copy_from(&step.measurement_map);
        }
        map[(m, state_index)] = 1.0;

        let mut factor = DMatrix::zeros(m + 1, s);
        if m > 0 && s > 0 {
            factor.view_mut((0, 0), (m, s)).copy_from(&step.measurement_factor);
        }

        let mut y = DVector::zeros(m + 1);
        if m > 0 {
            y.rows_mut(0, m).copy_from(&step.observation);
        }
        y[m] = value;

        step.measurement_map = map;
        step.measurement_factor = factor;
        step.observation = y;
        Ok(problem)
    }

    /// Factors a full covariance matrix into a rank-revealing square root,
    /// truncating eigenvalues below `1e-12` of the largest. Returns an
    /// `n x rank` factor `C` with `C C^T` equal to the PSD part of the input.
    pub fn covariance_factor(covariance: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if covariance.nrows() != covariance.ncols() {
            return Err(Error::Dimension("covariance must be square".into()));
        }
        let sym = (covariance + covariance.transpose()) * 0.5;
        Ok(spectral::psd_factor(&sym, 1e-12))
    }
}

mod wire {
    //! JSON wire form of a problem: matrices as row-major nested arrays,
    //! penalties as tagged objects.

    use nalgebra::{DMatrix, DVector};
    use serde::{Deserialize, Serialize};

    use super::{Problem, TimeStep};
    use crate::error::Error;
    use crate::penalties::{Penalty, SeparablePenalty};

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(untagged)]
    pub enum MeasurementPenaltySpec {
        Single(Penalty),
        Segmented(SeparablePenalty),
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct StepSpec {
        pub transition: Vec<Vec<f64>>,
        pub process_factor: Vec<Vec<f64>>,
        pub measurement_map: Vec<Vec<f64>>,
        pub measurement_factor: Vec<Vec<f64>>,
        pub observation: Vec<f64>,
        pub process_penalty: Penalty,
        pub measurement_penalty: MeasurementPenaltySpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub state_penalty: Option<Penalty>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ProblemSpec {
        pub initial_state: Vec<f64>,
        pub steps: Vec<StepSpec>,
    }

    fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, Error> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        for row in rows {
            if row.len() != ncols {
                return Err(Error::Dimension(format!("ragged rows in {what}")));
            }
        }
        let mut m = DMatrix::zeros(nrows, ncols);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    }

    impl TryFrom<ProblemSpec> for Problem {
        type Error = Error;

        fn try_from(spec: ProblemSpec) -> Result<Self, Error> {
            let mut steps = Vec::with_capacity(spec.steps.len());
            for (k, s) in spec.steps.into_iter().enumerate() {
                let step = TimeStep::new(
                    to_matrix(&s.transition, &format!("step {k} transition"))?,
                    to_matrix(&s.process_factor, &format!("step {k} process factor"))?,
                    to_matrix(&s.measurement_map, &format!("step {k} measurement map"))?,
                    to_matrix(&s.measurement_factor, &format!("step {k} measurement factor"))?,
                    DVector::from_vec(s.observation),
                )
                .with_process_penalty(s.process_penalty);
                let step = match s.measurement_penalty {
                    MeasurementPenaltySpec::Single(p) => step.with_measurement_penalty(p)?,
                    MeasurementPenaltySpec::Segmented(sp) => {
                        step.with_measurement_penalties(sp)?
                    }
                };
                let step = match s.state_penalty {
                    Some(p) => step.with_state_penalty(p),
                    None => step,
                };
                steps.push(step);
            }
            Problem::new(DVector::from_vec(spec.initial_state), steps)
        }
    }

    impl From<Problem> for ProblemSpec {
        fn from(p: Problem) -> Self {
            ProblemSpec {
                initial_state: p.initial_state.iter().cloned().collect(),
                steps: p
                    .steps
                    .iter()
                    .map(|s| StepSpec {
                        transition: from_matrix(&s.transition),
                        process_factor: from_matrix(&s.process_factor),
                        measurement_map: from_matrix(&s.measurement_map),
                        measurement_factor: from_matrix(&s.measurement_factor),
                        observation: s.observation.iter().cloned().collect(),
                        process_penalty: s.process_penalty.clone(),
                        measurement_penalty: MeasurementPenaltySpec::Segmented(
                            s.measurement_penalty.clone(),
                        ),
                        state_penalty: s.state_penalty.clone(),
                    })
                    .collect(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(g: f64, c: f64, h: f64, s: f64, y: f64) -> TimeStep {
        TimeStep::new(
            DMatrix::from_element(1, 1, g),
            DMatrix::from_element(1, 1, c),
            DMatrix::from_element(1, 1, h),
            DMatrix::from_element(1, 1, s),
            DVector::from_element(1, y),
        )
    }

    #[test]
    fn layout_accumulates_offsets() {
        let p = Problem::new(
            DVector::zeros(1),
            vec![scalar_step(1.0, 1.0, 1.0, 1.0, 0.5), scalar_step(0.9, 1.0, 1.0, 1.0, 0.7)],
        )
        .unwrap();
        let layout = p.layout();
        assert_eq!(layout.len(), 6);
        assert_eq!(layout.rows(), 4);
        assert_eq!(layout.step(1).process_aux, 3);
        assert_eq!(layout.step(1).state, 5);
        assert_eq!(layout.step(1).measurement_row, 3);
    }

    #[test]
    fn exact_full_state_measurement_is_feasible() {
        let n = 3;
        let step = TimeStep::new(
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, 0),
            DVector::from_vec(vec![4.0, -2.0, 0.3]),
        );
        let p = Problem::new(DVector::zeros(n), vec![step]).unwrap();
        p.validate().unwrap();
    }

    #[test]
    fn conflicting_exact_rows_are_infeasible() {
        let step = TimeStep::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            DMatrix::zeros(2, 0),
            DVector::from_vec(vec![1.0, 2.0]),
        );
        let p = Problem::new(DVector::zeros(2), vec![step]).unwrap();
        match p.validate() {
            Err(Error::Infeasible { step: 0, .. }) | Err(Error::RankDeficient { step: 0, .. }) => {}
            other => panic!("expected infeasibility at step 0, got {other:?}"),
        }
    }

    #[test]
    fn nonsingular_measurement_factor_always_feasible() {
        let step = scalar_step(1.0, 1.0, 1.0, 2.0, 123.0);
        let p = Problem::new(DVector::zeros(1), vec![step]).unwrap();
        p.validate().unwrap();
    }

    #[test]
    fn bias_augmentation_shapes() {
        let g = 0.8;
        let h = 1.5;
        let p = Problem::new(DVector::zeros(1), vec![scalar_step(g, 1.0, h, 1.0, 0.0)]).unwrap();
        let maps = vec![DMatrix::from_element(1, 1, 1.0)];
        let aug = p.augment_bias(1, &maps).unwrap();
        assert_eq!(aug.state_dim(), 2);
        let step = &aug.steps[0];
        assert_eq!(step.transition, DMatrix::from_row_slice(2, 2, &[g, 0.0, 0.0, 1.0]));
        assert_eq!(step.measurement_map, DMatrix::from_row_slice(1, 2, &[h, 1.0]));
        // first step gets an identity factor block for the bias
        assert_eq!(step.process_factor.ncols(), 2);
        assert_eq!(step.process_factor[(1, 1)], 1.0);
    }

    #[test]
    fn bias_augmentation_factor_widths_on_multistep() {
        let steps: Vec<_> = (0..4)
            .map(|_| TimeStep::without_measurement(DMatrix::identity(9, 9), DMatrix::zeros(9, 3)))
            .collect();
        let p = Problem::new(DVector::zeros(9), steps).unwrap();
        let maps: Vec<_> = (0..4).map(|_| DMatrix::zeros(0, 3)).collect();
        let aug = p.augment_bias(3, &maps).unwrap();
        assert_eq!(aug.state_dim(), 12);
        assert_eq!(aug.steps[0].process_factor.shape(), (12, 6));
        for step in &aug.steps[1..] {
            assert_eq!(step.process_factor.shape(), (12, 3));
        }
    }

    #[test]
    fn correlated_noise_augmentation_shapes() {
        let g = 0.8;
        let p = Problem::new(DVector::zeros(1), vec![scalar_step(g, 1.0, 1.0, 1.0, 0.0)]).unwrap();
        let m = DMatrix::from_element(1, 1, 0.9);
        let c = DMatrix::from_element(1, 1, 1.0);
        let aug = p.augment_correlated_noise(&m, &c).unwrap();
        let step = &aug.steps[0];
        assert_eq!(step.transition, DMatrix::from_row_slice(2, 2, &[g, 1.0, 0.0, 0.9]));
        assert_eq!(step.process_factor, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        assert_eq!(step.measurement_map, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
    }

    #[test]
    fn exact_measurement_row_appended() {
        let steps: Vec<_> = (0..6)
            .map(|_| TimeStep::without_measurement(DMatrix::identity(4, 4), DMatrix::identity(4, 4)))
            .collect();
        let p = Problem::new(DVector::zeros(4), steps).unwrap();
        let pinned = p.add_exact_measurement(5, 2, 1.0).unwrap();
        let step = &pinned.steps[5];
        assert_eq!(step.measurement_dim(), 1);
        assert_eq!(step.measurement_rank(), 0);
        assert_eq!(step.measurement_map, DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 1.0, 0.0]));
        assert_eq!(step.observation[0], 1.0);
        pinned.validate().unwrap();

        // a second, conflicting pin of the same component is infeasible
        let conflicted = pinned.add_exact_measurement(5, 2, 2.0).unwrap();
        assert!(conflicted.validate().is_err());
    }

    #[test]
    fn objective_sums_blocks() {
        let p = Problem::new(
            DVector::zeros(1),
            vec![scalar_step(1.0, 1.0, 1.0, 1.0, 0.0), scalar_step(1.0, 1.0, 1.0, 1.0, 0.0)],
        )
        .unwrap();
        let layout = p.layout();
        let z = StackedVector::zeros(layout.clone());
        assert_eq!(p.objective(&z).unwrap(), 0.0);

        let data = DVector::from_vec(vec![1.0, 2.0, 3.0, -1.0, 0.5, 7.0]);
        let z = StackedVector::from_data(layout, data).unwrap();
        // quadratic penalties on u and t blocks only
        let by_hand = 0.5 * (1.0 + 4.0 + 1.0 + 0.25);
        assert!((p.objective(&z).unwrap() - by_hand).abs() < 1e-14);
    }

    #[test]
    fn covariance_factor_truncates_rank() {
        let c = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let q = &c * c.transpose();
        let factor = Problem::covariance_factor(&q).unwrap();
        assert_eq!(factor.ncols(), 1);
        let back = &factor * factor.transpose();
        assert!((back - q).norm() < 1e-10);
    }

    #[test]
    fn problem_json_round_trip() {
        let p = Problem::new(
            DVector::zeros(1),
            vec![scalar_step(0.9, 1.0, 1.0, 1.0, 0.4)
                .with_process_penalty(Penalty::l1())
                .with_measurement_penalty(Penalty::hubnik(0.05, 1.0).unwrap())
                .unwrap()],
        )
        .unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let back: Problem = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }
}
