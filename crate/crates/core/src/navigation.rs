//! Kinematic navigation model for IMU + acoustic-fix tracking.
//!
//! The state is position, velocity, and acceleration in the world frame
//! (nine components, optionally followed by three constant accelerometer
//! bias states). The process model is the Taylor discretization of the
//! constant-jerk kinematics, with a rank-3 process factor that treats the
//! truncation term as the noise source: all nine states are driven by three
//! noise coordinates, so integrals stay exact.
//!
//! Accelerometer rows are always present and map world acceleration into the
//! instrument frame through the attitude rotation; position rows appear only
//! at steps with a fix. Steps without a fix simply drop those rows, which
//! leaves the feasible set unchanged while keeping the Gram matrix positive
//! definite.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Problem, TimeStep};
use crate::penalties::{BlockTerm, Penalty, SeparablePenalty};

/// Kinematic state dimension: position, velocity, acceleration.
pub const STATE_DIM: usize = 9;
/// Number of accelerometer bias states when bias estimation is on.
pub const BIAS_DIM: usize = 3;

/// Loss applied to the whitened accelerometer residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccelLoss {
    /// Deadzone sized to the sensor discretization, huberized tails.
    Hubnik,
    /// Plain least squares.
    Quadratic,
}

/// Model and loss configuration for [`build_problem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavConfig {
    /// IMU sample period in seconds.
    pub sample_period: f64,
    /// Accelerometer noise variance per axis, (m/s^2)^2.
    pub accel_noise_variance: f64,
    /// Position-fix noise variance per axis, m^2. All-zero variances encode
    /// exact fixes (zero-width measurement factor).
    pub usbl_variance: [f64; 3],
    /// Deadzone half-width in physical units (m/s^2); converted to whitened
    /// units internally so it matches the sensor discretization level.
    pub deadzone_epsilon: f64,
    /// Huberization width of the deadzone loss, physical units (m/s^2).
    pub huber_kappa: f64,
    pub accel_loss: AccelLoss,
    /// Penalty on the whitened process innovations.
    pub process_penalty: Penalty,
    /// Penalty on the whitened position-fix residuals.
    pub usbl_penalty: Penalty,
    pub estimate_bias: bool,
    /// Velocity damping for the warm-start propagation.
    pub damping: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            sample_period: 0.5,
            accel_noise_variance: 4e-4,
            usbl_variance: [1e-2; 3],
            deadzone_epsilon: 0.05,
            huber_kappa: 1.0,
            accel_loss: AccelLoss::Hubnik,
            process_penalty: Penalty::l1(),
            usbl_penalty: Penalty::quadratic(),
            estimate_bias: true,
            damping: 0.1,
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_period > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sample period must be positive, got {}",
                self.sample_period
            )));
        }
        if self.accel_noise_variance < 0.0 || self.usbl_variance.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter("variances must be nonnegative".into()));
        }
        if self.deadzone_epsilon < 0.0 {
            return Err(Error::InvalidParameter("deadzone must be nonnegative".into()));
        }
        if !(self.huber_kappa > 0.0) {
            return Err(Error::InvalidParameter("huber width must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(Error::InvalidParameter("damping must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One IMU record: instrument-frame specific acceleration plus attitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub time: f64,
    pub accel: Vector3<f64>,
    pub heading: f64,
    pub pitch: f64,
    pub roll: f64,
}

/// One acoustic position fix, world frame, relative to the first fix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UsblFix {
    pub time: f64,
    pub position: Vector3<f64>,
}

/// Taylor discretization of the constant-jerk kinematics over `dt`:
/// `[[I, I dt, I dt^2/2], [0, I, I dt], [0, 0, I]]`. Higher-order terms are
/// identically zero, so the matrix is exact and forms a semigroup in `dt`.
pub fn discretize_transition(dt: f64) -> DMatrix<f64> {
    let mut f = DMatrix::identity(STATE_DIM, STATE_DIM);
    for i in 0..3 {
        f[(i, 3 + i)] = dt;
        f[(i, 6 + i)] = 0.5 * dt * dt;
        f[(3 + i, 6 + i)] = dt;
    }
    f
}

/// Rank-3 process noise factor: the next Taylor term acts as the error, so
/// the factor stacks `I dt^3/6`, `I dt^2/2`, and `I dt`. Its Gram product is
/// the 9 x 9 process covariance of rank 3.
pub fn process_noise_factor(dt: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(STATE_DIM, 3);
    for i in 0..3 {
        g[(i, i)] = dt * dt * dt / 6.0;
        g[(3 + i, i)] = 0.5 * dt * dt;
        g[(6 + i, i)] = dt;
    }
    g
}

/// World-to-instrument attitude rotation, the product of the transposed
/// elementary heading, pitch, and roll rotations in that order.
pub fn attitude_rotation(heading: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sh, ch) = heading.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rh = Matrix3::new(ch, sh, 0.0, -sh, ch, 0.0, 0.0, 0.0, 1.0);
    let rp = Matrix3::new(cp, 0.0, -sp, 0.0, 1.0, 0.0, sp, 0.0, cp);
    let rr = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, sr, 0.0, -sr, cr);
    rh.transpose() * rp.transpose() * rr.transpose()
}

/// Keeps the first fix and every later fix at least `gap_seconds` after the
/// last kept one.
pub fn subsample_fixes(fixes: &[UsblFix], gap_seconds: f64) -> Vec<UsblFix> {
    let mut kept: Vec<UsblFix> = Vec::new();
    for fix in fixes {
        match kept.last() {
            Some(last) if fix.time - last.time < gap_seconds => {}
            _ => kept.push(*fix),
        }
    }
    kept
}

/// Diagonal square-root factor keeping only the strictly positive variances;
/// zero-variance rows become exact (no whitened coordinate).
fn diagonal_factor(variances: &[f64]) -> DMatrix<f64> {
    let cols: Vec<usize> = (0..variances.len()).filter(|&i| variances[i] > 0.0).collect();
    let mut s = DMatrix::zeros(variances.len(), cols.len());
    for (j, &i) in cols.iter().enumerate() {
        s[(i, j)] = variances[i].sqrt();
    }
    s
}

/// Builds the smoothing problem from an IMU stream and (possibly subsampled)
/// position fixes.
///
/// Fixes are snapped to the nearest IMU timestamp. The deadzone and
/// huberization widths are specified in physical units and divided by the
/// accelerometer noise scale so the loss sees whitened residuals. The prior
/// state holds the first fix with zero velocity and acceleration.
pub fn build_problem(imu: &[ImuSample], usbl: &[UsblFix], cfg: &NavConfig) -> Result<Problem> {
    cfg.validate()?;
    if imu.is_empty() {
        return Err(Error::InvalidParameter("empty IMU stream".into()));
    }
    let dt = cfg.sample_period;
    let t_first = imu[0].time;
    let t_last = imu[imu.len() - 1].time;

    let mut fix_at = vec![None::<Vector3<f64>>; imu.len()];
    for fix in usbl {
        if fix.time < t_first - 0.5 * dt || fix.time > t_last + 0.5 * dt {
            return Err(Error::InvalidParameter(format!(
                "fix at t = {} lies outside the IMU time range [{t_first}, {t_last}]",
                fix.time
            )));
        }
        let idx = imu
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (a.time - fix.time).abs();
                let db = (b.time - fix.time).abs();
                da.partial_cmp(&db).expect("finite timestamps")
            })
            .map(|(i, _)| i)
            .expect("nonempty stream");
        fix_at[idx] = Some(fix.position);
    }

    let accel_std = cfg.accel_noise_variance.sqrt();
    let accel_penalty = match cfg.accel_loss {
        AccelLoss::Quadratic => Penalty::quadratic(),
        AccelLoss::Hubnik => {
            // whitened units: physical widths divided by the noise scale
            let (eps, kappa) = if accel_std > 0.0 {
                (cfg.deadzone_epsilon / accel_std, cfg.huber_kappa / accel_std)
            } else {
                (cfg.deadzone_epsilon, cfg.huber_kappa)
            };
            Penalty::hubnik(eps, kappa)?
        }
    };

    let transition = discretize_transition(dt);
    let gamma = process_noise_factor(dt);
    let accel_factor = diagonal_factor(&[cfg.accel_noise_variance; 3]);
    let usbl_factor = diagonal_factor(&cfg.usbl_variance);

    let mut steps = Vec::with_capacity(imu.len());
    for (k, sample) in imu.iter().enumerate() {
        let rot = attitude_rotation(sample.heading, sample.pitch, sample.roll);
        let has_fix = fix_at[k].is_some();
        let m = if has_fix { 6 } else { 3 };

        let mut map = DMatrix::zeros(m, STATE_DIM);
        let mut y = DVector::zeros(m);
        let mut row0 = 0;
        if let Some(pos) = fix_at[k] {
            for i in 0..3 {
                map[(i, i)] = 1.0;
                y[i] = pos[i];
            }
            row0 = 3;
        }
        for i in 0..3 {
            for j in 0..3 {
                map[(row0 + i, 6 + j)] = rot[(i, j)];
            }
            y[row0 + i] = sample.accel[i];
        }

        let s_usbl = usbl_factor.ncols();
        let s_accel = accel_factor.ncols();
        let mut factor = DMatrix::zeros(m, if has_fix { s_usbl + s_accel } else { s_accel });
        let mut terms = Vec::new();
        if has_fix {
            factor.view_mut((0, 0), (3, s_usbl)).copy_from(&usbl_factor);
            factor
                .view_mut((3, s_usbl), (3, s_accel))
                .copy_from(&accel_factor);
            if s_usbl > 0 {
                terms.push(BlockTerm::new(0, s_usbl, cfg.usbl_penalty.clone()));
            }
            if s_accel > 0 {
                terms.push(BlockTerm::new(s_usbl, s_accel, accel_penalty.clone()));
            }
        } else {
            factor.view_mut((0, 0), (3, s_accel)).copy_from(&accel_factor);
            if s_accel > 0 {
                terms.push(BlockTerm::new(0, s_accel, accel_penalty.clone()));
            }
        }

        let step_transition = if k == 0 {
            DMatrix::identity(STATE_DIM, STATE_DIM)
        } else {
            transition.clone()
        };
        let step = TimeStep::new(step_transition, gamma.clone(), map, factor, y)
            .with_process_penalty(cfg.process_penalty.clone())
            .with_measurement_penalties(SeparablePenalty::new(terms)?)?;
        steps.push(step);
    }

    let mut x0 = DVector::zeros(STATE_DIM);
    if let Some(first) = usbl.first() {
        for i in 0..3 {
            x0[i] = first.position[i];
        }
    }
    let problem = Problem::new(x0, steps)?;

    if cfg.estimate_bias {
        let maps: Vec<DMatrix<f64>> = (0..imu.len())
            .map(|k| {
                let m = if fix_at[k].is_some() { 6 } else { 3 };
                let mut map = DMatrix::zeros(m, BIAS_DIM);
                let row0 = m - 3;
                for i in 0..3 {
                    map[(row0 + i, i)] = 1.0;
                }
                map
            })
            .collect();
        problem.augment_bias(BIAS_DIM, &maps)
    } else {
        Ok(problem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_at_unit_period() {
        let f = discretize_transition(1.0);
        assert_eq!(f[(0, 3)], 1.0);
        assert_eq!(f[(0, 6)], 0.5);
        assert_eq!(f[(3, 6)], 1.0);
        assert_eq!(f[(6, 6)], 1.0);
        assert_eq!(f[(3, 0)], 0.0);
        assert_eq!(discretize_transition(0.0), DMatrix::identity(9, 9));
    }

    #[test]
    fn transition_semigroup() {
        let a = discretize_transition(0.3);
        let b = discretize_transition(1.1);
        let c = discretize_transition(1.4);
        assert!((a * b - c).norm() < 1e-13);
    }

    #[test]
    fn noise_factor_blocks() {
        let g = process_noise_factor(1.0);
        assert!((g[(0, 0)] - 1.0 / 6.0).abs() < 1e-15);
        assert!((g[(3, 0)] - 0.5).abs() < 1e-15);
        assert!((g[(6, 0)] - 1.0).abs() < 1e-15);
        let g2 = process_noise_factor(2.0);
        assert!((g2[(0, 0)] - 8.0 / 6.0).abs() < 1e-15);
        assert!((g2[(3, 0)] - 2.0).abs() < 1e-15);
        assert!((g2[(6, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn noise_covariance_has_rank_three() {
        let g = process_noise_factor(0.7);
        let q = &g * g.transpose();
        assert!((q.clone() - q.transpose()).norm() < 1e-15);
        let eig = nalgebra::SymmetricEigen::new(q);
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let nonzero = eig
            .eigenvalues
            .iter()
            .filter(|&&ev| ev.abs() > 1e-10 * max_ev)
            .count();
        assert_eq!(nonzero, 3);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = attitude_rotation(0.7, -0.2, 1.1);
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((attitude_rotation(0.0, 0.0, 0.0) - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn rotation_quarter_turn_heading() {
        let r = attitude_rotation(std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expected).norm() < 1e-12);
    }

    fn level_imu(n: usize, dt: f64) -> Vec<ImuSample> {
        (0..n)
            .map(|k| ImuSample {
                time: k as f64 * dt,
                accel: Vector3::zeros(),
                heading: 0.0,
                pitch: 0.0,
                roll: 0.0,
            })
            .collect()
    }

    #[test]
    fn measurement_row_counts_depend_on_fixes() {
        let imu = level_imu(5, 1.0);
        let usbl = vec![UsblFix { time: 2.0, position: Vector3::new(1.0, 2.0, 3.0) }];
        let mut cfg = NavConfig::default();
        cfg.sample_period = 1.0;
        cfg.estimate_bias = false;
        let p = build_problem(&imu, &usbl, &cfg).unwrap();
        for (k, step) in p.steps.iter().enumerate() {
            let expected = if k == 2 { 6 } else { 3 };
            assert_eq!(step.measurement_dim(), expected, "step {k}");
        }
        // level attitude: accelerometer block is the identity on the
        // acceleration states
        let accel_block = p.steps[0].measurement_map.view((0, 6), (3, 3)).into_owned();
        assert!((accel_block - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn bias_augmentation_adds_identity_columns() {
        let imu = level_imu(3, 1.0);
        let usbl = vec![UsblFix { time: 0.0, position: Vector3::zeros() }];
        let mut cfg = NavConfig::default();
        cfg.sample_period = 1.0;
        cfg.estimate_bias = true;
        let p = build_problem(&imu, &usbl, &cfg).unwrap();
        assert_eq!(p.state_dim(), 12);
        // accel rows gain +I3 in the bias columns; position rows do not
        let step0 = &p.steps[0];
        assert_eq!(step0.measurement_dim(), 6);
        for i in 0..3 {
            assert_eq!(step0.measurement_map[(i, 9 + i)], 0.0);
            assert_eq!(step0.measurement_map[(3 + i, 9 + i)], 1.0);
        }
    }

    #[test]
    fn subsampling_keeps_first_and_respects_gap() {
        let fixes: Vec<UsblFix> = (0..300)
            .map(|k| UsblFix { time: 2.0 * k as f64, position: Vector3::zeros() })
            .collect();
        assert_eq!(subsample_fixes(&fixes, 0.0).len(), 300);
        let sparse = subsample_fixes(&fixes, 30.0);
        assert_eq!(sparse[0].time, 0.0);
        for pair in sparse.windows(2) {
            assert!(pair[1].time - pair[0].time >= 30.0);
        }
        assert_eq!(sparse.len(), 20);
        assert_eq!(subsample_fixes(&fixes, 1e9).len(), 1);
    }

    #[test]
    fn fixes_outside_range_are_rejected() {
        let imu = level_imu(4, 1.0);
        let usbl = vec![UsblFix { time: 100.0, position: Vector3::zeros() }];
        assert!(build_problem(&imu, &usbl, &NavConfig { sample_period: 1.0, ..Default::default() })
            .is_err());
        assert!(build_problem(&[], &[], &NavConfig::default()).is_err());
    }
}
