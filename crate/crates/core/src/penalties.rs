//! Piecewise linear-quadratic (PLQ) penalties, box indicators, and their
//! proximal operators.
//!
//! Every penalty here is convex, and each scalar kind is nonnegative with
//! value zero at the origin. The proximal operator with step `alpha` is
//!
//! ```text
//! prox(alpha, z) = argmin_x  1/(2 alpha) ||z - x||^2 + f(x)
//! ```
//!
//! evaluated componentwise for the scalar kinds and as a box projection for
//! the indicator. Conjugate proxes are never formed explicitly; they come
//! from the extended Moreau decomposition
//! `prox_{sigma f*}(z) = z - sigma * prox(1/sigma, z/sigma)`.
//!
//! All closed forms below are cross-checked against a derivative-free
//! golden-section minimizer in the test suites; none is trusted on faith.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Penalty shape and parameters. Construct through [`Penalty`].
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyKind {
    /// `x^2 / 2` per element.
    Quadratic,
    /// `|x|` per element.
    L1,
    /// Asymmetric check loss: slope `1 - tau` on positive arguments and
    /// `-tau` on negative ones, `tau` in (0, 1).
    Quantile { tau: f64 },
    /// `x^2 / 2` for `|x| <= kappa`, linear tails of slope `kappa` beyond.
    Huber { kappa: f64 },
    /// Smoothed check loss: quadratic `x^2 / 2` on `[-kappa tau, kappa (1 - tau)]`,
    /// linear tails of slopes `-kappa tau` and `kappa (1 - tau)`.
    QuantileHuber { tau: f64, kappa: f64 },
    /// Deadzone loss `max(|x| - epsilon, 0)`.
    Vapnik { epsilon: f64 },
    /// Huberized deadzone: zero on `[-epsilon, epsilon]`, then a quadratic
    /// ramp `(|x| - epsilon)^2 / 2` of width `kappa`, then linear tails of
    /// slope `kappa`.
    Hubnik { epsilon: f64, kappa: f64 },
    /// `x^2 + |x|` per element. Some references plot the halved form
    /// `x^2/2 + |x|/2`; this is the normalization with a closed-form prox.
    ElasticNet,
    /// Indicator of the box `[lower, upper]`, componentwise against the bound
    /// vectors. Entries may be infinite.
    BoxIndicator { lower: Vec<f64>, upper: Vec<f64> },
}

/// A penalty `scale * rho(.)` with validated parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "spec::PenaltySpec", into = "spec::PenaltySpec")]
pub struct Penalty {
    kind: PenaltyKind,
    scale: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "quantile level must lie in (0, 1), got {tau}"
        )));
    }
    Ok(())
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "huber threshold must be positive and finite, got {kappa}"
        )));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "deadzone half-width must be nonnegative and finite, got {epsilon}"
        )));
    }
    Ok(())
}

impl Penalty {
    /// Validates parameters and builds a penalty with the given scale.
    pub fn new(kind: PenaltyKind, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "penalty scale must be positive and finite, got {scale}"
            )));
        }
        match &kind {
            PenaltyKind::Quadratic | PenaltyKind::L1 | PenaltyKind::ElasticNet => {}
            PenaltyKind::Quantile { tau } => check_tau(*tau)?,
            PenaltyKind::Huber { kappa } => check_kappa(*kappa)?,
            PenaltyKind::QuantileHuber { tau, kappa } => {
                check_tau(*tau)?;
                check_kappa(*kappa)?;
            }
            PenaltyKind::Vapnik { epsilon } => check_epsilon(*epsilon)?,
            PenaltyKind::Hubnik { epsilon, kappa } => {
                check_epsilon(*epsilon)?;
                check_kappa(*kappa)?;
            }
            PenaltyKind::BoxIndicator { lower, upper } => {
                if lower.len() != upper.len() {
                    return Err(Error::Dimension(format!(
                        "box bounds disagree: {} lower vs {} upper",
                        lower.len(),
                        upper.len()
                    )));
                }
                for (i, (&lo, &hi)) in lower.iter().zip(upper).enumerate() {
                    if lo.is_nan() || hi.is_nan() || lo > hi {
                        return Err(Error::InvalidParameter(format!(
                            "box bounds must satisfy lower <= upper, got [{lo}, {hi}] at index {i}"
                        )));
                    }
                }
            }
        }
        Ok(Self { kind, scale })
    }

    pub fn quadratic() -> Self {
        Self { kind: PenaltyKind::Quadratic, scale: 1.0 }
    }

    pub fn l1() -> Self {
        Self { kind: PenaltyKind::L1, scale: 1.0 }
    }

    pub fn quantile(tau: f64) -> Result<Self> {
        Self::new(PenaltyKind::Quantile { tau }, 1.0)
    }

    pub fn huber(kappa: f64) -> Result<Self> {
        Self::new(PenaltyKind::Huber { kappa }, 1.0)
    }

    pub fn quantile_huber(tau: f64, kappa: f64) -> Result<Self> {
        Self::new(PenaltyKind::QuantileHuber { tau, kappa }, 1.0)
    }

    pub fn vapnik(epsilon: f64) -> Result<Self> {
        Self::new(PenaltyKind::Vapnik { epsilon }, 1.0)
    }

    pub fn hubnik(epsilon: f64, kappa: f64) -> Result<Self> {
        Self::new(PenaltyKind::Hubnik { epsilon, kappa }, 1.0)
    }

    pub fn elastic_net() -> Self {
        Self { kind: PenaltyKind::ElasticNet, scale: 1.0 }
    }

    pub fn box_indicator(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        Self::new(PenaltyKind::BoxIndicator { lower, upper }, 1.0)
    }

    /// Uniform box `[lo, hi]^len`.
    pub fn box_uniform(lo: f64, hi: f64, len: usize) -> Result<Self> {
        Self::box_indicator(vec![lo; len], vec![hi; len])
    }

    /// Replaces the multiplicative scale.
    pub fn with_scale(self, scale: f64) -> Result<Self> {
        Self::new(self.kind, scale)
    }

    pub fn kind(&self) -> &PenaltyKind {
        &self.kind
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Intrinsic length for kinds that carry one (the box indicator).
    pub fn intrinsic_len(&self) -> Option<usize> {
        match &self.kind {
            PenaltyKind::BoxIndicator { lower, .. } => Some(lower.len()),
            _ => None,
        }
    }

    /// The penalty of the mirrored argument, `x -> rho(-x)`. For the
    /// asymmetric kinds this swaps the quantile level `tau -> 1 - tau`;
    /// symmetric kinds are unchanged and box bounds are negated and swapped.
    pub fn reflected(&self) -> Self {
        let kind = match &self.kind {
            PenaltyKind::Quantile { tau } => PenaltyKind::Quantile { tau: 1.0 - tau },
            PenaltyKind::QuantileHuber { tau, kappa } => {
                PenaltyKind::QuantileHuber { tau: 1.0 - tau, kappa: *kappa }
            }
            PenaltyKind::BoxIndicator { lower, upper } => PenaltyKind::BoxIndicator {
                lower: upper.iter().map(|v| -v).collect(),
                upper: lower.iter().map(|v| -v).collect(),
            },
            other => other.clone(),
        };
        Self { kind, scale: self.scale }
    }

    /// Evaluates `scale * rho(x)` summed over the slice. Returns `+inf` when a
    /// box indicator is violated.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            PenaltyKind::BoxIndicator { lower, upper } => {
                if lower.len() != x.len() {
                    return f64::INFINITY;
                }
                let inside = x
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .all(|(&v, (&lo, &hi))| v >= lo && v <= hi);
                if inside {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            kind => self.scale * x.iter().map(|&v| eval_scalar(kind, v)).sum::<f64>(),
        }
    }

    /// Componentwise prox with step `alpha`, in place. The scale is folded
    /// into the step: `prox_{alpha (s rho)} = prox_{(alpha s) rho}`.
    pub fn prox_in_place(&self, alpha: f64, x: &mut [f64]) -> Result<()> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "prox step must be positive, got {alpha}"
            )));
        }
        match &self.kind {
            PenaltyKind::BoxIndicator { lower, upper } => {
                if lower.len() != x.len() {
                    return Err(Error::Dimension(format!(
                        "box indicator of length {} applied to slice of length {}",
                        lower.len(),
                        x.len()
                    )));
                }
                for (v, (&lo, &hi)) in x.iter_mut().zip(lower.iter().zip(upper)) {
                    *v = v.clamp(lo, hi);
                }
            }
            kind => {
                let step = alpha * self.scale;
                for v in x.iter_mut() {
                    *v = prox_scalar(kind, step, *v);
                }
            }
        }
        Ok(())
    }

    pub fn prox(&self, alpha: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        self.prox_in_place(alpha, &mut out)?;
        Ok(out)
    }

    /// Prox of the scaled conjugate, `prox_{sigma f*}`, through the extended
    /// Moreau decomposition. The conjugate itself is never formed.
    pub fn prox_conjugate_in_place(&self, sigma: f64, x: &mut [f64]) -> Result<()> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "conjugate prox step must be positive, got {sigma}"
            )));
        }
        match &self.kind {
            PenaltyKind::BoxIndicator { lower, upper } => {
                if lower.len() != x.len() {
                    return Err(Error::Dimension(format!(
                        "box indicator of length {} applied to slice of length {}",
                        lower.len(),
                        x.len()
                    )));
                }
                for (v, (&lo, &hi)) in x.iter_mut().zip(lower.iter().zip(upper)) {
                    *v -= sigma * (*v / sigma).clamp(lo, hi);
                }
            }
            kind => {
                let step = self.scale / sigma;
                for v in x.iter_mut() {
                    *v -= sigma * prox_scalar(kind, step, *v / sigma);
                }
            }
        }
        Ok(())
    }

    pub fn prox_conjugate(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        self.prox_conjugate_in_place(sigma, &mut out)?;
        Ok(out)
    }

    /// Subdifferential of the coordinate `index` at value `x`, as an interval
    /// `(lo, hi)`. `index` only matters for the box indicator, whose normal
    /// cone depends on the coordinate's bounds; scalar kinds ignore it.
    pub fn subdifferential(&self, index: usize, x: f64) -> (f64, f64) {
        match &self.kind {
            PenaltyKind::BoxIndicator { lower, upper } => {
                let lo = lower[index];
                let hi = upper[index];
                let tol = 1e-9 * (1.0 + x.abs());
                let at_lower = (x - lo).abs() <= tol;
                let at_upper = (x - hi).abs() <= tol;
                match (at_lower, at_upper) {
                    (true, true) => (f64::NEG_INFINITY, f64::INFINITY),
                    (true, false) => (f64::NEG_INFINITY, 0.0),
                    (false, true) => (0.0, f64::INFINITY),
                    (false, false) => (0.0, 0.0),
                }
            }
            kind => {
                let (lo, hi) = subdifferential_scalar(kind, x);
                (self.scale * lo, self.scale * hi)
            }
        }
    }
}

fn eval_scalar(kind: &PenaltyKind, x: f64) -> f64 {
    match kind {
        PenaltyKind::Quadratic => 0.5 * x * x,
        PenaltyKind::L1 => x.abs(),
        PenaltyKind::Quantile { tau } => {
            if x >= 0.0 {
                (1.0 - tau) * x
            } else {
                -tau * x
            }
        }
        PenaltyKind::Huber { kappa } => {
            let a = x.abs();
            if a <= *kappa {
                0.5 * x * x
            } else {
                kappa * a - 0.5 * kappa * kappa
            }
        }
        PenaltyKind::QuantileHuber { tau, kappa } => {
            let right = kappa * (1.0 - tau);
            let left = -kappa * tau;
            if x > right {
                right * x - 0.5 * right * right
            } else if x < left {
                left * x - 0.5 * left * left
            } else {
                0.5 * x * x
            }
        }
        PenaltyKind::Vapnik { epsilon } => (x.abs() - epsilon).max(0.0),
        PenaltyKind::Hubnik { epsilon, kappa } => {
            let e = (x.abs() - epsilon).max(0.0);
            if e <= *kappa {
                0.5 * e * e
            } else {
                kappa * e - 0.5 * kappa * kappa
            }
        }
        PenaltyKind::ElasticNet => x * x + x.abs(),
        PenaltyKind::BoxIndicator { .. } => unreachable!("box handled at vector level"),
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    z.signum() * (z.abs() - t).max(0.0)
}

fn quantile_prox(z: f64, step: f64, tau: f64) -> f64 {
    let up = step * (1.0 - tau);
    let down = step * tau;
    if z > up {
        z - up
    } else if z < -down {
        z + down
    } else {
        0.0
    }
}

fn vapnik_prox(z: f64, step: f64, epsilon: f64) -> f64 {
    if z > epsilon + step {
        z - step
    } else if z > epsilon {
        epsilon
    } else if z >= -epsilon {
        z
    } else if z > -epsilon - step {
        -epsilon
    } else {
        z + step
    }
}

/// Prox of the Huberization `g = kappa * env_kappa(f)` in terms of the base
/// prox: `prox_{a g}(z) = (z + a * prox_{kappa (1 + a) f}(z)) / (1 + a)`.
/// This is the composition consistent with the quadratic piece `x^2 / 2`
/// shared by the Huber, quantile-Huber, and hubnik losses.
fn huberized_prox(z: f64, step: f64, kappa: f64, base: impl Fn(f64, f64) -> f64) -> f64 {
    let inner = kappa * (1.0 + step);
    (z + step * base(z, inner)) / (1.0 + step)
}

fn prox_scalar(kind: &PenaltyKind, step: f64, z: f64) -> f64 {
    match kind {
        PenaltyKind::Quadratic => z / (1.0 + step),
        PenaltyKind::L1 => soft_threshold(z, step),
        PenaltyKind::Quantile { tau } => quantile_prox(z, step, *tau),
        PenaltyKind::Huber { kappa } => huberized_prox(z, step, *kappa, soft_threshold),
        PenaltyKind::QuantileHuber { tau, kappa } => {
            huberized_prox(z, step, *kappa, |v, s| quantile_prox(v, s, *tau))
        }
        PenaltyKind::Vapnik { epsilon } => vapnik_prox(z, step, *epsilon),
        PenaltyKind::Hubnik { epsilon, kappa } => {
            huberized_prox(z, step, *kappa, |v, s| vapnik_prox(v, s, *epsilon))
        }
        PenaltyKind::ElasticNet => {
            let shrink = 1.0 + 2.0 * step;
            soft_threshold(z / shrink, step / shrink)
        }
        PenaltyKind::BoxIndicator { .. } => unreachable!("box handled at vector level"),
    }
}

fn subdifferential_scalar(kind: &PenaltyKind, x: f64) -> (f64, f64) {
    let tol = 1e-9 * (1.0 + x.abs());
    match kind {
        PenaltyKind::Quadratic => (x, x),
        PenaltyKind::L1 => {
            if x.abs() <= tol {
                (-1.0, 1.0)
            } else {
                let s = x.signum();
                (s, s)
            }
        }
        PenaltyKind::Quantile { tau } => {
            if x.abs() <= tol {
                (-tau, 1.0 - tau)
            } else if x > 0.0 {
                (1.0 - tau, 1.0 - tau)
            } else {
                (-tau, -tau)
            }
        }
        PenaltyKind::Huber { kappa } => {
            let g = x.clamp(-kappa, *kappa);
            (g, g)
        }
        PenaltyKind::QuantileHuber { tau, kappa } => {
            let g = x.clamp(-kappa * tau, kappa * (1.0 - tau));
            (g, g)
        }
        PenaltyKind::Vapnik { epsilon } => {
            if (x - epsilon).abs() <= tol {
                (0.0, 1.0)
            } else if (x + epsilon).abs() <= tol {
                (-1.0, 0.0)
            } else if x.abs() < *epsilon {
                (0.0, 0.0)
            } else {
                let s = x.signum();
                (s, s)
            }
        }
        PenaltyKind::Hubnik { epsilon, kappa } => {
            let g = if x.abs() <= *epsilon {
                0.0
            } else {
                (x.abs() - epsilon).min(*kappa) * x.signum()
            };
            (g, g)
        }
        PenaltyKind::ElasticNet => {
            if x.abs() <= tol {
                (-1.0, 1.0)
            } else {
                let g = 2.0 * x + x.signum();
                (g, g)
            }
        }
        PenaltyKind::BoxIndicator { .. } => unreachable!("box handled at vector level"),
    }
}

/// One contiguous block of a separable penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTerm {
    pub start: usize,
    pub len: usize,
    pub penalty: Penalty,
}

impl BlockTerm {
    pub fn new(start: usize, len: usize, penalty: Penalty) -> Self {
        Self { start, len, penalty }
    }
}

/// A blockwise-separable penalty over a flat vector. Blocks must be disjoint;
/// coordinates not covered by any term carry zero penalty and are left
/// unchanged by the prox.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BlockTerm>", into = "Vec<BlockTerm>")]
pub struct SeparablePenalty {
    terms: Vec<BlockTerm>,
}

impl SeparablePenalty {
    pub fn new(mut terms: Vec<BlockTerm>) -> Result<Self> {
        terms.sort_by_key(|t| t.start);
        let mut end = 0usize;
        for term in &terms {
            if term.start < end {
                return Err(Error::Dimension(format!(
                    "separable penalty blocks overlap at offset {}",
                    term.start
                )));
            }
            if let Some(n) = term.penalty.intrinsic_len() {
                if n != term.len {
                    return Err(Error::Dimension(format!(
                        "box indicator of length {n} assigned to block of length {}",
                        term.len
                    )));
                }
            }
            end = term.start + term.len;
        }
        Ok(Self { terms })
    }

    /// No penalty at all.
    pub fn empty() -> Self {
        Self { terms: Vec::new() }
    }

    /// A single penalty over `[0, len)`.
    pub fn uniform(penalty: Penalty, len: usize) -> Result<Self> {
        Self::new(vec![BlockTerm::new(0, len, penalty)])
    }

    pub fn terms(&self) -> &[BlockTerm] {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Smallest vector length this penalty can be applied to.
    pub fn min_len(&self) -> usize {
        self.terms.last().map_or(0, |t| t.start + t.len)
    }

    /// Shifts every block by `offset`; used when stacking per-block penalties
    /// into one penalty over a concatenated vector.
    pub fn shifted(&self, offset: usize) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| BlockTerm::new(t.start + offset, t.len, t.penalty.clone()))
                .collect(),
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if self.min_len() > len {
            return Err(Error::Dimension(format!(
                "separable penalty needs at least {} coordinates, slice has {}",
                self.min_len(),
                len
            )));
        }
        Ok(())
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        self.check_len(z.len())?;
        let mut total = 0.0;
        for term in &self.terms {
            total += term.penalty.eval(&z[term.start..term.start + term.len]);
        }
        Ok(total)
    }

    /// Blockwise prox; uncovered coordinates pass through unchanged.
    pub fn prox_in_place(&self, alpha: f64, z: &mut [f64]) -> Result<()> {
        self.check_len(z.len())?;
        for term in &self.terms {
            term.penalty
                .prox_in_place(alpha, &mut z[term.start..term.start + term.len])?;
        }
        Ok(())
    }

    pub fn prox(&self, alpha: f64, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = z.to_vec();
        self.prox_in_place(alpha, &mut out)?;
        Ok(out)
    }

    /// Blockwise conjugate prox. Uncovered coordinates carry zero penalty, so
    /// their conjugate is the indicator of `{0}` and the prox zeroes them.
    pub fn prox_conjugate_in_place(&self, sigma: f64, z: &mut [f64]) -> Result<()> {
        self.check_len(z.len())?;
        let mut cursor = 0usize;
        for term in &self.terms {
            z[cursor..term.start].fill(0.0);
            term.penalty
                .prox_conjugate_in_place(sigma, &mut z[term.start..term.start + term.len])?;
            cursor = term.start + term.len;
        }
        z[cursor..].fill(0.0);
        Ok(())
    }
}

impl TryFrom<Vec<BlockTerm>> for SeparablePenalty {
    type Error = Error;

    fn try_from(terms: Vec<BlockTerm>) -> Result<Self> {
        Self::new(terms)
    }
}

impl From<SeparablePenalty> for Vec<BlockTerm> {
    fn from(sp: SeparablePenalty) -> Self {
        sp.terms
    }
}

mod spec {
    //! JSON wire form for penalties, e.g.
    //! `{"kind":"hubnik","epsilon":0.05,"kappa":1.0,"scale":1.0}`.
    //! Box bounds use `null` for unbounded entries.

    use serde::{Deserialize, Serialize};

    use super::{Penalty, PenaltyKind};
    use crate::error::Error;

    fn default_scale() -> f64 {
        1.0
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct PenaltySpec {
        pub kind: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        pub tau: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        pub kappa: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        pub epsilon: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        pub lower: Option<Vec<Option<f64>>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        pub upper: Option<Vec<Option<f64>>>,
        #[serde(default = "default_scale")]
        pub scale: f64,
    }

    fn require(value: Option<f64>, kind: &str, name: &str) -> Result<f64, Error> {
        value.ok_or_else(|| {
            Error::InvalidParameter(format!("penalty kind '{kind}' requires field '{name}'"))
        })
    }

    impl TryFrom<PenaltySpec> for Penalty {
        type Error = Error;

        fn try_from(spec: PenaltySpec) -> Result<Self, Error> {
            let kind = match spec.kind.as_str() {
                "quadratic" => PenaltyKind::Quadratic,
                "l1" => PenaltyKind::L1,
                "quantile" => PenaltyKind::Quantile { tau: require(spec.tau, "quantile", "tau")? },
                "huber" => PenaltyKind::Huber { kappa: require(spec.kappa, "huber", "kappa")? },
                "quantile_huber" => PenaltyKind::QuantileHuber {
                    tau: require(spec.tau, "quantile_huber", "tau")?,
                    kappa: require(spec.kappa, "quantile_huber", "kappa")?,
                },
                "vapnik" => PenaltyKind::Vapnik {
                    epsilon: require(spec.epsilon, "vapnik", "epsilon")?,
                },
                "hubnik" => PenaltyKind::Hubnik {
                    epsilon: require(spec.epsilon, "hubnik", "epsilon")?,
                    kappa: require(spec.kappa, "hubnik", "kappa")?,
                },
                "elastic_net" => PenaltyKind::ElasticNet,
                "box" => {
                    let lower = spec.lower.ok_or_else(|| {
                        Error::InvalidParameter("penalty kind 'box' requires 'lower'".into())
                    })?;
                    let upper = spec.upper.ok_or_else(|| {
                        Error::InvalidParameter("penalty kind 'box' requires 'upper'".into())
                    })?;
                    PenaltyKind::BoxIndicator {
                        lower: lower
                            .into_iter()
                            .map(|v| v.unwrap_or(f64::NEG_INFINITY))
                            .collect(),
                        upper: upper.into_iter().map(|v| v.unwrap_or(f64::INFINITY)).collect(),
                    }
                }
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown penalty kind '{other}'"
                    )))
                }
            };
            Penalty::new(kind, spec.scale)
        }
    }

    impl From<Penalty> for PenaltySpec {
        fn from(p: Penalty) -> Self {
            let scale = p.scale();
            let mut spec = PenaltySpec {
                kind: String::new(),
                tau: None,
                kappa: None,
                epsilon: None,
                lower: None,
                upper: None,
                scale,
            };
            match p.kind() {
                PenaltyKind::Quadratic => spec.kind = "quadratic".into(),
                PenaltyKind::L1 => spec.kind = "l1".into(),
                PenaltyKind::Quantile { tau } => {
                    spec.kind = "quantile".into();
                    spec.tau = Some(*tau);
                }
                PenaltyKind::Huber { kappa } => {
                    spec.kind = "huber".into();
                    spec.kappa = Some(*kappa);
                }
                PenaltyKind::QuantileHuber { tau, kappa } => {
                    spec.kind = "quantile_huber".into();
                    spec.tau = Some(*tau);
                    spec.kappa = Some(*kappa);
                }
                PenaltyKind::Vapnik { epsilon } => {
                    spec.kind = "vapnik".into();
                    spec.epsilon = Some(*epsilon);
                }
                PenaltyKind::Hubnik { epsilon, kappa } => {
                    spec.kind = "hubnik".into();
                    spec.epsilon = Some(*epsilon);
                    spec.kappa = Some(*kappa);
                }
                PenaltyKind::ElasticNet => spec.kind = "elastic_net".into(),
                PenaltyKind::BoxIndicator { lower, upper } => {
                    spec.kind = "box".into();
                    spec.lower = Some(
                        lower
                            .iter()
                            .map(|&v| if v.is_finite() { Some(v) } else { None })
                            .collect(),
                    );
                    spec.upper = Some(
                        upper
                            .iter()
                            .map(|&v| if v.is_finite() { Some(v) } else { None })
                            .collect(),
                    );
                }
            }
            spec
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_eval_matches_linear_tail() {
        let p = Penalty::huber(1.0).unwrap();
        assert!((p.eval(&[2.0]) - 1.5).abs() < 1e-15);
        assert_eq!(p.eval(&[0.0]), 0.0);
    }

    #[test]
    fn vapnik_deadzone_is_free() {
        let p = Penalty::vapnik(0.5).unwrap();
        assert_eq!(p.eval(&[0.3]), 0.0);
        assert!((p.eval(&[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn every_kind_vanishes_at_origin() {
        let kinds = [
            Penalty::quadratic(),
            Penalty::l1(),
            Penalty::quantile(0.3).unwrap(),
            Penalty::huber(1.0).unwrap(),
            Penalty::quantile_huber(0.3, 1.0).unwrap(),
            Penalty::vapnik(0.5).unwrap(),
            Penalty::hubnik(0.05, 1.0).unwrap(),
            Penalty::elastic_net(),
        ];
        for p in kinds {
            assert_eq!(p.eval(&[0.0, 0.0]), 0.0, "{:?}", p.kind());
        }
    }

    #[test]
    fn l1_prox_soft_thresholds() {
        let p = Penalty::l1();
        assert_eq!(p.prox(0.5, &[2.0]).unwrap(), vec![1.5]);
        assert_eq!(p.prox(3.0, &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn huber_prox_linear_region() {
        let p = Penalty::huber(1.0).unwrap();
        let out = p.prox(1.0, &[3.0]).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-12);
        // quadratic region: prox = z / (1 + alpha)
        let out = p.prox(1.0, &[0.5]).unwrap();
        assert!((out[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn quadratic_prox_fixes_origin() {
        let p = Penalty::quadratic();
        assert_eq!(p.prox(1.0, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn box_prox_clamps() {
        let p = Penalty::box_uniform(-1.0, 1.0, 3).unwrap();
        assert_eq!(p.prox(7.5, &[5.0, -3.0, 0.2]).unwrap(), vec![1.0, -1.0, 0.2]);
    }

    #[test]
    fn vapnik_prox_fixes_deadzone() {
        let p = Penalty::vapnik(0.5).unwrap();
        for z in [-0.5, -0.2, 0.0, 0.3, 0.5] {
            assert_eq!(p.prox(2.0, &[z]).unwrap(), vec![z]);
        }
    }

    #[test]
    fn hubnik_prox_fixes_deadzone() {
        let p = Penalty::hubnik(0.05, 1.0).unwrap();
        let out = p.prox(1.0, &[0.04]).unwrap();
        assert!((out[0] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn hubnik_zero_deadzone_equals_huber() {
        let hubnik = Penalty::hubnik(0.0, 0.7).unwrap();
        let huber = Penalty::huber(0.7).unwrap();
        for z in [-4.0, -1.0, -0.3, 0.0, 0.2, 0.9, 2.5] {
            let a = hubnik.prox(1.3, &[z]).unwrap()[0];
            let b = huber.prox(1.3, &[z]).unwrap()[0];
            assert!((a - b).abs() < 1e-14, "z = {z}");
            assert!((hubnik.eval(&[z]) - huber.eval(&[z])).abs() < 1e-14);
        }
    }

    #[test]
    fn quantile_huber_at_half_is_huber() {
        let qh = Penalty::quantile_huber(0.5, 1.0).unwrap();
        let h = Penalty::huber(0.5).unwrap();
        for z in [-3.0, -0.4, 0.0, 0.1, 0.6, 2.0] {
            let a = qh.prox(0.8, &[z]).unwrap()[0];
            let b = h.prox(0.8, &[z]).unwrap()[0];
            assert!((a - b).abs() < 1e-14, "z = {z}");
        }
    }

    #[test]
    fn conjugate_prox_of_l1_projects_onto_unit_interval() {
        let p = Penalty::l1();
        assert!((p.prox_conjugate(1.0, &[0.4]).unwrap()[0] - 0.4).abs() < 1e-15);
        assert!((p.prox_conjugate(1.0, &[3.0]).unwrap()[0] - 1.0).abs() < 1e-15);
        // scaled penalty: conjugate is the indicator of [-s, s]
        let p = Penalty::l1().with_scale(2.5).unwrap();
        assert!((p.prox_conjugate(0.7, &[3.0]).unwrap()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn moreau_identity_at_unit_step() {
        let kinds = [
            Penalty::quadratic(),
            Penalty::l1(),
            Penalty::quantile(0.3).unwrap(),
            Penalty::huber(1.0).unwrap(),
            Penalty::quantile_huber(0.7, 0.4).unwrap(),
            Penalty::vapnik(0.5).unwrap(),
            Penalty::hubnik(0.05, 1.0).unwrap(),
            Penalty::elastic_net(),
        ];
        for p in kinds {
            for z in [-2.7, -0.1, 0.0, 0.3, 1.9] {
                let a = p.prox(1.0, &[z]).unwrap()[0];
                let b = p.prox_conjugate(1.0, &[z]).unwrap()[0];
                assert!((a + b - z).abs() < 1e-12, "{:?} z={z}", p.kind());
            }
        }
    }

    #[test]
    fn separable_prox_applies_blockwise() {
        let sp = SeparablePenalty::new(vec![
            BlockTerm::new(0, 2, Penalty::l1()),
            BlockTerm::new(2, 2, Penalty::quadratic()),
        ])
        .unwrap();
        let out = sp.prox(1.0, &[2.0, -2.0, 2.0, -2.0]).unwrap();
        assert_eq!(out, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn separable_single_block_matches_plain_prox() {
        let sp = SeparablePenalty::uniform(Penalty::l1(), 3).unwrap();
        let z = [2.0, -0.3, 1.1];
        assert_eq!(sp.prox(0.5, &z).unwrap(), Penalty::l1().prox(0.5, &z).unwrap());
    }

    #[test]
    fn empty_separable_penalty_is_identity() {
        let sp = SeparablePenalty::empty();
        let z = [1.0, -2.0];
        assert_eq!(sp.prox(1.0, &z).unwrap(), z.to_vec());
        assert_eq!(sp.eval(&z).unwrap(), 0.0);
        // conjugate of the zero penalty pins the dual to zero
        assert_eq!(sp.prox_conjugate_in_place(1.0, &mut [1.0, -2.0]).map(|_| ()), Ok(()));
    }

    #[test]
    fn uncovered_coordinates_pass_through() {
        let sp = SeparablePenalty::new(vec![BlockTerm::new(1, 1, Penalty::l1())]).unwrap();
        let out = sp.prox(1.0, &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(out, vec![5.0, 4.0, 5.0]);
        let mut dual = [5.0, 5.0, 5.0];
        sp.prox_conjugate_in_place(1.0, &mut dual).unwrap();
        assert_eq!(dual, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn overlapping_blocks_rejected() {
        let err = SeparablePenalty::new(vec![
            BlockTerm::new(0, 2, Penalty::l1()),
            BlockTerm::new(1, 2, Penalty::l1()),
        ]);
        assert!(err.is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Penalty::quantile(0.0).is_err());
        assert!(Penalty::quantile(1.0).is_err());
        assert!(Penalty::huber(0.0).is_err());
        assert!(Penalty::vapnik(-0.1).is_err());
        assert!(Penalty::box_indicator(vec![1.0], vec![0.0]).is_err());
        assert!(Penalty::l1().with_scale(0.0).is_err());
        assert!(Penalty::l1().prox_in_place(0.0, &mut [1.0]).is_err());
        assert!(Penalty::l1().prox_conjugate_in_place(-1.0, &mut [1.0]).is_err());
    }

    #[test]
    fn penalty_json_round_trip() {
        let text = r#"{"kind":"hubnik","epsilon":0.05,"kappa":1.0,"scale":1.0}"#;
        let p: Penalty = serde_json::from_str(text).unwrap();
        assert_eq!(p, Penalty::hubnik(0.05, 1.0).unwrap());
        let back = serde_json::to_string(&p).unwrap();
        let again: Penalty = serde_json::from_str(&back).unwrap();
        assert_eq!(again, p);

        let boxed = Penalty::box_indicator(vec![f64::NEG_INFINITY, -1.0], vec![1.0, f64::INFINITY])
            .unwrap();
        let text = serde_json::to_string(&boxed).unwrap();
        let again: Penalty = serde_json::from_str(&text).unwrap();
        assert_eq!(again, boxed);
    }

    #[test]
    fn reflection_swaps_quantile_level() {
        let p = Penalty::quantile(0.3).unwrap();
        let r = p.reflected();
        for z in [-1.7, -0.2, 0.4, 2.2] {
            assert!((r.eval(&[z]) - p.eval(&[-z])).abs() < 1e-15);
        }
    }
}
