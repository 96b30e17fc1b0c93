//! Bregman geometry on the action simplex: divergences, proximal updates,
//! strong-convexity moduli and probability floors on optimal actions.
//!
//! Rows are plain slices over actions. `bregman(kind, x, y)` is the divergence
//! of `x` from the reference `y`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivergenceKind {
    Kl,
    /// Tsallis divergence with entropic index `p` in `(0, 1)`.
    Tsallis(f64),
}

impl DivergenceKind {
    pub fn tsallis(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidArgument(format!("Tsallis index p={p} outside (0,1)")));
        }
        Ok(Self::Tsallis(p))
    }

    /// Largest divergence from the uniform row to a vertex of the simplex.
    pub fn uniform_radius(&self, n_actions: usize) -> f64 {
        let na = n_actions as f64;
        match *self {
            Self::Kl => na.ln(),
            Self::Tsallis(p) => na.powf(1.0 - p) - 1.0,
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Kl => write!(f, "kl"),
            Self::Tsallis(p) => write!(f, "tsallis:{p}"),
        }
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    /// `kl` or `tsallis:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("kl") {
            return Ok(Self::Kl);
        }
        match s.split_once(':') {
            Some((name, p)) if name.eq_ignore_ascii_case("tsallis") => {
                let p: f64 = p
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad Tsallis index `{p}`")))?;
                Self::tsallis(p)
            }
            _ => Err(Error::InvalidArgument(format!("unknown divergence `{s}`"))),
        }
    }
}

fn check_interior(y: &[f64]) -> Result<()> {
    if y.iter().all(|&v| v > 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonInteriorReference)
    }
}

/// Bregman divergence of `x` from the interior reference `y`.
pub fn bregman(kind: DivergenceKind, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("rows differ in length".into()));
    }
    check_interior(y)?;
    let d = match kind {
        DivergenceKind::Kl => x
            .iter()
            .zip(y)
            .filter(|(&xi, _)| xi > 0.0)
            .map(|(&xi, &yi)| xi * (xi / yi).ln())
            .sum::<f64>(),
        DivergenceKind::Tsallis(p) => x
            .iter()
            .zip(y)
            .map(|(&xi, &yi)| -xi.powf(p) + (1.0 - p) * yi.powf(p) + p * xi * yi.powf(p - 1.0))
            .sum::<f64>(),
    };
    Ok(d.max(0.0))
}

fn check_update_inputs(pi_row: &[f64], q_row: &[f64], eta: f64) -> Result<()> {
    if pi_row.len() != q_row.len() || pi_row.is_empty() {
        return Err(Error::InvalidArgument("policy and Q rows differ in length".into()));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("stepsize eta={eta} must be finite and >= 0")));
    }
    if q_row.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite Q estimate".into()));
    }
    check_interior(pi_row)
}

/// Closed-form KL proximal step: `x(a) ∝ pi(a) exp(-eta q(a))`.
///
/// Computed in log space after subtracting the largest exponent. Entries that
/// still underflow are floored at the smallest positive normal float so the
/// result stays interior.
pub fn kl_update(pi_row: &[f64], q_row: &[f64], eta: f64) -> Result<Vec<f64>> {
    check_update_inputs(pi_row, q_row, eta)?;
    let logits: Vec<f64> = pi_row.iter().zip(q_row).map(|(p, q)| p.ln() - eta * q).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = out.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::ZeroMass);
    }
    for x in &mut out {
        *x = (*x / total).max(f64::MIN_POSITIVE);
    }
    Ok(out)
}

/// Number of bisection steps guaranteeing sup-norm accuracy `eps`.
pub fn bisection_steps(n_actions: usize, p: f64, eps: f64) -> usize {
    let na = n_actions as f64;
    (2.0 * na * na / ((1.0 - p) * eps)).log2().ceil().max(1.0) as usize
}

/// Dual problem of the Tsallis proximal step for one state.
#[derive(Debug, Clone)]
pub struct TsallisDual {
    pub q: Vec<f64>,
    pub p: f64,
    pub lo: f64,
    pub hi: f64,
}

const PSI_CLAMP: f64 = 1e-300;
const BRACKET_TOL: f64 = 1e-12;

impl TsallisDual {
    pub fn new(pi_row: &[f64], q_row: &[f64], eta: f64, p: f64) -> Self {
        let q: Vec<f64> = pi_row
            .iter()
            .zip(q_row)
            .map(|(&pi, &qv)| eta * qv + p * pi.powf(p - 1.0))
            .collect();
        let qmin = q.iter().copied().fold(f64::INFINITY, f64::min);
        let na = q.len() as f64;
        Self { lo: qmin - p * na.powf(1.0 - p), hi: qmin - p, q, p }
    }

    pub fn psi(&self, a: usize, mu: f64) -> f64 {
        (self.p / (self.q[a] - mu).max(PSI_CLAMP)).powf(1.0 / (1.0 - self.p))
    }

    /// `sum_a psi_a(mu) - 1`; increasing on `[lo, hi]`.
    pub fn phi(&self, mu: f64) -> f64 {
        (0..self.q.len()).map(|a| self.psi(a, mu)).sum::<f64>() - 1.0
    }

    /// Fixed-step bisection; returns the midpoint of the final interval.
    pub fn bisect(&self, steps: usize) -> Result<f64> {
        let (flo, fhi) = (self.phi(self.lo), self.phi(self.hi));
        if flo > BRACKET_TOL || fhi < -BRACKET_TOL {
            return Err(Error::BracketViolated { lo: flo, hi: fhi });
        }
        let (mut lo, mut hi) = (self.lo, self.hi);
        for _ in 0..steps {
            let mid = 0.5 * (lo + hi);
            if self.phi(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Normalized primal row at multiplier `mu`.
    pub fn primal(&self, mu: f64) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.q.len()).map(|a| self.psi(a, mu)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    }
}

/// Tsallis proximal step solved by bisection on the simplex multiplier,
/// accurate to `eps` in sup-norm.
pub fn tsallis_update(pi_row: &[f64], q_row: &[f64], eta: f64, p: f64, eps: f64) -> Result<Vec<f64>> {
    check_update_inputs(pi_row, q_row, eta)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("Tsallis index p={p} outside (0,1)")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("accuracy eps={eps} outside (0,1)")));
    }
    if pi_row.len() == 1 {
        return Ok(vec![1.0]);
    }
    let dual = TsallisDual::new(pi_row, q_row, eta, p);
    let mu = dual.bisect(bisection_steps(pi_row.len(), p, eps))?;
    Ok(dual.primal(mu))
}

/// Proximal step for either geometry; `eps` only affects Tsallis.
pub fn proximal_update(kind: DivergenceKind, pi_row: &[f64], q_row: &[f64], eta: f64, eps: f64) -> Result<Vec<f64>> {
    match kind {
        DivergenceKind::Kl => kl_update(pi_row, q_row, eta),
        DivergenceKind::Tsallis(p) => tsallis_update(pi_row, q_row, eta, p, eps),
    }
}

/// Modulus of strong convexity with respect to the l1 norm.
pub fn strong_convexity_modulus(kind: DivergenceKind, n_actions: usize) -> f64 {
    match kind {
        DivergenceKind::Kl => 1.0,
        DivergenceKind::Tsallis(p) => p * (1.0 - p) / n_actions as f64,
    }
}

/// Lower bound on `pi(a*)` implied by `(1-gamma) D(pi*, pi) <= d_cap` for a
/// deterministic `pi*` selecting `a*`.
pub fn divergence_floor(kind: DivergenceKind, d_cap: f64, gamma: f64, _n_actions: usize) -> f64 {
    let r = d_cap / (1.0 - gamma);
    match kind {
        DivergenceKind::Kl => (-r).exp(),
        DivergenceKind::Tsallis(p) => ((r + 1.0) / p).powf(1.0 / (p - 1.0)),
    }
}

/// Floor used by the exploration schedules.
///
/// For KL it equals [`divergence_floor`]. For Tsallis it drops the `+1` in
/// favour of a factor `|A|^(1-p) / (|A|^(1-p) - 1)`, which yields the closed
/// forms `(c / ((1-gamma) p))^(1/(p-1)) / |A|` for `d_cap = c (|A|^(1-p) - 1)`.
/// It never exceeds the tight floor once `d_cap >= (1-gamma)(|A|^(1-p) - 1)`.
pub fn schedule_floor(kind: DivergenceKind, d_cap: f64, gamma: f64, n_actions: usize) -> Result<f64> {
    Ok(log_schedule_floor(kind, d_cap, gamma, n_actions)?.exp())
}

/// Natural log of [`schedule_floor`], finite even where the floor underflows.
pub fn log_schedule_floor(kind: DivergenceKind, d_cap: f64, gamma: f64, n_actions: usize) -> Result<f64> {
    match kind {
        DivergenceKind::Kl => Ok(-d_cap / (1.0 - gamma)),
        DivergenceKind::Tsallis(p) => {
            if n_actions < 2 {
                return Err(Error::InvalidArgument("schedule floor needs at least two actions".into()));
            }
            let w = (n_actions as f64).powf(1.0 - p);
            Ok((d_cap * w / ((w - 1.0) * (1.0 - gamma) * p)).ln() / (p - 1.0))
        }
    }
}
