//! The stochastic policy mirror descent loop, its parameter schedules, and the
//! printed optimality-gap bounds it is checked against.
//!
//! A run records exact telemetry every iteration: the objective of the current
//! iterate, the estimation noise against the exact Q-function, the accumulated
//! noise seen from every start state, the mass on a fixed optimal action, and
//! per-state certificates of the proximal three-point inequality.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;

use crate::divergence::{self, DivergenceKind};
use crate::error::{Error, Result};
use crate::evaluators::{self, EvalKind, EvalSpec};
use crate::mdp::{self, Mdp, MixingProfile, Policy, QTable};
use crate::trajectory::{self, Start, StreamId, Trajectory};

/// Inner accuracy of the Tsallis bisection.
pub const EPS_INNER: f64 = 1e-10;
/// Tolerance defining near-optimal action sets.
pub const TIE_TOL: f64 = 1e-8;
/// Relative slack allowed on the three-point certificate.
pub const THREE_POINT_TOL: f64 = 1e-9;
const OPTIMAL_TOL: f64 = 1e-12;
const CERTIFICATE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Evaluator {
    Exact,
    Vbe1,
    Vbe2,
    TomcMulti,
    TomcSingle,
}

impl Evaluator {
    pub fn eval_kind(self) -> EvalKind {
        match self {
            Self::Exact => EvalKind::Exact,
            Self::Vbe1 => EvalKind::Vbe1,
            Self::Vbe2 => EvalKind::Vbe2,
            Self::TomcMulti | Self::TomcSingle => EvalKind::Tomc,
        }
    }

    fn is_tomc(self) -> bool {
        matches!(self, Self::TomcMulti | Self::TomcSingle)
    }
}

impl fmt::Display for Evaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Vbe1 => "vbe1",
            Self::Vbe2 => "vbe2",
            Self::TomcMulti => "tomc_multi",
            Self::TomcSingle => "tomc_single",
        })
    }
}

impl FromStr for Evaluator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "exact" => Self::Exact,
            "vbe1" => Self::Vbe1,
            "vbe2" => Self::Vbe2,
            "tomc_multi" => Self::TomcMulti,
            "tomc_single" => Self::TomcSingle,
            other => return Err(Error::InvalidArgument(format!("unknown evaluator `{other}`"))),
        })
    }
}

/// Explicit values replacing the preset schedule entries.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScheduleOverrides {
    pub eta: Option<f64>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpmdConfig {
    pub divergence: DivergenceKind,
    pub evaluator: Evaluator,
    pub k: usize,
    pub delta: f64,
    pub eps_target: f64,
    pub overrides: ScheduleOverrides,
    /// Caps the trajectory length actually simulated; the resolved value is still reported.
    pub max_traj_len: Option<usize>,
    pub seed: u64,
    pub run_index: u64,
    /// Start distribution of the reported objective; uniform when `None`.
    pub vartheta: Option<Vec<f64>>,
    pub eps_inner: f64,
    /// Horizon of the mixing fit; `10 |S|^2` when `None`.
    pub mixing_horizon: Option<usize>,
}

impl SpmdConfig {
    pub fn new(divergence: DivergenceKind, evaluator: Evaluator, k: usize) -> Self {
        Self {
            divergence,
            evaluator,
            k,
            delta: 0.1,
            eps_target: 0.2,
            overrides: ScheduleOverrides::default(),
            max_traj_len: None,
            seed: 0,
            run_index: 0,
            vartheta: None,
            eps_inner: EPS_INNER,
            mixing_horizon: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta={} outside (0,1)", self.delta)));
        }
        if let Some(eta) = self.overrides.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::InvalidArgument(format!("eta={eta} must be finite and >= 0")));
            }
        }
        if self.max_traj_len == Some(0) {
            return Err(Error::InvalidArgument("max_traj_len must be positive".into()));
        }
        if !(self.eps_inner > 0.0 && self.eps_inner < 1.0) {
            return Err(Error::InvalidArgument("eps_inner outside (0,1)".into()));
        }
        Ok(())
    }
}

/// Smallest `n >= n_min` with `f(n) <= level`, for `f` that is non-increasing
/// beyond `peak`. `floor_before_peak` is a lower bound on `f` over
/// `n_min..=peak`; when `level` is below it the search starts at the peak.
/// `None` when no `n` below `2^62` qualifies.
fn smallest_n(
    f: impl Fn(usize) -> f64,
    level: f64,
    n_min: usize,
    peak: f64,
    floor_before_peak: f64,
) -> Option<usize> {
    const LIMIT: usize = 1 << 62;
    let peak = if peak.is_finite() && peak < LIMIT as f64 { peak.ceil().max(0.0) as usize } else { LIMIT };
    let peak = peak.max(n_min);
    let mut lo = if level < floor_before_peak {
        peak
    } else {
        match (n_min..=peak).find(|&n| f(n) <= level) {
            Some(n) => return Some(n),
            None => peak,
        }
    };
    if lo == n_min && f(lo) <= level {
        return Some(lo);
    }
    let mut hi = lo.max(1);
    while f(hi) > level {
        lo = hi;
        hi = hi.checked_mul(2).filter(|&h| h <= LIMIT)?;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if f(mid) <= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Argmax of `(n+1) (1-u)^(n-1)` over real `n`.
fn tail_peak(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else if u <= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / (-u).ln_1p() - 1.0
    }
}

/// Later of the peaks of `(n+1) gamma^(n-1)` and `(n+1) (1-u)^(n-1)`, with its base.
fn dominant_peak(gamma: f64, u: f64) -> (f64, f64) {
    let (pg, pu) = (tail_peak(1.0 - gamma), tail_peak(u));
    if pg >= pu {
        (pg, gamma)
    } else {
        (pu, 1.0 - u)
    }
}

/// `eps_n` of the VBE guarantee.
pub fn vbe_eps_n(n: usize, gamma: f64, profile: &MixingProfile) -> f64 {
    let nu = profile.nu_min;
    2.0 * evaluators::omc_tail(n, gamma, profile, nu) + 2.0 * evaluators::vbe1_extra(n, gamma, profile, nu)
}

/// VBE stepsize and the smallest `n` whose bias term `eps_n / (1-gamma)`
/// is at most `eps_target / 2` (`usize::MAX` when out of range).
pub fn schedule_vbe(
    k: usize,
    n_actions: usize,
    gamma: f64,
    profile: &MixingProfile,
    eps_target: f64,
) -> Result<(f64, usize)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if !(eps_target > 0.0) {
        return Err(Error::InvalidArgument(format!("eps_target={eps_target} must be positive")));
    }
    let na = n_actions as f64;
    let eta = (2.0 * (1.0 - gamma).powi(2) * na.ln() / (k as f64 * na)).sqrt();
    let t = profile.t_mix(profile.nu_min) as f64;
    let u = profile.nu_min / (2.0 * t);
    let (peak, base) = dominant_peak(gamma, u);
    // the term with the later peak is increasing up to it, so it stays above its value at n = 2
    let floor = 4.0 * 3.0 * base / (1.0 - gamma).powi(2);
    let n = smallest_n(|n| vbe_eps_n(n, gamma, profile) / (1.0 - gamma), eps_target / 2.0, 2, peak, floor);
    Ok((eta, n.unwrap_or(usize::MAX)))
}

/// Parameters of a TOMC-based schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TomcSchedule {
    pub eta: f64,
    /// `usize::MAX` when no representable length meets the tail level.
    pub n: usize,
    pub m: usize,
    pub tau: f64,
    /// `ln tau` before the underflow guard.
    pub log_tau: f64,
    pub eps: f64,
    /// Divergence budget `D` (multi-trajectory) or `D_Z` (single trajectory).
    pub d_cap: f64,
    pub mu: f64,
    pub z: Option<f64>,
    pub zeta: Option<f64>,
}

fn tomc_common(n_actions: usize, kind: DivergenceKind, k: usize, delta: f64) -> Result<(f64, f64)> {
    if n_actions < 2 {
        return Err(Error::InvalidArgument("TOMC schedules need at least two actions".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta={delta} outside (0,1)")));
    }
    Ok((kind.uniform_radius(n_actions), divergence::strong_convexity_modulus(kind, n_actions)))
}

/// Smallest `n` with the OMC tail at stationary mass `nu_lower * tau` below
/// `eps / (4|A|)`, or `usize::MAX` when out of range.
fn tomc_length(gamma: f64, profile: &MixingProfile, tau: f64, eps: f64, n_actions: usize) -> usize {
    let x = profile.nu_min * tau;
    let t = profile.t_mix(x) as f64;
    let (peak, _) = dominant_peak(gamma, x / (2.0 * t));
    let floor = 4.0 / (1.0 - gamma);
    smallest_n(|n| evaluators::omc_tail(n, gamma, profile, x), eps / (4.0 * n_actions as f64), 1, peak, floor)
        .unwrap_or(usize::MAX)
}

/// Truncation threshold and its log: the schedule floor capped at `1/|A|`.
/// A threshold that underflows is raised to the smallest positive normal
/// float, where it truncates nothing the proximal updates can produce.
fn tomc_floor(kind: DivergenceKind, d_cap: f64, gamma: f64, n_actions: usize) -> Result<(f64, f64)> {
    let log_tau = divergence::log_schedule_floor(kind, d_cap, gamma, n_actions)?.min(-(n_actions as f64).ln());
    Ok((log_tau.exp().max(f64::MIN_POSITIVE), log_tau))
}

/// Multi-trajectory TOMC schedule for a uniform initial policy.
pub fn schedule_tomc_multi(
    k: usize,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    profile: &MixingProfile,
    delta: f64,
    kind: DivergenceKind,
) -> Result<TomcSchedule> {
    let (d0, mu) = tomc_common(n_actions, kind, k, delta)?;
    let m_big = 1.0 / (1.0 - gamma);
    let kf = k as f64;
    let na = n_actions as f64;
    let d_cap = 2.0 * d0;
    let eta = 0.5 * (d_cap * mu / (kf * m_big * m_big)).sqrt();
    let eps = 0.5 * m_big * (d_cap / (mu * kf)).sqrt();
    let (tau, log_tau) = tomc_floor(kind, d_cap, gamma, n_actions)?;
    let pairs = (n_states * n_actions) as f64;
    let m = (na * na / ((1.0 - gamma).powi(2) * eps * eps) * (2.0 * pairs * kf / delta).ln()).ceil();
    let n = tomc_length(gamma, profile, tau, eps, n_actions);
    Ok(TomcSchedule { eta, n, m: m.max(1.0) as usize, tau, log_tau, eps, d_cap, mu, z: None, zeta: None })
}

/// Single-trajectory TOMC schedule (`m = 1`) for a uniform initial policy.
pub fn schedule_tomc_single(
    k: usize,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    profile: &MixingProfile,
    delta: f64,
    kind: DivergenceKind,
) -> Result<TomcSchedule> {
    let (d0, mu) = tomc_common(n_actions, kind, k, delta)?;
    let m_big = 1.0 / (1.0 - gamma);
    let kf = k as f64;
    let log_term = (n_states as f64 * kf / delta).ln();
    let z = 4.0 * log_term.sqrt() / (1.0 - gamma);
    let eps = 2.0 / (1.0 - gamma) * (log_term / kf).sqrt();
    let d_cap = (2.0 + z) * d0;
    let zeta = (2.0 * d_cap * mu / ((2.0 + z) * m_big * m_big)).sqrt().min(d_cap / (2.0 + z));
    let eta = zeta / kf.sqrt();
    let (tau, log_tau) = tomc_floor(kind, d_cap, gamma, n_actions)?;
    let n = tomc_length(gamma, profile, tau, eps, n_actions);
    Ok(TomcSchedule { eta, n, m: 1, tau, log_tau, eps, d_cap, mu, z: Some(z), zeta: Some(zeta) })
}

/// Schedule constants in force for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedSchedule {
    pub eta: f64,
    /// Length from the schedule (or override) before `max_traj_len` is applied;
    /// `usize::MAX` when it exceeds the representable range.
    pub n_resolved: usize,
    /// Length actually simulated.
    pub n: usize,
    pub m: usize,
    pub tau: f64,
    pub eps: Option<f64>,
    pub z: Option<f64>,
    pub d_cap: Option<f64>,
    pub mu: f64,
    pub zeta: Option<f64>,
}

impl ResolvedSchedule {
    pub fn eval_spec(&self, evaluator: Evaluator) -> EvalSpec {
        EvalSpec { kind: evaluator.eval_kind(), n: self.n, m: self.m, tau: self.tau }
    }
}

/// Presets per evaluator, then overrides, then the length cap.
///
/// The noiseless evaluator uses the multi-trajectory TOMC stepsize.
pub fn resolve_schedule(
    config: &SpmdConfig,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    profile: &MixingProfile,
) -> Result<ResolvedSchedule> {
    let kind = config.divergence;
    let mu = divergence::strong_convexity_modulus(kind, n_actions);
    let ov = config.overrides;
    let mut s = match config.evaluator {
        Evaluator::Exact => {
            let d_cap = 2.0 * kind.uniform_radius(n_actions);
            let m_big = 1.0 / (1.0 - gamma);
            let eta = 0.5 * (d_cap * mu / (config.k as f64 * m_big * m_big)).sqrt();
            ResolvedSchedule {
                eta,
                n_resolved: 0,
                n: 0,
                m: 0,
                tau: 1.0,
                eps: Some(0.0),
                z: None,
                d_cap: Some(d_cap),
                mu,
                zeta: None,
            }
        }
        Evaluator::Vbe1 | Evaluator::Vbe2 => {
            let (eta, n) = if ov.eta.is_some() && ov.n.is_some() {
                (0.0, 0)
            } else {
                schedule_vbe(config.k, n_actions, gamma, profile, config.eps_target)?
            };
            ResolvedSchedule {
                eta,
                n_resolved: n,
                n,
                m: 1,
                tau: 1.0,
                eps: None,
                z: None,
                d_cap: None,
                mu,
                zeta: None,
            }
        }
        Evaluator::TomcMulti | Evaluator::TomcSingle => {
            let t = if config.evaluator == Evaluator::TomcMulti {
                schedule_tomc_multi(config.k, n_states, n_actions, gamma, profile, config.delta, kind)?
            } else {
                schedule_tomc_single(config.k, n_states, n_actions, gamma, profile, config.delta, kind)?
            };
            ResolvedSchedule {
                eta: t.eta,
                n_resolved: t.n,
                n: t.n,
                m: t.m,
                tau: t.tau,
                eps: Some(t.eps),
                z: t.z,
                d_cap: Some(t.d_cap),
                mu,
                zeta: t.zeta,
            }
        }
    };
    if let Some(eta) = ov.eta {
        s.eta = eta;
    }
    if config.evaluator != Evaluator::Exact {
        if let Some(n) = ov.n {
            s.n_resolved = n;
        }
        if let (Some(m), Evaluator::TomcMulti) = (ov.m, config.evaluator) {
            s.m = m;
        }
        if let Some(tau) = ov.tau {
            s.tau = tau;
        }
        s.n = config.max_traj_len.map_or(s.n_resolved, |cap| s.n_resolved.min(cap));
        if s.n == usize::MAX {
            return Err(Error::InvalidArgument(
                "resolved trajectory length is beyond the representable range; set max_traj_len".into(),
            ));
        }
        s.eval_spec(config.evaluator).validate()?;
    }
    Ok(s)
}

/// Printed optimality-gap guarantees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapBound {
    /// Expected gap of a uniformly drawn iterate under VBE evaluation.
    Vbe,
    /// Best-iterate gap with multi-trajectory TOMC, generic divergence.
    TomcMulti,
    /// The multi-trajectory bound with the estimation-noise term removed.
    TomcMultiNoiseless,
    /// Best-iterate gap with single-trajectory TOMC, generic divergence.
    TomcSingle,
    TomcMultiKl,
    TomcMultiTsallisHalf,
    TomcSingleKl,
    TomcSingleTsallisHalf,
}

impl GapBound {
    pub const ALL: [GapBound; 8] = [
        Self::Vbe,
        Self::TomcMulti,
        Self::TomcMultiNoiseless,
        Self::TomcSingle,
        Self::TomcMultiKl,
        Self::TomcMultiTsallisHalf,
        Self::TomcSingleKl,
        Self::TomcSingleTsallisHalf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vbe => "vbe",
            Self::TomcMulti => "tomc_multi",
            Self::TomcMultiNoiseless => "tomc_multi_noiseless",
            Self::TomcSingle => "tomc_single",
            Self::TomcMultiKl => "tomc_multi_kl",
            Self::TomcMultiTsallisHalf => "tomc_multi_tsallis_half",
            Self::TomcSingleKl => "tomc_single_kl",
            Self::TomcSingleTsallisHalf => "tomc_single_tsallis_half",
        }
    }
}

impl FromStr for GapBound {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::UnknownBound(s.to_string()))
    }
}

/// Inputs to [`bound_rhs`]; each bound reads only the fields it needs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BoundParams {
    pub k: Option<usize>,
    pub n_states: Option<usize>,
    pub n_actions: Option<usize>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub d_cap: Option<f64>,
    pub mu: Option<f64>,
    pub z: Option<f64>,
    pub zeta: Option<f64>,
    pub eps_n: Option<f64>,
}

fn need<T>(v: Option<T>, name: &'static str) -> Result<T> {
    v.ok_or(Error::MissingParam(name))
}

/// Evaluates the right-hand side of a named gap bound.
pub fn bound_rhs(bound: GapBound, params: &BoundParams) -> Result<f64> {
    let gamma = need(params.gamma, "gamma")?;
    let k = need(params.k, "k")? as f64;
    let h = 1.0 / (1.0 - gamma);
    let big_m = h;
    Ok(match bound {
        GapBound::Vbe => {
            let na = need(params.n_actions, "n_actions")? as f64;
            let eps_n = need(params.eps_n, "eps_n")?;
            (2.0 * na * na.ln() / (k * (1.0 - gamma).powi(4))).sqrt() + eps_n * h
        }
        GapBound::TomcMulti | GapBound::TomcMultiNoiseless => {
            let d = need(params.d_cap, "d_cap")?;
            let mu = need(params.mu, "mu")?;
            let c = if bound == GapBound::TomcMulti { 3.0 } else { 2.0 };
            c * big_m * h * (d / (mu * k)).sqrt()
        }
        GapBound::TomcSingle => {
            let d = need(params.d_cap, "d_cap")?;
            let mu = need(params.mu, "mu")?;
            let z = need(params.z, "z")?;
            let zeta = need(params.zeta, "zeta")?;
            let sk = k.sqrt();
            d / ((2.0 + z) * zeta * sk) * h + zeta * big_m * big_m / (2.0 * mu * sk) * h + z / sk * h
        }
        GapBound::TomcMultiKl => {
            let na = need(params.n_actions, "n_actions")? as f64;
            3.0 * big_m * h * (2.0 * na.ln() / k).sqrt()
        }
        GapBound::TomcMultiTsallisHalf => {
            let na = need(params.n_actions, "n_actions")? as f64;
            12.0 * big_m * h * (na.powf(1.5) / k).sqrt()
        }
        GapBound::TomcSingleKl => {
            let na = need(params.n_actions, "n_actions")? as f64;
            let ns = need(params.n_states, "n_states")? as f64;
            let delta = need(params.delta, "delta")?;
            let z = 4.0 * (ns * k / delta).ln().sqrt() * h;
            let ln_a = na.ln();
            let zeta = (2.0 * ln_a * (1.0 - gamma).powi(2)).sqrt().min(ln_a);
            let sk = k.sqrt();
            ln_a / (zeta * sk) * h + zeta * big_m * big_m / (2.0 * sk) * h + z / sk * h
        }
        GapBound::TomcSingleTsallisHalf => {
            let na = need(params.n_actions, "n_actions")? as f64;
            let ns = need(params.n_states, "n_states")? as f64;
            let delta = need(params.delta, "delta")?;
            4.0 * big_m * h * (na.powf(1.5) / k).sqrt() + 4.0 * (ns * k / delta).ln().sqrt() * h * h / k.sqrt()
        }
    })
}

/// One proximal step at every state.
pub fn spmd_step(
    policy: &Policy,
    q_est: &QTable,
    eta: f64,
    kind: DivergenceKind,
    eps_inner: f64,
) -> Result<Policy> {
    let (ns, na) = (policy.n_states(), policy.n_actions());
    if q_est.n_states() != ns || q_est.n_actions() != na {
        return Err(Error::InvalidArgument("Q estimate does not match the policy".into()));
    }
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        probs.extend(divergence::proximal_update(kind, policy.row(s), q_est.row(s), eta, eps_inner)?);
    }
    Policy::from_flat(ns, na, probs)
}

/// Excess of the three-point inequality
/// `eta <q, new - cmp> + D(new, old) <= D(cmp, old) - D(cmp, new)`
/// and the magnitude of its terms.
pub fn three_point_excess(
    kind: DivergenceKind,
    old: &[f64],
    new: &[f64],
    q_row: &[f64],
    eta: f64,
    cmp: &[f64],
) -> Result<(f64, f64)> {
    let linear: f64 = q_row.iter().zip(new.iter().zip(cmp)).map(|(q, (n, c))| eta * q * (n - c)).sum();
    let d_new_old = divergence::bregman(kind, new, old)?;
    let d_cmp_old = divergence::bregman(kind, cmp, old)?;
    let d_cmp_new = divergence::bregman(kind, cmp, new)?;
    let linear_mag: f64 = q_row.iter().zip(new.iter().zip(cmp)).map(|(q, (n, c))| (eta * q * (n - c)).abs()).sum();
    let scale = 1f64.max(linear_mag).max(d_new_old).max(d_cmp_old).max(d_cmp_new);
    Ok((linear + d_new_old - d_cmp_old + d_cmp_new, scale))
}

/// One row of run telemetry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRow {
    pub iter: usize,
    pub f_pi: f64,
    pub best_gap: f64,
    pub samples_cum: u64,
    /// `min_s pi_t(a*_s | s)` for the fixed deterministic optimal policy.
    pub min_opt_prob: f64,
    /// `max_s Y_{t+1, s}`, the accumulated noise after this iteration.
    pub noise_max: f64,
    pub eta: f64,
}

/// Telemetry and outcome of one SPMD run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<IterRow>,
    /// `Y_{t+1, s}` per iteration and start state.
    pub noise: Vec<Vec<f64>>,
    pub final_policy: Policy,
    pub best_policy: Policy,
    pub schedule: ResolvedSchedule,
    pub f_star: f64,
    /// `(1/k) sum_t f(pi_t) - f*`, the expected gap of a uniformly drawn iterate.
    pub mean_iterate_gap: f64,
    /// Gap of one iterate drawn uniformly at random.
    pub random_iterate_gap: f64,
    /// Mixing fit of the initial policy, the basis of the schedule.
    pub profile: MixingProfile,
    /// Running minimum of the fitted stationary mass over audited iterates.
    pub nu_lower: f64,
    /// First iteration whose accumulated noise left `Z sqrt(t+1)`, if any.
    pub envelope_violation: Option<usize>,
    pub floor_checks: usize,
    pub floor_violations: usize,
    pub three_point_checks: usize,
    pub three_point_violations: usize,
    pub three_point_worst: f64,
    pub bregman_checks: usize,
    pub bregman_violations: usize,
}

impl RunRecord {
    pub fn final_gap(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.best_gap)
    }

    pub fn envelope_held(&self) -> bool {
        self.envelope_violation.is_none()
    }

    /// `iter,f_pi,best_gap,samples_cum,min_opt_prob,noise_max,eta` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,f_pi,best_gap,samples_cum,min_opt_prob,noise_max,eta\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iter, r.f_pi, r.best_gap, r.samples_cum, r.min_opt_prob, r.noise_max, r.eta
            )
            .unwrap();
        }
        out
    }
}

fn at(iter: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::AtIteration { iter, source: Box::new(e) }
}

/// Online chains: each slot continues from where its previous trajectory ended.
struct Chains {
    heads: Vec<usize>,
    seed: u64,
    run: u64,
}

impl Chains {
    fn new(slots: usize, n_states: usize, seed: u64, run: u64) -> Self {
        Self { heads: (0..slots).map(|j| j % n_states).collect(), seed, run }
    }

    fn draw(&mut self, mdp: &Mdp, policy: &Policy, iter: usize, slot: usize, n: usize) -> Result<Trajectory> {
        let index = iter as u64 * self.heads.len() as u64 + slot as u64;
        let stream = StreamId::new(self.seed, self.run, index);
        let traj = trajectory::simulate(mdp, policy, Start::State(self.heads[slot]), n, stream)?;
        self.heads[slot] = traj.final_state();
        Ok(traj)
    }
}

fn estimate(
    mdp: &Mdp,
    policy: &Policy,
    exact: &QTable,
    evaluator: Evaluator,
    sched: &ResolvedSchedule,
    chains: &mut Chains,
    iter: usize,
) -> Result<(QTable, u64)> {
    let gamma = mdp.gamma();
    let n = sched.n;
    Ok(match evaluator {
        Evaluator::Exact => (exact.clone(), 0),
        Evaluator::Vbe1 => {
            let xi_v = chains.draw(mdp, policy, iter, 0, n)?;
            let xi_q = chains.draw(mdp, policy, iter, 1, n)?;
            (evaluators::vbe1(&xi_v, &xi_q, policy, n, gamma)?, 2 * n as u64)
        }
        Evaluator::Vbe2 => {
            let xi = chains.draw(mdp, policy, iter, 0, n)?;
            (evaluators::vbe2(&xi, policy, n, gamma)?, n as u64)
        }
        Evaluator::TomcMulti | Evaluator::TomcSingle => {
            let trajs = (0..sched.m)
                .map(|j| chains.draw(mdp, policy, iter, j, n))
                .collect::<Result<Vec<_>>>()?;
            (evaluators::tomc(&trajs, policy, n, sched.tau, gamma)?, (sched.m * n) as u64)
        }
    })
}

fn random_simplex_row<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-300).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Runs SPMD from the uniform policy for `config.k` iterations.
pub fn run(mdp: &Mdp, config: &SpmdConfig) -> Result<RunRecord> {
    config.validate()?;
    let (ns, na, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let kind = config.divergence;
    let k = config.k;
    let vartheta = config.vartheta.clone().unwrap_or_else(|| vec![1.0 / ns as f64; ns]);

    let (_, q_star) = mdp::optimal_values(mdp, OPTIMAL_TOL)?;
    let pi_star = mdp::greedy_policy(&q_star);
    let a_star: Vec<usize> = (0..ns)
        .map(|s| pi_star.row(s).iter().position(|&p| p == 1.0).expect("deterministic row"))
        .collect();
    let f_star = mdp::objective(mdp, &pi_star, &vartheta)?;
    let d_star = mdp::visitation_measures(mdp, &pi_star)?;

    let mut policy = Policy::uniform(ns, na);
    let horizon = config.mixing_horizon.unwrap_or_else(|| mdp::default_mixing_horizon(ns));
    let profile = mdp::mixing_constants(mdp, &policy, horizon).map_err(at(0))?;
    let sched = resolve_schedule(config, ns, na, gamma, &profile)?;
    let eta = sched.eta;
    let big_m = 1.0 / (1.0 - gamma);
    let d0_max = (0..ns)
        .map(|s| divergence::bregman(kind, pi_star.row(s), policy.row(s)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);

    let slots = match config.evaluator {
        Evaluator::Exact => 0,
        Evaluator::Vbe1 => 2,
        Evaluator::Vbe2 | Evaluator::TomcSingle => 1,
        Evaluator::TomcMulti => sched.m,
    };
    let mut chains = Chains::new(slots, ns, config.seed, config.run_index);
    let mut cert_rng = StreamId::new(config.seed, config.run_index, CERTIFICATE_STREAM).rng();
    let refit_every = k.div_ceil(10).max(1);

    let mut rec = RunRecord {
        rows: Vec::with_capacity(k),
        noise: Vec::with_capacity(k),
        final_policy: policy.clone(),
        best_policy: policy.clone(),
        schedule: sched,
        f_star,
        mean_iterate_gap: 0.0,
        random_iterate_gap: f64::NAN,
        nu_lower: profile.nu_min,
        profile,
        envelope_violation: None,
        floor_checks: 0,
        floor_violations: 0,
        three_point_checks: 0,
        three_point_violations: 0,
        three_point_worst: f64::NEG_INFINITY,
        bregman_checks: 0,
        bregman_violations: 0,
    };
    let mut y = vec![0.0; ns];
    let mut best_gap = f64::INFINITY;
    let mut gaps = Vec::with_capacity(k);
    let mut samples = 0u64;
    // noise conditions of the Bregman-to-optimum bound held at every iteration so far
    let mut noise_ok = true;

    for t in 0..k {
        if t > 0 && t % refit_every == 0 {
            let fit = mdp::mixing_constants(mdp, &policy, horizon).map_err(at(t))?;
            rec.nu_lower = rec.nu_lower.min(fit.nu_min);
        }
        let v = mdp::exact_value(mdp, &policy).map_err(at(t))?;
        let q = mdp::backup(mdp, &v);
        let f_pi: f64 = vartheta.iter().zip(&v).map(|(w, v)| w * v).sum();
        let gap = f_pi - f_star;
        gaps.push(gap);
        if gap < best_gap {
            best_gap = gap;
            rec.best_policy = policy.clone();
        }
        let min_opt_prob = (0..ns).map(|s| policy.prob(s, a_star[s])).fold(1.0, f64::min);

        if config.evaluator.is_tomc() {
            let protected = match config.evaluator {
                Evaluator::TomcSingle => rec.envelope_violation.is_none(),
                _ => noise_ok,
            };
            if protected {
                rec.floor_checks += 1;
                if min_opt_prob < sched.tau * (1.0 - 1e-12) {
                    rec.floor_violations += 1;
                }
            }
        }

        let (q_est, used) =
            estimate(mdp, &policy, &q, config.evaluator, &sched, &mut chains, t).map_err(at(t))?;
        samples += used;
        let noise = evaluators::noise_record(&q, &q_est, &policy, &pi_star, &d_star)?;
        for (ys, x) in y.iter_mut().zip(&noise.increments) {
            *ys += x;
        }
        let noise_max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if let Some(z) = sched.z {
            if rec.envelope_violation.is_none() && noise_max > z * ((t + 1) as f64).sqrt() {
                rec.envelope_violation = Some(t);
            }
        }
        if let Some(eps) = sched.eps {
            let worst_pair = noise.pairing.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            noise_ok &= worst_pair <= eps && q_est.max_abs() <= big_m * (1.0 + 1e-12);
        }

        let next = spmd_step(&policy, &q_est, eta, kind, config.eps_inner).map_err(at(t))?;

        for s in 0..ns {
            let cmp = random_simplex_row(&mut cert_rng, na);
            for c in [cmp.as_slice(), pi_star.row(s)] {
                let (excess, scale) =
                    three_point_excess(kind, policy.row(s), next.row(s), q_est.row(s), eta, c).map_err(at(t))?;
                rec.three_point_checks += 1;
                rec.three_point_worst = rec.three_point_worst.max(excess / scale);
                if excess > THREE_POINT_TOL * scale {
                    rec.three_point_violations += 1;
                }
            }
        }

        if let (Some(eps), true) = (sched.eps, noise_ok) {
            if config.evaluator.is_tomc() || config.evaluator == Evaluator::Exact {
                let worst = (0..ns)
                    .map(|s| divergence::bregman(kind, pi_star.row(s), next.row(s)))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(0.0, f64::max);
                let steps = (t + 1) as f64;
                let rhs = d0_max + eta * eta * big_m * big_m * steps / (2.0 * sched.mu) + eta * steps * eps;
                rec.bregman_checks += 1;
                if (1.0 - gamma) * worst > rhs + 1e-9 * rhs.max(1.0) {
                    rec.bregman_violations += 1;
                }
            }
        }

        rec.rows.push(IterRow {
            iter: t,
            f_pi,
            best_gap,
            samples_cum: samples,
            min_opt_prob,
            noise_max,
            eta,
        });
        rec.noise.push(y.clone());
        policy = next;
    }

    rec.mean_iterate_gap = gaps.iter().sum::<f64>() / k as f64;
    rec.random_iterate_gap = gaps[cert_rng.gen_range(0..k)];
    rec.final_policy = policy;
    Ok(rec)
}
