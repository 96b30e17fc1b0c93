//! Online policy-evaluation operators: on-policy Monte Carlo (OMC) for Q and V,
//! value-based estimation (VBE-I, VBE-II), truncated OMC (TOMC), plus the
//! closed-form bias bounds and the noise bookkeeping used by the SPMD loop.
//!
//! Every estimator reads trajectories produced by [`crate::trajectory::simulate`]
//! and never touches the transition kernel.

use crate::error::{Error, Result};
use crate::mdp::{MixingProfile, Policy, QTable, VTable};
use crate::trajectory::{self, Trajectory};

/// Smallest policy value VBE will divide by.
pub const DIVISION_GUARD: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    OmcQ,
    OmcV,
    Vbe1,
    Vbe2,
    Tomc,
    /// Returns the exact Q-function; used for noiseless baselines.
    Exact,
}

/// Trajectory length `n`, count `m` and truncation threshold `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSpec {
    pub kind: EvalKind,
    pub n: usize,
    pub m: usize,
    pub tau: f64,
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        let min_n = match self.kind {
            EvalKind::Vbe1 | EvalKind::Vbe2 => 2,
            EvalKind::Exact => 0,
            _ => 1,
        };
        if self.n < min_n {
            return Err(Error::InvalidArgument(format!("n={} below {min_n} for {:?}", self.n, self.kind)));
        }
        if self.kind != EvalKind::Exact && self.m == 0 {
            return Err(Error::InvalidArgument("m must be at least 1".into()));
        }
        if self.kind == EvalKind::Tomc && !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidArgument(format!("tau={} outside (0,1]", self.tau)));
        }
        Ok(())
    }
}

/// Single-trajectory OMC estimate of `Q(z)`: the discounted cost from the
/// first visit of `z` up to step `n-1`, or 0 if `z` is not visited.
pub fn omc_q_single(traj: &Trajectory, z: (usize, usize), n: usize, gamma: f64) -> Result<f64> {
    let tau = trajectory::first_hit_z(traj, z, n)?;
    let g = trajectory::discounted_suffix_sums(traj, n, gamma)?;
    Ok(g[tau])
}

fn nonempty(trajs: &[Trajectory]) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::InvalidArgument("need at least one trajectory".into()));
    }
    Ok(())
}

/// Entrywise average of single-trajectory OMC estimates over `trajs`.
pub fn omc_q_batch(
    trajs: &[Trajectory],
    n: usize,
    gamma: f64,
    n_states: usize,
    n_actions: usize,
) -> Result<QTable> {
    nonempty(trajs)?;
    let mut q = QTable::zeros(n_states, n_actions);
    let w = 1.0 / trajs.len() as f64;
    for traj in trajs {
        let hits = trajectory::first_hits_pairs(traj, n, n_states, n_actions)?;
        let g = trajectory::discounted_suffix_sums(traj, n, gamma)?;
        for (v, &h) in q.values_mut().iter_mut().zip(&hits) {
            *v += w * g[h];
        }
    }
    Ok(q)
}

/// OMC estimate of `V`, started at first state visits and averaged over `trajs`.
pub fn omc_v(trajs: &[Trajectory], n: usize, gamma: f64, n_states: usize) -> Result<VTable> {
    nonempty(trajs)?;
    let mut v = vec![0.0; n_states];
    let w = 1.0 / trajs.len() as f64;
    for traj in trajs {
        let hits = trajectory::first_hits_states(traj, n, n_states)?;
        let g = trajectory::discounted_suffix_sums(traj, n, gamma)?;
        for (x, &h) in v.iter_mut().zip(&hits) {
            *x += w * g[h];
        }
    }
    Ok(v)
}

fn importance_weight(policy: &Policy, s: usize, a: usize) -> Result<f64> {
    let p = policy.prob(s, a);
    if p < DIVISION_GUARD {
        return Err(Error::NonInteriorPolicy { state: s, action: a, prob: p });
    }
    Ok(1.0 / p)
}

/// VBE-I: importance-weighted one-step backup along `xi_q` onto an OMC value
/// estimate built from the independent trajectory `xi_v`.
pub fn vbe1(xi_v: &Trajectory, xi_q: &Trajectory, policy: &Policy, n: usize, gamma: f64) -> Result<QTable> {
    if xi_v.stream() == xi_q.stream() {
        return Err(Error::SharedStream(xi_q.stream().index));
    }
    let ns = policy.n_states();
    let v_hat = omc_v(std::slice::from_ref(xi_v), n, gamma, ns)?;
    let hits = trajectory::first_hits_states(xi_q, n, ns)?;
    let mut q = QTable::zeros(ns, policy.n_actions());
    for (s, &tau) in hits.iter().enumerate() {
        if tau == n {
            continue;
        }
        let step = xi_q.steps()[tau];
        let w = importance_weight(policy, s, step.action)?;
        q.set(s, step.action, w * (step.cost + gamma * v_hat[xi_q.state(tau + 1)]));
    }
    Ok(q)
}

/// VBE-II: importance-weighted discounted cost from the first visit of each state.
pub fn vbe2(xi: &Trajectory, policy: &Policy, n: usize, gamma: f64) -> Result<QTable> {
    let ns = policy.n_states();
    let hits = trajectory::first_hits_states(xi, n, ns)?;
    let g = trajectory::discounted_suffix_sums(xi, n, gamma)?;
    let mut q = QTable::zeros(ns, policy.n_actions());
    for (s, &tau) in hits.iter().enumerate() {
        if tau == n {
            continue;
        }
        let a = xi.steps()[tau].action;
        q.set(s, a, importance_weight(policy, s, a)? * g[tau]);
    }
    Ok(q)
}

/// TOMC: batch OMC, with every entry whose policy value is below `tau`
/// replaced by the trivial upper bound `1/(1-gamma)`.
pub fn tomc(trajs: &[Trajectory], policy: &Policy, n: usize, tau: f64, gamma: f64) -> Result<QTable> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau={tau} outside (0,1]")));
    }
    let (ns, na) = (policy.n_states(), policy.n_actions());
    let mut q = omc_q_batch(trajs, n, gamma, ns, na)?;
    let cap = 1.0 / (1.0 - gamma);
    for s in 0..ns {
        for a in 0..na {
            if policy.prob(s, a) < tau {
                q.set(s, a, cap);
            }
        }
    }
    Ok(q)
}

/// `2(n+1)/(1-gamma) * [gamma^(n-1) + (1 - x/(2 t_mix(x)))^(n-1)]`.
pub fn omc_tail(n: usize, gamma: f64, profile: &MixingProfile, x: f64) -> f64 {
    let t = profile.t_mix(x) as f64;
    let e = n as f64 - 1.0;
    // ln_1p keeps the mixing factor below 1 when x is far below machine epsilon
    let mixing = (e * (-x / (2.0 * t)).ln_1p()).exp();
    2.0 * (n as f64 + 1.0) / (1.0 - gamma) * (gamma.powf(e) + mixing)
}

/// `4(1 - x/2)^ceil(n / t_mix(x)) / (1-gamma)`, the extra VBE-I term.
pub fn vbe1_extra(n: usize, gamma: f64, profile: &MixingProfile, x: f64) -> f64 {
    let t = profile.t_mix(x);
    4.0 * (n.div_ceil(t) as f64 * (-x / 2.0).ln_1p()).exp() / (1.0 - gamma)
}

/// Upper bound on the bias of one estimator entry.
///
/// `x` is the stationary mass governing the entry: `sigma(s,a)` for OMC-Q
/// and TOMC (entries at or above the threshold), `nu(s)` for OMC-V, and the
/// uniform lower bound on `nu` for VBE-I and VBE-II.
pub fn theoretical_bias_bound(
    kind: EvalKind,
    n: usize,
    gamma: f64,
    profile: &MixingProfile,
    x: f64,
) -> Result<f64> {
    if kind == EvalKind::Exact {
        return Ok(0.0);
    }
    if !(x > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bias bound needs positive stationary mass, got {x}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let base = omc_tail(n, gamma, profile, x);
    Ok(match kind {
        EvalKind::Vbe1 => base + vbe1_extra(n, gamma, profile, x),
        _ => base,
    })
}

/// Estimation noise `delta = exact - estimate` and its per-state pairings
/// with `pi - pi_star`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    pub delta: QTable,
    /// `<delta(s, .), pi(.|s) - pi_star(.|s)>` per state.
    pub pairing: Vec<f64>,
    /// `sum_s' d_s(s') * pairing(s')` per start state `s`.
    pub increments: Vec<f64>,
}

pub fn noise_record(
    exact: &QTable,
    estimate: &QTable,
    policy: &Policy,
    pi_star: &Policy,
    d_weights: &[Vec<f64>],
) -> Result<NoiseRecord> {
    let (ns, na) = (exact.n_states(), exact.n_actions());
    if estimate.n_states() != ns
        || estimate.n_actions() != na
        || policy.n_states() != ns
        || policy.n_actions() != na
        || pi_star.n_states() != ns
        || pi_star.n_actions() != na
        || d_weights.len() != ns
        || d_weights.iter().any(|d| d.len() != ns)
    {
        return Err(Error::InvalidArgument("noise record inputs are not conformable".into()));
    }
    let delta = QTable::from_flat(
        ns,
        na,
        exact.values().iter().zip(estimate.values()).map(|(e, q)| e - q).collect(),
    );
    let pairing: Vec<f64> = (0..ns)
        .map(|s| {
            (0..na)
                .map(|a| delta.get(s, a) * (policy.prob(s, a) - pi_star.prob(s, a)))
                .sum()
        })
        .collect();
    let increments = d_weights
        .iter()
        .map(|d| d.iter().zip(&pairing).map(|(w, x)| w * x).sum())
        .collect();
    Ok(NoiseRecord { delta, pairing, increments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::fixtures::*;
    use crate::trajectory::{simulate, Start, Step, StreamId};

    fn hand(pairs: &[(usize, usize, f64)], last: usize, stream: u64) -> Trajectory {
        Trajectory::from_parts(
            pairs.iter().map(|&(s, a, c)| Step { state: s, action: a, cost: c }).collect(),
            last,
            StreamId::new(0, 0, stream),
        )
    }

    fn always_a1(n: usize) -> Trajectory {
        let pi = Policy::deterministic(&[1], 2).unwrap();
        simulate(&m1(), &pi, Start::State(0), n, StreamId::new(1, 0, 0)).unwrap()
    }

    #[test]
    fn omc_single_examples() {
        let traj = always_a1(3);
        assert_eq!(omc_q_single(&traj, (0, 1), 3, 0.5).unwrap(), 1.75);
        assert_eq!(omc_q_single(&traj, (0, 0), 3, 0.5).unwrap(), 0.0);
        assert_eq!(omc_q_single(&traj, (0, 1), 1, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn omc_batch_examples() {
        let traj = always_a1(3);
        let one = omc_q_batch(std::slice::from_ref(&traj), 3, 0.5, 1, 2).unwrap();
        assert_eq!(one.values(), &[0.0, 1.75]);
        let two = omc_q_batch(&[traj.clone(), traj], 3, 0.5, 1, 2).unwrap();
        assert_eq!(two, one);
        assert!(omc_q_batch(&[], 3, 0.5, 1, 2).is_err());
    }

    #[test]
    fn omc_v_examples() {
        let traj = always_a1(3);
        assert_eq!(omc_v(std::slice::from_ref(&traj), 3, 0.5, 1).unwrap(), vec![1.75]);
        let cycle = simulate(&m2(), &Policy::uniform(2, 1), Start::State(0), 3, StreamId::new(0, 0, 0))
            .unwrap();
        let v = omc_v(&[cycle], 1, 0.5, 2).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn vbe1_examples() {
        let pi = Policy::uniform(1, 2);
        // xi_Q realizes A_0 = a1; xi_V yields V_hat(0) = 0.5 + 0.5 * 1 = 1
        let xi_q = hand(&[(0, 1, 1.0), (0, 0, 0.0)], 0, 0);
        let xi_v = hand(&[(0, 0, 0.5), (0, 1, 1.0)], 0, 1);
        let q = vbe1(&xi_v, &xi_q, &pi, 2, 0.5).unwrap();
        assert_eq!(q.get(0, 1), 3.0);
        assert_eq!(q.get(0, 0), 0.0);

        // state never visited within n steps
        let xi_q2 = hand(&[(1, 0, 0.2), (1, 1, 0.7)], 1, 2);
        let q = vbe1(&xi_v, &xi_q2, &Policy::uniform(2, 2), 2, 0.5).unwrap();
        assert_eq!(q.row(0), &[0.0, 0.0]);

        let det = Policy::deterministic(&[1], 2).unwrap();
        let q = vbe1(&xi_v, &xi_q, &det, 2, 0.5).unwrap();
        assert_eq!(q.get(0, 1), 1.0 + 0.5 * 1.0);

        assert!(matches!(vbe1(&xi_q, &xi_q, &pi, 2, 0.5), Err(Error::SharedStream(_))));
        let zero_a1 = Policy::deterministic(&[0], 2).unwrap();
        let err = vbe1(&xi_v, &xi_q, &zero_a1, 2, 0.5).unwrap_err();
        assert!(err.to_string().contains("VBE needs interior policy values at visited states"));
    }

    #[test]
    fn vbe2_examples() {
        let pi = Policy::uniform(1, 2);
        let xi = hand(&[(0, 1, 1.0), (0, 0, 0.0)], 0, 0);
        let q = vbe2(&xi, &pi, 2, 0.5).unwrap();
        assert_eq!(q.values(), &[0.0, 2.0]);

        let det = Policy::deterministic(&[1], 2).unwrap();
        let traj = always_a1(4);
        let q = vbe2(&traj, &det, 3, 0.5).unwrap();
        assert_eq!(q.get(0, 1), omc_q_single(&traj, (0, 1), 3, 0.5).unwrap());
    }

    #[test]
    fn tomc_examples() {
        let pi = Policy::from_rows(vec![vec![0.05, 0.95]]).unwrap();
        let traj = hand(&[(0, 1, 0.3), (0, 0, 0.1), (0, 1, 0.3)], 0, 0);
        let q = tomc(std::slice::from_ref(&traj), &pi, 3, 0.1, 0.5).unwrap();
        assert_eq!(q.get(0, 0), 2.0);
        let omc = omc_q_batch(std::slice::from_ref(&traj), 3, 0.5, 1, 2).unwrap();
        assert_eq!(q.get(0, 1), omc.get(0, 1));
        let q = tomc(&[traj], &pi, 3, 1.0, 0.5).unwrap();
        assert_eq!(q.values(), &[2.0, 2.0]);
    }

    #[test]
    fn bias_bound_examples() {
        let prof = MixingProfile { c: 1.0, rho: 0.5, nu_min: 0.5, stationary: vec![0.5, 0.5], horizon: 10 };
        let b1 = theoretical_bias_bound(EvalKind::OmcQ, 1, 0.5, &prof, 0.5).unwrap();
        assert_eq!(b1, 4.0 / 0.5 * 2.0);
        let far = theoretical_bias_bound(EvalKind::OmcQ, 400, 0.5, &prof, 0.5).unwrap();
        assert!(far < 1e-12);
        let v1 = theoretical_bias_bound(EvalKind::Vbe1, 7, 0.5, &prof, 0.5).unwrap();
        let v2 = theoretical_bias_bound(EvalKind::Vbe2, 7, 0.5, &prof, 0.5).unwrap();
        let t = prof.t_mix(0.5);
        assert!((v1 - v2 - 4.0 * 0.75f64.powi(7usize.div_ceil(t) as i32) / 0.5).abs() < 1e-12);
        assert!(theoretical_bias_bound(EvalKind::OmcV, 5, 0.5, &prof, 0.0).is_err());
    }

    #[test]
    fn noise_record_examples() {
        let exact = QTable::from_flat(1, 2, vec![0.0, 1.0]);
        let pi = Policy::uniform(1, 2);
        let star = Policy::deterministic(&[0], 2).unwrap();
        let d = vec![vec![1.0]];
        let rec = noise_record(&exact, &exact, &pi, &star, &d).unwrap();
        assert_eq!(rec.increments, vec![0.0]);
        assert!(rec.delta.values().iter().all(|&x| x == 0.0));

        let est = QTable::from_flat(1, 2, vec![5.0, -3.0]);
        let rec = noise_record(&exact, &est, &star, &star, &d).unwrap();
        assert_eq!(rec.increments, vec![0.0]);

        let est = QTable::from_flat(1, 2, vec![-1.0, 2.0]);
        let rec = noise_record(&exact, &est, &pi, &star, &d).unwrap();
        assert_eq!(rec.delta.values(), &[1.0, -1.0]);
        assert_eq!(rec.increments, vec![-1.0]);
    }
}
