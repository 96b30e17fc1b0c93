//! Finite discounted MDPs and the exact dynamic-programming quantities used as
//! ground truth everywhere else: policy values, Q-functions, optimal values,
//! discounted visitation measures, stationary distributions and fitted
//! geometric-mixing constants.
//!
//! Everything here is deterministic. Policy evaluation is a direct LU solve of
//! `(I - gamma P_pi) V = c_pi` rather than an iteration.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;
const POLICY_ROW_TOL: f64 = 1e-12;

/// Finite MDP with costs in `[0, 1]`.
///
/// `transition[(s * n_actions + a) * n_states + s']` holds `P[s' | s, a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    cost: Vec<f64>,
    gamma: f64,
}

impl Mdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        cost: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("empty state or action space".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::InvalidMdp(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if cost.len() != n_states * n_actions {
            return Err(Error::InvalidMdp(format!(
                "cost table has {} entries, expected {}",
                cost.len(),
                n_states * n_actions
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("gamma={gamma} outside (0,1)")));
        }
        for (i, &c) in cost.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidMdp(format!(
                    "cost({}, {})={c} outside [0,1]",
                    i / n_actions,
                    i % n_actions
                )));
            }
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0 + ROW_SUM_TOL).contains(&p)) {
                return Err(Error::InvalidMdp(format!(
                    "P[.|{}, {}] has an entry outside [0,1]",
                    i / n_actions,
                    i % n_actions
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidMdp(format!(
                    "P[.|{}, {}] sums to {sum}",
                    i / n_actions,
                    i % n_actions
                )));
            }
        }
        Ok(Self { n_states, n_actions, transition, cost, gamma })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.n_actions + a]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// Effective horizon `1 / (1 - gamma)`; also the upper bound on every value.
    pub fn horizon(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }

    /// Parses the whitespace-separated text format:
    ///
    /// ```text
    /// mdp <n_states> <n_actions> <gamma>
    /// <s> <a> <cost> <P[0|s,a]> ... <P[n_states-1|s,a]>    (n_states * n_actions lines)
    /// ```
    ///
    /// Blank lines and lines starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines
            .next()
            .ok_or(Error::Parse { line: 0, msg: "empty input".into() })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "mdp" {
            return Err(Error::Parse {
                line: hline,
                msg: "expected header `mdp <|S|> <|A|> <gamma>`".into(),
            });
        }
        let n_states: usize = parse_field(fields[1], hline)?;
        let n_actions: usize = parse_field(fields[2], hline)?;
        let gamma: f64 = parse_field(fields[3], hline)?;
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Parse { line: hline, msg: "empty state or action space".into() });
        }

        let mut transition = vec![0.0; n_states * n_actions * n_states];
        let mut cost = vec![0.0; n_states * n_actions];
        let mut seen = vec![false; n_states * n_actions];
        for (line, body) in lines {
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 3 + n_states {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields, found {}", 3 + n_states, fields.len()),
                });
            }
            let s: usize = parse_field(fields[0], line)?;
            let a: usize = parse_field(fields[1], line)?;
            if s >= n_states || a >= n_actions {
                return Err(Error::Parse { line, msg: format!("pair ({s}, {a}) out of range") });
            }
            let idx = s * n_actions + a;
            if seen[idx] {
                return Err(Error::Parse { line, msg: format!("duplicate pair ({s}, {a})") });
            }
            seen[idx] = true;
            cost[idx] = parse_field(fields[2], line)?;
            for (sp, f) in fields[3..].iter().enumerate() {
                transition[idx * n_states + sp] = parse_field(f, line)?;
            }
        }
        if let Some(missing) = seen.iter().position(|&b| !b) {
            return Err(Error::Parse {
                line: 0,
                msg: format!("missing pair ({}, {})", missing / n_actions, missing % n_actions),
            });
        }
        Self::new(n_states, n_actions, transition, cost, gamma)
    }

    /// Serializes to the text format; floats use the shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = format!("mdp {} {} {}\n", self.n_states, self.n_actions, self.gamma);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                write!(out, "{s} {a} {}", self.cost(s, a)).unwrap();
                for p in self.transition_row(s, a) {
                    write!(out, " {p}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("cannot parse `{field}`") })
}

/// Stationary randomized policy: one probability row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidPolicy(format!("action {a} out of range at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_states: actions.len(), n_actions, probs })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidPolicy("empty policy".into()));
        }
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::InvalidPolicy("ragged rows".into()));
        }
        Self::from_flat(n_states, n_actions, rows.concat())
    }

    pub fn from_flat(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::InvalidPolicy("wrong table size".into()));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidPolicy(format!("negative or non-finite entry at state {s}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > POLICY_ROW_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.n_actions)
    }

    /// True when every action has positive probability at every state.
    pub fn is_interior(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    pub fn check_for(&self, mdp: &Mdp) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(Error::InvalidPolicy(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }
}

/// Real table indexed by state.
pub type VTable = Vec<f64>;

/// Real table indexed by (state, action).
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::filled(n_states, n_actions, 0.0)
    }

    pub fn filled(n_states: usize, n_actions: usize, value: f64) -> Self {
        Self { n_states, n_actions, values: vec![value; n_states * n_actions] }
    }

    pub fn from_flat(n_states: usize, n_actions: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n_states * n_actions);
        Self { n_states, n_actions, values }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `s,a,value` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,a,value\n");
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                writeln!(out, "{s},{a},{}", self.get(s, a)).unwrap();
            }
        }
        out
    }
}

/// Fitted geometric-mixing certificate for the chain induced by one policy.
///
/// The pair `(c, rho)` certifies `sum_s |P(S_t = s | s0) - nu(s)| <= c * rho^(t+1)`
/// for every start state and every `t` in `1..=horizon`. These are empirical
/// fits over a finite horizon, not analytic constants.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingProfile {
    pub c: f64,
    pub rho: f64,
    pub nu_min: f64,
    pub stationary: Vec<f64>,
    pub horizon: usize,
}

/// Smallest rate reported for chains that are already mixed after one step.
pub const RHO_FLOOR: f64 = 1e-6;

impl MixingProfile {
    /// `ceil(log_rho(x / (2C)))`, at least 1.
    pub fn t_mix(&self, x: f64) -> usize {
        let t = ((x / (2.0 * self.c)).ln() / self.rho.ln()).ceil();
        if t.is_finite() && t >= 1.0 {
            t as usize
        } else {
            1
        }
    }
}

/// State transition matrix `P_pi[s][s']` (row-major) and per-state cost `c_pi`.
pub fn induced_chain(mdp: &Mdp, policy: &Policy) -> (Vec<f64>, Vec<f64>) {
    let ns = mdp.n_states;
    let mut p = vec![0.0; ns * ns];
    let mut c = vec![0.0; ns];
    for s in 0..ns {
        for (a, &pi) in policy.row(s).iter().enumerate() {
            if pi == 0.0 {
                continue;
            }
            c[s] += pi * mdp.cost(s, a);
            for (sp, &q) in mdp.transition_row(s, a).iter().enumerate() {
                p[s * ns + sp] += pi * q;
            }
        }
    }
    (p, c)
}

fn solve(matrix: DMatrix<f64>, rhs: DVector<f64>, what: &'static str) -> Result<Vec<f64>> {
    let x = matrix.lu().solve(&rhs).ok_or(Error::Singular(what))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(what));
    }
    Ok(x.iter().copied().collect())
}

/// `V^pi`, the solution of `V = c_pi + gamma P_pi V`.
pub fn exact_value(mdp: &Mdp, policy: &Policy) -> Result<VTable> {
    policy.check_for(mdp)?;
    let ns = mdp.n_states;
    let (p, c) = induced_chain(mdp, policy);
    let a = DMatrix::from_fn(ns, ns, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - mdp.gamma * p[i * ns + j]
    });
    solve(a, DVector::from_vec(c), "evaluating a policy")
}

/// One Bellman backup: `Q(s,a) = c(s,a) + gamma * sum_s' P[s'|s,a] V(s')`.
pub fn backup(mdp: &Mdp, v: &[f64]) -> QTable {
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let next: f64 = mdp.transition_row(s, a).iter().zip(v).map(|(p, v)| p * v).sum();
            q.set(s, a, mdp.cost(s, a) + mdp.gamma * next);
        }
    }
    q
}

pub fn exact_q(mdp: &Mdp, policy: &Policy) -> Result<QTable> {
    Ok(backup(mdp, &exact_value(mdp, policy)?))
}

/// Sup-norm residual of the policy Bellman equation.
pub fn bellman_residual(mdp: &Mdp, policy: &Policy, v: &[f64]) -> f64 {
    let (p, c) = induced_chain(mdp, policy);
    let ns = mdp.n_states;
    (0..ns)
        .map(|s| {
            let pv: f64 = (0..ns).map(|sp| p[s * ns + sp] * v[sp]).sum();
            (v[s] - c[s] - mdp.gamma * pv).abs()
        })
        .fold(0.0, f64::max)
}

const VALUE_ITERATION_CAP: usize = 1_000_000;

/// Optimal values by value iteration from zero, stopped once the contraction
/// bound guarantees `||V - V*||_inf <= tol`; `Q*` comes from one final backup.
pub fn optimal_values(mdp: &Mdp, tol: f64) -> Result<(VTable, QTable)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol={tol} must be positive")));
    }
    let stop = tol * (1.0 - mdp.gamma) / mdp.gamma;
    let mut v = vec![0.0; mdp.n_states];
    for _ in 0..VALUE_ITERATION_CAP {
        let q = backup(mdp, &v);
        let next: Vec<f64> = (0..mdp.n_states)
            .map(|s| q.row(s).iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if diff <= stop {
            let q = backup(mdp, &v);
            return Ok((v, q));
        }
    }
    Err(Error::NoConvergence { tol, cap: VALUE_ITERATION_CAP })
}

/// Per-state near-argmin sets `{a : Q(s,a) <= min_a Q(s,a) + tie_tol}`.
pub fn optimal_action_sets(q_star: &QTable, tie_tol: f64) -> Vec<Vec<usize>> {
    (0..q_star.n_states)
        .map(|s| {
            let row = q_star.row(s);
            let best = row.iter().copied().fold(f64::INFINITY, f64::min);
            (0..row.len()).filter(|&a| row[a] <= best + tie_tol).collect()
        })
        .collect()
}

/// Deterministic greedy policy w.r.t. `q`, ties broken toward the lowest action index.
pub fn greedy_policy(q: &QTable) -> Policy {
    let actions: Vec<usize> = (0..q.n_states)
        .map(|s| {
            let row = q.row(s);
            let mut best = 0;
            for a in 1..row.len() {
                if row[a] < row[best] {
                    best = a;
                }
            }
            best
        })
        .collect();
    Policy::deterministic(&actions, q.n_actions).expect("greedy actions are in range")
}

/// `f(pi) = sum_s vartheta(s) V^pi(s)`.
pub fn objective(mdp: &Mdp, policy: &Policy, vartheta: &[f64]) -> Result<f64> {
    check_distribution(vartheta, mdp.n_states, "vartheta")?;
    let v = exact_value(mdp, policy)?;
    Ok(vartheta.iter().zip(&v).map(|(w, v)| w * v).sum())
}

fn check_distribution(d: &[f64], len: usize, name: &str) -> Result<()> {
    if d.len() != len {
        return Err(Error::InvalidArgument(format!("{name} has length {}, expected {len}", d.len())));
    }
    let sum: f64 = d.iter().sum();
    if d.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{name} is not a distribution (sum {sum})")));
    }
    Ok(())
}

/// Discounted visitation measure `d(s') = (1-gamma) sum_t gamma^t P(S_t = s')`
/// with `S_0 ~ start`.
pub fn visitation_measure(mdp: &Mdp, policy: &Policy, start: &[f64]) -> Result<Vec<f64>> {
    policy.check_for(mdp)?;
    check_distribution(start, mdp.n_states, "start")?;
    let ns = mdp.n_states;
    let (p, _) = induced_chain(mdp, policy);
    // (I - gamma P^T) d = (1 - gamma) start
    let a = DMatrix::from_fn(ns, ns, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - mdp.gamma * p[j * ns + i]
    });
    let rhs = DVector::from_iterator(ns, start.iter().map(|x| (1.0 - mdp.gamma) * x));
    solve(a, rhs, "computing a visitation measure")
}

/// Visitation measures `d_s` for every point-mass start, indexed by start state.
pub fn visitation_measures(mdp: &Mdp, policy: &Policy) -> Result<Vec<Vec<f64>>> {
    let ns = mdp.n_states;
    (0..ns)
        .map(|s| {
            let mut e = vec![0.0; ns];
            e[s] = 1.0;
            visitation_measure(mdp, policy, &e)
        })
        .collect()
}

/// Checks that a row-stochastic matrix is irreducible and aperiodic by
/// inspecting its support graph (reachability plus gcd of cycle lengths).
pub fn check_ergodic(p: &[f64], n: usize) -> Result<()> {
    let succ: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| p[i * n + j] > 0.0).collect()).collect();
    let levels = bfs_levels(&succ, 0);
    if levels.iter().any(Option::is_none) {
        return Err(Error::ReducibleChain(0));
    }
    let mut pred = vec![Vec::new(); n];
    for (i, row) in succ.iter().enumerate() {
        for &j in row {
            pred[j].push(i);
        }
    }
    if let Some(s) = bfs_levels(&pred, 0).iter().position(Option::is_none) {
        return Err(Error::ReducibleChain(s));
    }
    let mut period = 0usize;
    for (i, row) in succ.iter().enumerate() {
        let li = levels[i].unwrap();
        for &j in row {
            let lj = levels[j].unwrap();
            period = gcd(period, (li + 1).abs_diff(lj));
        }
    }
    if period != 1 {
        return Err(Error::PeriodicChain(period));
    }
    Ok(())
}

fn bfs_levels(adj: &[Vec<usize>], root: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    level[root] = Some(0);
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        let lu = level[u].unwrap();
        for &v in &adj[u] {
            if level[v].is_none() {
                level[v] = Some(lu + 1);
                queue.push_back(v);
            }
        }
    }
    level
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Stationary state distribution `nu^pi` of the induced chain.
pub fn stationary_distribution(mdp: &Mdp, policy: &Policy) -> Result<Vec<f64>> {
    policy.check_for(mdp)?;
    let ns = mdp.n_states;
    let (p, _) = induced_chain(mdp, policy);
    check_ergodic(&p, ns)?;
    // (I - P^T) nu = 0 with the last equation replaced by sum(nu) = 1.
    let a = DMatrix::from_fn(ns, ns, |i, j| {
        if i == ns - 1 {
            1.0
        } else {
            let id = if i == j { 1.0 } else { 0.0 };
            id - p[j * ns + i]
        }
    });
    let mut rhs = DVector::zeros(ns);
    rhs[ns - 1] = 1.0;
    let mut nu = solve(a, rhs, "computing a stationary distribution")?;
    for x in &mut nu {
        *x = x.max(0.0);
    }
    let total: f64 = nu.iter().sum();
    nu.iter_mut().for_each(|x| *x /= total);
    Ok(nu)
}

/// `sigma(s,a) = nu(s) pi(a|s)`, the stationary law of the state-action chain.
pub fn state_action_stationary(policy: &Policy, nu: &[f64]) -> QTable {
    let mut sigma = QTable::zeros(policy.n_states, policy.n_actions);
    for (s, &w) in nu.iter().enumerate() {
        for a in 0..policy.n_actions {
            sigma.set(s, a, w * policy.prob(s, a));
        }
    }
    sigma
}

/// `max_{s0} sum_s |P(S_t = s | S_0 = s0) - nu(s)|` for `t = 0..=horizon`.
pub fn tv_curve(p: &[f64], nu: &[f64], horizon: usize) -> Vec<f64> {
    let n = nu.len();
    let mut worst = vec![0.0f64; horizon + 1];
    let mut next = vec![0.0; n];
    for s0 in 0..n {
        let mut dist = vec![0.0; n];
        dist[s0] = 1.0;
        for (t, w) in worst.iter_mut().enumerate() {
            if t > 0 {
                next.iter_mut().for_each(|x| *x = 0.0);
                for (i, &di) in dist.iter().enumerate() {
                    if di != 0.0 {
                        for j in 0..n {
                            next[j] += di * p[i * n + j];
                        }
                    }
                }
                std::mem::swap(&mut dist, &mut next);
            }
            let tv: f64 = dist.iter().zip(nu).map(|(d, v)| (d - v).abs()).sum();
            *w = w.max(tv);
        }
    }
    worst
}

/// Fits `(C, rho)` to the worst-case distance-to-stationarity curve over
/// `t in 1..=horizon`.
///
/// `rho` is the smallest rate certifiable with some `C` in `[1, 2]`, i.e.
/// `max_t (TV(t)/2)^(1/(t+1))` (floored at [`RHO_FLOOR`]); `C` is then the
/// smallest value `>= 1` that certifies the curve at that rate.
pub fn mixing_constants(mdp: &Mdp, policy: &Policy, horizon: usize) -> Result<MixingProfile> {
    let nu = stationary_distribution(mdp, policy)?;
    let (p, _) = induced_chain(mdp, policy);
    let horizon = horizon.max(1);
    let tv = tv_curve(&p, &nu, horizon);
    const NEGLIGIBLE: f64 = 1e-12;
    if tv[1] > NEGLIGIBLE && tv[horizon] >= tv[1] {
        return Err(Error::NotMixing(format!(
            "distance to stationarity {:.3e} at t={horizon} has not decayed from {:.3e} at t=1",
            tv[horizon], tv[1]
        )));
    }
    let mut rho = RHO_FLOOR;
    for (t, &d) in tv.iter().enumerate().skip(1) {
        if d > NEGLIGIBLE {
            rho = rho.max((d / 2.0).powf(1.0 / (t as f64 + 1.0)));
        }
    }
    if rho >= 1.0 {
        return Err(Error::NotMixing("distance to stationarity stays at 2".into()));
    }
    let mut c = 1.0f64;
    for (t, &d) in tv.iter().enumerate().skip(1) {
        if d > NEGLIGIBLE {
            c = c.max(d / rho.powi(t as i32 + 1));
        }
    }
    let nu_min = nu.iter().copied().fold(f64::INFINITY, f64::min);
    if !(nu_min > 0.0) {
        return Err(Error::NotMixing("stationary distribution has an empty state".into()));
    }
    Ok(MixingProfile { c, rho, nu_min, stationary: nu, horizon })
}

/// Default fitting horizon `10 |S|^2`.
pub fn default_mixing_horizon(n_states: usize) -> usize {
    10 * n_states * n_states
}
