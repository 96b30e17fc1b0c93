//! Seeded simulation of the state-action chain induced by a policy, and the
//! first-hitting-time bookkeeping shared by the estimators.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{Mdp, Policy};

/// Where a trajectory begins. A bare state draws its first action from the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Start {
    State(usize),
    Pair(usize, usize),
}

/// Identifies one independent random stream: master seed, replication, and
/// a per-replication index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub seed: u64,
    pub run: u64,
    pub index: u64,
}

impl StreamId {
    pub fn new(seed: u64, run: u64, index: u64) -> Self {
        Self { seed, run, index }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.run.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.index);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub cost: f64,
}

/// Realized `Z_0, ..., Z_{n-1}` together with the successor state `S_n`.
///
/// No action is drawn at `S_n`; that slot behaves as an action outside the
/// action space, so indicator terms comparing against it are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    steps: Vec<Step>,
    final_state: usize,
    stream: StreamId,
}

impl Trajectory {
    /// Assembles a trajectory from recorded data, e.g. for hand-built test cases.
    pub fn from_parts(steps: Vec<Step>, final_state: usize, stream: StreamId) -> Self {
        Self { steps, final_state, stream }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn stream(&self) -> StreamId {
        self.stream
    }

    /// `S_t` for `t` in `0..=len`.
    pub fn state(&self, t: usize) -> usize {
        if t == self.steps.len() {
            self.final_state
        } else {
            self.steps[t].state
        }
    }

    /// `A_t` for `t < len`; `None` stands for the out-of-space action at `t = len`.
    pub fn action(&self, t: usize) -> Option<usize> {
        self.steps.get(t).map(|s| s.action)
    }

    pub fn final_state(&self) -> usize {
        self.final_state
    }

    /// `t,state,action,cost` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,state,action,cost\n");
        for (t, s) in self.steps.iter().enumerate() {
            writeln!(out, "{t},{},{},{}", s.state, s.action, s.cost).unwrap();
        }
        out
    }
}

/// Inverse-CDF draw from a probability row.
pub(crate) fn sample_index<R: Rng>(rng: &mut R, row: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    // rounding left u above the accumulated mass
    last
}

/// Simulates `length` steps of the chain from `start`, reproducibly in `stream`.
pub fn simulate(
    mdp: &Mdp,
    policy: &Policy,
    start: Start,
    length: usize,
    stream: StreamId,
) -> Result<Trajectory> {
    policy.check_for(mdp)?;
    if length == 0 {
        return Err(Error::InvalidArgument("trajectory length must be at least 1".into()));
    }
    let mut rng = stream.rng();
    let (mut s, first_action) = match start {
        Start::State(s) => (s, None),
        Start::Pair(s, a) => {
            if a >= mdp.n_actions() {
                return Err(Error::InvalidArgument(format!("start action {a} out of range")));
            }
            (s, Some(a))
        }
    };
    if s >= mdp.n_states() {
        return Err(Error::InvalidArgument(format!("start state {s} out of range")));
    }
    let mut steps = Vec::with_capacity(length);
    let mut forced = first_action;
    for _ in 0..length {
        let a = forced.take().unwrap_or_else(|| sample_index(&mut rng, policy.row(s)));
        steps.push(Step { state: s, action: a, cost: mdp.cost(s, a) });
        s = sample_index(&mut rng, mdp.transition_row(s, a));
    }
    Ok(Trajectory { steps, final_state: s, stream })
}

fn check_len(traj: &Trajectory, n: usize) -> Result<()> {
    if traj.len() < n {
        return Err(Error::ShortTrajectory { need: n, have: traj.len() });
    }
    Ok(())
}

/// `min{t <= n-1 : Z_t = (s, a)}`, or `n` when the pair is not visited.
pub fn first_hit_z(traj: &Trajectory, z: (usize, usize), n: usize) -> Result<usize> {
    check_len(traj, n)?;
    Ok(traj.steps[..n]
        .iter()
        .position(|st| (st.state, st.action) == z)
        .unwrap_or(n))
}

/// `min{t <= n-1 : S_t = s}`, or `n` when the state is not visited.
pub fn first_hit_s(traj: &Trajectory, s: usize, n: usize) -> Result<usize> {
    check_len(traj, n)?;
    Ok(traj.steps[..n].iter().position(|st| st.state == s).unwrap_or(n))
}

/// First hitting times of every pair, indexed `s * n_actions + a`, in one pass.
pub fn first_hits_pairs(traj: &Trajectory, n: usize, n_states: usize, n_actions: usize) -> Result<Vec<usize>> {
    check_len(traj, n)?;
    let mut hits = vec![n; n_states * n_actions];
    for (t, st) in traj.steps[..n].iter().enumerate() {
        let h = &mut hits[st.state * n_actions + st.action];
        if *h == n {
            *h = t;
        }
    }
    Ok(hits)
}

/// First hitting times of every state in one pass.
pub fn first_hits_states(traj: &Trajectory, n: usize, n_states: usize) -> Result<Vec<usize>> {
    check_len(traj, n)?;
    let mut hits = vec![n; n_states];
    for (t, st) in traj.steps[..n].iter().enumerate() {
        if hits[st.state] == n {
            hits[st.state] = t;
        }
    }
    Ok(hits)
}

/// `G_t = sum_{u=t}^{n-1} gamma^{u-t} c_u` for `t` in `0..=n` (so `G_n = 0`).
pub fn discounted_suffix_sums(traj: &Trajectory, n: usize, gamma: f64) -> Result<Vec<f64>> {
    check_len(traj, n)?;
    let mut g = vec![0.0; n + 1];
    for t in (0..n).rev() {
        g[t] = traj.steps[t].cost + gamma * g[t + 1];
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::fixtures::*;
    use crate::mdp::{state_action_stationary, stationary_distribution};
    use proptest::prelude::*;

    fn sid(i: u64) -> StreamId {
        StreamId::new(7, 0, i)
    }

    #[test]
    fn deterministic_chain() {
        let pi = Policy::deterministic(&[1], 2).unwrap();
        let traj = simulate(&m1(), &pi, Start::State(0), 3, sid(0)).unwrap();
        let steps: Vec<_> = traj.steps().iter().map(|s| (s.state, s.action, s.cost)).collect();
        assert_eq!(steps, vec![(0, 1, 1.0), (0, 1, 1.0), (0, 1, 1.0)]);
    }

    #[test]
    fn deterministic_cycle() {
        let traj = simulate(&m2(), &Policy::uniform(2, 1), Start::State(0), 4, sid(0)).unwrap();
        let states: Vec<_> = (0..4).map(|t| traj.state(t)).collect();
        assert_eq!(states, vec![0, 1, 0, 1]);
        assert_eq!(traj.final_state(), 0);
        assert_eq!(traj.action(4), None);
        assert_eq!(first_hit_s(&traj, 1, 4).unwrap(), 1);
    }

    #[test]
    fn same_stream_same_trajectory() {
        let mdp = m3();
        let pi = Policy::uniform(2, 2);
        let a = simulate(&mdp, &pi, Start::Pair(1, 0), 50, sid(3)).unwrap();
        let b = simulate(&mdp, &pi, Start::Pair(1, 0), 50, sid(3)).unwrap();
        let c = simulate(&mdp, &pi, Start::Pair(1, 0), 50, sid(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.steps(), c.steps());
        assert_eq!(a.steps()[0].action, 0);
    }

    #[test]
    fn first_hit_examples() {
        let mk = |pairs: &[(usize, usize)]| {
            Trajectory::from_parts(
                pairs.iter().map(|&(s, a)| Step { state: s, action: a, cost: 0.0 }).collect(),
                0,
                sid(0),
            )
        };
        let traj = mk(&[(0, 0), (0, 1), (0, 0)]);
        assert_eq!(first_hit_z(&traj, (0, 1), 3).unwrap(), 1);
        assert_eq!(first_hit_z(&traj, (1, 1), 3).unwrap(), 3);
        assert_eq!(first_hit_z(&traj, (0, 0), 3).unwrap(), 0);
        assert_eq!(first_hit_s(&traj, 0, 3).unwrap(), 0);
        assert_eq!(first_hit_s(&traj, 1, 3).unwrap(), 3);
        assert!(matches!(first_hit_s(&traj, 0, 4), Err(Error::ShortTrajectory { .. })));
    }

    #[test]
    fn costs_and_transitions_are_consistent() {
        let mdp = crate::harness::generate_mdp(&crate::harness::GeneratorSpec::new(6, 3, 2, 0.05, 1, 2))
            .unwrap();
        let pi = Policy::uniform(6, 3);
        let traj = simulate(&mdp, &pi, Start::State(2), 2000, sid(1)).unwrap();
        for t in 0..traj.len() {
            let st = traj.steps()[t];
            assert_eq!(st.cost, mdp.cost(st.state, st.action));
            assert!(mdp.transition_row(st.state, st.action)[traj.state(t + 1)] > 0.0);
        }
    }

    #[test]
    fn empirical_frequencies_approach_stationary_law() {
        let mdp = crate::harness::generate_mdp(&crate::harness::GeneratorSpec::new(5, 4, 3, 0.05, 11, 12))
            .unwrap();
        let pi = Policy::uniform(5, 4);
        let nu = stationary_distribution(&mdp, &pi).unwrap();
        let sigma = state_action_stationary(&pi, &nu);
        let n = 1_000_000;
        let traj = simulate(&mdp, &pi, Start::State(0), n, sid(9)).unwrap();
        let mut freq = [0.0; 20];
        for st in traj.steps() {
            freq[st.state * 4 + st.action] += 1.0 / n as f64;
        }
        let tv: f64 = freq.iter().zip(sigma.values()).map(|(f, s)| (f - s).abs()).sum();
        assert!(tv <= 0.01, "tv={tv}");
    }

    #[test]
    fn suffix_sums() {
        let pi = Policy::deterministic(&[1], 2).unwrap();
        let traj = simulate(&m1(), &pi, Start::State(0), 3, sid(0)).unwrap();
        let g = discounted_suffix_sums(&traj, 3, 0.5).unwrap();
        assert_eq!(g, vec![1.75, 1.5, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn first_hits_are_stopping_times(seed in 0u64..1000, n in 1usize..40, cut in 0usize..40) {
            let mdp = m3();
            let pi = Policy::from_rows(vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
            let full = simulate(&mdp, &pi, Start::State(0), 40, StreamId::new(seed, 0, 0)).unwrap();
            let prefix = Trajectory::from_parts(full.steps()[..n].to_vec(), full.state(n), full.stream());
            let hits_full = first_hits_pairs(&full, n, 2, 2).unwrap();
            let hits_prefix = first_hits_pairs(&prefix, n, 2, 2).unwrap();
            prop_assert_eq!(&hits_full, &hits_prefix);
            // the event {tau <= t} only depends on Z_0..Z_t
            let t = cut.min(n - 1);
            for (i, &h) in hits_full.iter().enumerate() {
                let z = (i / 2, i % 2);
                let seen = full.steps()[..=t].iter().any(|st| (st.state, st.action) == z);
                prop_assert_eq!(h <= t, seen);
                prop_assert_eq!(h, first_hit_z(&full, z, n).unwrap());
            }
        }
    }
}
