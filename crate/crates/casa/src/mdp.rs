//! Finite MDPs with exact policy evaluation — the ground-truth oracle layer.
//!
//! A [`TabularMdp`] is the tuple (S, A, p, r, γ) with dense row-stochastic
//! transitions. Policy evaluation is done exactly: [`exact_v`] solves the
//! linear system (I − γP_π)V = r_π by LU factorization and [`exact_q`] closes
//! the Bellman relation Q(s,a) = r(s,a) + γ Σ_{s′} p(s′|s,a)V(s′). These two
//! functions are the oracle every estimator and operator in [`crate::traces`]
//! is measured against.
//!
//! [`clipped_target_policy`] builds π̃(a|s) ∝ min{ρ̄μ(a|s), π(a|s)}, the policy
//! whose value functions the clipped off-policy estimators actually converge
//! to. Trajectory sampling is seeded and reproducible, with the behavior
//! probability μ(a|s) recorded on every transition at sample time.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("transition row (s={state}, a={action}) sums to {sum}, expected 1 within 1e-12")]
    NotStochastic { state: usize, action: usize, sum: f64 },
    #[error("policy row for state {state} sums to {sum}, expected 1 within 1e-12")]
    PolicyNotStochastic { state: usize, sum: f64 },
    #[error("negative probability {prob} at (s={state}, a={action})")]
    NegativeProb { state: usize, action: usize, prob: f64 },
    #[error("gamma must lie in [0, 1), got {0}")]
    BadGamma(f64),
    #[error("terminal state {0} must be absorbing with reward 0")]
    TerminalNotAbsorbing(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("linear system for exact policy evaluation is singular")]
    SingularSystem,
    #[error("Bellman residual {residual} exceeds 1e-10 after solve")]
    ResidualTooLarge { residual: f64 },
    #[error("clipped target policy has zero normalizer in state {0}")]
    ZeroNormalizer(usize),
    #[error("empty action set")]
    EmptyActionSet,
    #[error("state {0} out of range")]
    BadState(usize),
    #[error("invalid MDP JSON: {0}")]
    Json(String),
}

pub type Result<T> = std::result::Result<T, MdpError>;

// ── Core types ──

/// Finite MDP (S, A, p, r, γ) with dense arrays.
///
/// `transition` is row-major over (s, a, s′); `reward` over (s, a). States
/// flagged in `terminal_mask` must be absorbing with reward 0, so bootstrap
/// values past termination are identically zero and exact solves assign them
/// V = 0 without special-casing.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    pub gamma: f64,
    terminal_mask: Vec<bool>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        terminal_mask: Vec<bool>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(MdpError::BadGamma(gamma));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(MdpError::Dimension(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(MdpError::Dimension(format!(
                "reward has {} entries, expected {}",
                reward.len(),
                n_states * n_actions
            )));
        }
        if terminal_mask.len() != n_states {
            return Err(MdpError::Dimension(format!(
                "terminal_mask has {} entries, expected {}",
                terminal_mask.len(),
                n_states
            )));
        }
        let mdp = Self { n_states, n_actions, transition, reward, gamma, terminal_mask };
        for s in 0..n_states {
            for a in 0..n_actions {
                let mut sum = 0.0;
                for s2 in 0..n_states {
                    let p = mdp.p(s, a, s2);
                    if p < 0.0 {
                        return Err(MdpError::NegativeProb { state: s, action: a, prob: p });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(MdpError::NotStochastic { state: s, action: a, sum });
                }
                if mdp.terminal_mask[s] {
                    let self_loop = (mdp.p(s, a, s) - 1.0).abs() <= ROW_SUM_TOL;
                    if !self_loop || mdp.r(s, a) != 0.0 {
                        return Err(MdpError::TerminalNotAbsorbing(s));
                    }
                }
            }
        }
        Ok(mdp)
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    #[inline]
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_mask[s]
    }

    pub fn non_terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states).filter(move |s| !self.terminal_mask[*s])
    }

    // ── JSON round trip ──

    pub fn to_json(&self) -> String {
        let doc = MdpJson {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            transition: (0..self.n_states)
                .map(|s| {
                    (0..self.n_actions)
                        .map(|a| (0..self.n_states).map(|s2| self.p(s, a, s2)).collect())
                        .collect()
                })
                .collect(),
            reward: (0..self.n_states)
                .map(|s| (0..self.n_actions).map(|a| self.r(s, a)).collect())
                .collect(),
            terminal_mask: self.terminal_mask.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("MDP serialization cannot fail")
    }

    /// Parse and validate: every type invariant (stochastic rows, γ range,
    /// absorbing terminals) is re-checked on load.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpJson =
            serde_json::from_str(text).map_err(|e| MdpError::Json(e.to_string()))?;
        let mut transition = Vec::with_capacity(doc.n_states * doc.n_actions * doc.n_states);
        if doc.transition.len() != doc.n_states {
            return Err(MdpError::Json("transition outer length != n_states".into()));
        }
        for row in &doc.transition {
            if row.len() != doc.n_actions {
                return Err(MdpError::Json("transition action length != n_actions".into()));
            }
            for inner in row {
                if inner.len() != doc.n_states {
                    return Err(MdpError::Json("transition inner length != n_states".into()));
                }
                transition.extend_from_slice(inner);
            }
        }
        let mut reward = Vec::with_capacity(doc.n_states * doc.n_actions);
        for row in &doc.reward {
            reward.extend_from_slice(row);
        }
        Self::new(doc.n_states, doc.n_actions, transition, reward, doc.gamma, doc.terminal_mask)
    }
}

#[derive(Serialize, Deserialize)]
struct MdpJson {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    terminal_mask: Vec<bool>,
}

/// Stochastic policy π(a|s) as a dense row-stochastic array.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(MdpError::Dimension(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            let mut sum = 0.0;
            for a in 0..n_actions {
                let p = probs[s * n_actions + a];
                if p < 0.0 {
                    return Err(MdpError::NegativeProb { state: s, action: a, prob: p });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::PolicyNotStochastic { state: s, sum });
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    /// Build from unnormalized non-negative weights, renormalizing each row.
    pub fn from_weights(n_states: usize, n_actions: usize, weights: &[f64]) -> Result<Self> {
        let mut probs = weights.to_vec();
        for s in 0..n_states {
            let row = &mut probs[s * n_actions..(s + 1) * n_actions];
            let z: f64 = row.iter().sum();
            if z <= 0.0 {
                return Err(MdpError::ZeroNormalizer(s));
            }
            for p in row.iter_mut() {
                *p /= z;
            }
        }
        Self::new(n_states, n_actions, probs)
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

/// One sampled step, carrying the behavior probability μ(a|s) that was in
/// force when the action was drawn — never recomputed afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub behavior_prob: f64,
    pub done: bool,
}

/// A set of sampled trajectories plus the RNG seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Vec<Transition>>,
    pub seed: u64,
}

impl TrajectoryBatch {
    /// Check chaining (next_state of step t equals state of step t+1) and
    /// strictly positive behavior probabilities.
    pub fn validate(&self) -> Result<()> {
        for traj in &self.trajectories {
            for w in traj.windows(2) {
                if w[0].next_state != w[1].state {
                    return Err(MdpError::Dimension(format!(
                        "broken chain: next_state {} vs state {}",
                        w[0].next_state, w[1].state
                    )));
                }
            }
            for t in traj {
                if !(t.behavior_prob > 0.0 && t.behavior_prob <= 1.0) {
                    return Err(MdpError::Dimension(format!(
                        "behavior_prob {} outside (0, 1]",
                        t.behavior_prob
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── Exact policy evaluation ──

/// V^π by direct linear solve of (I − γP_π)V = r_π (dense LU). The Bellman
/// residual is re-checked after the solve and must be below 1e-10.
pub fn exact_v(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    let n = mdp.n_states;
    if policy.n_states != n || policy.n_actions != mdp.n_actions {
        return Err(MdpError::Dimension("policy does not match MDP".into()));
    }
    let mut a = nalgebra::DMatrix::<f64>::identity(n, n);
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    for s in 0..n {
        for act in 0..mdp.n_actions {
            let pa = policy.prob(s, act);
            b[s] += pa * mdp.r(s, act);
            for s2 in 0..n {
                a[(s, s2)] -= mdp.gamma * pa * mdp.p(s, act, s2);
            }
        }
    }
    let v = a.lu().solve(&b).ok_or(MdpError::SingularSystem)?;

    let mut residual = 0.0f64;
    for s in 0..n {
        let mut rhs = 0.0;
        for act in 0..mdp.n_actions {
            let mut next = 0.0;
            for s2 in 0..n {
                next += mdp.p(s, act, s2) * v[s2];
            }
            rhs += policy.prob(s, act) * (mdp.r(s, act) + mdp.gamma * next);
        }
        residual = residual.max((v[s] - rhs).abs());
    }
    if residual > 1e-10 {
        return Err(MdpError::ResidualTooLarge { residual });
    }
    Ok(v.iter().cloned().collect())
}

/// Q^π(s,a) = r(s,a) + γ Σ_{s′} p(s′|s,a) V^π(s′), with V^π from [`exact_v`].
/// Returned row-major over (s, a).
pub fn exact_q(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    let v = exact_v(mdp, policy)?;
    let mut q = vec![0.0; mdp.n_states * mdp.n_actions];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut next = 0.0;
            for s2 in 0..mdp.n_states {
                next += mdp.p(s, a, s2) * v[s2];
            }
            q[s * mdp.n_actions + a] = mdp.r(s, a) + mdp.gamma * next;
        }
    }
    Ok(q)
}

/// The clipped target policy π̃(a|s) = min{ρ̄μ(a|s), π(a|s)} / Σ_b min{ρ̄μ(b|s), π(b|s)}:
/// the policy whose (V, Q) the clipped off-policy estimators converge to.
pub fn clipped_target_policy(
    pi: &TabularPolicy,
    mu: &TabularPolicy,
    rho_bar: f64,
) -> Result<TabularPolicy> {
    if pi.n_states != mu.n_states || pi.n_actions != mu.n_actions {
        return Err(MdpError::Dimension("pi and mu shapes differ".into()));
    }
    assert!(rho_bar > 0.0, "rho_bar must be positive");
    let mut probs = vec![0.0; pi.n_states * pi.n_actions];
    for s in 0..pi.n_states {
        let mut z = 0.0;
        for a in 0..pi.n_actions {
            let m = (rho_bar * mu.prob(s, a)).min(pi.prob(s, a));
            probs[s * pi.n_actions + a] = m;
            z += m;
        }
        if z <= 0.0 {
            return Err(MdpError::ZeroNormalizer(s));
        }
        for a in 0..pi.n_actions {
            probs[s * pi.n_actions + a] /= z;
        }
    }
    TabularPolicy::new(pi.n_states, pi.n_actions, probs)
}

// ── Sampling ──

/// Seeded rollouts under μ from state 0. Each trajectory uses its own RNG
/// stream of a counter-based generator, so batches are reproducible and
/// individual trajectories are independent of batch size.
pub fn sample_trajectories(
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    sample_trajectories_from(mdp, mu, 0, n_traj, horizon, seed)
}

/// As [`sample_trajectories`] but from an explicit start state.
pub fn sample_trajectories_from(
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    start: usize,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    assert!(horizon >= 1, "horizon must be at least 1");
    if start >= mdp.n_states {
        return Err(MdpError::BadState(start));
    }
    if mu.n_states != mdp.n_states || mu.n_actions != mdp.n_actions {
        return Err(MdpError::Dimension("behavior policy does not match MDP".into()));
    }
    let mut trajectories = Vec::with_capacity(n_traj);
    for j in 0..n_traj {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        trajectories.push(rollout(mdp, mu, start, horizon, &mut rng));
    }
    Ok(TrajectoryBatch { trajectories, seed })
}

fn rollout(
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    start: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Transition> {
    let mut traj = Vec::new();
    let mut s = start;
    for _ in 0..horizon {
        if mdp.is_terminal(s) {
            break;
        }
        let action = sample_index(mu.row(s), rng);
        let behavior_prob = mu.prob(s, action);
        let next_probs: Vec<f64> = (0..mdp.n_states).map(|s2| mdp.p(s, action, s2)).collect();
        let next_state = sample_index(&next_probs, rng);
        let done = mdp.is_terminal(next_state);
        traj.push(Transition {
            state: s,
            action,
            reward: mdp.r(s, action),
            next_state,
            behavior_prob,
            done,
        });
        if done {
            break;
        }
        s = next_state;
    }
    traj
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    WeightedIndex::new(weights)
        .expect("sampling weights must be non-negative with positive sum")
        .sample(rng)
}

// ── ε-greedy ──

/// The ε-greedy action distribution over `q_values`: probability 1−ε+ε/|A| on
/// the argmax (lowest index on ties), ε/|A| elsewhere.
pub fn epsilon_greedy_probs(q_values: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if q_values.is_empty() {
        return Err(MdpError::EmptyActionSet);
    }
    assert!((0.0..=1.0).contains(&epsilon), "epsilon must lie in [0, 1]");
    let n = q_values.len();
    let best = argmax_lowest(q_values);
    let mut probs = vec![epsilon / n as f64; n];
    probs[best] += 1.0 - epsilon;
    Ok(probs)
}

/// Draw an ε-greedy action with a one-shot seeded RNG. The induced
/// distribution (what gets recorded as `behavior_prob`) is
/// [`epsilon_greedy_probs`].
pub fn epsilon_greedy(q_values: &[f64], epsilon: f64, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    epsilon_greedy_with(q_values, epsilon, &mut rng)
}

/// As [`epsilon_greedy`] but advancing a caller-held RNG stream.
pub fn epsilon_greedy_with(
    q_values: &[f64],
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if q_values.is_empty() {
        return Err(MdpError::EmptyActionSet);
    }
    if rng.gen::<f64>() < epsilon {
        Ok(rng.gen_range(0..q_values.len()))
    } else {
        Ok(argmax_lowest(q_values))
    }
}

/// Index of the maximum, lowest index winning ties (determinism contract).
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Single state, single action, absorbing chain: V = r/(1−γ).
    fn one_state_mdp(r: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![r], gamma, vec![false]).unwrap()
    }

    pub(crate) fn random_mdp(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        rng: &mut ChaCha8Rng,
    ) -> TabularMdp {
        let mut transition = vec![0.0; n_states * n_actions * n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                let row: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.1..1.0)).collect();
                let z: f64 = row.iter().sum();
                for (s2, w) in row.iter().enumerate() {
                    transition[(s * n_actions + a) * n_states + s2] = w / z;
                }
            }
        }
        let reward: Vec<f64> = (0..n_states * n_actions)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        TabularMdp::new(n_states, n_actions, transition, reward, gamma, vec![false; n_states])
            .unwrap()
    }

    pub(crate) fn random_policy(
        n_states: usize,
        n_actions: usize,
        rng: &mut ChaCha8Rng,
    ) -> TabularPolicy {
        let w: Vec<f64> = (0..n_states * n_actions)
            .map(|_| rng.gen_range(0.05..1.0))
            .collect();
        TabularPolicy::from_weights(n_states, n_actions, &w).unwrap()
    }

    /// Independent oracle: plain value-iteration sweeps.
    fn value_iteration_v(mdp: &TabularMdp, policy: &TabularPolicy, sweeps: usize) -> Vec<f64> {
        let mut v = vec![0.0; mdp.n_states];
        for _ in 0..sweeps {
            let mut next = vec![0.0; mdp.n_states];
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let mut exp_next = 0.0;
                    for s2 in 0..mdp.n_states {
                        exp_next += mdp.p(s, a, s2) * v[s2];
                    }
                    next[s] += policy.prob(s, a) * (mdp.r(s, a) + mdp.gamma * exp_next);
                }
            }
            v = next;
        }
        v
    }

    #[test]
    fn geometric_series_value() {
        let mdp = one_state_mdp(1.0, 0.5);
        let pi = TabularPolicy::uniform(1, 1);
        let v = exact_v(&mdp, &pi).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
        let q = exact_q(&mdp, &pi).unwrap();
        assert!((q[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_zero_value() {
        let mdp = one_state_mdp(0.0, 0.9);
        let pi = TabularPolicy::uniform(1, 1);
        assert_eq!(exact_v(&mdp, &pi).unwrap(), vec![0.0]);
    }

    #[test]
    fn exact_v_matches_value_iteration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let mdp = random_mdp(5, 3, 0.9, &mut rng);
            let pi = random_policy(5, 3, &mut rng);
            let v = exact_v(&mdp, &pi).unwrap();
            let v_iter = value_iteration_v(&mdp, &pi, 10_000);
            for (a, b) in v.iter().zip(&v_iter) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
            let q = exact_q(&mdp, &pi).unwrap();
            // E_π[Q(s,·)] = V(s)
            for s in 0..5 {
                let eq: f64 = (0..3).map(|a| pi.prob(s, a) * q[s * 3 + a]).sum();
                assert!((eq - v[s]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bellman_residual_below_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = random_mdp(6, 2, 0.99, &mut rng);
        let pi = random_policy(6, 2, &mut rng);
        // exact_v internally rejects residuals above 1e-10
        assert!(exact_v(&mdp, &pi).is_ok());
    }

    #[test]
    fn clipped_policy_no_clip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pi = random_policy(4, 3, &mut rng);
        let tilde = clipped_target_policy(&pi, &pi, 1.0).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                assert!((tilde.prob(s, a) - pi.prob(s, a)).abs() < 1e-12);
            }
        }
        // huge bar: clip never binds
        let mu = random_policy(4, 3, &mut rng);
        let tilde = clipped_target_policy(&pi, &mu, 1e6).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                assert!((tilde.prob(s, a) - pi.prob(s, a)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clipped_policy_hand_case() {
        // π=(0.9,0.1), μ=(0.5,0.5), ρ̄=1.05:
        // min(0.525,0.9)=0.525, min(0.525,0.1)=0.1, normalizer 0.625 → (0.84,0.16)
        let pi = TabularPolicy::new(1, 2, vec![0.9, 0.1]).unwrap();
        let mu = TabularPolicy::new(1, 2, vec![0.5, 0.5]).unwrap();
        let tilde = clipped_target_policy(&pi, &mu, 1.05).unwrap();
        assert!((tilde.prob(0, 0) - 0.84).abs() < 1e-12);
        assert!((tilde.prob(0, 1) - 0.16).abs() < 1e-12);
    }

    #[test]
    fn deterministic_mdp_unique_trajectory() {
        // two states: 0 → 1 (terminal), single action
        let mdp = TabularMdp::new(
            2,
            1,
            vec![0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0],
            0.9,
            vec![false, true],
        )
        .unwrap();
        let mu = TabularPolicy::uniform(2, 1);
        let batch = sample_trajectories(&mdp, &mu, 3, 10, 99).unwrap();
        for traj in &batch.trajectories {
            assert_eq!(traj.len(), 1);
            assert_eq!(traj[0].state, 0);
            assert_eq!(traj[0].next_state, 1);
            assert!(traj[0].done);
            assert_eq!(traj[0].behavior_prob, 1.0);
        }
        batch.validate().unwrap();
    }

    #[test]
    fn same_seed_identical_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = random_mdp(4, 2, 0.9, &mut rng);
        let mu = random_policy(4, 2, &mut rng);
        let b1 = sample_trajectories(&mdp, &mu, 20, 15, 1234).unwrap();
        let b2 = sample_trajectories(&mdp, &mu, 20, 15, 1234).unwrap();
        assert_eq!(b1, b2);
        // ...and trajectory j does not depend on how many trajectories follow it
        let b3 = sample_trajectories(&mdp, &mu, 5, 15, 1234).unwrap();
        assert_eq!(&b1.trajectories[..5], &b3.trajectories[..]);
    }

    #[test]
    fn action_frequencies_match_behavior_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mdp = random_mdp(3, 3, 0.9, &mut rng);
        let mu = random_policy(3, 3, &mut rng);
        let batch = sample_trajectories(&mdp, &mu, 1000, 10, 77).unwrap();
        let mut visits = 0usize;
        let mut counts = vec![0usize; 3];
        for traj in &batch.trajectories {
            for t in traj {
                if t.state == 0 {
                    visits += 1;
                    counts[t.action] += 1;
                }
            }
        }
        assert!(visits >= 1000, "need enough visits for the statistics to bite");
        for a in 0..3 {
            let p = mu.prob(0, a);
            let freq = counts[a] as f64 / visits as f64;
            let sigma = (p * (1.0 - p) / visits as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma + 1e-9,
                "action {a}: freq {freq} vs μ {p} (visits {visits})"
            );
        }
    }

    #[test]
    fn epsilon_greedy_edges() {
        let q = vec![1.0, 2.0];
        assert_eq!(epsilon_greedy(&q, 0.0, 1).unwrap(), 1);
        let probs = epsilon_greedy_probs(&q, 1.0).unwrap();
        assert_eq!(probs, vec![0.5, 0.5]);
        let probs = epsilon_greedy_probs(&q, 0.2).unwrap();
        assert!((probs[1] - 0.9).abs() < 1e-15); // 1−ε+ε/|A|
        assert!((probs[0] - 0.1).abs() < 1e-15);
        // ties break to the lowest index
        assert_eq!(argmax_lowest(&[3.0, 3.0, 1.0]), 0);
        assert!(matches!(
            epsilon_greedy(&[], 0.5, 0),
            Err(MdpError::EmptyActionSet)
        ));
    }

    #[test]
    fn json_round_trip_preserves_mdp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mdp = random_mdp(4, 2, 0.95, &mut rng);
        let text = mdp.to_json();
        let back = TabularMdp::from_json(&text).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn json_loader_rejects_bad_rows() {
        let text = r#"{
            "n_states": 1, "n_actions": 1, "gamma": 0.9,
            "transition": [[[0.5]]], "reward": [[0.0]], "terminal_mask": [false]
        }"#;
        assert!(matches!(
            TabularMdp::from_json(text),
            Err(MdpError::NotStochastic { .. })
        ));
    }

    #[test]
    fn terminal_states_must_be_absorbing() {
        let bad = TabularMdp::new(
            2,
            1,
            vec![0.0, 1.0, 1.0, 0.0], // terminal state 1 transitions back to 0
            vec![0.0, 0.0],
            0.9,
            vec![false, true],
        );
        assert!(matches!(bad, Err(MdpError::TerminalNotAbsorbing(1))));
    }
}
