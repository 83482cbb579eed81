//! Training harness: toy environments, replay with stored behavior
//! probabilities, and the seeded single-process loop.
//!
//! Each update runs collect → estimate targets from the configured return
//! estimator → combined gradient step, logging the angle panel to CSV every
//! `log_period` updates. Everything is driven by one seed: same config + seed
//! ⟹ byte-identical CSV and checkpoint.
//!
//! Desk-scale choices, recorded here rather than hidden:
//!   * single-process alternating collect/train loop — the identities and
//!     convergence claims are scale-free, so no actor fleet;
//!   * plain gradient ascent at a fixed 1e-3 rate (no optimizer schedule);
//!   * a single fixed ε for the ε-greedy configurations (one actor, one ε);
//!   * `r2d2_plain` bootstraps its Q targets under the *greedy* policy,
//!     `r2d2_casa` under the surrogate π = softmax(A/τ);
//!   * the `ppo_*` configurations use the unclipped policy gradient — the
//!     proximal ratio clip is deliberately absent, so long runs can drift
//!     where real PPO would stay put;
//!   * logged `entropy_pi` is always the entropy of the head's π, also for
//!     the ε-greedy configurations where the behavior policy differs;
//!   * CSV is the only metrics sink; plotting is external.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casa_head::{CasaHead, HeadError, HeadVariant};
use crate::diagnostics::{self, DiagError, DiagnosticsLogger};
use crate::gpi::{self, GpiError, GpiWeights, LossBatch};
use crate::mdp::{
    argmax_lowest, epsilon_greedy_probs, exact_v, sample_trajectories_from, MdpError, TabularMdp,
    TabularPolicy, TrajectoryBatch, Transition,
};
use crate::traces::{
    dr_trace_targets, retrace_targets, v_trace_targets, TraceError, TraceFamily, TraceSpec,
    ValuePair,
};

/// Fixed ascent step size; effective rates are tuned through the loss weights.
pub const LEARNING_RATE: f64 = 1e-3;
/// Combined gradients above this ℓ₂ norm are scaled down before the step.
pub const GRAD_CLIP_NORM: f64 = 50.0;
/// Replay capacity in trajectories.
pub const REPLAY_CAPACITY: usize = 64;
/// Each stored trajectory is trained on about this many times (collect:train
/// ratio); FIFO eviction keeps entries mildly stale, i.e. genuinely
/// off-policy.
pub const SAMPLE_REUSE: usize = 2;
/// ε for the ε-greedy configurations when the config leaves it unset.
pub const DEFAULT_EPSILON: f64 = 0.1;
/// The `return` column averages over this many most recent episodes.
pub const RETURN_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown environment `{0}`; valid names: chain, gridworld, cliff")]
    UnknownEnv(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("non-finite number at update {step} in module {module}")]
    NonFinite { step: usize, module: &'static str },
    #[error("value iteration did not converge")]
    NoConvergence,
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Gpi(#[from] GpiError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

// ── Run configuration ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    PpoCasa,
    R2d2Casa,
    CasaDrtrace,
    PpoPlain,
    R2d2Plain,
    AblationType1,
    AblationType2,
    AblationType3,
    AblationType4,
    AblationType5,
}

impl Algo {
    /// The head structure each configuration is defined with.
    pub fn required_head(self) -> HeadVariant {
        match self {
            Algo::PpoCasa | Algo::R2d2Casa | Algo::CasaDrtrace => HeadVariant::Casa,
            Algo::PpoPlain => HeadVariant::PlainLogit,
            Algo::R2d2Plain => HeadVariant::Type4,
            Algo::AblationType1 => HeadVariant::Type1,
            Algo::AblationType2 => HeadVariant::Type2,
            Algo::AblationType3 => HeadVariant::Type3,
            Algo::AblationType4 => HeadVariant::Type4,
            Algo::AblationType5 => HeadVariant::Type5,
        }
    }

    /// Collects with ε-greedy over Q instead of sampling π.
    pub fn epsilon_greedy_behavior(self) -> bool {
        matches!(self, Algo::R2d2Casa | Algo::R2d2Plain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsilonSchedule {
    Fixed { epsilon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardShape {
    None,
    Clip01,
    LogShape,
}

impl Default for RewardShape {
    fn default() -> Self {
        RewardShape::None
    }
}

/// Transform applied to every collected reward before storage.
pub fn reward_shape(r: f64, mode: RewardShape) -> f64 {
    match mode {
        RewardShape::None => r,
        RewardShape::Clip01 => r.clamp(0.0, 1.0),
        RewardShape::LogShape => {
            let sign = if r >= 0.0 { 1.0 } else { -1.0 };
            sign * (r.abs() + 1.0).ln()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algo: Algo,
    pub env: String,
    pub head_variant: HeadVariant,
    pub trace: TraceSpec,
    pub weights: GpiWeights,
    pub tau: f64,
    pub gamma: f64,
    #[serde(default)]
    pub epsilon_schedule: Option<EpsilonSchedule>,
    /// Trajectories sampled from replay per update.
    pub batch_size: usize,
    pub total_updates: usize,
    #[serde(default = "default_log_period")]
    pub log_period: usize,
    pub seed: u64,
    #[serde(default)]
    pub reward_shape: RewardShape,
}

fn default_log_period() -> usize {
    diagnostics::DEFAULT_LOG_PERIOD
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut config: RunConfig = serde_json::from_str(text)?;
        if config.trace.truncation_k == 0 {
            config.trace = TraceSpec::new(
                config.trace.family,
                config.trace.rho_bar,
                config.trace.c_bar,
                config.trace.gamma,
            )?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reject configurations whose pieces contradict each other: wrong head
    /// for the algorithm, a loss mix the algorithm does not use, ε on a
    /// non-ε-greedy configuration, or mismatched discounts.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::BadConfig(msg));
        if self.head_variant != self.algo.required_head() {
            return bad(format!(
                "algo {:?} requires head_variant {:?}, got {:?}",
                self.algo,
                self.algo.required_head(),
                self.head_variant
            ));
        }
        self.weights.validate()?;
        let w = &self.weights;
        match self.algo {
            // plain PPO trains V and π only
            Algo::PpoPlain => {
                if w.alpha2 != 0.0 || w.alpha1 <= 0.0 || w.alpha3 <= 0.0 {
                    return bad(format!(
                        "ppo_plain uses α₁∇L_V + α₃∇𝒥 with α₂ = 0, got ({}, {}, {})",
                        w.alpha1, w.alpha2, w.alpha3
                    ));
                }
            }
            // plain R2D2 trains Q only
            Algo::R2d2Plain => {
                if w.alpha1 != 0.0 || w.alpha3 != 0.0 || w.alpha2 <= 0.0 {
                    return bad(format!(
                        "r2d2_plain uses α₂∇L_Q alone, got ({}, {}, {})",
                        w.alpha1, w.alpha2, w.alpha3
                    ));
                }
            }
            // shared-head configurations combine all three; the balance is free
            _ => {
                if w.alpha1 <= 0.0 || w.alpha2 <= 0.0 || w.alpha3 <= 0.0 {
                    return bad(format!(
                        "{:?} combines all three gradients; weights must be positive, got ({}, {}, {})",
                        self.algo, w.alpha1, w.alpha2, w.alpha3
                    ));
                }
            }
        }
        if self.epsilon_schedule.is_some() && !self.algo.epsilon_greedy_behavior() {
            return bad(format!(
                "epsilon_schedule only applies to ε-greedy configurations, not {:?}",
                self.algo
            ));
        }
        if let Some(EpsilonSchedule::Fixed { epsilon }) = self.epsilon_schedule {
            if !(0.0..=1.0).contains(&epsilon) {
                return bad(format!("epsilon must lie in [0, 1], got {epsilon}"));
            }
        }
        if self.trace.gamma != self.gamma {
            return bad(format!(
                "trace.gamma ({}) must equal gamma ({})",
                self.trace.gamma, self.gamma
            ));
        }
        self.trace.validate()?;
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.log_period == 0 {
            return bad("log_period must be at least 1".into());
        }
        Ok(())
    }

    fn epsilon(&self) -> f64 {
        match self.epsilon_schedule {
            Some(EpsilonSchedule::Fixed { epsilon }) => epsilon,
            None => DEFAULT_EPSILON,
        }
    }
}

// ── Environments ──

/// A tabular episodic environment: MDP dynamics plus a start state and an
/// episode-length cap.
#[derive(Debug, Clone)]
pub struct Env {
    pub name: String,
    pub mdp: TabularMdp,
    pub start_state: usize,
    pub horizon: usize,
}

/// Build one of the named toy environments with the given discount.
///
///   chain      10 states in a row; `right` advances (reward 1 on reaching
///              the end, terminal), `left` falls back to the start for a
///              0.01 distractor reward. Optimal from the start: γ⁸.
///   gridworld  5×5, start one corner, goal reward 1 at the opposite corner
///              (terminal); walls bounce. Optimal path length = Manhattan
///              distance 8, return γ⁷.
///   cliff      4×12; stepping into a cliff cell costs −1 and teleports back
///              to the start, the far corner pays +1 (terminal). The optimal
///              route skirts the cliff: 13 steps, return γ¹².
pub fn make_env(name: &str, gamma: f64) -> Result<Env> {
    match name {
        "chain" => chain_env(10, gamma),
        "gridworld" => gridworld_env(gamma),
        "cliff" => cliff_env(gamma),
        other => Err(HarnessError::UnknownEnv(other.to_string())),
    }
}

fn chain_env(n: usize, gamma: f64) -> Result<Env> {
    let (ns, na) = (n, 2);
    let goal = n - 1;
    let mut p = vec![0.0; ns * na * ns];
    let mut r = vec![0.0; ns * na];
    let mut terminal = vec![false; ns];
    terminal[goal] = true;
    for s in 0..ns {
        if s == goal {
            for a in 0..na {
                p[(s * na + a) * ns + s] = 1.0;
            }
            continue;
        }
        // action 0: left — back to the start for the distractor reward
        p[(s * na) * ns] = 1.0;
        r[s * na] = 0.01;
        // action 1: right — advance, reward on entering the goal
        p[(s * na + 1) * ns + s + 1] = 1.0;
        r[s * na + 1] = if s + 1 == goal { 1.0 } else { 0.0 };
    }
    Ok(Env {
        name: "chain".into(),
        mdp: TabularMdp::new(ns, na, p, r, gamma, terminal)?,
        start_state: 0,
        horizon: 100,
    })
}

/// Clamped move on a width×height grid; actions 0..4 = up, down, left, right.
fn grid_step(row: usize, col: usize, action: usize, rows: usize, cols: usize) -> (usize, usize) {
    match action {
        0 => (row.saturating_sub(1), col),
        1 => ((row + 1).min(rows - 1), col),
        2 => (row, col.saturating_sub(1)),
        _ => (row, (col + 1).min(cols - 1)),
    }
}

fn gridworld_env(gamma: f64) -> Result<Env> {
    let (rows, cols, na) = (5, 5, 4);
    let ns = rows * cols;
    let goal = ns - 1;
    let mut p = vec![0.0; ns * na * ns];
    let mut r = vec![0.0; ns * na];
    let mut terminal = vec![false; ns];
    terminal[goal] = true;
    for s in 0..ns {
        for a in 0..na {
            if s == goal {
                p[(s * na + a) * ns + s] = 1.0;
                continue;
            }
            let (nr, nc) = grid_step(s / cols, s % cols, a, rows, cols);
            let s2 = nr * cols + nc;
            p[(s * na + a) * ns + s2] = 1.0;
            if s2 == goal {
                r[s * na + a] = 1.0;
            }
        }
    }
    Ok(Env {
        name: "gridworld".into(),
        mdp: TabularMdp::new(ns, na, p, r, gamma, terminal)?,
        start_state: 0,
        horizon: 100,
    })
}

fn cliff_env(gamma: f64) -> Result<Env> {
    let (rows, cols, na) = (4, 12, 4);
    let ns = rows * cols;
    let start = (rows - 1) * cols; // bottom-left
    let goal = rows * cols - 1; // bottom-right
    let is_cliff = |s: usize| s / cols == rows - 1 && s % cols > 0 && s % cols < cols - 1;
    let mut p = vec![0.0; ns * na * ns];
    let mut r = vec![0.0; ns * na];
    let mut terminal = vec![false; ns];
    terminal[goal] = true;
    for s in 0..ns {
        for a in 0..na {
            if s == goal {
                p[(s * na + a) * ns + s] = 1.0;
                continue;
            }
            let (nr, nc) = grid_step(s / cols, s % cols, a, rows, cols);
            let s2 = nr * cols + nc;
            if is_cliff(s2) {
                // fall off: penalty, teleport back to the start
                p[(s * na + a) * ns + start] = 1.0;
                r[s * na + a] = -1.0;
            } else {
                p[(s * na + a) * ns + s2] = 1.0;
                if s2 == goal {
                    r[s * na + a] = 1.0;
                }
            }
        }
    }
    Ok(Env {
        name: "cliff".into(),
        mdp: TabularMdp::new(ns, na, p, r, gamma, terminal)?,
        start_state: start,
        horizon: 200,
    })
}

// ── Optimal-return oracle ──

/// Q* by value iteration (sup-norm tolerance 1e-12).
pub fn value_iteration(mdp: &TabularMdp) -> Result<Vec<f64>> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut q = vec![0.0; ns * na];
    for _ in 0..100_000 {
        let mut next = vec![0.0; ns * na];
        let mut delta = 0.0f64;
        for s in 0..ns {
            if mdp.is_terminal(s) {
                continue;
            }
            for a in 0..na {
                let mut acc = mdp.r(s, a);
                for s2 in 0..ns {
                    let pr = mdp.p(s, a, s2);
                    if pr > 0.0 {
                        let best = (0..na).map(|b| q[s2 * na + b]).fold(f64::MIN, f64::max);
                        acc += mdp.gamma * pr * if mdp.is_terminal(s2) { 0.0 } else { best };
                    }
                }
                next[s * na + a] = acc;
                delta = delta.max((acc - q[s * na + a]).abs());
            }
        }
        q = next;
        if delta < 1e-12 {
            return Ok(q);
        }
    }
    Err(HarnessError::NoConvergence)
}

/// Deterministic argmax policy over Q* (lowest index on ties).
pub fn greedy_policy(q: &[f64], n_states: usize, n_actions: usize) -> Result<TabularPolicy> {
    let mut probs = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        let row = &q[s * n_actions..(s + 1) * n_actions];
        probs[s * n_actions + argmax_lowest(row)] = 1.0;
    }
    Ok(TabularPolicy::new(n_states, n_actions, probs)?)
}

/// V*(start): value iteration, then exact evaluation of the greedy policy.
pub fn optimal_return(env: &Env) -> Result<f64> {
    let q = value_iteration(&env.mdp)?;
    let pi = greedy_policy(&q, env.mdp.n_states, env.mdp.n_actions)?;
    Ok(exact_v(&env.mdp, &pi)?[env.start_state])
}

// ── Replay ──

/// FIFO trajectory store with uniform sampling. Behavior probabilities ride
/// inside the stored transitions, so replayed μ(a|s) is always the
/// probability in force at collection time.
pub struct ReplayBuffer {
    capacity: usize,
    sample_reuse: usize,
    entries: VecDeque<Vec<Transition>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, sample_reuse: usize) -> Self {
        assert!(capacity > 0 && sample_reuse > 0);
        Self { capacity, sample_reuse, entries: VecDeque::new() }
    }

    pub fn push(&mut self, trajectory: Vec<Transition>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(trajectory);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &[Transition] {
        &self.entries[i]
    }

    /// Uniform sample of `count` stored trajectories (with replacement).
    pub fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Transition>> {
        assert!(!self.entries.is_empty());
        (0..count)
            .map(|_| self.entries[rng.gen_range(0..self.entries.len())].clone())
            .collect()
    }

    /// Trajectories to collect per update so each entry is trained on about
    /// `sample_reuse` times before FIFO eviction.
    pub fn collect_quota(&self, sampled_per_update: usize) -> usize {
        (sampled_per_update / self.sample_reuse).max(1)
    }
}

// ── Policies from the head ──

/// The policy that collects data: π itself, or ε-greedy over Q.
pub fn behavior_policy(head: &CasaHead, algo: Algo, epsilon: f64) -> Result<TabularPolicy> {
    let na = head.n_actions;
    let mut probs = vec![0.0; head.n_states * na];
    for s in 0..head.n_states {
        let out = head.head_forward(s)?;
        let row = if algo.epsilon_greedy_behavior() {
            epsilon_greedy_probs(&out.q, epsilon)?
        } else {
            out.pi
        };
        probs[s * na..(s + 1) * na].copy_from_slice(&row);
    }
    Ok(TabularPolicy::new(head.n_states, na, probs)?)
}

/// The policy the return estimators bootstrap under: the head's π, except
/// `r2d2_plain` which uses the greedy argmax-Q policy (its dueling head has
/// no policy of its own).
pub fn target_policy(head: &CasaHead, algo: Algo) -> Result<TabularPolicy> {
    let na = head.n_actions;
    let mut probs = vec![0.0; head.n_states * na];
    for s in 0..head.n_states {
        let out = head.head_forward(s)?;
        if algo == Algo::R2d2Plain {
            probs[s * na + argmax_lowest(&out.q)] = 1.0;
        } else {
            probs[s * na..(s + 1) * na].copy_from_slice(&out.pi);
        }
    }
    Ok(TabularPolicy::new(head.n_states, na, probs)?)
}

// ── Target wiring ──

/// Per-trajectory (v_targets, q_targets) under the configured estimator.
/// The doubly-robust family produces both natively; the V-only family gets
/// its Q targets from the one-step identity q_t = r_t + γ·v_{t+1}; the
/// Q-only family gets its V targets from the V-only estimator with the same
/// clips.
pub fn compute_targets(
    batch: &TrajectoryBatch,
    values: &ValuePair,
    pi: &TabularPolicy,
    spec: &TraceSpec,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    match spec.family {
        TraceFamily::DrTrace => {
            let t = dr_trace_targets(batch, values, pi, spec)?;
            Ok((t.v_targets, t.q_targets))
        }
        TraceFamily::VTrace => {
            let v_tgts = v_trace_targets(batch, &values.v, pi, spec)?;
            let mut q_tgts = Vec::with_capacity(v_tgts.len());
            for (traj, v_t) in batch.trajectories.iter().zip(&v_tgts) {
                let mut q_t = Vec::with_capacity(traj.len());
                for (t, tr) in traj.iter().enumerate() {
                    let boot = if t + 1 < traj.len() {
                        v_t[t + 1]
                    } else if tr.done {
                        0.0
                    } else {
                        values.v[tr.next_state]
                    };
                    q_t.push(tr.reward + spec.gamma * boot);
                }
                q_tgts.push(q_t);
            }
            Ok((v_tgts, q_tgts))
        }
        TraceFamily::ReTrace => {
            let q_tgts = retrace_targets(batch, &values.q, pi, spec)?;
            let v_tgts = v_trace_targets(batch, &values.v, pi, spec)?;
            Ok((v_tgts, q_tgts))
        }
    }
}

/// Flatten sampled trajectories plus their targets into a loss batch, with
/// ρ = min(π(a|s)/μ(a|s), ρ̄) recomputed against the current target policy.
pub fn build_loss_batch(
    batch: &TrajectoryBatch,
    v_targets: &[Vec<f64>],
    q_targets: &[Vec<f64>],
    pi: &TabularPolicy,
    spec: &TraceSpec,
) -> Result<LossBatch> {
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut v_t = Vec::new();
    let mut q_t = Vec::new();
    let mut rho = Vec::new();
    for (j, traj) in batch.trajectories.iter().enumerate() {
        for (t, tr) in traj.iter().enumerate() {
            states.push(tr.state);
            actions.push(tr.action);
            v_t.push(v_targets[j][t]);
            q_t.push(q_targets[j][t]);
            rho.push((pi.prob(tr.state, tr.action) / tr.behavior_prob).min(spec.rho_bar));
        }
    }
    Ok(LossBatch::new(states, actions, v_t, q_t, rho)?)
}

// ── Cached combined gradient ──

/// Bit-identical fast path for [`gpi::combined_update`]: tabular states mean
/// a batch holds few distinct (s, a) pairs, so each per-sample gradient is
/// computed once and reused. Backward passes are deterministic, so the
/// accumulation arithmetic — and hence the result — matches the reference
/// exactly; a test pins that.
pub fn combined_update_cached(
    head: &CasaHead,
    batch: &LossBatch,
    weights: &GpiWeights,
    tau: f64,
) -> Result<Vec<f64>> {
    weights.validate()?;
    let dim = head.params.total_len();
    let mut outs: HashMap<usize, crate::casa_head::HeadOutput> = HashMap::new();
    let mut gv: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut gq: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    let mut glp: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    for i in 0..batch.len() {
        let (s, a) = (batch.states[i], batch.actions[i]);
        if !outs.contains_key(&s) {
            outs.insert(s, head.head_forward(s)?);
        }
        if weights.alpha1 != 0.0 && !gv.contains_key(&s) {
            gv.insert(s, head.grad_v(s)?);
        }
        if weights.alpha2 != 0.0 && !gq.contains_key(&(s, a)) {
            gq.insert((s, a), head.grad_q(s, a)?);
        }
        if weights.alpha3 != 0.0 && !glp.contains_key(&(s, a)) {
            glp.insert((s, a), head.grad_log_pi(s, a)?);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let mut acc = vec![0.0; dim];
    // per-loss accumulators mirror the reference's evaluation order
    for (&alpha, term) in [&weights.alpha1, &weights.alpha2, &weights.alpha3]
        .into_iter()
        .zip(0..3)
    {
        if alpha == 0.0 {
            continue;
        }
        let mut part = vec![0.0; dim];
        for i in 0..batch.len() {
            let (s, a) = (batch.states[i], batch.actions[i]);
            let out = &outs[&s];
            let (w, g): (f64, &Vec<f64>) = match term {
                0 => (batch.v_targets[i] - out.v, &gv[&s]),
                1 => (batch.q_targets[i] - out.q[a], &gq[&(s, a)]),
                _ => {
                    if out.pi[a] <= 0.0 {
                        return Err(HarnessError::Gpi(GpiError::ZeroPolicyProb {
                            state: s,
                            action: a,
                        }));
                    }
                    (tau * batch.rho[i] * (batch.q_targets[i] - out.v), &glp[&(s, a)])
                }
            };
            if w != 0.0 {
                for (p, x) in part.iter_mut().zip(g) {
                    *p += w * x;
                }
            }
        }
        for (a_i, p) in acc.iter_mut().zip(&part) {
            *a_i += alpha * (p * inv);
        }
    }
    Ok(acc)
}

// ── Training loop ──

#[derive(Debug, Clone, Serialize)]
pub struct TrainingSummary {
    pub updates: usize,
    pub episodes: usize,
    /// Mean discounted return over the final window of episodes.
    pub final_mean_return: f64,
    /// V*(start) for the run's environment and discount.
    pub optimal_return: f64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn discounted_return(traj: &[Transition], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut scale = 1.0;
    for tr in traj {
        acc += scale * tr.reward;
        scale *= gamma;
    }
    acc
}

fn ensure_finite(xs: &[f64], step: usize, module: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(HarnessError::NonFinite { step, module })
    }
}

/// Execute `total_updates` steps of collect → estimate → update, writing
/// `metrics.csv` and `checkpoint.json` into `out_dir`. Fully deterministic
/// given the config's seed.
pub fn run_training(config: &RunConfig, out_dir: &Path) -> Result<TrainingSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let env = make_env(&config.env, config.gamma)?;
    let (ns, na) = (env.mdp.n_states, env.mdp.n_actions);
    let mut head = CasaHead::new(config.head_variant, ns, na, config.tau, config.seed)?;
    let best = optimal_return(&env)?;

    let metrics_path = out_dir.join("metrics.csv");
    let checkpoint_path = out_dir.join("checkpoint.json");
    let mut logger = DiagnosticsLogger::create(&metrics_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut buffer = ReplayBuffer::new(REPLAY_CAPACITY, SAMPLE_REUSE);
    let mut window: VecDeque<f64> = VecDeque::with_capacity(RETURN_WINDOW);
    let mut episodes = 0usize;

    for step in 1..=config.total_updates {
        // collect with the current behavior policy; μ(a|s) is stored per
        // transition and never rewritten
        let mu = behavior_policy(&head, config.algo, config.epsilon())?;
        let quota = buffer.collect_quota(config.batch_size);
        let fresh = sample_trajectories_from(
            &env.mdp,
            &mu,
            env.start_state,
            quota,
            env.horizon,
            rng.gen(),
        )?;
        for mut traj in fresh.trajectories {
            if config.reward_shape != RewardShape::None {
                for tr in &mut traj {
                    tr.reward = reward_shape(tr.reward, config.reward_shape);
                }
            }
            if window.len() == RETURN_WINDOW {
                window.pop_front();
            }
            window.push_back(discounted_return(&traj, config.gamma));
            episodes += 1;
            buffer.push(traj);
        }

        // estimate targets under the current head
        let sampled = TrajectoryBatch {
            trajectories: buffer.sample(config.batch_size, &mut rng),
            seed: config.seed,
        };
        let values = ValuePair::from_casa_head(&head)?;
        let pi = target_policy(&head, config.algo)?;
        let (v_tgts, q_tgts) = compute_targets(&sampled, &values, &pi, &config.trace)?;
        for row in v_tgts.iter().chain(&q_tgts) {
            ensure_finite(row, step, "traces")?;
        }
        let batch = build_loss_batch(&sampled, &v_tgts, &q_tgts, &pi, &config.trace)?;

        let log_now = step % config.log_period == 0;
        let report = if log_now {
            Some(diagnostics::angle_panel(&head, &batch, config.tau)?)
        } else {
            None
        };

        // combined ascent step
        let mut grad = combined_update_cached(&head, &batch, &config.weights, config.tau)?;
        ensure_finite(&grad, step, "gpi")?;
        gpi::clip_grad_norm(&mut grad, GRAD_CLIP_NORM);
        head.params.add_scaled(&grad, LEARNING_RATE);
        ensure_finite(&head.params.to_flat(), step, "harness")?;

        if let Some(report) = report {
            let mean_ret = if window.is_empty() {
                0.0
            } else {
                window.iter().sum::<f64>() / window.len() as f64
            };
            let mut ent = 0.0;
            let mut count = 0;
            for s in env.mdp.non_terminal_states() {
                ent += gpi::entropy(&head.head_forward(s)?.pi);
                count += 1;
            }
            logger.log(step, mean_ret, &report, ent / count as f64)?;
        }
    }

    fs::write(&checkpoint_path, head.save_checkpoint())?;
    let final_mean_return = if window.is_empty() {
        0.0
    } else {
        window.iter().sum::<f64>() / window.len() as f64
    };
    Ok(TrainingSummary {
        updates: config.total_updates,
        episodes,
        final_mean_return,
        optimal_return: best,
        metrics_path,
        checkpoint_path,
    })
}

// ── Verification suites (CLI `verify`) ──

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Shared-gradient path check over random heads: ∇Q must equal τ∇log π.
pub fn verify_gradients() -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let tau = 0.1 + 0.3 * (seed % 4) as f64;
        let head = CasaHead::new(HeadVariant::Casa, 5, 4, tau, seed)?;
        for s in 0..5 {
            for a in 0..4 {
                let gq = head.grad_q(s, a)?;
                let glp = head.grad_log_pi(s, a)?;
                let sup = gq.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let resid = gq
                    .iter()
                    .zip(&glp)
                    .map(|(q, l)| (q - tau * l).abs())
                    .fold(0.0f64, f64::max);
                worst = worst.max(resid / (1.0 + sup));
            }
        }
    }
    Ok(SuiteResult {
        name: "gradients".into(),
        passed: worst <= 1e-10,
        detail: format!("max normalized |∇Q − τ∇log π| = {worst:.3e} (bound 1e-10)"),
    })
}

/// Exact-operator checks on random MDPs: the recentered value operator must
/// converge to the clipped-policy fixed point.
pub fn verify_operators() -> Result<SuiteResult> {
    use crate::traces::iterate_u;
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let mdp = random_mdp_for_verify(5, 3, 0.9, &mut rng);
        let pi = random_policy_for_verify(5, 3, &mut rng);
        let mu = random_policy_for_verify(5, 3, &mut rng);
        let spec = TraceSpec::new(TraceFamily::DrTrace, 1.05, 1.05, 0.9)?;
        let start = ValuePair::new(vec![0.0; 5], vec![0.0; 15]);
        let (_, errors) = iterate_u(&start, &mdp, &pi, &mu, &spec, 200)?;
        worst = worst.max(*errors.last().unwrap());
    }
    Ok(SuiteResult {
        name: "operators".into(),
        passed: worst < 1e-8,
        detail: format!("max sup-norm error after 200 iterations = {worst:.3e} (bound 1e-8)"),
    })
}

/// Gradient-identity checks: decomposition, entropy gap, and the
/// advantage-score/entropy link on random shared-gradient heads.
pub fn verify_identities() -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let head = CasaHead::new(HeadVariant::Casa, 4, 3, 0.2 + 0.2 * (seed % 3) as f64, seed)?;
        let states = vec![0, 1, 2, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let targets: Vec<f64> = (0..states.len() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        worst = worst.max(gpi::verify_policy_gradient_decomposition(&head, &states, &targets)?);
        worst = worst.max(gpi::verify_entropy_gap(&head, &states, &targets)?);
        worst = worst.max(gpi::verify_advantage_score_entropy(&head, &states)?);
    }
    Ok(SuiteResult {
        name: "identities".into(),
        passed: worst < 1e-9,
        detail: format!("max identity residual = {worst:.3e} (bound 1e-9)"),
    })
}

/// Run one named suite, or all of them.
pub fn verify_suite(name: &str) -> Result<Vec<SuiteResult>> {
    match name {
        "gradients" => Ok(vec![verify_gradients()?]),
        "operators" => Ok(vec![verify_operators()?]),
        "identities" => Ok(vec![verify_identities()?]),
        "all" => Ok(vec![verify_gradients()?, verify_operators()?, verify_identities()?]),
        other => Err(HarnessError::BadConfig(format!(
            "unknown suite `{other}`; valid suites: gradients, operators, identities, all"
        ))),
    }
}

fn random_mdp_for_verify(ns: usize, na: usize, gamma: f64, rng: &mut ChaCha8Rng) -> TabularMdp {
    let mut p = vec![0.0; ns * na * ns];
    let mut r = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let row: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for s2 in 0..ns {
                p[(s * na + a) * ns + s2] = row[s2] / sum;
            }
            r[s * na + a] = rng.gen_range(-1.0..1.0);
        }
    }
    TabularMdp::new(ns, na, p, r, gamma, vec![false; ns]).expect("rows normalized")
}

fn random_policy_for_verify(ns: usize, na: usize, rng: &mut ChaCha8Rng) -> TabularPolicy {
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        let row: Vec<f64> = (0..na).map(|_| rng.gen_range(0.1..1.0)).collect();
        let sum: f64 = row.iter().sum();
        for a in 0..na {
            probs[s * na + a] = row[a] / sum;
        }
    }
    TabularPolicy::new(ns, na, probs).expect("rows normalized")
}
