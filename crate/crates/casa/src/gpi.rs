//! Loss gradients for generalized policy iteration over a shared head.
//!
//! Three ascent directions, each a batch-mean over transitions with frozen
//! targets (no gradient flows into V^π̃ / Q^π̃ estimates):
//!
//!   ∇L_V = E[(V^π̃ − V_θ)∇V_θ]               — value evaluation
//!   ∇L_Q = E[(Q^π̃ − Q_θ)∇Q_θ]               — action-value evaluation
//!   ∇𝒥  = E[τ·ρ·(Q^π̃ − V_θ)∇log π_θ]        — policy improvement
//!
//! and the combined update α₁∇L_V + α₂∇L_Q + α₃∇𝒥. Adding the step
//! +η·combined to θ decreases both squared errors and increases the policy
//! objective; the extra τ in ∇𝒥 keeps the gradient scale independent of the
//! temperature.
//!
//! For the shared-gradient head these directions are not independent: with
//! g = (1−π)∇A = ∇Q = τ∇log π the exact-expectation identities
//!
//!   ∇𝒥  = ∇L_Q + E_π[(Q_θ − V_θ)g]
//!   ∇L_Q = ∇𝒥 + τ²∇H[π],   via   E_π[(Q_θ − V_θ)∇log π] = −τ∇H[π]
//!
//! hold to machine precision; the `verify_*` functions measure their
//! residuals, exactly (per-action sums) or by Monte-Carlo sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casa_head::{CasaHead, HeadError};

#[derive(Debug, Error)]
pub enum GpiError {
    #[error("loss weights must be non-negative and not all zero: ({0}, {1}, {2})")]
    BadWeights(f64, f64, f64),
    #[error("batch arrays have inconsistent lengths")]
    RaggedBatch,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("policy probability is zero at state {state}, action {action}")]
    ZeroPolicyProb { state: usize, action: usize },
    #[error(transparent)]
    Head(#[from] HeadError),
}

pub type Result<T> = std::result::Result<T, GpiError>;

/// Scales (α₁, α₂, α₃) for the combined update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpiWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for GpiWeights {
    /// Value losses weighted an order of magnitude above the V-loss.
    fn default() -> Self {
        Self { alpha1: 1.0, alpha2: 10.0, alpha3: 10.0 }
    }
}

impl GpiWeights {
    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64) -> Result<Self> {
        let w = Self { alpha1, alpha2, alpha3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha1 >= 0.0
            && self.alpha2 >= 0.0
            && self.alpha3 >= 0.0
            && (self.alpha1 > 0.0 || self.alpha2 > 0.0 || self.alpha3 > 0.0);
        if ok {
            Ok(())
        } else {
            Err(GpiError::BadWeights(self.alpha1, self.alpha2, self.alpha3))
        }
    }
}

/// One training batch: states, taken actions, frozen targets, clipped IS
/// ratios. Targets are plain numbers — by construction no gradient can flow
/// into them.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub v_targets: Vec<f64>,
    pub q_targets: Vec<f64>,
    pub rho: Vec<f64>,
}

impl LossBatch {
    pub fn new(
        states: Vec<usize>,
        actions: Vec<usize>,
        v_targets: Vec<f64>,
        q_targets: Vec<f64>,
        rho: Vec<f64>,
    ) -> Result<Self> {
        let n = states.len();
        if n == 0 {
            return Err(GpiError::EmptyBatch);
        }
        if actions.len() != n || v_targets.len() != n || q_targets.len() != n || rho.len() != n {
            return Err(GpiError::RaggedBatch);
        }
        Ok(Self { states, actions, v_targets, q_targets, rho })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (acc_i, x_i) in acc.iter_mut().zip(x) {
        *acc_i += a * x_i;
    }
}

// ── Batch loss gradients ──

/// ∇L_V: batch-mean of (v_target − V_θ(s))·∇V_θ(s). Ascent direction — a
/// +η step reduces the squared value error.
pub fn grad_v_loss(head: &CasaHead, batch: &LossBatch) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; head.params.total_len()];
    for i in 0..batch.len() {
        let s = batch.states[i];
        let out = head.head_forward(s)?;
        let resid = batch.v_targets[i] - out.v;
        if resid != 0.0 {
            axpy(&mut acc, &head.grad_v(s)?, resid);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

/// ∇L_Q: batch-mean of (q_target − Q_θ(s,a))·∇Q_θ(s,a).
pub fn grad_q_loss(head: &CasaHead, batch: &LossBatch) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; head.params.total_len()];
    for i in 0..batch.len() {
        let (s, a) = (batch.states[i], batch.actions[i]);
        let out = head.head_forward(s)?;
        let resid = batch.q_targets[i] - out.q[a];
        if resid != 0.0 {
            axpy(&mut acc, &head.grad_q(s, a)?, resid);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

/// ∇𝒥: batch-mean of τ·ρ·(q_target − V_θ(s))·∇log π_θ(a|s). The baseline
/// V_θ and the target are both frozen weights on the score vector; with
/// `use_is` off, ρ ≡ 1.
pub fn grad_policy_objective(
    head: &CasaHead,
    batch: &LossBatch,
    tau: f64,
    use_is: bool,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; head.params.total_len()];
    for i in 0..batch.len() {
        let (s, a) = (batch.states[i], batch.actions[i]);
        let out = head.head_forward(s)?;
        if out.pi[a] <= 0.0 {
            return Err(GpiError::ZeroPolicyProb { state: s, action: a });
        }
        let rho = if use_is { batch.rho[i] } else { 1.0 };
        let w = tau * rho * (batch.q_targets[i] - out.v);
        if w != 0.0 {
            axpy(&mut acc, &head.grad_log_pi(s, a)?, w);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

/// α₁∇L_V + α₂∇L_Q + α₃∇𝒥, with ρ taken from the batch.
pub fn combined_update(
    head: &CasaHead,
    batch: &LossBatch,
    weights: &GpiWeights,
    tau: f64,
) -> Result<Vec<f64>> {
    weights.validate()?;
    let mut acc = vec![0.0; head.params.total_len()];
    if weights.alpha1 != 0.0 {
        axpy(&mut acc, &grad_v_loss(head, batch)?, weights.alpha1);
    }
    if weights.alpha2 != 0.0 {
        axpy(&mut acc, &grad_q_loss(head, batch)?, weights.alpha2);
    }
    if weights.alpha3 != 0.0 {
        axpy(&mut acc, &grad_policy_objective(head, batch, tau, true)?, weights.alpha3);
    }
    Ok(acc)
}

/// Scale `grad` down to `max_norm` if its ℓ₂ norm exceeds it; returns the
/// pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|x| *x *= scale);
    }
    norm
}

// ── Entropy ──

/// H[π] = −Σ_a π(a) log π(a), with the 0·log 0 = 0 convention.
pub fn entropy(pi: &[f64]) -> f64 {
    -pi.iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// ∇H[π(·|s)] = −Σ_a π(a) log π(a) ∇log π(a|s), exact action sum.
pub fn grad_entropy(head: &CasaHead, state: usize) -> Result<Vec<f64>> {
    let out = head.head_forward(state)?;
    let mut acc = vec![0.0; head.params.total_len()];
    for (a, &p) in out.pi.iter().enumerate() {
        if p > 0.0 {
            axpy(&mut acc, &head.grad_log_pi(state, a)?, -p * p.ln());
        }
    }
    Ok(acc)
}

// ── Exact-expectation gradients (per-action sums, mean over states) ──

fn check_targets(head: &CasaHead, states: &[usize], q_targets: &[f64]) -> Result<()> {
    if states.is_empty() {
        return Err(GpiError::EmptyBatch);
    }
    if q_targets.len() != states.len() * head.n_actions {
        return Err(GpiError::RaggedBatch);
    }
    Ok(())
}

/// Exact ∇𝒥 = mean over states of Σ_a π(a)·τ·(q̃(s,a) − V(s))·∇log π(a|s).
/// `q_targets` is row-major over (position in `states`, action).
pub fn exact_grad_policy_objective(
    head: &CasaHead,
    states: &[usize],
    q_targets: &[f64],
) -> Result<Vec<f64>> {
    check_targets(head, states, q_targets)?;
    let na = head.n_actions;
    let mut acc = vec![0.0; head.params.total_len()];
    for (i, &s) in states.iter().enumerate() {
        let out = head.head_forward(s)?;
        for a in 0..na {
            let w = out.pi[a] * head.tau * (q_targets[i * na + a] - out.v);
            if w != 0.0 {
                axpy(&mut acc, &head.grad_log_pi(s, a)?, w);
            }
        }
    }
    let inv = 1.0 / states.len() as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

/// Exact ∇L_Q = mean over states of Σ_a π(a)·(q̃(s,a) − Q(s,a))·∇Q(s,a).
pub fn exact_grad_q_loss(
    head: &CasaHead,
    states: &[usize],
    q_targets: &[f64],
) -> Result<Vec<f64>> {
    check_targets(head, states, q_targets)?;
    let na = head.n_actions;
    let mut acc = vec![0.0; head.params.total_len()];
    for (i, &s) in states.iter().enumerate() {
        let out = head.head_forward(s)?;
        for a in 0..na {
            let w = out.pi[a] * (q_targets[i * na + a] - out.q[a]);
            if w != 0.0 {
                axpy(&mut acc, &head.grad_q(s, a)?, w);
            }
        }
    }
    let inv = 1.0 / states.len() as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

/// Exact E_π[(Q − V)·d] with the head's own values, where `d` is ∇Q when
/// `along_q` and ∇log π otherwise; mean over states.
fn exact_advantage_weighted(head: &CasaHead, states: &[usize], along_q: bool) -> Result<Vec<f64>> {
    if states.is_empty() {
        return Err(GpiError::EmptyBatch);
    }
    let na = head.n_actions;
    let mut acc = vec![0.0; head.params.total_len()];
    for &s in states {
        let out = head.head_forward(s)?;
        for a in 0..na {
            let w = out.pi[a] * (out.q[a] - out.v);
            if w != 0.0 {
                let dir = if along_q { head.grad_q(s, a)? } else { head.grad_log_pi(s, a)? };
                axpy(&mut acc, &dir, w);
            }
        }
    }
    let inv = 1.0 / states.len() as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

// ── Identity verifiers ──

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max)
}

/// Residual of the policy-gradient decomposition
/// ∇𝒥 = ∇L_Q + E_π[(Q − V)·g] with g = ∇Q, under exact action sums and the
/// same frozen targets on both sides. Max elementwise residual; machine-zero
/// for the shared-gradient head, generically large when ∇Q ∦ ∇log π.
pub fn verify_policy_gradient_decomposition(
    head: &CasaHead,
    states: &[usize],
    q_targets: &[f64],
) -> Result<f64> {
    let lhs = exact_grad_policy_objective(head, states, q_targets)?;
    let mut rhs = exact_grad_q_loss(head, states, q_targets)?;
    let adv = exact_advantage_weighted(head, states, true)?;
    axpy(&mut rhs, &adv, 1.0);
    Ok(max_abs_diff(&lhs, &rhs))
}

/// Residual of the entropy gap ∇L_Q = ∇𝒥 + τ²∇H[π] under exact action sums.
pub fn verify_entropy_gap(head: &CasaHead, states: &[usize], q_targets: &[f64]) -> Result<f64> {
    let lhs = exact_grad_q_loss(head, states, q_targets)?;
    let mut rhs = exact_grad_policy_objective(head, states, q_targets)?;
    for &s in states {
        let ge = grad_entropy(head, s)?;
        axpy(&mut rhs, &ge, head.tau * head.tau / states.len() as f64);
    }
    Ok(max_abs_diff(&lhs, &rhs))
}

/// Residual of the advantage-score/entropy link
/// E_π[(Q − V)∇log π] = −τ∇H[π], the one-line bridge between the two
/// identities above.
pub fn verify_advantage_score_entropy(head: &CasaHead, states: &[usize]) -> Result<f64> {
    let lhs = exact_advantage_weighted(head, states, false)?;
    let mut rhs = vec![0.0; head.params.total_len()];
    for &s in states {
        let ge = grad_entropy(head, s)?;
        axpy(&mut rhs, &ge, -head.tau / states.len() as f64);
    }
    Ok(max_abs_diff(&lhs, &rhs))
}

// ── Sampled-expectation verifiers ──

/// Monte-Carlo residual of the policy-gradient decomposition: both sides
/// estimated from *independent* action draws (a ~ π) of size `n_samples`.
/// With shared draws the two sides coincide identically for the
/// shared-gradient head, leaving nothing to measure; independent draws make
/// the residual shrink as O(1/√N).
pub fn sampled_policy_gradient_decomposition(
    head: &CasaHead,
    states: &[usize],
    q_targets: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    check_targets(head, states, q_targets)?;
    let na = head.n_actions;
    let dim = head.params.total_len();
    let mut sides = Vec::with_capacity(2);
    for stream in 0..2u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut acc = vec![0.0; dim];
        for _ in 0..n_samples {
            let i = rng.gen_range(0..states.len());
            let s = states[i];
            let out = head.head_forward(s)?;
            let a = sample_from(&out.pi, &mut rng);
            if stream == 0 {
                let w = head.tau * (q_targets[i * na + a] - out.v);
                axpy(&mut acc, &head.grad_log_pi(s, a)?, w);
            } else {
                let w = (q_targets[i * na + a] - out.q[a]) + (out.q[a] - out.v);
                axpy(&mut acc, &head.grad_q(s, a)?, w);
            }
        }
        let inv = 1.0 / n_samples as f64;
        acc.iter_mut().for_each(|x| *x *= inv);
        sides.push(acc);
    }
    Ok(max_abs_diff(&sides[0], &sides[1]))
}

/// Monte-Carlo residual of the entropy gap on shared action draws: per
/// sample, (q̃−Q)∇Q versus τ(q̃−V)∇log π − τ² log π(a)·∇log π. The
/// per-sample difference has zero mean but nonzero variance, so the residual
/// shrinks as O(1/√N).
pub fn sampled_entropy_gap(
    head: &CasaHead,
    states: &[usize],
    q_targets: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    check_targets(head, states, q_targets)?;
    let na = head.n_actions;
    let dim = head.params.total_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lhs = vec![0.0; dim];
    let mut rhs = vec![0.0; dim];
    for _ in 0..n_samples {
        let i = rng.gen_range(0..states.len());
        let s = states[i];
        let out = head.head_forward(s)?;
        let a = sample_from(&out.pi, &mut rng);
        let qt = q_targets[i * na + a];
        axpy(&mut lhs, &head.grad_q(s, a)?, qt - out.q[a]);
        let glp = head.grad_log_pi(s, a)?;
        axpy(&mut rhs, &glp, head.tau * (qt - out.v));
        axpy(&mut rhs, &glp, -head.tau * head.tau * out.pi[a].ln());
    }
    let inv = 1.0 / n_samples as f64;
    lhs.iter_mut().for_each(|x| *x *= inv);
    rhs.iter_mut().for_each(|x| *x *= inv);
    Ok(max_abs_diff(&lhs, &rhs))
}

fn sample_from(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}
