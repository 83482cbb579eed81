//! The shared-gradient actor-critic head and its ablation variants.
//!
//! One backbone (a small tanh MLP over one-hot states) feeds an advantage
//! head A_θ and a value head V_θ. The policy is read off the advantages,
//! π_θ(·|s) = softmax(A_θ(s,·)/τ), and the action value is assembled as
//!
//! Q_θ(s,a) = A_θ(s,a) − Σ_b sg(π_θ(b|s))·A_θ(s,b) + sg(V_θ(s)),
//!
//! where sg(·) is stop-gradient. The two placements of sg are the whole
//! point: they make ∇_θQ = (1 − π)∇_θA = τ∇_θ log π hold exactly, so actor
//! and critic push the shared parameters along one direction instead of two.
//! The ablation variants move or drop the stop-gradients and break either
//! the gradient identity, the E_π[Q] = V constraint, or both:
//!
//! | variant      | Q assembly                     |
//! |--------------|--------------------------------|
//! | `Casa`       | A − sg(π)·A + sg(V)            |
//! | `Type1`      | A − π·A + sg(V)                |
//! | `Type2`      | A − sg(π)·A + V                |
//! | `Type3`      | A + sg(V)                      |
//! | `Type4`      | A + V (dueling)                |
//! | `Type5`      | separate Q head off the backbone |
//! | `PlainLogit` | logits + separate Q head, V = sg(π)·Q |
//!
//! All gradients are taken over a single flat [`ParamVector`], so gradient
//! directions from different losses are directly comparable coordinates.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    softmax_stable, AutodiffError, NodeId, ParamSegment, ParamVector, Tape,
};

/// Hidden widths of the backbone MLP.
pub const HIDDEN: [usize; 2] = [32, 32];

/// Probabilities are lifted to at least this before log; rescues exact
/// underflow to 0 while leaving any representable probability untouched.
pub const PI_LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("temperature must be positive, got {0}")]
    BadTau(f64),
    #[error("state {0} out of range (head has {1} states)")]
    BadState(usize, usize),
    #[error("action {0} out of range (head has {1} actions)")]
    BadAction(usize, usize),
    #[error("non-finite output in {0}")]
    NonFinite(&'static str),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, HeadError>;

/// Stop-gradient placement variants (see the module table).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Casa,
    Type1,
    Type2,
    Type3,
    Type4,
    Type5,
    PlainLogit,
}

impl HeadVariant {
    fn has_v_head(self) -> bool {
        !matches!(self, HeadVariant::PlainLogit)
    }

    fn has_q_head(self) -> bool {
        matches!(self, HeadVariant::Type5 | HeadVariant::PlainLogit)
    }
}

/// Everything the head computes for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub v: f64,
    /// Raw advantage-head outputs (logits for `PlainLogit`).
    pub a: Vec<f64>,
    /// Recentered advantages Ā = A − E_π[A] where the variant recenters;
    /// equal to `a` otherwise.
    pub a_bar: Vec<f64>,
    pub pi: Vec<f64>,
    pub q: Vec<f64>,
}

/// Node handles for one state's computation graph on a [`Tape`].
struct HeadGraph {
    a: NodeId,
    a_bar: NodeId,
    pi: NodeId,
    q: NodeId,
    v: NodeId,
}

/// Actor-critic head over one-hot tabular states.
///
/// Single-writer: forward/backward build a fresh tape per call, so `&self`
/// methods are safe to call from one thread while clones serve others.
#[derive(Debug)]
pub struct CasaHead {
    pub variant: HeadVariant,
    pub n_states: usize,
    pub n_actions: usize,
    /// Temperature τ > 0; fixed, not a trainable parameter.
    pub tau: f64,
    pub params: ParamVector,
    /// Counts probability-underflow rescues in `grad_log_pi` (π lifted to
    /// [`PI_LOG_FLOOR`] before log).
    underflow_warnings: AtomicU64,
}

impl Clone for CasaHead {
    fn clone(&self) -> Self {
        Self {
            variant: self.variant,
            n_states: self.n_states,
            n_actions: self.n_actions,
            tau: self.tau,
            params: self.params.clone(),
            underflow_warnings: AtomicU64::new(self.underflow_warnings.load(Ordering::Relaxed)),
        }
    }
}

impl CasaHead {
    /// Fresh head with U[−1/√fan_in, +1/√fan_in] initialization.
    pub fn new(
        variant: HeadVariant,
        n_states: usize,
        n_actions: usize,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(HeadError::BadTau(tau));
        }
        assert!(n_states >= 1 && n_actions >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h1, h2] = HIDDEN;
        let mut segments = vec![
            init_segment("w1", &[h1, n_states], n_states, &mut rng),
            init_segment("b1", &[h1], n_states, &mut rng),
            init_segment("w2", &[h2, h1], h1, &mut rng),
            init_segment("b2", &[h2], h1, &mut rng),
            init_segment("a_w", &[n_actions, h2], h2, &mut rng),
            init_segment("a_b", &[n_actions], h2, &mut rng),
        ];
        if variant.has_v_head() {
            segments.push(init_segment("v_w", &[1, h2], h2, &mut rng));
            segments.push(init_segment("v_b", &[1], h2, &mut rng));
        }
        if variant.has_q_head() {
            segments.push(init_segment("q_w", &[n_actions, h2], h2, &mut rng));
            segments.push(init_segment("q_b", &[n_actions], h2, &mut rng));
        }
        Ok(Self {
            variant,
            n_states,
            n_actions,
            tau,
            params: ParamVector::new(segments),
            underflow_warnings: AtomicU64::new(0),
        })
    }

    /// How many π-underflow rescues have occurred so far.
    pub fn underflow_warning_count(&self) -> u64 {
        self.underflow_warnings.load(Ordering::Relaxed)
    }

    fn param_node(&self, tape: &mut Tape, name: &str) -> NodeId {
        let idx = self
            .params
            .segment_index(name)
            .unwrap_or_else(|| panic!("head has no segment {name}"));
        tape.param(&self.params, idx)
    }

    /// Build the per-variant graph for `state`; values are computed eagerly.
    fn build_graph(&self, tape: &mut Tape, state: usize) -> Result<HeadGraph> {
        if state >= self.n_states {
            return Err(HeadError::BadState(state, self.n_states));
        }
        let mut x = vec![0.0; self.n_states];
        x[state] = 1.0;
        let x = tape.constant(x, vec![self.n_states]);

        let w1 = self.param_node(tape, "w1");
        let b1 = self.param_node(tape, "b1");
        let w2 = self.param_node(tape, "w2");
        let b2 = self.param_node(tape, "b2");
        let h = tape.matmul(w1, x)?;
        let h = tape.add(h, b1)?;
        let h = tape.tanh(h)?;
        let h = tape.matmul(w2, h)?;
        let h = tape.add(h, b2)?;
        let features = tape.tanh(h)?;

        let a_w = self.param_node(tape, "a_w");
        let a_b = self.param_node(tape, "a_b");
        let a = tape.matmul(a_w, features)?;
        let a = tape.add(a, a_b)?;

        let pi = tape.softmax_tau(a, self.tau)?;

        let v = if self.variant.has_v_head() {
            let v_w = self.param_node(tape, "v_w");
            let v_b = self.param_node(tape, "v_b");
            let v = tape.matmul(v_w, features)?;
            tape.add(v, v_b)?
        } else {
            // PlainLogit: defined below as sg(π)·Q, placeholder until q exists
            pi // overwritten before use
        };

        let (a_bar, q, v) = match self.variant {
            HeadVariant::Casa => {
                let pi_sg = tape.stop_grad(pi)?;
                let baseline = tape.dot(pi_sg, a)?;
                let a_bar = tape.sub(a, baseline)?;
                let v_sg = tape.stop_grad(v)?;
                let q = tape.add(a_bar, v_sg)?;
                (a_bar, q, v)
            }
            HeadVariant::Type1 => {
                let baseline = tape.dot(pi, a)?;
                let a_bar = tape.sub(a, baseline)?;
                let v_sg = tape.stop_grad(v)?;
                let q = tape.add(a_bar, v_sg)?;
                (a_bar, q, v)
            }
            HeadVariant::Type2 => {
                let pi_sg = tape.stop_grad(pi)?;
                let baseline = tape.dot(pi_sg, a)?;
                let a_bar = tape.sub(a, baseline)?;
                let q = tape.add(a_bar, v)?;
                (a_bar, q, v)
            }
            HeadVariant::Type3 => {
                let v_sg = tape.stop_grad(v)?;
                let q = tape.add(a, v_sg)?;
                (a, q, v)
            }
            HeadVariant::Type4 => {
                let q = tape.add(a, v)?;
                (a, q, v)
            }
            HeadVariant::Type5 => {
                let q_w = self.param_node(tape, "q_w");
                let q_b = self.param_node(tape, "q_b");
                let q = tape.matmul(q_w, features)?;
                let q = tape.add(q, q_b)?;
                (a, q, v)
            }
            HeadVariant::PlainLogit => {
                let q_w = self.param_node(tape, "q_w");
                let q_b = self.param_node(tape, "q_b");
                let q = tape.matmul(q_w, features)?;
                let q = tape.add(q, q_b)?;
                let pi_sg = tape.stop_grad(pi)?;
                let v = tape.dot(pi_sg, q)?;
                (a, q, v)
            }
        };
        Ok(HeadGraph { a, a_bar, pi, q, v })
    }

    /// Evaluate the head at `state`, returning all five quantities.
    pub fn head_forward(&self, state: usize) -> Result<HeadOutput> {
        let mut tape = Tape::default();
        let g = self.build_graph(&mut tape, state)?;
        let check = |name, xs: &[f64]| {
            if xs.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(HeadError::NonFinite(name))
            }
        };
        let a = tape.value(g.a).to_vec();
        check("a_head", &a)?;
        let a_bar = tape.value(g.a_bar).to_vec();
        let pi = tape.value(g.pi).to_vec();
        check("softmax", &pi)?;
        let q = tape.value(g.q).to_vec();
        check("q assembly", &q)?;
        let v = tape.value(g.v)[0];
        check("v_head", &[v])?;
        Ok(HeadOutput { v, a, a_bar, pi, q })
    }

    /// ∇_θ Q_θ(s,a) over the full flat parameter vector.
    pub fn grad_q(&self, state: usize, action: usize) -> Result<Vec<f64>> {
        if action >= self.n_actions {
            return Err(HeadError::BadAction(action, self.n_actions));
        }
        let mut tape = Tape::default();
        let g = self.build_graph(&mut tape, state)?;
        let root = tape.select(g.q, action)?;
        tape.forward(root)?;
        Ok(tape.backward(root, &self.params)?)
    }

    /// ∇_θ log π_θ(a|s) over the full flat parameter vector.
    ///
    /// Probabilities that underflowed to below [`PI_LOG_FLOOR`] are lifted to
    /// the floor before the log; each rescue increments the warning counter.
    pub fn grad_log_pi(&self, state: usize, action: usize) -> Result<Vec<f64>> {
        if action >= self.n_actions {
            return Err(HeadError::BadAction(action, self.n_actions));
        }
        let mut tape = Tape::default();
        let g = self.build_graph(&mut tape, state)?;
        if tape.value(g.pi)[action] < PI_LOG_FLOOR {
            self.underflow_warnings.fetch_add(1, Ordering::Relaxed);
        }
        // π + 1e-300 is bit-identical to π for any non-underflowed f64
        let floor = tape.scalar(PI_LOG_FLOOR);
        let pi_safe = tape.add(g.pi, floor)?;
        let p_a = tape.select(pi_safe, action)?;
        let root = tape.log(p_a)?;
        tape.forward(root)?;
        Ok(tape.backward(root, &self.params)?)
    }

    /// ∇_θ V_θ(s) over the full flat parameter vector.
    pub fn grad_v(&self, state: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::default();
        let g = self.build_graph(&mut tape, state)?;
        tape.forward(g.v)?;
        Ok(tape.backward(g.v, &self.params)?)
    }

    // ── Checkpointing ──

    /// JSON checkpoint: variant, τ, layer shapes, flat parameters. The float
    /// encoding round-trips 64-bit values exactly.
    pub fn save_checkpoint(&self) -> String {
        let doc = Checkpoint {
            variant: self.variant,
            tau: self.tau,
            n_states: self.n_states,
            n_actions: self.n_actions,
            layers: self
                .params
                .segments()
                .iter()
                .map(|s| LayerShape { name: s.name.clone(), shape: s.shape.clone() })
                .collect(),
            params: self.params.to_flat(),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serialization cannot fail")
    }

    /// Inverse of [`Self::save_checkpoint`], re-validating shapes and τ.
    pub fn load_checkpoint(text: &str) -> Result<Self> {
        let doc: Checkpoint =
            serde_json::from_str(text).map_err(|e| HeadError::Checkpoint(e.to_string()))?;
        if !(doc.tau > 0.0) {
            return Err(HeadError::BadTau(doc.tau));
        }
        let mut head = Self::new(doc.variant, doc.n_states, doc.n_actions, doc.tau, 0)?;
        let expected: Vec<LayerShape> = head
            .params
            .segments()
            .iter()
            .map(|s| LayerShape { name: s.name.clone(), shape: s.shape.clone() })
            .collect();
        if doc.layers != expected {
            return Err(HeadError::Checkpoint(format!(
                "layer shapes {:?} do not match variant {:?} with {} states / {} actions",
                doc.layers, doc.variant, doc.n_states, doc.n_actions
            )));
        }
        if doc.params.len() != head.params.total_len() {
            return Err(HeadError::Checkpoint(format!(
                "expected {} parameters, got {}",
                head.params.total_len(),
                doc.params.len()
            )));
        }
        head.params.set_flat(&doc.params);
        Ok(head)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    variant: HeadVariant,
    tau: f64,
    n_states: usize,
    n_actions: usize,
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq, Debug)]
struct LayerShape {
    name: String,
    shape: Vec<usize>,
}

fn init_segment(name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamSegment {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ParamSegment::new(name.to_string(), shape.to_vec(), values)
}

/// softmax(x/τ): the policy induced by any per-action score vector. With
/// τ → 0⁺ this approaches the argmax indicator.
pub fn surrogate_policy(q_or_a: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    softmax_stable(q_or_a, tau)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;

    /// Zero the whole net, then write per-action biases / value bias directly,
    /// so head outputs are exactly the chosen A and V.
    fn crafted(variant: HeadVariant, a_bias: &[f64], v_bias: f64, tau: f64) -> CasaHead {
        let mut head = CasaHead::new(variant, 3, a_bias.len(), tau, 0).unwrap();
        let zeros = vec![0.0; head.params.total_len()];
        head.params.set_flat(&zeros);
        let idx = head.params.segment_index("a_b").unwrap();
        head.params.set_segment_values(idx, a_bias);
        if let Some(idx) = head.params.segment_index("v_b") {
            head.params.set_segment_values(idx, &[v_bias]);
        }
        head
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn uniform_advantage_gives_uniform_policy() {
        let head = crafted(HeadVariant::Casa, &[0.0, 0.0], 5.0, 1.0);
        let out = head.head_forward(0).unwrap();
        assert_eq!(out.pi, vec![0.5, 0.5]);
        assert_eq!(out.a_bar, vec![0.0, 0.0]);
        assert_eq!(out.q, vec![5.0, 5.0]);
        assert_eq!(out.v, 5.0);
    }

    #[test]
    fn casa_assembly_hand_example() {
        // A=(1,−1), τ=1, V=5
        let head = crafted(HeadVariant::Casa, &[1.0, -1.0], 5.0, 1.0);
        let out = head.head_forward(1).unwrap();
        let e2 = (-2.0f64).exp();
        let p0 = 1.0 / (1.0 + e2);
        assert!((out.pi[0] - p0).abs() < 1e-12);
        assert!((out.pi[0] - 0.8808).abs() < 1e-4);
        assert!((out.pi[1] - 0.1192).abs() < 1e-4);
        let baseline = p0 * 1.0 + (1.0 - p0) * (-1.0);
        assert!((out.a_bar[0] - (1.0 - baseline)).abs() < 1e-12);
        assert!((out.a_bar[0] - 0.2384).abs() < 1e-4);
        assert!((out.a_bar[1] + 1.7616).abs() < 1e-4);
        assert!((out.q[0] - 5.2384).abs() < 1e-4);
        assert!((out.q[1] - 3.2384).abs() < 1e-4);
        // dueling constraint: E_π[Q] = V
        assert!((dot(&out.pi, &out.q) - 5.0).abs() < 1e-10);
        assert!(dot(&out.pi, &out.a_bar).abs() < 1e-10);
    }

    #[test]
    fn dueling_type4_breaks_the_constraint() {
        let head = crafted(HeadVariant::Type4, &[1.0, -1.0], 5.0, 1.0);
        let out = head.head_forward(0).unwrap();
        assert_eq!(out.q, vec![6.0, 4.0]);
        assert!((dot(&out.pi, &out.q) - out.v).abs() > 1e-3);
    }

    #[test]
    fn expectation_constraint_by_variant() {
        for (seed, &variant) in [
            HeadVariant::Casa,
            HeadVariant::Type1,
            HeadVariant::Type2,
        ]
        .iter()
        .enumerate()
        {
            let head = CasaHead::new(variant, 4, 3, 0.7, seed as u64).unwrap();
            for s in 0..4 {
                let out = head.head_forward(s).unwrap();
                assert!(
                    (dot(&out.pi, &out.q) - out.v).abs() < 1e-10,
                    "{variant:?} state {s}"
                );
            }
        }
    }

    #[test]
    fn casa_grad_q_is_tau_grad_log_pi() {
        for seed in 0..5 {
            let tau = 0.1 + 0.3 * seed as f64;
            let head = CasaHead::new(HeadVariant::Casa, 5, 3, tau, seed).unwrap();
            for s in 0..5 {
                for a in 0..3 {
                    let gq = head.grad_q(s, a).unwrap();
                    let glp = head.grad_log_pi(s, a).unwrap();
                    let scale = 1.0 + gq.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                    for (x, y) in gq.iter().zip(&glp) {
                        assert!(
                            (x - tau * y).abs() <= 1e-10 * scale,
                            "seed {seed} s{s} a{a}: {x} vs τ·{y}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn plain_logit_gradients_not_proportional() {
        let head = CasaHead::new(HeadVariant::PlainLogit, 4, 3, 0.5, 7).unwrap();
        let gq = head.grad_q(1, 2).unwrap();
        let glp = head.grad_log_pi(1, 2).unwrap();
        let nq = dot(&gq, &gq).sqrt();
        let nl = dot(&glp, &glp).sqrt();
        let cos = dot(&gq, &glp) / (nq * nl);
        assert!(cos.abs() < 1.0 - 1e-6, "cos = {cos}");
    }

    /// FD oracle for ∇Q that honors stop-gradient semantics: sg-wrapped
    /// quantities (the π baseline and/or V, per variant) are frozen at the
    /// base head's values while θ is perturbed. This is an independent
    /// re-statement of each variant's assembly formula.
    pub(crate) fn q_frozen_sg(
        variant: HeadVariant,
        perturbed: &HeadOutput,
        base: &HeadOutput,
        action: usize,
    ) -> f64 {
        let o = perturbed;
        let b = base;
        match variant {
            HeadVariant::Casa => o.a[action] - dot(&b.pi, &o.a) + b.v,
            HeadVariant::Type1 => o.a[action] - dot(&o.pi, &o.a) + b.v,
            HeadVariant::Type2 => o.a[action] - dot(&b.pi, &o.a) + o.v,
            HeadVariant::Type3 => o.a[action] + b.v,
            HeadVariant::Type4 => o.a[action] + o.v,
            HeadVariant::Type5 | HeadVariant::PlainLogit => o.q[action],
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for &variant in &[
            HeadVariant::Casa,
            HeadVariant::Type1,
            HeadVariant::Type2,
            HeadVariant::Type4,
            HeadVariant::Type5,
            HeadVariant::PlainLogit,
        ] {
            let head = CasaHead::new(variant, 3, 2, 0.8, 42).unwrap();
            let (s, a) = (2, 1);
            let base = head.head_forward(s).unwrap();
            let gq = head.grad_q(s, a).unwrap();
            let fd = finite_diff_grad(
                |p| {
                    let mut h = head.clone();
                    h.params = p.clone();
                    q_frozen_sg(variant, &h.head_forward(s).unwrap(), &base, a)
                },
                &head.params,
                1e-5,
            )
            .unwrap();
            let scale = 1.0 + gq.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (g, f) in gq.iter().zip(&fd) {
                assert!((g - f).abs() < 1e-4 * scale, "{variant:?}: {g} vs {f}");
            }

            let glp = head.grad_log_pi(s, a).unwrap();
            let fd = finite_diff_grad(
                |p| {
                    let mut h = head.clone();
                    h.params = p.clone();
                    h.head_forward(s).unwrap().pi[a].ln()
                },
                &head.params,
                1e-5,
            )
            .unwrap();
            let scale = 1.0 + glp.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (g, f) in glp.iter().zip(&fd) {
                assert!((g - f).abs() < 1e-4 * scale, "{variant:?}: {g} vs {f}");
            }

            let gv = head.grad_v(s).unwrap();
            let fd = finite_diff_grad(
                |p| {
                    let mut h = head.clone();
                    h.params = p.clone();
                    let o = h.head_forward(s).unwrap();
                    // PlainLogit's V = sg(π)·Q freezes π at the base head
                    if variant == HeadVariant::PlainLogit {
                        dot(&base.pi, &o.q)
                    } else {
                        o.v
                    }
                },
                &head.params,
                1e-5,
            )
            .unwrap();
            let scale = 1.0 + gv.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (g, f) in gv.iter().zip(&fd) {
                assert!((g - f).abs() < 1e-4 * scale, "{variant:?} ∇V: {g} vs {f}");
            }
        }
    }

    #[test]
    fn score_function_identity() {
        let head = CasaHead::new(HeadVariant::Casa, 4, 3, 0.3, 9).unwrap();
        for s in 0..4 {
            let out = head.head_forward(s).unwrap();
            let mut acc = vec![0.0; head.params.total_len()];
            for a in 0..3 {
                let g = head.grad_log_pi(s, a).unwrap();
                for (acc_i, g_i) in acc.iter_mut().zip(&g) {
                    *acc_i += out.pi[a] * g_i;
                }
            }
            for x in &acc {
                assert!(x.abs() < 1e-8, "Σ_a π ∇log π should vanish, got {x}");
            }
        }
    }

    #[test]
    fn stop_gradient_blocks_v_head_in_grad_q() {
        let head = CasaHead::new(HeadVariant::Casa, 4, 3, 0.5, 3).unwrap();
        let gq = head.grad_q(0, 1).unwrap();
        let vw = head.params.segment_index("v_w").unwrap();
        let off = head.params.offset_of(vw);
        // v_w and v_b are the trailing segments for CASA
        assert!(gq[off..].iter().all(|x| *x == 0.0));
        // ...while perturbing v_b still changes Q's value
        let mut bumped = head.clone();
        let vb = bumped.params.segment_index("v_b").unwrap();
        bumped.params.set_segment_values(vb, &[10.0]);
        let q0 = head.head_forward(0).unwrap().q[1];
        let q1 = bumped.head_forward(0).unwrap().q[1];
        assert!((q1 - q0).abs() > 1.0);
    }

    #[test]
    fn type2_leaks_v_head_into_grad_q() {
        let head = CasaHead::new(HeadVariant::Type2, 4, 3, 0.5, 3).unwrap();
        let gq = head.grad_q(0, 1).unwrap();
        let vw = head.params.segment_index("v_w").unwrap();
        let off = head.params.offset_of(vw);
        assert!(gq[off..].iter().any(|x| *x != 0.0));
    }

    #[test]
    fn type3_grad_q_equals_grad_a() {
        // Q = A + sg(V): ∇Q(s,a) is exactly the advantage-head gradient
        let head = CasaHead::new(HeadVariant::Type3, 3, 2, 1.0, 5).unwrap();
        let gq = head.grad_q(1, 0).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let mut h = head.clone();
                h.params = p.clone();
                h.head_forward(1).unwrap().a[0]
            },
            &head.params,
            1e-5,
        )
        .unwrap();
        let scale = 1.0 + gq.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (g, f) in gq.iter().zip(&fd) {
            assert!((g - f).abs() < 1e-4 * scale);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_value_exact() {
        for &variant in &[HeadVariant::Casa, HeadVariant::Type5, HeadVariant::PlainLogit] {
            let head = CasaHead::new(variant, 6, 4, 0.1, 17).unwrap();
            let text = head.save_checkpoint();
            let back = CasaHead::load_checkpoint(&text).unwrap();
            assert_eq!(head.variant, back.variant);
            assert_eq!(head.tau, back.tau);
            assert_eq!(head.params.to_flat(), back.params.to_flat());
        }
    }

    #[test]
    fn checkpoint_rejects_mismatched_shapes() {
        let head = CasaHead::new(HeadVariant::Casa, 3, 2, 0.1, 0).unwrap();
        let text = head.save_checkpoint().replace("\"n_actions\": 2", "\"n_actions\": 4");
        assert!(matches!(
            CasaHead::load_checkpoint(&text),
            Err(HeadError::Checkpoint(_))
        ));
    }

    #[test]
    fn surrogate_policy_behaviors() {
        let p = surrogate_policy(&[1.0, 0.0], 1e-3);
        assert!(p[0] > 1.0 - 1e-12 && p[1] < 1e-12);
        let p = surrogate_policy(&[0.0, 0.0, 0.0], 1.0);
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let base = surrogate_policy(&[0.3, -0.2, 1.1], 0.7);
        let shifted = surrogate_policy(&[0.3 + 9.0, -0.2 + 9.0, 1.1 + 9.0], 0.7);
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn underflow_is_rescued_and_counted() {
        // widely separated advantages at τ=0.1: π(a=1) = softmax gap e^{-10000} → 0
        let head = crafted(HeadVariant::Casa, &[0.0, -1000.0], 0.0, 0.1);
        assert_eq!(head.head_forward(0).unwrap().pi[1], 0.0);
        assert_eq!(head.underflow_warning_count(), 0);
        let g = head.grad_log_pi(0, 1).unwrap();
        assert_eq!(head.underflow_warning_count(), 1);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn variant_serde_tags_are_snake_case() {
        assert_eq!(serde_json::to_string(&HeadVariant::Casa).unwrap(), "\"casa\"");
        assert_eq!(
            serde_json::to_string(&HeadVariant::PlainLogit).unwrap(),
            "\"plain_logit\""
        );
        let v: HeadVariant = serde_json::from_str("\"type4\"").unwrap();
        assert_eq!(v, HeadVariant::Type4);
    }
}
