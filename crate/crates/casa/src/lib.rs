//! CASA: a shared-gradient actor-critic head with off-policy return estimation
//! and gradient-consistency diagnostics, verified at desk scale.
//!
//! The library is organized around one structural idea: if the policy is a
//! temperature softmax of the advantage head, π = softmax(A/τ), and the
//! state-action value is the recentered advantage plus a detached baseline,
//! Q = A − sg(π)·A + sg(V), then the gradients of policy evaluation and policy
//! improvement share a single path, ∇Q = (1 − π)∇A = τ∇log π. Everything here
//! either realizes that head ([`casa_head`]), feeds it off-policy targets
//! ([`traces`], [`mdp`]), trains it ([`gpi`], [`harness`]), or measures the
//! alignment it promises ([`diagnostics`]).
//!
//! All numerics are `f64`. Tabular MDPs are solved exactly (LU), estimator
//! expectations are verified against exact operators, and every
//! gradient-producing operation is checked against central finite differences.

pub mod autodiff;
pub mod casa_head;
pub mod diagnostics;
pub mod gpi;
pub mod harness;
pub mod mdp;
pub mod traces;
