//! The paired return operator — 𝒮 on state values, recentered 𝒯 on action
//! values — is applied repeatedly from a structured starting pair and driven
//! to its fixed point (V^π̃, Q^π̃), the exact evaluation of the clipped target
//! policy π̃ ∝ min(ρ̄μ, π).
//!
//! The iteration contracts at rate ≤ γ in sup norm; the printout tracks the
//! distance-to-fixed-point after every application and the empirical ratio
//! d_{i+1}/d_i, which hugs γ from below for every discount tried.
//!
//! Run with `cargo run --example operator_fixed_point`.

use casa::mdp::{clipped_target_policy, exact_v, TabularMdp, TabularPolicy};
use casa::traces::{apply_u, iterate_u, TraceFamily, TraceSpec, ValuePair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (ns, na) = (5, 3);

    for gamma in [0.5, 0.9, 0.99] {
        let mut rng = ChaCha8Rng::seed_from_u64(((gamma * 100.0) as u64) << 8);
        let mdp = random_mdp(ns, na, gamma, &mut rng)?;
        let pi = random_policy(ns, na, &mut rng)?;
        let mu = perturbed_policy(&pi, &mut rng)?;
        let spec = TraceSpec::new(TraceFamily::DrTrace, 1.05, 1.05, gamma)?;

        // Structured start: arbitrary V, Q flat at V per state, so
        // E_π̃[Q(s,·)] = V(s) exactly.
        let v0: Vec<f64> = (0..ns).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q0: Vec<f64> = (0..ns).flat_map(|s| std::iter::repeat(v0[s]).take(na)).collect();
        let start = ValuePair::new(v0, q0);

        let (fixed, dist) = iterate_u(&start, &mdp, &pi, &mu, &spec, 200)?;

        println!("γ = {gamma}");
        println!("  {:>4}  {:>12}  {:>8}", "iter", "‖·−fix‖∞", "ratio");
        for i in [0usize, 1, 2, 3, 5, 10, 20, 50] {
            if i + 1 < dist.len() && dist[i] > 0.0 {
                println!("  {:>4}  {:>12.3e}  {:>8.4}", i, dist[i], dist[i + 1] / dist[i]);
            }
        }
        let last = dist.last().copied().unwrap_or(f64::NAN);
        println!("  after 200 applications: {last:.3e}");

        // The limit really is a fixed point and really is the exact
        // evaluation of the clipped target policy.
        let once_more = apply_u(&fixed, &mdp, &pi, &mu, &spec)?;
        let drift = sup(&fixed.v, &once_more.v).max(sup(&fixed.q, &once_more.q));
        let pi_tilde = clipped_target_policy(&pi, &mu, spec.rho_bar)?;
        let v_exact = exact_v(&mdp, &pi_tilde)?;
        println!("  re-application drift:        {drift:.3e}");
        println!("  vs direct linear solve of π̃: {:.3e}\n", sup(&fixed.v, &v_exact));
    }
    Ok(())
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn random_mdp(
    ns: usize,
    na: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TabularMdp, Box<dyn std::error::Error>> {
    let mut p = vec![0.0; ns * na * ns];
    for row in p.chunks_mut(ns) {
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = rng.gen_range(0.05..1.0);
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    let r: Vec<f64> = (0..ns * na).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(TabularMdp::new(ns, na, p, r, gamma, vec![false; ns])?)
}

fn random_policy(
    ns: usize,
    na: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TabularPolicy, Box<dyn std::error::Error>> {
    let mut probs = vec![0.0; ns * na];
    for row in probs.chunks_mut(na) {
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = rng.gen_range(0.1..1.0);
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    Ok(TabularPolicy::new(ns, na, probs)?)
}

/// Behavior policy μ ∝ π · exp(U[−0.3, 0.3]) — close enough to π that the
/// clipping thresholds ρ̄ = c̄ = 1.05 actually bind on some actions.
fn perturbed_policy(
    pi: &TabularPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<TabularPolicy, Box<dyn std::error::Error>> {
    let (ns, na) = (pi.n_states, pi.n_actions);
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        let mut total = 0.0;
        for a in 0..na {
            probs[s * na + a] = pi.prob(s, a) * rng.gen_range(-0.3..0.3f64).exp();
            total += probs[s * na + a];
        }
        for a in 0..na {
            probs[s * na + a] /= total;
        }
    }
    Ok(TabularPolicy::new(ns, na, probs)?)
}
