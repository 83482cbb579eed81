//! Sampled off-policy return targets against their exact operator values.
//!
//! Trajectories are drawn under a behavior policy μ, targets are computed for
//! a different policy π with clipped importance ratios (ρ̄ = c̄ = 1.05), and
//! the Monte-Carlo means are compared with the closed-form expectation of one
//! operator application at the start state:
//!
//! * v-form targets average to 𝒮(V)(s₀) (state-value operator);
//! * q-form targets, conditioned on the first action, average to 𝒯(Q)(s₀,a₀).
//!
//! Agreement is within a few standard errors at 20 000 trajectories for all
//! three estimator families.
//!
//! Run with `cargo run --example trace_targets`.

use casa::mdp::{sample_trajectories_from, TabularMdp, TabularPolicy};
use casa::traces::{
    dr_trace_targets, exact_operator_s, exact_operator_t, exact_retrace_operator,
    exact_vtrace_operator, retrace_targets, v_trace_targets, TraceFamily, TraceSpec, ValuePair,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Four states in a short corridor; state 3 is absorbing. Every action
    // carries decent odds of advancing, so episodes finish in a handful of
    // steps and the horizon-30 truncation is far below sampling noise.
    #[rustfmt::skip]
    let p = vec![
        // s0: a0 → mostly forward, a1 → dawdle
        0.2, 0.8, 0.0, 0.0,   0.5, 0.3, 0.2, 0.0,
        // s1
        0.0, 0.1, 0.9, 0.0,   0.3, 0.2, 0.5, 0.0,
        // s2: both actions reach the end often
        0.0, 0.0, 0.3, 0.7,   0.1, 0.0, 0.4, 0.5,
        // s3: absorbing
        0.0, 0.0, 0.0, 1.0,   0.0, 0.0, 0.0, 1.0,
    ];
    let r = vec![0.1, -0.4, 0.5, 0.2, 1.0, 0.3, 0.0, 0.0];
    let mdp = TabularMdp::new(4, 2, p, r, 0.9, vec![false, false, false, true])?;

    let pi = TabularPolicy::new(4, 2, vec![0.7, 0.3, 0.2, 0.8, 0.6, 0.4, 0.5, 0.5])?;
    let mu = TabularPolicy::new(4, 2, vec![0.5; 8])?;

    // Arbitrary (not converged) starting values — the operators are linear
    // maps, so any point exercises them.
    let values = ValuePair::new(
        vec![0.3, -0.2, 0.5, 0.0],
        vec![0.4, 0.1, -0.3, 0.2, 0.6, 0.4, 0.0, 0.0],
    );

    let n_traj = 20_000;
    let batch = sample_trajectories_from(&mdp, &mu, 0, n_traj, 30, 20_240_817)?;

    println!("{n_traj} trajectories from state 0 under μ, targets for π:\n");
    println!("{:<26} {:>10} {:>10} {:>10} {:>8}", "estimator", "MC mean", "exact", "|diff|", "diff/SE");

    for family in [TraceFamily::DrTrace, TraceFamily::VTrace, TraceFamily::ReTrace] {
        let spec = TraceSpec::new(family, 1.05, 1.05, 0.9)?;
        match family {
            TraceFamily::DrTrace => {
                let t = dr_trace_targets(&batch, &values, &pi, &spec)?;
                let first_v: Vec<f64> = t.v_targets.iter().map(|row| row[0]).collect();
                report("dr v-form @ s0", &first_v, exact_operator_s(&values, &mdp, &pi, &mu, &spec)?[0]);

                // q-form is defined per (s₀, a₀): split by the first action.
                let exact_t = exact_operator_t(&values, &mdp, &pi, &mu, &spec)?;
                for a in 0..2 {
                    let group: Vec<f64> = batch
                        .trajectories
                        .iter()
                        .zip(&t.q_targets)
                        .filter(|(traj, _)| traj[0].action == a)
                        .map(|(_, row)| row[0])
                        .collect();
                    report(&format!("dr q-form @ (s0,a{a})"), &group, exact_t[a]);
                }
            }
            TraceFamily::VTrace => {
                let t = v_trace_targets(&batch, &values.v, &pi, &spec)?;
                let first_v: Vec<f64> = t.iter().map(|row| row[0]).collect();
                report("v-trace @ s0", &first_v, exact_vtrace_operator(&values.v, &mdp, &pi, &mu, &spec)?[0]);
            }
            TraceFamily::ReTrace => {
                let t = retrace_targets(&batch, &values.q, &pi, &spec)?;
                let exact_t = exact_retrace_operator(&values.q, &mdp, &pi, &mu, &spec)?;
                for a in 0..2 {
                    let group: Vec<f64> = batch
                        .trajectories
                        .iter()
                        .zip(&t)
                        .filter(|(traj, _)| traj[0].action == a)
                        .map(|(_, row)| row[0])
                        .collect();
                    report(&format!("retrace @ (s0,a{a})"), &group, exact_t[a]);
                }
            }
        }
    }
    Ok(())
}

fn report(label: &str, samples: &[f64], exact: f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    println!(
        "{:<26} {:>10.5} {:>10.5} {:>10.2e} {:>8.2}",
        label,
        mean,
        exact,
        (mean - exact).abs(),
        (mean - exact).abs() / se
    );
}
