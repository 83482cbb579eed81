//! The head computes Q = A − sg(π)·A + sg(V), so every parameter that moves
//! Q also moves log π, and by the same direction up to the scalar τ:
//!
//!     ∇Q(s,a) = (1 − π(a|s)) ∇A(s,a) = τ ∇log π(a|s)
//!
//! This example prints the identity residual coordinate-wise for a freshly
//! initialized head, together with the zero-sum property of the score
//! Σ_a π(a|s) ∇log π(a|s) = 0 that makes the two sides line up.
//!
//! Run with `cargo run --example shared_gradient`.

use casa::casa_head::{CasaHead, HeadVariant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tau = 0.25;
    let head = CasaHead::new(HeadVariant::Casa, 6, 4, tau, 42)?;

    println!("variant Casa, 6 states x 4 actions, tau = {tau}\n");
    println!("{:>5} {:>6} {:>12} {:>12} {:>12}", "state", "action", "‖∇Q‖₂", "‖τ∇logπ‖₂", "max|diff|");

    let mut worst = 0.0f64;
    for s in 0..head.n_states {
        for a in 0..head.n_actions {
            let gq = head.grad_q(s, a)?;
            let glp = head.grad_log_pi(s, a)?;
            let nq = l2(&gq);
            let nlp = tau * l2(&glp);
            let diff = gq
                .iter()
                .zip(&glp)
                .map(|(q, l)| (q - tau * l).abs())
                .fold(0.0f64, f64::max);
            worst = worst.max(diff);
            if a == 0 {
                println!("{s:>5} {a:>6} {nq:>12.6} {nlp:>12.6} {diff:>12.3e}");
            }
        }
    }
    println!("\nworst |∇Q − τ∇log π| over all 24 pairs: {worst:.3e}");

    // The score function is zero-mean under π: Σ_a π(a) ∇log π(a) = 0.
    // Consequently Σ_a π(a) ∇Q(s,a) = 0 as well — the head cannot raise all
    // action values at once; it can only redistribute preference.
    let s = 0;
    let out = head.head_forward(s)?;
    let mut mix = vec![0.0; gq_len(&head)];
    for a in 0..head.n_actions {
        let gq = head.grad_q(s, a)?;
        for (m, g) in mix.iter_mut().zip(&gq) {
            *m += out.pi[a] * g;
        }
    }
    println!("‖Σ_a π(a)∇Q(0,a)‖∞ = {:.3e} (exactly the zero-sum score property)", linf(&mix));
    Ok(())
}

fn gq_len(head: &CasaHead) -> usize {
    head.params.total_len()
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn linf(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}
