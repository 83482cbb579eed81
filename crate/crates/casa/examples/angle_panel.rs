//! χ and cos β both measure how well the value-ascent direction agrees with
//! the policy-ascent direction, but they average in different orders:
//!
//!     χ     = mean_i cos(∇Q_i, ∇log π_i)      cosine first, then average
//!     cos β = cos(mean_i ∇L_Q,i, mean_i ∇𝒥_i)  average first, then cosine
//!
//! For the shared-gradient head χ = 1 identically — it is a property of the
//! architecture, not of the batch. cos β instead depends on the residuals
//! weighting each sample, and an adversarial batch can drive it to −1 while
//! χ stays pinned at 1. This example builds exactly that batch, then shows a
//! benign random batch where the two agree in sign.
//!
//! Run with `cargo run --example angle_panel`.

use casa::casa_head::{CasaHead, HeadVariant};
use casa::diagnostics::angle_panel;
use casa::gpi::LossBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let head = CasaHead::new(HeadVariant::Casa, 3, 4, 0.5, 9)?;
    let out = head.head_forward(0)?;
    let abar: Vec<f64> = out.q.iter().map(|q| q - out.v).collect();

    // Pick the most disadvantaged and most advantaged action in state 0 and
    // hand each a target halfway back toward the baseline: the Q-residuals
    // (q̃ − Q) = −Ā/2 and the policy residuals (q̃ − V) = +Ā/2 are then exact
    // opposites, sample by sample.
    let lo = argmin(&abar);
    let hi = argmax(&abar);
    let batch = LossBatch::new(
        vec![0, 0],
        vec![lo, hi],
        vec![0.0, 0.0],
        vec![out.q[lo] - abar[lo] / 2.0, out.q[hi] - abar[hi] / 2.0],
        vec![1.0, 1.0],
    )?;
    let report = angle_panel(&head, &batch, head.tau)?;
    println!("adversarial two-sample batch:");
    println!("  χ       = {:+.9}", report.chi);
    println!("  cos β   = {:+.9}", report.cos_beta);
    println!("  (alignment per sample is perfect, yet the batch means oppose)\n");

    // A benign batch: random state/action visits, targets = Q + noise. The
    // residuals no longer conspire, and both angles sit near +1.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut v_targets = Vec::new();
    let mut q_targets = Vec::new();
    for _ in 0..64 {
        let s = rng.gen_range(0..head.n_states);
        let a = rng.gen_range(0..head.n_actions);
        let o = head.head_forward(s)?;
        states.push(s);
        actions.push(a);
        v_targets.push(o.v + 0.1 * rng.gen_range(-1.0..1.0));
        q_targets.push(o.q[a] + 1.0 + 0.1 * rng.gen_range(-1.0..1.0));
    }
    let n = states.len();
    let batch = LossBatch::new(states, actions, v_targets, q_targets, vec![1.0; n])?;
    let report = angle_panel(&head, &batch, head.tau)?;
    println!("benign random batch ({} samples):", report.batch_size);
    println!("  χ          = {:+.9}", report.chi);
    println!("  cos β      = {:+.9}", report.cos_beta);
    println!("  cos(∇L_V,∇𝒥)  = {:+.6}", report.cos_lv_j);
    println!("  cos(∇L_V,∇L_Q) = {:+.6}", report.cos_lv_lq);
    println!("  guard hits = {}", report.guard_hits);
    Ok(())
}

fn argmin(x: &[f64]) -> usize {
    (0..x.len()).min_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap()
}

fn argmax(x: &[f64]) -> usize {
    (0..x.len()).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap()
}
