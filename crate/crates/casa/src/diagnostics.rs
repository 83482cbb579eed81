//! Gradient-alignment diagnostics: χ, cos β, and the training log.
//!
//! Two alignment summaries with deliberately different averaging order:
//!
//!   χ     = mean_i cos(∇Q(s_i,a_i), ∇log π(a_i|s_i))   — cosine, then average
//!   cos β = cos(mean_i ∇L_Q-term_i, mean_i ∇𝒥-term_i)  — average, then cosine
//!
//! For the shared-gradient head every per-sample pair is collinear, so χ = 1
//! identically while cos β still moves with the residual weights; the gap
//! between the two is itself a diagnostic. All cosines are guarded: norms
//! below 1e-8 are floored and counted, never divided by.
//!
//! Alignment numbers only make sense if they are computed correctly, so χ has
//! a second, independently coded evaluation path (`compute_chi_reference`)
//! that normalizes before the dot product; the two must agree to 1e-12.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casa_head::{CasaHead, HeadError};
use crate::gpi::{self, GpiError, LossBatch};

/// Norms below this are floored in cosine denominators (and counted).
pub const COSINE_GUARD: f64 = 1e-8;
/// Default logging period for training loops, in update steps.
pub const DEFAULT_LOG_PERIOD: usize = 100;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("vectors have different lengths ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("independent evaluation paths disagree: {primary} vs {reference}")]
    CrossCheck { primary: f64, reference: f64 },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Gpi(#[from] GpiError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiagError>;

// ── Guarded cosine ──

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine of the angle between `x` and `y` with floored denominators:
/// x·y / (max(‖x‖, 1e-8) · max(‖y‖, 1e-8)). Returns the value and the number
/// of norms that hit the floor (0, 1, or 2); a zero vector yields 0.0.
pub fn guarded_cosine(x: &[f64], y: &[f64]) -> Result<(f64, u64)> {
    if x.len() != y.len() {
        return Err(DiagError::Dimension(x.len(), y.len()));
    }
    let (nx, ny) = (l2(x), l2(y));
    let mut hits = 0;
    if nx < COSINE_GUARD {
        hits += 1;
    }
    if ny < COSINE_GUARD {
        hits += 1;
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx.max(COSINE_GUARD) * ny.max(COSINE_GUARD)), hits))
}

/// Independent second path: normalize each vector (with the same floor),
/// then dot the unit vectors. Different rounding order from
/// [`guarded_cosine`] on purpose.
pub fn guarded_cosine_reference(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(DiagError::Dimension(x.len(), y.len()));
    }
    let (nx, ny) = (l2(x).max(COSINE_GUARD), l2(y).max(COSINE_GUARD));
    Ok(x.iter().zip(y).map(|(a, b)| (a / nx) * (b / ny)).sum())
}

// ── χ and cos β ──

/// Per-sample cosines cos(∇Q(s_i,a_i), ∇log π(a_i|s_i)); χ is their mean.
/// Returns the cosines and accumulated guard hits.
pub fn per_sample_cosines(head: &CasaHead, batch: &LossBatch) -> Result<(Vec<f64>, u64)> {
    let mut cosines = Vec::with_capacity(batch.len());
    let mut hits = 0;
    for i in 0..batch.len() {
        let (s, a) = (batch.states[i], batch.actions[i]);
        let gq = head.grad_q(s, a)?;
        let glp = head.grad_log_pi(s, a)?;
        let (c, h) = guarded_cosine(&gq, &glp)?;
        cosines.push(c);
        hits += h;
    }
    Ok((cosines, hits))
}

/// χ: cosine-then-average over the batch.
pub fn compute_chi(head: &CasaHead, batch: &LossBatch) -> Result<(f64, u64)> {
    let (cosines, hits) = per_sample_cosines(head, batch)?;
    Ok((cosines.iter().sum::<f64>() / cosines.len() as f64, hits))
}

/// χ via the independent cosine path; must match [`compute_chi`] to 1e-12.
pub fn compute_chi_reference(head: &CasaHead, batch: &LossBatch) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..batch.len() {
        let (s, a) = (batch.states[i], batch.actions[i]);
        acc += guarded_cosine_reference(&head.grad_q(s, a)?, &head.grad_log_pi(s, a)?)?;
    }
    Ok(acc / batch.len() as f64)
}

/// cos β: average-then-cosine between the batch-mean evaluation and
/// improvement gradients, ∇L_Q and ∇𝒥.
pub fn compute_cos_beta(head: &CasaHead, batch: &LossBatch, tau: f64) -> Result<(f64, u64)> {
    let glq = gpi::grad_q_loss(head, batch)?;
    let gj = gpi::grad_policy_objective(head, batch, tau, true)?;
    Ok(guarded_cosine(&glq, &gj)?)
}

/// One row of alignment diagnostics for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleReport {
    /// Cosine-then-average alignment of per-sample (∇Q, ∇log π).
    pub chi: f64,
    /// Average-then-cosine alignment of batch-mean (∇L_Q, ∇𝒥).
    pub cos_beta: f64,
    /// Alignment of batch-mean (∇L_V, ∇𝒥).
    pub cos_lv_j: f64,
    /// Alignment of batch-mean (∇L_V, ∇L_Q).
    pub cos_lv_lq: f64,
    pub batch_size: usize,
    /// Cosine-denominator floor activations across all angles above.
    pub guard_hits: u64,
}

/// Assemble the full angle panel for a batch. Cross-checks χ against its
/// independent evaluation path (1e-12) and never touches head parameters.
pub fn angle_panel(head: &CasaHead, batch: &LossBatch, tau: f64) -> Result<AngleReport> {
    let (chi, mut hits) = compute_chi(head, batch)?;
    let chi_ref = compute_chi_reference(head, batch)?;
    if (chi - chi_ref).abs() > 1e-12 {
        return Err(DiagError::CrossCheck { primary: chi, reference: chi_ref });
    }
    let (cos_beta, h) = compute_cos_beta(head, batch, tau)?;
    hits += h;
    let glv = gpi::grad_v_loss(head, batch)?;
    let gj = gpi::grad_policy_objective(head, batch, tau, true)?;
    let glq = gpi::grad_q_loss(head, batch)?;
    let (cos_lv_j, h) = guarded_cosine(&glv, &gj)?;
    hits += h;
    let (cos_lv_lq, h) = guarded_cosine(&glv, &glq)?;
    hits += h;
    Ok(AngleReport {
        chi,
        cos_beta,
        cos_lv_j,
        cos_lv_lq,
        batch_size: batch.len(),
        guard_hits: hits,
    })
}

// ── Training log (CSV) ──

/// One logged training step. Column names and order are the on-disk contract:
/// `step,return,chi,cos_beta,cos_Lv_J,cos_Lv_Lq,entropy_pi,guard_hits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub chi: f64,
    pub cos_beta: f64,
    #[serde(rename = "cos_Lv_J")]
    pub cos_lv_j: f64,
    #[serde(rename = "cos_Lv_Lq")]
    pub cos_lv_lq: f64,
    pub entropy_pi: f64,
    pub guard_hits: u64,
}

/// CSV logger; writes the header on creation and flushes after every row so
/// an aborted run still leaves a readable file.
pub struct DiagnosticsLogger {
    writer: csv::Writer<File>,
}

impl DiagnosticsLogger {
    pub fn create<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record([
            "step",
            "return",
            "chi",
            "cos_beta",
            "cos_Lv_J",
            "cos_Lv_Lq",
            "entropy_pi",
            "guard_hits",
        ])?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn log(
        &mut self,
        step: usize,
        episode_return: f64,
        report: &AngleReport,
        entropy_pi: f64,
    ) -> Result<()> {
        self.write_row(&LogRow {
            step,
            episode_return,
            chi: report.chi,
            cos_beta: report.cos_beta,
            cos_lv_j: report.cos_lv_j,
            cos_lv_lq: report.cos_lv_lq,
            entropy_pi,
            guard_hits: report.guard_hits,
        })
    }

    pub fn write_row(&mut self, row: &LogRow) -> Result<()> {
        self.writer.write_record([
            row.step.to_string(),
            fmt_f64(row.episode_return),
            fmt_f64(row.chi),
            fmt_f64(row.cos_beta),
            fmt_f64(row.cos_lv_j),
            fmt_f64(row.cos_lv_lq),
            fmt_f64(row.entropy_pi),
            row.guard_hits.to_string(),
        ])?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Shortest decimal that round-trips the exact f64 (via Ryū), so identical
/// runs produce byte-identical logs.
fn fmt_f64(x: f64) -> String {
    let mut buf = ryu::Buffer::new();
    buf.format(x).to_string()
}

/// Parse a training log written by [`DiagnosticsLogger`].
pub fn read_log<P: AsRef<Path>>(path: P) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record?);
    }
    Ok(rows)
}
