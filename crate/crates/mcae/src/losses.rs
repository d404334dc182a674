//! Training losses: masked patch reconstruction and a domain-weighted
//! supervised contrastive term.
//!
//! The reconstruction loss averages per-pixel squared error over masked
//! tokens only, normalised by the *total* token count, so its gradient at
//! visible positions is exactly zero.
//!
//! The contrastive loss treats each sample as an anchor and every other
//! sample with the same label as a positive. A positive pair's similarity
//! is weighted before the log-softmax: live pairs from different domains
//! get `lambda_live_cross` (pulling live faces together across capture
//! conditions), live pairs from the same domain get `lambda_live_same`,
//! and spoof pairs get `lambda_spoof`. Only opposite-label samples appear
//! in the denominator as negatives. The loss is the mean over counted
//! anchor-positive pairs; a batch with no counted pairs contributes zero.

use crate::autodiff::{NodeId, Tape};
use crate::data::Liveness;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::MaskPlan;

/// Configuration for the weighted supervised contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    /// Softmax temperature applied to cosine similarities.
    pub temperature: f64,
    /// Weight for live positive pairs drawn from different domains.
    pub lambda_live_cross: f64,
    /// Weight for live positive pairs drawn from the same domain.
    pub lambda_live_same: f64,
    /// Weight for spoof positive pairs.
    pub lambda_spoof: f64,
    /// When false, spoof anchors contribute no positive pairs (spoof
    /// samples still serve as negatives for live anchors).
    pub include_spoof_positives: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.1,
            lambda_live_cross: 2.0,
            lambda_live_same: 1.0,
            lambda_spoof: 1.0,
            include_spoof_positives: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "contrastive temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, v) in [
            ("lambda_live_cross", self.lambda_live_cross),
            ("lambda_live_same", self.lambda_live_same),
            ("lambda_spoof", self.lambda_spoof),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Weight applied to a positive pair's similarity, given the shared label
/// and the two samples' domains.
pub fn positive_pair_weight(
    cfg: &ContrastiveConfig,
    label: Liveness,
    domain_a: u32,
    domain_b: u32,
) -> f64 {
    match label {
        Liveness::Live if domain_a != domain_b => cfg.lambda_live_cross,
        Liveness::Live => cfg.lambda_live_same,
        Liveness::Spoof => cfg.lambda_spoof,
    }
}

/// Per-step loss values as plain numbers, for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub reconstruction: f64,
    /// `None` while the contrastive stage is inactive.
    pub contrastive: Option<f64>,
    pub total: f64,
}

/// Masked reconstruction loss on the tape:
/// `(1/n) * sum over masked tokens of the per-token mean squared error`.
///
/// `pred` must be the full `n x token_dim` prediction; `target` the ground
/// truth tokens. The returned scalar's gradient with respect to `pred` is
/// `2/(n*d) * (pred - target)` at masked positions and exactly zero at
/// visible ones. An empty mask yields a constant zero.
pub fn reconstruction_loss_on_tape(
    tape: &mut Tape,
    pred: NodeId,
    target: &Tensor,
    plan: &MaskPlan,
) -> Result<NodeId> {
    let (n, d) = tape.value(pred).shape();
    if target.shape() != (n, d) {
        return Err(Error::shape(
            "reconstruction target",
            format!("{n}x{d}"),
            format!("{}x{}", target.rows(), target.cols()),
        ));
    }
    if plan.n != n {
        return Err(Error::shape(
            "reconstruction mask plan",
            format!("{n} tokens"),
            format!("{} tokens", plan.n),
        ));
    }
    let tgt = tape.input(target.clone());
    let diff = tape.sub(pred, tgt);
    let sq = tape.mul(diff, diff);
    let mut weights = Tensor::zeros(n, d);
    let w = 1.0 / (n as f64 * d as f64);
    for &i in &plan.masked_idx {
        for v in weights.row_mut(i) {
            *v = w;
        }
    }
    Ok(tape.weighted_sum_all(sq, weights))
}

/// Plain-number masked reconstruction loss; used for scoring outside
/// training.
pub fn reconstruction_loss(pred: &Tensor, target: &Tensor, plan: &MaskPlan) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.input(pred.clone());
    let loss = reconstruction_loss_on_tape(&mut tape, p, target, plan)?;
    Ok(tape.value(loss).scalar())
}

/// Pairwise cosine similarity matrix of the rows of `features`.
pub fn cosine_similarity_matrix(features: &Tensor) -> Result<Tensor> {
    let n = features.rows();
    let mut norms = Vec::with_capacity(n);
    for r in 0..n {
        let row = features.row(r);
        let nrm = crate::tensor::dot(row, row).sqrt();
        if nrm <= 1e-300 {
            return Err(Error::InvalidArgument(format!(
                "cosine similarity: row {r} has zero norm"
            )));
        }
        norms.push(nrm);
    }
    Ok(Tensor::from_fn(n, n, |i, j| {
        crate::tensor::dot(features.row(i), features.row(j)) / (norms[i] * norms[j])
    }))
}

/// How far a row norm may deviate from 1 before the contrastive loss
/// rejects its input.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

fn validate_contrastive_inputs(
    features: &Tensor,
    labels: &[Liveness],
    domains: &[u32],
) -> Result<()> {
    let n = features.rows();
    if labels.len() != n || domains.len() != n {
        return Err(Error::shape(
            "contrastive labels/domains",
            format!("{n} rows"),
            format!("{} labels, {} domains", labels.len(), domains.len()),
        ));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least two samples, got {n}"
        )));
    }
    for r in 0..n {
        let row = features.row(r);
        let nrm = crate::tensor::dot(row, row).sqrt();
        if (nrm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "contrastive features must be unit-norm; row {r} has norm {nrm}"
            )));
        }
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleClass(format!(
            "contrastive batch contains only {:?} samples; both classes are required",
            labels[0]
        )));
    }
    Ok(())
}

/// Weighted supervised contrastive loss over unit-norm feature rows.
///
/// For each counted anchor-positive pair `(i, j)` the per-pair term is
/// `-ln( w * exp(s_ij / t) / (w * exp(s_ij / t) + sum over negatives k of
/// exp(s_ik / t)) )` where `w` is the pair weight and negatives are the
/// samples whose label differs from the anchor's. The loss is the mean over
/// counted pairs, or a constant zero when no pair is counted.
///
/// Errors if rows are not unit-norm (within [`UNIT_NORM_TOLERANCE`]), if
/// fewer than two samples or only one class is present, or on length
/// mismatches.
pub fn supcon_loss_on_tape(
    tape: &mut Tape,
    features: NodeId,
    labels: &[Liveness],
    domains: &[u32],
    cfg: &ContrastiveConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let feats = tape.value(features).clone();
    validate_contrastive_inputs(&feats, labels, domains)?;
    let n = feats.rows();

    // Counted anchor-positive pairs and the weight for each; negatives mask.
    let mut lambda_full = Tensor::full(n, n, 1.0); // 1 off the counted set keeps ln() finite
    let mut counted = Tensor::zeros(n, n);
    let mut neg_mask = Tensor::zeros(n, n);
    let mut n_pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                let counts = labels[i] == Liveness::Live || cfg.include_spoof_positives;
                if counts {
                    lambda_full.set(
                        i,
                        j,
                        positive_pair_weight(cfg, labels[i], domains[i], domains[j]),
                    );
                    counted.set(i, j, 1.0);
                    n_pairs += 1;
                }
            } else {
                neg_mask.set(i, j, 1.0);
            }
        }
    }
    if n_pairs == 0 {
        // No anchor has a counted positive: the loss is identically zero and
        // contributes no gradient.
        return Ok(tape.input(Tensor::zeros(1, 1)));
    }

    let sims = tape.matmul_nt(features, features);
    let scaled = tape.scale(sims, 1.0 / cfg.temperature);
    let e = tape.exp(scaled);
    // Weighted positive term per cell (cells off the counted set carry
    // weight 1; they stay positive so the logs below are well-defined, and
    // the final averaging mask zeroes them out).
    let weighted = tape.mul_const(e, lambda_full);
    // Per-anchor negative mass, broadcast down each row.
    let neg_sum = tape.row_sum_weighted(e, neg_mask);
    let denom = tape.add_col(weighted, neg_sum);
    let log_num = tape.ln(weighted);
    let log_den = tape.ln(denom);
    let per_pair = tape.sub(log_den, log_num);
    let avg = counted.scale(1.0 / n_pairs as f64);
    Ok(tape.weighted_sum_all(per_pair, avg))
}

/// Plain-number contrastive loss over already-normalised features.
pub fn supcon_loss(
    features: &Tensor,
    labels: &[Liveness],
    domains: &[u32],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.input(features.clone());
    let loss = supcon_loss_on_tape(&mut tape, f, labels, domains, cfg)?;
    Ok(tape.value(loss).scalar())
}

/// `reconstruction + beta * contrastive` on the tape.
pub fn combine_on_tape(tape: &mut Tape, rec: NodeId, con: Option<NodeId>, beta: f64) -> NodeId {
    match con {
        Some(c) if beta != 0.0 => {
            let scaled = tape.scale(c, beta);
            tape.add(rec, scaled)
        }
        _ => rec,
    }
}
