//! Scoring, ranking metrics, and the two cross-domain evaluation protocols.
//!
//! Evaluation is frame-level: every sample is scored independently as the
//! softmax probability of the live class, with no test-time augmentation.
//! AUC is the Mann-Whitney statistic (ties count one half). HTER picks the
//! threshold on the evaluated set that minimises `(FAR + FRR) / 2` over all
//! decision boundaries — midpoints between adjacent distinct scores plus
//! accept-everything / reject-everything sentinels — breaking ties toward
//! the smallest threshold. A sample is accepted as live when its score is
//! greater than or equal to the threshold.
//!
//! The leave-one-out protocol trains on all domains but one and tests on
//! the held-out one, repeated for every choice; the limited-source protocol
//! fixes two training domains and evaluates each listed target. Folds are
//! independent and can run in parallel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{DomainDataset, Liveness};
use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;
use crate::model::{class_probabilities, classify, DecoderConfig, EncoderConfig, ModelParams};
use crate::trainer::{finetune, pretrain, FinetuneConfig, ScheduleConfig};

/// Per-sample live probabilities with their ground-truth labels.
#[derive(Clone, Debug)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<Liveness>,
}

impl ScoredSet {
    /// Probability outputs must be finite, inside [0, 1], and aligned with
    /// the labels.
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(Error::shape(
                "scored set",
                format!("{} labels", self.scores.len()),
                format!("{} labels", self.labels.len()),
            ));
        }
        for (i, &s) in self.scores.iter().enumerate() {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "score {i} is {s}; probabilities must lie in [0, 1]"
                )));
            }
        }
        Ok(())
    }

    fn class_counts(&self) -> (usize, usize) {
        let live = self.labels.iter().filter(|&&l| l == Liveness::Live).count();
        (live, self.labels.len() - live)
    }
}

/// One protocol fold's outcome.
#[derive(Clone, Debug)]
pub struct ProtocolResult {
    pub protocol: String,
    pub train_domains: Vec<String>,
    pub test_domain: String,
    /// Half total error rate, percent.
    pub hter: f64,
    /// Area under the ROC curve, percent.
    pub auc: f64,
    /// The accept-as-live decision threshold HTER was computed at.
    pub threshold: f64,
    pub seed: u64,
}

/// Score every sample of a dataset with the fine-tuned model: softmax
/// probability of the live class, deterministic, no augmentation.
pub fn score_dataset(params: &ModelParams, dataset: &DomainDataset) -> Result<ScoredSet> {
    let mut scores = Vec::with_capacity(dataset.samples.len());
    let mut labels = Vec::with_capacity(dataset.samples.len());
    for sample in &dataset.samples {
        let logits = classify(params, &sample.image)?;
        let (_, live) = class_probabilities(&logits);
        scores.push(live);
        labels.push(sample.label);
    }
    let set = ScoredSet { scores, labels };
    set.validate()?;
    Ok(set)
}

fn require_both_classes(set: &ScoredSet, metric: &str) -> Result<(usize, usize)> {
    if set.scores.len() != set.labels.len() {
        return Err(Error::shape(
            "scored set",
            format!("{} labels", set.scores.len()),
            format!("{} labels", set.labels.len()),
        ));
    }
    let (live, spoof) = set.class_counts();
    if live == 0 || spoof == 0 {
        return Err(Error::SingleClass(format!(
            "{metric} needs both classes; got {live} live and {spoof} spoof samples"
        )));
    }
    Ok((live, spoof))
}

/// Area under the ROC curve, percent: the probability that a random live
/// score exceeds a random spoof score, ties counted one half. Computed via
/// mid-ranks, so ties of any multiplicity are exact.
pub fn compute_auc(set: &ScoredSet) -> Result<f64> {
    let (n_live, n_spoof) = require_both_classes(set, "AUC")?;
    let n = set.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Average 1-based ranks within tie groups.
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }

    let rank_sum_live: f64 = (0..n)
        .filter(|&k| set.labels[k] == Liveness::Live)
        .map(|k| ranks[k])
        .sum();
    let u = rank_sum_live - (n_live * (n_live + 1)) as f64 / 2.0;
    Ok(100.0 * u / (n_live as f64 * n_spoof as f64))
}

/// Candidate decision boundaries: midpoints between adjacent distinct
/// scores, plus sentinels below and above every score (accept everything /
/// reject everything).
fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut cands = Vec::with_capacity(sorted.len() + 1);
    cands.push(sorted[0] - 1.0);
    for pair in sorted.windows(2) {
        cands.push((pair[0] + pair[1]) / 2.0);
    }
    cands.push(sorted[sorted.len() - 1] + 1.0);
    cands
}

fn far_frr(set: &ScoredSet, threshold: f64) -> (f64, f64) {
    let (n_live, n_spoof) = set.class_counts();
    let mut false_accepts = 0usize;
    let mut false_rejects = 0usize;
    for (&s, &l) in set.scores.iter().zip(set.labels.iter()) {
        match l {
            Liveness::Spoof if s >= threshold => false_accepts += 1,
            Liveness::Live if s < threshold => false_rejects += 1,
            _ => {}
        }
    }
    (
        false_accepts as f64 / n_spoof as f64,
        false_rejects as f64 / n_live as f64,
    )
}

/// Half total error rate, percent, with the threshold it was achieved at.
/// The threshold minimises `(FAR + FRR) / 2` over all candidate boundaries
/// on this same set; among equal minima the smallest threshold wins.
pub fn compute_hter(set: &ScoredSet) -> Result<(f64, f64)> {
    require_both_classes(set, "HTER")?;
    let mut best = f64::INFINITY;
    let mut best_t = f64::NAN;
    for t in threshold_candidates(&set.scores) {
        let (far, frr) = far_frr(set, t);
        let hter = (far + frr) / 2.0;
        if hter < best {
            best = hter;
            best_t = t;
        }
    }
    Ok((100.0 * best, best_t))
}

/// Everything needed to train one protocol fold from scratch.
#[derive(Clone, Debug)]
pub struct TrainRecipe {
    pub enc: EncoderConfig,
    pub dec: DecoderConfig,
    pub sched: ScheduleConfig,
    pub con: ContrastiveConfig,
    pub finetune: FinetuneConfig,
}

/// Pre-train and fine-tune on `train`, then score the held-out `test`
/// domain. Refuses a test domain whose name appears among the training
/// domains.
pub fn run_fold(
    protocol: &str,
    train: &[DomainDataset],
    test: &DomainDataset,
    recipe: &TrainRecipe,
) -> Result<ProtocolResult> {
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "fold needs at least one training domain".into(),
        ));
    }
    if train.iter().any(|d| d.domain_name == test.domain_name) {
        return Err(Error::InvalidArgument(format!(
            "test domain {:?} must not appear in the training set",
            test.domain_name
        )));
    }
    let (state, _metrics) = pretrain(train, recipe.enc, recipe.dec, &recipe.sched, &recipe.con)?;
    finish_fold(protocol, train, test, state.params, recipe)
}

/// Fine-tune and score a fold starting from `init` instead of running
/// pre-training — the "no pre-training" and "external encoder" ablation
/// rows. `init` must match the recipe's geometry.
pub fn run_fold_from(
    protocol: &str,
    train: &[DomainDataset],
    test: &DomainDataset,
    recipe: &TrainRecipe,
    init: ModelParams,
) -> Result<ProtocolResult> {
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "fold needs at least one training domain".into(),
        ));
    }
    if train.iter().any(|d| d.domain_name == test.domain_name) {
        return Err(Error::InvalidArgument(format!(
            "test domain {:?} must not appear in the training set",
            test.domain_name
        )));
    }
    if init.enc != recipe.enc {
        return Err(Error::shape(
            "fold initial parameters",
            format!("{:?}", recipe.enc),
            format!("{:?}", init.enc),
        ));
    }
    finish_fold(protocol, train, test, init, recipe)
}

fn finish_fold(
    protocol: &str,
    train: &[DomainDataset],
    test: &DomainDataset,
    params: ModelParams,
    recipe: &TrainRecipe,
) -> Result<ProtocolResult> {
    let (tuned, _ft) = finetune(params, train, &recipe.finetune)?;
    let scored = score_dataset(&tuned, test)?;
    let auc = compute_auc(&scored)?;
    let (hter, threshold) = compute_hter(&scored)?;
    Ok(ProtocolResult {
        protocol: protocol.to_string(),
        train_domains: train.iter().map(|d| d.domain_name.clone()).collect(),
        test_domain: test.domain_name.clone(),
        hter,
        auc,
        threshold,
        seed: recipe.sched.seed,
    })
}

/// Leave-one-out: hold out each domain in turn, train on the rest. Folds
/// run in parallel when `parallel` is set; results keep the input order
/// either way.
pub fn run_loo_protocol(
    domains: &[DomainDataset],
    recipe: &TrainRecipe,
    parallel: bool,
) -> Result<Vec<ProtocolResult>> {
    if domains.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-out needs at least two domains, got {}",
            domains.len()
        )));
    }
    let fold = |held_out: usize| -> Result<ProtocolResult> {
        let train: Vec<DomainDataset> = domains
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != held_out)
            .map(|(_, d)| d.clone())
            .collect();
        run_fold("loo", &train, &domains[held_out], recipe)
    };
    if parallel {
        (0..domains.len()).into_par_iter().map(fold).collect()
    } else {
        (0..domains.len()).map(fold).collect()
    }
}

/// Limited-source: train once on exactly two source domains, evaluate every
/// target. Targets must be disjoint from the sources by name.
pub fn run_limited_source(
    sources: &[DomainDataset],
    targets: &[DomainDataset],
    recipe: &TrainRecipe,
) -> Result<Vec<ProtocolResult>> {
    if sources.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "limited-source protocol trains on exactly two domains, got {}",
            sources.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument(
            "limited-source needs at least one target".into(),
        ));
    }
    // One shared training run; each target only affects its own scoring.
    let (state, _metrics) = pretrain(sources, recipe.enc, recipe.dec, &recipe.sched, &recipe.con)?;
    let (tuned, _ft) = finetune(state.params, sources, &recipe.finetune)?;
    let train_names: Vec<String> = sources.iter().map(|d| d.domain_name.clone()).collect();
    targets
        .iter()
        .map(|target| {
            if train_names.contains(&target.domain_name) {
                return Err(Error::InvalidArgument(format!(
                    "target domain {:?} overlaps the sources",
                    target.domain_name
                )));
            }
            let scored = score_dataset(&tuned, target)?;
            let auc = compute_auc(&scored)?;
            let (hter, threshold) = compute_hter(&scored)?;
            Ok(ProtocolResult {
                protocol: "limited_source".to_string(),
                train_domains: train_names.clone(),
                test_domain: target.domain_name.clone(),
                hter,
                auc,
                threshold,
                seed: recipe.sched.seed,
            })
        })
        .collect()
}

/// Write protocol results as CSV; training domains are joined with `&`.
pub fn write_results_csv(path: &Path, results: &[ProtocolResult]) -> Result<()> {
    let mut out = String::from("protocol,train_domains,test_domain,hter,auc,threshold,seed\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.protocol,
            r.train_domains.join("&"),
            r.test_domain,
            r.hter,
            r.auc,
            r.threshold,
            r.seed
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Fixed-width summary of protocol results, one row per fold.
pub fn format_summary_table(results: &[ProtocolResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<24} {:<12} {:>8} {:>8}",
        "protocol", "train", "test", "HTER(%)", "AUC(%)"
    );
    let _ = writeln!(out, "{}", "-".repeat(72));
    for r in results {
        let _ = writeln!(
            out,
            "{:<16} {:<24} {:<12} {:>8.2} {:>8.2}",
            r.protocol,
            r.train_domains.join("&"),
            r.test_domain,
            r.hter,
            r.auc
        );
    }
    out
}

/// Write the summary table next to the CSV.
pub fn write_summary_table(path: &Path, results: &[ProtocolResult]) -> Result<()> {
    fs::write(path, format_summary_table(results)).map_err(|e| Error::io(path, e))
}
