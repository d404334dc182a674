//! Two-stage pre-training, supervised fine-tuning, the optimizer, and
//! checkpointing.
//!
//! Pre-training runs masked reconstruction from the start and adds the
//! weighted contrastive term once a gate fires. The gate watches an
//! exponential running average of the reconstruction loss and/or the epoch
//! counter, and once it fires it stays fired. With `beta = 0` the
//! contrastive value is still computed and logged, but on plain tensors off
//! the gradient tape, so the optimizer sees a computation graph identical to
//! a run whose gate never fires — the two weight trajectories match bit for
//! bit.
//!
//! Fine-tuning replaces the objective with a 2-way cross-entropy on full
//! (unmasked) forward passes, with random resized crops as augmentation,
//! optionally updating only the classifier head.
//!
//! Checkpoints are directories: a `manifest.txt` of `key=value` pairs
//! (geometry plus training state), an `index.txt` listing tensor shapes, and
//! one little-endian `f32` binary per tensor under `tensors/`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Read as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::data::{make_batches, DomainDataset, LabeledBatch};
use crate::error::{Error, Result};
use crate::losses::{
    combine_on_tape, reconstruction_loss_on_tape, supcon_loss, supcon_loss_on_tape,
    ContrastiveConfig, LossReport,
};
use crate::model::{
    aggregate, aggregate_on_tape, classify_on_tape, decode_on_tape, encode_on_tape, init_params,
    is_decoder_param, is_encoder_param, is_head_param, register_params, DecoderConfig,
    EncoderConfig, ModelParams, ParamStore,
};
use crate::tensor::Tensor;
use crate::tokenizer::{patchify, sample_mask};

/// What triggers the switch from reconstruction-only training to the
/// combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Switch when the running reconstruction loss drops below epsilon.
    LossThreshold,
    /// Switch at a fixed epoch.
    Epoch,
    /// Whichever of the two fires first.
    Either,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::LossThreshold => "loss_threshold",
            GateMode::Epoch => "epoch",
            GateMode::Either => "either",
        })
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss_threshold" => Ok(GateMode::LossThreshold),
            "epoch" => Ok(GateMode::Epoch),
            "either" => Ok(GateMode::Either),
            other => Err(Error::Config(format!(
                "unknown gate mode {other:?}; expected loss_threshold, epoch, or either"
            ))),
        }
    }
}

/// Which objective is currently being optimised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    RecOnly,
    RecPlusCon,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::RecOnly => "rec_only",
            Stage::RecPlusCon => "rec_plus_con",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rec_only" => Ok(Stage::RecOnly),
            "rec_plus_con" => Ok(Stage::RecPlusCon),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Pre-training hyperparameters and the stage-switch rule.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of tokens hidden from the encoder each step.
    pub mask_ratio: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Weight of the contrastive term once the gate has fired.
    pub beta: f64,
    /// Running-reconstruction-loss threshold for the gate.
    pub epsilon: f64,
    /// Epoch trigger for the gate; `None` disables the epoch trigger
    /// (allowed outside `epoch` mode).
    pub switch_epoch: Option<usize>,
    pub gate_mode: GateMode,
    /// Decay of the exponential running average of the reconstruction loss.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let epochs = 100;
        ScheduleConfig {
            epochs,
            batch_size: 8,
            mask_ratio: 0.85,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 5,
            beta: 1.0,
            epsilon: 0.01,
            switch_epoch: Some(epochs / 2),
            gate_mode: GateMode::Either,
            ema_decay: 0.99,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.beta < 0.0 || self.epsilon < 0.0 {
            return Err(Error::Config(
                "weight_decay, beta, and epsilon must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        match (self.gate_mode, self.switch_epoch) {
            (GateMode::Epoch, None) => {
                return Err(Error::Config(
                    "gate_mode=epoch requires switch_epoch".into(),
                ));
            }
            (GateMode::Epoch | GateMode::Either, Some(se)) if se >= self.epochs => {
                return Err(Error::Config(format!(
                    "switch_epoch {se} must be smaller than epochs {}",
                    self.epochs
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Fine-tuning hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Update only the classifier head, leaving the encoder frozen.
    pub head_only: bool,
    /// Area range of the random resized crop augmentation.
    pub crop_scale: (f64, f64),
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 2,
            head_only: false,
            crop_scale: (0.8, 1.0),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "finetune epochs and batch_size must be at least 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "finetune learning_rate must be positive and weight_decay non-negative".into(),
            ));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer and learning-rate schedule
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer with decoupled weight decay. Decay is applied
/// only to genuine matrices; vectors (biases, norm gains, the mask token)
/// are exempt.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            if !store.is_trainable(&name) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            let p = store.get_mut(&name).expect("name came from the store");
            debug_assert_eq!(g.shape(), p.shape(), "gradient shape for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let decay = if p.rows() > 1 && p.cols() > 1 {
                self.weight_decay
            } else {
                0.0
            };
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data().iter())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * decay * *pv;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Learning rate at a zero-based step: linear warmup to the peak, then
/// cosine decay to zero over the remaining steps.
pub fn lr_at_step(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> f64 {
    assert!(total_steps > 0, "lr schedule needs at least one step");
    if step < warmup_steps {
        return peak * (step as f64 + 1.0) / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return peak;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

/// Everything that evolves during pre-training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: AdamW,
    pub epoch: usize,
    pub step: usize,
    pub stage: Stage,
    /// Exponential running average of the reconstruction loss; `None` until
    /// the first step has run.
    pub running_rec_loss: Option<f64>,
    /// Stream used for mask sampling.
    pub rng: ChaCha8Rng,
}

const MASK_STREAM_SALT: u64 = 0x6d61_736b;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn derive_seed(base: u64, salt: u64) -> u64 {
    base ^ salt.wrapping_add(1).wrapping_mul(GOLDEN)
}

impl TrainState {
    pub fn new(enc: EncoderConfig, dec: DecoderConfig, sched: &ScheduleConfig) -> Result<Self> {
        sched.validate()?;
        let params = init_params(enc, dec, sched.seed)?;
        Ok(TrainState {
            params,
            opt: AdamW::new(0.9, 0.95, 1e-8, sched.weight_decay),
            epoch: 0,
            step: 0,
            stage: Stage::RecOnly,
            running_rec_loss: None,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(sched.seed, MASK_STREAM_SALT)),
        })
    }
}

/// Should the combined objective be active, given the epoch and the running
/// reconstruction loss? Pure helper; monotonicity lives in `TrainState`.
pub fn contrastive_gate(sched: &ScheduleConfig, epoch: usize, running: Option<f64>) -> bool {
    let loss_fires = running.is_some_and(|r| r < sched.epsilon);
    let epoch_fires = sched.switch_epoch.is_some_and(|se| epoch >= se);
    match sched.gate_mode {
        GateMode::LossThreshold => loss_fires,
        GateMode::Epoch => epoch_fires,
        GateMode::Either => loss_fires || epoch_fires,
    }
}

/// One optimizer update on one batch. Evaluates the gate first, then runs
/// per-image masked reconstruction; in the combined stage the contrastive
/// term over per-image aggregate features joins the objective with weight
/// `beta`. With `beta = 0` the contrastive value is computed off-tape
/// (logged, but structurally absent from the gradient computation).
pub fn pretrain_step(
    state: &mut TrainState,
    sched: &ScheduleConfig,
    con_cfg: &ContrastiveConfig,
    batch: &LabeledBatch,
    lr: f64,
) -> Result<LossReport> {
    batch.validate()?;
    if state.stage == Stage::RecOnly && contrastive_gate(sched, state.epoch, state.running_rec_loss)
    {
        state.stage = Stage::RecPlusCon;
    }

    let mut tape = Tape::new();
    let binds = register_params(&mut tape, &state.params, |n| !is_head_param(n), |_| false);

    let mut rec_nodes = Vec::with_capacity(batch.images.len());
    let mut latents = Vec::with_capacity(batch.images.len());
    for image in &batch.images {
        let seq = patchify(image, state.params.enc.patch_size)?;
        let plan = sample_mask(seq.len(), sched.mask_ratio, &mut state.rng)?;
        let visible = seq.tokens.gather_rows(&plan.visible_idx);
        let trace = encode_on_tape(
            &mut tape,
            &binds,
            &state.params.enc,
            &visible,
            &plan.visible_idx,
        )?;
        let pred = decode_on_tape(
            &mut tape,
            &binds,
            &state.params.enc,
            &state.params.dec,
            trace.latent,
            &plan,
        )?;
        rec_nodes.push(reconstruction_loss_on_tape(
            &mut tape,
            pred,
            &seq.tokens,
            &plan,
        )?);
        latents.push(trace.latent);
    }
    let rec_node = tape.mean_scalars(&rec_nodes);
    let rec_val = tape.value(rec_node).scalar();

    let mut con_val = None;
    let root = if state.stage == Stage::RecPlusCon {
        if sched.beta != 0.0 {
            let feats: Vec<NodeId> = latents
                .iter()
                .map(|&l| aggregate_on_tape(&mut tape, l))
                .collect();
            let features = tape.concat_rows(&feats);
            let con =
                supcon_loss_on_tape(&mut tape, features, &batch.labels, &batch.domains, con_cfg)?;
            con_val = Some(tape.value(con).scalar());
            combine_on_tape(&mut tape, rec_node, Some(con), sched.beta)
        } else {
            let mut rows = Tensor::zeros(latents.len(), state.params.enc.embed_dim);
            for (r, &l) in latents.iter().enumerate() {
                let agg = aggregate(tape.value(l))?;
                rows.row_mut(r).copy_from_slice(agg.row(0));
            }
            con_val = Some(supcon_loss(&rows, &batch.labels, &batch.domains, con_cfg)?);
            rec_node
        }
    } else {
        rec_node
    };

    if !rec_val.is_finite() || con_val.is_some_and(|c| !c.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            rec: rec_val,
            con: con_val,
        });
    }

    let grads = tape.backward(root);
    let grad_map = binds.collect_grads(&tape, &grads);
    state.opt.step(&mut state.params.store, &grad_map, lr);

    state.running_rec_loss = Some(match state.running_rec_loss {
        None => rec_val,
        Some(prev) => sched.ema_decay * prev + (1.0 - sched.ema_decay) * rec_val,
    });
    state.step += 1;

    let total = rec_val
        + sched.beta
            * con_val.unwrap_or(0.0)
            * if state.stage == Stage::RecPlusCon {
                1.0
            } else {
                0.0
            };
    Ok(LossReport {
        reconstruction: rec_val,
        contrastive: con_val,
        total,
    })
}

/// One row of the pre-training metrics log.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub rec_loss: f64,
    /// Mean contrastive value over the steps of the epoch where the
    /// combined stage was active; `None` before the gate fires.
    pub con_loss: Option<f64>,
    pub stage: Stage,
    /// Learning rate at the final step of the epoch.
    pub lr: f64,
}

/// Run the full pre-training schedule over the merged source domains.
/// Batches are class-and-domain balanced, so every batch is a valid
/// contrastive batch. Returns the final state plus one metrics row per
/// epoch.
pub fn pretrain(
    datasets: &[DomainDataset],
    enc: EncoderConfig,
    dec: DecoderConfig,
    sched: &ScheduleConfig,
    con_cfg: &ContrastiveConfig,
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    sched.validate()?;
    con_cfg.validate()?;
    let mut state = TrainState::new(enc, dec, sched)?;
    let steps_per_epoch =
        make_batches(datasets, sched.batch_size, true, derive_seed(sched.seed, 0))?.len();
    let total_steps = steps_per_epoch * sched.epochs;
    let warmup_steps = steps_per_epoch * sched.warmup_epochs;

    let mut metrics = Vec::with_capacity(sched.epochs);
    for epoch in 0..sched.epochs {
        state.epoch = epoch;
        let batches = make_batches(
            datasets,
            sched.batch_size,
            true,
            derive_seed(sched.seed, epoch as u64),
        )?;
        let mut rec_sum = 0.0;
        let mut con_sum = 0.0;
        let mut con_steps = 0usize;
        let mut last_lr = 0.0;
        for batch in &batches {
            last_lr = lr_at_step(state.step, total_steps, warmup_steps, sched.learning_rate);
            let report = pretrain_step(&mut state, sched, con_cfg, batch, last_lr)?;
            rec_sum += report.reconstruction;
            if let Some(c) = report.contrastive {
                con_sum += c;
                con_steps += 1;
            }
        }
        metrics.push(EpochMetrics {
            epoch,
            rec_loss: rec_sum / batches.len() as f64,
            con_loss: (con_steps > 0).then(|| con_sum / con_steps as f64),
            stage: state.stage,
            lr: last_lr,
        });
    }
    Ok((state, metrics))
}

/// Write the per-epoch pre-training log as CSV. The contrastive column is
/// empty for epochs before the gate fired.
pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = String::from("epoch,rec_loss,con_loss,stage,lr\n");
    for m in metrics {
        let con = m.con_loss.map(|c| format!("{c}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.rec_loss, con, m.stage, m.lr
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

/// One row of the fine-tuning metrics log.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub ce_loss: f64,
    /// Training accuracy over the epoch's (augmented) batches.
    pub accuracy: f64,
    pub lr: f64,
}

/// Supervised fine-tuning of the classifier (and, unless `head_only`, the
/// encoder) with cross-entropy on randomly cropped full-token passes.
pub fn finetune(
    mut params: ModelParams,
    datasets: &[DomainDataset],
    cfg: &FinetuneConfig,
) -> Result<(ModelParams, Vec<FinetuneEpoch>)> {
    cfg.validate()?;
    let steps_per_epoch =
        make_batches(datasets, cfg.batch_size, false, derive_seed(cfg.seed, 0))?.len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, cfg.weight_decay);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x6372_6f70));

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            datasets,
            cfg.batch_size,
            false,
            derive_seed(cfg.seed, epoch as u64),
        )?;
        let mut ce_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut last_lr = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let binds = register_params(
                &mut tape,
                &params,
                |n| is_encoder_param(n) || is_head_param(n),
                |n| cfg.head_only && is_encoder_param(n),
            );
            let mut ce_nodes = Vec::with_capacity(batch.images.len());
            for (image, &label) in batch.images.iter().zip(batch.labels.iter()) {
                let cropped = crate::data::random_resized_crop(
                    image,
                    cfg.crop_scale,
                    params.enc.image_size,
                    &mut aug_rng,
                )?;
                let seq = patchify(&cropped, params.enc.patch_size)?;
                let trace = classify_on_tape(&mut tape, &binds, &params.enc, &seq)?;
                let logp = tape.log_softmax_rows(trace.logits);
                let mut pick = Tensor::zeros(1, 2);
                pick.set(0, label.as_index(), -1.0);
                ce_nodes.push(tape.weighted_sum_all(logp, pick));

                let logits = tape.value(trace.logits);
                let predicted = usize::from(logits.get(0, 1) > logits.get(0, 0));
                correct += usize::from(predicted == label.as_index());
                seen += 1;
            }
            let loss = tape.mean_scalars(&ce_nodes);
            let loss_val = tape.value(loss).scalar();
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    rec: loss_val,
                    con: None,
                });
            }
            last_lr = lr_at_step(step, total_steps, warmup_steps, cfg.learning_rate);
            let grads = tape.backward(loss);
            let grad_map = binds.collect_grads(&tape, &grads);
            opt.step(&mut params.store, &grad_map, last_lr);
            ce_sum += loss_val;
            step += 1;
        }
        metrics.push(FinetuneEpoch {
            epoch,
            ce_loss: ce_sum / batches.len() as f64,
            accuracy: correct as f64 / seen as f64,
            lr: last_lr,
        });
    }
    Ok((params, metrics))
}

/// Write the fine-tuning log as CSV.
pub fn write_finetune_csv(path: &Path, metrics: &[FinetuneEpoch]) -> Result<()> {
    let mut out = String::from("epoch,ce_loss,accuracy,lr\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.epoch, m.ce_loss, m.accuracy, m.lr
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Save the full training state into `dir` (created if needed).
pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    save_checkpoint_subset(dir, state, |_| true)
}

/// Save only the tensors whose names pass `keep`, alongside the full
/// manifest. Lets a fine-tuned classifier drop its reconstruction decoder:
/// loaders restore unlisted tensors at their initialization values, and
/// [`checkpoint_has_decoder`] reports which kind a directory holds.
pub fn save_checkpoint_subset(
    dir: &Path,
    state: &TrainState,
    keep: impl Fn(&str) -> bool,
) -> Result<()> {
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;

    let enc = &state.params.enc;
    let dec = &state.params.dec;
    let running = match state.running_rec_loss {
        None => "none".to_string(),
        Some(v) => format!("{:016x}", v.to_bits()),
    };
    let seed_hex: String = state
        .rng
        .get_seed()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let manifest = format!(
        "format=1\n\
         encoder.embed_dim={}\nencoder.depth={}\nencoder.heads={}\n\
         encoder.patch_size={}\nencoder.image_size={}\nencoder.mlp_ratio={}\n\
         decoder.width={}\ndecoder.depth={}\ndecoder.heads={}\n\
         state.epoch={}\nstate.step={}\nstate.stage={}\n\
         state.running_rec_loss={}\nstate.rng_seed={}\nstate.rng_word_pos={}\n",
        enc.embed_dim,
        enc.depth,
        enc.heads,
        enc.patch_size,
        enc.image_size,
        enc.mlp_ratio,
        dec.width,
        dec.depth,
        dec.heads,
        state.epoch,
        state.step,
        state.stage,
        running,
        seed_hex,
        state.rng.get_word_pos(),
    );
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;

    let mut index = String::new();
    for (name, tensor, _) in state.params.store.iter() {
        if !keep(name) {
            continue;
        }
        index.push_str(&format!("{} {} {}\n", name, tensor.rows(), tensor.cols()));
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for &v in tensor.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let tpath = tensors.join(format!("{name}.bin"));
        fs::write(&tpath, bytes).map_err(|e| Error::io(&tpath, e))?;
    }
    let ipath = dir.join("index.txt");
    fs::write(&ipath, index).map_err(|e| Error::io(&ipath, e))
}

fn read_manifest(dir: &Path) -> Result<HashMap<String, String>> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut map = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ckpt_err(dir, format!("malformed manifest line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn manifest_get<'a>(map: &'a HashMap<String, String>, dir: &Path, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| ckpt_err(dir, format!("manifest missing key {key}")))
}

fn manifest_parse<T: FromStr>(map: &HashMap<String, String>, dir: &Path, key: &str) -> Result<T> {
    let raw = manifest_get(map, dir, key)?;
    raw.parse()
        .map_err(|_| ckpt_err(dir, format!("manifest key {key} has invalid value {raw:?}")))
}

fn read_tensor_file(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let mut bytes = Vec::new();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(ckpt_err(
            path,
            format!(
                "expected {} bytes for {rows}x{cols}, found {}",
                rows * cols * 4,
                bytes.len()
            ),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Geometry recorded in a checkpoint's manifest.
pub fn checkpoint_configs(dir: &Path) -> Result<(EncoderConfig, DecoderConfig)> {
    let map = read_manifest(dir)?;
    let enc = EncoderConfig {
        embed_dim: manifest_parse(&map, dir, "encoder.embed_dim")?,
        depth: manifest_parse(&map, dir, "encoder.depth")?,
        heads: manifest_parse(&map, dir, "encoder.heads")?,
        patch_size: manifest_parse(&map, dir, "encoder.patch_size")?,
        image_size: manifest_parse(&map, dir, "encoder.image_size")?,
        mlp_ratio: manifest_parse(&map, dir, "encoder.mlp_ratio")?,
    };
    let dec = DecoderConfig {
        width: manifest_parse(&map, dir, "decoder.width")?,
        depth: manifest_parse(&map, dir, "decoder.depth")?,
        heads: manifest_parse(&map, dir, "decoder.heads")?,
    };
    enc.validate()?;
    dec.validate()?;
    Ok((enc, dec))
}

/// Load a checkpoint directory back into a training state. Optimizer
/// moments are not stored; resuming starts them fresh.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let (enc, dec) = checkpoint_configs(dir)?;
    let map = read_manifest(dir)?;

    let mut params = init_params(enc, dec, 0)?;
    load_tensors_into(dir, &mut params, |_| true)?;

    let running = match manifest_get(&map, dir, "state.running_rec_loss")? {
        "none" => None,
        hex => {
            let bits = u64::from_str_radix(hex, 16)
                .map_err(|_| ckpt_err(dir, format!("bad running_rec_loss bits {hex:?}")))?;
            Some(f64::from_bits(bits))
        }
    };
    let seed_hex = manifest_get(&map, dir, "state.rng_seed")?;
    if seed_hex.len() != 64 {
        return Err(ckpt_err(dir, "rng seed must be 32 hex bytes"));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed_hex.as_bytes().chunks_exact(2).enumerate() {
        let s = std::str::from_utf8(chunk).expect("hex input");
        seed[i] = u8::from_str_radix(s, 16)
            .map_err(|_| ckpt_err(dir, format!("bad rng seed byte {s:?}")))?;
    }
    let word_pos: u128 = manifest_parse(&map, dir, "state.rng_word_pos")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);

    Ok(TrainState {
        params,
        opt: AdamW::new(0.9, 0.95, 1e-8, 0.0),
        epoch: manifest_parse(&map, dir, "state.epoch")?,
        step: manifest_parse(&map, dir, "state.step")?,
        stage: manifest_parse(&map, dir, "state.stage")?,
        running_rec_loss: running,
        rng,
    })
}

/// Copy tensors whose names pass `filter` from a checkpoint into existing
/// parameters, validating shapes against the index.
pub fn load_tensors_into(
    dir: &Path,
    params: &mut ModelParams,
    filter: impl Fn(&str) -> bool,
) -> Result<()> {
    let ipath = dir.join("index.txt");
    let index = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let mut loaded = 0usize;
    for line in index.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(r), Some(c), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(ckpt_err(dir, format!("malformed index line {line:?}")));
        };
        let rows: usize = r
            .parse()
            .map_err(|_| ckpt_err(dir, format!("bad row count in {line:?}")))?;
        let cols: usize = c
            .parse()
            .map_err(|_| ckpt_err(dir, format!("bad column count in {line:?}")))?;
        if !filter(name) {
            continue;
        }
        let Some(target) = params.store.get_mut(name) else {
            return Err(ckpt_err(
                dir,
                format!("checkpoint tensor {name} has no slot in the model"),
            ));
        };
        if target.shape() != (rows, cols) {
            return Err(ckpt_err(
                dir,
                format!(
                    "tensor {name} is {rows}x{cols} in the checkpoint but {}x{} in the model",
                    target.shape().0,
                    target.shape().1
                ),
            ));
        }
        *target = read_tensor_file(&dir.join("tensors").join(format!("{name}.bin")), rows, cols)?;
        loaded += 1;
    }
    if loaded == 0 {
        return Err(ckpt_err(dir, "no tensors matched the requested subset"));
    }
    Ok(())
}

/// Save bare model parameters as a checkpoint with fresh bookkeeping
/// (epoch 0, no running loss). Used for fine-tuned classifiers and other
/// outputs that are weights-only, not resumable training runs.
pub fn save_params_checkpoint(
    dir: &Path,
    params: &ModelParams,
    keep: impl Fn(&str) -> bool,
) -> Result<()> {
    let state = TrainState {
        params: params.clone(),
        opt: AdamW::new(0.9, 0.999, 1e-8, 0.0),
        epoch: 0,
        step: 0,
        stage: Stage::RecOnly,
        running_rec_loss: None,
        rng: ChaCha8Rng::seed_from_u64(0),
    };
    save_checkpoint_subset(dir, &state, keep)
}

/// Whether a checkpoint directory stored any decoder tensors. Pre-training
/// checkpoints do; subset-saved classifier checkpoints do not, and cannot
/// drive reconstruction rendering.
pub fn checkpoint_has_decoder(dir: &Path) -> Result<bool> {
    let ipath = dir.join("index.txt");
    let index = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    Ok(index
        .lines()
        .any(|l| is_decoder_param(l.split_whitespace().next().unwrap_or(""))))
}

/// Load only encoder weights from a checkpoint into `params` (used to start
/// fine-tuning or ablations from pre-trained weights).
pub fn load_encoder_into(dir: &Path, params: &mut ModelParams) -> Result<()> {
    let (enc, _) = checkpoint_configs(dir)?;
    if enc != params.enc {
        return Err(ckpt_err(
            dir,
            format!(
                "checkpoint encoder geometry {enc:?} does not match the model's {:?}",
                params.enc
            ),
        ));
    }
    load_tensors_into(dir, params, is_encoder_param)
}

/// Convenience: checkpoint directories are compared by their manifest,
/// index, and raw tensor bytes (used by round-trip tests and tooling).
pub fn checkpoint_bytes(dir: &Path) -> Result<Vec<u8>> {
    let mut all = Vec::new();
    for file in ["manifest.txt", "index.txt"] {
        let p = dir.join(file);
        let mut bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        all.append(&mut bytes);
    }
    let index = fs::read_to_string(dir.join("index.txt")).map_err(|e| Error::io(dir, e))?;
    for line in index.lines() {
        if let Some(name) = line.split_whitespace().next() {
            let p = dir.join("tensors").join(format!("{name}.bin"));
            let mut bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            all.append(&mut bytes);
        }
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_domains;

    fn micro_sched(epochs: usize, seed: u64) -> ScheduleConfig {
        ScheduleConfig {
            epochs,
            batch_size: 4,
            mask_ratio: 0.5,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 1,
            beta: 1.0,
            epsilon: 0.0,
            switch_epoch: None,
            gate_mode: GateMode::Either,
            ema_decay: 0.99,
            seed,
        }
    }

    fn tiny_domains(seed: u64) -> Vec<DomainDataset> {
        // Two domains, 4 samples per class, 8x8 images for the micro model.
        make_synthetic_domains(2, 4, 8, seed).unwrap()
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let peak = 0.1;
        assert!((lr_at_step(0, 100, 10, peak) - 0.01).abs() < 1e-12);
        assert!((lr_at_step(4, 100, 10, peak) - 0.05).abs() < 1e-12);
        assert!((lr_at_step(10, 100, 10, peak) - peak).abs() < 1e-12);
        let mut last = peak;
        for s in 11..100 {
            let lr = lr_at_step(s, 100, 10, peak);
            assert!(lr < last, "cosine part must decrease");
            last = lr;
        }
        assert!(lr_at_step(99, 100, 10, peak) > 0.0);
        // Degenerate all-warmup schedule holds the peak.
        assert!((lr_at_step(5, 6, 6, peak) - peak).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_matches_hand_arithmetic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(2, 2, 1.0), true);
        store.insert("b", Tensor::full(1, 2, 1.0), true);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::full(2, 2, 0.5));
        grads.insert("b".to_string(), Tensor::full(1, 2, 0.5));

        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut store, &grads, 0.01);

        // First step: m_hat = g, v_hat = g^2, so the adaptive update is
        // lr * g / (|g| + eps) ~ lr. The matrix also decays by lr * wd.
        let adaptive = 0.01 * 0.5 / (0.5 + 1e-8);
        let w_expected = 1.0 - 0.01 * 0.1 * 1.0 - adaptive;
        let b_expected = 1.0 - adaptive; // rows == 1: no decay
        for &v in store.get("w").unwrap().data() {
            assert!((v - w_expected).abs() < 1e-12, "{v} vs {w_expected}");
        }
        for &v in store.get("b").unwrap().data() {
            assert!((v - b_expected).abs() < 1e-12, "{v} vs {b_expected}");
        }
    }

    #[test]
    fn gate_modes_fire_as_configured() {
        let mut sched = micro_sched(10, 0);
        sched.gate_mode = GateMode::LossThreshold;
        sched.epsilon = 0.1;
        assert!(!contrastive_gate(&sched, 0, None));
        assert!(!contrastive_gate(&sched, 0, Some(0.5)));
        assert!(contrastive_gate(&sched, 0, Some(0.05)));

        sched.gate_mode = GateMode::Epoch;
        sched.switch_epoch = Some(40);
        assert!(!contrastive_gate(&sched, 39, Some(0.0)));
        assert!(contrastive_gate(&sched, 40, Some(1e9)));

        sched.gate_mode = GateMode::Either;
        sched.epsilon = 0.1;
        assert!(contrastive_gate(&sched, 0, Some(0.05)));
        assert!(contrastive_gate(&sched, 40, Some(0.5)));
        assert!(!contrastive_gate(&sched, 39, Some(0.5)));

        // No epoch trigger and epsilon 0: never fires.
        sched.epsilon = 0.0;
        sched.switch_epoch = None;
        assert!(!contrastive_gate(&sched, 1000, Some(1e-300)));
    }

    #[test]
    fn schedule_validation_catches_bad_configs() {
        let mut s = micro_sched(10, 0);
        s.mask_ratio = 1.0;
        assert!(s.validate().is_err());
        let mut s = micro_sched(10, 0);
        s.gate_mode = GateMode::Epoch;
        s.switch_epoch = None;
        assert!(s.validate().is_err());
        let mut s = micro_sched(10, 0);
        s.switch_epoch = Some(10);
        assert!(
            s.validate().is_err(),
            "switch at final epoch can never matter"
        );
        assert!(micro_sched(10, 0).validate().is_ok());
    }

    #[test]
    fn pretraining_is_deterministic_in_the_seed() {
        let domains = tiny_domains(5);
        let sched = micro_sched(2, 7);
        let con = ContrastiveConfig::default();
        let enc = EncoderConfig::micro();
        let dec = DecoderConfig::micro();
        let (s1, m1) = pretrain(&domains, enc, dec, &sched, &con).unwrap();
        let (s2, m2) = pretrain(&domains, enc, dec, &sched, &con).unwrap();
        for ((n1, t1, _), (_, t2, _)) in s1.params.store.iter().zip(s2.params.store.iter()) {
            assert_eq!(t1, t2, "{n1} diverged between identical runs");
        }
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert_eq!(a.rec_loss.to_bits(), b.rec_loss.to_bits());
        }
        // A different seed must actually change the trajectory.
        let sched2 = micro_sched(2, 8);
        let (s3, _) = pretrain(&domains, enc, dec, &sched2, &con).unwrap();
        assert_ne!(
            s1.params.store.get("enc.patch_proj.w"),
            s3.params.store.get("enc.patch_proj.w")
        );
    }

    #[test]
    fn gate_fires_once_and_con_loss_appears_after_it() {
        let domains = tiny_domains(9);
        let mut sched = micro_sched(4, 3);
        sched.switch_epoch = Some(2);
        let (state, metrics) = pretrain(
            &domains,
            EncoderConfig::micro(),
            DecoderConfig::micro(),
            &sched,
            &ContrastiveConfig::default(),
        )
        .unwrap();
        assert_eq!(state.stage, Stage::RecPlusCon);
        let mut seen_con = false;
        for m in &metrics {
            if m.epoch < 2 {
                assert!(m.con_loss.is_none(), "epoch {}: early contrastive", m.epoch);
                assert_eq!(m.stage, Stage::RecOnly);
            } else {
                assert!(
                    m.con_loss.is_some(),
                    "epoch {}: missing contrastive",
                    m.epoch
                );
                assert_eq!(m.stage, Stage::RecPlusCon);
            }
            // Monotone: once contrastive values appear they never vanish.
            if seen_con {
                assert!(m.con_loss.is_some());
            }
            seen_con |= m.con_loss.is_some();
        }
    }

    #[test]
    fn beta_zero_matches_gate_disabled_run_bit_for_bit() {
        let domains = tiny_domains(2);
        let enc = EncoderConfig::micro();
        let dec = DecoderConfig::micro();
        let con = ContrastiveConfig::default();

        let mut gated = micro_sched(3, 11);
        gated.beta = 0.0;
        gated.switch_epoch = Some(1);

        let disabled = micro_sched(3, 11); // epsilon 0, no switch epoch: never fires

        let (s_gated, m_gated) = pretrain(&domains, enc, dec, &gated, &con).unwrap();
        let (s_off, m_off) = pretrain(&domains, enc, dec, &disabled, &con).unwrap();

        for ((n, t1, _), (_, t2, _)) in s_gated.params.store.iter().zip(s_off.params.store.iter()) {
            assert_eq!(t1, t2, "{n}: beta=0 trajectory diverged from gate-disabled");
        }
        // The logs still differ: the gated run reports contrastive values.
        assert!(m_gated.iter().any(|m| m.con_loss.is_some()));
        assert!(m_off.iter().all(|m| m.con_loss.is_none()));
        for (a, b) in m_gated.iter().zip(m_off.iter()) {
            assert_eq!(a.rec_loss.to_bits(), b.rec_loss.to_bits());
        }
    }

    #[test]
    fn running_loss_starts_at_first_value_then_averages() {
        let domains = tiny_domains(4);
        let sched = micro_sched(1, 13);
        let con = ContrastiveConfig::default();
        let mut state =
            TrainState::new(EncoderConfig::micro(), DecoderConfig::micro(), &sched).unwrap();
        let batches = make_batches(&domains, sched.batch_size, true, 0).unwrap();

        let r1 = pretrain_step(&mut state, &sched, &con, &batches[0], 1e-3).unwrap();
        assert_eq!(state.running_rec_loss, Some(r1.reconstruction));
        let prev = state.running_rec_loss.unwrap();
        let r2 = pretrain_step(&mut state, &sched, &con, &batches[1], 1e-3).unwrap();
        let expected = 0.99 * prev + 0.01 * r2.reconstruction;
        assert!((state.running_rec_loss.unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn short_pretraining_reduces_reconstruction_loss() {
        let domains = tiny_domains(6);
        let mut sched = micro_sched(6, 1);
        sched.learning_rate = 3e-3;
        let (_, metrics) = pretrain(
            &domains,
            EncoderConfig::micro(),
            DecoderConfig::micro(),
            &sched,
            &ContrastiveConfig::default(),
        )
        .unwrap();
        let first = metrics.first().unwrap().rec_loss;
        let last = metrics.last().unwrap().rec_loss;
        assert!(
            last < first,
            "reconstruction did not improve: {first} -> {last}"
        );
    }

    #[test]
    fn non_finite_parameters_abort_with_a_diagnostic() {
        let domains = tiny_domains(3);
        let sched = micro_sched(1, 0);
        let mut state =
            TrainState::new(EncoderConfig::micro(), DecoderConfig::micro(), &sched).unwrap();
        state
            .params
            .store
            .get_mut("enc.patch_proj.w")
            .unwrap()
            .set(0, 0, f64::NAN);
        let batches = make_batches(&domains, sched.batch_size, true, 0).unwrap();
        let err = pretrain_step(
            &mut state,
            &sched,
            &ContrastiveConfig::default(),
            &batches[0],
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn finetune_head_only_leaves_encoder_untouched() {
        let domains = tiny_domains(8);
        let params = init_params(EncoderConfig::micro(), DecoderConfig::micro(), 5).unwrap();
        let before: Vec<(String, Tensor)> = params
            .store
            .iter()
            .filter(|(n, _, _)| is_encoder_param(n))
            .map(|(n, t, _)| (n.to_string(), t.clone()))
            .collect();
        let cfg = FinetuneConfig {
            epochs: 2,
            batch_size: 4,
            warmup_epochs: 0,
            head_only: true,
            crop_scale: (1.0, 1.0),
            ..FinetuneConfig::default()
        };
        let (tuned, metrics) = finetune(params, &domains, &cfg).unwrap();
        for (name, old) in &before {
            assert_eq!(
                tuned.store.get(name).unwrap(),
                old,
                "{name} moved despite head_only"
            );
        }
        assert_eq!(metrics.len(), 2);
        // Head-only still trains the head.
        let head = tuned.store.get("head.w").unwrap();
        assert!(head.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn finetune_improves_cross_entropy_and_moves_the_encoder() {
        let domains = tiny_domains(10);
        let params = init_params(EncoderConfig::micro(), DecoderConfig::micro(), 6).unwrap();
        let enc_before = params.store.get("enc.patch_proj.w").unwrap().clone();
        let cfg = FinetuneConfig {
            epochs: 5,
            batch_size: 4,
            learning_rate: 2e-3,
            warmup_epochs: 1,
            crop_scale: (0.9, 1.0),
            ..FinetuneConfig::default()
        };
        let (tuned, metrics) = finetune(params, &domains, &cfg).unwrap();
        assert!(
            metrics.last().unwrap().ce_loss < metrics.first().unwrap().ce_loss,
            "cross-entropy did not improve"
        );
        assert_ne!(tuned.store.get("enc.patch_proj.w").unwrap(), &enc_before);
        for m in &metrics {
            assert!((0.0..=1.0).contains(&m.accuracy));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let domains = tiny_domains(12);
        let sched = micro_sched(1, 19);
        let con = ContrastiveConfig::default();
        let mut state =
            TrainState::new(EncoderConfig::micro(), DecoderConfig::micro(), &sched).unwrap();
        let batches = make_batches(&domains, sched.batch_size, true, 1).unwrap();
        pretrain_step(&mut state, &sched, &con, &batches[0], 1e-3).unwrap();

        let first = dir.path().join("a");
        save_checkpoint(&first, &state).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        assert_eq!(loaded.epoch, state.epoch);
        assert_eq!(loaded.step, state.step);
        assert_eq!(loaded.stage, state.stage);
        assert_eq!(
            loaded.running_rec_loss.unwrap().to_bits(),
            state.running_rec_loss.unwrap().to_bits()
        );
        assert_eq!(loaded.rng.get_word_pos(), state.rng.get_word_pos());

        let second = dir.path().join("b");
        save_checkpoint(&second, &loaded).unwrap();
        assert_eq!(
            checkpoint_bytes(&first).unwrap(),
            checkpoint_bytes(&second).unwrap(),
            "save -> load -> save must reproduce identical bytes"
        );
    }

    #[test]
    fn subset_save_drops_the_decoder_and_reports_it() {
        let dir = tempfile::tempdir().unwrap();
        let sched = micro_sched(1, 31);
        let state =
            TrainState::new(EncoderConfig::micro(), DecoderConfig::micro(), &sched).unwrap();

        let full = dir.path().join("full");
        save_checkpoint(&full, &state).unwrap();
        assert!(checkpoint_has_decoder(&full).unwrap());

        let slim = dir.path().join("classifier");
        save_checkpoint_subset(&slim, &state, |n| !is_decoder_param(n)).unwrap();
        assert!(!checkpoint_has_decoder(&slim).unwrap());
        assert!(!slim.join("tensors").join("dec.mask_token.bin").exists());

        // A slim checkpoint still loads: unlisted tensors keep their
        // freshly initialized values, listed ones match the saved model.
        let loaded = load_checkpoint(&slim).unwrap();
        let want: Vec<f32> = state
            .params
            .store
            .get("enc.patch_proj.w")
            .unwrap()
            .data()
            .iter()
            .map(|&v| v as f32)
            .collect();
        let got: Vec<f32> = loaded
            .params
            .store
            .get("enc.patch_proj.w")
            .unwrap()
            .data()
            .iter()
            .map(|&v| v as f32)
            .collect();
        assert_eq!(want, got);
    }

    #[test]
    fn encoder_only_load_copies_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let sched = micro_sched(1, 23);
        let state =
            TrainState::new(EncoderConfig::micro(), DecoderConfig::micro(), &sched).unwrap();
        let ckpt = dir.path().join("ck");
        save_checkpoint(&ckpt, &state).unwrap();

        // Fresh params with a different seed pick up the stored encoder.
        let mut fresh = init_params(EncoderConfig::micro(), DecoderConfig::micro(), 99).unwrap();
        let fresh_head = fresh.store.get("head.w").unwrap().clone();
        load_encoder_into(&ckpt, &mut fresh).unwrap();
        // f32 storage rounds, so compare via the same rounding.
        let want: Vec<f32> = state
            .params
            .store
            .get("enc.patch_proj.w")
            .unwrap()
            .data()
            .iter()
            .map(|&v| v as f32)
            .collect();
        let got: Vec<f32> = fresh
            .store
            .get("enc.patch_proj.w")
            .unwrap()
            .data()
            .iter()
            .map(|&v| v as f32)
            .collect();
        assert_eq!(want, got);
        assert_eq!(
            fresh.store.get("head.w").unwrap(),
            &fresh_head,
            "head must stay fresh"
        );

        // Mismatched geometry is refused.
        let mut other_cfg = EncoderConfig::micro();
        other_cfg.embed_dim = 16;
        other_cfg.heads = 2;
        let mut wrong = init_params(other_cfg, DecoderConfig::micro(), 1).unwrap();
        assert!(load_encoder_into(&ckpt, &mut wrong).is_err());
    }

    #[test]
    fn metrics_csv_has_empty_contrastive_before_the_gate() {
        let dir = tempfile::tempdir().unwrap();
        let metrics = vec![
            EpochMetrics {
                epoch: 0,
                rec_loss: 0.5,
                con_loss: None,
                stage: Stage::RecOnly,
                lr: 1e-3,
            },
            EpochMetrics {
                epoch: 1,
                rec_loss: 0.4,
                con_loss: Some(0.2),
                stage: Stage::RecPlusCon,
                lr: 9e-4,
            },
        ];
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &metrics).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,rec_loss,con_loss,stage,lr");
        assert!(lines[1].starts_with("0,0.5,,rec_only,"));
        assert!(lines[2].starts_with("1,0.4,0.2,rec_plus_con,"));
    }
}
