//! Vision transformer encoder, lightweight decoder, and classifier head.
//!
//! The encoder is a standard pre-norm ViT without a class token: patch
//! tokens are linearly projected, fixed 2-D sinusoidal position embeddings
//! are added, and a stack of attention + GELU-MLP blocks runs on whatever
//! subset of tokens it is given. During masked pre-training that subset is
//! only the visible tokens, so masked content never enters the computation.
//! The decoder re-expands to the full grid by inserting a learned mask-token
//! embedding at masked slots, adds its own fixed position table, and
//! predicts raw patch pixels. The contrastive feature is the mean of the
//! encoder's output tokens scaled to unit norm; classification mean-pools
//! the same output into a 2-way linear head.
//!
//! Forward passes are recorded on an [`autodiff::Tape`], which is what the
//! trainer differentiates; the free functions at the bottom are convenience
//! wrappers that run a forward pass and return plain tensors.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{NodeId, Tape};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::{patchify, MaskPlan, TokenSequence};

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-6;

/// Geometry and width of the encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    /// Hidden width of each MLP as a multiple of `embed_dim`.
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    /// ViT-Tiny at 256x256 input: the default training geometry.
    pub fn vit_tiny() -> Self {
        EncoderConfig {
            embed_dim: 192,
            depth: 12,
            heads: 3,
            patch_size: 16,
            image_size: 256,
            mlp_ratio: 4.0,
        }
    }

    /// Smallest legal geometry; used by the gradient checks, where every
    /// parameter is compared against finite differences.
    pub fn micro() -> Self {
        EncoderConfig {
            embed_dim: 8,
            depth: 1,
            heads: 1,
            patch_size: 4,
            image_size: 8,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 {
            return Err(Error::Config(
                "encoder depth and heads must be positive".into(),
            ));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be positive and divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by 4 for the 2-D sinusoidal position table",
                self.embed_dim
            )));
        }
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.mlp_ratio <= 0.0 || !self.mlp_ratio.is_finite() {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Width and depth of the reconstruction decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl DecoderConfig {
    /// The best-performing decoder size: 512 wide, 8 deep.
    pub fn default_size() -> Self {
        DecoderConfig {
            width: 512,
            depth: 8,
            heads: 8,
        }
    }

    /// Small decoder for tests and desk-scale runs.
    pub fn micro() -> Self {
        DecoderConfig {
            width: 8,
            depth: 1,
            heads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder width {} must be positive and divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "decoder width {} must be divisible by 4 for the position table",
                self.width
            )));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.width * 4
    }
}

/// Ordered, named collection of parameter tensors.
///
/// Insertion order is the initialisation draw order and the checkpoint
/// serialisation order, so it must stay deterministic. `trainable` is false
/// for the fixed sinusoidal position tables.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index
            .get(name)
            .copied()
            .map(move |i| &mut self.tensors[i])
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index
            .get(name)
            .map(|&i| self.trainable[i])
            .unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Iterate `(name, tensor, trainable)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.names
            .iter()
            .zip(self.tensors.iter())
            .zip(self.trainable.iter())
            .map(|((n, t), &tr)| (n.as_str(), t, tr))
    }

    /// Names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    /// Total number of scalar values across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Full parameter set plus the geometry it was built for.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub enc: EncoderConfig,
    pub dec: DecoderConfig,
    pub store: ParamStore,
}

/// Truncated normal draw: standard normal resampled until it lands within
/// two standard deviations, then scaled.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn tn_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = trunc_normal(rng, std);
    }
    t
}

/// Fixed 2-D sinusoidal position table for a `side x side` grid.
///
/// The first half of each row encodes the grid row, the second half the grid
/// column; each half is `[sin(p * w_0..), cos(p * w_0..)]` with frequencies
/// `w_k = 10000^(-k / (dim/4))`. Row 0 is therefore the sinusoid at grid
/// position (0, 0): zeros in the sine slots, ones in the cosine slots.
pub fn sinusoid_table(side: usize, dim: usize) -> Tensor {
    assert!(
        dim.is_multiple_of(4),
        "sinusoid_table: dim must be divisible by 4"
    );
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 10000f64.powf(-(k as f64) / quarter as f64))
        .collect();
    Tensor::from_fn(side * side, dim, |i, j| {
        let (r, c) = (i / side, i % side);
        let half = dim / 2;
        let (pos, j_in) = if j < half {
            (r as f64, j)
        } else {
            (c as f64, j - half)
        };
        if j_in < quarter {
            (pos * omega[j_in]).sin()
        } else {
            (pos * omega[j_in - quarter]).cos()
        }
    })
}

/// Initialise all parameters: truncated-normal (std 0.02, clipped at two
/// standard deviations) for projection weights, zeros for biases, ones for
/// layer-norm gains, and fixed sinusoidal position tables. Deterministic in
/// `seed`.
pub fn init_params(enc: EncoderConfig, dec: DecoderConfig, seed: u64) -> Result<ModelParams> {
    enc.validate()?;
    dec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = enc.embed_dim;
    let std = 0.02;

    store.insert(
        "enc.patch_proj.w",
        tn_tensor(&mut rng, enc.token_dim(), d, std),
        true,
    );
    store.insert("enc.patch_proj.b", Tensor::zeros(1, d), true);
    store.insert("enc.pos", sinusoid_table(enc.grid(), d), false);
    for i in 0..enc.depth {
        insert_block(
            &mut store,
            &format!("enc.block{i}"),
            d,
            enc.mlp_hidden(),
            &mut rng,
            std,
        );
    }
    store.insert("enc.ln_f.g", Tensor::full(1, d, 1.0), true);
    store.insert("enc.ln_f.b", Tensor::zeros(1, d), true);

    let w = dec.width;
    store.insert("dec.embed.w", tn_tensor(&mut rng, d, w, std), true);
    store.insert("dec.embed.b", Tensor::zeros(1, w), true);
    store.insert("dec.mask_token", tn_tensor(&mut rng, 1, w, std), true);
    store.insert("dec.pos", sinusoid_table(enc.grid(), w), false);
    for i in 0..dec.depth {
        insert_block(
            &mut store,
            &format!("dec.block{i}"),
            w,
            dec.mlp_hidden(),
            &mut rng,
            std,
        );
    }
    store.insert("dec.ln_f.g", Tensor::full(1, w, 1.0), true);
    store.insert("dec.ln_f.b", Tensor::zeros(1, w), true);
    store.insert(
        "dec.head.w",
        tn_tensor(&mut rng, w, enc.token_dim(), std),
        true,
    );
    store.insert("dec.head.b", Tensor::zeros(1, enc.token_dim()), true);

    store.insert("head.w", tn_tensor(&mut rng, d, 2, std), true);
    store.insert("head.b", Tensor::zeros(1, 2), true);

    Ok(ModelParams { enc, dec, store })
}

fn insert_block(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
    std: f64,
) {
    store.insert(&format!("{prefix}.ln1.g"), Tensor::full(1, dim, 1.0), true);
    store.insert(&format!("{prefix}.ln1.b"), Tensor::zeros(1, dim), true);
    for p in ["wq", "wk", "wv", "wo"] {
        store.insert(
            &format!("{prefix}.attn.{p}"),
            tn_tensor(rng, dim, dim, std),
            true,
        );
    }
    for p in ["bq", "bk", "bv", "bo"] {
        store.insert(&format!("{prefix}.attn.{p}"), Tensor::zeros(1, dim), true);
    }
    store.insert(&format!("{prefix}.ln2.g"), Tensor::full(1, dim, 1.0), true);
    store.insert(&format!("{prefix}.ln2.b"), Tensor::zeros(1, dim), true);
    store.insert(
        &format!("{prefix}.mlp.w1"),
        tn_tensor(rng, dim, hidden, std),
        true,
    );
    store.insert(&format!("{prefix}.mlp.b1"), Tensor::zeros(1, hidden), true);
    store.insert(
        &format!("{prefix}.mlp.w2"),
        tn_tensor(rng, hidden, dim, std),
        true,
    );
    store.insert(&format!("{prefix}.mlp.b2"), Tensor::zeros(1, dim), true);
}

/// Mapping from parameter names to their leaf nodes on a tape.
pub struct TapeBindings {
    ids: HashMap<String, NodeId>,
}

impl TapeBindings {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered on this tape"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    /// Collect gradients for every registered trainable leaf.
    pub fn collect_grads(
        &self,
        tape: &Tape,
        grads: &crate::autodiff::Grads,
    ) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, &id) in &self.ids {
            if tape.is_trainable(id) {
                out.insert(name.clone(), grads.get_or_zero(id, tape));
            }
        }
        out
    }
}

/// Register parameters on a tape. `include` filters by name (pass `|_| true`
/// for everything); `freeze` turns matching parameters into plain inputs so
/// the optimizer will skip them. Fixed tables are always plain inputs.
pub fn register_params(
    tape: &mut Tape,
    params: &ModelParams,
    include: impl Fn(&str) -> bool,
    freeze: impl Fn(&str) -> bool,
) -> TapeBindings {
    let mut ids = HashMap::new();
    for (name, tensor, trainable) in params.store.iter() {
        if !include(name) {
            continue;
        }
        let id = if trainable && !freeze(name) {
            tape.param(tensor.clone())
        } else {
            tape.input(tensor.clone())
        };
        ids.insert(name.to_string(), id);
    }
    TapeBindings { ids }
}

/// Encoder-relevant names (patch projection, position table, blocks, final
/// norm); used to register subsets.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.")
}

pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("dec.")
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// Encoder forward products: the final latent plus each block's output
/// (before the final norm), which the activation-map analysis reads.
pub struct EncoderTrace {
    pub latent: NodeId,
    pub block_outs: Vec<NodeId>,
}

/// Run the encoder over the given token rows (already restricted to visible
/// tokens). `token_idx` supplies each row's position in the full grid so the
/// right position embeddings are added.
pub fn encode_on_tape(
    tape: &mut Tape,
    binds: &TapeBindings,
    cfg: &EncoderConfig,
    tokens: &Tensor,
    token_idx: &[usize],
) -> Result<EncoderTrace> {
    if tokens.rows() == 0 {
        return Err(Error::InvalidArgument(
            "encoder needs at least one visible token".into(),
        ));
    }
    if tokens.rows() != token_idx.len() {
        return Err(Error::shape(
            "encode: token index list",
            format!("{}", tokens.rows()),
            format!("{}", token_idx.len()),
        ));
    }
    if tokens.cols() != cfg.token_dim() {
        return Err(Error::shape(
            "encode: token dimension",
            format!("{}", cfg.token_dim()),
            format!("{}", tokens.cols()),
        ));
    }
    if let Some(&bad) = token_idx.iter().find(|&&i| i >= cfg.n_tokens()) {
        return Err(Error::InvalidArgument(format!(
            "token index {bad} outside grid of {} tokens",
            cfg.n_tokens()
        )));
    }

    let x0 = tape.input(tokens.clone());
    let proj = tape.matmul(x0, binds.id("enc.patch_proj.w"));
    let proj = tape.add_row(proj, binds.id("enc.patch_proj.b"));
    let pos = tape.gather_rows(binds.id("enc.pos"), token_idx);
    let mut x = tape.add(proj, pos);

    let mut block_outs = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        x = transformer_block(tape, binds, &format!("enc.block{i}"), x, cfg.heads);
        block_outs.push(x);
    }
    let latent = tape.layer_norm(x, binds.id("enc.ln_f.g"), binds.id("enc.ln_f.b"), LN_EPS);
    Ok(EncoderTrace { latent, block_outs })
}

/// Pre-norm block: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
fn transformer_block(
    tape: &mut Tape,
    binds: &TapeBindings,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> NodeId {
    let p = |s: &str| binds.id(&format!("{prefix}.{s}"));

    let normed = tape.layer_norm(x, p("ln1.g"), p("ln1.b"), LN_EPS);
    let attn = attention(
        tape,
        normed,
        p("attn.wq"),
        p("attn.bq"),
        p("attn.wk"),
        p("attn.bk"),
        p("attn.wv"),
        p("attn.bv"),
        p("attn.wo"),
        p("attn.bo"),
        heads,
    );
    let h = tape.add(x, attn);

    let normed2 = tape.layer_norm(h, p("ln2.g"), p("ln2.b"), LN_EPS);
    let up = tape.matmul(normed2, p("mlp.w1"));
    let up = tape.add_row(up, p("mlp.b1"));
    let act = tape.gelu(up);
    let down = tape.matmul(act, p("mlp.w2"));
    let down = tape.add_row(down, p("mlp.b2"));
    tape.add(h, down)
}

#[allow(clippy::too_many_arguments)]
fn attention(
    tape: &mut Tape,
    x: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    heads: usize,
) -> NodeId {
    let dim = tape.value(x).cols();
    debug_assert_eq!(dim % heads, 0);
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(x, wq);
    let q = tape.add_row(q, bq);
    let k = tape.matmul(x, wk);
    let k = tape.add_row(k, bk);
    let v = tape.matmul(x, wv);
    let v = tape.add_row(v, bv);

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, s, e);
        let kh = tape.slice_cols(k, s, e);
        let vh = tape.slice_cols(v, s, e);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(attn, vh));
    }
    let cat = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)
    };
    let out = tape.matmul(cat, wo);
    tape.add_row(out, bo)
}

/// Decoder forward: expand visible latents to the full grid with the mask
/// token at masked slots, run the decoder stack, and predict patch pixels
/// for every grid position.
pub fn decode_on_tape(
    tape: &mut Tape,
    binds: &TapeBindings,
    enc_cfg: &EncoderConfig,
    dec_cfg: &DecoderConfig,
    latent: NodeId,
    plan: &MaskPlan,
) -> Result<NodeId> {
    let nv = plan.visible_idx.len();
    if tape.value(latent).rows() != nv {
        return Err(Error::shape(
            "decode: latent rows vs plan visible count",
            format!("{nv}"),
            format!("{}", tape.value(latent).rows()),
        ));
    }
    if plan.n != enc_cfg.n_tokens() {
        return Err(Error::shape(
            "decode: plan size vs grid",
            format!("{}", enc_cfg.n_tokens()),
            format!("{}", plan.n),
        ));
    }
    let n = plan.n;

    let emb = tape.matmul(latent, binds.id("dec.embed.w"));
    let emb = tape.add_row(emb, binds.id("dec.embed.b"));
    let placed_visible = tape.scatter_rows(emb, &plan.visible_idx, n);
    let mut x = if plan.masked_idx.is_empty() {
        placed_visible
    } else {
        let mask_rows = tape.repeat_row(binds.id("dec.mask_token"), plan.masked_idx.len());
        let placed_masked = tape.scatter_rows(mask_rows, &plan.masked_idx, n);
        tape.add(placed_visible, placed_masked)
    };
    x = tape.add(x, binds.id("dec.pos"));

    for i in 0..dec_cfg.depth {
        x = transformer_block(tape, binds, &format!("dec.block{i}"), x, dec_cfg.heads);
    }
    let x = tape.layer_norm(x, binds.id("dec.ln_f.g"), binds.id("dec.ln_f.b"), LN_EPS);
    let pred = tape.matmul(x, binds.id("dec.head.w"));
    Ok(tape.add_row(pred, binds.id("dec.head.b")))
}

/// Contrastive feature on the tape: token mean scaled to unit norm.
pub fn aggregate_on_tape(tape: &mut Tape, latent: NodeId) -> NodeId {
    let mean = tape.mean_rows(latent);
    tape.l2_normalize_rows(mean)
}

/// Classifier forward products.
pub struct ClassifyTrace {
    pub logits: NodeId,
    /// Output of the last encoder block, before the final norm.
    pub last_block: NodeId,
}

/// Full-sequence (unmasked) classification forward pass for one image's
/// tokens.
pub fn classify_on_tape(
    tape: &mut Tape,
    binds: &TapeBindings,
    cfg: &EncoderConfig,
    tokens: &TokenSequence,
) -> Result<ClassifyTrace> {
    if tokens.len() != cfg.n_tokens() {
        return Err(Error::shape(
            "classify: token count",
            format!("{}", cfg.n_tokens()),
            format!("{}", tokens.len()),
        ));
    }
    let all: Vec<usize> = (0..tokens.len()).collect();
    let trace = encode_on_tape(tape, binds, cfg, &tokens.tokens, &all)?;
    let pooled = tape.mean_rows(trace.latent);
    let logits = tape.matmul(pooled, binds.id("head.w"));
    let logits = tape.add_row(logits, binds.id("head.b"));
    Ok(ClassifyTrace {
        logits,
        last_block: *trace.block_outs.last().expect("depth >= 1"),
    })
}

// ---------------------------------------------------------------------------
// Plain-tensor wrappers
// ---------------------------------------------------------------------------

/// Encode the visible tokens of a masked sequence; rows come back in
/// ascending `visible_idx` order.
pub fn encode(params: &ModelParams, seq: &TokenSequence, plan: &MaskPlan) -> Result<Tensor> {
    if plan.n != seq.len() {
        return Err(Error::shape(
            "encode: plan vs sequence",
            format!("{}", seq.len()),
            format!("{}", plan.n),
        ));
    }
    let visible = seq.tokens.gather_rows(&plan.visible_idx);
    let mut tape = Tape::new();
    let binds = register_params(&mut tape, params, is_encoder_param, |_| true);
    let trace = encode_on_tape(&mut tape, &binds, &params.enc, &visible, &plan.visible_idx)?;
    Ok(tape.value(trace.latent).clone())
}

/// Decode visible latents into predicted patch pixels for the whole grid.
pub fn decode(params: &ModelParams, latent: &Tensor, plan: &MaskPlan) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binds = register_params(&mut tape, params, is_decoder_param, |_| true);
    let latent_id = tape.input(latent.clone());
    let pred = decode_on_tape(&mut tape, &binds, &params.enc, &params.dec, latent_id, plan)?;
    Ok(tape.value(pred).clone())
}

/// Mean token latent scaled to unit norm: the contrastive feature.
pub fn aggregate(latent: &Tensor) -> Result<Tensor> {
    if latent.rows() == 0 {
        return Err(Error::InvalidArgument("aggregate: empty latent".into()));
    }
    let d = latent.cols();
    let mut mean = vec![0.0; d];
    for r in 0..latent.rows() {
        for (j, &v) in latent.row(r).iter().enumerate() {
            mean[j] += v;
        }
    }
    let inv_n = 1.0 / latent.rows() as f64;
    for v in &mut mean {
        *v *= inv_n;
    }
    let norm = crate::tensor::norm(&mean);
    if norm <= 1e-300 {
        return Err(Error::InvalidArgument(
            "aggregate: zero-norm mean token".into(),
        ));
    }
    let inv = 1.0 / norm;
    for v in &mut mean {
        *v *= inv;
    }
    Tensor::from_vec(1, d, mean)
}

/// Two-way logits for one image from a full (unmasked) forward pass.
pub fn classify(params: &ModelParams, image: &Image) -> Result<Tensor> {
    let seq = patchify(image, params.enc.patch_size)?;
    let mut tape = Tape::new();
    let binds = register_params(
        &mut tape,
        params,
        |n| is_encoder_param(n) || is_head_param(n),
        |_| true,
    );
    let trace = classify_on_tape(&mut tape, &binds, &params.enc, &seq)?;
    Ok(tape.value(trace.logits).clone())
}

/// Softmax over a 1x2 logits row: `(p_spoof, p_live)`.
pub fn class_probabilities(logits: &Tensor) -> (f64, f64) {
    debug_assert_eq!(logits.shape(), (1, 2));
    let (a, b) = (logits.get(0, 0), logits.get(0, 1));
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let z = ea + eb;
    (ea / z, eb / z)
}
