//! Adapter fine-tuning over frozen encoders: plain SGD with decoupled weight
//! decay, a cosine learning-rate schedule, seeded determinism down to the
//! checkpoint bytes, and held-out ranking accuracy for best-checkpoint
//! selection.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoder::{
    self, init_encoders, quantize_f32, Encoded, LinearEncoder, LoraAdapter, Model,
};
use crate::featurize::{self, EmbeddingCache, FeatureVector};
use crate::hashing::{checksum_chunks, derive_seed, derive_seed_indexed};
use crate::loss::{compute_loss, EmbeddingBatch, LossConfig, LossKind, Role};
use crate::twin_data::{batch_indices, TwinCard};
use crate::{Error, Result};

/// Hyperparameters for one run. Desk-scale defaults; the full-scale reference
/// configuration these mirror is global batch 2048 with base lr 3e-6 over 10
/// epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub tau: f64,
    pub lambda_caption: f64,
    pub lambda_concept: f64,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub rank: usize,
    /// Adapter scaling numerator; `None` means "equal to rank".
    pub alpha: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of cards held out by seeded id hash.
    pub holdout_frac: f64,
    /// Update the base weights directly instead of adapters. Exists to
    /// reproduce the degradation pattern of full fine-tuning; off by default.
    pub full_finetune: bool,
    /// Hard cap on optimizer steps; `None` runs all epochs.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss_defaults = LossConfig::default();
        TrainConfig {
            loss_kind: LossKind::CultureClip,
            tau: loss_defaults.tau,
            lambda_caption: loss_defaults.lambda_caption,
            lambda_concept: loss_defaults.lambda_concept,
            embed_dim: 64,
            feature_dim: 2048,
            rank: 4,
            alpha: None,
            batch_size: 32,
            epochs: 10,
            base_lr: 1e-2,
            weight_decay: 0.1,
            seed: 17,
            holdout_frac: 0.1,
            full_finetune: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn alpha_value(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda_caption: self.lambda_caption,
            lambda_concept: self.lambda_concept,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if self.embed_dim == 0 {
            return Err(Error::BadConfig("embed_dim must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::BadConfig("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::BadConfig("base_lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::BadConfig("weight_decay must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::BadConfig(
                "holdout_frac must be in [0, 1)".into(),
            ));
        }
        if !(self.alpha_value() > 0.0) {
            return Err(Error::BadConfig("alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` at step 0 to exactly 0 at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    if step >= total_steps {
        return 0.0;
    }
    let frac = step as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Everything the optimizer touches, plus the frozen encoders.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub image_encoder: LinearEncoder,
    pub text_encoder: LinearEncoder,
    pub image_adapter: LoraAdapter,
    pub text_adapter: LoraAdapter,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (mut image_encoder, mut text_encoder) =
            init_encoders(cfg.embed_dim, cfg.feature_dim, cfg.seed)?;
        if cfg.full_finetune {
            image_encoder.set_frozen(false);
            text_encoder.set_frozen(false);
        }
        let alpha = cfg.alpha_value();
        let image_adapter = LoraAdapter::init(
            cfg.embed_dim,
            cfg.feature_dim,
            cfg.rank,
            alpha,
            derive_seed(cfg.seed, "image_a"),
        )?;
        let text_adapter = LoraAdapter::init(
            cfg.embed_dim,
            cfg.feature_dim,
            cfg.rank,
            alpha,
            derive_seed(cfg.seed, "text_a"),
        )?;
        Ok(TrainState {
            image_encoder,
            text_encoder,
            image_adapter,
            text_adapter,
            step: 0,
            seed: cfg.seed,
        })
    }

    /// Snapshot as an inference model (adapters attached, not merged).
    pub fn model(&self) -> Model {
        Model {
            image_encoder: self.image_encoder.clone(),
            text_encoder: self.text_encoder.clone(),
            image_adapter: Some(self.image_adapter.clone()),
            text_adapter: Some(self.text_adapter.clone()),
        }
    }
}

/// Feature vectors for all six roles of one card.
#[derive(Debug, Clone)]
pub struct CardFeatures {
    pub card_id: String,
    pub image_pos: FeatureVector,
    pub image_neg: FeatureVector,
    pub text_pos: FeatureVector,
    pub text_neg: FeatureVector,
    pub concept_pos: FeatureVector,
    pub concept_neg: FeatureVector,
}

impl CardFeatures {
    pub fn role(&self, role: Role) -> &FeatureVector {
        match role {
            Role::ImagePos => &self.image_pos,
            Role::ImageNeg => &self.image_neg,
            Role::TextPos => &self.text_pos,
            Role::TextNeg => &self.text_neg,
            Role::ConceptPos => &self.concept_pos,
            Role::ConceptNeg => &self.concept_neg,
        }
    }

    pub fn has_zero_role(&self) -> bool {
        Role::ALL.iter().any(|&r| self.role(r).is_zero)
    }
}

/// Featurize cards for training. Cards with any zero-feature role are set
/// aside (second return value) rather than failing the run.
pub fn featurize_cards(
    cards: &[&TwinCard],
    feature_dim: usize,
    cache: Option<&EmbeddingCache>,
) -> Result<(Vec<CardFeatures>, Vec<String>)> {
    let mut kept = Vec::with_capacity(cards.len());
    let mut dropped = Vec::new();
    for card in cards {
        let feats = CardFeatures {
            card_id: card.id.clone(),
            image_pos: featurize::image_features(&card.positive.image, feature_dim, cache)?,
            image_neg: featurize::image_features(&card.negative.image, feature_dim, cache)?,
            text_pos: featurize::text_features(&card.positive.caption, feature_dim)?,
            text_neg: featurize::text_features(&card.negative.caption, feature_dim)?,
            concept_pos: featurize::text_features(&card.positive.record.concept, feature_dim)?,
            concept_neg: featurize::text_features(&card.negative.record.concept, feature_dim)?,
        };
        if feats.has_zero_role() {
            dropped.push(card.id.clone());
        } else {
            kept.push(feats);
        }
    }
    Ok((kept, dropped))
}

/// Split cards into (train, holdout) by a seeded hash of the card id, so the
/// split is stable under reordering and across runs.
pub fn holdout_split<'a>(
    cards: &'a [TwinCard],
    frac: f64,
    seed: u64,
) -> (Vec<&'a TwinCard>, Vec<&'a TwinCard>) {
    let threshold = (frac * 10_000.0).round() as u64;
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for card in cards {
        if derive_seed(seed, &card.id) % 10_000 < threshold {
            holdout.push(card);
        } else {
            train.push(card);
        }
    }
    (train, holdout)
}

/// Gradients for every trainable tensor.
struct ParamGrads {
    image_a: Array2<f64>,
    image_b: Array2<f64>,
    text_a: Array2<f64>,
    text_b: Array2<f64>,
    image_w: Option<Array2<f64>>,
    text_w: Option<Array2<f64>>,
}

fn role_uses_image(role: Role) -> bool {
    matches!(role, Role::ImagePos | Role::ImageNeg)
}

/// Forward pass over a batch: encode the six roles and assemble the
/// embedding matrices, keeping per-item intermediates for the backward pass.
fn forward(
    state: &TrainState,
    batch: &[&CardFeatures],
    full_finetune: bool,
) -> Result<(EmbeddingBatch, BTreeMap<Role, Vec<Encoded>>)> {
    let n = batch.len();
    let d = state.image_encoder.embed_dim();
    let mut encoded: BTreeMap<Role, Vec<Encoded>> = BTreeMap::new();
    let mut matrices: BTreeMap<Role, Array2<f64>> = BTreeMap::new();
    for role in Role::ALL {
        let (enc, adapter) = if role_uses_image(role) {
            (&state.image_encoder, &state.image_adapter)
        } else {
            (&state.text_encoder, &state.text_adapter)
        };
        let adapter = if full_finetune { None } else { Some(adapter) };
        let mut items = Vec::with_capacity(n);
        let mut m = Array2::zeros((n, d));
        for (i, card) in batch.iter().enumerate() {
            let fv = card.role(role);
            if fv.is_zero {
                return Err(Error::DegenerateBatch {
                    card_id: card.card_id.clone(),
                });
            }
            let e = encoder::encode_detailed(&fv.values, enc, adapter)?;
            m.row_mut(i).assign(&e.y);
            items.push(e);
        }
        matrices.insert(role, m);
        encoded.insert(role, items);
    }
    Ok((EmbeddingBatch::from_role_map(matrices)?, encoded))
}

/// Backward pass: push loss gradients through the normalization Jacobian
/// (I - y y^T) / |v| and accumulate them onto A/B (or W when full
/// fine-tuning).
fn backward(
    state: &TrainState,
    batch: &[&CardFeatures],
    encoded: &BTreeMap<Role, Vec<Encoded>>,
    grads: &BTreeMap<Role, Array2<f64>>,
    full_finetune: bool,
) -> ParamGrads {
    let d = state.image_encoder.embed_dim();
    let f = state.image_encoder.feature_dim();
    let (ra, rb) = (state.image_adapter.rank(), state.text_adapter.rank());
    let mut out = ParamGrads {
        image_a: Array2::zeros((ra, f)),
        image_b: Array2::zeros((d, ra)),
        text_a: Array2::zeros((rb, f)),
        text_b: Array2::zeros((d, rb)),
        image_w: full_finetune.then(|| Array2::zeros((d, f))),
        text_w: full_finetune.then(|| Array2::zeros((d, f))),
    };
    for (role, g) in grads {
        let items = &encoded[role];
        for (i, card) in batch.iter().enumerate() {
            let item = &items[i];
            let x = &card.role(*role).values;
            let gy = g.row(i);
            let dot = gy.dot(&item.y);
            let u = Array1::from_shape_fn(d, |k| (gy[k] - dot * item.y[k]) / item.prenorm);
            if full_finetune {
                let gw = if role_uses_image(*role) {
                    out.image_w.as_mut().unwrap()
                } else {
                    out.text_w.as_mut().unwrap()
                };
                for r in 0..d {
                    if u[r] != 0.0 {
                        for k in 0..f {
                            gw[[r, k]] += u[r] * x[k];
                        }
                    }
                }
            } else {
                let (adapter, ga, gb) = if role_uses_image(*role) {
                    (&state.image_adapter, &mut out.image_a, &mut out.image_b)
                } else {
                    (&state.text_adapter, &mut out.text_a, &mut out.text_b)
                };
                let scaling = adapter.scaling();
                let ax = item.ax.as_ref().expect("adapter path keeps A x");
                let bt_u = adapter.b.t().dot(&u);
                for r in 0..adapter.rank() {
                    let c = scaling * bt_u[r];
                    if c != 0.0 {
                        for k in 0..f {
                            ga[[r, k]] += c * x[k];
                        }
                    }
                }
                for r in 0..d {
                    let c = scaling * u[r];
                    for q in 0..adapter.rank() {
                        gb[[r, q]] += c * ax[q];
                    }
                }
            }
        }
    }
    out
}

/// One SGD update with decoupled weight decay, snapped to f32-representable
/// values so checkpoints round-trip bitwise.
fn sgd_update(param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64, wd: f64) {
    param.zip_mut_with(grad, |p, g| *p -= lr * (*g + wd * *p));
    quantize_f32(param);
}

fn all_finite(arr: &Array2<f64>) -> bool {
    arr.iter().all(|v| v.is_finite())
}

/// Run one optimizer step over a featurized batch at the given learning
/// rate. Returns the (pre-update) batch loss.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&CardFeatures],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvariantViolation("empty training batch".into()));
    }
    let (embeddings, encoded) = forward(state, batch, cfg.full_finetune)?;
    let loss = compute_loss(cfg.loss_kind, &embeddings, &cfg.loss_config())?;
    if !loss.value.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step });
    }
    let grads = backward(state, batch, &encoded, &loss.grads, cfg.full_finetune);
    let wd = cfg.weight_decay;
    if cfg.full_finetune {
        sgd_update(
            state.image_encoder.weight_mut()?,
            grads.image_w.as_ref().unwrap(),
            lr,
            wd,
        );
        sgd_update(
            state.text_encoder.weight_mut()?,
            grads.text_w.as_ref().unwrap(),
            lr,
            wd,
        );
    } else {
        sgd_update(&mut state.image_adapter.a, &grads.image_a, lr, wd);
        sgd_update(&mut state.image_adapter.b, &grads.image_b, lr, wd);
        sgd_update(&mut state.text_adapter.a, &grads.text_a, lr, wd);
        sgd_update(&mut state.text_adapter.b, &grads.text_b, lr, wd);
    }
    let healthy = if cfg.full_finetune {
        all_finite(state.image_encoder.weight()) && all_finite(state.text_encoder.weight())
    } else {
        all_finite(&state.image_adapter.a)
            && all_finite(&state.image_adapter.b)
            && all_finite(&state.text_adapter.a)
            && all_finite(&state.text_adapter.b)
    };
    if !healthy {
        return Err(Error::NonFiniteLoss { step: state.step });
    }
    state.step += 1;
    Ok(loss.value)
}

/// Loss value only, for finite differencing the whole chain.
fn forward_loss(
    state: &TrainState,
    batch: &[&CardFeatures],
    kind: LossKind,
    loss_cfg: &LossConfig,
    full_finetune: bool,
) -> Result<f64> {
    let (embeddings, _) = forward(state, batch, full_finetune)?;
    Ok(compute_loss(kind, &embeddings, loss_cfg)?.value)
}

/// Central finite differences on every adapter parameter against the
/// analytic chain gradients (loss through normalization through the low-rank
/// projection). Small dims keep it fast; the math is dimension-independent.
pub fn grad_check_chain(
    state: &TrainState,
    batch: &[&CardFeatures],
    kind: LossKind,
    loss_cfg: &LossConfig,
    eps: f64,
) -> Result<f64> {
    let (embeddings, encoded) = forward(state, batch, false)?;
    let loss = compute_loss(kind, &embeddings, loss_cfg)?;
    let analytic = backward(state, batch, &encoded, &loss.grads, false);

    let mut work = state.clone();
    let mut max_rel = 0.0f64;
    let mut check = |target: fn(&mut TrainState) -> &mut Array2<f64>,
                     analytic: &Array2<f64>,
                     work: &mut TrainState|
     -> Result<()> {
        let (rows, cols) = (analytic.nrows(), analytic.ncols());
        for i in 0..rows {
            for j in 0..cols {
                let orig = target(work)[[i, j]];
                target(work)[[i, j]] = orig + eps;
                let fp = forward_loss(work, batch, kind, loss_cfg, false)?;
                target(work)[[i, j]] = orig - eps;
                let fm = forward_loss(work, batch, kind, loss_cfg, false)?;
                target(work)[[i, j]] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic[[i, j]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                max_rel = max_rel.max(rel);
            }
        }
        Ok(())
    };
    check(|s| &mut s.image_adapter.a, &analytic.image_a, &mut work)?;
    check(|s| &mut s.image_adapter.b, &analytic.image_b, &mut work)?;
    check(|s| &mut s.text_adapter.a, &analytic.text_a, &mut work)?;
    check(|s| &mut s.text_adapter.b, &analytic.text_b, &mut work)?;
    Ok(max_rel)
}

const CKPT_TENSOR_ORDER: &str = "image_w, text_w, image_a, image_b, text_a, text_b";

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    d: usize,
    #[serde(rename = "F")]
    f: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
    step: u64,
    optimizer: String,
    checksum: String,
}

fn tensor_bytes(tensors: &[&Array2<f64>]) -> Vec<u8> {
    let mut bytes = Vec::new();
    for t in tensors {
        for &v in t.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

/// Write the state to disk atomically (temp file + rename). Layout: one JSON
/// metadata line, then little-endian f32 tensors in a fixed order
/// (image W, text W, image A, image B, text A, text B).
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let payload = tensor_bytes(&[
        state.image_encoder.weight(),
        state.text_encoder.weight(),
        &state.image_adapter.a,
        &state.image_adapter.b,
        &state.text_adapter.a,
        &state.text_adapter.b,
    ]);
    let meta = CkptMeta {
        d: state.image_encoder.embed_dim(),
        f: state.image_encoder.feature_dim(),
        rank: state.image_adapter.rank(),
        alpha: state.image_adapter.alpha(),
        seed: state.seed,
        step: state.step,
        optimizer: "sgd".into(),
        checksum: format!(
            "{:016x}",
            checksum_chunks(std::iter::once(payload.as_slice()))
        ),
    };
    let tmp: PathBuf = path.with_extension("tmp");
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    {
        let mut w = std::fs::File::create(&tmp).map_err(io_err)?;
        let header = serde_json::to_string(&meta).map_err(|e| Error::MalformedJson {
            context: "checkpoint metadata".into(),
            detail: e.to_string(),
        })?;
        w.write_all(header.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
        w.write_all(&payload).map_err(io_err)?;
        w.sync_all().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)
}

fn take_array(data: &[f32], offset: &mut usize, rows: usize, cols: usize) -> Array2<f64> {
    let len = rows * cols;
    let slice = &data[*offset..*offset + len];
    *offset += len;
    Array2::from_shape_vec((rows, cols), slice.iter().map(|&v| v as f64).collect())
        .expect("sized slice")
}

/// Read a checkpoint back; validates payload length against the declared
/// shapes and the embedded checksum (so truncation is caught).
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(io_err)?;
    let newline = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedJson {
            context: format!("{} metadata", path.display()),
            detail: "no metadata line".into(),
        })?;
    let meta: CkptMeta =
        serde_json::from_slice(&raw[..newline]).map_err(|e| Error::MalformedJson {
            context: format!("{} metadata", path.display()),
            detail: e.to_string(),
        })?;
    let payload = &raw[newline + 1..];
    // checksum first: truncation and corruption both land here, while a
    // payload that hashes clean but disagrees with the declared dims is a
    // metadata problem reported below
    let checksum = format!("{:016x}", checksum_chunks(std::iter::once(payload)));
    if checksum != meta.checksum {
        return Err(Error::ChecksumMismatch {
            path: path.display().to_string(),
        });
    }
    let expected_floats =
        2 * meta.d * meta.f + 2 * (meta.rank * meta.f) + 2 * (meta.d * meta.rank);
    if payload.len() != expected_floats * 4 {
        return Err(Error::ShapeMismatch(format!(
            "expected {} tensor bytes ({CKPT_TENSOR_ORDER}), found {}",
            expected_floats * 4,
            payload.len()
        )));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut off = 0usize;
    let image_w = take_array(&floats, &mut off, meta.d, meta.f);
    let text_w = take_array(&floats, &mut off, meta.d, meta.f);
    let image_a = take_array(&floats, &mut off, meta.rank, meta.f);
    let image_b = take_array(&floats, &mut off, meta.d, meta.rank);
    let text_a = take_array(&floats, &mut off, meta.rank, meta.f);
    let text_b = take_array(&floats, &mut off, meta.d, meta.rank);

    let mut image_adapter =
        LoraAdapter::init(meta.d, meta.f, meta.rank, meta.alpha, 0)?;
    image_adapter.a = image_a;
    image_adapter.b = image_b;
    let mut text_adapter = LoraAdapter::init(meta.d, meta.f, meta.rank, meta.alpha, 0)?;
    text_adapter.a = text_a;
    text_adapter.b = text_b;
    Ok(TrainState {
        image_encoder: LinearEncoder::from_weight(image_w, true),
        text_encoder: LinearEncoder::from_weight(text_w, true),
        image_adapter,
        text_adapter,
        step: meta.step,
        seed: meta.seed,
    })
}

/// Per-run summary returned by fit.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub loss_kind: LossKind,
    pub steps: u64,
    pub epochs_run: usize,
    pub epoch_mean_loss: Vec<f64>,
    pub holdout_accuracy: Vec<Option<f64>>,
    pub best_epoch: Option<usize>,
    pub best_holdout_accuracy: Option<f64>,
    pub train_cards: usize,
    pub holdout_cards: usize,
    pub dropped_zero_feature_cards: usize,
    pub final_loss: f64,
    pub wall_seconds: f64,
    pub last_checkpoint: String,
    pub best_checkpoint: String,
}

/// Build the two-option concept-statement items used for held-out ranking.
fn holdout_ranking_items(cards: &[&TwinCard]) -> Vec<crate::evaluate::RankingItem> {
    let mut items = Vec::with_capacity(cards.len() * 2);
    for card in cards {
        items.extend(crate::evaluate::twin_choice_items(
            card,
            crate::evaluate::DEFAULT_STATEMENT_TEMPLATE,
        ));
    }
    items
}

/// Full training loop: seeded holdout split, one-time featurization, per-epoch
/// shuffled batches, cosine-scheduled SGD, a checkpoint per epoch, and the
/// best checkpoint (by held-out ranking accuracy) retained alongside the last.
pub fn fit(
    cards: &[TwinCard],
    cfg: &TrainConfig,
    cache: Option<&EmbeddingCache>,
    out_dir: impl AsRef<Path>,
) -> Result<(TrainState, TrainReport)> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let started = Instant::now();

    let (train_cards, holdout_cards) = holdout_split(cards, cfg.holdout_frac, cfg.seed);
    if train_cards.is_empty() {
        return Err(Error::EmptyDataset("no cards left for training".into()));
    }
    let (train_feats, dropped_train) = featurize_cards(&train_cards, cfg.feature_dim, cache)?;
    let (holdout_feats, dropped_holdout) =
        featurize_cards(&holdout_cards, cfg.feature_dim, cache)?;
    let dropped = dropped_train.len() + dropped_holdout.len();
    for id in dropped_train.iter().chain(dropped_holdout.iter()) {
        log::warn!("card `{id}` has a zero-feature role; excluded from the run");
    }
    if train_feats.is_empty() {
        return Err(Error::EmptyDataset(
            "every training card was zero-feature".into(),
        ));
    }
    let usable_holdout: Vec<&TwinCard> = holdout_cards
        .iter()
        .filter(|c| holdout_feats.iter().any(|f| f.card_id == c.id))
        .copied()
        .collect();
    let holdout_items = holdout_ranking_items(&usable_holdout);

    let steps_per_epoch = (train_feats.len() / cfg.batch_size) as u64;
    if steps_per_epoch == 0 {
        return Err(Error::BatchTooLarge {
            requested: cfg.batch_size,
            available: train_feats.len(),
        });
    }
    let planned = steps_per_epoch * cfg.epochs as u64;
    let total_steps = cfg.max_steps.map_or(planned, |m| planned.min(m));

    let mut state = TrainState::init(cfg)?;
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut epoch_mean_loss = Vec::new();
    let mut holdout_accuracy: Vec<Option<f64>> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut final_loss = f64::NAN;

    'epochs: for epoch in 0..cfg.epochs {
        let plan = batch_indices(
            train_feats.len(),
            cfg.batch_size,
            derive_seed_indexed(cfg.seed, "epoch", epoch as u64),
        )?;
        let mut losses = Vec::with_capacity(plan.len());
        for idxs in &plan {
            if state.step >= total_steps {
                break;
            }
            let lr = cosine_lr(state.step, total_steps, cfg.base_lr);
            let batch: Vec<&CardFeatures> = idxs.iter().map(|&i| &train_feats[i]).collect();
            let value = train_step(&mut state, &batch, cfg, lr)?;
            losses.push(value);
        }
        if losses.is_empty() {
            break 'epochs;
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        final_loss = *losses.last().unwrap();
        epoch_mean_loss.push(mean);

        let acc = if holdout_items.is_empty() {
            None
        } else {
            let model = state.model();
            Some(crate::evaluate::ranking_accuracy(
                &model,
                &holdout_items,
                cache,
            )?)
        };
        holdout_accuracy.push(acc);
        log::info!(
            "epoch {epoch}: mean loss {mean:.6}{}",
            acc.map(|a| format!(", holdout accuracy {a:.4}"))
                .unwrap_or_default()
        );

        save_checkpoint(&state, &last_path)?;
        let improved = match (acc, best) {
            (Some(a), Some((_, b))) => a > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = Some((epoch, acc.unwrap()));
            save_checkpoint(&state, &best_path)?;
        }
        if state.step >= total_steps {
            break 'epochs;
        }
    }
    if best.is_none() {
        // no holdout signal; the last checkpoint is the best we know
        std::fs::copy(&last_path, &best_path)
            .map_err(|e| Error::io(best_path.display().to_string(), e))?;
    }

    let report = TrainReport {
        loss_kind: cfg.loss_kind,
        steps: state.step,
        epochs_run: epoch_mean_loss.len(),
        epoch_mean_loss,
        holdout_accuracy,
        best_epoch: best.map(|(e, _)| e),
        best_holdout_accuracy: best.map(|(_, a)| a),
        train_cards: train_feats.len(),
        holdout_cards: usable_holdout.len(),
        dropped_zero_feature_cards: dropped,
        final_loss,
        wall_seconds: started.elapsed().as_secs_f64(),
        last_checkpoint: last_path.display().to_string(),
        best_checkpoint: best_path.display().to_string(),
    };
    Ok((state, report))
}
