//! Command-line interface: one binary, six subcommands. A JSON run-config
//! file supplies defaults; flags override it; every run logs the fully
//! resolved config to stderr. Exit codes: 0 success, 1 failed check,
//! 2 config or input error, 3 backend failure, 4 empty curation output,
//! 5 divergence during training.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curate::{self, BackendKind, JudgeProfile, PipelineConfig, SourceMode};
use crate::evaluate::{self, RankingItem, RetrievalPair, DEFAULT_STATEMENT_TEMPLATE};
use crate::featurize::EmbeddingCache;
use crate::hashing::derive_seed_indexed;
use crate::loss::{grad_check, EmbeddingBatch, LossConfig, LossKind};
use crate::train::{self, TrainConfig};
use crate::twin_data::{load_dataset, ParseMode};
use crate::{Error, Result};

/// Exit status for a crate error: backend trouble maps to 3, divergence to
/// 5, and everything else (config, input, shape) to 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::BackendUnavailable { .. }
        | Error::GenerationRejected(_)
        | Error::ParseFailure { .. }
        | Error::InvalidTwin { .. }
        | Error::ScoreParseFailure(_) => 3,
        Error::NonFiniteLoss { .. }
        | Error::DegenerateOutput { .. }
        | Error::DegenerateBatch { .. } => 5,
        _ => 2,
    }
}

#[derive(Parser)]
#[command(
    name = "cultureclip",
    version,
    about = "Curate twin-card datasets, train adapters with contrastive losses, and evaluate ranking/retrieval"
)]
pub struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// JSON run-config file ({"curate": .., "train": .., "eval": ..});
    /// flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build a twin-card dataset with the curation pipeline.
    Curate(CurateArgs),
    /// Featurize a dataset, optionally embedding through a checkpoint.
    Embed(EmbedArgs),
    /// Fine-tune adapters on a twin-card dataset.
    Train(TrainArgs),
    /// Score a checkpoint on ranking and retrieval suites.
    Eval(EvalArgs),
    /// Print dataset statistics and leading cards.
    Inspect(InspectArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

/// Which ranking-item families `eval --data` builds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum SuiteSelection {
    #[default]
    All,
    /// Two-option concept statements from each card's twin sides.
    Concept,
    /// Multi-option same-country statement items.
    Grounding,
    /// Country-varied statement items per concept.
    Region,
}

fn default_template() -> String {
    DEFAULT_STATEMENT_TEMPLATE.to_string()
}

/// Evaluation-suite settings, the `eval` section of the run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub recall_k: usize,
    pub grounding_k: usize,
    pub region_k: usize,
    pub statement_template: String,
    pub seed: u64,
    pub suite: SuiteSelection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            recall_k: 5,
            grounding_k: 4,
            region_k: 4,
            statement_template: default_template(),
            seed: 17,
            suite: SuiteSelection::All,
        }
    }
}

/// One config file for every command: each section holds that command's
/// settings, all optional, unknown keys rejected at every level.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub curate: PipelineConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Load the run config, or defaults when no file is named.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedJson {
        context: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn log_resolved(section: &str, cfg: &impl Serialize) {
    match serde_json::to_string(cfg) {
        Ok(json) => eprintln!("resolved {section} config: {json}"),
        Err(e) => eprintln!("resolved {section} config unprintable: {e}"),
    }
}

fn load_cache(path: Option<&Path>) -> Result<Option<EmbeddingCache>> {
    path.map(EmbeddingCache::load).transpose()
}

#[derive(Args)]
pub struct CurateArgs {
    /// Output JSONL path for curated cards; the filter summary lands next
    /// to it as `<stem>.summary.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Raw candidate corpus (JSONL), required for bottom-up sourcing.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long, value_enum)]
    pub source: Option<SourceMode>,
    #[arg(long, value_enum)]
    pub judge_profile: Option<JudgeProfile>,
    #[arg(long)]
    pub captions: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub retry_attempts: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn cmd_curate(json: bool, run: RunConfig, args: CurateArgs) -> Result<i32> {
    let mut cfg = run.curate;
    if let Some(v) = args.backend {
        cfg.backend = v;
    }
    if let Some(v) = args.source {
        cfg.source = v;
    }
    if let Some(v) = args.judge_profile {
        cfg.judge_profile = v;
    }
    if let Some(v) = args.captions {
        cfg.captions_per_concept = v;
    }
    if let Some(v) = args.concurrency {
        cfg.concurrency = v;
    }
    if let Some(v) = args.retry_attempts {
        cfg.retry_attempts = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    log_resolved("curate", &cfg);

    let needs_corpus = matches!(cfg.source, SourceMode::BottomUp | SourceMode::Both);
    let candidates = match &args.candidates {
        Some(path) => curate::load_candidates(path)?,
        None if needs_corpus && cfg.source == SourceMode::BottomUp => {
            return Err(Error::BadConfig(
                "--candidates is required for bottom-up sourcing".into(),
            ));
        }
        None => Vec::new(),
    };

    let backend = curate::build_backend(&cfg)?;
    let output = curate::run_pipeline(&cfg, &candidates, backend.as_ref())?;
    let summary_path = output.write(&args.out)?;

    if json {
        println!(
            "{}",
            serde_json::json!({
                "cards": output.summary.cards_emitted,
                "out": args.out.display().to_string(),
                "summary_path": summary_path.display().to_string(),
                "summary": output.summary,
            })
        );
    } else {
        println!(
            "curated {} cards -> {}",
            output.summary.cards_emitted,
            args.out.display()
        );
        println!("summary -> {}", summary_path.display());
        for (label, cat) in &output.summary.per_category {
            println!(
                "  {label}: evaluated {} retained {} pass_rate {:.4}",
                cat.evaluated, cat.retained, cat.pass_rate
            );
        }
    }

    if output.summary.cards_emitted == 0 {
        if output.summary.skips.backend_failures > 0 {
            eprintln!(
                "no cards emitted; {} backend failures",
                output.summary.skips.backend_failures
            );
            return Ok(3);
        }
        eprintln!("no cards emitted: every item was filtered or skipped");
        return Ok(4);
    }
    Ok(0)
}

#[derive(Args)]
pub struct TrainArgs {
    /// Twin-card JSONL to train on.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the run report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda_caption: Option<f64>,
    #[arg(long)]
    pub lambda_concept: Option<f64>,
    #[arg(long)]
    pub holdout_frac: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Update base weights directly instead of adapters.
    #[arg(long)]
    pub full_finetune: bool,
    /// Embedding cache file resolving `feat:` image keys.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

fn apply_train_overrides(cfg: &mut TrainConfig, args: &TrainArgs) {
    if let Some(v) = args.loss {
        cfg.loss_kind = v;
    }
    if let Some(v) = args.rank {
        cfg.rank = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.embed_dim {
        cfg.embed_dim = v;
    }
    if let Some(v) = args.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = Some(v);
    }
    if let Some(v) = args.lambda_caption {
        cfg.lambda_caption = v;
    }
    if let Some(v) = args.lambda_concept {
        cfg.lambda_concept = v;
    }
    if let Some(v) = args.holdout_frac {
        cfg.holdout_frac = v;
    }
    if let Some(v) = args.max_steps {
        cfg.max_steps = Some(v);
    }
    if args.full_finetune {
        cfg.full_finetune = true;
    }
}

fn cmd_train(json: bool, run: RunConfig, args: TrainArgs) -> Result<i32> {
    let mut cfg = run.train;
    apply_train_overrides(&mut cfg, &args);
    cfg.validate()?;
    log_resolved("train", &cfg);

    let dataset = load_dataset(&args.data, ParseMode::Strict)?;
    let cache = load_cache(args.cache.as_deref())?;
    let (_state, report) = train::fit(&dataset.cards, &cfg, cache.as_ref(), &args.out)?;

    let report_path = args.out.join("report.json");
    let mut body = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::BadConfig(format!("report serialization: {e}")))?;
    body.push('\n');
    std::fs::write(&report_path, body)
        .map_err(|e| Error::io(report_path.display().to_string(), e))?;

    if json {
        println!("{}", serde_json::to_string(&report).unwrap_or_default());
    } else {
        println!("epoch  mean_loss    holdout_accuracy");
        for (i, loss) in report.epoch_mean_loss.iter().enumerate() {
            let acc = match report.holdout_accuracy.get(i) {
                Some(Some(a)) => format!("{a:.4}"),
                _ => "-".to_string(),
            };
            println!("{:>5}  {:<11.6}  {acc}", i + 1, loss);
        }
        println!(
            "trained {} steps over {} cards ({} held out); final loss {:.6}",
            report.steps, report.train_cards, report.holdout_cards, report.final_loss
        );
        if let (Some(e), Some(a)) = (report.best_epoch, report.best_holdout_accuracy) {
            println!("best epoch {} with holdout accuracy {a:.4}", e + 1);
        }
        println!(
            "checkpoints: last={} best={}",
            report.last_checkpoint, report.best_checkpoint
        );
        println!("report -> {}", report_path.display());
    }
    Ok(0)
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Twin-card JSONL: ranking items and retrieval pairs are built from it.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pre-built ranking items (JSONL).
    #[arg(long)]
    pub items: Option<PathBuf>,
    /// Pre-built retrieval pairs (JSONL).
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub recall_k: Option<usize>,
    #[arg(long, value_enum)]
    pub suite: Option<SuiteSelection>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Embedding cache file resolving `feat:` image keys.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

fn cmd_eval(json: bool, run: RunConfig, args: EvalArgs) -> Result<i32> {
    let mut cfg = run.eval;
    if let Some(v) = args.recall_k {
        cfg.recall_k = v;
    }
    if let Some(v) = args.suite {
        cfg.suite = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    log_resolved("eval", &cfg);

    if args.data.is_none() && args.items.is_none() && args.pairs.is_none() {
        return Err(Error::BadConfig(
            "nothing to evaluate: pass --data, --items, or --pairs".into(),
        ));
    }

    let state = train::load_checkpoint(&args.checkpoint)?;
    let model = state.model();
    let cache = load_cache(args.cache.as_deref())?;

    let mut items: Vec<RankingItem> = Vec::new();
    let mut pairs: Vec<RetrievalPair> = Vec::new();
    if let Some(path) = &args.items {
        items.extend(evaluate::load_ranking_items(path)?);
    }
    if let Some(path) = &args.pairs {
        pairs.extend(evaluate::load_retrieval_pairs(path)?);
    }
    if let Some(path) = &args.data {
        let dataset = load_dataset(path, ParseMode::Strict)?;
        let cards = &dataset.cards;
        let template = cfg.statement_template.as_str();
        if matches!(cfg.suite, SuiteSelection::All | SuiteSelection::Concept) {
            items.extend(evaluate::concept_pair_items(cards, template));
        }
        if matches!(cfg.suite, SuiteSelection::All | SuiteSelection::Grounding) {
            items.extend(evaluate::grounding_items(cards, cfg.grounding_k, cfg.seed)?);
        }
        if matches!(cfg.suite, SuiteSelection::All | SuiteSelection::Region) {
            items.extend(evaluate::region_items(cards, cfg.region_k, cfg.seed)?);
        }
        for card in cards {
            for side in [&card.positive, &card.negative] {
                pairs.push(RetrievalPair {
                    image: side.image.clone(),
                    text: side.caption.clone(),
                });
            }
        }
    }

    let report = evaluate::eval_report(
        &model,
        &items,
        &pairs,
        cfg.recall_k,
        cache.as_ref(),
        Some(args.checkpoint.display().to_string()),
    )?;

    if json {
        println!("{}", serde_json::to_string(&report).unwrap_or_default());
    } else {
        if let Some(acc) = report.ranking_accuracy {
            println!(
                "ranking: {} items, accuracy {acc:.4}",
                report.ranking_items
            );
        }
        if let Some(recall) = &report.recall {
            println!(
                "retrieval: {} pairs, recall@{}: image->text {:.4}, text->image {:.4}, mean {:.4}",
                report.retrieval_pairs,
                report.recall_k,
                recall.i2t,
                recall.t2i,
                report.recall_mean.unwrap_or_default()
            );
        }
    }
    Ok(0)
}

#[derive(Args)]
pub struct EmbedArgs {
    /// Twin-card JSONL to featurize.
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
    /// With a checkpoint, write model embeddings; without, raw features.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Feature dimension for raw featurization (ignored with --checkpoint).
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Embedding cache file resolving `feat:` image keys.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

fn cmd_embed(json: bool, run: RunConfig, args: EmbedArgs) -> Result<i32> {
    let dataset = load_dataset(&args.data, ParseMode::Strict)?;
    let cache = load_cache(args.cache.as_deref())?;
    let model = args
        .checkpoint
        .as_deref()
        .map(train::load_checkpoint)
        .transpose()?
        .map(|state| state.model());
    let feature_dim = match &model {
        Some(m) => m.feature_dim(),
        None => args.feature_dim.unwrap_or(run.train.feature_dim),
    };
    eprintln!(
        "resolved embed config: {{\"feature_dim\":{feature_dim},\"checkpoint\":{:?}}}",
        args.checkpoint.as_ref().map(|p| p.display().to_string())
    );

    let refs: Vec<&crate::twin_data::TwinCard> = dataset.cards.iter().collect();
    let (features, dropped) = train::featurize_cards(&refs, feature_dim, cache.as_ref())?;

    let mut lines = String::new();
    for card in &features {
        for (side, image_fv, text_fv, concept_fv) in [
            ("positive", &card.image_pos, &card.text_pos, &card.concept_pos),
            ("negative", &card.image_neg, &card.text_neg, &card.concept_neg),
        ] {
            let value = match &model {
                Some(model) => {
                    let img = model.embed_image_features(image_fv)?;
                    let txt = model.embed_text_features(text_fv)?;
                    let cpt = model.embed_text_features(concept_fv)?;
                    serde_json::json!({
                        "card": card.card_id,
                        "side": side,
                        "image_embedding": img.to_vec(),
                        "caption_embedding": txt.to_vec(),
                        "concept_embedding": cpt.to_vec(),
                    })
                }
                None => serde_json::json!({
                    "card": card.card_id,
                    "side": side,
                    "image_features": image_fv.values,
                    "caption_features": text_fv.values,
                    "concept_features": concept_fv.values,
                }),
            };
            lines.push_str(&value.to_string());
            lines.push('\n');
        }
    }
    std::fs::write(&args.out, lines)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;

    if json {
        println!(
            "{}",
            serde_json::json!({
                "cards": features.len(),
                "sides": features.len() * 2,
                "dropped_zero_feature_cards": dropped,
                "out": args.out.display().to_string(),
            })
        );
    } else {
        println!(
            "embedded {} cards ({} sides) -> {}",
            features.len(),
            features.len() * 2,
            args.out.display()
        );
        if !dropped.is_empty() {
            println!("dropped zero-feature cards: {dropped:?}");
        }
    }
    Ok(0)
}

#[derive(Args)]
pub struct InspectArgs {
    /// Twin-card JSONL to summarize.
    #[arg(long)]
    pub data: PathBuf,
    /// How many leading cards to print.
    #[arg(long, default_value_t = 3)]
    pub first: usize,
    /// Skip malformed lines instead of failing on them.
    #[arg(long)]
    pub lenient: bool,
}

fn cmd_inspect(json: bool, args: InspectArgs) -> Result<i32> {
    let mode = if args.lenient {
        ParseMode::Lenient
    } else {
        ParseMode::Strict
    };
    let dataset = load_dataset(&args.data, mode)?;
    let first: Vec<serde_json::Value> = dataset
        .cards
        .iter()
        .take(args.first)
        .map(|card| {
            serde_json::from_str(&crate::twin_data::serialize_twin_card(card))
                .unwrap_or(serde_json::Value::Null)
        })
        .collect();

    if json {
        println!(
            "{}",
            serde_json::json!({
                "stats": dataset.stats,
                "skipped_lines": dataset.skipped,
                "first_cards": first,
            })
        );
    } else {
        println!("cards: {}", dataset.stats.card_count);
        println!("mean caption words: {:.2}", dataset.stats.mean_caption_words);
        for (label, n) in &dataset.stats.per_category {
            println!("  {label}: {n}");
        }
        if dataset.skipped > 0 {
            println!("skipped malformed lines: {}", dataset.skipped);
        }
        for value in &first {
            println!("{value}");
        }
    }
    Ok(0)
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Loss to check; omit to check all four.
    #[arg(long, value_enum)]
    pub loss: Option<LossKind>,
    /// Batch size.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Random trials per loss.
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
}

/// Random unit-row embeddings for all six roles.
pub fn random_batch(n: usize, d: usize, seed: u64) -> Result<EmbeddingBatch> {
    let role = |idx: u64| -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "gradcheck-role", idx));
        let mut m = Array2::from_shape_fn((n, d), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        for mut row in m.rows_mut() {
            let norm = row.dot(&row).sqrt().max(1e-300);
            row.mapv_inplace(|v| v / norm);
        }
        m
    };
    EmbeddingBatch::new(role(0), role(1), role(2), role(3), role(4), role(5))
}

const GRADCHECK_THRESHOLD: f64 = 1e-4;

fn cmd_gradcheck(json: bool, args: GradcheckArgs) -> Result<i32> {
    if args.n == 0 || args.d == 0 {
        return Err(Error::BadConfig("n and d must be positive".into()));
    }
    if args.trials == 0 {
        return Err(Error::BadConfig("trials must be positive".into()));
    }
    let kinds: Vec<LossKind> = match args.loss {
        Some(kind) => vec![kind],
        None => vec![
            LossKind::Clip,
            LossKind::NegClip,
            LossKind::TripletClip,
            LossKind::CultureClip,
        ],
    };
    eprintln!(
        "resolved gradcheck config: {{\"n\":{},\"d\":{},\"eps\":{:e},\"trials\":{},\"seed\":{}}}",
        args.n, args.d, args.eps, args.trials, args.seed
    );
    let cfg = LossConfig::default();
    let mut results = Vec::new();
    let mut all_pass = true;
    for kind in kinds {
        let mut max_rel = 0.0f64;
        for trial in 0..args.trials {
            let batch_seed = derive_seed_indexed(args.seed, kind.as_str(), trial as u64);
            let batch = random_batch(args.n, args.d, batch_seed)?;
            max_rel = max_rel.max(grad_check(kind, &batch, &cfg, args.eps)?);
        }
        let pass = max_rel < GRADCHECK_THRESHOLD;
        all_pass &= pass;
        if !json {
            println!(
                "loss {kind}: max relative error {max_rel:.3e} ({})",
                if pass { "pass" } else { "FAIL" }
            );
        }
        results.push(serde_json::json!({
            "loss": kind.as_str(),
            "max_relative_error": max_rel,
            "pass": pass,
        }));
    }
    if json {
        println!(
            "{}",
            serde_json::json!({
                "threshold": GRADCHECK_THRESHOLD,
                "results": results,
                "pass": all_pass,
            })
        );
    } else {
        println!(
            "threshold {GRADCHECK_THRESHOLD:e}: {}",
            if all_pass { "pass" } else { "FAIL" }
        );
    }
    Ok(if all_pass { 0 } else { 1 })
}

/// Parse argv, run the chosen command, and return the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("warn"),
    )
    .try_init();
    let result = load_run_config(cli.config.as_deref()).and_then(|run_cfg| match cli.command {
        Command::Curate(args) => cmd_curate(cli.json, run_cfg, args),
        Command::Embed(args) => cmd_embed(cli.json, run_cfg, args),
        Command::Train(args) => cmd_train(cli.json, run_cfg, args),
        Command::Eval(args) => cmd_eval(cli.json, run_cfg, args),
        Command::Inspect(args) => cmd_inspect(cli.json, args),
        Command::Gradcheck(args) => cmd_gradcheck(cli.json, args),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn loss_flag_accepts_mandated_tokens() {
        for (token, kind) in [
            ("clip", LossKind::Clip),
            ("negclip", LossKind::NegClip),
            ("tripletclip", LossKind::TripletClip),
            ("cultureclip", LossKind::CultureClip),
        ] {
            let parsed =
                <LossKind as clap::ValueEnum>::from_str(token, false).expect(token);
            assert_eq!(parsed, kind);
        }
        assert!(<LossKind as clap::ValueEnum>::from_str("l2", false).is_err());
    }

    #[test]
    fn run_config_sections_are_optional_and_unknown_keys_rejected() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.eval.recall_k, 5);
        let cfg: RunConfig =
            serde_json::from_str("{\"train\": {\"seed\": 3}, \"eval\": {\"recall_k\": 2}}")
                .unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.eval.recall_k, 2);
        assert!(serde_json::from_str::<RunConfig>("{\"trian\": {}}").is_err());
        assert!(serde_json::from_str::<RunConfig>("{\"train\": {\"sed\": 1}}").is_err());
    }

    #[test]
    fn exit_codes_group_errors_by_kind() {
        assert_eq!(exit_code(&Error::BadConfig("x".into())), 2);
        assert_eq!(
            exit_code(&Error::BackendUnavailable {
                attempts: 3,
                detail: "down".into()
            }),
            3
        );
        assert_eq!(exit_code(&Error::NonFiniteLoss { step: 7 }), 5);
        assert_eq!(exit_code(&Error::DegenerateOutput { norm: 0.0 }), 5);
        assert_eq!(
            exit_code(&Error::ChecksumMismatch { path: "p".into() }),
            2
        );
    }

    #[test]
    fn random_batch_rows_are_unit_norm() {
        let batch = random_batch(4, 8, 99).unwrap();
        for role in crate::loss::Role::ALL {
            for row in batch.role(role).rows() {
                assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
            }
        }
        let again = random_batch(4, 8, 99).unwrap();
        assert_eq!(batch, again);
    }

    #[test]
    fn missing_config_file_is_io_error() {
        let err = load_run_config(Some(Path::new("/nonexistent/run.json"))).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }
}
