//! Dataset curation: source concepts (corpus filtering and/or generation
//! over a country-by-category grid), match each one with a visually
//! confusable twin, caption and render both sides, judge every image, and
//! keep only cards whose two sides both survive. Per-item failures are
//! counted, never fatal.

pub mod backend;
pub mod ops;
pub mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use backend::{Backend, BackendRequest, HttpBackend, JudgeProfile, MockBackend};
pub use ops::{
    bottom_up_filter, classify_candidate, generate_captions, judge_image, load_candidates,
    passes_filter, quality_filter, synthesize_image, top_down_generate, twin_match, Decision,
    JudgeScores, RawCandidate, Verdict,
};
pub use templates::TemplateId;

use crate::twin_data::{Category, ConceptRecord, ImageRef, TwinCard, Triplet};
use crate::{Error, Result};

/// Where stage 1 concepts come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    /// Filter and classify a raw candidate corpus.
    #[value(name = "bottom_up")]
    BottomUp,
    /// Generate one concept per (country, category) grid cell.
    #[value(name = "top_down")]
    TopDown,
    /// Both of the above, deduplicated by concept name.
    #[default]
    Both,
}

/// Which backend implementation serves the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

fn default_countries() -> Vec<String> {
    ["China", "Japan", "Korea", "India", "Russia"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_categories() -> Vec<String> {
    Category::ALL.iter().map(|c| c.as_str().to_string()).collect()
}

/// Settings for one curation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub source: SourceMode,
    pub countries: Vec<String>,
    pub categories: Vec<String>,
    pub captions_per_concept: usize,
    pub concurrency: usize,
    /// Transport-level attempts for the HTTP backend.
    pub retry_attempts: u32,
    pub judge_profile: JudgeProfile,
    pub backend: BackendKind,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            source: SourceMode::default(),
            countries: default_countries(),
            categories: default_categories(),
            captions_per_concept: 10,
            concurrency: 4,
            retry_attempts: 3,
            judge_profile: JudgeProfile::default(),
            backend: BackendKind::default(),
            seed: 17,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.captions_per_concept == 0 {
            return Err(Error::BadConfig("captions_per_concept must be >= 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::BadConfig("concurrency must be >= 1".into()));
        }
        if self.retry_attempts == 0 {
            return Err(Error::BadConfig("retry_attempts must be >= 1".into()));
        }
        if self.countries.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::BadConfig("countries must be non-blank".into()));
        }
        for label in &self.categories {
            Category::parse(label)
                .map_err(|e| Error::BadConfig(format!("categories: {e}")))?;
        }
        Ok(())
    }
}

/// Construct the backend the config names.
pub fn build_backend(cfg: &PipelineConfig) -> Result<Box<dyn Backend>> {
    match cfg.backend {
        BackendKind::Mock => Ok(Box::new(MockBackend::new(cfg.seed, cfg.judge_profile))),
        BackendKind::Http => Ok(Box::new(HttpBackend::from_env(cfg.retry_attempts)?)),
    }
}

/// Judged-image accounting for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub evaluated: u64,
    pub retained: u64,
    pub pass_rate: f64,
    pub mean_authenticity: f64,
    pub mean_consistency: f64,
    pub mean_fidelity: f64,
}

impl CategorySummary {
    /// Build from raw counts. `score_sums` are summed over retained sides
    /// only, in dimension order (authenticity, consistency, fidelity).
    pub fn from_counts(evaluated: u64, retained: u64, score_sums: [u64; 3]) -> Self {
        let rate = if evaluated == 0 {
            0.0
        } else {
            retained as f64 / evaluated as f64
        };
        let mean = |sum: u64| {
            if retained == 0 {
                0.0
            } else {
                sum as f64 / retained as f64
            }
        };
        CategorySummary {
            evaluated,
            retained,
            pass_rate: rate,
            mean_authenticity: mean(score_sums[0]),
            mean_consistency: mean(score_sums[1]),
            mean_fidelity: mean(score_sums[2]),
        }
    }
}

/// Why items dropped out along the way, one counter per failure class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    /// Candidates the relevance filter discarded (including unparseable
    /// verdicts, which discard by policy).
    pub filtered_out: u64,
    /// Concepts dropped because the name was already sourced.
    pub duplicate_concepts: u64,
    pub classify_failures: u64,
    pub generation_failures: u64,
    pub twin_failures: u64,
    pub caption_failures: u64,
    pub image_failures: u64,
    pub judge_failures: u64,
    /// Backend-unreachable errors, counted separately so callers can tell
    /// an outage from ordinary attrition.
    pub backend_failures: u64,
}

/// Run-level accounting: stage totals, per-category quality numbers, and
/// skip counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub candidates_seen: u64,
    pub concepts_sourced: u64,
    pub pairs_matched: u64,
    pub images_evaluated: u64,
    pub images_retained: u64,
    pub cards_emitted: u64,
    pub per_category: BTreeMap<String, CategorySummary>,
    pub skips: SkipCounts,
}

/// Everything one pipeline run produces.
#[derive(Debug, Clone)]
pub struct CurateOutput {
    pub cards: Vec<TwinCard>,
    pub summary: FilterSummary,
}

impl CurateOutput {
    /// Write cards as JSONL at `cards_path` and the summary as pretty JSON
    /// next to it (`<stem>.summary.json`). Returns the summary path.
    pub fn write(&self, cards_path: impl AsRef<Path>) -> Result<PathBuf> {
        let cards_path = cards_path.as_ref();
        crate::twin_data::write_dataset(cards_path, &self.cards)?;
        let stem = cards_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("cards");
        let summary_path = cards_path.with_file_name(format!("{stem}.summary.json"));
        let mut body = serde_json::to_string_pretty(&self.summary)
            .map_err(|e| Error::BadConfig(format!("summary serialization: {e}")))?;
        body.push('\n');
        std::fs::write(&summary_path, body)
            .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
        Ok(summary_path)
    }
}

/// One judged survivor on one side of a pair.
struct Survivor {
    caption: String,
    image: ImageRef,
    scores: JudgeScores,
}

/// Everything stage 3 produced for one matched pair.
#[derive(Default)]
struct PairOutcome {
    cards: Vec<TwinCard>,
    evaluated: u64,
    score_rows: Vec<JudgeScores>,
    skips: SkipCounts,
}

fn note_backend_or(skips: &mut SkipCounts, err: &Error, bucket: fn(&mut SkipCounts) -> &mut u64) {
    if matches!(err, Error::BackendUnavailable { .. }) {
        skips.backend_failures += 1;
    } else {
        *bucket(skips) += 1;
    }
}

/// Caption, render, and judge both sides of one pair, then zip the
/// survivors into cards. `pair_idx` is the pair's position among matched
/// pairs and fixes the card ids.
fn process_pair(
    pair_idx: usize,
    positive: &ConceptRecord,
    negative: &ConceptRecord,
    cfg: &PipelineConfig,
    backend: &dyn Backend,
) -> PairOutcome {
    let mut out = PairOutcome::default();

    let mut side_survivors: [Vec<Survivor>; 2] = [Vec::new(), Vec::new()];
    for (slot, record) in [positive, negative].into_iter().enumerate() {
        let captions = match ops::generate_captions(record, cfg.captions_per_concept, backend) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("captions failed for `{}`: {e}", record.concept);
                note_backend_or(&mut out.skips, &e, |s| &mut s.caption_failures);
                return out;
            }
        };
        for caption in captions {
            let image = match ops::synthesize_image(&caption, backend) {
                Ok(image) => image,
                Err(e) => {
                    log::warn!("image synthesis failed for `{}`: {e}", record.concept);
                    note_backend_or(&mut out.skips, &e, |s| &mut s.image_failures);
                    continue;
                }
            };
            let scores = match ops::judge_image(&image, record, backend) {
                Ok(scores) => scores,
                Err(e) => {
                    log::warn!("judging failed for `{}`: {e}", record.concept);
                    note_backend_or(&mut out.skips, &e, |s| &mut s.judge_failures);
                    continue;
                }
            };
            out.evaluated += 1;
            if quality_filter(scores) == Verdict::Pass {
                side_survivors[slot].push(Survivor {
                    caption,
                    image,
                    scores,
                });
            }
        }
    }

    let [pos_side, neg_side] = side_survivors;
    for (cap_idx, (p, n)) in pos_side.into_iter().zip(neg_side).enumerate() {
        let card = TwinCard {
            id: format!("tc-{pair_idx:04}-{cap_idx:02}"),
            positive: Triplet {
                record: positive.clone(),
                caption: p.caption,
                image: p.image,
            },
            negative: Triplet {
                record: negative.clone(),
                caption: n.caption,
                image: n.image,
            },
        };
        if let Err(e) = card.validate() {
            log::warn!("dropping invalid card {}: {e}", card.id);
            out.skips.twin_failures += 1;
            continue;
        }
        out.score_rows.push(p.scores);
        out.score_rows.push(n.scores);
        out.cards.push(card);
    }
    out
}

/// Run the full pipeline: source concepts, twin-match them, then process
/// pairs concurrently. Per-item failures are counted in the summary; only
/// configuration problems and missing sources abort.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    candidates: &[RawCandidate],
    backend: &dyn Backend,
) -> Result<CurateOutput> {
    cfg.validate()?;
    let use_bottom_up = matches!(cfg.source, SourceMode::BottomUp | SourceMode::Both);
    let use_top_down = matches!(cfg.source, SourceMode::TopDown | SourceMode::Both);
    let grid_size = cfg.countries.len() * cfg.categories.len();
    if (!use_bottom_up || candidates.is_empty()) && (!use_top_down || grid_size == 0) {
        return Err(Error::BadConfig(
            "no concept sources: provide candidates or a country/category grid".into(),
        ));
    }

    let mut skips = SkipCounts::default();
    let mut sourced: Vec<ConceptRecord> = Vec::new();
    let mut seen_names: BTreeSet<String> = BTreeSet::new();
    let mut candidates_seen = 0u64;

    if use_bottom_up {
        for candidate in candidates {
            candidates_seen += 1;
            match ops::bottom_up_filter(candidate, backend) {
                Ok(Decision::Discard) => skips.filtered_out += 1,
                Ok(Decision::Keep) => match ops::classify_candidate(candidate, backend) {
                    Ok(record) => {
                        if seen_names.insert(record.concept.to_lowercase()) {
                            sourced.push(record);
                        } else {
                            skips.duplicate_concepts += 1;
                        }
                    }
                    Err(e) => {
                        log::warn!("classification failed for `{}`: {e}", candidate.title);
                        note_backend_or(&mut skips, &e, |s| &mut s.classify_failures);
                    }
                },
                Err(e) => {
                    log::warn!("filter failed for `{}`: {e}", candidate.title);
                    note_backend_or(&mut skips, &e, |s| &mut s.classify_failures);
                }
            }
        }
    }

    if use_top_down {
        for country in &cfg.countries {
            for category in &cfg.categories {
                match ops::top_down_generate(country, category, backend) {
                    Ok(record) => {
                        if seen_names.insert(record.concept.to_lowercase()) {
                            sourced.push(record);
                        } else {
                            skips.duplicate_concepts += 1;
                        }
                    }
                    Err(e) => {
                        log::debug!("generation failed for {country}/{category}: {e}");
                        note_backend_or(&mut skips, &e, |s| &mut s.generation_failures);
                    }
                }
            }
        }
    }

    let concepts_sourced = sourced.len() as u64;

    let mut pairs: Vec<(ConceptRecord, ConceptRecord)> = Vec::new();
    for record in sourced {
        match ops::twin_match(&record, backend) {
            Ok(twin) => pairs.push((record, twin)),
            Err(e) => {
                log::warn!("twin match failed for `{}`: {e}", record.concept);
                note_backend_or(&mut skips, &e, |s| &mut s.twin_failures);
            }
        }
    }
    let pairs_matched = pairs.len() as u64;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency)
        .build()
        .map_err(|e| Error::BadConfig(format!("thread pool: {e}")))?;
    let outcomes: Vec<(Category, PairOutcome)> = pool.install(|| {
        pairs
            .par_iter()
            .enumerate()
            .map(|(idx, (positive, negative))| {
                (
                    positive.category,
                    process_pair(idx, positive, negative, cfg, backend),
                )
            })
            .collect()
    });

    let mut cards = Vec::new();
    let mut per_category_raw: BTreeMap<String, (u64, u64, [u64; 3])> = BTreeMap::new();
    let mut images_evaluated = 0u64;
    let mut images_retained = 0u64;
    for (category, outcome) in outcomes {
        let entry = per_category_raw
            .entry(category.as_str().to_string())
            .or_default();
        entry.0 += outcome.evaluated;
        entry.1 += outcome.score_rows.len() as u64;
        for scores in &outcome.score_rows {
            entry.2[0] += u64::from(scores.authenticity);
            entry.2[1] += u64::from(scores.consistency);
            entry.2[2] += u64::from(scores.fidelity);
        }
        images_evaluated += outcome.evaluated;
        images_retained += outcome.score_rows.len() as u64;
        merge_skips(&mut skips, &outcome.skips);
        cards.extend(outcome.cards);
    }
    cards.sort_by(|a, b| a.id.cmp(&b.id));

    let per_category = per_category_raw
        .into_iter()
        .map(|(label, (evaluated, retained, sums))| {
            (label, CategorySummary::from_counts(evaluated, retained, sums))
        })
        .collect();

    let summary = FilterSummary {
        candidates_seen,
        concepts_sourced,
        pairs_matched,
        images_evaluated,
        images_retained,
        cards_emitted: cards.len() as u64,
        per_category,
        skips,
    };
    Ok(CurateOutput { cards, summary })
}

fn merge_skips(into: &mut SkipCounts, from: &SkipCounts) {
    into.filtered_out += from.filtered_out;
    into.duplicate_concepts += from.duplicate_concepts;
    into.classify_failures += from.classify_failures;
    into.generation_failures += from.generation_failures;
    into.twin_failures += from.twin_failures;
    into.caption_failures += from.caption_failures;
    into.image_failures += from.image_failures;
    into.judge_failures += from.judge_failures;
    into.backend_failures += from.backend_failures;
}
