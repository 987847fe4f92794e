//! Statement-ranking and retrieval evaluation: multiple-choice items scored
//! by embedding similarity, Recall@K over paired corpora, and builders that
//! turn twin cards into ranking items.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::encoder::Model;
use crate::featurize::{self, EmbeddingCache};
use crate::hashing::derive_seed_indexed;
use crate::twin_data::{ConceptRecord, ImageRef, TwinCard};
use crate::{Error, Result};

/// Statement wording used when no template override is given.
pub const DEFAULT_STATEMENT_TEMPLATE: &str = "The item in the picture is {concept} in {country}.";

/// Fill `{concept}`, `{country}`, and `{category}` slots from a record.
/// Unknown braces are left alone.
pub fn statement_text(template: &str, record: &ConceptRecord) -> String {
    template
        .replace("{concept}", &record.concept)
        .replace("{country}", &record.country)
        .replace("{category}", record.category.as_str())
}

/// One multiple-choice question: an image and candidate statements, exactly
/// one of which is correct.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingItem {
    pub image: ImageRef,
    pub options: Vec<String>,
    pub correct_index: usize,
}

impl RankingItem {
    /// Well-formedness for stored benchmark items; scoring itself only needs
    /// `bounds_ok` (ties between identical options are legal at score time
    /// and resolve to the lowest index).
    pub fn validate(&self) -> Result<()> {
        self.bounds_ok()?;
        let unique: std::collections::BTreeSet<&str> =
            self.options.iter().map(String::as_str).collect();
        if unique.len() != self.options.len() {
            return Err(Error::InvariantViolation(
                "ranking item options must be pairwise distinct".into(),
            ));
        }
        Ok(())
    }

    fn bounds_ok(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::InvariantViolation(
                "ranking item needs at least two options".into(),
            ));
        }
        if self.correct_index >= self.options.len() {
            return Err(Error::InvariantViolation(format!(
                "correct_index {} out of range for {} options",
                self.correct_index,
                self.options.len()
            )));
        }
        if self.options.iter().any(|o| o.trim().is_empty()) {
            return Err(Error::InvariantViolation(
                "ranking item has an empty option".into(),
            ));
        }
        Ok(())
    }
}

fn parse_ranking_item(line: &str) -> Result<RankingItem> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::MalformedJson {
        context: "ranking item line".into(),
        detail: e.to_string(),
    })?;
    let image = value
        .get("image")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::MissingField("image".into()))?;
    let options = value
        .get("options")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::MissingField("options".into()))?
        .iter()
        .map(|v| {
            v.as_str().map(str::to_string).ok_or_else(|| {
                Error::InvariantViolation("options entries must be strings".into())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let correct_index = value
        .get("correct_index")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::MissingField("correct_index".into()))?
        as usize;
    let item = RankingItem {
        image: ImageRef::new(image)?,
        options,
        correct_index,
    };
    item.validate()?;
    Ok(item)
}

fn ranking_item_json(item: &RankingItem) -> String {
    serde_json::json!({
        "image": item.image.as_str(),
        "options": item.options,
        "correct_index": item.correct_index,
    })
    .to_string()
}

/// Load ranking items from JSONL; any bad line aborts with its line number.
pub fn load_ranking_items(path: impl AsRef<Path>) -> Result<Vec<RankingItem>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut items = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(parse_ranking_item(line).map_err(|e| {
            Error::InvariantViolation(format!("{}, line {}: {e}", path.display(), idx + 1))
        })?);
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(items)
}

pub fn save_ranking_items(path: impl AsRef<Path>, items: &[RankingItem]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for item in items {
        out.push_str(&ranking_item_json(item));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Score every option against the image and return the winning index. Exact
/// similarity ties resolve to the lowest index. Zero-feature images or
/// options are reported, not silently mis-scored.
pub fn rank_statements(
    model: &Model,
    item: &RankingItem,
    cache: Option<&EmbeddingCache>,
) -> Result<usize> {
    item.bounds_ok()?;
    let image_fv = featurize::image_features(&item.image, model.feature_dim(), cache)?;
    if image_fv.is_zero {
        return Err(Error::DegenerateItem(format!(
            "image `{}` has zero features",
            item.image.as_str()
        )));
    }
    let image_emb = model.embed_image_features(&image_fv)?;
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, option) in item.options.iter().enumerate() {
        let fv = featurize::text_features(option, model.feature_dim())?;
        if fv.is_zero {
            return Err(Error::DegenerateItem(format!(
                "option `{option}` has zero features"
            )));
        }
        let emb = model.embed_text_features(&fv)?;
        let sim = image_emb.dot(&emb);
        if sim > best_sim {
            best_sim = sim;
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of items whose top-ranked option is the correct one.
pub fn ranking_accuracy(
    model: &Model,
    items: &[RankingItem],
    cache: Option<&EmbeddingCache>,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("no ranking items".into()));
    }
    let mut hits = 0usize;
    for item in items {
        if rank_statements(model, item, cache)? == item.correct_index {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

/// The two-option items for one card: each image against its own statement
/// and the twin's. The correct index alternates so an always-ties model
/// scores chance, not 100%.
pub fn twin_choice_items(card: &TwinCard, template: &str) -> [RankingItem; 2] {
    let pos = statement_text(template, &card.positive.record);
    let neg = statement_text(template, &card.negative.record);
    [
        RankingItem {
            image: card.positive.image.clone(),
            options: vec![pos.clone(), neg.clone()],
            correct_index: 0,
        },
        RankingItem {
            image: card.negative.image.clone(),
            options: vec![pos, neg],
            correct_index: 1,
        },
    ]
}

/// Two-option twin discrimination items over a whole dataset.
pub fn concept_pair_items(cards: &[TwinCard], template: &str) -> Vec<RankingItem> {
    cards
        .iter()
        .flat_map(|c| twin_choice_items(c, template))
        .collect()
}

/// Unique records per country, keyed by concept so repeats collapse.
fn country_pools(cards: &[TwinCard]) -> BTreeMap<String, BTreeMap<String, ConceptRecord>> {
    let mut pools: BTreeMap<String, BTreeMap<String, ConceptRecord>> = BTreeMap::new();
    for card in cards {
        for rec in [&card.positive.record, &card.negative.record] {
            pools
                .entry(rec.country.clone())
                .or_default()
                .entry(rec.concept.clone())
                .or_insert_with(|| rec.clone());
        }
    }
    pools
}

/// Shuffle options and return the new position of the one at `correct`.
fn shuffle_options(
    options: Vec<String>,
    correct: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, usize) {
    let mut tagged: Vec<(String, bool)> = options
        .into_iter()
        .enumerate()
        .map(|(i, o)| (o, i == correct))
        .collect();
    tagged.shuffle(rng);
    let correct_index = tagged.iter().position(|(_, c)| *c).expect("flag survives");
    (tagged.into_iter().map(|(o, _)| o).collect(), correct_index)
}

/// Concept grounding items: for each card side, the image against k
/// statements sharing the side's country (the twin always among them).
/// Sides without enough distinct same-country concepts are skipped.
pub fn grounding_items(cards: &[TwinCard], k: usize, seed: u64) -> Result<Vec<RankingItem>> {
    if k < 2 {
        return Err(Error::BadConfig("grounding items need k >= 2".into()));
    }
    let pools = country_pools(cards);
    let mut items = Vec::new();
    let mut counter = 0u64;
    for card in cards {
        for (own, twin) in [
            (&card.positive, &card.negative),
            (&card.negative, &card.positive),
        ] {
            counter += 1;
            let pool: Vec<&ConceptRecord> = pools
                .get(&own.record.country)
                .map(|m| {
                    m.values()
                        .filter(|r| {
                            r.concept != own.record.concept && r.concept != twin.record.concept
                        })
                        .collect()
                })
                .unwrap_or_default();
            if pool.len() < k - 2 {
                log::debug!(
                    "skipping grounding item for `{}`: only {} same-country distractors",
                    own.record.concept,
                    pool.len()
                );
                continue;
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "grounding", counter));
            let picked = rand::seq::index::sample(&mut rng, pool.len(), k - 2);
            let mut options = vec![
                statement_text(DEFAULT_STATEMENT_TEMPLATE, &own.record),
                statement_text(DEFAULT_STATEMENT_TEMPLATE, &twin.record),
            ];
            options.extend(
                picked
                    .iter()
                    .map(|i| statement_text(DEFAULT_STATEMENT_TEMPLATE, pool[i])),
            );
            let (options, correct_index) = shuffle_options(options, 0, &mut rng);
            items.push(RankingItem {
                image: own.image.clone(),
                options,
                correct_index,
            });
        }
    }
    Ok(items)
}

/// Region grounding items: the concept is fixed and the country varies, so
/// the model must place the item geographically. Skipped when the corpus has
/// fewer than k countries.
pub fn region_items(cards: &[TwinCard], k: usize, seed: u64) -> Result<Vec<RankingItem>> {
    if k < 2 {
        return Err(Error::BadConfig("region items need k >= 2".into()));
    }
    let countries: Vec<String> = country_pools(cards).into_keys().collect();
    let mut items = Vec::new();
    let mut counter = 0u64;
    for card in cards {
        for own in [&card.positive, &card.negative] {
            counter += 1;
            let others: Vec<&String> = countries
                .iter()
                .filter(|c| **c != own.record.country)
                .collect();
            if others.len() < k - 1 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "region", counter));
            let picked = rand::seq::index::sample(&mut rng, others.len(), k - 1);
            let mut options = vec![statement_text(DEFAULT_STATEMENT_TEMPLATE, &own.record)];
            for i in picked.iter() {
                let mut fake = own.record.clone();
                fake.country = others[i].clone();
                options.push(statement_text(DEFAULT_STATEMENT_TEMPLATE, &fake));
            }
            let (options, correct_index) = shuffle_options(options, 0, &mut rng);
            items.push(RankingItem {
                image: own.image.clone(),
                options,
                correct_index,
            });
        }
    }
    Ok(items)
}

/// One image-text pair of a retrieval corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalPair {
    pub image: ImageRef,
    pub text: String,
}

pub fn load_retrieval_pairs(path: impl AsRef<Path>) -> Result<Vec<RetrievalPair>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::MalformedJson {
            context: format!("{}, line {}", path.display(), idx + 1),
            detail: e.to_string(),
        })?;
        let image = value
            .get("image")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::MissingField("image".into()))?;
        let caption = value
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::MissingField("text".into()))?;
        pairs.push(RetrievalPair {
            image: ImageRef::new(image)?,
            text: caption.to_string(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(pairs)
}

pub fn save_retrieval_pairs(path: impl AsRef<Path>, pairs: &[RetrievalPair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for pair in pairs {
        out.push_str(
            &serde_json::json!({"image": pair.image.as_str(), "text": pair.text}).to_string(),
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Recall@K in both retrieval directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecallReport {
    pub i2t: f64,
    pub t2i: f64,
}

impl RecallReport {
    pub fn mean(&self) -> f64 {
        0.5 * (self.i2t + self.t2i)
    }
}

/// Recall@K over a paired corpus: each query's true partner must land in the
/// top k, with ties broken toward the lower candidate index.
pub fn recall_at_k(
    model: &Model,
    pairs: &[RetrievalPair],
    k: usize,
    cache: Option<&EmbeddingCache>,
) -> Result<RecallReport> {
    if k == 0 {
        return Err(Error::BadConfig("recall needs k >= 1".into()));
    }
    if k > pairs.len() {
        return Err(Error::KExceedsCorpus {
            k,
            n: pairs.len(),
        });
    }
    let n = pairs.len();
    let mut image_embs = Vec::with_capacity(n);
    let mut text_embs = Vec::with_capacity(n);
    for pair in pairs {
        let ifv = featurize::image_features(&pair.image, model.feature_dim(), cache)?;
        if ifv.is_zero {
            return Err(Error::DegenerateItem(format!(
                "image `{}` has zero features",
                pair.image.as_str()
            )));
        }
        let tfv = featurize::text_features(&pair.text, model.feature_dim())?;
        if tfv.is_zero {
            return Err(Error::DegenerateItem(format!(
                "text `{}` has zero features",
                pair.text
            )));
        }
        image_embs.push(model.embed_image_features(&ifv)?);
        text_embs.push(model.embed_text_features(&tfv)?);
    }
    let hit = |queries: &[ndarray::Array1<f64>], candidates: &[ndarray::Array1<f64>], i: usize| {
        let true_sim = queries[i].dot(&candidates[i]);
        let mut ahead = 0usize;
        for (j, cand) in candidates.iter().enumerate() {
            if j == i {
                continue;
            }
            let sim = queries[i].dot(cand);
            if sim > true_sim || (sim == true_sim && j < i) {
                ahead += 1;
            }
        }
        ahead < k
    };
    let mut i2t_hits = 0usize;
    let mut t2i_hits = 0usize;
    for i in 0..n {
        if hit(&image_embs, &text_embs, i) {
            i2t_hits += 1;
        }
        if hit(&text_embs, &image_embs, i) {
            t2i_hits += 1;
        }
    }
    Ok(RecallReport {
        i2t: i2t_hits as f64 / n as f64,
        t2i: t2i_hits as f64 / n as f64,
    })
}

/// Combined evaluation summary, serialized as the eval command's output.
/// The headline retrieval number is the mean of the two recall directions.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint: Option<String>,
    pub ranking_items: usize,
    pub ranking_accuracy: Option<f64>,
    pub retrieval_pairs: usize,
    pub recall_k: usize,
    pub recall: Option<RecallReport>,
    pub recall_mean: Option<f64>,
}

/// Run whichever evaluations have data: ranking accuracy over items,
/// Recall@K over pairs, or both.
pub fn eval_report(
    model: &Model,
    items: &[RankingItem],
    pairs: &[RetrievalPair],
    k: usize,
    cache: Option<&EmbeddingCache>,
    checkpoint: Option<String>,
) -> Result<EvalReport> {
    if items.is_empty() && pairs.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let ranking = if items.is_empty() {
        None
    } else {
        Some(ranking_accuracy(model, items, cache)?)
    };
    let recall = if pairs.is_empty() {
        None
    } else {
        Some(recall_at_k(model, pairs, k, cache)?)
    };
    Ok(EvalReport {
        checkpoint,
        ranking_items: items.len(),
        ranking_accuracy: ranking,
        retrieval_pairs: pairs.len(),
        recall_k: k,
        recall,
        recall_mean: recall.map(|r| r.mean()),
    })
}
