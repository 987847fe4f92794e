//! Twin cards: paired cultural concepts that look alike but differ in
//! meaning, each side carrying metadata, a caption, and an image reference.
//! JSONL is the interchange format; every line is one card.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::{Error, Result};

/// The eight cultural categories a concept can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Cuisine,
    Clothing,
    AnimalPlants,
    Art,
    Architecture,
    DailyLife,
    Symbol,
    Festival,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Cuisine,
        Category::Clothing,
        Category::AnimalPlants,
        Category::Art,
        Category::Architecture,
        Category::DailyLife,
        Category::Symbol,
        Category::Festival,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Cuisine => "Cuisine",
            Category::Clothing => "Clothing",
            Category::AnimalPlants => "Animal & Plants",
            Category::Art => "Art",
            Category::Architecture => "Architecture",
            Category::DailyLife => "Daily Life",
            Category::Symbol => "Symbol",
            Category::Festival => "Festival",
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        for c in Category::ALL {
            if c.as_str() == label {
                return Ok(c);
            }
        }
        Err(Error::InvariantViolation(format!(
            "unknown category `{label}`"
        )))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reference to an image: a filesystem path, or a `feat:`-prefixed key that
/// resolves through the embedding cache (or, for 16-hex-digit keys, expands
/// deterministically on its own).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ImageRef(String);

impl ImageRef {
    pub fn new(reference: impl Into<String>) -> Result<Self> {
        let reference = reference.into();
        if reference.trim().is_empty() {
            return Err(Error::InvariantViolation(
                "image reference is empty".into(),
            ));
        }
        Ok(ImageRef(reference))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// True for references that live in feature space rather than on disk.
    pub fn is_feature_key(&self) -> bool {
        self.0.starts_with("feat:")
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Metadata for one cultural concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptRecord {
    pub concept: String,
    pub country: String,
    pub category: Category,
    pub context: String,
    pub visual_features: String,
}

/// One side of a twin card: a concept plus its caption and image.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub record: ConceptRecord,
    pub caption: String,
    pub image: ImageRef,
}

/// A twin card: visually confusable positive/negative concept sides sharing a
/// category.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinCard {
    pub id: String,
    pub positive: Triplet,
    pub negative: Triplet,
}

impl TwinCard {
    /// Validate cross-side invariants; parse_twin_card calls this, and
    /// programmatic constructors should too.
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::InvariantViolation("card id is empty".into()));
        }
        if self.positive.record.concept == self.negative.record.concept {
            return Err(Error::InvariantViolation(format!(
                "twin sides share the concept `{}`",
                self.positive.record.concept
            )));
        }
        if self.positive.record.category != self.negative.record.category {
            return Err(Error::InvariantViolation(format!(
                "twin sides disagree on category: `{}` vs `{}`",
                self.positive.record.category, self.negative.record.category
            )));
        }
        for (side, t) in [("positive", &self.positive), ("negative", &self.negative)] {
            if t.record.concept.trim().is_empty() {
                return Err(Error::InvariantViolation(format!(
                    "{side}.concept is empty"
                )));
            }
            if t.caption.trim().is_empty() {
                return Err(Error::InvariantViolation(format!(
                    "{side}.caption is empty"
                )));
            }
        }
        Ok(())
    }
}

/// How load_dataset treats bad lines: strict aborts, lenient skips and counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

fn field<'a>(obj: &'a Value, path: &str, name: &str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| {
        if path.is_empty() {
            Error::MissingField(name.to_string())
        } else {
            Error::MissingField(format!("{path}.{name}"))
        }
    })
}

fn string_field(obj: &Value, path: &str, name: &str) -> Result<String> {
    let v = field(obj, path, name)?;
    v.as_str().map(str::to_string).ok_or_else(|| {
        Error::InvariantViolation(format!("field `{path}.{name}` is not a string"))
    })
}

fn parse_triplet(obj: &Value, path: &str) -> Result<Triplet> {
    let record = ConceptRecord {
        concept: string_field(obj, path, "concept")?,
        country: string_field(obj, path, "country")?,
        category: Category::parse(&string_field(obj, path, "category")?)?,
        context: string_field(obj, path, "context")?,
        visual_features: string_field(obj, path, "visual_features")?,
    };
    let caption = string_field(obj, path, "caption")?;
    let image = ImageRef::new(string_field(obj, path, "image")?)?;
    Ok(Triplet {
        record,
        caption,
        image,
    })
}

/// Parse one JSONL line into a validated card.
pub fn parse_twin_card(line: &str) -> Result<TwinCard> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::MalformedJson {
        context: "twin card line".into(),
        detail: e.to_string(),
    })?;
    let id = string_field(&value, "", "id")?;
    let positive = parse_triplet(field(&value, "", "positive")?, "positive")?;
    let negative = parse_triplet(field(&value, "", "negative")?, "negative")?;
    let card = TwinCard {
        id,
        positive,
        negative,
    };
    card.validate()?;
    Ok(card)
}

fn triplet_json(t: &Triplet) -> Value {
    serde_json::json!({
        "concept": t.record.concept,
        "country": t.record.country,
        "category": t.record.category.as_str(),
        "context": t.record.context,
        "visual_features": t.record.visual_features,
        "caption": t.caption,
        "image": t.image.as_str(),
    })
}

/// Serialize a card to one JSONL line (no trailing newline). Field order is
/// fixed so equal cards serialize to equal bytes.
pub fn serialize_twin_card(card: &TwinCard) -> String {
    let value = serde_json::json!({
        "id": card.id,
        "positive": triplet_json(&card.positive),
        "negative": triplet_json(&card.negative),
    });
    value.to_string()
}

/// Aggregate shape of a dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DatasetStats {
    pub card_count: usize,
    pub per_category: BTreeMap<String, usize>,
    pub mean_caption_words: f64,
}

/// Count whitespace-separated words.
pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Stats over already-parsed cards. Captions are counted per side, two per
/// card.
pub fn dataset_stats(cards: &[TwinCard]) -> DatasetStats {
    let mut per_category: BTreeMap<String, usize> = BTreeMap::new();
    let mut words = 0usize;
    for card in cards {
        *per_category
            .entry(card.positive.record.category.as_str().to_string())
            .or_default() += 1;
        words += word_count(&card.positive.caption) + word_count(&card.negative.caption);
    }
    let captions = cards.len() * 2;
    DatasetStats {
        card_count: cards.len(),
        per_category,
        mean_caption_words: if captions == 0 {
            0.0
        } else {
            words as f64 / captions as f64
        },
    }
}

/// A parsed dataset plus its stats and the number of lines lenient mode
/// skipped.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub cards: Vec<TwinCard>,
    pub stats: DatasetStats,
    pub skipped: usize,
}

/// Load a JSONL dataset. Strict mode fails on the first bad line (with its
/// line number); lenient mode logs and skips. Blank lines are ignored in both
/// modes. An empty result is an error.
pub fn load_dataset(path: impl AsRef<Path>, mode: ParseMode) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut cards = Vec::new();
    let mut skipped = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_twin_card(&line) {
            Ok(card) => cards.push(card),
            Err(e) => match mode {
                ParseMode::Strict => {
                    return Err(Error::InvariantViolation(format!(
                        "{} line {}: {e}",
                        path.display(),
                        idx + 1
                    )))
                }
                ParseMode::Lenient => {
                    log::warn!("skipping {} line {}: {e}", path.display(), idx + 1);
                    skipped += 1;
                }
            },
        }
    }
    if cards.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} contains no usable cards",
            path.display()
        )));
    }
    let stats = dataset_stats(&cards);
    Ok(LoadedDataset {
        cards,
        stats,
        skipped,
    })
}

/// Write cards as JSONL, one line per card.
pub fn write_dataset(path: impl AsRef<Path>, cards: &[TwinCard]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for card in cards {
        out.push_str(&serialize_twin_card(card));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Deterministic shuffled batch index plan: a seeded permutation chunked into
/// full batches, dropping the partial tail.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::BadConfig("batch_size must be positive".into()));
    }
    if batch_size > len {
        return Err(Error::BatchTooLarge {
            requested: batch_size,
            available: len,
        });
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// Iterate shuffled batches of cards for one epoch.
pub fn batches<'a>(
    cards: &'a [TwinCard],
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<&'a TwinCard>> + 'a> {
    let plan = batch_indices(cards.len(), batch_size, seed)?;
    Ok(plan
        .into_iter()
        .map(move |idxs| idxs.into_iter().map(|i| &cards[i]).collect()))
}
