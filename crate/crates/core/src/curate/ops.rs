//! The individual curation operations: candidate filtering and
//! classification, concept generation, twin matching, caption generation,
//! image synthesis, and judging. Each op fills a template, calls the
//! backend, and parses the reply; retry-on-bad-reply lives here only where
//! the pipeline contract says so.

use std::io::BufRead;
use std::path::Path;

use serde_json::Value;

use super::backend::{Backend, BackendRequest};
use super::templates::{fill, TemplateId};
use crate::twin_data::{Category, ConceptRecord, ImageRef};
use crate::{Error, Result};

/// A raw bottom-up candidate: a titled definition, optionally with a usage
/// caption and image, prior to any filtering.
#[derive(Debug, Clone)]
pub struct RawCandidate {
    pub title: String,
    pub definition: String,
    pub caption: String,
    pub image_url: String,
}

/// Load raw candidates from JSONL: `{"title", "definition", "caption"?,
/// "image_url"?}` per line. Blank lines are skipped; malformed lines error
/// with their line number.
pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<RawCandidate>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let context = format!("{display}, line {}", idx + 1);
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedJson {
            context: context.clone(),
            detail: e.to_string(),
        })?;
        let field = |name: &str| -> Result<String> {
            value
                .get(name)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| Error::MissingField(format!("{name} ({context})")))
        };
        let optional = |name: &str| {
            value
                .get(name)
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string()
        };
        out.push(RawCandidate {
            title: field("title")?,
            definition: field("definition")?,
            caption: optional("caption"),
            image_url: optional("image_url"),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(display));
    }
    Ok(out)
}

/// Outcome of the bottom-up relevance filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Discard,
}

/// Ask the backend whether a raw candidate clearly belongs to the taxonomy.
/// "A" discards, "B" keeps, and anything unparseable discards with a
/// warning: uncertain inclusion is treated as exclusion.
pub fn bottom_up_filter(candidate: &RawCandidate, backend: &dyn Backend) -> Result<Decision> {
    let prompt = fill(
        TemplateId::BottomUpFilter.text(),
        &[
            ("title", &candidate.title),
            ("definition", &candidate.definition),
        ],
    );
    let reply = backend.generate_text(&BackendRequest::new(TemplateId::BottomUpFilter, prompt))?;
    match parse_keep_letter(&reply) {
        Some('B') => Ok(Decision::Keep),
        Some(_) => Ok(Decision::Discard),
        None => {
            log::warn!(
                "unparseable filter reply for `{}`, discarding: {reply:?}",
                candidate.title
            );
            Ok(Decision::Discard)
        }
    }
}

/// Extract the A/B choice: a JSON object with a `concept_type` field wins,
/// otherwise the first standalone `A` or `B` token.
fn parse_keep_letter(reply: &str) -> Option<char> {
    if let Some(start) = reply.find('{') {
        if let Some(end) = reply.rfind('}') {
            if end > start {
                if let Ok(value) = serde_json::from_str::<Value>(&reply[start..=end]) {
                    if let Some(s) = value.get("concept_type").and_then(Value::as_str) {
                        let t = s.trim();
                        if t == "A" || t == "B" {
                            return t.chars().next();
                        }
                    }
                }
            }
        }
    }
    reply
        .split(|c: char| !c.is_ascii_alphanumeric())
        .find(|tok| *tok == "A" || *tok == "B")
        .and_then(|tok| tok.chars().next())
}

/// Classify a kept candidate into a full concept record. A reply missing a
/// field or naming a category outside the taxonomy is retried once, then
/// fails with ParseFailure.
pub fn classify_candidate(
    candidate: &RawCandidate,
    backend: &dyn Backend,
) -> Result<ConceptRecord> {
    let prompt = fill(
        TemplateId::BottomUpClassify.text(),
        &[
            ("concept", &candidate.title),
            ("definition", &candidate.definition),
            ("caption", &candidate.caption),
            ("image_url", &candidate.image_url),
        ],
    );
    let request = BackendRequest::new(TemplateId::BottomUpClassify, prompt);
    let mut last = None;
    for _ in 0..2 {
        let reply = backend.generate_text(&request)?;
        match parse_classified(&candidate.title, &reply) {
            Ok(record) => return Ok(record),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("two attempts always record an error"))
}

fn parse_classified(title: &str, reply: &str) -> Result<ConceptRecord> {
    let country = require_labeled(reply, "Country:", "classify")?;
    let category_label = require_labeled(reply, "Category:", "classify")?;
    let category = Category::parse(&category_label).map_err(|_| Error::ParseFailure {
        stage: "classify".into(),
        detail: format!("category `{category_label}` is outside the taxonomy"),
    })?;
    Ok(ConceptRecord {
        concept: title.to_string(),
        country,
        category,
        context: require_labeled(reply, "Context:", "classify")?,
        visual_features: require_labeled(reply, "Key Visual Features:", "classify")?,
    })
}

/// Generate a concept record for a (country, category) cell. The category
/// label must name one of the eight taxonomy categories. A malformed reply
/// is retried once, then fails with ParseFailure.
pub fn top_down_generate(
    country: &str,
    category_label: &str,
    backend: &dyn Backend,
) -> Result<ConceptRecord> {
    let category = Category::parse(category_label)?;
    let prompt = fill(
        TemplateId::TopDownGenerate.text(),
        &[("country", country), ("category", category.as_str())],
    );
    let request = BackendRequest::new(TemplateId::TopDownGenerate, prompt);
    let mut last = None;
    for _ in 0..2 {
        let reply = backend.generate_text(&request)?;
        match parse_generated(country, category, &reply) {
            Ok(record) => return Ok(record),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("two attempts always record an error"))
}

fn parse_generated(country: &str, category: Category, reply: &str) -> Result<ConceptRecord> {
    Ok(ConceptRecord {
        concept: require_labeled(reply, "Concept:", "top-down")?,
        country: country.to_string(),
        category,
        context: require_labeled(reply, "Context:", "top-down")?,
        visual_features: require_labeled(reply, "Key Visual Features:", "top-down")?,
    })
}

/// Ask the backend for a visually confusable counterpart of `record`. The
/// twin must keep the category and change the name; a reply that breaks
/// either rule (or fails to parse) is retried once, then the error sticks.
pub fn twin_match(record: &ConceptRecord, backend: &dyn Backend) -> Result<ConceptRecord> {
    let prompt = fill(
        TemplateId::TwinMatch.text(),
        &[
            ("category", record.category.as_str()),
            ("concept", &record.concept),
            ("context", &record.context),
            ("visual_features", &record.visual_features),
        ],
    );
    let request = BackendRequest::new(TemplateId::TwinMatch, prompt);
    let mut last = None;
    for _ in 0..2 {
        let reply = backend.generate_text(&request)?;
        match parse_twin(record, &reply) {
            Ok(twin) => return Ok(twin),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("two attempts always record an error"))
}

fn parse_twin(record: &ConceptRecord, reply: &str) -> Result<ConceptRecord> {
    let concept = require_labeled(reply, "New Concept:", "twin")?;
    if concept.to_lowercase() == record.concept.to_lowercase() {
        return Err(Error::InvalidTwin {
            concept: record.concept.clone(),
            detail: "twin repeats the original concept name".into(),
        });
    }
    if let Some(drift) = labeled(reply, "New Category:") {
        if drift != record.category.as_str() {
            return Err(Error::InvalidTwin {
                concept: record.concept.clone(),
                detail: format!(
                    "twin drifted to category `{drift}` from `{}`",
                    record.category
                ),
            });
        }
    }
    Ok(ConceptRecord {
        concept,
        country: require_labeled(reply, "New Country:", "twin")?,
        category: record.category,
        context: require_labeled(reply, "New Context:", "twin")?,
        visual_features: require_labeled(reply, "New Key Visual Features:", "twin")?,
    })
}

/// Generate `k` scene-varied captions for a concept. Duplicates collapse
/// with a warning; fewer than ⌈k/2⌉ usable captions is a ParseFailure.
pub fn generate_captions(
    record: &ConceptRecord,
    k: usize,
    backend: &dyn Backend,
) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::BadConfig("captions_per_concept must be >= 1".into()));
    }
    let count = k.to_string();
    let prompt = fill(
        TemplateId::CaptionGeneration.text(),
        &[
            ("count", count.as_str()),
            ("concept", &record.concept),
            ("context", &record.context),
            ("visual_features", &record.visual_features),
        ],
    );
    let reply =
        backend.generate_text(&BackendRequest::new(TemplateId::CaptionGeneration, prompt))?;
    let mut captions = parse_numbered_lines(&reply);
    captions.truncate(k);
    let before = captions.len();
    let mut seen = std::collections::BTreeSet::new();
    captions.retain(|c| seen.insert(c.clone()));
    if captions.len() < before {
        log::warn!(
            "{} duplicate captions collapsed for `{}`",
            before - captions.len(),
            record.concept
        );
    }
    let minimum = k.div_ceil(2);
    if captions.len() < minimum {
        return Err(Error::ParseFailure {
            stage: "captions".into(),
            detail: format!(
                "only {} usable captions for `{}`, need at least {minimum}",
                captions.len(),
                record.concept
            ),
        });
    }
    Ok(captions)
}

/// Pull the texts out of `N. text` lines, in order, dropping empties.
fn parse_numbered_lines(reply: &str) -> Vec<String> {
    reply
        .lines()
        .filter_map(|line| {
            let trimmed = line.trim();
            let digits = trimmed.chars().take_while(char::is_ascii_digit).count();
            if digits == 0 {
                return None;
            }
            let rest = trimmed[digits..].strip_prefix('.')?.trim();
            (!rest.is_empty()).then(|| rest.to_string())
        })
        .collect()
}

/// Turn a caption into a stored image reference via the backend.
pub fn synthesize_image(caption: &str, backend: &dyn Backend) -> Result<ImageRef> {
    if caption.trim().is_empty() {
        return Err(Error::BadConfig("caption is empty".into()));
    }
    ImageRef::new(backend.generate_image(caption)?)
}

/// Scores along the three judged dimensions, each 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JudgeScores {
    pub authenticity: u8,
    pub consistency: u8,
    pub fidelity: u8,
}

impl JudgeScores {
    pub fn new(authenticity: u8, consistency: u8, fidelity: u8) -> Result<Self> {
        let s = JudgeScores {
            authenticity,
            consistency,
            fidelity,
        };
        for v in s.as_array() {
            if !(1..=5).contains(&v) {
                return Err(Error::InvariantViolation(format!(
                    "judge score {v} outside 1..=5"
                )));
            }
        }
        Ok(s)
    }

    pub fn as_array(self) -> [u8; 3] {
        [self.authenticity, self.consistency, self.fidelity]
    }

    pub fn mean(self) -> f64 {
        f64::from(u16::from(self.authenticity)
            + u16::from(self.consistency)
            + u16::from(self.fidelity))
            / 3.0
    }
}

/// Score one image along all three dimensions with one template call each.
pub fn judge_image(
    image: &ImageRef,
    record: &ConceptRecord,
    backend: &dyn Backend,
) -> Result<JudgeScores> {
    let one = |template: TemplateId| -> Result<u8> {
        let prompt = fill(
            template.text(),
            &[
                ("concept", record.concept.as_str()),
                ("context", record.context.as_str()),
                ("image", image.as_str()),
            ],
        );
        let request = BackendRequest::new(template, prompt).with_attachment(image.as_str());
        parse_score(&backend.generate_text(&request)?)
    };
    JudgeScores::new(
        one(TemplateId::JudgeAuthenticity)?,
        one(TemplateId::JudgeConsistency)?,
        one(TemplateId::JudgeFidelity)?,
    )
}

/// First standalone integer in 1..=5 anywhere in the reply; anything else is
/// a ScoreParseFailure. Lenient on surrounding prose because live models
/// drift from "output only the score".
pub fn parse_score(reply: &str) -> Result<u8> {
    for token in reply.split(|c: char| !c.is_ascii_digit()) {
        if token.is_empty() {
            continue;
        }
        if let Ok(v) = token.parse::<u8>() {
            if (1..=5).contains(&v) {
                return Ok(v);
            }
        }
    }
    Err(Error::ScoreParseFailure(reply.to_string()))
}

/// Whether a judged image survives quality filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Reject,
}

/// Reject when any dimension bottoms out at 1 or the mean falls below 3;
/// a mean of exactly 3 passes.
pub fn quality_filter(scores: JudgeScores) -> Verdict {
    if scores.as_array().contains(&1) || scores.mean() < 3.0 {
        Verdict::Reject
    } else {
        Verdict::Pass
    }
}

/// A short form used in a few summaries and tests.
pub fn passes_filter(scores: JudgeScores) -> bool {
    quality_filter(scores) == Verdict::Pass
}

fn labeled(reply: &str, label: &str) -> Option<String> {
    reply.lines().find_map(|line| {
        line.trim()
            .strip_prefix(label)
            .map(|rest| rest.trim().to_string())
    })
}

fn require_labeled(reply: &str, label: &str, stage: &str) -> Result<String> {
    match labeled(reply, label) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::ParseFailure {
            stage: stage.into(),
            detail: format!("reply lacks `{label}` line"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curate::backend::{JudgeProfile, MockBackend};
    use std::io::Write;
    use std::sync::Mutex;

    /// Test double that returns canned replies in order, then repeats the
    /// last one. Records how many calls it served.
    struct ScriptedBackend {
        replies: Mutex<Vec<String>>,
        served: Mutex<usize>,
    }

    impl ScriptedBackend {
        fn new(replies: &[&str]) -> Self {
            ScriptedBackend {
                replies: Mutex::new(replies.iter().map(|s| s.to_string()).collect()),
                served: Mutex::new(0),
            }
        }

        fn calls(&self) -> usize {
            *self.served.lock().unwrap()
        }
    }

    impl Backend for ScriptedBackend {
        fn generate_text(&self, _request: &BackendRequest) -> Result<String> {
            let mut served = self.served.lock().unwrap();
            let replies = self.replies.lock().unwrap();
            let idx = (*served).min(replies.len() - 1);
            *served += 1;
            Ok(replies[idx].clone())
        }

        fn generate_image(&self, caption: &str) -> Result<String> {
            Ok(format!("feat:{:016x}", crate::hashing::fnv1a_str(caption)))
        }
    }

    fn mock() -> MockBackend {
        MockBackend::new(17, JudgeProfile::Default)
    }

    fn candidate(title: &str) -> RawCandidate {
        RawCandidate {
            title: title.into(),
            definition: "a definition".into(),
            caption: "a caption".into(),
            image_url: String::new(),
        }
    }

    fn erhu() -> ConceptRecord {
        ConceptRecord {
            concept: "Erhu".into(),
            country: "China".into(),
            category: Category::Art,
            context: "Two-stringed bowed instrument.".into(),
            visual_features: "Two strings, horsehair bow".into(),
        }
    }

    #[test]
    fn filter_parses_json_and_bare_letters() {
        let keep = ScriptedBackend::new(&["{\"concept_type\": \"B\"}"]);
        assert_eq!(
            bottom_up_filter(&candidate("x"), &keep).unwrap(),
            Decision::Keep
        );
        let drop = ScriptedBackend::new(&["A"]);
        assert_eq!(
            bottom_up_filter(&candidate("x"), &drop).unwrap(),
            Decision::Discard
        );
        let bare = ScriptedBackend::new(&["the answer is B."]);
        assert_eq!(
            bottom_up_filter(&candidate("x"), &bare).unwrap(),
            Decision::Keep
        );
    }

    #[test]
    fn unparseable_filter_reply_discards() {
        let vague = ScriptedBackend::new(&["maybe"]);
        assert_eq!(
            bottom_up_filter(&candidate("x"), &vague).unwrap(),
            Decision::Discard
        );
    }

    #[test]
    fn classify_known_concept_round_trips() {
        let record = classify_candidate(&candidate("Kimono"), &mock()).unwrap();
        assert_eq!(record.concept, "Kimono");
        assert_eq!(record.country, "Japan");
        assert_eq!(record.category, Category::Clothing);
        assert!(!record.visual_features.is_empty());
    }

    #[test]
    fn classify_bad_category_retries_then_fails() {
        let b = ScriptedBackend::new(&[
            "Country: X\nCategory: Miscellaneous\nContext: c\nKey Visual Features: v",
        ]);
        let err = classify_candidate(&candidate("Thing"), &b).unwrap_err();
        assert!(matches!(err, Error::ParseFailure { .. }), "{err}");
        assert_eq!(b.calls(), 2, "one retry expected");
    }

    #[test]
    fn classify_recovers_on_retry() {
        let b = ScriptedBackend::new(&[
            "Country: X\nCategory: Miscellaneous\nContext: c\nKey Visual Features: v",
            "Country: China\nCategory: Art\nContext: c\nKey Visual Features: v",
        ]);
        let record = classify_candidate(&candidate("Thing"), &b).unwrap();
        assert_eq!(record.category, Category::Art);
        assert_eq!(b.calls(), 2);
    }

    #[test]
    fn top_down_mock_china_cuisine_is_mantou() {
        let record = top_down_generate("China", "Cuisine", &mock()).unwrap();
        assert_eq!(record.concept, "Mantou");
        assert_eq!(record.country, "China");
        assert_eq!(record.category, Category::Cuisine);
    }

    #[test]
    fn top_down_rejects_category_outside_taxonomy() {
        let err = top_down_generate("China", "Music", &mock()).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)), "{err}");
    }

    #[test]
    fn top_down_missing_field_retries_then_fails() {
        let b = ScriptedBackend::new(&["Concept: X\nContext: no features here"]);
        let err = top_down_generate("China", "Cuisine", &b).unwrap_err();
        assert!(matches!(err, Error::ParseFailure { .. }), "{err}");
        assert_eq!(b.calls(), 2);
    }

    #[test]
    fn twin_mock_erhu_is_guzheng() {
        let twin = twin_match(&erhu(), &mock()).unwrap();
        assert_eq!(twin.concept, "Guzheng");
        assert_eq!(twin.category, Category::Art);
        assert_ne!(twin.concept, erhu().concept);
    }

    #[test]
    fn twin_same_name_is_invalid_after_retry() {
        let b = ScriptedBackend::new(&[
            "New Concept: Erhu\nNew Country: China\nNew Context: c\nNew Key Visual Features: v",
        ]);
        let err = twin_match(&erhu(), &b).unwrap_err();
        assert!(matches!(err, Error::InvalidTwin { .. }), "{err}");
        assert_eq!(b.calls(), 2);
    }

    #[test]
    fn twin_category_drift_is_invalid() {
        let b = ScriptedBackend::new(&[
            "New Concept: Holi\nNew Country: India\nNew Context: c\nNew Key Visual Features: v\nNew Category: Festival",
        ]);
        let err = twin_match(&erhu(), &b).unwrap_err();
        assert!(matches!(err, Error::InvalidTwin { .. }), "{err}");
    }

    #[test]
    fn twin_redundant_same_category_line_is_fine() {
        let b = ScriptedBackend::new(&[
            "New Concept: Guzheng\nNew Country: China\nNew Context: c\nNew Key Visual Features: v\nNew Category: Art",
        ]);
        assert_eq!(twin_match(&erhu(), &b).unwrap().concept, "Guzheng");
    }

    #[test]
    fn twin_recovers_on_retry() {
        let b = ScriptedBackend::new(&[
            "New Concept: Erhu\nNew Country: China\nNew Context: c\nNew Key Visual Features: v",
            "New Concept: Guzheng\nNew Country: China\nNew Context: c\nNew Key Visual Features: v",
        ]);
        assert_eq!(twin_match(&erhu(), &b).unwrap().concept, "Guzheng");
        assert_eq!(b.calls(), 2);
    }

    #[test]
    fn captions_mock_run_yields_k_distinct() {
        let captions = generate_captions(&erhu(), 10, &mock()).unwrap();
        assert_eq!(captions.len(), 10);
        let mut unique = captions.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 10);
        for c in &captions {
            assert!(!c.trim().is_empty());
        }
    }

    #[test]
    fn xiaolongbao_captions_mention_bamboo() {
        let record = ConceptRecord {
            concept: "Xiaolongbao".into(),
            country: "China".into(),
            category: Category::Cuisine,
            context: "Steamed soup dumplings.".into(),
            visual_features: "Delicate thin wrappers, steamed in bamboo baskets".into(),
        };
        for caption in generate_captions(&record, 10, &mock()).unwrap() {
            assert!(caption.contains("bamboo"), "{caption}");
        }
    }

    #[test]
    fn duplicate_captions_collapse_with_warning() {
        let mut lines: Vec<String> = (1..=10).map(|i| format!("{i}. caption {i}")).collect();
        lines[7] = "8. caption 3".into();
        lines[9] = "10. caption 5".into();
        let b = ScriptedBackend::new(&[&lines.join("\n")]);
        let captions = generate_captions(&erhu(), 10, &b).unwrap();
        assert_eq!(captions.len(), 8);
    }

    #[test]
    fn too_few_captions_is_parse_failure() {
        let b = ScriptedBackend::new(&["1. only one\n2. and two\nprose, not numbered"]);
        let err = generate_captions(&erhu(), 10, &b).unwrap_err();
        assert!(matches!(err, Error::ParseFailure { .. }), "{err}");
    }

    #[test]
    fn zero_captions_requested_is_bad_config() {
        let err = generate_captions(&erhu(), 0, &mock()).unwrap_err();
        assert!(matches!(err, Error::BadConfig(_)));
    }

    #[test]
    fn synthesized_images_are_deterministic() {
        let a = synthesize_image("a mantou on a plate", &mock()).unwrap();
        let b = synthesize_image("a mantou on a plate", &mock()).unwrap();
        assert_eq!(a, b);
        assert!(a.is_feature_key());
    }

    #[test]
    fn judge_mock_default_is_all_fours() {
        let image = ImageRef::new("feat:0011223344556677").unwrap();
        let scores = judge_image(&image, &erhu(), &mock()).unwrap();
        assert_eq!(scores, JudgeScores::new(4, 4, 4).unwrap());
    }

    #[test]
    fn judge_absurd_image_reference_fails_authenticity() {
        let image = ImageRef::new("render of a person playing Erhu with three hands in mid air")
            .unwrap();
        let scores = judge_image(&image, &erhu(), &mock()).unwrap();
        assert_eq!(scores.authenticity, 1);
        assert_eq!(scores.consistency, 4);
    }

    #[test]
    fn score_six_is_a_parse_failure() {
        assert!(matches!(
            parse_score("6"),
            Err(Error::ScoreParseFailure(_))
        ));
        let b = ScriptedBackend::new(&["6"]);
        let image = ImageRef::new("feat:0011223344556677").unwrap();
        let err = judge_image(&image, &erhu(), &b).unwrap_err();
        assert!(matches!(err, Error::ScoreParseFailure(_)), "{err}");
    }

    #[test]
    fn score_parsing_finds_first_in_range_integer() {
        assert_eq!(parse_score("4").unwrap(), 4);
        assert_eq!(parse_score("Output: 3").unwrap(), 3);
        assert_eq!(parse_score("score 6, adjusted to 5").unwrap(), 5);
        assert!(parse_score("no digits").is_err());
        assert!(parse_score("0").is_err());
    }

    #[test]
    fn quality_rule_boundary_cases() {
        let reject_low = JudgeScores::new(1, 5, 5).unwrap();
        assert_eq!(quality_filter(reject_low), Verdict::Reject);
        let boundary = JudgeScores::new(3, 3, 3).unwrap();
        assert_eq!(quality_filter(boundary), Verdict::Pass);
        let low_mean = JudgeScores::new(2, 3, 3).unwrap();
        assert_eq!(quality_filter(low_mean), Verdict::Reject);
        // Mean exactly 3 passes even when individual scores dip to 2; only
        // a hard 1 or a mean strictly below 3 rejects.
        let uneven_boundary = JudgeScores::new(2, 2, 5).unwrap();
        assert_eq!(quality_filter(uneven_boundary), Verdict::Pass);
        let just_below = JudgeScores::new(2, 2, 4).unwrap();
        assert_eq!(quality_filter(just_below), Verdict::Reject);
    }

    #[test]
    fn quality_rule_matches_predicate_on_all_125_triples() {
        for a in 1..=5u8 {
            for c in 1..=5u8 {
                for f in 1..=5u8 {
                    let scores = JudgeScores::new(a, c, f).unwrap();
                    let expect_reject =
                        a == 1 || c == 1 || f == 1 || (f64::from(a + c + f) / 3.0) < 3.0;
                    let got = quality_filter(scores);
                    assert_eq!(
                        got == Verdict::Reject,
                        expect_reject,
                        "({a},{c},{f}) -> {got:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn quality_rule_is_monotonic_in_each_score() {
        // Raising any single score never flips pass into reject.
        for a in 1..=5u8 {
            for c in 1..=5u8 {
                for f in 1..=5u8 {
                    if !passes_filter(JudgeScores::new(a, c, f).unwrap()) {
                        continue;
                    }
                    for (da, dc, df) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                        let (ra, rc, rf) = (a + da, c + dc, f + df);
                        if ra > 5 || rc > 5 || rf > 5 {
                            continue;
                        }
                        assert!(
                            passes_filter(JudgeScores::new(ra, rc, rf).unwrap()),
                            "raising ({a},{c},{f}) to ({ra},{rc},{rf}) flipped pass to reject"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn scores_outside_range_are_rejected_at_construction() {
        assert!(JudgeScores::new(0, 3, 3).is_err());
        assert!(JudgeScores::new(3, 6, 3).is_err());
    }

    #[test]
    fn candidates_load_and_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "{{\"title\": \"Erhu\", \"definition\": \"an instrument\"}}").unwrap();
        writeln!(f).unwrap();
        writeln!(
            f,
            "{{\"title\": \"Mantou\", \"definition\": \"a bun\", \"caption\": \"steamed\"}}"
        )
        .unwrap();
        let loaded = load_candidates(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[1].caption, "steamed");

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"title\": \"x\"}\n").unwrap();
        let err = load_candidates(&bad).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
