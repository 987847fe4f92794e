//! Text/image generation backends behind one two-method trait: a seeded mock
//! that answers every template deterministically, and an HTTP client for a
//! real model server.

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::templates::TemplateId;
use crate::hashing::fnv1a_str;
use crate::{Error, Result};

/// One filled prompt headed to a backend. Attachments are image references
/// (paths or feature keys); the HTTP backend base64-encodes the first one.
#[derive(Debug, Clone)]
pub struct BackendRequest {
    pub template: TemplateId,
    pub prompt: String,
    pub attachments: Vec<String>,
}

impl BackendRequest {
    pub fn new(template: TemplateId, prompt: impl Into<String>) -> Self {
        BackendRequest {
            template,
            prompt: prompt.into(),
            attachments: Vec::new(),
        }
    }

    pub fn with_attachment(mut self, attachment: impl Into<String>) -> Self {
        self.attachments.push(attachment.into());
        self
    }
}

/// Generation backend: free-form text for a filled template, and an image
/// reference for a caption.
pub trait Backend: Send + Sync {
    fn generate_text(&self, request: &BackendRequest) -> Result<String>;
    fn generate_image(&self, caption: &str) -> Result<String>;
}

/// How the mock backend scores images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum JudgeProfile {
    /// Every dimension scores 4: everything passes.
    #[default]
    Default,
    /// Scores derive from a hash of the request, spread over 1..=5.
    Hashed,
    /// Every dimension scores 1: nothing passes.
    Rejecting,
}

/// One curated concept the mock backend knows, with its pre-assigned twin.
struct MockConcept {
    title: &'static str,
    country: &'static str,
    category: &'static str,
    context: &'static str,
    visuals: &'static str,
    twin: &'static str,
    twin_country: &'static str,
    twin_context: &'static str,
    twin_visuals: &'static str,
}

/// Built-in concept table the mock draws from. Lookups are case-insensitive
/// on the title. The final entry deliberately answers twin requests with a
/// category drift so the invalid-twin path is reachable in tests.
const MOCK_CONCEPTS: &[MockConcept] = &[
    MockConcept {
        title: "Mantou",
        country: "China",
        category: "Cuisine",
        context: "Steamed wheat bun symbolizing prosperity, commonly served during festivals and family gatherings.",
        visuals: "Pillowy white appearance, round shape, smooth surface, typically palm-sized",
        twin: "Baozi",
        twin_country: "China",
        twin_context: "Steamed filled bun eaten for breakfast across China, wrapped around savory fillings.",
        twin_visuals: "Pleated top knot, soft white dough, round shape, visible folds",
    },
    MockConcept {
        title: "Xiaolongbao",
        country: "China",
        category: "Cuisine",
        context: "Steamed soup dumplings filled with savory broth and pork, a Shanghai teahouse staple.",
        visuals: "Delicate thin wrappers, steamed in bamboo baskets, pleated crown",
        twin: "Shumai",
        twin_country: "China",
        twin_context: "Open-topped steamed dumpling served at dim sum, filled with pork and shrimp.",
        twin_visuals: "Open top with visible filling, thin yellow wrapper, steamed in bamboo baskets",
    },
    MockConcept {
        title: "Erhu",
        country: "China",
        category: "Art",
        context: "Two-stringed bowed instrument central to Chinese folk and orchestral music.",
        visuals: "Two strings, horsehair bow, small hexagonal resonator, long thin neck",
        twin: "Guzheng",
        twin_country: "China",
        twin_context: "Plucked zither with movable bridges, played solo or in court ensembles.",
        twin_visuals: "Large rectangular wooden body, many strings, movable bridges",
    },
    MockConcept {
        title: "Ukiyo-e",
        country: "Japan",
        category: "Art",
        context: "Woodblock prints depicting everyday life, landscapes, and kabuki actors in Edo Japan.",
        visuals: "Flat color blocks, bold outlines, vibrant pigments, rectangular format",
        twin: "Sumi-e",
        twin_country: "Japan",
        twin_context: "Ink wash painting prizing brush economy and empty space, rooted in Zen practice.",
        twin_visuals: "Monochrome ink gradients, expressive brushstrokes, generous empty space",
    },
    MockConcept {
        title: "Kimono",
        country: "Japan",
        category: "Clothing",
        context: "Formal Japanese garment wrapped left over right and tied with an obi sash.",
        visuals: "Long wide sleeves, obi sash, wrapped front, patterned silk",
        twin: "Hanbok",
        twin_country: "Korea",
        twin_context: "Korean formal wear with a short jacket and full skirt worn at celebrations.",
        twin_visuals: "Short jeogori jacket, high full chima skirt, vivid color blocks",
    },
    MockConcept {
        title: "Torii",
        country: "Japan",
        category: "Architecture",
        context: "Gate marking the entrance to a Shinto shrine, separating sacred and mundane ground.",
        visuals: "Two upright pillars, double crossbeam, vermilion paint",
        twin: "Paifang",
        twin_country: "China",
        twin_context: "Chinese ceremonial archway honoring ancestors or marking a district entrance.",
        twin_visuals: "Multi-tiered roofed archway, stone or wood, carved inscriptions",
    },
    MockConcept {
        title: "Matryoshka",
        country: "Russia",
        category: "Art",
        context: "Nesting dolls painted as peasant women, a staple of Russian folk craft.",
        visuals: "Nested wooden dolls, painted floral shawl, decreasing sizes",
        twin: "Kokeshi",
        twin_country: "Japan",
        twin_context: "Handmade wooden dolls from northern Japan, given as tokens of friendship.",
        twin_visuals: "Cylindrical limbless body, round head, painted floral motifs",
    },
    MockConcept {
        title: "Maple",
        country: "Canada",
        category: "Animal & Plants",
        context: "Maple trees supply syrup and the leaf at the center of Canadian identity.",
        visuals: "Five-lobed leaves, red autumn color, winged seeds",
        twin: "Ginkgo",
        twin_country: "China",
        twin_context: "Ancient temple tree whose fan-shaped leaves turn gold in Chinese courtyards.",
        twin_visuals: "Fan-shaped leaves, golden autumn color, paired lobes",
    },
    MockConcept {
        title: "Songkran",
        country: "Thailand",
        category: "Festival",
        context: "Thai new year water festival washing away misfortune each April.",
        visuals: "Water splashing, buckets and water guns, floral shirts",
        twin: "Holi",
        twin_country: "India",
        twin_context: "Indian spring festival of colors celebrating renewal and playfulness.",
        twin_visuals: "Clouds of colored powder, stained clothing, crowded courtyards",
    },
    MockConcept {
        title: "Samovar",
        country: "Russia",
        category: "Daily Life",
        context: "Metal urn keeping water hot for tea, the center of Russian hospitality.",
        visuals: "Polished metal urn, central chimney, small spigot, crown-like top",
        twin: "Tetsubin",
        twin_country: "Japan",
        twin_context: "Cast-iron kettle used to boil water for Japanese tea ceremonies.",
        twin_visuals: "Cast iron body, textured surface, arched handle, small spout",
    },
    MockConcept {
        title: "Cheongsam",
        country: "China",
        category: "Clothing",
        context: "Fitted Chinese dress with a high collar, popularized in 1920s Shanghai.",
        visuals: "High mandarin collar, side slits, fitted silhouette, knotted buttons",
        twin: "Ao Dai",
        twin_country: "Vietnam",
        twin_context: "Vietnamese national garment of a long split tunic worn over trousers.",
        twin_visuals: "Long split tunic, flowing panels, worn over wide trousers",
    },
    MockConcept {
        title: "Onigiri",
        country: "Japan",
        category: "Cuisine",
        context: "Rice balls wrapped in seaweed, a portable staple of Japanese lunches.",
        visuals: "Triangular pressed rice, nori wrap, white grain surface",
        twin: "Zongzi",
        twin_country: "China",
        twin_context: "Sticky rice parcels wrapped in bamboo leaves for the Dragon Boat Festival.",
        twin_visuals: "Pyramid shape, bamboo leaf wrap, tied with string",
    },
    MockConcept {
        title: "Balalaika",
        country: "Russia",
        category: "Art",
        context: "Triangular three-stringed lute driving Russian folk dance tunes.",
        visuals: "Triangular body, three strings, long fretted neck",
        twin: "Domra",
        twin_country: "Russia",
        twin_context: "Round-bodied Russian string instrument played with a pick in folk orchestras.",
        twin_visuals: "Round body, three or four strings, short fretted neck",
    },
    MockConcept {
        title: "Hanok",
        country: "Korea",
        category: "Architecture",
        context: "Traditional Korean house with curved roofs and heated ondol floors.",
        visuals: "Curved tiled roof, wooden beams, paper doors, raised floor",
        twin: "Siheyuan",
        twin_country: "China",
        twin_context: "Beijing courtyard residence arranging four wings around a private court.",
        twin_visuals: "Four wings around a courtyard, gray brick, central gate",
    },
    MockConcept {
        title: "Diya",
        country: "India",
        category: "Symbol",
        context: "Clay oil lamp lit during Diwali to invite prosperity and dispel darkness.",
        visuals: "Small clay bowl, cotton wick, open flame",
        twin: "Menorah",
        twin_country: "Israel",
        twin_context: "Nine-branched candelabrum lit through the nights of Hanukkah.",
        twin_visuals: "Nine branches, central raised holder, metal arms",
    },
    MockConcept {
        title: "Obi",
        country: "Japan",
        category: "Clothing",
        context: "Wide sash knotted at the back that completes a kimono ensemble.",
        visuals: "Wide stiff sash, elaborate back knot, brocade patterns",
        twin: "Norigae",
        twin_country: "Korea",
        twin_context: "Ornamental tassel pendant hung from a hanbok jacket tie.",
        twin_visuals: "Silk tassel, carved ornament, knotted cord",
    },
    MockConcept {
        title: "Tanghulu",
        country: "China",
        category: "Cuisine",
        context: "Skewered hawthorn berries glazed in hard candy, a Beijing winter street snack.",
        visuals: "Glossy red candied fruit, bamboo skewer, hard sugar shell",
        twin: "Dango",
        twin_country: "Japan",
        twin_context: "Chewy rice dumplings served three to five on a skewer with sweet glaze.",
        twin_visuals: "Round rice dumplings, bamboo skewer, glossy soy glaze",
    },
    MockConcept {
        title: "Bonsai",
        country: "Japan",
        category: "Animal & Plants",
        context: "Miniature trees pruned for decades to evoke aged landscapes in a tray.",
        visuals: "Miniature pruned tree, shallow ceramic pot, wired branches",
        twin: "Penjing",
        twin_country: "China",
        twin_context: "Chinese art of miniature landscapes combining rocks, water, and trees.",
        twin_visuals: "Miniature landscape scene, rocks and figurines, shallow basin",
    },
    MockConcept {
        title: "Yuelao",
        country: "China",
        category: "Symbol",
        context: "Matchmaker deity said to bind destined couples with a red thread.",
        visuals: "Elderly robed figure, long white beard, red thread",
        twin: "Taishang Laojun",
        twin_country: "China",
        twin_context: "Deified Laozi venerated in Taoist temples as a source of wisdom.",
        twin_visuals: "Robed sage figure, fly-whisk, flowing white beard",
    },
    MockConcept {
        title: "Khachkar",
        country: "Armenia",
        category: "Art",
        context: "Carved cross-stones serving as Armenian memorials and boundary markers.",
        visuals: "Carved stone stele, central cross, lace-like interlacing",
        twin: "Runestone",
        twin_country: "Sweden",
        twin_context: "Raised stones carved with runic inscriptions commemorating Norse voyages.",
        twin_visuals: "Raised granite stone, runic bands, serpentine carving",
    },
    MockConcept {
        title: "Trickster Kite",
        country: "China",
        category: "Art",
        context: "A deliberately miscurated entry whose twin answer drifts out of category.",
        visuals: "Paper kite, bamboo frame, painted grin",
        twin: "Festival Lantern",
        twin_country: "China",
        twin_context: "Glowing paper lantern released during festival nights.",
        twin_visuals: "Paper shell, candle glow, bamboo frame",
    },
];

/// Seeded, table-driven backend. Answers are pure functions of the prompt's
/// current-task region, the seed, and the judge profile, so identical runs
/// are bitwise identical.
pub struct MockBackend {
    seed: u64,
    profile: JudgeProfile,
}

const CAPTION_SCENES: [&str; 12] = [
    "at a bustling street market",
    "during a quiet family gathering",
    "under soft museum lighting",
    "in a sunlit courtyard",
    "at a festive celebration",
    "on a rustic wooden table",
    "beside a calligraphy scroll",
    "in an old craft workshop",
    "under rows of paper lanterns",
    "at a riverside pavilion",
    "in early morning mist",
    "on a ceremonial stage",
];

impl MockBackend {
    pub fn new(seed: u64, profile: JudgeProfile) -> Self {
        MockBackend { seed, profile }
    }

    fn lookup(title: &str) -> Option<&'static MockConcept> {
        let needle = title.trim().to_lowercase();
        MOCK_CONCEPTS.iter().find(|c| c.title.to_lowercase() == needle)
    }

    fn answer_filter(prompt: &str) -> String {
        let title = prompt
            .find("concept '")
            .map(|pos| &prompt[pos + "concept '".len()..])
            .and_then(|rest| rest.split('\'').next())
            .unwrap_or("");
        let letter = if Self::lookup(title).is_some() { "B" } else { "A" };
        format!("{{\n    \"concept_type\": \"{letter}\"\n}}")
    }

    fn answer_classify(prompt: &str) -> String {
        let region = region_after(prompt, "Current Task:");
        let concept = labeled_line(region, "Concept:").unwrap_or_default();
        match Self::lookup(&concept) {
            Some(c) => format!(
                "Country: {}\nCategory: {}\nContext: {}\nKey Visual Features: {}",
                c.country, c.category, c.context, c.visuals
            ),
            None => format!(
                "Country: Unknown\nCategory: Miscellaneous\nContext: No curated entry covers {concept}.\nKey Visual Features: Unspecified."
            ),
        }
    }

    fn answer_top_down(prompt: &str) -> String {
        let region = region_after(prompt, "Current Task:");
        let country = labeled_line(region, "Country:").unwrap_or_default();
        let category = labeled_line(region, "Cultural Category:").unwrap_or_default();
        let hit = MOCK_CONCEPTS
            .iter()
            .find(|c| c.country == country && c.category == category);
        match hit {
            Some(c) => format!(
                "Concept: {}\nContext: {}\nKey Visual Features: {}",
                c.title, c.context, c.visuals
            ),
            // No visual-features line: callers treat this as a parse failure.
            None => format!(
                "Concept: Unmapped tradition\nContext: No curated entry exists for {category} in {country}."
            ),
        }
    }

    fn answer_twin(prompt: &str) -> String {
        let region = region_after(prompt, "Current Task:");
        let concept = labeled_line(region, "Concept:").unwrap_or_default();
        match Self::lookup(&concept) {
            Some(c) => {
                let mut out = format!(
                    "New Concept: {}\nNew Country: {}\nNew Context: {}\nNew Key Visual Features: {}",
                    c.twin, c.twin_country, c.twin_context, c.twin_visuals
                );
                if c.title == "Trickster Kite" {
                    out.push_str("\nNew Category: Festival");
                }
                out
            }
            None => format!(
                "New Concept: Counterpart {concept}\nNew Country: Atlantis\nNew Context: A neighboring tradition that mirrors {concept} with a distinct local form.\nNew Key Visual Features: Similar silhouette with regional materials and motifs."
            ),
        }
    }

    fn answer_captions(&self, prompt: &str) -> String {
        let region = region_after(prompt, "Current Task:");
        let concept = labeled_line(region, "Concept:").unwrap_or_default();
        let visuals = labeled_line(region, "Key Visual Features:").unwrap_or_default();
        let count = extract_count(region).unwrap_or(10);
        let lead = decapitalize(visuals.trim_end_matches('.'));
        let offset =
            (fnv1a_str(&format!("{}|captions|{concept}", self.seed)) % CAPTION_SCENES.len() as u64)
                as usize;
        let mut lines = Vec::with_capacity(count);
        for i in 0..count {
            let scene = CAPTION_SCENES[(offset + i) % CAPTION_SCENES.len()];
            let lap = i / CAPTION_SCENES.len();
            let suffix = if lap == 0 {
                String::new()
            } else {
                format!(", take {}", lap + 1)
            };
            lines.push(format!("{}. {concept} with {lead}, {scene}{suffix}.", i + 1));
        }
        lines.join("\n")
    }

    fn answer_judge(&self, request: &BackendRequest) -> String {
        let region = region_after(&request.prompt, "Now, give you");
        let mut haystack = region.to_lowercase();
        for att in &request.attachments {
            haystack.push('\n');
            haystack.push_str(&att.to_lowercase());
        }
        // Obvious anatomical impossibilities fail authenticity regardless of
        // profile; the check ignores the few-shot examples above the marker.
        if request.template == TemplateId::JudgeAuthenticity && haystack.contains("three hands") {
            return "1".into();
        }
        match self.profile {
            JudgeProfile::Default => "4".into(),
            JudgeProfile::Rejecting => "1".into(),
            JudgeProfile::Hashed => {
                let h = fnv1a_str(&format!(
                    "{}|{}|{haystack}",
                    self.seed,
                    request.template.name()
                ));
                format!("{}", 1 + (h % 5))
            }
        }
    }
}

impl Backend for MockBackend {
    fn generate_text(&self, request: &BackendRequest) -> Result<String> {
        Ok(match request.template {
            TemplateId::BottomUpFilter => Self::answer_filter(&request.prompt),
            TemplateId::BottomUpClassify => Self::answer_classify(&request.prompt),
            TemplateId::TopDownGenerate => Self::answer_top_down(&request.prompt),
            TemplateId::TwinMatch => Self::answer_twin(&request.prompt),
            TemplateId::CaptionGeneration => self.answer_captions(&request.prompt),
            TemplateId::JudgeAuthenticity
            | TemplateId::JudgeConsistency
            | TemplateId::JudgeFidelity => self.answer_judge(request),
        })
    }

    fn generate_image(&self, caption: &str) -> Result<String> {
        if caption.trim().is_empty() {
            return Err(Error::GenerationRejected("caption is empty".into()));
        }
        Ok(format!("feat:{:016x}", fnv1a_str(&format!("image|{caption}"))))
    }
}

/// The region of the prompt after the last occurrence of `marker`; the whole
/// prompt when the marker is absent. Few-shot examples live before the
/// marker, so value extraction never reads them.
fn region_after<'a>(prompt: &'a str, marker: &str) -> &'a str {
    match prompt.rfind(marker) {
        Some(pos) => &prompt[pos + marker.len()..],
        None => prompt,
    }
}

/// First line in `region` starting with `label` (after trimming), minus the
/// label and surrounding whitespace.
fn labeled_line(region: &str, label: &str) -> Option<String> {
    region.lines().find_map(|line| {
        line.trim()
            .strip_prefix(label)
            .map(|rest| rest.trim().to_string())
    })
}

/// First integer following the word "Generate" in the region.
fn extract_count(region: &str) -> Option<usize> {
    let rest = &region[region.find("Generate ")? + "Generate ".len()..];
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

fn decapitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_lowercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Environment variables the HTTP backend reads.
pub const BACKEND_URL_VAR: &str = "BACKEND_URL";
pub const BACKEND_TOKEN_VAR: &str = "BACKEND_TOKEN";

/// Client for a model server speaking a small JSON protocol:
/// `POST {base}/generate {"template_id", "prompt", "image_b64"?} -> {"text"}`
/// and `POST {base}/generate_image {"prompt"} -> {"image"}`. Transient
/// failures retry with exponential backoff; HTTP 422 on image generation is
/// a content refusal and is not retried.
pub struct HttpBackend {
    base_url: String,
    token: Option<String>,
    attempts: u32,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, token: Option<String>, attempts: u32) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|e| Error::BadConfig(format!("http client: {e}")))?;
        Ok(HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            token,
            attempts: attempts.max(1),
            client,
        })
    }

    /// Read endpoint and token from the environment.
    pub fn from_env(attempts: u32) -> Result<Self> {
        let url = std::env::var(BACKEND_URL_VAR)
            .map_err(|_| Error::BadConfig(format!("{BACKEND_URL_VAR} is not set")))?;
        let token = std::env::var(BACKEND_TOKEN_VAR).ok();
        Self::new(url, token, attempts)
    }

    /// POST a JSON body and return the named string field of the JSON reply,
    /// retrying transient failures.
    fn post_json(&self, path: &str, body: &Value, field: &str) -> Result<String> {
        let url = format!("{}/{path}", self.base_url);
        let mut last_err = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(100 << (attempt - 1)));
            }
            let mut req = self.client.post(&url).json(body);
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.as_u16() == 422 {
                        let detail = resp.text().unwrap_or_default();
                        return Err(Error::GenerationRejected(detail));
                    }
                    if !status.is_success() {
                        last_err = format!("{url} returned {status}");
                        continue;
                    }
                    let value: Value = resp.json().map_err(|e| Error::ParseFailure {
                        stage: path.to_string(),
                        detail: format!("non-JSON reply: {e}"),
                    })?;
                    return match value.get(field).and_then(Value::as_str) {
                        Some(text) => Ok(text.to_string()),
                        None => Err(Error::ParseFailure {
                            stage: path.to_string(),
                            detail: format!("reply lacks string field `{field}`"),
                        }),
                    };
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::BackendUnavailable {
            attempts: self.attempts,
            detail: last_err,
        })
    }
}

impl Backend for HttpBackend {
    fn generate_text(&self, request: &BackendRequest) -> Result<String> {
        let mut body = json!({
            "template_id": request.template.name(),
            "prompt": request.prompt,
        });
        if let Some(first) = request.attachments.first() {
            let bytes = std::fs::read(first).unwrap_or_else(|_| first.as_bytes().to_vec());
            let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
            body["image_b64"] = Value::String(encoded);
        }
        self.post_json("generate", &body, "text")
    }

    fn generate_image(&self, caption: &str) -> Result<String> {
        self.post_json("generate_image", &json!({ "prompt": caption }), "image")
    }
}
