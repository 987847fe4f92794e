//! Prompt templates shipped with the crate, plus the slot-filling helper.
//! Templates are plain text with `{slot}` placeholders; filling replaces only
//! the slots the caller names, so literal braces in a template survive.

use serde::{Deserialize, Serialize};

/// The shipped template set. Every backend request names one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    BottomUpFilter,
    BottomUpClassify,
    TopDownGenerate,
    TwinMatch,
    CaptionGeneration,
    JudgeAuthenticity,
    JudgeConsistency,
    JudgeFidelity,
}

impl TemplateId {
    pub const ALL: [TemplateId; 8] = [
        TemplateId::BottomUpFilter,
        TemplateId::BottomUpClassify,
        TemplateId::TopDownGenerate,
        TemplateId::TwinMatch,
        TemplateId::CaptionGeneration,
        TemplateId::JudgeAuthenticity,
        TemplateId::JudgeConsistency,
        TemplateId::JudgeFidelity,
    ];

    /// Stable wire name, also the template's file stem.
    pub fn name(self) -> &'static str {
        match self {
            TemplateId::BottomUpFilter => "bottom_up_filter",
            TemplateId::BottomUpClassify => "bottom_up_classify",
            TemplateId::TopDownGenerate => "top_down_generate",
            TemplateId::TwinMatch => "twin_match",
            TemplateId::CaptionGeneration => "caption_generation",
            TemplateId::JudgeAuthenticity => "judge_authenticity",
            TemplateId::JudgeConsistency => "judge_consistency",
            TemplateId::JudgeFidelity => "judge_fidelity",
        }
    }

    /// Template text, compiled in from the templates directory.
    pub fn text(self) -> &'static str {
        match self {
            TemplateId::BottomUpFilter => include_str!("../../templates/bottom_up_filter.txt"),
            TemplateId::BottomUpClassify => include_str!("../../templates/bottom_up_classify.txt"),
            TemplateId::TopDownGenerate => include_str!("../../templates/top_down_generate.txt"),
            TemplateId::TwinMatch => include_str!("../../templates/twin_match.txt"),
            TemplateId::CaptionGeneration => include_str!("../../templates/caption_generation.txt"),
            TemplateId::JudgeAuthenticity => include_str!("../../templates/judge_authenticity.txt"),
            TemplateId::JudgeConsistency => include_str!("../../templates/judge_consistency.txt"),
            TemplateId::JudgeFidelity => include_str!("../../templates/judge_fidelity.txt"),
        }
    }
}

/// Replace `{key}` placeholders with the paired values. Keys not listed are
/// left untouched, which keeps JSON examples inside templates intact.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in slots {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}
