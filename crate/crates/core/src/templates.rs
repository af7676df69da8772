//! Per-disease sentence template bank shared by the synthetic corpus
//! generator and the toy report policy. Frames are chosen so the rule
//! labeler is exact on any rendered sentence: positive frames contain no
//! negation or uncertainty cue, negative frames carry exactly a negation
//! cue, and uncertain frames carry exactly an uncertainty cue.

use crate::labeler::DiseaseStatus;

pub const POSITIVE_FRAMES: &[&str] = &[
    "There is {}.",
    "Findings compatible with {} are seen.",
    "{} is identified.",
    "Imaging demonstrates {}.",
    "Persistent {} is again seen.",
];

pub const NEGATIVE_FRAMES: &[&str] = &[
    "There is no {}.",
    "No evidence of {}.",
    "{} is absent.",
    "The study is without {}.",
    "Previously seen {} has resolved.",
];

pub const UNCERTAIN_FRAMES: &[&str] = &[
    "There is possibly {}.",
    "{} may be present.",
    "Cannot exclude {}.",
    "Questionable {}.",
    "{} is suspected.",
];

/// Number of distinct frames per status, the upper bound for
/// `templates_per_disease`.
pub const MAX_TEMPLATES: usize = POSITIVE_FRAMES.len();

/// Frames for a non-blank status.
pub fn frames_for(status: DiseaseStatus) -> &'static [&'static str] {
    match status {
        DiseaseStatus::Positive => POSITIVE_FRAMES,
        DiseaseStatus::Negative => NEGATIVE_FRAMES,
        DiseaseStatus::Uncertain => UNCERTAIN_FRAMES,
        DiseaseStatus::Blank => &[],
    }
}

/// Render one sentence: substitute the disease phrase into the frame and
/// capitalize the first letter.
pub fn render(frame: &str, phrase: &str) -> String {
    let raw = frame.replace("{}", phrase);
    let mut chars = raw.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => raw,
    }
}

/// Render the template sentence for `(status, phrase, template_idx)`;
/// `None` for blank status.
pub fn sentence(status: DiseaseStatus, phrase: &str, template_idx: usize) -> Option<String> {
    let frames = frames_for(status);
    if frames.is_empty() {
        return None;
    }
    Some(render(frames[template_idx % frames.len()], phrase))
}
