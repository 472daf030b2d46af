//! Bundled coding schemes.

use crate::domain::Codebook;
use crate::ingest::{load_codebook, DocFormat};

const HISTORY_TAKING: &str = include_str!("../data/history_taking.json");
const QUESTION_TYPES: &str = include_str!("../data/question_types.json");
const QUESTION_MECHANISMS: &str = include_str!("../data/question_mechanisms.json");

/// The 12-code history-taking scheme for medical dialogue.
pub fn history_taking() -> Codebook {
    load_codebook(HISTORY_TAKING.as_bytes(), DocFormat::Json).expect("bundled codebook is valid")
}

/// The 14 question types for student questions to a writing assistant.
pub fn question_types() -> Codebook {
    load_codebook(QUESTION_TYPES.as_bytes(), DocFormat::Json).expect("bundled codebook is valid")
}

/// The 4 question-generating mechanisms.
pub fn question_mechanisms() -> Codebook {
    load_codebook(QUESTION_MECHANISMS.as_bytes(), DocFormat::Json).expect("bundled codebook is valid")
}

pub fn by_name(name: &str) -> Option<Codebook> {
    match name {
        "history-taking" => Some(history_taking()),
        "question-types" => Some(question_types()),
        "question-mechanisms" => Some(question_mechanisms()),
        _ => None,
    }
}
