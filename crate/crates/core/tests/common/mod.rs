#![allow(dead_code)]

use std::path::PathBuf;

use codewise_core::codebooks;
use codewise_core::llm::{render_prompt, ChatRequest, PromptInput, PromptTemplateKind, Role};
use codewise_core::{CodeId, Codebook, DialogueTurn, Speaker};

pub fn goldens_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("goldens")
}

pub fn codebook_for(kind: PromptTemplateKind) -> Codebook {
    match kind {
        PromptTemplateKind::QuestionType => codebooks::question_types(),
        PromptTemplateKind::QuestionMechanism => codebooks::question_mechanisms(),
        _ => codebooks::history_taking(),
    }
}

fn dialogue() -> Vec<DialogueTurn> {
    vec![
        DialogueTurn::new("d1", "s1", 0, Speaker::Student, "Hello, what brings you in today?", None),
        DialogueTurn::new("d2", "s1", 1, Speaker::Counterpart, "I have had a headache for three days.", None),
        DialogueTurn::new("d3", "s1", 2, Speaker::Student, "Does anything make the headache worse?", None),
        DialogueTurn::new("d4", "s1", 3, Speaker::Counterpart, "It gets worse when I climb stairs.", None),
    ]
}

/// The fixed request each golden file is rendered from.
pub fn golden_request(kind: PromptTemplateKind) -> ChatRequest {
    let cb = codebook_for(kind);
    let turns = dialogue();
    let subset: Vec<CodeId> = ["PQ", "SS", "RQ"].iter().map(|c| CodeId::new(*c).unwrap()).collect();
    let input = PromptInput {
        turn: Some(&turns[2]),
        context: &turns[..2],
        response: Some(&turns[3]),
        target_code: (kind == PromptTemplateKind::BinaryJudgment).then_some("PQ"),
        code_subset: (kind == PromptTemplateKind::ReducedScope).then_some(&subset[..]),
        case_background: Some("A 45-year-old patient presents with headache."),
    };
    render_prompt(kind, &cb, &input, "golden-model").unwrap()
}

pub fn render_text(request: &ChatRequest) -> String {
    let mut out = String::new();
    for m in &request.messages {
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
        };
        out.push_str(&format!("=== {role} ===\n{}\n", m.content));
    }
    out
}

pub fn golden_path(kind: PromptTemplateKind) -> PathBuf {
    goldens_dir().join(format!("{}.txt", kind.name()))
}
