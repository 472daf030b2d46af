//! Prompt templates and rendering.
//!
//! Templates are fixed text with `{name}` placeholders. Rendering is a single
//! left-to-right pass: each placeholder occurrence is replaced by its value
//! and inserted values are never scanned again, so codebook text containing
//! braces cannot trigger a second substitution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatRequest, LlmError, Role, DEFAULT_TEMPERATURE};
use crate::domain::{Code, CodeId, Codebook, DialogueTurn, Speaker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplateKind {
    FullScope,
    ReducedScope,
    BinaryJudgment,
    QuestionType,
    QuestionMechanism,
}

impl PromptTemplateKind {
    pub const ALL: [PromptTemplateKind; 5] = [
        PromptTemplateKind::FullScope,
        PromptTemplateKind::ReducedScope,
        PromptTemplateKind::BinaryJudgment,
        PromptTemplateKind::QuestionType,
        PromptTemplateKind::QuestionMechanism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptTemplateKind::FullScope => "full_scope",
            PromptTemplateKind::ReducedScope => "reduced_scope",
            PromptTemplateKind::BinaryJudgment => "binary_judgment",
            PromptTemplateKind::QuestionType => "question_type",
            PromptTemplateKind::QuestionMechanism => "question_mechanism",
        }
    }

    pub fn template(self) -> &'static Template {
        match self {
            PromptTemplateKind::FullScope | PromptTemplateKind::ReducedScope => &CODING,
            PromptTemplateKind::BinaryJudgment => &BINARY,
            PromptTemplateKind::QuestionType => &QUESTION_TYPE,
            PromptTemplateKind::QuestionMechanism => &QUESTION_MECHANISM,
        }
    }

    pub fn has_system_prompt(self) -> bool {
        self.template().system.is_some()
    }

    /// How the counterpart is labelled in rendered dialogue context.
    fn counterpart_label(self) -> &'static str {
        match self {
            PromptTemplateKind::QuestionType | PromptTemplateKind::QuestionMechanism => "Assistant",
            _ => "Virtual Patient",
        }
    }
}

impl std::str::FromStr for PromptTemplateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| format!("unknown template kind {s:?}"))
    }
}

#[derive(Debug)]
pub struct Template {
    pub system: Option<&'static str>,
    pub user: &'static str,
}

const CODING: Template = Template {
    system: Some(
        "You are an expert in medical dialogue coding. Your task is to classify student questions according to the given coding scheme.

- Coding Scheme: {codebook}
- Case Background: {case_background}
- Coding Requirements:
  - Only analyze student questions.
  - If multiple codes apply, list all codes separated by commas.
  - Prefer the single best-fitting code whenever possible.
- Output Format: Output only the code name(s), e.g., RQ or RQ, CC. Do not include explanations.",
    ),
    user: "Context: {context}
Student Question: {question}
Virtual Patient Response: {answer}

Task: Please code the Student Question.",
};

const BINARY: Template = Template {
    system: Some(
        "You are an expert in medical dialogue coding. Determine whether a student question belongs to a specific target code.

- Case Background: {case_background}
- Target Code: {target_code}
- Definition: {definition}
- Typical Examples: {examples}
- Key Features: {keywords}

Decision Rules:
- If the question matches the definition/features -> output Yes.
- Otherwise -> output No.
- Only answer with Yes or No.",
    ),
    user: "Context: {context}
Student Question: {question}
Task: Does this question belong to \"{target_code}\"? Answer Yes or No.",
};

const QUESTION_TYPE: Template = Template {
    system: None,
    user: "Please analyse the following student utterance and classify it according to the Question Types coding scheme.

- Conversation Context: {context}
- Question Types Coding Scheme: {question_types_codebook}

Your Task:
Select the most appropriate Question Type from: {question_types}.

If two types are equally appropriate, output both separated by a slash (e.g., \"Verification/Instrumental\").

Output Format: Respond with only the code name(s), e.g., \"Verification\" or \"Direct Request\".

Your Answer: ____",
};

const QUESTION_MECHANISM: Template = Template {
    system: None,
    user: "Please analyse the following student utterance and classify it according to the Question-Generating Mechanisms coding scheme.

- Conversation Context: {context}
- Mechanism Coding Scheme: {mechanisms_codebook}

Your Task:
Identify the underlying mechanism that generated this question. Select from: {mechanisms}.

If two mechanisms are equally appropriate, output both separated by a slash (e.g., \"Knowledge Deficit/Social Coordination\").

Output Format: Respond with only the mechanism name(s), e.g., \"Knowledge Deficit\" or \"Social Coordination\".

Your Answer: ____",
};

/// Appended to the coding prompt when a rationale is wanted alongside the
/// candidate codes (adjudication suggestions).
pub const RATIONALE_REQUEST: &str = "\n\nFor the reviewing expert: after the code name(s), add one new line that starts with \"Rationale:\" followed by a one-sentence justification.";

const NONE_TEXT: &str = "(none)";

/// Everything a template may draw on for a single turn.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptInput<'a> {
    pub turn: Option<&'a DialogueTurn>,
    pub context: &'a [DialogueTurn],
    pub response: Option<&'a DialogueTurn>,
    pub target_code: Option<&'a str>,
    pub code_subset: Option<&'a [CodeId]>,
    pub case_background: Option<&'a str>,
}

impl<'a> PromptInput<'a> {
    pub fn for_turn(turn: &'a DialogueTurn, context: &'a [DialogueTurn]) -> Self {
        Self { turn: Some(turn), context, ..Default::default() }
    }
}

/// Replaces each `{name}` in one pass. Unknown placeholders are an error.
pub fn fill(template: &str, values: &BTreeMap<&str, String>) -> Result<String, LlmError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or(LlmError::MissingPlaceholderInput("unterminated placeholder"))?;
        let name = &after[..close];
        let value = values.get(name).ok_or_else(|| LlmError::UnknownPlaceholder(name.to_string()))?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn quoted_examples(code: &Code, limit: usize) -> String {
    if code.examples.is_empty() {
        return NONE_TEXT.to_string();
    }
    code.examples.iter().take(limit).map(|e| format!("\"{e}\"")).collect::<Vec<_>>().join("; ")
}

fn render_scheme(codes: &[&Code], example_limit: usize, with_ids: bool) -> String {
    codes
        .iter()
        .map(|c| {
            let head = if with_ids { format!("{} ({})", c.id, c.name) } else { c.name.clone() };
            format!("\n  - {head}: {} Example: {}", c.definition, quoted_examples(c, example_limit))
        })
        .collect()
}

fn render_context(turns: &[DialogueTurn], counterpart: &str) -> String {
    if turns.is_empty() {
        return NONE_TEXT.to_string();
    }
    turns
        .iter()
        .map(|t| {
            let who = match t.speaker {
                Speaker::Student => "Student",
                Speaker::Counterpart => counterpart,
            };
            format!("\n  {who}: {}", t.text)
        })
        .collect()
}

fn subset_codes<'c>(cb: &'c Codebook, subset: &[CodeId]) -> Result<Vec<&'c Code>, LlmError> {
    subset.iter().map(|id| cb.get(id.as_str()).ok_or_else(|| LlmError::UnknownCode(id.to_string()))).collect()
}

/// Renders one of the prompt templates into a chat request.
///
/// `binary_judgment` needs `target_code`; `reduced_scope` needs
/// `code_subset`; the other kinds reject a `target_code`.
pub fn render_prompt(
    kind: PromptTemplateKind,
    cb: &Codebook,
    input: &PromptInput<'_>,
    model_id: &str,
) -> Result<ChatRequest, LlmError> {
    let turn = input.turn.ok_or(LlmError::MissingPlaceholderInput("question"))?;
    if kind != PromptTemplateKind::BinaryJudgment && input.target_code.is_some() {
        return Err(LlmError::UnexpectedInput("target_code"));
    }

    let counterpart = kind.counterpart_label();
    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    values.insert("question", turn.text.clone());
    values.insert("case_background", input.case_background.unwrap_or("(not provided)").to_string());
    values.insert("answer", input.response.map_or_else(|| NONE_TEXT.to_string(), |r| r.text.clone()));

    let all: Vec<&Code> = cb.codes().iter().collect();
    match kind {
        PromptTemplateKind::FullScope => {
            values.insert("codebook", render_scheme(&all, usize::MAX, true));
            values.insert("context", render_context(input.context, counterpart));
        }
        PromptTemplateKind::ReducedScope => {
            let subset = input.code_subset.ok_or(LlmError::MissingPlaceholderInput("code_subset"))?;
            if subset.is_empty() {
                return Err(LlmError::MissingPlaceholderInput("code_subset"));
            }
            values.insert("codebook", render_scheme(&subset_codes(cb, subset)?, 1, true));
            values.insert("context", render_context(input.context, counterpart));
        }
        PromptTemplateKind::BinaryJudgment => {
            let target = input.target_code.ok_or(LlmError::MissingPlaceholderInput("target_code"))?;
            let code = cb.get(target).ok_or_else(|| LlmError::UnknownCode(target.to_string()))?;
            values.insert("target_code", code.id.to_string());
            values.insert("definition", code.definition.clone());
            values.insert("examples", quoted_examples(code, usize::MAX));
            values.insert(
                "keywords",
                if code.keywords.is_empty() { NONE_TEXT.to_string() } else { code.keywords.join(", ") },
            );
            values.insert("context", render_context(input.context, counterpart));
        }
        PromptTemplateKind::QuestionType | PromptTemplateKind::QuestionMechanism => {
            // these templates have no question slot: the utterance closes the context
            let mut turns = input.context.to_vec();
            turns.push(turn.clone());
            values.insert("context", render_context(&turns, counterpart));
            let scheme = render_scheme(&all, usize::MAX, false);
            let names = cb.codes().iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", ");
            if kind == PromptTemplateKind::QuestionType {
                values.insert("question_types_codebook", scheme);
                values.insert("question_types", names);
            } else {
                values.insert("mechanisms_codebook", scheme);
                values.insert("mechanisms", names);
            }
        }
    }

    let template = kind.template();
    let mut messages = Vec::with_capacity(2);
    if let Some(system) = template.system {
        messages.push(ChatMessage { role: Role::System, content: fill(system, &values)? });
    }
    messages.push(ChatMessage { role: Role::User, content: fill(template.user, &values)? });
    Ok(ChatRequest { model_id: model_id.to_string(), messages, temperature: DEFAULT_TEMPERATURE })
}

/// Adds the rationale request to the final user message.
pub fn with_rationale_request(mut request: ChatRequest) -> ChatRequest {
    if let Some(last) = request.messages.iter_mut().rev().find(|m| m.role == Role::User) {
        last.content.push_str(RATIONALE_REQUEST);
    }
    request
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebooks;

    fn turn(text: &str) -> DialogueTurn {
        DialogueTurn::new("t1", "s1", 3, Speaker::Student, text, None)
    }

    #[test]
    fn fill_is_single_pass() {
        let mut v = BTreeMap::new();
        v.insert("a", "{b}".to_string());
        v.insert("b", "x".to_string());
        assert_eq!(fill("<{a}|{b}>", &v).unwrap(), "<{b}|x>");
        assert!(matches!(fill("{zzz}", &v), Err(LlmError::UnknownPlaceholder(_))));
    }

    #[test]
    fn full_scope_lists_every_definition() {
        let cb = codebooks::history_taking();
        let t = turn("Do you have any other discomfort?");
        let req = render_prompt(PromptTemplateKind::FullScope, &cb, &PromptInput::for_turn(&t, &[]), "m").unwrap();
        assert_eq!(req.messages[0].role, Role::System);
        let system = &req.messages[0].content;
        for code in cb.codes() {
            assert!(system.contains(&code.definition), "{}", code.id);
        }
        assert!(system.contains("Output only the code name(s)"));
        assert!(req.messages[1].content.contains("Student Question: Do you have any other discomfort?"));
        assert_eq!(req.temperature, 0.0);
    }

    #[test]
    fn binary_requires_target() {
        let cb = codebooks::history_taking();
        let t = turn("Does it hurt on the stairs?");
        let mut input = PromptInput::for_turn(&t, &[]);
        assert!(matches!(
            render_prompt(PromptTemplateKind::BinaryJudgment, &cb, &input, "m"),
            Err(LlmError::MissingPlaceholderInput("target_code"))
        ));
        input.target_code = Some("PQ");
        let req = render_prompt(PromptTemplateKind::BinaryJudgment, &cb, &input, "m").unwrap();
        assert!(req.messages[1].content.ends_with("Task: Does this question belong to \"PQ\"? Answer Yes or No."));
        assert!(matches!(
            render_prompt(PromptTemplateKind::FullScope, &cb, &input, "m"),
            Err(LlmError::UnexpectedInput("target_code"))
        ));
    }

    #[test]
    fn reduced_scope_needs_subset() {
        let cb = codebooks::history_taking();
        let t = turn("Any other diseases?");
        let mut input = PromptInput::for_turn(&t, &[]);
        assert!(render_prompt(PromptTemplateKind::ReducedScope, &cb, &input, "m").is_err());
        let subset = [CodeId::new("FQ").unwrap(), CodeId::new("CC").unwrap()];
        input.code_subset = Some(&subset);
        let req = render_prompt(PromptTemplateKind::ReducedScope, &cb, &input, "m").unwrap();
        assert!(req.messages[0].content.contains("FQ (Fuzzy Question)"));
        assert!(!req.messages[0].content.contains("RQ (Routine Question)"));
    }

    #[test]
    fn question_kinds_have_no_system_prompt() {
        let cb = codebooks::question_types();
        let t = turn("How to apply AI in education?");
        let req = render_prompt(PromptTemplateKind::QuestionType, &cb, &PromptInput::for_turn(&t, &[]), "m").unwrap();
        assert_eq!(req.messages.len(), 1);
        assert_eq!(req.messages[0].role, Role::User);
        assert!(req.messages[0].content.contains("separated by a slash"));
        assert!(req.messages[0].content.contains("Student: How to apply AI in education?"));
    }

    #[test]
    fn rendering_is_deterministic_and_brace_safe() {
        let cb = codebooks::history_taking();
        let t = turn("what about {context}?");
        let a = render_prompt(PromptTemplateKind::FullScope, &cb, &PromptInput::for_turn(&t, &[]), "m").unwrap();
        let b = render_prompt(PromptTemplateKind::FullScope, &cb, &PromptInput::for_turn(&t, &[]), "m").unwrap();
        assert_eq!(a, b);
        assert!(a.messages[1].content.contains("what about {context}?"));
    }
}
