//! Parsing of model answers into code lists or yes/no verdicts.

use super::templates::PromptTemplateKind;
use super::LlmError;
use crate::domain::{CodeId, Codebook, Verdict};

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedResponse {
    Codes { codes: Vec<CodeId>, unknown: Vec<String> },
    Binary(Verdict),
}

/// Separators between codes: ASCII and full-width commas, the ideographic
/// enumeration comma, slashes, semicolons and line breaks.
fn is_separator(c: char) -> bool {
    matches!(c, ',' | '，' | '、' | '/' | ';' | '；' | '\n' | '\r')
}

fn clean_token(token: &str) -> &str {
    token
        .trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*' | '“' | '”' | '‘' | '’' | '.' | '。' | '[' | ']'))
        .trim()
}

/// Splits a trailing `Rationale:` line off a response. Returns the code part
/// and the rationale, if any.
pub fn split_rationale(text: &str) -> (&str, Option<String>) {
    const MARKER: &str = "rationale:";
    let pos = text
        .char_indices()
        .map(|(i, _)| i)
        .find(|&i| text.get(i..i + MARKER.len()).is_some_and(|s| s.eq_ignore_ascii_case(MARKER)));
    match pos {
        Some(pos) => {
            let rationale = text[pos + MARKER.len()..].trim();
            (text[..pos].trim(), (!rationale.is_empty()).then(|| rationale.to_string()))
        }
        None => (text, None),
    }
}

fn parse_binary(text: &str) -> Result<Verdict, LlmError> {
    let word: String = clean_token(text)
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" | "是" => Ok(Verdict::Yes),
        "no" | "否" => Ok(Verdict::No),
        _ => Err(LlmError::AmbiguousBinary(text.trim().to_string())),
    }
}

/// Parses a model answer. Code lists are split on commas and slashes and
/// matched case-insensitively against code ids and names; duplicates keep
/// their first position. Tokens that match nothing are returned in
/// `unknown`; if nothing matches at all the answer is rejected.
pub fn parse_code_response(text: &str, cb: &Codebook, kind: PromptTemplateKind) -> Result<ParsedResponse, LlmError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(LlmError::EmptyResponse);
    }
    if kind == PromptTemplateKind::BinaryJudgment {
        return parse_binary(text).map(ParsedResponse::Binary);
    }

    let mut codes: Vec<CodeId> = Vec::new();
    let mut unknown = Vec::new();
    for raw in text.split(is_separator) {
        let token = clean_token(raw);
        if token.is_empty() {
            continue;
        }
        match cb.lookup(token) {
            Some(code) => {
                if !codes.contains(&code.id) {
                    codes.push(code.id.clone());
                }
            }
            None => unknown.push(token.to_string()),
        }
    }
    if codes.is_empty() {
        return match unknown.first() {
            Some(first) => Err(LlmError::UnknownCode(first.clone())),
            None => Err(LlmError::EmptyResponse),
        };
    }
    Ok(ParsedResponse::Codes { codes, unknown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebooks;
    use proptest::prelude::*;

    fn codes(r: ParsedResponse) -> Vec<String> {
        match r {
            ParsedResponse::Codes { codes, .. } => codes.iter().map(|c| c.to_string()).collect(),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn template_output_forms() {
        let cb = codebooks::history_taking();
        assert_eq!(codes(parse_code_response("RQ, CC", &cb, PromptTemplateKind::FullScope).unwrap()), ["RQ", "CC"]);
        let qt = codebooks::question_types();
        assert_eq!(
            codes(parse_code_response("Verification/Instrumental", &qt, PromptTemplateKind::QuestionType).unwrap()),
            ["Verification", "Instrumental"]
        );
        assert_eq!(
            parse_code_response("Yes", &cb, PromptTemplateKind::BinaryJudgment).unwrap(),
            ParsedResponse::Binary(Verdict::Yes)
        );
    }

    #[test]
    fn lenient_formatting() {
        let cb = codebooks::history_taking();
        assert_eq!(codes(parse_code_response(" `rq`，cc.\n", &cb, PromptTemplateKind::FullScope).unwrap()), ["RQ", "CC"]);
        assert_eq!(codes(parse_code_response("Routine Question", &cb, PromptTemplateKind::FullScope).unwrap()), ["RQ"]);
        assert_eq!(
            parse_code_response("No.", &cb, PromptTemplateKind::BinaryJudgment).unwrap(),
            ParsedResponse::Binary(Verdict::No)
        );
        let qt = codebooks::question_types();
        assert_eq!(
            codes(parse_code_response("\"Direct Request\"", &qt, PromptTemplateKind::QuestionType).unwrap()),
            ["DirectRequest"]
        );
    }

    #[test]
    fn partial_and_failures() {
        let cb = codebooks::history_taking();
        match parse_code_response("RQ, banana", &cb, PromptTemplateKind::FullScope).unwrap() {
            ParsedResponse::Codes { codes, unknown } => {
                assert_eq!(codes, [CodeId::new("RQ").unwrap()]);
                assert_eq!(unknown, ["banana"]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_code_response("banana", &cb, PromptTemplateKind::FullScope), Err(LlmError::UnknownCode(_))));
        assert!(matches!(parse_code_response("  ", &cb, PromptTemplateKind::FullScope), Err(LlmError::EmptyResponse)));
        assert!(matches!(parse_code_response(", ,", &cb, PromptTemplateKind::FullScope), Err(LlmError::EmptyResponse)));
        assert!(matches!(
            parse_code_response("Maybe", &cb, PromptTemplateKind::BinaryJudgment),
            Err(LlmError::AmbiguousBinary(_))
        ));
        assert!(matches!(
            parse_code_response("Nope", &cb, PromptTemplateKind::BinaryJudgment),
            Err(LlmError::AmbiguousBinary(_))
        ));
    }

    #[test]
    fn rationale_split() {
        let (codes, why) = split_rationale("FQ\nRationale: The question is vague.");
        assert_eq!(codes, "FQ");
        assert_eq!(why.as_deref(), Some("The question is vague."));
        assert_eq!(split_rationale("FQ"), ("FQ", None));
    }

    proptest! {
        #[test]
        fn every_code_round_trips(idx in 0usize..12, upper in any::<bool>(), pad in "[ \t]{0,3}") {
            let cb = codebooks::history_taking();
            let id = cb.codes()[idx].id.to_string();
            let rendered = format!("{pad}{}{pad}", if upper { id.clone() } else { id.to_lowercase() });
            prop_assert_eq!(codes(parse_code_response(&rendered, &cb, PromptTemplateKind::FullScope).unwrap()), vec![id]);
        }
    }
}
