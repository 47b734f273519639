//! Extraction of a severity label from free-form model output.

use crate::data::SeverityLevel;
use crate::error::LlmError;

/// Finds the last severity level named in `text`, matched case-insensitively
/// on word boundaries so that e.g. "abnormal" does not count as "Normal".
/// Responses naming no level at all are unparseable; scoring them is the
/// caller's concern.
pub fn parse_response(text: &str) -> Result<SeverityLevel, LlmError> {
    let lower = text.to_lowercase();
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let mut best: Option<(usize, SeverityLevel)> = None;
    for level in SeverityLevel::ALL {
        let needle = level.name().to_lowercase();
        let mut from = 0;
        while let Some(off) = lower[from..].find(&needle) {
            let start = from + off;
            let end = start + needle.len();
            let open = !lower[..start].chars().next_back().is_some_and(is_word);
            let closed = !lower[end..].chars().next().is_some_and(is_word);
            if open && closed && best.is_none_or(|(s, _)| start >= s) {
                best = Some((start, level));
            }
            from = start + 1;
        }
    }
    match best {
        Some((_, level)) => Ok(level),
        None => Err(LlmError::Unparseable(text.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_a_plainly_stated_level() {
        assert_eq!(
            parse_response("The likely state is Moderate.").unwrap(),
            SeverityLevel::Moderate
        );
        assert_eq!(parse_response("severe").unwrap(), SeverityLevel::Severe);
        assert_eq!(parse_response("NORMAL!").unwrap(), SeverityLevel::Normal);
    }

    #[test]
    fn last_mention_wins() {
        assert_eq!(
            parse_response("Not Severe; I predict Mild").unwrap(),
            SeverityLevel::Mild
        );
        assert_eq!(
            parse_response("Mild or moderate? Going with moderate.").unwrap(),
            SeverityLevel::Moderate
        );
    }

    #[test]
    fn embedded_words_do_not_match() {
        assert!(parse_response("the pattern is abnormal").is_err());
        assert!(parse_response("severely_mild_case").is_err());
        assert_eq!(
            parse_response("abnormal, but trending Normal").unwrap(),
            SeverityLevel::Normal
        );
    }

    #[test]
    fn empty_or_evasive_text_is_unparseable() {
        for text in ["", "cannot determine", "I need more data."] {
            match parse_response(text) {
                Err(LlmError::Unparseable(t)) => assert_eq!(t, text),
                other => panic!("expected unparseable, got {other:?}"),
            }
        }
    }
}
