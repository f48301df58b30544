//! Rule-based mapping of free-text model answers to yes / no / unresolved.

use crate::labels::Prediction;

/// Identifies the rule set below. Results are comparable only within one
/// version.
pub const RULESET_VERSION: &str = "normalizer-v1";

const YES_PHRASES: &[&[&str]] = &[
    &["yes"],
    &["there", "is"],
    &["there", "are"],
    &["it", "is"],
    &["correct"],
    &["right"],
];

const NO_PHRASES: &[&[&str]] = &[
    &["no"],
    &["there", "is", "no"],
    &["there", "are", "no"],
    &["not"],
    &["isn't"],
    &["aren't"],
    &["incorrect"],
];

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\''))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn contains_phrase(tokens: &[String], phrase: &[&str]) -> bool {
    tokens
        .windows(phrase.len())
        .any(|w| w.iter().zip(phrase).all(|(t, p)| t == p))
}

/// Applies, in order:
/// 1. lowercase, fold typographic apostrophes, strip leading
///    punctuation and whitespace;
/// 2. a leading `yes` / `no` token decides;
/// 3. otherwise, if phrases of exactly one family occur anywhere, that
///    family decides;
/// 4. otherwise the answer is unresolved.
pub fn normalize_answer(raw: &str) -> Prediction {
    let lowered = raw.to_lowercase().replace(['\u{2019}', '\u{2018}'], "'");
    let trimmed = lowered.trim_start_matches(|c: char| !c.is_alphanumeric());
    let tokens = tokens(trimmed);

    match tokens.first().map(String::as_str) {
        Some("yes") => return Prediction::Yes,
        Some("no") => return Prediction::No,
        _ => {}
    }

    let yes = YES_PHRASES.iter().any(|p| contains_phrase(&tokens, p));
    let no = NO_PHRASES.iter().any(|p| contains_phrase(&tokens, p));
    match (yes, no) {
        (true, false) => Prediction::Yes,
        (false, true) => Prediction::No,
        _ => Prediction::Unresolved,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Prediction::{No, Unresolved, Yes};

    #[test]
    fn leading_token_decides() {
        assert_eq!(normalize_answer("Yes, there is a dog in the image."), Yes);
        assert_eq!(normalize_answer("No."), No);
        assert_eq!(normalize_answer("  **No**, there isn't."), No);
        assert_eq!(normalize_answer("\"Yes\""), Yes);
        assert_eq!(normalize_answer("YES"), Yes);
    }

    #[test]
    fn conflicting_families_are_unresolved() {
        assert_eq!(
            normalize_answer("The image shows a cat, not a dog; so there is no dog."),
            Unresolved
        );
    }

    #[test]
    fn single_family_anywhere() {
        assert_eq!(normalize_answer("There is a red car."), Yes);
        assert_eq!(normalize_answer("I believe that's correct."), Yes);
        assert_eq!(normalize_answer("That is incorrect."), No);
        assert_eq!(normalize_answer("The cups aren't visible."), No);
        assert_eq!(normalize_answer("The cup isn\u{2019}t visible."), No);
    }

    #[test]
    fn whole_tokens_only() {
        // "nothing" and "note" must not count as "no"/"not".
        assert_eq!(normalize_answer("Nothing to note here."), Unresolved);
        assert_eq!(normalize_answer("Yesterday it rained."), Unresolved);
    }

    #[test]
    fn empty_and_noise_are_unresolved() {
        assert_eq!(normalize_answer(""), Unresolved);
        assert_eq!(normalize_answer("..."), Unresolved);
        assert_eq!(normalize_answer("A dog."), Unresolved);
    }
}
