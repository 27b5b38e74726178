//! Answer scoring.

/// Decides whether a final answer is correct.
pub trait Scorer {
    fn is_correct(&self, answer: &str, options: &[String], gold: &str) -> bool;
}

/// Multiple choice: the first standalone option label in the answer is the
/// pick. Queries without options fall back to normalized exact match.
#[derive(Debug, Clone, Copy, Default)]
pub struct McqScorer;

/// Case- and whitespace-insensitive exact match, ignoring punctuation at
/// either end.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatchScorer;

/// First word of `answer` (split on anything not alphanumeric) that equals
/// an option label, ignoring case.
pub fn extract_label<'a>(answer: &str, labels: &'a [String]) -> Option<&'a str> {
    answer
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .find_map(|w| labels.iter().find(|l| l.eq_ignore_ascii_case(w)))
        .map(String::as_str)
}

/// 1 if the extracted label equals `gold`, else 0.
pub fn score_mcq(answer: &str, labels: &[String], gold: &str) -> u8 {
    u8::from(extract_label(answer, labels).is_some_and(|l| l.eq_ignore_ascii_case(gold)))
}

fn normalize(s: &str) -> String {
    s.trim_matches(|c: char| !c.is_alphanumeric())
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl Scorer for ExactMatchScorer {
    fn is_correct(&self, answer: &str, _options: &[String], gold: &str) -> bool {
        normalize(answer) == normalize(gold)
    }
}

impl Scorer for McqScorer {
    fn is_correct(&self, answer: &str, options: &[String], gold: &str) -> bool {
        if options.is_empty() {
            ExactMatchScorer.is_correct(answer, options, gold)
        } else {
            score_mcq(answer, options, gold) == 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abcd() -> Vec<String> {
        ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn mcq_examples() {
        assert_eq!(score_mcq("B", &abcd(), "B"), 1);
        assert_eq!(score_mcq("The answer is (c).", &abcd(), "C"), 1);
        assert_eq!(score_mcq("Both A and B seem plausible", &abcd(), "B"), 0);
        assert_eq!(score_mcq("no idea", &abcd(), "B"), 0);
        assert_eq!(score_mcq("B....", &abcd(), "B"), 1);
        // Labels inside words do not count.
        assert_eq!(score_mcq("Definitely D", &abcd(), "D"), 1);
    }

    #[test]
    fn open_ended_fallback() {
        assert!(McqScorer.is_correct("  The Red Car. ", &[], "the red car"));
        assert!(!McqScorer.is_correct("a blue car", &[], "the red car"));
    }
}
