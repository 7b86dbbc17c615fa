//! Tokenisation shared by the embedder, the rule-based provider, the offline
//! oracles and the evaluation metrics.

use std::collections::HashSet;
use std::sync::OnceLock;

/// Version tag of the embedded stopword list. Bump when the list changes.
pub const STOPWORDS_VERSION: &str = "en-179-v1";

const STOPWORDS: &[&str] = &[
    "i",
    "me",
    "my",
    "myself",
    "we",
    "our",
    "ours",
    "ourselves",
    "you",
    "you're",
    "you've",
    "you'll",
    "you'd",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "he",
    "him",
    "his",
    "himself",
    "she",
    "she's",
    "her",
    "hers",
    "herself",
    "it",
    "it's",
    "its",
    "itself",
    "they",
    "them",
    "their",
    "theirs",
    "themselves",
    "what",
    "which",
    "who",
    "whom",
    "this",
    "that",
    "that'll",
    "these",
    "those",
    "am",
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "being",
    "have",
    "has",
    "had",
    "having",
    "do",
    "does",
    "did",
    "doing",
    "a",
    "an",
    "the",
    "and",
    "but",
    "if",
    "or",
    "because",
    "as",
    "until",
    "while",
    "of",
    "at",
    "by",
    "for",
    "with",
    "about",
    "against",
    "between",
    "into",
    "through",
    "during",
    "before",
    "after",
    "above",
    "below",
    "to",
    "from",
    "up",
    "down",
    "in",
    "out",
    "on",
    "off",
    "over",
    "under",
    "again",
    "further",
    "then",
    "once",
    "here",
    "there",
    "when",
    "where",
    "why",
    "how",
    "all",
    "any",
    "both",
    "each",
    "few",
    "more",
    "most",
    "other",
    "some",
    "such",
    "no",
    "nor",
    "not",
    "only",
    "own",
    "same",
    "so",
    "than",
    "too",
    "very",
    "s",
    "t",
    "can",
    "will",
    "just",
    "don",
    "don't",
    "should",
    "should've",
    "now",
    "d",
    "ll",
    "m",
    "o",
    "re",
    "ve",
    "y",
    "ain",
    "aren",
    "aren't",
    "couldn",
    "couldn't",
    "didn",
    "didn't",
    "doesn",
    "doesn't",
    "hadn",
    "hadn't",
    "hasn",
    "hasn't",
    "haven",
    "haven't",
    "isn",
    "isn't",
    "ma",
    "mightn",
    "mightn't",
    "mustn",
    "mustn't",
    "needn",
    "needn't",
    "shan",
    "shan't",
    "shouldn",
    "shouldn't",
    "wasn",
    "wasn't",
    "weren",
    "weren't",
    "won",
    "won't",
    "wouldn",
    "wouldn't",
];

fn stopword_set() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| {
        let mut set = HashSet::new();
        for w in STOPWORDS {
            set.insert((*w).to_string());
            // metric tokenisation drops apostrophes, so "don't" arrives as "dont"
            set.insert(w.replace('\'', ""));
        }
        set
    })
}

pub fn is_stopword(token: &str) -> bool {
    stopword_set().contains(token)
}

pub fn stopword_count() -> usize {
    STOPWORDS.len()
}

/// Lowercased maximal alphanumeric runs.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Word tokens with stopwords removed.
pub fn content_words(text: &str) -> Vec<String> {
    word_tokens(text)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .collect()
}

/// Tokenisation used by the metrics: lowercase, split on whitespace, drop
/// punctuation. A `-` or `/` between two alphanumerics is kept so that dates
/// like `2024-03-14` or `3/14/2024` survive as one token.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let chars: Vec<char> = raw.chars().collect();
        let mut tok = String::new();
        for (i, &c) in chars.iter().enumerate() {
            if c.is_alphanumeric() {
                tok.extend(c.to_lowercase());
            } else if (c == '-' || c == '/')
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric()
            {
                tok.push(c);
            }
        }
        if !tok.is_empty() {
            out.push(tok);
        }
    }
    out
}

/// Distinct metric tokens that are not stopwords, in first-seen order.
pub fn content_tokens(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    metric_tokens(text)
        .into_iter()
        .filter(|t| !is_stopword(t) && seen.insert(t.clone()))
        .collect()
}

/// Whitespace-delimited token count, the offline unit of token accounting.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopword_list_size() {
        assert!((170..=190).contains(&stopword_count()));
        assert!(is_stopword("the"));
        assert!(is_stopword("dont"));
        assert!(!is_stopword("hiking"));
    }

    #[test]
    fn metric_tokens_keep_dates() {
        assert_eq!(
            metric_tokens("On 2024-03-14, 'Becoming Nicole'!"),
            vec!["on", "2024-03-14", "becoming", "nicole"]
        );
        assert_eq!(metric_tokens("3/14/2024 -- x"), vec!["3/14/2024", "x"]);
        assert_eq!(metric_tokens("Caroline's"), vec!["carolines"]);
    }

    #[test]
    fn word_tokens_split_on_punct() {
        assert_eq!(
            word_tokens("Hiking-boots, GEAR"),
            vec!["hiking", "boots", "gear"]
        );
        assert!(word_tokens("!!!").is_empty());
    }

    #[test]
    fn content_tokens_dedup() {
        assert_eq!(
            content_tokens("the hiking and the hiking trip"),
            vec!["hiking", "trip"]
        );
        assert!(content_tokens("the of and").is_empty());
    }
}
