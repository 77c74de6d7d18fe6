//! Keyword extraction shared by linting, the rule critic and stub scoring.

use std::collections::BTreeSet;

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "from", "into", "that", "this", "these", "those", "then", "than",
    "are", "was", "were", "will", "would", "should", "could", "can", "use", "using", "make",
    "create", "some", "any", "all", "each", "its", "our", "your", "their", "them", "they", "you",
    "please", "about", "over", "under", "onto", "out", "per", "via", "also", "very", "more",
    "most", "such", "has", "have", "had", "not", "but", "who", "what", "which", "when", "where",
    "how", "based", "given", "want", "like",
];

/// Lower-cased alphanumeric tokens of length >= 3 that are not stopwords,
/// in order of first appearance.
pub fn keywords(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .map(|t| t.to_ascii_lowercase())
        .filter(|t| t.len() >= 3 && !STOPWORDS.contains(&t.as_str()))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

pub fn keyword_set(text: &str) -> BTreeSet<String> {
    keywords(text).into_iter().collect()
}

pub fn shares_keyword(a: &str, b: &str) -> bool {
    let a = keyword_set(a);
    keywords(b).iter().any(|k| a.contains(k))
}

/// Fraction of `reference` keywords present in `candidate`.
/// An empty reference matches only an empty candidate.
pub fn recall(reference: &str, candidate: &str) -> f64 {
    let reference = keyword_set(reference);
    let candidate = keyword_set(candidate);
    if reference.is_empty() {
        return if candidate.is_empty() { 1.0 } else { 0.0 };
    }
    reference.intersection(&candidate).count() as f64 / reference.len() as f64
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    let a = keyword_set(a);
    let b = keyword_set(b);
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}
