//! Shared text primitives: tokenization, sentence splitting, and
//! word-boundary keyword matching. Every module that touches report text
//! goes through these so that metric values and label extractions are
//! bit-reproducible.

/// Lowercase tokens split on non-alphanumeric characters. Empty tokens are
/// dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Split a report into sentences at `.`, `!`, or `?` followed by whitespace
/// or end of input. The terminator stays with its sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(pos, c)) in chars.iter().enumerate() {
        if c == '.' || c == '!' || c == '?' {
            let next = chars.get(i + 1).map(|&(_, n)| n);
            if next.is_none() || next.is_some_and(|n| n.is_whitespace()) {
                let end = pos + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    sentences.push(s.to_string());
                }
                start = end;
            }
        }
    }
    if start < bytes.len() {
        let s = text[start..].trim();
        if !s.is_empty() {
            sentences.push(s.to_string());
        }
    }
    sentences
}

/// Case-insensitive word-boundary containment: `needle` (already lowercase)
/// occurs in `haystack` with non-alphanumeric characters (or string edges)
/// on both sides.
pub fn contains_keyword(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let hay = haystack.to_lowercase();
    let mut from = 0;
    while let Some(off) = hay[from..].find(needle) {
        let at = from + off;
        let before_ok = at == 0
            || !hay[..at]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric());
        let after = at + needle.len();
        let after_ok = after == hay.len()
            || !hay[after..].chars().next().is_some_and(|c| c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
        from = at + needle.len().max(1);
    }
    false
}

/// Case-folded, whitespace-normalized form used for sentence deduplication.
pub fn normalize_sentence(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}
