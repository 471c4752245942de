//! Text normalization and word tokenization shared by every corpus reader.

use unicode_normalization::UnicodeNormalization;

/// Punctuation split off from adjacent word characters. Underscore and angle
/// brackets are excluded so `hin_Deva` and `<sep>` survive as single tokens.
const DETACHED: &[char] = &[
    '.', ',', '!', '?', ';', ':', '"', '\'', '(', ')', '[', ']', '{', '}', '।', '॥', '“', '”',
    '‘', '’',
];

/// NFC-normalizes `line`, splits on whitespace and detaches punctuation.
pub fn tokenize(line: &str) -> Vec<String> {
    let normalized: String = line.nfc().collect();
    let mut tokens = Vec::new();
    for chunk in normalized.split_whitespace() {
        let mut current = String::new();
        for ch in chunk.chars() {
            if DETACHED.contains(&ch) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}
