use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

const BENGALI_DANDA: char = '\u{0964}';
const BENGALI_DOUBLE_DANDA: char = '\u{0965}';

/// Punctuation that separates tokens besides whitespace.
pub fn is_separator(c: char) -> bool {
    c.is_whitespace()
        || c.is_ascii_punctuation()
        || c == BENGALI_DANDA
        || c == BENGALI_DOUBLE_DANDA
        || matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}')
        || matches!(c, '«' | '»' | '¡' | '¿' | '·')
}

fn is_latin_letter(c: char) -> bool {
    c.is_alphabetic() && ((c as u32) < 0x0250 || ('\u{1E00}'..='\u{1EFF}').contains(&c))
}

/// NFC-normalizes `text`, splits it on whitespace and punctuation and
/// lowercases Latin letters. Bengali vowel signs, virama and ZWJ/ZWNJ are
/// never separators, so they stay attached to their base consonant.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect();
    normalized
        .split(is_separator)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.chars()
                .flat_map(|c| {
                    let lower: Vec<char> = if is_latin_letter(c) {
                        c.to_lowercase().collect()
                    } else {
                        vec![c]
                    };
                    lower
                })
                .nfc()
                .collect()
        })
        .collect()
}

/// [`tokenize`] for raw bytes; invalid UTF-8 is an [`Error::Encoding`].
pub fn tokenize_bytes(bytes: &[u8]) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Encoding(e.to_string()))?;
    Ok(tokenize(text))
}
