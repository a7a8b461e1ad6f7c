//! Token and byte classification.
//!
//! Every vocabulary entry gets a set of category flags — partial UTF-8,
//! unreachable, special, byte token — and only tokens with none of the
//! exclusion flags are eligible for prompt-based verification. The byte
//! audit classifies each of the 256 byte values by its role in UTF-8.

use serde::{Deserialize, Serialize};

use crate::tokenizer::{
    parse_byte_fallback_surface, ByteAlphabet, TokenRecord, TokenSource, TokenizerError,
    TokenizerModel,
};

/// Role of a byte value in UTF-8 encoded text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ByteClass {
    /// 0xxxxxxx — a complete one-byte character.
    Ascii,
    /// 10xxxxxx — continuation of a multi-byte sequence.
    Continuation,
    /// 110xxxxx — leads a 2-byte sequence (0xC2–0xDF).
    Lead2,
    /// 1110xxxx — leads a 3-byte sequence.
    Lead3,
    /// 11110xxx — leads a 4-byte sequence covering assigned planes (0xF0, 0xF3).
    Lead4,
    /// Structurally valid lead bytes whose code-point ranges hold no assigned
    /// characters today: 0xF1, 0xF2 (unassigned planes) and 0xF4 (private use).
    CurrentlyUnassigned,
    /// Bytes that can never appear in UTF-8: 0xC0, 0xC1 (overlong encodings)
    /// and 0xF5–0xFF (beyond U+10FFFF).
    NeverValid,
}

/// Classifies a byte value by its UTF-8 role.
pub fn classify_byte(byte: u8) -> ByteClass {
    match byte {
        0xC0 | 0xC1 | 0xF5..=0xFF => ByteClass::NeverValid,
        0x00..=0x7F => ByteClass::Ascii,
        0x80..=0xBF => ByteClass::Continuation,
        0xC2..=0xDF => ByteClass::Lead2,
        0xE0..=0xEF => ByteClass::Lead3,
        0xF0 | 0xF3 => ByteClass::Lead4,
        0xF1 | 0xF2 | 0xF4 => ByteClass::CurrentlyUnassigned,
    }
}

/// Category flags for one token. `ByteToken` is informational; the other
/// three each exclude a token from verification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFlags {
    /// Raw bytes are not a complete valid UTF-8 sequence.
    pub partial_utf8: bool,
    /// Decodes to text, but that text never re-encodes to exactly this id.
    pub unreachable: bool,
    /// Marked special in the config, or surface shaped like `<...>` / `[...]`.
    pub special: bool,
    /// Represents exactly one raw byte.
    pub byte_token: bool,
}

impl TokenFlags {
    /// True when no exclusion flag is set: the token decodes to text, that
    /// text round-trips to the same id, and it is not a special token.
    pub fn ok_for_testing(&self) -> bool {
        !(self.partial_utf8 || self.unreachable || self.special)
    }
}

/// Classification of a single token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCategory {
    pub id: u32,
    /// Display-safe surface (raw bytes hex-escaped where undecodable).
    pub surface: String,
    pub flags: TokenFlags,
    /// Redundant with `flags` but kept explicit in serialized reports.
    pub ok_for_testing: bool,
}

/// Taxonomy of a whole vocabulary plus summary counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyReport {
    pub vocab_size: usize,
    pub counts: TaxonomyCounts,
    pub tokens: Vec<TokenCategory>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyCounts {
    pub ok_for_testing: usize,
    pub partial_utf8: usize,
    pub unreachable: usize,
    pub special: usize,
    pub byte_tokens: usize,
}

/// Renders token bytes for humans: valid UTF-8 is shown as text with leading
/// spaces marked "_", everything else is shown byte-by-byte with `\xNN`
/// escapes. Control characters and backslashes are escaped in both cases.
pub fn display_form(raw_bytes: &[u8]) -> String {
    fn push_escaped_char(out: &mut String, c: char) {
        match c {
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\x{:02X}", c as u32)),
            c => out.push(c),
        }
    }

    let mut out = String::new();
    match std::str::from_utf8(raw_bytes) {
        Ok(text) => {
            let trimmed = text.trim_start_matches(' ');
            for _ in 0..text.len() - trimmed.len() {
                out.push('_');
            }
            for c in trimmed.chars() {
                push_escaped_char(&mut out, c);
            }
        }
        Err(_) => {
            for &b in raw_bytes {
                if b.is_ascii() && !b.is_ascii_control() && b != b'\\' {
                    out.push(b as char);
                } else {
                    out.push_str(&format!("\\x{b:02X}"));
                }
            }
        }
    }
    out
}

/// True for surfaces shaped like `<...>` or `[...]` with non-empty content.
fn matches_special_pattern(surface: &str) -> bool {
    let bytes = surface.as_bytes();
    if bytes.len() < 3 {
        return false;
    }
    matches!(
        (bytes[0], bytes[bytes.len() - 1]),
        (b'<', b'>') | (b'[', b']')
    )
}

/// Classifies one decoded token record.
pub fn classify_token(model: &TokenizerModel, record: &TokenRecord) -> TokenCategory {
    let byte_token = record.raw_bytes.len() == 1;
    let partial_utf8 = record.decoded_text.is_none();

    // Explicit added-token metadata wins over the bracket heuristic; explicit
    // `<0xNN>` byte tokens are a fallback encoding mechanism, not specials.
    let special = match record.source {
        TokenSource::Special => true,
        TokenSource::Added => false,
        TokenSource::Trained => {
            let is_fallback_byte = model.byte_alphabet() == ByteAlphabet::ByteFallback
                && parse_byte_fallback_surface(&record.surface).is_some();
            !is_fallback_byte && matches_special_pattern(&record.surface)
        }
    };

    // Reachability is only defined for decodable, non-special tokens: does
    // the decoded text re-encode to exactly this id? An encode error counts
    // as unreachable (the text cannot reproduce the token at all).
    let unreachable = match (&record.decoded_text, special) {
        (Some(text), false) => match model.encode(text) {
            Ok(ids) => ids != vec![record.id],
            Err(_) => true,
        },
        _ => false,
    };

    let flags = TokenFlags { partial_utf8, unreachable, special, byte_token };
    TokenCategory {
        id: record.id,
        surface: display_form(&record.raw_bytes),
        ok_for_testing: flags.ok_for_testing(),
        flags,
    }
}

/// Classifies every token id in `[0, vocab_size)`.
pub fn taxonomy_report(model: &TokenizerModel) -> Result<TaxonomyReport, TokenizerError> {
    let mut tokens = Vec::with_capacity(model.vocab_size());
    let mut counts = TaxonomyCounts::default();
    for id in 0..model.vocab_size() as u32 {
        let record = model.decode_token(id)?;
        let category = classify_token(model, &record);
        counts.ok_for_testing += category.flags.ok_for_testing() as usize;
        counts.partial_utf8 += category.flags.partial_utf8 as usize;
        counts.unreachable += category.flags.unreachable as usize;
        counts.special += category.flags.special as usize;
        counts.byte_tokens += category.flags.byte_token as usize;
        tokens.push(category);
    }
    Ok(TaxonomyReport { vocab_size: model.vocab_size(), counts, tokens })
}
