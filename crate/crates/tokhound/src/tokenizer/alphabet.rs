//! Byte-alphabet conventions used by byte-level BPE vocabularies.
//!
//! Two conventions cover every supported model family:
//!
//! * [`ByteAlphabet::ByteToCharTable`] — the GPT-2 scheme that remaps all 256
//!   byte values onto printable Unicode characters, so vocabulary surfaces are
//!   always valid text even when the underlying bytes are not.
//! * [`ByteAlphabet::ByteFallback`] — the SentencePiece-derived scheme in which
//!   a leading space is written as the marker "▁" (U+2581) and arbitrary bytes
//!   are representable through explicit `<0xNN>` single-byte tokens.

use std::collections::HashMap;
use std::sync::OnceLock;

/// Marker character standing in for a space in byte-fallback vocabularies.
pub const SPACE_MARKER: char = '\u{2581}';

/// Which byte↔surface convention a vocabulary uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ByteAlphabet {
    /// GPT-2 style printable remapping of all 256 byte values.
    #[serde(rename = "byte_to_char")]
    ByteToCharTable,
    /// "▁" space marker plus `<0xNN>` single-byte tokens.
    #[serde(rename = "byte_fallback")]
    ByteFallback,
}

/// The GPT-2 byte→character table.
///
/// Printable bytes that are safe to show directly (0x21–0x7E, 0xA1–0xAC,
/// 0xAE–0xFF) map to the character with the same code point; the remaining 68
/// bytes are assigned the code points 256, 257, … in ascending byte order, so
/// e.g. space (0x20) becomes 'Ġ' (U+0120).
pub fn byte_to_char_table() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let mut next_remap = 256u32;
        for b in 0..=255u8 {
            table[b as usize] = if matches!(b, 0x21..=0x7E | 0xA1..=0xAC | 0xAE..=0xFF) {
                char::from_u32(b as u32).unwrap()
            } else {
                let c = char::from_u32(next_remap).unwrap();
                next_remap += 1;
                c
            };
        }
        debug_assert_eq!(next_remap, 256 + 68);
        table
    })
}

/// Inverse of [`byte_to_char_table`].
pub fn char_to_byte_table() -> &'static HashMap<char, u8> {
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| {
        byte_to_char_table()
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect()
    })
}

/// Maps raw text bytes onto the GPT-2 printable alphabet.
pub fn bytes_to_table_chars(bytes: &[u8]) -> String {
    let table = byte_to_char_table();
    bytes.iter().map(|&b| table[b as usize]).collect()
}

/// Recovers raw bytes from a GPT-2 table surface. `None` if any character is
/// not part of the table (the surface then cannot come from this alphabet).
pub fn table_chars_to_bytes(surface: &str) -> Option<Vec<u8>> {
    let table = char_to_byte_table();
    surface.chars().map(|c| table.get(&c).copied()).collect()
}

/// Parses a `<0xNN>` byte-fallback surface into its byte value.
pub fn parse_byte_fallback_surface(surface: &str) -> Option<u8> {
    let hex = surface.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

/// Renders the canonical `<0xNN>` surface for a byte value.
pub fn byte_fallback_surface(byte: u8) -> String {
    format!("<0x{byte:02X}>")
}

/// Raw bytes for a byte-fallback surface: `<0xNN>` tokens carry exactly their
/// byte; anything else is its UTF-8 bytes with "▁" markers restored to spaces.
pub fn fallback_surface_to_bytes(surface: &str) -> Vec<u8> {
    if let Some(byte) = parse_byte_fallback_surface(surface) {
        return vec![byte];
    }
    surface.replace(SPACE_MARKER, " ").into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_a_bijection_over_all_bytes() {
        let fwd = byte_to_char_table();
        let bwd = char_to_byte_table();
        assert_eq!(bwd.len(), 256);
        for b in 0..=255u8 {
            assert_eq!(bwd[&fwd[b as usize]], b);
        }
    }

    #[test]
    fn printable_bytes_map_to_themselves() {
        let table = byte_to_char_table();
        assert_eq!(table[b'!' as usize], '!');
        assert_eq!(table[b'~' as usize], '~');
        assert_eq!(table[0xA1], '¡');
        assert_eq!(table[0xFF], 'ÿ');
    }

    #[test]
    fn remapped_bytes_use_code_points_from_256() {
        let table = byte_to_char_table();
        // 0x00 is the first unprintable byte, 0x20 (space) the 33rd.
        assert_eq!(table[0x00], char::from_u32(256).unwrap());
        assert_eq!(table[0x20], char::from_u32(256 + 32).unwrap());
        assert_eq!(table[0x20], 'Ġ');
        // 0xAD (soft hyphen) is the last remapped byte.
        assert_eq!(table[0xAD], char::from_u32(256 + 67).unwrap());
    }

    #[test]
    fn byte_fallback_surface_roundtrip() {
        for b in [0x00u8, 0x0A, 0x41, 0xF5, 0xFF] {
            assert_eq!(parse_byte_fallback_surface(&byte_fallback_surface(b)), Some(b));
        }
        assert_eq!(parse_byte_fallback_surface("<0xf5>"), Some(0xF5));
        assert_eq!(parse_byte_fallback_surface("<0xGG>"), None);
        assert_eq!(parse_byte_fallback_surface("<0x123>"), None);
        assert_eq!(parse_byte_fallback_surface("the"), None);
    }

    #[test]
    fn fallback_surfaces_restore_space_markers() {
        assert_eq!(fallback_surface_to_bytes("▁the"), b" the");
        assert_eq!(fallback_surface_to_bytes("▁▁"), b"  ");
        assert_eq!(fallback_surface_to_bytes("<0xF5>"), vec![0xF5]);
    }

    #[test]
    fn table_chars_reject_foreign_characters() {
        assert_eq!(table_chars_to_bytes("Ġthe"), Some(b" the".to_vec()));
        // "▁" belongs to the fallback convention, not the GPT-2 table.
        assert_eq!(table_chars_to_bytes("▁the"), None);
    }
}
