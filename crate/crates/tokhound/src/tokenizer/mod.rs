//! Tokenizer loading and deterministic byte-level BPE encoding/decoding.
//!
//! The model is deliberately minimal: a vocabulary, ranked merge rules, one
//! pre-tokenization regex, added-token literals, and one of two byte-alphabet
//! conventions. That is enough to decode any vocabulary entry back to raw
//! bytes and to re-encode arbitrary text, which is all the reachability test
//! and the verification prompts require.

mod alphabet;
mod bpe;
mod loader;

pub use alphabet::{
    byte_fallback_surface, byte_to_char_table, bytes_to_table_chars, char_to_byte_table,
    parse_byte_fallback_surface, table_chars_to_bytes, ByteAlphabet, SPACE_MARKER,
};
pub use loader::{load_tokenizer, tokenizer_from_value, GPT2_PRE_TOKENIZER_PATTERN};

use std::collections::HashMap;
use std::fmt;

/// Errors raised while loading or interrogating a tokenizer definition.
#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("unsupported model type: {0}")]
    UnsupportedModelType(String),
    #[error("malformed tokenizer config: {0}")]
    MalformedConfig(String),
    #[error("duplicate token id {0}")]
    DuplicateTokenId(u32),
    #[error("token id {0} out of range (vocab size {1})")]
    IdOutOfRange(u32, usize),
    #[error("failed to read tokenizer file: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors raised by [`TokenizerModel::encode`].
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EncodeError {
    /// A symbol survived merging but has no vocabulary entry and no byte
    /// token to fall back on. Reports the first unrepresentable byte.
    #[error("no vocabulary entry can represent byte 0x{byte:02X}")]
    SymbolNotInVocab { byte: u8 },
    /// The pre-tokenization regex failed at match time (e.g. a backtracking
    /// limit); should not happen with the supported patterns.
    #[error("pre-tokenization failed: {0}")]
    PreTokenization(String),
}

/// Where a token definition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TokenSource {
    /// Ordinary vocabulary entry produced by BPE training.
    Trained,
    /// Listed in `added_tokens` without the special flag.
    Added,
    /// Listed in `added_tokens` with the special flag set.
    Special,
}

/// One fully decoded vocabulary entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub id: u32,
    /// Surface form as stored in the vocabulary (alphabet symbols).
    pub surface: String,
    /// Exact bytes the token expands to after reversing the byte alphabet.
    pub raw_bytes: Vec<u8>,
    /// Present iff `raw_bytes` is a complete, valid UTF-8 sequence.
    pub decoded_text: Option<String>,
    pub source: TokenSource,
}

/// An added-token literal matched verbatim ahead of pre-tokenization.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AddedToken {
    pub id: u32,
    pub content: String,
    pub special: bool,
}

/// A loaded, validated BPE tokenizer.
#[derive(Clone)]
pub struct TokenizerModel {
    vocab: HashMap<String, u32>,
    surfaces: Vec<String>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), u32>,
    pattern: Option<fancy_regex::Regex>,
    pattern_source: String,
    /// Sorted longest-content-first for the greedy scan.
    added_tokens: Vec<AddedToken>,
    added_by_id: HashMap<u32, usize>,
    byte_alphabet: ByteAlphabet,
    /// Skip the merge loop for pre-tokens that already exist verbatim in the
    /// vocabulary (matches the serialized `ignore_merges` flag).
    ignore_merges: bool,
}

impl fmt::Debug for TokenizerModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenizerModel")
            .field("vocab_size", &self.surfaces.len())
            .field("merges", &self.merges.len())
            .field("added_tokens", &self.added_tokens.len())
            .field("byte_alphabet", &self.byte_alphabet)
            .field("pattern", &self.pattern_source)
            .finish()
    }
}

enum Segment<'a> {
    Text(&'a str),
    Added(u32),
}

impl TokenizerModel {
    /// Number of defined token ids; ids are dense in `[0, vocab_size)`.
    pub fn vocab_size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn byte_alphabet(&self) -> ByteAlphabet {
        self.byte_alphabet
    }

    /// The pre-tokenization regex source, empty when no splitting applies.
    pub fn pre_tokenizer_pattern(&self) -> &str {
        &self.pattern_source
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn added_tokens(&self) -> &[AddedToken] {
        &self.added_tokens
    }

    /// Looks up a surface form directly.
    pub fn id_for_surface(&self, surface: &str) -> Option<u32> {
        self.vocab.get(surface).copied()
    }

    /// Encodes text to token ids: added-token literals are matched greedily
    /// (longest first), remaining text is split by the pre-tokenizer, and
    /// each pre-token runs through the merge loop.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, EncodeError> {
        let mut ids = Vec::new();
        for segment in self.split_added(text) {
            match segment {
                Segment::Added(id) => ids.push(id),
                Segment::Text(chunk) => {
                    for pre_token in self.pre_tokenize(chunk)? {
                        self.encode_pre_token(pre_token, &mut ids)?;
                    }
                }
            }
        }
        Ok(ids)
    }

    /// Decodes one token id to its record.
    pub fn decode_token(&self, id: u32) -> Result<TokenRecord, TokenizerError> {
        let surface = self
            .surfaces
            .get(id as usize)
            .ok_or(TokenizerError::IdOutOfRange(id, self.vocab_size()))?;
        let (raw_bytes, source) = match self.added_by_id.get(&id) {
            Some(&idx) => {
                let added = &self.added_tokens[idx];
                let source = if added.special { TokenSource::Special } else { TokenSource::Added };
                (added.content.clone().into_bytes(), source)
            }
            None => {
                let bytes = match self.byte_alphabet {
                    ByteAlphabet::ByteToCharTable => table_chars_to_bytes(surface)
                        .expect("validated at load: surface chars all in byte table"),
                    ByteAlphabet::ByteFallback => alphabet::fallback_surface_to_bytes(surface),
                };
                (bytes, TokenSource::Trained)
            }
        };
        let decoded_text = String::from_utf8(raw_bytes.clone()).ok();
        Ok(TokenRecord { id, surface: surface.clone(), raw_bytes, decoded_text, source })
    }

    /// Concatenates the raw bytes of a token sequence.
    pub fn decode_sequence(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(&self.decode_token(id)?.raw_bytes);
        }
        Ok(out)
    }

    /// Splits `text` on added-token literals, longest literal first.
    fn split_added<'a>(&self, text: &'a str) -> Vec<Segment<'a>> {
        if self.added_tokens.is_empty() {
            return if text.is_empty() { Vec::new() } else { vec![Segment::Text(text)] };
        }
        let bytes = text.as_bytes();
        let mut segments = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < bytes.len() {
            // Valid UTF-8 contents only match at character boundaries, so a
            // byte-level scan is safe.
            let hit = self
                .added_tokens
                .iter()
                .find(|t| bytes[i..].starts_with(t.content.as_bytes()));
            match hit {
                Some(token) => {
                    if start < i {
                        segments.push(Segment::Text(&text[start..i]));
                    }
                    segments.push(Segment::Added(token.id));
                    i += token.content.len();
                    start = i;
                }
                None => i += 1,
            }
        }
        if start < bytes.len() {
            segments.push(Segment::Text(&text[start..]));
        }
        segments
    }

    /// Applies the pre-tokenization regex. Text between matches is kept as
    /// its own pre-token so no byte is ever dropped.
    fn pre_tokenize<'a>(&self, text: &'a str) -> Result<Vec<&'a str>, EncodeError> {
        let Some(pattern) = &self.pattern else {
            return Ok(if text.is_empty() { Vec::new() } else { vec![text] });
        };
        let mut out = Vec::new();
        let mut last = 0;
        for found in pattern.find_iter(text) {
            let m = found.map_err(|e| EncodeError::PreTokenization(e.to_string()))?;
            if m.start() > last {
                out.push(&text[last..m.start()]);
            }
            if !m.as_str().is_empty() {
                out.push(m.as_str());
            }
            last = m.end();
        }
        if last < text.len() {
            out.push(&text[last..]);
        }
        Ok(out)
    }

    fn encode_pre_token(&self, pre_token: &str, ids: &mut Vec<u32>) -> Result<(), EncodeError> {
        match self.byte_alphabet {
            ByteAlphabet::ByteToCharTable => {
                let mapped = bytes_to_table_chars(pre_token.as_bytes());
                if self.ignore_merges {
                    if let Some(&id) = self.vocab.get(&mapped) {
                        ids.push(id);
                        return Ok(());
                    }
                }
                let symbols = mapped.chars().map(String::from).collect();
                for symbol in bpe::merge_symbols(symbols, &self.merge_ranks) {
                    match self.vocab.get(&symbol) {
                        Some(&id) => ids.push(id),
                        None => return Err(self.missing_symbol(&symbol)),
                    }
                }
            }
            ByteAlphabet::ByteFallback => {
                let marked = pre_token.replace(' ', "\u{2581}");
                if self.ignore_merges {
                    if let Some(&id) = self.vocab.get(&marked) {
                        ids.push(id);
                        return Ok(());
                    }
                }
                let symbols = marked.chars().map(String::from).collect();
                for symbol in bpe::merge_symbols(symbols, &self.merge_ranks) {
                    match self.vocab.get(&symbol) {
                        Some(&id) => ids.push(id),
                        None => {
                            // Unknown single characters fall back to explicit
                            // byte tokens, one per UTF-8 byte.
                            for byte in symbol.bytes() {
                                match self.vocab.get(&byte_fallback_surface(byte)) {
                                    Some(&id) => ids.push(id),
                                    None => return Err(EncodeError::SymbolNotInVocab { byte }),
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Reports the first raw byte of a symbol with no vocabulary entry.
    /// Multi-character symbols always exist in the vocabulary (merge outputs
    /// are validated at load), so this only sees single alphabet symbols.
    fn missing_symbol(&self, symbol: &str) -> EncodeError {
        let byte = symbol
            .chars()
            .next()
            .and_then(|c| char_to_byte_table().get(&c).copied())
            .unwrap_or_else(|| symbol.bytes().next().unwrap_or(0));
        EncodeError::SymbolNotInVocab { byte }
    }

    /// Builds a model from already-validated parts; only the loader calls it.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        vocab: HashMap<String, u32>,
        surfaces: Vec<String>,
        merges: Vec<(String, String)>,
        pattern: Option<fancy_regex::Regex>,
        pattern_source: String,
        mut added_tokens: Vec<AddedToken>,
        byte_alphabet: ByteAlphabet,
        ignore_merges: bool,
    ) -> Self {
        added_tokens.sort_by(|a, b| {
            b.content.len().cmp(&a.content.len()).then_with(|| a.content.cmp(&b.content))
        });
        let added_by_id = added_tokens.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
        // First listing wins if a pair is (redundantly) repeated: the lowest
        // rank is the one the merge loop must honour.
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, pair) in merges.iter().enumerate() {
            merge_ranks.entry(pair.clone()).or_insert(rank as u32);
        }
        TokenizerModel {
            vocab,
            surfaces,
            merges,
            merge_ranks,
            pattern,
            pattern_source,
            added_tokens,
            added_by_id,
            byte_alphabet,
            ignore_merges,
        }
    }
}
