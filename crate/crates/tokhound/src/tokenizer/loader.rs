//! Loading and validation of tokenizer definitions.
//!
//! Two input formats are accepted:
//!
//! 1. The toolkit's own portable schema (see the README), which states the
//!    byte alphabet explicitly.
//! 2. The common serialized `tokenizer.json` format, restricted to BPE models
//!    with a ByteLevel and/or single Split pre-tokenizer. Everything else is
//!    rejected with `UnsupportedModelType` rather than loaded approximately.

use std::collections::HashMap;
use std::path::Path;

use serde_json::Value;

use super::alphabet::{fallback_surface_to_bytes, table_chars_to_bytes, ByteAlphabet};
use super::{AddedToken, TokenizerError, TokenizerModel};

/// The default GPT-2 pre-tokenization pattern used by ByteLevel tokenizers
/// when no explicit Split stage provides one.
pub const GPT2_PRE_TOKENIZER_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Loads a tokenizer definition from disk, auto-detecting the format.
pub fn load_tokenizer(path: &Path) -> Result<TokenizerModel, TokenizerError> {
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| TokenizerError::MalformedConfig(format!("invalid JSON: {e}")))?;
    tokenizer_from_value(&value)
}

/// Builds a tokenizer from an already-parsed JSON document.
pub fn tokenizer_from_value(value: &Value) -> Result<TokenizerModel, TokenizerError> {
    if value.get("byte_alphabet").is_some() {
        portable_from_value(value)
    } else if value.get("model").is_some() {
        import_tokenizer_json(value)
    } else {
        Err(TokenizerError::MalformedConfig(
            "document is neither the portable schema (missing \"byte_alphabet\") nor a \
             serialized tokenizer (missing \"model\")"
                .into(),
        ))
    }
}

fn portable_from_value(doc: &Value) -> Result<TokenizerModel, TokenizerError> {
    let byte_alphabet = match required_str(doc, "byte_alphabet")? {
        "byte_to_char" => ByteAlphabet::ByteToCharTable,
        "byte_fallback" => ByteAlphabet::ByteFallback,
        other => {
            return Err(TokenizerError::UnsupportedModelType(format!(
                "byte alphabet \"{other}\" (supported: byte_to_char, byte_fallback)"
            )))
        }
    };

    let vocab = parse_vocab(doc.get("vocab").ok_or_else(|| malformed("missing \"vocab\""))?)?;

    let mut merges = Vec::new();
    if let Some(raw) = doc.get("merges") {
        for entry in raw.as_array().ok_or_else(|| malformed("\"merges\" must be an array"))? {
            merges.push(parse_merge(entry)?);
        }
    }

    let pattern_source = match doc.get("pre_tokenizer_pattern") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(malformed("\"pre_tokenizer_pattern\" must be a string")),
    };

    let added_tokens = match doc.get("added_tokens") {
        None => Vec::new(),
        Some(raw) => serde_json::from_value(raw.clone())
            .map_err(|e| malformed(&format!("bad \"added_tokens\": {e}")))?,
    };

    let ignore_merges = doc.get("ignore_merges").and_then(Value::as_bool).unwrap_or(false);

    build_model(vocab, merges, pattern_source, added_tokens, byte_alphabet, ignore_merges)
}

fn import_tokenizer_json(doc: &Value) -> Result<TokenizerModel, TokenizerError> {
    let model = doc.get("model").and_then(Value::as_object).ok_or_else(|| {
        TokenizerError::MalformedConfig("\"model\" must be an object".into())
    })?;

    match model.get("type").and_then(Value::as_str) {
        Some("BPE") => {}
        Some(other) => {
            return Err(TokenizerError::UnsupportedModelType(format!("model type {other}")))
        }
        None => {
            return Err(TokenizerError::UnsupportedModelType("model without a type".into()))
        }
    }
    if !matches!(model.get("dropout"), None | Some(Value::Null)) {
        return Err(TokenizerError::UnsupportedModelType("BPE dropout".into()));
    }
    for key in ["continuing_subword_prefix", "end_of_word_suffix"] {
        match model.get(key) {
            None | Some(Value::Null) => {}
            Some(Value::String(s)) if s.is_empty() => {}
            Some(_) => {
                return Err(TokenizerError::UnsupportedModelType(format!("non-empty {key}")))
            }
        }
    }

    let byte_fallback = model.get("byte_fallback").and_then(Value::as_bool).unwrap_or(false);
    let ignore_merges = model.get("ignore_merges").and_then(Value::as_bool).unwrap_or(false);

    let pre = parse_pre_tokenizer(doc.get("pre_tokenizer").unwrap_or(&Value::Null))?;
    let byte_alphabet = match (pre.byte_level, byte_fallback) {
        (true, false) => ByteAlphabet::ByteToCharTable,
        (false, true) => ByteAlphabet::ByteFallback,
        (true, true) => {
            return Err(TokenizerError::UnsupportedModelType(
                "both a ByteLevel pre-tokenizer and byte_fallback are set".into(),
            ))
        }
        (false, false) => {
            return Err(TokenizerError::UnsupportedModelType(
                "cannot determine the byte alphabet: neither a ByteLevel pre-tokenizer \
                 nor model.byte_fallback is present"
                    .into(),
            ))
        }
    };
    check_normalizer(doc.get("normalizer").unwrap_or(&Value::Null), byte_alphabet)?;

    let vocab =
        parse_vocab(model.get("vocab").ok_or_else(|| malformed("model missing \"vocab\""))?)?;

    let mut merges = Vec::new();
    if let Some(raw) = model.get("merges") {
        for entry in raw.as_array().ok_or_else(|| malformed("\"merges\" must be an array"))? {
            merges.push(parse_merge(entry)?);
        }
    }

    let mut added_tokens: Vec<AddedToken> = Vec::new();
    if let Some(raw) = doc.get("added_tokens") {
        let entries = raw.as_array().ok_or_else(|| malformed("\"added_tokens\" must be an array"))?;
        for entry in entries {
            let id = entry
                .get("id")
                .and_then(Value::as_u64)
                .ok_or_else(|| malformed("added token missing numeric \"id\""))?;
            let content = entry
                .get("content")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("added token missing \"content\""))?;
            let special = entry.get("special").and_then(Value::as_bool).unwrap_or(false);
            added_tokens.push(AddedToken { id: id as u32, content: content.to_string(), special });
        }
    }

    build_model(vocab, merges, pre.pattern, added_tokens, byte_alphabet, ignore_merges)
}

struct PreTokenizerPlan {
    byte_level: bool,
    pattern: String,
}

/// Flattens the supported pre-tokenizer configurations: nothing, one
/// ByteLevel, one Split, or a Sequence of one Split followed by a ByteLevel
/// whose own regex is disabled. Deeper chains are rejected.
fn parse_pre_tokenizer(value: &Value) -> Result<PreTokenizerPlan, TokenizerError> {
    let stages: Vec<&Value> = match value {
        Value::Null => Vec::new(),
        Value::Object(obj) if obj.get("type").and_then(Value::as_str) == Some("Sequence") => obj
            .get("pretokenizers")
            .and_then(Value::as_array)
            .map(|a| a.iter().collect())
            .ok_or_else(|| malformed("Sequence pre-tokenizer missing \"pretokenizers\""))?,
        single => vec![single],
    };

    let mut split_pattern: Option<String> = None;
    let mut byte_level = false;
    let mut byte_level_regex = false;
    for stage in &stages {
        match stage.get("type").and_then(Value::as_str) {
            Some("ByteLevel") => {
                if byte_level {
                    return Err(TokenizerError::UnsupportedModelType(
                        "multiple ByteLevel pre-tokenizer stages".into(),
                    ));
                }
                if stage.get("add_prefix_space").and_then(Value::as_bool).unwrap_or(false) {
                    return Err(TokenizerError::UnsupportedModelType(
                        "ByteLevel add_prefix_space=true".into(),
                    ));
                }
                byte_level = true;
                byte_level_regex =
                    stage.get("use_regex").and_then(Value::as_bool).unwrap_or(true);
            }
            Some("Split") => {
                if split_pattern.is_some() {
                    return Err(TokenizerError::UnsupportedModelType(
                        "multiple Split pre-tokenizer stages".into(),
                    ));
                }
                if stage.get("invert").and_then(Value::as_bool).unwrap_or(false) {
                    return Err(TokenizerError::UnsupportedModelType("inverted Split".into()));
                }
                match stage.get("behavior").and_then(Value::as_str) {
                    Some("Isolated") | None => {}
                    Some(other) => {
                        return Err(TokenizerError::UnsupportedModelType(format!(
                            "Split behavior {other}"
                        )))
                    }
                }
                let pattern = match stage.get("pattern") {
                    Some(Value::Object(p)) => {
                        if let Some(regex) = p.get("Regex").and_then(Value::as_str) {
                            regex.to_string()
                        } else if let Some(lit) = p.get("String").and_then(Value::as_str) {
                            fancy_regex::escape(lit).into_owned()
                        } else {
                            return Err(malformed("Split pattern must be Regex or String"));
                        }
                    }
                    _ => return Err(malformed("Split pre-tokenizer missing \"pattern\"")),
                };
                split_pattern = Some(pattern);
            }
            Some(other) => {
                return Err(TokenizerError::UnsupportedModelType(format!(
                    "pre-tokenizer stage {other}"
                )))
            }
            None => return Err(malformed("pre-tokenizer stage without a type")),
        }
    }

    let pattern = match (&split_pattern, byte_level, byte_level_regex) {
        (Some(p), _, false) | (Some(p), false, _) => p.clone(),
        (Some(_), true, true) => {
            return Err(TokenizerError::UnsupportedModelType(
                "both a Split pattern and ByteLevel use_regex=true".into(),
            ))
        }
        (None, true, true) => GPT2_PRE_TOKENIZER_PATTERN.to_string(),
        (None, _, _) => String::new(),
    };
    Ok(PreTokenizerPlan { byte_level, pattern })
}

/// The only normalizer accepted is the byte-fallback space-marker substitution
/// (`" "` → `"▁"`), which the encoder already performs by convention.
fn check_normalizer(value: &Value, alphabet: ByteAlphabet) -> Result<(), TokenizerError> {
    let stages: Vec<&Value> = match value {
        Value::Null => return Ok(()),
        Value::Object(obj) if obj.get("type").and_then(Value::as_str) == Some("Sequence") => obj
            .get("normalizers")
            .and_then(Value::as_array)
            .map(|a| a.iter().collect())
            .unwrap_or_default(),
        single => vec![single],
    };
    for stage in stages {
        let is_space_marker = stage.get("type").and_then(Value::as_str) == Some("Replace")
            && stage.get("pattern").and_then(|p| p.get("String")).and_then(Value::as_str)
                == Some(" ")
            && stage.get("content").and_then(Value::as_str) == Some("\u{2581}");
        if !(is_space_marker && alphabet == ByteAlphabet::ByteFallback) {
            return Err(TokenizerError::UnsupportedModelType(format!(
                "normalizer stage {}",
                stage.get("type").and_then(Value::as_str).unwrap_or("<untyped>")
            )));
        }
    }
    Ok(())
}

fn parse_vocab(value: &Value) -> Result<HashMap<String, u32>, TokenizerError> {
    let obj = value.as_object().ok_or_else(|| malformed("\"vocab\" must be an object"))?;
    let mut vocab = HashMap::with_capacity(obj.len());
    for (surface, id) in obj {
        let id = id
            .as_u64()
            .filter(|&v| v <= u32::MAX as u64)
            .ok_or_else(|| malformed(&format!("vocab entry {surface:?} has a bad id")))?;
        vocab.insert(surface.clone(), id as u32);
    }
    Ok(vocab)
}

/// Accepts both merge encodings: `"A B"` and `["A", "B"]`.
fn parse_merge(entry: &Value) -> Result<(String, String), TokenizerError> {
    match entry {
        Value::String(s) => {
            let parts: Vec<&str> = s.split(' ').collect();
            if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(malformed(&format!("merge {s:?} is not two space-separated symbols")));
            }
            Ok((parts[0].to_string(), parts[1].to_string()))
        }
        Value::Array(pair) => match pair.as_slice() {
            [Value::String(a), Value::String(b)] => Ok((a.clone(), b.clone())),
            _ => Err(malformed("merge array entry is not a pair of strings")),
        },
        _ => Err(malformed("merge entry is neither a string nor a pair")),
    }
}

fn build_model(
    vocab: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    pattern_source: String,
    added_tokens: Vec<AddedToken>,
    byte_alphabet: ByteAlphabet,
    ignore_merges: bool,
) -> Result<TokenizerModel, TokenizerError> {
    // Assemble the dense id → surface table from the vocabulary and any added
    // tokens that extend it.
    let total = {
        let mut ids: Vec<u32> = vocab.values().copied().collect();
        ids.extend(added_tokens.iter().map(|t| t.id));
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    let mut surfaces: Vec<Option<String>> = vec![None; total];

    for (surface, &id) in &vocab {
        let slot = surfaces
            .get_mut(id as usize)
            .ok_or_else(|| malformed(&format!("token ids are not dense: id {id} out of range")))?;
        if slot.is_some() {
            return Err(TokenizerError::DuplicateTokenId(id));
        }
        *slot = Some(surface.clone());
    }
    for token in &added_tokens {
        if token.content.is_empty() {
            return Err(malformed(&format!("added token id {} has empty content", token.id)));
        }
        let slot = surfaces.get_mut(token.id as usize).ok_or_else(|| {
            malformed(&format!("token ids are not dense: added id {} out of range", token.id))
        })?;
        match slot {
            // An added token may annotate an existing vocabulary entry, but
            // only if it names the same surface.
            Some(existing) if *existing != token.content => {
                return Err(TokenizerError::DuplicateTokenId(token.id))
            }
            _ => *slot = Some(token.content.clone()),
        }
    }
    let surfaces: Vec<String> = surfaces
        .into_iter()
        .enumerate()
        .map(|(id, s)| s.ok_or_else(|| malformed(&format!("token ids are not dense: id {id} is undefined"))))
        .collect::<Result<_, _>>()?;

    // Duplicate added ids collapse in the map; catch them explicitly.
    {
        let mut added_ids: Vec<u32> = added_tokens.iter().map(|t| t.id).collect();
        added_ids.sort_unstable();
        if let Some(w) = added_ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(TokenizerError::DuplicateTokenId(w[0]));
        }
    }

    // Every merge output must itself be a token.
    for (a, b) in &merges {
        let output = format!("{a}{b}");
        if !vocab.contains_key(&output) {
            return Err(malformed(&format!(
                "merge ({a:?}, {b:?}) has no output token {output:?} in vocab"
            )));
        }
    }

    // Every token must expand to at least one byte, and table surfaces must
    // stay inside the byte alphabet.
    let added_ids: std::collections::HashSet<u32> =
        added_tokens.iter().map(|t| t.id).collect();
    for (id, surface) in surfaces.iter().enumerate() {
        let raw_len = if added_ids.contains(&(id as u32)) {
            surface.len()
        } else {
            match byte_alphabet {
                ByteAlphabet::ByteToCharTable => table_chars_to_bytes(surface)
                    .ok_or_else(|| {
                        malformed(&format!(
                            "token {id} ({surface:?}) contains characters outside the byte table"
                        ))
                    })?
                    .len(),
                ByteAlphabet::ByteFallback => fallback_surface_to_bytes(surface).len(),
            }
        };
        if raw_len == 0 {
            return Err(malformed(&format!("token {id} decodes to an empty byte sequence")));
        }
    }

    let pattern = if pattern_source.is_empty() {
        None
    } else {
        Some(fancy_regex::Regex::new(&pattern_source).map_err(|e| {
            malformed(&format!("pre-tokenizer pattern failed to compile: {e}"))
        })?)
    };

    Ok(TokenizerModel::from_parts(
        vocab,
        surfaces,
        merges,
        pattern,
        pattern_source,
        added_tokens,
        byte_alphabet,
        ignore_merges,
    ))
}

fn required_str<'a>(doc: &'a Value, key: &str) -> Result<&'a str, TokenizerError> {
    doc.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(&format!("missing or non-string \"{key}\"")))
}

fn malformed(msg: &str) -> TokenizerError {
    TokenizerError::MalformedConfig(msg.to_string())
}
