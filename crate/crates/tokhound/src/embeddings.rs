//! Embedding-matrix ingestion and reference-token selection.
//!
//! An embedding table has one row per token id; rows beyond the tokenizer's
//! vocabulary size are padding/unused embeddings, which make excellent
//! reference points for the "never trained" direction. All tensor data is
//! converted to f64 at load so that 100k-row accumulations keep full rank
//! fidelity regardless of the stored precision.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::taxonomy::TokenCategory;
use crate::tensor::{read_tensor_file, Tensor, TensorError};
use crate::tokenizer::TokenizerModel;

/// Default substrings (matched case-insensitively inside bracket-shaped
/// special tokens) that mark intentionally-unused vocabulary slots.
pub const DEFAULT_UNUSED_PATTERNS: &[&str] = &["unused"];

/// Tensor names tried, in order, when the caller does not name the input
/// embedding explicitly.
pub const DEFAULT_INPUT_NAMES: &[&str] = &[
    "embed_tokens.weight",
    "model.embed_tokens.weight",
    "tok_embeddings.weight",
    "transformer.wte.weight",
    "wte.weight",
    "embed_in.weight",
    "embedding",
    "embed",
];

/// Tensor names tried for the output (unembedding) matrix.
pub const DEFAULT_OUTPUT_NAMES: &[&str] = &[
    "lm_head.weight",
    "output.weight",
    "embed_out.weight",
    "unembed.weight",
    "embedding",
    "embed",
];

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing tensor: {0}")]
    MissingTensor(String),
    #[error("tensor {name:?} has the wrong shape: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("tensor {name:?} contains a non-finite entry at flat index {index}")]
    NonFiniteEntries { name: String, index: usize },
    #[error(
        "no reference tokens found: no padding rows, no 0xF5-0xFF byte tokens, no \
         \"unused\"-style specials — supply reference ids manually (tied-embedding models \
         sometimes require this)"
    )]
    NoReferenceTokens,
    #[error("reference id {0} is outside the embedding table ({1} rows)")]
    ReferenceIdOutOfRange(u32, usize),
}

/// Which side of the model a matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EmbeddingKind {
    Input,
    Output,
}

/// A dense row-per-token embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Array2<f64>,
    pub kind: EmbeddingKind,
}

impl EmbeddingMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// The embedding matrices of one model plus tie information.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    input: Option<EmbeddingMatrix>,
    output: Option<EmbeddingMatrix>,
    pub tied: bool,
    /// An output-side bias tensor was present in the container. It is never
    /// folded into any indicator; its presence is only reported.
    pub bias_present: bool,
    /// Resolved tensor names, for report provenance.
    pub input_name: Option<String>,
    pub output_name: Option<String>,
}

impl EmbeddingTables {
    /// The input table; for tied models this is the shared matrix.
    pub fn input_matrix(&self) -> Option<&EmbeddingMatrix> {
        self.input.as_ref().or(if self.tied { self.output.as_ref() } else { None })
    }

    /// The output table; for tied models this is the shared matrix.
    pub fn output_matrix(&self) -> Option<&EmbeddingMatrix> {
        self.output.as_ref().or(if self.tied { self.input.as_ref() } else { None })
    }

    pub fn n_rows(&self) -> usize {
        self.output_matrix().or(self.input_matrix()).map_or(0, EmbeddingMatrix::n_rows)
    }
}

fn validate_matrix(name: &str, tensor: &Tensor, kind: EmbeddingKind) -> Result<EmbeddingMatrix, EmbeddingError> {
    if tensor.shape.len() != 2 {
        return Err(EmbeddingError::ShapeMismatch {
            name: name.to_string(),
            detail: format!("expected rank 2, got shape {:?}", tensor.shape),
        });
    }
    if let Some(index) = tensor.data.iter().position(|v| !v.is_finite()) {
        return Err(EmbeddingError::NonFiniteEntries { name: name.to_string(), index });
    }
    let rows = Array2::from_shape_vec((tensor.shape[0], tensor.shape[1]), tensor.data.clone())
        .expect("shape product validated by the tensor reader");
    Ok(EmbeddingMatrix { rows, kind })
}

fn resolve<'a>(
    tensors: &'a BTreeMap<String, Tensor>,
    explicit: Option<&str>,
    defaults: &[&str],
) -> Result<Option<(String, &'a Tensor)>, EmbeddingError> {
    if let Some(name) = explicit {
        return match tensors.get(name) {
            Some(t) => Ok(Some((name.to_string(), t))),
            None => Err(EmbeddingError::MissingTensor(format!(
                "{name:?} not in container (available: {:?})",
                tensors.keys().collect::<Vec<_>>()
            ))),
        };
    }
    for name in defaults {
        if let Some(t) = tensors.get(*name) {
            return Ok(Some((name.to_string(), t)));
        }
    }
    Ok(None)
}

/// Loads embedding matrices from a tensor container.
///
/// Resolution: explicit names win; otherwise a container holding exactly one
/// rank-2 tensor yields a tied model, and containers with several tensors are
/// searched by the default name lists. `tied` is also set when the input and
/// output names resolve to identical tensors.
pub fn load_embeddings(
    path: &Path,
    input_name: Option<&str>,
    output_name: Option<&str>,
) -> Result<EmbeddingTables, EmbeddingError> {
    let tensors = read_tensor_file(path)?;

    let rank2: Vec<&String> =
        tensors.iter().filter(|(_, t)| t.shape.len() == 2).map(|(n, _)| n).collect();
    let bias_present = tensors
        .iter()
        .any(|(name, t)| name.ends_with("bias") && t.shape.len() == 1);

    let mut input = resolve(&tensors, input_name, DEFAULT_INPUT_NAMES)?;
    let mut output = resolve(&tensors, output_name, DEFAULT_OUTPUT_NAMES)?;

    // A container with exactly one matrix is a tied model regardless of what
    // the tensor is called.
    if input.is_none() && output.is_none() && rank2.len() == 1 {
        let name = rank2[0].clone();
        output = Some((name.clone(), &tensors[&name]));
    } else if input.is_none() && output.is_none() {
        return Err(EmbeddingError::MissingTensor(format!(
            "no embedding tensor found; tried {DEFAULT_INPUT_NAMES:?} and \
             {DEFAULT_OUTPUT_NAMES:?}, container has {:?}",
            tensors.keys().collect::<Vec<_>>()
        )));
    }

    // Same tensor resolved on both sides: keep one copy.
    if let (Some((in_name, _)), Some((out_name, _))) = (&input, &output) {
        if in_name == out_name {
            input = None;
        }
    }

    let input_mat = input
        .as_ref()
        .map(|(name, t)| validate_matrix(name, t, EmbeddingKind::Input))
        .transpose()?;
    let output_mat = output
        .as_ref()
        .map(|(name, t)| validate_matrix(name, t, EmbeddingKind::Output))
        .transpose()?;

    if let (Some(i), Some(o)) = (&input_mat, &output_mat) {
        if i.rows.dim() != o.rows.dim() {
            return Err(EmbeddingError::ShapeMismatch {
                name: output.as_ref().unwrap().0.clone(),
                detail: format!(
                    "output shape {:?} differs from input shape {:?}",
                    o.rows.dim(),
                    i.rows.dim()
                ),
            });
        }
    }

    let tied = match (&input_mat, &output_mat) {
        (Some(i), Some(o)) => {
            let same_dtype = input.as_ref().map(|(_, t)| t.dtype) == output.as_ref().map(|(_, t)| t.dtype);
            same_dtype && i.rows == o.rows
        }
        _ => true, // only one matrix exists
    };

    Ok(EmbeddingTables {
        input_name: input.as_ref().map(|(n, _)| n.clone()),
        output_name: output.as_ref().map(|(n, _)| n.clone()),
        input: input_mat,
        output: output_mat,
        tied,
        bias_present,
    })
}

/// How a reference token id was discovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RefProvenance {
    /// Row index at or above the tokenizer vocabulary size.
    PaddingRow,
    /// Single-byte token for a byte in 0xF5–0xFF, which UTF-8 never uses.
    UnusedUtf8Byte,
    /// Bracket-shaped special whose text matches an unused-slot pattern.
    PatternMatch,
    /// Explicitly supplied by the caller.
    UserSupplied,
}

/// The set of known-untrained reference rows and their mean embedding.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReferenceSet {
    /// Ascending row indices (token ids and/or padding rows).
    pub ids: Vec<u32>,
    /// Parallel to `ids`.
    pub provenance: Vec<RefProvenance>,
    /// Mean of the referenced output-embedding rows.
    pub u_ref: Vec<f64>,
}

/// Mean of the given rows, accumulated sequentially in f64.
pub fn mean_rows(rows: &Array2<f64>, ids: &[u32]) -> Vec<f64> {
    let dim = rows.ncols();
    let mut mean = vec![0.0; dim];
    for &id in ids {
        let row = rows.row(id as usize);
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    let n = ids.len().max(1) as f64;
    for m in &mut mean {
        *m /= n;
    }
    mean
}

/// Finds reference untrained tokens: user-supplied ids win outright;
/// otherwise the union of padding rows, single-byte tokens for the
/// UTF-8-impossible bytes 0xF5–0xFF, and "unused"-pattern specials.
pub fn find_reference_tokens(
    model: &TokenizerModel,
    e_out: &EmbeddingMatrix,
    taxonomy: &[TokenCategory],
    user_ids: Option<&[u32]>,
) -> Result<ReferenceSet, EmbeddingError> {
    find_reference_tokens_with_patterns(model, e_out, taxonomy, user_ids, DEFAULT_UNUSED_PATTERNS)
}

/// [`find_reference_tokens`] with a custom unused-slot pattern list.
pub fn find_reference_tokens_with_patterns(
    model: &TokenizerModel,
    e_out: &EmbeddingMatrix,
    taxonomy: &[TokenCategory],
    user_ids: Option<&[u32]>,
    unused_patterns: &[&str],
) -> Result<ReferenceSet, EmbeddingError> {
    let n_rows = e_out.n_rows();

    if let Some(ids) = user_ids.filter(|ids| !ids.is_empty()) {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        for &id in &ids {
            if id as usize >= n_rows {
                return Err(EmbeddingError::ReferenceIdOutOfRange(id, n_rows));
            }
        }
        let provenance = vec![RefProvenance::UserSupplied; ids.len()];
        let u_ref = mean_rows(&e_out.rows, &ids);
        return Ok(ReferenceSet { ids, provenance, u_ref });
    }

    let vocab_size = model.vocab_size();
    if n_rows < vocab_size {
        return Err(EmbeddingError::ShapeMismatch {
            name: "output embedding".to_string(),
            detail: format!("{n_rows} rows < vocab size {vocab_size}"),
        });
    }

    let mut found: Vec<(u32, RefProvenance)> = Vec::new();
    for row in vocab_size..n_rows {
        found.push((row as u32, RefProvenance::PaddingRow));
    }

    let lowered: Vec<String> = unused_patterns.iter().map(|p| p.to_lowercase()).collect();
    for category in taxonomy {
        let record = match model.decode_token(category.id) {
            Ok(r) => r,
            Err(_) => continue,
        };
        if record.raw_bytes.len() == 1 && record.raw_bytes[0] >= 0xF5 {
            found.push((category.id, RefProvenance::UnusedUtf8Byte));
        } else if category.flags.special {
            if let Some(text) = &record.decoded_text {
                let lower = text.to_lowercase();
                if lowered.iter().any(|p| lower.contains(p)) {
                    found.push((category.id, RefProvenance::PatternMatch));
                }
            }
        }
    }

    if found.is_empty() {
        return Err(EmbeddingError::NoReferenceTokens);
    }
    found.sort_by_key(|(id, _)| *id);
    found.dedup_by_key(|(id, _)| *id);
    let (ids, provenance): (Vec<u32>, Vec<RefProvenance>) = found.into_iter().unzip();
    let u_ref = mean_rows(&e_out.rows, &ids);
    Ok(ReferenceSet { ids, provenance, u_ref })
}
