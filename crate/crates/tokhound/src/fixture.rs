//! Deterministic synthetic fixtures for end-to-end runs and tests.
//!
//! [`build_fixture`] writes a complete miniature "model" to disk: a 64-token
//! byte-level BPE tokenizer (portable schema) able to encode every
//! verification prompt, and a tied embedding table with eight deliberately
//! planted untrained tokens whose rows sit on the padding-row direction. The
//! geometry is sized so that `CosineToRef` at fraction 1/8 selects exactly
//! the planted ids, and so that the [`SyntheticSoftmax`] recency rule assigns
//! them completion probabilities far below any plausible threshold while
//! trained tokens repeat themselves with probability near 1.
//!
//! [`count_geometry_fixture`] builds an in-memory matrix whose rows
//! interpolate between the reference direction and per-token trained
//! directions proportionally to the log of a synthetic training count, for
//! rank-correlation checks.
//!
//! [`SyntheticSoftmax`]: crate::verify::SyntheticSoftmax

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::io_util::atomic_write;
use crate::tensor::{write_tensor_file, Dtype, TensorError, TensorOut};
use crate::tokenizer::{
    bytes_to_table_chars, tokenizer_from_value, TokenizerError, GPT2_PRE_TOKENIZER_PATTERN,
};
use crate::verify::{HiddenRule, PromptTemplate};

/// Seed for every random draw in [`build_fixture`]; fixed so that repeated
/// builds are byte-identical.
pub const FIXTURE_SEED: u64 = 0x544F_4B48;
/// Token ids defined by the fixture tokenizer.
pub const FIXTURE_VOCAB_SIZE: usize = 64;
/// Extra embedding rows past the vocabulary (spare rows from rounding the
/// table up, exactly like production checkpoints pad to a multiple of 64).
pub const FIXTURE_PADDING_ROWS: usize = 8;
/// Embedding dimension.
pub const FIXTURE_DIM: usize = 64;

/// Letters absent from every verification template, used as the planted
/// untrained tokens. Their prompts stay encodable while their rows can be
/// placed freely.
const PLANTED_CHARS: [char; 8] = ['P', 'Q', 'R', 'S', 'V', 'X', 'Y', 'Z'];
/// More absent letters, used as ordinary trained filler to reach a round
/// vocabulary size.
const FILLER_CHARS: [char; 11] = ['C', 'D', 'E', 'F', 'G', 'H', 'J', 'K', 'L', 'M', 'N'];

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("fixture i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("fixture serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// What [`build_fixture`] wrote and the ids it planted.
#[derive(Debug, Clone)]
pub struct FixtureInfo {
    pub dir: PathBuf,
    pub tokenizer_path: PathBuf,
    pub weights_path: PathBuf,
    pub vocab_size: usize,
    pub n_rows: usize,
    pub dim: usize,
    /// Ids with ordinary near-orthonormal rows (includes the merged token).
    pub trained_ids: Vec<u32>,
    /// Ids whose rows sit on the padding-row direction.
    pub planted_ids: Vec<u32>,
    /// The one merge output ("th"), exercising the merge loop end to end.
    pub merged_token_id: u32,
    /// Candidate fraction that selects exactly the planted ids.
    pub planted_fraction: f64,
    /// The completion rule the synthetic backend should run with.
    pub hidden_rule: HiddenRule,
}

/// Distinct bytes of the three verification templates after stripping the
/// `<token>` placeholder (which never survives rendering).
fn template_byte_set() -> BTreeSet<u8> {
    let mut set = BTreeSet::new();
    for template in PromptTemplate::verification_templates() {
        set.extend(template.body.replace("<token>", "").bytes());
    }
    set
}

struct VocabPlan {
    /// (surface, id) pairs; surfaces use byte-table characters.
    entries: Vec<(String, u32)>,
    trained_ids: Vec<u32>,
    planted_ids: Vec<u32>,
    merged_token_id: u32,
}

fn plan_vocab() -> VocabPlan {
    let bytes = template_byte_set();
    assert!(
        bytes.contains(&b't') && bytes.contains(&b'h'),
        "templates no longer contain the letters backing the fixture merge"
    );
    for c in PLANTED_CHARS.iter().chain(FILLER_CHARS.iter()) {
        assert!(
            !bytes.contains(&(*c as u8)),
            "fixture letter {c:?} now appears in a verification template"
        );
    }

    let mut entries = Vec::new();
    let mut id: u32 = 0;
    for &b in &bytes {
        entries.push((bytes_to_table_chars(&[b]), id));
        id += 1;
    }
    let merged_token_id = id;
    entries.push(("th".to_string(), id));
    id += 1;
    for &c in &FILLER_CHARS {
        entries.push((c.to_string(), id));
        id += 1;
    }
    let first_planted = id;
    for &c in &PLANTED_CHARS {
        entries.push((c.to_string(), id));
        id += 1;
    }
    assert_eq!(
        id as usize, FIXTURE_VOCAB_SIZE,
        "template byte inventory changed; adjust the filler set"
    );

    VocabPlan {
        entries,
        trained_ids: (0..first_planted).collect(),
        planted_ids: (first_planted..id).collect(),
        merged_token_id,
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 0.0);
    for x in v {
        *x /= norm;
    }
}

fn noise(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Trained rows are noisy basis vectors; planted and padding rows share one
/// spare axis, so the planted rows sit within a whisker of the padding mean.
fn build_rows(plan: &VocabPlan, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n_rows = FIXTURE_VOCAB_SIZE + FIXTURE_PADDING_ROWS;
    let untrained_axis = plan.trained_ids.len();
    assert!(untrained_axis < FIXTURE_DIM);

    let mut rows = Array2::<f64>::zeros((n_rows, FIXTURE_DIM));
    for &id in &plan.trained_ids {
        let mut row = noise(rng, FIXTURE_DIM, 0.05);
        row[id as usize] += 1.0;
        normalize(&mut row);
        for (j, x) in row.into_iter().enumerate() {
            rows[(id as usize, j)] = x;
        }
    }
    let untrained_like: Vec<usize> = plan
        .planted_ids
        .iter()
        .map(|&id| id as usize)
        .chain(FIXTURE_VOCAB_SIZE..n_rows)
        .collect();
    for r in untrained_like {
        let mut row = noise(rng, FIXTURE_DIM, 0.01);
        row[untrained_axis] += 1.0;
        normalize(&mut row);
        for (j, x) in row.into_iter().enumerate() {
            rows[(r, j)] = x;
        }
    }
    rows
}

/// Asserts the separation the fixture promises: planted rows at cosine
/// distance < 0.05 from the padding-row mean, trained rows at > 0.5.
fn check_geometry(plan: &VocabPlan, rows: &Array2<f64>) {
    let n_rows = rows.nrows();
    let dim = rows.ncols();
    let mut padding_mean = vec![0.0; dim];
    for r in FIXTURE_VOCAB_SIZE..n_rows {
        for j in 0..dim {
            padding_mean[j] += rows[(r, j)] / FIXTURE_PADDING_ROWS as f64;
        }
    }
    for &id in &plan.planted_ids {
        let row: Vec<f64> = (0..dim).map(|j| rows[(id as usize, j)]).collect();
        let d = cosine_distance(&row, &padding_mean);
        assert!(d < 0.05, "planted id {id} at distance {d} from the padding mean");
    }
    for &id in &plan.trained_ids {
        let row: Vec<f64> = (0..dim).map(|j| rows[(id as usize, j)]).collect();
        let d = cosine_distance(&row, &padding_mean);
        assert!(d > 0.5, "trained id {id} at distance {d} from the padding mean");
    }
}

const FIXTURE_README: &str = "\
# Synthetic end-to-end fixture

Deterministically generated; rebuilding always produces these exact bytes.

- `tokenizer.json` — a 64-token byte-level BPE vocabulary in the portable
  schema: one token per distinct byte of the verification prompt templates,
  one merge (`t h` -> `th`), eleven filler letters, and eight planted letters
  (P Q R S V X Y Z, ids 56-63) that never occur in any template.
- `weights.safetensors` — one F64 tensor `embed` of shape 72x64 (64 token
  rows plus 8 padding rows), unit-norm. Trained rows are noisy basis vectors;
  the planted rows and the padding rows share one spare axis, so the planted
  rows lie at cosine distance < 0.05 from the padding-row mean while trained
  rows stay above 0.5.

The synthetic completion backend drives logits as `E h` with the recency
rule `h = 10 * normalize(E[last context token]) - 20 * normalize(u_ref)`:
a trained token that was just seen repeats with probability near 1, while a
planted token is suppressed to around 1e-6 even in the most favorable prompt.
Verifying the planted ids therefore confirms all eight below any reasonable
threshold, and no trained token is ever confirmed.
";

/// Writes `tokenizer.json`, `weights.safetensors`, and a `README.md` under
/// `dir` (created if needed). Deterministic: repeated builds are
/// byte-identical.
pub fn build_fixture(dir: &Path) -> Result<FixtureInfo, FixtureError> {
    std::fs::create_dir_all(dir)?;
    let plan = plan_vocab();

    let mut vocab = serde_json::Map::new();
    for (surface, id) in &plan.entries {
        vocab.insert(surface.clone(), serde_json::json!(id));
    }
    let doc = serde_json::json!({
        "byte_alphabet": "byte_to_char",
        "vocab": vocab,
        "merges": ["t h"],
        "pre_tokenizer_pattern": GPT2_PRE_TOKENIZER_PATTERN,
        "added_tokens": [],
        "ignore_merges": false,
    });
    // Fail here, not in the consumer, if the fixture ever stops loading.
    let model = tokenizer_from_value(&doc)?;
    assert_eq!(model.vocab_size(), FIXTURE_VOCAB_SIZE);

    let tokenizer_path = dir.join("tokenizer.json");
    let mut tokenizer_bytes = serde_json::to_vec_pretty(&doc)?;
    tokenizer_bytes.push(b'\n');
    atomic_write(&tokenizer_path, &tokenizer_bytes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(FIXTURE_SEED);
    let rows = build_rows(&plan, &mut rng);
    check_geometry(&plan, &rows);

    let n_rows = FIXTURE_VOCAB_SIZE + FIXTURE_PADDING_ROWS;
    let weights_path = dir.join("weights.safetensors");
    write_tensor_file(
        &weights_path,
        &[TensorOut {
            name: "embed",
            dtype: Dtype::F64,
            shape: vec![n_rows, FIXTURE_DIM],
            data: rows.as_slice().expect("row-major layout"),
        }],
    )?;

    atomic_write(&dir.join("README.md"), FIXTURE_README.as_bytes())?;

    Ok(FixtureInfo {
        dir: dir.to_path_buf(),
        tokenizer_path,
        weights_path,
        vocab_size: FIXTURE_VOCAB_SIZE,
        n_rows,
        dim: FIXTURE_DIM,
        trained_ids: plan.trained_ids,
        planted_ids: plan.planted_ids,
        merged_token_id: plan.merged_token_id,
        planted_fraction: PLANTED_CHARS.len() as f64 / FIXTURE_VOCAB_SIZE as f64,
        hidden_rule: HiddenRule::recency_default(),
    })
}

/// Embedding rows placed at distances from `u_ref` that grow with the log of
/// a synthetic per-token training count.
#[derive(Debug, Clone)]
pub struct CountGeometry {
    pub rows: Array2<f64>,
    pub u_ref: Vec<f64>,
    /// Synthetic training counts, spanning ten orders of magnitude.
    pub counts: Vec<f64>,
}

/// Builds a matrix where row `i` is `(1 − w)·u_ref + w·d_i` (plus slight
/// noise, then normalized), with `w = log10(count_i) / 10` and `d_i` a random
/// direction orthogonal to `u_ref`. Cosine distance to `u_ref` then grows
/// monotonically with log-count up to the noise, which is what a
/// rank-correlation check between counts and indicator scores exercises.
pub fn count_geometry_fixture(n_tokens: usize, dim: usize, seed: u64) -> CountGeometry {
    assert!(n_tokens >= 2 && dim >= 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u_ref = noise(&mut rng, dim, 1.0);
    normalize(&mut u_ref);

    let mut rows = Array2::<f64>::zeros((n_tokens, dim));
    let mut counts = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let w = i as f64 / (n_tokens - 1) as f64;
        counts.push(10f64.powf(10.0 * w));

        let mut d = noise(&mut rng, dim, 1.0);
        let along: f64 = d.iter().zip(&u_ref).map(|(x, y)| x * y).sum();
        for (x, u) in d.iter_mut().zip(&u_ref) {
            *x -= along * u;
        }
        normalize(&mut d);

        let jitter = noise(&mut rng, dim, 0.02);
        let mut row: Vec<f64> = (0..dim)
            .map(|j| (1.0 - w) * u_ref[j] + w * d[j] + jitter[j])
            .collect();
        normalize(&mut row);
        for (j, x) in row.into_iter().enumerate() {
            rows[(i, j)] = x;
        }
    }
    CountGeometry { rows, u_ref, counts }
}
