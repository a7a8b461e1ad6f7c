//! Pipeline orchestration: taxonomy → indicators → candidate selection →
//! verification → report, with every stage's output persisted under the run's
//! output directory so later stages can be re-run independently.
//!
//! Artifact layout (all JSON is pretty-printed with a trailing newline and is
//! byte-identical across re-runs from the same inputs):
//!
//! | file                 | producer   | contents                              |
//! |----------------------|------------|---------------------------------------|
//! | `stamp.json`         | indicators | SHA-256 of the tokenizer and weights   |
//! | `taxonomy.json`      | classify   | full [`TaxonomyReport`]                |
//! | `indicators.json`    | indicators | [`IndicatorsArtifact`]                 |
//! | `indicators.bin`     | indicators | scores as F64 vectors, tensor container|
//! | `candidates.json`    | candidates | [`CandidateSet`]                       |
//! | `verification.json`  | verify     | [`VerificationArtifact`]               |
//! | `report.json` / `.md`| report     | [`ModelReport`] and its rendering      |

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{find_reference_tokens, load_embeddings, EmbeddingTables, ReferenceSet};
use crate::indicators::{
    applicable_indicators, auto_indicator, compute_indicator, select_candidates, CandidateSet,
    IndicatorKind, IndicatorVector,
};
use crate::io_util::{atomic_write, sha256_file};
use crate::report::{build_report, emit_report, EmitFormats, IndicatorRun, ModelReport, RunStamp};
use crate::taxonomy::{taxonomy_report, TaxonomyReport};
use crate::tensor::{write_tensor_file, Dtype, TensorOut};
use crate::tokenizer::{load_tokenizer, TokenizerModel};
use crate::verify::{
    summarize, verify_set, BackendDescriptor, BackendKind, HiddenRule, HttpBackendConfig,
    HttpCompletionBackend, SyntheticSoftmax, VerificationOutcome, VerificationSummary,
};

pub const STAMP_FILE: &str = "stamp.json";
pub const TAXONOMY_FILE: &str = "taxonomy.json";
pub const INDICATORS_FILE: &str = "indicators.json";
pub const INDICATORS_BIN_FILE: &str = "indicators.bin";
pub const CANDIDATES_FILE: &str = "candidates.json";
pub const VERIFICATION_FILE: &str = "verification.json";

/// Everything a full run needs. Construct with [`RunConfig::new`] and adjust
/// fields; `validate` is called by every entry point.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub tokenizer_path: PathBuf,
    pub weights_path: PathBuf,
    pub output_dir: PathBuf,
    /// Overrides tie detection when the checkpoint layout is misleading.
    pub tied_override: Option<bool>,
    /// Explicit reference token ids; skips discovery entirely.
    pub ref_ids: Option<Vec<u32>>,
    /// Fraction of the vocabulary taken as candidates.
    pub fraction: f64,
    /// Verification probability threshold.
    pub threshold: f64,
    /// Forces the ranking indicator instead of the automatic choice.
    pub indicator_override: Option<IndicatorKind>,
    /// Also compute the centered / PC-removed cosine variants.
    pub include_variant_indicators: bool,
    /// Explicit tensor names when the container layout is non-standard.
    pub input_tensor: Option<String>,
    pub output_tensor: Option<String>,
    pub backend: BackendDescriptor,
    /// Stop after candidate selection and emit a candidates-only report.
    pub no_verify: bool,
}

impl RunConfig {
    pub fn new(
        tokenizer_path: impl Into<PathBuf>,
        weights_path: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        RunConfig {
            tokenizer_path: tokenizer_path.into(),
            weights_path: weights_path.into(),
            output_dir: output_dir.into(),
            tied_override: None,
            ref_ids: None,
            fraction: 0.02,
            threshold: crate::verify::DEFAULT_THRESHOLD,
            indicator_override: None,
            include_variant_indicators: false,
            input_tensor: None,
            output_tensor: None,
            backend: BackendDescriptor::synthetic(),
            no_verify: false,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(PipelineError::Config(format!(
                "fraction must be in (0, 1], got {}",
                self.fraction
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(PipelineError::Config(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        self.backend.validate().map_err(PipelineError::Config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageName {
    Classify,
    Indicators,
    Candidates,
    Verify,
    Report,
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageName::Classify => "classify",
            StageName::Indicators => "indicators",
            StageName::Candidates => "candidates",
            StageName::Verify => "verify",
            StageName::Report => "report",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("failed to load {what} from {path}: {message}")]
    LoadFailure { what: &'static str, path: PathBuf, message: String },
    #[error("{stage} stage failed: {message}")]
    Stage { stage: StageName, message: String },
    #[error("missing artifact {path} — run the {producer} stage first")]
    MissingArtifact { path: PathBuf, producer: StageName },
    #[error("artifact {path} could not be parsed: {message}")]
    BadArtifact { path: PathBuf, message: String },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn stage_error(stage: StageName, error: impl fmt::Display) -> PipelineError {
    PipelineError::Stage { stage, message: error.to_string() }
}

/// Output of the indicator stage, as persisted in `indicators.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorsArtifact {
    pub stamp: RunStamp,
    pub tied: bool,
    /// An output bias tensor was present (reported, never used).
    pub bias_present: bool,
    /// The indicator candidate selection ranks by.
    pub chosen: IndicatorKind,
    /// Reference set used by the distance indicators; absent when only the
    /// input matrix exists.
    pub reference: Option<ReferenceSet>,
    pub vectors: Vec<IndicatorVector>,
}

/// Output of the verification stage, as persisted in `verification.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationArtifact {
    pub threshold: f64,
    pub summary: VerificationSummary,
    pub outcomes: Vec<VerificationOutcome>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path, producer: StageName) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            PipelineError::MissingArtifact { path: path.to_path_buf(), producer }
        } else {
            PipelineError::Io(e)
        }
    })?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::BadArtifact { path: path.to_path_buf(), message: e.to_string() })
}

/// Tokenizer, embeddings, and the input stamp, loaded and cross-checked.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: TokenizerModel,
    pub tables: EmbeddingTables,
    pub stamp: RunStamp,
}

fn load_model_only(config: &RunConfig) -> Result<TokenizerModel, PipelineError> {
    load_tokenizer(&config.tokenizer_path).map_err(|e| PipelineError::LoadFailure {
        what: "tokenizer",
        path: config.tokenizer_path.clone(),
        message: e.to_string(),
    })
}

/// Loads both model inputs, applies the tie override, and verifies that the
/// embedding covers the vocabulary.
pub fn load_inputs(config: &RunConfig) -> Result<LoadedModel, PipelineError> {
    let model = load_model_only(config)?;
    let mut tables = load_embeddings(
        &config.weights_path,
        config.input_tensor.as_deref(),
        config.output_tensor.as_deref(),
    )
    .map_err(|e| PipelineError::LoadFailure {
        what: "weights",
        path: config.weights_path.clone(),
        message: e.to_string(),
    })?;

    if let Some(tied) = config.tied_override {
        if tables.tied != tied {
            log::info!("overriding tie detection: detected {}, forced {tied}", tables.tied);
        }
        tables.tied = tied;
    }
    if tables.bias_present {
        log::warn!("the container has an output bias tensor; indicators ignore it");
    }
    if tables.n_rows() < model.vocab_size() {
        return Err(PipelineError::LoadFailure {
            what: "weights",
            path: config.weights_path.clone(),
            message: format!(
                "embedding covers {} rows but the vocabulary has {} tokens",
                tables.n_rows(),
                model.vocab_size()
            ),
        });
    }

    let stamp = RunStamp {
        tokenizer_sha256: sha256_file(&config.tokenizer_path)?,
        weights_sha256: sha256_file(&config.weights_path)?,
    };
    Ok(LoadedModel { model, tables, stamp })
}

/// Stage 1: classify the vocabulary.
pub fn stage_classify(model: &TokenizerModel) -> Result<TaxonomyReport, PipelineError> {
    taxonomy_report(model).map_err(|e| stage_error(StageName::Classify, e))
}

/// Stage 2: discover reference tokens and compute every applicable indicator
/// (plus a forced one, whose missing inputs surface as a stage error).
pub fn stage_indicators(
    config: &RunConfig,
    loaded: &LoadedModel,
    taxonomy: &TaxonomyReport,
) -> Result<IndicatorsArtifact, PipelineError> {
    let tables = &loaded.tables;
    let chosen = config.indicator_override.unwrap_or_else(|| auto_indicator(tables));

    let reference = match tables.output_matrix() {
        Some(e_out) => Some(
            find_reference_tokens(&loaded.model, e_out, &taxonomy.tokens, config.ref_ids.as_deref())
                .map_err(|e| stage_error(StageName::Indicators, e))?,
        ),
        None => None,
    };

    let mut kinds = applicable_indicators(tables, config.include_variant_indicators);
    if !kinds.contains(&chosen) {
        kinds.push(chosen);
    }
    let mut vectors = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let vector =
            compute_indicator(kind, tables.input_matrix(), tables.output_matrix(), reference.as_ref())
                .map_err(|e| stage_error(StageName::Indicators, e))?;
        vectors.push(vector);
    }

    Ok(IndicatorsArtifact {
        stamp: loaded.stamp.clone(),
        tied: tables.tied,
        bias_present: tables.bias_present,
        chosen,
        reference,
        vectors,
    })
}

/// Stage 3: rank by the chosen indicator and take the lowest-scoring window.
pub fn stage_candidates(
    indicators: &IndicatorsArtifact,
    taxonomy: &TaxonomyReport,
    fraction: f64,
) -> Result<CandidateSet, PipelineError> {
    let vector = indicators
        .vectors
        .iter()
        .find(|v| v.name == indicators.chosen)
        .ok_or_else(|| {
            stage_error(
                StageName::Candidates,
                format!("indicator artifact has no scores for {}", indicators.chosen),
            )
        })?;
    Ok(select_candidates(vector, &taxonomy.tokens, fraction))
}

/// Stage 4: run the configured backend over the candidate set.
///
/// The synthetic backend needs the embedding table and reference set; the
/// HTTP backend needs neither, but may fail up front (endpoint or auth
/// environment variable missing), which maps to [`PipelineError::BackendUnavailable`].
pub fn stage_verify(
    config: &RunConfig,
    model: &TokenizerModel,
    tables: Option<&EmbeddingTables>,
    reference: Option<&ReferenceSet>,
    candidates: &CandidateSet,
) -> Result<VerificationArtifact, PipelineError> {
    let outcomes = match config.backend.kind {
        BackendKind::SyntheticSoftmax => {
            let tables = tables.ok_or_else(|| {
                stage_error(StageName::Verify, "the synthetic backend needs the embedding table")
            })?;
            let e_out = tables.output_matrix().ok_or_else(|| {
                stage_error(StageName::Verify, "the synthetic backend needs an output matrix")
            })?;
            let reference = reference.ok_or_else(|| {
                stage_error(StageName::Verify, "the synthetic backend needs a reference set")
            })?;
            let backend = SyntheticSoftmax::new(
                model.clone(),
                e_out.rows.clone(),
                reference.u_ref.clone(),
                HiddenRule::recency_default(),
            );
            verify_set(&backend, model, &candidates.ids, config.threshold, config.backend.max_parallel)
        }
        BackendKind::HttpCompletion => {
            let http_config = HttpBackendConfig::from_descriptor(&config.backend)
                .map_err(|e| PipelineError::BackendUnavailable(e.to_string()))?;
            let backend = HttpCompletionBackend::new(http_config)
                .map_err(|e| PipelineError::BackendUnavailable(e.to_string()))?;
            verify_set(&backend, model, &candidates.ids, config.threshold, config.backend.max_parallel)
        }
    };
    let summary = summarize(&outcomes);
    Ok(VerificationArtifact { threshold: config.threshold, summary, outcomes })
}

/// Why a verification pass should be treated as "backend unavailable": it
/// measured nothing, and at least one candidate failed because the backend
/// could not be reached.
pub fn backend_unusable(artifact: &VerificationArtifact) -> Option<String> {
    if artifact.outcomes.is_empty() || artifact.summary.tested > 0 {
        return None;
    }
    let unavailable = artifact
        .outcomes
        .iter()
        .filter(|o| matches!(o, VerificationOutcome::Inconclusive { backend_unavailable: true, .. }))
        .count();
    if unavailable == 0 {
        return None;
    }
    Some(format!(
        "verification measured nothing: all {} candidates inconclusive, {unavailable} because the \
         backend was unreachable",
        artifact.outcomes.len()
    ))
}

fn write_indicator_bin(dir: &Path, artifact: &IndicatorsArtifact) -> Result<(), PipelineError> {
    let outs: Vec<TensorOut<'_>> = artifact
        .vectors
        .iter()
        .map(|v| TensorOut {
            name: v.name.as_str(),
            dtype: Dtype::F64,
            shape: vec![v.scores.len()],
            data: &v.scores,
        })
        .collect();
    // The tensor writer is not atomic on its own; go through a temp name.
    let tmp = dir.join(format!(".{INDICATORS_BIN_FILE}.tmp"));
    write_tensor_file(&tmp, &outs).map_err(|e| stage_error(StageName::Indicators, e))?;
    std::fs::rename(&tmp, dir.join(INDICATORS_BIN_FILE))?;
    Ok(())
}

/// Runs every stage in memory, persisting each artifact along the way, and
/// returns the final report.
///
/// When verification measured nothing because the backend was unreachable,
/// the verification artifact is still written (the evidence matters) but the
/// run fails with [`PipelineError::BackendUnavailable`] and no report files
/// are produced.
pub fn run_pipeline(config: &RunConfig) -> Result<ModelReport, PipelineError> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let loaded = load_inputs(config)?;
    let out = &config.output_dir;
    write_json(&out.join(STAMP_FILE), &loaded.stamp)?;

    let taxonomy = stage_classify(&loaded.model)?;
    write_json(&out.join(TAXONOMY_FILE), &taxonomy)?;

    let indicators = stage_indicators(config, &loaded, &taxonomy)?;
    write_json(&out.join(INDICATORS_FILE), &indicators)?;
    write_indicator_bin(out, &indicators)?;

    let candidates = stage_candidates(&indicators, &taxonomy, config.fraction)?;
    write_json(&out.join(CANDIDATES_FILE), &candidates)?;

    let verification = if config.no_verify {
        log::info!("verification skipped; emitting a candidates-only report");
        None
    } else {
        let artifact = stage_verify(
            config,
            &loaded.model,
            Some(&loaded.tables),
            indicators.reference.as_ref(),
            &candidates,
        )?;
        write_json(&out.join(VERIFICATION_FILE), &artifact)?;
        if let Some(reason) = backend_unusable(&artifact) {
            return Err(PipelineError::BackendUnavailable(reason));
        }
        Some(artifact)
    };

    let report = build_report(
        &taxonomy,
        indicators.tied,
        &indicators.vectors,
        &candidates,
        verification.as_ref().map(|v| v.outcomes.as_slice()),
    );
    emit_report(&report, out, EmitFormats::default())
        .map_err(|e| stage_error(StageName::Report, e))?;
    Ok(report)
}

/// Standalone `classify`: tokenizer in, `taxonomy.json` out.
pub fn run_classify(config: &RunConfig) -> Result<TaxonomyReport, PipelineError> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let model = load_model_only(config)?;
    let taxonomy = stage_classify(&model)?;
    write_json(&config.output_dir.join(TAXONOMY_FILE), &taxonomy)?;
    Ok(taxonomy)
}

/// Standalone `indicators`: needs `taxonomy.json`, writes `stamp.json`,
/// `indicators.json`, and `indicators.bin`.
pub fn run_indicators(config: &RunConfig) -> Result<IndicatorsArtifact, PipelineError> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let loaded = load_inputs(config)?;
    let taxonomy: TaxonomyReport =
        read_json(&config.output_dir.join(TAXONOMY_FILE), StageName::Classify)?;
    let artifact = stage_indicators(config, &loaded, &taxonomy)?;
    write_json(&config.output_dir.join(STAMP_FILE), &loaded.stamp)?;
    write_json(&config.output_dir.join(INDICATORS_FILE), &artifact)?;
    write_indicator_bin(&config.output_dir, &artifact)?;
    Ok(artifact)
}

/// Standalone `candidates`: needs `taxonomy.json` and `indicators.json`.
pub fn run_candidates(config: &RunConfig) -> Result<CandidateSet, PipelineError> {
    config.validate()?;
    let out = &config.output_dir;
    let taxonomy: TaxonomyReport = read_json(&out.join(TAXONOMY_FILE), StageName::Classify)?;
    let indicators: IndicatorsArtifact =
        read_json(&out.join(INDICATORS_FILE), StageName::Indicators)?;
    let candidates = stage_candidates(&indicators, &taxonomy, config.fraction)?;
    write_json(&out.join(CANDIDATES_FILE), &candidates)?;
    Ok(candidates)
}

/// Standalone `verify`: needs `candidates.json` (plus, for the synthetic
/// backend, the weights and `indicators.json` for the reference direction).
///
/// Like [`run_pipeline`], fails with `BackendUnavailable` after persisting
/// the artifact when nothing was measured and the backend was unreachable.
pub fn run_verify(config: &RunConfig) -> Result<VerificationArtifact, PipelineError> {
    config.validate()?;
    let out = &config.output_dir;
    let candidates: CandidateSet = read_json(&out.join(CANDIDATES_FILE), StageName::Candidates)?;

    let artifact = match config.backend.kind {
        BackendKind::SyntheticSoftmax => {
            let loaded = load_inputs(config)?;
            let indicators: IndicatorsArtifact =
                read_json(&out.join(INDICATORS_FILE), StageName::Indicators)?;
            stage_verify(
                config,
                &loaded.model,
                Some(&loaded.tables),
                indicators.reference.as_ref(),
                &candidates,
            )?
        }
        BackendKind::HttpCompletion => {
            let model = load_model_only(config)?;
            stage_verify(config, &model, None, None, &candidates)?
        }
    };
    write_json(&out.join(VERIFICATION_FILE), &artifact)?;
    if let Some(reason) = backend_unusable(&artifact) {
        return Err(PipelineError::BackendUnavailable(reason));
    }
    Ok(artifact)
}

/// Standalone `report`: reads every persisted artifact; `verification.json`
/// is optional (its absence yields a candidates-only report).
pub fn run_report(config: &RunConfig) -> Result<ModelReport, PipelineError> {
    config.validate()?;
    let out = &config.output_dir;
    let taxonomy: TaxonomyReport = read_json(&out.join(TAXONOMY_FILE), StageName::Classify)?;
    let indicators: IndicatorsArtifact =
        read_json(&out.join(INDICATORS_FILE), StageName::Indicators)?;
    let candidates: CandidateSet = read_json(&out.join(CANDIDATES_FILE), StageName::Candidates)?;
    let verification_path = out.join(VERIFICATION_FILE);
    let verification: Option<VerificationArtifact> = if verification_path.exists() {
        Some(read_json(&verification_path, StageName::Verify)?)
    } else {
        None
    };

    let report = build_report(
        &taxonomy,
        indicators.tied,
        &indicators.vectors,
        &candidates,
        verification.as_ref().map(|v| v.outcomes.as_slice()),
    );
    emit_report(&report, out, EmitFormats::default())
        .map_err(|e| stage_error(StageName::Report, e))?;
    Ok(report)
}

/// Loads one run's stamp, candidates, and outcomes for indicator comparison.
pub fn load_indicator_run(dir: &Path) -> Result<IndicatorRun, PipelineError> {
    let stamp: RunStamp = read_json(&dir.join(STAMP_FILE), StageName::Indicators)?;
    let candidates: CandidateSet = read_json(&dir.join(CANDIDATES_FILE), StageName::Candidates)?;
    let verification: VerificationArtifact =
        read_json(&dir.join(VERIFICATION_FILE), StageName::Verify)?;
    Ok(IndicatorRun { stamp, candidates, outcomes: verification.outcomes })
}
