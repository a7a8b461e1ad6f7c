//! Prompt-based verification of candidate under-trained tokens.
//!
//! Each candidate is spliced into three repetitive prompts designed so that a
//! normally-trained token is the obvious greedy continuation. The model under
//! test is asked for three completion steps per prompt; a candidate is
//! *verified* as under-trained when the highest probability it ever receives
//! across all nine positions stays below the threshold (default 1%).

mod backend;

pub use backend::{BackendDescriptor, BackendKind, HttpBackendConfig, HttpCompletionBackend};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;

use crate::taxonomy::classify_token;
use crate::tokenizer::{TokenizerError, TokenizerModel};

/// Default verification threshold: a candidate is confirmed when its maximum
/// observed probability stays below this.
pub const DEFAULT_THRESHOLD: f64 = 0.01;
/// Completion steps requested per prompt.
pub const N_COMPLETION_STEPS: usize = 3;

/// Default weights for [`HiddenRule::Recency`]: the last context token is
/// amplified and the untrained direction suppressed hard enough that planted
/// tokens stay far below any plausible threshold.
pub const RECENCY_GAIN: f64 = 10.0;
pub const RECENCY_SUPPRESS: f64 = 20.0;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("token bytes cannot appear in a text prompt: {0}")]
    UndecodableToken(String),
    #[error("the api probe requires at least one token")]
    EmptyProbe,
    #[error("token {id} is not testable ({why})")]
    NotTestable { id: u32, why: String },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend protocol error: {0}")]
    ProtocolError(String),
    #[error("backend request timed out after {seconds}s")]
    Timeout { seconds: f64 },
}

impl BackendError {
    /// True for failures that mean the backend could not be reached at all,
    /// as opposed to reachable-but-misbehaving.
    pub fn is_unavailability(&self) -> bool {
        matches!(self, BackendError::BackendUnavailable(_) | BackendError::Timeout { .. })
    }
}

/// The four prompt layouts.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub enum PromptId {
    /// A "device" echoing guillemet-quoted inputs, 20 Input lines.
    RepeaterDevice,
    /// An assistant explaining quoted phrases, ending at "Assistant:".
    MeaningAssistant,
    /// The bare token repeated 100 times.
    RepeatedPhrase,
    /// The manual "reformat this Python code" probe for closed APIs.
    ApiPasswordProbe,
}

impl PromptId {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptId::RepeaterDevice => "RepeaterDevice",
            PromptId::MeaningAssistant => "MeaningAssistant",
            PromptId::RepeatedPhrase => "RepeatedPhrase",
            PromptId::ApiPasswordProbe => "ApiPasswordProbe",
        }
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A prompt body with a `<token>` placeholder (or, for the api probe, a
/// `<list of strings ...>` placeholder).
#[derive(Debug, Clone, Copy)]
pub struct PromptTemplate {
    pub id: PromptId,
    pub body: &'static str,
}

static REPEATER_DEVICE: PromptTemplate = PromptTemplate {
    id: PromptId::RepeaterDevice,
    body: include_str!("../../resources/prompts/repeater_device.txt"),
};
static MEANING_ASSISTANT: PromptTemplate = PromptTemplate {
    id: PromptId::MeaningAssistant,
    body: include_str!("../../resources/prompts/meaning_assistant.txt"),
};
static REPEATED_PHRASE: PromptTemplate = PromptTemplate {
    id: PromptId::RepeatedPhrase,
    body: include_str!("../../resources/prompts/repeated_phrase.txt"),
};
static API_PASSWORD_PROBE: PromptTemplate = PromptTemplate {
    id: PromptId::ApiPasswordProbe,
    body: include_str!("../../resources/prompts/api_password_probe.txt"),
};

impl PromptTemplate {
    pub fn get(id: PromptId) -> &'static PromptTemplate {
        match id {
            PromptId::RepeaterDevice => &REPEATER_DEVICE,
            PromptId::MeaningAssistant => &MEANING_ASSISTANT,
            PromptId::RepeatedPhrase => &REPEATED_PHRASE,
            PromptId::ApiPasswordProbe => &API_PASSWORD_PROBE,
        }
    }

    /// The three templates used for automated verification, in run order.
    pub fn verification_templates() -> [&'static PromptTemplate; 3] {
        [&REPEATER_DEVICE, &MEANING_ASSISTANT, &REPEATED_PHRASE]
    }
}

/// Splices the token's exact bytes into every `<token>` placeholder.
pub fn render_prompt(template: &PromptTemplate, token_bytes: &[u8]) -> Result<String, VerifyError> {
    if token_bytes.is_empty() {
        return Err(VerifyError::UndecodableToken("token is empty".into()));
    }
    let text = std::str::from_utf8(token_bytes).map_err(|e| {
        VerifyError::UndecodableToken(format!("token bytes are not valid UTF-8 ({e})"))
    })?;
    Ok(template.body.replace("<token>", text))
}

/// One greedy decoding step and the probability the target token received.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompletionStep {
    pub position: usize,
    pub chosen_id: u32,
    pub target_probability: f64,
}

/// A measured verdict for one candidate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VerificationResult {
    pub token_id: u32,
    /// Highest target probability seen on each prompt.
    pub per_prompt_max: BTreeMap<PromptId, f64>,
    /// Highest target probability across all prompts and steps.
    pub max_probability: f64,
    /// True when `max_probability` stayed below the threshold.
    pub verified: bool,
}

/// Measured result, or a candidate whose prompts could not all be completed.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum VerificationOutcome {
    Measured(VerificationResult),
    Inconclusive { token_id: u32, reason: String, backend_unavailable: bool },
}

impl VerificationOutcome {
    pub fn token_id(&self) -> u32 {
        match self {
            VerificationOutcome::Measured(r) => r.token_id,
            VerificationOutcome::Inconclusive { token_id, .. } => *token_id,
        }
    }

    pub fn as_measured(&self) -> Option<&VerificationResult> {
        match self {
            VerificationOutcome::Measured(r) => Some(r),
            VerificationOutcome::Inconclusive { .. } => None,
        }
    }
}

/// Confirmed/tested/inconclusive counts. Inconclusive candidates are not part
/// of the tested denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct VerificationSummary {
    pub confirmed: usize,
    pub tested: usize,
    pub inconclusive: usize,
}

pub fn summarize(outcomes: &[VerificationOutcome]) -> VerificationSummary {
    let mut summary = VerificationSummary::default();
    for outcome in outcomes {
        match outcome {
            VerificationOutcome::Measured(r) => {
                summary.tested += 1;
                if r.verified {
                    summary.confirmed += 1;
                }
            }
            VerificationOutcome::Inconclusive { .. } => summary.inconclusive += 1,
        }
    }
    summary
}

/// A completion model that can be queried greedily at temperature zero.
/// Implementations must be usable from several worker threads at once.
pub trait CompletionBackend: Sync {
    /// Greedy-decodes `n_steps` tokens from `prompt`, reporting for each step
    /// the chosen token and the probability assigned to `target_id`.
    fn complete(
        &self,
        prompt: &str,
        n_steps: usize,
        target_id: u32,
    ) -> Result<Vec<CompletionStep>, BackendError>;
}

/// Runs the backend and validates the step list: correct length, positions
/// in order, probabilities finite and in `[0, 1]`.
pub fn complete_greedy(
    backend: &dyn CompletionBackend,
    prompt: &str,
    n_steps: usize,
    target_id: u32,
) -> Result<Vec<CompletionStep>, BackendError> {
    assert!(n_steps >= 1, "at least one completion step is required");
    let steps = backend.complete(prompt, n_steps, target_id)?;
    if steps.len() != n_steps {
        return Err(BackendError::ProtocolError(format!(
            "backend returned {} steps, expected {n_steps}",
            steps.len()
        )));
    }
    for (i, step) in steps.iter().enumerate() {
        if step.position != i {
            return Err(BackendError::ProtocolError(format!(
                "step {i} reported position {}",
                step.position
            )));
        }
        if !step.target_probability.is_finite() || !(0.0..=1.0).contains(&step.target_probability)
        {
            return Err(BackendError::ProtocolError(format!(
                "step {i} reported probability {} outside [0, 1]",
                step.target_probability
            )));
        }
    }
    Ok(steps)
}

/// Renders the three verification prompts for one candidate and takes the
/// maximum target probability over all steps of all prompts. Any prompt that
/// fails to complete makes the whole candidate inconclusive.
pub fn verify_candidate(
    backend: &dyn CompletionBackend,
    model: &TokenizerModel,
    token_id: u32,
    threshold: f64,
) -> Result<VerificationOutcome, VerifyError> {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must be in (0, 1), got {threshold}");
    let record = model.decode_token(token_id)?;
    let category = classify_token(model, &record);
    if !category.ok_for_testing {
        let mut why = Vec::new();
        if category.flags.partial_utf8 {
            why.push("partial UTF-8");
        }
        if category.flags.unreachable {
            why.push("unreachable");
        }
        if category.flags.special {
            why.push("special");
        }
        return Err(VerifyError::NotTestable { id: token_id, why: why.join(", ") });
    }

    let mut per_prompt_max = BTreeMap::new();
    for template in PromptTemplate::verification_templates() {
        let prompt = render_prompt(template, &record.raw_bytes)?;
        match complete_greedy(backend, &prompt, N_COMPLETION_STEPS, token_id) {
            Ok(steps) => {
                let prompt_max =
                    steps.iter().map(|s| s.target_probability).fold(0.0_f64, f64::max);
                per_prompt_max.insert(template.id, prompt_max);
            }
            Err(e) => {
                return Ok(VerificationOutcome::Inconclusive {
                    token_id,
                    reason: format!("{} prompt failed: {e}", template.id),
                    backend_unavailable: e.is_unavailability(),
                });
            }
        }
    }
    let max_probability = per_prompt_max.values().copied().fold(0.0_f64, f64::max);
    Ok(VerificationOutcome::Measured(VerificationResult {
        token_id,
        per_prompt_max,
        max_probability,
        verified: max_probability < threshold,
    }))
}

/// Verifies every candidate, up to `max_parallel` at a time. Output order
/// matches candidate order regardless of completion order.
pub fn verify_set(
    backend: &dyn CompletionBackend,
    model: &TokenizerModel,
    candidate_ids: &[u32],
    threshold: f64,
    max_parallel: usize,
) -> Vec<VerificationOutcome> {
    assert!(max_parallel >= 1, "max_parallel must be at least 1");
    let n = candidate_ids.len();
    if n == 0 {
        return Vec::new();
    }
    let slots: Mutex<Vec<Option<VerificationOutcome>>> = Mutex::new(vec![None; n]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..max_parallel.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let id = candidate_ids[i];
                let outcome = match verify_candidate(backend, model, id, threshold) {
                    Ok(outcome) => outcome,
                    Err(e) => VerificationOutcome::Inconclusive {
                        token_id: id,
                        reason: format!("could not run verification: {e}"),
                        backend_unavailable: false,
                    },
                };
                slots.lock().expect("no panics while holding the slot lock")[i] = Some(outcome);
            });
        }
    });
    slots
        .into_inner()
        .expect("all workers joined")
        .into_iter()
        .map(|slot| slot.expect("every index was claimed by exactly one worker"))
        .collect()
}

/// Escapes arbitrary bytes as the body of a double-quoted Python string
/// literal. Valid UTF-8 passes through; undecodable bytes become `\xNN`.
pub fn escape_python_string(bytes: &[u8]) -> String {
    let mut out = String::new();
    let mut rest = bytes;
    loop {
        match std::str::from_utf8(rest) {
            Ok(chunk) => {
                escape_python_chars(chunk, &mut out);
                return out;
            }
            Err(e) => {
                let (valid, bad) = rest.split_at(e.valid_up_to());
                escape_python_chars(std::str::from_utf8(valid).unwrap(), &mut out);
                let bad_len = e.error_len().unwrap_or(bad.len()).max(1);
                for byte in &bad[..bad_len] {
                    out.push_str(&format!("\\x{byte:02X}"));
                }
                rest = &bad[bad_len..];
            }
        }
    }
}

fn escape_python_chars(chunk: &str, out: &mut String) {
    for c in chunk.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 || c as u32 == 0x7F => {
                out.push_str(&format!("\\x{:02X}", c as u32));
            }
            c => out.push(c),
        }
    }
}

/// Builds the manual "reformat this Python code" probe. Each entry is a
/// label (which also shields leading spaces from the opening quote) plus the
/// token's exact bytes; elements are rendered one per line.
pub fn build_api_probe(tokens: &[(&str, &[u8])]) -> Result<String, VerifyError> {
    if tokens.is_empty() {
        return Err(VerifyError::EmptyProbe);
    }
    let mut list = String::from("[\n");
    for (i, (label, bytes)) in tokens.iter().enumerate() {
        let mut content = String::from(*label);
        content.push_str(&escape_python_string(bytes));
        list.push_str("  \"");
        list.push_str(&content);
        list.push('"');
        if i + 1 < tokens.len() {
            list.push(',');
        }
        list.push('\n');
    }
    list.push(']');
    Ok(API_PASSWORD_PROBE
        .body
        .replace("<list of strings with multiple elements per line>", &list))
}

/// How [`SyntheticSoftmax`] forms its hidden state.
#[derive(Debug, Clone, PartialEq)]
pub enum HiddenRule {
    /// `h = gain · normalize(E[last context token]) − suppress · normalize(u_ref)`:
    /// an extreme recency bias plus suppression of the untrained direction.
    Recency { gain: f64, suppress: f64 },
    /// A constant hidden state, for worked examples.
    Fixed(Vec<f64>),
}

impl HiddenRule {
    pub fn recency_default() -> Self {
        HiddenRule::Recency { gain: RECENCY_GAIN, suppress: RECENCY_SUPPRESS }
    }
}

/// A fully deterministic in-process "language model": logits are the dot
/// products of embedding rows with a hidden state derived from the context
/// by a fixed published rule. No network, no nondeterminism.
pub struct SyntheticSoftmax {
    model: TokenizerModel,
    rows: Array2<f64>,
    u_ref: Vec<f64>,
    rule: HiddenRule,
}

impl SyntheticSoftmax {
    pub fn new(model: TokenizerModel, rows: Array2<f64>, u_ref: Vec<f64>, rule: HiddenRule) -> Self {
        assert!(
            rows.nrows() >= model.vocab_size(),
            "embedding table must cover the vocabulary"
        );
        assert_eq!(rows.ncols(), u_ref.len(), "u_ref dimension must match the rows");
        if let HiddenRule::Fixed(h) = &rule {
            assert_eq!(h.len(), rows.ncols(), "fixed hidden state dimension must match the rows");
        }
        SyntheticSoftmax { model, rows, u_ref, rule }
    }

    pub fn tokenizer(&self) -> &TokenizerModel {
        &self.model
    }

    /// The hidden state produced after `last_token`.
    pub fn hidden_state(&self, last_token: u32) -> Vec<f64> {
        match &self.rule {
            HiddenRule::Fixed(h) => h.clone(),
            HiddenRule::Recency { gain, suppress } => {
                let dim = self.rows.ncols();
                let mut h = vec![0.0; dim];
                let row = self.rows.row(last_token as usize);
                let row_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if row_norm > 0.0 {
                    for (out, &v) in h.iter_mut().zip(row.iter()) {
                        *out += gain * v / row_norm;
                    }
                }
                let ref_norm = self.u_ref.iter().map(|v| v * v).sum::<f64>().sqrt();
                if ref_norm > 0.0 {
                    for (out, &v) in h.iter_mut().zip(&self.u_ref) {
                        *out -= suppress * v / ref_norm;
                    }
                }
                h
            }
        }
    }

    /// The full next-token distribution after `last_token` (softmax of
    /// `rows · h`, computed stably in f64).
    pub fn distribution(&self, last_token: u32) -> Vec<f64> {
        let h = self.hidden_state(last_token);
        let logits: Vec<f64> = self
            .rows
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&h).map(|(&r, &x)| r * x).sum())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

impl CompletionBackend for SyntheticSoftmax {
    fn complete(
        &self,
        prompt: &str,
        n_steps: usize,
        target_id: u32,
    ) -> Result<Vec<CompletionStep>, BackendError> {
        if target_id as usize >= self.rows.nrows() {
            return Err(BackendError::ProtocolError(format!(
                "target id {target_id} is outside the {}-row embedding table",
                self.rows.nrows()
            )));
        }
        let context = self.model.encode(prompt).map_err(|e| {
            BackendError::ProtocolError(format!("prompt is not encodable by this model: {e}"))
        })?;
        let mut last = *context
            .last()
            .ok_or_else(|| BackendError::ProtocolError("prompt encoded to no tokens".into()))?;

        let mut steps = Vec::with_capacity(n_steps);
        for position in 0..n_steps {
            let probs = self.distribution(last);
            // Greedy pick; the strict comparison keeps the lowest id on ties.
            let mut chosen = 0usize;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[chosen] {
                    chosen = i;
                }
            }
            steps.push(CompletionStep {
                position,
                chosen_id: chosen as u32,
                target_probability: probs[target_id as usize],
            });
            last = chosen as u32;
        }
        Ok(steps)
    }
}
