//! Report assembly: aggregates taxonomy, indicator, candidate, and
//! verification artifacts into one serializable structure plus a markdown
//! rendering, and compares runs of different indicators over the same model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::{CandidateSet, IndicatorKind, IndicatorVector};
use crate::io_util::atomic_write;
use crate::taxonomy::TaxonomyReport;
use crate::verify::{summarize, VerificationOutcome, VerificationSummary};

/// Fixed bin count for score histograms.
pub const HISTOGRAM_BINS: usize = 100;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("runs cannot be compared: {0}")]
    MismatchedRuns(String),
}

/// Equal-width histogram of one indicator's scores over `[min, max]`.
///
/// The last bin is closed on the right, so `max` itself lands in bin 99. A
/// degenerate range (`min == max`) puts every score in bin 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub indicator: IndicatorKind,
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Builds the histogram from raw scores. Empty input gives an all-zero
    /// histogram over `[0, 0]`.
    pub fn from_scores(indicator: IndicatorKind, scores: &[f64]) -> Histogram {
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        if scores.is_empty() {
            return Histogram { indicator, min: 0.0, max: 0.0, counts };
        }
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = max - min;
        for &score in scores {
            let idx = if width == 0.0 {
                0
            } else {
                let raw = ((score - min) / width * HISTOGRAM_BINS as f64).floor() as usize;
                raw.min(HISTOGRAM_BINS - 1)
            };
            counts[idx] += 1;
        }
        Histogram { indicator, min, max, counts }
    }

    /// Total mass; always equals the number of scores binned.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Headline numbers for one model run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub vocab_size: usize,
    pub tied_embeddings: bool,
    pub indicator: IndicatorKind,
    pub n_candidates: usize,
    pub n_confirmed: usize,
    pub n_inconclusive: usize,
    /// Candidates with a measured result; inconclusive ones are excluded.
    pub n_tested: usize,
}

impl Default for ReportSummary {
    fn default() -> Self {
        ReportSummary {
            vocab_size: 0,
            tied_embeddings: false,
            indicator: IndicatorKind::CosineToRef,
            n_candidates: 0,
            n_confirmed: 0,
            n_inconclusive: 0,
            n_tested: 0,
        }
    }
}

/// One token listed in a taxonomy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub id: u32,
    pub surface: String,
}

/// Per-category token listings pulled out of the taxonomy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyTables {
    pub special: Vec<TokenEntry>,
    pub unreachable: Vec<TokenEntry>,
    pub partial_utf8: Vec<TokenEntry>,
}

/// One verified under-trained token, with its indicator score and the highest
/// probability any verification prompt ever assigned to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfirmedToken {
    pub id: u32,
    pub surface: String,
    pub score: f64,
    pub max_probability: f64,
}

/// Full run report; round-trips through JSON exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub summary: ReportSummary,
    pub taxonomy: TaxonomyTables,
    /// Confirmed tokens sorted by ascending indicator score.
    pub confirmed: Vec<ConfirmedToken>,
    pub histograms: Vec<Histogram>,
}

fn taxonomy_tables(taxonomy: &TaxonomyReport) -> TaxonomyTables {
    let mut tables = TaxonomyTables::default();
    for token in &taxonomy.tokens {
        let entry = TokenEntry { id: token.id, surface: token.surface.clone() };
        if token.flags.special {
            tables.special.push(entry.clone());
        }
        if token.flags.unreachable {
            tables.unreachable.push(entry.clone());
        }
        if token.flags.partial_utf8 {
            tables.partial_utf8.push(entry);
        }
    }
    tables
}

/// Assembles the final report.
///
/// `outcomes` is `None` when verification was skipped; the summary then shows
/// zero tested/confirmed/inconclusive and the confirmed table stays empty.
/// Confirmed tokens take their score from the indicator vector that produced
/// the candidate set and are sorted by ascending score (ties by id).
pub fn build_report(
    taxonomy: &TaxonomyReport,
    tied_embeddings: bool,
    indicators: &[IndicatorVector],
    candidates: &CandidateSet,
    outcomes: Option<&[VerificationOutcome]>,
) -> ModelReport {
    let summary_counts: VerificationSummary =
        outcomes.map(summarize).unwrap_or_default();
    let selecting = indicators.iter().find(|v| v.name == candidates.indicator);

    let mut confirmed = Vec::new();
    if let (Some(outcomes), Some(vector)) = (outcomes, selecting) {
        for result in outcomes.iter().filter_map(VerificationOutcome::as_measured) {
            if !result.verified {
                continue;
            }
            let id = result.token_id;
            let surface = taxonomy
                .tokens
                .get(id as usize)
                .map(|t| t.surface.clone())
                .unwrap_or_default();
            confirmed.push(ConfirmedToken {
                id,
                surface,
                score: vector.scores.get(id as usize).copied().unwrap_or(f64::NAN),
                max_probability: result.max_probability,
            });
        }
    }
    confirmed.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.id.cmp(&b.id)));

    let histograms = indicators
        .iter()
        .map(|v| Histogram::from_scores(v.name, &v.scores))
        .collect();

    ModelReport {
        summary: ReportSummary {
            vocab_size: taxonomy.vocab_size,
            tied_embeddings,
            indicator: candidates.indicator,
            n_candidates: candidates.ids.len(),
            n_confirmed: summary_counts.confirmed,
            n_inconclusive: summary_counts.inconclusive,
            n_tested: summary_counts.tested,
        },
        taxonomy: taxonomy_tables(taxonomy),
        confirmed,
        histograms,
    }
}

/// Escapes a token surface for use inside a markdown table cell.
fn markdown_cell(surface: &str) -> String {
    surface.replace('|', "\\|")
}

fn push_token_table(out: &mut String, title: &str, entries: &[TokenEntry]) {
    out.push_str(&format!("### {title} ({})\n\n", entries.len()));
    if entries.is_empty() {
        out.push_str("_None._\n\n");
        return;
    }
    out.push_str("| Id | Token |\n|---:|:---|\n");
    for entry in entries {
        out.push_str(&format!("| {} | {} |\n", entry.id, markdown_cell(&entry.surface)));
    }
    out.push('\n');
}

/// Renders the report as a human-readable markdown document. Deterministic:
/// the same report always renders to the same bytes.
pub fn render_markdown(report: &ModelReport) -> String {
    let s = &report.summary;
    let mut out = String::new();
    out.push_str("# Under-trained token report\n\n");
    out.push_str("## Summary\n\n");
    out.push_str(
        "| Vocab size | Tied embeddings | Indicator | Candidates | Confirmed | Tested | Inconclusive |\n",
    );
    out.push_str("|---:|:---:|:---|---:|---:|---:|---:|\n");
    out.push_str(&format!(
        "| {} | {} | {} | {} | {} | {} | {} |\n\n",
        s.vocab_size,
        if s.tied_embeddings { "yes" } else { "no" },
        s.indicator,
        s.n_candidates,
        s.n_confirmed,
        s.n_tested,
        s.n_inconclusive,
    ));

    out.push_str("## Confirmed under-trained tokens\n\n");
    if report.confirmed.is_empty() {
        out.push_str("_None._\n\n");
    } else {
        out.push_str("| Id | Token | Score | Max probability |\n|---:|:---|---:|---:|\n");
        for token in &report.confirmed {
            out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                token.id,
                markdown_cell(&token.surface),
                token.score,
                token.max_probability,
            ));
        }
        out.push('\n');
    }

    out.push_str("## Token taxonomy\n\n");
    push_token_table(&mut out, "Special tokens", &report.taxonomy.special);
    push_token_table(&mut out, "Unreachable tokens", &report.taxonomy.unreachable);
    push_token_table(&mut out, "Partial UTF-8 tokens", &report.taxonomy.partial_utf8);

    out.push_str("## Indicator histograms\n\n");
    if report.histograms.is_empty() {
        out.push_str("_None._\n");
    }
    for histogram in &report.histograms {
        out.push_str(&format!("### {}\n\n", histogram.indicator));
        out.push_str(&format!(
            "Range [{}, {}], {} scores in {} bins:\n\n",
            histogram.min,
            histogram.max,
            histogram.total(),
            histogram.counts.len(),
        ));
        let cells: Vec<String> = histogram.counts.iter().map(u64::to_string).collect();
        out.push_str(&format!("```\n{}\n```\n\n", cells.join(" ")));
    }
    out
}

/// Serialized forms written by [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmitFormats {
    pub json: bool,
    pub markdown: bool,
}

impl Default for EmitFormats {
    fn default() -> Self {
        EmitFormats { json: true, markdown: true }
    }
}

/// Writes `report.json` and/or `report.md` under `out_dir` atomically and
/// returns the paths written. The JSON form parses back to an equal report.
pub fn emit_report(
    report: &ModelReport,
    out_dir: &Path,
    formats: EmitFormats,
) -> Result<Vec<PathBuf>, ReportError> {
    let mut written = Vec::new();
    if formats.json {
        let path = out_dir.join("report.json");
        let mut bytes = serde_json::to_vec_pretty(report)?;
        bytes.push(b'\n');
        atomic_write(&path, &bytes).map_err(|source| ReportError::Io { path: path.clone(), source })?;
        written.push(path);
    }
    if formats.markdown {
        let path = out_dir.join("report.md");
        atomic_write(&path, render_markdown(report).as_bytes())
            .map_err(|source| ReportError::Io { path: path.clone(), source })?;
        written.push(path);
    }
    Ok(written)
}

/// Identifies the model inputs a run was computed from, so that runs of
/// different indicators are only compared when they saw the same bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStamp {
    pub tokenizer_sha256: String,
    pub weights_sha256: String,
}

/// One indicator's candidate set and verification outcomes over a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorRun {
    pub stamp: RunStamp,
    pub candidates: CandidateSet,
    pub outcomes: Vec<VerificationOutcome>,
}

/// Side-by-side counts for one indicator in a comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub indicator: IndicatorKind,
    pub n_candidates: usize,
    pub n_confirmed: usize,
    pub n_tested: usize,
    pub n_inconclusive: usize,
    /// Confirmed ids unique to this indicator across the compared runs.
    pub unique_confirmed: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorComparison {
    pub stamp: RunStamp,
    pub rows: Vec<ComparisonRow>,
}

fn confirmed_ids(outcomes: &[VerificationOutcome]) -> Vec<u32> {
    outcomes
        .iter()
        .filter_map(VerificationOutcome::as_measured)
        .filter(|r| r.verified)
        .map(|r| r.token_id)
        .collect()
}

/// Compares several indicator runs over the same tokenizer and weights.
///
/// Fails with [`ReportError::MismatchedRuns`] when the runs' stamps differ,
/// since confirmed/candidate counts are meaningless across different models.
pub fn compare_indicators(runs: &[IndicatorRun]) -> Result<IndicatorComparison, ReportError> {
    let first = runs
        .first()
        .ok_or_else(|| ReportError::MismatchedRuns("no runs supplied".into()))?;
    for run in runs {
        if run.stamp != first.stamp {
            return Err(ReportError::MismatchedRuns(format!(
                "run for {} was computed from different model inputs than run for {}",
                run.candidates.indicator, first.candidates.indicator,
            )));
        }
    }

    let mut confirmed_by_indicator: BTreeMap<IndicatorKind, Vec<u32>> = BTreeMap::new();
    for run in runs {
        confirmed_by_indicator
            .entry(run.candidates.indicator)
            .or_default()
            .extend(confirmed_ids(&run.outcomes));
    }

    let rows = runs
        .iter()
        .map(|run| {
            let summary = summarize(&run.outcomes);
            let mine = confirmed_ids(&run.outcomes);
            let unique_confirmed = mine
                .iter()
                .copied()
                .filter(|id| {
                    confirmed_by_indicator
                        .iter()
                        .filter(|(k, _)| **k != run.candidates.indicator)
                        .all(|(_, ids)| !ids.contains(id))
                })
                .collect();
            ComparisonRow {
                indicator: run.candidates.indicator,
                n_candidates: run.candidates.ids.len(),
                n_confirmed: summary.confirmed,
                n_tested: summary.tested,
                n_inconclusive: summary.inconclusive,
                unique_confirmed,
            }
        })
        .collect();

    Ok(IndicatorComparison { stamp: first.stamp.clone(), rows })
}

/// Renders an indicator comparison as a markdown table.
pub fn render_comparison_markdown(comparison: &IndicatorComparison) -> String {
    let mut out = String::new();
    out.push_str("# Indicator comparison\n\n");
    out.push_str(&format!(
        "Tokenizer `{}`, weights `{}`.\n\n",
        comparison.stamp.tokenizer_sha256, comparison.stamp.weights_sha256
    ));
    out.push_str("| Indicator | Candidates | Confirmed | Tested | Inconclusive | Unique confirmed |\n");
    out.push_str("|:---|---:|---:|---:|---:|---:|\n");
    for row in &comparison.rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            row.indicator,
            row.n_candidates,
            row.n_confirmed,
            row.n_tested,
            row.n_inconclusive,
            row.unique_confirmed.len(),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::tokenizer::{tokenizer_from_value, TokenizerModel};
    use crate::verify::{PromptId, VerificationResult};

    fn histogram(scores: &[f64]) -> Histogram {
        Histogram::from_scores(IndicatorKind::CosineToRef, scores)
    }

    #[test]
    fn histogram_places_hand_checked_values() {
        // Range [0, 1]: 0.0 -> bin 0, 0.5 -> bin 50, 0.999 -> bin 99, and the
        // maximum itself stays in the last bin rather than overflowing.
        let h = histogram(&[0.0, 0.5, 0.999, 1.0]);
        assert_eq!(h.min, 0.0);
        assert_eq!(h.max, 1.0);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[50], 1);
        assert_eq!(h.counts[99], 2);
        assert_eq!(h.total(), 4);
    }

    #[test]
    fn histogram_degenerate_range_uses_bin_zero() {
        let h = histogram(&[2.5, 2.5, 2.5]);
        assert_eq!(h.min, 2.5);
        assert_eq!(h.max, 2.5);
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.total(), 3);
    }

    #[test]
    fn histogram_mass_matches_input_length() {
        let scores: Vec<f64> = (0..1234).map(|i| (i as f64 * 0.7).sin()).collect();
        let h = histogram(&scores);
        assert_eq!(h.total(), 1234);
    }

    #[test]
    fn histogram_empty_input_is_all_zero() {
        let h = histogram(&[]);
        assert_eq!(h.total(), 0);
        assert_eq!(h.counts.len(), HISTOGRAM_BINS);
    }

    /// Tokenizer with one multi-byte reachable token, one special token, and
    /// one invalid-UTF-8 token, for exercising every report table.
    fn report_model() -> TokenizerModel {
        let doc = serde_json::json!({
            "byte_alphabet": "byte_to_char",
            "vocab": {
                "ĠSolidGoldMagikarp": 0,
                "<pad>": 1,
                "õ": 2,
                "a": 3,
                "|pipe": 4,
            },
            "merges": [],
            "pre_tokenizer_pattern": null,
            "added_tokens": [
                {"id": 1, "content": "<pad>", "special": true}
            ],
            "ignore_merges": true,
        });
        tokenizer_from_value(&doc).unwrap()
    }

    fn measured(token_id: u32, max_probability: f64, verified: bool) -> VerificationOutcome {
        let mut per_prompt_max = BTreeMap::new();
        per_prompt_max.insert(PromptId::RepeaterDevice, max_probability);
        VerificationOutcome::Measured(VerificationResult {
            token_id,
            per_prompt_max,
            max_probability,
            verified,
        })
    }

    fn sample_report() -> ModelReport {
        let model = report_model();
        let taxonomy = crate::taxonomy::taxonomy_report(&model).unwrap();
        let indicators = vec![IndicatorVector {
            name: IndicatorKind::CosineToRef,
            scores: vec![0.001, 0.9, 0.95, 1.0, 0.002],
            degenerate_rows: vec![],
        }];
        let candidates = CandidateSet {
            indicator: IndicatorKind::CosineToRef,
            fraction: 0.4,
            ids: vec![0, 4],
        };
        let outcomes = vec![
            measured(0, 3.2e-7, true),
            measured(4, 0.4, false),
        ];
        build_report(&taxonomy, true, &indicators, &candidates, Some(&outcomes))
    }

    #[test]
    fn build_report_fills_summary_and_confirmed() {
        let report = sample_report();
        assert_eq!(report.summary.vocab_size, 5);
        assert!(report.summary.tied_embeddings);
        assert_eq!(report.summary.n_candidates, 2);
        assert_eq!(report.summary.n_confirmed, 1);
        assert_eq!(report.summary.n_tested, 2);
        assert_eq!(report.summary.n_inconclusive, 0);
        assert_eq!(report.confirmed.len(), 1);
        assert_eq!(report.confirmed[0].id, 0);
        assert_eq!(report.confirmed[0].surface, "_SolidGoldMagikarp");
        assert_eq!(report.confirmed[0].score, 0.001);
        assert_eq!(report.confirmed[0].max_probability, 3.2e-7);
        // Taxonomy tables pick up the special and the undecodable token.
        assert_eq!(report.taxonomy.special.len(), 1);
        assert_eq!(report.taxonomy.special[0].surface, "<pad>");
        assert_eq!(report.taxonomy.partial_utf8.len(), 1);
        assert_eq!(report.taxonomy.partial_utf8[0].surface, "\\xF5");
    }

    #[test]
    fn confirmed_tokens_sorted_by_ascending_score() {
        let model = report_model();
        let taxonomy = crate::taxonomy::taxonomy_report(&model).unwrap();
        let indicators = vec![IndicatorVector {
            name: IndicatorKind::CosineToRef,
            scores: vec![0.5, 0.9, 0.95, 1.0, 0.002],
            degenerate_rows: vec![],
        }];
        let candidates = CandidateSet {
            indicator: IndicatorKind::CosineToRef,
            fraction: 0.4,
            ids: vec![0, 4],
        };
        let outcomes = vec![measured(0, 1e-7, true), measured(4, 2e-7, true)];
        let report = build_report(&taxonomy, true, &indicators, &candidates, Some(&outcomes));
        let ids: Vec<u32> = report.confirmed.iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![4, 0], "lower score first");
        // The "|pipe" surface must not break the confirmed table.
        let md = render_markdown(&report);
        assert!(md.contains("| 4 | \\|pipe |"));
    }

    #[test]
    fn markdown_shows_surfaces_and_escapes_pipes() {
        let report = sample_report();
        let md = render_markdown(&report);
        assert!(md.contains("_SolidGoldMagikarp"));
        assert!(md.contains("\\xF5"));
        assert!(md.contains("# Under-trained token report"));
        assert!(md.contains("### Special tokens (1)"));
        // Deterministic rendering.
        assert_eq!(md, render_markdown(&report));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let report = sample_report();
        let json = serde_json::to_string_pretty(&report).unwrap();
        let parsed: ModelReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn empty_report_serializes_with_zeroed_summary() {
        let report = ModelReport::default();
        assert_eq!(report.summary.vocab_size, 0);
        assert_eq!(report.summary.n_candidates, 0);
        let json = serde_json::to_string(&report).unwrap();
        let parsed: ModelReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, report);
        // Markdown for the empty report still renders every section.
        let md = render_markdown(&report);
        assert!(md.contains("## Token taxonomy"));
        assert!(md.contains("_None._"));
    }

    #[test]
    fn emit_report_writes_requested_formats() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        let written = emit_report(&report, dir.path(), EmitFormats::default()).unwrap();
        assert_eq!(written.len(), 2);
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let parsed: ModelReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, report);
        let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert_eq!(md, render_markdown(&report));

        let only_json =
            emit_report(&report, dir.path(), EmitFormats { json: true, markdown: false }).unwrap();
        assert_eq!(only_json, vec![dir.path().join("report.json")]);
    }

    fn stamp(tag: &str) -> RunStamp {
        RunStamp {
            tokenizer_sha256: format!("tok-{tag}"),
            weights_sha256: format!("w-{tag}"),
        }
    }

    fn run(indicator: IndicatorKind, stamp: RunStamp, confirmed: &[u32]) -> IndicatorRun {
        IndicatorRun {
            stamp,
            candidates: CandidateSet {
                indicator,
                fraction: 0.02,
                ids: confirmed.to_vec(),
            },
            outcomes: confirmed.iter().map(|&id| measured(id, 1e-6, true)).collect(),
        }
    }

    #[test]
    fn compare_indicators_reports_unique_confirmations() {
        let runs = vec![
            run(IndicatorKind::CosineToRef, stamp("a"), &[1, 2, 3]),
            run(IndicatorKind::InputNorm, stamp("a"), &[2, 3, 9]),
        ];
        let comparison = compare_indicators(&runs).unwrap();
        assert_eq!(comparison.rows.len(), 2);
        assert_eq!(comparison.rows[0].n_confirmed, 3);
        assert_eq!(comparison.rows[0].unique_confirmed, vec![1]);
        assert_eq!(comparison.rows[1].unique_confirmed, vec![9]);
        let md = render_comparison_markdown(&comparison);
        assert!(md.contains("| CosineToRef | 3 | 3 | 3 | 0 | 1 |"));
    }

    #[test]
    fn compare_indicators_rejects_mismatched_inputs() {
        let runs = vec![
            run(IndicatorKind::CosineToRef, stamp("a"), &[1]),
            run(IndicatorKind::InputNorm, stamp("b"), &[2]),
        ];
        let err = compare_indicators(&runs).unwrap_err();
        assert!(matches!(err, ReportError::MismatchedRuns(_)));
        assert!(compare_indicators(&[]).is_err());
    }
}
