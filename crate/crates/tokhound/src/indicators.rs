//! Under-training indicators computed from embedding geometry.
//!
//! Every indicator is "ascending is worse": the lowest-scoring rows are the
//! most likely to be under-trained. All reductions run sequentially in f64 so
//! identical inputs produce bit-identical outputs.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::embeddings::{mean_rows, EmbeddingMatrix, EmbeddingTables, ReferenceSet};
use crate::taxonomy::TokenCategory;

/// Default power-iteration budget for [`first_principal_direction`].
pub const PC_MAX_ITER: usize = 1000;
/// Default convergence tolerance on `1 - |cos|` between successive iterates.
pub const PC_TOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum IndicatorError {
    #[error("indicator {indicator} requires {needs}, which is not available")]
    MissingInput { indicator: IndicatorKind, needs: &'static str },
    #[error("reference vector has zero norm; cosine distances are undefined")]
    ZeroReferenceVector,
    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    DidNotConverge { iterations: usize, residual: f64 },
}

/// The five supported indicators.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub enum IndicatorKind {
    /// Cosine distance from each output-embedding row to the reference mean.
    CosineToRef,
    /// Euclidean distance from each output-embedding row to the reference mean.
    EuclideanToRef,
    /// L2 norm of each input-embedding row.
    InputNorm,
    /// CosineToRef after subtracting the mean row from the output matrix.
    CosineCenteredToRef,
    /// CosineToRef after removing the first principal component from every row.
    CosinePcRemovedToRef,
}

/// All indicator kinds, in presentation order.
pub const ALL_INDICATORS: [IndicatorKind; 5] = [
    IndicatorKind::CosineToRef,
    IndicatorKind::EuclideanToRef,
    IndicatorKind::InputNorm,
    IndicatorKind::CosineCenteredToRef,
    IndicatorKind::CosinePcRemovedToRef,
];

impl IndicatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IndicatorKind::CosineToRef => "CosineToRef",
            IndicatorKind::EuclideanToRef => "EuclideanToRef",
            IndicatorKind::InputNorm => "InputNorm",
            IndicatorKind::CosineCenteredToRef => "CosineCenteredToRef",
            IndicatorKind::CosinePcRemovedToRef => "CosinePcRemovedToRef",
        }
    }

    /// True when the indicator reads the input-embedding matrix.
    pub fn needs_input(self) -> bool {
        matches!(self, IndicatorKind::InputNorm)
    }

    /// True when the indicator reads the output matrix and reference set.
    pub fn needs_output(self) -> bool {
        !self.needs_input()
    }
}

impl fmt::Display for IndicatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IndicatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_lowercase();
        match folded.as_str() {
            "cosinetoref" => Ok(IndicatorKind::CosineToRef),
            "euclideantoref" => Ok(IndicatorKind::EuclideanToRef),
            "inputnorm" => Ok(IndicatorKind::InputNorm),
            "cosinecenteredtoref" => Ok(IndicatorKind::CosineCenteredToRef),
            "cosinepcremovedtoref" => Ok(IndicatorKind::CosinePcRemovedToRef),
            _ => Err(format!(
                "unknown indicator {s:?}; expected one of CosineToRef, EuclideanToRef, \
                 InputNorm, CosineCenteredToRef, CosinePcRemovedToRef"
            )),
        }
    }
}

/// Per-token scores for one indicator. Lower scores = more under-trained.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IndicatorVector {
    #[serde(rename = "indicator")]
    pub name: IndicatorKind,
    pub scores: Vec<f64>,
    /// Rows with zero norm, whose cosine score was pinned to 1.0.
    #[serde(default)]
    pub degenerate_rows: Vec<u32>,
}

/// The first principal component of a row-centered matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrincipalDirection {
    /// Unit vector; sign fixed so the largest-magnitude entry is positive.
    pub u1: Vec<f64>,
    /// Variance along `u1` (largest eigenvalue of the centered covariance).
    pub rayleigh: f64,
}

/// The lowest-scoring testable token ids under one indicator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CandidateSet {
    pub indicator: IndicatorKind,
    pub fraction: f64,
    /// Candidate token ids in ascending score order (ties by ascending id).
    pub ids: Vec<u32>,
}

/// Output of [`cosine_distances`]: scores plus zero-norm row flags.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineDistances {
    pub scores: Vec<f64>,
    pub degenerate_rows: Vec<u32>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `result_i = 1 − (A_i·x)/(‖A_i‖‖x‖)`, clamped to `[0, 2]` against roundoff.
/// Zero-norm rows score 1.0 (the "uninformative" midpoint) and are flagged.
pub fn cosine_distances(a: &Array2<f64>, x: &[f64]) -> Result<CosineDistances, IndicatorError> {
    assert_eq!(a.ncols(), x.len(), "reference dimension must match matrix columns");
    let x_norm = l2(x);
    if x_norm == 0.0 {
        return Err(IndicatorError::ZeroReferenceVector);
    }
    let mut scores = Vec::with_capacity(a.nrows());
    let mut degenerate_rows = Vec::new();
    for (i, row) in a.rows().into_iter().enumerate() {
        let mut d = 0.0;
        let mut sq = 0.0;
        for (&r, &v) in row.iter().zip(x) {
            d += r * v;
            sq += r * r;
        }
        if sq == 0.0 {
            degenerate_rows.push(i as u32);
            scores.push(1.0);
        } else {
            scores.push((1.0 - d / (sq.sqrt() * x_norm)).clamp(0.0, 2.0));
        }
    }
    Ok(CosineDistances { scores, degenerate_rows })
}

/// `result_i = ‖A_i − x‖`.
pub fn euclidean_distances(a: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), x.len(), "reference dimension must match matrix columns");
    a.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(x)
                .map(|(&r, &v)| {
                    let d = r - v;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// `result_i = ‖A_i‖`.
pub fn row_norms(a: &Array2<f64>) -> Vec<f64> {
    a.rows()
        .into_iter()
        .map(|row| row.iter().map(|&v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Subtracts the mean row from every row.
pub fn center_rows(e: &Array2<f64>) -> Array2<f64> {
    let (n, d) = e.dim();
    let mut mean = vec![0.0; d];
    for row in e.rows() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    let nf = n.max(1) as f64;
    for m in &mut mean {
        *m /= nf;
    }
    let mut out = e.clone();
    for mut row in out.rows_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= *m;
        }
    }
    out
}

/// First principal component of the row-centered matrix via power iteration
/// on the centered Gram operator `v ← CᵀCv`, starting from the normalized
/// all-ones vector.
///
/// `tol` bounds the estimated misalignment of `u1` itself, not merely the
/// agreement between successive iterates; the iteration keeps going on
/// matrices with a narrow spectral gap until the extrapolated error is below
/// `tol` or `max_iter` is exhausted.
pub fn first_principal_direction(
    e: &Array2<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<PrincipalDirection, IndicatorError> {
    let (n, dim) = e.dim();
    assert!(n >= 2, "principal direction needs at least two rows");
    assert!(dim >= 1, "principal direction needs at least one column");
    let c = center_rows(e);

    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut residual = f64::INFINITY;
    let mut prev_residual;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut cv = vec![0.0; n];
        for (out, row) in cv.iter_mut().zip(c.rows()) {
            *out = dot(row.as_slice().expect("owned matrix rows are contiguous"), &v);
        }
        let mut w = vec![0.0; dim];
        for (row, &cvi) in c.rows().into_iter().zip(&cv) {
            for (acc, &r) in w.iter_mut().zip(row.iter()) {
                *acc += r * cvi;
            }
        }
        let w_norm = l2(&w);
        if w_norm == 0.0 {
            // v maps to zero, so it is exactly an eigenvector with eigenvalue
            // zero (e.g. all rows equal). Accept it as converged.
            residual = 0.0;
            break;
        }
        for x in &mut w {
            *x /= w_norm;
        }
        prev_residual = residual;
        residual = (1.0 - dot(&w, &v).abs()).max(0.0);
        v = w;
        if residual <= f64::EPSILON {
            // Successive iterates agree to machine precision.
            break;
        }
        // Successive-iterate agreement alone overstates accuracy when the top
        // two eigenvalues are close: the remaining misalignment is roughly
        // the successive residual divided by the squared spectral gap. The
        // residuals contract by the squared eigenvalue ratio per step, so
        // estimate that ratio from the last two residuals and stop only once
        // the extrapolated true misalignment is within tol.
        if prev_residual.is_finite() && prev_residual > 0.0 {
            let ratio = (residual / prev_residual).sqrt();
            if ratio < 1.0 {
                let gap = 1.0 - ratio;
                if residual <= tol * gap * gap {
                    break;
                }
            }
        }
    }
    if residual > 1e-6 {
        return Err(IndicatorError::DidNotConverge { iterations, residual });
    }

    let mut max_idx = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[max_idx].abs() {
            max_idx = i;
        }
    }
    if v[max_idx] < 0.0 {
        for x in &mut v {
            *x = -*x;
        }
    }

    let mut cv_sq = 0.0;
    for row in c.rows() {
        let p = dot(row.as_slice().expect("owned matrix rows are contiguous"), &v);
        cv_sq += p * p;
    }
    let rayleigh = cv_sq / (n as f64 - 1.0);
    Ok(PrincipalDirection { u1: v, rayleigh })
}

/// Removes each row's component along `u1`: `Ẽ_i = E_i − (u1ᵀE_i)u1`.
pub fn remove_first_pc(e: &Array2<f64>, u1: &[f64]) -> Array2<f64> {
    assert_eq!(e.ncols(), u1.len(), "principal direction dimension must match matrix columns");
    let norm = l2(u1);
    assert!((norm - 1.0).abs() <= 1e-9, "u1 must be a unit vector, got norm {norm}");
    let mut out = e.clone();
    for mut row in out.rows_mut() {
        let mut proj = 0.0;
        for (v, u) in row.iter().zip(u1) {
            proj += v * u;
        }
        for (v, u) in row.iter_mut().zip(u1) {
            *v -= proj * u;
        }
    }
    out
}

/// Computes one named indicator from whichever matrices it requires.
///
/// The centered and PC-removed variants recompute the reference mean from the
/// transformed matrix over the same reference ids, so the reference point and
/// the scored rows always live in the same space.
pub fn compute_indicator(
    name: IndicatorKind,
    e_in: Option<&EmbeddingMatrix>,
    e_out: Option<&EmbeddingMatrix>,
    refset: Option<&ReferenceSet>,
) -> Result<IndicatorVector, IndicatorError> {
    let missing = |needs| IndicatorError::MissingInput { indicator: name, needs };
    match name {
        IndicatorKind::InputNorm => {
            let e_in = e_in.ok_or_else(|| missing("the input-embedding matrix"))?;
            Ok(IndicatorVector { name, scores: row_norms(&e_in.rows), degenerate_rows: Vec::new() })
        }
        IndicatorKind::CosineToRef => {
            let e_out = e_out.ok_or_else(|| missing("the output-embedding matrix"))?;
            let refset = refset.ok_or_else(|| missing("a reference set"))?;
            let cd = cosine_distances(&e_out.rows, &refset.u_ref)?;
            Ok(IndicatorVector { name, scores: cd.scores, degenerate_rows: cd.degenerate_rows })
        }
        IndicatorKind::EuclideanToRef => {
            let e_out = e_out.ok_or_else(|| missing("the output-embedding matrix"))?;
            let refset = refset.ok_or_else(|| missing("a reference set"))?;
            let scores = euclidean_distances(&e_out.rows, &refset.u_ref);
            Ok(IndicatorVector { name, scores, degenerate_rows: Vec::new() })
        }
        IndicatorKind::CosineCenteredToRef => {
            let e_out = e_out.ok_or_else(|| missing("the output-embedding matrix"))?;
            let refset = refset.ok_or_else(|| missing("a reference set"))?;
            let centered = center_rows(&e_out.rows);
            let u_ref = mean_rows(&centered, &refset.ids);
            let cd = cosine_distances(&centered, &u_ref)?;
            Ok(IndicatorVector { name, scores: cd.scores, degenerate_rows: cd.degenerate_rows })
        }
        IndicatorKind::CosinePcRemovedToRef => {
            let e_out = e_out.ok_or_else(|| missing("the output-embedding matrix"))?;
            let refset = refset.ok_or_else(|| missing("a reference set"))?;
            let pc = first_principal_direction(&e_out.rows, PC_MAX_ITER, PC_TOL)?;
            let removed = remove_first_pc(&e_out.rows, &pc.u1);
            let u_ref = mean_rows(&removed, &refset.ids);
            let cd = cosine_distances(&removed, &u_ref)?;
            Ok(IndicatorVector { name, scores: cd.scores, degenerate_rows: cd.degenerate_rows })
        }
    }
}

/// Indicators computable from the matrices at hand. The centered/PC-removed
/// variants are opt-in.
pub fn applicable_indicators(tables: &EmbeddingTables, include_variants: bool) -> Vec<IndicatorKind> {
    let mut kinds = Vec::new();
    if tables.output_matrix().is_some() {
        kinds.push(IndicatorKind::CosineToRef);
        kinds.push(IndicatorKind::EuclideanToRef);
        if include_variants {
            kinds.push(IndicatorKind::CosineCenteredToRef);
            kinds.push(IndicatorKind::CosinePcRemovedToRef);
        }
    }
    if tables.input_matrix().is_some() {
        kinds.push(IndicatorKind::InputNorm);
    }
    kinds
}

/// Ranking indicator to lead with: cosine distance for tied embeddings,
/// input norms otherwise.
pub fn auto_indicator(tables: &EmbeddingTables) -> IndicatorKind {
    if tables.tied {
        IndicatorKind::CosineToRef
    } else if tables.input_matrix().is_some() {
        IndicatorKind::InputNorm
    } else {
        log::warn!("embeddings are untied but no input matrix is available; using CosineToRef");
        IndicatorKind::CosineToRef
    }
}

/// Takes the `ceil(fraction × vocab_size)` lowest-scoring token ids, drops
/// any not flagged OkForTesting, and returns the rest in ascending score
/// order with ties broken by ascending id.
pub fn select_candidates(
    indicator: &IndicatorVector,
    taxonomy: &[TokenCategory],
    fraction: f64,
) -> CandidateSet {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must be in (0, 1], got {fraction}");
    let vocab_size = taxonomy.len();
    assert!(
        indicator.scores.len() >= vocab_size,
        "indicator covers {} rows but the vocabulary has {vocab_size} tokens",
        indicator.scores.len()
    );
    let raw = fraction * vocab_size as f64;
    // Snap near-integer products before taking the ceiling: 0.1 × 50
    // evaluates to 5.000000000000001 in binary floating point and must
    // select a window of 5, not 6.
    let window = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() } as usize;

    let mut order: Vec<u32> = (0..vocab_size as u32).collect();
    order.sort_by(|&a, &b| {
        indicator.scores[a as usize]
            .total_cmp(&indicator.scores[b as usize])
            .then(a.cmp(&b))
    });
    let ids = order
        .into_iter()
        .take(window)
        .filter(|&id| taxonomy[id as usize].ok_for_testing)
        .collect();
    CandidateSet { indicator: indicator.name, fraction, ids }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingKind;
    use crate::taxonomy::TokenFlags;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn out_matrix(rows: Array2<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix { rows, kind: EmbeddingKind::Output }
    }

    #[test]
    fn cosine_hand_values() {
        let a = array![[1.0, 2.0], [3.0, 4.0], [-1.0, 0.0]];
        let cd = cosine_distances(&a, &[1.0, 0.0]).unwrap();
        let expected = [1.0 - 1.0 / 5f64.sqrt(), 1.0 - 3.0 / 5.0, 2.0];
        for (got, want) in cd.scores.iter().zip(expected) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
        assert!(cd.degenerate_rows.is_empty());
    }

    #[test]
    fn cosine_identical_and_orthogonal() {
        let a = array![[2.0, 0.0], [0.0, 7.0]];
        let cd = cosine_distances(&a, &[5.0, 0.0]).unwrap();
        assert!(cd.scores[0].abs() <= 1e-15);
        assert!((cd.scores[1] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn cosine_zero_row_is_degenerate() {
        let a = array![[0.0, 0.0], [1.0, 0.0]];
        let cd = cosine_distances(&a, &[1.0, 0.0]).unwrap();
        assert_eq!(cd.scores[0], 1.0);
        assert_eq!(cd.degenerate_rows, vec![0]);
    }

    #[test]
    fn cosine_zero_reference_is_an_error() {
        let a = array![[1.0, 0.0]];
        let err = cosine_distances(&a, &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, IndicatorError::ZeroReferenceVector), "got {err:?}");
    }

    #[test]
    fn cosine_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Array2::from_shape_fn((20, 6), |_| rng.gen_range(-1.0..1.0));
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = cosine_distances(&a, &x).unwrap();
        let scaled = cosine_distances(&(&a * 37.5), &x).unwrap();
        for (b, s) in base.scores.iter().zip(&scaled.scores) {
            assert!((b - s).abs() <= 1e-12, "{b} vs {s}");
        }
    }

    #[test]
    fn euclidean_hand_values() {
        let a = array![[0.0, 0.0], [3.0, 4.0]];
        assert_eq!(euclidean_distances(&a, &[0.0, 0.0]), vec![0.0, 5.0]);
        let b = array![[1.0, 2.0], [1.0, 3.0]];
        let d = euclidean_distances(&b, &[1.0, 2.0]);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn row_norms_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Array2::from_shape_fn((10, 8), |_| rng.gen_range(-2.0..2.0));
        let norms = row_norms(&a);
        for (i, n) in norms.iter().enumerate() {
            let naive: f64 = (0..8).map(|j| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt();
            assert!((n - naive).abs() <= 1e-12 * naive.max(1.0));
        }
        assert_eq!(row_norms(&array![[0.0, 0.0], [3.0, 4.0]]), vec![0.0, 5.0]);
    }

    #[test]
    fn center_rows_hand_values() {
        let e = array![[1.0, 0.0], [3.0, 0.0]];
        assert_eq!(center_rows(&e), array![[-1.0, 0.0], [1.0, 0.0]]);

        let same = array![[2.0, 5.0], [2.0, 5.0], [2.0, 5.0]];
        assert_eq!(center_rows(&same), Array2::<f64>::zeros((3, 2)));

        let signed = array![[1.0], [-1.0]];
        assert_eq!(center_rows(&signed), signed);
    }

    #[test]
    fn center_rows_column_sums_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e = Array2::from_shape_fn((31, 5), |_| rng.gen_range(-10.0..10.0));
        let c = center_rows(&e);
        for j in 0..5 {
            let s: f64 = (0..31).map(|i| c[[i, j]]).sum();
            assert!(s.abs() <= 1e-9 * 31.0, "column {j} sums to {s}");
        }
    }

    #[test]
    fn centering_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let e = Array2::from_shape_fn((17, 4), |_| rng.gen_range(-1.0..1.0));
        let b = [3.5, -2.0, 0.25, 9.0];
        let mut shifted = e.clone();
        for mut row in shifted.rows_mut() {
            for (v, add) in row.iter_mut().zip(b) {
                *v += add;
            }
        }
        let lhs = center_rows(&shifted);
        let rhs = center_rows(&e);
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn principal_direction_rank_one() {
        // Rows are multiples of (3, 4)/5; the direction must be recovered
        // with a positive largest-magnitude entry.
        let e = array![[3.0, 4.0], [-3.0, -4.0], [6.0, 8.0]];
        let pc = first_principal_direction(&e, PC_MAX_ITER, PC_TOL).unwrap();
        assert!((pc.u1[0] - 0.6).abs() <= 1e-9, "{:?}", pc.u1);
        assert!((pc.u1[1] - 0.8).abs() <= 1e-9, "{:?}", pc.u1);
    }

    #[test]
    fn principal_direction_prefers_high_variance() {
        let e = array![[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let pc = first_principal_direction(&e, PC_MAX_ITER, PC_TOL).unwrap();
        assert!((pc.u1[0].abs() - 1.0).abs() <= 1e-6, "{:?}", pc.u1);
        assert!(pc.u1[0] > 0.0, "sign must make the dominant entry positive");
        // Sample variance along e1: (9+9)/(4-1) = 6.
        assert!((pc.rayleigh - 6.0).abs() <= 1e-6, "rayleigh {}", pc.rayleigh);
        let norm: f64 = pc.u1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn principal_direction_of_constant_rows_is_accepted() {
        // Centered matrix is zero, so the start vector is already an exact
        // eigenvector with eigenvalue zero.
        let e = array![[5.0, 5.0], [5.0, 5.0]];
        let pc = first_principal_direction(&e, PC_MAX_ITER, PC_TOL).unwrap();
        assert_eq!(pc.rayleigh, 0.0);
        let norm: f64 = pc.u1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn remove_first_pc_hand_values() {
        let e = array![[1.0, 1.0]];
        let out = remove_first_pc(&e, &[1.0, 0.0]);
        assert_eq!(out, array![[0.0, 1.0]]);

        let parallel = array![[2.0, 0.0]];
        assert_eq!(remove_first_pc(&parallel, &[1.0, 0.0]), array![[0.0, 0.0]]);

        let orth = array![[0.0, 3.0]];
        assert_eq!(remove_first_pc(&orth, &[1.0, 0.0]), orth);
    }

    #[test]
    fn remove_first_pc_leaves_rows_orthogonal_to_u1() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let e = Array2::from_shape_fn((25, 6), |_| rng.gen_range(-1.0..1.0));
        let pc = first_principal_direction(&e, PC_MAX_ITER, PC_TOL).unwrap();
        let removed = remove_first_pc(&e, &pc.u1);
        for (i, row) in removed.rows().into_iter().enumerate() {
            let proj: f64 = row.iter().zip(&pc.u1).map(|(v, u)| v * u).sum();
            let row_norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(proj.abs() <= 1e-9 * row_norm.max(1.0), "row {i}: projection {proj}");
        }
    }

    fn refset_over(rows: &Array2<f64>, ids: &[u32]) -> ReferenceSet {
        ReferenceSet {
            ids: ids.to_vec(),
            provenance: vec![crate::embeddings::RefProvenance::UserSupplied; ids.len()],
            u_ref: mean_rows(rows, ids),
        }
    }

    #[test]
    fn input_norm_zero_row_is_strictly_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut rows = Array2::from_shape_fn((9, 4), |_| rng.gen_range(0.1..1.0));
        rows.row_mut(4).fill(0.0);
        let e_in = EmbeddingMatrix { rows, kind: EmbeddingKind::Input };
        let v = compute_indicator(IndicatorKind::InputNorm, Some(&e_in), None, None).unwrap();
        assert_eq!(v.scores[4], 0.0);
        for (i, s) in v.scores.iter().enumerate() {
            if i != 4 {
                assert!(*s > 0.0, "row {i} should be strictly above the zero row");
            }
        }
    }

    #[test]
    fn cosine_to_ref_of_the_reference_row_is_zero() {
        let rows = array![[1.0, 2.0, 2.0], [4.0, 0.0, 3.0], [0.5, 0.5, 0.5]];
        let e_out = out_matrix(rows.clone());
        let refset = refset_over(&rows, &[1]);
        let v = compute_indicator(IndicatorKind::CosineToRef, None, Some(&e_out), Some(&refset))
            .unwrap();
        assert_eq!(v.scores[1], 0.0);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let err = compute_indicator(IndicatorKind::InputNorm, None, None, None).unwrap_err();
        assert!(matches!(err, IndicatorError::MissingInput { .. }), "got {err:?}");
        let err = compute_indicator(IndicatorKind::CosineToRef, None, None, None).unwrap_err();
        assert!(matches!(err, IndicatorError::MissingInput { .. }), "got {err:?}");
    }

    #[test]
    fn variant_indicators_match_their_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // Rank-1 structure plus noise, the regime the PC-removed variant
        // is designed for.
        let base: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows = Array2::from_shape_fn((40, 6), |(i, j)| {
            (i as f64 * 0.1) * base[j] + rng.gen_range(-0.05..0.05)
        });
        let e_out = out_matrix(rows.clone());
        let refset = refset_over(&rows, &[3, 7, 11]);

        let centered = center_rows(&rows);
        let u_ref_c = mean_rows(&centered, &refset.ids);
        let expect_c = cosine_distances(&centered, &u_ref_c).unwrap().scores;
        let got_c = compute_indicator(
            IndicatorKind::CosineCenteredToRef,
            None,
            Some(&e_out),
            Some(&refset),
        )
        .unwrap();
        for (g, w) in got_c.scores.iter().zip(&expect_c) {
            assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0));
        }

        let pc = first_principal_direction(&rows, PC_MAX_ITER, PC_TOL).unwrap();
        let removed = remove_first_pc(&rows, &pc.u1);
        let u_ref_r = mean_rows(&removed, &refset.ids);
        let expect_r = cosine_distances(&removed, &u_ref_r).unwrap().scores;
        let got_r = compute_indicator(
            IndicatorKind::CosinePcRemovedToRef,
            None,
            Some(&e_out),
            Some(&refset),
        )
        .unwrap();
        for (g, w) in got_r.scores.iter().zip(&expect_r) {
            assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0));
        }
    }

    #[test]
    fn compute_indicator_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let rows = Array2::from_shape_fn((30, 5), |_| rng.gen_range(-1.0..1.0));
        let e_out = out_matrix(rows.clone());
        let refset = refset_over(&rows, &[0, 9]);
        let a = compute_indicator(IndicatorKind::CosineToRef, None, Some(&e_out), Some(&refset))
            .unwrap();
        let b = compute_indicator(IndicatorKind::CosineToRef, None, Some(&e_out), Some(&refset))
            .unwrap();
        assert_eq!(a.scores, b.scores, "bit-identical reruns");
    }

    fn plain_taxonomy(vocab_size: usize, excluded: &[u32]) -> Vec<TokenCategory> {
        (0..vocab_size as u32)
            .map(|id| {
                let mut flags = TokenFlags {
                    partial_utf8: false,
                    unreachable: false,
                    special: false,
                    byte_token: false,
                };
                if excluded.contains(&id) {
                    flags.partial_utf8 = true;
                }
                TokenCategory {
                    id,
                    surface: format!("t{id}"),
                    ok_for_testing: flags.ok_for_testing(),
                    flags,
                }
            })
            .collect()
    }

    #[test]
    fn select_candidates_window_and_exclusions() {
        // 50,280 tokens at 2% → window 1006; 13 exclusions inside → 993.
        let vocab_size = 50_280;
        let excluded: Vec<u32> = (100..113).collect();
        let taxonomy = plain_taxonomy(vocab_size, &excluded);
        let scores: Vec<f64> = (0..vocab_size).map(|i| i as f64).collect();
        let v = IndicatorVector {
            name: IndicatorKind::CosineToRef,
            scores,
            degenerate_rows: Vec::new(),
        };
        let set = select_candidates(&v, &taxonomy, 0.02);
        assert_eq!(set.ids.len(), 993);
        assert!(!set.ids.contains(&100));
        assert!(set.ids.contains(&99));
        assert!(set.ids.contains(&113));
        // Ascending score = ascending id here.
        assert!(set.ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn select_candidates_full_fraction_sorts_everything() {
        let taxonomy = plain_taxonomy(6, &[]);
        let v = IndicatorVector {
            name: IndicatorKind::EuclideanToRef,
            scores: vec![0.5, 0.1, 0.9, 0.3, 0.2, 0.8],
            degenerate_rows: Vec::new(),
        };
        let set = select_candidates(&v, &taxonomy, 1.0);
        assert_eq!(set.ids, vec![1, 4, 3, 0, 5, 2]);
    }

    #[test]
    fn select_candidates_ties_break_by_id() {
        let taxonomy = plain_taxonomy(10, &[]);
        let v = IndicatorVector {
            name: IndicatorKind::CosineToRef,
            scores: vec![0.7; 10],
            degenerate_rows: Vec::new(),
        };
        let set = select_candidates(&v, &taxonomy, 0.5);
        assert_eq!(set.ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn select_candidates_snaps_near_integer_windows() {
        // 0.1 × 50 must give a window of 5 even though the product is
        // 5.000000000000001 in f64.
        let taxonomy = plain_taxonomy(50, &[]);
        let scores: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let v = IndicatorVector {
            name: IndicatorKind::CosineToRef,
            scores,
            degenerate_rows: Vec::new(),
        };
        let set = select_candidates(&v, &taxonomy, 0.1);
        assert_eq!(set.ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn indicator_kind_round_trips_through_strings() {
        for kind in ALL_INDICATORS {
            assert_eq!(kind.as_str().parse::<IndicatorKind>().unwrap(), kind);
        }
        assert_eq!("cosine-to-ref".parse::<IndicatorKind>().unwrap(), IndicatorKind::CosineToRef);
        assert_eq!("input_norm".parse::<IndicatorKind>().unwrap(), IndicatorKind::InputNorm);
        assert!("bogus".parse::<IndicatorKind>().is_err());
        let json = serde_json::to_string(&IndicatorKind::CosinePcRemovedToRef).unwrap();
        assert_eq!(json, "\"CosinePcRemovedToRef\"");
    }
}
