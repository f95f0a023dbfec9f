//! Post-processing of multi-restart searches: PCA, support-set families,
//! the `x = a x'` scaling sweep, rational suggestions and verification.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cqfinder::{find_cqs, CqError, CqReport};
use crate::optpde::SearchResult;
use crate::{Ensemble, Expr, Rational};

/// Coefficients below this magnitude are dropped before grouping.
pub const DEFAULT_CUTOFF: f64 = 0.1;

/// Largest denominator tried by [`rationalize`].
pub const MAX_DENOMINATOR: i64 = 12;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Cq(#[from] CqError),
    #[error("need at least {needed} solutions, got {got}")]
    TooFewSolutions { needed: usize, got: usize },
    #[error("row {row} has {got} coefficients, expected {expected}")]
    Dimension { row: usize, expected: usize, got: usize },
    #[error("row {row} has norm {norm}, expected 1")]
    NotUnit { row: usize, norm: f64 },
    #[error("basis entry {0:?} is not a single monomial")]
    NotMonomial(String),
    #[error("coefficient vector is zero")]
    ZeroVector,
}

/// Final coefficient vectors of a search, one unit-norm row per restart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionSet {
    pub terms: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub loss: Vec<f64>,
    pub ncq: Vec<usize>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl SolutionSet {
    pub fn new(terms: Vec<String>, rows: Vec<Vec<f64>>, loss: Vec<f64>, ncq: Vec<usize>) -> Result<Self, AnalysisError> {
        for (row, r) in rows.iter().enumerate() {
            if r.len() != terms.len() {
                return Err(AnalysisError::Dimension { row, expected: terms.len(), got: r.len() });
            }
            let n = norm(r);
            if (n - 1.0).abs() > 1e-10 {
                return Err(AnalysisError::NotUnit { row, norm: n });
            }
        }
        if loss.len() != rows.len() || ncq.len() != rows.len() {
            return Err(AnalysisError::Dimension { row: rows.len(), expected: rows.len(), got: loss.len().min(ncq.len()) });
        }
        Ok(Self { terms, rows, loss, ncq })
    }

    /// Converged restarts of a search; rows are renormalized.
    pub fn from_search(search: &SearchResult) -> Result<Self, AnalysisError> {
        let mut rows = Vec::new();
        let mut loss = Vec::new();
        let mut ncq = Vec::new();
        for r in search.restarts.iter().filter(|r| r.converged()) {
            let n = norm(&r.final_coeffs);
            if n == 0.0 {
                continue;
            }
            rows.push(r.final_coeffs.iter().map(|c| c / n).collect());
            loss.push(r.losses.last().copied().unwrap_or(f64::NAN));
            ncq.push(r.final_ncq);
        }
        Self::new(search.pde_basis.clone(), rows, loss, ncq)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Principal directions, one per row, orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Fraction of total variance per component, descending.
    pub explained: Vec<f64>,
    /// `projections[i][k]`: coordinate of row `i` along component `k`.
    pub projections: Vec<Vec<f64>>,
    /// All rows identical: components are arbitrary and `explained` is zero.
    pub degenerate: bool,
}

impl Pca {
    /// Centered rows rebuilt from the kept components.
    pub fn reconstruct(&self) -> Vec<Vec<f64>> {
        self.projections
            .iter()
            .map(|p| {
                let mut r = vec![0.0; self.mean.len()];
                for (c, w) in self.components.iter().zip(p) {
                    for (ri, ci) in r.iter_mut().zip(c) {
                        *ri += w * ci;
                    }
                }
                r
            })
            .collect()
    }

    pub fn total_explained(&self) -> f64 {
        self.explained.iter().sum()
    }
}

/// Mean-centered PCA keeping `k` components.
pub fn pca_project(rows: &[Vec<f64>], k: usize) -> Result<Pca, AnalysisError> {
    if rows.len() < k + 1 {
        return Err(AnalysisError::TooFewSolutions { needed: k + 1, got: rows.len() });
    }
    let dim = rows[0].len();
    for (row, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(AnalysisError::Dimension { row, expected: dim, got: r.len() });
        }
    }
    let n = rows.len();
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.expect("v requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let k = k.min(order.len());
    let degenerate = total == 0.0;
    let mut components = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for &i in &order[..k] {
        let mut c: Vec<f64> = vt.row(i).iter().copied().collect();
        // deterministic orientation: largest entry positive
        let big = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if big < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        explained.push(if degenerate { 0.0 } else { svd.singular_values[i].powi(2) / total });
    }
    let projections = (0..n)
        .map(|i| components.iter().map(|c| c.iter().zip(x.row(i).iter()).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(Pca { mean, components, explained, projections, degenerate })
}

/// Rows sharing one support set after thresholding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportFamily {
    /// Indices of coefficients with `|c| ≥ cutoff`, ascending.
    pub support: Vec<usize>,
    /// Member row indices, ascending.
    pub members: Vec<usize>,
    /// Unit-norm mean of the sign-aligned, thresholded members.
    pub mean: Vec<f64>,
}

/// Zeroes `|c| < cutoff` and flips the sign so the first kept entry is
/// positive.
pub fn threshold_row(row: &[f64], cutoff: f64) -> Vec<f64> {
    let mut r: Vec<f64> = row.iter().map(|&c| if c.abs() < cutoff { 0.0 } else { c }).collect();
    if r.iter().find(|c| **c != 0.0).is_some_and(|c| *c < 0.0) {
        r.iter_mut().for_each(|c| *c = -*c);
    }
    r
}

/// Groups rows by support set after thresholding, most frequent first (ties
/// broken by the support itself). An all-below-cutoff row forms the family
/// with empty support.
pub fn threshold_families(rows: &[Vec<f64>], cutoff: f64) -> Vec<SupportFamily> {
    let mut groups: BTreeMap<Vec<usize>, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let t = threshold_row(row, cutoff);
        let support: Vec<usize> = t.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(j, _)| j).collect();
        let entry = groups.entry(support).or_insert_with(|| (Vec::new(), vec![0.0; row.len()]));
        entry.0.push(i);
        for (s, c) in entry.1.iter_mut().zip(&t) {
            *s += c;
        }
    }
    let mut out: Vec<SupportFamily> = groups
        .into_iter()
        .map(|(support, (members, sum))| {
            let n = norm(&sum);
            let mean = if n > 0.0 { sum.iter().map(|c| c / n).collect() } else { sum };
            SupportFamily { support, members, mean }
        })
        .collect();
    out.sort_by(|a, b| b.members.len().cmp(&a.members.len()).then_with(|| a.support.cmp(&b.support)));
    out
}

/// Total derivative count of each basis monomial (`u_x² u_xxx` → 5).
pub fn derivative_counts(basis: &[Expr]) -> Result<Vec<u32>, AnalysisError> {
    basis
        .iter()
        .map(|e| match e.terms() {
            [m] => Ok(m.powers.derivative_count()),
            _ => Err(AnalysisError::NotMonomial(e.to_string())),
        })
        .collect()
}

/// `c_j a^{d_j}` without renormalization.
pub fn scale_coefficients(coeffs: &[f64], counts: &[u32], a: f64) -> Vec<f64> {
    coeffs.iter().zip(counts).map(|(c, &d)| c * a.powi(d as i32)).collect()
}

/// Direction of the family member `x = a x'` for each `a`. At `a = 0` this
/// is the `a → 0⁺` limit: the lowest-count terms of the family.
pub fn scaling_sweep(coeffs: &[f64], basis: &[Expr], a_values: &[f64]) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let counts = derivative_counts(basis)?;
    if coeffs.len() != counts.len() {
        return Err(AnalysisError::Dimension { row: 0, expected: counts.len(), got: coeffs.len() });
    }
    a_values
        .iter()
        .map(|&a| {
            let v = if a == 0.0 {
                let lowest = coeffs.iter().zip(&counts).filter(|(c, _)| **c != 0.0).map(|(_, d)| *d).min().ok_or(AnalysisError::ZeroVector)?;
                coeffs.iter().zip(&counts).map(|(c, d)| if *d == lowest { *c } else { 0.0 }).collect()
            } else {
                scale_coefficients(coeffs, &counts, a)
            };
            let n = norm(&v);
            if n == 0.0 || !n.is_finite() {
                return Err(AnalysisError::ZeroVector);
            }
            Ok(v.iter().map(|c| c / n).collect())
        })
        .collect()
}

/// Nearest fraction with denominator at most `max_den` (smallest
/// denominator on ties).
pub fn nearest_fraction(v: f64, max_den: i64) -> Rational {
    let mut best = Rational::new(v.round() as i64, 1);
    let mut err = (v - v.round()).abs();
    for q in 2..=max_den {
        let p = (v * q as f64).round() as i64;
        let e = (v - p as f64 / q as f64).abs();
        if e < err - 1e-15 {
            best = Rational::new(p, q);
            err = e;
        }
    }
    best
}

/// A small-denominator rational vector close to a float direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationalCandidate {
    #[serde(with = "rational_vec")]
    pub coeffs: Vec<Rational>,
    /// Index of the coefficient fixed to 1.
    pub pivot: usize,
    /// Sine of the angle between the candidate and the input direction.
    pub residual: f64,
}

impl RationalCandidate {
    pub fn to_f64(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// `Σ c_j basis_j`.
    pub fn expression(&self, basis: &[Expr]) -> Expr {
        combine(&self.coeffs, basis)
    }
}

fn combine(coeffs: &[Rational], basis: &[Expr]) -> Expr {
    coeffs.iter().zip(basis).filter(|(c, _)| !c.is_zero()).fold(Expr::zero(), |acc, (c, b)| &acc + &b.scale(c))
}

fn sine_between(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).abs().min(1.0);
    (1.0 - cos * cos).max(0.0).sqrt()
}

/// Suggestions for the human "eye test": for every coefficient at least
/// `cutoff` in magnitude, scale it to 1 and round the rest to fractions with
/// denominator ≤ `max_den` (dropping those that round to 0). Candidates are
/// distinct and sorted by residual.
pub fn rationalize(coeffs: &[f64], cutoff: f64, max_den: i64) -> Vec<RationalCandidate> {
    let mut out: Vec<RationalCandidate> = Vec::new();
    for (pivot, &p) in coeffs.iter().enumerate() {
        if p.abs() < cutoff || p == 0.0 {
            continue;
        }
        let q: Vec<Rational> = coeffs.iter().map(|c| nearest_fraction(c / p, max_den)).collect();
        let qf: Vec<f64> = q.iter().map(|c| c.to_f64().unwrap()).collect();
        let residual = sine_between(&qf, coeffs);
        // same direction up to scale as an earlier candidate
        if out.iter().any(|o| sine_between(&o.to_f64(), &qf) < 1e-12) {
            continue;
        }
        out.push(RationalCandidate { coeffs: q, pivot, residual });
    }
    out.sort_by(|a, b| a.residual.total_cmp(&b.residual).then(a.pivot.cmp(&b.pivot)));
    out
}

/// Runs the CQ finder on `Σ c_j pde_basis_j`.
pub fn verify_family(coeffs: &[Rational], pde_basis: &[Expr], cq_basis: &[Expr], ens: &Ensemble, epsilon: f64) -> Result<CqReport, AnalysisError> {
    if coeffs.len() != pde_basis.len() {
        return Err(AnalysisError::Dimension { row: 0, expected: pde_basis.len(), got: coeffs.len() });
    }
    let pde = combine(coeffs, pde_basis);
    if pde.is_zero() {
        return Err(AnalysisError::ZeroVector);
    }
    Ok(find_cqs(&[pde], cq_basis, ens, epsilon)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub support: Vec<String>,
    pub members: usize,
    /// Float direction of the family (thresholded mean).
    pub mean: Vec<f64>,
    /// Best rational suggestion, if any coefficient survived the cutoff.
    pub representative: Option<RationalCandidate>,
    pub pde: Option<String>,
    pub report: Option<CqReport>,
    /// The representative has at least one non-trivial CQ.
    pub verified: bool,
    /// `(a, direction)` pairs of the scaling sweep.
    pub sweep: Vec<(f64, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyCatalog {
    pub terms: Vec<String>,
    pub cutoff: f64,
    pub pca: Option<Pca>,
    pub families: Vec<CatalogEntry>,
}

impl FamilyCatalog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub cutoff: f64,
    /// Families verified, in frequency order; the empty support is skipped.
    pub max_families: usize,
    pub epsilon: f64,
    pub a_values: Vec<f64>,
    pub pca_components: usize,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            cutoff: DEFAULT_CUTOFF,
            max_families: 10,
            epsilon: crate::cqfinder::DEFAULT_EPSILON,
            a_values: vec![-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0],
            pca_components: 3,
        }
    }
}

/// Threshold, group, rationalize and verify. Families are verified in
/// parallel; their order in the catalog is the frequency order.
pub fn build_catalog(set: &SolutionSet, pde_basis: &[Expr], cq_basis: &[Expr], ens: &Ensemble, cfg: &CatalogConfig) -> Result<FamilyCatalog, AnalysisError> {
    let pca = if set.len() > cfg.pca_components { Some(pca_project(&set.rows, cfg.pca_components)?) } else { None };
    let families: Vec<SupportFamily> =
        threshold_families(&set.rows, cfg.cutoff).into_iter().filter(|f| !f.support.is_empty()).take(cfg.max_families).collect();
    let entries = families
        .par_iter()
        .map(|f| -> Result<CatalogEntry, AnalysisError> {
            let representative = rationalize(&f.mean, cfg.cutoff, MAX_DENOMINATOR).into_iter().next();
            let (pde, report) = match &representative {
                Some(r) => {
                    let rep = verify_family(&r.coeffs, pde_basis, cq_basis, ens, cfg.epsilon)?;
                    (Some(r.expression(pde_basis).to_string()), Some(rep))
                }
                None => (None, None),
            };
            let verified = report.as_ref().is_some_and(|r| r.n_nontrivial > 0);
            let sweep = match &representative {
                Some(r) => {
                    let dirs = scaling_sweep(&r.to_f64(), pde_basis, &cfg.a_values)?;
                    cfg.a_values.iter().copied().zip(dirs).collect()
                }
                None => Vec::new(),
            };
            Ok(CatalogEntry {
                support: f.support.iter().map(|&j| set.terms[j].clone()).collect(),
                members: f.members.len(),
                mean: f.mean.clone(),
                representative,
                pde,
                report,
                verified,
                sweep,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FamilyCatalog { terms: set.terms.clone(), cutoff: cfg.cutoff, pca, families: entries })
}

mod rational_vec {
    use super::Rational;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Rational], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|r| r.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Rational>, D::Error> {
        let strs = Vec::<String>::deserialize(d)?;
        strs.iter().map(|s| s.parse::<Rational>().map_err(serde::de::Error::custom)).collect()
    }
}
