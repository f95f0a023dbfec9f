//! Conserved-quantity finder.
//!
//! For `u_t = f(u')` and a density `h = Σ θ_i b_i`, conservation of `∫h dx`
//! under free boundary conditions requires
//! `Σ_i θ_i ∫ Σ_n ∂b_i/∂u_{nx} · ∂ⁿf/∂xⁿ dx = 0`. Evaluating the integral as
//! a plain grid sum on each test curve gives the linear system `G θ = 0`
//! with `G ∈ R^{P×K}`; its numerical null space holds the conserved
//! densities. Densities that are total derivatives are conserved by every
//! equation and are split off as trivial.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::CompensatedSum;
use crate::symbolic::{Powers, SymbolicError, Var};
use crate::{Ensemble, Expr};

/// Default threshold on normalized singular values.
pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CqError {
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
    #[error("ensemble jets stop at order {available} but order {needed} is required")]
    InsufficientOrder { needed: usize, available: usize },
    #[error("system has {equations} equation(s) but uses {fields} field(s)")]
    FieldMismatch { equations: usize, fields: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("empty basis")]
    EmptyBasis,
}

/// Jet order the ensemble must provide for a system and CQ basis.
pub fn required_order(system: &[Expr], basis: &[Expr]) -> usize {
    let pde = system.iter().map(Expr::max_order).max().unwrap_or(0);
    let cq = basis.iter().map(Expr::max_order).max().unwrap_or(0);
    pde + cq
}

fn check_inputs(system: &[Expr], basis: &[Expr], ens: &Ensemble) -> Result<(), CqError> {
    if basis.is_empty() {
        return Err(CqError::EmptyBasis);
    }
    let needed = required_order(system, basis);
    if needed > ens.max_order() {
        return Err(CqError::InsufficientOrder { needed, available: ens.max_order() });
    }
    let fields = system
        .iter()
        .chain(basis)
        .filter(|e| !e.is_zero())
        .map(Expr::num_fields)
        .max()
        .unwrap_or(1)
        .max(system.len());
    if fields != system.len() || fields > ens.layout().fields {
        return Err(CqError::FieldMismatch { equations: system.len(), fields: fields.max(ens.layout().fields) });
    }
    Ok(())
}

/// `g = Σ_fields Σ_n ∂b/∂u^field_{nx} · ∂ⁿ f_field/∂xⁿ`, the integrand of
/// `dH/dt` for density `b`.
pub fn conservation_integrand(system: &[Expr], b: &Expr) -> Expr {
    let mut g = Expr::zero();
    for (field, f) in system.iter().enumerate() {
        let mut fx = f.clone();
        for n in 0..=b.max_order() {
            let db = b.partial(Var::new(field as u8, n as u8));
            if !db.is_zero() {
                g = &g + &(&db * &fx);
            }
            fx = fx.total_x_derivative();
        }
    }
    g
}

/// Grid sums `Σ_j m(u'_p(x_j))` for a set of monomials and every curve.
/// Any polynomial's integral is then a fixed linear combination of these,
/// which makes integrals exactly linear in coefficients.
pub struct MomentTable {
    index: HashMap<Powers, usize>,
    // curve-major: moments[p * len + m]
    moments: Vec<f64>,
    curves: usize,
}

impl MomentTable {
    pub fn build<'a>(exprs: impl IntoIterator<Item = &'a Expr>, ens: &Ensemble) -> Result<Self, CqError> {
        let mut index: HashMap<Powers, usize> = HashMap::new();
        let mut monomials: Vec<Powers> = Vec::new();
        for e in exprs {
            for m in e.terms() {
                if !index.contains_key(&m.powers) {
                    index.insert(m.powers.clone(), monomials.len());
                    monomials.push(m.powers.clone());
                }
            }
        }
        let layout = ens.layout();
        let mut factors: Vec<Vec<(usize, i32)>> = Vec::with_capacity(monomials.len());
        for p in &monomials {
            let mut f = Vec::new();
            for &(v, e) in p.iter() {
                f.push((layout.index(v)?, e as i32));
            }
            factors.push(f);
        }
        let len = monomials.len();
        let npts = ens.num_points();
        let moments: Vec<f64> = (0..ens.num_curves())
            .into_par_iter()
            .flat_map_iter(|p| {
                let mut sums = vec![CompensatedSum::new(); len];
                for j in 0..npts {
                    let jet = ens.jet(p, j);
                    for (s, f) in sums.iter_mut().zip(&factors) {
                        let mut prod = 1.0;
                        for &(i, e) in f {
                            prod *= jet[i].powi(e);
                        }
                        s.add(prod);
                    }
                }
                sums.into_iter().map(|s| s.value())
            })
            .collect();
        Ok(Self { index, moments, curves: ens.num_curves() })
    }

    pub fn num_monomials(&self) -> usize {
        self.index.len()
    }

    /// Per-curve grid sum of `e`. Every monomial of `e` must be in the table.
    pub fn integrate(&self, e: &Expr) -> DVector<f64> {
        let len = self.index.len();
        let terms: Vec<(f64, usize)> = e
            .terms()
            .iter()
            .map(|m| (*m.coeff.numer() as f64 / *m.coeff.denom() as f64, self.index[&m.powers]))
            .collect();
        DVector::from_fn(self.curves, |p, _| {
            let row = &self.moments[p * len..(p + 1) * len];
            let mut s = CompensatedSum::new();
            for &(c, k) in &terms {
                s.add(c * row[k]);
            }
            s.value()
        })
    }

    /// Matrix whose column `k` is `integrate(exprs[k])`.
    pub fn integrate_all(&self, exprs: &[Expr]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.curves, exprs.len());
        for (k, e) in exprs.iter().enumerate() {
            out.set_column(k, &self.integrate(e));
        }
        out
    }
}

/// `P × K` conservation matrix; `(G θ)_p` is the grid-summed `dH/dt` on
/// curve `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConservationMatrix {
    pub matrix: DMatrix<f64>,
}

impl ConservationMatrix {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Spectral norm.
    pub fn norm2(&self) -> f64 {
        spectral_norm(&self.matrix)
    }

    /// `‖Gθ‖₂ / ‖G‖₂` (0 for a zero matrix).
    pub fn relative_residual(&self, theta: &[f64]) -> f64 {
        let n = self.norm2();
        if n == 0.0 {
            return 0.0;
        }
        (&self.matrix * DVector::from_column_slice(theta)).norm() / n
    }

    /// Comma-separated dump, one row per curve.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in 0..self.nrows() {
            let row: Vec<String> = (0..self.ncols()).map(|c| format!("{:e}", self.matrix[(r, c)])).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Assembles `G` for a single equation or a system (one equation per field).
pub fn assemble_g(system: &[Expr], basis: &[Expr], ens: &Ensemble) -> Result<ConservationMatrix, CqError> {
    check_inputs(system, basis, ens)?;
    let integrands: Vec<Expr> = basis.iter().map(|b| conservation_integrand(system, b)).collect();
    let table = MomentTable::build(&integrands, ens)?;
    Ok(ConservationMatrix { matrix: table.integrate_all(&integrands) })
}

/// `∂G/∂c_j` for `u_t = Σ_j c_j f_j`: one matrix per PDE basis term. `G` is
/// linear in `c`, so `G(c) = Σ_j c_j G_j` exactly.
pub fn assemble_linear_family(pde_basis: &[Expr], basis: &[Expr], ens: &Ensemble) -> Result<Vec<ConservationMatrix>, CqError> {
    let mut all = Vec::with_capacity(pde_basis.len());
    for f in pde_basis {
        check_inputs(std::slice::from_ref(f), basis, ens)?;
        all.push(basis.iter().map(|b| conservation_integrand(std::slice::from_ref(f), b)).collect::<Vec<_>>());
    }
    let table = MomentTable::build(all.iter().flatten(), ens)?;
    Ok(all.iter().map(|ints| ConservationMatrix { matrix: table.integrate_all(ints) }).collect())
}

/// `B(p, i) = Σ_grid b_i(u'_p)`: plain integrals of the basis densities.
pub fn basis_integrals(basis: &[Expr], ens: &Ensemble) -> Result<DMatrix<f64>, CqError> {
    let table = MomentTable::build(basis, ens)?;
    Ok(table.integrate_all(basis))
}

/// SVD of `G` with singular values ascending.
#[derive(Clone, Debug)]
pub struct SpectrumResult {
    pub singular_values: Vec<f64>,
    /// `σ / sqrt(Σσ²)`, so `Σσ̃² = 1`.
    pub normalized: Vec<f64>,
    /// `K × M`, orthonormal columns: right singular vectors of the `M`
    /// smallest singular values.
    pub solutions: DMatrix<f64>,
    pub count: usize,
    /// Number of retained values inside the band `[ε/10, ε)`.
    pub uncertain: usize,
    pub epsilon: f64,
}

impl SpectrumResult {
    /// `σ̃_{M+1} / σ̃_M`: separation between the largest discarded and the
    /// smallest retained normalized singular value.
    pub fn gap_ratio(&self) -> Option<f64> {
        let m = self.count;
        if m == 0 || m >= self.normalized.len() {
            return None;
        }
        Some(self.normalized[m] / self.normalized[m - 1].max(f64::MIN_POSITIVE))
    }
}

/// Full SVD with ascending singular values; `v` is `K × K`, `u` is `P × min`.
pub(crate) struct AscendingSvd {
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub(crate) fn ascending_svd(g: &DMatrix<f64>) -> AscendingSvd {
    let (p, k) = g.shape();
    // thin SVD only yields min(P, K) right vectors; pad rows to get all K
    let padded;
    let m = if p < k {
        padded = {
            let mut z = DMatrix::zeros(k, k);
            z.view_mut((0, 0), (p, k)).copy_from(g);
            z
        };
        &padded
    } else {
        g
    };
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("v requested");
    let n = svd.singular_values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]).then(a.cmp(&b)));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let v = DMatrix::from_fn(k, n, |r, c| vt[(order[c], r)]);
    AscendingSvd { sigma, v }
}

fn normalize_spectrum(sigma: &[f64]) -> Vec<f64> {
    let norm = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
    if norm == 0.0 {
        vec![0.0; sigma.len()]
    } else {
        sigma.iter().map(|s| s / norm).collect()
    }
}

/// Numerical null space of `G`: columns of `V` whose normalized singular
/// value is below `ε`.
pub fn null_space(g: &ConservationMatrix, epsilon: f64) -> Result<SpectrumResult, CqError> {
    if g.matrix.iter().any(|v| !v.is_finite()) {
        return Err(CqError::NonFinite);
    }
    let svd = ascending_svd(&g.matrix);
    let normalized = normalize_spectrum(&svd.sigma);
    // an all-zero G conserves everything
    let count = if svd.sigma.iter().all(|&s| s == 0.0) {
        normalized.len()
    } else {
        normalized.iter().filter(|&&s| s < epsilon).count()
    };
    let uncertain = normalized[..count].iter().filter(|&&s| s >= epsilon / 10.0).count();
    let solutions = svd.v.columns(0, count).into_owned();
    Ok(SpectrumResult { singular_values: svd.sigma, normalized, solutions, count, uncertain, epsilon })
}

/// Result of L1 sparsification: `theta = original · rotation`.
#[derive(Clone, Debug)]
pub struct Sparsified {
    pub theta: DMatrix<f64>,
    pub rotation: DMatrix<f64>,
    pub l1_before: f64,
    pub l1_after: f64,
    pub converged: bool,
}

const SPARSIFY_STARTS: usize = 8;
const SPARSIFY_MAX_SWEEPS: usize = 200;
const SPARSIFY_SEED: u64 = 0x5ba5_e11e;

fn l1(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

// L1 of the column pair after rotating by `angle`
fn pair_cost(a: &[f64], b: &[f64], angle: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    a.iter().zip(b).map(|(&x, &y)| (x * c + y * s).abs() + (y * c - x * s).abs()).sum()
}

/// Best rotation angle for a column pair. Between zeros of the individual
/// terms the cost is a single sinusoid that stays non-negative, so it has no
/// interior minimum; the optimum sits at one of the zero crossings. The cost
/// has period π/2.
fn best_pair_angle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let quarter = std::f64::consts::FRAC_PI_2;
    let base = pair_cost(a, b, 0.0);
    let mut best = (0.0, base);
    for (&x, &y) in a.iter().zip(b) {
        if x == 0.0 && y == 0.0 {
            continue;
        }
        let t = (-x).atan2(y).rem_euclid(quarter);
        let cost = pair_cost(a, b, t);
        if cost < best.1 {
            best = (t, cost);
        }
    }
    best
}

fn rotate_pair(m: &mut DMatrix<f64>, i: usize, j: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    for r in 0..m.nrows() {
        let (x, y) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = x * c + y * s;
        m[(r, j)] = y * c - x * s;
    }
}

fn jacobi_l1(mut m: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let k = m.ncols();
    for _ in 0..SPARSIFY_MAX_SWEEPS {
        let before = l1(&m);
        for i in 0..k {
            for j in i + 1..k {
                let a: Vec<f64> = m.column(i).iter().copied().collect();
                let b: Vec<f64> = m.column(j).iter().copied().collect();
                let (angle, cost) = best_pair_angle(&a, &b);
                if angle != 0.0 && cost < pair_cost(&a, &b, 0.0) * (1.0 - 1e-13) {
                    rotate_pair(&mut m, i, j, angle);
                }
            }
        }
        if before - l1(&m) <= 1e-12 * before.max(1e-300) {
            return (m, true);
        }
    }
    (m, false)
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    a.qr().q()
}

/// Rotates an orthonormal solution basis to minimize `‖Θ R‖₁` over
/// orthogonal `R`. Coordinate descent over Givens rotations with an exact
/// minimizer per pair, restarted from several deterministic random rotations.
pub fn sparsify(theta: &DMatrix<f64>) -> Sparsified {
    let m = theta.ncols();
    let l1_before = l1(theta);
    if m <= 1 {
        let mut t = theta.clone();
        normalize_signs(&mut t);
        let rotation = theta.transpose() * &t;
        return Sparsified { l1_after: l1(&t), theta: t, rotation, l1_before, converged: true };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SPARSIFY_SEED);
    let mut best: Option<(DMatrix<f64>, bool)> = None;
    for start in 0..SPARSIFY_STARTS {
        let init = if start == 0 { theta.clone() } else { theta * random_orthogonal(m, &mut rng) };
        let (cand, converged) = jacobi_l1(init);
        if best.as_ref().is_none_or(|(b, _)| l1(&cand) < l1(b) - 1e-12) {
            best = Some((cand, converged));
        }
    }
    let (mut t, converged) = best.unwrap();
    if !converged {
        log::warn!("sparsify: coordinate descent hit the sweep limit; returning best iterate");
    }
    normalize_signs(&mut t);
    order_columns(&mut t);
    let rotation = theta.transpose() * &t;
    Sparsified { l1_after: l1(&t), theta: t, rotation, l1_before, converged }
}

/// Flips each column so its largest-magnitude entry is positive.
pub fn normalize_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }
}

fn order_columns(m: &mut DMatrix<f64>) {
    let mut keys: Vec<(usize, usize)> = m.column_iter().enumerate().map(|(c, col)| (col.iamax(), c)).collect();
    keys.sort();
    let cols: Vec<DVector<f64>> = keys.iter().map(|&(_, c)| m.column(c).into_owned()).collect();
    for (c, col) in cols.into_iter().enumerate() {
        m.set_column(c, &col);
    }
}

/// Split of a solution basis into trivial (total-derivative) and
/// non-trivial parts.
#[derive(Clone, Debug)]
pub struct TrivialAnalysis {
    /// Per column of the analysed basis: lies in the trivial subspace.
    pub flags: Vec<bool>,
    /// `M_T`, dimension of the trivial subspace.
    pub count: usize,
    /// `K × M_T` orthonormal basis of trivial densities.
    pub trivial: DMatrix<f64>,
    /// `K × (M − M_T)` orthonormal complement inside the solution span.
    pub complement: DMatrix<f64>,
    /// Singular values of `T`, ascending.
    pub singular_values: Vec<f64>,
}

/// Builds `T = B Θ` (plain integrals of each solution density on each
/// curve); its null space, thresholded at `ε`, is the trivial subspace.
/// `T`'s singular values are normalized by their own root-sum-square, and
/// `T` counts as identically zero when `‖T‖_F < ε‖B‖_F`.
pub fn detect_trivial(theta: &DMatrix<f64>, basis_integrals: &DMatrix<f64>, epsilon: f64) -> TrivialAnalysis {
    let (k, m) = theta.shape();
    if m == 0 {
        return TrivialAnalysis {
            flags: vec![],
            count: 0,
            trivial: DMatrix::zeros(k, 0),
            complement: DMatrix::zeros(k, 0),
            singular_values: vec![],
        };
    }
    let t = basis_integrals * theta;
    let b_norm = basis_integrals.norm();
    let svd = ascending_svd(&t);
    let t_norm = t.norm();
    let count = if t_norm < epsilon * b_norm || t_norm == 0.0 {
        m
    } else {
        normalize_spectrum(&svd.sigma).iter().filter(|&&s| s < epsilon).count()
    };
    let trivial = theta * svd.v.columns(0, count);
    let complement = theta * svd.v.columns(count, m - count);
    let col_scale = if t_norm == 0.0 { 1.0 } else { t_norm };
    let flags = (0..m).map(|c| count == m || t.column(c).norm() < epsilon * col_scale).collect();
    TrivialAnalysis { flags, count, trivial, complement, singular_values: svd.sigma }
}

/// Column preference for eliminating trivial parts: highest derivative
/// order first, then most derivatives, then highest degree. Eliminating the
/// most differentiated terms mirrors integrating by parts toward lower
/// order, e.g. `u u_xx ≡ -u_x²`.
pub fn elimination_priority(basis: &[Expr]) -> Vec<usize> {
    let key = |e: &Expr| {
        let order = e.max_order();
        let (dc, deg) = e
            .terms()
            .iter()
            .map(|m| (m.powers.derivative_count(), m.powers.degree()))
            .max()
            .unwrap_or((0, 0));
        (order, dc, deg)
    };
    let mut idx: Vec<usize> = (0..basis.len()).collect();
    idx.sort_by(|&a, &b| key(&basis[b]).cmp(&key(&basis[a])).then(a.cmp(&b)));
    idx
}

/// Reduces vectors modulo the span of `trivial`: picks one pivot
/// coordinate per trivial direction (in `priority` order) and subtracts
/// the trivial combination that zeroes those coordinates. The result is a
/// canonical representative of each vector's class.
#[derive(Clone, Debug)]
pub struct TrivialReducer {
    pivots: Vec<usize>,
    // K × M_T, reduced so that rows at `pivots` form the identity
    echelon: DMatrix<f64>,
}

impl TrivialReducer {
    pub fn new(trivial: &DMatrix<f64>, priority: &[usize]) -> Self {
        let (k, mt) = trivial.shape();
        let mut w = trivial.clone();
        let mut pivots = Vec::with_capacity(mt);
        let mut used = vec![false; mt];
        for &row in priority {
            if pivots.len() == mt {
                break;
            }
            // pick the unused column with the largest entry in this row
            let cand = (0..mt).filter(|&c| !used[c]).max_by(|&a, &b| w[(row, a)].abs().total_cmp(&w[(row, b)].abs()));
            let Some(c) = cand else { break };
            let pivot = w[(row, c)];
            if pivot.abs() < 1e-6 {
                continue;
            }
            let scaled = w.column(c) / pivot;
            w.set_column(c, &scaled);
            for other in 0..mt {
                if other != c {
                    let f = w[(row, other)];
                    if f != 0.0 {
                        let upd = w.column(other) - &scaled * f;
                        w.set_column(other, &upd);
                    }
                }
            }
            used[c] = true;
            pivots.push((row, c));
        }
        let mut echelon = DMatrix::zeros(k, pivots.len());
        for (i, &(_, c)) in pivots.iter().enumerate() {
            echelon.set_column(i, &w.column(c));
        }
        Self { pivots: pivots.into_iter().map(|(r, _)| r).collect(), echelon }
    }

    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    pub fn reduce(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for (i, &row) in self.pivots.iter().enumerate() {
            let f = out[row];
            if f != 0.0 {
                out -= self.echelon.column(i) * f;
            }
        }
        for &row in &self.pivots {
            out[row] = 0.0;
        }
        out
    }
}

/// One reported conserved density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqSolution {
    pub coeffs: Vec<f64>,
    pub expression: String,
    pub trivial: bool,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqReport {
    pub pde: Vec<String>,
    pub basis: Vec<String>,
    pub epsilon: f64,
    pub singular_values: Vec<f64>,
    pub normalized_singular_values: Vec<f64>,
    pub solutions: Vec<CqSolution>,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "M_T")]
    pub m_t: usize,
    pub n_nontrivial: usize,
    pub uncertain: usize,
    pub gap_ratio: Option<f64>,
}

impl CqReport {
    pub fn nontrivial(&self) -> impl Iterator<Item = &CqSolution> {
        self.solutions.iter().filter(|s| !s.trivial)
    }

    pub fn trivial(&self) -> impl Iterator<Item = &CqSolution> {
        self.solutions.iter().filter(|s| s.trivial)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `|v| < 0.05` prints as 0, everything else to two decimals.
pub fn format_combination(coeffs: &[f64], basis: &[String]) -> String {
    let mut out = String::new();
    for (c, name) in coeffs.iter().zip(basis) {
        let r = (c * 100.0).round() / 100.0;
        if c.abs() < 0.05 || r == 0.0 {
            continue;
        }
        if out.is_empty() {
            if r < 0.0 {
                out.push('-');
            }
        } else {
            out.push_str(if r < 0.0 { " - " } else { " + " });
        }
        let _ = write!(out, "{:.2}*{}", r.abs(), name);
    }
    if out.is_empty() {
        out.push('0');
    }
    out
}

/// Reusable finder for one CQ basis on one ensemble.
pub struct CqFinder<'a> {
    pub basis: Vec<Expr>,
    pub ensemble: &'a Ensemble,
    pub epsilon: f64,
    basis_integrals: DMatrix<f64>,
    priority: Vec<usize>,
}

impl<'a> CqFinder<'a> {
    pub fn new(basis: Vec<Expr>, ensemble: &'a Ensemble, epsilon: f64) -> Result<Self, CqError> {
        if basis.is_empty() {
            return Err(CqError::EmptyBasis);
        }
        let basis_integrals = basis_integrals(&basis, ensemble)?;
        let priority = elimination_priority(&basis);
        Ok(Self { basis, ensemble, epsilon, basis_integrals, priority })
    }

    pub fn basis_integrals(&self) -> &DMatrix<f64> {
        &self.basis_integrals
    }

    /// Full pipeline: assemble, null space, sparsify, split trivial parts,
    /// and reduce non-trivial densities modulo total derivatives.
    pub fn find(&self, system: &[Expr]) -> Result<CqReport, CqError> {
        let g = assemble_g(system, &self.basis, self.ensemble)?;
        self.report_for(system, &g)
    }

    pub fn report_for(&self, system: &[Expr], g: &ConservationMatrix) -> Result<CqReport, CqError> {
        let spectrum = null_space(g, self.epsilon)?;
        let sparse = sparsify(&spectrum.solutions);
        let split = detect_trivial(&sparse.theta, &self.basis_integrals, self.epsilon);
        let k = self.basis.len();

        let trivial = if split.count > 0 { sparsify(&split.trivial).theta } else { DMatrix::zeros(k, 0) };

        let reducer = TrivialReducer::new(&split.trivial, &self.priority);
        let reduced_cols: Vec<DVector<f64>> =
            split.complement.column_iter().map(|c| reducer.reduce(&c.into_owned())).collect();
        let nontrivial = if reduced_cols.is_empty() {
            DMatrix::zeros(k, 0)
        } else {
            let r = DMatrix::from_columns(&reduced_cols);
            sparsify(&orthonormal_columns(&r)).theta
        };

        let names: Vec<String> = self.basis.iter().map(|b| b.to_string()).collect();
        let mut solutions = Vec::with_capacity(spectrum.count);
        for (mat, is_trivial) in [(&nontrivial, false), (&trivial, true)] {
            for col in mat.column_iter() {
                let coeffs: Vec<f64> = col.iter().copied().collect();
                solutions.push(CqSolution {
                    expression: format_combination(&coeffs, &names),
                    residual: g.relative_residual(&coeffs),
                    trivial: is_trivial,
                    coeffs,
                });
            }
        }
        Ok(CqReport {
            pde: system.iter().map(|e| e.to_string()).collect(),
            basis: names,
            epsilon: self.epsilon,
            gap_ratio: spectrum.gap_ratio(),
            singular_values: spectrum.singular_values,
            normalized_singular_values: spectrum.normalized,
            m: spectrum.count,
            m_t: split.count,
            n_nontrivial: spectrum.count - split.count,
            uncertain: spectrum.uncertain,
            solutions,
        })
    }
}

/// One-shot convenience wrapper around [`CqFinder`].
pub fn find_cqs(system: &[Expr], basis: &[Expr], ens: &Ensemble, epsilon: f64) -> Result<CqReport, CqError> {
    CqFinder::new(basis.to_vec(), ens, epsilon)?.find(system)
}

/// Orthonormal basis for the column span (via SVD, rank-revealing).
pub(crate) fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > 1e-10 * smax).collect();
    let cols: Vec<DVector<f64>> = keep.iter().map(|&i| u.column(i).into_owned()).collect();
    if cols.is_empty() {
        DMatrix::zeros(m.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Cosine of the angle between two coefficient vectors, ignoring sign.
pub fn alignment(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).abs()
    }
}
