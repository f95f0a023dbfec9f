//! Coefficient search that maximizes a smoothed count of conserved
//! quantities.
//!
//! For `u_t = Σ_j c_j f_j` the conservation matrix is linear in `c`, so the
//! per-term matrices `G_j` are assembled once and `G(c) = Σ c_j G_j` costs a
//! handful of axpys per step. The loss is `L = -Σ_i s((ln σ_i - A)/B)` with
//! `s(z) = 1/(1+e^z)`, and its gradient comes from first-order singular value
//! perturbation: `∂σ_i/∂c_j = u_iᵀ G_j v_i`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cqfinder::{self, assemble_linear_family, basis_integrals, detect_trivial, null_space, CqError};
use crate::curves::EnsembleConfig;
use crate::scalar::Real;
use crate::{Ensemble, Expr};

/// Singular values are floored here before taking the log.
pub const SIGMA_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum OptError {
    #[error(transparent)]
    Cq(#[from] CqError),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("cannot convert the zero vector to spherical coordinates")]
    ZeroVector,
    #[error("expected {expected} parameters, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("ensemble has {curves} curves but the CQ basis has {terms} terms; need at least as many curves")]
    TooFewCurves { curves: usize, terms: usize },
}

/// Update rule applied to the raw gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Gradient,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Log-scale cutoff `A`.
    pub a: f64,
    /// Sigmoid width `B`.
    pub b: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Cosine annealing period `T_max`, in epochs.
    pub anneal_period: usize,
    pub optimizer: Optimizer,
    #[serde(default)]
    pub init: Init,
}

/// How restart starting points are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// `φ_i ~ U[0,π]`, last angle `~ U[0,2π)`. Not uniform on the sphere.
    UniformAngles,
    /// Gaussian Cartesian coefficients mapped to angles (uniform on the sphere).
    #[default]
    Isotropic,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { a: 0.0, b: 1000.0, epochs: 25_000, learning_rate: 1e-3, anneal_period: 5_000, optimizer: Optimizer::adam(), init: Init::Isotropic }
    }
}

impl LossConfig {
    /// Single-parameter KdV-with-diffusion setting.
    pub fn warmup() -> Self {
        Self { a: 0.0, b: 1.0, epochs: 10_000, learning_rate: 5e-3, anneal_period: 10_000, optimizer: Optimizer::adam(), init: Init::Isotropic }
    }

    pub fn validate(&self) -> Result<(), OptError> {
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(OptError::Config(format!("B must be positive, got {}", self.b)));
        }
        if !self.a.is_finite() {
            return Err(OptError::Config("A must be finite".into()));
        }
        if self.epochs < 1 {
            return Err(OptError::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OptError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.anneal_period < 1 {
            return Err(OptError::Config("anneal period must be at least 1".into()));
        }
        match self.optimizer {
            Optimizer::Gradient => {}
            Optimizer::Momentum { beta } if (0.0..1.0).contains(&beta) => {}
            Optimizer::Adam { beta1, beta2, eps } if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 => {}
            other => return Err(OptError::Config(format!("bad optimizer parameters {other:?}"))),
        }
        Ok(())
    }

    /// `η(t) = ½η₀(1 + cos(π (t mod T)/T))`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let t = (epoch % self.anneal_period) as f64 / self.anneal_period as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

fn sigmoid_arg<T: Real>(sigma: T, a: T, b: T) -> T {
    (sigma.max(T::lit(SIGMA_FLOOR)).ln() - a) / b
}

// 1/(1+e^z) without overflow
fn logistic<T: Real>(z: T) -> T {
    if z > T::zero() {
        let e = (-z).exp();
        e / (T::one() + e)
    } else {
        T::one() / (T::one() + z.exp())
    }
}

/// `Σ 1/(1+exp((ln σ_i - A)/B))`.
pub fn smoothed_ncq<T: Real>(sigma: &[T], a: T, b: T) -> T {
    sigma.iter().map(|&s| logistic(sigmoid_arg(s, a, b))).sum()
}

/// `∂(-n_CQ)/∂σ` for one singular value: `s(1-s)/(Bσ)`.
pub fn loss_weight<T: Real>(sigma: T, a: T, b: T) -> T {
    let s = logistic(sigmoid_arg(sigma, a, b));
    let sigma = sigma.max(T::lit(SIGMA_FLOOR));
    s * (T::one() - s) / (b * sigma)
}

/// Generalized spherical coordinates: `n-1` angles to a unit vector in `Rⁿ`.
pub fn spherical_to_cartesian<T: Real>(phi: &[T]) -> Vec<T> {
    let n = phi.len() + 1;
    let mut c = Vec::with_capacity(n);
    let mut sin_prod = T::one();
    for &p in phi {
        c.push(sin_prod * p.cos());
        sin_prod = sin_prod * p.sin();
    }
    c.push(sin_prod);
    c
}

/// Inverse of [`spherical_to_cartesian`]: returns `(r, φ)` with
/// `φ_1..φ_{n-2} ∈ [0, π]` and `φ_{n-1} ∈ [0, 2π)`.
pub fn cartesian_to_spherical<T: Real>(c: &[T]) -> Result<(T, Vec<T>), OptError> {
    let r = c.iter().map(|&x| x * x).sum::<T>().sqrt();
    if r == T::zero() || c.is_empty() {
        return Err(OptError::ZeroVector);
    }
    let n = c.len();
    let mut phi = Vec::with_capacity(n.saturating_sub(1));
    // tail[k] = sqrt(Σ_{i≥k} c_i²)
    let mut tail = vec![T::zero(); n + 1];
    for k in (0..n).rev() {
        tail[k] = (tail[k + 1] * tail[k + 1] + c[k] * c[k]).sqrt();
    }
    for k in 0..n.saturating_sub(2) {
        phi.push(tail[k + 1].atan2(c[k]));
    }
    if n >= 2 {
        let two_pi = T::lit(std::f64::consts::TAU);
        let last = c[n - 1].atan2(c[n - 2]);
        phi.push(if last < T::zero() { last + two_pi } else { last });
    }
    Ok((r, phi))
}

/// `(∂c/∂φ)ᵀ g`: pulls a gradient in coefficient space back to angles.
pub fn spherical_pullback<T: Real>(phi: &[T], grad_c: &[T]) -> Vec<T> {
    let n = phi.len() + 1;
    let (sin, cos): (Vec<T>, Vec<T>) = phi.iter().map(|p| p.sin_cos()).unzip();
    let mut out = vec![T::zero(); phi.len()];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for i in k..n {
            // ∂c_i/∂φ_k
            let mut d = T::one();
            for m in 0..i.min(phi.len()) {
                d = d * if m == k { cos[m] } else { sin[m] };
            }
            if i < n - 1 {
                d = d * if i == k { -sin[i] } else { cos[i] };
            }
            acc = acc + d * grad_c[i];
        }
        *o = acc;
    }
    out
}

/// How the optimized parameters map to PDE coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parametrization {
    /// Angles on the unit sphere, `n-1` parameters.
    Sphere,
    /// `c = base + Σ_k p_k directions[k]`, no normalization.
    Affine { base: Vec<f64>, directions: Vec<Vec<f64>> },
}

impl Parametrization {
    /// KdV with a free diffusion coefficient over `(u_xxx, u u_x, u_xx)`.
    pub fn kdv_diffusion() -> Self {
        Parametrization::Affine { base: vec![1.0, -6.0, 0.0], directions: vec![vec![0.0, 0.0, 1.0]] }
    }

    pub fn num_params(&self, n_terms: usize) -> usize {
        match self {
            Parametrization::Sphere => n_terms.saturating_sub(1),
            Parametrization::Affine { directions, .. } => directions.len(),
        }
    }

    pub fn coefficients(&self, params: &[f64]) -> Vec<f64> {
        match self {
            Parametrization::Sphere => spherical_to_cartesian(params),
            Parametrization::Affine { base, directions } => {
                let mut c = base.clone();
                for (p, d) in params.iter().zip(directions) {
                    for (ci, di) in c.iter_mut().zip(d) {
                        *ci += p * di;
                    }
                }
                c
            }
        }
    }

    pub fn pullback(&self, params: &[f64], grad_c: &[f64]) -> Vec<f64> {
        match self {
            Parametrization::Sphere => spherical_pullback(params, grad_c),
            Parametrization::Affine { directions, .. } => {
                directions.iter().map(|d| d.iter().zip(grad_c).map(|(a, b)| a * b).sum()).collect()
            }
        }
    }

    fn check(&self, n_terms: usize) -> Result<(), OptError> {
        if let Parametrization::Affine { base, directions } = self {
            for v in std::iter::once(base).chain(directions) {
                if v.len() != n_terms {
                    return Err(OptError::Dimension { expected: n_terms, got: v.len() });
                }
            }
        }
        Ok(())
    }
}

/// A point on the search space together with its coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeCandidate {
    pub params: Vec<f64>,
    pub coeffs: Vec<f64>,
}

impl PdeCandidate {
    pub fn from_angles(angles: Vec<f64>) -> Self {
        let coeffs = spherical_to_cartesian(&angles);
        Self { params: angles, coeffs }
    }

    pub fn new(param: &Parametrization, params: Vec<f64>) -> Self {
        let coeffs = param.coefficients(&params);
        Self { params, coeffs }
    }
}

/// Loss, gradient and diagnostics at one point.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub ncq: f64,
    pub grad_coeffs: Vec<f64>,
    /// Singular values of the deflated `G(c)`, descending.
    pub singular_values: Vec<f64>,
    /// Clusters of near-equal singular values whose weights were averaged.
    pub degenerate_clusters: usize,
    /// Singular values that hit [`SIGMA_FLOOR`].
    pub floored: usize,
}

/// Precomputed `G_j` for every PDE basis term on a fixed ensemble.
///
/// The loss sees `G·dx/√P`: the RMS over curves of the `dx`-weighted
/// integral, so `A` does not depend on the number of curves or grid points.
/// Densities with vanishing integral on every curve (total derivatives) are
/// conserved by every PDE; their columns are projected out of the loss and
/// added back as a constant, which keeps exact zeros out of `ln σ`.
pub struct LossFamily {
    pub pde_basis: Vec<Expr>,
    pub cq_basis: Vec<Expr>,
    pub epsilon: f64,
    /// `dx/√P`, applied to the matrices the loss sees.
    pub scale: f64,
    full: Vec<DMatrix<f64>>,
    deflated: Vec<DMatrix<f64>>,
    trivial_dim: usize,
}

impl LossFamily {
    pub fn new(pde_basis: Vec<Expr>, cq_basis: Vec<Expr>, ens: &Ensemble, epsilon: f64) -> Result<Self, OptError> {
        if ens.num_curves() < cq_basis.len() {
            return Err(OptError::TooFewCurves { curves: ens.num_curves(), terms: cq_basis.len() });
        }
        let full: Vec<DMatrix<f64>> =
            assemble_linear_family(&pde_basis, &cq_basis, ens)?.into_iter().map(|g| g.matrix).collect();
        let b = basis_integrals(&cq_basis, ens)?;
        let k = cq_basis.len();
        let split = detect_trivial(&DMatrix::identity(k, k), &b, epsilon);
        let q = split.complement;
        let scale = ens.spacing() / (ens.num_curves() as f64).sqrt();
        let deflated = full.iter().map(|g| g * &q * scale).collect();
        Ok(Self { pde_basis, cq_basis, epsilon, scale, full, deflated, trivial_dim: split.count })
    }

    pub fn num_terms(&self) -> usize {
        self.full.len()
    }

    /// Dimension of the always-conserved subspace projected out of the loss.
    pub fn trivial_dim(&self) -> usize {
        self.trivial_dim
    }

    /// `∂G/∂c_j` (undeflated).
    pub fn term_matrices(&self) -> &[DMatrix<f64>] {
        &self.full
    }

    fn combine(mats: &[DMatrix<f64>], c: &[f64]) -> DMatrix<f64> {
        let mut g: DMatrix<f64> = DMatrix::zeros(mats[0].nrows(), mats[0].ncols());
        for (m, &cj) in mats.iter().zip(c) {
            if cj != 0.0 {
                g.zip_apply(m, |a, b| *a += cj * b);
            }
        }
        g
    }

    /// Full conservation matrix `G(c)`.
    pub fn matrix(&self, c: &[f64]) -> DMatrix<f64> {
        Self::combine(&self.full, c)
    }

    /// Integer CQ count of `G(c)` at the family's threshold.
    pub fn count(&self, c: &[f64]) -> Result<usize, OptError> {
        let g = cqfinder::ConservationMatrix { matrix: self.matrix(c) };
        Ok(null_space(&g, self.epsilon)?.count)
    }

    /// Loss only; cheaper than [`LossFamily::evaluate`].
    pub fn loss(&self, c: &[f64], cfg: &LossConfig) -> f64 {
        let g = Self::combine(&self.deflated, c);
        -(self.trivial_dim as f64 + smoothed_ncq(g.singular_values().as_slice(), cfg.a, cfg.b))
    }

    pub fn evaluate(&self, c: &[f64], cfg: &LossConfig) -> LossEval {
        let g = Self::combine(&self.deflated, c);
        let svd = g.svd(true, true);
        let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
        let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
        let ncq = self.trivial_dim as f64 + smoothed_ncq(&sigma, cfg.a, cfg.b);
        let mut w: Vec<f64> = sigma.iter().map(|&s| loss_weight(s, cfg.a, cfg.b)).collect();
        let floored = sigma.iter().filter(|&&s| s < SIGMA_FLOOR).count();

        // average weights over clusters of (nearly) repeated singular values
        let smax = sigma.iter().copied().fold(0.0, f64::max);
        let mut order: Vec<usize> = (0..sigma.len()).collect();
        order.sort_by(|&a, &b| sigma[a].total_cmp(&sigma[b]));
        let mut clusters = 0;
        let mut start = 0;
        while start < order.len() {
            let mut end = start + 1;
            while end < order.len() && sigma[order[end]] - sigma[order[end - 1]] < 1e-10 * smax {
                end += 1;
            }
            if end - start > 1 {
                clusters += 1;
                let mean = order[start..end].iter().map(|&i| w[i]).sum::<f64>() / (end - start) as f64;
                for &i in &order[start..end] {
                    w[i] = mean;
                }
            }
            start = end;
        }

        // dL/dc_j = Σ_i w_i u_iᵀ G_j v_i = ⟨G_j, U diag(w) Vᵀ⟩
        let mut uw = u.clone();
        for (mut col, &wi) in uw.column_iter_mut().zip(&w) {
            col *= wi;
        }
        let weighted = uw * vt;
        let grad_coeffs = self.deflated.iter().map(|gj| gj.dot(&weighted)).collect();
        LossEval { loss: -ncq, ncq, grad_coeffs, singular_values: sigma, degenerate_clusters: clusters, floored }
    }

    /// Loss and gradient with respect to the parameters of `param`.
    pub fn loss_and_gradient(&self, param: &Parametrization, params: &[f64], cfg: &LossConfig) -> (LossEval, Vec<f64>) {
        let c = param.coefficients(params);
        let eval = self.evaluate(&c, cfg);
        let grad = param.pullback(params, &eval.grad_coeffs);
        (eval, grad)
    }
}

/// One optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: PdeCandidate,
    pub last: PdeCandidate,
    /// Loss before every update plus the final loss: `epochs + 1` values
    /// unless the run failed.
    pub losses: Vec<f64>,
    pub failed: Option<String>,
    /// Epochs at which degenerate singular values were averaged.
    pub degenerate_epochs: usize,
}

enum OptState {
    Gradient,
    Momentum { beta: f64, v: Vec<f64> },
    Adam { beta1: f64, beta2: f64, eps: f64, m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl OptState {
    fn new(opt: Optimizer, n: usize) -> Self {
        match opt {
            Optimizer::Gradient => OptState::Gradient,
            Optimizer::Momentum { beta } => OptState::Momentum { beta, v: vec![0.0; n] },
            Optimizer::Adam { beta1, beta2, eps } => {
                OptState::Adam { beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
            }
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            OptState::Gradient => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptState::Momentum { beta, v } => {
                for ((p, g), vi) in params.iter_mut().zip(grad).zip(v.iter_mut()) {
                    *vi = *beta * *vi + g;
                    *p -= lr * *vi;
                }
            }
            OptState::Adam { beta1, beta2, eps, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *eps);
                }
            }
        }
    }
}

/// Gradient descent from `init` with a cosine-annealed step.
pub fn optimize(family: &LossFamily, param: &Parametrization, init: Vec<f64>, cfg: &LossConfig) -> Result<Trajectory, OptError> {
    cfg.validate()?;
    param.check(family.num_terms())?;
    let n = param.num_params(family.num_terms());
    if init.len() != n {
        return Err(OptError::Dimension { expected: n, got: init.len() });
    }
    let initial = PdeCandidate::new(param, init.clone());
    let mut params = init;
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    let mut state = OptState::new(cfg.optimizer, n);
    let mut failed = None;
    let mut degenerate_epochs = 0;
    for epoch in 0..=cfg.epochs {
        let (eval, grad) = family.loss_and_gradient(param, &params, cfg);
        if !eval.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            failed = Some(format!("non-finite loss or gradient at epoch {epoch}"));
            break;
        }
        losses.push(eval.loss);
        if epoch == cfg.epochs {
            break;
        }
        if eval.degenerate_clusters > 0 {
            degenerate_epochs += 1;
        }
        state.step(&mut params, &grad, cfg.learning_rate_at(epoch));
    }
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        if *last > first + 1e-6 {
            log::warn!("optimize: loss rose from {first:.6} to {last:.6}");
        }
    }
    let last = PdeCandidate::new(param, params);
    Ok(Trajectory { initial, last, losses, failed, degenerate_epochs })
}

/// Uniform angles: `φ_1..φ_{n-2} ∈ U[0,π]`, `φ_{n-1} ∈ U[0,2π)`. Not
/// uniform on the sphere.
pub fn random_angles(n_terms: usize, rng: &mut impl Rng) -> Vec<f64> {
    let k = n_terms.saturating_sub(1);
    (0..k)
        .map(|i| {
            let hi = if i + 1 == k { std::f64::consts::TAU } else { std::f64::consts::PI };
            rng.random_range(0.0..hi)
        })
        .collect()
}

/// Angles of an isotropic Gaussian vector in `n_terms` dimensions.
pub fn isotropic_angles(n_terms: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let c: Vec<f64> = (0..n_terms).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok((_, phi)) = cartesian_to_spherical(&c) {
            return phi;
        }
    }
}

/// Angles for restart `index`: ChaCha stream `index` of `seed`.
pub fn restart_angles(seed: u64, index: usize, n_terms: usize, init: Init) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    match init {
        Init::UniformAngles => random_angles(n_terms, &mut rng),
        Init::Isotropic => isotropic_angles(n_terms, &mut rng),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartResult {
    pub index: usize,
    pub initial_angles: Vec<f64>,
    pub final_angles: Vec<f64>,
    pub final_coeffs: Vec<f64>,
    pub losses: Vec<f64>,
    pub final_ncq_smoothed: f64,
    pub final_ncq: usize,
    pub failed: Option<String>,
}

impl RestartResult {
    pub fn converged(&self) -> bool {
        self.failed.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub seed: u64,
    pub ensemble_seed: u64,
    pub ensemble: EnsembleConfig,
    pub config: LossConfig,
    pub pde_basis: Vec<String>,
    pub cq_basis: Vec<String>,
    pub restarts: Vec<RestartResult>,
}

/// Runs one spherical restart.
pub fn run_restart(family: &LossFamily, cfg: &LossConfig, seed: u64, index: usize) -> Result<RestartResult, OptError> {
    let init = restart_angles(seed, index, family.num_terms(), cfg.init);
    let traj = optimize(family, &Parametrization::Sphere, init.clone(), cfg)?;
    let c = &traj.last.coeffs;
    let (final_ncq_smoothed, final_ncq, failed) = if traj.failed.is_none() {
        let ncq = -family.loss(c, cfg);
        (ncq, family.count(c)?, None)
    } else {
        (f64::NAN, 0, traj.failed)
    };
    Ok(RestartResult {
        index,
        initial_angles: init,
        final_angles: traj.last.params,
        final_coeffs: traj.last.coeffs,
        losses: traj.losses,
        final_ncq_smoothed,
        final_ncq,
        failed,
    })
}

/// Runs the given restart indices in parallel. `on_result` sees each result
/// as soon as it finishes; the returned list is in index order.
pub fn run_restarts(
    family: &LossFamily,
    cfg: &LossConfig,
    seed: u64,
    indices: &[usize],
    on_result: impl Fn(&RestartResult) + Sync,
) -> Result<Vec<RestartResult>, OptError> {
    cfg.validate()?;
    indices
        .par_iter()
        .map(|&i| {
            let r = run_restart(family, cfg, seed, i)?;
            on_result(&r);
            Ok(r)
        })
        .collect()
}

/// Multi-restart search; restart `i` starts from `restart_angles(seed, i, ..)`.
pub fn run_search(
    n_restarts: usize,
    family: &LossFamily,
    ens: &Ensemble,
    cfg: &LossConfig,
    seed: u64,
    on_result: impl Fn(&RestartResult) + Sync,
) -> Result<SearchResult, OptError> {
    if n_restarts < 1 {
        return Err(OptError::Config("need at least one restart".into()));
    }
    let indices: Vec<usize> = (0..n_restarts).collect();
    let restarts = run_restarts(family, cfg, seed, &indices, on_result)?;
    Ok(SearchResult {
        seed,
        ensemble_seed: ens.seed,
        ensemble: ens.config.clone(),
        config: cfg.clone(),
        pde_basis: family.pde_basis.iter().map(|e| e.to_string()).collect(),
        cq_basis: family.cq_basis.iter().map(|e| e.to_string()).collect(),
        restarts,
    })
}

/// Angle between `c` and the line through `target`, in `[0, π/2]`.
pub fn angular_distance(c: &[f64], target: &[f64]) -> f64 {
    cqfinder::alignment(c, target).min(1.0).acos()
}

/// Central-difference gradient of the loss in parameter space.
pub fn finite_difference_gradient(family: &LossFamily, param: &Parametrization, params: &[f64], cfg: &LossConfig, h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            p[i] = params[i] + h;
            let up = family.loss(&param.coefficients(&p), cfg);
            p[i] = params[i] - h;
            let down = family.loss(&param.coefficients(&p), cfg);
            p[i] = params[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Coefficient vector with a single `1` at `index`.
pub fn unit_coeffs(n: usize, index: usize) -> Vec<f64> {
    let mut c = vec![0.0; n];
    c[index] = 1.0;
    c
}
