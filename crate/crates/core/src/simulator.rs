//! Method-of-lines evolution of `u_t = f(u')`, conserved-quantity monitoring,
//! break time and post-break decay fits.
//!
//! Spatial derivatives use 4th-order finite differences (central on periodic
//! grids, shifted one-sided stencils near the ends of a bounded grid), time
//! stepping is classical RK4.

use std::collections::BTreeMap;
use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cqfinder::conservation_integrand;
use crate::curves::MixtureCurve;
use crate::scalar::Real;
use crate::symbolic::{CompiledExpr, JetLayout, SymbolicError, Var, FIELD_NAMES};
use crate::{Expr, Rational};

/// Accuracy order of every finite-difference stencil.
pub const FD_ACCURACY: usize = 4;

/// Multiple of the initial `max|u_xx|` that marks the observed break.
pub const BREAK_FACTOR: f64 = 5.0;

/// `|H(0)|` below this fraction of `Σ|h|` counts as zero when measuring drift.
pub const CANCELLATION_FRACTION: f64 = 1e-6;

/// Absolute drift floor for integrands that vanish identically at `t = 0`.
pub const DRIFT_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("grid needs at least 16 points, got {0}")]
    GridTooSmall(usize),
    #[error("grid interval [{0}, {1}] is empty")]
    EmptyInterval(f64, f64),
    #[error("field {field} has {got} values but the grid has {expected} points")]
    Length { field: usize, expected: usize, got: usize },
    #[error("system has {equations} equation(s) but {fields} initial field(s)")]
    FieldCount { equations: usize, fields: usize },
    #[error("time step {dt} exceeds the stability estimate {limit:.3e}; lower dt or disable the check")]
    Unstable { dt: f64, limit: f64 },
    #[error("invalid simulation configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
    #[error("fit window [{start}, {end}] holds {samples} samples; need at least 3 and a trace reaching 10·t_b")]
    Window { start: f64, end: f64, samples: usize },
    #[error("observable {0:?} is not in the trace")]
    MissingObservable(String),
}

/// Uniform 1D grid. Periodic grids exclude the right endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub x_min: f64,
    pub x_max: f64,
    pub n: usize,
    pub periodic: bool,
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, n: usize, periodic: bool) -> Result<Self, SimError> {
        if n < 16 {
            return Err(SimError::GridTooSmall(n));
        }
        if !(x_max > x_min) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(SimError::EmptyInterval(x_min, x_max));
        }
        Ok(Self { x_min, x_max, n, periodic })
    }

    /// `[0, 2π)` with `n` points.
    pub fn periodic_2pi(n: usize) -> Result<Self, SimError> {
        Self::new(0.0, std::f64::consts::TAU, n, true)
    }

    pub fn spacing(&self) -> f64 {
        let len = self.x_max - self.x_min;
        if self.periodic {
            len / self.n as f64
        } else {
            len / (self.n - 1) as f64
        }
    }

    pub fn points(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.n).map(|i| self.x_min + i as f64 * h).collect()
    }

    pub fn sample<T: Real>(&self, f: impl Fn(f64) -> f64) -> Vec<T> {
        self.points().into_iter().map(|x| T::lit(f(x))).collect()
    }

    pub fn sample_curve<T: Real>(&self, curve: &MixtureCurve) -> Vec<T> {
        self.points().into_iter().map(|x| curve.value(T::lit(x))).collect()
    }
}

/// Finite-difference weights for the `m`-th derivative at `x0` on nodes `xs`
/// (Fornberg's recursion).
pub fn fd_weights(x0: f64, xs: &[f64], m: usize) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![vec![0.0; m + 1]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|r| r[m]).collect()
}

fn central_half_width(m: usize) -> usize {
    m.div_ceil(2) + FD_ACCURACY / 2 - 1
}

fn central_weights(m: usize) -> Vec<f64> {
    let p = central_half_width(m) as isize;
    let xs: Vec<f64> = (-p..=p).map(|o| o as f64).collect();
    fd_weights(0.0, &xs, m)
}

/// Largest modulus of the central stencil's symbol, per unit spacing.
fn stencil_radius(m: usize) -> f64 {
    let w = central_weights(m);
    let p = central_half_width(m) as f64;
    (0..=512)
        .map(|s| {
            let th = std::f64::consts::PI * s as f64 / 512.0;
            let (mut re, mut im) = (0.0, 0.0);
            for (k, wk) in w.iter().enumerate() {
                let a = (k as f64 - p) * th;
                re += wk * a.cos();
                im += wk * a.sin();
            }
            (re * re + im * im).sqrt()
        })
        .fold(0.0, f64::max)
}

struct Stencil<T> {
    /// Row `i` reads `weights` starting at `start[i]` (wrapping when periodic).
    start: Vec<isize>,
    weights: Vec<Vec<T>>,
}

/// Precomputed derivative stencils for orders `1..=max_order`.
pub struct Differentiator<T> {
    n: usize,
    periodic: bool,
    orders: Vec<Stencil<T>>,
}

impl<T: Real> Differentiator<T> {
    pub fn new(grid: &Grid1D, max_order: usize) -> Result<Self, SimError> {
        let h = grid.spacing();
        let n = grid.n;
        let mut orders = Vec::with_capacity(max_order);
        for m in 1..=max_order {
            let scale = h.powi(m as i32);
            let to_t = |w: Vec<f64>| w.into_iter().map(|v| T::lit(v / scale)).collect::<Vec<T>>();
            let p = central_half_width(m);
            let central = to_t(central_weights(m));
            let width = m + FD_ACCURACY;
            if width > n || 2 * p + 1 > n {
                return Err(SimError::Config(format!("grid of {n} points is too small for derivative order {m}")));
            }
            let mut start = Vec::with_capacity(n);
            let mut weights = Vec::with_capacity(n);
            for i in 0..n {
                if grid.periodic || (i >= p && i + p < n) {
                    start.push(i as isize - p as isize);
                    weights.push(central.clone());
                } else {
                    let s = if i < p { 0 } else { n - width };
                    let xs: Vec<f64> = (s..s + width).map(|j| j as f64).collect();
                    start.push(s as isize);
                    weights.push(to_t(fd_weights(i as f64, &xs, m)));
                }
            }
            orders.push(Stencil { start, weights });
        }
        Ok(Self { n, periodic: grid.periodic, orders })
    }

    pub fn max_order(&self) -> usize {
        self.orders.len()
    }

    /// `m`-th derivative of `f` (m ≥ 1) into `out`.
    pub fn apply(&self, m: usize, f: &[T], out: &mut [T]) {
        let st = &self.orders[m - 1];
        let n = self.n as isize;
        for (i, o) in out.iter_mut().enumerate() {
            let s = st.start[i];
            let mut acc = T::zero();
            for (k, &w) in st.weights[i].iter().enumerate() {
                let j = s + k as isize;
                let j = if self.periodic { j.rem_euclid(n) } else { j } as usize;
                acc = acc + w * f[j];
            }
            *o = acc;
        }
    }

    pub fn derivative(&self, m: usize, f: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); f.len()];
        if m == 0 {
            out.copy_from_slice(f);
        } else {
            self.apply(m, f, &mut out);
        }
        out
    }

    /// Jets of every field at every point, laid out per `layout`:
    /// `out[point * layout.len() + field * width + order]`.
    pub fn jets(&self, fields: &[Vec<T>], layout: JetLayout) -> Vec<T> {
        let n = self.n;
        let len = layout.len();
        let mut out = vec![T::zero(); n * len];
        let mut d = vec![T::zero(); n];
        for (fi, f) in fields.iter().enumerate().take(layout.fields) {
            for m in 0..layout.width {
                if m == 0 {
                    d.copy_from_slice(f);
                } else {
                    self.apply(m, f, &mut d);
                }
                for (i, v) in d.iter().enumerate() {
                    out[i * len + fi * layout.width + m] = *v;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t_end: f64,
    pub dt: f64,
    /// Keep every k-th step as a snapshot (the final step is always kept).
    pub snapshot_every: usize,
    /// Fraction of the highest Fourier modes zeroed after every step
    /// (periodic grids only). `None` disables the filter.
    pub filter: Option<f64>,
    /// Adds `ν ∂²u/∂x²` to every equation; 0 disables it.
    #[serde(default)]
    pub viscosity: f64,
    pub check_stability: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { t_end: 1.0, dt: 1e-3, snapshot_every: 10, filter: None, viscosity: 0.0, check_stability: true }
    }
}

impl SimConfig {
    pub fn validate(&self, grid: &Grid1D) -> Result<(), SimError> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(SimError::Config(format!("t_end must be positive, got {}", self.t_end)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.snapshot_every == 0 {
            return Err(SimError::Config("snapshot_every must be at least 1".into()));
        }
        if !(self.viscosity >= 0.0 && self.viscosity.is_finite()) {
            return Err(SimError::Config(format!("viscosity must be non-negative, got {}", self.viscosity)));
        }
        if let Some(f) = self.filter {
            if !(f > 0.0 && f < 1.0) {
                return Err(SimError::Config(format!("filter fraction must lie in (0, 1), got {f}")));
            }
            if !grid.periodic {
                return Err(SimError::Config("the spectral filter needs a periodic grid".into()));
            }
        }
        Ok(())
    }
}

/// Snapshots of a simulation plus per-snapshot observables.
#[derive(Clone, Debug)]
pub struct SimulationTrace<T> {
    pub grid: Grid1D,
    pub system: Vec<String>,
    pub times: Vec<T>,
    /// `snapshots[k][field][point]`.
    pub snapshots: Vec<Vec<Vec<T>>>,
    /// Named series with one value per snapshot (`max|u|`, `max|u_x|`, ...).
    pub observables: BTreeMap<String, Vec<T>>,
    /// Time of the first non-finite step, if the run blew up.
    pub blow_up: Option<T>,
}

fn max_abs<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

impl<T: Real> SimulationTrace<T> {
    pub fn num_fields(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.len())
    }

    pub fn end_time(&self) -> T {
        *self.times.last().expect("trace has at least the initial snapshot")
    }

    pub fn observable(&self, name: &str) -> Result<&[T], SimError> {
        self.observables.get(name).map(|v| v.as_slice()).ok_or_else(|| SimError::MissingObservable(name.into()))
    }

    fn record(&mut self, t: T, state: Vec<Vec<T>>, diff: &Differentiator<T>) {
        for (fi, f) in state.iter().enumerate() {
            let name = FIELD_NAMES[fi];
            let ux = diff.derivative(1, f);
            let uxx = diff.derivative(2, f);
            for (key, v) in [(format!("max|{name}|"), max_abs(f)), (format!("max|{name}_x|"), max_abs(&ux)), (format!("max|{name}_xx|"), max_abs(&uxx))] {
                self.observables.entry(key).or_default().push(v);
            }
        }
        self.times.push(t);
        self.snapshots.push(state);
    }

    /// Rows `t,x,u[,v,...]`, one per snapshot and grid point.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let names: Vec<&str> = FIELD_NAMES[..self.num_fields()].to_vec();
        writeln!(w, "t,x,{}", names.join(","))?;
        let xs = self.grid.points();
        for (t, snap) in self.times.iter().zip(&self.snapshots) {
            for (i, x) in xs.iter().enumerate() {
                write!(w, "{t},{x}")?;
                for f in snap {
                    write!(w, ",{}", f[i])?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Times and observables as a JSON object.
    pub fn observables_json(&self) -> serde_json::Value {
        let f = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect::<Vec<f64>>();
        let obs: BTreeMap<&str, Vec<f64>> = self.observables.iter().map(|(k, v)| (k.as_str(), f(v))).collect();
        serde_json::json!({
            "grid": self.grid,
            "system": self.system,
            "times": f(&self.times),
            "observables": obs,
            "blow_up": self.blow_up.and_then(|t| t.to_f64()),
        })
    }
}

struct Rhs<T> {
    exprs: Vec<CompiledExpr<T>>,
    layout: JetLayout,
    diff: Differentiator<T>,
}

impl<T: Real> Rhs<T> {
    fn eval(&self, state: &[Vec<T>], out: &mut [Vec<T>]) {
        let jets = self.diff.jets(state, self.layout);
        let len = self.layout.len();
        for (e, o) in self.exprs.iter().zip(out.iter_mut()) {
            for (i, v) in o.iter_mut().enumerate() {
                *v = e.eval(&jets[i * len..(i + 1) * len]);
            }
        }
    }
}

/// Largest stable RK4 step at the given state, from the stencil symbols and
/// `max|∂f/∂u_{kx}|` over the grid.
pub fn stability_limit<T: Real>(system: &[Expr], grid: &Grid1D, state: &[Vec<T>]) -> Result<f64, SimError> {
    let order = system.iter().map(|e| e.max_order()).max().unwrap_or(0);
    if order == 0 {
        return Ok(f64::INFINITY);
    }
    let layout = JetLayout::with_max_order(state.len(), order);
    let diff = Differentiator::<T>::new(grid, order)?;
    let jets = diff.jets(state, layout);
    let h = grid.spacing();
    let len = layout.len();
    let mut rho: f64 = 0.0;
    for e in system {
        let mut r = 0.0;
        for field in 0..state.len() {
            for k in 1..=order {
                let d = e.partial(Var::new(field as u8, k as u8));
                if d.is_zero() {
                    continue;
                }
                let c = d.compile::<T>(layout)?;
                let a = (0..grid.n).map(|i| c.eval(&jets[i * len..(i + 1) * len]).abs()).fold(T::zero(), |m, x| m.max(x));
                r += a.to_f64().unwrap_or(f64::INFINITY) * stencil_radius(k) / h.powi(k as i32);
            }
        }
        rho = rho.max(r);
    }
    // RK4 covers about 2.8 along both axes; keep a margin
    Ok(if rho > 0.0 { 2.5 / rho } else { f64::INFINITY })
}

fn spectral_filter<T: Real>(f: &mut [T], fraction: f64, planner: &mut FftPlanner<T>) {
    let n = f.len();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<T>> = f.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fwd.process(&mut buf);
    let keep = ((n / 2) as f64 * (1.0 - fraction)).floor() as usize;
    for (k, c) in buf.iter_mut().enumerate() {
        if k.min(n - k) > keep {
            *c = Complex::new(T::zero(), T::zero());
        }
    }
    inv.process(&mut buf);
    let scale = T::one() / T::lit(n as f64);
    for (v, c) in f.iter_mut().zip(&buf) {
        *v = c.re * scale;
    }
}

/// Integrates `∂_t u_i = system[i]` from `initial` up to `cfg.t_end`.
pub fn evolve<T: Real>(system: &[Expr], initial: &[Vec<T>], grid: &Grid1D, cfg: &SimConfig) -> Result<SimulationTrace<T>, SimError> {
    cfg.validate(grid)?;
    if system.len() != initial.len() || system.is_empty() {
        return Err(SimError::FieldCount { equations: system.len(), fields: initial.len() });
    }
    if initial.len() > FIELD_NAMES.len() {
        return Err(SimError::Config(format!("at most {} fields are supported", FIELD_NAMES.len())));
    }
    for (field, f) in initial.iter().enumerate() {
        if f.len() != grid.n {
            return Err(SimError::Length { field, expected: grid.n, got: f.len() });
        }
    }
    let system: Vec<Expr> = if cfg.viscosity > 0.0 {
        let nu = Rational::approximate_float(cfg.viscosity)
            .ok_or_else(|| SimError::Config(format!("viscosity {} has no rational form", cfg.viscosity)))?;
        system.iter().enumerate().map(|(i, e)| e + &Expr::var(Var::new(i as u8, 2)).scale(&nu)).collect()
    } else {
        system.to_vec()
    };
    let system = system.as_slice();
    if cfg.check_stability {
        let limit = stability_limit(system, grid, initial)?;
        if cfg.dt > limit {
            return Err(SimError::Unstable { dt: cfg.dt, limit });
        }
    }
    let order = system.iter().map(|e| e.max_order()).max().unwrap_or(0).max(2);
    let layout = JetLayout::with_max_order(initial.len(), order);
    let exprs = system.iter().map(|e| e.compile::<T>(layout)).collect::<Result<Vec<_>, _>>()?;
    let rhs = Rhs { exprs, layout, diff: Differentiator::new(grid, order)? };

    let steps = (cfg.t_end / cfg.dt).round().max(1.0) as usize;
    let dt = T::lit(cfg.dt);
    let mut trace = SimulationTrace {
        grid: grid.clone(),
        system: system.iter().map(|e| e.to_string()).collect(),
        times: Vec::new(),
        snapshots: Vec::new(),
        observables: BTreeMap::new(),
        blow_up: None,
    };
    let mut u: Vec<Vec<T>> = initial.to_vec();
    trace.record(T::zero(), u.clone(), &rhs.diff);

    let zeros = || vec![vec![T::zero(); grid.n]; u.len()];
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (zeros(), zeros(), zeros(), zeros(), zeros());
    let half = T::lit(0.5);
    let sixth = T::lit(1.0 / 6.0);
    let two = T::lit(2.0);
    let mut planner = FftPlanner::new();
    let axpy = |out: &mut Vec<Vec<T>>, base: &[Vec<T>], k: &[Vec<T>], a: T| {
        for ((o, b), kk) in out.iter_mut().zip(base).zip(k) {
            for ((oi, bi), ki) in o.iter_mut().zip(b).zip(kk) {
                *oi = *bi + a * *ki;
            }
        }
    };
    for step in 1..=steps {
        rhs.eval(&u, &mut k1);
        axpy(&mut tmp, &u, &k1, half * dt);
        rhs.eval(&tmp, &mut k2);
        axpy(&mut tmp, &u, &k2, half * dt);
        rhs.eval(&tmp, &mut k3);
        axpy(&mut tmp, &u, &k3, dt);
        rhs.eval(&tmp, &mut k4);
        let mut next = u.clone();
        for (fi, f) in next.iter_mut().enumerate() {
            for (i, v) in f.iter_mut().enumerate() {
                *v = *v + dt * sixth * (k1[fi][i] + two * k2[fi][i] + two * k3[fi][i] + k4[fi][i]);
            }
        }
        if let Some(frac) = cfg.filter {
            for f in next.iter_mut() {
                spectral_filter(f, frac, &mut planner);
            }
        }
        let t = T::lit(step as f64 * cfg.dt);
        if next.iter().flatten().any(|v| !v.is_finite()) {
            log::warn!("evolve: non-finite state at t = {t}, trace truncated");
            trace.blow_up = Some(t);
            break;
        }
        u = next;
        if step % cfg.snapshot_every == 0 || step == steps {
            trace.record(t, u.clone(), &rhs.diff);
        }
    }
    Ok(trace)
}

/// Time series of `H = Σ_grid h(u')` over a trace.
#[derive(Clone, Debug)]
pub struct CqSeries<T> {
    pub times: Vec<T>,
    pub values: Vec<T>,
    /// `Σ_grid |h(u')|` at the first snapshot.
    pub magnitude: T,
}

impl<T: Real> CqSeries<T> {
    /// Scale drift is measured against: `|H(0)|`, or `Σ|h|` when `H(0)` is
    /// zero up to cancellation, with an absolute floor.
    pub fn scale(&self) -> T {
        let h0 = self.values[0].abs();
        let s = if h0 < T::lit(CANCELLATION_FRACTION) * self.magnitude { self.magnitude } else { h0 };
        s.max(T::lit(DRIFT_FLOOR))
    }

    /// `max |H(t) - H(0)| / scale` over snapshots with `t < t_max`.
    pub fn drift_before(&self, t_max: T) -> T {
        let h0 = self.values[0];
        let scale = self.scale();
        self.times
            .iter()
            .zip(&self.values)
            .filter(|(t, _)| **t < t_max)
            .fold(T::zero(), |m, (_, v)| m.max((*v - h0).abs() / scale))
    }

    pub fn drift(&self) -> T {
        self.drift_before(T::infinity())
    }
}

/// Evaluates `h` on every snapshot, with derivatives recomputed from the
/// snapshot values.
pub fn monitor_cq<T: Real>(trace: &SimulationTrace<T>, h: &Expr) -> Result<CqSeries<T>, SimError> {
    let fields = trace.num_fields().max(h.num_fields());
    let layout = JetLayout::with_max_order(fields, h.max_order());
    let compiled = h.compile::<T>(layout)?;
    let diff = Differentiator::<T>::new(&trace.grid, h.max_order().max(1))?;
    let len = layout.len();
    let mut values = Vec::with_capacity(trace.times.len());
    let mut magnitude = T::zero();
    for (k, snap) in trace.snapshots.iter().enumerate() {
        if h.num_fields() > snap.len() {
            return Err(SymbolicError::FieldOutOfRange { field: h.num_fields() - 1, fields: snap.len() }.into());
        }
        let jets = diff.jets(snap, layout);
        let mut sum = crate::scalar::CompensatedSum::new();
        let mut mag = T::zero();
        for i in 0..trace.grid.n {
            let v = compiled.eval(&jets[i * len..(i + 1) * len]);
            sum.add(v);
            mag = mag + v.abs();
        }
        if k == 0 {
            magnitude = mag;
        }
        values.push(sum.value());
    }
    Ok(CqSeries { times: trace.times.clone(), values, magnitude })
}

/// `min_{t>0} 1/(6 u_x u_xx)` over the given jets: the first crossing of the
/// characteristics of `u_t = u_x³`. `None` when no value is positive.
pub fn break_time_from_jets<T: Real>(ux: &[T], uxx: &[T]) -> Option<T> {
    let six = T::lit(6.0);
    ux.iter()
        .zip(uxx)
        .map(|(&a, &b)| a * b)
        .filter(|&p| p > T::zero())
        .map(|p| T::one() / (six * p))
        .filter(|t| t.is_finite())
        .fold(None, |m: Option<T>, t| Some(m.map_or(t, |m| m.min(t))))
}

/// Analytic break time of `u_t = u_x³` for `u0` sampled on `grid`.
pub fn break_time<T: Real>(u0: &[T], grid: &Grid1D) -> Result<Option<T>, SimError> {
    if u0.len() != grid.n {
        return Err(SimError::Length { field: 0, expected: grid.n, got: u0.len() });
    }
    let d = Differentiator::<T>::new(grid, 2)?;
    let mut uxx = d.derivative(2, u0);
    // second differences of a linear profile are pure round-off
    let len = grid.x_max - grid.x_min;
    let eps = T::epsilon().to_f64().unwrap();
    let noise = T::lit((1e3 * eps * (grid.n * grid.n) as f64).max(1e-9) / (len * len)) * max_abs(u0);
    for v in uxx.iter_mut() {
        if v.abs() <= noise {
            *v = T::zero();
        }
    }
    Ok(break_time_from_jets(&d.derivative(1, u0), &uxx))
}

/// First time `max|u_xx|` exceeds `factor` times its initial value.
pub fn observed_break_time<T: Real>(trace: &SimulationTrace<T>, factor: T) -> Result<Option<T>, SimError> {
    let s = trace.observable("max|u_xx|")?;
    let limit = factor * s[0];
    Ok(trace.times.iter().zip(s).find(|(_, v)| **v > limit).map(|(t, _)| *t))
}

/// Least-squares slope of `ln y` against `ln t` over samples with `t ≥ start`.
pub fn fit_power_law<T: Real>(times: &[T], values: &[T], start: T) -> Result<T, SimError> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t >= start && **t > T::zero() && **v > T::zero())
        .map(|(t, v)| (t.to_f64().unwrap().ln(), v.to_f64().unwrap().ln()))
        .collect();
    let end = times.last().and_then(|t| t.to_f64()).unwrap_or(0.0);
    if pts.len() < 3 {
        return Err(SimError::Window { start: start.to_f64().unwrap_or(f64::NAN), end, samples: pts.len() });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(T::lit(sxy / sxx))
}

/// Power-law exponent of `max|u|` over `[2 t_b, end]`. The trace must reach
/// `10 t_b`.
pub fn decay_exponent<T: Real>(trace: &SimulationTrace<T>, t_b: T) -> Result<T, SimError> {
    let end = trace.end_time();
    let start = T::lit(2.0) * t_b;
    if end < T::lit(10.0) * t_b {
        let samples = trace.times.iter().filter(|t| **t >= start).count();
        return Err(SimError::Window { start: start.to_f64().unwrap(), end: end.to_f64().unwrap(), samples });
    }
    fit_power_law(&trace.times, trace.observable("max|u|")?, start)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakReport {
    /// `None` means no break.
    pub t_b_analytic: Option<f64>,
    pub t_b_observed: Option<f64>,
    pub decay_exponent: Option<f64>,
    pub fit_window: Option<(f64, f64)>,
}

/// Break time, observed blow-up and (when the trace is long enough) the
/// post-break decay exponent for a `u_t = u_x³` trace.
pub fn break_report<T: Real>(trace: &SimulationTrace<T>) -> Result<BreakReport, SimError> {
    let tb = break_time(&trace.snapshots[0][0], &trace.grid)?;
    let observed = observed_break_time(trace, T::lit(BREAK_FACTOR))?;
    let (decay, window) = match tb {
        Some(tb) => match decay_exponent(trace, tb) {
            Ok(e) => (e.to_f64(), Some((2.0 * tb.to_f64().unwrap(), trace.end_time().to_f64().unwrap()))),
            Err(SimError::Window { .. }) => (None, None),
            Err(e) => return Err(e),
        },
        None => (None, None),
    };
    Ok(BreakReport { t_b_analytic: tb.and_then(|t| t.to_f64()), t_b_observed: observed.and_then(|t| t.to_f64()), decay_exponent: decay, fit_window: window })
}

/// `u_t = u_x³`.
pub fn cubic_advection() -> Expr {
    Expr::var(Var::u(1)).pow(3)
}

/// Outcome of checking that `u_xⁿ` is conserved by `u_t = u_x³`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfiniteCqCheck {
    pub n: u32,
    /// `F` with `∂h/∂u_x · D(f) = D(F)`: `3n/(n+2) u_x^{n+2}`.
    pub antiderivative: String,
    /// The conservation integrand minus `D(F)` is identically zero.
    pub symbolic_ok: bool,
    /// Relative drift of `Σ u_xⁿ` before the break, when a trace was given.
    pub drift: Option<f64>,
}

/// Symbolic (and optionally numerical) check that `u_xⁿ` is conserved by
/// `u_t = u_x³` for each `n ≥ 1`.
pub fn verify_infinite_cqs<T: Real>(ns: &[u32], trace: Option<(&SimulationTrace<T>, T)>) -> Result<Vec<InfiniteCqCheck>, SimError> {
    let f = cubic_advection();
    let ux = Expr::var(Var::u(1));
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        if n == 0 {
            return Err(SimError::Config("n must be at least 1".into()));
        }
        let h = ux.pow(n);
        let integrand = conservation_integrand(std::slice::from_ref(&f), &h);
        let big_f = ux.pow(n + 2).scale(&Rational::new(3 * n as i64, n as i64 + 2));
        let symbolic_ok = (&integrand - &big_f.total_x_derivative()).is_zero();
        let drift = match trace {
            Some((tr, tb)) => monitor_cq(tr, &h)?.drift_before(tb).to_f64(),
            None => None,
        };
        out.push(InfiniteCqCheck { n, antiderivative: big_f.to_string(), symbolic_ok, drift });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::Component;
    use crate::symbolic::parse;
    use proptest::prelude::*;

    fn gaussian_grid() -> Grid1D {
        Grid1D::new(-15.0, 15.0, 1024, false).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(matches!(Grid1D::new(0.0, 1.0, 15, true), Err(SimError::GridTooSmall(15))));
        assert!(matches!(Grid1D::new(1.0, 1.0, 32, true), Err(SimError::EmptyInterval(..))));
        let g = Grid1D::new(0.0, 1.0, 17, false).unwrap();
        assert!((g.spacing() - 1.0 / 16.0).abs() < 1e-15);
        assert_eq!(g.points().len(), 17);
        assert!((g.points()[16] - 1.0).abs() < 1e-15);
        let p = Grid1D::periodic_2pi(16).unwrap();
        assert!((p.points()[15] + p.spacing() - std::f64::consts::TAU).abs() < 1e-12);
    }

    #[test]
    fn fornberg_reproduces_textbook_stencils() {
        let xs = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let d1 = fd_weights(0.0, &xs, 1);
        let want = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
        assert!(d1.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-14));
        let d2 = fd_weights(0.0, &xs, 2);
        let want = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];
        assert!(d2.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-13));
        // one-sided first derivative
        let fwd = fd_weights(0.0, &[0.0, 1.0, 2.0], 1);
        assert!(fwd.iter().zip([-1.5, 2.0, -0.5]).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn periodic_derivatives_converge_at_fourth_order() {
        let err = |n: usize, m: usize| {
            let g = Grid1D::periodic_2pi(n).unwrap();
            let d = Differentiator::<f64>::new(&g, 4).unwrap();
            let u: Vec<f64> = g.sample(|x| (2.0 * x).sin());
            let exact: Vec<f64> = g.sample(|x| 2f64.powi(m as i32) * (2.0 * x + m as f64 * std::f64::consts::FRAC_PI_2).sin());
            d.derivative(m, &u).iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        for m in 1..=4 {
            let ratio = err(64, m) / err(128, m);
            assert!((12.0..20.0).contains(&ratio), "order {m}: ratio {ratio}");
        }
    }

    #[test]
    fn bounded_derivatives_match_analytic_jets() {
        let g = Grid1D::new(-8.0, 8.0, 801, false).unwrap();
        let c = MixtureCurve::single(1.3, 0.4, 1.1);
        let u: Vec<f64> = g.sample_curve(&c);
        let d = Differentiator::<f64>::new(&g, 3).unwrap();
        for m in 1..=3 {
            let num = d.derivative(m, &u);
            for (x, v) in g.points().iter().zip(&num) {
                let exact = c.jet(*x, 3)[m];
                assert!((v - exact).abs() < 1e-5, "order {m} at {x}: {v} vs {exact}");
            }
        }
    }

    #[test]
    fn zero_pde_keeps_every_snapshot() {
        let g = Grid1D::periodic_2pi(32).unwrap();
        let u0: Vec<f64> = g.sample(|x| x.sin() + 0.3 * (3.0 * x).cos());
        let cfg = SimConfig { t_end: 0.1, dt: 0.01, snapshot_every: 2, ..Default::default() };
        let tr = evolve(&[Expr::zero()], &[u0.clone()], &g, &cfg).unwrap();
        assert_eq!(tr.times.len(), 6);
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
        assert!(tr.snapshots.iter().all(|s| s[0] == u0));
        let h = monitor_cq(&tr, &parse("u_x^2*u + u_xxx").unwrap()).unwrap();
        assert!(h.values.iter().all(|v| *v == h.values[0]));
    }

    #[test]
    fn advection_translates_the_profile() {
        let g = Grid1D::new(-20.0, 20.0, 801, false).unwrap();
        let c = MixtureCurve::single(1.0, 0.0, 1.5);
        let cfg = SimConfig { t_end: 2.0, dt: 0.01, snapshot_every: 50, ..Default::default() };
        let tr = evolve(&[parse("u_x").unwrap()], &[g.sample_curve::<f64>(&c)], &g, &cfg).unwrap();
        for (t, snap) in tr.times.iter().zip(&tr.snapshots) {
            for (x, v) in g.points().iter().zip(&snap[0]) {
                assert!((v - c.value::<f64>(x + t)).abs() < 1e-3);
            }
        }
    }

    fn advection_error(n: usize, dt: f64, reference_dt: Option<f64>) -> f64 {
        let g = Grid1D::periodic_2pi(n).unwrap();
        let u0: Vec<f64> = g.sample(|x| x.sin().exp());
        let run = |dt: f64| {
            let cfg = SimConfig { t_end: 1.0, dt, snapshot_every: 1_000_000, ..Default::default() };
            evolve(&[parse("u_x").unwrap()], &[u0.clone()], &g, &cfg).unwrap().snapshots.pop().unwrap().remove(0)
        };
        let u = run(dt);
        let exact: Vec<f64> = match reference_dt {
            Some(r) => run(r),
            None => g.sample(|x| (x + 1.0).sin().exp()),
        };
        u.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn space_and_time_convergence_orders() {
        let space = advection_error(32, 1e-4, None) / advection_error(64, 1e-4, None);
        assert!((12.0..20.0).contains(&space), "space ratio {space}");
        let time = advection_error(64, 0.04, Some(0.001)) / advection_error(64, 0.02, Some(0.001));
        assert!((13.0..19.0).contains(&time), "time ratio {time}");
    }

    #[test]
    fn stability_check() {
        let g = Grid1D::periodic_2pi(128).unwrap();
        let u0: Vec<f64> = g.sample(f64::sin);
        let kdv = crate::presets::kdv();
        let limit = stability_limit(&[kdv.clone()], &g, std::slice::from_ref(&u0)).unwrap();
        let cfg = SimConfig { t_end: 0.1, dt: 2.0 * limit, ..Default::default() };
        assert!(matches!(evolve(&[kdv.clone()], &[u0.clone()], &g, &cfg), Err(SimError::Unstable { .. })));
        let cfg = SimConfig { check_stability: false, t_end: 2.0 * limit, ..cfg };
        assert!(evolve(&[kdv.clone()], &[u0.clone()], &g, &cfg).is_ok());
        assert_eq!(stability_limit::<f64>(&[parse("u^2").unwrap()], &g, &[u0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn blow_up_truncates_the_trace() {
        let g = Grid1D::periodic_2pi(16).unwrap();
        let cfg = SimConfig { t_end: 2.0, dt: 0.01, snapshot_every: 1, ..Default::default() };
        let tr = evolve(&[parse("u^2").unwrap()], &[vec![1.0; 16]], &g, &cfg).unwrap();
        let t = tr.blow_up.expect("u_t = u² with u0 = 1 blows up at t = 1");
        assert!(t >= 1.0 && t < 2.0);
        assert!(tr.snapshots.iter().flatten().flatten().all(|v: &f64| v.is_finite()));
        assert_eq!(tr.times.len(), tr.snapshots.len());
    }

    #[test]
    fn input_errors() {
        let g = Grid1D::periodic_2pi(32).unwrap();
        let f = cubic_advection();
        let cfg = SimConfig::default();
        assert!(matches!(evolve(&[f.clone()], &[vec![0.0; 31]], &g, &cfg), Err(SimError::Length { .. })));
        assert!(matches!(evolve(&[f.clone()], &[vec![0.0; 32], vec![0.0; 32]], &g, &cfg), Err(SimError::FieldCount { .. })));
        let bounded = Grid1D::new(0.0, 1.0, 32, false).unwrap();
        let cfg = SimConfig { filter: Some(0.3), ..SimConfig::default() };
        assert!(matches!(evolve(&[f.clone()], &[vec![0.0; 32]], &bounded, &cfg), Err(SimError::Config(_))));
        let cfg = SimConfig { dt: 0.0, ..SimConfig::default() };
        assert!(matches!(evolve(&[f], &[vec![0.0; 32]], &g, &cfg), Err(SimError::Config(_))));
    }

    #[test]
    fn kdv_conserves_mass() {
        let g = Grid1D::new(-20.0, 20.0, 256, true).unwrap();
        let u0: Vec<f64> = g.sample_curve(&MixtureCurve::single(1.0, 0.0, 1.5));
        let kdv = crate::presets::kdv();
        let cfg = SimConfig { t_end: 1.0, dt: 1e-3, snapshot_every: 50, ..Default::default() };
        let tr = evolve(&[kdv], &[u0], &g, &cfg).unwrap();
        let mass = monitor_cq(&tr, &parse("u").unwrap()).unwrap();
        assert!(mass.drift() < 1e-3, "{}", mass.drift());
        // the profile actually moved
        assert!((tr.snapshots.last().unwrap()[0][128] - tr.snapshots[0][0][128]).abs() > 1e-2);
    }

    #[test]
    fn nlse_system_conserves_mass() {
        let g = Grid1D::new(-20.0, 20.0, 256, true).unwrap();
        let u0: Vec<f64> = g.sample_curve(&MixtureCurve::single(1.0, 0.0, 1.5));
        let v0: Vec<f64> = g.sample_curve(&MixtureCurve::single(0.5, 1.0, 1.0));
        let cfg = SimConfig { t_end: 1.0, dt: 2e-3, snapshot_every: 50, ..Default::default() };
        let tr = evolve(&crate::presets::nlse_system(), &[u0, v0], &g, &cfg).unwrap();
        assert_eq!(tr.num_fields(), 2);
        assert!(tr.observables.contains_key("max|v_x|"));
        let mass = monitor_cq(&tr, &parse("u^2 + v^2").unwrap()).unwrap();
        assert!(mass.drift() < 1e-4, "{}", mass.drift());
        let not_conserved = monitor_cq(&tr, &parse("u^2").unwrap()).unwrap();
        assert!(not_conserved.drift() > 1e-2);
    }

    #[test]
    fn sine_break_time_is_one_third() {
        let g = Grid1D::periodic_2pi(256).unwrap();
        let tb = break_time(&g.sample::<f64>(f64::sin), &g).unwrap().unwrap();
        assert!((tb - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn break_time_edge_cases() {
        let g = Grid1D::new(-1.0, 1.0, 64, false).unwrap();
        assert_eq!(break_time(&g.sample::<f64>(|x| 2.0 * x - 1.0), &g).unwrap(), None);
        assert_eq!(break_time(&g.sample::<f64>(|_| 3.0), &g).unwrap(), None);
        assert!(matches!(break_time(&[0.0; 10], &g), Err(SimError::Length { .. })));
        // only positive u_x u_xx counts: t = 1/(6·1·2)
        assert_eq!(break_time_from_jets(&[1.0, -1.0], &[2.0, 5.0]), Some(1.0 / 12.0));
        assert_eq!(break_time_from_jets(&[-1.0f64], &[2.0]), None);
    }

    #[test]
    fn gaussian_break_matches_simulation() {
        let g = gaussian_grid();
        let u0: Vec<f64> = g.sample_curve(&MixtureCurve::single(1.0, 0.0, 1.5));
        let tb = break_time(&u0, &g).unwrap().unwrap();
        let cfg = SimConfig { t_end: 2.0 * tb, dt: 1e-3, snapshot_every: 10, ..Default::default() };
        let tr = evolve(&[cubic_advection()], &[u0], &g, &cfg).unwrap();
        let seen = observed_break_time(&tr, BREAK_FACTOR).unwrap().unwrap();
        assert!((seen - tb).abs() < 0.2 * tb, "analytic {tb}, observed {seen}");
        assert!(seen >= 0.5 * tb && seen <= 2.0 * tb);
    }

    // along characteristics w = u_x is constant and w_x = w0'/(1 - 6 w0 w0' t)
    #[test]
    fn curvature_follows_characteristics() {
        let g = gaussian_grid();
        let c = MixtureCurve { components: vec![Component { amplitude: 1.0, mean: 0.0, width: 1.5 }, Component { amplitude: 0.6, mean: 2.0, width: 0.8 }] };
        let u0: Vec<f64> = g.sample_curve(&c);
        let tb = break_time(&u0, &g).unwrap().unwrap();
        let d = Differentiator::<f64>::new(&g, 2).unwrap();
        let (w, wx) = (d.derivative(1, &u0), d.derivative(2, &u0));
        let cfg = SimConfig { t_end: 0.5 * tb, dt: 5e-4, snapshot_every: 50, ..Default::default() };
        let tr = evolve(&[cubic_advection()], &[u0], &g, &cfg).unwrap();
        let sim = tr.observable("max|u_xx|").unwrap();
        for (t, s) in tr.times.iter().zip(sim) {
            let pred = w.iter().zip(&wx).map(|(a, b)| (b / (1.0 - 6.0 * a * b * t)).abs()).fold(0.0, f64::max);
            assert!((s - pred).abs() < 0.01 * pred, "t={t}: {s} vs {pred}");
        }
    }

    #[test]
    fn pre_break_cqs_drift_little_and_others_drift_a_lot() {
        let g = gaussian_grid();
        let c = MixtureCurve { components: vec![Component { amplitude: 1.0, mean: 0.0, width: 1.5 }, Component { amplitude: -0.6, mean: 2.0, width: 1.2 }] };
        let u0: Vec<f64> = g.sample_curve(&c);
        let tb = break_time(&u0, &g).unwrap().unwrap();
        let cfg = SimConfig { t_end: tb, dt: 5e-4, snapshot_every: 10, ..Default::default() };
        let tr = evolve(&[cubic_advection()], &[u0], &g, &cfg).unwrap();
        for h in ["u*u_xx", "u_x^2", "u_x^3"] {
            let d = monitor_cq(&tr, &parse(h).unwrap()).unwrap().drift_before(tb);
            assert!(d < 5e-3, "{h}: {d}");
        }
        let d = monitor_cq(&tr, &parse("u_xx^2").unwrap()).unwrap().drift_before(tb);
        assert!(d > 0.05, "u_xx^2: {d}");
    }

    #[test]
    fn power_law_fits() {
        let times: Vec<f64> = (1..=200).map(|k| k as f64 * 0.1).collect();
        let inv: Vec<f64> = times.iter().map(|t| 1.0 / t).collect();
        assert!((fit_power_law(&times, &inv, 2.0).unwrap() + 1.0).abs() < 0.01);
        let flat = vec![0.7; times.len()];
        assert!(fit_power_law(&times, &flat, 2.0).unwrap().abs() < 0.01);
        assert!(matches!(fit_power_law(&times, &inv, 19.95), Err(SimError::Window { .. })));
    }

    #[test]
    fn decay_fit_needs_ten_break_times() {
        let g = Grid1D::periodic_2pi(64).unwrap();
        let cfg = SimConfig { t_end: 1.0, dt: 1e-2, snapshot_every: 5, ..Default::default() };
        let tr = evolve(&[cubic_advection()], &[g.sample(f64::sin)], &g, &cfg).unwrap();
        assert!(matches!(decay_exponent(&tr, 1.0 / 3.0), Err(SimError::Window { .. })));
        let r = break_report(&tr).unwrap();
        assert!(r.decay_exponent.is_none() && r.t_b_analytic.is_some());
    }

    #[test]
    fn synthetic_decay_trace() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.05 + 0.01).collect();
        let mut observables = BTreeMap::new();
        observables.insert("max|u|".to_string(), times.iter().map(|t| 1.0 / t).collect());
        let tr = SimulationTrace { grid: Grid1D::periodic_2pi(16).unwrap(), system: vec![], times, snapshots: vec![], observables, blow_up: None };
        assert!((decay_exponent(&tr, 0.4).unwrap() + 1.0).abs() < 0.01);
    }

    #[test]
    fn u_x_powers_are_conserved() {
        let checks = verify_infinite_cqs::<f64>(&[1, 2, 3, 4, 5], None).unwrap();
        assert!(checks.iter().all(|c| c.symbolic_ok && c.drift.is_none()));
        assert_eq!(checks[1].antiderivative, parse("3/2*u_x^4").unwrap().to_string());
        assert!(verify_infinite_cqs::<f64>(&[0], None).is_err());

        let g = gaussian_grid();
        let u0: Vec<f64> = g.sample_curve(&MixtureCurve::single(1.0, 0.0, 1.5));
        let tb = break_time(&u0, &g).unwrap().unwrap();
        let cfg = SimConfig { t_end: tb, dt: 1e-3, snapshot_every: 10, ..Default::default() };
        let tr = evolve(&[cubic_advection()], &[u0], &g, &cfg).unwrap();
        for c in verify_infinite_cqs(&[1, 2, 3, 4, 5], Some((&tr, tb))).unwrap() {
            assert!(c.drift.unwrap() < 0.01, "n = {}: {:?}", c.n, c.drift);
        }
    }

    #[test]
    fn drift_scale_handles_vanishing_totals() {
        let s: CqSeries<f64> = CqSeries { times: vec![0.0, 1.0], values: vec![1e-17, 1e-3], magnitude: 2.0 };
        assert_eq!(s.scale(), 2.0);
        assert!((s.drift() - 5e-4).abs() < 1e-12);
        let s: CqSeries<f64> = CqSeries { times: vec![0.0, 1.0], values: vec![-4.0, -4.4], magnitude: 6.0 };
        assert!((s.drift() - 0.1).abs() < 1e-12);
        let s: CqSeries<f64> = CqSeries { times: vec![0.0, 1.0], values: vec![0.0, 0.0], magnitude: 0.0 };
        assert_eq!(s.scale(), DRIFT_FLOOR);
    }

    #[test]
    fn csv_and_json_export() {
        let g = Grid1D::periodic_2pi(16).unwrap();
        let cfg = SimConfig { t_end: 0.02, dt: 0.01, snapshot_every: 1, ..Default::default() };
        let tr = evolve(&[cubic_advection()], &[g.sample::<f64>(f64::sin)], &g, &cfg).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("t,x,u"));
        assert_eq!(text.lines().count(), 1 + 3 * 16);
        let j = tr.observables_json();
        assert_eq!(j["times"].as_array().unwrap().len(), 3);
        assert_eq!(j["observables"]["max|u|"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn filter_removes_high_modes() {
        let g = Grid1D::periodic_2pi(32).unwrap();
        let mut f: Vec<f64> = g.sample(|x| x.sin() + (14.0 * x).cos());
        spectral_filter(&mut f, 1.0 / 3.0, &mut FftPlanner::new());
        let want: Vec<f64> = g.sample(f64::sin);
        assert!(f.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn single_precision_evolution() {
        let g = Grid1D::periodic_2pi(64).unwrap();
        let cfg = SimConfig { t_end: 0.2, dt: 1e-2, snapshot_every: 5, ..Default::default() };
        let tr = evolve::<f32>(&[cubic_advection()], &[g.sample(f64::sin)], &g, &cfg).unwrap();
        let h = monitor_cq(&tr, &parse("u_x^2").unwrap()).unwrap();
        assert!(h.drift() < 1e-4);
    }

    proptest! {
        #[test]
        fn fd_weights_are_exact_on_polynomials(m in 1usize..4, shift in 0usize..4) {
            let xs: Vec<f64> = (0..m + FD_ACCURACY).map(|j| j as f64).collect();
            let x0 = shift.min(xs.len() - 1) as f64;
            let w = fd_weights(x0, &xs, m);
            // derivative of x^m is m! everywhere; of x^(m-1) is zero
            let fact: f64 = (1..=m).map(|k| k as f64).product();
            let dm: f64 = w.iter().zip(&xs).map(|(wi, x)| wi * x.powi(m as i32)).sum();
            let dl: f64 = w.iter().zip(&xs).map(|(wi, x)| wi * x.powi(m as i32 - 1)).sum();
            prop_assert!((dm - fact).abs() < 1e-8 * fact);
            prop_assert!(dl.abs() < 1e-8);
        }
    }
}
