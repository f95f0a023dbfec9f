//! Randomized Gaussian-mixture test curves and their derivative jets.
//!
//! Each curve is `u(x) = Σ_g A_g exp(-(x-μ_g)²/2σ_g²)`; its derivatives are
//! evaluated analytically on a uniform grid. Sampling is seeded per curve
//! (one ChaCha stream per curve index), so curve `p` is the same no matter
//! how many curves are drawn or in what order.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::symbolic::JetLayout;

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("invalid ensemble configuration: {parameter}: {reason}")]
    Config { parameter: &'static str, reason: String },
    #[error("ensemble file: {0}")]
    Io(#[from] std::io::Error),
    #[error("ensemble file header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("ensemble file is malformed: {0}")]
    Format(String),
}

/// Sampling parameters. Defaults follow the standard benchmark setup
/// (10 components, μ∈U[-3,3], σ=1.5, A∈U[-5,5], 1000 grid points), on a
/// widened x-range so that every derivative decays below
/// [`EnsembleConfig::boundary_tolerance`] at the grid ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub curves: usize,
    pub components: usize,
    pub points: usize,
    pub x_range: (f64, f64),
    pub mean_range: (f64, f64),
    pub width: f64,
    pub amplitude_range: (f64, f64),
    pub max_order: usize,
    pub fields: usize,
    pub boundary_tolerance: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            curves: 200,
            components: 10,
            points: 1000,
            x_range: (-15.0, 15.0),
            mean_range: (-3.0, 3.0),
            width: 1.5,
            amplitude_range: (-5.0, 5.0),
            max_order: 5,
            fields: 1,
            boundary_tolerance: 1e-8,
        }
    }
}

impl EnsembleConfig {
    pub fn with_max_order(mut self, max_order: usize) -> Self {
        self.max_order = max_order;
        self
    }

    pub fn with_curves(mut self, curves: usize) -> Self {
        self.curves = curves;
        self
    }

    pub fn with_fields(mut self, fields: usize) -> Self {
        self.fields = fields;
        self
    }

    pub fn layout(&self) -> JetLayout {
        JetLayout::with_max_order(self.fields, self.max_order)
    }

    pub fn validate(&self) -> Result<(), CurveError> {
        let bad = |parameter, reason: &str| Err(CurveError::Config { parameter, reason: reason.to_string() });
        if self.curves < 1 {
            return bad("curves", "need at least one curve");
        }
        if self.points < 2 {
            return bad("points", "need at least two grid points");
        }
        if self.components < 1 {
            return bad("components", "need at least one mixture component");
        }
        if self.fields < 1 {
            return bad("fields", "need at least one field");
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return bad("width", "must be strictly positive");
        }
        if !(self.x_range.0 < self.x_range.1) {
            return bad("x_range", "lower end must be below upper end");
        }
        if self.mean_range.0 > self.mean_range.1 || self.amplitude_range.0 > self.amplitude_range.1 {
            return bad("mean_range", "ranges must be ordered");
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let (a, b) = self.x_range;
        let n = self.points;
        (0..n).map(|j| a + (b - a) * j as f64 / (n - 1) as f64).collect()
    }
}

/// One Gaussian component `A exp(-(x-μ)²/2σ²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub amplitude: f64,
    pub mean: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureCurve {
    pub components: Vec<Component>,
}

impl MixtureCurve {
    pub fn single(amplitude: f64, mean: f64, width: f64) -> Self {
        Self { components: vec![Component { amplitude, mean, width }] }
    }

    /// `(u, u_x, ..., u_{max_order x})` at `x`; sum of component jets.
    pub fn jet<T: Real>(&self, x: T, max_order: usize) -> Vec<T> {
        let mut out = vec![T::zero(); max_order + 1];
        for c in &self.components {
            let j = gaussian_jet(T::lit(c.amplitude), T::lit(c.mean), T::lit(c.width), x, max_order);
            for (o, v) in out.iter_mut().zip(j) {
                *o = *o + v;
            }
        }
        out
    }

    pub fn value<T: Real>(&self, x: T) -> T {
        self.jet(x, 0)[0]
    }
}

/// Derivatives `0..=max_order` of `A exp(-(x-μ)²/2σ²)` via
/// `d⁽ⁿ⁺¹⁾ = -((x-μ)/σ²) d⁽ⁿ⁾ - (n/σ²) d⁽ⁿ⁻¹⁾`.
pub fn gaussian_jet<T: Real>(amplitude: T, mean: T, width: T, x: T, max_order: usize) -> Vec<T> {
    let s2 = width * width;
    let z = x - mean;
    let mut d = Vec::with_capacity(max_order + 1);
    d.push(amplitude * (-(z * z) / (T::lit(2.0) * s2)).exp());
    if max_order >= 1 {
        d.push(-(z / s2) * d[0]);
    }
    for n in 1..max_order {
        let next = -(z / s2) * d[n] - (T::from_usize(n).unwrap() / s2) * d[n - 1];
        d.push(next);
    }
    d
}

/// `P` curves per field with their jets on a fixed grid.
///
/// Jets are stored flat: curve-major, then grid point, then the
/// [`JetLayout`] of `fields × (max_order+1)` derivative values.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveEnsemble<T> {
    pub config: EnsembleConfig,
    pub seed: u64,
    pub grid: Vec<T>,
    pub curves: Vec<Vec<MixtureCurve>>,
    jets: Vec<T>,
}

impl<T: Real> CurveEnsemble<T> {
    pub fn sample(config: EnsembleConfig, seed: u64) -> Result<Self, CurveError> {
        config.validate()?;
        let curves: Vec<Vec<MixtureCurve>> = (0..config.curves).map(|p| draw_curve(&config, seed, p)).collect();
        Self::from_curves(config, seed, curves)
    }

    /// Builds an ensemble from explicit curves (one `MixtureCurve` per field
    /// per curve), evaluating jets and checking boundary decay.
    pub fn from_curves(mut config: EnsembleConfig, seed: u64, curves: Vec<Vec<MixtureCurve>>) -> Result<Self, CurveError> {
        config.curves = curves.len();
        config.validate()?;
        if curves.iter().any(|c| c.len() != config.fields) {
            return Err(CurveError::Config { parameter: "fields", reason: "every curve needs one mixture per field".into() });
        }
        let grid64 = config.grid();
        let grid: Vec<T> = grid64.iter().map(|&x| T::lit(x)).collect();
        let layout = config.layout();
        let per_curve = config.points * layout.len();
        let jets: Vec<T> = curves
            .par_iter()
            .flat_map_iter(|fields| {
                let mut block = vec![T::zero(); per_curve];
                for (j, &x) in grid.iter().enumerate() {
                    for (f, mix) in fields.iter().enumerate() {
                        let jet = mix.jet(x, config.max_order);
                        let base = j * layout.len() + f * layout.width;
                        block[base..base + layout.width].copy_from_slice(&jet);
                    }
                }
                block
            })
            .collect();
        let ens = Self { config, seed, grid, curves, jets };
        ens.check_boundary_decay()?;
        Ok(ens)
    }

    fn check_boundary_decay(&self) -> Result<(), CurveError> {
        let tol = self.config.boundary_tolerance;
        let last = self.config.points - 1;
        for p in 0..self.num_curves() {
            for j in [0, last] {
                for (k, v) in self.jet(p, j).iter().enumerate() {
                    let v = v.to_f64().unwrap_or(f64::INFINITY);
                    if !(v.abs() < tol) {
                        let order = k % self.layout().width;
                        return Err(CurveError::Config {
                            parameter: "width",
                            reason: format!(
                                "curve {p}: derivative of order {order} is {v:.3e} at x={:.3}, above {tol:e}; \
                                 narrow the width or widen x_range",
                                self.grid[j]
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> JetLayout {
        self.config.layout()
    }

    pub fn num_curves(&self) -> usize {
        self.curves.len()
    }

    pub fn num_points(&self) -> usize {
        self.grid.len()
    }

    pub fn max_order(&self) -> usize {
        self.config.max_order
    }

    pub fn spacing(&self) -> T {
        self.grid[1] - self.grid[0]
    }

    /// Jet of curve `p` at grid point `j`.
    pub fn jet(&self, p: usize, j: usize) -> &[T] {
        let w = self.layout().len();
        let start = (p * self.num_points() + j) * w;
        &self.jets[start..start + w]
    }

    /// All jets of curve `p`, grid-point major.
    pub fn curve_jets(&self, p: usize) -> &[T] {
        let w = self.layout().len() * self.num_points();
        &self.jets[p * w..(p + 1) * w]
    }

    /// Writes seed, config and jets. Layout: magic `CQENS001`, u32 header
    /// length, JSON header, u8 scalar width (4 or 8), then the jets as
    /// little-endian floats.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), CurveError> {
        let header = EnsembleHeader { seed: self.seed, config: self.config.clone(), curves: self.curves.clone() };
        let bytes = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(bytes.len() as u32)?;
        w.write_all(&bytes)?;
        let width = std::mem::size_of::<T>() as u8;
        w.write_u8(width)?;
        for v in &self.jets {
            if width == 4 {
                w.write_f32::<LittleEndian>(v.to_f32().unwrap())?;
            } else {
                w.write_f64::<LittleEndian>(v.to_f64().unwrap())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CurveError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CurveError::Format("bad magic".into()));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let header: EnsembleHeader = serde_json::from_slice(&buf)?;
        let width = r.read_u8()?;
        if width as usize != std::mem::size_of::<T>() {
            return Err(CurveError::Format(format!("file stores {width}-byte floats")));
        }
        let n = header.config.curves * header.config.points * header.config.layout().len();
        let mut jets = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if width == 4 { r.read_f32::<LittleEndian>()? as f64 } else { r.read_f64::<LittleEndian>()? };
            jets.push(T::lit(v));
        }
        let grid = header.config.grid().into_iter().map(T::lit).collect();
        Ok(Self { config: header.config, seed: header.seed, grid, curves: header.curves, jets })
    }
}

const MAGIC: &[u8; 8] = b"CQENS001";

#[derive(Serialize, Deserialize)]
struct EnsembleHeader {
    seed: u64,
    config: EnsembleConfig,
    curves: Vec<Vec<MixtureCurve>>,
}

fn draw_curve(config: &EnsembleConfig, seed: u64, index: usize) -> Vec<MixtureCurve> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let uniform = |rng: &mut ChaCha8Rng, (a, b): (f64, f64)| if a == b { a } else { rng.random_range(a..b) };
    (0..config.fields)
        .map(|_| MixtureCurve {
            components: (0..config.components)
                .map(|_| {
                    let mean = uniform(&mut rng, config.mean_range);
                    let amplitude = uniform(&mut rng, config.amplitude_range);
                    Component { amplitude, mean, width: config.width }
                })
                .collect(),
        })
        .collect()
}
