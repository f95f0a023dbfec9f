//! Standard CQ bases, PDE bases and benchmark equations.

use crate::curves::EnsembleConfig;
use crate::symbolic::parse;
use crate::Expr;

fn exprs(src: &[&str]) -> Vec<Expr> {
    src.iter().map(|s| parse(s).expect("preset expression parses")).collect()
}

/// CQ basis used for Burgers, KdV and the coefficient search (13 terms).
pub const BURGERS_KDV_CQ: [&str; 13] = [
    "u",
    "u^2",
    "u^2*u_xx",
    "u^3",
    "u_x^2",
    "u_x^2*u",
    "u_x^3",
    "u_xx^2",
    "u_xx^2*u",
    "u_xx^2*u_x",
    "u_xx^3",
    "u_xx*u",
    "u_xx*u_x*u",
];

/// Two-field CQ basis for the nonlinear Schrödinger system (12 terms).
pub const NLSE_CQ: [&str; 12] =
    ["u", "u^3", "u_x^3", "u_xx^2", "u_xx^3", "v^2", "u_x^2", "v_x^2", "u^4", "v^4", "u^2*v^2", "u^2"];

/// All monomials of degree 1..=3 in `u, u_x, u_xx, u_xxx` (34 terms).
pub const CUBIC34_PDE: [&str; 34] = [
    "u",
    "u^2",
    "u^2*u_x",
    "u^2*u_xx",
    "u^2*u_xxx",
    "u^3",
    "u_x",
    "u_x^2",
    "u_x^2*u",
    "u_x^2*u_xx",
    "u_x^2*u_xxx",
    "u_x^3",
    "u_x*u",
    "u_xx",
    "u_xx^2",
    "u_xx^2*u",
    "u_xx^2*u_x",
    "u_xx^2*u_xxx",
    "u_xx^3",
    "u_xx*u",
    "u_xx*u_x",
    "u_xx*u_x*u",
    "u_xxx",
    "u_xxx^2",
    "u_xxx^2*u",
    "u_xxx^2*u_x",
    "u_xxx^2*u_xx",
    "u_xxx^3",
    "u_xxx*u",
    "u_xxx*u_x",
    "u_xxx*u_x*u",
    "u_xxx*u_xx",
    "u_xxx*u_xx*u",
    "u_xxx*u_xx*u_x",
];

pub fn burgers_kdv_cq_basis() -> Vec<Expr> {
    exprs(&BURGERS_KDV_CQ)
}

pub fn nlse_cq_basis() -> Vec<Expr> {
    exprs(&NLSE_CQ)
}

pub fn cubic34_pde_basis() -> Vec<Expr> {
    exprs(&CUBIC34_PDE)
}

/// The 34-term basis with `u_x` removed.
pub fn cubic33_pde_basis() -> Vec<Expr> {
    let ux = parse("u_x").unwrap();
    cubic34_pde_basis().into_iter().filter(|e| *e != ux).collect()
}

/// `[u_xxx, u u_x, u_xx]`: KdV plus a diffusion term.
pub fn kdv_diffusion_pde_basis() -> Vec<Expr> {
    exprs(&["u_xxx", "u*u_x", "u_xx"])
}

pub fn burgers() -> Expr {
    parse("u*u_x").unwrap()
}

pub fn kdv() -> Expr {
    parse("u_xxx - 6*u*u_x").unwrap()
}

/// `ψ = u + i v` form of `i ψ_t + ½ψ_xx - |ψ|²ψ = 0`.
pub fn nlse_system() -> Vec<Expr> {
    vec![parse("-1/2*v_xx + v*(u^2 + v^2)").unwrap(), parse("1/2*u_xx - u*(u^2 + v^2)").unwrap()]
}

/// `(u_x + a² u_xxx)^3` at `a = 1`.
pub fn cubic_family() -> Expr {
    parse("(u_x + u_xxx)^3").unwrap()
}

/// Two fields, jets to order 4, amplitudes in `[-1, 1]`. With the default
/// `[-5, 5]` the quartic densities outweigh the quadratic ones by ~10⁴ and
/// a spurious direction drops below the threshold.
pub fn nlse_ensemble_config() -> EnsembleConfig {
    EnsembleConfig { fields: 2, max_order: 4, amplitude_range: (-1.0, 1.0), ..Default::default() }
}

/// Named CQ basis lookup.
pub fn cq_basis(name: &str) -> Option<Vec<Expr>> {
    match name {
        "burgers-kdv" => Some(burgers_kdv_cq_basis()),
        "nlse" => Some(nlse_cq_basis()),
        _ => None,
    }
}

/// Named PDE basis lookup.
pub fn pde_basis(name: &str) -> Option<Vec<Expr>> {
    match name {
        "cubic34" => Some(cubic34_pde_basis()),
        "cubic33" => Some(cubic33_pde_basis()),
        "kdv-diffusion" => Some(kdv_diffusion_pde_basis()),
        _ => None,
    }
}

/// Named equation or system lookup.
pub fn system(name: &str) -> Option<Vec<Expr>> {
    match name {
        "burgers" => Some(vec![burgers()]),
        "kdv" => Some(vec![kdv()]),
        "nlse" | "nlse-preset" => Some(nlse_system()),
        "cubic-family" => Some(vec![cubic_family()]),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::{Powers, Var};
    use std::collections::HashSet;

    #[test]
    fn cubic34_is_every_monomial_up_to_degree_three() {
        let listed: HashSet<String> = cubic34_pde_basis().iter().map(|e| e.to_string()).collect();
        assert_eq!(listed.len(), 34);
        let mut generated = HashSet::new();
        for a in 0..=3u32 {
            for b in 0..=3 - a {
                for c in 0..=3 - a - b {
                    for d in 0..=3 - a - b - c {
                        if a + b + c + d == 0 {
                            continue;
                        }
                        let p = Powers::from_pairs([(Var::u(0), a), (Var::u(1), b), (Var::u(2), c), (Var::u(3), d)]);
                        generated.insert(Expr::monomial(1.into(), p).to_string());
                    }
                }
            }
        }
        assert_eq!(listed, generated);
        assert_eq!(cubic33_pde_basis().len(), 33);
    }

    #[test]
    fn bases_are_distinct() {
        for basis in [burgers_kdv_cq_basis(), nlse_cq_basis()] {
            let set: HashSet<String> = basis.iter().map(|e| e.to_string()).collect();
            assert_eq!(set.len(), basis.len());
        }
    }
}
