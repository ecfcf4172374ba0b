//! Length, Dirichlet and bending energies with periodic rectangle-rule
//! quadrature, plus the static inequalities relating them.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::grid::{dx, lane_dot, lane_dot_w, lane_sum, GeometryCache};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// `L = ∫ |f_x| dx`
    pub length: f64,
    /// `D = ½ ∫ |f_x|² dx`
    pub dirichlet: f64,
    /// `E = ½ ∫ |κ|² ds`
    pub bending: f64,
    /// `E + λL`
    pub e_lambda: f64,
    /// `E + λD`
    pub d_lambda: f64,
}

/// Slack tolerance for continuum inequalities evaluated on a grid of spacing
/// `h`.
pub fn tol_bound(h: f64) -> f64 {
    1e-8 + 10.0 * h * h
}

pub fn energies(cache: &GeometryCache, lambda: f64) -> EnergyBreakdown {
    let h = cache.grid().h();
    let l = cache.fx_norm.values();
    let length = h * lane_sum(l);
    let dirichlet = 0.5 * h * lane_dot(l, l);
    let bending = 0.5 * h * cache.kappa.weighted_sq_sum(l);
    EnergyBreakdown {
        length,
        dirichlet,
        bending,
        e_lambda: bending + lambda * length,
        d_lambda: bending + lambda * dirichlet,
    }
}

/// `∫ |v|² ds` for a vector field sampled on the cache's grid.
pub(crate) fn l2_sq_ds(cache: &GeometryCache, v: &crate::grid::VectorField) -> f64 {
    cache.grid().h() * v.weighted_sq_sum(cache.fx_norm.values())
}

pub(crate) fn l2_sq_ds_scalar(cache: &GeometryCache, u: &crate::grid::ScalarField) -> f64 {
    let u = u.values();
    cache.grid().h() * lane_dot_w(u, u, cache.fx_norm.values())
}

/// `‖κ‖_{L²(ds)}`.
pub fn kappa_l2(cache: &GeometryCache) -> f64 {
    l2_sq_ds(cache, &cache.kappa).sqrt()
}

/// `√L ‖κ‖ - 2π`; nonnegative for closed curves.
pub fn poincare_slack(cache: &GeometryCache) -> f64 {
    let length = cache.grid().h() * lane_sum(cache.fx_norm.values());
    length.sqrt() * kappa_l2(cache) - TAU
}

/// `√(2π) √(2D) - L`; zero exactly for constant `|f_x|`.
pub fn length_domination_slack(e: &EnergyBreakdown) -> f64 {
    (TAU).sqrt() * (2.0 * e.dirichlet).sqrt() - e.length
}

/// `∫ |(|f_x|)_x| dx + (1/2π) ∫ |f_x| dx - max |f_x|`.
pub fn sup_fx_embedding_slack(cache: &GeometryCache) -> f64 {
    let h = cache.grid().h();
    let d = dx(&cache.fx_norm);
    let variation = h * d.values().iter().map(|v| v.abs()).sum::<f64>();
    let mean = h * cache.fx_norm.values().iter().sum::<f64>() / (2.0 * PI);
    variation + mean - cache.fx_norm.max()
}
