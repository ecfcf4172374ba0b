//! Per-step diagnostics, the identity residuals and refinement studies.

pub mod identities;
pub mod study;

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::energy::{kappa_l2, l2_sq_ds, l2_sq_ds_scalar, tol_bound, EnergyBreakdown};
use crate::flow::{velocity_into, FlowVariant};
use crate::grid::{kappa_tangential_residual, GeometryCache, VectorField};

pub use identities::{
    dissipation_residual, dissipation_residual_for, fx_pde_residual, lemform_residuals,
    nablaw_residual, phi_pde_residual, LemformResiduals, VelocitySource, WindowResiduals,
};
pub use study::{convergence_study, CheckName, ResidualReport};

/// Column names of the diagnostics CSV, in [`DiagnosticsRecord::values`]
/// order.
pub const CSV_HEADER: [&str; 24] = [
    "t",
    "dt",
    "L",
    "D",
    "E",
    "E_lambda",
    "D_lambda",
    "kappa_l2",
    "nk1",
    "nk2",
    "nk3",
    "phi_l2",
    "v_l2",
    "diss_res",
    "cum_diss",
    "min_fx",
    "max_fx",
    "mesh_ratio",
    "slack_poincare",
    "slack_length",
    "slack_kappa",
    "slack_dirichlet",
    "slack_cum",
    "kappa_tan_res",
];

/// Slacks of the uniform bounds; each is `bound - value` and should stay
/// above `-tol_bound(h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSlacks {
    /// `√L ‖κ‖ - 2π`
    pub poincare: f64,
    /// `2√(π E₀/λ) - L` (d-lambda) or `E₀/λ - L` (e-lambda)
    pub length_cap: f64,
    /// `2E₀ - ‖κ‖²`
    pub kappa_cap: f64,
    /// `E₀/λ - D` (d-lambda only; NaN otherwise)
    pub dirichlet_cap: f64,
    /// `E₀ - ∫₀ᵗ ∫ (|V|² + φ²) ds dt'`
    pub cumulative_cap: f64,
}

/// One timeline row, describing the state reached by an accepted step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub dt: f64,
    pub energies: EnergyBreakdown,
    pub kappa_l2: f64,
    /// `‖∇_s^m κ‖_{L²}` for `m = 1, 2, 3`.
    pub nabla_k_l2: [f64; 3],
    pub phi_l2: f64,
    pub v_l2: f64,
    pub dissipation_residual: f64,
    pub cum_dissipation: f64,
    pub min_fx: f64,
    pub max_fx: f64,
    pub mesh_ratio: f64,
    pub bound_slacks: BoundSlacks,
    pub kappa_tangential_residual: f64,
}

impl DiagnosticsRecord {
    pub fn values(&self) -> [f64; 24] {
        let e = &self.energies;
        let s = &self.bound_slacks;
        [
            self.t,
            self.dt,
            e.length,
            e.dirichlet,
            e.bending,
            e.e_lambda,
            e.d_lambda,
            self.kappa_l2,
            self.nabla_k_l2[0],
            self.nabla_k_l2[1],
            self.nabla_k_l2[2],
            self.phi_l2,
            self.v_l2,
            self.dissipation_residual,
            self.cum_dissipation,
            self.min_fx,
            self.max_fx,
            self.mesh_ratio,
            s.poincare,
            s.length_cap,
            s.kappa_cap,
            s.dirichlet_cap,
            s.cumulative_cap,
            self.kappa_tangential_residual,
        ]
    }

    pub fn from_values(v: &[f64]) -> Option<Self> {
        if v.len() != CSV_HEADER.len() {
            return None;
        }
        Some(DiagnosticsRecord {
            t: v[0],
            dt: v[1],
            energies: EnergyBreakdown {
                length: v[2],
                dirichlet: v[3],
                bending: v[4],
                e_lambda: v[5],
                d_lambda: v[6],
            },
            kappa_l2: v[7],
            nabla_k_l2: [v[8], v[9], v[10]],
            phi_l2: v[11],
            v_l2: v[12],
            dissipation_residual: v[13],
            cum_dissipation: v[14],
            min_fx: v[15],
            max_fx: v[16],
            mesh_ratio: v[17],
            bound_slacks: BoundSlacks {
                poincare: v[18],
                length_cap: v[19],
                kappa_cap: v[20],
                dirichlet_cap: v[21],
                cumulative_cap: v[22],
            },
            kappa_tangential_residual: v[23],
        })
    }
}

/// Aggregates over every accepted step of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    /// Energy dissipated by the flow, evaluated on the initial curve.
    pub initial_energy: f64,
    pub tol_mono: f64,
    pub tol_bound: f64,
    /// Largest one-step energy increase (negative if the energy always
    /// decreased).
    pub max_energy_increase: f64,
    pub monotonicity_violations: usize,
    pub max_dissipation_residual: f64,
    pub min_slacks: BoundSlacks,
    /// Largest `cum_dissipation - (E₀ - E(t))`.
    pub max_balance_excess: f64,
    pub min_fx: f64,
    pub initial_mesh_ratio: f64,
    pub max_mesh_ratio: f64,
    pub final_mesh_ratio: f64,
    pub max_kappa_l2: f64,
    /// Over the recorded steps only; NaN once any norm was not finite.
    pub max_nabla_k_l2: [f64; 3],
    pub cum_dissipation: f64,
}

impl RunSummary {
    /// Smallest of all bound slacks that apply to the variant.
    pub fn min_slack(&self) -> f64 {
        let s = &self.min_slacks;
        [
            s.poincare,
            s.length_cap,
            s.kappa_cap,
            s.dirichlet_cap,
            s.cumulative_cap,
        ]
        .into_iter()
        .filter(|v| !v.is_nan())
        .fold(f64::INFINITY, f64::min)
    }

    pub fn all_finite(&self) -> bool {
        self.max_kappa_l2.is_finite() && self.max_nabla_k_l2.iter().all(|v| v.is_finite())
    }
}

/// `∫ |V|² ds + ∫ φ² ds` of the active flow (`φ = 0` for e-lambda).
pub(crate) fn dissipation_rate(
    cache: &GeometryCache,
    variant: FlowVariant,
    scratch: &mut VectorField,
) -> (f64, f64) {
    match variant {
        FlowVariant::DLambda => (l2_sq_ds(cache, &cache.v), l2_sq_ds_scalar(cache, &cache.phi)),
        FlowVariant::ELambda => {
            velocity_into(cache, variant, scratch);
            (l2_sq_ds(cache, scratch), 0.0)
        }
    }
}

/// Streaming per-step checker.
///
/// Every step updates the summary from quantities that cost a few
/// reductions; full [`DiagnosticsRecord`]s are only assembled on request.
pub struct Monitor {
    lambda: f64,
    variant: FlowVariant,
    energy0: f64,
    tol_bound: f64,
    cum: f64,
    /// `(∫|V|² ds, ∫φ² ds)` of the latest state.
    rate: (f64, f64),
    scratch: VectorField,
    summary: RunSummary,
}

impl Monitor {
    pub fn new(
        cache0: &GeometryCache,
        energy0: &EnergyBreakdown,
        lambda: f64,
        variant: FlowVariant,
    ) -> Self {
        let e0 = variant.energy(energy0);
        let h = cache0.grid().h();
        let ratio = cache0.fx_norm.max() / cache0.fx_norm.min();
        let inf = f64::INFINITY;
        let mut scratch = VectorField::zeros(cache0.grid(), cache0.tau.dim());
        let rate = dissipation_rate(cache0, variant, &mut scratch);
        Monitor {
            lambda,
            variant,
            energy0: e0,
            tol_bound: tol_bound(h),
            cum: 0.0,
            rate,
            scratch,
            summary: RunSummary {
                steps: 0,
                initial_energy: e0,
                tol_mono: 1e-10 * e0,
                tol_bound: tol_bound(h),
                max_energy_increase: f64::NEG_INFINITY,
                monotonicity_violations: 0,
                max_dissipation_residual: 0.0,
                min_slacks: BoundSlacks {
                    poincare: inf,
                    length_cap: inf,
                    kappa_cap: inf,
                    dirichlet_cap: if variant == FlowVariant::DLambda { inf } else { f64::NAN },
                    cumulative_cap: inf,
                },
                max_balance_excess: f64::NEG_INFINITY,
                min_fx: cache0.fx_norm.min(),
                initial_mesh_ratio: ratio,
                max_mesh_ratio: ratio,
                final_mesh_ratio: ratio,
                max_kappa_l2: kappa_l2(cache0),
                max_nabla_k_l2: [0.0; 3],
                cum_dissipation: 0.0,
            },
        }
    }

    /// Slack tolerance used for the bound checks.
    pub fn tol_bound(&self) -> f64 {
        self.tol_bound
    }

    /// Accounts for one accepted step of size `dt` ending in the state
    /// described by `next`. With `full`, also returns the complete record;
    /// `next` must then carry `∇_s^m κ` up to `m = 3`.
    pub fn observe(
        &mut self,
        prev_energy: &EnergyBreakdown,
        next: &GeometryCache,
        next_energy: &EnergyBreakdown,
        t: f64,
        dt: f64,
        full: bool,
    ) -> Option<DiagnosticsRecord> {
        let rate = self.rate.0 + self.rate.1;
        let e_prev = self.variant.energy(prev_energy);
        let e_next = self.variant.energy(next_energy);
        let diss_res = ((e_next - e_prev) / dt + rate).abs() / e_prev.max(1.0);
        self.cum += dt * rate;
        self.rate = dissipation_rate(next, self.variant, &mut self.scratch);

        // ‖κ‖² = 2E
        let kappa = (2.0 * next_energy.bending).sqrt();
        let min_fx = next.fx_norm.min();
        let max_fx = next.fx_norm.max();
        let e0 = self.energy0;
        let lam = self.lambda;
        let poincare = next_energy.length.sqrt() * kappa - TAU;
        let slacks = match self.variant {
            FlowVariant::DLambda => BoundSlacks {
                poincare,
                length_cap: 2.0 * (PI * e0 / lam).sqrt() - next_energy.length,
                kappa_cap: 2.0 * e0 - kappa * kappa,
                dirichlet_cap: e0 / lam - next_energy.dirichlet,
                cumulative_cap: e0 - self.cum,
            },
            FlowVariant::ELambda => BoundSlacks {
                poincare,
                length_cap: e0 / lam - next_energy.length,
                kappa_cap: 2.0 * e0 - kappa * kappa,
                dirichlet_cap: f64::NAN,
                cumulative_cap: e0 - self.cum,
            },
        };
        let mesh_ratio = max_fx / min_fx;

        let s = &mut self.summary;
        s.steps += 1;
        let increase = e_next - e_prev;
        s.max_energy_increase = s.max_energy_increase.max(increase);
        if increase > s.tol_mono {
            s.monotonicity_violations += 1;
        }
        s.max_dissipation_residual = s.max_dissipation_residual.max(diss_res);
        let m = &mut s.min_slacks;
        m.poincare = m.poincare.min(slacks.poincare);
        m.length_cap = m.length_cap.min(slacks.length_cap);
        m.kappa_cap = m.kappa_cap.min(slacks.kappa_cap);
        if !m.dirichlet_cap.is_nan() {
            m.dirichlet_cap = m.dirichlet_cap.min(slacks.dirichlet_cap);
        }
        m.cumulative_cap = m.cumulative_cap.min(slacks.cumulative_cap);
        s.max_balance_excess = s.max_balance_excess.max(self.cum - (e0 - e_next));
        s.min_fx = s.min_fx.min(min_fx);
        s.max_mesh_ratio = s.max_mesh_ratio.max(mesh_ratio);
        s.final_mesh_ratio = mesh_ratio;
        s.max_kappa_l2 = s.max_kappa_l2.max(kappa);
        s.cum_dissipation = self.cum;
        if !full {
            return None;
        }

        let nk = [1, 2, 3].map(|m| {
            next.nabla_k
                .get(m - 1)
                .map_or(f64::NAN, |f| l2_sq_ds(next, f).sqrt())
        });
        for (a, b) in s.max_nabla_k_l2.iter_mut().zip(nk) {
            *a = if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) };
        }
        Some(DiagnosticsRecord {
            t,
            dt,
            energies: *next_energy,
            kappa_l2: kappa,
            nabla_k_l2: nk,
            phi_l2: self.rate.1.sqrt(),
            v_l2: self.rate.0.sqrt(),
            dissipation_residual: diss_res,
            cum_dissipation: self.cum,
            min_fx,
            max_fx,
            mesh_ratio,
            bound_slacks: slacks,
            kappa_tangential_residual: kappa_tangential_residual(next),
        })
    }

    pub fn finish(self) -> RunSummary {
        self.summary
    }
}
