//! Grid-refinement studies of the identity residuals.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CurveError, Result};
use crate::flow::{FlowVariant, Integrator, Stepper};
use crate::grid::{fxx_decomposition_residual, geometry, qlemma_residual, CurveState};
use crate::monitor::identities::{
    dissipation_residual, fx_pde_residual, lemform_residuals, nablaw_residual, phi_pde_residual,
    VelocitySource,
};
use crate::presets::{make_preset, PresetSpec};

/// Order window for residuals that converge at `O(h²)`.
pub const SECOND_ORDER_WINDOW: (f64, f64) = (1.5, 2.5);

/// Steps taken by the dissipation check at each grid.
const DISSIPATION_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CheckName {
    Qlemma,
    Nablaw,
    Fxx,
    LemformA,
    LemformC,
    LemformE,
    FxPde,
    PhiPde,
    Dissipation,
}

impl CheckName {
    pub const ALL: [CheckName; 9] = [
        CheckName::Qlemma,
        CheckName::Nablaw,
        CheckName::Fxx,
        CheckName::LemformA,
        CheckName::LemformC,
        CheckName::LemformE,
        CheckName::FxPde,
        CheckName::PhiPde,
        CheckName::Dissipation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckName::Qlemma => "qlemma",
            CheckName::Nablaw => "nablaw",
            CheckName::Fxx => "fxx",
            CheckName::LemformA => "lemform_a",
            CheckName::LemformC => "lemform_c",
            CheckName::LemformE => "lemform_e",
            CheckName::FxPde => "fx_pde",
            CheckName::PhiPde => "phi_pde",
            CheckName::Dissipation => "dissipation",
        }
    }

    /// `None` means the check passes on a strictly decreasing residual.
    pub fn order_window(self) -> Option<(f64, f64)> {
        match self {
            CheckName::Dissipation => None,
            _ => Some(SECOND_ORDER_WINDOW),
        }
    }

    fn needs_window(self) -> bool {
        matches!(
            self,
            CheckName::LemformA
                | CheckName::LemformC
                | CheckName::LemformE
                | CheckName::FxPde
                | CheckName::PhiPde
        )
    }
}

impl fmt::Display for CheckName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckName {
    type Err = CurveError;

    fn from_str(s: &str) -> Result<Self> {
        CheckName::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = CheckName::ALL.iter().map(|c| c.name()).collect();
                CurveError::config(
                    "check",
                    format!("unknown check `{s}` (known: {})", known.join(", ")),
                )
            })
    }
}

/// Outcome of a refinement study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub check: CheckName,
    pub preset: String,
    pub grids: Vec<usize>,
    pub residuals: Vec<f64>,
    /// Least-squares slope of `log(residual)` against `log(h)`.
    pub observed_order: f64,
    pub order_window: Option<(f64, f64)>,
    pub monotone: bool,
    pub passed: bool,
}

/// Least-squares slope of `ln r` over `ln h`.
pub fn fit_order(grids: &[usize], residuals: &[f64]) -> f64 {
    let xs: Vec<f64> = grids
        .iter()
        .map(|&n| (std::f64::consts::TAU / n as f64).ln())
        .collect();
    let ys: Vec<f64> = residuals.iter().map(|r| r.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Runs `check` on `preset` at each grid size and fits the observed order.
pub fn convergence_study(
    check: &str,
    preset: &PresetSpec,
    grids: &[usize],
    lambda: f64,
) -> Result<ResidualReport> {
    let check: CheckName = check.parse()?;
    if grids.len() < 3 {
        return Err(CurveError::config(
            "grids",
            format!("a refinement study needs at least 3 grids, got {}", grids.len()),
        ));
    }
    if grids.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CurveError::config("grids", "grid sizes must be strictly increasing"));
    }
    // one time step for every grid, stable on the finest
    let finest = make_preset(preset, *grids.last().expect("grids"), 2, 0)?;
    let g = geometry(&finest, lambda, 2)?;
    let dt = 0.1 * (g.fx_norm.min() * finest.h()).powi(4);

    let residuals = grids
        .iter()
        .map(|&n| {
            let curve = make_preset(preset, n, 2, 0)?;
            residual_at(check, &curve, lambda, dt)
        })
        .collect::<Result<Vec<_>>>()?;

    let observed_order = fit_order(grids, &residuals);
    let monotone = residuals.windows(2).all(|w| w[1] < w[0]);
    let finite = residuals.iter().all(|r| r.is_finite() && *r > 0.0);
    let order_window = check.order_window();
    let passed = finite
        && match order_window {
            Some((lo, hi)) => (lo..=hi).contains(&observed_order),
            None => monotone,
        };
    Ok(ResidualReport {
        check,
        preset: preset.label(),
        grids: grids.to_vec(),
        residuals,
        observed_order,
        order_window,
        monotone,
        passed,
    })
}

fn trajectory(curve: &CurveState, lambda: f64, dt: f64, steps: usize) -> Result<Vec<CurveState>> {
    let mut stepper = Stepper::new(lambda, FlowVariant::DLambda, Integrator::Rk4);
    let mut out = vec![curve.clone()];
    for k in 0..steps {
        let s = &out[k];
        let g = geometry(s, lambda, 2)?;
        let mut next = stepper.advance(s, &g, dt)?;
        next.t = (k + 1) as f64 * dt;
        out.push(next);
    }
    Ok(out)
}

fn residual_at(check: CheckName, curve: &CurveState, lambda: f64, dt: f64) -> Result<f64> {
    if check.needs_window() {
        let states = trajectory(curve, lambda, dt, 2)?;
        let window = [&states[0], &states[1], &states[2]];
        return match check {
            CheckName::FxPde => fx_pde_residual(window, lambda),
            CheckName::PhiPde => phi_pde_residual(window, lambda),
            _ => {
                let l = lemform_residuals(window, lambda, VelocitySource::Flow(FlowVariant::DLambda))?;
                Ok(match check {
                    CheckName::LemformA => l.length_element,
                    CheckName::LemformC => l.tangent,
                    _ => l.curvature,
                })
            }
        };
    }
    match check {
        CheckName::Qlemma => qlemma_residual(curve),
        CheckName::Nablaw => nablaw_residual(&geometry(curve, lambda, 2)?, lambda),
        CheckName::Fxx => fxx_decomposition_residual(curve, lambda),
        CheckName::Dissipation => {
            let states = trajectory(curve, lambda, dt, DISSIPATION_STEPS)?;
            states.windows(2).try_fold(0.0f64, |m, w| {
                Ok(m.max(dissipation_residual(&w[0], &w[1], lambda)?))
            })
        }
        _ => unreachable!("window checks handled above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::Preset;

    fn ellipse() -> PresetSpec {
        PresetSpec::new(Preset::Ellipse { a: 2.0, b: 1.0 })
    }

    #[test]
    fn fit_recovers_power_law() {
        let grids = [64, 128, 256];
        let r: Vec<f64> = grids.iter().map(|&n| 3.0 * (5.0 / n as f64).powi(2)).collect();
        assert!((fit_order(&grids, &r) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn qlemma_study_on_ellipse() {
        let rep = convergence_study("qlemma", &ellipse(), &[64, 128, 256], 0.5).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!((rep.observed_order - 2.0).abs() < 0.2);
    }

    #[test]
    fn dissipation_study_on_ellipse() {
        let rep = convergence_study("dissipation", &ellipse(), &[64, 128, 256], 0.5).unwrap();
        assert!(rep.passed && rep.monotone, "{rep:?}");
    }

    #[test]
    fn unknown_check_is_config_error() {
        let err = convergence_study("nope", &ellipse(), &[64, 128, 256], 0.5).unwrap_err();
        assert!(matches!(err, CurveError::Config { .. }));
        assert!(convergence_study("qlemma", &ellipse(), &[64, 128], 0.5).is_err());
    }
}
