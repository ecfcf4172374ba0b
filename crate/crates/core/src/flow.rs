//! Right-hand sides of both flows, explicit time stepping and trajectory
//! generation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::FlowConfig;
use crate::energy::{energies, EnergyBreakdown};
use crate::error::{CurveError, Result};
use crate::grid::{geometry, CurveState, GeometryCache, GridField, VectorField, EPS_REG_REL};
use crate::monitor::{identities, DiagnosticsRecord, Monitor, RunSummary, WindowResiduals};
use crate::presets::make_preset;

/// Which energy the flow descends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlowVariant {
    /// Gradient flow of `E + λD`: `f_t = V + φτ`.
    DLambda,
    /// Gradient flow of `E + λL`: `f_t = -∇_s²κ - ½|κ|²κ + λκ`.
    ELambda,
}

impl FlowVariant {
    pub fn name(self) -> &'static str {
        match self {
            FlowVariant::DLambda => "d-lambda",
            FlowVariant::ELambda => "e-lambda",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "d-lambda" | "d_lambda" | "DLambda" => Some(FlowVariant::DLambda),
            "e-lambda" | "e_lambda" | "ELambda" => Some(FlowVariant::ELambda),
            _ => None,
        }
    }

    /// The energy this variant dissipates.
    pub fn energy(self, e: &EnergyBreakdown) -> f64 {
        match self {
            FlowVariant::DLambda => e.d_lambda,
            FlowVariant::ELambda => e.e_lambda,
        }
    }
}

impl fmt::Display for FlowVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StepMode {
    FixedDt(f64),
    /// `dt = cfl · (min |f_x| · h)^4`
    AdaptiveCfl(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Integrator {
    Euler,
    Rk4,
}

impl Integrator {
    pub fn name(self) -> &'static str {
        match self {
            Integrator::Euler => "euler",
            Integrator::Rk4 => "rk4",
        }
    }
}

/// Default weight of the fourth-difference damping, see [`add_damping`].
pub const DEFAULT_DAMPING: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPolicy {
    pub mode: StepMode,
    pub dt_max: f64,
    pub integrator: Integrator,
    /// Weight `ν` of the odd-even damping term; 0 gives the bare scheme.
    pub damping: f64,
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy {
            mode: StepMode::AdaptiveCfl(0.1),
            dt_max: 1e-3,
            integrator: Integrator::Rk4,
            damping: DEFAULT_DAMPING,
        }
    }
}

impl StepPolicy {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            StepMode::FixedDt(dt) if !(dt > 0.0 && dt.is_finite()) => {
                Err(CurveError::config("step.dt", format!("dt must be positive, got {dt}")))
            }
            StepMode::AdaptiveCfl(cfl) if !(cfl > 0.0 && cfl <= 1.0) => Err(CurveError::config(
                "step.cfl",
                format!("cfl must lie in (0, 1], got {cfl}"),
            )),
            _ if !(self.dt_max > 0.0) => Err(CurveError::config(
                "dt_max",
                format!("dt_max must be positive, got {}", self.dt_max),
            )),
            _ if !(self.damping >= 0.0 && self.damping.is_finite()) => Err(CurveError::config(
                "step.damping",
                format!("damping must be finite and >= 0, got {}", self.damping),
            )),
            _ => Ok(()),
        }
    }
}

/// Velocity of the flow evaluated from a geometry cache.
#[inline(always)]
pub fn velocity_into(cache: &GeometryCache, variant: FlowVariant, out: &mut VectorField) {
    let dim = cache.tau.dim();
    let lambda = cache.lambda;
    match variant {
        FlowVariant::DLambda => {
            let phi = cache.phi.values();
            for c in 0..dim {
                let o = out.component_mut(c);
                for (((o, v), t), p) in o
                    .iter_mut()
                    .zip(cache.v.component(c))
                    .zip(cache.tau.component(c))
                    .zip(phi)
                {
                    *o = v + p * t;
                }
            }
        }
        FlowVariant::ELambda => {
            // V + λ(1 - |f_x|)κ
            let l = cache.fx_norm.values();
            for c in 0..dim {
                let k = cache.kappa.component(c);
                let v = cache.v.component(c);
                for (i, o) in out.component_mut(c).iter_mut().enumerate() {
                    *o = v[i] + lambda * (1.0 - l[i]) * k[i];
                }
            }
        }
    }
}

/// Adds `-ν (h²/4) (D₊D₋)² f / |f_x|⁴` to `out`.
///
/// Central differences never couple neighbouring nodes, so a curve whose even
/// and odd nodes lie on two different circles looks like two exact circles to
/// every operator. Around the stationary circle that zigzag grows like
/// `exp(3t / 2r⁴)`, seeded by rounding, and wrecks any run longer than a few
/// dozen time units. On the zigzag this term damps at `4ν / (h²|f_x|⁴)`;
/// on smooth curves it is `-ν (h²/4) ∂_s⁴ f` plus lower order, an `O(h²)`
/// change to the velocity.
///
/// With `ν ≤ 1/2` the extra spectral radius is at most `4νh²/(|f_x|h)⁴`,
/// which keeps RK4 and Euler stable at `cfl ≤ 1` on every grid with `N ≥ 8`.
#[inline(always)]
pub fn add_damping(points: &VectorField, inv_fx: &[f64], nu: f64, out: &mut VectorField) {
    if nu == 0.0 {
        return;
    }
    let n = points.grid().nodes();
    let h = points.grid().h();
    let scale = nu / (4.0 * h * h);
    let inv = &inv_fx[..n];
    for c in 0..points.dim() {
        let u = &points.component(c)[..n];
        let o = &mut out.component_mut(c)[..n];
        let at = |i: usize| {
            let u = |j: usize| {
                let k = i + n + j - 2;
                u[if k >= 2 * n { k - 2 * n } else if k >= n { k - n } else { k }]
            };
            u(0) - 4.0 * u(1) + 6.0 * u(2) - 4.0 * u(3) + u(4)
        };
        let weight = |i: usize| {
            let w = inv[i] * inv[i];
            scale * w * w
        };
        for i in [0, 1, n - 2, n - 1] {
            o[i] -= weight(i) * at(i);
        }
        let (a, b, m, d, e) = (&u[..n - 4], &u[1..n - 3], &u[2..n - 2], &u[3..n - 1], &u[4..]);
        let (w, o) = (&inv[2..n - 2], &mut o[2..n - 2]);
        for i in 0..n - 4 {
            let q = w[i] * w[i];
            o[i] -= scale * q * q * (a[i] - 4.0 * b[i] + 6.0 * m[i] - 4.0 * d[i] + e[i]);
        }
    }
}

/// `f_t` for the chosen flow, without the damping term the stepper adds.
pub fn rhs(curve: &CurveState, lambda: f64, variant: FlowVariant) -> Result<VectorField> {
    let cache = geometry(curve, lambda, 2)?;
    let mut out = VectorField::zeros(curve.grid(), curve.dim());
    velocity_into(&cache, variant, &mut out);
    Ok(out)
}

/// Step size for `policy` at the state described by `cache`.
pub fn stable_dt(cache: &GeometryCache, policy: &StepPolicy) -> f64 {
    match policy.mode {
        StepMode::FixedDt(dt) => dt,
        StepMode::AdaptiveCfl(cfl) => {
            let scale = cache.fx_norm.min() * cache.grid().h();
            (cfl * scale.powi(4)).min(policy.dt_max)
        }
    }
}

/// Explicit integrator with reusable stage buffers.
pub struct Stepper {
    lambda: f64,
    variant: FlowVariant,
    damping: f64,
    integrator: Integrator,
    stage_cache: Option<GeometryCache>,
    k: [Option<VectorField>; 4],
    stage: Option<CurveState>,
}

impl Stepper {
    pub fn new(lambda: f64, variant: FlowVariant, integrator: Integrator) -> Self {
        Stepper {
            lambda,
            variant,
            damping: DEFAULT_DAMPING,
            integrator,
            stage_cache: None,
            k: [None, None, None, None],
            stage: None,
        }
    }

    /// Weight of the odd-even damping; see [`add_damping`].
    pub fn with_damping(mut self, nu: f64) -> Self {
        self.damping = nu;
        self
    }

    #[inline(always)]
    fn eval(&mut self, state: &CurveState, slot: usize) -> Result<()> {
        match &mut self.stage_cache {
            Some(c) => c.update(state, self.lambda, 2)?,
            None => self.stage_cache = Some(geometry(state, self.lambda, 2)?),
        }
        let cache = self.stage_cache.as_ref().expect("stage cache");
        let out = self.k[slot]
            .get_or_insert_with(|| VectorField::zeros(state.grid(), state.dim()));
        velocity_into(cache, self.variant, out);
        add_damping(state.points(), cache.inv_fx(), self.damping, out);
        Ok(())
    }

    /// Advances `state` by `dt`. `cache` must describe `state`.
    pub fn advance(
        &mut self,
        state: &CurveState,
        cache: &GeometryCache,
        dt: f64,
    ) -> Result<CurveState> {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: the feature is present on this CPU.
            return unsafe { self.advance_avx(state, cache, dt) };
        }
        self.advance_impl(state, cache, dt)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx")]
    unsafe fn advance_avx(
        &mut self,
        state: &CurveState,
        cache: &GeometryCache,
        dt: f64,
    ) -> Result<CurveState> {
        self.advance_impl(state, cache, dt)
    }

    #[inline(always)]
    fn advance_impl(
        &mut self,
        state: &CurveState,
        cache: &GeometryCache,
        dt: f64,
    ) -> Result<CurveState> {
        let grid = state.grid();
        let dim = state.dim();
        for k in self.k.iter_mut() {
            if k.as_ref().is_some_and(|k| k.len() != grid.nodes() || k.dim() != dim) {
                *k = None;
            }
        }
        let k1 = self.k[0].get_or_insert_with(|| VectorField::zeros(grid, dim));
        velocity_into(cache, self.variant, k1);
        add_damping(state.points(), cache.inv_fx(), self.damping, k1);

        let mut next = state.clone();
        next.t = state.t + dt;
        match self.integrator {
            Integrator::Euler => {
                next.points_mut().axpy(dt, self.k[0].as_ref().expect("k1"));
            }
            Integrator::Rk4 => {
                let mut stage = self.stage.take().unwrap_or_else(|| state.clone());
                for (slot, frac) in [(1usize, 0.5), (2, 0.5), (3, 1.0)] {
                    stage.t = state.t + frac * dt;
                    let k = self.k[slot - 1].as_ref().expect("stage");
                    let (dst, src, k) = (stage.points_mut().raw_mut(), state.points().raw(), k.raw());
                    let a = frac * dt;
                    for i in 0..dst.len() {
                        dst[i] = src[i] + a * k[i];
                    }
                    if let Err(e) = self.eval(&stage, slot) {
                        self.stage = Some(stage);
                        return Err(e);
                    }
                }
                self.stage = Some(stage);
                let [k1, k2, k3, k4] = &self.k;
                let (k1, k2, k3, k4) = (
                    k1.as_ref().expect("k1").raw(),
                    k2.as_ref().expect("k2").raw(),
                    k3.as_ref().expect("k3").raw(),
                    k4.as_ref().expect("k4").raw(),
                );
                let p = next.points_mut().raw_mut();
                let (a, b) = (dt / 6.0, dt / 3.0);
                for i in 0..p.len() {
                    p[i] += a * (k1[i] + k4[i]) + b * (k2[i] + k3[i]);
                }
            }
        }
        if !next.points().is_finite() {
            return Err(CurveError::NonFinite { t: next.t });
        }
        Ok(next)
    }
}

/// One step of the flow from `curve`, validated for finiteness and
/// regularity.
pub fn step(
    curve: &CurveState,
    lambda: f64,
    variant: FlowVariant,
    policy: &StepPolicy,
) -> Result<CurveState> {
    let cache = geometry(curve, lambda, 2)?;
    let dt = stable_dt(&cache, policy);
    let next = Stepper::new(lambda, variant, policy.integrator)
        .with_damping(policy.damping)
        .advance(curve, &cache, dt)?;
    let threshold = EPS_REG_REL * cache.fx_norm.mean();
    let after = geometry(&next, lambda, 2)?;
    check_against(&after, threshold, next.t)?;
    Ok(next)
}

fn check_against(cache: &GeometryCache, threshold: f64, _t: f64) -> Result<()> {
    let min_fx = cache.fx_norm.min();
    if min_fx <= threshold {
        let node = cache.fx_norm.values().iter().position(|&v| v == min_fx).unwrap_or(0);
        return Err(CurveError::DegenerateGrid {
            min_fx,
            node,
            threshold,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Termination {
    ReachedHorizon,
    DegenerateGrid { t: f64, min_fx: f64 },
    NonFinite { t: f64 },
}

impl Termination {
    pub fn is_success(&self) -> bool {
        matches!(self, Termination::ReachedHorizon)
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::ReachedHorizon => f.write_str("reached-horizon"),
            Termination::DegenerateGrid { t, min_fx } => {
                write!(f, "degenerate-grid (t = {t}, min|f_x| = {min_fx:e})")
            }
            Termination::NonFinite { t } => write!(f, "non-finite (t = {t})"),
        }
    }
}

/// Result of a run.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub variant: FlowVariant,
    pub lambda: f64,
    /// Snapshots at strictly increasing times, starting with the initial
    /// curve and ending with the last accepted state.
    pub snapshots: Vec<CurveState>,
    /// Every `diagnostics_every`-th accepted step.
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub steps: usize,
    pub initial_energy: EnergyBreakdown,
    pub final_energy: EnergyBreakdown,
    pub final_state: CurveState,
    pub summary: RunSummary,
    /// Time-identity residuals around snapshot steps (only when
    /// `record_residuals` is set).
    pub residuals: Vec<WindowResiduals>,
    pub termination: Termination,
}

/// Hooks receiving every diagnostics row and snapshot as they are produced.
pub trait RunObserver {
    fn on_record(&mut self, _record: &DiagnosticsRecord) -> Result<()> {
        Ok(())
    }
    fn on_snapshot(&mut self, _index: usize, _state: &CurveState) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

/// Runs the configured flow to its horizon.
pub fn evolve(config: &FlowConfig) -> Result<Trajectory> {
    evolve_with(config, &mut ())
}

/// Like [`evolve`], streaming records and snapshots through `observer`.
/// Step failures end the run and are reported in
/// [`Trajectory::termination`]; only preset construction and observer
/// errors are returned as `Err`.
pub fn evolve_with<O: RunObserver + ?Sized>(
    config: &FlowConfig,
    observer: &mut O,
) -> Result<Trajectory> {
    config.validate()?;
    let lambda = config.lambda;
    let variant = config.variant;
    let initial = make_preset(&config.preset, config.nodes, config.dim, config.seed)?;
    let mut cache = geometry(&initial, lambda, 3)?;
    let initial_energy = energies(&cache, lambda);
    let threshold = EPS_REG_REL * cache.fx_norm.mean();

    let mut policy = config.policy;
    let dt0 = stable_dt(&cache, &policy);
    if config.record_residuals {
        policy.mode = StepMode::FixedDt(dt0);
    }
    let t_end = config.t_end;
    // fixed steps are spread uniformly over the horizon
    let fixed_steps = match policy.mode {
        StepMode::FixedDt(dt) if t_end > 0.0 => Some(((t_end / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize),
        _ => None,
    };
    let snap_stride = if t_end > 0.0 {
        ((t_end / (dt0 * config.n_snapshots.max(1) as f64)).ceil() as usize).max(1)
    } else {
        1
    };

    let mut monitor = Monitor::new(&cache, &initial_energy, lambda, variant);
    let mut stepper = Stepper::new(lambda, variant, policy.integrator).with_damping(policy.damping);
    let mut snapshots = vec![initial.clone()];
    observer.on_snapshot(0, &initial)?;
    let mut diagnostics = Vec::new();
    let mut residuals = Vec::new();

    let mut state = initial;
    let mut energy = initial_energy;
    let mut next_cache = cache.clone();
    let mut steps = 0usize;
    let mut previous: Option<CurveState> = None;
    let mut pending_window = false;
    let every = config.diagnostics_every.max(1);
    let termination = loop {
        let remaining = t_end - state.t;
        let (dt, last) = match fixed_steps {
            Some(n) => {
                if steps >= n {
                    break Termination::ReachedHorizon;
                }
                (t_end / n as f64, steps + 1 == n)
            }
            None => {
                if remaining <= 0.0 || remaining <= 1e-12 * t_end {
                    break Termination::ReachedHorizon;
                }
                let dt = stable_dt(&cache, &policy);
                if remaining <= dt {
                    (remaining, true)
                } else if remaining < 2.0 * dt {
                    (0.5 * remaining, false)
                } else {
                    (dt, false)
                }
            }
        };

        let mut next = match stepper.advance(&state, &cache, dt) {
            Ok(n) => n,
            Err(e) => break failure(e, &state),
        };
        if let Some(n) = fixed_steps {
            next.t = if last {
                t_end
            } else {
                (steps + 1) as f64 * (t_end / n as f64)
            };
        } else if last {
            next.t = t_end;
        }
        let full = (steps + 1) % every == 0 || last;
        if let Err(e) = next_cache
            .update(&next, lambda, if full { 3 } else { 2 })
            .and_then(|_| check_against(&next_cache, threshold, next.t))
        {
            break failure(e, &next);
        }
        steps += 1;
        let next_energy = energies(&next_cache, lambda);
        if let Some(record) = monitor.observe(&energy, &next_cache, &next_energy, next.t, dt, full) {
            observer.on_record(&record)?;
            diagnostics.push(record);
        }

        if config.record_residuals {
            if pending_window {
                if let Some(prev) = &previous {
                    let window = [prev, &state, &next];
                    if let Ok(r) = identities::window_residuals(window, lambda, variant) {
                        residuals.push(r);
                    }
                }
                pending_window = false;
            }
            previous = Some(state.clone());
        }

        if steps % snap_stride == 0 {
            observer.on_snapshot(snapshots.len(), &next)?;
            snapshots.push(next.clone());
            pending_window = config.record_residuals;
        }

        std::mem::swap(&mut cache, &mut next_cache);
        state = next;
        energy = next_energy;
    };

    if snapshots.last().map(|s| s.t) != Some(state.t) {
        observer.on_snapshot(snapshots.len(), &state)?;
        snapshots.push(state.clone());
    }

    Ok(Trajectory {
        variant,
        lambda,
        snapshots,
        diagnostics,
        steps,
        initial_energy,
        final_energy: energy,
        final_state: state,
        summary: monitor.finish(),
        residuals,
        termination,
    })
}

fn failure(err: CurveError, state: &CurveState) -> Termination {
    match err {
        CurveError::DegenerateGrid { min_fx, .. } => Termination::DegenerateGrid {
            t: state.t,
            min_fx,
        },
        CurveError::NonFinite { t } => Termination::NonFinite { t },
        _ => Termination::NonFinite { t: state.t },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use std::f64::consts::TAU;

    fn circle(n: usize, r: f64) -> CurveState {
        let grid = Grid::new(n).unwrap();
        CurveState::new(
            0.0,
            VectorField::from_fn(grid, 2, |x, p| {
                p[0] = r * x.cos();
                p[1] = r * x.sin();
            }),
        )
        .unwrap()
    }

    fn ellipse(n: usize) -> CurveState {
        let grid = Grid::new(n).unwrap();
        CurveState::new(
            0.0,
            VectorField::from_fn(grid, 2, |x, p| {
                p[0] = 2.0 * x.cos();
                p[1] = x.sin();
            }),
        )
        .unwrap()
    }

    #[test]
    fn stationary_circles_are_fixed_points() {
        let lambda: f64 = 0.5;
        let c = circle(128, (2.0 * lambda).powf(-1.0 / 3.0));
        let h = c.h();
        assert!(rhs(&c, lambda, FlowVariant::DLambda).unwrap().max_norm() <= h * h);
        let c = circle(128, 1.0 / (2.0 * lambda).sqrt());
        assert!(rhs(&c, lambda, FlowVariant::ELambda).unwrap().max_norm() <= h * h);
    }

    #[test]
    fn variants_agree_on_unit_speed_circle_up_to_speed() {
        // λκ(|f_x| - 1) + λ(|f_x|)_s τ with |f_x| = sin(h)/h on the grid
        let lambda = 0.8;
        let c = circle(64, 1.0);
        let d = rhs(&c, lambda, FlowVariant::DLambda).unwrap();
        let e = rhs(&c, lambda, FlowVariant::ELambda).unwrap();
        let h = c.h();
        let sigma = h.sin() / h;
        assert!((d.max_norm_diff(&e) - lambda * (1.0 - sigma)).abs() < 1e-12);
    }

    #[test]
    fn adaptive_dt_formula() {
        let c = circle(128, 1.0);
        let g = geometry(&c, 1.0, 2).unwrap();
        let policy = StepPolicy {
            mode: StepMode::AdaptiveCfl(0.1),
            dt_max: 1.0,
            integrator: Integrator::Rk4,
            ..StepPolicy::default()
        };
        let dt = stable_dt(&g, &policy);
        // min|f_x| = sin(h)/h on the discrete unit circle
        let h = c.h();
        assert!((dt - 0.1 * h.sin().powi(4)).abs() < 1e-20);
        assert!((dt - 5.806e-7).abs() < 1e-9, "{dt}");

        let g2 = geometry(&circle(256, 1.0), 1.0, 2).unwrap();
        let ratio = dt / stable_dt(&g2, &policy);
        let expected = (h.sin() / (0.5 * h).sin()).powi(4);
        assert!((ratio - expected).abs() < 1e-9 && (ratio - 16.0).abs() < 0.05, "{ratio}");

        let fixed = StepPolicy {
            mode: StepMode::FixedDt(3e-4),
            ..policy
        };
        assert_eq!(stable_dt(&g, &fixed), 3e-4);
    }

    #[test]
    fn euler_step_from_stationary_circle_barely_moves() {
        let lambda: f64 = 0.5;
        let c = circle(128, (2.0 * lambda).powf(-1.0 / 3.0));
        let policy = StepPolicy {
            mode: StepMode::FixedDt(1e-4),
            dt_max: 1.0,
            integrator: Integrator::Euler,
            ..StepPolicy::default()
        };
        let next = step(&c, lambda, FlowVariant::DLambda, &policy).unwrap();
        let h = c.h();
        assert!(next.points().max_norm_diff(c.points()) <= 1e-4 * h * h);
        assert_eq!(next.nodes(), c.nodes());
        assert_eq!(next.dim(), c.dim());
        assert_eq!(next.grid(), c.grid());
        assert!((next.t - 1e-4).abs() < 1e-18);
    }

    fn integrate(c: &CurveState, integrator: Integrator, total: f64, n: usize) -> CurveState {
        let mut s = c.clone();
        let mut stepper = Stepper::new(0.5, FlowVariant::DLambda, integrator);
        for _ in 0..n {
            let g = geometry(&s, 0.5, 2).unwrap();
            s = stepper.advance(&s, &g, total / n as f64).unwrap();
        }
        s
    }

    #[test]
    fn integrator_orders_by_richardson() {
        let c = ellipse(32);
        let total = 4e-4;
        for (integ, lo, hi, base) in [(Integrator::Euler, 0.8, 1.2, 4), (Integrator::Rk4, 3.5, 4.5, 2)] {
            let a = integrate(&c, integ, total, base);
            let b = integrate(&c, integ, total, 2 * base);
            let d = integrate(&c, integ, total, 4 * base);
            let order = (a.points().max_norm_diff(b.points()) / b.points().max_norm_diff(d.points())).log2();
            assert!((lo..=hi).contains(&order), "{integ:?} order {order}");
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn avx_advance_matches_baseline_bitwise() {
        if !std::arch::is_x86_feature_detected!("avx") {
            return;
        }
        let c = ellipse(90);
        let g = geometry(&c, 0.5, 2).unwrap();
        for variant in [FlowVariant::DLambda, FlowVariant::ELambda] {
            let new = || Stepper::new(0.5, variant, Integrator::Rk4);
            let plain = new().advance_impl(&c, &g, 1e-5).unwrap();
            let wide = unsafe { new().advance_avx(&c, &g, 1e-5).unwrap() };
            let bits = |s: &CurveState| s.points().raw().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&plain), bits(&wide));
        }
    }

    /// Unit circle with even nodes pushed out and odd nodes pulled in by `eps`.
    fn zigzag_circle(n: usize, eps: f64) -> CurveState {
        let grid = Grid::new(n).unwrap();
        let h = grid.h();
        CurveState::new(
            0.0,
            VectorField::from_fn(grid, 2, |x, p| {
                let odd = ((x / h).round() as usize) % 2 == 1;
                let r = if odd { 1.0 - eps } else { 1.0 + eps };
                p[0] = r * x.cos();
                p[1] = r * x.sin();
            }),
        )
        .unwrap()
    }

    fn zigzag_amplitude(s: &CurveState) -> f64 {
        let p = s.points();
        let (x, y) = (p.component(0), p.component(1));
        let sum: f64 = (0..s.nodes())
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } * x[i].hypot(y[i]))
            .sum();
        sum / s.nodes() as f64
    }

    fn zigzag_rate(n: usize, nu: f64, t_end: f64) -> f64 {
        let mut s = zigzag_circle(n, 1e-6);
        let a0 = zigzag_amplitude(&s);
        let mut stepper = Stepper::new(0.5, FlowVariant::DLambda, Integrator::Rk4).with_damping(nu);
        let policy = StepPolicy {
            mode: StepMode::AdaptiveCfl(1.0),
            ..StepPolicy::default()
        };
        while s.t < t_end {
            let g = geometry(&s, 0.5, 2).unwrap();
            let dt = stable_dt(&g, &policy).min(t_end - s.t);
            let t = s.t;
            s = stepper.advance(&s, &g, dt).unwrap();
            s.t = t + dt;
        }
        (zigzag_amplitude(&s) / a0).ln() / t_end
    }

    #[test]
    fn bare_scheme_has_growing_zigzag() {
        // each parity class sees the other as an exact circle: linear growth 3/(2r⁴)
        let rate = zigzag_rate(32, 0.0, 0.5);
        assert!((rate - 1.5).abs() < 0.02, "{rate}");
    }

    #[test]
    fn damping_kills_zigzag_at_predicted_rate() {
        let n = 64;
        let h = TAU / n as f64;
        let rate = zigzag_rate(n, DEFAULT_DAMPING, 2e-3);
        let predicted = 1.5 - 4.0 * DEFAULT_DAMPING / (h * h);
        assert!((rate / predicted - 1.0).abs() < 0.02, "{rate} vs {predicted}");
    }

    #[test]
    fn damping_is_second_order_on_smooth_curves() {
        let term = |n: usize| {
            let c = ellipse(n);
            let g = geometry(&c, 0.5, 2).unwrap();
            let mut out = VectorField::zeros(c.grid(), 2);
            add_damping(c.points(), g.inv_fx(), 1.0, &mut out);
            out.max_norm()
        };
        let ratio = term(64) / term(128);
        assert!((3.5..4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn damping_leaves_zero_weight_untouched() {
        let c = ellipse(32);
        let g = geometry(&c, 0.5, 2).unwrap();
        let mut out = VectorField::from_fn(c.grid(), 2, |x, p| p.fill(x));
        let before = out.clone();
        add_damping(c.points(), g.inv_fx(), 0.0, &mut out);
        assert_eq!(out, before);
    }
}
