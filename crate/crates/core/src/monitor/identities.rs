//! Discrete residuals of the evolution identities satisfied by the flows.
//!
//! Time derivatives are three-point central differences over an equally
//! spaced window `(f(t-Δt), f(t), f(t+Δt))`; the right-hand sides are
//! evaluated at the middle state. All residuals are max-norms over nodes and
//! should vanish at `O(Δt²) + O(h²)`.

use serde::{Deserialize, Serialize};

use crate::energy::energies;
use crate::error::{CurveError, Result};
use crate::flow::{velocity_into, FlowVariant};
use crate::grid::{
    ds, dx, geometry, normal_project, CurveState, GeometryCache, GridField, ScalarField,
    VectorField,
};
use crate::monitor::dissipation_rate;

/// Relative dissipation defect of the step `prev -> next` for the
/// d-lambda flow: `|ΔD_λ/Δt + ∫(|V|² + φ²) ds| / max(1, D_λ)`.
pub fn dissipation_residual(prev: &CurveState, next: &CurveState, lambda: f64) -> Result<f64> {
    dissipation_residual_for(prev, next, lambda, FlowVariant::DLambda)
}

/// Same as [`dissipation_residual`] for the energy of `variant`.
pub fn dissipation_residual_for(
    prev: &CurveState,
    next: &CurveState,
    lambda: f64,
    variant: FlowVariant,
) -> Result<f64> {
    let dt = next.t - prev.t;
    if !(dt > 0.0) {
        return Err(CurveError::config(
            "window",
            format!("states must be strictly ordered in time (dt = {dt})"),
        ));
    }
    let gp = geometry(prev, lambda, 2)?;
    let gn = geometry(next, lambda, 2)?;
    let ep = variant.energy(&energies(&gp, lambda));
    let en = variant.energy(&energies(&gn, lambda));
    let mut scratch = VectorField::zeros(prev.grid(), prev.dim());
    let (v2, p2) = dissipation_rate(&gp, variant, &mut scratch);
    Ok(((en - ep) / dt + v2 + p2).abs() / ep.max(1.0))
}

/// Three equally spaced states and their geometry.
struct Window {
    dt: f64,
    caches: [GeometryCache; 3],
}

impl Window {
    fn new(states: [&CurveState; 3], lambda: f64, m_max: usize) -> Result<Self> {
        let [a, b, c] = states;
        if a.grid() != b.grid() || b.grid() != c.grid() || a.dim() != b.dim() || b.dim() != c.dim()
        {
            return Err(CurveError::config("window", "states live on different grids"));
        }
        let (d1, d2) = (b.t - a.t, c.t - b.t);
        if !(d1 > 0.0 && d2 > 0.0) || (d1 - d2).abs() > 1e-6 * d1 {
            return Err(CurveError::config(
                "window",
                format!("states must be equally spaced in time (got {d1:e} and {d2:e})"),
            ));
        }
        Ok(Window {
            dt: 0.5 * (c.t - a.t),
            caches: [
                geometry(a, lambda, m_max)?,
                geometry(b, lambda, m_max)?,
                geometry(c, lambda, m_max)?,
            ],
        })
    }

    fn mid(&self) -> &GeometryCache {
        &self.caches[1]
    }

    /// Central time difference of a cached quantity.
    fn dt_of<F: GridField>(&self, pick: impl Fn(&GeometryCache) -> &F) -> F {
        let mut out = pick(&self.caches[2]).clone();
        let lo = pick(&self.caches[0]);
        let inv = 0.5 / self.dt;
        for (o, l) in out.raw_mut().iter_mut().zip(lo.raw()) {
            *o = (*o - l) * inv;
        }
        out
    }
}

fn max_diff<F: GridField>(a: &F, b: &F) -> f64 {
    a.raw()
        .chunks(a.grid().nodes())
        .zip(b.raw().chunks(b.grid().nodes()))
        .fold(vec![0.0; a.grid().nodes()], |mut acc, (x, y)| {
            for ((s, p), q) in acc.iter_mut().zip(x).zip(y) {
                *s += (p - q) * (p - q);
            }
            acc
        })
        .into_iter()
        .fold(0.0, |m, v: f64| m.max(v.sqrt()))
}

fn kappa_dot_v(cache: &GeometryCache, v: &VectorField) -> ScalarField {
    cache.kappa.dot(v)
}

/// `∂_t|f_x| = (λ/|f_x|)(|f_x|)_xx + λ(|f_x|)_x (1/|f_x|)_x - ⟨κ,V⟩|f_x|`
pub fn fx_pde_residual(window: [&CurveState; 3], lambda: f64) -> Result<f64> {
    let w = Window::new(window, lambda, 2)?;
    let g = w.mid();
    let lhs = w.dt_of(|c| &c.fx_norm);

    let l = &g.fx_norm;
    let lx = dx(l);
    let lxx = dx(&lx);
    let inv = ScalarField::new(g.grid(), l.values().iter().map(|v| 1.0 / v).collect())?;
    let invx = dx(&inv);
    let kv = kappa_dot_v(g, &g.v);
    let rhs = ScalarField::new(
        g.grid(),
        (0..l.values().len())
            .map(|i| {
                let li = l.values()[i];
                lambda / li * lxx.values()[i] + lambda * lx.values()[i] * invx.values()[i]
                    - kv.values()[i] * li
            })
            .collect(),
    )?;
    Ok(lhs.max_abs_diff(&rhs))
}

/// `∂_t φ = λ|f_x| φ_ss - λ|f_x| (⟨κ,V⟩)_s`
pub fn phi_pde_residual(window: [&CurveState; 3], lambda: f64) -> Result<f64> {
    let w = Window::new(window, lambda, 2)?;
    let g = w.mid();
    let lhs = w.dt_of(|c| &c.phi);
    let l = &g.fx_norm;
    let phi_ss = ds(&ds(&g.phi, l)?, l)?;
    let kv_s = ds(&kappa_dot_v(g, &g.v), l)?;
    let rhs = ScalarField::new(
        g.grid(),
        (0..l.values().len())
            .map(|i| lambda * l.values()[i] * (phi_ss.values()[i] - kv_s.values()[i]))
            .collect(),
    )?;
    Ok(lhs.max_abs_diff(&rhs))
}

/// How the normal and tangential velocity entering the evolution formulas
/// are obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VelocitySource {
    /// From the flow's own formulas at the middle state.
    Flow(FlowVariant),
    /// From the central difference of node positions across the window.
    Observed,
}

/// Residuals of the evolution of the length element (a), the unit tangent
/// (c) and the curvature vector (e).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemformResiduals {
    /// `∂_t|f_x| = (∂_s φ - ⟨κ,V⟩)|f_x|`
    pub length_element: f64,
    /// `∂_t τ = ∇_s V + φκ`
    pub tangent: f64,
    /// `∂_t κ = ∂_s ∇_s V + ⟨κ,V⟩κ + φ ∂_s κ`
    pub curvature: f64,
}

impl LemformResiduals {
    pub fn entries(&self) -> [(&'static str, f64); 3] {
        [
            ("lemform_a", self.length_element),
            ("lemform_c", self.tangent),
            ("lemform_e", self.curvature),
        ]
    }
}

pub fn lemform_residuals(
    window: [&CurveState; 3],
    lambda: f64,
    source: VelocitySource,
) -> Result<LemformResiduals> {
    let w = Window::new(window, lambda, 2)?;
    let g = w.mid();
    let grid = g.grid();
    let dim = g.tau.dim();
    let (v, phi) = match source {
        VelocitySource::Flow(FlowVariant::DLambda) => (g.v.clone(), g.phi.clone()),
        VelocitySource::Flow(FlowVariant::ELambda) => {
            let mut v = VectorField::zeros(grid, dim);
            velocity_into(g, FlowVariant::ELambda, &mut v);
            (v, ScalarField::zeros(grid))
        }
        VelocitySource::Observed => {
            let [a, _, c] = window;
            let mut ft = c.points().clone();
            ft.axpy(-1.0, a.points());
            let inv = 0.5 / w.dt;
            ft.raw_mut().iter_mut().for_each(|x| *x *= inv);
            let phi = ft.dot(&g.tau);
            (normal_project(&ft, &g.tau), phi)
        }
    };
    let l = &g.fx_norm;
    let kv = kappa_dot_v(g, &v);

    let dl = w.dt_of(|c| &c.fx_norm);
    let phi_s = ds(&phi, l)?;
    let rhs_a = ScalarField::new(
        grid,
        (0..grid.nodes())
            .map(|i| (phi_s.values()[i] - kv.values()[i]) * l.values()[i])
            .collect(),
    )?;

    let dtau = w.dt_of(|c| &c.tau);
    let nabla_v = normal_project(&ds(&v, l)?, &g.tau);
    let mut rhs_c = nabla_v.clone();
    rhs_c.axpy(1.0, &g.kappa.scaled_by(&phi));

    let dkappa = w.dt_of(|c| &c.kappa);
    let mut rhs_e = ds(&nabla_v, l)?;
    rhs_e.axpy(1.0, &g.kappa.scaled_by(&kv));
    rhs_e.axpy(1.0, &ds(&g.kappa, l)?.scaled_by(&phi));

    Ok(LemformResiduals {
        length_element: dl.max_abs_diff(&rhs_a),
        tangent: max_diff(&dtau, &rhs_c),
        curvature: max_diff(&dkappa, &rhs_e),
    })
}

/// `∇_s w = |f_x| ∇_s κ + (φ/λ) κ` with `w = |f_x| κ`.
pub fn nablaw_residual(cache: &GeometryCache, lambda: f64) -> Result<f64> {
    let l = &cache.fx_norm;
    let lhs = normal_project(&ds(&cache.w(), l)?, &cache.tau);
    let mut rhs = cache.nabla(1).scaled_by(l);
    let ratio = ScalarField::new(
        cache.grid(),
        cache.phi.values().iter().map(|p| p / lambda).collect(),
    )?;
    rhs.axpy(1.0, &cache.kappa.scaled_by(&ratio));
    Ok(max_diff(&lhs, &rhs))
}

/// Time-identity residuals recorded during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowResiduals {
    pub t: f64,
    pub fx_pde: f64,
    pub phi_pde: f64,
    pub lemform: LemformResiduals,
}

pub(crate) fn window_residuals(
    window: [&CurveState; 3],
    lambda: f64,
    variant: FlowVariant,
) -> Result<WindowResiduals> {
    Ok(WindowResiduals {
        t: window[1].t,
        fx_pde: fx_pde_residual(window, lambda)?,
        phi_pde: phi_pde_residual(window, lambda)?,
        lemform: lemform_residuals(window, lambda, VelocitySource::Flow(variant))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Integrator, Stepper};
    use crate::grid::Grid;

    fn curve(n: usize, f: impl Fn(f64) -> (f64, f64)) -> CurveState {
        let grid = Grid::new(n).unwrap();
        CurveState::new(
            0.0,
            VectorField::from_fn(grid, 2, |x, p| {
                let (a, b) = f(x);
                p[0] = a;
                p[1] = b;
            }),
        )
        .unwrap()
    }

    fn circle(n: usize, r: f64) -> CurveState {
        curve(n, |x| (r * x.cos(), r * x.sin()))
    }

    fn warped(n: usize) -> CurveState {
        curve(n, |x| {
            let u = x + 0.3 * x.sin();
            (u.cos(), u.sin())
        })
    }

    fn window(c: &CurveState, lambda: f64, variant: FlowVariant, dt: f64) -> [CurveState; 3] {
        let mut stepper = Stepper::new(lambda, variant, Integrator::Rk4);
        let g0 = geometry(c, lambda, 2).unwrap();
        let s1 = stepper.advance(c, &g0, dt).unwrap();
        let g1 = geometry(&s1, lambda, 2).unwrap();
        let s2 = stepper.advance(&s1, &g1, dt).unwrap();
        [c.clone(), s1, s2]
    }

    fn dt_for(n: usize) -> f64 {
        0.1 * (std::f64::consts::TAU / n as f64).powi(4)
    }

    #[test]
    fn stationary_circle_residuals_are_small() {
        let lambda: f64 = 0.5;
        let c = circle(128, (2.0 * lambda).powf(-1.0 / 3.0));
        let h = c.h();
        let [a, b, d] = window(&c, lambda, FlowVariant::DLambda, dt_for(128));
        let win = [&a, &b, &d];
        assert!(fx_pde_residual(win, lambda).unwrap() <= h * h);
        assert!(phi_pde_residual(win, lambda).unwrap() <= h * h);
        let l = lemform_residuals(win, lambda, VelocitySource::Flow(FlowVariant::DLambda)).unwrap();
        for (name, v) in l.entries() {
            assert!(v <= h * h, "{name} {v}");
        }
        let g = geometry(&c, lambda, 2).unwrap();
        assert!(nablaw_residual(&g, lambda).unwrap() < 1e-10);
        let next = &b;
        assert!(dissipation_residual(&a, next, lambda).unwrap() <= h * h);
    }

    #[test]
    fn translation_residuals_are_pure_discretization_error() {
        // a rigid translation has V = c - φτ, φ = c·τ; the discrete product
        // rule leaves only an O(h²) defect
        let tangent = |n: usize| {
            let c = warped(n);
            let shift = |s: f64| c.translated(&[0.3 * s, -0.2 * s]).unwrap();
            let mut states = [shift(0.0), shift(1e-3), shift(2e-3)];
            for (k, s) in states.iter_mut().enumerate() {
                s.t = k as f64 * 1e-3;
            }
            let l = lemform_residuals([&states[0], &states[1], &states[2]], 1.0, VelocitySource::Observed)
                .unwrap();
            let h = c.h();
            assert!(l.length_element <= h * h, "{}", l.length_element);
            assert!(l.tangent <= h * h, "{}", l.tangent);
            l.tangent
        };
        let ratio = tangent(64) / tangent(128);
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn residuals_rotation_invariant() {
        let lambda = 0.5;
        let [a, b, d] = window(&warped(64), lambda, FlowVariant::DLambda, dt_for(64));
        let th: f64 = 1.1;
        let rot = |s: &CurveState| {
            let mut r = s
                .map_nodes(|p| vec![th.cos() * p[0] - th.sin() * p[1], th.sin() * p[0] + th.cos() * p[1]])
                .unwrap();
            r.t = s.t;
            r
        };
        let (ra, rb, rd) = (rot(&a), rot(&b), rot(&d));
        let x = fx_pde_residual([&a, &b, &d], lambda).unwrap();
        let y = fx_pde_residual([&ra, &rb, &rd], lambda).unwrap();
        // rounding in the rotated nodes is amplified by 1/dt
        assert!((x - y).abs() <= 1e-6 * (1.0 + x), "{x} {y}");
    }

    #[test]
    fn unequal_window_is_rejected() {
        let c = warped(32);
        let mut b = c.clone();
        b.t = 1.0;
        let mut d = c.clone();
        d.t = 3.0;
        assert!(fx_pde_residual([&c, &b, &d], 1.0).is_err());
    }

    #[test]
    fn nablaw_dilation_bookkeeping() {
        // w = |f_x|κ is invariant under f -> 2f, ∇_s picks up 1/2; with λ
        // fixed the residual should halve (up to the φ/λ term scaling like w).
        let lambda = 0.5;
        let c = warped(128);
        let big = c.map_nodes(|p| p.iter().map(|v| 2.0 * v).collect()).unwrap();
        let r1 = nablaw_residual(&geometry(&c, lambda, 2).unwrap(), lambda).unwrap();
        let r2 = nablaw_residual(&geometry(&big, lambda, 2).unwrap(), lambda).unwrap();
        assert!((r2 / r1 - 0.5).abs() < 1e-6, "{r1} {r2}");
    }

    #[test]
    fn nablaw_converges_on_warped_circle() {
        let lambda = 0.5;
        let r: Vec<f64> = [64, 128, 256]
            .iter()
            .map(|&n| nablaw_residual(&geometry(&warped(n), lambda, 2).unwrap(), lambda).unwrap())
            .collect();
        let order = (r[0] / r[2]).log2() / 2.0;
        assert!((1.5..=2.5).contains(&order), "{order}");
    }

    #[test]
    fn phi_pde_does_not_hold_for_classical_flow() {
        let lambda = 0.5;
        let res: Vec<f64> = [64, 128]
            .iter()
            .map(|&n| {
                let [a, b, d] = window(&warped(n), lambda, FlowVariant::ELambda, dt_for(256));
                phi_pde_residual([&a, &b, &d], lambda).unwrap()
            })
            .collect();
        // reported for comparison only: the residual stays O(1)
        eprintln!("phi_pde on e-lambda trajectory: {res:?}");
        assert!(res.iter().all(|r| r.is_finite()));
    }
}
