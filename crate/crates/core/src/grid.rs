//! Periodic parameter grid on `[0, 2π)`, central-difference operators and the
//! pointwise geometry of a discretized closed curve.
//!
//! Vector fields are stored component-major (`data[c * N + i]`) so that every
//! stencil pass runs over a contiguous slice.

use std::f64::consts::TAU;

use crate::error::{CurveError, Result};

/// Runs `$body` for every node `$i` with periodic neighbours `$m`, `$p`.
/// A macro rather than a closure so the body is inlined into the caller's
/// target features.
macro_rules! sweep {
    ($n:expr, |$i:ident, $m:ident, $p:ident| $body:block) => {{
        let n = $n;
        {
            let ($i, $m, $p) = (0usize, n - 1, 1usize);
            $body
        }
        for $i in 1..n - 1 {
            let ($m, $p) = ($i - 1, $i + 1);
            $body
        }
        {
            let ($i, $m, $p) = (n - 1, n - 2, 0usize);
            $body
        }
    }};
}

/// Tolerance for checks that hold exactly up to rounding (unit tangents,
/// projections).
pub const TOL_NORMAL: f64 = 1e-10;

/// Degeneracy threshold relative to the mean length element.
pub const EPS_REG_REL: f64 = 1e-12;

pub const MIN_NODES: usize = 8;

/// Uniform periodic grid `x_i = 2πi/N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    nodes: usize,
}

impl Grid {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes < MIN_NODES || nodes % 2 != 0 {
            return Err(CurveError::config(
                "N",
                format!("node count must be even and >= {MIN_NODES}, got {nodes}"),
            ));
        }
        Ok(Grid { nodes })
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Grid spacing `2π/N`.
    #[inline]
    pub fn h(&self) -> f64 {
        TAU / self.nodes as f64
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        TAU * i as f64 / self.nodes as f64
    }

    pub fn xs(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nodes).map(move |i| self.x(i))
    }
}

/// Common storage contract of scalar and vector fields: a flat buffer made of
/// `N`-long component chunks.
pub trait GridField: Clone {
    fn grid(&self) -> Grid;
    fn raw(&self) -> &[f64];
    fn raw_mut(&mut self) -> &mut [f64];
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nodes() {
            return Err(CurveError::config(
                "field",
                format!("expected {} samples, got {}", grid.nodes(), values.len()),
            ));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        ScalarField {
            grid,
            values: vec![0.0; grid.nodes()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        ScalarField {
            grid,
            values: grid.xs().map(f).collect(),
        }
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn min(&self) -> f64 {
        lane_min(&self.values)
    }

    pub fn max(&self) -> f64 {
        lane_max(&self.values)
    }

    pub fn mean(&self) -> f64 {
        lane_sum(&self.values) / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Pointwise difference, max-norm.
    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl GridField for ScalarField {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn raw(&self) -> &[f64] {
        &self.values
    }
    fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// `N` samples in `R^dim`, component-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    dim: usize,
    data: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: Grid, dim: usize) -> Self {
        VectorField {
            grid,
            dim,
            data: vec![0.0; grid.nodes() * dim],
        }
    }

    /// Builds a field from node-major points (`points[i][c]`).
    pub fn from_points(grid: Grid, points: &[Vec<f64>]) -> Result<Self> {
        if points.len() != grid.nodes() {
            return Err(CurveError::config(
                "nodes",
                format!("expected {} points, got {}", grid.nodes(), points.len()),
            ));
        }
        let dim = points.first().map_or(0, Vec::len);
        let mut field = VectorField::zeros(grid, dim);
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(CurveError::config(
                    format!("nodes[{i}]"),
                    format!("expected {dim} coordinates, got {}", p.len()),
                ));
            }
            for (c, &v) in p.iter().enumerate() {
                field.set(i, c, v);
            }
        }
        Ok(field)
    }

    /// Samples `f(x, out)` at every grid point.
    pub fn from_fn(grid: Grid, dim: usize, f: impl Fn(f64, &mut [f64])) -> Self {
        let mut field = VectorField::zeros(grid, dim);
        let mut p = vec![0.0; dim];
        for i in 0..grid.nodes() {
            p.iter_mut().for_each(|v| *v = 0.0);
            f(grid.x(i), &mut p);
            for (c, &v) in p.iter().enumerate() {
                field.set(i, c, v);
            }
        }
        field
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.grid.nodes()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.grid.nodes();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.nodes();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.data[c * self.grid.nodes() + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, c: usize, v: f64) {
        let n = self.grid.nodes();
        self.data[c * n + i] = v;
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        (0..self.dim).map(|c| self.get(i, c)).collect()
    }

    pub fn to_points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Pointwise `⟨self_i, other_i⟩`.
    pub fn dot(&self, other: &VectorField) -> ScalarField {
        let mut out = ScalarField::zeros(self.grid);
        for c in 0..self.dim {
            for ((o, a), b) in out
                .values
                .iter_mut()
                .zip(self.component(c))
                .zip(other.component(c))
            {
                *o += a * b;
            }
        }
        out
    }

    /// `Σ_i |v_i|² w_i`.
    pub fn weighted_sq_sum(&self, weights: &[f64]) -> f64 {
        (0..self.dim)
            .map(|c| {
                let a = self.component(c);
                lane_dot_w(a, a, weights)
            })
            .sum()
    }

    /// Pointwise Euclidean norm.
    pub fn norms(&self) -> ScalarField {
        let mut out = self.dot(self);
        out.values.iter_mut().for_each(|v| *v = v.sqrt());
        out
    }

    /// `max_i |v_i|`.
    pub fn max_norm(&self) -> f64 {
        self.norms().max()
    }

    /// `max_i |self_i - other_i|`.
    pub fn max_norm_diff(&self, other: &VectorField) -> f64 {
        let mut d = self.clone();
        d.axpy(-1.0, other);
        d.max_norm()
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &VectorField) {
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
    }

    /// Pointwise product with a scalar field.
    pub fn scaled_by(&self, s: &ScalarField) -> VectorField {
        let mut out = self.clone();
        for c in 0..self.dim {
            for (v, k) in out.component_mut(c).iter_mut().zip(s.values()) {
                *v *= k;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl GridField for VectorField {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn raw(&self) -> &[f64] {
        &self.data
    }
    fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Periodic central difference of one component chunk.
#[inline(always)]
fn central_diff(u: &[f64], inv2h: f64, out: &mut [f64]) {
    let n = u.len();
    out[0] = (u[1] - u[n - 1]) * inv2h;
    for (o, w) in out[1..n - 1].iter_mut().zip(u.windows(3)) {
        *o = (w[2] - w[0]) * inv2h;
    }
    out[n - 1] = (u[0] - u[n - 2]) * inv2h;
}

/// Second-order central difference `(u_{i+1} - u_{i-1}) / 2h` with periodic
/// wraparound, applied per component.
pub fn dx<F: GridField>(field: &F) -> F {
    let n = field.grid().nodes();
    let inv2h = 0.5 / field.grid().h();
    let mut out = field.clone();
    for (src, dst) in field.raw().chunks(n).zip(out.raw_mut().chunks_mut(n)) {
        central_diff(src, inv2h, dst);
    }
    out
}

/// Arc-length derivative `(1/|f_x|) ∂_x`.
pub fn ds<F: GridField>(field: &F, fx_norm: &ScalarField) -> Result<F> {
    check_regular(fx_norm.values(), EPS_REG_REL * fx_norm.mean(), f64::NAN)?;
    let n = field.grid().nodes();
    let mut out = dx(field);
    for chunk in out.raw_mut().chunks_mut(n) {
        for (v, l) in chunk.iter_mut().zip(fx_norm.values()) {
            *v /= l;
        }
    }
    Ok(out)
}

/// Removes the tangential part: `v_i - ⟨v_i, τ_i⟩ τ_i`.
pub fn normal_project(field: &VectorField, tau: &VectorField) -> VectorField {
    let d = field.dot(tau);
    let mut out = field.clone();
    for c in 0..field.dim() {
        for ((o, t), k) in out
            .component_mut(c)
            .iter_mut()
            .zip(tau.component(c))
            .zip(d.values())
        {
            *o -= k * t;
        }
    }
    out
}

fn check_regular(fx_norm: &[f64], threshold: f64, t: f64) -> Result<()> {
    // a NaN anywhere poisons the sum behind `threshold`
    let min_fx = lane_min(fx_norm);
    if !min_fx.is_finite() || !threshold.is_finite() {
        return Err(CurveError::NonFinite { t });
    }
    if min_fx <= threshold {
        let node = fx_norm.iter().position(|&v| v == min_fx).unwrap_or(0);
        return Err(CurveError::DegenerateGrid {
            min_fx,
            node,
            threshold,
        });
    }
    Ok(())
}

// Reductions with four independent accumulators, so the compiler can keep
// them in vector registers instead of one serial add chain.

const LANES: usize = 4;

#[inline(always)]
fn lane_fold<const K: usize>(
    cols: [&[f64]; K],
    init: f64,
    map: impl Fn([f64; K]) -> f64,
    op: impl Fn(f64, f64) -> f64,
) -> f64 {
    let n = cols[0].len();
    let split: [(&[[f64; LANES]], &[f64]); K] = std::array::from_fn(|k| cols[k][..n].as_chunks());
    let m = n / LANES;
    let mut acc = [init; LANES];
    for c in 0..m {
        let rows: [&[f64; LANES]; K] = std::array::from_fn(|k| &split[k].0[c]);
        for j in 0..LANES {
            acc[j] = op(acc[j], map(std::array::from_fn(|k| rows[k][j])));
        }
    }
    let mut r = op(op(acc[0], acc[1]), op(acc[2], acc[3]));
    for i in 0..n % LANES {
        r = op(r, map(std::array::from_fn(|k| split[k].1[i])));
    }
    r
}

pub(crate) fn lane_sum(a: &[f64]) -> f64 {
    lane_fold([a], 0.0, |[x]| x, |x, y| x + y)
}

pub(crate) fn lane_dot(a: &[f64], b: &[f64]) -> f64 {
    lane_fold([a, b], 0.0, |[x, y]| x * y, |x, y| x + y)
}

/// `Σ a_i b_i w_i`.
pub(crate) fn lane_dot_w(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    lane_fold([a, b, w], 0.0, |[x, y, z]| x * y * z, |x, y| x + y)
}

// NaN-blind; callers that care detect NaN through a sum

pub(crate) fn lane_min(a: &[f64]) -> f64 {
    lane_fold([a], f64::INFINITY, |[x]| x, |x, y| if y < x { y } else { x })
}

pub(crate) fn lane_max(a: &[f64]) -> f64 {
    lane_fold([a], f64::NEG_INFINITY, |[x]| x, |x, y| if y > x { y } else { x })
}

/// A closed discrete curve: `N` periodic nodes in `R^n` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveState {
    pub t: f64,
    points: VectorField,
}

impl CurveState {
    /// Validates dimension, finiteness and regularity.
    pub fn new(t: f64, points: VectorField) -> Result<Self> {
        if points.dim() < 2 {
            return Err(CurveError::config(
                "n",
                format!("ambient dimension must be >= 2, got {}", points.dim()),
            ));
        }
        if !points.is_finite() || !t.is_finite() {
            return Err(CurveError::NonFinite { t });
        }
        let fx_norm = dx(&points).norms();
        check_regular(fx_norm.values(), EPS_REG_REL * fx_norm.mean(), t)?;
        Ok(CurveState { t, points })
    }

    pub fn from_points(t: f64, points: &[Vec<f64>]) -> Result<Self> {
        let grid = Grid::new(points.len())?;
        CurveState::new(t, VectorField::from_points(grid, points)?)
    }

    #[inline]
    pub fn points(&self) -> &VectorField {
        &self.points
    }

    pub(crate) fn points_mut(&mut self) -> &mut VectorField {
        &mut self.points
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.points.grid()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.grid().h()
    }

    pub fn node(&self, i: usize) -> Vec<f64> {
        self.points.point(i)
    }

    /// Applies `map` to every node; useful for rigid motions and dilations.
    pub fn map_nodes(&self, map: impl Fn(&[f64]) -> Vec<f64>) -> Result<CurveState> {
        let pts: Vec<Vec<f64>> = self.points.to_points().iter().map(|p| map(p)).collect();
        let mut out = CurveState::from_points(self.t, &pts)?;
        out.t = self.t;
        Ok(out)
    }

    pub fn translated(&self, offset: &[f64]) -> Result<CurveState> {
        self.map_nodes(|p| p.iter().zip(offset).map(|(a, b)| a + b).collect())
    }

    /// Cyclic relabelling: node `i` of the result is node `i + shift` of self.
    pub fn index_shifted(&self, shift: usize) -> CurveState {
        let n = self.nodes();
        let mut points = self.points.clone();
        for c in 0..self.dim() {
            let src = self.points.component(c);
            for (i, v) in points.component_mut(c).iter_mut().enumerate() {
                *v = src[(i + shift) % n];
            }
        }
        CurveState {
            t: self.t,
            points,
        }
    }

    pub fn centroid(&self) -> Vec<f64> {
        let n = self.nodes() as f64;
        (0..self.dim())
            .map(|c| self.points.component(c).iter().sum::<f64>() / n)
            .collect()
    }
}

/// Pointwise geometric quantities of a curve.
#[derive(Clone, Debug)]
pub struct GeometryCache {
    pub lambda: f64,
    /// `f_x`.
    pub fx: VectorField,
    /// `|f_x|`.
    pub fx_norm: ScalarField,
    pub tau: VectorField,
    /// `κ = ∂_s τ`, not projected.
    pub kappa: VectorField,
    /// `∇_s^m κ` for `m = 1..=m_max`, stored at index `m - 1`.
    pub nabla_k: Vec<VectorField>,
    /// Tangential velocity `φ = λ (|f_x|)_s`.
    pub phi: ScalarField,
    /// Normal velocity `-∇_s²κ - ½|κ|²κ + λ|f_x|κ`.
    pub v: VectorField,
    scratch: Vec<f64>,
    dot: Vec<f64>,
    scratch_dot: Vec<f64>,
}

impl GeometryCache {
    #[inline]
    pub fn grid(&self) -> Grid {
        self.fx_norm.grid()
    }

    #[inline]
    /// `1/|f_x|` per node, as of the last update.
    pub fn inv_fx(&self) -> &[f64] {
        &self.scratch
    }

    /// `w = |f_x| κ`.
    pub fn w(&self) -> VectorField {
        self.kappa.scaled_by(&self.fx_norm)
    }

    pub fn m_max(&self) -> usize {
        self.nabla_k.len()
    }

    /// `∇_s^m κ`, `m >= 1`.
    pub fn nabla(&self, m: usize) -> &VectorField {
        &self.nabla_k[m - 1]
    }

    fn empty(grid: Grid, dim: usize, m_max: usize) -> Self {
        let vf = VectorField::zeros(grid, dim);
        let sf = ScalarField::zeros(grid);
        GeometryCache {
            lambda: 0.0,
            fx: vf.clone(),
            fx_norm: sf.clone(),
            tau: vf.clone(),
            kappa: vf.clone(),
            nabla_k: vec![vf.clone(); m_max],
            phi: sf,
            v: vf,
            scratch: vec![0.0; grid.nodes()],
            dot: vec![0.0; grid.nodes()],
            scratch_dot: vec![0.0; grid.nodes()],
        }
    }

    /// Recomputes every quantity for `curve`, reusing the buffers.
    pub fn update(&mut self, curve: &CurveState, lambda: f64, m_max: usize) -> Result<()> {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: the feature is present on this CPU.
            return unsafe { self.update_avx(curve, lambda, m_max) };
        }
        self.update_impl(curve, lambda, m_max)
    }

    /// Wider vectors only; no FMA, so results match the baseline bit for bit.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx")]
    unsafe fn update_avx(&mut self, curve: &CurveState, lambda: f64, m_max: usize) -> Result<()> {
        self.update_impl(curve, lambda, m_max)
    }

    #[inline(always)]
    fn update_impl(&mut self, curve: &CurveState, lambda: f64, m_max: usize) -> Result<()> {
        if m_max < 2 {
            return Err(CurveError::config(
                "m_max",
                format!("normal velocity needs m_max >= 2, got {m_max}"),
            ));
        }
        let grid = curve.grid();
        let dim = curve.dim();
        if self.grid() != grid || self.fx.dim() != dim {
            *self = GeometryCache::empty(grid, dim, m_max);
        }
        if self.nabla_k.len() != m_max {
            self.nabla_k
                .resize_with(m_max, || VectorField::zeros(grid, dim));
        }
        self.lambda = lambda;

        if dim == 2 {
            self.fill_planar(curve, lambda, m_max)
        } else {
            self.fill_generic(curve, lambda, m_max)
        }
    }

    /// Any dimension, one component per pass.
    #[inline(always)]
    fn fill_generic(&mut self, curve: &CurveState, lambda: f64, m_max: usize) -> Result<()> {
        let dim = curve.dim();
        let n = curve.nodes();
        let inv2h = 0.5 / curve.grid().h();
        let pts = curve.points();

        {
            let norm = &mut self.fx_norm.values_mut()[..n];
            for c in 0..dim {
                let fx = &mut self.fx.component_mut(c)[..n];
                if c == 0 {
                    diff_then(pts.component(c), inv2h, fx, |i, d| norm[i] = d * d);
                } else {
                    diff_then(pts.component(c), inv2h, fx, |i, d| norm[i] += d * d);
                }
            }
            let inv_fx = &mut self.scratch[..n];
            for i in 0..n {
                norm[i] = norm[i].sqrt();
                inv_fx[i] = 1.0 / norm[i];
            }
        }
        let mean = self.fx_norm.mean();
        check_regular(self.fx_norm.values(), EPS_REG_REL * mean, curve.t)?;

        let inv_fx = &self.scratch[..n];
        for c in 0..dim {
            let (t, f) = (&mut self.tau.component_mut(c)[..n], &self.fx.component(c)[..n]);
            for i in 0..n {
                t[i] = f[i] * inv_fx[i];
            }
        }
        let k2 = &mut self.dot[..n];
        for c in 0..dim {
            let (k, t) = (&mut self.kappa.component_mut(c)[..n], self.tau.component(c));
            if c == 0 {
                diff_weighted_then(t, inv2h, inv_fx, k, |i, d| k2[i] = d * d);
            } else {
                diff_weighted_then(t, inv2h, inv_fx, k, |i, d| k2[i] += d * d);
            }
        }
        diff_weighted(self.fx_norm.values(), inv2h * lambda, inv_fx, self.phi.values_mut());

        let dot = &mut self.scratch_dot[..n];
        let (k2, l) = (&self.dot[..n], &self.fx_norm.values()[..n]);
        for m in 0..m_max {
            let (done, rest) = self.nabla_k.split_at_mut(m);
            let src = if m == 0 { &self.kappa } else { &done[m - 1] };
            let out = &mut rest[0];
            if m != 1 {
                ds_project_into(src, &self.tau, inv_fx, inv2h, out, dot);
                continue;
            }
            // finish ∇_s²κ and the normal velocity in one sweep
            ds_tangent_dot(src, &self.tau, inv_fx, inv2h, out, dot);
            for c in 0..dim {
                let (t, kap) = (&self.tau.component(c)[..n], &self.kappa.component(c)[..n]);
                let (n2, v) = (&mut out.component_mut(c)[..n], &mut self.v.component_mut(c)[..n]);
                for i in 0..n {
                    n2[i] -= dot[i] * t[i];
                    v[i] = -n2[i] + (lambda * l[i] - 0.5 * k2[i]) * kap[i];
                }
            }
        }
        Ok(())
    }

    /// Curves in the plane: every quantity of a node in a single sweep,
    /// with the same per-node arithmetic as [`Self::fill_generic`].
    #[inline(always)]
    fn fill_planar(&mut self, curve: &CurveState, lambda: f64, m_max: usize) -> Result<()> {
        let n = curve.nodes();
        let inv2h = 0.5 / curve.grid().h();
        let (px, py) = xy(curve.points());
        {
            let (fxx, fxy) = xy_mut(&mut self.fx);
            let (tx, ty) = xy_mut(&mut self.tau);
            let norm = &mut self.fx_norm.values_mut()[..n];
            let inv = &mut self.scratch[..n];
            sweep!(n, |i, m, p| {
                let (a, b) = ((px[p] - px[m]) * inv2h, (py[p] - py[m]) * inv2h);
                fxx[i] = a;
                fxy[i] = b;
                let l = (a * a + b * b).sqrt();
                let w = 1.0 / l;
                norm[i] = l;
                inv[i] = w;
                tx[i] = a * w;
                ty[i] = b * w;
            });
        }
        let mean = self.fx_norm.mean();
        check_regular(self.fx_norm.values(), EPS_REG_REL * mean, curve.t)?;

        let inv = &self.scratch[..n];
        let l = &self.fx_norm.values()[..n];
        let (tx, ty) = xy(&self.tau);
        {
            let (kx, ky) = xy_mut(&mut self.kappa);
            let k2 = &mut self.dot[..n];
            let phi = &mut self.phi.values_mut()[..n];
            let scale_phi = inv2h * lambda;
            sweep!(n, |i, m, p| {
                let w = inv[i];
                let (a, b) = ((tx[p] - tx[m]) * inv2h * w, (ty[p] - ty[m]) * inv2h * w);
                kx[i] = a;
                ky[i] = b;
                k2[i] = a * a + b * b;
                phi[i] = (l[p] - l[m]) * scale_phi * w;
            });
        }

        let k2 = &self.dot[..n];
        let (kx, ky) = xy(&self.kappa);
        for m in 0..m_max {
            let (done, rest) = self.nabla_k.split_at_mut(m);
            let (sx, sy) = if m == 0 { (kx, ky) } else { xy(&done[m - 1]) };
            let (ox, oy) = xy_mut(&mut rest[0]);
            let (vx, vy) = xy_mut(&mut self.v);
            let with_v = m == 1;
            sweep!(n, |i, mm, p| {
                let (w, t0, t1) = (inv[i], tx[i], ty[i]);
                let (a, b) = ((sx[p] - sx[mm]) * inv2h * w, (sy[p] - sy[mm]) * inv2h * w);
                let dot = a * t0 + b * t1;
                let (a, b) = (a - dot * t0, b - dot * t1);
                ox[i] = a;
                oy[i] = b;
                if with_v {
                    let g = lambda * l[i] - 0.5 * k2[i];
                    vx[i] = -a + g * kx[i];
                    vy[i] = -b + g * ky[i];
                }
            });
        }
        Ok(())
    }
}

/// The two components of a planar field.
#[inline(always)]
fn xy(f: &VectorField) -> (&[f64], &[f64]) {
    f.raw().split_at(f.grid().nodes())
}

#[inline(always)]
fn xy_mut(f: &mut VectorField) -> (&mut [f64], &mut [f64]) {
    let n = f.grid().nodes();
    f.raw_mut().split_at_mut(n)
}

/// `out_i = (u_{i+1} - u_{i-1}) · scale`, periodic, handing each value to
/// `then` in the same sweep.
#[inline(always)]
fn diff_then(u: &[f64], scale: f64, out: &mut [f64], mut then: impl FnMut(usize, f64)) {
    let n = u.len();
    let out = &mut out[..n];
    out[0] = (u[1] - u[n - 1]) * scale;
    then(0, out[0]);
    let (up, um, o) = (&u[2..n], &u[..n - 2], &mut out[1..n - 1]);
    for i in 0..n - 2 {
        let d = (up[i] - um[i]) * scale;
        o[i] = d;
        then(i + 1, d);
    }
    out[n - 1] = (u[0] - u[n - 2]) * scale;
    then(n - 1, out[n - 1]);
}

/// `out_i = (u_{i+1} - u_{i-1}) · scale · weight_i`, periodic, handing each
/// value to `then` in the same sweep.
#[inline(always)]
fn diff_weighted_then(
    u: &[f64],
    scale: f64,
    weight: &[f64],
    out: &mut [f64],
    mut then: impl FnMut(usize, f64),
) {
    let n = u.len();
    let (weight, out) = (&weight[..n], &mut out[..n]);
    out[0] = (u[1] - u[n - 1]) * scale * weight[0];
    then(0, out[0]);
    let (up, um) = (&u[2..n], &u[..n - 2]);
    let (w, o) = (&weight[1..n - 1], &mut out[1..n - 1]);
    for i in 0..n - 2 {
        let d = (up[i] - um[i]) * scale * w[i];
        o[i] = d;
        then(i + 1, d);
    }
    out[n - 1] = (u[0] - u[n - 2]) * scale * weight[n - 1];
    then(n - 1, out[n - 1]);
}

#[inline(always)]
fn diff_weighted(u: &[f64], scale: f64, weight: &[f64], out: &mut [f64]) {
    diff_weighted_then(u, scale, weight, out, |_, _| ());
}

/// `out = dx(src) / |f_x|` and `dot = ⟨out, τ⟩`.
#[inline(always)]
fn ds_tangent_dot(
    src: &VectorField,
    tau: &VectorField,
    inv_fx: &[f64],
    inv2h: f64,
    out: &mut VectorField,
    dot: &mut [f64],
) {
    let n = dot.len();
    for c in 0..src.dim() {
        let (o, s, t) = (out.component_mut(c), src.component(c), &tau.component(c)[..n]);
        if c == 0 {
            diff_weighted_then(s, inv2h, inv_fx, o, |i, d| dot[i] = d * t[i]);
        } else {
            diff_weighted_then(s, inv2h, inv_fx, o, |i, d| dot[i] += d * t[i]);
        }
    }
}

/// `out = P_τ^⊥ (dx(src) / |f_x|)`.
#[inline(always)]
fn ds_project_into(
    src: &VectorField,
    tau: &VectorField,
    inv_fx: &[f64],
    inv2h: f64,
    out: &mut VectorField,
    dot: &mut [f64],
) {
    ds_tangent_dot(src, tau, inv_fx, inv2h, out, dot);
    let n = dot.len();
    for c in 0..src.dim() {
        let (o, t) = (&mut out.component_mut(c)[..n], &tau.component(c)[..n]);
        for i in 0..n {
            o[i] -= dot[i] * t[i];
        }
    }
}

/// Computes all pointwise geometric quantities of `curve`.
pub fn geometry(curve: &CurveState, lambda: f64, m_max: usize) -> Result<GeometryCache> {
    let mut cache = GeometryCache::empty(curve.grid(), curve.dim(), m_max.max(2));
    cache.update(curve, lambda, m_max)?;
    Ok(cache)
}

/// `max_i |⟨κ_i, τ_i⟩|`; vanishes in the continuum.
pub fn kappa_tangential_residual(cache: &GeometryCache) -> f64 {
    (0..cache.grid().nodes())
        .map(|i| {
            (0..cache.tau.dim())
                .map(|c| cache.kappa.get(i, c) * cache.tau.get(i, c))
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

/// Max-norm residual of `∂_s κ = ∇_s κ - |κ|² τ`.
pub fn qlemma_residual(curve: &CurveState) -> Result<f64> {
    let g = geometry(curve, 1.0, 2)?;
    let lhs = ds(&g.kappa, &g.fx_norm)?;
    let k2 = g.kappa.dot(&g.kappa);
    let mut rhs = g.nabla(1).clone();
    rhs.axpy(-1.0, &g.tau.scaled_by(&k2));
    Ok(lhs.max_norm_diff(&rhs))
}

/// Max-norm residual of `f_xx = |f_x|² κ + (φ/λ) |f_x| τ`.
pub fn fxx_decomposition_residual(curve: &CurveState, lambda: f64) -> Result<f64> {
    let g = geometry(curve, lambda, 2)?;
    let fxx = dx(&g.fx);
    let l = g.fx_norm.values();
    let mut rhs = g.kappa.clone();
    for c in 0..curve.dim() {
        let tau = g.tau.component(c);
        for (i, v) in rhs.component_mut(c).iter_mut().enumerate() {
            *v = l[i] * l[i] * *v + g.phi.values()[i] / lambda * l[i] * tau[i];
        }
    }
    Ok(fxx.max_norm_diff(&rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn circle(n: usize, r: f64) -> CurveState {
        let grid = Grid::new(n).unwrap();
        let pts = VectorField::from_fn(grid, 2, |x, p| {
            p[0] = r * x.cos();
            p[1] = r * x.sin();
        });
        CurveState::new(0.0, pts).unwrap()
    }

    fn warped(n: usize, alpha: f64) -> CurveState {
        let grid = Grid::new(n).unwrap();
        let pts = VectorField::from_fn(grid, 2, |x, p| {
            let u = x + alpha * x.sin();
            p[0] = u.cos();
            p[1] = u.sin();
        });
        CurveState::new(0.0, pts).unwrap()
    }

    fn ellipse(n: usize) -> CurveState {
        let grid = Grid::new(n).unwrap();
        let pts = VectorField::from_fn(grid, 2, |x, p| {
            p[0] = 2.0 * x.cos();
            p[1] = x.sin();
        });
        CurveState::new(0.0, pts).unwrap()
    }

    #[test]
    fn grid_rejects_odd_and_small() {
        assert!(Grid::new(7).is_err());
        assert!(Grid::new(6).is_err());
        assert!(Grid::new(8).is_ok());
    }

    #[test]
    fn dx_of_constant_is_zero() {
        let grid = Grid::new(64).unwrap();
        let f = ScalarField::from_fn(grid, |_| 3.7);
        assert!(dx(&f).values().iter().all(|&v| v == 0.0));
    }

    fn sin_error(n: usize) -> f64 {
        let grid = Grid::new(n).unwrap();
        let d = dx(&ScalarField::from_fn(grid, f64::sin));
        d.max_abs_diff(&ScalarField::from_fn(grid, f64::cos))
    }

    #[test]
    fn dx_of_sine_is_second_order() {
        // exact error of the stencil is |1 - sin(h)/h| ~ h²/6
        let h = Grid::new(256).unwrap().h();
        assert!(sin_error(256) <= h * h / 6.0 * 1.01);
        let ratio = sin_error(128) / sin_error(256);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn dx_commutes_with_index_shift() {
        let grid = Grid::new(32).unwrap();
        let f = ScalarField::from_fn(grid, |x| x.sin() + 0.2 * (3.0 * x).cos());
        let shift = |s: &ScalarField| {
            let v = s.values();
            ScalarField::new(grid, (0..32).map(|i| v[(i + 1) % 32]).collect()).unwrap()
        };
        assert_eq!(dx(&shift(&f)), shift(&dx(&f)));
    }

    #[test]
    fn ds_equals_dx_on_unit_speed_circle() {
        let g = geometry(&circle(64, 1.0), 1.0, 2).unwrap();
        // |f_x| = sin(h)/h on the discrete circle; rescale to compare
        let f = ScalarField::from_fn(g.grid(), |x| (2.0 * x).sin());
        let a = ds(&f, &g.fx_norm).unwrap();
        let b = dx(&f);
        let sigma = g.fx_norm.values()[0];
        let diff = a
            .values()
            .iter()
            .zip(b.values())
            .fold(0.0f64, |m, (p, q)| m.max((p * sigma - q).abs()));
        assert!(diff < 1e-13);
    }

    #[test]
    fn circle_of_radius_two_has_curvature_half() {
        for n in [64, 128] {
            let g = geometry(&circle(n, 2.0), 1.0, 2).unwrap();
            let err = (g.kappa.norms().max() - 0.5).abs();
            assert!(err < 1e-12, "{err}");
        }
    }

    #[test]
    fn ds_of_length_element_on_warped_circle() {
        let alpha = 0.3;
        let mut errs = Vec::new();
        for n in [128, 256] {
            let c = warped(n, alpha);
            let g = geometry(&c, 1.0, 2).unwrap();
            let d = ds(&g.fx_norm, &g.fx_norm).unwrap();
            let exact = ScalarField::from_fn(c.grid(), |x| {
                -alpha * x.sin() / (1.0 + alpha * x.cos())
            });
            errs.push(d.max_abs_diff(&exact));
        }
        let ratio = errs[0] / errs[1];
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        assert!(errs[1] < 1e-3);
    }

    #[test]
    fn degenerate_curve_is_rejected() {
        let grid = Grid::new(8).unwrap();
        let pts = VectorField::zeros(grid, 2);
        assert!(matches!(
            CurveState::new(0.0, pts),
            Err(CurveError::DegenerateGrid { .. })
        ));
        let f = ScalarField::from_fn(grid, f64::sin);
        let zero = ScalarField::zeros(grid);
        assert!(ds(&f, &zero).is_err());
    }

    #[test]
    fn circle_geometry_matches_closed_form() {
        let (r, lambda) = (1.5, 0.7);
        let c = circle(128, r);
        let g = geometry(&c, lambda, 3).unwrap();
        let h = c.h();
        let speed = r * h.sin() / h;
        assert!((g.fx_norm.max() - r).abs() < h * h);
        assert!(g.phi.max_abs() < 1e-12);
        assert!(g.nabla(1).max_norm() < 1e-12);
        let expected = lambda * speed - 1.0 / (2.0 * r * r);
        for i in 0..c.nodes() {
            // κ = -x/r², V = κ (λ|f_x| - 1/(2r²))
            for k in 0..2 {
                let kap = -c.points().get(i, k) / (r * r);
                assert!((g.v.get(i, k) - kap * expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stationary_circle_has_vanishing_velocity() {
        let lambda: f64 = 0.5;
        let r = (2.0 * lambda).powf(-1.0 / 3.0);
        let c = circle(128, r);
        let g = geometry(&c, lambda, 2).unwrap();
        let h = c.h();
        assert!(g.v.max_norm() <= h * h);
        assert!(g.phi.max_abs() < 1e-12);
    }

    #[test]
    fn normal_project_cases() {
        let g = geometry(&ellipse(32), 1.0, 2).unwrap();
        let tangential = g.tau.scaled_by(&ScalarField::from_fn(g.grid(), |x| 1.0 + x));
        assert!(normal_project(&tangential, &g.tau).max_norm() < 1e-14);
        let normal = normal_project(&g.kappa, &g.tau);
        let again = normal_project(&normal, &g.tau);
        assert!(again.max_norm_diff(&normal) < 1e-15);
        assert!(normal.dot(&g.tau).max_abs() < TOL_NORMAL);
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn avx_update_matches_baseline_bitwise() {
        if !std::arch::is_x86_feature_detected!("avx") {
            return;
        }
        let bits = |f: &[f64]| f.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        // 90 nodes leaves scalar remainders in every vector loop
        let helix = CurveState::new(
            0.0,
            VectorField::from_fn(Grid::new(90).unwrap(), 3, |x, p| {
                p[0] = (x + 0.3 * x.sin()).cos();
                p[1] = x.sin();
                p[2] = 0.2 * (2.0 * x).cos();
            }),
        )
        .unwrap();
        for curve in [warped(90, 0.4), helix] {
            let mut plain = geometry(&curve, 0.7, 3).unwrap();
            let mut wide = plain.clone();
            plain.update_impl(&curve, 0.7, 3).unwrap();
            unsafe { wide.update_avx(&curve, 0.7, 3).unwrap() };
            let fields = |g: &GeometryCache| {
                let mut v = vec![bits(g.fx_norm.raw()), bits(g.tau.raw()), bits(g.kappa.raw())];
                v.extend(g.nabla_k.iter().map(|f| bits(f.raw())));
                v.extend([bits(g.phi.raw()), bits(g.v.raw()), bits(g.inv_fx())]);
                v
            };
            assert_eq!(fields(&plain), fields(&wide));
        }
    }

    #[test]
    fn planar_sweep_matches_generic_bitwise() {
        let bits = |g: &GeometryCache| {
            let mut v = vec![g.fx.raw().to_vec(), g.fx_norm.raw().to_vec(), g.tau.raw().to_vec()];
            v.extend([g.kappa.raw().to_vec(), g.phi.raw().to_vec(), g.v.raw().to_vec()]);
            v.extend(g.nabla_k.iter().map(|f| f.raw().to_vec()));
            v.push(g.inv_fx().to_vec());
            v.into_iter()
                .map(|f| f.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        for (curve, m_max) in [(warped(90, 0.4), 3), (ellipse(32), 2), (circle(8, 1.5), 4)] {
            let mut planar = geometry(&curve, 0.7, m_max).unwrap();
            let mut generic = planar.clone();
            planar.fill_planar(&curve, 0.7, m_max).unwrap();
            generic.fill_generic(&curve, 0.7, m_max).unwrap();
            assert_eq!(bits(&planar), bits(&generic));
        }
    }

    #[test]
    fn cache_invariants() {
        let g = geometry(&warped(64, 0.4), 0.8, 3).unwrap();
        let t = g.tau.norms();
        assert!(t.values().iter().all(|v| (v - 1.0).abs() < TOL_NORMAL));
        for m in 1..=3 {
            assert!(g.nabla(m).dot(&g.tau).max_abs() < TOL_NORMAL);
        }
    }

    #[test]
    fn qlemma_on_unit_circle() {
        let c = circle(128, 1.0);
        let h = c.h();
        assert!(qlemma_residual(&c).unwrap() <= 10.0 * h * h);
    }

    #[test]
    fn qlemma_refines_at_second_order_on_ellipse() {
        let ratio = qlemma_residual(&ellipse(128)).unwrap() / qlemma_residual(&ellipse(256)).unwrap();
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
        let w: Vec<f64> = [64, 128, 256]
            .iter()
            .map(|&n| qlemma_residual(&warped(n, 0.3)).unwrap())
            .collect();
        assert!(w[0] > w[1] && w[1] > w[2] && w[2].is_finite());
    }

    #[test]
    fn fxx_decomposition_converges() {
        let a = fxx_decomposition_residual(&ellipse(128), 0.5).unwrap();
        let b = fxx_decomposition_residual(&ellipse(256), 0.5).unwrap();
        assert!((3.0..=5.0).contains(&(a / b)));
    }

    #[test]
    fn kappa_tangential_part_vanishes_under_refinement() {
        let a = kappa_tangential_residual(&geometry(&warped(64, 0.3), 1.0, 2).unwrap());
        let b = kappa_tangential_residual(&geometry(&warped(128, 0.3), 1.0, 2).unwrap());
        assert!(a / b > 3.0, "{a} {b}");
    }

    #[test]
    fn summation_by_parts_is_exact() {
        let grid = Grid::new(48).unwrap();
        let u = ScalarField::from_fn(grid, |x| (x.sin() * 3.0).exp());
        let v = ScalarField::from_fn(grid, |x| (2.0 * x).cos() + x.sin().powi(3));
        let (du, dv) = (dx(&u), dx(&v));
        let s: f64 = (0..48)
            .map(|i| u.values()[i] * dv.values()[i] + v.values()[i] * du.values()[i])
            .sum();
        assert!(s.abs() < 1e-11, "{s}");
    }

    #[test]
    fn geometry_is_translation_invariant() {
        let c = ellipse(64);
        let shifted = c.translated(&[3.0, -1.0]).unwrap();
        let (a, b) = (
            geometry(&c, 1.0, 3).unwrap(),
            geometry(&shifted, 1.0, 3).unwrap(),
        );
        assert!(a.v.max_norm_diff(&b.v) < 1e-9);
        assert!(a.fx_norm.max_abs_diff(&b.fx_norm) < 1e-12);
        assert!(a.phi.max_abs_diff(&b.phi) < 1e-10);
    }

    #[test]
    fn geometry_is_rotation_equivariant() {
        let c = warped(64, 0.3);
        let th = PI / 7.0;
        let (cs, sn) = (th.cos(), th.sin());
        let rot = |p: &[f64]| vec![cs * p[0] - sn * p[1], sn * p[0] + cs * p[1]];
        let rc = c.map_nodes(rot).unwrap();
        let (a, b) = (geometry(&c, 1.0, 2).unwrap(), geometry(&rc, 1.0, 2).unwrap());
        assert!(a.fx_norm.max_abs_diff(&b.fx_norm) < 1e-12);
        assert!(a.phi.max_abs_diff(&b.phi) < 1e-10);
        for i in 0..64 {
            let rv = rot(&a.v.point(i));
            let diff = ((rv[0] - b.v.get(i, 0)).powi(2) + (rv[1] - b.v.get(i, 1)).powi(2)).sqrt();
            assert!(diff < 1e-8 * (1.0 + a.v.max_norm()));
        }
    }
}
