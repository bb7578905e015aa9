//! Charts `t -> Pi(A + sum t_i e_i)` of the manifold of normalized potentials,
//! the induced metric, geodesics, parallel transport and Fermi surfaces.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function_space::CylinderFunction;
use crate::geometry::{orthonormal_tangent_basis, orthonormal_tangent_basis_at, BasePoint, TangentVector};
use crate::transfer::normalize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum DpiMethod {
    /// Linear-response formula through the resolvent of the transfer operator.
    Analytic,
    /// `(Pi(B + eps e) - Pi(B - eps e)) / 2 eps`.
    SymmetricDifference { eps: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChartConfig {
    /// Initial validity radius in the coordinate sup-norm; shrunk until the
    /// metric is well conditioned on the axes and diagonals.
    pub radius: f64,
    pub max_condition: f64,
    /// Step of the central differences of the metric.
    pub christoffel_step: f64,
    /// Combine metric differences at `h` and `h/2`.
    pub richardson: bool,
    pub dpi: DpiMethod,
    /// Largest tolerated relative drift of the geodesic energy.
    pub energy_tol: f64,
}

impl Default for ChartConfig {
    fn default() -> Self {
        ChartConfig {
            radius: 0.25,
            max_condition: 10.0,
            christoffel_step: 1e-3,
            richardson: true,
            dpi: DpiMethod::Analytic,
            energy_tol: 1e-6,
        }
    }
}

/// Everything the chart knows at one coordinate point.
#[derive(Clone, Debug)]
pub struct Frame {
    pub coords: DVector<f64>,
    pub point: BasePoint,
    /// `v_i = D Pi(e_i)`, the coordinate vector fields as potentials.
    pub fields: Vec<CylinderFunction>,
    pub metric: DMatrix<f64>,
}

impl Frame {
    /// `X = sum u_i v_i`.
    pub fn push_forward(&self, u: &DVector<f64>) -> Result<CylinderFunction> {
        let mut x = CylinderFunction::zeros(self.fields[0].space());
        for (ui, v) in u.iter().zip(&self.fields) {
            x = x.axpy(*ui, v)?;
        }
        Ok(x)
    }

    pub fn energy(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.metric * u))
    }
}

/// Christoffel symbols of the second kind, `gamma[k][(i, j)]`.
#[derive(Clone, Debug)]
pub struct Christoffel {
    pub gamma: Vec<DMatrix<f64>>,
}

impl Christoffel {
    /// `c_k = sum_ij gamma[k]_ij a_i b_j`.
    pub fn contract(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.gamma.len(), self.gamma.iter().map(|g| a.dot(&(g * b))))
    }
}

#[derive(Clone, Debug)]
pub struct Chart {
    base: Arc<BasePoint>,
    basis: Vec<CylinderFunction>,
    radius: f64,
    config: ChartConfig,
}

impl Chart {
    /// Chart on the depth-`k` submanifold through the Gram-Schmidt kernel basis.
    pub fn new(base: Arc<BasePoint>, config: ChartConfig) -> Result<Self> {
        let basis = orthonormal_tangent_basis(&base)?;
        Self::with_basis(base, basis.into_iter().map(TangentVector::into_value).collect(), config)
    }

    /// Chart through the kernel basis of depth-`depth` functions, `depth >= k`.
    pub fn at_depth(base: Arc<BasePoint>, depth: usize, config: ChartConfig) -> Result<Self> {
        let basis = orthonormal_tangent_basis_at(&base, depth)?;
        Self::with_basis(base, basis.into_iter().map(TangentVector::into_value).collect(), config)
    }

    /// Chart with a caller-supplied orthonormal kernel basis.
    pub fn with_basis(base: Arc<BasePoint>, basis: Vec<CylinderFunction>, config: ChartConfig) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::usage("chart basis is empty"));
        }
        let depth = basis[0].depth();
        if basis.iter().any(|e| e.depth() != depth || e.d() != base.space().d()) {
            return Err(Error::usage("chart basis vectors must share one space"));
        }
        let mut chart = Chart { base, basis, radius: config.radius, config };
        chart.fit_radius()?;
        Ok(chart)
    }

    fn fit_radius(&mut self) -> Result<()> {
        let m = self.dim();
        for _ in 0..40 {
            let r = self.radius;
            let mut probes: Vec<DVector<f64>> = Vec::with_capacity(2 * m + 2);
            for i in 0..m {
                for sign in [1.0, -1.0] {
                    let mut t = DVector::zeros(m);
                    t[i] = sign * r;
                    probes.push(t);
                }
            }
            probes.push(DVector::from_element(m, r));
            probes.push(DVector::from_element(m, -r));
            if probes.iter().all(|t| self.frame_unchecked(t).is_ok()) {
                return Ok(());
            }
            self.radius *= 0.8;
        }
        Err(Error::Structural("no well-conditioned chart neighborhood".into()))
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn base(&self) -> &Arc<BasePoint> {
        &self.base
    }

    pub fn basis(&self) -> &[CylinderFunction] {
        &self.basis
    }

    pub fn config(&self) -> &ChartConfig {
        &self.config
    }

    fn check(&self, t: &DVector<f64>) -> Result<()> {
        if t.len() != self.dim() {
            return Err(Error::usage(format!("expected {} coordinates, got {}", self.dim(), t.len())));
        }
        let norm = t.amax();
        if !(norm <= self.radius * (1.0 + 1e-12)) {
            return Err(Error::ChartBoundary(format!("|t| = {norm} exceeds radius {}", self.radius)));
        }
        Ok(())
    }

    fn offset(&self, t: &DVector<f64>) -> Result<CylinderFunction> {
        let mut b = self.base.potential().embed(self.basis[0].depth())?;
        for (ti, e) in t.iter().zip(&self.basis) {
            b = b.axpy(*ti, e)?;
        }
        Ok(b)
    }

    /// `Pi(A + sum t_i e_i)`.
    pub fn map(&self, t: &DVector<f64>) -> Result<CylinderFunction> {
        self.check(t)?;
        normalize(&self.offset(t)?)
    }

    pub fn frame(&self, t: &DVector<f64>) -> Result<Frame> {
        self.check(t)?;
        self.frame_unchecked(t)
    }

    fn frame_unchecked(&self, t: &DVector<f64>) -> Result<Frame> {
        let b = self.offset(t)?;
        let point = BasePoint::project(&b)?;
        let fields = self
            .basis
            .iter()
            .map(|e| match self.config.dpi {
                DpiMethod::Analytic => point.dpi(e),
                DpiMethod::SymmetricDifference { eps } => {
                    let plus = normalize(&b.axpy(eps, e)?)?;
                    let minus = normalize(&b.axpy(-eps, e)?)?;
                    Ok(plus.try_sub(&minus)?.scale(0.5 / eps))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let m = fields.len();
        let mut metric = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = point.integrate(&fields[i].try_mul(&fields[j])?)?;
                metric[(i, j)] = v;
                metric[(j, i)] = v;
            }
        }
        let eig = metric.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > 0.0) || hi / lo > self.config.max_condition {
            return Err(Error::ChartBoundary(format!(
                "metric condition number {:.3} at t = {:?}",
                hi / lo,
                t.as_slice()
            )));
        }
        Ok(Frame { coords: t.clone(), point, fields, metric })
    }

    pub fn metric(&self, t: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.frame(t)?.metric)
    }

    /// `dM/dt_l` for each `l`, by central differences (Richardson-combined if configured).
    pub fn metric_derivatives(&self, t: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.check(t)?;
        let h = self.config.christoffel_step;
        let diff = |l: usize, h: f64| -> Result<DMatrix<f64>> {
            let mut tp = t.clone();
            let mut tm = t.clone();
            tp[l] += h;
            tm[l] -= h;
            Ok((self.frame_unchecked(&tp)?.metric - self.frame_unchecked(&tm)?.metric) / (2.0 * h))
        };
        (0..self.dim())
            .map(|l| {
                let coarse = diff(l, h)?;
                if self.config.richardson {
                    let fine = diff(l, h / 2.0)?;
                    Ok((fine * 4.0 - coarse) / 3.0)
                } else {
                    Ok(coarse)
                }
            })
            .collect()
    }

    pub fn christoffel(&self, t: &DVector<f64>) -> Result<Christoffel> {
        let metric = self.frame(t)?.metric;
        self.christoffel_with(t, &metric)
    }

    fn christoffel_with(&self, t: &DVector<f64>, metric: &DMatrix<f64>) -> Result<Christoffel> {
        let m = self.dim();
        let dm = self.metric_derivatives(t)?;
        let inv = metric
            .clone()
            .cholesky()
            .ok_or_else(|| Error::ChartBoundary("metric is not positive definite".into()))?
            .inverse();
        // first kind: [ij, l] = (d_i M_jl + d_j M_il - d_l M_ij) / 2
        let first: Vec<DMatrix<f64>> = (0..m)
            .map(|l| DMatrix::from_fn(m, m, |i, j| 0.5 * (dm[i][(j, l)] + dm[j][(i, l)] - dm[l][(i, j)])))
            .collect();
        let gamma = (0..m)
            .map(|k| {
                let mut g = DMatrix::zeros(m, m);
                for (l, f) in first.iter().enumerate() {
                    g += f * inv[(k, l)];
                }
                g
            })
            .collect();
        Ok(Christoffel { gamma })
    }
}

/// Geodesic (and optionally parallel fields along it) on a symmetric time grid.
#[derive(Clone, Debug)]
pub struct GeodesicPath {
    pub step: f64,
    pub times: Vec<f64>,
    pub coords: Vec<DVector<f64>>,
    pub velocity: Vec<DVector<f64>>,
    /// `u^T M u` at each sample.
    pub energy: Vec<f64>,
    /// `int X dmu` at each sample, `X` the velocity pushed to potentials.
    pub constraint: Vec<f64>,
    /// Parallel fields, `transported[j][n]` is field `j` at sample `n`.
    pub transported: Vec<Vec<DVector<f64>>>,
}

impl GeodesicPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index of the sample at `t = 0`.
    pub fn center(&self) -> usize {
        self.times.len() / 2
    }

    pub fn energy_drift(&self) -> f64 {
        let e0 = self.energy[self.center()];
        self.energy.iter().map(|e| (e - e0).abs() / e0).fold(0.0, f64::max)
    }

    pub fn constraint_drift(&self) -> f64 {
        self.constraint.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn export(&self) -> PathExport {
        let rows = |v: &[DVector<f64>]| v.iter().map(|x| x.as_slice().to_vec()).collect();
        PathExport {
            step: self.step,
            times: self.times.clone(),
            coords: rows(&self.coords),
            velocity: rows(&self.velocity),
            energy: self.energy.clone(),
            constraint: self.constraint.clone(),
            energy_drift: self.energy_drift(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathExport {
    pub step: f64,
    pub times: Vec<f64>,
    pub coords: Vec<Vec<f64>>,
    pub velocity: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    pub constraint: Vec<f64>,
    pub energy_drift: f64,
}

#[derive(Clone)]
struct State {
    x: DVector<f64>,
    u: DVector<f64>,
    ys: Vec<DVector<f64>>,
}

impl State {
    fn axpy(&self, c: f64, k: &State) -> State {
        State {
            x: &self.x + &k.x * c,
            u: &self.u + &k.u * c,
            ys: self.ys.iter().zip(&k.ys).map(|(y, ky)| y + ky * c).collect(),
        }
    }
}

fn rhs(chart: &Chart, s: &State) -> Result<State> {
    chart.check(&s.x)?;
    let metric = chart.frame_unchecked(&s.x)?.metric;
    let g = chart.christoffel_with(&s.x, &metric)?;
    Ok(State { x: s.u.clone(), u: -g.contract(&s.u, &s.u), ys: s.ys.iter().map(|y| -g.contract(&s.u, y)).collect() })
}

fn rk4(chart: &Chart, s: &State, dt: f64) -> Result<State> {
    let k1 = rhs(chart, s)?;
    let k2 = rhs(chart, &s.axpy(dt / 2.0, &k1))?;
    let k3 = rhs(chart, &s.axpy(dt / 2.0, &k2))?;
    let k4 = rhs(chart, &s.axpy(dt, &k3))?;
    let mut out = s.axpy(dt / 6.0, &k1);
    out = out.axpy(dt / 3.0, &k2);
    out = out.axpy(dt / 3.0, &k3);
    Ok(out.axpy(dt / 6.0, &k4))
}

fn run(chart: &Chart, start: State, dt: f64, n: usize) -> Result<Vec<State>> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(start);
    for _ in 0..n {
        let next = rk4(chart, out.last().expect("nonempty"), dt)?;
        out.push(next);
    }
    Ok(out)
}

/// Geodesic through `x` with velocity `u`, integrated over `[-span, span]`
/// with a fixed fourth-order step, carrying the fields `ys` by parallel transport.
pub fn geodesic_from(
    chart: &Chart,
    x: &DVector<f64>,
    u: &DVector<f64>,
    span: f64,
    step: f64,
    ys: &[DVector<f64>],
) -> Result<GeodesicPath> {
    if !(step > 0.0 && span >= 0.0) {
        return Err(Error::usage("geodesic needs a positive step and nonnegative span"));
    }
    let n = (span / step).round() as usize;
    if (n as f64 * step - span).abs() > 1e-9 * span.max(1.0) {
        return Err(Error::usage(format!("span {span} is not a multiple of the step {step}")));
    }
    let m = chart.dim();
    if x.len() != m || u.len() != m || ys.iter().any(|y| y.len() != m) {
        return Err(Error::usage("coordinate vectors do not match the chart dimension"));
    }
    chart.check(x)?;
    let forward = run(chart, State { x: x.clone(), u: u.clone(), ys: ys.to_vec() }, step, n)?;
    let backward = run(
        chart,
        State { x: x.clone(), u: -u, ys: ys.iter().map(|y| -y).collect() },
        step,
        n,
    )?;
    let mut states: Vec<State> = backward
        .into_iter()
        .skip(1)
        .rev()
        .map(|s| State { x: s.x, u: -s.u, ys: s.ys.into_iter().map(|y| -y).collect() })
        .collect();
    states.extend(forward);

    let mut path = GeodesicPath {
        step,
        times: (0..=2 * n).map(|i| (i as f64 - n as f64) * step).collect(),
        coords: Vec::with_capacity(2 * n + 1),
        velocity: Vec::with_capacity(2 * n + 1),
        energy: Vec::with_capacity(2 * n + 1),
        constraint: Vec::with_capacity(2 * n + 1),
        transported: vec![Vec::with_capacity(2 * n + 1); ys.len()],
    };
    for s in states {
        let frame = chart.frame(&s.x)?;
        path.energy.push(frame.energy(&s.u));
        path.constraint.push(frame.point.integrate(&frame.push_forward(&s.u)?)?);
        for (j, y) in s.ys.into_iter().enumerate() {
            path.transported[j].push(y);
        }
        path.coords.push(s.x);
        path.velocity.push(s.u);
    }
    let drift = path.energy_drift();
    if drift > chart.config.energy_tol {
        return Err(Error::Accuracy(format!(
            "geodesic energy drifted by {drift:e}; use a smaller step than {step}"
        )));
    }
    Ok(path)
}

/// Geodesic from the chart origin with unit initial velocity `x0`, sampled
/// on `[-rho, rho]`; the default step is `rho / 200`.
pub fn geodesic_shoot(chart: &Chart, x0: &DVector<f64>, rho: f64, step: Option<f64>) -> Result<GeodesicPath> {
    if !(rho > 0.0) || rho > chart.radius() {
        return Err(Error::usage(format!("rho = {rho} must lie in (0, {}]", chart.radius())));
    }
    let origin = DVector::zeros(chart.dim());
    let e = chart.frame(&origin)?.energy(x0);
    if (e - 1.0).abs() > 1e-8 {
        return Err(Error::usage(format!("initial velocity has squared norm {e}, expected 1")));
    }
    geodesic_from(chart, &origin, x0, rho, step.unwrap_or(rho / 200.0), &[])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportField {
    pub times: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    /// `|Y(t)|` in the metric at `gamma(t)`.
    pub norms: Vec<f64>,
    /// `<gamma'(t), Y(t)>`.
    pub velocity_inner: Vec<f64>,
}

impl TransportField {
    pub fn norm_drift(&self) -> f64 {
        let n0 = self.norms[self.norms.len() / 2];
        self.norms.iter().map(|n| (n - n0).abs()).fold(0.0, f64::max)
    }

    pub fn inner_drift(&self) -> f64 {
        let c0 = self.velocity_inner[self.velocity_inner.len() / 2];
        self.velocity_inner.iter().map(|c| (c - c0).abs()).fold(0.0, f64::max)
    }
}

/// Parallel transport of `y0` (chart coordinates at the path center) along `path`.
pub fn parallel_transport(chart: &Chart, path: &GeodesicPath, y0: &DVector<f64>) -> Result<TransportField> {
    let c = path.center();
    let span = path.times[path.len() - 1];
    let joint = geodesic_from(chart, &path.coords[c], &path.velocity[c], span, path.step, std::slice::from_ref(y0))?;
    let mut field = TransportField { times: joint.times.clone(), vectors: vec![], norms: vec![], velocity_inner: vec![] };
    for (n, y) in joint.transported[0].iter().enumerate() {
        let metric = chart.frame(&joint.coords[n])?.metric;
        let my = &metric * y;
        field.norms.push(y.dot(&my).sqrt());
        field.velocity_inner.push(joint.velocity[n].dot(&my));
        field.vectors.push(y.as_slice().to_vec());
    }
    Ok(field)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FermiConfig {
    /// Grid spacing in `t` and `s`.
    pub h: f64,
    /// Integrator steps per grid spacing.
    pub substeps: usize,
}

impl Default for FermiConfig {
    fn default() -> Self {
        FermiConfig { h: 0.02, substeps: 4 }
    }
}

/// Five-point Fermi patch `S(t_i, s_j)`, `t_i, s_j in {-2h, .., 2h}`: the base
/// geodesic along `x0` carries `y0` by parallel transport, and each `s`-line is
/// the geodesic leaving `gamma(t_i)` along the transported field.
#[derive(Clone, Debug)]
pub struct FermiSurface {
    pub h: f64,
    pub grid: Vec<f64>,
    /// `coords[i][j]` are the chart coordinates of `S(t_i, s_j)`.
    pub coords: Vec<Vec<DVector<f64>>>,
    pub potentials: Vec<Vec<CylinderFunction>>,
    /// Speed of each `s`-line.
    pub s_speed: Vec<f64>,
    pub base: Arc<BasePoint>,
}

pub const FIRST: [f64; 5] = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
pub const SECOND: [f64; 5] = [-1.0 / 12.0, 16.0 / 12.0, -30.0 / 12.0, 16.0 / 12.0, -1.0 / 12.0];

fn stencil(weights: &[f64; 5], values: impl Fn(usize) -> CylinderFunction, scale: f64) -> Result<CylinderFunction> {
    let mut out = values(0).scale(weights[0]);
    for (i, w) in weights.iter().enumerate().skip(1) {
        if *w != 0.0 {
            out = out.axpy(*w, &values(i))?;
        }
    }
    Ok(out.scale(scale))
}

impl FermiSurface {
    /// `X-bar(t_i, s_j)` for the center column `i = 2`, by the five-point rule in `t`.
    pub fn xbar(&self, j: usize) -> Result<CylinderFunction> {
        stencil(&FIRST, |i| self.potentials[i][j].clone(), 1.0 / self.h)
    }

    /// `Y(t_i, 0)` by the five-point rule in `s`.
    pub fn y(&self, i: usize) -> Result<CylinderFunction> {
        stencil(&FIRST, |j| self.potentials[i][j].clone(), 1.0 / self.h)
    }

    /// `d_t d_s S` at the center.
    pub fn y_t(&self) -> Result<CylinderFunction> {
        stencil(&FIRST, |i| self.y(i).expect("same space"), 1.0 / self.h)
    }

    /// `d_s d_s S` at the center.
    pub fn y_s(&self) -> Result<CylinderFunction> {
        stencil(&SECOND, |j| self.potentials[2][j].clone(), 1.0 / (self.h * self.h))
    }

    /// `d_t d_t S` at the center, the acceleration `X'` of the base geodesic.
    pub fn x_t(&self) -> Result<CylinderFunction> {
        stencil(&SECOND, |i| self.potentials[i][2].clone(), 1.0 / (self.h * self.h))
    }

    /// `<X-bar, Y>` at the center.
    pub fn center_inner(&self) -> Result<f64> {
        self.base.integrate(&self.xbar(2)?.try_mul(&self.y(2)?)?)
    }

    pub fn center(&self) -> &CylinderFunction {
        &self.potentials[2][2]
    }
}

pub fn fermi_surface(chart: &Chart, x0: &DVector<f64>, y0: &DVector<f64>, config: FermiConfig) -> Result<FermiSurface> {
    if config.substeps == 0 || !(config.h > 0.0) {
        return Err(Error::usage("Fermi grid needs a positive spacing and at least one substep"));
    }
    let metric = chart.frame(&DVector::zeros(chart.dim()))?.metric;
    let (xx, yy, xy) = (x0.dot(&(&metric * x0)), y0.dot(&(&metric * y0)), x0.dot(&(&metric * y0)));
    if (xx - 1.0).abs() > 1e-8 || (yy - 1.0).abs() > 1e-8 || xy.abs() > 1e-8 {
        return Err(Error::usage("Fermi surface needs an orthonormal pair at the origin"));
    }
    let h = config.h;
    let step = h / config.substeps as f64;
    let origin = DVector::zeros(chart.dim());
    let base = geodesic_from(chart, &origin, x0, 2.0 * h, step, std::slice::from_ref(y0))?;
    let mut coords = Vec::with_capacity(5);
    let mut potentials = Vec::with_capacity(5);
    let mut s_speed = Vec::with_capacity(5);
    for i in 0..5 {
        let n = i * config.substeps;
        let yi = &base.transported[0][n];
        let line = geodesic_from(chart, &base.coords[n], yi, 2.0 * h, step, &[])?;
        s_speed.push(line.energy[line.center()].sqrt());
        let row: Vec<DVector<f64>> = (0..5).map(|j| line.coords[j * config.substeps].clone()).collect();
        potentials.push(row.iter().map(|t| chart.map(t)).collect::<Result<Vec<_>>>()?);
        coords.push(row);
    }
    Ok(FermiSurface {
        h,
        grid: (0..5).map(|i| (i as f64 - 2.0) * h).collect(),
        coords,
        potentials,
        s_speed,
        base: chart.base().clone(),
    })
}

/// Gap between geodesics shot along the same tangent vector in charts of
/// increasing basis depth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruncationRow {
    pub depth: usize,
    pub dim: usize,
    /// Sup over samples and cylinders of the distance to the deepest chart's geodesic.
    pub gap_to_deepest: f64,
}

pub fn truncation_study(
    base: Arc<BasePoint>,
    x0: &CylinderFunction,
    rho: f64,
    step: f64,
    extra_depths: usize,
    config: &ChartConfig,
) -> Result<Vec<TruncationRow>> {
    let k = base.space().depth();
    let mut paths = Vec::new();
    for depth in k..=k + extra_depths {
        let chart = Chart::at_depth(base.clone(), depth, config.clone())?;
        let u: DVector<f64> = DVector::from_iterator(
            chart.dim(),
            chart.basis().iter().map(|e| base.integrate(&e.try_mul(x0).expect("same alphabet")).expect("depth within cap")),
        );
        let path = geodesic_from(&chart, &DVector::zeros(chart.dim()), &u, rho, step, &[])?;
        let pots = path.coords.iter().map(|t| chart.map(t)).collect::<Result<Vec<_>>>()?;
        paths.push((depth, chart.dim(), pots));
    }
    let deepest = paths.last().expect("at least one chart").2.clone();
    paths
        .into_iter()
        .map(|(depth, dim, pots)| {
            let mut gap: f64 = 0.0;
            for (p, q) in pots.iter().zip(&deepest) {
                gap = gap.max(p.sup_distance(q)?);
            }
            Ok(TruncationRow { depth, dim, gap_to_deepest: gap })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function_space::ShiftSpace;
    use crate::transfer::GibbsData;
    use rand::{Rng, SeedableRng};

    fn random_base(k: usize, seed: u64) -> Arc<BasePoint> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = ShiftSpace::new(2, k).unwrap();
        let b = CylinderFunction::from_fn(s, |_| rng.random_range(-0.5..0.5));
        Arc::new(BasePoint::normalized_from(&b).unwrap())
    }

    fn bernoulli(p: f64) -> Arc<BasePoint> {
        let s = ShiftSpace::new(2, 1).unwrap();
        Arc::new(BasePoint::new(CylinderFunction::new(s, vec![p.ln(), (1.0 - p).ln()]).unwrap()).unwrap())
    }

    fn unit(chart: &Chart, v: &[f64]) -> DVector<f64> {
        let v = DVector::from_column_slice(v);
        let e = chart.frame(&DVector::zeros(chart.dim())).unwrap().energy(&v);
        v / e.sqrt()
    }

    #[test]
    fn metric_at_origin_is_identity() {
        let chart = Chart::new(random_base(2, 3), ChartConfig::default()).unwrap();
        let m = chart.metric(&DVector::zeros(2)).unwrap();
        assert!((&m - DMatrix::identity(2, 2)).amax() < 1e-8);
        let m = chart.metric(&DVector::from_column_slice(&[0.1, 0.0])).unwrap();
        assert_eq!(m, m.transpose());
        let eig = m.symmetric_eigenvalues();
        assert!(eig.min() > 0.5 && eig.max() < 2.0, "{eig}");
        let a = chart.map(&DVector::zeros(2)).unwrap();
        assert!(a.sup_distance(chart.base().potential()).unwrap() < 1e-12);
    }

    #[test]
    fn finite_difference_fields_agree_with_analytic() {
        let base = random_base(2, 8);
        let analytic = Chart::new(base.clone(), ChartConfig::default()).unwrap();
        let fd = Chart::new(
            base,
            ChartConfig { dpi: DpiMethod::SymmetricDifference { eps: 1e-4 }, ..ChartConfig::default() },
        )
        .unwrap();
        let t = DVector::from_column_slice(&[0.05, -0.08]);
        assert!((analytic.metric(&t).unwrap() - fd.metric(&t).unwrap()).amax() < 1e-7);
    }

    #[test]
    fn outside_the_radius_is_a_chart_boundary() {
        let chart = Chart::new(random_base(2, 3), ChartConfig::default()).unwrap();
        let t = DVector::from_element(2, chart.radius() * 1.5);
        assert!(matches!(chart.map(&t), Err(Error::ChartBoundary(_))));
    }

    #[test]
    fn christoffel_matches_linear_response_oracle() {
        // d_l M_ij = int (d_l v_i v_j + v_i d_l v_j + v_i v_j v_l) dmu
        //          + sum_{n>=1} int v_l L^n (v_i v_j - M_ij) dmu
        use crate::transfer::correlation_sum;
        let chart = Chart::new(random_base(2, 6), ChartConfig::default()).unwrap();
        let t = DVector::from_column_slice(&[0.03, -0.02]);
        let frame = chart.frame(&t).unwrap();
        let gamma = chart.christoffel(&t).unwrap();
        let h = 1e-4;
        let dv: Vec<Vec<CylinderFunction>> = (0..2)
            .map(|l| {
                let mut tp = t.clone();
                let mut tm = t.clone();
                tp[l] += h;
                tm[l] -= h;
                let (fp, fm) = (chart.frame(&tp).unwrap(), chart.frame(&tm).unwrap());
                (0..2).map(|j| fp.fields[j].try_sub(&fm.fields[j]).unwrap().scale(0.5 / h)).collect()
            })
            .collect();
        let v = &frame.fields;
        let p = &frame.point;
        let dm = |l: usize, i: usize, j: usize| {
            let vij = v[i].try_mul(&v[j]).unwrap();
            let local = dv[l][i].try_mul(&v[j]).unwrap().try_add(&v[i].try_mul(&dv[l][j]).unwrap()).unwrap();
            p.integrate(&local.try_add(&vij.try_mul(&v[l]).unwrap()).unwrap()).unwrap()
                + correlation_sum(p.potential(), p.gibbs(), &v[l], &vij).unwrap()
        };
        let inv = frame.metric.clone().try_inverse().unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let oracle: f64 =
                        (0..2).map(|l| inv[(k, l)] * 0.5 * (dm(i, j, l) + dm(j, i, l) - dm(l, i, j))).sum();
                    assert!((gamma.gamma[k][(i, j)] - oracle).abs() < 1e-6, "{k}{i}{j}: {} vs {oracle}", gamma.gamma[k][(i, j)]);
                }
            }
        }
    }

    #[test]
    fn bernoulli_geodesic_is_the_fisher_arc() {
        let p0: f64 = 0.3;
        let chart = Chart::new(bernoulli(p0), ChartConfig::default()).unwrap();
        let x0 = unit(&chart, &[1.0]);
        let path = geodesic_shoot(&chart, &x0, 0.2, None).unwrap();
        // the basis vector is a positive multiple of 1_[0] - p, so p increases
        let theta0 = p0.sqrt().asin();
        for (t, c) in path.times.iter().zip(&path.coords) {
            let p = chart.map(c).unwrap().coeffs()[0].exp();
            let exact = (theta0 + t / 2.0).sin().powi(2);
            assert!((p - exact).abs() < 1e-9, "t={t}: {p} vs {exact}");
        }
    }

    #[test]
    fn one_dimensional_geodesic_matches_scalar_ode() {
        let chart = Chart::new(bernoulli(0.2), ChartConfig::default()).unwrap();
        let x0 = unit(&chart, &[1.0]);
        let path = geodesic_shoot(&chart, &x0, 0.15, None).unwrap();
        // unit speed: t' = 1 / sqrt(m(t)), integrated at ten times the resolution
        let speed = |t: f64| 1.0 / chart.metric(&DVector::from_element(1, t)).unwrap()[(0, 0)].sqrt();
        let dt = path.step / 10.0;
        let n = path.center();
        let mut oracle = vec![0.0; path.len()];
        for dir in [1.0, -1.0] {
            let mut t = 0.0;
            for i in 1..=n {
                for _ in 0..10 {
                    let f = |t: f64| dir * speed(t);
                    let k1 = f(t);
                    let k2 = f(t + dt / 2.0 * k1);
                    let k3 = f(t + dt / 2.0 * k2);
                    let k4 = f(t + dt * k3);
                    t += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                }
                let idx = if dir > 0.0 { n + i } else { n - i };
                oracle[idx] = t;
            }
        }
        for (c, o) in path.coords.iter().zip(&oracle) {
            assert!((c[0] - o).abs() < 1e-8, "{} vs {o}", c[0]);
        }
    }

    #[test]
    fn reversal_is_exact() {
        let chart = Chart::new(random_base(2, 12), ChartConfig::default()).unwrap();
        let x0 = unit(&chart, &[0.6, -0.8]);
        let fwd = geodesic_shoot(&chart, &x0, 0.1, Some(0.005)).unwrap();
        let bwd = geodesic_shoot(&chart, &-&x0, 0.1, Some(0.005)).unwrap();
        let n = fwd.len();
        for i in 0..n {
            assert!((&fwd.coords[i] - &bwd.coords[n - 1 - i]).amax() <= 1e-10);
        }
    }

    #[test]
    fn energy_and_constraint_along_geodesic() {
        let chart = Chart::new(random_base(2, 21), ChartConfig::default()).unwrap();
        assert!(chart.radius() >= 0.2, "radius {}", chart.radius());
        let x0 = unit(&chart, &[1.0, 0.4]);
        let path = geodesic_shoot(&chart, &x0, 0.2, None).unwrap();
        assert!(path.energy.iter().all(|e| (e - 1.0).abs() < 1e-6));
        assert!(path.constraint_drift() < 1e-8);
    }

    #[test]
    fn constant_energy_identities() {
        let chart = Chart::new(random_base(2, 2), ChartConfig::default()).unwrap();
        let x0 = unit(&chart, &[0.3, 1.0]);
        let path = geodesic_shoot(&chart, &x0, 0.1, Some(0.0025)).unwrap();
        let pots: Vec<CylinderFunction> = path.coords.iter().map(|c| chart.map(c).unwrap()).collect();
        let dt = path.step;
        // X, X' by central differences along the sampled curve
        let at = |n: usize| -> (f64, f64) {
            let x = pots[n + 1].try_sub(&pots[n - 1]).unwrap().scale(0.5 / dt);
            let xp = pots[n + 1]
                .axpy(-2.0, &pots[n])
                .unwrap()
                .try_add(&pots[n - 1])
                .unwrap()
                .scale(1.0 / (dt * dt));
            let g = GibbsData::of(&pots[n]).unwrap();
            let int_xp = g.integrate(&xp).unwrap();
            let energy = g.integrate(&xp.axpy(0.5, &x.try_mul(&x).unwrap()).unwrap()).unwrap();
            (int_xp, energy)
        };
        let c = path.center();
        let (int_xp, _) = at(c);
        assert!((int_xp + 1.0).abs() < 1e-5, "{int_xp}");
        let q = 8;
        let derivative = (at(c + q).1 - at(c - q).1) / (2.0 * q as f64 * dt);
        assert!(derivative.abs() < 1e-4, "{derivative}");
    }

    #[test]
    fn leibniz_rule_along_a_curve() {
        use crate::geometry::tangent_project;
        let chart = Chart::new(random_base(2, 17), ChartConfig::default()).unwrap();
        let s = chart.base().space();
        let phi = CylinderFunction::from_fn(s, |w| 0.3 * w[0] as f64 - 0.2 * w[1] as f64);
        let psi = CylinderFunction::from_fn(s, |w| (w[0] * w[1]) as f64);
        let curve = |t: f64| DVector::from_column_slice(&[0.05 * t.sin(), 0.1 * t * t - 0.02 * t]);
        // a tangent field: a smooth family projected onto the kernel at gamma(t)
        let field = |t: f64| {
            let base = Arc::new(BasePoint::project(&chart.map(&curve(t)).unwrap()).unwrap());
            let v = phi.axpy(t, &psi).unwrap().add_constant(t * t);
            tangent_project(&v, &base).unwrap().into_value()
        };
        let mean = |t: f64| GibbsData::of(&chart.map(&curve(t)).unwrap()).unwrap().integrate(&field(t)).unwrap();
        let t0 = 0.3;
        let e = 1e-4;
        let lhs = (mean(t0 + e) - mean(t0 - e)) / (2.0 * e);
        let x = chart.map(&curve(t0 + e)).unwrap().try_sub(&chart.map(&curve(t0 - e)).unwrap()).unwrap().scale(0.5 / e);
        let yp = field(t0 + e).try_sub(&field(t0 - e)).unwrap().scale(0.5 / e);
        let g = GibbsData::of(&chart.map(&curve(t0)).unwrap()).unwrap();
        let rhs = g.integrate(&yp).unwrap() + g.integrate(&field(t0).try_mul(&x).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn parallel_transport_properties() {
        let chart = Chart::new(random_base(2, 31), ChartConfig::default()).unwrap();
        let x0 = unit(&chart, &[1.0, -0.3]);
        let path = geodesic_shoot(&chart, &x0, 0.15, Some(0.0015)).unwrap();
        let own = parallel_transport(&chart, &path, &x0).unwrap();
        for (y, u) in own.vectors.iter().zip(&path.velocity) {
            assert!((DVector::from_column_slice(y) - u).amax() < 1e-8);
        }
        // unit vector orthogonal to x0 in the identity metric at the origin
        let m0 = chart.metric(&DVector::zeros(2)).unwrap();
        let mut y0 = DVector::from_column_slice(&[0.3, 1.0]);
        let c = x0.dot(&(&m0 * &y0));
        y0 -= &x0 * c;
        y0 /= y0.dot(&(&m0 * &y0)).sqrt();
        let field = parallel_transport(&chart, &path, &y0).unwrap();
        assert!(field.norm_drift() < 1e-6);
        assert!(field.velocity_inner.iter().all(|c| c.abs() < 1e-6));
    }

    #[test]
    fn fermi_surface_invariants() {
        let chart = Chart::new(random_base(2, 41), ChartConfig::default()).unwrap();
        let x0 = unit(&chart, &[1.0, 0.0]);
        let m0 = chart.metric(&DVector::zeros(2)).unwrap();
        let mut y0 = DVector::from_column_slice(&[0.0, 1.0]);
        y0 -= &x0 * x0.dot(&(&m0 * &y0));
        y0 /= y0.dot(&(&m0 * &y0)).sqrt();
        let cfg = FermiConfig::default();
        let surf = fermi_surface(&chart, &x0, &y0, cfg).unwrap();
        assert!(surf.center().sup_distance(chart.base().potential()).unwrap() < 1e-12);
        let shot = geodesic_shoot(&chart, &x0, 2.0 * cfg.h, Some(cfg.h / cfg.substeps as f64)).unwrap();
        for i in 0..5 {
            let g = &shot.coords[i * cfg.substeps];
            assert!((&surf.coords[i][2] - g).amax() <= 1e-10);
        }
        assert!(surf.s_speed.iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(surf.center_inner().unwrap().abs() < 1e-6);
    }

    #[test]
    fn truncation_study_reports_gaps() {
        let base = random_base(2, 5);
        let x0 = orthonormal_tangent_basis(&base).unwrap()[0].value().clone();
        let rows = truncation_study(base, &x0, 0.05, 0.005, 1, &ChartConfig::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].gap_to_deepest, 0.0);
        assert!(rows[0].gap_to_deepest.is_finite());
    }
}
