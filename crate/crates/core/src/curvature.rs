//! Sectional curvature of the asymptotic-variance metric from a Fermi patch:
//! `int f^2 dmu` with `f = Y_t + X-bar Y / 2` at the center, the second
//! `s`-derivative of `|X-bar|^2`, and the Gauss curvature of the patch.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function_space::{CylinderFunction, ShiftSpace};
use crate::geodesy::{fermi_surface, Chart, ChartConfig, FermiConfig, FermiSurface, SECOND};
use crate::geometry::{BasePoint, TangentVector};
use crate::transfer::GibbsData;

pub const SCAN_SCHEMA_VERSION: u32 = 1;
/// Audit residuals above this flag a scan sample.
pub const AUDIT_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurvatureConfig {
    pub fermi: FermiConfig,
    /// Also build the patch at `h/2` and extrapolate.
    pub richardson: bool,
    /// Largest tolerated relative change of `f` between `h` and `h/2`.
    pub f_tolerance: f64,
    pub chart: ChartConfig,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        CurvatureConfig { fermi: FermiConfig::default(), richardson: true, f_tolerance: 0.2, chart: ChartConfig::default() }
    }
}

/// Derivatives of a Fermi patch at its center, plus the two curvature routes.
#[derive(Clone, Debug)]
pub struct CenterFields {
    pub xbar: CylinderFunction,
    pub y: CylinderFunction,
    pub y_t: CylinderFunction,
    pub y_s: CylinderFunction,
    pub x_t: CylinderFunction,
    /// `-1/2 d_s^2 int X-bar(0, s)^2 dmu_{S(0,s)}`.
    pub k_energy: f64,
    /// Gauss curvature of the patch metric by the Brioschi formula.
    pub k_brioschi: f64,
}

impl CenterFields {
    pub fn of(surface: &FermiSurface) -> Result<Self> {
        let h = surface.h;
        let mut energy = [0.0; 5];
        for (j, e) in energy.iter_mut().enumerate() {
            let xb = surface.xbar(j)?;
            *e = GibbsData::of(&surface.potentials[2][j])?.integrate(&xb.try_mul(&xb)?)?;
        }
        let k_energy = -0.5 * SECOND.iter().zip(&energy).map(|(w, e)| w * e).sum::<f64>() / (h * h);
        Ok(CenterFields {
            xbar: surface.xbar(2)?,
            y: surface.y(2)?,
            y_t: surface.y_t()?,
            y_s: surface.y_s()?,
            x_t: surface.x_t()?,
            k_energy,
            k_brioschi: brioschi(surface)?,
        })
    }

    /// `f = G = Y_t + X-bar Y / 2`.
    pub fn f(&self) -> Result<CylinderFunction> {
        self.y_t.axpy(0.5, &self.xbar.try_mul(&self.y)?)
    }

    /// `Q = g = Y_s + Y^2 / 2`.
    pub fn q(&self) -> Result<CylinderFunction> {
        self.y_s.axpy(0.5, &self.y.try_mul(&self.y)?)
    }

    /// Fourth-order Richardson combination of patches at `h` and `h/2`.
    pub fn extrapolate(coarse: &Self, fine: &Self) -> Result<Self> {
        let mix = |c: &CylinderFunction, f: &CylinderFunction| -> Result<CylinderFunction> {
            Ok(f.scale(16.0 / 15.0).axpy(-1.0 / 15.0, c)?)
        };
        let num = |c: f64, f: f64| (16.0 * f - c) / 15.0;
        Ok(CenterFields {
            xbar: mix(&coarse.xbar, &fine.xbar)?,
            y: mix(&coarse.y, &fine.y)?,
            y_t: mix(&coarse.y_t, &fine.y_t)?,
            y_s: mix(&coarse.y_s, &fine.y_s)?,
            x_t: mix(&coarse.x_t, &fine.x_t)?,
            k_energy: num(coarse.k_energy, fine.k_energy),
            // the Brioschi stencil is second order
            k_brioschi: (4.0 * fine.k_brioschi - coarse.k_brioschi) / 3.0,
        })
    }
}

/// Gauss curvature at the center from the first fundamental form on the inner 3x3 points.
fn brioschi(surface: &FermiSurface) -> Result<f64> {
    let h = surface.h;
    let p = &surface.potentials;
    let mut e = [[0.0; 3]; 3];
    let mut f = [[0.0; 3]; 3];
    let mut g = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let (i, j) = (a + 1, b + 1);
            let xu = p[i + 1][j].try_sub(&p[i - 1][j])?.scale(0.5 / h);
            let xv = p[i][j + 1].try_sub(&p[i][j - 1])?.scale(0.5 / h);
            let gibbs = GibbsData::of(&p[i][j])?;
            e[a][b] = gibbs.integrate(&xu.try_mul(&xu)?)?;
            f[a][b] = gibbs.integrate(&xu.try_mul(&xv)?)?;
            g[a][b] = gibbs.integrate(&xv.try_mul(&xv)?)?;
        }
    }
    let du = |m: &[[f64; 3]; 3]| (m[2][1] - m[0][1]) / (2.0 * h);
    let dv = |m: &[[f64; 3]; 3]| (m[1][2] - m[1][0]) / (2.0 * h);
    let duu = |m: &[[f64; 3]; 3]| (m[2][1] - 2.0 * m[1][1] + m[0][1]) / (h * h);
    let dvv = |m: &[[f64; 3]; 3]| (m[1][2] - 2.0 * m[1][1] + m[1][0]) / (h * h);
    let duv = |m: &[[f64; 3]; 3]| (m[2][2] - m[2][0] - m[0][2] + m[0][0]) / (4.0 * h * h);
    let (ec, fc, gc) = (e[1][1], f[1][1], g[1][1]);
    let m1 = DMatrix::from_row_slice(
        3,
        3,
        &[
            -0.5 * dvv(&e) + duv(&f) - 0.5 * duu(&g),
            0.5 * du(&e),
            du(&f) - 0.5 * dv(&e),
            dv(&f) - 0.5 * du(&g),
            ec,
            fc,
            0.5 * dv(&g),
            fc,
            gc,
        ],
    );
    let m2 = DMatrix::from_row_slice(3, 3, &[0.0, 0.5 * dv(&e), 0.5 * du(&g), 0.5 * dv(&e), ec, fc, 0.5 * du(&g), fc, gc]);
    let w = ec * gc - fc * fc;
    Ok((m1.determinant() - m2.determinant()) / (w * w))
}

/// `f = Y_t + X-bar Y / 2` at the center of a single patch.
pub fn extract_f(surface: &FermiSurface) -> Result<CylinderFunction> {
    let y_t = surface.y_t()?;
    y_t.axpy(0.5, &surface.xbar(2)?.try_mul(&surface.y(2)?)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvatureReport {
    /// `int f^2 dmu_A`.
    pub k_formula: f64,
    /// `-1/2 Y(Y |X-bar|^2)`.
    pub k_energy: f64,
    /// Gauss curvature of the patch metric, a diagnostic.
    pub k_brioschi: f64,
    pub f: CylinderFunction,
    pub f_mean: f64,
    /// `[coarse, fine]` values before extrapolation.
    pub k_formula_levels: Vec<f64>,
    pub k_energy_levels: Vec<f64>,
    /// `sup |f_h - f_{h/2}|`.
    pub f_refinement: f64,
    pub residuals: BTreeMap<String, f64>,
    pub steps: Vec<f64>,
}

impl CurvatureReport {
    pub fn audit_sup(&self) -> f64 {
        self.residuals.values().fold(0.0, |m, r| m.max(*r))
    }
}

/// Absolute residuals of the integral identities at the patch center.
pub fn identity_audit(base: &BasePoint, fields: &CenterFields) -> Result<BTreeMap<String, f64>> {
    let int = |f: &CylinderFunction| base.integrate(f);
    let g = fields.f()?;
    let q = fields.q()?;
    let xbar_y = fields.xbar.try_mul(&fields.y)?;
    let xbar2 = fields.xbar.try_mul(&fields.xbar)?;
    let mut out = BTreeMap::new();
    out.insert("int_f".to_string(), int(&g)?.abs());
    out.insert("int_G".to_string(), int(&g)?.abs());
    out.insert("int_YG".to_string(), int(&fields.y.try_mul(&g)?)?.abs());
    out.insert(
        "int_XbarYG_plus_2G2".to_string(),
        (int(&xbar_y.try_mul(&g)?)? + 2.0 * int(&g.try_mul(&g)?)?).abs(),
    );
    out.insert("int_Q".to_string(), int(&q)?.abs());
    out.insert("int_XbarQ".to_string(), int(&fields.xbar.try_mul(&q)?)?.abs());
    out.insert("int_Xbar2Q".to_string(), int(&xbar2.try_mul(&q)?)?.abs());
    out.insert("int_g_plus_half".to_string(), (int(&q)? + 0.5).abs());
    out.insert("int_Xprime_plus_one".to_string(), (int(&fields.x_t)? + 1.0).abs());
    Ok(out)
}

/// Both curvature routes for the plane of the orthonormal chart vectors `x`, `y`.
pub fn sectional_curvature(chart: &Chart, x: &DVector<f64>, y: &DVector<f64>, config: &CurvatureConfig) -> Result<CurvatureReport> {
    let coarse_cfg = config.fermi;
    let coarse = CenterFields::of(&fermi_surface(chart, x, y, coarse_cfg)?)?;
    let base = chart.base();
    let f_coarse = coarse.f()?;
    let k_coarse = base.integrate(&f_coarse.try_mul(&f_coarse)?)?;
    let (fields, levels_f, levels_e, refinement, steps) = if config.richardson {
        let fine_cfg = FermiConfig { h: coarse_cfg.h / 2.0, ..coarse_cfg };
        let fine = CenterFields::of(&fermi_surface(chart, x, y, fine_cfg)?)?;
        let f_fine = fine.f()?;
        let refinement = f_coarse.sup_distance(&f_fine)?;
        let scale = f_fine.sup_norm().max(1e-4);
        if refinement > config.f_tolerance * scale {
            return Err(Error::Accuracy(format!(
                "f changed by {refinement:e} (sup |f| = {scale:e}) between steps {} and {}",
                coarse_cfg.h, fine_cfg.h
            )));
        }
        let k_fine = base.integrate(&f_fine.try_mul(&f_fine)?)?;
        let levels_e = vec![coarse.k_energy, fine.k_energy];
        let fields = CenterFields::extrapolate(&coarse, &fine)?;
        (fields, vec![k_coarse, k_fine], levels_e, refinement, vec![coarse_cfg.h, fine_cfg.h])
    } else {
        let levels_e = vec![coarse.k_energy];
        (coarse, vec![k_coarse], levels_e, f64::NAN, vec![coarse_cfg.h])
    };
    let f = fields.f()?;
    let residuals = identity_audit(base, &fields)?;
    Ok(CurvatureReport {
        k_formula: base.integrate(&f.try_mul(&f)?)?,
        k_energy: fields.k_energy,
        k_brioschi: fields.k_brioschi,
        f_mean: base.integrate(&f)?,
        f,
        k_formula_levels: levels_f,
        k_energy_levels: levels_e,
        f_refinement: refinement,
        residuals,
        steps,
    })
}

/// Chart coordinates of a tangent vector in an orthonormal chart basis.
pub fn chart_coordinates(chart: &Chart, x: &TangentVector) -> Result<DVector<f64>> {
    let base = chart.base();
    let c: Vec<f64> = chart
        .basis()
        .iter()
        .map(|e| base.integrate(&e.try_mul(x.value())?))
        .collect::<Result<_>>()?;
    let mut rebuilt = CylinderFunction::zeros(chart.basis()[0].space());
    for (ci, e) in c.iter().zip(chart.basis()) {
        rebuilt = rebuilt.axpy(*ci, e)?;
    }
    let gap = rebuilt.sup_distance(x.value())?;
    if gap > 1e-9 * (1.0 + x.value().sup_norm()) {
        return Err(Error::usage(format!("tangent vector leaves the chart span (gap {gap:e})")));
    }
    Ok(DVector::from_vec(c))
}

/// `K(X, Y)` for orthonormal tangent vectors at their base point.
pub fn sectional_curvature_at(x: &TangentVector, y: &TangentVector, config: &CurvatureConfig) -> Result<CurvatureReport> {
    let chart = Chart::new(x.base().clone(), config.chart.clone())?;
    let (cx, cy) = (chart_coordinates(&chart, x)?, chart_coordinates(&chart, y)?);
    sectional_curvature(&chart, &cx, &cy, config)
}

/// `(cos a X + sin a Y, -sin a X + cos a Y)`.
pub fn rotate_plane(x: &DVector<f64>, y: &DVector<f64>, angle: f64) -> (DVector<f64>, DVector<f64>) {
    let (s, c) = angle.sin_cos();
    (x * c + y * s, y * c - x * s)
}

/// Orthonormal pair in the metric `m` from two raw vectors.
pub fn orthonormal_pair(m: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let norm = |v: &DVector<f64>| v.dot(&(m * v)).sqrt();
    let na = norm(a);
    if !(na > 1e-12) {
        return Err(Error::usage("degenerate plane"));
    }
    let x = a / na;
    let y = b - &x * x.dot(&(m * b));
    let ny = norm(&y);
    if !(ny > 1e-12) {
        return Err(Error::usage("degenerate plane"));
    }
    Ok((x, y / ny))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub d: usize,
    pub k: usize,
    pub samples: usize,
    pub seed: u64,
    pub curvature: CurvatureConfig,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { d: 2, k: 2, samples: 20, seed: 0, curvature: CurvatureConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanRow {
    pub index: usize,
    pub base_hash: String,
    pub potential: Vec<f64>,
    pub plane_x: Vec<f64>,
    pub plane_y: Vec<f64>,
    pub k_formula: f64,
    pub k_energy: f64,
    pub k_brioschi: f64,
    pub f_mean: f64,
    pub audit_sup: f64,
    /// Audit residuals within [`AUDIT_TOL`].
    pub accepted: bool,
    pub residuals: BTreeMap<String, f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanSummary {
    pub samples: usize,
    pub failed: usize,
    pub accepted: usize,
    pub min_k_formula: f64,
    pub max_k_formula: f64,
    pub min_k_energy: f64,
    pub max_k_energy: f64,
    pub max_route_gap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanTable {
    pub schema_version: u32,
    pub config: ScanConfig,
    pub rows: Vec<ScanRow>,
    pub summary: ScanSummary,
}

/// Independent generator for sample `index` of a run seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Thread pool sized by `GIBBSLAB_WORKERS` (default: rayon's choice).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let workers = match std::env::var("GIBBSLAB_WORKERS") {
        Ok(v) => Some(v.parse().map_err(|_| Error::usage(format!("GIBBSLAB_WORKERS={v} is not a count")))?),
        Err(_) => None,
    };
    pool_with(workers)
}

/// Thread pool with an explicit worker count (`None`: rayon's choice).
pub fn pool_with(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Resource(e.to_string()))
}

/// Random normalized potential: i.i.d. `U[-0.5, 0.5]` coefficients, then `Pi`.
pub fn random_base(rng: &mut ChaCha8Rng, space: ShiftSpace) -> Result<Arc<BasePoint>> {
    let uni = Uniform::new_inclusive(-0.5, 0.5).expect("valid range");
    let coeffs: Vec<f64> = (0..space.dim()).map(|_| uni.sample(rng)).collect();
    Ok(Arc::new(BasePoint::normalized_from(&CylinderFunction::new(space, coeffs)?)?))
}

fn scan_sample(config: &ScanConfig, index: usize) -> ScanRow {
    let mut row = ScanRow {
        index,
        base_hash: String::new(),
        potential: vec![],
        plane_x: vec![],
        plane_y: vec![],
        k_formula: f64::NAN,
        k_energy: f64::NAN,
        k_brioschi: f64::NAN,
        f_mean: f64::NAN,
        audit_sup: f64::NAN,
        accepted: false,
        residuals: BTreeMap::new(),
        error: None,
    };
    let result = (|| -> Result<()> {
        let mut rng = sample_rng(config.seed, index as u64);
        let space = ShiftSpace::new(config.d, config.k)?;
        let base = random_base(&mut rng, space)?;
        row.base_hash = base.fingerprint();
        row.potential = base.potential().coeffs().to_vec();
        let chart = Chart::new(base, config.curvature.chart.clone())?;
        let m = chart.dim();
        if m < 2 {
            return Err(Error::usage("curvature needs a chart of dimension at least 2"));
        }
        let a = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        let b = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        let metric = chart.metric(&DVector::zeros(m))?;
        let (x, y) = orthonormal_pair(&metric, &a, &b)?;
        row.plane_x = x.as_slice().to_vec();
        row.plane_y = y.as_slice().to_vec();
        let report = sectional_curvature(&chart, &x, &y, &config.curvature)?;
        row.k_formula = report.k_formula;
        row.k_energy = report.k_energy;
        row.k_brioschi = report.k_brioschi;
        row.f_mean = report.f_mean;
        row.audit_sup = report.audit_sup();
        row.accepted = row.audit_sup <= AUDIT_TOL;
        row.residuals = report.residuals;
        Ok(())
    })();
    if let Err(e) = result {
        row.error = Some(e.to_string());
    }
    row
}

/// Curvature at `samples` random (potential, plane) draws; sample failures are recorded, not fatal.
pub fn curvature_scan(config: &ScanConfig) -> Result<ScanTable> {
    curvature_scan_in(config, &worker_pool()?)
}

/// [`curvature_scan`] on a given pool; rows are merged by sample index.
pub fn curvature_scan_in(config: &ScanConfig, pool: &rayon::ThreadPool) -> Result<ScanTable> {
    if config.samples == 0 {
        return Err(Error::usage("scan needs at least one sample"));
    }
    ShiftSpace::new(config.d, config.k)?;
    let rows: Vec<ScanRow> =
        pool.install(|| (0..config.samples).into_par_iter().map(|i| scan_sample(config, i)).collect());
    let ok: Vec<&ScanRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let fold = |f: fn(&ScanRow) -> f64, init: f64, op: fn(f64, f64) -> f64| ok.iter().map(|r| f(r)).fold(init, op);
    let summary = ScanSummary {
        samples: rows.len(),
        failed: rows.len() - ok.len(),
        accepted: ok.iter().filter(|r| r.accepted).count(),
        min_k_formula: fold(|r| r.k_formula, f64::INFINITY, f64::min),
        max_k_formula: fold(|r| r.k_formula, f64::NEG_INFINITY, f64::max),
        min_k_energy: fold(|r| r.k_energy, f64::INFINITY, f64::min),
        max_k_energy: fold(|r| r.k_energy, f64::NEG_INFINITY, f64::max),
        max_route_gap: fold(|r| (r.k_formula - r.k_energy).abs(), 0.0, f64::max),
    };
    Ok(ScanTable { schema_version: SCAN_SCHEMA_VERSION, config: config.clone(), rows, summary })
}

impl ScanTable {
    /// One CSV row per sample; columns are frozen under `schema_version`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "schema_version",
            "index",
            "base_hash",
            "k_formula",
            "k_energy",
            "k_brioschi",
            "f_mean",
            "audit_sup",
            "accepted",
            "error",
        ])?;
        for r in &self.rows {
            w.write_record([
                self.schema_version.to_string(),
                r.index.to_string(),
                r.base_hash.clone(),
                format!("{:e}", r.k_formula),
                format!("{:e}", r.k_energy),
                format!("{:e}", r.k_brioschi),
                format!("{:e}", r.f_mean),
                format!("{:e}", r.audit_sup),
                r.accepted.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Depth-2 potential of an i.i.d. Bernoulli(p) measure on two symbols.
pub fn bernoulli_depth2(p: f64) -> Result<CylinderFunction> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::usage(format!("p = {p} outside (0, 1)")));
    }
    CylinderFunction::new(ShiftSpace::new(2, 2)?, vec![p.ln(), (1.0 - p).ln(), p.ln(), (1.0 - p).ln()])
}

/// Gauss curvature `1 / (P(1|0) + P(0|1))` of the two-symbol Markov family
/// at a normalized depth-2 potential.
pub fn two_state_markov_curvature(a: &CylinderFunction) -> Result<f64> {
    if a.d() != 2 || a.depth() != 2 {
        return Err(Error::usage("closed form needs d = 2, k = 2"));
    }
    Ok(1.0 / (a.coeffs()[1].exp() + a.coeffs()[2].exp()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRow {
    pub p: f64,
    /// Fermi spacing used, shrunk with the chart radius near the boundary of the family.
    pub h: f64,
    /// Max over rotations of the chart plane.
    pub max_k_formula: f64,
    pub max_k_energy: f64,
    pub closed_form: f64,
}

pub const PROBE_ANGLES: [f64; 4] = [0.0, PI / 8.0, PI / 4.0, 3.0 * PI / 8.0];

/// Curvature along the Bernoulli family viewed inside depth-2 potentials.
pub fn bernoulli_probe(ps: &[f64], config: &CurvatureConfig) -> Result<Vec<ProbeRow>> {
    ps.iter()
        .map(|&p| {
            let base = Arc::new(BasePoint::new(bernoulli_depth2(p)?)?);
            let closed_form = two_state_markov_curvature(base.potential())?;
            let chart = Chart::new(base, config.chart.clone())?;
            let mut config = config.clone();
            config.fermi.h = config.fermi.h.min(chart.radius() / 8.0);
            let metric = chart.metric(&DVector::zeros(2))?;
            let (x, y) = orthonormal_pair(&metric, &DVector::from_column_slice(&[1.0, 0.0]), &DVector::from_column_slice(&[0.0, 1.0]))?;
            let mut row = ProbeRow { p, h: config.fermi.h, max_k_formula: f64::NEG_INFINITY, max_k_energy: f64::NEG_INFINITY, closed_form };
            for angle in PROBE_ANGLES {
                let (xr, yr) = rotate_plane(&x, &y, angle);
                let r = sectional_curvature(&chart, &xr, &yr, &config)?;
                row.max_k_formula = row.max_k_formula.max(r.k_formula);
                row.max_k_energy = row.max_k_energy.max(r.k_energy);
            }
            Ok(row)
        })
        .collect()
}
