//! The acceptance suite: twelve numbered checks, each reported as PASS or
//! FAIL with the measured quantities. Failing checks are reported as they
//! are; nothing here retunes a tolerance to make a check pass.

use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::circle::{circle_gibbs_check, CircleGibbs, CircleModel};
use crate::curvature::{bernoulli_probe, curvature_scan_in, pool_with, CurvatureConfig, ScanConfig, ScanTable};
use crate::error::{Error, Result};
use crate::experiment::{execute, hex_digest, Experiment, ExperimentConfig};
use crate::function_space::{CylinderFunction, ShiftSpace};
use crate::geodesy::{geodesic_shoot, parallel_transport, Chart, ChartConfig};
use crate::geometry::{
    asymptotic_variance, dense_kernel_dim, inner, observable_derivative_check, orthonormal_tangent_basis,
    tangent_project, BasePoint,
};
use crate::transfer::{
    leading_eigen_with, pressure_derivative_check, random_markov_measure, EigenMethod, GibbsData, TransferMatrix,
};

pub const CRITERIA: [(usize, &str); 12] = [
    (1, "normalization"),
    (2, "eigendata"),
    (3, "gibbs structure"),
    (4, "tangent and metric"),
    (5, "derivative formulas"),
    (6, "geodesics"),
    (7, "parallel transport"),
    (8, "curvature"),
    (9, "identity audit"),
    (10, "no-upper-bound probe"),
    (11, "circle backend"),
    (12, "determinism"),
];

#[derive(Clone, Debug, Serialize)]
pub struct CriterionOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    /// One line of headline numbers.
    pub summary: String,
    pub details: Vec<String>,
}

impl fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} criterion {:>2} ({}): {}", self.id, self.name, self.summary)?;
        for d in &self.details {
            write!(f, "\n    {d}")?;
        }
        Ok(())
    }
}

struct Check {
    passed: bool,
    summary: String,
    details: Vec<String>,
}

impl Check {
    fn new(passed: bool, summary: impl Into<String>) -> Self {
        Check { passed, summary: summary.into(), details: vec![] }
    }

    fn detail(mut self, d: impl Into<String>) -> Self {
        self.details.push(d.into());
        self
    }
}

/// Runs one criterion; internal errors are reported as a failure.
pub fn run_criterion(id: usize) -> Result<CriterionOutcome> {
    let name = CRITERIA
        .iter()
        .find(|(i, _)| *i == id)
        .map(|(_, n)| *n)
        .ok_or_else(|| Error::Usage(format!("no criterion {id}; expected 1..=12")))?;
    let check = match id {
        1 => normalization(),
        2 => eigendata(),
        3 => gibbs_structure(),
        4 => tangent_metric(),
        5 => derivative_formulas(),
        6 => geodesics(),
        7 => transport(),
        8 => curvature(),
        9 => identity_audit(),
        10 => probe(),
        11 => circle(),
        _ => determinism(),
    };
    let check = check.unwrap_or_else(|e| Check::new(false, format!("error: {e}")));
    Ok(CriterionOutcome { id, name, passed: check.passed, summary: check.summary, details: check.details })
}

pub fn run_all() -> Vec<CriterionOutcome> {
    CRITERIA.iter().map(|(id, _)| run_criterion(*id).expect("known id")).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_potential(rng: &mut ChaCha8Rng, d: usize, k: usize, scale: f64) -> Result<CylinderFunction> {
    let s = ShiftSpace::new(d, k)?;
    Ok(CylinderFunction::from_fn(s, |_| rng.random_range(-scale..scale)))
}

fn random_base(seed: u64, d: usize, k: usize) -> Result<Arc<BasePoint>> {
    let b = random_potential(&mut rng(seed), d, k, 0.5)?;
    Ok(Arc::new(BasePoint::normalized_from(&b)?))
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn normalization() -> Result<Check> {
    let mut worst_defect: f64 = 0.0;
    let mut worst_measure: f64 = 0.0;
    let mut r = rng(1);
    for _ in 0..100 {
        let b = random_potential(&mut r, 2, 2, 2.0)?;
        let gb = GibbsData::of(&b)?;
        let p = gb.normalized.clone();
        worst_defect = worst_defect.max(TransferMatrix::of(&p).normalization_defect());
        let gp = GibbsData::of(&p)?;
        for depth in 1..=5 {
            worst_measure = worst_measure.max(max_gap(&gb.weights(depth)?, &gp.weights(depth)?));
        }
    }
    Ok(Check::new(
        worst_defect <= 1e-10 && worst_measure <= 1e-10,
        format!("100 potentials: max |L1 - 1| = {worst_defect:.2e}, max |mu_Pi(B) - mu_B| = {worst_measure:.2e} (cylinders of depth 1..5)"),
    ))
}

fn eigendata() -> Result<Check> {
    let mut worst_right: f64 = 0.0;
    let mut worst_left: f64 = 0.0;
    let mut worst_agree: f64 = 0.0;
    let mut both = 0;
    let mut r = rng(2);
    for (d, k) in [(2, 1), (2, 2), (2, 3), (2, 6), (3, 1), (3, 2), (3, 3), (2, 7), (3, 4)] {
        for _ in 0..5 {
            let a = random_potential(&mut r, d, k, 1.0)?;
            let m = TransferMatrix::of(&a);
            let mut runs = vec![leading_eigen_with(&m, EigenMethod::Power)?];
            if m.dim() <= 64 {
                runs.push(leading_eigen_with(&m, EigenMethod::Dense)?);
            }
            for e in &runs {
                worst_right = worst_right.max(e.right_residual / e.lambda);
                worst_left = worst_left.max(e.left_residual / e.lambda);
            }
            if let [p, q] = runs.as_slice() {
                both += 1;
                let rel = (p.lambda - q.lambda).abs() / q.lambda;
                let h = (&p.h - &q.h).amax();
                let nu = (&p.nu - &q.nu).amax();
                worst_agree = worst_agree.max(rel).max(h).max(nu);
            }
        }
    }
    Ok(Check::new(
        worst_right <= 1e-10 && worst_left <= 1e-10 && worst_agree <= 1e-10,
        format!(
            "max residual/lambda = {worst_right:.2e}, dual = {worst_left:.2e}; dense vs power on {both} matrices: {worst_agree:.2e}"
        ),
    ))
}

fn gibbs_structure() -> Result<Check> {
    let mut consistency: f64 = 0.0;
    let mut shift: f64 = 0.0;
    let mut min_gap = f64::INFINITY;
    let mut equality: f64 = 0.0;
    let mut r = rng(3);
    for (d, k) in [(2, 1), (2, 2), (2, 3), (3, 2)] {
        for _ in 0..3 {
            let a = random_potential(&mut r, d, k, 1.0)?;
            let g = GibbsData::of(&a)?;
            let s = g.structure_defects()?;
            consistency = consistency.max(s.consistency);
            shift = shift.max(s.shift_invariance);
            for _ in 0..50 {
                let m = random_markov_measure(&mut r, g.space());
                min_gap = min_gap.min(g.variational_gap(&a, &m)?);
            }
            equality = equality.max(g.variational_gap(&a, &g.weights(k)?)?.abs());
        }
    }
    Ok(Check::new(
        consistency <= 1e-12 && shift <= 1e-12 && min_gap >= -1e-12 && equality <= 1e-8,
        format!(
            "consistency {consistency:.2e}, shift invariance {shift:.2e}; P - (h + int A) >= {min_gap:.3e} over 50 Markov measures per potential, {equality:.2e} at mu_A"
        ),
    ))
}

fn tangent_metric() -> Result<Check> {
    let mut dims_ok = true;
    let mut dims = Vec::new();
    for d in [2, 3] {
        for k in [1, 2, 3] {
            let base = random_base(40 + (d * 10 + k) as u64, d, k)?;
            let expected = d.pow(k as u32) - d.pow(k as u32 - 1);
            let dense = dense_kernel_dim(&TransferMatrix::of(base.potential()));
            let basis = orthonormal_tangent_basis(&base)?.len();
            dims_ok &= dense == expected && basis == expected;
            dims.push(format!("d={d} k={k}: {dense}/{basis} (expected {expected})"));
        }
    }
    let mut worst: f64 = 0.0;
    for (d, k) in [(2, 2), (3, 2), (2, 3)] {
        let base = random_base(50 + (d * 10 + k) as u64, d, k)?;
        for x in orthonormal_tangent_basis(&base)? {
            let norm = inner(&x, &x)?;
            for n in 1..=8 {
                worst = worst.max((asymptotic_variance(&x, n)? - norm).abs());
            }
        }
    }
    Ok(Check::new(dims_ok && worst <= 1e-12, format!("kernel dimensions {}; max |(1/n) int (S_n X)^2 - int X^2| = {worst:.2e} (n <= 8)", if dims_ok { "match" } else { "MISMATCH" }))
        .detail(format!("dense/basis dimensions: {}", dims.join(", "))))
}

fn in_band(ratio: f64) -> bool {
    (3.5..=4.5).contains(&ratio)
}

fn derivative_formulas() -> Result<Check> {
    let eps = 1e-2;
    let mut pressure_ratios = Vec::new();
    let mut dif_ratios = Vec::new();
    let mut dif_gaps = Vec::new();
    let mut tangent_ratios = Vec::new();
    let mut response_gaps = Vec::new();
    for seed in 0..5 {
        let base = random_base(60 + seed, 2, 2)?;
        let mut r = rng(70 + seed);
        let space = base.space();
        let mut draw = || CylinderFunction::from_fn(space, |_| r.random_range(-1.0..1.0));
        let (psi, phi, v) = (draw(), draw(), draw());
        pressure_ratios.push(pressure_derivative_check(base.potential(), &psi, eps)?.first.ratio);
        let x = tangent_project(&v, &base)?;
        let rep = observable_derivative_check(&x, &phi, eps)?;
        dif_ratios.push(rep.check.ratio);
        dif_gaps.push(rep.check.gaps[1]);
        response_gaps.push((rep.check.finite_difference[1] - rep.linear_response).abs());
        let phi_t = tangent_project(&phi, &base)?;
        tangent_ratios.push(observable_derivative_check(&x, phi_t.value(), eps)?.check.ratio);
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    let fmt_e = |v: &[f64]| v.iter().map(|x| format!("{x:.1e}")).collect::<Vec<_>>().join(", ");
    let pressure_ok = pressure_ratios.iter().all(|r| in_band(*r));
    let dif_ok = dif_ratios.iter().all(|r| in_band(*r));
    Ok(Check::new(
        pressure_ok && dif_ok,
        format!(
            "D log lambda ratios {}; d/dt int phi dmu vs int phi X dmu ratios {}",
            if pressure_ok { "in [3.5, 4.5]" } else { "OUT of band" },
            if dif_ok { "in [3.5, 4.5]" } else { "OUT of band" }
        ),
    )
    .detail(format!("pressure first-derivative ratios: {}", fmt(&pressure_ratios)))
    .detail(format!("random phi: ratios {}, FD - formula at eps/2 {}", fmt(&dif_ratios), fmt_e(&dif_gaps)))
    .detail(format!("random phi: FD - (formula + correlation sum) at eps/2 {}", fmt_e(&response_gaps)))
    .detail(format!("tangent phi: ratios {}", fmt(&tangent_ratios))))
}

fn unit(chart: &Chart, v: DVector<f64>) -> Result<DVector<f64>> {
    let e = chart.frame(&DVector::zeros(chart.dim()))?.energy(&v);
    Ok(v / e.sqrt())
}

fn random_direction(chart: &Chart, seed: u64) -> Result<DVector<f64>> {
    let mut r = rng(seed);
    unit(chart, DVector::from_fn(chart.dim(), |_, _| StandardNormal.sample(&mut r)))
}

/// `int X' dmu` at the center of a geodesic, by central differences of the sampled potentials.
fn int_acceleration(chart: &Chart, x0: &DVector<f64>) -> Result<f64> {
    let path = geodesic_shoot(chart, x0, 0.1, Some(0.0025))?;
    let c = path.center();
    let dt = path.step;
    let pots: Vec<CylinderFunction> = (c - 1..=c + 1).map(|n| chart.map(&path.coords[n])).collect::<Result<_>>()?;
    let xp = pots[2].axpy(-2.0, &pots[1])?.try_add(&pots[0])?.scale(1.0 / (dt * dt));
    GibbsData::of(&pots[1])?.integrate(&xp)
}

/// Largest gap between a one-dimensional chart geodesic and the unit-speed
/// scalar ODE `t' = 1/sqrt(m(t))` integrated at ten times the resolution.
fn scalar_ode_gap(p: f64, rho: f64) -> Result<f64> {
    let s = ShiftSpace::new(2, 1)?;
    let base = Arc::new(BasePoint::new(CylinderFunction::new(s, vec![p.ln(), (1.0 - p).ln()])?)?);
    let chart = Chart::new(base, ChartConfig::default())?;
    let x0 = unit(&chart, DVector::from_element(1, 1.0))?;
    let path = geodesic_shoot(&chart, &x0, rho, None)?;
    let speed = |t: f64| -> Result<f64> { Ok(1.0 / chart.metric(&DVector::from_element(1, t))?[(0, 0)].sqrt()) };
    let dt = path.step / 10.0;
    let n = path.center();
    let mut gap: f64 = 0.0;
    for dir in [1.0, -1.0] {
        let mut t = 0.0;
        for i in 1..=n {
            for _ in 0..10 {
                let k1 = dir * speed(t)?;
                let k2 = dir * speed(t + dt / 2.0 * k1)?;
                let k3 = dir * speed(t + dt / 2.0 * k2)?;
                let k4 = dir * speed(t + dt * k3)?;
                t += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            let idx = if dir > 0.0 { n + i } else { n - i };
            gap = gap.max((path.coords[idx][0] - t).abs());
        }
    }
    Ok(gap)
}

/// Charts at random bases with the half-span geodesics are run on: `0.2`
/// at depth 2, and `0.8` of the (smaller) chart radius at depth 3.
fn test_charts(first: u64, depths: &[usize]) -> Result<Vec<(u64, Chart, f64)>> {
    depths
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let seed = first + i as u64;
            let chart = Chart::new(random_base(seed, 2, k)?, ChartConfig::default())?;
            let rho = if k == 2 { 0.2 } else { 0.8 * chart.radius() };
            Ok((seed, chart, rho))
        })
        .collect()
}

fn spans(charts: &[(u64, Chart, f64)]) -> String {
    charts.iter().map(|(_, c, r)| format!("k={} |t| <= {r:.3}", c.base().space().depth())).collect::<Vec<_>>().join(", ")
}

fn geodesics() -> Result<Check> {
    let mut energy: f64 = 0.0;
    let mut constraint: f64 = 0.0;
    let mut accel: f64 = 0.0;
    let charts = test_charts(20, &[2, 2, 2, 3])?;
    for (seed, chart, rho) in &charts {
        let x0 = random_direction(chart, seed + 100)?;
        let path = geodesic_shoot(chart, &x0, *rho, None)?;
        energy = energy.max(path.energy_drift());
        constraint = constraint.max(path.constraint_drift());
        accel = accel.max((int_acceleration(chart, &x0)? + 1.0).abs());
    }
    let ode = scalar_ode_gap(0.2, 0.15)?.max(scalar_ode_gap(0.6, 0.2)?);
    Ok(Check::new(
        energy <= 1e-6 && constraint <= 1e-8 && accel <= 1e-5 && ode <= 1e-8,
        format!(
            "energy drift {energy:.2e}, constraint drift {constraint:.2e}, |int X' dmu + 1| {accel:.2e}, scalar-ODE gap {ode:.2e}"
        ),
    )
    .detail(spans(&charts)))
}

fn transport() -> Result<Check> {
    let mut norm: f64 = 0.0;
    let mut orth: f64 = 0.0;
    let mut own_gap: f64 = 0.0;
    let charts = test_charts(30, &[2, 2, 3])?;
    for (seed, chart, rho) in &charts {
        let x0 = random_direction(chart, seed + 100)?;
        let path = geodesic_shoot(chart, &x0, *rho, None)?;
        let m0 = chart.metric(&DVector::zeros(chart.dim()))?;
        let mut r = rng(seed + 200);
        let b = DVector::from_fn(chart.dim(), |_, _| StandardNormal.sample(&mut r));
        let (_, y0) = crate::curvature::orthonormal_pair(&m0, &x0, &b)?;
        let field = parallel_transport(&chart, &path, &y0)?;
        norm = norm.max(field.norm_drift());
        orth = orth.max(field.velocity_inner.iter().fold(0.0, |a: f64, c| a.max(c.abs())));
        let own = parallel_transport(&chart, &path, &x0)?;
        for (y, u) in own.vectors.iter().zip(&path.velocity) {
            own_gap = own_gap.max((DVector::from_column_slice(y) - u).amax());
        }
    }
    Ok(Check::new(
        norm <= 1e-6 && orth <= 1e-6 && own_gap <= 1e-8,
        format!("norm drift {norm:.2e}, |<gamma', Y>| {orth:.2e}, self-transport gap {own_gap:.2e}"),
    )
    .detail(spans(&charts)))
}

/// The two curvature scans shared by criteria 8 and 9.
fn scans() -> std::result::Result<&'static (ScanTable, ScanTable), String> {
    static SCANS: OnceLock<std::result::Result<(ScanTable, ScanTable), String>> = OnceLock::new();
    SCANS
        .get_or_init(|| {
            let run = || -> Result<(ScanTable, ScanTable)> {
                let pool = pool_with(None)?;
                let base = ScanConfig { seed: 2024, curvature: CurvatureConfig::default(), ..ScanConfig::default() };
                let k2 = curvature_scan_in(&ScanConfig { k: 2, samples: 200, ..base.clone() }, &pool)?;
                let k3 = curvature_scan_in(&ScanConfig { k: 3, samples: 50, ..base }, &pool)?;
                Ok((k2, k3))
            };
            run().map_err(|e| e.to_string())
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn curvature() -> Result<Check> {
    let (k2, k3) = scans().map_err(Error::Usage)?;
    let mut passed = true;
    let mut check = Check::new(true, String::new());
    let mut parts = Vec::new();
    for (label, t) in [("k=2", k2), ("k=3", k3)] {
        let ok: Vec<_> = t.rows.iter().filter(|r| r.error.is_none()).collect();
        let agree = ok
            .iter()
            .filter(|r| (r.k_formula - r.k_energy).abs() <= (0.05 * r.k_energy.abs()).max(1e-3))
            .count();
        let s = &t.summary;
        passed &= s.failed == 0 && s.min_k_formula >= 0.0 && s.min_k_energy >= -1e-3 && agree == ok.len();
        parts.push(format!("{label}: min K_formula {:.3e}, min K_energy {:.3e}, routes agree {agree}/{}", s.min_k_formula, s.min_k_energy, ok.len()));
        let gaps: Vec<f64> = ok.iter().map(|r| (r.k_formula - r.k_energy).abs() / r.k_energy.abs().max(1e-12)).collect();
        let median = {
            let mut g = gaps.clone();
            g.sort_by(f64::total_cmp);
            g.get(g.len() / 2).copied().unwrap_or(f64::NAN)
        };
        check = check.detail(format!(
            "{label}: {} samples, {} failed, K_formula in [{:.3e}, {:.3e}], K_energy in [{:.3e}, {:.3e}], median relative route gap {median:.2}",
            s.samples, s.failed, s.min_k_formula, s.max_k_formula, s.min_k_energy, s.max_k_energy
        ));
        let brioschi = ok.iter().map(|r| (r.k_brioschi - r.k_energy).abs() / r.k_energy.abs().max(1e-12)).fold(0.0, f64::max);
        check = check.detail(format!("{label}: max relative |K_brioschi - K_energy| {brioschi:.2e} (diagnostic)"));
        if let Some(e) = t.rows.iter().find_map(|r| r.error.as_ref()) {
            check = check.detail(format!("{label}: first sample error: {e}"));
        }
    }
    check.passed = passed;
    check.summary = parts.join("; ");
    Ok(check)
}

/// Identities named by the audit criterion.
const AUDITED: [&str; 7] = ["int_f", "int_G", "int_YG", "int_XbarYG_plus_2G2", "int_Q", "int_Xbar2Q", "int_g_plus_half"];

fn identity_audit() -> Result<Check> {
    let (k2, k3) = scans().map_err(Error::Usage)?;
    let rows: Vec<_> = k2.rows.iter().chain(&k3.rows).collect();
    let total = rows.len();
    let ok: Vec<_> = rows.iter().filter(|r| r.error.is_none()).collect();
    let accepted = ok
        .iter()
        .filter(|r| AUDITED.iter().all(|key| r.residuals.get(*key).is_some_and(|v| *v <= 1e-3)))
        .count();
    let fraction = accepted as f64 / total as f64;
    let mut check = Check::new(
        fraction >= 0.95,
        format!("{accepted}/{total} samples with all audited residuals <= 1e-3 ({:.1}%)", 100.0 * fraction),
    );
    for key in AUDITED {
        let max = ok.iter().filter_map(|r| r.residuals.get(key)).fold(0.0, |m: f64, v| m.max(*v));
        let within = ok.iter().filter(|r| r.residuals.get(key).is_some_and(|v| *v <= 1e-3)).count();
        check = check.detail(format!("{key}: max {max:.3e}, within tolerance {within}/{}", ok.len()));
    }
    Ok(check)
}

fn probe() -> Result<Check> {
    let ps = [0.5, 0.2, 0.1, 0.05, 0.02];
    let rows = bernoulli_probe(&ps, &CurvatureConfig::default())?;
    let increasing = |v: Vec<f64>| v.windows(2).all(|w| w[1] > w[0]);
    let formula: Vec<f64> = rows.iter().map(|r| r.max_k_formula).collect();
    let energy: Vec<f64> = rows.iter().map(|r| r.max_k_energy).collect();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    let f_up = increasing(formula.clone());
    let e_up = increasing(energy.clone());
    Ok(Check::new(
        f_up && e_up,
        format!(
            "p = {ps:?}: max K_formula {}, max K_energy {}",
            if f_up { "increasing" } else { "not increasing" },
            if e_up { "increasing" } else { "not increasing" }
        ),
    )
    .detail(format!("max K_formula: {}", fmt(&formula)))
    .detail(format!("max K_energy: {}", fmt(&energy)))
    .detail(format!("closed form 1/(P(1|0) + P(0|1)): {}", fmt(&rows.iter().map(|r| r.closed_form).collect::<Vec<_>>()))))
}

fn circle() -> Result<Check> {
    let mut exact: f64 = 0.0;
    for d in [2, 3] {
        for c in [0.0, -(d as f64).ln(), 0.7] {
            for n in [16 * d, 128 * d] {
                let g = CircleGibbs::of(&CircleModel::from_fn(d, n, |_| c)?)?;
                let lambda = d as f64 * f64::exp(c);
                let h0 = g.h[0];
                let flat = g.h.iter().fold(0.0, |m: f64, h| m.max((h - h0).abs() / h0));
                exact = exact.max((g.lambda - lambda).abs() / lambda).max(flat);
            }
        }
    }
    let report = circle_gibbs_check(2, &[128, 256, 512, 1024], |x| 0.3 * (std::f64::consts::TAU * x).cos())?;
    let min_ratio = report.lambda_ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let normalization = report.levels.iter().map(|l| format!("{:.2e}", l.normalization_defect)).collect::<Vec<_>>();
    Ok(Check::new(
        exact <= 1e-12 && min_ratio >= 3.0,
        format!("constants: max relative error of lambda, h {exact:.2e}; eigenvalue refinement ratios {:?}", report.lambda_ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()),
    )
    .detail(format!("|L_Pi(A) 1 - 1| for 0.3 cos(2 pi x) at N = 128..1024: {}", normalization.join(", "))))
}

fn determinism() -> Result<Check> {
    let configs = [
        ExperimentConfig { experiment: Experiment::Scan, samples: 6, seed: 7, ..ExperimentConfig::default() },
        ExperimentConfig { experiment: Experiment::Curvature, seed: 7, ..ExperimentConfig::default() },
        ExperimentConfig { experiment: Experiment::Geodesic, seed: 3, ..ExperimentConfig::default() },
    ];
    let mut identical = true;
    let mut lines = Vec::new();
    for cfg in configs {
        let mut digests = Vec::new();
        for workers in [1, 3] {
            let out = execute(&cfg, Some(workers))?;
            let mut bytes = out.result_bytes()?;
            bytes.extend(out.table.to_csv()?);
            digests.push(hex_digest(&bytes));
        }
        let same = digests.windows(2).all(|w| w[0] == w[1]);
        identical &= same;
        lines.push(format!("{}: {}", cfg.experiment.name(), &digests[0][..16]));
    }
    Ok(Check::new(identical, format!("outputs byte-identical across worker counts 1 and 3: {identical}")).detail(lines.join(", ")))
}
