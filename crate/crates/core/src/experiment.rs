//! Reproducible experiment runs: configuration, dispatch and artifacts.
//!
//! A run writes `manifest.json`, `result.json` and `table.csv` into a
//! directory named after the experiment and the hash of its configuration.
//! `result.json` and `table.csv` depend only on the configuration; the
//! manifest also records wall time.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::circle::{circle_gibbs_check, CircleGibbs, CircleModel};
use crate::curvature::{
    bernoulli_depth2, curvature_scan_in, orthonormal_pair, pool_with, random_base, sample_rng, sectional_curvature,
    two_state_markov_curvature, worker_pool, CurvatureConfig, ScanConfig, ScanTable, AUDIT_TOL,
};
use crate::error::{Error, Result};
use crate::function_space::{CircleGridFunction, CylinderFunction, ShiftSpace};
use crate::geodesy::{geodesic_shoot, parallel_transport, Chart, ChartConfig, FermiConfig};
use crate::geometry::{
    asymptotic_variance, dense_kernel_dim, export_basis, gram_matrix, inner, observable_derivative_check,
    orthonormal_tangent_basis, tangent_project, BasePoint,
};
use crate::transfer::{pressure_derivative_check, random_markov_measure, GibbsData, TransferMatrix};

pub const TABLE_SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Shift,
    Circle,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Normalize,
    #[default]
    Gibbs,
    Pressure,
    Basis,
    Metric,
    Geodesic,
    Transport,
    Curvature,
    Scan,
    Audit,
    Converge,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Normalize => "normalize",
            Experiment::Gibbs => "gibbs",
            Experiment::Pressure => "pressure",
            Experiment::Basis => "basis",
            Experiment::Metric => "metric",
            Experiment::Geodesic => "geodesic",
            Experiment::Transport => "transport",
            Experiment::Curvature => "curvature",
            Experiment::Scan => "scan",
            Experiment::Audit => "audit",
            Experiment::Converge => "converge",
        }
    }
}

/// Refinement axis of the `converge` experiment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Fermi grid spacing of the curvature stencils.
    Fd,
    /// Step of the geodesic integrator.
    #[default]
    Ode,
    /// Truncation depth of the shift backend.
    K,
    /// Circle grid size.
    N,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backend: Backend,
    pub experiment: Experiment,
    pub d: usize,
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// `const:c`, `random`, `bernoulli:p`, `cos:a` or `file:path`.
    pub potential: String,
    pub seed: u64,
    pub samples: usize,
    /// Finite-difference step of derivative checks.
    pub eps: f64,
    /// Geodesic integrator step.
    pub step: f64,
    /// Geodesics are sampled on `[-rho, rho]` (capped by the chart radius).
    pub rho: f64,
    pub fermi_h: f64,
    pub energy_tol: f64,
    pub axis: Axis,
    pub levels: usize,
    /// Root under which the run directory is created; not part of the hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            backend: Backend::Shift,
            experiment: Experiment::Gibbs,
            d: 2,
            k: 2,
            n: 256,
            potential: "random".into(),
            seed: 0,
            samples: 20,
            eps: 1e-2,
            step: 0.01,
            rho: 0.2,
            fermi_h: 0.02,
            energy_tol: 1e-6,
            axis: Axis::Ode,
            levels: 4,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// SHA-256 of the canonical JSON of everything except `output`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex_digest(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.d) {
            return Err(Error::usage(format!("d = {} outside 2..=16", self.d)));
        }
        if self.k == 0 {
            return Err(Error::usage("k must be at least 1"));
        }
        if self.backend == Backend::Circle && (self.n < 2 * self.d || self.n % self.d != 0) {
            return Err(Error::usage(format!("N = {} must be a multiple of d = {} and at least 2d", self.n, self.d)));
        }
        if !(self.eps > 0.0 && self.eps < 0.1) {
            return Err(Error::usage(format!("eps = {} outside (0, 0.1)", self.eps)));
        }
        for (name, v) in [("step", self.step), ("rho", self.rho), ("fermi_h", self.fermi_h), ("energy_tol", self.energy_tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::usage(format!("{name} = {v} must be positive")));
            }
        }
        if self.samples == 0 {
            return Err(Error::usage("samples must be at least 1"));
        }
        if self.levels < 3 {
            return Err(Error::usage("levels must be at least 3"));
        }
        self.potential.parse::<PotentialSpec>()?;
        Ok(())
    }

    fn space(&self) -> Result<ShiftSpace> {
        ShiftSpace::new(self.d, self.k)
    }

    fn chart_config(&self) -> ChartConfig {
        ChartConfig { energy_tol: self.energy_tol, ..ChartConfig::default() }
    }

    fn curvature_config(&self) -> CurvatureConfig {
        CurvatureConfig {
            fermi: FermiConfig { h: self.fermi_h, ..FermiConfig::default() },
            chart: self.chart_config(),
            ..CurvatureConfig::default()
        }
    }

    fn scan_config(&self) -> ScanConfig {
        ScanConfig { d: self.d, k: self.k, samples: self.samples, seed: self.seed, curvature: self.curvature_config() }
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub enum PotentialSpec {
    Const(f64),
    Random,
    Bernoulli(f64),
    Cos(f64),
    File(PathBuf),
}

impl FromStr for PotentialSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::usage(format!("bad number in potential spec {s:?}")))
        };
        match s.split_once(':') {
            None if s == "random" => Ok(PotentialSpec::Random),
            Some(("const", v)) => Ok(PotentialSpec::Const(num(v)?)),
            Some(("bernoulli", v)) => {
                let p = num(v)?;
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::usage(format!("bernoulli parameter {p} outside (0, 1)")));
                }
                Ok(PotentialSpec::Bernoulli(p))
            }
            Some(("cos", v)) => Ok(PotentialSpec::Cos(num(v)?)),
            Some(("file", v)) if !v.is_empty() => Ok(PotentialSpec::File(PathBuf::from(v))),
            _ => Err(Error::usage(format!("unknown potential spec {s:?}"))),
        }
    }
}

/// Shift-space potential of depth `k` (an unnormalized `B`).
pub fn shift_potential(cfg: &ExperimentConfig) -> Result<CylinderFunction> {
    let space = cfg.space()?;
    match cfg.potential.parse()? {
        PotentialSpec::Const(c) => Ok(CylinderFunction::constant(space, c)),
        PotentialSpec::Random => {
            let uni = Uniform::new_inclusive(-0.5, 0.5).expect("valid range");
            let mut rng = sample_rng(cfg.seed, 0);
            CylinderFunction::new(space, (0..space.dim()).map(|_| uni.sample(&mut rng)).collect())
        }
        PotentialSpec::Bernoulli(p) => {
            if cfg.d != 2 {
                return Err(Error::usage("bernoulli potentials need d = 2"));
            }
            let b = bernoulli_depth2(p)?;
            if cfg.k == 1 {
                b.restrict_depth(1)
            } else {
                b.embed(cfg.k)
            }
        }
        PotentialSpec::Cos(a) => Ok(CylinderFunction::from_fn(space, |w| {
            let x: f64 = w.iter().rev().fold(0.0, |acc, &s| (acc + s as f64) / cfg.d as f64);
            a * (TAU * x).cos()
        })),
        PotentialSpec::File(path) => {
            let f: CylinderFunction = serde_json::from_str(&fs::read_to_string(path)?)?;
            if f.d() != cfg.d || f.depth() > cfg.k {
                return Err(Error::usage(format!(
                    "file potential has d = {}, depth {}; config has d = {}, k = {}",
                    f.d(),
                    f.depth(),
                    cfg.d,
                    cfg.k
                )));
            }
            f.embed(cfg.k)
        }
    }
}

/// Circle potential as a function of `x`, when it can be resampled.
fn circle_function(cfg: &ExperimentConfig) -> Result<Option<Box<dyn Fn(f64) -> f64>>> {
    Ok(match cfg.potential.parse()? {
        PotentialSpec::Const(c) => Some(Box::new(move |_| c)),
        PotentialSpec::Cos(a) => Some(Box::new(move |x: f64| a * (TAU * x).cos())),
        PotentialSpec::Random => {
            let mut rng = sample_rng(cfg.seed, 0);
            let c: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))).collect();
            Some(Box::new(move |x: f64| {
                c.iter()
                    .enumerate()
                    .map(|(m, (a, b))| {
                        let f = (m + 1) as f64;
                        (a * (TAU * f * x).cos() + b * (TAU * f * x).sin()) / (f * f)
                    })
                    .sum()
            }))
        }
        PotentialSpec::Bernoulli(_) => return Err(Error::usage("bernoulli potentials live on the shift backend")),
        PotentialSpec::File(_) => None,
    })
}

fn circle_model(cfg: &ExperimentConfig) -> Result<CircleModel> {
    match circle_function(cfg)? {
        Some(f) => CircleModel::from_fn(cfg.d, cfg.n, f),
        None => {
            let PotentialSpec::File(path) = cfg.potential.parse()? else { unreachable!() };
            let g: CircleGridFunction = serde_json::from_str(&fs::read_to_string(path)?)?;
            if g.len() != cfg.n {
                return Err(Error::usage(format!("file potential has N = {}, config has N = {}", g.len(), cfg.n)));
            }
            CircleModel::new(cfg.d, g)
        }
    }
}

/// CSV table; a `schema_version` column is prepended on output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["schema_version".to_string()];
        header.extend(self.header.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut row = vec![TABLE_SCHEMA_VERSION.to_string()];
            row.extend(r.iter().cloned());
            w.write_record(&row)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

/// What an experiment produces before it is written to disk.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub result: Value,
    pub table: Table,
    /// Headline residuals, echoed into the manifest.
    pub residuals: BTreeMap<String, f64>,
}

impl Outcome {
    pub fn result_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(&self.result)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

fn residuals<const N: usize>(items: [(&str, f64); N]) -> BTreeMap<String, f64> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Runs the experiment in memory; `workers` sizes the pool of parallel experiments.
pub fn execute(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<Outcome> {
    cfg.validate()?;
    match (cfg.backend, cfg.experiment) {
        (Backend::Circle, Experiment::Normalize) => circle_normalize(cfg),
        (Backend::Circle, Experiment::Gibbs) => circle_gibbs(cfg),
        (Backend::Circle, Experiment::Pressure) => circle_pressure(cfg),
        (Backend::Circle, Experiment::Converge) if cfg.axis == Axis::N => circle_pressure(cfg),
        (Backend::Circle, e) => Err(Error::usage(format!(
            "experiment {} with this axis is not available on the circle backend",
            e.name()
        ))),
        (Backend::Shift, Experiment::Normalize) => normalize(cfg),
        (Backend::Shift, Experiment::Gibbs) => gibbs(cfg),
        (Backend::Shift, Experiment::Pressure) => derivatives(cfg),
        (Backend::Shift, Experiment::Basis) => basis(cfg),
        (Backend::Shift, Experiment::Metric) => metric(cfg),
        (Backend::Shift, Experiment::Geodesic) => geodesic(cfg),
        (Backend::Shift, Experiment::Transport) => transport(cfg),
        (Backend::Shift, Experiment::Curvature) => curvature(cfg),
        (Backend::Shift, Experiment::Scan) => scan(cfg, workers),
        (Backend::Shift, Experiment::Audit) => audit(cfg, workers),
        (Backend::Shift, Experiment::Converge) => converge(cfg),
    }
}

fn normalize(cfg: &ExperimentConfig) -> Result<Outcome> {
    let b = shift_potential(cfg)?;
    let gb = GibbsData::of(&b)?;
    let p = gb.normalized.clone();
    let gp = GibbsData::of(&p)?;
    let defect = TransferMatrix::of(&p).normalization_defect();
    let mut measure_gap: f64 = 0.0;
    for depth in [cfg.k, cfg.k + 2] {
        let (wb, wp) = (gb.weights(depth)?, gp.weights(depth)?);
        measure_gap = wb.iter().zip(&wp).fold(measure_gap, |m, (x, y)| m.max((x - y).abs()));
    }
    let space = b.space();
    let mut table = Table::new(&["index", "word", "input", "normalized", "mu"]);
    for i in 0..space.dim() {
        table.push(vec![
            i.to_string(),
            space.word_label(i),
            num(b.coeffs()[i]),
            num(p.coeffs()[i]),
            num(gp.mu[i]),
        ]);
    }
    Ok(Outcome {
        result: json!({
            "input": b,
            "normalized": p,
            "lambda": gb.lambda,
            "pressure": gb.pressure(),
            "normalization_defect": defect,
            "measure_gap": measure_gap,
        }),
        table,
        residuals: residuals([
            ("normalization_defect", defect),
            ("measure_gap", measure_gap),
            ("eigen_residual", gb.right_residual / gb.lambda),
        ]),
    })
}

fn gibbs(cfg: &ExperimentConfig) -> Result<Outcome> {
    let a = shift_potential(cfg)?;
    let g = GibbsData::of(&a)?;
    let defects = g.structure_defects()?;
    let mut rng = sample_rng(cfg.seed, 1);
    let mut min_gap = f64::INFINITY;
    for _ in 0..cfg.samples {
        let m = random_markov_measure(&mut rng, g.space());
        min_gap = min_gap.min(g.variational_gap(&a, &m)?);
    }
    let equality_gap = g.variational_gap(&a, &g.weights(cfg.k)?)?;
    let space = g.space();
    let mut table = Table::new(&["index", "word", "h", "nu", "mu"]);
    for i in 0..space.dim() {
        table.push(vec![i.to_string(), space.word_label(i), num(g.h.coeffs()[i]), num(g.nu[i]), num(g.mu[i])]);
    }
    Ok(Outcome {
        result: json!({
            "potential": a,
            "lambda": g.lambda,
            "pressure": g.pressure(),
            "method": g.method,
            "right_residual": g.right_residual,
            "left_residual": g.left_residual,
            "h": g.h,
            "nu": g.nu,
            "mu": g.mu,
            "normalized": g.normalized,
            "structure_defects": defects,
            "variational": {
                "measures": cfg.samples,
                "min_gap": min_gap,
                "equality_gap": equality_gap,
            },
        }),
        table,
        residuals: residuals([
            ("right_residual_rel", g.right_residual / g.lambda),
            ("left_residual_rel", g.left_residual / g.lambda),
            ("consistency", defects.consistency),
            ("shift_invariance", defects.shift_invariance),
            ("variational_equality_gap", equality_gap.abs()),
        ]),
    })
}

fn base_point(cfg: &ExperimentConfig) -> Result<Arc<BasePoint>> {
    Ok(Arc::new(BasePoint::project(&shift_potential(cfg)?)?))
}

/// Pressure derivatives along a random `psi`, its tangent projection, and
/// the observable derivative along a tangent `X`.
fn derivatives(cfg: &ExperimentConfig) -> Result<Outcome> {
    let base = base_point(cfg)?;
    let space = base.space();
    let mut rng = sample_rng(cfg.seed, 1);
    let mut draw = || CylinderFunction::from_fn(space, |_| rng.random_range(-1.0..1.0));
    let psi = draw();
    let phi = draw();
    let v = draw();
    let a = base.potential();
    let general = pressure_derivative_check(a, &psi, cfg.eps)?;
    let tangent_psi = tangent_project(&psi, &base)?;
    let tangent = pressure_derivative_check(a, tangent_psi.value(), cfg.eps)?;
    let x = tangent_project(&v, &base)?;
    let observable = observable_derivative_check(&x, &phi, cfg.eps)?;
    let observable_tangent = observable_derivative_check(&x, tangent_psi.value(), cfg.eps)?;
    let mut table = Table::new(&["check", "eps", "finite_difference", "formula", "gap", "ratio"]);
    for (name, c) in [
        ("pressure_first", &general.first),
        ("pressure_second", &general.second),
        ("pressure_second_tangent", &tangent.second),
        ("observable", &observable.check),
        ("observable_tangent", &observable_tangent.check),
    ] {
        for i in 0..2 {
            table.push(vec![
                name.to_string(),
                num(c.eps[i]),
                num(c.finite_difference[i]),
                num(c.formula),
                num(c.gaps[i]),
                num(c.ratio),
            ]);
        }
    }
    Ok(Outcome {
        result: json!({
            "base": a,
            "psi": psi,
            "phi": phi,
            "x": x.value(),
            "pressure": general,
            "pressure_tangent": tangent,
            "observable": observable,
            "observable_tangent": observable_tangent,
        }),
        table,
        residuals: residuals([
            ("pressure_first_ratio", general.first.ratio),
            ("observable_ratio", observable.check.ratio),
            ("observable_gap", observable.check.gaps[1]),
            ("observable_tangent_gap", observable_tangent.check.gaps[1]),
        ]),
    })
}

fn basis(cfg: &ExperimentConfig) -> Result<Outcome> {
    let base = base_point(cfg)?;
    let vectors = orthonormal_tangent_basis(&base)?;
    let gram = gram_matrix(&vectors)?;
    let n = vectors.len();
    let orthonormality = (&gram - nalgebra::DMatrix::identity(n, n)).amax();
    let dense = dense_kernel_dim(&TransferMatrix::of(base.potential()));
    let expected = cfg.d.pow(cfg.k as u32) - cfg.d.pow(cfg.k as u32 - 1);
    let mut kernel_defect: f64 = 0.0;
    let mut mean_defect: f64 = 0.0;
    for v in &vectors {
        kernel_defect = kernel_defect.max(base.transfer(v.value())?.sup_norm());
        mean_defect = mean_defect.max(base.integrate(v.value())?.abs());
    }
    let space = base.space();
    let mut header = vec!["vector".to_string()];
    header.extend((0..space.dim()).map(|i| space.word_label(i)));
    let mut table = Table { header, rows: vec![] };
    for (j, v) in vectors.iter().enumerate() {
        let mut row = vec![j.to_string()];
        row.extend(v.value().coeffs().iter().map(|c| num(*c)));
        table.push(row);
    }
    Ok(Outcome {
        result: json!({
            "basis": export_basis(&base, &vectors),
            "dimension": n,
            "dense_kernel_dimension": dense,
            "expected_dimension": expected,
            "orthonormality_defect": orthonormality,
            "kernel_defect": kernel_defect,
            "mean_defect": mean_defect,
        }),
        table,
        residuals: residuals([
            ("orthonormality_defect", orthonormality),
            ("kernel_defect", kernel_defect),
            ("dimension_mismatch", (n as f64 - expected as f64).abs()),
        ]),
    })
}

/// `(1/n) int (S_n X)^2 dmu` against `int X^2 dmu` for basis vectors, and the chart metric.
fn metric(cfg: &ExperimentConfig) -> Result<Outcome> {
    let base = base_point(cfg)?;
    let vectors = orthonormal_tangent_basis(&base)?;
    let mut table = Table::new(&["vector", "n", "variance", "int_x2", "gap"]);
    let mut worst: f64 = 0.0;
    for (j, x) in vectors.iter().enumerate() {
        let norm = inner(x, x)?;
        for n in 1..=8 {
            let var = asymptotic_variance(x, n)?;
            worst = worst.max((var - norm).abs());
            table.push(vec![j.to_string(), n.to_string(), num(var), num(norm), num((var - norm).abs())]);
        }
    }
    let chart = Chart::new(base.clone(), cfg.chart_config())?;
    let m = chart.dim();
    let origin = DVector::zeros(m);
    let mut offset = DVector::zeros(m);
    offset[0] = chart.radius() / 2.0;
    let to_rows = |g: nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> { g.row_iter().map(|r| r.iter().copied().collect()).collect() };
    Ok(Outcome {
        result: json!({
            "base": base.potential(),
            "max_variance_gap": worst,
            "chart_radius": chart.radius(),
            "metric_origin": to_rows(chart.metric(&origin)?),
            "metric_offset": { "coords": offset.as_slice(), "metric": to_rows(chart.metric(&offset)?) },
        }),
        table,
        residuals: residuals([("max_variance_gap", worst)]),
    })
}

/// Chart at the configured base and a seeded unit direction.
fn chart_and_direction(cfg: &ExperimentConfig) -> Result<(Chart, DVector<f64>, ChaCha8Rng)> {
    let chart = Chart::new(base_point(cfg)?, cfg.chart_config())?;
    let m = chart.dim();
    let mut rng = sample_rng(cfg.seed, 1);
    let v = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
    let e = chart.frame(&DVector::zeros(m))?.energy(&v);
    Ok((chart, v / e.sqrt(), rng))
}

fn geodesic(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (chart, x0, _) = chart_and_direction(cfg)?;
    let rho = cfg.rho.min(chart.radius());
    let path = geodesic_shoot(&chart, &x0, rho, Some(cfg.step))?;
    let mut header = vec!["sample".to_string(), "t".into(), "energy".into(), "constraint".into()];
    header.extend((0..chart.dim()).map(|i| format!("coord_{i}")));
    let mut table = Table { header, rows: vec![] };
    for n in 0..path.len() {
        let mut row = vec![n.to_string(), num(path.times[n]), num(path.energy[n]), num(path.constraint[n])];
        row.extend(path.coords[n].iter().map(|c| num(*c)));
        table.push(row);
    }
    Ok(Outcome {
        result: json!({
            "base": chart.base().potential(),
            "chart_radius": chart.radius(),
            "rho": rho,
            "initial_velocity": x0.as_slice(),
            "path": path.export(),
            "energy_drift": path.energy_drift(),
            "constraint_drift": path.constraint_drift(),
        }),
        table,
        residuals: residuals([("energy_drift", path.energy_drift()), ("constraint_drift", path.constraint_drift())]),
    })
}

fn transport(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (chart, x0, mut rng) = chart_and_direction(cfg)?;
    let m = chart.dim();
    if m < 2 {
        return Err(Error::usage("transport needs a chart of dimension at least 2"));
    }
    let rho = cfg.rho.min(chart.radius());
    let path = geodesic_shoot(&chart, &x0, rho, Some(cfg.step))?;
    let metric = chart.metric(&DVector::zeros(m))?;
    let b = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
    let (_, y0) = orthonormal_pair(&metric, &x0, &b)?;
    let field = parallel_transport(&chart, &path, &y0)?;
    let own = parallel_transport(&chart, &path, &x0)?;
    let mut self_gap: f64 = 0.0;
    let mut table = Table::new(&["sample", "t", "norm", "velocity_inner", "self_gap"]);
    for n in 0..path.len() {
        let gap = (DVector::from_column_slice(&own.vectors[n]) - &path.velocity[n]).amax();
        self_gap = self_gap.max(gap);
        table.push(vec![
            n.to_string(),
            num(field.times[n]),
            num(field.norms[n]),
            num(field.velocity_inner[n]),
            num(gap),
        ]);
    }
    let orthogonality = field.velocity_inner.iter().fold(0.0, |a: f64, c| a.max(c.abs()));
    Ok(Outcome {
        result: json!({
            "base": chart.base().potential(),
            "rho": rho,
            "initial_velocity": x0.as_slice(),
            "transported_initial": y0.as_slice(),
            "field": field,
            "norm_drift": field.norm_drift(),
            "orthogonality": orthogonality,
            "self_transport_gap": self_gap,
        }),
        table,
        residuals: residuals([
            ("norm_drift", field.norm_drift()),
            ("orthogonality", orthogonality),
            ("self_transport_gap", self_gap),
        ]),
    })
}

/// Sectional curvature at the configured base and a seeded plane. With the
/// `random` potential this is sample 0 of the scan with the same seed.
fn curvature(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut rng = sample_rng(cfg.seed, 0);
    let base = if cfg.potential == "random" {
        random_base(&mut rng, cfg.space()?)?
    } else {
        base_point(cfg)?
    };
    let chart = Chart::new(base, cfg.chart_config())?;
    let m = chart.dim();
    if m < 2 {
        return Err(Error::usage("curvature needs a chart of dimension at least 2"));
    }
    let a = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
    let b = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
    let (x, y) = orthonormal_pair(&chart.metric(&DVector::zeros(m))?, &a, &b)?;
    let report = sectional_curvature(&chart, &x, &y, &cfg.curvature_config())?;
    let closed_form = two_state_markov_curvature(chart.base().potential()).ok();
    let mut table = Table::new(&["identity", "residual"]);
    for (name, r) in &report.residuals {
        table.push(vec![name.clone(), num(*r)]);
    }
    let mut res = residuals([
        ("route_gap", (report.k_formula - report.k_energy).abs()),
        ("f_refinement", report.f_refinement),
        ("audit_sup", report.audit_sup()),
    ]);
    if let Some(c) = closed_form {
        res.insert("energy_vs_closed_form".into(), (report.k_energy - c).abs());
    }
    Ok(Outcome {
        result: json!({
            "base": chart.base().potential(),
            "base_hash": chart.base().fingerprint(),
            "plane_x": x.as_slice(),
            "plane_y": y.as_slice(),
            "K_formula": report.k_formula,
            "K_energy": report.k_energy,
            "K_brioschi": report.k_brioschi,
            "closed_form": closed_form,
            "report": report,
        }),
        table,
        residuals: res,
    })
}

fn run_scan(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ScanTable> {
    let pool = match workers {
        Some(_) => pool_with(workers)?,
        None => worker_pool()?,
    };
    curvature_scan_in(&cfg.scan_config(), &pool)
}

fn scan(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<Outcome> {
    let t = run_scan(cfg, workers)?;
    let mut csv_bytes = Vec::new();
    t.write_csv(&mut csv_bytes)?;
    let mut reader = csv::Reader::from_reader(csv_bytes.as_slice());
    // the scan CSV already carries schema_version
    let header: Vec<String> = reader.headers()?.iter().skip(1).map(String::from).collect();
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().skip(1).map(String::from).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    let s = &t.summary;
    Ok(Outcome {
        residuals: residuals([
            ("min_k_formula", s.min_k_formula),
            ("min_k_energy", s.min_k_energy),
            ("max_route_gap", s.max_route_gap),
            ("failed", s.failed as f64),
        ]),
        result: serde_json::to_value(&t)?,
        table: Table { header, rows },
    })
}

fn audit(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<Outcome> {
    let t = run_scan(cfg, workers)?;
    let ok: Vec<_> = t.rows.iter().filter(|r| r.error.is_none()).collect();
    let mut per: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for r in &ok {
        for (name, v) in &r.residuals {
            let e = per.entry(name.clone()).or_insert((0.0, 0.0, 0));
            e.0 = e.0.max(*v);
            e.1 += v / ok.len() as f64;
            e.2 += usize::from(*v <= AUDIT_TOL);
        }
    }
    let mut table = Table::new(&["identity", "max", "mean", "within_tolerance", "samples"]);
    for (name, (max, mean, count)) in &per {
        table.push(vec![name.clone(), num(*max), num(*mean), count.to_string(), ok.len().to_string()]);
    }
    let accepted = t.summary.accepted as f64 / t.rows.len() as f64;
    let identities: BTreeMap<&String, Value> =
        per.iter().map(|(n, (max, mean, c))| (n, json!({"max": max, "mean": mean, "within_tolerance": c}))).collect();
    Ok(Outcome {
        result: json!({
            "samples": t.rows.len(),
            "failed": t.summary.failed,
            "accepted": t.summary.accepted,
            "accepted_fraction": accepted,
            "tolerance": AUDIT_TOL,
            "identities": identities,
        }),
        table,
        residuals: residuals([("accepted_fraction", accepted)]),
    })
}

/// Successive differences and their ratios along a refinement sequence.
fn refinement_table(param: &str, levels: &[(f64, f64)]) -> (Table, Vec<f64>, Vec<f64>) {
    let diffs: Vec<f64> = levels.windows(2).map(|w| (w[0].1 - w[1].1).abs()).collect();
    let ratios: Vec<f64> = diffs.windows(2).map(|w| w[0] / w[1]).collect();
    let mut table = Table::new(&["level", param, "value", "diff", "ratio"]);
    for (i, (p, v)) in levels.iter().enumerate() {
        let diff = if i > 0 { num(diffs[i - 1]) } else { String::new() };
        let ratio = if i > 1 { num(ratios[i - 2]) } else { String::new() };
        table.push(vec![i.to_string(), num(*p), num(*v), diff, ratio]);
    }
    (table, diffs, ratios)
}

fn converge(cfg: &ExperimentConfig) -> Result<Outcome> {
    match cfg.axis {
        Axis::Fd => converge_fd(cfg),
        Axis::Ode => converge_ode(cfg),
        Axis::K => converge_k(cfg),
        Axis::N => Err(Error::usage("axis n needs the circle backend")),
    }
}

/// `K_energy` without extrapolation as the Fermi spacing halves.
fn converge_fd(cfg: &ExperimentConfig) -> Result<Outcome> {
    let chart = Chart::new(base_point(cfg)?, cfg.chart_config())?;
    let m = chart.dim();
    if m < 2 {
        return Err(Error::usage("curvature needs a chart of dimension at least 2"));
    }
    let mut e = DVector::zeros(m);
    e[0] = 1.0;
    let mut f = DVector::zeros(m);
    f[1] = 1.0;
    let (x, y) = orthonormal_pair(&chart.metric(&DVector::zeros(m))?, &e, &f)?;
    let mut levels = Vec::new();
    for i in 0..cfg.levels {
        let mut c = cfg.curvature_config();
        c.richardson = false;
        c.fermi.h = cfg.fermi_h / 2f64.powi(i as i32);
        levels.push((c.fermi.h, sectional_curvature(&chart, &x, &y, &c)?.k_energy));
    }
    converge_outcome(cfg, "fermi_h", "K_energy", &levels)
}

/// Geodesic endpoint coordinate as the integrator step halves.
fn converge_ode(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (chart, x0, _) = chart_and_direction(cfg)?;
    let rho = cfg.rho.min(chart.radius());
    let mut endpoints: Vec<(f64, DVector<f64>)> = Vec::new();
    for i in 0..cfg.levels {
        let step = cfg.step / 2f64.powi(i as i32);
        let path = geodesic_shoot(&chart, &x0, rho, Some(step))?;
        endpoints.push((step, path.coords.last().expect("nonempty path").clone()));
    }
    // scalar value: first coordinate; differences use the full vector
    let levels: Vec<(f64, f64)> = endpoints.iter().map(|(s, c)| (*s, c[0])).collect();
    let mut out = converge_outcome(cfg, "step", "endpoint_coord_0", &levels)?;
    let diffs: Vec<f64> = endpoints.windows(2).map(|w| (&w[0].1 - &w[1].1).amax()).collect();
    let ratios: Vec<f64> = diffs.windows(2).map(|w| w[0] / w[1]).collect();
    out.result["vector_diffs"] = json!(diffs);
    out.result["vector_ratios"] = json!(ratios);
    out.result["rho"] = json!(rho);
    out.residuals.insert("min_vector_ratio".into(), ratios.iter().copied().fold(f64::INFINITY, f64::min));
    Ok(out)
}

/// Depth-`k` Gibbs weights computed in deeper truncations.
fn converge_k(cfg: &ExperimentConfig) -> Result<Outcome> {
    let a = shift_potential(cfg)?;
    let reference = GibbsData::of(&a)?.weights(cfg.k)?;
    let mut table = Table::new(&["level", "k", "max_weight_diff"]);
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for i in 0..cfg.levels {
        let k = cfg.k + i;
        let w = GibbsData::of(&a.embed(k)?)?.weights(cfg.k)?;
        let diff = w.iter().zip(&reference).fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()));
        worst = worst.max(diff);
        table.push(vec![i.to_string(), k.to_string(), num(diff)]);
        rows.push(json!({"k": k, "max_weight_diff": diff}));
    }
    Ok(Outcome {
        result: json!({"axis": "k", "potential": a, "reference_weights": reference, "levels": rows, "max_diff": worst}),
        table,
        residuals: residuals([("max_weight_diff", worst)]),
    })
}

fn converge_outcome(cfg: &ExperimentConfig, param: &str, quantity: &str, levels: &[(f64, f64)]) -> Result<Outcome> {
    let (table, diffs, ratios) = refinement_table(param, levels);
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Outcome {
        result: json!({
            "axis": cfg.axis,
            "quantity": quantity,
            "parameters": levels.iter().map(|l| l.0).collect::<Vec<_>>(),
            "values": levels.iter().map(|l| l.1).collect::<Vec<_>>(),
            "diffs": diffs,
            "ratios": ratios,
        }),
        table,
        residuals: residuals([("min_ratio", min_ratio)]),
    })
}

fn circle_normalize(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = circle_model(cfg)?;
    let g = CircleGibbs::of(&model)?;
    let defect = g.normalization_defect()?;
    let density = g.density();
    let mut table = Table::new(&["j", "x", "input", "normalized", "density"]);
    for j in 0..g.n {
        table.push(vec![
            j.to_string(),
            num(j as f64 / g.n as f64),
            num(model.potential().values()[j]),
            num(g.normalized.values()[j]),
            num(density[j]),
        ]);
    }
    Ok(Outcome {
        result: json!({
            "approximate": true,
            "d": g.d,
            "N": g.n,
            "lambda": g.lambda,
            "pressure": g.pressure(),
            "normalized": g.normalized,
            "normalization_defect": defect,
        }),
        table,
        residuals: residuals([("normalization_defect", defect), ("eigen_residual", g.right_residual / g.lambda)]),
    })
}

fn circle_gibbs(cfg: &ExperimentConfig) -> Result<Outcome> {
    let report = match circle_function(cfg)? {
        Some(f) => circle_gibbs_check(cfg.d, &[cfg.n, 2 * cfg.n, 4 * cfg.n], f)?,
        None => {
            let model = circle_model(cfg)?;
            let vals = model.potential().values().to_vec();
            let n = cfg.n;
            // grid data cannot be resampled: a single level
            circle_gibbs_check(cfg.d, &[n], move |x| vals[((x * n as f64).round() as usize) % n])?
        }
    };
    let mut table = Table::new(&["N", "lambda", "pressure", "eigen_residual", "adjoint_defect", "invariance_defect", "normalization_defect"]);
    for l in &report.levels {
        table.push(vec![
            l.n.to_string(),
            num(l.lambda),
            num(l.pressure),
            num(l.eigen_residual),
            num(l.adjoint_defect),
            num(l.invariance_defect),
            num(l.normalization_defect),
        ]);
    }
    let first = &report.levels[0];
    Ok(Outcome {
        residuals: residuals([
            ("adjoint_defect", first.adjoint_defect),
            ("invariance_defect", first.invariance_defect),
            ("normalization_defect", first.normalization_defect),
        ]),
        result: serde_json::to_value(&report)?,
        table,
    })
}

/// Eigenvalue and pressure as the grid doubles.
fn circle_pressure(cfg: &ExperimentConfig) -> Result<Outcome> {
    let Some(f) = circle_function(cfg)? else {
        return Err(Error::usage("grid refinement needs a potential given by a formula"));
    };
    let ns: Vec<usize> = (0..cfg.levels).map(|i| cfg.n << i).collect();
    let report = circle_gibbs_check(cfg.d, &ns, f)?;
    let levels: Vec<(f64, f64)> = report.levels.iter().map(|l| (l.n as f64, l.lambda)).collect();
    let mut out = converge_outcome(cfg, "N", "lambda", &levels)?;
    out.result["axis"] = json!("n");
    out.result["approximate"] = json!(true);
    out.result["pressure"] = json!(report.levels.iter().map(|l| l.pressure).collect::<Vec<_>>());
    out.result["pressure_scaled_gaps"] = json!(report.pressure_scaled_gaps);
    Ok(out)
}

/// Where a run went and how it ended.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub dir: PathBuf,
    pub exit_code: i32,
    pub error: Option<String>,
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

/// Executes and persists a run under `cfg.output` (default `runs`).
pub fn run(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<RunReport> {
    let root = cfg.output.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let hash = cfg.hash();
    let dir = root.join(format!("{}-{}", cfg.experiment.name(), &hash[..16]));
    fs::create_dir_all(&dir)?;
    let start = Instant::now();
    let outcome = execute(cfg, workers);
    let wall = start.elapsed().as_secs_f64();
    let (status, code, error, res, files) = match &outcome {
        Ok(o) => {
            let result = o.result_bytes()?;
            let table = o.table.to_csv()?;
            fs::write(dir.join("result.json"), &result)?;
            fs::write(dir.join("table.csv"), &table)?;
            let files = json!({"result.json": hex_digest(&result), "table.csv": hex_digest(&table)});
            ("ok", EXIT_OK, None, o.residuals.clone(), files)
        }
        Err(e) => {
            let code = exit_code(e);
            let status = if code == EXIT_NUMERICAL { "numerical_failure" } else { "validation_error" };
            let mut res = BTreeMap::new();
            if let Error::Numerical { residual, .. } = e {
                res.insert("last_residual".to_string(), *residual);
            }
            // stale artifacts from an earlier run of the same config would be misleading
            for f in ["result.json", "table.csv"] {
                let _ = fs::remove_file(dir.join(f));
            }
            (status, code, Some(e.to_string()), res, json!({}))
        }
    };
    let manifest = json!({
        "artifact": "gibbslab",
        "version": ARTIFACT_VERSION,
        "config": cfg,
        "config_hash": hash,
        "status": status,
        "exit_code": code,
        "error": error,
        "residuals": res,
        "files": files,
        "wall_time_s": wall,
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join("manifest.json"), bytes)?;
    Ok(RunReport { dir, exit_code: code, error })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(experiment: Experiment) -> ExperimentConfig {
        ExperimentConfig { experiment, ..ExperimentConfig::default() }
    }

    #[test]
    fn potential_specs_parse() {
        assert_eq!("const:1.5".parse::<PotentialSpec>().unwrap(), PotentialSpec::Const(1.5));
        assert_eq!("random".parse::<PotentialSpec>().unwrap(), PotentialSpec::Random);
        assert!("bernoulli:1.2".parse::<PotentialSpec>().is_err());
        assert!("cos:x".parse::<PotentialSpec>().is_err());
        assert!("spline:1".parse::<PotentialSpec>().is_err());
    }

    #[test]
    fn config_json_roundtrip_and_hash() {
        let c = ExperimentConfig { k: 3, potential: "cos:0.2".into(), ..cfg(Experiment::Basis) };
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let moved = ExperimentConfig { output: Some("elsewhere".into()), ..c.clone() };
        assert_eq!(moved.hash(), c.hash());
        assert_ne!(ExperimentConfig { seed: 1, ..c.clone() }.hash(), c.hash());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"dd": 2}"#).is_err());
    }

    #[test]
    fn normalize_constant() {
        let c = ExperimentConfig { potential: "const:1.0".into(), ..cfg(Experiment::Normalize) };
        let out = execute(&c, None).unwrap();
        let p: CylinderFunction = serde_json::from_value(out.result["normalized"].clone()).unwrap();
        assert!(p.coeffs().iter().all(|v| (v + 2f64.ln()).abs() <= 1e-12));
        let csv = String::from_utf8(out.table.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("schema_version,index,word"));
    }

    #[test]
    fn validation_errors_are_usage() {
        let bad = [
            ExperimentConfig { d: 1, ..cfg(Experiment::Gibbs) },
            ExperimentConfig { potential: "nope".into(), ..cfg(Experiment::Gibbs) },
            ExperimentConfig { backend: Backend::Circle, n: 255, ..cfg(Experiment::Gibbs) },
            ExperimentConfig { backend: Backend::Circle, ..cfg(Experiment::Curvature) },
        ];
        for c in bad {
            let e = execute(&c, None).unwrap_err();
            assert_eq!(exit_code(&e), EXIT_VALIDATION, "{e}");
        }
    }

    #[test]
    fn converge_k_is_exact() {
        let c = ExperimentConfig { axis: Axis::K, levels: 3, ..cfg(Experiment::Converge) };
        let out = execute(&c, None).unwrap();
        assert!(out.residuals["max_weight_diff"] <= 1e-14);
    }

    #[test]
    fn circle_gibbs_constant() {
        let c = ExperimentConfig { backend: Backend::Circle, n: 64, potential: "const:0".into(), ..cfg(Experiment::Gibbs) };
        let out = execute(&c, None).unwrap();
        let lambda = out.result["levels"][0]["lambda"].as_f64().unwrap();
        assert!((lambda - 2.0).abs() <= 1e-12);
    }
}
