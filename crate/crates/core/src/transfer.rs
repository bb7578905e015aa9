//! The Ruelle transfer operator `L_A f(x) = sum_{T y = x} e^{A(y)} f(y)`,
//! its leading eigendata, pressure, the normalization map and Gibbs measures.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function_space::{checked_dim, CylinderFunction, ShiftSpace, DEFAULT_DEPTH_CAP};

/// Matrices up to this size use the dense eigensolver under [`EigenMethod::Auto`].
pub const DENSE_LIMIT: usize = 64;
pub const POWER_TOL: f64 = 1e-13;
pub const POWER_MAX_ITER: usize = 100_000;
pub const SCHUR_MAX_ITER: usize = 10_000;
/// A leading eigenvalue closer than this (relative) to the next one is rejected.
pub const GAP_THRESHOLD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum Domain {
    Shift { d: usize, k: usize },
    Circle { d: usize, n: usize },
}

/// Matrix of `f -> L_A f` on a finite-dimensional function space.
#[derive(Clone, Debug)]
pub struct TransferMatrix {
    domain: Domain,
    entries: DMatrix<f64>,
}

impl TransferMatrix {
    /// Transfer operator of `a` on depth-`k` cylinder functions.
    ///
    /// `a` may have depth up to `k + 1`: the preimage `a x` of a depth-`k`
    /// word carries `k + 1` symbols, so the operator still maps depth-`k`
    /// functions to depth-`k` functions.
    pub fn build(a: &CylinderFunction, k: usize) -> Result<Self> {
        let d = a.d();
        let ka = a.depth();
        if ka > k + 1 {
            return Err(Error::usage(format!("potential of depth {ka} on depth-{k} functions")));
        }
        let space = ShiftSpace::new(d, k)?;
        let n = space.dim();
        let na = a.coeffs().len();
        let weights: Vec<f64> = a.coeffs().iter().map(|x| x.exp()).collect();
        let mut entries = DMatrix::zeros(n, n);
        for row in 0..n {
            let tail = d * (row % (n / d));
            for sym in 0..d {
                // preimage word: sym followed by the first k-1 symbols of `row`
                let pre = sym + tail;
                let pre_full = sym + d * row;
                entries[(row, pre)] += weights[pre_full % na];
            }
        }
        Ok(TransferMatrix { domain: Domain::Shift { d, k }, entries })
    }

    /// Transfer operator at the potential's own depth.
    pub fn of(a: &CylinderFunction) -> Self {
        Self::build(a, a.depth()).expect("depth is valid by construction")
    }

    pub(crate) fn from_parts(domain: Domain, entries: DMatrix<f64>) -> Self {
        TransferMatrix { domain, entries }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        &self.entries * f
    }

    /// `L_A f` for `f` of depth at most the matrix depth; the result has the matrix depth.
    pub fn apply_fn(&self, f: &CylinderFunction) -> Result<CylinderFunction> {
        let Domain::Shift { d, k } = self.domain else {
            return Err(Error::usage("apply_fn needs a shift-space matrix"));
        };
        if f.d() != d {
            return Err(Error::usage("alphabet mismatch"));
        }
        let f = f.embed(k)?;
        let out = self.apply(&DVector::from_column_slice(f.coeffs()));
        Ok(CylinderFunction::from_vec_unchecked(f.space(), out.as_slice().to_vec()))
    }

    /// `sup |L 1 - 1|`, zero exactly when the potential is normalized.
    pub fn normalization_defect(&self) -> f64 {
        self.entries.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigenMethod {
    /// Dense for dimension up to [`DENSE_LIMIT`], power iteration beyond.
    #[default]
    Auto,
    Dense,
    Power,
}

/// Leading eigentriple of a nonnegative matrix, normalized so that `sum nu = 1`
/// and `nu . h = 1`.
#[derive(Clone, Debug)]
pub struct Eigendata {
    pub lambda: f64,
    pub h: DVector<f64>,
    pub nu: DVector<f64>,
    /// `||M h - lambda h||_inf`
    pub right_residual: f64,
    /// `||nu^T M - lambda nu^T||_1`
    pub left_residual: f64,
    pub method: EigenMethod,
    pub iterations: usize,
}

pub fn leading_eigen(m: &TransferMatrix) -> Result<Eigendata> {
    leading_eigen_with(m, EigenMethod::Auto)
}

pub fn leading_eigen_with(m: &TransferMatrix, method: EigenMethod) -> Result<Eigendata> {
    let auto = method == EigenMethod::Auto;
    let method = match method {
        EigenMethod::Auto if m.dim() <= DENSE_LIMIT => EigenMethod::Dense,
        EigenMethod::Auto => EigenMethod::Power,
        other => other,
    };
    let (method, (lambda, h, nu, iterations)) = match method {
        EigenMethod::Dense => match dense_eigen(&m.entries) {
            // the Schur iteration can stall on highly non-normal matrices
            Err(Error::Numerical { .. }) if auto => (EigenMethod::Power, power_eigen(&m.entries)?),
            other => (EigenMethod::Dense, other?),
        },
        _ => (EigenMethod::Power, power_eigen(&m.entries)?),
    };
    finish_eigen(&m.entries, lambda, h, nu, method, iterations)
}

fn finish_eigen(
    m: &DMatrix<f64>,
    lambda: f64,
    mut h: DVector<f64>,
    mut nu: DVector<f64>,
    method: EigenMethod,
    iterations: usize,
) -> Result<Eigendata> {
    let orient = |v: &mut DVector<f64>| {
        if v.sum() < 0.0 {
            v.neg_mut();
        }
    };
    orient(&mut h);
    orient(&mut nu);
    let hmax = h.amax();
    let numax = nu.amax();
    if h.iter().any(|&x| x <= 1e-12 * hmax) {
        return Err(Error::Structural("leading eigenfunction is not strictly positive".into()));
    }
    if nu.iter().any(|&x| x < -1e-12 * numax) {
        return Err(Error::Structural("leading eigenmeasure has negative mass".into()));
    }
    nu.apply(|x| *x = x.max(0.0));
    nu /= nu.sum();
    h /= nu.dot(&h);
    // the Rayleigh quotient is more accurate than the raw eigenvalue estimate
    let mh = m * &h;
    let lambda = {
        let q = nu.dot(&mh);
        if q > 0.0 { q } else { lambda }
    };
    let right_residual = (&mh - &h * lambda).amax();
    let left = m.tr_mul(&nu);
    let left_residual = (&left - &nu * lambda).iter().map(|x| x.abs()).sum();
    Ok(Eigendata { lambda, h, nu, right_residual, left_residual, method, iterations })
}

fn dense_eigen(m: &DMatrix<f64>) -> Result<(f64, DVector<f64>, DVector<f64>, usize)> {
    let n = m.nrows();
    let evs = m
        .clone()
        .try_schur(f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or_else(|| Error::numerical("Schur iteration did not converge", f64::NAN))?
        .complex_eigenvalues();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| evs[b].norm().total_cmp(&evs[a].norm()));
    let lead = evs[order[0]];
    if lead.re <= 0.0 || lead.im.abs() > 1e-10 * lead.norm() {
        return Err(Error::Structural(format!("leading eigenvalue {lead} is not real positive")));
    }
    let lambda = lead.re;
    if n > 1 {
        let second = evs[order[1]].norm();
        if lambda - second < GAP_THRESHOLD * lambda {
            return Err(Error::Structural(format!(
                "spectral gap {:e} below threshold (non-primitive or near-degenerate)",
                (lambda - second) / lambda
            )));
        }
    }
    let shifted = m - DMatrix::identity(n, n) * lambda;
    let h = null_vector(shifted.clone());
    let nu = null_vector(shifted.transpose());
    Ok((lambda, h, nu, 0))
}

/// Right singular vector of the smallest singular value.
fn null_vector(a: DMatrix<f64>) -> DVector<f64> {
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let imin = svd.singular_values.imin();
    v_t.row(imin).transpose()
}

fn power_eigen(m: &DMatrix<f64>) -> Result<(f64, DVector<f64>, DVector<f64>, usize)> {
    let (lambda, h, it_r) = power_side(|v| m * v, m.nrows())?;
    let (_, nu, it_l) = power_side(|v| m.tr_mul(v), m.nrows())?;
    Ok((lambda, h, nu, it_r.max(it_l)))
}

fn power_side(
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    n: usize,
) -> Result<(f64, DVector<f64>, usize)> {
    let mut v = DVector::from_element(n, 1.0 / n as f64);
    let mut residual = f64::INFINITY;
    for it in 1..=POWER_MAX_ITER {
        let w = apply(&v);
        let lambda = w.sum() / v.sum();
        if !(lambda > 0.0) {
            return Err(Error::Structural("transfer matrix annihilates positive vectors".into()));
        }
        residual = (&w - &v * lambda).amax() / (v.amax() * lambda);
        if residual <= POWER_TOL {
            return Ok((lambda, v, it));
        }
        v = &w / w.amax();
    }
    Err(Error::numerical("power iteration did not converge", residual))
}

/// Eigendata and equilibrium measure of a shift-space potential.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GibbsData {
    space: ShiftSpace,
    pub lambda: f64,
    /// Eigenfunction `h_A`, scaled so that `int h dnu = 1`.
    pub h: CylinderFunction,
    /// Eigenmeasure `nu_A` on depth-`k` cylinders.
    pub nu: Vec<f64>,
    /// Equilibrium measure `mu_A = h_A nu_A` on depth-`k` cylinders.
    pub mu: Vec<f64>,
    /// The normalized representative `Pi(A)` of the potential's class.
    pub normalized: CylinderFunction,
    pub right_residual: f64,
    pub left_residual: f64,
    pub method: EigenMethod,
}

impl GibbsData {
    pub fn of(a: &CylinderFunction) -> Result<Self> {
        Self::with_method(a, EigenMethod::Auto)
    }

    pub fn with_method(a: &CylinderFunction, method: EigenMethod) -> Result<Self> {
        let matrix = TransferMatrix::of(a);
        let eig = leading_eigen_with(&matrix, method)?;
        Self::from_eigendata(a, &matrix, eig)
    }

    fn from_eigendata(a: &CylinderFunction, matrix: &TransferMatrix, eig: Eigendata) -> Result<Self> {
        let space = a.space();
        let k = space.depth();
        // M h / lambda depends on the first k-1 symbols exactly (identical rows)
        let h_vec = matrix.apply(&eig.h) / eig.lambda;
        let h = CylinderFunction::from_vec_unchecked(space, h_vec.as_slice().to_vec());
        let log_lambda = eig.lambda.ln();
        let normalized = if k == 1 {
            a.add_constant(-log_lambda)
        } else {
            let log_h = h.restrict_depth(k - 1)?.ln().map_err(|e| {
                Error::numerical(format!("eigenfunction not positive: {e}"), eig.right_residual)
            })?;
            let coboundary = log_h.try_sub(&log_h.shift_compose())?;
            a.try_add(&coboundary)?.add_constant(-log_lambda)
        };
        let nu = eig.nu.as_slice().to_vec();
        let mut mu: Vec<f64> = h.coeffs().iter().zip(&nu).map(|(h, n)| h * n).collect();
        let total: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|m| *m /= total);
        Ok(GibbsData {
            space,
            lambda: eig.lambda,
            h,
            nu,
            mu,
            normalized,
            right_residual: eig.right_residual,
            left_residual: eig.left_residual,
            method: eig.method,
        })
    }

    pub fn space(&self) -> ShiftSpace {
        self.space
    }

    pub fn pressure(&self) -> f64 {
        self.lambda.ln()
    }

    /// Equilibrium weights of all depth-`depth` cylinders: marginals for
    /// shallower depths, the stationary Markov extension for deeper ones.
    pub fn weights(&self, depth: usize) -> Result<Vec<f64>> {
        self.weights_capped(depth, DEFAULT_DEPTH_CAP)
    }

    pub fn weights_capped(&self, depth: usize, cap: usize) -> Result<Vec<f64>> {
        let d = self.space.d();
        let k = self.space.depth();
        if depth == 0 {
            return Err(Error::usage("depth must be at least 1"));
        }
        let n = checked_dim(d, depth, cap)?;
        if depth <= k {
            let mut out = vec![0.0; n];
            for (i, m) in self.mu.iter().enumerate() {
                out[i % n] += m;
            }
            return Ok(out);
        }
        let trans: Vec<f64> = self.normalized.coeffs().iter().map(|x| x.exp()).collect();
        let nk = trans.len();
        let mut cur = self.mu.clone();
        while cur.len() < n {
            let next_len = cur.len() * d;
            cur = (0..next_len).map(|x| trans[x % nk] * cur[x / d]).collect();
        }
        Ok(cur)
    }

    /// `int f dmu_A`, exact for cylinder functions.
    pub fn integrate(&self, f: &CylinderFunction) -> Result<f64> {
        if f.d() != self.space.d() {
            return Err(Error::usage("alphabet mismatch"));
        }
        let w = self.weights(f.depth())?;
        Ok(f.coeffs().iter().zip(&w).map(|(x, m)| x * m).sum())
    }

    /// `int f dnu_A` for `f` of depth at most `k`.
    pub fn integrate_nu(&self, f: &CylinderFunction) -> Result<f64> {
        let f = f.embed(self.space.depth())?;
        Ok(f.coeffs().iter().zip(&self.nu).map(|(x, m)| x * m).sum())
    }
}

/// Largest marginal mismatches of the equilibrium weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureDefects {
    /// Dropping the last symbol of depth-`m` weights against depth `m - 1`.
    pub consistency: f64,
    /// Dropping the first symbol, i.e. `mu(T^{-1} C) - mu(C)`.
    pub shift_invariance: f64,
}

impl GibbsData {
    /// Marginal defects over depths `2..=k+1`.
    pub fn structure_defects(&self) -> Result<StructureDefects> {
        let d = self.space.d();
        let mut out = StructureDefects { consistency: 0.0, shift_invariance: 0.0 };
        for m in 2..=self.space.depth() + 1 {
            let fine = self.weights(m)?;
            let coarse = self.weights(m - 1)?;
            let n = coarse.len();
            let mut drop_last = vec![0.0; n];
            let mut drop_first = vec![0.0; n];
            for (i, w) in fine.iter().enumerate() {
                drop_last[i % n] += w;
                drop_first[i / d] += w;
            }
            let gap = |v: &[f64]| v.iter().zip(&coarse).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            out.consistency = out.consistency.max(gap(&drop_last));
            out.shift_invariance = out.shift_invariance.max(gap(&drop_first));
        }
        Ok(out)
    }

    /// `P(A) - (h(m) + int A dm)` for a stationary Markov measure `m` given by
    /// its depth-`k` weights; nonnegative, zero at `mu_A`.
    pub fn variational_gap(&self, a: &CylinderFunction, weights: &[f64]) -> Result<f64> {
        let a = a.embed(self.space.depth())?;
        let energy: f64 = a.coeffs().iter().zip(weights).map(|(x, m)| x * m).sum();
        Ok(self.pressure() - markov_entropy(self.space, weights)? - energy)
    }
}

pub fn build_matrix(a: &CylinderFunction) -> TransferMatrix {
    TransferMatrix::of(a)
}

pub fn pressure(a: &CylinderFunction) -> Result<f64> {
    Ok(GibbsData::of(a)?.pressure())
}

/// The normalization map `Pi(B) = B + log h_B - log h_B o T - log lambda_B`.
pub fn normalize(b: &CylinderFunction) -> Result<CylinderFunction> {
    Ok(GibbsData::of(b)?.normalized)
}

pub fn integrate(f: &CylinderFunction, mu: &GibbsData) -> Result<f64> {
    mu.integrate(f)
}

/// Solver for `(I - L_A) g = r` on zero-mean functions at a normalized `A`.
///
/// Works on depth `max(k-1, 1)`, where `L_A` acts with the single eigenvalue
/// 1 on the unit circle; deflating it by `1 mu^T` leaves an invertible system.
#[derive(Clone, Debug)]
pub struct Resolvent {
    depth: usize,
    d: usize,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    weights: Vec<f64>,
}

impl Resolvent {
    pub fn new(normalized: &CylinderFunction, gibbs: &GibbsData) -> Result<Self> {
        let depth = normalized.depth().saturating_sub(1).max(1);
        let reduced = TransferMatrix::build(normalized, depth)?;
        let weights = gibbs.weights(depth)?;
        let n = reduced.dim();
        let mut sys = DMatrix::identity(n, n) - reduced.entries();
        for i in 0..n {
            for j in 0..n {
                sys[(i, j)] += weights[j];
            }
        }
        Ok(Resolvent { depth, d: normalized.d(), lu: sys.lu(), weights })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Solution with `int g dmu = int r dmu`; for zero-mean `r` this is the
    /// zero-mean solution of `(I - L) g = r`. `r` must have depth at most `max(k-1, 1)`.
    pub fn solve(&self, r: &CylinderFunction) -> Result<CylinderFunction> {
        if r.d() != self.d || r.depth() > self.depth {
            return Err(Error::usage(format!(
                "resolvent acts on depth {} functions, got depth {}",
                self.depth,
                r.depth()
            )));
        }
        let r = r.embed(self.depth)?;
        let rhs = DVector::from_column_slice(r.coeffs());
        let g = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Structural("resolvent system is singular".into()))?;
        Ok(CylinderFunction::from_vec_unchecked(r.space(), g.as_slice().to_vec()))
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Finite-difference estimates at two step sizes against a formula value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub eps: [f64; 2],
    pub finite_difference: [f64; 2],
    pub formula: f64,
    pub gaps: [f64; 2],
    /// `gaps[0] / gaps[1]`; close to 4 under second-order convergence.
    pub ratio: f64,
}

impl DerivativeCheck {
    pub(crate) fn new(eps: f64, fd: [f64; 2], formula: f64) -> Self {
        let gaps = [(fd[0] - formula).abs(), (fd[1] - formula).abs()];
        DerivativeCheck { eps: [eps, eps / 2.0], finite_difference: fd, formula, gaps, ratio: gaps[0] / gaps[1] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PressureDerivativeReport {
    /// `d/dt log lambda(A + t psi)` against `int psi dmu_A`.
    pub first: DerivativeCheck,
    /// `d^2/dt^2 log lambda(A + t psi)` against `int psi^2 dmu_A`.
    pub second: DerivativeCheck,
    /// Exact second derivative, the asymptotic variance of `psi`.
    pub asymptotic_variance: f64,
}

/// Central finite differences of the pressure along `psi` at a normalized `A`.
pub fn pressure_derivative_check(
    a: &CylinderFunction,
    psi: &CylinderFunction,
    eps: f64,
) -> Result<PressureDerivativeReport> {
    if !(eps > 0.0 && eps < 0.1) {
        return Err(Error::usage(format!("eps = {eps} outside (0, 0.1)")));
    }
    let gibbs = GibbsData::of(a)?;
    if TransferMatrix::of(a).normalization_defect() > 1e-10 {
        return Err(Error::usage("pressure_derivative_check needs a normalized potential"));
    }
    let p0 = gibbs.pressure();
    let p = |t: f64| -> Result<f64> { pressure(&a.axpy(t, psi)?) };
    let mut first = [0.0; 2];
    let mut second = [0.0; 2];
    for (i, e) in [eps, eps / 2.0].into_iter().enumerate() {
        let (plus, minus) = (p(e)?, p(-e)?);
        first[i] = (plus - minus) / (2.0 * e);
        second[i] = (plus - 2.0 * p0 + minus) / (e * e);
    }
    let mean = gibbs.integrate(psi)?;
    let square = gibbs.integrate(&psi.try_mul(psi)?)?;
    Ok(PressureDerivativeReport {
        first: DerivativeCheck::new(eps, first, mean),
        second: DerivativeCheck::new(eps, second, square),
        asymptotic_variance: asymptotic_variance_general(a, &gibbs, psi)?,
    })
}

/// `sigma^2(psi) = int psi0^2 + 2 sum_{j>=1} int psi0 (psi0 o T^j)`, with
/// `psi0 = psi - int psi`; the second derivative of the pressure along `psi`.
pub fn asymptotic_variance_general(
    a: &CylinderFunction,
    gibbs: &GibbsData,
    psi: &CylinderFunction,
) -> Result<f64> {
    let psi0 = psi.add_constant(-gibbs.integrate(psi)?);
    let var0 = gibbs.integrate(&psi0.try_mul(&psi0)?)?;
    Ok(var0 + 2.0 * correlation_sum(a, gibbs, &psi0, &psi0)?)
}

/// `sum_{n>=1} int x L^n(phi - int phi) dmu = sum_{n>=1} int (x o T^n) phi0 dmu`
/// at a normalized `a`, summed through the resolvent.
pub fn correlation_sum(
    a: &CylinderFunction,
    gibbs: &GibbsData,
    x: &CylinderFunction,
    phi: &CylinderFunction,
) -> Result<f64> {
    let phi0 = phi.add_constant(-gibbs.integrate(phi)?);
    let resolvent = Resolvent::new(a, gibbs)?;
    // L drops one symbol per step until the resolvent depth is reached
    let mut depth = phi0.depth().max(a.depth());
    let mut term = TransferMatrix::build(a, depth)?.apply_fn(&phi0)?;
    let mut acc = 0.0;
    while depth > resolvent.depth() {
        acc += gibbs.integrate(&term.try_mul(x)?)?;
        depth -= 1;
        term = TransferMatrix::build(a, depth)?.apply_fn(&term.restrict_depth(depth)?)?;
    }
    Ok(acc + gibbs.integrate(&resolvent.solve(&term)?.try_mul(x)?)?)
}

/// Entropy of the stationary `(k-1)`-step Markov measure with the given
/// depth-`k` cylinder weights: `-sum_x m[x] log P(x_{k-1} | x_0..x_{k-2})`.
pub fn markov_entropy(space: ShiftSpace, weights: &[f64]) -> Result<f64> {
    if weights.len() != space.dim() {
        return Err(Error::usage("weight vector does not match the space"));
    }
    let k = space.depth();
    let np = space.d().pow(k as u32 - 1);
    let mut prefix = vec![0.0; np];
    for (i, m) in weights.iter().enumerate() {
        prefix[i % np] += m;
    }
    Ok(-weights
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(i, &m)| m * (m / prefix[i % np]).ln())
        .sum::<f64>())
}

/// A random fully supported stationary `(k-1)`-step Markov measure on
/// depth-`k` cylinders.
pub fn random_markov_measure<R: Rng>(rng: &mut R, space: ShiftSpace) -> Vec<f64> {
    let d = space.d();
    let k = space.depth();
    let np = d.pow(k as u32 - 1);
    // cond[w + np * a] = P(next = a | w)
    let mut cond: Vec<f64> = (0..space.dim()).map(|_| rng.random_range(0.05..1.0)).collect();
    for w in 0..np {
        let s: f64 = (0..d).map(|a| cond[w + np * a]).sum();
        (0..d).for_each(|a| cond[w + np * a] /= s);
    }
    // stationary law on states w of length k-1: w -> (w_1.., a)
    let mut pi = vec![1.0 / np as f64; np];
    for _ in 0..10_000 {
        let mut next = vec![0.0; np];
        for w in 0..np {
            for a in 0..d {
                let x = w + np * a;
                next[x / d] += pi[w] * cond[x];
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    (0..space.dim()).map(|x| pi[x % np] * cond[x]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(d: usize, k: usize) -> ShiftSpace {
        ShiftSpace::new(d, k).unwrap()
    }

    fn bernoulli(p: f64) -> CylinderFunction {
        CylinderFunction::new(space(2, 1), vec![p.ln(), (1.0 - p).ln()]).unwrap()
    }

    #[test]
    fn constant_potentials() {
        let a = CylinderFunction::constant(space(3, 2), -(3f64.ln()));
        let m = TransferMatrix::of(&a);
        assert!(m.normalization_defect() < 1e-15);

        let zero = CylinderFunction::zeros(space(2, 1));
        let ones = DVector::from_element(2, 1.0);
        assert_eq!(TransferMatrix::of(&zero).apply(&ones), DVector::from_element(2, 2.0));

        let g = GibbsData::of(&zero).unwrap();
        assert!((g.lambda - 2.0).abs() < 1e-14);
        assert!(g.h.coeffs().iter().all(|h| (h - 1.0).abs() < 1e-14));
        for (nu, mu) in g.nu.iter().zip(&g.mu) {
            assert!((nu - 0.5).abs() < 1e-14 && (mu - 0.5).abs() < 1e-14);
        }
        assert!((pressure(&CylinderFunction::constant(space(2, 2), 0.7)).unwrap() - (0.7 + 2f64.ln())).abs() < 1e-13);
    }

    #[test]
    fn bernoulli_quarter() {
        let g = GibbsData::of(&bernoulli(0.25)).unwrap();
        assert!((g.lambda - 1.0).abs() < 1e-14);
        assert!((g.mu[0] - 0.25).abs() < 1e-14);
        assert!((g.mu[1] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn normalize_constant_and_fixed_point() {
        let b = CylinderFunction::constant(space(2, 2), 1.3);
        let p = normalize(&b).unwrap();
        assert!(p.coeffs().iter().all(|c| (c + 2f64.ln()).abs() < 1e-12));

        let a = normalize(&CylinderFunction::new(space(2, 2), vec![0.1, -0.4, 0.3, 0.2]).unwrap()).unwrap();
        let again = normalize(&a).unwrap();
        assert!(again.sup_distance(&a).unwrap() < 1e-12);
    }

    #[test]
    fn structural_error_for_degenerate_gap() {
        // two disjoint invariant blocks: leading eigenvalue is double
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let tm = TransferMatrix::from_parts(Domain::Shift { d: 2, k: 1 }, m);
        assert!(matches!(leading_eigen_with(&tm, EigenMethod::Dense), Err(Error::Structural(_))));
    }

    #[test]
    fn power_iteration_reports_nonconvergence() {
        // a rotation has no dominant eigenvalue; the power method must give up
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let tm = TransferMatrix::from_parts(Domain::Shift { d: 2, k: 1 }, m);
        match leading_eigen_with(&tm, EigenMethod::Power) {
            // the uniform start vector happens to be the Perron vector here
            Ok(e) => assert!((e.lambda - 1.0).abs() < 1e-14),
            Err(e) => assert!(matches!(e, Error::Numerical { .. })),
        }
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        let tm = TransferMatrix::from_parts(Domain::Shift { d: 2, k: 1 }, m);
        assert!(matches!(leading_eigen_with(&tm, EigenMethod::Power), Err(Error::Numerical { .. })));
    }

    #[test]
    fn markov_entropy_of_uniform() {
        let s = space(2, 3);
        let w = vec![1.0 / 8.0; 8];
        assert!((markov_entropy(s, &w).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn resolvent_inverts_on_zero_mean() {
        let a = normalize(&CylinderFunction::new(space(2, 3), vec![0.1, -0.4, 0.3, 0.2, 0.0, 0.5, -0.2, 0.05]).unwrap()).unwrap();
        let g = GibbsData::of(&a).unwrap();
        let res = Resolvent::new(&a, &g).unwrap();
        let r = CylinderFunction::new(space(2, 2), vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        let r = r.add_constant(-g.integrate(&r).unwrap());
        let sol = res.solve(&r).unwrap();
        let l = TransferMatrix::build(&a, 2).unwrap().apply_fn(&sol).unwrap();
        let back = sol.try_sub(&l).unwrap();
        assert!(back.sup_distance(&r).unwrap() < 1e-13);
        assert!(g.integrate(&sol).unwrap().abs() < 1e-14);
    }
}
