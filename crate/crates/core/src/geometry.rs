//! Tangent spaces of the manifold of normalized potentials: the kernel of
//! the transfer operator, the `L^2(mu)` inner product, the derivative of the
//! normalization map and orthonormal kernel bases.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::function_space::{CylinderFunction, ShiftSpace};
use crate::transfer::{correlation_sum, normalize, DerivativeCheck, GibbsData, Resolvent, TransferMatrix};

/// Weights below this make the `L^2(mu)` form numerically degenerate.
pub const MIN_WEIGHT: f64 = 1e-14;
pub const NORMALIZED_TOL: f64 = 1e-10;
pub const KERNEL_TOL: f64 = 1e-10;
pub const MEAN_TOL: f64 = 1e-12;
/// Gram-Schmidt drops candidates whose remainder is shorter than this.
pub const RANK_TOL: f64 = 1e-10;

/// A normalized potential with its equilibrium state and resolvent.
#[derive(Clone, Debug)]
pub struct BasePoint {
    potential: CylinderFunction,
    gibbs: GibbsData,
    resolvent: Resolvent,
}

impl BasePoint {
    pub fn new(a: CylinderFunction) -> Result<Self> {
        let defect = TransferMatrix::of(&a).normalization_defect();
        if defect > NORMALIZED_TOL {
            return Err(Error::usage(format!("potential is not normalized (|L1 - 1| = {defect:e})")));
        }
        let gibbs = GibbsData::of(&a)?;
        let resolvent = Resolvent::new(&a, &gibbs)?;
        Ok(BasePoint { potential: a, gibbs, resolvent })
    }

    /// Base point at `Pi(b)`.
    pub fn normalized_from(b: &CylinderFunction) -> Result<Self> {
        Self::new(normalize(b)?)
    }

    /// Base point at `Pi(b)` from a single eigensolve of `b`, skipping the
    /// normalization check.
    pub fn project(b: &CylinderFunction) -> Result<Self> {
        let gibbs = GibbsData::of(b)?;
        let potential = gibbs.normalized.clone();
        let resolvent = Resolvent::new(&potential, &gibbs)?;
        Ok(BasePoint { potential, gibbs, resolvent })
    }

    pub fn potential(&self) -> &CylinderFunction {
        &self.potential
    }

    pub fn gibbs(&self) -> &GibbsData {
        &self.gibbs
    }

    pub fn space(&self) -> ShiftSpace {
        self.potential.space()
    }

    pub fn integrate(&self, f: &CylinderFunction) -> Result<f64> {
        self.gibbs.integrate(f)
    }

    /// `L_A f` for `f` of any depth; the result has depth `max(depth f, k)`.
    pub fn transfer(&self, f: &CylinderFunction) -> Result<CylinderFunction> {
        let depth = f.depth().max(self.potential.depth());
        TransferMatrix::build(&self.potential, depth)?.apply_fn(f)
    }

    /// SHA-256 of the coefficient bytes, tagged with `d` and `k`.
    pub fn fingerprint(&self) -> String {
        potential_hash(&self.potential)
    }

    /// Derivative of the normalization map at this point:
    /// `D Pi(psi) = psi + g - g o T - int psi dmu` with `(I - L) g = L psi - int psi dmu`.
    pub fn dpi(&self, psi: &CylinderFunction) -> Result<CylinderFunction> {
        let mean = self.integrate(psi)?;
        let lpsi = self.transfer(psi)?;
        let depth = self.resolvent.depth();
        let rhs = if lpsi.depth() > depth {
            // L psi has already lost its last symbol when psi is not deeper than the base
            lower(&lpsi, depth)?
        } else {
            lpsi
        };
        let g = self.resolvent.solve(&rhs.add_constant(-mean))?;
        let coboundary = g.try_sub(&g.shift_compose())?;
        let out = psi.try_add(&coboundary)?.add_constant(-mean);
        let depth = psi.depth().max(self.potential.depth());
        if out.depth() > depth {
            return lower(&out, depth);
        }
        Ok(out)
    }
}

/// Drops trailing coordinates a function is known not to depend on,
/// peeling off one level of `L` at a time when needed.
fn lower(f: &CylinderFunction, depth: usize) -> Result<CylinderFunction> {
    if f.depends_only_on(depth, 1e-9 * (1.0 + f.sup_norm())) {
        return f.restrict_depth(depth);
    }
    Err(Error::Structural(format!(
        "function of depth {} does not reduce to depth {depth}",
        f.depth()
    )))
}

pub fn potential_hash(a: &CylinderFunction) -> String {
    let mut hasher = Sha256::new();
    hasher.update((a.d() as u64).to_le_bytes());
    hasher.update((a.depth() as u64).to_le_bytes());
    for c in a.coeffs() {
        hasher.update(c.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// An element of the kernel of `L_A` at a normalized base.
#[derive(Clone, Debug)]
pub struct TangentVector {
    base: Arc<BasePoint>,
    value: CylinderFunction,
}

impl TangentVector {
    /// Checks kernel membership and zero mean.
    pub fn new(base: Arc<BasePoint>, value: CylinderFunction) -> Result<Self> {
        let scale = 1.0 + value.sup_norm();
        let residual = base.transfer(&value)?.sup_norm();
        if residual > KERNEL_TOL * scale {
            return Err(Error::usage(format!("not in the kernel of L_A (residual {residual:e})")));
        }
        let mean = base.integrate(&value)?;
        if mean.abs() > MEAN_TOL * scale {
            return Err(Error::usage(format!("tangent vector has nonzero mean {mean:e}")));
        }
        Ok(TangentVector { base, value })
    }

    pub fn base(&self) -> &Arc<BasePoint> {
        &self.base
    }

    pub fn value(&self) -> &CylinderFunction {
        &self.value
    }

    pub fn into_value(self) -> CylinderFunction {
        self.value
    }

    fn same_base(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.base, &other.base) || self.base.potential == other.base.potential
    }

    /// `a X + b Y` at the shared base.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if !self.same_base(other) {
            return Err(Error::usage("tangent vectors live at different base points"));
        }
        let value = self.value.scale(a).axpy(b, &other.value)?;
        Ok(TangentVector { base: self.base.clone(), value })
    }
}

/// `P(V) = V - (L_A V) o T`, the projection onto the kernel of `L_A`.
pub fn tangent_project(v: &CylinderFunction, base: &Arc<BasePoint>) -> Result<TangentVector> {
    let depth = v.depth().max(base.potential.depth());
    let v = v.embed(depth)?;
    let lv = base.transfer(&v)?;
    let value = if depth == 1 {
        // L_A V is a constant
        v.add_constant(-lv.coeffs()[0])
    } else {
        v.try_sub(&lv.restrict_depth(depth - 1)?.shift_compose())?
    };
    Ok(TangentVector { base: base.clone(), value })
}

/// `<X, Y> = int X Y dmu_A`.
pub fn inner(x: &TangentVector, y: &TangentVector) -> Result<f64> {
    if !x.same_base(y) {
        return Err(Error::usage("inner product of tangent vectors at different base points"));
    }
    x.base.integrate(&x.value.try_mul(&y.value)?)
}

/// `(1/n) int (S_n X)^2 dmu_A`, computed exactly on depth `k + n - 1` cylinders.
pub fn asymptotic_variance(x: &TangentVector, n: usize) -> Result<f64> {
    let s = x.value.birkhoff_sum(n)?;
    Ok(x.base.integrate(&s.try_mul(&s)?)? / n as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObservableDerivativeReport {
    /// Finite differences against `int phi X dmu_A`.
    pub check: DerivativeCheck,
    /// The full derivative `int phi X dmu + sum_{n>=1} int X L^n(phi - int phi) dmu`.
    pub linear_response: f64,
}

/// Central differences of `t -> int phi dmu_{A + tX}` against `int phi X dmu_A`.
///
/// The two agree when `L_A phi` is constant (in particular for tangent `phi`);
/// otherwise they differ by the correlation sum carried in `linear_response`.
pub fn observable_derivative_check(
    x: &TangentVector,
    phi: &CylinderFunction,
    eps: f64,
) -> Result<ObservableDerivativeReport> {
    if !(eps > 0.0 && eps < 0.1) {
        return Err(Error::usage(format!("eps = {eps} outside (0, 0.1)")));
    }
    let a = x.base.potential();
    let mean_at = |t: f64| -> Result<f64> { GibbsData::of(&a.axpy(t, &x.value)?)?.integrate(phi) };
    let mut fd = [0.0; 2];
    for (i, e) in [eps, eps / 2.0].into_iter().enumerate() {
        fd[i] = (mean_at(e)? - mean_at(-e)?) / (2.0 * e);
    }
    let formula = x.base.integrate(&phi.try_mul(&x.value)?)?;
    let tail = correlation_sum(a, &x.base.gibbs, &x.value, phi)?;
    Ok(ObservableDerivativeReport { check: DerivativeCheck::new(eps, fd, formula), linear_response: formula + tail })
}

/// Projected cylinder indicators of the given depth, in word order, keeping
/// each one that is independent of its predecessors.
pub fn canonical_kernel_basis(base: &Arc<BasePoint>, depth: usize) -> Result<Vec<TangentVector>> {
    Ok(kernel_candidates(base, depth)?.into_iter().map(|(_, v)| v).collect())
}

fn kernel_candidates(base: &Arc<BasePoint>, depth: usize) -> Result<Vec<(usize, TangentVector)>> {
    check_weights(base, depth)?;
    let space = base.space().with_depth(depth)?;
    let mut kept: Vec<(usize, TangentVector)> = Vec::new();
    let mut ortho: Vec<CylinderFunction> = Vec::new();
    for i in 0..space.dim() {
        let ind = indicator_at(space, i);
        let p = tangent_project(&ind, base)?;
        if let Some(e) = orthonormalize(base, p.value.clone(), &ortho)? {
            ortho.push(e);
            kept.push((i, p));
        }
    }
    Ok(kept)
}

fn indicator_at(space: ShiftSpace, i: usize) -> CylinderFunction {
    let mut coeffs = vec![0.0; space.dim()];
    coeffs[i] = 1.0;
    CylinderFunction::new(space, coeffs).expect("finite coefficients")
}

fn check_weights(base: &BasePoint, depth: usize) -> Result<()> {
    let w = base.gibbs.weights(depth)?;
    if let Some((i, m)) = w.iter().enumerate().find(|(_, &m)| m < MIN_WEIGHT) {
        let label = base.space().with_depth(depth)?.word_label(i);
        return Err(Error::Structural(format!("cylinder [{label}] has equilibrium weight {m:e}")));
    }
    Ok(())
}

/// Two-pass Gram-Schmidt of `v` against orthonormal `basis`; `None` when `v`
/// is dependent.
fn orthonormalize(
    base: &BasePoint,
    mut v: CylinderFunction,
    basis: &[CylinderFunction],
) -> Result<Option<CylinderFunction>> {
    let norm0 = base.integrate(&v.try_mul(&v)?)?.max(0.0).sqrt();
    if norm0 < RANK_TOL {
        return Ok(None);
    }
    for _ in 0..2 {
        for e in basis {
            let c = base.integrate(&v.try_mul(e)?)?;
            v = v.axpy(-c, e)?;
        }
    }
    let norm = base.integrate(&v.try_mul(&v)?)?.max(0.0).sqrt();
    if norm < RANK_TOL {
        return Ok(None);
    }
    Ok(Some(v.scale(1.0 / norm)))
}

/// Orthonormal basis of the kernel of `L_A` on depth-`k` functions.
pub fn orthonormal_tangent_basis(base: &Arc<BasePoint>) -> Result<Vec<TangentVector>> {
    orthonormal_tangent_basis_at(base, base.potential.depth())
}

/// Orthonormal basis of the kernel of `L_A` on depth-`depth` functions,
/// `depth >= k`; its size is `d^depth - d^(depth-1)`.
pub fn orthonormal_tangent_basis_at(base: &Arc<BasePoint>, depth: usize) -> Result<Vec<TangentVector>> {
    if depth < base.potential.depth() {
        return Err(Error::usage("basis depth below the potential depth"));
    }
    check_weights(base, depth)?;
    let space = base.space().with_depth(depth)?;
    let expected = space.dim() - space.dim() / space.d();
    let mut basis: Vec<CylinderFunction> = Vec::with_capacity(expected);
    for i in 0..space.dim() {
        let p = tangent_project(&indicator_at(space, i), base)?;
        if let Some(e) = orthonormalize(base, p.value, &basis)? {
            basis.push(e);
        }
    }
    if basis.len() < expected {
        return Err(Error::Structural(format!(
            "kernel rank {} below the expected {expected}",
            basis.len()
        )));
    }
    Ok(basis.into_iter().map(|value| TangentVector { base: base.clone(), value }).collect())
}

/// `G_ij = <x_i, x_j>`.
pub fn gram_matrix(vectors: &[TangentVector]) -> Result<DMatrix<f64>> {
    let n = vectors.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = inner(&vectors[i], &vectors[j])?;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Dimension of the kernel of a transfer matrix, from its singular values.
pub fn dense_kernel_dim(m: &TransferMatrix) -> usize {
    let sv = m.entries().clone().singular_values();
    let top = sv.max();
    sv.iter().filter(|&&s| s <= 1e-10 * top.max(1.0)).count()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisExport {
    pub base_hash: String,
    pub d: usize,
    pub k: usize,
    pub vectors: Vec<Vec<f64>>,
}

pub fn export_basis(base: &BasePoint, basis: &[TangentVector]) -> BasisExport {
    BasisExport {
        base_hash: base.fingerprint(),
        d: base.space().d(),
        k: basis.first().map_or(base.space().depth(), |v| v.value.depth()),
        vectors: basis.iter().map(|v| v.value.coeffs().to_vec()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bernoulli_half(k: usize) -> Arc<BasePoint> {
        let s = ShiftSpace::new(2, k).unwrap();
        Arc::new(BasePoint::new(CylinderFunction::constant(s, -(2f64.ln()))).unwrap())
    }

    fn random_base(d: usize, k: usize, seed: u64) -> Arc<BasePoint> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = ShiftSpace::new(d, k).unwrap();
        let b = CylinderFunction::from_fn(s, |_| rng.random_range(-0.5..0.5));
        Arc::new(BasePoint::normalized_from(&b).unwrap())
    }

    #[test]
    fn projection_of_indicator_at_fair_coin() {
        let base = bernoulli_half(1);
        let v = CylinderFunction::indicator(2, &[0]).unwrap();
        let p = tangent_project(&v, &base).unwrap();
        assert_eq!(p.value().coeffs(), &[0.5, -0.5]);
    }

    #[test]
    fn projection_fixes_the_kernel() {
        let base = random_base(2, 3, 4);
        let s = base.space();
        let v = CylinderFunction::from_fn(s, |w| (w[0] as f64) - 0.3 * w[2] as f64 + 0.1);
        let p = tangent_project(&v, &base).unwrap();
        assert!(base.transfer(p.value()).unwrap().sup_norm() < 1e-12);
        assert!(base.integrate(p.value()).unwrap().abs() < 1e-12);
        let pp = tangent_project(p.value(), &base).unwrap();
        assert!(pp.value().sup_distance(p.value()).unwrap() < 1e-14);
    }

    #[test]
    fn unit_vector_at_fair_coin() {
        let base = bernoulli_half(1);
        let x = TangentVector::new(base, CylinderFunction::new(ShiftSpace::new(2, 1).unwrap(), vec![1.0, -1.0]).unwrap()).unwrap();
        assert!((inner(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn canonical_gram_at_fair_coin() {
        // word order 00, 10, 01, 11; the projection of [10] is minus that of [00]
        let base = bernoulli_half(2);
        let basis = canonical_kernel_basis(&base, 2).unwrap();
        assert_eq!(basis.len(), 2);
        assert_eq!(basis[0].value().coeffs(), &[0.5, -0.5, 0.0, 0.0]);
        assert_eq!(basis[1].value().coeffs(), &[0.0, 0.0, 0.5, -0.5]);
        let g = gram_matrix(&basis).unwrap();
        // 4-term sums with weight 1/4: 2 * (1/4)(1/4)
        assert!((g - DMatrix::from_row_slice(2, 2, &[0.125, 0.0, 0.0, 0.125])).amax() < 1e-15);
    }

    #[test]
    fn basis_sizes_match_dense_rank() {
        for (d, k) in [(2, 1), (2, 2), (3, 2), (2, 3), (3, 1), (3, 3)] {
            let base = random_base(d, k, 11);
            let basis = orthonormal_tangent_basis(&base).unwrap();
            let dense = dense_kernel_dim(&TransferMatrix::of(base.potential()));
            assert_eq!(basis.len(), dense, "d={d} k={k}");
            assert_eq!(basis.len(), d.pow(k as u32) - d.pow(k as u32 - 1));
            let g = gram_matrix(&basis).unwrap();
            assert!((g - DMatrix::identity(basis.len(), basis.len())).amax() < 1e-10);
        }
    }

    #[test]
    fn degenerate_weights_are_structural() {
        let s = ShiftSpace::new(2, 1).unwrap();
        let a = CylinderFunction::new(s, vec![(1e-16f64).ln(), (1.0 - 1e-16f64).ln()]).unwrap();
        let base = Arc::new(BasePoint::new(a).unwrap());
        assert!(matches!(orthonormal_tangent_basis(&base), Err(Error::Structural(_))));
    }

    #[test]
    fn dpi_is_identity_on_kernel_and_kills_coboundaries() {
        let base = random_base(2, 2, 5);
        for e in orthonormal_tangent_basis(&base).unwrap() {
            let v = base.dpi(e.value()).unwrap();
            assert!(v.sup_distance(e.value()).unwrap() < 1e-12);
        }
        let g = CylinderFunction::new(ShiftSpace::new(2, 1).unwrap(), vec![0.3, -0.7]).unwrap();
        let cob = g.shift_compose().try_sub(&g).unwrap().add_constant(0.2);
        assert!(base.dpi(&cob).unwrap().sup_norm() < 1e-12);
    }

    #[test]
    fn dpi_matches_symmetric_difference() {
        let base = random_base(2, 3, 9);
        let psi = CylinderFunction::from_fn(base.space(), |w| (w[0] + 2 * w[1]) as f64 * 0.3 - w[2] as f64);
        let a = base.potential();
        let eps = 1e-4;
        let plus = normalize(&a.axpy(eps, &psi).unwrap()).unwrap();
        let minus = normalize(&a.axpy(-eps, &psi).unwrap()).unwrap();
        let fd = plus.try_sub(&minus).unwrap().scale(0.5 / eps);
        assert!(base.dpi(&psi).unwrap().sup_distance(&fd).unwrap() < 1e-7);
    }

    #[test]
    fn export_carries_hash() {
        let base = random_base(2, 2, 1);
        let basis = orthonormal_tangent_basis(&base).unwrap();
        let ex = export_basis(&base, &basis);
        assert_eq!(ex.base_hash.len(), 64);
        assert_eq!(ex.vectors.len(), 2);
    }
}
