//! Function spaces the transfer operator acts on.
//!
//! Two backends are provided:
//!
//! * [`CylinderFunction`]: exact locally constant functions on the one-sided
//!   full shift `{0,..,d-1}^N`, depending only on the first `k` coordinates.
//! * [`CircleGridFunction`]: values on the uniform grid `x_j = j/N` of the
//!   circle, extended off-grid by periodic piecewise-linear interpolation.
//!
//! # Word order
//!
//! A word `(x_0, .., x_{k-1})` is stored at index `x_0 + x_1 d + .. + x_{k-1} d^{k-1}`
//! (base-`d` little-endian, `x_0` is the lowest digit). With this order
//! embedding into a deeper space is `index mod d^k`, the shift is `index / d`
//! and prepending a symbol `a` is `a + d * index`.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest alphabet supported.
pub const MAX_ALPHABET: usize = 16;

/// Default bound on `d^depth` for functions produced by deepening operations.
pub const DEFAULT_DEPTH_CAP: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShiftSpace {
    d: usize,
    k: usize,
}

impl ShiftSpace {
    pub fn new(d: usize, k: usize) -> Result<Self> {
        if !(2..=MAX_ALPHABET).contains(&d) {
            return Err(Error::usage(format!("alphabet size {d} outside 2..={MAX_ALPHABET}")));
        }
        if k == 0 {
            return Err(Error::usage("cylinder depth must be at least 1"));
        }
        checked_dim(d, k, usize::MAX)?;
        Ok(ShiftSpace { d, k })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn depth(&self) -> usize {
        self.k
    }

    /// Number of length-`k` words, `d^k`.
    pub fn dim(&self) -> usize {
        self.d.pow(self.k as u32)
    }

    pub fn with_depth(&self, k: usize) -> Result<Self> {
        ShiftSpace::new(self.d, k)
    }

    pub fn word(&self, mut index: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.k);
        for _ in 0..self.k {
            w.push(index % self.d);
            index /= self.d;
        }
        w
    }

    pub fn index(&self, word: &[usize]) -> usize {
        assert!(word.len() >= self.k, "word shorter than cylinder depth");
        word[..self.k].iter().rev().fold(0, |acc, &x| {
            assert!(x < self.d, "symbol {x} outside alphabet");
            acc * self.d + x
        })
    }

    /// Word at `index` written `x_0 x_1 ..`, used in error messages and tables.
    pub fn word_label(&self, index: usize) -> String {
        self.word(index)
            .iter()
            .map(|&x| std::char::from_digit(x as u32, 16).unwrap())
            .collect()
    }
}

pub(crate) fn checked_dim(d: usize, k: usize, cap: usize) -> Result<usize> {
    let dim = (d as u64)
        .checked_pow(k as u32)
        .filter(|&n| n <= cap as u64)
        .ok_or_else(|| Error::Resource(format!("d^k = {d}^{k} exceeds cap {cap}")))?;
    Ok(dim as usize)
}

/// A real function of the first `k` coordinates, stored as one value per cylinder.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CylinderRepr", into = "CylinderRepr")]
pub struct CylinderFunction {
    space: ShiftSpace,
    coeffs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CylinderRepr {
    d: usize,
    k: usize,
    coeffs: Vec<f64>,
}

impl TryFrom<CylinderRepr> for CylinderFunction {
    type Error = Error;

    fn try_from(r: CylinderRepr) -> Result<Self> {
        CylinderFunction::new(ShiftSpace::new(r.d, r.k)?, r.coeffs)
    }
}

impl From<CylinderFunction> for CylinderRepr {
    fn from(f: CylinderFunction) -> Self {
        CylinderRepr { d: f.space.d, k: f.space.k, coeffs: f.coeffs }
    }
}

impl fmt::Debug for CylinderFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CylinderFunction(d={}, k={}, {:?})", self.space.d, self.space.k, self.coeffs)
    }
}

/// Pointwise operations on cylinder functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointwiseOp {
    Add,
    Sub,
    Mul,
    Scale(i64),
    Log,
    Exp,
}

impl CylinderFunction {
    pub fn new(space: ShiftSpace, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space.dim() {
            return Err(Error::usage(format!(
                "expected {} coefficients for d={}, k={}, got {}",
                space.dim(),
                space.d,
                space.k,
                coeffs.len()
            )));
        }
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::Domain {
                cylinder: space.word_label(i),
                message: "non-finite coefficient".into(),
            });
        }
        Ok(CylinderFunction { space, coeffs })
    }

    pub(crate) fn from_vec_unchecked(space: ShiftSpace, coeffs: Vec<f64>) -> Self {
        debug_assert_eq!(coeffs.len(), space.dim());
        CylinderFunction { space, coeffs }
    }

    pub fn constant(space: ShiftSpace, c: f64) -> Self {
        CylinderFunction { space, coeffs: vec![c; space.dim()] }
    }

    pub fn zeros(space: ShiftSpace) -> Self {
        Self::constant(space, 0.0)
    }

    /// Indicator of the cylinder `[word]`; the depth is the word length.
    pub fn indicator(d: usize, word: &[usize]) -> Result<Self> {
        let space = ShiftSpace::new(d, word.len())?;
        let mut f = Self::zeros(space);
        f.coeffs[space.index(word)] = 1.0;
        Ok(f)
    }

    pub fn from_fn(space: ShiftSpace, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let coeffs = (0..space.dim()).map(|i| f(&space.word(i))).collect();
        CylinderFunction { space, coeffs }
    }

    pub fn space(&self) -> ShiftSpace {
        self.space
    }

    pub fn d(&self) -> usize {
        self.space.d
    }

    pub fn depth(&self) -> usize {
        self.space.k
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Value at a point given by (at least) its first `k` coordinates.
    pub fn eval(&self, point: &[usize]) -> f64 {
        self.coeffs[self.space.index(point)]
    }

    /// The same function viewed as a depth-`k` function, `k >= depth`.
    pub fn embed(&self, k: usize) -> Result<Self> {
        if k < self.space.k {
            return Err(Error::usage(format!("cannot embed depth {} into depth {k}", self.space.k)));
        }
        if k == self.space.k {
            return Ok(self.clone());
        }
        let space = ShiftSpace::new(self.space.d, k)?;
        let n = self.coeffs.len();
        let coeffs = (0..space.dim()).map(|i| self.coeffs[i % n]).collect();
        Ok(CylinderFunction { space, coeffs })
    }

    /// Drops the coordinates `x_j, .., x_{k-1}`, reading the values on the
    /// words whose trailing symbols are all zero. Only meaningful when the
    /// function does not depend on those coordinates; see [`Self::depends_only_on`].
    pub fn restrict_depth(&self, j: usize) -> Result<Self> {
        if j == 0 || j > self.space.k {
            return Err(Error::usage(format!("cannot restrict depth {} to {j}", self.space.k)));
        }
        let space = ShiftSpace::new(self.space.d, j)?;
        Ok(CylinderFunction { space, coeffs: self.coeffs[..space.dim()].to_vec() })
    }

    /// Whether the function depends on the first `j` coordinates only, up to `tol`.
    pub fn depends_only_on(&self, j: usize, tol: f64) -> bool {
        let n = self.space.d.pow(j.min(self.space.k) as u32);
        self.coeffs.iter().enumerate().all(|(i, &c)| (c - self.coeffs[i % n]).abs() <= tol)
    }

    fn common_depth(&self, other: &Self) -> Result<(Self, Self)> {
        if self.space.d != other.space.d {
            return Err(Error::usage(format!(
                "alphabet mismatch: {} vs {}",
                self.space.d, other.space.d
            )));
        }
        let k = self.space.k.max(other.space.k);
        Ok((self.embed(k)?, other.embed(k)?))
    }

    fn zip_with(&self, other: &Self, op: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let (a, b) = self.common_depth(other)?;
        let coeffs = a.coeffs.iter().zip(&b.coeffs).map(|(&x, &y)| op(x, y)).collect();
        Ok(CylinderFunction { space: a.space, coeffs })
    }

    pub fn map(&self, op: impl Fn(f64) -> f64) -> Self {
        CylinderFunction { space: self.space, coeffs: self.coeffs.iter().map(|&x| op(x)).collect() }
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |x, y| x + y)
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |x, y| x - y)
    }

    pub fn try_mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |x, y| x * y)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    pub fn add_constant(&self, c: f64) -> Self {
        self.map(|x| x + c)
    }

    /// `self + c * other`, at the common depth.
    pub fn axpy(&self, c: f64, other: &Self) -> Result<Self> {
        self.zip_with(other, |x, y| x + c * y)
    }

    pub fn ln(&self) -> Result<Self> {
        if let Some(i) = self.coeffs.iter().position(|&x| x <= 0.0) {
            return Err(Error::Domain {
                cylinder: self.space.word_label(i),
                message: format!("log of non-positive value {}", self.coeffs[i]),
            });
        }
        Ok(self.map(f64::ln))
    }

    pub fn exp(&self) -> Self {
        self.map(f64::exp)
    }

    /// Generic entry point mirroring the operation table; `g` is required for
    /// the binary operations and ignored otherwise.
    pub fn pointwise(op: PointwiseOp, f: &Self, g: Option<&Self>) -> Result<Self> {
        let rhs = || g.ok_or_else(|| Error::usage(format!("{op:?} needs a second operand")));
        match op {
            PointwiseOp::Add => f.try_add(rhs()?),
            PointwiseOp::Sub => f.try_sub(rhs()?),
            PointwiseOp::Mul => f.try_mul(rhs()?),
            PointwiseOp::Scale(c) => Ok(f.scale(c as f64)),
            PointwiseOp::Log => f.ln(),
            PointwiseOp::Exp => Ok(f.exp()),
        }
    }

    /// `f o T` as a depth-`(k+1)` function: `(f o T)(x) = f(x_1, .., x_k)`.
    pub fn shift_compose(&self) -> Self {
        let space = ShiftSpace { d: self.space.d, k: self.space.k + 1 };
        let d = self.space.d;
        let coeffs = (0..space.dim()).map(|i| self.coeffs[i / d]).collect();
        CylinderFunction { space, coeffs }
    }

    /// Birkhoff sum `S_n f = sum_{j<n} f o T^j`, of depth `k + n - 1`.
    pub fn birkhoff_sum(&self, n: usize) -> Result<Self> {
        self.birkhoff_sum_capped(n, DEFAULT_DEPTH_CAP)
    }

    pub fn birkhoff_sum_capped(&self, n: usize, cap: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::usage("Birkhoff sum needs n >= 1"));
        }
        let d = self.space.d;
        let k = self.space.k + n - 1;
        let dim = checked_dim(d, k, cap)?;
        let space = ShiftSpace { d, k };
        let base = self.coeffs.len();
        let coeffs = (0..dim)
            .map(|i| {
                let mut idx = i;
                let mut s = 0.0;
                for _ in 0..n {
                    s += self.coeffs[idx % base];
                    idx /= d;
                }
                s
            })
            .collect();
        Ok(CylinderFunction { space, coeffs })
    }

    pub fn sup_norm(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Sup-norm distance at the common depth.
    pub fn sup_distance(&self, other: &Self) -> Result<f64> {
        Ok(self.try_sub(other)?.sup_norm())
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|x| x.is_finite())
    }
}

impl Add for &CylinderFunction {
    type Output = CylinderFunction;

    fn add(self, rhs: Self) -> CylinderFunction {
        self.try_add(rhs).expect("alphabet mismatch")
    }
}

impl Sub for &CylinderFunction {
    type Output = CylinderFunction;

    fn sub(self, rhs: Self) -> CylinderFunction {
        self.try_sub(rhs).expect("alphabet mismatch")
    }
}

impl Mul for &CylinderFunction {
    type Output = CylinderFunction;

    fn mul(self, rhs: Self) -> CylinderFunction {
        self.try_mul(rhs).expect("alphabet mismatch")
    }
}

impl Mul<&CylinderFunction> for f64 {
    type Output = CylinderFunction;

    fn mul(self, rhs: &CylinderFunction) -> CylinderFunction {
        rhs.scale(self)
    }
}

impl Neg for &CylinderFunction {
    type Output = CylinderFunction;

    fn neg(self) -> CylinderFunction {
        self.scale(-1.0)
    }
}

/// Grid samples `values[j] = f(j/N)` on the circle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct CircleGridFunction {
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    #[serde(rename = "N")]
    n: usize,
    values: Vec<f64>,
}

impl TryFrom<GridRepr> for CircleGridFunction {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        if r.values.len() != r.n {
            return Err(Error::usage(format!("N = {} but {} values", r.n, r.values.len())));
        }
        CircleGridFunction::new(r.values)
    }
}

impl From<CircleGridFunction> for GridRepr {
    fn from(f: CircleGridFunction) -> Self {
        GridRepr { n: f.values.len(), values: f.values }
    }
}

impl CircleGridFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::usage("circle grid needs at least two points"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain { cylinder: "grid".into(), message: "non-finite value".into() });
        }
        Ok(CircleGridFunction { values })
    }

    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new((0..n).map(|j| f(j as f64 / n as f64)).collect())
    }

    pub fn constant(n: usize, c: f64) -> Result<Self> {
        Self::new(vec![c; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Grid cell containing `x` and the linear weight of its right endpoint.
    pub fn locate(n: usize, x: f64) -> (usize, usize, f64) {
        let u = x.rem_euclid(1.0) * n as f64;
        let left = (u.floor() as usize).min(n - 1);
        let w = u - left as f64;
        (left, (left + 1) % n, w)
    }

    /// Periodic piecewise-linear interpolation.
    pub fn eval(&self, x: f64) -> f64 {
        let (l, r, w) = Self::locate(self.values.len(), x);
        // exact for constants
        self.values[l] + w * (self.values[r] - self.values[l])
    }

    pub fn map(&self, op: impl Fn(f64) -> f64) -> Self {
        CircleGridFunction { values: self.values.iter().map(|&v| op(v)).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(d: usize, k: usize) -> ShiftSpace {
        ShiftSpace::new(d, k).unwrap()
    }

    #[test]
    fn word_index_roundtrip() {
        let s = space(3, 4);
        for i in 0..s.dim() {
            assert_eq!(s.index(&s.word(i)), i);
        }
        // x_0 is the lowest digit
        assert_eq!(s.index(&[1, 0, 0, 0]), 1);
        assert_eq!(s.index(&[0, 1, 0, 0]), 3);
    }

    #[test]
    fn rejects_bad_spaces() {
        assert!(ShiftSpace::new(1, 2).is_err());
        assert!(ShiftSpace::new(17, 2).is_err());
        assert!(ShiftSpace::new(2, 0).is_err());
        assert!(CylinderFunction::new(space(2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn shift_compose_of_constant_is_constant() {
        let f = CylinderFunction::constant(space(3, 2), 1.7);
        let g = f.shift_compose();
        assert_eq!(g.depth(), 3);
        assert!(g.coeffs().iter().all(|&c| c == 1.7));
    }

    #[test]
    fn shift_compose_indicator() {
        let f = CylinderFunction::indicator(2, &[0]).unwrap();
        let g = f.shift_compose();
        // f o T is the indicator of {x_1 = 0}
        for x0 in 0..2 {
            for x1 in 0..2 {
                assert_eq!(g.eval(&[x0, x1]), if x1 == 0 { 1.0 } else { 0.0 });
            }
        }
        // little-endian layout: words 00, 10, 01, 11
        assert_eq!(g.coeffs(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pointwise_examples() {
        let s = space(2, 2);
        let f = CylinderFunction::from_fn(s, |w| w[0] as f64 - 0.3 * w[1] as f64);
        let z = &f + &(-&f);
        assert!(z.coeffs().iter().all(|&c| c == 0.0));

        let h = CylinderFunction::from_fn(s, |w| 0.5 + w[0] as f64 + 2.0 * w[1] as f64);
        let back = h.ln().unwrap().exp();
        assert!(back.sup_distance(&h).unwrap() <= 1e-12);

        let a = CylinderFunction::indicator(2, &[0]).unwrap();
        let b = CylinderFunction::indicator(2, &[1]).unwrap();
        assert_eq!((&a * &b).sup_norm(), 0.0);
    }

    #[test]
    fn log_of_nonpositive_names_cylinder() {
        let f = CylinderFunction::new(space(2, 2), vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        match f.ln() {
            Err(Error::Domain { cylinder, .. }) => assert_eq!(cylinder, "01"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pointwise_table_dispatch() {
        let f = CylinderFunction::constant(space(2, 1), 2.0);
        let g = CylinderFunction::constant(space(2, 2), 3.0);
        let s = CylinderFunction::pointwise(PointwiseOp::Mul, &f, Some(&g)).unwrap();
        assert_eq!(s.depth(), 2);
        assert!(s.coeffs().iter().all(|&c| c == 6.0));
        assert!(CylinderFunction::pointwise(PointwiseOp::Add, &f, None).is_err());
        let e = CylinderFunction::pointwise(PointwiseOp::Exp, &f, None).unwrap();
        assert!((e.coeffs()[0] - 2f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn birkhoff_examples() {
        let f = CylinderFunction::indicator(2, &[0]).unwrap();
        assert_eq!(f.birkhoff_sum(1).unwrap(), f);
        let s2 = f.birkhoff_sum(2).unwrap();
        for (w, expected) in [([0, 0], 2.0), ([0, 1], 1.0), ([1, 0], 1.0), ([1, 1], 0.0)] {
            assert_eq!(s2.eval(&w), expected);
        }
        let c = CylinderFunction::constant(space(3, 2), 0.25);
        let s = c.birkhoff_sum(4).unwrap();
        assert!(s.coeffs().iter().all(|&x| (x - 1.0).abs() < 1e-15));
        assert!(matches!(c.birkhoff_sum(30), Err(Error::Resource(_))));
        assert!(c.birkhoff_sum(0).is_err());
    }

    #[test]
    fn restrict_depth_inverts_embed() {
        let f = CylinderFunction::from_fn(space(3, 2), |w| (w[0] * 3 + w[1]) as f64);
        let g = f.embed(4).unwrap();
        assert!(g.depends_only_on(2, 0.0));
        assert!(!g.depends_only_on(1, 0.0));
        assert_eq!(g.restrict_depth(2).unwrap(), f);
    }

    #[test]
    fn json_shape() {
        let f = CylinderFunction::new(space(2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, r#"{"d":2,"k":2,"coeffs":[0.0,1.0,2.0,3.0]}"#);
        let back: CylinderFunction = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
        assert!(serde_json::from_str::<CylinderFunction>(r#"{"d":2,"k":2,"coeffs":[1.0]}"#).is_err());

        let c = CircleGridFunction::constant(4, 1.0).unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), r#"{"N":4,"values":[1.0,1.0,1.0,1.0]}"#);
    }

    #[test]
    fn circle_interpolation() {
        let f = CircleGridFunction::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(f.eval(0.125), 0.5);
        // wraps between the last grid point and the first
        assert_eq!(f.eval(0.875), 1.5);
        assert_eq!(f.eval(1.25), 1.0);
        let c = CircleGridFunction::constant(8, -0.7).unwrap();
        assert_eq!(c.eval(0.3141), -0.7);
    }
}
