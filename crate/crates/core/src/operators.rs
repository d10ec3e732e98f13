//! Monotone Lipschitz operators, their resolvents and Yosida approximations.
//!
//! The built-in instances are affine, `M(x) = Jx + c (+ κx)`, which covers the
//! plane rotation, bilinear-quadratic saddle problems and strongly monotone
//! shifts. Non-affine operators can implement [`Operator`] directly; they get
//! the fixed-point resolvent for free.

use nalgebra::linalg::LU;
use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Below this step the resolvent is the identity.
const DEGENERATE_MU: f64 = 1e-300;
const FIXED_POINT_TOL: f64 = 1e-13;
const FIXED_POINT_MAX_ITER: usize = 10_000;
const MONOTONE_TOL: f64 = 1e-10;

/// A single-valued monotone, Lipschitz continuous map on `R^n`.
pub trait Operator: Sync {
    fn dim(&self) -> usize;

    /// `M(x)` without a dimension check.
    fn apply(&self, x: &Vector) -> Vector;

    /// Lipschitz constant `L`.
    fn lipschitz(&self) -> f64;

    fn eval(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        Ok(self.apply(x))
    }

    /// `(Id + μM)^{-1}(z)`.
    fn resolvent(&self, mu: f64, z: &Vector) -> Result<Vector> {
        resolvent_fixed_point(self, mu, z)
    }

    /// `(z - J_{μM}(z)) / μ`, which equals `M(J_{μM}(z))`.
    fn yosida(&self, mu: f64, z: &Vector) -> Result<Vector> {
        let x = self.resolvent(mu, z)?;
        if mu < DEGENERATE_MU {
            return Ok(self.apply(&x));
        }
        Ok((z - x) / mu)
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if mu.is_finite() && mu > 0.0 {
        Ok(())
    } else {
        Err(Error::param(
            "mu",
            format!("must be positive and finite, got {mu}"),
        ))
    }
}

/// Resolvent by Banach iteration `x <- z - μM(x)`, a `μL`-contraction.
pub fn resolvent_fixed_point<O: Operator + ?Sized>(op: &O, mu: f64, z: &Vector) -> Result<Vector> {
    check_mu(mu)?;
    check_dim(op.dim(), z.len())?;
    if mu < DEGENERATE_MU {
        return Ok(z.clone());
    }
    let contraction = mu * op.lipschitz();
    if contraction >= 1.0 {
        return Err(Error::Hypothesis(format!(
            "fixed-point resolvent needs mu*L < 1, got mu*L = {contraction}"
        )));
    }
    let z_norm = z.norm();
    let mut x = z.clone();
    for _ in 0..FIXED_POINT_MAX_ITER {
        let next = z - op.apply(&x) * mu;
        let change = (&next - &x).norm();
        x = next;
        // Scaled by the iterate as well: when ‖x*‖ >> ‖z‖ rounding alone
        // exceeds a z-relative tolerance.
        if change <= FIXED_POINT_TOL * (1.0 + z_norm + x.norm()) {
            return Ok(x);
        }
    }
    Err(Error::NoConvergence {
        iterations: FIXED_POINT_MAX_ITER,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    Affine,
    StronglyMonotoneShift,
}

/// `M(x) = Jx + c`, or `Jx + c + κx` for the shifted kind.
#[derive(Debug, Clone)]
pub struct OperatorSpec {
    kind: OperatorKind,
    linear: Matrix,
    offset: Vector,
    shift: f64,
    total: Matrix,
    lipschitz: f64,
    strong_modulus: f64,
}

impl OperatorSpec {
    pub fn affine(linear: Matrix, offset: Vector) -> Result<Self> {
        Self::build(OperatorKind::Affine, linear, offset, 0.0)
    }

    pub fn shifted(linear: Matrix, offset: Vector, shift: f64) -> Result<Self> {
        if !(shift.is_finite() && shift >= 0.0) {
            return Err(Error::param("shift", format!("must be >= 0, got {shift}")));
        }
        Self::build(OperatorKind::StronglyMonotoneShift, linear, offset, shift)
    }

    fn build(kind: OperatorKind, linear: Matrix, offset: Vector, shift: f64) -> Result<Self> {
        let n = linear.nrows();
        check_dim(n, linear.ncols())?;
        check_dim(n, offset.len())?;
        if n == 0 {
            return Err(Error::param(
                "linear",
                "operator dimension must be positive",
            ));
        }
        if linear.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(Error::param("linear", "entries must be finite"));
        }
        let total = &linear + Matrix::identity(n, n) * shift;
        let min_eig = min_symmetric_eigenvalue(&total);
        if min_eig < -MONOTONE_TOL {
            return Err(Error::NotMonotone {
                min_eigenvalue: min_eig,
            });
        }
        let lipschitz = spectral_norm(&total);
        Ok(Self {
            kind,
            linear,
            offset,
            shift,
            total,
            lipschitz,
            strong_modulus: min_eig.max(0.0),
        })
    }

    /// Counterclockwise rotation by π/2 in the plane.
    pub fn rotation() -> Self {
        Self::affine(
            Matrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]),
            Vector::zeros(2),
        )
        .expect("rotation is monotone")
    }

    pub fn zero(n: usize) -> Result<Self> {
        Self::affine(Matrix::zeros(n, n), Vector::zeros(n))
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::affine(Matrix::identity(n, n), Vector::zeros(n))
    }

    /// `κI` plus π/2 rotations on consecutive coordinate pairs (`n` even).
    pub fn rotation_shift(n: usize, kappa: f64) -> Result<Self> {
        if n == 0 || !n.is_multiple_of(2) {
            return Err(Error::param(
                "n",
                format!("must be positive and even, got {n}"),
            ));
        }
        let mut linear = Matrix::zeros(n, n);
        for b in (0..n).step_by(2) {
            linear[(b, b + 1)] = -1.0;
            linear[(b + 1, b)] = 1.0;
        }
        Self::shifted(linear, Vector::zeros(n), kappa)
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn linear_part(&self) -> &Matrix {
        &self.linear
    }

    pub fn offset(&self) -> &Vector {
        &self.offset
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// `J + κI`.
    pub fn total_linear(&self) -> &Matrix {
        &self.total
    }

    /// Smallest eigenvalue of the symmetric part, clamped at zero.
    pub fn strong_modulus(&self) -> f64 {
        self.strong_modulus
    }

    /// Power-iteration estimate of the spectral norm of the total linear part.
    pub fn lipschitz_estimate(&self) -> f64 {
        spectral_norm(&self.total)
    }

    /// Direct solve of `(I + μ(J + κI)) x = z - μc`.
    pub fn resolvent_direct(&self, mu: f64, z: &Vector) -> Result<Vector> {
        AffineResolvent::new(self, mu)?.apply(z)
    }

    /// Resolvent via the contraction iteration (requires `μL < 1`).
    pub fn resolvent_iterative(&self, mu: f64, z: &Vector) -> Result<Vector> {
        resolvent_fixed_point(self, mu, z)
    }

    /// Certified zero: minimum-norm solution of `(J + κI)x = -c`.
    pub fn zero_certificate(&self) -> Result<ZeroCertificate> {
        let n = self.dim();
        let svd = self.total.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let eps = 1e-12 * smax.max(1.0);
        let rank = svd.rank(eps);
        let x_star = svd
            .solve(&(-&self.offset), eps)
            .map_err(|_| Error::Singular { rank, dim: n })?;
        let residual = self.apply(&x_star).norm();
        if residual > 1e-10 * (1.0 + x_star.norm()) {
            return Err(Error::Singular { rank, dim: n });
        }
        Ok(ZeroCertificate {
            x_star,
            residual,
            rank,
        })
    }
}

impl Operator for OperatorSpec {
    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn apply(&self, x: &Vector) -> Vector {
        &self.total * x + &self.offset
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn resolvent(&self, mu: f64, z: &Vector) -> Result<Vector> {
        self.resolvent_direct(mu, z)
    }
}

/// Factored resolvent of an affine operator for one fixed `μ`.
#[derive(Debug, Clone)]
pub struct AffineResolvent {
    mu: f64,
    lu: Option<LU<f64, Dyn, Dyn>>,
    shifted_offset: Vector,
}

impl AffineResolvent {
    pub fn new(op: &OperatorSpec, mu: f64) -> Result<Self> {
        check_mu(mu)?;
        let n = op.dim();
        if mu < DEGENERATE_MU {
            return Ok(Self {
                mu,
                lu: None,
                shifted_offset: Vector::zeros(n),
            });
        }
        let system = Matrix::identity(n, n) + op.total_linear() * mu;
        let lu = system.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular { rank: 0, dim: n });
        }
        Ok(Self {
            mu,
            lu: Some(lu),
            shifted_offset: op.offset() * mu,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn apply(&self, z: &Vector) -> Result<Vector> {
        check_dim(self.shifted_offset.len(), z.len())?;
        match &self.lu {
            None => Ok(z.clone()),
            Some(lu) => lu
                .solve(&(z - &self.shifted_offset))
                .ok_or(Error::Singular {
                    rank: 0,
                    dim: z.len(),
                }),
        }
    }
}

/// A point `x*` with `M(x*) ≈ 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroCertificate {
    pub x_star: Vector,
    pub residual: f64,
    /// Numerical rank of the linear part; below `n` means the zero set is an
    /// affine subspace and `x_star` is its minimum-norm element.
    pub rank: usize,
}

/// The convex-concave problem `Φ(x,y) = ½⟨x,Hx⟩ − ⟨x,h⟩ − ⟨y,Ax−b⟩` with
/// `H = 2AᵀA`, together with its saddle operator.
#[derive(Debug, Clone)]
pub struct BilinearProblem {
    pub a: Matrix,
    pub h_mat: Matrix,
    pub h_vec: Vector,
    pub b: Vector,
    pub operator: OperatorSpec,
    pub zero: ZeroCertificate,
}

impl BilinearProblem {
    /// Anti-diagonal band `A` with `1/4` on the anti-diagonal and `-1/4` just
    /// left of it, `b = (1/4,…,1/4)`, `h = (0,…,0,1/4)`.
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::param("n", format!("must be >= 2, got {n}")));
        }
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            a[(i, n - 1 - i)] = 0.25;
            if i + 2 <= n {
                a[(i, n - 2 - i)] = -0.25;
            }
        }
        let b = Vector::from_element(n, 0.25);
        let mut h_vec = Vector::zeros(n);
        h_vec[n - 1] = 0.25;
        Self::from_parts(a, h_vec, b)
    }

    pub fn from_parts(a: Matrix, h_vec: Vector, b: Vector) -> Result<Self> {
        let n = a.nrows();
        check_dim(n, a.ncols())?;
        check_dim(n, h_vec.len())?;
        check_dim(n, b.len())?;
        let h_mat = a.transpose() * &a * 2.0;
        let mut linear = Matrix::zeros(2 * n, 2 * n);
        linear.view_mut((0, 0), (n, n)).copy_from(&h_mat);
        linear.view_mut((0, n), (n, n)).copy_from(&(-a.transpose()));
        linear.view_mut((n, 0), (n, n)).copy_from(&a);
        let mut offset = Vector::zeros(2 * n);
        offset.rows_mut(0, n).copy_from(&(-&h_vec));
        offset.rows_mut(n, n).copy_from(&(-&b));
        let operator = OperatorSpec::affine(linear, offset)?;
        let zero = operator.zero_certificate()?;
        if zero.rank < 2 * n {
            return Err(Error::Singular {
                rank: zero.rank,
                dim: 2 * n,
            });
        }
        Ok(Self {
            a,
            h_mat,
            h_vec,
            b,
            operator,
            zero,
        })
    }

    /// Size of each block (`x` and `y` both live in `R^n`).
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn phi(&self, x: &Vector, y: &Vector) -> Result<f64> {
        check_dim(self.n(), x.len())?;
        check_dim(self.n(), y.len())?;
        let ax_b = &self.a * x - &self.b;
        Ok(0.5 * x.dot(&(&self.h_mat * x)) - x.dot(&self.h_vec) - y.dot(&ax_b))
    }

    pub fn split(&self, z: &Vector) -> (Vector, Vector) {
        let n = self.n();
        (z.rows(0, n).into_owned(), z.rows(n, n).into_owned())
    }
}

/// Spectral norm by power iteration on `AᵀA`.
pub fn spectral_norm(a: &Matrix) -> f64 {
    let n = a.ncols();
    if n == 0 || a.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let gram = a.transpose() * a;
    // Deterministic start with no exact symmetry.
    let mut v = Vector::from_fn(n, |i, _| 1.0 + 0.1 * ((i as f64) * 0.7548776662).sin());
    v.normalize_mut();
    let mut lambda = 0.0_f64;
    for _ in 0..200_000 {
        let w = &gram * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        v = w / norm;
        if (next - lambda).abs() <= 1e-15 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

pub fn min_symmetric_eigenvalue(a: &Matrix) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}
