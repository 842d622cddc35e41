//! Problem containers and assumption validation.
//!
//! [`RawProblem`] is the singular LQ problem as posed: linear dynamics
//! driven by a known exponentially decaying disturbance and a quadratic
//! cost whose control weight `G = diag(g_1..g_q, 0, .., 0)` penalizes only
//! the first `q` of the `r` control coordinates. Because `G` is singular,
//! no classical state-feedback optimum exists — the problem only has an
//! infimum, approached by the minimizing sequences built in
//! [`crate::reduced`].
//!
//! [`Oocp`] is the same problem after the change of state coordinates of
//! [`crate::transform`]: the state splits as `z = (x, y)` with `x` of
//! dimension `n - r + q` and `y` of dimension `r - q`, the state weight
//! becomes block diagonal `diag(D1, D2)` with `D2` positive definite, and
//! the input matrix takes a fixed 0/1 structure in which the unpenalized
//! controls act directly on `y`. All solvers operate on this form; the
//! block accessors on [`Oocp`] are the vocabulary they share.
//!
//! [`validate_raw`] and [`validate_reduced`] check the standing
//! assumptions (A1)–(A7) — full-rank input matrix, semidefinite state
//! weight, positive control weights, decaying disturbance, invertible fast
//! weight block, stabilizable and detectable slow subproblem — and report
//! one numeric witness per assumption instead of a bare boolean.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, RANK_TOL};

/// One decaying term `coef * exp(-rate * t)` of an [`ExpSignal`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpMode {
    /// Decay rate, strictly positive so the mode vanishes at infinity.
    pub rate: f64,
    /// Vector coefficient.
    pub coef: DVector<f64>,
}

/// A vector-valued signal that is a finite sum of decaying exponentials,
/// `f(t) = sum_j coef_j * exp(-rate_j * t)`.
///
/// This is the disturbance class the crate accepts. The class is closed
/// under linear maps, coordinate restriction, differentiation, and products
/// of scalar members, which is what keeps the feedforward vector, the
/// scalar cost correction, and every infinite-horizon integral in closed
/// form — no quadrature error enters the solver layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpSignal {
    dim: usize,
    modes: Vec<ExpMode>,
}

impl ExpSignal {
    /// Validates that every rate is strictly positive and finite and that
    /// every coefficient has length `dim`.
    pub fn new(dim: usize, modes: Vec<ExpMode>) -> Result<Self> {
        for mode in &modes {
            if !mode.rate.is_finite() || mode.rate <= 0.0 {
                return Err(Error::StructureViolation {
                    detail: format!("signal mode rate {} is not strictly positive", mode.rate),
                });
            }
            if mode.coef.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "signal mode coefficient",
                    expected: (dim, 1),
                    got: (mode.coef.len(), 1),
                });
            }
            if !mode.coef.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "signal mode coefficient",
                });
            }
        }
        Ok(Self { dim, modes })
    }

    /// The identically zero signal of the given dimension.
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            modes: Vec::new(),
        }
    }

    /// Scalar signal from `(rate, value)` pairs; terms with identical rates
    /// are merged and the modes are sorted by rate for reproducibility.
    pub fn scalar(terms: Vec<(f64, f64)>) -> Result<Self> {
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (rate, value) in terms {
            match merged.iter_mut().find(|(r, _)| *r == rate) {
                Some((_, v)) => *v += value,
                None => merged.push((rate, value)),
            }
        }
        merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let modes = merged
            .into_iter()
            .filter(|(_, v)| *v != 0.0)
            .map(|(rate, v)| ExpMode {
                rate,
                coef: DVector::from_element(1, v),
            })
            .collect();
        Self::new(1, modes)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> &[ExpMode] {
        &self.modes
    }

    pub fn is_zero(&self) -> bool {
        self.modes.iter().all(|m| m.coef.iter().all(|&x| x == 0.0))
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for mode in &self.modes {
            out.axpy((-mode.rate * t).exp(), &mode.coef, 1.0);
        }
        out
    }

    /// Evaluation of a one-dimensional signal as a scalar.
    pub fn eval_scalar(&self, t: f64) -> f64 {
        assert_eq!(self.dim, 1, "eval_scalar requires a one-dimensional signal");
        self.modes
            .iter()
            .map(|m| m.coef[0] * (-m.rate * t).exp())
            .sum()
    }

    /// Slowest decay rate across modes (`+inf` for the zero signal), so
    /// `||f(t)|| <= amplitude() * exp(-min_rate() * t)` for `t >= 0`.
    pub fn min_rate(&self) -> f64 {
        self.modes
            .iter()
            .map(|m| m.rate)
            .fold(f64::INFINITY, f64::min)
    }

    /// Sum of coefficient norms — the `t = 0` envelope constant.
    pub fn amplitude(&self) -> f64 {
        self.modes.iter().map(|m| m.coef.norm()).sum()
    }

    /// Applies a matrix to every coefficient: `(M f)(t) = M f(t)`.
    pub fn map(&self, m: &DMatrix<f64>) -> Result<ExpSignal> {
        if m.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "signal map",
                expected: (m.nrows(), self.dim),
                got: (m.nrows(), m.ncols()),
            });
        }
        let modes = self
            .modes
            .iter()
            .map(|mo| ExpMode {
                rate: mo.rate,
                coef: m * &mo.coef,
            })
            .collect();
        ExpSignal::new(m.nrows(), modes)
    }

    /// Restriction to `len` coordinates starting at `start`.
    pub fn rows(&self, start: usize, len: usize) -> ExpSignal {
        assert!(start + len <= self.dim, "row range out of bounds");
        let modes = self
            .modes
            .iter()
            .map(|m| ExpMode {
                rate: m.rate,
                coef: m.coef.rows(start, len).into_owned(),
            })
            .collect();
        Self { dim: len, modes }
    }

    /// Time derivative, again an exponential-sum signal.
    pub fn derivative(&self) -> ExpSignal {
        let modes = self
            .modes
            .iter()
            .map(|m| ExpMode {
                rate: m.rate,
                coef: &m.coef * (-m.rate),
            })
            .collect();
        Self {
            dim: self.dim,
            modes,
        }
    }

    /// Pointwise sum of two signals of the same dimension; modes with
    /// exactly equal rates are merged into one term.
    pub fn add(&self, other: &ExpSignal) -> Result<ExpSignal> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                context: "signal sum",
                expected: (self.dim, 1),
                got: (other.dim, 1),
            });
        }
        let mut modes = self.modes.clone();
        for m in &other.modes {
            match modes.iter_mut().find(|x| x.rate == m.rate) {
                Some(x) => x.coef += &m.coef,
                None => modes.push(m.clone()),
            }
        }
        Ok(Self {
            dim: self.dim,
            modes,
        })
    }

    /// Scalar multiple of the signal.
    pub fn scale(&self, factor: f64) -> ExpSignal {
        let modes = self
            .modes
            .iter()
            .map(|m| ExpMode {
                rate: m.rate,
                coef: &m.coef * factor,
            })
            .collect();
        Self {
            dim: self.dim,
            modes,
        }
    }

    /// Stacks two signals with identical mode lists (same rates in the same
    /// order) into one of dimension `top.dim + bottom.dim`. Used to rebuild
    /// full-state signals from per-block pieces that were derived mode by
    /// mode from the same disturbance.
    pub(crate) fn vstack(top: &ExpSignal, bottom: &ExpSignal) -> ExpSignal {
        assert_eq!(
            top.modes.len(),
            bottom.modes.len(),
            "vstack needs matching mode lists"
        );
        let modes = top
            .modes
            .iter()
            .zip(&bottom.modes)
            .map(|(a, b)| {
                assert_eq!(a.rate, b.rate, "vstack needs matching rates");
                let mut coef = DVector::zeros(top.dim + bottom.dim);
                coef.rows_mut(0, top.dim).copy_from(&a.coef);
                coef.rows_mut(top.dim, bottom.dim).copy_from(&b.coef);
                ExpMode { rate: a.rate, coef }
            })
            .collect();
        Self {
            dim: top.dim + bottom.dim,
            modes,
        }
    }
}

/// The singular LQ problem in its original coordinates:
///
/// ```text
/// dZ/dt = A Z + B u + F(t),        Z(0) = Z0,
/// J(u)  = integral of Z' D Z + u' G u  over t in [0, inf),
/// ```
///
/// with `A` of size `n x n`, `B` of size `n x r` and full column rank,
/// `D` symmetric positive semidefinite, `G = diag(g_1..g_q, 0, .., 0)` with
/// `0 <= q < r`, and `F` a decaying [`ExpSignal`]. The last `r - q` control
/// coordinates carry no cost at all — that is the singularity this crate
/// is about.
#[derive(Debug, Clone)]
pub struct RawProblem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    g: Vec<f64>,
    disturbance: ExpSignal,
    z0: DVector<f64>,
}

impl RawProblem {
    /// Validates dimensions, finiteness, symmetry of the state weight
    /// (defect at most `1e-12` relative), and positivity of the control
    /// weights. Rank and definiteness checks are deferred to
    /// [`validate_raw`] so that a parseable-but-invalid problem can still
    /// be loaded and reported on.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        g: Vec<f64>,
        disturbance: ExpSignal,
        z0: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "raw dynamics matrix",
                expected: (n, n),
                got: (a.nrows(), a.ncols()),
            });
        }
        let r = b.ncols();
        if b.nrows() != n || r == 0 || r > n {
            return Err(Error::DimensionMismatch {
                context: "raw input matrix",
                expected: (n, 1.max(r.min(n))),
                got: (b.nrows(), r),
            });
        }
        if d.nrows() != n || d.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "raw state weight",
                expected: (n, n),
                got: (d.nrows(), d.ncols()),
            });
        }
        linalg::ensure_finite("raw dynamics matrix", &a)?;
        linalg::ensure_finite("raw input matrix", &b)?;
        linalg::ensure_finite("raw state weight", &d)?;
        let defect = linalg::symmetry_defect(&d);
        if defect > 1e-12 {
            return Err(Error::NotSymmetric {
                context: "raw state weight",
                defect,
            });
        }
        let d = (&d + d.transpose()) * 0.5;
        let q = g.len();
        if q >= r {
            return Err(Error::StructureViolation {
                detail: format!("{q} control weights given but only {r} control coordinates; at least one must be unweighted"),
            });
        }
        for &gk in &g {
            if !gk.is_finite() || gk <= 0.0 {
                return Err(Error::NotPositiveDefinite {
                    context: "control weight entries",
                    min_eig: gk,
                });
            }
        }
        if disturbance.dim() != n {
            return Err(Error::DimensionMismatch {
                context: "raw disturbance",
                expected: (n, 1),
                got: (disturbance.dim(), 1),
            });
        }
        if z0.len() != n {
            return Err(Error::DimensionMismatch {
                context: "raw initial state",
                expected: (n, 1),
                got: (z0.len(), 1),
            });
        }
        linalg::ensure_finite_vec("raw initial state", &z0)?;
        Ok(Self {
            a,
            b,
            d,
            g,
            disturbance,
            z0,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn r(&self) -> usize {
        self.b.ncols()
    }

    pub fn q(&self) -> usize {
        self.g.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// Diagonal entries of the nonzero control-weight block.
    pub fn g(&self) -> &[f64] {
        &self.g
    }

    /// The first `q` columns of the input matrix (weighted controls).
    pub fn b_weighted(&self) -> DMatrix<f64> {
        self.b.columns(0, self.q()).into_owned()
    }

    /// The last `r - q` columns of the input matrix (unweighted controls).
    pub fn b_unweighted(&self) -> DMatrix<f64> {
        self.b.columns(self.q(), self.r() - self.q()).into_owned()
    }

    /// The full `r x r` control weight `diag(g_1..g_q, 0, .., 0)`.
    pub fn g_full(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.r(), self.r());
        for (k, &gk) in self.g.iter().enumerate() {
            g[(k, k)] = gk;
        }
        g
    }

    pub fn disturbance(&self) -> &ExpSignal {
        &self.disturbance
    }

    pub fn z0(&self) -> &DVector<f64> {
        &self.z0
    }
}

/// The transformed problem all solvers operate on. The state is
/// `z = (x, y)` with `x` of dimension `n - r + q` (the "slow" part the
/// unweighted controls cannot reach instantaneously) and `y` of dimension
/// `r - q` (the "fast" part they drive directly):
///
/// ```text
/// dz/dt = A z + B u + f(t),        z(0) = z0,
/// J(u)  = integral of x' D1 x + y' D2 y + u' G u  over t in [0, inf),
/// ```
///
/// where `B = (B1; B2)` has the fixed structure `B1 = (0; (I_q, 0))` and
/// `B2 = (Hq, I)` with `Hq` the last `q` columns of the coupling matrix
/// `H`. Only `A`, `H`, `D1`, `D2`, `g`, `f`, `z0` are free data; the input
/// matrix is materialized from the structure, so it is exact by
/// construction (no round-off in the 0/1 pattern).
#[derive(Debug, Clone)]
pub struct Oocp {
    a: DMatrix<f64>,
    hcal: DMatrix<f64>,
    d1: DMatrix<f64>,
    d2: DMatrix<f64>,
    g: Vec<f64>,
    disturbance: ExpSignal,
    z0: DVector<f64>,
}

impl Oocp {
    /// Validates dimensions and definiteness: `D1` symmetric positive
    /// semidefinite, `D2` symmetric positive definite, all control weights
    /// positive, and the coupling matrix of shape `(r-q) x (n-r+q)`.
    pub fn new(
        a: DMatrix<f64>,
        hcal: DMatrix<f64>,
        d1: DMatrix<f64>,
        d2: DMatrix<f64>,
        g: Vec<f64>,
        disturbance: ExpSignal,
        z0: DVector<f64>,
    ) -> Result<Self> {
        let xd = d1.nrows();
        let yd = d2.nrows();
        let n = xd + yd;
        let q = g.len();
        if yd == 0 {
            return Err(Error::StructureViolation {
                detail: "the fast block is empty: every control coordinate is weighted, so the problem is not singular".into(),
            });
        }
        if q > xd {
            return Err(Error::StructureViolation {
                detail: format!(
                    "{q} weighted controls exceed the slow dimension {xd} (need q <= n - r + q)"
                ),
            });
        }
        let d1 = linalg::require_symmetric("slow state weight D1", &d1)?;
        let d2 = linalg::require_symmetric("fast state weight D2", &d2)?;
        let min1 = linalg::min_sym_eigenvalue("slow state weight D1", &d1)?;
        if min1 < -1e-10 * d1.norm().max(1.0) {
            return Err(Error::NotPsd {
                context: "slow state weight D1",
                min_eig: min1,
            });
        }
        let min2 = linalg::min_sym_eigenvalue("fast state weight D2", &d2)?;
        if min2 <= 1e-10 {
            return Err(Error::NotPositiveDefinite {
                context: "fast state weight D2",
                min_eig: min2,
            });
        }
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "transformed dynamics matrix",
                expected: (n, n),
                got: (a.nrows(), a.ncols()),
            });
        }
        if hcal.nrows() != yd || hcal.ncols() != xd {
            return Err(Error::DimensionMismatch {
                context: "coupling matrix",
                expected: (yd, xd),
                got: (hcal.nrows(), hcal.ncols()),
            });
        }
        linalg::ensure_finite("transformed dynamics matrix", &a)?;
        linalg::ensure_finite("coupling matrix", &hcal)?;
        for &gk in &g {
            if !gk.is_finite() || gk <= 0.0 {
                return Err(Error::NotPositiveDefinite {
                    context: "control weight entries",
                    min_eig: gk,
                });
            }
        }
        if disturbance.dim() != n {
            return Err(Error::DimensionMismatch {
                context: "transformed disturbance",
                expected: (n, 1),
                got: (disturbance.dim(), 1),
            });
        }
        if z0.len() != n {
            return Err(Error::DimensionMismatch {
                context: "transformed initial state",
                expected: (n, 1),
                got: (z0.len(), 1),
            });
        }
        linalg::ensure_finite_vec("transformed initial state", &z0)?;
        Ok(Self {
            a,
            hcal,
            d1,
            d2,
            g,
            disturbance,
            z0,
        })
    }

    /// Total state dimension `n`.
    pub fn n(&self) -> usize {
        self.d1.nrows() + self.d2.nrows()
    }

    /// Control dimension `r = q + (r - q)`.
    pub fn r(&self) -> usize {
        self.g.len() + self.d2.nrows()
    }

    /// Number of weighted control coordinates.
    pub fn q(&self) -> usize {
        self.g.len()
    }

    /// Dimension of the slow state block `x`, i.e. `n - r + q`.
    pub fn x_dim(&self) -> usize {
        self.d1.nrows()
    }

    /// Dimension of the fast state block `y`, i.e. `r - q`.
    pub fn y_dim(&self) -> usize {
        self.d2.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Slow-slow dynamics block `A1` (`x_dim` square).
    pub fn a1(&self) -> DMatrix<f64> {
        self.a
            .view((0, 0), (self.x_dim(), self.x_dim()))
            .into_owned()
    }

    /// Slow-fast dynamics block `A2` (`x_dim` by `y_dim`).
    pub fn a2(&self) -> DMatrix<f64> {
        self.a
            .view((0, self.x_dim()), (self.x_dim(), self.y_dim()))
            .into_owned()
    }

    /// Fast-slow dynamics block `A3`.
    pub fn a3(&self) -> DMatrix<f64> {
        self.a
            .view((self.x_dim(), 0), (self.y_dim(), self.x_dim()))
            .into_owned()
    }

    /// Fast-fast dynamics block `A4`.
    pub fn a4(&self) -> DMatrix<f64> {
        self.a
            .view((self.x_dim(), self.x_dim()), (self.y_dim(), self.y_dim()))
            .into_owned()
    }

    /// Coupling matrix `H` of shape `y_dim x x_dim`.
    pub fn hcal(&self) -> &DMatrix<f64> {
        &self.hcal
    }

    /// Last `q` columns of `H` — the part that enters the input matrix.
    pub fn hq(&self) -> DMatrix<f64> {
        self.hcal
            .columns(self.x_dim() - self.q(), self.q())
            .into_owned()
    }

    pub fn d1(&self) -> &DMatrix<f64> {
        &self.d1
    }

    pub fn d2(&self) -> &DMatrix<f64> {
        &self.d2
    }

    /// Full block-diagonal state weight `diag(D1, D2)`.
    pub fn d_full(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut d = DMatrix::zeros(n, n);
        d.view_mut((0, 0), (self.x_dim(), self.x_dim()))
            .copy_from(&self.d1);
        d.view_mut((self.x_dim(), self.x_dim()), (self.y_dim(), self.y_dim()))
            .copy_from(&self.d2);
        d
    }

    /// Diagonal entries of the nonzero control-weight block.
    pub fn g(&self) -> &[f64] {
        &self.g
    }

    /// The weighted block `diag(g)` (`q` square).
    pub fn gtilde(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.g))
    }

    /// Exact inverse `diag(1/g)` of the weighted block.
    pub fn gtilde_inv(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.q(),
            self.g.iter().map(|&gk| 1.0 / gk),
        ))
    }

    /// Full singular control weight `diag(g_1..g_q, 0, .., 0)`.
    pub fn g_full(&self) -> DMatrix<f64> {
        let r = self.r();
        let mut g = DMatrix::zeros(r, r);
        for (k, &gk) in self.g.iter().enumerate() {
            g[(k, k)] = gk;
        }
        g
    }

    /// Regularized control weight `diag(g_1..g_q, eps^2, .., eps^2)`.
    pub fn g_regularized(&self, epsilon: f64) -> DMatrix<f64> {
        let mut g = self.g_full();
        for k in self.q()..self.r() {
            g[(k, k)] = epsilon * epsilon;
        }
        g
    }

    /// Upper input block `B1 = (0; (I_q, 0))` of shape `x_dim x r`; entries
    /// are exactly 0 or 1.
    pub fn b1(&self) -> DMatrix<f64> {
        let mut b1 = DMatrix::zeros(self.x_dim(), self.r());
        let top = self.x_dim() - self.q();
        for k in 0..self.q() {
            b1[(top + k, k)] = 1.0;
        }
        b1
    }

    /// Lower input block `B2 = (Hq, I)` of shape `y_dim x r`.
    pub fn b2(&self) -> DMatrix<f64> {
        let mut b2 = DMatrix::zeros(self.y_dim(), self.r());
        b2.view_mut((0, 0), (self.y_dim(), self.q()))
            .copy_from(&self.hq());
        for k in 0..self.y_dim() {
            b2[(k, self.q() + k)] = 1.0;
        }
        b2
    }

    /// Full input matrix `B = (B1; B2)`.
    pub fn b(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n(), self.r());
        b.view_mut((0, 0), (self.x_dim(), self.r()))
            .copy_from(&self.b1());
        b.view_mut((self.x_dim(), 0), (self.y_dim(), self.r()))
            .copy_from(&self.b2());
        b
    }

    /// Slow-block input column `(0; I_q)` of the weighted controls,
    /// `x_dim x q`.
    pub fn btilde(&self) -> DMatrix<f64> {
        let mut bt = DMatrix::zeros(self.x_dim(), self.q());
        let top = self.x_dim() - self.q();
        for k in 0..self.q() {
            bt[(top + k, k)] = 1.0;
        }
        bt
    }

    /// Reduced input matrix `(btilde, A2)` of shape `x_dim x r` — the
    /// effective input of the slow subproblem, in which the fast state
    /// acts as an extra control channel.
    pub fn b_bar(&self) -> DMatrix<f64> {
        let mut bb = DMatrix::zeros(self.x_dim(), self.r());
        bb.view_mut((0, 0), (self.x_dim(), self.q()))
            .copy_from(&self.btilde());
        bb.view_mut((0, self.q()), (self.x_dim(), self.y_dim()))
            .copy_from(&self.a2());
        bb
    }

    /// Reduced control weight `diag(gtilde, D2)`, `r` square.
    pub fn theta(&self) -> DMatrix<f64> {
        let r = self.r();
        let mut th = DMatrix::zeros(r, r);
        for (k, &gk) in self.g.iter().enumerate() {
            th[(k, k)] = gk;
        }
        th.view_mut((self.q(), self.q()), (self.y_dim(), self.y_dim()))
            .copy_from(&self.d2);
        th
    }

    /// Inverse of [`theta`](Self::theta), computed blockwise.
    pub fn theta_inv(&self) -> Result<DMatrix<f64>> {
        let r = self.r();
        let mut th = DMatrix::zeros(r, r);
        for (k, &gk) in self.g.iter().enumerate() {
            th[(k, k)] = 1.0 / gk;
        }
        let d2inv = linalg::spd_inv(&self.d2)?;
        th.view_mut((self.q(), self.q()), (self.y_dim(), self.y_dim()))
            .copy_from(&d2inv);
        Ok(th)
    }

    /// Slow-block control energy matrix `btilde gtilde^-1 btilde'`, i.e.
    /// `diag(0, gtilde^-1)` of size `x_dim`.
    pub fn s1(&self) -> DMatrix<f64> {
        let xd = self.x_dim();
        let mut s1 = DMatrix::zeros(xd, xd);
        let top = xd - self.q();
        for (k, &gk) in self.g.iter().enumerate() {
            s1[(top + k, top + k)] = 1.0 / gk;
        }
        s1
    }

    /// Gain block `H3 = (0, gtilde^-1)` of shape `q x x_dim`.
    pub fn h3(&self) -> DMatrix<f64> {
        let mut h3 = DMatrix::zeros(self.q(), self.x_dim());
        let left = self.x_dim() - self.q();
        for (k, &gk) in self.g.iter().enumerate() {
            h3[(k, left + k)] = 1.0 / gk;
        }
        h3
    }

    /// Gain block `H1 = gtilde^-1 Hq'` of shape `q x y_dim`.
    pub fn h1(&self) -> DMatrix<f64> {
        self.gtilde_inv() * self.hq().transpose()
    }

    /// Gain block `H2 = Hq H1` of shape `y_dim x y_dim`.
    pub fn h2(&self) -> DMatrix<f64> {
        self.hq() * self.h1()
    }

    pub fn disturbance(&self) -> &ExpSignal {
        &self.disturbance
    }

    /// Slow rows of the disturbance.
    pub fn f1(&self) -> ExpSignal {
        self.disturbance.rows(0, self.x_dim())
    }

    /// Fast rows of the disturbance.
    pub fn f2(&self) -> ExpSignal {
        self.disturbance.rows(self.x_dim(), self.y_dim())
    }

    pub fn z0(&self) -> &DVector<f64> {
        &self.z0
    }

    /// Slow part of the initial state.
    pub fn x0(&self) -> DVector<f64> {
        self.z0.rows(0, self.x_dim()).into_owned()
    }

    /// Fast part of the initial state.
    pub fn y0(&self) -> DVector<f64> {
        self.z0.rows(self.x_dim(), self.y_dim()).into_owned()
    }

    /// Splits a full state vector into its slow and fast parts.
    pub fn split_state(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            z.rows(0, self.x_dim()).into_owned(),
            z.rows(self.x_dim(), self.y_dim()).into_owned(),
        )
    }
}

/// Outcome of one assumption check: a pass flag plus the numeric witness
/// the decision was made on (rank gap, eigenvalue, Hautus singular value,
/// decay rate).
#[derive(Debug, Clone)]
pub struct AssumptionEntry {
    /// Assumption label, `"A1"` through `"A7"`.
    pub id: &'static str,
    pub pass: bool,
    /// The quantity the pass/fail decision was made on.
    pub witness: f64,
    pub message: String,
}

/// Collected assumption checks for one problem.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub entries: Vec<AssumptionEntry>,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn entry(&self, id: &str) -> Option<&AssumptionEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Checks assumptions (A1)–(A5) on the raw data:
///
/// * A1 — the input matrix has full column rank,
/// * A2 — the state weight is positive semidefinite,
/// * A3 — every control weight entry is positive,
/// * A4 — every disturbance mode decays,
/// * A5 — the fast weight block `B2' D B2` is invertible,
///
/// each with a numeric witness. A3 and A4 are enforced by the constructors
/// already; they are re-reported here so the report is complete on its own.
pub fn validate_raw(p: &RawProblem) -> AssumptionReport {
    let mut entries = Vec::with_capacity(5);

    let sv = p.b().clone().singular_values();
    let smax = sv.iter().fold(0.0f64, |a, &s| a.max(s));
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax).count();
    let smin = sv.iter().fold(f64::INFINITY, |a, &s| a.min(s));
    entries.push(AssumptionEntry {
        id: "A1",
        pass: rank == p.r(),
        witness: if smax > 0.0 { smin / smax } else { 0.0 },
        message: format!(
            "input matrix rank {rank} of {} (relative sigma_min as witness)",
            p.r()
        ),
    });

    let min_eig = linalg::min_sym_eigenvalue("state weight", p.d()).unwrap_or(f64::NAN);
    let pass = min_eig >= -1e-10 * p.d().norm();
    entries.push(AssumptionEntry {
        id: "A2",
        pass,
        witness: min_eig,
        message: format!("state weight minimum eigenvalue {min_eig:.3e}"),
    });

    let gmin = p.g().iter().copied().fold(f64::INFINITY, f64::min);
    entries.push(AssumptionEntry {
        id: "A3",
        pass: p.g().iter().all(|&gk| gk > 0.0),
        witness: gmin,
        message: if p.q() == 0 {
            "no weighted controls (q = 0), vacuously positive".into()
        } else {
            format!("smallest control weight {gmin:.3e}")
        },
    });

    let rate = p.disturbance().min_rate();
    entries.push(AssumptionEntry {
        id: "A4",
        pass: rate > 0.0,
        witness: rate,
        message: if p.disturbance().modes().is_empty() {
            "zero disturbance, vacuously decaying".into()
        } else {
            format!("slowest disturbance decay rate {rate:.3e}")
        },
    });

    let b2 = p.b_unweighted();
    let fast = (b2.transpose() * p.d() * &b2 + (b2.transpose() * p.d() * &b2).transpose()) * 0.5;
    let fast_min = linalg::min_sym_eigenvalue("fast weight block", &fast).unwrap_or(f64::NAN);
    entries.push(AssumptionEntry {
        id: "A5",
        pass: fast_min > 1e-10,
        witness: fast_min,
        message: format!("fast weight block minimum eigenvalue {fast_min:.3e}"),
    });

    AssumptionReport { entries }
}

/// Smallest `sigma_min([A - lambda I, B])` over eigenvalues `lambda` of `A`
/// with nonnegative real part (`+inf` when `A` is Hurwitz) — the Hautus
/// margin of stabilizability of the pair `(A, B)`.
fn hautus_margin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let m = a.nrows();
    if m == 0 {
        return Ok(f64::INFINITY);
    }
    let spectrum = linalg::spectral_abscissa(a)?;
    let re_floor = -1e-9 * a.norm().max(1.0);
    let mut margin = f64::INFINITY;
    for lam in spectrum.eigenvalues.iter().filter(|l| l.re >= re_floor) {
        let cols = m + b.ncols();
        let mut pencil = DMatrix::<Complex<f64>>::zeros(m, cols);
        for i in 0..m {
            for j in 0..m {
                pencil[(i, j)] = Complex::new(a[(i, j)], 0.0);
            }
            pencil[(i, i)] -= lam;
            for j in 0..b.ncols() {
                pencil[(i, m + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = pencil.singular_values();
        let smin = sv.iter().fold(f64::INFINITY, |acc, &s| acc.min(s));
        margin = margin.min(smin);
    }
    Ok(margin)
}

/// Checks the reduced-problem assumptions on the transformed data:
///
/// * A6 — the pair `(A1, b_bar)` is stabilizable,
/// * A7 — the pair `(A1, F1)` with `F1' F1 = D1` is detectable,
///
/// both via the Hautus test with margin `1e-8` on the minimum singular
/// value. An internal eigenvalue or factorization failure is reported as a
/// failing entry rather than an error, so the report is always complete.
pub fn validate_reduced(o: &Oocp) -> AssumptionReport {
    let mut entries = Vec::with_capacity(2);
    let a1 = o.a1();

    match hautus_margin(&a1, &o.b_bar()) {
        Ok(margin) => entries.push(AssumptionEntry {
            id: "A6",
            pass: margin > 1e-8,
            witness: margin,
            message: if margin.is_infinite() {
                "slow dynamics already stable, stabilizability vacuous".into()
            } else {
                format!("stabilizability Hautus margin {margin:.3e}")
            },
        }),
        Err(e) => entries.push(AssumptionEntry {
            id: "A6",
            pass: false,
            witness: f64::NAN,
            message: format!("stabilizability check failed: {e}"),
        }),
    }

    let detect = factor_d1(o.d1()).and_then(|f1| hautus_margin(&a1.transpose(), &f1.transpose()));
    match detect {
        Ok(margin) => entries.push(AssumptionEntry {
            id: "A7",
            pass: margin > 1e-8,
            witness: margin,
            message: if margin.is_infinite() {
                "slow dynamics already stable, detectability vacuous".into()
            } else {
                format!("detectability Hautus margin {margin:.3e}")
            },
        }),
        Err(e) => entries.push(AssumptionEntry {
            id: "A7",
            pass: false,
            witness: f64::NAN,
            message: format!("detectability check failed: {e}"),
        }),
    }

    AssumptionReport { entries }
}

/// Thin full-row-rank factor `F1` with `F1' F1 = D1` for a symmetric PSD
/// `D1`, built from the eigendecomposition: `F1 = sqrt(L+) Q+'` over the
/// eigenpairs above the rank tolerance, so `F1` has exactly `rank(D1)`
/// rows. Rows are sign-normalized (first entry of magnitude above 1e-12
/// positive) for reproducibility.
pub fn factor_d1(d1: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (q, vals) = linalg::psd_eigen("factor_d1", d1, false)?;
    let m = d1.nrows();
    let vmax = vals.iter().fold(0.0f64, |a, &v| a.max(v));
    let mut selected: Vec<usize> = (0..m)
        .filter(|&i| vals[i] > RANK_TOL * vmax && vals[i] > 0.0)
        .collect();
    selected.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap());
    let mut f1 = DMatrix::zeros(selected.len(), m);
    for (row, &i) in selected.iter().enumerate() {
        let scale = vals[i].sqrt();
        for col in 0..m {
            f1[(row, col)] = scale * q[(col, i)];
        }
        let lead = f1
            .row(row)
            .iter()
            .find(|x| x.abs() > 1e-12)
            .copied()
            .unwrap_or(0.0);
        if lead < 0.0 {
            for col in 0..m {
                f1[(row, col)] = -f1[(row, col)];
            }
        }
    }
    let defect = (f1.transpose() * &f1 - d1).norm();
    if defect > 1e-12 * d1.norm().max(1.0) {
        return Err(Error::EigenFailure {
            context: "state weight factorization residual too large",
        });
    }
    Ok(f1)
}
