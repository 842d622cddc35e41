//! Dense linear-algebra kernels: symmetric square roots, spectra, matrix
//! exponentials, orthonormal complements, Lyapunov and algebraic Riccati
//! solves.
//!
//! Everything here works on `nalgebra` dynamic matrices over `f64`. The
//! Riccati solver extracts the stable invariant subspace of the associated
//! Hamiltonian matrix with a scaled Newton iteration for the matrix sign
//! function and then polishes the result with Newton–Kleinman steps, so an
//! accepted solution always carries a small residual, a positive
//! semidefinite value matrix, and a Hurwitz closed loop.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative symmetry defect accepted before an input is rejected as
/// non-symmetric. Symmetric inputs that pass are re-symmetrized so later
/// arithmetic sees an exactly symmetric matrix.
pub const SYM_TOL: f64 = 1e-9;

/// Relative singular-value threshold for rank decisions: a singular value
/// counts toward the rank when it exceeds `RANK_TOL * sigma_max`.
pub const RANK_TOL: f64 = 1e-10;

/// Relative Riccati residual accepted by [`solve_are`].
pub const ARE_RESIDUAL_TOL: f64 = 1e-10;

/// Eigenvalues of a nominally PSD matrix inside `[-PSD_CLAMP * scale, 0]`
/// are clamped to zero; anything below is an error.
const PSD_CLAMP: f64 = 1e-12;

/// Condition-number estimate beyond which a shifted solve is reported as
/// singular.
const SHIFT_COND_MAX: f64 = 1e14;

fn shape(m: &DMatrix<f64>) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

pub(crate) fn ensure_finite(context: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}

pub(crate) fn ensure_finite_vec(context: &'static str, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}

fn ensure_square(context: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == m.ncols() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected: (m.nrows(), m.nrows()),
            got: shape(m),
        })
    }
}

/// Relative symmetry defect `||M - M^T|| / max(1, ||M||)` (Frobenius).
pub fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    if m.nrows() != m.ncols() {
        return f64::INFINITY;
    }
    (m - m.transpose()).norm() / m.norm().max(1.0)
}

/// Checks the symmetry defect against [`SYM_TOL`] and returns the
/// symmetrized matrix `(M + M^T) / 2`.
pub fn require_symmetric(context: &'static str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_square(context, m)?;
    ensure_finite(context, m)?;
    let defect = symmetry_defect(m);
    if defect > SYM_TOL {
        return Err(Error::NotSymmetric { context, defect });
    }
    Ok(symmetrize(m))
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with PSD clamping. Returns `(q, lambda)`
/// with eigenvalues clamped to `>= 0`; eigenvalues below `-PSD_CLAMP * scale`
/// are an error. With `require_pd`, eigenvalues at or below the clamp window
/// are also an error.
pub(crate) fn psd_eigen(
    context: &'static str,
    m: &DMatrix<f64>,
    require_pd: bool,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let sym = require_symmetric(context, m)?;
    let n = sym.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), DVector::zeros(0)));
    }
    let eig = nalgebra::linalg::SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let floor = -PSD_CLAMP * scale.max(1.0);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < floor {
            return Err(if require_pd {
                Error::NotPositiveDefinite {
                    context,
                    min_eig: *v,
                }
            } else {
                Error::NotPsd {
                    context,
                    min_eig: *v,
                }
            });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    if require_pd {
        if let Some(&min) = vals.iter().min_by(|a, b| a.partial_cmp(b).unwrap()) {
            if min <= -floor {
                return Err(Error::NotPositiveDefinite {
                    context,
                    min_eig: min,
                });
            }
        }
    }
    Ok((eig.eigenvectors, vals))
}

/// Symmetric square root of a symmetric positive (semi)definite matrix via
/// eigendecomposition: `R = Q diag(sqrt(lambda)) Q^T`, so `R = R^T` and
/// `R R = M` up to rounding. Eigenvalues in the PSD clamp window are treated
/// as zero.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (q, vals) = psd_eigen("spd_sqrt", m, false)?;
    let root = DMatrix::from_diagonal(&vals.map(f64::sqrt));
    Ok(symmetrize(&(&q * root * q.transpose())))
}

/// Inverse of a symmetric positive definite matrix via eigendecomposition.
pub fn spd_inv(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (q, vals) = psd_eigen("spd_inv", m, true)?;
    let inv = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v));
    Ok(symmetrize(&(&q * inv * q.transpose())))
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (q, vals) = psd_eigen("spd_inv_sqrt", m, true)?;
    let inv = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt()));
    Ok(symmetrize(&(&q * inv * q.transpose())))
}

/// Smallest eigenvalue of a symmetric matrix (`+inf` for the empty matrix).
pub fn min_sym_eigenvalue(context: &'static str, m: &DMatrix<f64>) -> Result<f64> {
    let sym = require_symmetric(context, m)?;
    if sym.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    let eig = nalgebra::linalg::SymmetricEigen::new(sym);
    Ok(eig.eigenvalues.iter().fold(f64::INFINITY, |a, &l| a.min(l)))
}

/// Spectrum summary of a real square matrix.
#[derive(Debug, Clone)]
pub struct SpectralReport {
    /// `max_i Re(lambda_i)`; `-inf` for the empty matrix.
    pub abscissa: f64,
    /// All eigenvalues, sorted by decreasing real part (ties by decreasing
    /// imaginary part) so the report is deterministic.
    pub eigenvalues: Vec<Complex<f64>>,
    /// Whether every eigenvalue has strictly negative real part.
    pub hurwitz: bool,
}

/// Eigenvalues and spectral abscissa via a real Schur decomposition.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<SpectralReport> {
    ensure_square("spectral_abscissa", m)?;
    ensure_finite("spectral_abscissa", m)?;
    if m.nrows() == 0 {
        return Ok(SpectralReport {
            abscissa: f64::NEG_INFINITY,
            eigenvalues: Vec::new(),
            hurwitz: true,
        });
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 100_000).ok_or(
        Error::EigenFailure {
            context: "Schur iteration did not converge",
        },
    )?;
    let mut eigenvalues: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(|a, b| {
        b.re.partial_cmp(&a.re)
            .unwrap()
            .then(b.im.partial_cmp(&a.im).unwrap())
    });
    let abscissa = eigenvalues[0].re;
    Ok(SpectralReport {
        abscissa,
        hurwitz: abscissa < 0.0,
        eigenvalues,
    })
}

/// Matrix exponential `exp(M)` (scaling-and-squaring with Padé
/// approximants, as provided by `nalgebra`). Results with non-finite
/// entries are reported as overflow.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_square("expm", m)?;
    ensure_finite("expm", m)?;
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let e = m.exp();
    if e.iter().all(|x| x.is_finite()) {
        Ok(e)
    } else {
        Err(Error::Overflow { context: "expm" })
    }
}

pub(crate) fn norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves `(gamma I - M) v = c` by LU with one step of iterative
/// refinement. This is the resolvent solve used to build the exponential
/// modes of the costate: `-gamma` must stay away from the spectrum of `-M`,
/// otherwise the shift is reported as singular.
pub fn solve_shifted_linear(
    m: &DMatrix<f64>,
    gamma: f64,
    c: &DVector<f64>,
) -> Result<DVector<f64>> {
    ensure_square("solve_shifted_linear", m)?;
    ensure_finite("solve_shifted_linear", m)?;
    ensure_finite_vec("solve_shifted_linear", c)?;
    if !gamma.is_finite() {
        return Err(Error::NonFinite {
            context: "solve_shifted_linear shift",
        });
    }
    let n = m.nrows();
    if c.len() != n {
        return Err(Error::DimensionMismatch {
            context: "solve_shifted_linear",
            expected: (n, 1),
            got: (c.len(), 1),
        });
    }
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let k = DMatrix::identity(n, n) * gamma - m;
    let lu = k.clone().lu();
    let mut v = lu.solve(c).ok_or(Error::SingularShift { gamma })?;
    let r = c - &k * &v;
    if let Some(dv) = lu.solve(&r) {
        v += dv;
    }
    let inv = lu.try_inverse().ok_or(Error::SingularShift { gamma })?;
    let cond = norm1(&k) * norm1(&inv);
    if !cond.is_finite() || cond > SHIFT_COND_MAX {
        return Err(Error::SingularShift { gamma });
    }
    let resid = (c - &k * &v).norm();
    if resid > 1e-10 * (c.norm() + k.norm() * v.norm()).max(1e-300) {
        return Err(Error::SingularShift { gamma });
    }
    Ok(v)
}

/// Orthonormal basis of the orthogonal complement of `col(B)` for a full
/// column-rank `B` (n x r), returned as an `n x (n - r)` matrix with
/// orthonormal columns. Deterministic sign convention: the first entry of
/// each column with magnitude above 1e-12 is positive.
pub fn complement_basis(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_finite("complement_basis", b)?;
    let (n, r) = shape(b);
    if r > n {
        return Err(Error::DimensionMismatch {
            context: "complement_basis",
            expected: (n, n),
            got: (n, r),
        });
    }
    if r > 0 {
        let sv = b.clone().singular_values();
        let smax = sv.iter().fold(0.0f64, |a, &s| a.max(s));
        let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax).count();
        if rank < r {
            return Err(Error::RankDeficient {
                context: "complement_basis",
                rank,
                expected: r,
            });
        }
    }
    // Full Householder QR of B; the trailing n-r columns of Q span the
    // complement. nalgebra only exposes the thin factor, so the reflectors
    // are applied by hand to the trailing identity columns.
    let mut work = b.clone();
    let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(r);
    for k in 0..r {
        let tail = n - k;
        let mut v = DVector::zeros(tail);
        for i in 0..tail {
            v[i] = work[(k + i, k)];
        }
        let alpha = -v[0].signum() * v.norm();
        v[0] -= alpha;
        let vnorm = v.norm();
        if vnorm > 0.0 {
            v /= vnorm;
            // Apply H = I - 2 v v^T to the remaining columns of the work matrix.
            for j in k..r {
                let mut dot = 0.0;
                for i in 0..tail {
                    dot += v[i] * work[(k + i, j)];
                }
                for i in 0..tail {
                    work[(k + i, j)] -= 2.0 * dot * v[i];
                }
            }
        } else {
            v = DVector::zeros(tail); // already triangular in this column
        }
        reflectors.push(v);
    }
    // Complement = H_1 H_2 ... H_r applied to the trailing identity columns.
    let mut comp = DMatrix::zeros(n, n - r);
    for j in 0..(n - r) {
        comp[(r + j, j)] = 1.0;
    }
    for k in (0..r).rev() {
        let v = &reflectors[k];
        let tail = n - k;
        for j in 0..(n - r) {
            let mut dot = 0.0;
            for i in 0..tail {
                dot += v[i] * comp[(k + i, j)];
            }
            for i in 0..tail {
                comp[(k + i, j)] -= 2.0 * dot * v[i];
            }
        }
    }
    // Sign convention for reproducibility across runs and platforms.
    for j in 0..(n - r) {
        let lead = comp
            .column(j)
            .iter()
            .find(|x| x.abs() > 1e-12)
            .copied()
            .unwrap_or(0.0);
        if lead < 0.0 {
            for i in 0..n {
                comp[(i, j)] = -comp[(i, j)];
            }
        }
    }
    Ok(comp)
}

/// Matrix sign function by the scaled Newton iteration
/// `Z <- (mu Z + (mu Z)^{-1}) / 2` with determinant scaling
/// `mu = |det Z|^{-1/n}`. Requires the spectrum to stay off the imaginary
/// axis; non-convergence is reported as an eigenvalue failure.
pub(crate) fn matrix_sign(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_square("matrix_sign", m)?;
    ensure_finite("matrix_sign", m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mut z = m.clone();
    let mut converged = false;
    for _ in 0..100 {
        let lu = z.clone().lu();
        let mut logdet = 0.0f64;
        for i in 0..n {
            let d = lu.u()[(i, i)].abs();
            // catches zero, NaN (via !is_finite), and infinity alike
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::EigenFailure {
                    context:
                        "sign iteration hit a singular iterate (eigenvalue on the imaginary axis?)",
                });
            }
            logdet += d.ln();
        }
        let zinv = lu.try_inverse().ok_or(Error::EigenFailure {
            context: "sign iteration: iterate not invertible",
        })?;
        // After convergence |det Z| = 1, so the scaling tends to 1 on its own;
        // clamp it anyway to keep early iterations tame.
        let mu = (-logdet / n as f64).exp().clamp(1e-6, 1e6);
        let next = (&z * mu + zinv / mu) * 0.5;
        let delta = (&next - &z).norm();
        let scale = next.norm().max(1e-300);
        z = next;
        if delta <= 1e-13 * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::EigenFailure {
            context: "sign iteration did not converge in 100 steps",
        });
    }
    // One unscaled cleanup step, then a cheap involution check.
    let zinv = z.clone().lu().try_inverse().ok_or(Error::EigenFailure {
        context: "sign iteration: iterate not invertible",
    })?;
    z = (&z + zinv) * 0.5;
    let involution_defect = (&z * &z - DMatrix::identity(n, n)).norm() / (n as f64).sqrt();
    if involution_defect > 1e-6 {
        return Err(Error::EigenFailure {
            context: "sign iterate is not an involution",
        });
    }
    Ok(z)
}

/// Solves the Lyapunov equation `F^T X + X F + Q = 0` for Hurwitz `F` and
/// symmetric `Q` through the sign function of `[[F^T, Q], [0, -F]]`, whose
/// upper-right block converges to `2 X`.
pub fn solve_lyapunov(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_square("solve_lyapunov", f)?;
    let n = f.nrows();
    let q = require_symmetric("solve_lyapunov rhs", q)?;
    if q.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "solve_lyapunov",
            expected: (n, n),
            got: shape(&q),
        });
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&f.transpose());
    m.view_mut((0, n), (n, n)).copy_from(&q);
    m.view_mut((n, n), (n, n)).copy_from(&(-f));
    let s = matrix_sign(&m)?;
    let x = symmetrize(&(s.view((0, n), (n, n)).into_owned() * 0.5));
    let resid = (f.transpose() * &x + &x * f + &q).norm();
    let scale = (2.0 * f.norm() * x.norm() + q.norm()).max(1.0);
    if resid > 1e-8 * scale {
        return Err(Error::EigenFailure {
            context: "lyapunov residual check failed",
        });
    }
    Ok(x)
}

/// Relative residual `||A^T P + P A - P S P + D|| / max(1, ||D||)`
/// (Frobenius norms).
pub fn are_residual(a: &DMatrix<f64>, s: &DMatrix<f64>, d: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let r = a.transpose() * p + p * a - p * s * p + d;
    r.norm() / d.norm().max(1.0)
}

/// Stabilizing solution of the continuous algebraic Riccati equation
///
/// ```text
/// A^T P + P A - P S P + D = 0,    S = S^T >= 0,  D = D^T >= 0,
/// ```
///
/// computed from the stable invariant subspace of the Hamiltonian
/// `[[A, -S], [-D, -A^T]]` (matrix sign function, then a column-pivoted QR
/// of the stable spectral projector) and refined by Newton–Kleinman
/// iteration. The returned `P` is symmetric positive semidefinite, has
/// relative residual at most [`ARE_RESIDUAL_TOL`], and makes `A - S P`
/// Hurwitz; anything less is an error, never a silently degraded result.
pub fn solve_are(a: &DMatrix<f64>, s: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_square("solve_are", a)?;
    ensure_finite("solve_are", a)?;
    let n = a.nrows();
    let s = require_symmetric("solve_are weight S", s)?;
    let d = require_symmetric("solve_are weight D", d)?;
    if s.nrows() != n || d.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "solve_are",
            expected: (n, n),
            got: shape(if s.nrows() != n { &s } else { &d }),
        });
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }

    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&s));
    h.view_mut((n, 0), (n, n)).copy_from(&(-&d));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let sign = matrix_sign(&h).map_err(|e| match e {
        Error::EigenFailure { context } => Error::NoStabilizingSolution {
            detail: format!("Hamiltonian sign iteration failed: {context}"),
        },
        other => other,
    })?;

    // Projector onto the stable invariant subspace; its column space has
    // dimension n exactly when the Hamiltonian has no eigenvalues on the
    // imaginary axis.
    let projector = (DMatrix::identity(2 * n, 2 * n) - sign) * 0.5;
    let qr = projector.clone().col_piv_qr();
    let rdiag: Vec<f64> = (0..2 * n).map(|i| qr.r()[(i, i)].abs()).collect();
    let rmax = rdiag.iter().fold(0.0f64, |acc, &v| acc.max(v));
    let rank = rdiag.iter().filter(|&&v| v > RANK_TOL * rmax).count();
    if rank != n {
        return Err(Error::NoStabilizingSolution {
            detail: format!("stable subspace has dimension {rank}, expected {n}"),
        });
    }
    let qfull = qr.q();
    let x1 = qfull.view((0, 0), (n, n)).into_owned();
    let x2 = qfull.view((n, 0), (n, n)).into_owned();
    let p0 = x1
        .transpose()
        .lu()
        .solve(&x2.transpose())
        .ok_or_else(|| Error::NoStabilizingSolution {
            detail: "stable subspace is not a graph over the state space".into(),
        })?
        .transpose();
    let mut p = symmetrize(&p0);

    // Newton-Kleinman polish: each step solves the Lyapunov equation
    //   (A - S P_k)^T P_{k+1} + P_{k+1} (A - S P_k) + P_k S P_k + D = 0,
    // which is the exact Newton step for the Riccati map and contracts
    // quadratically from a stabilizing seed.
    let mut best = p.clone();
    let mut best_resid = are_residual(a, &s, &d, &p);
    for _ in 0..8 {
        if best_resid <= 1e-14 {
            break;
        }
        let acl = a - &s * &p;
        let rhs = symmetrize(&(&p * &s * &p + &d));
        let next = match solve_lyapunov(&acl, &rhs) {
            Ok(x) => x,
            Err(_) => break,
        };
        let resid = are_residual(a, &s, &d, &next);
        p = next;
        if resid < best_resid {
            best_resid = resid;
            best = p.clone();
        } else {
            break;
        }
    }
    let p = best;

    if best_resid > ARE_RESIDUAL_TOL {
        return Err(Error::NoStabilizingSolution {
            detail: format!("relative residual {best_resid:.3e} exceeds {ARE_RESIDUAL_TOL:.1e}"),
        });
    }
    let min_eig = min_sym_eigenvalue("solve_are value matrix", &p)?;
    if min_eig < -1e-9 * p.norm().max(1.0) {
        return Err(Error::NoStabilizingSolution {
            detail: format!("value matrix has eigenvalue {min_eig:.3e} < 0"),
        });
    }
    let closed = spectral_abscissa(&(a - &s * &p))?;
    if !closed.hurwitz {
        return Err(Error::NoStabilizingSolution {
            detail: format!(
                "closed loop has spectral abscissa {:.3e} >= 0",
                closed.abscissa
            ),
        });
    }
    Ok(p)
}

/// Kronecker product `A (x) B`.
pub(crate) fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = shape(a);
    let (rb, cb) = shape(b);
    let mut out = DMatrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            let scale = a[(i, j)];
            if scale != 0.0 {
                for p in 0..rb {
                    for q in 0..cb {
                        out[(i * rb + p, j * cb + q)] = scale * b[(p, q)];
                    }
                }
            }
        }
    }
    out
}

/// Commutation matrix `K` with `K vec(X) = vec(X^T)` for `X` of shape
/// `rows x cols` (column-major `vec`).
pub(crate) fn commutation(rows: usize, cols: usize) -> DMatrix<f64> {
    let n = rows * cols;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..rows {
        for j in 0..cols {
            // vec(X)[j*rows + i] = X[i, j] = X^T[j, i] = vec(X^T)[i*cols + j]
            k[(i * cols + j, j * rows + i)] = 1.0;
        }
    }
    k
}
