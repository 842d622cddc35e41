//! Exact solver for the regularized problem at a fixed `eps > 0`.
//!
//! Regularization replaces the singular control weight by `G + E(eps)`,
//! where `E(eps)` puts `eps^2` on the previously unweighted channels. The
//! resulting problem is a regular LQ problem with a known disturbance, so
//! its optimum is `u = -(G + E)^-1 B' (P z + h(t))` with `P` the
//! stabilizing Riccati solution for the energy matrix
//! `S(eps) = B (G + E)^-1 B'`, `h` the decaying feedforward, and optimal
//! value `Jstar = z0' P z0 + 2 h(0)' z0 + s(0)`.
//!
//! The catch is stiffness: `S(eps)` carries an `eps^-2` block, so a direct
//! Riccati solve degrades as `eps` shrinks. This module therefore switches
//! representation at [`DIRECT_PATH_MIN_EPSILON`]:
//!
//! * for moderate `eps` it solves the assembled `n x n` equation directly
//!   (Hamiltonian sign method);
//! * for small `eps` it works in the scaled block parametrization
//!   `P = [[P1, eps P2], [eps P2', eps P3]]`, whose three coupled block
//!   equations have `O(1)` coefficients for every `eps`. A Newton
//!   iteration on that system, seeded with the zero-order blocks from
//!   [`crate::reduced::solve_reduced`], converges in a handful of steps.
//!
//! Both paths land in the same representation and pass the same residual
//! and stability gates, and the tests pin them against each other at the
//! switch point.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{ExpMode, ExpSignal, Oocp};
use crate::reduced;
use crate::sim::AffineLaw;

/// Below this value of `eps`, [`solve_pccp`] abandons the assembled-matrix
/// Riccati solve in favor of the Newton iteration on the scaled block
/// equations.
pub const DIRECT_PATH_MIN_EPSILON: f64 = 1e-2;

/// Exact solution of the regularized problem at one `eps`.
#[derive(Debug, Clone)]
pub struct CheapSolution {
    /// Regularization parameter this solution belongs to.
    pub epsilon: f64,
    /// Stabilizing Riccati solution of the full `n x n` equation.
    pub p: DMatrix<f64>,
    /// Slow-slow block of `p` (equal to the corresponding submatrix).
    pub p1: DMatrix<f64>,
    /// Scaled coupling block: the slow-fast submatrix of `p` divided by
    /// `eps`. Stays `O(1)` as `eps` shrinks.
    pub p2: DMatrix<f64>,
    /// Scaled fast-fast block: the fast submatrix of `p` divided by `eps`.
    pub p3: DMatrix<f64>,
    /// Closed-loop matrix `a - s(eps) p`; Hurwitz on every accepted solve.
    pub acl: DMatrix<f64>,
    /// Feedforward `h(t)`, one exponential mode per disturbance mode.
    pub h: ExpSignal,
    /// Scalar value correction `s(t)` with `s(+inf) = 0`.
    pub s: ExpSignal,
    /// Optimal value of the regularized problem from the initial state.
    pub jstar: f64,
}

/// Assembles the energy matrix `S(eps) = B (G + E)^-1 B'` from its block
/// closed form: the slow-slow block is [`Oocp::s1`], the coupling block
/// stacks [`Oocp::h1`] under zeros, and the fast-fast block is
/// `h2 + eps^-2 I`. No `r x r` inverse is formed.
pub fn assemble_s(o: &Oocp, epsilon: f64) -> Result<DMatrix<f64>> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::EpsilonOutOfRange {
            value: epsilon,
            max: 1.0,
        });
    }
    let (q, xd, yd, n) = (o.q(), o.x_dim(), o.y_dim(), o.n());
    let mut s = DMatrix::zeros(n, n);
    s.view_mut((0, 0), (xd, xd)).copy_from(&o.s1());
    let s2 = coupling_block(o);
    s.view_mut((0, xd), (xd, yd)).copy_from(&s2);
    s.view_mut((xd, 0), (yd, xd)).copy_from(&s2.transpose());
    let mut s22 = o.h2();
    for k in 0..yd {
        s22[(k, k)] += 1.0 / (epsilon * epsilon);
    }
    s.view_mut((xd, xd), (yd, yd)).copy_from(&s22);
    let _ = q;
    Ok(s)
}

/// The slow-fast block of `S(eps)`: zeros over `h1` (it does not depend on
/// `eps` at all).
fn coupling_block(o: &Oocp) -> DMatrix<f64> {
    let (q, xd, yd) = (o.q(), o.x_dim(), o.y_dim());
    let mut s2 = DMatrix::zeros(xd, yd);
    s2.view_mut((xd - q, 0), (q, yd)).copy_from(&o.h1());
    s2
}

/// The weighted-inverse input map `(G + E)^-1 B'` in closed form:
/// `[[h3, h1], [0, eps^-2 I]]`. This is the matrix every optimal and
/// near-optimal law multiplies `P z + h` by.
pub fn control_front(o: &Oocp, epsilon: f64) -> DMatrix<f64> {
    let (q, xd, yd, r, n) = (o.q(), o.x_dim(), o.y_dim(), o.r(), o.n());
    let mut front = DMatrix::zeros(r, n);
    front.view_mut((0, 0), (q, xd)).copy_from(&o.h3());
    front.view_mut((0, xd), (q, yd)).copy_from(&o.h1());
    for k in 0..yd {
        front[(q + k, xd + k)] = 1.0 / (epsilon * epsilon);
    }
    front
}

/// Splits a full Riccati solution into the scaled blocks
/// `(p1, p2, p3) = (P_11, P_12 / eps, P_22 / eps)`.
pub fn extract_blocks(
    p: &DMatrix<f64>,
    o: &Oocp,
    epsilon: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (xd, yd) = (o.x_dim(), o.y_dim());
    let p1 = p.view((0, 0), (xd, xd)).into_owned();
    let p2 = p.view((0, xd), (xd, yd)).into_owned() / epsilon;
    let p3 = p.view((xd, xd), (yd, yd)).into_owned() / epsilon;
    (p1, p2, p3)
}

/// Inverse of [`extract_blocks`]: reassembles the full matrix
/// `[[p1, eps p2], [eps p2', eps p3]]`.
pub fn assemble_p(
    p1: &DMatrix<f64>,
    p2: &DMatrix<f64>,
    p3: &DMatrix<f64>,
    epsilon: f64,
) -> DMatrix<f64> {
    let (xd, yd) = (p1.nrows(), p3.nrows());
    let mut p = DMatrix::zeros(xd + yd, xd + yd);
    p.view_mut((0, 0), (xd, xd)).copy_from(p1);
    p.view_mut((0, xd), (xd, yd)).copy_from(&(p2 * epsilon));
    p.view_mut((xd, 0), (yd, xd))
        .copy_from(&(p2.transpose() * epsilon));
    p.view_mut((xd, xd), (yd, yd)).copy_from(&(p3 * epsilon));
    p
}

/// Residuals of the three scaled block equations. A triple `(p1, p2, p3)`
/// zeroing all three is exactly a solution of the full Riccati equation:
/// the returned matrices are the `(1,1)`, `(1,2)` and `(2,2)` blocks of
/// the assembled residual, identically, for every `eps`.
fn block_residuals(
    o: &Oocp,
    epsilon: f64,
    p1: &DMatrix<f64>,
    p2: &DMatrix<f64>,
    p3: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let e = epsilon;
    let (a1, a2, a3, a4) = (o.a1(), o.a2(), o.a3(), o.a4());
    let s1 = o.s1();
    let s2 = coupling_block(o);
    let h2 = o.h2();

    let r1 = p1 * &a1 + a1.transpose() * p1 + (p2 * &a3 + a3.transpose() * p2.transpose()) * e
        - p1 * &s1 * p1
        - (p2 * s2.transpose() * p1 + p1 * &s2 * p2.transpose()) * e
        - (p2 * &h2 * p2.transpose()) * (e * e)
        - p2 * p2.transpose()
        + o.d1();

    let r2 = p1 * &a2 + (p2 * &a4) * e + (a1.transpose() * p2) * e + (a3.transpose() * p3) * e
        - (p1 * &s1 * p2) * e
        - (p2 * s2.transpose() * p2) * (e * e)
        - (p1 * &s2 * p3) * e
        - (p2 * &h2 * p3) * (e * e)
        - p2 * p3;

    let r3 = (p2.transpose() * &a2 + a2.transpose() * p2 + p3 * &a4 + a4.transpose() * p3) * e
        - (p2.transpose() * &s1 * p2
            + p3 * s2.transpose() * p2
            + p2.transpose() * &s2 * p3
            + p3 * &h2 * p3)
            * (e * e)
        - p3 * p3
        + o.d2();

    (r1, r2, r3)
}

fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Direct path: solve the assembled `n x n` Riccati equation and split the
/// result. Accurate while the `eps^-2` block of `S(eps)` stays moderate.
fn solve_via_hamiltonian(
    o: &Oocp,
    epsilon: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let s = assemble_s(o, epsilon)?;
    let p = linalg::solve_are(o.a(), &s, &o.d_full())?;
    Ok(extract_blocks(&p, o, epsilon))
}

/// Small-`eps` path: Newton iteration on the scaled block equations,
/// seeded with the zero-order blocks. Every coefficient in the system is
/// `O(1)` in `eps`, and the seed error is `O(eps)`, so the quadratic
/// iteration typically converges in two to four steps.
fn solve_via_newton(o: &Oocp, epsilon: f64) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let rs = reduced::solve_reduced(o)?;
    let e = epsilon;
    let (xd, yd) = (o.x_dim(), o.y_dim());
    let (n1, n2, n3) = (xd * xd, xd * yd, yd * yd);
    let dim = n1 + n2 + n3;

    let (a1, a2, a3, a4) = (o.a1(), o.a2(), o.a3(), o.a4());
    let s1 = o.s1();
    let s2 = coupling_block(o);
    let h2 = o.h2();
    let ixd = DMatrix::<f64>::identity(xd, xd);
    let iyd = DMatrix::<f64>::identity(yd, yd);
    let kxy = linalg::commutation(xd, yd);
    let scale = 1.0 + o.d_full().norm();

    let mut p1 = rs.p10.clone();
    let mut p2 = rs.p20.clone();
    let mut p3 = rs.p30.clone();
    type Iterate = (f64, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);
    let mut best: Option<Iterate> = None;

    for _ in 0..50 {
        let (r1, r2, r3) = block_residuals(o, e, &p1, &p2, &p3);
        let res = r1.norm().max(r2.norm()).max(r3.norm());
        if best.as_ref().is_none_or(|(b, ..)| res < *b) {
            best = Some((res, p1.clone(), p2.clone(), p3.clone()));
        } else {
            break; // stalled: keep the best iterate seen
        }
        if res <= 1e-13 * scale {
            break;
        }

        // Jacobian of (r1, r2, r3) with respect to (vec p1, vec p2, vec p3),
        // assembled from the Kronecker forms of each bilinear term.
        let j11 = linalg::kron(&a1.transpose(), &ixd) + linalg::kron(&ixd, &a1.transpose())
            - linalg::kron(&(&s1 * &p1).transpose(), &ixd)
            - linalg::kron(&ixd, &(&p1 * &s1))
            - (linalg::kron(&(&p2 * s2.transpose()), &ixd)
                + linalg::kron(&ixd, &(&p2 * s2.transpose())))
                * e;

        let j12 =
            (linalg::kron(&a3.transpose(), &ixd) + linalg::kron(&ixd, &a3.transpose()) * &kxy) * e
                - (linalg::kron(&(s2.transpose() * &p1).transpose(), &ixd)
                    + linalg::kron(&ixd, &(&p1 * &s2)) * &kxy)
                    * e
                - (linalg::kron(&(&h2 * p2.transpose()).transpose(), &ixd)
                    + linalg::kron(&ixd, &(&p2 * &h2)) * &kxy)
                    * (e * e)
                - linalg::kron(&p2, &ixd)
                - linalg::kron(&ixd, &p2) * &kxy;

        let j21 = linalg::kron(&(&a2 - (&s1 * &p2 + &s2 * &p3) * e).transpose(), &ixd);

        let j22 = linalg::kron(&a4.transpose(), &ixd) * e + linalg::kron(&iyd, &a1.transpose()) * e
            - linalg::kron(&iyd, &(&p1 * &s1)) * e
            - (linalg::kron(&(s2.transpose() * &p2).transpose(), &ixd)
                + linalg::kron(&iyd, &(&p2 * s2.transpose())))
                * (e * e)
            - linalg::kron(&(&h2 * &p3).transpose(), &ixd) * (e * e)
            - linalg::kron(&p3.transpose(), &ixd);

        let j23 = linalg::kron(
            &iyd,
            &(a3.transpose() * e - (&p1 * &s2) * e - (&p2 * &h2) * (e * e) - &p2),
        );

        let j32 =
            (linalg::kron(&a2.transpose(), &iyd) * &kxy + linalg::kron(&iyd, &a2.transpose())) * e
                - (linalg::kron(&(&s1 * &p2).transpose(), &iyd) * &kxy
                    + linalg::kron(&iyd, &(p2.transpose() * &s1))
                    + linalg::kron(&iyd, &(&p3 * s2.transpose()))
                    + linalg::kron(&(&s2 * &p3).transpose(), &iyd) * &kxy)
                    * (e * e)
                - DMatrix::zeros(n3, n2);

        let j33 = (linalg::kron(&a4.transpose(), &iyd) + linalg::kron(&iyd, &a4.transpose())) * e
            - (linalg::kron(&(s2.transpose() * &p2).transpose(), &iyd)
                + linalg::kron(&iyd, &(p2.transpose() * &s2)))
                * (e * e)
            - (linalg::kron(&(&h2 * &p3).transpose(), &iyd) + linalg::kron(&iyd, &(&p3 * &h2)))
                * (e * e)
            - linalg::kron(&p3.transpose(), &iyd)
            - linalg::kron(&iyd, &p3);

        let mut jac = DMatrix::zeros(dim, dim);
        jac.view_mut((0, 0), (n1, n1)).copy_from(&j11);
        jac.view_mut((0, n1), (n1, n2)).copy_from(&j12);
        jac.view_mut((n1, 0), (n2, n1)).copy_from(&j21);
        jac.view_mut((n1, n1), (n2, n2)).copy_from(&j22);
        jac.view_mut((n1, n1 + n2), (n2, n3)).copy_from(&j23);
        jac.view_mut((n1 + n2, n1), (n3, n2)).copy_from(&j32);
        jac.view_mut((n1 + n2, n1 + n2), (n3, n3)).copy_from(&j33);

        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n1).copy_from(&(-vec_of(&r1)));
        rhs.rows_mut(n1, n2).copy_from(&(-vec_of(&r2)));
        rhs.rows_mut(n1 + n2, n3).copy_from(&(-vec_of(&r3)));

        let delta = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NoStabilizingSolution {
                detail: format!("block Newton system is singular at eps = {epsilon:.3e}"),
            })?;
        linalg::ensure_finite_vec("block Newton step", &delta)?;

        for i in 0..xd {
            for j in 0..xd {
                p1[(i, j)] += delta[j * xd + i];
            }
        }
        for i in 0..xd {
            for j in 0..yd {
                p2[(i, j)] += delta[n1 + j * xd + i];
            }
        }
        for i in 0..yd {
            for j in 0..yd {
                p3[(i, j)] += delta[n1 + n2 + j * yd + i];
            }
        }
        p1 = linalg::symmetrize(&p1);
        p3 = linalg::symmetrize(&p3);
    }

    let (res, p1, p2, p3) = best.expect("at least one Newton iterate is recorded");
    if res > 1e-8 * scale {
        return Err(Error::NoStabilizingSolution {
            detail: format!("block Newton stalled at residual {res:.3e} for eps = {epsilon:.3e}"),
        });
    }
    Ok((p1, p2, p3))
}

/// Solves the regularized problem at `eps`, returning the Riccati solution
/// (full and in scaled blocks), the feedforward, the scalar correction,
/// and the optimal value.
///
/// Fails with [`Error::EpsilonOutOfRange`] outside `0 < eps <= 1`, with
/// [`Error::SingularShift`] when a disturbance decay rate collides with a
/// closed-loop eigenvalue, and with [`Error::NoStabilizingSolution`] when
/// no accepted solution exists (residual or stability gates).
pub fn solve_pccp(o: &Oocp, epsilon: f64) -> Result<CheapSolution> {
    if !epsilon.is_finite() || epsilon <= 0.0 || epsilon > 1.0 {
        return Err(Error::EpsilonOutOfRange {
            value: epsilon,
            max: 1.0,
        });
    }
    let (p1, p2, p3) = if epsilon >= DIRECT_PATH_MIN_EPSILON {
        solve_via_hamiltonian(o, epsilon)?
    } else {
        solve_via_newton(o, epsilon)?
    };

    // Residual and stability gates, identical for both paths. The full
    // residual is assembled from the block residuals, which equal its
    // blocks exactly; this avoids forming P S P with the eps^-2 factor.
    let scale = o.d_full().norm().max(1.0);
    let (r1, r2, r3) = block_residuals(o, epsilon, &p1, &p2, &p3);
    let block_max = r1.norm().max(r2.norm()).max(r3.norm());
    if block_max > 1e-8 * (1.0 + o.d_full().norm()) {
        return Err(Error::NoStabilizingSolution {
            detail: format!(
                "block residual {block_max:.3e} exceeds tolerance at eps = {epsilon:.3e}"
            ),
        });
    }
    let full_res = (r1.norm_squared() + 2.0 * r2.norm_squared() + r3.norm_squared()).sqrt();
    if full_res > linalg::ARE_RESIDUAL_TOL * scale * 10.0 {
        return Err(Error::NoStabilizingSolution {
            detail: format!(
                "assembled residual {full_res:.3e} exceeds tolerance at eps = {epsilon:.3e}"
            ),
        });
    }

    let p = assemble_p(&p1, &p2, &p3, epsilon);
    let s_mat = assemble_s(o, epsilon)?;
    let acl = o.a() - &s_mat * &p;
    let spectrum = linalg::spectral_abscissa(&acl)?;
    if !spectrum.hurwitz {
        return Err(Error::NoStabilizingSolution {
            detail: format!(
                "closed loop has spectral abscissa {:.3e} at eps = {epsilon:.3e}",
                spectrum.abscissa
            ),
        });
    }

    // Feedforward: mode-by-mode resolvent solve, as in the reduced case
    // but against the full closed loop.
    let aclt = acl.transpose();
    let f = o.disturbance();
    let mut h_modes = Vec::with_capacity(f.modes().len());
    for mode in f.modes() {
        let rhs = &p * &mode.coef;
        let coef = linalg::solve_shifted_linear(&aclt, mode.rate, &rhs)?;
        h_modes.push(ExpMode {
            rate: mode.rate,
            coef,
        });
    }
    let h = ExpSignal::new(o.n(), h_modes)?;

    let mut terms = Vec::new();
    for hi in h.modes() {
        for fj in f.modes() {
            let rate = hi.rate + fj.rate;
            terms.push((rate, 2.0 * hi.coef.dot(&fj.coef) / rate));
        }
        for hj in h.modes() {
            let rate = hi.rate + hj.rate;
            terms.push((rate, -hi.coef.dot(&(&s_mat * &hj.coef)) / rate));
        }
    }
    let s = ExpSignal::scalar(terms)?;

    let z0 = o.z0();
    let jstar = z0.dot(&(&p * z0)) + 2.0 * h.eval(0.0).dot(z0) + s.eval_scalar(0.0);

    Ok(CheapSolution {
        epsilon,
        p,
        p1,
        p2,
        p3,
        acl,
        h,
        s,
        jstar,
    })
}

/// Optimal feedback of the regularized problem:
/// `u(z, t) = -(G + E)^-1 B' (P z + h(t))`, acting on the full state.
pub fn cheap_feedback(sol: &CheapSolution, o: &Oocp) -> Result<AffineLaw> {
    let front = control_front(o, sol.epsilon);
    let gain = -(&front * &sol.p);
    let ff = sol.h.map(&(-front))?;
    AffineLaw::new(gain, ff, DVector::zeros(o.r()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tracking_oocp() -> Oocp {
        Oocp::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            vec![],
            ExpSignal::new(
                2,
                vec![ExpMode {
                    rate: 1.0,
                    coef: DVector::from_vec(vec![4.0, 2.0]),
                }],
            )
            .unwrap(),
            DVector::from_vec(vec![2.0, 1.0]),
        )
        .unwrap()
    }

    fn weighted_oocp() -> Oocp {
        Oocp::new(
            DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.2, 0.1, -2.0, 0.3, 0.4, -0.2, -1.5]),
            DMatrix::from_row_slice(1, 2, &[0.3, -0.4]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]),
            DMatrix::from_element(1, 1, 1.5),
            vec![2.0],
            ExpSignal::new(
                3,
                vec![
                    ExpMode {
                        rate: 1.0,
                        coef: DVector::from_vec(vec![0.5, -0.3, 0.8]),
                    },
                    ExpMode {
                        rate: 2.5,
                        coef: DVector::from_vec(vec![1.0, 0.0, -0.5]),
                    },
                ],
            )
            .unwrap(),
            DVector::from_vec(vec![1.0, -1.0, 0.5]),
        )
        .unwrap()
    }

    /// The tracking instance admits a fully explicit Riccati solution:
    /// P_11 = sqrt(2) sqrt(1 + 2 sqrt(2) eps), P_12 = sqrt(2) eps,
    /// P_22 = eps sqrt(1 + 2 sqrt(2) eps). Both solver paths must hit it.
    #[test]
    fn tracking_matches_exact_closed_form() {
        let o = tracking_oocp();
        let rt2 = 2.0f64.sqrt();
        for &eps in &[0.2, 0.1, 0.05, 0.025, 5e-3, 1e-3] {
            let sol = solve_pccp(&o, eps).unwrap();
            let root = (1.0 + 2.0 * rt2 * eps).sqrt();
            assert_abs_diff_eq!(sol.p[(0, 0)], rt2 * root, epsilon = 1e-12);
            assert_abs_diff_eq!(sol.p[(0, 1)], rt2 * eps, epsilon = 1e-12);
            assert_abs_diff_eq!(sol.p[(1, 1)], eps * root, epsilon = 1e-12);
            // scaled blocks divide the eps out
            assert_abs_diff_eq!(sol.p1[(0, 0)], rt2 * root, epsilon = 1e-12);
            assert_abs_diff_eq!(sol.p2[(0, 0)], rt2, epsilon = 1e-10);
            assert_abs_diff_eq!(sol.p3[(0, 0)], root, epsilon = 1e-10);
        }
    }

    /// Frozen values from an independent solver run (different algorithm,
    /// different code base) on the tracking instance.
    #[test]
    fn tracking_matches_independent_oracle() {
        let o = tracking_oocp();
        let cases = [
            // (eps, h(0), s(0), Jstar)
            (
                0.2,
                [3.0660217496393893, 0.647_417_862_902_636_9],
                8.319_549_109_295_112,
                30.338369323691566,
            ),
            (
                0.1,
                [2.692_209_852_938_298, 0.28268260223599534],
                7.338_731_935_879_485,
                25.758987463451973,
            ),
            (
                0.05,
                [2.5136776837148536, 0.12980271898706133],
                6.944_567_001_546_735,
                23.638_776_188_265_71,
            ),
            (
                0.025,
                [2.4272606172656372, 0.061816839494844004],
                6.775_618_831_947_193,
                22.629023574887004,
            ),
            (
                5e-3,
                [2.359_767_291_404_89, 0.011847887591954246],
                6.655_316_132_971_802,
                21.848114395621835,
            ),
            (
                1e-3,
                [2.3464615966661224, 0.0023484539531002093],
                6.6329253096546905,
                21.694975472313867,
            ),
        ];
        for (eps, h0, s0, jstar) in cases {
            let sol = solve_pccp(&o, eps).unwrap();
            let h = sol.h.eval(0.0);
            assert_abs_diff_eq!(h[0], h0[0], epsilon = 1e-9);
            assert_abs_diff_eq!(h[1], h0[1], epsilon = 1e-9);
            assert_abs_diff_eq!(sol.s.eval_scalar(0.0), s0, epsilon = 1e-9);
            assert_abs_diff_eq!(sol.jstar, jstar, epsilon = 3e-9);
        }
    }

    /// Frozen values from an independent solver run on the weighted
    /// fixture, one per solver path.
    #[test]
    fn weighted_fixture_matches_independent_oracle() {
        let o = weighted_oocp();

        // direct path
        let sol = solve_pccp(&o, 0.3).unwrap();
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                0.517_202_192_310_493_5,
                0.154098205584842,
                0.048_532_738_479_290_11,
                0.154098205584842,
                0.503_446_448_172_895,
                0.027077321378431517,
                0.048_532_738_479_290_11,
                0.027077321378431517,
                0.26018044559474757,
            ],
        );
        assert!((&sol.p - &expected).norm() < 1e-10);
        let h = sol.h.eval(0.0);
        assert_abs_diff_eq!(h[0], 0.26441228490746205, epsilon = 1e-10);
        assert_abs_diff_eq!(h[1], 0.042_121_017_426_343_94, epsilon = 1e-10);
        assert_abs_diff_eq!(h[2], 0.040348048098171135, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.s.eval_scalar(0.0), 0.233_863_981_419_882_7, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.jstar, 1.5177473222935398, epsilon = 1e-9);

        // Newton path
        let sol = solve_pccp(&o, 5e-3).unwrap();
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                0.502_387_993_248_137,
                0.1489235609816103,
                0.000_600_748_880_350_196_8,
                0.1489235609816103,
                0.500_591_393_823_391_6,
                0.000_726_583_217_950_949_9,
                0.000_600_748_880_350_196_8,
                0.000_726_583_217_950_949_9,
                0.006_087_716_404_322_569,
            ],
        );
        assert!((&sol.p - &expected).norm() < 1e-10);
        assert_abs_diff_eq!(sol.jstar, 1.3239920647047616, epsilon = 1e-9);
    }

    /// At the switch point both representations solve the same equation;
    /// force each path and compare.
    #[test]
    fn solver_paths_agree_at_the_switch_point() {
        let o = weighted_oocp();
        let eps = DIRECT_PATH_MIN_EPSILON;
        let (a1, a2, a3) = solve_via_hamiltonian(&o, eps).unwrap();
        let (b1, b2, b3) = solve_via_newton(&o, eps).unwrap();
        assert!((&a1 - &b1).norm() < 1e-9);
        assert!((&a2 - &b2).norm() < 1e-9);
        assert!((&a3 - &b3).norm() < 1e-9);
    }

    #[test]
    fn energy_matrix_matches_direct_inverse() {
        for o in [tracking_oocp(), weighted_oocp()] {
            for &eps in &[1.0, 0.3, 0.05] {
                let s = assemble_s(&o, eps).unwrap();
                let ge_inv = linalg::spd_inv(&o.g_regularized(eps)).unwrap();
                let direct = o.b() * &ge_inv * o.b().transpose();
                assert!((&s - &direct).norm() <= 1e-10 * direct.norm().max(1.0));

                let front = control_front(&o, eps);
                let front_direct = &ge_inv * o.b().transpose();
                assert!((&front - &front_direct).norm() <= 1e-10 * front_direct.norm().max(1.0));
            }
        }
        assert!(assemble_s(&tracking_oocp(), 0.0).is_err());
    }

    #[test]
    fn block_roundtrip_is_exact() {
        let o = weighted_oocp();
        let sol = solve_pccp(&o, 0.17).unwrap();
        let (p1, p2, p3) = extract_blocks(&sol.p, &o, 0.17);
        let back = assemble_p(&p1, &p2, &p3, 0.17);
        assert!((&back - &sol.p).norm() <= 1e-15 * sol.p.norm());
    }

    #[test]
    fn residuals_stability_and_limits_across_epsilon() {
        let o = weighted_oocp();
        let rs = reduced::solve_reduced(&o).unwrap();
        let mut last_jstar = f64::INFINITY;
        for &eps in &[1.0, 0.3, 0.1, 0.03, 0.01, 3e-3, 1e-3, 3e-4, 1e-6] {
            let sol = solve_pccp(&o, eps).unwrap();
            // optimal values decrease toward the singular infimum
            assert!(sol.jstar < last_jstar, "jstar not decreasing at eps={eps}");
            assert!(
                sol.jstar > rs.jbar - 1e-9,
                "jstar below the infimum at eps={eps}"
            );
            last_jstar = sol.jstar;
            // scaled blocks converge to the zero-order blocks at rate eps
            assert!((&sol.p1 - &rs.p10).norm() <= 3.0 * eps * (rs.p10.norm() + 1.0));
            assert!((&sol.p2 - &rs.p20).norm() <= 3.0 * eps * (rs.p20.norm() + 1.0));
            assert!((&sol.p3 - &rs.p30).norm() <= 3.0 * eps * (rs.p30.norm() + 1.0));
        }
        // and the gap to the infimum itself shrinks linearly
        let gap = |eps: f64| solve_pccp(&o, eps).unwrap().jstar - rs.jbar;
        let ratio = gap(0.1) / gap(0.025);
        assert!(ratio > 2.0 && ratio < 8.0, "gap ratio {ratio} not O(eps)");
    }

    #[test]
    fn feedforward_and_correction_solve_their_odes() {
        let o = weighted_oocp();
        for &eps in &[0.05, 2e-3] {
            let sol = solve_pccp(&o, eps).unwrap();
            let s_mat = assemble_s(&o, eps).unwrap();
            let f = o.disturbance();
            let dh = sol.h.derivative();
            let ds = sol.s.derivative();
            for k in 0..=10 {
                let t = 0.4 * k as f64;
                // dh/dt = -acl' h - P f
                let lhs = dh.eval(t);
                let rhs = -sol.acl.transpose() * sol.h.eval(t) - &sol.p * f.eval(t);
                assert!((lhs - rhs).norm() < 1e-8, "h residual at t={t}, eps={eps}");
                // ds/dt = h' S h - 2 h' f
                let h = sol.h.eval(t);
                let want = h.dot(&(&s_mat * &h)) - 2.0 * h.dot(&f.eval(t));
                assert!(
                    (ds.eval_scalar(t) - want).abs() < 1e-8,
                    "s residual at t={t}, eps={eps}"
                );
            }
        }
    }

    #[test]
    fn zero_disturbance_gives_pure_quadratic_value() {
        let o = Oocp::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            vec![],
            ExpSignal::zero(2),
            DVector::from_vec(vec![2.0, 1.0]),
        )
        .unwrap();
        let rt2 = 2.0f64.sqrt();
        for &eps in &[0.25, 4e-3] {
            let sol = solve_pccp(&o, eps).unwrap();
            assert!(sol.h.is_zero() && sol.s.is_zero());
            let root = (1.0 + 2.0 * rt2 * eps).sqrt();
            let expect = 4.0 * rt2 * root + 4.0 * rt2 * eps + eps * root;
            assert_abs_diff_eq!(sol.jstar, expect, epsilon = 1e-10);
        }
    }

    /// A problem with no slow block at all (n = r, q = 0): the scalar
    /// Riccati equation 2 a p - p^2 / eps^2 + d = 0 has the explicit root
    /// p = eps^2 a + eps sqrt(eps^2 a^2 + d), and the singular infimum is
    /// zero.
    #[test]
    fn pure_fast_instance() {
        let o = Oocp::new(
            DMatrix::from_element(1, 1, 0.3),
            DMatrix::zeros(1, 0),
            DMatrix::zeros(0, 0),
            DMatrix::from_element(1, 1, 2.0),
            vec![],
            ExpSignal::zero(1),
            DVector::from_vec(vec![-1.5]),
        )
        .unwrap();
        for &eps in &[0.4, 5e-3] {
            let sol = solve_pccp(&o, eps).unwrap();
            let a = 0.3;
            let expect = eps * eps * a + eps * (eps * eps * a * a + 2.0).sqrt();
            assert_abs_diff_eq!(sol.p[(0, 0)], expect, epsilon = 1e-12);
            assert_abs_diff_eq!(sol.jstar, expect * 2.25, epsilon = 1e-11);
        }
        let rs = reduced::solve_reduced(&o).unwrap();
        assert_abs_diff_eq!(rs.jbar, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rs.p30[(0, 0)], 2.0f64.sqrt(), epsilon = 1e-14);
        assert!(rs.alpha.is_infinite());
    }

    /// A disturbance decaying exactly at the closed-loop rate is harmless
    /// for the feedforward: its resolvent shift is `gamma I - acl'`, whose
    /// eigenvalues are `gamma + |Re lambda|` (a trajectory in resonance is
    /// a different story, handled by the simulation module). Everything
    /// here is hand-computable: p = eps sqrt(d) = 0.5, acl = -2,
    /// h-coefficient = p z / (gamma - acl) = 1/8, s(0) = 3/64.
    #[test]
    fn rate_collision_with_closed_loop_is_well_posed() {
        // n = r = 1, q = 0, a = 0, d = 1: p = eps, acl = -1/eps. With
        // eps = 0.5 the closed-loop rate is exactly the disturbance rate 2.
        let o = Oocp::new(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::zeros(1, 0),
            DMatrix::zeros(0, 0),
            DMatrix::from_element(1, 1, 1.0),
            vec![],
            ExpSignal::new(
                1,
                vec![ExpMode {
                    rate: 2.0,
                    coef: DVector::from_vec(vec![1.0]),
                }],
            )
            .unwrap(),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let sol = solve_pccp(&o, 0.5).unwrap();
        assert_abs_diff_eq!(sol.p[(0, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.acl[(0, 0)], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.h.eval(0.0)[0], 0.125, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.s.eval_scalar(0.0), 0.046875, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.jstar, 0.796875, epsilon = 1e-12);
    }

    #[test]
    fn rejects_out_of_range_epsilon() {
        let o = tracking_oocp();
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                solve_pccp(&o, bad),
                Err(Error::EpsilonOutOfRange { .. })
            ));
        }
    }

    /// The optimal law of the regularized problem, built from the closed
    /// forms, against the direct matrix route.
    #[test]
    fn cheap_feedback_matches_direct_route() {
        let o = weighted_oocp();
        let sol = solve_pccp(&o, 0.12).unwrap();
        let law = cheap_feedback(&sol, &o).unwrap();
        let ge_inv = linalg::spd_inv(&o.g_regularized(0.12)).unwrap();
        let front = &ge_inv * o.b().transpose();
        let gain_ref = -(&front * &sol.p);
        assert!((law.gain() - &gain_ref).norm() <= 1e-10 * gain_ref.norm().max(1.0));
        for &t in &[0.0, 0.7, 3.0] {
            let ff_ref = -(&front * sol.h.eval(t));
            assert!((law.feedforward().eval(t) - ff_ref).norm() < 1e-12);
        }
    }
}
