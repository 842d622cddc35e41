//! Zero-order (limit) solver and the minimizing feedback sequences.
//!
//! As the regularization weight `eps` tends to zero, the exact solution of
//! the regularized problem converges to objects of much smaller size: a
//! Riccati solution `P10` on the slow block alone, two coupling blocks
//! `P20`, `P30` given in closed form, a slow feedforward pair `h10`, `h20`,
//! a scalar correction `s0(t)`, and the limit value `Jbar` — the infimum of
//! the singular problem. This module computes those objects directly
//! (no small-`eps` solve involved) and assembles from them the two
//! families of feedback laws whose closed-loop costs converge to `Jbar` at
//! rate `O(eps)`. The first family is the exact optimum of the regularized
//! problem with its Riccati solution replaced by the zero-order blocks;
//! the second also freezes the weighted control rows at their limit form.
//!
//! The reduced problem can be read as an LQ problem on the slow state in
//! which the fast state acts as an additional control channel weighted by
//! `D2`: its input matrix is [`Oocp::b_bar`] and its control weight is
//! [`Oocp::theta`]. That reading gives the energy matrix `S0` a second,
//! independently computed form, and the solver cross-checks the two.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{ExpSignal, Oocp};
use crate::sim::AffineLaw;

/// Zero-order solution: the limits of the regularized Riccati blocks, the
/// slow feedforward, the scalar correction, and the limit value `Jbar`.
#[derive(Debug, Clone)]
pub struct ReducedSolution {
    /// Stabilizing solution of the reduced Riccati equation on the slow
    /// block, symmetric positive semidefinite.
    pub p10: DMatrix<f64>,
    /// Upper coupling block limit, `p10 a2 d2^{-1/2}`.
    pub p20: DMatrix<f64>,
    /// Fast block limit: the symmetric positive definite square root of
    /// `D2`.
    pub p30: DMatrix<f64>,
    /// Effective control-energy matrix of the slow subproblem,
    /// `s1 + a2 d2^-1 a2'` (equivalently `b_bar theta^-1 b_bar'`).
    pub s0: DMatrix<f64>,
    /// Reduced input matrix, copied from the problem for convenience.
    pub b_bar: DMatrix<f64>,
    /// Reduced control weight, copied from the problem for convenience.
    pub theta: DMatrix<f64>,
    /// Closed-loop slow dynamics `a1 - s0 p10`; Hurwitz on every accepted
    /// solve.
    pub acl0: DMatrix<f64>,
    /// Slow feedforward limit (dimension `x_dim`).
    pub h10: ExpSignal,
    /// Fast feedforward limit `d2^{-1/2} a2' h10` (dimension `y_dim`).
    pub h20: ExpSignal,
    /// Scalar value correction `s0(t)` with `s0(+inf) = 0`.
    pub s0_signal: ExpSignal,
    /// Limit of the optimal values: `x0' p10 x0 + 2 h10(0)' x0 + s0(0)`,
    /// the infimum of the singular problem.
    pub jbar: f64,
    /// Decay margin of `acl0` (99% of its spectral-abscissa magnitude).
    pub alpha: f64,
    /// Decay rate `min(alpha, slowest disturbance rate)` entering every
    /// weighted convergence bound.
    pub mu: f64,
}

/// Computes the zero-order solution of a transformed problem.
///
/// Expects a problem that passes the assumption checks of
/// [`crate::problem::validate_raw`] and [`crate::problem::validate_reduced`];
/// on problems violating them this fails with [`Error::NoStabilizingSolution`]
/// (or a propagated numerical error) rather than returning a degraded
/// result.
pub fn solve_reduced(o: &Oocp) -> Result<ReducedSolution> {
    let d2_inv = linalg::spd_inv(o.d2())?;
    let d2_inv_sqrt = linalg::spd_inv_sqrt(o.d2())?;
    let p30 = linalg::spd_sqrt(o.d2())?;
    let a2 = o.a2();

    // Two independent forms of the reduced energy matrix must agree: the
    // block closed form and the reading of the fast state as a control.
    let s0 = {
        let direct = o.s1() + &a2 * &d2_inv * a2.transpose();
        let via_theta = o.b_bar() * o.theta_inv()? * o.b_bar().transpose();
        let gap = (&direct - &via_theta).norm();
        if gap > 1e-10 * direct.norm().max(1.0) {
            return Err(Error::StructureViolation {
                detail: format!(
                    "the two closed forms of the reduced energy matrix disagree by {gap:.3e}"
                ),
            });
        }
        (&direct + direct.transpose()) * 0.5
    };

    let p10 = linalg::solve_are(&o.a1(), &s0, o.d1())?;
    let acl0 = o.a1() - &s0 * &p10;
    let spectrum = linalg::spectral_abscissa(&acl0)?;
    let alpha = if spectrum.abscissa.is_finite() {
        -0.99 * spectrum.abscissa
    } else {
        f64::INFINITY
    };

    let p20 = &p10 * &a2 * &d2_inv_sqrt;

    // Feedforward: each disturbance mode maps through the resolvent of the
    // closed-loop transpose, which solves the terminal-value problem
    // dh10/dt = -acl0' h10 - p10 f1 with h10(+inf) = 0 in closed form.
    let f1 = o.f1();
    let acl0_t = acl0.transpose();
    let mut h10_modes = Vec::with_capacity(f1.modes().len());
    for mode in f1.modes() {
        let rhs = &p10 * &mode.coef;
        let coef = linalg::solve_shifted_linear(&acl0_t, mode.rate, &rhs)?;
        h10_modes.push(crate::problem::ExpMode {
            rate: mode.rate,
            coef,
        });
    }
    let h10 = ExpSignal::new(o.x_dim(), h10_modes)?;
    let h20 = h10.map(&(&d2_inv_sqrt * a2.transpose()))?;

    // Scalar correction: integrate 2 h10' f1 - h10' s0 h10 from t to
    // infinity; products of exponentials stay exponentials, so the result
    // is exact.
    let mut terms = Vec::new();
    for hi in h10.modes() {
        for fj in f1.modes() {
            let rate = hi.rate + fj.rate;
            terms.push((rate, 2.0 * hi.coef.dot(&fj.coef) / rate));
        }
        for hj in h10.modes() {
            let rate = hi.rate + hj.rate;
            terms.push((rate, -hi.coef.dot(&(&s0 * &hj.coef)) / rate));
        }
    }
    let s0_signal = ExpSignal::scalar(terms)?;

    let x0 = o.x0();
    let jbar = x0.dot(&(&p10 * &x0)) + 2.0 * h10.eval(0.0).dot(&x0) + s0_signal.eval_scalar(0.0);

    let mu = alpha.min(o.disturbance().min_rate());

    Ok(ReducedSolution {
        p10,
        p20,
        p30,
        s0,
        b_bar: o.b_bar(),
        theta: o.theta(),
        acl0,
        h10,
        h20,
        s0_signal,
        jbar,
        alpha,
        mu,
    })
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !epsilon.is_finite() || epsilon <= 0.0 || epsilon > 1.0 {
        return Err(Error::EpsilonOutOfRange {
            value: epsilon,
            max: 1.0,
        });
    }
    Ok(())
}

/// Optimal feedback of the reduced problem, acting on the slow state: the
/// law `(x, t) -> -theta^-1 b_bar' (p10 x + h10(t))` of dimension `r`. Its
/// first `q` rows are the limit of the weighted control rows; the last
/// `r - q` rows give the fast state the slow subproblem would choose,
/// `-d2^-1 a2' (p10 x + h10(t))`.
pub fn reduced_feedback(rs: &ReducedSolution, o: &Oocp) -> Result<AffineLaw> {
    let front = o.theta_inv()? * rs.b_bar.transpose();
    let gain = -(&front * &rs.p10);
    let ff = rs.h10.map(&(-front))?;
    AffineLaw::new(gain, ff, DVector::zeros(o.r()))
}

/// First minimizing feedback `u_{eps,1}`: the exact optimum of the
/// regularized problem with its Riccati blocks and feedforward replaced by
/// their zero-order limits. Weighted rows:
/// `-(k1 x + eps k2 y + h3 h10 + eps h1 h20)` with
/// `k1 = h3 p10 + eps h1 p20'`, `k2 = h3 p20 + h1 p30`; unweighted rows:
/// `-(p20' x + p30 y + h20) / eps`.
pub fn minimizing_feedback_1(rs: &ReducedSolution, o: &Oocp, epsilon: f64) -> Result<AffineLaw> {
    check_epsilon(epsilon)?;
    let (q, xd, yd, r, n) = (o.q(), o.x_dim(), o.y_dim(), o.r(), o.n());
    let h3 = o.h3();
    let h1 = o.h1();
    let k1 = &h3 * &rs.p10 + (&h1 * rs.p20.transpose()) * epsilon;
    let k2 = &h3 * &rs.p20 + &h1 * &rs.p30;

    let mut gain = DMatrix::zeros(r, n);
    gain.view_mut((0, 0), (q, xd)).copy_from(&(-&k1));
    gain.view_mut((0, xd), (q, yd))
        .copy_from(&(&k2 * (-epsilon)));
    gain.view_mut((q, 0), (yd, xd))
        .copy_from(&(rs.p20.transpose() * (-1.0 / epsilon)));
    gain.view_mut((q, xd), (yd, yd))
        .copy_from(&(&rs.p30 * (-1.0 / epsilon)));

    let upper = rs.h10.map(&(-h3))?.add(&rs.h20.map(&(h1 * (-epsilon)))?)?;
    let lower = rs.h20.scale(-1.0 / epsilon);
    let ff = ExpSignal::vstack(&upper, &lower);
    AffineLaw::new(gain, ff, DVector::zeros(r))
}

/// Second minimizing feedback `u_{eps,2}`: identical to
/// [`minimizing_feedback_1`] in the unweighted rows, but with the weighted
/// rows frozen at their `eps -> 0` limit `-h3 (p10 x + h10(t))`, which
/// depends on the slow state only.
pub fn minimizing_feedback_2(rs: &ReducedSolution, o: &Oocp, epsilon: f64) -> Result<AffineLaw> {
    check_epsilon(epsilon)?;
    let (q, xd, yd, r, n) = (o.q(), o.x_dim(), o.y_dim(), o.r(), o.n());
    let h3 = o.h3();

    let mut gain = DMatrix::zeros(r, n);
    gain.view_mut((0, 0), (q, xd))
        .copy_from(&(-(&h3 * &rs.p10)));
    gain.view_mut((q, 0), (yd, xd))
        .copy_from(&(rs.p20.transpose() * (-1.0 / epsilon)));
    gain.view_mut((q, xd), (yd, yd))
        .copy_from(&(&rs.p30 * (-1.0 / epsilon)));

    let upper = rs.h10.map(&(-h3))?;
    let lower = rs.h20.scale(-1.0 / epsilon);
    let ff = ExpSignal::vstack(&upper, &lower);
    AffineLaw::new(gain, ff, DVector::zeros(r))
}
