//! The decoupling change of state coordinates.
//!
//! A [`crate::problem::RawProblem`] generally has a dense state weight and
//! an arbitrary full-rank input matrix, which hides the structure the
//! asymptotic analysis needs. This module builds the invertible matrix `T`
//! whose columns are a carefully chosen complement basis followed by the
//! unweighted input columns; in the coordinates `Z = T z`, the state weight
//! becomes block diagonal and the input matrix becomes a fixed 0/1 pattern
//! plus one coupling block. The construction hinges on one decoupling
//! identity: the complement part `L` is built so that `L' D B2 = 0`, which
//! is exactly what kills the off-diagonal weight blocks.
//!
//! Feedback laws designed in the transformed coordinates are carried back
//! with [`lift_control`]; costs are invariant under the change of
//! coordinates, so a law and its lift produce the same closed-loop cost.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{Oocp, RawProblem};
use crate::sim::AffineLaw;

/// Condition-number estimate above which the transform is rejected as
/// numerically singular (near-violation of the rank assumptions).
const COND_MAX: f64 = 1e12;

/// The change-of-coordinates data: `T = (L, B2)` maps transformed states
/// to raw states, `Z = T z`.
#[derive(Debug, Clone)]
pub struct TransformData {
    /// Orthonormal complement of the full input range, `n x (n - r)`.
    pub bc: DMatrix<f64>,
    /// Coupling matrix `H` of shape `(r - q) x (n - r + q)`.
    pub hcal: DMatrix<f64>,
    /// Decoupled complement `L = (Bc, B1) - B2 H`, `n x (n - r + q)`.
    pub lcal: DMatrix<f64>,
    /// The transform itself, `T = (L, B2)`.
    pub t: DMatrix<f64>,
    /// Its inverse, accurate to `||T Tinv - I|| <= 1e-10`.
    pub tinv: DMatrix<f64>,
}

/// Builds the transform for a raw problem: complement basis of the input
/// range, coupling matrix `H = (B2' D B2)^-1 B2' D (Bc, B1)`, decoupled
/// complement `L`, and `T = (L, B2)` with its inverse.
pub fn build_transform(p: &RawProblem) -> Result<TransformData> {
    let n = p.n();
    let r = p.r();
    let q = p.q();
    let b1 = p.b_weighted();
    let b2 = p.b_unweighted();

    let bc = linalg::complement_basis(p.b())?;

    // btilde_c = (Bc, B1): the complement extended by the weighted input
    // columns; its span together with col(B2) is the whole space.
    let mut btilde_c = DMatrix::zeros(n, n - r + q);
    btilde_c.view_mut((0, 0), (n, n - r)).copy_from(&bc);
    btilde_c.view_mut((0, n - r), (n, q)).copy_from(&b1);

    let fast = b2.transpose() * p.d() * &b2;
    let fast = linalg::require_symmetric("fast weight block", &fast)?;
    let fast_lu = fast.clone().lu();
    let hcal = fast_lu
        .solve(&(b2.transpose() * p.d() * &btilde_c))
        .ok_or_else(|| Error::SingularTransform {
            detail: "fast weight block B2' D B2 is singular".into(),
        })?;

    let lcal = &btilde_c - &b2 * &hcal;

    let mut t = DMatrix::zeros(n, n);
    t.view_mut((0, 0), (n, n - r + q)).copy_from(&lcal);
    t.view_mut((0, n - r + q), (n, r - q)).copy_from(&b2);

    let t_lu = t.clone().lu();
    let tinv = t_lu.try_inverse().ok_or_else(|| Error::SingularTransform {
        detail: "transform matrix (L, B2) is singular".into(),
    })?;
    let cond = linalg::norm1(&t) * linalg::norm1(&tinv);
    if !cond.is_finite() || cond > COND_MAX {
        return Err(Error::SingularTransform {
            detail: format!("transform condition estimate {cond:.3e} exceeds {COND_MAX:.1e}"),
        });
    }
    let defect = (&t * &tinv - DMatrix::identity(n, n)).norm();
    if defect > 1e-10 {
        return Err(Error::SingularTransform {
            detail: format!("transform inverse defect {defect:.3e} exceeds 1e-10"),
        });
    }

    Ok(TransformData {
        bc,
        hcal,
        lcal,
        t,
        tinv,
    })
}

/// Transforms a raw problem into its block-decoupled form.
///
/// The dynamics matrix becomes `Tinv A T`, the disturbance and initial
/// state are mapped through `Tinv`, and the state weight `T' D T` comes out
/// block diagonal by construction — the off-diagonal blocks are verified to
/// vanish (up to `1e-9` relative) and then zeroed exactly, so downstream
/// block algebra never sees the round-off. The transformed input matrix is
/// likewise verified against its analytic 0/1-plus-coupling structure and
/// then replaced by it; a deviation beyond tolerance means the input data
/// violates the standing assumptions and is reported, not absorbed.
pub fn transform_problem(p: &RawProblem) -> Result<(Oocp, TransformData)> {
    let td = build_transform(p)?;
    let n = p.n();
    let r = p.r();
    let q = p.q();
    let xd = n - r + q;
    let yd = r - q;

    let a = &td.tinv * p.a() * &td.t;

    // The transformed input matrix has an exact analytic form; computing it
    // numerically serves only as a consistency check.
    let b_num = &td.tinv * p.b();
    let mut b_expect = DMatrix::zeros(n, r);
    for k in 0..q {
        b_expect[(xd - q + k, k)] = 1.0;
    }
    b_expect
        .view_mut((xd, 0), (yd, q))
        .copy_from(&td.hcal.columns(xd - q, q).into_owned());
    for k in 0..yd {
        b_expect[(xd + k, q + k)] = 1.0;
    }
    let b_defect = (&b_num - &b_expect).norm() / b_expect.norm().max(1.0);
    if b_defect > 1e-9 {
        return Err(Error::StructureViolation {
            detail: format!(
                "transformed input matrix deviates from its analytic structure by {b_defect:.3e}"
            ),
        });
    }

    let d_full = td.t.transpose() * p.d() * &td.t;
    let off = d_full.view((0, xd), (xd, yd)).norm();
    let scale = d_full.norm().max(1.0);
    if off > 1e-9 * scale {
        return Err(Error::StructureViolation {
            detail: format!("state weight off-diagonal block has norm {off:.3e} after decoupling"),
        });
    }
    let d1 = d_full.view((0, 0), (xd, xd)).into_owned();
    let d2 = d_full.view((xd, xd), (yd, yd)).into_owned();

    let f = p.disturbance().map(&td.tinv)?;
    let z0 = &td.tinv * p.z0();

    let oocp = Oocp::new(a, td.hcal.clone(), d1, d2, p.g().to_vec(), f, z0)?;
    Ok((oocp, td))
}

/// Carries a feedback law designed in transformed coordinates back to the
/// raw coordinates: the lifted law is `U(Z, t) = u(Tinv Z, t)`, again
/// affine. Costs are invariant under this lift, so simulating either law
/// in its own coordinates gives the same value.
pub fn lift_control(law: &AffineLaw, td: &TransformData) -> AffineLaw {
    law.compose_with(&td.tinv)
}
