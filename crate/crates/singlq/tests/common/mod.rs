//! Shared fixtures for the integration suites: seeded random problem
//! instances that pass the full assumption chain, in both coordinate
//! systems.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use singlq::cheap::solve_pccp;
use singlq::problem::{validate_raw, validate_reduced, ExpMode, ExpSignal, Oocp, RawProblem};
use singlq::transform::{transform_problem, TransformData};

/// A randomized problem that passed every standing assumption, held in
/// both coordinate systems together with the transform between them.
pub struct Instance {
    pub raw: RawProblem,
    pub oocp: Oocp,
    pub transform: TransformData,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn spectral_abscissa_of(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Draws instances until one passes the raw assumptions, the transform,
/// and the reduced assumptions, and is solvable across the standard sweep
/// range. With `hurwitz` the open-loop dynamics matrix is shifted stable
/// (useful when an iteration needs a trivially stabilizing initial point).
pub fn random_instance(rng: &mut ChaCha8Rng, hurwitz: bool) -> Instance {
    loop {
        let n = rng.gen_range(2..=6usize);
        let r = rng.gen_range(1..=n.min(3));
        let q = rng.gen_range(0..=(r - 1).min(2));

        let mut a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        if hurwitz {
            let margin = rng.gen_range(0.3..0.8);
            let shift = spectral_abscissa_of(&a) + margin;
            for i in 0..n {
                a[(i, i)] -= shift;
            }
        }
        let b = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-1.0..1.0));
        let m = DMatrix::from_fn(n + 1, n, |_, _| rng.gen_range(-1.0..1.0));
        let d = m.transpose() * &m;
        let g: Vec<f64> = (0..q).map(|_| rng.gen_range(0.5..2.0)).collect();
        let n_modes = rng.gen_range(1..=2usize);
        let modes: Vec<ExpMode> = (0..n_modes)
            .map(|_| ExpMode {
                rate: rng.gen_range(0.5..2.5),
                coef: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            })
            .collect();
        let Ok(disturbance) = ExpSignal::new(n, modes) else {
            continue;
        };
        let z0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));

        let Ok(raw) = RawProblem::new(a, b, d, g, disturbance, z0) else {
            continue;
        };
        if !validate_raw(&raw).all_pass() {
            continue;
        }
        let Ok((oocp, transform)) = transform_problem(&raw) else {
            continue;
        };
        if !validate_reduced(&oocp).all_pass() {
            continue;
        }
        // usable across the standard sweep range: the regularized solve
        // must accept both the largest and the smallest epsilon
        if solve_pccp(&oocp, 0.2).is_err() || solve_pccp(&oocp, 0.025).is_err() {
            continue;
        }
        return Instance {
            raw,
            oocp,
            transform,
        };
    }
}

/// The built-in double-integrator tracking problem in deviation
/// coordinates (already in transformed form; the transform is trivial).
pub fn tracking_oocp() -> Oocp {
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
