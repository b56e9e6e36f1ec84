// SPDX-License-Identifier: Apache-2.0

use nalgebra::{DMatrix, DVector};

use ipc_lab::fixtures::whitened_linear;
use ipc_lab::{enumerate_basis, par, verify_bound, BoundExperiment, NoiseLocation};

fn experiment() -> BoundExperiment {
    let spec = whitened_linear(3, 0.6, 5)
        .unwrap()
        .with_noise(
            NoiseLocation::State,
            DMatrix::from_diagonal(&DVector::from_column_slice(&[0.05, 0.2, 0.4])),
        )
        .unwrap();
    let mut exp = BoundExperiment::new(spec, enumerate_basis(2, 8).unwrap(), 8_000, 12, 17);
    exp.washout = 300;
    exp.bootstrap_reps = 40;
    exp
}

#[test]
fn bound_report_is_independent_of_thread_count() {
    let exp = experiment();
    let a = par::with_jobs(1, || verify_bound(&exp)).unwrap();
    let b = par::with_jobs(4, || verify_bound(&exp)).unwrap();
    assert_eq!(a.ipc_measured.to_bits(), b.ipc_measured.to_bits());
    assert_eq!(a.ipc_bound.to_bits(), b.ipc_bound.to_bits());
    assert_eq!(a.stderr_bound.to_bits(), b.stderr_bound.to_bits());
    assert_eq!(a.q_xi_tilde, b.q_xi_tilde);
}

#[test]
fn measured_ipc_respects_bound_and_paths_agree() {
    let r = verify_bound(&experiment()).unwrap();
    assert!(r.pass, "{} > {} + {}", r.ipc_measured, r.ipc_bound, r.tol_stat);
    assert!(r.ipc_bound < 3.0 && r.ipc_bound > 2.0);
    assert!((r.bound_trace - r.ipc_bound).abs() < 1e-10);
    // Small ensemble, so looser than the 2% used on the large fixtures.
    assert!(r.two_path_rel_error() < 0.05, "{}", r.two_path_rel_error());
    assert_eq!(r.d, 54);
}
