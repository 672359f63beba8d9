//! Convergence in the photon-number cutoff under weak pumping.

use qdcav::dynamics::steady_state;
use qdcav::hilbert::HilbertSpace;
use qdcav::polariton::SystemParams;

fn populations(n_max: usize, dl_nm: f64) -> (f64, f64) {
    let p = SystemParams {
        n_max,
        lambda_m_nm: 942.5 - dl_nm,
        ..SystemParams::rabi_estimate()
    };
    let ss = steady_state(&p, &p.detuning().unwrap()).unwrap();
    let s = HilbertSpace::from_params(&p).unwrap();
    (
        ss.expectation(&s.cavity_number()).unwrap(),
        ss.expectation(&s.exciton_number()).unwrap(),
    )
}

#[test]
fn weak_pump_populations_converge_in_cutoff() {
    for dl in [0.0, 0.1, 1.0] {
        let (nc5, nx5) = populations(5, dl);
        for n_max in [1, 2, 3] {
            let (nc, nx) = populations(n_max, dl);
            let tol = if n_max == 1 { 1e-2 } else { 1e-3 };
            assert!(
                (nc - nc5).abs() <= tol * nc5,
                "dl={dl} n_max={n_max}: {nc} vs {nc5}"
            );
            assert!(
                (nx - nx5).abs() <= tol * nx5,
                "dl={dl} n_max={n_max}: {nx} vs {nx5}"
            );
        }
    }
}

#[test]
fn steady_state_stays_physical_at_every_cutoff() {
    for n_max in 1..=5 {
        let p = SystemParams {
            n_max,
            ..SystemParams::rabi_estimate()
        };
        let ss = steady_state(&p, &p.detuning().unwrap()).unwrap();
        assert!((ss.trace().re - 1.0).abs() < 1e-10);
        assert!(ss.min_eigenvalue() > -1e-10);
    }
}
