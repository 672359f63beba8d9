//! Lindblad master-equation dynamics: time evolution, steady state, two-time
//! correlations by the quantum regression theorem, emission spectra and
//! continuous-wave intensity correlations.
//!
//! Density matrices are vectorized row-major, `vec(ρ)[i·d + j] = ρ[i, j]`,
//! so that `vec(AρB) = (A ⊗ Bᵀ) vec(ρ)`.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hilbert::{collapse_operators, hamiltonian, CMatrix, CollapseChannel, HilbertSpace};
use crate::polariton::{eigenmodes, SystemParams};
use crate::spectrum::{check_ascending, Spectrum};
use crate::units::Detuning;

pub type CVector = DVector<Complex64>;

const HERMITIAN_TOL: f64 = 1e-10;
const TRACE_TOL: f64 = 1e-8;
const POSITIVITY_TOL: f64 = 1e-8;

/// State on the truncated emitter ⊗ Fock space.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub rho: CMatrix,
}

impl DensityMatrix {
    /// Wraps and validates a density matrix.
    pub fn new(rho: CMatrix) -> Result<Self> {
        let d = DensityMatrix { rho };
        d.validate()?;
        Ok(d)
    }

    /// Pure basis state |e, n⟩.
    pub fn basis(space: &HilbertSpace, emitter: usize, photons: usize) -> Self {
        DensityMatrix {
            rho: space.basis_projector(emitter, photons),
        }
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn trace(&self) -> Complex64 {
        self.rho.trace()
    }

    pub fn expectation(&self, op: &CMatrix) -> Result<f64> {
        Ok(crate::hilbert::expectation(op, &self.rho)?.re)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (&self.rho + self.rho.adjoint()) * Complex64::new(0.5, 0.0);
        herm.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rho.is_square() || self.rho.nrows() == 0 {
            return Err(Error::invalid(
                "density matrix must be square and non-empty",
            ));
        }
        let herm = (&self.rho - self.rho.adjoint()).camax();
        if herm > HERMITIAN_TOL {
            return Err(Error::numerical(format!(
                "density matrix not Hermitian (deviation {herm:e})"
            )));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::numerical(format!(
                "density matrix trace {tr} differs from 1"
            )));
        }
        let lo = self.min_eigenvalue();
        if lo < -POSITIVITY_TOL {
            return Err(Error::numerical(format!(
                "density matrix has negative eigenvalue {lo:e}"
            )));
        }
        Ok(())
    }
}

/// Two-time correlation samples with the denominator used to normalize them.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTrace {
    pub tau_grid_ns: Vec<f64>,
    pub values: Vec<Complex64>,
    pub normalization: f64,
}

impl CorrelationTrace {
    pub fn real(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    pub fn value_at(&self, tau_ns: f64) -> Option<f64> {
        self.tau_grid_ns
            .iter()
            .position(|&t| (t - tau_ns).abs() <= 1e-12 * tau_ns.abs().max(1.0))
            .map(|i| self.values[i].re)
    }
}

pub fn vectorize(rho: &CMatrix) -> CVector {
    let d = rho.nrows();
    CVector::from_fn(d * d, |k, _| rho[(k / d, k % d)])
}

pub fn unvectorize(v: &CVector) -> CMatrix {
    let d = (v.len() as f64).sqrt().round() as usize;
    CMatrix::from_fn(d, d, |i, j| v[i * d + j])
}

/// Row vector `r` with `r · vec(ρ) = Tr[O ρ]`.
fn trace_functional(op: &CMatrix) -> CVector {
    let d = op.nrows();
    // Tr[Oρ] = Σ_ij O_ji ρ_ij
    CVector::from_fn(d * d, |k, _| op[(k % d, k / d)])
}

fn dot_trace(functional: &CVector, v: &CVector) -> Complex64 {
    functional.iter().zip(v.iter()).map(|(a, b)| a * b).sum()
}

/// Coordinates reachable from the support of `x` through nonzero entries
/// of `l`. They span the smallest coordinate subspace that contains `x` and
/// is invariant under `l`, so propagation can be restricted to it.
fn invariant_block(l: &CMatrix, x: &CVector) -> Vec<usize> {
    let n = l.nrows();
    let mut seen = vec![false; n];
    let mut stack: Vec<usize> = (0..n)
        .filter(|&k| x[k] != Complex64::new(0.0, 0.0))
        .collect();
    for &k in &stack {
        seen[k] = true;
    }
    while let Some(j) = stack.pop() {
        for i in 0..n {
            if !seen[i] && l[(i, j)] != Complex64::new(0.0, 0.0) {
                seen[i] = true;
                stack.push(i);
            }
        }
    }
    (0..n).filter(|&k| seen[k]).collect()
}

/// L = −i(H ⊗ 1 − 1 ⊗ Hᵀ) + Σ_k [J ⊗ J* − ½ J†J ⊗ 1 − ½ 1 ⊗ (J†J)ᵀ].
/// Channels with zero rate are skipped.
pub fn liouvillian(h: &CMatrix, channels: &[CollapseChannel]) -> CMatrix {
    let d = h.nrows();
    let id = CMatrix::identity(d, d);
    let mi = Complex64::new(0.0, -1.0);
    let mut l = (h.kronecker(&id) - id.kronecker(&h.transpose())) * mi;
    let half = Complex64::new(0.5, 0.0);
    for c in channels.iter().filter(|c| c.rate_ghz > 0.0) {
        let j = &c.jump;
        let jdj = j.adjoint() * j;
        l += j.kronecker(&j.map(|z| z.conj()));
        l -= jdj.kronecker(&id) * half;
        l -= id.kronecker(&jdj.transpose()) * half;
    }
    l
}

/// Hamiltonian, channels and generator of one parameter point.
#[derive(Debug, Clone)]
pub struct OpenSystem {
    pub space: HilbertSpace,
    pub hamiltonian: CMatrix,
    pub channels: Vec<CollapseChannel>,
    pub generator: CMatrix,
}

impl OpenSystem {
    pub fn new(p: &SystemParams, det: &Detuning) -> Result<Self> {
        let space = HilbertSpace::from_params(p)?;
        let h = hamiltonian(p, det)?;
        let channels = collapse_operators(p)?;
        let generator = liouvillian(&h, &channels);
        Ok(OpenSystem {
            space,
            hamiltonian: h,
            channels,
            generator,
        })
    }

    fn inf_norm(&self) -> f64 {
        self.generator
            .row_iter()
            .map(|r| r.iter().map(|z| z.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// exp(L t), exact up to the matrix exponential's rounding.
    pub fn propagator(&self, t_ns: f64) -> CMatrix {
        (&self.generator * Complex64::new(t_ns, 0.0)).exp()
    }

    /// Fourth-order Runge–Kutta propagator over `dt`, built from fixed steps
    /// h ≤ 1/(20‖L‖∞) and composed by binary powers.
    fn rk4_propagator(&self, dt: f64) -> Result<CMatrix> {
        let n2 = self.generator.nrows();
        if dt == 0.0 {
            return Ok(CMatrix::identity(n2, n2));
        }
        let norm = self.inf_norm();
        if norm == 0.0 {
            return Ok(CMatrix::identity(n2, n2));
        }
        let h_max = 1.0 / (20.0 * norm);
        let steps = (dt / h_max).ceil().max(1.0);
        let h = dt / steps;
        if !(h > 1e-14 * dt.max(1.0)) || steps > 1e15 {
            return Err(Error::numerical(format!(
                "step size underflow: interval {dt} ns needs {steps:e} steps of {h:e} ns (‖L‖∞ = {norm:e})"
            )));
        }
        let hl = &self.generator * Complex64::new(h, 0.0);
        let mut step = CMatrix::identity(n2, n2);
        let mut term = CMatrix::identity(n2, n2);
        for k in 1..=4 {
            term = &hl * &term * Complex64::new(1.0 / k as f64, 0.0);
            step += &term;
        }
        let mut remaining = steps as u64;
        let mut acc: Option<CMatrix> = None;
        let mut base = step;
        while remaining > 0 {
            if remaining & 1 == 1 {
                acc = Some(match acc {
                    None => base.clone(),
                    Some(a) => &base * a,
                });
            }
            remaining >>= 1;
            if remaining > 0 {
                base = &base * &base;
            }
        }
        Ok(acc.unwrap_or_else(|| CMatrix::identity(n2, n2)))
    }

    pub fn evolve(&self, rho0: &DensityMatrix, t_grid_ns: &[f64]) -> Result<Vec<DensityMatrix>> {
        rho0.validate()?;
        if rho0.dim() != self.space.dim() {
            return Err(Error::invalid(format!(
                "state dimension {} does not match system dimension {}",
                rho0.dim(),
                self.space.dim()
            )));
        }
        if t_grid_ns.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::invalid("time grid must be finite and non-negative"));
        }
        if t_grid_ns.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("time grid must be non-decreasing"));
        }
        let mut cache: HashMap<u64, CMatrix> = HashMap::new();
        let mut v = vectorize(&rho0.rho);
        let mut t = 0.0;
        let mut out = Vec::with_capacity(t_grid_ns.len());
        for &target in t_grid_ns {
            let dt = target - t;
            if dt > 0.0 {
                let key = dt.to_bits();
                if !cache.contains_key(&key) {
                    cache.insert(key, self.rk4_propagator(dt)?);
                }
                v = &cache[&key] * v;
                t = target;
            }
            let mut rho = unvectorize(&v);
            rho = (&rho + rho.adjoint()) * Complex64::new(0.5, 0.0);
            let state = DensityMatrix { rho };
            state
                .validate()
                .map_err(|e| Error::numerical(format!("at t = {target} ns: {e}")))?;
            out.push(state);
        }
        Ok(out)
    }

    pub fn steady_state(&self) -> Result<DensityMatrix> {
        let l = &self.generator;
        let n2 = l.nrows();
        let d = self.space.dim();
        let sv = l.clone().singular_values();
        let smax = sv.max();
        let null = sv.iter().filter(|&&s| s <= 1e-11 * smax.max(1.0)).count();
        if null != 1 {
            return Err(Error::numerical(format!(
                "generator null space has dimension {null}; the steady state is not unique"
            )));
        }
        let mut a = l.clone();
        for k in 0..n2 {
            a[(0, k)] = Complex64::new(0.0, 0.0);
        }
        for i in 0..d {
            a[(0, i * d + i)] = Complex64::new(1.0, 0.0);
        }
        let mut rhs = CVector::zeros(n2);
        rhs[0] = Complex64::new(1.0, 0.0);
        let x = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::numerical("steady-state linear system is singular"))?;
        let residual = (l * &x).norm();
        if residual > 1e-10 * smax.max(1.0) {
            return Err(Error::numerical(format!(
                "steady-state residual {residual:e} too large"
            )));
        }
        let mut rho = unvectorize(&x);
        rho = (&rho + rho.adjoint()) * Complex64::new(0.5, 0.0);
        DensityMatrix::new(rho)
    }

    /// Tr[B e^{Lτ} (X)] sampled on `tau_grid` (τ ≥ 0, ascending) with `x`
    /// the vectorized initial operator.
    fn regression(&self, x: &CVector, measure: &CMatrix, tau_grid: &[f64]) -> Vec<Complex64> {
        let functional = trace_functional(measure);
        let mut cache: HashMap<u64, CMatrix> = HashMap::new();
        let mut v = x.clone();
        let mut t = 0.0;
        let mut out = Vec::with_capacity(tau_grid.len());
        for &target in tau_grid {
            let dt = target - t;
            if dt > 0.0 {
                let key = dt.to_bits();
                let prop = cache.entry(key).or_insert_with(|| self.propagator(dt));
                v = &*prop * v;
                t = target;
            }
            out.push(dot_trace(&functional, &v));
        }
        out
    }
}

pub fn evolve(
    rho0: &DensityMatrix,
    p: &SystemParams,
    det: &Detuning,
    t_grid_ns: &[f64],
) -> Result<Vec<DensityMatrix>> {
    OpenSystem::new(p, det)?.evolve(rho0, t_grid_ns)
}

pub fn steady_state(p: &SystemParams, det: &Detuning) -> Result<DensityMatrix> {
    OpenSystem::new(p, det)?.steady_state()
}

/// Which field operator the spectrum is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmissionChannel {
    /// Light leaking out of the cavity mode, operator a.
    #[default]
    Cavity,
    /// Light emitted directly by the exciton, operator σ.
    Exciton,
}

/// ∫₀^h e^{−iωs} ds and ∫₀^h s e^{−iωs} ds.
fn filon_weights(omega: f64, h: f64) -> (Complex64, Complex64) {
    let theta = omega * h;
    if theta.abs() < 0.05 {
        let z = Complex64::new(0.0, -theta);
        let mut i0 = Complex64::new(0.0, 0.0);
        let mut i1 = Complex64::new(0.0, 0.0);
        let mut zk = Complex64::new(1.0, 0.0);
        let mut fact = 1.0;
        for k in 0..10 {
            i0 += zk / (fact * (k as f64 + 1.0));
            i1 += zk / (fact * (k as f64 + 2.0));
            fact *= (k + 1) as f64;
            zk *= z;
        }
        (i0 * h, i1 * h * h)
    } else {
        let e = Complex64::from_polar(1.0, -theta);
        let i = Complex64::new(0.0, 1.0);
        let i0 = (Complex64::new(1.0, 0.0) - e) / (i * omega);
        let i1 = (e * (Complex64::new(1.0, 0.0) + i * theta) - 1.0) * (h * h / (theta * theta));
        (i0, i1)
    }
}

/// Steady-state emission spectrum S(ω) = Re ∫₀^∞ e^{−iωτ} ⟨O†(τ) O(0)⟩ dτ on a
/// grid of offsets (GHz) from the cavity frequency, normalized to unit peak.
///
/// The correlation is propagated by regression from O ρ_ss with a fixed
/// sampling step and integrated with piecewise-linear Filon weights until
/// its propagated operator falls below 1e-8 of its initial norm.
pub fn emission_spectrum(
    p: &SystemParams,
    det: &Detuning,
    grid_ghz: &[f64],
    channel: EmissionChannel,
) -> Result<Spectrum> {
    if grid_ghz.len() < 2 {
        return Err(Error::invalid("spectrum grid needs at least two points"));
    }
    check_ascending(grid_ghz)?;
    let modes = eigenmodes(p, det);
    let narrowest = modes.hwhm_plus_ghz.min(modes.hwhm_minus_ghz);
    let spacing = grid_ghz.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    if spacing > narrowest {
        return Err(Error::invalid(format!(
            "grid spacing {spacing} GHz is coarser than the narrowest half width {narrowest} GHz"
        )));
    }
    let sys = OpenSystem::new(p, det)?;
    let ss = sys.steady_state()?;
    let op = match channel {
        EmissionChannel::Cavity => sys.space.a(),
        EmissionChannel::Exciton => sys.space.sigma(),
    };
    let full = vectorize(&(&op * &ss.rho));
    let block = invariant_block(&sys.generator, &full);
    let x = CVector::from_fn(block.len(), |k, _| full[block[k]]);
    let functional_full = trace_functional(&op.adjoint());
    let functional = CVector::from_fn(block.len(), |k, _| functional_full[block[k]]);
    let generator = CMatrix::from_fn(block.len(), block.len(), |i, j| {
        sys.generator[(block[i], block[j])]
    });
    let norm0 = x.norm();
    if norm0 == 0.0 || dot_trace(&functional, &x).re <= 0.0 {
        return Err(Error::numerical("no emission in the selected channel"));
    }
    let f_max = grid_ghz
        .iter()
        .map(|w| w.abs())
        .chain([
            modes.omega_plus_ghz.abs(),
            modes.omega_minus_ghz.abs(),
            det.dw_ghz.abs(),
        ])
        .fold(0.0, f64::max)
        .max(modes.hwhm_plus_ghz.max(modes.hwhm_minus_ghz));
    let h = 1.0 / (128.0 * f_max);
    let prop = (generator * Complex64::new(h, 0.0)).exp();
    let max_steps = 1usize << 22;
    let mut samples = vec![dot_trace(&functional, &x)];
    let mut v = x;
    loop {
        v = &prop * v;
        samples.push(dot_trace(&functional, &v));
        if v.norm() < 1e-8 * norm0 {
            break;
        }
        if samples.len() > max_steps {
            return Err(Error::numerical(format!(
                "correlation did not decay within {max_steps} steps of {h:e} ns"
            )));
        }
    }
    let angular: Vec<f64> = grid_ghz.iter().map(|w| 2.0 * PI * w).collect();
    let intensity: Vec<f64> = angular
        .iter()
        .map(|&omega| {
            let (i0, i1) = filon_weights(omega, h);
            let step = Complex64::from_polar(1.0, -omega * h);
            let mut phase = Complex64::new(1.0, 0.0);
            let mut acc = Complex64::new(0.0, 0.0);
            for w in samples.windows(2) {
                acc += phase * (w[0] * i0 + (w[1] - w[0]) * (i1 / h));
                phase *= step;
            }
            acc.re
        })
        .collect();
    let mut s = Spectrum::new(p.cavity_frequency_ghz()?, grid_ghz.to_vec(), intensity)?;
    s.normalize_peak()?;
    Ok(s)
}

fn check_tau_grid(tau: &[f64]) -> Result<()> {
    if tau.is_empty() {
        return Err(Error::invalid("empty delay grid"));
    }
    if tau.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("delay grid must be finite"));
    }
    if tau.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("delay grid must be strictly increasing"));
    }
    Ok(())
}

/// Evaluates a regression trace for |τ| on an arbitrary sorted grid.
fn regression_abs(
    sys: &OpenSystem,
    x: &CVector,
    measure: &CMatrix,
    taus: &[f64],
) -> Vec<Complex64> {
    let mut order: Vec<(f64, usize)> = taus.iter().enumerate().map(|(i, t)| (t.abs(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut uniq: Vec<f64> = order.iter().map(|o| o.0).collect();
    uniq.dedup();
    let vals = sys.regression(x, measure, &uniq);
    let mut out = vec![Complex64::new(0.0, 0.0); taus.len()];
    for (t, i) in order {
        let k = uniq.binary_search_by(|u| u.total_cmp(&t)).unwrap();
        out[i] = vals[k];
    }
    out
}

/// Cavity autocorrelation g²(τ) = ⟨a†a†(τ)a(τ)a⟩/⟨a†a⟩² (even in τ).
pub fn g2_auto(p: &SystemParams, det: &Detuning, tau_grid_ns: &[f64]) -> Result<CorrelationTrace> {
    check_tau_grid(tau_grid_ns)?;
    let sys = OpenSystem::new(p, det)?;
    let ss = sys.steady_state()?;
    let a = sys.space.a();
    let n = sys.space.cavity_number();
    let mean = ss.expectation(&n)?;
    if !(mean > 1e-300) {
        return Err(Error::numerical("cavity population is zero; g² undefined"));
    }
    let x = vectorize(&(&a * &ss.rho * a.adjoint()));
    let norm = mean * mean;
    let values = regression_abs(&sys, &x, &n, tau_grid_ns)
        .into_iter()
        .map(|v| v / norm)
        .collect();
    Ok(CorrelationTrace {
        tau_grid_ns: tau_grid_ns.to_vec(),
        values,
        normalization: norm,
    })
}

/// Exciton–cavity cross-correlation. For τ ≥ 0 the exciton photon comes first
/// and the cavity photon τ later; for τ < 0 the order is reversed.
pub fn g2_cross(p: &SystemParams, det: &Detuning, tau_grid_ns: &[f64]) -> Result<CorrelationTrace> {
    check_tau_grid(tau_grid_ns)?;
    let sys = OpenSystem::new(p, det)?;
    let ss = sys.steady_state()?;
    let a = sys.space.a();
    let sig = sys.space.sigma();
    let nc = sys.space.cavity_number();
    let nx = sig.adjoint() * &sig;
    let mc = ss.expectation(&nc)?;
    let mx = ss.expectation(&nx)?;
    if !(mc > 1e-300 && mx > 1e-300) {
        return Err(Error::numerical(
            "zero exciton or cavity population; g² undefined",
        ));
    }
    let norm = mc * mx;
    let pos: Vec<f64> = tau_grid_ns.iter().copied().filter(|t| *t >= 0.0).collect();
    let neg: Vec<f64> = tau_grid_ns.iter().copied().filter(|t| *t < 0.0).collect();
    let xs = vectorize(&(&sig * &ss.rho * sig.adjoint()));
    let xa = vectorize(&(&a * &ss.rho * a.adjoint()));
    let mut values = regression_abs(&sys, &xa, &nx, &neg);
    values.extend(regression_abs(&sys, &xs, &nc, &pos));
    let values = values.into_iter().map(|v| v / norm).collect();
    Ok(CorrelationTrace {
        tau_grid_ns: tau_grid_ns.to_vec(),
        values,
        normalization: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{EXCITON, GROUND};
    use crate::spectrum::linspace;

    fn zero() -> Detuning {
        Detuning::zero(942.5)
    }

    #[test]
    fn coherence_block_is_closed_and_small() {
        let p = SystemParams::rabi_estimate();
        let sys = OpenSystem::new(&p, &p.detuning().unwrap()).unwrap();
        let ss = sys.steady_state().unwrap();
        let x = vectorize(&(sys.space.a() * &ss.rho));
        let block = invariant_block(&sys.generator, &x);
        let n = sys.generator.nrows();
        assert!(block.len() < n / 4, "{} of {n}", block.len());
        let inside: Vec<bool> = (0..n).map(|k| block.contains(&k)).collect();
        for &j in &block {
            for i in (0..n).filter(|&i| !inside[i]) {
                assert_eq!(sys.generator[(i, j)], Complex64::new(0.0, 0.0));
            }
        }
    }

    fn empty_cavity(n_max: usize) -> SystemParams {
        SystemParams {
            g_ghz: 0.0,
            pump_ghz: 0.0,
            gamma_b_ghz: 1.0,
            gamma_x_ghz: 1.0,
            n_max,
            ..SystemParams::default()
        }
    }

    #[test]
    fn vectorization_convention() {
        let s = HilbertSpace::new(2, 2).unwrap();
        let a = s.a();
        let b = s.sigma() + s.a().adjoint();
        let rho = s.basis_projector(EXCITON, 1) + s.basis_projector(GROUND, 0);
        let lhs = vectorize(&(&a * &rho * &b));
        let rhs = a.kronecker(&b.transpose()) * vectorize(&rho);
        assert!((lhs - rhs).norm() < 1e-12);
        assert_eq!(unvectorize(&vectorize(&rho)), rho);
    }

    #[test]
    fn trace_preserving_generator() {
        let p = SystemParams {
            pump_ghz: 0.3,
            transfer_ghz: 0.2,
            n_max: 3,
            ..SystemParams::default()
        };
        let sys = OpenSystem::new(&p, &Detuning::from_nm(0.2, 942.5).unwrap()).unwrap();
        let d = sys.space.dim();
        let tr = trace_functional(&CMatrix::identity(d, d));
        let col = sys.generator.transpose() * tr;
        assert!(col.norm() < 1e-9);
    }

    #[test]
    fn empty_cavity_half_life() {
        let p = empty_cavity(2);
        let s = HilbertSpace::from_params(&p).unwrap();
        let rho0 = DensityMatrix::basis(&s, GROUND, 1);
        let half = 2f64.ln() / (2.0 * PI * 24.1);
        let out = evolve(&rho0, &p, &zero(), &[half, 2.0 * half]).unwrap();
        let n = s.cavity_number();
        assert!((out[0].expectation(&n).unwrap() - 0.5).abs() < 1e-8);
        assert!((out[1].expectation(&n).unwrap() - 0.25).abs() < 1e-8);
    }

    #[test]
    fn bare_exciton_decay() {
        let p = SystemParams {
            g_ghz: 0.0,
            pump_ghz: 0.0,
            n_max: 1,
            ..SystemParams::default()
        };
        let s = HilbertSpace::from_params(&p).unwrap();
        let rho0 = DensityMatrix::basis(&s, EXCITON, 0);
        let ts = [1.0, 5.0, 20.0];
        let out = evolve(&rho0, &p, &zero(), &ts).unwrap();
        for (t, r) in ts.iter().zip(&out) {
            let want = (-2.0 * PI * 0.015 * t).exp();
            assert!((r.expectation(&s.exciton_number()).unwrap() - want).abs() < 1e-8);
        }
    }

    #[test]
    fn frozen_without_generator() {
        let mut p = empty_cavity(2);
        p.gamma_m_ghz = 0.0;
        p.gamma_b_ghz = 0.0;
        p.gamma_x_ghz = 0.0;
        let s = HilbertSpace::from_params(&p).unwrap();
        let mut rho = s.basis_projector(GROUND, 1) * Complex64::new(0.5, 0.0);
        rho[(s.index(GROUND, 1), s.index(EXCITON, 0))] = Complex64::new(0.25, 0.1);
        rho[(s.index(EXCITON, 0), s.index(GROUND, 1))] = Complex64::new(0.25, -0.1);
        rho[(s.index(EXCITON, 0), s.index(EXCITON, 0))] = Complex64::new(0.5, 0.0);
        let rho0 = DensityMatrix::new(rho).unwrap();
        let out = evolve(&rho0, &p, &zero(), &[0.0, 3.0, 100.0]).unwrap();
        for r in out {
            assert_eq!(r.rho, rho0.rho);
        }
    }

    #[test]
    fn damped_rabi_oracle() {
        // no pure dephasing, so the one-excitation block is a pure state of the 2×2 problem
        let p = SystemParams {
            gamma_b_ghz: 8.5,
            pump_ghz: 0.0,
            n_max: 1,
            ..SystemParams::default()
        };
        let det = Detuning::from_ghz(11.0, 942.5).unwrap();
        let s = HilbertSpace::from_params(&p).unwrap();
        let rho0 = DensityMatrix::basis(&s, EXCITON, 0);
        let ts: Vec<f64> = (1..=40).map(|k| k as f64 * 0.005).collect();
        let out = evolve(&rho0, &p, &det, &ts).unwrap();
        let tau = 2.0 * PI;
        let m = nalgebra::Matrix2::new(
            Complex64::new(-det.dw_ghz * tau, -p.gamma_x_ghz * tau / 2.0),
            Complex64::new(p.g_ghz * tau, 0.0),
            Complex64::new(p.g_ghz * tau, 0.0),
            Complex64::new(0.0, -p.gamma_m_ghz * tau / 2.0),
        );
        for (t, r) in ts.iter().zip(&out) {
            let u = (m * Complex64::new(0.0, -t)).exp();
            let px = u[(0, 0)].norm_sqr();
            let pc = u[(1, 0)].norm_sqr();
            let ix = s.index(EXCITON, 0);
            let ic = s.index(GROUND, 1);
            assert!((r.rho[(ix, ix)].re - px).abs() < 1e-6, "t={t}");
            assert!((r.rho[(ic, ic)].re - pc).abs() < 1e-6, "t={t}");
            let coh = u[(0, 0)] * u[(1, 0)].conj();
            assert!((r.rho[(ix, ic)] - coh).norm() < 1e-6);
        }
    }

    #[test]
    fn steady_state_vacuum_without_pump() {
        let p = SystemParams {
            pump_ghz: 0.0,
            n_max: 3,
            ..SystemParams::default()
        };
        let ss = steady_state(&p, &zero()).unwrap();
        let s = HilbertSpace::from_params(&p).unwrap();
        assert!((ss.rho[(0, 0)].re - 1.0).abs() < 1e-10);
        assert!(ss.expectation(&s.cavity_number()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn two_level_detailed_balance() {
        let p = SystemParams {
            g_ghz: 0.0,
            gamma_x_ghz: 0.15,
            gamma_b_ghz: 0.15,
            pump_ghz: 0.05,
            n_max: 1,
            ..SystemParams::default()
        };
        let ss = steady_state(&p, &zero()).unwrap();
        let s = HilbertSpace::from_params(&p).unwrap();
        let want = 0.05 / (0.05 + 0.15);
        assert!((ss.expectation(&s.exciton_number()).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn degenerate_null_space_reported() {
        let mut p = empty_cavity(2);
        p.gamma_m_ghz = 0.0;
        assert!(steady_state(&p, &zero()).is_err());
    }

    #[test]
    fn weak_pump_matches_long_evolution() {
        let p = SystemParams {
            n_max: 3,
            ..SystemParams::default()
        };
        let sys = OpenSystem::new(&p, &zero()).unwrap();
        let ss = sys.steady_state().unwrap();
        let rho0 = DensityMatrix::basis(&sys.space, GROUND, 0);
        let late = sys.evolve(&rho0, &[500.0]).unwrap();
        let nx = sys.space.exciton_number();
        let a = ss.expectation(&nx).unwrap();
        let b = late[0].expectation(&nx).unwrap();
        assert!(a < 1e-3 && a > 0.0);
        assert!((a - b).abs() < 1e-8 * a.max(1e-12) * 1e3, "{a} vs {b}");
        assert!((&ss.rho - &late[0].rho).camax() < 1e-9);
    }

    #[test]
    fn invalid_states_rejected() {
        let s = HilbertSpace::new(1, 2).unwrap();
        assert!(DensityMatrix::new(s.ground_state() * Complex64::new(2.0, 0.0)).is_err());
        let mut r = s.ground_state();
        r[(0, 1)] = Complex64::new(0.3, 0.0);
        assert!(DensityMatrix::new(r).is_err());
        let neg = s.basis_projector(GROUND, 0) * Complex64::new(1.5, 0.0)
            - s.basis_projector(GROUND, 1) * Complex64::new(0.5, 0.0);
        assert!(DensityMatrix::new(neg).is_err());
    }

    #[test]
    fn filon_weights_agree_across_branches() {
        let h = 1e-3;
        for omega in [49.9, 50.1] {
            let (a0, a1) = filon_weights(omega, h);
            let n = 20000;
            let mut b0 = Complex64::new(0.0, 0.0);
            let mut b1 = Complex64::new(0.0, 0.0);
            for k in 0..n {
                let s = (k as f64 + 0.5) * h / n as f64;
                let e = Complex64::from_polar(1.0, -omega * s);
                b0 += e * (h / n as f64);
                b1 += e * s * (h / n as f64);
            }
            assert!((a0 - b0).norm() < 1e-12);
            assert!((a1 - b1).norm() < 1e-12);
        }
    }

    #[test]
    fn spectrum_matches_resolvent() {
        let p = SystemParams {
            n_max: 2,
            ..SystemParams::default()
        };
        let det = Detuning::from_ghz(15.0, 942.5).unwrap();
        let grid = linspace(-80.0, 80.0, 161);
        let s = emission_spectrum(&p, &det, &grid, EmissionChannel::Cavity).unwrap();
        let sys = OpenSystem::new(&p, &det).unwrap();
        let ss = sys.steady_state().unwrap();
        let a = sys.space.a();
        let x = vectorize(&(&a * &ss.rho));
        let f = trace_functional(&a.adjoint());
        let n2 = sys.generator.nrows();
        let exact: Vec<f64> = grid
            .iter()
            .map(|w| {
                let m =
                    CMatrix::identity(n2, n2) * Complex64::new(0.0, 2.0 * PI * w) - &sys.generator;
                let y = m.lu().solve(&x).unwrap();
                dot_trace(&f, &y).re
            })
            .collect();
        let peak = exact.iter().copied().fold(0.0, f64::max);
        for (got, want) in s.intensity.iter().zip(&exact) {
            assert!((got - want / peak).abs() < 1e-4, "{got} vs {}", want / peak);
        }
    }

    #[test]
    fn bare_exciton_line() {
        let p = SystemParams {
            g_ghz: 0.0,
            n_max: 1,
            ..SystemParams::default()
        };
        let det = Detuning::from_ghz(40.0, 942.5).unwrap();
        let grid = linspace(-80.0, 0.0, 1601);
        let s = emission_spectrum(&p, &det, &grid, EmissionChannel::Exciton).unwrap();
        let peaks = s.local_maxima(0.5);
        assert_eq!(peaks.len(), 1);
        assert!((peaks[0].0 + 40.0).abs() < 0.05);
        let w = s.fwhm_near(-40.0).unwrap();
        assert!((w - 8.5).abs() / 8.5 < 0.02, "{w}");
    }

    #[test]
    fn coarse_grid_flagged() {
        let grid = linspace(-80.0, 80.0, 11);
        let r = emission_spectrum(
            &SystemParams::default(),
            &zero(),
            &grid,
            EmissionChannel::Cavity,
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn coherent_drive_is_poissonian() {
        let mut p = empty_cavity(6);
        p.cavity_drive_ghz = 1.0;
        let taus = [0.0, 0.01, 0.1, 1.0];
        let g = g2_auto(&p, &zero(), &taus).unwrap();
        for v in g.real() {
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn two_level_antibunching() {
        let p = SystemParams {
            g_ghz: 0.0,
            gamma_x_ghz: 0.15,
            gamma_b_ghz: 0.15,
            pump_ghz: 0.05,
            transfer_ghz: 0.2,
            n_max: 2,
            ..SystemParams::default()
        };
        // cavity photons are fed one at a time by the emitter
        let taus = linspace(0.0, 5.0, 51);
        let g = g2_auto(&p, &zero(), &taus).unwrap();
        let v = g.real();
        assert!(v[0] < 0.05, "{}", v[0]);
        assert!(v.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        assert!((v[50] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn cross_correlation_sides() {
        let p = SystemParams {
            transfer_ghz: 0.05,
            pump_ghz: 0.01,
            n_max: 2,
            ..SystemParams::default()
        };
        let det = Detuning::from_nm(4.1, 942.5).unwrap();
        let taus = [-50.0, -2.0, -0.1, 0.0, 0.1, 2.0, 50.0];
        let g = g2_cross(&p, &det, &taus).unwrap();
        let v = g.real();
        assert!(v[3] < 1.0);
        assert!((v[0] - 1.0).abs() < 1e-3 && (v[6] - 1.0).abs() < 1e-3);
        assert!(g.values.iter().all(|z| z.im.abs() < 1e-8));
    }
}
