//! Closed-form theory of the coupled exciton–cavity system: complex polariton
//! eigenfrequencies, the two-Lorentzian spectral function, the detuning
//! dependent Purcell lifetime and the strong-coupling criterion.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::{check_ascending, Spectrum};
use crate::units::{detuning_ghz_to_nm, wavelength_to_frequency, Detuning};

/// Physical rates and frequencies of the quantum dot / nanocavity system.
///
/// All rates are ordinary frequencies in GHz, linewidths as FWHM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemParams {
    pub lambda_x_nm: f64,
    pub lambda_m_nm: f64,
    pub g_ghz: f64,
    /// Total exciton FWHM, pure dephasing included.
    pub gamma_x_ghz: f64,
    pub gamma_m_ghz: f64,
    /// Radiative rate of the exciton into non-cavity modes.
    pub gamma_b_ghz: f64,
    /// Incoherent exciton pump rate (continuous wave).
    pub pump_ghz: f64,
    /// Incoherent exciton → cavity transfer rate.
    pub transfer_ghz: f64,
    pub n_max: usize,
    /// 2 (ground, exciton) or 3 (adds an incoherent feeder level).
    pub emitter_levels: usize,
    /// Pump rate into the feeder level (three-level model only).
    pub feeder_pump_ghz: f64,
    /// Decay rate of the feeder level; each decay deposits a photon in the cavity.
    pub feeder_decay_ghz: f64,
    /// Coherent cavity drive amplitude. Zero for every experiment-like run;
    /// used as a Poissonian reference source.
    pub cavity_drive_ghz: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams {
            lambda_x_nm: 942.5,
            lambda_m_nm: 942.5,
            g_ghz: 18.4,
            gamma_x_ghz: 8.5,
            gamma_m_ghz: 24.1,
            gamma_b_ghz: 0.015,
            pump_ghz: 0.01,
            transfer_ghz: 0.0,
            n_max: 5,
            emitter_levels: 2,
            feeder_pump_ghz: 0.0,
            feeder_decay_ghz: 0.0,
            cavity_drive_ghz: 0.0,
        }
    }
}

impl SystemParams {
    /// Parameter set extracted from the vacuum Rabi splitting (g = 18.4 GHz).
    pub fn rabi_estimate() -> Self {
        Self::default()
    }

    /// Parameter set extracted from the lifetime-vs-detuning fit (g = 20.7 GHz).
    pub fn lifetime_estimate() -> Self {
        SystemParams {
            g_ghz: 20.7,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("g_ghz", self.g_ghz),
            ("gamma_x_ghz", self.gamma_x_ghz),
            ("gamma_m_ghz", self.gamma_m_ghz),
            ("gamma_b_ghz", self.gamma_b_ghz),
            ("pump_ghz", self.pump_ghz),
            ("transfer_ghz", self.transfer_ghz),
            ("feeder_pump_ghz", self.feeder_pump_ghz),
            ("feeder_decay_ghz", self.feeder_decay_ghz),
            ("cavity_drive_ghz", self.cavity_drive_ghz),
        ];
        for (name, v) in rates {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.lambda_x_nm > 0.0) || !(self.lambda_m_nm > 0.0) {
            return Err(Error::invalid("wavelengths must be positive"));
        }
        if self.n_max < 1 {
            return Err(Error::invalid("n_max must be at least 1"));
        }
        if !(2..=3).contains(&self.emitter_levels) {
            return Err(Error::invalid(format!(
                "emitter_levels must be 2 or 3, got {}",
                self.emitter_levels
            )));
        }
        if self.gamma_b_ghz > self.gamma_x_ghz {
            return Err(Error::invalid(
                "gamma_b_ghz exceeds gamma_x_ghz (background emission is part of the exciton linewidth)",
            ));
        }
        Ok(())
    }

    /// Detuning implied by the two wavelengths, referenced to the cavity.
    pub fn detuning(&self) -> Result<Detuning> {
        Detuning::from_nm(self.lambda_x_nm - self.lambda_m_nm, self.lambda_m_nm)
    }

    /// Pure dephasing rate γ_d with γ_x = γ_b + 2γ_d.
    pub fn dephasing_ghz(&self) -> f64 {
        ((self.gamma_x_ghz - self.gamma_b_ghz) / 2.0).max(0.0)
    }

    /// Absolute cavity frequency in GHz.
    pub fn cavity_frequency_ghz(&self) -> Result<f64> {
        wavelength_to_frequency(self.lambda_m_nm)
    }
}

/// Complex eigenfrequencies of the one-excitation problem, as offsets (GHz)
/// from the cavity frequency. `hwhm_*` are the half widths Γ_±.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolaritonPair {
    pub omega_plus_ghz: f64,
    pub omega_minus_ghz: f64,
    pub hwhm_plus_ghz: f64,
    pub hwhm_minus_ghz: f64,
    /// Squared photon amplitude of each normalized eigenvector.
    pub photon_fraction_plus: f64,
    pub photon_fraction_minus: f64,
}

impl PolaritonPair {
    pub fn splitting_ghz(&self) -> f64 {
        self.omega_plus_ghz - self.omega_minus_ghz
    }
}

/// Complex frequencies of the bare exciton and cavity in the cavity frame.
fn bare_poles(p: &SystemParams, det: &Detuning) -> (Complex64, Complex64) {
    let exciton = Complex64::new(-det.dw_ghz, -p.gamma_x_ghz / 2.0);
    let cavity = Complex64::new(0.0, -p.gamma_m_ghz / 2.0);
    (exciton, cavity)
}

fn photon_fraction(lambda: Complex64, exciton: Complex64, cavity: Complex64, g: f64) -> f64 {
    // two candidate eigenvectors of [[exciton, g], [g, cavity]]; keep the better conditioned one
    let a = (Complex64::new(g, 0.0), lambda - exciton);
    let b = (lambda - cavity, Complex64::new(g, 0.0));
    let na = a.0.norm_sqr() + a.1.norm_sqr();
    let nb = b.0.norm_sqr() + b.1.norm_sqr();
    let (v, n) = if na >= nb { (a, na) } else { (b, nb) };
    if n == 0.0 {
        return 0.5;
    }
    v.1.norm_sqr() / n
}

/// Eigenfrequencies of the non-Hermitian 2×2 generator
/// `[[ω_x − iγ_x/2, g], [g, ω_m − iγ_m/2]]`:
///
/// ```text
/// Ω± − iΓ± = (ω_m + ω_x)/2 − i(γ_x + γ_m)/4 ± √(g² + ¼(Δ_ω + i(γ_x − γ_m)/2)²)
/// ```
///
/// The principal square root is used and the roots are ordered so that
/// Ω_+ ≥ Ω_−.
pub fn eigenmodes(p: &SystemParams, det: &Detuning) -> PolaritonPair {
    let (ex, cav) = bare_poles(p, det);
    let mean = (ex + cav) / 2.0;
    let half = (cav - ex) / 2.0;
    let root = (Complex64::new(p.g_ghz * p.g_ghz, 0.0) + half * half).sqrt();
    let (mut hi, mut lo) = (mean + root, mean - root);
    if lo.re > hi.re {
        std::mem::swap(&mut hi, &mut lo);
    }
    PolaritonPair {
        omega_plus_ghz: hi.re,
        omega_minus_ghz: lo.re,
        hwhm_plus_ghz: -hi.im,
        hwhm_minus_ghz: -lo.im,
        photon_fraction_plus: photon_fraction(hi, ex, cav, p.g_ghz),
        photon_fraction_minus: photon_fraction(lo, ex, cav, p.g_ghz),
    }
}

/// Strict test of g² > (γ_x − γ_m)²/16.
pub fn is_strong_coupling(p: &SystemParams) -> bool {
    let d = p.gamma_x_ghz - p.gamma_m_ghz;
    p.g_ghz * p.g_ghz > d * d / 16.0
}

/// Minimum polariton splitting 2√(g² − (γ_x − γ_m)²/16), in GHz and as a
/// wavelength interval at λ_m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RabiSplitting {
    pub ghz: f64,
    pub nm: f64,
}

pub fn rabi_splitting(p: &SystemParams) -> Result<RabiSplitting> {
    if !is_strong_coupling(p) {
        return Err(Error::WeakCoupling);
    }
    let d = p.gamma_x_ghz - p.gamma_m_ghz;
    let ghz = 2.0 * (p.g_ghz * p.g_ghz - d * d / 16.0).sqrt();
    Ok(RabiSplitting {
        ghz,
        nm: detuning_ghz_to_nm(ghz, p.lambda_m_nm)?,
    })
}

/// Choice of the amplitudes A_± of the two-Lorentzian spectral function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AmplitudeModel {
    /// Free constants, as used when fitting.
    ConstantPair { plus: f64, minus: f64 },
    /// Each branch weighted by its photon fraction (line area ∝ photon fraction).
    HopfieldWeighted,
}

/// S(ω) = A₊/((ω−Ω₊)² + Γ₊²) + A₋/((ω−Ω₋)² + Γ₋²), normalized to unit peak.
pub fn spectral_function(
    grid_ghz: &[f64],
    p: &SystemParams,
    det: &Detuning,
    model: AmplitudeModel,
) -> Result<Spectrum> {
    if grid_ghz.is_empty() {
        return Err(Error::invalid("empty frequency grid"));
    }
    check_ascending(grid_ghz)?;
    let modes = eigenmodes(p, det);
    let (a_plus, a_minus) = match model {
        AmplitudeModel::ConstantPair { plus, minus } => (plus, minus),
        AmplitudeModel::HopfieldWeighted => (
            modes.photon_fraction_plus * modes.hwhm_plus_ghz,
            modes.photon_fraction_minus * modes.hwhm_minus_ghz,
        ),
    };
    let line = |w: f64, a: f64, c: f64, h: f64| {
        if a == 0.0 {
            0.0
        } else {
            a / ((w - c).powi(2) + h * h)
        }
    };
    let plus: Vec<f64> = grid_ghz
        .iter()
        .map(|&w| line(w, a_plus, modes.omega_plus_ghz, modes.hwhm_plus_ghz))
        .collect();
    let minus: Vec<f64> = grid_ghz
        .iter()
        .map(|&w| line(w, a_minus, modes.omega_minus_ghz, modes.hwhm_minus_ghz))
        .collect();
    let total = plus.iter().zip(&minus).map(|(a, b)| a + b).collect();
    let mut s = Spectrum::new(p.cavity_frequency_ghz()?, grid_ghz.to_vec(), total)?;
    s.components = vec![("plus".into(), plus), ("minus".into(), minus)];
    s.normalize_peak()?;
    Ok(s)
}

/// Decomposition of the exciton decay rate γ_tot = γ_b + γ_SE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurcellDecay {
    pub gamma_b_ghz: f64,
    pub gamma_se_ghz: f64,
    pub gamma_tot_ghz: f64,
    pub lifetime_ns: f64,
}

/// γ_SE = γ_m g² / (Δ_ω² + (γ_m/2)²); τ = 1/(2π γ_tot).
pub fn purcell_lifetime(p: &SystemParams, det: &Detuning) -> Result<PurcellDecay> {
    if !(p.gamma_m_ghz > 0.0) {
        return Err(Error::invalid("purcell_lifetime needs gamma_m_ghz > 0"));
    }
    let gamma_se = purcell_rate(p.g_ghz, p.gamma_m_ghz, det.dw_ghz);
    let gamma_tot = p.gamma_b_ghz + gamma_se;
    if !(gamma_tot > 0.0) {
        return Err(Error::invalid("total decay rate is zero"));
    }
    Ok(PurcellDecay {
        gamma_b_ghz: p.gamma_b_ghz,
        gamma_se_ghz: gamma_se,
        gamma_tot_ghz: gamma_tot,
        lifetime_ns: 1.0 / (2.0 * PI * gamma_tot),
    })
}

pub(crate) fn purcell_rate(g: f64, gamma_m: f64, dw: f64) -> f64 {
    gamma_m * g * g / (dw * dw + gamma_m * gamma_m / 4.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::linspace;

    fn paper() -> SystemParams {
        SystemParams::rabi_estimate()
    }

    fn det(dw: f64) -> Detuning {
        Detuning::from_ghz(dw, 942.5).unwrap()
    }

    #[test]
    fn resonance_point() {
        let m = eigenmodes(&paper(), &det(0.0));
        // √(18.4² − 15.6²/16)
        let root = (18.4f64 * 18.4 - 15.6 * 15.6 / 16.0).sqrt();
        assert!((m.omega_plus_ghz - root).abs() < 1e-12);
        assert!((m.omega_minus_ghz + root).abs() < 1e-12);
        assert!((root - 17.98).abs() < 0.005);
        assert!((m.hwhm_plus_ghz - 8.15).abs() < 1e-12);
        assert!((m.hwhm_minus_ghz - 8.15).abs() < 1e-12);
    }

    #[test]
    fn uncoupled_limit() {
        let mut p = paper();
        p.g_ghz = 0.0;
        for dw in [-300.0, -5.0, 7.0, 1383.7] {
            let m = eigenmodes(&p, &det(dw));
            let (cav, exc) = if dw > 0.0 {
                (
                    (m.omega_plus_ghz, m.hwhm_plus_ghz),
                    (m.omega_minus_ghz, m.hwhm_minus_ghz),
                )
            } else {
                (
                    (m.omega_minus_ghz, m.hwhm_minus_ghz),
                    (m.omega_plus_ghz, m.hwhm_plus_ghz),
                )
            };
            assert!(
                cav.0.abs() < 1e-9 && (cav.1 - 12.05).abs() < 1e-9,
                "{cav:?}"
            );
            assert!(
                (exc.0 + dw).abs() < 1e-9 && (exc.1 - 4.25).abs() < 1e-9,
                "{exc:?}"
            );
        }
    }

    #[test]
    fn far_detuned_asymptote() {
        let m = eigenmodes(&paper(), &det(1383.7));
        // cavity blue of the exciton: upper branch is cavity-like
        assert!(((m.hwhm_plus_ghz - 12.05) / 12.05).abs() < 1e-3);
        assert!(((m.hwhm_minus_ghz - 4.25) / 4.25).abs() < 1e-3);
        assert!(m.photon_fraction_plus > 0.99);
    }

    #[test]
    fn splitting_and_criterion() {
        let r = rabi_splitting(&paper()).unwrap();
        assert!((r.ghz - 35.96).abs() < 0.01);
        assert!((r.nm - 0.107).abs() < 0.0005);
        let mut sym = paper();
        sym.gamma_x_ghz = sym.gamma_m_ghz;
        assert!((rabi_splitting(&sym).unwrap().ghz - 2.0 * sym.g_ghz).abs() < 1e-12);
        let mut edge = paper();
        edge.gamma_m_ghz = edge.gamma_x_ghz + 4.0 * edge.g_ghz;
        assert!(matches!(rabi_splitting(&edge), Err(Error::WeakCoupling)));

        assert!(is_strong_coupling(&SystemParams::lifetime_estimate()));
        let mut weak = paper();
        weak.g_ghz = 3.0;
        assert!(!is_strong_coupling(&weak));
        let mut zero = paper();
        zero.g_ghz = 0.0;
        zero.gamma_x_ghz = zero.gamma_m_ghz;
        assert!(!is_strong_coupling(&zero));
    }

    #[test]
    fn doublet_spectrum_on_resonance() {
        let grid = linspace(-80.0, 80.0, 16001);
        let s = spectral_function(
            &grid,
            &paper(),
            &det(0.0),
            AmplitudeModel::ConstantPair {
                plus: 1.0,
                minus: 1.0,
            },
        )
        .unwrap();
        let peaks = s.local_maxima(0.5);
        assert_eq!(peaks.len(), 2);
        assert!((peaks[0].0 + peaks[1].0).abs() < 1e-6, "symmetric doublet");
        // overlap of the two lines pulls each maximum slightly inward
        assert!((peaks[1].0 - 17.98).abs() < 0.15, "{:?}", peaks);
        let plus = Spectrum::new(0.0, grid.clone(), s.components[0].1.clone()).unwrap();
        assert!((plus.fwhm_near(17.98).unwrap() - 16.3).abs() < 0.01);
        assert!((s.peak() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hopfield_uncoupled_is_bare_cavity() {
        let mut p = paper();
        p.g_ghz = 0.0;
        let grid = linspace(-100.0, 100.0, 8001);
        let s = spectral_function(&grid, &p, &det(30.0), AmplitudeModel::HopfieldWeighted).unwrap();
        let peaks = s.local_maxima(1e-6);
        assert_eq!(peaks.len(), 1);
        assert!(peaks[0].0.abs() < 1e-9);
        assert!((s.fwhm_near(0.0).unwrap() - 24.1).abs() < 1e-3);
    }

    #[test]
    fn hopfield_far_detuned_weight() {
        let grid = linspace(-1600.0, 200.0, 36001);
        let s = spectral_function(
            &grid,
            &paper(),
            &det(1383.7),
            AmplitudeModel::HopfieldWeighted,
        )
        .unwrap();
        let m = eigenmodes(&paper(), &det(1383.7));
        assert!(m.photon_fraction_plus > 0.99);
        assert!((m.photon_fraction_plus + m.photon_fraction_minus - 1.0).abs() < 1e-3);
        let cav = Spectrum::new(0.0, grid.clone(), s.components[0].1.clone())
            .unwrap()
            .area();
        let exc = Spectrum::new(0.0, grid, s.components[1].1.clone())
            .unwrap()
            .area();
        assert!(cav / (cav + exc) > 0.99);
    }

    #[test]
    fn purcell_examples() {
        let p = SystemParams::lifetime_estimate();
        let far = purcell_lifetime(&p, &Detuning::from_nm(4.1, 942.5).unwrap()).unwrap();
        assert!(
            (far.gamma_se_ghz - 5.39e-3).abs() < 0.01e-3,
            "{}",
            far.gamma_se_ghz
        );
        assert!((far.lifetime_ns - 7.8).abs() < 0.01, "{}", far.lifetime_ns);
        let res = purcell_lifetime(&p, &det(0.0)).unwrap();
        assert!((res.gamma_se_ghz - 4.0 * 20.7 * 20.7 / 24.1).abs() < 1e-9);
        assert!((res.gamma_se_ghz - 71.1).abs() < 0.05);
        assert!((res.lifetime_ns - 2.2e-3).abs() < 0.05e-3);
        let mut bare = p.clone();
        bare.g_ghz = 0.0;
        let b = purcell_lifetime(&bare, &det(0.0)).unwrap();
        assert!((b.lifetime_ns - 10.61).abs() < 0.01);
        let mut bad = p;
        bad.gamma_m_ghz = 0.0;
        assert!(purcell_lifetime(&bad, &det(0.0)).is_err());
    }

    #[test]
    fn dephasing_split() {
        assert!((paper().dephasing_ghz() - 4.2425).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(paper().validate().is_ok());
        let mut p = paper();
        p.gamma_b_ghz = 9.0;
        assert!(p.validate().is_err());
        let mut p = paper();
        p.n_max = 0;
        assert!(p.validate().is_err());
        let mut p = paper();
        p.pump_ghz = -1.0;
        assert!(p.validate().is_err());
        let mut p = paper();
        p.emitter_levels = 4;
        assert!(p.validate().is_err());
    }

    #[test]
    fn weak_coupling_branch_is_continuous() {
        let mut p = paper();
        p.g_ghz = 3.0;
        let step = 0.01;
        let mut prev = eigenmodes(&p, &det(-20.0));
        let mut dw = -20.0 + step;
        while dw <= 20.0 {
            let m = eigenmodes(&p, &det(dw));
            assert!((m.omega_plus_ghz - prev.omega_plus_ghz).abs() <= 2.0 * step);
            assert!((m.omega_minus_ghz - prev.omega_minus_ghz).abs() <= 2.0 * step);
            // the unordered set of complex eigenvalues moves continuously
            let a = [
                Complex64::new(m.omega_plus_ghz, m.hwhm_plus_ghz),
                Complex64::new(m.omega_minus_ghz, m.hwhm_minus_ghz),
            ];
            let b = [
                Complex64::new(prev.omega_plus_ghz, prev.hwhm_plus_ghz),
                Complex64::new(prev.omega_minus_ghz, prev.hwhm_minus_ghz),
            ];
            let same = (a[0] - b[0]).norm().max((a[1] - b[1]).norm());
            let swapped = (a[0] - b[1]).norm().max((a[1] - b[0]).norm());
            assert!(same.min(swapped) <= 2.0 * step, "jump at {dw}");
            prev = m;
            dw += step;
        }
    }

    proptest::proptest! {
        #[test]
        fn width_sum_is_detuning_independent(dw in -3000.0f64..3000.0, g in 0.0f64..40.0) {
            let mut p = paper();
            p.g_ghz = g;
            let m = eigenmodes(&p, &det(dw));
            let sum = (p.gamma_x_ghz + p.gamma_m_ghz) / 2.0;
            proptest::prop_assert!((m.hwhm_plus_ghz + m.hwhm_minus_ghz - sum).abs() < 1e-12 * sum.max(1.0) * 10.0);
            proptest::prop_assert!(m.omega_plus_ghz >= m.omega_minus_ghz);
            if is_strong_coupling(&p) {
                let r = rabi_splitting(&p).unwrap();
                proptest::prop_assert!(m.splitting_ghz() >= r.ghz - 1e-9);
            }
        }

        #[test]
        fn purcell_even_and_monotone(a in 0.0f64..3000.0, b in 0.0f64..3000.0) {
            let p = SystemParams::lifetime_estimate();
            let t = |x: f64| purcell_lifetime(&p, &det(x)).unwrap().lifetime_ns;
            proptest::prop_assert!((t(a) - t(-a)).abs() <= 1e-12 * t(a));
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            proptest::prop_assert!(t(lo) <= t(hi) * (1.0 + 1e-12));
        }
    }
}
