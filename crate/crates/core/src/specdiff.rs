//! Spectral diffusion by a slow two-state telegraph process: the exciton
//! spends a fraction f of the time at its nominal detuning and the rest
//! shifted far from the cavity. The recorded spectrum is the dwell-weighted
//! mixture, a triplet whose central line is the bare cavity.

use serde::{Deserialize, Serialize};

use crate::dynamics::{emission_spectrum, EmissionChannel};
use crate::error::{Error, Result};
use crate::fitkit::{fit_lorentzians, LorentzFit, LorentzPeak};
use crate::instrument::{convolve_spectrum, InstrumentConfig};
use crate::polariton::{eigenmodes, spectral_function, AmplitudeModel, SystemParams};
use crate::spectrum::Spectrum;
use crate::units::{frequency_to_wavelength, Detuning};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelegraphConfig {
    /// Dwell fraction in the near-resonant state.
    pub resonant_fraction: f64,
    /// Exciton frequency shift (GHz) in the far state; `None` means −20g.
    pub detuned_offset_ghz: Option<f64>,
}

impl Default for TelegraphConfig {
    fn default() -> Self {
        TelegraphConfig {
            resonant_fraction: 0.55,
            detuned_offset_ghz: None,
        }
    }
}

impl TelegraphConfig {
    pub fn offset_ghz(&self, p: &SystemParams) -> f64 {
        self.detuned_offset_ghz.unwrap_or(-20.0 * p.g_ghz)
    }

    pub fn validate(&self, p: &SystemParams) -> Result<()> {
        let f = self.resonant_fraction;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::invalid(format!(
                "resonant_fraction must lie in [0, 1], got {f}"
            )));
        }
        let off = self.offset_ghz(p);
        if !(off.abs() > 5.0 * p.g_ghz) {
            return Err(Error::invalid(format!(
                "detuned offset {off} GHz is not far from resonance (needs |offset| > 5g = {} GHz)",
                5.0 * p.g_ghz
            )));
        }
        Ok(())
    }

    /// Detuning of the far state. A red shift of the exciton raises Δ_ω.
    pub fn shifted(&self, p: &SystemParams, det: &Detuning) -> Result<Detuning> {
        Detuning::from_ghz(det.dw_ghz - self.offset_ghz(p), det.lambda_ref_nm)
    }
}

/// How each regime's spectrum is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TermModel {
    /// Two-Lorentzian spectral function with photon-fraction weights.
    #[default]
    Analytic,
    /// Cavity emission spectrum of the master equation.
    Master,
}

/// Both regimes' spectra, each normalized to unit area.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSpectra {
    pub resonant: Spectrum,
    pub detuned: Spectrum,
    pub detuned_detuning: Detuning,
}

pub fn regime_spectra(
    p: &SystemParams,
    det: &Detuning,
    cfg: &TelegraphConfig,
    grid_ghz: &[f64],
    model: TermModel,
) -> Result<RegimeSpectra> {
    cfg.validate(p)?;
    let far = cfg.shifted(p, det)?;
    let term = |d: &Detuning| -> Result<Spectrum> {
        let mut s = match model {
            TermModel::Analytic => {
                spectral_function(grid_ghz, p, d, AmplitudeModel::HopfieldWeighted)?
            }
            TermModel::Master => emission_spectrum(p, d, grid_ghz, EmissionChannel::Cavity)?,
        };
        s.components.clear();
        s.normalize_area()?;
        Ok(s)
    };
    let resonant = term(det)?;
    let detuned = term(&far)?;
    Ok(RegimeSpectra {
        resonant,
        detuned,
        detuned_detuning: far,
    })
}

/// f·S_resonant + (1−f)·S_detuned with both terms of unit area.
pub fn mix(terms: &RegimeSpectra, f: f64) -> Result<Spectrum> {
    let y = terms
        .resonant
        .intensity
        .iter()
        .zip(&terms.detuned.intensity)
        .map(|(a, b)| f * a + (1.0 - f) * b)
        .collect();
    let mut s = Spectrum::new(
        terms.resonant.center_ghz,
        terms.resonant.offset_ghz.clone(),
        y,
    )?;
    s.components = vec![
        (
            "resonant".into(),
            terms.resonant.intensity.iter().map(|v| f * v).collect(),
        ),
        (
            "detuned".into(),
            terms
                .detuned
                .intensity
                .iter()
                .map(|v| (1.0 - f) * v)
                .collect(),
        ),
    ];
    Ok(s)
}

/// Mixture spectrum and its three-Lorentzian decomposition, peaks ordered
/// by frequency (the central one is index 1).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusedSpectrum {
    pub spectrum: Spectrum,
    pub fit: LorentzFit,
}

impl DiffusedSpectrum {
    pub fn central(&self) -> LorentzPeak {
        self.fit.peaks[1]
    }

    pub fn central_area_fraction(&self) -> f64 {
        self.fit.area_fractions[1]
    }

    /// Central line center as an absolute wavelength.
    pub fn central_wavelength_nm(&self) -> Result<f64> {
        frequency_to_wavelength(self.spectrum.center_ghz + self.central().center)
    }
}

fn initial_triplet(p: &SystemParams, det: &Detuning, far: &Detuning) -> Vec<LorentzPeak> {
    let near = eigenmodes(p, det);
    let cav = eigenmodes(p, far);
    let central = if cav.photon_fraction_plus >= cav.photon_fraction_minus {
        (cav.omega_plus_ghz, cav.hwhm_plus_ghz)
    } else {
        (cav.omega_minus_ghz, cav.hwhm_minus_ghz)
    };
    vec![
        LorentzPeak {
            area: 0.3,
            center: near.omega_minus_ghz,
            fwhm: 2.0 * near.hwhm_minus_ghz,
        },
        LorentzPeak {
            area: 0.4,
            center: central.0,
            fwhm: 2.0 * central.1,
        },
        LorentzPeak {
            area: 0.3,
            center: near.omega_plus_ghz,
            fwhm: 2.0 * near.hwhm_plus_ghz,
        },
    ]
}

fn check_coverage(grid: &[f64], peaks: &[LorentzPeak]) -> Result<()> {
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    for q in peaks {
        if q.center - q.fwhm < lo || q.center + q.fwhm > hi {
            return Err(Error::invalid(format!(
                "grid [{lo}, {hi}] GHz does not cover the line at {} GHz (FWHM {})",
                q.center, q.fwhm
            )));
        }
    }
    Ok(())
}

/// Triplet fit of a mixture. With an instrument the spectrum is convolved
/// first and the fit uses the instrument response as forward model.
fn fit_mixture(
    s: Spectrum,
    init: &[LorentzPeak],
    instrument: Option<&InstrumentConfig>,
) -> Result<DiffusedSpectrum> {
    let (spectrum, kernel) = match instrument {
        Some(cfg) if cfg.spectral_resolution_pm > 0.0 => {
            let c = convolve_spectrum(&s, cfg)?;
            let w = cfg.resolution_ghz(frequency_to_wavelength(s.center_ghz)?)?;
            (c, Some(w))
        }
        _ => (s, None),
    };
    let fit = fit_lorentzians(&spectrum, 3, Some(init), kernel)?;
    Ok(DiffusedSpectrum { spectrum, fit })
}

pub fn averaged_spectrum(
    p: &SystemParams,
    det: &Detuning,
    cfg: &TelegraphConfig,
    grid_ghz: &[f64],
    model: TermModel,
    instrument: Option<&InstrumentConfig>,
) -> Result<DiffusedSpectrum> {
    let terms = regime_spectra(p, det, cfg, grid_ghz, model)?;
    let init = initial_triplet(p, det, &terms.detuned_detuning);
    check_coverage(grid_ghz, &init)?;
    fit_mixture(mix(&terms, cfg.resonant_fraction)?, &init, instrument)
}

/// Dwell fraction f at which the fitted central line carries `target` of
/// the total line area (bisection; the central fraction falls with f).
pub fn solve_fraction(
    p: &SystemParams,
    det: &Detuning,
    cfg: &TelegraphConfig,
    grid_ghz: &[f64],
    model: TermModel,
    target: f64,
) -> Result<f64> {
    if !(0.0 < target && target < 1.0) {
        return Err(Error::invalid("target area fraction must lie in (0, 1)"));
    }
    let terms = regime_spectra(p, det, cfg, grid_ghz, model)?;
    let init = initial_triplet(p, det, &terms.detuned_detuning);
    check_coverage(grid_ghz, &init)?;
    let central = |f: f64| -> Result<f64> {
        Ok(fit_mixture(mix(&terms, f)?, &init, None)?
            .fit
            .area_fractions[1])
    };
    let (mut lo, mut hi) = (0.05, 0.95);
    let (clo, chi) = (central(lo)?, central(hi)?);
    if !((clo - target) * (chi - target) < 0.0) {
        return Err(Error::numerical(format!(
            "central fraction {clo}..{chi} over f ∈ [0.05, 0.95] does not bracket {target}"
        )));
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if (central(mid)? - target) * (clo - target) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-7 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Inverts a fitted central area fraction to a dwell fraction, using the
/// photon weight of the cavity-like line in the far state.
pub fn fraction_from_central_area(central_fraction: f64, p: &SystemParams, far: &Detuning) -> f64 {
    let m = eigenmodes(p, far);
    let w = m.photon_fraction_plus.max(m.photon_fraction_minus);
    1.0 - central_fraction / w
}
