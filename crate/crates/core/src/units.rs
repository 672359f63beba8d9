//! Conversions among wavelength, frequency and energy.
//!
//! Canonical units throughout the crate: ordinary frequency in GHz (linewidths
//! are FWHM), time in ns, wavelength in nm, energy in μeV. Generators of the
//! dynamics multiply by 2π where an angular rate is needed.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in nm·GHz.
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;
/// Planck constant in μeV per GHz.
pub const PLANCK: f64 = 4.135_667_696;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    /// nm·GHz
    pub c: f64,
    /// μeV/GHz
    pub h: f64,
}

impl PhysicalConstants {
    pub const CODATA: PhysicalConstants = PhysicalConstants {
        c: SPEED_OF_LIGHT,
        h: PLANCK,
    };
}

/// Energy (μeV) to ordinary frequency (GHz).
pub fn energy_to_frequency(energy_uev: f64) -> f64 {
    energy_uev / PLANCK
}

/// Ordinary frequency (GHz) to energy (μeV).
pub fn frequency_to_energy(freq_ghz: f64) -> f64 {
    freq_ghz * PLANCK
}

pub fn wavelength_to_frequency(lambda_nm: f64) -> Result<f64> {
    if !(lambda_nm > 0.0) || !lambda_nm.is_finite() {
        return Err(Error::invalid(format!(
            "wavelength must be positive, got {lambda_nm}"
        )));
    }
    Ok(SPEED_OF_LIGHT / lambda_nm)
}

pub fn frequency_to_wavelength(freq_ghz: f64) -> Result<f64> {
    if !(freq_ghz > 0.0) || !freq_ghz.is_finite() {
        return Err(Error::invalid(format!(
            "frequency must be positive, got {freq_ghz}"
        )));
    }
    Ok(SPEED_OF_LIGHT / freq_ghz)
}

fn check_reference(lambda_ref_nm: f64) -> Result<()> {
    if !(lambda_ref_nm > 0.0) || !lambda_ref_nm.is_finite() {
        return Err(Error::invalid(format!(
            "reference wavelength must be positive, got {lambda_ref_nm}"
        )));
    }
    Ok(())
}

/// First-order wavelength detuning to frequency detuning: Δν = c·Δλ/λ_ref².
pub fn detuning_nm_to_ghz(dl_nm: f64, lambda_ref_nm: f64) -> Result<f64> {
    check_reference(lambda_ref_nm)?;
    Ok(SPEED_OF_LIGHT * dl_nm / (lambda_ref_nm * lambda_ref_nm))
}

/// Inverse of [`detuning_nm_to_ghz`].
pub fn detuning_ghz_to_nm(dw_ghz: f64, lambda_ref_nm: f64) -> Result<f64> {
    check_reference(lambda_ref_nm)?;
    Ok(dw_ghz * lambda_ref_nm * lambda_ref_nm / SPEED_OF_LIGHT)
}

/// Quality factor Q = λ/Δλ.
pub fn q_factor(lambda_nm: f64, fwhm_nm: f64) -> Result<f64> {
    if !(lambda_nm > 0.0) || !(fwhm_nm > 0.0) {
        return Err(Error::invalid(
            "q_factor needs positive wavelength and linewidth",
        ));
    }
    Ok(lambda_nm / fwhm_nm)
}

/// Lifetime τ = 1/(2π·γ) for a FWHM γ in GHz; result in ns.
pub fn lifetime_from_fwhm(gamma_ghz: f64) -> Result<f64> {
    if !(gamma_ghz > 0.0) {
        return Err(Error::invalid(format!(
            "linewidth must be positive, got {gamma_ghz}"
        )));
    }
    Ok(1.0 / (TAU * gamma_ghz))
}

/// FWHM in GHz of a Lorentzian line whose population lifetime is `tau_ns`.
pub fn fwhm_from_lifetime(tau_ns: f64) -> Result<f64> {
    if !(tau_ns > 0.0) {
        return Err(Error::invalid(format!(
            "lifetime must be positive, got {tau_ns}"
        )));
    }
    Ok(1.0 / (TAU * tau_ns))
}

/// Exciton–cavity detuning carried in both wavelength and frequency form.
///
/// Sign convention: `dl_nm = λ_x − λ_m` and `dw_ghz = ν_m − ν_x`; both are
/// positive when the cavity is blue of the exciton.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detuning {
    pub dl_nm: f64,
    pub dw_ghz: f64,
    pub lambda_ref_nm: f64,
}

impl Detuning {
    pub fn from_nm(dl_nm: f64, lambda_ref_nm: f64) -> Result<Self> {
        Ok(Detuning {
            dl_nm,
            dw_ghz: detuning_nm_to_ghz(dl_nm, lambda_ref_nm)?,
            lambda_ref_nm,
        })
    }

    pub fn from_ghz(dw_ghz: f64, lambda_ref_nm: f64) -> Result<Self> {
        Ok(Detuning {
            dl_nm: detuning_ghz_to_nm(dw_ghz, lambda_ref_nm)?,
            dw_ghz,
            lambda_ref_nm,
        })
    }

    pub fn zero(lambda_ref_nm: f64) -> Self {
        Detuning {
            dl_nm: 0.0,
            dw_ghz: 0.0,
            lambda_ref_nm,
        }
    }

    /// Angular detuning in rad/ns.
    pub fn angular(&self) -> f64 {
        TAU * self.dw_ghz
    }
}
