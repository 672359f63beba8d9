//! Measurement-chain emulation: spectrometer resolution, detector timing
//! jitter and detection efficiency.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::spectrum::Spectrum;
use crate::trajectories::ClickRecord;
use crate::units::{detuning_nm_to_ghz, frequency_to_wavelength};

/// FWHM of a Gaussian per unit standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstrumentConfig {
    /// Gaussian FWHM of the spectrometer response; zero disables convolution.
    pub spectral_resolution_pm: f64,
    /// Gaussian FWHM of the detector timing response; zero disables jitter.
    pub apd_irf_ps: f64,
    pub efficiency: f64,
    pub rep_rate_mhz: f64,
}

impl Default for InstrumentConfig {
    fn default() -> Self {
        InstrumentConfig {
            spectral_resolution_pm: 21.0,
            apd_irf_ps: 70.0,
            efficiency: 1.0,
            rep_rate_mhz: 80.0,
        }
    }
}

impl InstrumentConfig {
    pub fn ideal() -> Self {
        InstrumentConfig {
            spectral_resolution_pm: 0.0,
            apd_irf_ps: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spectral_resolution_pm >= 0.0) || !(self.apd_irf_ps >= 0.0) {
            return Err(Error::invalid(
                "resolution and IRF widths must be non-negative",
            ));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::invalid(format!(
                "efficiency must lie in (0, 1], got {}",
                self.efficiency
            )));
        }
        if !(self.rep_rate_mhz > 0.0) {
            return Err(Error::invalid("rep_rate_mhz must be positive"));
        }
        Ok(())
    }

    /// Spectrometer FWHM in GHz at wavelength `lambda_nm`.
    pub fn resolution_ghz(&self, lambda_nm: f64) -> Result<f64> {
        detuning_nm_to_ghz(self.spectral_resolution_pm * 1e-3, lambda_nm)
    }
}

fn trapz_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = 0.5 * (x[i + 1] - x[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

/// Gaussian smoothing on a possibly non-uniform grid. The kernel is
/// renormalized over the grid, so the trapezoidal area is conserved exactly.
pub fn gaussian_smooth(x: &[f64], y: &[f64], fwhm: f64) -> Vec<f64> {
    if fwhm == 0.0 || x.len() < 2 {
        return y.to_vec();
    }
    let sigma = fwhm / FWHM_PER_SIGMA;
    let reach = 8.0 * sigma;
    let w = trapz_weights(x);
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mass = y[i] * w[i];
        if mass == 0.0 {
            continue;
        }
        let lo = x.partition_point(|&v| v < x[i] - reach);
        let hi = x.partition_point(|&v| v <= x[i] + reach);
        let k: Vec<f64> = (lo..hi)
            .map(|j| {
                let d = (x[j] - x[i]) / sigma;
                (-0.5 * d * d).exp() * w[j]
            })
            .collect();
        let norm: f64 = k.iter().sum();
        for (j, kj) in (lo..hi).zip(k) {
            if w[j] > 0.0 {
                out[j] += mass * kj / norm / w[j];
            }
        }
    }
    out
}

/// Convolves a spectrum (and its components) with the spectrometer response.
pub fn convolve_spectrum(s: &Spectrum, cfg: &InstrumentConfig) -> Result<Spectrum> {
    cfg.validate()?;
    if cfg.spectral_resolution_pm == 0.0 {
        return Ok(s.clone());
    }
    let lambda = frequency_to_wavelength(s.center_ghz)?;
    let fwhm = cfg.resolution_ghz(lambda)?;
    let spacing = s.max_spacing();
    if spacing >= fwhm / 4.0 {
        return Err(Error::invalid(format!(
            "grid spacing {spacing} GHz under-resolves the {fwhm} GHz instrument response"
        )));
    }
    let mut out = Spectrum::new(
        s.center_ghz,
        s.offset_ghz.clone(),
        gaussian_smooth(&s.offset_ghz, &s.intensity, fwhm),
    )?;
    out.components = s
        .components
        .iter()
        .map(|(name, c)| (name.clone(), gaussian_smooth(&s.offset_ghz, c, fwhm)))
        .collect();
    Ok(out)
}

/// Detector model: each click survives with probability `efficiency` and its
/// time is shifted by Gaussian jitter of FWHM `apd_irf_ps`. Every click draws
/// from its own random stream, indexed by position.
pub fn jitter_and_thin(
    clicks: &[ClickRecord],
    cfg: &InstrumentConfig,
    seed: u64,
) -> Result<Vec<ClickRecord>> {
    cfg.validate()?;
    let sigma_ns = cfg.apd_irf_ps * 1e-3 / FWHM_PER_SIGMA;
    let normal = if sigma_ns > 0.0 {
        Some(Normal::new(0.0, sigma_ns).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut out: Vec<ClickRecord> = clicks
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let mut rng = stream(seed, Domain::Detector, i as u64);
            if cfg.efficiency < 1.0 && rng.random::<f64>() >= cfg.efficiency {
                return None;
            }
            let dt = normal.as_ref().map(|n| n.sample(&mut rng)).unwrap_or(0.0);
            Some(ClickRecord {
                channel: c.channel,
                time_ns: c.time_ns + dt,
            })
        })
        .collect();
    out.sort_by(|a, b| a.time_ns.total_cmp(&b.time_ns));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{linspace, trapz};
    use crate::units::wavelength_to_frequency;

    fn lorentz(x: &[f64], c: f64, fwhm: f64) -> Vec<f64> {
        x.iter()
            .map(|v| (fwhm / 2.0).powi(2) / ((v - c).powi(2) + (fwhm / 2.0).powi(2)))
            .collect()
    }

    fn spectrum(y: Vec<f64>, x: Vec<f64>) -> Spectrum {
        Spectrum::new(wavelength_to_frequency(942.5).unwrap(), x, y).unwrap()
    }

    #[test]
    fn delta_line_becomes_resolution_gaussian() {
        let x = linspace(-60.0, 60.0, 2401);
        let mut y = vec![0.0; x.len()];
        y[1200] = 1.0;
        let out = convolve_spectrum(
            &spectrum(y.clone(), x.clone()),
            &InstrumentConfig::default(),
        )
        .unwrap();
        let fwhm_ghz = InstrumentConfig::default().resolution_ghz(942.5).unwrap();
        assert!((fwhm_ghz - 7.09).abs() < 0.01);
        let w = out.fwhm_near(0.0).unwrap();
        assert!((w - fwhm_ghz).abs() < 0.01, "{w}");
        assert!((out.area() - trapz(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn area_conserved_at_edges() {
        let x = linspace(-30.0, 30.0, 601);
        let y = lorentz(&x, 25.0, 10.0);
        let s = spectrum(y, x);
        let out = convolve_spectrum(&s, &InstrumentConfig::default()).unwrap();
        assert!(((out.area() - s.area()) / s.area()).abs() < 1e-6);
    }

    #[test]
    fn voigt_width_matches_olivero_approximation() {
        let lam = 942.5;
        let fl = detuning_nm_to_ghz(0.071, lam).unwrap();
        let x = linspace(-400.0, 400.0, 16001);
        let s = spectrum(lorentz(&x, 0.0, fl), x);
        let out = convolve_spectrum(&s, &InstrumentConfig::default()).unwrap();
        let w_nm = crate::units::detuning_ghz_to_nm(out.fwhm_near(0.0).unwrap(), lam).unwrap();
        let fg = 0.021;
        let olivero = 0.5346 * 0.071 + (0.2166 * 0.071f64.powi(2) + fg * fg).sqrt();
        assert!(
            (w_nm - olivero).abs() / olivero < 0.005,
            "{w_nm} vs {olivero}"
        );
    }

    #[test]
    fn identity_and_rejections() {
        let x = linspace(-10.0, 10.0, 11);
        let s = spectrum(lorentz(&x, 0.0, 3.0), x);
        assert_eq!(
            convolve_spectrum(&s, &InstrumentConfig::ideal()).unwrap(),
            s
        );
        assert!(convolve_spectrum(&s, &InstrumentConfig::default()).is_err());
        let bad = InstrumentConfig {
            efficiency: 1.5,
            ..InstrumentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn convolution_preserves_order_and_commutes_with_scaling() {
        let x = linspace(-100.0, 100.0, 2001);
        let y: Vec<f64> = lorentz(&x, -40.0, 8.0)
            .iter()
            .zip(lorentz(&x, 30.0, 12.0))
            .map(|(a, b)| a + 0.5 * b)
            .collect();
        let s = spectrum(y, x);
        let a = convolve_spectrum(&s, &InstrumentConfig::default()).unwrap();
        let peaks = a.local_maxima(0.1);
        assert_eq!(peaks.len(), 2);
        assert!(peaks[0].0 < peaks[1].0);
        let mut scaled = s.clone();
        scaled.normalize_peak().unwrap();
        let mut b = convolve_spectrum(&scaled, &InstrumentConfig::default()).unwrap();
        let mut a2 = a.clone();
        a2.normalize_peak().unwrap();
        b.normalize_peak().unwrap();
        for (u, v) in a2.intensity.iter().zip(&b.intensity) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn ideal_detector_is_identity() {
        let clicks: Vec<ClickRecord> = (0..100)
            .map(|k| ClickRecord {
                channel: "cavity_loss",
                time_ns: k as f64 * 0.5,
            })
            .collect();
        let out = jitter_and_thin(&clicks, &InstrumentConfig::ideal(), 1).unwrap();
        assert_eq!(out, clicks);
    }

    #[test]
    fn thinning_is_rate_linear() {
        let n = 200_000;
        let clicks: Vec<ClickRecord> = (0..n)
            .map(|k| ClickRecord {
                channel: "cavity_loss",
                time_ns: k as f64,
            })
            .collect();
        for eff in [0.1, 0.5, 0.9] {
            let cfg = InstrumentConfig {
                efficiency: eff,
                apd_irf_ps: 0.0,
                ..InstrumentConfig::default()
            };
            let kept = jitter_and_thin(&clicks, &cfg, 7).unwrap().len() as f64;
            let sigma = (n as f64 * eff * (1.0 - eff)).sqrt();
            assert!((kept - n as f64 * eff).abs() < 4.0 * sigma, "{eff}: {kept}");
        }
    }

    #[test]
    fn jitter_has_configured_width() {
        let n = 100_000;
        let clicks: Vec<ClickRecord> = (0..n)
            .map(|k| ClickRecord {
                channel: "cavity_loss",
                time_ns: k as f64 * 10.0,
            })
            .collect();
        let cfg = InstrumentConfig {
            apd_irf_ps: 400.0,
            ..InstrumentConfig::default()
        };
        let out = jitter_and_thin(&clicks, &cfg, 3).unwrap();
        let var: f64 = out
            .iter()
            .map(|c| (c.time_ns - (c.time_ns / 10.0).round() * 10.0).powi(2))
            .sum::<f64>()
            / n as f64;
        let want = 0.4 / FWHM_PER_SIGMA;
        assert!((var.sqrt() - want).abs() / want < 0.02);
    }
}
