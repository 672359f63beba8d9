//! Sampled spectra on a frequency-offset axis.

use crate::error::{Error, Result};
use crate::units::{frequency_to_wavelength, wavelength_to_frequency};

/// Intensity sampled on a grid of frequency offsets (GHz) from `center_ghz`.
///
/// The offset axis is the rotating frame of the cavity: offset 0 is the cavity
/// frequency and the exciton sits at `-Δ_ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub center_ghz: f64,
    pub offset_ghz: Vec<f64>,
    pub intensity: Vec<f64>,
    /// Optional named sub-spectra that sum to `intensity`.
    pub components: Vec<(String, Vec<f64>)>,
}

impl Spectrum {
    pub fn new(center_ghz: f64, offset_ghz: Vec<f64>, intensity: Vec<f64>) -> Result<Self> {
        if offset_ghz.is_empty() {
            return Err(Error::invalid("empty frequency grid"));
        }
        if offset_ghz.len() != intensity.len() {
            return Err(Error::invalid("grid and intensity lengths differ"));
        }
        check_ascending(&offset_ghz)?;
        Ok(Spectrum {
            center_ghz,
            offset_ghz,
            intensity,
            components: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.offset_ghz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset_ghz.is_empty()
    }

    /// Trapezoidal area in intensity·GHz.
    pub fn area(&self) -> f64 {
        trapz(&self.offset_ghz, &self.intensity)
    }

    pub fn peak(&self) -> f64 {
        self.intensity
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Scale intensity (and components) so the maximum is one.
    pub fn normalize_peak(&mut self) -> Result<()> {
        let peak = self.peak();
        self.scale(peak)
    }

    /// Scale intensity (and components) to unit trapezoidal area.
    pub fn normalize_area(&mut self) -> Result<()> {
        let area = self.area();
        self.scale(area)
    }

    fn scale(&mut self, by: f64) -> Result<()> {
        if !(by > 0.0) || !by.is_finite() {
            return Err(Error::numerical(format!(
                "cannot normalize spectrum by {by}"
            )));
        }
        self.intensity.iter_mut().for_each(|v| *v /= by);
        for (_, c) in self.components.iter_mut() {
            c.iter_mut().for_each(|v| *v /= by);
        }
        Ok(())
    }

    /// Absolute wavelength (nm) of every grid point.
    pub fn wavelengths_nm(&self) -> Result<Vec<f64>> {
        self.offset_ghz
            .iter()
            .map(|o| frequency_to_wavelength(self.center_ghz + o))
            .collect()
    }

    /// Largest grid spacing.
    pub fn max_spacing(&self) -> f64 {
        self.offset_ghz
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Local maxima of the intensity, refined by a parabola through the three
    /// neighbouring samples. Returns (offset, height) sorted by offset.
    pub fn local_maxima(&self, min_relative_height: f64) -> Vec<(f64, f64)> {
        let y = &self.intensity;
        let x = &self.offset_ghz;
        let peak = self.peak();
        let mut out = Vec::new();
        for i in 1..y.len().saturating_sub(1) {
            if y[i] > y[i - 1] && y[i] >= y[i + 1] && y[i] >= min_relative_height * peak {
                out.push(parabolic_vertex(
                    (x[i - 1], y[i - 1]),
                    (x[i], y[i]),
                    (x[i + 1], y[i + 1]),
                ));
            }
        }
        out
    }

    /// Full width at half maximum of the peak nearest `near_offset`, found by
    /// linear interpolation of the half-height crossings.
    pub fn fwhm_near(&self, near_offset: f64) -> Option<f64> {
        let x = &self.offset_ghz;
        let y = &self.intensity;
        let i0 = x
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - near_offset)
                    .abs()
                    .total_cmp(&(b.1 - near_offset).abs())
            })?
            .0;
        // climb to the local maximum
        let mut i = i0;
        while i + 1 < y.len() && y[i + 1] > y[i] {
            i += 1;
        }
        while i > 0 && y[i - 1] > y[i] {
            i -= 1;
        }
        let half = y[i] / 2.0;
        let mut l = i;
        while l > 0 && y[l] > half {
            l -= 1;
        }
        let mut r = i;
        while r + 1 < y.len() && y[r] > half {
            r += 1;
        }
        if y[l] > half || y[r] > half {
            return None;
        }
        let xl = x[l] + (half - y[l]) * (x[l + 1] - x[l]) / (y[l + 1] - y[l]);
        let xr = x[r - 1] + (half - y[r - 1]) * (x[r] - x[r - 1]) / (y[r] - y[r - 1]);
        Some(xr - xl)
    }
}

/// Uniform grid of `n` points from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn trapz(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xw, yw)| 0.5 * (xw[1] - xw[0]) * (yw[0] + yw[1]))
        .sum()
}

pub(crate) fn check_ascending(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("grid contains non-finite values"));
    }
    if x.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("grid must be strictly increasing"));
    }
    Ok(())
}

fn parabolic_vertex(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> (f64, f64) {
    let denom = (a.0 - b.0) * (a.0 - c.0) * (b.0 - c.0);
    if denom == 0.0 {
        return b;
    }
    let p = (c.0 * (b.1 - a.1) + b.0 * (a.1 - c.1) + a.0 * (c.1 - b.1)) / denom;
    let q = (c.0 * c.0 * (a.1 - b.1) + b.0 * b.0 * (c.1 - a.1) + a.0 * a.0 * (b.1 - c.1)) / denom;
    let r = (b.0 * c.0 * (b.0 - c.0) * a.1
        + c.0 * a.0 * (c.0 - a.0) * b.1
        + a.0 * b.0 * (a.0 - b.0) * c.1)
        / denom;
    if p >= 0.0 {
        return b;
    }
    let xv = -q / (2.0 * p);
    (xv, r - q * q / (4.0 * p))
}

/// Offset (GHz) from `center_ghz` of the absolute wavelength `lambda_nm`.
pub fn wavelength_to_offset(lambda_nm: f64, center_ghz: f64) -> Result<f64> {
    Ok(wavelength_to_frequency(lambda_nm)? - center_ghz)
}
