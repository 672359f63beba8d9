//! Levenberg–Marquardt least squares and the fit models used to extract
//! coupling parameters: multi-Lorentzian spectra, the polariton
//! anti-crossing, lifetime versus detuning and (IRF-convolved) exponential
//! decays.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::hbt::Histogram;
use crate::instrument::{gaussian_smooth, FWHM_PER_SIGMA};
use crate::polariton::{eigenmodes, purcell_rate, SystemParams};
use crate::spectrum::Spectrum;
use crate::units::{
    detuning_nm_to_ghz, frequency_to_wavelength, wavelength_to_frequency, Detuning,
};

/// Best-fit parameters with Jacobian-based standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub names: Vec<String>,
    pub params: Vec<f64>,
    pub stderr: Vec<f64>,
    pub residual_norm: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// Half squared residual norm after every accepted step.
    pub cost_history: Vec<f64>,
}

impl FitResult {
    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.params[i])
    }

    pub fn stderr_of(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.stderr[i])
    }

    fn push(&mut self, name: &str, value: f64, stderr: f64) {
        self.names.push(name.to_string());
        self.params.push(value);
        self.stderr.push(stderr);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the scaled gradient, i.e. the cosine between
    /// the residual and each Jacobian column once ‖r‖ exceeds one.
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub initial_damping: f64,
    /// Standard errors from the raw inverse normal matrix (residuals already
    /// divided by absolute σ) instead of scaling by the reduced χ².
    pub absolute_sigma: bool,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 500,
            gradient_tol: 1e-8,
            step_tol: 1e-14,
            initial_damping: 1e-3,
            absolute_sigma: false,
        }
    }
}

type ResidualFn<'a> = dyn Fn(&[f64]) -> Vec<f64> + 'a;
type JacobianFn<'a> = dyn Fn(&[f64]) -> DMatrix<f64> + 'a;

/// Central-difference Jacobian with relative step 1e-6.
pub fn numeric_jacobian(f: &ResidualFn, x: &[f64]) -> DMatrix<f64> {
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let h = 1e-6 * x[k].abs().max(1e-6);
        xp[k] = x[k] + h;
        let rp = f(&xp);
        xp[k] = x[k] - h;
        let rm = f(&xp);
        xp[k] = x[k];
        for i in 0..m {
            j[(i, k)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    j
}

fn cost_of(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// max_k |J_kᵀ r| / (‖J_k‖ · max(‖r‖, 1)).
fn scaled_gradient(j: &DMatrix<f64>, r: &DVector<f64>) -> f64 {
    let rn = r.norm().max(1.0);
    let g = j.transpose() * r;
    (0..j.ncols())
        .map(|k| {
            let cn = j.column(k).norm();
            if cn == 0.0 {
                0.0
            } else {
                g[k].abs() / (cn * rn)
            }
        })
        .fold(0.0, f64::max)
}

/// Covariance (JᵀJ)⁻¹ via SVD; directions with vanishing curvature give
/// infinite uncertainty on the parameters they involve.
fn covariance_diag(j: &DMatrix<f64>) -> Vec<f64> {
    let n = j.ncols();
    let jtj = j.transpose() * j;
    let svd = jtj.svd(true, true);
    let (u, s) = (svd.u.unwrap(), svd.singular_values);
    let smax = s.max();
    let mut diag = vec![0.0; n];
    for k in 0..n {
        if s[k] > 1e-13 * smax && s[k] > 0.0 {
            for i in 0..n {
                diag[i] += u[(i, k)] * u[(i, k)] / s[k];
            }
        } else {
            for i in 0..n {
                if u[(i, k)].abs() > 1e-3 {
                    diag[i] = f64::INFINITY;
                }
            }
        }
    }
    diag
}

/// Minimizes ½‖r(x)‖² with Marquardt-scaled damping (×10 on rejection, ÷10
/// on acceptance). Steps are accepted only if they lower the cost.
pub fn levenberg_marquardt(
    residuals: &ResidualFn,
    jacobian: Option<&JacobianFn>,
    x0: &[f64],
    names: &[&str],
    opts: LmOptions,
) -> Result<FitResult> {
    let n = x0.len();
    if names.len() != n {
        return Err(Error::invalid(
            "parameter names and initial values differ in length",
        ));
    }
    let mut x = x0.to_vec();
    let mut r = residuals(&x);
    let m = r.len();
    if m < n {
        return Err(Error::invalid(format!(
            "{m} residuals cannot determine {n} parameters"
        )));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "residuals are not finite at the initial point",
        ));
    }
    let jac = |x: &[f64]| match jacobian {
        Some(f) => f(x),
        None => numeric_jacobian(residuals, x),
    };
    let mut cost = cost_of(&r);
    let mut history = vec![cost];
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;
    let mut j = jac(&x);
    for _ in 0..opts.max_iterations {
        iterations += 1;
        let rv = DVector::from_column_slice(&r);
        if cost == 0.0 || scaled_gradient(&j, &rv) < opts.gradient_tol {
            break;
        }
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &rv;
        let diag: Vec<f64> = (0..n).map(|k| jtj[(k, k)].max(1e-300)).collect();
        let mut accepted = false;
        let mut small_step = false;
        while lambda < 1e20 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * diag[k];
            }
            let step = match a.cholesky() {
                Some(c) => c.solve(&(-&g)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rn = residuals(&xn);
            let cn = cost_of(&rn);
            if cn.is_finite() && cn < cost {
                let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                small_step = step.norm() <= opts.step_tol * (xnorm + opts.step_tol);
                x = xn;
                r = rn;
                cost = cn;
                history.push(cost);
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
        j = jac(&x);
        if small_step {
            break;
        }
    }
    let rv = DVector::from_column_slice(&r);
    let converged = cost == 0.0 || scaled_gradient(&j, &rv) < opts.gradient_tol.max(1e-6);
    let dof = (m - n).max(1) as f64;
    let s2 = if opts.absolute_sigma {
        1.0
    } else {
        2.0 * cost / dof
    };
    let stderr = covariance_diag(&j)
        .into_iter()
        .map(|v| (v * s2).sqrt())
        .collect();
    Ok(FitResult {
        names: names.iter().map(|s| s.to_string()).collect(),
        params: x,
        stderr,
        residual_norm: (2.0 * cost).sqrt(),
        n_iterations: iterations,
        converged,
        cost_history: history,
    })
}

// ---------------------------------------------------------------------------
// Lorentzians

/// One area-normalized Lorentzian line A·(w/2π)/((x−c)² + (w/2)²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorentzPeak {
    pub area: f64,
    pub center: f64,
    pub fwhm: f64,
}

pub fn lorentzian(x: f64, p: &LorentzPeak) -> f64 {
    let hw = p.fwhm / 2.0;
    p.area * hw / PI / ((x - p.center).powi(2) + hw * hw)
}

/// Peaks sorted by center, plus area fractions of the total line area.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzFit {
    pub fit: FitResult,
    pub peaks: Vec<LorentzPeak>,
    pub background: f64,
    pub area_fractions: Vec<f64>,
}

fn moving_average(y: &[f64], half: usize) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(y.len());
            y[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Initial peaks from local maxima of the smoothed data.
pub fn initial_peaks(data: &Spectrum, n_peaks: usize) -> Result<Vec<LorentzPeak>> {
    let smooth = moving_average(&data.intensity, (data.len() / 200).max(1));
    let s = Spectrum::new(data.center_ghz, data.offset_ghz.clone(), smooth)?;
    let mut maxima = s.local_maxima(0.02);
    maxima.sort_by(|a, b| b.1.total_cmp(&a.1));
    maxima.truncate(n_peaks);
    if maxima.len() < n_peaks {
        return Err(Error::numerical(format!(
            "found {} local maxima, {n_peaks} peaks requested",
            maxima.len()
        )));
    }
    maxima.sort_by(|a, b| a.0.total_cmp(&b.0));
    let span = data.offset_ghz[data.len() - 1] - data.offset_ghz[0];
    Ok(maxima
        .iter()
        .map(|&(c, h)| {
            let w = s
                .fwhm_near(c)
                .unwrap_or(span / 20.0)
                .min(span / (2.0 * n_peaks as f64));
            LorentzPeak {
                area: h * PI * w / 2.0,
                center: c,
                fwhm: w,
            }
        })
        .collect())
}

/// Sum of `n_peaks` Lorentzians plus a constant background, optionally
/// convolved with a Gaussian instrument response of FWHM `kernel_fwhm`.
pub fn fit_lorentzians(
    data: &Spectrum,
    n_peaks: usize,
    init: Option<&[LorentzPeak]>,
    kernel_fwhm: Option<f64>,
) -> Result<LorentzFit> {
    if !(1..=3).contains(&n_peaks) {
        return Err(Error::invalid("n_peaks must be 1, 2 or 3"));
    }
    if data.len() < 3 * n_peaks + 1 {
        return Err(Error::invalid(
            "too few data points for the requested peaks",
        ));
    }
    let start = match init {
        Some(p) if p.len() == n_peaks => p.to_vec(),
        Some(_) => return Err(Error::invalid("initial peak count differs from n_peaks")),
        None => initial_peaks(data, n_peaks)?,
    };
    let x = data.offset_ghz.clone();
    let y = data.intensity.clone();
    let unpack = |p: &[f64]| -> Vec<LorentzPeak> {
        (0..n_peaks)
            .map(|k| LorentzPeak {
                area: p[3 * k],
                center: p[3 * k + 1],
                fwhm: p[3 * k + 2],
            })
            .collect()
    };
    let model = |p: &[f64]| -> Vec<f64> {
        let peaks = unpack(p);
        let bg = p[3 * n_peaks];
        let raw: Vec<f64> = x
            .iter()
            .map(|&v| peaks.iter().map(|q| lorentzian(v, q)).sum::<f64>())
            .collect();
        let lines = match kernel_fwhm {
            Some(w) if w > 0.0 => gaussian_smooth(&x, &raw, w),
            _ => raw,
        };
        lines.into_iter().map(|v| v + bg).collect()
    };
    let residuals =
        |p: &[f64]| -> Vec<f64> { model(p).iter().zip(&y).map(|(m, d)| m - d).collect() };
    let analytic = |p: &[f64]| -> DMatrix<f64> {
        let mut j = DMatrix::zeros(x.len(), 3 * n_peaks + 1);
        for (i, &v) in x.iter().enumerate() {
            for k in 0..n_peaks {
                let (a, c, w) = (p[3 * k], p[3 * k + 1], p[3 * k + 2]);
                let hw = w / 2.0;
                let d = v - c;
                let den = d * d + hw * hw;
                j[(i, 3 * k)] = hw / PI / den;
                j[(i, 3 * k + 1)] = a * hw / PI * 2.0 * d / (den * den);
                j[(i, 3 * k + 2)] = a / (2.0 * PI) * (d * d - hw * hw) / (den * den);
            }
            j[(i, 3 * n_peaks)] = 1.0;
        }
        j
    };
    let mut x0: Vec<f64> = start
        .iter()
        .flat_map(|p| [p.area, p.center, p.fwhm])
        .collect();
    x0.push(0.0);
    let names: Vec<String> = (0..n_peaks)
        .flat_map(|k| {
            [
                format!("area_{k}"),
                format!("center_{k}"),
                format!("fwhm_{k}"),
            ]
        })
        .chain(["background".to_string()])
        .collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let jac: Option<&JacobianFn> = if kernel_fwhm.is_some_and(|w| w > 0.0) {
        None
    } else {
        Some(&analytic)
    };
    let mut fit = levenberg_marquardt(&residuals, jac, &x0, &name_refs, LmOptions::default())?;
    for k in 0..n_peaks {
        fit.params[3 * k + 2] = fit.params[3 * k + 2].abs();
    }
    let mut peaks = unpack(&fit.params);
    peaks.sort_by(|a, b| a.center.total_cmp(&b.center));
    let total: f64 = peaks.iter().map(|p| p.area).sum();
    let area_fractions = peaks.iter().map(|p| p.area / total).collect();
    let background = fit.params[3 * n_peaks];
    if !fit.converged && fit.n_iterations >= LmOptions::default().max_iterations {
        return Err(Error::numerical(format!(
            "Lorentzian fit did not converge; last parameters {:?}",
            fit.params
        )));
    }
    Ok(LorentzFit {
        fit,
        peaks,
        background,
        area_fractions,
    })
}

// ---------------------------------------------------------------------------
// Anti-crossing

/// Peak wavelengths observed at one nominal detuning Δλ = λ_x − λ_m.
#[derive(Debug, Clone, PartialEq)]
pub struct AnticrossPoint {
    pub dl_nm: f64,
    /// One or two peak wavelengths.
    pub peaks_nm: Vec<f64>,
}

/// Quantities held fixed in the anti-crossing fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnticrossConfig {
    pub gamma_x_ghz: f64,
    pub gamma_m_ghz: f64,
    /// Fit a global offset added to every Δλ.
    pub fit_offset: bool,
}

impl Default for AnticrossConfig {
    fn default() -> Self {
        let p = SystemParams::default();
        AnticrossConfig {
            gamma_x_ghz: p.gamma_x_ghz,
            gamma_m_ghz: p.gamma_m_ghz,
            fit_offset: false,
        }
    }
}

/// Polariton wavelengths (upper, lower) for an exciton at `lambda_x_nm` and a
/// cavity at `lambda_x_nm − dl_nm`. The upper branch has the shorter wavelength.
pub fn anticrossing_branches(
    g_ghz: f64,
    lambda_x_nm: f64,
    dl_nm: f64,
    cfg: &AnticrossConfig,
) -> Result<(f64, f64)> {
    let lambda_m = lambda_x_nm - dl_nm;
    let p = SystemParams {
        g_ghz: g_ghz.abs(),
        gamma_x_ghz: cfg.gamma_x_ghz,
        gamma_m_ghz: cfg.gamma_m_ghz,
        gamma_b_ghz: 0.0,
        lambda_x_nm,
        lambda_m_nm: lambda_m,
        ..SystemParams::default()
    };
    let det = Detuning::from_nm(dl_nm, lambda_m)?;
    let modes = eigenmodes(&p, &det);
    let nu_m = wavelength_to_frequency(lambda_m)?;
    Ok((
        frequency_to_wavelength(nu_m + modes.omega_plus_ghz)?,
        frequency_to_wavelength(nu_m + modes.omega_minus_ghz)?,
    ))
}

/// Least-squares fit of the polariton branches to measured peak wavelengths.
/// Free parameters: g, λ_x and optionally a Δλ offset; γ_x and γ_m are held
/// at the configured values. Two peaks at one detuning are assigned by
/// wavelength ordering; single peaks go to the nearer branch of the initial
/// model.
pub fn fit_anticrossing(
    points: &[AnticrossPoint],
    g_init: f64,
    cfg: &AnticrossConfig,
) -> Result<FitResult> {
    if points.len() < 6 {
        return Err(Error::invalid(
            "anti-crossing fit needs at least 6 detuning points",
        ));
    }
    if points
        .iter()
        .any(|p| p.peaks_nm.is_empty() || p.peaks_nm.len() > 2)
    {
        return Err(Error::invalid("each detuning point needs one or two peaks"));
    }
    let min_dl = points.iter().map(|p| p.dl_nm).fold(f64::INFINITY, f64::min);
    let max_dl = points
        .iter()
        .map(|p| p.dl_nm)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(min_dl < 0.0 && max_dl > 0.0) {
        return Err(Error::invalid("detuning points do not span the crossing"));
    }
    // exciton wavelength from the far-detuned points: the exciton-like branch
    let far = points
        .iter()
        .max_by(|a, b| a.dl_nm.abs().total_cmp(&b.dl_nm.abs()))
        .unwrap();
    let lx0 = if far.peaks_nm.len() == 2 {
        let (s, l) = (
            far.peaks_nm[0].min(far.peaks_nm[1]),
            far.peaks_nm[0].max(far.peaks_nm[1]),
        );
        if far.dl_nm > 0.0 {
            l
        } else {
            s
        }
    } else {
        far.peaks_nm[0] + far.dl_nm.signum() * 0.0
    };
    // (point index, branch 0 = upper / 1 = lower, observed)
    let mut obs: Vec<(f64, usize, f64)> = Vec::new();
    for p in points {
        if p.peaks_nm.len() == 2 {
            let (s, l) = (
                p.peaks_nm[0].min(p.peaks_nm[1]),
                p.peaks_nm[0].max(p.peaks_nm[1]),
            );
            obs.push((p.dl_nm, 0, s));
            obs.push((p.dl_nm, 1, l));
        } else {
            let (u, lo) = anticrossing_branches(g_init, lx0, p.dl_nm, cfg)?;
            let y = p.peaks_nm[0];
            obs.push((
                p.dl_nm,
                if (y - u).abs() <= (y - lo).abs() {
                    0
                } else {
                    1
                },
                y,
            ));
        }
    }
    if obs.iter().all(|o| o.1 == 0) || obs.iter().all(|o| o.1 == 1) {
        return Err(Error::invalid(
            "all peaks lie on one branch; the anti-crossing is not constrained",
        ));
    }
    let offset = cfg.fit_offset;
    let residuals = |x: &[f64]| -> Vec<f64> {
        let (g, lx, off) = (x[0], x[1], if offset { x[2] } else { 0.0 });
        obs.iter()
            .map(
                |&(dl, b, y)| match anticrossing_branches(g, lx, dl + off, cfg) {
                    // residuals in pm keep the problem well scaled
                    Ok((u, l)) => 1e3 * ((if b == 0 { u } else { l }) - y),
                    Err(_) => f64::NAN,
                },
            )
            .collect()
    };
    let mut x0 = vec![g_init, lx0];
    let mut names = vec!["g_ghz", "lambda_x_nm"];
    if offset {
        x0.push(0.0);
        names.push("dl_offset_nm");
    }
    let mut fit = levenberg_marquardt(&residuals, None, &x0, &names, LmOptions::default())?;
    fit.params[0] = fit.params[0].abs();
    let (lx, g) = (fit.params[1], fit.params[0]);
    fit.push("gamma_x_ghz", cfg.gamma_x_ghz, 0.0);
    fit.push("gamma_m_ghz", cfg.gamma_m_ghz, 0.0);
    let p = SystemParams {
        g_ghz: g,
        gamma_x_ghz: cfg.gamma_x_ghz,
        gamma_m_ghz: cfg.gamma_m_ghz,
        gamma_b_ghz: 0.0,
        lambda_m_nm: lx,
        ..SystemParams::default()
    };
    if let Ok(r) = crate::polariton::rabi_splitting(&p) {
        fit.push("splitting_nm", r.nm, 0.0);
    }
    Ok(fit)
}

// ---------------------------------------------------------------------------
// Lifetime versus detuning

/// Fixed quantities of the lifetime-curve model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifetimeCurveConfig {
    pub gamma_m_ghz: f64,
    pub lambda_ref_nm: f64,
}

impl Default for LifetimeCurveConfig {
    fn default() -> Self {
        LifetimeCurveConfig {
            gamma_m_ghz: 24.1,
            lambda_ref_nm: 942.5,
        }
    }
}

/// τ(Δλ) = 1/(2π(γ_b + γ_m g²/(Δ_ω² + (γ_m/2)²))).
pub fn lifetime_model(
    g_ghz: f64,
    gamma_b_ghz: f64,
    dl_nm: f64,
    cfg: &LifetimeCurveConfig,
) -> Result<f64> {
    let dw = detuning_nm_to_ghz(dl_nm, cfg.lambda_ref_nm)?;
    Ok(1.0 / (2.0 * PI * (gamma_b_ghz + purcell_rate(g_ghz, cfg.gamma_m_ghz, dw))))
}

/// Relative-error weighted fit of (g, γ_b) to measured (Δλ, τ) points.
/// Internally fits g²; the reported g uncertainty is
/// √(g² + σ_{g²}) − g, which reduces to σ_{g²}/2g away from zero.
pub fn fit_lifetime_curve(
    points: &[(f64, f64)],
    init: (f64, f64),
    cfg: &LifetimeCurveConfig,
) -> Result<FitResult> {
    if points.len() < 3 {
        return Err(Error::invalid("lifetime fit needs at least 3 points"));
    }
    if points.iter().any(|&(_, t)| !(t > 0.0)) {
        return Err(Error::invalid("lifetimes must be positive"));
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0.abs()).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if distinct.len() < 2 {
        return Err(Error::invalid(
            "all points share one detuning; g and γ_b are not separable",
        ));
    }
    let dws: Vec<f64> = points
        .iter()
        .map(|p| detuning_nm_to_ghz(p.0, cfg.lambda_ref_nm))
        .collect::<Result<_>>()?;
    let gm = cfg.gamma_m_ghz;
    let shape: Vec<f64> = dws
        .iter()
        .map(|dw| gm / (dw * dw + gm * gm / 4.0))
        .collect();
    let taus: Vec<f64> = points.iter().map(|p| p.1).collect();
    let residuals = |x: &[f64]| -> Vec<f64> {
        shape
            .iter()
            .zip(&taus)
            .map(|(s, t)| {
                let model = 1.0 / (2.0 * PI * (x[1] + x[0] * s));
                (model - t) / t
            })
            .collect()
    };
    let jacobian = |x: &[f64]| -> DMatrix<f64> {
        let mut j = DMatrix::zeros(shape.len(), 2);
        for (i, (s, t)) in shape.iter().zip(&taus).enumerate() {
            let rate = x[1] + x[0] * s;
            let d = -1.0 / (2.0 * PI * rate * rate * t);
            j[(i, 0)] = d * s;
            j[(i, 1)] = d;
        }
        j
    };
    let x0 = [init.0 * init.0, init.1];
    let fit = levenberg_marquardt(
        &residuals,
        Some(&jacobian),
        &x0,
        &["g_squared", "gamma_b_ghz"],
        LmOptions::default(),
    )?;
    let (s, ss) = (fit.params[0], fit.stderr[0]);
    let g = s.max(0.0).sqrt();
    let g_err = (s.max(0.0) + ss).sqrt() - g;
    Ok(FitResult {
        names: vec!["g_ghz".into(), "gamma_b_ghz".into()],
        params: vec![g, fit.params[1]],
        stderr: vec![g_err, fit.stderr[1]],
        ..fit
    })
}

// ---------------------------------------------------------------------------
// Exponential decays

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayModel {
    Mono,
    Bi,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecayOptions {
    /// Adds the tails of earlier pulses, A·e^{−t/τ}/(1 − e^{−T/τ}).
    pub rep_period_ns: Option<f64>,
    /// Gaussian instrument response (FWHM); adds a free time origin t₀.
    pub irf_fwhm_ns: Option<f64>,
}

/// e^{−(t−t₀)/τ} convolved with a unit-area Gaussian of width σ.
fn emg(t: f64, tau: f64, sigma: f64, t0: f64) -> f64 {
    let x = t - t0;
    let b = (sigma / tau - x / sigma) / std::f64::consts::SQRT_2;
    let a = sigma * sigma / (2.0 * tau * tau) - x / tau;
    if b > 25.0 {
        // asymptotic erfc keeps exp(a)·erfc(b) finite
        let log = a - b * b - (b * PI.sqrt()).ln();
        0.5 * log.exp() * (1.0 - 0.5 / (b * b))
    } else {
        0.5 * a.exp() * erfc(b)
    }
}

/// Expected counts per ns at time t for amplitudes/lifetimes `terms`.
fn decay_rate(t: f64, terms: &[(f64, f64)], bg: f64, t0: f64, opts: &DecayOptions) -> f64 {
    let mut v = bg;
    for &(a, tau) in terms {
        let tau = tau.abs().max(1e-12);
        let wrap = match opts.rep_period_ns {
            Some(period) => 1.0 / (1.0 - (-period / tau).exp()),
            None => 1.0,
        };
        let shape = match opts.irf_fwhm_ns {
            Some(w) if w > 0.0 => emg(t, tau, w / FWHM_PER_SIGMA, t0),
            _ => {
                if t >= t0 {
                    (-(t - t0) / tau).exp()
                } else {
                    0.0
                }
            }
        };
        v += a * wrap * shape;
    }
    v
}

fn log_linear_tau(t: &[f64], n: &[f64], bg: f64) -> f64 {
    let peak = n.iter().cloned().fold(0.0, f64::max);
    let ip = n.iter().position(|&v| v == peak).unwrap_or(0);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in ip..n.len() {
        let v = n[i] - bg;
        if v < 0.1 * (peak - bg) {
            break;
        }
        if v > 0.0 {
            xs.push(t[i]);
            ys.push(v.ln());
        }
    }
    if xs.len() < 2 {
        return (t[t.len() - 1] - t[0]) / 5.0;
    }
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    if slope < 0.0 {
        -1.0 / slope
    } else {
        (t[t.len() - 1] - t[0]) / 5.0
    }
}

/// Poisson maximum-likelihood fit of exponential decays to a histogram,
/// solved by iteratively reweighted least squares (weights 1/μ).
///
/// Parameters: mono `[amplitude, tau_ns, background]`, bi
/// `[amplitude_1, tau_1_ns, amplitude_2, tau_2_ns, background]`, followed by
/// `t0_ns` when an IRF is given. Amplitudes are counts per ns at the time
/// origin, background is counts per ns. Lifetimes below the narrowest bin
/// are unresolvable and are held at that width.
pub fn fit_decay(h: &Histogram, model: DecayModel, opts: &DecayOptions) -> Result<FitResult> {
    let t = h.centers();
    let widths = h.widths();
    let n: Vec<f64> = h.counts.iter().map(|&c| c as f64).collect();
    if n.iter().filter(|&&c| c > 0.0).count() < 10 {
        return Err(Error::invalid("decay fit needs at least 10 non-empty bins"));
    }
    let rate: Vec<f64> = n.iter().zip(&widths).map(|(c, w)| c / w).collect();
    let tail = (t.len() / 10).max(1);
    let mut tail_vals: Vec<f64> = rate[t.len() - tail..].to_vec();
    tail_vals.sort_by(f64::total_cmp);
    let bg0 = tail_vals[tail_vals.len() / 2];
    let tau0 = log_linear_tau(&t, &rate, bg0);
    let peak = rate.iter().cloned().fold(0.0, f64::max);
    let with_irf = opts.irf_fwhm_ns.is_some_and(|w| w > 0.0);
    // time origin at the half-maximum crossing of the leading edge
    let t0_init = if with_irf {
        let half = bg0 + 0.5 * (peak - bg0);
        let i = rate.iter().position(|&v| v >= half).unwrap_or(0);
        if i == 0 {
            h.bin_edges_ns[0]
        } else {
            let (r0, r1) = (rate[i - 1], rate[i]);
            t[i - 1] + (t[i] - t[i - 1]) * (half - r0) / (r1 - r0)
        }
    } else {
        h.bin_edges_ns[0].max(0.0)
    };
    let a0 = (peak - bg0).max(1e-9);
    let (mut x0, names): (Vec<f64>, Vec<&str>) = match model {
        DecayModel::Mono => (
            vec![a0, tau0, bg0],
            vec!["amplitude", "tau_ns", "background"],
        ),
        DecayModel::Bi => (
            vec![0.6 * a0, tau0 / 3.0, 0.4 * a0, tau0 * 1.5, bg0],
            vec![
                "amplitude_1",
                "tau_1_ns",
                "amplitude_2",
                "tau_2_ns",
                "background",
            ],
        ),
    };
    let mut names = names;
    if with_irf {
        x0.push(t0_init);
        names.push("t0_ns");
    }
    let np = x0.len();
    let tau_min = widths.iter().cloned().fold(f64::INFINITY, f64::min);
    let t0_fixed = if with_irf { 0.0 } else { t0_init };
    let expected = |x: &[f64]| -> Vec<f64> {
        let (terms, bg): (Vec<(f64, f64)>, f64) = match model {
            DecayModel::Mono => (vec![(x[0], x[1])], x[2]),
            DecayModel::Bi => (vec![(x[0], x[1]), (x[2], x[3])], x[4]),
        };
        let t0 = if with_irf { x[np - 1] } else { t0_fixed };
        let terms: Vec<(f64, f64)> = terms
            .into_iter()
            .map(|(a, tau)| (a, tau.abs().max(tau_min)))
            .collect();
        t.iter()
            .zip(&widths)
            .map(|(&ti, &w)| decay_rate(ti, &terms, bg, t0, opts) * w)
            .collect()
    };
    let mut x = x0;
    let mut fit = None;
    let mut history = Vec::new();
    for _ in 0..30 {
        let mu = expected(&x);
        let weights: Vec<f64> = mu.iter().map(|m| 1.0 / m.max(1e-6).sqrt()).collect();
        let residuals = |p: &[f64]| -> Vec<f64> {
            expected(p)
                .iter()
                .zip(&n)
                .zip(&weights)
                .map(|((m, c), w)| (m - c) * w)
                .collect()
        };
        let opts_lm = LmOptions {
            absolute_sigma: true,
            ..LmOptions::default()
        };
        let f = levenberg_marquardt(&residuals, None, &x, &names, opts_lm)?;
        history.extend(f.cost_history.iter().copied());
        let change = f
            .params
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-9))
            .fold(0.0, f64::max);
        x = f.params.clone();
        fit = Some(f);
        if change < 1e-9 {
            break;
        }
    }
    let mut fit = fit.unwrap();
    fit.cost_history = history;
    match model {
        DecayModel::Mono => fit.params[1] = fit.params[1].abs().max(tau_min),
        DecayModel::Bi => {
            fit.params[1] = fit.params[1].abs().max(tau_min);
            fit.params[3] = fit.params[3].abs().max(tau_min);
            let (t1, t2) = (fit.params[1], fit.params[3]);
            if (t1 - t2).abs() < 0.05 * t1.max(t2) {
                return Err(Error::numerical(format!(
                    "bi-exponential fit is degenerate: tau_1 = {t1} ns, tau_2 = {t2} ns"
                )));
            }
            if t1 > t2 {
                fit.params.swap(0, 2);
                fit.params.swap(1, 3);
                fit.stderr.swap(0, 2);
                fit.stderr.swap(1, 3);
            }
        }
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use crate::spectrum::linspace;
    use rand_distr::{Distribution, Exp, Normal, Poisson};

    fn spectrum_from(x: Vec<f64>, y: Vec<f64>) -> Spectrum {
        Spectrum::new(318_082.0, x, y).unwrap()
    }

    #[test]
    fn exact_single_lorentzian() {
        let x = linspace(-50.0, 50.0, 501);
        let truth = LorentzPeak {
            area: 3.0,
            center: 2.5,
            fwhm: 8.0,
        };
        let y = x.iter().map(|&v| lorentzian(v, &truth) + 0.01).collect();
        let f = fit_lorentzians(&spectrum_from(x, y), 1, None, None).unwrap();
        let p = f.peaks[0];
        assert!(
            (p.area - 3.0).abs() < 1e-8
                && (p.center - 2.5).abs() < 1e-8
                && (p.fwhm - 8.0).abs() < 1e-8
        );
        assert!((f.background - 0.01).abs() < 1e-10);
        assert!(f.fit.converged);
        assert!(f.fit.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn resolves_polariton_doublet() {
        // 0.107 nm splitting, 0.048 nm widths, on a wavelength axis in pm
        let x = linspace(-300.0, 300.0, 1201);
        let a = LorentzPeak {
            area: 1.0,
            center: -53.5,
            fwhm: 48.0,
        };
        let b = LorentzPeak {
            area: 1.0,
            center: 53.5,
            fwhm: 48.0,
        };
        let y = x
            .iter()
            .map(|&v| lorentzian(v, &a) + lorentzian(v, &b))
            .collect();
        let f = fit_lorentzians(&spectrum_from(x, y), 2, None, None).unwrap();
        assert!((f.peaks[0].center + 53.5).abs() < 2.0 && (f.peaks[1].center - 53.5).abs() < 2.0);
    }

    #[test]
    fn kernel_forward_model() {
        let x = linspace(-80.0, 80.0, 1601);
        let truth = LorentzPeak {
            area: 2.0,
            center: 5.0,
            fwhm: 24.1,
        };
        let raw: Vec<f64> = x.iter().map(|&v| lorentzian(v, &truth)).collect();
        let y = gaussian_smooth(&x, &raw, 7.09);
        let f = fit_lorentzians(&spectrum_from(x, y), 1, None, Some(7.09)).unwrap();
        assert!((f.peaks[0].fwhm - 24.1).abs() < 1e-5, "{}", f.peaks[0].fwhm);
    }

    #[test]
    fn too_few_points() {
        let x = linspace(0.0, 1.0, 6);
        assert!(fit_lorentzians(&spectrum_from(x.clone(), x), 2, None, None).is_err());
    }

    fn branch_data(g: f64, noise: f64, seed: u64) -> Vec<AnticrossPoint> {
        let cfg = AnticrossConfig::default();
        let mut rng = stream(seed, Domain::Noise, 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        linspace(-0.4, 0.4, 17)
            .into_iter()
            .map(|dl| {
                let (u, l) = anticrossing_branches(g, 942.5, dl, &cfg).unwrap();
                // noise relative to the local splitting
                let split = l - u;
                AnticrossPoint {
                    dl_nm: dl,
                    peaks_nm: vec![
                        u + noise * split * normal.sample(&mut rng),
                        l + noise * split * normal.sample(&mut rng),
                    ],
                }
            })
            .collect()
    }

    #[test]
    fn anticrossing_round_trip() {
        let cfg = AnticrossConfig::default();
        let exact = fit_anticrossing(&branch_data(18.4, 0.0, 1), 15.0, &cfg).unwrap();
        assert!((exact.get("g_ghz").unwrap() - 18.4).abs() < 1e-6);
        assert!((exact.get("lambda_x_nm").unwrap() - 942.5).abs() < 1e-8);
        assert!((exact.get("splitting_nm").unwrap() - 0.107).abs() < 0.0005);
        let noisy = fit_anticrossing(&branch_data(18.4, 0.01, 2), 15.0, &cfg).unwrap();
        assert!((noisy.get("g_ghz").unwrap() - 18.4).abs() / 18.4 < 0.02);
    }

    #[test]
    fn anticrossing_rejects_one_branch() {
        let cfg = AnticrossConfig::default();
        let pts: Vec<AnticrossPoint> = linspace(-0.4, 0.4, 8)
            .into_iter()
            .map(|dl| AnticrossPoint {
                dl_nm: dl,
                peaks_nm: vec![anticrossing_branches(18.4, 942.5, dl, &cfg).unwrap().0],
            })
            .collect();
        assert!(fit_anticrossing(&pts, 18.0, &cfg).is_err());
        assert!(fit_anticrossing(&pts[..4], 18.0, &cfg).is_err());
    }

    #[test]
    fn lifetime_three_point_inversion() {
        let cfg = LifetimeCurveConfig::default();
        let pts: Vec<(f64, f64)> = [4.1, 1.26, 0.5]
            .iter()
            .map(|&dl| (dl, lifetime_model(20.7, 0.015, dl, &cfg).unwrap()))
            .collect();
        assert!((pts[0].1 - 7.81).abs() < 0.01);
        assert!((pts[1].1 - 2.21).abs() < 0.01);
        assert!((pts[2].1 - 0.42).abs() < 0.01);
        let f = fit_lifetime_curve(&pts, (16.0, 0.02), &cfg).unwrap();
        assert!((f.get("g_ghz").unwrap() - 20.7).abs() < 1e-6);
        assert!((f.get("gamma_b_ghz").unwrap() - 0.015).abs() < 1e-9);
    }

    #[test]
    fn lifetime_flat_data() {
        let cfg = LifetimeCurveConfig::default();
        let pts = vec![(0.5, 10.6), (1.0, 10.6), (2.0, 10.6), (4.0, 10.6)];
        let f = fit_lifetime_curve(&pts, (5.0, 0.01), &cfg).unwrap();
        assert!(f.get("g_ghz").unwrap() <= 2.0 * f.stderr_of("g_ghz").unwrap() + 1e-6);
        assert!(
            fit_lifetime_curve(&[(1.0, 2.0), (1.0, 2.1), (-1.0, 2.0)], (5.0, 0.01), &cfg).is_err()
        );
    }

    fn synthetic_decay(
        tau: f64,
        counts: usize,
        bin: f64,
        span: f64,
        irf_sigma: f64,
        seed: u64,
    ) -> Histogram {
        let mut rng = stream(seed, Domain::Noise, 0);
        let e = Exp::new(1.0 / tau).unwrap();
        let g = Normal::new(0.0, irf_sigma.max(1e-300)).unwrap();
        let start = if irf_sigma > 0.0 {
            -5.0 * irf_sigma
        } else {
            0.0
        };
        let nb = ((span - start) / bin).round() as usize;
        let mut h = Histogram::uniform(start, bin, nb).unwrap();
        for _ in 0..counts {
            let mut t = e.sample(&mut rng);
            if irf_sigma > 0.0 {
                t += g.sample(&mut rng);
            }
            h.add(t);
        }
        h
    }

    #[test]
    fn mono_decay_recovery() {
        let h = synthetic_decay(7.6, 10_000, 0.1, 60.0, 0.0, 3);
        let f = fit_decay(&h, DecayModel::Mono, &DecayOptions::default()).unwrap();
        let tau = f.get("tau_ns").unwrap();
        assert!((tau - 7.6).abs() / 7.6 < 0.03, "{tau}");
        assert!(f.stderr_of("tau_ns").unwrap() > 0.0);
    }

    #[test]
    fn irf_deconvolution() {
        let sigma = 0.070 / FWHM_PER_SIGMA;
        let h = synthetic_decay(0.060, 20_000, 0.004, 0.6, sigma, 4);
        let with = fit_decay(
            &h,
            DecayModel::Mono,
            &DecayOptions {
                irf_fwhm_ns: Some(0.070),
                ..Default::default()
            },
        )
        .unwrap();
        let tau = with.get("tau_ns").unwrap();
        assert!((tau - 0.060).abs() / 0.060 < 0.15, "{tau}");
    }

    #[test]
    fn flat_background_amplitude_is_zero() {
        let mut rng = stream(5, Domain::Noise, 0);
        let pois = Poisson::new(50.0).unwrap();
        let mut h = Histogram::uniform(0.0, 0.5, 100).unwrap();
        for c in h.counts.iter_mut() {
            *c = pois.sample(&mut rng) as u64;
        }
        let f = fit_decay(&h, DecayModel::Mono, &DecayOptions::default()).unwrap();
        let a = f.get("amplitude").unwrap();
        let s = f.stderr_of("amplitude").unwrap();
        assert!(s.is_finite() && a.abs() <= 3.0 * s, "{a} ± {s}");
    }

    #[test]
    fn bi_exponential_and_degeneracy() {
        let mut h = synthetic_decay(1.3, 40_000, 0.05, 40.0, 0.0, 6);
        let slow = synthetic_decay(8.5, 40_000, 0.05, 40.0, 0.0, 7);
        h.merge(&slow).unwrap();
        let f = fit_decay(&h, DecayModel::Bi, &DecayOptions::default()).unwrap();
        let (t1, t2) = (f.get("tau_1_ns").unwrap(), f.get("tau_2_ns").unwrap());
        assert!(
            (t1 - 1.3).abs() / 1.3 < 0.05 && (t2 - 8.5).abs() / 8.5 < 0.05,
            "{t1} {t2}"
        );
        let single = synthetic_decay(3.0, 40_000, 0.05, 40.0, 0.0, 8);
        assert!(fit_decay(&single, DecayModel::Bi, &DecayOptions::default()).is_err());
    }

    #[test]
    fn wrapped_decay() {
        // 7.6 ns emitter under 12.5 ns pulses: tails of earlier pulses pile up
        let period = 12.5;
        let tau = 7.6;
        let mut h = Histogram::uniform(0.0, 0.125, 100).unwrap();
        let mut rng = stream(9, Domain::Noise, 0);
        let e = Exp::new(1.0 / tau).unwrap();
        for _ in 0..200_000 {
            h.add(f64::rem_euclid(e.sample(&mut rng), period));
        }
        let f = fit_decay(
            &h,
            DecayModel::Mono,
            &DecayOptions {
                rep_period_ns: Some(period),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((f.get("tau_ns").unwrap() - tau).abs() / tau < 0.03);
    }
}
