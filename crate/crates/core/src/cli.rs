//! Command-line front end: run configuration, experiment recipes and CSV
//! emission.
//!
//! Every CSV starts with `#` metadata lines (tool version, SHA-256 of the
//! effective configuration, seed) followed by a header row. Floats are
//! written with nine significant digits and files are replaced atomically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{emission_spectrum, g2_auto, g2_cross, CorrelationTrace, EmissionChannel};
use crate::error::{Error, Result};
use crate::fitkit::{
    fit_anticrossing, fit_decay, fit_lifetime_curve, fit_lorentzians, AnticrossConfig,
    AnticrossPoint, DecayModel, DecayOptions, FitResult, LifetimeCurveConfig, LorentzPeak,
};
use crate::hbt::{
    normalize_g2, pulsed_peak_areas, split_beam, start_stop_histogram, Estimator, Histogram,
    NormMode, Rates,
};
use crate::hilbert::{CAVITY_LOSS, EXCITON_RADIATIVE};
use crate::instrument::{convolve_spectrum, jitter_and_thin, InstrumentConfig};
use crate::polariton::{
    eigenmodes, purcell_lifetime, spectral_function, AmplitudeModel, SystemParams,
};
use crate::rng::{derive_seed, Domain};
use crate::specdiff::{averaged_spectrum, TelegraphConfig, TermModel};
use crate::spectrum::{linspace, Spectrum};
use crate::trajectories::{
    admix_uncorrelated, lifetime_from_clicks, run_cw, run_pulsed, ClickRecord, ClickStream,
    PulseConfig, UNCORRELATED,
};
use crate::units::{
    detuning_ghz_to_nm, frequency_to_wavelength, wavelength_to_frequency, Detuning,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const THREADS_ENV: &str = "QDCAV_THREADS";
const MAX_GRID_POINTS: usize = 400_001;

/// Everything a run depends on, in one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub system: SystemParams,
    pub instrument: InstrumentConfig,
    pub pulses: PulseConfig,
    pub telegraph: TelegraphConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            output_dir: PathBuf::from("."),
            system: SystemParams::default(),
            instrument: InstrumentConfig::default(),
            pulses: PulseConfig::default(),
            telegraph: TelegraphConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.instrument.validate()?;
        self.pulses.validate()?;
        self.telegraph.validate(&self.system)
    }

    /// SHA-256 of the canonical TOML form. The seed is reported separately;
    /// neither it nor the output location enters the digest.
    pub fn digest(&self) -> Result<String> {
        let canonical = RunConfig {
            seed: None,
            output_dir: PathBuf::from("."),
            ..self.clone()
        };
        let text = toml::to_string(&canonical).map_err(|e| Error::Parse(e.to_string()))?;
        let hash = Sha256::digest(text.as_bytes());
        Ok(hash.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::invalid("this command is stochastic: give --seed or set `seed` in the config")
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "qdcav",
    version,
    about = "Quantum dot / nanocavity QED simulator"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads (default: $QDCAV_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Emission spectrum after instrument convolution.
    Spectrum(SpectrumArgs),
    /// Peak positions across a detuning sweep.
    Anticross(SweepArgs),
    /// Simulated time-resolved PL and fitted lifetime across a detuning sweep.
    Lifetime(LifetimeArgs),
    /// Second-order correlation functions.
    G2(G2Args),
    /// Fit a model to a CSV produced by another command.
    Fit(FitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpectrumMode {
    Analytic,
    Master,
    Diffused,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    /// Exciton–cavity detuning λ_x − λ_m; moves the cavity, the exciton stays.
    #[arg(long, allow_hyphen_values = true)]
    pub detuning_nm: Option<f64>,
    #[arg(long, value_enum, default_value = "analytic")]
    pub mode: SpectrumMode,
    /// Spectra of the two regimes from the master equation (diffused mode).
    #[arg(long)]
    pub master_terms: bool,
    /// Dwell fraction in the resonant state (diffused mode).
    #[arg(long)]
    pub resonant_fraction: Option<f64>,
    /// Number of grid points (default: chosen from linewidths).
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub dl_start: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub dl_end: f64,
    /// Number of sweep points.
    #[arg(long)]
    pub steps: usize,
    /// Peak extraction from master-equation spectra instead of the analytic model.
    #[arg(long)]
    pub master: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LifetimeArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub dl_start: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub dl_end: f64,
    #[arg(long)]
    pub steps: usize,
    /// Pulses per sweep point.
    #[arg(long)]
    pub pulses: Option<u64>,
    /// Also write each point's decay histogram.
    #[arg(long)]
    pub histograms: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum G2Kind {
    Auto,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum G2Method {
    Regression,
    Trajectories,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    AllPairs,
    StartStop,
}

#[derive(Debug, Args)]
pub struct G2Args {
    #[arg(long, value_enum, default_value = "auto")]
    pub kind: G2Kind,
    #[arg(long, value_enum, default_value = "regression")]
    pub method: G2Method,
    #[arg(long)]
    pub pulsed: bool,
    #[arg(long, allow_hyphen_values = true)]
    pub detuning_nm: Option<f64>,
    /// Largest |τ| (default 100 ns, or 5.5 periods when pulsed).
    #[arg(long)]
    pub tau_max_ns: Option<f64>,
    #[arg(long, default_value_t = 0.25)]
    pub bin_ns: f64,
    /// Acquisition time of a continuous-wave trajectory run.
    #[arg(long, default_value_t = 1e6)]
    pub duration_ns: f64,
    #[arg(long, default_value_t = 1e4)]
    pub shard_ns: f64,
    #[arg(long, value_enum, default_value = "all-pairs")]
    pub estimator: EstimatorArg,
    /// Fraction of detected light replaced by uncorrelated pulsed light.
    #[arg(long, default_value_t = 0.0)]
    pub admixture: f64,
    /// Pulses simulated (pulsed mode).
    #[arg(long)]
    pub pulses: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitModel {
    Lorentz,
    Anticross,
    Lifetime,
    Decay,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub model: FitModel,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of Lorentzians.
    #[arg(long, default_value_t = 2)]
    pub peaks: usize,
    /// Fit Lorentzians through the configured spectrometer response.
    #[arg(long)]
    pub deconvolve: bool,
    /// Free Δλ offset in the anti-crossing fit.
    #[arg(long)]
    pub fit_offset: bool,
    #[arg(long)]
    pub g_init: Option<f64>,
    /// Bi-exponential decay.
    #[arg(long)]
    pub bi: bool,
    /// Include tails of earlier pulses at the configured repetition rate.
    #[arg(long)]
    pub wrap: bool,
    /// Gaussian IRF FWHM for decay fits (ps).
    #[arg(long)]
    pub irf_ps: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Applies `--threads` or `$QDCAV_THREADS` to the global worker pool.
pub fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Error::invalid(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::invalid("thread count must be positive"));
        }
        // a pool configured earlier in the same process stays in place
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::invalid(e.to_string()))?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(d) = cli.output_dir {
        cfg.output_dir = d;
    }
    match cli.command {
        Command::Spectrum(a) => cmd_spectrum(cfg, &a),
        Command::Anticross(a) => cmd_anticross(cfg, &a),
        Command::Lifetime(a) => cmd_lifetime(cfg, &a),
        Command::G2(a) => cmd_g2(cfg, &a),
        Command::Fit(a) => cmd_fit(cfg, &a),
    }
}

// CSV

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.8e}")
}

/// A CSV document: metadata lines, header and rows.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(cfg: &RunConfig, command: &str, header: &[&str]) -> Result<Self> {
        let seed = cfg
            .seed
            .map(|s| s.to_string())
            .unwrap_or_else(|| "none".into());
        Ok(Table {
            meta: vec![
                ("tool".into(), format!("qdcav {VERSION}")),
                ("config_sha256".into(), cfg.digest()?),
                ("seed".into(), seed),
                ("command".into(), command.into()),
            ],
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        })
    }

    fn meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn push_f64(&mut self, row: &[f64]) {
        self.rows.push(row.iter().map(|&x| fmt_f64(x)).collect());
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# {k} {v}");
        }
        let _ = writeln!(s, "{}", self.header.join(","));
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.render())
    }
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Parsed CSV: metadata, column names and numeric rows ("nan" allowed).
#[derive(Debug, Clone)]
pub struct CsvData {
    pub meta: BTreeMap<String, String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvData {
    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut header: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(m) = line.strip_prefix('#') {
                let m = m.trim();
                let (k, v) = m.split_once(' ').unwrap_or((m, ""));
                meta.insert(k.to_string(), v.trim().to_string());
                continue;
            }
            let fields = line.split(',').map(str::trim);
            match &header {
                None => header = Some(fields.map(String::from).collect()),
                Some(h) => {
                    let row: Vec<f64> = fields
                        .map(|f| {
                            f.parse::<f64>().map_err(|_| {
                                Error::Parse(format!("line {}: not a number: {f:?}", lineno + 1))
                            })
                        })
                        .collect::<Result<_>>()?;
                    if row.len() != h.len() {
                        return Err(Error::Parse(format!(
                            "line {}: {} fields, header has {}",
                            lineno + 1,
                            row.len(),
                            h.len()
                        )));
                    }
                    rows.push(row);
                }
            }
        }
        let header = header.ok_or_else(|| Error::Parse("no header row".into()))?;
        if rows.is_empty() {
            return Err(Error::Parse("no data rows".into()));
        }
        Ok(CsvData { meta, header, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing column {name:?}")))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn has(&self, name: &str) -> bool {
        self.header.iter().any(|h| h == name)
    }
}

// Shared recipe helpers

fn with_detuning(p: &SystemParams, dl_nm: Option<f64>) -> SystemParams {
    let mut p = p.clone();
    if let Some(dl) = dl_nm {
        p.lambda_m_nm = p.lambda_x_nm - dl;
    }
    p
}

fn sweep(start: f64, end: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::invalid("a sweep needs at least one step"));
    }
    if !(start.is_finite() && end.is_finite()) {
        return Err(Error::invalid("sweep bounds must be finite"));
    }
    Ok(if steps == 1 {
        vec![start]
    } else {
        linspace(start, end, steps)
    })
}

/// Grid covering both polariton lines and the cavity, resolving the
/// narrowest line and the instrument response.
fn auto_grid(
    p: &SystemParams,
    det: &Detuning,
    inst: &InstrumentConfig,
    points: Option<usize>,
) -> Result<Vec<f64>> {
    let m = eigenmodes(p, det);
    let hw_max = m
        .hwhm_plus_ghz
        .max(m.hwhm_minus_ghz)
        .max(p.gamma_m_ghz / 2.0);
    let hw_min = m.hwhm_plus_ghz.min(m.hwhm_minus_ghz).max(1e-3);
    let lo = m.omega_minus_ghz.min(m.omega_plus_ghz).min(0.0) - 12.0 * hw_max;
    let hi = m.omega_minus_ghz.max(m.omega_plus_ghz).max(0.0) + 12.0 * hw_max;
    let n = match points {
        Some(n) if n < 3 => return Err(Error::invalid("a spectrum needs at least 3 grid points")),
        Some(n) => n,
        None => {
            let mut h = hw_min / 3.0;
            if inst.spectral_resolution_pm > 0.0 {
                h = h.min(inst.resolution_ghz(p.lambda_m_nm)? / 6.0);
            }
            (((hi - lo) / h).ceil() as usize + 1).min(MAX_GRID_POINTS)
        }
    };
    Ok(linspace(lo, hi, n))
}

fn default_out(cfg: &RunConfig, flag: &Option<PathBuf>, name: &str) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.output_dir.join(name))
}

fn spectrum_table(cfg: &RunConfig, command: &str, s: &Spectrum) -> Result<Table> {
    let mut header = vec!["wavelength_nm", "offset_ghz", "intensity"];
    let names: Vec<String> = s.components.iter().map(|(n, _)| n.clone()).collect();
    header.extend(names.iter().map(String::as_str));
    let mut t = Table::new(cfg, command, &header)?;
    t.meta("center_ghz", fmt_f64(s.center_ghz));
    let wl = s.wavelengths_nm()?;
    for i in 0..s.len() {
        let mut row = vec![wl[i], s.offset_ghz[i], s.intensity[i]];
        row.extend(s.components.iter().map(|(_, c)| c[i]));
        t.push_f64(&row);
    }
    Ok(t)
}

// spectrum

pub fn cmd_spectrum(mut cfg: RunConfig, a: &SpectrumArgs) -> Result<()> {
    cfg.system = with_detuning(&cfg.system, a.detuning_nm);
    if let Some(f) = a.resonant_fraction {
        cfg.telegraph.resonant_fraction = f;
    }
    cfg.validate()?;
    let p = &cfg.system;
    let det = p.detuning()?;
    let grid = auto_grid(p, &det, &cfg.instrument, a.points)?;
    let mode = format!("{:?}", a.mode).to_lowercase();
    let (s, fit_meta) = match a.mode {
        SpectrumMode::Analytic => {
            let s = spectral_function(&grid, p, &det, AmplitudeModel::HopfieldWeighted)?;
            (convolve_spectrum(&s, &cfg.instrument)?, None)
        }
        SpectrumMode::Master => {
            let s = emission_spectrum(p, &det, &grid, EmissionChannel::Cavity)?;
            (convolve_spectrum(&s, &cfg.instrument)?, None)
        }
        SpectrumMode::Diffused => {
            let terms = if a.master_terms {
                TermModel::Master
            } else {
                TermModel::Analytic
            };
            let d =
                averaged_spectrum(p, &det, &cfg.telegraph, &grid, terms, Some(&cfg.instrument))?;
            (d.spectrum.clone(), Some(d))
        }
    };
    let mut t = spectrum_table(&cfg, "spectrum", &s)?;
    t.meta("mode", mode);
    t.meta("detuning_nm", fmt_f64(det.dl_nm));
    if let Some(d) = fit_meta {
        for (i, q) in d.fit.peaks.iter().enumerate() {
            let c = frequency_to_wavelength(s.center_ghz + q.center)?;
            let w = detuning_ghz_to_nm(q.fwhm, c)?;
            t.meta(
                &format!("line{i}"),
                format!(
                    "center_nm={} fwhm_nm={} area_fraction={}",
                    fmt_f64(c),
                    fmt_f64(w),
                    fmt_f64(d.fit.area_fractions[i])
                ),
            );
        }
    }
    t.write(&default_out(&cfg, &a.out, "spectrum.csv"))
}

// anticross

struct TrackPoint {
    short_nm: f64,
    long_nm: f64,
    short_fwhm_nm: f64,
    long_fwhm_nm: f64,
}

fn track_point(cfg: &RunConfig, dl: f64, master: bool) -> Result<TrackPoint> {
    let p = with_detuning(&cfg.system, Some(dl));
    let det = p.detuning()?;
    let grid = auto_grid(&p, &det, &cfg.instrument, None)?;
    let raw = if master {
        emission_spectrum(&p, &det, &grid, EmissionChannel::Cavity)?
    } else {
        spectral_function(&grid, &p, &det, AmplitudeModel::HopfieldWeighted)?
    };
    let s = convolve_spectrum(&raw, &cfg.instrument)?;
    let kernel = if cfg.instrument.spectral_resolution_pm > 0.0 {
        Some(cfg.instrument.resolution_ghz(p.lambda_m_nm)?)
    } else {
        None
    };
    let m = eigenmodes(&p, &det);
    let scale = s.area();
    let init = vec![
        LorentzPeak {
            area: scale * m.photon_fraction_minus,
            center: m.omega_minus_ghz,
            fwhm: 2.0 * m.hwhm_minus_ghz,
        },
        LorentzPeak {
            area: scale * m.photon_fraction_plus,
            center: m.omega_plus_ghz,
            fwhm: 2.0 * m.hwhm_plus_ghz,
        },
    ];
    let nu_m = p.cavity_frequency_ghz()?;
    let to_nm = |q: &LorentzPeak| -> Result<(f64, f64)> {
        let c = frequency_to_wavelength(nu_m + q.center)?;
        Ok((c, detuning_ghz_to_nm(q.fwhm, c)?))
    };
    // the exciton-like line may be too weak to fit far from resonance
    let two = fit_lorentzians(&s, 2, Some(&init), kernel)
        .ok()
        .filter(|f| f.area_fractions.iter().all(|&w| w > 1e-3));
    let nan = (f64::NAN, f64::NAN);
    let (short, long) = match two {
        Some(f) => (to_nm(&f.peaks[1])?, to_nm(&f.peaks[0])?),
        None => {
            let bright = if m.photon_fraction_plus >= m.photon_fraction_minus {
                init[1]
            } else {
                init[0]
            };
            let f = fit_lorentzians(&s, 1, Some(&[bright]), kernel)?;
            let q = to_nm(&f.peaks[0])?;
            let (lp, lm) = (
                frequency_to_wavelength(nu_m + m.omega_plus_ghz)?,
                frequency_to_wavelength(nu_m + m.omega_minus_ghz)?,
            );
            if (q.0 - lp).abs() < (q.0 - lm).abs() {
                (q, nan)
            } else {
                (nan, q)
            }
        }
    };
    Ok(TrackPoint {
        short_nm: short.0,
        long_nm: long.0,
        short_fwhm_nm: short.1,
        long_fwhm_nm: long.1,
    })
}

pub fn cmd_anticross(cfg: RunConfig, a: &SweepArgs) -> Result<()> {
    cfg.validate()?;
    let dls = sweep(a.dl_start, a.dl_end, a.steps)?;
    let points: Vec<Result<TrackPoint>> = dls
        .par_iter()
        .map(|&dl| track_point(&cfg, dl, a.master))
        .collect();
    let mut t = Table::new(
        &cfg,
        "anticross",
        &[
            "dl_nm",
            "lambda_short_nm",
            "lambda_long_nm",
            "fwhm_short_nm",
            "fwhm_long_nm",
        ],
    )?;
    t.meta("method", if a.master { "master" } else { "analytic" });
    for (dl, q) in dls.iter().zip(points) {
        let q = q?;
        t.push_f64(&[*dl, q.short_nm, q.long_nm, q.short_fwhm_nm, q.long_fwhm_nm]);
    }
    t.write(&default_out(&cfg, &a.out, "anticross.csv"))
}

// lifetime

/// Time-resolved PL of all detected photons, folded on the pulse period.
pub fn decay_histogram(clicks: &ClickStream, period_ns: f64, bin_ns: f64) -> Result<Histogram> {
    let mut total: Option<Histogram> = None;
    for ch in [CAVITY_LOSS, EXCITON_RADIATIVE] {
        if clicks.records.iter().all(|r| r.channel != ch) {
            continue;
        }
        let h = lifetime_from_clicks(clicks, ch, period_ns, bin_ns)?;
        match &mut total {
            None => total = Some(h),
            Some(t) => t.merge(&h)?,
        }
    }
    total.ok_or_else(|| Error::numerical("no photons were detected"))
}

pub struct LifetimePoint {
    pub dl_nm: f64,
    pub tau_ns: f64,
    pub tau_stderr_ns: f64,
    pub tau_formula_ns: f64,
    pub clicks: u64,
    pub histogram: Histogram,
}

/// Pulsed simulation, detector model and decay fit at one detuning.
pub fn lifetime_point(cfg: &RunConfig, dl: f64, seed: u64) -> Result<LifetimePoint> {
    let p = with_detuning(&cfg.system, Some(dl));
    let det = p.detuning()?;
    let formula = purcell_lifetime(&p, &det)?.lifetime_ns;
    let stream = run_pulsed(
        &p,
        &det,
        &cfg.pulses,
        derive_seed(seed, Domain::Trajectory, 0),
    )?;
    let detected = ClickStream {
        records: jitter_and_thin(
            &stream.records,
            &cfg.instrument,
            derive_seed(seed, Domain::Detector, 0),
        )?,
        ..stream
    };
    let period = cfg.pulses.period_ns();
    let expected = formula.max(cfg.pulses.capture_delay_ns);
    let irf = cfg.instrument.apd_irf_ps * 1e-3;
    let bin_cap = if irf > 0.0 { irf } else { 0.25 };
    let bin = (expected / 20.0).min(bin_cap).clamp(0.002, 0.25);
    let h = decay_histogram(&detected, period, bin)?;
    let opts = DecayOptions {
        rep_period_ns: Some(period),
        irf_fwhm_ns: (irf > 0.0).then_some(irf),
    };
    let fit = fit_decay(&h, DecayModel::Mono, &opts)?;
    Ok(LifetimePoint {
        dl_nm: dl,
        tau_ns: fit.get("tau_ns").unwrap_or(f64::NAN),
        tau_stderr_ns: fit.stderr_of("tau_ns").unwrap_or(f64::NAN),
        tau_formula_ns: formula,
        clicks: detected.records.len() as u64,
        histogram: h,
    })
}

fn histogram_table(cfg: &RunConfig, command: &str, h: &Histogram) -> Result<Table> {
    let mut t = Table::new(cfg, command, &["t_ns", "counts"])?;
    t.meta("bin_ns", fmt_f64(h.widths()[0]));
    for (c, n) in h.centers().iter().zip(&h.counts) {
        t.push(vec![fmt_f64(*c), n.to_string()]);
    }
    Ok(t)
}

pub fn cmd_lifetime(mut cfg: RunConfig, a: &LifetimeArgs) -> Result<()> {
    if let Some(n) = a.pulses {
        cfg.pulses.n_pulses = n;
    }
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let dls = sweep(a.dl_start, a.dl_end, a.steps)?;
    let out = default_out(&cfg, &a.out, "lifetime.csv");
    let mut t = Table::new(
        &cfg,
        "lifetime",
        &[
            "dl_nm",
            "tau_ns",
            "tau_stderr_ns",
            "tau_purcell_ns",
            "clicks",
        ],
    )?;
    for (i, &dl) in dls.iter().enumerate() {
        let q = lifetime_point(&cfg, dl, derive_seed(seed, Domain::Sweep, i as u64))?;
        t.push(vec![
            fmt_f64(q.dl_nm),
            fmt_f64(q.tau_ns),
            fmt_f64(q.tau_stderr_ns),
            fmt_f64(q.tau_formula_ns),
            q.clicks.to_string(),
        ]);
        if a.histograms {
            let mut ht = histogram_table(&cfg, "lifetime", &q.histogram)?;
            ht.meta("dl_nm", fmt_f64(dl));
            ht.meta("rep_period_ns", fmt_f64(cfg.pulses.period_ns()));
            let name = format!("decay_{i:03}.csv");
            ht.write(&out.with_file_name(name))?;
        }
    }
    t.write(&out)
}

// g2

fn clicks_table(cfg: &RunConfig, records: &[ClickRecord]) -> Result<Table> {
    let mut t = Table::new(cfg, "g2", &["channel", "time_ns"])?;
    for r in records {
        t.push(vec![r.channel.to_string(), fmt_f64(r.time_ns)]);
    }
    Ok(t)
}

fn trace_table(cfg: &RunConfig, trace: &CorrelationTrace, stderr: Option<&[f64]>) -> Result<Table> {
    let header: &[&str] = if stderr.is_some() {
        &["tau_ns", "g2", "g2_stderr"]
    } else {
        &["tau_ns", "g2"]
    };
    let mut t = Table::new(cfg, "g2", header)?;
    let g = trace.real();
    for (i, tau) in trace.tau_grid_ns.iter().enumerate() {
        match stderr {
            Some(e) => t.push_f64(&[*tau, g[i], e[i]]),
            None => t.push_f64(&[*tau, g[i]]),
        }
    }
    Ok(t)
}

fn sorted_times(records: &[ClickRecord], channels: &[&str]) -> Vec<f64> {
    let mut v: Vec<f64> = records
        .iter()
        .filter(|r| channels.contains(&r.channel))
        .map(|r| r.time_ns)
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Result of the trajectory pipeline, before writing.
pub struct G2Run {
    pub records: Vec<ClickRecord>,
    pub histogram: Histogram,
    pub trace: CorrelationTrace,
    pub report: Option<crate::hbt::PeakAreaReport>,
}

pub fn g2_trajectories(cfg: &RunConfig, a: &G2Args, seed: u64) -> Result<G2Run> {
    let p = &cfg.system;
    let det = p.detuning()?;
    let estimator = match a.estimator {
        EstimatorArg::AllPairs => Estimator::AllPairs,
        EstimatorArg::StartStop => Estimator::StartStop,
    };
    let (stream, duration) = if a.pulsed {
        let s = run_pulsed(
            p,
            &det,
            &cfg.pulses,
            derive_seed(seed, Domain::Trajectory, 0),
        )?;
        let s = admix_uncorrelated(
            &s,
            CAVITY_LOSS,
            a.admixture,
            &cfg.pulses,
            p.gamma_m_ghz,
            derive_seed(seed, Domain::Noise, 0),
        )?;
        let d = s.duration_ns;
        (s, d)
    } else {
        if a.admixture != 0.0 {
            return Err(Error::invalid(
                "--admixture applies to pulsed excitation only",
            ));
        }
        let s = run_cw(
            p,
            &det,
            a.duration_ns,
            a.shard_ns,
            derive_seed(seed, Domain::Trajectory, 0),
        )?;
        let d = s.duration_ns;
        (s, d)
    };
    let records = jitter_and_thin(
        &stream.records,
        &cfg.instrument,
        derive_seed(seed, Domain::Detector, 0),
    )?;
    let (starts, stops) = match a.kind {
        G2Kind::Auto => split_beam(
            &sorted_times(&records, &[CAVITY_LOSS, UNCORRELATED]),
            derive_seed(seed, Domain::BeamSplitter, 0),
        ),
        G2Kind::Cross => (
            sorted_times(&records, &[EXCITON_RADIATIVE]),
            sorted_times(&records, &[CAVITY_LOSS, UNCORRELATED]),
        ),
    };
    let period = cfg.pulses.period_ns();
    let window = a
        .tau_max_ns
        .unwrap_or(if a.pulsed { 5.5 * period } else { 100.0 });
    let h = start_stop_histogram(&starts, &stops, a.bin_ns, window, estimator)?;
    let rates = Rates::from_totals(&h, duration)?;
    let (trace, report) = if a.pulsed {
        let half = period / 4.0;
        let r = pulsed_peak_areas(&h, period, half)?;
        (
            normalize_g2(
                &h,
                rates,
                NormMode::Pulsed {
                    rep_period_ns: period,
                    half_window_ns: half,
                },
            )?,
            Some(r),
        )
    } else {
        (normalize_g2(&h, rates, NormMode::Cw)?, None)
    };
    Ok(G2Run {
        records,
        histogram: h,
        trace,
        report,
    })
}

pub fn cmd_g2(mut cfg: RunConfig, a: &G2Args) -> Result<()> {
    cfg.system = with_detuning(&cfg.system, a.detuning_nm);
    if let Some(n) = a.pulses {
        cfg.pulses.n_pulses = n;
    }
    cfg.validate()?;
    if !(a.bin_ns > 0.0) {
        return Err(Error::invalid("bin width must be positive"));
    }
    let dir = a.out_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let kind = format!("{:?}", a.kind).to_lowercase();
    match a.method {
        G2Method::Regression => {
            if a.pulsed {
                return Err(Error::invalid(
                    "pulsed correlations need --method trajectories",
                ));
            }
            let det = cfg.system.detuning()?;
            let tmax = a.tau_max_ns.unwrap_or(100.0);
            let n = ((tmax / a.bin_ns).round() as usize).max(1);
            let grid: Vec<f64> = match a.kind {
                G2Kind::Auto => linspace(0.0, n as f64 * a.bin_ns, n + 1),
                G2Kind::Cross => linspace(-(n as f64) * a.bin_ns, n as f64 * a.bin_ns, 2 * n + 1),
            };
            let trace = match a.kind {
                G2Kind::Auto => g2_auto(&cfg.system, &det, &grid)?,
                G2Kind::Cross => g2_cross(&cfg.system, &det, &grid)?,
            };
            let mut t = trace_table(&cfg, &trace, None)?;
            t.meta("kind", &kind);
            t.meta("method", "regression");
            t.write(&dir.join("g2.csv"))
        }
        G2Method::Trajectories => {
            let seed = cfg.require_seed()?;
            let run = g2_trajectories(&cfg, a, seed)?;
            clicks_table(&cfg, &run.records)?.write(&dir.join("clicks.csv"))?;
            let g = run.trace.real();
            let mut ht = Table::new(&cfg, "g2", &["tau_ns", "counts", "g2"])?;
            ht.meta("kind", &kind);
            ht.meta("bin_ns", fmt_f64(a.bin_ns));
            ht.meta("estimator", format!("{:?}", a.estimator).to_lowercase());
            ht.meta("n_starts", run.histogram.n_starts);
            ht.meta("n_stops", run.histogram.n_stops);
            ht.meta("total_counts", run.histogram.total());
            for (i, c) in run.histogram.centers().iter().enumerate() {
                ht.push(vec![
                    fmt_f64(*c),
                    run.histogram.counts[i].to_string(),
                    fmt_f64(g[i]),
                ]);
            }
            ht.write(&dir.join("histogram.csv"))?;
            let err: Vec<f64> = run
                .histogram
                .counts
                .iter()
                .zip(&g)
                .map(|(&n, &v)| {
                    if n > 0 {
                        v / (n as f64).sqrt()
                    } else {
                        1.0 / run.trace.normalization
                    }
                })
                .collect();
            let mut gt = trace_table(&cfg, &run.trace, Some(&err))?;
            gt.meta("kind", &kind);
            gt.meta("method", "trajectories");
            gt.write(&dir.join("g2.csv"))?;
            if let Some(r) = run.report {
                let mut pt = Table::new(&cfg, "g2", &["center_ns", "area", "normalized"])?;
                pt.meta("central_ratio", fmt_f64(r.ratio));
                pt.meta("half_window_ns", fmt_f64(r.half_window_ns));
                pt.meta("admixture", fmt_f64(a.admixture));
                for q in &r.peaks {
                    pt.push_f64(&[q.center_ns, q.area, q.area / r.mean_side_area]);
                }
                pt.write(&dir.join("peaks.csv"))?;
            }
            Ok(())
        }
    }
}

// fit

fn fit_table(cfg: &RunConfig, model: &str, f: &FitResult) -> Result<Table> {
    let mut t = Table::new(cfg, "fit", &["parameter", "value", "stderr"])?;
    t.meta("model", model);
    t.meta("residual_norm", fmt_f64(f.residual_norm));
    t.meta("iterations", f.n_iterations);
    t.meta("converged", f.converged);
    for (i, name) in f.names.iter().enumerate() {
        t.push(vec![
            name.clone(),
            fmt_f64(f.params[i]),
            fmt_f64(f.stderr[i]),
        ]);
    }
    Ok(t)
}

fn spectrum_from_csv(d: &CsvData) -> Result<Spectrum> {
    let y = d.column("intensity")?;
    if d.has("offset_ghz") {
        let center = match d.meta.get("center_ghz") {
            Some(v) => v
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad center_ghz {v:?}")))?,
            None => 0.0,
        };
        return Spectrum::new(center, d.column("offset_ghz")?, y);
    }
    // wavelength only: reverse into ascending frequency about the mean
    let wl = d.column("wavelength_nm")?;
    let nu: Vec<f64> = wl
        .iter()
        .map(|&l| wavelength_to_frequency(l))
        .collect::<Result<_>>()?;
    let center = nu.iter().sum::<f64>() / nu.len() as f64;
    let mut pairs: Vec<(f64, f64)> = nu.iter().map(|v| v - center).zip(y).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Spectrum::new(center, x, y)
}

fn histogram_from_csv(d: &CsvData) -> Result<Histogram> {
    let t = d.column("t_ns")?;
    let n = d.column("counts")?;
    if t.len() < 2 {
        return Err(Error::invalid("decay histogram needs at least two bins"));
    }
    let w = t[1] - t[0];
    let mut edges: Vec<f64> = t.iter().map(|c| c - w / 2.0).collect();
    edges.push(t[t.len() - 1] + w / 2.0);
    let mut h = Histogram::new(edges)?;
    for (i, &c) in n.iter().enumerate() {
        if !(c >= 0.0 && c.fract() == 0.0) {
            return Err(Error::Parse(format!(
                "counts must be non-negative integers, got {c}"
            )));
        }
        h.counts[i] = c as u64;
    }
    Ok(h)
}

pub fn cmd_fit(cfg: RunConfig, a: &FitArgs) -> Result<()> {
    cfg.validate()?;
    let d = CsvData::read(&a.data)?;
    let p = &cfg.system;
    let (name, result) = match a.model {
        FitModel::Lorentz => {
            let s = spectrum_from_csv(&d)?;
            let lambda = frequency_to_wavelength(s.center_ghz).unwrap_or(p.lambda_m_nm);
            let kernel = if a.deconvolve && cfg.instrument.spectral_resolution_pm > 0.0 {
                Some(cfg.instrument.resolution_ghz(lambda)?)
            } else {
                None
            };
            ("lorentz", fit_lorentzians(&s, a.peaks, None, kernel)?.fit)
        }
        FitModel::Anticross => {
            let dl = d.column("dl_nm")?;
            let short = d.column("lambda_short_nm")?;
            let long = d.column("lambda_long_nm")?;
            let points: Vec<AnticrossPoint> = (0..dl.len())
                .map(|i| AnticrossPoint {
                    dl_nm: dl[i],
                    peaks_nm: [short[i], long[i]]
                        .into_iter()
                        .filter(|v| v.is_finite())
                        .collect(),
                })
                .filter(|q| !q.peaks_nm.is_empty())
                .collect();
            let ac = AnticrossConfig {
                gamma_x_ghz: p.gamma_x_ghz,
                gamma_m_ghz: p.gamma_m_ghz,
                fit_offset: a.fit_offset,
            };
            (
                "anticross",
                fit_anticrossing(&points, a.g_init.unwrap_or(p.g_ghz), &ac)?,
            )
        }
        FitModel::Lifetime => {
            let dl = d.column("dl_nm")?;
            let tau = d.column("tau_ns")?;
            let points: Vec<(f64, f64)> = dl
                .into_iter()
                .zip(tau)
                .filter(|(_, t)| t.is_finite())
                .collect();
            let lc = LifetimeCurveConfig {
                gamma_m_ghz: p.gamma_m_ghz,
                lambda_ref_nm: p.lambda_m_nm,
            };
            (
                "lifetime",
                fit_lifetime_curve(&points, (a.g_init.unwrap_or(p.g_ghz), p.gamma_b_ghz), &lc)?,
            )
        }
        FitModel::Decay => {
            let h = histogram_from_csv(&d)?;
            let irf = a.irf_ps.map(|ps| ps * 1e-3).filter(|w| *w > 0.0);
            let opts = DecayOptions {
                rep_period_ns: a.wrap.then(|| cfg.pulses.period_ns()),
                irf_fwhm_ns: irf,
            };
            let model = if a.bi {
                DecayModel::Bi
            } else {
                DecayModel::Mono
            };
            ("decay", fit_decay(&h, model, &opts)?)
        }
    };
    let mut t = fit_table(&cfg, name, &result)?;
    t.meta("data", a.data.display());
    t.write(&default_out(&cfg, &a.out, &format!("fit_{name}.csv")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_digest() {
        let cfg = RunConfig {
            seed: Some(9),
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest().unwrap(), cfg.digest().unwrap());
        let other = RunConfig {
            system: SystemParams {
                g_ghz: 20.0,
                ..Default::default()
            },
            ..cfg.clone()
        };
        assert_ne!(other.digest().unwrap(), cfg.digest().unwrap());
        let moved = RunConfig {
            seed: Some(10),
            output_dir: PathBuf::from("elsewhere"),
            ..cfg.clone()
        };
        assert_eq!(moved.digest().unwrap(), cfg.digest().unwrap());
        assert_eq!(cfg.digest().unwrap().len(), 64);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[system]\ng_ghz = 20.7\n").unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.system.g_ghz, 20.7);
        assert_eq!(cfg.system.gamma_m_ghz, 24.1);
        assert!(RunConfig::from_toml("[system]\nbogus = 1\n").is_err());
    }

    #[test]
    fn floats_have_nine_significant_digits() {
        assert_eq!(fmt_f64(942.5), "9.42500000e2");
        assert_eq!(fmt_f64(-0.0123456789123), "-1.23456789e-2");
    }

    #[test]
    fn csv_round_trip() {
        let cfg = RunConfig::default();
        let mut t = Table::new(&cfg, "test", &["a", "b"]).unwrap();
        t.meta("center_ghz", fmt_f64(1.5));
        t.push_f64(&[1.0, f64::NAN]);
        t.push_f64(&[2.0, 3.0]);
        let d = CsvData::parse(&t.render()).unwrap();
        assert_eq!(d.meta["center_ghz"], "1.50000000e0");
        assert_eq!(d.meta["seed"], "none");
        assert_eq!(d.column("a").unwrap(), vec![1.0, 2.0]);
        assert!(d.column("b").unwrap()[0].is_nan());
        assert!(CsvData::parse("# x 1\na,b\n1\n").is_err());
    }

    #[test]
    fn sweeps_reject_zero_steps() {
        assert!(sweep(0.0, 1.0, 0).is_err());
        assert_eq!(sweep(0.5, 1.0, 1).unwrap(), vec![0.5]);
        assert_eq!(sweep(0.0, 1.0, 3).unwrap(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("x.csv");
        write_atomic(&path, "one").unwrap();
        write_atomic(&path, "two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
