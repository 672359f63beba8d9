//! Photon-correlation analysis of click streams: 50:50 beam-splitter
//! emulation, start–stop (TAC) and all-pairs delay histograms, g²
//! normalization and pulsed peak-area analysis.

use num_complex::Complex64;
use rand::Rng;

use crate::dynamics::CorrelationTrace;
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

/// Counts in contiguous bins. Delay histograms are centered on multiples of
/// the bin width; decay histograms start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges_ns: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_starts: u64,
    pub n_stops: u64,
}

impl Histogram {
    pub fn new(bin_edges_ns: Vec<f64>) -> Result<Self> {
        if bin_edges_ns.len() < 2 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        if bin_edges_ns.iter().any(|e| !e.is_finite())
            || bin_edges_ns.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::invalid(
                "bin edges must be finite and strictly increasing",
            ));
        }
        let n = bin_edges_ns.len() - 1;
        Ok(Histogram {
            bin_edges_ns,
            counts: vec![0; n],
            n_starts: 0,
            n_stops: 0,
        })
    }

    /// `n` bins of width `bin_ns` starting at `start_ns`.
    pub fn uniform(start_ns: f64, bin_ns: f64, n: usize) -> Result<Self> {
        if !(bin_ns > 0.0) || n == 0 {
            return Err(Error::invalid(
                "uniform histogram needs bin_ns > 0 and n > 0",
            ));
        }
        Self::new((0..=n).map(|k| start_ns + k as f64 * bin_ns).collect())
    }

    /// Bins centered on k·bin for k = −K..=K with K = round(window/bin).
    pub fn delay(bin_ns: f64, window_ns: f64) -> Result<Self> {
        if !(bin_ns > 0.0) || !(window_ns > 0.0) {
            return Err(Error::invalid("bin width and window must be positive"));
        }
        let k = (window_ns / bin_ns).round() as i64;
        Self::new((-k..=k + 1).map(|i| (i as f64 - 0.5) * bin_ns).collect())
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges_ns
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.bin_edges_ns.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index of the bin containing `x` (half-open bins), if any.
    pub fn locate(&self, x: f64) -> Option<usize> {
        let e = &self.bin_edges_ns;
        if !(x >= e[0] && x < e[e.len() - 1]) {
            return None;
        }
        let i = e.partition_point(|&b| b <= x);
        Some(i - 1)
    }

    pub fn add(&mut self, x: f64) -> bool {
        match self.locate(x) {
            Some(i) => {
                self.counts[i] += 1;
                true
            }
            None => false,
        }
    }

    /// Adds the counts and totals of a histogram with identical binning.
    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.bin_edges_ns != other.bin_edges_ns {
            return Err(Error::invalid(
                "cannot merge histograms with different binning",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.n_starts += other.n_starts;
        self.n_stops += other.n_stops;
        Ok(())
    }
}

/// Routes every click independently to detector A or B with probability ½.
pub fn split_beam(clicks: &[f64], seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream(seed, Domain::BeamSplitter, 0);
    let mut a = Vec::with_capacity(clicks.len() / 2 + 1);
    let mut b = Vec::with_capacity(clicks.len() / 2 + 1);
    for &t in clicks {
        if rng.random::<bool>() {
            a.push(t);
        } else {
            b.push(t);
        }
    }
    (a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    /// Every start–stop pair within the window.
    #[default]
    AllPairs,
    /// Time-to-amplitude converter: each start is paired with the first stop
    /// only; negative delays come from swapping the roles of the streams.
    StartStop,
}

fn check_sorted(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("{name} stream is empty")));
    }
    if v.iter().any(|t| !t.is_finite()) || v.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid(format!(
            "{name} stream must be finite and time-sorted"
        )));
    }
    Ok(())
}

/// Histogram of delays τ = t_stop − t_start with bins centered on k·bin_ns
/// for |k·bin_ns| ≤ window_ns.
pub fn start_stop_histogram(
    starts: &[f64],
    stops: &[f64],
    bin_ns: f64,
    window_ns: f64,
    estimator: Estimator,
) -> Result<Histogram> {
    check_sorted("start", starts)?;
    check_sorted("stop", stops)?;
    let mut h = Histogram::delay(bin_ns, window_ns)?;
    let lo = h.bin_edges_ns[0];
    let hi = *h.bin_edges_ns.last().unwrap();
    match estimator {
        Estimator::AllPairs => {
            let mut first = 0usize;
            for &s in starts {
                while first < stops.len() && stops[first] - s < lo {
                    first += 1;
                }
                let mut j = first;
                while j < stops.len() && stops[j] - s < hi {
                    h.add(stops[j] - s);
                    j += 1;
                }
            }
        }
        Estimator::StartStop => {
            // positive side: start triggers, first later stop ends
            let mut j = 0usize;
            for &s in starts {
                while j < stops.len() && stops[j] < s {
                    j += 1;
                }
                if j < stops.len() && stops[j] - s < hi {
                    h.add(stops[j] - s);
                }
            }
            // negative side: roles swapped
            let mut i = 0usize;
            for &t in stops {
                while i < starts.len() && starts[i] <= t {
                    i += 1;
                }
                if i < starts.len() && t - starts[i] >= lo {
                    h.add(t - starts[i]);
                }
            }
        }
    }
    h.n_starts = starts.len() as u64;
    h.n_stops = stops.len() as u64;
    Ok(h)
}

/// Count rates of the two detectors over the acquisition time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub start_per_ns: f64,
    pub stop_per_ns: f64,
}

impl Rates {
    pub fn from_totals(h: &Histogram, duration_ns: f64) -> Result<Self> {
        if !(duration_ns > 0.0) {
            return Err(Error::invalid("acquisition time must be positive"));
        }
        Ok(Rates {
            start_per_ns: h.n_starts as f64 / duration_ns,
            stop_per_ns: h.n_stops as f64 / duration_ns,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    /// Divide by the accidental level n_starts · r_stop · bin.
    Cw,
    /// Divide by the mean area of the side peaks.
    Pulsed {
        rep_period_ns: f64,
        half_window_ns: f64,
    },
}

pub fn normalize_g2(h: &Histogram, rates: Rates, mode: NormMode) -> Result<CorrelationTrace> {
    let norms: Vec<f64> = match mode {
        NormMode::Cw => h
            .widths()
            .iter()
            .map(|w| h.n_starts as f64 * rates.stop_per_ns * w)
            .collect(),
        NormMode::Pulsed {
            rep_period_ns,
            half_window_ns,
        } => {
            let r = pulsed_peak_areas(h, rep_period_ns, half_window_ns)?;
            vec![r.mean_side_area; h.len()]
        }
    };
    let norm = norms[0];
    if !(norm > 0.0) || norms.iter().any(|n| !(*n > 0.0)) {
        return Err(Error::numerical("g² normalization is zero"));
    }
    let values = h
        .counts
        .iter()
        .zip(&norms)
        .map(|(&c, &n)| Complex64::new(c as f64 / n, 0.0))
        .collect();
    Ok(CorrelationTrace {
        tau_grid_ns: h.centers(),
        values,
        normalization: norm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakArea {
    pub center_ns: f64,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakAreaReport {
    pub central_area: f64,
    pub mean_side_area: f64,
    pub ratio: f64,
    pub half_window_ns: f64,
    pub peaks: Vec<PeakArea>,
}

/// Integrates counts within ±half_window of every multiple of the pulse
/// period that fits fully inside the histogram.
pub fn pulsed_peak_areas(
    h: &Histogram,
    rep_period_ns: f64,
    half_window_ns: f64,
) -> Result<PeakAreaReport> {
    if !(rep_period_ns > 0.0) || !(half_window_ns > 0.0) {
        return Err(Error::invalid("period and half window must be positive"));
    }
    if 2.0 * half_window_ns > rep_period_ns {
        return Err(Error::invalid(format!(
            "peak windows of ±{half_window_ns} ns overlap at period {rep_period_ns} ns"
        )));
    }
    let lo = h.bin_edges_ns[0];
    let hi = *h.bin_edges_ns.last().unwrap();
    let m_lo = ((lo + half_window_ns) / rep_period_ns).ceil() as i64;
    let m_hi = ((hi - half_window_ns) / rep_period_ns).floor() as i64;
    if m_lo > 0 || m_hi < 0 {
        return Err(Error::invalid(
            "histogram does not contain the central peak",
        ));
    }
    let centers = h.centers();
    let mut peaks = Vec::new();
    for m in m_lo..=m_hi {
        let c = m as f64 * rep_period_ns;
        let area: f64 = centers
            .iter()
            .zip(&h.counts)
            .filter(|(x, _)| **x >= c - half_window_ns && **x < c + half_window_ns)
            .map(|(_, &n)| n as f64)
            .sum();
        peaks.push(PeakArea { center_ns: c, area });
    }
    let n_side = peaks.len() - 1;
    if n_side < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 side peaks, window holds {n_side}"
        )));
    }
    let central = peaks
        .iter()
        .find(|p| p.center_ns == 0.0)
        .map(|p| p.area)
        .unwrap_or(0.0);
    let side: f64 = peaks
        .iter()
        .filter(|p| p.center_ns != 0.0)
        .map(|p| p.area)
        .sum();
    let mean_side = side / n_side as f64;
    if !(mean_side > 0.0) {
        return Err(Error::numerical("side peaks are empty"));
    }
    Ok(PeakAreaReport {
        central_area: central,
        mean_side_area: mean_side,
        ratio: central / mean_side,
        half_window_ns,
        peaks,
    })
}
