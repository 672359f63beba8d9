//! Monte Carlo wave-function (quantum-jump) unraveling of the master
//! equation. Produces photon click records for continuous-wave and pulsed
//! excitation, the latter with Poissonian carrier capture after exponential
//! delays.
//!
//! Time advances on an integer tick grid of 1e-4 ns. The no-jump propagators
//! `exp(−i H_eff · 2^k ticks)` are precomputed, and the jump time is located
//! by a greedy binary descent on the (monotone) norm of the unnormalized
//! state.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::CVector;
use crate::error::{Error, Result};
use crate::hbt::Histogram;
use crate::hilbert::{
    collapse_operators, hamiltonian, CMatrix, CollapseChannel, HilbertSpace, CAVITY_LOSS, EXCITON,
    EXCITON_RADIATIVE, FEEDER, GROUND,
};
use crate::polariton::SystemParams;
use crate::rng::{stream, Domain, StreamRng};
use crate::units::Detuning;

/// Tick length of the trajectory clock.
pub const TICK_NS: f64 = 1e-4;
const LEVELS: usize = 44;

/// Emitter level raised by a capture event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureTarget {
    #[default]
    Exciton,
    Feeder,
}

/// Pulsed excitation: each pulse yields k ~ Poisson(μ) captures, each after
/// an independent exponential delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseConfig {
    pub rep_rate_mhz: f64,
    pub mean_captures_per_pulse: f64,
    pub capture_delay_ns: f64,
    pub n_pulses: u64,
    pub capture_target: CaptureTarget,
    /// When false at most one capture is drawn per pulse.
    pub reexcitation: bool,
    /// Pulses simulated per independent random stream.
    pub shard_pulses: u64,
}

impl Default for PulseConfig {
    fn default() -> Self {
        PulseConfig {
            rep_rate_mhz: 80.0,
            mean_captures_per_pulse: 1.0,
            capture_delay_ns: 0.06,
            n_pulses: 100_000,
            capture_target: CaptureTarget::Exciton,
            reexcitation: true,
            shard_pulses: 4096,
        }
    }
}

impl PulseConfig {
    pub fn period_ns(&self) -> f64 {
        1e3 / self.rep_rate_mhz
    }

    fn period_ticks(&self) -> u64 {
        (self.period_ns() / TICK_NS).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("rep_rate_mhz", self.rep_rate_mhz),
            ("mean_captures_per_pulse", self.mean_captures_per_pulse),
            ("capture_delay_ns", self.capture_delay_ns),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_pulses == 0 || self.shard_pulses == 0 {
            return Err(Error::invalid("n_pulses and shard_pulses must be positive"));
        }
        if self.period_ticks() < 10 {
            return Err(Error::invalid(
                "repetition period is shorter than the trajectory resolution",
            ));
        }
        Ok(())
    }
}

/// One detected photon: emitting channel and absolute time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClickRecord {
    pub channel: &'static str,
    pub time_ns: f64,
}

/// Clicks from the cavity-loss and exciton-radiative channels plus the number
/// of quantum jumps in every active channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickStream {
    pub records: Vec<ClickRecord>,
    pub jump_counts: Vec<(&'static str, u64)>,
    pub duration_ns: f64,
    pub rep_period_ns: Option<f64>,
}

impl ClickStream {
    pub fn times(&self, channel: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.channel == channel)
            .map(|r| r.time_ns)
            .collect()
    }

    pub fn jumps(&self, channel: &str) -> u64 {
        self.jump_counts
            .iter()
            .find(|(c, _)| *c == channel)
            .map(|(_, n)| *n)
            .unwrap_or(0)
    }

    fn append(&mut self, other: ClickStream) {
        self.records.extend(other.records);
        for (label, n) in other.jump_counts {
            match self.jump_counts.iter_mut().find(|(c, _)| *c == label) {
                Some(slot) => slot.1 += n,
                None => self.jump_counts.push((label, n)),
            }
        }
        self.duration_ns += other.duration_ns;
    }
}

fn is_click_channel(label: &str) -> bool {
    label == CAVITY_LOSS || label == EXCITON_RADIATIVE
}

/// Precomputed no-jump propagators and jump operators of one parameter point.
#[derive(Debug, Clone)]
pub struct Unraveling {
    pub space: HilbertSpace,
    channels: Vec<CollapseChannel>,
    powers: Vec<CMatrix>,
}

/// Unnormalized trajectory state with its jump threshold.
#[derive(Debug, Clone)]
struct TrajState {
    psi: CVector,
    threshold: f64,
    tick: u64,
}

fn draw_threshold(rng: &mut StreamRng) -> f64 {
    1.0 - rng.random::<f64>()
}

impl Unraveling {
    pub fn new(p: &SystemParams, det: &Detuning) -> Result<Self> {
        let space = HilbertSpace::from_params(p)?;
        let h = hamiltonian(p, det)?;
        let channels: Vec<CollapseChannel> = collapse_operators(p)?
            .into_iter()
            .filter(|c| c.rate_ghz > 0.0)
            .collect();
        let mut heff = h;
        for c in &channels {
            heff -= c.jump.adjoint() * &c.jump * Complex64::new(0.0, 0.5);
        }
        let mut powers = Vec::with_capacity(LEVELS);
        powers.push((heff * Complex64::new(0.0, -TICK_NS)).exp());
        for k in 1..LEVELS {
            let prev = &powers[k - 1];
            powers.push(prev * prev);
        }
        Ok(Unraveling {
            space,
            channels,
            powers,
        })
    }

    pub fn channel_labels(&self) -> Vec<&'static str> {
        self.channels.iter().map(|c| c.label).collect()
    }

    fn basis(&self, emitter: usize, photons: usize) -> CVector {
        let mut v = CVector::zeros(self.space.dim());
        v[self.space.index(emitter, photons)] = Complex64::new(1.0, 0.0);
        v
    }

    /// Advances to `stop` (inclusive) or to the first jump before it. Returns
    /// the label of the channel that jumped, if any.
    fn advance(
        &self,
        s: &mut TrajState,
        stop: u64,
        rng: &mut StreamRng,
    ) -> Result<Option<&'static str>> {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        let mut psi = s.psi.clone();
        let mut cand = CVector::zeros(psi.len());
        let mut pos = s.tick;
        // gallop up while the norm stays above the threshold, then descend
        let mut top = 0;
        while top < LEVELS && pos + (1u64 << top) <= stop {
            cand.gemv(one, &self.powers[top], &psi, zero);
            if cand.norm_squared() <= s.threshold {
                break;
            }
            std::mem::swap(&mut psi, &mut cand);
            pos += 1u64 << top;
            top += 1;
        }
        for k in (0..top.min(LEVELS)).rev() {
            let step = 1u64 << k;
            if pos + step > stop {
                continue;
            }
            cand.gemv(one, &self.powers[k], &psi, zero);
            if cand.norm_squared() > s.threshold {
                std::mem::swap(&mut psi, &mut cand);
                pos += step;
            }
        }
        if pos == stop {
            s.psi = psi;
            s.tick = stop;
            return Ok(None);
        }
        // the norm crosses the threshold within the next tick
        let psi = &self.powers[0] * psi;
        s.tick = pos + 1;
        let weights: Vec<f64> = self
            .channels
            .iter()
            .map(|c| (&c.jump * &psi).norm_squared())
            .collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::numerical(format!(
                "no jump channel is available at t = {} ns (state norm² {:e})",
                s.tick as f64 * TICK_NS,
                psi.norm_squared()
            )));
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = self.channels.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let next = &self.channels[pick].jump * psi;
        let n = next.norm();
        s.psi = next / Complex64::new(n, 0.0);
        s.threshold = draw_threshold(rng);
        Ok(Some(self.channels[pick].label))
    }

    /// Runs until `stop`, recording clicks and jump counts.
    fn run_until(
        &self,
        s: &mut TrajState,
        stop: u64,
        rng: &mut StreamRng,
        out: &mut ClickStream,
    ) -> Result<()> {
        while s.tick < stop {
            if let Some(label) = self.advance(s, stop, rng)? {
                if is_click_channel(label) {
                    out.records.push(ClickRecord {
                        channel: label,
                        time_ns: s.tick as f64 * TICK_NS,
                    });
                }
                match out.jump_counts.iter_mut().find(|(c, _)| *c == label) {
                    Some(slot) => slot.1 += 1,
                    None => out.jump_counts.push((label, 1)),
                }
            }
        }
        Ok(())
    }

    fn renormalize(&self, s: &mut TrajState, rng: &mut StreamRng) {
        let n = s.psi.norm();
        s.psi /= Complex64::new(n, 0.0);
        s.threshold = draw_threshold(rng);
    }

    /// Incoherent capture: the Kraus pair {|target⟩⟨g|, 1 − |g⟩⟨g|}.
    fn capture(&self, s: &mut TrajState, target: usize, rng: &mut StreamRng) {
        self.renormalize(s, rng);
        let mut ground = CVector::zeros(self.space.dim());
        let mut rest = s.psi.clone();
        for n in 0..=self.space.n_max {
            let i = self.space.index(GROUND, n);
            ground[self.space.index(target, n)] = s.psi[i];
            rest[i] = Complex64::new(0.0, 0.0);
        }
        let pg = ground.norm_squared();
        let next = if rng.random::<f64>() < pg {
            ground
        } else {
            rest
        };
        let n = next.norm();
        s.psi = next / Complex64::new(n, 0.0);
    }

    fn empty_stream(&self) -> ClickStream {
        ClickStream {
            records: Vec::new(),
            jump_counts: self.channel_labels().into_iter().map(|l| (l, 0)).collect(),
            duration_ns: 0.0,
            rep_period_ns: None,
        }
    }

    fn cw_shard(&self, ticks: u64, offset: u64, seed: u64, index: u64) -> Result<ClickStream> {
        let mut rng = stream(seed, Domain::Trajectory, index);
        let mut s = TrajState {
            psi: self.basis(GROUND, 0),
            threshold: draw_threshold(&mut rng),
            tick: offset,
        };
        let mut out = self.empty_stream();
        self.run_until(&mut s, offset + ticks, &mut rng, &mut out)?;
        out.duration_ns = ticks as f64 * TICK_NS;
        Ok(out)
    }

    fn pulsed_shard(
        &self,
        cfg: &PulseConfig,
        first: u64,
        count: u64,
        seed: u64,
        index: u64,
    ) -> Result<ClickStream> {
        let mut rng = stream(seed, Domain::Trajectory, index);
        let period = cfg.period_ticks();
        let target = match cfg.capture_target {
            CaptureTarget::Exciton => EXCITON,
            CaptureTarget::Feeder => FEEDER,
        };
        if target >= self.space.levels {
            return Err(Error::invalid("feeder capture needs a three-level emitter"));
        }
        let poisson =
            Poisson::new(cfg.mean_captures_per_pulse).map_err(|e| Error::invalid(e.to_string()))?;
        let delay =
            Exp::new(1.0 / cfg.capture_delay_ns).map_err(|e| Error::invalid(e.to_string()))?;
        let start = first * period;
        let end = (first + count) * period;
        let mut s = TrajState {
            psi: self.basis(GROUND, 0),
            threshold: draw_threshold(&mut rng),
            tick: start,
        };
        let mut out = self.empty_stream();
        let mut pending: BinaryHeap<Reverse<u64>> = BinaryHeap::new();
        let mut next_pulse = start;
        loop {
            let next_capture = pending.peek().map(|r| r.0).unwrap_or(u64::MAX);
            let stop = next_pulse.min(next_capture).min(end);
            self.run_until(&mut s, stop, &mut rng, &mut out)?;
            if stop == end {
                break;
            }
            if stop == next_capture {
                pending.pop();
                self.capture(&mut s, target, &mut rng);
            } else {
                let mut k = poisson.sample(&mut rng) as u64;
                if !cfg.reexcitation {
                    k = k.min(1);
                }
                for _ in 0..k {
                    let d = (delay.sample(&mut rng) / TICK_NS).round() as u64;
                    pending.push(Reverse(next_pulse + d.max(1)));
                }
                next_pulse += period;
            }
        }
        out.duration_ns = (end - start) as f64 * TICK_NS;
        Ok(out)
    }

    /// Conditional expectation values ⟨ψ|O|ψ⟩/⟨ψ|ψ⟩ of one trajectory started
    /// in |emitter, photons⟩ at every time of `t_grid_ns`.
    fn sample_trajectory(
        &self,
        initial: (usize, usize),
        ticks: &[u64],
        ops: &[CMatrix],
        rng: &mut StreamRng,
    ) -> Result<Vec<Vec<f64>>> {
        let mut s = TrajState {
            psi: self.basis(initial.0, initial.1),
            threshold: draw_threshold(rng),
            tick: 0,
        };
        let mut sink = self.empty_stream();
        let mut out = Vec::with_capacity(ticks.len());
        for &t in ticks {
            self.run_until(&mut s, t, rng, &mut sink)?;
            let nrm = s.psi.norm_squared();
            out.push(
                ops.iter()
                    .map(|o| (s.psi.dotc(&(o * &s.psi))).re / nrm)
                    .collect(),
            );
        }
        Ok(out)
    }
}

/// Continuous-wave run of `duration_ns`, split into independent shards of
/// `shard_ns` that each start from the ground state.
pub fn run_cw(
    p: &SystemParams,
    det: &Detuning,
    duration_ns: f64,
    shard_ns: f64,
    seed: u64,
) -> Result<ClickStream> {
    if !(duration_ns > 0.0 && duration_ns.is_finite()) || !(shard_ns > 0.0) {
        return Err(Error::invalid("duration and shard length must be positive"));
    }
    let u = Unraveling::new(p, det)?;
    let total = (duration_ns / TICK_NS).round() as u64;
    let shard = ((shard_ns / TICK_NS).round() as u64).max(1).min(total);
    let n_shards = total.div_ceil(shard);
    let parts: Vec<Result<ClickStream>> = (0..n_shards)
        .into_par_iter()
        .map(|i| {
            let len = shard.min(total - i * shard);
            u.cw_shard(len, i * shard, seed, i)
        })
        .collect();
    let mut out = u.empty_stream();
    for part in parts {
        out.append(part?);
    }
    Ok(out)
}

/// Pulsed run. The pulses replace the continuous pumps, so `pump_ghz` and
/// `feeder_pump_ghz` are ignored here.
pub fn run_pulsed(
    p: &SystemParams,
    det: &Detuning,
    pulses: &PulseConfig,
    seed: u64,
) -> Result<ClickStream> {
    pulses.validate()?;
    let p = SystemParams {
        pump_ghz: 0.0,
        feeder_pump_ghz: 0.0,
        ..p.clone()
    };
    let u = Unraveling::new(&p, det)?;
    let n_shards = pulses.n_pulses.div_ceil(pulses.shard_pulses);
    let parts: Vec<Result<ClickStream>> = (0..n_shards)
        .into_par_iter()
        .map(|i| {
            let first = i * pulses.shard_pulses;
            let count = pulses.shard_pulses.min(pulses.n_pulses - first);
            u.pulsed_shard(pulses, first, count, seed, i)
        })
        .collect();
    let mut out = u.empty_stream();
    for part in parts {
        out.append(part?);
    }
    out.rep_period_ns = Some(pulses.period_ns());
    Ok(out)
}

/// Ensemble mean and standard error of observables over independent
/// trajectories started in a basis state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleAverage {
    pub t_grid_ns: Vec<f64>,
    /// `mean[i][k]`: observable k at time i.
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
}

pub fn ensemble_average(
    p: &SystemParams,
    det: &Detuning,
    initial: (usize, usize),
    t_grid_ns: &[f64],
    ops: &[CMatrix],
    n_traj: u64,
    seed: u64,
) -> Result<EnsembleAverage> {
    if n_traj < 2 {
        return Err(Error::invalid("need at least two trajectories"));
    }
    if t_grid_ns.iter().any(|t| !(*t >= 0.0)) || t_grid_ns.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("time grid must be non-negative and sorted"));
    }
    let u = Unraveling::new(p, det)?;
    if initial.0 >= u.space.levels || initial.1 > u.space.n_max {
        return Err(Error::invalid("initial state outside the truncated space"));
    }
    let ticks: Vec<u64> = t_grid_ns
        .iter()
        .map(|t| (t / TICK_NS).round() as u64)
        .collect();
    let samples: Vec<Result<Vec<Vec<f64>>>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, Domain::Trajectory, i);
            u.sample_trajectory(initial, &ticks, ops, &mut rng)
        })
        .collect();
    let nt = t_grid_ns.len();
    let no = ops.len();
    let mut sum = vec![vec![0.0; no]; nt];
    let mut sq = vec![vec![0.0; no]; nt];
    for s in samples {
        let s = s?;
        for i in 0..nt {
            for k in 0..no {
                sum[i][k] += s[i][k];
                sq[i][k] += s[i][k] * s[i][k];
            }
        }
    }
    let n = n_traj as f64;
    let mean: Vec<Vec<f64>> = sum
        .iter()
        .map(|r| r.iter().map(|v| v / n).collect())
        .collect();
    let stderr = sq
        .iter()
        .zip(&mean)
        .map(|(r, m)| {
            r.iter()
                .zip(m)
                .map(|(s2, mu)| ((s2 / n - mu * mu).max(0.0) * n / (n - 1.0) / n).sqrt())
                .collect()
        })
        .collect();
    Ok(EnsembleAverage {
        t_grid_ns: t_grid_ns.to_vec(),
        mean,
        stderr,
    })
}

/// Channel label of photons added by [`admix_uncorrelated`].
pub const UNCORRELATED: &str = "uncorrelated";

/// Adds light that is synchronous with the pulses but statistically
/// independent of the emitter: Poisson(λ) photons per pulse, each delayed by
/// a capture time plus a cavity photon lifetime. λ is chosen so the added
/// photons make up `fraction` of the combined count in `channel`.
pub fn admix_uncorrelated(
    clicks: &ClickStream,
    channel: &str,
    fraction: f64,
    pulses: &PulseConfig,
    gamma_m_ghz: f64,
    seed: u64,
) -> Result<ClickStream> {
    pulses.validate()?;
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "admixture fraction must lie in [0, 1), got {fraction}"
        )));
    }
    if !(gamma_m_ghz > 0.0) {
        return Err(Error::invalid("cavity linewidth must be positive"));
    }
    let mut out = clicks.clone();
    if fraction == 0.0 {
        return Ok(out);
    }
    let n_signal = clicks.times(channel).len() as f64;
    if n_signal == 0.0 {
        return Err(Error::invalid(format!("no clicks in channel {channel}")));
    }
    let lambda = fraction / (1.0 - fraction) * n_signal / pulses.n_pulses as f64;
    let poisson = Poisson::new(lambda).map_err(|e| Error::invalid(e.to_string()))?;
    let capture =
        Exp::new(1.0 / pulses.capture_delay_ns).map_err(|e| Error::invalid(e.to_string()))?;
    let photon =
        Exp::new(std::f64::consts::TAU * gamma_m_ghz).map_err(|e| Error::invalid(e.to_string()))?;
    let period = pulses.period_ticks() as f64 * TICK_NS;
    let added: Vec<ClickRecord> = (0..pulses.n_pulses)
        .into_par_iter()
        .flat_map_iter(|k| {
            let mut rng = stream(seed, Domain::Noise, k);
            let n = poisson.sample(&mut rng) as usize;
            let t0 = k as f64 * period;
            (0..n)
                .map(|_| ClickRecord {
                    channel: UNCORRELATED,
                    time_ns: t0 + capture.sample(&mut rng) + photon.sample(&mut rng),
                })
                .collect::<Vec<_>>()
        })
        .collect();
    out.records.extend(added);
    out.records.sort_by(|a, b| a.time_ns.total_cmp(&b.time_ns));
    Ok(out)
}

/// Histogram of click times modulo the pulse period (time-resolved
/// photoluminescence).
pub fn lifetime_from_clicks(
    clicks: &ClickStream,
    channel: &str,
    rep_period_ns: f64,
    bin_ns: f64,
) -> Result<Histogram> {
    if !(rep_period_ns > 0.0) || !(bin_ns > 0.0) {
        return Err(Error::invalid("period and bin width must be positive"));
    }
    let times = clicks.times(channel);
    if times.is_empty() {
        return Err(Error::invalid(format!("no clicks in channel {channel}")));
    }
    let n = (rep_period_ns / bin_ns).round().max(1.0) as usize;
    let mut h = Histogram::uniform(0.0, rep_period_ns / n as f64, n)?;
    for t in &times {
        let x = t.rem_euclid(rep_period_ns);
        if !h.add(x) {
            // rounding can put x exactly on the upper edge
            let last = h.len() - 1;
            h.counts[last] += 1;
        }
    }
    h.n_starts = times.len() as u64;
    Ok(h)
}
