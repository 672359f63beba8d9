//! Truncated Hilbert space of the emitter ⊗ cavity Fock ladder, the
//! Jaynes–Cummings Hamiltonian in the frame rotating at the cavity frequency,
//! and the Lindblad collapse channels.
//!
//! Basis index is `e·(n_max+1) + n` with emitter state `e` (0 ground,
//! 1 exciton, 2 feeder) and photon number `n`. Matrices are in angular units
//! (rad/ns), i.e. rates in GHz multiplied by 2π.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::polariton::SystemParams;
use crate::units::Detuning;

pub type CMatrix = DMatrix<Complex64>;

pub const GROUND: usize = 0;
pub const EXCITON: usize = 1;
pub const FEEDER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HilbertSpace {
    pub n_max: usize,
    pub levels: usize,
}

impl HilbertSpace {
    pub fn new(n_max: usize, levels: usize) -> Result<Self> {
        if n_max < 1 {
            return Err(Error::invalid("n_max must be at least 1"));
        }
        if !(2..=3).contains(&levels) {
            return Err(Error::invalid(format!(
                "emitter levels must be 2 or 3, got {levels}"
            )));
        }
        Ok(HilbertSpace { n_max, levels })
    }

    pub fn from_params(p: &SystemParams) -> Result<Self> {
        Self::new(p.n_max, p.emitter_levels)
    }

    pub fn dim(&self) -> usize {
        self.levels * (self.n_max + 1)
    }

    pub fn index(&self, emitter: usize, photons: usize) -> usize {
        debug_assert!(emitter < self.levels && photons <= self.n_max);
        emitter * (self.n_max + 1) + photons
    }

    pub fn zeros(&self) -> CMatrix {
        CMatrix::zeros(self.dim(), self.dim())
    }

    pub fn identity(&self) -> CMatrix {
        CMatrix::identity(self.dim(), self.dim())
    }

    /// Cavity annihilation operator (a|n_max+1⟩ truncated away).
    pub fn a(&self) -> CMatrix {
        let mut m = self.zeros();
        for e in 0..self.levels {
            for n in 1..=self.n_max {
                m[(self.index(e, n - 1), self.index(e, n))] =
                    Complex64::new((n as f64).sqrt(), 0.0);
            }
        }
        m
    }

    /// Emitter transition |from⟩ → |to⟩ (i.e. |to⟩⟨from|) ⊗ 1.
    pub fn transition(&self, from: usize, to: usize) -> CMatrix {
        let mut m = self.zeros();
        for n in 0..=self.n_max {
            m[(self.index(to, n), self.index(from, n))] = Complex64::new(1.0, 0.0);
        }
        m
    }

    /// Exciton lowering operator σ = |g⟩⟨x|.
    pub fn sigma(&self) -> CMatrix {
        self.transition(EXCITON, GROUND)
    }

    pub fn cavity_number(&self) -> CMatrix {
        let a = self.a();
        a.adjoint() * a
    }

    pub fn exciton_number(&self) -> CMatrix {
        self.transition(EXCITON, EXCITON)
    }

    /// Projector onto |e⟩ ⊗ |0⟩.
    pub fn basis_projector(&self, emitter: usize, photons: usize) -> CMatrix {
        let mut m = self.zeros();
        let i = self.index(emitter, photons);
        m[(i, i)] = Complex64::new(1.0, 0.0);
        m
    }

    pub fn ground_state(&self) -> CMatrix {
        self.basis_projector(GROUND, 0)
    }
}

/// H = 2π[−Δ σ†σ + g(a†σ + σ†a) + F(a + a†)], with Δ the cavity–exciton
/// detuning, so the exciton sits at −Δ and the cavity at zero.
pub fn hamiltonian(p: &SystemParams, det: &Detuning) -> Result<CMatrix> {
    p.validate()?;
    if !det.dw_ghz.is_finite() {
        return Err(Error::invalid("detuning must be finite"));
    }
    let s = HilbertSpace::from_params(p)?;
    let a = s.a();
    let sig = s.sigma();
    let coupling = a.adjoint() * &sig + sig.adjoint() * &a;
    let mut h = s.exciton_number() * Complex64::new(-det.dw_ghz, 0.0)
        + coupling * Complex64::new(p.g_ghz, 0.0);
    if p.cavity_drive_ghz != 0.0 {
        h += (&a + a.adjoint()) * Complex64::new(p.cavity_drive_ghz, 0.0);
    }
    Ok(h * Complex64::new(2.0 * PI, 0.0))
}

/// One Lindblad channel D[J] with `jump` already scaled by √(2π·rate).
#[derive(Debug, Clone)]
pub struct CollapseChannel {
    pub label: &'static str,
    pub rate_ghz: f64,
    pub jump: CMatrix,
}

impl CollapseChannel {
    fn new(label: &'static str, rate_ghz: f64, op: CMatrix) -> Self {
        let scale = Complex64::new((2.0 * PI * rate_ghz).sqrt(), 0.0);
        CollapseChannel {
            label,
            rate_ghz,
            jump: op * scale,
        }
    }
}

pub const CAVITY_LOSS: &str = "cavity_loss";
pub const EXCITON_RADIATIVE: &str = "exciton_radiative";
pub const PURE_DEPHASING: &str = "pure_dephasing";
pub const EXCITON_PUMP: &str = "exciton_pump";
pub const TRANSFER: &str = "transfer";
pub const FEEDER_PUMP: &str = "feeder_pump";
pub const FEEDER_DECAY: &str = "feeder_decay";

/// Collapse channels in a fixed order: cavity loss (γ_m), radiative exciton
/// decay into non-cavity modes (γ_b), pure dephasing (γ_d, acting as
/// √(2γ_d) σ†σ so that γ_x = γ_b + 2γ_d), incoherent exciton pump,
/// exciton → cavity transfer (a†σ), and for three levels the feeder pump and
/// feeder → cavity decay. Zero-rate channels are kept.
pub fn collapse_operators(p: &SystemParams) -> Result<Vec<CollapseChannel>> {
    p.validate()?;
    let s = HilbertSpace::from_params(p)?;
    let a = s.a();
    let sig = s.sigma();
    let mut out = vec![
        CollapseChannel::new(CAVITY_LOSS, p.gamma_m_ghz, a.clone()),
        CollapseChannel::new(EXCITON_RADIATIVE, p.gamma_b_ghz, sig.clone()),
        CollapseChannel::new(PURE_DEPHASING, 2.0 * p.dephasing_ghz(), s.exciton_number()),
        CollapseChannel::new(EXCITON_PUMP, p.pump_ghz, sig.adjoint()),
        CollapseChannel::new(TRANSFER, p.transfer_ghz, a.adjoint() * &sig),
    ];
    if s.levels == 3 {
        out.push(CollapseChannel::new(
            FEEDER_PUMP,
            p.feeder_pump_ghz,
            s.transition(GROUND, FEEDER),
        ));
        out.push(CollapseChannel::new(
            FEEDER_DECAY,
            p.feeder_decay_ghz,
            a.adjoint() * s.transition(FEEDER, GROUND),
        ));
    }
    Ok(out)
}

/// Dimension-checked expectation value Tr[O ρ].
pub fn expectation(op: &CMatrix, rho: &CMatrix) -> Result<Complex64> {
    if op.shape() != rho.shape() || !op.is_square() {
        return Err(Error::invalid(format!(
            "shape mismatch: operator {:?}, state {:?}",
            op.shape(),
            rho.shape()
        )));
    }
    Ok((op * rho).trace())
}
