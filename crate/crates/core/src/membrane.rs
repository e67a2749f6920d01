//! Membrane-local physics shared by the micro and macro solvers.
//!
//! Everything here is a pure function of trace values on the two sides of
//! the membrane. Time discretization of the capacitive term stays with the
//! callers: `dvdt` is an input, because the micro solver couples it
//! implicitly through the potential traces while the macro solvers treat the
//! jump as an ODE state.
//!
//! Logarithms are guarded by a hard positivity precondition and never
//! clamped; a nonpositive trace concentration is a solver failure, not a
//! value to patch.

use crate::params::{PhysicalParams, PumpParams, N_SPECIES};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MembraneError {
    #[error("nonpositive {side} trace concentration {value} for species index {species}")]
    NonpositiveConcentration {
        species: usize,
        side: &'static str,
        value: f64,
    },
    #[error("valence must be nonzero")]
    ZeroValence,
    #[error("resting potential undefined: all channel conductances are zero")]
    NoChannels,
}

/// Trace values on the two sides of one membrane point.
#[derive(Debug, Clone, Copy)]
pub struct MembraneSample {
    /// Membrane potential jump, `phi_intra - phi_extra`.
    pub v: f64,
    /// Time derivative of the jump, as discretized by the caller.
    pub dvdt: f64,
    pub c_intra: [f64; N_SPECIES],
    pub c_extra: [f64; N_SPECIES],
}

/// Nernst potential `(1/z)(ln C_extra - ln C_intra)`: the jump at which the
/// channel current of a species with valence `z` vanishes.
pub fn nernst_potential(z: i32, c_intra: f64, c_extra: f64) -> Result<f64, MembraneError> {
    if z == 0 {
        return Err(MembraneError::ZeroValence);
    }
    check_positive(0, c_intra, c_extra)?;
    Ok((c_extra.ln() - c_intra.ln()) / z as f64)
}

fn check_positive(species: usize, c_intra: f64, c_extra: f64) -> Result<(), MembraneError> {
    if !(c_intra > 0.0) {
        return Err(MembraneError::NonpositiveConcentration {
            species,
            side: "intracellular",
            value: c_intra,
        });
    }
    if !(c_extra > 0.0) {
        return Err(MembraneError::NonpositiveConcentration {
            species,
            side: "extracellular",
            value: c_extra,
        });
    }
    Ok(())
}

/// Ohmic channel current `G (v - E)`.
pub fn channel_current(g: f64, v: f64, e: f64) -> f64 {
    g * (v - e)
}

/// Na/K exchange pump current: two saturating Hill-type terms, driven by the
/// intracellular Na and extracellular K trace concentrations.
///
/// Defined (and zero) at zero concentration; always in `[0, I_max1+I_max2]`.
pub fn pump_current(p: &PumpParams, c_na_intra: f64, c_k_extra: f64) -> f64 {
    debug_assert!(c_na_intra >= 0.0 && c_k_extra >= 0.0);
    let hill = |c: f64, k: f64, pow: i32| (c / (c + k)).powi(pow);
    p.i_max1 * hill(c_na_intra, p.k_na1, 3) * hill(c_k_extra, p.k_k1, 2)
        + p.i_max2 * hill(c_na_intra, p.k_na2, 3) * hill(c_k_extra, p.k_k2, 2)
}

/// Per-species share of the pump current: the pump moves 3 Na out per 2 K in
/// and does not touch Cl.
pub fn pump_species_currents(i_p: f64) -> [f64; N_SPECIES] {
    [3.0 * i_p, -2.0 * i_p, 0.0]
}

/// Concentration-dependent pieces of the membrane fluxes, computed once per
/// membrane point and shared between the per-species fluxes and the total
/// current so the flux-sum identity holds at the floating-point level.
#[derive(Debug, Clone, Copy)]
pub struct FluxPieces {
    /// Nernst potential per species.
    pub nernst: [f64; N_SPECIES],
    /// Pump current.
    pub i_p: f64,
}

pub fn flux_pieces(
    c_intra: &[f64; N_SPECIES],
    c_extra: &[f64; N_SPECIES],
    params: &PhysicalParams,
) -> Result<FluxPieces, MembraneError> {
    let mut nernst = [0.0; N_SPECIES];
    for i in 0..N_SPECIES {
        check_positive(i, c_intra[i], c_extra[i])?;
        let z = params.species.valences[i] as f64;
        nernst[i] = (c_extra[i].ln() - c_intra[i].ln()) / z;
    }
    let i_p = pump_current(&params.pump, c_intra[crate::params::NA], c_extra[crate::params::K]);
    Ok(FluxPieces { nernst, i_p })
}

impl FluxPieces {
    /// The epsilon-stripped normal flux `z_i J_i . n` of species `i`:
    /// channel + pump share + capacitive share.
    pub fn species_flux(&self, i: usize, v: f64, dvdt: f64, params: &PhysicalParams) -> f64 {
        channel_current(params.conductances[i], v, self.nernst[i])
            + pump_species_currents(self.i_p)[i]
            + params.species.lambdas[i] * params.capacitance * dvdt
    }

    /// Total transmembrane current: the sum of all species fluxes.
    pub fn total_current(&self, v: f64, dvdt: f64, params: &PhysicalParams) -> f64 {
        let mut channel = 0.0;
        for i in 0..N_SPECIES {
            channel += channel_current(params.conductances[i], v, self.nernst[i]);
        }
        channel + self.i_p + params.capacitance * dvdt
    }
}

/// Flux of species `i` through the membrane for one sample.
pub fn species_interface_flux(
    i: usize,
    s: &MembraneSample,
    params: &PhysicalParams,
) -> Result<f64, MembraneError> {
    let pieces = flux_pieces(&s.c_intra, &s.c_extra, params)?;
    Ok(pieces.species_flux(i, s.v, s.dvdt, params))
}

/// Total transmembrane current for one sample.
pub fn total_membrane_current(
    s: &MembraneSample,
    params: &PhysicalParams,
) -> Result<f64, MembraneError> {
    let pieces = flux_pieces(&s.c_intra, &s.c_extra, params)?;
    Ok(pieces.total_current(s.v, s.dvdt, params))
}

/// Steady-state membrane potential for frozen trace concentrations: the root
/// of `v -> sum_i G_i (v - E_i) + I_p`.
///
/// The map is affine and strictly increasing, so the root is
/// `(sum G_i E_i - I_p) / sum G_i`; a bracketing bisection recomputes it
/// independently and the two must agree.
pub fn resting_potential(
    c_intra: &[f64; N_SPECIES],
    c_extra: &[f64; N_SPECIES],
    params: &PhysicalParams,
) -> Result<f64, MembraneError> {
    let g_sum = params.total_conductance();
    if !(g_sum > 0.0) {
        return Err(MembraneError::NoChannels);
    }
    let pieces = flux_pieces(c_intra, c_extra, params)?;
    let current = |v: f64| pieces.total_current(v, 0.0, params);

    let mut weighted = 0.0;
    for i in 0..N_SPECIES {
        weighted += params.conductances[i] * pieces.nernst[i];
    }
    let closed = (weighted - pieces.i_p) / g_sum;

    // Expand a bracket around the closed form, then bisect.
    let mut width = 1.0;
    let (mut lo, mut hi) = (closed - width, closed + width);
    while current(lo) > 0.0 || current(hi) < 0.0 {
        width *= 2.0;
        lo = closed - width;
        hi = closed + width;
        assert!(width < 1e12, "failed to bracket resting potential");
    }
    for _ in 0..200 {
        if hi - lo <= 1e-12 * (1.0 + closed.abs()) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if current(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let bisected = 0.5 * (lo + hi);
    assert!(
        (bisected - closed).abs() <= 1e-9 * (1.0 + closed.abs()),
        "closed form {closed} and bisection {bisected} disagree"
    );
    Ok(closed)
}
