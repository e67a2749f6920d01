//! Space-free reference dynamics for the membrane exchange system.
//!
//! With spatially uniform data both homogenized models collapse to seven
//! unknowns per unit cell: three intracellular concentrations, three
//! extracellular concentrations, and the membrane potential. This module
//! integrates that ODE system with classic fourth-order Runge-Kutta and with
//! the same backward-Euler/Picard discretization the field solvers use.
//!
//! The right-hand side is written out from first principles on purpose, so
//! the module can serve as an independent oracle for the PDE solvers instead
//! of sharing their flux code.

use crate::geometry::Measures;
use crate::params::{PhysicalParams, N_SPECIES};

/// The seven-unknown state of the well-mixed two-compartment system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointState {
    pub c_intra: [f64; N_SPECIES],
    pub c_extra: [f64; N_SPECIES],
    pub v: f64,
}

impl PointState {
    fn axpy(&self, scale: f64, d: &Derivatives) -> PointState {
        let mut out = *self;
        for i in 0..N_SPECIES {
            out.c_intra[i] += scale * d.c_intra[i];
            out.c_extra[i] += scale * d.c_extra[i];
        }
        out.v += scale * d.v;
        out
    }
}

/// Time derivative of a [`PointState`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Derivatives {
    pub c_intra: [f64; N_SPECIES],
    pub c_extra: [f64; N_SPECIES],
    pub v: f64,
}

/// Time derivative of the well-mixed system.
///
/// The membrane capacitance must be positive: the potential is a genuine
/// dynamic variable here, not an algebraic constraint.
pub fn rhs(state: &PointState, phys: &PhysicalParams, meas: &Measures) -> Derivatives {
    assert!(
        phys.capacitance > 0.0,
        "point model needs P_m > 0, got {}",
        phys.capacitance
    );
    let g = phys.conductances;
    let lam = phys.species.lambdas;
    let pump = &phys.pump;

    let mut nernst = [0.0; N_SPECIES];
    for i in 0..N_SPECIES {
        let z = phys.species.valences[i] as f64;
        nernst[i] = (state.c_extra[i].ln() - state.c_intra[i].ln()) / z;
    }
    let hill = |c: f64, k: f64, p: i32| (c / (c + k)).powi(p);
    let i_p = pump.i_max1
        * hill(state.c_intra[0], pump.k_na1, 3)
        * hill(state.c_extra[1], pump.k_k1, 2)
        + pump.i_max2
            * hill(state.c_intra[0], pump.k_na2, 3)
            * hill(state.c_extra[1], pump.k_k2, 2);
    let pump_split = [3.0 * i_p, -2.0 * i_p, 0.0];

    let mut channel_total = 0.0;
    for i in 0..N_SPECIES {
        channel_total += g[i] * (state.v - nernst[i]);
    }
    let dvdt = -(channel_total + i_p) / phys.capacitance;

    let mut out = Derivatives {
        c_intra: [0.0; N_SPECIES],
        c_extra: [0.0; N_SPECIES],
        v: dvdt,
    };
    for i in 0..N_SPECIES {
        let z = phys.species.valences[i] as f64;
        let flux = g[i] * (state.v - nernst[i])
            + pump_split[i]
            + lam[i] * phys.capacitance * dvdt;
        out.c_intra[i] = -meas.interface * flux / (z * meas.vol_intra);
        out.c_extra[i] = meas.interface * flux / (z * meas.vol_extra);
    }
    out
}

/// One classic Runge-Kutta step.
pub fn rk4_step(state: &PointState, phys: &PhysicalParams, meas: &Measures, dt: f64) -> PointState {
    let k1 = rhs(state, phys, meas);
    let k2 = rhs(&state.axpy(0.5 * dt, &k1), phys, meas);
    let k3 = rhs(&state.axpy(0.5 * dt, &k2), phys, meas);
    let k4 = rhs(&state.axpy(dt, &k3), phys, meas);
    let mut out = *state;
    for i in 0..N_SPECIES {
        out.c_intra[i] += dt / 6.0
            * (k1.c_intra[i] + 2.0 * k2.c_intra[i] + 2.0 * k3.c_intra[i] + k4.c_intra[i]);
        out.c_extra[i] += dt / 6.0
            * (k1.c_extra[i] + 2.0 * k2.c_extra[i] + 2.0 * k3.c_extra[i] + k4.c_extra[i]);
    }
    out.v += dt / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v);
    out
}

/// Integrate with RK4 over `steps` steps of size `dt`.
pub fn integrate(
    state: &PointState,
    phys: &PhysicalParams,
    meas: &Measures,
    dt: f64,
    steps: usize,
) -> PointState {
    let mut s = *state;
    for _ in 0..steps {
        s = rk4_step(&s, phys, meas, dt);
    }
    s
}

/// One backward-Euler step with Picard lagging of the logarithmic and pump
/// terms, mirroring the discretization of the field solvers on a single
/// well-mixed cell. Works for `P_m = 0` as well (the v-update degenerates to
/// the algebraic current balance when conductances are present).
pub fn be_step(
    state: &PointState,
    phys: &PhysicalParams,
    meas: &Measures,
    dt: f64,
    tol: f64,
    max_iter: usize,
) -> PointState {
    let g = phys.conductances;
    let gsum = phys.total_conductance();
    let lam = phys.species.lambdas;
    let pm = phys.capacitance;
    let pump = &phys.pump;

    let mut cur = *state;
    for _ in 0..max_iter {
        let mut nernst = [0.0; N_SPECIES];
        for i in 0..N_SPECIES {
            let z = phys.species.valences[i] as f64;
            nernst[i] = (cur.c_extra[i].ln() - cur.c_intra[i].ln()) / z;
        }
        let hill = |c: f64, k: f64, p: i32| (c / (c + k)).powi(p);
        let i_p = pump.i_max1 * hill(cur.c_intra[0], pump.k_na1, 3) * hill(cur.c_extra[1], pump.k_k1, 2)
            + pump.i_max2 * hill(cur.c_intra[0], pump.k_na2, 3) * hill(cur.c_extra[1], pump.k_k2, 2);
        let pump_split = [3.0 * i_p, -2.0 * i_p, 0.0];

        let denom = pm / dt + gsum;
        let v_new = if denom > 0.0 {
            let mut num = pm / dt * state.v - i_p;
            for i in 0..N_SPECIES {
                num += g[i] * nernst[i];
            }
            num / denom
        } else {
            state.v
        };
        let dvdt = (v_new - state.v) / dt;

        let mut next = *state;
        next.v = v_new;
        let mut change: f64 = (v_new - cur.v).abs() / (1.0 + v_new.abs());
        for i in 0..N_SPECIES {
            let z = phys.species.valences[i] as f64;
            let flux = g[i] * (v_new - nernst[i]) + pump_split[i] + lam[i] * pm * dvdt;
            next.c_intra[i] = state.c_intra[i] - dt * meas.interface * flux / (z * meas.vol_intra);
            next.c_extra[i] = state.c_extra[i] + dt * meas.interface * flux / (z * meas.vol_extra);
            change = change
                .max((next.c_intra[i] - cur.c_intra[i]).abs() / (1.0 + next.c_intra[i].abs()));
            change = change
                .max((next.c_extra[i] - cur.c_extra[i]).abs() / (1.0 + next.c_extra[i].abs()));
        }
        cur = next;
        if change <= tol {
            break;
        }
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CellShape;
    use crate::params::{PumpParams, SpeciesSpec};

    fn measures() -> Measures {
        CellShape::default().measures()
    }

    fn equilibrium_state() -> PointState {
        PointState {
            c_intra: [140.0, 5.0, 145.0],
            c_extra: [140.0, 5.0, 145.0],
            v: 0.0,
        }
    }

    #[test]
    fn equilibrium_rhs_vanishes() {
        let mut phys = PhysicalParams::default();
        phys.pump = PumpParams::off();
        let d = rhs(&equilibrium_state(), &phys, &measures());
        assert_eq!(d.v, 0.0);
        for i in 0..N_SPECIES {
            assert_eq!(d.c_intra[i], 0.0);
            assert_eq!(d.c_extra[i], 0.0);
        }
    }

    #[test]
    fn rk4_conserves_mass_and_electroneutrality() {
        let phys = PhysicalParams::default();
        let meas = measures();
        let start = PointState {
            c_intra: [10.0, 135.0, 145.0],
            c_extra: [140.0, 5.0, 145.0],
            v: 0.0,
        };
        let z = SpeciesSpec::default().valences;
        let total = |s: &PointState, i: usize| {
            meas.vol_intra * s.c_intra[i] + meas.vol_extra * s.c_extra[i]
        };
        let end = integrate(&start, &phys, &meas, 1e-3, 1000);
        for i in 0..N_SPECIES {
            let drift = (total(&end, i) - total(&start, i)).abs() / total(&start, i);
            assert!(drift <= 1e-12, "species {i} drift {drift:e}");
        }
        let en = |c: &[f64; 3]| {
            c.iter()
                .zip(z.iter())
                .map(|(ci, zi)| *zi as f64 * ci)
                .sum::<f64>()
        };
        assert!(en(&end.c_intra).abs() <= 1e-11, "intra EN {}", en(&end.c_intra));
        assert!(en(&end.c_extra).abs() <= 1e-11, "extra EN {}", en(&end.c_extra));
    }

    #[test]
    fn capacitor_relaxation_matches_closed_form() {
        let mut phys = PhysicalParams::default();
        phys.pump = PumpParams::off();
        let meas = measures();
        let start = PointState {
            v: 0.1,
            ..equilibrium_state()
        };
        let end = integrate(&start, &phys, &meas, 1e-4, 10_000);
        let rate = phys.total_conductance() / phys.capacitance;
        let exact = 0.1 * (-rate).exp();
        assert!(
            (end.v - exact).abs() <= 1e-10,
            "v(1) = {} vs {exact}",
            end.v
        );
        for i in 0..N_SPECIES {
            assert!((end.c_intra[i] - start.c_intra[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn be_step_is_stationary_at_equilibrium() {
        let mut phys = PhysicalParams::default();
        phys.pump = PumpParams::off();
        let s = equilibrium_state();
        let next = be_step(&s, &phys, &measures(), 1e-2, 1e-12, 30);
        assert_eq!(next, s);
    }

    #[test]
    fn be_step_approaches_rk4_as_dt_shrinks() {
        let phys = PhysicalParams::default();
        let meas = measures();
        let start = PointState {
            c_intra: [12.0, 130.0, 142.0],
            c_extra: [138.0, 6.0, 144.0],
            v: -0.05,
        };
        let reference = integrate(&start, &phys, &meas, 1e-4, 1000);
        let mut prev_err = f64::INFINITY;
        for steps in [100usize, 200, 400] {
            let dt = 0.1 / steps as f64;
            let mut s = start;
            for _ in 0..steps {
                s = be_step(&s, &phys, &meas, dt, 1e-12, 50);
            }
            let mut err: f64 = (s.v - reference.v).abs();
            for i in 0..N_SPECIES {
                err = err.max((s.c_intra[i] - reference.c_intra[i]).abs());
                err = err.max((s.c_extra[i] - reference.c_extra[i]).abs());
            }
            assert!(err < 0.7 * prev_err, "no first-order decay: {err:e} vs {prev_err:e}");
            prev_err = err;
        }
    }
}
