//! Homogenized bidomain solvers on the macroscopic grid.
//!
//! Two limit regimes share one time stepper. In the connected-disconnected
//! regime the extracellular phase percolates and carries a diffusion-drift
//! PDE while the isolated cells reduce to a pointwise ODE per macro cell; the
//! intracellular potential is the extracellular one plus the membrane jump.
//! In the connected-connected regime both phases carry PDEs and the two
//! potentials solve a single coupled elliptic system with the capacitive
//! jump term, gauge-fixed to a zero-mean extracellular potential.
//!
//! As in the micro solver, each backward-Euler step is a Picard iteration
//! with lagged logarithmic and pump terms, the membrane sources are shared
//! floats between the two compartments (so they cancel bit-exactly in the
//! conservation budget), and the valence-weighted species equations
//! telescope against the potential solve, pinning electro-neutrality drift
//! to the linear-solver tolerance.

use crate::cell_problem::EffectiveTensor;
use crate::geometry::Measures;
use crate::linalg::{
    picard_loop, solve_spd, LinearError, NullSpace, PicardError, PicardSettings, StencilMatrix,
};
use crate::membrane::{flux_pieces, FluxPieces, MembraneError};
use crate::micro::StepInfo;
use crate::params::{validate, Connectivity, InvalidSetup, ModelSetup, PhysicalParams, N_SPECIES};
use thiserror::Error;

/// Relative off-diagonal tolerance when reducing an effective tensor to the
/// axis-aligned face coefficients of the finite-volume scheme.
const DIAGONAL_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MacroError {
    #[error(transparent)]
    Invalid(#[from] InvalidSetup),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error(transparent)]
    Membrane(#[from] MembraneError),
    #[error(
        "effective tensor for the {phase} phase is not diagonal \
         (off-diagonal {offdiag:e}); the macro grid is axis-aligned"
    )]
    NotDiagonal { phase: &'static str, offdiag: f64 },
    #[error("effective tensor for the {phase} phase must be positive definite in this regime")]
    NotPositive { phase: &'static str },
    #[error("the connected-connected regime needs membrane coupling (conductance or capacitance)")]
    Uncoupled,
    #[error(
        "Picard iteration diverged at t = {time}: {iterations} sweeps, \
         last relative change {last_change:e}"
    )]
    PicardDivergence {
        time: f64,
        iterations: usize,
        last_change: f64,
    },
    #[error(
        "positivity lost at t = {time}: species {species} in macro cell {cell} \
         reached {value}"
    )]
    PositivityLoss {
        time: f64,
        species: usize,
        cell: usize,
        value: f64,
    },
}

/// Macroscopic state: per-species concentrations and potential in each
/// compartment plus the membrane potential, all on the same m-by-m grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    pub time: f64,
    pub conc_intra: [Vec<f64>; N_SPECIES],
    pub conc_extra: [Vec<f64>; N_SPECIES],
    pub phi_intra: Vec<f64>,
    pub phi_extra: Vec<f64>,
    pub v: Vec<f64>,
}

struct Face {
    lo: usize,
    hi: usize,
    axis: usize,
}

pub struct MacroSolver {
    m: usize,
    phys: PhysicalParams,
    meas: Measures,
    connectivity: Connectivity,
    d_intra: [f64; 2],
    d_extra: [f64; 2],
    linear_tol: f64,
    picard: PicardSettings,
    faces: Vec<Face>,
    sheet_stencil: StencilMatrix,
    coupled_stencil: StencilMatrix,
    coupled_null: NullSpace,
    sheet_null: NullSpace,
}

fn check_tensor(
    t: &EffectiveTensor,
    phase: &'static str,
    need_definite: bool,
) -> Result<[f64; 2], MacroError> {
    if !t.is_diagonal(DIAGONAL_TOL) {
        return Err(MacroError::NotDiagonal {
            phase,
            offdiag: t.m[0][1].abs().max(t.m[1][0].abs()),
        });
    }
    let d = t.diagonal();
    if need_definite {
        if d[0] <= 0.0 || d[1] <= 0.0 {
            return Err(MacroError::NotPositive { phase });
        }
    } else if d[0] < -1e-12 || d[1] < -1e-12 {
        return Err(MacroError::NotPositive { phase });
    }
    // Clamp semidefinite round-off so face coefficients stay nonnegative.
    Ok([d[0].max(0.0), d[1].max(0.0)])
}

impl MacroSolver {
    /// Builds a solver on an `m`-by-`m` macro grid. The intracellular tensor
    /// is only consulted in the connected-connected regime; the regime comes
    /// from `setup.run.connectivity`.
    pub fn new(
        setup: &ModelSetup,
        m: usize,
        d_intra: Option<&EffectiveTensor>,
        d_extra: &EffectiveTensor,
    ) -> Result<Self, MacroError> {
        validate(setup).into_result()?;
        assert!(m >= 1, "macro grid needs at least one cell");
        let connectivity = setup.run.connectivity;
        let (di, de) = match connectivity {
            Connectivity::ConDiscon => {
                let de = check_tensor(d_extra, "extracellular", true)?;
                ([0.0, 0.0], de)
            }
            Connectivity::ConCon => {
                if setup.physical.total_conductance() + setup.physical.capacitance <= 0.0 {
                    return Err(MacroError::Uncoupled);
                }
                let ti = d_intra.ok_or(MacroError::NotPositive {
                    phase: "intracellular",
                })?;
                let di = check_tensor(ti, "intracellular", false)?;
                let de = check_tensor(d_extra, "extracellular", false)?;
                (di, de)
            }
        };

        let n = m * m;
        let mut faces = Vec::with_capacity(2 * m * (m - 1));
        for j in 0..m {
            for i in 0..m - 1 {
                faces.push(Face {
                    lo: j * m + i,
                    hi: j * m + i + 1,
                    axis: 0,
                });
            }
        }
        for j in 0..m - 1 {
            for i in 0..m {
                faces.push(Face {
                    lo: j * m + i,
                    hi: (j + 1) * m + i,
                    axis: 1,
                });
            }
        }

        let sheet_edges: Vec<(usize, usize)> = faces.iter().map(|f| (f.lo, f.hi)).collect();
        let sheet_stencil = StencilMatrix::new(n, &sheet_edges);
        // Coupled system: intracellular sheet, extracellular sheet, and one
        // vertical membrane edge per macro cell.
        let mut coupled_edges = Vec::with_capacity(2 * faces.len() + n);
        for f in &faces {
            coupled_edges.push((f.lo, f.hi));
        }
        for f in &faces {
            coupled_edges.push((n + f.lo, n + f.hi));
        }
        for p in 0..n {
            coupled_edges.push((p, n + p));
        }
        let coupled_stencil = StencilMatrix::new(2 * n, &coupled_edges);
        let coupled_null = NullSpace::from_components(&vec![0usize; 2 * n], 1);
        let sheet_null = NullSpace::from_components(&vec![0usize; n], 1);

        Ok(Self {
            m,
            phys: setup.physical.clone(),
            meas: setup.shape.measures(),
            connectivity,
            d_intra: di,
            d_extra: de,
            linear_tol: setup.run.linear_tol,
            picard: PicardSettings {
                tol: setup.run.picard_tol,
                max_iter: setup.run.picard_max_iter,
                damping: setup.run.picard_damping,
            },
            faces,
            sheet_stencil,
            coupled_stencil,
            coupled_null,
            sheet_null,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn measures(&self) -> &Measures {
        &self.meas
    }

    /// Uniform initial state: the potentials of a spatially constant field
    /// with membrane jump `phi0` are piecewise constant, so they are exact.
    pub fn initial_state(&self, setup: &ModelSetup) -> MacroState {
        let n = self.m * self.m;
        let ci = setup.initial.c_intra;
        let ce = setup.initial.c_extra;
        MacroState {
            time: 0.0,
            conc_intra: [vec![ci[0]; n], vec![ci[1]; n], vec![ci[2]; n]],
            conc_extra: [vec![ce[0]; n], vec![ce[1]; n], vec![ce[2]; n]],
            phi_intra: vec![setup.initial.phi0; n],
            phi_extra: vec![0.0; n],
            v: vec![setup.initial.phi0; n],
        }
    }

    fn check_positive(time: f64, conc: &[Vec<f64>; N_SPECIES]) -> Result<(), MacroError> {
        for (i, field) in conc.iter().enumerate() {
            for (p, &c) in field.iter().enumerate() {
                if !(c > 0.0) {
                    return Err(MacroError::PositivityLoss {
                        time,
                        species: i,
                        cell: p,
                        value: c,
                    });
                }
            }
        }
        Ok(())
    }

    /// Advances one backward-Euler step of size `dt`.
    pub fn step(&mut self, state: &MacroState, dt: f64) -> Result<(MacroState, StepInfo), MacroError> {
        assert!(dt > 0.0, "dt must be positive");
        let n = self.m * self.m;
        debug_assert_eq!(state.v.len(), n);
        Self::check_positive(state.time, &state.conc_intra)?;
        Self::check_positive(state.time, &state.conc_extra)?;

        // Sweep-independent explicit diffusion of the old concentrations.
        let mut base_i: [Vec<f64>; N_SPECIES] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut base_e: [Vec<f64>; N_SPECIES] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..N_SPECIES {
            for f in &self.faces {
                let wi = self.d_intra[f.axis] * (state.conc_intra[i][f.hi] - state.conc_intra[i][f.lo]);
                base_i[i][f.lo] += wi;
                base_i[i][f.hi] -= wi;
                let we = self.d_extra[f.axis] * (state.conc_extra[i][f.hi] - state.conc_extra[i][f.lo]);
                base_e[i][f.lo] += we;
                base_e[i][f.hi] -= we;
            }
        }

        let mut x0 = Vec::with_capacity(9 * n);
        for i in 0..N_SPECIES {
            x0.extend_from_slice(&state.conc_intra[i]);
        }
        for i in 0..N_SPECIES {
            x0.extend_from_slice(&state.conc_extra[i]);
        }
        x0.extend_from_slice(&state.phi_intra);
        x0.extend_from_slice(&state.phi_extra);
        x0.extend_from_slice(&state.v);

        let settings = self.picard;
        let outcome = picard_loop(x0, &settings, |x| self.sweep(x, state, dt, &base_i, &base_e));
        let (xf, stats) = match outcome {
            Ok(ok) => ok,
            Err(PicardError::Divergence {
                iterations,
                last_change,
            }) => {
                return Err(MacroError::PicardDivergence {
                    time: state.time,
                    iterations,
                    last_change,
                })
            }
            Err(PicardError::Step(e)) => return Err(e),
        };

        let block = |k: usize| xf[k * n..(k + 1) * n].to_vec();
        let next = MacroState {
            time: state.time + dt,
            conc_intra: [block(0), block(1), block(2)],
            conc_extra: [block(3), block(4), block(5)],
            phi_intra: block(6),
            phi_extra: block(7),
            v: block(8),
        };
        Self::check_positive(next.time, &next.conc_intra)?;
        Self::check_positive(next.time, &next.conc_extra)?;
        Ok((
            next,
            StepInfo {
                picard_sweeps: stats.iterations,
                last_change: stats.last_change,
            },
        ))
    }

    fn sweep(
        &mut self,
        x: &[f64],
        state: &MacroState,
        dt: f64,
        base_i: &[Vec<f64>; N_SPECIES],
        base_e: &[Vec<f64>; N_SPECIES],
    ) -> Result<Vec<f64>, MacroError> {
        let n = self.m * self.m;
        let h = 1.0 / self.m as f64;
        let area = h * h;
        let pm = self.phys.capacitance;
        let gsum = self.phys.total_conductance();
        let g = self.phys.conductances;
        let gamma = self.meas.interface;

        let ci_lag: [&[f64]; N_SPECIES] = [&x[0..n], &x[n..2 * n], &x[2 * n..3 * n]];
        let ce_lag: [&[f64]; N_SPECIES] = [&x[3 * n..4 * n], &x[4 * n..5 * n], &x[5 * n..6 * n]];
        let phi_i_lag = &x[6 * n..7 * n];
        let phi_e_lag = &x[7 * n..8 * n];

        // Membrane chemistry per macro cell from the lagged concentrations.
        let mut pieces: Vec<FluxPieces> = Vec::with_capacity(n);
        let mut beta = vec![0.0; n];
        for p in 0..n {
            let mut ci = [0.0; N_SPECIES];
            let mut ce = [0.0; N_SPECIES];
            for i in 0..N_SPECIES {
                ci[i] = ci_lag[i][p];
                ce[i] = ce_lag[i][p];
                for c in [ci[i], ce[i]] {
                    if !(c > 0.0) {
                        return Err(MacroError::PositivityLoss {
                            time: state.time,
                            species: i,
                            cell: p,
                            value: c,
                        });
                    }
                }
            }
            let pc = flux_pieces(&ci, &ce, &self.phys)?;
            let mut s = pc.i_p - pm * state.v[p] / dt;
            for i in 0..N_SPECIES {
                s -= g[i] * pc.nernst[i];
            }
            beta[p] = s;
            pieces.push(pc);
        }

        // Potentials.
        let (phi_i, phi_e) = match self.connectivity {
            Connectivity::ConDiscon => {
                // Pure-Neumann extracellular conduction with zero right-hand
                // side; the solution must be flat. Solve and assert rather
                // than assume.
                self.sheet_stencil.clear();
                for (e, f) in self.faces.iter().enumerate() {
                    let mut sig = 0.0;
                    for i in 0..N_SPECIES {
                        let z = self.phys.species.valences[i] as f64;
                        sig += z * z * 0.5 * (ce_lag[i][f.lo] + ce_lag[i][f.hi]);
                    }
                    self.sheet_stencil.add_edge(e, self.d_extra[f.axis] * sig);
                }
                let b = vec![0.0; n];
                let (phi_e, _) = solve_spd(
                    self.sheet_stencil.matrix(),
                    &b,
                    phi_e_lag,
                    Some(&self.sheet_null),
                    None,
                    self.linear_tol,
                )?;
                let flat = phi_e.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                assert!(
                    flat <= self.linear_tol.max(1e-12),
                    "extracellular macro potential is not flat: {flat:e}"
                );

                // Membrane ODE per cell, affine in v given the lagged terms.
                let denom = pm / dt + gsum;
                let mut v_new = vec![0.0; n];
                for p in 0..n {
                    if denom > 0.0 {
                        let mut num = pm / dt * state.v[p] - pieces[p].i_p;
                        for i in 0..N_SPECIES {
                            num += g[i] * pieces[p].nernst[i];
                        }
                        v_new[p] = num / denom;
                    } else {
                        v_new[p] = state.v[p];
                    }
                }
                let phi_i: Vec<f64> = v_new
                    .iter()
                    .zip(phi_e.iter())
                    .map(|(v, pe)| pe + v)
                    .collect();
                (phi_i, phi_e)
            }
            Connectivity::ConCon => {
                // One symmetric system over both potential sheets with the
                // capacitive membrane coupling on the diagonal blocks.
                let cpl = area * gamma * (gsum + pm / dt);
                self.coupled_stencil.clear();
                let nf = self.faces.len();
                for (e, f) in self.faces.iter().enumerate() {
                    let mut sig_i = 0.0;
                    let mut sig_e = 0.0;
                    for i in 0..N_SPECIES {
                        let z = self.phys.species.valences[i] as f64;
                        sig_i += z * z * 0.5 * (ci_lag[i][f.lo] + ci_lag[i][f.hi]);
                        sig_e += z * z * 0.5 * (ce_lag[i][f.lo] + ce_lag[i][f.hi]);
                    }
                    self.coupled_stencil.add_edge(e, self.d_intra[f.axis] * sig_i);
                    self.coupled_stencil
                        .add_edge(nf + e, self.d_extra[f.axis] * sig_e);
                }
                for p in 0..n {
                    self.coupled_stencil.add_edge(2 * nf + p, cpl);
                }
                let mut b = vec![0.0; 2 * n];
                for p in 0..n {
                    let w = area * gamma * beta[p];
                    b[p] -= w;
                    b[n + p] += w;
                }
                let mut x0 = Vec::with_capacity(2 * n);
                x0.extend_from_slice(phi_i_lag);
                x0.extend_from_slice(phi_e_lag);
                let (mut phi, _) = solve_spd(
                    self.coupled_stencil.matrix(),
                    &b,
                    &x0,
                    Some(&self.coupled_null),
                    None,
                    self.linear_tol,
                )?;
                // Gauge: zero-mean extracellular potential, one shift for
                // both sheets.
                let mean = phi[n..].iter().sum::<f64>() / n as f64;
                for q in phi.iter_mut() {
                    *q -= mean;
                }
                let phi_e = phi.split_off(n);
                (phi, phi_e)
            }
        };

        let mut v_new = vec![0.0; n];
        let mut dvdt = vec![0.0; n];
        for p in 0..n {
            v_new[p] = phi_i[p] - phi_e[p];
            dvdt[p] = (v_new[p] - state.v[p]) / dt;
        }

        // Species updates. The membrane source is evaluated once per cell
        // and enters the two compartments with opposite signs.
        let mut out = vec![0.0; 9 * n];
        let zero = vec![0.0; n];
        for i in 0..N_SPECIES {
            let z = self.phys.species.valences[i] as f64;
            let mut src = vec![0.0; n];
            for p in 0..n {
                let flux = pieces[p].species_flux(i, v_new[p], dvdt[p], &self.phys);
                src[p] = area * gamma * flux / z;
            }

            // Extracellular sheet: diffusion-drift PDE with +source.
            self.sheet_stencil.clear();
            for (e, f) in self.faces.iter().enumerate() {
                self.sheet_stencil.add_edge(e, self.d_extra[f.axis]);
            }
            for p in 0..n {
                self.sheet_stencil.add_diag(p, self.meas.vol_extra * area / dt);
            }
            let mut rhs = base_e[i].clone();
            for f in &self.faces {
                let cb = 0.5 * (ce_lag[i][f.lo] + ce_lag[i][f.hi]);
                let w = z * cb * self.d_extra[f.axis] * (phi_e[f.hi] - phi_e[f.lo]);
                rhs[f.lo] += w;
                rhs[f.hi] -= w;
            }
            for p in 0..n {
                rhs[p] += src[p];
            }
            let (delta_e, _) = solve_spd(
                self.sheet_stencil.matrix(),
                &rhs,
                &zero,
                None,
                None,
                self.linear_tol,
            )?;
            for p in 0..n {
                out[(3 + i) * n + p] = state.conc_extra[i][p] + delta_e[p];
            }

            match self.connectivity {
                Connectivity::ConDiscon => {
                    // Pointwise intracellular ODE with the negated source.
                    for p in 0..n {
                        let delta = -dt * src[p] / (self.meas.vol_intra * area);
                        out[i * n + p] = state.conc_intra[i][p] + delta;
                    }
                }
                Connectivity::ConCon => {
                    self.sheet_stencil.clear();
                    for (e, f) in self.faces.iter().enumerate() {
                        self.sheet_stencil.add_edge(e, self.d_intra[f.axis]);
                    }
                    for p in 0..n {
                        self.sheet_stencil
                            .add_diag(p, self.meas.vol_intra * area / dt);
                    }
                    let mut rhs = base_i[i].clone();
                    for f in &self.faces {
                        let cb = 0.5 * (ci_lag[i][f.lo] + ci_lag[i][f.hi]);
                        let w = z * cb * self.d_intra[f.axis] * (phi_i[f.hi] - phi_i[f.lo]);
                        rhs[f.lo] += w;
                        rhs[f.hi] -= w;
                    }
                    for p in 0..n {
                        rhs[p] -= src[p];
                    }
                    let (delta_i, _) = solve_spd(
                        self.sheet_stencil.matrix(),
                        &rhs,
                        &zero,
                        None,
                        None,
                        self.linear_tol,
                    )?;
                    for p in 0..n {
                        out[i * n + p] = state.conc_intra[i][p] + delta_i[p];
                    }
                }
            }
        }
        out[6 * n..7 * n].copy_from_slice(&phi_i);
        out[7 * n..8 * n].copy_from_slice(&phi_e);
        out[8 * n..9 * n].copy_from_slice(&v_new);
        Ok(out)
    }

    /// The membrane source fields as assembled into the two compartments'
    /// right-hand sides: `(intra, extra)` per species. They are exact
    /// negations of each other by construction.
    pub fn membrane_sources(
        &self,
        state: &MacroState,
        v_new: &[f64],
        dt: f64,
    ) -> Result<([Vec<f64>; N_SPECIES], [Vec<f64>; N_SPECIES]), MacroError> {
        let n = self.m * self.m;
        let h = 1.0 / self.m as f64;
        let area = h * h;
        let gamma = self.meas.interface;
        let mut src_i: [Vec<f64>; N_SPECIES] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut src_e: [Vec<f64>; N_SPECIES] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for p in 0..n {
            let mut ci = [0.0; N_SPECIES];
            let mut ce = [0.0; N_SPECIES];
            for i in 0..N_SPECIES {
                ci[i] = state.conc_intra[i][p];
                ce[i] = state.conc_extra[i][p];
            }
            let pc = flux_pieces(&ci, &ce, &self.phys)?;
            let dvdt = (v_new[p] - state.v[p]) / dt;
            for i in 0..N_SPECIES {
                let z = self.phys.species.valences[i] as f64;
                let w = area * gamma * pc.species_flux(i, v_new[p], dvdt, &self.phys) / z;
                src_e[i][p] = w;
                src_i[i][p] = -w;
            }
        }
        Ok((src_i, src_e))
    }

    /// Cell-wise residual of the sum of the two potential equations in the
    /// connected-connected regime. The membrane terms cancel exactly, so
    /// what remains is the sum of the two conduction divergences, written in
    /// difference form (bit-invariant under constant shifts of either
    /// potential).
    pub fn potential_sum_residual(
        &self,
        state: &MacroState,
        phi_i: &[f64],
        phi_e: &[f64],
    ) -> Vec<f64> {
        let n = self.m * self.m;
        let mut r = vec![0.0; n];
        for f in &self.faces {
            let mut sig_i = 0.0;
            let mut sig_e = 0.0;
            for i in 0..N_SPECIES {
                let z = self.phys.species.valences[i] as f64;
                sig_i += z * z * 0.5 * (state.conc_intra[i][f.lo] + state.conc_intra[i][f.hi]);
                sig_e += z * z * 0.5 * (state.conc_extra[i][f.lo] + state.conc_extra[i][f.hi]);
            }
            let wi = self.d_intra[f.axis] * sig_i * (phi_i[f.lo] - phi_i[f.hi]);
            r[f.lo] += wi;
            r[f.hi] -= wi;
            let we = self.d_extra[f.axis] * sig_e * (phi_e[f.lo] - phi_e[f.hi]);
            r[f.lo] += we;
            r[f.hi] -= we;
        }
        r
    }

    /// Weighted totals per species: |Y_I| integral of C_I plus |Y_E|
    /// integral of C_E.
    pub fn conservation_totals(&self, state: &MacroState) -> [f64; N_SPECIES] {
        let area = 1.0 / (self.m * self.m) as f64;
        let mut out = [0.0; N_SPECIES];
        for i in 0..N_SPECIES {
            let si: f64 = state.conc_intra[i].iter().sum();
            let se: f64 = state.conc_extra[i].iter().sum();
            out[i] = self.meas.vol_intra * area * si + self.meas.vol_extra * area * se;
        }
        out
    }

    /// Largest pointwise valence-weighted concentration sum over both
    /// compartments.
    pub fn en_max(&self, state: &MacroState) -> f64 {
        let n = self.m * self.m;
        let mut worst = 0.0f64;
        for p in 0..n {
            let mut en_i = 0.0;
            let mut en_e = 0.0;
            for i in 0..N_SPECIES {
                let z = self.phys.species.valences[i] as f64;
                en_i += z * state.conc_intra[i][p];
                en_e += z * state.conc_extra[i][p];
            }
            worst = worst.max(en_i.abs()).max(en_e.abs());
        }
        worst
    }
}
