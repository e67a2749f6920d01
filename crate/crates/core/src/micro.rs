//! Microscale electro-neutral bidomain solver on the voxelized tissue grid.
//!
//! Unknowns per time step: one concentration field per species (each grid
//! cell carries the value of the compartment it belongs to), the electric
//! potential, and the membrane potential on every interface face. Time
//! stepping is backward Euler with Picard lagging of the nonlinear pieces:
//! per sweep the potential is solved with conductivities and membrane
//! chemistry frozen at the lagged concentrations, the membrane potential and
//! its discrete rate follow from the potential traces, and each species then
//! advances through an implicit diffusion solve in increment form with drift
//! and membrane exchange on the right-hand side.
//!
//! The potential equation and the species equations share the same membrane
//! flux evaluations and the same face conductivities, so the valence-weighted
//! sum of the species updates telescopes against the potential residual and
//! electro-neutrality drifts only at the linear-solver tolerance.

use crate::geometry::{Compartment, GeometryError, TaggedGrid};
use crate::linalg::{
    picard_loop, solve_spd, LinearError, NullSpace, PicardError, PicardSettings, StencilMatrix,
};
use crate::membrane::{flux_pieces, FluxPieces, MembraneError};
use crate::params::{validate, InvalidSetup, ModelSetup, PhysicalParams, N_SPECIES};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MicroError {
    #[error(transparent)]
    Invalid(#[from] InvalidSetup),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error(transparent)]
    Membrane(#[from] MembraneError),
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
        "positivity lost at t = {time}: species {species} in cell {cell} \
         reached {value}"
    )]
    PositivityLoss {
        time: f64,
        species: usize,
        cell: usize,
        value: f64,
    },
}

/// Full microscale state at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroState {
    pub time: f64,
    /// Per species, one value per grid cell (the concentration of the
    /// compartment owning that cell).
    pub conc: [Vec<f64>; N_SPECIES],
    /// Electric potential per grid cell, gauge-fixed to zero extracellular
    /// mean per coupled component.
    pub phi: Vec<f64>,
    /// Membrane potential per interface face (intra trace minus extra trace).
    pub v: Vec<f64>,
}

/// Iteration counters for one accepted step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub picard_sweeps: usize,
    pub last_change: f64,
}

/// Cells whose potential is shifted together during gauge fixing, plus the
/// subset whose mean is pinned to zero.
#[derive(Debug, Clone)]
struct GaugeGroup {
    members: Vec<usize>,
    mean_over: Vec<usize>,
}

pub struct MicroSolver {
    grid: TaggedGrid,
    phys: PhysicalParams,
    epsilon: f64,
    linear_tol: f64,
    picard: PicardSettings,
    pot_stencil: StencilMatrix,
    conc_stencil: StencilMatrix,
    pot_null: NullSpace,
    gauge_groups: Vec<GaugeGroup>,
}

fn pidx(tag: Compartment) -> usize {
    match tag {
        Compartment::Intra => 0,
        Compartment::Extra => 1,
    }
}

impl MicroSolver {
    pub fn new(setup: &ModelSetup) -> Result<Self, MicroError> {
        validate(setup).into_result()?;
        let grid = TaggedGrid::tissue(
            setup.shape,
            setup.run.epsilon_inv,
            setup.run.n_per_cell(),
        )?;
        let n = grid.num_cells();
        let num_cond = grid.conductive_faces().len();

        let mut pot_edges = Vec::with_capacity(num_cond + grid.interface_faces().len());
        let mut conc_edges = Vec::with_capacity(num_cond);
        for f in grid.conductive_faces() {
            pot_edges.push((f.lo, f.hi));
            conc_edges.push((f.lo, f.hi));
        }
        for f in grid.interface_faces() {
            pot_edges.push((f.intra, f.extra));
        }
        let pot_stencil = StencilMatrix::new(n, &pot_edges);
        let conc_stencil = StencilMatrix::new(n, &conc_edges);

        // Membrane coupling is active whenever channels or the capacitor
        // carry current; the coupled components of the potential system are
        // then phase components glued across interfaces.
        let coupled = setup.physical.total_conductance() + setup.physical.capacitance > 0.0;
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for f in grid.conductive_faces() {
            adjacency[f.lo].push(f.hi);
            adjacency[f.hi].push(f.lo);
        }
        if coupled {
            for f in grid.interface_faces() {
                adjacency[f.intra].push(f.extra);
                adjacency[f.extra].push(f.intra);
            }
        }
        let mut labels = vec![usize::MAX; n];
        let mut count = 0usize;
        let mut queue = std::collections::VecDeque::new();
        for start in 0..n {
            if labels[start] != usize::MAX {
                continue;
            }
            labels[start] = count;
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                for &q in &adjacency[p] {
                    if labels[q] == usize::MAX {
                        labels[q] = count;
                        queue.push_back(q);
                    }
                }
            }
            count += 1;
        }
        let pot_null = NullSpace::from_components(&labels, count);

        let mut gauge_groups = vec![
            GaugeGroup {
                members: Vec::new(),
                mean_over: Vec::new(),
            };
            count
        ];
        for p in 0..n {
            let g = &mut gauge_groups[labels[p]];
            g.members.push(p);
            if grid.tag(p) == Compartment::Extra {
                g.mean_over.push(p);
            }
        }
        for g in &mut gauge_groups {
            if g.mean_over.is_empty() {
                g.mean_over = g.members.clone();
            }
        }

        Ok(Self {
            grid,
            phys: setup.physical.clone(),
            epsilon: 1.0 / f64::from(setup.run.epsilon_inv),
            linear_tol: setup.run.linear_tol,
            picard: PicardSettings {
                tol: setup.run.picard_tol,
                max_iter: setup.run.picard_max_iter,
                damping: setup.run.picard_damping,
            },
            pot_stencil,
            conc_stencil,
            pot_null,
            gauge_groups,
        })
    }

    pub fn grid(&self) -> &TaggedGrid {
        &self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn apply_gauge(&self, phi: &mut [f64]) {
        for g in &self.gauge_groups {
            let mut mean = 0.0;
            for &p in &g.mean_over {
                mean += phi[p];
            }
            mean /= g.mean_over.len() as f64;
            for &p in &g.members {
                phi[p] -= mean;
            }
        }
    }

    /// Builds the state at t = 0: uniform concentrations per compartment and
    /// the potential solving the conduction equation with the prescribed
    /// membrane jump `phi0`, gauge-fixed to zero extracellular mean. With a
    /// zero jump the right-hand side vanishes and the potential is exactly
    /// zero.
    pub fn initial_state(&self, setup: &ModelSetup) -> Result<MicroState, MicroError> {
        let grid = &self.grid;
        let n = grid.num_cells();
        let d = self.phys.diffusivity;

        let mut conc: [Vec<f64>; N_SPECIES] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for p in 0..n {
            let c = setup.initial.concentrations(grid.tag(p));
            for i in 0..N_SPECIES {
                conc[i][p] = c[i];
            }
        }

        let sigma = |c: &[f64; N_SPECIES]| -> f64 {
            let mut s = 0.0;
            for i in 0..N_SPECIES {
                let z = self.phys.species.valences[i] as f64;
                s += z * z * c[i];
            }
            s
        };
        let sig_i = sigma(setup.initial.concentrations(Compartment::Intra));
        let sig_e = sigma(setup.initial.concentrations(Compartment::Extra));

        // One-off jump-constrained conduction solve: interior faces carry the
        // compartment conductivity, interface faces a harmonic-mean coupling
        // with the prescribed jump as an affine offset.
        let mut edges = Vec::with_capacity(grid.conductive_faces().len() + grid.interface_faces().len());
        for f in grid.conductive_faces() {
            edges.push((f.lo, f.hi));
        }
        for f in grid.interface_faces() {
            edges.push((f.intra, f.extra));
        }
        let mut sys = StencilMatrix::new(n, &edges);
        let mut b = vec![0.0; n];
        let v0 = setup.initial.phi0;
        for (e, f) in grid.conductive_faces().iter().enumerate() {
            let s = match grid.tag(f.lo) {
                Compartment::Intra => sig_i,
                Compartment::Extra => sig_e,
            };
            sys.add_edge(e, d * s);
        }
        let t_if = d * 2.0 * sig_i * sig_e / (sig_i + sig_e);
        let off = grid.conductive_faces().len();
        for (k, f) in grid.interface_faces().iter().enumerate() {
            sys.add_edge(off + k, t_if);
            b[f.intra] += t_if * v0;
            b[f.extra] -= t_if * v0;
        }
        let ones = NullSpace::from_components(&vec![0usize; n], 1);
        let x0 = vec![0.0; n];
        let (mut phi, _) = solve_spd(sys.matrix(), &b, &x0, Some(&ones), None, self.linear_tol)?;
        self.apply_gauge(&mut phi);

        let v = vec![v0; grid.interface_faces().len()];
        Ok(MicroState {
            time: 0.0,
            conc,
            phi,
            v,
        })
    }

    /// Advances one backward-Euler step of size `dt`.
    pub fn step(&mut self, state: &MicroState, dt: f64) -> Result<(MicroState, StepInfo), MicroError> {
        assert!(dt > 0.0, "dt must be positive");
        let grid = &self.grid;
        let n = grid.num_cells();
        let nf = grid.interface_faces().len();
        debug_assert_eq!(state.phi.len(), n);
        debug_assert_eq!(state.v.len(), nf);

        for i in 0..N_SPECIES {
            for p in 0..n {
                let c = state.conc[i][p];
                if !(c > 0.0) {
                    return Err(MicroError::PositivityLoss {
                        time: state.time,
                        species: i,
                        cell: p,
                        value: c,
                    });
                }
            }
        }

        let h = grid.h();
        let a = h * h;
        let d = self.phys.diffusivity;

        // The implicit diffusion operator and the explicit diffusion of the
        // old concentrations are sweep-independent; build them once.
        self.conc_stencil.clear();
        for (e, _) in grid.conductive_faces().iter().enumerate() {
            self.conc_stencil.add_edge(e, d);
        }
        for p in 0..n {
            self.conc_stencil.add_diag(p, a / dt);
        }
        let mut base_rhs: [Vec<f64>; N_SPECIES] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..N_SPECIES {
            let c = &state.conc[i];
            let rhs = &mut base_rhs[i];
            for f in grid.conductive_faces() {
                let w = d * (c[f.hi] - c[f.lo]);
                rhs[f.lo] += w;
                rhs[f.hi] -= w;
            }
        }

        let mut x0 = Vec::with_capacity(4 * n + nf);
        for i in 0..N_SPECIES {
            x0.extend_from_slice(&state.conc[i]);
        }
        x0.extend_from_slice(&state.phi);
        x0.extend_from_slice(&state.v);

        let settings = self.picard;
        let outcome = picard_loop(x0, &settings, |x| self.sweep(x, state, dt, &base_rhs));
        let (xf, stats) = match outcome {
            Ok(ok) => ok,
            Err(PicardError::Divergence {
                iterations,
                last_change,
            }) => {
                return Err(MicroError::PicardDivergence {
                    time: state.time,
                    iterations,
                    last_change,
                })
            }
            Err(PicardError::Step(e)) => return Err(e),
        };

        let mut conc: [Vec<f64>; N_SPECIES] = [
            xf[0..n].to_vec(),
            xf[n..2 * n].to_vec(),
            xf[2 * n..3 * n].to_vec(),
        ];
        for i in 0..N_SPECIES {
            for p in 0..n {
                let c = conc[i][p];
                if !(c > 0.0) {
                    return Err(MicroError::PositivityLoss {
                        time: state.time + dt,
                        species: i,
                        cell: p,
                        value: c,
                    });
                }
            }
            conc[i].shrink_to_fit();
        }
        let phi = xf[3 * n..4 * n].to_vec();
        let v = xf[4 * n..].to_vec();

        Ok((
            MicroState {
                time: state.time + dt,
                conc,
                phi,
                v,
            },
            StepInfo {
                picard_sweeps: stats.iterations,
                last_change: stats.last_change,
            },
        ))
    }

    /// One Picard sweep: potential solve with lagged coefficients, membrane
    /// update, then the three increment-form species solves.
    fn sweep(
        &mut self,
        x: &[f64],
        state: &MicroState,
        dt: f64,
        base_rhs: &[Vec<f64>; N_SPECIES],
    ) -> Result<Vec<f64>, MicroError> {
        let grid = &self.grid;
        let n = grid.num_cells();
        let nf = grid.interface_faces().len();
        let h = grid.h();
        let d = self.phys.diffusivity;
        let eps_h = self.epsilon * h;
        let pm = self.phys.capacitance;
        let gsum = self.phys.total_conductance();
        let kappa = eps_h * (gsum + pm / dt);
        let g = self.phys.conductances;

        let c_lag: [&[f64]; N_SPECIES] = [&x[0..n], &x[n..2 * n], &x[2 * n..3 * n]];
        let phi_lag = &x[3 * n..4 * n];

        // Membrane chemistry from the lagged traces, shared between the
        // potential and species assemblies.
        let mut pieces: Vec<FluxPieces> = Vec::with_capacity(nf);
        let mut beta = vec![0.0; nf];
        for (k, f) in grid.interface_faces().iter().enumerate() {
            let mut ci = [0.0; N_SPECIES];
            let mut ce = [0.0; N_SPECIES];
            for i in 0..N_SPECIES {
                ci[i] = c_lag[i][f.intra];
                ce[i] = c_lag[i][f.extra];
                if !(ci[i] > 0.0) {
                    return Err(MicroError::PositivityLoss {
                        time: state.time,
                        species: i,
                        cell: f.intra,
                        value: ci[i],
                    });
                }
                if !(ce[i] > 0.0) {
                    return Err(MicroError::PositivityLoss {
                        time: state.time,
                        species: i,
                        cell: f.extra,
                        value: ce[i],
                    });
                }
            }
            let pc = flux_pieces(&ci, &ce, &self.phys)?;
            let mut s = pc.i_p - pm * state.v[k] / dt;
            for i in 0..N_SPECIES {
                s -= g[i] * pc.nernst[i];
            }
            beta[k] = s;
            pieces.push(pc);
        }

        // Potential system: conduction with face-averaged sigma plus the
        // Robin-type membrane coupling.
        let num_cond = grid.conductive_faces().len();
        let mut cbar: [Vec<f64>; N_SPECIES] = [
            vec![0.0; num_cond],
            vec![0.0; num_cond],
            vec![0.0; num_cond],
        ];
        self.pot_stencil.clear();
        for (e, f) in grid.conductive_faces().iter().enumerate() {
            let mut sig = 0.0;
            for i in 0..N_SPECIES {
                let z = self.phys.species.valences[i] as f64;
                let cb = 0.5 * (c_lag[i][f.lo] + c_lag[i][f.hi]);
                cbar[i][e] = cb;
                sig += z * z * cb;
            }
            self.pot_stencil.add_edge(e, d * sig);
        }
        for k in 0..nf {
            self.pot_stencil.add_edge(num_cond + k, kappa);
        }
        let mut b = vec![0.0; n];
        for (k, f) in grid.interface_faces().iter().enumerate() {
            let w = eps_h * beta[k];
            b[f.intra] -= w;
            b[f.extra] += w;
        }
        let (mut phi, _) = solve_spd(
            self.pot_stencil.matrix(),
            &b,
            phi_lag,
            Some(&self.pot_null),
            None,
            self.linear_tol,
        )?;
        self.apply_gauge(&mut phi);

        let mut v_new = vec![0.0; nf];
        let mut dvdt = vec![0.0; nf];
        for (k, f) in grid.interface_faces().iter().enumerate() {
            v_new[k] = phi[f.intra] - phi[f.extra];
            dvdt[k] = (v_new[k] - state.v[k]) / dt;
        }

        let mut out = vec![0.0; 4 * n + nf];
        let zero = vec![0.0; n];
        for i in 0..N_SPECIES {
            let z = self.phys.species.valences[i] as f64;
            let mut rhs = base_rhs[i].clone();
            for (e, f) in grid.conductive_faces().iter().enumerate() {
                let w = z * cbar[i][e] * d * (phi[f.hi] - phi[f.lo]);
                rhs[f.lo] += w;
                rhs[f.hi] -= w;
            }
            for (k, f) in grid.interface_faces().iter().enumerate() {
                let flux = pieces[k].species_flux(i, v_new[k], dvdt[k], &self.phys);
                let w = eps_h * flux / z;
                rhs[f.intra] -= w;
                rhs[f.extra] += w;
            }
            let (delta, _) = solve_spd(
                self.conc_stencil.matrix(),
                &rhs,
                &zero,
                None,
                None,
                self.linear_tol,
            )?;
            for p in 0..n {
                out[i * n + p] = state.conc[i][p] + delta[p];
            }
        }
        out[3 * n..4 * n].copy_from_slice(&phi);
        out[4 * n..].copy_from_slice(&v_new);
        Ok(out)
    }

    /// Residual of the assembled potential system for given fields, written
    /// purely in terms of potential differences so that shifting `phi` by a
    /// constant leaves every entry bit-identical.
    pub fn potential_residual(
        &self,
        conc: &[Vec<f64>; N_SPECIES],
        phi: &[f64],
        v_prev: &[f64],
        dt: f64,
    ) -> Result<Vec<f64>, MicroError> {
        let grid = &self.grid;
        let n = grid.num_cells();
        let h = grid.h();
        let d = self.phys.diffusivity;
        let eps_h = self.epsilon * h;
        let pm = self.phys.capacitance;
        let kappa = eps_h * (self.phys.total_conductance() + pm / dt);
        let g = self.phys.conductances;

        let mut r = vec![0.0; n];
        for f in grid.conductive_faces() {
            let mut sig = 0.0;
            for i in 0..N_SPECIES {
                let z = self.phys.species.valences[i] as f64;
                sig += z * z * 0.5 * (conc[i][f.lo] + conc[i][f.hi]);
            }
            let w = d * sig * (phi[f.lo] - phi[f.hi]);
            r[f.lo] += w;
            r[f.hi] -= w;
        }
        for (k, f) in grid.interface_faces().iter().enumerate() {
            let mut ci = [0.0; N_SPECIES];
            let mut ce = [0.0; N_SPECIES];
            for i in 0..N_SPECIES {
                ci[i] = conc[i][f.intra];
                ce[i] = conc[i][f.extra];
            }
            let pc = flux_pieces(&ci, &ce, &self.phys)?;
            let mut beta = pc.i_p - pm * v_prev[k] / dt;
            for i in 0..N_SPECIES {
                beta -= g[i] * pc.nernst[i];
            }
            let jump = phi[f.intra] - phi[f.extra];
            r[f.intra] += kappa * jump + eps_h * beta;
            r[f.extra] -= kappa * jump + eps_h * beta;
        }
        Ok(r)
    }
}

/// Instantaneous discrete norms of one state, per species and compartment
/// (index 0 intracellular, 1 extracellular). Trace norms carry the sqrt(eps)
/// interface scaling already.
#[derive(Debug, Clone, Copy)]
pub struct NormSample {
    pub l2_conc: [[f64; 2]; N_SPECIES],
    pub grad_conc: [[f64; 2]; N_SPECIES],
    pub trace_conc: [[f64; 2]; N_SPECIES],
    pub l2_phi: [f64; 2],
    pub grad_phi: [f64; 2],
    pub trace_phi: [f64; 2],
}

/// Scalar health indicators plus the norm sample for one state.
#[derive(Debug, Clone, Copy)]
pub struct MicroDiagnostics {
    pub time: f64,
    /// Total dissolved amount per species and compartment.
    pub totals: [[f64; 2]; N_SPECIES],
    /// Largest pointwise valence-weighted concentration sum.
    pub en_max: f64,
    /// Smallest pointwise conductivity.
    pub sigma_min: f64,
    pub norms: NormSample,
}

impl MicroSolver {
    pub fn diagnostics(&self, state: &MicroState) -> MicroDiagnostics {
        let grid = &self.grid;
        let n = grid.num_cells();
        let h = grid.h();
        let a = h * h;
        let eps = self.epsilon;

        let mut totals = [[0.0; 2]; N_SPECIES];
        let mut en_max = 0.0f64;
        let mut sigma_min = f64::INFINITY;
        let mut l2sq = [[0.0; 2]; N_SPECIES];
        for p in 0..n {
            let s = pidx(grid.tag(p));
            let mut en = 0.0;
            let mut sig = 0.0;
            for i in 0..N_SPECIES {
                let c = state.conc[i][p];
                let z = self.phys.species.valences[i] as f64;
                totals[i][s] += a * c;
                en += z * c;
                sig += z * z * c;
                l2sq[i][s] += a * c * c;
            }
            en_max = en_max.max(en.abs());
            sigma_min = sigma_min.min(sig);
        }

        let mut gradsq = [[0.0; 2]; N_SPECIES];
        let mut phi_l2sq = [0.0; 2];
        let mut phi_gradsq = [0.0; 2];
        for p in 0..n {
            let s = pidx(grid.tag(p));
            phi_l2sq[s] += a * state.phi[p] * state.phi[p];
        }
        for f in grid.conductive_faces() {
            let s = pidx(grid.tag(f.lo));
            for i in 0..N_SPECIES {
                let dc = state.conc[i][f.hi] - state.conc[i][f.lo];
                gradsq[i][s] += dc * dc;
            }
            let dp = state.phi[f.hi] - state.phi[f.lo];
            phi_gradsq[s] += dp * dp;
        }
        let mut tracesq = [[0.0; 2]; N_SPECIES];
        let mut phi_tracesq = [0.0; 2];
        for f in grid.interface_faces() {
            for i in 0..N_SPECIES {
                let ci = state.conc[i][f.intra];
                let ce = state.conc[i][f.extra];
                tracesq[i][0] += h * ci * ci;
                tracesq[i][1] += h * ce * ce;
            }
            phi_tracesq[0] += h * state.phi[f.intra] * state.phi[f.intra];
            phi_tracesq[1] += h * state.phi[f.extra] * state.phi[f.extra];
        }

        let mut norms = NormSample {
            l2_conc: [[0.0; 2]; N_SPECIES],
            grad_conc: [[0.0; 2]; N_SPECIES],
            trace_conc: [[0.0; 2]; N_SPECIES],
            l2_phi: [phi_l2sq[0].sqrt(), phi_l2sq[1].sqrt()],
            grad_phi: [phi_gradsq[0].sqrt(), phi_gradsq[1].sqrt()],
            trace_phi: [
                (eps * phi_tracesq[0]).sqrt(),
                (eps * phi_tracesq[1]).sqrt(),
            ],
        };
        for i in 0..N_SPECIES {
            for s in 0..2 {
                norms.l2_conc[i][s] = l2sq[i][s].sqrt();
                norms.grad_conc[i][s] = gradsq[i][s].sqrt();
                norms.trace_conc[i][s] = (eps * tracesq[i][s]).sqrt();
            }
        }

        MicroDiagnostics {
            time: state.time,
            totals,
            en_max,
            sigma_min,
            norms,
        }
    }
}

/// Time-aggregated analogues of the a priori estimates: sup-in-time L2
/// norms and time-integrated gradient, trace, and H1 norms.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormAccumulator {
    linf_l2_conc: [[f64; 2]; N_SPECIES],
    int_grad_conc: [[f64; 2]; N_SPECIES],
    int_trace_conc: [[f64; 2]; N_SPECIES],
    int_h1_phi: [f64; 2],
    int_trace_phi: [f64; 2],
}

/// Finished aggregate over a run.
#[derive(Debug, Clone, Copy)]
pub struct NormReport {
    pub linf_l2_conc: [[f64; 2]; N_SPECIES],
    pub l2l2_grad_conc: [[f64; 2]; N_SPECIES],
    pub l2l2_trace_conc: [[f64; 2]; N_SPECIES],
    pub l2h1_phi: [f64; 2],
    pub l2l2_trace_phi: [f64; 2],
}

impl NormAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds one sample in with quadrature weight `dt` (pass the step size;
    /// use `dt = 0` for the initial sample so it only feeds the sup norms).
    pub fn record(&mut self, s: &NormSample, dt: f64) {
        for i in 0..N_SPECIES {
            for k in 0..2 {
                self.linf_l2_conc[i][k] = self.linf_l2_conc[i][k].max(s.l2_conc[i][k]);
                self.int_grad_conc[i][k] += dt * s.grad_conc[i][k] * s.grad_conc[i][k];
                self.int_trace_conc[i][k] += dt * s.trace_conc[i][k] * s.trace_conc[i][k];
            }
        }
        for k in 0..2 {
            self.int_h1_phi[k] +=
                dt * (s.l2_phi[k] * s.l2_phi[k] + s.grad_phi[k] * s.grad_phi[k]);
            self.int_trace_phi[k] += dt * s.trace_phi[k] * s.trace_phi[k];
        }
    }

    pub fn report(&self) -> NormReport {
        let mut out = NormReport {
            linf_l2_conc: self.linf_l2_conc,
            l2l2_grad_conc: [[0.0; 2]; N_SPECIES],
            l2l2_trace_conc: [[0.0; 2]; N_SPECIES],
            l2h1_phi: [self.int_h1_phi[0].sqrt(), self.int_h1_phi[1].sqrt()],
            l2l2_trace_phi: [self.int_trace_phi[0].sqrt(), self.int_trace_phi[1].sqrt()],
        };
        for i in 0..N_SPECIES {
            for k in 0..2 {
                out.l2l2_grad_conc[i][k] = self.int_grad_conc[i][k].sqrt();
                out.l2l2_trace_conc[i][k] = self.int_trace_conc[i][k].sqrt();
            }
        }
        out
    }
}

impl NormReport {
    /// Flattens to labeled values, for CSV output and cross-run comparison.
    pub fn values(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let phases = ["intra", "extra"];
        for i in 0..N_SPECIES {
            for k in 0..2 {
                let sp = crate::params::SPECIES_NAMES[i];
                out.push((format!("linf_l2_C_{}_{}", sp, phases[k]), self.linf_l2_conc[i][k]));
                out.push((
                    format!("l2l2_grad_C_{}_{}", sp, phases[k]),
                    self.l2l2_grad_conc[i][k],
                ));
                out.push((
                    format!("l2l2_trace_C_{}_{}", sp, phases[k]),
                    self.l2l2_trace_conc[i][k],
                ));
            }
        }
        for k in 0..2 {
            out.push((format!("l2h1_phi_{}", phases[k]), self.l2h1_phi[k]));
            out.push((format!("l2l2_trace_phi_{}", phases[k]), self.l2l2_trace_phi[k]));
        }
        out
    }
}

/// Per-block averages of a micro state over the epsilon-cell partition,
/// the discrete counterpart of unfolding-style averaging. Membrane faces
/// are attributed to the block containing their intracellular cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedFields {
    /// Blocks per side (the inverse epsilon).
    pub m: usize,
    pub conc_intra: [Vec<f64>; N_SPECIES],
    pub conc_extra: [Vec<f64>; N_SPECIES],
    pub phi_intra: Vec<f64>,
    pub phi_extra: Vec<f64>,
    pub v: Vec<f64>,
}

impl MicroSolver {
    pub fn average_fields(&self, state: &MicroState) -> AveragedFields {
        let grid = &self.grid;
        let n = grid.n();
        let m = (1.0 / self.epsilon).round() as usize;
        let npc = n / m;
        let nb = m * m;

        let mut sums_i: [Vec<f64>; N_SPECIES] = [vec![0.0; nb], vec![0.0; nb], vec![0.0; nb]];
        let mut sums_e: [Vec<f64>; N_SPECIES] = [vec![0.0; nb], vec![0.0; nb], vec![0.0; nb]];
        let mut phi_i = vec![0.0; nb];
        let mut phi_e = vec![0.0; nb];
        let mut cnt_i = vec![0usize; nb];
        let mut cnt_e = vec![0usize; nb];
        for p in 0..grid.num_cells() {
            let (i, j) = grid.coords(p);
            let b = (j / npc) * m + i / npc;
            match grid.tag(p) {
                Compartment::Intra => {
                    cnt_i[b] += 1;
                    phi_i[b] += state.phi[p];
                    for sp in 0..N_SPECIES {
                        sums_i[sp][b] += state.conc[sp][p];
                    }
                }
                Compartment::Extra => {
                    cnt_e[b] += 1;
                    phi_e[b] += state.phi[p];
                    for sp in 0..N_SPECIES {
                        sums_e[sp][b] += state.conc[sp][p];
                    }
                }
            }
        }
        let mut v_sum = vec![0.0; nb];
        let mut v_cnt = vec![0usize; nb];
        for (k, f) in grid.interface_faces().iter().enumerate() {
            let (i, j) = grid.coords(f.intra);
            let b = (j / npc) * m + i / npc;
            v_sum[b] += state.v[k];
            v_cnt[b] += 1;
        }

        let div = |s: &mut Vec<f64>, c: &[usize]| {
            for (x, k) in s.iter_mut().zip(c.iter()) {
                if *k > 0 {
                    *x /= *k as f64;
                }
            }
        };
        for sp in 0..N_SPECIES {
            div(&mut sums_i[sp], &cnt_i);
            div(&mut sums_e[sp], &cnt_e);
        }
        div(&mut phi_i, &cnt_i);
        div(&mut phi_e, &cnt_e);
        div(&mut v_sum, &v_cnt);

        AveragedFields {
            m,
            conc_intra: sums_i,
            conc_extra: sums_e,
            phi_intra: phi_i,
            phi_extra: phi_e,
            v: v_sum,
        }
    }
}
