//! Model parameters, defaults and whole-setup validation.
//!
//! Everything the solvers need is collected in [`ModelSetup`]; [`validate`]
//! checks each field *and* the cross-field consistency rules (grid
//! divisibility, geometry resolvability, geometry/regime compatibility,
//! initial electroneutrality) and reports every violation it finds rather
//! than stopping at the first.

use crate::geometry::{CellShape, Compartment};
use std::fmt;

/// Number of ionic species carried by the model.
pub const N_SPECIES: usize = 3;

/// Species display names, in storage order.
pub const SPECIES_NAMES: [&str; N_SPECIES] = ["Na", "K", "Cl"];

pub const NA: usize = 0;
pub const K: usize = 1;
pub const CL: usize = 2;

/// Valences and capacitive current split of the species set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeciesSpec {
    /// Signed valence per species; nonzero, magnitude at most 2.
    pub valences: [i32; N_SPECIES],
    /// Fraction of the capacitive membrane current carried by each species.
    /// Must be nonnegative and sum to one.
    pub lambdas: [f64; N_SPECIES],
}

impl Default for SpeciesSpec {
    fn default() -> Self {
        SpeciesSpec {
            valences: [1, 1, -1],
            lambdas: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        }
    }
}

/// Sodium-potassium exchange pump parameters (two saturating terms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpParams {
    pub i_max1: f64,
    pub i_max2: f64,
    pub k_na1: f64,
    pub k_k1: f64,
    pub k_na2: f64,
    pub k_k2: f64,
}

impl Default for PumpParams {
    fn default() -> Self {
        PumpParams {
            i_max1: 0.5,
            i_max2: 0.5,
            k_na1: 1.0,
            k_k1: 1.0,
            k_na2: 1.0,
            k_k2: 1.0,
        }
    }
}

impl PumpParams {
    /// A pump that carries no current at any concentration.
    pub fn off() -> Self {
        PumpParams {
            i_max1: 0.0,
            i_max2: 0.0,
            ..PumpParams::default()
        }
    }
}

/// Physical constants of the membrane and bulk transport model.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalParams {
    pub species: SpeciesSpec,
    /// Shared bulk diffusivity of all species in both phases.
    pub diffusivity: f64,
    /// Channel conductance per species.
    pub conductances: [f64; N_SPECIES],
    /// Membrane capacitance.
    pub capacitance: f64,
    pub pump: PumpParams,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        PhysicalParams {
            species: SpeciesSpec::default(),
            diffusivity: 1.0,
            conductances: [1.0, 1.0, 1.0],
            capacitance: 1.0,
            pump: PumpParams::default(),
        }
    }
}

impl PhysicalParams {
    pub fn total_conductance(&self) -> f64 {
        self.conductances.iter().sum()
    }
}

/// Admissible concentration range and the conductivity floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationBounds {
    /// Lower concentration bound, exclusive of zero.
    pub lower: f64,
    /// Upper concentration bound.
    pub upper: f64,
    /// Minimum admissible conductivity sum(z_i^2 C_i).
    pub sigma_floor: f64,
}

impl Default for ConcentrationBounds {
    fn default() -> Self {
        ConcentrationBounds {
            lower: 1.0,
            upper: 200.0,
            sigma_floor: 1.0,
        }
    }
}

/// Uniform per-compartment initial concentrations and initial membrane jump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialData {
    pub c_intra: [f64; N_SPECIES],
    pub c_extra: [f64; N_SPECIES],
    /// Initial membrane potential jump phi_intra - phi_extra.
    pub phi0: f64,
}

impl Default for InitialData {
    fn default() -> Self {
        InitialData {
            c_intra: [10.0, 135.0, 145.0],
            c_extra: [140.0, 5.0, 145.0],
            phi0: 0.0,
        }
    }
}

impl InitialData {
    pub fn concentrations(&self, tag: Compartment) -> &[f64; N_SPECIES] {
        match tag {
            Compartment::Intra => &self.c_intra,
            Compartment::Extra => &self.c_extra,
        }
    }
}

/// Which homogenized limit regime a tissue geometry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Extracellular phase connected, cells mutually disconnected.
    ConDiscon,
    /// Both phases form channel networks.
    ConCon,
}

impl Connectivity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "con_discon" => Some(Connectivity::ConDiscon),
            "con_con" => Some(Connectivity::ConCon),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Connectivity::ConDiscon => "con_discon",
            Connectivity::ConCon => "con_con",
        }
    }
}

/// Discretization and iteration settings for a time-dependent run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    /// Reciprocal of the cell size epsilon; the tissue holds
    /// `epsilon_inv^2` unit cells.
    pub epsilon_inv: u32,
    /// Grid cells per side of the whole tissue domain; must be divisible by
    /// `epsilon_inv`.
    pub grid_resolution: usize,
    pub dt: f64,
    pub t_end: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub picard_damping: f64,
    pub linear_tol: f64,
    pub connectivity: Connectivity,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            epsilon_inv: 4,
            grid_resolution: 64,
            dt: 1e-3,
            t_end: 0.5,
            picard_tol: 1e-10,
            picard_max_iter: 50,
            picard_damping: 1.0,
            // Electroneutrality drift accumulates at roughly one linear
            // residual per step, so a default-length run (500 steps) needs
            // the solves a few orders below the 1e-10 drift budget.
            linear_tol: 1e-13,
            connectivity: Connectivity::ConDiscon,
        }
    }
}

impl RunSettings {
    pub fn n_per_cell(&self) -> usize {
        self.grid_resolution / self.epsilon_inv.max(1) as usize
    }

    pub fn num_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// The complete input of a simulation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSetup {
    pub physical: PhysicalParams,
    pub initial: InitialData,
    pub bounds: ConcentrationBounds,
    pub shape: CellShape,
    pub run: RunSettings,
}

/// One violated invariant, addressed by a dotted field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationIssue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Result of [`validate`]: empty means the setup is admissible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.issues.push(ValidationIssue {
            field: field.into(),
            message: message.into(),
        });
    }

    /// Converts a non-empty report into an error.
    pub fn into_result(self) -> Result<(), InvalidSetup> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(InvalidSetup { report: self })
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return write!(f, "setup is valid");
        }
        writeln!(f, "{} invariant violation(s):", self.issues.len())?;
        for issue in &self.issues {
            writeln!(f, "  - {issue}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{report}")]
pub struct InvalidSetup {
    pub report: ValidationReport,
}

/// Electroneutrality tolerance for initial data, relative to sum(|z| C).
const EN_REL_TOL: f64 = 1e-12;

/// Tolerance on sum(lambda) - 1.
const LAMBDA_TOL: f64 = 1e-14;

/// Checks every invariant of the full parameter set.
pub fn validate(setup: &ModelSetup) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let phys = &setup.physical;

    for (i, &z) in phys.species.valences.iter().enumerate() {
        if z == 0 || z.abs() > 2 {
            rep.push(
                format!("physics.valence.{}", SPECIES_NAMES[i]),
                format!("valence {z} must be nonzero with magnitude at most 2"),
            );
        }
    }
    let mut lambda_sum = 0.0;
    for (i, &l) in phys.species.lambdas.iter().enumerate() {
        if !(l >= 0.0) || !l.is_finite() {
            rep.push(
                format!("physics.lambda.{}", SPECIES_NAMES[i]),
                format!("capacitive fraction {l} must be finite and nonnegative"),
            );
        }
        lambda_sum += l;
    }
    if (lambda_sum - 1.0).abs() > LAMBDA_TOL {
        rep.push(
            "physics.lambda",
            format!("fractions sum to {lambda_sum}, must equal 1"),
        );
    }

    if !(phys.diffusivity > 0.0) || !phys.diffusivity.is_finite() {
        rep.push(
            "physics.D",
            format!("diffusivity {} must be positive", phys.diffusivity),
        );
    }
    for (i, &g) in phys.conductances.iter().enumerate() {
        if !(g >= 0.0) || !g.is_finite() {
            rep.push(
                format!("physics.G.{}", SPECIES_NAMES[i]),
                format!("conductance {g} must be finite and nonnegative"),
            );
        }
    }
    if !(phys.capacitance >= 0.0) || !phys.capacitance.is_finite() {
        rep.push(
            "physics.P_m",
            format!("capacitance {} must be finite and nonnegative", phys.capacitance),
        );
    }

    let pump = &phys.pump;
    for (key, v) in [("pump.I_max1", pump.i_max1), ("pump.I_max2", pump.i_max2)] {
        if !(v >= 0.0) || !v.is_finite() {
            rep.push(key, format!("pump strength {v} must be finite and nonnegative"));
        }
    }
    for (key, v) in [
        ("pump.K_Na1", pump.k_na1),
        ("pump.K_K1", pump.k_k1),
        ("pump.K_Na2", pump.k_na2),
        ("pump.K_K2", pump.k_k2),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            rep.push(key, format!("pump threshold {v} must be positive"));
        }
    }

    let b = &setup.bounds;
    if !(b.lower > 0.0 && b.lower < b.upper) || !b.upper.is_finite() {
        rep.push(
            "bounds",
            format!("need 0 < lower < upper, got lower = {}, upper = {}", b.lower, b.upper),
        );
    }
    if !(b.sigma_floor > 0.0) || !b.sigma_floor.is_finite() {
        rep.push(
            "bounds.sigma_floor",
            format!("conductivity floor {} must be positive", b.sigma_floor),
        );
    }

    for (tag, conc) in [
        (Compartment::Intra, &setup.initial.c_intra),
        (Compartment::Extra, &setup.initial.c_extra),
    ] {
        let mut charge = 0.0;
        let mut scale = 0.0;
        let mut sigma = 0.0;
        for i in 0..N_SPECIES {
            let c = conc[i];
            let z = phys.species.valences[i] as f64;
            if !c.is_finite() || c < b.lower || c > b.upper {
                rep.push(
                    format!("init.C_{}.{}", tag.label(), SPECIES_NAMES[i]),
                    format!("concentration {c} outside [{}, {}]", b.lower, b.upper),
                );
            }
            charge += z * c;
            scale += z.abs() * c.abs();
            sigma += z * z * c;
        }
        if charge.abs() > EN_REL_TOL * scale.max(1.0) {
            rep.push(
                format!("init.C_{}", tag.label()),
                format!("initial data not electroneutral: sum(z_i C_i) = {charge}"),
            );
        }
        if sigma < b.sigma_floor {
            rep.push(
                format!("init.C_{}", tag.label()),
                format!("initial conductivity {sigma} below floor {}", b.sigma_floor),
            );
        }
    }
    if !setup.initial.phi0.is_finite() {
        rep.push("init.phi0", "initial jump must be finite".to_string());
    }

    if let Err(e) = setup.shape.check_params() {
        rep.push("geometry", e.to_string());
    }

    let run = &setup.run;
    if run.epsilon_inv == 0 {
        rep.push("run.epsilon_inv", "must be a positive integer".to_string());
    } else if run.grid_resolution % run.epsilon_inv as usize != 0 {
        rep.push(
            "run.grid_resolution",
            format!(
                "{} is not divisible by epsilon_inv = {}",
                run.grid_resolution, run.epsilon_inv
            ),
        );
    } else if setup.shape.check_params().is_ok() {
        if let Err(e) = crate::geometry::TaggedGrid::unit_cell(setup.shape, run.n_per_cell()) {
            rep.push("run.grid_resolution", e.to_string());
        }
    }

    if !(run.dt > 0.0) || !run.dt.is_finite() {
        rep.push("run.dt", format!("time step {} must be positive", run.dt));
    }
    if !(run.t_end > 0.0) || !run.t_end.is_finite() {
        rep.push("run.T_end", format!("final time {} must be positive", run.t_end));
    }
    if run.dt > 0.0 && run.t_end > 0.0 {
        let steps = run.t_end / run.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            rep.push(
                "run.T_end",
                format!("T_end / dt = {steps} must be a whole number of steps"),
            );
        }
    }
    if !(run.picard_tol > 0.0 && run.picard_tol < 1.0) {
        rep.push(
            "run.picard_tol",
            format!("{} must lie in (0, 1)", run.picard_tol),
        );
    }
    if run.picard_max_iter == 0 {
        rep.push("run.picard_max_iter", "must be at least 1".to_string());
    }
    if !(run.picard_damping > 0.0 && run.picard_damping <= 1.0) {
        rep.push(
            "run.picard_damping",
            format!("{} must lie in (0, 1]", run.picard_damping),
        );
    }
    if !(run.linear_tol > 0.0 && run.linear_tol < 1.0) {
        rep.push(
            "run.linear_tol",
            format!("{} must lie in (0, 1)", run.linear_tol),
        );
    }

    match (setup.shape, run.connectivity) {
        (CellShape::CenteredSquare { .. }, _) => {}
        (CellShape::CrossChannel { .. }, Connectivity::ConCon) => {}
        (CellShape::Stripe { .. }, Connectivity::ConCon) => {}
        (CellShape::Empty, _) => {
            rep.push(
                "geometry.shape",
                "empty geometry has no membrane; time-dependent runs are undefined".to_string(),
            );
        }
        (shape, conn) => {
            rep.push(
                "run.connectivity",
                format!(
                    "{} does not apply to {shape:?}: the extracellular phase of this \
                     geometry is not connected",
                    conn.label()
                ),
            );
        }
    }

    rep
}
