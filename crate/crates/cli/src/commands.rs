//! Implementations of the single-run subcommands.
//!
//! Each command loads a configuration (defaults when no file is given),
//! validates it, runs the requested solver, and writes its artifacts to the
//! output directory together with `config.resolved` and `manifest.txt`.

use crate::config::Config;
use crate::output::{ensure_dir, write_resolved_config, Csv, Manifest};
use anyhow::{anyhow, Context, Result};
use ionhom_core::cell_problem::{phase_tensor, EffectiveTensor};
use ionhom_core::macroscale::MacroSolver;
use ionhom_core::membrane::{flux_pieces, resting_potential};
use ionhom_core::micro::{MicroSolver, NormAccumulator, NormSample};
use ionhom_core::params::{validate, N_SPECIES, SPECIES_NAMES};
use ionhom_core::{Compartment, Connectivity, ModelSetup, TaggedGrid};
use std::fs;
use std::path::Path;
use std::time::Instant;

/// Failure category; decides the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// The inputs are bad: parse errors, invariant violations (exit 2).
    Config(anyhow::Error),
    /// The run itself failed: solver breakdown, I/O (exit 1).
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => format!("{e:#}"),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn rt<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

/// Reads and parses the configuration file without validating the model.
pub fn parse_config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading configuration file {}", p.display()))
                .map_err(Failure::Config)?;
            Config::from_text(&text)
                .with_context(|| format!("in {}", p.display()))
                .map_err(Failure::Config)
        }
        None => Ok(Config::default()),
    }
}

/// Parses and fully validates a configuration, including snapshot times.
pub fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    let cfg = parse_config(path)?;
    validate(&cfg.setup)
        .into_result()
        .map_err(|e| Failure::Config(e.into()))?;
    cfg.snapshot_steps().map_err(Failure::Config)?;
    Ok(cfg)
}

fn start_artifacts(cfg: &Config, out: &Path) -> Result<Manifest, Failure> {
    ensure_dir(out).map_err(rt)?;
    let mut manifest = Manifest::new(out, &cfg.sha256());
    write_resolved_config(out, &cfg.canonical(), &mut manifest).map_err(rt)?;
    Ok(manifest)
}

/// Computes the effective tensors a macro solver needs, on a unit cell with
/// `unit_n` grid cells per side. The intracellular tensor is only solved in
/// the connected-connected regime.
pub fn effective_tensors(
    setup: &ModelSetup,
    unit_n: usize,
) -> Result<(Option<EffectiveTensor>, EffectiveTensor)> {
    let grid = TaggedGrid::unit_cell(setup.shape, unit_n)?;
    let d = setup.physical.diffusivity;
    let tol = setup.run.linear_tol;
    let (te, _) = phase_tensor(&grid, Compartment::Extra, d, tol)?;
    let ti = match setup.run.connectivity {
        Connectivity::ConCon => Some(phase_tensor(&grid, Compartment::Intra, d, tol)?.0),
        Connectivity::ConDiscon => None,
    };
    Ok((ti, te))
}

/// `ionhom validate`: reports every violated invariant, or echoes the
/// resolved configuration with its hash.
pub fn cmd_validate(config: Option<&Path>) -> CmdResult {
    let cfg = parse_config(config)?;
    let report = validate(&cfg.setup);
    if !report.is_ok() {
        for issue in &report.issues {
            println!("invalid: {issue}");
        }
        return Err(Failure::Config(anyhow!(
            "{} invariant violation(s)",
            report.issues.len()
        )));
    }
    if let Err(e) = cfg.snapshot_steps() {
        println!("invalid: run.snapshots: {e}");
        return Err(Failure::Config(e));
    }
    println!("configuration ok, sha256 {}", cfg.sha256());
    print!("{}", cfg.canonical());
    Ok(())
}

fn phase_label(phase: Compartment) -> &'static str {
    match phase {
        Compartment::Intra => "intra",
        Compartment::Extra => "extra",
    }
}

/// Writes an n-by-n raster of per-cell values as one CSV line per grid row.
fn write_raster(
    out: &Path,
    name: &str,
    grid: &TaggedGrid,
    value: impl Fn(usize) -> f64,
    manifest: &mut Manifest,
) -> Result<()> {
    let n = grid.n();
    let mut body = String::new();
    for j in 0..n {
        let row: Vec<String> = (0..n).map(|i| value(grid.idx(i, j)).to_string()).collect();
        body.push_str(&row.join(","));
        body.push('\n');
    }
    fs::write(out.join(name), body.as_bytes())
        .with_context(|| format!("writing raster {name}"))?;
    manifest.record(name.to_string());
    Ok(())
}

/// `ionhom cell-problem`: solves the periodic correctors of both phases on a
/// unit cell with `run.grid_resolution` cells per side and reports the
/// effective tensors.
pub fn cmd_cell_problem(
    config: Option<&Path>,
    out: &Path,
    dump_correctors: bool,
    dump_tags: bool,
) -> CmdResult {
    let cfg = load_config(config)?;
    let setup = &cfg.setup;
    let grid = TaggedGrid::unit_cell(setup.shape, setup.run.grid_resolution).map_err(rt)?;
    let mut manifest = start_artifacts(&cfg, out)?;

    let mut csv = Csv::new(
        out,
        "tensors.csv",
        &["phase", "m00", "m01", "m10", "m11", "eig_min", "eig_max"],
    );
    for phase in [Compartment::Intra, Compartment::Extra] {
        if grid.count(phase) == 0 {
            println!("{}: phase has no cells, skipped", phase_label(phase));
            continue;
        }
        let timer = Instant::now();
        let (tensor, correctors) =
            phase_tensor(&grid, phase, setup.physical.diffusivity, setup.run.linear_tol)
                .map_err(rt)?;
        let (lo, hi) = tensor.eigenvalues();
        csv.row(&[
            phase_label(phase).to_string(),
            tensor.m[0][0].to_string(),
            tensor.m[0][1].to_string(),
            tensor.m[1][0].to_string(),
            tensor.m[1][1].to_string(),
            lo.to_string(),
            hi.to_string(),
        ]);
        println!(
            "{}: D_eff = [[{:.8}, {:.8}], [{:.8}, {:.8}]], eigenvalues [{:.8}, {:.8}] ({:.2?})",
            phase_label(phase),
            tensor.m[0][0],
            tensor.m[0][1],
            tensor.m[1][0],
            tensor.m[1][1],
            lo,
            hi,
            timer.elapsed(),
        );
        println!(
            "{}: symmetry check |m01 - m10| = {:.3e}",
            phase_label(phase),
            tensor.symmetry_error()
        );
        if dump_correctors {
            for c in &correctors {
                let name = format!(
                    "corrector_{}_{}.csv",
                    phase_label(phase),
                    ["x", "y"][c.direction]
                );
                write_raster(out, &name, &grid, |p| c.chi[p], &mut manifest).map_err(rt)?;
            }
        }
    }
    manifest.record(csv.finish().map_err(rt)?);
    if dump_tags {
        write_raster(
            out,
            "tags.csv",
            &grid,
            |p| match grid.tag(p) {
                Compartment::Intra => 1.0,
                Compartment::Extra => 0.0,
            },
            &mut manifest,
        )
        .map_err(rt)?;
    }
    manifest.write().map_err(rt)?;
    Ok(())
}

fn norm_sample_columns() -> Vec<String> {
    let mut cols = Vec::new();
    for sp in SPECIES_NAMES {
        for ph in ["intra", "extra"] {
            cols.push(format!("l2_C_{sp}_{ph}"));
            cols.push(format!("grad_C_{sp}_{ph}"));
            cols.push(format!("trace_C_{sp}_{ph}"));
        }
    }
    for ph in ["intra", "extra"] {
        cols.push(format!("l2_phi_{ph}"));
        cols.push(format!("trace_phi_{ph}"));
        cols.push(format!("grad_phi_{ph}"));
    }
    cols
}

fn norm_sample_values(s: &NormSample) -> Vec<f64> {
    let mut vals = Vec::new();
    for i in 0..N_SPECIES {
        for k in 0..2 {
            vals.push(s.l2_conc[i][k]);
            vals.push(s.grad_conc[i][k]);
            vals.push(s.trace_conc[i][k]);
        }
    }
    for k in 0..2 {
        vals.push(s.l2_phi[k]);
        vals.push(s.trace_phi[k]);
        vals.push(s.grad_phi[k]);
    }
    vals
}

/// `ionhom micro`: runs the resolved tissue simulation and writes
/// `series.csv` (totals, electroneutrality drift, instantaneous norms per
/// step), `norms.csv` (time-aggregated norms), and `averages.csv`
/// (epsilon-cell averages at the snapshot times).
pub fn cmd_micro(config: Option<&Path>, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let setup = &cfg.setup;
    let snapshot_steps = cfg.snapshot_steps().map_err(Failure::Config)?;
    let mut manifest = start_artifacts(&cfg, out)?;

    let timer = Instant::now();
    let mut solver = MicroSolver::new(setup).map_err(rt)?;
    let mut state = solver.initial_state(setup).map_err(rt)?;
    let dt = setup.run.dt;
    let total_steps = setup.run.num_steps();

    let mut series_cols = vec![
        "t".to_string(),
        "total_Na".to_string(),
        "total_K".to_string(),
        "total_Cl".to_string(),
        "en_max".to_string(),
        "sigma_min".to_string(),
        "picard_sweeps".to_string(),
    ];
    series_cols.extend(norm_sample_columns());
    let col_refs: Vec<&str> = series_cols.iter().map(|s| s.as_str()).collect();
    let mut series = Csv::new(out, "series.csv", &col_refs);

    let mut avg_cols = vec![
        "t".to_string(),
        "block".to_string(),
        "bx".to_string(),
        "by".to_string(),
    ];
    for sp in SPECIES_NAMES {
        avg_cols.push(format!("C_{sp}_intra"));
    }
    for sp in SPECIES_NAMES {
        avg_cols.push(format!("C_{sp}_extra"));
    }
    avg_cols.extend(["phi_intra".into(), "phi_extra".into(), "v".into()]);
    let avg_refs: Vec<&str> = avg_cols.iter().map(|s| s.as_str()).collect();
    let mut averages = Csv::new(out, "averages.csv", &avg_refs);

    let mut acc = NormAccumulator::new();
    let record = |solver: &MicroSolver,
                  state: &ionhom_core::micro::MicroState,
                  weight: f64,
                  sweeps: usize,
                  series: &mut Csv,
                  acc: &mut NormAccumulator| {
        let d = solver.diagnostics(state);
        acc.record(&d.norms, weight);
        let mut row = vec![
            state.time,
            d.totals[0][0] + d.totals[0][1],
            d.totals[1][0] + d.totals[1][1],
            d.totals[2][0] + d.totals[2][1],
            d.en_max,
            d.sigma_min,
            sweeps as f64,
        ];
        row.extend(norm_sample_values(&d.norms));
        series.row_f64(&row);
    };
    record(&solver, &state, 0.0, 0, &mut series, &mut acc);

    let snapshot_blocks = |solver: &MicroSolver,
                           state: &ionhom_core::micro::MicroState,
                           averages: &mut Csv| {
        let avg = solver.average_fields(state);
        let m = avg.m;
        for b in 0..m * m {
            let mut row = vec![state.time, b as f64, (b % m) as f64, (b / m) as f64];
            for sp in 0..N_SPECIES {
                row.push(avg.conc_intra[sp][b]);
            }
            for sp in 0..N_SPECIES {
                row.push(avg.conc_extra[sp][b]);
            }
            row.extend([avg.phi_intra[b], avg.phi_extra[b], avg.v[b]]);
            averages.row_f64(&row);
        }
    };

    let progress_every = (total_steps / 10).max(1);
    for k in 1..=total_steps {
        let (next, info) = solver.step(&state, dt).map_err(rt)?;
        state = next;
        record(&solver, &state, dt, info.picard_sweeps, &mut series, &mut acc);
        if snapshot_steps.contains(&k) {
            snapshot_blocks(&solver, &state, &mut averages);
        }
        if k % progress_every == 0 || k == total_steps {
            println!(
                "step {k}/{total_steps}, t = {:.6}, elapsed {:.2?}",
                state.time,
                timer.elapsed()
            );
        }
    }

    let report = acc.report();
    let mut norms = Csv::new(out, "norms.csv", &["norm", "value"]);
    for (name, value) in report.values() {
        norms.row(&[name, value.to_string()]);
    }

    manifest.record(series.finish().map_err(rt)?);
    manifest.record(averages.finish().map_err(rt)?);
    manifest.record(norms.finish().map_err(rt)?);
    manifest.write().map_err(rt)?;
    println!("micro run finished in {:.2?}", timer.elapsed());
    Ok(())
}

/// `ionhom macro`: computes effective tensors on a unit cell resolved with
/// `run.grid_resolution / run.epsilon_inv` cells per side (matching the
/// per-cell resolution of the corresponding micro run), then runs the
/// homogenized model and writes `series.csv` plus snapshot `fields.csv`.
pub fn cmd_macro(config: Option<&Path>, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let setup = &cfg.setup;
    let snapshot_steps = cfg.snapshot_steps().map_err(Failure::Config)?;
    let mut manifest = start_artifacts(&cfg, out)?;

    let timer = Instant::now();
    let (ti, te) = effective_tensors(setup, setup.run.n_per_cell()).map_err(rt)?;
    let m = cfg
        .macro_resolution
        .unwrap_or(setup.run.epsilon_inv as usize);
    let mut solver = MacroSolver::new(setup, m, ti.as_ref(), &te).map_err(rt)?;
    let mut state = solver.initial_state(setup);
    let dt = setup.run.dt;
    let total_steps = setup.run.num_steps();

    let mut series = Csv::new(
        out,
        "series.csv",
        &["t", "total_Na", "total_K", "total_Cl", "en_max", "v_mean", "picard_sweeps"],
    );
    let record = |solver: &MacroSolver,
                  state: &ionhom_core::macroscale::MacroState,
                  sweeps: usize,
                  series: &mut Csv| {
        let totals = solver.conservation_totals(state);
        let v_mean = state.v.iter().sum::<f64>() / state.v.len() as f64;
        series.row_f64(&[
            state.time,
            totals[0],
            totals[1],
            totals[2],
            solver.en_max(state),
            v_mean,
            sweeps as f64,
        ]);
    };
    record(&solver, &state, 0, &mut series);
    let totals0 = solver.conservation_totals(&state);

    let mut field_cols = vec![
        "t".to_string(),
        "cell".to_string(),
        "cx".to_string(),
        "cy".to_string(),
    ];
    for sp in SPECIES_NAMES {
        field_cols.push(format!("C_{sp}_intra"));
    }
    for sp in SPECIES_NAMES {
        field_cols.push(format!("C_{sp}_extra"));
    }
    field_cols.extend(["phi_intra".into(), "phi_extra".into(), "v".into()]);
    let field_refs: Vec<&str> = field_cols.iter().map(|s| s.as_str()).collect();
    let mut fields = Csv::new(out, "fields.csv", &field_refs);
    let snapshot_fields = |state: &ionhom_core::macroscale::MacroState, fields: &mut Csv| {
        for p in 0..m * m {
            let mut row = vec![state.time, p as f64, (p % m) as f64, (p / m) as f64];
            for sp in 0..N_SPECIES {
                row.push(state.conc_intra[sp][p]);
            }
            for sp in 0..N_SPECIES {
                row.push(state.conc_extra[sp][p]);
            }
            row.extend([state.phi_intra[p], state.phi_extra[p], state.v[p]]);
            fields.row_f64(&row);
        }
    };

    let progress_every = (total_steps / 10).max(1);
    for k in 1..=total_steps {
        let (next, info) = solver.step(&state, dt).map_err(rt)?;
        state = next;
        record(&solver, &state, info.picard_sweeps, &mut series);
        if snapshot_steps.contains(&k) {
            snapshot_fields(&state, &mut fields);
        }
        if k % progress_every == 0 || k == total_steps {
            println!(
                "step {k}/{total_steps}, t = {:.6}, elapsed {:.2?}",
                state.time,
                timer.elapsed()
            );
        }
    }

    let totals1 = solver.conservation_totals(&state);
    for i in 0..N_SPECIES {
        let scale = totals0[i].abs().max(1.0);
        println!(
            "conservation {}: initial {:.12}, final {:.12}, relative drift {:.3e}",
            SPECIES_NAMES[i],
            totals0[i],
            totals1[i],
            (totals1[i] - totals0[i]).abs() / scale
        );
    }
    println!(
        "electroneutrality drift at T: {:.3e}",
        solver.en_max(&state)
    );

    manifest.record(series.finish().map_err(rt)?);
    manifest.record(fields.finish().map_err(rt)?);
    manifest.write().map_err(rt)?;
    println!("macro run finished in {:.2?}", timer.elapsed());
    Ok(())
}

/// `ionhom membrane`: prints the equilibrium quantities of the configured
/// concentrations; with `--probe` also tabulates the per-species currents
/// over a membrane-potential grid.
pub fn cmd_membrane(
    config: Option<&Path>,
    out: &Path,
    probe: bool,
    v_min: f64,
    v_max: f64,
    points: usize,
) -> CmdResult {
    let cfg = load_config(config)?;
    let setup = &cfg.setup;
    let phys = &setup.physical;
    let ci = setup.initial.c_intra;
    let ce = setup.initial.c_extra;

    let pieces = flux_pieces(&ci, &ce, phys).map_err(rt)?;
    for i in 0..N_SPECIES {
        println!(
            "E_{} = {:.8} (C_intra {}, C_extra {})",
            SPECIES_NAMES[i], pieces.nernst[i], ci[i], ce[i]
        );
    }
    println!("pump current I_p = {:.8}", pieces.i_p);
    match resting_potential(&ci, &ce, phys) {
        Ok(vr) => println!("resting potential = {:.8}", vr),
        Err(e) => println!("resting potential undefined: {e}"),
    }

    if !probe {
        return Ok(());
    }
    if points < 2 || !(v_max > v_min) {
        return Err(Failure::Config(anyhow!(
            "probe grid needs points >= 2 and v_max > v_min"
        )));
    }
    let mut manifest = start_artifacts(&cfg, out)?;
    let mut csv = Csv::new(
        out,
        "probe.csv",
        &["v", "I_Na", "I_K", "I_Cl", "I_total"],
    );
    for k in 0..points {
        let v = v_min + (v_max - v_min) * k as f64 / (points - 1) as f64;
        let mut row = [v, 0.0, 0.0, 0.0, 0.0];
        for i in 0..N_SPECIES {
            row[1 + i] = pieces.species_flux(i, v, 0.0, phys);
        }
        row[4] = pieces.total_current(v, 0.0, phys);
        csv.row_f64(&row);
    }
    manifest.record(csv.finish().map_err(rt)?);
    manifest.write().map_err(rt)?;
    Ok(())
}
