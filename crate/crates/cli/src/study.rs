//! The `converge` subcommand: averaged micro solutions against the
//! homogenized model across a sequence of cell sizes.
//!
//! The study runs the macroscale model once on a reference grid, then one
//! resolved micro run per epsilon, keeping the number of grid cells per
//! unit cell fixed. At each snapshot time the micro state is averaged over
//! its epsilon-blocks, the macro solution is restricted to the same block
//! grid by exact averaging, and the discrete L2 difference is recorded per
//! field. Legs are isolated: a failing epsilon is reported and skipped while
//! the others continue.

use crate::commands::{effective_tensors, load_config, CmdResult, Failure};
use crate::config::Config;
use crate::output::{ensure_dir, write_resolved_config, Csv, Manifest};
use anyhow::{anyhow, Context, Result};
use ionhom_core::macroscale::{MacroSolver, MacroState};
use ionhom_core::micro::{AveragedFields, MicroSolver, NormAccumulator, NormReport};
use ionhom_core::params::validate;
use std::fs;
use std::path::Path;
use std::time::Instant;

/// Field order used in the error table and field dumps. The first
/// `TRACKED_FIELDS` entries are the convergence-tracked ones; the potentials
/// come last because the extracellular potential sits at the linear-solver
/// noise floor in the disconnected regime and carries no convergence signal.
pub const FIELD_NAMES: [&str; 9] = [
    "C_Na_intra",
    "C_K_intra",
    "C_Cl_intra",
    "C_Na_extra",
    "C_K_extra",
    "C_Cl_extra",
    "v",
    "phi_intra",
    "phi_extra",
];

/// Number of leading entries of [`FIELD_NAMES`] that enter the error table.
pub const TRACKED_FIELDS: usize = 7;

fn macro_field_views(s: &MacroState) -> [&[f64]; 9] {
    [
        &s.conc_intra[0],
        &s.conc_intra[1],
        &s.conc_intra[2],
        &s.conc_extra[0],
        &s.conc_extra[1],
        &s.conc_extra[2],
        &s.v,
        &s.phi_intra,
        &s.phi_extra,
    ]
}

fn averaged_field_views(a: &AveragedFields) -> [&[f64]; 9] {
    [
        &a.conc_intra[0],
        &a.conc_intra[1],
        &a.conc_intra[2],
        &a.conc_extra[0],
        &a.conc_extra[1],
        &a.conc_extra[2],
        &a.v,
        &a.phi_intra,
        &a.phi_extra,
    ]
}

/// Restricts a field on an `m_fine` grid to an `m_coarse` grid by averaging
/// each block of `(m_fine / m_coarse)^2` cells. Exact when the ratio divides.
fn restrict(values: &[f64], m_fine: usize, m_coarse: usize) -> Vec<f64> {
    assert_eq!(m_fine % m_coarse, 0);
    let k = m_fine / m_coarse;
    let w = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; m_coarse * m_coarse];
    for j in 0..m_fine {
        for i in 0..m_fine {
            out[(j / k) * m_coarse + i / k] += w * values[j * m_fine + i];
        }
    }
    out
}

/// Root-mean-square difference, the discrete L2 norm on the unit square.
fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sum / a.len() as f64).sqrt()
}

fn l2_norm(a: &[f64]) -> f64 {
    let sum: f64 = a.iter().map(|x| x * x).sum();
    (sum / a.len() as f64).sqrt()
}

struct Leg {
    eps_inv: u32,
    /// Averaged micro fields, one entry per snapshot.
    averages: Vec<AveragedFields>,
    report: NormReport,
}

fn run_macro_reference(
    cfg: &Config,
    m_ref: usize,
    npc: usize,
    snapshot_steps: &[usize],
) -> Result<Vec<MacroState>> {
    let setup = &cfg.setup;
    let (ti, te) = effective_tensors(setup, npc)?;
    let mut solver = MacroSolver::new(setup, m_ref, ti.as_ref(), &te)?;
    let mut state = solver.initial_state(setup);
    let dt = setup.run.dt;
    let total = setup.run.num_steps();
    let mut snapshots = Vec::with_capacity(snapshot_steps.len());
    for k in 1..=total {
        let (next, _) = solver.step(&state, dt)?;
        state = next;
        if snapshot_steps.contains(&k) {
            snapshots.push(state.clone());
        }
    }
    Ok(snapshots)
}

fn run_micro_leg(
    cfg: &Config,
    eps_inv: u32,
    npc: usize,
    snapshot_steps: &[usize],
    leg_dir: &Path,
) -> Result<Leg> {
    let mut setup = cfg.setup.clone();
    setup.run.epsilon_inv = eps_inv;
    setup.run.grid_resolution = npc * eps_inv as usize;
    validate(&setup).into_result()?;

    let timer = Instant::now();
    let mut solver = MicroSolver::new(&setup)?;
    let mut state = solver.initial_state(&setup)?;
    let dt = setup.run.dt;
    let total = setup.run.num_steps();
    let mut acc = NormAccumulator::new();
    acc.record(&solver.diagnostics(&state).norms, 0.0);
    let mut averages = Vec::with_capacity(snapshot_steps.len());
    let progress_every = (total / 4).max(1);
    for k in 1..=total {
        let (next, _) = solver.step(&state, dt)?;
        state = next;
        acc.record(&solver.diagnostics(&state).norms, dt);
        if snapshot_steps.contains(&k) {
            averages.push(solver.average_fields(&state));
        }
        if k % progress_every == 0 || k == total {
            println!(
                "  eps 1/{eps_inv}: step {k}/{total}, elapsed {:.2?}",
                timer.elapsed()
            );
        }
    }

    let report = acc.report();
    let mut norms = Csv::new(leg_dir, "norms.csv", &["norm", "value"]);
    for (name, value) in report.values() {
        norms.row(&[name, value.to_string()]);
    }
    let mut manifest = Manifest::new(leg_dir, &cfg.sha256());
    manifest.record(norms.finish()?);
    manifest.write()?;

    Ok(Leg {
        eps_inv,
        averages,
        report,
    })
}

/// `ionhom converge`: compares averaged micro runs against the homogenized
/// reference for each requested epsilon denominator.
pub fn cmd_converge(config: Option<&Path>, out: &Path, epsilons: &[u32]) -> CmdResult {
    let cfg = load_config(config)?;
    let mut eps_list = epsilons.to_vec();
    eps_list.sort_unstable();
    eps_list.dedup();
    if eps_list.is_empty() {
        return Err(Failure::Config(anyhow!(
            "need at least one epsilon denominator"
        )));
    }
    if eps_list[0] == 0 {
        return Err(Failure::Config(anyhow!("epsilon denominators must be positive")));
    }

    let npc = cfg.setup.run.n_per_cell();
    let max_eps = *eps_list.last().unwrap() as usize;
    let m_ref = cfg.macro_resolution.unwrap_or(max_eps);
    for &e in &eps_list {
        if m_ref % e as usize != 0 {
            return Err(Failure::Config(anyhow!(
                "macro resolution {m_ref} is not divisible by epsilon denominator {e}"
            )));
        }
    }
    let snapshot_steps = cfg.snapshot_steps().map_err(Failure::Config)?;
    let snapshot_times: Vec<f64> = snapshot_steps
        .iter()
        .map(|&k| k as f64 * cfg.setup.run.dt)
        .collect();

    ensure_dir(out).map_err(Failure::Runtime)?;
    let mut manifest = Manifest::new(out, &cfg.sha256());
    write_resolved_config(out, &cfg.canonical(), &mut manifest)
        .map_err(Failure::Runtime)?;

    println!(
        "reference macro run on a {m_ref}x{m_ref} grid ({} cells per unit-cell side)",
        npc
    );
    let timer = Instant::now();
    let macro_snapshots = run_macro_reference(&cfg, m_ref, npc, &snapshot_steps)
        .context("reference macro run")
        .map_err(Failure::Runtime)?;
    println!("reference macro run finished in {:.2?}", timer.elapsed());

    // Write the reference fields at every snapshot for plotting.
    let mut macro_cols = vec!["t".to_string(), "cell".to_string()];
    macro_cols.extend(FIELD_NAMES.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = macro_cols.iter().map(|s| s.as_str()).collect();
    let mut macro_csv = Csv::new(out, "macro_fields.csv", &refs);
    for (si, state) in macro_snapshots.iter().enumerate() {
        let views = macro_field_views(state);
        for p in 0..m_ref * m_ref {
            let mut row = vec![snapshot_times[si], p as f64];
            row.extend(views.iter().map(|f| f[p]));
            macro_csv.row_f64(&row);
        }
    }
    manifest.record(macro_csv.finish().map_err(Failure::Runtime)?);

    // Normalization per field: the initial L2 norm on the reference grid,
    // floored at one so fields starting from zero stay well defined.
    let init_norms: Vec<f64> = {
        let setup = &cfg.setup;
        let (ti, te) = effective_tensors(setup, npc).map_err(Failure::Runtime)?;
        let solver =
            MacroSolver::new(setup, m_ref, ti.as_ref(), &te).map_err(|e| Failure::Runtime(e.into()))?;
        let init = solver.initial_state(setup);
        macro_field_views(&init)
            .iter()
            .map(|f| l2_norm(f).max(1.0))
            .collect()
    };

    let mut legs: Vec<Leg> = Vec::new();
    let mut failures: Vec<(u32, String)> = Vec::new();
    for &e in &eps_list {
        let leg_dir = out.join(format!("eps_{e}"));
        if let Err(err) = ensure_dir(&leg_dir) {
            return Err(Failure::Runtime(err));
        }
        println!("micro leg eps = 1/{e} (grid {0}x{0})", npc * e as usize);
        match run_micro_leg(&cfg, e, npc, &snapshot_steps, &leg_dir) {
            Ok(leg) => {
                manifest.record(format!("eps_{e}/norms.csv"));
                manifest.record(format!("eps_{e}/manifest.txt"));
                legs.push(leg);
            }
            Err(err) => {
                let msg = format!("{err:#}");
                println!("  eps 1/{e} FAILED: {msg}");
                let _ = fs::write(leg_dir.join("failed.txt"), format!("{msg}\n"));
                manifest.record(format!("eps_{e}/failed.txt"));
                failures.push((e, msg));
            }
        }
    }

    let mut errors = Csv::new(
        out,
        "errors.csv",
        &["field", "t", "eps", "eps_inv", "error", "ratio"],
    );
    for (fi, field) in FIELD_NAMES.iter().take(TRACKED_FIELDS).enumerate() {
        for (si, &t) in snapshot_times.iter().enumerate() {
            let mut prev: Option<f64> = None;
            for leg in &legs {
                let m = leg.eps_inv as usize;
                let avg = &leg.averages[si];
                let micro_views = averaged_field_views(avg);
                let macro_restricted =
                    restrict(macro_field_views(&macro_snapshots[si])[fi], m_ref, m);
                let err = l2_diff(micro_views[fi], &macro_restricted) / init_norms[fi];
                let ratio = prev.map(|p| if p > 0.0 { err / p } else { f64::NAN });
                errors.row(&[
                    field.to_string(),
                    t.to_string(),
                    (1.0 / leg.eps_inv as f64).to_string(),
                    leg.eps_inv.to_string(),
                    err.to_string(),
                    ratio.map(|r| r.to_string()).unwrap_or_default(),
                ]);
                match ratio {
                    Some(r) => println!(
                        "{field} t={t}: eps 1/{} error {err:.6e} (ratio {r:.3})",
                        leg.eps_inv
                    ),
                    None => println!("{field} t={t}: eps 1/{} error {err:.6e}", leg.eps_inv),
                }
                prev = Some(err);
            }
        }
    }
    manifest.record(errors.finish().map_err(Failure::Runtime)?);

    // Norm-report comparison between the extreme legs, for the a priori
    // uniformity check across epsilon.
    if legs.len() >= 2 {
        let first = &legs[0];
        let last = &legs[legs.len() - 1];
        let mut ratio_csv = Csv::new(
            out,
            "norm_ratios.csv",
            &["norm", "coarse_eps_inv", "fine_eps_inv", "coarse", "fine", "ratio"],
        );
        for ((name, coarse), (_, fine)) in
            first.report.values().into_iter().zip(last.report.values())
        {
            let denom = coarse.max(1e-8);
            ratio_csv.row(&[
                name,
                first.eps_inv.to_string(),
                last.eps_inv.to_string(),
                coarse.to_string(),
                fine.to_string(),
                (fine / denom).to_string(),
            ]);
        }
        manifest.record(ratio_csv.finish().map_err(Failure::Runtime)?);
    }

    manifest.write().map_err(Failure::Runtime)?;
    println!("study finished in {:.2?}", timer.elapsed());

    if !failures.is_empty() {
        let listing: Vec<String> = failures
            .iter()
            .map(|(e, msg)| format!("eps 1/{e}: {msg}"))
            .collect();
        return Err(Failure::Runtime(anyhow!(
            "{} of {} legs failed: {}",
            failures.len(),
            eps_list.len(),
            listing.join("; ")
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restriction_averages_blocks_exactly() {
        // 4x4 field with value = column index, restricted to 2x2.
        let fine: Vec<f64> = (0..16).map(|p| (p % 4) as f64).collect();
        let coarse = restrict(&fine, 4, 2);
        assert_eq!(coarse, vec![0.5, 2.5, 0.5, 2.5]);
    }

    #[test]
    fn l2_diff_of_identical_fields_is_zero() {
        let a = vec![1.0, 2.0, 3.0];
        assert_eq!(l2_diff(&a, &a), 0.0);
        assert!((l2_norm(&[3.0, 4.0]) - (12.5f64).sqrt()).abs() < 1e-15);
    }
}
