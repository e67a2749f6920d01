//! Flat key-value configuration files.
//!
//! The format is one `key = value` pair per line, `#` starts a comment, and
//! every key has a default, so an empty file is a valid configuration. Keys
//! are checked against the schema and duplicates are rejected; the resolved
//! configuration can be echoed in a canonical order and hashed, which is how
//! run manifests identify their inputs.

use anyhow::{anyhow, bail, Result};
use ionhom_core::params::N_SPECIES;
use ionhom_core::{CellShape, Connectivity, ModelSetup};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;

const SPECIES: [&str; N_SPECIES] = ["Na", "K", "Cl"];

/// A fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct Config {
    pub setup: ModelSetup,
    /// Snapshot times as fractions of `T_end`, ascending.
    pub snapshots: Vec<f64>,
    /// Macro grid cells per side; defaults to the epsilon denominator.
    pub macro_resolution: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            setup: ModelSetup::default(),
            snapshots: vec![0.25, 0.5, 1.0],
            macro_resolution: None,
        }
    }
}

fn parse_f64(key: &str, raw: &str) -> Result<f64> {
    raw.parse::<f64>()
        .map_err(|_| anyhow!("key '{key}': cannot parse '{raw}' as a number"))
}

fn parse_usize(key: &str, raw: &str) -> Result<usize> {
    raw.parse::<usize>()
        .map_err(|_| anyhow!("key '{key}': cannot parse '{raw}' as a nonnegative integer"))
}

impl Config {
    /// Parses a configuration file body. Unknown keys, duplicate keys and
    /// malformed values are all errors.
    pub fn from_text(text: &str) -> Result<Config> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut cfg = Config::default();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected 'key = value'", lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            if let Some(first) = seen.insert(key.to_string(), lineno + 1) {
                bail!("line {}: key '{key}' already set on line {first}", lineno + 1);
            }
            cfg.apply(key, value)
                .map_err(|e| anyhow!("line {}: {e}", lineno + 1))?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.setup;
        match key {
            "physics.D" => s.physical.diffusivity = parse_f64(key, value)?,
            "physics.P_m" => s.physical.capacitance = parse_f64(key, value)?,
            "pump.I_max1" => s.physical.pump.i_max1 = parse_f64(key, value)?,
            "pump.I_max2" => s.physical.pump.i_max2 = parse_f64(key, value)?,
            "pump.K_Na1" => s.physical.pump.k_na1 = parse_f64(key, value)?,
            "pump.K_K1" => s.physical.pump.k_k1 = parse_f64(key, value)?,
            "pump.K_Na2" => s.physical.pump.k_na2 = parse_f64(key, value)?,
            "pump.K_K2" => s.physical.pump.k_k2 = parse_f64(key, value)?,
            "init.phi0" => s.initial.phi0 = parse_f64(key, value)?,
            "bounds.lower" => s.bounds.lower = parse_f64(key, value)?,
            "bounds.upper" => s.bounds.upper = parse_f64(key, value)?,
            "bounds.sigma_floor" => s.bounds.sigma_floor = parse_f64(key, value)?,
            "geometry.shape" => {
                s.shape = match value {
                    "centered_square" => CellShape::CenteredSquare {
                        a: default_shape_param(&s.shape, "a"),
                    },
                    "cross_channel" => CellShape::CrossChannel {
                        w: default_shape_param(&s.shape, "w"),
                    },
                    "stripe" => CellShape::Stripe {
                        theta: default_shape_param(&s.shape, "theta"),
                    },
                    "empty" => CellShape::Empty,
                    other => bail!(
                        "key '{key}': unknown shape '{other}' \
                         (expected centered_square, cross_channel, stripe or empty)"
                    ),
                }
            }
            "geometry.a" => match &mut s.shape {
                CellShape::CenteredSquare { a } => *a = parse_f64(key, value)?,
                _ => bail!("key '{key}' only applies to the centered_square shape"),
            },
            "geometry.w" => match &mut s.shape {
                CellShape::CrossChannel { w } => *w = parse_f64(key, value)?,
                _ => bail!("key '{key}' only applies to the cross_channel shape"),
            },
            "geometry.theta" => match &mut s.shape {
                CellShape::Stripe { theta } => *theta = parse_f64(key, value)?,
                _ => bail!("key '{key}' only applies to the stripe shape"),
            },
            "run.epsilon_inv" => {
                s.run.epsilon_inv = value
                    .parse::<u32>()
                    .map_err(|_| anyhow!("key '{key}': cannot parse '{value}'"))?
            }
            "run.grid_resolution" => s.run.grid_resolution = parse_usize(key, value)?,
            "run.dt" => s.run.dt = parse_f64(key, value)?,
            "run.T_end" => s.run.t_end = parse_f64(key, value)?,
            "run.picard_tol" => s.run.picard_tol = parse_f64(key, value)?,
            "run.picard_max_iter" => s.run.picard_max_iter = parse_usize(key, value)?,
            "run.picard_damping" => s.run.picard_damping = parse_f64(key, value)?,
            "run.linear_tol" => s.run.linear_tol = parse_f64(key, value)?,
            "run.connectivity" => {
                s.run.connectivity = Connectivity::parse(value).ok_or_else(|| {
                    anyhow!(
                        "key '{key}': unknown regime '{value}' \
                         (expected con_discon or con_con)"
                    )
                })?
            }
            "run.snapshots" => {
                let mut out = Vec::new();
                for part in value.split(',') {
                    out.push(parse_f64(key, part.trim())?);
                }
                if out.is_empty() {
                    bail!("key '{key}': needs at least one fraction");
                }
                self.snapshots = out;
            }
            "run.macro_resolution" => self.macro_resolution = Some(parse_usize(key, value)?),
            _ => {
                if let Some(rest) = key.strip_prefix("physics.G.") {
                    let i = species_index(key, rest)?;
                    s.physical.conductances[i] = parse_f64(key, value)?;
                } else if let Some(rest) = key.strip_prefix("physics.lambda.") {
                    let i = species_index(key, rest)?;
                    s.physical.species.lambdas[i] = parse_f64(key, value)?;
                } else if let Some(rest) = key.strip_prefix("init.C_intra.") {
                    let i = species_index(key, rest)?;
                    s.initial.c_intra[i] = parse_f64(key, value)?;
                } else if let Some(rest) = key.strip_prefix("init.C_extra.") {
                    let i = species_index(key, rest)?;
                    s.initial.c_extra[i] = parse_f64(key, value)?;
                } else {
                    bail!("unknown configuration key '{key}'");
                }
            }
        }
        Ok(())
    }

    /// Echoes the fully resolved configuration in a fixed key order.
    pub fn canonical(&self) -> String {
        let s = &self.setup;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("physics.D", s.physical.diffusivity.to_string());
        for i in 0..N_SPECIES {
            kv(
                &format!("physics.G.{}", SPECIES[i]),
                s.physical.conductances[i].to_string(),
            );
        }
        kv("physics.P_m", s.physical.capacitance.to_string());
        for i in 0..N_SPECIES {
            kv(
                &format!("physics.lambda.{}", SPECIES[i]),
                s.physical.species.lambdas[i].to_string(),
            );
        }
        kv("pump.I_max1", s.physical.pump.i_max1.to_string());
        kv("pump.I_max2", s.physical.pump.i_max2.to_string());
        kv("pump.K_Na1", s.physical.pump.k_na1.to_string());
        kv("pump.K_K1", s.physical.pump.k_k1.to_string());
        kv("pump.K_Na2", s.physical.pump.k_na2.to_string());
        kv("pump.K_K2", s.physical.pump.k_k2.to_string());
        for i in 0..N_SPECIES {
            kv(
                &format!("init.C_intra.{}", SPECIES[i]),
                s.initial.c_intra[i].to_string(),
            );
        }
        for i in 0..N_SPECIES {
            kv(
                &format!("init.C_extra.{}", SPECIES[i]),
                s.initial.c_extra[i].to_string(),
            );
        }
        kv("init.phi0", s.initial.phi0.to_string());
        kv("bounds.lower", s.bounds.lower.to_string());
        kv("bounds.upper", s.bounds.upper.to_string());
        kv("bounds.sigma_floor", s.bounds.sigma_floor.to_string());
        match s.shape {
            CellShape::CenteredSquare { a } => {
                kv("geometry.shape", "centered_square".into());
                kv("geometry.a", a.to_string());
            }
            CellShape::CrossChannel { w } => {
                kv("geometry.shape", "cross_channel".into());
                kv("geometry.w", w.to_string());
            }
            CellShape::Stripe { theta } => {
                kv("geometry.shape", "stripe".into());
                kv("geometry.theta", theta.to_string());
            }
            CellShape::Empty => kv("geometry.shape", "empty".into()),
        }
        kv("run.epsilon_inv", s.run.epsilon_inv.to_string());
        kv("run.grid_resolution", s.run.grid_resolution.to_string());
        kv("run.dt", s.run.dt.to_string());
        kv("run.T_end", s.run.t_end.to_string());
        kv("run.picard_tol", s.run.picard_tol.to_string());
        kv("run.picard_max_iter", s.run.picard_max_iter.to_string());
        kv("run.picard_damping", s.run.picard_damping.to_string());
        kv("run.linear_tol", s.run.linear_tol.to_string());
        kv("run.connectivity", s.run.connectivity.label().into());
        kv(
            "run.snapshots",
            self.snapshots
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        if let Some(m) = self.macro_resolution {
            kv("run.macro_resolution", m.to_string());
        }
        out
    }

    /// Hex digest of the canonical echo.
    pub fn sha256(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical().as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }

    /// Checks the snapshot fractions against the time grid and returns the
    /// step index of each snapshot.
    pub fn snapshot_steps(&self) -> Result<Vec<usize>> {
        let dt = self.setup.run.dt;
        let t_end = self.setup.run.t_end;
        let mut prev = 0.0;
        let mut out = Vec::with_capacity(self.snapshots.len());
        for &f in &self.snapshots {
            if !(f > 0.0 && f <= 1.0) {
                bail!("snapshot fraction {f} is outside (0, 1]");
            }
            if f <= prev {
                bail!("snapshot fractions must be strictly ascending");
            }
            prev = f;
            let t = f * t_end;
            let steps = t / dt;
            let k = steps.round();
            if (steps - k).abs() > 1e-9 * k.max(1.0) {
                bail!("snapshot time {t} is not a whole number of steps of dt = {dt}");
            }
            out.push(k as usize);
        }
        Ok(out)
    }
}

fn species_index(key: &str, name: &str) -> Result<usize> {
    SPECIES
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| anyhow!("key '{key}': unknown species '{name}'"))
}

fn default_shape_param(old: &CellShape, _which: &str) -> f64 {
    // Switching shapes resets the parameter to the new shape's default
    // unless the old shape already carried the matching one.
    match old {
        CellShape::CenteredSquare { a } => *a,
        CellShape::CrossChannel { w } => *w,
        CellShape::Stripe { theta } => *theta,
        CellShape::Empty => 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default_config() {
        let cfg = Config::from_text("").unwrap();
        assert_eq!(cfg.setup.run.epsilon_inv, 4);
        assert_eq!(cfg.snapshots, vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let err = Config::from_text("physics.Q = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(err.to_string().contains("physics.Q"), "{err}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = Config::from_text("run.dt = 1e-3\nrun.dt = 1e-4\n").unwrap_err();
        assert!(err.to_string().contains("already set"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = Config::from_text("# a comment\n\nrun.dt = 0.01 # trailing\n").unwrap();
        assert_eq!(cfg.setup.run.dt, 0.01);
    }

    #[test]
    fn shape_switch_and_param() {
        let cfg =
            Config::from_text("geometry.shape = stripe\ngeometry.theta = 0.25\n").unwrap();
        assert_eq!(cfg.setup.shape, CellShape::Stripe { theta: 0.25 });
        let err = Config::from_text("geometry.theta = 0.25\n").unwrap_err();
        assert!(err.to_string().contains("stripe"), "{err}");
    }

    #[test]
    fn canonical_echo_roundtrips() {
        let text = "run.dt = 0.002\nphysics.G.K = 2.5\ninit.C_extra.Cl = 144\n";
        let cfg = Config::from_text(text).unwrap();
        let echo = cfg.canonical();
        let reparsed = Config::from_text(&echo).unwrap();
        assert_eq!(reparsed.canonical(), echo);
        assert_eq!(reparsed.sha256(), cfg.sha256());
        assert_eq!(reparsed.setup.physical.conductances[1], 2.5);
    }

    #[test]
    fn snapshot_steps_checks_divisibility() {
        let cfg = Config::from_text("run.T_end = 0.5\nrun.dt = 1e-3\n").unwrap();
        assert_eq!(cfg.snapshot_steps().unwrap(), vec![125, 250, 500]);
        let bad = Config::from_text("run.snapshots = 0.3\nrun.T_end = 1\nrun.dt = 0.007\n")
            .unwrap();
        assert!(bad.snapshot_steps().is_err());
    }

    #[test]
    fn hash_is_stable_across_formatting() {
        let a = Config::from_text("run.dt = 0.001\n").unwrap();
        let b = Config::from_text("  run.dt   =  1e-3  # same\n").unwrap();
        assert_eq!(a.sha256(), b.sha256());
    }
}
