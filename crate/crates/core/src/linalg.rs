//! Sparse symmetric solvers and the Picard controller shared by all solver
//! modules.
//!
//! The elliptic systems assembled by this crate are pure-Neumann (or
//! periodic) and therefore singular: constants on each connected component
//! of the coupling graph span the null space. [`solve_spd`] handles this
//! explicitly with an orthonormal null-space basis, projecting the
//! right-hand side before and the solution after conjugate gradients, so
//! singular consistency is a checked property instead of an accident.
//!
//! Determinism matters here: fixed iteration order, no data-race-dependent
//! reductions, so repeated solves are bit-identical.

use thiserror::Error;

/// Compressed sparse row matrix with symmetric structure.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets, summing duplicates.
    /// Entries are sorted by (row, col) first, so assembly is deterministic
    /// regardless of triplet order.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = triplets.to_vec();
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut vals = Vec::with_capacity(entries.len());
        let mut i = 0;
        while i < entries.len() {
            let (r, c, mut v) = entries[i];
            debug_assert!(r < n && c < n, "triplet ({r}, {c}) out of bounds");
            let mut j = i + 1;
            while j < entries.len() && entries[j].0 == r && entries[j].1 == c {
                v += entries[j].2;
                j += 1;
            }
            col_idx.push(c);
            vals.push(v);
            row_ptr[r + 1] += 1;
            i = j;
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.col_idx[k] == r {
                    d[r] += self.vals[k];
                }
            }
        }
        d
    }

    fn slot(&self, r: usize, c: usize) -> usize {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        lo + self.col_idx[lo..hi]
            .binary_search(&c)
            .expect("entry not present in sparsity pattern")
    }
}

/// A CSR matrix with a frozen sparsity pattern built from a fixed edge list
/// plus the full diagonal, refilled in place every assembly pass.
///
/// Each registered edge (p, q) owns the four pattern slots (pp, pq, qp, qq);
/// [`StencilMatrix::add_edge`] adds the symmetric difference coupling
/// `c (x_p - x_q)` seen from both rows. This keeps per-sweep reassembly
/// allocation-free and deterministic.
#[derive(Debug, Clone)]
pub struct StencilMatrix {
    csr: CsrMatrix,
    diag_slot: Vec<usize>,
    edge_slot: Vec<[usize; 4]>,
}

impl StencilMatrix {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut triplets = Vec::with_capacity(n + 4 * edges.len());
        for i in 0..n {
            triplets.push((i, i, 0.0));
        }
        for &(p, q) in edges {
            debug_assert_ne!(p, q, "self-edge in stencil");
            triplets.push((p, q, 0.0));
            triplets.push((q, p, 0.0));
        }
        let csr = CsrMatrix::from_triplets(n, &triplets);
        let diag_slot = (0..n).map(|i| csr.slot(i, i)).collect();
        let edge_slot = edges
            .iter()
            .map(|&(p, q)| {
                [
                    csr.slot(p, p),
                    csr.slot(p, q),
                    csr.slot(q, p),
                    csr.slot(q, q),
                ]
            })
            .collect();
        StencilMatrix {
            csr,
            diag_slot,
            edge_slot,
        }
    }

    pub fn clear(&mut self) {
        self.csr.vals.fill(0.0);
    }

    /// Adds the coupling `c` on edge `e`: +c to both diagonals, -c to both
    /// off-diagonals.
    #[inline]
    pub fn add_edge(&mut self, e: usize, c: f64) {
        let [pp, pq, qp, qq] = self.edge_slot[e];
        self.csr.vals[pp] += c;
        self.csr.vals[pq] -= c;
        self.csr.vals[qp] -= c;
        self.csr.vals[qq] += c;
    }

    #[inline]
    pub fn add_diag(&mut self, i: usize, c: f64) {
        self.csr.vals[self.diag_slot[i]] += c;
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.csr
    }
}

/// Orthonormal basis of the operator null space.
#[derive(Debug, Clone)]
pub struct NullSpace {
    basis: Vec<Vec<f64>>,
}

impl NullSpace {
    /// Basis of componentwise constants: one normalized indicator vector per
    /// connected component. `labels[i]` is the component of unknown `i`, or
    /// `usize::MAX` for unknowns outside all components.
    pub fn from_components(labels: &[usize], count: usize) -> Self {
        let n = labels.len();
        let mut sizes = vec![0usize; count];
        for &l in labels {
            if l != usize::MAX {
                sizes[l] += 1;
            }
        }
        let mut basis = vec![vec![0.0; n]; count];
        for (i, &l) in labels.iter().enumerate() {
            if l != usize::MAX {
                basis[l][i] = 1.0 / (sizes[l] as f64).sqrt();
            }
        }
        NullSpace { basis }
    }

    /// Orthonormalizes arbitrary spanning vectors by modified Gram-Schmidt;
    /// near-dependent vectors are dropped.
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Self {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for mut v in vectors {
            for b in &basis {
                let s = dot(b, &v);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= s * bi;
                }
            }
            let nrm = norm2(&v);
            if nrm > 1e-12 {
                for vi in &mut v {
                    *vi /= nrm;
                }
                basis.push(v);
            }
        }
        NullSpace { basis }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Removes the null-space component of `v` in place and returns the
    /// Euclidean norm of what was removed.
    pub fn project_out(&self, v: &mut [f64]) -> f64 {
        let mut removed_sq = 0.0;
        for b in &self.basis {
            let s = dot(b, v);
            removed_sq += s * s;
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= s * bi;
            }
        }
        removed_sq.sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Error, PartialEq)]
pub enum LinearError {
    #[error(
        "conjugate gradients did not converge within {iterations} iterations \
         (relative residual {rel_residual:e}, target {tol:e})"
    )]
    NotConverged {
        iterations: usize,
        rel_residual: f64,
        tol: f64,
    },
    #[error(
        "right-hand side incompatible with singular operator: null-space \
         fraction {fraction:e} exceeds limit {limit:e}"
    )]
    IncompatibleRhs { fraction: f64, limit: f64 },
    #[error("operator is not positive semidefinite: curvature p.Ap = {0:e}")]
    IndefiniteOperator(f64),
}

/// Diagnostics of one conjugate-gradient solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for symmetric positive
/// (semi-)definite systems.
///
/// If `null_space` is declared, the right-hand side and initial guess are
/// projected onto its orthogonal complement first and the solution is
/// projected after; `incompatible_limit` optionally turns a too-large
/// removed RHS fraction into [`LinearError::IncompatibleRhs`]. Convergence
/// is `||r|| <= tol * ||b_projected||` with a hard cap of `10 n` iterations.
pub fn solve_spd(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    null_space: Option<&NullSpace>,
    incompatible_limit: Option<f64>,
    tol: f64,
) -> Result<(Vec<f64>, SolveStats), LinearError> {
    let n = a.n();
    debug_assert_eq!(b.len(), n);
    debug_assert_eq!(x0.len(), n);

    let mut rhs = b.to_vec();
    if let Some(ns) = null_space {
        let bnorm_full = norm2(&rhs);
        let removed = ns.project_out(&mut rhs);
        if let Some(limit) = incompatible_limit {
            let fraction = if bnorm_full > 0.0 {
                removed / bnorm_full
            } else {
                0.0
            };
            if fraction > limit {
                return Err(LinearError::IncompatibleRhs { fraction, limit });
            }
        }
    }
    let bnorm = norm2(&rhs);
    if bnorm == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveStats {
                iterations: 0,
                rel_residual: 0.0,
            },
        ));
    }

    let mut x = x0.to_vec();
    if let Some(ns) = null_space {
        ns.project_out(&mut x);
    }

    let diag = a.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut r = vec![0.0; n];
    a.mul_vec(&x, &mut r);
    for i in 0..n {
        r[i] = rhs[i] - r[i];
    }
    if let Some(ns) = null_space {
        ns.project_out(&mut r);
    }

    let mut z: Vec<f64> = (0..n).map(|i| r[i] * inv_diag[i]).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rho = dot(&r, &z);
    let max_iter = 10 * n;
    let mut rel = norm2(&r) / bnorm;

    for iter in 1..=max_iter {
        if rel <= tol {
            if let Some(ns) = null_space {
                ns.project_out(&mut x);
            }
            return Ok((
                x,
                SolveStats {
                    iterations: iter - 1,
                    rel_residual: rel,
                },
            ));
        }
        a.mul_vec(&p, &mut q);
        let p_ap = dot(&p, &q);
        if p_ap <= 0.0 {
            return Err(LinearError::IndefiniteOperator(p_ap));
        }
        let alpha = rho / p_ap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        // Periodically re-project to stop rounding drift into the null space.
        if iter % 64 == 0 {
            if let Some(ns) = null_space {
                ns.project_out(&mut r);
            }
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rho_next = dot(&r, &z);
        let beta = rho_next / rho;
        rho = rho_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rel = norm2(&r) / bnorm;
    }

    if rel <= tol {
        if let Some(ns) = null_space {
            ns.project_out(&mut x);
        }
        return Ok((
            x,
            SolveStats {
                iterations: max_iter,
                rel_residual: rel,
            },
        ));
    }
    Err(LinearError::NotConverged {
        iterations: max_iter,
        rel_residual: rel,
        tol,
    })
}

/// Picard iteration settings; `damping` in (0, 1], 1.0 meaning undamped.
#[derive(Debug, Clone, Copy)]
pub struct PicardSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardStats {
    pub iterations: usize,
    pub last_change: f64,
}

#[derive(Debug, Error)]
pub enum PicardError<E> {
    #[error(
        "Picard iteration did not converge within {iterations} sweeps \
         (last relative change {last_change:e})"
    )]
    Divergence { iterations: usize, last_change: f64 },
    #[error(transparent)]
    Step(E),
}

/// Damped fixed-point iteration `x <- (1 - damping) x + damping step(x)`
/// until the componentwise relative change drops below `settings.tol`.
///
/// Sustained growth of the change over several consecutive sweeps aborts
/// early (the map is expanding, waiting for the cap wastes time).
pub fn picard_loop<E>(
    x0: Vec<f64>,
    settings: &PicardSettings,
    mut step: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
) -> Result<(Vec<f64>, PicardStats), PicardError<E>> {
    let mut x = x0;
    let mut prev_change = f64::INFINITY;
    let mut growth_streak = 0usize;
    for iter in 1..=settings.max_iter {
        let next = step(&x).map_err(PicardError::Step)?;
        debug_assert_eq!(next.len(), x.len());
        let mut change = 0.0f64;
        for i in 0..x.len() {
            let xi = (1.0 - settings.damping) * x[i] + settings.damping * next[i];
            change = change.max((xi - x[i]).abs() / (1.0 + xi.abs()));
            x[i] = xi;
        }
        if change <= settings.tol {
            return Ok((
                x,
                PicardStats {
                    iterations: iter,
                    last_change: change,
                },
            ));
        }
        if change > prev_change * 4.0 && change > 1.0 {
            growth_streak += 1;
            if growth_streak >= 4 {
                return Err(PicardError::Divergence {
                    iterations: iter,
                    last_change: change,
                });
            }
        } else {
            growth_streak = 0;
        }
        prev_change = change;
    }
    Err(PicardError::Divergence {
        iterations: settings.max_iter,
        last_change: prev_change,
    })
}
