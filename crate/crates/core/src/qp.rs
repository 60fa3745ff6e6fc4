//! Sparse convex QP solver.
//!
//! Solves problems of the form
//!
//! ```text
//! minimize   ½ xᵀPx + qᵀx
//! subject to l ≤ Ax ≤ u        (equalities encoded as l = u rows)
//! ```
//!
//! with a first-order operator-splitting (ADMM) iteration followed by a
//! direct-factorization polish step on the detected active set, which brings
//! KKT residuals down to the configured tolerance. The KKT systems are
//! factored with a bandwidth-reducing (reverse Cuthill-McKee) permutation and
//! a banded LDLᵀ, which keeps the block-banded multiple-shooting problems
//! produced by the MPC transcriptions cheap to factor and re-factor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("singular KKT system")]
    SingularKkt,
    #[error("non-finite problem data")]
    NonFinite,
    #[error("malformed problem dump: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
    DualInfeasible,
}

/// Compressed sparse column matrix; duplicate triplets are summed on ingest.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, col_ptr: vec![0; ncols + 1], row_idx: vec![], values: vec![] }
    }

    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
        for &(i, j, v) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i},{j}) out of bounds");
            cols[j].push((i, v));
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in cols.iter_mut() {
            col.sort_by_key(|&(i, _)| i);
            let mut last: Option<usize> = None;
            for &(i, v) in col.iter() {
                if last == Some(i) {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(i);
                    values.push(v);
                    last = Some(i);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self { nrows, ncols, col_ptr, row_idx, values }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if m[(i, j)] != 0.0 {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &t)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.iter() {
            m[(i, j)] += v;
        }
        m
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            (self.col_ptr[j]..self.col_ptr[j + 1]).map(move |k| (self.row_idx[k], j, self.values[k]))
        })
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.nrows);
        for j in 0..self.ncols {
            let xj = x[j];
            if xj != 0.0 {
                for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                    y[self.row_idx[k]] += self.values[k] * xj;
                }
            }
        }
        y
    }

    pub fn tr_matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.ncols);
        for j in 0..self.ncols {
            let mut acc = 0.0;
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc += self.values[k] * x[self.row_idx[k]];
            }
            y[j] = acc;
        }
        y
    }

    /// Symmetrized copy (M + Mᵀ)/2; the solver applies this to cost Hessians.
    pub fn symmetrized(&self) -> SparseMatrix {
        assert_eq!(self.nrows, self.ncols);
        let mut t = Vec::with_capacity(2 * self.values.len());
        for (i, j, v) in self.iter() {
            t.push((i, j, 0.5 * v));
            t.push((j, i, 0.5 * v));
        }
        SparseMatrix::from_triplets(self.nrows, self.ncols, &t)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Cost Hessian (symmetrized on ingest by the solver).
    pub p: SparseMatrix,
    pub q: DVector<f64>,
    pub a: SparseMatrix,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.q.len();
        let m = self.l.len();
        if self.p.nrows != n || self.p.ncols != n {
            return Err(QpError::Dim(format!("P is {}x{}, expected {n}x{n}", self.p.nrows, self.p.ncols)));
        }
        if self.a.nrows != m || self.a.ncols != n {
            return Err(QpError::Dim(format!("A is {}x{}, expected {m}x{n}", self.a.nrows, self.a.ncols)));
        }
        if self.u.len() != m {
            return Err(QpError::Dim("l/u length mismatch".into()));
        }
        if !self.p.is_finite() || !self.a.is_finite() || !self.q.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite);
        }
        for i in 0..m {
            if self.l[i] > self.u[i] {
                return Err(QpError::Dim(format!("l[{i}] > u[{i}]")));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&self.p.matvec(x)) + self.q.dot(x)
    }

    /// Writes the problem in a sparse-triplet text format (one record per
    /// line: `P i j v`, `q i v`, `A i j v`, `b i l u`), for debugging dumps.
    pub fn write_text<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "qp {} {}", self.q.len(), self.l.len())?;
        for (i, j, v) in self.p.iter() {
            writeln!(w, "P {i} {j} {v:.17e}")?;
        }
        for i in 0..self.q.len() {
            if self.q[i] != 0.0 {
                writeln!(w, "q {i} {:.17e}", self.q[i])?;
            }
        }
        for (i, j, v) in self.a.iter() {
            writeln!(w, "A {i} {j} {v:.17e}")?;
        }
        for i in 0..self.l.len() {
            writeln!(w, "b {i} {:.17e} {:.17e}", self.l[i], self.u[i])?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: &mut R) -> Result<Self, QpError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| QpError::Parse("empty dump".into()))?
            .map_err(|e| QpError::Parse(e.to_string()))?;
        let mut it = header.split_whitespace();
        if it.next() != Some("qp") {
            return Err(QpError::Parse("missing qp header".into()));
        }
        let n: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| QpError::Parse("bad n".into()))?;
        let m: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| QpError::Parse("bad m".into()))?;
        let mut pt = Vec::new();
        let mut at = Vec::new();
        let mut q = DVector::zeros(n);
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for line in lines {
            let line = line.map_err(|e| QpError::Parse(e.to_string()))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let bad = || QpError::Parse(format!("bad record: {line}"));
            match f[0] {
                "P" | "A" if f.len() == 4 => {
                    let i = f[1].parse().map_err(|_| bad())?;
                    let j = f[2].parse().map_err(|_| bad())?;
                    let v = f[3].parse().map_err(|_| bad())?;
                    if f[0] == "P" { pt.push((i, j, v)) } else { at.push((i, j, v)) }
                }
                "q" if f.len() == 3 => {
                    let i: usize = f[1].parse().map_err(|_| bad())?;
                    q[i] = f[2].parse().map_err(|_| bad())?;
                }
                "b" if f.len() == 4 => {
                    let i: usize = f[1].parse().map_err(|_| bad())?;
                    l[i] = f[2].parse().map_err(|_| bad())?;
                    u[i] = f[3].parse().map_err(|_| bad())?;
                }
                _ => return Err(bad()),
            }
        }
        Ok(QpProblem {
            p: SparseMatrix::from_triplets(n, n, &pt),
            q,
            a: SparseMatrix::from_triplets(m, n, &at),
            l,
            u,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSettings {
    /// Target KKT residual (primal and dual) for a `Solved` status.
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation parameter.
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 4000, rho: 0.1, sigma: 1e-6, alpha: 1.6, adaptive_rho: true, polish: true }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub primal_res: f64,
    pub dual_res: f64,
    pub iterations: usize,
    pub objective: f64,
}

// ---------------------------------------------------------------------------
// Banded LDLᵀ with reverse Cuthill-McKee reordering.
// ---------------------------------------------------------------------------

/// Reverse Cuthill-McKee ordering of a symmetric sparsity pattern given as an
/// adjacency list. Returns `perm` with `perm[old] = new`.
fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let degree: Vec<usize> = adj.iter().map(|a| a.len()).collect();

    let bfs_farthest = |start: usize, visited_mask: &[bool]| -> usize {
        let mut seen = visited_mask.to_vec();
        let mut frontier = vec![start];
        seen[start] = true;
        let mut last = start;
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for &v in &frontier {
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        next.push(w);
                    }
                }
            }
            if let Some(&v) = next.iter().min_by_key(|&&v| degree[v]) {
                last = v;
            }
            frontier = next;
        }
        last
    };

    while order.len() < n {
        // Pseudo-peripheral start for the next component.
        let seed = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| degree[v]).unwrap();
        let start = bfs_farthest(bfs_farthest(seed, &visited), &visited);

        let mut queue = std::collections::VecDeque::new();
        queue.push_back(start);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| degree[w]);
            for w in nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    let mut perm = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        perm[old] = new;
    }
    perm
}

/// Symmetric banded matrix (lower triangle stored row-wise) with an LDLᵀ
/// factorization in place. No pivoting: intended for quasi-definite KKT
/// matrices where the factorization exists with 1×1 pivots.
struct BandedLdl {
    n: usize,
    bw: usize,
    /// `band[i * (bw+1) + (i - j)]` holds entry (i, j), j ∈ [i-bw, i].
    band: Vec<f64>,
    perm: Vec<usize>,
}

impl BandedLdl {
    /// Builds and factors the permuted matrix given by symmetric triplets
    /// (lower or both triangles accepted; duplicates are summed).
    fn factor(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self, QpError> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(i, j, _) in entries {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        let perm = reverse_cuthill_mckee(&adj);

        let mut bw = 0usize;
        for &(i, j, _) in entries {
            bw = bw.max(perm[i].abs_diff(perm[j]));
        }
        let mut band = vec![0.0; n * (bw + 1)];
        for &(i, j, v) in entries {
            let (pi, pj) = (perm[i], perm[j]);
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            if i == j || pi != pj {
                band[r * (bw + 1) + (r - c)] += v;
            } else {
                // Off-diagonal entry mapped onto the diagonal cannot happen
                // since perm is a bijection.
                unreachable!();
            }
        }

        let mut f = Self { n, bw, band, perm };
        f.ldl_in_place()?;
        Ok(f)
    }

    fn ldl_in_place(&mut self) -> Result<(), QpError> {
        let (n, bw) = (self.n, self.bw);
        let stride = bw + 1;
        let mut max_diag = 0.0f64;
        for i in 0..n {
            max_diag = max_diag.max(self.band[i * stride].abs());
        }
        let pivot_floor = 1e-300f64.max(max_diag * 1e-16);
        for j in 0..n {
            let j0 = j.saturating_sub(bw);
            let mut d = self.band[j * stride];
            for k in j0..j {
                let ljk = self.band[j * stride + (j - k)];
                d -= ljk * ljk * self.band[k * stride];
            }
            if d.abs() < pivot_floor || !d.is_finite() {
                return Err(QpError::SingularKkt);
            }
            self.band[j * stride] = d;
            let i_end = (j + bw).min(n - 1);
            for i in (j + 1)..=i_end {
                let mut v = self.band[i * stride + (i - j)];
                let k0 = j0.max(i.saturating_sub(bw));
                for k in k0..j {
                    v -= self.band[i * stride + (i - k)] * self.band[j * stride + (j - k)] * self.band[k * stride];
                }
                self.band[i * stride + (i - j)] = v / d;
            }
        }
        Ok(())
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let (n, bw) = (self.n, self.bw);
        let stride = bw + 1;
        let mut x = DVector::zeros(n);
        for i in 0..n {
            x[self.perm[i]] = rhs[i];
        }
        // L y = b
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let mut v = x[i];
            for j in j0..i {
                v -= self.band[i * stride + (i - j)] * x[j];
            }
            x[i] = v;
        }
        // D z = y
        for i in 0..n {
            x[i] /= self.band[i * stride];
        }
        // Lᵀ x = z
        for i in (0..n).rev() {
            let i_end = (i + bw).min(n - 1);
            let mut v = x[i];
            for j in (i + 1)..=i_end {
                v -= self.band[j * stride + (j - i)] * x[j];
            }
            x[i] = v;
        }
        let mut out = DVector::zeros(n);
        for i in 0..n {
            out[i] = x[self.perm[i]];
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Equality-constrained KKT systems.
// ---------------------------------------------------------------------------

/// Factored regularized KKT system
/// `[[H + δI, Aᵀ], [A, −δI]]`
/// reusable across right-hand sides; iterative refinement removes the
/// regularization error. Used for the QP polish step and for parametric
/// sensitivity extraction.
pub struct EqualityKkt {
    factor: BandedLdl,
    h: SparseMatrix,
    a: SparseMatrix,
    n: usize,
    m: usize,
}

impl EqualityKkt {
    const REG: f64 = 1e-9;

    pub fn factor(h: &SparseMatrix, a: &SparseMatrix) -> Result<Self, QpError> {
        let (n, m) = (h.ncols, a.nrows);
        if h.nrows != n || a.ncols != n {
            return Err(QpError::Dim("KKT blocks disagree".into()));
        }
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, v) in h.iter() {
            if i >= j {
                entries.push((i, j, v));
            }
        }
        for (i, j, v) in a.iter() {
            entries.push((n + i, j, v));
        }
        for i in 0..n {
            entries.push((i, i, Self::REG));
        }
        for i in 0..m {
            entries.push((n + i, n + i, -Self::REG));
        }
        let factor = BandedLdl::factor(n + m, &entries)?;
        Ok(Self { factor, h: h.symmetrized(), a: a.clone(), n, m })
    }

    /// Solves `[[H, Aᵀ],[A, 0]]·[x; λ] = [−g; b]`, refining away the
    /// regularization. Errors if the refined residual indicates a (near-)
    /// singular unregularized system.
    pub fn solve(&self, g: &DVector<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), QpError> {
        assert_eq!(g.len(), self.n);
        assert_eq!(b.len(), self.m);
        let mut rhs = DVector::zeros(self.n + self.m);
        rhs.rows_mut(0, self.n).copy_from(&(-g));
        rhs.rows_mut(self.n, self.m).copy_from(b);

        let mut sol = self.factor.solve(&rhs);
        let scale = 1.0 + rhs.amax();
        for _ in 0..3 {
            let r = &rhs - self.apply_unregularized(&sol);
            if r.amax() < 1e-12 * scale {
                break;
            }
            sol += self.factor.solve(&r);
        }
        let res = (&rhs - self.apply_unregularized(&sol)).amax();
        if !res.is_finite() || res > 1e-6 * scale || sol.amax() > 1e12 * scale {
            return Err(QpError::SingularKkt);
        }
        let x = sol.rows(0, self.n).into_owned();
        let lam = sol.rows(self.n, self.m).into_owned();
        Ok((x, lam))
    }

    fn apply_unregularized(&self, v: &DVector<f64>) -> DVector<f64> {
        let x = v.rows(0, self.n).into_owned();
        let lam = v.rows(self.n, self.m).into_owned();
        let mut out = DVector::zeros(self.n + self.m);
        let top = self.h.matvec(&x) + self.a.tr_matvec(&lam);
        out.rows_mut(0, self.n).copy_from(&top);
        out.rows_mut(self.n, self.m).copy_from(&self.a.matvec(&x));
        out
    }
}

/// Dense equality-constrained KKT solve:
/// `[[H, A_eqᵀ],[A_eq, 0]]·[x; λ] = [−g; b]`.
pub fn solve_kkt_equality(
    h: &DMatrix<f64>,
    a_eq: &DMatrix<f64>,
    g: &DVector<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let n = h.ncols();
    let m = a_eq.nrows();
    if h.nrows() != n || a_eq.ncols() != n || g.len() != n || b.len() != m {
        return Err(QpError::Dim("KKT blocks disagree".into()));
    }
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    kkt.view_mut((0, n), (n, m)).copy_from(&a_eq.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(a_eq);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g));
    rhs.rows_mut(n, m).copy_from(b);
    let scale = kkt.amax().max(1.0);
    let lu = kkt.full_piv_lu();
    let u_diag_min = (0..n + m).map(|i| lu.u()[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if u_diag_min < 1e-12 * scale {
        return Err(QpError::SingularKkt);
    }
    let sol = lu.solve(&rhs).ok_or(QpError::SingularKkt)?;
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

// ---------------------------------------------------------------------------
// ADMM solver.
// ---------------------------------------------------------------------------

const EQ_RHO_SCALE: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const INFEAS_EPS: f64 = 1e-9;

/// Reusable solver instance; keeps warm-start state across calls so that
/// successive MPC solves of slowly-varying problems converge in a handful of
/// iterations.
pub struct QpSolver {
    pub settings: QpSettings,
    warm: Option<(DVector<f64>, DVector<f64>, DVector<f64>)>,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings, warm: None }
    }

    pub fn clear_warm_start(&mut self) {
        self.warm = None;
    }

    pub fn warm_start(&mut self, x: DVector<f64>, y: DVector<f64>) {
        let z = DVector::zeros(y.len());
        self.warm = Some((x, y, z));
    }

    pub fn solve(&mut self, prob: &QpProblem) -> Result<QpSolution, QpError> {
        prob.validate()?;
        let p = prob.p.symmetrized();
        let a = &prob.a;
        let n = prob.q.len();
        let m = prob.l.len();
        let s = self.settings.clone();

        let (mut x, mut y, mut z, warm_started) = match self.warm.take() {
            Some((x, y, z)) if x.len() == n && y.len() == m => {
                let z = if z.iter().any(|v| *v != 0.0) { z } else { a.matvec(&x) };
                (x, y, z, true)
            }
            _ => (DVector::zeros(n), DVector::zeros(m), DVector::zeros(m), false),
        };

        let mut rho_bar = s.rho;
        let rho_vec = |rho_bar: f64| -> DVector<f64> {
            DVector::from_fn(m, |i, _| {
                if (prob.u[i] - prob.l[i]).abs() < 1e-12 { rho_bar * EQ_RHO_SCALE } else { rho_bar }
            })
        };
        let mut rho = rho_vec(rho_bar);
        let mut factor = Self::factor_kkt(&p, a, s.sigma, &rho)?;

        let mut best: Option<QpSolution> = None;
        // First-order target at which polishing is attempted. The active set
        // is usually identified at loose accuracy and the polish step then
        // reaches machine precision directly; when it does not, the target is
        // tightened and iteration continues, so starting loose only trades
        // extra polish attempts for far fewer ADMM sweeps.
        let mut admm_target = 1e-3f64.max(s.tol);
        let mut x_prev = x.clone();
        let mut y_prev = y.clone();

        let mut iter = 0usize;
        while iter < s.max_iter {
            iter += 1;
            // x̃/ν step.
            let mut rhs = DVector::zeros(n + m);
            for i in 0..n {
                rhs[i] = s.sigma * x[i] - prob.q[i];
            }
            for i in 0..m {
                rhs[n + i] = z[i] - y[i] / rho[i];
            }
            let sol = factor.solve(&rhs);
            let x_tilde = sol.rows(0, n).into_owned();
            let nu = sol.rows(n, m).into_owned();
            let mut z_tilde = z.clone();
            for i in 0..m {
                z_tilde[i] += (nu[i] - y[i]) / rho[i];
            }
            // Over-relaxed updates.
            let z_old = z.clone();
            for i in 0..n {
                x[i] = s.alpha * x_tilde[i] + (1.0 - s.alpha) * x[i];
            }
            for i in 0..m {
                let zr = s.alpha * z_tilde[i] + (1.0 - s.alpha) * z_old[i];
                z[i] = (zr + y[i] / rho[i]).clamp(prob.l[i], prob.u[i]);
                y[i] += rho[i] * (zr - z[i]);
            }

            // Residuals.
            let ax = a.matvec(&x);
            let px = p.matvec(&x);
            let aty = a.tr_matvec(&y);
            let rp = (&ax - &z).amax();
            let rd = (&px + &prob.q + &aty).amax();
            let eps_p = admm_target * (1.0 + ax.amax().max(z.amax()));
            let eps_d = admm_target * (1.0 + px.amax().max(aty.amax()).max(prob.q.amax()));

            // Polish is a verified active-set guess: it only returns a
            // solution that passes KKT, sign, and feasibility checks. On top
            // of the first-order target, attempt it speculatively during the
            // first iterations of a warm-started solve — consecutive MPC
            // problems usually share an active set, so the carried-over duals
            // identify it long before the ADMM residuals settle.
            let target_met = rp <= eps_p && rd <= eps_d;
            if target_met || (warm_started && iter <= 3) {
                let polished = if s.polish { self.polish(prob, &p, &x, &y) } else { None };
                if std::env::var_os("QP_TRACE").is_some() {
                    eprintln!(
                        "iter {iter}: target {admm_target:.1e} (met {target_met}, rp={rp:.2e} rd={rd:.2e}), polish {}",
                        polished.is_some()
                    );
                }
                if polished.is_some() || target_met {
                    let mut candidate =
                        polished.unwrap_or_else(|| Self::package(prob, &p, x.clone(), y.clone(), iter));
                    candidate.iterations = iter;
                    if candidate.primal_res <= s.tol * (1.0 + ax.amax().max(z.amax()))
                        && candidate.dual_res <= s.tol * (1.0 + px.amax().max(prob.q.amax()))
                    {
                        self.warm = Some((candidate.x.clone(), candidate.y.clone(), z));
                        return Ok(QpSolution { status: QpStatus::Solved, ..candidate });
                    }
                    if target_met {
                        // Polish did not reach tolerance: tighten the
                        // first-order target and keep iterating.
                        best = Some(candidate);
                        if admm_target <= s.tol {
                            break;
                        }
                        admm_target = (admm_target * 1e-2).max(s.tol);
                    }
                }
            }

            // Infeasibility certificates.
            if iter % 25 == 0 {
                let dx = &x - &x_prev;
                let dy = &y - &y_prev;
                if Self::primal_infeasible(prob, &dy) {
                    return Ok(QpSolution {
                        x,
                        y: dy,
                        status: QpStatus::PrimalInfeasible,
                        primal_res: rp,
                        dual_res: rd,
                        iterations: iter,
                        objective: f64::NAN,
                    });
                }
                if Self::dual_infeasible(prob, &p, &dx) {
                    return Ok(QpSolution {
                        x: dx,
                        y,
                        status: QpStatus::DualInfeasible,
                        primal_res: rp,
                        dual_res: rd,
                        iterations: iter,
                        objective: f64::NAN,
                    });
                }
                x_prev = x.clone();
                y_prev = y.clone();

                if s.adaptive_rho && rp > 0.0 && rd > 0.0 {
                    let scale = ((rp / (1.0 + ax.amax().max(z.amax())))
                        / (rd / (1.0 + px.amax().max(aty.amax()).max(prob.q.amax()))))
                    .sqrt();
                    if scale > 5.0 || scale < 0.2 {
                        rho_bar = (rho_bar * scale).clamp(RHO_MIN, RHO_MAX);
                        rho = rho_vec(rho_bar);
                        factor = Self::factor_kkt(&p, a, s.sigma, &rho)?;
                    }
                }
            }
        }

        let fallback = best.unwrap_or_else(|| Self::package(prob, &p, x.clone(), y.clone(), iter));
        self.warm = Some((fallback.x.clone(), fallback.y.clone(), z));
        Ok(QpSolution { status: QpStatus::MaxIter, ..fallback })
    }

    fn factor_kkt(p: &SparseMatrix, a: &SparseMatrix, sigma: f64, rho: &DVector<f64>) -> Result<BandedLdl, QpError> {
        let n = p.ncols;
        let m = a.nrows;
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, v) in p.iter() {
            if i >= j {
                entries.push((i, j, v));
            }
        }
        for i in 0..n {
            entries.push((i, i, sigma));
        }
        for (i, j, v) in a.iter() {
            entries.push((n + i, j, v));
        }
        for i in 0..m {
            entries.push((n + i, n + i, -1.0 / rho[i]));
        }
        BandedLdl::factor(n + m, &entries)
    }

    fn package(prob: &QpProblem, p: &SparseMatrix, x: DVector<f64>, y: DVector<f64>, iterations: usize) -> QpSolution {
        let ax = prob.a.matvec(&x);
        let rp = (&ax - Self::project(&ax, &prob.l, &prob.u)).amax();
        let stationarity = (p.matvec(&x) + &prob.q + prob.a.tr_matvec(&y)).amax();
        // Complementarity / dual-sign violation: a positive multiplier must
        // sit on a finite upper bound, a negative one on a finite lower.
        let mut comp: f64 = 0.0;
        for i in 0..y.len() {
            if y[i] > 0.0 {
                comp = comp.max(if prob.u[i].is_finite() { y[i] * (prob.u[i] - ax[i]).abs() } else { y[i] });
            } else if y[i] < 0.0 {
                comp = comp.max(if prob.l[i].is_finite() { -y[i] * (ax[i] - prob.l[i]).abs() } else { -y[i] });
            }
        }
        let objective = 0.5 * x.dot(&p.matvec(&x)) + prob.q.dot(&x);
        QpSolution {
            x,
            y,
            status: QpStatus::MaxIter,
            primal_res: rp,
            dual_res: stationarity.max(comp),
            iterations,
            objective,
        }
    }

    fn project(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| v[i].clamp(l[i], u[i]))
    }

    /// Direct solve on the active set detected from the ADMM duals.
    fn polish(&self, prob: &QpProblem, p: &SparseMatrix, x: &DVector<f64>, y: &DVector<f64>) -> Option<QpSolution> {
        let m = prob.l.len();
        let mut rows = Vec::new();
        let mut lower_active = Vec::new();
        let mut b_act = Vec::new();
        for i in 0..m {
            let eq = (prob.u[i] - prob.l[i]).abs() < 1e-12;
            if eq {
                rows.push(i);
                lower_active.push(false);
                b_act.push(prob.u[i]);
            } else if y[i] < -1e-10 {
                rows.push(i);
                lower_active.push(true);
                b_act.push(prob.l[i]);
            } else if y[i] > 1e-10 {
                rows.push(i);
                lower_active.push(false);
                b_act.push(prob.u[i]);
            }
        }
        let n = prob.q.len();
        let mut at = Vec::new();
        for (new_i, &old_i) in rows.iter().enumerate() {
            for j in 0..prob.a.ncols {
                for k in prob.a.col_ptr[j]..prob.a.col_ptr[j + 1] {
                    if prob.a.row_idx[k] == old_i {
                        at.push((new_i, j, prob.a.values[k]));
                    }
                }
            }
        }
        let a_act = SparseMatrix::from_triplets(rows.len(), n, &at);
        let kkt = EqualityKkt::factor(p, &a_act).ok()?;
        let (xp, nu) = kkt.solve(&prob.q, &DVector::from_vec(b_act)).ok()?;
        // Multiplier signs must match the bound each row sits on.
        for (k, &i) in rows.iter().enumerate() {
            let eq = (prob.u[i] - prob.l[i]).abs() < 1e-12;
            if !eq && ((lower_active[k] && nu[k] > 1e-8) || (!lower_active[k] && nu[k] < -1e-8)) {
                return None;
            }
        }
        // Feasibility of the polished point on inactive rows.
        let axp = prob.a.matvec(&xp);
        for i in 0..m {
            let span = 1e-7 * (1.0 + prob.l[i].abs().max(prob.u[i].abs()));
            if axp[i] < prob.l[i] - span || axp[i] > prob.u[i] + span {
                return None;
            }
        }
        let mut yp = DVector::zeros(m);
        for (k, &i) in rows.iter().enumerate() {
            yp[i] = nu[k];
        }
        let candidate = Self::package(prob, p, xp, yp, 0);
        let unpolished = Self::package(prob, p, x.clone(), y.clone(), 0);
        if candidate.primal_res.max(candidate.dual_res) <= unpolished.primal_res.max(unpolished.dual_res) {
            Some(candidate)
        } else {
            None
        }
    }

    fn primal_infeasible(prob: &QpProblem, dy: &DVector<f64>) -> bool {
        let norm = dy.amax();
        if norm < 1e-12 {
            return false;
        }
        let aty = prob.a.tr_matvec(dy);
        if aty.amax() > INFEAS_EPS.sqrt() * norm {
            return false;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            if dy[i] > 0.0 {
                if !prob.u[i].is_finite() {
                    return false;
                }
                support += prob.u[i] * dy[i];
            } else if dy[i] < 0.0 {
                if !prob.l[i].is_finite() {
                    return false;
                }
                support += prob.l[i] * dy[i];
            }
        }
        support < -INFEAS_EPS.sqrt() * norm
    }

    fn dual_infeasible(prob: &QpProblem, p: &SparseMatrix, dx: &DVector<f64>) -> bool {
        let norm = dx.amax();
        if norm < 1e-12 {
            return false;
        }
        let eps = INFEAS_EPS.sqrt() * norm;
        if p.matvec(dx).amax() > eps || prob.q.dot(dx) > -eps {
            return false;
        }
        let adx = prob.a.matvec(dx);
        for i in 0..adx.len() {
            if (adx[i] > eps && prob.u[i].is_finite()) || (adx[i] < -eps && prob.l[i].is_finite()) {
                return false;
            }
        }
        true
    }
}
