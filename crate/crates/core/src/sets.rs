//! Convex set arithmetic for tube MPC: axis-aligned boxes, H-polytopes,
//! Minkowski/Pontryagin operations, Monte-Carlo tube estimation and the tube
//! sampling schemes used for data augmentation.

use crate::qp::{QpProblem, QpSettings, QpSolver, QpStatus, SparseMatrix};
use crate::sim::DisturbanceSet;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SetError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("operation produced an empty set")]
    EmptyResult,
    #[error("non-finite values encountered: {0}")]
    NonFinite(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("dimension {0} too large for dense vertex enumeration")]
    Overflow(usize),
}

/// Axis-aligned box `{x | lower ≤ x ≤ upper}`. The constructor enforces
/// `lower ≤ upper` componentwise; an empty intersection/difference is
/// reported as [`SetError::EmptyResult`] by the producing operation rather
/// than as a degenerate value.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AxisBox {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl AxisBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, SetError> {
        if lower.len() != upper.len() {
            return Err(SetError::DimensionMismatch(format!(
                "lower has dim {}, upper has dim {}",
                lower.len(),
                upper.len()
            )));
        }
        if !lower.iter().chain(upper.iter()).all(|v| v.is_finite()) {
            return Err(SetError::NonFinite("box bounds".into()));
        }
        for i in 0..lower.len() {
            if lower[i] > upper[i] {
                return Err(SetError::EmptyResult);
            }
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric box `[−h, h]` from nonnegative halfwidths.
    pub fn symmetric(halfwidths: &DVector<f64>) -> Self {
        Self { lower: -halfwidths.clone(), upper: halfwidths.clone() }
    }

    pub fn zero(dim: usize) -> Self {
        Self { lower: DVector::zeros(dim), upper: DVector::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn halfwidths(&self) -> DVector<f64> {
        (&self.upper - &self.lower) * 0.5
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && (0..x.len()).all(|i| x[i] >= self.lower[i] - tol && x[i] <= self.upper[i] + tol)
    }

    /// Componentwise scaling of both bounds, e.g. for inflation factors.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { lower: &self.lower * factor, upper: &self.upper * factor }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&BoxJson {
            dim: self.dim(),
            lower: self.lower.iter().copied().collect(),
            upper: self.upper.iter().copied().collect(),
        })
        .expect("box serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, SetError> {
        let raw: BoxJson =
            serde_json::from_str(s).map_err(|e| SetError::Precondition(format!("bad box JSON: {e}")))?;
        if raw.lower.len() != raw.dim || raw.upper.len() != raw.dim {
            return Err(SetError::DimensionMismatch("JSON dim field disagrees with arrays".into()));
        }
        Self::new(DVector::from_vec(raw.lower), DVector::from_vec(raw.upper))
    }
}

#[derive(Serialize, Deserialize)]
struct BoxJson {
    dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// H-polytope `{x | Hx ≤ h}`.
#[derive(Debug, Clone)]
pub struct Polytope {
    pub h_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
}

impl Polytope {
    pub fn new(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self, SetError> {
        if h_mat.nrows() != h_vec.len() {
            return Err(SetError::DimensionMismatch("H rows vs h length".into()));
        }
        for i in 0..h_mat.nrows() {
            if h_mat.row(i).amax() == 0.0 {
                return Err(SetError::Precondition(format!("row {i} of H is zero")));
            }
        }
        Ok(Self { h_mat, h_vec })
    }

    /// Box as a polytope: rows `x_i ≤ u_i` then `−x_i ≤ −l_i`.
    pub fn from_box(b: &AxisBox) -> Self {
        let n = b.dim();
        let mut h_mat = DMatrix::zeros(2 * n, n);
        let mut h_vec = DVector::zeros(2 * n);
        for i in 0..n {
            h_mat[(i, i)] = 1.0;
            h_vec[i] = b.upper[i];
            h_mat[(n + i, i)] = -1.0;
            h_vec[n + i] = -b.lower[i];
        }
        Self { h_mat, h_vec }
    }

    pub fn dim(&self) -> usize {
        self.h_mat.ncols()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let hx = &self.h_mat * x;
        (0..self.h_vec.len()).all(|i| hx[i] <= self.h_vec[i] + tol)
    }

    /// Feasibility check by solving min ½‖x‖² s.t. Hx ≤ h.
    pub fn is_empty(&self) -> bool {
        let n = self.dim();
        let m = self.h_vec.len();
        let prob = QpProblem {
            p: SparseMatrix::from_dense(&DMatrix::identity(n, n)),
            q: DVector::zeros(n),
            a: SparseMatrix::from_dense(&self.h_mat),
            l: DVector::from_element(m, f64::NEG_INFINITY),
            u: self.h_vec.clone(),
        };
        match QpSolver::new(QpSettings { tol: 1e-6, ..Default::default() }).solve(&prob) {
            Ok(sol) => sol.status == QpStatus::PrimalInfeasible,
            Err(_) => true,
        }
    }
}

pub fn minkowski_sum_box(a: &AxisBox, b: &AxisBox) -> Result<AxisBox, SetError> {
    if a.dim() != b.dim() {
        return Err(SetError::DimensionMismatch(format!("{} vs {}", a.dim(), b.dim())));
    }
    AxisBox::new(&a.lower + &b.lower, &a.upper + &b.upper)
}

/// Pontryagin difference of two boxes, `a ⊖ b`.
pub fn pontryagin_diff_box(a: &AxisBox, b: &AxisBox) -> Result<AxisBox, SetError> {
    if a.dim() != b.dim() {
        return Err(SetError::DimensionMismatch(format!("{} vs {}", a.dim(), b.dim())));
    }
    AxisBox::new(&a.lower - &b.lower, &a.upper - &b.upper)
}

/// Pontryagin difference `p ⊖ b`: every row i of the polytope is tightened by
/// the support function of `b` along its normal,
/// `h_i ← h_i − Σ_j |H_ij|·halfwidth_j − H_i·center`.
pub fn pontryagin_diff_polytope_box(p: &Polytope, b: &AxisBox) -> Result<Polytope, SetError> {
    if p.dim() != b.dim() {
        return Err(SetError::DimensionMismatch(format!("{} vs {}", p.dim(), b.dim())));
    }
    let hw = b.halfwidths();
    let c = b.center();
    let mut h_vec = p.h_vec.clone();
    for i in 0..h_vec.len() {
        let row = p.h_mat.row(i);
        let mut support = 0.0;
        for j in 0..p.dim() {
            support += row[j].abs() * hw[j] + row[j] * c[j];
        }
        h_vec[i] -= support;
    }
    let tightened = Polytope { h_mat: p.h_mat.clone(), h_vec };
    if tightened.is_empty() {
        return Err(SetError::EmptyResult);
    }
    Ok(tightened)
}

/// Outer bounding box of the image `K·b` (interval arithmetic).
pub fn linear_map_box(k: &DMatrix<f64>, b: &AxisBox) -> Result<AxisBox, SetError> {
    if k.ncols() != b.dim() {
        return Err(SetError::DimensionMismatch(format!("K has {} cols, box dim {}", k.ncols(), b.dim())));
    }
    let c = k * b.center();
    let hw_in = b.halfwidths();
    let hw = DVector::from_fn(k.nrows(), |i, _| (0..k.ncols()).map(|j| k[(i, j)].abs() * hw_in[j]).sum());
    AxisBox::new(&c - &hw, &c + &hw)
}

/// Monte-Carlo tube estimation: rolls out the closed-loop deviation dynamics
/// `e⁺ = closed_loop(e, f_ext, step)` from zero deviation under constant
/// per-rollout disturbances (even rollouts at the worst-case magnitude, odd
/// rollouts uniform in the set), and returns the componentwise maximum
/// |deviation|, inflated by `safety`, as a symmetric box.
pub fn estimate_tube_mc<F>(
    closed_loop: F,
    dim: usize,
    disturbance: &DisturbanceSet,
    n_rollouts: usize,
    horizon: usize,
    safety: f64,
    seed: u64,
) -> Result<AxisBox, SetError>
where
    F: Fn(&DVector<f64>, &Vector3<f64>, usize) -> DVector<f64> + Sync,
{
    if n_rollouts == 0 {
        return Err(SetError::Precondition("n_rollouts must be ≥ 1".into()));
    }
    let hw = (0..n_rollouts)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let f_ext = if k % 2 == 0 {
                disturbance.sample_at_magnitude(disturbance.f_max, &mut rng)
            } else {
                disturbance.sample(&mut rng)
            };
            let mut e = DVector::zeros(dim);
            let mut peak: DVector<f64> = DVector::zeros(dim);
            for step in 0..horizon {
                e = closed_loop(&e, &f_ext, step);
                if !e.iter().all(|v| v.is_finite()) {
                    return Err(SetError::NonFinite(format!("rollout {k} diverged at step {step}")));
                }
                for i in 0..dim {
                    peak[i] = peak[i].max(e[i].abs());
                }
            }
            Ok(peak)
        })
        .try_reduce(
            || DVector::zeros(dim),
            |a, b| Ok(DVector::from_fn(dim, |i, _| a[i].max(b[i]))),
        )?;
    Ok(AxisBox::symmetric(&(hw * safety)))
}

/// Facet-center samples: `center + tube.center ± halfwidth_i·e_i`, 2n total.
pub fn sample_tube_sparse(center: &DVector<f64>, tube: &AxisBox) -> Vec<DVector<f64>> {
    assert_eq!(center.len(), tube.dim(), "center/tube dimension mismatch");
    let c = center + tube.center();
    let hw = tube.halfwidths();
    let mut out = Vec::with_capacity(2 * tube.dim());
    for i in 0..tube.dim() {
        for sign in [1.0, -1.0] {
            let mut x = c.clone();
            x[i] += sign * hw[i];
            out.push(x);
        }
    }
    out
}

/// All 2^n vertices of `center ⊕ tube`.
pub fn sample_tube_dense(center: &DVector<f64>, tube: &AxisBox) -> Result<Vec<DVector<f64>>, SetError> {
    assert_eq!(center.len(), tube.dim(), "center/tube dimension mismatch");
    let n = tube.dim();
    if n > 20 {
        return Err(SetError::Overflow(n));
    }
    let mut out = Vec::with_capacity(1 << n);
    for mask in 0u32..(1 << n) {
        let x = DVector::from_fn(n, |i, _| {
            center[i] + if mask & (1 << i) != 0 { tube.upper[i] } else { tube.lower[i] }
        });
        out.push(x);
    }
    Ok(out)
}

/// `n_samples` i.i.d. uniform draws from `center ⊕ tube`.
pub fn sample_tube_uniform<R: Rng>(
    center: &DVector<f64>,
    tube: &AxisBox,
    n_samples: usize,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    assert_eq!(center.len(), tube.dim(), "center/tube dimension mismatch");
    assert!(n_samples >= 1, "n_samples must be ≥ 1");
    (0..n_samples)
        .map(|_| {
            DVector::from_fn(tube.dim(), |i, _| {
                if tube.upper[i] > tube.lower[i] {
                    center[i] + rng.gen_range(tube.lower[i]..tube.upper[i])
                } else {
                    center[i] + tube.lower[i]
                }
            })
        })
        .collect()
}
