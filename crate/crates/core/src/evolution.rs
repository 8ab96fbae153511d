//! Time evolution of the modal equations `D^alpha u_n + lambda_n u_n = F_n`
//! with zero initial data, by product integration of the Duhamel form
//! `u_n(t) = int_0^t (t-s)^(alpha-1) E_{alpha,alpha}(-lambda_n (t-s)^alpha) F_n(s) ds`.
//!
//! `F_n` is interpolated linearly on each panel and the kernel moments on the
//! panel are exact (differences of [`ml_kernel_primitive`]).

use crate::gamma::gamma;
use crate::mittag_leffler::{ml_kernel_primitive, MlError};
use crate::spectral::{SpectralBasis, SpectralError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error(transparent)]
    Ml(#[from] MlError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("implicit step singular at node {node} (axial mode {axial}): pivot {pivot:e}")]
    Stiffness { node: usize, axial: usize, pivot: f64 },
    #[error("Picard iteration did not converge in {sweeps} sweeps (last change {change:e})")]
    Divergence { sweeps: usize, change: f64 },
}

pub type Result<T> = std::result::Result<T, EvolutionError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridKind {
    Uniform,
    /// `t_i = T (i / M)^gamma`
    Graded { gamma: f64 },
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t_end: f64,
    pub nodes: Vec<f64>,
    pub kind: GridKind,
}

impl TimeGrid {
    pub fn uniform(t_end: f64, m: usize) -> Result<Self> {
        Self::check(t_end, m)?;
        let h = t_end / m as f64;
        let mut nodes: Vec<f64> = (0..=m).map(|i| i as f64 * h).collect();
        nodes[m] = t_end;
        Ok(TimeGrid { t_end, nodes, kind: GridKind::Uniform })
    }

    pub fn graded(t_end: f64, m: usize, gamma: f64) -> Result<Self> {
        Self::check(t_end, m)?;
        if !(gamma >= 1.0) || !gamma.is_finite() {
            return Err(EvolutionError::Grid(format!("grading exponent must be >= 1, got {gamma}")));
        }
        if gamma == 1.0 {
            return Self::uniform(t_end, m);
        }
        let nodes = (0..=m).map(|i| t_end * (i as f64 / m as f64).powf(gamma)).collect();
        Ok(TimeGrid { t_end, nodes, kind: GridKind::Graded { gamma } })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0.0 {
            return Err(EvolutionError::Grid("nodes must start at 0 and contain at least two points".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || !nodes.iter().all(|t| t.is_finite()) {
            return Err(EvolutionError::Grid("nodes must be finite and strictly increasing".into()));
        }
        let t_end = *nodes.last().unwrap();
        Ok(TimeGrid { t_end, nodes, kind: GridKind::Custom })
    }

    fn check(t_end: f64, m: usize) -> Result<()> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(EvolutionError::Grid(format!("T must be positive, got {t_end}")));
        }
        if m == 0 {
            return Err(EvolutionError::Grid("M must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of panels `M`.
    pub fn panels(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.kind, GridKind::Uniform)
    }

    /// Trapezoid weights for time integrals over `[0, T]`.
    pub fn trapezoid(&self) -> Vec<f64> {
        let t = &self.nodes;
        let m = t.len() - 1;
        (0..=m)
            .map(|i| {
                let left = if i > 0 { t[i] - t[i - 1] } else { 0.0 };
                let right = if i < m { t[i + 1] - t[i] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect()
    }
}

/// Modal coefficients `c_n(t_i)`, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub n_modes: usize,
    pub n_nodes: usize,
    data: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(n_nodes: usize, n_modes: usize) -> Self {
        SpaceTimeField { n_modes, n_nodes, data: vec![0.0; n_nodes * n_modes] }
    }

    pub fn from_slices(slices: Vec<Vec<f64>>) -> Result<Self> {
        let n_nodes = slices.len();
        let n_modes = slices.first().map_or(0, |s| s.len());
        if slices.iter().any(|s| s.len() != n_modes) {
            return Err(EvolutionError::Shape("ragged slices".into()));
        }
        Ok(SpaceTimeField { n_modes, n_nodes, data: slices.concat() })
    }

    /// Build from per-mode time series.
    pub fn from_series(series: &[Vec<f64>], n_nodes: usize) -> Self {
        let n_modes = series.len();
        let mut f = Self::zeros(n_nodes, n_modes);
        for (n, s) in series.iter().enumerate() {
            for (i, v) in s.iter().enumerate() {
                f.data[i * n_modes + n] = *v;
            }
        }
        f
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_modes..(i + 1) * self.n_modes]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_modes..(i + 1) * self.n_modes]
    }

    pub fn series(&self, n: usize) -> Vec<f64> {
        (0..self.n_nodes).map(|i| self.data[i * self.n_modes + n]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn scale(&self, a: f64) -> Self {
        SpaceTimeField { data: self.data.iter().map(|v| a * v).collect(), ..*self }
    }

    pub fn axpy(&self, a: f64, other: &Self) -> Self {
        SpaceTimeField { data: self.data.iter().zip(&other.data).map(|(x, y)| x + a * y).collect(), ..*self }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Discrete `L2(0,T; L2)` norm: Parseval in space, trapezoid in time.
    pub fn l2_norm(&self, grid: &TimeGrid) -> f64 {
        grid.trapezoid()
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.slice(i).iter().map(|c| c * c).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Per-node spatial `L2` norms.
    pub fn node_norms(&self) -> Vec<f64> {
        (0..self.n_nodes).map(|i| self.slice(i).iter().map(|c| c * c).sum::<f64>().sqrt()).collect()
    }
}

/// Product-integration weights for one eigenvalue. For node `i` and panel
/// `p` (`[t_{p-1}, t_p]`) the contribution is `near * g_p + far * g_{p-1}`.
#[derive(Debug, Clone)]
pub enum ModeWeights {
    /// uniform grid: depends on `i - p` only
    Toeplitz { near: Vec<f64>, far: Vec<f64> },
    /// row `i` holds panels `1..=i`
    Full { near: Vec<Vec<f64>>, far: Vec<Vec<f64>> },
}

fn panel_weights(p0a: f64, p0b: f64, qa: f64, qb: f64, h: f64) -> (f64, f64) {
    // I0 = int_a^b K, J1 = int_a^b K (tau - a) = h P0(b) - (Q(b) - Q(a))
    let i0 = p0b - p0a;
    let j1 = h * p0b - (qb - qa);
    ((h * i0 - j1) / h, j1 / h)
}

impl ModeWeights {
    pub fn new(alpha: f64, lambda: f64, grid: &TimeGrid) -> std::result::Result<Self, MlError> {
        let m = grid.panels();
        let p0 = |tau: f64| ml_kernel_primitive(alpha, alpha, lambda, tau);
        let q = |tau: f64| ml_kernel_primitive(alpha, alpha + 1.0, lambda, tau);
        if grid.is_uniform() {
            let h = grid.t_end / m as f64;
            let mut pv = Vec::with_capacity(m + 1);
            let mut qv = Vec::with_capacity(m + 1);
            for n in 0..=m {
                let tau = n as f64 * h;
                pv.push(p0(tau)?);
                qv.push(q(tau)?);
            }
            let (near, far) = (0..m).map(|n| panel_weights(pv[n], pv[n + 1], qv[n], qv[n + 1], h)).unzip();
            Ok(ModeWeights::Toeplitz { near, far })
        } else {
            let t = &grid.nodes;
            let mut near = vec![Vec::new(); m + 1];
            let mut far = vec![Vec::new(); m + 1];
            for i in 1..=m {
                let mut rn = vec![0.0; i + 1];
                let mut rf = vec![0.0; i + 1];
                let mut prev = (p0(0.0)?, q(0.0)?);
                // walk panels from p = i down to 1 so tau = t_i - t_p increases
                for p in (1..=i).rev() {
                    let b = t[i] - t[p - 1];
                    let cur = (p0(b)?, q(b)?);
                    let (a_, b_) = panel_weights(prev.0, cur.0, prev.1, cur.1, t[p] - t[p - 1]);
                    rn[p] = a_;
                    rf[p] = b_;
                    prev = cur;
                }
                near[i] = rn;
                far[i] = rf;
            }
            Ok(ModeWeights::Full { near, far })
        }
    }

    /// Weights `(near, far)` of panel `p` at node `i`, `1 <= p <= i`.
    #[inline]
    pub fn pair(&self, i: usize, p: usize) -> (f64, f64) {
        match self {
            ModeWeights::Toeplitz { near, far } => (near[i - p], far[i - p]),
            ModeWeights::Full { near, far } => (near[i][p], far[i][p]),
        }
    }

    /// Everything at node `i` except the `near * g_i` term of the last panel.
    pub fn history(&self, i: usize, g: &[f64]) -> f64 {
        let mut s = 0.0;
        match self {
            ModeWeights::Toeplitz { near, far } => {
                for p in 1..i {
                    s += near[i - p] * g[p];
                }
                for p in 1..=i {
                    s += far[i - p] * g[p - 1];
                }
            }
            ModeWeights::Full { near, far } => {
                let (rn, rf) = (&near[i], &far[i]);
                for p in 1..i {
                    s += rn[p] * g[p];
                }
                for p in 1..=i {
                    s += rf[p] * g[p - 1];
                }
            }
        }
        s
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.pair(i, i).0
    }

    pub fn convolve(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        for i in 1..g.len() {
            out[i] = self.history(i, g) + self.diagonal(i) * g[i];
        }
        out
    }
}

/// `int_0^{t_i} (t_i - s)^(alpha-1) E_{alpha,alpha}(-lambda (t_i - s)^alpha) g(s) ds`
/// at every node, with `g` piecewise linear.
pub fn duhamel_mode_convolve(alpha: f64, lambda: f64, g: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    if g.len() != grid.len() {
        return Err(EvolutionError::Shape(format!("series has {} samples, grid {}", g.len(), grid.len())));
    }
    if !g[0].is_finite() {
        return Err(EvolutionError::Shape("g(t_0) is not finite".into()));
    }
    Ok(ModeWeights::new(alpha, lambda, grid)?.convolve(g))
}

/// Precomputed product-integration weights for every mode of a basis.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub alpha: f64,
    pub grid: TimeGrid,
    pub lambdas: Vec<f64>,
    weights: Vec<ModeWeights>,
}

impl Propagator {
    pub fn new(lambdas: &[f64], alpha: f64, grid: &TimeGrid) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(EvolutionError::Unsupported(format!("alpha = {alpha} outside (0, 2)")));
        }
        let weights = lambdas
            .par_iter()
            .map(|&l| ModeWeights::new(alpha, l, grid))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Propagator { alpha, grid: grid.clone(), lambdas: lambdas.to_vec(), weights })
    }

    pub fn for_basis(basis: &SpectralBasis, alpha: f64, grid: &TimeGrid) -> Result<Self> {
        Self::new(&basis.lambdas(), alpha, grid)
    }

    pub fn weights(&self, n: usize) -> &ModeWeights {
        &self.weights[n]
    }

    fn check(&self, f: &SpaceTimeField) -> Result<()> {
        if f.n_modes != self.lambdas.len() || f.n_nodes != self.grid.len() {
            return Err(EvolutionError::Shape(format!(
                "field is {}x{}, propagator expects {}x{}",
                f.n_nodes,
                f.n_modes,
                self.grid.len(),
                self.lambdas.len()
            )));
        }
        Ok(())
    }

    /// Duhamel solution for every mode, parallel over modes.
    pub fn apply(&self, f: &SpaceTimeField) -> Result<SpaceTimeField> {
        self.check(f)?;
        let series: Vec<Vec<f64>> = (0..f.n_modes).into_par_iter().map(|n| self.weights[n].convolve(&f.series(n))).collect();
        Ok(SpaceTimeField::from_series(&series, f.n_nodes))
    }
}

/// Solve `D^alpha u + A u = F` with zero initial data for a modal source.
pub fn evolve_source(basis: &SpectralBasis, alpha: f64, f: &SpaceTimeField, grid: &TimeGrid) -> Result<SpaceTimeField> {
    Propagator::for_basis(basis, alpha, grid)?.apply(f)
}

/// `x'`-dependent potential sampled at every node, row-major `nodes x n_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    pub n_x: usize,
    pub values: Vec<f64>,
    pub bound: f64,
}

impl PotentialField {
    pub fn new(n_x: usize, values: Vec<f64>) -> Self {
        let bound = values.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        PotentialField { n_x, values, bound }
    }

    pub fn zero(n_nodes: usize, n_x: usize) -> Self {
        Self::new(n_x, vec![0.0; n_nodes * n_x])
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_x..(i + 1) * self.n_x]
    }

    pub fn is_zero(&self) -> bool {
        self.bound == 0.0
    }
}

/// Modes grouped by axial index; `q(t, x')` couples only modes inside a group.
fn axial_groups(basis: &SpectralBasis) -> Vec<Vec<(usize, usize)>> {
    let mut groups = vec![Vec::new(); basis.axial.len()];
    for (n, m) in basis.modes.iter().enumerate() {
        groups[m.axial].push((m.lateral, n));
    }
    for g in groups.iter_mut() {
        g.sort();
    }
    groups
}

/// Galerkin matrices of `q(t_i, .)` in the lateral modes, one per node.
fn potential_matrices(basis: &SpectralBasis, q: &PotentialField, n_nodes: usize) -> Result<Vec<Vec<f64>>> {
    if q.n_x != basis.n_x() || q.values.len() != n_nodes * q.n_x {
        return Err(EvolutionError::Shape(format!(
            "potential has {} samples on {} lateral points, expected {} x {}",
            q.values.len(),
            q.n_x,
            n_nodes,
            basis.n_x()
        )));
    }
    Ok((0..n_nodes).map(|i| basis.lateral.multiplication_matrix(q.node(i))).collect())
}

/// Apply the potential to a modal slice: `(q u)_n`.
pub fn apply_potential(basis: &SpectralBasis, qmat: &[f64], u: &[f64]) -> Vec<f64> {
    let k = basis.lateral.len();
    let mut out = vec![0.0; u.len()];
    for group in axial_groups(basis) {
        for &(a, na) in &group {
            let mut s = 0.0;
            for &(b, nb) in &group {
                s += qmat[a * k + b] * u[nb];
            }
            out[na] = s;
        }
    }
    out
}

/// LU with partial pivoting, returns the smallest pivot magnitude.
fn lu_solve(mut a: Vec<f64>, n: usize, b: &mut [f64]) -> f64 {
    let mut min_pivot = f64::INFINITY;
    for c in 0..n {
        let (mut piv, mut best) = (c, a[c * n + c].abs());
        for r in c + 1..n {
            if a[r * n + c].abs() > best {
                piv = r;
                best = a[r * n + c].abs();
            }
        }
        min_pivot = min_pivot.min(best);
        if best == 0.0 {
            return 0.0;
        }
        if piv != c {
            for j in 0..n {
                a.swap(c * n + j, piv * n + j);
            }
            b.swap(c, piv);
        }
        let d = a[c * n + c];
        for r in c + 1..n {
            let f = a[r * n + c] / d;
            if f != 0.0 {
                for j in c..n {
                    a[r * n + j] -= f * a[c * n + j];
                }
                b[r] -= f * b[c];
            }
        }
    }
    for c in (0..n).rev() {
        let mut s = b[c];
        for j in c + 1..n {
            s -= a[c * n + j] * b[j];
        }
        b[c] = s / a[c * n + c];
    }
    min_pivot
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolterraMethod {
    /// implicit last panel, Picard only if a step is singular
    Implicit,
    Picard,
}

#[derive(Debug, Clone, Copy)]
pub struct VolterraOptions {
    pub method: VolterraMethod,
    pub picard_max: usize,
    pub picard_tol: f64,
}

impl Default for VolterraOptions {
    fn default() -> Self {
        VolterraOptions { method: VolterraMethod::Implicit, picard_max: 200, picard_tol: 1e-13 }
    }
}

/// Solver for `D^alpha u + A u + q u = F` written as the Volterra equation
/// `u = J_c * (F - (q - c) u)`, where `J_c` is the Duhamel kernel of `A + c`
/// and `c` is the space-time mean of `q`. A constant potential is thereby
/// absorbed exactly into the eigenvalues.
#[derive(Debug, Clone)]
pub struct PotentialSolver {
    pub shift: f64,
    pub opts: VolterraOptions,
    prop: Propagator,
    /// Galerkin matrices of `q - c`, or `None` when `q` is constant
    qm: Option<Vec<Vec<f64>>>,
}

impl PotentialSolver {
    pub fn new(basis: &SpectralBasis, alpha: f64, q: &PotentialField, grid: &TimeGrid, opts: VolterraOptions) -> Result<Self> {
        if q.n_x != basis.n_x() || q.values.len() != grid.len() * q.n_x {
            return Err(EvolutionError::Shape(format!(
                "potential has {} samples on {} lateral points, expected {} x {}",
                q.values.len(),
                q.n_x,
                grid.len(),
                basis.n_x()
            )));
        }
        let first = q.values[0];
        let constant = q.values.iter().all(|v| *v == first);
        let shift = if constant {
            first
        } else {
            let tw = grid.trapezoid();
            let lw = &basis.lateral.w;
            let mut s = 0.0;
            let mut wsum = 0.0;
            for (i, wt) in tw.iter().enumerate() {
                for (v, wx) in q.node(i).iter().zip(lw) {
                    s += wt * wx * v;
                    wsum += wt * wx;
                }
            }
            s / wsum
        };
        let lambdas: Vec<f64> = basis.lambdas().iter().map(|l| l + shift).collect();
        if lambdas.iter().any(|l| *l < 0.0) {
            return Err(EvolutionError::Unsupported("potential mean makes a shifted eigenvalue negative".into()));
        }
        let prop = Propagator::new(&lambdas, alpha, grid)?;
        let qm = if constant {
            None
        } else {
            let centered = PotentialField::new(q.n_x, q.values.iter().map(|v| v - shift).collect());
            Some(potential_matrices(basis, &centered, grid.len())?)
        };
        Ok(PotentialSolver { shift, opts, prop, qm })
    }

    pub fn solve(&self, basis: &SpectralBasis, f: &SpaceTimeField) -> Result<SpaceTimeField> {
        self.prop.check(f)?;
        let Some(qm) = &self.qm else {
            return self.prop.apply(f);
        };
        match self.opts.method {
            VolterraMethod::Picard => picard_volterra(basis, &self.prop, f, qm, &self.opts),
            VolterraMethod::Implicit => match implicit_volterra(basis, &self.prop, f, qm) {
                Err(EvolutionError::Stiffness { .. }) => picard_volterra(basis, &self.prop, f, qm, &self.opts),
                other => other,
            },
        }
    }
}

/// One-shot [`PotentialSolver`]; a zero potential reduces to [`evolve_source`].
pub fn forward_solve_potential(
    basis: &SpectralBasis,
    alpha: f64,
    f: &SpaceTimeField,
    q: &PotentialField,
    grid: &TimeGrid,
    opts: &VolterraOptions,
) -> Result<SpaceTimeField> {
    if q.is_zero() && q.values.len() == grid.len() * basis.n_x() {
        return evolve_source(basis, alpha, f, grid);
    }
    PotentialSolver::new(basis, alpha, q, grid, *opts)?.solve(basis, f)
}

fn implicit_volterra(basis: &SpectralBasis, prop: &Propagator, f: &SpaceTimeField, qm: &[Vec<f64>]) -> Result<SpaceTimeField> {
    let kk = basis.lateral.len();
    let n_nodes = f.n_nodes;
    let groups = axial_groups(basis);
    let solved: Vec<Vec<(usize, Vec<f64>)>> = groups
        .par_iter()
        .enumerate()
        .map(|(ax, group)| -> Result<Vec<(usize, Vec<f64>)>> {
            let g = group.len();
            let fs: Vec<Vec<f64>> = group.iter().map(|&(_, n)| f.series(n)).collect();
            // G = F - q u, per group member
            let mut gs = vec![vec![0.0; n_nodes]; g];
            let mut us = vec![vec![0.0; n_nodes]; g];
            for a in 0..g {
                gs[a][0] = fs[a][0];
            }
            for i in 1..n_nodes {
                let mut rhs = vec![0.0; g];
                let mut diag = vec![0.0; g];
                for (a, &(_, n)) in group.iter().enumerate() {
                    let w = prop.weights(n);
                    diag[a] = w.diagonal(i);
                    rhs[a] = w.history(i, &gs[a]) + diag[a] * fs[a][i];
                }
                let mut mat = vec![0.0; g * g];
                for a in 0..g {
                    for b in 0..g {
                        let (la, lb) = (group[a].0, group[b].0);
                        mat[a * g + b] = diag[a] * qm[i][la * kk + lb] + if a == b { 1.0 } else { 0.0 };
                    }
                }
                let pivot = lu_solve(mat, g, &mut rhs);
                if !(pivot >= 1e-12) {
                    return Err(EvolutionError::Stiffness { node: i, axial: ax, pivot });
                }
                for a in 0..g {
                    us[a][i] = rhs[a];
                }
                for a in 0..g {
                    let la = group[a].0;
                    let qu: f64 = (0..g).map(|b| qm[i][la * kk + group[b].0] * us[b][i]).sum();
                    gs[a][i] = fs[a][i] - qu;
                }
            }
            Ok(group.iter().map(|&(_, n)| n).zip(us).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut series = vec![Vec::new(); f.n_modes];
    for (n, s) in solved.into_iter().flatten() {
        series[n] = s;
    }
    Ok(SpaceTimeField::from_series(&series, n_nodes))
}

fn picard_volterra(
    basis: &SpectralBasis,
    prop: &Propagator,
    f: &SpaceTimeField,
    qm: &[Vec<f64>],
    opts: &VolterraOptions,
) -> Result<SpaceTimeField> {
    let mut u = prop.apply(f)?;
    let mut change = f64::INFINITY;
    for _ in 0..opts.picard_max {
        let mut g = f.clone();
        for (i, q) in qm.iter().enumerate().take(f.n_nodes) {
            let qu = apply_potential(basis, q, u.slice(i));
            g.slice_mut(i).iter_mut().zip(&qu).for_each(|(x, y)| *x -= y);
        }
        let next = prop.apply(&g)?;
        change = next.axpy(-1.0, &u).max_abs();
        let scale = next.max_abs().max(f64::MIN_POSITIVE);
        u = next;
        if change <= opts.picard_tol * scale {
            return Ok(u);
        }
    }
    Err(EvolutionError::Divergence { sweeps: opts.picard_max, change })
}

/// L1 approximation of the Caputo derivative of a scalar series with
/// `u(0) = series[0]`; `alpha = 1` reduces to the backward difference.
pub fn caputo_l1(series: &[f64], alpha: f64, grid: &TimeGrid) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(EvolutionError::Unsupported(format!("L1 scheme needs alpha in (0, 1], got {alpha}")));
    }
    if series.len() != grid.len() {
        return Err(EvolutionError::Shape(format!("series has {} samples, grid {}", series.len(), grid.len())));
    }
    let t = &grid.nodes;
    let mut out = vec![0.0; series.len()];
    if alpha == 1.0 {
        for i in 1..series.len() {
            out[i] = (series[i] - series[i - 1]) / (t[i] - t[i - 1]);
        }
        return Ok(out);
    }
    let c = 1.0 / gamma(2.0 - alpha);
    let e = 1.0 - alpha;
    let slopes: Vec<f64> = (1..series.len()).map(|p| (series[p] - series[p - 1]) / (t[p] - t[p - 1])).collect();
    for i in 1..series.len() {
        let mut s = 0.0;
        for p in 1..=i {
            s += slopes[p - 1] * ((t[i] - t[p - 1]).powf(e) - (t[i] - t[p]).powf(e));
        }
        out[i] = c * s;
    }
    Ok(out)
}

/// Spatial `L2` norm at every node of `L1(u) + A u + q u - F`.
pub fn caputo_l1_residual(
    basis: &SpectralBasis,
    alpha: f64,
    u: &SpaceTimeField,
    f: &SpaceTimeField,
    q: Option<&PotentialField>,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EvolutionError::Unsupported(format!("residual check needs alpha in (0, 1), got {alpha}")));
    }
    if u.n_modes != basis.len() || f.n_modes != basis.len() || u.n_nodes != grid.len() || f.n_nodes != grid.len() {
        return Err(EvolutionError::Shape("u, F, basis and grid disagree".into()));
    }
    let qm = match q {
        Some(q) if !q.is_zero() => Some(potential_matrices(basis, q, grid.len())?),
        _ => None,
    };
    let caputo: Vec<Vec<f64>> = (0..basis.len())
        .into_par_iter()
        .map(|n| caputo_l1(&u.series(n), alpha, grid))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let ui = u.slice(i);
        let qu = qm.as_ref().map(|m| apply_potential(basis, &m[i], ui));
        let mut r2 = 0.0;
        for (n, mode) in basis.modes.iter().enumerate() {
            let mut r = caputo[n][i] + mode.lambda * ui[n] - f.slice(i)[n];
            if let Some(qu) = &qu {
                r += qu[n];
            }
            r2 += r * r;
        }
        out.push(r2.sqrt());
    }
    Ok(out)
}

/// `u` and `u_z` on the face `z = l`, row-major `nodes x n_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace {
    pub n_x: usize,
    pub n_nodes: usize,
    pub dirichlet_face: Vec<f64>,
    pub neumann_face: Vec<f64>,
}

impl BoundaryTrace {
    pub fn dirichlet_at(&self, i: usize) -> &[f64] {
        &self.dirichlet_face[i * self.n_x..(i + 1) * self.n_x]
    }

    pub fn neumann_at(&self, i: usize) -> &[f64] {
        &self.neumann_face[i * self.n_x..(i + 1) * self.n_x]
    }
}

pub fn boundary_traces(u: &SpaceTimeField, basis: &SpectralBasis) -> BoundaryTrace {
    let mut d = Vec::with_capacity(u.n_nodes * basis.n_x());
    let mut nface = Vec::with_capacity(u.n_nodes * basis.n_x());
    for i in 0..u.n_nodes {
        d.extend(basis.upper_value(u.slice(i)));
        nface.extend(basis.upper_derivative(u.slice(i)));
    }
    BoundaryTrace { n_x: basis.n_x(), n_nodes: u.n_nodes, dirichlet_face: d, neumann_face: nface }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mittag_leffler::mittag_leffler;
    use crate::quad;
    use crate::spectral::*;

    #[test]
    fn grids() {
        let g = TimeGrid::uniform(2.0, 4).unwrap();
        assert_eq!(g.nodes, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        let g = TimeGrid::graded(1.0, 4, 2.0).unwrap();
        assert!((g.nodes[2] - 0.25).abs() < 1e-15 && !g.is_uniform());
        assert!(TimeGrid::from_nodes(vec![0.0, 1.0, 1.0]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::uniform(0.0, 4).is_err());
        let w = TimeGrid::uniform(1.0, 4).unwrap().trapezoid();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_forcing_reproduces_primitive() {
        for (alpha, lambda) in [(0.5, 3.0), (0.9, 0.0), (1.5, 7.0)] {
            for grid in [TimeGrid::uniform(2.0, 40).unwrap(), TimeGrid::graded(2.0, 30, 1.7).unwrap()] {
                let u = duhamel_mode_convolve(alpha, lambda, &vec![1.0; grid.len()], &grid).unwrap();
                for (t, v) in grid.nodes.iter().zip(&u) {
                    let exact = ml_kernel_primitive(alpha, alpha, lambda, *t).unwrap();
                    assert!((v - exact).abs() < 1e-9, "alpha={alpha} t={t}: {v} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn heat_kernel_case() {
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let u = duhamel_mode_convolve(1.0, 2.0, &vec![1.0; grid.len()], &grid).unwrap();
        for (t, v) in grid.nodes.iter().zip(&u) {
            assert!((v - (1.0 - (-2.0 * t).exp()) / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_forcing_matches_quadrature() {
        // g(s) = s, alpha = 1/2, lambda = 1; oracle integrates the kernel
        // with the substitution tau = v^(1/alpha) that removes the singularity
        let (alpha, lambda) = (0.5, 1.0);
        let grid = TimeGrid::uniform(1.0, 256).unwrap();
        let g: Vec<f64> = grid.nodes.clone();
        let u = duhamel_mode_convolve(alpha, lambda, &g, &grid).unwrap();
        for i in [1, 17, 128, 256] {
            let t = grid.nodes[i];
            let f = |v: f64| {
                let tau = v.powf(1.0 / alpha);
                let k = mittag_leffler(alpha, alpha, lambda * tau.powf(alpha)).unwrap();
                // d tau = tau^(1 - alpha) / alpha dv, kernel carries tau^(alpha - 1)
                k * (t - tau) / alpha
            };
            let want = quad::integrate_interval(f, 0.0, t.powf(alpha), 1e-13).value;
            assert!((u[i] - want).abs() < 1e-6, "t={t}: {} vs {want}", u[i]);
        }
    }

    #[test]
    fn piecewise_linear_forcing_is_exact() {
        // the hat function is reproduced exactly by the interpolant, so the
        // discrete result equals the exact convolution at every node
        let (alpha, lambda) = (0.7, 2.5);
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let mut g = vec![0.0; 11];
        g[3] = 1.0;
        let u = duhamel_mode_convolve(alpha, lambda, &g, &grid).unwrap();
        let t3 = grid.nodes[3];
        let h = 0.1;
        for (i, &t) in grid.nodes.iter().enumerate() {
            let hat = |s: f64| (1.0 - (s - t3).abs() / h).max(0.0);
            let f = |s: f64| {
                let tau = t - s;
                if tau <= 0.0 {
                    return 0.0;
                }
                tau.powf(alpha - 1.0) * mittag_leffler(alpha, alpha, lambda * tau.powf(alpha)).unwrap() * hat(s)
            };
            let mut pts = vec![0.0, t3 - h, t3, t3 + h];
            pts.retain(|p| *p < t);
            pts.push(t);
            let want = if t <= t3 - h { 0.0 } else { quad::integrate(f, &pts, 0.0, 1e-12, 4000).value };
            assert!((u[i] - want).abs() < 1e-8, "i={i}: {} vs {want}", u[i]);
        }
    }

    #[test]
    fn l1_scheme_on_quadratic() {
        // D^alpha t^2 = 2 t^(2-alpha) / Gamma(3-alpha); L1 error O(h^(2-alpha))
        let alpha = 0.4;
        let mut prev = f64::INFINITY;
        for m in [32, 64, 128] {
            let grid = TimeGrid::uniform(1.0, m).unwrap();
            let u: Vec<f64> = grid.nodes.iter().map(|t| t * t).collect();
            let d = caputo_l1(&u, alpha, &grid).unwrap();
            let err = grid
                .nodes
                .iter()
                .zip(&d)
                .map(|(t, v)| (v - 2.0 * t.powf(2.0 - alpha) / gamma(3.0 - alpha)).abs())
                .fold(0.0, f64::max);
            assert!(err < prev / 2.5, "m={m}: {err}");
            prev = err;
        }
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let d = caputo_l1(&[0.0, 0.25, 0.5, 0.75, 1.0], 1.0, &grid).unwrap();
        assert!(d[1..].iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(caputo_l1(&[0.0; 5], 1.2, &grid).is_err());
    }

    fn small_basis() -> SpectralBasis {
        let d = DomainSpec::new(std::f64::consts::PI, 1.0, AxialInterval::Symmetric).unwrap();
        assemble_basis(&d, &CoefficientField::unit(), &BoundaryVariant::NEUMANN_AXIAL, 3, 3, 24).unwrap()
    }

    #[test]
    fn constant_potential_shifts_eigenvalues() {
        let b = small_basis();
        let grid = TimeGrid::uniform(1.0, 64).unwrap();
        let alpha = 0.6;
        let kappa = 2.5;
        let mut f = SpaceTimeField::zeros(grid.len(), b.len());
        for i in 0..grid.len() {
            f.slice_mut(i)[1] = 1.0 + grid.nodes[i];
            f.slice_mut(i)[4] = (grid.nodes[i] * 3.0).sin();
        }
        let q = PotentialField::new(b.n_x(), vec![kappa; grid.len() * b.n_x()]);
        let u = forward_solve_potential(&b, alpha, &f, &q, &grid, &VolterraOptions::default()).unwrap();
        let shifted: Vec<f64> = b.lambdas().iter().map(|l| l + kappa).collect();
        let want = Propagator::new(&shifted, alpha, &grid).unwrap().apply(&f).unwrap();
        assert!(u.axpy(-1.0, &want).max_abs() < 1e-7);
    }

    #[test]
    fn variable_potential_implicit_equals_picard() {
        let b = small_basis();
        let grid = TimeGrid::uniform(1.0, 64).unwrap();
        let alpha = 0.5;
        let mut f = SpaceTimeField::zeros(grid.len(), b.len());
        for i in 0..grid.len() {
            let t = grid.nodes[i];
            f.slice_mut(i).iter_mut().enumerate().for_each(|(n, v)| *v = t * (1.0 + n as f64).recip());
        }
        let q: Vec<f64> = (0..grid.len())
            .flat_map(|i| {
                let t = grid.nodes[i];
                b.lateral.x.iter().map(move |x| 1.0 + 0.8 * x.sin() * (1.0 + t)).collect::<Vec<_>>()
            })
            .collect();
        let q = PotentialField::new(b.n_x(), q);
        let u = forward_solve_potential(&b, alpha, &f, &q, &grid, &VolterraOptions::default()).unwrap();
        let opts = VolterraOptions { method: VolterraMethod::Picard, ..Default::default() };
        let up = forward_solve_potential(&b, alpha, &f, &q, &grid, &opts).unwrap();
        assert!(u.axpy(-1.0, &up).max_abs() < 1e-11 * u.max_abs());
        // the L1 residual is small compared with the source
        let r = caputo_l1_residual(&b, alpha, &u, &f, Some(&q), &grid).unwrap();
        let fmax = f.node_norms().into_iter().fold(0.0, f64::max);
        assert!(r.iter().all(|v| *v < 0.05 * fmax), "{:?}", r.iter().fold(0.0f64, |m, v| m.max(*v)));
    }

    #[test]
    fn zero_potential_is_plain_evolution() {
        let b = small_basis();
        let grid = TimeGrid::uniform(1.0, 32).unwrap();
        let mut f = SpaceTimeField::zeros(grid.len(), b.len());
        for i in 0..grid.len() {
            for n in 0..b.len() {
                f.slice_mut(i)[n] = (n as f64 + grid.nodes[i]).cos();
            }
        }
        let q = PotentialField::zero(grid.len(), b.n_x());
        let u = forward_solve_potential(&b, 0.8, &f, &q, &grid, &VolterraOptions::default()).unwrap();
        assert_eq!(u, evolve_source(&b, 0.8, &f, &grid).unwrap());
    }

    #[test]
    fn traces_respect_boundary_conditions() {
        let d = DomainSpec::new(1.0, 1.0, AxialInterval::Symmetric).unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        for (v, dirichlet) in [(BoundaryVariant::FULL_DIRICHLET, true), (BoundaryVariant::NEUMANN_AXIAL, false)] {
            let b = assemble_basis(&d, &CoefficientField::unit(), &v, 2, 3, 24).unwrap();
            let f = SpaceTimeField::from_slices(vec![vec![1.0; b.len()]; grid.len()]).unwrap();
            let u = evolve_source(&b, 0.5, &f, &grid).unwrap();
            let tr = boundary_traces(&u, &b);
            let face = if dirichlet { &tr.dirichlet_face } else { &tr.neumann_face };
            assert!(face.iter().all(|x| x.abs() < 1e-12));
            let other = if dirichlet { &tr.neumann_face } else { &tr.dirichlet_face };
            assert!(other.iter().any(|x| x.abs() > 1e-3));
        }
    }
}
