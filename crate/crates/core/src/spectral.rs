//! Separable eigenstructure of `A u = -a_lat u_xx - (a_dd(z) u_z)_z` on the
//! cylinder `(0, L) x I`, with `I = (-l, l)` or `(0, l)`.
//!
//! Lateral modes are closed-form sines/cosines. Axial modes are closed form
//! when `a_dd` is constant and come from a symmetric three-point finite
//! difference Sturm-Liouville solve otherwise.

use crate::tridiag::{self, EigenError};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error("a_dd must be positive, found a_dd({z}) = {value}")]
    Ellipticity { z: f64, value: f64 },
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("axial eigensolve: {0}")]
    Eigen(#[from] EigenError),
    #[error("grid mismatch: expected {expected} samples, got {got}")]
    GridMismatch { expected: usize, got: usize },
    #[error("face floor |R(t,x',l)| >= c violated: min {min:e} < c = {floor:e}")]
    FaceFloor { min: f64, floor: f64 },
    #[error("a_dd is not even: a({z}) = {plus}, a(-{z}) = {minus}")]
    NotEven { z: f64, plus: f64, minus: f64 },
}

pub type Result<T> = std::result::Result<T, SpectralError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxialInterval {
    /// `(-l, l)`
    Symmetric,
    /// `(0, l)`
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub lateral_length: f64,
    pub ell: f64,
    pub axial: AxialInterval,
}

impl DomainSpec {
    pub fn new(lateral_length: f64, ell: f64, axial: AxialInterval) -> Result<Self> {
        for (name, v) in [("lateral_length", lateral_length), ("ell", ell)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SpectralError::Domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(DomainSpec { lateral_length, ell, axial })
    }

    pub fn axial_bounds(&self) -> (f64, f64) {
        match self.axial {
            AxialInterval::Symmetric => (-self.ell, self.ell),
            AxialInterval::Half => (0.0, self.ell),
        }
    }
}

/// Named closed-form profiles for the axial coefficient `a_dd(z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AxialProfile {
    Constant { a0: f64 },
    /// `a0 (1 + eps cos(pi z / l))`
    Cosine { a0: f64, eps: f64 },
    /// `a0 (1 + eps z^2)`
    Quadratic { a0: f64, eps: f64 },
}

impl AxialProfile {
    pub fn value(&self, z: f64, ell: f64) -> f64 {
        match *self {
            AxialProfile::Constant { a0 } => a0,
            AxialProfile::Cosine { a0, eps } => a0 * (1.0 + eps * (PI * z / ell).cos()),
            AxialProfile::Quadratic { a0, eps } => a0 * (1.0 + eps * z * z),
        }
    }

    pub fn d1(&self, z: f64, ell: f64) -> f64 {
        match *self {
            AxialProfile::Constant { .. } => 0.0,
            AxialProfile::Cosine { a0, eps } => -a0 * eps * (PI / ell) * (PI * z / ell).sin(),
            AxialProfile::Quadratic { a0, eps } => 2.0 * a0 * eps * z,
        }
    }

    pub fn d2(&self, z: f64, ell: f64) -> f64 {
        match *self {
            AxialProfile::Constant { .. } => 0.0,
            AxialProfile::Cosine { a0, eps } => -a0 * eps * (PI / ell).powi(2) * (PI * z / ell).cos(),
            AxialProfile::Quadratic { a0, eps } => 2.0 * a0 * eps,
        }
    }

    pub fn is_constant(&self) -> bool {
        match *self {
            AxialProfile::Constant { .. } => true,
            AxialProfile::Cosine { eps, .. } | AxialProfile::Quadratic { eps, .. } => eps == 0.0,
        }
    }

    fn base(&self) -> f64 {
        match *self {
            AxialProfile::Constant { a0 } | AxialProfile::Cosine { a0, .. } | AxialProfile::Quadratic { a0, .. } => a0,
        }
    }

    /// Minimum over a fine sampling of `[lo, hi]`, with its location.
    pub fn sampled_min(&self, lo: f64, hi: f64, ell: f64) -> (f64, f64) {
        let n = 4096;
        (0..=n)
            .map(|i| {
                let z = lo + (hi - lo) * i as f64 / n as f64;
                (z, self.value(z, ell))
            })
            .fold((lo, f64::INFINITY), |acc, (z, v)| if v < acc.1 { (z, v) } else { acc })
    }

    /// Sample `a(z)` against `a(-z)` on `[0, l]`.
    pub fn check_even(&self, ell: f64) -> Result<()> {
        for i in 0..=256 {
            let z = ell * i as f64 / 256.0;
            let (plus, minus) = (self.value(z, ell), self.value(-z, ell));
            if (plus - minus).abs() > 1e-12 * plus.abs().max(1.0) {
                return Err(SpectralError::NotEven { z, plus, minus });
            }
        }
        Ok(())
    }
}

/// Constant lateral coefficient and axial profile; cross terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    pub a_lat: f64,
    pub a_dd: AxialProfile,
}

impl CoefficientField {
    pub fn constant(a_lat: f64, a_dd: f64) -> Self {
        CoefficientField { a_lat, a_dd: AxialProfile::Constant { a0: a_dd } }
    }

    pub fn unit() -> Self {
        Self::constant(1.0, 1.0)
    }

    pub fn validate(&self, domain: &DomainSpec) -> Result<()> {
        if !(self.a_lat > 0.0) || !self.a_lat.is_finite() {
            return Err(SpectralError::Ellipticity { z: f64::NAN, value: self.a_lat });
        }
        let (lo, hi) = domain.axial_bounds();
        // the symmetric interval is the reference for even profiles on (0, l) as well
        let (z, v) = self.a_dd.sampled_min(lo.min(-hi), hi, domain.ell);
        if !(v > 0.0) || !v.is_finite() {
            return Err(SpectralError::Ellipticity { z, value: v });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxialBc {
    Dirichlet,
    Neumann,
    /// Neumann at the lower end, Dirichlet at the upper end.
    NeumannDirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateralBc {
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundaryVariant {
    pub axial: AxialBc,
    pub lateral: LateralBc,
}

impl BoundaryVariant {
    pub const FULL_DIRICHLET: Self = BoundaryVariant { axial: AxialBc::Dirichlet, lateral: LateralBc::Dirichlet };
    pub const NEUMANN_AXIAL: Self = BoundaryVariant { axial: AxialBc::Neumann, lateral: LateralBc::Dirichlet };
    pub const MIXED_AXIAL: Self = BoundaryVariant { axial: AxialBc::NeumannDirichlet, lateral: LateralBc::Dirichlet };

    /// `m` selects the axial condition (0 Dirichlet, 1 Neumann at both ends),
    /// `n` the lateral one.
    pub fn mn(m: u8, n: u8) -> Result<Self> {
        let axial = match m {
            0 => AxialBc::Dirichlet,
            1 => AxialBc::Neumann,
            _ => return Err(SpectralError::Unsupported(format!("m = {m}"))),
        };
        let lateral = match n {
            0 => LateralBc::Dirichlet,
            1 => LateralBc::Neumann,
            _ => return Err(SpectralError::Unsupported(format!("n = {n}"))),
        };
        Ok(BoundaryVariant { axial, lateral })
    }

    pub fn interval(&self) -> AxialInterval {
        match self.axial {
            AxialBc::NeumannDirichlet => AxialInterval::Half,
            _ => AxialInterval::Symmetric,
        }
    }

    pub fn tag(&self) -> String {
        let n = match self.lateral {
            LateralBc::Dirichlet => 0,
            LateralBc::Neumann => 1,
        };
        match self.axial {
            AxialBc::Dirichlet => format!("mn0{n}"),
            AxialBc::Neumann => format!("mn1{n}"),
            AxialBc::NeumannDirichlet if n == 0 => "mixed_axial".into(),
            AxialBc::NeumannDirichlet => "mixed_axial_n1".into(),
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        let v = match tag {
            "full_dirichlet" | "mn00" => Self::FULL_DIRICHLET,
            "neumann_axial" | "mn10" => Self::NEUMANN_AXIAL,
            "mn01" => BoundaryVariant { axial: AxialBc::Dirichlet, lateral: LateralBc::Neumann },
            "mn11" => BoundaryVariant { axial: AxialBc::Neumann, lateral: LateralBc::Neumann },
            "mixed_axial" => Self::MIXED_AXIAL,
            "mixed_axial_n1" => BoundaryVariant { axial: AxialBc::NeumannDirichlet, lateral: LateralBc::Neumann },
            _ => return Err(SpectralError::Unsupported(format!("boundary variant '{tag}'"))),
        };
        Ok(v)
    }
}

/// Lateral eigenfunctions sampled on a quadrature grid for which they are
/// discretely orthonormal.
#[derive(Debug, Clone)]
pub struct LateralModes {
    pub bc: LateralBc,
    pub length: f64,
    pub a_lat: f64,
    pub index: Vec<usize>,
    pub mu: Vec<f64>,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    values: Vec<f64>,
}

pub fn default_lateral_points(k: usize) -> usize {
    (4 * k).max(32)
}

fn lateral_eval(bc: LateralBc, k: usize, length: f64, x: f64) -> (f64, f64) {
    let c = k as f64 * PI / length;
    let s = (2.0 / length).sqrt();
    match bc {
        LateralBc::Dirichlet => (s * (c * x).sin(), s * c * (c * x).cos()),
        LateralBc::Neumann if k == 0 => (1.0 / length.sqrt(), 0.0),
        LateralBc::Neumann => (s * (c * x).cos(), -s * c * (c * x).sin()),
    }
}

/// Lateral modes with the default grid size.
pub fn lateral_modes(domain: &DomainSpec, coeffs: &CoefficientField, variant: &BoundaryVariant, k: usize) -> Result<LateralModes> {
    lateral_modes_on(domain, coeffs, variant, k, default_lateral_points(k))
}

/// `n_x` grid points: interior DST nodes for Dirichlet, endpoint-inclusive
/// trapezoid nodes for Neumann.
pub fn lateral_modes_on(
    domain: &DomainSpec,
    coeffs: &CoefficientField,
    variant: &BoundaryVariant,
    k: usize,
    n_x: usize,
) -> Result<LateralModes> {
    if k == 0 {
        return Err(SpectralError::Domain("lateral cutoff K must be at least 1".into()));
    }
    if !(coeffs.a_lat > 0.0) {
        return Err(SpectralError::Ellipticity { z: f64::NAN, value: coeffs.a_lat });
    }
    if n_x < 2 * k + 2 {
        return Err(SpectralError::Domain(format!("lateral grid of {n_x} points cannot resolve K = {k}")));
    }
    let length = domain.lateral_length;
    let bc = variant.lateral;
    let index: Vec<usize> = match bc {
        LateralBc::Dirichlet => (1..=k).collect(),
        LateralBc::Neumann => (0..k).collect(),
    };
    let mu = index.iter().map(|&i| coeffs.a_lat * (i as f64 * PI / length).powi(2)).collect();
    let (x, w): (Vec<f64>, Vec<f64>) = match bc {
        LateralBc::Dirichlet => {
            let h = length / (n_x + 1) as f64;
            (0..n_x).map(|p| ((p + 1) as f64 * h, h)).unzip()
        }
        LateralBc::Neumann => {
            let h = length / (n_x - 1) as f64;
            (0..n_x)
                .map(|p| (p as f64 * h, if p == 0 || p == n_x - 1 { 0.5 * h } else { h }))
                .unzip()
        }
    };
    let mut values = Vec::with_capacity(k * n_x);
    for &i in &index {
        values.extend(x.iter().map(|&xp| lateral_eval(bc, i, length, xp).0));
    }
    Ok(LateralModes { bc, length, a_lat: coeffs.a_lat, index, mu, x, w, values })
}

impl LateralModes {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn n_points(&self) -> usize {
        self.x.len()
    }

    pub fn values(&self, i: usize) -> &[f64] {
        let n = self.x.len();
        &self.values[i * n..(i + 1) * n]
    }

    /// Eigenfunction `i` and its derivative at an arbitrary point.
    pub fn eval(&self, i: usize, x: f64) -> (f64, f64) {
        lateral_eval(self.bc, self.index[i], self.length, x)
    }

    pub fn project(&self, field: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.values(i).iter().zip(&self.w).zip(field).map(|((v, w), f)| v * w * f).sum())
            .collect()
    }

    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_points()];
        for (i, c) in coeffs.iter().enumerate() {
            if *c != 0.0 {
                out.iter_mut().zip(self.values(i)).for_each(|(o, v)| *o += c * v);
            }
        }
        out
    }

    /// Galerkin matrix of multiplication by `q(x)`, row-major `K x K`.
    pub fn multiplication_matrix(&self, q: &[f64]) -> Vec<f64> {
        let k = self.len();
        let mut m = vec![0.0; k * k];
        for a in 0..k {
            for b in a..k {
                let v: f64 = self
                    .values(a)
                    .iter()
                    .zip(self.values(b))
                    .zip(self.w.iter().zip(q))
                    .map(|((x, y), (w, q))| x * y * w * q)
                    .sum();
                m[a * k + b] = v;
                m[b * k + a] = v;
            }
        }
        m
    }

    /// Spectral `H^s` norm `sum (1 + mu_k)^s |g_k|^2` of modal coefficients.
    pub fn sobolev_norm(&self, coeffs: &[f64], s: f64) -> f64 {
        coeffs.iter().zip(&self.mu).map(|(c, m)| (1.0 + m).powf(s) * c * c).sum::<f64>().sqrt()
    }
}

/// Axial eigenfunctions on a uniform grid with trapezoid weights.
#[derive(Debug, Clone)]
pub struct AxialModes {
    pub bc: AxialBc,
    pub lower: f64,
    pub upper: f64,
    pub ell: f64,
    pub profile: AxialProfile,
    pub index: Vec<usize>,
    /// Eigenvalues used by the solvers.
    pub nu: Vec<f64>,
    /// Eigenvalues of the discrete operator itself (equal to `nu` for closed forms).
    pub nu_grid: Vec<f64>,
    pub closed_form: bool,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub a: Vec<f64>,
    values: Vec<Vec<f64>>,
    d1: Vec<Vec<f64>>,
    d2: Vec<Vec<f64>>,
    pub upper_value: Vec<f64>,
    pub upper_derivative: Vec<f64>,
    pub lower_value: Vec<f64>,
    pub lower_derivative: Vec<f64>,
}

fn closed_form(bc: AxialBc, j: usize, lo: f64, len: f64, z: f64) -> (f64, f64, f64) {
    let s = (2.0 / len).sqrt();
    let y = z - lo;
    match bc {
        AxialBc::Dirichlet => {
            let c = j as f64 * PI / len;
            (s * (c * y).sin(), s * c * (c * y).cos(), -s * c * c * (c * y).sin())
        }
        AxialBc::Neumann if j == 0 => (1.0 / len.sqrt(), 0.0, 0.0),
        AxialBc::Neumann => {
            let c = j as f64 * PI / len;
            (s * (c * y).cos(), -s * c * (c * y).sin(), -s * c * c * (c * y).cos())
        }
        AxialBc::NeumannDirichlet => {
            let c = (j as f64 + 0.5) * PI / len;
            (s * (c * y).cos(), -s * c * (c * y).sin(), -s * c * c * (c * y).cos())
        }
    }
}

fn closed_wavenumber(bc: AxialBc, j: usize, len: f64) -> f64 {
    match bc {
        AxialBc::NeumannDirichlet => (j as f64 + 0.5) * PI / len,
        _ => j as f64 * PI / len,
    }
}

/// Range of grid nodes that carry unknowns.
fn free_nodes(bc: AxialBc, n: usize) -> std::ops::Range<usize> {
    match bc {
        AxialBc::Dirichlet => 1..n,
        AxialBc::Neumann => 0..n + 1,
        AxialBc::NeumannDirichlet => 0..n,
    }
}

/// Second-order FD eigenpairs of `-(a u')' = nu u` on `n` intervals. Vectors
/// are returned on all `n + 1` nodes, normalized in the trapezoid inner product.
fn fd_eigen(bc: AxialBc, profile: &AxialProfile, ell: f64, lo: f64, hi: f64, n: usize, count: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let h = (hi - lo) / n as f64;
    let nodes = free_nodes(bc, n);
    let first = nodes.start;
    let m = nodes.len();
    let mut diag = vec![0.0; m];
    let mut off = vec![0.0; m.saturating_sub(1)];
    for e in 0..n {
        let ae = profile.value(lo + (e as f64 + 0.5) * h, ell) / h;
        let (i, j) = (e, e + 1);
        let fi = nodes.contains(&i);
        let fj = nodes.contains(&j);
        if fi {
            diag[i - first] += ae;
        }
        if fj {
            diag[j - first] += ae;
        }
        if fi && fj {
            off[i - first] -= ae;
        }
    }
    let weight = |node: usize| if node == 0 || node == n { 0.5 * h } else { h };
    let isw: Vec<f64> = nodes.clone().map(|q| 1.0 / weight(q).sqrt()).collect();
    for i in 0..m {
        diag[i] *= isw[i] * isw[i];
        if i + 1 < m {
            off[i] *= isw[i] * isw[i + 1];
        }
    }
    let (vals, vecs) = tridiag::lowest_eigenpairs(&diag, &off, count)?;
    let full = vecs
        .into_iter()
        .map(|y| {
            let mut u = vec![0.0; n + 1];
            for (i, q) in nodes.clone().enumerate() {
                u[q] = y[i] * isw[i];
            }
            orient(&mut u);
            u
        })
        .collect();
    Ok((vals, full))
}

/// Fix the sign so the first clearly nonzero sample from the lower end is positive.
fn orient(u: &mut [f64]) {
    let peak = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(v) = u.iter().find(|v| v.abs() > 1e-3 * peak) {
        if *v < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn grid_derivative(u: &[f64], h: f64) -> Vec<f64> {
    let n = u.len() - 1;
    let mut d = vec![0.0; n + 1];
    d[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h);
    d[n] = (3.0 * u[n] - 4.0 * u[n - 1] + u[n - 2]) / (2.0 * h);
    for q in 1..n {
        d[q] = (u[q + 1] - u[q - 1]) / (2.0 * h);
    }
    d
}

/// Axial modes. `n_z` is the number of grid intervals (the grid has `n_z + 1`
/// nodes including both ends) and must be at least `8 J`.
pub fn axial_modes(domain: &DomainSpec, a_dd: &AxialProfile, variant: &BoundaryVariant, j: usize, n_z: usize) -> Result<AxialModes> {
    if j == 0 {
        return Err(SpectralError::Domain("axial cutoff J must be at least 1".into()));
    }
    if n_z < 8 * j {
        return Err(SpectralError::Domain(format!("N_z = {n_z} must be at least 8 J = {}", 8 * j)));
    }
    if variant.interval() != domain.axial {
        return Err(SpectralError::Domain(format!(
            "boundary variant {} needs the {:?} axial interval, domain has {:?}",
            variant.tag(),
            variant.interval(),
            domain.axial
        )));
    }
    let ell = domain.ell;
    let (lo, hi) = domain.axial_bounds();
    let (zmin, amin) = a_dd.sampled_min(lo, hi, ell);
    if !(amin > 0.0) || !amin.is_finite() {
        return Err(SpectralError::Ellipticity { z: zmin, value: amin });
    }
    let bc = variant.axial;
    let len = hi - lo;
    let h = len / n_z as f64;
    let z: Vec<f64> = (0..=n_z).map(|q| lo + q as f64 * h).collect();
    let w: Vec<f64> = (0..=n_z).map(|q| if q == 0 || q == n_z { 0.5 * h } else { h }).collect();
    let a: Vec<f64> = z.iter().map(|&zq| a_dd.value(zq, ell)).collect();
    let index: Vec<usize> = match bc {
        AxialBc::Dirichlet => (1..=j).collect(),
        _ => (0..j).collect(),
    };

    let closed = a_dd.is_constant();
    let (nu, nu_grid, values, d1, d2, ends);
    if closed {
        let a0 = a_dd.base();
        let ks: Vec<f64> = index.iter().map(|&i| closed_wavenumber(bc, i, len)).collect();
        nu = ks.iter().map(|k| a0 * k * k).collect::<Vec<_>>();
        nu_grid = nu.clone();
        let tab: Vec<Vec<(f64, f64, f64)>> =
            index.iter().map(|&i| z.iter().map(|&zq| closed_form(bc, i, lo, len, zq)).collect()).collect();
        values = tab.iter().map(|r| r.iter().map(|t| t.0).collect()).collect::<Vec<Vec<f64>>>();
        d1 = tab.iter().map(|r| r.iter().map(|t| t.1).collect()).collect::<Vec<Vec<f64>>>();
        d2 = tab.iter().map(|r| r.iter().map(|t| t.2).collect()).collect::<Vec<Vec<f64>>>();
        ends = index
            .iter()
            .map(|&i| (closed_form(bc, i, lo, len, lo), closed_form(bc, i, lo, len, hi)))
            .map(|(l, u)| (l.0, l.1, u.0, u.1))
            .collect::<Vec<_>>();
    } else {
        let (mut fine, vecs) = fd_eigen(bc, a_dd, ell, lo, hi, n_z, j)?;
        // constants are exact eigenvectors of the Neumann scheme; keep nu_0
        // from landing a rounding error below zero
        if bc == AxialBc::Neumann {
            fine[0] = 0.0;
        }
        // Richardson on the eigenvalues only: the error of the three-point
        // scheme is (nu h)^2-proportional, so halving the grid removes it
        nu = if n_z.is_multiple_of(2) && free_nodes(bc, n_z / 2).len() >= j {
            let (coarse, _) = fd_eigen(bc, a_dd, ell, lo, hi, n_z / 2, j)?;
            fine.iter().zip(&coarse).map(|(f, c)| if *f == 0.0 { 0.0 } else { (4.0 * f - c) / 3.0 }).collect()
        } else {
            fine.clone()
        };
        nu_grid = fine;
        let mut dd1 = Vec::with_capacity(j);
        let mut dd2 = Vec::with_capacity(j);
        let mut e = Vec::with_capacity(j);
        for (u, &lam) in vecs.iter().zip(&nu_grid) {
            let mut d = grid_derivative(u, h);
            if matches!(bc, AxialBc::Neumann | AxialBc::NeumannDirichlet) {
                d[0] = 0.0;
            }
            if bc == AxialBc::Neumann {
                d[n_z] = 0.0;
            }
            let dd: Vec<f64> = (0..=n_z)
                .map(|q| -(lam * u[q] + a_dd.d1(z[q], ell) * d[q]) / a[q])
                .collect();
            e.push((u[0], d[0], u[n_z], d[n_z]));
            dd1.push(d);
            dd2.push(dd);
        }
        values = vecs;
        d1 = dd1;
        d2 = dd2;
        ends = e;
    }
    Ok(AxialModes {
        bc,
        lower: lo,
        upper: hi,
        ell,
        profile: *a_dd,
        index,
        nu,
        nu_grid,
        closed_form: closed,
        z,
        w,
        a,
        values,
        d1,
        d2,
        lower_value: ends.iter().map(|e| e.0).collect(),
        lower_derivative: ends.iter().map(|e| e.1).collect(),
        upper_value: ends.iter().map(|e| e.2).collect(),
        upper_derivative: ends.iter().map(|e| e.3).collect(),
    })
}

impl AxialModes {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn n_points(&self) -> usize {
        self.z.len()
    }

    pub fn step(&self) -> f64 {
        (self.upper - self.lower) / (self.z.len() - 1) as f64
    }

    pub fn values(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    pub fn derivative(&self, j: usize) -> &[f64] {
        &self.d1[j]
    }

    pub fn second_derivative(&self, j: usize) -> &[f64] {
        &self.d2[j]
    }

    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.w.iter().zip(f).zip(g).map(|((w, a), b)| w * a * b).sum()
    }

    /// `<A chi, chi> / <chi, chi>` for the axial operator, using the same
    /// discretization the mode came from: the three-point energy form for
    /// finite-difference modes, exact derivatives for closed forms.
    pub fn rayleigh_quotient(&self, j: usize) -> f64 {
        let u = &self.values[j];
        let mass = self.inner(u, u);
        let energy = if self.closed_form {
            let d = &self.d1[j];
            self.w.iter().zip(&self.a).zip(d).map(|((w, a), d)| w * a * d * d).sum::<f64>()
        } else {
            let h = self.step();
            (0..u.len() - 1)
                .map(|e| {
                    let ae = self.profile.value(self.lower + (e as f64 + 0.5) * h, self.ell);
                    ae * (u[e + 1] - u[e]).powi(2) / h
                })
                .sum()
        };
        energy / mass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Eigenmode {
    pub k: usize,
    pub j: usize,
    pub mu: f64,
    pub nu: f64,
    pub lambda: f64,
    /// position in the lateral / axial mode tables
    pub lateral: usize,
    pub axial: usize,
    pub axial_endpoint_derivative: f64,
}

/// Tensor-product eigenbasis, modes sorted by nondecreasing eigenvalue.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub domain: DomainSpec,
    pub coeffs: CoefficientField,
    pub variant: BoundaryVariant,
    pub lateral: LateralModes,
    pub axial: AxialModes,
    pub modes: Vec<Eigenmode>,
}

pub fn assemble_basis(
    domain: &DomainSpec,
    coeffs: &CoefficientField,
    variant: &BoundaryVariant,
    k: usize,
    j: usize,
    n_z: usize,
) -> Result<SpectralBasis> {
    assemble_basis_on(domain, coeffs, variant, k, j, n_z, default_lateral_points(k))
}

pub fn assemble_basis_on(
    domain: &DomainSpec,
    coeffs: &CoefficientField,
    variant: &BoundaryVariant,
    k: usize,
    j: usize,
    n_z: usize,
    n_x: usize,
) -> Result<SpectralBasis> {
    coeffs.validate(domain)?;
    let lateral = lateral_modes_on(domain, coeffs, variant, k, n_x)?;
    let axial = axial_modes(domain, &coeffs.a_dd, variant, j, n_z)?;
    let mut modes = Vec::with_capacity(k * j);
    for li in 0..lateral.len() {
        for ai in 0..axial.len() {
            let (mu, nu) = (lateral.mu[li], axial.nu[ai]);
            modes.push(Eigenmode {
                k: lateral.index[li],
                j: axial.index[ai],
                mu,
                nu,
                lambda: mu + nu,
                lateral: li,
                axial: ai,
                axial_endpoint_derivative: axial.upper_derivative[ai],
            });
        }
    }
    modes.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.lateral.cmp(&b.lateral)).then(a.axial.cmp(&b.axial)));
    Ok(SpectralBasis { domain: *domain, coeffs: *coeffs, variant: *variant, lateral, axial, modes })
}

impl SpectralBasis {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.lambda).collect()
    }

    pub fn n_x(&self) -> usize {
        self.lateral.n_points()
    }

    pub fn n_z(&self) -> usize {
        self.axial.n_points()
    }

    pub fn grid_len(&self) -> usize {
        self.n_x() * self.n_z()
    }

    /// Sample a function on the `(x, z)` grid, row-major in `x`.
    pub fn sample<F: Fn(f64, f64) -> f64>(&self, f: F) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid_len());
        for &x in &self.lateral.x {
            out.extend(self.axial.z.iter().map(|&z| f(x, z)));
        }
        out
    }

    fn check_grid(&self, field: &[f64]) -> Result<()> {
        if field.len() != self.grid_len() {
            return Err(SpectralError::GridMismatch { expected: self.grid_len(), got: field.len() });
        }
        Ok(())
    }

    /// Discrete L2 projection onto the modes.
    pub fn project(&self, field: &[f64]) -> Result<Vec<f64>> {
        self.check_grid(field)?;
        let (nx, nz) = (self.n_x(), self.n_z());
        let kk = self.lateral.len();
        // lateral transform first: g[li][q]
        let mut g = vec![0.0; kk * nz];
        for li in 0..kk {
            let phi = self.lateral.values(li);
            let row = &mut g[li * nz..(li + 1) * nz];
            for p in 0..nx {
                let c = phi[p] * self.lateral.w[p];
                if c != 0.0 {
                    row.iter_mut().zip(&field[p * nz..(p + 1) * nz]).for_each(|(r, f)| *r += c * f);
                }
            }
        }
        Ok(self
            .modes
            .iter()
            .map(|m| self.axial.inner(self.axial.values(m.axial), &g[m.lateral * nz..(m.lateral + 1) * nz]))
            .collect())
    }

    fn synthesize_with(&self, coeffs: &[f64], axial: impl Fn(usize) -> Vec<f64>) -> Vec<f64> {
        let (nx, nz) = (self.n_x(), self.n_z());
        let kk = self.lateral.len();
        let mut g = vec![0.0; kk * nz];
        let tables: Vec<Vec<f64>> = (0..self.axial.len()).map(&axial).collect();
        for (m, c) in self.modes.iter().zip(coeffs) {
            if *c != 0.0 {
                g[m.lateral * nz..(m.lateral + 1) * nz]
                    .iter_mut()
                    .zip(&tables[m.axial])
                    .for_each(|(r, v)| *r += c * v);
            }
        }
        let mut out = vec![0.0; nx * nz];
        for li in 0..kk {
            let phi = self.lateral.values(li);
            let row = &g[li * nz..(li + 1) * nz];
            for p in 0..nx {
                out[p * nz..(p + 1) * nz].iter_mut().zip(row).for_each(|(o, r)| *o += phi[p] * r);
            }
        }
        out
    }

    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        self.synthesize_with(coeffs, |j| self.axial.values(j).to_vec())
    }

    /// Axial derivative of the synthesized field.
    pub fn synthesize_dz(&self, coeffs: &[f64]) -> Vec<f64> {
        self.synthesize_with(coeffs, |j| self.axial.derivative(j).to_vec())
    }

    pub fn synthesize_dzz(&self, coeffs: &[f64]) -> Vec<f64> {
        self.synthesize_with(coeffs, |j| self.axial.second_derivative(j).to_vec())
    }

    /// Lateral modal coefficients of a face quantity `sum_n c_n phi_k(x) e_j`.
    fn face_lateral(&self, coeffs: &[f64], ends: &[f64]) -> Vec<f64> {
        let mut lat = vec![0.0; self.lateral.len()];
        for (m, c) in self.modes.iter().zip(coeffs) {
            lat[m.lateral] += c * ends[m.axial];
        }
        lat
    }

    /// Lateral coefficients of `u(., l)`.
    pub fn upper_value_modal(&self, coeffs: &[f64]) -> Vec<f64> {
        self.face_lateral(coeffs, &self.axial.upper_value)
    }

    /// Lateral coefficients of `u_z(., l)`.
    pub fn upper_derivative_modal(&self, coeffs: &[f64]) -> Vec<f64> {
        self.face_lateral(coeffs, &self.axial.upper_derivative)
    }

    pub fn lower_value_modal(&self, coeffs: &[f64]) -> Vec<f64> {
        self.face_lateral(coeffs, &self.axial.lower_value)
    }

    pub fn lower_derivative_modal(&self, coeffs: &[f64]) -> Vec<f64> {
        self.face_lateral(coeffs, &self.axial.lower_derivative)
    }

    /// `u(x', l)` on the lateral grid.
    pub fn upper_value(&self, coeffs: &[f64]) -> Vec<f64> {
        self.lateral.synthesize(&self.upper_value_modal(coeffs))
    }

    /// `u_z(x', l)` on the lateral grid.
    pub fn upper_derivative(&self, coeffs: &[f64]) -> Vec<f64> {
        self.lateral.synthesize(&self.upper_derivative_modal(coeffs))
    }

    /// `u` and `u_x` on the lateral sides `x = 0` and `x = L`, sampled on the axial grid.
    pub fn side_traces(&self, coeffs: &[f64]) -> [Vec<f64>; 4] {
        let nz = self.n_z();
        let mut out = [vec![0.0; nz], vec![0.0; nz], vec![0.0; nz], vec![0.0; nz]];
        let len = self.lateral.length;
        for (m, c) in self.modes.iter().zip(coeffs) {
            let (v0, d0) = self.lateral.eval(m.lateral, 0.0);
            let (v1, d1) = self.lateral.eval(m.lateral, len);
            let chi = self.axial.values(m.axial);
            for q in 0..nz {
                let s = c * chi[q];
                out[0][q] += s * v0;
                out[1][q] += s * d0;
                out[2][q] += s * v1;
                out[3][q] += s * d1;
            }
        }
        out
    }

    /// `a_dd(l) u_z(x', l) / R(x', l)` on the lateral grid.
    pub fn trace_tau1(&self, coeffs: &[f64], r_face: &[f64], floor: f64) -> Result<Vec<f64>> {
        if r_face.len() != self.n_x() {
            return Err(SpectralError::GridMismatch { expected: self.n_x(), got: r_face.len() });
        }
        let min = r_face.iter().fold(f64::INFINITY, |m, r| m.min(r.abs()));
        if !(min >= floor) {
            return Err(SpectralError::FaceFloor { min, floor });
        }
        let a_l = self.coeffs.a_dd.value(self.axial.upper, self.domain.ell);
        let d = self.upper_derivative(coeffs);
        Ok(d.iter().zip(r_face).map(|(d, r)| a_l * d / r).collect())
    }

    /// `a_dd' w_z + a_dd'' w` on the grid, where `w = u_z` and `w_z` is
    /// obtained by finite differences along `z`.
    pub fn apply_dxa(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_grid(w)?;
        let nz = self.n_z();
        let h = self.axial.step();
        let mut out = vec![0.0; w.len()];
        for (row_w, row_o) in w.chunks(nz).zip(out.chunks_mut(nz)) {
            let dw = grid_derivative(row_w, h);
            let r = apply_dxa_axial(&self.coeffs.a_dd, self.domain.ell, &self.axial.z, row_w, &dw);
            row_o.copy_from_slice(&r);
        }
        Ok(out)
    }

    /// Same as [`apply_dxa`](Self::apply_dxa) for a modal field `u`, with exact
    /// modal derivatives.
    pub fn apply_dxa_modal(&self, u: &[f64]) -> Vec<f64> {
        let w = self.synthesize_dz(u);
        let dw = self.synthesize_dzz(u);
        let nz = self.n_z();
        let mut out = vec![0.0; w.len()];
        for ((rw, rd), ro) in w.chunks(nz).zip(dw.chunks(nz)).zip(out.chunks_mut(nz)) {
            ro.copy_from_slice(&apply_dxa_axial(&self.coeffs.a_dd, self.domain.ell, &self.axial.z, rw, rd));
        }
        out
    }

    /// Full Rayleigh quotient of mode `n` (lateral part is exact).
    pub fn rayleigh_quotient(&self, n: usize) -> f64 {
        let m = &self.modes[n];
        m.mu + self.axial.rayleigh_quotient(m.axial)
    }

    /// Eigenvalue the Rayleigh quotient is expected to reproduce.
    pub fn discrete_lambda(&self, n: usize) -> f64 {
        let m = &self.modes[n];
        m.mu + self.axial.nu_grid[m.axial]
    }

    /// CSV with columns `k,j,mu,nu,lambda,endpoint_derivative`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("k,j,mu,nu,lambda,endpoint_derivative\n");
        for m in &self.modes {
            let _ = writeln!(s, "{},{},{:.17e},{:.17e},{:.17e},{:.17e}", m.k, m.j, m.mu, m.nu, m.lambda, m.axial_endpoint_derivative);
        }
        s
    }
}

/// `-(d/dz A) u = a' u_zz + a'' u_z` written in terms of `w = u_z`.
pub fn apply_dxa_axial(profile: &AxialProfile, ell: f64, z: &[f64], w: &[f64], dw: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(w.iter().zip(dw))
        .map(|(&z, (w, dw))| profile.d1(z, ell) * dw + profile.d2(z, ell) * w)
        .collect()
}
