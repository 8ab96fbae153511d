//! Stability experiments on the half cylinder `(0, L) x (0, l)` with
//! `u_z(., 0) = 0` and `u(., l) = 0`: even extension, spectral Sobolev norms of
//! the face flux `u_z(t, x', l)`, source-to-data ratios and the
//! potential-difference experiment built on a lifting `H = theta(t) Phi(x)`.

use crate::evolution::{forward_solve_potential, EvolutionError, PotentialField, SpaceTimeField, TimeGrid, VolterraOptions};
use crate::gamma::gamma;
use crate::inverse::{project_source, InverseError, LateralField, RProfile};
use crate::spectral::{AxialBc, AxialInterval, LateralModes, SpectralBasis, SpectralError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Inverse(#[from] InverseError),
    #[error("invalid stability configuration: {0}")]
    Config(String),
    #[error("source does not vanish at t = 0 (max |f(0)| = {0:e})")]
    InitialSource(f64),
    #[error("potentials differ at t = 0 (max |q1 - q2| = {0:e})")]
    InitialPotential(f64),
    #[error("lifting violates the compatibility conditions: {0}")]
    Compatibility(String),
    #[error("expected the half-cylinder basis (Neumann at 0, Dirichlet at l)")]
    Basis,
}

pub type Result<T> = std::result::Result<T, StabilityError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub alpha: f64,
    /// regularity parameter of the estimate; recorded only
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// lower end of the certified window as a fraction of `T`
    #[serde(default = "default_t_lo")]
    pub t_lo_fraction: f64,
    #[serde(default = "default_eps")]
    pub perturbations: Vec<f64>,
}

fn default_gamma() -> f64 {
    0.8
}
fn default_delta() -> f64 {
    0.5
}
fn default_t_lo() -> f64 {
    0.1
}
fn default_eps() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1]
}

impl StabilityConfig {
    pub fn new(alpha: f64) -> Self {
        StabilityConfig { alpha, gamma: default_gamma(), delta: default_delta(), t_lo_fraction: default_t_lo(), perturbations: default_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(StabilityError::Config(format!("alpha = {} outside (0, 1]", self.alpha)));
        }
        if !(self.gamma > 0.75 && self.gamma < 1.0) {
            return Err(StabilityError::Config(format!("gamma = {} outside (3/4, 1)", self.gamma)));
        }
        if !(self.delta > 0.0 && self.delta < 2.0 * self.gamma - 0.75) {
            return Err(StabilityError::Config(format!(
                "delta = {} outside (0, 2 gamma - 3/4) = (0, {})",
                self.delta,
                2.0 * self.gamma - 0.75
            )));
        }
        if !(self.t_lo_fraction >= 0.0 && self.t_lo_fraction < 1.0) {
            return Err(StabilityError::Config(format!("t_lo fraction {} outside [0, 1)", self.t_lo_fraction)));
        }
        if self.perturbations.iter().any(|e| !(e.is_finite() && *e != 0.0)) {
            return Err(StabilityError::Config("perturbation magnitudes must be finite and nonzero".into()));
        }
        Ok(())
    }
}

fn check_half(basis: &SpectralBasis) -> Result<()> {
    if basis.domain.axial != AxialInterval::Half || basis.variant.axial != AxialBc::NeumannDirichlet {
        return Err(StabilityError::Basis);
    }
    Ok(())
}

/// Mirror a half-cylinder grid field (`n_x x (n_z + 1)`, `z` from 0 to `l`)
/// onto `(-l, l)`, giving `n_x x (2 n_z + 1)`. `odd` flips the sign of the
/// mirrored half, as for `u_z`.
pub fn even_extend(basis: &SpectralBasis, field: &[f64], odd: bool) -> Result<Vec<f64>> {
    check_half(basis)?;
    basis.coeffs.a_dd.check_even(basis.domain.ell)?;
    if field.len() != basis.grid_len() {
        return Err(SpectralError::GridMismatch { expected: basis.grid_len(), got: field.len() }.into());
    }
    let nz = basis.n_z();
    let sign = if odd { -1.0 } else { 1.0 };
    let mut out = Vec::with_capacity(basis.n_x() * (2 * nz - 1));
    for row in field.chunks(nz) {
        out.extend(row[1..].iter().rev().map(|v| sign * v));
        out.extend_from_slice(row);
    }
    Ok(out)
}

/// Lateral Sobolev norms of a face trace given by modal coefficients per node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceNorms {
    /// `max_t ||g(t)||_{H^{3/2}}`
    pub linf_h32: f64,
    /// `max_t ||g(t)||_{H^delta}`
    pub linf_hdelta: f64,
    /// `max_t ||D_t g(t)||_{H^delta}`, backward differences
    pub lip_hdelta: f64,
    /// `linf_hdelta + lip_hdelta`
    pub w1inf_hdelta: f64,
    /// `max_t ||g(t)||_{L2}`
    pub linf_l2: f64,
}

impl TraceNorms {
    /// The data side of the estimate.
    pub fn data_norm(&self) -> f64 {
        self.linf_h32 + self.w1inf_hdelta
    }
}

/// Norms over the nodes with `t >= t_lo`; time differences use the previous
/// node even at the window start.
pub fn sobolev_trace_norms(modal: &[Vec<f64>], lateral: &LateralModes, grid: &TimeGrid, delta: f64, t_lo: f64) -> TraceNorms {
    let mut n = TraceNorms { linf_h32: 0.0, linf_hdelta: 0.0, lip_hdelta: 0.0, w1inf_hdelta: 0.0, linf_l2: 0.0 };
    let start = grid.nodes.iter().position(|t| *t >= t_lo * (1.0 - 1e-12)).unwrap_or(grid.len());
    for i in start..grid.len() {
        let g = &modal[i];
        n.linf_h32 = n.linf_h32.max(lateral.sobolev_norm(g, 1.5));
        n.linf_hdelta = n.linf_hdelta.max(lateral.sobolev_norm(g, delta));
        n.linf_l2 = n.linf_l2.max(g.iter().map(|c| c * c).sum::<f64>().sqrt());
        if i > 0 {
            let dt = grid.nodes[i] - grid.nodes[i - 1];
            let d: Vec<f64> = g.iter().zip(&modal[i - 1]).map(|(a, b)| (a - b) / dt).collect();
            n.lip_hdelta = n.lip_hdelta.max(lateral.sobolev_norm(&d, delta));
        }
    }
    n.w1inf_hdelta = n.linf_hdelta + n.lip_hdelta;
    n
}

/// Lateral coefficients of `u_z(t, ., l)` at every node.
pub fn face_flux_modal(basis: &SpectralBasis, u: &SpaceTimeField) -> Vec<Vec<f64>> {
    (0..u.n_nodes).map(|i| basis.upper_derivative_modal(u.slice(i))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Ratio {
    Value(f64),
    /// `f = 0`: both sides vanish
    Degenerate,
}

impl Ratio {
    pub fn value(&self) -> Option<f64> {
        match self {
            Ratio::Value(v) => Some(*v),
            Ratio::Degenerate => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioReport {
    pub source_norm: f64,
    pub trace: TraceNorms,
    pub ratio: Ratio,
}

/// `||f||_{L-inf L2} / (||u_z(l)||_{L-inf H^{3/2}} + ||u_z(l)||_{W^{1,inf} H^delta})`
/// for the half-cylinder problem with source `f R` and potential `q`.
pub fn stability_ratio(
    basis: &SpectralBasis,
    cfg: &StabilityConfig,
    f: &LateralField,
    r: &RProfile,
    floor: f64,
    q: &PotentialField,
    grid: &TimeGrid,
) -> Result<RatioReport> {
    cfg.validate()?;
    check_half(basis)?;
    let f0 = f.node(0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if f0 > 1e-12 * f.max_abs().max(f64::MIN_POSITIVE) && f0 > 0.0 {
        return Err(StabilityError::InitialSource(f0));
    }
    let r_face = r.face(grid, &basis.lateral.x, basis.domain.ell, basis.domain.lateral_length);
    let min = r_face.values.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(min >= floor) {
        return Err(InverseError::FaceFloor { min, floor }.into());
    }
    let src = project_source(basis, f, r, grid)?;
    let u = forward_solve_potential(basis, cfg.alpha, &src, q, grid, &VolterraOptions::default())?;
    let trace = sobolev_trace_norms(&face_flux_modal(basis, &u), &basis.lateral, grid, cfg.delta, 0.0);
    let source_norm = f.linf_l2(&basis.lateral.w);
    let data = trace.data_norm();
    let ratio = if source_norm == 0.0 && data == 0.0 { Ratio::Degenerate } else { Ratio::Value(source_norm / data) };
    Ok(RatioReport { source_norm, trace, ratio })
}

/// `Phi(x', z) = c0 + cx sin(pi x'/L) + cz cos(pi z / l)`, even in `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftingSpec {
    pub c0: f64,
    #[serde(default)]
    pub cx: f64,
    #[serde(default)]
    pub cz: f64,
    /// `theta(t) = t^power`
    #[serde(default = "default_power")]
    pub power: f64,
}

fn default_power() -> f64 {
    2.0
}

impl Default for LiftingSpec {
    fn default() -> Self {
        LiftingSpec { c0: 1.0, cx: 0.3, cz: 0.2, power: 2.0 }
    }
}

impl LiftingSpec {
    /// `H` in C^1 with `H(0) = 0` and `D^alpha H(0) = 0` needs `p >= 1`, `p > alpha`.
    pub fn check(&self, alpha: f64) -> Result<()> {
        if !(self.power >= 1.0 && self.power > alpha) {
            return Err(StabilityError::Compatibility(format!(
                "theta = t^{} needs power >= 1 and > alpha = {alpha}",
                self.power
            )));
        }
        Ok(())
    }

    pub fn theta(&self, t: f64) -> f64 {
        t.powf(self.power)
    }

    /// Exact Caputo derivative of `t^p`.
    pub fn caputo_theta(&self, t: f64, alpha: f64) -> f64 {
        let p = self.power;
        if t == 0.0 {
            return 0.0;
        }
        gamma(p + 1.0) / gamma(p + 1.0 - alpha) * t.powf(p - alpha)
    }

    pub fn phi(&self, x: f64, z: f64, length: f64, ell: f64) -> f64 {
        self.c0 + self.cx * (PI * x / length).sin() + self.cz * (PI * z / ell).cos()
    }

    /// `A Phi` in closed form.
    pub fn a_phi(&self, basis: &SpectralBasis, x: f64, z: f64) -> f64 {
        let (length, ell) = (basis.domain.lateral_length, basis.domain.ell);
        let a = &basis.coeffs.a_dd;
        let k = PI / ell;
        let pz = -self.cz * k * (k * z).sin();
        let pzz = -self.cz * k * k * (k * z).cos();
        basis.coeffs.a_lat * (PI / length).powi(2) * self.cx * (PI * x / length).sin() - (a.d1(z, ell) * pz + a.value(z, ell) * pzz)
    }

    /// `h0 = H(t, x', l)` on the lateral grid.
    pub fn face(&self, basis: &SpectralBasis, grid: &TimeGrid) -> LateralField {
        let (length, ell) = (basis.domain.lateral_length, basis.domain.ell);
        LateralField::from_fn(grid, &basis.lateral.x, |t, x| self.theta(t) * self.phi(x, ell, length, ell))
    }
}

/// `y` with `D^alpha y + A y + q y = -(D^alpha + A + q) H`, so `v = H + y`
/// solves the homogeneous equation with the boundary values of `H`.
pub fn lifted_solution(
    basis: &SpectralBasis,
    alpha: f64,
    lifting: &LiftingSpec,
    q: &PotentialField,
    grid: &TimeGrid,
) -> Result<SpaceTimeField> {
    let (length, ell) = (basis.domain.lateral_length, basis.domain.ell);
    let phi = basis.sample(|x, z| lifting.phi(x, z, length, ell));
    let a_phi = basis.sample(|x, z| lifting.a_phi(basis, x, z));
    let nz = basis.n_z();
    let slices = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let t = grid.nodes[i];
            let (th, dth) = (lifting.theta(t), lifting.caputo_theta(t, alpha));
            let qi = q.node(i);
            let field: Vec<f64> = (0..phi.len()).map(|g| -(dth * phi[g] + th * a_phi[g] + qi[g / nz] * th * phi[g])).collect();
            basis.project(&field)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(forward_solve_potential(basis, alpha, &SpaceTimeField::from_slices(slices)?, q, grid, &VolterraOptions::default())?)
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientReport {
    pub t_lo: f64,
    /// `||q1 - q2||_{L-inf L2}` on the window
    pub lhs: f64,
    pub trace: TraceNorms,
    pub constant: Option<f64>,
    /// `min |h0|` over the window
    pub floor_min: f64,
    /// first node where `|h0| >= floor` holds from then on
    pub floor_from: Option<f64>,
    pub certified: bool,
    /// `max |u_z(v1 - v2)(l)|` over all nodes and lateral points
    pub max_difference_trace: f64,
}

/// Both sides of the potential-difference estimate on `[t_lo, T]`.
pub fn coefficient_experiment(
    basis: &SpectralBasis,
    cfg: &StabilityConfig,
    q1: &PotentialField,
    q2: &PotentialField,
    lifting: &LiftingSpec,
    floor: f64,
    grid: &TimeGrid,
) -> Result<CoefficientReport> {
    cfg.validate()?;
    check_half(basis)?;
    lifting.check(cfg.alpha)?;
    let nx = basis.n_x();
    let d0 = q1.node(0).iter().zip(q2.node(0)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if d0 > 0.0 {
        return Err(StabilityError::InitialPotential(d0));
    }
    let t_lo = cfg.t_lo_fraction * grid.t_end;
    let y1 = lifted_solution(basis, cfg.alpha, lifting, q1, grid)?;
    let y2 = if q1 == q2 { y1.clone() } else { lifted_solution(basis, cfg.alpha, lifting, q2, grid)? };
    let diff = y1.axpy(-1.0, &y2);
    let modal = face_flux_modal(basis, &diff);
    let trace = sobolev_trace_norms(&modal, &basis.lateral, grid, cfg.delta, t_lo);
    let max_difference_trace = modal.iter().flat_map(|c| basis.lateral.synthesize(c)).fold(0.0f64, |m, v| m.max(v.abs()));

    let mut lhs = 0.0f64;
    for (i, &t) in grid.nodes.iter().enumerate() {
        if t >= t_lo * (1.0 - 1e-12) {
            let s: f64 = (0..nx).map(|p| basis.lateral.w[p] * (q1.node(i)[p] - q2.node(i)[p]).powi(2)).sum();
            lhs = lhs.max(s.sqrt());
        }
    }
    let h0 = lifting.face(basis, grid);
    let node_min: Vec<f64> = (0..grid.len()).map(|i| h0.node(i).iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))).collect();
    let floor_min = grid.nodes.iter().zip(&node_min).filter(|(t, _)| **t >= t_lo * (1.0 - 1e-12)).map(|(_, m)| *m).fold(f64::INFINITY, f64::min);
    let floor_from = (0..grid.len()).find(|&i| node_min[i..].iter().all(|m| *m >= floor)).map(|i| grid.nodes[i]);
    let certified = floor_from.is_some_and(|t| t <= t_lo * (1.0 + 1e-12));
    let data = trace.data_norm();
    let constant = if data > 0.0 { Some(lhs / data) } else { None };
    Ok(CoefficientReport { t_lo, lhs, trace, constant, floor_min, floor_from, certified, max_difference_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::*;

    fn half_basis(coeffs: CoefficientField, k: usize, j: usize) -> SpectralBasis {
        let d = DomainSpec::new(PI, 1.0, AxialInterval::Half).unwrap();
        assemble_basis(&d, &coeffs, &BoundaryVariant::MIXED_AXIAL, k, j, 8 * j).unwrap()
    }

    #[test]
    fn config_bounds() {
        assert!(StabilityConfig::new(0.5).validate().is_ok());
        let mut c = StabilityConfig::new(0.5);
        c.delta = 0.9;
        assert!(c.validate().is_err());
        assert!(StabilityConfig::new(1.2).validate().is_err());
    }

    #[test]
    fn even_extension_of_cosine_mode() {
        let b = half_basis(CoefficientField::unit(), 2, 3);
        let mut c = vec![0.0; b.len()];
        c[0] = 1.0;
        let ext = even_extend(&b, &b.synthesize(&c), false).unwrap();
        let nz = b.n_z();
        let x0 = b.lateral.x[0];
        let (lat, _) = b.lateral.eval(0, x0);
        let h = b.axial.step();
        for (q, e) in ext.iter().enumerate().take(2 * nz - 1) {
            let z = -1.0 + q as f64 * h;
            let want = lat * (0.5 * PI * z).cos() * 2f64.sqrt();
            assert!((e - want).abs() < 1e-12, "z={z}");
        }
        // flux across z = 0 vanishes from both sides
        let dz = even_extend(&b, &b.synthesize_dz(&c), true).unwrap();
        assert!(dz[nz - 1].abs() < 1e-14);
        assert!((dz[nz - 2] + dz[nz]).abs() < 1e-14);
    }

    #[test]
    fn extension_needs_half_cylinder_basis() {
        let full = DomainSpec::new(PI, 1.0, AxialInterval::Symmetric).unwrap();
        let fb = assemble_basis(&full, &CoefficientField::unit(), &BoundaryVariant::FULL_DIRICHLET, 2, 2, 16).unwrap();
        assert!(matches!(even_extend(&fb, &vec![0.0; fb.grid_len()], false), Err(StabilityError::Basis)));
    }

    #[test]
    fn trace_norms_of_single_mode() {
        let b = half_basis(CoefficientField::unit(), 3, 2);
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let zero = vec![vec![0.0; 3]; grid.len()];
        let n0 = sobolev_trace_norms(&zero, &b.lateral, &grid, 0.5, 0.0);
        assert_eq!(n0.data_norm(), 0.0);
        // g = t e_2
        let modal: Vec<Vec<f64>> = grid.nodes.iter().map(|t| vec![0.0, *t, 0.0]).collect();
        let n = sobolev_trace_norms(&modal, &b.lateral, &grid, 0.5, 0.0);
        let mu = b.lateral.mu[1];
        assert!((n.linf_h32 - (1.0 + mu).powf(0.75)).abs() < 1e-14);
        assert!((n.lip_hdelta - (1.0 + mu).powf(0.25)).abs() < 1e-12);
        assert!((n.w1inf_hdelta - 2.0 * (1.0 + mu).powf(0.25)).abs() < 1e-12);
    }

    #[test]
    fn zero_source_is_degenerate_and_scaling_is_exact() {
        let b = half_basis(CoefficientField { a_lat: 1.0, a_dd: AxialProfile::Cosine { a0: 1.0, eps: 0.2 } }, 3, 4);
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let cfg = StabilityConfig::new(0.6);
        let q = PotentialField::new(b.n_x(), grid.nodes.iter().flat_map(|t| b.lateral.x.iter().map(move |x| 0.5 + t * x.sin())).collect());
        let r = RProfile::unit();
        let zero = LateralField::zeros(grid.len(), b.n_x());
        assert_eq!(stability_ratio(&b, &cfg, &zero, &r, 0.1, &q, &grid).unwrap().ratio, Ratio::Degenerate);
        let f = LateralField::from_fn(&grid, &b.lateral.x, |t, x| t * x.sin() + t * t * (2.0 * x).sin());
        let r1 = stability_ratio(&b, &cfg, &f, &r, 0.1, &q, &grid).unwrap().ratio.value().unwrap();
        let r2 = stability_ratio(&b, &cfg, &f.scale(1e-3), &r, 0.1, &q, &grid).unwrap().ratio.value().unwrap();
        assert!((r1 / r2 - 1.0).abs() < 1e-12);
        let bad = LateralField::from_fn(&grid, &b.lateral.x, |t, x| (1.0 + t) * x.sin());
        assert!(matches!(stability_ratio(&b, &cfg, &bad, &r, 0.1, &q, &grid), Err(StabilityError::InitialSource(_))));
    }

    #[test]
    fn lifting_compatibility() {
        assert!(LiftingSpec::default().check(0.5).is_ok());
        assert!(LiftingSpec { power: 1.0, ..Default::default() }.check(1.0).is_err());
        assert!(LiftingSpec { power: 0.5, ..Default::default() }.check(0.3).is_err());
        let l = LiftingSpec::default();
        assert!((l.caputo_theta(2.0, 0.5) - 2.0 / gamma(2.5) * 2f64.powf(1.5)).abs() < 1e-13);
    }

    #[test]
    fn equal_potentials_give_zero_difference_and_swap_is_symmetric() {
        let b = half_basis(CoefficientField { a_lat: 1.0, a_dd: AxialProfile::Cosine { a0: 1.0, eps: 0.2 } }, 3, 4);
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let cfg = StabilityConfig::new(0.6);
        let mk = |eps: f64| {
            PotentialField::new(b.n_x(), grid.nodes.iter().flat_map(|t| b.lateral.x.iter().map(move |x| 0.5 + eps * t * x.sin())).collect())
        };
        let l = LiftingSpec::default();
        let same = coefficient_experiment(&b, &cfg, &mk(0.0), &mk(0.0), &l, 1e-3, &grid).unwrap();
        assert_eq!(same.lhs, 0.0);
        assert_eq!(same.max_difference_trace, 0.0);
        let a = coefficient_experiment(&b, &cfg, &mk(0.0), &mk(0.1), &l, 1e-3, &grid).unwrap();
        let s = coefficient_experiment(&b, &cfg, &mk(0.1), &mk(0.0), &l, 1e-3, &grid).unwrap();
        assert_eq!(a.lhs, s.lhs);
        assert!((a.trace.data_norm() - s.trace.data_norm()).abs() <= 1e-14 * a.trace.data_norm());
        assert!(a.certified && a.floor_min >= 1e-3);
        let q_bad = PotentialField::new(b.n_x(), vec![1.0; grid.len() * b.n_x()]);
        assert!(matches!(coefficient_experiment(&b, &cfg, &mk(0.0), &q_bad, &l, 1e-3, &grid), Err(StabilityError::InitialPotential(_))));
    }
}
