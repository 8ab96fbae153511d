//! Recovery of `f(t, x')` in `D^alpha u + A u = f(t, x') R(t, x', z)` on
//! `(0, L) x (-l, l)` with `u_z = 0` at `z = +-l`, from the face values
//! `g = u(t, x', l)`.
//!
//! With `h = (D^alpha g + A_lat g) / R(l)` the source satisfies the
//! second-kind equation `f = h + H f`, where
//! `H f = -tau1 S * (a' u~_zz + a'' u~_z + f R_z)`, `u~ = S~ * (f R)`,
//! `S~` is the Duhamel propagator with Neumann axial conditions, `S` the one
//! with Dirichlet axial conditions, and `tau1 y = a(l) y_z(l) / R(l)`.

use crate::evolution::{self, boundary_traces, caputo_l1, EvolutionError, Propagator, SpaceTimeField, TimeGrid};
use crate::spectral::{
    assemble_basis_on, default_lateral_points, AxialBc, AxialInterval, BoundaryVariant, CoefficientField, DomainSpec,
    LateralBc, LateralModes, SpectralBasis, SpectralError,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InverseError {
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("face floor |R(t,x',l)| >= c violated: min {min:e} < c = {floor:e}")]
    FaceFloor { min: f64, floor: f64 },
    #[error("measured trace does not vanish at t = 0 (max |g(0)| = {value:e})")]
    IncompatibleData { value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("Picard iteration did not reach tolerance in {iterations} iterations (last residual {last:e})")]
    Divergence { iterations: usize, last: f64, history: Vec<f64> },
    #[error("bump support violates the margin: {0}")]
    Margin(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, InverseError>;

/// Samples of a function of `(t, x')` on `nodes x n_x`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LateralField {
    pub n_nodes: usize,
    pub n_x: usize,
    pub values: Vec<f64>,
}

impl LateralField {
    pub fn zeros(n_nodes: usize, n_x: usize) -> Self {
        LateralField { n_nodes, n_x, values: vec![0.0; n_nodes * n_x] }
    }

    pub fn from_fn<F: Fn(f64, f64) -> f64>(grid: &TimeGrid, x: &[f64], f: F) -> Self {
        let values = grid.nodes.iter().flat_map(|&t| x.iter().map(move |&xp| (t, xp))).map(|(t, xp)| f(t, xp)).collect();
        LateralField { n_nodes: grid.len(), n_x: x.len(), values }
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_x..(i + 1) * self.n_x]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.n_x..(i + 1) * self.n_x]
    }

    pub fn axpy(&self, a: f64, other: &Self) -> Self {
        LateralField { values: self.values.iter().zip(&other.values).map(|(x, y)| x + a * y).collect(), ..*self }
    }

    pub fn scale(&self, a: f64) -> Self {
        LateralField { values: self.values.iter().map(|v| a * v).collect(), ..*self }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `L2((0,T) x omega)`: trapezoid in time, lateral quadrature weights in space.
    pub fn l2_norm(&self, grid: &TimeGrid, w: &[f64]) -> f64 {
        grid.trapezoid()
            .iter()
            .enumerate()
            .map(|(i, wt)| wt * self.node(i).iter().zip(w).map(|(v, wx)| wx * v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// `L-infinity(0,T; L2(omega))`.
    pub fn linf_l2(&self, w: &[f64]) -> f64 {
        (0..self.n_nodes)
            .map(|i| self.node(i).iter().zip(w).map(|(v, wx)| wx * v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Lateral modal coefficients at every node.
    pub fn to_modal(&self, lateral: &LateralModes) -> Vec<Vec<f64>> {
        (0..self.n_nodes).map(|i| lateral.project(self.node(i))).collect()
    }

    pub fn from_modal(modal: &[Vec<f64>], lateral: &LateralModes) -> Self {
        let values = modal.iter().flat_map(|c| lateral.synthesize(&c[..c.len().min(lateral.len())])).collect();
        LateralField { n_nodes: modal.len(), n_x: lateral.n_points(), values }
    }

    /// Move to another lateral family through the modal expansion, keeping
    /// every `stride`-th time node.
    pub fn resample(&self, from: &LateralModes, to: &LateralModes, stride: usize) -> Self {
        let modal: Vec<Vec<f64>> = (0..self.n_nodes).step_by(stride).map(|i| from.project(self.node(i))).collect();
        Self::from_modal(&modal, to)
    }
}

/// `R(t, x', z) = c0 + cz z + ct t + cx sin(pi x' / L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RProfile {
    pub c0: f64,
    #[serde(default)]
    pub cz: f64,
    #[serde(default)]
    pub ct: f64,
    #[serde(default)]
    pub cx: f64,
}

impl RProfile {
    pub fn unit() -> Self {
        RProfile { c0: 1.0, cz: 0.0, ct: 0.0, cx: 0.0 }
    }

    /// `1 + z / (2 l)`
    pub fn axial_ramp(ell: f64) -> Self {
        RProfile { c0: 1.0, cz: 0.5 / ell, ct: 0.0, cx: 0.0 }
    }

    pub fn value(&self, t: f64, x: f64, z: f64, length: f64) -> f64 {
        self.c0 + self.cz * z + self.ct * t + self.cx * (std::f64::consts::PI * x / length).sin()
    }

    pub fn dz(&self) -> f64 {
        self.cz
    }

    /// `R(t, x', l)` on the lateral grid at every node.
    pub fn face(&self, grid: &TimeGrid, x: &[f64], ell: f64, length: f64) -> LateralField {
        LateralField::from_fn(grid, x, |t, xp| self.value(t, xp, ell, length))
    }
}

/// Modal projection of `f(t, x') R(t, x', z)` at every node.
pub fn project_source(basis: &SpectralBasis, f: &LateralField, r: &RProfile, grid: &TimeGrid) -> Result<SpaceTimeField> {
    if f.n_x != basis.n_x() || f.n_nodes != grid.len() {
        return Err(InverseError::Shape(format!(
            "source is {}x{}, expected {}x{}",
            f.n_nodes,
            f.n_x,
            grid.len(),
            basis.n_x()
        )));
    }
    let length = basis.domain.lateral_length;
    let slices = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let t = grid.nodes[i];
            let fi = f.node(i);
            let mut field = Vec::with_capacity(basis.grid_len());
            for (p, &x) in basis.lateral.x.iter().enumerate() {
                field.extend(basis.axial.z.iter().map(|&z| fi[p] * r.value(t, x, z, length)));
            }
            basis.project(&field)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(SpaceTimeField::from_slices(slices)?)
}

/// The measurement `u(t, x', l)` from the Neumann-axial problem.
#[derive(Debug, Clone)]
pub struct MeasuredData {
    pub alpha: f64,
    pub grid: TimeGrid,
    pub trace: LateralField,
    pub r_face: LateralField,
    pub floor: f64,
}

fn check_floor(r_face: &LateralField, floor: f64) -> Result<()> {
    let min = r_face.values.iter().fold(f64::INFINITY, |m, r| m.min(r.abs()));
    if !(min >= floor) {
        return Err(InverseError::FaceFloor { min, floor });
    }
    Ok(())
}

/// `h = (D^alpha g + A_lat g) / R(l)` with the L1 Caputo scheme and the
/// lateral operator applied in the lateral eigenbasis.
pub fn compute_data_h(data: &MeasuredData, lateral: &LateralModes) -> Result<LateralField> {
    let g = &data.trace;
    if g.n_x != lateral.n_points() || g.n_nodes != data.grid.len() || data.r_face.values.len() != g.values.len() {
        return Err(InverseError::Shape("trace, R face, lateral grid and time grid disagree".into()));
    }
    check_floor(&data.r_face, data.floor)?;
    let g0 = g.node(0).iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    if g0 > 1e-8 * g.max_abs().max(f64::MIN_POSITIVE) && g0 > 1e-14 {
        return Err(InverseError::IncompatibleData { value: g0 });
    }
    let modal = g.to_modal(lateral);
    let k = lateral.len();
    let mut hm = vec![vec![0.0; k]; g.n_nodes];
    for c in 0..k {
        let series: Vec<f64> = modal.iter().map(|m| m[c]).collect();
        let d = caputo_l1(&series, data.alpha, &data.grid)?;
        for i in 0..g.n_nodes {
            hm[i][c] = d[i] + lateral.mu[c] * series[i];
        }
    }
    let mut h = LateralField::from_modal(&hm, lateral);
    for (v, r) in h.values.iter_mut().zip(&data.r_face.values) {
        *v /= r;
    }
    Ok(h)
}

/// Bases, propagators and profile needed to apply `H`.
#[derive(Debug, Clone)]
pub struct InverseContext {
    pub alpha: f64,
    pub grid: TimeGrid,
    pub coeffs: CoefficientField,
    pub r: RProfile,
    pub floor: f64,
    /// Dirichlet axial conditions (`S`)
    pub s_basis: SpectralBasis,
    /// Neumann axial conditions (`S~`), the forward problem itself
    pub st_basis: SpectralBasis,
    s_prop: Propagator,
    st_prop: Propagator,
    r_face: LateralField,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub k: usize,
    pub j: usize,
    pub n_z: usize,
    #[serde(default)]
    pub n_x: Option<usize>,
}

impl InverseContext {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        lateral_length: f64,
        ell: f64,
        coeffs: CoefficientField,
        lateral: LateralBc,
        disc: Discretization,
        alpha: f64,
        grid: &TimeGrid,
        r: RProfile,
        floor: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(InverseError::Unsupported(format!("inversion needs alpha in (0, 1], got {alpha}")));
        }
        let domain = DomainSpec::new(lateral_length, ell, AxialInterval::Symmetric)?;
        let n_x = disc.n_x.unwrap_or_else(|| default_lateral_points(disc.k));
        let s_var = BoundaryVariant { axial: AxialBc::Dirichlet, lateral };
        let st_var = BoundaryVariant { axial: AxialBc::Neumann, lateral };
        let s_basis = assemble_basis_on(&domain, &coeffs, &s_var, disc.k, disc.j, disc.n_z, n_x)?;
        let st_basis = assemble_basis_on(&domain, &coeffs, &st_var, disc.k, disc.j, disc.n_z, n_x)?;
        let r_face = r.face(grid, &s_basis.lateral.x, ell, lateral_length);
        check_floor(&r_face, floor)?;
        let s_prop = Propagator::for_basis(&s_basis, alpha, grid)?;
        let st_prop = Propagator::for_basis(&st_basis, alpha, grid)?;
        Ok(InverseContext { alpha, grid: grid.clone(), coeffs, r, floor, s_basis, st_basis, s_prop, st_prop, r_face })
    }

    pub fn lateral(&self) -> &LateralModes {
        &self.s_basis.lateral
    }

    pub fn r_face(&self) -> &LateralField {
        &self.r_face
    }

    /// True when `H` vanishes identically (constant `a_dd`, `R_z = 0`).
    pub fn h_is_zero(&self) -> bool {
        self.coeffs.a_dd.is_constant() && self.r.dz() == 0.0
    }

    pub fn norm(&self, f: &LateralField) -> f64 {
        f.l2_norm(&self.grid, &self.lateral().w)
    }

    /// Forward solve of the measured problem for a source `f R`.
    pub fn forward(&self, f: &LateralField) -> Result<SpaceTimeField> {
        let src = project_source(&self.st_basis, f, &self.r, &self.grid)?;
        Ok(self.st_prop.apply(&src)?)
    }

    /// Face trace `u(t, x', l)` of the measured problem.
    pub fn measure(&self, f: &LateralField) -> Result<LateralField> {
        let u = self.forward(f)?;
        let tr = boundary_traces(&u, &self.st_basis);
        Ok(LateralField { n_nodes: tr.n_nodes, n_x: tr.n_x, values: tr.dirichlet_face })
    }

    pub fn data_from_trace(&self, trace: LateralField) -> MeasuredData {
        MeasuredData { alpha: self.alpha, grid: self.grid.clone(), trace, r_face: self.r_face.clone(), floor: self.floor }
    }

    pub fn compute_h(&self, trace: LateralField) -> Result<LateralField> {
        compute_data_h(&self.data_from_trace(trace), self.lateral())
    }

    /// `H g`.
    pub fn apply_h(&self, g: &LateralField) -> Result<LateralField> {
        let (nodes, nx) = (self.grid.len(), self.s_basis.n_x());
        if g.n_nodes != nodes || g.n_x != nx {
            return Err(InverseError::Shape(format!("field is {}x{}, expected {nodes}x{nx}", g.n_nodes, g.n_x)));
        }
        if self.h_is_zero() {
            return Ok(LateralField::zeros(nodes, nx));
        }
        let ell = self.s_basis.domain.ell;
        let nz = self.s_basis.n_z();
        let variable = !self.coeffs.a_dd.is_constant();
        let inner = if variable { Some(self.forward(g)?) } else { None };
        let rz = self.r.dz();
        let slices = (0..nodes)
            .into_par_iter()
            .map(|i| {
                let mut d = match &inner {
                    Some(u) => self.st_basis.apply_dxa_modal(u.slice(i)),
                    None => vec![0.0; nx * nz],
                };
                if rz != 0.0 {
                    let gi = g.node(i);
                    for p in 0..nx {
                        d[p * nz..(p + 1) * nz].iter_mut().for_each(|v| *v += gi[p] * rz);
                    }
                }
                self.s_basis.project(&d)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let w = self.s_prop.apply(&SpaceTimeField::from_slices(slices)?)?;
        let a_l = self.coeffs.a_dd.value(ell, ell);
        let mut out = LateralField::zeros(nodes, nx);
        for i in 0..nodes {
            let dz = self.s_basis.upper_derivative(w.slice(i));
            let rf = self.r_face.node(i);
            out.node_mut(i).iter_mut().zip(dz.iter().zip(rf)).for_each(|(o, (d, r))| *o = -a_l * d / r);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { tol: 1e-10, max_iter: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub f_hat: LateralField,
    pub iterations: usize,
    /// `||f_k - f_{k-1}||` per iteration
    pub residuals: Vec<f64>,
    /// ratios of consecutive residuals
    pub contraction: Vec<f64>,
    /// `||f_hat - h - H f_hat||`
    pub defect: f64,
    pub h_norm: f64,
}

/// Solve `f = h + H f` by successive substitution from `f_0 = h`.
pub fn picard_reconstruct(h: &LateralField, ctx: &InverseContext, opts: &PicardOptions) -> Result<ReconstructionResult> {
    let h_norm = ctx.norm(h);
    let mut f = h.clone();
    let mut residuals = Vec::new();
    let mut hf = ctx.apply_h(&f)?;
    let mut converged = h_norm == 0.0;
    let mut iterations = 0;
    while !converged && iterations < opts.max_iter {
        let next = h.axpy(1.0, &hf);
        let r = ctx.norm(&next.axpy(-1.0, &f));
        residuals.push(r);
        iterations += 1;
        f = next;
        hf = ctx.apply_h(&f)?;
        converged = r <= opts.tol * h_norm;
    }
    if !converged {
        let last = residuals.last().copied().unwrap_or(f64::NAN);
        return Err(InverseError::Divergence { iterations, last, history: residuals });
    }
    let contraction = residuals.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();
    let defect = ctx.norm(&f.axpy(-1.0, h).axpy(-1.0, &hf));
    Ok(ReconstructionResult { f_hat: f, iterations, residuals, contraction, defect, h_norm })
}

/// `C-infinity` bump supported on `(lo, hi)`, equal to 1 at the midpoint.
pub fn bump(s: f64, lo: f64, hi: f64) -> f64 {
    let y = (2.0 * s - lo - hi) / (hi - lo);
    if y.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - y * y)).exp()
    }
}

/// Support boxes of a tensor bump `chi(t, x', z) = b(t) b1(x') b2(z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub amplitude: f64,
    pub t: (f64, f64),
    pub x: (f64, f64),
    pub z: (f64, f64),
}

impl BumpSpec {
    /// Wide supports: the lateral sine series of a narrow bump decays slowly
    /// and its truncation shows up in the side derivatives.
    pub fn centered(t_end: f64, length: f64, ell: f64, amplitude: f64) -> Self {
        BumpSpec { amplitude, t: (0.1 * t_end, 0.9 * t_end), x: (0.1 * length, 0.9 * length), z: (-0.8 * ell, 0.8 * ell) }
    }

    pub fn value(&self, t: f64, x: f64, z: f64) -> f64 {
        self.amplitude * bump(t, self.t.0, self.t.1) * bump(x, self.x.0, self.x.1) * bump(z, self.z.0, self.z.1)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ObstructionReport {
    pub f_norm: f64,
    pub chi_norm: f64,
    pub u_minus_chi: f64,
    pub face_value_upper: f64,
    pub face_derivative_upper: f64,
    pub face_value_lower: f64,
    pub face_derivative_lower: f64,
    pub side_values: f64,
    pub side_derivatives: f64,
    /// largest of the trace sups above
    pub max_trace: f64,
}

/// Build `F = D^alpha chi + A chi` (L1 in time, three-point differences in
/// space), solve the forward problem and measure every boundary trace of `u`.
pub fn obstruction_demo(chi: &BumpSpec, alpha: f64, basis: &SpectralBasis, grid: &TimeGrid) -> Result<ObstructionReport> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(InverseError::Unsupported(format!("obstruction demo needs alpha in (0, 1], got {alpha}")));
    }
    let (zlo, zhi) = (basis.axial.lower, basis.axial.upper);
    let length = basis.domain.lateral_length;
    let ht = grid.nodes.windows(2).fold(0.0f64, |m, w| m.max(w[1] - w[0]));
    let hx = length / (basis.n_x() + 1) as f64;
    let hz = basis.axial.step();
    let margin = |name: &str, (lo, hi): (f64, f64), a: f64, b: f64, h: f64| -> Result<()> {
        if chi.amplitude != 0.0 && (lo - a < 3.0 * h || b - hi < 3.0 * h || !(hi > lo)) {
            return Err(InverseError::Margin(format!("{name} support ({lo}, {hi}) within 3 cells of ({a}, {b})")));
        }
        Ok(())
    };
    margin("t", chi.t, 0.0, grid.t_end, ht)?;
    margin("x'", chi.x, 0.0, length, hx)?;
    margin("z", chi.z, zlo, zhi, hz)?;

    let ell = basis.domain.ell;
    let coeffs = basis.coeffs;
    let (nx, nz) = (basis.n_x(), basis.n_z());
    let xs = &basis.lateral.x;
    let zs = &basis.axial.z;
    // spatial profile and its image under the three-point operator
    let bx: Vec<f64> = xs.iter().map(|&x| bump(x, chi.x.0, chi.x.1)).collect();
    let bz: Vec<f64> = zs.iter().map(|&z| bump(z, chi.z.0, chi.z.1)).collect();
    let fd_x = |x: f64| {
        let f = |s: f64| bump(s, chi.x.0, chi.x.1);
        -coeffs.a_lat * (f(x + hx) - 2.0 * f(x) + f(x - hx)) / (hx * hx)
    };
    let fd_z = |z: f64| {
        let f = |s: f64| bump(s, chi.z.0, chi.z.1);
        let (ap, am) = (coeffs.a_dd.value(z + 0.5 * hz, ell), coeffs.a_dd.value(z - 0.5 * hz, ell));
        -(ap * (f(z + hz) - f(z)) - am * (f(z) - f(z - hz))) / (hz * hz)
    };
    let mut phi = Vec::with_capacity(nx * nz);
    let mut a_phi = Vec::with_capacity(nx * nz);
    for (p, &x) in xs.iter().enumerate() {
        let ax = fd_x(x);
        for (q, &z) in zs.iter().enumerate() {
            phi.push(bx[p] * bz[q]);
            a_phi.push(ax * bz[q] + bx[p] * fd_z(z));
        }
    }
    let phi_m = basis.project(&phi)?;
    let aphi_m = basis.project(&a_phi)?;
    let theta: Vec<f64> = grid.nodes.iter().map(|&t| chi.amplitude * bump(t, chi.t.0, chi.t.1)).collect();
    let dtheta = caputo_l1(&theta, alpha, grid)?;
    let f_slices: Vec<Vec<f64>> =
        (0..grid.len()).map(|i| phi_m.iter().zip(&aphi_m).map(|(p, a)| dtheta[i] * p + theta[i] * a).collect()).collect();
    let f = SpaceTimeField::from_slices(f_slices)?;
    let u = evolution::evolve_source(basis, alpha, &f, grid)?;

    let chi_field = SpaceTimeField::from_slices(theta.iter().map(|th| phi_m.iter().map(|p| th * p).collect()).collect())?;
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut rep = ObstructionReport {
        f_norm: f.l2_norm(grid),
        chi_norm: chi_field.l2_norm(grid),
        u_minus_chi: u.axpy(-1.0, &chi_field).l2_norm(grid),
        face_value_upper: 0.0,
        face_derivative_upper: 0.0,
        face_value_lower: 0.0,
        face_derivative_lower: 0.0,
        side_values: 0.0,
        side_derivatives: 0.0,
        max_trace: 0.0,
    };
    for i in 0..grid.len() {
        let c = u.slice(i);
        rep.face_value_upper = rep.face_value_upper.max(sup(&basis.upper_value(c)));
        rep.face_derivative_upper = rep.face_derivative_upper.max(sup(&basis.upper_derivative(c)));
        rep.face_value_lower = rep.face_value_lower.max(sup(&basis.lateral.synthesize(&basis.lower_value_modal(c))));
        rep.face_derivative_lower = rep.face_derivative_lower.max(sup(&basis.lateral.synthesize(&basis.lower_derivative_modal(c))));
        let [v0, d0, v1, d1] = basis.side_traces(c);
        rep.side_values = rep.side_values.max(sup(&v0)).max(sup(&v1));
        rep.side_derivatives = rep.side_derivatives.max(sup(&d0)).max(sup(&d1));
    }
    rep.max_trace = [
        rep.face_value_upper,
        rep.face_derivative_upper,
        rep.face_value_lower,
        rep.face_derivative_lower,
        rep.side_values,
        rep.side_derivatives,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::AxialProfile;
    use std::f64::consts::PI;

    fn ctx(coeffs: CoefficientField, r: RProfile, m: usize, k: usize, j: usize) -> InverseContext {
        ctx_nz(coeffs, r, m, k, j, 8 * j)
    }

    fn ctx_nz(coeffs: CoefficientField, r: RProfile, m: usize, k: usize, j: usize, n_z: usize) -> InverseContext {
        let grid = TimeGrid::uniform(1.0, m).unwrap();
        InverseContext::new(PI, 1.0, coeffs, LateralBc::Dirichlet, Discretization { k, j, n_z, n_x: None }, 0.6, &grid, r, 0.1)
            .unwrap()
    }

    #[test]
    fn zero_trace_gives_zero_h() {
        let c = ctx(CoefficientField::unit(), RProfile::unit(), 16, 3, 3);
        let h = c.compute_h(LateralField::zeros(17, c.s_basis.n_x())).unwrap();
        assert!(h.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_mode_trace() {
        // g = theta(t) sin(x'), unit coefficients, R = 2: h = (L1 theta + theta) sin / 2
        let r = RProfile { c0: 2.0, cz: 0.0, ct: 0.0, cx: 0.0 };
        let c = ctx(CoefficientField::unit(), r, 32, 3, 3);
        let x = c.s_basis.lateral.x.clone();
        let theta: Vec<f64> = c.grid.nodes.iter().map(|t| t * t * (1.0 + t)).collect();
        let g = LateralField::from_fn(&c.grid, &x, |t, xp| t * t * (1.0 + t) * xp.sin());
        let h = c.compute_h(g).unwrap();
        let l1 = caputo_l1(&theta, 0.6, &c.grid).unwrap();
        for i in 0..c.grid.len() {
            for (p, xp) in x.iter().enumerate() {
                let want = (l1[i] + theta[i]) * xp.sin() / 2.0;
                assert!((h.node(i)[p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn incompatible_and_floor_errors() {
        let c = ctx(CoefficientField::unit(), RProfile::unit(), 8, 2, 2);
        let g = LateralField::from_fn(&c.grid, &c.s_basis.lateral.x, |_, x| x.sin());
        assert!(matches!(c.compute_h(g), Err(InverseError::IncompatibleData { .. })));
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let bad = RProfile { c0: 0.05, cz: 0.0, ct: 0.0, cx: 0.0 };
        let e = InverseContext::new(PI, 1.0, CoefficientField::unit(), LateralBc::Dirichlet, Discretization { k: 2, j: 2, n_z: 16, n_x: None }, 0.5, &grid, bad, 0.1);
        assert!(matches!(e, Err(InverseError::FaceFloor { .. })));
    }

    #[test]
    fn h_vanishes_for_constant_coefficients_and_flat_r() {
        let c = ctx(CoefficientField::constant(1.0, 2.0), RProfile::unit(), 16, 3, 3);
        let g = LateralField::from_fn(&c.grid, &c.s_basis.lateral.x, |t, x| t * x.sin());
        assert!(c.apply_h(&g).unwrap().values.iter().all(|v| *v == 0.0));
        let h = LateralField::from_fn(&c.grid, &c.s_basis.lateral.x, |t, x| t * (2.0 * x).sin());
        let res = picard_reconstruct(&h, &c, &PicardOptions::default()).unwrap();
        assert_eq!(res.iterations, 1);
        assert_eq!(res.f_hat, h);
    }

    #[test]
    fn ramp_profile_matches_modal_formula() {
        // R = 1 + z/(2l), constant coefficients: H g = -tau1 S * (g / (2l)).
        // Oracle: per lateral mode k, the axial Dirichlet modes j with
        // c_j = int chi_j / (2l), convolved with E-kernels, traced at l.
        let r = RProfile::axial_ramp(1.0);
        let c = ctx_nz(CoefficientField::unit(), r, 24, 3, 6, 512);
        let g = LateralField::from_fn(&c.grid, &c.s_basis.lateral.x, |t, x| t * x.sin() + t * t * (2.0 * x).sin());
        let hg = c.apply_h(&g).unwrap();
        let lat = c.lateral();
        let gm = g.to_modal(lat);
        let ell = 1.0;
        let mut want_modal = vec![vec![0.0; lat.len()]; c.grid.len()];
        for k in 0..lat.len() {
            let series: Vec<f64> = gm.iter().map(|m| m[k]).collect();
            for jj in 1..=6usize {
                let kz = jj as f64 * PI / (2.0 * ell);
                // int_{-l}^{l} sin(kz (z + l)) / sqrt(l) dz
                let cj = (1.0 - (2.0 * kz * ell).cos()) / (kz * ell.sqrt());
                let lam = lat.mu[k] + kz * kz;
                let conv = evolution::duhamel_mode_convolve(0.6, lam, &series, &c.grid).unwrap();
                let dchi = kz * (jj as f64 * PI).cos() / ell.sqrt();
                for i in 0..c.grid.len() {
                    want_modal[i][k] += -cj / (2.0 * ell) * conv[i] * dchi / 1.5;
                }
            }
        }
        let want = LateralField::from_modal(&want_modal, lat);
        let err = hg.axpy(-1.0, &want).max_abs();
        // trapezoid projection of a constant against the sines is O(h^2)
        assert!(err < 1e-4 * want.max_abs(), "{err} vs {}", want.max_abs());
    }

    #[test]
    fn bump_is_compactly_supported() {
        assert_eq!(bump(0.0, 0.1, 0.9), 0.0);
        assert!((bump(0.5, 0.0, 1.0) - 1.0).abs() < 1e-15);
        assert!(bump(0.899, 0.1, 0.9) < 1e-80);
    }

    #[test]
    fn obstruction_zero_and_linear() {
        let d = DomainSpec::new(1.0, 1.0, AxialInterval::Symmetric).unwrap();
        let b = crate::spectral::assemble_basis(&d, &CoefficientField::unit(), &BoundaryVariant::FULL_DIRICHLET, 6, 6, 48).unwrap();
        let grid = TimeGrid::uniform(1.0, 32).unwrap();
        let zero = BumpSpec { amplitude: 0.0, ..BumpSpec::centered(1.0, 1.0, 1.0, 1.0) };
        let r0 = obstruction_demo(&zero, 0.5, &b, &grid).unwrap();
        assert_eq!(r0.f_norm, 0.0);
        assert_eq!(r0.max_trace, 0.0);
        let one = BumpSpec::centered(1.0, 1.0, 1.0, 1.0);
        let ten = BumpSpec { amplitude: 10.0, ..one };
        let (r1, r10) = (obstruction_demo(&one, 0.5, &b, &grid).unwrap(), obstruction_demo(&ten, 0.5, &b, &grid).unwrap());
        assert!((r10.f_norm / r1.f_norm - 10.0).abs() < 1e-12);
        assert!((r10.max_trace / r1.max_trace - 10.0).abs() < 1e-9);
        let tight = BumpSpec { t: (0.01, 0.9), ..one };
        assert!(matches!(obstruction_demo(&tight, 0.5, &b, &grid), Err(InverseError::Margin(_))));
    }

    #[test]
    fn variable_coefficient_changes_h() {
        // with R independent of z the Neumann solution is flat in z for any a_dd, so H = 0
        let var = CoefficientField { a_lat: 1.0, a_dd: AxialProfile::Cosine { a0: 1.0, eps: 0.3 } };
        let c = ctx(var, RProfile::unit(), 16, 3, 4);
        let g = LateralField::from_fn(&c.grid, &c.s_basis.lateral.x, |t, x| t * x.sin());
        assert!(c.apply_h(&g).unwrap().max_abs() < 1e-10);
        let cv = ctx(var, RProfile::axial_ramp(1.0), 16, 3, 4);
        let cc = ctx(CoefficientField::unit(), RProfile::axial_ramp(1.0), 16, 3, 4);
        let d = cv.apply_h(&g).unwrap().axpy(-1.0, &cc.apply_h(&g).unwrap()).max_abs();
        assert!(d > 1e-4, "{d}");
    }
}
