//! Experiment configuration: a TOML document with one section per concern.
//! Closed-form inputs are named families with numeric parameters.

use crate::evolution::{GridKind, PotentialField, TimeGrid};
use crate::inverse::{BumpSpec, LateralField, RProfile};
use crate::spectral::{AxialInterval, AxialProfile, BoundaryVariant, CoefficientField, DomainSpec, LateralBc};
use crate::stability::{LiftingSpec, StabilityConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunSection {
    pub seed: u64,
    /// 0 means all available cores
    pub threads: usize,
    pub out: Option<String>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    pub lateral_length: f64,
    pub ell: f64,
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection { lateral_length: PI, ell: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoefficientSection {
    pub a_lat: f64,
    pub a_dd: AxialProfile,
}

impl Default for CoefficientSection {
    fn default() -> Self {
        CoefficientSection { a_lat: 1.0, a_dd: AxialProfile::Constant { a0: 1.0 } }
    }
}

impl CoefficientSection {
    pub fn field(&self) -> CoefficientField {
        CoefficientField { a_lat: self.a_lat, a_dd: self.a_dd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub alpha: f64,
    /// boundary variant tag, e.g. `neumann_axial`, `mn11`, `mixed_axial`
    pub variant: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { alpha: 0.6, variant: "neumann_axial".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridFamily {
    Uniform,
    Graded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub k: usize,
    pub j: usize,
    pub n_z: Option<usize>,
    pub n_x: Option<usize>,
    pub m: usize,
    pub t_end: f64,
    pub kind: GridFamily,
    pub grading: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { k: 4, j: 6, n_z: None, n_x: None, m: 32, t_end: 1.0, kind: GridFamily::Uniform, grading: 1.0 }
    }
}

impl GridSection {
    pub fn n_z(&self) -> usize {
        self.n_z.unwrap_or(8 * self.j)
    }

    pub fn time_grid(&self) -> Result<TimeGrid, ConfigError> {
        let g = match self.kind {
            GridFamily::Uniform => TimeGrid::uniform(self.t_end, self.m),
            GridFamily::Graded => TimeGrid::graded(self.t_end, self.m, self.grading),
        };
        g.map_err(|e| invalid("grid", e.to_string()))
    }

    /// Same grid with every resolution multiplied by `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        GridSection {
            k: self.k * factor,
            j: self.j * factor,
            n_z: Some(self.n_z() * factor),
            n_x: self.n_x.map(|n| n * factor),
            m: self.m * factor,
            ..self.clone()
        }
    }

    /// Only the time grid refined.
    pub fn refined_time(&self, factor: usize) -> Self {
        GridSection { m: self.m * factor, ..self.clone() }
    }

    pub fn kind(&self) -> GridKind {
        match self.kind {
            GridFamily::Uniform => GridKind::Uniform,
            GridFamily::Graded => GridKind::Graded { gamma: self.grading },
        }
    }
}

/// Named lateral-by-time source families `f(t, x')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceFamily {
    Zero,
    /// `A sin(n pi x'/L) t^2 e^{-t}`
    SinT2Exp { amplitude: f64, mode: usize },
    /// `A (c1 t + c2 t^2) sin(n pi x'/L)`
    Polynomial { amplitude: f64, mode: usize, c1: f64, c2: f64 },
    /// `sum_k (a_k t + b_k t^2) sin(k pi x'/L)` with seeded uniform coefficients
    Random { modes: usize, amplitude: f64 },
}

impl Default for SourceFamily {
    fn default() -> Self {
        SourceFamily::SinT2Exp { amplitude: 1.0, mode: 1 }
    }
}

fn lateral_shape(bc: LateralBc, mode: usize, x: f64, length: f64) -> f64 {
    match bc {
        LateralBc::Dirichlet => (mode as f64 * PI * x / length).sin(),
        LateralBc::Neumann => (mode as f64 * PI * x / length).cos(),
    }
}

impl SourceFamily {
    pub fn vanishes(&self) -> bool {
        match self {
            SourceFamily::Zero => true,
            SourceFamily::SinT2Exp { amplitude, .. } | SourceFamily::Polynomial { amplitude, .. } | SourceFamily::Random { amplitude, .. } => {
                *amplitude == 0.0
            }
        }
    }

    /// Samples on `grid x x`; lateral shapes follow the lateral boundary condition.
    pub fn sample(&self, grid: &TimeGrid, x: &[f64], length: f64, bc: LateralBc, seed: u64) -> LateralField {
        match *self {
            SourceFamily::Zero => LateralField::zeros(grid.len(), x.len()),
            SourceFamily::SinT2Exp { amplitude, mode } => {
                LateralField::from_fn(grid, x, |t, xp| amplitude * lateral_shape(bc, mode, xp, length) * t * t * (-t).exp())
            }
            SourceFamily::Polynomial { amplitude, mode, c1, c2 } => {
                LateralField::from_fn(grid, x, |t, xp| amplitude * (c1 * t + c2 * t * t) * lateral_shape(bc, mode, xp, length))
            }
            SourceFamily::Random { modes, amplitude } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c: Vec<(f64, f64)> = (0..modes).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
                let first = if bc == LateralBc::Dirichlet { 1 } else { 0 };
                LateralField::from_fn(grid, x, |t, xp| {
                    amplitude
                        * c.iter()
                            .enumerate()
                            .map(|(k, (a, b))| (a * t + b * t * t) * lateral_shape(bc, k + first, xp, length))
                            .sum::<f64>()
                })
            }
        }
    }

    fn validate(&self, field: &str) -> Result<(), ConfigError> {
        match self {
            SourceFamily::Zero => Ok(()),
            SourceFamily::SinT2Exp { amplitude, .. } | SourceFamily::Polynomial { amplitude, .. } if !amplitude.is_finite() => {
                Err(invalid(field, "amplitude must be finite"))
            }
            SourceFamily::Random { modes: 0, .. } => Err(invalid(field, "random family needs at least one mode")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSection {
    pub f: SourceFamily,
    pub r: RProfile,
    /// lower bound `c` for `|R(t, x', l)|`
    pub floor: f64,
}

impl Default for SourceSection {
    fn default() -> Self {
        SourceSection { f: SourceFamily::default(), r: RProfile::unit(), floor: 0.1 }
    }
}

/// `q(t, x') = q0 + q1 t sin(pi x'/L) + q2 t sin(2 pi x'/L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialSpec {
    pub q0: f64,
    pub q1: f64,
    pub q2: f64,
}

impl Default for PotentialSpec {
    fn default() -> Self {
        PotentialSpec { q0: 0.0, q1: 0.0, q2: 0.0 }
    }
}

impl PotentialSpec {
    pub fn sample(&self, grid: &TimeGrid, x: &[f64], length: f64) -> PotentialField {
        let values = grid
            .nodes
            .iter()
            .flat_map(|&t| {
                x.iter().map(move |&xp| self.q0 + t * (self.q1 * (PI * xp / length).sin() + self.q2 * (2.0 * PI * xp / length).sin()))
            })
            .collect();
        PotentialField::new(x.len(), values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub picard_tol: f64,
    pub picard_max: usize,
    /// recorded; the evaluator targets full double precision
    pub ml_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { picard_tol: 1e-10, picard_max: 100, ml_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlTableSection {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
}

impl Default for MlTableSection {
    fn default() -> Self {
        MlTableSection { alphas: vec![0.5, 0.9, 1.0, 1.5], betas: vec![1.0], x_min: 0.0, x_max: 50.0, points: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructSection {
    /// resolution factor between synthetic data and inversion grids
    pub data_factor: usize,
    /// pass threshold on the relative error against the ground truth
    pub max_relative_error: f64,
}

impl Default for ReconstructSection {
    fn default() -> Self {
        ReconstructSection { data_factor: 2, max_relative_error: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    pub gamma: f64,
    pub delta: f64,
    pub t_lo_fraction: f64,
    pub perturbations: Vec<f64>,
    pub ensemble: usize,
    /// lateral modes in each random ensemble source
    pub source_modes: usize,
    pub potential: PotentialSpec,
    /// perturbation direction `p = t sin(2 pi x'/L)` scaled by each magnitude
    pub lifting: LiftingSpec,
    pub lifting_floor: f64,
    /// also run at twice the resolution and report the trend
    pub refine: bool,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection {
            gamma: 0.8,
            delta: 0.5,
            t_lo_fraction: 0.1,
            perturbations: vec![1e-3, 1e-2, 1e-1],
            ensemble: 10,
            source_modes: 3,
            potential: PotentialSpec { q0: 0.5, q1: 0.5, q2: 0.0 },
            lifting: LiftingSpec::default(),
            lifting_floor: 1e-3,
            refine: true,
        }
    }
}

impl StabilitySection {
    pub fn config(&self, alpha: f64) -> StabilityConfig {
        StabilityConfig {
            alpha,
            gamma: self.gamma,
            delta: self.delta,
            t_lo_fraction: self.t_lo_fraction,
            perturbations: self.perturbations.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObstructionSection {
    pub amplitude: f64,
    /// supports as fractions of `T`, `L` and `l`
    pub t: (f64, f64),
    pub x: (f64, f64),
    pub z: (f64, f64),
    /// grid multipliers for the refinement study
    pub levels: Vec<usize>,
    pub max_trace: f64,
}

impl Default for ObstructionSection {
    fn default() -> Self {
        ObstructionSection { amplitude: 1.0, t: (0.1, 0.9), x: (0.1, 0.9), z: (-0.8, 0.8), levels: vec![1, 2], max_trace: 1e-3 }
    }
}

impl ObstructionSection {
    pub fn bump(&self, t_end: f64, length: f64, ell: f64) -> BumpSpec {
        BumpSpec {
            amplitude: self.amplitude,
            t: (self.t.0 * t_end, self.t.1 * t_end),
            x: (self.x.0 * length, self.x.1 * length),
            z: (self.z.0 * ell, self.z.1 * ell),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub domain: DomainSection,
    pub coefficients: CoefficientSection,
    pub model: ModelSection,
    pub grid: GridSection,
    pub source: SourceSection,
    pub potential: PotentialSpec,
    pub tolerances: Tolerances,
    pub ml_table: MlTableSection,
    pub reconstruct: ReconstructSection,
    pub stability: StabilitySection,
    pub obstruction: ObstructionSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        Self::from_toml(&text, &p)
    }

    pub fn variant(&self) -> Result<BoundaryVariant, ConfigError> {
        BoundaryVariant::parse(&self.model.variant).map_err(|e| invalid("model.variant", e.to_string()))
    }

    pub fn domain_for(&self, variant: &BoundaryVariant) -> Result<DomainSpec, ConfigError> {
        DomainSpec::new(self.domain.lateral_length, self.domain.ell, variant.interval()).map_err(|e| invalid("domain", e.to_string()))
    }

    pub fn half_domain(&self) -> Result<DomainSpec, ConfigError> {
        DomainSpec::new(self.domain.lateral_length, self.domain.ell, AxialInterval::Half).map_err(|e| invalid("domain", e.to_string()))
    }

    /// Every check that does not need a solve.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(invalid(field, format!("must be positive, got {v}"))) };
        positive("domain.lateral_length", self.domain.lateral_length)?;
        positive("domain.ell", self.domain.ell)?;
        positive("coefficients.a_lat", self.coefficients.a_lat)?;
        let variant = self.variant()?;
        let domain = self.domain_for(&variant)?;
        self.coefficients.field().validate(&domain).map_err(|e| invalid("coefficients.a_dd", e.to_string()))?;
        if !(self.model.alpha > 0.0 && self.model.alpha < 2.0) {
            return Err(invalid("model.alpha", format!("must lie in (0, 2), got {}", self.model.alpha)));
        }
        let g = &self.grid;
        if g.k == 0 || g.j == 0 {
            return Err(invalid("grid.k / grid.j", "cutoffs must be at least 1"));
        }
        if g.n_z() < 8 * g.j {
            return Err(invalid("grid.n_z", format!("needs at least 8 J = {} intervals, got {}", 8 * g.j, g.n_z())));
        }
        if let Some(nx) = g.n_x {
            if nx < 2 * g.k + 2 {
                return Err(invalid("grid.n_x", format!("needs at least 2 K + 2 = {} points", 2 * g.k + 2)));
            }
        }
        if g.m == 0 {
            return Err(invalid("grid.m", "needs at least one time step"));
        }
        positive("grid.t_end", g.t_end)?;
        if g.kind == GridFamily::Graded && !(g.grading >= 1.0) {
            return Err(invalid("grid.grading", format!("must be >= 1, got {}", g.grading)));
        }
        self.source.f.validate("source.f")?;
        positive("source.floor", self.source.floor)?;
        positive("tolerances.picard_tol", self.tolerances.picard_tol)?;
        positive("tolerances.ml_tol", self.tolerances.ml_tol)?;
        if self.tolerances.picard_max == 0 {
            return Err(invalid("tolerances.picard_max", "must be at least 1"));
        }
        let ml = &self.ml_table;
        if ml.alphas.iter().any(|a| !(*a > 0.0 && *a <= 2.0)) {
            return Err(invalid("ml_table.alphas", "every alpha must lie in (0, 2]"));
        }
        if ml.betas.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(invalid("ml_table.betas", "every beta must be positive"));
        }
        if !(ml.x_min >= 0.0 && ml.x_max > ml.x_min && ml.x_max.is_finite()) || ml.points < 2 {
            return Err(invalid("ml_table", "needs 0 <= x_min < x_max and points >= 2"));
        }
        if self.reconstruct.data_factor < 2 {
            return Err(invalid("reconstruct.data_factor", "data must come from a strictly finer grid (factor >= 2)"));
        }
        let st = &self.stability;
        if st.ensemble == 0 || st.source_modes == 0 {
            return Err(invalid("stability.ensemble", "ensemble and source_modes must be at least 1"));
        }
        st.config(self.model.alpha.min(1.0)).validate().map_err(|e| invalid("stability", e.to_string()))?;
        positive("stability.lifting_floor", st.lifting_floor)?;
        let ob = &self.obstruction;
        if ob.levels.is_empty() || ob.levels.contains(&0) {
            return Err(invalid("obstruction.levels", "needs positive grid multipliers"));
        }
        for (name, (lo, hi)) in [("obstruction.t", ob.t), ("obstruction.x", ob.x)] {
            if !(0.0 < lo && lo < hi && hi < 1.0) {
                return Err(invalid(name, "support fractions must satisfy 0 < lo < hi < 1"));
            }
        }
        if !(-1.0 < ob.z.0 && ob.z.0 < ob.z.1 && ob.z.1 < 1.0) {
            return Err(invalid("obstruction.z", "support fractions must satisfy -1 < lo < hi < 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with the effective seed; thread
    /// count and output directory do not enter.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.run.threads = 0;
        canon.run.out = None;
        let json = serde_json::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
