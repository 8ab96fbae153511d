//! Experiment orchestration behind the `fracsource` binary: load and validate
//! a config, run one subcommand inside a worker pool, write CSV and JSON.

use crate::config::{ConfigError, ExperimentConfig, GridSection, PotentialSpec, SourceFamily};
use crate::evolution::{boundary_traces, caputo_l1_residual, forward_solve_potential, EvolutionError, VolterraOptions};
use crate::gamma::rgamma;
use crate::inverse::{
    obstruction_demo, picard_reconstruct, project_source, Discretization, InverseContext, InverseError, LateralField, PicardOptions,
};
use crate::mittag_leffler::{ml_eval, MlError, MlQuery};
use crate::output::{read_trace_csv, CsvTable, OutputDir, OutputError, Stamp};
use crate::spectral::{
    assemble_basis_on, default_lateral_points, AxialBc, BoundaryVariant, DomainSpec, LateralBc, SpectralBasis, SpectralError,
};
use crate::stability::{coefficient_experiment, stability_ratio, StabilityError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    MlTable,
    Forward,
    Reconstruct,
    Stability,
    Coeff,
    Obstruction,
}

impl Subcommand {
    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::MlTable => "ml-table",
            Subcommand::Forward => "forward",
            Subcommand::Reconstruct => "reconstruct",
            Subcommand::Stability => "stability",
            Subcommand::Coeff => "coeff",
            Subcommand::Obstruction => "obstruction",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MlOverrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub points: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    /// measured trace for `reconstruct`
    pub data: Option<PathBuf>,
    pub ml: MlOverrides,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Io { .. }) | CliError::Io(_) => 4,
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl From<OutputError> for CliError {
    fn from(e: OutputError) -> Self {
        match e {
            OutputError::Io { .. } => CliError::Io(e.to_string()),
            OutputError::Format { .. } => CliError::Input(e.to_string()),
        }
    }
}

// Non-convergence of an iteration maps to 3; every other numerical rejection
// traces back to an inadmissible parameter and maps to 2.
impl From<MlError> for CliError {
    fn from(e: MlError) -> Self {
        match e {
            MlError::NoConvergence { .. } => CliError::Divergence(e.to_string()),
            MlError::Domain(_) => CliError::Input(e.to_string()),
        }
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<EvolutionError> for CliError {
    fn from(e: EvolutionError) -> Self {
        match e {
            EvolutionError::Ml(m) => m.into(),
            EvolutionError::Divergence { .. } | EvolutionError::Stiffness { .. } => CliError::Divergence(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<InverseError> for CliError {
    fn from(e: InverseError) -> Self {
        match e {
            InverseError::Evolution(e) => e.into(),
            InverseError::Divergence { .. } => CliError::Divergence(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<StabilityError> for CliError {
    fn from(e: StabilityError) -> Self {
        match e {
            StabilityError::Evolution(e) => e.into(),
            StabilityError::Inverse(e) => e.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
    pub relation: &'static str,
}

impl Check {
    pub fn le(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check { name: name.into(), passed: value <= limit, value, limit, relation: "<=" }
    }

    pub fn ge(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check { name: name.into(), passed: value >= limit, value, limit, relation: ">=" }
    }

    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Check { name: name.into(), passed: ok, value: ok as u8 as f64, limit: 1.0, relation: "==" }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

/// Written as `report.json`; timings go to `timings.json` so every other
/// file is a pure function of (config, seed).
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub subcommand: String,
    pub config: ExperimentConfig,
    pub outputs: Vec<String>,
    pub summary: Value,
    pub checks: Vec<Check>,
    pub passed: bool,
    #[serde(skip)]
    pub timings: Vec<Timing>,
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub config_hash: String,
}

pub fn load_config(cmd: Subcommand, opts: &RunOptions) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &opts.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if cmd == Subcommand::MlTable => ExperimentConfig::default(),
        None => {
            return Err(ConfigError::Invalid { field: "--config".into(), message: format!("required for {}", cmd.name()) }.into());
        }
    };
    if let Some(s) = opts.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = opts.threads {
        cfg.run.threads = t;
    }
    let ml = &opts.ml;
    if let Some(a) = ml.alpha {
        cfg.ml_table.alphas = vec![a];
    }
    if let Some(b) = ml.beta {
        cfg.ml_table.betas = vec![b];
    }
    if let Some(x) = ml.x_min {
        cfg.ml_table.x_min = x;
    }
    if let Some(x) = ml.x_max {
        cfg.ml_table.x_max = x;
    }
    if let Some(n) = ml.points {
        cfg.ml_table.points = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Load, run and write everything; the report is also returned.
pub fn run(cmd: Subcommand, opts: &RunOptions) -> Result<RunReport, CliError> {
    let cfg = load_config(cmd, opts)?;
    let hash = cfg.hash();
    let out_dir = opts.out.clone().or_else(|| cfg.run.out.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.threads)
        .build()
        .map_err(|e| CliError::Input(format!("cannot start worker pool: {e}")))?;
    let out = OutputDir::create(&out_dir, Stamp::new(&hash, cfg.run.seed))?;
    let mut runner = Runner { cfg, out, checks: Vec::new(), timings: Vec::new(), clock: Instant::now() };
    let start = Instant::now();
    let summary = pool.install(|| match cmd {
        Subcommand::MlTable => runner.ml_table(),
        Subcommand::Forward => runner.forward(),
        Subcommand::Reconstruct => runner.reconstruct(opts.data.as_deref()),
        Subcommand::Stability => runner.stability(),
        Subcommand::Coeff => runner.coeff(),
        Subcommand::Obstruction => runner.obstruction(),
    })?;
    runner.timings.push(Timing { phase: "total".into(), seconds: start.elapsed().as_secs_f64() });

    let mut echo = runner.cfg.clone();
    echo.run.threads = 0;
    echo.run.out = None;
    let mut outputs = runner.out.written.clone();
    outputs.extend(["report.json".to_string(), "timings.json".to_string()]);
    let passed = runner.checks.iter().all(|c| c.passed);
    let report = RunReport {
        subcommand: cmd.name().into(),
        config: echo,
        outputs,
        summary,
        checks: runner.checks,
        passed,
        timings: runner.timings,
        out_dir,
        config_hash: hash,
    };
    runner.out.json("report.json", "fracsource/report/1", &report)?;
    runner.out.json("timings.json", "fracsource/timings/1", &json!({ "phases": report.timings }))?;
    Ok(report)
}

struct Runner {
    cfg: ExperimentConfig,
    out: OutputDir,
    checks: Vec<Check>,
    timings: Vec<Timing>,
    clock: Instant,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

impl Runner {
    fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        self.timings.push(Timing { phase: phase.into(), seconds: (now - self.clock).as_secs_f64() });
        self.clock = now;
    }

    fn seed(&self) -> u64 {
        self.cfg.run.seed
    }

    fn basis_for(&self, g: &GridSection, domain: &DomainSpec, variant: &BoundaryVariant) -> Result<SpectralBasis, CliError> {
        let n_x = g.n_x.unwrap_or_else(|| default_lateral_points(g.k));
        Ok(assemble_basis_on(domain, &self.cfg.coefficients.field(), variant, g.k, g.j, g.n_z(), n_x)?)
    }

    fn ml_table(&mut self) -> Result<Value, CliError> {
        let ml = self.cfg.ml_table.clone();
        let xs = linspace(ml.x_min, ml.x_max, ml.points);
        let mut tables = Vec::new();
        for &alpha in &ml.alphas {
            for &beta in &ml.betas {
                let rows: Vec<(f64, f64, f64)> = xs
                    .par_iter()
                    .map(|&x| Ok((x, ml_eval(MlQuery::new(alpha, beta, x)?)?, ml_eval(MlQuery::new(alpha, alpha + beta, x)?)?)))
                    .collect::<Result<_, MlError>>()?;
                let mut table = CsvTable::new(&[("x", "1"), ("value", "1"), ("bound_ratio", "1")]);
                let (mut bound, mut recurrence) = (0.0f64, 0.0f64);
                for &(x, e, e_shift) in &rows {
                    let ratio = (1.0 + x) * e.abs();
                    bound = bound.max(ratio);
                    let rg = rgamma(beta);
                    let scale = 1f64.max(rg.abs()).max((x * e_shift).abs());
                    recurrence = recurrence.max((e - (rg - x * e_shift)).abs() / scale);
                    table.row(vec![x.into(), e.into(), ratio.into()]);
                }
                let name = format!("ml_table_a{alpha}_b{beta}.csv");
                self.out.csv(&name, &format!("E_(alpha={alpha},beta={beta})(-x)"), &table)?;
                let tag = format!("alpha={alpha},beta={beta}");
                self.checks.push(Check::holds(format!("finite[{tag}]"), rows.iter().all(|r| r.1.is_finite())));
                self.checks.push(Check::le(format!("recurrence[{tag}]"), recurrence, 1e-9));
                // decay like 1/(1+x) only below alpha = 2
                if alpha < 2.0 {
                    self.checks.push(Check::le(format!("bound_ratio[{tag}]"), bound, 10.0));
                }
                let mut closed = None;
                if alpha == 1.0 && beta == 1.0 {
                    let err = rows.iter().map(|(x, e, _)| (e - (-x).exp()).abs() / (-x).exp()).fold(0.0, f64::max);
                    self.checks.push(Check::le(format!("exp_identity[{tag}]"), err, 1e-12));
                    closed = Some(err);
                } else if alpha == 2.0 && beta == 1.0 {
                    let err = rows.iter().map(|(x, e, _)| (e - x.sqrt().cos()).abs()).fold(0.0, f64::max);
                    self.checks.push(Check::le(format!("cos_identity[{tag}]"), err, 1e-10));
                    closed = Some(err);
                }
                tables.push(json!({
                    "alpha": alpha, "beta": beta, "file": name, "max_bound_ratio": bound,
                    "recurrence_error": recurrence, "closed_form_error": closed,
                }));
            }
        }
        self.lap("evaluate");
        let summary = json!({ "tables": tables });
        self.out.json("ml_table.json", "fracsource/ml_table/1", &summary)?;
        Ok(summary)
    }

    fn forward(&mut self) -> Result<Value, CliError> {
        let cfg = self.cfg.clone();
        let variant = cfg.variant()?;
        let domain = cfg.domain_for(&variant)?;
        let basis = self.basis_for(&cfg.grid, &domain, &variant)?;
        self.lap("basis");
        let length = domain.lateral_length;
        let alpha = cfg.model.alpha;
        let solve = |g: &GridSection| -> Result<_, CliError> {
            let grid = g.time_grid()?;
            let f = cfg.source.f.sample(&grid, &basis.lateral.x, length, variant.lateral, cfg.run.seed);
            let src = project_source(&basis, &f, &cfg.source.r, &grid)?;
            let q = cfg.potential.sample(&grid, &basis.lateral.x, length);
            let u = forward_solve_potential(&basis, alpha, &src, &q, &grid, &VolterraOptions::default())?;
            let residual = if alpha < 1.0 { Some(caputo_l1_residual(&basis, alpha, &u, &src, Some(&q), &grid)?) } else { None };
            Ok((grid, src, u, residual))
        };
        let (grid, src, u, residual) = solve(&cfg.grid)?;
        self.lap("solve");

        let mut modal = CsvTable::new(&[("t", "time"), ("mode", "index"), ("k", "index"), ("j", "index"), ("coefficient", "u")]);
        for (i, &t) in grid.nodes.iter().enumerate() {
            for (n, (m, c)) in basis.modes.iter().zip(u.slice(i)).enumerate() {
                modal.row(vec![t.into(), n.into(), m.k.into(), m.j.into(), (*c).into()]);
            }
        }
        self.out.csv("modal.csv", "modal coefficients of u", &modal)?;
        let traces = boundary_traces(&u, &basis);
        let mut face = CsvTable::new(&[("t", "time"), ("x_index", "index"), ("u_face", "u"), ("dzu_face", "u/length")]);
        for (i, &t) in grid.nodes.iter().enumerate() {
            for (p, (v, d)) in traces.dirichlet_at(i).iter().zip(traces.neumann_at(i)).enumerate() {
                face.row(vec![t.into(), p.into(), (*v).into(), (*d).into()]);
            }
        }
        self.out.csv("face_trace.csv", "u and u_z on the face z = l", &face)?;
        let mut summary_csv = CsvTable::new(&[
            ("k", "index"),
            ("j", "index"),
            ("mu", "1/length^2"),
            ("nu", "1/length^2"),
            ("lambda", "1/length^2"),
            ("endpoint_derivative", "1/length^(3/2)"),
        ]);
        for m in &basis.modes {
            summary_csv.row(vec![m.k.into(), m.j.into(), m.mu.into(), m.nu.into(), m.lambda.into(), m.axial_endpoint_derivative.into()]);
        }
        self.out.csv("basis.csv", "basis summary", &summary_csv)?;

        let finite = u.as_slice().iter().all(|v| v.is_finite());
        self.checks.push(Check::holds("finite_solution", finite));
        if cfg.source.f.vanishes() {
            self.checks.push(Check::holds("zero_source_zero_field", u.as_slice().iter().all(|v| *v == 0.0)));
        }
        let scale = max_abs(&traces.dirichlet_face).max(max_abs(&traces.neumann_face)).max(f64::MIN_POSITIVE);
        match variant.axial {
            AxialBc::Dirichlet | AxialBc::NeumannDirichlet => {
                self.checks.push(Check::le("dirichlet_face_vanishes", max_abs(&traces.dirichlet_face) / scale, 1e-12))
            }
            AxialBc::Neumann => self.checks.push(Check::le("neumann_face_vanishes", max_abs(&traces.neumann_face) / scale, 1e-12)),
        }
        let source_norm = src.l2_norm(&grid);
        let solution_norm = u.l2_norm(&grid);
        let mut refine = Value::Null;
        if let Some(r) = &residual {
            let coarse = max_abs(r);
            let (_, _, _, fine) = solve(&cfg.grid.refined_time(2))?;
            let fine = max_abs(fine.as_deref().unwrap_or(&[]));
            let ratio = if fine > 0.0 { coarse / fine } else if coarse == 0.0 { f64::INFINITY } else { 0.0 };
            self.checks.push(Check::ge("residual_refinement_ratio", ratio, 1.5));
            refine = json!({ "m": [cfg.grid.m, 2 * cfg.grid.m], "max_residual": [coarse, fine], "ratio": if ratio.is_finite() { json!(ratio) } else { Value::Null } });
            self.lap("refine");
        }
        let summary = json!({
            "alpha": alpha,
            "variant": variant.tag(),
            "modes": basis.len(),
            "nodes": grid.len(),
            "source_norm": source_norm,
            "solution_norm": solution_norm,
            "solution_to_source": if source_norm > 0.0 { json!(solution_norm / source_norm) } else { Value::Null },
            "lambda_min": basis.modes.iter().map(|m| m.lambda).fold(f64::INFINITY, f64::min),
            "max_residual": residual.as_deref().map(max_abs),
            "refinement": refine,
        });
        let mut body = summary.clone();
        body["t"] = json!(grid.nodes);
        body["residual"] = json!(residual);
        self.out.json("residual.json", "fracsource/residual/1", &body)?;
        Ok(summary)
    }

    fn inverse_context(&self, g: &GridSection, lateral: LateralBc) -> Result<InverseContext, CliError> {
        let cfg = &self.cfg;
        let disc = Discretization { k: g.k, j: g.j, n_z: g.n_z(), n_x: g.n_x };
        Ok(InverseContext::new(
            cfg.domain.lateral_length,
            cfg.domain.ell,
            cfg.coefficients.field(),
            lateral,
            disc,
            cfg.model.alpha,
            &g.time_grid()?,
            cfg.source.r,
            cfg.source.floor,
        )?)
    }

    fn reconstruct(&mut self, data: Option<&Path>) -> Result<Value, CliError> {
        let cfg = self.cfg.clone();
        let lateral = cfg.variant()?.lateral;
        let length = cfg.domain.lateral_length;
        let ctx = self.inverse_context(&cfg.grid, lateral)?;
        let xs = ctx.lateral().x.clone();
        self.lap("setup");
        let (trace, truth) = match data {
            Some(path) => (read_trace(path, &ctx)?, None),
            None => {
                let factor = cfg.reconstruct.data_factor;
                let fine = self.inverse_context(&cfg.grid.refined(factor), lateral)?;
                let f_fine = cfg.source.f.sample(&fine.grid, &fine.lateral().x, length, lateral, cfg.run.seed);
                let trace = fine.measure(&f_fine)?.resample(fine.lateral(), ctx.lateral(), factor);
                (trace, Some(cfg.source.f.sample(&ctx.grid, &xs, length, lateral, cfg.run.seed)))
            }
        };
        self.lap("data");
        let h = ctx.compute_h(trace.clone())?;
        self.out.csv("trace.csv", "measured face trace u(t,x',l)", &field_table(&trace, &ctx, "u"))?;
        self.out.csv("h.csv", "data term h", &field_table(&h, &ctx, "source"))?;
        let opts = PicardOptions { tol: cfg.tolerances.picard_tol, max_iter: cfg.tolerances.picard_max };
        let res = match picard_reconstruct(&h, &ctx, &opts) {
            Ok(r) => r,
            Err(InverseError::Divergence { iterations, last, history }) => {
                let body = json!({
                    "converged": false, "iterations": iterations, "residuals": history,
                    "contraction": Value::Array(vec![]), "defect": Value::Null, "h_norm": ctx.norm(&h),
                    "relative_error": Value::Null, "h_relative_error": Value::Null,
                });
                self.out.json("iterations.json", "fracsource/iterations/1", &body)?;
                return Err(InverseError::Divergence { iterations, last, history: vec![] }.into());
            }
            Err(e) => return Err(e.into()),
        };
        self.lap("picard");
        self.out.csv("f_hat.csv", "reconstructed f(t,x')", &field_table(&res.f_hat, &ctx, "source"))?;

        let rel = |g: &LateralField| {
            truth.as_ref().map(|tr| {
                let n = ctx.norm(tr);
                let d = ctx.norm(&g.axpy(-1.0, tr));
                if n > 0.0 {
                    d / n
                } else {
                    d
                }
            })
        };
        let (err, h_err) = (rel(&res.f_hat), rel(&h));
        let tail = res.contraction.iter().skip(3).copied().fold(0.0, f64::max);
        let defect_limit = (10.0 * opts.tol).max(1e-9) * res.h_norm;
        self.checks.push(Check::le("defect", res.defect, defect_limit));
        self.checks.push(Check::le("contraction_after_warmup", tail, 0.9));
        if let Some(e) = err {
            self.checks.push(Check::le("relative_error", e, cfg.reconstruct.max_relative_error));
        }
        let body = json!({
            "converged": true,
            "iterations": res.iterations,
            "residuals": res.residuals,
            "contraction": res.contraction,
            "defect": res.defect,
            "h_norm": res.h_norm,
            "relative_error": err,
            "h_relative_error": h_err,
        });
        self.out.json("iterations.json", "fracsource/iterations/1", &body)?;
        Ok(json!({
            "data": if data.is_some() { "file" } else { "synthetic" },
            "data_factor": if data.is_some() { Value::Null } else { json!(cfg.reconstruct.data_factor) },
            "h_is_zero": ctx.h_is_zero(),
            "iterations": res.iterations,
            "max_contraction_after_warmup": tail,
            "defect": res.defect,
            "h_norm": res.h_norm,
            "relative_error": err,
            "h_relative_error": h_err,
        }))
    }

    fn levels(&self) -> Vec<usize> {
        if self.cfg.stability.refine {
            vec![1, 2]
        } else {
            vec![1]
        }
    }

    fn half_basis(&self, g: &GridSection) -> Result<SpectralBasis, CliError> {
        let domain = self.cfg.half_domain()?;
        self.basis_for(g, &domain, &BoundaryVariant::MIXED_AXIAL)
    }

    fn stability(&mut self) -> Result<Value, CliError> {
        let cfg = self.cfg.clone();
        let st = &cfg.stability;
        let scfg = st.config(cfg.model.alpha);
        let length = cfg.domain.lateral_length;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        let seeds: Vec<u64> = (0..st.ensemble).map(|_| rng.random()).collect();
        let family = SourceFamily::Random { modes: st.source_modes, amplitude: 1.0 };
        let mut table = CsvTable::new(&[
            ("level", "index"),
            ("m", "count"),
            ("k", "count"),
            ("j", "count"),
            ("sample", "index"),
            ("source_norm", "source"),
            ("linf_h32", "flux"),
            ("linf_hdelta", "flux"),
            ("lip_hdelta", "flux/time"),
            ("data_norm", "flux"),
            ("ratio", "1"),
        ]);
        let mut levels = Vec::new();
        let mut scaling = None;
        for (li, factor) in self.levels().into_iter().enumerate() {
            let g = cfg.grid.refined(factor);
            let basis = self.half_basis(&g)?;
            let grid = g.time_grid()?;
            let q = st.potential.sample(&grid, &basis.lateral.x, length);
            let sources: Vec<LateralField> = seeds.iter().map(|&s| family.sample(&grid, &basis.lateral.x, length, LateralBc::Dirichlet, s)).collect();
            let reports = sources
                .par_iter()
                .map(|f| stability_ratio(&basis, &scfg, f, &cfg.source.r, cfg.source.floor, &q, &grid))
                .collect::<Result<Vec<_>, _>>()?;
            let mut ratios = Vec::new();
            for (s, r) in reports.iter().enumerate() {
                table.row(vec![
                    li.into(),
                    g.m.into(),
                    g.k.into(),
                    g.j.into(),
                    s.into(),
                    r.source_norm.into(),
                    r.trace.linf_h32.into(),
                    r.trace.linf_hdelta.into(),
                    r.trace.lip_hdelta.into(),
                    r.trace.data_norm().into(),
                    r.ratio.value().into(),
                ]);
                ratios.extend(r.ratio.value());
            }
            if li == 0 {
                let big = stability_ratio(&basis, &scfg, &sources[0].scale(1e3), &cfg.source.r, cfg.source.floor, &q, &grid)?;
                if let (Some(a), Some(b)) = (reports[0].ratio.value(), big.ratio.value()) {
                    scaling = Some((a - b).abs() / a);
                }
            }
            let mx = ratios.iter().copied().fold(0.0, f64::max);
            let mn = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            levels.push(json!({ "m": g.m, "k": g.k, "j": g.j, "max_ratio": mx, "min_ratio": mn, "spread": mx / mn, "samples": ratios.len() }));
            self.checks.push(Check::le(format!("spread[level {li}]"), mx / mn, 20.0));
            self.lap(&format!("level {li}"));
        }
        self.out.csv("stability.csv", "stability ratios per source", &table)?;
        let trend = if levels.len() > 1 {
            let d = levels[1]["max_ratio"].as_f64().unwrap() / levels[0]["max_ratio"].as_f64().unwrap() - 1.0;
            self.checks.push(Check::le("max_ratio_refinement_change", d.abs(), 0.15));
            Some(d)
        } else {
            None
        };
        if let Some(s) = scaling {
            self.checks.push(Check::le("scaling_invariance", s, 1e-12));
        }
        let summary = json!({
            "alpha": cfg.model.alpha, "gamma": st.gamma, "delta": st.delta,
            "ensemble": st.ensemble, "levels": levels, "max_ratio_change": trend, "scaling_error": scaling,
        });
        self.out.json("stability.json", "fracsource/stability/1", &summary)?;
        Ok(summary)
    }

    fn coeff(&mut self) -> Result<Value, CliError> {
        let cfg = self.cfg.clone();
        let st = &cfg.stability;
        let scfg = st.config(cfg.model.alpha);
        let length = cfg.domain.lateral_length;
        let mut table = CsvTable::new(&[
            ("level", "index"),
            ("m", "count"),
            ("k", "count"),
            ("j", "count"),
            ("eps", "potential"),
            ("lhs", "potential"),
            ("data_norm", "flux"),
            ("constant", "potential/flux"),
            ("certified", "bool"),
            ("floor_min", "u"),
            ("max_difference_trace", "flux"),
        ]);
        let mut levels = Vec::new();
        for (li, factor) in self.levels().into_iter().enumerate() {
            let g = cfg.grid.refined(factor);
            let basis = self.half_basis(&g)?;
            let grid = g.time_grid()?;
            let q1 = st.potential.sample(&grid, &basis.lateral.x, length);
            // eps = 0 is the q1 = q2 control
            let eps: Vec<f64> = std::iter::once(0.0).chain(st.perturbations.iter().copied()).collect();
            let reports = eps
                .par_iter()
                .map(|&e| {
                    let q2 = PotentialSpec { q2: st.potential.q2 + e, ..st.potential.clone() }.sample(&grid, &basis.lateral.x, length);
                    let q2 = if e == 0.0 { q1.clone() } else { q2 };
                    coefficient_experiment(&basis, &scfg, &q1, &q2, &st.lifting, st.lifting_floor, &grid)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut consts = Vec::new();
            for (e, r) in eps.iter().zip(&reports) {
                table.row(vec![
                    li.into(),
                    g.m.into(),
                    g.k.into(),
                    g.j.into(),
                    (*e).into(),
                    r.lhs.into(),
                    r.trace.data_norm().into(),
                    r.constant.into(),
                    r.certified.into(),
                    r.floor_min.into(),
                    r.max_difference_trace.into(),
                ]);
                if *e != 0.0 {
                    consts.extend(r.constant);
                    self.checks.push(Check::holds(format!("certified[level {li}, eps={e}]"), r.certified));
                }
            }
            let mx = consts.iter().copied().fold(0.0, f64::max);
            let mn = consts.iter().copied().fold(f64::INFINITY, f64::min);
            let signal = reports[1..].iter().map(|r| r.max_difference_trace).fold(0.0, f64::max);
            self.checks.push(Check::le(format!("constant_spread[level {li}]"), mx / mn, 2.0));
            self.checks.push(Check::le(format!("control_difference[level {li}]"), reports[0].max_difference_trace, 1e-10 * signal));
            levels.push(json!({
                "m": g.m, "k": g.k, "j": g.j, "t_lo": reports[0].t_lo,
                "constants": consts, "max_constant": mx, "min_constant": mn, "control_difference": reports[0].max_difference_trace,
            }));
            self.lap(&format!("level {li}"));
        }
        self.out.csv("coeff.csv", "potential-difference estimate per perturbation", &table)?;
        let trend = if levels.len() > 1 {
            Some(levels[1]["max_constant"].as_f64().unwrap() / levels[0]["max_constant"].as_f64().unwrap() - 1.0)
        } else {
            None
        };
        let summary = json!({
            "alpha": cfg.model.alpha, "delta": st.delta, "t_lo_fraction": st.t_lo_fraction,
            "perturbations": st.perturbations, "levels": levels, "max_constant_change": trend,
        });
        self.out.json("coeff.json", "fracsource/coeff/1", &summary)?;
        Ok(summary)
    }

    fn obstruction(&mut self) -> Result<Value, CliError> {
        let cfg = self.cfg.clone();
        let variant = cfg.variant()?;
        let domain = cfg.domain_for(&variant)?;
        let ob = &cfg.obstruction;
        let chi = ob.bump(cfg.grid.t_end, domain.lateral_length, domain.ell);
        let mut table = CsvTable::new(&[
            ("level", "count"),
            ("m", "count"),
            ("k", "count"),
            ("j", "count"),
            ("f_norm", "source"),
            ("face_value_upper", "1/source"),
            ("face_derivative_upper", "1/source"),
            ("face_value_lower", "1/source"),
            ("face_derivative_lower", "1/source"),
            ("side_values", "1/source"),
            ("side_derivatives", "1/source"),
            ("max_trace", "1/source"),
            ("u_minus_chi", "1/source"),
        ]);
        let mut traces = Vec::new();
        for &level in &ob.levels {
            let g = cfg.grid.refined(level);
            let basis = self.basis_for(&g, &domain, &variant)?;
            let grid = g.time_grid()?;
            let r = obstruction_demo(&chi, cfg.model.alpha, &basis, &grid)?;
            // traces per unit ||F||
            let n = if r.f_norm > 0.0 { r.f_norm } else { 1.0 };
            table.row(vec![
                level.into(),
                g.m.into(),
                g.k.into(),
                g.j.into(),
                r.f_norm.into(),
                (r.face_value_upper / n).into(),
                (r.face_derivative_upper / n).into(),
                (r.face_value_lower / n).into(),
                (r.face_derivative_lower / n).into(),
                (r.side_values / n).into(),
                (r.side_derivatives / n).into(),
                (r.max_trace / n).into(),
                (r.u_minus_chi / n).into(),
            ]);
            traces.push(json!({ "level": level, "m": g.m, "k": g.k, "j": g.j, "report": r, "normalized_max_trace": r.max_trace / n }));
            self.lap(&format!("level {level}"));
        }
        self.out.csv("obstruction.csv", "boundary traces of u per unit source norm", &table)?;
        let norm: Vec<f64> = traces.iter().map(|t| t["normalized_max_trace"].as_f64().unwrap()).collect();
        self.checks.push(Check::le("finest_max_trace", *norm.last().unwrap(), ob.max_trace));
        if norm.len() > 1 {
            self.checks.push(Check::holds("traces_decrease", norm.windows(2).all(|w| w[1] < w[0])));
        }
        let summary = json!({ "bump": chi, "alpha": cfg.model.alpha, "levels": traces });
        self.out.json("obstruction.json", "fracsource/obstruction/1", &summary)?;
        Ok(summary)
    }
}

fn field_table(f: &LateralField, ctx: &InverseContext, unit: &'static str) -> CsvTable {
    let mut t = CsvTable::new(&[("t", "time"), ("x", "length"), ("value", unit)]);
    for (i, &tt) in ctx.grid.nodes.iter().enumerate() {
        for (x, v) in ctx.lateral().x.iter().zip(f.node(i)) {
            t.row(vec![tt.into(), (*x).into(), (*v).into()]);
        }
    }
    t
}

/// Rows must cover the inversion grid in `t`-major order at its lateral points.
fn read_trace(path: &Path, ctx: &InverseContext) -> Result<LateralField, CliError> {
    let rows = read_trace_csv(path)?;
    let xs = &ctx.lateral().x;
    let (nt, nx) = (ctx.grid.len(), xs.len());
    let bad = |m: String| CliError::Input(format!("{}: {m}", path.display()));
    if rows.len() != nt * nx {
        return Err(bad(format!("expected {nt} x {nx} = {} rows, found {}", nt * nx, rows.len())));
    }
    let (tt, xx) = (1e-9 * ctx.grid.t_end.max(1.0), 1e-9 * ctx.lateral().length.max(1.0));
    let mut field = LateralField::zeros(nt, nx);
    for (r, [t, x, v]) in rows.iter().enumerate() {
        let (i, p) = (r / nx, r % nx);
        if (t - ctx.grid.nodes[i]).abs() > tt || (x - xs[p]).abs() > xx {
            return Err(bad(format!("row {} at (t, x) = ({t}, {x}) expected ({}, {})", r + 1, ctx.grid.nodes[i], xs[p])));
        }
        field.node_mut(i)[p] = *v;
    }
    Ok(field)
}
