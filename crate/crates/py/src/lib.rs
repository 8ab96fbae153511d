use fracsource::cli::{self, CliError, RunOptions, Subcommand};
use fracsource::evolution::{self, SpaceTimeField};
use fracsource::inverse::{self, Discretization, InverseContext, LateralField, PicardOptions, RProfile};
use fracsource::mittag_leffler as ml;
use fracsource::spectral::{self, AxialInterval, AxialProfile, BoundaryVariant, CoefficientField, DomainSpec, LateralBc};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::f64::consts::PI;
use std::path::PathBuf;

fn invalid(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn evolution_err(e: evolution::EvolutionError) -> PyErr {
    match e {
        evolution::EvolutionError::Divergence { .. } | evolution::EvolutionError::Stiffness { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => invalid(e),
    }
}

fn inverse_err(e: inverse::InverseError) -> PyErr {
    match e {
        inverse::InverseError::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => invalid(e),
    }
}

fn cli_err(e: CliError) -> PyErr {
    // same split as the exit codes: 4 I/O, 3 divergence, otherwise bad input
    match e.exit_code() {
        4 => PyOSError::new_err(e.to_string()),
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => invalid(e),
    }
}

fn coefficients(a_lat: f64, a0: f64, eps: f64) -> CoefficientField {
    let a_dd = if eps == 0.0 { AxialProfile::Constant { a0 } } else { AxialProfile::Cosine { a0, eps } };
    CoefficientField { a_lat, a_dd }
}

fn lateral_field(rows: Vec<Vec<f64>>, n_nodes: usize, n_x: usize) -> PyResult<LateralField> {
    if rows.len() != n_nodes || rows.iter().any(|r| r.len() != n_x) {
        return Err(invalid(format!("expected {n_nodes} rows of {n_x} values")));
    }
    Ok(LateralField { n_nodes, n_x, values: rows.concat() })
}

fn rows(f: &LateralField) -> Vec<Vec<f64>> {
    (0..f.n_nodes).map(|i| f.node(i).to_vec()).collect()
}

/// `E_{alpha,beta}(-x)` for `x >= 0`.
#[pyfunction]
fn mittag_leffler(alpha: f64, beta: f64, x: f64) -> PyResult<f64> {
    ml::mittag_leffler(alpha, beta, x).map_err(invalid)
}

#[pyfunction]
fn ml_values(alpha: f64, beta: f64, xs: Vec<f64>) -> PyResult<Vec<f64>> {
    xs.iter().map(|&x| ml::mittag_leffler(alpha, beta, x).map_err(invalid)).collect()
}

/// `int_0^t s^(beta-1) E_{alpha,beta}(-lambda s^alpha) ds`
#[pyfunction]
fn ml_kernel_primitive(alpha: f64, beta: f64, lam: f64, t: f64) -> PyResult<f64> {
    ml::ml_kernel_primitive(alpha, beta, lam, t).map_err(invalid)
}

#[pyclass(name = "TimeGrid", module = "fracsource_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTimeGrid {
    inner: evolution::TimeGrid,
}

#[pymethods]
impl PyTimeGrid {
    #[staticmethod]
    fn uniform(t_end: f64, m: usize) -> PyResult<Self> {
        Ok(PyTimeGrid { inner: evolution::TimeGrid::uniform(t_end, m).map_err(invalid)? })
    }

    /// Nodes `T (i/m)^gamma`, clustered at t = 0 for gamma > 1.
    #[staticmethod]
    fn graded(t_end: f64, m: usize, gamma: f64) -> PyResult<Self> {
        Ok(PyTimeGrid { inner: evolution::TimeGrid::graded(t_end, m, gamma).map_err(invalid)? })
    }

    #[getter]
    fn nodes(&self) -> Vec<f64> {
        self.inner.nodes.clone()
    }

    #[getter]
    fn panels(&self) -> usize {
        self.inner.panels()
    }

    fn trapezoid(&self) -> Vec<f64> {
        self.inner.trapezoid()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("TimeGrid(panels={}, t_end={})", self.inner.panels(), self.inner.nodes.last().unwrap())
    }
}

/// Separable eigenbasis of the elliptic operator on the cylinder.
#[pyclass(name = "Basis", module = "fracsource_py")]
struct PyBasis {
    inner: spectral::SpectralBasis,
}

#[pymethods]
impl PyBasis {
    #[new]
    #[pyo3(signature = (k, j, variant = "full_dirichlet", lateral_length = PI, ell = 1.0, a_lat = 1.0, a0 = 1.0, eps = 0.0, n_z = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(k: usize, j: usize, variant: &str, lateral_length: f64, ell: f64, a_lat: f64, a0: f64, eps: f64, n_z: Option<usize>) -> PyResult<Self> {
        let variant = BoundaryVariant::parse(variant).map_err(invalid)?;
        let domain = DomainSpec::new(lateral_length, ell, variant.interval()).map_err(invalid)?;
        let inner = spectral::assemble_basis(&domain, &coefficients(a_lat, a0, eps), &variant, k, j, n_z.unwrap_or(8 * j)).map_err(invalid)?;
        Ok(PyBasis { inner })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.tag()
    }

    #[getter]
    fn lambdas(&self) -> Vec<f64> {
        self.inner.lambdas()
    }

    /// Lateral quadrature points.
    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.lateral.x.clone()
    }

    /// Axial grid points.
    #[getter]
    fn z(&self) -> Vec<f64> {
        self.inner.axial.z.clone()
    }

    /// `(k, j, lambda)` per mode, in basis order.
    fn modes(&self) -> Vec<(usize, usize, f64)> {
        self.inner.modes.iter().map(|m| (m.k, m.j, m.lambda)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Modal coefficients of a field sampled on the (x, z) grid, x-major.
    fn project(&self, field: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.project(&field).map_err(invalid)
    }

    fn synthesize(&self, coeffs: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_modes(&coeffs)?;
        Ok(self.inner.synthesize(&coeffs))
    }

    /// Modal coefficients of `u` at every node, for modal forcing `source`
    /// given per node.
    fn evolve(&self, py: Python<'_>, alpha: f64, grid: &PyTimeGrid, source: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let f = self.modal_field(source, &grid.inner)?;
        let u = py.detach(|| evolution::evolve_source(&self.inner, alpha, &f, &grid.inner)).map_err(evolution_err)?;
        Ok((0..u.n_nodes).map(|i| u.slice(i).to_vec()).collect())
    }

    /// Value and normal derivative of `u` on the upper face, per node and lateral point.
    fn face_traces<'py>(&self, py: Python<'py>, u: Vec<Vec<f64>>, grid: &PyTimeGrid) -> PyResult<Bound<'py, PyDict>> {
        let u = self.modal_field(u, &grid.inner)?;
        let tr = evolution::boundary_traces(&u, &self.inner);
        let d = PyDict::new(py);
        d.set_item("value", (0..tr.n_nodes).map(|i| tr.dirichlet_at(i).to_vec()).collect::<Vec<_>>())?;
        d.set_item("derivative", (0..tr.n_nodes).map(|i| tr.neumann_at(i).to_vec()).collect::<Vec<_>>())?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Basis(variant={}, modes={})", self.inner.variant.tag(), self.inner.len())
    }
}

impl PyBasis {
    fn check_modes(&self, c: &[f64]) -> PyResult<()> {
        if c.len() != self.inner.len() {
            return Err(invalid(format!("expected {} modal coefficients, got {}", self.inner.len(), c.len())));
        }
        Ok(())
    }

    fn modal_field(&self, slices: Vec<Vec<f64>>, grid: &evolution::TimeGrid) -> PyResult<SpaceTimeField> {
        if slices.len() != grid.len() {
            return Err(invalid(format!("expected {} time slices, got {}", grid.len(), slices.len())));
        }
        for s in &slices {
            self.check_modes(s)?;
        }
        SpaceTimeField::from_slices(slices).map_err(invalid)
    }
}

/// Recovery of a lateral source `f(t, x)` from the flux at the upper face.
#[pyclass(name = "InverseProblem", module = "fracsource_py")]
struct PyInverseProblem {
    inner: InverseContext,
}

#[pymethods]
impl PyInverseProblem {
    #[new]
    #[pyo3(signature = (alpha, grid, k, j, lateral_length = PI, ell = 1.0, a_lat = 1.0, a0 = 1.0, eps = 0.0, r = (1.0, 0.0, 0.0, 0.0), floor = 0.1, lateral_bc = "dirichlet", n_z = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        alpha: f64,
        grid: &PyTimeGrid,
        k: usize,
        j: usize,
        lateral_length: f64,
        ell: f64,
        a_lat: f64,
        a0: f64,
        eps: f64,
        r: (f64, f64, f64, f64),
        floor: f64,
        lateral_bc: &str,
        n_z: Option<usize>,
    ) -> PyResult<Self> {
        let bc = match lateral_bc {
            "dirichlet" => LateralBc::Dirichlet,
            "neumann" => LateralBc::Neumann,
            other => return Err(invalid(format!("lateral_bc must be 'dirichlet' or 'neumann', got '{other}'"))),
        };
        // the inversion always lives on the symmetric cylinder
        DomainSpec::new(lateral_length, ell, AxialInterval::Symmetric).map_err(invalid)?;
        let disc = Discretization { k, j, n_z: n_z.unwrap_or(8 * j), n_x: None };
        let r = RProfile { c0: r.0, cz: r.1, ct: r.2, cx: r.3 };
        let inner = InverseContext::new(lateral_length, ell, coefficients(a_lat, a0, eps), bc, disc, alpha, &grid.inner, r, floor).map_err(inverse_err)?;
        Ok(PyInverseProblem { inner })
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.lateral().x.clone()
    }

    #[getter]
    fn t(&self) -> Vec<f64> {
        self.inner.grid.nodes.clone()
    }

    /// Face flux produced by the source `f`, given per node on `x`.
    fn measure(&self, py: Python<'_>, f: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let f = self.field(f)?;
        Ok(rows(&py.detach(|| self.inner.measure(&f)).map_err(inverse_err)?))
    }

    /// Data term of the fixed-point equation for a measured flux.
    fn compute_h(&self, trace: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let trace = self.field(trace)?;
        Ok(rows(&self.inner.compute_h(trace).map_err(inverse_err)?))
    }

    fn apply_h(&self, py: Python<'_>, g: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let g = self.field(g)?;
        Ok(rows(&py.detach(|| self.inner.apply_h(&g)).map_err(inverse_err)?))
    }

    #[pyo3(signature = (h, tol = 1e-10, max_iter = 100))]
    fn reconstruct<'py>(&self, py: Python<'py>, h: Vec<Vec<f64>>, tol: f64, max_iter: usize) -> PyResult<Bound<'py, PyDict>> {
        let h = self.field(h)?;
        let opts = PicardOptions { tol, max_iter };
        let res = py.detach(|| inverse::picard_reconstruct(&h, &self.inner, &opts)).map_err(inverse_err)?;
        let d = PyDict::new(py);
        d.set_item("f_hat", rows(&res.f_hat))?;
        d.set_item("iterations", res.iterations)?;
        d.set_item("residuals", res.residuals)?;
        d.set_item("contraction", res.contraction)?;
        d.set_item("defect", res.defect)?;
        d.set_item("h_norm", res.h_norm)?;
        Ok(d)
    }

    /// Space-time L2 norm on the inversion grid.
    fn norm(&self, f: Vec<Vec<f64>>) -> PyResult<f64> {
        Ok(self.inner.norm(&self.field(f)?))
    }
}

impl PyInverseProblem {
    fn field(&self, v: Vec<Vec<f64>>) -> PyResult<LateralField> {
        lateral_field(v, self.inner.grid.len(), self.inner.lateral().x.len())
    }
}

fn subcommand(name: &str) -> PyResult<Subcommand> {
    Ok(match name {
        "ml-table" | "ml_table" => Subcommand::MlTable,
        "forward" => Subcommand::Forward,
        "reconstruct" => Subcommand::Reconstruct,
        "stability" => Subcommand::Stability,
        "coeff" => Subcommand::Coeff,
        "obstruction" => Subcommand::Obstruction,
        other => return Err(invalid(format!("unknown subcommand '{other}'"))),
    })
}

/// Run one experiment exactly like the command-line tool and return its report.
#[pyfunction]
#[pyo3(signature = (command, config = None, out = None, threads = None, seed = None, data = None))]
fn run<'py>(
    py: Python<'py>,
    command: &str,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    threads: Option<usize>,
    seed: Option<u64>,
    data: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cmd = subcommand(command)?;
    let opts = RunOptions { config, out, threads, seed, data, ..RunOptions::default() };
    let report = py.detach(|| cli::run(cmd, &opts)).map_err(cli_err)?;
    let mut v = serde_json::to_value(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    v["out_dir"] = report.out_dir.display().to_string().into();
    v["config_hash"] = report.config_hash.clone().into();
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

#[pymodule]
fn fracsource_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mittag_leffler, m)?)?;
    m.add_function(wrap_pyfunction!(ml_values, m)?)?;
    m.add_function(wrap_pyfunction!(ml_kernel_primitive, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<PyTimeGrid>()?;
    m.add_class::<PyBasis>()?;
    m.add_class::<PyInverseProblem>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
