//! Python module `fracmap`: lattices, unit fields, the energy, the minimiser,
//! the Poisson extension and the singular-set tools.
//!
//! Reports cross the boundary as plain dicts and lists.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use fracmap_core::analysis::{calibrated_epsilon, default_singular_radii, detect_singular};
use fracmap_core::constants::{alpha_ns, sphere_area, FracParams};
use fracmap_core::extension::{self, ExtensionField, ExteriorFill, HalfSpaceGrid, TargetBox};
use fracmap_core::field::{self, Field, PresetParams, SphereField};
use fracmap_core::identities;
use fracmap_core::lattice::{DomainShape, Lattice, LatticeConfig, TailMode};
use fracmap_core::nonlocal;
use fracmap_core::solver::{self, SolverConfig};
use fracmap_core::weighted_pde;
use fracmap_core::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: Error) -> PyErr {
    match e {
        Error::Numerical { .. } => PyRuntimeError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Node lattice on [-L_ext, L_ext]^n with Ω the ball or box of half width L.
#[pyclass(name = "Lattice", module = "fracmap", frozen)]
struct PyLattice {
    inner: Lattice,
}

#[pymethods]
impl PyLattice {
    #[new]
    #[pyo3(signature = (n, s, d, h=1.0/16.0, L=1.0, L_ext=2.0, shape="ball", tail=None, cutoff=2, subsamples=4))]
    #[allow(non_snake_case, clippy::too_many_arguments)]
    fn new(
        n: usize,
        s: f64,
        d: usize,
        h: f64,
        L: f64,
        L_ext: f64,
        shape: &str,
        tail: Option<Vec<f64>>,
        cutoff: usize,
        subsamples: usize,
    ) -> PyResult<Self> {
        let shape = match shape {
            "ball" => DomainShape::Ball,
            "box" => DomainShape::Box,
            other => return Err(PyValueError::new_err(format!("unknown shape {other:?} (ball or box)"))),
        };
        let tail = tail.map_or(TailMode::Zero, TailMode::ConstantExterior);
        let cfg = LatticeConfig { h, l: L, l_ext: L_ext, cutoff, subsamples, shape, tail, ..Default::default() };
        let params = FracParams::new(n, s, d).map_err(err)?;
        Ok(Self { inner: Lattice::build(&params, &cfg).map_err(err)? })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.params.n
    }
    #[getter]
    fn s(&self) -> f64 {
        self.inner.params.s
    }
    #[getter]
    fn d(&self) -> usize {
        self.inner.params.d
    }
    #[getter]
    fn h(&self) -> f64 {
        self.inner.h
    }
    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes
    }
    #[getter]
    fn n_omega(&self) -> usize {
        self.inner.n_omega()
    }
    #[getter]
    fn omega_nodes(&self) -> Vec<usize> {
        self.inner.omega_nodes.clone()
    }
    /// γ_{n,s}, σ_{n,s}, δ_s and a = 1 - 2s for this lattice.
    #[getter]
    fn params<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.params)
    }

    fn coord(&self, node: usize) -> PyResult<Vec<f64>> {
        if node >= self.inner.n_nodes {
            return Err(PyValueError::new_err(format!("node {node} out of range")));
        }
        Ok(self.inner.coord(node))
    }

    fn coords(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_nodes).map(|p| self.inner.coord(p)).collect()
    }

    fn __repr__(&self) -> String {
        let l = &self.inner;
        format!("Lattice(n={}, s={}, d={}, h={}, L={}, L_ext={}, nodes={})", l.params.n, l.params.s, l.params.d, l.h, l.l, l.l_ext, l.n_nodes)
    }
}

/// Unit-vector field on every lattice node, stored node-major.
#[pyclass(name = "Field", module = "fracmap", frozen)]
struct PyField {
    inner: SphereField,
}

#[pymethods]
impl PyField {
    /// Normalises `values` (a list of length-d vectors) node by node.
    #[new]
    fn new(values: Vec<Vec<f64>>) -> PyResult<Self> {
        let d = values.first().map_or(0, |v| v.len());
        if d == 0 || values.iter().any(|v| v.len() != d) {
            return Err(PyValueError::new_err("values must be a nonempty list of equal-length vectors"));
        }
        let f = Field { d, values: values.concat() };
        Ok(Self { inner: SphereField::normalized(f, 1e-12).map_err(err)? })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }
    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    fn values(&self) -> Vec<Vec<f64>> {
        self.inner.values.chunks(self.inner.d()).map(|c| c.to_vec()).collect()
    }

    fn get(&self, node: usize) -> PyResult<Vec<f64>> {
        if node >= self.inner.n_nodes() {
            return Err(PyValueError::new_err(format!("node {node} out of range")));
        }
        Ok(self.inner.get(node).to_vec())
    }

    fn max_norm_defect(&self) -> f64 {
        self.inner.max_norm_defect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_nodes()
    }
}

/// Poisson extension of a field to target nodes × z-levels.
#[pyclass(name = "Extension", module = "fracmap", frozen)]
struct PyExtension {
    inner: ExtensionField,
}

#[pymethods]
impl PyExtension {
    #[getter]
    fn n_targets(&self) -> usize {
        self.inner.n_targets()
    }
    #[getter]
    fn z_edges(&self) -> Vec<f64> {
        self.inner.grid.edges.clone()
    }
    #[getter]
    fn mass_defect(&self) -> f64 {
        self.inner.mass_defect
    }

    /// ½ δ_s ∫ z^a |∇u^e|² over the grid.
    fn weighted_energy(&self) -> f64 {
        extension::weighted_energy(&self.inner, None)
    }

    /// Θ(x0, r) = r^{2s-n} times the weighted energy in the half ball.
    fn density(&self, x0: Vec<f64>, r: f64) -> PyResult<f64> {
        extension::density_theta(&self.inner, &x0, r).map_err(err)
    }

    /// Discrete residual of div(z^a ∇u^e) = 0 for levels above z_min.
    #[pyo3(signature = (component=0, z_min=0.25))]
    fn pde_residual(&self, component: usize, z_min: f64) -> PyResult<f64> {
        weighted_pde::pde_residual(&self.inner, component, z_min).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let w = BufWriter::new(File::create(path)?);
        extension::write_extension_dump(w, &self.inner).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let r = BufReader::new(File::open(path)?);
        Ok(Self { inner: extension::read_extension_dump(r).map_err(err)? })
    }
}

fn preset_params(radius: f64, winding: f64, base: &str, amplitude: f64, seed: u64) -> PresetParams {
    PresetParams { radius, winding, base: base.into(), amplitude, seed }
}

/// Constants for dimension n and order s, with α_{n,s} in closed form and by quadrature (None for n = 1).
#[pyfunction]
fn constants<'py>(py: Python<'py>, n: usize, s: f64) -> PyResult<Bound<'py, PyAny>> {
    #[derive(Serialize)]
    struct Out {
        params: FracParams,
        alpha: Option<f64>,
        alpha_quadrature: Option<f64>,
        sphere_area: f64,
    }
    let params = FracParams::new(n, s, 1).map_err(err)?;
    // α_{n,s} is an integral over R^{n-1}
    let al = if n >= 2 { Some(alpha_ns(n, s).map_err(err)?) } else { None };
    to_py(py, &Out { params, alpha: al.map(|a| a.closed_form), alpha_quadrature: al.map(|a| a.quadrature), sphere_area: sphere_area(n) })
}

#[pyfunction]
#[pyo3(signature = (lattice, name, radius=0.5, winding=1.0, base="constant", amplitude=0.3, seed=0x5EED))]
fn preset(lattice: &PyLattice, name: &str, radius: f64, winding: f64, base: &str, amplitude: f64, seed: u64) -> PyResult<PyField> {
    let p = preset_params(radius, winding, base, amplitude, seed);
    Ok(PyField { inner: field::preset_field(&lattice.inner, name, &p).map_err(err)? })
}

#[pyfunction]
#[pyo3(signature = (lattice, seed=0x5EED))]
fn random_field(lattice: &PyLattice, seed: u64) -> PyField {
    PyField { inner: field::random_unit_field(&lattice.inner, lattice.inner.params.d, seed) }
}

fn checked<'a>(lattice: &PyLattice, u: &'a PyField) -> PyResult<&'a SphereField> {
    u.inner.check_lattice(&lattice.inner).map_err(err)?;
    Ok(&u.inner)
}

#[pyfunction]
fn energy(lattice: &PyLattice, u: &PyField) -> PyResult<f64> {
    Ok(nonlocal::energy(&lattice.inner, checked(lattice, u)?))
}

/// Sup over Ω of the tangential part of the fractional Laplacian.
#[pyfunction]
fn stationarity_residual(lattice: &PyLattice, u: &PyField) -> PyResult<f64> {
    solver::stationarity_residual(checked(lattice, u)?, &lattice.inner).map_err(err)
}

/// Projected gradient descent from `u0`; returns (field, report dict).
#[pyfunction]
#[pyo3(signature = (lattice, u0, tol=1e-6, max_iters=20000, seed=0x5EED))]
fn minimize<'py>(py: Python<'py>, lattice: &PyLattice, u0: &PyField, tol: f64, max_iters: usize, seed: u64) -> PyResult<(PyField, Bound<'py, PyAny>)> {
    let cfg = SolverConfig { tol_tangential: tol, max_iters, seed, ..Default::default() };
    cfg.validate().map_err(err)?;
    let (u, rep) = solver::minimize(checked(lattice, u0)?, &lattice.inner, &cfg).map_err(err)?;
    Ok((PyField { inner: u }, to_py(py, &rep)?))
}

/// Exactness identities on `u`; one dict per check.
#[pyfunction]
#[pyo3(signature = (lattice, u, seed=0x5EED))]
fn exactness_suite<'py>(py: Python<'py>, lattice: &PyLattice, u: &PyField, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &identities::exactness_suite(&lattice.inner, checked(lattice, u)?, seed).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (lattice, radius=0.5))]
fn perimeter_identity<'py>(py: Python<'py>, lattice: &PyLattice, radius: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &identities::perimeter_identity(&lattice.inner, radius).map_err(err)?)
}

fn fill_for(lattice: &Lattice, fill: &str, preset: Option<&str>) -> PyResult<ExteriorFill> {
    Ok(match (fill, preset) {
        ("auto", None) => ExteriorFill::from_lattice(lattice),
        ("auto", Some(name)) | ("preset", Some(name)) => {
            let p = PresetParams::default();
            ExteriorFill::Map(field::preset_map(name, lattice.params.n, lattice.params.d, lattice.h, lattice.l_ext, &p).map_err(err)?)
        }
        ("renormalize", _) => ExteriorFill::Renormalize,
        ("zero", _) => ExteriorFill::Zero,
        _ => return Err(PyValueError::new_err(format!("fill {fill:?} needs one of auto, renormalize, zero, or preset with a preset name"))),
    })
}

/// Poisson extension on the default geometric z-grid. `half_width` limits the
/// targets to a centred box; `preset` names the exterior data for the auto or preset fill.
#[pyfunction]
#[pyo3(signature = (lattice, u, half_width=None, fill="auto", preset=None))]
fn extend(lattice: &PyLattice, u: &PyField, half_width: Option<f64>, fill: &str, preset: Option<&str>) -> PyResult<PyExtension> {
    let lat = &lattice.inner;
    let grid = HalfSpaceGrid::default_for(lat).map_err(err)?;
    let targets = half_width.map_or_else(|| TargetBox::full(lat), |w| TargetBox::centered(lat, w));
    let fill = fill_for(lat, fill, preset)?;
    Ok(PyExtension { inner: extension::extend(lat, checked(lattice, u)?, &grid, &targets, &fill).map_err(err)? })
}

#[pyfunction]
fn calibrate_epsilon<'py>(py: Python<'py>, n: usize, s: f64, h: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &calibrated_epsilon(n, s, h).map_err(err)?)
}

/// Nodes whose extrapolated density limit reaches ε (calibrated when omitted).
#[pyfunction]
#[pyo3(signature = (lattice, u, epsilon=None, fill="auto", preset=None))]
fn singular_set<'py>(
    py: Python<'py>,
    lattice: &PyLattice,
    u: &PyField,
    epsilon: Option<f64>,
    fill: &str,
    preset: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let lat = &lattice.inner;
    let eps = match epsilon {
        Some(e) => e,
        None => calibrated_epsilon(lat.params.n, lat.params.s, lat.h).map_err(err)?.epsilon,
    };
    let fill = fill_for(lat, fill, preset)?;
    let rep = detect_singular(lat, checked(lattice, u)?, eps, &default_singular_radii(lat.h), &fill).map_err(err)?;
    to_py(py, &rep)
}

/// Writes the binary field dump read by the command-line tool.
#[pyfunction]
fn write_dump(path: &str, lattice: &PyLattice, u: &PyField) -> PyResult<()> {
    let w = BufWriter::new(File::create(path)?);
    field::write_dump(w, &lattice.inner, checked(lattice, u)?).map_err(err)
}

/// Reads a field dump; returns (header dict, field).
#[pyfunction]
fn read_dump<'py>(py: Python<'py>, path: &str) -> PyResult<(Bound<'py, PyAny>, PyField)> {
    let (hd, f) = field::read_dump(BufReader::new(File::open(path)?)).map_err(err)?;
    let header = pyo3::types::PyDict::new(py);
    header.set_item("n", hd.n)?;
    header.set_item("d", hd.d)?;
    header.set_item("s", hd.s)?;
    header.set_item("h", hd.h)?;
    header.set_item("L", hd.l)?;
    header.set_item("L_ext", hd.l_ext)?;
    header.set_item("nodes", hd.nodes)?;
    Ok((header.into_any(), PyField { inner: SphereField::new(f).map_err(err)? }))
}

#[pymodule]
fn fracmap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLattice>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyExtension>()?;
    m.add_function(wrap_pyfunction!(constants, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(random_field, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(stationarity_residual, m)?)?;
    m.add_function(wrap_pyfunction!(minimize, m)?)?;
    m.add_function(wrap_pyfunction!(exactness_suite, m)?)?;
    m.add_function(wrap_pyfunction!(perimeter_identity, m)?)?;
    m.add_function(wrap_pyfunction!(extend, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(singular_set, m)?)?;
    m.add_function(wrap_pyfunction!(write_dump, m)?)?;
    m.add_function(wrap_pyfunction!(read_dump, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
