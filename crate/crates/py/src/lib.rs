//! Python bindings. Matrices cross the boundary as lists of row lists.

use mhclite_core::birkhoff::{birkhoff_decompose, combine, BirkhoffWeights};
use mhclite_core::grad::random_grad_check;
use mhclite_core::hyperblock::{self, shared_basis, StreamState, TanhBranch, Variant, ZeroBranch};
use mhclite_core::matcore;
use mhclite_core::toytrain::{self, ModelConfig, ToyModel, TrainConfig};
use mhclite_core::{sinkhorn, Error, Mat};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn mat(rows: Rows) -> PyResult<Mat> {
    Mat::from_rows(&rows).map_err(to_py)
}

fn variant(name: &str) -> PyResult<Variant> {
    name.parse().map_err(to_py)
}

/// Sinkhorn–Knopp result.
#[pyclass(module = "mhclite", get_all, frozen)]
struct SkReport {
    result: Rows,
    iterations_run: usize,
    converged: bool,
    /// `(row_l1, col_l1, total)` after each iteration.
    l1_trace: Vec<(f64, f64, f64)>,
}

#[pyfunction]
#[pyo3(signature = (m, max_iters = 20, tol = 0.0))]
fn sk_normalize(m: Rows, max_iters: usize, tol: f64) -> PyResult<SkReport> {
    let r = sinkhorn::sk_normalize(&mat(m)?, max_iters, tol).map_err(to_py)?;
    Ok(SkReport {
        result: r.result.to_rows(),
        iterations_run: r.iterations_run,
        converged: r.converged,
        l1_trace: r.l1_trace.iter().map(|e| (e.row_l1, e.col_l1, e.total)).collect(),
    })
}

#[pyfunction]
fn sk_step(m: Rows) -> PyResult<Rows> {
    Ok(sinkhorn::sk_step(&mat(m)?).map_err(to_py)?.to_rows())
}

/// `(row_l1, col_l1, total)`
#[pyfunction]
fn ds_error(m: Rows) -> PyResult<(f64, f64, f64)> {
    let e = matcore::ds_error(&mat(m)?).map_err(to_py)?;
    Ok((e.row_l1, e.col_l1, e.total))
}

#[pyfunction]
fn relative_range(m: Rows) -> PyResult<f64> {
    matcore::relative_range(&mat(m)?).map_err(to_py)
}

/// All permutations of `0..n` in lexicographic order (identity first).
#[pyfunction]
fn permutations(n: usize) -> PyResult<Vec<Vec<usize>>> {
    matcore::permutations_lex(n).map_err(to_py)
}

/// Convex combination of the `n!` permutation matrices.
#[pyfunction]
fn birkhoff_combine(n: usize, weights: Vec<f64>) -> PyResult<Rows> {
    let basis = shared_basis(n).map_err(to_py)?;
    let w = BirkhoffWeights::new(weights).map_err(to_py)?;
    Ok(combine(basis, &w).map_err(to_py)?.to_rows())
}

#[pyfunction]
fn birkhoff_decomposition(m: Rows) -> PyResult<Vec<f64>> {
    let m = mat(m)?;
    let basis = shared_basis(m.rows()).map_err(to_py)?;
    Ok(birkhoff_decompose(&m, basis).map_err(to_py)?.into_inner())
}

/// Mixing maps of one block at one stream state.
#[pyclass(module = "mhclite", get_all, frozen)]
struct MixMaps {
    h_pre: Vec<f64>,
    h_post: Vec<f64>,
    h_res: Rows,
    /// Permutation weights (`mhc-lite` only).
    a_weights: Option<Vec<f64>>,
    /// Matrix fed to Sinkhorn–Knopp (`mhc` only).
    pre_sk: Option<Rows>,
}

impl From<hyperblock::MixMaps> for MixMaps {
    fn from(m: hyperblock::MixMaps) -> Self {
        Self {
            pre_sk: m.pre_sk().map(Mat::to_rows),
            h_pre: m.h_pre,
            h_post: m.h_post,
            h_res: m.h_res.to_rows(),
            a_weights: m.a_weights.map(BirkhoffWeights::into_inner),
        }
    }
}

#[pyclass(module = "mhclite", frozen)]
struct BlockParams {
    inner: hyperblock::BlockParams,
}

#[pymethods]
impl BlockParams {
    /// Residual-connection initialisation.
    #[staticmethod]
    #[pyo3(signature = (variant, n = 4, c = 16, pick_index = 0))]
    fn init(variant: &str, n: usize, c: usize, pick_index: usize) -> PyResult<Self> {
        let inner = hyperblock::init_params(self::variant(variant)?, n, c, pick_index).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (variant, n = 4, c = 16, seed = 0, scale = 1.0))]
    fn random(variant: &str, n: usize, c: usize, seed: u64, scale: f64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = hyperblock::BlockParams::random(self::variant(variant)?, n, c, scale, &mut rng);
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: hyperblock::BlockParams::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.as_str()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn c(&self) -> usize {
        self.inner.c
    }

    /// Parameter groups by name, flattened.
    fn groups<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (name, vals) in self.inner.groups() {
            d.set_item(name, vals.to_vec())?;
        }
        Ok(d)
    }

    fn num_scalars(&self) -> usize {
        self.inner.num_scalars()
    }

    #[pyo3(signature = (x, sk_iters = 20))]
    fn compute_maps(&self, x: Rows, sk_iters: usize) -> PyResult<MixMaps> {
        let s = StreamState::new(mat(x)?);
        Ok(hyperblock::compute_maps(&self.inner, &s, sk_iters).map_err(to_py)?.into())
    }

    /// One block update. The branch is `tanh(u W)` when `branch_weight`
    /// (C x C) is given, otherwise zero.
    #[pyo3(signature = (x, branch_weight = None, sk_iters = 20))]
    fn forward(&self, x: Rows, branch_weight: Option<Rows>, sk_iters: usize) -> PyResult<Rows> {
        let s = StreamState::new(mat(x)?);
        let (out, _) = match branch_weight {
            Some(w) => hyperblock::block_forward(&self.inner, &s, &TanhBranch { w: mat(w)? }, sk_iters),
            None => hyperblock::block_forward(&self.inner, &s, &ZeroBranch, sk_iters),
        }
        .map_err(to_py)?;
        Ok(out.into_mat().to_rows())
    }

    /// Maximum relative error per group (plus `input`) of analytic vs
    /// finite-difference gradients.
    #[pyo3(signature = (seed = 0, sk_iters = 20))]
    fn grad_check<'py>(&self, py: Python<'py>, seed: u64, sk_iters: usize) -> PyResult<Bound<'py, PyDict>> {
        let r = mhclite_core::grad::grad_check_with(&self.inner, seed, sk_iters, mhclite_core::grad::FD_EPS)
            .map_err(to_py)?;
        let d = PyDict::new(py);
        for g in r.groups {
            d.set_item(g.group, g.max_rel_err)?;
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "BlockParams(variant='{}', n={}, c={})",
            self.inner.variant, self.inner.n, self.inner.c
        )
    }
}

/// Largest relative gradient error over all groups for random parameters.
#[pyfunction]
#[pyo3(signature = (variant, n = 4, c = 8, seed = 0, sk_iters = 20))]
fn grad_check(variant: &str, n: usize, c: usize, seed: u64, sk_iters: usize) -> PyResult<f64> {
    let r = random_grad_check(self::variant(variant)?, n, c, seed, sk_iters).map_err(to_py)?;
    Ok(r.max_rel_err())
}

/// Trains the toy model; returns per-step columns keyed like the CSV log.
#[pyfunction]
#[pyo3(signature = (variant = "mhc-lite", layers = 6, c = 16, steps = 500, lr = 1e-3, seed = 0, samples = 256))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    variant: &str,
    layers: usize,
    c: usize,
    steps: usize,
    lr: f64,
    seed: u64,
    samples: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ModelConfig {
        variant: self::variant(variant)?,
        layers,
        c,
        seed,
        ..ModelConfig::default()
    };
    let data = toytrain::make_task(seed, cfg.d_in, cfg.d_out, samples).map_err(to_py)?;
    let mut model = ToyModel::new(&cfg).map_err(to_py)?;
    let tc = TrainConfig {
        steps,
        lr,
        seed,
        ..TrainConfig::default()
    };
    let log = py
        .detach(|| toytrain::train(&mut model, &data, &tc))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    let col = |f: fn(&toytrain::StepRecord) -> f64| -> Vec<f64> { log.records.iter().map(f).collect() };
    d.set_item("loss", col(|r| r.loss))?;
    d.set_item("grad_norm", col(|r| r.grad_norm))?;
    d.set_item("clipped_grad_norm", col(|r| r.clipped_grad_norm))?;
    d.set_item("max_ds_error", col(|r| r.max_ds_error))?;
    d.set_item("ms_per_step", col(|r| r.ms_per_step))?;
    Ok(d)
}

#[pymodule]
fn mhclite(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SkReport>()?;
    m.add_class::<MixMaps>()?;
    m.add_class::<BlockParams>()?;
    m.add_function(wrap_pyfunction!(sk_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(sk_step, m)?)?;
    m.add_function(wrap_pyfunction!(ds_error, m)?)?;
    m.add_function(wrap_pyfunction!(relative_range, m)?)?;
    m.add_function(wrap_pyfunction!(permutations, m)?)?;
    m.add_function(wrap_pyfunction!(birkhoff_combine, m)?)?;
    m.add_function(wrap_pyfunction!(birkhoff_decomposition, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
