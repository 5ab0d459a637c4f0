//! Python bindings for the hyperbal library: Poincare-ball primitives,
//! hierarchy queries, balanced embedding training, OOD scoring functions
//! and detection metrics.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use hyperbal::embedder::{train_balanced, EmbedConfig, EmbeddingSet};
use hyperbal::error::Error;
use hyperbal::geometry::{Ball as CoreBall, Curvature};
use hyperbal::hierarchy::Hierarchy as CoreHierarchy;
use hyperbal::metrics;
use hyperbal::scoring;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Poincare ball of curvature -c with its geometric operations.
#[pyclass(name = "Ball")]
struct PyBall {
    inner: CoreBall,
}

#[pymethods]
impl PyBall {
    #[new]
    #[pyo3(signature = (c=1.0))]
    fn new(c: f64) -> PyResult<Self> {
        let curvature = Curvature::new(c).map_err(to_py_err)?;
        Ok(PyBall {
            inner: CoreBall::new(curvature),
        })
    }

    #[getter]
    fn c(&self) -> f64 {
        self.inner.c()
    }

    fn __repr__(&self) -> String {
        format!("Ball(c={})", self.inner.c())
    }

    /// Geodesic distance between two points inside the ball.
    fn distance(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.check_pair(&x, &y)?;
        Ok(self.inner.distance(&x, &y))
    }

    /// Conformal factor (2 / (1 - c ||x||^2))^2.
    fn conformal_factor(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check_point(&x)?;
        Ok(self.inner.conformal_factor(&x))
    }

    /// Mobius addition of two ball points.
    fn mobius_add(&self, v: Vec<f64>, w: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_pair(&v, &w)?;
        let mut out = vec![0.0; v.len()];
        self.inner.mobius_add(&v, &w, &mut out);
        Ok(out)
    }

    /// Exponential map at the origin.
    fn exp0(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        if v.iter().any(|t| !t.is_finite()) {
            return Err(PyValueError::new_err("non-finite tangent vector"));
        }
        let mut out = vec![0.0; v.len()];
        self.inner.exp0(&v, &mut out);
        Ok(out)
    }

    /// Geodesic distance from the origin.
    fn poincare_norm(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check_point(&x)?;
        Ok(self.inner.poincare_norm(&x))
    }

    /// Euclidean gradient of distance(x, y) with respect to x.
    fn distance_grad(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_pair(&x, &y)?;
        let mut out = vec![0.0; x.len()];
        if !self.inner.distance_grad(&x, &y, &mut out) {
            return Err(PyValueError::new_err(
                "gradient undefined: the two points coincide",
            ));
        }
        Ok(out)
    }

    /// Rescales a Euclidean gradient by the inverse metric at x.
    fn riemannian_rescale(&self, grad: Vec<f64>, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_point(&x)?;
        let mut g = grad;
        self.inner.riemannian_rescale(&mut g, &x);
        Ok(g)
    }

    /// Projects a vector into the eps-shrunk ball.
    #[pyo3(signature = (x, eps=1e-5))]
    fn project(&self, x: Vec<f64>, eps: f64) -> PyResult<Vec<f64>> {
        if !(eps > 0.0 && eps <= 1e-2) {
            return Err(PyValueError::new_err("eps outside (0, 1e-2]"));
        }
        let mut x = x;
        self.inner.project_in_place(&mut x, eps);
        Ok(x)
    }
}

impl PyBall {
    fn check_point(&self, x: &[f64]) -> PyResult<()> {
        let sq: f64 = x.iter().map(|v| v * v).sum();
        if !sq.is_finite() || sq >= 1.0 / self.inner.c() {
            return Err(PyValueError::new_err("point outside the ball"));
        }
        Ok(())
    }

    fn check_pair(&self, x: &[f64], y: &[f64]) -> PyResult<()> {
        if x.len() != y.len() {
            return Err(PyValueError::new_err("dimension mismatch"));
        }
        self.check_point(x)?;
        self.check_point(y)
    }
}

/// A rooted class hierarchy parsed from a parent\tchild edge list.
#[pyclass(name = "Hierarchy")]
struct PyHierarchy {
    inner: CoreHierarchy,
}

#[pymethods]
impl PyHierarchy {
    /// Parses the edge-list text ("parent\tchild" lines).
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyHierarchy {
            inner: CoreHierarchy::parse_edge_list(text.as_bytes()).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        Self::from_text(&text)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Hierarchy(nodes={}, leaves={}, max_level={})",
            self.inner.len(),
            self.inner.leaves().len(),
            self.inner.max_level()
        )
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().to_vec()
    }

    fn root(&self) -> String {
        self.inner.name(self.inner.root()).to_string()
    }

    fn leaves(&self) -> Vec<String> {
        self.inner
            .leaves()
            .iter()
            .map(|&i| self.inner.name(i).to_string())
            .collect()
    }

    fn level(&self, node: &str) -> PyResult<u32> {
        let idx = self.inner.require(node).map_err(to_py_err)?;
        Ok(self.inner.level(idx))
    }

    fn max_level(&self) -> u32 {
        self.inner.max_level()
    }

    /// Lowest common ancestor and its height above the deeper query node.
    fn lca(&self, u: &str, v: &str) -> PyResult<(String, u32)> {
        let ui = self.inner.require(u).map_err(to_py_err)?;
        let vi = self.inner.require(v).map_err(to_py_err)?;
        let (node, height) = self.inner.lca(ui, vi);
        Ok((self.inner.name(node).to_string(), height))
    }

    /// Hop count between two nodes on the undirected tree.
    fn graph_distance(&self, u: &str, v: &str) -> PyResult<u32> {
        let ui = self.inner.require(u).map_err(to_py_err)?;
        let vi = self.inner.require(v).map_err(to_py_err)?;
        let (lca, _) = self.inner.lca(ui, vi);
        Ok(self.inner.level(ui) + self.inner.level(vi) - 2 * self.inner.level(lca))
    }
}

/// Node embedding produced by the balanced training loop.
#[pyclass(name = "Embedding")]
struct PyEmbedding {
    inner: EmbeddingSet,
}

#[pymethods]
impl PyEmbedding {
    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        Ok(PyEmbedding {
            inner: EmbeddingSet::read_tsv(text.as_bytes()).map_err(to_py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn get(&self, node: &str) -> PyResult<Vec<f64>> {
        self.inner
            .get(node)
            .map(|p| p.to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("unknown node id '{node}'")))
    }

    fn names(&self) -> Vec<String> {
        (0..self.inner.len())
            .map(|i| self.inner.name(i).to_string())
            .collect()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut buf = Vec::new();
        self.inner
            .write_tsv(&mut buf)
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
        std::fs::write(path, buf).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))
    }

    /// Mean relative distortion against the hierarchy's graph distances.
    fn distortion(&self, h: &PyHierarchy) -> PyResult<f64> {
        let dist = h.inner.all_pairs_distances();
        metrics::distortion_metric(&self.inner, &h.inner, &dist).map_err(to_py_err)
    }

    /// Mean average precision of graph neighbors under distance ranking.
    fn map_score(&self, h: &PyHierarchy) -> PyResult<f64> {
        metrics::map_metric(&self.inner, &h.inner).map_err(to_py_err)
    }

    /// Per-level (level, count, mean, variance) of Poincare norms.
    fn level_norms(&self, h: &PyHierarchy) -> PyResult<Vec<(u32, usize, f64, f64)>> {
        Ok(metrics::level_norm_stats(&self.inner, &h.inner)
            .map_err(to_py_err)?
            .into_iter()
            .map(|s| (s.level, s.count, s.mean, s.variance))
            .collect())
    }
}

/// Trains balanced hyperbolic embeddings for a hierarchy.
#[pyfunction]
#[pyo3(signature = (hierarchy, dim=64, epochs=10_000, init_epochs=100, lr=8.0, tau=None, seed=0))]
fn embed_hierarchy(
    hierarchy: &PyHierarchy,
    dim: usize,
    epochs: usize,
    init_epochs: usize,
    lr: f64,
    tau: Option<f64>,
    seed: u64,
) -> PyResult<PyEmbedding> {
    let cfg = EmbedConfig {
        dim,
        total_epochs: epochs,
        init_epochs,
        learning_rate: lr,
        tau,
        seed,
        ..EmbedConfig::default()
    };
    let dist = hierarchy.inner.all_pairs_distances();
    let (emb, _) = train_balanced(&hierarchy.inner, &dist, &cfg).map_err(to_py_err)?;
    Ok(PyEmbedding { inner: emb })
}

/// Detection metrics from ID and OOD score lists
/// (higher score = more in-distribution).
#[pyfunction]
fn evaluate_scores(
    py: Python<'_>,
    id_scores: Vec<f64>,
    ood_scores: Vec<f64>,
) -> PyResult<Py<pyo3::types::PyDict>> {
    let report = metrics::evaluate_scores(&id_scores, &ood_scores).map_err(to_py_err)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("auroc", report.auroc)?;
    dict.set_item("aupr", report.aupr)?;
    dict.set_item("fpr_at_95", report.fpr_at_95)?;
    dict.set_item("n_id", report.n_id)?;
    dict.set_item("n_ood", report.n_ood)?;
    Ok(dict.unbind())
}

/// Hierarchical generalization metrics from (predicted, ground_truth) leaf
/// pairs.
#[pyfunction]
fn hier_eval(
    py: Python<'_>,
    hierarchy: &PyHierarchy,
    predictions: Vec<(String, String)>,
) -> PyResult<Py<pyo3::types::PyDict>> {
    let report = metrics::hierarchical_report(&hierarchy.inner, &predictions).map_err(to_py_err)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("h_dist", report.h_dist)?;
    dict.set_item("hsi_b1", report.hsi_b1)?;
    dict.set_item("hsi_b2", report.hsi_b2)?;
    dict.set_item("m", report.m)?;
    Ok(dict.unbind())
}

/// Maximum softmax probability of a logit vector.
#[pyfunction]
fn msp(logits: Vec<f64>) -> PyResult<f64> {
    let rec = scoring::LogitRecord::new(logits, scoring::ScoreSource::Hyperbolic)
        .map_err(to_py_err)?;
    Ok(scoring::msp(&rec))
}

/// MSP over temperature-divided logits.
#[pyfunction]
fn temp_scale(logits: Vec<f64>, t: f64) -> PyResult<f64> {
    let rec = scoring::LogitRecord::new(logits, scoring::ScoreSource::Hyperbolic)
        .map_err(to_py_err)?;
    scoring::temp_scale(&rec, t).map_err(to_py_err)
}

/// Energy score over per-class geodesic distances.
#[pyfunction]
#[pyo3(signature = (distances, t=10.0))]
fn energy(distances: Vec<f64>, t: f64) -> PyResult<f64> {
    if !(t.is_finite() && t > 0.0) {
        return Err(PyValueError::new_err("temperature must be positive"));
    }
    Ok(scoring::energy(&distances, t))
}

/// Negative generalized entropy over the top_m probabilities.
#[pyfunction]
#[pyo3(signature = (probs, gamma=0.1, top_m=None))]
fn gen_score(probs: Vec<f64>, gamma: f64, top_m: Option<usize>) -> PyResult<f64> {
    let m = top_m.unwrap_or(probs.len());
    scoring::gen_score(&probs, gamma, m).map_err(to_py_err)
}

/// Negative distance to the k-th nearest bank row (rows are
/// unit-normalized internally; pass a unit-normalized query).
#[pyfunction]
fn knn_score(query: Vec<f64>, bank: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    let dim = query.len();
    let bank = scoring::FeatureBank::new(dim, &bank).map_err(to_py_err)?;
    scoring::knn_score(&query, &bank, k).map_err(to_py_err)
}

#[pymodule]
fn hyperbal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBall>()?;
    m.add_class::<PyHierarchy>()?;
    m.add_class::<PyEmbedding>()?;
    m.add_function(wrap_pyfunction!(embed_hierarchy, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_scores, m)?)?;
    m.add_function(wrap_pyfunction!(hier_eval, m)?)?;
    m.add_function(wrap_pyfunction!(msp, m)?)?;
    m.add_function(wrap_pyfunction!(temp_scale, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(gen_score, m)?)?;
    m.add_function(wrap_pyfunction!(knn_score, m)?)?;
    Ok(())
}
