//! Python bindings for the fedsim simulator.
//!
//! Updates are passed as lists of equal-length float lists. Aggregators
//! return a dict with `delta`, `weights` and `selected`; whole experiments
//! take and return JSON text.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedsim_core::adversary::{attack_lie, attack_min_max, attack_min_sum, attack_random_noise, GammaSearch};
use fedsim_core::aggregators::{
    agg_bulyan, agg_coordinatewise, agg_dnc, agg_fltrust, agg_multi_krum, agg_rfa, agg_weighted_mean,
    defense_crfl, defense_rlr, AggregationOutcome, Coordinatewise, DncParams,
};
use fedsim_core::datagen::{make_blobs, partition_dirichlet, partition_iid, random_centers, BlobSpec, Dataset, PartitionConfig};
use fedsim_core::metrics::{attack_impact, contribution_match_degree, shapley_values, ShapleyConfig};
use fedsim_core::{fedcore, FedError, RunOptions};

fn py_err(e: FedError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n.max(1) as f64; n]
}

fn outcome<'py>(py: Python<'py>, out: AggregationOutcome) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("delta", out.delta)?;
    d.set_item("weights", out.weights)?;
    d.set_item("selected", out.selected)?;
    d.set_item("scores", out.scores)?;
    d.set_item("notes", out.notes)?;
    Ok(d)
}

fn dataset_dict<'py>(py: Python<'py>, ds: &Dataset) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("features", ds.samples.iter().map(|s| s.features.clone()).collect::<Vec<_>>())?;
    d.set_item("labels", ds.samples.iter().map(|s| s.label).collect::<Vec<_>>())?;
    d.set_item("classes", ds.classes)?;
    Ok(d)
}

/// Weighted mean of client updates (uniform weights when omitted).
#[pyfunction]
#[pyo3(signature = (updates, weights=None))]
fn weighted_mean<'py>(py: Python<'py>, updates: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let w = weights.unwrap_or_else(|| uniform(updates.len()));
    outcome(py, agg_weighted_mean(&updates, &w).map_err(py_err)?)
}

/// Coordinate-wise median.
#[pyfunction]
fn median<'py>(py: Python<'py>, updates: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    outcome(py, agg_coordinatewise(&updates, Coordinatewise::Median).map_err(py_err)?)
}

/// Coordinate-wise mean after dropping `trim` values from each side.
#[pyfunction]
fn trimmed_mean<'py>(py: Python<'py>, updates: Vec<Vec<f64>>, trim: usize) -> PyResult<Bound<'py, PyDict>> {
    outcome(py, agg_coordinatewise(&updates, Coordinatewise::TrimmedMean(trim)).map_err(py_err)?)
}

/// Multi-Krum: mean of the `k` updates with the lowest scores.
#[pyfunction]
#[pyo3(signature = (updates, f, k=1))]
fn multi_krum<'py>(py: Python<'py>, updates: Vec<Vec<f64>>, f: usize, k: usize) -> PyResult<Bound<'py, PyDict>> {
    outcome(py, agg_multi_krum(&updates, f, k).map_err(py_err)?)
}

#[pyfunction]
fn bulyan<'py>(py: Python<'py>, updates: Vec<Vec<f64>>, f: usize) -> PyResult<Bound<'py, PyDict>> {
    outcome(py, agg_bulyan(&updates, f).map_err(py_err)?)
}

/// Smoothed geometric median.
#[pyfunction]
#[pyo3(signature = (updates, weights=None, iterations=10, smoothing=1e-6))]
fn rfa<'py>(
    py: Python<'py>,
    updates: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
    iterations: usize,
    smoothing: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let w = weights.unwrap_or_else(|| uniform(updates.len()));
    outcome(py, agg_rfa(&updates, &w, iterations, smoothing).map_err(py_err)?)
}

/// Spectral filtering on random coordinate subsets.
#[pyfunction]
#[pyo3(signature = (updates, f, sub_dim=1000, filter_ratio=1.0, iterations=1, seed=0))]
fn dnc<'py>(
    py: Python<'py>,
    updates: Vec<Vec<f64>>,
    f: usize,
    sub_dim: usize,
    filter_ratio: f64,
    iterations: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let params = DncParams { sub_dim, filter_ratio, iterations, f };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    outcome(py, agg_dnc(&updates, &params, &mut rng).map_err(py_err)?)
}

/// Trust-weighted aggregation against a server reference update.
#[pyfunction]
fn fltrust<'py>(py: Python<'py>, updates: Vec<Vec<f64>>, server_update: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    outcome(py, agg_fltrust(&updates, &server_update).map_err(py_err)?)
}

/// Sign-vote learning rate: coordinates short of `threshold` agreeing signs move backwards.
#[pyfunction]
#[pyo3(signature = (updates, threshold, server_lr=1.0))]
fn rlr<'py>(py: Python<'py>, updates: Vec<Vec<f64>>, threshold: f64, server_lr: f64) -> PyResult<Bound<'py, PyDict>> {
    outcome(py, defense_rlr(&updates, threshold, server_lr).map_err(py_err)?)
}

/// Clip `params` to `norm_bound` and optionally add Gaussian noise.
#[pyfunction]
#[pyo3(signature = (params, norm_bound, noise=0.0, seed=0))]
fn crfl(mut params: Vec<f64>, norm_bound: f64, noise: f64, seed: u64) -> PyResult<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    defense_crfl(&mut params, norm_bound, noise, noise > 0.0, &mut rng).map_err(py_err)?;
    Ok(params)
}

fn refs(rows: &[Vec<f64>]) -> Vec<&[f64]> {
    rows.iter().map(Vec::as_slice).collect()
}

/// Mean plus `z` standard deviations, per coordinate.
#[pyfunction]
fn lie(benign: Vec<Vec<f64>>, z: f64) -> PyResult<Vec<f64>> {
    attack_lie(&refs(&benign), z).map_err(py_err)
}

/// Returns `(delta, gamma)`.
#[pyfunction]
fn min_max(benign: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, f64)> {
    let c = attack_min_max(&refs(&benign), &GammaSearch::default()).map_err(py_err)?;
    Ok((c.delta, c.gamma))
}

/// Returns `(delta, gamma)`.
#[pyfunction]
fn min_sum(benign: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, f64)> {
    let c = attack_min_sum(&refs(&benign), &GammaSearch::default()).map_err(py_err)?;
    Ok((c.delta, c.gamma))
}

#[pyfunction]
#[pyo3(signature = (len, scale, seed=0))]
fn random_noise(len: usize, scale: f64, seed: u64) -> Vec<f64> {
    attack_random_noise(len, scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Exact Shapley values from a table of coalition utilities indexed by
/// bitmask (`len(values) == 2 ** players`).
#[pyfunction]
#[pyo3(signature = (values, rho=1.0))]
fn shapley(values: Vec<f64>, rho: f64) -> PyResult<Vec<f64>> {
    let players = values.len().trailing_zeros() as usize;
    if values.len() < 2 || values.len() != 1 << players {
        return Err(PyValueError::new_err("need 2**players coalition values"));
    }
    let cfg = ShapleyConfig { rho, ..ShapleyConfig::default() };
    shapley_values(players, |mask| Ok(values[mask as usize]), &cfg).map_err(py_err)
}

/// Global model with client `i` removed from a weighted average.
#[pyfunction]
fn leave_one_out(global: Vec<f64>, local: Vec<f64>, weight: f64) -> PyResult<Vec<f64>> {
    fedcore::leave_one_out(&global, &local, weight).map_err(py_err)
}

/// Match degree between accuracy drops and aggregation weights; None when undefined.
#[pyfunction]
fn contribution_match(drops: Vec<f64>, weights: Vec<f64>) -> PyResult<Option<f64>> {
    contribution_match_degree(&drops, &weights).map_err(py_err)
}

/// Accuracy drop in percentage points.
#[pyfunction]
fn impact(benign: f64, attacked: f64) -> f64 {
    attack_impact(benign, attacked)
}

/// Gaussian class blobs around random centers.
#[pyfunction]
#[pyo3(signature = (classes, dim, per_class, separation=3.0, sigma=1.0, seed=0))]
fn blobs<'py>(
    py: Python<'py>,
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = random_centers(classes, dim, separation, &mut rng);
    let ds = make_blobs(&BlobSpec { classes, per_class, centers, sigma, domain: 0 }, &mut rng).map_err(py_err)?;
    dataset_dict(py, &ds)
}

/// Per-client label histograms of a blob dataset split across clients.
/// `beta=None` gives a uniform split, otherwise a Dirichlet label skew.
#[pyfunction]
#[pyo3(signature = (labels, classes, clients, beta=None, seed=0))]
fn partition(labels: Vec<usize>, classes: usize, clients: usize, beta: Option<f64>, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(PyValueError::new_err(format!("label {bad} out of range for {classes} classes")));
    }
    let samples = labels
        .iter()
        .map(|&label| fedsim_core::datagen::Sample {
            features: vec![0.0],
            label,
            domain: 0,
            flag: fedsim_core::datagen::PoisonFlag::Clean,
        })
        .collect();
    let ds = Dataset::new(1, classes, samples).map_err(py_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = match beta {
        Some(beta) => partition_dirichlet(&ds, &PartitionConfig { clients, beta }, &mut rng),
        None => partition_iid(&ds, clients, &mut rng),
    }
    .map_err(py_err)?;
    Ok(parts.iter().map(Dataset::label_histogram).collect())
}

/// Validate a JSON config and return it with every default filled in.
#[pyfunction]
fn normalize_config(text: &str) -> PyResult<String> {
    let cfg = fedsim_core::ExperimentConfig::from_json_str(text).map_err(py_err)?;
    cfg.to_json().map_err(py_err)
}

/// Run an experiment described by JSON text and return the report as JSON.
#[pyfunction]
#[pyo3(signature = (text, threads=1))]
fn run_experiment(py: Python<'_>, text: &str, threads: usize) -> PyResult<String> {
    let cfg = fedsim_core::ExperimentConfig::from_json_str(text).map_err(py_err)?;
    let report = py
        .detach(|| fedsim_core::run_experiment(&cfg, &RunOptions { threads: Some(threads) }))
        .map_err(py_err)?;
    report.to_json().map_err(py_err)
}

#[pymodule]
fn fedsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(weighted_mean, m)?)?;
    m.add_function(wrap_pyfunction!(median, m)?)?;
    m.add_function(wrap_pyfunction!(trimmed_mean, m)?)?;
    m.add_function(wrap_pyfunction!(multi_krum, m)?)?;
    m.add_function(wrap_pyfunction!(bulyan, m)?)?;
    m.add_function(wrap_pyfunction!(rfa, m)?)?;
    m.add_function(wrap_pyfunction!(dnc, m)?)?;
    m.add_function(wrap_pyfunction!(fltrust, m)?)?;
    m.add_function(wrap_pyfunction!(rlr, m)?)?;
    m.add_function(wrap_pyfunction!(crfl, m)?)?;
    m.add_function(wrap_pyfunction!(lie, m)?)?;
    m.add_function(wrap_pyfunction!(min_max, m)?)?;
    m.add_function(wrap_pyfunction!(min_sum, m)?)?;
    m.add_function(wrap_pyfunction!(random_noise, m)?)?;
    m.add_function(wrap_pyfunction!(shapley, m)?)?;
    m.add_function(wrap_pyfunction!(leave_one_out, m)?)?;
    m.add_function(wrap_pyfunction!(contribution_match, m)?)?;
    m.add_function(wrap_pyfunction!(impact, m)?)?;
    m.add_function(wrap_pyfunction!(blobs, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
