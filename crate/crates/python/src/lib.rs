//! Python bindings. Structured results cross the boundary as JSON strings.

use meshfuzz::config::CampaignConfig;
use meshfuzz::coordinator::{replay, run_campaign as run, CrashRecord};
use meshfuzz::engines::{apply_gain, feedback_gain as gain};
use meshfuzz::harness::{harness_execute, wrap_with_mle_headers, HarnessInput};
use meshfuzz::mle::{decode_packet, encode_packet};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn invalid(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Signed feedback gain for one iteration.
#[pyfunction]
fn feedback_gain(c_i: u64, i: u64, beta: f64, warm_i: u64, n_i: usize) -> PyResult<f64> {
    gain(c_i, i, beta, warm_i, n_i).map_err(invalid)
}

/// Probability after applying `gain` to a field with `domain_size` values.
#[pyfunction]
fn update_probability(p: f64, gain: f64, domain_size: u128) -> f64 {
    apply_gain(p, gain, domain_size)
}

/// Decodes and re-encodes a frame; the result equals the input for canonical frames.
#[pyfunction]
fn reencode<'py>(py: Python<'py>, frame: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let packet = decode_packet(frame).map_err(invalid)?;
    Ok(PyBytes::new(py, &encode_packet(&packet).map_err(invalid)?))
}

#[pyfunction]
fn wrap_payload<'py>(py: Python<'py>, payload: &[u8]) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &wrap_with_mle_headers(payload))
}

/// Runs one harness input and returns the result as JSON.
#[pyfunction]
#[pyo3(signature = (data, sanitizer = true))]
fn harness(data: &[u8], sanitizer: bool) -> PyResult<String> {
    let input = HarnessInput::from_bytes(data).map_err(invalid)?;
    let result = harness_execute(&input, sanitizer).map_err(invalid)?;
    serde_json::to_string(&result).map_err(invalid)
}

/// Runs a campaign from TOML text and returns `report.json` contents.
#[pyfunction]
fn run_campaign(py: Python<'_>, config_toml: &str) -> PyResult<String> {
    let cfg = CampaignConfig::from_toml(config_toml).map_err(invalid)?;
    let report = py.detach(|| run(&cfg)).map_err(invalid)?;
    serde_json::to_string(&report).map_err(invalid)
}

/// True when a crash record reproduces on a fresh DUT.
#[pyfunction]
fn reproduces(record_json: &str) -> PyResult<bool> {
    let record: CrashRecord = serde_json::from_str(record_json).map_err(invalid)?;
    Ok(replay(&record).reproduces(&record))
}

#[pymodule]
fn meshfuzz_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(feedback_gain, m)?)?;
    m.add_function(wrap_pyfunction!(update_probability, m)?)?;
    m.add_function(wrap_pyfunction!(reencode, m)?)?;
    m.add_function(wrap_pyfunction!(wrap_payload, m)?)?;
    m.add_function(wrap_pyfunction!(harness, m)?)?;
    m.add_function(wrap_pyfunction!(run_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(reproduces, m)?)?;
    Ok(())
}
