//! Python bindings: exact assorter arithmetic, audit sessions and the
//! Monte Carlo harness. Structured results cross the boundary as plain
//! dicts and lists (via JSON), rationals as `fractions.Fraction`.

use std::path::PathBuf;

use ::oneaudit_core as core;
use core::election::{verify_accounting, CardRecord};
use core::engine::{AuditSession, MethodConfig, SessionInputs};
use core::io::{load_bundle, write_bundle, ElectionBundle};
use core::risk::{AlphaConfig, Eta};
use core::sim::{Method, Scenario};
use core::{assorter, fixtures, Rational};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(
    oneaudit,
    AuditError,
    PyException,
    "Audit failure; args are (code, message)."
);

fn raise(e: core::AuditError) -> PyErr {
    AuditError::new_err((e.code(), e.to_string()))
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).expect("serializable");
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text)
        .map_err(|e| raise(core::AuditError::invalid("argument", e.to_string())))
}

/// Accepts int, str ("p/q") or fractions.Fraction.
fn rational(obj: &Bound<'_, PyAny>) -> PyResult<Rational> {
    let text = obj.str()?.to_string();
    core::rational_serde::parse(&text).map_err(|e| raise(core::AuditError::invalid("rational", e)))
}

fn fraction<'py>(py: Python<'py>, r: Rational) -> PyResult<Bound<'py, PyAny>> {
    py.import("fractions")?
        .getattr("Fraction")?
        .call1((r.to_string(),))
}

fn method_config(eta0: f64, d: Option<f64>, c: f64, translate: bool) -> MethodConfig {
    MethodConfig {
        alpha: AlphaConfig::ShrinkTrunc {
            eta0: Eta::FractionOfUpper(eta0),
            d,
            c,
        },
        translate,
    }
}

/// `(u + mvr - cvr) / (2u - v)` in exact arithmetic.
#[pyfunction]
fn overstatement_value<'py>(
    py: Python<'py>,
    upper: &Bound<'py, PyAny>,
    margin: &Bound<'py, PyAny>,
    mvr: &Bound<'py, PyAny>,
    cvr: &Bound<'py, PyAny>,
) -> PyResult<Bound<'py, PyAny>> {
    let b = assorter::overstatement_value(
        rational(upper)?,
        rational(margin)?,
        rational(mvr)?,
        rational(cvr)?,
    );
    fraction(py, b)
}

/// Write the two-candidate example election to `data_dir`.
#[pyfunction]
#[pyo3(signature = (data_dir, major=900, minor=100))]
fn write_example(data_dir: PathBuf, major: u64, minor: u64) -> PyResult<()> {
    let b: ElectionBundle = fixtures::alice_bob(major, minor).into();
    write_bundle(&data_dir, &b).map_err(raise)
}

/// Accounting report for the election files in `data_dir`.
#[pyfunction]
fn verify<'py>(py: Python<'py>, data_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let b = load_bundle(&data_dir).map_err(raise)?;
    let report = verify_accounting(&b.results, &b.manifest, &b.contest);
    let passed = report.passed();
    to_py(py, &serde_json::json!({"passed": passed, "report": report}))
}

/// Monte Carlo sample sizes; `scenario` is a (major, minor) pair for the
/// two-candidate example.
#[pyfunction]
#[pyo3(signature = (method, major=900, minor=100, reps=200, alpha=0.05, seed=1, wrong_outcome=false))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    method: &str,
    major: u64,
    minor: u64,
    reps: usize,
    alpha: f64,
    seed: u64,
    wrong_outcome: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let method = Method::parse(method).map_err(raise)?;
    let mut scenario = Scenario::alice_bob(major, minor);
    if wrong_outcome {
        scenario = scenario.with_wrong_outcome();
    }
    let report = py
        .detach(|| {
            core::sim::run_expected_sample_size(
                &scenario,
                method,
                &AlphaConfig::default(),
                alpha,
                reps,
                seed,
            )
        })
        .map_err(raise)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (permutations=10_000, eta=0.99, seed=6))]
fn kalamazoo<'py>(
    py: Python<'py>,
    permutations: usize,
    eta: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| core::sim::run_kalamazoo(permutations, eta, seed))
        .map_err(raise)?;
    to_py(py, &report)
}

/// Checks a transcript line by line and returns the rebuilt session.
#[pyfunction]
fn replay(text: &str) -> PyResult<Session> {
    core::engine::replay(text)
        .map(|inner| Session { inner })
        .map_err(raise)
}

#[pyclass(module = "oneaudit")]
struct Session {
    inner: AuditSession,
}

#[pymethods]
impl Session {
    /// Open a session over the election files in `data_dir`.
    #[new]
    #[pyo3(signature = (data_dir, seed, eta0=0.99, d=Some(500.0), c=0.5, translate=false))]
    fn new(
        data_dir: PathBuf,
        seed: String,
        eta0: f64,
        d: Option<f64>,
        c: f64,
        translate: bool,
    ) -> PyResult<Self> {
        let b = load_bundle(&data_dir).map_err(raise)?;
        let inner = AuditSession::open(SessionInputs {
            contest: b.contest,
            manifest: b.manifest,
            results: b.results,
            seed,
            method: method_config(eta0, d, c, translate),
        })
        .map_err(raise)?;
        Ok(Session { inner })
    }

    #[getter]
    fn status(&self) -> &'static str {
        self.inner.status.as_str()
    }

    #[getter]
    fn revision(&self) -> u64 {
        self.inner.revision()
    }

    #[getter]
    fn contest_id(&self) -> String {
        self.inner.inputs.contest.id.clone()
    }

    fn draw<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let d = self.inner.draw_next().map_err(raise)?;
        to_py(py, &d)
    }

    /// Record the hand reading of a drawn card: a candidate name, or None
    /// for a card without a valid vote in the contest.
    #[pyo3(signature = (ordinal, vote))]
    fn record<'py>(
        &mut self,
        py: Python<'py>,
        ordinal: u64,
        vote: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let contest = self.inner.inputs.contest.id.clone();
        let mvr = match self.inner.draws.get(&ordinal) {
            Some(d) => d.interpretation(&contest, vote),
            None => CardRecord::new(""),
        };
        let updates = self.inner.record_mvr(ordinal, mvr).map_err(raise)?;
        to_py(py, &updates)
    }

    /// Record a full card record (dict with `card_id` and `votes`).
    fn record_card<'py>(
        &mut self,
        py: Python<'py>,
        ordinal: u64,
        card: &Bound<'py, PyAny>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mvr: CardRecord = from_py(py, card)?;
        let updates = self.inner.record_mvr(ordinal, mvr).map_err(raise)?;
        to_py(py, &updates)
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.summary())
    }

    #[pyo3(signature = (error_rate=0.0, reps=200, seed=1))]
    fn plan<'py>(
        &self,
        py: Python<'py>,
        error_rate: f64,
        reps: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let plan = self
            .inner
            .plan_sample_size(error_rate, reps, seed)
            .map_err(raise)?;
        to_py(py, &plan)
    }

    fn transcript(&self) -> String {
        self.inner.transcript().render()
    }

    fn __repr__(&self) -> String {
        format!(
            "Session(status={}, revision={}, draws={})",
            self.inner.status.as_str(),
            self.inner.revision(),
            self.inner.draws.len()
        )
    }
}

#[pymodule]
fn oneaudit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AuditError", m.py().get_type::<AuditError>())?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(overstatement_value, m)?)?;
    m.add_function(wrap_pyfunction!(write_example, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(kalamazoo, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    Ok(())
}
