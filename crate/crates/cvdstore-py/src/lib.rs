//! Python bindings: a `Store` handle over a root directory and a `Dataset`
//! handle per CVD. Every method opens the underlying store for the duration
//! of the call, so handles are cheap and never hold the writer lock across
//! Python statements.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use cvdstore::engine;
use cvdstore::error::Error;
use cvdstore::graph::{RecordId, VersionId};
use cvdstore::maintain::{
    execute_migration, maintenance_check, plan_migration, CheckOutcome, MaintenancePolicy,
    StorageBudget,
};
use cvdstore::partition::{estimate_costs, PartitioningScheme};
use cvdstore::store::{Cvd, StoreRoot};
use cvdstore::value::{DataType, Value};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Corruption(m) | Error::Consistency(m) | Error::InvariantViolation(m) => {
            PyRuntimeError::new_err(m)
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn value_to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Int(i) => i.into_pyobject(py)?.into_any().unbind(),
        Value::Dec(d) => d.into_pyobject(py)?.into_any().unbind(),
        Value::Text(s) => s.into_pyobject(py)?.into_any().unbind(),
    })
}

fn py_to_value(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    if obj.is_none() {
        Ok(Value::Null)
    } else if let Ok(i) = obj.extract::<i64>() {
        Ok(Value::Int(i))
    } else if let Ok(d) = obj.extract::<f64>() {
        Ok(Value::Dec(d))
    } else if let Ok(s) = obj.extract::<String>() {
        Ok(Value::Text(s))
    } else {
        Err(PyValueError::new_err(format!(
            "unsupported cell value: {obj:?}"
        )))
    }
}

fn parse_schema(schema: Vec<(String, String)>) -> PyResult<Vec<(String, DataType)>> {
    schema
        .into_iter()
        .map(|(n, t)| {
            DataType::parse(&t)
                .map(|t| (n, t))
                .map_err(to_py_err)
        })
        .collect()
}

/// A directory of CVDs.
#[pyclass]
struct Store {
    root: StoreRoot,
    path: PathBuf,
}

#[pymethods]
impl Store {
    #[new]
    fn new(root: PathBuf) -> Store {
        Store {
            root: StoreRoot::new(root.clone()),
            path: root,
        }
    }

    /// Creates a CVD whose root version holds `rows` under `schema`
    /// (pairs of name and "int" | "decimal" | "text").
    #[pyo3(signature = (name, schema, rows=vec![], pk=vec![]))]
    fn init(
        &self,
        name: &str,
        schema: Vec<(String, String)>,
        rows: Vec<Vec<Py<PyAny>>>,
        pk: Vec<String>,
        py: Python<'_>,
    ) -> PyResult<Dataset> {
        let schema = parse_schema(schema)?;
        let rows: Vec<Vec<Value>> = rows
            .iter()
            .map(|r| r.iter().map(|c| py_to_value(c.bind(py))).collect())
            .collect::<PyResult<_>>()?;
        engine::init_cvd(&self.root.cvd_dir(name), name, &schema, &pk, &rows)
            .map_err(to_py_err)?;
        Ok(Dataset {
            dir: self.root.cvd_dir(name),
            name: name.to_string(),
        })
    }

    fn list(&self) -> PyResult<Vec<String>> {
        self.root.list_cvds().map_err(to_py_err)
    }

    /// Removes a CVD; returns the names of staged checkouts that were purged.
    fn drop(&self, name: &str) -> PyResult<Vec<String>> {
        self.root.drop_cvd(name).map_err(to_py_err)
    }

    fn dataset(&self, name: &str) -> PyResult<Dataset> {
        let dir = self.root.cvd_dir(name);
        Cvd::open_reader(&dir, name).map_err(to_py_err)?;
        Ok(Dataset {
            dir,
            name: name.to_string(),
        })
    }

    fn __repr__(&self) -> String {
        format!("Store({:?})", self.path)
    }
}

/// One versioned dataset.
#[pyclass]
struct Dataset {
    dir: PathBuf,
    name: String,
}

impl Dataset {
    fn reader(&self) -> PyResult<Cvd> {
        Cvd::open_reader(&self.dir, &self.name).map_err(to_py_err)
    }

    fn writer(&self) -> PyResult<Cvd> {
        Cvd::open_writer(&self.dir, &self.name).map_err(to_py_err)
    }
}

#[pymethods]
impl Dataset {
    /// Committed version ids, ascending.
    fn versions(&self) -> PyResult<Vec<u32>> {
        Ok(self.reader()?.state.versions.keys().map(|v| v.0).collect())
    }

    /// The attribute pool as (name, type) pairs, later entries superseding
    /// earlier ones of the same name.
    fn schema(&self) -> PyResult<Vec<(String, String)>> {
        Ok(self
            .reader()?
            .state
            .attributes
            .iter()
            .map(|a| (a.name.clone(), a.dtype.name().to_string()))
            .collect())
    }

    /// Materializes versions in precedence order into a staged table.
    /// Returns (column names, rows, records_read).
    fn checkout(
        &self,
        vids: Vec<u32>,
        dest: &str,
        py: Python<'_>,
    ) -> PyResult<(Vec<String>, Py<PyList>, u64)> {
        let mut cvd = self.writer()?;
        let vids: Vec<VersionId> = vids.into_iter().map(VersionId).collect();
        let (table, cost) = engine::checkout(&mut cvd, &vids, dest).map_err(to_py_err)?;
        let names = table.schema.iter().map(|a| a.name.clone()).collect();
        let rows = PyList::empty(py);
        for (_, vals) in &table.rows {
            let row = PyList::empty(py);
            for v in vals {
                row.append(value_to_py(py, v)?)?;
            }
            rows.append(row)?;
        }
        Ok((names, rows.unbind(), cost))
    }

    /// Commits a staged table as a new version; `rows` replaces the staged
    /// contents when given (cells aligned with the staged column order).
    #[pyo3(signature = (dest, message="", rows=None))]
    fn commit(
        &self,
        dest: &str,
        message: &str,
        rows: Option<Vec<Vec<Py<PyAny>>>>,
        py: Python<'_>,
    ) -> PyResult<u32> {
        let mut cvd = self.writer()?;
        let mut table = engine::staged_table(&cvd, dest).map_err(to_py_err)?;
        if let Some(rows) = rows {
            table.rows = rows
                .iter()
                .map(|r| {
                    if r.len() != table.schema.len() {
                        return Err(PyValueError::new_err(format!(
                            "row width {} != schema width {}",
                            r.len(),
                            table.schema.len()
                        )));
                    }
                    let vals: Vec<Value> = r
                        .iter()
                        .map(|c| py_to_value(c.bind(py)))
                        .collect::<PyResult<_>>()?;
                    Ok((None, vals))
                })
                .collect::<PyResult<_>>()?;
        }
        let vid = engine::commit(&mut cvd, &table, message, &MaintenancePolicy::default())
            .map_err(to_py_err)?;
        Ok(vid.0)
    }

    /// Record ids only in `a` and only in `b`.
    fn diff(&self, a: u32, b: u32) -> PyResult<(Vec<u64>, Vec<u64>)> {
        let d = engine::diff(&self.reader()?, VersionId(a), VersionId(b)).map_err(to_py_err)?;
        Ok((
            d.only_in_a.iter().map(|r| r.0).collect(),
            d.only_in_b.iter().map(|r| r.0).collect(),
        ))
    }

    /// Filters one version by conjuncts like "price>=10". Returns a list of
    /// {column: value} dicts.
    #[pyo3(signature = (vid, where_=vec![]))]
    fn scan(&self, vid: u32, where_: Vec<String>, py: Python<'_>) -> PyResult<Py<PyList>> {
        let cvd = self.reader()?;
        let preds = where_
            .iter()
            .map(|s| engine::Predicate::parse(s).map_err(to_py_err))
            .collect::<PyResult<Vec<_>>>()?;
        let records = engine::scan_version(&cvd, VersionId(vid), &preds).map_err(to_py_err)?;
        let names: std::collections::HashMap<u32, &str> = cvd
            .state
            .attributes
            .iter()
            .map(|a| (a.attr_id, a.name.as_str()))
            .collect();
        let out = PyList::empty(py);
        for r in records {
            let d = PyDict::new(py);
            d.set_item("rid", r.rid.0)?;
            for (id, v) in &r.values {
                d.set_item(names.get(id).copied().unwrap_or("?"), value_to_py(py, v)?)?;
            }
            out.append(d)?;
        }
        Ok(out.unbind())
    }

    /// Runs a maintenance check under (gamma, mu) and migrates the physical
    /// layout when average checkout cost exceeds mu times the best
    /// achievable. `gamma` is a multiple of the distinct record count.
    /// Returns {migrated, storage, avg_checkout, partitions}.
    #[pyo3(signature = (gamma=2.0, mu=1.5))]
    fn optimize(&self, gamma: f64, mu: f64, py: Python<'_>) -> PyResult<Py<PyDict>> {
        let mut cvd = self.writer()?;
        let policy = MaintenancePolicy {
            budget: StorageBudget::MultipleOfRecords(gamma),
            mu,
            ..MaintenancePolicy::default()
        };
        policy.validate().map_err(to_py_err)?;
        let graph = cvd.state.version_graph().map_err(to_py_err)?;
        let mut current = PartitioningScheme {
            partitions: cvd.state.partition_members().into_values().collect(),
            record_counts: Vec::new(),
            delta: 0.0,
            depth: 0,
        };
        current.partitions.sort();
        current.recount(&graph).map_err(to_py_err)?;
        let (migrated, scheme) = match maintenance_check(&current, &graph, &policy)
            .map_err(to_py_err)?
        {
            CheckOutcome::Ok { .. } => (false, current),
            CheckOutcome::Migrate { scheme, .. } => {
                let plan = plan_migration(&cvd.state.partition_members(), &scheme, &graph)
                    .map_err(to_py_err)?;
                execute_migration(&mut cvd, &plan).map_err(to_py_err)?;
                (true, scheme)
            }
        };
        let report = estimate_costs(&graph, &scheme).map_err(to_py_err)?;
        let d = PyDict::new(py);
        d.set_item("migrated", migrated)?;
        d.set_item("storage", report.storage)?;
        d.set_item("avg_checkout", report.avg_checkout)?;
        d.set_item("partitions", scheme.partitions.len())?;
        Ok(d.unbind())
    }

    /// The records of one version as (rid, {column: value}) pairs.
    fn records(&self, vid: u32, py: Python<'_>) -> PyResult<Py<PyList>> {
        self.scan(vid, vec![], py)
    }

    fn __repr__(&self) -> String {
        format!("Dataset({:?})", self.name)
    }
}

/// Computes the record-id set difference without opening a store — handy for
/// sanity checks from Python.
#[pyfunction]
fn rlist_diff(a: Vec<u64>, b: Vec<u64>) -> (Vec<u64>, Vec<u64>) {
    let sa: std::collections::BTreeSet<RecordId> = a.into_iter().map(RecordId).collect();
    let sb: std::collections::BTreeSet<RecordId> = b.into_iter().map(RecordId).collect();
    (
        sa.difference(&sb).map(|r| r.0).collect(),
        sb.difference(&sa).map(|r| r.0).collect(),
    )
}

#[pymodule]
fn cvdstore_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Store>()?;
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(rlist_diff, m)?)?;
    Ok(())
}
