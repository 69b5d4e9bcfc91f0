//! Versioning semantics on top of the store: checkout with precedence
//! merging, commit with parent-only deduplication and single-pool schema
//! evolution, diff, and predicate scans.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{RecordId, VersionId, VersionMeta};
use crate::maintain::{assign_on_commit, Assignment, MaintenancePolicy};
use crate::store::{CommitPayload, Cvd, Record, StagingEntry};
use crate::value::{Attribute, DataType, Value};

/// A version (or precedence merge of versions) materialized as a plain table.
#[derive(Debug, Clone)]
pub struct MaterializedTable {
    pub name: String,
    /// Column attributes; for a name that was type-generalized over time this
    /// is the most general pool entry.
    pub schema: Vec<Attribute>,
    /// Values aligned with `schema`. Rows carrying a rid are unmodified
    /// copies out of the CVD.
    pub rows: Vec<(Option<RecordId>, Vec<Value>)>,
    pub parent_vids: Vec<VersionId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffResult {
    pub only_in_a: BTreeSet<RecordId>,
    pub only_in_b: BTreeSet<RecordId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// One conjunct of a scan predicate: `attr op literal`.
#[derive(Debug, Clone)]
pub struct Predicate {
    pub attr: String,
    pub op: CmpOp,
    pub value: String,
}

impl Predicate {
    /// Parses `"price >= 10"` / `"name=x"` forms.
    pub fn parse(s: &str) -> Result<Predicate> {
        let ops = [
            ("<=", CmpOp::Le),
            (">=", CmpOp::Ge),
            ("!=", CmpOp::Ne),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
            ("=", CmpOp::Eq),
        ];
        for (tok, op) in ops {
            if let Some(i) = s.find(tok) {
                let attr = s[..i].trim();
                let value = s[i + tok.len()..].trim();
                if attr.is_empty() || value.is_empty() {
                    break;
                }
                return Ok(Predicate {
                    attr: attr.to_string(),
                    op,
                    value: value.to_string(),
                });
            }
        }
        Err(Error::Parameter(format!("cannot parse predicate '{s}'")))
    }
}

/// Resolves each attr_id to the pool entry, and each attribute name to its
/// most general (latest) pool entry.
fn pool_by_name(attributes: &[Attribute]) -> HashMap<&str, &Attribute> {
    let mut m: HashMap<&str, &Attribute> = HashMap::new();
    for a in attributes {
        m.insert(a.name.as_str(), a); // later entries win
    }
    m
}

fn pool_by_id(attributes: &[Attribute]) -> HashMap<u32, &Attribute> {
    attributes.iter().map(|a| (a.attr_id, a)).collect()
}

/// Loads the records of a set of versions, reading each touched partition
/// once. Returns rid -> record plus the total records read.
fn load_version_records(
    cvd: &Cvd,
    vids: &[VersionId],
) -> Result<(HashMap<RecordId, Record>, u64)> {
    let mut partitions = BTreeSet::new();
    for vid in vids {
        let (pid, _) = cvd
            .state
            .versions
            .get(vid)
            .ok_or(Error::MissingVersion(vid.0))?;
        partitions.insert(*pid);
    }
    let mut map = HashMap::new();
    let mut cost = 0u64;
    for pid in partitions {
        let seg = cvd.load_partition(pid)?;
        cost += seg.read_cost;
        for r in seg.records {
            map.insert(r.rid, r);
        }
    }
    Ok((map, cost))
}

/// Column schema of a checkout: union of the versions' schemas in precedence
/// order, collapsed by attribute name to the most general pool entry.
fn union_schema(cvd: &Cvd, vids: &[VersionId]) -> Result<Vec<Attribute>> {
    let by_id = pool_by_id(&cvd.state.attributes);
    let by_name = pool_by_name(&cvd.state.attributes);
    let mut out: Vec<Attribute> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for vid in vids {
        let meta = cvd
            .state
            .metas
            .get(vid)
            .ok_or(Error::MissingVersion(vid.0))?;
        for attr_id in &meta.attributes {
            let a = by_id
                .get(attr_id)
                .ok_or_else(|| Error::Schema(format!("unknown attr id {attr_id}")))?;
            if seen.insert(a.name.clone()) {
                out.push((*by_name[a.name.as_str()]).clone());
            }
        }
    }
    Ok(out)
}

/// Projects a stored record onto a column schema, matching by attribute name
/// so rows written before a type generalization still line up.
fn project(rec: &Record, schema: &[Attribute], by_id: &HashMap<u32, &Attribute>) -> Vec<Value> {
    let mut by_name: HashMap<&str, &Value> = HashMap::new();
    for (attr_id, v) in &rec.values {
        if let Some(a) = by_id.get(attr_id) {
            by_name.insert(a.name.as_str(), v);
        }
    }
    schema
        .iter()
        .map(|col| by_name.get(col.name.as_str()).cloned().cloned().unwrap_or(Value::Null))
        .collect()
}

fn pk_key(schema: &[Attribute], values: &[Value], pk: &[String]) -> Option<String> {
    if pk.is_empty() {
        return None;
    }
    let mut key = String::new();
    for p in pk {
        let i = schema.iter().position(|a| &a.name == p)?;
        key.push_str(&values[i].canonical());
        key.push('\u{1f}');
    }
    Some(key)
}

/// Materializes `vids` merged in precedence order: earlier versions win on
/// primary-key collisions. Persists the result in the staging area and bumps
/// each version's checkout frequency. Returns the table and the abstract
/// read cost (records read from segments).
pub fn checkout(
    cvd: &mut Cvd,
    vids: &[VersionId],
    dest_name: &str,
) -> Result<(MaterializedTable, u64)> {
    if vids.is_empty() {
        return Err(Error::EmptyScope);
    }
    if cvd.list_staging()?.iter().any(|n| n == dest_name) {
        return Err(Error::StagingConflict(dest_name.to_string()));
    }
    let schema = union_schema(cvd, vids)?;
    let (records, cost) = load_version_records(cvd, vids)?;
    let by_id = pool_by_id(&cvd.state.attributes);

    let mut rows: Vec<(Option<RecordId>, Vec<Value>)> = Vec::new();
    let mut seen_rids: BTreeSet<RecordId> = BTreeSet::new();
    let mut seen_pks: BTreeSet<String> = BTreeSet::new();
    for vid in vids {
        let (_, rlist) = &cvd.state.versions[vid];
        for rid in rlist {
            if seen_rids.contains(rid) {
                continue;
            }
            let rec = records
                .get(rid)
                .ok_or_else(|| Error::Corruption(format!("rid {} unresolved", rid.0)))?;
            let values = project(rec, &schema, &by_id);
            if let Some(key) = pk_key(&schema, &values, &cvd.state.pk) {
                if !seen_pks.insert(key) {
                    continue; // shadowed by a higher-precedence version
                }
            }
            seen_rids.insert(*rid);
            rows.push((Some(*rid), values));
        }
    }

    let entry = StagingEntry {
        name: dest_name.to_string(),
        parent_vids: vids.to_vec(),
        created_at: 0,
        attributes: schema.iter().map(|a| a.attr_id).collect(),
        rows: rows
            .iter()
            .map(|(rid, vals)| {
                (
                    *rid,
                    schema
                        .iter()
                        .zip(vals)
                        .filter(|(_, v)| !v.is_null())
                        .map(|(a, v)| (a.attr_id, v.clone()))
                        .collect(),
                )
            })
            .collect(),
    };
    cvd.put_staging(&entry)?;
    cvd.bump_frequencies(vids)?;
    Ok((
        MaterializedTable {
            name: dest_name.to_string(),
            schema,
            rows,
            parent_vids: vids.to_vec(),
        },
        cost,
    ))
}

/// Rebuilds a MaterializedTable out of its staging entry.
pub fn staged_table(cvd: &Cvd, name: &str) -> Result<MaterializedTable> {
    let entry = cvd.get_staging(name)?;
    let by_id = pool_by_id(&cvd.state.attributes);
    let schema: Vec<Attribute> = entry
        .attributes
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .map(|a| (**a).clone())
                .ok_or_else(|| Error::Schema(format!("unknown attr id {id}")))
        })
        .collect::<Result<_>>()?;
    let rows = entry
        .rows
        .iter()
        .map(|(rid, vals)| {
            let m: HashMap<u32, &Value> = vals.iter().map(|(a, v)| (*a, v)).collect();
            (
                *rid,
                schema
                    .iter()
                    .map(|a| m.get(&a.attr_id).cloned().cloned().unwrap_or(Value::Null))
                    .collect(),
            )
        })
        .collect();
    Ok(MaterializedTable {
        name: name.to_string(),
        schema,
        rows,
        parent_vids: entry.parent_vids,
    })
}

/// Commits a table as a new version.
///
/// Rows whose full value tuple equals a row of any parent version reuse that
/// record; everything else gets a fresh rid — rows are never compared against
/// non-parent ancestors, so a record deleted and later re-added verbatim
/// comes back under a new rid. Schema changes fold into the single attribute
/// pool: unknown names become new attributes, a more general type for a known
/// name appends a generalized entry, a narrower type is rejected.
pub fn commit(
    cvd: &mut Cvd,
    table: &MaterializedTable,
    message: &str,
    policy: &MaintenancePolicy,
) -> Result<VersionId> {
    if table.parent_vids.is_empty() {
        return Err(Error::OrphanTable(table.name.clone()));
    }
    for v in &table.parent_vids {
        if !cvd.state.versions.contains_key(v) {
            return Err(Error::MissingVersion(v.0));
        }
    }

    // fold the table schema into the pool
    let mut new_attributes: Vec<Attribute> = Vec::new();
    let mut next_attr_id = cvd.state.attributes.len() as u32 + 1;
    let mut columns: Vec<Attribute> = Vec::new(); // resolved column attrs
    {
        let by_name = pool_by_name(&cvd.state.attributes);
        for col in &table.schema {
            match by_name.get(col.name.as_str()) {
                None => {
                    let a = Attribute {
                        attr_id: next_attr_id,
                        name: col.name.clone(),
                        dtype: col.dtype,
                    };
                    next_attr_id += 1;
                    new_attributes.push(a.clone());
                    columns.push(a);
                }
                Some(existing) => {
                    if existing.dtype == col.dtype {
                        columns.push((*existing).clone());
                    } else if col.dtype.accepts(existing.dtype) {
                        let a = Attribute {
                            attr_id: next_attr_id,
                            name: col.name.clone(),
                            dtype: col.dtype,
                        };
                        next_attr_id += 1;
                        new_attributes.push(a.clone());
                        columns.push(a);
                    } else {
                        return Err(Error::Schema(format!(
                            "attribute '{}' cannot change from {} to {}",
                            col.name,
                            existing.dtype.name(),
                            col.dtype.name()
                        )));
                    }
                }
            }
        }
    }

    // index parent records by full value tuple (keyed by attribute names)
    let (parent_records, _) = load_version_records(cvd, &table.parent_vids)?;
    let by_id = pool_by_id(&cvd.state.attributes);
    let mut parent_rids: BTreeSet<RecordId> = BTreeSet::new();
    for v in &table.parent_vids {
        parent_rids.extend(cvd.state.versions[v].1.iter().copied());
    }
    let tuple_key = |names_vals: &mut Vec<(String, String)>| -> String {
        names_vals.sort();
        let mut s = String::new();
        for (n, v) in names_vals.iter() {
            s.push_str(n);
            s.push('\u{1e}');
            s.push_str(v);
            s.push('\u{1f}');
        }
        s
    };
    let mut by_tuple: HashMap<String, RecordId> = HashMap::new();
    for rid in &parent_rids {
        let rec = &parent_records[rid];
        let mut nv: Vec<(String, String)> = rec
            .values
            .iter()
            .filter(|(_, v)| !v.is_null())
            .filter_map(|(a, v)| by_id.get(a).map(|attr| (attr.name.clone(), v.canonical())))
            .collect();
        by_tuple.entry(tuple_key(&mut nv)).or_insert(*rid);
    }

    // resolve rows: reuse or fresh
    let mut rlist: Vec<RecordId> = Vec::with_capacity(table.rows.len());
    let mut fresh_rows: Vec<Vec<(u32, Value)>> = Vec::new();
    let mut fresh_marks: Vec<usize> = Vec::new(); // positions in rlist to fill
    let mut pk_seen: BTreeSet<String> = BTreeSet::new();
    for (_, values) in &table.rows {
        if values.len() != columns.len() {
            return Err(Error::Schema("row width differs from schema".into()));
        }
        if let Some(key) = pk_key(&columns, values, &cvd.state.pk) {
            if !pk_seen.insert(key) {
                return Err(Error::Constraint(format!(
                    "duplicate primary key in table '{}'",
                    table.name
                )));
            }
        }
        let mut nv: Vec<(String, String)> = columns
            .iter()
            .zip(values)
            .filter(|(_, v)| !v.is_null())
            .map(|(a, v)| (a.name.clone(), v.canonical()))
            .collect();
        match by_tuple.get(&tuple_key(&mut nv)) {
            Some(rid) => rlist.push(*rid),
            None => {
                fresh_marks.push(rlist.len());
                rlist.push(RecordId(0)); // placeholder
                fresh_rows.push(
                    columns
                        .iter()
                        .zip(values)
                        .filter(|(_, v)| !v.is_null())
                        .map(|(a, v)| (a.attr_id, v.clone()))
                        .collect(),
                );
            }
        }
    }
    let fresh_rids = cvd.alloc_rids(fresh_rows.len() as u64);
    for (pos, rid) in fresh_marks.iter().zip(&fresh_rids) {
        rlist[*pos] = *rid;
    }
    let new_records: Vec<Record> = fresh_rids
        .iter()
        .zip(fresh_rows)
        .map(|(rid, values)| Record { rid: *rid, values })
        .collect();

    // metadata with cached edge weights
    let vid = cvd.next_vid();
    let rset: BTreeSet<RecordId> = rlist.iter().copied().collect();
    let mut meta = VersionMeta::new(vid);
    meta.parents = table.parent_vids.iter().copied().collect();
    meta.commit_time = unix_now();
    meta.create_time = meta.commit_time;
    meta.message = message.to_string();
    meta.attributes = columns.iter().map(|a| a.attr_id).collect();
    for p in &table.parent_vids {
        let w = cvd.state.versions[p]
            .1
            .iter()
            .filter(|r| rset.contains(r))
            .count() as u64;
        meta.parent_weights.insert(*p, w);
    }

    // partition assignment: split-or-join against the max-weight parent
    let (&max_parent, &max_w) = meta
        .parent_weights
        .iter()
        .max_by_key(|(p, w)| (**w, std::cmp::Reverse(**p)))
        .unwrap();
    let parent_partition = cvd.state.versions[&max_parent].0;
    let total_records = cvd.state.next_rid - 1;
    let decision = assign_on_commit(
        parent_partition,
        max_w,
        total_records,
        cvd.total_stored_records(),
        policy,
    );
    let (partition_id, segment_rows) = match decision {
        Assignment::NewPartition => {
            // a new partition needs every record of the version, including
            // copies of records that live only in other partitions
            let mut rows = new_records.clone();
            let have: BTreeSet<RecordId> = rows.iter().map(|r| r.rid).collect();
            let missing: BTreeSet<RecordId> =
                rset.iter().filter(|r| !have.contains(r)).copied().collect();
            rows.extend(cvd.fetch_records(&missing)?);
            (cvd.state.next_partition, rows)
        }
        Assignment::Join(pid) => {
            let present = cvd.partition_rid_set(pid);
            let mut rows = new_records.clone();
            let have: BTreeSet<RecordId> = rows.iter().map(|r| r.rid).collect();
            let missing: BTreeSet<RecordId> = rset
                .iter()
                .filter(|r| !present.contains(**r) && !have.contains(r))
                .copied()
                .collect();
            rows.extend(cvd.fetch_records(&missing)?);
            (pid, rows)
        }
    };

    cvd.append_commit(CommitPayload {
        vid,
        partition_id,
        rlist,
        new_records: segment_rows,
        meta,
        new_attributes,
    })?;
    let _ = cvd.remove_staging(&table.name);
    Ok(vid)
}

/// Set difference of two versions' rlists.
pub fn diff(cvd: &Cvd, a: VersionId, b: VersionId) -> Result<DiffResult> {
    let ra: BTreeSet<RecordId> = cvd
        .state
        .versions
        .get(&a)
        .ok_or(Error::MissingVersion(a.0))?
        .1
        .iter()
        .copied()
        .collect();
    let rb: BTreeSet<RecordId> = cvd
        .state
        .versions
        .get(&b)
        .ok_or(Error::MissingVersion(b.0))?
        .1
        .iter()
        .copied()
        .collect();
    Ok(DiffResult {
        only_in_a: ra.difference(&rb).copied().collect(),
        only_in_b: rb.difference(&ra).copied().collect(),
    })
}

fn value_cmp(a: &Value, b: &Value) -> Option<std::cmp::Ordering> {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => Some(x.cmp(y)),
        (Value::Int(x), Value::Dec(y)) => (*x as f64).partial_cmp(y),
        (Value::Dec(x), Value::Int(y)) => x.partial_cmp(&(*y as f64)),
        (Value::Dec(x), Value::Dec(y)) => x.partial_cmp(y),
        (Value::Text(x), Value::Text(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

/// Filters a version's records by a conjunction of comparisons, without
/// staging anything. Null values satisfy no comparison.
pub fn scan_version(cvd: &Cvd, vid: VersionId, predicates: &[Predicate]) -> Result<Vec<Record>> {
    let meta = cvd
        .state
        .metas
        .get(&vid)
        .ok_or(Error::MissingVersion(vid.0))?;
    let by_id = pool_by_id(&cvd.state.attributes);
    let by_name = pool_by_name(&cvd.state.attributes);
    // predicates must reference the version's schema
    let mut compiled: Vec<(String, CmpOp, Value)> = Vec::new();
    for p in predicates {
        let in_schema = meta
            .attributes
            .iter()
            .any(|id| by_id.get(id).is_some_and(|a| a.name == p.attr));
        if !in_schema {
            return Err(Error::Schema(format!(
                "attribute '{}' is not in {vid}'s schema",
                p.attr
            )));
        }
        let dtype = by_name[p.attr.as_str()].dtype;
        let lit = Value::parse(&p.value, dtype, 0)?;
        compiled.push((p.attr.clone(), p.op, lit));
    }

    let (records, _) = load_version_records(cvd, &[vid])?;
    let rlist = &cvd.state.versions[&vid].1;
    let mut out = Vec::new();
    'rows: for rid in rlist {
        let rec = &records[rid];
        let mut vals: HashMap<&str, &Value> = HashMap::new();
        for (a, v) in &rec.values {
            if let Some(attr) = by_id.get(a) {
                vals.insert(attr.name.as_str(), v);
            }
        }
        for (attr, op, lit) in &compiled {
            let v = vals.get(attr.as_str()).copied().unwrap_or(&Value::Null);
            let ord = value_cmp(v, lit);
            let pass = match (op, ord) {
                (CmpOp::Eq, Some(o)) => o.is_eq(),
                (CmpOp::Ne, Some(o)) => !o.is_eq(),
                (CmpOp::Lt, Some(o)) => o.is_lt(),
                (CmpOp::Le, Some(o)) => o.is_le(),
                (CmpOp::Gt, Some(o)) => o.is_gt(),
                (CmpOp::Ge, Some(o)) => o.is_ge(),
                (CmpOp::Ne, None) => !v.is_null(), // incomparable but present
                (_, None) => false,
            };
            if !pass {
                continue 'rows;
            }
        }
        out.push(rec.clone());
    }
    Ok(out)
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

// ---- CSV interchange ----

/// Parses a schema file of `name:type` lines.
pub fn read_schema_file(path: &Path) -> Result<Vec<(String, DataType)>> {
    let content = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, ty) = line.split_once(':').ok_or(Error::Parse {
            line: i + 1,
            msg: "expected name:type".into(),
        })?;
        out.push((name.trim().to_string(), DataType::parse(ty)?));
    }
    if out.is_empty() {
        return Err(Error::Schema("schema file declares no attributes".into()));
    }
    Ok(out)
}

/// Reads a CSV file under a declared schema. The header must list exactly
/// the schema's attribute names in order.
pub fn read_csv(path: &Path, schema: &[(String, DataType)]) -> Result<Vec<Vec<Value>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
    {
        let headers = rdr.headers().map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        let names: Vec<&str> = schema.iter().map(|(n, _)| n.as_str()).collect();
        let got: Vec<&str> = headers.iter().collect();
        if got != names {
            return Err(Error::Schema(format!(
                "csv header [{}] does not match schema [{}]",
                got.join(", "),
                names.join(", ")
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(schema.len());
        for (field, (_, dtype)) in rec.iter().zip(schema) {
            row.push(Value::parse(field, *dtype, i + 2)?);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Writes a materialized table as CSV (header = attribute names).
pub fn write_csv(table: &MaterializedTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(table.schema.iter().map(|a| a.name.as_str()))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for (_, values) in &table.rows {
        w.write_record(values.iter().map(|v| v.display()))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Creates a CVD whose root version holds `rows` (possibly empty) under the
/// given schema and primary key.
pub fn init_cvd(
    dir: &Path,
    name: &str,
    schema: &[(String, DataType)],
    pk: &[String],
    rows: &[Vec<Value>],
) -> Result<Cvd> {
    let attributes: Vec<Attribute> = schema
        .iter()
        .enumerate()
        .map(|(i, (n, t))| Attribute {
            attr_id: i as u32 + 1,
            name: n.clone(),
            dtype: *t,
        })
        .collect();
    let mut pk_seen = BTreeSet::new();
    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != attributes.len() {
            return Err(Error::Parse {
                line: i + 2,
                msg: "row width differs from schema".into(),
            });
        }
        if let Some(key) = pk_key(&attributes, row, pk) {
            if !pk_seen.insert(key) {
                return Err(Error::Constraint(format!(
                    "duplicate primary key at row {}",
                    i + 1
                )));
            }
        }
        records.push(Record {
            rid: RecordId(i as u64 + 1),
            values: attributes
                .iter()
                .zip(row)
                .filter(|(_, v)| !v.is_null())
                .map(|(a, v)| (a.attr_id, v.clone()))
                .collect(),
        });
    }
    Cvd::init(dir, name, attributes, pk.to_vec(), records)
}
