//! Durable on-disk representation of one CVD.
//!
//! Layout of a CVD directory:
//!
//! - `MANIFEST.<n>` — JSON, monotonically numbered; the atomic commit point.
//!   Records the logical length (lines or bytes) of every other file, so a
//!   torn append past the recorded length is invisible and truncated on the
//!   next write.
//! - `attributes.json` — append-only JSON-lines attribute pool.
//! - `metadata.json` — append-only JSON-lines version metadata; the last row
//!   per vid within the manifest-recorded line count wins.
//! - `versions.tsv` — append-only versioning table: `vid \t partition \t`
//!   space-separated rids (insertion order); last row per vid wins.
//! - `part_<k>.seg` — one segment per partition, binary rows after a
//!   plain-text header. Commits append; migration writes whole new segments
//!   under fresh partition ids, never mutating existing files in place.
//! - `staging/<name>.json` — checked-out tables awaiting commit (scratch
//!   space, outside the manifest).
//! - `lock` — advisory writer lock.
//!
//! Segment row format: `u32` little-endian payload length, then `u64` rid,
//! `u32` attribute-pool size at write time, a presence bitmap over pool
//! positions, and one tagged value per set bit in ascending attr_id order
//! (tag 1 = i64, 2 = f64, 3 = length-prefixed UTF-8).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{RecordId, VersionGraph, VersionId, VersionMeta};
use crate::value::{Attribute, Value};

/// One stored record: non-null values keyed by attr_id, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub rid: RecordId,
    pub values: Vec<(u32, Value)>,
}

impl Record {
    pub fn get(&self, attr_id: u32) -> &Value {
        self.values
            .iter()
            .find(|(a, _)| *a == attr_id)
            .map(|(_, v)| v)
            .unwrap_or(&Value::Null)
    }
}

/// A loaded partition segment plus its abstract read cost (its record count).
#[derive(Debug)]
pub struct DataSegment {
    pub partition_id: u64,
    pub records: Vec<Record>,
    pub read_cost: u64,
}

/// A checked-out table waiting in the staging area.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagingEntry {
    pub name: String,
    pub parent_vids: Vec<VersionId>,
    pub created_at: u64,
    /// Attr ids of the materialized schema, in column order.
    pub attributes: Vec<u32>,
    /// Rows: committed rows keep their rid, edited/new rows have none.
    pub rows: Vec<(Option<RecordId>, Vec<(u32, Value)>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SegmentInfo {
    file: String,
    records: u64,
    bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    generation: u64,
    attr_lines: u64,
    meta_lines: u64,
    version_lines: u64,
    /// Logical byte lengths of the three append-only text files; appends
    /// resume here without rescanning the files.
    attr_bytes: u64,
    meta_bytes: u64,
    version_bytes: u64,
    next_rid: u64,
    next_vid: u32,
    next_partition: u64,
    pk: Vec<String>,
    partitions: BTreeMap<u64, SegmentInfo>,
}

/// Deterministic crash-injection hook for the durability tests. Every
/// physical file operation calls [`CrashHook::point`] first; arming the hook
/// at index `i` makes the `i`-th operation fail before touching the disk.
#[derive(Debug, Default)]
pub struct CrashHook {
    pub counter: u64,
    pub fail_at: Option<u64>,
}

impl CrashHook {
    fn point(&mut self) -> Result<()> {
        let i = self.counter;
        self.counter += 1;
        if self.fail_at == Some(i) {
            return Err(Error::InjectedCrash);
        }
        Ok(())
    }
}

/// Dense bitset over record ids; cheap membership for hot commit paths.
#[derive(Debug, Clone)]
pub struct RidSet {
    bits: Vec<u64>,
}

impl RidSet {
    pub fn with_universe(max_exclusive: u64) -> RidSet {
        RidSet {
            bits: vec![0; (max_exclusive as usize / 64) + 1],
        }
    }

    pub fn insert(&mut self, r: RecordId) {
        let i = (r.0 / 64) as usize;
        if i >= self.bits.len() {
            self.bits.resize(i + 1, 0);
        }
        self.bits[i] |= 1 << (r.0 % 64);
    }

    pub fn contains(&self, r: RecordId) -> bool {
        self.bits
            .get((r.0 / 64) as usize)
            .is_some_and(|w| w & (1 << (r.0 % 64)) != 0)
    }
}

/// In-memory image of the durable state, rebuilt from the manifest on open.
#[derive(Debug, Clone)]
pub struct CvdState {
    pub attributes: Vec<Attribute>,
    pub pk: Vec<String>,
    pub metas: BTreeMap<VersionId, VersionMeta>,
    /// vid -> (partition_id, rlist in insertion order)
    pub versions: BTreeMap<VersionId, (u64, Vec<RecordId>)>,
    pub next_rid: u64,
    pub next_vid: u32,
    pub next_partition: u64,
}

impl CvdState {
    /// Version ids assigned to each partition.
    pub fn partition_members(&self) -> BTreeMap<u64, Vec<VersionId>> {
        let mut m: BTreeMap<u64, Vec<VersionId>> = BTreeMap::new();
        for (vid, (k, _)) in &self.versions {
            m.entry(*k).or_default().push(*vid);
        }
        m
    }

    /// Distinct records of a partition as a dense bitset (rids are allocated
    /// sequentially, so the universe is `next_rid`).
    pub fn partition_rid_set(&self, partition_id: u64) -> RidSet {
        let mut s = RidSet::with_universe(self.next_rid);
        for (k, rlist) in self.versions.values() {
            if *k == partition_id {
                for r in rlist {
                    s.insert(*r);
                }
            }
        }
        s
    }

    /// Distinct records of a partition, derived from its versions' rlists.
    pub fn partition_rids(&self, partition_id: u64) -> BTreeSet<RecordId> {
        let mut s = BTreeSet::new();
        for (k, rlist) in self.versions.values() {
            if *k == partition_id {
                s.extend(rlist.iter().copied());
            }
        }
        s
    }

    /// Builds the version graph of the whole CVD.
    pub fn version_graph(&self) -> Result<VersionGraph> {
        let metas: Vec<VersionMeta> = self.metas.values().cloned().collect();
        let rlists: BTreeMap<VersionId, Vec<RecordId>> = self
            .versions
            .iter()
            .map(|(v, (_, r))| (*v, r.clone()))
            .collect();
        VersionGraph::build(&metas, &rlists)
    }
}

/// Handle to one CVD directory. Writer handles hold the advisory lock for
/// their lifetime; reader handles never take it.
pub struct Cvd {
    dir: PathBuf,
    name: String,
    manifest: Manifest,
    pub state: CvdState,
    lock: Option<File>,
    pub crash: CrashHook,
    /// Running count of logical record modifications written by migrations.
    pub migration_writes: u64,
    /// Lazily built distinct-rid sets per partition, kept current across
    /// commits and dropped wholesale on migration.
    part_rids: HashMap<u64, RidSet>,
}

const TAG_INT: u8 = 1;
const TAG_DEC: u8 = 2;
const TAG_TEXT: u8 = 3;

fn encode_record(rec: &Record, pool_size: u32, out: &mut Vec<u8>) {
    let mut payload = Vec::with_capacity(32);
    payload.extend_from_slice(&rec.rid.0.to_le_bytes());
    payload.extend_from_slice(&pool_size.to_le_bytes());
    let nbytes = pool_size.div_ceil(8) as usize;
    let mut bitmap = vec![0u8; nbytes];
    let mut vals: Vec<(u32, &Value)> = rec
        .values
        .iter()
        .filter(|(_, v)| !v.is_null())
        .map(|(a, v)| (*a, v))
        .collect();
    vals.sort_unstable_by_key(|(a, _)| *a);
    for (a, _) in &vals {
        let bit = (*a - 1) as usize;
        bitmap[bit / 8] |= 1 << (bit % 8);
    }
    payload.extend_from_slice(&bitmap);
    for (_, v) in vals {
        match v {
            Value::Int(i) => {
                payload.push(TAG_INT);
                payload.extend_from_slice(&i.to_le_bytes());
            }
            Value::Dec(d) => {
                payload.push(TAG_DEC);
                payload.extend_from_slice(&d.to_le_bytes());
            }
            Value::Text(s) => {
                payload.push(TAG_TEXT);
                payload.extend_from_slice(&(s.len() as u32).to_le_bytes());
                payload.extend_from_slice(s.as_bytes());
            }
            Value::Null => unreachable!(),
        }
    }
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
}

fn corrupt(msg: &str) -> Error {
    Error::Corruption(msg.to_string())
}

fn decode_record(buf: &[u8], pos: &mut usize) -> Result<Record> {
    let need = |ok: bool| if ok { Ok(()) } else { Err(corrupt("truncated segment row")) };
    need(*pos + 4 <= buf.len())?;
    let len = u32::from_le_bytes(buf[*pos..*pos + 4].try_into().unwrap()) as usize;
    *pos += 4;
    need(*pos + len <= buf.len())?;
    let row = &buf[*pos..*pos + len];
    *pos += len;

    let mut p = 0usize;
    let take = |p: &mut usize, n: usize| -> Result<&[u8]> {
        if *p + n > row.len() {
            return Err(corrupt("truncated segment row"));
        }
        let s = &row[*p..*p + n];
        *p += n;
        Ok(s)
    };
    let rid = u64::from_le_bytes(take(&mut p, 8)?.try_into().unwrap());
    let pool = u32::from_le_bytes(take(&mut p, 4)?.try_into().unwrap());
    let nbytes = pool.div_ceil(8) as usize;
    let bitmap = take(&mut p, nbytes)?.to_vec();
    let mut values = Vec::new();
    for bit in 0..pool as usize {
        if bitmap[bit / 8] & (1 << (bit % 8)) == 0 {
            continue;
        }
        let tag = take(&mut p, 1)?[0];
        let v = match tag {
            TAG_INT => Value::Int(i64::from_le_bytes(take(&mut p, 8)?.try_into().unwrap())),
            TAG_DEC => Value::Dec(f64::from_le_bytes(take(&mut p, 8)?.try_into().unwrap())),
            TAG_TEXT => {
                let n = u32::from_le_bytes(take(&mut p, 4)?.try_into().unwrap()) as usize;
                let bytes = take(&mut p, n)?;
                Value::Text(
                    String::from_utf8(bytes.to_vec()).map_err(|_| corrupt("bad utf-8"))?,
                )
            }
            _ => return Err(corrupt("unknown value tag")),
        };
        values.push((bit as u32 + 1, v));
    }
    Ok(Record {
        rid: RecordId(rid),
        values,
    })
}

/// Appends `bytes` to `path`, truncating any stale tail past `logical_len`
/// first. Returns the new logical length.
fn append_at(path: &Path, logical_len: u64, bytes: &[u8]) -> Result<u64> {
    let mut f = OpenOptions::new().create(true).write(true).open(path)?;
    f.set_len(logical_len)?;
    f.seek(SeekFrom::Start(logical_len))?;
    f.write_all(bytes)?;
    Ok(logical_len + bytes.len() as u64)
}

fn read_first_bytes(path: &Path, len: u64) -> Result<Vec<u8>> {
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; len as usize];
    f.read_exact(&mut buf)
        .map_err(|_| corrupt("file shorter than manifest records"))?;
    Ok(buf)
}

fn read_lines(path: &Path, count: u64) -> Result<Vec<String>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let content = fs::read_to_string(path)?;
    let lines: Vec<String> = content.lines().take(count as usize).map(String::from).collect();
    if lines.len() < count as usize {
        return Err(corrupt("file has fewer lines than manifest records"));
    }
    Ok(lines)
}

fn segment_header(attr_ids: &[u32]) -> String {
    let ids: Vec<String> = attr_ids.iter().map(|a| a.to_string()).collect();
    format!("cvdseg 1 {}\n", ids.join(" "))
}

fn manifest_path(dir: &Path, generation: u64) -> PathBuf {
    dir.join(format!("MANIFEST.{generation}"))
}

fn find_latest_manifest(dir: &Path) -> Result<Option<u64>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix("MANIFEST.") {
            if let Ok(g) = n.parse::<u64>() {
                best = Some(best.map_or(g, |b: u64| b.max(g)));
            }
        }
    }
    Ok(best)
}

/// Everything written by one commit, assembled by the engine.
#[derive(Debug, Clone)]
pub struct CommitPayload {
    pub vid: VersionId,
    pub partition_id: u64,
    pub rlist: Vec<RecordId>,
    pub new_records: Vec<Record>,
    pub meta: VersionMeta,
    pub new_attributes: Vec<Attribute>,
}

/// One target partition of a migration.
#[derive(Debug, Clone)]
pub struct SegmentRewrite {
    /// Old partition to seed from, or `None` to build from scratch.
    pub source: Option<u64>,
    pub deletes: BTreeSet<RecordId>,
    /// Records to add, fetched from the named old partitions.
    pub insert_rids: BTreeSet<RecordId>,
    pub versions: Vec<VersionId>,
}

impl Cvd {
    /// Creates a new CVD whose root version `v1` holds `records`.
    pub fn init(
        dir: &Path,
        name: &str,
        attributes: Vec<Attribute>,
        pk: Vec<String>,
        records: Vec<Record>,
    ) -> Result<Cvd> {
        if dir.exists() && find_latest_manifest(dir)?.is_some() {
            return Err(Error::StagingConflict(format!(
                "cvd '{name}' already exists"
            )));
        }
        fs::create_dir_all(dir.join("staging"))?;
        for a in &attributes {
            if !pk.is_empty() && !pk.iter().all(|p| attributes.iter().any(|x| &x.name == p)) {
                return Err(Error::Schema("pk attribute missing from schema".into()));
            }
            if attributes.iter().filter(|x| x.name == a.name).count() > 1 {
                return Err(Error::Schema(format!("duplicate attribute '{}'", a.name)));
            }
        }

        let pool_size = attributes.len() as u32;
        let mut seg = segment_header(&attributes.iter().map(|a| a.attr_id).collect::<Vec<_>>())
            .into_bytes();
        let mut rlist = Vec::with_capacity(records.len());
        let mut max_rid = 0u64;
        for r in &records {
            encode_record(r, pool_size, &mut seg);
            rlist.push(r.rid);
            max_rid = max_rid.max(r.rid.0);
        }
        let seg_len = append_at(&dir.join("part_1.seg"), 0, &seg)?;

        let mut meta = VersionMeta::new(VersionId(1));
        meta.commit_time = now();
        meta.create_time = meta.commit_time;
        meta.message = "initial version".into();
        meta.attributes = attributes.iter().map(|a| a.attr_id).collect();

        let mut attr_buf = String::new();
        for a in &attributes {
            attr_buf.push_str(&serde_json::to_string(a).unwrap());
            attr_buf.push('\n');
        }
        let attr_bytes = append_at(&dir.join("attributes.json"), 0, attr_buf.as_bytes())?;
        let meta_line = format!("{}\n", serde_json::to_string(&meta).unwrap());
        let meta_bytes = append_at(&dir.join("metadata.json"), 0, meta_line.as_bytes())?;
        let ver_line = format!("v1\t1\t{}\n", join_rids(&rlist));
        let version_bytes = append_at(&dir.join("versions.tsv"), 0, ver_line.as_bytes())?;

        let manifest = Manifest {
            generation: 1,
            attr_lines: attributes.len() as u64,
            meta_lines: 1,
            version_lines: 1,
            attr_bytes,
            meta_bytes,
            version_bytes,
            next_rid: max_rid + 1,
            next_vid: 2,
            next_partition: 2,
            pk,
            partitions: BTreeMap::from([(
                1,
                SegmentInfo {
                    file: "part_1.seg".into(),
                    records: records.len() as u64,
                    bytes: seg_len,
                },
            )]),
        };
        write_manifest(dir, &manifest)?;
        Cvd::open_writer(dir, name)
    }

    pub fn open_reader(dir: &Path, name: &str) -> Result<Cvd> {
        Cvd::open_impl(dir, name, false)
    }

    pub fn open_writer(dir: &Path, name: &str) -> Result<Cvd> {
        Cvd::open_impl(dir, name, true)
    }

    fn open_impl(dir: &Path, name: &str, write: bool) -> Result<Cvd> {
        let generation =
            find_latest_manifest(dir)?.ok_or_else(|| Error::NotFound(format!("cvd '{name}'")))?;
        let lock = if write {
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .open(dir.join("lock"))?;
            let rc = unsafe { libc::flock(f.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
            if rc != 0 {
                return Err(Error::Locked);
            }
            Some(f)
        } else {
            None
        };
        let raw = fs::read_to_string(manifest_path(dir, generation))?;
        let manifest: Manifest =
            serde_json::from_str(&raw).map_err(|e| corrupt(&format!("bad manifest: {e}")))?;
        let state = load_state(dir, &manifest)?;
        Ok(Cvd {
            dir: dir.to_path_buf(),
            name: name.to_string(),
            manifest,
            state,
            lock,
            crash: CrashHook::default(),
            migration_writes: 0,
            part_rids: HashMap::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn is_writer(&self) -> bool {
        self.lock.is_some()
    }

    fn require_writer(&self) -> Result<()> {
        if self.lock.is_some() {
            Ok(())
        } else {
            Err(Error::Locked)
        }
    }

    pub fn alloc_rids(&mut self, n: u64) -> Vec<RecordId> {
        let start = self.state.next_rid;
        self.state.next_rid += n;
        (start..start + n).map(RecordId).collect()
    }

    pub fn next_vid(&self) -> VersionId {
        VersionId(self.state.next_vid)
    }

    /// Reads one whole partition segment; the read cost is its record count.
    pub fn load_partition(&self, partition_id: u64) -> Result<DataSegment> {
        let info = self
            .manifest
            .partitions
            .get(&partition_id)
            .ok_or_else(|| Error::NotFound(format!("partition {partition_id}")))?;
        let buf = read_first_bytes(&self.dir.join(&info.file), info.bytes)?;
        let header_end = buf
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("segment missing header"))?
            + 1;
        let mut pos = header_end;
        let mut records = Vec::with_capacity(info.records as usize);
        while pos < buf.len() {
            records.push(decode_record(&buf, &mut pos)?);
        }
        if records.len() as u64 != info.records {
            return Err(corrupt("segment record count mismatch"));
        }
        Ok(DataSegment {
            partition_id,
            read_cost: records.len() as u64,
            records,
        })
    }

    pub fn partition_ids(&self) -> Vec<u64> {
        self.manifest.partitions.keys().copied().collect()
    }

    pub fn partition_record_count(&self, partition_id: u64) -> Option<u64> {
        self.manifest.partitions.get(&partition_id).map(|i| i.records)
    }

    /// Total records across segments (the storage cost of the current scheme).
    pub fn total_stored_records(&self) -> u64 {
        self.manifest.partitions.values().map(|i| i.records).sum()
    }

    /// Atomically persists one commit. Either every part (segment rows,
    /// versioning row, metadata row, attribute rows) becomes visible, or —
    /// on a crash at any injection point — none of it survives reopen.
    pub fn append_commit(&mut self, p: CommitPayload) -> Result<()> {
        self.require_writer()?;
        if p.vid.0 != self.state.next_vid {
            return Err(Error::Internal(format!(
                "commit vid {} out of order (expected v{})",
                p.vid, self.state.next_vid
            )));
        }
        let is_new_partition = !self.manifest.partitions.contains_key(&p.partition_id);
        if is_new_partition && p.partition_id != self.manifest.next_partition {
            return Err(Error::Internal("partition id out of order".into()));
        }
        // new rids must be fresh and unique
        let mut seen = BTreeSet::new();
        if is_new_partition {
            self.part_rids.insert(p.partition_id, RidSet::with_universe(0));
        }
        let existing = self.partition_rid_set(p.partition_id);
        for r in &p.new_records {
            if !seen.insert(r.rid) || existing.contains(r.rid) {
                return Err(corrupt(&format!("rid {} already present", r.rid.0)));
            }
        }

        let mut next = self.manifest.clone();
        next.generation += 1;

        // 1. attribute pool
        if !p.new_attributes.is_empty() {
            let mut buf = String::new();
            for a in &p.new_attributes {
                buf.push_str(&serde_json::to_string(a).unwrap());
                buf.push('\n');
            }
            self.crash.point()?;
            let path = self.dir.join("attributes.json");
            next.attr_bytes = append_at(&path, self.manifest.attr_bytes, buf.as_bytes())?;
            next.attr_lines += p.new_attributes.len() as u64;
        }

        // 2. segment rows
        let pool_size = (self.state.attributes.len() + p.new_attributes.len()) as u32;
        let info = next.partitions.entry(p.partition_id).or_insert_with(|| SegmentInfo {
            file: format!("part_{}.seg", p.partition_id),
            records: 0,
            bytes: 0,
        });
        let mut seg = Vec::new();
        if is_new_partition {
            let ids: Vec<u32> = self
                .state
                .attributes
                .iter()
                .map(|a| a.attr_id)
                .chain(p.new_attributes.iter().map(|a| a.attr_id))
                .collect();
            seg.extend_from_slice(segment_header(&ids).as_bytes());
        }
        for r in &p.new_records {
            encode_record(r, pool_size, &mut seg);
        }
        if !seg.is_empty() {
            self.crash.point()?;
            info.bytes = append_at(&self.dir.join(&info.file), info.bytes, &seg)?;
        }
        info.records += p.new_records.len() as u64;
        if is_new_partition {
            next.next_partition = p.partition_id + 1;
        }

        // 3. versioning row
        let ver_line = format!("{}\t{}\t{}\n", p.vid, p.partition_id, join_rids(&p.rlist));
        self.crash.point()?;
        next.version_bytes = append_at(
            &self.dir.join("versions.tsv"),
            self.manifest.version_bytes,
            ver_line.as_bytes(),
        )?;
        next.version_lines += 1;

        // 4. metadata row
        let meta_line = format!("{}\n", serde_json::to_string(&p.meta).unwrap());
        self.crash.point()?;
        next.meta_bytes = append_at(
            &self.dir.join("metadata.json"),
            self.manifest.meta_bytes,
            meta_line.as_bytes(),
        )?;
        next.meta_lines += 1;

        // 5. manifest flip
        next.next_rid = self.state.next_rid.max(
            p.new_records.iter().map(|r| r.rid.0 + 1).max().unwrap_or(0),
        );
        next.next_vid = p.vid.0 + 1;
        self.crash.point()?;
        write_manifest(&self.dir, &next)?;
        self.finish_generation(next, |state| {
            state.attributes.extend(p.new_attributes.iter().cloned());
            state.versions.insert(p.vid, (p.partition_id, p.rlist.clone()));
            let mut meta = p.meta.clone();
            meta.children = BTreeSet::new();
            for parent in &meta.parents {
                if let Some(pm) = state.metas.get_mut(parent) {
                    pm.children.insert(p.vid);
                }
            }
            state.metas.insert(p.vid, meta);
            state.next_rid = state.next_rid.max(next_rid_after(&p));
            state.next_vid = p.vid.0 + 1;
            state.next_partition = state.next_partition.max(p.partition_id + 1);
        });
        if let Some(set) = self.part_rids.get_mut(&p.partition_id) {
            for r in &p.rlist {
                set.insert(*r);
            }
        }
        Ok(())
    }

    /// Distinct records of a partition as a bitset, served from the
    /// incrementally maintained cache.
    pub fn partition_rid_set(&mut self, partition_id: u64) -> &RidSet {
        if !self.part_rids.contains_key(&partition_id) {
            let set = self.state.partition_rid_set(partition_id);
            self.part_rids.insert(partition_id, set);
        }
        &self.part_rids[&partition_id]
    }

    /// Durably bumps checkout frequencies by appending refreshed metadata
    /// rows (last row per vid wins).
    pub fn bump_frequencies(&mut self, vids: &[VersionId]) -> Result<()> {
        self.require_writer()?;
        let mut buf = String::new();
        let mut bumped = Vec::new();
        for vid in vids {
            let meta = self
                .state
                .metas
                .get(vid)
                .ok_or(Error::MissingVersion(vid.0))?;
            let mut m = meta.clone();
            m.checkout_frequency += 1;
            buf.push_str(&serde_json::to_string(&m).unwrap());
            buf.push('\n');
            bumped.push(m);
        }
        let mut next = self.manifest.clone();
        next.generation += 1;
        next.meta_lines += bumped.len() as u64;
        self.crash.point()?;
        next.meta_bytes = append_at(
            &self.dir.join("metadata.json"),
            self.manifest.meta_bytes,
            buf.as_bytes(),
        )?;
        self.crash.point()?;
        write_manifest(&self.dir, &next)?;
        self.finish_generation(next, |state| {
            for m in bumped {
                let children = state.metas.get(&m.vid).map(|x| x.children.clone());
                let mut m = m;
                if let Some(c) = children {
                    m.children = c;
                }
                state.metas.insert(m.vid, m);
            }
        });
        Ok(())
    }

    /// Rewrites the partition layout to a new scheme. Target partitions take
    /// fresh ids with fresh segment files; a rewrite with no inserts, no
    /// deletes and a source partition reuses the source untouched (zero
    /// writes). Crash at any point leaves either the old or the new layout.
    ///
    /// Returns the number of record modifications written (inserts + deletes
    /// applied; full record count for from-scratch targets).
    pub fn rewrite_partitions(&mut self, rewrites: &[SegmentRewrite]) -> Result<u64> {
        self.require_writer()?;
        // validate coverage and source uniqueness
        let mut assigned: BTreeMap<VersionId, usize> = BTreeMap::new();
        for (i, rw) in rewrites.iter().enumerate() {
            for v in &rw.versions {
                if assigned.insert(*v, i).is_some() {
                    return Err(Error::Consistency(format!("{v} assigned twice")));
                }
            }
        }
        if assigned.len() != self.state.versions.len()
            || !assigned.keys().all(|v| self.state.versions.contains_key(v))
        {
            return Err(Error::Consistency(
                "rewrite does not cover exactly the committed versions".into(),
            ));
        }
        let mut used_sources = BTreeSet::new();
        for rw in rewrites {
            if let Some(s) = rw.source {
                if !used_sources.insert(s) {
                    return Err(Error::Consistency(format!("partition {s} used as source twice")));
                }
            }
        }

        let mut next = self.manifest.clone();
        next.generation += 1;
        let old_partitions = std::mem::take(&mut next.partitions);
        let mut writes = 0u64;
        let mut new_files: Vec<PathBuf> = Vec::new();
        let mut version_rows = String::new();
        let mut new_assign: BTreeMap<VersionId, u64> = BTreeMap::new();

        let result = (|| -> Result<()> {
            for rw in rewrites {
                let identity = rw.source.is_some() && rw.deletes.is_empty() && rw.insert_rids.is_empty();
                let pid = if identity {
                    rw.source.unwrap()
                } else {
                    let p = next.next_partition;
                    next.next_partition += 1;
                    p
                };
                if identity {
                    let src = rw.source.unwrap();
                    let info = old_partitions
                        .get(&src)
                        .ok_or_else(|| Error::NotFound(format!("partition {src}")))?
                        .clone();
                    // versions may still have moved into this partition
                    next.partitions.insert(pid, info);
                } else {
                    let mut rows: Vec<Record> = Vec::new();
                    if let Some(src) = rw.source {
                        let seg = self.load_partition(src)?;
                        rows.extend(
                            seg.records
                                .into_iter()
                                .filter(|r| !rw.deletes.contains(&r.rid)),
                        );
                        writes += rw.deletes.len() as u64;
                    }
                    if !rw.insert_rids.is_empty() {
                        let fetched = self.fetch_records(&rw.insert_rids)?;
                        writes += fetched.len() as u64;
                        rows.extend(fetched);
                    }
                    let pool = self.state.attributes.len() as u32;
                    let ids: Vec<u32> = self.state.attributes.iter().map(|a| a.attr_id).collect();
                    let mut buf = segment_header(&ids).into_bytes();
                    for r in &rows {
                        encode_record(r, pool, &mut buf);
                    }
                    let file = format!("part_{pid}.seg");
                    let path = self.dir.join(&file);
                    self.crash.point()?;
                    let bytes = append_at(&path, 0, &buf)?;
                    new_files.push(path);
                    next.partitions.insert(
                        pid,
                        SegmentInfo {
                            file,
                            records: rows.len() as u64,
                            bytes,
                        },
                    );
                }
                for v in &rw.versions {
                    let (old_pid, rlist) = &self.state.versions[v];
                    if *old_pid != pid {
                        version_rows.push_str(&format!("{v}\t{pid}\t{}\n", join_rids(rlist)));
                    }
                    new_assign.insert(*v, pid);
                }
            }
            if !version_rows.is_empty() {
                self.crash.point()?;
                next.version_bytes = append_at(
                    &self.dir.join("versions.tsv"),
                    self.manifest.version_bytes,
                    version_rows.as_bytes(),
                )?;
                next.version_lines += version_rows.lines().count() as u64;
            }
            self.crash.point()?;
            write_manifest(&self.dir, &next)?;
            Ok(())
        })();

        if let Err(e) = result {
            // crash or failure before the manifest flip: new segment files are
            // unreferenced and harmless; drop them on a clean failure path
            if !matches!(e, Error::InjectedCrash) {
                for f in &new_files {
                    let _ = fs::remove_file(f);
                }
            }
            return Err(e);
        }

        // garbage-collect segments no longer referenced
        let live: BTreeSet<&String> = next.partitions.values().map(|i| &i.file).collect();
        for info in old_partitions.values() {
            if !live.contains(&info.file) {
                let _ = fs::remove_file(self.dir.join(&info.file));
            }
        }
        let _ = fs::remove_file(manifest_path(&self.dir, self.manifest.generation));
        self.manifest = next;
        for (v, pid) in new_assign {
            self.state.versions.get_mut(&v).unwrap().0 = pid;
        }
        self.state.next_partition = self.manifest.next_partition;
        self.part_rids.clear();
        self.migration_writes += writes;
        Ok(writes)
    }

    /// Fetches specific records by rid from whatever partitions hold them.
    pub fn fetch_records(&self, rids: &BTreeSet<RecordId>) -> Result<Vec<Record>> {
        if rids.is_empty() {
            return Ok(Vec::new());
        }
        let mut remaining: BTreeSet<RecordId> = rids.clone();
        let mut out: BTreeMap<RecordId, Record> = BTreeMap::new();
        for pid in self.partition_ids() {
            if remaining.is_empty() {
                break;
            }
            let members = self.state.partition_rids(pid);
            if members.intersection(&remaining).next().is_none() {
                continue;
            }
            let seg = self.load_partition(pid)?;
            for r in seg.records {
                if remaining.remove(&r.rid) {
                    out.insert(r.rid, r);
                }
            }
        }
        if !remaining.is_empty() {
            return Err(corrupt(&format!(
                "{} rids unresolved in any segment",
                remaining.len()
            )));
        }
        Ok(out.into_values().collect())
    }

    fn finish_generation<F: FnOnce(&mut CvdState)>(&mut self, next: Manifest, apply: F) {
        let _ = fs::remove_file(manifest_path(&self.dir, self.manifest.generation));
        self.manifest = next;
        apply(&mut self.state);
    }

    // ---- staging area ----

    fn staging_path(&self, name: &str) -> PathBuf {
        self.dir.join("staging").join(format!("{name}.json"))
    }

    pub fn put_staging(&self, entry: &StagingEntry) -> Result<()> {
        let path = self.staging_path(&entry.name);
        if path.exists() {
            return Err(Error::StagingConflict(entry.name.clone()));
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(entry).unwrap())?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn get_staging(&self, name: &str) -> Result<StagingEntry> {
        let raw = fs::read_to_string(self.staging_path(name))
            .map_err(|_| Error::NotFound(format!("staged table '{name}'")))?;
        serde_json::from_str(&raw).map_err(|e| corrupt(&format!("bad staging entry: {e}")))
    }

    pub fn remove_staging(&self, name: &str) -> Result<()> {
        fs::remove_file(self.staging_path(name))
            .map_err(|_| Error::NotFound(format!("staged table '{name}'")))
    }

    pub fn list_staging(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in fs::read_dir(self.dir.join("staging"))? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(base) = name.strip_suffix(".json") {
                names.push(base.to_string());
            }
        }
        names.sort();
        Ok(names)
    }

    /// Referential integrity: every rid in every rlist resolves in its
    /// partition's segment, and segment totals match the scheme's storage.
    pub fn check_integrity(&self) -> Result<()> {
        for (pid, info) in &self.manifest.partitions {
            let seg = self.load_partition(*pid)?;
            let have: BTreeSet<RecordId> = seg.records.iter().map(|r| r.rid).collect();
            if have.len() != seg.records.len() {
                return Err(corrupt(&format!("duplicate rid in partition {pid}")));
            }
            if have.len() as u64 != info.records {
                return Err(corrupt(&format!("partition {pid} record count mismatch")));
            }
            let need = self.state.partition_rids(*pid);
            if !need.is_subset(&have) {
                return Err(corrupt(&format!(
                    "partition {pid} missing records referenced by rlists"
                )));
            }
            if have != need {
                return Err(corrupt(&format!(
                    "partition {pid} holds records referenced by no version"
                )));
            }
        }
        Ok(())
    }
}

fn next_rid_after(p: &CommitPayload) -> u64 {
    p.new_records.iter().map(|r| r.rid.0 + 1).max().unwrap_or(0)
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn join_rids(rlist: &[RecordId]) -> String {
    rlist
        .iter()
        .map(|r| r.0.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let tmp = dir.join("MANIFEST.tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(&serde_json::to_vec_pretty(m).unwrap())?;
    f.sync_all()?;
    fs::rename(&tmp, manifest_path(dir, m.generation))?;
    Ok(())
}

fn load_state(dir: &Path, m: &Manifest) -> Result<CvdState> {
    let mut attributes = Vec::new();
    for line in read_lines(&dir.join("attributes.json"), m.attr_lines)? {
        attributes
            .push(serde_json::from_str(&line).map_err(|e| corrupt(&format!("bad attribute: {e}")))?);
    }
    let mut metas: BTreeMap<VersionId, VersionMeta> = BTreeMap::new();
    for line in read_lines(&dir.join("metadata.json"), m.meta_lines)? {
        let meta: VersionMeta =
            serde_json::from_str(&line).map_err(|e| corrupt(&format!("bad metadata: {e}")))?;
        metas.insert(meta.vid, meta);
    }
    let mut versions: BTreeMap<VersionId, (u64, Vec<RecordId>)> = BTreeMap::new();
    for line in read_lines(&dir.join("versions.tsv"), m.version_lines)? {
        let mut cols = line.splitn(3, '\t');
        let (Some(vs), Some(ps), rest) = (cols.next(), cols.next(), cols.next()) else {
            return Err(corrupt("short versioning row"));
        };
        let vid = VersionId::parse(vs).map_err(|_| corrupt("bad vid in versioning row"))?;
        let pid: u64 = ps.parse().map_err(|_| corrupt("bad partition id"))?;
        let rlist = rest
            .unwrap_or("")
            .split_whitespace()
            .map(|t| t.parse::<u64>().map(RecordId).map_err(|_| corrupt("bad rid")))
            .collect::<Result<Vec<_>>>()?;
        versions.insert(vid, (pid, rlist));
    }
    // drop metadata rows for versions not visible in the versioning table
    metas.retain(|vid, _| versions.contains_key(vid));
    if !versions.keys().all(|v| metas.contains_key(v)) {
        return Err(corrupt("versioning row without metadata"));
    }
    // children are derived, not trusted from disk
    let mut children: BTreeMap<VersionId, BTreeSet<VersionId>> = BTreeMap::new();
    for m in metas.values() {
        for p in &m.parents {
            children.entry(*p).or_default().insert(m.vid);
        }
    }
    for m in metas.values_mut() {
        m.children = children.remove(&m.vid).unwrap_or_default();
    }
    Ok(CvdState {
        attributes,
        pk: m.pk.clone(),
        metas,
        versions,
        next_rid: m.next_rid,
        next_vid: m.next_vid,
        next_partition: m.next_partition,
    })
}

/// Multi-CVD root directory (selected by `CVDSTORE_ROOT` in the CLI).
pub struct StoreRoot {
    pub root: PathBuf,
}

impl StoreRoot {
    pub fn new(root: impl Into<PathBuf>) -> StoreRoot {
        StoreRoot { root: root.into() }
    }

    pub fn cvd_dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn list_cvds(&self) -> Result<Vec<String>> {
        if !self.root.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().is_dir() && find_latest_manifest(&entry.path())?.is_some() {
                out.push(entry.file_name().to_string_lossy().to_string());
            }
        }
        out.sort();
        Ok(out)
    }

    /// Removes the CVD and everything staged under it. Returns the names of
    /// staging entries that were still live.
    pub fn drop_cvd(&self, name: &str) -> Result<Vec<String>> {
        let dir = self.cvd_dir(name);
        if find_latest_manifest(&dir)?.is_none() {
            return Err(Error::NotFound(format!("cvd '{name}'")));
        }
        let staged = Cvd::open_reader(&dir, name)?.list_staging()?;
        fs::remove_dir_all(&dir)?;
        Ok(staged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn attr(id: u32, name: &str) -> Attribute {
        Attribute {
            attr_id: id,
            name: name.into(),
            dtype: crate::value::DataType::Integer,
        }
    }

    fn rec(rid: u64, vals: &[(u32, i64)]) -> Record {
        Record {
            rid: RecordId(rid),
            values: vals.iter().map(|(a, v)| (*a, Value::Int(*v))).collect(),
        }
    }

    fn fresh() -> (TempDir, Cvd) {
        let tmp = TempDir::new().unwrap();
        let dir = tmp.path().join("t");
        let cvd = Cvd::init(
            &dir,
            "t",
            vec![attr(1, "id"), attr(2, "x")],
            vec!["id".into()],
            vec![rec(1, &[(1, 1), (2, 10)]), rec(2, &[(1, 2), (2, 20)]), rec(3, &[(1, 3), (2, 30)])],
        )
        .unwrap();
        (tmp, cvd)
    }

    #[test]
    fn init_creates_root_version() {
        let (_tmp, cvd) = fresh();
        assert_eq!(cvd.state.versions.len(), 1);
        let (pid, rlist) = &cvd.state.versions[&VersionId(1)];
        assert_eq!(*pid, 1);
        assert_eq!(rlist.len(), 3);
        let seg = cvd.load_partition(1).unwrap();
        assert_eq!(seg.read_cost, 3);
        cvd.check_integrity().unwrap();
    }

    #[test]
    fn roundtrip_reopen() {
        let (tmp, mut cvd) = fresh();
        let mut meta = VersionMeta::new(VersionId(2));
        meta.parents.insert(VersionId(1));
        meta.parent_weights.insert(VersionId(1), 3);
        meta.attributes = vec![1, 2];
        cvd.append_commit(CommitPayload {
            vid: VersionId(2),
            partition_id: 1,
            rlist: vec![RecordId(1), RecordId(2), RecordId(3), RecordId(4)],
            new_records: vec![rec(4, &[(1, 4), (2, 40)])],
            meta,
            new_attributes: vec![],
        })
        .unwrap();
        drop(cvd);
        let re = Cvd::open_reader(&tmp.path().join("t"), "t").unwrap();
        assert_eq!(re.state.versions.len(), 2);
        assert_eq!(re.state.versions[&VersionId(2)].1.len(), 4);
        assert_eq!(re.state.metas[&VersionId(1)].children.len(), 1);
        assert_eq!(re.load_partition(1).unwrap().read_cost, 4);
        re.check_integrity().unwrap();
    }

    #[test]
    fn empty_commit_grows_only_versioning() {
        let (_tmp, mut cvd) = fresh();
        let before = cvd.load_partition(1).unwrap().read_cost;
        let mut meta = VersionMeta::new(VersionId(2));
        meta.parents.insert(VersionId(1));
        cvd.append_commit(CommitPayload {
            vid: VersionId(2),
            partition_id: 1,
            rlist: vec![RecordId(1), RecordId(2), RecordId(3)],
            new_records: vec![],
            meta,
            new_attributes: vec![],
        })
        .unwrap();
        assert_eq!(cvd.load_partition(1).unwrap().read_cost, before);
        assert_eq!(cvd.state.versions.len(), 2);
    }

    #[test]
    fn rid_collision_rejected() {
        let (_tmp, mut cvd) = fresh();
        let mut meta = VersionMeta::new(VersionId(2));
        meta.parents.insert(VersionId(1));
        let err = cvd.append_commit(CommitPayload {
            vid: VersionId(2),
            partition_id: 1,
            rlist: vec![RecordId(1)],
            new_records: vec![rec(1, &[(1, 9)])],
            meta,
            new_attributes: vec![],
        });
        assert!(matches!(err, Err(Error::Corruption(_))));
    }

    #[test]
    fn crash_between_segment_and_versioning_write() {
        let (tmp, mut cvd) = fresh();
        let mut meta = VersionMeta::new(VersionId(2));
        meta.parents.insert(VersionId(1));
        let payload = CommitPayload {
            vid: VersionId(2),
            partition_id: 1,
            rlist: vec![RecordId(1), RecordId(2), RecordId(3), RecordId(4)],
            new_records: vec![rec(4, &[(1, 4)])],
            meta,
            new_attributes: vec![],
        };
        // fail at the versioning append (point 1: segment was point 0)
        cvd.crash.fail_at = Some(1);
        assert!(matches!(
            cvd.append_commit(payload),
            Err(Error::InjectedCrash)
        ));
        drop(cvd);
        let re = Cvd::open_reader(&tmp.path().join("t"), "t").unwrap();
        assert_eq!(re.state.versions.len(), 1);
        assert_eq!(re.load_partition(1).unwrap().read_cost, 3);
        re.check_integrity().unwrap();
    }

    #[test]
    fn writer_lock_is_exclusive() {
        let (tmp, cvd) = fresh();
        assert!(matches!(
            Cvd::open_writer(&tmp.path().join("t"), "t"),
            Err(Error::Locked)
        ));
        drop(cvd);
        Cvd::open_writer(&tmp.path().join("t"), "t").unwrap();
    }

    #[test]
    fn staging_roundtrip_and_conflict() {
        let (_tmp, cvd) = fresh();
        let entry = StagingEntry {
            name: "work".into(),
            parent_vids: vec![VersionId(1)],
            created_at: 0,
            attributes: vec![1, 2],
            rows: vec![(Some(RecordId(1)), vec![(1, Value::Int(1))])],
        };
        cvd.put_staging(&entry).unwrap();
        assert!(matches!(
            cvd.put_staging(&entry),
            Err(Error::StagingConflict(_))
        ));
        let got = cvd.get_staging("work").unwrap();
        assert_eq!(got.parent_vids, vec![VersionId(1)]);
        assert_eq!(cvd.list_staging().unwrap(), vec!["work".to_string()]);
        cvd.remove_staging("work").unwrap();
        assert!(cvd.get_staging("work").is_err());
    }

    #[test]
    fn migration_identity_is_free() {
        let (_tmp, mut cvd) = fresh();
        let writes = cvd
            .rewrite_partitions(&[SegmentRewrite {
                source: Some(1),
                deletes: BTreeSet::new(),
                insert_rids: BTreeSet::new(),
                versions: vec![VersionId(1)],
            }])
            .unwrap();
        assert_eq!(writes, 0);
        assert_eq!(cvd.partition_ids(), vec![1]);
        cvd.check_integrity().unwrap();
    }

    #[test]
    fn migration_split_and_reload() {
        let (tmp, mut cvd) = fresh();
        let mut meta = VersionMeta::new(VersionId(2));
        meta.parents.insert(VersionId(1));
        cvd.append_commit(CommitPayload {
            vid: VersionId(2),
            partition_id: 1,
            rlist: vec![RecordId(3), RecordId(4)],
            new_records: vec![rec(4, &[(1, 4)])],
            meta,
            new_attributes: vec![],
        })
        .unwrap();
        // split: v1 keeps partition sourced from 1 minus r4; v2 fresh
        let writes = cvd
            .rewrite_partitions(&[
                SegmentRewrite {
                    source: Some(1),
                    deletes: BTreeSet::from([RecordId(4)]),
                    insert_rids: BTreeSet::new(),
                    versions: vec![VersionId(1)],
                },
                SegmentRewrite {
                    source: None,
                    deletes: BTreeSet::new(),
                    insert_rids: BTreeSet::from([RecordId(3), RecordId(4)]),
                    versions: vec![VersionId(2)],
                },
            ])
            .unwrap();
        assert_eq!(writes, 3); // one delete + two fresh inserts
        cvd.check_integrity().unwrap();
        drop(cvd);
        let re = Cvd::open_reader(&tmp.path().join("t"), "t").unwrap();
        re.check_integrity().unwrap();
        assert_eq!(re.total_stored_records(), 5);
    }

    #[test]
    fn migration_crash_leaves_old_layout() {
        let (tmp, mut cvd) = fresh();
        cvd.crash.fail_at = Some(1); // fail before the manifest flip
        let err = cvd.rewrite_partitions(&[SegmentRewrite {
            source: None,
            deletes: BTreeSet::new(),
            insert_rids: BTreeSet::from([RecordId(1), RecordId(2), RecordId(3)]),
            versions: vec![VersionId(1)],
        }]);
        assert!(matches!(err, Err(Error::InjectedCrash)));
        drop(cvd);
        let re = Cvd::open_reader(&tmp.path().join("t"), "t").unwrap();
        re.check_integrity().unwrap();
        assert_eq!(re.partition_ids(), vec![1]);
    }

    #[test]
    fn root_listing_and_drop() {
        let tmp = TempDir::new().unwrap();
        let root = StoreRoot::new(tmp.path());
        assert!(root.list_cvds().unwrap().is_empty());
        Cvd::init(&root.cvd_dir("a"), "a", vec![attr(1, "id")], vec![], vec![]).unwrap();
        assert_eq!(root.list_cvds().unwrap(), vec!["a".to_string()]);
        root.drop_cvd("a").unwrap();
        assert!(root.list_cvds().unwrap().is_empty());
        assert!(matches!(root.drop_cvd("a"), Err(Error::NotFound(_))));
    }

    #[test]
    fn text_and_decimal_roundtrip() {
        let tmp = TempDir::new().unwrap();
        let dir = tmp.path().join("t");
        let attrs = vec![
            attr(1, "id"),
            Attribute {
                attr_id: 2,
                name: "score".into(),
                dtype: crate::value::DataType::Decimal,
            },
            Attribute {
                attr_id: 3,
                name: "label".into(),
                dtype: crate::value::DataType::Text,
            },
        ];
        let r = Record {
            rid: RecordId(1),
            values: vec![
                (1, Value::Int(7)),
                (2, Value::Dec(2.5)),
                (3, Value::Text("héllo\tworld".into())),
            ],
        };
        let cvd = Cvd::init(&dir, "t", attrs, vec![], vec![r.clone()]).unwrap();
        let seg = cvd.load_partition(1).unwrap();
        assert_eq!(seg.records, vec![r]);
    }
}
