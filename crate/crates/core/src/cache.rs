//! Content-addressed store for materialized intermediates.
//!
//! Layout under the cache root:
//!
//! ```text
//! manifest.json                 index of entries, last signatures, cost history
//! objects/<ab>/<signature>.bin  payloads, fanned out by signature prefix
//! runs.log                      one JSON run report per line
//! .lock                         advisory single-writer lock
//! ```
//!
//! Payloads and the manifest are written to a temporary file, synced and
//! renamed into place. The manifest is only rewritten once the payload it
//! refers to is durable, so a crash at any point leaves at worst an orphan
//! payload or temp file, which the next writable open removes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::CostRecord;
use crate::signature::{NodeSignature, HASH_ALGORITHM};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
pub const OBJECTS_DIR: &str = "objects";
const TMP_SUFFIX: &str = ".tmp";
const LOAD_EMA_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest format version {found} is newer than supported version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("no cache entry for signature {0}")]
    NotFound(NodeSignature),
    #[error(
        "cache entry {signature} is corrupt: manifest says {expected} bytes, payload has {actual}"
    )]
    CorruptEntry {
        signature: NodeSignature,
        expected: u64,
        actual: u64,
    },
    #[error("cache is locked by another writer ({holder})")]
    Locked { holder: String },
    #[error("cache was opened read-only")]
    ReadOnly,
}

type Result<T, E = CacheError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub signature: NodeSignature,
    pub node_name: String,
    /// Relative to the cache root, `/`-separated.
    pub payload_path: String,
    pub output_bytes: u64,
    pub measured_compute_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_load_seconds: Option<f64>,
    /// Milliseconds since the Unix epoch. Informational.
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format_version: u32,
    pub hash_algorithm: String,
    pub entries: BTreeMap<NodeSignature, CacheEntry>,
    /// Signatures of the last fully successful run.
    pub previous_signatures: BTreeMap<String, NodeSignature>,
    pub cost_history: BTreeMap<String, CostRecord>,
}

impl Default for CacheManifest {
    fn default() -> Self {
        CacheManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            hash_algorithm: HASH_ALGORITHM.to_string(),
            entries: BTreeMap::new(),
            previous_signatures: BTreeMap::new(),
            cost_history: BTreeMap::new(),
        }
    }
}

impl CacheManifest {
    pub fn total_bytes(&self) -> u64 {
        self.entries.values().map(|e| e.output_bytes).sum()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CacheError::Malformed(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| CacheError::Malformed("missing format_version".into()))?;
        if found > MANIFEST_FORMAT_VERSION as u64 {
            return Err(CacheError::VersionMismatch {
                found: found.min(u32::MAX as u64) as u32,
                supported: MANIFEST_FORMAT_VERSION,
            });
        }
        let mut manifest: CacheManifest =
            serde_json::from_value(value).map_err(|e| CacheError::Malformed(e.to_string()))?;
        if manifest.hash_algorithm != HASH_ALGORITHM {
            // Signatures from another hash function never match ours.
            manifest.entries.clear();
            manifest.previous_signatures.clear();
            manifest.hash_algorithm = HASH_ALGORITHM.to_string();
        }
        Ok(manifest)
    }
}

/// Read the manifest under `root`; a missing root or manifest is a cold
/// start and yields an empty manifest. Never writes.
pub fn load_manifest(root: &Path) -> Result<CacheManifest> {
    let path = root.join(MANIFEST_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => CacheManifest::from_json(&text),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(CacheManifest::default()),
        Err(e) => Err(io_err(&path)(e)),
    }
}

/// Atomically replace the manifest under `root`.
pub fn save_manifest(root: &Path, manifest: &CacheManifest) -> Result<()> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    write_manifest(root, manifest, &mut |_| Ok(()))
}

/// Write boundaries inside [`CacheStore::put`], in execution order. A fault
/// hook sees each one before it happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WriteStep {
    CreateObjectDir,
    CreateTempPayload,
    WritePayloadChunk,
    SyncPayload,
    RenamePayload,
    SyncObjectDir,
    CreateTempManifest,
    WriteManifest,
    SyncManifest,
    RenameManifest,
    SyncRoot,
}

/// Called before each [`WriteStep`]; returning an error aborts the put at
/// that point without any cleanup, as a crash would.
pub type FaultHook = Box<dyn FnMut(WriteStep) -> io::Result<()> + Send>;

type Hook<'a> = dyn FnMut(WriteStep) -> io::Result<()> + 'a;

fn step(hook: &mut Hook<'_>, s: WriteStep, path: &Path) -> Result<()> {
    hook(s).map_err(io_err(path))
}

fn write_manifest(root: &Path, manifest: &CacheManifest, hook: &mut Hook<'_>) -> Result<()> {
    let final_path = root.join(MANIFEST_FILE);
    let tmp = root.join(format!("{MANIFEST_FILE}{TMP_SUFFIX}"));
    let body = manifest.to_json();
    step(hook, WriteStep::CreateTempManifest, &tmp)?;
    let mut file = File::create(&tmp).map_err(io_err(&tmp))?;
    step(hook, WriteStep::WriteManifest, &tmp)?;
    file.write_all(body.as_bytes()).map_err(io_err(&tmp))?;
    step(hook, WriteStep::SyncManifest, &tmp)?;
    file.sync_all().map_err(io_err(&tmp))?;
    drop(file);
    step(hook, WriteStep::RenameManifest, &final_path)?;
    fs::rename(&tmp, &final_path).map_err(io_err(&final_path))?;
    step(hook, WriteStep::SyncRoot, root)?;
    sync_dir(root)
}

fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir)
        .and_then(|d| d.sync_all())
        .map_err(io_err(dir))
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Outcome of [`CacheStore::gc`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub removed_entries: Vec<NodeSignature>,
    pub removed_files: usize,
    pub freed_bytes: u64,
}

/// Handle on a cache root. Writable handles hold the root's lock until
/// dropped.
pub struct CacheStore {
    root: PathBuf,
    manifest: CacheManifest,
    lock: Option<File>,
    dirty: bool,
    fault_hook: Option<FaultHook>,
}

impl std::fmt::Debug for CacheStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CacheStore")
            .field("root", &self.root)
            .field("entries", &self.manifest.entries.len())
            .field("writable", &self.lock.is_some())
            .finish()
    }
}

impl CacheStore {
    /// Open for writing: creates the root if needed, takes the lock and
    /// removes leftovers of interrupted writes.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let lock = acquire_lock(&root)?;
        let manifest = load_manifest(&root)?;
        let mut store = CacheStore {
            root,
            manifest,
            lock: Some(lock),
            dirty: false,
            fault_hook: None,
        };
        store.remove_leftovers()?;
        Ok(store)
    }

    /// Open without locking and without touching the file system.
    pub fn open_read_only(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = load_manifest(&root)?;
        Ok(CacheStore {
            root,
            manifest,
            lock: None,
            dirty: false,
            fault_hook: None,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_writable(&self) -> bool {
        self.lock.is_some()
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn entry(&self, sig: &NodeSignature) -> Option<&CacheEntry> {
        self.manifest.entries.get(sig)
    }

    pub fn contains(&self, sig: &NodeSignature) -> bool {
        self.manifest.entries.contains_key(sig)
    }

    pub fn total_bytes(&self) -> u64 {
        self.manifest.total_bytes()
    }

    pub fn payload_path(&self, sig: &NodeSignature) -> PathBuf {
        self.root.join(relative_payload_path(sig))
    }

    /// Install a hook that observes (and may fail) every write boundary.
    pub fn set_fault_hook(&mut self, hook: Option<FaultHook>) {
        self.fault_hook = hook;
    }

    fn require_writable(&self) -> Result<()> {
        if self.is_writable() {
            Ok(())
        } else {
            Err(CacheError::ReadOnly)
        }
    }

    /// Store a payload under `signature`. Storing an existing signature
    /// again returns the existing entry.
    pub fn put(
        &mut self,
        signature: &NodeSignature,
        node_name: &str,
        payload: &mut dyn Read,
        compute_seconds: f64,
    ) -> Result<CacheEntry> {
        self.require_writable()?;
        if let Some(existing) = self.manifest.entries.get(signature) {
            return Ok(existing.clone());
        }
        let mut noop = |_: WriteStep| Ok(());
        let mut hook = self.fault_hook.take();
        let result = {
            let h: &mut Hook<'_> = match hook.as_mut() {
                Some(h) => h.as_mut(),
                None => &mut noop,
            };
            self.put_inner(signature, node_name, payload, compute_seconds, h)
        };
        self.fault_hook = hook;
        result
    }

    fn put_inner(
        &mut self,
        signature: &NodeSignature,
        node_name: &str,
        payload: &mut dyn Read,
        compute_seconds: f64,
        hook: &mut Hook<'_>,
    ) -> Result<CacheEntry> {
        let rel = relative_payload_path(signature);
        let final_path = self.root.join(&rel);
        let dir = final_path
            .parent()
            .expect("payload has a parent")
            .to_path_buf();
        step(hook, WriteStep::CreateObjectDir, &dir)?;
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let tmp = tmp_path(&final_path);
        step(hook, WriteStep::CreateTempPayload, &tmp)?;
        let mut file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut buf = vec![0u8; 64 * 1024];
        let mut written: u64 = 0;
        loop {
            let n = payload.read(&mut buf).map_err(io_err(&tmp))?;
            if n == 0 {
                break;
            }
            step(hook, WriteStep::WritePayloadChunk, &tmp)?;
            file.write_all(&buf[..n]).map_err(io_err(&tmp))?;
            written += n as u64;
        }
        step(hook, WriteStep::SyncPayload, &tmp)?;
        file.sync_all().map_err(io_err(&tmp))?;
        drop(file);
        step(hook, WriteStep::RenamePayload, &final_path)?;
        fs::rename(&tmp, &final_path).map_err(io_err(&final_path))?;
        step(hook, WriteStep::SyncObjectDir, &dir)?;
        sync_dir(&dir)?;

        let entry = CacheEntry {
            signature: signature.clone(),
            node_name: node_name.to_string(),
            payload_path: rel,
            output_bytes: written,
            measured_compute_seconds: compute_seconds,
            measured_load_seconds: None,
            created_at: now_millis(),
        };
        let mut next = self.manifest.clone();
        next.entries.insert(signature.clone(), entry.clone());
        write_manifest(&self.root, &next, hook)?;
        self.manifest = next;
        self.dirty = false;
        Ok(entry)
    }

    /// Open a payload after checking its size against the manifest.
    pub fn open_payload(&self, sig: &NodeSignature) -> Result<(File, CacheEntry)> {
        let entry = self
            .manifest
            .entries
            .get(sig)
            .ok_or_else(|| CacheError::NotFound(sig.clone()))?;
        let path = self.root.join(&entry.payload_path);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(CacheError::CorruptEntry {
                    signature: sig.clone(),
                    expected: entry.output_bytes,
                    actual: 0,
                })
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let actual = file.metadata().map_err(io_err(&path))?.len();
        if actual != entry.output_bytes {
            return Err(CacheError::CorruptEntry {
                signature: sig.clone(),
                expected: entry.output_bytes,
                actual,
            });
        }
        Ok((file, entry.clone()))
    }

    /// Read a payload fully, recording the elapsed time as a load
    /// measurement.
    pub fn get(&mut self, sig: &NodeSignature) -> Result<Vec<u8>> {
        let started = Instant::now();
        let (mut file, entry) = self.open_payload(sig)?;
        let mut bytes = Vec::with_capacity(entry.output_bytes as usize);
        let path = self.root.join(&entry.payload_path);
        file.read_to_end(&mut bytes).map_err(io_err(&path))?;
        self.record_load(sig, started.elapsed().as_secs_f64())?;
        Ok(bytes)
    }

    /// Copy a payload to `dest` (atomically), recording the elapsed time.
    pub fn copy_to(&mut self, sig: &NodeSignature, dest: &Path) -> Result<f64> {
        let started = Instant::now();
        let (mut file, _) = self.open_payload(sig)?;
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let tmp = tmp_path(dest);
        let mut out = File::create(&tmp).map_err(io_err(&tmp))?;
        io::copy(&mut file, &mut out).map_err(io_err(&tmp))?;
        drop(out);
        fs::rename(&tmp, dest).map_err(io_err(dest))?;
        let elapsed = started.elapsed().as_secs_f64();
        self.record_load(sig, elapsed)?;
        Ok(elapsed)
    }

    /// Fold an observed load time into the entry's moving average.
    pub fn record_load(&mut self, sig: &NodeSignature, seconds: f64) -> Result<()> {
        self.require_writable()?;
        let entry = self
            .manifest
            .entries
            .get_mut(sig)
            .ok_or_else(|| CacheError::NotFound(sig.clone()))?;
        entry.measured_load_seconds = Some(match entry.measured_load_seconds {
            Some(prev) => LOAD_EMA_ALPHA * seconds + (1.0 - LOAD_EMA_ALPHA) * prev,
            None => seconds,
        });
        self.dirty = true;
        Ok(())
    }

    pub fn record_cost(&mut self, node: &str, cost: CostRecord) -> Result<()> {
        self.require_writable()?;
        self.manifest.cost_history.insert(node.to_string(), cost);
        self.dirty = true;
        Ok(())
    }

    pub fn set_previous_signatures(&mut self, sigs: BTreeMap<String, NodeSignature>) -> Result<()> {
        self.require_writable()?;
        self.manifest.previous_signatures = sigs;
        self.dirty = true;
        Ok(())
    }

    /// Persist pending in-memory updates (load times, history, signatures).
    pub fn flush(&mut self) -> Result<()> {
        self.require_writable()?;
        if self.dirty {
            write_manifest(&self.root, &self.manifest, &mut |_| Ok(()))?;
            self.dirty = false;
        }
        Ok(())
    }

    /// Remove temp files, orphan payloads and entries whose payload is
    /// missing or truncated. With `keep_latest`, also drop entries that the
    /// last successful run did not produce.
    pub fn gc(&mut self, keep_latest: bool) -> Result<GcReport> {
        self.require_writable()?;
        let mut report = GcReport::default();
        let latest: BTreeSet<&NodeSignature> = self.manifest.previous_signatures.values().collect();
        let mut doomed = Vec::new();
        for (sig, entry) in &self.manifest.entries {
            let intact = fs::metadata(self.root.join(&entry.payload_path))
                .map(|m| m.len() == entry.output_bytes)
                .unwrap_or(false);
            if !intact || (keep_latest && !latest.contains(sig)) {
                doomed.push(sig.clone());
            }
        }
        for sig in &doomed {
            self.manifest.entries.remove(sig);
        }
        if !doomed.is_empty() {
            write_manifest(&self.root, &self.manifest, &mut |_| Ok(()))?;
            self.dirty = false;
        }
        report.removed_entries = doomed;
        let (files, bytes) = self.remove_leftovers()?;
        report.removed_files = files;
        report.freed_bytes = bytes;
        Ok(report)
    }

    /// Delete temp files and payloads the manifest does not reference.
    fn remove_leftovers(&mut self) -> Result<(usize, u64)> {
        let mut removed = 0;
        let mut bytes = 0;
        let manifest_tmp = self.root.join(format!("{MANIFEST_FILE}{TMP_SUFFIX}"));
        if manifest_tmp.exists() {
            fs::remove_file(&manifest_tmp).map_err(io_err(&manifest_tmp))?;
            removed += 1;
        }
        let referenced: BTreeSet<PathBuf> = self
            .manifest
            .entries
            .values()
            .map(|e| self.root.join(&e.payload_path))
            .collect();
        let objects = self.root.join(OBJECTS_DIR);
        let Ok(fanout) = fs::read_dir(&objects) else {
            return Ok((removed, bytes));
        };
        for dir in fanout {
            let dir = dir.map_err(io_err(&objects))?.path();
            if !dir.is_dir() {
                continue;
            }
            for file in fs::read_dir(&dir).map_err(io_err(&dir))? {
                let path = file.map_err(io_err(&dir))?.path();
                if !referenced.contains(&path) {
                    bytes += fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
                    fs::remove_file(&path).map_err(io_err(&path))?;
                    removed += 1;
                }
            }
        }
        Ok((removed, bytes))
    }
}

fn relative_payload_path(sig: &NodeSignature) -> String {
    format!("{OBJECTS_DIR}/{}/{}.bin", sig.prefix(), sig.as_str())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().expect("file path").to_os_string();
    name.push(TMP_SUFFIX);
    path.with_file_name(name)
}

fn acquire_lock(root: &Path) -> Result<File> {
    let path = root.join(LOCK_FILE);
    let mut file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(false)
        .open(&path)
        .map_err(io_err(&path))?;
    match file.try_lock() {
        Ok(()) => {}
        Err(TryLockError::WouldBlock) => {
            let holder = fs::read_to_string(&path)
                .map(|s| s.trim().to_string())
                .ok()
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| "unknown holder".to_string());
            return Err(CacheError::Locked { holder });
        }
        Err(TryLockError::Error(e)) => return Err(io_err(&path)(e)),
    }
    file.set_len(0).map_err(io_err(&path))?;
    writeln!(file, "pid {}", std::process::id()).map_err(io_err(&path))?;
    Ok(file)
}
