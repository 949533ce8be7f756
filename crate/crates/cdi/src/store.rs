//! Filesystem store for registered corpora and discovery sessions.
//!
//! ```text
//! <root>/corpora/<corpus_id>/{dataset.jsonl, embeddings.cdie, meta.json}
//! <root>/sessions/<session_id>/{meta.json, events.jsonl, snapshot.json}
//! ```
//!
//! A corpus id is derived from the SHA-256 fingerprint of its two files, so
//! registering the same content twice yields the same id. A session is its
//! event log; `snapshot.json` caches the state after a prefix of the log and
//! is only a shortcut for replay.

use std::path::{Path, PathBuf};

use cdi_core::corpus::Corpus;
use cdi_core::discovery::{apply_event, SessionState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::formats::{cdie, dataset, eventlog};
use crate::formats::eventlog::LoggedEvent;
use crate::{Error, Result};

/// Environment variable naming the default store directory.
pub const STORE_ENV: &str = "CDI_STORE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub corpus_id: String,
    pub fingerprint: String,
    pub size: usize,
    pub dim: usize,
    pub labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub created_at: String,
    pub corpus_id: String,
    pub corpus_fingerprint: String,
    /// Client request that created the session, if one was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    events: usize,
    state: SessionState,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

pub fn fingerprint(dataset: &[u8], embeddings: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update((dataset.len() as u64).to_le_bytes());
    h.update(dataset);
    h.update(embeddings);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::NotFound(format!("malformed id `{id}`")))
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["corpora", "sessions"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Self { root })
    }

    /// `$CDI_STORE`, or `./cdi-store`.
    pub fn default_root() -> PathBuf {
        std::env::var_os(STORE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("cdi-store"))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn corpus_dir(&self, id: &str) -> PathBuf {
        self.root.join("corpora").join(id)
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    /// Validates and stores a corpus given the raw bytes of its two files.
    pub fn register_corpus(&self, dataset_bytes: &[u8], cdie_bytes: &[u8]) -> Result<CorpusInfo> {
        self.register_named(dataset_bytes, cdie_bytes, "dataset", "embeddings")
    }

    fn register_named(&self, dataset_bytes: &[u8], cdie_bytes: &[u8], dataset_name: &str, cdie_name: &str) -> Result<CorpusInfo> {
        let text = std::str::from_utf8(dataset_bytes).map_err(|e| Error::Text {
            source_name: dataset_name.into(),
            line: 1 + dataset_bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
            message: "invalid UTF-8".into(),
        })?;
        let records = dataset::parse_records(text, dataset_name)?;
        let emb = cdie::decode(cdie_bytes, cdie_name)?;
        let corpus = dataset::assemble(records, &emb, cdie_name)?;
        let fp = fingerprint(dataset_bytes, cdie_bytes);
        let info = CorpusInfo {
            corpus_id: format!("c{}", &fp[..16]),
            fingerprint: fp,
            size: corpus.len(),
            dim: corpus.dim(),
            labels: corpus.vocab().len(),
        };
        let dir = self.corpus_dir(&info.corpus_id);
        if !dir.join("meta.json").exists() {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_atomic(&dir.join("dataset.jsonl"), dataset_bytes)?;
            write_atomic(&dir.join("embeddings.cdie"), cdie_bytes)?;
            write_atomic(&dir.join("meta.json"), serde_json::to_string_pretty(&info)?.as_bytes())?;
        }
        Ok(info)
    }

    pub fn register_corpus_files(&self, dataset_path: &Path, cdie_path: &Path) -> Result<CorpusInfo> {
        let d = std::fs::read(dataset_path).map_err(|e| Error::io(dataset_path, e))?;
        let e = std::fs::read(cdie_path).map_err(|e| Error::io(cdie_path, e))?;
        self.register_named(&d, &e, &dataset_path.display().to_string(), &cdie_path.display().to_string())
    }

    pub fn corpus_info(&self, id: &str) -> Result<CorpusInfo> {
        check_id(id)?;
        let meta = self.corpus_dir(id).join("meta.json");
        if !meta.exists() {
            return Err(Error::NotFound(format!("corpus `{id}`")));
        }
        read_json(&meta)
    }

    pub fn load_corpus(&self, id: &str) -> Result<Corpus> {
        self.corpus_info(id)?;
        let dir = self.corpus_dir(id);
        dataset::load_corpus(&dir.join("dataset.jsonl"), &dir.join("embeddings.cdie"))
    }

    /// Creates the session directory and writes the handle.
    pub fn create_session(&self, corpus: &CorpusInfo, request_id: Option<String>) -> Result<SessionHandle> {
        let handle = SessionHandle {
            session_id: format!("s{}", uuid::Uuid::new_v4().simple()),
            created_at: chrono::Utc::now().to_rfc3339(),
            corpus_id: corpus.corpus_id.clone(),
            corpus_fingerprint: corpus.fingerprint.clone(),
            request_id,
        };
        let dir = self.session_dir(&handle.session_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_atomic(&dir.join("meta.json"), serde_json::to_string_pretty(&handle)?.as_bytes())?;
        Ok(handle)
    }

    pub fn session_handle(&self, id: &str) -> Result<SessionHandle> {
        check_id(id)?;
        let meta = self.session_dir(id).join("meta.json");
        if !meta.exists() {
            return Err(Error::NotFound(format!("session `{id}`")));
        }
        read_json(&meta)
    }

    pub fn list_sessions(&self) -> Result<Vec<String>> {
        let dir = self.root.join("sessions");
        let mut ids: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("meta.json").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn append_event(&self, id: &str, event: &LoggedEvent) -> Result<()> {
        check_id(id)?;
        eventlog::append(&self.session_dir(id).join("events.jsonl"), event)
    }

    pub fn events(&self, id: &str) -> Result<Vec<LoggedEvent>> {
        check_id(id)?;
        let path = self.session_dir(id).join("events.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        eventlog::read(&path)
    }

    /// Caches `state` as the result of the first `events` log entries.
    pub fn write_snapshot(&self, id: &str, events: usize, state: &SessionState) -> Result<()> {
        check_id(id)?;
        let snap = serde_json::to_vec(&Snapshot {
            events,
            state: state.clone(),
        })?;
        write_atomic(&self.session_dir(id).join("snapshot.json"), &snap)
    }

    /// Rebuilds a session from its log, starting from the snapshot when it
    /// covers a prefix of the log. Returns the state and the log.
    pub fn restore_session(&self, id: &str, corpus: &Corpus) -> Result<(SessionState, Vec<LoggedEvent>)> {
        let handle = self.session_handle(id)?;
        let info = self.corpus_info(&handle.corpus_id)?;
        if info.fingerprint != handle.corpus_fingerprint {
            return Err(Error::Config(format!("session `{id}` was created on different corpus content")));
        }
        let log = self.events(id)?;
        let snap_path = self.session_dir(id).join("snapshot.json");
        let (mut state, start) = match read_json::<Snapshot>(&snap_path) {
            Ok(s) if s.events >= 1 && s.events <= log.len() => (Some(s.state), s.events),
            _ => (None, 0),
        };
        for e in &log[start..] {
            state = Some(apply_event(state, corpus, &e.event()?)?);
        }
        let state = state.ok_or_else(|| Error::NotFound(format!("session `{id}` has no events")))?;
        Ok((state, log))
    }
}
