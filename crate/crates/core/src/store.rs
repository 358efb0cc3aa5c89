//! Content-addressed artifact directory.
//!
//! ```text
//! states/<id>.json        lineages/<expert_id>.json   skills/<id>.json
//! risk/<expert_id>.jsonl  events/<run_id>.jsonl       sessions/<id>.jsonl
//! cases/<id>.json
//! ```
//!
//! Writers take an advisory lock file; readers never lock.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::gate::CaseSpec;
use crate::library::{InsertOutcome, Library};
use crate::model::{Document, KernelState, Lineage, ModelError, RiskEvidence, SkillCard};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: ModelError },
    #[error("{path}: line {line}: {message}")]
    Jsonl { path: PathBuf, line: usize, message: String },
    #[error("store is locked by another writer ({0})")]
    Locked(PathBuf),
    #[error("not found: {0}")]
    NotFound(PathBuf),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A file that failed to load, reported without aborting the load.
#[derive(Debug)]
pub struct LoadIssue {
    pub path: PathBuf,
    pub error: String,
}

const DIRS: [&str; 7] = ["states", "lineages", "skills", "risk", "events", "sessions", "cases"];

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// Held while writing; removes the lock file on drop.
pub struct WriteLock {
    path: PathBuf,
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for d in DIRS {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(io(&p))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, dir: &str, name: &str, ext: &str) -> PathBuf {
        self.root.join(dir).join(format!("{name}.{ext}"))
    }

    /// Takes the advisory writer lock, waiting up to `wait`.
    pub fn lock(&self, wait: Duration) -> Result<WriteLock, StoreError> {
        let path = self.root.join(".lock");
        let start = Instant::now();
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(WriteLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() >= wait {
                        return Err(StoreError::Locked(path));
                    }
                    thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(io(&path)(e)),
            }
        }
    }

    fn write_atomic(&self, path: &Path, text: &str) -> Result<(), StoreError> {
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, text).map_err(io(&tmp))?;
        fs::rename(&tmp, path).map_err(io(path))
    }

    fn write_doc<D: Document>(&self, path: &Path, doc: &D) -> Result<(), StoreError> {
        doc.check().map_err(|source| StoreError::Invalid {
            path: path.to_path_buf(),
            source,
        })?;
        let mut text = doc.to_json().map_err(|source| StoreError::Invalid {
            path: path.to_path_buf(),
            source,
        })?;
        text.push('\n');
        self.write_atomic(path, &text)
    }

    fn read_doc<D: Document>(&self, path: &Path) -> Result<D, StoreError> {
        if !path.exists() {
            return Err(StoreError::NotFound(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(io(path))?;
        D::from_json(&text).map_err(|source| StoreError::Invalid {
            path: path.to_path_buf(),
            source,
        })
    }

    fn append_jsonl<T: Serialize>(&self, path: &Path, items: &[T]) -> Result<(), StoreError> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io(path))?;
        for it in items {
            let line = serde_json::to_string(it).map_err(|e| StoreError::Jsonl {
                path: path.to_path_buf(),
                line: 0,
                message: e.to_string(),
            })?;
            writeln!(f, "{line}").map_err(io(path))?;
        }
        Ok(())
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, path: &Path) -> Result<Vec<T>, StoreError> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        parse_jsonl(&text).map_err(|(line, message)| StoreError::Jsonl {
            path: path.to_path_buf(),
            line,
            message,
        })
    }

    fn list(&self, dir: &str, ext: &str) -> Result<Vec<PathBuf>, StoreError> {
        let d = self.root.join(dir);
        let mut out: Vec<PathBuf> = fs::read_dir(&d)
            .map_err(io(&d))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == ext))
            .collect();
        out.sort();
        Ok(out)
    }

    pub fn put_state(&self, state: &KernelState) -> Result<(), StoreError> {
        self.write_doc(&self.path("states", &state.id, "json"), state)
    }

    pub fn state(&self, id: &str) -> Result<KernelState, StoreError> {
        self.read_doc(&self.path("states", id, "json"))
    }

    /// Writes the lineage and every state on it.
    pub fn put_lineage(&self, lineage: &Lineage) -> Result<(), StoreError> {
        let _lock = self.lock(Duration::from_secs(10))?;
        for s in &lineage.states {
            self.put_state(s)?;
        }
        self.write_doc(&self.path("lineages", &lineage.expert_id, "json"), lineage)
    }

    pub fn lineage(&self, expert_id: &str) -> Result<Lineage, StoreError> {
        self.read_doc(&self.path("lineages", expert_id, "json"))
    }

    pub fn load_lineages(&self) -> Result<(Vec<Lineage>, Vec<LoadIssue>), StoreError> {
        self.load_all("lineages")
    }

    fn load_all<D: Document>(&self, dir: &str) -> Result<(Vec<D>, Vec<LoadIssue>), StoreError> {
        let mut docs = Vec::new();
        let mut issues = Vec::new();
        for p in self.list(dir, "json")? {
            match self.read_doc::<D>(&p) {
                Ok(d) => docs.push(d),
                Err(e) => issues.push(LoadIssue {
                    path: p,
                    error: e.to_string(),
                }),
            }
        }
        Ok((docs, issues))
    }

    pub fn append_risk(&self, expert_id: &str, risks: &[RiskEvidence]) -> Result<(), StoreError> {
        self.append_jsonl(&self.path("risk", expert_id, "jsonl"), risks)
    }

    pub fn load_risks(&self) -> Result<(Vec<RiskEvidence>, Vec<LoadIssue>), StoreError> {
        let mut all = Vec::new();
        let mut issues = Vec::new();
        for p in self.list("risk", "jsonl")? {
            match self.read_jsonl::<RiskEvidence>(&p) {
                Ok(mut r) => all.append(&mut r),
                Err(e) => issues.push(LoadIssue {
                    path: p,
                    error: e.to_string(),
                }),
            }
        }
        Ok((all, issues))
    }

    pub fn append_events<T: Serialize>(&self, run_id: &str, events: &[T]) -> Result<(), StoreError> {
        self.append_jsonl(&self.path("events", run_id, "jsonl"), events)
    }

    /// Writes a session trajectory, replacing any previous file.
    pub fn put_session<T: Serialize>(&self, session_id: &str, events: &[T]) -> Result<(), StoreError> {
        let mut text = String::new();
        for e in events {
            text.push_str(&serde_json::to_string(e).expect("event serializes"));
            text.push('\n');
        }
        self.write_atomic(&self.path("sessions", session_id, "jsonl"), &text)
    }

    pub fn session_ids(&self) -> Result<Vec<String>, StoreError> {
        Ok(self
            .list("sessions", "jsonl")?
            .iter()
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect())
    }

    pub fn case_ids(&self) -> Result<Vec<String>, StoreError> {
        Ok(self
            .list("cases", "json")?
            .iter()
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect())
    }

    pub fn put_case(&self, case: &CaseSpec) -> Result<(), StoreError> {
        let text = serde_json::to_string_pretty(case).expect("case serializes") + "\n";
        self.write_atomic(&self.path("cases", &case.id, "json"), &text)
    }

    pub fn case(&self, id: &str) -> Result<CaseSpec, StoreError> {
        let path = self.path("cases", id, "json");
        if !path.exists() {
            return Err(StoreError::NotFound(path));
        }
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Invalid {
            path,
            source: e.into(),
        })
    }

    /// Stores a skill, merging into an existing card with the same id.
    pub fn put_skill(&self, card: &SkillCard) -> Result<InsertOutcome, StoreError> {
        let _lock = self.lock(Duration::from_secs(10))?;
        self.put_skill_locked(card)
    }

    fn put_skill_locked(&self, card: &SkillCard) -> Result<InsertOutcome, StoreError> {
        let path = self.path("skills", &card.id, "json");
        let invalid = |source| StoreError::Invalid {
            path: path.clone(),
            source,
        };
        let (merged, outcome) = if path.exists() {
            let mut existing: SkillCard = self.read_doc(&path)?;
            existing.merge_from(card);
            (existing, InsertOutcome::Merged)
        } else {
            card.check().map_err(invalid)?;
            (card.clone(), InsertOutcome::Inserted)
        };
        self.write_doc(&path, &merged)?;
        Ok(outcome)
    }

    /// Overwrites stored cards with the library's current contents.
    pub fn save_library(&self, library: &Library) -> Result<(), StoreError> {
        let _lock = self.lock(Duration::from_secs(10))?;
        for card in library.iter() {
            self.write_doc(&self.path("skills", &card.id, "json"), card)?;
        }
        Ok(())
    }

    /// Loads every skill card; malformed files are reported, not fatal.
    pub fn load_library(&self) -> Result<(Library, Vec<LoadIssue>), StoreError> {
        let (cards, mut issues) = self.load_all::<SkillCard>("skills")?;
        let mut lib = Library::new();
        for c in cards {
            if let Err(e) = lib.insert(c) {
                issues.push(LoadIssue {
                    path: self.root.join("skills"),
                    error: e.to_string(),
                });
            }
        }
        Ok((lib, issues))
    }

    /// Checks every document and the cross references between them.
    pub fn audit(&self) -> Result<Vec<LoadIssue>, StoreError> {
        let (_, mut issues) = self.load_all::<KernelState>("states")?;
        for p in self.list("states", "json")? {
            if let Ok(s) = self.read_doc::<KernelState>(&p) {
                if p.file_stem().is_some_and(|n| n != s.id.as_str()) {
                    issues.push(LoadIssue {
                        path: p,
                        error: format!("file name does not match id {}", s.id),
                    });
                }
            }
        }
        let (lineages, mut more) = self.load_lineages()?;
        issues.append(&mut more);
        let mut transitions = std::collections::BTreeSet::new();
        for l in &lineages {
            for s in &l.states {
                if !self.path("states", &s.id, "json").exists() {
                    issues.push(LoadIssue {
                        path: self.path("lineages", &l.expert_id, "json"),
                        error: format!("state {} is not stored", s.id),
                    });
                }
            }
            transitions.extend(l.transitions.iter().map(|t| t.id.clone()));
        }
        let (lib, mut more) = self.load_library()?;
        issues.append(&mut more);
        for s in lib.iter() {
            for e in &s.evidence {
                if !transitions.contains(&e.transition_id) {
                    issues.push(LoadIssue {
                        path: self.path("skills", &s.id, "json"),
                        error: format!("evidence transition {} not found in any lineage", e.transition_id),
                    });
                }
            }
        }
        let (_, mut more) = self.load_risks()?;
        issues.append(&mut more);
        Ok(issues)
    }
}

/// Parses JSON Lines; blank lines are skipped. Errors carry the 1-based
/// line number.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| (i + 1, e.to_string()))?);
    }
    Ok(out)
}
