//! On-disk layout under a data directory, sequential ids and atomic writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::IoContext;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Kind {
    Session,
    Run,
    Sweep,
    Auto,
    Job,
}

impl Kind {
    pub const ALL: [Kind; 5] = [Kind::Session, Kind::Run, Kind::Sweep, Kind::Auto, Kind::Job];

    pub fn dir(self) -> &'static str {
        match self {
            Kind::Session => "sessions",
            Kind::Run => "runs",
            Kind::Sweep => "sweeps",
            Kind::Auto => "autos",
            Kind::Job => "jobs",
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Kind::Session => "s",
            Kind::Run => "run",
            Kind::Sweep => "sw",
            Kind::Auto => "auto",
            Kind::Job => "job",
        }
    }

    fn parse_id(self, name: &str) -> Option<u32> {
        let stem = name.strip_suffix(".json").unwrap_or(name);
        stem.strip_prefix(self.prefix())?.strip_prefix('-')?.parse().ok()
    }
}

/// Ids are only ever made of these characters, which keeps them safe to
/// splice into paths.
pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    next: Mutex<BTreeMap<Kind, u32>>,
}

impl Store {
    /// Creates the directory skeleton and picks up id counters from
    /// whatever is already there. Leftover staging directories are removed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let mut next = BTreeMap::new();
        for kind in Kind::ALL {
            let dir = root.join(kind.dir());
            fs::create_dir_all(&dir).at(&dir)?;
            let mut max = 0;
            for entry in fs::read_dir(&dir).at(&dir)? {
                let entry = entry.at(&dir)?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if name.ends_with(".partial") {
                    let p = entry.path();
                    if p.is_dir() {
                        fs::remove_dir_all(&p).at(&p)?;
                    } else {
                        fs::remove_file(&p).at(&p)?;
                    }
                    continue;
                }
                if let Some(n) = kind.parse_id(&name) {
                    max = max.max(n);
                }
            }
            next.insert(kind, max + 1);
        }
        Ok(Self { root, next: Mutex::new(next) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn allocate(&self, kind: Kind) -> String {
        let mut next = self.next.lock().expect("id counter lock");
        let n = next.get_mut(&kind).expect("all kinds present");
        let id = format!("{}-{:04}", kind.prefix(), *n);
        *n += 1;
        id
    }

    pub fn path(&self, kind: Kind, id: &str) -> Result<PathBuf> {
        if !is_safe_id(id) {
            return Err(Error::NotFound(format!("{} {id:?}", kind.dir())));
        }
        let dir = self.root.join(kind.dir());
        Ok(match kind {
            Kind::Job => dir.join(format!("{id}.json")),
            _ => dir.join(id),
        })
    }

    /// Directory of an existing entity, or not-found.
    pub fn existing(&self, kind: Kind, id: &str) -> Result<PathBuf> {
        let p = self.path(kind, id)?;
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::NotFound(format!("{} {id}", kind.dir())))
        }
    }
}

/// Writes through a temporary sibling and renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".{}.tmp", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).at(path)?;
    serde_json::from_slice(&bytes).map_err(|e| crate::error::format_err(path, e))
}

/// A directory that becomes visible under its final name only once
/// everything inside it has been written.
#[derive(Debug)]
pub struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
}

impl Staging {
    pub fn new(dest: &Path) -> Result<Self> {
        if dest.exists() {
            return Err(Error::Conflict(format!("{} already exists", dest.display())));
        }
        let mut tmp = dest.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).at(&tmp)?;
        }
        fs::create_dir_all(&tmp).at(&tmp)?;
        Ok(Self { tmp, dest: dest.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn publish(self) -> Result<PathBuf> {
        fs::rename(&self.tmp, &self.dest).at(&self.dest)?;
        Ok(self.dest.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.tmp);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_continue_after_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        assert_eq!(s.allocate(Kind::Run), "run-0001");
        assert_eq!(s.allocate(Kind::Run), "run-0002");
        assert_eq!(s.allocate(Kind::Sweep), "sw-0001");
        fs::create_dir(s.path(Kind::Run, "run-0007").unwrap()).unwrap();
        write_atomic(&s.path(Kind::Job, "job-0003").unwrap(), b"{}").unwrap();
        let s = Store::open(dir.path()).unwrap();
        assert_eq!(s.allocate(Kind::Run), "run-0008");
        assert_eq!(s.allocate(Kind::Job), "job-0004");
        assert_eq!(s.allocate(Kind::Session), "s-0001");
        assert!(s.path(Kind::Run, "../etc").is_err());
        assert!(matches!(s.existing(Kind::Run, "run-0001"), Err(Error::NotFound(_))));
    }

    #[test]
    fn staging_publishes_once() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("out");
        let st = Staging::new(&dest).unwrap();
        write_atomic(&st.file("a.txt"), b"x").unwrap();
        assert!(!dest.exists());
        st.publish().unwrap();
        assert_eq!(fs::read(dest.join("a.txt")).unwrap(), b"x");
        assert!(matches!(Staging::new(&dest), Err(Error::Conflict(_))));
        let abandoned = Staging::new(&dir.path().join("gone")).unwrap();
        drop(abandoned);
        assert!(!dir.path().join("gone.partial").exists());
    }
}
