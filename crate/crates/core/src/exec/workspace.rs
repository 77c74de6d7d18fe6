use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::modality::Modality;
use crate::plan::ArtifactRef;

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("material `{0}` is not present in the workspace")]
    MissingMaterial(String),
    #[error("`{0}` is not a valid artifact filename")]
    InvalidFilename(String),
    #[error("unexpected directory `{0}` in workspace")]
    UnexpectedDirectory(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct Artifact {
    pub bytes: Arc<[u8]>,
    pub modality: Modality,
}

/// The set of files a run reads and writes. Either purely in memory or mirrored
/// one-to-one onto a flat directory.
#[derive(Debug, Default)]
pub struct Workspace {
    root: Option<PathBuf>,
    artifacts: RwLock<BTreeMap<String, Artifact>>,
}

impl Workspace {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a directory workspace and indexes its files.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mut artifacts = BTreeMap::new();
        for entry in fs::read_dir(&root).map_err(io_err(&root))? {
            let entry = entry.map_err(io_err(&root))?;
            let path = entry.path();
            if path.is_dir() {
                return Err(WorkspaceError::UnexpectedDirectory(path));
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let parsed =
                ArtifactRef::parse(&name).map_err(|_| WorkspaceError::InvalidFilename(name.clone()))?;
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            artifacts.insert(
                name,
                Artifact {
                    bytes: bytes.into(),
                    modality: parsed.modality(),
                },
            );
        }
        Ok(Self {
            root: Some(root),
            artifacts: RwLock::new(artifacts),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Adds a user-provided file under its own name.
    pub fn stage(&self, filename: &str, bytes: Vec<u8>) -> Result<(), WorkspaceError> {
        let parsed =
            ArtifactRef::parse(filename).map_err(|_| WorkspaceError::InvalidFilename(filename.to_string()))?;
        let modality = parsed.modality();
        self.write(&parsed, modality, bytes)
    }

    pub fn write(&self, artifact: &ArtifactRef, modality: Modality, bytes: Vec<u8>) -> Result<(), WorkspaceError> {
        if let Some(root) = &self.root {
            let path = root.join(artifact.filename());
            fs::write(&path, &bytes).map_err(io_err(&path))?;
        }
        self.artifacts.write().expect("workspace lock poisoned").insert(
            artifact.filename().to_string(),
            Artifact {
                bytes: bytes.into(),
                modality,
            },
        );
        Ok(())
    }

    pub fn read(&self, filename: &str) -> Option<Artifact> {
        self.artifacts.read().expect("workspace lock poisoned").get(filename).cloned()
    }

    pub fn contains(&self, filename: &str) -> bool {
        self.artifacts.read().expect("workspace lock poisoned").contains_key(filename)
    }

    pub fn filenames(&self) -> Vec<String> {
        self.artifacts.read().expect("workspace lock poisoned").keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.artifacts.read().expect("workspace lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_mirrors_map() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        ws.stage("a.txt", b"hello".to_vec()).unwrap();
        ws.stage("b.mp3", vec![1, 2, 3]).unwrap();
        let reopened = Workspace::open(dir.path()).unwrap();
        assert_eq!(reopened.filenames(), vec!["a.txt", "b.mp3"]);
        assert_eq!(&*reopened.read("a.txt").unwrap().bytes, b"hello");
        assert_eq!(reopened.read("b.mp3").unwrap().modality, Modality::Audio);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("notes.md"), "x").unwrap();
        assert!(matches!(
            Workspace::open(dir.path()),
            Err(WorkspaceError::InvalidFilename(_))
        ));
    }
}
