use std::fs;
use std::path::{Path, PathBuf};

use mpe_core::correction::{CurationRequest, Material};
use mpe_core::plan::ArtifactRef;
use mpe_core::TaskType;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// On-disk request. Material paths are relative to the request file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestFile {
    pub request_id: String,
    pub query: String,
    pub task_type: TaskType,
    pub materials: Vec<String>,
}

#[derive(Debug, Error)]
pub enum RequestError {
    #[error("{path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{request}: material {path} not found")]
    MissingMaterial { request: PathBuf, path: PathBuf },
}

pub fn load_request(path: &Path) -> Result<CurationRequest, RequestError> {
    let text = fs::read_to_string(path).map_err(|source| RequestError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |message: String| RequestError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    let file: RequestFile = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if file.request_id.is_empty() || file.request_id.contains(['/', '\\']) || file.request_id.starts_with('.') {
        return Err(malformed(format!("unusable request_id `{}`", file.request_id)));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut materials = Vec::with_capacity(file.materials.len());
    for m in &file.materials {
        let full = base.join(m);
        let name = full
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| malformed(format!("material path `{m}` has no file name")))?;
        let artifact = ArtifactRef::parse(name).map_err(|e| malformed(e.to_string()))?;
        let bytes = fs::read(&full).map_err(|_| RequestError::MissingMaterial {
            request: path.to_path_buf(),
            path: full.clone(),
        })?;
        materials.push(Material { artifact, bytes });
    }
    Ok(CurationRequest {
        request_id: file.request_id,
        query: file.query,
        task_type: file.task_type,
        materials,
    })
}

/// Request files in `dir`, sorted by name.
pub fn request_files(dir: &Path) -> Result<Vec<PathBuf>, RequestError> {
    let unreadable = |source| RequestError::Unreadable {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(unreadable)? {
        let path = entry.map_err(unreadable)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
