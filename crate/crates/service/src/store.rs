//! Append-only transcript files, one per session.

use std::fs::{self, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use convrec::session::{self, TranscriptLine};

use crate::ServiceError;

#[derive(Clone, Debug)]
pub struct TranscriptStore {
    dir: PathBuf,
}

impl TranscriptStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| ServiceError::Store(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, token: &str) -> PathBuf {
        self.dir.join(format!("{token}.jsonl"))
    }

    /// Append and flush to disk before returning.
    pub fn append(&self, token: &str, lines: &[TranscriptLine]) -> Result<(), ServiceError> {
        let path = self.path(token);
        let err = |e: std::io::Error| ServiceError::Store(format!("{}: {e}", path.display()));
        let mut buf = Vec::new();
        session::write_transcript(&mut buf, lines).map_err(err)?;
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(err)?;
        f.write_all(&buf).map_err(err)?;
        f.sync_data().map_err(err)
    }

    /// Every stored transcript, ordered by token.
    pub fn load_all(&self) -> Result<Vec<(String, Vec<TranscriptLine>)>, ServiceError> {
        let mut out = Vec::new();
        let entries = fs::read_dir(&self.dir).map_err(|e| ServiceError::Store(format!("{}: {e}", self.dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| ServiceError::Store(e.to_string()))?.path();
            if path.extension().is_none_or(|x| x != "jsonl") {
                continue;
            }
            let Some(token) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else { continue };
            let f = fs::File::open(&path).map_err(|e| ServiceError::Store(format!("{}: {e}", path.display())))?;
            let lines = session::read_transcript(BufReader::new(f)).map_err(|e| ServiceError::Store(format!("{}: {e}", path.display())))?;
            out.push((token, lines));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }
}
