//! Append-only JSON-lines label journal. Every acknowledged answer is on
//! disk first, so a restarted loop replays them instead of asking again.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use protolab_core::dal::Answer;
use protolab_core::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub request_id: String,
    pub instance_id: usize,
    pub round: usize,
    pub answer: Answer,
}

pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
    replayed: BTreeMap<usize, Answer>,
}

impl Journal {
    /// Opens (or creates) the journal and reads back earlier answers.
    /// A torn final line from a crash is dropped; any other bad line is an
    /// error.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut replayed = BTreeMap::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let lines: Vec<&str> = text.split_inclusive('\n').collect();
            for (i, line) in lines.iter().enumerate() {
                let last = i + 1 == lines.len();
                if line.trim().is_empty() {
                    valid_len += line.len() as u64;
                    continue;
                }
                match serde_json::from_str::<JournalEntry>(line) {
                    Ok(e) if line.ends_with('\n') => {
                        replayed.insert(e.instance_id, e.answer);
                        valid_len += line.len() as u64;
                    }
                    Ok(_) | Err(_) if last => log::warn!("{}: dropping torn final line", path.display()),
                    Err(e) => {
                        return Err(Error::invalid(format!("{} line {}: {e}", path.display(), i + 1)));
                    }
                    Ok(_) => unreachable!("only the final line can lack a newline"),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        // later appends must start on a fresh line
        file.set_len(valid_len).map_err(|e| Error::io(path, e))?;
        Ok(Journal {
            path: path.to_path_buf(),
            file: Mutex::new(file),
            replayed,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Answers recorded before this process started, by instance id.
    pub fn replayed(&self) -> &BTreeMap<usize, Answer> {
        &self.replayed
    }

    pub fn append(&self, entry: &JournalEntry) -> Result<()> {
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        f.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}
