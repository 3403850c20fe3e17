use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

/// Output files held in memory until the whole command has succeeded.
#[derive(Default)]
pub struct Staged {
    files: Vec<(String, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Writes every file to a temporary sibling first and renames the
    /// batch into place only once all writes have succeeded.
    pub fn commit(self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut pending = Vec::with_capacity(self.files.len());
        for (name, bytes) in self.files {
            let mut tmp = NamedTempFile::new_in(dir)?;
            tmp.write_all(&bytes)?;
            tmp.as_file().sync_all()?;
            pending.push((tmp, dir.join(name)));
        }
        pending
            .into_iter()
            .map(|(tmp, path)| {
                tmp.persist(&path).map_err(|e| e.error)?;
                log::debug!("wrote {}", path.display());
                Ok(path)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_writes_every_file() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("nested");
        let mut staged = Staged::default();
        staged.add("a.csv", b"x\n".to_vec());
        staged.add("b.json", b"{}".to_vec());
        assert_eq!(staged.names(), ["a.csv", "b.json"]);
        let written = staged.commit(&target).unwrap();
        assert_eq!(written.len(), 2);
        assert_eq!(fs::read(target.join("a.csv")).unwrap(), b"x\n");
        assert_eq!(fs::read_dir(&target).unwrap().count(), 2);
    }
}
