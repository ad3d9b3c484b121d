//! Atomic output directories and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempfile::TempDir;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub config_digest: String,
    pub input_digest: Option<String>,
    pub seed: u64,
    pub timestamp: String,
    /// Files written alongside the manifest, sorted.
    pub artifacts: Vec<String>,
}

/// Files are written into a sibling temp dir, then renamed into place.
pub struct Staging {
    tmp: TempDir,
    target: PathBuf,
}

impl Staging {
    pub fn new(target: &Path, force: bool) -> std::io::Result<Self> {
        if target.exists() {
            let empty = target.is_dir() && fs::read_dir(target)?.next().is_none();
            if !empty && !force {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!("{} exists and is not empty (use --force to replace it)", target.display()),
                ));
            }
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let tmp = tempfile::Builder::new().prefix(".amf-out-").tempdir_in(&parent)?;
        Ok(Self { tmp, target: target.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        self.tmp.path()
    }

    pub fn write(&self, name: &str, body: impl AsRef<[u8]>) -> std::io::Result<()> {
        fs::write(self.tmp.path().join(name), body)
    }

    pub fn commit(self, mut manifest: RunManifest) -> std::io::Result<PathBuf> {
        let mut names: Vec<String> = fs::read_dir(self.tmp.path())?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST_FILE)
            .collect();
        names.sort();
        manifest.artifacts = names;
        let body = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)? + "\n";
        fs::write(self.tmp.path().join(MANIFEST_FILE), body)?;
        if self.target.exists() {
            if self.target.is_dir() {
                fs::remove_dir_all(&self.target)?;
            } else {
                fs::remove_file(&self.target)?;
            }
        }
        let kept = self.tmp.keep();
        fs::rename(&kept, &self.target)?;
        Ok(self.target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        RunManifest {
            tool_version: "0".into(),
            subcommand: "x".into(),
            config_digest: "d".into(),
            input_digest: None,
            seed: 0,
            timestamp: "t".into(),
            artifacts: vec![],
        }
    }

    #[test]
    fn commit_renames_and_lists() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        let s = Staging::new(&target, false).unwrap();
        s.write("b.csv", "1").unwrap();
        s.write("a.json", "{}").unwrap();
        s.commit(manifest()).unwrap();
        let m: RunManifest = serde_json::from_slice(&fs::read(target.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(m.artifacts, vec!["a.json", "b.csv"]);
        let leftovers: Vec<_> = fs::read_dir(root.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn refuses_nonempty_without_force() {
        let root = tempfile::tempdir().unwrap();
        fs::write(root.path().join("keep"), "x").unwrap();
        assert!(Staging::new(root.path(), false).is_err());
    }

    #[test]
    fn dropped_staging_leaves_nothing() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        {
            let s = Staging::new(&target, false).unwrap();
            s.write("a", "1").unwrap();
        }
        assert!(!target.exists());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);
    }
}
