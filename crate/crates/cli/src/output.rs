//! Output directories, run records and the exit-code contract.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

/// Error caused by how the tool was invoked (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Exit code for a failed command: 1 for usage errors, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<diffreg::Error>() {
            if matches!(
                e,
                diffreg::Error::InvalidArgument(_) | diffreg::Error::InvalidShape { .. }
            ) {
                return 1;
            }
        }
    }
    2
}

/// Directory that only becomes visible under its final name once every
/// file has been written. Dropped without [`Staging::commit`], it is removed.
pub struct Staging {
    tmp: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> anyhow::Result<Self> {
        if target.exists() {
            return Err(usage(format!("output {} already exists", target.display())));
        }
        let name = target
            .file_name()
            .ok_or_else(|| usage(format!("invalid output path {}", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent)
            .with_context(|| format!("creating {}", parent.display()))?;
        let tmp = parent.join(format!(
            ".{}.partial-{}",
            name.to_string_lossy(),
            std::process::id()
        ));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Self {
            tmp,
            target: target.to_path_buf(),
            committed: false,
        })
    }

    /// Where files go while staging.
    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(mut self) -> anyhow::Result<()> {
        std::fs::rename(&self.tmp, &self.target)
            .with_context(|| format!("moving outputs into {}", self.target.display()))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Writes `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Everything needed to repeat a command: `run.json`.
#[derive(Debug, Serialize)]
pub struct RunRecord<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub inputs: Value,
    pub config: C,
    pub seeds: Value,
}

impl<C: Serialize> RunRecord<C> {
    pub fn new(command: &'static str, inputs: Value, config: C, seeds: Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            inputs,
            config,
            seeds,
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&dir.join("run.json"), text.as_bytes())
    }
}

pub fn path_str(p: &Path) -> String {
    p.display().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staging_commits_or_cleans_up() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        let s = Staging::new(&target).unwrap();
        std::fs::write(s.path().join("a"), b"x").unwrap();
        s.commit().unwrap();
        assert_eq!(std::fs::read(target.join("a")).unwrap(), b"x");
        assert!(Staging::new(&target).is_err());

        let other = root.path().join("other");
        let s = Staging::new(&other).unwrap();
        let tmp = s.path().to_path_buf();
        drop(s);
        assert!(!tmp.exists() && !other.exists());
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code(&usage("bad flag")), 1);
        let lib: anyhow::Error = diffreg::Error::InvalidArgument("n".into()).into();
        assert_eq!(exit_code(&lib.context("synth")), 1);
        let io: anyhow::Error = std::io::Error::other("disk").into();
        assert_eq!(exit_code(&io), 2);
    }
}
