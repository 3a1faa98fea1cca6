use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use quarc_core::{Error, Result};
use serde::Serialize;

/// Output directory for one command invocation.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    /// Creates `root`, refusing a non-empty existing directory unless `force`.
    pub fn prepare(root: &Path, force: bool) -> Result<Self> {
        if root.exists() {
            if !root.is_dir() {
                return Err(Error::Config(format!(
                    "output path {} is not a directory",
                    root.display()
                )));
            }
            let occupied = fs::read_dir(root)?.next().is_some();
            if occupied && !force {
                return Err(Error::Config(format!(
                    "output directory {} already exists; pass --force to overwrite",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<OutDir> {
        let root = self.root.join(name);
        fs::create_dir_all(&root)?;
        Ok(OutDir { root })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.path(name), contents)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    /// One JSON object per line.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(self.path(name))?);
        for row in rows {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Left-aligned first column, right-aligned rest.
pub fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(header.to_vec());
    for r in rows {
        s += &line(r.iter().map(String::as_str).collect());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_occupied_directory_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        assert!(matches!(OutDir::prepare(dir.path(), false), Err(Error::Config(_))));
        assert!(OutDir::prepare(dir.path(), true).is_ok());
        let empty = dir.path().join("fresh");
        fs::create_dir(&empty).unwrap();
        assert!(OutDir::prepare(&empty, false).is_ok());
    }

    #[test]
    fn jsonl_has_one_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::prepare(&dir.path().join("o"), false).unwrap();
        out.write_jsonl("m.jsonl", &[1, 2, 3]).unwrap();
        assert_eq!(fs::read_to_string(out.path("m.jsonl")).unwrap(), "1\n2\n3\n");
    }

    #[test]
    fn columns_line_up() {
        let t = aligned(
            &["name", "v"],
            &[vec!["a".into(), "10".into()], vec!["long".into(), "2".into()]],
        );
        assert_eq!(t, "name   v\na     10\nlong   2\n");
    }
}
