//! `#crossmlp-manifest-v1` files: one `<id>\t<source>\t<target>\t<semantic>`
//! entry per line, paths relative to the manifest's directory.

use std::path::{Path, PathBuf};

use crate::error::{io_err, DataError, Result};

pub const MANIFEST_HEADER: &str = "#crossmlp-manifest-v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: PathBuf,
    pub target: PathBuf,
    pub semantic: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    /// Blank lines and `#` comments after the header are skipped.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            _ => return Err(DataError::Manifest { line: 1, msg: format!("expected `{MANIFEST_HEADER}` header") }),
        }
        let mut m = Self::new(root);
        let mut ids = std::collections::HashSet::new();
        for (i, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, source, target, semantic] = fields[..] else {
                return Err(DataError::Manifest {
                    line: i + 1,
                    msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
                });
            };
            if id.is_empty() || !ids.insert(id.to_string()) {
                return Err(DataError::Manifest { line: i + 1, msg: format!("empty or duplicate id `{id}`") });
            }
            m.entries.push(ManifestEntry {
                id: id.to_string(),
                source: source.into(),
                target: target.into(),
                semantic: semantic.into(),
            });
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.id,
                e.source.display(),
                e.target.display(),
                e.semantic.display()
            ));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    /// Fails with the first referenced file that does not exist.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.source, &e.target, &e.semantic] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(DataError::Io {
                        path: full,
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print_round_trip() {
        let text = "#crossmlp-manifest-v1\na\tx/a.png\ty/a.png\tz/a.png\n\n# note\nb\t/abs/b.png\tb2.png\tb3.png\n";
        let m = Manifest::parse(text, "/data").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.resolve(&m.entries[0].source), PathBuf::from("/data/x/a.png"));
        assert_eq!(m.resolve(&m.entries[1].source), PathBuf::from("/abs/b.png"));
        let again = Manifest::parse(&m.to_text(), "/data").unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(Manifest::parse("a\tb\tc\td\n", ".").is_err());
        assert!(Manifest::parse("#crossmlp-manifest-v1\na\tb\tc\n", ".").is_err());
        assert!(Manifest::parse("#crossmlp-manifest-v1\na\tb\tc\td\na\te\tf\tg\n", ".").is_err());
        let empty = Manifest::parse("#crossmlp-manifest-v1\n", ".").unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn missing_file_names_the_path() {
        let m = Manifest::parse("#crossmlp-manifest-v1\na\tnope.png\tnope.png\tnope.png\n", "/nonexistent").unwrap();
        let err = m.check_files().unwrap_err().to_string();
        assert!(err.contains("/nonexistent/nope.png"), "{err}");
    }
}
