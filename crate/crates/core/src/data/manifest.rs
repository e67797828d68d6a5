//! Tab-separated dataset manifest.
//!
//! Columns are separated by single tabs (shown as spaces here):
//!
//! ```text
//! slidetune-manifest  1
//! task  lung-subtyping
//! dim  64
//! classes  luad  lusc
//! entry  <slide_id>  <label>  <cohort>  <train|test>  <embedding path>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Embedding paths are
//! relative to the manifest's directory unless absolute.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::embedding::{read_embedding, read_embedding_header};
use crate::aggregate::SlideBag;
use crate::error::{Error, ManifestError, Result};
use crate::optim::LabeledBag;

pub const MANIFEST_HEADER: &str = "slidetune-manifest\t1";
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub label: usize,
    pub cohort: String,
    pub split: Split,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub task: String,
    pub classes: Vec<String>,
    pub dim: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative embedding paths resolve against.
    pub root: PathBuf,
}

fn syntax(line: usize, message: impl Into<String>) -> Error {
    ManifestError::Syntax {
        line,
        message: message.into(),
    }
    .into()
}

fn check_field(line: usize, what: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.chars().any(char::is_whitespace) {
        return Err(syntax(line, format!("{what} `{value}` must be non-empty without whitespace")));
    }
    Ok(())
}

impl DatasetManifest {
    /// Parses manifest text. Checks structure, ids and labels; embedding
    /// files are checked separately by [`Self::embedding_problems`].
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, l)) if l == MANIFEST_HEADER => {}
            Some((n, l)) => return Err(syntax(n, format!("expected header `slidetune-manifest<TAB>1`, found `{l}`"))),
            None => return Err(syntax(1, "empty manifest")),
        }
        let mut task = None;
        let mut dim = None;
        let mut classes: Option<Vec<String>> = None;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "task" if fields.len() == 2 => {
                    check_field(n, "task", fields[1])?;
                    task = Some(fields[1].to_string());
                }
                "dim" if fields.len() == 2 => {
                    let d: usize = fields[1].parse().map_err(|_| syntax(n, format!("bad dim `{}`", fields[1])))?;
                    if d == 0 {
                        return Err(syntax(n, "dim must be positive"));
                    }
                    dim = Some(d);
                }
                "classes" => {
                    let names: Vec<String> = fields[1..].iter().map(|s| s.to_string()).collect();
                    if names.len() < 2 {
                        return Err(syntax(n, "need at least two classes"));
                    }
                    let mut uniq = HashSet::new();
                    for c in &names {
                        check_field(n, "class", c)?;
                        if !uniq.insert(c) {
                            return Err(syntax(n, format!("class `{c}` listed twice")));
                        }
                    }
                    classes = Some(names);
                }
                "entry" if fields.len() == 6 => {
                    let classes = classes.as_ref().ok_or_else(|| syntax(n, "entry before the classes line"))?;
                    let (slide, label, cohort, split, path) = (fields[1], fields[2], fields[3], fields[4], fields[5]);
                    check_field(n, "slide id", slide)?;
                    check_field(n, "cohort", cohort)?;
                    if path.is_empty() {
                        return Err(syntax(n, "empty embedding path"));
                    }
                    let split = match split {
                        "train" => Split::Train,
                        "test" => Split::Test,
                        other => return Err(syntax(n, format!("split must be train or test, found `{other}`"))),
                    };
                    let label = classes.iter().position(|c| c == label).ok_or_else(|| ManifestError::UnknownLabel {
                        slide: slide.to_string(),
                        label: label.to_string(),
                    })?;
                    if !seen.insert(slide.to_string()) {
                        return Err(ManifestError::DuplicateSlide(slide.to_string()).into());
                    }
                    entries.push(ManifestEntry {
                        slide_id: slide.to_string(),
                        label,
                        cohort: cohort.to_string(),
                        split,
                        path: PathBuf::from(path),
                    });
                }
                key @ ("task" | "dim" | "entry") => {
                    return Err(syntax(n, format!("`{key}` line has {} fields", fields.len())));
                }
                other => return Err(syntax(n, format!("unknown record `{other}`"))),
            }
        }
        Ok(Self {
            task: task.ok_or_else(|| syntax(0, "missing task line"))?,
            classes: classes.ok_or_else(|| syntax(0, "missing classes line"))?,
            dim: dim.ok_or_else(|| syntax(0, "missing dim line"))?,
            entries,
            root: root.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root)
    }

    /// Canonical text; `parse(to_text())` gives back the same manifest.
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\ntask\t{}\ndim\t{}\nclasses\t{}\n", self.task, self.dim, self.classes.join("\t"));
        for e in &self.entries {
            s.push_str(&format!(
                "entry\t{}\t{}\t{}\t{}\t{}\n",
                e.slide_id,
                self.classes[e.label],
                e.cohort,
                e.split,
                e.path.display()
            ));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// sha256 of the canonical text, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// sha256 over the bytes of every embedding file, in entry order.
    pub fn data_hash(&self) -> Result<String> {
        let digests = self
            .entries
            .par_iter()
            .map(|e| {
                let path = self.embedding_path(e);
                let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
                Ok(Sha256::digest(&bytes))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        for d in digests {
            h.update(d);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn embedding_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Cohorts in order of first appearance.
    pub fn cohorts(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.cohort) {
                out.push(e.cohort.clone());
            }
        }
        out
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    /// Every missing or mis-sized embedding file, in entry order.
    pub fn embedding_problems(&self) -> Vec<ManifestError> {
        self.entries
            .par_iter()
            .filter_map(|e| self.check_entry(e).err())
            .collect()
    }

    fn check_entry(&self, e: &ManifestEntry) -> std::result::Result<(), ManifestError> {
        let path = self.embedding_path(e);
        if !path.is_file() {
            return Err(ManifestError::MissingEmbedding {
                slide: e.slide_id.clone(),
                path,
            });
        }
        match read_embedding_header(&path) {
            Ok(h) if h.d as usize != self.dim => Err(ManifestError::DimMismatch {
                slide: e.slide_id.clone(),
                expected: self.dim,
                actual: h.d as usize,
            }),
            _ => Ok(()),
        }
    }

    /// Fails with the first embedding problem, if any.
    pub fn preflight(&self) -> Result<()> {
        match self.embedding_problems().into_iter().next() {
            Some(p) => Err(p.into()),
            None => Ok(()),
        }
    }

    pub fn load_bag(&self, entry: &ManifestEntry) -> Result<SlideBag> {
        self.check_entry(entry)?;
        let features = read_embedding(&self.embedding_path(entry))?;
        if features.cols() != self.dim {
            return Err(ManifestError::DimMismatch {
                slide: entry.slide_id.clone(),
                expected: self.dim,
                actual: features.cols(),
            }
            .into());
        }
        SlideBag::new(entry.slide_id.clone(), features)
    }

    /// Loads the bags at `indices`, in that order.
    pub fn load_labeled(&self, indices: &[usize]) -> Result<Vec<LabeledBag>> {
        indices
            .par_iter()
            .map(|&i| {
                let entry = self.entries.get(i).ok_or(Error::Index {
                    index: i,
                    len: self.entries.len(),
                })?;
                Ok(LabeledBag {
                    bag: self.load_bag(entry)?,
                    label: entry.label,
                })
            })
            .collect()
    }
}
