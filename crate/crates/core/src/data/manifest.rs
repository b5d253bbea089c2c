//! Tab-separated dataset manifests: `path<TAB>split<TAB>transcript`.

use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use crate::error::{HtrError, Result};
use crate::vocab::canonical;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split tag {other:?} (expected train, val or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineRecord {
    /// Relative to the manifest root.
    pub image_path: PathBuf,
    pub split: Split,
    pub transcript: String,
}

fn stays_under_root(p: &Path) -> bool {
    let mut depth = 0usize;
    for c in p.components() {
        match c {
            Component::Normal(_) => depth += 1,
            Component::CurDir => {}
            Component::ParentDir => {
                if depth == 0 {
                    return false;
                }
                depth -= 1;
            }
            Component::RootDir | Component::Prefix(_) => return false,
        }
    }
    depth > 0
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<Vec<LineRecord>> {
    let err = |line: usize, msg: String| HtrError::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.splitn(3, '\t');
        let (Some(p), Some(split), Some(transcript)) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(err(line, "expected path<TAB>split<TAB>transcript".into()));
        };
        let image_path = PathBuf::from(p);
        if !stays_under_root(&image_path) {
            return Err(err(line, format!("image path {p:?} must stay under the manifest root")));
        }
        let split: Split = split.parse().map_err(|m| err(line, m))?;
        let transcript = canonical(transcript);
        if split == Split::Train && transcript.is_empty() {
            return Err(err(line, "training transcript is empty".into()));
        }
        out.push(LineRecord {
            image_path,
            split,
            transcript,
        });
    }
    Ok(out)
}

/// Reads a manifest. Image files are not touched until they are loaded.
pub fn load_manifest(file: &Path) -> Result<Vec<LineRecord>> {
    let text = std::fs::read_to_string(file).map_err(|e| HtrError::io(file, e))?;
    parse_manifest(file, &text)
}

pub fn write_manifest(file: &Path, records: &[LineRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        if r.transcript.contains(['\t', '\n']) {
            return Err(HtrError::Data(format!(
                "transcript {:?} cannot be stored in a manifest",
                r.transcript
            )));
        }
        text.push_str(&format!("{}\t{}\t{}\n", r.image_path.display(), r.split, r.transcript));
    }
    std::fs::write(file, text).map_err(|e| HtrError::io(file, e))
}

/// Directory that manifest image paths are relative to.
pub fn manifest_root(file: &Path) -> PathBuf {
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}
