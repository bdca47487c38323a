use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// `val*` file stems are validation manifests; everything else trains.
    pub fn from_path(path: &Path) -> Self {
        match path.file_stem().and_then(|s| s.to_str()) {
            Some(stem) if stem.starts_with("val") => Split::Val,
            _ => Split::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    /// Directory the manifest was read from; relative entries resolve against it.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn has_masks(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.mask_path.is_some())
    }

    pub fn to_tsv(&self) -> String {
        entries_to_tsv(&self.entries)
    }
}

pub fn entries_to_tsv(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.image_path.to_string_lossy());
        if let Some(m) = &e.mask_path {
            out.push('\t');
            out.push_str(&m.to_string_lossy());
        }
        out.push('\n');
    }
    out
}

/// Parses `image_path[\tmask_path]` lines. Blank lines are skipped; paths are not touched.
pub fn parse_manifest(text: &str, source: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::ManifestParse {
            path: source.to_path_buf(),
            line: idx + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() > 2 {
            return Err(err(format!("expected 1 or 2 tab-separated columns, found {}", cols.len())));
        }
        if cols.iter().any(|c| c.trim().is_empty()) {
            return Err(err("empty column".into()));
        }
        entries.push(ManifestEntry {
            image_path: PathBuf::from(cols[0]),
            mask_path: cols.get(1).map(PathBuf::from),
        });
    }
    Ok(entries)
}

/// Reads a manifest, resolves relative paths against its directory and checks that every file
/// exists and that masks match their image's size.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = parse_manifest(&text, path)?;
    for e in &mut entries {
        e.image_path = base_dir.join(&e.image_path);
        if let Some(m) = &mut e.mask_path {
            *m = base_dir.join(&*m);
        }
        for p in std::iter::once(&e.image_path).chain(e.mask_path.as_ref()) {
            if !p.is_file() {
                return Err(Error::DanglingPath { manifest: path.to_path_buf(), missing: p.clone() });
            }
        }
        if let Some(m) = &e.mask_path {
            let dims = |p: &Path| {
                image::image_dimensions(p)
                    .map_err(|err| Error::Image { path: p.to_path_buf(), message: err.to_string() })
            };
            let (a, b) = (dims(&e.image_path)?, dims(m)?);
            if a != b {
                return Err(Error::Shape(format!(
                    "mask {} is {}x{} but image {} is {}x{}",
                    m.display(),
                    b.0,
                    b.1,
                    e.image_path.display(),
                    a.0,
                    a.1
                )));
            }
        }
    }
    Ok(DatasetManifest { entries, split: Split::from_path(path), base_dir })
}
