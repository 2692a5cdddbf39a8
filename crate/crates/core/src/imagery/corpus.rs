use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::{swatch, ImageError, ImageTensor, RetrievalBackend};
use crate::env::EntityPool;
use crate::nn::tokenize;
use crate::seed::hash_str;

/// Offline retrieval over a directory of PNG files.
///
/// Tags come from `tags.json` (`{"file.png": ["red", "apple"]}`) when
/// present, otherwise from the file stem split on `_` and `-`. A query
/// resolves to the file sharing the most tags with its words, ties going to
/// the first filename; no overlap yields the gray placeholder.
pub struct LocalCorpusBackend {
    dir: PathBuf,
    size: usize,
    entries: Vec<(String, BTreeSet<String>)>,
}

impl LocalCorpusBackend {
    pub fn open(dir: impl Into<PathBuf>, size: usize) -> Result<Self, ImageError> {
        let dir = dir.into();
        let manifest = dir.join("tags.json");
        let mut entries: Vec<(String, BTreeSet<String>)> = if manifest.exists() {
            let text = fs::read_to_string(&manifest).map_err(|e| ImageError::Io(e.to_string()))?;
            let map: BTreeMap<String, Vec<String>> =
                serde_json::from_str(&text).map_err(|e| ImageError::Decode(format!("tags.json: {e}")))?;
            map.into_iter()
                .map(|(file, tags)| (file, tags.into_iter().map(|t| t.to_lowercase()).collect()))
                .collect()
        } else {
            let listing = fs::read_dir(&dir).map_err(|e| ImageError::Io(format!("{}: {e}", dir.display())))?;
            let mut found = Vec::new();
            for entry in listing {
                let path = entry.map_err(|e| ImageError::Io(e.to_string()))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("png") {
                    continue;
                }
                let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
                let tags = stem.split(['_', '-']).filter(|t| !t.is_empty()).map(str::to_lowercase).collect();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                found.push((name, tags));
            }
            found
        };
        if entries.is_empty() {
            return Err(ImageError::EmptyCorpus(dir.display().to_string()));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(LocalCorpusBackend { dir, size, entries })
    }

    /// File chosen for `query`, if any tag overlaps.
    pub fn resolve(&self, query: &str) -> Option<&str> {
        let words: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut best: Option<(usize, &str)> = None;
        for (file, tags) in &self.entries {
            let overlap = tags.intersection(&words).count();
            if overlap > 0 && best.is_none_or(|(n, _)| overlap > n) {
                best = Some((overlap, file));
            }
        }
        best.map(|(_, f)| f)
    }
}

impl RetrievalBackend for LocalCorpusBackend {
    fn name(&self) -> &str {
        "local-corpus"
    }

    fn fetch(&self, query: &str) -> Result<ImageTensor, ImageError> {
        match self.resolve(query) {
            Some(file) => ImageTensor::load_canonical(&self.dir.join(file), self.size),
            None => Ok(ImageTensor::placeholder(self.size, self.size)),
        }
    }
}

/// Writes one swatch per pool entity (and room) into `dir`, named after the
/// entity so the stem tags match game phrases.
pub fn write_synthetic_corpus(dir: &Path, pool: &EntityPool, size: usize) -> Result<usize, ImageError> {
    fs::create_dir_all(dir).map_err(|e| ImageError::Io(format!("{}: {e}", dir.display())))?;
    let mut items: Vec<(String, Option<crate::env::VisualTag>)> = Vec::new();
    items.extend(pool.objects.iter().map(|o| (o.name.clone(), Some(o.tag))));
    items.extend(pool.containers.iter().map(|c| (c.name.clone(), Some(c.tag))));
    items.extend(pool.rooms.iter().map(|r| (r.clone(), None)));
    for (name, tag) in &items {
        let stem = name.replace(' ', "_");
        swatch(*tag, size, hash_str(name)).save_png(&dir.join(format!("{stem}.png")))?;
    }
    Ok(items.len())
}
