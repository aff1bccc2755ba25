//! On-disk cube cache: one NPY file per cube plus `manifest.csv`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::npy::{read_npy_f32, write_npy_f32};
use super::CubeSample;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "path,label,series,cx,cy,cz";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// NPY file name, relative to the cache directory.
    pub path: String,
    pub label: u8,
    pub series: String,
    pub corner: [usize; 3],
}

/// Writes the cube's voxels as an `(edge, edge, edge)` `<f4` array.
pub fn save_cube(sample: &CubeSample, path: &Path) -> Result<()> {
    let e = sample.edge;
    fs::write(path, write_npy_f32(&[e, e, e], &sample.data)).map_err(|err| Error::file(path, err))
}

/// Reads cube voxels, checking the array is `(edge, edge, edge)`.
pub fn load_cube(path: &Path, edge: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let (shape, data) = read_npy_f32(&bytes)?;
    if shape != [edge, edge, edge] {
        return Err(Error::ShapeMismatch(format!(
            "{}: expected ({edge}, {edge}, {edge}), got {shape:?}",
            path.display()
        )));
    }
    Ok(data)
}

#[derive(Debug)]
pub struct CubeCache {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
    next_index: HashMap<String, usize>,
}

impl CubeCache {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        Ok(CubeCache {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
            next_index: HashMap::new(),
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        Ok(CubeCache {
            dir: dir.to_path_buf(),
            entries: parse_manifest(&text)?,
            next_index: HashMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Saves `<series>_<index>.npy` and records it.
    pub fn add(&mut self, sample: &CubeSample) -> Result<&ManifestEntry> {
        let idx = self
            .next_index
            .entry(sample.source_series.clone())
            .or_insert(0);
        let name = format!("{}_{}.npy", sample.source_series, idx);
        *idx += 1;
        save_cube(sample, &self.dir.join(&name))?;
        self.entries.push(ManifestEntry {
            path: name,
            label: sample.label,
            series: sample.source_series.clone(),
            corner: sample.corner_voxel,
        });
        Ok(self.entries.last().unwrap())
    }

    pub fn write_manifest(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, format_manifest(&self.entries)).map_err(|e| Error::file(&path, e))
    }

    pub fn load(&self, entry: &ManifestEntry, edge: usize) -> Result<CubeSample> {
        Ok(CubeSample {
            data: load_cube(&self.dir.join(&entry.path), edge)?,
            edge,
            label: entry.label,
            source_series: entry.series.clone(),
            corner_voxel: entry.corner,
        })
    }
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        let [x, y, z] = e.corner;
        out.push_str(&format!(
            "{},{},{},{x},{y},{z}\n",
            e.path, e.label, e.series
        ));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => {
            return Err(Error::MalformedRow {
                line: 1,
                reason: format!("expected header `{MANIFEST_HEADER}`"),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let bad = |reason: String| Error::MalformedRow {
                line: i + 1,
                reason,
            };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 columns, got {}", f.len())));
            }
            let label = match f[1] {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("label must be 0 or 1, got `{other}`"))),
            };
            let coord = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| bad(format!("bad corner `{s}`")))
            };
            Ok(ManifestEntry {
                path: f[0].to_string(),
                label,
                series: f[2].to_string(),
                corner: [coord(f[3])?, coord(f[4])?, coord(f[5])?],
            })
        })
        .collect()
}
