//! Directory-level orchestration shared by the command-line tool and tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::inference::{
    denoise, mask_to_world, sliding_window_predict, threshold_map, Detection, ProbabilityMap,
};
use crate::network::Network;
use crate::preprocess::{prepare_volume, sample_scan, CubeCache, CubeSample, SamplerConfig};
use crate::rng::{indexed_substream, Stream};
use crate::volume_io::{parse_annotations, read_scan, Annotation};

/// `.mhd` headers directly inside `dir`, sorted by name.
pub fn list_scans(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let path = entry.map_err(|e| Error::file(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("mhd"))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_annotations(&text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanReport {
    pub series: String,
    pub positives: usize,
    pub negatives: usize,
    /// Placements that could not be made (not an error for the scan).
    pub skipped: Vec<String>,
}

#[derive(Debug, Default)]
pub struct PreprocessReport {
    pub scans: Vec<ScanReport>,
    pub failures: Vec<(PathBuf, Error)>,
}

/// Resamples, normalizes and samples cubes from every scan in `scans_dir`,
/// writing NPY files and a manifest into `out_dir`. Scans that fail to load
/// are reported and left out; the rest still land in the manifest.
///
/// Scan `i` (in sorted order) draws from `Sampler` substream `i`, so results
/// do not depend on which other scans fail.
pub fn preprocess_directory(
    scans_dir: &Path,
    annotations_path: &Path,
    out_dir: &Path,
    config: &SamplerConfig,
) -> Result<PreprocessReport> {
    config.validate()?;
    let scans = list_scans(scans_dir)?;
    if scans.is_empty() {
        return Err(Error::NoScans(scans_dir.to_path_buf()));
    }
    let mut by_series: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
    for a in read_annotations(annotations_path)? {
        by_series.entry(a.series_id.clone()).or_default().push(a);
    }

    let mut cache = CubeCache::create(out_dir)?;
    let mut report = PreprocessReport::default();
    for (i, path) in scans.iter().enumerate() {
        let volume = match read_scan(path) {
            Ok(v) => v,
            Err(e) => {
                report.failures.push((path.clone(), e));
                continue;
            }
        };
        let prepared = prepare_volume(&volume, config);
        let anns = by_series
            .get(&volume.meta.series_id)
            .map_or(&[][..], Vec::as_slice);
        let mut rng = indexed_substream(config.seed, Stream::Sampler, i as u64);
        let cubes = sample_scan(&prepared, anns, config, &mut rng);
        let positives = cubes.cubes.iter().filter(|c| c.label == 1).count();
        for c in &cubes.cubes {
            cache.add(c)?;
        }
        report.scans.push(ScanReport {
            series: volume.meta.series_id.clone(),
            positives,
            negatives: cubes.cubes.len() - positives,
            skipped: cubes.skipped,
        });
    }
    cache.write_manifest()?;
    Ok(report)
}

/// Every cube listed in the manifest of `data_dir`.
pub fn load_dataset(data_dir: &Path, edge: usize) -> Result<Vec<CubeSample>> {
    let cache = CubeCache::open(data_dir)?;
    cache
        .entries()
        .iter()
        .map(|e| cache.load(e, edge))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub map: ProbabilityMap,
    pub raw_hits: usize,
    pub detections: Vec<Detection>,
}

/// Prepares one scan, scores it with a sliding window, thresholds and
/// denoises the map.
pub fn predict_scan(
    scan: &Path,
    net: &Network<f32>,
    config: &SamplerConfig,
    stride: usize,
    threshold: f64,
) -> Result<Prediction> {
    let volume = prepare_volume(&read_scan(scan)?, config);
    let map = sliding_window_predict(&volume, net, stride)?;
    let mask = threshold_map(&map, threshold)?;
    let clean = denoise(&mask);
    let detections = mask_to_world(&clean, &map)?;
    Ok(Prediction {
        raw_hits: mask.count(),
        map,
        detections,
    })
}
