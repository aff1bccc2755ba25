//! Seeded synthetic CT scans: noisy uniform background with an optional
//! bright sphere, for smoke tests without patient data.
//!
//! Intensities are designed in normalized units (background 0.3, sphere
//! +0.3, Gaussian noise σ 0.05) and stored as rounded Hounsfield units
//! through the inverse of the HU window, so the regular preprocessing maps
//! them back.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::preprocess::{CubeSample, DEFAULT_HU_WINDOW};
use crate::rng::{indexed_substream, Rng, Stream};
use crate::volume_io::{
    format_annotations, voxel_to_world, write_scan, Annotation, ElementType, NoduleCategory,
    ScanMeta, Volume,
};

pub const ANNOTATIONS_FILE: &str = "annotations.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub background: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Sphere radius range in voxels, inclusive.
    pub radius: (f64, f64),
    pub hu_window: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            background: 0.3,
            contrast: 0.3,
            noise_sigma: 0.05,
            radius: (3.0, 8.0),
            hu_window: DEFAULT_HU_WINDOW,
        }
    }
}

/// Voxel-space sphere (spacing is always 1 mm, origin 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Random radius, centre anywhere the whole sphere stays inside `dims`.
pub fn random_sphere(dims: [usize; 3], config: &SynthConfig, rng: &mut Rng) -> Sphere {
    let radius = rng.gen_range(config.radius.0..=config.radius.1);
    let center = std::array::from_fn(|i| {
        let (lo, hi) = (radius + 1.0, dims[i] as f64 - radius - 2.0);
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            dims[i] as f64 / 2.0
        }
    });
    Sphere { center, radius }
}

/// A sphere that lies wholly inside both of the first two windows along
/// each axis when sliding cubes of `edge` with stride `edge / 2`.
pub fn overlap_sphere(edge: usize, config: &SynthConfig, rng: &mut Rng) -> Sphere {
    let radius = rng.gen_range(config.radius.0..=config.radius.1);
    let lo = (edge / 2) as f64 + config.radius.1 + 1.0;
    let hi = edge as f64 - config.radius.1 - 1.0;
    Sphere {
        center: std::array::from_fn(|_| rng.gen_range(lo..=hi)),
        radius,
    }
}

/// Normalized intensities (x fastest), before HU conversion.
pub fn render(
    dims: [usize; 3],
    sphere: Option<Sphere>,
    config: &SynthConfig,
    rng: &mut Rng,
) -> Vec<f32> {
    let noise = Normal::new(0.0, config.noise_sigma).expect("noise sigma must be finite and >= 0");
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let mut v = config.background + noise.sample(rng);
                if let Some(s) = sphere {
                    let d2: f64 = [x, y, z]
                        .iter()
                        .zip(s.center)
                        .map(|(&p, c)| (p as f64 - c).powi(2))
                        .sum();
                    if d2 <= s.radius * s.radius {
                        v += config.contrast;
                    }
                }
                out.push(v as f32);
            }
        }
    }
    out
}

/// A `MET_SHORT` scan in HU, 1 mm spacing, origin 0.
pub fn synth_scan(
    series_id: &str,
    dims: [usize; 3],
    sphere: Option<Sphere>,
    config: &SynthConfig,
    rng: &mut Rng,
) -> Result<(Volume, Vec<Annotation>)> {
    let (lo, hi) = config.hu_window;
    let voxels = render(dims, sphere, config, rng)
        .into_iter()
        .map(|n| (lo + n as f64 * (hi - lo)).round() as f32)
        .collect();
    let meta = ScanMeta {
        dims,
        spacing: [1.0; 3],
        origin: [0.0; 3],
        element_type: ElementType::Int16,
        little_endian: true,
        raw_path: format!("{series_id}.raw"),
        series_id: series_id.to_string(),
    };
    let volume = Volume::new(meta, voxels)?;
    let annotations = sphere
        .map(|s| {
            let diameter = 2.0 * s.radius;
            vec![Annotation {
                series_id: series_id.to_string(),
                center_world: voxel_to_world(&volume.meta, s.center),
                diameter_mm: diameter,
                category: NoduleCategory::from_diameter(diameter),
            }]
        })
        .unwrap_or_default();
    Ok((volume, annotations))
}

/// Series id of the `i`th generated scan.
pub fn series_name(i: usize) -> String {
    format!("synth{i:05}")
}

/// Writes `count` scans of edge `size` (even indices carry a sphere) plus an
/// annotation table into `dir`. Returns the header paths.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    size: usize,
    seed: u64,
    config: &SynthConfig,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut paths = Vec::with_capacity(count);
    let mut annotations = Vec::new();
    for i in 0..count {
        let mut rng = indexed_substream(seed, Stream::Synth, i as u64);
        let dims = [size; 3];
        let sphere = (i % 2 == 0).then(|| random_sphere(dims, config, &mut rng));
        let (volume, anns) = synth_scan(&series_name(i), dims, sphere, config, &mut rng)?;
        paths.push(write_scan(&volume, dir)?);
        annotations.extend(anns);
    }
    let table = dir.join(ANNOTATIONS_FILE);
    std::fs::write(&table, format_annotations(&annotations)).map_err(|e| Error::file(&table, e))?;
    Ok(paths)
}

/// Writes one `size`³ scan containing a single [`overlap_sphere`] for a cube
/// edge of `edge`. Returns the header path and the sphere.
pub fn write_detection_scan(
    dir: &Path,
    series_id: &str,
    size: usize,
    edge: usize,
    seed: u64,
    config: &SynthConfig,
) -> Result<(PathBuf, Sphere)> {
    if size < edge {
        return Err(Error::VolumeTooSmall(format!("{size} < cube edge {edge}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut rng = indexed_substream(seed, Stream::Synth, u64::MAX);
    let sphere = overlap_sphere(edge, config, &mut rng);
    let (volume, anns) = synth_scan(series_id, [size; 3], Some(sphere), config, &mut rng)?;
    let path = write_scan(&volume, dir)?;
    let table = dir.join(ANNOTATIONS_FILE);
    std::fs::write(&table, format_annotations(&anns)).map_err(|e| Error::file(&table, e))?;
    Ok((path, sphere))
}

/// In-memory labeled cubes (alternating labels), already normalized.
pub fn synth_cubes(count: usize, edge: usize, seed: u64, config: &SynthConfig) -> Vec<CubeSample> {
    (0..count)
        .map(|i| {
            let mut rng = indexed_substream(seed, Stream::Synth, i as u64);
            let dims = [edge; 3];
            let sphere = (i % 2 == 0).then(|| random_sphere(dims, config, &mut rng));
            let data = render(dims, sphere, config, &mut rng)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
            CubeSample {
                data,
                edge,
                label: sphere.is_some() as u8,
                source_series: series_name(i),
                corner_voxel: [0; 3],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{normalize, prepare_volume, SamplerConfig};
    use crate::rng::substream;
    use crate::volume_io::read_scan;

    #[test]
    fn sphere_raises_mean_intensity() {
        let cfg = SynthConfig::default();
        let mut rng = substream(1, Stream::Synth);
        let s = Sphere {
            center: [10.0; 3],
            radius: 5.0,
        };
        let (v, anns) = synth_scan("a", [21; 3], Some(s), &cfg, &mut rng).unwrap();
        let n = normalize(&v, cfg.hu_window);
        let inside = n.at(10, 10, 10);
        let corner = n.at(0, 0, 0);
        assert!(inside > corner);
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].diameter_mm, 10.0);
        assert!(anns[0].is_malignant());

        let mean: f64 = n.voxels().iter().map(|&x| x as f64).sum::<f64>() / n.voxels().len() as f64;
        let expected = 0.3 + 0.3 * (4.0 / 3.0 * std::f64::consts::PI * 125.0) / 9261.0;
        assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
    }

    #[test]
    fn spheres_fit_inside() {
        let cfg = SynthConfig::default();
        let mut rng = substream(2, Stream::Synth);
        for _ in 0..500 {
            let s = random_sphere([48; 3], &cfg, &mut rng);
            assert!((3.0..=8.0).contains(&s.radius));
            for c in s.center {
                assert!(c - s.radius >= 1.0 && c + s.radius <= 46.0);
            }
            let o = overlap_sphere(48, &cfg, &mut rng);
            for c in o.center {
                assert!((33.0..=39.0).contains(&c));
                // inside windows [0, 48) and [24, 72)
                assert!(c - o.radius >= 24.0 && c + o.radius < 48.0);
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_preprocessing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let paths = write_dataset(dir.path(), 4, 16, 3, &cfg).unwrap();
        assert_eq!(paths.len(), 4);
        let table = std::fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        let anns = crate::volume_io::parse_annotations(&table).unwrap();
        assert_eq!(anns.len(), 2);
        let v = read_scan(&paths[1]).unwrap();
        assert_eq!(v.meta.series_id, "synth00001");
        let p = prepare_volume(&v, &SamplerConfig::default());
        assert_eq!(p.dims(), [16; 3]);
        let mean: f64 = p.voxels().iter().map(|&x| x as f64).sum::<f64>() / 4096.0;
        assert!((mean - 0.3).abs() < 0.01);

        let again = tempfile::tempdir().unwrap();
        write_dataset(again.path(), 4, 16, 3, &cfg).unwrap();
        for name in ["synth00000.raw", "synth00003.mhd", ANNOTATIONS_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(again.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn cubes_alternate_labels() {
        let cubes = synth_cubes(
            6,
            8,
            0,
            &SynthConfig {
                radius: (2.0, 2.5),
                ..SynthConfig::default()
            },
        );
        assert_eq!(
            cubes.iter().map(|c| c.label).collect::<Vec<_>>(),
            vec![1, 0, 1, 0, 1, 0]
        );
        assert!(cubes
            .iter()
            .all(|c| c.data.len() == 512 && c.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
