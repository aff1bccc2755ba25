//! Resampling, intensity normalization and labeled cube extraction.

mod cache;
pub mod npy;
mod resample;

use rand::Rng as _;

pub use cache::{load_cube, save_cube, CubeCache, ManifestEntry, MANIFEST_FILE, MANIFEST_HEADER};
pub use resample::{resample, sample_trilinear};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume_io::{world_to_voxel, Annotation, Volume};

pub const DEFAULT_CUBE_EDGE: usize = 48;
pub const DEFAULT_HU_WINDOW: (f64, f64) = (-1000.0, 400.0);
pub const MAX_NEGATIVE_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub cube_edge: usize,
    pub target_spacing: [f64; 3],
    pub hu_window: (f64, f64),
    pub seed: u64,
    /// Positive cubes drawn around each malignant nodule.
    pub positives_per_nodule: usize,
    /// Negative cubes drawn from each scan.
    pub negatives_per_scan: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            cube_edge: DEFAULT_CUBE_EDGE,
            target_spacing: [1.0; 3],
            hu_window: DEFAULT_HU_WINDOW,
            seed: 0,
            positives_per_nodule: 1,
            negatives_per_scan: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cube_edge < 8 {
            return Err(Error::Config(format!(
                "cube_edge must be >= 8, got {}",
                self.cube_edge
            )));
        }
        if !(self.hu_window.0 < self.hu_window.1) {
            return Err(Error::Config(format!(
                "hu_window low must be below high, got {:?}",
                self.hu_window
            )));
        }
        if self
            .target_spacing
            .iter()
            .any(|&s| !(s > 0.0 && s.is_finite()))
        {
            return Err(Error::Config(format!(
                "target_spacing must be positive, got {:?}",
                self.target_spacing
            )));
        }
        Ok(())
    }
}

/// An `edge³` block of normalized intensities, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeSample {
    pub data: Vec<f32>,
    pub edge: usize,
    /// 1 = malignant, 0 = healthy.
    pub label: u8,
    pub source_series: String,
    /// Lowest voxel (x, y, z) of the cube in the resampled volume.
    pub corner_voxel: [usize; 3],
}

/// Clamps to `window` and maps linearly onto [0, 1].
pub fn normalize(v: &Volume, hu_window: (f64, f64)) -> Volume {
    let (low, high) = hu_window;
    assert!(low < high, "hu_window low must be below high");
    let data = v
        .voxels()
        .iter()
        .map(|&x| ((x as f64).clamp(low, high) - low) / (high - low))
        .map(|x| x as f32)
        .collect();
    Volume::new(v.meta.clone(), data).expect("normalize preserves voxel count")
}

/// Strict containment of a fractional voxel position in a cube.
pub fn cube_contains(corner: [usize; 3], edge: usize, p: [f64; 3]) -> bool {
    (0..3).all(|i| (corner[i] as f64) < p[i] && p[i] < (corner[i] + edge) as f64)
}

fn draw_in(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo as u64..=hi as u64) as usize
}

/// Draws a cube around a malignant nodule. The corner is uniform over all
/// in-bounds corners whose cube strictly contains the nodule centre.
pub fn extract_positive_cube(
    v: &Volume,
    a: &Annotation,
    edge: usize,
    rng: &mut Rng,
) -> Result<CubeSample> {
    if !a.is_malignant() {
        return Err(Error::NoValidPlacement(format!(
            "{} annotation cannot seed a positive cube",
            a.category
        )));
    }
    let dims = v.dims();
    if dims.iter().any(|&d| d < edge) {
        return Err(Error::NoValidPlacement(format!(
            "volume {dims:?} is smaller than a {edge}-voxel cube"
        )));
    }
    let c = world_to_voxel(&v.meta, a.center_world);
    let mut range = [(0usize, 0usize); 3];
    for i in 0..3 {
        // corner k needs k < c and c < k + edge
        let lo = ((c[i] - edge as f64).floor() + 1.0).max(0.0);
        let hi = (c[i].ceil() - 1.0).min((dims[i] - edge) as f64);
        if !(lo <= hi) {
            return Err(Error::NoValidPlacement(format!(
                "nodule at voxel {c:?} cannot be enclosed inside volume {dims:?}"
            )));
        }
        range[i] = (lo as usize, hi as usize);
    }
    let corner = range.map(|(lo, hi)| draw_in(rng, lo, hi));
    debug_assert!(cube_contains(corner, edge, c));
    Ok(CubeSample {
        data: v.crop_cube(corner, edge),
        edge,
        label: 1,
        source_series: v.meta.series_id.clone(),
        corner_voxel: corner,
    })
}

/// Draws a cube containing no malignant nodule centre, by rejection over
/// uniformly placed corners. Small nodules and non-nodules do not veto.
pub fn extract_negative_cube(
    v: &Volume,
    annotations: &[Annotation],
    edge: usize,
    rng: &mut Rng,
) -> Result<CubeSample> {
    let dims = v.dims();
    if dims.iter().any(|&d| d < edge) {
        return Err(Error::NoValidPlacement(format!(
            "volume {dims:?} is smaller than a {edge}-voxel cube"
        )));
    }
    let centers: Vec<[f64; 3]> = annotations
        .iter()
        .filter(|a| a.is_malignant())
        .map(|a| world_to_voxel(&v.meta, a.center_world))
        .collect();

    for _ in 0..MAX_NEGATIVE_ATTEMPTS {
        let corner: [usize; 3] = std::array::from_fn(|i| draw_in(rng, 0, dims[i] - edge));
        if centers.iter().all(|&c| !cube_contains(corner, edge, c)) {
            return Ok(CubeSample {
                data: v.crop_cube(corner, edge),
                edge,
                label: 0,
                source_series: v.meta.series_id.clone(),
                corner_voxel: corner,
            });
        }
    }
    Err(Error::NoValidPlacement(format!(
        "no nodule-free cube found in {MAX_NEGATIVE_ATTEMPTS} attempts"
    )))
}

/// Resample and normalize a raw scan per `config`.
pub fn prepare_volume(v: &Volume, config: &SamplerConfig) -> Volume {
    normalize(&resample(v, config.target_spacing), config.hu_window)
}

/// Outcome of sampling one scan.
#[derive(Debug, Default)]
pub struct ScanCubes {
    pub cubes: Vec<CubeSample>,
    /// Placements that were skipped, e.g. nodules too close to the border.
    pub skipped: Vec<String>,
}

/// Extracts the configured positive and negative cubes from an already
/// prepared volume. `annotations` should belong to this scan.
pub fn sample_scan(
    v: &Volume,
    annotations: &[Annotation],
    config: &SamplerConfig,
    rng: &mut Rng,
) -> ScanCubes {
    let mut out = ScanCubes::default();
    for a in annotations.iter().filter(|a| a.is_malignant()) {
        for _ in 0..config.positives_per_nodule {
            match extract_positive_cube(v, a, config.cube_edge, rng) {
                Ok(c) => out.cubes.push(c),
                Err(e) => out
                    .skipped
                    .push(format!("positive at {:?}: {e}", a.center_world)),
            }
        }
    }
    for _ in 0..config.negatives_per_scan {
        match extract_negative_cube(v, annotations, config.cube_edge, rng) {
            Ok(c) => out.cubes.push(c),
            Err(e) => out.skipped.push(format!("negative: {e}")),
        }
    }
    out
}
