//! Whole-scan inference: slide cubes over a prepared volume, collect one
//! probability per window, threshold, drop isolated hits, and export.
//!
//! Grids are indexed by window position `(ix, iy, iz)` with `ix` fastest,
//! matching the voxel order of [`Volume`].

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;
use crate::volume_io::{voxel_to_world, ScanMeta, Volume};

pub const DEFAULT_STRIDE: usize = 24;
pub const DEFAULT_THRESHOLD: f64 = 0.9;

/// Anything that scores one cube of `cube_edge`³ voxels (x fastest).
pub trait CubeClassifier {
    fn cube_edge(&self) -> usize;
    fn predict_cube(&self, cube: &[f32]) -> Result<f32>;
}

impl CubeClassifier for Network<f32> {
    fn cube_edge(&self) -> usize {
        self.input_edge()
    }

    fn predict_cube(&self, cube: &[f32]) -> Result<f32> {
        let e = self.input_edge();
        let x = Tensor::from_vec(&[1, e, e, e, 1], cube.to_vec())?;
        Ok(self.predict_proba(&x)?[0])
    }
}

/// Wraps a closure as a classifier.
pub struct FnClassifier<F> {
    pub edge: usize,
    pub f: F,
}

impl<F: Fn(&[f32]) -> f32> CubeClassifier for FnClassifier<F> {
    fn cube_edge(&self) -> usize {
        self.edge
    }

    fn predict_cube(&self, cube: &[f32]) -> Result<f32> {
        Ok((self.f)(cube))
    }
}

/// Window corners along one axis: multiples of `stride`, plus one window
/// flush with the far edge when the last multiple leaves voxels uncovered.
pub fn window_positions(extent: usize, edge: usize, stride: usize) -> Result<Vec<usize>> {
    if extent < edge {
        return Err(Error::VolumeTooSmall(format!(
            "extent {extent} is below cube edge {edge}"
        )));
    }
    if stride == 0 || stride > extent {
        return Err(Error::VolumeTooSmall(format!(
            "stride {stride} must be between 1 and the volume extent {extent}"
        )));
    }
    let mut out: Vec<usize> = (0..=(extent - edge) / stride).map(|i| i * stride).collect();
    if !(extent - edge).is_multiple_of(stride) {
        out.push(extent - edge);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    /// Window counts along x, y, z.
    pub dims: [usize; 3],
    /// Window corner voxels along each axis.
    pub positions: [Vec<usize>; 3],
    pub grid: Vec<f32>,
    pub stride: usize,
    pub cube_edge: usize,
    pub meta: ScanMeta,
}

impl ProbabilityMap {
    pub fn index(&self, [ix, iy, iz]: [usize; 3]) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    pub fn get(&self, cell: [usize; 3]) -> f32 {
        self.grid[self.index(cell)]
    }

    pub fn corner(&self, [ix, iy, iz]: [usize; 3]) -> [usize; 3] {
        [
            self.positions[0][ix],
            self.positions[1][iy],
            self.positions[2][iz],
        ]
    }

    pub fn cells(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| [x, y, z])))
    }
}

/// Scores every window of `v` (already resampled and normalized).
pub fn sliding_window_predict(
    v: &Volume,
    model: &impl CubeClassifier,
    stride: usize,
) -> Result<ProbabilityMap> {
    let edge = model.cube_edge();
    let d = v.dims();
    let positions = [
        window_positions(d[0], edge, stride)?,
        window_positions(d[1], edge, stride)?,
        window_positions(d[2], edge, stride)?,
    ];
    let dims = [positions[0].len(), positions[1].len(), positions[2].len()];
    let mut grid = Vec::with_capacity(dims.iter().product());
    for &z in &positions[2] {
        for &y in &positions[1] {
            for &x in &positions[0] {
                let p = model.predict_cube(&v.crop_cube([x, y, z], edge))?;
                grid.push(p.clamp(0.0, 1.0));
            }
        }
    }
    Ok(ProbabilityMap {
        dims,
        positions,
        grid,
        stride,
        cube_edge: edge,
        meta: v.meta.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMask {
    pub dims: [usize; 3],
    pub cells: Vec<bool>,
    pub threshold: f64,
}

impl DetectionMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    fn at(&self, [x, y, z]: [usize; 3]) -> bool {
        self.cells[x + self.dims[0] * (y + self.dims[1] * z)]
    }
}

/// Marks cells with probability ≥ `t`, compared in the map's f32 precision
/// so that a stored 0.9 meets a threshold of 0.9.
pub fn threshold_map(m: &ProbabilityMap, t: f64) -> Result<DetectionMask> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {t}"
        )));
    }
    Ok(DetectionMask {
        dims: m.dims,
        cells: m.grid.iter().map(|&p| p >= t as f32).collect(),
        threshold: t,
    })
}

/// One pass: a set cell survives only if a face neighbour is also set.
pub fn denoise(mask: &DetectionMask) -> DetectionMask {
    let [nx, ny, nz] = mask.dims;
    let mut cells = vec![false; mask.cells.len()];
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.cells[i] {
                    let neighbours = [
                        (x > 0).then(|| [x - 1, y, z]),
                        (x + 1 < nx).then(|| [x + 1, y, z]),
                        (y > 0).then(|| [x, y - 1, z]),
                        (y + 1 < ny).then(|| [x, y + 1, z]),
                        (z > 0).then(|| [x, y, z - 1]),
                        (z + 1 < nz).then(|| [x, y, z + 1]),
                    ];
                    cells[i] = neighbours.into_iter().flatten().any(|c| mask.at(c));
                }
                i += 1;
            }
        }
    }
    DetectionMask {
        dims: mask.dims,
        cells,
        threshold: mask.threshold,
    }
}

/// 2-D image, `width` values per row, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl Projection {
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Binary PGM (P5), 8-bit, value·255 rounded.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    /// One CSV line per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Maximum-intensity projection of an x-fastest grid along `axis`
/// (0 = x, 1 = y, 2 = z). The remaining axes keep their order, the lower
/// one becoming the column.
pub fn project_2d(grid: &[f32], dims: [usize; 3], axis: usize) -> Result<Projection> {
    if axis > 2 {
        return Err(Error::Config(format!(
            "projection axis must be 0, 1 or 2, got {axis}"
        )));
    }
    if grid.len() != dims.iter().product::<usize>() {
        return Err(Error::ShapeMismatch(format!(
            "grid of {} for dims {dims:?}",
            grid.len()
        )));
    }
    let keep: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let (width, height) = (dims[keep[0]], dims[keep[1]]);
    let mut values = vec![f32::NEG_INFINITY; width * height];
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let c = [x, y, z];
                let slot = &mut values[c[keep[1]] * width + c[keep[0]]];
                *slot = slot.max(grid[i]);
                i += 1;
            }
        }
    }
    Ok(Projection {
        width,
        height,
        values,
    })
}

pub fn project_mask(mask: &DetectionMask, axis: usize) -> Result<Projection> {
    let grid: Vec<f32> = mask.cells.iter().map(|&c| c as u8 as f32).collect();
    project_2d(&grid, mask.dims, axis)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub cell: [usize; 3],
    pub center_voxel: [f64; 3],
    pub center_world: [f64; 3],
    pub probability: f32,
}

/// World-space cube centres (corner + edge/2) of every set cell.
pub fn mask_to_world(mask: &DetectionMask, map: &ProbabilityMap) -> Result<Vec<Detection>> {
    if mask.dims != map.dims {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs map {:?}",
            mask.dims, map.dims
        )));
    }
    let half = map.cube_edge as f64 / 2.0;
    Ok(map
        .cells()
        .filter(|&c| mask.at(c))
        .map(|cell| {
            let center_voxel = map.corner(cell).map(|v| v as f64 + half);
            Detection {
                cell,
                center_voxel,
                center_world: voxel_to_world(&map.meta, center_voxel),
                probability: map.get(cell),
            }
        })
        .collect())
}

pub const MAP_CSV_HEADER: &str = "ix,iy,iz,probability";
pub const DETECTIONS_CSV_HEADER: &str = "ix,iy,iz,x_mm,y_mm,z_mm,probability";

pub fn map_to_csv(map: &ProbabilityMap) -> String {
    let mut s = format!("{MAP_CSV_HEADER}\n");
    for c in map.cells() {
        let _ = writeln!(s, "{},{},{},{}", c[0], c[1], c[2], map.get(c));
    }
    s
}

pub fn detections_to_csv(detections: &[Detection]) -> String {
    let mut s = format!("{DETECTIONS_CSV_HEADER}\n");
    for d in detections {
        let [x, y, z] = d.center_world;
        let _ = writeln!(
            s,
            "{},{},{},{x},{y},{z},{}",
            d.cell[0], d.cell[1], d.cell[2], d.probability
        );
    }
    s
}

/// Little-endian f32 grid (x fastest) and its text sidecar.
pub fn map_to_raw(map: &ProbabilityMap) -> (Vec<u8>, String) {
    let raw = map.grid.iter().flat_map(|v| v.to_le_bytes()).collect();
    let [nx, ny, nz] = map.dims;
    let [vx, vy, vz] = map.meta.dims;
    let sidecar = format!(
        "dims = {nx} {ny} {nz}\nstride = {}\ncube_edge = {}\nvolume_dims = {vx} {vy} {vz}\n",
        map.stride, map.cube_edge
    );
    (raw, sidecar)
}

/// Output file names written by [`write_outputs`].
pub const MAP_CSV: &str = "probability_map.csv";
pub const MAP_RAW: &str = "probability_map.raw";
pub const MAP_SIDECAR: &str = "probability_map.txt";
pub const DETECTIONS_CSV: &str = "detections.csv";
pub const PROJECTION_PGM: &str = "projection.pgm";
pub const PROJECTION_CSV: &str = "projection.csv";

/// Writes the map (CSV, raw + sidecar), detections, and the z-axis
/// projection of the map (PGM + CSV) into `dir`.
pub fn write_outputs(dir: &Path, map: &ProbabilityMap, detections: &[Detection]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::file(&p, e))
    };
    let (raw, sidecar) = map_to_raw(map);
    let projection = project_2d(&map.grid, map.dims, 2)?;
    write(MAP_CSV, map_to_csv(map).as_bytes())?;
    write(MAP_RAW, &raw)?;
    write(MAP_SIDECAR, sidecar.as_bytes())?;
    write(DETECTIONS_CSV, detections_to_csv(detections).as_bytes())?;
    write(PROJECTION_PGM, &projection.to_pgm())?;
    write(PROJECTION_CSV, projection.to_csv().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::ElementType;
    use proptest::prelude::*;

    fn meta(dims: [usize; 3]) -> ScanMeta {
        ScanMeta {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            element_type: ElementType::Float32,
            little_endian: true,
            raw_path: "v.raw".into(),
            series_id: "v".into(),
        }
    }

    fn volume(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product();
        Volume::new(
            meta(dims),
            (0..n).map(|i| (i % 101) as f32 / 100.0).collect(),
        )
        .unwrap()
    }

    fn map_from(dims: [usize; 3], grid: Vec<f32>) -> ProbabilityMap {
        ProbabilityMap {
            dims,
            positions: dims.map(|n| (0..n).map(|i| i * 24).collect()),
            grid,
            stride: 24,
            cube_edge: 48,
            meta: meta([96; 3]),
        }
    }

    fn constant(edge: usize, p: f32) -> FnClassifier<impl Fn(&[f32]) -> f32> {
        FnClassifier {
            edge,
            f: move |_: &[f32]| p,
        }
    }

    #[test]
    fn grid_sizes() {
        let m = sliding_window_predict(&volume([96; 3]), &constant(48, 0.5), 24).unwrap();
        assert_eq!(m.dims, [3, 3, 3]);
        assert_eq!(m.grid.len(), 27);
        assert!(m.grid.iter().all(|&p| p == 0.5));
        let m = sliding_window_predict(&volume([48; 3]), &constant(48, 0.5), 24).unwrap();
        assert_eq!(m.dims, [1, 1, 1]);
        assert_eq!(window_positions(100, 48, 24).unwrap(), vec![0, 24, 48, 52]);
    }

    #[test]
    fn too_small() {
        let v = volume([47, 60, 60]);
        assert!(matches!(
            sliding_window_predict(&v, &constant(48, 0.5), 24),
            Err(Error::VolumeTooSmall(_))
        ));
        let v = volume([60; 3]);
        assert!(matches!(
            sliding_window_predict(&v, &constant(48, 0.5), 61),
            Err(Error::VolumeTooSmall(_))
        ));
        assert!(matches!(
            sliding_window_predict(&v, &constant(48, 0.5), 0),
            Err(Error::VolumeTooSmall(_))
        ));
    }

    #[test]
    fn windows_see_their_own_cube() {
        // classifier reports the first voxel of the cube it receives
        let v = volume([60, 50, 49]);
        let m = sliding_window_predict(
            &v,
            &FnClassifier {
                edge: 48,
                f: |c: &[f32]| c[0],
            },
            7,
        )
        .unwrap();
        for cell in m.cells() {
            let [x, y, z] = m.corner(cell);
            assert_eq!(m.get(cell), v.at(x, y, z));
        }
    }

    #[test]
    fn threshold_is_inclusive() {
        let m = map_from([3, 1, 1], vec![0.89, 0.90, 0.95]);
        assert_eq!(
            threshold_map(&m, 0.9).unwrap().cells,
            vec![false, true, true]
        );
        assert_eq!(threshold_map(&m, 0.9999).unwrap().count(), 0);
        assert!(threshold_map(&m, 1.0).is_err());
    }

    #[test]
    fn isolated_cells_removed() {
        let mut cells = vec![false; 27];
        cells[13] = true;
        let mask = DetectionMask {
            dims: [3, 3, 3],
            cells,
            threshold: 0.9,
        };
        assert_eq!(denoise(&mask).count(), 0);
        let mut pair = mask.clone();
        pair.cells[14] = true;
        assert_eq!(denoise(&pair).cells, pair.cells);
        // diagonal neighbours do not count
        let mut diag = mask.clone();
        diag.cells[0] = true;
        assert_eq!(denoise(&diag).count(), 0);
    }

    #[test]
    fn projections() {
        let mut grid = vec![0.0; 27];
        grid[13] = 1.0;
        for axis in 0..3 {
            let p = project_2d(&grid, [3, 3, 3], axis).unwrap();
            assert_eq!((p.width, p.height), (3, 3));
            assert_eq!(p.get(1, 1), 1.0);
            assert_eq!(p.values.iter().filter(|&&v| v == 1.0).count(), 1);
        }
        let p = project_2d(&[0.25; 24], [2, 3, 4], 1).unwrap();
        assert_eq!((p.width, p.height), (2, 4));
        assert!(p.values.iter().all(|&v| v == 0.25));
        let pgm = p.to_pgm();
        assert!(pgm.starts_with(b"P5\n2 4\n255\n"));
        assert!(pgm[pgm.len() - 8..].iter().all(|&b| b == 64));
        assert_eq!(p.to_csv().lines().count(), 4);
    }

    #[test]
    fn world_centres() {
        let mut m = map_from([3, 3, 3], vec![0.0; 27]);
        m.grid[0] = 0.95;
        m.grid[1] = 0.97;
        let mask = threshold_map(&m, 0.9).unwrap();
        let d = mask_to_world(&mask, &m).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].center_world, [24.0, 24.0, 24.0]);
        assert_eq!(d[1].center_world, [48.0, 24.0, 24.0]);
        let empty = threshold_map(&m, 0.99).unwrap();
        assert!(mask_to_world(&empty, &m).unwrap().is_empty());
        let csv = detections_to_csv(&d);
        assert_eq!(csv.lines().nth(1), Some("0,0,0,24,24,24,0.95"));
    }

    #[test]
    fn exports() {
        let m = map_from([2, 1, 1], vec![0.5, 1.0]);
        assert_eq!(map_to_csv(&m), "ix,iy,iz,probability\n0,0,0,0.5\n1,0,0,1\n");
        let (raw, side) = map_to_raw(&m);
        assert_eq!(raw.len(), 8);
        assert_eq!(f32::from_le_bytes(raw[4..8].try_into().unwrap()), 1.0);
        assert!(side.contains("dims = 2 1 1") && side.contains("cube_edge = 48"));
    }

    fn random_map() -> impl Strategy<Value = ProbabilityMap> {
        (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(x, y, z)| {
            proptest::collection::vec(0.0f32..=1.0, x * y * z)
                .prop_map(move |g| map_from([x, y, z], g))
        })
    }

    proptest! {
        #[test]
        fn grid_dimension_law(extent in 48usize..200, stride in 1usize..60) {
            prop_assume!(stride <= extent);
            let pos = window_positions(extent, 48, stride).unwrap();
            let base = (extent - 48) / stride + 1;
            let flush = ((extent - 48) % stride != 0) as usize;
            prop_assert_eq!(pos.len(), base + flush);
            prop_assert_eq!(*pos.last().unwrap(), extent - 48);
            prop_assert!(pos.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn mask_shrinks_with_threshold(m in random_map(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(threshold_map(&m, hi).unwrap().count() <= threshold_map(&m, lo).unwrap().count());
        }

        #[test]
        fn denoise_only_removes(m in random_map(), t in 0.01f64..0.99) {
            let mask = threshold_map(&m, t).unwrap();
            let clean = denoise(&mask);
            for (c, orig) in clean.cells.iter().zip(&mask.cells) {
                prop_assert!(!c || *orig);
            }
        }

        #[test]
        fn projection_keeps_max(m in random_map(), axis in 0usize..3) {
            let p = project_2d(&m.grid, m.dims, axis).unwrap();
            let max = |v: &[f32]| v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(max(&p.values), max(&m.grid));
        }

        #[test]
        fn projection_commutes_with_threshold(m in random_map(), axis in 0usize..3, t in 0.01f64..0.99) {
            let mask_proj = project_mask(&threshold_map(&m, t).unwrap(), axis).unwrap();
            let proj = project_2d(&m.grid, m.dims, axis).unwrap();
            for (mp, p) in mask_proj.values.iter().zip(&proj.values) {
                prop_assert!(*mp == 0.0 || *p >= t as f32);
            }
        }
    }
}
