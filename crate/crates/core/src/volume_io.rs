//! MetaImage (`.mhd` + `.raw`) scans, nodule annotation tables and the
//! world/voxel coordinate mapping.
//!
//! Direction cosines are assumed to be identity, so a voxel index maps to
//! world space as `origin + index * spacing` on each axis.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Nodules below this diameter (radius 3 mm) are "small".
pub const LARGE_NODULE_MIN_DIAMETER_MM: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementType {
    Int16,
    UInt8,
    Float32,
}

impl ElementType {
    pub fn size_bytes(self) -> usize {
        match self {
            ElementType::Int16 => 2,
            ElementType::UInt8 => 1,
            ElementType::Float32 => 4,
        }
    }

    pub fn met_name(self) -> &'static str {
        match self {
            ElementType::Int16 => "MET_SHORT",
            ElementType::UInt8 => "MET_UCHAR",
            ElementType::Float32 => "MET_FLOAT",
        }
    }
}

impl FromStr for ElementType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MET_SHORT" => Ok(ElementType::Int16),
            "MET_UCHAR" => Ok(ElementType::UInt8),
            "MET_FLOAT" => Ok(ElementType::Float32),
            other => Err(Error::UnsupportedField(format!("ElementType = {other}"))),
        }
    }
}

/// Header of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanMeta {
    /// Voxels per axis, x/y/z.
    pub dims: [usize; 3],
    /// Millimetres per voxel.
    pub spacing: [f64; 3],
    /// World position (mm) of voxel (0, 0, 0).
    pub origin: [f64; 3],
    pub element_type: ElementType,
    pub little_endian: bool,
    /// Data file, relative to the header's directory.
    pub raw_path: String,
    pub series_id: String,
}

impl ScanMeta {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn raw_len(&self) -> usize {
        self.voxel_count() * self.element_type.size_bytes()
    }

    fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::MalformedHeader(format!(
                "DimSize must be positive, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::MalformedHeader(format!(
                "ElementSpacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::MalformedHeader(format!(
                "Offset must be finite, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }
}

/// A scan's voxels widened to `f32`, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub meta: ScanMeta,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(meta: ScanMeta, voxels: Vec<f32>) -> Result<Self> {
        if voxels.len() != meta.voxel_count() {
            return Err(Error::ShapeMismatch(format!(
                "dims {:?} need {} voxels, got {}",
                meta.dims,
                meta.voxel_count(),
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::DecodeError(format!("non-finite voxel at index {i}")));
        }
        Ok(Volume { meta, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.meta.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.meta.dims;
        x + nx * (y + ny * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Copies the `edge³` block whose lowest corner is `corner` (x, y, z),
    /// keeping x-fastest order.
    pub fn crop_cube(&self, corner: [usize; 3], edge: usize) -> Vec<f32> {
        let [nx, ny, nz] = self.meta.dims;
        assert!(
            corner[0] + edge <= nx && corner[1] + edge <= ny && corner[2] + edge <= nz,
            "cube at {corner:?} with edge {edge} exceeds {:?}",
            self.meta.dims
        );
        let mut out = Vec::with_capacity(edge * edge * edge);
        for z in corner[2]..corner[2] + edge {
            for y in corner[1]..corner[1] + edge {
                let start = self.index(corner[0], y, z);
                out.extend_from_slice(&self.voxels[start..start + edge]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoduleCategory {
    SmallNodule,
    LargeNodule,
    NonNodule,
}

impl NoduleCategory {
    pub fn from_diameter(diameter_mm: f64) -> Self {
        if diameter_mm < LARGE_NODULE_MIN_DIAMETER_MM {
            NoduleCategory::SmallNodule
        } else {
            NoduleCategory::LargeNodule
        }
    }

    /// Only large nodules count as malignant; non-nodules are healthy tissue.
    pub fn is_malignant(self) -> bool {
        self == NoduleCategory::LargeNodule
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub series_id: String,
    pub center_world: [f64; 3],
    pub diameter_mm: f64,
    pub category: NoduleCategory,
}

impl Annotation {
    pub fn is_malignant(&self) -> bool {
        self.category.is_malignant()
    }
}

pub const ANNOTATION_HEADER: &str = "seriesuid,coordX,coordY,coordZ,diameter_mm";

/// Parses a `seriesuid,coordX,coordY,coordZ,diameter_mm` table. A diameter of
/// `-1` marks a non-nodule.
pub fn parse_annotations(csv_text: &str) -> Result<Vec<Annotation>> {
    let mut lines = csv_text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if normalize_header(header) == ANNOTATION_HEADER => {}
        Some((i, header)) => {
            return Err(Error::MalformedRow {
                line: i + 1,
                reason: format!(
                    "expected header `{ANNOTATION_HEADER}`, got `{}`",
                    header.trim()
                ),
            })
        }
        None => return Ok(Vec::new()),
    }

    lines
        .map(|(i, line)| {
            parse_annotation_row(line).map_err(|reason| Error::MalformedRow {
                line: i + 1,
                reason,
            })
        })
        .collect()
}

fn normalize_header(line: &str) -> String {
    line.trim_start_matches('\u{feff}')
        .split(',')
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_annotation_row(line: &str) -> std::result::Result<Annotation, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 columns, got {}", fields.len()));
    }
    let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
        fields[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("{name} is not a number: `{}`", fields[i]))
    };
    let center_world = [num(1, "coordX")?, num(2, "coordY")?, num(3, "coordZ")?];
    let diameter = num(4, "diameter_mm")?;

    let (diameter_mm, category) = if diameter == -1.0 {
        (0.0, NoduleCategory::NonNodule)
    } else if diameter < 0.0 {
        return Err(format!("negative diameter {diameter}"));
    } else {
        (diameter, NoduleCategory::from_diameter(diameter))
    };

    Ok(Annotation {
        series_id: fields[0].to_string(),
        center_world,
        diameter_mm,
        category,
    })
}

/// Writes annotations back in the table format (non-nodules as `-1`).
pub fn format_annotations(annotations: &[Annotation]) -> String {
    let mut out = String::from(ANNOTATION_HEADER);
    out.push('\n');
    for a in annotations {
        let d = match a.category {
            NoduleCategory::NonNodule => -1.0,
            _ => a.diameter_mm,
        };
        let [x, y, z] = a.center_world;
        out.push_str(&format!("{},{x},{y},{z},{d}\n", a.series_id));
    }
    out
}

pub fn world_to_voxel(meta: &ScanMeta, p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (p[i] - meta.origin[i]) / meta.spacing[i])
}

pub fn voxel_to_world(meta: &ScanMeta, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| meta.origin[i] + v[i] * meta.spacing[i])
}

/// Parses the text of an `.mhd` header.
///
/// Keys may appear in any order. `Offset` (alias `Position`/`Origin`) defaults
/// to zero and the byte order to little-endian.
pub fn parse_mhd_header(text: &str) -> Result<ScanMeta> {
    let mut ndims = None;
    let mut dims = None;
    let mut spacing = None;
    let mut element_type = None;
    let mut raw_path = None;
    let mut origin = [0.0; 3];
    let mut little_endian = true;
    let mut element_size = None;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .filter(|(k, _)| !k.is_empty())
            .ok_or_else(|| Error::MalformedHeader(format!("line {}: `{line}`", lineno + 1)))?;

        match key {
            "NDims" => {
                let n: usize = parse_scalar(key, value)?;
                if n != 3 {
                    return Err(Error::UnsupportedField(format!("NDims = {n}")));
                }
                ndims = Some(n);
            }
            "DimSize" => dims = Some(parse_triple::<usize>(key, value)?),
            "ElementSpacing" => spacing = Some(parse_triple::<f64>(key, value)?),
            "ElementSize" => element_size = Some(parse_triple::<f64>(key, value)?),
            "Offset" | "Position" | "Origin" => origin = parse_triple::<f64>(key, value)?,
            "ElementType" => element_type = Some(value.parse::<ElementType>()?),
            "ElementDataFile" => {
                if value.eq_ignore_ascii_case("LOCAL") || value.starts_with("LIST") {
                    return Err(Error::UnsupportedField(format!(
                        "ElementDataFile = {value}"
                    )));
                }
                raw_path = Some(value.to_string());
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                little_endian = !parse_bool(key, value)?;
            }
            "CompressedData" => {
                if parse_bool(key, value)? {
                    return Err(Error::UnsupportedField("CompressedData = True".into()));
                }
            }
            "ElementNumberOfChannels" => {
                let n: usize = parse_scalar(key, value)?;
                if n != 1 {
                    return Err(Error::UnsupportedField(format!(
                        "ElementNumberOfChannels = {n}"
                    )));
                }
            }
            _ => {}
        }
    }

    let missing = |k: &str| Error::MalformedHeader(format!("missing required key {k}"));
    ndims.ok_or_else(|| missing("NDims"))?;
    let meta = ScanMeta {
        dims: dims.ok_or_else(|| missing("DimSize"))?,
        spacing: spacing
            .or(element_size)
            .ok_or_else(|| missing("ElementSpacing"))?,
        origin,
        element_type: element_type.ok_or_else(|| missing("ElementType"))?,
        little_endian,
        raw_path: raw_path.ok_or_else(|| missing("ElementDataFile"))?,
        series_id: String::new(),
    };
    meta.validate()?;
    Ok(meta)
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("{key}: cannot parse `{value}`")))
}

fn parse_triple<T: FromStr + Copy>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::MalformedHeader(format!(
            "{key}: expected 3 values, got `{value}`"
        )));
    }
    Ok([
        parse_scalar(key, parts[0])?,
        parse_scalar(key, parts[1])?,
        parse_scalar(key, parts[2])?,
    ])
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::MalformedHeader(format!(
            "{key}: expected True/False, got `{value}`"
        ))),
    }
}

/// Renders a header that [`parse_mhd_header`] reads back to the same meta
/// (apart from `series_id`, which lives in the file name).
pub fn format_mhd_header(meta: &ScanMeta) -> String {
    let triple = |v: [f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
    format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = {}\n\
         CompressedData = False\n\
         Offset = {}\n\
         ElementSpacing = {}\n\
         DimSize = {} {} {}\n\
         ElementType = {}\n\
         ElementDataFile = {}\n",
        if meta.little_endian { "False" } else { "True" },
        triple(meta.origin),
        triple(meta.spacing),
        meta.dims[0],
        meta.dims[1],
        meta.dims[2],
        meta.element_type.met_name(),
        meta.raw_path,
    )
}

/// Decodes raw voxel bytes according to `meta`.
pub fn load_raw_volume(meta: &ScanMeta, bytes: &[u8]) -> Result<Volume> {
    let expected = meta.raw_len();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let le = meta.little_endian;
    let voxels: Vec<f32> = match meta.element_type {
        ElementType::UInt8 => bytes.iter().map(|&b| b as f32).collect(),
        ElementType::Int16 => bytes
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if le {
                    i16::from_le_bytes(b)
                } else {
                    i16::from_be_bytes(b)
                }) as f32
            })
            .collect(),
        ElementType::Float32 => bytes
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                if le {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }
            })
            .collect(),
    };
    Volume::new(meta.clone(), voxels)
}

/// Encodes voxels with the volume's element type and byte order. Integer
/// types round to nearest and saturate.
pub fn encode_raw(volume: &Volume) -> Vec<u8> {
    let meta = &volume.meta;
    let le = meta.little_endian;
    let mut out = Vec::with_capacity(meta.raw_len());
    for &v in volume.voxels() {
        match meta.element_type {
            ElementType::UInt8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            ElementType::Int16 => {
                let x = v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
                out.extend_from_slice(&if le { x.to_le_bytes() } else { x.to_be_bytes() });
            }
            ElementType::Float32 => {
                out.extend_from_slice(&if le { v.to_le_bytes() } else { v.to_be_bytes() })
            }
        }
    }
    out
}

/// Reads a scan from its `.mhd` path; the series id is the file stem.
pub fn read_scan(mhd_path: &Path) -> Result<Volume> {
    let text = fs::read_to_string(mhd_path).map_err(|e| Error::file(mhd_path, e))?;
    let mut meta = parse_mhd_header(&text)?;
    meta.series_id = series_id_from_path(mhd_path);
    let raw_path = raw_path_for(mhd_path, &meta);
    let bytes = fs::read(&raw_path).map_err(|e| Error::file(&raw_path, e))?;
    load_raw_volume(&meta, &bytes)
}

/// Writes `<dir>/<series>.mhd` and its data file; returns the header path.
pub fn write_scan(volume: &Volume, dir: &Path) -> Result<PathBuf> {
    let mhd_path = dir.join(format!("{}.mhd", volume.meta.series_id));
    fs::write(&mhd_path, format_mhd_header(&volume.meta)).map_err(|e| Error::file(&mhd_path, e))?;
    let raw_path = raw_path_for(&mhd_path, &volume.meta);
    fs::write(&raw_path, encode_raw(volume)).map_err(|e| Error::file(&raw_path, e))?;
    Ok(mhd_path)
}

fn raw_path_for(mhd_path: &Path, meta: &ScanMeta) -> PathBuf {
    mhd_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&meta.raw_path)
}

pub fn series_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl fmt::Display for NoduleCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoduleCategory::SmallNodule => "small_nodule",
            NoduleCategory::LargeNodule => "large_nodule",
            NoduleCategory::NonNodule => "non_nodule",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta(dims: [usize; 3], et: ElementType) -> ScanMeta {
        ScanMeta {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            element_type: et,
            little_endian: true,
            raw_path: "x.raw".into(),
            series_id: "x".into(),
        }
    }

    #[test]
    fn parses_lidc_style_header() {
        let text = "ObjectType = Image\nNDims = 3\nBinaryData = True\n\
                    BinaryDataByteOrderMSB = False\nTransformMatrix = 1 0 0 0 1 0 0 0 1\n\
                    Offset = -100 -100 -100\nElementSpacing = 0.7 0.7 2.5\n\
                    DimSize = 512 512 120\nElementType = MET_SHORT\nElementDataFile = s1.raw\n";
        let m = parse_mhd_header(text).unwrap();
        assert_eq!(m.dims, [512, 512, 120]);
        assert_eq!(m.spacing, [0.7, 0.7, 2.5]);
        assert_eq!(m.origin, [-100.0, -100.0, -100.0]);
        assert_eq!(m.element_type, ElementType::Int16);
        assert!(m.little_endian);
        assert_eq!(m.raw_path, "s1.raw");
    }

    #[test]
    fn header_defaults_and_key_order() {
        let text = "  ElementDataFile=a.raw\nElementType   =   MET_UCHAR \n DimSize = 2 3 4\n\
                    ElementSpacing = 1 1 1\nNDims = 3\n";
        let m = parse_mhd_header(text).unwrap();
        assert_eq!(m.origin, [0.0; 3]);
        assert!(m.little_endian);
        assert_eq!(m.dims, [2, 3, 4]);
    }

    #[test]
    fn header_errors() {
        let base = "NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nElementType = MET_SHORT\nElementDataFile = a.raw\n";
        assert!(matches!(
            parse_mhd_header(&base.replace("NDims = 3", "NDims = 2")),
            Err(Error::UnsupportedField(_))
        ));
        assert!(matches!(
            parse_mhd_header(&base.replace("MET_SHORT", "MET_DOUBLE")),
            Err(Error::UnsupportedField(_))
        ));
        assert!(matches!(
            parse_mhd_header(&format!("{base}garbage line\n")),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_mhd_header(&base.replace("2 2 2", "2 x 2")),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_mhd_header(&base.replace("1 1 1", "1 0 1")),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_mhd_header(&base.replace("a.raw", "LOCAL")),
            Err(Error::UnsupportedField(_))
        ));
        assert!(matches!(
            parse_mhd_header(&base.replace("ElementDataFile = a.raw\n", "")),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn decodes_int16_twos_complement() {
        let m = meta([2, 1, 1], ElementType::Int16);
        let v = load_raw_volume(&m, &[0x01, 0x00, 0xFF, 0xFF]).unwrap();
        assert_eq!(v.voxels(), &[1.0, -1.0]);
        assert!(matches!(
            load_raw_volume(&m, &[0x01, 0x00, 0xFF]),
            Err(Error::SizeMismatch {
                expected: 4,
                actual: 3
            })
        ));
    }

    #[test]
    fn big_endian_decoding() {
        let mut m = meta([1, 1, 1], ElementType::Int16);
        m.little_endian = false;
        let v = load_raw_volume(&m, &[0x01, 0x00]).unwrap();
        assert_eq!(v.voxels(), &[256.0]);
    }

    #[test]
    fn rejects_non_finite_floats() {
        let m = meta([1, 1, 1], ElementType::Float32);
        assert!(matches!(
            load_raw_volume(&m, &f32::NAN.to_le_bytes()),
            Err(Error::DecodeError(_))
        ));
    }

    #[test]
    fn annotation_categories() {
        let text = "seriesuid,coordX,coordY,coordZ,diameter_mm\n\
                    s1,-65.0,-30.0,-75.0,8.2\n\
                    s1,1,2,3,-1\n\
                    s2,1,2,3,5.999\n\
                    s2,1,2,3,6.0\n\
                    s2,1,2,3,6.001\n";
        let a = parse_annotations(text).unwrap();
        assert_eq!(a[0].center_world, [-65.0, -30.0, -75.0]);
        assert_eq!(a[0].diameter_mm, 8.2);
        assert_eq!(a[0].category, NoduleCategory::LargeNodule);
        assert_eq!(a[1].category, NoduleCategory::NonNodule);
        assert_eq!(a[1].diameter_mm, 0.0);
        assert_eq!(a[2].category, NoduleCategory::SmallNodule);
        assert_eq!(a[3].category, NoduleCategory::LargeNodule);
        assert_eq!(a[4].category, NoduleCategory::LargeNodule);
        assert_eq!(parse_annotations(&format_annotations(&a)).unwrap(), a);
    }

    #[test]
    fn malformed_annotation_rows() {
        let h = "seriesuid,coordX,coordY,coordZ,diameter_mm\n";
        assert!(matches!(
            parse_annotations(&format!("{h}s1,a,b,c,1\n")),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        assert!(matches!(
            parse_annotations(&format!("{h}s1,1,2,3\n")),
            Err(Error::MalformedRow { .. })
        ));
        assert!(matches!(
            parse_annotations("id,x,y,z,d\n"),
            Err(Error::MalformedRow { line: 1, .. })
        ));
    }

    #[test]
    fn world_voxel_arithmetic() {
        let mut m = meta([512, 512, 120], ElementType::Int16);
        m.origin = [-100.0; 3];
        m.spacing = [0.7, 0.7, 2.5];
        let v = world_to_voxel(&m, [-65.0, -30.0, -75.0]);
        for (got, want) in v.iter().zip([50.0, 100.0, 10.0]) {
            assert!((got - want).abs() < 1e-9, "{v:?}");
        }
        assert_eq!(world_to_voxel(&m, m.origin), [0.0; 3]);
    }

    #[test]
    fn crop_cube_is_x_fastest() {
        let m = meta([3, 3, 3], ElementType::Float32);
        let v = Volume::new(m, (0..27).map(|i| i as f32).collect()).unwrap();
        let c = v.crop_cube([1, 1, 1], 2);
        assert_eq!(c, vec![13.0, 14.0, 16.0, 17.0, 22.0, 23.0, 25.0, 26.0]);
    }

    proptest! {
        #[test]
        fn world_voxel_round_trip(
            origin in prop::array::uniform3(-500.0f64..500.0),
            spacing in prop::array::uniform3(1e-3f64..10.0),
            p in prop::array::uniform3(-1000.0f64..1000.0),
        ) {
            let mut m = meta([1, 1, 1], ElementType::Int16);
            m.origin = origin;
            m.spacing = spacing;
            let back = voxel_to_world(&m, world_to_voxel(&m, p));
            for i in 0..3 {
                let scale = p[i].abs().max(origin[i].abs()).max(1.0);
                prop_assert!((back[i] - p[i]).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn raw_round_trip(
            et in prop_oneof![Just(ElementType::Int16), Just(ElementType::UInt8), Just(ElementType::Float32)],
            le in any::<bool>(),
            dims in prop::array::uniform3(1usize..5),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut m = meta(dims, et);
            m.little_endian = le;
            let mut bytes = vec![0u8; m.raw_len()];
            rng.fill(bytes.as_mut_slice());
            if et == ElementType::Float32 {
                for c in bytes.chunks_exact_mut(4) {
                    let v: f32 = rng.gen_range(-3000.0..3000.0);
                    c.copy_from_slice(&if le { v.to_le_bytes() } else { v.to_be_bytes() });
                }
            }
            let v = load_raw_volume(&m, &bytes).unwrap();
            prop_assert_eq!(encode_raw(&v), bytes);
        }

        #[test]
        fn header_round_trip(
            dims in prop::array::uniform3(1usize..1000),
            spacing in prop::array::uniform3(0.01f64..5.0),
            origin in prop::array::uniform3(-400.0f64..400.0),
        ) {
            let mut m = meta(dims, ElementType::Int16);
            m.spacing = spacing;
            m.origin = origin;
            m.series_id = String::new();
            prop_assert_eq!(parse_mhd_header(&format_mhd_header(&m)).unwrap(), m);
        }
    }
}
