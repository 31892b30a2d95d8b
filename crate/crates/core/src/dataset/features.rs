//! Binary per-slide feature files.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! "FBAG" | u16 version | u32 n_tiles | u32 dim
//! n_tiles × { u32 grid_x | u32 grid_y | u16 section_id | u16 reserved(=0) | dim × f32 }
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{CaseRecord, DatasetError, FeatureBag, Result, TileMeta};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const FEATURE_FILE_MAGIC: &[u8; 4] = b"FBAG";
pub const FEATURE_FILE_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4 + 4;
const RECORD_META_LEN: usize = 4 + 4 + 2 + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileRecord {
    pub grid_x: u32,
    pub grid_y: u32,
    pub section_id: u16,
}

/// Contents of one feature file: every encoded tile of a slide.
#[derive(Clone, Debug, PartialEq)]
pub struct TileFeatures {
    dim: usize,
    tiles: Vec<TileRecord>,
    values: Vec<f32>,
}

impl TileFeatures {
    pub fn new(dim: usize, tiles: Vec<TileRecord>, values: Vec<f32>) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(DatasetError::Validation(format!("invalid feature dimension {dim}")));
        }
        if values.len() != tiles.len() * dim {
            return Err(DatasetError::Validation(format!(
                "{} values for {} tiles of dimension {dim}",
                values.len(),
                tiles.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::Validation(format!("non-finite value in tile {}", pos / dim)));
        }
        Ok(Self { dim, tiles, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn tiles(&self) -> &[TileRecord] {
        &self.tiles
    }

    pub fn vector(&self, index: usize) -> &[f32] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }
}

pub fn encode_feature_file(features: &TileFeatures) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + features.n_tiles() * (RECORD_META_LEN + 4 * features.dim));
    out.extend_from_slice(FEATURE_FILE_MAGIC);
    // writes into a Vec cannot fail
    out.write_u16::<LittleEndian>(FEATURE_FILE_VERSION).unwrap();
    out.write_u32::<LittleEndian>(features.n_tiles() as u32).unwrap();
    out.write_u32::<LittleEndian>(features.dim as u32).unwrap();
    for (i, tile) in features.tiles.iter().enumerate() {
        out.write_u32::<LittleEndian>(tile.grid_x).unwrap();
        out.write_u32::<LittleEndian>(tile.grid_y).unwrap();
        out.write_u16::<LittleEndian>(tile.section_id).unwrap();
        out.write_u16::<LittleEndian>(0).unwrap();
        for &v in features.vector(i) {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn decode_feature_file(bytes: &[u8]) -> Result<TileFeatures> {
    if bytes.len() < HEADER_LEN {
        return Err(DatasetError::Length { expected: HEADER_LEN, actual: bytes.len() });
    }
    if &bytes[..4] != FEATURE_FILE_MAGIC {
        return Err(DatasetError::Format("bad magic, expected FBAG".into()));
    }
    let mut cur = Cursor::new(&bytes[4..]);
    let version = cur.read_u16::<LittleEndian>().unwrap();
    if version != FEATURE_FILE_VERSION {
        return Err(DatasetError::Format(format!("unsupported feature file version {version}")));
    }
    let n_tiles = cur.read_u32::<LittleEndian>().unwrap() as usize;
    let dim = cur.read_u32::<LittleEndian>().unwrap() as usize;
    if dim == 0 {
        return Err(DatasetError::Format("feature dimension is zero".into()));
    }
    let expected = HEADER_LEN + n_tiles * (RECORD_META_LEN + 4 * dim);
    if bytes.len() != expected {
        return Err(DatasetError::Length { expected, actual: bytes.len() });
    }
    let mut tiles = Vec::with_capacity(n_tiles);
    let mut values = Vec::with_capacity(n_tiles * dim);
    let mut buf = vec![0f32; dim];
    for i in 0..n_tiles {
        let grid_x = cur.read_u32::<LittleEndian>().unwrap();
        let grid_y = cur.read_u32::<LittleEndian>().unwrap();
        let section_id = cur.read_u16::<LittleEndian>().unwrap();
        let reserved = cur.read_u16::<LittleEndian>().unwrap();
        if reserved != 0 {
            return Err(DatasetError::Format(format!("tile {i}: reserved field is {reserved}, expected 0")));
        }
        cur.read_f32_into::<LittleEndian>(&mut buf).unwrap();
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Validation(format!("tile {i}: non-finite feature value")));
        }
        tiles.push(TileRecord { grid_x, grid_y, section_id });
        values.extend_from_slice(&buf);
    }
    debug_assert!(cur.read(&mut [0u8]).map(|n| n == 0).unwrap_or(true));
    Ok(TileFeatures { dim, tiles, values })
}

pub fn write_feature_file(path: impl AsRef<Path>, features: &TileFeatures) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
        }
    }
    fs::write(path, encode_feature_file(features)).map_err(|e| DatasetError::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<TileFeatures> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    decode_feature_file(&bytes)
}

/// Builds a case's bag by walking slides → sections → tile indices.
/// `lookup` returns the feature file contents for a slide; it is only
/// called for slides that list at least one tile.
pub fn assemble_bag<'a, T, F>(case: &CaseRecord, mut lookup: F) -> Result<FeatureBag<T>>
where
    T: Scalar,
    F: FnMut(&SlideRefs<'_>) -> Result<&'a TileFeatures>,
{
    let mut data: Vec<T> = Vec::new();
    let mut meta = Vec::new();
    let mut dim: Option<usize> = None;
    for slide in &case.slides {
        if slide.tile_count() == 0 {
            continue;
        }
        let features = lookup(&SlideRefs { slide_id: &slide.slide_id, feature_file: &slide.feature_file })?;
        match dim {
            None => dim = Some(features.dim()),
            Some(d) if d != features.dim() => {
                return Err(DatasetError::Validation(format!(
                    "case {}: slide {} has dimension {}, expected {d}",
                    case.case_id,
                    slide.slide_id,
                    features.dim()
                )))
            }
            _ => {}
        }
        for section in &slide.sections {
            for &idx in &section.tile_indices {
                let idx = idx as usize;
                let tile = features.tiles().get(idx).ok_or_else(|| {
                    DatasetError::Validation(format!(
                        "case {}: slide {} tile index {idx} out of range ({} tiles)",
                        case.case_id,
                        slide.slide_id,
                        features.n_tiles()
                    ))
                })?;
                if tile.section_id != section.section_id {
                    return Err(DatasetError::Validation(format!(
                        "case {}: slide {} tile {idx} belongs to section {} in the feature file, manifest says {}",
                        case.case_id, slide.slide_id, tile.section_id, section.section_id
                    )));
                }
                data.extend(features.vector(idx).iter().map(|&v| T::of(v as f64)));
                meta.push(TileMeta {
                    slide_id: slide.slide_id.clone(),
                    section_id: section.section_id,
                    grid_x: tile.grid_x,
                    grid_y: tile.grid_y,
                });
            }
        }
    }
    let dim = dim.ok_or_else(|| DatasetError::Validation(format!("case {} lists no tiles", case.case_id)))?;
    let n = meta.len();
    FeatureBag::new(case.case_id.clone(), Matrix::from_vec(n, dim, data), meta)
}

pub struct SlideRefs<'a> {
    pub slide_id: &'a str,
    pub feature_file: &'a Path,
}

/// Loads a case's bag from disk; `feature_file` paths are resolved
/// against `base_dir` (normally the manifest's directory).
pub fn load_bag<T: Scalar>(case: &CaseRecord, base_dir: &Path) -> Result<FeatureBag<T>> {
    let mut cache: HashMap<PathBuf, TileFeatures> = HashMap::new();
    for slide in &case.slides {
        if slide.tile_count() == 0 {
            continue;
        }
        let path = base_dir.join(&slide.feature_file);
        if !cache.contains_key(&path) {
            let features = read_feature_file(&path)?;
            cache.insert(path, features);
        }
    }
    assemble_bag(case, |slide| {
        let path = base_dir.join(slide.feature_file);
        Ok(cache.get(&path).expect("feature file loaded above"))
    })
}
