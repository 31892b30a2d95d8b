//! Case, slide and feature-bag data model.
//!
//! A case (specimen) owns one or more slides; each slide points at a
//! feature file and groups its tiles into cross-sections. The bag the
//! classifier sees is the concatenation of every listed tile across all
//! slides of the case, in manifest order.

mod features;
mod manifest;
mod split;
mod synthetic;

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub use features::{
    assemble_bag, decode_feature_file, SlideRefs, encode_feature_file, load_bag, read_feature_file,
    write_feature_file, TileFeatures, TileRecord, FEATURE_FILE_MAGIC, FEATURE_FILE_VERSION,
};
pub use manifest::{
    load_manifest, parse_manifest, render_manifest, write_manifest, MANIFEST_VERSION,
};
pub use split::{
    assign_folds, split_patients, PatientAssignment, SplitAssignment, SplitSet,
};
pub use synthetic::{
    generate_synthetic, read_oracle_scores, write_oracle_scores, OracleScore, SyntheticCohort,
    SyntheticConfig,
};

/// Tag carried by cases held out as out-of-distribution.
pub const OOD_TAG: &str = "out_of_distribution";
pub const IN_DISTRIBUTION_TAG: &str = "in_distribution";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in case {case_id}, field `{field}`: {message}")]
    Parse {
        case_id: String,
        field: String,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },
    #[error("size error: {0}")]
    Size(String),
    #[error("config error: {0}")]
    Config(String),
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Low,
    High,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Low => "low",
            Label::High => "high",
        }
    }

    /// Accepts `low`/`high` as well as `0`/`1`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "low" | "0" => Some(Label::Low),
            "high" | "1" => Some(Label::High),
            _ => None,
        }
    }

    #[inline]
    pub fn is_high(self) -> bool {
        self == Label::High
    }

    /// Class index: low = 0, high = 1.
    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossSection {
    pub section_id: u16,
    pub tile_indices: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub feature_file: PathBuf,
    pub sections: Vec<CrossSection>,
}

impl SlideRecord {
    pub fn tile_count(&self) -> usize {
        self.sections.iter().map(|s| s.tile_indices.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub patient_id: String,
    pub label: Label,
    pub tags: BTreeSet<String>,
    pub slides: Vec<SlideRecord>,
}

impl CaseRecord {
    pub fn tile_count(&self) -> usize {
        self.slides.iter().map(SlideRecord::tile_count).sum()
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }
}

/// Where a bag row came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TileMeta {
    pub slide_id: String,
    pub section_id: u16,
    pub grid_x: u32,
    pub grid_y: u32,
}

/// One specimen's tile feature vectors, `n_tiles × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag<T> {
    case_id: String,
    vectors: Matrix<T>,
    tile_meta: Vec<TileMeta>,
}

impl<T: Scalar> FeatureBag<T> {
    pub fn new(case_id: impl Into<String>, vectors: Matrix<T>, tile_meta: Vec<TileMeta>) -> Result<Self> {
        let case_id = case_id.into();
        if vectors.rows() == 0 {
            return Err(DatasetError::Validation(format!("bag for case {case_id} has no tiles")));
        }
        if vectors.cols() == 0 {
            return Err(DatasetError::Validation(format!("bag for case {case_id} has zero feature dimension")));
        }
        if tile_meta.len() != vectors.rows() {
            return Err(DatasetError::Validation(format!(
                "bag for case {case_id}: {} metadata rows for {} vectors",
                tile_meta.len(),
                vectors.rows()
            )));
        }
        if let Some(pos) = vectors.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(DatasetError::Validation(format!(
                "bag for case {case_id}: non-finite value in tile {}",
                pos / vectors.cols()
            )));
        }
        Ok(Self { case_id, vectors, tile_meta })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn vectors(&self) -> &Matrix<T> {
        &self.vectors
    }

    pub fn tile_meta(&self) -> &[TileMeta] {
        &self.tile_meta
    }

    pub fn n_tiles(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Distinct (slide, section) units in first-appearance order.
    pub fn sections(&self) -> Vec<(String, u16)> {
        let mut seen = Vec::new();
        for m in &self.tile_meta {
            let key = (m.slide_id.clone(), m.section_id);
            if !seen.contains(&key) {
                seen.push(key);
            }
        }
        seen
    }

    /// Bag restricted to the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut meta = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.vectors.row(r));
            meta.push(self.tile_meta[r].clone());
        }
        Self::new(self.case_id.clone(), Matrix::from_vec(rows.len(), dim, data), meta)
    }

    pub fn cast<U: Scalar>(&self) -> FeatureBag<U> {
        let data = self.vectors.as_slice().iter().map(|x| U::of(x.to_f64_lossy())).collect();
        FeatureBag {
            case_id: self.case_id.clone(),
            vectors: Matrix::from_vec(self.n_tiles(), self.dim(), data),
            tile_meta: self.tile_meta.clone(),
        }
    }
}
