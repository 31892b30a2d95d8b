//! Tile planning over a low-magnification tissue/pen segmentation map.
//!
//! Tiles are non-overlapping squares anchored at the slide origin. One
//! tile of `tile_size` pixels at the target magnification covers
//! `tile_size / scale` mask pixels per side, where
//! `scale = target_magnification / mask_magnification` must be an
//! integer. Coverage is counted over the full nominal footprint; mask
//! area past the map edge counts as background. Fractions are exact
//! rationals so the inclusion threshold is compared without rounding.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use num_rational::Ratio;
use thiserror::Error;

pub type Fraction = Ratio<u64>;

#[derive(Debug, Error)]
pub enum TessellationError {
    #[error("size error: {0}")]
    Size(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("tile ({grid_x}, {grid_y}) lies entirely outside the {width}x{height} mask")]
    Bounds { grid_x: u32, grid_y: u32, width: u32, height: u32 },
    #[error("format error: {0}")]
    Format(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TessellationError> = std::result::Result<T, E>;

/// Tissue and pen bitplanes at mask magnification.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    width: u32,
    height: u32,
    mask_magnification: f64,
    tissue: Vec<bool>,
    pen: Vec<bool>,
}

impl SegmentationMap {
    pub fn new(width: u32, height: u32, mask_magnification: f64, tissue: Vec<bool>, pen: Vec<bool>) -> Result<Self> {
        let n = width as usize * height as usize;
        if n == 0 {
            return Err(TessellationError::Size("segmentation map is empty".into()));
        }
        if tissue.len() != n || pen.len() != n {
            return Err(TessellationError::Size(format!(
                "bitplanes have {} / {} entries, expected {n}",
                tissue.len(),
                pen.len()
            )));
        }
        if !(mask_magnification > 0.0 && mask_magnification.is_finite()) {
            return Err(TessellationError::Config(format!("mask magnification {mask_magnification} must be > 0")));
        }
        Ok(Self { width, height, mask_magnification, tissue, pen })
    }

    /// From a label image: 0 = background, 1 = tissue, 2 = pen.
    pub fn from_labels(width: u32, height: u32, mask_magnification: f64, labels: &[u8]) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&v| v > 2) {
            return Err(TessellationError::Format(format!("mask value {bad} is not one of 0, 1, 2")));
        }
        let tissue = labels.iter().map(|&v| v == 1).collect();
        let pen = labels.iter().map(|&v| v == 2).collect();
        Self::new(width, height, mask_magnification, tissue, pen)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn mask_magnification(&self) -> f64 {
        self.mask_magnification
    }

    #[inline]
    pub fn tissue_at(&self, x: u32, y: u32) -> bool {
        self.tissue[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn pen_at(&self, x: u32, y: u32) -> bool {
        self.pen[y as usize * self.width as usize + x as usize]
    }

    pub fn tissue_fraction(&self) -> Fraction {
        let count = self.tissue.iter().filter(|&&b| b).count() as u64;
        Fraction::new(count, self.tissue.len() as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileParams {
    pub tile_size: u32,
    pub target_magnification: f64,
    pub min_coverage: Fraction,
}

impl Default for TileParams {
    fn default() -> Self {
        Self { tile_size: 4096, target_magnification: 20.0, min_coverage: Fraction::new(5, 100) }
    }
}

impl TileParams {
    fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(TessellationError::Config("tile_size must be > 0".into()));
        }
        if self.min_coverage == Fraction::from_integer(0) || self.min_coverage > Fraction::from_integer(1) {
            return Err(TessellationError::Config(format!("min_coverage {} not in (0, 1]", self.min_coverage)));
        }
        Ok(())
    }

    /// Integer magnification ratio between target and mask frames.
    pub fn scale(&self, map: &SegmentationMap) -> Result<u32> {
        let ratio = self.target_magnification / map.mask_magnification;
        let rounded = ratio.round();
        if !ratio.is_finite() || rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * ratio {
            return Err(TessellationError::Config(format!(
                "magnification ratio {} / {} is not a positive integer",
                self.target_magnification, map.mask_magnification
            )));
        }
        Ok(rounded as u32)
    }

    /// Side length of one tile in mask pixels.
    pub fn footprint(&self, map: &SegmentationMap) -> Result<u32> {
        self.validate()?;
        let scale = self.scale(map)?;
        if self.tile_size % scale != 0 {
            return Err(TessellationError::Config(format!(
                "tile_size {} is not divisible by the magnification ratio {scale}",
                self.tile_size
            )));
        }
        Ok(self.tile_size / scale)
    }
}

/// Parses `0.05`, `5e-2`-free decimals or `p/q` into an exact fraction.
pub fn parse_fraction(text: &str) -> Result<Fraction> {
    let t = text.trim();
    let bad = || TessellationError::Config(format!("cannot parse {text:?} as a fraction"));
    if let Some((num, den)) = t.split_once('/') {
        let num: u64 = num.trim().parse().map_err(|_| bad())?;
        let den: u64 = den.trim().parse().map_err(|_| bad())?;
        if den == 0 {
            return Err(bad());
        }
        return Ok(Fraction::new(num, den));
    }
    let (int, frac) = t.split_once('.').unwrap_or((t, ""));
    if (int.is_empty() && frac.is_empty()) || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 18 {
        return Err(bad());
    }
    let den = 10u64.pow(frac.len() as u32);
    let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
    let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    let num = int.checked_mul(den).and_then(|v| v.checked_add(frac_v)).ok_or_else(bad)?;
    Ok(Fraction::new(num, den))
}

/// Stand-in segmentation: pixels darker than `threshold` are tissue.
pub fn threshold_segment(image: &GrayImage, threshold: u8, mask_magnification: f64) -> Result<SegmentationMap> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(TessellationError::Size("image is empty".into()));
    }
    let tissue: Vec<bool> = image.as_raw().iter().map(|&p| p < threshold).collect();
    let pen = vec![false; tissue.len()];
    SegmentationMap::new(w, h, mask_magnification, tissue, pen)
}

/// Exact (tissue, pen) fractions of one tile's nominal footprint.
pub fn tile_coverage(map: &SegmentationMap, params: &TileParams, grid_x: u32, grid_y: u32) -> Result<(Fraction, Fraction)> {
    let fp = params.footprint(map)?;
    let counter = CoverageCounter::new(map);
    counter.coverage(fp, grid_x, grid_y)
}

/// Summed-area tables over both bitplanes.
struct CoverageCounter<'a> {
    map: &'a SegmentationMap,
    tissue: Vec<u64>,
    pen: Vec<u64>,
}

impl<'a> CoverageCounter<'a> {
    fn new(map: &'a SegmentationMap) -> Self {
        let (w, h) = (map.width as usize, map.height as usize);
        let mut tissue = vec![0u64; (w + 1) * (h + 1)];
        let mut pen = vec![0u64; (w + 1) * (h + 1)];
        for y in 0..h {
            let (mut row_t, mut row_p) = (0u64, 0u64);
            for x in 0..w {
                row_t += map.tissue[y * w + x] as u64;
                row_p += map.pen[y * w + x] as u64;
                let i = (y + 1) * (w + 1) + x + 1;
                tissue[i] = tissue[i - (w + 1)] + row_t;
                pen[i] = pen[i - (w + 1)] + row_p;
            }
        }
        Self { map, tissue, pen }
    }

    fn rect_sum(table: &[u64], stride: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> u64 {
        table[y1 * stride + x1] + table[y0 * stride + x0] - table[y0 * stride + x1] - table[y1 * stride + x0]
    }

    fn coverage(&self, fp: u32, grid_x: u32, grid_y: u32) -> Result<(Fraction, Fraction)> {
        let (w, h) = (self.map.width as u64, self.map.height as u64);
        let (x0, y0) = (grid_x as u64 * fp as u64, grid_y as u64 * fp as u64);
        if x0 >= w || y0 >= h {
            return Err(TessellationError::Bounds { grid_x, grid_y, width: self.map.width, height: self.map.height });
        }
        let (x1, y1) = ((x0 + fp as u64).min(w), (y0 + fp as u64).min(h));
        let stride = w as usize + 1;
        let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
        let tissue = Self::rect_sum(&self.tissue, stride, x0, y0, x1, y1);
        let pen = Self::rect_sum(&self.pen, stride, x0, y0, x1, y1);
        let area = fp as u64 * fp as u64;
        Ok((Fraction::new(tissue, area), Fraction::new(pen, area)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TileStatus {
    Included,
    ExcludedLowCoverage,
    ExcludedPen,
}

impl TileStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TileStatus::Included => "included",
            TileStatus::ExcludedLowCoverage => "excluded_low_coverage",
            TileStatus::ExcludedPen => "excluded_pen",
        }
    }

    /// Pen overlap excludes a tile regardless of coverage and takes
    /// precedence when both exclusion reasons apply.
    pub fn classify(coverage: Fraction, pen: Fraction, min_coverage: Fraction) -> Self {
        if pen > Fraction::from_integer(0) {
            TileStatus::ExcludedPen
        } else if coverage >= min_coverage {
            TileStatus::Included
        } else {
            TileStatus::ExcludedLowCoverage
        }
    }
}

impl fmt::Display for TileStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedTile {
    pub grid_x: u32,
    pub grid_y: u32,
    pub coverage: Fraction,
    pub pen: Fraction,
    pub status: TileStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub slide_id: String,
    pub tiles: Vec<PlannedTile>,
}

impl TilePlan {
    pub fn included(&self) -> impl Iterator<Item = &PlannedTile> {
        self.tiles.iter().filter(|t| t.status == TileStatus::Included)
    }

    /// CSV `slide_id,grid_x,grid_y,coverage,status`, optionally preceded
    /// by `#` comment lines.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str("slide_id,grid_x,grid_y,coverage,status\n");
        for t in &self.tiles {
            let cov = *t.coverage.numer() as f64 / *t.coverage.denom() as f64;
            out.push_str(&format!("{},{},{},{},{}\n", self.slide_id, t.grid_x, t.grid_y, cov, t.status));
        }
        out
    }
}

/// Plans the tile grid for a slide of `extent = (width, height)` pixels at
/// the target magnification. Tiles are emitted row-major (y, then x).
pub fn tessellate(slide_id: &str, map: &SegmentationMap, extent: (u64, u64), params: &TileParams) -> Result<TilePlan> {
    let fp = params.footprint(map)?;
    let (w, h) = extent;
    if w == 0 || h == 0 {
        return Err(TessellationError::Size("slide extent is empty".into()));
    }
    let ts = params.tile_size as u64;
    let (cols, rows) = (w.div_ceil(ts), h.div_ceil(ts));
    if cols > u32::MAX as u64 || rows > u32::MAX as u64 {
        return Err(TessellationError::Size("tile grid exceeds u32 coordinates".into()));
    }
    let counter = CoverageCounter::new(map);
    let mut tiles = Vec::with_capacity((cols * rows) as usize);
    for gy in 0..rows as u32 {
        for gx in 0..cols as u32 {
            let (coverage, pen) = counter.coverage(fp, gx, gy).map_err(|e| match e {
                TessellationError::Bounds { .. } => TessellationError::Config(format!(
                    "slide extent {w}x{h} does not match the {}x{} mask at scale {}: {e}",
                    map.width,
                    map.height,
                    params.tile_size / fp
                )),
                other => other,
            })?;
            let status = TileStatus::classify(coverage, pen, params.min_coverage);
            tiles.push(PlannedTile { grid_x: gx, grid_y: gy, coverage, pen, status });
        }
    }
    Ok(TilePlan { slide_id: slide_id.to_string(), tiles })
}

/// Sidecar header path for a mask PNG: `<mask>.header`.
pub fn sidecar_path(mask: &Path) -> PathBuf {
    let mut s = mask.as_os_str().to_owned();
    s.push(".header");
    PathBuf::from(s)
}

/// Reads an 8-bit label PNG (0 background, 1 tissue, 2 pen) and its
/// `key=value` sidecar, which must define `mask_magnification`.
pub fn read_mask(path: impl AsRef<Path>) -> Result<SegmentationMap> {
    let path = path.as_ref();
    let header = sidecar_path(path);
    let text = fs::read_to_string(&header).map_err(|e| TessellationError::Io { path: header.clone(), source: e })?;
    let mut magnification = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TessellationError::Format(format!("{}: expected key=value, got {line:?}", header.display())))?;
        if k.trim() == "mask_magnification" {
            magnification = Some(v.trim().parse::<f64>().map_err(|_| {
                TessellationError::Format(format!("{}: bad mask_magnification {v:?}", header.display()))
            })?);
        }
    }
    let magnification = magnification
        .ok_or_else(|| TessellationError::Format(format!("{}: mask_magnification missing", header.display())))?;
    let bytes = fs::read(path).map_err(|e| TessellationError::Io { path: path.to_path_buf(), source: e })?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| TessellationError::Format(format!("{}: {e}", path.display())))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        _ => return Err(TessellationError::Format(format!("{}: mask must be 8-bit grayscale", path.display()))),
    };
    let (w, h) = img.dimensions();
    SegmentationMap::from_labels(w, h, magnification, img.as_raw())
}

/// Writes a label PNG plus its sidecar header.
pub fn write_mask(path: impl AsRef<Path>, map: &SegmentationMap) -> Result<()> {
    let path = path.as_ref();
    let labels: Vec<u8> = map
        .tissue
        .iter()
        .zip(&map.pen)
        .map(|(&t, &p)| if p { 2 } else { t as u8 })
        .collect();
    let img = GrayImage::from_raw(map.width, map.height, labels).expect("dimensions match");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| TessellationError::Format(format!("{}: {e}", path.display())))?;
    let header = sidecar_path(path);
    fs::write(&header, format!("mask_magnification={}\n", map.mask_magnification))
        .map_err(|e| TessellationError::Io { path: header, source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;
    use proptest::prelude::*;

    fn map_with(width: u32, height: u32, mut tissue: impl FnMut(u32, u32) -> bool, mut pen: impl FnMut(u32, u32) -> bool) -> SegmentationMap {
        let mut t = Vec::new();
        let mut p = Vec::new();
        for y in 0..height {
            for x in 0..width {
                t.push(tissue(x, y));
                p.push(pen(x, y));
            }
        }
        SegmentationMap::new(width, height, 1.25, t, p).unwrap()
    }

    /// Independent per-tile recount by direct iteration.
    fn brute_status(map: &SegmentationMap, params: &TileParams, gx: u32, gy: u32) -> (u64, u64, TileStatus) {
        let fp = params.tile_size / 16;
        let (mut t, mut p) = (0u64, 0u64);
        for y in gy * fp..(gy + 1) * fp {
            for x in gx * fp..(gx + 1) * fp {
                if x < map.width() && y < map.height() {
                    t += map.tissue_at(x, y) as u64;
                    p += map.pen_at(x, y) as u64;
                }
            }
        }
        let area = (fp as u64).pow(2);
        // cross-multiplied integer comparison against min_coverage
        let min = params.min_coverage;
        let status = if p > 0 {
            TileStatus::ExcludedPen
        } else if t * min.denom() >= min.numer() * area {
            TileStatus::Included
        } else {
            TileStatus::ExcludedLowCoverage
        };
        (t, p, status)
    }

    #[test]
    fn threshold_semantics() {
        let white = GrayImage::from_pixel(8, 8, Luma([255]));
        let map = threshold_segment(&white, 200, 1.25).unwrap();
        assert_eq!(map.tissue_fraction(), Fraction::from_integer(0));
        let black = GrayImage::from_pixel(8, 8, Luma([0]));
        assert_eq!(threshold_segment(&black, 200, 1.25).unwrap().tissue_fraction(), Fraction::from_integer(1));
        let half = GrayImage::from_fn(10, 6, |x, _| Luma([if x < 5 { 0 } else { 255 }]));
        assert_eq!(threshold_segment(&half, 200, 1.25).unwrap().tissue_fraction(), Fraction::new(1, 2));
        let empty = GrayImage::new(0, 0);
        assert!(matches!(threshold_segment(&empty, 200, 1.25), Err(TessellationError::Size(_))));
    }

    fn region_with_bits(bits: usize) -> SegmentationMap {
        map_with(256, 256, |x, y| ((y * 256 + x) as usize) < bits, |_, _| false)
    }

    #[test]
    fn five_percent_boundary_is_exact() {
        let params = TileParams::default();
        let (cov, _) = tile_coverage(&region_with_bits(3277), &params, 0, 0).unwrap();
        assert_eq!(cov, Fraction::new(3277, 65536));
        assert!(cov >= params.min_coverage);
        let (cov, _) = tile_coverage(&region_with_bits(3276), &params, 0, 0).unwrap();
        assert!(cov < params.min_coverage);
        let (cov, _) = tile_coverage(&region_with_bits(65536), &params, 0, 0).unwrap();
        assert_eq!(cov, Fraction::from_integer(1));
        let plan = tessellate("s", &region_with_bits(3277), (4096, 4096), &params).unwrap();
        assert_eq!(plan.tiles[0].status, TileStatus::Included);
        let plan = tessellate("s", &region_with_bits(3276), (4096, 4096), &params).unwrap();
        assert_eq!(plan.tiles[0].status, TileStatus::ExcludedLowCoverage);
    }

    #[test]
    fn tile_outside_map_is_bounds_error() {
        let map = region_with_bits(10);
        assert!(matches!(
            tile_coverage(&map, &TileParams::default(), 1, 0),
            Err(TessellationError::Bounds { .. })
        ));
    }

    #[test]
    fn full_tissue_grid() {
        let map = map_with(512, 512, |_, _| true, |_, _| false);
        let plan = tessellate("s", &map, (8192, 8192), &TileParams::default()).unwrap();
        assert_eq!(plan.tiles.len(), 4);
        assert!(plan.tiles.iter().all(|t| t.status == TileStatus::Included));
        let order: Vec<(u32, u32)> = plan.tiles.iter().map(|t| (t.grid_y, t.grid_x)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn top_left_quadrant_only() {
        let map = map_with(512, 512, |x, y| x < 256 && y < 256, |_, _| false);
        let plan = tessellate("s", &map, (8192, 8192), &TileParams::default()).unwrap();
        let statuses: Vec<TileStatus> = plan.tiles.iter().map(|t| t.status).collect();
        assert_eq!(
            statuses,
            vec![TileStatus::Included, TileStatus::ExcludedLowCoverage, TileStatus::ExcludedLowCoverage, TileStatus::ExcludedLowCoverage]
        );
    }

    #[test]
    fn pen_dominates_coverage() {
        let map = map_with(256, 256, |_, _| true, |x, y| x == 3 && y == 3);
        let plan = tessellate("s", &map, (4096, 4096), &TileParams::default()).unwrap();
        assert_eq!(plan.tiles[0].status, TileStatus::ExcludedPen);
        // pen on an otherwise empty tile is still reported as pen
        let map = map_with(256, 256, |_, _| false, |x, _| x == 0);
        let plan = tessellate("s", &map, (4096, 4096), &TileParams::default()).unwrap();
        assert_eq!(plan.tiles[0].status, TileStatus::ExcludedPen);
    }

    #[test]
    fn partial_edge_tiles_use_nominal_footprint() {
        // 300x100 mask, extent 4800x1600: right column is 44 px wide and
        // fully tissue, so coverage = 44*100 / 65536
        let map = map_with(300, 100, |_, _| true, |_, _| false);
        let plan = tessellate("s", &map, (4800, 1600), &TileParams::default()).unwrap();
        assert_eq!(plan.tiles.len(), 2);
        assert_eq!(plan.tiles[1].coverage, Fraction::new(44 * 100, 65536));
        assert_eq!(plan.tiles[1].status, TileStatus::Included);
    }

    #[test]
    fn magnification_ratio_must_be_integer() {
        let map = map_with(16, 16, |_, _| true, |_, _| false);
        let params = TileParams { target_magnification: 20.5, ..Default::default() };
        assert!(matches!(tessellate("s", &map, (4096, 4096), &params), Err(TessellationError::Config(_))));
        let params = TileParams { tile_size: 4095, ..Default::default() };
        assert!(matches!(tessellate("s", &map, (4095, 4095), &params), Err(TessellationError::Config(_))));
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!(parse_fraction("0.05").unwrap(), Fraction::new(1, 20));
        assert_eq!(parse_fraction("1").unwrap(), Fraction::from_integer(1));
        assert_eq!(parse_fraction("3/60").unwrap(), Fraction::new(1, 20));
        assert_eq!(parse_fraction(".5").unwrap(), Fraction::new(1, 2));
        assert!(parse_fraction("abc").is_err());
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("-0.1").is_err());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = map_with(40, 30, |x, y| (x + y) % 3 == 0, |x, y| x == y);
        let mut map = map;
        // tissue and pen are exclusive in label images
        for i in 0..map.tissue.len() {
            if map.pen[i] {
                map.tissue[i] = false;
            }
        }
        let path = dir.path().join("m.png");
        write_mask(&path, &map).unwrap();
        assert_eq!(read_mask(&path).unwrap(), map);
    }

    #[test]
    fn csv_is_deterministic() {
        let map = map_with(512, 300, |x, y| (x * y) % 7 == 0, |_, _| false);
        let a = tessellate("s1", &map, (8192, 4800), &TileParams::default()).unwrap();
        let b = tessellate("s1", &map, (8192, 4800), &TileParams::default()).unwrap();
        assert_eq!(a.to_csv(&[]), b.to_csv(&[]));
        assert!(a.to_csv(&[]).starts_with("slide_id,grid_x,grid_y,coverage,status\n"));
    }

    proptest! {
        #[test]
        fn statuses_match_bruteforce_recount(
            w in 1u32..700, h in 1u32..700, density in 0.0f64..0.2, pen_rate in 0.0f64..0.0002, seed in any::<u64>()
        ) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let map = map_with(w, h, |_, _| rng.random_bool(density), |_, _| false);
            let mut rng = crate::rng::seeded(seed ^ 1);
            let pen: Vec<bool> = (0..w * h).map(|_| rng.random_bool(pen_rate)).collect();
            let map = SegmentationMap::new(w, h, 1.25, map.tissue.clone(), pen).unwrap();
            let params = TileParams::default();
            let extent = (w as u64 * 16, h as u64 * 16);
            let plan = tessellate("s", &map, extent, &params).unwrap();
            prop_assert_eq!(plan.tiles.len() as u64, extent.0.div_ceil(4096) * extent.1.div_ceil(4096));
            for t in &plan.tiles {
                let (tissue, pen, status) = brute_status(&map, &params, t.grid_x, t.grid_y);
                prop_assert_eq!(t.coverage, Fraction::new(tissue, 65536));
                prop_assert_eq!(t.pen, Fraction::new(pen, 65536));
                prop_assert_eq!(t.status, status);
            }
        }

        #[test]
        fn raising_threshold_never_includes_more(
            w in 1u32..600, h in 1u32..600, density in 0.0f64..0.15, seed in any::<u64>(), lo in 1u64..50, extra in 0u64..50
        ) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let map = map_with(w, h, |_, _| rng.random_bool(density), |_, _| false);
            let extent = (w as u64 * 16, h as u64 * 16);
            let p_lo = TileParams { min_coverage: Fraction::new(lo, 1000), ..Default::default() };
            let p_hi = TileParams { min_coverage: Fraction::new(lo + extra, 1000), ..Default::default() };
            let a = tessellate("s", &map, extent, &p_lo).unwrap();
            let b = tessellate("s", &map, extent, &p_hi).unwrap();
            for (x, y) in a.tiles.iter().zip(&b.tiles) {
                if x.status != TileStatus::Included {
                    prop_assert_ne!(y.status, TileStatus::Included);
                }
            }
        }
    }
}
