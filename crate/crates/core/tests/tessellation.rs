use proptest::prelude::*;
use triage_core::tessellation::{read_mask, tessellate, write_mask, Fraction, SegmentationMap, TileParams, TileStatus};

#[test]
fn mask_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<u8> = (0..35).map(|i| (i % 3) as u8).collect();
    let map = SegmentationMap::from_labels(7, 5, 1.25, &labels).unwrap();
    let path = dir.path().join("m.png");
    write_mask(&path, &map).unwrap();
    let back = read_mask(&path).unwrap();
    assert_eq!((back.width(), back.height(), back.mask_magnification()), (7, 5, 1.25));
    for y in 0..5 {
        for x in 0..7 {
            assert_eq!((back.tissue_at(x, y), back.pen_at(x, y)), (map.tissue_at(x, y), map.pen_at(x, y)));
        }
    }
}

#[test]
fn edge_tiles_count_missing_area_as_background() {
    // 6×6 mask of tissue, footprint 4: the right and bottom tiles are cut off
    let map = SegmentationMap::from_labels(6, 6, 1.25, &[1; 36]).unwrap();
    let params = TileParams { tile_size: 64, ..Default::default() };
    let plan = tessellate("s", &map, (96, 96), &params).unwrap();
    let cov: Vec<Fraction> = plan.tiles.iter().map(|t| t.coverage).collect();
    assert_eq!(cov, [Fraction::new(1, 1), Fraction::new(8, 16), Fraction::new(8, 16), Fraction::new(4, 16)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pen_always_excludes(w in 1u32..24, h in 1u32..24, px in 0u32..24, py in 0u32..24) {
        let (px, py) = (px % w, py % h);
        let mut labels = vec![1u8; (w * h) as usize];
        labels[(py * w + px) as usize] = 2;
        let map = SegmentationMap::from_labels(w, h, 1.25, &labels).unwrap();
        let params = TileParams { tile_size: 64, ..Default::default() };
        let plan = tessellate("s", &map, (w as u64 * 16, h as u64 * 16), &params).unwrap();
        let pen: Vec<_> = plan.tiles.iter().filter(|t| t.status == TileStatus::ExcludedPen).collect();
        prop_assert_eq!(pen.len(), 1);
        prop_assert_eq!((pen[0].grid_x, pen[0].grid_y), (px / 4, py / 4));
    }
}
