use bridgelab::data::{generate_sample, ClassName};
use bridgelab::regions::{
    cells_covering, exact_object_mask, freeform_mask, freeform_strokes, grid_aggregate,
    is_four_connected, threshold_region, AttributionMap,
};
use bridgelab::RegionMask;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(rng: &mut impl Rng, h: usize, w: usize) -> AttributionMap {
    AttributionMap::new(h, w, (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn ones_aggregate_to_cell_areas() {
    let map = AttributionMap::new(4, 4, vec![1.0; 16]).unwrap();
    let grid = grid_aggregate(&map, 2).unwrap();
    assert_eq!((grid.rows, grid.cols), (2, 2));
    assert_eq!(grid.values, vec![4.0; 4]);
}

#[test]
fn single_pixel_lights_one_cell() {
    let mut v = vec![0.0; 64];
    v[8 * 5 + 6] = -2.5;
    let grid = grid_aggregate(&AttributionMap::new(8, 8, v).unwrap(), 4).unwrap();
    assert_eq!(grid.values, vec![0.0, 0.0, 0.0, 2.5]);
}

#[test]
fn ragged_grid_pads_with_zeros() {
    let map = AttributionMap::new(5, 5, vec![1.0; 25]).unwrap();
    let grid = grid_aggregate(&map, 4).unwrap();
    assert_eq!(grid.values, vec![16.0, 4.0, 4.0, 1.0]);
    assert!(grid_aggregate(&map, 0).is_err());
}

proptest! {
    #[test]
    fn cells_partition_absolute_mass(seed in any::<u64>(), h in 1usize..20, w in 1usize..20, cell in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(&mut rng, h, w);
        let grid = grid_aggregate(&map, cell).unwrap();
        let abs: f64 = map.values.iter().map(|v| v.abs()).sum();
        prop_assert!((grid.total() - abs).abs() < 1e-9);
    }

    #[test]
    fn threshold_selects_k_cells(seed in any::<u64>(), a in 0.01f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(&mut rng, 32, 32);
        let grid = grid_aggregate(&map, 4).unwrap();
        let mask = threshold_region(&grid, a).unwrap();
        let k = ((a * 1024.0 / 16.0).floor() as usize).clamp(1, 64);
        prop_assert_eq!(mask.count(), k * 16);
        // Every selected cell outranks every unselected one.
        let chosen = cells_covering(&mask, 4);
        let lowest_in = chosen.iter().map(|&i| grid.values[i]).fold(f64::INFINITY, f64::min);
        for i in (0..64).filter(|i| !chosen.contains(i)) {
            prop_assert!(grid.values[i] <= lowest_in);
        }
    }
}

#[test]
fn quarter_area_on_two_by_two_cells_picks_one() {
    let map = AttributionMap::new(4, 4, (0..16).map(|i| i as f64).collect()).unwrap();
    let grid = grid_aggregate(&map, 2).unwrap();
    let mask = threshold_region(&grid, 0.25).unwrap();
    assert_eq!(mask.count(), 4);
    assert!(mask.get(3, 3));
}

#[test]
fn ties_go_to_row_major_order() {
    let grid = grid_aggregate(&AttributionMap::new(8, 8, vec![1.0; 64]).unwrap(), 4).unwrap();
    let mask = threshold_region(&grid, 0.5).unwrap();
    assert_eq!(mask, RegionMask::from_fn(8, 8, |y, _| y < 4));
    assert!(threshold_region(&grid, 0.0).is_err());
    assert!(threshold_region(&grid, 1.5).is_err());
}

#[test]
fn preset_c_selects_nineteen_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = grid_aggregate(&random_map(&mut rng, 32, 32), 4).unwrap();
    let mask = threshold_region(&grid, 0.3).unwrap();
    assert_eq!(mask.count(), 19 * 16);
    assert_eq!(mask.area_fraction(), 19.0 * 16.0 / 1024.0);
}

#[test]
fn freeform_areas_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for range in [(0.10, 0.20), (0.20, 0.30)] {
        for _ in 0..1000 {
            let area = freeform_mask(&mut rng, 32, 32, range)
                .unwrap()
                .area_fraction();
            assert!(
                area >= range.0 && area <= range.1,
                "{area} outside {range:?}"
            );
        }
    }
}

#[test]
fn freeform_strokes_are_connected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        for stroke in freeform_strokes(&mut rng, 32, 32, (0.1, 0.2)).unwrap() {
            assert!(!stroke.is_empty());
            assert!(is_four_connected(&stroke));
        }
    }
}

#[test]
fn freeform_is_seed_deterministic() {
    let a = freeform_mask(&mut ChaCha8Rng::seed_from_u64(9), 32, 32, (0.1, 0.2)).unwrap();
    let b = freeform_mask(&mut ChaCha8Rng::seed_from_u64(9), 32, 32, (0.1, 0.2)).unwrap();
    assert_eq!(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    assert!(freeform_mask(&mut rng, 32, 32, (0.3, 0.2)).is_err());
    assert!(freeform_mask(&mut rng, 32, 32, (0.0, 0.2)).is_err());
    assert!(freeform_mask(&mut rng, 32, 32, (0.999, 1.0)).is_err());
}

#[test]
fn connectivity_check() {
    assert!(is_four_connected(
        &RegionMask::from_fn(4, 4, |y, x| y == 1 || x == 2)
    ));
    assert!(!is_four_connected(&RegionMask::from_fn(4, 4, |y, x| y == x)));
}

#[test]
fn exact_masks_match_the_generator_disc() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let class = ClassName::ALL[i % ClassName::ALL.len()];
        let s = generate_sample(class, 0, &mut rng);
        let mask = exact_object_mask(Some(&s.geometry), 32, 32).unwrap();
        let g = &s.geometry;
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(mask.get(y, x), g.contains(y, x));
            }
        }
        assert_eq!(mask, s.object_mask());
        assert!(!mask.is_empty());
    }
    assert!(exact_object_mask(None, 32, 32).is_err());
}
