use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::{AttributionMap, RegionMask};

/// Per-cell sums of absolute attributions over a grid of `cell × cell` squares.
///
/// When `cell` does not divide the image the last row and column of cells
/// extend past the border; the missing pixels count as zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    pub height: usize,
    pub width: usize,
    pub cell: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CellGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Pixel mask of the given cell indices, clipped to the image.
    pub fn mask_of(&self, cells: &[usize]) -> RegionMask {
        let mut mask = RegionMask::empty(self.height, self.width);
        for &idx in cells {
            let (r, c) = (idx / self.cols, idx % self.cols);
            for y in r * self.cell..((r + 1) * self.cell).min(self.height) {
                for x in c * self.cell..((c + 1) * self.cell).min(self.width) {
                    mask.set(y, x, true);
                }
            }
        }
        mask
    }
}

pub fn grid_aggregate(attr: &AttributionMap, cell: usize) -> Result<CellGrid> {
    if cell == 0 {
        return Err(Error::invalid("cell size must be positive"));
    }
    let (h, w) = (attr.height, attr.width);
    let rows = h.div_ceil(cell);
    let cols = w.div_ceil(cell);
    let mut values = vec![0.0; rows * cols];
    for y in 0..h {
        for x in 0..w {
            values[(y / cell) * cols + x / cell] += attr.get(y, x).abs();
        }
    }
    Ok(CellGrid {
        height: h,
        width: w,
        cell,
        rows,
        cols,
        values,
    })
}

/// Number of cells selected for area fraction `a`: `floor(a · pixels / cell²)`, at least one.
pub(crate) fn cells_for_area(a: f64, pixels: usize, cell: usize, available: usize) -> usize {
    let k = (a * pixels as f64 / (cell * cell) as f64).floor() as usize;
    k.max(1).min(available)
}

/// Union of the `k` highest-valued cells; ties go to the lower row-major index.
pub fn threshold_region(cells: &CellGrid, a: f64) -> Result<RegionMask> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::invalid(format!("area fraction {a} outside (0, 1]")));
    }
    let k = cells_for_area(
        a,
        cells.height * cells.width,
        cells.cell,
        cells.values.len(),
    );
    let mut order: Vec<usize> = (0..cells.values.len()).collect();
    order.sort_by(|&i, &j| {
        cells.values[j]
            .partial_cmp(&cells.values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(k);
    Ok(cells.mask_of(&order))
}

/// Row-major indices of the `cell × cell` grid cells containing any pixel of `mask`.
pub fn cells_covering(mask: &RegionMask, cell: usize) -> Vec<usize> {
    let cols = mask.width().div_ceil(cell.max(1));
    let mut out = Vec::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                let idx = (y / cell) * cols + x / cell;
                if !out.contains(&idx) {
                    out.push(idx);
                }
            }
        }
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, values: Vec<f64>) -> AttributionMap {
        AttributionMap::new(h, w, values).unwrap()
    }

    #[test]
    fn ones_aggregate_to_cell_area() {
        let g = grid_aggregate(&map(4, 4, vec![1.0; 16]), 2).unwrap();
        assert_eq!((g.rows, g.cols), (2, 2));
        assert_eq!(g.values, vec![4.0; 4]);
    }

    #[test]
    fn ragged_grid_pads_with_zeros() {
        let g = grid_aggregate(&map(5, 5, vec![1.0; 25]), 2).unwrap();
        assert_eq!((g.rows, g.cols), (3, 3));
        assert_eq!(g.get(2, 2), 1.0);
        assert_eq!(g.get(0, 2), 2.0);
        assert_eq!(g.total(), 25.0);
    }

    #[test]
    fn zero_cell_is_rejected() {
        assert!(grid_aggregate(&map(4, 4, vec![1.0; 16]), 0).is_err());
    }

    #[test]
    fn quarter_area_on_two_by_two_selects_one_cell() {
        let g = grid_aggregate(&map(4, 4, vec![1.0; 16]), 2).unwrap();
        let m = threshold_region(&g, 0.25).unwrap();
        assert_eq!(m.count(), 4);
        assert!(m.get(0, 0) && m.get(1, 1) && !m.get(0, 2));
    }

    #[test]
    fn area_bounds() {
        let g = grid_aggregate(&map(4, 4, vec![1.0; 16]), 2).unwrap();
        assert!(threshold_region(&g, 0.0).is_err());
        assert!(threshold_region(&g, 1.5).is_err());
        assert_eq!(threshold_region(&g, 1.0).unwrap().count(), 16);
        assert_eq!(threshold_region(&g, 0.01).unwrap().count(), 4);
    }

    #[test]
    fn covering_cells() {
        let m = RegionMask::from_fn(8, 8, |y, x| y == 5 && x >= 3);
        assert_eq!(cells_covering(&m, 4), vec![2, 3]);
    }
}
