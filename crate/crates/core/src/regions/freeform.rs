use rand::Rng;

use crate::error::{Error, Result};
use crate::regions::RegionMask;

const MAX_ATTEMPTS: usize = 200;
const MAX_STROKES: usize = 40;

/// Random brush strokes whose union covers a fraction of the image in
/// `[lo, hi]`. Each stroke is a random walk of a circular brush and is
/// 4-connected on its own.
pub fn freeform_strokes(
    rng: &mut impl Rng,
    height: usize,
    width: usize,
    (lo, hi): (f64, f64),
) -> Result<Vec<RegionMask>> {
    if !(lo > 0.0 && lo < hi && hi <= 1.0) {
        return Err(Error::invalid(format!(
            "area range ({lo}, {hi}) must satisfy 0 < lo < hi <= 1"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("mask must have a positive size"));
    }
    let total = (height * width) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let mut union = RegionMask::empty(height, width);
        let mut strokes = Vec::new();
        let mut overshoots = 0;
        while strokes.len() < MAX_STROKES && overshoots < MAX_STROKES {
            let stroke = random_stroke(rng, height, width);
            let merged = union.union(&stroke)?;
            let area = merged.count() as f64 / total;
            if area > hi {
                overshoots += 1;
                continue;
            }
            union = merged;
            strokes.push(stroke);
            if area >= lo {
                return Ok(strokes);
            }
        }
    }
    Err(Error::invalid(format!(
        "no freeform mask with area in [{lo}, {hi}] after {MAX_ATTEMPTS} attempts"
    )))
}

pub fn freeform_mask(
    rng: &mut impl Rng,
    height: usize,
    width: usize,
    range: (f64, f64),
) -> Result<RegionMask> {
    let strokes = freeform_strokes(rng, height, width, range)?;
    let mut mask = RegionMask::empty(height, width);
    for s in &strokes {
        mask = mask.union(s)?;
    }
    Ok(mask)
}

fn random_stroke(rng: &mut impl Rng, height: usize, width: usize) -> RegionMask {
    let radius: f64 = rng.gen_range(1.0..3.5);
    let length: usize = rng.gen_range(3..24);
    let mut y = rng.gen_range(0..height) as i64;
    let mut x = rng.gen_range(0..width) as i64;
    let mut dir = rng.gen_range(0..4);
    let mut mask = RegionMask::empty(height, width);
    let r = radius.ceil() as i64;
    for step in 0..=length {
        for dy in -r..=r {
            for dx in -r..=r {
                let (py, px) = (y + dy, x + dx);
                if py < 0 || px < 0 || py >= height as i64 || px >= width as i64 {
                    continue;
                }
                if ((dy * dy + dx * dx) as f64) <= radius * radius {
                    mask.set(py as usize, px as usize, true);
                }
            }
        }
        if step == length {
            break;
        }
        if rng.gen_bool(0.3) {
            dir = rng.gen_range(0..4);
        }
        let (ny, nx) = match dir {
            0 => (y - 1, x),
            1 => (y + 1, x),
            2 => (y, x - 1),
            _ => (y, x + 1),
        };
        if ny >= 0 && nx >= 0 && ny < height as i64 && nx < width as i64 {
            y = ny;
            x = nx;
        }
    }
    mask
}

/// True when the set pixels of `mask` form one 4-connected component.
pub fn is_four_connected(mask: &RegionMask) -> bool {
    let (h, w) = (mask.height(), mask.width());
    let Some(start) = mask.bits().iter().position(|&b| b == 1) else {
        return true;
    };
    let mut seen = vec![false; h * w];
    let mut stack = vec![start];
    seen[start] = true;
    let mut reached = 0;
    while let Some(i) = stack.pop() {
        reached += 1;
        let (y, x) = (i / w, i % w);
        let mut visit = |j: usize| {
            if mask.bits()[j] == 1 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        };
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
    }
    reached == mask.count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_mask() {
        let a = freeform_mask(&mut ChaCha8Rng::seed_from_u64(3), 32, 32, (0.1, 0.2)).unwrap();
        let b = freeform_mask(&mut ChaCha8Rng::seed_from_u64(3), 32, 32, (0.1, 0.2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn connectivity_helper() {
        assert!(is_four_connected(&RegionMask::from_fn(4, 4, |y, _| y == 1)));
        assert!(!is_four_connected(&RegionMask::from_fn(4, 4, |y, x| y == x)));
    }

    #[test]
    fn invalid_and_unreachable_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(freeform_mask(&mut rng, 32, 32, (0.2, 0.1)).is_err());
        assert!(freeform_mask(&mut rng, 32, 32, (0.0, 0.1)).is_err());
        assert!(freeform_mask(&mut rng, 32, 32, (0.0001, 0.0002)).is_err());
    }
}
