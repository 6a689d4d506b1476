use crate::error::{Error, Result};

/// Exact Euclidean distance to the nearest `true` pixel and that pixel's
/// index. Ties go to the smallest `(row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub distance: Vec<f64>,
    pub nearest: Vec<usize>,
}

/// Two passes: the nearest set pixel within each column, then a scan over
/// columns per pixel. `O(h·w·w)`, exact.
pub fn distance_transform(set: &[bool], h: usize, w: usize) -> Result<DistanceMap> {
    if set.len() != h * w {
        return Err(Error::Shape(format!("{} values for a {h}x{w} map", set.len())));
    }
    if !set.iter().any(|&v| v) {
        return Err(Error::Contract("distance transform of an empty set".into()));
    }
    // column_nearest[y*w + x] = nearest set row in column x (upper row on ties)
    let mut column_nearest: Vec<Option<usize>> = vec![None; h * w];
    for x in 0..w {
        let mut above = None;
        for y in 0..h {
            if set[y * w + x] {
                above = Some(y);
            }
            column_nearest[y * w + x] = above;
        }
        let mut below = None;
        for y in (0..h).rev() {
            if set[y * w + x] {
                below = Some(y);
            }
            let best = match (column_nearest[y * w + x], below) {
                (Some(a), Some(b)) => Some(if b - y < y - a { b } else { a }),
                (a, b) => a.or(b),
            };
            column_nearest[y * w + x] = best;
        }
    }
    let mut distance = vec![0.0; h * w];
    let mut nearest = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(usize, usize, usize)> = None;
            for cx in 0..w {
                let Some(r) = column_nearest[y * w + cx] else { continue };
                let d2 = r.abs_diff(y).pow(2) + cx.abs_diff(x).pow(2);
                let cand = (d2, r, cx);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
            let (d2, r, c) = best.expect("set is non-empty");
            distance[y * w + x] = (d2 as f64).sqrt();
            nearest[y * w + x] = r * w + c;
        }
    }
    Ok(DistanceMap { distance, nearest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_brute_force() {
        let (h, w) = (5, 7);
        let set: Vec<bool> = (0..h * w).map(|i| (i * 7 + 3) % 11 == 0).collect();
        let dm = distance_transform(&set, h, w).unwrap();
        for i in 0..h * w {
            let (y, x) = (i / w, i % w);
            let best = (0..h * w)
                .filter(|&j| set[j])
                .map(|j| ((j / w).abs_diff(y).pow(2) + (j % w).abs_diff(x).pow(2), j / w, j % w))
                .min()
                .unwrap();
            assert_eq!(dm.nearest[i], best.1 * w + best.2);
            assert_eq!(dm.distance[i], (best.0 as f64).sqrt());
        }
        assert!(distance_transform(&[false; 4], 2, 2).is_err());
    }
}
