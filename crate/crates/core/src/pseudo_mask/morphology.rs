//! Binary morphology on single slices. Masks hold 0 or 1.

use crate::volume::{connected_components, Connectivity, Grid2};

/// Dilation with a `(2r+1)`-square structuring element. Pixels outside the
/// image contribute nothing.
pub fn dilate(mask: &Grid2<u8>, radius: usize) -> Grid2<u8> {
    separable(mask, radius, |window| window.iter().copied().max().unwrap_or(0))
}

/// Erosion with a `(2r+1)`-square structuring element. Pixels outside the
/// image never erode a pixel, so foreground touching the border survives.
pub fn erode(mask: &Grid2<u8>, radius: usize) -> Grid2<u8> {
    separable(mask, radius, |window| window.iter().copied().min().unwrap_or(0))
}

fn separable(mask: &Grid2<u8>, radius: usize, reduce: impl Fn(&[u8]) -> u8) -> Grid2<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let (rows, cols) = (mask.rows(), mask.cols());
    let mut horizontal = Grid2::filled(rows, cols, 0u8);
    for r in 0..rows {
        let line = &mask.data()[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(cols - 1);
            horizontal.set(r, c, reduce(&line[lo..=hi]));
        }
    }
    let mut out = Grid2::filled(rows, cols, 0u8);
    let mut column = vec![0u8; rows];
    for c in 0..cols {
        for (r, v) in column.iter_mut().enumerate() {
            *v = *horizontal.get(r, c);
        }
        for r in 0..rows {
            let lo = r.saturating_sub(radius);
            let hi = (r + radius).min(rows - 1);
            out.set(r, c, reduce(&column[lo..=hi]));
        }
    }
    out
}

/// Dilation followed by erosion with the same square element; radius 0 is
/// the identity.
pub fn morphological_closing(mask: &Grid2<u8>, radius: usize) -> Grid2<u8> {
    erode(&dilate(mask, radius), radius)
}

/// Turns every 4-connected background component with fewer than
/// `hole_area_max` pixels into foreground.
pub fn fill_holes(mask: &Grid2<u8>, hole_area_max: usize) -> Grid2<u8> {
    let background = mask.map(|&v| u8::from(v == 0));
    let comps = connected_components(&background, Connectivity::Four);
    let mut out = mask.clone();
    for (o, &l) in out.data_mut().iter_mut().zip(comps.labels.data()) {
        if l != 0 && comps.sizes[l as usize] < hole_area_max {
            *o = 1;
        }
    }
    out
}

/// Erases 8-connected foreground components smaller than `min_frac` times
/// the largest component.
pub fn remove_small_components(mask: &Grid2<u8>, min_frac: f64) -> Grid2<u8> {
    let comps = connected_components(mask, Connectivity::Eight);
    if comps.count() == 0 {
        return mask.clone();
    }
    let cutoff = min_frac * comps.largest() as f64;
    let mut out = mask.clone();
    for (o, &l) in out.data_mut().iter_mut().zip(comps.labels.data()) {
        if l != 0 && (comps.sizes[l as usize] as f64) < cutoff {
            *o = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Connectivity;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Grid2<u8> {
        let p = rng.random_range(0.1..0.8);
        Grid2::from_vec(rows, cols, (0..rows * cols).map(|_| u8::from(rng.random_bool(p))).collect())
    }

    /// Minkowski dilation: p is set if any q in X has |p - q|_inf <= r.
    fn minkowski_dilate(m: &Grid2<u8>, r: usize) -> Grid2<u8> {
        let mut out = Grid2::filled(m.rows(), m.cols(), 0);
        for pr in 0..m.rows() {
            for pc in 0..m.cols() {
                let hit = (0..m.rows()).any(|qr| {
                    (0..m.cols()).any(|qc| {
                        *m.get(qr, qc) == 1 && pr.abs_diff(qr) <= r && pc.abs_diff(qc) <= r
                    })
                });
                out.set(pr, pc, u8::from(hit));
            }
        }
        out
    }

    /// Erosion: p survives if every in-image q with |p - q|_inf <= r is set.
    fn minkowski_erode(m: &Grid2<u8>, r: usize) -> Grid2<u8> {
        let mut out = Grid2::filled(m.rows(), m.cols(), 0);
        for pr in 0..m.rows() {
            for pc in 0..m.cols() {
                let keep = (0..m.rows()).all(|qr| {
                    (0..m.cols()).all(|qc| {
                        pr.abs_diff(qr) > r || pc.abs_diff(qc) > r || *m.get(qr, qc) == 1
                    })
                });
                out.set(pr, pc, u8::from(keep));
            }
        }
        out
    }

    #[test]
    fn radius_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mask(&mut rng, 9, 7);
        assert_eq!(morphological_closing(&m, 0), m);
    }

    #[test]
    fn closing_bridges_two_pixel_gap() {
        let mut m = Grid2::filled(5, 7, 0u8);
        m.set(2, 2, 1);
        m.set(2, 4, 1);
        let closed = morphological_closing(&m, 1);
        assert_eq!(*closed.get(2, 3), 1);
        assert_eq!(connected_components(&closed, Connectivity::Eight).count(), 1);
        // Set algebra gives the same answer.
        assert_eq!(closed, minkowski_erode(&minkowski_dilate(&m, 1), 1));
    }

    #[test]
    fn closing_matches_set_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let m = random_mask(&mut rng, 32, 32);
            for r in 1..=2 {
                assert_eq!(dilate(&m, r), minkowski_dilate(&m, r));
                assert_eq!(erode(&m, r), minkowski_erode(&m, r));
            }
        }
    }

    fn ring_with_hole(hole: &[(usize, usize)]) -> Grid2<u8> {
        let mut m = Grid2::filled(10, 10, 1u8);
        for &(r, c) in hole {
            m.set(r, c, 0);
        }
        m
    }

    #[test]
    fn hole_fill_threshold() {
        let six: Vec<_> = (0..6).map(|i| (4 + i / 3, 3 + i % 3)).collect();
        let filled = fill_holes(&ring_with_hole(&six), 10);
        assert!(filled.data().iter().all(|&v| v == 1));

        let twelve: Vec<_> = (0..12).map(|i| (3 + i / 4, 3 + i % 4)).collect();
        let m = ring_with_hole(&twelve);
        assert_eq!(fill_holes(&m, 10), m);
    }

    fn blobs(sizes: &[usize]) -> Grid2<u8> {
        let cols = 120;
        let mut m = Grid2::filled(40, cols, 0u8);
        let mut row = 0;
        for &n in sizes {
            for i in 0..n {
                m.set(row + i / 100, i % 100, 1);
            }
            row += n.div_ceil(100) + 1;
        }
        m
    }

    #[test]
    fn small_component_rule() {
        let out = remove_small_components(&blobs(&[1000, 5]), 0.01);
        assert_eq!(out.data().iter().filter(|&&v| v == 1).count(), 1000);
        let out = remove_small_components(&blobs(&[1000, 10]), 0.01);
        assert_eq!(out.data().iter().filter(|&&v| v == 1).count(), 1010);
        let empty = Grid2::filled(4, 4, 0u8);
        assert_eq!(remove_small_components(&empty, 0.5), empty);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn closing_is_idempotent(bits in prop::collection::vec(prop::bool::weighted(0.4), 16 * 16), r in 0usize..3) {
            let m = Grid2::from_vec(16, 16, bits.iter().map(|&b| u8::from(b)).collect());
            let once = morphological_closing(&m, r);
            prop_assert_eq!(morphological_closing(&once, r), once.clone());
            // Closing only ever adds pixels.
            prop_assert!(m.data().iter().zip(once.data()).all(|(a, b)| a <= b));
        }

        #[test]
        fn thresholds_are_monotone(bits in prop::collection::vec(prop::bool::weighted(0.5), 16 * 16), t in 0usize..20, f in 0.0f64..0.9) {
            let m = Grid2::from_vec(16, 16, bits.iter().map(|&b| u8::from(b)).collect());
            let lo = fill_holes(&m, t);
            let hi = fill_holes(&m, t + 3);
            prop_assert!(lo.data().iter().zip(hi.data()).all(|(a, b)| a <= b));
            let keep_more = remove_small_components(&m, f);
            let keep_less = remove_small_components(&m, (f + 0.05).min(0.99));
            prop_assert!(keep_less.data().iter().zip(keep_more.data()).all(|(a, b)| a <= b));
        }
    }
}
