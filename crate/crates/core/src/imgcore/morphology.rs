//! Binary morphology with a 3x3 (8-connected) structuring element, and
//! connected-component labelling.

use std::collections::VecDeque;

use super::raster::BinaryMask;

/// One 3x3 max (`grow = true`) or min pass. Out-of-frame neighbours are ignored,
/// so erosion does not eat in from the frame border.
fn pass(mask: &BinaryMask, grow: bool) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let src = mask.bits();
    // separable: horizontal then vertical
    let mut tmp = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(1);
            let hi = (x + 1).min(w - 1);
            let row = &src[y * w + lo..=y * w + hi];
            tmp[y * w + x] = if grow {
                row.iter().any(|b| *b)
            } else {
                row.iter().all(|b| *b)
            };
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(1);
        let hi = (y + 1).min(h - 1);
        for x in 0..w {
            let mut acc = !grow;
            for yy in lo..=hi {
                let v = tmp[yy * w + x];
                if grow {
                    acc |= v;
                } else {
                    acc &= v;
                }
            }
            out[y * w + x] = acc;
        }
    }
    BinaryMask::new(h, w, out).expect("same dims")
}

/// Chessboard distance from every pixel to the nearest set pixel (`u32::MAX`
/// everywhere for an empty mask). Two raster passes, exact for 8-connectivity.
pub fn chessboard_distance(mask: &BinaryMask) -> Vec<u32> {
    let (h, w) = (mask.height(), mask.width());
    let inf = u32::MAX;
    let mut d: Vec<u32> = mask
        .bits()
        .iter()
        .map(|&b| if b { 0 } else { inf })
        .collect();
    let relax = |d: &mut [u32], i: usize, j: usize| {
        let v = d[j].saturating_add(1);
        if v < d[i] {
            d[i] = v;
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x > 0 {
                relax(&mut d, i, i - 1);
            }
            if y > 0 {
                let up = i - w;
                relax(&mut d, i, up);
                if x > 0 {
                    relax(&mut d, i, up - 1);
                }
                if x + 1 < w {
                    relax(&mut d, i, up + 1);
                }
            }
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = y * w + x;
            if x + 1 < w {
                relax(&mut d, i, i + 1);
            }
            if y + 1 < h {
                let down = i + w;
                relax(&mut d, i, down);
                if x > 0 {
                    relax(&mut d, i, down - 1);
                }
                if x + 1 < w {
                    relax(&mut d, i, down + 1);
                }
            }
        }
    }
    d
}

/// `n` successive 3x3 dilations; `dilate(m, 0) == m`.
pub fn dilate(mask: &BinaryMask, n: usize) -> BinaryMask {
    if n == 0 || mask.is_empty() {
        return mask.clone();
    }
    let n = u32::try_from(n).unwrap_or(u32::MAX);
    let bits = chessboard_distance(mask)
        .into_iter()
        .map(|v| v <= n)
        .collect();
    BinaryMask::new(mask.height(), mask.width(), bits).expect("same dims")
}

/// `n` successive 3x3 erosions.
pub fn erode(mask: &BinaryMask, n: usize) -> BinaryMask {
    let mut m = mask.clone();
    for _ in 0..n {
        if m.is_empty() {
            break;
        }
        m = pass(&m, false);
    }
    m
}

/// Number of erosions a mask survives before vanishing.
pub fn erosion_depth(mask: &BinaryMask) -> usize {
    let mut m = mask.clone();
    let mut depth = 0;
    loop {
        m = erode(&m, 1);
        if m.is_empty() {
            return depth;
        }
        depth += 1;
        if depth > mask.height().max(mask.width()) {
            return depth;
        }
    }
}

/// 8-connected components in raster-scan order of their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<BinaryMask> {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![usize::MAX; h * w];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits()[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![start];
        label[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (px, py) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (px + dx, py + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.bits()[q] && label[q] == usize::MAX {
                        label[q] = id;
                        members.push(q);
                        queue.push_back(q);
                    }
                }
            }
        }
        comps.push(members);
    }
    comps
        .into_iter()
        .map(|members| {
            let mut bits = vec![false; h * w];
            for p in members {
                bits[p] = true;
            }
            BinaryMask::new(h, w, bits).expect("same dims")
        })
        .collect()
}

/// The component with the most pixels (earliest in scan order on ties);
/// `None` for an empty mask.
pub fn largest_component(mask: &BinaryMask) -> Option<BinaryMask> {
    let comps = connected_components(mask);
    let mut best: Option<(usize, BinaryMask)> = None;
    for c in comps {
        let n = c.count();
        if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
            best = Some((n, c));
        }
    }
    best.map(|(_, c)| c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        (3usize..14, 3usize..14).prop_flat_map(|(h, w)| {
            proptest::collection::vec(proptest::bool::weighted(0.3), h * w)
                .prop_map(move |bits| BinaryMask::new(h, w, bits).unwrap())
        })
    }

    #[test]
    fn single_pixel_dilates_to_block() {
        let m = BinaryMask::from_fn(5, 5, |x, y| x == 2 && y == 2);
        let d = dilate(&m, 1);
        assert_eq!(
            d,
            BinaryMask::from_fn(5, 5, |x, y| (1..=3).contains(&x) && (1..=3).contains(&y))
        );
        assert_eq!(dilate(&m, 0), m);
        assert!(dilate(&BinaryMask::empty(5, 5), 4).is_empty());
        assert_eq!(erode(&d, 1), m);
    }

    #[test]
    fn erosion_depth_of_square() {
        let m = BinaryMask::from_fn(9, 9, |x, y| (1..=7).contains(&x) && (1..=7).contains(&y));
        // 7x7 block: 6x... shrinks 2 per side-pair each step: 7 -> 5 -> 3 -> 1 -> empty
        assert_eq!(erosion_depth(&m), 3);
    }

    #[test]
    fn components_and_largest() {
        let m = BinaryMask::from_fn(6, 6, |x, y| (x < 2 && y < 2) || (x >= 4 && y >= 4));
        assert_eq!(connected_components(&m).len(), 2);
        // diagonal touching counts as connected
        let d = BinaryMask::from_fn(3, 3, |x, y| x == y);
        assert_eq!(connected_components(&d).len(), 1);

        let m = BinaryMask::from_fn(7, 7, |x, y| (y == 0 && x < 3) || (y == 4 && x < 5));
        assert_eq!(largest_component(&m).unwrap().count(), 5);
        assert!(largest_component(&BinaryMask::empty(3, 3)).is_none());
        assert!(connected_components(&BinaryMask::empty(3, 3)).is_empty());
    }

    proptest! {
        #[test]
        fn closing_contains_original(m in mask_strategy(), k in 0usize..4) {
            prop_assert!(m.is_subset_of(&erode(&dilate(&m, k), k)));
        }

        #[test]
        fn dilation_and_erosion_are_monotone(m in mask_strategy()) {
            prop_assert!(m.is_subset_of(&dilate(&m, 1)));
            prop_assert!(erode(&m, 1).is_subset_of(&m));
        }

        #[test]
        fn dilation_matches_repeated_passes(m in mask_strategy(), n in 0usize..6) {
            let mut r = m.clone();
            for _ in 0..n {
                r = pass(&r, true);
            }
            prop_assert_eq!(dilate(&m, n), r);
        }

        #[test]
        fn components_partition_the_mask(m in mask_strategy()) {
            let comps = connected_components(&m);
            let total: usize = comps.iter().map(BinaryMask::count).sum();
            prop_assert_eq!(total, m.count());
            let mut acc = BinaryMask::empty(m.height(), m.width());
            for c in &comps {
                prop_assert!(acc.intersection(c).unwrap().is_empty());
                acc = acc.union(c).unwrap();
            }
            prop_assert_eq!(acc, m);
        }
    }
}
