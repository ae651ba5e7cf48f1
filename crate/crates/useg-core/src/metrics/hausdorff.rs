//! 95th-percentile symmetric boundary distance.
//!
//! Boundaries are foreground pixels with at least one background
//! 4-neighbor, where the image border counts as background. Directed
//! distances come from an exact squared Euclidean distance transform
//! (per-axis lower-envelope parabolas), so the kernel agrees with an
//! all-pairs oracle to floating-point exactness.

use super::{BinaryMask, MetricsError, Result};

/// HD95 value plus whether the standard definition applied. When exactly
/// one mask is empty there is no distance to measure; the value is the
/// image-diagonal penalty and `defined` is false.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hd95 {
    pub value: f64,
    pub defined: bool,
}

const INF: f64 = 1e20;

/// Foreground pixels with a background 4-neighbor; the border counts as
/// background, so a mask filling the image still has a boundary ring.
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let exposed = r == 0
                || c == 0
                || r == h - 1
                || c == w - 1
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if exposed {
                out.push((r, c));
            }
        }
    }
    out
}

/// 1D squared distance transform of sampled function `f` (lower envelope
/// of parabolas rooted at each site).
fn dt1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = INF;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
    d
}

/// Exact squared Euclidean distance to the nearest seed, for every pixel.
fn edt_squared(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut g = vec![INF; h * w];
    for &(r, c) in seeds {
        g[r * w + c] = 0.0;
    }
    let mut col = vec![0.0f64; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = g[r * w + c];
        }
        let d = dt1d(&col);
        for r in 0..h {
            g[r * w + c] = d[r];
        }
    }
    for r in 0..h {
        let d = dt1d(&g[r * w..(r + 1) * w]);
        g[r * w..(r + 1) * w].copy_from_slice(&d);
    }
    g
}

/// Lower nearest-rank 95th percentile of an ascending-sorted slice.
fn percentile95_lower(sorted: &[f64]) -> f64 {
    let idx = (19 * sorted.len()).div_ceil(20) - 1;
    sorted[idx]
}

fn directed_p95(from: &[(usize, usize)], to_edt: &[f64], w: usize) -> f64 {
    let mut dists: Vec<f64> = from
        .iter()
        .map(|&(r, c)| to_edt[r * w + c].sqrt())
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile95_lower(&dists)
}

/// HD95 = max of the two directed 95th-percentile boundary distances.
/// Both masks empty scores 0 (defined); exactly one empty gets the
/// image-diagonal penalty with the defined flag cleared.
pub fn hausdorff95(pred: &BinaryMask, gt: &BinaryMask) -> Result<Hd95> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(MetricsError::ShapeMismatch(
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width(),
        ));
    }
    let (h, w) = (gt.height(), gt.width());
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => {
            return Ok(Hd95 {
                value: 0.0,
                defined: true,
            })
        }
        (true, false) | (false, true) => {
            let diagonal = ((h * h + w * w) as f64).sqrt();
            return Ok(Hd95 {
                value: diagonal,
                defined: false,
            });
        }
        (false, false) => {}
    }
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    let edt_gt = edt_squared(h, w, &bg);
    let edt_pred = edt_squared(h, w, &bp);
    let fwd = directed_p95(&bp, &edt_gt, w);
    let bwd = directed_p95(&bg, &edt_pred, w);
    Ok(Hd95 {
        value: fwd.max(bwd),
        defined: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, fg: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::new(h, w);
        for &(r, c) in fg {
            m.set(r, c, true);
        }
        m
    }

    /// All-pairs reference: directed nearest distances between boundary
    /// sets, same percentile convention.
    fn hd95_all_pairs(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
        let bp = boundary_pixels(pred);
        let bg = boundary_pixels(gt);
        let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
            let mut dists: Vec<f64> = from
                .iter()
                .map(|&(r1, c1)| {
                    to.iter()
                        .map(|&(r2, c2)| {
                            let dr = r1 as f64 - r2 as f64;
                            let dc = c1 as f64 - c2 as f64;
                            dr * dr + dc * dc
                        })
                        .fold(f64::INFINITY, f64::min)
                        .sqrt()
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            percentile95_lower(&dists)
        };
        directed(&bp, &bg).max(directed(&bg, &bp))
    }

    #[test]
    fn identical_masks_are_zero() {
        let m = mask(8, 8, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        let hd = hausdorff95(&m, &m).unwrap();
        assert_eq!(hd.value, 0.0);
        assert!(hd.defined);
    }

    #[test]
    fn single_pixels_give_the_345_triangle() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(3, 4)]);
        let hd = hausdorff95(&a, &b).unwrap();
        assert_eq!(hd.value, 5.0);
        assert!(hd.defined);
    }

    #[test]
    fn filled_image_boundary_is_the_border_ring() {
        let full = mask(
            3,
            3,
            &(0..3)
                .flat_map(|r| (0..3).map(move |c| (r, c)))
                .collect::<Vec<_>>(),
        );
        let b = boundary_pixels(&full);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(1, 1)));
    }

    #[test]
    fn empty_mask_conventions() {
        let empty = BinaryMask::new(6, 8);
        let some = mask(6, 8, &[(2, 2)]);
        let both = hausdorff95(&empty, &empty).unwrap();
        assert_eq!(
            both,
            Hd95 {
                value: 0.0,
                defined: true
            }
        );
        let one = hausdorff95(&empty, &some).unwrap();
        assert!(!one.defined);
        assert!((one.value - (36.0f64 + 64.0).sqrt()).abs() < 1e-12);
        let other = hausdorff95(&some, &empty).unwrap();
        assert_eq!(one, other);
    }

    #[test]
    fn matches_all_pairs_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..100 {
            let h = rng.gen_range(3..=16);
            let w = rng.gen_range(3..=16);
            let draw = |rng: &mut ChaCha8Rng| {
                let mut m = BinaryMask::new(h, w);
                let blobs = rng.gen_range(1..=3);
                for _ in 0..blobs {
                    let r0 = rng.gen_range(0..h);
                    let c0 = rng.gen_range(0..w);
                    let rad = rng.gen_range(0..3usize);
                    for r in r0.saturating_sub(rad)..(r0 + rad + 1).min(h) {
                        for c in c0.saturating_sub(rad)..(c0 + rad + 1).min(w) {
                            m.set(r, c, true);
                        }
                    }
                }
                m
            };
            let p = draw(&mut rng);
            let g = draw(&mut rng);
            let kernel = hausdorff95(&p, &g).unwrap();
            assert!(kernel.defined);
            let oracle = hd95_all_pairs(&p, &g);
            assert!(
                (kernel.value - oracle).abs() <= 1e-9,
                "kernel {} vs oracle {} on {h}x{w}",
                kernel.value,
                oracle
            );
        }
    }

    #[test]
    fn symmetric_and_translation_invariant() {
        let a = mask(16, 16, &[(3, 3), (3, 4), (4, 3)]);
        let b = mask(16, 16, &[(7, 9), (8, 9)]);
        let ab = hausdorff95(&a, &b).unwrap().value;
        let ba = hausdorff95(&b, &a).unwrap().value;
        assert_eq!(ab, ba);
        // Shift both masks by (2, 3), away from any border.
        let shift = |m: &BinaryMask| {
            let mut out = BinaryMask::new(16, 16);
            for r in 0..16 {
                for c in 0..16 {
                    if m.get(r, c) {
                        out.set(r + 2, c + 3, true);
                    }
                }
            }
            out
        };
        let shifted = hausdorff95(&shift(&a), &shift(&b)).unwrap().value;
        assert!((ab - shifted).abs() < 1e-12);
    }

    #[test]
    fn percentile_is_lower_nearest_rank() {
        // 20 values: ceil(0.95*20) = 19, so the 19th sorted value (index 18).
        let vals: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        assert_eq!(percentile95_lower(&vals), 19.0);
        // A single value is its own 95th percentile.
        assert_eq!(percentile95_lower(&[7.5]), 7.5);
    }
}
