//! Patch order distortion (OD) and patch appearance distortion (AD).
//!
//! Both are applied to student inputs only. OD permutes whole patches and
//! zeroes the local-consistency indicator; AD corrupts pixels in the style of
//! Models Genesis (local shuffling, Bezier intensity remap, in-/out-painting)
//! and leaves the indicator alone.

use crate::scalar::{cast, Scalar};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

/// Application probabilities for the two distortions.
#[derive(Debug, Clone, Copy)]
pub struct DistortionConfig {
    pub p_od: f64,
    pub p_ad: f64,
    /// Patch side in pixels; OD moves blocks of this size and the local
    /// shuffle window is capped at half of it.
    pub patch_side: usize,
}

impl DistortionConfig {
    pub fn new(patch_side: usize) -> Self {
        Self { p_od: 0.5, p_ad: 0.5, patch_side }
    }
}

/// Ground truth for the order and restoration losses of one student pass.
#[derive(Debug, Clone)]
pub struct DistortionRecord<T: Scalar> {
    /// `permutation[slot] = original patch index` now sitting at `slot`;
    /// identity when OD was not applied.
    pub permutation: Vec<usize>,
    pub od_applied: bool,
    pub ad_applied: bool,
    /// Local-consistency indicator: false exactly when OD was applied.
    pub indicator: bool,
    /// Pristine pre-distortion crop, kept as the restoration target.
    pub original_crop: Array2<T>,
}

/// Applies OD with probability `p_od` and AD (independently) with probability
/// `p_ad`. The record reflects exactly what happened.
pub fn maybe_distort<T: Scalar, R: Rng + ?Sized>(
    crop: &Array2<T>,
    rng: &mut R,
    cfg: &DistortionConfig,
) -> (Array2<T>, DistortionRecord<T>) {
    let m = cfg.patch_side;
    let (h, w) = crop.dim();
    assert!(h % m == 0 && w % m == 0, "crop side not divisible by patch side");
    let n_patches = (h / m) * (w / m);

    let od = rng.random::<f64>() < cfg.p_od;
    let ad = rng.random::<f64>() < cfg.p_ad;

    let mut permutation: Vec<usize> = (0..n_patches).collect();
    let mut out = crop.clone();
    if od {
        permutation.shuffle(rng);
        out = apply_patch_permutation(crop, &permutation, m);
    }
    if ad {
        out = apply_appearance_distortion(&out, rng, m);
    }

    let record = DistortionRecord {
        permutation,
        od_applied: od,
        ad_applied: ad,
        indicator: !od,
        original_crop: crop.clone(),
    };
    (out, record)
}

/// Rearranges `m x m` patch blocks so output patch `slot` holds input patch
/// `permutation[slot]`.
pub fn apply_patch_permutation<T: Scalar>(
    crop: &Array2<T>,
    permutation: &[usize],
    m: usize,
) -> Array2<T> {
    let (h, w) = crop.dim();
    let gc = w / m;
    let mut out = Array2::zeros((h, w));
    for (slot, &src) in permutation.iter().enumerate() {
        let (dr, dc) = (slot / gc * m, slot % gc * m);
        let (sr, sc) = (src / gc * m, src % gc * m);
        out.slice_mut(s![dr..dr + m, dc..dc + m])
            .assign(&crop.slice(s![sr..sr + m, sc..sc + m]));
    }
    out
}

/// Applies a uniformly chosen non-empty subset of the four appearance
/// transforms, so each has equal selection probability. Intensities are
/// assumed normalized to `[0,1]` and stay there.
pub fn apply_appearance_distortion<T: Scalar, R: Rng + ?Sized>(
    crop: &Array2<T>,
    rng: &mut R,
    patch_side: usize,
) -> Array2<T> {
    let mask = rng.random_range(1u8..16);
    let mut out = crop.clone();
    if mask & 1 != 0 {
        out = local_pixel_shuffle(&out, rng, (patch_side / 2).max(1));
    }
    if mask & 2 != 0 {
        let p1 = (rng.random::<f64>(), rng.random::<f64>());
        let p2 = (rng.random::<f64>(), rng.random::<f64>());
        let monotonic = rng.random::<f64>() < 0.5;
        out = bezier_intensity_remap(&out, p1, p2, monotonic);
    }
    if mask & 4 != 0 {
        out = in_paint(&out, rng);
    }
    if mask & 8 != 0 {
        out = out_paint(&out, rng);
    }
    out
}

/// Shuffles pixels within many small random windows of side `<= max_window`.
/// A window cap of 1 makes this the identity.
pub fn local_pixel_shuffle<T: Scalar, R: Rng + ?Sized>(
    crop: &Array2<T>,
    rng: &mut R,
    max_window: usize,
) -> Array2<T> {
    let (h, w) = crop.dim();
    let mut out = crop.clone();
    let n_windows = (h * w) / (max_window * max_window).max(1);
    for _ in 0..n_windows {
        let wh = rng.random_range(1..=max_window.min(h));
        let ww = rng.random_range(1..=max_window.min(w));
        let top = rng.random_range(0..=h - wh);
        let left = rng.random_range(0..=w - ww);
        let mut values: Vec<T> =
            out.slice(s![top..top + wh, left..left + ww]).iter().copied().collect();
        values.shuffle(rng);
        for (dst, v) in out
            .slice_mut(s![top..top + wh, left..left + ww])
            .iter_mut()
            .zip(values)
        {
            *dst = v;
        }
    }
    out
}

/// Remaps intensities through a cubic Bezier curve with endpoints `(0,0)` and
/// `(1,1)` and the given interior control points.
///
/// The curve is sampled densely, sorted by its x coordinate, and applied by
/// linear interpolation. With `monotonic` the y samples are additionally
/// sorted, forcing a non-decreasing remap; otherwise the pairing may be
/// non-monotonic. Control points `(1/3,1/3)` and `(2/3,2/3)` give the
/// identity in both modes.
pub fn bezier_intensity_remap<T: Scalar>(
    crop: &Array2<T>,
    p1: (f64, f64),
    p2: (f64, f64),
    monotonic: bool,
) -> Array2<T> {
    const SAMPLES: usize = 1024;
    let bez = |a: f64, b: f64, t: f64| {
        let u = 1.0 - t;
        3.0 * u * u * t * a + 3.0 * u * t * t * b + t * t * t
    };
    let mut pts: Vec<(f64, f64)> = (0..SAMPLES)
        .map(|i| {
            let t = i as f64 / (SAMPLES - 1) as f64;
            (bez(p1.0, p2.0, t), bez(p1.1, p2.1, t))
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if monotonic {
        let mut ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        ys.sort_by(f64::total_cmp);
        for (p, y) in pts.iter_mut().zip(ys) {
            p.1 = y;
        }
    }
    let lookup = |v: f64| -> f64 {
        let i = pts.partition_point(|p| p.0 < v);
        if i == 0 {
            pts[0].1
        } else if i == pts.len() {
            pts[pts.len() - 1].1
        } else {
            let (x0, y0) = pts[i - 1];
            let (x1, y1) = pts[i];
            if x1 - x0 <= f64::EPSILON {
                y0
            } else {
                y0 + (y1 - y0) * (v - x0) / (x1 - x0)
            }
        }
    };
    crop.mapv(|v| cast::<T>(lookup(v.to_f64().unwrap()).clamp(0.0, 1.0)))
}

/// Fills a few random interior rectangles with uniform noise.
pub fn in_paint<T: Scalar, R: Rng + ?Sized>(crop: &Array2<T>, rng: &mut R) -> Array2<T> {
    let (h, w) = crop.dim();
    let mut out = crop.clone();
    let count = rng.random_range(3..=6);
    for _ in 0..count {
        let rh = rng.random_range((h / 8).max(1)..=(h / 4).max(1));
        let rw = rng.random_range((w / 8).max(1)..=(w / 4).max(1));
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        for v in out.slice_mut(s![top..top + rh, left..left + rw]).iter_mut() {
            *v = cast(rng.random::<f64>());
        }
    }
    out
}

/// Replaces everything except a few random rectangles with uniform noise.
pub fn out_paint<T: Scalar, R: Rng + ?Sized>(crop: &Array2<T>, rng: &mut R) -> Array2<T> {
    let (h, w) = crop.dim();
    let mut out = Array2::from_shape_fn((h, w), |_| cast(rng.random::<f64>()));
    let count = rng.random_range(3..=6);
    for _ in 0..count {
        let rh = rng.random_range((h / 4).max(1)..=(h / 2).max(1));
        let rw = rng.random_range((w / 4).max(1)..=(w / 2).max(1));
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        out.slice_mut(s![top..top + rh, left..left + rw])
            .assign(&crop.slice(s![top..top + rh, left..left + rw]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_crop(side: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((side, side), |_| rng.random::<f64>())
    }

    fn sorted_pixels(a: &Array2<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = a.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let crop = random_crop(16, 1);
        let cfg = DistortionConfig { p_od: 0.0, p_ad: 0.0, patch_side: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (out, rec) = maybe_distort(&crop, &mut rng, &cfg);
        assert_eq!(out, crop);
        assert_eq!(rec.permutation, vec![0, 1, 2, 3]);
        assert!(!rec.od_applied && !rec.ad_applied);
        assert!(rec.indicator);
    }

    #[test]
    fn od_conserves_pixel_multiset_and_zeroes_indicator() {
        let crop = random_crop(32, 3);
        let cfg = DistortionConfig { p_od: 1.0, p_ad: 0.0, patch_side: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (out, rec) = maybe_distort(&crop, &mut rng, &cfg);
        assert!(rec.od_applied);
        assert!(!rec.indicator);
        assert_eq!(sorted_pixels(&out), sorted_pixels(&crop));
        // Each output patch is bit-equal to the recorded source patch.
        let m = 8;
        let pin = crate::geometry::patchify(&crop, m);
        let pout = crate::geometry::patchify(&out, m);
        for (slot, &src) in rec.permutation.iter().enumerate() {
            assert_eq!(pout.row(slot), pin.row(src));
        }
    }

    #[test]
    fn permutation_composed_with_inverse_is_identity() {
        let cfg = DistortionConfig { p_od: 1.0, p_ad: 0.0, patch_side: 4 };
        let crop = random_crop(16, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, rec) = maybe_distort(&crop, &mut rng, &cfg);
        let mut inverse = vec![0usize; rec.permutation.len()];
        for (slot, &src) in rec.permutation.iter().enumerate() {
            inverse[src] = slot;
        }
        for i in 0..rec.permutation.len() {
            assert_eq!(inverse[rec.permutation[i]], i);
        }
    }

    #[test]
    fn empirical_rates_near_half() {
        let crop = random_crop(8, 7);
        let cfg = DistortionConfig::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut od_count, mut ad_count) = (0usize, 0usize);
        let trials = 10_000;
        for _ in 0..trials {
            let (_, rec) = maybe_distort(&crop, &mut rng, &cfg);
            od_count += rec.od_applied as usize;
            ad_count += rec.ad_applied as usize;
        }
        let od_rate = od_count as f64 / trials as f64;
        let ad_rate = ad_count as f64 / trials as f64;
        assert!((od_rate - 0.5).abs() < 0.02, "od rate {od_rate}");
        assert!((ad_rate - 0.5).abs() < 0.02, "ad rate {ad_rate}");
    }

    #[test]
    fn restoration_target_is_pristine() {
        let crop = random_crop(16, 9);
        let cfg = DistortionConfig { p_od: 1.0, p_ad: 1.0, patch_side: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (out, rec) = maybe_distort(&crop, &mut rng, &cfg);
        assert_eq!(rec.original_crop, crop);
        assert_ne!(out, crop);
    }

    #[test]
    fn bezier_identity_control_points() {
        let crop = random_crop(16, 11);
        for monotonic in [true, false] {
            let out = bezier_intensity_remap(
                &crop,
                (1.0 / 3.0, 1.0 / 3.0),
                (2.0 / 3.0, 2.0 / 3.0),
                monotonic,
            );
            for (a, b) in out.iter().zip(crop.iter()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn local_shuffle_window_one_is_identity() {
        let crop = random_crop(16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let out = local_pixel_shuffle(&crop, &mut rng, 1);
        assert_eq!(out, crop);
    }

    #[test]
    fn in_paint_leaves_complement_untouched() {
        let crop = random_crop(32, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let out = in_paint(&crop, &mut rng);
        let changed: Vec<(usize, usize)> = crop
            .indexed_iter()
            .filter(|(idx, &v)| out[*idx] != v)
            .map(|(idx, _)| idx)
            .collect();
        assert!(!changed.is_empty());
        // Untouched pixels are bit-identical, so the untouched-region
        // histogram is unchanged by construction.
        let untouched: usize = crop
            .indexed_iter()
            .filter(|(idx, &v)| out[*idx] == v)
            .count();
        assert_eq!(untouched + changed.len(), 32 * 32);
    }

    #[test]
    fn outputs_stay_in_unit_interval() {
        let crop = random_crop(24, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let out = apply_appearance_distortion(&crop, &mut rng, 8);
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    proptest! {
        #[test]
        fn indicator_equals_not_od(seed in 0u64..200) {
            let crop = random_crop(16, seed);
            let cfg = DistortionConfig::new(8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, rec) = maybe_distort(&crop, &mut rng, &cfg);
            prop_assert_eq!(rec.indicator, !rec.od_applied);
        }

        #[test]
        fn od_is_content_conserving(seed in 0u64..100) {
            let crop = random_crop(16, seed.wrapping_add(999));
            let cfg = DistortionConfig { p_od: 1.0, p_ad: 0.0, patch_side: 4 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, _) = maybe_distort(&crop, &mut rng, &cfg);
            prop_assert_eq!(sorted_pixels(&out), sorted_pixels(&crop));
        }
    }
}
