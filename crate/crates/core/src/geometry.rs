//! Grid-wise cropping plans and exact overlap correspondence.
//!
//! A seed image is resized to `I'` of side `n*m` pixels so it partitions into
//! an `n x n` grid of `m x m` patches. `I''` of side `(n-1)*m` is cut from
//! `I'` at a random pixel offset, and two crops `x`, `x'` of side `k*m` are
//! taken from `I''` *aligned to its patch grid*. Patches of `x` and `x'` that
//! land on the same absolute `I''` grid cell therefore correspond exactly;
//! no similarity matching is involved.

use crate::scalar::{cast, Scalar};
use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("seed grid must have n >= 2 patches per side, got n={0}")]
    SeedGridTooSmall(usize),
    #[error("patch side must satisfy m >= 1, got m={0}")]
    PatchSideTooSmall(usize),
    #[error("crop patch count must satisfy 1 <= k <= n-1, got k={k} with n={n}")]
    CropCountOutOfRange { n: usize, k: usize },
    #[error(
        "overlap guarantee violated: (2k-(n-1))^2 = {lhs} < k^2/2 = {k_sq}/2, \
         so two crops could overlap on fewer than half their patches \
         (n={n}, k={k})"
    )]
    OverlapRule { n: usize, k: usize, lhs: i64, k_sq: i64 },
    #[error("offset {name}=({row},{col}) outside valid range [0,{max}]")]
    OffsetOutOfRange { name: &'static str, row: usize, col: usize, max: usize },
    #[error("image is {got_h}x{got_w} but the plan requires {want}x{want}")]
    DimensionMismatch { want: usize, got_h: usize, got_w: usize },
    #[error("raw image {h}x{w} is degenerate; need at least 32x32")]
    DegenerateImage { h: usize, w: usize },
}

/// The `(n, m, k)` cropping geometry.
///
/// Validated on construction; all derived sizes are in pixels unless noted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    n: usize,
    m: usize,
    k: usize,
}

impl GridSpec {
    /// Validates the grid invariants, notably the >= 50% overlap guarantee
    /// `(2k - (n-1))^2 >= k^2 / 2`.
    pub fn new(n: usize, m: usize, k: usize) -> Result<Self, GeometryError> {
        if n < 2 {
            return Err(GeometryError::SeedGridTooSmall(n));
        }
        if m < 1 {
            return Err(GeometryError::PatchSideTooSmall(m));
        }
        if k < 1 || k > n - 1 {
            return Err(GeometryError::CropCountOutOfRange { n, k });
        }
        // Integer-exact check of (2k-(n-1))^2 >= k^2/2, rejecting the
        // 2k < n-1 regime where crops may not overlap at all.
        let d = 2 * k as i64 - (n as i64 - 1);
        let k_sq = (k * k) as i64;
        if d < 0 || 2 * d * d < k_sq {
            return Err(GeometryError::OverlapRule { n, k, lhs: d * d, k_sq });
        }
        Ok(Self { n, m, k })
    }

    /// Paper-scale configuration: 19x19 seed grid of 32 px patches, 14-patch crops.
    pub fn paper() -> Self {
        Self::new(19, 32, 14).expect("paper grid spec is valid")
    }

    /// Desk-scale configuration: 11x11 seed grid of 8 px patches, 8-patch crops.
    pub fn desk() -> Self {
        Self::new(11, 8, 8).expect("desk grid spec is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Side of `I'` in pixels: `n*m`.
    pub fn seed_side(&self) -> usize {
        self.n * self.m
    }

    /// Side of `I''` in pixels: `(n-1)*m`.
    pub fn inner_side(&self) -> usize {
        (self.n - 1) * self.m
    }

    /// Side of each crop in pixels: `k*m`.
    pub fn crop_side(&self) -> usize {
        self.k * self.m
    }

    /// Number of patches per crop: `k^2`.
    pub fn patches_per_crop(&self) -> usize {
        self.k * self.k
    }

    /// Largest legal crop offset within `I''`, in patch units: `n-1-k`.
    pub fn max_patch_offset(&self) -> usize {
        self.n - 1 - self.k
    }

    /// Lower bound on the overlap fraction over all legal offset pairs:
    /// `((2k-(n-1))/k)^2`.
    pub fn min_overlap_fraction(&self) -> f64 {
        let d = (2 * self.k) as f64 - (self.n as f64 - 1.0);
        (d / self.k as f64).powi(2)
    }
}

/// Sampled placement of `I''` within `I'` and of the two crops within `I''`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPairPlan {
    pub spec: GridSpec,
    /// Top-left of `I''` within `I'`, in pixels, each coordinate in `[0, m)`.
    pub inner_offset: (usize, usize),
    /// Top-left of crop `x` within `I''`, in patch units, each in `[0, n-1-k]`.
    pub offset_a: (usize, usize),
    /// Top-left of crop `x'` within `I''`, in patch units, each in `[0, n-1-k]`.
    pub offset_b: (usize, usize),
}

impl CropPairPlan {
    pub fn new(
        spec: GridSpec,
        inner_offset: (usize, usize),
        offset_a: (usize, usize),
        offset_b: (usize, usize),
    ) -> Result<Self, GeometryError> {
        if inner_offset.0 >= spec.m() || inner_offset.1 >= spec.m() {
            return Err(GeometryError::OffsetOutOfRange {
                name: "inner_offset",
                row: inner_offset.0,
                col: inner_offset.1,
                max: spec.m() - 1,
            });
        }
        let max = spec.max_patch_offset();
        for (name, off) in [("offset_a", offset_a), ("offset_b", offset_b)] {
            if off.0 > max || off.1 > max {
                return Err(GeometryError::OffsetOutOfRange {
                    name,
                    row: off.0,
                    col: off.1,
                    max,
                });
            }
        }
        Ok(Self { spec, inner_offset, offset_a, offset_b })
    }

    /// Number of overlapping patches `z = (k-|dr|)(k-|dc|)`.
    pub fn overlap_patch_count(&self) -> usize {
        let k = self.spec.k() as i64;
        let dr = (self.offset_a.0 as i64 - self.offset_b.0 as i64).abs();
        let dc = (self.offset_a.1 as i64 - self.offset_b.1 as i64).abs();
        ((k - dr) * (k - dc)) as usize
    }

    /// Overlap fraction `z / k^2`.
    pub fn overlap_fraction(&self) -> f64 {
        self.overlap_patch_count() as f64 / self.spec.patches_per_crop() as f64
    }
}

/// Exact patch index pairing between two crops of one plan.
///
/// Pair `(i, j)` states that patch `i` of `x` (row-major within the crop) and
/// patch `j` of `x'` cover the same absolute patch of `I''`. Both index
/// columns are strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correspondence {
    pairs: Vec<(usize, usize)>,
}

impl Correspondence {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn z(&self) -> usize {
        self.pairs.len()
    }

    pub fn indices_in_a(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.0)
    }

    pub fn indices_in_b(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.1)
    }
}

/// Samples a crop pair plan: `inner_offset` uniform over `[0,m)^2`, both crop
/// offsets independently uniform over `[0, n-1-k]^2`.
///
/// Draw order is fixed (inner row, inner col, a row, a col, b row, b col) so
/// plans are reproducible from the RNG state alone.
pub fn sample_crop_pair<R: Rng + ?Sized>(spec: GridSpec, rng: &mut R) -> CropPairPlan {
    let m = spec.m();
    let max = spec.max_patch_offset();
    let inner = (rng.random_range(0..m), rng.random_range(0..m));
    let a = (rng.random_range(0..=max), rng.random_range(0..=max));
    let b = (rng.random_range(0..=max), rng.random_range(0..=max));
    CropPairPlan::new(spec, inner, a, b).expect("sampled offsets are in range")
}

/// Enumerates the patch-index pairs of the two crops whose absolute `I''`
/// grid coordinates coincide, in row-major order of the shared cell.
pub fn overlap_correspondence(plan: &CropPairPlan) -> Correspondence {
    let k = plan.spec.k();
    let (ar, ac) = plan.offset_a;
    let (br, bc) = plan.offset_b;
    let r0 = ar.max(br);
    let r1 = ar.min(br) + k;
    let c0 = ac.max(bc);
    let c1 = ac.min(bc) + k;
    let mut pairs = Vec::with_capacity(plan.overlap_patch_count());
    for r in r0..r1 {
        for c in c0..c1 {
            let ia = (r - ar) * k + (c - ac);
            let ib = (r - br) * k + (c - bc);
            pairs.push((ia, ib));
        }
    }
    debug_assert_eq!(pairs.len(), plan.overlap_patch_count());
    Correspondence { pairs }
}

/// Cuts the two planned crops out of `I''`.
pub fn extract_crops<T: Scalar>(
    inner_image: &Array2<T>,
    plan: &CropPairPlan,
) -> Result<(Array2<T>, Array2<T>), GeometryError> {
    let side = plan.spec.inner_side();
    let (h, w) = inner_image.dim();
    if h != side || w != side {
        return Err(GeometryError::DimensionMismatch { want: side, got_h: h, got_w: w });
    }
    let m = plan.spec.m();
    let cs = plan.spec.crop_side();
    let cut = |off: (usize, usize)| {
        let (r, c) = (off.0 * m, off.1 * m);
        inner_image.slice(s![r..r + cs, c..c + cs]).to_owned()
    };
    Ok((cut(plan.offset_a), cut(plan.offset_b)))
}

/// A rectangular sub-region of the raw image used as the seed crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedCrop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl SeedCrop {
    /// Full-image seed crop.
    pub fn full(h: usize, w: usize) -> Self {
        Self { top: 0, left: 0, height: h, width: w }
    }

    /// Samples area fraction in `[0.5, 1.0]` and aspect ratio in `[3/4, 4/3]`,
    /// falling back to the full image when no sampled rectangle fits.
    pub fn sample<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Self {
        for _ in 0..10 {
            let frac = rng.random_range(0.5..=1.0);
            let aspect = rng.random_range(0.75..=(4.0 / 3.0));
            let area = frac * (h * w) as f64;
            let cw = (area * aspect).sqrt().round() as usize;
            let ch = (area / aspect).sqrt().round() as usize;
            if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
                let top = rng.random_range(0..=h - ch);
                let left = rng.random_range(0..=w - cw);
                return Self { top, left, height: ch, width: cw };
            }
        }
        Self::full(h, w)
    }
}

/// Bilinear resize with half-pixel centers (corner-aligned sampling disabled).
pub fn bilinear_resize<T: Scalar>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    if h == out_h && w == out_w {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let wy: T = cast(fy - y0 as f64);
        let wx: T = cast(fx - x0 as f64);
        let one = T::one();
        let top = src[[y0, x0]] * (one - wx) + src[[y0, x1]] * wx;
        let bot = src[[y1, x0]] * (one - wx) + src[[y1, x1]] * wx;
        top * (one - wy) + bot * wy
    })
}

/// Builds `I''` from a raw image: seed-crop, bilinear resize to `n*m` per
/// side, then cut at the plan's `inner_offset` to `(n-1)*m` per side.
pub fn prepare_seed_image<T: Scalar>(
    raw: &Array2<T>,
    plan: &CropPairPlan,
    seed_crop: &SeedCrop,
) -> Result<Array2<T>, GeometryError> {
    let (h, w) = raw.dim();
    if h < 32 || w < 32 {
        return Err(GeometryError::DegenerateImage { h, w });
    }
    debug_assert!(seed_crop.top + seed_crop.height <= h && seed_crop.left + seed_crop.width <= w);
    let cropped = raw
        .slice(s![
            seed_crop.top..seed_crop.top + seed_crop.height,
            seed_crop.left..seed_crop.left + seed_crop.width
        ])
        .to_owned();
    let side = plan.spec.seed_side();
    let resized = bilinear_resize(&cropped, side, side);
    let (r, c) = plan.inner_offset;
    let inner = plan.spec.inner_side();
    Ok(resized.slice(s![r..r + inner, c..c + inner]).to_owned())
}

/// [`prepare_seed_image`] with the seed rectangle sampled from `rng`.
pub fn prepare_seed_image_sampled<T: Scalar, R: Rng + ?Sized>(
    raw: &Array2<T>,
    plan: &CropPairPlan,
    rng: &mut R,
) -> Result<Array2<T>, GeometryError> {
    let (h, w) = raw.dim();
    if h < 32 || w < 32 {
        return Err(GeometryError::DegenerateImage { h, w });
    }
    let sc = SeedCrop::sample(h, w, rng);
    prepare_seed_image(raw, plan, &sc)
}

/// Splits a crop into its row-major `m x m` patch pixel blocks, one patch per
/// row of the result (each row is the patch's pixels, row-major).
pub fn patchify<T: Scalar>(crop: &Array2<T>, m: usize) -> Array2<T> {
    let (h, w) = crop.dim();
    assert!(h % m == 0 && w % m == 0, "crop side not divisible by patch side");
    let (gr, gc) = (h / m, w / m);
    let mut out = Array2::zeros((gr * gc, m * m));
    for pr in 0..gr {
        for pc in 0..gc {
            let patch = crop.slice(s![pr * m..(pr + 1) * m, pc * m..(pc + 1) * m]);
            let mut row = out.row_mut(pr * gc + pc);
            for (dst, src) in row.iter_mut().zip(patch.iter()) {
                *dst = *src;
            }
        }
    }
    out
}
