//! Post-training inspection tools: dense shifted-grid embeddings,
//! best-buddies correspondence, top-k pair selection, zero-shot
//! co-segmentation, and the grid-vs-similarity matching stability report.

use crate::geometry::{
    extract_crops, overlap_correspondence, prepare_seed_image_sampled, sample_crop_pair,
    GeometryError, GridSpec,
};
use crate::model::{encode, encode_patches, EncoderConfig, ModelError, ParamStore};
use crate::scalar::Scalar;
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("stride {stride} must be positive and divide window {window}")]
    BadStride { window: usize, stride: usize },
    #[error("window {window} must equal the encoder patch side {patch_side}")]
    WindowMismatch { window: usize, patch_side: usize },
    #[error("image {h}x{w} incompatible: need a square image at least {min} per side")]
    ImageIncompatible { h: usize, w: usize, min: usize },
    #[error("embedding dimensions differ: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("co-segmentation needs at least 2 clusters, got {0}")]
    BadClusterCount(usize),
    #[error("need at least {need} {what}, got {got}")]
    NotEnough { what: &'static str, need: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad embedding file: {0}")]
    BadEmbeddingFile(String),
}

/// Stride-`stride` grid of window embeddings covering one image.
///
/// Cell `(r, c)` holds the encoder's token output for the `window`-sided
/// pixel window at `(r*stride, c*stride)`.
#[derive(Debug, Clone)]
pub struct DenseEmbeddingMap<T: Scalar> {
    pub grid: Array3<T>,
    pub window: usize,
    pub stride: usize,
    pub image_id: String,
}

impl<T: Scalar> DenseEmbeddingMap<T> {
    /// Cells per side.
    pub fn g(&self) -> usize {
        self.grid.dim().0
    }

    pub fn dim(&self) -> usize {
        self.grid.dim().2
    }

    /// Image side this map was built from: `(g-1)*stride + window`.
    pub fn image_side(&self) -> usize {
        (self.g() - 1) * self.stride + self.window
    }

    /// All cells as a `G^2 x D` matrix, rows in row-major cell order.
    pub fn cells(&self) -> Array2<T> {
        let (g, _, d) = self.grid.dim();
        let mut out = Array2::zeros((g * g, d));
        for r in 0..g {
            for c in 0..g {
                out.row_mut(r * g + c).assign(&self.grid.slice(s![r, c, ..]));
            }
        }
        out
    }
}

/// Builds the dense map by running the encoder once per `(window/stride)^2`
/// grid shift and scattering token outputs; windows crossing the image
/// boundary are dropped, which leaves exactly `G^2` populated cells with
/// `G = (side - window)/stride + 1`.
pub fn dense_embeddings<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    image: &Array2<T>,
    window: usize,
    stride: usize,
    image_id: &str,
) -> Result<DenseEmbeddingMap<T>, AnalysisError> {
    if stride == 0 || window % stride != 0 {
        return Err(AnalysisError::BadStride { window, stride });
    }
    if window != cfg.patch_side {
        return Err(AnalysisError::WindowMismatch { window, patch_side: cfg.patch_side });
    }
    let (h, w) = image.dim();
    if h != w || h < window {
        return Err(AnalysisError::ImageIncompatible { h, w, min: window });
    }
    let side = h;
    let g = (side - window) / stride + 1;
    let d = cfg.dim;
    let mut grid = Array3::zeros((g, g, d));
    let mut filled = Array2::from_elem((g, g), false);

    for dr in (0..window).step_by(stride) {
        for dc in (0..window).step_by(stride) {
            let rows: Vec<usize> =
                (0..).map(|i| dr + i * window).take_while(|&p| p + window <= side).collect();
            let cols: Vec<usize> =
                (0..).map(|j| dc + j * window).take_while(|&p| p + window <= side).collect();
            if rows.is_empty() || cols.is_empty() {
                continue;
            }
            let mut patches = Array2::zeros((rows.len() * cols.len(), window * window));
            for (i, &pr) in rows.iter().enumerate() {
                for (j, &pc) in cols.iter().enumerate() {
                    let block = image.slice(s![pr..pr + window, pc..pc + window]);
                    let mut row = patches.row_mut(i * cols.len() + j);
                    for (dst, src) in row.iter_mut().zip(block.iter()) {
                        *dst = *src;
                    }
                }
            }
            let out = encode_patches(store, cfg, &patches, (rows.len(), cols.len()), false)?;
            for (i, &pr) in rows.iter().enumerate() {
                for (j, &pc) in cols.iter().enumerate() {
                    let (cr, cc) = (pr / stride, pc / stride);
                    grid.slice_mut(s![cr, cc, ..])
                        .assign(&out.patch_features.row(i * cols.len() + j));
                    filled[[cr, cc]] = true;
                }
            }
        }
    }
    debug_assert!(filled.iter().all(|&f| f), "every dense cell must be populated");
    Ok(DenseEmbeddingMap { grid, window, stride, image_id: image_id.to_string() })
}

/// A mutual-nearest-neighbor cell pair under cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbp {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub similarity: f64,
}

fn normalized_rows_f64<T: Scalar>(cells: &Array2<T>) -> Array2<f64> {
    let mut out = cells.mapv(|v| v.to_f64().unwrap());
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Mutual nearest neighbors between two dense maps under cosine similarity.
/// Ties break toward the lowest linear cell index; each cell appears in at
/// most one pair. Results are ordered by the cell index in `a`.
pub fn best_buddies<T: Scalar>(
    a: &DenseEmbeddingMap<T>,
    b: &DenseEmbeddingMap<T>,
) -> Result<Vec<Bbp>, AnalysisError> {
    if a.dim() != b.dim() {
        return Err(AnalysisError::DimMismatch { a: a.dim(), b: b.dim() });
    }
    let an = normalized_rows_f64(&a.cells());
    let bn = normalized_rows_f64(&b.cells());
    let sim = an.dot(&bn.t());
    let best_in_b: Vec<usize> = sim.rows().into_iter().map(argmax_row).collect();
    let best_in_a: Vec<usize> = sim.columns().into_iter().map(argmax_row).collect();
    let ga = a.g();
    let gb = b.g();
    let mut out = Vec::new();
    for (i, &j) in best_in_b.iter().enumerate() {
        if best_in_a[j] == i {
            out.push(Bbp {
                a: (i / ga, i % ga),
                b: (j / gb, j % gb),
                similarity: sim[[i, j]],
            });
        }
    }
    Ok(out)
}

/// k-means with k-means++ initialization and a fixed seed. Returns the
/// assignment of each point; distances are Euclidean.
pub fn kmeans<T: Scalar>(points: &Array2<T>, k: usize, seed: u64, max_iter: usize) -> Vec<usize> {
    let n = points.nrows();
    assert!(k >= 1 && n >= 1, "kmeans needs points and k >= 1");
    let pts = points.mapv(|v| v.to_f64().unwrap());
    let d = pts.ncols();
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let dist_sq = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };

    // k-means++ seeding.
    let mut centroids = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&pts.row(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| dist_sq(pts.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).assign(&pts.row(next));
        for i in 0..n {
            min_d[i] = min_d[i].min(dist_sq(pts.row(i), centroids.row(c)));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dd = dist_sq(pts.row(i), centroids.row(c));
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut row = sums.row_mut(assign[i]);
            row += &pts.row(i);
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an empty cluster to the point farthest from its
                // centroid (deterministic).
                let far = (0..n)
                    .max_by(|&x, &y| {
                        dist_sq(pts.row(x), centroids.row(assign[x]))
                            .total_cmp(&dist_sq(pts.row(y), centroids.row(assign[y])))
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&pts.row(far));
            } else {
                let inv = 1.0 / counts[c] as f64;
                centroids.row_mut(c).assign(&sums.row(c).mapv(|v| v * inv));
            }
        }
    }
    assign
}

/// Representative pairs: k-means over pair embeddings (the concatenation of
/// both cells), one maximum-similarity pair per cluster. Fewer than `k` input
/// pairs are returned whole. Output is sorted by similarity, descending.
pub fn top_pairs<T: Scalar>(
    map_a: &DenseEmbeddingMap<T>,
    map_b: &DenseEmbeddingMap<T>,
    bbps: &[Bbp],
    k: usize,
    seed: u64,
) -> Vec<Bbp> {
    let mut out: Vec<Bbp> = if bbps.len() <= k {
        bbps.to_vec()
    } else {
        let d = map_a.dim();
        let mut feats = Array2::<f64>::zeros((bbps.len(), 2 * d));
        for (i, p) in bbps.iter().enumerate() {
            for j in 0..d {
                feats[[i, j]] = map_a.grid[[p.a.0, p.a.1, j]].to_f64().unwrap();
                feats[[i, d + j]] = map_b.grid[[p.b.0, p.b.1, j]].to_f64().unwrap();
            }
        }
        let assign = kmeans(&feats, k, seed, 100);
        let mut best: Vec<Option<usize>> = vec![None; k];
        for (i, &c) in assign.iter().enumerate() {
            match best[c] {
                Some(cur) if bbps[cur].similarity >= bbps[i].similarity => {}
                _ => best[c] = Some(i),
            }
        }
        best.into_iter().flatten().map(|i| bbps[i]).collect()
    };
    out.sort_by(|x, y| y.similarity.total_cmp(&x.similarity));
    out
}

/// Cell-level co-segmentation: pool all cells, k-means into `k` clusters,
/// keep only clusters present in every image (relabeled 1..), and set
/// everything else to background 0.
pub fn cosegment_cells<T: Scalar>(
    maps: &[DenseEmbeddingMap<T>],
    k: usize,
    seed: u64,
) -> Result<Vec<Array2<u8>>, AnalysisError> {
    if maps.len() < 2 {
        return Err(AnalysisError::NotEnough { what: "images", need: 2, got: maps.len() });
    }
    if k < 2 {
        return Err(AnalysisError::BadClusterCount(k));
    }
    let d = maps[0].dim();
    for m in maps {
        if m.dim() != d {
            return Err(AnalysisError::DimMismatch { a: d, b: m.dim() });
        }
    }
    let total: usize = maps.iter().map(|m| m.g() * m.g()).sum();
    let mut pooled = Array2::zeros((total, d));
    let mut offset = 0;
    for m in maps {
        let cells = m.cells();
        pooled.slice_mut(s![offset..offset + cells.nrows(), ..]).assign(&cells);
        offset += cells.nrows();
    }
    let assign = kmeans(&pooled, k, seed, 100);

    let mut present = vec![vec![false; k]; maps.len()];
    let mut offset = 0;
    for (mi, m) in maps.iter().enumerate() {
        for &c in &assign[offset..offset + m.g() * m.g()] {
            present[mi][c] = true;
        }
        offset += m.g() * m.g();
    }
    // Clusters present in every image, relabeled 1.. in cluster order.
    let mut relabel = vec![0u8; k];
    let mut next = 1u8;
    for c in 0..k {
        if present.iter().all(|p| p[c]) {
            relabel[c] = next;
            next += 1;
        }
    }

    let mut out = Vec::with_capacity(maps.len());
    let mut offset = 0;
    for m in maps {
        let g = m.g();
        let mut mask = Array2::zeros((g, g));
        for r in 0..g {
            for c in 0..g {
                mask[[r, c]] = relabel[assign[offset + r * g + c]];
            }
        }
        out.push(mask);
        offset += g * g;
    }
    Ok(out)
}

/// Nearest-neighbor upsampling of a cell label map to pixel resolution.
pub fn upsample_labels(cells: &Array2<u8>, window: usize, stride: usize, side: usize) -> Array2<u8> {
    let g = cells.nrows();
    let half = (window - 1) as f64 / 2.0;
    Array2::from_shape_fn((side, side), |(y, x)| {
        let cr = (((y as f64 - half) / stride as f64).round().max(0.0) as usize).min(g - 1);
        let cc = (((x as f64 - half) / stride as f64).round().max(0.0) as usize).min(g - 1);
        cells[[cr, cc]]
    })
}

/// Zero-shot co-segmentation of a set of same-sized square images into
/// pixel-level label masks.
pub fn cosegment<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    images: &[(String, Array2<T>)],
    k: usize,
    window: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<(String, Array2<u8>)>, AnalysisError> {
    if images.len() < 2 {
        return Err(AnalysisError::NotEnough { what: "images", need: 2, got: images.len() });
    }
    let mut maps = Vec::with_capacity(images.len());
    for (id, img) in images {
        maps.push(dense_embeddings(store, cfg, img, window, stride, id)?);
    }
    let cells = cosegment_cells(&maps, k, seed)?;
    Ok(images
        .iter()
        .zip(cells)
        .map(|((id, img), cell)| {
            (id.clone(), upsample_labels(&cell, window, stride, img.nrows()))
        })
        .collect())
}

/// Outcome of similarity matching restricted to the overlap region:
/// mutual-nearest-neighbor pairs as index pairs into the two index lists,
/// plus a degeneracy flag (all similarities equal, ties broken by lowest
/// index).
pub fn restricted_similarity_match(
    student: &Array2<f64>,
    teacher: &Array2<f64>,
) -> (Vec<(usize, usize)>, bool) {
    let an = normalized_rows_f64(student);
    let bn = normalized_rows_f64(teacher);
    let sim = an.dot(&bn.t());
    let spread = sim.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v))
        - sim.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let degenerate = spread < 1e-12;
    let best_b: Vec<usize> = sim.rows().into_iter().map(argmax_row).collect();
    let best_a: Vec<usize> = sim.columns().into_iter().map(argmax_row).collect();
    let pairs = best_b
        .iter()
        .enumerate()
        .filter(|&(i, &j)| best_a[j] == i)
        .map(|(i, &j)| (i, j))
        .collect();
    (pairs, degenerate)
}

/// Matching stability of one checkpoint over a fixed plan stream.
#[derive(Debug, Clone)]
pub struct CheckpointStability {
    pub id: String,
    /// Mean positional error of grid matching, in patch units. Zero by
    /// construction; computed anyway as a cross-check.
    pub grid_error_mean: f64,
    /// Mean positional error of similarity matching over the overlap.
    pub sim_error_mean: f64,
    pub pairs_evaluated: usize,
    pub degenerate: bool,
}

/// Grid-vs-similarity matching comparison across checkpoints.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub per_checkpoint: Vec<CheckpointStability>,
    /// Population variance of the per-checkpoint similarity matching error.
    pub sim_error_variance: f64,
}

impl fmt::Display for StabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "checkpoint  grid_error  sim_error  pairs  degenerate")?;
        for c in &self.per_checkpoint {
            writeln!(
                f,
                "{}  {:.6}  {:.6}  {}  {}",
                c.id, c.grid_error_mean, c.sim_error_mean, c.pairs_evaluated, c.degenerate
            )?;
        }
        writeln!(f, "sim_error_variance_across_checkpoints: {:.6}", self.sim_error_variance)
    }
}

/// Compares exact grid matching with similarity-based matching (mutual
/// nearest neighbors of local embeddings restricted to the overlap) for every
/// checkpoint over one shared stream of sampled crop plans.
pub fn matching_stability<T: Scalar>(
    checkpoints: &[(String, &ParamStore<T>)],
    cfg: &EncoderConfig,
    grid: GridSpec,
    images: &[Array2<T>],
    n_plans: usize,
    seed: u64,
) -> Result<StabilityReport, AnalysisError> {
    if checkpoints.len() < 2 {
        return Err(AnalysisError::NotEnough {
            what: "checkpoints",
            need: 2,
            got: checkpoints.len(),
        });
    }
    if images.is_empty() || n_plans == 0 {
        return Err(AnalysisError::NotEnough { what: "images/plans", need: 1, got: 0 });
    }

    // One plan stream shared by every checkpoint.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fixtures = Vec::with_capacity(n_plans);
    for p in 0..n_plans {
        let raw = &images[p % images.len()];
        let plan = sample_crop_pair(grid, &mut rng);
        let inner = prepare_seed_image_sampled(raw, &plan, &mut rng)?;
        fixtures.push((plan, inner));
    }

    let k = grid.k();
    let mut per_checkpoint = Vec::with_capacity(checkpoints.len());
    for (id, store) in checkpoints {
        let mut grid_err_sum = 0.0;
        let mut sim_err_sum = 0.0;
        let mut sim_pairs = 0usize;
        let mut grid_pairs = 0usize;
        let mut degenerate = false;
        for (plan, inner) in &fixtures {
            let (xa, xb) = extract_crops(inner, plan)?;
            let corr = overlap_correspondence(plan);
            let ia: Vec<usize> = corr.indices_in_a().collect();
            let ib: Vec<usize> = corr.indices_in_b().collect();

            // Grid matching: both sides of each pair are the same absolute
            // cell, so the positional error is identically zero.
            for (&a, &b) in ia.iter().zip(&ib) {
                let ar = (plan.offset_a.0 + a / k) as f64;
                let ac = (plan.offset_a.1 + a % k) as f64;
                let br = (plan.offset_b.0 + b / k) as f64;
                let bc = (plan.offset_b.1 + b % k) as f64;
                grid_err_sum += ((ar - br).powi(2) + (ac - bc).powi(2)).sqrt();
                grid_pairs += 1;
            }

            let ea = encode(store, cfg, &xa, false)?;
            let eb = encode(store, cfg, &xb, false)?;
            let sa = select_rows_f64(&ea.local_embeds, &ia);
            let sb = select_rows_f64(&eb.local_embeds, &ib);
            let (pairs, degen) = restricted_similarity_match(&sa, &sb);
            degenerate |= degen;
            for (pi, pj) in pairs {
                let a = ia[pi];
                let b = ib[pj];
                let ar = (plan.offset_a.0 + a / k) as f64;
                let ac = (plan.offset_a.1 + a % k) as f64;
                let br = (plan.offset_b.0 + b / k) as f64;
                let bc = (plan.offset_b.1 + b % k) as f64;
                sim_err_sum += ((ar - br).powi(2) + (ac - bc).powi(2)).sqrt();
                sim_pairs += 1;
            }
        }
        per_checkpoint.push(CheckpointStability {
            id: id.clone(),
            grid_error_mean: grid_err_sum / grid_pairs.max(1) as f64,
            sim_error_mean: sim_err_sum / sim_pairs.max(1) as f64,
            pairs_evaluated: sim_pairs,
            degenerate,
        });
    }

    let mean = per_checkpoint.iter().map(|c| c.sim_error_mean).sum::<f64>()
        / per_checkpoint.len() as f64;
    let sim_error_variance = per_checkpoint
        .iter()
        .map(|c| (c.sim_error_mean - mean).powi(2))
        .sum::<f64>()
        / per_checkpoint.len() as f64;
    Ok(StabilityReport { per_checkpoint, sim_error_variance })
}

fn select_rows_f64<T: Scalar>(m: &Array2<T>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (i, &r) in idx.iter().enumerate() {
        for c in 0..m.ncols() {
            out[[i, c]] = m[[r, c]].to_f64().unwrap();
        }
    }
    out
}

const EMBED_MAGIC: &str = "peac-embeddings v1";

/// Writes a dense map: a two-line text header (format tag, then
/// `g= d= window= stride= image=`) followed by the cells as little-endian
/// f64, row-major in (row, col, dim).
pub fn write_embedding_map<T: Scalar>(
    path: &Path,
    map: &DenseEmbeddingMap<T>,
) -> Result<(), AnalysisError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{EMBED_MAGIC}")?;
    writeln!(
        w,
        "g={} d={} window={} stride={} image={}",
        map.g(),
        map.dim(),
        map.window,
        map.stride,
        map.image_id
    )?;
    for v in map.grid.iter() {
        w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding_map(path: &Path) -> Result<DenseEmbeddingMap<f64>, AnalysisError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != EMBED_MAGIC {
        return Err(AnalysisError::BadEmbeddingFile("missing format tag".into()));
    }
    line.clear();
    r.read_line(&mut line)?;
    let mut g = 0usize;
    let mut d = 0usize;
    let mut window = 0usize;
    let mut stride = 0usize;
    let mut image_id = String::new();
    for field in line.trim_end().split(' ') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| AnalysisError::BadEmbeddingFile(format!("bad field {field:?}")))?;
        match key {
            "g" => g = value.parse().map_err(|_| bad_field(field))?,
            "d" => d = value.parse().map_err(|_| bad_field(field))?,
            "window" => window = value.parse().map_err(|_| bad_field(field))?,
            "stride" => stride = value.parse().map_err(|_| bad_field(field))?,
            "image" => image_id = value.to_string(),
            _ => return Err(AnalysisError::BadEmbeddingFile(format!("unknown field {key:?}"))),
        }
    }
    if g == 0 || d == 0 || window == 0 || stride == 0 {
        return Err(AnalysisError::BadEmbeddingFile("incomplete header".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != g * g * d * 8 {
        return Err(AnalysisError::BadEmbeddingFile(format!(
            "expected {} payload bytes, found {}",
            g * g * d * 8,
            bytes.len()
        )));
    }
    let mut grid = Array3::zeros((g, g, d));
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        let (r_, rem) = (i / (g * d), i % (g * d));
        grid[[r_, rem / d, rem % d]] = v;
    }
    Ok(DenseEmbeddingMap { grid, window, stride, image_id })
}

fn bad_field(field: &str) -> AnalysisError {
    AnalysisError::BadEmbeddingFile(format!("bad field {field:?}"))
}
