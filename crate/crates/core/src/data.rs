//! Image ingestion and the synthetic phantom generator.
//!
//! Phantoms are anatomy-like grayscale images with known landmark positions:
//! a smooth background gradient, class-dependent elliptic "organs", a
//! per-instance affine jitter, and Gaussian noise. They stand in for real
//! radiographs so correspondence and probe results can be checked against
//! ground truth.

use crate::geometry::bilinear_resize;
use crate::scalar::{cast, Scalar};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read directory {path}: {source}")]
    ReadDir { path: PathBuf, source: std::io::Error },
    #[error("no decodable images in {0}")]
    EmptyDirectory(PathBuf),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
}

/// One loaded image with optional class label (from a `labels.csv` sidecar).
#[derive(Debug, Clone)]
pub struct DataItem<T: Scalar> {
    pub name: String,
    pub image: Array2<T>,
    pub class: Option<usize>,
}

/// In-memory dataset; images are single-channel with intensities in `[0,1]`.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub items: Vec<DataItem<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> Vec<&Array2<T>> {
        self.items.iter().map(|i| &i.image).collect()
    }

    /// Class labels, present only when every item carries one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.items.iter().map(|i| i.class).collect()
    }
}

fn luminance_plane(img: &image::DynamicImage) -> Array2<f64> {
    use image::DynamicImage::*;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let weights = |r: f64, g: f64, b: f64| 0.299 * r + 0.587 * g + 0.114 * b;
    match img {
        ImageLuma8(p) => {
            Array2::from_shape_fn((h, w), |(y, x)| p.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0)
        }
        ImageLuma16(p) => Array2::from_shape_fn((h, w), |(y, x)| {
            p.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
        }),
        ImageRgb8(p) => Array2::from_shape_fn((h, w), |(y, x)| {
            let px = p.get_pixel(x as u32, y as u32).0;
            weights(px[0] as f64, px[1] as f64, px[2] as f64) / 255.0
        }),
        ImageRgb16(p) => Array2::from_shape_fn((h, w), |(y, x)| {
            let px = p.get_pixel(x as u32, y as u32).0;
            weights(px[0] as f64, px[1] as f64, px[2] as f64) / 65535.0
        }),
        other => {
            let p = other.to_rgba16();
            Array2::from_shape_fn((h, w), |(y, x)| {
                let px = p.get_pixel(x as u32, y as u32).0;
                weights(px[0] as f64, px[1] as f64, px[2] as f64) / 65535.0
            })
        }
    }
}

/// Loads every decodable PNG/JPEG in a directory (sorted by file name),
/// converts to luminance in `[0,1]`, and resizes the shorter side to
/// `target_side`. Unreadable files are skipped with a warning on stderr.
/// A `labels.csv` sidecar (`image,class`) attaches class labels when present.
pub fn load_image_dir<T: Scalar>(dir: &Path, target_side: usize) -> Result<Dataset<T>, DataError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|source| DataError::ReadDir { path: dir.to_path_buf(), source })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();

    let labels = read_labels(&dir.join("labels.csv")).unwrap_or_default();

    let mut items = Vec::new();
    for path in files {
        let img = match image::open(&path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping unreadable image {}: {e}", path.display());
                continue;
            }
        };
        let plane = luminance_plane(&img);
        let (h, w) = plane.dim();
        if h == 0 || w == 0 {
            eprintln!("warning: skipping empty image {}", path.display());
            continue;
        }
        let (nh, nw) = if h <= w {
            (target_side, ((w as f64 * target_side as f64 / h as f64).round() as usize).max(1))
        } else {
            (((h as f64 * target_side as f64 / w as f64).round() as usize).max(1), target_side)
        };
        let resized = bilinear_resize(&plane, nh, nw).mapv(|v| cast::<T>(v));
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let class = labels.get(&name).copied();
        items.push(DataItem { name, image: resized, class });
    }
    if items.is_empty() {
        return Err(DataError::EmptyDirectory(dir.to_path_buf()));
    }
    Ok(Dataset { items })
}

/// Resizes the shorter side to `side` and center-crops the longer one,
/// yielding an exactly square image.
pub fn to_square<T: Scalar>(img: &Array2<T>, side: usize) -> Array2<T> {
    let (h, w) = img.dim();
    let (nh, nw) = if h <= w {
        (side, ((w as f64 * side as f64 / h as f64).round() as usize).max(side))
    } else {
        (((h as f64 * side as f64 / w as f64).round() as usize).max(side), side)
    };
    let resized = bilinear_resize(img, nh, nw);
    let top = (nh - side) / 2;
    let left = (nw - side) / 2;
    resized.slice(ndarray::s![top..top + side, left..left + side]).to_owned()
}

/// Loads one PNG/JPEG as a square luminance image with intensities in `[0,1]`.
pub fn load_image<T: Scalar>(path: &Path, side: usize) -> Result<Array2<T>, DataError> {
    let img = image::open(path)?;
    let plane = luminance_plane(&img);
    Ok(to_square(&plane.mapv(|v| cast::<T>(v)), side))
}

fn read_labels(path: &Path) -> Option<BTreeMap<String, usize>> {
    let mut reader = csv::Reader::from_path(path).ok()?;
    let mut map = BTreeMap::new();
    for record in reader.records() {
        let record = record.ok()?;
        let name = record.get(0)?.to_string();
        let class = record.get(1)?.parse().ok()?;
        map.insert(name, class);
    }
    Some(map)
}

/// An elliptic organ in unit-square coordinates with an additive intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct Organ {
    pub name: String,
    pub center_row: f64,
    pub center_col: f64,
    pub radius_row: f64,
    pub radius_col: f64,
    pub intensity: f64,
}

/// Template for one phantom class.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub class_id: usize,
    pub side: usize,
    pub organs: Vec<Organ>,
    pub noise_sigma: f64,
    /// Scale jitter bound: scale drawn from `[1-j, 1+j]`.
    pub jitter_scale: f64,
    /// Translation jitter bound as a fraction of the side.
    pub jitter_translate: f64,
}

pub const PHANTOM_CLASSES: usize = 3;

impl PhantomSpec {
    /// Built-in class templates. All classes share the lungs and spine;
    /// class 1 has an enlarged heart, class 2 adds a lesion in the right
    /// lung. Landmarks are the organ centers.
    pub fn for_class(class_id: usize, side: usize) -> Result<Self, DataError> {
        if class_id >= PHANTOM_CLASSES {
            return Err(DataError::InvalidSpec(format!(
                "class_id {class_id} out of range (0..{PHANTOM_CLASSES})"
            )));
        }
        if side < 32 {
            return Err(DataError::InvalidSpec(format!("side {side} below minimum 32")));
        }
        let organ = |name: &str, cr: f64, cc: f64, rr: f64, rc: f64, i: f64| Organ {
            name: name.into(),
            center_row: cr,
            center_col: cc,
            radius_row: rr,
            radius_col: rc,
            intensity: i,
        };
        let mut organs = vec![
            organ("lung_left", 0.38, 0.30, 0.24, 0.15, -0.20),
            organ("lung_right", 0.38, 0.70, 0.24, 0.15, -0.20),
            organ("spine", 0.50, 0.50, 0.42, 0.06, 0.15),
        ];
        match class_id {
            0 => organs.push(organ("heart", 0.62, 0.42, 0.13, 0.15, 0.22)),
            1 => organs.push(organ("heart", 0.62, 0.44, 0.19, 0.23, 0.22)),
            2 => {
                organs.push(organ("heart", 0.62, 0.42, 0.13, 0.15, 0.22));
                organs.push(organ("lesion", 0.32, 0.70, 0.06, 0.06, 0.30));
            }
            _ => unreachable!(),
        }
        Ok(Self {
            class_id,
            side,
            organs,
            noise_sigma: 0.02,
            jitter_scale: 0.1,
            jitter_translate: 0.1,
        })
    }

    /// Landmark template positions in unit coordinates.
    pub fn landmarks(&self) -> Vec<(String, f64, f64)> {
        self.organs
            .iter()
            .map(|o| (o.name.clone(), o.center_row, o.center_col))
            .collect()
    }
}

/// The affine jitter applied to one phantom instance: uniform scale about the
/// image center plus a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineJitter {
    pub scale: f64,
    pub translate_row: f64,
    pub translate_col: f64,
}

impl AffineJitter {
    pub fn identity() -> Self {
        Self { scale: 1.0, translate_row: 0.0, translate_col: 0.0 }
    }

    fn sample<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Self {
        let js = spec.jitter_scale;
        let jt = spec.jitter_translate * spec.side as f64;
        Self {
            scale: if js > 0.0 { rng.random_range(1.0 - js..=1.0 + js) } else { 1.0 },
            translate_row: if jt > 0.0 { rng.random_range(-jt..=jt) } else { 0.0 },
            translate_col: if jt > 0.0 { rng.random_range(-jt..=jt) } else { 0.0 },
        }
    }

    /// Maps a point given in pixel coordinates.
    pub fn apply(&self, side: usize, row: f64, col: f64) -> (f64, f64) {
        let c = side as f64 / 2.0;
        (
            c + self.scale * (row - c) + self.translate_row,
            c + self.scale * (col - c) + self.translate_col,
        )
    }
}

/// A rendered phantom with its post-jitter landmark pixel coordinates.
#[derive(Debug, Clone)]
pub struct Phantom<T: Scalar> {
    pub image: Array2<T>,
    pub class_id: usize,
    pub jitter: AffineJitter,
    /// `(name, row, col)` in pixels, after jitter.
    pub landmarks: Vec<(String, f64, f64)>,
}

fn ellipse_alpha(d_sq: f64) -> f64 {
    // Soft edge with finite support so pixels far from every organ are
    // exactly untouched.
    let x = (d_sq - 1.0) / 0.08;
    if x > 14.0 {
        0.0
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Renders a phantom. The RNG draw order is fixed (jitter, then the noise
/// field), independent of the organ list, so two classes rendered from the
/// same seed differ only where their organ sets differ.
pub fn generate_phantom<T: Scalar>(spec: &PhantomSpec, seed: u64) -> Phantom<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = spec.side;
    let jitter = AffineJitter::sample(spec, &mut rng);
    let noise = if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        Array2::from_shape_fn((side, side), |_| normal.sample(&mut rng))
    } else {
        Array2::zeros((side, side))
    };

    let mut img = Array2::from_shape_fn((side, side), |(r, c)| {
        0.25 + 0.40 * (r as f64 / side as f64) + 0.15 * (c as f64 / side as f64)
    });
    for organ in &spec.organs {
        let (cr, cc) =
            jitter.apply(side, organ.center_row * side as f64, organ.center_col * side as f64);
        let rr = organ.radius_row * side as f64 * jitter.scale;
        let rc = organ.radius_col * side as f64 * jitter.scale;
        for ((r, c), v) in img.indexed_iter_mut() {
            let dy = (r as f64 - cr) / rr;
            let dx = (c as f64 - cc) / rc;
            let alpha = ellipse_alpha(dy * dy + dx * dx);
            if alpha > 0.0 {
                *v += organ.intensity * alpha;
            }
        }
    }
    let image = Array2::from_shape_fn((side, side), |(r, c)| {
        cast::<T>((img[[r, c]] + noise[[r, c]]).clamp(0.0, 1.0))
    });

    let landmarks = spec
        .organs
        .iter()
        .map(|o| {
            let (r, c) =
                jitter.apply(side, o.center_row * side as f64, o.center_col * side as f64);
            (o.name.clone(), r, c)
        })
        .collect();

    Phantom { image, class_id: spec.class_id, jitter, landmarks }
}

/// Generates `count` phantoms cycling through the classes, with per-instance
/// seeds `seed + index`.
pub fn generate_phantom_set<T: Scalar>(
    count: usize,
    side: usize,
    seed: u64,
) -> Result<Vec<Phantom<T>>, DataError> {
    (0..count)
        .map(|i| {
            let spec = PhantomSpec::for_class(i % PHANTOM_CLASSES, side)?;
            Ok(generate_phantom(&spec, seed.wrapping_add(i as u64)))
        })
        .collect()
}

/// Writes a phantom set as 8-bit PNGs plus `labels.csv` (image,class) and
/// `landmarks.csv` (image,landmark,row,col) sidecars.
pub fn materialize_phantoms<T: Scalar>(
    dir: &Path,
    phantoms: &[Phantom<T>],
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let mut labels = csv::Writer::from_path(dir.join("labels.csv"))?;
    labels.write_record(["image", "class"])?;
    let mut landmarks = csv::Writer::from_path(dir.join("landmarks.csv"))?;
    landmarks.write_record(["image", "landmark", "row", "col"])?;

    for (i, phantom) in phantoms.iter().enumerate() {
        let name = format!("phantom_{i:04}.png");
        let (h, w) = phantom.image.dim();
        let bytes: Vec<u8> = phantom
            .image
            .iter()
            .map(|v| (v.to_f64().unwrap().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer matches dimensions");
        buf.save(dir.join(&name))?;
        labels.write_record([name.as_str(), &phantom.class_id.to_string()])?;
        for (lname, r, c) in &phantom.landmarks {
            landmarks.write_record([
                name.as_str(),
                lname.as_str(),
                &format!("{r:.3}"),
                &format!("{c:.3}"),
            ])?;
        }
    }
    labels.flush()?;
    landmarks.flush()?;
    Ok(())
}

/// Writes one grayscale `[0,1]` image as an 8-bit PNG.
pub fn save_gray_png<T: Scalar>(path: &Path, image: &Array2<T>) -> Result<(), DataError> {
    let (h, w) = image.dim();
    let bytes: Vec<u8> = image
        .iter()
        .map(|v| (v.to_f64().unwrap().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf =
        image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Writes raw label values as an 8-bit PNG (no rescaling).
pub fn save_label_png(path: &Path, labels: &Array2<u8>) -> Result<(), DataError> {
    let (h, w) = labels.dim();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, labels.iter().copied().collect())
        .expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Writes the requested text to a file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
