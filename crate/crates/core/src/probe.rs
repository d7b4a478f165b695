//! Frozen-encoder linear probe: multinomial logistic regression on pooled
//! features, an 80/20 split, and deterministic full-batch gradient descent.

use crate::geometry::bilinear_resize;
use crate::model::{encode, EncoderConfig, ModelError, ParamStore};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("linear probe needs at least two classes")]
    SingleClass,
    #[error("feature/label length mismatch: {features} features vs {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("dataset too small to split: {0} samples")]
    TooSmall(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Probe outcome on the held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Per-class accuracy over classes present in the evaluation split.
    pub per_class: Vec<(usize, f64)>,
    pub n_eval: usize,
    pub checkpoint_id: String,
}

impl fmt::Display for ProbeResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "checkpoint: {}", self.checkpoint_id)?;
        writeln!(f, "accuracy: {:.4} (n_eval={})", self.accuracy, self.n_eval)?;
        for (class, acc) in &self.per_class {
            writeln!(f, "class {class}: {acc:.4}")?;
        }
        Ok(())
    }
}

/// Pooled feature per image from a frozen encoder: images are resized to the
/// crop side and mean-pooled token features are returned, one row per image.
pub fn extract_features<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    images: &[Array2<T>],
) -> Result<Array2<T>, ProbeError> {
    let side = cfg.crop_side();
    let mut out = Array2::zeros((images.len(), cfg.dim));
    for (i, img) in images.iter().enumerate() {
        let sized = if img.dim() == (side, side) {
            img.clone()
        } else {
            bilinear_resize(img, side, side)
        };
        let enc = encode(store, cfg, &sized, false)?;
        out.row_mut(i).assign(&enc.pooled);
    }
    Ok(out)
}

/// Multinomial logistic regression on an 80/20 split, deterministic under
/// `split_seed`. Features are standardized on training statistics; the fit
/// is plain full-batch gradient descent from zero weights.
pub fn linear_probe<T: Scalar>(
    features: &Array2<T>,
    labels: &[usize],
    split_seed: u64,
    checkpoint_id: &str,
) -> Result<ProbeResult, ProbeError> {
    let n = features.nrows();
    if n != labels.len() {
        return Err(ProbeError::LengthMismatch { features: n, labels: labels.len() });
    }
    let classes = labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(ProbeError::SingleClass);
    }
    if n < 5 {
        return Err(ProbeError::TooSmall(n));
    }

    let x = features.mapv(|v| v.to_f64().unwrap());
    let d = x.ncols();

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    order.shuffle(&mut rng);
    let n_train = (n * 4) / 5;
    let (train_idx, eval_idx) = order.split_at(n_train);

    // Standardize on training statistics.
    let mut mean = Array1::<f64>::zeros(d);
    for &i in train_idx {
        mean += &x.row(i);
    }
    mean /= n_train as f64;
    let mut std = Array1::<f64>::zeros(d);
    for &i in train_idx {
        let diff = &x.row(i) - &mean;
        std += &diff.mapv(|v| v * v);
    }
    std = (std / n_train as f64).mapv(|v| v.sqrt().max(1e-12));

    let feat = |i: usize| -> Array1<f64> {
        let mut row = (&x.row(i) - &mean) / &std;
        row.append(Axis(0), Array1::ones(1).view()).unwrap();
        row
    };

    // Gradient descent on the mean cross-entropy with light L2.
    let mut w = Array2::<f64>::zeros((d + 1, classes));
    let lr = 0.5;
    let l2 = 1e-4;
    let iters = 400;
    for _ in 0..iters {
        let mut grad = Array2::<f64>::zeros((d + 1, classes));
        for &i in train_idx {
            let xi = feat(i);
            let logits = xi.dot(&w);
            let max = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let exp = logits.mapv(|v| (v - max).exp());
            let p = &exp / exp.sum();
            for c in 0..classes {
                let delta = p[c] - f64::from(labels[i] == c);
                for j in 0..=d {
                    grad[[j, c]] += xi[j] * delta;
                }
            }
        }
        grad /= n_train as f64;
        grad += &w.mapv(|v| v * l2);
        w -= &grad.mapv(|v| v * lr);
    }

    let mut correct = 0usize;
    let mut class_total = vec![0usize; classes];
    let mut class_correct = vec![0usize; classes];
    for &i in eval_idx {
        let logits = feat(i).dot(&w);
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(c, _)| c)
            .unwrap();
        class_total[labels[i]] += 1;
        if pred == labels[i] {
            correct += 1;
            class_correct[labels[i]] += 1;
        }
    }
    let n_eval = eval_idx.len();
    if n_eval == 0 {
        return Err(ProbeError::TooSmall(n));
    }
    let per_class = (0..classes)
        .filter(|&c| class_total[c] > 0)
        .map(|c| (c, class_correct[c] as f64 / class_total[c] as f64))
        .collect();
    Ok(ProbeResult {
        accuracy: correct as f64 / n_eval as f64,
        per_class,
        n_eval,
        checkpoint_id: checkpoint_id.to_string(),
    })
}
