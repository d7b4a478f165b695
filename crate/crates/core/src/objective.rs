//! The four loss terms and their symmetrized, unweighted total.
//!
//! Order classification and appearance restoration supervise the student
//! branch alone; the global and local consistency terms compare student and
//! teacher embeddings, the teacher side entering as tape constants so no
//! gradient reaches it.

use crate::autodiff::{Tape, Var};
use crate::scalar::{cast, Scalar};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ObjectiveError {
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("zero-norm embedding fed to a consistency loss")]
    ZeroNorm,
    #[error("correspondence index {index} out of range for {len} local embeddings")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: String, got: String },
}

/// Which loss terms participate in training. The full method enables all
/// four; the ablation variants switch individual terms off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LossToggles {
    pub order: bool,
    pub restore: bool,
    pub global: bool,
    pub local: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub fn all() -> Self {
        Self { order: true, restore: true, global: true, local: true }
    }

    pub fn none() -> Self {
        Self { order: false, restore: false, global: false, local: false }
    }

    pub fn any(&self) -> bool {
        self.order || self.restore || self.global || self.local
    }
}

/// Scalar values of the loss components for one step. Disabled components
/// are recorded as zero, so `total` is always the exact sum of the four.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub order: f64,
    pub restore: f64,
    pub global: f64,
    pub local: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn zero() -> Self {
        Self { order: 0.0, restore: 0.0, global: 0.0, local: 0.0, total: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.order.is_finite()
            && self.restore.is_finite()
            && self.global.is_finite()
            && self.local.is_finite()
            && self.total.is_finite()
    }
}

fn all_finite<T: Scalar>(a: &Array2<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Patch order classification loss: batch mean of the per-image sum of
/// per-token cross-entropies against the permutation's original indices.
pub fn order_loss<T: Scalar>(
    tape: &mut Tape<T>,
    items: &[(Var, &[usize])],
) -> Result<Var, ObjectiveError> {
    assert!(!items.is_empty(), "order_loss needs at least one item");
    let mut acc: Option<Var> = None;
    for (logits, perm) in items {
        let value = tape.value(*logits);
        if !all_finite(value) {
            return Err(ObjectiveError::NonFinite("order logits"));
        }
        if value.nrows() != perm.len() {
            return Err(ObjectiveError::ShapeMismatch {
                what: "order logits rows",
                expected: perm.len().to_string(),
                got: value.nrows().to_string(),
            });
        }
        let ce = tape.cross_entropy_rows(*logits, perm.to_vec());
        acc = Some(match acc {
            Some(a) => tape.add(a, ce),
            None => ce,
        });
    }
    let sum = acc.expect("non-empty batch");
    Ok(tape.scale(sum, cast(1.0 / items.len() as f64)))
}

/// Patch appearance restoration loss: batch mean of the per-image summed
/// squared distances between predicted and pre-distortion patch pixels.
pub fn restore_loss<T: Scalar>(
    tape: &mut Tape<T>,
    items: &[(Var, &Array2<T>)],
) -> Result<Var, ObjectiveError> {
    assert!(!items.is_empty(), "restore_loss needs at least one item");
    let mut acc: Option<Var> = None;
    for (restored, target) in items {
        let got = tape.value(*restored).dim();
        if got != target.dim() {
            return Err(ObjectiveError::ShapeMismatch {
                what: "restoration target",
                expected: format!("{:?}", got),
                got: format!("{:?}", target.dim()),
            });
        }
        let t = tape.constant((*target).clone());
        let diff = tape.sub(*restored, t);
        let sq = tape.sum_squares(diff);
        acc = Some(match acc {
            Some(a) => tape.add(a, sq),
            None => sq,
        });
    }
    let sum = acc.expect("non-empty batch");
    Ok(tape.scale(sum, cast(1.0 / items.len() as f64)))
}

/// Per-pair global consistency term `|ybar_s - ybar_t|^2`, algebraically
/// `2 - 2 cos(y_s, y_t)`.
pub fn global_consistency_term<T: Scalar>(
    tape: &mut Tape<T>,
    y_s: Var,
    y_t: Var,
) -> Result<Var, ObjectiveError> {
    for v in [y_s, y_t] {
        if tape.row_norms(v).iter().any(|n| *n == T::zero()) {
            return Err(ObjectiveError::ZeroNorm);
        }
    }
    let ns = tape.normalize_rows(y_s);
    let nt = tape.normalize_rows(y_t);
    let diff = tape.sub(ns, nt);
    Ok(tape.sum_squares(diff))
}

/// One pass of the global consistency loss: batch mean of per-pair terms.
pub fn global_consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pairs: &[(Var, Var)],
) -> Result<Var, ObjectiveError> {
    assert!(!pairs.is_empty(), "global_consistency_loss needs at least one pair");
    let mut acc: Option<Var> = None;
    for &(y_s, y_t) in pairs {
        let term = global_consistency_term(tape, y_s, y_t)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let sum = acc.expect("non-empty batch");
    Ok(tape.scale(sum, cast(1.0 / pairs.len() as f64)))
}

/// One sample of one pass of the local consistency loss.
pub struct LocalConsistencyItem {
    /// `N x H` student local embeddings for this pass.
    pub student_locals: Var,
    /// `N x H` teacher local embeddings for this pass.
    pub teacher_locals: Var,
    /// Overlap patch indices into the student crop's token order.
    pub student_indices: Vec<usize>,
    /// Matching overlap patch indices into the teacher crop's token order.
    pub teacher_indices: Vec<usize>,
    /// The student pass's indicator: false when its crop was order-distorted.
    pub indicator: bool,
}

/// One pass of the local consistency loss: batch mean (over all items,
/// including indicator-zero ones) of the summed per-pair squared distances
/// between normalized local embeddings.
pub fn local_consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    items: &[LocalConsistencyItem],
) -> Result<Var, ObjectiveError> {
    assert!(!items.is_empty(), "local_consistency_loss needs at least one item");
    let mut acc: Option<Var> = None;
    for item in items {
        if !item.indicator {
            continue;
        }
        if item.student_indices.len() != item.teacher_indices.len() {
            return Err(ObjectiveError::ShapeMismatch {
                what: "correspondence columns",
                expected: item.student_indices.len().to_string(),
                got: item.teacher_indices.len().to_string(),
            });
        }
        for (v, idx) in [
            (item.student_locals, &item.student_indices),
            (item.teacher_locals, &item.teacher_indices),
        ] {
            let len = tape.value(v).nrows();
            if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
                return Err(ObjectiveError::IndexOutOfRange { index: bad, len });
            }
        }
        let s = tape.select_rows(item.student_locals, item.student_indices.clone());
        let t = tape.select_rows(item.teacher_locals, item.teacher_indices.clone());
        if tape.row_norms(s).iter().any(|n| *n == T::zero())
            || tape.row_norms(t).iter().any(|n| *n == T::zero())
        {
            return Err(ObjectiveError::ZeroNorm);
        }
        let ns = tape.normalize_rows(s);
        let nt = tape.normalize_rows(t);
        let diff = tape.sub(ns, nt);
        let sq = tape.sum_squares(diff);
        acc = Some(match acc {
            Some(a) => tape.add(a, sq),
            None => sq,
        });
    }
    let inv_b: T = cast(1.0 / items.len() as f64);
    Ok(match acc {
        Some(sum) => tape.scale(sum, inv_b),
        // Every indicator was zero: the loss is exactly zero.
        None => tape.constant(Array2::zeros((1, 1))),
    })
}

/// Optional per-component scalars entering the total.
#[derive(Default)]
pub struct LossTerms {
    pub order: Option<Var>,
    pub restore: Option<Var>,
    pub global: Option<Var>,
    pub local: Option<Var>,
}

/// Unweighted sum of the enabled components. Returns the differentiable
/// total (when any component is present) and the logged bundle; disabled
/// components enter the bundle as zero.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, terms: &LossTerms) -> (Option<Var>, LossBundle) {
    let read = |tape: &Tape<T>, v: &Option<Var>| -> f64 {
        v.map(|v| tape.scalar(v).to_f64().unwrap()).unwrap_or(0.0)
    };
    let bundle_parts = (
        read(tape, &terms.order),
        read(tape, &terms.restore),
        read(tape, &terms.global),
        read(tape, &terms.local),
    );
    let mut total: Option<Var> = None;
    for term in [terms.order, terms.restore, terms.global, terms.local].into_iter().flatten() {
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let bundle = LossBundle {
        order: bundle_parts.0,
        restore: bundle_parts.1,
        global: bundle_parts.2,
        local: bundle_parts.3,
        total: bundle_parts.0 + bundle_parts.1 + bundle_parts.2 + bundle_parts.3,
    };
    (total, bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn order_loss_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Array2::zeros((4, 4)));
        let perm = vec![2usize, 0, 3, 1];
        let loss = order_loss(&mut tape, &[(logits, &perm)]).unwrap();
        let expect = 4.0 * 4.0f64.ln();
        assert!((tape.scalar(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn order_loss_confident_prediction_vanishes() {
        let mut tape = Tape::<f64>::new();
        let n = 4;
        let mut logits = Array2::zeros((n, n));
        for i in 0..n {
            logits[[i, i]] = 60.0;
        }
        let v = tape.constant(logits);
        let perm: Vec<usize> = (0..n).collect();
        let loss = order_loss(&mut tape, &[(v, &perm)]).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-6);
    }

    #[test]
    fn order_loss_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let mut logits = Array2::zeros((2, 2));
        logits[[0, 0]] = f64::NAN;
        let v = tape.constant(logits);
        let perm = vec![0usize, 1];
        assert_eq!(
            order_loss(&mut tape, &[(v, &perm)]).unwrap_err(),
            ObjectiveError::NonFinite("order logits")
        );
    }

    #[test]
    fn restore_loss_exact_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = Array2::from_shape_fn((4, 16), |_| rng.random::<f64>());

        let mut tape = Tape::<f64>::new();
        let pred = tape.constant(target.clone());
        let loss = restore_loss(&mut tape, &[(pred, &target)]).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);

        let c = 0.3;
        let mut tape = Tape::<f64>::new();
        let shifted = tape.constant(target.mapv(|v| v + c));
        let loss = restore_loss(&mut tape, &[(shifted, &target)]).unwrap();
        let expect = 4.0 * 16.0 * c * c;
        assert!((tape.scalar(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn restore_loss_batch_mean_invariant_to_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = Array2::from_shape_fn((4, 16), |_| rng.random::<f64>());
        let pred_arr = target.mapv(|v| v + 0.1);

        let mut tape = Tape::<f64>::new();
        let p = tape.constant(pred_arr.clone());
        let single = restore_loss(&mut tape, &[(p, &target)]).unwrap();
        let single_val = tape.scalar(single);

        let mut tape = Tape::<f64>::new();
        let p1 = tape.constant(pred_arr.clone());
        let p2 = tape.constant(pred_arr);
        let doubled = restore_loss(&mut tape, &[(p1, &target), (p2, &target)]).unwrap();
        assert!((tape.scalar(doubled) - single_val).abs() < 1e-12);
    }

    #[test]
    fn global_term_identities() {
        let mut tape = Tape::<f64>::new();
        let y = tape.constant(Array2::from_shape_vec((1, 2), vec![0.3, 0.4]).unwrap());
        let same = global_consistency_term(&mut tape, y, y).unwrap();
        assert!(tape.scalar(same).abs() < 1e-12);

        let a = tape.constant(Array2::from_shape_vec((1, 2), vec![2.0, 0.0]).unwrap());
        let b = tape.constant(Array2::from_shape_vec((1, 2), vec![0.0, 5.0]).unwrap());
        let ortho = global_consistency_term(&mut tape, a, b).unwrap();
        assert!((tape.scalar(ortho) - 2.0).abs() < 1e-9);

        let neg = tape.constant(Array2::from_shape_vec((1, 2), vec![-2.0, 0.0]).unwrap());
        let anti = global_consistency_term(&mut tape, a, neg).unwrap();
        assert!((tape.scalar(anti) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn global_term_equals_cosine_form_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let expect = 2.0 - 2.0 * dot / (na * nb);

            let scale = rng.random::<f64>() * 10.0 + 0.01;
            let mut tape = Tape::<f64>::new();
            let va = tape.constant(Array2::from_shape_vec((1, 8), a.clone()).unwrap());
            let vb = tape.constant(
                Array2::from_shape_vec((1, 8), b.iter().map(|v| v * scale).collect()).unwrap(),
            );
            let term = global_consistency_term(&mut tape, va, vb).unwrap();
            assert!((tape.scalar(term) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn global_term_rejects_zero_norm() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Array2::zeros((1, 3)));
        let y = tape.constant(Array2::from_elem((1, 3), 1.0));
        assert_eq!(
            global_consistency_term(&mut tape, z, y).unwrap_err(),
            ObjectiveError::ZeroNorm
        );
    }

    fn local_item(
        tape: &mut Tape<f64>,
        student: Array2<f64>,
        teacher: Array2<f64>,
        idx: Vec<usize>,
        indicator: bool,
    ) -> LocalConsistencyItem {
        let s = tape.constant(student);
        let t = tape.constant(teacher);
        LocalConsistencyItem {
            student_locals: s,
            teacher_locals: t,
            student_indices: idx.clone(),
            teacher_indices: idx,
            indicator,
        }
    }

    #[test]
    fn local_loss_indicator_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let emb = Array2::from_shape_fn((6, 5), |_| rng.random::<f64>() + 0.1);
        let other = Array2::from_shape_fn((6, 5), |_| rng.random::<f64>() + 0.1);
        let mut tape = Tape::<f64>::new();
        let item = local_item(&mut tape, emb, other, vec![0, 1, 2], false);
        let loss = local_consistency_loss(&mut tape, &[item]).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn local_loss_identical_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = Array2::from_shape_fn((6, 5), |_| rng.random::<f64>() + 0.1);
        let mut tape = Tape::<f64>::new();
        let item = local_item(&mut tape, emb.clone(), emb, vec![0, 3, 5], true);
        let loss = local_consistency_loss(&mut tape, &[item]).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-12);
    }

    #[test]
    fn local_loss_single_orthogonal_pair() {
        let mut student = Array2::zeros((2, 2));
        student[[0, 0]] = 3.0;
        let mut teacher = Array2::zeros((2, 2));
        teacher[[0, 1]] = 7.0;
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(student);
        let t = tape.constant(teacher);
        let item = LocalConsistencyItem {
            student_locals: s,
            teacher_locals: t,
            student_indices: vec![0],
            teacher_indices: vec![0],
            indicator: true,
        };
        let loss = local_consistency_loss(&mut tape, &[item]).unwrap();
        assert!((tape.scalar(loss) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn local_loss_index_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let item = local_item(
            &mut tape,
            Array2::from_elem((3, 2), 1.0),
            Array2::from_elem((3, 2), 1.0),
            vec![0, 9],
            true,
        );
        assert_eq!(
            local_consistency_loss(&mut tape, &[item]).unwrap_err(),
            ObjectiveError::IndexOutOfRange { index: 9, len: 3 }
        );
    }

    #[test]
    fn local_loss_divides_by_full_batch() {
        // One active and one indicator-zero sample: denominator is still 2.
        let mut student = Array2::zeros((1, 2));
        student[[0, 0]] = 1.0;
        let mut teacher = Array2::zeros((1, 2));
        teacher[[0, 1]] = 1.0;
        let mut tape = Tape::<f64>::new();
        let active = local_item(&mut tape, student.clone(), teacher.clone(), vec![0], true);
        let gated = local_item(&mut tape, student, teacher, vec![0], false);
        let loss = local_consistency_loss(&mut tape, &[active, gated]).unwrap();
        assert!((tape.scalar(loss) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn total_loss_sums_components() {
        let mut tape = Tape::<f64>::new();
        let parts: Vec<Var> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&v| tape.constant(Array2::from_elem((1, 1), v)))
            .collect();
        let terms = LossTerms {
            order: Some(parts[0]),
            restore: Some(parts[1]),
            global: Some(parts[2]),
            local: Some(parts[3]),
        };
        let (total, bundle) = total_loss(&mut tape, &terms);
        assert_eq!(tape.scalar(total.unwrap()), 10.0);
        assert_eq!(bundle.total, 10.0);
        assert_eq!(bundle.order + bundle.restore + bundle.global + bundle.local, bundle.total);
    }

    #[test]
    fn total_loss_excludes_disabled_component() {
        let mut tape = Tape::<f64>::new();
        let order = tape.constant(Array2::from_elem((1, 1), 1.5));
        let terms = LossTerms { order: Some(order), ..Default::default() };
        let (total, bundle) = total_loss(&mut tape, &terms);
        assert_eq!(tape.scalar(total.unwrap()), 1.5);
        assert_eq!(bundle.local, 0.0);
        assert_eq!(bundle.total, 1.5);
    }

    #[test]
    fn total_loss_all_disabled() {
        let mut tape = Tape::<f64>::new();
        let (total, bundle) = total_loss(&mut tape, &LossTerms::default());
        assert!(total.is_none());
        assert_eq!(bundle, LossBundle::zero());
    }
}
