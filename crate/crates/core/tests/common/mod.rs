//! Shared oracles for the integration suites: a finite-difference gradient
//! harness over the public parameter surface, a fixed loss fixture, and the
//! lazily-trained desk-scale model reused across acceptance criteria.

use ndarray::Array2;
use peac_core::autodiff::{Gradients, Tape, Var};
use peac_core::data::{generate_phantom_set, Phantom};
use peac_core::distortion::{apply_appearance_distortion, apply_patch_permutation};
use peac_core::geometry::{
    extract_crops, overlap_correspondence, patchify, prepare_seed_image_sampled,
    sample_crop_pair, GridSpec,
};
use peac_core::model::{
    forward_patches, Binding, EncoderConfig, OutputRequest, StudentTeacher,
};
use peac_core::objective::{
    global_consistency_loss, local_consistency_loss, order_loss, restore_loss,
    LocalConsistencyItem, LossBundle,
};
use peac_core::pretrain::{TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

/// One of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Order,
    Restore,
    Global,
    Local,
}

pub const ALL_TERMS: [Term; 4] = [Term::Order, Term::Restore, Term::Global, Term::Local];

/// Fixed inputs for a single-image loss evaluation: pass 1 feeds an
/// appearance-distorted `x` to the student (indicator on), pass 2 feeds an
/// order-distorted `x'` (indicator off), exercising the per-pass gating.
pub struct LossFixture {
    pub cfg: EncoderConfig,
    pub grid: GridSpec,
    pub x_student: Array2<f64>,
    pub x_clean: Array2<f64>,
    pub xp_student: Array2<f64>,
    pub xp_clean: Array2<f64>,
    pub permutation: Vec<usize>,
    pub restore_target: Array2<f64>,
    pub corr_a: Vec<usize>,
    pub corr_b: Vec<usize>,
}

impl LossFixture {
    pub fn build(cfg: EncoderConfig, grid: GridSpec, seed: u64) -> Self {
        assert_eq!(cfg.patch_side, grid.m());
        assert_eq!(cfg.grid_side, grid.k());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_fn((40, 40), |_| rng.random::<f64>());
        let plan = sample_crop_pair(grid, &mut rng);
        let inner = prepare_seed_image_sampled(&raw, &plan, &mut rng).unwrap();
        let (x, xp) = extract_crops(&inner, &plan).unwrap();
        let corr = overlap_correspondence(&plan);

        let m = grid.m();
        let x_student = apply_appearance_distortion(&x, &mut rng, m);
        let mut permutation: Vec<usize> = (0..grid.patches_per_crop()).collect();
        permutation.shuffle(&mut rng);
        let xp_student = apply_patch_permutation(&xp, &permutation, m);

        Self {
            cfg,
            grid,
            restore_target: patchify(&x, m),
            x_student,
            x_clean: x,
            xp_student,
            xp_clean: xp,
            permutation,
            corr_a: corr.indices_in_a().collect(),
            corr_b: corr.indices_in_b().collect(),
        }
    }

    /// Builds the requested term on a fresh tape against the given model.
    pub fn term_var(&self, st: &StudentTeacher<f64>, term: Term, tape: &mut Tape<f64>) -> Var {
        let m = self.grid.m();
        let grid = (self.grid.k(), self.grid.k());
        let fwd = |tape: &mut Tape<f64>, crop: &Array2<f64>, binding, req| {
            forward_patches(tape, match binding {
                Binding::Trainable => &st.student,
                Binding::Frozen => &st.teacher,
            }, &self.cfg, &patchify(crop, m), grid, binding, req)
            .unwrap()
        };
        match term {
            Term::Order => {
                let req = OutputRequest { order_logits: true, ..Default::default() };
                let s1 = fwd(tape, &self.x_student, Binding::Trainable, req);
                // Pass-1 input is appearance-distorted only: identity targets.
                let identity: Vec<usize> = (0..self.grid.patches_per_crop()).collect();
                order_loss(tape, &[(s1.order_logits.unwrap(), &identity)]).unwrap()
            }
            Term::Restore => {
                let req = OutputRequest { restored: true, ..Default::default() };
                let s1 = fwd(tape, &self.x_student, Binding::Trainable, req);
                restore_loss(tape, &[(s1.restored.unwrap(), &self.restore_target)]).unwrap()
            }
            Term::Global => {
                let req = OutputRequest::consistency(true, false);
                let s1 = fwd(tape, &self.x_student, Binding::Trainable, req);
                let t1 = fwd(tape, &self.xp_clean, Binding::Frozen, req);
                let s2 = fwd(tape, &self.xp_student, Binding::Trainable, req);
                let t2 = fwd(tape, &self.x_clean, Binding::Frozen, req);
                let p1 = global_consistency_loss(
                    tape,
                    &[(s1.global_embed.unwrap(), t1.global_embed.unwrap())],
                )
                .unwrap();
                let p2 = global_consistency_loss(
                    tape,
                    &[(s2.global_embed.unwrap(), t2.global_embed.unwrap())],
                )
                .unwrap();
                tape.add(p1, p2)
            }
            Term::Local => {
                let req = OutputRequest::consistency(false, true);
                let s1 = fwd(tape, &self.x_student, Binding::Trainable, req);
                let t1 = fwd(tape, &self.xp_clean, Binding::Frozen, req);
                let s2 = fwd(tape, &self.xp_student, Binding::Trainable, req);
                let t2 = fwd(tape, &self.x_clean, Binding::Frozen, req);
                let p1 = local_consistency_loss(
                    tape,
                    &[LocalConsistencyItem {
                        student_locals: s1.local_embeds.unwrap(),
                        teacher_locals: t1.local_embeds.unwrap(),
                        student_indices: self.corr_a.clone(),
                        teacher_indices: self.corr_b.clone(),
                        indicator: true,
                    }],
                )
                .unwrap();
                let p2 = local_consistency_loss(
                    tape,
                    &[LocalConsistencyItem {
                        student_locals: s2.local_embeds.unwrap(),
                        teacher_locals: t2.local_embeds.unwrap(),
                        student_indices: self.corr_b.clone(),
                        teacher_indices: self.corr_a.clone(),
                        // Pass-2 input was order-distorted.
                        indicator: false,
                    }],
                )
                .unwrap();
                tape.add(p1, p2)
            }
        }
    }

    pub fn term_value(&self, st: &StudentTeacher<f64>, term: Term) -> f64 {
        let mut tape = Tape::new();
        let v = self.term_var(st, term, &mut tape);
        tape.scalar(v)
    }

    pub fn term_gradients(&self, st: &StudentTeacher<f64>, term: Term) -> (Gradients<f64>, f64) {
        let mut tape = Tape::new();
        let v = self.term_var(st, term, &mut tape);
        let value = tape.scalar(v);
        (tape.backward(v, st.student.len()), value)
    }
}

/// Denominator floor for relative gradient errors: one thousandth of the
/// dominant gradient magnitude (at least 1). Central differences at a fixed
/// step carry O(h^2) truncation error in absolute terms, so entries whose
/// gradient sits several orders below the dominant scale must be compared
/// absolutely; a genuinely wrong backward pass still errs at the gradient's
/// own scale and blows far past any such floor.
pub fn grad_scale_floor(grads: &Gradients<f64>, n_params: usize) -> f64 {
    let mut max_abs: f64 = 0.0;
    for id in 0..n_params {
        if let Some(g) = grads.get(id) {
            for v in g.iter() {
                max_abs = max_abs.max(v.abs());
            }
        }
    }
    1e-3 * max_abs.max(1.0)
}

/// Max relative error between analytic gradients and central finite
/// differences over every student parameter. The relative error divides by
/// `max(|analytic|, |fd|, floor)`; the floor turns the comparison absolute
/// for near-zero gradients, where FD noise would dominate a pure ratio.
pub fn max_rel_error_vs_fd(
    st: &mut StudentTeacher<f64>,
    eval: impl Fn(&StudentTeacher<f64>) -> f64,
    analytic: &Gradients<f64>,
    h: f64,
    floor: f64,
) -> f64 {
    let mut max_rel: f64 = 0.0;
    for id in 0..st.student.len() {
        let shape = st.student.value(id).raw_dim();
        let zero = Array2::zeros(shape.clone());
        let n_rows = shape[0];
        let n_cols = shape[1];
        for r in 0..n_rows {
            for c in 0..n_cols {
                let original = st.student.value(id)[[r, c]];
                st.student.value_mut(id)[[r, c]] = original + h;
                let plus = eval(st);
                st.student.value_mut(id)[[r, c]] = original - h;
                let minus = eval(st);
                st.student.value_mut(id)[[r, c]] = original;
                let fd = (plus - minus) / (2.0 * h);
                let a = analytic.get(id).unwrap_or(&zero)[[r, c]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
    }
    max_rel
}

/// Desk-scale training shared by the acceptance criteria that need a trained
/// model: 200 steps, batch 8, desk grid, 64 phantoms.
pub struct TrainedFixture {
    pub config: TrainConfig,
    pub phantoms: Vec<Phantom<f64>>,
    pub images: Vec<Array2<f64>>,
    pub history: Vec<LossBundle>,
    pub trainer: Trainer<f64>,
    /// The model as initialized, before any training.
    pub random_init: StudentTeacher<f64>,
    pub train_seconds: f64,
}

static TRAINED: OnceLock<TrainedFixture> = OnceLock::new();

pub fn trained() -> &'static TrainedFixture {
    TRAINED.get_or_init(|| {
        let config = TrainConfig { seed: 11, ..TrainConfig::default() };
        assert_eq!(config.epochs, 25, "desk default epochs");
        assert_eq!(config.batch_size, 8, "desk default batch");
        let phantoms: Vec<Phantom<f64>> = generate_phantom_set(64, 96, 101).unwrap();
        let images: Vec<Array2<f64>> = phantoms.iter().map(|p| p.image.clone()).collect();
        let mut trainer = Trainer::<f64>::new(config.clone(), images.len()).unwrap();
        assert_eq!(trainer.total_steps(), 200, "desk run is 200 steps");
        let random_init = trainer.model().clone();
        let mut history = Vec::with_capacity(200);
        let start = Instant::now();
        trainer.run(&images, |_, _, bundle| history.push(*bundle)).unwrap();
        let train_seconds = start.elapsed().as_secs_f64();
        TrainedFixture { config, phantoms, images, history, trainer, random_init, train_seconds }
    })
}
