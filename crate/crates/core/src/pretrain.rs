//! Student-teacher training loop: sampling, distortion, dual symmetric
//! passes, SGD with momentum, EMA, and checkpointing.
//!
//! Each step runs two symmetric passes per image. Pass 1 feeds the distorted
//! `x` to the student and the clean `x'` to the teacher; pass 2 swaps the
//! crops (with freshly sampled student distortions). The order and
//! restoration terms come from pass 1; the consistency terms sum both
//! passes, each gated by its own pass's indicator.

use crate::autodiff::{Gradients, Tape};
use crate::distortion::{maybe_distort, DistortionConfig};
use crate::geometry::{
    extract_crops, overlap_correspondence, patchify, prepare_seed_image_sampled,
    sample_crop_pair, GeometryError, GridSpec,
};
use crate::model::{
    forward_patches, Binding, EncoderConfig, ModelError, OutputRequest, StudentTeacher,
};
use crate::objective::{
    global_consistency_loss, local_consistency_loss, order_loss, restore_loss, total_loss,
    LocalConsistencyItem, LossBundle, LossTerms, LossToggles, ObjectiveError,
};
use crate::scalar::{cast, Scalar};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(
        "non-finite loss at step {step}: order={order} restore={restore} \
         global={global} local={local}"
    )]
    NonFiniteLoss { step: u64, order: f64, restore: f64, global: f64, local: f64 },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {got} unsupported (this build reads version {expected})")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config parse error: {0}")]
    ConfigParse(String),
}

/// Flat training configuration; the config file uses exactly these keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub warmup_epochs: u32,
    pub epochs: u32,
    pub batch_size: usize,
    pub ema_alpha: f64,
    pub seed: u64,
    pub p_od: f64,
    pub p_ad: f64,
    pub loss_order: bool,
    pub loss_restore: bool,
    pub loss_global: bool,
    pub loss_local: bool,
    pub grid_n: usize,
    pub grid_m: usize,
    pub grid_k: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub ckpt_every_epochs: u32,
}

impl Default for TrainConfig {
    /// Desk defaults: the (11, 8, 8) grid and a small 4-block encoder, with
    /// the published optimizer settings (SGD lr 0.1, momentum 0.9, 5 warmup
    /// epochs, EMA 0.999, batch 8).
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            warmup_epochs: 5,
            epochs: 25,
            batch_size: 8,
            ema_alpha: 0.999,
            seed: 0,
            p_od: 0.5,
            p_ad: 0.5,
            loss_order: true,
            loss_restore: true,
            loss_global: true,
            loss_local: true,
            grid_n: 11,
            grid_m: 8,
            grid_k: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            grad_clip: 0.0,
            ckpt_every_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(TrainError::InvalidConfig(format!(
                "ema_alpha must lie in (0,1), got {}",
                self.ema_alpha
            )));
        }
        for (name, p) in [("p_od", self.p_od), ("p_ad", self.p_ad)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TrainError::InvalidConfig(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if self.grad_clip < 0.0 {
            return Err(TrainError::InvalidConfig("grad_clip must be non-negative".into()));
        }
        self.grid()?;
        self.encoder().validate()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec, GeometryError> {
        GridSpec::new(self.grid_n, self.grid_m, self.grid_k)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            patch_side: self.grid_m,
            grid_side: self.grid_k,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn toggles(&self) -> LossToggles {
        LossToggles {
            order: self.loss_order,
            restore: self.loss_restore,
            global: self.loss_global,
            local: self.loss_local,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, TrainError> {
        toml::from_str(s).map_err(|e| TrainError::ConfigParse(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay reaching
/// zero at the final step.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let last = total_steps.saturating_sub(1);
    if last <= warmup_steps {
        return base_lr;
    }
    let t = (step - warmup_steps) as f64 / (last - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One line of the training log (line-delimited JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub order: f64,
    pub restore: f64,
    pub global: f64,
    pub local: f64,
    pub total: f64,
}

impl StepRecord {
    pub fn new(step: u64, lr: f64, bundle: &LossBundle) -> Self {
        Self {
            step,
            lr,
            order: bundle.order,
            restore: bundle.restore,
            global: bundle.global,
            local: bundle.local,
            total: bundle.total,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

const CKPT_MAGIC: &[u8; 8] = b"PEACCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct CheckpointBody<T: Scalar> {
    cfg: TrainConfig,
    step: u64,
    steps_per_epoch: u64,
    st: StudentTeacher<T>,
    velocity: Vec<Array2<T>>,
    data_rng: RngState,
    distort_rng: RngState,
    epoch_order: Vec<u32>,
    cursor: usize,
}

/// Training state: model pair, optimizer state, RNG streams, and progress.
///
/// The base seed feeds three independent ChaCha streams (data sampling,
/// distortion, initialization), so toggling distortions never perturbs crop
/// sampling.
#[derive(Clone)]
pub struct Trainer<T: Scalar> {
    cfg: TrainConfig,
    grid: GridSpec,
    encoder_cfg: EncoderConfig,
    st: StudentTeacher<T>,
    velocity: Vec<Array2<T>>,
    step: u64,
    steps_per_epoch: u64,
    data_rng: ChaCha8Rng,
    distort_rng: ChaCha8Rng,
    epoch_order: Vec<u32>,
    cursor: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, n_images: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let encoder_cfg = cfg.encoder();
        let steps_per_epoch = (n_images / cfg.batch_size) as u64;
        if steps_per_epoch == 0 {
            return Err(TrainError::InvalidConfig(format!(
                "dataset of {n_images} images is smaller than one batch of {}",
                cfg.batch_size
            )));
        }
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s);
            rng
        };
        let data_rng = stream(0);
        let distort_rng = stream(1);
        let mut init_rng = stream(2);
        let st = StudentTeacher::init(&encoder_cfg, cfg.ema_alpha, &mut init_rng);
        let velocity = (0..st.student.len())
            .map(|i| Array2::zeros(st.student.value(i).raw_dim()))
            .collect();
        Ok(Self {
            cfg,
            grid,
            encoder_cfg,
            st,
            velocity,
            step: 0,
            steps_per_epoch,
            data_rng,
            distort_rng,
            epoch_order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder_cfg
    }

    pub fn model(&self) -> &StudentTeacher<T> {
        &self.st
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.epochs as u64 * self.steps_per_epoch
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(
            self.step,
            self.total_steps(),
            self.cfg.warmup_epochs as u64 * self.steps_per_epoch,
            self.cfg.lr,
        )
    }

    /// Builds the per-step loss graph and runs backward, without touching the
    /// parameters. `None` gradients mean every loss toggle is off.
    pub fn forward_backward(
        &mut self,
        batch: &[&Array2<T>],
    ) -> Result<(Option<Gradients<T>>, LossBundle), TrainError> {
        assert!(!batch.is_empty(), "empty batch");
        let toggles = self.cfg.toggles();
        let m = self.grid.m();
        let dcfg = DistortionConfig { p_od: self.cfg.p_od, p_ad: self.cfg.p_ad, patch_side: m };
        let full_grid = (self.grid.k(), self.grid.k());
        let need_pass2 = toggles.global || toggles.local;

        let mut tape = Tape::new();
        // Per-image raw material, collected first so loss builders can borrow.
        let mut order_targets: Vec<Vec<usize>> = Vec::new();
        let mut restore_targets: Vec<Array2<T>> = Vec::new();
        let mut order_logit_vars = Vec::new();
        let mut restore_vars = Vec::new();
        let mut global_pairs_1 = Vec::new();
        let mut global_pairs_2 = Vec::new();
        let mut local_items_1 = Vec::new();
        let mut local_items_2 = Vec::new();

        for raw in batch {
            let plan = sample_crop_pair(self.grid, &mut self.data_rng);
            let inner = prepare_seed_image_sampled(raw, &plan, &mut self.data_rng)?;
            let (x, xp) = extract_crops(&inner, &plan)?;
            let corr = overlap_correspondence(&plan);

            let (xs, rec1) = maybe_distort(&x, &mut self.distort_rng, &dcfg);
            let student_req = OutputRequest {
                order_logits: toggles.order,
                restored: toggles.restore,
                global_embed: toggles.global,
                local_embeds: toggles.local,
            };
            let s1 = forward_patches(
                &mut tape,
                &self.st.student,
                &self.encoder_cfg,
                &patchify(&xs, m),
                full_grid,
                Binding::Trainable,
                student_req,
            )?;
            if toggles.order {
                order_targets.push(rec1.permutation.clone());
                order_logit_vars.push(s1.order_logits.expect("requested"));
            }
            if toggles.restore {
                restore_targets.push(patchify(&rec1.original_crop, m));
                restore_vars.push(s1.restored.expect("requested"));
            }
            if need_pass2 {
                let consistency = OutputRequest::consistency(toggles.global, toggles.local);
                let t1 = forward_patches(
                    &mut tape,
                    &self.st.teacher,
                    &self.encoder_cfg,
                    &patchify(&xp, m),
                    full_grid,
                    Binding::Frozen,
                    consistency,
                )?;
                let (xps, rec2) = maybe_distort(&xp, &mut self.distort_rng, &dcfg);
                let s2 = forward_patches(
                    &mut tape,
                    &self.st.student,
                    &self.encoder_cfg,
                    &patchify(&xps, m),
                    full_grid,
                    Binding::Trainable,
                    consistency,
                )?;
                let t2 = forward_patches(
                    &mut tape,
                    &self.st.teacher,
                    &self.encoder_cfg,
                    &patchify(&x, m),
                    full_grid,
                    Binding::Frozen,
                    consistency,
                )?;
                if toggles.global {
                    global_pairs_1
                        .push((s1.global_embed.expect("requested"), t1.global_embed.unwrap()));
                    global_pairs_2
                        .push((s2.global_embed.unwrap(), t2.global_embed.unwrap()));
                }
                if toggles.local {
                    local_items_1.push(LocalConsistencyItem {
                        student_locals: s1.local_embeds.expect("requested"),
                        teacher_locals: t1.local_embeds.unwrap(),
                        student_indices: corr.indices_in_a().collect(),
                        teacher_indices: corr.indices_in_b().collect(),
                        indicator: rec1.indicator,
                    });
                    // Pass 2: x' goes through the student, so its overlap
                    // indices sit on the student side.
                    local_items_2.push(LocalConsistencyItem {
                        student_locals: s2.local_embeds.unwrap(),
                        teacher_locals: t2.local_embeds.unwrap(),
                        student_indices: corr.indices_in_b().collect(),
                        teacher_indices: corr.indices_in_a().collect(),
                        indicator: rec2.indicator,
                    });
                }
            }
        }

        let mut terms = LossTerms::default();
        if toggles.order {
            let items: Vec<_> = order_logit_vars
                .iter()
                .zip(&order_targets)
                .map(|(&v, t)| (v, t.as_slice()))
                .collect();
            terms.order = Some(order_loss(&mut tape, &items)?);
        }
        if toggles.restore {
            let items: Vec<_> =
                restore_vars.iter().zip(&restore_targets).map(|(&v, t)| (v, t)).collect();
            terms.restore = Some(restore_loss(&mut tape, &items)?);
        }
        if toggles.global {
            let p1 = global_consistency_loss(&mut tape, &global_pairs_1)?;
            let p2 = global_consistency_loss(&mut tape, &global_pairs_2)?;
            terms.global = Some(tape.add(p1, p2));
        }
        if toggles.local {
            let p1 = local_consistency_loss(&mut tape, &local_items_1)?;
            let p2 = local_consistency_loss(&mut tape, &local_items_2)?;
            terms.local = Some(tape.add(p1, p2));
        }

        let (total, bundle) = total_loss(&mut tape, &terms);
        if !bundle.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                order: bundle.order,
                restore: bundle.restore,
                global: bundle.global,
                local: bundle.local,
            });
        }
        let grads = total.map(|t| tape.backward(t, self.st.student.len()));
        Ok((grads, bundle))
    }

    /// One optimizer step: forward/backward, SGD-with-momentum update on the
    /// student, then one EMA update on the teacher.
    pub fn train_step(&mut self, batch: &[&Array2<T>]) -> Result<LossBundle, TrainError> {
        let lr = self.current_lr();
        let (grads, bundle) = self.forward_backward(batch)?;
        if let Some(grads) = grads {
            self.apply_update(&grads, lr);
        }
        self.st.ema_update();
        self.step += 1;
        Ok(bundle)
    }

    fn apply_update(&mut self, grads: &Gradients<T>, lr: f64) {
        let mu: T = cast(self.cfg.momentum);
        let lr: T = cast(lr);
        let clip_scale: T = if self.cfg.grad_clip > 0.0 {
            let mut sq = 0.0f64;
            for id in 0..self.st.student.len() {
                if let Some(g) = grads.get(id) {
                    sq += g.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>();
                }
            }
            let norm = sq.sqrt();
            if norm > self.cfg.grad_clip {
                cast(self.cfg.grad_clip / norm)
            } else {
                T::one()
            }
        } else {
            T::one()
        };
        for id in 0..self.st.student.len() {
            let v = &mut self.velocity[id];
            match grads.get(id) {
                Some(g) => *v = v.mapv(|x| x * mu) + g.mapv(|x| x * clip_scale),
                None => *v = v.mapv(|x| x * mu),
            }
            let delta = v.mapv(|x| x * lr);
            let theta = self.st.student.value_mut(id);
            *theta = &*theta - &delta;
        }
    }

    /// Next batch of dataset indices under per-epoch shuffling; the tail that
    /// does not fill a whole batch is dropped.
    pub fn next_batch_indices(&mut self, n_images: usize) -> Vec<usize> {
        let usable = (n_images / self.cfg.batch_size) * self.cfg.batch_size;
        if self.epoch_order.len() != n_images || self.cursor + self.cfg.batch_size > usable {
            self.epoch_order = (0..n_images as u32).collect();
            self.epoch_order.shuffle(&mut self.data_rng);
            self.cursor = 0;
        }
        let out = self.epoch_order[self.cursor..self.cursor + self.cfg.batch_size]
            .iter()
            .map(|&i| i as usize)
            .collect();
        self.cursor += self.cfg.batch_size;
        out
    }

    /// Drives training to `total_steps`, invoking `on_step` after each step
    /// with the executed step index, its learning rate, and the losses.
    pub fn run(
        &mut self,
        images: &[Array2<T>],
        mut on_step: impl FnMut(u64, f64, &LossBundle),
    ) -> Result<(), TrainError> {
        while self.step < self.total_steps() {
            let executed = self.step;
            let lr = self.current_lr();
            let idxs = self.next_batch_indices(images.len());
            let batch: Vec<&Array2<T>> = idxs.iter().map(|&i| &images[i]).collect();
            let bundle = self.train_step(&batch)?;
            on_step(executed, lr, &bundle);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let body = CheckpointBody {
            cfg: self.cfg.clone(),
            step: self.step,
            steps_per_epoch: self.steps_per_epoch,
            st: self.st.clone(),
            velocity: self.velocity.clone(),
            data_rng: RngState::capture(&self.data_rng),
            distort_rng: RngState::capture(&self.distort_rng),
            epoch_order: self.epoch_order.clone(),
            cursor: self.cursor,
        };
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        bincode::serialize_into(&mut w, &body).map_err(|e| TrainError::Corrupt(e.to_string()))?;
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, TrainError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| TrainError::BadMagic)?;
        if &magic != CKPT_MAGIC {
            return Err(TrainError::BadMagic);
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version).map_err(|_| TrainError::Corrupt("truncated header".into()))?;
        let got = u32::from_le_bytes(version);
        if got != CKPT_VERSION {
            return Err(TrainError::VersionMismatch { got, expected: CKPT_VERSION });
        }
        let body: CheckpointBody<T> =
            bincode::deserialize_from(&mut r).map_err(|e| TrainError::Corrupt(e.to_string()))?;
        let grid = body.cfg.grid()?;
        let encoder_cfg = body.cfg.encoder();
        Ok(Self {
            cfg: body.cfg,
            grid,
            encoder_cfg,
            st: body.st,
            velocity: body.velocity,
            step: body.step,
            steps_per_epoch: body.steps_per_epoch,
            data_rng: body.data_rng.restore(),
            distort_rng: body.distort_rng.restore(),
            epoch_order: body.epoch_order,
            cursor: body.cursor,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            grid_n: 7,
            grid_m: 4,
            grid_k: 5,
            depth: 2,
            dim: 16,
            heads: 2,
            mlp_ratio: 2.0,
            warmup_epochs: 1,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    fn tiny_images(count: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| Array2::from_shape_fn((40, 40), |_| rng.random::<f64>()))
            .collect()
    }

    #[test]
    fn schedule_endpoints() {
        let (total, warmup, lr) = (200u64, 40u64, 0.1);
        assert_eq!(lr_schedule(0, total, warmup, lr), 0.0);
        assert_eq!(lr_schedule(warmup, total, warmup, lr), lr);
        assert!(lr_schedule(total - 1, total, warmup, lr).abs() < 1e-9);
        assert_eq!(lr_schedule(total, total, warmup, lr), 0.0);
        // Monotone rise through warmup, then decay.
        assert!(lr_schedule(20, total, warmup, lr) < lr);
        assert!(lr_schedule(120, total, warmup, lr) < lr);
        assert!(lr_schedule(120, total, warmup, lr) > lr_schedule(190, total, warmup, lr));
    }

    #[test]
    fn config_toml_round_trip_and_unknown_key() {
        let cfg = tiny_config();
        let text = cfg.to_toml_string();
        let back = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);

        let err = TrainConfig::from_toml_str("no_such_key = 1\n").unwrap_err();
        assert!(matches!(err, TrainError::ConfigParse(_)));
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn config_invalid_grid_names_rule() {
        let cfg = TrainConfig { grid_n: 9, grid_m: 8, grid_k: 6, ..TrainConfig::default() };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("overlap"), "message: {err}");
    }

    #[test]
    fn deterministic_loss_bundles() {
        let images = tiny_images(4, 1);
        let batch: Vec<&Array2<f64>> = images.iter().take(2).collect();
        let mut a = Trainer::<f64>::new(tiny_config(), images.len()).unwrap();
        let mut b = Trainer::<f64>::new(tiny_config(), images.len()).unwrap();
        let ba = a.train_step(&batch).unwrap();
        let bb = b.train_step(&batch).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn all_toggles_off_leaves_parameters_unchanged() {
        let cfg = TrainConfig {
            loss_order: false,
            loss_restore: false,
            loss_global: false,
            loss_local: false,
            ..tiny_config()
        };
        let images = tiny_images(4, 2);
        let batch: Vec<&Array2<f64>> = images.iter().take(2).collect();
        let mut tr = Trainer::<f64>::new(cfg, images.len()).unwrap();
        let before = tr.model().clone();
        let bundle = tr.train_step(&batch).unwrap();
        assert_eq!(bundle, LossBundle::zero());
        assert_eq!(tr.model().student, before.student);
        assert_eq!(tr.model().teacher, before.teacher);
    }

    #[test]
    fn gradient_paths_follow_toggles() {
        let cfg = TrainConfig {
            loss_order: false,
            loss_restore: true,
            loss_global: false,
            loss_local: false,
            p_od: 0.0,
            p_ad: 1.0,
            ..tiny_config()
        };
        let images = tiny_images(4, 3);
        let batch: Vec<&Array2<f64>> = images.iter().take(2).collect();
        let mut tr = Trainer::<f64>::new(cfg, images.len()).unwrap();
        let (grads, bundle) = tr.forward_backward(&batch).unwrap();
        let grads = grads.unwrap();
        assert!(bundle.restore > 0.0);

        let store = &tr.model().student;
        let nonzero = |name: &str| {
            grads
                .get(store.id(name))
                .map(|g| g.iter().any(|v| *v != 0.0))
                .unwrap_or(false)
        };
        assert!(nonzero("restore_head.w"));
        assert!(nonzero("patch_embed.w"));
        assert!(!nonzero("order_head.w"));
        assert!(!nonzero("global_expander.w1"));
        assert!(!nonzero("local_expander.w1"));
    }

    #[test]
    fn teacher_moves_only_by_ema() {
        let images = tiny_images(4, 4);
        let batch: Vec<&Array2<f64>> = images.iter().take(2).collect();
        let mut tr = Trainer::<f64>::new(tiny_config(), images.len()).unwrap();
        // Step 0 runs at lr 0 (warmup), so the student is unchanged and the
        // teacher EMA is a fixed point.
        let student_before = tr.model().student.clone();
        tr.train_step(&batch).unwrap();
        assert_eq!(tr.model().student, student_before);
        assert_eq!(tr.model().gap(), 0.0);
        // Later steps move the student; the teacher lags behind.
        let batch2: Vec<&Array2<f64>> = images.iter().skip(2).take(2).collect();
        tr.train_step(&batch2).unwrap();
        assert!(tr.model().student.l2_distance(&student_before) > 0.0);
        assert!(tr.model().gap() > 0.0);
    }

    #[test]
    fn non_finite_loss_reports_step_and_components() {
        let images = tiny_images(4, 5);
        let batch: Vec<&Array2<f64>> = images.iter().take(2).collect();
        let mut tr = Trainer::<f64>::new(tiny_config(), images.len()).unwrap();
        let id = tr.st.student.id("patch_embed.w");
        tr.st.student.value_mut(id)[[0, 0]] = f64::NAN;
        let err = tr.train_step(&batch).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { step, .. } => assert_eq!(step, 0),
            TrainError::Objective(ObjectiveError::NonFinite(_)) => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let images = tiny_images(4, 6);
        let mut tr = Trainer::<f64>::new(tiny_config(), images.len()).unwrap();
        let batch: Vec<&Array2<f64>> = images.iter().take(2).collect();
        tr.train_step(&batch).unwrap();

        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        tr.save_checkpoint(&p1).unwrap();
        let loaded = Trainer::<f64>::load_checkpoint(&p1).unwrap();
        loaded.save_checkpoint(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let images = tiny_images(6, 7);
        let cfg = tiny_config();

        let mut full = Trainer::<f64>::new(cfg.clone(), images.len()).unwrap();
        let mut full_bundles = Vec::new();
        full.run(&images, |_, _, b| full_bundles.push(*b)).unwrap();

        let mut head = Trainer::<f64>::new(cfg, images.len()).unwrap();
        let mut head_bundles = Vec::new();
        let halfway = head.total_steps() / 2;
        while head.step() < halfway {
            let idxs = head.next_batch_indices(images.len());
            let batch: Vec<&Array2<f64>> = idxs.iter().map(|&i| &images[i]).collect();
            head_bundles.push(head.train_step(&batch).unwrap());
        }
        let path = dir.path().join("mid.ckpt");
        head.save_checkpoint(&path).unwrap();

        let mut resumed = Trainer::<f64>::load_checkpoint(&path).unwrap();
        assert_eq!(resumed.step(), halfway);
        resumed.run(&images, |_, _, b| head_bundles.push(*b)).unwrap();

        assert_eq!(full_bundles.len(), head_bundles.len());
        for (a, b) in full_bundles.iter().zip(&head_bundles) {
            assert_eq!(a, b);
        }
        assert_eq!(full.model().student, resumed.model().student);
        assert_eq!(full.model().teacher, resumed.model().teacher);
    }

    #[test]
    fn wrong_version_and_corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let images = tiny_images(4, 8);
        let tr = Trainer::<f64>::new(tiny_config(), images.len()).unwrap();
        let path = dir.path().join("v.ckpt");
        tr.save_checkpoint(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // version field
        let bad_version = dir.path().join("bad_version.ckpt");
        std::fs::write(&bad_version, &bytes).unwrap();
        assert!(matches!(
            Trainer::<f64>::load_checkpoint(&bad_version),
            Err(TrainError::VersionMismatch { got: 99, .. })
        ));

        let bad_magic = dir.path().join("bad_magic.ckpt");
        std::fs::write(&bad_magic, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(matches!(
            Trainer::<f64>::load_checkpoint(&bad_magic),
            Err(TrainError::BadMagic)
        ));

        let truncated = dir.path().join("trunc.ckpt");
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&truncated, &full[..full.len() / 2]).unwrap();
        assert!(matches!(
            Trainer::<f64>::load_checkpoint(&truncated),
            Err(TrainError::Corrupt(_))
        ));
    }

    #[test]
    fn run_respects_epoch_budget() {
        let images = tiny_images(5, 9);
        let mut tr = Trainer::<f64>::new(tiny_config(), images.len()).unwrap();
        // 5 images, batch 2 -> 2 steps per epoch, 2 epochs -> 4 steps.
        assert_eq!(tr.total_steps(), 4);
        let mut seen = Vec::new();
        tr.run(&images, |step, _, _| seen.push(step)).unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert_eq!(tr.step(), 4);
    }
}
