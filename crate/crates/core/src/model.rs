//! ViT-style encoder with order-classification and appearance-restoration
//! heads, global/local 3-layer MLP expanders, and the student/teacher
//! parameter pair with EMA updates.
//!
//! The encoder runs on the [`crate::autodiff::Tape`]; binding parameters as
//! [`Binding::Frozen`] constants makes a pass gradient-free, which is exactly
//! the teacher's stop-gradient semantics.

use crate::autodiff::{Tape, Var};
use crate::geometry::patchify;
use crate::scalar::{cast, Scalar};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: String, got: String },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("token grid {gr}x{gc} exceeds the trained positional grid {side}x{side}")]
    GridTooLarge { gr: usize, gc: usize, side: usize },
}

/// Encoder hyperparameters. Tokens are the `grid_side^2` patches of a crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_side: usize,
    pub grid_side: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    /// Desk-scale default: 4 blocks, width 64, 4 heads, 8x8 grid of 8 px patches.
    pub fn desk() -> Self {
        Self { depth: 4, dim: 64, heads: 4, patch_side: 8, grid_side: 8, mlp_ratio: 4.0 }
    }

    /// Full-scale ViT-B geometry (224 px inputs, 16 px patches). Documented
    /// for reference; not the default anywhere in this crate.
    pub fn paper_vit_b() -> Self {
        Self { depth: 12, dim: 768, heads: 12, patch_side: 16, grid_side: 14, mlp_ratio: 4.0 }
    }

    pub fn tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Expander hidden width (2D) and output width (D).
    pub fn expander_hidden(&self) -> usize {
        2 * self.dim
    }

    pub fn embed_dim(&self) -> usize {
        self.dim
    }

    pub fn crop_side(&self) -> usize {
        self.grid_side * self.patch_side
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch_side == 0
            || self.grid_side == 0
        {
            return Err(ModelError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(ModelError::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Ordered, named parameter container. Order is fixed by construction, which
/// keeps initialization draws, EMA updates, optimizer state, and checkpoint
/// bytes all aligned.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(bound = "T: Scalar")]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(bound = "T: Scalar")]
struct ParamEntry<T: Scalar> {
    name: String,
    value: Array2<T>,
}

impl<T: Scalar> ParamStore<T> {
    fn push(&mut self, name: String, value: Array2<T>) {
        debug_assert!(self.entries.iter().all(|e| e.name != name));
        self.entries.push(ParamEntry { name, value });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of a named parameter. Panics on unknown names: the set of names
    /// is fixed at construction, so a miss is a programming error.
    pub fn id(&self, name: &str) -> usize {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn value(&self, id: usize) -> &Array2<T> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array2<T> {
        &mut self.entries[id].value
    }

    pub fn get(&self, name: &str) -> &Array2<T> {
        self.value(self.id(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// L2 norm of the elementwise difference between two stores.
    pub fn l2_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len());
        let mut acc = 0.0f64;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            debug_assert_eq!(a.name, b.name);
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                let d = (*x - *y).to_f64().unwrap();
                acc += d * d;
            }
        }
        acc.sqrt()
    }
}

/// Fresh encoder parameters: Xavier-normal weights (`std =
/// sqrt(2/(fan_in+fan_out))`), biases zero, layer-norm scales one,
/// positional embeddings N(0, 0.02^2). Draw order equals parameter order.
///
/// Fan-scaled weights keep the expander outputs at unit scale; a flat small
/// std would shrink them to ~1e-4 through the three stacked linears and put
/// the L2 normalization in a badly conditioned regime.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore { entries: Vec::new() };
    let d = cfg.dim;
    let px = cfg.patch_side * cfg.patch_side;
    let n = cfg.tokens();
    let hidden = cfg.mlp_hidden();
    let exp_h = cfg.expander_hidden();

    let weight = |store: &mut ParamStore<T>, name: String, rows: usize, cols: usize, rng: &mut R| {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        let normal = Normal::new(0.0f64, std).expect("valid normal");
        let value = Array2::from_shape_fn((rows, cols), |_| cast::<T>(normal.sample(rng)));
        store.push(name, value);
    };
    let zeros = |store: &mut ParamStore<T>, name: String, cols: usize| {
        store.push(name, Array2::zeros((1, cols)));
    };
    let ones = |store: &mut ParamStore<T>, name: String, cols: usize| {
        store.push(name, Array2::from_elem((1, cols), T::one()));
    };

    weight(&mut store, "patch_embed.w".into(), px, d, rng);
    zeros(&mut store, "patch_embed.b".into(), d);
    {
        let normal = Normal::new(0.0f64, 0.02).expect("valid normal");
        let value = Array2::from_shape_fn((n, d), |_| cast::<T>(normal.sample(rng)));
        store.push("pos_embed".into(), value);
    }
    for i in 0..cfg.depth {
        ones(&mut store, format!("block{i}.ln1.g"), d);
        zeros(&mut store, format!("block{i}.ln1.b"), d);
        for proj in ["q", "k", "v", "o"] {
            weight(&mut store, format!("block{i}.attn.w{proj}"), d, d, rng);
            zeros(&mut store, format!("block{i}.attn.b{proj}"), d);
        }
        ones(&mut store, format!("block{i}.ln2.g"), d);
        zeros(&mut store, format!("block{i}.ln2.b"), d);
        weight(&mut store, format!("block{i}.mlp.w1"), d, hidden, rng);
        zeros(&mut store, format!("block{i}.mlp.b1"), hidden);
        weight(&mut store, format!("block{i}.mlp.w2"), hidden, d, rng);
        zeros(&mut store, format!("block{i}.mlp.b2"), d);
    }
    ones(&mut store, "final_ln.g".into(), d);
    zeros(&mut store, "final_ln.b".into(), d);
    weight(&mut store, "order_head.w".into(), d, n, rng);
    zeros(&mut store, "order_head.b".into(), n);
    weight(&mut store, "restore_head.w".into(), d, px, rng);
    zeros(&mut store, "restore_head.b".into(), px);
    for prefix in ["global_expander", "local_expander"] {
        weight(&mut store, format!("{prefix}.w1"), d, exp_h, rng);
        zeros(&mut store, format!("{prefix}.b1"), exp_h);
        weight(&mut store, format!("{prefix}.w2"), exp_h, exp_h, rng);
        zeros(&mut store, format!("{prefix}.b2"), exp_h);
        weight(&mut store, format!("{prefix}.w3"), exp_h, d, rng);
        zeros(&mut store, format!("{prefix}.b3"), d);
    }
    store
}

/// Whether a forward pass contributes gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Parameters become tape params; gradients flow (student passes).
    Trainable,
    /// Parameters become tape constants; stop-gradient (teacher passes).
    Frozen,
}

/// Selects which optional outputs a forward pass produces.
#[derive(Debug, Clone, Copy, Default)]
pub struct OutputRequest {
    pub order_logits: bool,
    pub restored: bool,
    pub global_embed: bool,
    pub local_embeds: bool,
}

impl OutputRequest {
    pub fn all() -> Self {
        Self { order_logits: true, restored: true, global_embed: true, local_embeds: true }
    }

    pub fn consistency(global: bool, local: bool) -> Self {
        Self { order_logits: false, restored: false, global_embed: global, local_embeds: local }
    }
}

/// Tape handles produced by one encoder pass.
pub struct ForwardVars {
    /// `N' x D` token features after the final layer norm.
    pub patch_features: Var,
    /// `1 x D` mean pool of the token features.
    pub pooled: Var,
    /// `1 x D` global expander output.
    pub global_embed: Option<Var>,
    /// `N' x D` local expander outputs.
    pub local_embeds: Option<Var>,
    /// `N' x N` patch order logits.
    pub order_logits: Option<Var>,
    /// `N' x m^2` pixel predictions.
    pub restored: Option<Var>,
}

/// Runs the encoder on a matrix of patch pixel rows laid out on a `gr x gc`
/// token grid (row-major). Grids smaller than the trained `grid_side` use the
/// top-left block of the positional embedding table.
pub fn forward_patches<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    patches: &Array2<T>,
    grid: (usize, usize),
    binding: Binding,
    req: OutputRequest,
) -> Result<ForwardVars, ModelError> {
    let (gr, gc) = grid;
    let px = cfg.patch_side * cfg.patch_side;
    if patches.ncols() != px {
        return Err(ModelError::ShapeMismatch {
            what: "patch pixel columns",
            expected: px.to_string(),
            got: patches.ncols().to_string(),
        });
    }
    if patches.nrows() != gr * gc {
        return Err(ModelError::ShapeMismatch {
            what: "patch rows",
            expected: format!("{} ({gr}x{gc})", gr * gc),
            got: patches.nrows().to_string(),
        });
    }
    if gr > cfg.grid_side || gc > cfg.grid_side {
        return Err(ModelError::GridTooLarge { gr, gc, side: cfg.grid_side });
    }

    let leaf = |tape: &mut Tape<T>, name: &str| -> Var {
        let id = store.id(name);
        match binding {
            Binding::Trainable => tape.param(id, store.value(id).clone()),
            Binding::Frozen => tape.constant(store.value(id).clone()),
        }
    };
    let linear = |tape: &mut Tape<T>, x: Var, w: &str, b: &str| -> Var {
        let wv = leaf(tape, w);
        let bv = leaf(tape, b);
        let prod = tape.matmul(x, wv);
        tape.add_row(prod, bv)
    };

    let input = tape.constant(patches.clone());
    let mut x = linear(tape, input, "patch_embed.w", "patch_embed.b");

    let pos = leaf(tape, "pos_embed");
    let pos = if (gr, gc) == (cfg.grid_side, cfg.grid_side) {
        pos
    } else {
        let idx: Vec<usize> = (0..gr)
            .flat_map(|r| (0..gc).map(move |c| r * cfg.grid_side + c))
            .collect();
        tape.select_rows(pos, idx)
    };
    x = tape.add(x, pos);

    let scale: T = cast(1.0 / (cfg.head_dim() as f64).sqrt());
    for i in 0..cfg.depth {
        let g1 = leaf(tape, &format!("block{i}.ln1.g"));
        let b1 = leaf(tape, &format!("block{i}.ln1.b"));
        let normed = tape.layer_norm(x, g1, b1);
        let q = linear(tape, normed, &format!("block{i}.attn.wq"), &format!("block{i}.attn.bq"));
        let k = linear(tape, normed, &format!("block{i}.attn.wk"), &format!("block{i}.attn.bk"));
        let v = linear(tape, normed, &format!("block{i}.attn.wv"), &format!("block{i}.attn.bv"));
        let dh = cfg.head_dim();
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let logits = tape.matmul(qh, kt);
            let scaled = tape.scale(logits, scale);
            let attn = tape.softmax_rows(scaled);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&heads);
        let proj = linear(tape, merged, &format!("block{i}.attn.wo"), &format!("block{i}.attn.bo"));
        x = tape.add(x, proj);

        let g2 = leaf(tape, &format!("block{i}.ln2.g"));
        let b2 = leaf(tape, &format!("block{i}.ln2.b"));
        let normed2 = tape.layer_norm(x, g2, b2);
        let h1 = linear(tape, normed2, &format!("block{i}.mlp.w1"), &format!("block{i}.mlp.b1"));
        let h1 = tape.gelu(h1);
        let h2 = linear(tape, h1, &format!("block{i}.mlp.w2"), &format!("block{i}.mlp.b2"));
        x = tape.add(x, h2);
    }

    let gf = leaf(tape, "final_ln.g");
    let bf = leaf(tape, "final_ln.b");
    let patch_features = tape.layer_norm(x, gf, bf);
    let pooled = tape.mean_rows(patch_features);

    let expander = |tape: &mut Tape<T>, input: Var, prefix: &str| -> Var {
        let h1 = linear(tape, input, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let h1 = tape.gelu(h1);
        let h2 = linear(tape, h1, &format!("{prefix}.w2"), &format!("{prefix}.b2"));
        let h2 = tape.gelu(h2);
        linear(tape, h2, &format!("{prefix}.w3"), &format!("{prefix}.b3"))
    };

    Ok(ForwardVars {
        patch_features,
        pooled,
        global_embed: req
            .global_embed
            .then(|| expander(tape, pooled, "global_expander")),
        local_embeds: req
            .local_embeds
            .then(|| expander(tape, patch_features, "local_expander")),
        order_logits: req
            .order_logits
            .then(|| linear(tape, patch_features, "order_head.w", "order_head.b")),
        restored: req
            .restored
            .then(|| linear(tape, patch_features, "restore_head.w", "restore_head.b")),
    })
}

/// Plain-array outputs of a gradient-free encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T: Scalar> {
    /// `N x D` token features.
    pub patch_features: Array2<T>,
    /// Mean of the token features.
    pub pooled: Array1<T>,
    /// Global expander output.
    pub global_embed: Array1<T>,
    /// `N x D` local expander outputs.
    pub local_embeds: Array2<T>,
    pub order_logits: Option<Array2<T>>,
    pub restored: Option<Array2<T>>,
}

/// Encodes a full `k*m`-sided crop (gradient-free).
pub fn encode<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    crop: &Array2<T>,
    with_heads: bool,
) -> Result<EncoderOutput<T>, ModelError> {
    let side = cfg.crop_side();
    if crop.dim() != (side, side) {
        return Err(ModelError::ShapeMismatch {
            what: "crop",
            expected: format!("{side}x{side}"),
            got: format!("{}x{}", crop.nrows(), crop.ncols()),
        });
    }
    let patches = patchify(crop, cfg.patch_side);
    encode_patches(store, cfg, &patches, (cfg.grid_side, cfg.grid_side), with_heads)
}

/// Encodes an arbitrary token grid of patch pixel rows (gradient-free).
pub fn encode_patches<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    patches: &Array2<T>,
    grid: (usize, usize),
    with_heads: bool,
) -> Result<EncoderOutput<T>, ModelError> {
    let mut tape = Tape::new();
    let req = OutputRequest {
        order_logits: with_heads,
        restored: with_heads,
        global_embed: true,
        local_embeds: true,
    };
    let out = forward_patches(&mut tape, store, cfg, patches, grid, Binding::Frozen, req)?;
    Ok(EncoderOutput {
        patch_features: tape.value(out.patch_features).clone(),
        pooled: tape.value(out.pooled).row(0).to_owned(),
        global_embed: tape.value(out.global_embed.expect("requested")).row(0).to_owned(),
        local_embeds: tape.value(out.local_embeds.expect("requested")).clone(),
        order_logits: out.order_logits.map(|v| tape.value(v).clone()),
        restored: out.restored.map(|v| tape.value(v).clone()),
    })
}

/// Student and teacher parameter copies. The teacher is never touched by
/// gradients; it trails the student through [`StudentTeacher::ema_update`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StudentTeacher<T: Scalar> {
    pub student: ParamStore<T>,
    pub teacher: ParamStore<T>,
    ema_alpha: f64,
}

impl<T: Scalar> StudentTeacher<T> {
    /// Initializes the student and copies it into the teacher.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, ema_alpha: f64, rng: &mut R) -> Self {
        let student = init_params(cfg, rng);
        let teacher = student.clone();
        Self { student, teacher, ema_alpha }
    }

    pub fn ema_alpha(&self) -> f64 {
        self.ema_alpha
    }

    /// `theta_t <- alpha * theta_t + (1 - alpha) * theta_s`, elementwise.
    /// Computed as `theta_t + (1-alpha) * (theta_s - theta_t)` so that
    /// `theta_t == theta_s` is an exact fixed point.
    pub fn ema_update(&mut self) {
        let one_minus: T = T::one() - cast(self.ema_alpha);
        for id in 0..self.student.len() {
            let s = self.student.value(id).clone();
            let t = self.teacher.value_mut(id);
            ndarray::Zip::from(&mut *t).and(&s).for_each(|t, &s| {
                *t = *t + one_minus * (s - *t);
            });
        }
    }

    /// L2 norm of the teacher-student parameter gap.
    pub fn gap(&self) -> f64 {
        self.teacher.l2_distance(&self.student)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig { depth: 2, dim: 16, heads: 2, patch_side: 4, grid_side: 2, mlp_ratio: 2.0 }
    }

    fn random_crop(side: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((side, side), |_| rng.random::<f64>())
    }

    #[test]
    fn encode_is_deterministic_and_shapes_hold() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = init_params::<f64, _>(&cfg, &mut rng);
        let crop = random_crop(cfg.crop_side(), 2);
        let a = encode(&store, &cfg, &crop, true).unwrap();
        let b = encode(&store, &cfg, &crop, true).unwrap();
        assert_eq!(a.patch_features, b.patch_features);
        assert_eq!(a.global_embed, b.global_embed);
        assert_eq!(a.order_logits, b.order_logits);
        assert_eq!(a.patch_features.dim(), (4, 16));
        assert_eq!(a.local_embeds.dim(), (4, 16));
        assert_eq!(a.order_logits.as_ref().unwrap().dim(), (4, 4));
        assert_eq!(a.restored.as_ref().unwrap().dim(), (4, 16));
    }

    #[test]
    fn pooled_is_mean_of_patch_features() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = init_params::<f64, _>(&cfg, &mut rng);
        let crop = random_crop(cfg.crop_side(), 4);
        let out = encode(&store, &cfg, &crop, false).unwrap();
        let n = out.patch_features.nrows() as f64;
        for (c, &pooled) in out.pooled.iter().enumerate() {
            let mean: f64 = out.patch_features.column(c).iter().sum::<f64>() / n;
            assert!((mean - pooled).abs() < 1e-6 * mean.abs().max(1.0));
        }
    }

    #[test]
    fn heads_absent_when_not_requested() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = init_params::<f64, _>(&cfg, &mut rng);
        let crop = random_crop(cfg.crop_side(), 6);
        let out = encode(&store, &cfg, &crop, false).unwrap();
        assert!(out.order_logits.is_none());
        assert!(out.restored.is_none());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let store = init_params::<f64, _>(&cfg, &mut rng);
        let crop = random_crop(cfg.crop_side() + 1, 8);
        assert!(matches!(
            encode(&store, &cfg, &crop, false),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = init_params::<f64, _>(&cfg, &mut rng);
        let id = store.id("pos_embed");
        store.value_mut(id).fill(0.0);

        let patches = Array2::from_shape_fn((4, 16), |_| rng.random::<f64>());
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Array2::zeros((4, 16));
        for (slot, &src) in perm.iter().enumerate() {
            permuted.row_mut(slot).assign(&patches.row(src));
        }

        let base = encode_patches(&store, &cfg, &patches, (2, 2), false).unwrap();
        let shuf = encode_patches(&store, &cfg, &permuted, (2, 2), false).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            for c in 0..16 {
                let diff = (shuf.patch_features[[slot, c]] - base.patch_features[[src, c]]).abs();
                assert!(diff < 1e-10, "slot {slot} col {c} diff {diff}");
            }
        }
    }

    #[test]
    fn teacher_initialized_equal_to_student() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let st = StudentTeacher::<f64>::init(&cfg, 0.999, &mut rng);
        assert_eq!(st.gap(), 0.0);
    }

    #[test]
    fn ema_single_step_hand_value() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut st = StudentTeacher::<f64>::init(&cfg, 0.999, &mut rng);
        for id in 0..st.student.len() {
            st.teacher.value_mut(id).fill(0.0);
            st.student.value_mut(id).fill(1.0);
        }
        st.ema_update();
        for id in 0..st.teacher.len() {
            for &v in st.teacher.value(id).iter() {
                assert!((v - 0.001).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ema_fixed_point() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut st = StudentTeacher::<f64>::init(&cfg, 0.999, &mut rng);
        let before = st.teacher.clone();
        st.ema_update();
        assert_eq!(st.teacher, before);
    }

    #[test]
    fn ema_geometric_decay() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut st = StudentTeacher::<f64>::init(&cfg, 0.999, &mut rng);
        // Open a gap, then freeze the student.
        for id in 0..st.teacher.len() {
            let perturbed = st.teacher.value(id).mapv(|v| v + 0.5);
            *st.teacher.value_mut(id) = perturbed;
        }
        let initial = st.gap();
        let steps = 200;
        for _ in 0..steps {
            st.ema_update();
        }
        let expected = initial * 0.999f64.powi(steps);
        let rel = (st.gap() - expected).abs() / expected;
        assert!(rel < 1e-10, "relative error {rel}");
    }

    #[test]
    fn f32_forward_compiles_and_runs() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let store = init_params::<f32, _>(&cfg, &mut rng);
        let crop = random_crop(cfg.crop_side(), 20).mapv(|v| v as f32);
        let out = encode(&store, &cfg, &crop, true).unwrap();
        assert_eq!(out.patch_features.dim(), (4, 16));
    }
}
