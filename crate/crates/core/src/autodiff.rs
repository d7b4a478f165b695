//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records eagerly-evaluated matrix ops; [`Tape::backward`] walks
//! the record in reverse and accumulates gradients for nodes registered as
//! parameters. Everything is an `Array2`: scalars are `1x1`, vectors `1xD`.
//! Constants (e.g. teacher activations) never receive gradients, which is how
//! the stop-gradient on the teacher branch is enforced structurally.

use crate::scalar::{cast, Scalar};
use ndarray::{s, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, T),
    /// Broadcast-add a `1xD` row vector to every row of an `NxD` matrix.
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<T>, rstd: Vec<T> },
    SoftmaxRows(Var),
    CrossEntropyRows { logits: Var, probs: Array2<T>, targets: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    SelectRows { x: Var, indices: Vec<usize> },
    NormalizeRows { x: Var, norms: Vec<T> },
    SumSquares(Var),
    SumAll(Var),
}

struct Node<T: Scalar> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<usize>,
}

/// Per-parameter gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    by_param: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, param: usize) -> Option<&Array2<T>> {
        self.by_param.get(param).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.dim(), (1, 1), "scalar() requires a 1x1 node");
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    /// A trainable leaf; gradients accumulate under `param_id`.
    pub fn param(&mut self, param_id: usize, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true, Some(param_id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng, None)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng, None)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Hadamard(a, b), ng, None)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * factor);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, factor), ng, None)
    }

    /// `a` is `NxD`, `row` is `1xD`; adds `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = &self.nodes[row.0].value;
        assert_eq!(r.nrows(), 1, "add_row expects a 1xD row vector");
        let value = &self.nodes[a.0].value + &r.row(0);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng, None)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_value);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng, None)
    }

    /// Row-wise layer normalization with affine parameters (`1xD` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps: T = cast(1e-5);
        let xv = &self.nodes[x.0].value;
        let d = xv.ncols();
        let inv_d = T::one() / cast::<T>(d as f64);
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut rstd = Vec::with_capacity(xv.nrows());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) * inv_d;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * r;
            }
        }
        let g = self.nodes[gamma.0].value.row(0).to_owned();
        let b = self.nodes[beta.0].value.row(0).to_owned();
        let value = &xhat * &g + &b;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng, None)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a.0].value;
        let mut value = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                value[[i, j]] = e;
                sum += e;
            }
            for j in 0..row.len() {
                value[[i, j]] = value[[i, j]] / sum;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng, None)
    }

    /// Summed cross-entropy of row-wise softmax against integer targets
    /// (`1x1` output, log-sum-exp stabilized).
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let xv = &self.nodes[logits.0].value;
        assert_eq!(xv.nrows(), targets.len(), "one target per row");
        let mut probs = Array2::zeros(xv.raw_dim());
        let mut total = T::zero();
        for (i, row) in xv.rows().into_iter().enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[[i, j]] = e;
                sum += e;
            }
            for j in 0..row.len() {
                probs[[i, j]] = probs[[i, j]] / sum;
            }
            total += max + sum.ln() - row[targets[i]];
        }
        let ng = self.needs(logits);
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::CrossEntropyRows { logits, probs, targets }, ng, None)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[x.0].value.slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(x);
        self.push(value, Op::SliceCols { x, start }, ng, None)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        let ng = parts.iter().any(|&v| self.needs(v));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng, None)
    }

    /// Column means: `NxD -> 1xD`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a.0].value;
        let n = cast::<T>(xv.nrows() as f64);
        let value = xv
            .sum_axis(Axis(0))
            .mapv(|v| v / n)
            .insert_axis(Axis(0));
        let ng = self.needs(a);
        self.push(value, Op::MeanRows(a), ng, None)
    }

    /// Gathers rows by index (duplicates allowed; gradients scatter-add).
    pub fn select_rows(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut value = Array2::zeros((indices.len(), xv.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            value.row_mut(i).assign(&xv.row(idx));
        }
        let ng = self.needs(x);
        self.push(value, Op::SelectRows { x, indices }, ng, None)
    }

    /// Rows scaled to (near-)unit L2 norm: `y = x / (|x| + 1e-12)`.
    ///
    /// Callers are responsible for rejecting exactly-zero rows beforehand;
    /// see [`Tape::row_norms`].
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let eps: T = cast(1e-12);
        let xv = &self.nodes[x.0].value;
        let mut value = Array2::zeros(xv.raw_dim());
        let mut norms = Vec::with_capacity(xv.nrows());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let n = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
            norms.push(n);
            let denom = n + eps;
            for (j, &v) in row.iter().enumerate() {
                value[[i, j]] = v / denom;
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::NormalizeRows { x, norms }, ng, None)
    }

    /// L2 norm of every row of a node's current value.
    pub fn row_norms(&self, x: Var) -> Vec<T> {
        self.nodes[x.0]
            .value
            .rows()
            .into_iter()
            .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt())
            .collect()
    }

    /// Sum of squared entries (`1x1`).
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().fold(T::zero(), |acc, &v| acc + v * v);
        let ng = self.needs(a);
        self.push(Array2::from_elem((1, 1), total), Op::SumSquares(a), ng, None)
    }

    /// Sum of all entries (`1x1`).
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().fold(T::zero(), |acc, &v| acc + v);
        let ng = self.needs(a);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a), ng, None)
    }

    /// Accumulates gradients of the `1x1` node `root` with respect to every
    /// parameter leaf, for parameter ids `0..n_params`.
    pub fn backward(&self, root: Var, n_params: usize) -> Gradients<T> {
        assert_eq!(self.nodes[root.0].value.dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if self.nodes[i].param.is_some() {
                grads[i] = Some(g);
            }
        }

        let mut by_param: Vec<Option<Array2<T>>> = vec![None; n_params];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(g) = grads[i].take() {
                    match &mut by_param[pid] {
                        Some(acc) => *acc = &*acc + &g,
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        Gradients { by_param }
    }

    fn propagate(&self, i: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let mut accum = |v: Var, delta: Array2<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc = &*acc + &delta,
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                accum(*a, g.dot(&bv.t()));
                accum(*b, av.t().dot(g));
            }
            Op::Transpose(a) => accum(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                accum(*a, g.clone());
                accum(*b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(*a, g.clone());
                accum(*b, g.mapv(|v| -v));
            }
            Op::Hadamard(a, b) => {
                accum(*a, g * &self.nodes[b.0].value);
                accum(*b, g * &self.nodes[a.0].value);
            }
            Op::Scale(a, f) => accum(*a, g.mapv(|v| v * *f)),
            Op::AddRow(a, row) => {
                accum(*a, g.clone());
                accum(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Gelu(a) => {
                let deriv = self.nodes[a.0].value.mapv(gelu_derivative);
                accum(*a, g * &deriv);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.nodes[gamma.0].value.row(0).to_owned();
                let d = xhat.ncols();
                let inv_d = T::one() / cast::<T>(d as f64);
                let dxhat = g * &gv;
                let mut dx = Array2::zeros(xhat.raw_dim());
                for (r, rs) in rstd.iter().enumerate() {
                    let dxh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let mean_dxh = dxh.iter().fold(T::zero(), |acc, &v| acc + v) * inv_d;
                    let mean_dxh_xh = dxh
                        .iter()
                        .zip(xh.iter())
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                        * inv_d;
                    for c in 0..d {
                        dx[[r, c]] = (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh) * *rs;
                    }
                }
                accum(*x, dx);
                accum(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                accum(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::SoftmaxRows(a) => {
                let sv = &self.nodes[i].value;
                let gs = g * sv;
                let rowsum = gs.sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = gs - sv * &rowsum;
                accum(*a, dx);
            }
            Op::CrossEntropyRows { logits, probs, targets } => {
                let scale = g[[0, 0]];
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dl[[r, t]] = dl[[r, t]] - T::one();
                }
                accum(*logits, dl.mapv(|v| v * scale));
            }
            Op::SliceCols { x, start } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = Array2::zeros(xv.raw_dim());
                dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accum(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    let piece = g.slice(s![.., offset..offset + w]).to_owned();
                    accum(p, piece);
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                let xv = &self.nodes[a.0].value;
                let n = cast::<T>(xv.nrows() as f64);
                let per_row = g.row(0).mapv(|v| v / n);
                let mut dx = Array2::zeros(xv.raw_dim());
                for mut row in dx.rows_mut() {
                    row.assign(&per_row);
                }
                accum(*a, dx);
            }
            Op::SelectRows { x, indices } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = Array2::zeros(xv.raw_dim());
                for (r, &idx) in indices.iter().enumerate() {
                    let updated = &dx.row(idx) + &g.row(r);
                    dx.row_mut(idx).assign(&updated);
                }
                accum(*x, dx);
            }
            Op::NormalizeRows { x, norms } => {
                let eps: T = cast(1e-12);
                let xv = &self.nodes[x.0].value;
                let mut dx = Array2::zeros(xv.raw_dim());
                for (r, &n) in norms.iter().enumerate() {
                    let srow = n + eps;
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let dot = gr.iter().zip(xr.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    let coef = dot / (n * srow * srow);
                    for c in 0..xv.ncols() {
                        dx[[r, c]] = gr[c] / srow - xr[c] * coef;
                    }
                }
                accum(*x, dx);
            }
            Op::SumSquares(a) => {
                let two: T = cast(2.0);
                let scale = g[[0, 0]];
                accum(*a, self.nodes[a.0].value.mapv(|v| two * v * scale));
            }
            Op::SumAll(a) => {
                let scale = g[[0, 0]];
                accum(*a, Array2::from_elem(self.nodes[a.0].value.raw_dim(), scale));
            }
        }
    }
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let c0: T = cast(0.7978845608028654); // sqrt(2/pi)
    let c1: T = cast(0.044715);
    let half: T = cast(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c0: T = cast(0.7978845608028654);
    let c1: T = cast(0.044715);
    let half: T = cast(0.5);
    let three: T = cast(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c0 * (T::one() + three * c1 * x * x)
}
