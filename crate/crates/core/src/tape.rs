//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value produced during one forward pass.
//! Nodes are appended in execution order, so walking the node list backwards
//! visits each node only after all of its consumers. A fresh tape is built for
//! every forward pass; parameters are pulled in from a [`ParamStore`] once per
//! tape and their gradients are written back with [`Gradients::write_into`].
//!
//! All operations use matrix semantics: rank-2 tensors are `[rows, cols]`,
//! rank-1 tensors act as a single row, and reductions produce rank-0 scalars.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Dot(Var, Var),
    L2Norm(Var),
    Dropout(Var, Vec<f64>),
    BlockMix(Var, Var),
    LstmCell(Var, Var),
    GroupNorm(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

fn rows_of(shape: &[usize]) -> usize {
    match shape.len() {
        0 | 1 => 1,
        _ => shape[0],
    }
}

fn cols_of(shape: &[usize]) -> usize {
    match shape.len() {
        0 => 1,
        1 => shape[0],
        _ => shape[1..].iter().product(),
    }
}

/// `a [r×k] · b [k×c]`
fn mm(a: &[f64], r: usize, k: usize, b: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [r×k] · bᵀ` where `b` is `[c×k]`
fn mm_t(a: &[f64], r: usize, k: usize, b: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b[j * k..(j + 1) * k];
            out[i * c + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` where `a` is `[r×k]` and `b` is `[r×c]`, giving `[k×c]`
fn t_mm(a: &[f64], r: usize, k: usize, b: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let brow = &b[i * c..(i + 1) * c];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Records operations and replays them backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn leaf(&mut self, tensor: Tensor, tracked: bool) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::numeric("tape input"));
        }
        let shape = tensor.shape().to_vec();
        Ok(self.push(shape, tensor.into_values(), Op::Leaf, tracked))
    }

    /// Input whose gradient is wanted.
    pub fn var(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor, true)
    }

    /// Input that is never differentiated.
    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor, false)
    }

    /// Pulls a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = &self.node(v).shape;
        (rows_of(s), cols_of(s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let value = mm(self.value(a), r, k, self.value(b), c);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![r, c], value, Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ`; `a` is `[r×k]` (or a `[k]` row), `b` is `[c×k]` (or a `[k]` row).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ((r, k), (c, kb)) = ((rows_of(sa), cols_of(sa)), (rows_of(sb), cols_of(sb)));
        if sa.len() > 2 || sb.len() > 2 || sa.is_empty() || sb.is_empty() || k != kb {
            return Err(Error::shape("matmul_t", sa, sb));
        }
        let value = mm_t(self.value(a), r, k, self.value(b), c);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![r, c], value, Op::MatMulT(a, b), tracked))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a bias row `b` (length = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.shape(a).len() > 2 || self.node(b).value.len() != c {
            return Err(Error::shape("add_row", self.shape(a), self.shape(b)));
        }
        let bias = &self.node(b).value;
        let mut value = self.value(a).to_vec();
        for i in 0..r {
            for (o, &bv) in value[i * c..(i + 1) * c].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let tracked = self.tracked(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::AddRow(a, b), tracked))
    }

    /// Scales each row `i` of `a` by `col[i]`; `col` has one entry per row.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.node(col).value.len() != r {
            return Err(Error::shape("mul_col", self.shape(a), self.shape(col)));
        }
        let s = &self.node(col).value;
        let mut value = self.value(a).to_vec();
        for i in 0..r {
            value[i * c..(i + 1) * c].iter_mut().for_each(|o| *o *= s[i]);
        }
        let tracked = self.tracked(&[a, col]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::MulCol(a, col), tracked))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let tracked = self.tracked(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, tracked)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax of a vector, or of each row of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() > 2 {
            return Err(Error::shape("softmax", self.shape(a), &[]));
        }
        if self.value(a).iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("softmax input"));
        }
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&src[i * c..(i + 1) * c], &mut value[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::Softmax(a), tracked))
    }

    /// Concatenates along columns. Vectors concatenate into a longer vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let r = self.dims(first).0;
        let all_vectors = parts.iter().all(|&p| self.shape(p).len() <= 1);
        for &p in parts {
            if self.dims(p).0 != r || self.shape(p).len() > 2 {
                return Err(Error::shape("concat", self.shape(first), self.shape(p)));
            }
        }
        let c: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                value.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let shape = if all_vectors { vec![c] } else { vec![r, c] };
        let tracked = self.tracked(parts);
        Ok(self.push(shape, value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Stacks along rows; every part must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let c = self.dims(first).1;
        let mut value = Vec::new();
        let mut r = 0;
        for &p in parts {
            if self.dims(p).1 != c || self.shape(p).len() > 2 {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            r += self.dims(p).0;
            value.extend_from_slice(self.value(p));
        }
        let tracked = self.tracked(parts);
        Ok(self.push(vec![r, c], value, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start > end || end > c {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, end]));
        }
        let w = end - start;
        let src = self.value(a);
        let mut value = Vec::with_capacity(r * w);
        for i in 0..r {
            value.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let shape = if self.shape(a).len() <= 1 { vec![w] } else { vec![r, w] };
        let tracked = self.tracked(&[a]);
        Ok(self.push(shape, value, Op::SliceCols(a, start), tracked))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.shape(a).len() != 2 || start > end || end > r {
            return Err(Error::shape("slice_rows", self.shape(a), &[start, end]));
        }
        let value = self.value(a)[start * c..end * c].to_vec();
        let tracked = self.tracked(&[a]);
        Ok(self.push(vec![end - start, c], value, Op::SliceRows(a, start), tracked))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", self.shape(a), &[bad]));
        }
        let src = self.value(a);
        let mut value = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            value.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(vec![idx.len(), c], value, Op::GatherRows(a, idx.to_vec()), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.shape(a).len() > 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let src = self.value(a);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(vec![c, r], value, Op::Transpose(a), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let tracked = self.tracked(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let tracked = self.tracked(&[a]);
        self.push(Vec::new(), vec![s], Op::Mean(a), tracked)
    }

    /// Column-wise mean over rows: `[r×c] -> [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut value = vec![0.0; c];
        for i in 0..r {
            for (o, &x) in value.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        value.iter_mut().for_each(|o| *o /= r as f64);
        let tracked = self.tracked(&[a]);
        self.push(vec![c], value, Op::MeanRows(a), tracked)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape("dot", self.shape(a), self.shape(b)));
        }
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Vec::new(), vec![s], Op::Dot(a, b), tracked))
    }

    /// Euclidean norm of all entries; its subgradient at zero is taken as zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        let tracked = self.tracked(&[a]);
        self.push(Vec::new(), vec![s], Op::L2Norm(a), tracked)
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`. Identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout probability {p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let tracked = self.tracked(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::Dropout(a, mask), tracked))
    }

    /// Per-step weighted location sums: `alpha` is `[w×L]`, `x` is `[w·L×n]`
    /// (step-major), and row `t` of the `[w×n]` result is
    /// `Σ_l alpha[t,l] · x[t·L + l]`.
    pub fn block_mix(&mut self, alpha: Var, x: Var) -> Result<Var> {
        let (w, l) = self.dims(alpha);
        let (xr, n) = self.dims(x);
        if xr != w * l || self.shape(alpha).len() != 2 {
            return Err(Error::shape("block_mix", self.shape(alpha), self.shape(x)));
        }
        let (av, xv) = (self.value(alpha), self.value(x));
        let mut value = vec![0.0; w * n];
        for t in 0..w {
            let out = &mut value[t * n..(t + 1) * n];
            for loc in 0..l {
                let a = av[t * l + loc];
                let row = &xv[(t * l + loc) * n..(t * l + loc + 1) * n];
                for (o, &xj) in out.iter_mut().zip(row) {
                    *o += a * xj;
                }
            }
        }
        let tracked = self.tracked(&[alpha, x]);
        Ok(self.push(vec![w, n], value, Op::BlockMix(alpha, x), tracked))
    }

    /// Fused LSTM cell. `pre` is `[B×4m]` gate pre-activations laid out as
    /// input, forget, candidate, output; `cell` is the previous `[B×m]` cell
    /// state. Returns `[B×2m]` holding the new hidden state then cell state.
    pub fn lstm_cell(&mut self, pre: Var, cell: Var) -> Result<Var> {
        let (b, four_m) = self.dims(pre);
        let m = four_m / 4;
        if four_m % 4 != 0 || self.dims(cell) != (b, m) {
            return Err(Error::shape("lstm_cell", self.shape(pre), self.shape(cell)));
        }
        let (pv, cv) = (self.value(pre), self.value(cell));
        let mut value = vec![0.0; b * 2 * m];
        for r in 0..b {
            let p = &pv[r * four_m..(r + 1) * four_m];
            for j in 0..m {
                let i = sigmoid(p[j]);
                let f = sigmoid(p[m + j]);
                let g = p[2 * m + j].tanh();
                let o = sigmoid(p[3 * m + j]);
                let c = f * cv[r * m + j] + i * g;
                value[r * 2 * m + j] = o * c.tanh();
                value[r * 2 * m + m + j] = c;
            }
        }
        let tracked = self.tracked(&[pre, cell]);
        Ok(self.push(vec![b, 2 * m], value, Op::LstmCell(pre, cell), tracked))
    }

    /// `Σ_j √rows · ‖Z[:, j]‖₂`: the ℓ2,1 norm with one group per column.
    pub fn group_norm(&mut self, z: Var) -> Result<Var> {
        if self.shape(z).len() > 2 {
            return Err(Error::shape("group_norm", self.shape(z), &[]));
        }
        let (r, c) = self.dims(z);
        let s = column_group_norm(self.value(z), r, c);
        let tracked = self.tracked(&[z]);
        Ok(self.push(Vec::new(), vec![s], Op::GroupNorm(z), tracked))
    }

    /// Computes `∂loss/∂v` for every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !ln.tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (r, k) = self.dims(*a);
                let c = self.dims(*b).1;
                send(*a, mm_t(g, r, c, self.value(*b), k));
                send(*b, t_mm(self.value(*a), r, k, g, c));
            }
            Op::MatMulT(a, b) => {
                let (r, k) = self.dims(*a);
                let c = self.dims(*b).0;
                send(*a, mm(g, r, c, self.value(*b), k));
                send(*b, t_mm(g, r, c, self.value(*a), k));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::AddRow(a, b) => {
                let (r, c) = self.dims(*a);
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    gb.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(o, x)| *o += x);
                }
                send(*a, g.to_vec());
                send(*b, gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::MulCol(a, col) => {
                let (r, c) = self.dims(*a);
                let (av, s) = (self.value(*a), self.value(*col));
                let mut ga = g.to_vec();
                let mut gs = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] *= s[i];
                        gs[i] += g[i * c + j] * av[i * c + j];
                    }
                }
                send(*a, ga);
                send(*col, gs);
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
            Op::Tanh(a) => send(
                *a,
                g.iter().zip(&node.value).map(|(x, y)| x * (1.0 - y * y)).collect(),
            ),
            Op::Sigmoid(a) => send(
                *a,
                g.iter().zip(&node.value).map(|(x, y)| x * y * (1.0 - y)).collect(),
            ),
            Op::Softmax(a) => {
                let (r, c) = self.dims(*a);
                let s = &node.value;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let range = i * c..(i + 1) * c;
                    let inner: f64 = g[range.clone()].iter().zip(&s[range.clone()]).map(|(x, y)| x * y).sum();
                    for j in range {
                        ga[j] = s[j] * (g[j] - inner);
                    }
                }
                send(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let r = rows_of(&node.shape);
                let c = node.value.len() / r.max(1);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    let mut gp = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * c + offset..i * c + offset + pc]);
                    }
                    offset += pc;
                    send(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    send(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims(*a);
                let w = cols_of(&node.shape);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(*a, ga);
            }
            Op::SliceRows(a, start) => {
                let c = self.dims(*a).1;
                let mut ga = vec![0.0; self.value(*a).len()];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                send(*a, ga);
            }
            Op::GatherRows(a, idx) => {
                let c = self.dims(*a).1;
                let mut ga = vec![0.0; self.value(*a).len()];
                for (k, &i) in idx.iter().enumerate() {
                    ga[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(o, x)| *o += x);
                }
                send(*a, ga);
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                send(*a, ga);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let len = self.value(*a).len();
                send(*a, vec![g[0] / len as f64; len]);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.dims(*a);
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend(g.iter().map(|x| x / r as f64));
                }
                send(*a, ga);
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, bv.iter().map(|y| g[0] * y).collect());
                send(*b, av.iter().map(|x| g[0] * x).collect());
            }
            Op::L2Norm(a) => {
                let norm = node.value[0];
                let av = self.value(*a);
                if norm > 0.0 {
                    send(*a, av.iter().map(|x| g[0] * x / norm).collect());
                } else {
                    send(*a, vec![0.0; av.len()]);
                }
            }
            Op::Dropout(a, mask) => send(*a, g.iter().zip(mask).map(|(x, m)| x * m).collect()),
            Op::BlockMix(alpha, x) => {
                let (w, l) = self.dims(*alpha);
                let n = self.dims(*x).1;
                let (av, xv) = (self.value(*alpha), self.value(*x));
                let mut ga = vec![0.0; w * l];
                let mut gx = vec![0.0; xv.len()];
                for t in 0..w {
                    let gt = &g[t * n..(t + 1) * n];
                    for loc in 0..l {
                        let row = (t * l + loc) * n;
                        let a = av[t * l + loc];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gt[j] * xv[row + j];
                            gx[row + j] = a * gt[j];
                        }
                        ga[t * l + loc] = acc;
                    }
                }
                send(*alpha, ga);
                send(*x, gx);
            }
            Op::LstmCell(pre, cell) => {
                let (b, four_m) = self.dims(*pre);
                let m = four_m / 4;
                let (pv, cv) = (self.value(*pre), self.value(*cell));
                let mut gp = vec![0.0; b * four_m];
                let mut gc = vec![0.0; b * m];
                for r in 0..b {
                    let p = &pv[r * four_m..(r + 1) * four_m];
                    for j in 0..m {
                        let i = sigmoid(p[j]);
                        let f = sigmoid(p[m + j]);
                        let gg = p[2 * m + j].tanh();
                        let o = sigmoid(p[3 * m + j]);
                        let c = node.value[r * 2 * m + m + j];
                        let tc = c.tanh();
                        let dh = g[r * 2 * m + j];
                        let dc = g[r * 2 * m + m + j] + dh * o * (1.0 - tc * tc);
                        let base = r * four_m;
                        gp[base + j] = dc * gg * i * (1.0 - i);
                        gp[base + m + j] = dc * cv[r * m + j] * f * (1.0 - f);
                        gp[base + 2 * m + j] = dc * i * (1.0 - gg * gg);
                        gp[base + 3 * m + j] = dh * tc * o * (1.0 - o);
                        gc[r * m + j] = dc * f;
                    }
                }
                send(*pre, gp);
                send(*cell, gc);
            }
            Op::GroupNorm(z) => {
                let (r, c) = self.dims(*z);
                let zv = self.value(*z);
                let scale = (r as f64).sqrt();
                let mut gz = vec![0.0; r * c];
                for j in 0..c {
                    let norm = (0..r).map(|i| zv[i * c + j].powi(2)).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for i in 0..r {
                            gz[i * c + j] = g[0] * scale * zv[i * c + j] / norm;
                        }
                    }
                }
                send(*z, gz);
            }
        }
    }
}

/// `Σ_j √rows · ‖column j‖₂` over a row-major `[rows × cols]` buffer.
pub fn column_group_norm(values: &[f64], rows: usize, cols: usize) -> f64 {
    let scale = (rows as f64).sqrt();
    (0..cols)
        .map(|j| {
            (0..rows)
                .map(|i| values[i * cols + j].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        * scale
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's gradient slots.
    pub fn write_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (&id, &v) in &tape.params {
            if let Some(g) = self.get(v) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 3])).unwrap();
        let s = tape.softmax(x).unwrap();
        assert!(close(tape.value(s), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn tanh_and_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let t = tape.tanh(x);
        let s = tape.sigmoid(x);
        assert_eq!(tape.item(t), 0.0);
        assert_eq!(tape.item(s), 0.5);
    }

    #[test]
    fn matmul_with_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
        let i = tape.constant(Tensor::identity(2)).unwrap();
        let p = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut tape = Tape::new();
        let err = tape.var(Tensor::vector(vec![1.0, f64::NAN])).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.3, -2.0, 5.0])).unwrap();
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_self_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let d = tape.dot(x, x).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(1.5)).unwrap();
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let d = tape.dot(x, c).unwrap();
        let g = tape.backward(d).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.7, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.var(Tensor::filled([1000], 1.0)).unwrap();
        let y = tape.dropout(x, 0.25, true, &mut rng).unwrap();
        let vals = tape.value(y);
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept), "kept {kept}");
    }

    #[test]
    fn params_write_gradients_into_store() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        assert_eq!(tape.param(&store, id), w);
        let d = tape.dot(w, w).unwrap();
        let g = tape.backward(d).unwrap();
        g.write_into(&tape, &mut store);
        g.write_into(&tape, &mut store);
        assert_eq!(store.get(id).grad().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn lstm_cell_zero_input_zero_state() {
        let mut tape = Tape::new();
        let pre = tape.constant(Tensor::zeros([1, 8])).unwrap();
        let c = tape.constant(Tensor::zeros([1, 2])).unwrap();
        let out = tape.lstm_cell(pre, c).unwrap();
        assert_eq!(tape.value(out), &[0.0; 4]);
    }
}
