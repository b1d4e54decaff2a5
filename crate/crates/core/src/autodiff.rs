//! Reverse-mode differentiation over dense f64 matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] so building a graph copies no weights;
//! [`Graph::backward`] returns gradients for every parameter touched.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Named, ordered collection of learnable matrices. Vectors are stored as
/// `1 x n` rows.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Serialized form of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| NamedTensor {
                name: name.clone(),
                shape: [v.nrows(), v.ncols()],
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match
    /// exactly.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.len() {
            return Err(Error::Model(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.len()
            )));
        }
        for t in tensors {
            let id = self
                .id(&t.name)
                .ok_or_else(|| Error::Model(format!("unexpected tensor `{}`", t.name)))?;
            let cur = &mut self.values[id.0];
            if [cur.nrows(), cur.ncols()] != t.shape || t.data.len() != cur.len() {
                return Err(Error::Model(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    cur.shape()
                )));
            }
            *cur = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::Model(e.to_string()))?;
        }
        Ok(())
    }
}

/// One gradient matrix per parameter, same shapes as the store.
#[derive(Debug, Clone)]
pub struct Grads(pub Vec<Array2<f64>>);

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Grads(store.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect())
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.0 {
            a.mapv_inplace(|x| x * c);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulBT(Var, Var),
    Add(Var, Var),
    /// Broadcasts a `1 x n` row over every row of the left operand.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Rows(Vec<(Var, usize)>),
    Dropout {
        x: Var,
        mask: Array2<f64>,
    },
    NllRows {
        logits: Var,
        targets: Vec<(usize, usize)>,
    },
}

enum Value {
    Owned(Array2<f64>),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// The tape of one forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'p> Graph<'p> {
    /// Evaluation graph: dropout disabled.
    pub fn eval(params: &'p ParamStore) -> Self {
        Self::new(params, false, 0)
    }

    pub fn new(params: &'p ParamStore, training: bool, seed: u64) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(i) => &self.params.values[*i],
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on a non-scalar node");
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id.0) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id.0),
            op: Op::Param(id.0),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id.0, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let out = self.value(a) + &r.row(0);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// `x · w + b` with `w: in x out` and `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise normalization followed by a learned affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mean = xv.mean_axis(Axis(1)).expect("non-empty rows");
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
        let out = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Row softmax. With `causal`, entry (i, j) for j > i gets probability 0.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let mut out = self.value(a).clone();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            if causal {
                for j in (i + 1)..row.len() {
                    row[j] = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Rows of `table` selected by `ids`, in order.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let t = self.param(table);
        self.gather(t, ids)
    }

    /// Mean of the selected rows as a `1 x d` matrix.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        assert!(!rows.is_empty(), "mean over no rows");
        let xv = self.value(x);
        let mut out = Array2::zeros((1, xv.ncols()));
        for &r in rows {
            out.row_mut(0).scaled_add(1.0, &xv.row(r));
        }
        out /= rows.len() as f64;
        self.push(
            out,
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    pub fn mean_all_rows(&mut self, x: Var) -> Var {
        let rows: Vec<usize> = (0..self.value(x).nrows()).collect();
        self.mean_rows(x, &rows)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks single rows taken from arbitrary nodes.
    pub fn rows(&mut self, sources: &[(Var, usize)]) -> Var {
        assert!(!sources.is_empty(), "rows() needs at least one source");
        let d = self.value(sources[0].0).ncols();
        let mut out = Array2::zeros((sources.len(), d));
        for (r, &(v, i)) in sources.iter().enumerate() {
            out.row_mut(r).assign(&self.value(v).row(i));
        }
        let inputs: Vec<Var> = sources.iter().map(|s| s.0).collect();
        self.push(out, Op::Rows(sources.to_vec()), &inputs)
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let dim = self.value(x).raw_dim();
        let mask = Array2::from_shape_simple_fn(dim, || if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let out = self.value(x) * &mask;
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Sum over `(row, target)` of `-log softmax(logits[row])[target]`, as a
    /// `1 x 1` node.
    pub fn nll_rows(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let l = self.value(logits);
        let mut total = 0.0;
        for &(r, t) in targets {
            total -= log_softmax(l.row(r).as_slice().expect("contiguous row"))[t];
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::NllRows {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut out = Grads::zeros(self.params);
        self.backward_into(loss, &mut out);
        out
    }

    /// Like [`Graph::backward`] but accumulates into `out`.
    pub fn backward_into(&self, loss: Var, out: &mut Grads) {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, delta: Array2<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(a) => *a += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => out.0[*p] += &g,
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.dot(&bv.t()));
                    acc(*b, av.t().dot(&g));
                }
                Op::MatMulBT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.dot(bv));
                    acc(*b, g.t().dot(av));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(gelu_grad);
                    acc(*a, g * d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * &self.value(*gamma).row(0);
                    let n = xhat.ncols() as f64;
                    let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut dx = &dxhat * n - &sum_d - xhat * &sum_dx;
                    Zip::from(dx.rows_mut()).and(inv_std).for_each(|mut row, &s| row *= s / n);
                    acc(*x, dx);
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, y * &(&g - &dot));
                }
                Op::Gather { table, ids } => {
                    let mut d = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        d.row_mut(id).scaled_add(1.0, &g.row(r));
                    }
                    acc(*table, d);
                }
                Op::MeanRows { x, rows } => {
                    let mut d = Array2::zeros(self.value(*x).raw_dim());
                    let w = 1.0 / rows.len() as f64;
                    for &r in rows {
                        d.row_mut(r).scaled_add(w, &g.row(0));
                    }
                    acc(*x, d);
                }
                Op::SliceCols { x, start } => {
                    let mut d = Array2::zeros(self.value(*x).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(*p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::Rows(sources) => {
                    let mut deltas: HashMap<usize, Array2<f64>> = HashMap::new();
                    for (r, &(v, row)) in sources.iter().enumerate() {
                        if !self.nodes[v.0].needs_grad {
                            continue;
                        }
                        let d = deltas
                            .entry(v.0)
                            .or_insert_with(|| Array2::zeros(self.value(v).raw_dim()));
                        d.row_mut(row).scaled_add(1.0, &g.row(r));
                    }
                    let mut keys: Vec<usize> = deltas.keys().copied().collect();
                    keys.sort_unstable();
                    for k in keys {
                        acc(Var(k), deltas.remove(&k).expect("present"));
                    }
                }
                Op::Dropout { x, mask } => acc(*x, g * mask),
                Op::NllRows { logits, targets } => {
                    let l = self.value(*logits);
                    let mut d = Array2::zeros(l.raw_dim());
                    let scale = g[[0, 0]];
                    for &(r, t) in targets {
                        let mut p = l.row(r).to_vec();
                        softmax_in_place(&mut p);
                        p[t] -= 1.0;
                        for (dst, v) in d.row_mut(r).iter_mut().zip(p) {
                            *dst += scale * v;
                        }
                    }
                    acc(*logits, d);
                }
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable softmax; `-inf` entries become exactly 0.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Normal(0, std) initialization.
pub fn init_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(dist))
}
