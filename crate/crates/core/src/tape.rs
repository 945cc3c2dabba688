//! Eager reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every operation computes its value immediately and records how to push
//! gradients back to its inputs. Parameters live in a [`ParamStore`]; a
//! [`Graph`] borrows the store for one forward/backward pass and returns
//! per-parameter gradients from [`Graph::backward`].

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

/// Serialized form of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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
                rows: v.nrows(),
                cols: v.ncols(),
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites every parameter from `tensors`, matching by name and shape.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                by_name.len()
            )));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if (t.rows, t.cols) != value.dim() || t.data.len() != t.rows * t.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {}x{}, expected {:?}",
                    t.rows,
                    t.cols,
                    value.dim()
                )));
            }
            *value = Matrix::from_shape_vec((t.rows, t.cols), t.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

/// Gradients indexed by [`ParamId`]; parameters that did not take part are `None`.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a + b` where `b` is a single row broadcast over `a`.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    /// Per-row blend `mask * new + (1 - mask) * old`.
    Blend {
        new: Var,
        old: Var,
        mask: Vec<f64>,
    },
    SumCols(Var),
    Mean(Var),
    /// Weighted softmax cross entropy over row blocks; rows `t * groups + i`
    /// accumulate into output row `i`.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        groups: usize,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters read by this graph so far.
    pub fn used_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// The node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Selects rows of `table`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&t.row(id));
        }
        self.push(value, Op::Gather(table, ids))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start, end))
    }

    pub fn blend(&mut self, new: Var, old: Var, mask: Vec<f64>) -> Var {
        let mut value = self.value(old).clone();
        let n = self.value(new);
        for (r, &m) in mask.iter().enumerate() {
            if m != 0.0 {
                let mut row = value.row_mut(r);
                row *= 1.0 - m;
                row.scaled_add(m, &n.row(r));
            }
        }
        self.push(value, Op::Blend { new, old, mask })
    }

    /// Row sums, `n x k -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a))
    }

    /// Mean of all entries as a `1 x 1` value.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.len().max(1) as f64;
        self.push(Matrix::from_elem((1, 1), m), Op::Mean(a))
    }

    /// Weighted cross entropy of `logits` rows against `targets`, where row
    /// `t * groups + i` contributes to output row `i` (a `groups x 1` column).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        groups: usize,
    ) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len());
        assert_eq!(l.nrows(), weights.len());
        assert_eq!(l.nrows() % groups, 0);
        let mut probs = Matrix::zeros(l.dim());
        let mut out = Matrix::zeros((groups, 1));
        for (r, row) in l.outer_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut p = probs.row_mut(r);
            Zip::from(&mut p).and(&row).for_each(|p, &x| *p = (x - max).exp());
            let z: f64 = p.sum();
            p /= z;
            if weights[r] != 0.0 {
                let log_p = row[targets[r]] - max - z.ln();
                out[[r % groups, 0]] -= weights[r] * log_p;
            }
        }
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                groups,
                probs,
            },
        )
    }

    /// `sum_k coef_k * x_k` over `1 x 1` values.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(c, v) in terms {
            let scaled = self.scale(v, c);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.unwrap_or_else(|| self.constant(Matrix::zeros((1, 1))))
    }

    /// Back-propagates from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Matrix::ones((1, 1)));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }
        fn acc_with(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize), f: impl FnOnce(&mut Matrix)) {
            let slot = grads[v.0].get_or_insert_with(|| Matrix::zeros(shape));
            f(slot);
        }

        let mut param_grads: Vec<Option<Matrix>> = (0..self.store.len()).map(|_| None).collect();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => param_grads[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Square(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d *= 2.0 * x);
                    acc(&mut grads, *a, d);
                }
                Op::Gather(table, ids) => {
                    let shape = self.value(*table).dim();
                    acc_with(&mut grads, *table, shape, |t| {
                        for (r, &id) in ids.iter().enumerate() {
                            let mut row = t.row_mut(id);
                            row += &g.row(r);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let shape = self.value(*a).dim();
                    acc_with(&mut grads, *a, shape, |t| {
                        let mut view = t.slice_mut(s![.., *start..*end]);
                        view += &g;
                    });
                }
                Op::SliceRows(a, start, end) => {
                    let shape = self.value(*a).dim();
                    acc_with(&mut grads, *a, shape, |t| {
                        let mut view = t.slice_mut(s![*start..*end, ..]);
                        view += &g;
                    });
                }
                Op::Blend { new, old, mask } => {
                    let mut g_new = g.clone();
                    let mut g_old = g;
                    for (r, &m) in mask.iter().enumerate() {
                        let mut rn = g_new.row_mut(r);
                        rn *= m;
                        let mut ro = g_old.row_mut(r);
                        ro *= 1.0 - m;
                    }
                    acc(&mut grads, *new, g_new);
                    acc(&mut grads, *old, g_old);
                }
                Op::SumCols(a) => {
                    let cols = self.value(*a).ncols();
                    let d = g
                        .broadcast((g.nrows(), cols))
                        .expect("column broadcast")
                        .to_owned();
                    acc(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let shape = self.value(*a).dim();
                    let n = (shape.0 * shape.1).max(1) as f64;
                    acc(&mut grads, *a, Matrix::from_elem(shape, g[[0, 0]] / n));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    groups,
                    probs,
                } => {
                    let mut d = probs.clone();
                    for (r, mut row) in d.outer_iter_mut().enumerate() {
                        let scale = weights[r] * g[[r % groups, 0]];
                        if scale == 0.0 {
                            row.fill(0.0);
                            continue;
                        }
                        row[targets[r]] -= 1.0;
                        row *= scale;
                    }
                    acc(&mut grads, *logits, d);
                }
            }
        }
        Gradients { grads: param_grads }
    }
}
