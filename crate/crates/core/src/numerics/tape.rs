//! Reverse-mode gradients over a fixed set of matrix primitives.
//!
//! The tape records each primitive together with whatever its backward rule
//! needs. Only leaves created with [`Tape::param`] or
//! [`Tape::gather_param`] are trainable; everything else is a frozen constant
//! and never receives a gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{self, LayerNormCache};
use crate::numerics::Matrix;

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.id_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(NamedTensor { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NamedTensor)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.map.get(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    fn entry(&mut self, id: ParamId, rows: usize, cols: usize) -> &mut Matrix {
        self.map
            .entry(id)
            .or_insert_with(|| Matrix::zeros(rows, cols))
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Matrix) -> Result<()> {
        self.entry(id, grad.rows(), grad.cols()).add_assign(grad)
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    GatherParam {
        param: ParamId,
        rows: usize,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    MaskedMean {
        x: Var,
        weights: Vec<f64>,
    },
    Concat(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Frozen leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Trainable leaf holding a copy of `value`.
    pub fn param(&mut self, id: ParamId, value: &Matrix) -> Var {
        self.push(value.clone(), Op::Param(id), true)
    }

    /// Rows `ids` of a trainable table, without copying the whole table.
    pub fn gather_param(&mut self, id: ParamId, table: &Matrix, ids: &[usize]) -> Result<Var> {
        let mut out = Matrix::zeros(ids.len(), table.cols());
        for (r, &i) in ids.iter().enumerate() {
            if i >= table.rows() {
                return Err(Error::shape(
                    "gather_param",
                    format!("row {i} of a {}-row table", table.rows()),
                ));
            }
            out.row_mut(r).copy_from_slice(table.row(i));
        }
        let op = Op::GatherParam {
            param: id,
            rows: table.rows(),
            ids: ids.to_vec(),
        };
        Ok(self.push(out, op, true))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = ops::gelu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (value, cache) =
            ops::layer_normalize_cached(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            rg,
        ))
    }

    /// Mask-weighted mean of the rows of `x`, producing a `1 × cols` row.
    pub fn masked_mean(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.rows() {
            return Err(Error::shape(
                "masked_mean",
                format!("mask of length {} for {} rows", mask.len(), xv.rows()),
            ));
        }
        let total: f64 = mask.iter().sum();
        if total <= 0.0 {
            return Err(Error::Pooling("mask has no active positions".into()));
        }
        let weights: Vec<f64> = mask.iter().map(|m| m / total).collect();
        let mut out = Matrix::zeros(1, xv.cols());
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += w * v;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaskedMean { x, weights }, rg))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape(
                "concat",
                format!("{:?} with {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Matrix::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn backward(&self, output: Var, seed: &Matrix) -> Result<Gradients> {
        let mut grads = Gradients::new();
        self.backward_into(output, seed, &mut grads)?;
        Ok(grads)
    }

    /// Propagates `seed` (the gradient of a scalar loss w.r.t. `output`) and
    /// adds the resulting parameter gradients into `grads`.
    pub fn backward_into(&self, output: Var, seed: &Matrix, grads: &mut Gradients) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward on an empty tape".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("unknown output variable {}", output.0)));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {:?} for output {:?}",
                    seed.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }

        let mut adj: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate(*id, &g)?,
                Op::GatherParam { param, rows, ids } => {
                    let table = grads.entry(*param, *rows, g.cols());
                    for (r, &row) in ids.iter().enumerate() {
                        for (t, v) in table.row_mut(row).iter_mut().zip(g.row(r)) {
                            *t += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        accumulate(&mut adj, *a, ga)?;
                    }
                    if self.requires_grad(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut adj, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut adj, *a, g.clone())?;
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut adj, *b, g)?;
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.requires_grad(*bias) {
                        accumulate(&mut adj, *bias, g.column_sums())?;
                    }
                    if self.requires_grad(*x) {
                        accumulate(&mut adj, *x, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut adj, *a, g.hadamard(self.value(*b))?)?;
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut adj, *b, g.hadamard(self.value(*a))?)?;
                    }
                }
                Op::Gelu(x) => {
                    let gx = self
                        .value(*x)
                        .zip_with(&g, |xv, gv| gv * ops::gelu_derivative(xv))?;
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    cache,
                } => {
                    if self.requires_grad(*bias) {
                        accumulate(&mut adj, *bias, g.column_sums())?;
                    }
                    if self.requires_grad(*gain) {
                        let gg = g.hadamard(&cache.normalized)?.column_sums();
                        accumulate(&mut adj, *gain, gg)?;
                    }
                    if self.requires_grad(*x) {
                        let gain_v = self.value(*gain);
                        let cols = g.cols();
                        let n = cols as f64;
                        let mut gx = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            let xhat = cache.normalized.row(r);
                            let dxhat: Vec<f64> = g
                                .row(r)
                                .iter()
                                .zip(gain_v.data())
                                .map(|(a, b)| a * b)
                                .collect();
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
                            let inv = cache.inv_std[r];
                            for (c, out) in gx.row_mut(r).iter_mut().enumerate() {
                                *out = inv / n * (n * dxhat[c] - sum_d - xhat[c] * sum_dx);
                            }
                        }
                        accumulate(&mut adj, *x, gx)?;
                    }
                }
                Op::MaskedMean { x, weights } => {
                    let cols = g.cols();
                    let mut gx = Matrix::zeros(weights.len(), cols);
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.data()) {
                            *o = w * v;
                        }
                    }
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::Concat(a, b) => {
                    let ac = self.value(*a).cols();
                    let bc = self.value(*b).cols();
                    if self.requires_grad(*a) {
                        let mut ga = Matrix::zeros(g.rows(), ac);
                        for r in 0..g.rows() {
                            ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        }
                        accumulate(&mut adj, *a, ga)?;
                    }
                    if self.requires_grad(*b) {
                        let mut gb = Matrix::zeros(g.rows(), bc);
                        for r in 0..g.rows() {
                            gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                        }
                        accumulate(&mut adj, *b, gb)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_map_gradient_is_input_broadcast() {
        // loss = sum(x · W) for a fixed row x: dW[i][j] = x[i].
        let mut store = ParamStore::new();
        let w = store.insert("w", Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(vec![0.5, -1.0, 2.0]));
        let wv = tape.param(w, store.get(w));
        let y = tape.matmul(x, wv).unwrap();
        let grads = tape.backward(y, &Matrix::filled(1, 2, 1.0)).unwrap();
        let dw = grads.get(w).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(dw.get(i, j), [0.5, -1.0, 2.0][i]);
            }
        }
    }

    #[test]
    fn frozen_only_tape_yields_no_gradients() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::row_vector(vec![1.0, 2.0]));
        let b = tape.constant(Matrix::row_vector(vec![3.0, 4.0]));
        let c = tape.mul(a, b).unwrap();
        let grads = tape.backward(c, &Matrix::filled(1, 2, 1.0)).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn empty_tape_is_usage_error() {
        let tape = Tape::new();
        let err = tape.backward(Var(0), &Matrix::zeros(1, 1)).unwrap_err();
        assert!(matches!(err, Error::Tape(_)));
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(1, 3));
        assert!(tape.backward(a, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn all_zero_mask_is_pooling_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(3, 2));
        assert!(matches!(
            tape.masked_mean(x, &[0.0, 0.0, 0.0]),
            Err(Error::Pooling(_))
        ));
    }

    /// Composite graph touching every primitive, checked against central
    /// differences on each trainable tensor.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let table = store.insert("table", Matrix::uniform(10, 3, 1.0, &mut rng));
        let proj = store.insert("proj", Matrix::uniform(3, 4, 1.0, &mut rng));
        let bias = store.insert("bias", Matrix::uniform(1, 4, 1.0, &mut rng));
        let gain = store.insert("gain", Matrix::uniform(1, 6, 1.0, &mut rng));
        let shift = store.insert("shift", Matrix::uniform(1, 6, 1.0, &mut rng));
        let scale = store.insert("scale", Matrix::uniform(1, 4, 1.0, &mut rng));
        let frozen = Matrix::uniform(1, 2, 1.0, &mut rng);
        let seed = Matrix::uniform(1, 6, 1.0, &mut rng);
        let ids = [2usize, 7, 2, 9];
        let mask = [1.0, 1.0, 0.0, 1.0];

        let forward = |store: &ParamStore, tape: &mut Tape| -> Var {
            let rows = tape.gather_param(table, store.get(table), &ids).unwrap();
            let pooled = tape.masked_mean(rows, &mask).unwrap();
            let p = tape.param(proj, store.get(proj));
            let z = tape.matmul(pooled, p).unwrap();
            let b = tape.param(bias, store.get(bias));
            let z = tape.add_row(z, b).unwrap();
            let s = tape.param(scale, store.get(scale));
            let z = tape.mul(z, s).unwrap();
            let f = tape.constant(frozen.clone());
            let z = tape.concat(z, f).unwrap();
            let z = tape.add(z, z).unwrap();
            let g = tape.param(gain, store.get(gain));
            let sh = tape.param(shift, store.get(shift));
            let z = tape.layer_norm(z, g, sh).unwrap();
            tape.gelu(z)
        };
        let loss = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let out = forward(store, &mut tape);
            tape.value(out).hadamard(&seed).unwrap().sum()
        };

        let mut tape = Tape::new();
        let out = forward(&store, &mut tape);
        let grads = tape.backward(out, &seed).unwrap();
        assert_eq!(grads.len(), store.len());

        let h = 1e-5;
        for id in store.ids() {
            let analytic = grads.get(id).unwrap().clone();
            for k in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[k] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[k] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = analytic.data()[k];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4 || (fd - an).abs() < 1e-9,
                    "{} [{k}]: analytic {an} vs fd {fd}",
                    store.name(id)
                );
            }
        }
        // Rows never gathered get exactly zero.
        assert_eq!(grads.get(table).unwrap().row(0), &[0.0, 0.0, 0.0]);
    }
}
