//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! Only the operations the network needs are implemented. Every op records
//! its inputs on the [`Tape`]; [`Tape::backward`] walks the records once in
//! reverse order and accumulates gradients additively across fan-out.
//!
//! ```
//! use pccnn::tensor::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::<f64>::new();
//! let w = store.add("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let mut tape = Tape::new();
//! let wv = tape.param(&store, w);
//! let loss = tape.sum(wv);
//! let grads = tape.backward(loss).unwrap();
//! grads.accumulate(&mut store, 1.0);
//! assert_eq!(store.get(w).grad.data(), &[1.0, 1.0, 1.0]);
//! ```

use std::collections::HashMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

/// Floating point element type of a tensor.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + AddAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: DType;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: DType = DType::Float32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::Float64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix (the leading extent).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a matrix (product of trailing extents).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} → {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Registry of trainable tensors, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Sparse pair list for neighbourhood contractions, stored row-compressed
/// by output row.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPlan {
    n_out: usize,
    n_in: usize,
    n_entries: usize,
    starts: Vec<usize>,
    input: Vec<u32>,
    entry: Vec<u32>,
    mask: Vec<bool>,
}

impl PairPlan {
    /// `rows[j]` lists `(input row, weight entry, mask bit)` for output row `j`.
    pub fn from_rows(rows: &[Vec<(usize, usize, bool)>], n_in: usize, n_entries: usize) -> Result<Self> {
        let mut b = PairPlanBuilder::new(n_in, n_entries);
        for r in rows {
            for &(i, e, m) in r {
                b.push(i, e, m)?;
            }
            b.finish_row();
        }
        Ok(b.build())
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_entries(&self) -> usize {
        self.n_entries
    }

    pub fn n_pairs(&self) -> usize {
        self.input.len()
    }

    /// Pairs of output row `j` as `(input row, entry, mask)`.
    pub fn row(&self, j: usize) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        (self.starts[j]..self.starts[j + 1])
            .map(move |p| (self.input[p] as usize, self.entry[p] as usize, self.mask[p]))
    }

    /// The same plan with masked pairs removed.
    pub fn without_masked(&self) -> Self {
        let mut b = PairPlanBuilder::new(self.n_in, self.n_entries);
        for j in 0..self.n_out {
            for (i, e, m) in self.row(j) {
                if m {
                    b.push(i, e, true).expect("indices already checked");
                }
            }
            b.finish_row();
        }
        b.build()
    }
}

pub struct PairPlanBuilder {
    plan: PairPlan,
}

impl PairPlanBuilder {
    pub fn new(n_in: usize, n_entries: usize) -> Self {
        Self {
            plan: PairPlan {
                n_out: 0,
                n_in,
                n_entries,
                starts: vec![0],
                input: Vec::new(),
                entry: Vec::new(),
                mask: Vec::new(),
            },
        }
    }

    pub fn push(&mut self, input: usize, entry: usize, mask: bool) -> Result<()> {
        if input >= self.plan.n_in {
            return Err(Error::IndexOutOfRange {
                index: input,
                len: self.plan.n_in,
            });
        }
        if entry >= self.plan.n_entries {
            return Err(Error::IndexOutOfRange {
                index: entry,
                len: self.plan.n_entries,
            });
        }
        self.plan.input.push(input as u32);
        self.plan.entry.push(entry as u32);
        self.plan.mask.push(mask);
        Ok(())
    }

    pub fn finish_row(&mut self) {
        self.plan.n_out += 1;
        self.plan.starts.push(self.plan.input.len());
    }

    pub fn build(self) -> PairPlan {
        self.plan
    }
}

/// How sampled weights combine with input channels in [`Tape::contract`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contraction {
    /// Weight rows hold `C·K` values laid out as `c·K + k`; output has `K` columns.
    Full { out_channels: usize },
    /// Weight rows hold `C` values; output keeps `C` columns.
    PerChannel,
    /// Weight rows hold one value shared by all channels.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    LeakyRelu(Var, T),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    L1 {
        pred: Var,
        target: Arc<Vec<T>>,
        valid: Arc<Vec<bool>>,
        count: usize,
    },
    Contract {
        features: Var,
        weights: Var,
        plan: Arc<PairPlan>,
        mode: Contraction,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::L1 { .. } => "l1_loss",
            Op::Contract { .. } => "contract",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward computation for one reverse pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    reversed: bool,
    check_finite: bool,
    flipped: Option<&'static str>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            reversed: false,
            check_finite: false,
            flipped: None,
        }
    }

    /// Every op output is checked for NaN/Inf when enabled.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Fault injection for the gradient-check suite: negates the backward
    /// rule of the op with the given name.
    #[doc(hidden)]
    pub fn flip_backward_sign(&mut self, op: &'static str) {
        self.flipped = Some(op);
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.reversed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; gradients with respect to it are still recorded.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a parameter on the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = matmul_raw(ta.data(), tb.data(), ta.rows(), ta.cols(), tb.cols());
        let shape = vec![ta.rows(), tb.cols()];
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b))
    }

    /// Adds a bias row to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.len() != n || ta.shape().len() != 2 {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += *b;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| *x * s).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(a, s))
    }

    /// `max(x, slope·x)` for `0 < slope < 1`; the slope branch also covers `x = 0`.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let ta = self.value(a);
        let out = ta
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { x * slope })
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
            .expect("finite check only fails on non-finite sums")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a))
    }

    /// Mean absolute difference over the entries where `valid` is set.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>, valid: &[bool]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() || valid.len() != tp.len() {
            return Err(Error::shape(
                "l1_loss",
                format!(
                    "pred {:?}, target {:?}, mask {}",
                    tp.shape(),
                    target.shape(),
                    valid.len()
                ),
            ));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::NoValidEntries);
        }
        let mut total = T::zero();
        for ((p, t), &m) in tp.data().iter().zip(target.data()).zip(valid) {
            if m {
                total += (*p - *t).abs();
            }
        }
        let loss = total / T::of(count as f64);
        self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target: Arc::new(target.data().to_vec()),
                valid: Arc::new(valid.to_vec()),
                count,
            },
        )
    }

    /// Neighbourhood contraction: for every output row `j`,
    /// `out[j] = Σ_{(i, e, m) ∈ plan.row(j)} (f[i] ⊙ w[e]) · m`
    /// with the channel pattern given by `mode`. The mask multiplies the
    /// product after it is formed.
    pub fn contract(
        &mut self,
        features: Var,
        weights: Var,
        plan: Arc<PairPlan>,
        mode: Contraction,
    ) -> Result<Var> {
        let (tf, tw) = (self.value(features), self.value(weights));
        let c = tf.cols();
        if tf.rows() != plan.n_in || tw.rows() != plan.n_entries {
            return Err(Error::shape(
                "contract",
                format!(
                    "features {:?} / weights {:?} vs plan ({} inputs, {} entries)",
                    tf.shape(),
                    tw.shape(),
                    plan.n_in,
                    plan.n_entries
                ),
            ));
        }
        let want = match mode {
            Contraction::Full { out_channels } => c * out_channels,
            Contraction::PerChannel => c,
            Contraction::Scalar => 1,
        };
        if tw.cols() != want {
            return Err(Error::shape(
                "contract",
                format!("weights need {want} columns for {mode:?}, got {}", tw.cols()),
            ));
        }
        let out = contract_forward(tf.data(), tw.data(), c, &plan, mode);
        let k = match mode {
            Contraction::Full { out_channels } => out_channels,
            _ => c,
        };
        self.push(
            Tensor::new(vec![plan.n_out, k], out)?,
            Op::Contract {
                features,
                weights,
                plan,
                mode,
            },
        )
    }

    /// `Σ_i mask[i]·weights[i]·features[i]` per channel, for `features [N×C]`
    /// and `weights [N×C]` or `[N×1]`. Returns shape `[C]`.
    pub fn gather_weighted_sum(&mut self, features: Var, weights: Var, mask: &[bool]) -> Result<Var> {
        let n = self.value(features).rows();
        let c = self.value(features).cols();
        if mask.len() != n {
            return Err(Error::shape(
                "gather_weighted_sum",
                format!("mask length {} for {n} rows", mask.len()),
            ));
        }
        let mode = match self.value(weights).cols() {
            1 => Contraction::Scalar,
            w if w == c => Contraction::PerChannel,
            w => {
                return Err(Error::shape(
                    "gather_weighted_sum",
                    format!("weights have {w} columns for {c} channels"),
                ))
            }
        };
        let mut b = PairPlanBuilder::new(n, n);
        for (i, &m) in mask.iter().enumerate() {
            b.push(i, i, m)?;
        }
        b.finish_row();
        let out = self.contract(features, weights, Arc::new(b.build()), mode)?;
        self.reshape(out, vec![c])
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are returned
    /// in [`Gradients`], to be accumulated into a store.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.reversed {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.reversed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(loss_shape, vec![T::one()])?);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let sign = if self.flipped == Some(self.nodes[idx].op.name()) {
                -T::one()
            } else {
                T::one()
            };
            self.backprop_node(idx, &g, sign, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v.0)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, sign: T, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut da = vec![T::zero(); m * k];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &tb.data()[kk * n..(kk + 1) * n];
                        let mut s = T::zero();
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        da[i * k + kk] = s * sign;
                    }
                }
                let mut db = vec![T::zero(); k * n];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let av = ta.data()[i * k + kk];
                        if av == T::zero() {
                            continue;
                        }
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            drow[j] += av * grow[j];
                        }
                    }
                }
                if sign != T::one() {
                    db.iter_mut().for_each(|v| *v = *v * sign);
                }
                accumulate(grads, *a, ta.shape(), da);
                accumulate(grads, *b, tb.shape(), db);
            }
            Op::AddRow(a, bias) => {
                let tb = self.value(*bias);
                let n = tb.len();
                let mut db = vec![T::zero(); n];
                for row in gd.chunks(n.max(1)) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += *v;
                    }
                }
                accumulate(grads, *a, g.shape(), gd.iter().map(|v| *v * sign).collect());
                accumulate(grads, *bias, tb.shape(), db.into_iter().map(|v| v * sign).collect());
            }
            Op::Add(a, b) => {
                let d: Vec<T> = gd.iter().map(|v| *v * sign).collect();
                accumulate(grads, *a, g.shape(), d.clone());
                accumulate(grads, *b, g.shape(), d);
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, g.shape(), gd.iter().map(|v| *v * *s * sign).collect());
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| {
                        let local = if *xv > T::zero() { T::one() } else { *slope };
                        *gv * local * sign
                    })
                    .collect();
                accumulate(grads, *a, g.shape(), d);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| if *xv > T::zero() { *gv * sign } else { T::zero() })
                    .collect();
                accumulate(grads, *a, g.shape(), d);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, ta.shape(), vec![gd[0] * sign; ta.len()]);
            }
            Op::Reshape(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, ta.shape(), gd.iter().map(|v| *v * sign).collect());
            }
            Op::L1 {
                pred,
                target,
                valid,
                count,
            } => {
                let tp = self.value(*pred);
                let scale = gd[0] * sign / T::of(*count as f64);
                let d = tp
                    .data()
                    .iter()
                    .zip(target.iter())
                    .zip(valid.iter())
                    .map(|((p, t), &m)| {
                        if !m {
                            return T::zero();
                        }
                        let diff = *p - *t;
                        if diff > T::zero() {
                            scale
                        } else if diff < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *pred, tp.shape(), d);
            }
            Op::Contract {
                features,
                weights,
                plan,
                mode,
            } => {
                let (tf, tw) = (self.value(*features), self.value(*weights));
                let (df, dw) = contract_backward(tf.data(), tw.data(), tf.cols(), plan, *mode, gd);
                let df = df.into_iter().map(|v| v * sign).collect();
                let dw = dw.into_iter().map(|v| v * sign).collect();
                accumulate(grads, *features, tf.shape(), df);
                accumulate(grads, *weights, tw.shape(), dw);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], delta: Vec<T>) {
    let delta = Tensor {
        shape: shape.to_vec(),
        data: delta,
    };
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn contract_forward<T: Real>(f: &[T], w: &[T], c: usize, plan: &PairPlan, mode: Contraction) -> Vec<T> {
    match mode {
        Contraction::PerChannel => {
            let mut out = vec![T::zero(); plan.n_out * c];
            for j in 0..plan.n_out {
                let orow = &mut out[j * c..(j + 1) * c];
                for (i, e, m) in plan.row(j) {
                    let m = if m { T::one() } else { T::zero() };
                    let frow = &f[i * c..(i + 1) * c];
                    let wrow = &w[e * c..(e + 1) * c];
                    for ch in 0..c {
                        orow[ch] += frow[ch] * wrow[ch] * m;
                    }
                }
            }
            out
        }
        Contraction::Scalar => {
            let mut out = vec![T::zero(); plan.n_out * c];
            for j in 0..plan.n_out {
                let orow = &mut out[j * c..(j + 1) * c];
                for (i, e, m) in plan.row(j) {
                    let m = if m { T::one() } else { T::zero() };
                    let frow = &f[i * c..(i + 1) * c];
                    let wv = w[e];
                    for ch in 0..c {
                        orow[ch] += frow[ch] * wv * m;
                    }
                }
            }
            out
        }
        Contraction::Full { out_channels: k } => {
            let mut out = vec![T::zero(); plan.n_out * k];
            for j in 0..plan.n_out {
                let orow = &mut out[j * k..(j + 1) * k];
                for (i, e, m) in plan.row(j) {
                    let m = if m { T::one() } else { T::zero() };
                    let frow = &f[i * c..(i + 1) * c];
                    let wrow = &w[e * c * k..(e + 1) * c * k];
                    for ch in 0..c {
                        let fv = frow[ch];
                        let wk = &wrow[ch * k..(ch + 1) * k];
                        for kk in 0..k {
                            orow[kk] += fv * wk[kk] * m;
                        }
                    }
                }
            }
            out
        }
    }
}

fn contract_backward<T: Real>(
    f: &[T],
    w: &[T],
    c: usize,
    plan: &PairPlan,
    mode: Contraction,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut df = vec![T::zero(); f.len()];
    let mut dw = vec![T::zero(); w.len()];
    match mode {
        Contraction::PerChannel => {
            for j in 0..plan.n_out {
                let grow = &g[j * c..(j + 1) * c];
                for (i, e, m) in plan.row(j) {
                    if !m {
                        continue;
                    }
                    for ch in 0..c {
                        df[i * c + ch] += grow[ch] * w[e * c + ch];
                        dw[e * c + ch] += grow[ch] * f[i * c + ch];
                    }
                }
            }
        }
        Contraction::Scalar => {
            for j in 0..plan.n_out {
                let grow = &g[j * c..(j + 1) * c];
                for (i, e, m) in plan.row(j) {
                    if !m {
                        continue;
                    }
                    let wv = w[e];
                    let mut s = T::zero();
                    for ch in 0..c {
                        df[i * c + ch] += grow[ch] * wv;
                        s += grow[ch] * f[i * c + ch];
                    }
                    dw[e] += s;
                }
            }
        }
        Contraction::Full { out_channels: k } => {
            for j in 0..plan.n_out {
                let grow = &g[j * k..(j + 1) * k];
                for (i, e, m) in plan.row(j) {
                    if !m {
                        continue;
                    }
                    for ch in 0..c {
                        let base = e * c * k + ch * k;
                        let fv = f[i * c + ch];
                        let mut s = T::zero();
                        for kk in 0..k {
                            s += grow[kk] * w[base + kk];
                            dw[base + kk] += grow[kk] * fv;
                        }
                        df[i * c + ch] += s;
                    }
                }
            }
        }
    }
    (df, dw)
}

/// Result of one reverse pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to any recorded value; `None` when
    /// the value does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds `scale ×` every parameter gradient into `store`.
    pub fn accumulate(&self, store: &mut ParamStore<T>, scale: T) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(id);
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += *src * scale;
                }
            }
        }
    }

    /// Parameter gradients keyed by id (unreached parameters are omitted).
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
