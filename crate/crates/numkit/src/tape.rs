//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and enough
//! information to push gradients back to its inputs. Nodes are never
//! mutated after creation, so a tape is a topologically ordered DAG and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    L2NormalizeRows(usize),
    MaxPool { input: usize, argmax: Vec<usize> },
    Gather { input: usize, index: Vec<usize> },
    WeightedGather {
        input: usize,
        k: usize,
        index: Vec<usize>,
        weights: Vec<T>,
    },
    ConcatCols(usize, usize),
    Reshape(usize),
    Sum(usize),
    WeightedSse {
        input: usize,
        target: Tensor<T>,
        weights: Option<Vec<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Denominator guard of [`Tape::l2_normalize_rows`].
pub const NORMALIZE_EPS: f64 = 1e-8;

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Untracked constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked copy of a trainable tensor.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.nodes[a.0].value.data(),
            k as isize,
            1,
            self.nodes[b.0].value.data(),
            n as isize,
            1,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::MatMul(a.0, b.0), tracked))
    }

    /// Adds a length-`n` bias row to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = self.nodes[x.0].value.cols();
        if sx.len() != 2 || self.nodes[bias.0].value.len() != n {
            return Err(NumError::shape("add_bias", sx, sb));
        }
        let mut out = self.nodes[x.0].value.clone();
        let b = self.nodes[bias.0].value.data();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o = *o + *bj;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(out, Op::AddBias(x.0, bias.0), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.nodes[a.0].value.clone();
        out.add_assign(&self.nodes[b.0].value)
            .map_err(|_| NumError::shape("add", self.shape(a), self.shape(b)))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a.0, b.0), tracked))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let src = &self.nodes[x.0].value;
        let out = Tensor::from_vec(
            src.shape().to_vec(),
            src.data().iter().map(|v| *v * c).collect(),
        )
        .expect("same shape");
        let tracked = self.tracked(x);
        self.push(out, Op::Scale(x.0, c), tracked)
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.nodes[x.0].value;
        let out = Tensor::from_vec(src.shape().to_vec(), src.data().iter().map(|v| f(*v)).collect())
            .expect("same shape");
        let tracked = self.tracked(x);
        self.push(out, op, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x.0))
    }

    /// Divides each row by its Euclidean norm plus [`NORMALIZE_EPS`].
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if src.shape().len() != 2 || src.cols() == 0 {
            return Err(NumError::shape("l2_normalize_rows", src.shape(), &[0, 3]));
        }
        let eps = T::from_f64_lossy(NORMALIZE_EPS);
        let c = src.cols();
        let mut out = src.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let s = norm + eps;
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::L2NormalizeRows(x.0), tracked))
    }

    /// Max over consecutive groups of `group` rows: `[g * group, c] -> [g, c]`.
    ///
    /// With `group == rows` this is the global pool over the point axis.
    pub fn max_pool_over_set(&mut self, x: Var, group: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let (rows, c) = (src.rows(), src.cols());
        if src.shape().len() != 2 || group == 0 || rows % group != 0 {
            return Err(NumError::shape("max_pool_over_set", src.shape(), &[group]));
        }
        let g = rows / group;
        let data = src.data();
        let mut out = Vec::with_capacity(g * c);
        let mut argmax = Vec::with_capacity(g * c);
        for gi in 0..g {
            let base = gi * group;
            let mut best: Vec<T> = data[base * c..(base + 1) * c].to_vec();
            let mut arg = vec![base; c];
            for r in base + 1..base + group {
                let row = &data[r * c..(r + 1) * c];
                for j in 0..c {
                    if row[j] > best[j] {
                        best[j] = row[j];
                        arg[j] = r;
                    }
                }
            }
            out.extend(best);
            argmax.extend(arg);
        }
        let out = Tensor::from_vec(vec![g, c], out)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::MaxPool { input: x.0, argmax }, tracked))
    }

    /// Row gather: output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let (rows, c) = (src.rows(), src.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(NumError::contract(
                "gather_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let data = src.data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(&data[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_vec(vec![index.len(), c], out)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Gather { input: x.0, index }, tracked))
    }

    /// Output row `r` is `sum_t weights[r*k+t] * x[index[r*k+t]]`.
    pub fn weighted_gather(
        &mut self,
        x: Var,
        k: usize,
        index: Vec<usize>,
        weights: Vec<T>,
    ) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let (rows, c) = (src.rows(), src.cols());
        if k == 0 || index.len() != weights.len() || !index.len().is_multiple_of(k) {
            return Err(NumError::shape(
                "weighted_gather",
                &[index.len()],
                &[weights.len(), k],
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(NumError::contract(
                "weighted_gather",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let out_rows = index.len() / k;
        let data = src.data();
        let mut out = vec![T::zero(); out_rows * c];
        for (r, orow) in out.chunks_exact_mut(c).enumerate() {
            for t in 0..k {
                let (i, w) = (index[r * k + t], weights[r * k + t]);
                for (o, v) in orow.iter_mut().zip(&data[i * c..(i + 1) * c]) {
                    *o = *o + w * *v;
                }
            }
        }
        let out = Tensor::from_vec(vec![out_rows, c], out)?;
        let tracked = self.tracked(x);
        Ok(self.push(
            out,
            Op::WeightedGather {
                input: x.0,
                k,
                index,
                weights,
            },
            tracked,
        ))
    }

    /// `[m, a] ++ [m, b] -> [m, a + b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(NumError::shape("concat_cols", ta.shape(), tb.shape()));
        }
        let (m, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let out = Tensor::from_vec(vec![m, ca + cb], out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::ConcatCols(a.0, b.0), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Reshape(x.0), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.data().iter().copied().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x.0), tracked)
    }

    /// `sum_e w_e (x_e - target_e)^2`; all weights 1 when `weights` is `None`.
    pub fn weighted_sse(
        &mut self,
        x: Var,
        target: Tensor<T>,
        weights: Option<Vec<T>>,
    ) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if src.len() != target.len() {
            return Err(NumError::shape("weighted_sse", src.shape(), target.shape()));
        }
        if let Some(w) = &weights {
            if w.len() != src.len() {
                return Err(NumError::shape("weighted_sse", src.shape(), &[w.len()]));
            }
        }
        let mut s = T::zero();
        for (e, (a, t)) in src.data().iter().zip(target.data()).enumerate() {
            let d = *a - *t;
            let w = weights.as_ref().map_or(T::one(), |w| w[e]);
            s = s + w * d * d;
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSse {
                input: x.0,
                target,
                weights,
            },
            tracked,
        ))
    }

    /// Mean squared error over all elements against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        let n = target.len().max(1);
        let sse = self.weighted_sse(x, target, None)?;
        Ok(self.scale(sse, T::one() / T::from_usize(n).expect("count")))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(NumError::contract("backward", "empty tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumError::contract(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, tape_ops: self.param_ops() })
    }

    fn param_ops(&self) -> Vec<(usize, ParamId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((i, p)),
                _ => None,
            })
            .collect()
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].tracked;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    let ga = slot(grads, *a, ta.shape());
                    // dA += dC . B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        tb.data(),
                        1,
                        n as isize,
                        T::one(),
                        ga.data_mut(),
                        k as isize,
                        1,
                    );
                }
                if wants(*b) {
                    let gb = slot(grads, *b, tb.shape());
                    // dB += A^T . dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        ta.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::one(),
                        gb.data_mut(),
                        n as isize,
                        1,
                    );
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    slot(grads, *x, val(*x).shape()).add_assign(g)?;
                }
                if wants(*b) {
                    let n = g.cols();
                    let gb = slot(grads, *b, val(*b).shape());
                    for row in g.data().chunks_exact(n) {
                        for (o, v) in gb.data_mut().iter_mut().zip(row) {
                            *o = *o + *v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for i in [*a, *b] {
                    if wants(i) {
                        slot(grads, i, val(i).shape()).add_assign(g)?;
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    let gx = slot(grads, *x, val(*x).shape());
                    for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o = *o + *v * *c;
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let gx = slot(grads, *x, val(*x).shape());
                    for ((o, gv), yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y) {
                        if *yv > T::zero() {
                            *o = *o + *gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let gx = slot(grads, *x, val(*x).shape());
                    for ((o, gv), yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y) {
                        *o = *o + *gv * *yv * (T::one() - *yv);
                    }
                }
            }
            Op::L2NormalizeRows(x) => {
                if wants(*x) {
                    let tx = val(*x);
                    let c = tx.cols();
                    let eps = T::from_f64_lossy(NORMALIZE_EPS);
                    let gx = slot(grads, *x, tx.shape());
                    for ((orow, xrow), grow) in gx
                        .data_mut()
                        .chunks_exact_mut(c)
                        .zip(tx.data().chunks_exact(c))
                        .zip(g.data().chunks_exact(c))
                    {
                        let norm = xrow.iter().map(|v| *v * *v).sum::<T>().sqrt();
                        let s = norm + eps;
                        // d(x/s)/dx = I/s - x x^T / (|x| s^2)
                        let dot: T = xrow.iter().zip(grow).map(|(a, b)| *a * *b).sum();
                        let coef = if norm > T::zero() {
                            dot / (norm * s * s)
                        } else {
                            T::zero()
                        };
                        for ((o, xv), gv) in orow.iter_mut().zip(xrow).zip(grow) {
                            *o = *o + *gv / s - *xv * coef;
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if wants(*input) {
                    let c = g.cols();
                    let gx = slot(grads, *input, val(*input).shape());
                    let gd = gx.data_mut();
                    for (e, (&r, gv)) in argmax.iter().zip(g.data()).enumerate() {
                        let j = e % c;
                        gd[r * c + j] = gd[r * c + j] + *gv;
                    }
                }
            }
            Op::Gather { input, index } => {
                if wants(*input) {
                    let c = g.cols();
                    let gx = slot(grads, *input, val(*input).shape());
                    let gd = gx.data_mut();
                    for (r, &i) in index.iter().enumerate() {
                        let src = &g.data()[r * c..(r + 1) * c];
                        for (o, v) in gd[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *o = *o + *v;
                        }
                    }
                }
            }
            Op::WeightedGather {
                input,
                k,
                index,
                weights,
            } => {
                if wants(*input) {
                    let c = g.cols();
                    let gx = slot(grads, *input, val(*input).shape());
                    let gd = gx.data_mut();
                    for (e, (&i, &w)) in index.iter().zip(weights).enumerate() {
                        let r = e / k;
                        let src = &g.data()[r * c..(r + 1) * c];
                        for (o, v) in gd[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *o = *o + w * *v;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).cols(), val(*b).cols());
                if wants(*a) {
                    let ga = slot(grads, *a, val(*a).shape());
                    for (orow, grow) in ga
                        .data_mut()
                        .chunks_exact_mut(ca)
                        .zip(g.data().chunks_exact(ca + cb))
                    {
                        for (o, v) in orow.iter_mut().zip(&grow[..ca]) {
                            *o = *o + *v;
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, val(*b).shape());
                    for (orow, grow) in gb
                        .data_mut()
                        .chunks_exact_mut(cb)
                        .zip(g.data().chunks_exact(ca + cb))
                    {
                        for (o, v) in orow.iter_mut().zip(&grow[ca..]) {
                            *o = *o + *v;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    let gx = slot(grads, *x, val(*x).shape());
                    for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o = *o + *v;
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let gv = g.data()[0];
                    let gx = slot(grads, *x, val(*x).shape());
                    for o in gx.data_mut() {
                        *o = *o + gv;
                    }
                }
            }
            Op::WeightedSse {
                input,
                target,
                weights,
            } => {
                if wants(*input) {
                    let gv = g.data()[0];
                    let two = T::one() + T::one();
                    let tx = val(*input);
                    let gx = slot(grads, *input, tx.shape());
                    for (e, ((o, a), t)) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(tx.data())
                        .zip(target.data())
                        .enumerate()
                    {
                        let w = weights.as_ref().map_or(T::one(), |w| w[e]);
                        *o = *o + gv * two * w * (*a - *t);
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    i: usize,
    shape: &[usize],
) -> &'a mut Tensor<T> {
    grads[i].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    tape_ops: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a node, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// One gradient per parameter in store order, summed over every use on
    /// the tape and zero for parameters the loss does not touch.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        for &(node, pid) in &self.tape_ops {
            if let Some(g) = &self.grads[node] {
                out[pid.0]
                    .add_assign(g)
                    .expect("parameter gradient shape matches parameter");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[0.0]));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[3.0, 4.0, 0.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        let d = tape.value(y).data();
        assert!(close(d[0], 0.6, 1e-8) && close(d[1], 0.8, 1e-8) && d[2] == 0.0);
    }

    #[test]
    fn normalize_zero_row_stays_zero() {
        let mut params = ParamStore::new();
        let p = params.add("p", t(&[1, 3], &[0.0, 0.0, 0.0]));
        let mut tape = Tape::new();
        let x = tape.param(&params, p);
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().param_grads(&params);
        assert!(g[0].all_finite());
    }

    #[test]
    fn max_pool_single_point_is_identity() {
        let mut params = ParamStore::new();
        let p = params.add("p", t(&[1, 4], &[1.0, -2.0, 3.0, 0.5]));
        let mut tape = Tape::new();
        let x = tape.param(&params, p);
        let y = tape.max_pool_over_set(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0, 0.5]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().param_grads(&params);
        assert_eq!(g[0].data(), &[1.0; 4]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut params = ParamStore::new();
        let p = params.add("p", t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut tape = Tape::new();
        let x = tape.param(&params, p);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap().param_grads(&params);
        assert_eq!(g[0].data(), &[1.0; 6]);
    }

    #[test]
    fn mse_gradient_mean_convention() {
        let mut params = ParamStore::new();
        let p = params.add("p", t(&[1], &[2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&params, p);
        let l = tape.mse(x, Tensor::zeros(&[1])).unwrap();
        assert_eq!(tape.value(l).data(), &[4.0]);
        let g = tape.backward(l).unwrap().param_grads(&params);
        assert_eq!(g[0].data(), &[4.0]);

        let mut params = ParamStore::new();
        let p = params.add("p", t(&[2], &[2.0, 2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&params, p);
        let l = tape.mse(x, Tensor::zeros(&[2])).unwrap();
        let g = tape.backward(l).unwrap().param_grads(&params);
        assert_eq!(g[0].data(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let tape = Tape::<f64>::new();
        assert!(tape.backward(Var(0)).is_err());
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 2]));
        assert!(matches!(
            tape.backward(a),
            Err(NumError::Contract { op: "backward", .. })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut params = ParamStore::new();
        let p = params.add("w", t(&[2, 1], &[1.0, -1.0]));
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let w = tape.param(&params, p);
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.param_grads(&params)[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn param_used_twice_accumulates() {
        let mut params = ParamStore::new();
        let p = params.add("p", t(&[1], &[3.0]));
        let mut tape = Tape::new();
        let a = tape.param(&params, p);
        let b = tape.param(&params, p);
        let s = tape.add(a, b).unwrap();
        let g = tape.backward(s).unwrap().param_grads(&params);
        assert_eq!(g[0].data(), &[2.0]);
    }
}
