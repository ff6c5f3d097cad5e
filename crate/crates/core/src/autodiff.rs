//! Tape-based reverse-mode differentiation over row-major 2-D `f64` tensors.
//!
//! Every value is a matrix. Sequences are stored as consecutive rows, so a
//! batch of `S` sequences of length `T` with width `d` is an `[S * T, d]`
//! tensor; the attention op takes the sequence count as an argument.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor {rows}x{cols} with {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors. The `tag` distinguishes stores that share a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    tag: u32,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(tag: u32) -> Self {
        Self {
            tag,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn add(&mut self, name: String, value: Tensor) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Truncated-normal (two standard deviations) initialised matrix.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: String,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..rows * cols)
            .map(|_| loop {
                let z: f64 = normal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        self.add(name, Tensor::new(rows, cols, data))
    }

    pub fn add_const(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor::new(rows, cols, vec![v; rows * cols]))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Overwrites the value of an existing parameter, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let Some(id) = self.find(name) else {
            bail!(Argument, "unknown parameter {name}");
        };
        let cur = &self.values[id.0];
        if (cur.rows, cur.cols) != (value.rows, value.cols) {
            bail!(
                Shape,
                "parameter {name} is {}x{}, got {}x{}",
                cur.rows,
                cur.cols,
                value.rows,
                value.cols
            );
        }
        self.values[id.0] = value;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seqs: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    GroupMean(Var, usize),
    GroupCumsum(Var, usize),
    LogSigmoid(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable: Vec<u32>,
    params: BTreeMap<(u32, usize), Var>,
}

const LN_EPS: f64 = 1e-5;

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm_strided(m, k, n, 1.0, a, a_strides, b, b_strides, beta, c, (n as isize, 1));
}

fn span(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize + 1
}

/// `c = alpha * a b + beta * c` on strided views with non-negative strides.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= span(m, n, c_strides), "gemm output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[i * c_strides.0 as usize + j * c_strides.1 as usize];
                *x *= beta;
            }
        }
        return;
    }
    assert!(a.len() >= span(m, k, a_strides) && b.len() >= span(k, n, b_strides), "gemm input view out of bounds");
    // SAFETY: the asserts above bound every index reachable through the
    // shapes and strides, and `c` is a unique borrow distinct from `a`, `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(inner);
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - libm::log1p(libm::exp(-x.abs()))
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// Adds `src` into the gradient of `v`, copying when it is the first term.
fn acc_add(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, src: &[f64]) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match grads[v.0].as_mut() {
        Some(dst) => dst.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => grads[v.0] = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph in which parameters of stores tagged `tags` receive gradients.
    pub fn training(tags: &[u32]) -> Self {
        Self {
            trainable: tags.to_vec(),
            ..Self::default()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is retained by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter, reusing the node if it was bound before.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let trainable = self.trainable.contains(&store.tag());
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul {}x{} by {}x{}", av.rows, av.cols, bv.rows, bv.cols);
        let (m, k, n) = (av.rows, av.cols, bv.cols);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &av.data, (k as isize, 1), &bv.data, (n as isize, 1), &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(m, n, out), Op::MatMul(a, b), ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x + row`, broadcasting a `[1, c]` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!((rv.rows, rv.cols), (1, xv.cols), "row broadcast shape");
        let mut data = xv.data.clone();
        for r in data.chunks_exact_mut(xv.cols) {
            r.iter_mut().zip(&rv.data).for_each(|(a, b)| *a += b);
        }
        let t = Tensor::new(xv.rows, xv.cols, data);
        let ng = self.ng(x) || self.ng(row);
        self.push(t, Op::AddRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.rows, xv.cols, xv.data.iter().map(|v| v * s).collect());
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.rows, xv.cols, xv.data.iter().map(|&v| gelu(v).0).collect());
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.rows, xv.cols, xv.data.iter().map(|&v| sigmoid(v)).collect());
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.rows, xv.cols, xv.data.iter().map(|&v| log_sigmoid(v)).collect());
        let ng = self.ng(x);
        self.push(t, Op::LogSigmoid(x), ng)
    }

    /// Row-wise layer normalisation with affine `[1, c]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols;
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; xv.rows];
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let t = Tensor::new(xv.rows, c, out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over `seqs` independent
    /// sequences. `q` holds `seqs * tq` rows, `k` and `v` hold `seqs * tk`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seqs: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        if kv.cols != d || vv.cols != d || kv.rows != vv.rows {
            bail!(Shape, "attention q/k/v widths {}/{}/{}", d, kv.cols, vv.cols);
        }
        if seqs == 0 || qv.rows % seqs != 0 || kv.rows % seqs != 0 || heads == 0 || d % heads != 0
        {
            bail!(
                Shape,
                "attention over {seqs} sequences with {} query rows, {} key rows, {heads} heads, width {d}",
                qv.rows,
                kv.rows
            );
        }
        let (tq, tk, dh) = (qv.rows / seqs, kv.rows / seqs, d / heads);
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut probs = vec![0.0; seqs * heads * tq * tk];
        let mut out = vec![0.0; qv.len()];
        let di = d as isize;
        for s in 0..seqs {
            for h in 0..heads {
                let (qo, ko) = ((s * tq) * d + h * dh, (s * tk) * d + h * dh);
                let p = &mut probs[(s * heads + h) * tq * tk..][..tq * tk];
                gemm_strided(tq, dh, tk, scale, &qv.data[qo..], (di, 1), &kv.data[ko..], (1, di), 0.0, p, (tk as isize, 1));
                for row in p.chunks_exact_mut(tk) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = libm::exp(*x - max);
                        z += *x;
                    }
                    let inv = 1.0 / z;
                    row.iter_mut().for_each(|x| *x *= inv);
                }
                gemm_strided(tq, tk, dh, 1.0, p, (tk as isize, 1), &vv.data[ko..], (di, 1), 0.0, &mut out[qo..], (di, 1));
            }
        }
        let t = Tensor::new(qv.rows, d, out);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                seqs,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Rows of `x` selected (with repetition) by `idx`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let c = xv.cols;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < xv.rows, "gather row {i} of {}", xv.rows);
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(idx.len(), c, data);
        let ng = self.ng(x);
        self.push(t, Op::Gather(x, idx), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, c, "concat_rows width mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
            ng |= self.ng(p);
        }
        self.push(Tensor::new(rows, c, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Mean of each consecutive block of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        assert!(group > 0 && xv.rows % group == 0, "group_mean of {} rows by {group}", xv.rows);
        let c = xv.cols;
        let n = xv.rows / group;
        let mut data = vec![0.0; n * c];
        for g in 0..n {
            let o = &mut data[g * c..(g + 1) * c];
            for r in 0..group {
                o.iter_mut().zip(xv.row(g * group + r)).for_each(|(a, b)| *a += b);
            }
            o.iter_mut().for_each(|a| *a /= group as f64);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(n, c, data), Op::GroupMean(x, group), ng)
    }

    /// Running sum over rows inside each consecutive block of `group` rows.
    pub fn group_cumsum(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        assert!(group > 0 && xv.rows % group == 0, "group_cumsum of {} rows by {group}", xv.rows);
        let c = xv.cols;
        let mut data = xv.data.clone();
        for g in 0..xv.rows / group {
            for r in 1..group {
                let (prev, cur) = data.split_at_mut((g * group + r) * c);
                let prev = &prev[(g * group + r - 1) * c..];
                cur[..c].iter_mut().zip(prev).for_each(|(a, b)| *a += b);
            }
        }
        let t = Tensor::new(xv.rows, c, data);
        let ng = self.ng(x);
        self.push(t, Op::GroupCumsum(x, group), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data.iter().sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// `x @ w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Gradients {
                grads,
                params: self.params.iter().map(|(k, v)| (*k, *v)).collect(),
            };
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients {
            grads,
            params: self.params.iter().map(|(k, v)| (*k, *v)).collect(),
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                if let Some(ga) = acc(nodes, grads, *a) {
                    // dA = dC B^T
                    gemm(m, n, k, g, (n as isize, 1), &bv.data, (1, n as isize), ga, true);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    // dB = A^T dC
                    gemm(k, m, n, &av.data, (1, k as isize), g, (n as isize, 1), gb, true);
                }
            }
            Op::Add(a, b) => {
                acc_add(nodes, grads, *a, g);
                acc_add(nodes, grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc_add(nodes, grads, *a, g);
                if let Some(gb) = acc(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * z;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * z;
                    }
                }
            }
            Op::AddRow(x, row) => {
                let c = nodes[x.0].value.cols;
                acc_add(nodes, grads, *x, g);
                if let Some(gr) = acc(nodes, grads, *row) {
                    for r in g.chunks_exact(c) {
                        gr.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value.data;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += b * gelu(*v).1;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((a, b), s) in gx.iter_mut().zip(g).zip(y) {
                        *a += b * s * (1.0 - s);
                    }
                }
            }
            Op::LogSigmoid(x) => {
                let xv = &nodes[x.0].value.data;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += b * sigmoid(-v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols;
                let rows = node.value.rows;
                let gam = &nodes[gamma.0].value.data;
                if let Some(gg) = acc(nodes, grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *beta) {
                    for r in g.chunks_exact(c) {
                        gb.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = acc(nodes, grads, *x) {
                    let cf = c as f64;
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            gx[r * c + j] += rstd[r] * (dh - s1 / cf - hr[j] * s2 / cf);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seqs,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let (seqs, heads) = (*seqs, *heads);
                let d = qv.cols;
                let (tq, tk, dh) = (qv.rows / seqs, kv.rows / seqs, d / heads);
                let scale = 1.0 / libm::sqrt(dh as f64);
                let di = d as isize;
                let tki = tk as isize;
                let mut ds = vec![0.0; tq * tk];
                let vars = [*q, *k, *v];
                let mut bufs: [Option<Vec<f64>>; 3] = [None, None, None];
                for (i, var) in vars.iter().enumerate() {
                    if vars[..i].contains(var) {
                        bufs[i] = nodes[var.0].needs_grad.then(|| vec![0.0; nodes[var.0].value.len()]);
                    } else {
                        bufs[i] = acc(nodes, grads, *var).map(core::mem::take);
                    }
                }
                let [mut gq, mut gk, mut gv] = bufs;
                for s in 0..seqs {
                    for h in 0..heads {
                        let (qo, ko) = ((s * tq) * d + h * dh, (s * tk) * d + h * dh);
                        let p = &probs[(s * heads + h) * tq * tk..][..tq * tk];
                        if let Some(gv) = gv.as_mut() {
                            gemm_strided(tk, tq, dh, 1.0, p, (1, tki), &g[qo..], (di, 1), 1.0, &mut gv[ko..], (di, 1));
                        }
                        if gq.is_none() && gk.is_none() {
                            continue;
                        }
                        gemm_strided(tq, dh, tk, 1.0, &g[qo..], (di, 1), &vv.data[ko..], (1, di), 0.0, &mut ds, (tki, 1));
                        for (dr, pr) in ds.chunks_exact_mut(tk).zip(p.chunks_exact(tk)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            dr.iter_mut().zip(pr).for_each(|(a, b)| *a = b * (*a - dot) * scale);
                        }
                        if let Some(gq) = gq.as_mut() {
                            gemm_strided(tq, tk, dh, 1.0, &ds, (tki, 1), &kv.data[ko..], (di, 1), 1.0, &mut gq[qo..], (di, 1));
                        }
                        if let Some(gk) = gk.as_mut() {
                            gemm_strided(tk, tq, dh, 1.0, &ds, (1, tki), &qv.data[qo..], (di, 1), 1.0, &mut gk[ko..], (di, 1));
                        }
                    }
                }
                for (i, local) in [gq, gk, gv].into_iter().enumerate() {
                    let Some(local) = local else { continue };
                    match grads[vars[i].0].as_mut() {
                        Some(dst) if vars[..i].contains(&vars[i]) => {
                            dst.iter_mut().zip(&local).for_each(|(a, b)| *a += b)
                        }
                        _ => grads[vars[i].0] = Some(local),
                    }
                }
            }
            Op::Gather(x, idx) => {
                let c = node.value.cols;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * c..(r + 1) * c];
                        gx[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc_add(nodes, grads, *p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::GroupMean(x, group) => {
                let c = node.value.cols;
                let inv = 1.0 / *group as f64;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (r, dst) in gx.chunks_exact_mut(c).enumerate() {
                        let src = &g[(r / group) * c..][..c];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b * inv);
                    }
                }
            }
            Op::GroupCumsum(x, group) => {
                let c = node.value.cols;
                let group = *group;
                if let Some(gx) = acc(nodes, grads, *x) {
                    // reverse running sum of the upstream gradient
                    for gi in 0..node.value.rows / group {
                        let mut run = vec![0.0; c];
                        for r in (0..group).rev() {
                            let row = gi * group + r;
                            run.iter_mut().zip(&g[row * c..(row + 1) * c]).for_each(|(a, b)| *a += b);
                            gx[row * c..(row + 1) * c]
                                .iter_mut()
                                .zip(&run)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                let len = nodes[x.0].value.len() as f64;
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0] / len);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<((u32, usize), Var)>,
}

impl Gradients {
    /// Gradient of a leaf, if it was reached.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients for every parameter of `store`; unreached parameters get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).rows, store.get(id).cols))
            .collect();
        for ((tag, idx), var) in &self.params {
            if *tag == store.tag() {
                if let Some(g) = &self.grads[var.0] {
                    out[*idx].data.copy_from_slice(g);
                }
            }
        }
        out
    }

    /// Whether parameter `id` of `store` received any gradient.
    pub fn reached(&self, store: &ParamStore, id: ParamId) -> bool {
        self.params
            .iter()
            .any(|((tag, idx), var)| *tag == store.tag() && *idx == id.0 && self.grads[var.0].is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d loss / d input against central differences for every input entry.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let l = build(&mut g, &vars);
            g.scalar(l)
        };
        let h = 1e-5;
        for (n, t) in inputs.iter().enumerate() {
            let analytic = grads.of(vars[n]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[n].data[i] += h;
                let mut minus = inputs.clone();
                minus[n].data[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-8);
                assert!(
                    err < 1e-6 || (fd - analytic[i]).abs() < 1e-9,
                    "input {n} entry {i}: fd {fd} vs analytic {}",
                    analytic[i]
                );
            }
        }
    }

    /// Fixed random projection to a scalar so every output entry matters.
    fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
        let t = g.value(x).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, t.rows, t.cols);
        let w = g.constant(w);
        let y = g.mul(x, w);
        g.sum(y)
    }

    #[test]
    fn matmul_and_affine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = vec![rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 4, 5), rand_tensor(&mut rng, 1, 5)];
        check(ins, |g, v| {
            let y = g.affine(v[0], v[1], v[2]);
            probe(g, y, 7)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![rand_tensor(&mut rng, 2, 3), rand_tensor(&mut rng, 2, 3)];
        check(ins, |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.sub(a, v[1]);
            let c = g.gelu(b);
            let d = g.scale(c, 1.7);
            let e = g.log_sigmoid(d);
            let f = g.sigmoid(v[0]);
            let h = g.add(e, f);
            probe(g, h, 3)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![rand_tensor(&mut rng, 4, 6), rand_tensor(&mut rng, 1, 6), rand_tensor(&mut rng, 1, 6)];
        check(ins, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            probe(g, y, 4)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = vec![rand_tensor(&mut rng, 6, 4), rand_tensor(&mut rng, 8, 4), rand_tensor(&mut rng, 8, 4)];
        check(ins, |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2, 2).unwrap();
            probe(g, y, 5)
        });
        let ins = vec![rand_tensor(&mut rng, 6, 4)];
        check(ins, |g, v| {
            let y = g.attention(v[0], v[0], v[0], 3, 2).unwrap();
            probe(g, y, 6)
        });
    }

    #[test]
    fn row_shuffling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ins = vec![rand_tensor(&mut rng, 4, 3), rand_tensor(&mut rng, 2, 3)];
        check(ins, |g, v| {
            let c = g.concat_rows(&[v[0], v[1]]);
            let s = g.gather(c, vec![5, 0, 0, 3, 2, 4]);
            let m = g.group_mean(s, 3);
            let cs = g.group_cumsum(s, 2);
            let a = probe(g, m, 6);
            let b = probe(g, cs, 8);
            let t = g.add(a, b);
            let mm = g.mse(v[1], v[1]);
            let t2 = g.add(t, mm);
            let mean = g.mean(v[0]);
            g.add(t2, mean)
        });
    }

    #[test]
    fn attention_rows_sum_to_one_and_average_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(1, 2));
        let k = g.constant(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let v = g.constant(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 6.0]));
        let o = g.attention(q, k, v, 1, 1).unwrap();
        assert_eq!(g.value(o).data, vec![2.0, 4.0]);
        assert!(g.attention(q, k, v, 1, 3).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + core::f64::consts::LN_2).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }

    #[test]
    fn params_are_bound_once_and_frozen_stores_get_no_grad() {
        let mut store = ParamStore::new(3);
        let w = store.add_const("w".into(), 1, 1, 2.0);
        let mut frozen = ParamStore::new(4);
        let u = frozen.add_const("u".into(), 1, 1, 5.0);
        let mut g = Graph::training(&[3]);
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let c = g.param(&frozen, u);
        let y = g.mul(a, c);
        let y = g.mul(y, b);
        let grads = g.backward(y);
        assert_eq!(grads.for_store(&store)[0].data, vec![20.0]);
        assert!(!grads.reached(&frozen, u));
        assert_eq!(grads.for_store(&frozen)[0].data, vec![0.0]);
    }
}
