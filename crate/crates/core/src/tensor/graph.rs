use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{bcast_plan, broadcast_shape, gemm, reduce_to};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{MsctError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean attention mask over the trailing `[query, key]` axes of a score
/// tensor; broadcast over any leading axes. `false` entries get probability 0.
#[derive(Clone, Debug)]
pub struct AttnMask {
    shape: Vec<usize>,
    allowed: Arc<[bool]>,
}

impl AttnMask {
    pub fn new(shape: Vec<usize>, allowed: Vec<bool>) -> Result<Self> {
        if shape.len() < 2 || shape.iter().product::<usize>() != allowed.len() {
            return Err(MsctError::shape("attn_mask", &shape, &[allowed.len()]));
        }
        let k = shape[shape.len() - 1];
        if allowed.chunks(k).any(|row| !row.iter().any(|&a| a)) {
            return Err(MsctError::Usage("attention mask has a fully masked row".into()));
        }
        Ok(AttnMask {
            shape,
            allowed: allowed.into(),
        })
    }

    /// Query `i` may attend to key `j` iff `j <= i`.
    pub fn causal(len: usize) -> Self {
        let allowed = (0..len)
            .flat_map(|i| (0..len).map(move |j| j <= i))
            .collect::<Vec<_>>();
        AttnMask {
            shape: vec![len, len],
            allowed: allowed.into(),
        }
    }

    /// Per batch row `b`, every query may attend to keys `0..=limits[b]`.
    pub fn key_limit(limits: &[usize], queries: usize, keys: usize) -> Result<Self> {
        let mut allowed = Vec::with_capacity(limits.len() * queries * keys);
        for &lim in limits {
            if lim >= keys {
                return Err(MsctError::Range(format!("key limit {lim} with {keys} keys")));
            }
            for _ in 0..queries {
                allowed.extend((0..keys).map(|j| j <= lim));
            }
        }
        Self::new(vec![limits.len(), queries, keys], allowed)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn allowed(&self, flat: usize) -> bool {
        self.allowed[flat % self.allowed.len()]
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    TransposeLast2(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    ClampMin(Var, f64),
    Softmax { input: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    GradScale(Var, f64),
    Gather { input: Var, rows: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. Nodes are appended in evaluation order,
/// so the node list is already topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(MsctError::Numerical { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input (gradient available after backward).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bring a stored parameter into the graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let pa = bcast_plan(&out_shape, &sa);
            let pb = bcast_plan(&out_shape, &sb);
            let n: usize = out_shape.iter().product();
            (0..n).map(|i| f(va[pa.src(i)], vb[pb.src(i)])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Tensor::from_parts(out_shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push("scale", v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push("add_scalar", v, Op::AddScalar(a), rg)
    }

    /// `[.., m, k] x [k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sa.is_empty() || sw.len() != 2 || sa[sa.len() - 1] != sw[0] {
            return Err(MsctError::shape("matmul", sa, sw));
        }
        let k = sw[0];
        let n = sw[1];
        let rows = self.value(a).len() / k;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, self.value(a).data(), false, self.value(w).data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(w);
        self.push("matmul", Tensor::from_parts(out_shape, out), Op::MatMul(a, w), rg)
    }

    /// Batched product over identical leading axes: `[.., m, k] x [.., k, n]`,
    /// or `[.., m, k] x [.., n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(MsctError::shape("bmm", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(MsctError::shape("bmm", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.push("bmm", Tensor::from_parts(shape, out), Op::BatchMatMul { a, b, trans_b }, rg)
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let r = s.len();
        if r < 2 {
            return Err(MsctError::shape("transpose", &s, &[]));
        }
        let (m, n) = (s[r - 2], s[r - 1]);
        let batch = self.value(a).len() / (m * n).max(1);
        let v = self.value(a).data();
        let mut out = vec![0.0; v.len()];
        for b in 0..batch {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = v[base + i * n + j];
                }
            }
        }
        let mut shape = s.clone();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(a);
        self.push("transpose", Tensor::from_parts(shape, out), Op::TransposeLast2(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", t, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| MsctError::Usage("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(MsctError::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(MsctError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(MsctError::shape("narrow", &s, &[axis, start, len]));
        }
        let (outer, d, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        self.push(
            "narrow",
            Tensor::from_parts(shape, out),
            Op::Narrow { input: a, axis, start },
            rg,
        )
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(name, v, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary("elu", a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Identity forward; multiplies the incoming gradient by `factor`.
    pub fn grad_scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a).clone();
        let rg = self.rg(a);
        self.push("grad_scale", v, Op::GradScale(a, factor), rg)
    }

    /// Softmax over the last axis. Masked entries are exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = *s.last().ok_or_else(|| MsctError::shape("softmax", &s, &[]))?;
        let src = self.value(a).data();
        if let Some(m) = mask {
            let ms = m.shape();
            if ms.len() > s.len() || s[s.len() - ms.len()..] != ms[..] {
                return Err(MsctError::shape("softmax_mask", &s, ms));
            }
        }
        let mut out = vec![0.0; src.len()];
        for (r, (row, o)) in src.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let base = r * n;
            let ok = |j: usize| mask.is_none_or(|m| m.allowed(base + j));
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > mx {
                    mx = v;
                }
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if ok(j) {
                    let e = (v - mx).exp();
                    o[j] = e;
                    z += e;
                }
            }
            for x in o.iter_mut() {
                *x /= z;
            }
        }
        let rg = self.rg(a);
        self.push(
            "softmax",
            Tensor::from_parts(s, out),
            Op::Softmax { input: a },
            rg,
        )
    }

    /// Normalize over the last axis (population variance, eps 1e-5), then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| MsctError::shape("layer_norm", &s, &[]))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(MsctError::shape("layer_norm", &s, self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = self.value(x).data();
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "layer_norm",
            Tensor::from_parts(s, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push("sum", v, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(MsctError::Usage("mean of empty tensor".into()));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push("mean", v, Op::MeanAll(a), rg)
    }

    /// Select rows of `a` viewed as `[rows, last]`; result is `[indices.len(), last]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let f = *s.last().ok_or_else(|| MsctError::shape("gather", &s, &[]))?;
        let total = self.value(a).len() / f.max(1);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            if r >= total {
                return Err(MsctError::Range(format!("gather row {r} of {total}")));
            }
            out.extend_from_slice(&src[r * f..(r + 1) * f]);
        }
        let rg = self.rg(a);
        self.push(
            "gather",
            Tensor::from_parts(vec![rows.len(), f], out),
            Op::Gather {
                input: a,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(MsctError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let tensors = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::from_parts(n.value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients {
            grads: tensors,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let oshape = node.value.shape();
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !self.rg(v) {
                        continue;
                    }
                    let plan = bcast_plan(oshape, self.shape(v));
                    let mut r = reduce_to(&plan, g, self.value(v).len());
                    if s != 1.0 {
                        r.iter_mut().for_each(|x| *x *= s);
                    }
                    acc(v, r);
                }
            }
            Op::Mul(a, b) => {
                let oshape = node.value.shape();
                let pa = bcast_plan(oshape, self.shape(*a));
                let pb = bcast_plan(oshape, self.shape(*b));
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    let prod: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * vb[pb.src(i)]).collect();
                    acc(*a, reduce_to(&pa, &prod, va.len()));
                }
                if self.rg(*b) {
                    let prod: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * va[pa.src(i)]).collect();
                    acc(*b, reduce_to(&pb, &prod, vb.len()));
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::GradScale(a, f) => acc(*a, g.iter().map(|x| x * f).collect()),
            Op::MatMul(a, w) => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let rows = g.len() / n;
                if self.rg(*a) {
                    let mut da = vec![0.0; rows * k];
                    gemm(rows, n, k, g, false, val(*w), true, &mut da, 0.0);
                    acc(*a, da);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, rows, n, val(*a), true, g, false, &mut dw, 0.0);
                    acc(*w, dw);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = node.value.shape()[r - 1];
                let batch = g.len() / (m * n).max(1);
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    let mut da = vec![0.0; va.len()];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        // trans_b: op(B) = B^T, so dA = dC * B; else dA = dC * B^T
                        gemm(m, n, k, gi, false, bi, !*trans_b, &mut da[i * m * k..(i + 1) * m * k], 0.0);
                    }
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; vb.len()];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, dbi, 0.0);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dbi, 0.0);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::TransposeLast2(a) => {
                let s = node.value.shape();
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let batch = g.len() / (m * n).max(1);
                let mut da = vec![0.0; g.len()];
                for b in 0..batch {
                    let base = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            da[base + j * m + i] = g[base + i * n + j];
                        }
                    }
                }
                acc(*a, da);
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let (outer, total, inner) = split_axis(s, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let d = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut part = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            part.extend_from_slice(&g[base..base + d * inner]);
                        }
                        acc(v, part);
                    }
                    offset += d;
                }
            }
            Op::Narrow { input, axis, start } => {
                let s = self.shape(*input);
                let (outer, d, inner) = split_axis(s, *axis);
                let len = node.value.shape()[*axis];
                let mut da = vec![0.0; outer * d * inner];
                for o in 0..outer {
                    let base = o * d * inner + start * inner;
                    da[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*input, da);
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect());
            }
            Op::Elu(a) => {
                let x = val(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { gi * xi.exp() })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => acc(*a, g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect()),
            Op::Tanh(a) => acc(*a, g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect()),
            Op::Exp(a) => acc(*a, g.iter().zip(out).map(|(gi, y)| gi * y).collect()),
            Op::Ln(a) => acc(*a, g.iter().zip(val(*a)).map(|(gi, x)| gi / x).collect()),
            Op::Square(a) => acc(*a, g.iter().zip(val(*a)).map(|(gi, x)| 2.0 * gi * x).collect()),
            Op::ClampMin(a, floor) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(gi, &x)| if x > *floor { *gi } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax { input } => {
                let n = *node.value.shape().last().unwrap();
                let mut da = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(da.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*input, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.shape(*gain)[0];
                let gv = val(*gain);
                if self.rg(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(*gain, dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            db[j] += gr[j];
                        }
                    }
                    acc(*bias, db);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (r, ((gr, hr), dr)) in g.chunks(n).zip(xhat.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            dr[j] = inv_std[r] / nf * (nf * dh - s1 - hr[j] * s2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Gather { input, rows } => {
                let f = *node.value.shape().last().unwrap();
                let mut da = vec![0.0; self.value(*input).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..f {
                        da[r * f + j] += g[i * f + j];
                    }
                }
                acc(*input, da);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, `None` if the parameter never entered the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Gradient of a parameter, zeros if untouched.
    pub fn param_or_zero(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run1(f: impl Fn(&mut Graph, Var) -> Result<Var>, x: Vec<f64>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_vec(x));
        let o = f(&mut g, v)?;
        Ok(g.value(o).data().to_vec())
    }

    #[test]
    fn catalog_examples() {
        assert_eq!(run1(|g, v| g.softmax(v, None), vec![0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(run1(|g, v| g.elu(v), vec![0.0]).unwrap(), vec![0.0]);
        assert_eq!(run1(|g, v| g.relu(v), vec![-1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let ln = |x: Vec<f64>, gain: f64, bias: f64| {
            let n = x.len();
            let mut g = Graph::new();
            let xv = g.constant(Tensor::from_vec(x));
            let gv = g.constant(Tensor::full(&[n], gain));
            let bv = g.constant(Tensor::full(&[n], bias));
            let o = g.layer_norm(xv, gv, bv).unwrap();
            g.value(o).data().to_vec()
        };
        assert_eq!(ln(vec![1.0, 1.0, 1.0], 1.0, 0.0), vec![0.0, 0.0, 0.0]);
        // (x - 2) / sqrt(1 + eps)
        let out = ln(vec![1.0, 3.0], 1.0, 0.0);
        let s = (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((out[0] + 1.0 / s).abs() < 1e-15 && (out[1] - 1.0 / s).abs() < 1e-15);
        assert!((out[0] + 1.0).abs() < 1e-5);
        assert_eq!(ln(vec![4.0, -2.0, 7.5], 0.0, 0.25), vec![0.25; 3]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.3, -1.0, 2.0]));
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let sq = g.square(x).unwrap();
        assert_eq!(g.backward(sq).unwrap().wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(MsctError::Usage(_))));
    }

    #[test]
    fn untouched_params_get_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::from_vec(vec![2.0]));
        let unused = store.add("unused", Tensor::from_vec(vec![5.0, 5.0]));
        let mut g = Graph::new();
        let p = g.param(&store, used);
        let l = g.square(p).unwrap();
        let l = g.sum(l).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param_or_zero(&store, used).data(), &[4.0]);
        assert_eq!(grads.param_or_zero(&store, unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.5));
        let a = g.mul(x, x).unwrap();
        let b = g.add(a, x).unwrap();
        let grads = g.backward(b).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0 * 1.5 + 1.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        match g.matmul(a, b) {
            Err(MsctError::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(g.concat(&[a, b], 1).is_err());
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn non_finite_output_is_numerical_error() {
        let r = run1(|g, v| g.ln(v), vec![0.0]);
        assert!(matches!(r, Err(MsctError::Numerical { op: "ln" })));
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![2, 2], vec![0.3, 9.0, -1.0, 2.0]).unwrap());
        let p = g.softmax(s, Some(&AttnMask::causal(2))).unwrap();
        assert_eq!(&g.value(p).data()[..2], &[1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(data in proptest::collection::vec(-10.0f64..10.0, 12)) {
            let mut g = Graph::new();
            let v = g.constant(Tensor::new(vec![3, 4], data).unwrap());
            let p = g.softmax(v, None).unwrap();
            for row in g.value(p).data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn catalog_outputs_finite(data in proptest::collection::vec(-10.0f64..10.0, 8)) {
            let mut g = Graph::new();
            let v = g.constant(Tensor::new(vec![2, 4], data).unwrap());
            let gain = g.constant(Tensor::full(&[4], 1.0));
            let bias = g.constant(Tensor::zeros(&[4]));
            let w = g.constant(Tensor::full(&[4, 3], 0.7));
            let outs = [
                g.elu(v).unwrap(),
                g.relu(v).unwrap(),
                g.sigmoid(v).unwrap(),
                g.tanh(v).unwrap(),
                g.exp(v).unwrap(),
                g.softmax(v, None).unwrap(),
                g.layer_norm(v, gain, bias).unwrap(),
                g.matmul(v, w).unwrap(),
            ];
            for o in outs {
                prop_assert!(g.value(o).is_finite());
            }
        }
    }
}
