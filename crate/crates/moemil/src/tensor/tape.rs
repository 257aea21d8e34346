//! Reverse-mode gradient tape.
//!
//! Ops append a record (inputs, output, saved values) to the tape;
//! [`Tape::backward`] walks the records in reverse and accumulates
//! gradients into per-slot buffers. Leaves registered through
//! [`Tape::param`] are remembered so the trainer can collect parameter
//! gradients by id after the pass.

use std::collections::HashMap;

use super::kernels::{self, ScanGrads};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn ix(self) -> usize {
        self.0 as usize
    }
}

struct Slot<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Tanh,
    Silu,
    Softplus,
    Exp,
}

enum OpRecord<T> {
    Add { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { a: Var, c: T, out: Var },
    Matmul { a: Var, b: Var, out: Var },
    Unary { kind: UnaryKind, a: Var, out: Var },
    Softmax { a: Var, out: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, out: Var, stats: Vec<(T, T)> },
    CausalConv { x: Var, kernel: Var, bias: Var, out: Var },
    GatherRows { x: Var, idx: Vec<usize>, out: Var },
    ScatterAddRows { base: Var, src: Var, idx: Vec<usize>, out: Var },
    GatherElems { x: Var, idx: Vec<usize>, out: Var },
    SliceCols { x: Var, start: usize, len: usize, out: Var },
    ScaleRows { x: Var, s: Var, out: Var },
    Reshape { x: Var, out: Var },
    Sum { x: Var, out: Var },
    CrossEntropy { logits: Var, out: Var, probs: Vec<T>, label: usize },
    SelectiveScan { u: Var, dt: Var, b: Var, c: Var, a: Var, d: Var, out: Var, states: Vec<T> },
}

pub struct Tape<T: Scalar> {
    slots: Vec<Slot<T>>,
    ops: Vec<OpRecord<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: Vec<(ParamId, Var)>,
    param_memo: HashMap<u32, Var>,
    backward_done: bool,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn grad_entry<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.ix()]
        .get_or_insert_with(|| vec![T::zero(); n])
        .as_mut_slice()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            slots: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            param_vars: Vec::new(),
            param_memo: HashMap::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let v = Var(self.slots.len() as u32);
        self.slots.push(Slot {
            shape,
            data,
            requires_grad,
        });
        v
    }

    /// Registers a leaf; gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_vec(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "constant shape {shape:?} does not match buffer length {}",
                data.len()
            )));
        }
        Ok(self.push(shape, data, false))
    }

    /// Registers a model parameter as a differentiable leaf (memoized, so
    /// repeated calls for the same id return the same [`Var`]).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_memo.get(&id.0) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), true);
        self.param_memo.insert(id.0, v);
        self.param_vars.push((id, v));
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.ix()].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.slots[v.ix()].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.slots[v.ix()].data.len()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.shape(v).to_vec(), self.data(v).to_vec()).expect("slot consistent")
    }

    fn requires(&self, v: Var) -> bool {
        self.slots[v.ix()].requires_grad
    }

    // -- ops ---------------------------------------------------------------

    /// Elementwise sum; `b`'s shape must equal `a`'s or be a suffix of it
    /// (trailing-dimension broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let (ad, bd) = (&self.slots[a.ix()].data, &self.slots[b.ix()].data);
        let bn = bd.len();
        let data: Vec<T> = ad.iter().enumerate().map(|(i, &av)| av + bd[i % bn]).collect();
        let req = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        let out = self.push(shape, data, req);
        self.ops.push(OpRecord::Add { a, b, out });
        Ok(out)
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let (ad, bd) = (&self.slots[a.ix()].data, &self.slots[b.ix()].data);
        let bn = bd.len();
        let data: Vec<T> = ad.iter().enumerate().map(|(i, &av)| av * bd[i % bn]).collect();
        let req = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        let out = self.push(shape, data, req);
        self.ops.push(OpRecord::Mul { a, b, out });
        Ok(out)
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(dim_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data: Vec<T> = self.slots[a.ix()].data.iter().map(|&v| v * c).collect();
        let req = self.requires(a);
        let shape = self.shape(a).to_vec();
        let out = self.push(shape, data, req);
        self.ops.push(OpRecord::Scale { a, c, out });
        out
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`;
    /// leading extents must match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 || sa.len() != sb.len() {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(dim_err("matmul", sa, sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let data = kernels::matmul_fwd(
            &self.slots[a.ix()].data,
            &self.slots[b.ix()].data,
            batch,
            m,
            k,
            n,
        );
        let req = self.requires(a) || self.requires(b);
        let out = self.push(shape, data, req);
        self.ops.push(OpRecord::Matmul { a, b, out });
        Ok(out)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var, f: impl Fn(T) -> T) -> Var {
        let data: Vec<T> = self.slots[a.ix()].data.iter().map(|&v| f(v)).collect();
        let req = self.requires(a);
        let shape = self.shape(a).to_vec();
        let out = self.push(shape, data, req);
        self.ops.push(OpRecord::Unary { kind, a, out });
        out
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a, |v| v.tanh())
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Silu, a, kernels::silu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a, kernels::softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a, |v| v.exp())
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::contract("softmax on rank-0 tensor"))?;
        let rows = self.numel(a) / cols;
        if self.slots[a.ix()].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let data = kernels::softmax_fwd(&self.slots[a.ix()].data, rows, cols);
        let req = self.requires(a);
        let out = self.push(shape, data, req);
        self.ops.push(OpRecord::Softmax { a, out });
        Ok(out)
    }

    /// Layer norm over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::contract("layer_norm on rank-0 tensor"))?;
        if self.shape(gamma) != [cols] {
            return Err(dim_err("layer_norm", &shape, self.shape(gamma)));
        }
        if self.shape(beta) != [cols] {
            return Err(dim_err("layer_norm", &shape, self.shape(beta)));
        }
        let rows = self.numel(x) / cols;
        let (data, stats) = kernels::layer_norm_fwd(
            &self.slots[x.ix()].data,
            &self.slots[gamma.ix()].data,
            &self.slots[beta.ix()].data,
            rows,
            cols,
            eps,
        );
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let out = self.push(shape, data, req);
        self.ops.push(OpRecord::LayerNorm { x, gamma, beta, out, stats });
        Ok(out)
    }

    /// Depthwise causal 1-d convolution over `[L, C]` with kernel `[C, W]`
    /// and bias `[C]`; implicit left zero padding of `W - 1`.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 2 || sk.len() != 2 || sx[1] != sk[0] {
            return Err(dim_err("causal_conv1d", &sx, &sk));
        }
        if self.shape(bias) != [sx[1]] {
            return Err(dim_err("causal_conv1d", &sx, self.shape(bias)));
        }
        let (l, c, w) = (sx[0], sx[1], sk[1]);
        let data = kernels::conv_fwd(
            &self.slots[x.ix()].data,
            &self.slots[kernel.ix()].data,
            &self.slots[bias.ix()].data,
            l,
            c,
            w,
        );
        let req = self.requires(x) || self.requires(kernel) || self.requires(bias);
        let out = self.push(sx, data, req);
        self.ops.push(OpRecord::CausalConv { x, kernel, bias, out });
        Ok(out)
    }

    /// Selects rows of `[N, ..]` in the given order (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.first().ok_or_else(|| Error::contract("gather_rows on rank-0 tensor"))?;
        let rs = self.numel(x) / n;
        for &i in idx {
            if i >= n {
                return Err(Error::Index { op: "gather_rows", index: i, extent: n });
            }
        }
        let xd = &self.slots[x.ix()].data;
        let mut data = Vec::with_capacity(idx.len() * rs);
        for &i in idx {
            data.extend_from_slice(&xd[i * rs..(i + 1) * rs]);
        }
        let mut shape = sx;
        shape[0] = idx.len();
        let req = self.requires(x);
        let out = self.push(shape, data, req);
        self.ops.push(OpRecord::GatherRows { x, idx: idx.to_vec(), out });
        Ok(out)
    }

    /// `out = base` with `src`'s rows accumulated at `idx` (duplicates sum).
    pub fn scatter_add_rows(&mut self, base: Var, idx: &[usize], src: Var) -> Result<Var> {
        let sb = self.shape(base).to_vec();
        let ss = self.shape(src).to_vec();
        if sb.len() != ss.len() || sb.is_empty() || sb[1..] != ss[1..] || ss[0] != idx.len() {
            return Err(dim_err("scatter_add_rows", &sb, &ss));
        }
        let n = sb[0];
        let rs = self.numel(base) / n;
        for &i in idx {
            if i >= n {
                return Err(Error::Index { op: "scatter_add_rows", index: i, extent: n });
            }
        }
        let mut data = self.slots[base.ix()].data.clone();
        let sd = &self.slots[src.ix()].data;
        for (j, &i) in idx.iter().enumerate() {
            let dst = &mut data[i * rs..(i + 1) * rs];
            let srow = &sd[j * rs..(j + 1) * rs];
            for (d, &s) in dst.iter_mut().zip(srow) {
                *d += s;
            }
        }
        let req = self.requires(base) || self.requires(src);
        let out = self.push(sb, data, req);
        self.ops.push(OpRecord::ScatterAddRows { base, src, idx: idx.to_vec(), out });
        Ok(out)
    }

    /// Selects arbitrary elements by flat index into a `[len]` vector.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.numel(x);
        for &i in idx {
            if i >= n {
                return Err(Error::Index { op: "gather_elems", index: i, extent: n });
            }
        }
        let xd = &self.slots[x.ix()].data;
        let data: Vec<T> = idx.iter().map(|&i| xd[i]).collect();
        let req = self.requires(x);
        let out = self.push(vec![idx.len()], data, req);
        self.ops.push(OpRecord::GatherElems { x, idx: idx.to_vec(), out });
        Ok(out)
    }

    /// Column block `[.., start..start+len]` of a `[R, C]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || start + len > sx[1] {
            return Err(dim_err("slice_cols", &sx, &[start, len]));
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = &self.slots[x.ix()].data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let req = self.requires(x);
        let out = self.push(vec![r, len], data, req);
        self.ops.push(OpRecord::SliceCols { x, start, len, out });
        Ok(out)
    }

    /// Multiplies row `i` of `[R, C]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(s) != [sx[0]] {
            return Err(dim_err("scale_rows", &sx, self.shape(s)));
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = &self.slots[x.ix()].data;
        let sd = &self.slots[s.ix()].data;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let sv = sd[i];
            data.extend(xd[i * c..(i + 1) * c].iter().map(|&v| v * sv));
        }
        let req = self.requires(x) || self.requires(s);
        let out = self.push(sx, data, req);
        self.ops.push(OpRecord::ScaleRows { x, s, out });
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(dim_err("reshape", self.shape(x), &shape));
        }
        let data = self.slots[x.ix()].data.clone();
        let req = self.requires(x);
        let out = self.push(shape, data, req);
        self.ops.push(OpRecord::Reshape { x, out });
        Ok(out)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in &self.slots[x.ix()].data {
            acc += v;
        }
        let req = self.requires(x);
        let out = self.push(vec![1], vec![acc], req);
        self.ops.push(OpRecord::Sum { x, out });
        out
    }

    /// `-log softmax(logits)[label]` with a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let n = self.numel(logits);
        if label >= n {
            return Err(Error::Index { op: "cross_entropy", index: label, extent: n });
        }
        let xd = &self.slots[logits.ix()].data;
        let mut mx = xd[0];
        for &v in xd.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        let probs: Vec<T> = xd
            .iter()
            .map(|&v| {
                let e = (v - mx).exp();
                sum += e;
                e
            })
            .collect();
        let probs: Vec<T> = probs.into_iter().map(|e| e / sum).collect();
        let loss = sum.ln() + mx - xd[label];
        let req = self.requires(logits);
        let out = self.push(vec![1], vec![loss], req);
        self.ops.push(OpRecord::CrossEntropy { logits, out, probs, label });
        Ok(out)
    }

    /// Selective SSM recurrence; see [`crate::ssm`] for the layer around it.
    /// `u`, `dt`: `[L, Di]`; `b`, `c`: `[L, S]`; `a`: `[Di, S]`; `d`: `[Di]`.
    pub fn selective_scan(&mut self, u: Var, dt: Var, b: Var, c: Var, a: Var, d: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        if su.len() != 2 {
            return Err(dim_err("selective_scan", &su, &[]));
        }
        let (l, di) = (su[0], su[1]);
        if l == 0 {
            return Err(Error::contract("selective_scan on empty sequence"));
        }
        if self.shape(dt) != [l, di] {
            return Err(dim_err("selective_scan", &su, self.shape(dt)));
        }
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sb[0] != l {
            return Err(dim_err("selective_scan", &su, &sb));
        }
        let s = sb[1];
        if self.shape(c) != [l, s] || self.shape(a) != [di, s] || self.shape(d) != [di] {
            return Err(dim_err("selective_scan", &su, self.shape(a)));
        }
        let (y, states) = kernels::scan_fwd(
            &self.slots[u.ix()].data,
            &self.slots[dt.ix()].data,
            &self.slots[b.ix()].data,
            &self.slots[c.ix()].data,
            &self.slots[a.ix()].data,
            &self.slots[d.ix()].data,
            l,
            di,
            s,
        );
        let req = [u, dt, b, c, a, d].iter().any(|&v| self.requires(v));
        let out = self.push(su, y, req);
        self.ops.push(OpRecord::SelectiveScan { u, dt, b, c, a, d, out, states });
        Ok(out)
    }

    // -- backward ----------------------------------------------------------

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward already ran on this tape"));
        }
        if self.numel(loss) != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.slots.len()];
        self.grads[loss.ix()] = Some(vec![T::one()]);

        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &OpRecord<T>) {
        match *op {
            OpRecord::Add { a, b, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                if self.requires(a) {
                    let ga = grad_entry(&mut self.grads, a, g.len());
                    for (o, &gv) in ga.iter_mut().zip(&g) {
                        *o += gv;
                    }
                }
                if self.requires(b) {
                    let bn = self.numel(b);
                    let gb = grad_entry(&mut self.grads, b, bn);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % bn] += gv;
                    }
                }
            }
            OpRecord::Mul { a, b, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                let bn = self.numel(b);
                if self.requires(a) {
                    let bd = self.slots[b.ix()].data.clone();
                    let ga = grad_entry(&mut self.grads, a, g.len());
                    for (i, &gv) in g.iter().enumerate() {
                        ga[i] += gv * bd[i % bn];
                    }
                }
                if self.requires(b) {
                    let ad = self.slots[a.ix()].data.clone();
                    let gb = grad_entry(&mut self.grads, b, bn);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % bn] += gv * ad[i];
                    }
                }
            }
            OpRecord::Scale { a, c, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                if self.requires(a) {
                    let ga = grad_entry(&mut self.grads, a, g.len());
                    for (o, &gv) in ga.iter_mut().zip(&g) {
                        *o += gv * c;
                    }
                }
            }
            OpRecord::Matmul { a, b, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if self.requires(a) {
                    let bd = self.slots[b.ix()].data.clone();
                    let na = self.numel(a);
                    let ga = grad_entry(&mut self.grads, a, na);
                    kernels::matmul_bwd_a(ga, &g, &bd, batch, m, k, n);
                }
                if self.requires(b) {
                    let ad = self.slots[a.ix()].data.clone();
                    let nb = self.numel(b);
                    let gb = grad_entry(&mut self.grads, b, nb);
                    kernels::matmul_bwd_b(gb, &g, &ad, batch, m, k, n);
                }
            }
            OpRecord::Unary { kind, a, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                if !self.requires(a) {
                    return;
                }
                let deriv: Vec<T> = match kind {
                    UnaryKind::Tanh => self.slots[out.ix()].data.iter().map(|&y| T::one() - y * y).collect(),
                    UnaryKind::Silu => self.slots[a.ix()].data.iter().map(|&x| kernels::silu_deriv(x)).collect(),
                    UnaryKind::Softplus => self.slots[a.ix()].data.iter().map(|&x| kernels::sigmoid(x)).collect(),
                    UnaryKind::Exp => self.slots[out.ix()].data.clone(),
                };
                let ga = grad_entry(&mut self.grads, a, g.len());
                for (i, &gv) in g.iter().enumerate() {
                    ga[i] += gv * deriv[i];
                }
            }
            OpRecord::Softmax { a, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                if !self.requires(a) {
                    return;
                }
                let y = self.slots[out.ix()].data.clone();
                let cols = *self.shape(out).last().unwrap();
                let rows = y.len() / cols;
                let ga = grad_entry(&mut self.grads, a, y.len());
                kernels::softmax_bwd(ga, &g, &y, rows, cols);
            }
            OpRecord::LayerNorm { x, gamma, beta, out, ref stats } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                let cols = *self.shape(out).last().unwrap();
                let rows = g.len() / cols;
                let xd = self.slots[x.ix()].data.clone();
                let gd = self.slots[gamma.ix()].data.clone();
                if self.requires(x) {
                    let gx = grad_entry(&mut self.grads, x, xd.len());
                    kernels::layer_norm_bwd(Some(gx), None, None, &g, &xd, &gd, stats, rows, cols);
                }
                if self.requires(gamma) {
                    let gg = grad_entry(&mut self.grads, gamma, cols);
                    kernels::layer_norm_bwd(None, Some(gg), None, &g, &xd, &gd, stats, rows, cols);
                }
                if self.requires(beta) {
                    let gb = grad_entry(&mut self.grads, beta, cols);
                    kernels::layer_norm_bwd(None, None, Some(gb), &g, &xd, &gd, stats, rows, cols);
                }
            }
            OpRecord::CausalConv { x, kernel, bias, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                let sx = self.shape(x).to_vec();
                let (l, c) = (sx[0], sx[1]);
                let w = self.shape(kernel)[1];
                let xd = self.slots[x.ix()].data.clone();
                let kd = self.slots[kernel.ix()].data.clone();
                if self.requires(x) {
                    let gx = grad_entry(&mut self.grads, x, l * c);
                    kernels::conv_bwd(Some(gx), None, None, &g, &xd, &kd, l, c, w);
                }
                if self.requires(kernel) {
                    let gk = grad_entry(&mut self.grads, kernel, c * w);
                    kernels::conv_bwd(None, Some(gk), None, &g, &xd, &kd, l, c, w);
                }
                if self.requires(bias) {
                    let gb = grad_entry(&mut self.grads, bias, c);
                    kernels::conv_bwd(None, None, Some(gb), &g, &xd, &kd, l, c, w);
                }
            }
            OpRecord::GatherRows { x, ref idx, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                if !self.requires(x) {
                    return;
                }
                let nx = self.numel(x);
                let rs = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                let gx = grad_entry(&mut self.grads, x, nx);
                for (j, &i) in idx.iter().enumerate() {
                    let grow = &g[j * rs..(j + 1) * rs];
                    let dst = &mut gx[i * rs..(i + 1) * rs];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
            }
            OpRecord::ScatterAddRows { base, src, ref idx, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                if self.requires(base) {
                    let gb = grad_entry(&mut self.grads, base, g.len());
                    for (o, &gv) in gb.iter_mut().zip(&g) {
                        *o += gv;
                    }
                }
                if self.requires(src) {
                    let ns = self.numel(src);
                    let rs = if idx.is_empty() { 0 } else { ns / idx.len() };
                    let gs = grad_entry(&mut self.grads, src, ns);
                    for (j, &i) in idx.iter().enumerate() {
                        let grow = &g[i * rs..(i + 1) * rs];
                        let dst = &mut gs[j * rs..(j + 1) * rs];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
            }
            OpRecord::GatherElems { x, ref idx, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                if !self.requires(x) {
                    return;
                }
                let nx = self.numel(x);
                let gx = grad_entry(&mut self.grads, x, nx);
                for (j, &i) in idx.iter().enumerate() {
                    gx[i] += g[j];
                }
            }
            OpRecord::SliceCols { x, start, len, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                if !self.requires(x) {
                    return;
                }
                let c = self.shape(x)[1];
                let nx = self.numel(x);
                let gx = grad_entry(&mut self.grads, x, nx);
                for (i, grow) in g.chunks(len).enumerate() {
                    let dst = &mut gx[i * c + start..i * c + start + len];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
            }
            OpRecord::ScaleRows { x, s, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                let c = self.shape(x)[1];
                if self.requires(x) {
                    let sd = self.slots[s.ix()].data.clone();
                    let gx = grad_entry(&mut self.grads, x, g.len());
                    for (i, grow) in g.chunks(c).enumerate() {
                        let sv = sd[i];
                        let dst = &mut gx[i * c..(i + 1) * c];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += gv * sv;
                        }
                    }
                }
                if self.requires(s) {
                    let xd = self.slots[x.ix()].data.clone();
                    let rows = self.numel(s);
                    let gs = grad_entry(&mut self.grads, s, rows);
                    for (i, grow) in g.chunks(c).enumerate() {
                        let xrow = &xd[i * c..(i + 1) * c];
                        let mut acc = T::zero();
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            acc += gv * xv;
                        }
                        gs[i] += acc;
                    }
                }
            }
            OpRecord::Reshape { x, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                if !self.requires(x) {
                    return;
                }
                let gx = grad_entry(&mut self.grads, x, g.len());
                for (o, &gv) in gx.iter_mut().zip(&g) {
                    *o += gv;
                }
            }
            OpRecord::Sum { x, out } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                if !self.requires(x) {
                    return;
                }
                let nx = self.numel(x);
                let gx = grad_entry(&mut self.grads, x, nx);
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
            OpRecord::CrossEntropy { logits, out, ref probs, label } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                if !self.requires(logits) {
                    return;
                }
                let gx = grad_entry(&mut self.grads, logits, probs.len());
                for (j, o) in gx.iter_mut().enumerate() {
                    let one_hot = if j == label { T::one() } else { T::zero() };
                    *o += g[0] * (probs[j] - one_hot);
                }
            }
            OpRecord::SelectiveScan { u, dt, b, c, a, d, out, ref states } => {
                let Some(g) = self.grads[out.ix()].clone() else { return };
                let (l, di) = (self.shape(u)[0], self.shape(u)[1]);
                let s = self.shape(b)[1];
                let ud = self.slots[u.ix()].data.clone();
                let dtd = self.slots[dt.ix()].data.clone();
                let bd = self.slots[b.ix()].data.clone();
                let cd = self.slots[c.ix()].data.clone();
                let ad = self.slots[a.ix()].data.clone();
                let dd = self.slots[d.ix()].data.clone();
                // One fused reverse sweep; per-input buffers are created only
                // for inputs that track gradients.
                let mut bufs: Vec<Option<Vec<T>>> = vec![None; 6];
                let sizes = [l * di, l * di, l * s, l * s, di * s, di];
                let vars = [u, dt, b, c, a, d];
                for (slot, (&v, &sz)) in bufs.iter_mut().zip(vars.iter().zip(&sizes)) {
                    if self.requires(v) {
                        *slot = Some(vec![T::zero(); sz]);
                    }
                }
                {
                    let [gu, gdt, gb, gc, ga, gd] = &mut bufs[..] else { unreachable!() };
                    kernels::scan_bwd(
                        ScanGrads {
                            u: gu.as_deref_mut(),
                            dt: gdt.as_deref_mut(),
                            b: gb.as_deref_mut(),
                            c: gc.as_deref_mut(),
                            a: ga.as_deref_mut(),
                            d: gd.as_deref_mut(),
                        },
                        &g,
                        &ud,
                        &dtd,
                        &bd,
                        &cd,
                        &ad,
                        &dd,
                        states,
                        l,
                        di,
                        s,
                    );
                }
                for (buf, &v) in bufs.into_iter().zip(&vars) {
                    if let Some(buf) = buf {
                        let gv = grad_entry(&mut self.grads, v, buf.len());
                        for (o, bv) in gv.iter_mut().zip(buf) {
                            *o += bv;
                        }
                    }
                }
            }
        }
    }

    /// Gradient buffer for a var, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.ix()).and_then(|g| g.as_deref())
    }

    /// Parameter gradients collected after [`Tape::backward`], in
    /// registration order. Parameters the loss never touched yield `None`.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[T]>)> {
        self.param_vars.iter().map(|&(id, v)| (id, self.grad(v)))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
