//! Tape-based reverse-mode autodiff over an arena of tensors.
//!
//! A [`Graph`] owns every tensor: persistent ones (parameters and running
//! buffers, which survive [`Graph::reset_tape`]) and transient activations
//! recorded during forward passes. Each differentiable operation computes
//! its output eagerly and pushes an [`Op`] record; [`Graph::backward`]
//! replays the records in reverse, visiting each exactly once.
//!
//! Forward/backward on one graph is single-threaded; distinct graphs are
//! independent and may run on distinct threads.

use crate::error::{Error, Result};
use crate::numerics::kernels as kn;
use crate::numerics::tensor::Tensor;

/// Handle to a tensor in the graph arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Forward-pass mode, consulted by batch normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Recorded differentiable operation.
#[derive(Debug)]
enum Op {
    Add { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { a: TensorId, c: f64, out: TensorId },
    Matmul { a: TensorId, b: TensorId, out: TensorId, m: usize, k: usize, n: usize },
    Transpose2d { a: TensorId, out: TensorId, r: usize, c: usize },
    Reshape { a: TensorId, out: TensorId },
    ConcatRows { parts: Vec<TensorId>, out: TensorId },
    ConcatCols { a: TensorId, b: TensorId, out: TensorId, rows: usize, ca: usize, cb: usize },
    GatherRows { a: TensorId, out: TensorId, idx: Vec<usize>, cols: usize },
    MulRowsVec { a: TensorId, v: TensorId, out: TensorId, rows: usize, cols: usize },
    MulColsVec { a: TensorId, v: TensorId, out: TensorId, rows: usize, cols: usize },
    AddRowVec { a: TensorId, v: TensorId, out: TensorId, rows: usize, cols: usize },
    Conv1d {
        x: TensorId,
        k: TensorId,
        out: TensorId,
        stride: usize,
        pad: usize,
        ci: usize,
        l: usize,
        co: usize,
        klen: usize,
        l_out: usize,
    },
    Conv2d {
        x: TensorId,
        k: TensorId,
        out: TensorId,
        stride: usize,
        pf: (usize, usize),
        pt: usize,
        ci: usize,
        f: usize,
        t: usize,
        co: usize,
        kf: usize,
        kt: usize,
        f_out: usize,
        t_out: usize,
    },
    Selu { x: TensorId, out: TensorId },
    Sigmoid { x: TensorId, out: TensorId },
    Abs { x: TensorId, out: TensorId },
    MaxPool2d { x: TensorId, out: TensorId, arg: Vec<usize> },
    ReduceMaxAxis3 { x: TensorId, out: TensorId, arg: Vec<usize> },
    ReduceSumAxis3 { x: TensorId, out: TensorId, axis: usize, c: usize, f: usize, t: usize },
    ReduceMaxRows { a: TensorId, out: TensorId, arg: Vec<usize> },
    ReduceMeanRows { a: TensorId, out: TensorId, rows: usize, cols: usize },
    SoftmaxRows { a: TensorId, out: TensorId, rows: usize, cols: usize },
    ReduceSumAll { x: TensorId, out: TensorId },
    WeightedCe { logits: TensorId, out: TensorId, labels: Vec<u8>, weights: [f64; 2] },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        c: usize,
        n: usize,
        train_stats: bool,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    ElemMax { a: TensorId, b: TensorId, out: TensorId },
    BroadcastMulFT { s: TensorId, w: TensorId, out: TensorId, c: usize, f: usize, t: usize },
    SincKernels {
        low: TensorId,
        band: TensorId,
        out: TensorId,
        klen: usize,
        sample_rate: f64,
    },
}

/// Frequency clamp floor for sinc filters, Hz.
pub const SINC_MIN_LOW_HZ: f64 = 50.0;
/// Minimum bandwidth for sinc filters, Hz.
pub const SINC_MIN_BAND_HZ: f64 = 50.0;
/// Frequency clamp ceiling for sinc filters, Hz (kept inside Nyquist).
pub const SINC_MAX_HZ_FRACTION: f64 = 7950.0 / 8000.0;

pub struct Graph {
    tensors: Vec<Tensor>,
    /// Parallel flag: tensor is on a path from a requires_grad leaf.
    on_path: Vec<bool>,
    ops: Vec<Op>,
    persistent: usize,
    names: Vec<(String, TensorId)>,
    pub mode: Mode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            tensors: Vec::new(),
            on_path: Vec::new(),
            ops: Vec::new(),
            persistent: 0,
            names: Vec::new(),
            mode: Mode::Train,
        }
    }

    fn push(&mut self, t: Tensor, on_path: bool) -> TensorId {
        let id = TensorId(self.tensors.len() as u32);
        self.tensors.push(t);
        self.on_path.push(on_path);
        id
    }

    /// Register a named trainable parameter. Persistent across `reset_tape`.
    pub fn add_param(&mut self, name: &str, mut t: Tensor) -> Result<TensorId> {
        if self.tensors.len() != self.persistent {
            return Err(Error::contract(
                "parameters must be registered before recording ops",
            ));
        }
        if self.names.iter().any(|(n, _)| n == name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        t.requires_grad = true;
        let id = self.push(t, true);
        self.names.push((name.to_string(), id));
        self.persistent = self.tensors.len();
        Ok(id)
    }

    /// Register a named non-trainable buffer (e.g. BN running statistics).
    pub fn add_buffer(&mut self, name: &str, t: Tensor) -> Result<TensorId> {
        if self.tensors.len() != self.persistent {
            return Err(Error::contract(
                "buffers must be registered before recording ops",
            ));
        }
        if self.names.iter().any(|(n, _)| n == name) {
            return Err(Error::contract(format!("duplicate buffer name {name:?}")));
        }
        t.requires_grad = false;
        let id = self.push(t, false);
        self.names.push((name.to_string(), id));
        self.persistent = self.tensors.len();
        Ok(id)
    }

    /// Add a transient input tensor (no gradient).
    pub fn input(&mut self, t: Tensor) -> TensorId {
        self.push(t, false)
    }

    /// Add a transient input that participates in gradients (used by
    /// gradient checks on op inputs).
    pub fn input_grad(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = true;
        self.push(t, true)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.idx()]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.tensors[id.idx()].data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.tensors[id.idx()].shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.idx()].grad.as_deref()
    }

    pub fn set_data(&mut self, id: TensorId, data: &[f64]) {
        let t = &mut self.tensors[id.idx()];
        assert_eq!(t.numel(), data.len(), "set_data element count mismatch");
        t.data_mut().copy_from_slice(data);
    }

    pub fn named_tensors(&self) -> &[(String, TensorId)] {
        &self.names
    }

    pub fn lookup(&self, name: &str) -> Option<TensorId> {
        self.names.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    /// Ids of all registered parameters (requires_grad persistent tensors).
    pub fn param_ids(&self) -> Vec<TensorId> {
        self.names
            .iter()
            .map(|(_, id)| *id)
            .filter(|id| self.tensors[id.idx()].requires_grad)
            .collect()
    }

    /// Drop all transient tensors and the op tape. Parameters and buffers
    /// keep their values; gradients are cleared.
    pub fn reset_tape(&mut self) {
        self.tensors.truncate(self.persistent);
        self.on_path.truncate(self.persistent);
        self.ops.clear();
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    fn out_of(&mut self, shape: &[usize], data: Vec<f64>, inputs: &[TensorId]) -> TensorId {
        let on = inputs.iter().any(|i| self.on_path[i.idx()]);
        let t = Tensor::from_vec(shape, data).expect("internal: op output shape mismatch");
        self.push(t, on)
    }

    // ── elementwise and linear ops ───────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.tensors[a.idx()], &self.tensors[b.idx()]);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add: shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let out = self.out_of(&shape, data, &[a, b]);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.tensors[a.idx()], &self.tensors[b.idx()]);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "mul: shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let out = self.out_of(&shape, data, &[a, b]);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let ta = &self.tensors[a.idx()];
        let data: Vec<f64> = ta.data().iter().map(|x| c * x).collect();
        let shape = ta.shape().to_vec();
        let out = self.out_of(&shape, data, &[a]);
        self.ops.push(Op::Scale { a, c, out });
        out
    }

    /// out(m,n) = a(m,k) @ b(k,n)
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul: both operands must be rank-2".into()));
        }
        if sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul: inner axes differ ({} vs {})",
                sa[1], sb[0]
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kn::matmul(self.data(a), self.data(b), (m, k, n), &mut data);
        let out = self.out_of(&[m, n], data, &[a, b]);
        self.ops.push(Op::Matmul { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn transpose2d(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape("transpose2d: operand must be rank-2".into()));
        }
        let (r, c) = (sa[0], sa[1]);
        let mut data = vec![0.0; r * c];
        kn::transpose(self.data(a), (r, c), &mut data);
        let out = self.out_of(&[c, r], data, &[a]);
        self.ops.push(Op::Transpose2d { a, out, r, c });
        Ok(out)
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let t = self.tensors[a.idx()].reshaped(shape)?;
        let out = self.out_of(shape, t.data().to_vec(), &[a]);
        self.ops.push(Op::Reshape { a, out });
        Ok(out)
    }

    /// Concatenate along axis 0. All parts must share trailing dimensions.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: no parts".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let trailing = &first[1.min(first.len())..];
        let mut rows = 0usize;
        let mut data = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.is_empty() || &sp[1..] != trailing {
                return Err(Error::shape(format!(
                    "concat_rows: trailing dims differ ({:?} vs {:?})",
                    sp, first
                )));
            }
            rows += sp[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(trailing);
        let out = self.out_of(&shape, data, parts);
        self.ops.push(Op::ConcatRows { parts: parts.to_vec(), out });
        Ok(out)
    }

    /// Concatenate two rank-2 tensors along axis 1.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape(format!(
                "concat_cols: shapes {:?} vs {:?}",
                sa, sb
            )));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            data.extend_from_slice(&self.data(a)[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&self.data(b)[i * cb..(i + 1) * cb]);
        }
        let out = self.out_of(&[rows, ca + cb], data, &[a, b]);
        self.ops.push(Op::ConcatCols { a, b, out, rows, ca, cb });
        Ok(out)
    }

    /// Select rows of a rank-2 tensor by index.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape("gather_rows: operand must be rank-2".into()));
        }
        let (rows, cols) = (sa[0], sa[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!(
                "gather_rows: index {bad} out of range (rows={rows})"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&self.data(a)[i * cols..(i + 1) * cols]);
        }
        let out = self.out_of(&[idx.len(), cols], data, &[a]);
        self.ops.push(Op::GatherRows { a, out, idx: idx.to_vec(), cols });
        Ok(out)
    }

    /// Scale row i of a(n,d) by v[i].
    pub fn mul_rows_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sv = self.shape(v).to_vec();
        if sa.len() != 2 || sv != [sa[0]] {
            return Err(Error::shape(format!(
                "mul_rows_vec: shapes {:?} vs {:?}",
                sa, sv
            )));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let s = self.data(v)[i];
            for j in 0..cols {
                data[i * cols + j] = self.data(a)[i * cols + j] * s;
            }
        }
        let out = self.out_of(&[rows, cols], data, &[a, v]);
        self.ops.push(Op::MulRowsVec { a, v, out, rows, cols });
        Ok(out)
    }

    /// Scale column j of a(n,d) by v[j].
    pub fn mul_cols_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sv = self.shape(v).to_vec();
        if sa.len() != 2 || sv != [sa[1]] {
            return Err(Error::shape(format!(
                "mul_cols_vec: shapes {:?} vs {:?}",
                sa, sv
            )));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = self.data(a)[i * cols + j] * self.data(v)[j];
            }
        }
        let out = self.out_of(&[rows, cols], data, &[a, v]);
        self.ops.push(Op::MulColsVec { a, v, out, rows, cols });
        Ok(out)
    }

    /// Broadcast-add a row vector v(d) to every row of a(n,d).
    pub fn add_row_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sv = self.shape(v).to_vec();
        if sa.len() != 2 || sv != [sa[1]] {
            return Err(Error::shape(format!(
                "add_row_vec: shapes {:?} vs {:?}",
                sa, sv
            )));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = self.data(a)[i * cols + j] + self.data(v)[j];
            }
        }
        let out = self.out_of(&[rows, cols], data, &[a, v]);
        self.ops.push(Op::AddRowVec { a, v, out, rows, cols });
        Ok(out)
    }

    // ── convolutions ─────────────────────────────────────────────────

    /// 1-D convolution: x(ci,l) * k(co,ci,klen) -> (co, l_out).
    pub fn conv1d(
        &mut self,
        x: TensorId,
        k: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape(format!(
                "conv1d: input must be rank-2 (C_in, L), got {:?}",
                sx
            )));
        }
        if sk.len() != 3 {
            return Err(Error::shape(format!(
                "conv1d: kernels must be rank-3 (C_out, C_in, K), got {:?}",
                sk
            )));
        }
        if sk[1] != sx[0] {
            return Err(Error::shape(format!(
                "conv1d: channel axis mismatch: input C_in={}, kernel C_in={}",
                sx[0], sk[1]
            )));
        }
        let (ci, l) = (sx[0], sx[1]);
        let (co, klen) = (sk[0], sk[2]);
        if klen > l + 2 * pad {
            return Err(Error::shape(format!(
                "conv1d: kernel length {} exceeds padded input length {} on axis L",
                klen,
                l + 2 * pad
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv1d: stride must be positive".into()));
        }
        let l_out = kn::conv1d_out_len(l, klen, stride, pad);
        let mut data = vec![0.0; co * l_out];
        kn::conv1d_fwd(self.data(x), (ci, l), self.data(k), (co, klen), stride, pad, &mut data, l_out);
        let out = self.out_of(&[co, l_out], data, &[x, k]);
        self.ops.push(Op::Conv1d { x, k, out, stride, pad, ci, l, co, klen, l_out });
        Ok(out)
    }

    /// 2-D convolution with symmetric padding on both spatial axes.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        k: TensorId,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<TensorId> {
        self.conv2d_asym(x, k, stride, (padding.0, padding.0), padding.1)
    }

    /// 2-D convolution with asymmetric frequency padding (top, bottom) and
    /// symmetric time padding. Used by the residual blocks, whose kernel
    /// height 2 preserves F via (top=1, bottom=0).
    pub fn conv2d_asym(
        &mut self,
        x: TensorId,
        k: TensorId,
        stride: usize,
        pf: (usize, usize),
        pt: usize,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        if sx.len() != 3 {
            return Err(Error::shape(format!(
                "conv2d: input must be rank-3 (C_in, F, T), got {:?}",
                sx
            )));
        }
        if sk.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d: kernels must be rank-4 (C_out, C_in, kF, kT), got {:?}",
                sk
            )));
        }
        if sk[1] != sx[0] {
            return Err(Error::shape(format!(
                "conv2d: channel axis mismatch: input C_in={}, kernel C_in={}",
                sx[0], sk[1]
            )));
        }
        let (ci, f, t) = (sx[0], sx[1], sx[2]);
        let (co, kf, kt) = (sk[0], sk[2], sk[3]);
        if kf > f + pf.0 + pf.1 {
            return Err(Error::shape(format!(
                "conv2d: kernel height {} exceeds padded F={}",
                kf,
                f + pf.0 + pf.1
            )));
        }
        if kt > t + 2 * pt {
            return Err(Error::shape(format!(
                "conv2d: kernel width {} exceeds padded T={}",
                kt,
                t + 2 * pt
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be positive".into()));
        }
        let f_out = (f + pf.0 + pf.1 - kf) / stride + 1;
        let t_out = (t + 2 * pt - kt) / stride + 1;
        let mut data = vec![0.0; co * f_out * t_out];
        kn::conv2d_fwd(
            self.data(x),
            (ci, f, t),
            self.data(k),
            (co, kf, kt),
            stride,
            pf,
            pt,
            &mut data,
            (f_out, t_out),
        );
        let out = self.out_of(&[co, f_out, t_out], data, &[x, k]);
        self.ops.push(Op::Conv2d {
            x,
            k,
            out,
            stride,
            pf,
            pt,
            ci,
            f,
            t,
            co,
            kf,
            kt,
            f_out,
            t_out,
        });
        Ok(out)
    }

    // ── nonlinearities ───────────────────────────────────────────────

    pub fn selu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| kn::selu(v)).collect();
        let shape = self.shape(x).to_vec();
        let out = self.out_of(&shape, data, &[x]);
        self.ops.push(Op::Selu { x, out });
        out
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| kn::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let out = self.out_of(&shape, data, &[x]);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let out = self.out_of(&shape, data, &[x]);
        self.ops.push(Op::Abs { x, out });
        out
    }

    // ── pooling and reductions ───────────────────────────────────────

    /// Non-overlapping k x k max pooling over (C, F, T).
    pub fn maxpool2d(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::shape(format!(
                "maxpool2d: input must be rank-3 (C, F, T), got {:?}",
                sx
            )));
        }
        if k == 0 {
            return Err(Error::contract("maxpool2d: k must be positive".into()));
        }
        let (c, f, t) = (sx[0], sx[1], sx[2]);
        let (fo, to) = (f / k, t / k);
        if fo == 0 || to == 0 {
            return Err(Error::shape(format!(
                "maxpool2d: pool size {} larger than spatial dims ({}, {})",
                k, f, t
            )));
        }
        let xd = self.data(x);
        let mut data = vec![0.0; c * fo * to];
        let mut arg = vec![0usize; c * fo * to];
        for ci in 0..c {
            for i in 0..fo {
                for j in 0..to {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for di in 0..k {
                        for dj in 0..k {
                            let at = (ci * f + i * k + di) * t + j * k + dj;
                            if xd[at] > best {
                                best = xd[at];
                                best_at = at;
                            }
                        }
                    }
                    data[(ci * fo + i) * to + j] = best;
                    arg[(ci * fo + i) * to + j] = best_at;
                }
            }
        }
        let out = self.out_of(&[c, fo, to], data, &[x]);
        self.ops.push(Op::MaxPool2d { x, out, arg });
        Ok(out)
    }

    /// Max over axis 1 or 2 of a (C, F, T) tensor -> (C, T) or (C, F).
    pub fn reduce_max_axis3(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || (axis != 1 && axis != 2) {
            return Err(Error::shape(format!(
                "reduce_max_axis3: need rank-3 input and axis in {{1,2}}, got {:?} axis {}",
                sx, axis
            )));
        }
        let (c, f, t) = (sx[0], sx[1], sx[2]);
        let xd = self.data(x);
        let (mut data, mut arg, oshape);
        if axis == 1 {
            data = vec![f64::NEG_INFINITY; c * t];
            arg = vec![0usize; c * t];
            for ci in 0..c {
                for fi in 0..f {
                    for ti in 0..t {
                        let at = (ci * f + fi) * t + ti;
                        let o = ci * t + ti;
                        if xd[at] > data[o] {
                            data[o] = xd[at];
                            arg[o] = at;
                        }
                    }
                }
            }
            oshape = vec![c, t];
        } else {
            data = vec![f64::NEG_INFINITY; c * f];
            arg = vec![0usize; c * f];
            for ci in 0..c {
                for fi in 0..f {
                    let o = ci * f + fi;
                    for ti in 0..t {
                        let at = (ci * f + fi) * t + ti;
                        if xd[at] > data[o] {
                            data[o] = xd[at];
                            arg[o] = at;
                        }
                    }
                }
            }
            oshape = vec![c, f];
        }
        let out = self.out_of(&oshape, data, &[x]);
        self.ops.push(Op::ReduceMaxAxis3 { x, out, arg });
        Ok(out)
    }

    /// Sum over axis 1 or 2 of a (C, F, T) tensor.
    pub fn reduce_sum_axis3(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || (axis != 1 && axis != 2) {
            return Err(Error::shape(format!(
                "reduce_sum_axis3: need rank-3 input and axis in {{1,2}}, got {:?} axis {}",
                sx, axis
            )));
        }
        let (c, f, t) = (sx[0], sx[1], sx[2]);
        let xd = self.data(x);
        let (mut data, oshape);
        if axis == 1 {
            data = vec![0.0; c * t];
            for ci in 0..c {
                for fi in 0..f {
                    for ti in 0..t {
                        data[ci * t + ti] += xd[(ci * f + fi) * t + ti];
                    }
                }
            }
            oshape = vec![c, t];
        } else {
            data = vec![0.0; c * f];
            for ci in 0..c {
                for fi in 0..f {
                    let mut acc = 0.0;
                    for ti in 0..t {
                        acc += xd[(ci * f + fi) * t + ti];
                    }
                    data[ci * f + fi] = acc;
                }
            }
            oshape = vec![c, f];
        }
        let out = self.out_of(&oshape, data, &[x]);
        self.ops.push(Op::ReduceSumAxis3 { x, out, axis, c, f, t });
        Ok(out)
    }

    /// Per-column max over the rows of a(n,d) -> (d,).
    pub fn reduce_max_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] == 0 {
            return Err(Error::shape(format!(
                "reduce_max_rows: need non-empty rank-2 input, got {:?}",
                sa
            )));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let ad = self.data(a);
        let mut data = vec![f64::NEG_INFINITY; cols];
        let mut arg = vec![0usize; cols];
        for i in 0..rows {
            for j in 0..cols {
                let v = ad[i * cols + j];
                if v > data[j] {
                    data[j] = v;
                    arg[j] = i * cols + j;
                }
            }
        }
        let out = self.out_of(&[cols], data, &[a]);
        self.ops.push(Op::ReduceMaxRows { a, out, arg });
        Ok(out)
    }

    /// Per-column mean over the rows of a(n,d) -> (d,).
    pub fn reduce_mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] == 0 {
            return Err(Error::shape(format!(
                "reduce_mean_rows: need non-empty rank-2 input, got {:?}",
                sa
            )));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let ad = self.data(a);
        let mut data = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j] += ad[i * cols + j];
            }
        }
        for v in &mut data {
            *v /= rows as f64;
        }
        let out = self.out_of(&[cols], data, &[a]);
        self.ops.push(Op::ReduceMeanRows { a, out, rows, cols });
        Ok(out)
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape("softmax_rows: operand must be rank-2".into()));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = self.data(a).to_vec();
        for i in 0..rows {
            kn::softmax_row(&mut data[i * cols..(i + 1) * cols]);
        }
        let out = self.out_of(&[rows, cols], data, &[a]);
        self.ops.push(Op::SoftmaxRows { a, out, rows, cols });
        Ok(out)
    }

    /// Softmax along an axis of a rank-1 or rank-2 tensor.
    pub fn softmax_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        match (self.shape(a).len(), axis) {
            (1, 0) => {
                let n = self.shape(a)[0];
                let row = self.reshape(a, &[1, n])?;
                let sm = self.softmax_rows(row)?;
                self.reshape(sm, &[n])
            }
            (2, 1) => self.softmax_rows(a),
            (2, 0) => {
                let t = self.transpose2d(a)?;
                let sm = self.softmax_rows(t)?;
                self.transpose2d(sm)
            }
            (rank, _) => Err(Error::shape(format!(
                "softmax_axis: unsupported rank {rank} / axis {axis}"
            ))),
        }
    }

    pub fn reduce_sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        let out = self.out_of(&[], vec![s], &[x]);
        self.ops.push(Op::ReduceSumAll { x, out });
        out
    }

    /// Mean over the batch of `-w[label] * log softmax(logits)[label]`.
    /// `logits` is (B, 2); labels are 0 (bona fide) or 1 (spoof).
    pub fn weighted_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[u8],
        weights: [f64; 2],
    ) -> Result<TensorId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[1] != 2 {
            return Err(Error::shape(format!(
                "weighted_cross_entropy: logits must be (B, 2), got {:?}",
                sl
            )));
        }
        if sl[0] != labels.len() {
            return Err(Error::shape(format!(
                "weighted_cross_entropy: {} logit rows vs {} labels",
                sl[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::contract(format!(
                "weighted_cross_entropy: label {bad} outside {{0, 1}}"
            )));
        }
        let b = sl[0];
        let ld = self.data(logits);
        let mut loss = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            let (lp0, lp1) = kn::log_softmax2(ld[2 * i], ld[2 * i + 1]);
            let lp = if lab == 0 { lp0 } else { lp1 };
            loss += -weights[lab as usize] * lp;
        }
        loss /= b as f64;
        let out = self.out_of(&[], vec![loss], &[logits]);
        self.ops.push(Op::WeightedCe {
            logits,
            out,
            labels: labels.to_vec(),
            weights,
        });
        Ok(out)
    }

    /// Batch normalisation over the non-channel axes of a (C, F, T) map.
    ///
    /// Train mode normalises with the statistics of the current map and
    /// updates the running buffers in place with the given momentum; eval
    /// mode normalises with the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: TensorId,
        running_var: TensorId,
        eps: f64,
        momentum: f64,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::shape(format!(
                "batchnorm: input must be rank-3 (C, F, T), got {:?}",
                sx
            )));
        }
        let (c, f, t) = (sx[0], sx[1], sx[2]);
        let n = f * t;
        for (name, id) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
            if self.shape(id) != [c] {
                return Err(Error::shape(format!(
                    "batchnorm: {} must have shape [{}], got {:?}",
                    name,
                    c,
                    self.shape(id)
                )));
            }
        }
        let train_stats = self.mode == Mode::Train;
        let (mean, var): (Vec<f64>, Vec<f64>) = if train_stats {
            let xd = self.data(x);
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let row = &xd[ci * n..(ci + 1) * n];
                let m = row.iter().sum::<f64>() / n as f64;
                let v = row.iter().map(|&u| (u - m) * (u - m)).sum::<f64>() / n as f64;
                mean[ci] = m;
                var[ci] = v;
            }
            // running-stat update is a buffered side effect, not on the tape
            let new_rm: Vec<f64> = self
                .data(running_mean)
                .iter()
                .zip(&mean)
                .map(|(&r, &m)| (1.0 - momentum) * r + momentum * m)
                .collect();
            let new_rv: Vec<f64> = self
                .data(running_var)
                .iter()
                .zip(&var)
                .map(|(&r, &v)| (1.0 - momentum) * r + momentum * v)
                .collect();
            self.set_data(running_mean, &new_rm);
            self.set_data(running_var, &new_rv);
            (mean, var)
        } else {
            (
                self.data(running_mean).to_vec(),
                self.data(running_var).to_vec(),
            )
        };
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut data = vec![0.0; c * n];
        for ci in 0..c {
            let (g, bt, m, is) = (gd[ci], bd[ci], mean[ci], invstd[ci]);
            for j in 0..n {
                data[ci * n + j] = g * (xd[ci * n + j] - m) * is + bt;
            }
        }
        let out = self.out_of(&[c, f, t], data, &[x, gamma, beta]);
        self.ops.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            out,
            c,
            n,
            train_stats,
            mean,
            invstd,
        });
        Ok(out)
    }

    pub fn elem_max(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.tensors[a.idx()], &self.tensors[b.idx()]);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "elem_max: shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let shape = ta.shape().to_vec();
        let out = self.out_of(&shape, data, &[a, b]);
        self.ops.push(Op::ElemMax { a, b, out });
        Ok(out)
    }

    /// m[c,f,t] = s[c,f,t] * w[f,t]
    pub fn broadcast_mul_ft(&mut self, s: TensorId, w: TensorId) -> Result<TensorId> {
        let ss = self.shape(s).to_vec();
        let sw = self.shape(w).to_vec();
        if ss.len() != 3 || sw != [ss[1], ss[2]] {
            return Err(Error::shape(format!(
                "broadcast_mul_ft: shapes {:?} vs {:?}",
                ss, sw
            )));
        }
        let (c, f, t) = (ss[0], ss[1], ss[2]);
        let sd = self.data(s);
        let wd = self.data(w);
        let mut data = vec![0.0; c * f * t];
        for ci in 0..c {
            for j in 0..f * t {
                data[ci * f * t + j] = sd[ci * f * t + j] * wd[j];
            }
        }
        let out = self.out_of(&[c, f, t], data, &[s, w]);
        self.ops.push(Op::BroadcastMulFT { s, w, out, c, f, t });
        Ok(out)
    }

    /// Synthesize windowed band-pass kernels from per-filter (low, band)
    /// cutoffs in Hz. Output is (n_filters, klen). Cutoffs are clamped
    /// inside (0, Nyquist); DC and Nyquist components are projected out so
    /// the kernels stay band-pass under any parameter drift.
    pub fn sinc_kernels(
        &mut self,
        low: TensorId,
        band: TensorId,
        klen: usize,
        sample_rate: f64,
    ) -> Result<TensorId> {
        let sl = self.shape(low).to_vec();
        let sb = self.shape(band).to_vec();
        if sl.len() != 1 || sb != sl {
            return Err(Error::shape(format!(
                "sinc_kernels: low/band must be equal rank-1 shapes, got {:?} vs {:?}",
                sl, sb
            )));
        }
        if klen % 2 == 0 || klen < 3 {
            return Err(Error::contract(
                "sinc_kernels: kernel length must be odd and >= 3",
            ));
        }
        let nf = sl[0];
        let mut data = vec![0.0; nf * klen];
        for i in 0..nf {
            let (f1, f2) = clamp_cutoffs(self.data(low)[i], self.data(band)[i], sample_rate);
            let row = &mut data[i * klen..(i + 1) * klen];
            synth_bandpass(row, f1, f2, klen);
            project_out_dc_nyquist(row);
        }
        let out = self.out_of(&[nf, klen], data, &[low, band]);
        self.ops.push(Op::SincKernels {
            low,
            band,
            out,
            klen,
            sample_rate,
        });
        Ok(out)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode gradient accumulation from a scalar loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensors[loss.idx()].numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.tensors.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.idx()] = Some(vec![1.0]);

        for oi in (0..self.ops.len()).rev() {
            self.backward_op(oi, &mut grads);
        }

        // Populate grads of requires_grad tensors; transient activation
        // gradients are dropped.
        for (i, g) in grads.into_iter().enumerate() {
            if self.tensors[i].requires_grad {
                if let Some(g) = g {
                    match &mut self.tensors[i].grad {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&g) {
                                *a += v;
                            }
                        }
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: TensorId) -> bool {
        self.on_path[id.idx()]
    }

    fn ensure<'a>(grads: &'a mut [Option<Vec<f64>>], id: TensorId, numel: usize) -> &'a mut [f64] {
        grads[id.idx()].get_or_insert_with(|| vec![0.0; numel])
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&self, oi: usize, grads: &mut [Option<Vec<f64>>]) {
        macro_rules! dy {
            ($out:expr) => {
                match grads[$out.idx()].take() {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        match &self.ops[oi] {
            Op::Add { a, b, out } => {
                let g = dy!(out);
                for &(id) in [a, b].iter() {
                    if self.wants(*id) {
                        let ga = Self::ensure(grads, *id, g.len());
                        for (x, v) in ga.iter_mut().zip(&g) {
                            *x += v;
                        }
                    }
                }
            }
            Op::Mul { a, b, out } => {
                let g = dy!(out);
                if self.wants(*a) {
                    let bd = self.data(*b).to_vec();
                    let ga = Self::ensure(grads, *a, g.len());
                    for ((x, v), bv) in ga.iter_mut().zip(&g).zip(&bd) {
                        *x += v * bv;
                    }
                }
                if self.wants(*b) {
                    let ad = self.data(*a).to_vec();
                    let gb = Self::ensure(grads, *b, g.len());
                    for ((x, v), av) in gb.iter_mut().zip(&g).zip(&ad) {
                        *x += v * av;
                    }
                }
            }
            Op::Scale { a, c, out } => {
                let g = dy!(out);
                if self.wants(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for (x, v) in ga.iter_mut().zip(&g) {
                        *x += c * v;
                    }
                }
            }
            Op::Matmul { a, b, out, m, k, n } => {
                let g = dy!(out);
                if self.wants(*a) {
                    // dA = dY @ B^T
                    let mut bt = vec![0.0; k * n];
                    kn::transpose(self.data(*b), (*k, *n), &mut bt);
                    let ga = Self::ensure(grads, *a, m * k);
                    kn::matmul(&g, &bt, (*m, *n, *k), ga);
                }
                if self.wants(*b) {
                    // dB = A^T @ dY
                    let mut at = vec![0.0; m * k];
                    kn::transpose(self.data(*a), (*m, *k), &mut at);
                    let gb = Self::ensure(grads, *b, k * n);
                    kn::matmul(&at, &g, (*k, *m, *n), gb);
                }
            }
            Op::Transpose2d { a, out, r, c } => {
                let g = dy!(out);
                if self.wants(*a) {
                    let ga = Self::ensure(grads, *a, r * c);
                    for i in 0..*c {
                        for j in 0..*r {
                            ga[j * c + i] += g[i * r + j];
                        }
                    }
                }
            }
            Op::Reshape { a, out } => {
                let g = dy!(out);
                if self.wants(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for (x, v) in ga.iter_mut().zip(&g) {
                        *x += v;
                    }
                }
            }
            Op::ConcatRows { parts, out } => {
                let g = dy!(out);
                let mut off = 0usize;
                for &p in parts {
                    let numel = self.tensors[p.idx()].numel();
                    if self.wants(p) {
                        let gp = Self::ensure(grads, p, numel);
                        for (x, v) in gp.iter_mut().zip(&g[off..off + numel]) {
                            *x += v;
                        }
                    }
                    off += numel;
                }
            }
            Op::ConcatCols { a, b, out, rows, ca, cb } => {
                let g = dy!(out);
                let w = ca + cb;
                if self.wants(*a) {
                    let ga = Self::ensure(grads, *a, rows * ca);
                    for i in 0..*rows {
                        for j in 0..*ca {
                            ga[i * ca + j] += g[i * w + j];
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = Self::ensure(grads, *b, rows * cb);
                    for i in 0..*rows {
                        for j in 0..*cb {
                            gb[i * cb + j] += g[i * w + ca + j];
                        }
                    }
                }
            }
            Op::GatherRows { a, out, idx, cols } => {
                let g = dy!(out);
                if self.wants(*a) {
                    let numel = self.tensors[a.idx()].numel();
                    let ga = Self::ensure(grads, *a, numel);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..*cols {
                            ga[src * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::MulRowsVec { a, v, out, rows, cols } => {
                let g = dy!(out);
                if self.wants(*a) {
                    let vd = self.data(*v).to_vec();
                    let ga = Self::ensure(grads, *a, rows * cols);
                    for i in 0..*rows {
                        for j in 0..*cols {
                            ga[i * cols + j] += g[i * cols + j] * vd[i];
                        }
                    }
                }
                if self.wants(*v) {
                    let ad = self.data(*a).to_vec();
                    let gv = Self::ensure(grads, *v, *rows);
                    for i in 0..*rows {
                        let mut acc = 0.0;
                        for j in 0..*cols {
                            acc += g[i * cols + j] * ad[i * cols + j];
                        }
                        gv[i] += acc;
                    }
                }
            }
            Op::MulColsVec { a, v, out, rows, cols } => {
                let g = dy!(out);
                if self.wants(*a) {
                    let vd = self.data(*v).to_vec();
                    let ga = Self::ensure(grads, *a, rows * cols);
                    for i in 0..*rows {
                        for j in 0..*cols {
                            ga[i * cols + j] += g[i * cols + j] * vd[j];
                        }
                    }
                }
                if self.wants(*v) {
                    let ad = self.data(*a).to_vec();
                    let gv = Self::ensure(grads, *v, *cols);
                    for i in 0..*rows {
                        for j in 0..*cols {
                            gv[j] += g[i * cols + j] * ad[i * cols + j];
                        }
                    }
                }
            }
            Op::AddRowVec { a, v, out, rows, cols } => {
                let g = dy!(out);
                if self.wants(*a) {
                    let ga = Self::ensure(grads, *a, rows * cols);
                    for (x, gv) in ga.iter_mut().zip(&g) {
                        *x += gv;
                    }
                }
                if self.wants(*v) {
                    let gv = Self::ensure(grads, *v, *cols);
                    for i in 0..*rows {
                        for j in 0..*cols {
                            gv[j] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::Conv1d { x, k, out, stride, pad, ci, l, co, klen, l_out } => {
                let g = dy!(out);
                let want_x = self.wants(*x);
                let want_k = self.wants(*k);
                if !want_x && !want_k {
                    return;
                }
                let xd = self.data(*x).to_vec();
                let kd = self.data(*k).to_vec();
                let mut gx = if want_x { Some(vec![0.0; ci * l]) } else { None };
                let mut gk = if want_k { Some(vec![0.0; co * ci * klen]) } else { None };
                kn::conv1d_bwd(
                    &xd,
                    (*ci, *l),
                    &kd,
                    (*co, *klen),
                    *stride,
                    *pad,
                    &g,
                    *l_out,
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    let ga = Self::ensure(grads, *x, ci * l);
                    for (a, v) in ga.iter_mut().zip(&gx) {
                        *a += v;
                    }
                }
                if let Some(gk) = gk {
                    let ga = Self::ensure(grads, *k, co * ci * klen);
                    for (a, v) in ga.iter_mut().zip(&gk) {
                        *a += v;
                    }
                }
            }
            Op::Conv2d {
                x, k, out, stride, pf, pt, ci, f, t, co, kf, kt, f_out, t_out,
            } => {
                let g = dy!(out);
                let want_x = self.wants(*x);
                let want_k = self.wants(*k);
                if !want_x && !want_k {
                    return;
                }
                let xd = self.data(*x).to_vec();
                let kd = self.data(*k).to_vec();
                let mut gx = if want_x { Some(vec![0.0; ci * f * t]) } else { None };
                let mut gk = if want_k { Some(vec![0.0; co * ci * kf * kt]) } else { None };
                kn::conv2d_bwd(
                    &xd,
                    (*ci, *f, *t),
                    &kd,
                    (*co, *kf, *kt),
                    *stride,
                    *pf,
                    *pt,
                    &g,
                    (*f_out, *t_out),
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    let ga = Self::ensure(grads, *x, ci * f * t);
                    for (a, v) in ga.iter_mut().zip(&gx) {
                        *a += v;
                    }
                }
                if let Some(gk) = gk {
                    let ga = Self::ensure(grads, *k, co * ci * kf * kt);
                    for (a, v) in ga.iter_mut().zip(&gk) {
                        *a += v;
                    }
                }
            }
            Op::Selu { x, out } => {
                let g = dy!(out);
                if self.wants(*x) {
                    let xd = self.data(*x).to_vec();
                    let gx = Self::ensure(grads, *x, g.len());
                    for ((a, v), xv) in gx.iter_mut().zip(&g).zip(&xd) {
                        *a += v * kn::selu_grad(*xv);
                    }
                }
            }
            Op::Sigmoid { x, out } => {
                let g = dy!(out);
                if self.wants(*x) {
                    let yd = self.data(*out).to_vec();
                    let gx = Self::ensure(grads, *x, g.len());
                    for ((a, v), y) in gx.iter_mut().zip(&g).zip(&yd) {
                        *a += v * y * (1.0 - y);
                    }
                }
            }
            Op::Abs { x, out } => {
                let g = dy!(out);
                if self.wants(*x) {
                    let xd = self.data(*x).to_vec();
                    let gx = Self::ensure(grads, *x, g.len());
                    for ((a, v), xv) in gx.iter_mut().zip(&g).zip(&xd) {
                        *a += v * if *xv > 0.0 {
                            1.0
                        } else if *xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
            }
            Op::MaxPool2d { x, out, arg } | Op::ReduceMaxAxis3 { x, out, arg } => {
                let g = dy!(out);
                if self.wants(*x) {
                    let numel = self.tensors[x.idx()].numel();
                    let gx = Self::ensure(grads, *x, numel);
                    for (o, &src) in arg.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::ReduceSumAxis3 { x, out, axis, c, f, t } => {
                let g = dy!(out);
                if self.wants(*x) {
                    let gx = Self::ensure(grads, *x, c * f * t);
                    if *axis == 1 {
                        for ci in 0..*c {
                            for fi in 0..*f {
                                for ti in 0..*t {
                                    gx[(ci * f + fi) * t + ti] += g[ci * t + ti];
                                }
                            }
                        }
                    } else {
                        for ci in 0..*c {
                            for fi in 0..*f {
                                let gv = g[ci * f + fi];
                                for ti in 0..*t {
                                    gx[(ci * f + fi) * t + ti] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::ReduceMaxRows { a, out, arg } => {
                let g = dy!(out);
                if self.wants(*a) {
                    let numel = self.tensors[a.idx()].numel();
                    let ga = Self::ensure(grads, *a, numel);
                    for (j, &src) in arg.iter().enumerate() {
                        ga[src] += g[j];
                    }
                }
            }
            Op::ReduceMeanRows { a, out, rows, cols } => {
                let g = dy!(out);
                if self.wants(*a) {
                    let ga = Self::ensure(grads, *a, rows * cols);
                    let inv = 1.0 / *rows as f64;
                    for i in 0..*rows {
                        for j in 0..*cols {
                            ga[i * cols + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::SoftmaxRows { a, out, rows, cols } => {
                let g = dy!(out);
                if self.wants(*a) {
                    let yd = self.data(*out).to_vec();
                    let ga = Self::ensure(grads, *a, rows * cols);
                    for i in 0..*rows {
                        let y = &yd[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..*cols {
                            ga[i * cols + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::ReduceSumAll { x, out } => {
                let g = dy!(out);
                if self.wants(*x) {
                    let numel = self.tensors[x.idx()].numel();
                    let gx = Self::ensure(grads, *x, numel);
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::WeightedCe { logits, out, labels, weights } => {
                let g = dy!(out);
                if self.wants(*logits) {
                    let ld = self.data(*logits).to_vec();
                    let b = labels.len();
                    let gl = Self::ensure(grads, *logits, 2 * b);
                    for (i, &lab) in labels.iter().enumerate() {
                        let (lp0, lp1) = kn::log_softmax2(ld[2 * i], ld[2 * i + 1]);
                        let (p0, p1) = (lp0.exp(), lp1.exp());
                        let w = weights[lab as usize] / b as f64;
                        let (y0, y1) = if lab == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
                        gl[2 * i] += g[0] * w * (p0 - y0);
                        gl[2 * i + 1] += g[0] * w * (p1 - y1);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, out, c, n, train_stats, mean, invstd } => {
                let g = dy!(out);
                let _ = out;
                let xd = self.data(*x).to_vec();
                let gd = self.data(*gamma).to_vec();
                if self.wants(*gamma) {
                    let gg = Self::ensure(grads, *gamma, *c);
                    for ci in 0..*c {
                        let (m, is) = (mean[ci], invstd[ci]);
                        let mut acc = 0.0;
                        for j in 0..*n {
                            acc += g[ci * n + j] * (xd[ci * n + j] - m) * is;
                        }
                        gg[ci] += acc;
                    }
                }
                if self.wants(*beta) {
                    let gb = Self::ensure(grads, *beta, *c);
                    for ci in 0..*c {
                        gb[ci] += g[ci * n..(ci + 1) * n].iter().sum::<f64>();
                    }
                }
                if self.wants(*x) {
                    let gx = Self::ensure(grads, *x, c * n);
                    for ci in 0..*c {
                        let (m, is, ga) = (mean[ci], invstd[ci], gd[ci]);
                        if *train_stats {
                            // full backward through batch statistics
                            let nn = *n as f64;
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for j in 0..*n {
                                let xh = (xd[ci * n + j] - m) * is;
                                sum_g += g[ci * n + j];
                                sum_gx += g[ci * n + j] * xh;
                            }
                            for j in 0..*n {
                                let xh = (xd[ci * n + j] - m) * is;
                                gx[ci * n + j] +=
                                    ga * is * (g[ci * n + j] - sum_g / nn - xh * sum_gx / nn);
                            }
                        } else {
                            for j in 0..*n {
                                gx[ci * n + j] += g[ci * n + j] * ga * is;
                            }
                        }
                    }
                }
            }
            Op::ElemMax { a, b, out } => {
                let g = dy!(out);
                let ad = self.data(*a).to_vec();
                let bd = self.data(*b).to_vec();
                if self.wants(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for i in 0..g.len() {
                        if ad[i] >= bd[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = Self::ensure(grads, *b, g.len());
                    for i in 0..g.len() {
                        if ad[i] < bd[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::BroadcastMulFT { s, w, out, c, f, t } => {
                let g = dy!(out);
                let ft = f * t;
                if self.wants(*s) {
                    let wd = self.data(*w).to_vec();
                    let gs = Self::ensure(grads, *s, c * ft);
                    for ci in 0..*c {
                        for j in 0..ft {
                            gs[ci * ft + j] += g[ci * ft + j] * wd[j];
                        }
                    }
                }
                if self.wants(*w) {
                    let sd = self.data(*s).to_vec();
                    let gw = Self::ensure(grads, *w, ft);
                    for ci in 0..*c {
                        for j in 0..ft {
                            gw[j] += g[ci * ft + j] * sd[ci * ft + j];
                        }
                    }
                }
            }
            Op::SincKernels { low, band, out, klen, sample_rate } => {
                let g = dy!(out);
                let want_low = self.wants(*low);
                let want_band = self.wants(*band);
                if !want_low && !want_band {
                    return;
                }
                let nf = self.tensors[low.idx()].numel();
                let lowd = self.data(*low).to_vec();
                let bandd = self.data(*band).to_vec();
                let mut glow = vec![0.0; nf];
                let mut gband = vec![0.0; nf];
                for i in 0..nf {
                    let mut grow = g[i * klen..(i + 1) * klen].to_vec();
                    // projection is symmetric: propagate through it first
                    project_out_dc_nyquist(&mut grow);
                    let (dl, db) =
                        sinc_row_backward(&grow, lowd[i], bandd[i], *klen, *sample_rate);
                    glow[i] = dl;
                    gband[i] = db;
                }
                if want_low {
                    let ga = Self::ensure(grads, *low, nf);
                    for (a, v) in ga.iter_mut().zip(&glow) {
                        *a += v;
                    }
                }
                if want_band {
                    let ga = Self::ensure(grads, *band, nf);
                    for (a, v) in ga.iter_mut().zip(&gband) {
                        *a += v;
                    }
                }
            }
        }
    }
}

// ── sinc synthesis helpers ───────────────────────────────────────────

fn clamp_cutoffs(low: f64, band: f64, sample_rate: f64) -> (f64, f64) {
    let max_hz = sample_rate / 2.0 * SINC_MAX_HZ_FRACTION;
    let f1 = low.clamp(SINC_MIN_LOW_HZ, max_hz - SINC_MIN_BAND_HZ);
    let f2 = (f1 + band.max(SINC_MIN_BAND_HZ)).min(max_hz);
    (f1 / sample_rate, f2 / sample_rate)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

fn sinc_deriv(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        -x / 3.0
    } else {
        (x.cos() - x.sin() / x) / x
    }
}

fn hamming(n: usize, klen: usize) -> f64 {
    0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (klen - 1) as f64).cos()
}

/// h[n] = w[n] * (2 f2 sinc(2 pi f2 m) - 2 f1 sinc(2 pi f1 m)), m centered.
fn synth_bandpass(row: &mut [f64], f1: f64, f2: f64, klen: usize) {
    let center = (klen - 1) as f64 / 2.0;
    let tau = 2.0 * std::f64::consts::PI;
    for (n, h) in row.iter_mut().enumerate() {
        let m = n as f64 - center;
        let lp2 = 2.0 * f2 * sinc(tau * f2 * m);
        let lp1 = 2.0 * f1 * sinc(tau * f1 * m);
        *h = hamming(n, klen) * (lp2 - lp1);
    }
}

/// Remove the DC and Nyquist frequency components of a kernel in place.
/// The projection matrix is symmetric, so it is its own adjoint.
fn project_out_dc_nyquist(row: &mut [f64]) {
    let klen = row.len() as f64;
    let dc: f64 = row.iter().sum();
    let nyq: f64 = row
        .iter()
        .enumerate()
        .map(|(n, &v)| if n % 2 == 0 { v } else { -v })
        .sum();
    for (n, v) in row.iter_mut().enumerate() {
        let s = if n % 2 == 0 { 1.0 } else { -1.0 };
        *v -= dc / klen + s * nyq / klen;
    }
}

/// d/d(low_hz), d/d(band_hz) of the synthesized row, chained with the
/// cutoff clamps.
fn sinc_row_backward(
    grow: &[f64],
    low: f64,
    band: f64,
    klen: usize,
    sample_rate: f64,
) -> (f64, f64) {
    let max_hz = sample_rate / 2.0 * SINC_MAX_HZ_FRACTION;
    let f1_hz = low.clamp(SINC_MIN_LOW_HZ, max_hz - SINC_MIN_BAND_HZ);
    let band_eff = band.max(SINC_MIN_BAND_HZ);
    let f2_hz = (f1_hz + band_eff).min(max_hz);
    let mask1 = (low > SINC_MIN_LOW_HZ && low < max_hz - SINC_MIN_BAND_HZ) as u8 as f64;
    let mask2 = (f1_hz + band_eff < max_hz) as u8 as f64;
    let maskb = (band > SINC_MIN_BAND_HZ) as u8 as f64;

    let f1 = f1_hz / sample_rate;
    let f2 = f2_hz / sample_rate;
    let center = (klen - 1) as f64 / 2.0;
    let tau = 2.0 * std::f64::consts::PI;
    let mut d_f1 = 0.0;
    let mut d_f2 = 0.0;
    for (n, &gv) in grow.iter().enumerate() {
        let m = n as f64 - center;
        let w = hamming(n, klen);
        // d/df [2 f sinc(tau f m)] = 2 sinc(tau f m) + 2 f sinc'(tau f m) tau m
        let dlp2 = 2.0 * sinc(tau * f2 * m) + 2.0 * f2 * sinc_deriv(tau * f2 * m) * tau * m;
        let dlp1 = 2.0 * sinc(tau * f1 * m) + 2.0 * f1 * sinc_deriv(tau * f1 * m) * tau * m;
        d_f2 += gv * w * dlp2;
        d_f1 += gv * w * (-dlp1);
    }
    // to Hz, through the clamps; f2 depends on f1 via the sum
    let d_f1_hz = d_f1 / sample_rate;
    let d_f2_hz = d_f2 / sample_rate;
    let dlow = mask1 * (d_f1_hz + mask2 * d_f2_hz);
    let dband = maskb * mask2 * d_f2_hz;
    (dlow, dband)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.input_grad(t(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]));
        let loss = g.reduce_sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input_grad(t(&[2], vec![1.0, 2.0]));
        let y = g.selu(x);
        let err = g.backward(y).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn conv1d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 8], vec![0.0; 16]));
        let k = g.input(t(&[1, 3, 3], vec![0.0; 9]));
        let err = g.conv1d(x, k, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channel axis"));
    }

    #[test]
    fn conv1d_kernel_longer_than_input_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 4], vec![0.0; 4]));
        let k = g.input(t(&[1, 1, 9], vec![0.0; 9]));
        let err = g.conv1d(x, k, 1, 0).unwrap_err();
        assert!(err.to_string().contains("axis L"));
    }

    #[test]
    fn softmax_rows_sums_to_one() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 4], vec![0.0, 1.0, 2.0, 3.0, -1.0, 0.0, 1.0, 2.0]));
        let y = g.softmax_rows(x).unwrap();
        for i in 0..2 {
            let s: f64 = g.data(y)[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_quarter_three_quarters() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], vec![0.0, 3.0f64.ln()]));
        let y = g.softmax_axis(x, 0).unwrap();
        assert!((g.data(y)[0] - 0.25).abs() < 1e-12);
        assert!((g.data(y)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn uniform_softmax_over_four() {
        let mut g = Graph::new();
        let x = g.input(t(&[4], vec![0.7; 4]));
        let y = g.softmax_axis(x, 0).unwrap();
        for &v in g.data(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_ce_uniform_logits_is_ln2() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], vec![0.3, 0.3, -1.0, -1.0]));
        let loss = g.weighted_cross_entropy(x, &[0, 1], [1.0, 1.0]).unwrap();
        assert!((g.data(loss)[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_ce_perfect_margin_loss_vanishes() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], vec![30.0, -30.0, -30.0, 30.0]));
        let loss = g.weighted_cross_entropy(x, &[0, 1], [9.0, 1.0]).unwrap();
        assert!(g.data(loss)[0] < 1e-12);
    }

    #[test]
    fn weighted_ce_class_weight_scales_gradient_nine_to_one() {
        // mirrored errors: bona-fide row and spoof row with identical margins
        let mut g = Graph::new();
        let x = g.input_grad(t(&[2, 2], vec![0.2, 0.9, 0.9, 0.2]));
        let loss = g.weighted_cross_entropy(x, &[0, 1], [9.0, 1.0]).unwrap();
        g.backward(loss).unwrap();
        let gr = g.grad(x).unwrap();
        let bona_mag = gr[0].abs();
        let spoof_mag = gr[2].abs();
        assert!((bona_mag / spoof_mag - 9.0).abs() < 1e-9);
    }

    #[test]
    fn batchnorm_two_value_batch_normalizes_to_unit() {
        let mut g = Graph::new();
        let gamma = g.add_param("g", t(&[1], vec![1.0])).unwrap();
        let beta = g.add_param("b", t(&[1], vec![0.0])).unwrap();
        let rm = g.add_buffer("rm", t(&[1], vec![0.0])).unwrap();
        let rv = g.add_buffer("rv", t(&[1], vec![1.0])).unwrap();
        let x = g.input(t(&[1, 1, 2], vec![1.0, 3.0]));
        let y = g.batchnorm(x, gamma, beta, rm, rv, 1e-5, 0.1).unwrap();
        // {1,3} -> mean 2, var 1 -> {-1,+1} before affine (within eps tolerance)
        assert!((g.data(y)[0] + 1.0).abs() < 1e-4);
        assert!((g.data(y)[1] - 1.0).abs() < 1e-4);
        // running stats moved toward batch stats with momentum 0.1
        assert!((g.data(rm)[0] - 0.2).abs() < 1e-12);
        assert!((g.data(rv)[0] - (0.9 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_constant_channel_yields_beta() {
        let mut g = Graph::new();
        let gamma = g.add_param("g", t(&[1], vec![1.5])).unwrap();
        let beta = g.add_param("b", t(&[1], vec![0.7])).unwrap();
        let rm = g.add_buffer("rm", t(&[1], vec![0.0])).unwrap();
        let rv = g.add_buffer("rv", t(&[1], vec![1.0])).unwrap();
        let x = g.input(t(&[1, 2, 2], vec![5.0; 4]));
        let y = g.batchnorm(x, gamma, beta, rm, rv, 1e-5, 0.1).unwrap();
        for &v in g.data(y) {
            assert!((v - 0.7).abs() < 1e-9, "zero-variance channel must map to beta");
        }
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        let mut g = Graph::new();
        let gamma = g.add_param("g", t(&[1], vec![1.0])).unwrap();
        let beta = g.add_param("b", t(&[1], vec![0.0])).unwrap();
        let rm = g.add_buffer("rm", t(&[1], vec![0.0])).unwrap();
        let rv = g.add_buffer("rv", t(&[1], vec![1.0])).unwrap();
        // zero-mean unit-variance data
        let vals = vec![-1.0, 1.0, -1.0, 1.0];
        let x = g.input(t(&[1, 1, 4], vals.clone()));
        let y = g.batchnorm(x, gamma, beta, rm, rv, 1e-5, 0.1).unwrap();
        for (a, b) in g.data(y).iter().zip(&vals) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn maxpool_constant_tensor_stays_constant() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 4, 6], vec![2.5; 24]));
        let y = g.maxpool2d(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 3]);
        assert!(g.data(y).iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_ramp_blocks() {
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.input(t(&[1, 4, 4], vals));
        let y = g.maxpool2d(x, 2).unwrap();
        // brute-force block maxima
        assert_eq!(g.data(y), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn maxpool_shape_from_model_table() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 128, 201]));
        let y = g.maxpool2d(x, 3).unwrap();
        assert_eq!(g.shape(y), &[1, 42, 67]);
    }

    #[test]
    fn elem_max_commutes_and_idempotent() {
        let mut g = Graph::new();
        let a = g.input(t(&[3], vec![1.0, -5.0, 2.0]));
        let b = g.input(t(&[3], vec![0.0, 7.0, 2.0]));
        let m1 = g.elem_max(a, b).unwrap();
        let m2 = g.elem_max(b, a).unwrap();
        let m3 = g.elem_max(a, a).unwrap();
        assert_eq!(g.data(m1), g.data(m2));
        assert_eq!(g.data(m3), g.data(a));
    }

    #[test]
    fn sinc_kernels_have_no_dc_or_nyquist() {
        let mut g = Graph::new();
        let low = g.input(t(&[2], vec![300.0, 4000.0]));
        let band = g.input(t(&[2], vec![200.0, 800.0]));
        let k = g.sinc_kernels(low, band, 65, 16000.0).unwrap();
        for i in 0..2 {
            let row = &g.data(k)[i * 65..(i + 1) * 65];
            let dc: f64 = row.iter().sum();
            let nyq: f64 = row
                .iter()
                .enumerate()
                .map(|(n, &v)| if n % 2 == 0 { v } else { -v })
                .sum();
            assert!(dc.abs() < 1e-12);
            assert!(nyq.abs() < 1e-12);
        }
    }

    #[test]
    fn reset_tape_keeps_parameters() {
        let mut g = Graph::new();
        let p = g.add_param("w", t(&[2], vec![1.0, 2.0])).unwrap();
        let x = g.input(t(&[2], vec![3.0, 4.0]));
        let y = g.mul(p, x).unwrap();
        let loss = g.reduce_sum_all(y);
        g.backward(loss).unwrap();
        assert!(g.grad(p).is_some());
        g.reset_tape();
        assert_eq!(g.data(p), &[1.0, 2.0]);
        assert!(g.grad(p).is_none());
        assert_eq!(g.op_count(), 0);
    }
}
